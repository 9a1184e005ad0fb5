//! Synthetic evaluation data: textured tissue-like slices related by known
//! smooth deformations.
//!
//! Slice k+1 is slice k warped by a fresh random field (a sum of Gaussian
//! bumps, tapered to zero near the borders so no content falls off the
//! canvas) plus a small independent texture drift. The stored truth field
//! for each pair is the numerical inverse of the generating field, i.e. the
//! field that warps slice k+1 back onto slice k.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::derive_seed;
use crate::error::Result;
use crate::field::{warp, DisplacementField, Window};
use crate::kernels::sample;
use crate::stack::ImageStack;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticStackSpec {
    /// Square slice side in pixels.
    pub size: usize,
    /// Number of slices.
    pub slices: usize,
    /// Draw thin dark membrane-like curves over the texture.
    pub membranes: bool,
    /// Gaussian bumps per deformation field.
    pub bumps: usize,
    /// Upper bound on per-pixel displacement magnitude, in pixels.
    pub max_displacement_px: f64,
    /// Amplitude of the per-slice independent intensity drift.
    pub drift: f64,
    pub seed: u64,
}

impl Default for SyntheticStackSpec {
    fn default() -> Self {
        SyntheticStackSpec {
            size: 96,
            slices: 8,
            membranes: true,
            bumps: 4,
            max_displacement_px: 8.0,
            drift: 0.02,
            seed: 0,
        }
    }
}

/// Band-limited value noise in [0, 1]: a random lattice of the given cell
/// size, sampled with smoothstep interpolation.
fn value_noise(size: usize, cell: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let cell = cell.max(2);
    let gw = size / cell + 2;
    let lattice: Vec<f64> = (0..gw * gw).map(|_| rng.random_range(0.0..1.0)).collect();
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let mut out = vec![0.0; size * size];
    for y in 0..size {
        let fy = y as f64 / cell as f64;
        let y0 = fy.floor() as usize;
        let ty = smooth(fy - y0 as f64);
        for x in 0..size {
            let fx = x as f64 / cell as f64;
            let x0 = fx.floor() as usize;
            let tx = smooth(fx - x0 as f64);
            let v00 = lattice[y0 * gw + x0];
            let v01 = lattice[y0 * gw + x0 + 1];
            let v10 = lattice[(y0 + 1) * gw + x0];
            let v11 = lattice[(y0 + 1) * gw + x0 + 1];
            let top = v00 + tx * (v01 - v00);
            let bot = v10 + tx * (v11 - v10);
            out[y * size + x] = top + ty * (bot - top);
        }
    }
    out
}

/// Tissue-like base texture: three octaves of value noise, optionally cut by
/// thin dark membrane curves. Values stay strictly positive so nothing reads
/// as missing data.
pub fn base_texture(size: usize, membranes: bool, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let octaves = [
        (size / 6, 1.0),
        (size / 12, 0.5),
        (size / 24, 0.25),
    ];
    let mut combined = vec![0.0f64; size * size];
    let mut total = 0.0;
    for &(cell, amp) in &octaves {
        let noise = value_noise(size, cell, rng);
        for (c, n) in combined.iter_mut().zip(&noise) {
            *c += amp * n;
        }
        total += amp;
    }
    for c in combined.iter_mut() {
        *c /= total;
    }

    let membrane_field = if membranes { Some(value_noise(size, (size / 8).max(2), rng)) } else { None };
    Tensor::from_fn(&[size, size], |i| {
        let mut v = 0.10 + 0.86 * combined[i];
        if let Some(m) = &membrane_field {
            if (m[i] - 0.5).abs() < 0.04 {
                v *= 0.18;
            }
        }
        v as f32
    })
}

/// Smooth random displacement field: a sum of Gaussian bumps rescaled so the
/// largest component magnitude is `max_px` pixels, tapered to zero within a
/// border band so warps never pull missing data into the frame interior.
pub fn random_smooth_field(
    size: usize,
    bumps: usize,
    max_px: f64,
    rng: &mut ChaCha8Rng,
) -> DisplacementField<f32> {
    let mut dx = vec![0.0f64; size * size];
    let mut dy = vec![0.0f64; size * size];
    for _ in 0..bumps.max(1) {
        let cy = rng.random_range(0.2..0.8) * size as f64;
        let cx = rng.random_range(0.2..0.8) * size as f64;
        let sigma = rng.random_range(size as f64 / 8.0..size as f64 / 3.0);
        let ax = rng.random_range(-1.0..1.0);
        let ay = rng.random_range(-1.0..1.0);
        for y in 0..size {
            for x in 0..size {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                let g = (-d2 / (2.0 * sigma * sigma)).exp();
                dx[y * size + x] += ax * g;
                dy[y * size + x] += ay * g;
            }
        }
    }
    // border taper: full amplitude in the interior, zero at the edge
    let band = (size as f64 / 8.0).max(2.0);
    for y in 0..size {
        for x in 0..size {
            let edge = y.min(x).min(size - 1 - y).min(size - 1 - x) as f64;
            let t = (edge / band).min(1.0);
            let s = t * t * (3.0 - 2.0 * t);
            dx[y * size + x] *= s;
            dy[y * size + x] *= s;
        }
    }
    let peak = dx
        .iter()
        .chain(dy.iter())
        .fold(0.0f64, |m, &v| m.max(v.abs()))
        .max(1e-12);
    let scale = max_px / peak;
    let to_norm = 2.0 / (size - 1) as f64;
    let mut field = DisplacementField::zeros(size, size);
    for y in 0..size {
        for x in 0..size {
            field.set(
                y,
                x,
                (dx[y * size + x] * scale * to_norm) as f32,
                (dy[y * size + x] * scale * to_norm) as f32,
            );
        }
    }
    field
}

/// Numerical inverse of a displacement field by fixed-point iteration:
/// T <- -G(r + T(r)). Converges quickly for smooth sub-unit-gradient fields.
pub fn invert_field(g: &DisplacementField<f32>, iterations: usize) -> DisplacementField<f32> {
    let (h, w) = (g.h(), g.w());
    let mut inv = g.tensor().map(|v| -v);
    for _ in 0..iterations {
        // sample g at r + T(r): warp the field planes by the current inverse
        let mut sampled = Tensor::<f32>::zeros(&[2, h, w]);
        sample::warp_forward(
            g.tensor().data(),
            1,
            2,
            h,
            w,
            inv.data(),
            Window::full(h, w),
            sampled.data_mut(),
        );
        inv = sampled.map(|v| -v);
    }
    DisplacementField::from_tensor(inv).expect("field dims preserved")
}

/// Generate the stack plus one truth field per consecutive pair; truth k
/// warps slice k+1 back onto slice k.
pub fn generate_stack(
    spec: &SyntheticStackSpec,
) -> Result<(ImageStack, Vec<DisplacementField<f32>>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, 0x517A));
    let mut slices = Vec::with_capacity(spec.slices);
    slices.push(base_texture(spec.size, spec.membranes, &mut rng));

    let mut truths = Vec::new();
    for _ in 1..spec.slices {
        let prev = slices.last().unwrap();
        let (next, truth) = deform_slice(prev, spec, &mut rng)?;
        slices.push(next);
        truths.push(truth);
    }
    Ok((ImageStack::new(slices)?, truths))
}

fn deform_slice(
    prev: &Tensor<f32>,
    spec: &SyntheticStackSpec,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor<f32>, DisplacementField<f32>)> {
    let size = spec.size;
    let (warped, truth) = if spec.max_displacement_px > 0.0 {
        let g = random_smooth_field(size, spec.bumps, spec.max_displacement_px, rng);
        (warp(prev, &g)?, invert_field(&g, 30))
    } else {
        (prev.clone(), DisplacementField::zeros(size, size))
    };
    let next = if spec.drift > 0.0 {
        let noise = value_noise(size, (size / 10).max(2), rng);
        let amp = spec.drift;
        Tensor::from_fn(&[size, size], |i| {
            let v = warped.data()[i] as f64 + amp * (noise[i] * 2.0 - 1.0);
            v.clamp(0.02, 0.995) as f32
        })
    } else {
        warped
    };
    Ok((next, truth))
}
