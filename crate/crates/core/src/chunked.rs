//! Tiled processing for images too large to run whole.
//!
//! Field generation runs the model on each tile expanded by a crop margin
//! and keeps only the interior. Because every geometric op computes its
//! sample positions in canvas-global coordinates (see the sampling kernels),
//! a margin of at least the model's receptive-field radius makes the
//! assembled field bitwise equal to monolithic inference on every pixel
//! farther than the margin from the image border. Warping loads, per output
//! tile, the source region expanded by the displacement bound (the halo) and
//! reproduces the monolithic warp exactly.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{DisplacementField, Window};
use crate::kernels::sample;
use crate::model::{EncoderMode, ModelConfig, ModelParams, ALIGNER_CHANNELS, ALIGNER_KERNEL, ENCODER_KERNEL};
use crate::tensor::Tensor;

/// One layer of a receptive-field computation.
#[derive(Debug, Clone, Copy)]
pub struct LayerGeom {
    pub kernel: usize,
    pub stride: usize,
}

impl LayerGeom {
    pub fn conv(kernel: usize) -> Self {
        LayerGeom { kernel, stride: 1 }
    }

    pub fn pool2() -> Self {
        LayerGeom { kernel: 2, stride: 2 }
    }
}

/// One-sided receptive-field radius, in input pixels, of a layer stack.
/// Odd kernels contribute symmetrically; even kernels are counted with their
/// full one-sided reach.
pub fn receptive_field_radius(layers: &[LayerGeom]) -> usize {
    let mut reach = 0usize;
    let mut jump = 1usize;
    for l in layers {
        if l.kernel % 2 == 1 {
            reach += (l.kernel - 1) / 2 * jump;
        } else {
            reach += (l.kernel - 1) * jump;
        }
        jump *= l.stride.max(1);
    }
    reach
}

/// Analytic receptive-field radius of the finest output field, in full-
/// resolution pixels, from kernel sizes, pooling, and upsampling across the
/// hierarchy. Internal warps are budgeted one pixel of displacement per
/// level (plus the bilinear tap), which holds whenever per-level fields stay
/// below one pixel of their own resolution.
pub fn fov_radius(cfg: &ModelConfig) -> usize {
    let top = cfg.levels;
    let mut enc_reach = vec![0usize; top + 1];
    for n in 0..=top {
        enc_reach[n] = match cfg.mode {
            EncoderMode::Learned => {
                let convs = 2 * ((ENCODER_KERNEL - 1) / 2);
                if n == 0 {
                    convs
                } else {
                    let j = 1usize << (n - 1);
                    enc_reach[n - 1] + convs * j + j
                }
            }
            // pure average pooling chain
            EncoderMode::ImagePyramid => (1usize << n) - 1,
        };
    }
    let aligner = receptive_field_radius(&vec![LayerGeom::conv(ALIGNER_KERNEL); ALIGNER_CHANNELS.len()]);
    let warp_allow = |n: usize| 2usize << n;

    let mut r = (enc_reach[top] + warp_allow(top)) + aligner * (1 << top);
    for n in (0..top).rev() {
        let parent = r + (1usize << (n + 1)); // upsample taps at level n+1
        let conv_in = (enc_reach[n] + warp_allow(n)).max(parent);
        r = conv_in + aligner * (1 << n);
    }
    r
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ChunkPlan {
    /// Output tile side for field generation; multiple of 2^levels.
    pub field_tile: usize,
    /// Crop margin around each field tile; multiple of 2^levels. Exactness
    /// requires margin >= fov_radius.
    pub field_margin: usize,
    /// Output tile side for the warping stage.
    pub warp_tile: usize,
    /// Upper bound on displacement magnitudes, in pixels, used to size the
    /// warp halo; exceeding it is an error.
    pub max_displacement_px: f64,
    /// Demand bitwise interior equality with monolithic inference; rejects
    /// margins below the receptive-field radius.
    pub exact: bool,
}

impl Default for ChunkPlan {
    fn default() -> Self {
        ChunkPlan {
            field_tile: 256,
            field_margin: 64,
            warp_tile: 512,
            max_displacement_px: 16.0,
            exact: false,
        }
    }
}

/// Peak per-tile buffer sizes observed during a chunked run.
#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct ChunkStats {
    pub field_tiles: usize,
    pub warp_tiles: usize,
    /// Largest field-stage patch, in pixels.
    pub max_patch_pixels: usize,
    /// Largest warp-stage halo buffer, in pixels.
    pub max_halo_pixels: usize,
}

fn round_up(v: usize, to: usize) -> usize {
    v.div_ceil(to) * to
}

/// Copy the part of `img` overlapping [y0, y0+side) x [x0, x0+side) into a
/// zero-filled square buffer.
fn extract_patch(img: &Tensor<f32>, y0: usize, x0: usize, side: usize) -> Tensor<f32> {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let mut out = Tensor::zeros(&[side, side]);
    let y1 = (y0 + side).min(h);
    let x1 = (x0 + side).min(w);
    for gy in y0..y1 {
        for gx in x0..x1 {
            out.set2(gy - y0, gx - x0, img.at2(gy, gx));
        }
    }
    out
}

/// Tile-wise field generation. Returns the assembled full-resolution field
/// and buffer statistics.
pub fn generate_field_chunked(
    source: &Tensor<f32>,
    target: &Tensor<f32>,
    model: &ModelParams<f32>,
    plan: &ChunkPlan,
) -> Result<(DisplacementField<f32>, ChunkStats)> {
    if source.rank() != 2 || source.shape() != target.shape() {
        return Err(Error::ShapeMismatch(format!(
            "chunked field: source {:?} vs target {:?}",
            source.shape(),
            target.shape()
        )));
    }
    let (h, w) = (source.shape()[0], source.shape()[1]);
    let div = 1usize << model.config.levels;
    if plan.field_tile == 0 || plan.field_tile % div != 0 || plan.field_margin % div != 0 {
        return Err(Error::InvalidArgument(format!(
            "field tile {} and margin {} must be nonzero multiples of 2^{} (margin may be 0)",
            plan.field_tile, plan.field_margin, model.config.levels
        )));
    }
    if plan.exact {
        let fov = fov_radius(&model.config);
        if plan.field_margin < fov {
            return Err(Error::InvalidArgument(format!(
                "exact chunking needs margin >= receptive-field radius {fov}, got {}",
                plan.field_margin
            )));
        }
    }

    // virtual canvas: the image padded up to pooling alignment
    let full = Window { oy: 0, ox: 0, full_h: round_up(h, div), full_w: round_up(w, div) };

    let mut jobs = Vec::new();
    let mut ty = 0;
    while ty < h {
        let th = plan.field_tile.min(h - ty);
        let mut tx = 0;
        while tx < w {
            let tw = plan.field_tile.min(w - tx);
            jobs.push((ty, tx, th, tw));
            tx += plan.field_tile;
        }
        ty += plan.field_tile;
    }

    let m = plan.field_margin;
    let results: Vec<(usize, usize, usize, usize, usize, usize, usize, DisplacementField<f32>)> =
        jobs.par_iter()
            .map(|&(ty, tx, th, tw)| {
                let y0 = ty.saturating_sub(m);
                let x0 = tx.saturating_sub(m);
                let side = round_up((th.max(tw)) + 2 * m, div);
                let src = extract_patch(source, y0, x0, side);
                let tgt = extract_patch(target, y0, x0, side);
                let win = Window { oy: y0, ox: x0, ..full };
                let field = model.infer_finest_windowed(&src, &tgt, win)?;
                Ok((ty, tx, th, tw, y0, x0, side, field))
            })
            .collect::<Result<_>>()?;

    let mut assembled = DisplacementField::zeros(h, w);
    let mut stats = ChunkStats::default();
    for (ty, tx, th, tw, y0, x0, side, field) in results {
        stats.field_tiles += 1;
        stats.max_patch_pixels = stats.max_patch_pixels.max(side * side);
        for y in 0..th {
            for x in 0..tw {
                let (py, px) = (ty + y - y0, tx + x - x0);
                assembled.set(ty + y, tx + x, field.dx(py, px), field.dy(py, px));
            }
        }
    }
    Ok((assembled, stats))
}

/// Tile-wise warping with displacement halos; bitwise equal to the
/// monolithic warp whenever the field obeys the plan's displacement bound.
pub fn warp_chunked(
    source: &Tensor<f32>,
    field: &DisplacementField<f32>,
    plan: &ChunkPlan,
) -> Result<(Tensor<f32>, ChunkStats)> {
    if source.rank() != 2 {
        return Err(Error::ShapeMismatch(format!("warp_chunked source {:?}", source.shape())));
    }
    let (h, w) = (source.shape()[0], source.shape()[1]);
    if field.h() != h || field.w() != w {
        return Err(Error::ShapeMismatch(format!(
            "warp_chunked: image {h}x{w} vs field {}x{}",
            field.h(),
            field.w()
        )));
    }
    if plan.warp_tile == 0 {
        return Err(Error::InvalidArgument("warp_tile must be nonzero".into()));
    }
    let halo = plan.max_displacement_px.ceil() as usize + 1;
    let half_w = sample::half_span::<f32>(w) as f64;
    let half_h = sample::half_span::<f32>(h) as f64;

    let mut jobs = Vec::new();
    let mut ty = 0;
    while ty < h {
        let th = plan.warp_tile.min(h - ty);
        let mut tx = 0;
        while tx < w {
            let tw = plan.warp_tile.min(w - tx);
            jobs.push((ty, tx, th, tw));
            tx += plan.warp_tile;
        }
        ty += plan.warp_tile;
    }

    let results: Vec<(usize, usize, usize, usize, usize, Vec<f32>)> = jobs
        .par_iter()
        .map(|&(ty, tx, th, tw)| {
            // enforce the displacement bound before touching any pixels
            for y in ty..ty + th {
                for x in tx..tx + tw {
                    let dx_px = (field.dx(y, x) as f64 * half_w).abs();
                    let dy_px = (field.dy(y, x) as f64 * half_h).abs();
                    if dx_px > plan.max_displacement_px || dy_px > plan.max_displacement_px {
                        return Err(Error::DisplacementBound(format!(
                            "tile at ({ty},{tx}): displacement {:.2} px exceeds bound {} px",
                            dx_px.max(dy_px),
                            plan.max_displacement_px
                        )));
                    }
                }
            }
            let y0 = ty.saturating_sub(halo);
            let x0 = tx.saturating_sub(halo);
            let bh = (ty + th + halo).min(h) - y0;
            let bw = (tx + tw + halo).min(w) - x0;

            // halo-footprint buffers; outputs outside the tile are discarded
            let mut src = vec![0.0f32; bh * bw];
            for gy in y0..y0 + bh {
                for gx in x0..x0 + bw {
                    src[(gy - y0) * bw + (gx - x0)] = source.at2(gy, gx);
                }
            }
            let mut fbuf = vec![0.0f32; 2 * bh * bw];
            for gy in y0..y0 + bh {
                for gx in x0..x0 + bw {
                    fbuf[(gy - y0) * bw + (gx - x0)] = field.dx(gy, gx);
                    fbuf[bh * bw + (gy - y0) * bw + (gx - x0)] = field.dy(gy, gx);
                }
            }
            let win = Window { oy: y0, ox: x0, full_h: h, full_w: w };
            let mut out = vec![0.0f32; bh * bw];
            sample::warp_forward(&src, 1, 1, bh, bw, &fbuf, win, &mut out);

            let mut tile = vec![0.0f32; th * tw];
            for y in 0..th {
                for x in 0..tw {
                    tile[y * tw + x] = out[(ty + y - y0) * bw + (tx + x - x0)];
                }
            }
            Ok((ty, tx, th, tw, bh * bw, tile))
        })
        .collect::<Result<_>>()?;

    let mut assembled = Tensor::zeros(&[h, w]);
    let mut stats = ChunkStats::default();
    for (ty, tx, th, tw, halo_pixels, tile) in results {
        stats.warp_tiles += 1;
        stats.max_halo_pixels = stats.max_halo_pixels.max(halo_pixels);
        for y in 0..th {
            for x in 0..tw {
                assembled.set2(ty + y, tx + x, tile[y * tw + x]);
            }
        }
    }
    Ok((assembled, stats))
}
