//! Self-supervised alignment objective: squared reconstruction error of the
//! warped source against the target, plus a weighted nonsmoothness penalty
//! that can be eliminated per pixel near known discontinuities.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{MaskPlanes, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the nonsmoothness penalty.
    pub lambda: f64,
    /// Dilation radius (Chebyshev, in pixels) applied when masks are built
    /// or downsampled; the centered difference spans two pixels, so masked
    /// discontinuities must void every pair they touch.
    pub mask_dilation: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { lambda: 0.1, mask_dilation: 2 }
    }
}

/// Per-pixel boolean raster; true marks pixels where the nonsmoothness
/// penalty is eliminated.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PenaltyMask {
    h: usize,
    w: usize,
    bits: Vec<bool>,
}

impl PenaltyMask {
    pub fn empty(h: usize, w: usize) -> Self {
        PenaltyMask { h, w, bits: vec![false; h * w] }
    }

    pub fn from_bits(h: usize, w: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != h * w {
            return Err(Error::ShapeMismatch(format!(
                "mask bits {} for {h}x{w}",
                bits.len()
            )));
        }
        Ok(PenaltyMask { h, w, bits })
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.w + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.bits[y * self.w + x] = v;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count_true(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn fill(&mut self, v: bool) {
        self.bits.iter_mut().for_each(|b| *b = v);
    }

    /// Chebyshev dilation by `radius` pixels.
    pub fn dilate(&self, radius: usize) -> PenaltyMask {
        if radius == 0 {
            return self.clone();
        }
        let mut out = PenaltyMask::empty(self.h, self.w);
        let r = radius as isize;
        for y in 0..self.h {
            for x in 0..self.w {
                if !self.get(y, x) {
                    continue;
                }
                let y0 = (y as isize - r).max(0) as usize;
                let y1 = ((y as isize + r) as usize).min(self.h - 1);
                let x0 = (x as isize - r).max(0) as usize;
                let x1 = ((x as isize + r) as usize).min(self.w - 1);
                for yy in y0..=y1 {
                    for xx in x0..=x1 {
                        out.set(yy, xx, true);
                    }
                }
            }
        }
        out
    }

    /// 0.0/1.0 tensor for serialization in the `SMLT` format.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_fn(&[self.h, self.w], |i| {
            if self.bits[i] {
                T::one()
            } else {
                T::zero()
            }
        })
    }

    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Self> {
        if t.rank() != 2 {
            return Err(Error::ShapeMismatch(format!("mask tensor must be (h,w), got {:?}", t.shape())));
        }
        let bits = t.data().iter().map(|&v| v != T::zero()).collect();
        PenaltyMask::from_bits(t.shape()[0], t.shape()[1], bits)
    }
}

/// Halve a mask: OR-reduce each 2x2 window, then dilate by the configured
/// radius. Any masked fine pixel masks its coarse pixel, so downsampled
/// masks are supersets.
pub fn downsample_mask(mask: &PenaltyMask, dilation: usize) -> Result<PenaltyMask> {
    if mask.h % 2 != 0 || mask.w % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "downsample_mask: odd dims {}x{}",
            mask.h, mask.w
        )));
    }
    let (oh, ow) = (mask.h / 2, mask.w / 2);
    let mut out = PenaltyMask::empty(oh, ow);
    for y in 0..oh {
        for x in 0..ow {
            let v = mask.get(2 * y, 2 * x)
                || mask.get(2 * y, 2 * x + 1)
                || mask.get(2 * y + 1, 2 * x)
                || mask.get(2 * y + 1, 2 * x + 1);
            out.set(y, x, v);
        }
    }
    Ok(out.dilate(dilation))
}

/// Mask pyramid from full resolution down to `levels` halvings.
pub fn mask_pyramid(mask: &PenaltyMask, levels: usize, dilation: usize) -> Result<Vec<PenaltyMask>> {
    let mut out = Vec::with_capacity(levels + 1);
    out.push(mask.clone());
    for n in 1..=levels {
        let next = downsample_mask(&out[n - 1], dilation)?;
        out.push(next);
    }
    Ok(out)
}

/// Batched masks as shared planes for the smoothness op.
pub fn mask_planes(masks: &[&PenaltyMask]) -> Result<Arc<MaskPlanes>> {
    let (h, w) = (masks[0].h, masks[0].w);
    let mut bits = Vec::with_capacity(masks.len() * h * w);
    for m in masks {
        if m.h != h || m.w != w {
            return Err(Error::ShapeMismatch("mask batch with mixed dims".into()));
        }
        bits.extend_from_slice(&m.bits);
    }
    Ok(Arc::new(MaskPlanes { batch: masks.len(), h, w, bits }))
}

/// Sum over pixels of the squared difference between the warped source and
/// the target: both (batch, 1, h, w), field (batch, 2, h, w).
pub fn mse_term<T: Scalar>(tape: &Tape<T>, source: Var, target: Var, field: Var) -> Result<Var> {
    let warped = tape.warp(source, field)?;
    let diff = tape.sub(warped, target)?;
    let sq = tape.square(diff)?;
    tape.sum(sq)
}

/// Nonsmoothness penalty over pairs two pixels apart; `masks` eliminates
/// pairs touching masked pixels.
pub fn smoothness_term<T: Scalar>(
    tape: &Tape<T>,
    field: Var,
    masks: Option<Arc<MaskPlanes>>,
) -> Result<Var> {
    tape.smoothness(field, masks)
}

/// mse + lambda * smoothness.
pub fn total_loss<T: Scalar>(
    tape: &Tape<T>,
    source: Var,
    target: Var,
    field: Var,
    masks: Option<Arc<MaskPlanes>>,
    cfg: &LossConfig,
) -> Result<Var> {
    let mse = mse_term(tape, source, target, field)?;
    let smooth = smoothness_term(tape, field, masks)?;
    let weighted = tape.scale(smooth, cfg.lambda)?;
    tape.add(mse, weighted)
}

/// Plain mean squared error between two equally shaped tensors (no warp),
/// accumulated in f64.
pub fn mse_value<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!("mse: {:?} vs {:?}", a.shape(), b.shape())));
    }
    let mut acc = 0.0f64;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let d = x.to_f64() - y.to_f64();
        acc += d * d;
    }
    Ok(acc / a.numel() as f64)
}
