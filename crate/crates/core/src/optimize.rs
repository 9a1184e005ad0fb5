//! Learning-free baseline: coarse-to-fine gradient descent on the
//! displacement field itself under the alignment objective.
//!
//! The field is optimized at the top level from random initial conditions,
//! upsampled to seed the next level, and so on down to full resolution.
//! Coarse levels stop early; the finest level iterates to convergence under
//! a relative-change threshold, all subject to one global iteration cap.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::derive_seed;
use crate::error::{Error, Result};
use crate::field::{pixels_to_normalized, upsample_field, DisplacementField};
use crate::kernels::pool;
use crate::loss::{self, LossConfig, PenaltyMask};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptSchedule {
    /// Top pyramid level N.
    pub levels: usize,
    /// Iteration cap per level above 0 (early stopping applies).
    pub level_iters: usize,
    /// Relative loss-change threshold that defines convergence at level 0.
    pub mip0_rel_threshold: f64,
    /// Early-stop threshold at the coarse levels.
    pub coarse_rel_threshold: f64,
    /// Hard cap on total iterations across all levels.
    pub global_iteration_cap: usize,
    /// Gradient step per level n is base_step * step_growth^(N-n), so steps
    /// never decrease as resolution increases.
    pub base_step: f64,
    pub step_growth: f64,
    /// Gaussian init noise at the top level, in pixel units.
    pub init_noise_px: f64,
    /// Independent restarts; the best final loss wins.
    pub restarts: usize,
    pub loss: LossConfig,
    pub seed: u64,
}

impl Default for OptSchedule {
    fn default() -> Self {
        OptSchedule {
            levels: 4,
            level_iters: 200,
            mip0_rel_threshold: 1e-6,
            coarse_rel_threshold: 1e-4,
            global_iteration_cap: 10_000,
            base_step: 4.0,
            step_growth: 1.0,
            init_noise_px: 1.0,
            restarts: 1,
            loss: LossConfig::default(),
            seed: 0,
        }
    }
}

impl OptSchedule {
    fn validate(&self) -> Result<()> {
        if self.step_growth < 1.0 {
            return Err(Error::InvalidArgument(
                "step_growth must be >= 1 so step sizes never shrink toward level 0".into(),
            ));
        }
        if self.restarts < 1 {
            return Err(Error::InvalidArgument("restarts must be >= 1".into()));
        }
        Ok(())
    }

    fn step_for_level(&self, level: usize) -> f64 {
        self.base_step * self.step_growth.powi((self.levels - level) as i32)
    }
}

/// Per-iteration objective values, one row per accepted iterate.
#[derive(Debug, Clone, Default)]
pub struct OptTrace {
    pub rows: Vec<OptTraceRow>,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct OptTraceRow {
    pub level: usize,
    pub iteration: usize,
    pub loss: f64,
}

impl OptTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("level,iteration,loss\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{}\n", r.level, r.iteration, r.loss));
        }
        out
    }

    pub fn total_iterations(&self) -> usize {
        self.rows.len()
    }
}

struct LevelData {
    source: Tensor<f32>,
    target: Tensor<f32>,
    mask: Option<PenaltyMask>,
    side: usize,
}

/// Objective value and, optionally, its gradient with respect to the field.
/// The reported loss is the plain (summed) objective; the gradient is of the
/// pixel-mean-scaled objective, which shares its minimizers and keeps step
/// sizes comparable across levels.
fn eval_level(
    data: &LevelData,
    field: &Tensor<f32>,
    cfg: &LossConfig,
    want_grad: bool,
) -> Result<(f64, Option<Tensor<f32>>)> {
    let tape = Tape::<f32>::new();
    let side = data.side;
    let s = tape.leaf(data.source.reshaped(&[1, 1, side, side])?, false);
    let t = tape.leaf(data.target.reshaped(&[1, 1, side, side])?, false);
    let f = tape.leaf(field.reshaped(&[1, 2, side, side])?, want_grad);
    let masks = match &data.mask {
        Some(m) => Some(loss::mask_planes(&[m])?),
        None => None,
    };
    let total = loss::total_loss(&tape, s, t, f, masks, cfg)?;
    let value = tape.value(total).item() as f64;
    let grad = if want_grad {
        let scaled = tape.scale(total, 1.0 / (side * side) as f64)?;
        tape.backward(scaled)?;
        Some(tape.grad(f).expect("field gradient").reshaped(&[2, side, side])?)
    } else {
        None
    };
    Ok((value, grad))
}

/// Optimize a displacement field aligning `source` onto `target`.
pub fn optimize(
    source: &Tensor<f32>,
    target: &Tensor<f32>,
    mask: Option<&PenaltyMask>,
    sched: &OptSchedule,
) -> Result<(DisplacementField<f32>, OptTrace)> {
    sched.validate()?;
    if source.rank() != 2 || source.shape() != target.shape() {
        return Err(Error::ShapeMismatch(format!(
            "optimize: source {:?} vs target {:?}",
            source.shape(),
            target.shape()
        )));
    }
    let side = source.shape()[0];
    if source.shape()[1] != side {
        return Err(Error::InvalidArgument(format!(
            "optimize: image must be square, got {:?}",
            source.shape()
        )));
    }
    if side % (1 << sched.levels) != 0 {
        return Err(Error::InvalidArgument(format!(
            "optimize: side {side} not divisible by 2^{}",
            sched.levels
        )));
    }

    let mut best: Option<(f64, DisplacementField<f32>, OptTrace)> = None;
    for restart in 0..sched.restarts {
        let (loss, field, trace) = optimize_once(source, target, mask, sched, restart as u64)?;
        if best.as_ref().map_or(true, |(b, _, _)| loss < *b) {
            best = Some((loss, field, trace));
        }
    }
    let (_, field, trace) = best.expect("at least one restart");
    Ok((field, trace))
}

fn optimize_once(
    source: &Tensor<f32>,
    target: &Tensor<f32>,
    mask: Option<&PenaltyMask>,
    sched: &OptSchedule,
    restart: u64,
) -> Result<(f64, DisplacementField<f32>, OptTrace)> {
    let side = source.shape()[0];
    let top = sched.levels;

    // per-level images, masks
    let mut levels = Vec::with_capacity(top + 1);
    for n in 0..=top {
        let sn = side >> n;
        let s = Tensor::new(&[sn, sn], pool::avgpool_n(source.data(), 1, side, side, n))?;
        let t = Tensor::new(&[sn, sn], pool::avgpool_n(target.data(), 1, side, side, n))?;
        let m = match mask {
            Some(m0) => Some(loss::mask_pyramid(m0, n, sched.loss.mask_dilation)?.swap_remove(n)),
            None => None,
        };
        levels.push(LevelData { source: s, target: t, mask: m, side: sn });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(sched.seed, 0x0D7 ^ restart));
    let top_side = side >> top;
    let mut field = {
        let sigma = if top_side >= 2 {
            pixels_to_normalized(sched.init_noise_px, top_side)?
        } else {
            0.0
        };
        Tensor::from_fn(&[2, top_side, top_side], |_| {
            if sigma > 0.0 {
                (rng.random_range(-1.0..1.0) * sigma) as f32
            } else {
                0.0
            }
        })
    };

    let mut trace = OptTrace::default();
    let mut spent = 0usize;
    let mut final_loss = f64::INFINITY;

    for n in (0..=top).rev() {
        let data = &levels[n];
        let threshold =
            if n == 0 { sched.mip0_rel_threshold } else { sched.coarse_rel_threshold };
        let iter_cap = if n == 0 { sched.global_iteration_cap } else { sched.level_iters };
        let mut lr = sched.step_for_level(n);

        let (mut current, mut grad) = eval_level(data, &field, &sched.loss, true)?;
        let initial = current;
        trace.rows.push(OptTraceRow { level: n, iteration: 0, loss: current });
        let mut iter = 0usize;
        while iter < iter_cap && spent < sched.global_iteration_cap {
            if current == 0.0 {
                break;
            }
            let g = grad.as_ref().expect("gradient present");
            let trial = Tensor::new(
                &[2, data.side, data.side],
                field
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&f, &gv)| f - (lr * gv as f64) as f32)
                    .collect(),
            )?;
            let (trial_loss, trial_grad) = eval_level(data, &trial, &sched.loss, true)?;
            iter += 1;
            spent += 1;
            if trial_loss.is_nan() || current > initial * 10.0 {
                return Err(Error::Diverged(format!(
                    "level {n}: loss {current} (initial {initial}) after {iter} iterations"
                )));
            }
            if trial_loss <= current {
                let rel = (current - trial_loss) / current.max(f64::MIN_POSITIVE);
                field = trial;
                current = trial_loss;
                grad = trial_grad;
                trace.rows.push(OptTraceRow { level: n, iteration: iter, loss: current });
                if rel < threshold {
                    break;
                }
            } else {
                // halving backtrack on increase; give up the level once the
                // step is too small to matter
                lr *= 0.5;
                if lr < 1e-12 {
                    break;
                }
            }
        }
        final_loss = current;
        if n > 0 {
            let up = upsample_field(&DisplacementField::from_tensor(field)?);
            field = up.into_tensor();
        }
    }

    Ok((final_loss, DisplacementField::from_tensor(field)?, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::warp;

    fn textured(side: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        crate::synth::base_texture(side, true, &mut rng)
    }

    #[test]
    fn identical_pair_zero_noise_converges_immediately() {
        let img = textured(32, 1);
        let sched = OptSchedule { levels: 2, init_noise_px: 0.0, seed: 5, ..Default::default() };
        let (field, trace) = optimize(&img, &img, None, &sched).unwrap();
        assert!(field.tensor().data().iter().all(|&v| v == 0.0));
        // one evaluation per level, no gradient steps taken
        assert_eq!(trace.rows.len(), 3);
        assert!(trace.rows.iter().all(|r| r.loss == 0.0));
    }

    #[test]
    fn global_iteration_cap_respected() {
        let a = textured(32, 2);
        let b = textured(32, 3);
        let sched = OptSchedule {
            levels: 2,
            global_iteration_cap: 25,
            level_iters: 100,
            seed: 1,
            ..Default::default()
        };
        let (_, trace) = optimize(&a, &b, None, &sched).unwrap();
        // accepted rows can't exceed evaluations: one seed row per level plus
        // at most the global budget
        assert!(trace.total_iterations() <= 25 + 3);
    }

    #[test]
    fn determinism_by_seed() {
        let a = textured(32, 4);
        let b = textured(32, 5);
        let sched = OptSchedule { levels: 2, level_iters: 30, global_iteration_cap: 100, seed: 9, ..Default::default() };
        let (f1, t1) = optimize(&a, &b, None, &sched).unwrap();
        let (f2, t2) = optimize(&a, &b, None, &sched).unwrap();
        assert_eq!(f1.tensor(), f2.tensor());
        assert_eq!(t1.rows.len(), t2.rows.len());
    }

    #[test]
    fn huge_lambda_flattens_the_field() {
        let a = textured(16, 6);
        let b = textured(16, 7);
        let sched = OptSchedule {
            levels: 1,
            loss: LossConfig { lambda: 1e3, mask_dilation: 2 },
            level_iters: 400,
            global_iteration_cap: 4000,
            seed: 11,
            ..Default::default()
        };
        let (field, _) = optimize(&a, &b, None, &sched).unwrap();
        let mut worst = 0.0f32;
        for c in 0..2 {
            for y in 0..16 {
                for x in 0..14 {
                    let d = (field.tensor().at3(c, y, x) - field.tensor().at3(c, y, x + 2)).abs();
                    worst = worst.max(d);
                }
            }
        }
        for c in 0..2 {
            for y in 0..14 {
                for x in 0..16 {
                    let d = (field.tensor().at3(c, y, x) - field.tensor().at3(c, y + 2, x)).abs();
                    worst = worst.max(d);
                }
            }
        }
        assert!(worst < 1e-3, "max centered difference {worst}");
    }

    #[test]
    fn recovers_small_translation() {
        // 2-px shift on a textured 64^2 image, recovered to sub-pixel error
        let target = textured(64, 8);
        let shift = pixels_to_normalized(2.0, 64).unwrap() as f32;
        let truth = DisplacementField::constant(-shift, 0.0, 64, 64);
        let source = warp(&target, &DisplacementField::constant(shift, 0.0, 64, 64)).unwrap();
        let sched = OptSchedule { levels: 3, seed: 13, ..Default::default() };
        let (field, _) = optimize(&source, &target, None, &sched).unwrap();
        // compare on the interior; the borders lose content to zero fill
        let mut err_px = 0.0f64;
        let mut count = 0usize;
        let half = 63.0 / 2.0;
        for y in 8..56 {
            for x in 8..56 {
                let ex = (field.dx(y, x) - truth.dx(y, x)) as f64 * half;
                let ey = (field.dy(y, x) - truth.dy(y, x)) as f64 * half;
                err_px += (ex * ex + ey * ey).sqrt();
                count += 1;
            }
        }
        err_px /= count as f64;
        assert!(err_px < 0.5, "mean interior endpoint error {err_px} px");
    }

    #[test]
    fn dim_mismatch_rejected() {
        let a = textured(32, 1);
        let b = textured(16, 2);
        assert!(optimize(&a, &b, None, &OptSchedule::default()).is_err());
    }
}
