//! Shared test utilities: a central finite-difference oracle, independent of
//! the reverse-mode path it checks, plus gradient-check harnesses used by
//! both the per-op suite and the acceptance suite.

#![allow(dead_code)]

use mipalign_core::loss::{self, LossConfig};
use mipalign_core::model::{ModelParams, ModelVars};
use mipalign_core::tape::{Tape, Var};
use mipalign_core::tensor::Tensor;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-4;

/// Central finite differences of a scalar function.
pub fn finite_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let orig = xp[i];
        xp[i] = orig + step;
        let fp = f(&xp);
        xp[i] = orig - step;
        let fm = f(&xp);
        xp[i] = orig;
        g[i] = (fp - fm) / (2.0 * step);
    }
    g
}

/// Worst relative disagreement, with a floor that turns the comparison
/// absolute for near-zero components.
pub fn max_rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Description of one differentiable input to a checked op.
pub struct CheckInput {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl CheckInput {
    pub fn random(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Self {
        let numel = shape.iter().product();
        CheckInput {
            shape: shape.to_vec(),
            data: (0..numel).map(|_| rng.random_range(lo..hi)).collect(),
        }
    }
}

/// Checks reverse-mode gradients of `build` against central finite
/// differences for every element of every input. The op output is reduced to
/// a scalar through sum((out + c)^2) with a fixed random offset tensor `c`,
/// which exercises nonuniform upstream gradients.
///
/// Returns the worst relative error across all inputs.
pub fn check_op_gradients(
    inputs: &[CheckInput],
    build: &dyn Fn(&Tape<f64>, &[Var]) -> Var,
    seed: u64,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // probe output shape to freeze the offset tensor
    let out_shape = {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs
            .iter()
            .map(|ci| tape.leaf(Tensor::new(&ci.shape, ci.data.clone()).unwrap(), false))
            .collect();
        let out = build(&tape, &vars);
        tape.shape(out)
    };
    let offset_n: usize = out_shape.iter().product();
    let offset: Vec<f64> = (0..offset_n).map(|_| rng.random_range(-0.5..0.5)).collect();

    let flat: Vec<f64> = inputs.iter().flat_map(|ci| ci.data.iter().copied()).collect();

    let eval = |x: &[f64], want_grad: bool| -> (f64, Vec<f64>) {
        let tape = Tape::new();
        let mut cursor = 0;
        let vars: Vec<Var> = inputs
            .iter()
            .map(|ci| {
                let n: usize = ci.shape.iter().product();
                let t = Tensor::new(&ci.shape, x[cursor..cursor + n].to_vec()).unwrap();
                cursor += n;
                tape.leaf(t, true)
            })
            .collect();
        let out = build(&tape, &vars);
        let c = tape.leaf(Tensor::new(&out_shape, offset.clone()).unwrap(), false);
        let shifted = tape.add(out, c).unwrap();
        let sq = tape.square(shifted).unwrap();
        let lossv = tape.sum(sq).unwrap();
        let value = tape.value(lossv).item();
        let mut grads = Vec::new();
        if want_grad {
            tape.backward(lossv).unwrap();
            for v in &vars {
                grads.extend(tape.grad(*v).expect("gradient").into_data());
            }
        }
        (value, grads)
    };

    let (_, analytic) = eval(&flat, true);
    let mut f = |x: &[f64]| eval(x, false).0;
    let numeric = finite_diff(&mut f, &flat, FD_STEP);
    max_rel_err(&analytic, &numeric, 1e-6)
}

/// Full objective (squared warp error plus weighted smoothness) at the finest
/// level of a hierarchy, as one scalar function of images and parameters.
/// Used to check gradients end to end through encoders, aligners, warps,
/// upsampling, and the loss itself.
pub struct ModelLossCheck {
    pub params: ModelParams<f64>,
    pub source: Tensor<f64>,
    pub target: Tensor<f64>,
    pub cfg: LossConfig,
}

impl ModelLossCheck {
    /// Random 2-level setup on `side`x`side` inputs. Final aligner layers get
    /// small random values so fields are nonzero and sample positions stay
    /// off the bilinear lattice points where derivatives are undefined.
    pub fn new(side: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let config = mipalign_core::ModelConfig { levels: 1, ..Default::default() };
        let mut params = ModelParams::<f64>::init(config, seed);
        for aln in &mut params.aligners {
            let last = aln.layers.last_mut().unwrap();
            for v in last.weight.data_mut() {
                *v = rng.random_range(-0.05..0.05);
            }
            for v in last.bias.data_mut() {
                *v = rng.random_range(-0.02..0.02);
            }
        }
        let source = Tensor::from_fn(&[side, side], |_| rng.random_range(0.05..0.95));
        let target = Tensor::from_fn(&[side, side], |_| rng.random_range(0.05..0.95));
        ModelLossCheck { params, source, target, cfg: LossConfig::default() }
    }

    pub fn loss_and_grads(&self, want_grad: bool) -> (f64, Vec<Tensor<f64>>, Tensor<f64>, Tensor<f64>) {
        let side = self.source.shape()[0];
        let tape = Tape::new();
        let vars = ModelVars::bind(&tape, &self.params, |_| true);
        let s = tape.leaf(self.source.reshaped(&[1, 1, side, side]).unwrap(), true);
        let t = tape.leaf(self.target.reshaped(&[1, 1, side, side]).unwrap(), true);
        let fields = vars.forward(&tape, s, t, 0, None).unwrap();
        let finest = *fields.last().unwrap();
        let lossv = loss::total_loss(&tape, s, t, finest, None, &self.cfg).unwrap();
        let value = tape.value(lossv).item();
        if !want_grad {
            return (value, Vec::new(), Tensor::zeros(&[1]), Tensor::zeros(&[1]));
        }
        tape.backward(lossv).unwrap();
        let param_grads =
            vars.slots().iter().map(|(_, v)| tape.grad(*v).expect("param grad")).collect();
        let gs = tape.grad(s).expect("source grad");
        let gt = tape.grad(t).expect("target grad");
        (value, param_grads, gs, gt)
    }

    /// Finite-difference spot check of `count` randomly chosen coordinates in
    /// every parameter tensor and both images. Returns the worst relative
    /// error.
    ///
    /// A coordinate that disagrees at the base step is retried at smaller
    /// steps: the net contains leaky-ReLU and max-pool kinks, and a probe
    /// step that crosses one produces a difference quotient unrelated to the
    /// one-sided derivative. A genuine gradient bug disagrees at every step;
    /// a kink artifact vanishes once the step no longer straddles it.
    pub fn spot_check(&mut self, count: usize, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (_, param_grads, gs, gt) = self.loss_and_grads(true);

        let mut worst = 0.0f64;
        let slot_count = param_grads.len();
        for slot in 0..slot_count {
            let numel = param_grads[slot].numel();
            for _ in 0..count.min(numel) {
                let idx = rng.random_range(0..numel);
                let analytic = param_grads[slot].data()[idx];
                let orig = self.params.params()[slot].1.data()[idx];
                let err = self.fd_err_with_refinement(analytic, orig, |this, v| {
                    this.params.params_mut()[slot].1.data_mut()[idx] = v;
                });
                worst = worst.max(err);
            }
        }

        for which in 0..2 {
            let grad = if which == 0 { &gs } else { &gt };
            let numel = self.source.numel();
            for _ in 0..count {
                let idx = rng.random_range(0..numel);
                let analytic = grad.data()[idx];
                let orig = if which == 0 { self.source.data()[idx] } else { self.target.data()[idx] };
                let err = self.fd_err_with_refinement(analytic, orig, |this, v| {
                    let img = if which == 0 { &mut this.source } else { &mut this.target };
                    img.data_mut()[idx] = v;
                });
                worst = worst.max(err);
            }
        }
        worst
    }

    fn fd_err_with_refinement(
        &mut self,
        analytic: f64,
        orig: f64,
        mut set: impl FnMut(&mut Self, f64),
    ) -> f64 {
        let mut best = f64::INFINITY;
        for step in [FD_STEP, FD_STEP / 10.0, FD_STEP / 100.0, FD_STEP / 1000.0] {
            set(self, orig + step);
            let fp = self.loss_and_grads(false).0;
            set(self, orig - step);
            let fm = self.loss_and_grads(false).0;
            set(self, orig);
            let numeric = (fp - fm) / (2.0 * step);
            best = best.min(max_rel_err(&[analytic], &[numeric], 1e-3));
            if best < 1e-4 {
                break;
            }
        }
        best
    }
}
