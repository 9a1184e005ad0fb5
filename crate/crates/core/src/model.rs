//! Siamese hierarchical encoder and the recursive coarse-to-fine aligner
//! stack, with a switchable image-pyramid mode that feeds raw downsampled
//! images to the aligners instead of learned encodings.
//!
//! Pyramid level n ("MIP n") lives at 1/2^n resolution; level-n encodings
//! carry 6n+6 feature maps. Each aligner warps the source encoding by the
//! upsampled coarser field, concatenates the target encoding, and predicts a
//! residual displacement that is added to the parent estimate.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{DisplacementField, Window};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const ALIGNER_CHANNELS: [usize; 5] = [32, 64, 32, 16, 2];
pub const ALIGNER_KERNEL: usize = 7;
pub const ENCODER_KERNEL: usize = 3;

/// Feature-map count of the level-n encoding.
pub fn encoder_channels(level: usize) -> usize {
    6 * level + 6
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderMode {
    /// Learned siamese convolutional encodings.
    Learned,
    /// Average-pooled single-channel image pyramid.
    ImagePyramid,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Top pyramid level N; the hierarchy has N+1 aligners (levels 0..=N).
    pub levels: usize,
    /// Leaky-ReLU negative slope.
    pub slope: f64,
    /// Factor applied to the raw aligner output before it becomes a residual
    /// displacement; displacements are small relative to the [-1,1] canvas.
    pub scale: f64,
    pub mode: EncoderMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { levels: 4, slope: 0.01, scale: 0.1, mode: EncoderMode::Learned }
    }
}

impl ModelConfig {
    /// Channels fed to the level-n aligner from each of the two inputs.
    pub fn aligner_input_channels(&self, level: usize) -> usize {
        match self.mode {
            EncoderMode::Learned => encoder_channels(level),
            EncoderMode::ImagePyramid => 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ConvLayer<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct EncoderLevel<T> {
    pub conv1: ConvLayer<T>,
    pub conv2: ConvLayer<T>,
}

#[derive(Debug, Clone)]
pub struct AlignerNet<T> {
    pub layers: Vec<ConvLayer<T>>,
}

/// Full parameter set. Encoder weights are shared between the source and
/// target paths (single storage). In image-pyramid mode `encoder` is empty.
#[derive(Debug, Clone)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub encoder: Vec<EncoderLevel<T>>,
    pub aligners: Vec<AlignerNet<T>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamId {
    EncoderWeight { level: usize, conv: usize },
    EncoderBias { level: usize, conv: usize },
    AlignerWeight { level: usize, layer: usize },
    AlignerBias { level: usize, layer: usize },
}

impl ParamId {
    pub fn is_encoder(&self) -> bool {
        matches!(self, ParamId::EncoderWeight { .. } | ParamId::EncoderBias { .. })
    }

    pub fn aligner_level(&self) -> Option<usize> {
        match self {
            ParamId::AlignerWeight { level, .. } | ParamId::AlignerBias { level, .. } => {
                Some(*level)
            }
            _ => None,
        }
    }

    pub fn name(&self) -> String {
        match self {
            ParamId::EncoderWeight { level, conv } => format!("encoder.{level}.conv{conv}.weight"),
            ParamId::EncoderBias { level, conv } => format!("encoder.{level}.conv{conv}.bias"),
            ParamId::AlignerWeight { level, layer } => format!("aligner.{level}.{layer}.weight"),
            ParamId::AlignerBias { level, layer } => format!("aligner.{level}.{layer}.bias"),
        }
    }
}

fn kaiming_conv<T: Scalar>(
    out_ch: usize,
    in_ch: usize,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> ConvLayer<T> {
    let fan_in = in_ch * k * k;
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("valid std");
    let weight = Tensor::from_fn(&[out_ch, in_ch, k, k], |_| T::from_f64(normal.sample(rng)));
    ConvLayer { weight, bias: Tensor::zeros(&[out_ch]) }
}

fn zero_conv<T: Scalar>(out_ch: usize, in_ch: usize, k: usize) -> ConvLayer<T> {
    ConvLayer { weight: Tensor::zeros(&[out_ch, in_ch, k, k]), bias: Tensor::zeros(&[out_ch]) }
}

impl<T: Scalar> ModelParams<T> {
    /// Random initialization: Kaiming fan-in conv weights, zero biases, and a
    /// zero-initialized final aligner layer so the untrained model computes
    /// the identity transform.
    pub fn init(config: ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut encoder = Vec::new();
        if config.mode == EncoderMode::Learned {
            for n in 0..=config.levels {
                let c_in = if n == 0 { 1 } else { encoder_channels(n - 1) };
                let c_out = encoder_channels(n);
                encoder.push(EncoderLevel {
                    conv1: kaiming_conv(c_out, c_in, ENCODER_KERNEL, &mut rng),
                    conv2: kaiming_conv(c_out, c_out, ENCODER_KERNEL, &mut rng),
                });
            }
        }
        let mut aligners = Vec::new();
        for n in 0..=config.levels {
            let mut layers = Vec::new();
            let mut c_in = 2 * config.aligner_input_channels(n);
            for (i, &c_out) in ALIGNER_CHANNELS.iter().enumerate() {
                let layer = if i + 1 == ALIGNER_CHANNELS.len() {
                    zero_conv(c_out, c_in, ALIGNER_KERNEL)
                } else {
                    kaiming_conv(c_out, c_in, ALIGNER_KERNEL, &mut rng)
                };
                layers.push(layer);
                c_in = c_out;
            }
            aligners.push(AlignerNet { layers });
        }
        ModelParams { config, encoder, aligners }
    }

    /// All-zero parameters; useful as an explicit identity model.
    pub fn zeros(config: ModelConfig) -> Self {
        let mut m = Self::init(config, 0);
        for (_, t) in m.params_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
        m
    }

    pub fn params(&self) -> Vec<(ParamId, &Tensor<T>)> {
        let mut out = Vec::new();
        for (n, lvl) in self.encoder.iter().enumerate() {
            out.push((ParamId::EncoderWeight { level: n, conv: 1 }, &lvl.conv1.weight));
            out.push((ParamId::EncoderBias { level: n, conv: 1 }, &lvl.conv1.bias));
            out.push((ParamId::EncoderWeight { level: n, conv: 2 }, &lvl.conv2.weight));
            out.push((ParamId::EncoderBias { level: n, conv: 2 }, &lvl.conv2.bias));
        }
        for (n, aln) in self.aligners.iter().enumerate() {
            for (i, layer) in aln.layers.iter().enumerate() {
                out.push((ParamId::AlignerWeight { level: n, layer: i }, &layer.weight));
                out.push((ParamId::AlignerBias { level: n, layer: i }, &layer.bias));
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(ParamId, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (n, lvl) in self.encoder.iter_mut().enumerate() {
            out.push((ParamId::EncoderWeight { level: n, conv: 1 }, &mut lvl.conv1.weight));
            out.push((ParamId::EncoderBias { level: n, conv: 1 }, &mut lvl.conv1.bias));
            out.push((ParamId::EncoderWeight { level: n, conv: 2 }, &mut lvl.conv2.weight));
            out.push((ParamId::EncoderBias { level: n, conv: 2 }, &mut lvl.conv2.bias));
        }
        for (n, aln) in self.aligners.iter_mut().enumerate() {
            for (i, layer) in aln.layers.iter_mut().enumerate() {
                out.push((ParamId::AlignerWeight { level: n, layer: i }, &mut layer.weight));
                out.push((ParamId::AlignerBias { level: n, layer: i }, &mut layer.bias));
            }
        }
        out
    }

    /// Run inference on a pair of (h, w) images and return all field levels,
    /// coarsest first, finest last.
    pub fn infer_fields(
        &self,
        source: &Tensor<T>,
        target: &Tensor<T>,
    ) -> Result<Vec<DisplacementField<T>>> {
        let (src, tgt) = (as_batch_image(source)?, as_batch_image(target)?);
        let tape = Tape::new();
        let vars = ModelVars::bind(&tape, self, |_| false);
        let s = tape.leaf(src, false);
        let t = tape.leaf(tgt, false);
        let fields = vars.forward(&tape, s, t, 0, None)?;
        fields.iter().map(|&f| DisplacementField::from_batched(&tape.cloned_value(f))).collect()
    }

    /// Finest-level field only.
    pub fn infer_finest(&self, source: &Tensor<T>, target: &Tensor<T>) -> Result<DisplacementField<T>> {
        Ok(self.infer_fields(source, target)?.pop().expect("at least one level"))
    }

    /// Inference on buffers that are windows of a larger canvas; used by the
    /// tiled pipeline so patch runs reproduce whole-canvas arithmetic.
    pub fn infer_finest_windowed(
        &self,
        source: &Tensor<T>,
        target: &Tensor<T>,
        win: Window,
    ) -> Result<DisplacementField<T>> {
        let (src, tgt) = (as_batch_image(source)?, as_batch_image(target)?);
        let tape = Tape::new();
        let vars = ModelVars::bind(&tape, self, |_| false);
        let s = tape.leaf(src, false);
        let t = tape.leaf(tgt, false);
        let fields = vars.forward(&tape, s, t, 0, Some(win))?;
        DisplacementField::from_batched(&tape.cloned_value(*fields.last().expect("levels")))
    }
}

fn as_batch_image<T: Scalar>(img: &Tensor<T>) -> Result<Tensor<T>> {
    match img.rank() {
        2 => img.reshaped(&[1, 1, img.shape()[0], img.shape()[1]]),
        4 => Ok(img.clone()),
        _ => Err(Error::ShapeMismatch(format!(
            "expected (h,w) or (b,1,h,w) image, got {:?}",
            img.shape()
        ))),
    }
}

/// Model parameters bound onto a tape, with per-parameter trainability.
pub struct ModelVars {
    config: ModelConfig,
    encoder: Vec<[Var; 4]>,
    aligners: Vec<Vec<(Var, Var)>>,
    slots: Vec<(ParamId, Var)>,
}

impl ModelVars {
    pub fn bind<T: Scalar>(
        tape: &Tape<T>,
        params: &ModelParams<T>,
        mut trainable: impl FnMut(&ParamId) -> bool,
    ) -> Self {
        let mut slots = Vec::new();
        let mut push = |tape: &Tape<T>, id: ParamId, t: &Tensor<T>| -> Var {
            let v = tape.leaf(t.clone(), trainable(&id));
            slots.push((id, v));
            v
        };
        let mut encoder = Vec::new();
        for (n, lvl) in params.encoder.iter().enumerate() {
            encoder.push([
                push(tape, ParamId::EncoderWeight { level: n, conv: 1 }, &lvl.conv1.weight),
                push(tape, ParamId::EncoderBias { level: n, conv: 1 }, &lvl.conv1.bias),
                push(tape, ParamId::EncoderWeight { level: n, conv: 2 }, &lvl.conv2.weight),
                push(tape, ParamId::EncoderBias { level: n, conv: 2 }, &lvl.conv2.bias),
            ]);
        }
        let mut aligners = Vec::new();
        for (n, aln) in params.aligners.iter().enumerate() {
            let mut layers = Vec::new();
            for (i, layer) in aln.layers.iter().enumerate() {
                let w = push(tape, ParamId::AlignerWeight { level: n, layer: i }, &layer.weight);
                let b = push(tape, ParamId::AlignerBias { level: n, layer: i }, &layer.bias);
                layers.push((w, b));
            }
            aligners.push(layers);
        }
        ModelVars { config: params.config, encoder, aligners, slots }
    }

    pub fn slots(&self) -> &[(ParamId, Var)] {
        &self.slots
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Hierarchical encoding of an image: level 0 applies two 3x3 convs with
    /// no pooling; each higher level applies two convs then 2x2 max pooling
    /// to the previous level's output. Leaky ReLU follows every conv.
    pub fn encode<T: Scalar>(&self, tape: &Tape<T>, image: Var) -> Result<Vec<Var>> {
        let slope = self.config.slope;
        let mut out = Vec::with_capacity(self.config.levels + 1);
        let mut x = image;
        for (n, lvl) in self.encoder.iter().enumerate() {
            let [w1, b1, w2, b2] = *lvl;
            if n > 0 {
                // Previous level's features at their own resolution feed the
                // next pair of convs, then pooling halves the grid.
                x = tape.conv2d(x, w1, b1, ENCODER_KERNEL / 2)?;
                x = tape.leaky_relu(x, slope)?;
                x = tape.conv2d(x, w2, b2, ENCODER_KERNEL / 2)?;
                x = tape.leaky_relu(x, slope)?;
                x = tape.maxpool2x2(x)?;
            } else {
                x = tape.conv2d(x, w1, b1, ENCODER_KERNEL / 2)?;
                x = tape.leaky_relu(x, slope)?;
                x = tape.conv2d(x, w2, b2, ENCODER_KERNEL / 2)?;
                x = tape.leaky_relu(x, slope)?;
            }
            out.push(x);
        }
        Ok(out)
    }

    /// Average-pooled image pyramid, one channel per level.
    pub fn pyramid<T: Scalar>(&self, tape: &Tape<T>, image: Var) -> Result<Vec<Var>> {
        let mut out = Vec::with_capacity(self.config.levels + 1);
        let mut x = image;
        out.push(x);
        for _ in 1..=self.config.levels {
            x = tape.avgpool2x2(x)?;
            out.push(x);
        }
        Ok(out)
    }

    /// One aligner step: warp the source encoding by the parent field,
    /// concatenate the target encoding, run five 7x7 conv layers (leaky ReLU
    /// between, none after the last), scale the raw output into a residual,
    /// and add the parent. Returns (field, residual).
    pub fn align_level<T: Scalar>(
        &self,
        tape: &Tape<T>,
        src_enc: Var,
        tgt_enc: Var,
        parent: Var,
        level: usize,
        win: Option<Window>,
    ) -> Result<(Var, Var)> {
        let layers = &self.aligners[level];
        let warped = match win {
            Some(w) => tape.warp_windowed(src_enc, parent, w)?,
            None => tape.warp(src_enc, parent)?,
        };
        let mut x = tape.concat_channels(warped, tgt_enc)?;
        for (i, &(w, b)) in layers.iter().enumerate() {
            x = tape.conv2d(x, w, b, ALIGNER_KERNEL / 2)?;
            if i + 1 < layers.len() {
                x = tape.leaky_relu(x, self.config.slope)?;
            }
        }
        let residual = tape.scale(x, self.config.scale)?;
        let field = tape.add(residual, parent)?;
        Ok((field, residual))
    }

    /// Coarse-to-fine recursion from level N down to `down_to`. Returns the
    /// fields coarsest first, finest last. `window`, when present, declares
    /// the image buffers to be aligned windows of a larger canvas.
    pub fn forward<T: Scalar>(
        &self,
        tape: &Tape<T>,
        source: Var,
        target: Var,
        down_to: usize,
        window: Option<Window>,
    ) -> Result<Vec<Var>> {
        let n_top = self.config.levels;
        let (b, h, w) = {
            let s = tape.shape(source);
            let t = tape.shape(target);
            if s != t {
                return Err(Error::ShapeMismatch(format!("forward: source {s:?} vs target {t:?}")));
            }
            if s.len() != 4 || s[1] != 1 {
                return Err(Error::ShapeMismatch(format!(
                    "forward: expected (b,1,h,w) images, got {s:?}"
                )));
            }
            (s[0], s[2], s[3])
        };
        if h != w {
            return Err(Error::InvalidArgument(format!("forward: image must be square, got {h}x{w}")));
        }
        let div = 1usize << n_top;
        if h % div != 0 {
            return Err(Error::InvalidArgument(format!(
                "forward: side {h} not divisible by 2^{n_top}"
            )));
        }
        let win0 = window.unwrap_or(Window::full(h, w));
        if win0.oy % div != 0
            || win0.ox % div != 0
            || win0.full_h % div != 0
            || win0.full_w % div != 0
        {
            return Err(Error::InvalidArgument(format!(
                "forward: window {win0:?} not aligned to 2^{n_top}"
            )));
        }
        if down_to > n_top {
            return Err(Error::InvalidArgument(format!(
                "forward: down_to {down_to} exceeds top level {n_top}"
            )));
        }

        let (enc_s, enc_t) = match self.config.mode {
            EncoderMode::Learned => (self.encode(tape, source)?, self.encode(tape, target)?),
            EncoderMode::ImagePyramid => (self.pyramid(tape, source)?, self.pyramid(tape, target)?),
        };

        let top_side = h >> n_top;
        let mut parent = tape.leaf(Tensor::zeros(&[b, 2, top_side, top_side]), false);
        let mut fields = Vec::with_capacity(n_top - down_to + 1);
        for n in (down_to..=n_top).rev() {
            let win_n = win0.at_level(n);
            let (field, _residual) =
                self.align_level(tape, enc_s[n], enc_t[n], parent, n, Some(win_n))?;
            fields.push(field);
            if n > down_to {
                parent = tape.upsample2x_windowed(field, win_n)?;
            }
        }
        Ok(fields)
    }
}
