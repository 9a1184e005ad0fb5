//! Staged coarse-to-fine training.
//!
//! Stages run from the top level N down to 0; stage n optimizes the
//! objective evaluated at level n, on images average-pooled to that level.
//! Within a stage of k epochs, epochs 1..k-1 train only the stage's aligner
//! while the final epoch opens up every aligner from n to N. Encoder weights
//! train in every epoch (the image-pyramid mode has none). Freezing is
//! enforced by not requesting gradients for frozen parameters, so frozen
//! tensors stay bitwise untouched.

use serde::{Deserialize, Serialize};

use crate::augment::{augment_pair, AugmentConfig, AugmentedPair};
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::kernels::pool;
use crate::loss::{self, LossConfig};
use crate::model::{EncoderMode, ModelParams, ModelVars, ParamId};
use crate::tape::Tape;
use crate::tensor::Tensor;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CrackMode {
    /// No synthetic cracks in training data.
    Off,
    /// Cracks added, smoothness penalty left everywhere.
    Unmasked,
    /// Cracks added and the penalty eliminated on crack pixels.
    Masked,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Epochs per stage (k).
    pub epochs_per_stage: usize,
    pub loss: LossConfig,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub augment: AugmentConfig,
    pub crack: CrackMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs_per_stage: 2,
            loss: LossConfig::default(),
            learning_rate: 1e-3,
            batch_size: 8,
            seed: 0,
            augment: AugmentConfig::default(),
            crack: CrackMode::Off,
        }
    }
}

/// One source/target image pair, both (h, w).
#[derive(Debug, Clone)]
pub struct TrainPair {
    pub source: Tensor<f32>,
    pub target: Tensor<f32>,
}

/// Where a training run currently stands, including which parameters are
/// allowed to move.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageState {
    /// Stage level n (runs N down to 0).
    pub stage: usize,
    /// 1-based epoch within the stage.
    pub epoch: usize,
    pub trainable_aligners: Vec<usize>,
    pub encoder_trainable: bool,
}

impl StageState {
    pub fn new(stage: usize, epoch: usize, k: usize, top: usize, mode: EncoderMode) -> Self {
        let trainable_aligners = if epoch < k { vec![stage] } else { (stage..=top).collect() };
        StageState {
            stage,
            epoch,
            trainable_aligners,
            encoder_trainable: mode == EncoderMode::Learned,
        }
    }

    pub fn is_trainable(&self, id: &ParamId) -> bool {
        match id.aligner_level() {
            Some(level) => self.trainable_aligners.contains(&level),
            None => self.encoder_trainable,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct EpochRecord {
    pub stage: usize,
    pub epoch: usize,
    pub mean_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
}

impl TrainReport {
    /// CSV with columns stage, epoch, mean_loss.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("stage,epoch,mean_loss\n");
        for r in &self.history {
            out.push_str(&format!("{},{},{}\n", r.stage, r.epoch, r.mean_loss));
        }
        out
    }
}

pub enum TrainEvent<'a> {
    EpochStart(&'a StageState),
    EpochEnd(&'a StageState, f64),
}

/// Adam with per-tensor moment buffers; moments and the update are computed
/// in f64 and stored back to the parameter precision.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    slots: Vec<Option<AdamSlot>>,
}

struct AdamSlot {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, slots: Vec::new() }
    }

    pub fn update(&mut self, slot: usize, param: &mut Tensor<f32>, grad: &Tensor<f32>) {
        if self.slots.len() <= slot {
            self.slots.resize_with(slot + 1, || None);
        }
        let entry = self.slots[slot].get_or_insert_with(|| AdamSlot {
            m: vec![0.0; param.numel()],
            v: vec![0.0; param.numel()],
            t: 0,
        });
        entry.t += 1;
        let bc1 = 1.0 - self.beta1.powi(entry.t);
        let bc2 = 1.0 - self.beta2.powi(entry.t);
        for (i, p) in param.data_mut().iter_mut().enumerate() {
            let g = grad.data()[i] as f64;
            entry.m[i] = self.beta1 * entry.m[i] + (1.0 - self.beta1) * g;
            entry.v[i] = self.beta2 * entry.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = entry.m[i] / bc1;
            let vhat = entry.v[i] / bc2;
            *p = (*p as f64 - self.lr * mhat / (vhat.sqrt() + self.eps)) as f32;
        }
    }
}

fn pooled(img: &Tensor<f32>, rounds: usize) -> Vec<f32> {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    pool::avgpool_n(img.data(), 1, h, w, rounds)
}

fn stack_images(rows: Vec<Vec<f32>>, h: usize, w: usize) -> Tensor<f32> {
    let b = rows.len();
    let mut data = Vec::with_capacity(b * h * w);
    for r in rows {
        debug_assert_eq!(r.len(), h * w);
        data.extend_from_slice(&r);
    }
    Tensor::new(&[b, 1, h, w], data).expect("stacked batch")
}

/// One optimization step on an augmented batch: forward to the stage level,
/// evaluate the objective there, backpropagate, and update the trainable
/// parameters. Returns the batch-mean loss.
pub fn step(
    params: &mut ModelParams<f32>,
    batch: &[AugmentedPair],
    state: &StageState,
    adam: &mut Adam,
    cfg: &TrainConfig,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset("step on empty batch".into()));
    }
    let n = state.stage;
    let (h, w) = {
        let s = batch[0].source_net.shape();
        (s[0], s[1])
    };
    let (hn, wn) = (h >> n, w >> n);

    let src_net = stack_images(batch.iter().map(|s| s.source_net.data().to_vec()).collect(), h, w);
    let tgt_net = stack_images(batch.iter().map(|s| s.target.data().to_vec()).collect(), h, w);
    let src_loss = stack_images(batch.iter().map(|s| pooled(&s.source_loss, n)).collect(), hn, wn);
    let tgt_loss = stack_images(batch.iter().map(|s| pooled(&s.target, n)).collect(), hn, wn);

    let masks = if cfg.crack == CrackMode::Masked {
        let mut level_masks = Vec::with_capacity(batch.len());
        let mut any = false;
        for sample in batch {
            let m = match &sample.mask {
                Some(m) => {
                    any = true;
                    loss::mask_pyramid(m, n, cfg.loss.mask_dilation)?.swap_remove(n)
                }
                None => loss::PenaltyMask::empty(hn, wn),
            };
            level_masks.push(m);
        }
        if any {
            let refs: Vec<&loss::PenaltyMask> = level_masks.iter().collect();
            Some(loss::mask_planes(&refs)?)
        } else {
            None
        }
    } else {
        None
    };

    let tape = Tape::<f32>::new();
    let vars = ModelVars::bind(&tape, params, |id| state.is_trainable(id));
    let sv = tape.leaf(src_net, false);
    let tv = tape.leaf(tgt_net, false);
    let fields = vars.forward(&tape, sv, tv, n, None)?;
    let field_n = *fields.last().expect("stage field");

    let slv = tape.leaf(src_loss, false);
    let tlv = tape.leaf(tgt_loss, false);
    let total = loss::total_loss(&tape, slv, tlv, field_n, masks, &cfg.loss)?;
    let mean = tape.scale(total, 1.0 / batch.len() as f64)?;

    let loss_val = tape.value(mean).item() as f64;
    if !loss_val.is_finite() {
        return Err(Error::NonFinite(format!(
            "loss at stage {} epoch {} is {loss_val}",
            state.stage, state.epoch
        )));
    }
    tape.backward(mean)?;

    let mut slots_mut = params.params_mut();
    for (slot_idx, (id, var)) in vars.slots().iter().enumerate() {
        debug_assert_eq!(*id, slots_mut[slot_idx].0);
        if let Some(grad) = tape.grad(*var) {
            adam.update(slot_idx, slots_mut[slot_idx].1, &grad);
        }
    }
    Ok(loss_val)
}

pub fn train(
    params: &mut ModelParams<f32>,
    dataset: &[TrainPair],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    train_observed(params, dataset, cfg, |_, _| {})
}

/// Training loop with an observer called at epoch boundaries; the observer
/// sees the stage state (including the trainable set) and current parameters.
pub fn train_observed(
    params: &mut ModelParams<f32>,
    dataset: &[TrainPair],
    cfg: &TrainConfig,
    mut observer: impl FnMut(&TrainEvent, &ModelParams<f32>),
) -> Result<TrainReport> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset("training dataset".into()));
    }
    if cfg.epochs_per_stage < 1 {
        return Err(Error::InvalidArgument("epochs_per_stage must be >= 1".into()));
    }
    let top = params.config.levels;
    let side = dataset[0].source.shape()[0];
    for pair in dataset {
        if pair.source.shape() != [side, side] || pair.target.shape() != [side, side] {
            return Err(Error::ShapeMismatch(format!(
                "training pair dims {:?}/{:?}, expected uniform {side}x{side}",
                pair.source.shape(),
                pair.target.shape()
            )));
        }
    }
    if side % (1 << top) != 0 {
        return Err(Error::InvalidArgument(format!("image side {side} not divisible by 2^{top}")));
    }

    let mut aug = cfg.augment.clone();
    aug.crack_enabled = cfg.crack != CrackMode::Off;

    let k = cfg.epochs_per_stage;
    let mut adam = Adam::new(cfg.learning_rate);
    let mut history = Vec::new();

    for stage in (0..=top).rev() {
        for epoch in 1..=k {
            let state = StageState::new(stage, epoch, k, top, params.config.mode);
            observer(&TrainEvent::EpochStart(&state), params);

            let epoch_tag = ((stage as u64) << 32) | epoch as u64;
            let mut order: Vec<usize> = (0..dataset.len()).collect();
            let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x5 ^ epoch_tag));
            order.shuffle(&mut shuffle_rng);

            let mut sum = 0.0;
            let mut steps = 0usize;
            for chunk in order.chunks(cfg.batch_size.max(1)) {
                let batch: Vec<AugmentedPair> = chunk
                    .iter()
                    .map(|&i| {
                        let sample_tag = epoch_tag.wrapping_mul(0x1_0000_0001) ^ i as u64;
                        augment_pair(
                            &dataset[i].source,
                            &dataset[i].target,
                            &aug,
                            cfg.loss.mask_dilation,
                            derive_seed(cfg.seed, sample_tag),
                        )
                    })
                    .collect::<Result<_>>()?;
                sum += step(params, &batch, &state, &mut adam, cfg)?;
                steps += 1;
            }
            let mean_loss = sum / steps as f64;
            history.push(EpochRecord { stage, epoch, mean_loss });
            observer(&TrainEvent::EpochEnd(&state, mean_loss), params);
        }
    }
    Ok(TrainReport { history })
}
