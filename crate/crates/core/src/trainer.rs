//! The training loop.
//!
//! Every epoch first decides which pairs to trust (all of them during the
//! division warm-up, consensus division afterwards), then walks the training
//! set in shuffled mini-batches. A batch's loss is
//! `L_m = Σ_i ĥl_ii (L^b_i + L^t_i)`, the per-pair loss of the chosen variant
//! summed over the BGE and TSE branches and weighted by the recalibrated
//! correspondence label. Parameters are updated with Adam under a constant
//! or cosine-with-linear-warmup learning rate.

use std::f64::consts::PI;

use rand::seq::SliceRandom;

use crate::division::{run_ccd, DivisionResult, PerSampleLosses, DEFAULT_THRESHOLD};
use crate::encoder::{backward, encode_pairs, EncoderConfig, EncoderParams, ItemEncoding};
use crate::error::{Error, Result};
use crate::eval::{evaluate_model, ModelEval};
use crate::losses::{gradients, BatchSimilarities, Branch, LabelMatrix, LossConfig, LossVariant};
use crate::math::{mix_seed, rng_from, Matrix};
use crate::synth_data::PairDataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrSchedule {
    Constant,
    /// Linear ramp over the first `lr_warmup_epochs`, cosine decay to zero after.
    CosineWarmup,
}

impl std::str::FromStr for LrSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(LrSchedule::Constant),
            "cosine" => Ok(LrSchedule::CosineWarmup),
            _ => Err(Error::Config(format!("unknown lr schedule {s:?} (constant|cosine)"))),
        }
    }
}

impl std::fmt::Display for LrSchedule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LrSchedule::Constant => "constant",
            LrSchedule::CosineWarmup => "cosine",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
    /// Epochs during which every pair is trusted.
    pub warmup_epochs: usize,
    /// Length of the linear LR ramp of the cosine schedule.
    pub lr_warmup_epochs: usize,
    pub loss_cfg: LossConfig,
    pub loss_variant: LossVariant,
    pub embed_dim: usize,
    pub num_tokens: usize,
    pub select_ratio: f64,
    /// Run consensus division after warm-up. Off trusts every pair throughout.
    pub division: bool,
    pub threshold: f64,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            learning_rate: 0.03,
            lr_schedule: LrSchedule::CosineWarmup,
            warmup_epochs: 5,
            lr_warmup_epochs: 2,
            loss_cfg: LossConfig::default(),
            loss_variant: LossVariant::Tal,
            embed_dim: 32,
            num_tokens: 8,
            select_ratio: 0.3,
            division: true,
            threshold: DEFAULT_THRESHOLD,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch size must be at least 2, got {}",
                self.batch_size
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!("threshold must lie in [0, 1], got {}", self.threshold)));
        }
        self.loss_cfg.validate()
    }

    pub fn encoder_config(&self, raw_dim: usize) -> Result<EncoderConfig> {
        EncoderConfig::new(raw_dim, self.embed_dim, self.num_tokens, self.select_ratio)
    }

    /// Learning rate for optimizer step `step` out of `total` steps, with
    /// `warmup` ramp steps.
    pub fn lr_at(&self, step: usize, warmup: usize, total: usize) -> f64 {
        let base = self.learning_rate;
        match self.lr_schedule {
            LrSchedule::Constant => base,
            LrSchedule::CosineWarmup => {
                if step < warmup {
                    base * (step + 1) as f64 / warmup as f64
                } else {
                    let span = total.saturating_sub(warmup).max(1) as f64;
                    let t = (step - warmup) as f64 / span;
                    0.5 * base * (1.0 + (PI * t.min(1.0)).cos())
                }
            }
        }
    }
}

/// Adam moments over the flattened parameter blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl Adam {
    pub fn new(params: &EncoderParams, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = params.blocks().iter().map(|b| vec![0.0; b.len()]).collect();
        Self {
            config,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut EncoderParams, grads: &EncoderParams, lr: f64) {
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for (((p, g), m), v) in params
            .blocks_mut()
            .into_iter()
            .zip(grads.blocks())
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for k in 0..p.len() {
                m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
                v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
                p[k] -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
            }
        }
    }
}

/// Labels of a batch: `l_ij = 1` iff the identities match, with the diagonal
/// replaced by the recalibrated label and every row and column of an
/// untrusted item cleared.
pub fn batch_labels(identities: &[u32], recalibrated: &[bool]) -> LabelMatrix {
    assert_eq!(identities.len(), recalibrated.len());
    LabelMatrix::from_fn(identities.len(), |i, j| {
        if i == j {
            recalibrated[i]
        } else {
            recalibrated[i] && recalibrated[j] && identities[i] == identities[j]
        }
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// `L_m` summed over the epoch, divided by the number of pairs.
    pub loss: f64,
    pub learning_rate: f64,
    pub num_clean: usize,
    pub num_noisy: usize,
    pub num_uncertain: usize,
    pub division_precision: f64,
    pub division_recall: f64,
    pub validation: Option<ModelEval>,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: EncoderParams,
    pub epoch: usize,
    pub division: DivisionResult,
    pub optimizer: Adam,
    pub history: Vec<EpochRecord>,
    /// Parameters at the epoch with the highest validation Rank-1.
    pub best: Option<(usize, EncoderParams)>,
}

impl TrainState {
    pub fn losses(&self) -> Vec<f64> {
        self.history.iter().map(|r| r.loss).collect()
    }
}

/// Everything an observer sees at the end of an epoch.
pub struct EpochEvent<'a> {
    pub record: &'a EpochRecord,
    pub params: &'a EncoderParams,
    pub division: &'a DivisionResult,
    /// Per-sample losses behind the division, absent during warm-up.
    pub losses: Option<&'a PerSampleLosses>,
}

pub fn train(dataset: &PairDataset, cfg: &TrainConfig) -> Result<TrainState> {
    train_with(dataset, None, cfg, |_| Ok(()))
}

/// Full loop. `validation`, when given, is evaluated after every epoch and
/// drives best-epoch tracking.
pub fn train_with(
    dataset: &PairDataset,
    validation: Option<&PairDataset>,
    cfg: &TrainConfig,
    mut observer: impl FnMut(&EpochEvent<'_>) -> Result<()>,
) -> Result<TrainState> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let enc_cfg = cfg.encoder_config(dataset.raw_dim)?;
    let params = EncoderParams::init(enc_cfg, mix_seed(cfg.seed, 1))?;
    let optimizer = Adam::new(&params, cfg.adam);
    let mut state = TrainState {
        params,
        epoch: 0,
        division: DivisionResult::all_clean(dataset.len()),
        optimizer,
        history: Vec::new(),
        best: None,
    };
    let true_clean: Vec<bool> = dataset.items.iter().map(|it| it.true_clean).collect();
    let batches_per_epoch = dataset.len().div_ceil(cfg.batch_size);
    let total_steps = batches_per_epoch * cfg.epochs;
    let warmup_steps = batches_per_epoch * cfg.lr_warmup_epochs;
    let mut step = 0usize;
    let mut best_rank1 = f64::NEG_INFINITY;

    for epoch in 1..=cfg.epochs {
        let epoch_seed = mix_seed(cfg.seed, 1000 + epoch as u64);
        let ccd = if cfg.division && epoch > cfg.warmup_epochs {
            Some(run_ccd(
                &state.params,
                dataset,
                cfg.batch_size,
                &cfg.loss_cfg,
                cfg.threshold,
                mix_seed(epoch_seed, 2),
            )?)
        } else {
            None
        };
        state.division = ccd
            .as_ref()
            .map_or_else(|| DivisionResult::all_clean(dataset.len()), |c| c.division.clone());

        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut rng_from(mix_seed(epoch_seed, 3)));
        let mut epoch_loss = 0.0;
        let mut lr = cfg.lr_at(step, warmup_steps, total_steps);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            lr = cfg.lr_at(step, warmup_steps, total_steps);
            step += 1;
            let weights: Vec<f64> = chunk
                .iter()
                .map(|&i| if state.division.recalibrated[i] { 1.0 } else { 0.0 })
                .collect();
            if weights.iter().all(|w| *w == 0.0) {
                continue;
            }
            let (loss, grads) = batch_step(&state.params, dataset, chunk, &state.division.recalibrated, cfg)
                .map_err(|e| match e {
                    Error::Numeric(_) => diverged(epoch, b, dataset, chunk),
                    other => other,
                })?;
            if !loss.is_finite() || !grads.is_finite() {
                return Err(diverged(epoch, b, dataset, chunk));
            }
            epoch_loss += loss;
            state.optimizer.step(&mut state.params, &grads, lr);
            if !state.params.is_finite() {
                return Err(diverged(epoch, b, dataset, chunk));
            }
        }

        let (precision, recall) = state.division.clean_precision_recall(&true_clean);
        let validation = match validation {
            Some(v) => Some(evaluate_model(&state.params, v)?),
            None => None,
        };
        if let Some(v) = &validation {
            if v.metrics.rank1 > best_rank1 {
                best_rank1 = v.metrics.rank1;
                state.best = Some((epoch, state.params.clone()));
            }
        }
        let record = EpochRecord {
            epoch,
            loss: epoch_loss / dataset.len() as f64,
            learning_rate: lr,
            num_clean: state.division.clean.len(),
            num_noisy: state.division.noisy.len(),
            num_uncertain: state.division.uncertain.len(),
            division_precision: precision,
            division_recall: recall,
            validation,
        };
        state.epoch = epoch;
        observer(&EpochEvent {
            record: &record,
            params: &state.params,
            division: &state.division,
            losses: ccd.as_ref().map(|c| &c.losses),
        })?;
        state.history.push(record);
    }
    Ok(state)
}

fn diverged(epoch: usize, batch: usize, dataset: &PairDataset, chunk: &[usize]) -> Error {
    Error::Diverged {
        epoch,
        batch,
        pair_ids: chunk.iter().map(|&i| dataset.items[i].pair_id).collect(),
    }
}

fn unit_rows(encs: &[&ItemEncoding], branch: Branch) -> Matrix {
    let rows: Vec<Vec<f64>> = encs
        .iter()
        .map(|e| match branch {
            Branch::Bge => e.bge.clone(),
            Branch::Tse => e.tse.clone(),
        })
        .collect();
    Matrix::from_rows(&rows).expect("equal embedding widths")
}

/// Weighted loss of one batch and its parameter gradient.
pub fn batch_step(
    params: &EncoderParams,
    dataset: &PairDataset,
    chunk: &[usize],
    recalibrated: &[bool],
    cfg: &TrainConfig,
) -> Result<(f64, EncoderParams)> {
    let items: Vec<_> = chunk.iter().map(|&i| &dataset.items[i]).collect();
    let ids: Vec<u32> = items.iter().map(|it| it.identity).collect();
    let recal: Vec<bool> = chunk.iter().map(|&i| recalibrated[i]).collect();
    let weights: Vec<f64> = recal.iter().map(|&r| if r { 1.0 } else { 0.0 }).collect();
    let labels = batch_labels(&ids, &recal);
    let encoded = encode_pairs(params, items.iter().copied())?;
    let images: Vec<&ItemEncoding> = encoded.iter().map(|p| &p.image).collect();
    let texts: Vec<&ItemEncoding> = encoded.iter().map(|p| &p.text).collect();

    let k = chunk.len();
    let d = params.config.embed_dim;
    let mut d_img = [vec![vec![0.0; d]; k], vec![vec![0.0; d]; k]];
    let mut d_txt = [vec![vec![0.0; d]; k], vec![vec![0.0; d]; k]];
    let mut total = 0.0;
    for (slot, branch) in [Branch::Bge, Branch::Tse].into_iter().enumerate() {
        let v = unit_rows(&images, branch);
        let t = unit_rows(&texts, branch);
        let sims = v.mul_transpose(&t)?;
        let batch = BatchSimilarities::new(sims, labels.clone(), branch)?;
        let (value, g) = gradients(&batch, cfg.loss_variant, &cfg.loss_cfg, &weights)?;
        total += value.total;
        let dv = g.matmul(&t)?;
        let dt = g.transpose().matmul(&v)?;
        for i in 0..k {
            d_img[slot][i].copy_from_slice(dv.row(i));
            d_txt[slot][i].copy_from_slice(dt.row(i));
        }
    }
    let mut grads = params.zeros_like();
    for (i, item) in items.iter().enumerate() {
        backward(params, &item.image_raw, &encoded[i].image, &d_img[0][i], &d_img[1][i], &mut grads);
        backward(params, &item.text_raw, &encoded[i].text, &d_txt[0][i], &d_txt[1][i], &mut grads);
    }
    Ok((total, grads))
}
