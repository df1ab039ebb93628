//! Mini-batch training, the three regimes, and stratified real subsets.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::Sample;
use super::infer::{attribute_accuracy, AccuracyReport};
use super::layers::{Grads, Params};
use super::loss::{compute_loss, LossBreakdown, LossConfig};
use super::model::{Model, ModelConfig};
use crate::annotations::ImageRecord;
use crate::error::{Error, Result};

/// Set to `0` to let training reduce gradients in parallel; any other value,
/// or leaving it unset, keeps the sequential reproducible path.
pub const DETERMINISTIC_ENV: &str = "EHOI_DETERMINISTIC";

pub fn deterministic_mode() -> bool {
    std::env::var(DETERMINISTIC_ENV).map(|v| v.trim() != "0").unwrap_or(true)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    #[default]
    SynthOnly,
    RealOnly,
    SynthPlusReal,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Regime::SynthOnly => "synth_only",
            Regime::RealOnly => "real_only",
            Regime::SynthPlusReal => "synth_plus_real",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

/// Schedule of one training phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhaseConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Epochs after which the learning rate is multiplied by `lr_gamma`.
    pub lr_steps: Vec<usize>,
    pub lr_gamma: f64,
}

impl Default for PhaseConfig {
    fn default() -> Self {
        PhaseConfig { epochs: 10, lr: 0.01, lr_steps: vec![7], lr_gamma: 0.1 }
    }
}

impl PhaseConfig {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.lr_steps.iter().filter(|&&s| epoch >= s).count();
        self.lr * self.lr_gamma.powi(drops as i32)
    }

    fn validate(&self, name: &str) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("train.{name}.lr"), "must be positive"));
        }
        if !(self.lr_gamma > 0.0 && self.lr_gamma <= 1.0) {
            return Err(Error::config(format!("train.{name}.lr_gamma"), "must lie in (0, 1]"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip.
    pub grad_clip: Option<f64>,
    /// Linear learning-rate ramp at the start of each phase, in iterations.
    pub warmup_iters: usize,
    /// Synthetic phase: the only phase of synth_only, pre-training of synth_plus_real.
    pub synth: PhaseConfig,
    /// Real phase: the only phase of real_only, fine-tuning of synth_plus_real.
    pub real: PhaseConfig,
    /// Fraction of the real training split used, in (0, 1].
    pub real_fraction: f64,
    pub train_detector: bool,
    pub loss: LossConfig,
    /// Validate every this many epochs; 0 disables validation.
    pub val_every: usize,
    /// Wall-clock budget per phase in seconds, checked between epochs.
    pub max_seconds: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerKind::Sgd,
            batch_size: 16,
            momentum: 0.9,
            weight_decay: 1e-4,
            grad_clip: Some(10.0),
            warmup_iters: 50,
            synth: PhaseConfig::default(),
            real: PhaseConfig { epochs: 5, lr: 0.005, lr_steps: vec![4], lr_gamma: 0.1 },
            real_fraction: 1.0,
            train_detector: false,
            loss: LossConfig::default(),
            val_every: 1,
            max_seconds: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("train.momentum", "must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("train.weight_decay", "must be non-negative"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::config("train.grad_clip", "must be positive"));
            }
        }
        if !(self.real_fraction > 0.0 && self.real_fraction <= 1.0) {
            return Err(Error::config("train.real_fraction", "must lie in (0, 1]"));
        }
        self.synth.validate("synth")?;
        self.real.validate("real")
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: String,
    pub epoch: usize,
    pub iterations: usize,
    pub lr: f64,
    pub seconds: f64,
    pub loss: LossBreakdown,
    pub val: Option<AccuracyReport>,
}

/// Seeded subset stratified by (any gloved hand, any contact hand).
///
/// Each stratum is shuffled once per seed and a prefix of `ceil(fraction * n)`
/// is kept, so subsets for growing fractions are nested. Indices are sorted.
pub fn stratified_subset(records: &[ImageRecord], fraction: f64, seed: u64) -> Vec<usize> {
    let mut strata: BTreeMap<(bool, bool), Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        let glove = r.hands.iter().any(|h| h.glove == crate::annotations::GloveStatus::Glove);
        let contact = r.hands.iter().any(|h| h.contact.is_contact());
        strata.entry((glove, contact)).or_default().push(i);
    }
    let mut out = Vec::new();
    for ((g, c), mut idx) in strata {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x5eed_0000 + 2 * g as u64 + c as u64));
        idx.shuffle(&mut rng);
        let take = ((fraction.clamp(0.0, 1.0) * idx.len() as f64) - 1e-9).ceil().max(0.0) as usize;
        out.extend_from_slice(&idx[..take.min(idx.len())]);
    }
    out.sort_unstable();
    out
}

struct Optimizer {
    kind: OptimizerKind,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: i32,
    decay: Vec<bool>,
}

impl Optimizer {
    fn new(kind: OptimizerKind, p: &Params) -> Self {
        let zeros = || p.values.iter().map(|v| vec![0.0f32; v.len()]).collect::<Vec<_>>();
        let v = if kind == OptimizerKind::Adam { zeros() } else { Vec::new() };
        let decay = p.info.iter().map(|i| i.name.ends_with(".weight")).collect();
        Optimizer { kind, m: zeros(), v, t: 0, decay }
    }

    fn step(&mut self, p: &mut Params, g: &Grads, lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let lr = lr as f32;
        let wd = cfg.weight_decay as f32;
        let mu = cfg.momentum as f32;
        for (i, (w, gv)) in p.values.iter_mut().zip(&g.values).enumerate() {
            let wd = if self.decay[i] { wd } else { 0.0 };
            let m = &mut self.m[i];
            match self.kind {
                OptimizerKind::Sgd => {
                    for ((wj, &gj), mj) in w.iter_mut().zip(gv).zip(m.iter_mut()) {
                        *mj = mu * *mj + gj + wd * *wj;
                        *wj -= lr * *mj;
                    }
                }
                OptimizerKind::Adam => {
                    let (b1, b2, eps) = (0.9f32, 0.999f32, 1e-8f32);
                    let c1 = 1.0 - b1.powi(self.t);
                    let c2 = 1.0 - b2.powi(self.t);
                    for (((wj, &gj), mj), vj) in w.iter_mut().zip(gv).zip(m.iter_mut()).zip(self.v[i].iter_mut()) {
                        *mj = b1 * *mj + (1.0 - b1) * gj;
                        *vj = b2 * *vj + (1.0 - b2) * gj * gj;
                        *wj -= lr * ((*mj / c1) / ((*vj / c2).sqrt() + eps) + wd * *wj);
                    }
                }
            }
        }
    }
}

/// Loss and summed gradients for one mini-batch.
pub fn batch_gradients(model: &Model, batch: &[&Sample], cfg: &TrainConfig, parallel: bool) -> Result<(LossBreakdown, Grads)> {
    let det = cfg.train_detector;
    let fw: Vec<_> = if parallel {
        batch.par_iter().map(|s| model.forward_train(s, det)).collect::<Result<_>>()?
    } else {
        batch.iter().map(|s| model.forward_train(s, det)).collect::<Result<_>>()?
    };
    let mut outs = Vec::with_capacity(fw.len());
    let mut tgts = Vec::with_capacity(fw.len());
    let mut caches = Vec::with_capacity(fw.len());
    for (o, t, c) in fw {
        outs.push(o);
        tgts.push(t);
        caches.push(c);
    }
    let loss = compute_loss(&outs, &tgts, &cfg.loss)?;
    let grads = if parallel {
        caches
            .par_iter()
            .zip(loss.grads.par_iter())
            .fold(
                || Grads::zeros_like(&model.params),
                |mut g, (c, d)| {
                    model.backward_image(c, d, &mut g);
                    g
                },
            )
            .reduce(
                || Grads::zeros_like(&model.params),
                |mut a, b| {
                    a.add_assign(&b);
                    a
                },
            )
    } else {
        let mut g = Grads::zeros_like(&model.params);
        for (c, d) in caches.iter().zip(&loss.grads) {
            model.backward_image(c, d, &mut g);
        }
        g
    };
    Ok((loss.breakdown, grads))
}

/// Runs one phase on `samples`, continuing from `model`.
pub fn train_phase(
    mut model: Model,
    samples: &[Sample],
    phase_name: &str,
    phase: &PhaseConfig,
    cfg: &TrainConfig,
    seed: u64,
    val: Option<&[Sample]>,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<(Model, Vec<EpochRecord>)> {
    cfg.validate()?;
    let parallel = !deterministic_mode();
    let mut opt = Optimizer::new(cfg.optimizer, &model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7261_696e);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut log = Vec::new();
    let mut iteration = 0usize;
    let start = Instant::now();
    for epoch in 0..phase.epochs {
        let t0 = Instant::now();
        order.shuffle(&mut rng);
        let base_lr = phase.lr_at(epoch);
        let mut losses = Vec::new();
        let mut lr = base_lr;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();
            let (b, mut g) = batch_gradients(&model, &batch, cfg, parallel)?;
            if !b.l_total.is_finite() {
                return Err(Error::Diverged { phase: phase_name.to_string(), epoch });
            }
            if let Some(clip) = cfg.grad_clip {
                let n = g.norm();
                if n > clip {
                    g.scale((clip / n) as f32);
                }
            }
            lr = if iteration < cfg.warmup_iters { base_lr * (iteration + 1) as f64 / cfg.warmup_iters as f64 } else { base_lr };
            opt.step(&mut model.params, &g, lr, cfg);
            losses.push(b);
            iteration += 1;
        }
        let val_report = match val {
            Some(v) if cfg.val_every > 0 && ((epoch + 1) % cfg.val_every == 0 || epoch + 1 == phase.epochs) => Some(attribute_accuracy(&model, v)?),
            _ => None,
        };
        let rec = EpochRecord {
            phase: phase_name.to_string(),
            epoch,
            iterations: iteration,
            lr,
            seconds: t0.elapsed().as_secs_f64(),
            loss: LossBreakdown::mean_of(&losses),
            val: val_report,
        };
        log::info!("{phase_name} epoch {epoch}: loss {:.4} ({:.1}s)", rec.loss.l_total, rec.seconds);
        on_epoch(&rec);
        log.push(rec);
        if let Some(budget) = cfg.max_seconds {
            let elapsed = start.elapsed().as_secs_f64();
            let per_epoch = elapsed / (epoch + 1) as f64;
            if elapsed + per_epoch > budget {
                log::warn!("{phase_name}: stopping after epoch {epoch}, time budget of {budget}s reached");
                break;
            }
        }
    }
    Ok((model, log))
}

/// Training inputs; which splits are required depends on the regime.
#[derive(Clone, Copy, Debug, Default)]
pub struct TrainData<'a> {
    pub synth: Option<&'a [Sample]>,
    pub real: Option<&'a [Sample]>,
    pub val: Option<&'a [Sample]>,
}

pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<EpochRecord>,
    /// Indices of the real training images used, when a real phase ran.
    pub real_subset: Option<Vec<usize>>,
}

/// Trains a fresh model under `regime`.
pub fn train(
    data: &TrainData,
    regime: Regime,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    seed: u64,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model = Model::new(model_cfg.clone(), seed)?;
    fn need<'a>(s: Option<&'a [Sample]>, name: &str) -> Result<&'a [Sample]> {
        s.ok_or_else(|| Error::MissingSplit(name.to_string()))
    }
    let mut log = Vec::new();
    let mut real_subset = None;
    let mut model = model;
    if matches!(regime, Regime::SynthOnly | Regime::SynthPlusReal) {
        let synth = need(data.synth, "synth")?;
        if matches!(regime, Regime::SynthPlusReal) {
            need(data.real, "real")?;
        }
        let name = if regime == Regime::SynthOnly { "synth" } else { "pretrain" };
        let (m, l) = train_phase(model, synth, name, &cfg.synth, cfg, seed, data.val, on_epoch)?;
        model = m;
        log.extend(l);
    }
    if matches!(regime, Regime::RealOnly | Regime::SynthPlusReal) {
        let real = need(data.real, "real")?;
        let records: Vec<ImageRecord> = real.iter().map(|s| s.record.clone()).collect();
        let idx = stratified_subset(&records, cfg.real_fraction, seed);
        let subset: Vec<Sample> = idx.iter().map(|&i| real[i].clone()).collect();
        let name = if regime == Regime::RealOnly { "real" } else { "finetune" };
        let (m, l) = train_phase(model, &subset, name, &cfg.real, cfg, seed.wrapping_add(1), data.val, on_epoch)?;
        model = m;
        log.extend(l);
        real_subset = Some(idx);
    }
    Ok(TrainOutcome { model, log, real_subset })
}
