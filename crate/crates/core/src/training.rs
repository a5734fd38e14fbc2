//! Objective, Adam, and the epoch loop.
//!
//! The minimized quantity per batch is `α · mean KL + mean task loss`, with
//! `α = min(1, step / x)` and `step` counting completed optimizer updates.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{Cohort, Splits};
use crate::kv::{record, KvMap};
use crate::memory::{MemoryBank, ScoreKind};
use crate::model::{
    backward, forward_sequence, forward_sequence_from, sequence_loss, LossWeights, Mode,
    ModelConfig, Noise, PriorKind, Representation, TcemParams,
};
use crate::nn::{Matrix, ParamSet};
use crate::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Whether the global bank is reset for every patient or carried through a batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GlobalMemory {
    #[default]
    PerPatient,
    Shared,
}

impl GlobalMemory {
    pub fn as_str(self) -> &'static str {
        match self {
            GlobalMemory::PerPatient => "per_patient",
            GlobalMemory::Shared => "shared",
        }
    }
}

impl std::str::FromStr for GlobalMemory {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_patient" => Ok(GlobalMemory::PerPatient),
            "shared" => Ok(GlobalMemory::Shared),
            other => Err(Error::Config(format!(
                "unknown global_memory `{other}` (per_patient|shared)"
            ))),
        }
    }
}

/// Hyperparameters of one training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub mode: Mode,
    /// Annealing threshold `x` in optimizer steps.
    pub anneal_steps: u64,
    /// Overrides the schedule with a constant KL weight.
    pub kl_weight: Option<f64>,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub hidden: usize,
    pub latent: usize,
    pub mem_slots: usize,
    pub mem_width: usize,
    pub label_dim: usize,
    pub patient_slots: usize,
    pub patient_width: usize,
    pub score: ScoreKind,
    pub prior: PriorKind,
    pub global_memory: GlobalMemory,
    pub clusters: usize,
    pub restarts: usize,
    pub repr: Representation,
    pub seed: u64,
    /// Parallel patients per batch; results do not depend on it.
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Unsupervised,
            anneal_steps: 700,
            kl_weight: None,
            learning_rate: 1e-3,
            batch_size: 32,
            epochs: 70,
            hidden: 128,
            latent: 128,
            mem_slots: 8,
            mem_width: 128,
            label_dim: 16,
            patient_slots: 8,
            patient_width: 16,
            score: ScoreKind::Additive,
            prior: PriorKind::Learned,
            global_memory: GlobalMemory::PerPatient,
            clusters: 3,
            restarts: 10,
            repr: Representation::LatentAndMemory,
            seed: 0,
            workers: 1,
        }
    }
}

impl TrainConfig {
    /// Keys understood by [`TrainConfig::from_kv`].
    pub const KEYS: &'static [&'static str] = &[
        "mode",
        "anneal_steps",
        "kl_weight",
        "lr",
        "batch_size",
        "epochs",
        "hidden",
        "latent",
        "mem_slots",
        "mem_width",
        "label_dim",
        "patient_slots",
        "patient_width",
        "score",
        "prior",
        "global_memory",
        "k",
        "restarts",
        "repr",
        "seed",
        "workers",
    ];

    /// Reads known keys over the defaults; other keys are ignored.
    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let d = Self::default();
        let cfg = Self {
            mode: kv
                .get("mode")
                .map(str::parse)
                .transpose()?
                .unwrap_or(d.mode),
            anneal_steps: kv.parse_or("anneal_steps", d.anneal_steps)?,
            kl_weight: kv.parse_opt("kl_weight")?,
            learning_rate: kv.parse_or("lr", d.learning_rate)?,
            batch_size: kv.parse_or("batch_size", d.batch_size)?,
            epochs: kv.parse_or("epochs", d.epochs)?,
            hidden: kv.parse_or("hidden", d.hidden)?,
            latent: kv.parse_or("latent", d.latent)?,
            mem_slots: kv.parse_or("mem_slots", d.mem_slots)?,
            mem_width: kv.parse_or("mem_width", d.mem_width)?,
            label_dim: kv.parse_or("label_dim", d.label_dim)?,
            patient_slots: kv.parse_or("patient_slots", d.patient_slots)?,
            patient_width: kv.parse_or("patient_width", d.patient_width)?,
            score: kv
                .get("score")
                .map(str::parse)
                .transpose()?
                .unwrap_or(d.score),
            prior: kv
                .get("prior")
                .map(str::parse)
                .transpose()?
                .unwrap_or(d.prior),
            global_memory: kv
                .get("global_memory")
                .map(str::parse)
                .transpose()?
                .unwrap_or(d.global_memory),
            clusters: kv.parse_or("k", d.clusters)?,
            restarts: kv.parse_or("restarts", d.restarts)?,
            repr: kv
                .get("repr")
                .map(str::parse)
                .transpose()?
                .unwrap_or(d.repr),
            seed: kv.parse_or("seed", d.seed)?,
            workers: kv.parse_or("workers", d.workers)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("mode", self.mode.as_str());
        kv.set("anneal_steps", self.anneal_steps);
        if let Some(w) = self.kl_weight {
            kv.set("kl_weight", w);
        }
        kv.set("lr", self.learning_rate);
        kv.set("batch_size", self.batch_size);
        kv.set("epochs", self.epochs);
        kv.set("hidden", self.hidden);
        kv.set("latent", self.latent);
        kv.set("mem_slots", self.mem_slots);
        kv.set("mem_width", self.mem_width);
        kv.set("label_dim", self.label_dim);
        kv.set("patient_slots", self.patient_slots);
        kv.set("patient_width", self.patient_width);
        kv.set("score", self.score.as_str());
        kv.set("prior", self.prior.as_str());
        kv.set("global_memory", self.global_memory.as_str());
        kv.set("k", self.clusters);
        kv.set("restarts", self.restarts);
        kv.set("repr", self.repr.as_str());
        kv.set("seed", self.seed);
        kv.set("workers", self.workers);
        kv
    }

    pub fn validate(&self) -> Result<()> {
        if self.anneal_steps == 0 {
            return Err(Error::Config("anneal_steps must be positive".into()));
        }
        if let Some(w) = self.kl_weight {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!(
                    "kl_weight must be finite and >= 0, got {w}"
                )));
            }
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "lr must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        let sizes = [
            ("batch_size", self.batch_size),
            ("hidden", self.hidden),
            ("latent", self.latent),
            ("mem_slots", self.mem_slots),
            ("mem_width", self.mem_width),
            ("label_dim", self.label_dim),
            ("patient_slots", self.patient_slots),
            ("patient_width", self.patient_width),
            ("restarts", self.restarts),
            ("workers", self.workers),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.clusters < 2 {
            return Err(Error::Config(format!(
                "k must be at least 2, got {}",
                self.clusters
            )));
        }
        Ok(())
    }

    pub fn model_config(&self, features: usize, num_labels: usize) -> ModelConfig {
        ModelConfig {
            mode: self.mode,
            features,
            hidden: self.hidden,
            latent: self.latent,
            mem_slots: self.mem_slots,
            mem_width: self.mem_width,
            num_labels,
            label_dim: self.label_dim,
            patient_slots: self.patient_slots,
            patient_width: self.patient_width,
            score: self.score,
            prior: self.prior,
        }
    }

    /// KL weight after `step` optimizer updates.
    pub fn kl_weight_at(&self, step: u64) -> Result<f64> {
        match self.kl_weight {
            Some(w) => Ok(w),
            None => anneal_weight(step, self.anneal_steps),
        }
    }
}

/// `min(1, step / x)`.
pub fn anneal_weight(step: u64, x: u64) -> Result<f64> {
    if x == 0 {
        return Err(Error::Argument(
            "annealing threshold x must be positive".into(),
        ));
    }
    Ok((step as f64 / x as f64).min(1.0))
}

/// Adam moments, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new<P: ParamSet + ?Sized>(params: &P) -> Self {
        let shapes: Vec<(usize, usize)> = (0..params.param_count())
            .map(|i| params.param(i).value.shape())
            .collect();
        Self {
            m: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update from the gradients stored in `params`.
pub fn adam_step<P: ParamSet + ?Sized>(
    params: &mut P,
    state: &mut OptimizerState,
    lr: f64,
) -> Result<()> {
    if state.m.len() != params.param_count() {
        return Err(Error::dim("adam_step", state.m.len(), params.param_count()));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for i in 0..params.param_count() {
        let p = params.param_mut(i);
        if p.value.shape() != state.m[i].shape() {
            return Err(Error::dim(
                "adam_step",
                format!("{:?}", state.m[i].shape()),
                format!("{:?}", p.value.shape()),
            ));
        }
        let m = state.m[i].as_mut_slice();
        let v = state.v[i].as_mut_slice();
        let g = p.grad.as_slice().to_vec();
        for (k, w) in p.value.as_mut_slice().iter_mut().enumerate() {
            m[k] = ADAM_BETA1 * m[k] + (1.0 - ADAM_BETA1) * g[k];
            v[k] = ADAM_BETA2 * v[k] + (1.0 - ADAM_BETA2) * g[k] * g[k];
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// Loss terms of one optimizer step (or one epoch summary).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub kl: f64,
    pub task: f64,
    pub anneal: f64,
}

impl LossBreakdown {
    pub fn new(kl: f64, task: f64, anneal: f64) -> Self {
        Self {
            total: anneal * kl + task,
            kl,
            task,
            anneal,
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Optimizer steps completed at the end of the epoch.
    pub step: u64,
    /// Training means over the epoch, weighted at the end-of-epoch `α`.
    pub loss: LossBreakdown,
    pub val_loss: Option<f64>,
}

impl EpochRecord {
    pub fn render(&self) -> String {
        let mut fields = vec![
            ("epoch", self.epoch.to_string()),
            ("step", self.step.to_string()),
            ("total", self.loss.total.to_string()),
            ("kl", self.loss.kl.to_string()),
            ("task", self.loss.task.to_string()),
            ("anneal", self.loss.anneal.to_string()),
        ];
        if let Some(v) = self.val_loss {
            fields.push(("val", v.to_string()));
        }
        record(&fields)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters at the epoch with the lowest validation loss.
    pub params: TcemParams,
    pub best_epoch: usize,
    pub epochs: Vec<EpochRecord>,
    /// One entry per optimizer step.
    pub steps: Vec<LossBreakdown>,
}

/// Deterministic per-patient noise seeds.
fn noise_seed(seed: u64, stream: u64, a: u64, b: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos(((a as u128) << 40) | ((b as u128) << 4));
    rng.random()
}

struct PatientGrad {
    grads: TcemParams,
    kl: f64,
    task: f64,
}

fn zeroed(params: &TcemParams) -> TcemParams {
    let mut p = params.clone();
    p.zero_grad();
    p
}

/// Validation loss: `mean(KL + task)` with `α = 1` and fixed noise.
pub fn validation_loss(
    params: &TcemParams,
    cohort: &Cohort,
    seed: u64,
    global: GlobalMemory,
) -> Result<f64> {
    let c = &params.config;
    let mut bank = MemoryBank::new(c.mem_slots, c.mem_width);
    let mut total = 0.0;
    for (i, seq) in cohort.patients.iter().enumerate() {
        let noise = Noise::Seeded(noise_seed(seed, 2, 0, i as u64));
        let trace = match global {
            GlobalMemory::PerPatient => forward_sequence(params, seq, &noise)?,
            GlobalMemory::Shared => {
                let (t, b) = forward_sequence_from(params, seq, &noise, bank)?;
                bank = b;
                t
            }
        };
        let l = sequence_loss(&trace)?;
        total += l.kl + l.task;
    }
    Ok(total / cohort.len() as f64)
}

fn check_cohort(cfg: &TrainConfig, cohort: &Cohort, what: &str) -> Result<()> {
    if cfg.mode == Mode::Supervised && !cohort.has_labels() {
        return Err(Error::Config(format!(
            "supervised mode needs a label at every visit of the {what} split"
        )));
    }
    if cohort.patients.iter().any(|p| !p.is_complete()) {
        return Err(Error::State(format!(
            "{what} split must be imputed before training"
        )));
    }
    Ok(())
}

/// Trains on `splits.train`, selecting the epoch by loss on `splits.val`.
pub fn train(cfg: &TrainConfig, splits: &Splits) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train_set = &splits.train;
    if train_set.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    check_cohort(cfg, train_set, "train")?;
    if !splits.val.is_empty() {
        check_cohort(cfg, &splits.val, "validation")?;
    }
    let num_labels = match cfg.mode {
        Mode::Supervised => train_set.label_vocab.len(),
        Mode::Unsupervised => 0,
    };
    let model_cfg = cfg.model_config(train_set.feature_count(), num_labels);
    let mut params = TcemParams::init(&model_cfg, cfg.seed)?;
    let mut opt = OptimizerState::new(&params);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {} workers: {e}", cfg.workers)))?;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(1);

    let mut best: Option<(f64, usize, TcemParams)> = None;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut steps = Vec::new();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut kl_sum, mut task_sum) = (0.0, 0.0);
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let alpha = cfg.kl_weight_at(opt.step)?;
            let n = batch.len() as f64;
            let weights = LossWeights {
                kl: alpha / n,
                task: 1.0 / n,
            };
            let step = opt.step;
            let run = |pos: usize,
                       idx: usize,
                       bank: Option<MemoryBank>|
             -> Result<(PatientGrad, Option<MemoryBank>)> {
                let mut grads = zeroed(&params);
                let seq = &train_set.patients[idx];
                let noise = Noise::Seeded(noise_seed(cfg.seed, 0, step, pos as u64));
                let (mut trace, bank) = match bank {
                    Some(bk) => {
                        let (t, bk) = forward_sequence_from(&params, seq, &noise, bk)?;
                        (t, Some(bk))
                    }
                    None => (forward_sequence(&params, seq, &noise)?, None),
                };
                let l = sequence_loss(&trace)?;
                backward(&mut trace, &mut grads, weights)?;
                Ok((
                    PatientGrad {
                        grads,
                        kl: l.kl,
                        task: l.task,
                    },
                    bank,
                ))
            };
            let results: Vec<PatientGrad> = match cfg.global_memory {
                GlobalMemory::PerPatient => pool.install(|| {
                    batch
                        .par_iter()
                        .enumerate()
                        .map(|(pos, &idx)| run(pos, idx, None).map(|(g, _)| g))
                        .collect::<Result<Vec<_>>>()
                })?,
                GlobalMemory::Shared => {
                    let mut bank = Some(MemoryBank::new(model_cfg.mem_slots, model_cfg.mem_width));
                    let mut out = Vec::with_capacity(batch.len());
                    for (pos, &idx) in batch.iter().enumerate() {
                        let (g, bk) = run(pos, idx, bank.take())?;
                        bank = bk;
                        out.push(g);
                    }
                    out
                }
            };
            params.zero_grad();
            let (mut kl, mut task) = (0.0, 0.0);
            for r in &results {
                params.accumulate_grads(&r.grads);
                kl += r.kl;
                task += r.task;
            }
            let loss = LossBreakdown::new(kl / n, task / n, alpha);
            let grads_finite = params.named().iter().all(|(_, p)| p.grad.is_finite());
            if !loss.total.is_finite() || !grads_finite {
                return Err(Error::Diverged {
                    epoch,
                    batch: b + 1,
                });
            }
            adam_step(&mut params, &mut opt, cfg.learning_rate)?;
            if !params.all_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: b + 1,
                });
            }
            steps.push(loss);
            kl_sum += kl;
            task_sum += task;
        }
        params.zero_grad();
        let n = train_set.len() as f64;
        let anneal = cfg.kl_weight_at(opt.step)?;
        let loss = LossBreakdown::new(kl_sum / n, task_sum / n, anneal);
        let val_loss = if splits.val.is_empty() {
            None
        } else {
            Some(validation_loss(
                &params,
                &splits.val,
                cfg.seed,
                cfg.global_memory,
            )?)
        };
        let score = val_loss.unwrap_or(loss.total);
        if !score.is_finite() {
            return Err(Error::Diverged { epoch, batch: 0 });
        }
        if best.as_ref().is_none_or(|(s, _, _)| score < *s) {
            best = Some((score, epoch, params.clone()));
        }
        epochs.push(EpochRecord {
            epoch,
            step: opt.step,
            loss,
            val_loss,
        });
    }
    let (best_params, best_epoch) = match best {
        Some((_, e, p)) => (p, e),
        None => (params, 0),
    };
    Ok(TrainOutcome {
        params: best_params,
        best_epoch,
        epochs,
        steps,
    })
}
