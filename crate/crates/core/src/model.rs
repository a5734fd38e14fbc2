//! The per-visit variational sequence model.
//!
//! For each visit `t` of one patient, in order:
//!
//! 1. `h_t = LSTM(x_t, h_{t-1})`
//! 2. read the global bank with `h_t`
//! 3. (supervised) read the patient bank, which only holds embeddings of
//!    labels `y_1..y_{t-1}`, and gate the global read with it
//! 4. posterior `q(z | h_t, x_t)`, prior `p(z | h_t)`, `z_t = μ + σ ⊙ ε`
//! 5. head on `[z_t ⊕ e_t]`: label probabilities or a reconstruction of `x_t`
//! 6. write `h_t` to the global bank and (supervised) the embedded `y_t` to
//!    the patient bank, after the step's outputs exist
//!
//! [`backward`] walks the recorded [`ForwardTrace`] in reverse, carrying
//! gradients through the recurrent state and both banks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::PatientSequence;
use crate::kv::KvMap;
use crate::memory::{
    calibrate_backward, calibrate_gate, memory_read_backward, memory_read_cached, memory_write,
    memory_write_backward, CalibrationParams, MemoryBank, MemoryParams, ReadCache, ScoreKind,
    WriteCache,
};
use crate::nn::{
    linear_backward, linear_forward, lstm_cell_backward, lstm_cell_cached, softmax, LstmCache,
    LstmCellParams, Matrix, Param, ParamSet,
};
use crate::{Error, Result};

pub const LOG_SIGMA_MIN: f64 = -8.0;
pub const LOG_SIGMA_MAX: f64 = 8.0;
/// Probabilities are floored here before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Label prediction with the dual memory.
    Supervised,
    /// Reconstruction with the global memory only.
    Unsupervised,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Supervised => "supervised",
            Mode::Unsupervised => "unsupervised",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "supervised" => Ok(Mode::Supervised),
            "unsupervised" => Ok(Mode::Unsupervised),
            other => Err(Error::Config(format!(
                "unknown mode `{other}` (supervised|unsupervised)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PriorKind {
    /// Diagonal Gaussian heads on `h_t`.
    #[default]
    Learned,
    /// `N(0, I)`.
    Standard,
}

impl std::str::FromStr for PriorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "learned" => Ok(PriorKind::Learned),
            "standard" => Ok(PriorKind::Standard),
            other => Err(Error::Config(format!(
                "unknown prior `{other}` (learned|standard)"
            ))),
        }
    }
}

impl PriorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PriorKind::Learned => "learned",
            PriorKind::Standard => "standard",
        }
    }
}

/// Which per-visit vector is handed to k-means.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Representation {
    /// Posterior mean concatenated with the memory read, `μ_t ⊕ e_t`.
    #[default]
    LatentAndMemory,
    /// Posterior mean only.
    Latent,
}

impl std::str::FromStr for Representation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "z_e" => Ok(Representation::LatentAndMemory),
            "z" => Ok(Representation::Latent),
            other => Err(Error::Config(format!(
                "unknown representation `{other}` (z_e|z)"
            ))),
        }
    }
}

impl Representation {
    pub fn as_str(self) -> &'static str {
        match self {
            Representation::LatentAndMemory => "z_e",
            Representation::Latent => "z",
        }
    }
}

/// Architecture of a model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub mode: Mode,
    pub features: usize,
    pub hidden: usize,
    pub latent: usize,
    pub mem_slots: usize,
    pub mem_width: usize,
    /// Label vocabulary size; only used in supervised mode.
    pub num_labels: usize,
    pub label_dim: usize,
    pub patient_slots: usize,
    pub patient_width: usize,
    pub score: ScoreKind,
    pub prior: PriorKind,
}

impl ModelConfig {
    /// Widths from the reference setup (hidden and latent 128).
    pub fn new(mode: Mode, features: usize, num_labels: usize) -> Self {
        Self {
            mode,
            features,
            hidden: 128,
            latent: 128,
            mem_slots: 8,
            mem_width: 128,
            num_labels,
            label_dim: 16,
            patient_slots: 8,
            patient_width: 16,
            score: ScoreKind::Additive,
            prior: PriorKind::Learned,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("features", self.features),
            ("hidden", self.hidden),
            ("latent", self.latent),
            ("mem_slots", self.mem_slots),
            ("mem_width", self.mem_width),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.mode == Mode::Supervised
            && (self.num_labels < 2
                || self.label_dim == 0
                || self.patient_slots == 0
                || self.patient_width == 0)
        {
            return Err(Error::Config(
                "supervised mode needs num_labels >= 2 and positive label/patient memory sizes"
                    .into(),
            ));
        }
        Ok(())
    }

    pub fn head_width(&self) -> usize {
        match self.mode {
            Mode::Supervised => self.num_labels,
            Mode::Unsupervised => self.features,
        }
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("mode", self.mode.as_str());
        kv.set("features", self.features);
        kv.set("hidden", self.hidden);
        kv.set("latent", self.latent);
        kv.set("mem_slots", self.mem_slots);
        kv.set("mem_width", self.mem_width);
        kv.set("num_labels", self.num_labels);
        kv.set("label_dim", self.label_dim);
        kv.set("patient_slots", self.patient_slots);
        kv.set("patient_width", self.patient_width);
        kv.set("score", self.score.as_str());
        kv.set("prior", self.prior.as_str());
        kv
    }

    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let need = |k: &str| -> Result<usize> {
            kv.parse_opt(k)?
                .ok_or_else(|| Error::Config(format!("model config is missing `{k}`")))
        };
        let mode = kv
            .get("mode")
            .ok_or_else(|| Error::Config("model config is missing `mode`".into()))?
            .parse()?;
        let cfg = Self {
            mode,
            features: need("features")?,
            hidden: need("hidden")?,
            latent: need("latent")?,
            mem_slots: need("mem_slots")?,
            mem_width: need("mem_width")?,
            num_labels: need("num_labels")?,
            label_dim: need("label_dim")?,
            patient_slots: need("patient_slots")?,
            patient_width: need("patient_width")?,
            score: kv.get("score").unwrap_or("add").parse()?,
            prior: kv.get("prior").unwrap_or("learned").parse()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Weight and bias of one affine map.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub w: Param,
    pub b: Param,
}

impl Linear {
    pub fn init<R: Rng + ?Sized>(out: usize, input: usize, rng: &mut R) -> Self {
        Self {
            w: Param::fan_in_uniform(out, input, rng),
            b: Param::zeros(out, 1),
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        linear_forward(&self.w.value, self.b.value.as_slice(), x)
    }

    pub fn backward(&mut self, x: &[f64], dy: &[f64], dx: Option<&mut [f64]>) {
        linear_backward(&mut self.w, &mut self.b, x, dy, dx);
    }
}

/// Mean and log-standard-deviation maps of a diagonal Gaussian.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianHead {
    pub mu: Linear,
    pub log_sigma: Linear,
}

impl GaussianHead {
    pub fn init<R: Rng + ?Sized>(out: usize, input: usize, rng: &mut R) -> Self {
        Self {
            mu: Linear::init(out, input, rng),
            log_sigma: Linear::init(out, input, rng),
        }
    }
}

/// Patient-level (label-history) memory and its calibration gate.
#[derive(Clone, Debug, PartialEq)]
pub struct PatientMemory {
    pub label_embedding: Param,
    pub memory: MemoryParams,
    pub calibration: CalibrationParams,
}

/// All learnable tensors of the model.
#[derive(Clone, Debug, PartialEq)]
pub struct TcemParams {
    pub config: ModelConfig,
    pub encoder: LstmCellParams,
    pub global: MemoryParams,
    pub patient: Option<PatientMemory>,
    pub posterior: GaussianHead,
    pub prior: Option<GaussianHead>,
    pub head: Linear,
}

impl TcemParams {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = LstmCellParams::init(c.features, c.hidden, &mut rng);
        let global = MemoryParams::init(c.mem_slots, c.mem_width, c.hidden, c.hidden, &mut rng);
        let patient = (c.mode == Mode::Supervised).then(|| PatientMemory {
            label_embedding: Param::new(Matrix::uniform(c.num_labels, c.label_dim, 1.0, &mut rng)),
            memory: MemoryParams::init(
                c.patient_slots,
                c.patient_width,
                c.hidden,
                c.label_dim,
                &mut rng,
            ),
            calibration: CalibrationParams::init(c.mem_width, c.patient_width, &mut rng),
        });
        let posterior = GaussianHead::init(c.latent, c.hidden + c.features, &mut rng);
        let prior = (c.prior == PriorKind::Learned)
            .then(|| GaussianHead::init(c.latent, c.hidden, &mut rng));
        let head = Linear::init(c.head_width(), c.latent + c.mem_width, &mut rng);
        Ok(Self {
            config: config.clone(),
            encoder,
            global,
            patient,
            posterior,
            prior,
            head,
        })
    }

    /// Named tensors in a fixed order.
    pub fn named(&self) -> Vec<(String, &Param)> {
        let mut v: Vec<(String, &Param)> = vec![
            ("encoder.w_input".into(), &self.encoder.w_input),
            ("encoder.w_hidden".into(), &self.encoder.w_hidden),
            ("encoder.bias".into(), &self.encoder.bias),
        ];
        for (n, p) in self.global.tensors() {
            v.push((format!("global.{n}"), p));
        }
        if let Some(pm) = &self.patient {
            v.push(("patient.label_embedding".into(), &pm.label_embedding));
            for (n, p) in pm.memory.tensors() {
                v.push((format!("patient.{n}"), p));
            }
            v.push(("patient.calibration.w".into(), &pm.calibration.w));
            v.push(("patient.calibration.b".into(), &pm.calibration.b));
        }
        let heads = [
            ("posterior", Some(&self.posterior)),
            ("prior", self.prior.as_ref()),
        ];
        for (name, head) in heads {
            if let Some(h) = head {
                v.push((format!("{name}.mu.w"), &h.mu.w));
                v.push((format!("{name}.mu.b"), &h.mu.b));
                v.push((format!("{name}.log_sigma.w"), &h.log_sigma.w));
                v.push((format!("{name}.log_sigma.b"), &h.log_sigma.b));
            }
        }
        v.push(("head.w".into(), &self.head.w));
        v.push(("head.b".into(), &self.head.b));
        v
    }

    /// Mutable tensors in the same order as [`TcemParams::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Param> {
        let mut v: Vec<&mut Param> = vec![
            &mut self.encoder.w_input,
            &mut self.encoder.w_hidden,
            &mut self.encoder.bias,
        ];
        let g = &mut self.global;
        v.extend([
            &mut g.key,
            &mut g.write,
            &mut g.gate_w,
            &mut g.gate_b,
            &mut g.strengths,
        ]);
        if let Some(pm) = &mut self.patient {
            v.push(&mut pm.label_embedding);
            let m = &mut pm.memory;
            v.extend([
                &mut m.key,
                &mut m.write,
                &mut m.gate_w,
                &mut m.gate_b,
                &mut m.strengths,
            ]);
            v.push(&mut pm.calibration.w);
            v.push(&mut pm.calibration.b);
        }
        for h in std::iter::once(&mut self.posterior).chain(self.prior.as_mut()) {
            v.extend([
                &mut h.mu.w,
                &mut h.mu.b,
                &mut h.log_sigma.w,
                &mut h.log_sigma.b,
            ]);
        }
        v.push(&mut self.head.w);
        v.push(&mut self.head.b);
        v
    }

    /// Adds every gradient of `other` into this set's gradients.
    pub fn accumulate_grads(&mut self, other: &TcemParams) {
        let src: Vec<&Param> = other.named().into_iter().map(|(_, p)| p).collect();
        for (dst, s) in self.tensors_mut().into_iter().zip(src) {
            dst.grad.add_assign(&s.grad);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.named().iter().all(|(_, p)| p.value.is_finite())
    }
}

impl ParamSet for TcemParams {
    fn param_count(&self) -> usize {
        self.named().len()
    }

    fn param_name(&self, index: usize) -> String {
        self.named().swap_remove(index).0
    }

    fn param(&self, index: usize) -> &Param {
        self.named().swap_remove(index).1
    }

    fn param_mut(&mut self, index: usize) -> &mut Param {
        self.tensors_mut().swap_remove(index)
    }
}

/// `μ = W_μ [h ⊕ x] + b_μ`, `σ = exp(clamp(W_σ [h ⊕ x] + b_σ, -8, 8))`.
pub fn posterior_params(head: &GaussianHead, h: &[f64], x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut u = h.to_vec();
    u.extend_from_slice(x);
    let mu = head.mu.forward(&u)?;
    let sigma = head
        .log_sigma
        .forward(&u)?
        .into_iter()
        .map(clamped_exp)
        .collect();
    Ok((mu, sigma))
}

fn clamped_exp(log_sigma: f64) -> f64 {
    log_sigma.clamp(LOG_SIGMA_MIN, LOG_SIGMA_MAX).exp()
}

fn clamp_active(log_sigma: f64) -> bool {
    !(LOG_SIGMA_MIN..=LOG_SIGMA_MAX).contains(&log_sigma)
}

/// `z = μ + σ ⊙ ε`.
pub fn reparameterize(mu: &[f64], sigma: &[f64], eps: &[f64]) -> Vec<f64> {
    mu.iter()
        .zip(sigma)
        .zip(eps)
        .map(|((m, s), e)| m + s * e)
        .collect()
}

/// Closed-form `KL(N(μ_q, σ_q²) ‖ N(μ_p, σ_p²))` for diagonal Gaussians.
pub fn gaussian_kl(mu_q: &[f64], sigma_q: &[f64], mu_p: &[f64], sigma_p: &[f64]) -> Result<f64> {
    let n = mu_q.len();
    if sigma_q.len() != n || mu_p.len() != n || sigma_p.len() != n {
        return Err(Error::dim(
            "gaussian_kl",
            n,
            format!("{}/{}/{}", sigma_q.len(), mu_p.len(), sigma_p.len()),
        ));
    }
    if let Some(s) = sigma_q.iter().chain(sigma_p).find(|&&s| !(s > 0.0)) {
        return Err(Error::Argument(format!(
            "standard deviations must be positive, got {s}"
        )));
    }
    Ok((0..n)
        .map(|i| {
            let (sq, sp) = (sigma_q[i], sigma_p[i]);
            let dm = mu_q[i] - mu_p[i];
            (sp / sq).ln() + (sq * sq + dm * dm) / (2.0 * sp * sp) - 0.5
        })
        .sum())
}

/// Gradients of `scale · KL` w.r.t. `(μ_q, σ_q, μ_p, σ_p)`, accumulated.
fn gaussian_kl_backward(
    mu_q: &[f64],
    sigma_q: &[f64],
    mu_p: &[f64],
    sigma_p: &[f64],
    scale: f64,
    d_mu_q: &mut [f64],
    d_sigma_q: &mut [f64],
    mut d_prior: Option<(&mut [f64], &mut [f64])>,
) {
    for i in 0..mu_q.len() {
        let (sq, sp) = (sigma_q[i], sigma_p[i]);
        let dm = mu_q[i] - mu_p[i];
        let sp2 = sp * sp;
        d_mu_q[i] += scale * dm / sp2;
        d_sigma_q[i] += scale * (-1.0 / sq + sq / sp2);
        if let Some((d_mu_p, d_sigma_p)) = d_prior.as_mut() {
            d_mu_p[i] -= scale * dm / sp2;
            d_sigma_p[i] += scale * (1.0 / sp - (sq * sq + dm * dm) / (sp2 * sp));
        }
    }
}

/// Source of the reparameterization noise `ε`.
#[derive(Clone, Debug)]
pub enum Noise {
    /// Fresh standard-normal draws from a seeded generator.
    Seeded(u64),
    /// `ε = 0`: the deterministic path used at inference.
    Zero,
    /// Explicit draws, one row per visit.
    Fixed(Vec<Vec<f64>>),
}

/// Forward record of one visit.
#[derive(Clone, Debug)]
pub struct StepTrace {
    lstm: LstmCache,
    global_read: ReadCache,
    pub e_global: Vec<f64>,
    patient_read: Option<ReadCache>,
    pub e_patient: Option<Vec<f64>>,
    calibration_gate: Option<Vec<f64>>,
    /// Memory representation fed to the head (calibrated in supervised mode).
    pub e: Vec<f64>,
    posterior_input: Vec<f64>,
    pub mu: Vec<f64>,
    log_sigma: Vec<f64>,
    pub sigma: Vec<f64>,
    prior_log_sigma: Vec<f64>,
    pub prior_mu: Vec<f64>,
    pub prior_sigma: Vec<f64>,
    pub eps: Vec<f64>,
    pub z: Vec<f64>,
    head_input: Vec<f64>,
    /// Label probabilities (supervised) or reconstruction (unsupervised).
    pub output: Vec<f64>,
    global_write: WriteCache,
    patient_write: Option<(usize, WriteCache)>,
}

impl StepTrace {
    pub fn h(&self) -> &[f64] {
        &self.lstm.h
    }
}

#[derive(Clone, Debug)]
enum Targets {
    Labels(Vec<usize>),
    Reconstruction { x: Matrix, observed: Vec<bool> },
}

/// Per-visit forward record of one sequence; consumed by [`backward`].
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub patient_id: String,
    pub mode: Mode,
    pub steps: Vec<StepTrace>,
    targets: Targets,
    consumed: bool,
}

impl ForwardTrace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Unweighted loss terms of one sequence.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SequenceLoss {
    /// KL divergence averaged over visits.
    pub kl: f64,
    /// Cross-entropy per visit, or masked MSE per observed entry.
    pub task: f64,
}

/// Runs the model over one sequence with a fresh global bank.
pub fn forward_sequence(
    params: &TcemParams,
    seq: &PatientSequence,
    noise: &Noise,
) -> Result<ForwardTrace> {
    let c = &params.config;
    forward_sequence_from(
        params,
        seq,
        noise,
        MemoryBank::new(c.mem_slots, c.mem_width),
    )
    .map(|(t, _)| t)
}

/// Like [`forward_sequence`] but starting from an existing global bank,
/// which is returned updated. Gradients do not flow into the incoming bank.
pub fn forward_sequence_from(
    params: &TcemParams,
    seq: &PatientSequence,
    noise: &Noise,
    mut global_bank: MemoryBank,
) -> Result<(ForwardTrace, MemoryBank)> {
    let c = &params.config;
    let t_len = seq.visits();
    if t_len == 0 {
        return Err(Error::Data(format!("patient `{}` has no visits", seq.id)));
    }
    if seq.feature_count() != c.features {
        return Err(Error::dim(
            "forward_sequence",
            c.features,
            seq.feature_count(),
        ));
    }
    if !seq.is_complete() {
        return Err(Error::Data(format!(
            "patient `{}` has missing entries; impute before running the model",
            seq.id
        )));
    }
    if global_bank.capacity() != c.mem_slots || global_bank.width() != c.mem_width {
        return Err(Error::dim(
            "forward_sequence",
            format!("global bank {}x{}", c.mem_slots, c.mem_width),
            format!(
                "global bank {}x{}",
                global_bank.capacity(),
                global_bank.width()
            ),
        ));
    }
    let labels: Option<Vec<usize>> = match c.mode {
        Mode::Supervised => {
            let mut out = Vec::with_capacity(t_len);
            for (t, l) in seq.labels.iter().enumerate() {
                let l = l.ok_or_else(|| {
                    Error::Data(format!("patient `{}` has no label at visit {t}", seq.id))
                })?;
                if l >= c.num_labels {
                    return Err(Error::Data(format!(
                        "patient `{}` visit {t}: label {l} out of range (num_labels {})",
                        seq.id, c.num_labels
                    )));
                }
                out.push(l);
            }
            Some(out)
        }
        Mode::Unsupervised => None,
    };
    let mut noise_rng = match noise {
        Noise::Seeded(s) => Some(ChaCha8Rng::seed_from_u64(*s)),
        _ => None,
    };
    if let Noise::Fixed(rows) = noise {
        if rows.len() < t_len || rows.iter().any(|r| r.len() != c.latent) {
            return Err(Error::dim(
                "forward_sequence noise",
                format!("{t_len}x{}", c.latent),
                rows.len(),
            ));
        }
    }

    let mut patient_bank = params
        .patient
        .as_ref()
        .map(|_| MemoryBank::new(c.patient_slots, c.patient_width));
    let mut h = vec![0.0; c.hidden];
    let mut cell = vec![0.0; c.hidden];
    let mut steps = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let x = seq.visit(t);
        let lstm = lstm_cell_cached(&params.encoder, x, &h, &cell)?;
        let (gread, global_read) =
            memory_read_cached(&global_bank, &lstm.h, &params.global, c.score)?;
        let e_global = gread.e;

        let (patient_read, e_patient, calibration_gate, e) = match (&params.patient, &patient_bank)
        {
            (Some(pm), Some(bank)) => {
                let (pread, pcache) = memory_read_cached(bank, &lstm.h, &pm.memory, c.score)?;
                let gate = calibrate_gate(&e_global, &pread.e, &pm.calibration)?;
                let e = e_global.iter().zip(&gate).map(|(a, s)| a * s).collect();
                (Some(pcache), Some(pread.e), Some(gate), e)
            }
            _ => (None, None, None, e_global.clone()),
        };

        let mut posterior_input = lstm.h.clone();
        posterior_input.extend_from_slice(x);
        let mu = params.posterior.mu.forward(&posterior_input)?;
        let log_sigma = params.posterior.log_sigma.forward(&posterior_input)?;
        let sigma: Vec<f64> = log_sigma.iter().copied().map(clamped_exp).collect();
        let (prior_mu, prior_log_sigma, prior_sigma) = match &params.prior {
            Some(p) => {
                let m = p.mu.forward(&lstm.h)?;
                let ls = p.log_sigma.forward(&lstm.h)?;
                let s = ls.iter().copied().map(clamped_exp).collect();
                (m, ls, s)
            }
            None => (
                vec![0.0; c.latent],
                vec![0.0; c.latent],
                vec![1.0; c.latent],
            ),
        };
        let eps: Vec<f64> = match noise {
            Noise::Seeded(_) => {
                let rng = noise_rng.as_mut().expect("seeded rng");
                (0..c.latent).map(|_| rng.sample(StandardNormal)).collect()
            }
            Noise::Zero => vec![0.0; c.latent],
            Noise::Fixed(rows) => rows[t].clone(),
        };
        let z = reparameterize(&mu, &sigma, &eps);
        let mut head_input = z.clone();
        head_input.extend_from_slice(&e);
        let raw = params.head.forward(&head_input)?;
        let output = match c.mode {
            Mode::Supervised => softmax(&raw)?,
            Mode::Unsupervised => raw,
        };

        let global_write = memory_write(&mut global_bank, &lstm.h, &params.global)?;
        let patient_write = match (&params.patient, patient_bank.as_mut(), &labels) {
            (Some(pm), Some(bank), Some(ls)) => {
                let y = ls[t];
                let emb = pm.label_embedding.value.row(y).to_vec();
                Some((y, memory_write(bank, &emb, &pm.memory)?))
            }
            _ => None,
        };

        h = lstm.h.clone();
        cell = lstm.c.clone();
        steps.push(StepTrace {
            lstm,
            global_read,
            e_global,
            patient_read,
            e_patient,
            calibration_gate,
            e,
            posterior_input,
            mu,
            log_sigma,
            sigma,
            prior_log_sigma,
            prior_mu,
            prior_sigma,
            eps,
            z,
            head_input,
            output,
            global_write,
            patient_write,
        });
    }
    let targets = match labels {
        Some(ls) => Targets::Labels(ls),
        None => Targets::Reconstruction {
            x: seq.features.clone(),
            observed: seq.observed.clone(),
        },
    };
    Ok((
        ForwardTrace {
            patient_id: seq.id.clone(),
            mode: c.mode,
            steps,
            targets,
            consumed: false,
        },
        global_bank,
    ))
}

/// Loss terms of a completed trace.
pub fn sequence_loss(trace: &ForwardTrace) -> Result<SequenceLoss> {
    let t_len = trace.steps.len() as f64;
    let mut kl = 0.0;
    for s in &trace.steps {
        kl += gaussian_kl(&s.mu, &s.sigma, &s.prior_mu, &s.prior_sigma)?;
    }
    let task = match &trace.targets {
        Targets::Labels(ls) => {
            let probs: Vec<&[f64]> = trace.steps.iter().map(|s| s.output.as_slice()).collect();
            cross_entropy(&probs, ls)?
        }
        Targets::Reconstruction { x, observed } => {
            let recon: Vec<f64> = trace
                .steps
                .iter()
                .flat_map(|s| s.output.iter().copied())
                .collect();
            reconstruction_mse(&recon, x.as_slice(), observed)?
        }
    };
    Ok(SequenceLoss {
        kl: kl / t_len,
        task,
    })
}

/// Mean over visits of `-ln max(p[label], 1e-12)`.
pub fn cross_entropy(probs: &[&[f64]], labels: &[usize]) -> Result<f64> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(Error::dim("cross_entropy", probs.len(), labels.len()));
    }
    let mut total = 0.0;
    for (t, (p, &y)) in probs.iter().zip(labels).enumerate() {
        let py = *p.get(y).ok_or_else(|| {
            Error::Data(format!(
                "visit {t}: label {y} out of range for {} classes",
                p.len()
            ))
        })?;
        total -= py.max(PROB_FLOOR).ln();
    }
    Ok(total / probs.len() as f64)
}

/// Mean squared error over entries with `observed == true`.
pub fn reconstruction_mse(recon: &[f64], x: &[f64], observed: &[bool]) -> Result<f64> {
    if recon.len() != x.len() || x.len() != observed.len() {
        return Err(Error::dim(
            "reconstruction_mse",
            x.len(),
            format!("{}/{}", recon.len(), observed.len()),
        ));
    }
    let n = observed.iter().filter(|&&o| o).count();
    if n == 0 {
        return Err(Error::Data(
            "reconstruction loss over an empty observation mask".into(),
        ));
    }
    let sum: f64 = recon
        .iter()
        .zip(x)
        .zip(observed)
        .filter(|(_, &o)| o)
        .map(|((a, b), _)| (a - b).powi(2))
        .sum();
    Ok(sum / n as f64)
}

/// Upstream weights for the two loss terms of one sequence.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub kl: f64,
    pub task: f64,
}

/// Accumulates into `params` the gradient of
/// `weights.kl · kl + weights.task · task` for the sequence in `trace`.
/// A trace can be consumed once.
pub fn backward(
    trace: &mut ForwardTrace,
    params: &mut TcemParams,
    weights: LossWeights,
) -> Result<()> {
    if trace.consumed {
        return Err(Error::State(format!(
            "trace for patient `{}` was already consumed by backward; run forward again",
            trace.patient_id
        )));
    }
    trace.consumed = true;
    let c = params.config.clone();
    let t_len = trace.steps.len();
    let kl_scale = weights.kl / t_len as f64;
    let n_observed = match &trace.targets {
        Targets::Reconstruction { observed, .. } => {
            let n = observed.iter().filter(|&&o| o).count();
            if n == 0 {
                return Err(Error::Data(
                    "reconstruction loss over an empty observation mask".into(),
                ));
            }
            n
        }
        Targets::Labels(_) => 0,
    };

    let mut dh_next = vec![0.0; c.hidden];
    let mut dc_next = vec![0.0; c.hidden];
    let mut d_global = Matrix::zeros(c.mem_slots, c.mem_width);
    let mut d_patient = Matrix::zeros(c.patient_slots, c.patient_width);

    for t in (0..t_len).rev() {
        let s = &trace.steps[t];
        let mut dh = std::mem::take(&mut dh_next);

        if let (Some(pm), Some((y, cache))) = (params.patient.as_mut(), &s.patient_write) {
            let mut d_emb = vec![0.0; c.label_dim];
            memory_write_backward(&mut pm.memory, cache, &mut d_patient, &mut d_emb);
            for (g, d) in pm.label_embedding.grad.row_mut(*y).iter_mut().zip(&d_emb) {
                *g += d;
            }
        }
        memory_write_backward(&mut params.global, &s.global_write, &mut d_global, &mut dh);

        let mut d_out = vec![0.0; s.output.len()];
        match &trace.targets {
            Targets::Labels(ls) => {
                let y = ls[t];
                if s.output[y] >= PROB_FLOOR {
                    let scale = weights.task / t_len as f64;
                    for (k, d) in d_out.iter_mut().enumerate() {
                        let onehot = if k == y { 1.0 } else { 0.0 };
                        *d = scale * (s.output[k] - onehot);
                    }
                }
            }
            Targets::Reconstruction { x, observed } => {
                let f = c.features;
                let scale = 2.0 * weights.task / n_observed as f64;
                for j in 0..f {
                    if observed[t * f + j] {
                        d_out[j] = scale * (s.output[j] - x.get(t, j));
                    }
                }
            }
        }
        let mut d_head_in = vec![0.0; c.latent + c.mem_width];
        params
            .head
            .backward(&s.head_input, &d_out, Some(&mut d_head_in));
        let (dz, de) = d_head_in.split_at(c.latent);

        let mut d_mu = dz.to_vec();
        let mut d_sigma: Vec<f64> = dz.iter().zip(&s.eps).map(|(d, e)| d * e).collect();
        let mut d_prior_mu = vec![0.0; c.latent];
        let mut d_prior_sigma = vec![0.0; c.latent];
        gaussian_kl_backward(
            &s.mu,
            &s.sigma,
            &s.prior_mu,
            &s.prior_sigma,
            kl_scale,
            &mut d_mu,
            &mut d_sigma,
            params
                .prior
                .is_some()
                .then_some((&mut d_prior_mu[..], &mut d_prior_sigma[..])),
        );
        let d_log_sigma: Vec<f64> = (0..c.latent)
            .map(|i| {
                if clamp_active(s.log_sigma[i]) {
                    0.0
                } else {
                    d_sigma[i] * s.sigma[i]
                }
            })
            .collect();
        let mut d_post_in = vec![0.0; c.hidden + c.features];
        params
            .posterior
            .mu
            .backward(&s.posterior_input, &d_mu, Some(&mut d_post_in));
        params
            .posterior
            .log_sigma
            .backward(&s.posterior_input, &d_log_sigma, Some(&mut d_post_in));
        for (a, b) in dh.iter_mut().zip(&d_post_in[..c.hidden]) {
            *a += b;
        }
        if let Some(prior) = params.prior.as_mut() {
            let d_prior_ls: Vec<f64> = (0..c.latent)
                .map(|i| {
                    if clamp_active(s.prior_log_sigma[i]) {
                        0.0
                    } else {
                        d_prior_sigma[i] * s.prior_sigma[i]
                    }
                })
                .collect();
            let h = s.lstm.h.as_slice();
            prior.mu.backward(h, &d_prior_mu, Some(&mut dh));
            prior.log_sigma.backward(h, &d_prior_ls, Some(&mut dh));
        }

        let d_e_global = match (
            params.patient.as_mut(),
            &s.calibration_gate,
            &s.e_patient,
            &s.patient_read,
        ) {
            (Some(pm), Some(gate), Some(e_patient), Some(pcache)) => {
                let (dg, dp) =
                    calibrate_backward(&mut pm.calibration, &s.e_global, e_patient, gate, de);
                memory_read_backward(
                    &mut pm.memory,
                    pcache,
                    c.score,
                    &dp,
                    &mut dh,
                    &mut d_patient,
                );
                dg
            }
            _ => de.to_vec(),
        };
        memory_read_backward(
            &mut params.global,
            &s.global_read,
            c.score,
            &d_e_global,
            &mut dh,
            &mut d_global,
        );

        let (_dx, dh_prev, dc_prev) =
            lstm_cell_backward(&mut params.encoder, &s.lstm, &dh, &dc_next);
        dh_next = dh_prev;
        dc_next = dc_prev;
    }
    Ok(())
}

/// Per-visit vectors for clustering, computed on the noise-free path.
pub fn representation_for_clustering(trace: &ForwardTrace, repr: Representation) -> Vec<Vec<f64>> {
    trace
        .steps
        .iter()
        .map(|s| match repr {
            Representation::LatentAndMemory => {
                let mut v = s.mu.clone();
                v.extend_from_slice(&s.e);
                v
            }
            Representation::Latent => s.mu.clone(),
        })
        .collect()
}

/// Runs the deterministic forward pass and returns clustering vectors.
pub fn represent(
    params: &TcemParams,
    seq: &PatientSequence,
    repr: Representation,
) -> Result<Vec<Vec<f64>>> {
    let trace = forward_sequence(params, seq, &Noise::Zero)?;
    Ok(representation_for_clustering(&trace, repr))
}
