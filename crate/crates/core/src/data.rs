//! Patient cohorts: synthetic generation, long-format CSV I/O, imputation,
//! normalization and patient-level splitting.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::kv::{parse_rows, render_rows, KvMap};
use crate::nn::Matrix;
use crate::{Error, Result};

/// One patient's visits in order.
#[derive(Clone, Debug, PartialEq)]
pub struct PatientSequence {
    pub id: String,
    /// `T × F`; entries that are not available hold 0.
    pub features: Matrix,
    /// Mask of originally observed entries, row-major `T × F`. Never changes.
    pub observed: Vec<bool>,
    /// Mask of entries currently holding a value (observed or imputed).
    pub available: Vec<bool>,
    /// Label index per visit, if known.
    pub labels: Vec<Option<usize>>,
    /// Ground-truth stage per visit (synthetic cohorts only).
    pub stages: Option<Vec<usize>>,
}

impl PatientSequence {
    pub fn visits(&self) -> usize {
        self.features.rows()
    }

    pub fn feature_count(&self) -> usize {
        self.features.cols()
    }

    pub fn visit(&self, t: usize) -> &[f64] {
        self.features.row(t)
    }

    pub fn observed_row(&self, t: usize) -> &[bool] {
        let f = self.feature_count();
        &self.observed[t * f..(t + 1) * f]
    }

    pub fn has_labels(&self) -> bool {
        self.labels.iter().all(Option::is_some)
    }

    pub fn is_complete(&self) -> bool {
        self.available.iter().all(|&a| a)
    }
}

/// Per-feature statistics fitted on the training split.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Mean and population standard deviation over observed entries. A
    /// constant feature gets std 1.
    pub fn fit(train: &Cohort) -> Result<Self> {
        let f = train.feature_count();
        let mut sum = vec![0.0; f];
        let mut count = vec![0usize; f];
        for p in &train.patients {
            for t in 0..p.visits() {
                for (j, (&x, &o)) in p.visit(t).iter().zip(p.observed_row(t)).enumerate() {
                    if o {
                        sum[j] += x;
                        count[j] += 1;
                    }
                }
            }
        }
        if let Some(j) = count.iter().position(|&c| c == 0) {
            return Err(Error::Data(format!(
                "feature `{}` is never observed in the training split",
                train.feature_names[j]
            )));
        }
        let mean: Vec<f64> = sum.iter().zip(&count).map(|(s, &c)| s / c as f64).collect();
        let mut sq = vec![0.0; f];
        for p in &train.patients {
            for t in 0..p.visits() {
                for (j, (&x, &o)) in p.visit(t).iter().zip(p.observed_row(t)).enumerate() {
                    if o {
                        sq[j] += (x - mean[j]).powi(2);
                    }
                }
            }
        }
        let std = sq
            .iter()
            .zip(&count)
            .map(|(s, &c)| {
                let sd = (s / c as f64).sqrt();
                if sd < 1e-12 {
                    1.0
                } else {
                    sd
                }
            })
            .collect();
        Ok(Self { mean, std })
    }
}

/// A population of patient sequences sharing one feature schema.
#[derive(Clone, Debug, PartialEq)]
pub struct Cohort {
    pub patients: Vec<PatientSequence>,
    pub feature_names: Vec<String>,
    pub label_vocab: Vec<String>,
    pub norm: Option<NormStats>,
    pub normalized: bool,
}

impl Cohort {
    pub fn feature_count(&self) -> usize {
        self.feature_names.len()
    }

    pub fn len(&self) -> usize {
        self.patients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patients.is_empty()
    }

    pub fn total_visits(&self) -> usize {
        self.patients.iter().map(PatientSequence::visits).sum()
    }

    pub fn has_labels(&self) -> bool {
        !self.label_vocab.is_empty() && self.patients.iter().all(PatientSequence::has_labels)
    }

    fn with_patients(&self, patients: Vec<PatientSequence>) -> Cohort {
        Cohort {
            patients,
            feature_names: self.feature_names.clone(),
            label_vocab: self.label_vocab.clone(),
            norm: self.norm.clone(),
            normalized: self.normalized,
        }
    }

    /// Fills missing entries by last observation carried forward; entries
    /// before a feature's first observation take the fitted column mean.
    /// `observed` is left untouched.
    pub fn impute(&mut self) -> Result<()> {
        let norm = self.norm.clone().ok_or_else(|| {
            Error::State("impute requires fitted normalization statistics".into())
        })?;
        if self.normalized {
            return Err(Error::State("impute must run before normalization".into()));
        }
        for p in &mut self.patients {
            let f = p.feature_count();
            for j in 0..f {
                let mut last: Option<f64> = None;
                for t in 0..p.visits() {
                    let k = t * f + j;
                    if p.available[k] {
                        last = Some(p.features.get(t, j));
                    } else {
                        p.features.set(t, j, last.unwrap_or(norm.mean[j]));
                        p.available[k] = true;
                    }
                }
            }
        }
        Ok(())
    }

    /// z-scores every available entry with the fitted statistics.
    pub fn normalize(&mut self) -> Result<()> {
        let norm = self
            .norm
            .clone()
            .ok_or_else(|| Error::State("normalize requires fitted statistics".into()))?;
        if self.normalized {
            return Err(Error::State("cohort is already normalized".into()));
        }
        self.map_available(|j, x| (x - norm.mean[j]) / norm.std[j]);
        self.normalized = true;
        Ok(())
    }

    pub fn denormalize(&mut self) -> Result<()> {
        let norm = self
            .norm
            .clone()
            .ok_or_else(|| Error::State("denormalize requires fitted statistics".into()))?;
        if !self.normalized {
            return Err(Error::State("cohort is not normalized".into()));
        }
        self.map_available(|j, x| x * norm.std[j] + norm.mean[j]);
        self.normalized = false;
        Ok(())
    }

    fn map_available(&mut self, f: impl Fn(usize, f64) -> f64) {
        for p in &mut self.patients {
            let fc = p.feature_count();
            for t in 0..p.visits() {
                for j in 0..fc {
                    if p.available[t * fc + j] {
                        let v = f(j, p.features.get(t, j));
                        p.features.set(t, j, v);
                    }
                }
            }
        }
    }
}

/// Configuration of the synthetic left-to-right stage cohort.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub patients: usize,
    pub visits_min: usize,
    pub visits_max: usize,
    pub features: usize,
    pub stages: usize,
    /// Row-stochastic `S × S`.
    pub transition: Matrix,
    /// `S × F`.
    pub stage_means: Matrix,
    pub noise: f64,
    pub missing_rate: f64,
    pub seed: u64,
}

/// Keys accepted by [`SyntheticConfig::from_kv`].
pub const SYNTHETIC_KEYS: &[&str] = &[
    "patients",
    "visits",
    "visits_min",
    "visits_max",
    "features",
    "stages",
    "stay_prob",
    "transition",
    "stage_means",
    "separation",
    "noise",
    "missing_rate",
    "seed",
];

impl SyntheticConfig {
    /// The default benchmark: 3 stages, 10 features, 200 patients with 10
    /// visits, means at least 4 noise units apart, 10% missing.
    pub fn sep3(seed: u64) -> Self {
        Self::from_kv(&KvMap::new(), seed).expect("defaults are valid")
    }

    /// Builds a config from `key = value` pairs, defaulting to sep3.
    ///
    /// Without `transition`, stage `s` stays with `stay_prob` (default 0.8)
    /// and otherwise advances to `s + 1`; the last stage is absorbing.
    /// Without `stage_means`, means are drawn from a standard normal and
    /// rescaled so the closest pair is `separation · noise` apart.
    pub fn from_kv(kv: &KvMap, default_seed: u64) -> Result<Self> {
        let seed = kv.parse_or("seed", default_seed)?;
        let stages: usize = kv.parse_or("stages", 3)?;
        let features: usize = kv.parse_or("features", 10)?;
        let noise: f64 = kv.parse_or("noise", 1.0)?;
        let visits: usize = kv.parse_or("visits", 10)?;
        let transition = match kv.get("transition") {
            Some(text) => rows_to_matrix(&parse_rows(text)?, "transition")?,
            None => left_to_right(stages, kv.parse_or("stay_prob", 0.8)?),
        };
        let stage_means = match kv.get("stage_means") {
            Some(text) => rows_to_matrix(&parse_rows(text)?, "stage_means")?,
            None => separated_means(
                stages,
                features,
                kv.parse_or("separation", 4.0)? * noise,
                seed,
            ),
        };
        let cfg = Self {
            patients: kv.parse_or("patients", 200)?,
            visits_min: kv.parse_or("visits_min", visits)?,
            visits_max: kv.parse_or("visits_max", visits)?,
            features,
            stages,
            transition,
            stage_means,
            noise,
            missing_rate: kv.parse_or("missing_rate", 0.1)?,
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.set("patients", self.patients);
        kv.set("visits_min", self.visits_min);
        kv.set("visits_max", self.visits_max);
        kv.set("features", self.features);
        kv.set("stages", self.stages);
        kv.set(
            "transition",
            render_rows((0..self.stages).map(|s| self.transition.row(s).to_vec())),
        );
        kv.set(
            "stage_means",
            render_rows((0..self.stages).map(|s| self.stage_means.row(s).to_vec())),
        );
        kv.set("noise", self.noise);
        kv.set("missing_rate", self.missing_rate);
        kv.set("seed", self.seed);
        kv
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.stages;
        if s == 0 || self.features == 0 || self.patients == 0 {
            return Err(Error::Config(
                "stages, features and patients must be positive".into(),
            ));
        }
        if self.visits_min == 0 || self.visits_min > self.visits_max {
            return Err(Error::Config(format!(
                "need 1 <= visits_min <= visits_max, got {}..{}",
                self.visits_min, self.visits_max
            )));
        }
        if self.transition.shape() != (s, s) {
            return Err(Error::Config(format!(
                "transition must be {s}x{s}, got {:?}",
                self.transition.shape()
            )));
        }
        for r in 0..s {
            let row = self.transition.row(r);
            if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return Err(Error::Config(format!(
                    "transition row {r} has entries outside [0,1]"
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-12 {
                return Err(Error::Config(format!(
                    "transition row {r} sums to {sum}, not 1"
                )));
            }
        }
        if self.stage_means.shape() != (s, self.features) {
            return Err(Error::Config(format!(
                "stage_means must be {s}x{}, got {:?}",
                self.features,
                self.stage_means.shape()
            )));
        }
        if !(self.noise > 0.0) {
            return Err(Error::Config(format!(
                "noise must be > 0, got {}",
                self.noise
            )));
        }
        if !(0.0..1.0).contains(&self.missing_rate) {
            return Err(Error::Config(format!(
                "missing_rate must be in [0,1), got {}",
                self.missing_rate
            )));
        }
        Ok(())
    }
}

fn rows_to_matrix(rows: &[Vec<f64>], what: &str) -> Result<Matrix> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(Error::Config(format!("{what}: ragged rows")));
    }
    Matrix::from_vec(rows.len(), cols, rows.concat())
}

/// Stay with `stay`, advance one stage otherwise; last stage absorbing.
pub fn left_to_right(stages: usize, stay: f64) -> Matrix {
    let mut m = Matrix::zeros(stages, stages);
    for s in 0..stages {
        if s + 1 < stages {
            m.set(s, s, stay);
            m.set(s, s + 1, 1.0 - stay);
        } else {
            m.set(s, s, 1.0);
        }
    }
    m
}

fn separated_means(stages: usize, features: usize, min_dist: f64, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_3ea5);
    let mut m = Matrix::zeros(stages, features);
    for v in m.as_mut_slice() {
        *v = rng.sample(StandardNormal);
    }
    let mut closest = f64::INFINITY;
    for a in 0..stages {
        for b in a + 1..stages {
            let d: f64 = m
                .row(a)
                .iter()
                .zip(m.row(b))
                .map(|(x, y)| (x - y).powi(2))
                .sum::<f64>()
                .sqrt();
            closest = closest.min(d);
        }
    }
    if closest.is_finite() && closest > 0.0 {
        let k = min_dist / closest;
        m.as_mut_slice().iter_mut().for_each(|v| *v *= k);
    }
    m
}

fn sample_categorical(row: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (k, &p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    row.iter().rposition(|&p| p > 0.0).unwrap_or(row.len() - 1)
}

/// Samples a cohort from the stage chain. Every patient starts in stage 0.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Cohort> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let f = cfg.features;
    let width = (cfg.patients.max(1) - 1).to_string().len().max(4);
    let patients = (0..cfg.patients)
        .map(|i| {
            let t_len = rng.random_range(cfg.visits_min..=cfg.visits_max);
            let mut stages = Vec::with_capacity(t_len);
            let mut stage = 0usize;
            for t in 0..t_len {
                if t > 0 {
                    stage = sample_categorical(cfg.transition.row(stage), rng.random::<f64>());
                }
                stages.push(stage);
            }
            let mut features = Matrix::zeros(t_len, f);
            let mut observed = vec![true; t_len * f];
            for (t, &s) in stages.iter().enumerate() {
                for j in 0..f {
                    let eps: f64 = rng.sample(StandardNormal);
                    features.set(t, j, cfg.stage_means.get(s, j) + cfg.noise * eps);
                    if rng.random::<f64>() < cfg.missing_rate {
                        observed[t * f + j] = false;
                        features.set(t, j, 0.0);
                    }
                }
            }
            PatientSequence {
                id: format!("p{i:0width$}"),
                features,
                available: observed.clone(),
                observed,
                labels: stages.iter().map(|&s| Some(s)).collect(),
                stages: Some(stages),
            }
        })
        .collect();
    Ok(Cohort {
        patients,
        feature_names: (0..f).map(|j| format!("x{j}")).collect(),
        label_vocab: (0..cfg.stages).map(|s| s.to_string()).collect(),
        norm: None,
        normalized: false,
    })
}

/// Patient-level train / validation / test partition.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Cohort,
    pub val: Cohort,
    pub test: Cohort,
}

/// Shuffles patients with `seed` and cuts them by `ratios`. Each split
/// keeps the cohort's original patient order.
pub fn split(cohort: &Cohort, ratios: (u32, u32, u32), seed: u64) -> Result<Splits> {
    let n = cohort.len();
    if n < 5 {
        return Err(Error::Argument(format!(
            "split needs at least 5 patients, got {n}"
        )));
    }
    let total = (ratios.0 + ratios.1 + ratios.2) as f64;
    if total == 0.0 {
        return Err(Error::Argument("split ratios are all zero".into()));
    }
    let n_train = (n as f64 * ratios.0 as f64 / total).round() as usize;
    let n_val = ((n as f64 * ratios.1 as f64 / total).round() as usize).min(n - n_train);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let take = |idx: &[usize]| {
        let mut idx = idx.to_vec();
        idx.sort_unstable();
        cohort.with_patients(idx.iter().map(|&i| cohort.patients[i].clone()).collect())
    };
    Ok(Splits {
        train: take(&order[..n_train]),
        val: take(&order[n_train..n_train + n_val]),
        test: take(&order[n_train + n_val..]),
    })
}

/// Split 3/1/1, fit statistics on the training split, then impute and
/// z-score all three splits with them.
pub fn prepare(cohort: &Cohort, seed: u64) -> Result<Splits> {
    let mut s = split(cohort, (3, 1, 1), seed)?;
    let stats = NormStats::fit(&s.train)?;
    for c in [&mut s.train, &mut s.val, &mut s.test] {
        c.norm = Some(stats.clone());
        c.impute()?;
        c.normalize()?;
    }
    Ok(s)
}

/// Applies previously fitted statistics: impute then normalize.
pub fn apply_stats(cohort: &mut Cohort, stats: &NormStats) -> Result<()> {
    if stats.mean.len() != cohort.feature_count() {
        return Err(Error::Compatibility(format!(
            "statistics cover {} features, cohort has {}",
            stats.mean.len(),
            cohort.feature_count()
        )));
    }
    cohort.norm = Some(stats.clone());
    cohort.impute()?;
    cohort.normalize()
}

const LABEL_COLUMN: &str = "label";
const FEATURE_PREFIX: &str = "f_";

/// Writes the long format: `patient_id,visit_index[,label],f_<name>...`,
/// one row per visit, empty cell for a missing value.
pub fn write_long_csv(cohort: &Cohort, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    let labelled = !cohort.label_vocab.is_empty();
    let mut header = vec!["patient_id".to_string(), "visit_index".to_string()];
    if labelled {
        header.push(LABEL_COLUMN.into());
    }
    header.extend(
        cohort
            .feature_names
            .iter()
            .map(|n| format!("{FEATURE_PREFIX}{n}")),
    );
    w.write_record(&header).map_err(|e| csv_io(path, e))?;
    for p in &cohort.patients {
        for t in 0..p.visits() {
            let mut row = vec![p.id.clone(), t.to_string()];
            if labelled {
                row.push(
                    p.labels[t]
                        .map(|l| cohort.label_vocab[l].clone())
                        .unwrap_or_default(),
                );
            }
            for (j, &x) in p.visit(t).iter().enumerate() {
                row.push(if p.available[t * p.feature_count() + j] {
                    x.to_string()
                } else {
                    String::new()
                });
            }
            w.write_record(&row).map_err(|e| csv_io(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Data(format!("{}: {other:?}", path.display())),
    }
}

/// Reads the long format written by [`write_long_csv`]. Patients appear in
/// order of first occurrence; each patient's visit indices must strictly
/// increase down the file.
pub fn load_long_csv(path: &Path) -> Result<Cohort> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_io(path, e))?;
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| csv_io(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.len() < 2 || header[0] != "patient_id" || header[1] != "visit_index" {
        return Err(Error::Data(format!(
            "{}: header must start with `patient_id,visit_index`",
            path.display()
        )));
    }
    let has_label = header.get(2).is_some_and(|h| h == LABEL_COLUMN);
    let first_feature = if has_label { 3 } else { 2 };
    let mut feature_names = Vec::new();
    for h in &header[first_feature..] {
        let name = h.strip_prefix(FEATURE_PREFIX).ok_or_else(|| {
            Error::Data(format!(
                "column `{h}` is neither `label` nor an `f_` feature"
            ))
        })?;
        feature_names.push(name.to_string());
    }
    if feature_names.is_empty() {
        return Err(Error::Data("no feature columns".into()));
    }
    let f = feature_names.len();

    struct Raw {
        id: String,
        visits: Vec<u64>,
        values: Vec<f64>,
        observed: Vec<bool>,
        labels: Vec<Option<String>>,
    }
    let mut raws: Vec<Raw> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for (i, rec) in rdr.records().enumerate() {
        // Header is row 1.
        let row = i + 2;
        let rec = rec.map_err(|e| Error::Data(format!("row {row}: {e}")))?;
        if rec.len() != header.len() {
            return Err(Error::Data(format!(
                "row {row}: expected {} fields, got {}",
                header.len(),
                rec.len()
            )));
        }
        let id = rec[0].to_string();
        let visit: u64 = rec[1].trim().parse().map_err(|e| Error::Parse {
            row,
            column: "visit_index".into(),
            message: format!("`{}`: {e}", &rec[1]),
        })?;
        let slot = *index.entry(id.clone()).or_insert_with(|| {
            raws.push(Raw {
                id: id.clone(),
                visits: Vec::new(),
                values: Vec::new(),
                observed: Vec::new(),
                labels: Vec::new(),
            });
            raws.len() - 1
        });
        let raw = &mut raws[slot];
        if raw.visits.contains(&visit) {
            return Err(Error::Data(format!(
                "row {row}: duplicate visit {visit} for patient `{id}`"
            )));
        }
        if raw.visits.last().is_some_and(|&last| visit < last) {
            return Err(Error::Data(format!(
                "row {row}: visit {visit} for patient `{id}` is out of order"
            )));
        }
        raw.visits.push(visit);
        if has_label {
            let l = rec[2].trim();
            raw.labels.push((!l.is_empty()).then(|| l.to_string()));
        } else {
            raw.labels.push(None);
        }
        for (j, cell) in rec.iter().skip(first_feature).enumerate() {
            let cell = cell.trim();
            if cell.is_empty() {
                raw.values.push(0.0);
                raw.observed.push(false);
            } else {
                let v: f64 = cell.parse().map_err(|e| Error::Parse {
                    row,
                    column: header[first_feature + j].clone(),
                    message: format!("`{cell}`: {e}"),
                })?;
                if !v.is_finite() {
                    return Err(Error::Parse {
                        row,
                        column: header[first_feature + j].clone(),
                        message: format!("non-finite value `{cell}`"),
                    });
                }
                raw.values.push(v);
                raw.observed.push(true);
            }
        }
    }

    let mut vocab: Vec<String> = raws
        .iter()
        .flat_map(|r| r.labels.iter().flatten().cloned())
        .collect();
    vocab.sort_by(|a, b| match (a.parse::<i64>(), b.parse::<i64>()) {
        (Ok(x), Ok(y)) => x.cmp(&y),
        _ => a.cmp(b),
    });
    vocab.dedup();
    let lookup: HashMap<&str, usize> = vocab
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();

    let patients = raws
        .iter()
        .map(|r| {
            let t = r.visits.len();
            Ok(PatientSequence {
                id: r.id.clone(),
                features: Matrix::from_vec(t, f, r.values.clone())?,
                observed: r.observed.clone(),
                available: r.observed.clone(),
                labels: r
                    .labels
                    .iter()
                    .map(|l| l.as_deref().map(|s| lookup[s]))
                    .collect(),
                stages: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Cohort {
        patients,
        feature_names,
        label_vocab: vocab,
        norm: None,
        normalized: false,
    })
}
