//! Representation extraction and clustering evaluation over a cohort.

use crate::cluster::{
    evaluate, kmeans, pca_project, ClusterResult, MetricsReport, Projection, DEFAULT_MAX_ITERS,
};
use crate::data::{Cohort, PatientSequence};
use crate::model::{
    backward, forward_sequence, represent, sequence_loss, LossWeights, Noise, Representation,
    TcemParams,
};
use crate::nn::{gradcheck, GradReport, ParamSet};
use crate::{Error, Result};

/// `(patient_id, visit_index)` of each row in a flattened per-visit table.
pub type VisitKey = (String, usize);

/// Ground truth for scoring: synthetic stages when every patient has them,
/// otherwise labels.
pub fn truth_labels(cohort: &Cohort) -> Result<Vec<usize>> {
    if cohort.patients.iter().all(|p| p.stages.is_some()) {
        return Ok(cohort
            .patients
            .iter()
            .flat_map(|p| p.stages.clone().unwrap_or_default())
            .collect());
    }
    let mut out = Vec::with_capacity(cohort.total_visits());
    for p in &cohort.patients {
        for (t, l) in p.labels.iter().enumerate() {
            out.push(l.ok_or_else(|| {
                Error::Data(format!(
                    "patient `{}` has no label at visit {t}; cannot score clusters",
                    p.id
                ))
            })?);
        }
    }
    Ok(out)
}

pub fn visit_keys(cohort: &Cohort) -> Vec<VisitKey> {
    cohort
        .patients
        .iter()
        .flat_map(|p| (0..p.visits()).map(move |t| (p.id.clone(), t)))
        .collect()
}

/// Per-visit model representations, patients in cohort order.
pub fn cohort_representations(
    params: &TcemParams,
    cohort: &Cohort,
    repr: Representation,
) -> Result<Vec<Vec<f64>>> {
    if cohort.feature_count() != params.config.features {
        return Err(Error::Compatibility(format!(
            "model expects {} features, data has {}",
            params.config.features,
            cohort.feature_count()
        )));
    }
    let mut out = Vec::with_capacity(cohort.total_visits());
    for p in &cohort.patients {
        out.extend(represent(params, p, repr)?);
    }
    Ok(out)
}

/// Raw (imputed, normalized) visit features.
pub fn cohort_features(cohort: &Cohort) -> Vec<Vec<f64>> {
    cohort
        .patients
        .iter()
        .flat_map(|p| (0..p.visits()).map(move |t| p.visit(t).to_vec()))
        .collect()
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub metrics: MetricsReport,
    pub clusters: ClusterResult,
    pub projection: Projection,
}

/// k-means on `points`, scored against `labels`, plus a 2-D PCA of the points.
pub fn evaluate_points(
    points: &[Vec<f64>],
    labels: &[usize],
    k: usize,
    restarts: usize,
    seed: u64,
) -> Result<Evaluation> {
    let clusters = kmeans(points, k, DEFAULT_MAX_ITERS, seed, restarts)?;
    let metrics = evaluate(&clusters.assignments, labels)?;
    let dims = points.first().map_or(1, |p| p.len().min(2));
    let projection = pca_project(points, dims)?;
    Ok(Evaluation {
        metrics,
        clusters,
        projection,
    })
}

/// Clusters a cohort's model representations and scores them.
pub fn evaluate_model(
    params: &TcemParams,
    cohort: &Cohort,
    repr: Representation,
    k: usize,
    restarts: usize,
    seed: u64,
) -> Result<Evaluation> {
    let labels = truth_labels(cohort)?;
    let points = cohort_representations(params, cohort, repr)?;
    evaluate_points(&points, &labels, k, restarts, seed)
}

/// The same clustering on raw visit features, for context.
pub fn raw_feature_baseline(
    cohort: &Cohort,
    k: usize,
    restarts: usize,
    seed: u64,
) -> Result<MetricsReport> {
    let labels = truth_labels(cohort)?;
    let clusters = kmeans(
        &cohort_features(cohort),
        k,
        DEFAULT_MAX_ITERS,
        seed,
        restarts,
    )?;
    evaluate(&clusters.assignments, &labels)
}

/// Finite-difference check of the full model on the batch loss
/// `mean_n(kl_weight · KL_n + task_n)` with fixed noise per sequence.
///
/// `corrupt` perturbs the analytic gradient of one tensor before the
/// comparison, to exercise the failure path.
pub fn model_gradcheck(
    params: &TcemParams,
    seqs: &[PatientSequence],
    kl_weight: f64,
    step: f64,
    tol: f64,
    corrupt: Option<&str>,
) -> Result<GradReport> {
    if seqs.is_empty() {
        return Err(Error::Argument(
            "gradcheck needs at least one sequence".into(),
        ));
    }
    let b = seqs.len() as f64;
    let mut p = params.clone();
    p.zero_grad();
    let weights = LossWeights {
        kl: kl_weight / b,
        task: 1.0 / b,
    };
    for (i, s) in seqs.iter().enumerate() {
        let mut trace = forward_sequence(&p, s, &Noise::Seeded(i as u64))?;
        backward(&mut trace, &mut p, weights)?;
    }
    if let Some(name) = corrupt {
        let idx = (0..p.param_count())
            .find(|&i| p.param_name(i) == name)
            .ok_or_else(|| Error::Argument(format!("no tensor named `{name}`")))?;
        for g in p.param_mut(idx).grad.as_mut_slice() {
            *g = *g * 1.5 + 1e-2;
        }
    }
    let loss = |q: &TcemParams| -> f64 {
        seqs.iter()
            .enumerate()
            .map(|(i, s)| {
                forward_sequence(q, s, &Noise::Seeded(i as u64))
                    .and_then(|t| sequence_loss(&t))
                    .map_or(f64::NAN, |l| kl_weight * l.kl + l.task)
            })
            .sum::<f64>()
            / b
    };
    gradcheck(&mut p, loss, step, tol)
}
