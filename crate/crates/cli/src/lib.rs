//! Batch commands: `generate`, `train`, `eval`, `gradcheck`.
//!
//! Every command reads an optional `key = value` config file, applies flag
//! overrides on top (flags win), and writes a manifest that can be fed back
//! through `--config` to repeat the run. Manifest keys under `run.` are
//! informational and ignored when read back.

mod svg;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use tcemnet::checkpoint::{write_atomic, Checkpoint};
use tcemnet::cluster::MetricsReport;
use tcemnet::data::{
    apply_stats, generate_synthetic, load_long_csv, prepare, split, write_long_csv, Cohort,
    NormStats, SyntheticConfig, SYNTHETIC_KEYS,
};
use tcemnet::kv::{record, KvMap};
use tcemnet::model::{Mode, TcemParams};
use tcemnet::nn::{GradReport, ParamSet};
use tcemnet::pipeline::{
    evaluate_model, model_gradcheck, raw_feature_baseline, truth_labels, visit_keys,
};
use tcemnet::training::{train, TrainConfig};

pub use svg::scatter_svg;

/// Parameter budget for `gradcheck`.
pub const GRADCHECK_MAX_PARAMS: usize = 50_000;
pub const GRADCHECK_KEYS: &[&str] = &["gradcheck_step", "gradcheck_tol", "gradcheck_kl_weight"];

#[derive(Debug, Parser)]
#[command(
    name = "tcemnet",
    version,
    about = "Memory-augmented variational temporal clustering"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// `key = value` config file; a previous run's manifest also works.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_parser = ["supervised", "unsupervised"])]
    pub mode: Option<String>,
    /// Number of clusters.
    #[arg(long)]
    pub k: Option<usize>,
    /// Patients processed in parallel within a batch.
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic cohort as long-format CSV.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Split, impute, normalize and train; writes a checkpoint and log.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Cluster the test split and write metrics, tables and a scatter plot.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every parameter tensor on a toy model.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Optional report file.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] tcemnet::Error),
    #[error("{0}")]
    Usage(String),
    #[error("gradient check failed for: {0}")]
    GradcheckFailed(String),
}

impl CliError {
    pub fn code(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.code(),
            CliError::Usage(_) => "usage",
            CliError::GradcheckFailed(_) => "gradcheck_failed",
        }
    }

    pub fn exit_status(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::GradcheckFailed(_) => 3,
            CliError::Core(_) => 1,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Parses arguments and runs one command; returns text for standard output.
pub fn run<I, T>(args: I) -> CliResult<String>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => Ok(e.to_string()),
                _ => Err(CliError::Usage(e.to_string().trim_end().replace('\n', " "))),
            };
        }
    };
    match cli.command {
        Command::Generate { common, out } => cmd_generate(&common, &out),
        Command::Train { common, data, out } => cmd_train(&common, &data, &out),
        Command::Eval {
            common,
            checkpoint,
            data,
            out,
        } => cmd_eval(&common, &checkpoint, &data, &out),
        Command::Gradcheck {
            common,
            out,
            corrupt,
        } => cmd_gradcheck(&common, out.as_deref(), corrupt.as_deref()),
    }
}

/// Config file (without `run.` keys) overlaid with flags.
pub fn load_config(common: &Common) -> CliResult<KvMap> {
    let mut kv = match &common.config {
        Some(path) => KvMap::load(path)?.filtered(|k| !k.starts_with("run.")),
        None => KvMap::new(),
    };
    let known = |k: &str| {
        TrainConfig::KEYS.contains(&k) || SYNTHETIC_KEYS.contains(&k) || GRADCHECK_KEYS.contains(&k)
    };
    if let Some(k) = kv.keys().find(|k| !known(k)) {
        return Err(tcemnet::Error::Config(format!("unknown config key `{k}`")).into());
    }
    if let Some(s) = common.seed {
        kv.set("seed", s);
    }
    if let Some(m) = &common.mode {
        kv.set("mode", m);
    }
    if let Some(k) = common.k {
        kv.set("k", k);
    }
    if let Some(w) = common.workers {
        kv.set("workers", w);
    }
    Ok(kv)
}

fn version() -> String {
    format!("v{}", env!("CARGO_PKG_VERSION"))
}

struct Manifest {
    kv: KvMap,
    started: Instant,
}

impl Manifest {
    fn new(command: &str, config: &KvMap) -> Self {
        let mut kv = config.clone();
        kv.set("run.command", command);
        kv.set("run.version", version());
        Self {
            kv,
            started: Instant::now(),
        }
    }

    fn path(&mut self, key: &str, p: &Path) {
        self.kv.set(format!("run.{key}"), p.display());
    }

    fn phase(&mut self, name: &str, since: Instant) {
        self.kv.set(
            format!("run.time.{name}_secs"),
            format!("{:.3}", since.elapsed().as_secs_f64()),
        );
    }

    fn finish(mut self, path: &Path) -> CliResult<()> {
        let started = self.started;
        self.phase("total", started);
        write_atomic(path, self.kv.render().as_bytes())?;
        Ok(())
    }
}

fn ensure_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| tcemnet::Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn sibling_manifest(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(OsString::from).unwrap_or_default();
    name.push(".manifest.txt");
    out.with_file_name(name)
}

pub fn cmd_generate(common: &Common, out: &Path) -> CliResult<String> {
    let kv = load_config(common)?;
    let cfg = SyntheticConfig::from_kv(&kv, 0)?;
    let mut manifest = Manifest::new("generate", &cfg.to_kv());
    let t = Instant::now();
    let cohort = generate_synthetic(&cfg)?;
    write_long_csv(&cohort, out)?;
    manifest.phase("generate", t);
    manifest.path("out", out);
    manifest.finish(&sibling_manifest(out))?;
    Ok(format!(
        "wrote {} patients, {} visits to {}\n",
        cohort.len(),
        cohort.total_visits(),
        out.display()
    ))
}

pub fn cmd_train(common: &Common, data: &Path, out: &Path) -> CliResult<String> {
    let kv = load_config(common)?;
    let cfg = TrainConfig::from_kv(&kv)?;
    let cohort = load_long_csv(data)?;
    if cfg.mode == Mode::Supervised && !cohort.has_labels() {
        return Err(tcemnet::Error::Config(format!(
            "supervised mode needs a label column with a label at every visit; `{}` has none",
            data.display()
        ))
        .into());
    }
    ensure_dir(out)?;
    let mut manifest = Manifest::new("train", &cfg.to_kv());
    manifest.path("data", data);
    manifest.path("out", out);

    let t = Instant::now();
    let splits = prepare(&cohort, cfg.seed)?;
    manifest.phase("prepare", t);
    let t = Instant::now();
    let outcome = train(&cfg, &splits)?;
    manifest.phase("train", t);

    let mut meta = KvMap::new();
    for (k, v) in cfg.to_kv().iter() {
        meta.set(format!("train.{k}"), v);
    }
    meta.set("train.best_epoch", outcome.best_epoch);
    let ckpt = Checkpoint {
        params: outcome.params,
        meta,
        feature_names: splits.train.feature_names.clone(),
        label_vocab: splits.train.label_vocab.clone(),
        norm: splits.train.norm.clone(),
    };
    ckpt.save(&out.join("model.ckpt"))?;
    let mut log = String::new();
    for r in &outcome.epochs {
        log.push_str(&r.render());
        log.push('\n');
    }
    write_atomic(&out.join("train_log.txt"), log.as_bytes())?;
    manifest.finish(&out.join("manifest.txt"))?;
    let last = outcome.epochs.last();
    Ok(format!(
        "trained {} epochs; best epoch {}; final {}\n",
        outcome.epochs.len(),
        outcome.best_epoch,
        last.map(|r| r.render()).unwrap_or_default()
    ))
}

fn check_compatible(ckpt: &Checkpoint, cohort: &Cohort) -> CliResult<()> {
    let bad = |m: String| CliError::Core(tcemnet::Error::Compatibility(m));
    if ckpt.params.config.features != cohort.feature_count() {
        return Err(bad(format!(
            "checkpoint expects {} features, data has {}",
            ckpt.params.config.features,
            cohort.feature_count()
        )));
    }
    if !ckpt.feature_names.is_empty() && ckpt.feature_names != cohort.feature_names {
        return Err(bad(
            "feature names differ between checkpoint and data".into()
        ));
    }
    if ckpt.params.config.mode == Mode::Supervised && ckpt.label_vocab != cohort.label_vocab {
        return Err(bad(
            "label vocabulary differs between checkpoint and data".into()
        ));
    }
    Ok(())
}

fn metrics_lines(prefix: &str, m: &MetricsReport, k: usize, n: usize) -> String {
    let mut s = String::new();
    for (name, v) in [("purity", m.purity), ("nmi", m.nmi), ("ari", m.ari)] {
        s.push_str(&record(&[
            ("metric", format!("{prefix}{name}")),
            ("value", v.to_string()),
            ("k", k.to_string()),
            ("n", n.to_string()),
        ]));
        s.push('\n');
    }
    s
}

pub fn cmd_eval(common: &Common, checkpoint: &Path, data: &Path, out: &Path) -> CliResult<String> {
    let overrides = load_config(common)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let trained = KvMap::parse(
        &ckpt
            .meta
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("train.").map(|k| format!("{k} = {v}\n")))
            .collect::<String>(),
    )?
    .filtered(|k| k != "best_epoch");
    let split_seed: u64 = trained.parse_or("seed", 0)?;
    let mut settings = trained;
    settings.merge(&overrides);
    let cfg = TrainConfig::from_kv(&settings)?;
    if cfg.mode != ckpt.params.config.mode {
        return Err(tcemnet::Error::Config(format!(
            "checkpoint was trained in {} mode; --mode cannot change it",
            ckpt.params.config.mode.as_str()
        ))
        .into());
    }
    let norm: NormStats = ckpt.norm.clone().ok_or_else(|| {
        tcemnet::Error::Compatibility("checkpoint carries no normalization statistics".into())
    })?;

    let cohort = load_long_csv(data)?;
    check_compatible(&ckpt, &cohort)?;
    ensure_dir(out)?;
    let mut kv = KvMap::new();
    for key in ["k", "restarts", "repr", "seed"] {
        kv.set(key, cfg.to_kv().get(key).unwrap_or_default());
    }
    let mut manifest = Manifest::new("eval", &kv);
    manifest.path("checkpoint", checkpoint);
    manifest.path("data", data);
    manifest.path("out", out);
    manifest.kv.set("run.split_seed", split_seed);

    let t = Instant::now();
    let mut test = split(&cohort, (3, 1, 1), split_seed)?.test;
    apply_stats(&mut test, &norm)?;
    let ev = evaluate_model(
        &ckpt.params,
        &test,
        cfg.repr,
        cfg.clusters,
        cfg.restarts,
        cfg.seed,
    )?;
    let baseline = raw_feature_baseline(&test, cfg.clusters, cfg.restarts, cfg.seed)?;
    manifest.phase("evaluate", t);

    let n = ev.clusters.assignments.len();
    let mut metrics = metrics_lines("", &ev.metrics, cfg.clusters, n);
    metrics.push_str(&metrics_lines("baseline_", &baseline, cfg.clusters, n));
    for (i, r) in ev.projection.explained.iter().enumerate() {
        metrics.push_str(&record(&[
            ("metric", format!("pca_explained_{}", i + 1)),
            ("value", r.to_string()),
        ]));
        metrics.push('\n');
    }
    write_atomic(&out.join("metrics.txt"), metrics.as_bytes())?;

    let keys = visit_keys(&test);
    let truth = truth_labels(&test)?;
    let mut assignments = String::from("patient_id,visit_index,cluster,truth\n");
    let mut projection = String::from("patient_id,visit_index,cluster,pc1,pc2\n");
    for (i, (id, t)) in keys.iter().enumerate() {
        let c = ev.clusters.assignments[i];
        let _ = writeln!(assignments, "{id},{t},{c},{}", truth[i]);
        let xy = &ev.projection.coords[i];
        let _ = writeln!(
            projection,
            "{id},{t},{c},{},{}",
            xy[0],
            xy.get(1).copied().unwrap_or(0.0)
        );
    }
    write_atomic(&out.join("assignments.csv"), assignments.as_bytes())?;
    write_atomic(&out.join("projection.csv"), projection.as_bytes())?;
    let svg = scatter_svg(
        &ev.projection.coords,
        &ev.clusters.assignments,
        cfg.clusters,
    );
    write_atomic(&out.join("scatter.svg"), svg.as_bytes())?;
    manifest.finish(&out.join("manifest.txt"))?;
    Ok(metrics)
}

fn gradcheck_lines(mode: Mode, report: &GradReport) -> String {
    let mut s = String::new();
    for t in &report.tensors {
        s.push_str(&record(&[
            ("mode", mode.as_str().to_string()),
            ("tensor", t.name.clone()),
            ("coords", t.coordinates.to_string()),
            ("max_rel_error", format!("{:.3e}", t.max_rel_error)),
            ("max_abs_error", format!("{:.3e}", t.max_abs_error)),
            (
                "status",
                if t.passed() { "pass" } else { "FAIL" }.to_string(),
            ),
        ]));
        s.push('\n');
    }
    s
}

pub fn cmd_gradcheck(
    common: &Common,
    out: Option<&Path>,
    corrupt: Option<&str>,
) -> CliResult<String> {
    let user = load_config(common)?;
    let mut kv = KvMap::parse(
        "hidden = 6\nlatent = 4\nmem_slots = 3\nmem_width = 6\nlabel_dim = 3\npatient_slots = 3\n\
         patient_width = 4\npatients = 2\nvisits = 4\nfeatures = 5\nmissing_rate = 0.25\n",
    )?;
    kv.merge(&user);
    let step: f64 = kv.parse_or("gradcheck_step", 1e-5)?;
    let tol: f64 = kv.parse_or("gradcheck_tol", 1e-4)?;
    let kl_weight: f64 = kv.parse_or("gradcheck_kl_weight", 1.0)?;
    let modes = match user.get("mode") {
        Some(m) => vec![m.parse::<Mode>()?],
        None => vec![Mode::Supervised, Mode::Unsupervised],
    };
    let mut data_kv = kv.clone();
    data_kv.remove("mode");
    let synth = SyntheticConfig::from_kv(&data_kv, 0)?;
    let mut cohort = generate_synthetic(&synth)?;
    let stats = NormStats::fit(&cohort)?;
    apply_stats(&mut cohort, &stats)?;

    let mut report = String::new();
    let mut failing = Vec::new();
    for mode in modes {
        kv.set("mode", mode.as_str());
        let cfg = TrainConfig::from_kv(&kv)?;
        let model_cfg = cfg.model_config(cohort.feature_count(), cohort.label_vocab.len());
        let params = TcemParams::init(&model_cfg, cfg.seed)?;
        let count = params.scalar_count();
        if count >= GRADCHECK_MAX_PARAMS {
            return Err(tcemnet::Error::Config(format!(
                "gradcheck is limited to toy models (< {GRADCHECK_MAX_PARAMS} parameters); this config has {count}. \
                 Lower hidden, latent or mem_width"
            ))
            .into());
        }
        let r = model_gradcheck(&params, &cohort.patients, kl_weight, step, tol, corrupt)?;
        report.push_str(&gradcheck_lines(mode, &r));
        failing.extend(r.failing().map(|t| format!("{}:{}", mode.as_str(), t.name)));
    }
    let verdict = if failing.is_empty() { "pass" } else { "FAIL" };
    report.push_str(&format!(
        "result={verdict} tolerance={tol:e} step={step:e}\n"
    ));
    if let Some(path) = out {
        write_atomic(path, report.as_bytes())?;
    }
    if failing.is_empty() {
        Ok(report)
    } else {
        eprint!("{report}");
        Err(CliError::GradcheckFailed(failing.join(",")))
    }
}
