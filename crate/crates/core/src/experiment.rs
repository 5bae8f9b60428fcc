//! Experiment recipes (TOML) and the protocols built on them: multi-seed
//! training, bias sweeps, epoch-budget curves, population farming and
//! population analysis.
//!
//! CSV outputs never contain timings, so repeated runs produce identical
//! files. Schemas:
//!
//! * `train.csv`: `mode,seed,final_acc`; `train_summary.csv`: `mode,mean,std,n`
//! * `sweep.csv`: `arm,b,seed,final_acc`; `sweep_summary.csv`: `arm,b,mean,std,n`
//! * `epoch_curve.csv`: `epochs,mode,seed,final_acc`;
//!   `epoch_curve_summary.csv`: `epochs,mode,mean,std,n`
//!
//! `std` is the sample standard deviation (0 for a single seed). Failed runs
//! appear with an empty `final_acc` and are left out of the summaries.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{load_cifar10, make_synthetic, Dataset, Normalization, SyntheticTaskSpec};
use crate::error::{Error, Result};
use crate::init::{LinearBiasInit, MlpMeanMode};
use crate::model::ModelConfig;
use crate::population::{self, PopulationStats, FAILED_SUFFIX, SNAPSHOT_EXT};
use crate::train::{self, config_hash, OptimSpec, RunStatus, TrainOptions, TrainOutcome, TrainResult, WeightSnapshot};

pub const DATA_DIR_ENV: &str = "MIMETIC_DATA_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// CIFAR-10 binaries in `dir`, falling back to `$MIMETIC_DATA_DIR`
    /// (or its `cifar-10-batches-bin` subdirectory).
    Cifar10 {
        #[serde(default)]
        dir: Option<PathBuf>,
        /// Keep only the first `train_subset` training images.
        #[serde(default)]
        train_subset: Option<usize>,
        #[serde(default)]
        normalization: Normalization,
    },
    Synthetic {
        #[serde(default)]
        spec: SyntheticTaskSpec,
        /// Fixed across runs so every run sees the same dataset.
        #[serde(default)]
        data_seed: u64,
    },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic { spec: SyntheticTaskSpec::default(), data_seed: 0 }
    }
}

pub fn cifar_dir(configured: Option<&Path>) -> Result<PathBuf> {
    let root = match configured {
        Some(d) => d.to_path_buf(),
        None => std::env::var_os(DATA_DIR_ENV)
            .map(PathBuf::from)
            .ok_or_else(|| Error::Config(format!("no CIFAR-10 directory configured and {DATA_DIR_ENV} is unset")))?,
    };
    let nested = root.join("cifar-10-batches-bin");
    Ok(if nested.is_dir() { nested } else { root })
}

impl DataSource {
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        match self {
            DataSource::Cifar10 { dir, train_subset, normalization } => {
                let (train, test) = load_cifar10(&cifar_dir(dir.as_deref())?, normalization)?;
                Ok((train_subset.map_or(train.clone(), |n| train.subset(n)), test))
            }
            DataSource::Synthetic { spec, data_seed } => make_synthetic(spec, *data_seed),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub data: DataSource,
    #[serde(default)]
    pub optim: OptimSpec,
    #[serde(default)]
    pub train: TrainOptions,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_epochs_grid")]
    pub epochs_grid: Vec<usize>,
    #[serde(default = "default_b_grid")]
    pub b_grid: Vec<f64>,
    /// Offset std used by a bare `rowvec` mode.
    #[serde(default = "default_sigma_b")]
    pub sigma_b: f64,
    /// Init modes compared by `train` and `epoch-curve`.
    #[serde(default = "default_modes")]
    pub modes: Vec<String>,
    #[serde(default = "default_arms")]
    pub arms: Vec<SweepArm>,
    /// Population size for `farm`.
    #[serde(default = "default_farm_size")]
    pub farm_size: usize,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    /// Worker threads; 0 uses every available core.
    #[serde(default)]
    pub parallel: usize,
}

fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}
fn default_epochs_grid() -> Vec<usize> {
    vec![2, 5, 10]
}
fn default_b_grid() -> Vec<f64> {
    vec![0.0, 0.01, 0.02, 0.05]
}
fn default_sigma_b() -> f64 {
    0.02
}
fn default_modes() -> Vec<String> {
    vec!["none".into(), "constant:0.02".into()]
}
fn default_arms() -> Vec<SweepArm> {
    vec![SweepArm::MlpMean, SweepArm::ScalarBias, SweepArm::LinearBias]
}
fn default_farm_size() -> usize {
    128
}
fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: ModelConfig::convnext(16),
            data: DataSource::default(),
            optim: OptimSpec::default(),
            train: TrainOptions::default(),
            seeds: default_seeds(),
            epochs_grid: default_epochs_grid(),
            b_grid: default_b_grid(),
            sigma_b: default_sigma_b(),
            modes: default_modes(),
            arms: default_arms(),
            farm_size: default_farm_size(),
            out_dir: default_out_dir(),
            parallel: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optim.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("seed list must not be empty".into()));
        }
        if self.train.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if let DataSource::Synthetic { spec, .. } = &self.data {
            spec.validate()?;
            if spec.image_size != self.model.image_size || spec.channels != self.model.in_channels {
                return Err(Error::Config(format!(
                    "synthetic images are {}x{}x{} but the model expects {}x{}x{}",
                    spec.channels,
                    spec.image_size,
                    spec.image_size,
                    self.model.in_channels,
                    self.model.image_size,
                    self.model.image_size
                )));
            }
        }
        for m in &self.modes {
            self.model_for_mode(m)?;
        }
        Ok(())
    }

    /// The model config with init `mode` applied; bare `rowvec` uses `sigma_b`.
    pub fn model_for_mode(&self, mode: &str) -> Result<ModelConfig> {
        let mode = if mode == "rowvec" { format!("rowvec:{}", self.sigma_b) } else { mode.to_string() };
        Ok(ModelConfig { init: self.model.init.with_mode(&mode)?, ..self.model.clone() })
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.parallel)
            .build()
            .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))
    }
}

/// Baseline arms of the bias sweep; each sets one knob to `b`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepArm {
    /// `W1 ← W1 + b·1·1ᵀ`.
    MlpMean,
    /// Trainable scalar added to every `W1` entry, initialized to `b`.
    ScalarBias,
    /// First-layer bias `b1` initialized to the constant `b`.
    LinearBias,
}

impl SweepArm {
    pub fn name(self) -> &'static str {
        match self {
            SweepArm::MlpMean => "mlp_mean",
            SweepArm::ScalarBias => "scalar_bias",
            SweepArm::LinearBias => "linear_bias",
        }
    }

    pub fn apply(self, base: &ModelConfig, b: f64) -> ModelConfig {
        let mut cfg = base.clone();
        cfg.init.mlp_mean = MlpMeanMode::None;
        match self {
            SweepArm::MlpMean => cfg.init.mlp_mean = MlpMeanMode::Constant { b },
            SweepArm::ScalarBias => {
                cfg.init.learnable_scalar_bias = true;
                cfg.init.scalar_bias_init = b;
            }
            SweepArm::LinearBias => cfg.init.linear_bias_init = LinearBiasInit::Constant { c: b },
        }
        cfg
    }
}

/// Sample mean and standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    (mean, (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
}

/// Creates `dir`, refusing to reuse a non-empty one unless `force`.
pub fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.is_dir() {
        let occupied = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.next().is_some();
        if occupied && !force {
            return Err(Error::OutputExists(dir.to_path_buf()));
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes to a temporary sibling and renames, so readers never observe a
/// partial file.
fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    write_file(&tmp, contents)?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn seed_stem(seed: u64) -> String {
    format!("seed-{seed:06}")
}

fn acc_cell(acc: Option<f64>) -> String {
    acc.map(|a| a.to_string()).unwrap_or_default()
}

/// Trains one `(model, seed)` and records its result and snapshot under `dir`.
fn run_and_record(
    cfg: &ExperimentConfig,
    model: &ModelConfig,
    opts: &TrainOptions,
    data: &(Dataset, Dataset),
    seed: u64,
    dir: &Path,
) -> Result<TrainResult> {
    let out = train::train(model, &data.0, &data.1, &cfg.optim, opts, seed)?;
    let stem = seed_stem(seed);
    if let Some(snap) = &out.snapshot {
        write_atomic(&dir.join(format!("{stem}.{SNAPSHOT_EXT}")), &snap.to_bytes()?)?;
        out.result.save(&dir.join(format!("{stem}.json")))?;
    } else {
        out.result.save(&dir.join(format!("{stem}{FAILED_SUFFIX}")))?;
    }
    Ok(out.result)
}

/// One row of a summary table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub key: Vec<String>,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

fn summarize(groups: &[(Vec<String>, Vec<Option<f64>>)]) -> Vec<SummaryRow> {
    groups
        .iter()
        .map(|(key, accs)| {
            let ok: Vec<f64> = accs.iter().flatten().copied().collect();
            let (mean, std) = if ok.is_empty() { (f64::NAN, f64::NAN) } else { mean_std(&ok) };
            SummaryRow { key: key.clone(), mean, std, n: ok.len() }
        })
        .collect()
}

fn summary_csv(header: &str, rows: &[SummaryRow]) -> String {
    let mut s = format!("{header},mean,std,n\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.key.join(","), r.mean, r.std, r.n);
    }
    s
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub results: Vec<(String, TrainResult)>,
    pub summary: Vec<SummaryRow>,
}

/// One run per seed and mode. Each mode's results and snapshots go to
/// `out_dir/<mode>/`.
pub fn cmd_train(cfg: &ExperimentConfig, modes: &[String], force: bool) -> Result<TrainReport> {
    cfg.validate()?;
    let models = modes.iter().map(|m| cfg.model_for_mode(m)).collect::<Result<Vec<_>>>()?;
    prepare_out_dir(&cfg.out_dir, force)?;
    let data = cfg.data.load()?;
    let tasks: Vec<(usize, u64)> = (0..modes.len()).flat_map(|m| cfg.seeds.iter().map(move |&s| (m, s))).collect();
    for m in modes {
        fs::create_dir_all(cfg.out_dir.join(m.replace(':', "_"))).map_err(|e| Error::io(&cfg.out_dir, e))?;
    }
    let results = cfg.pool()?.install(|| {
        tasks
            .par_iter()
            .map(|&(m, seed)| {
                let dir = cfg.out_dir.join(modes[m].replace(':', "_"));
                run_and_record(cfg, &models[m], &cfg.train, &data, seed, &dir).map(|r| (modes[m].clone(), r))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let mut csv = String::from("mode,seed,final_acc\n");
    for (mode, r) in &results {
        let _ = writeln!(csv, "{mode},{},{}", r.seed, acc_cell(r.final_test_acc));
    }
    write_file(&cfg.out_dir.join("train.csv"), csv.as_bytes())?;
    let groups: Vec<_> = modes
        .iter()
        .map(|m| (vec![m.clone()], results.iter().filter(|(k, _)| k == m).map(|(_, r)| r.final_test_acc).collect()))
        .collect();
    let summary = summarize(&groups);
    write_file(&cfg.out_dir.join("train_summary.csv"), summary_csv("mode", &summary).as_bytes())?;
    Ok(TrainReport { results, summary })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub arm: SweepArm,
    pub b: f64,
    pub seed: u64,
    pub final_acc: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub summary: Vec<SummaryRow>,
}

/// Short-budget runs for every arm × b × seed; `b = 0` must be on the grid.
pub fn cmd_sweep_bias(cfg: &ExperimentConfig, force: bool) -> Result<SweepReport> {
    cfg.validate()?;
    if cfg.b_grid.is_empty() || !cfg.b_grid.contains(&0.0) {
        return Err(Error::Config(format!("b grid must contain the b = 0 control, got {:?}", cfg.b_grid)));
    }
    if cfg.arms.is_empty() {
        return Err(Error::Config("at least one sweep arm is required".into()));
    }
    prepare_out_dir(&cfg.out_dir, force)?;
    let data = cfg.data.load()?;
    let base = cfg.model_for_mode("none")?;
    let mut tasks = Vec::new();
    for &arm in &cfg.arms {
        for &b in &cfg.b_grid {
            for &seed in &cfg.seeds {
                tasks.push((arm, b, seed));
            }
        }
    }
    let rows = cfg.pool()?.install(|| {
        tasks
            .par_iter()
            .map(|&(arm, b, seed)| {
                let out = train::train(&arm.apply(&base, b), &data.0, &data.1, &cfg.optim, &cfg.train, seed)?;
                Ok(SweepRow { arm, b, seed, final_acc: out.result.final_test_acc })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let mut csv = String::from("arm,b,seed,final_acc\n");
    for r in &rows {
        let _ = writeln!(csv, "{},{},{},{}", r.arm.name(), r.b, r.seed, acc_cell(r.final_acc));
    }
    write_file(&cfg.out_dir.join("sweep.csv"), csv.as_bytes())?;
    let mut groups = Vec::new();
    for &arm in &cfg.arms {
        for &b in &cfg.b_grid {
            let accs =
                rows.iter().filter(|r| r.arm == arm && r.b.to_bits() == b.to_bits()).map(|r| r.final_acc).collect();
            groups.push((vec![arm.name().to_string(), b.to_string()], accs));
        }
    }
    let summary = summarize(&groups);
    write_file(&cfg.out_dir.join("sweep_summary.csv"), summary_csv("arm,b", &summary).as_bytes())?;
    Ok(SweepReport { rows, summary })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CurveRow {
    pub epochs: usize,
    pub mode: String,
    pub seed: u64,
    pub final_acc: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct CurveReport {
    pub rows: Vec<CurveRow>,
    pub summary: Vec<SummaryRow>,
}

/// An independent run from scratch for every epoch budget × mode × seed;
/// the cosine horizon follows each budget.
pub fn cmd_epoch_curve(cfg: &ExperimentConfig, force: bool) -> Result<CurveReport> {
    cfg.validate()?;
    if cfg.epochs_grid.is_empty() || cfg.modes.is_empty() {
        return Err(Error::Config("epoch curve needs a non-empty epochs grid and mode list".into()));
    }
    prepare_out_dir(&cfg.out_dir, force)?;
    let data = cfg.data.load()?;
    let models = cfg.modes.iter().map(|m| cfg.model_for_mode(m)).collect::<Result<Vec<_>>>()?;
    let mut tasks = Vec::new();
    for &e in &cfg.epochs_grid {
        for m in 0..cfg.modes.len() {
            for &seed in &cfg.seeds {
                tasks.push((e, m, seed));
            }
        }
    }
    let rows = cfg.pool()?.install(|| {
        tasks
            .par_iter()
            .map(|&(epochs, m, seed)| {
                let opts = TrainOptions { epochs, ..cfg.train.clone() };
                let out = train::train(&models[m], &data.0, &data.1, &cfg.optim, &opts, seed)?;
                Ok(CurveRow { epochs, mode: cfg.modes[m].clone(), seed, final_acc: out.result.final_test_acc })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let mut csv = String::from("epochs,mode,seed,final_acc\n");
    for r in &rows {
        let _ = writeln!(csv, "{},{},{},{}", r.epochs, r.mode, r.seed, acc_cell(r.final_acc));
    }
    write_file(&cfg.out_dir.join("epoch_curve.csv"), csv.as_bytes())?;
    let mut groups = Vec::new();
    for &e in &cfg.epochs_grid {
        for mode in &cfg.modes {
            let accs = rows.iter().filter(|r| r.epochs == e && &r.mode == mode).map(|r| r.final_acc).collect();
            groups.push((vec![e.to_string(), mode.clone()], accs));
        }
    }
    let summary = summarize(&groups);
    write_file(&cfg.out_dir.join("epoch_curve_summary.csv"), summary_csv("epochs,mode", &summary).as_bytes())?;
    Ok(CurveReport { rows, summary })
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct FarmReport {
    pub trained: Vec<u64>,
    /// Seeds already holding a valid snapshot or a failure record.
    pub resumed: Vec<u64>,
    pub failed: Vec<u64>,
}

/// Trains seeds `0..k` into `out_dir`, skipping seeds that already have a
/// valid snapshot of the same configuration or a failure record.
pub fn cmd_farm(cfg: &ExperimentConfig, k: usize) -> Result<FarmReport> {
    cfg.validate()?;
    let data = cfg.data.load()?;
    farm_with(cfg, k, |seed| train::train(&cfg.model, &data.0, &data.1, &cfg.optim, &cfg.train, seed))
}

/// [`cmd_farm`] with a caller-supplied training function.
pub fn farm_with<F>(cfg: &ExperimentConfig, k: usize, runner: F) -> Result<FarmReport>
where
    F: Fn(u64) -> Result<TrainOutcome> + Sync,
{
    if k < 2 {
        return Err(Error::Config(format!("a population needs K >= 2, got {k}")));
    }
    let dir = &cfg.out_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let hash = config_hash(&cfg.model, &cfg.optim, &cfg.train);
    let mut report = FarmReport::default();
    let mut todo = Vec::new();
    for seed in 0..k as u64 {
        let stem = seed_stem(seed);
        let done = match WeightSnapshot::load(&dir.join(format!("{stem}.{SNAPSHOT_EXT}"))) {
            Ok(s) => s.config_hash == hash && s.seed == seed,
            Err(_) => false,
        };
        if done || dir.join(format!("{stem}{FAILED_SUFFIX}")).exists() {
            report.resumed.push(seed);
        } else {
            todo.push(seed);
        }
    }
    let outcomes: Vec<(u64, std::result::Result<RunStatus, String>)> = cfg.pool()?.install(|| {
        todo.par_iter()
            .map(|&seed| {
                let status = (|| -> Result<RunStatus> {
                    let out = runner(seed)?;
                    let stem = seed_stem(seed);
                    match &out.snapshot {
                        Some(snap) => {
                            write_atomic(&dir.join(format!("{stem}.{SNAPSHOT_EXT}")), &snap.to_bytes()?)?;
                            out.result.save(&dir.join(format!("{stem}.json")))?;
                        }
                        None => out.result.save(&dir.join(format!("{stem}{FAILED_SUFFIX}")))?,
                    }
                    Ok(out.result.status)
                })();
                (seed, status.map_err(|e| e.to_string()))
            })
            .collect()
    });
    for (seed, status) in outcomes {
        match status {
            Ok(RunStatus::Ok) => report.trained.push(seed),
            Ok(RunStatus::Failed) => report.failed.push(seed),
            Err(msg) => {
                let record = serde_json::json!({ "seed": seed, "status": "failed", "failure": msg });
                let path = dir.join(format!("{}{FAILED_SUFFIX}", seed_stem(seed)));
                write_file(&path, (serde_json::to_string_pretty(&record)? + "\n").as_bytes())?;
                report.failed.push(seed);
            }
        }
    }
    Ok(report)
}

/// Number of MLP blocks in the first readable snapshot of `dir`.
fn snapshot_depth(dir: &Path) -> Result<usize> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == SNAPSHOT_EXT))
        .collect();
    paths.sort();
    paths
        .iter()
        .find_map(|p| WeightSnapshot::load(p).ok())
        .map(|s| s.tensors.iter().filter(|(n, _)| n.ends_with(".mlp.W1")).count())
        .ok_or_else(|| Error::Population(format!("no valid snapshots in {}", dir.display())))
}

/// Population statistics for each requested layer (all layers when `None`).
/// Writes `stats_layer<L>.json` and, within the size cap, the covariance as
/// `cov_layer<L>.csv` plus its sidecar into `out`.
pub fn cmd_analyze(snapshot_dir: &Path, layer: Option<usize>, out: &Path) -> Result<Vec<PopulationStats>> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let layers: Vec<usize> = match layer {
        Some(l) => vec![l],
        None => (0..snapshot_depth(snapshot_dir)?).collect(),
    };
    let mut all = Vec::new();
    for l in layers {
        let pop = population::collect(snapshot_dir, l)?;
        let stats = population::population_stats(&pop)?;
        if stats.covariance_dim.is_some() {
            let cov = population::covariance(&pop)?;
            population::export_heatmap_data(&cov, &out.join(format!("cov_layer{l}.csv")))?;
        }
        let path = out.join(format!("stats_layer{l}.json"));
        write_file(&path, (serde_json::to_string_pretty(&stats)? + "\n").as_bytes())?;
        all.push(stats);
    }
    Ok(all)
}
