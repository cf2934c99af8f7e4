//! Experiment grids: (method × mode × ζ × seed) cells, evaluation, model
//! selection and the CSV/JSON result files.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{build_splits, oracle_filter, BatchCycler, DatasetKind, DatasetSpec, LabeledSplit, MismatchSpec};
use crate::error::{invalid, Error, Result};
use crate::losses::{BaseMethodConfig, ClassWeights, MethodId};
use crate::model::{Classifier, ClassifierConfig};
use crate::optim::{TrainConfig, Trainer};
use crate::rng::Stream;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    LabeledOnly,
    OffTheShelf,
    Fixastep,
    AugOnly,
    GateOnly,
    OracleFilter,
}

/// What a mode switches on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModeFlags {
    pub use_aug: bool,
    pub use_gate: bool,
    pub filter: bool,
    pub uses_unlabeled: bool,
}

impl Mode {
    pub const ALL: [Mode; 6] = [
        Mode::LabeledOnly,
        Mode::OffTheShelf,
        Mode::Fixastep,
        Mode::AugOnly,
        Mode::GateOnly,
        Mode::OracleFilter,
    ];

    /// The four ablation rows: off-the-shelf, +G, +A, +A&G.
    pub const ABLATION: [Mode; 4] = [Mode::OffTheShelf, Mode::GateOnly, Mode::AugOnly, Mode::Fixastep];

    pub fn flags(self) -> ModeFlags {
        let (use_aug, use_gate, filter, uses_unlabeled) = match self {
            Mode::LabeledOnly => (false, false, false, false),
            Mode::OffTheShelf => (false, false, false, true),
            Mode::Fixastep => (true, true, false, true),
            Mode::AugOnly => (true, false, false, true),
            Mode::GateOnly => (false, true, false, true),
            Mode::OracleFilter => (false, false, true, true),
        };
        ModeFlags {
            use_aug,
            use_gate,
            filter,
            uses_unlabeled,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::LabeledOnly => "labeled-only",
            Mode::OffTheShelf => "off-the-shelf",
            Mode::Fixastep => "fixastep",
            Mode::AugOnly => "aug-only",
            Mode::GateOnly => "gate-only",
            Mode::OracleFilter => "oracle-filter",
        }
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| invalid(format!("unknown mode `{s}`")))
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Maximum unlabeled-loss weight per base method (CIFAR-10 defaults).
pub fn default_lambda_max(method: MethodId) -> f64 {
    match method {
        MethodId::Pi => 10.0,
        MethodId::Pseudo => 1.0,
        MethodId::MeanTeacher => 50.0,
        MethodId::Vat => 0.3,
        MethodId::Fixmatch => 1.0,
    }
}

/// Network shape; the architecture family follows the dataset kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSpec {
    /// MLP hidden widths (vector data).
    pub hidden: Vec<usize>,
    /// CNN channel counts (image data).
    pub channels: [usize; 2],
    /// CNN dense width (image data).
    pub cnn_hidden: usize,
    pub weight_decay: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            hidden: vec![64],
            channels: [8, 16],
            cnn_hidden: 64,
            weight_decay: 5e-4,
        }
    }
}

impl ModelSpec {
    pub fn classifier(&self, kind: &DatasetKind, num_classes: usize) -> ClassifierConfig {
        let cfg = match kind.feature_kind() {
            crate::augment::FeatureKind::Vector { dim } => ClassifierConfig::mlp(dim, self.hidden.clone(), num_classes),
            crate::augment::FeatureKind::Image { side } => {
                ClassifierConfig::cnn(side, self.channels, self.cnn_hidden, num_classes)
            }
        };
        cfg.with_weight_decay(self.weight_decay)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    /// Unlabeled class slots `M`.
    pub slots: usize,
    /// Mismatch percentages ζ.
    pub zetas: Vec<u32>,
    pub methods: Vec<MethodId>,
    pub modes: Vec<Mode>,
    pub seeds: Vec<u64>,
    pub eval_every: u64,
    pub model: ModelSpec,
    /// Shared training settings; `use_aug`, `use_gate` and `base.method`
    /// are set per cell from the mode and method.
    pub train: TrainConfig,
    /// Overrides the per-method default maximum unlabeled weight.
    pub lambda_max: Option<f64>,
    /// Unlabeled-weight ramp-up length as a fraction of the iterations.
    /// Replaces `train.warmup` for every cell.
    pub warmup_fraction: f64,
    /// Worker threads for the grid; `0` uses every core.
    pub jobs: usize,
    pub out: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSpec::blobs_default(),
            slots: 4,
            zetas: vec![0, 25, 50, 75, 100],
            methods: vec![MethodId::Pi],
            modes: vec![Mode::LabeledOnly, Mode::OffTheShelf, Mode::Fixastep],
            seeds: (0..5).collect(),
            eval_every: 100,
            model: ModelSpec::default(),
            train: TrainConfig {
                iterations: 2000,
                ..TrainConfig::default()
            },
            lambda_max: None,
            warmup_fraction: 0.4,
            jobs: 0,
            out: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        for &z in &self.zetas {
            MismatchSpec::new(z, self.slots)?;
        }
        if self.eval_every == 0 {
            return Err(invalid("eval_every must be positive"));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(invalid(format!("warmup_fraction {} outside [0, 1]", self.warmup_fraction)));
        }
        if self.seeds.is_empty() || self.modes.is_empty() {
            return Err(invalid("need at least one seed and one mode"));
        }
        if self.methods.is_empty() && self.modes.iter().any(|m| m.flags().uses_unlabeled) {
            return Err(invalid("modes that use unlabeled data need at least one method"));
        }
        self.train.validate()
    }

    /// Load from a `.json` file, otherwise TOML.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text)?
        } else {
            toml::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// SHA-256 over the canonical JSON encoding of every field.
    pub fn digest(&self) -> String {
        digest_of(self)
    }

    /// Every cell of the grid in a fixed order. Labeled-only cells do not
    /// depend on the method and appear once per (ζ, seed).
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &mode in &self.modes {
            let methods: Vec<Option<MethodId>> = if mode.flags().uses_unlabeled {
                self.methods.iter().copied().map(Some).collect()
            } else {
                vec![None]
            };
            for method in methods {
                for &zeta in &self.zetas {
                    for &seed in &self.seeds {
                        out.push(Cell { method, mode, zeta, seed });
                    }
                }
            }
        }
        out
    }

    /// Training settings for one cell.
    pub fn train_config(&self, cell: &Cell) -> TrainConfig {
        let flags = cell.mode.flags();
        let mut t = self.train.clone();
        t.use_aug = flags.use_aug;
        t.use_gate = flags.use_gate;
        t.warmup = (self.warmup_fraction * t.iterations as f64).round() as u64;
        t.base = cell.method.map(|m| BaseMethodConfig {
            method: m,
            ..self.train.base.clone().unwrap_or_default()
        });
        if let Some(m) = cell.method {
            t.lambda_max = self.lambda_max.unwrap_or_else(|| default_lambda_max(m));
        }
        t
    }
}

fn digest_of<T: Serialize>(v: &T) -> String {
    let bytes = serde_json::to_vec(v).expect("config serializes");
    hex::encode(Sha256::digest(&bytes))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub method: Option<MethodId>,
    pub mode: Mode,
    pub zeta: u32,
    pub seed: u64,
}

impl Cell {
    pub fn method_name(&self) -> &'static str {
        self.method.map_or("none", MethodId::name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub balanced_accuracy: f64,
    /// Recall per known class; `None` for classes absent from the split.
    pub per_class_recall: Vec<Option<f64>>,
}

/// Argmax accuracy, balanced accuracy and per-class recall.
pub fn evaluate(model: &Classifier, split: &LabeledSplit) -> Result<Metrics> {
    if split.is_empty() {
        return Err(invalid("cannot evaluate on an empty split"));
    }
    let probs = model.predict_proba(&split.x)?;
    let preds: Vec<usize> = probs
        .iter_rows()
        .map(|r| {
            r.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |b, (k, &v)| if v > b.1 { (k, v) } else { b })
                .0
        })
        .collect();
    Ok(metrics_from_predictions(&preds, &split.labels, model.num_classes()))
}

pub fn metrics_from_predictions(preds: &[usize], labels: &[usize], num_classes: usize) -> Metrics {
    let mut hits = vec![0usize; num_classes];
    let mut totals = vec![0usize; num_classes];
    for (&p, &y) in preds.iter().zip(labels) {
        totals[y] += 1;
        if p == y {
            hits[y] += 1;
        }
    }
    let recall: Vec<Option<f64>> = hits
        .iter()
        .zip(&totals)
        .enumerate()
        .map(|(c, (&h, &t))| {
            if t == 0 {
                log::warn!("class {c} is absent from the evaluation split; excluded from balanced accuracy");
                None
            } else {
                Some(h as f64 / t as f64)
            }
        })
        .collect();
    let present: Vec<f64> = recall.iter().flatten().copied().collect();
    Metrics {
        accuracy: hits.iter().sum::<usize>() as f64 / labels.len().max(1) as f64,
        balanced_accuracy: present.iter().sum::<f64>() / present.len().max(1) as f64,
        per_class_recall: recall,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub iteration: u64,
    pub val: Metrics,
    pub test: Metrics,
    /// Fraction of gated steps since the previous evaluation that kept the
    /// unlabeled gradient; `None` without a gate.
    pub gate_fraction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub method: Option<MethodId>,
    pub mode: Mode,
    pub zeta: u32,
    pub seed: u64,
    pub digest: String,
    pub evals: Vec<EvalPoint>,
    /// Index into `evals` with the highest validation balanced accuracy.
    pub selected: Option<usize>,
    /// Kept fraction over every gated step of the run.
    pub gate_fraction: Option<f64>,
    pub steps: u64,
    pub failure: Option<String>,
    pub wall_seconds: f64,
}

impl RunResult {
    pub fn cell(&self) -> Cell {
        Cell {
            method: self.method,
            mode: self.mode,
            zeta: self.zeta,
            seed: self.seed,
        }
    }

    pub fn selected_eval(&self) -> Option<&EvalPoint> {
        self.selected.map(|i| &self.evals[i])
    }

    /// Test accuracy at the selected checkpoint.
    pub fn selected_test_accuracy(&self) -> Option<f64> {
        self.selected_eval().map(|e| e.test.accuracy)
    }

    pub fn failed(&self) -> bool {
        self.failure.is_some()
    }
}

#[derive(Debug, Default)]
struct GateCounter {
    gated: u64,
    kept: u64,
}

impl GateCounter {
    fn fraction(&self) -> Option<f64> {
        (self.gated > 0).then(|| self.kept as f64 / self.gated as f64)
    }
}

/// Train and evaluate one cell.
pub fn run_cell(cfg: &ExperimentConfig, cell: &Cell) -> Result<RunResult> {
    let started = Instant::now();
    let mut train = cfg.train_config(cell);
    let digest = digest_of(&(cell, &cfg.dataset, cfg.slots, &cfg.model, &train, cfg.eval_every));
    let bundle = build_splits(&cfg.dataset, &MismatchSpec::new(cell.zeta, cfg.slots)?, cell.seed)?;
    let flags = cell.mode.flags();
    let unlabeled = if !flags.uses_unlabeled {
        Tensor::empty_rows(bundle.unlabeled.features().row_shape())
    } else if flags.filter {
        oracle_filter(&bundle.unlabeled).features().clone()
    } else {
        bundle.unlabeled.features().clone()
    };
    if flags.uses_unlabeled && unlabeled.rows() == 0 {
        log::warn!(
            "{} at ζ={} seed {}: no unlabeled examples left, training on labeled data only",
            cell.mode,
            cell.zeta,
            cell.seed
        );
        train.base = None;
    }

    let c = bundle.num_classes;
    let model = Classifier::init(cfg.model.classifier(&cfg.dataset.kind, c), cell.seed)?;
    let weights = ClassWeights::from_counts(&bundle.labeled.class_counts(c))?;
    let mut trainer = Trainer::new(model, train.clone(), weights, bundle.kind, cell.seed)?;
    let mut lcycle = BatchCycler::new(bundle.labeled.len(), cell.seed, Stream::LabeledOrder);
    let mut ucycle = BatchCycler::new(unlabeled.rows(), cell.seed, Stream::UnlabeledOrder);

    let eval = |t: &Trainer, i: u64, gate: Option<f64>| -> Result<EvalPoint> {
        Ok(EvalPoint {
            iteration: i,
            val: evaluate(t.model(), &bundle.val)?,
            test: evaluate(t.model(), &bundle.test)?,
            gate_fraction: gate,
        })
    };
    let gated = train.use_gate && train.base.is_some();
    let mut evals = vec![eval(&trainer, 0, None)?];
    let mut window = GateCounter::default();
    let mut total = GateCounter::default();
    let mut failure = None;
    let mut steps = 0;
    for i in 0..train.iterations {
        let lb = bundle.labeled.batch(&lcycle.next_batch(train.labeled_batch), c)?;
        let xu = unlabeled.select_rows(&ucycle.next_batch(train.unlabeled_batch));
        match trainer.step(&lb, &xu) {
            Ok(d) => {
                if gated && d.dot_product.is_some() {
                    for g in [&mut window, &mut total] {
                        g.gated += 1;
                        g.kept += u64::from(d.used_unlabeled);
                    }
                }
            }
            Err(Error::NonFinite(msg)) => {
                log::warn!("{} {} ζ={} seed {} failed: {msg}", cell.method_name(), cell.mode, cell.zeta, cell.seed);
                failure = Some(msg);
                break;
            }
            Err(e) => return Err(e),
        }
        steps = i + 1;
        if steps % cfg.eval_every == 0 || steps == train.iterations {
            let frac = if gated { window.fraction() } else { None };
            evals.push(eval(&trainer, steps, frac)?);
            window = GateCounter::default();
        }
    }
    let selected = evals
        .iter()
        .enumerate()
        .fold(None::<(usize, f64)>, |best, (k, e)| match best {
            Some((_, b)) if b >= e.val.balanced_accuracy => best,
            _ => Some((k, e.val.balanced_accuracy)),
        })
        .map(|(k, _)| k);
    Ok(RunResult {
        method: cell.method,
        mode: cell.mode,
        zeta: cell.zeta,
        seed: cell.seed,
        digest,
        evals,
        selected,
        gate_fraction: if gated { total.fraction() } else { None },
        steps,
        failure,
        wall_seconds: started.elapsed().as_secs_f64(),
    })
}

/// How grid cells are scheduled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    /// Worker pool with this many threads (`0` = all cores). Falls back to
    /// sequential without the `parallel` feature.
    Parallel(usize),
}

/// Run every cell of the grid with the config's `jobs` setting.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<RunResult>> {
    let exec = if cfg.jobs == 1 {
        Execution::Sequential
    } else {
        Execution::Parallel(cfg.jobs)
    };
    run_experiment_with(cfg, exec)
}

pub fn run_experiment_with(cfg: &ExperimentConfig, exec: Execution) -> Result<Vec<RunResult>> {
    cfg.validate()?;
    let cells = cfg.cells();
    log::info!("running {} cells", cells.len());
    match exec {
        Execution::Sequential => cells.iter().map(|c| run_cell(cfg, c)).collect(),
        Execution::Parallel(jobs) => run_parallel(cfg, &cells, jobs),
    }
}

#[cfg(feature = "parallel")]
fn run_parallel(cfg: &ExperimentConfig, cells: &[Cell], jobs: usize) -> Result<Vec<RunResult>> {
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| invalid(e.to_string()))?;
    pool.install(|| cells.par_iter().map(|c| run_cell(cfg, c)).collect())
}

#[cfg(not(feature = "parallel"))]
fn run_parallel(cfg: &ExperimentConfig, cells: &[Cell], _jobs: usize) -> Result<Vec<RunResult>> {
    cells.iter().map(|c| run_cell(cfg, c)).collect()
}

pub const CSV_COLUMNS: [&str; 9] = [
    "method",
    "mode",
    "zeta",
    "seed",
    "iteration",
    "split",
    "accuracy",
    "balanced_accuracy",
    "gate_fraction",
];

/// One line of the results CSV. `split` is `val`, `test`, or `selected`
/// (test metrics at the checkpoint chosen on validation).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    pub mode: String,
    pub zeta: u32,
    pub seed: u64,
    pub iteration: u64,
    pub split: String,
    pub accuracy: f64,
    pub balanced_accuracy: f64,
    pub gate_fraction: Option<f64>,
}

pub fn result_rows(results: &[RunResult]) -> Vec<ResultRow> {
    let mut rows = Vec::new();
    for r in results {
        let cell = r.cell();
        let row = |e: &EvalPoint, split: &str, m: &Metrics| ResultRow {
            method: cell.method_name().to_string(),
            mode: r.mode.name().to_string(),
            zeta: r.zeta,
            seed: r.seed,
            iteration: e.iteration,
            split: split.to_string(),
            accuracy: m.accuracy,
            balanced_accuracy: m.balanced_accuracy,
            gate_fraction: e.gate_fraction,
        };
        for e in &r.evals {
            rows.push(row(e, "val", &e.val));
            rows.push(row(e, "test", &e.test));
        }
        if let Some(e) = r.selected_eval() {
            rows.push(row(e, "selected", &e.test));
        }
    }
    rows
}

/// Mean, min and max of the selected test accuracy over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub method: String,
    pub mode: Mode,
    pub zeta: u32,
    pub runs: usize,
    pub failed: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub mean_balanced: f64,
}

pub fn aggregate(results: &[RunResult]) -> Vec<Aggregate> {
    let mut groups: BTreeMap<(String, Mode, u32), Vec<&RunResult>> = BTreeMap::new();
    for r in results {
        groups
            .entry((r.cell().method_name().to_string(), r.mode, r.zeta))
            .or_default()
            .push(r);
    }
    groups
        .into_iter()
        .map(|((method, mode, zeta), rs)| {
            let sel: Vec<&EvalPoint> = rs.iter().filter_map(|r| r.selected_eval()).collect();
            let acc: Vec<f64> = sel.iter().map(|e| e.test.accuracy).collect();
            let n = acc.len().max(1) as f64;
            Aggregate {
                method,
                mode,
                zeta,
                runs: rs.len(),
                failed: rs.iter().filter(|r| r.failed()).count(),
                mean: acc.iter().sum::<f64>() / n,
                min: acc.iter().copied().fold(f64::INFINITY, f64::min),
                max: acc.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                mean_balanced: sel.iter().map(|e| e.test.balanced_accuracy).sum::<f64>() / n,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub config_digest: String,
    pub aggregates: Vec<Aggregate>,
    pub runs: Vec<RunResult>,
}

/// Paths written by [`write_results`].
#[derive(Debug, Clone)]
pub struct ResultFiles {
    pub csv: PathBuf,
    pub json: PathBuf,
}

/// Write `results.csv` (one row per run, evaluation point and split) and
/// `summary.json` into `dir`.
pub fn write_results(results: &[RunResult], config_digest: &str, dir: &Path) -> Result<ResultFiles> {
    std::fs::create_dir_all(dir)?;
    let files = ResultFiles {
        csv: dir.join("results.csv"),
        json: dir.join("summary.json"),
    };
    let mut w = csv::Writer::from_path(&files.csv)?;
    w.write_record(CSV_COLUMNS)?;
    for r in result_rows(results) {
        w.write_record([
            r.method,
            r.mode,
            r.zeta.to_string(),
            r.seed.to_string(),
            r.iteration.to_string(),
            r.split,
            r.accuracy.to_string(),
            r.balanced_accuracy.to_string(),
            r.gate_fraction.map(|g| g.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    let summary = Summary {
        config_digest: config_digest.to_string(),
        aggregates: aggregate(results),
        runs: results.to_vec(),
    };
    std::fs::write(&files.json, serde_json::to_vec_pretty(&summary)?)?;
    Ok(files)
}

pub fn read_rows(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != CSV_COLUMNS {
        return Err(invalid(format!("unexpected CSV header {header:?}")));
    }
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

pub fn read_summary(path: &Path) -> Result<Summary> {
    Ok(serde_json::from_slice(&std::fs::read(path)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        let mut d = DatasetSpec::blobs_default();
        d.labeled_per_class = 5;
        d.unlabeled_per_class = 10;
        d.val_per_class = 4;
        d.test_per_class = 4;
        ExperimentConfig {
            dataset: d,
            zetas: vec![0, 100],
            seeds: vec![0, 1, 2],
            eval_every: 5,
            train: TrainConfig {
                iterations: 10,
                labeled_batch: 8,
                unlabeled_batch: 8,
                ..TrainConfig::default()
            },
            modes: vec![Mode::Fixastep],
            jobs: 1,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn mode_flags_match_table() {
        let f = |m: Mode| {
            let x = m.flags();
            (x.use_aug, x.use_gate, x.filter)
        };
        assert_eq!(f(Mode::Fixastep), (true, true, false));
        assert_eq!(f(Mode::AugOnly), (true, false, false));
        assert_eq!(f(Mode::GateOnly), (false, true, false));
        assert_eq!(f(Mode::OffTheShelf), (false, false, false));
        assert_eq!(f(Mode::OracleFilter), (false, false, true));
        assert!(!Mode::LabeledOnly.flags().uses_unlabeled);
        for m in Mode::ALL {
            assert_eq!(m.name().parse::<Mode>().unwrap(), m);
        }
    }

    #[test]
    fn evaluate_examples() {
        let m = metrics_from_predictions(&[0, 1, 2], &[0, 1, 2], 3);
        assert_eq!((m.accuracy, m.balanced_accuracy), (1.0, 1.0));
        let m = metrics_from_predictions(&[0; 6], &[0, 0, 1, 1, 2, 2], 3);
        assert!((m.balanced_accuracy - 1.0 / 3.0).abs() < 1e-15);
        let m = metrics_from_predictions(&[0, 0, 1, 0], &[0, 0, 1, 1], 2);
        assert_eq!(m.balanced_accuracy, 0.75);
        let m = metrics_from_predictions(&[0, 1], &[0, 0], 2);
        assert_eq!(m.per_class_recall, vec![Some(0.5), None]);
        assert_eq!(m.balanced_accuracy, 0.5);
    }

    #[test]
    fn grid_cardinality() {
        let cfg = tiny();
        assert_eq!(cfg.cells().len(), 6);
        let mut cfg2 = tiny();
        cfg2.modes = vec![Mode::LabeledOnly, Mode::Fixastep];
        cfg2.methods = vec![MethodId::Pi, MethodId::Vat];
        assert_eq!(cfg2.cells().len(), 6 + 12);
    }

    #[test]
    fn runs_are_deterministic() {
        let cfg = tiny();
        let a = run_experiment(&cfg).unwrap();
        let b = run_experiment(&cfg).unwrap();
        assert_eq!(a.len(), 6);
        assert_eq!(result_rows(&a), result_rows(&b));
        for r in &a {
            assert!(r.selected.is_some());
            assert_eq!(r.evals.len(), 3);
            let g = r.gate_fraction.unwrap();
            assert!((0.0..=1.0).contains(&g));
        }
    }

    #[test]
    fn labeled_only_ignores_unlabeled_set() {
        let mut cfg = tiny();
        cfg.modes = vec![Mode::LabeledOnly];
        let rs = run_experiment(&cfg).unwrap();
        // ζ only changes the unlabeled set, so labeled-only runs match across ζ
        for seed in 0..3 {
            let at = |z| rs.iter().find(|r| r.seed == seed && r.zeta == z).unwrap();
            assert_eq!(at(0).evals, at(100).evals);
            assert_eq!(at(0).gate_fraction, None);
        }
    }

    #[test]
    fn oracle_filter_at_full_mismatch_matches_labeled_only() {
        let mut cfg = tiny();
        cfg.zetas = vec![100];
        cfg.modes = vec![Mode::LabeledOnly, Mode::OracleFilter];
        let rs = run_experiment(&cfg).unwrap();
        for seed in 0..3 {
            let by = |m| rs.iter().find(|r| r.seed == seed && r.mode == m).unwrap();
            assert_eq!(by(Mode::LabeledOnly).evals, by(Mode::OracleFilter).evals);
        }
    }

    #[test]
    fn parallel_matches_sequential() {
        let cfg = tiny();
        let a = run_experiment_with(&cfg, Execution::Sequential).unwrap();
        let b = run_experiment_with(&cfg, Execution::Parallel(3)).unwrap();
        assert_eq!(result_rows(&a), result_rows(&b));
    }

    #[test]
    fn digest_tracks_fields() {
        let a = tiny();
        let mut b = tiny();
        assert_eq!(a.digest(), b.digest());
        b.train.alpha = 0.75;
        assert_ne!(a.digest(), b.digest());
        let mut c = tiny();
        c.dataset.noise = 1.5;
        assert_ne!(a.digest(), c.digest());
    }

    #[test]
    fn config_round_trips_through_toml_and_json() {
        let cfg = tiny();
        let dir = tempfile::tempdir().unwrap();
        let t = dir.path().join("c.toml");
        std::fs::write(&t, toml::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(ExperimentConfig::load(&t).unwrap(), cfg);
        let j = dir.path().join("c.json");
        std::fs::write(&j, serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(ExperimentConfig::load(&j).unwrap(), cfg);
    }

    #[test]
    fn partial_config_uses_defaults() {
        let cfg: ExperimentConfig = toml::from_str("seeds = [7]\nzetas = [50]\n[train]\niterations = 3\n").unwrap();
        assert_eq!(cfg.seeds, vec![7]);
        assert_eq!(cfg.train.iterations, 3);
        assert_eq!(cfg.train.alpha, 0.5);
        assert_eq!(cfg.slots, 4);
    }
}
