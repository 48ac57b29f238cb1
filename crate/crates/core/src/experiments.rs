//! Config-driven run matrices, CSV persistence, summaries and figure presets.

use std::cmp::Ordering as CmpOrdering;
use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};
use statrs::statistics::{Data, Median, Statistics};

use crate::curriculum::{
    run_algorithm1, run_curriculum_generic, run_one_step_hinge, run_standard, theorem2_hyperparams, DataSource,
    OneStepConfig, OneStepMode, RunMetrics, StopRule, TestSet, Theorem2Inputs, TheoremConstants,
};
use crate::data::{generate_dataset, Dataset, MixtureParams, MonomialTarget};
use crate::error::{Error, Result};
use crate::loss::LossKind;
use crate::model::{init_curriculum_net, init_mean_field_net, Activation, AnyNet, MlpNet, TwoLayerNet};
use crate::optimizer::NoisySgdConfig;
use crate::rng::{derive_seed, seeded};

/// Environment variable overriding the worker count.
pub const WORKERS_ENV: &str = "LAB_WORKERS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TargetSpec {
    Parity { k: usize },
    FLeft,
    FMiddle,
    FRight,
}

impl TargetSpec {
    pub fn build(&self, d: usize) -> Result<MonomialTarget> {
        match *self {
            TargetSpec::Parity { k } => MonomialTarget::parity(k, d),
            TargetSpec::FLeft => MonomialTarget::f_left(d),
            TargetSpec::FMiddle => MonomialTarget::f_middle(d),
            TargetSpec::FRight => MonomialTarget::f_right(d),
        }
    }

    /// Largest monomial degree.
    pub fn degree(&self) -> usize {
        match *self {
            TargetSpec::Parity { k } => k,
            TargetSpec::FLeft | TargetSpec::FMiddle | TargetSpec::FRight => 6,
        }
    }

    pub fn label(&self) -> String {
        match *self {
            TargetSpec::Parity { k } => format!("parity_{k}"),
            TargetSpec::FLeft => "f_left".into(),
            TargetSpec::FMiddle => "f_middle".into(),
            TargetSpec::FRight => "f_right".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ArchPreset {
    /// Hidden layers 512, 1024, 512, 64.
    MlpPaper,
    /// Hidden layers 256, 256.
    MlpSmall,
    TwoLayer {
        width: usize,
        #[serde(default = "default_activation")]
        activation: Activation,
    },
    /// Output scaled by `1/n`.
    MeanField { n: usize },
}

fn default_activation() -> Activation {
    Activation::Relu
}

impl ArchPreset {
    pub fn build<R: rand::Rng + ?Sized>(&self, d: usize, rng: &mut R) -> Result<AnyNet> {
        Ok(match *self {
            ArchPreset::MlpPaper => AnyNet::Mlp(MlpNet::pytorch_init(&MlpNet::paper_dims(d), rng)?),
            ArchPreset::MlpSmall => AnyNet::Mlp(MlpNet::pytorch_init(&MlpNet::small_dims(d), rng)?),
            ArchPreset::TwoLayer { width, activation } => {
                AnyNet::TwoLayer(TwoLayerNet::uniform_init(width, d, activation, rng)?)
            }
            ArchPreset::MeanField { n } => {
                if n == 0 || d == 0 {
                    return Err(Error::InvalidParams("mean-field net needs n, d > 0".into()));
                }
                AnyNet::TwoLayer(init_mean_field_net(n, d, rng))
            }
        })
    }

    /// 0.003 for the MLPs, 1000 for mean-field, 0.01 otherwise.
    pub fn default_lr(&self) -> f64 {
        match self {
            ArchPreset::MlpPaper | ArchPreset::MlpSmall => 0.003,
            ArchPreset::MeanField { .. } => 1000.0,
            ArchPreset::TwoLayer { .. } => 0.01,
        }
    }

    /// Plain SGD at [`Self::default_lr`] with batch size 64.
    pub fn default_optimizer(&self) -> NoisySgdConfig {
        NoisySgdConfig::plain(self.default_lr(), 64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Standard,
    Curriculum,
    Algorithm1,
    OneStepHinge,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Standard => "standard",
            Method::Curriculum => "curriculum",
            Method::Algorithm1 => "algorithm1",
            Method::OneStepHinge => "one_step_hinge",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataMode {
    /// Fixed training sets of each size in `m`.
    Offline {
        m: Vec<usize>,
        #[serde(default)]
        passes: Option<usize>,
    },
    /// A new batch at every step.
    FreshBatch,
}

/// Settings for layer-wise (`algorithm1`) cells. The architecture must be
/// `two_layer`; `kappa` defaults to `1/(N(2 Delta d + 2))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerwiseSettings {
    pub delta: f64,
    #[serde(default)]
    pub kappa: Option<f64>,
    pub epsilon: f64,
    pub zeta: f64,
    #[serde(default)]
    pub constants: TheoremConstants,
}

impl Default for LayerwiseSettings {
    fn default() -> Self {
        Self { delta: 1.0, kappa: None, epsilon: 1.0, zeta: 0.02, constants: TheoremConstants::default() }
    }
}

/// Settings for `one_step_hinge` cells. Width comes from a `two_layer`
/// architecture when given.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OneStepSettings {
    pub epsilon: f64,
    /// Grid-coverage failure probability.
    pub delta: f64,
    pub mode: OneStepMode,
    #[serde(default)]
    pub phase2_steps: Option<usize>,
    #[serde(default)]
    pub phase2_lr: Option<f64>,
    #[serde(default)]
    pub stop_loss: Option<f64>,
}

impl Default for OneStepSettings {
    fn default() -> Self {
        Self {
            epsilon: 0.05,
            delta: 0.1,
            mode: OneStepMode::Exact,
            phase2_steps: None,
            phase2_lr: None,
            stop_loss: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: String,
    pub d: usize,
    pub targets: Vec<TargetSpec>,
    pub rho: Vec<f64>,
    pub mu: Vec<f64>,
    pub arch: ArchPreset,
    #[serde(default = "default_loss")]
    pub loss: LossKind,
    pub optimizer: NoisySgdConfig,
    pub methods: Vec<Method>,
    pub mode: DataMode,
    /// Sparse phase of `curriculum` cells.
    pub stop_phase1: StopRule,
    /// Final (or only) phase.
    pub stop: StopRule,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default = "default_test_samples")]
    pub test_samples: usize,
    #[serde(default)]
    pub layerwise: LayerwiseSettings,
    #[serde(default)]
    pub one_step: OneStepSettings,
    /// Overridden by `LAB_WORKERS`.
    #[serde(default)]
    pub workers: Option<usize>,
    /// Off by default so that replays give byte-identical CSVs.
    #[serde(default)]
    pub record_wall_time: bool,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

fn default_loss() -> LossKind {
    LossKind::L2
}

fn default_test_samples() -> usize {
    10_000
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidParams(msg.into()));
        if self.d == 0 {
            return bad("d must be positive");
        }
        if self.targets.is_empty() || self.rho.is_empty() || self.mu.is_empty() || self.methods.is_empty() {
            return bad("targets, rho, mu and methods must be non-empty");
        }
        if let DataMode::Offline { m, .. } = &self.mode {
            if m.is_empty() || m.contains(&0) {
                return bad("offline mode needs a non-empty grid of positive sizes");
            }
        }
        if self.seeds.is_empty() {
            return bad("seeds must be non-empty");
        }
        let distinct: HashSet<u64> = self.seeds.iter().copied().collect();
        if distinct.len() != self.seeds.len() {
            return bad("seeds must be distinct");
        }
        for &rho in &self.rho {
            for &mu in &self.mu {
                MixtureParams::new(rho, mu, self.d)?;
            }
        }
        for t in &self.targets {
            t.build(self.d)?;
        }
        self.optimizer.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    fn sizes(&self) -> Vec<usize> {
        match &self.mode {
            DataMode::Offline { m, .. } => m.clone(),
            DataMode::FreshBatch => vec![0],
        }
    }

    /// Cartesian product in `(target, rho, mu, m, method, seed)` order.
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        let mut data_index = 0;
        for &target in &self.targets {
            for &rho in &self.rho {
                for &mu in &self.mu {
                    for m in self.sizes() {
                        for &method in &self.methods {
                            for &seed in &self.seeds {
                                out.push(Cell { run_id: out.len(), data_index, target, rho, mu, m, method, seed });
                            }
                        }
                        data_index += 1;
                    }
                }
            }
        }
        out
    }
}

/// One point of the matrix. Cells differing only in `method` share
/// `data_index`, hence data, test set and initialization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub run_id: usize,
    pub data_index: usize,
    pub target: TargetSpec,
    pub rho: f64,
    pub mu: f64,
    /// Training-set size; 0 with fresh batches.
    pub m: usize,
    pub method: Method,
    pub seed: u64,
}

impl Cell {
    /// Root seed of the cell: `hash(hash(master_seed, data_index), seed)`.
    pub fn root_seed(&self, master_seed: u64) -> u64 {
        derive_seed(derive_seed(master_seed, self.data_index as u64), self.seed)
    }
}

/// One CSV row. `status` is `ok` or the error tag of a failed cell, whose
/// metric fields are then empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: usize,
    pub seed: u64,
    pub rho: f64,
    pub mu: f64,
    pub d: usize,
    pub k: usize,
    pub m: usize,
    pub method: Method,
    pub steps_phase1: usize,
    pub steps_total: usize,
    pub final_train_loss: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub test_loss: Option<f64>,
    pub wall_time_ms: Option<u64>,
    pub status: String,
}

impl RunRecord {
    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }
}

/// Header row of every run CSV.
pub const RUN_RECORD_FIELDS: [&str; 15] = [
    "run_id",
    "seed",
    "rho",
    "mu",
    "d",
    "k",
    "m",
    "method",
    "steps_phase1",
    "steps_total",
    "final_train_loss",
    "test_accuracy",
    "test_loss",
    "wall_time_ms",
    "status",
];

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

/// The training set of an offline cell (`None` with fresh batches), as
/// [`run_matrix`] draws it.
pub fn cell_dataset(cfg: &ExperimentConfig, cell: &Cell) -> Result<Option<Dataset>> {
    if cfg.mode == DataMode::FreshBatch {
        return Ok(None);
    }
    let params = MixtureParams::new(cell.rho, cell.mu, cfg.d)?;
    let target = cell.target.build(cfg.d)?;
    generate_dataset(&params, &target, cell.m, derive_seed(cell.root_seed(cfg.master_seed), 2)).map(Some)
}

fn train_cell(cfg: &ExperimentConfig, cell: &Cell) -> Result<RunMetrics> {
    let d = cfg.d;
    let params = MixtureParams::new(cell.rho, cell.mu, d)?;
    let target = cell.target.build(d)?;
    let root = cell.root_seed(cfg.master_seed);
    let test = TestSet::generate(&params, &target, cfg.test_samples, derive_seed(root, 1));
    let mut rng = seeded(derive_seed(root, 3));
    let passes = match cfg.mode {
        DataMode::Offline { passes, .. } => passes,
        DataMode::FreshBatch => None,
    };
    match cell.method {
        Method::Standard | Method::Curriculum => {
            let mut net = cfg.arch.build(d, &mut seeded(derive_seed(root, 4)))?;
            let data = cell_dataset(cfg, cell)?;
            let source = match &data {
                Some(data) => DataSource::Offline { data, passes },
                None => DataSource::Fresh { params, target: &target },
            };
            if cell.method == Method::Standard {
                run_standard(source, &mut net, &cfg.optimizer, cfg.loss, &cfg.stop, Some(&test), &mut rng)
            } else {
                run_curriculum_generic(
                    source,
                    cell.mu,
                    &mut net,
                    &cfg.optimizer,
                    cfg.loss,
                    &cfg.stop_phase1,
                    &cfg.stop,
                    Some(&test),
                    &mut rng,
                )
            }
        }
        Method::Algorithm1 => {
            let ArchPreset::TwoLayer { width, .. } = cfg.arch else {
                return Err(Error::InvalidParams("algorithm1 cells need the two_layer architecture".into()));
            };
            let k = target
                .parity_degree()
                .ok_or_else(|| Error::InvalidParams("algorithm1 cells need a parity target".into()))?;
            let lw = cfg.layerwise;
            let kappa = lw.kappa.unwrap_or(1.0 / (width as f64 * (2.0 * lw.delta * d as f64 + 2.0)));
            let th = theorem2_hyperparams(&Theorem2Inputs {
                d,
                k,
                mu: cell.mu,
                kappa,
                delta: lw.delta,
                tau: cfg.optimizer.noise_level,
                epsilon: lw.epsilon,
                n: width,
                batch_size: cfg.optimizer.batch_size,
                zeta: lw.zeta,
                constants: lw.constants,
            })?;
            let mut sched = th.schedule;
            sched.clip_range = cfg.optimizer.clip_range;
            let m = match cfg.mode {
                DataMode::Offline { .. } => cell.m,
                DataMode::FreshBatch => sched.samples_needed(),
            };
            let data = generate_dataset(&params, &target, m, derive_seed(root, 2))?;
            let net = init_curriculum_net(width, d, lw.delta, kappa)?;
            Ok(run_algorithm1(&data, &params, &sched, net, Some(&test), &mut rng)?.metrics)
        }
        Method::OneStepHinge => {
            let k = target
                .parity_degree()
                .ok_or_else(|| Error::InvalidParams("one_step_hinge cells need a parity target".into()))?;
            let os = cfg.one_step;
            let mut c = OneStepConfig::new(d, k, os.epsilon, os.delta, cfg.optimizer.noise_level, os.mode);
            c.rho = cell.rho;
            if let ArchPreset::TwoLayer { width, .. } = cfg.arch {
                c.width = Some(width);
            }
            c.phase2_steps = os.phase2_steps;
            c.phase2_lr = os.phase2_lr;
            c.stop_loss = os.stop_loss;
            c.test_samples = cfg.test_samples;
            Ok(run_one_step_hinge(&c, &mut rng)?.metrics)
        }
    }
}

/// Runs one cell; errors become a failed-cell record.
pub fn run_cell(cfg: &ExperimentConfig, cell: &Cell) -> RunRecord {
    let start = Instant::now();
    let result = train_cell(cfg, cell);
    let wall = cfg.record_wall_time.then(|| start.elapsed().as_millis() as u64);
    let mut rec = RunRecord {
        run_id: cell.run_id,
        seed: cell.seed,
        rho: cell.rho,
        mu: cell.mu,
        d: cfg.d,
        k: cell.target.degree(),
        m: cell.m,
        method: cell.method,
        steps_phase1: 0,
        steps_total: 0,
        final_train_loss: None,
        test_accuracy: None,
        test_loss: None,
        wall_time_ms: wall,
        status: "ok".into(),
    };
    match result {
        Ok(metrics) => {
            rec.steps_phase1 = metrics.steps_phase1;
            rec.steps_total = metrics.steps_total;
            rec.final_train_loss = finite(metrics.final_train_loss);
            rec.test_accuracy = metrics.test_accuracy.and_then(finite);
            rec.test_loss = metrics.test_loss.and_then(finite);
        }
        Err(e) => {
            warn!("run {} failed: {e}", cell.run_id);
            rec.status = e.tag().into();
        }
    }
    rec
}

/// `LAB_WORKERS` if set, else the config value, else available parallelism.
pub fn worker_count(cfg: &ExperimentConfig) -> usize {
    if let Ok(v) = std::env::var(WORKERS_ENV) {
        match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => return n,
            _ => warn!("ignoring {WORKERS_ENV}={v:?}"),
        }
    }
    cfg.workers
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

/// Appends records in `run_id` order, whatever order they finish in.
struct OrderedAppender {
    writer: Option<csv::Writer<File>>,
    pending: BTreeMap<usize, RunRecord>,
    next: usize,
    done: Vec<RunRecord>,
}

impl OrderedAppender {
    fn push(&mut self, pos: usize, rec: RunRecord) -> Result<()> {
        self.pending.insert(pos, rec);
        while let Some(rec) = self.pending.remove(&self.next) {
            if let Some(w) = self.writer.as_mut() {
                w.serialize(&rec)?;
                w.flush()?;
            }
            self.done.push(rec);
            self.next += 1;
        }
        Ok(())
    }
}

/// Drops a trailing partial line left by an interrupted write.
fn trim_partial_line(path: &Path) -> Result<()> {
    let text = fs::read(path)?;
    if text.is_empty() || text.ends_with(b"\n") {
        return Ok(());
    }
    let keep = text.iter().rposition(|&c| c == b'\n').map_or(0, |i| i + 1);
    warn!("dropping a partial trailing line from {}", path.display());
    let file = OpenOptions::new().write(true).open(path)?;
    file.set_len(keep as u64)?;
    Ok(())
}

/// Runs every cell of the matrix. With `out`, records are appended to that
/// CSV as they complete (in `run_id` order) and cells already present are
/// skipped, so an interrupted sweep resumes where it stopped.
pub fn run_matrix(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<Vec<RunRecord>> {
    cfg.validate()?;
    let cells = cfg.cells();
    let mut existing = Vec::new();
    let mut writer = None;
    if let Some(path) = out {
        if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let fresh_file = !path.exists() || fs::metadata(path)?.len() == 0;
        if !fresh_file {
            trim_partial_line(path)?;
            existing = read_records(path)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        writer = Some(csv::WriterBuilder::new().has_headers(fresh_file).from_writer(file));
    }
    let seen: HashSet<usize> = existing.iter().map(|r| r.run_id).collect();
    let todo: Vec<Cell> = cells.into_iter().filter(|c| !seen.contains(&c.run_id)).collect();
    if !seen.is_empty() {
        info!("resuming: {} records present, {} to run", seen.len(), todo.len());
    }
    let workers = worker_count(cfg).min(todo.len().max(1));
    let mut appender = OrderedAppender { writer, pending: BTreeMap::new(), next: 0, done: Vec::new() };
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel::<(usize, RunRecord)>();
    std::thread::scope(|scope| -> Result<()> {
        for _ in 0..workers {
            let tx = tx.clone();
            let (todo, next) = (&todo, &next);
            scope.spawn(move || loop {
                let pos = next.fetch_add(1, Ordering::Relaxed);
                let Some(cell) = todo.get(pos) else { break };
                if tx.send((pos, run_cell(cfg, cell))).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        for (pos, rec) in rx {
            info!(
                "run {} {} rho={} mu={} m={} seed={}: steps {} acc {:?} [{}]",
                rec.run_id, rec.method, rec.rho, rec.mu, rec.m, rec.seed, rec.steps_total, rec.test_accuracy, rec.status
            );
            appender.push(pos, rec)?;
        }
        Ok(())
    })?;
    let mut all = existing;
    all.extend(appender.done);
    all.sort_by_key(|r| r.run_id);
    Ok(all)
}

pub fn write_records(path: &Path, records: &[RunRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if records.is_empty() {
        w.write_record(RUN_RECORD_FIELDS)?;
    }
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<RunRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    if headers.iter().ne(RUN_RECORD_FIELDS.iter().copied()) {
        return Err(Error::Parse(format!("{}: unexpected header {:?}", path.display(), headers)));
    }
    r.deserialize().map(|rec| rec.map_err(Error::from)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupField {
    Rho,
    Mu,
    D,
    K,
    M,
    Method,
    Status,
}

impl FromStr for GroupField {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::Parse(format!("unknown group field {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
enum KeyPart {
    Num(f64),
    Text(String),
}

impl KeyPart {
    fn cmp(&self, other: &Self) -> CmpOrdering {
        match (self, other) {
            (KeyPart::Num(a), KeyPart::Num(b)) => a.total_cmp(b),
            (KeyPart::Text(a), KeyPart::Text(b)) => a.cmp(b),
            (KeyPart::Num(_), KeyPart::Text(_)) => CmpOrdering::Less,
            (KeyPart::Text(_), KeyPart::Num(_)) => CmpOrdering::Greater,
        }
    }
}

impl fmt::Display for KeyPart {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KeyPart::Num(v) => write!(f, "{v}"),
            KeyPart::Text(s) => f.write_str(s),
        }
    }
}

fn key_part(r: &RunRecord, field: GroupField) -> KeyPart {
    match field {
        GroupField::Rho => KeyPart::Num(r.rho),
        GroupField::Mu => KeyPart::Num(r.mu),
        GroupField::D => KeyPart::Num(r.d as f64),
        GroupField::K => KeyPart::Num(r.k as f64),
        GroupField::M => KeyPart::Num(r.m as f64),
        GroupField::Method => KeyPart::Text(r.method.to_string()),
        GroupField::Status => KeyPart::Text(r.status.clone()),
    }
}

/// Mean, median and normal-approximation 95% half-width `1.96 s / sqrt(n)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub n: usize,
    pub mean: f64,
    pub median: f64,
    pub half_width: f64,
}

impl Estimate {
    /// `None` for fewer than two values. Values are sorted first, so the
    /// result does not depend on their order.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.len() < 2 {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let mean = v.iter().mean();
        let sd = v.iter().std_dev();
        let median = Data::new(v).median();
        Some(Self { n, mean, median, half_width: 1.96 * sd / (n as f64).sqrt() })
    }

    pub fn lower(&self) -> f64 {
        self.mean - self.half_width
    }

    pub fn upper(&self) -> f64 {
        self.mean + self.half_width
    }

    pub fn overlaps(&self, other: &Estimate) -> bool {
        self.lower() <= other.upper() && other.lower() <= self.upper()
    }
}

/// Metrics reported by [`summarize`].
pub const SUMMARY_METRICS: [&str; 5] = ["steps_phase1", "steps_total", "final_train_loss", "test_accuracy", "test_loss"];

fn metric(r: &RunRecord, name: &str) -> Option<f64> {
    match name {
        "steps_phase1" => r.is_ok().then_some(r.steps_phase1 as f64),
        "steps_total" => r.is_ok().then_some(r.steps_total as f64),
        "final_train_loss" => r.final_train_loss,
        "test_accuracy" => r.test_accuracy,
        "test_loss" => r.test_loss,
        _ => None,
    }
}

/// One (group, metric) row. Groups are rendered `field=value` joined by `;`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub group: String,
    pub metric: String,
    pub n: usize,
    pub mean: f64,
    pub median: f64,
    pub half_width: f64,
}

impl SummaryRow {
    pub fn estimate(&self) -> Estimate {
        Estimate { n: self.n, mean: self.mean, median: self.median, half_width: self.half_width }
    }
}

/// Per-group estimates of each metric. Every group needs at least two
/// records; metrics with fewer than two values in a group (failed cells)
/// are left out. Rows are ordered by group key, then metric.
pub fn summarize(records: &[RunRecord], group_by: &[GroupField]) -> Result<Vec<SummaryRow>> {
    let mut groups: Vec<(Vec<KeyPart>, Vec<&RunRecord>)> = Vec::new();
    for r in records {
        let key: Vec<KeyPart> = group_by.iter().map(|&f| key_part(r, f)).collect();
        match groups.iter_mut().find(|(k, _)| k.iter().zip(&key).all(|(a, b)| a.cmp(b) == CmpOrdering::Equal)) {
            Some((_, members)) => members.push(r),
            None => groups.push((key, vec![r])),
        }
    }
    groups.sort_by(|(a, _), (b, _)| {
        a.iter().zip(b).map(|(x, y)| x.cmp(y)).find(|o| *o != CmpOrdering::Equal).unwrap_or(CmpOrdering::Equal)
    });
    let label = |key: &[KeyPart]| {
        let fields: Vec<String> = group_by
            .iter()
            .zip(key)
            .map(|(f, v)| format!("{}={v}", serde_json::to_value(f).ok().and_then(|s| s.as_str().map(String::from)).unwrap_or_default()))
            .collect();
        if fields.is_empty() { "all".to_string() } else { fields.join(";") }
    };
    let mut rows = Vec::new();
    for (key, members) in &groups {
        if members.len() < 2 {
            return Err(Error::GroupTooSmall { group: label(key), size: members.len() });
        }
        for name in SUMMARY_METRICS {
            let values: Vec<f64> = members.iter().filter_map(|r| metric(r, name)).collect();
            if let Some(e) = Estimate::of(&values) {
                rows.push(SummaryRow {
                    group: label(key),
                    metric: name.into(),
                    n: e.n,
                    mean: e.mean,
                    median: e.median,
                    half_width: e.half_width,
                });
            }
        }
    }
    Ok(rows)
}

pub fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PresetName {
    FigSamplesVsRho,
    FigStepsVsRho,
    FigMuSweep,
    FigKSweep,
    FigBeyondParities,
}

impl PresetName {
    pub const ALL: [PresetName; 5] = [
        PresetName::FigSamplesVsRho,
        PresetName::FigStepsVsRho,
        PresetName::FigMuSweep,
        PresetName::FigKSweep,
        PresetName::FigBeyondParities,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PresetName::FigSamplesVsRho => "fig_samples_vs_rho",
            PresetName::FigStepsVsRho => "fig_steps_vs_rho",
            PresetName::FigMuSweep => "fig_mu_sweep",
            PresetName::FigKSweep => "fig_k_sweep",
            PresetName::FigBeyondParities => "fig_beyond_parities",
        }
    }

    /// Column added to the figure CSV.
    pub fn swept(self) -> &'static str {
        match self {
            PresetName::FigSamplesVsRho | PresetName::FigStepsVsRho => "rho",
            PresetName::FigMuSweep => "mu",
            PresetName::FigKSweep => "k",
            PresetName::FigBeyondParities => "target",
        }
    }
}

impl FromStr for PresetName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|p| p.as_str() == s).ok_or_else(|| Error::Parse(format!("unknown preset {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Paper,
    Desk,
}

impl FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Scale::Paper),
            "desk" => Ok(Scale::Desk),
            _ => Err(Error::Parse(format!("unknown scale {s:?}"))),
        }
    }
}

/// Learning rate of the desk-scale presets.
pub const DESK_LR: f64 = 0.02;
/// Loss threshold of both phases at desk scale.
pub const DESK_STOP_LOSS: f64 = 1e-2;
/// Step cap per phase at desk scale.
pub const DESK_MAX_STEPS: usize = 100_000;
/// Step cap per phase at paper scale.
pub const PAPER_MAX_STEPS: usize = 2_000_000;

fn base_config(name: PresetName, scale: Scale) -> ExperimentConfig {
    let (d, k, rho, m, arch, lr, stop1, stop2) = match scale {
        Scale::Paper => (
            100,
            5,
            vec![1e-4, 1e-3, 1e-2, 0.1, 0.5],
            vec![10_000, 30_000, 100_000, 300_000, 1_000_000],
            ArchPreset::MlpPaper,
            0.003,
            StopRule::new(1e-2, PAPER_MAX_STEPS),
            StopRule::new(1e-3, PAPER_MAX_STEPS),
        ),
        Scale::Desk => (
            50,
            4,
            vec![1e-2, 0.1, 0.5],
            vec![1_000, 3_000, 10_000, 30_000, 100_000],
            ArchPreset::MlpSmall,
            DESK_LR,
            StopRule::new(DESK_STOP_LOSS, DESK_MAX_STEPS),
            StopRule::new(DESK_STOP_LOSS, DESK_MAX_STEPS),
        ),
    };
    ExperimentConfig {
        name: name.as_str().into(),
        d,
        targets: vec![TargetSpec::Parity { k }],
        rho,
        mu: vec![0.98],
        arch,
        loss: LossKind::L2,
        optimizer: NoisySgdConfig::plain(lr, 64),
        methods: vec![Method::Standard, Method::Curriculum],
        mode: DataMode::Offline { m, passes: None },
        stop_phase1: stop1,
        stop: stop2,
        seeds: (0..10).collect(),
        master_seed: 0,
        test_samples: 10_000,
        layerwise: LayerwiseSettings::default(),
        one_step: OneStepSettings::default(),
        workers: None,
        record_wall_time: false,
        output: None,
    }
}

/// Matrices behind one figure, each with the value of its swept column
/// when that is not a record field.
#[derive(Debug, Clone, PartialEq)]
pub struct PresetPlan {
    pub name: PresetName,
    pub scale: Scale,
    pub parts: Vec<(String, ExperimentConfig)>,
}

pub fn preset_plan(name: PresetName, scale: Scale) -> PresetPlan {
    let base = base_config(name, scale);
    let rho_small = vec![1e-2];
    let parts = match name {
        PresetName::FigSamplesVsRho => vec![("main".to_string(), base)],
        PresetName::FigStepsVsRho => vec![("main".to_string(), ExperimentConfig { mode: DataMode::FreshBatch, ..base })],
        PresetName::FigMuSweep => vec![(
            "main".to_string(),
            ExperimentConfig { rho: rho_small, mu: vec![0.02, 0.5, 0.9, 0.98], ..base },
        )],
        PresetName::FigKSweep => {
            let ks: Vec<usize> = match scale {
                Scale::Paper => vec![3, 4, 5, 6, 7],
                Scale::Desk => vec![2, 3, 4, 5],
            };
            let targets = ks.into_iter().map(|k| TargetSpec::Parity { k }).collect();
            vec![("main".to_string(), ExperimentConfig { rho: rho_small, targets, ..base })]
        }
        PresetName::FigBeyondParities => {
            let mut parts = Vec::new();
            for target in [TargetSpec::FLeft, TargetSpec::FMiddle, TargetSpec::FRight] {
                let mut cfg = ExperimentConfig { rho: rho_small.clone(), targets: vec![target], ..base.clone() };
                if target == TargetSpec::FMiddle {
                    cfg.stop.loss_threshold = 0.26;
                }
                parts.push((target.label(), cfg.clone()));
                parts.push((format!("{}_fresh", target.label()), ExperimentConfig { mode: DataMode::FreshBatch, ..cfg }));
            }
            parts
        }
    };
    PresetPlan { name, scale, parts }
}

/// The CSV fields of one record, as the run files write them.
fn record_fields(r: &RunRecord) -> Result<csv::StringRecord> {
    let mut buf = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    buf.serialize(r)?;
    let bytes = buf.into_inner().map_err(|e| Error::Parse(e.to_string()))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(false).from_reader(bytes.as_slice());
    Ok(reader.records().next().transpose()?.unwrap_or_default())
}

fn swept_value(name: PresetName, label: &str, r: &RunRecord) -> String {
    match name {
        PresetName::FigSamplesVsRho | PresetName::FigStepsVsRho => r.rho.to_string(),
        PresetName::FigMuSweep => r.mu.to_string(),
        PresetName::FigKSweep => r.k.to_string(),
        PresetName::FigBeyondParities => label.trim_end_matches("_fresh").to_string(),
    }
}

/// Runs every part of a preset into `out_dir/<name>_<scale>_<part>.csv`
/// (resumable), then writes `out_dir/<name>_<scale>.csv`: the run records
/// plus the swept column. Returns the figure CSV path.
pub fn reproduce_preset(name: PresetName, scale: Scale, out_dir: &Path, seeds: Option<Vec<u64>>) -> Result<PathBuf> {
    fs::create_dir_all(out_dir)?;
    let plan = preset_plan(name, scale);
    let scale_tag = match scale {
        Scale::Paper => "paper",
        Scale::Desk => "desk",
    };
    let fig_path = out_dir.join(format!("{}_{scale_tag}.csv", name.as_str()));
    let mut w = csv::Writer::from_path(&fig_path)?;
    let mut header: Vec<&str> = RUN_RECORD_FIELDS.to_vec();
    header.push(name.swept());
    header.push("part");
    w.write_record(&header)?;
    for (label, mut cfg) in plan.parts {
        if let Some(s) = &seeds {
            cfg.seeds = s.clone();
        }
        let part_path = out_dir.join(format!("{}_{scale_tag}_{label}.csv", name.as_str()));
        let records = run_matrix(&cfg, Some(&part_path))?;
        for r in &records {
            let mut row = record_fields(r)?;
            row.push_field(&swept_value(name, &label, r));
            row.push_field(&label);
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(fig_path)
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::collection::vec;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;

    fn any_record() -> impl Strategy<Value = RunRecord> {
        (
            (0usize..1000, any::<u64>(), prop_oneof![Just(0.01), Just(0.5)], 0.0..=1.0f64, 1usize..7),
            (prop_oneof![Just(Method::Standard), Just(Method::Curriculum)], 0usize..1000, 0usize..100_000),
            (proptest::option::of(0.0..10.0f64), proptest::option::of(0.0..=1.0f64), proptest::option::of(any::<u64>())),
            "[a-zA-Z]{1,12}",
        )
            .prop_map(|((run_id, seed, rho, mu, k), (method, p1, extra), (loss, acc, ms), status)| RunRecord {
                run_id,
                seed,
                rho,
                mu,
                d: 20,
                k,
                m: 0,
                method,
                steps_phase1: p1,
                steps_total: p1 + extra,
                final_train_loss: loss,
                test_accuracy: acc,
                test_loss: loss.map(|l| l / 3.0),
                wall_time_ms: ms,
                status,
            })
    }

    proptest! {
        #[test]
        fn summary_ignores_record_order(mut recs in vec(any_record(), 8..30), seed: u64) {
            let group = [GroupField::Rho, GroupField::Method];
            let before = summarize(&recs, &group);
            recs.shuffle(&mut crate::rng::seeded(seed));
            let after = summarize(&recs, &group);
            match (before, after) {
                (Ok(a), Ok(b)) => prop_assert_eq!(a, b),
                (Err(_), Err(_)) => {}
                (a, b) => prop_assert!(false, "{a:?} vs {b:?}"),
            }
        }

        #[test]
        fn csv_round_trips(recs in vec(any_record(), 0..20)) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("runs.csv");
            write_records(&path, &recs).unwrap();
            prop_assert_eq!(read_records(&path).unwrap(), recs);
        }
    }
}
