//! Experiment matrices: config files, per-cell training with on-disk
//! artifacts, the run manifest, and the analysis pass over finished runs.
//!
//! Layout under the output root:
//!
//! ```text
//! experiment.toml               copy of the last config trained into this root
//! manifest.json                 every cell, sorted by (slug, seed)
//! <slug>/<seed>/run.jsonl       episode and update events
//! <slug>/<seed>/checkpoint.bin  final parameters and RNG positions
//! <slug>/<seed>/entry.json      this cell's manifest entry
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{aggregate_runs, cka_heatmap, representations, AggregateOptions, LabelledRepresentation, ProbeSet, RunStatistics};
use crate::backbone::{BackboneConfig, BackboneKind, Topology};
use crate::checkpoint::Checkpoint;
use crate::env::{render_frame, Action, Pong, PongConfig, TrajectoryRecord};
use crate::error::{Error, Result};
use crate::nn::Categorical;
use crate::ppo::{train, Agent, EpisodeRecord, PpoConfig, RunEvent, RunRecord, TrainSetup};

pub const ENGINE_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const OUT_ENV_VAR: &str = "QPONG_OUT";
pub const DEFAULT_OUT: &str = "runs";

const MANIFEST: &str = "manifest.json";
const CONFIG_COPY: &str = "experiment.toml";
const LOG: &str = "run.jsonl";
const CHECKPOINT: &str = "checkpoint.bin";
const ENTRY: &str = "entry.json";

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneSection {
    /// Parameters of cell `seed` are drawn from `seed + init_seed_offset`.
    pub init_seed_offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixSection {
    pub seeds: Vec<u64>,
    pub configs: Vec<BackboneConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisSection {
    pub ema_alpha: f64,
    pub tail_fraction: f64,
    pub probe_count: usize,
    pub probe_seed: u64,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        let agg = AggregateOptions::default();
        Self { ema_alpha: agg.ema_alpha, tail_fraction: agg.tail_fraction, probe_count: 2048, probe_seed: 12345 }
    }
}

impl AnalysisSection {
    pub fn aggregate_options(&self) -> AggregateOptions {
        AggregateOptions { ema_alpha: self.ema_alpha, tail_fraction: self.tail_fraction }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub environment: PongConfig,
    #[serde(default)]
    pub backbone: BackboneSection,
    #[serde(default)]
    pub ppo: PpoConfig,
    pub matrix: MatrixSection,
    #[serde(default)]
    pub analysis: AnalysisSection,
}

/// One (backbone, seed) cell of the matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub backbone: BackboneConfig,
    pub seed: u64,
}

impl Cell {
    pub fn slug(&self) -> String {
        self.backbone.slug()
    }

    pub fn dir(&self, out: &Path) -> PathBuf {
        out.join(self.slug()).join(self.seed.to_string())
    }
}

#[derive(Serialize)]
struct CellIdentity<'a> {
    environment: &'a PongConfig,
    backbone: &'a BackboneConfig,
    init_seed_offset: u64,
    ppo: &'a PpoConfig,
    seed: u64,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Checks every section and returns `(slug, parameter count)` per config.
    pub fn validate(&self) -> Result<Vec<(String, usize)>> {
        self.environment.validate()?;
        self.ppo.validate()?;
        let a = &self.analysis;
        if !(a.ema_alpha > 0.0 && a.ema_alpha < 1.0) {
            return Err(Error::config(format!("analysis.ema_alpha must lie in (0, 1), got {}", a.ema_alpha)));
        }
        if !(a.tail_fraction > 0.0 && a.tail_fraction <= 1.0) {
            return Err(Error::config(format!("analysis.tail_fraction must lie in (0, 1], got {}", a.tail_fraction)));
        }
        if a.probe_count < 2 {
            return Err(Error::config("analysis.probe_count must be at least 2"));
        }
        if self.matrix.seeds.is_empty() || self.matrix.configs.is_empty() {
            return Err(Error::config("matrix needs at least one seed and one config"));
        }
        if self.matrix.seeds.iter().collect::<BTreeSet<_>>().len() != self.matrix.seeds.len() {
            return Err(Error::config("matrix.seeds contains duplicates"));
        }
        let mut seen = BTreeSet::new();
        let mut out = Vec::with_capacity(self.matrix.configs.len());
        for c in &self.matrix.configs {
            c.validate()?;
            let slug = c.slug();
            if !seen.insert(slug.clone()) {
                return Err(Error::config(format!("matrix.configs lists {slug} twice")));
            }
            out.push((slug, c.parameter_count()));
        }
        Ok(out)
    }

    /// Cells in config-major order.
    pub fn cells(&self) -> Vec<Cell> {
        self.matrix
            .configs
            .iter()
            .flat_map(|&backbone| self.matrix.seeds.iter().map(move |&seed| Cell { backbone, seed }))
            .collect()
    }

    /// SHA-256 over everything that determines a cell's outcome.
    pub fn cell_hash(&self, cell: &Cell) -> Result<[u8; 32]> {
        let id = CellIdentity {
            environment: &self.environment,
            backbone: &cell.backbone,
            init_seed_offset: self.backbone.init_seed_offset,
            ppo: &self.ppo,
            seed: cell.seed,
        };
        Ok(Sha256::digest(serde_json::to_vec(&id)?).into())
    }
}

/// `--out`, then the config's `output_dir`, then `$QPONG_OUT`, then `runs`.
pub fn resolve_output_root(flag: Option<&Path>, config: Option<&ExperimentConfig>) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    if let Some(p) = config.and_then(|c| c.output_dir.clone()) {
        return p;
    }
    match std::env::var_os(OUT_ENV_VAR) {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => PathBuf::from(DEFAULT_OUT),
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub slug: String,
    pub backbone: BackboneConfig,
    pub seed: u64,
    pub config_hash: String,
    pub status: RunStatus,
    /// Paths relative to the output root.
    pub log: String,
    pub checkpoint: Option<String>,
    pub entry: String,
    pub parameter_count: usize,
    pub global_step: u64,
    pub episodes: usize,
    pub wall_clock_secs: f64,
    pub engine_version: String,
    pub error: Option<String>,
}

impl ManifestEntry {
    pub fn artifact_paths(&self) -> Vec<&str> {
        let mut v = vec![self.log.as_str(), self.entry.as_str()];
        v.extend(self.checkpoint.as_deref());
        v
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn read(out: &Path) -> Result<Self> {
        let path = out.join(MANIFEST);
        match fs::read(&path) {
            Ok(bytes) => Ok(serde_json::from_slice(&bytes)?),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Self::default()),
            Err(e) => Err(Error::io(path, e)),
        }
    }

    pub fn completed(&self) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(|e| e.status == RunStatus::Completed)
    }

    fn upsert(&mut self, entry: ManifestEntry) {
        self.entries.retain(|e| !(e.slug == entry.slug && e.seed == entry.seed));
        self.entries.push(entry);
        self.entries.sort_by(|a, b| (&a.slug, a.seed).cmp(&(&b.slug, b.seed)));
    }

    fn write(&self, out: &Path) -> Result<()> {
        write_atomic(&out.join(MANIFEST), &pretty_json(self)?)
    }
}

fn pretty_json<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(v)?;
    bytes.push(b'\n');
    Ok(bytes)
}

/// Writes through a temporary file in the same directory and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

fn rel(out: &Path, path: &Path) -> String {
    path.strip_prefix(out).unwrap_or(path).to_string_lossy().replace('\\', "/")
}

/// Runs one cell to completion, streaming events into the sink.
pub type CellRunner = dyn Fn(&ExperimentConfig, &Cell, &mut dyn FnMut(&RunEvent) -> Result<()>) -> Result<RunRecord> + Sync;

pub fn default_runner(cfg: &ExperimentConfig, cell: &Cell, sink: &mut dyn FnMut(&RunEvent) -> Result<()>) -> Result<RunRecord> {
    let setup = TrainSetup {
        backbone: cell.backbone,
        ppo: &cfg.ppo,
        env: &cfg.environment,
        seed: cell.seed,
        init_seed_offset: cfg.backbone.init_seed_offset,
    };
    train(&setup, sink)
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Substring matched against `<slug>/<seed>`.
    pub filter: Option<String>,
    pub jobs: usize,
    pub force: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub completed: Vec<String>,
    pub skipped: Vec<String>,
    pub failed: Vec<(String, String)>,
}

fn is_done(out: &Path, entry: Option<&ManifestEntry>, hash: &str) -> bool {
    entry.is_some_and(|e| {
        e.status == RunStatus::Completed
            && e.config_hash == hash
            && e.artifact_paths().iter().all(|p| out.join(p).is_file())
    })
}

fn run_cell(cfg: &ExperimentConfig, cell: &Cell, hash: [u8; 32], out: &Path, runner: &CellRunner) -> ManifestEntry {
    let dir = cell.dir(out);
    let log_path = dir.join(LOG);
    let ckpt_path = dir.join(CHECKPOINT);
    let entry_path = dir.join(ENTRY);
    let started = Instant::now();
    let result = (|| -> Result<RunRecord> {
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let _ = fs::remove_file(&ckpt_path);
        let file = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
        let mut w = BufWriter::new(file);
        let record = runner(cfg, cell, &mut |ev: &RunEvent| {
            serde_json::to_writer(&mut w, ev)?;
            w.write_all(b"\n").map_err(|e| Error::io(&log_path, e))
        });
        w.flush().map_err(|e| Error::io(&log_path, e))?;
        let record = record?;
        Checkpoint { config_hash: hash, params: record.params.clone(), rng_states: record.rng_states.clone() }
            .write(&ckpt_path)?;
        Ok(record)
    })();
    let (status, checkpoint, global_step, episodes, error) = match &result {
        Ok(r) => (RunStatus::Completed, Some(rel(out, &ckpt_path)), r.global_step, r.episodes.len(), None),
        Err(e) => (RunStatus::Failed, None, 0, 0, Some(e.to_string())),
    };
    ManifestEntry {
        slug: cell.slug(),
        backbone: cell.backbone,
        seed: cell.seed,
        config_hash: hex(&hash),
        status,
        log: rel(out, &log_path),
        checkpoint,
        entry: rel(out, &entry_path),
        parameter_count: cell.backbone.parameter_count(),
        global_step,
        episodes,
        wall_clock_secs: started.elapsed().as_secs_f64(),
        engine_version: ENGINE_VERSION.to_string(),
        error,
    }
}

/// Trains every selected cell that is not already complete. A failing cell
/// is recorded as failed in the manifest; the others still run.
pub fn cmd_train(cfg: &ExperimentConfig, out: &Path, opts: &TrainOptions) -> Result<TrainReport> {
    cmd_train_with(cfg, out, opts, &default_runner)
}

pub fn cmd_train_with(cfg: &ExperimentConfig, out: &Path, opts: &TrainOptions, runner: &CellRunner) -> Result<TrainReport> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_atomic(&out.join(CONFIG_COPY), cfg.to_toml()?.as_bytes())?;
    let manifest = Mutex::new(Manifest::read(out)?);
    let mut report = TrainReport::default();
    let mut todo = Vec::new();
    for cell in cfg.cells() {
        let name = format!("{}/{}", cell.slug(), cell.seed);
        if opts.filter.as_deref().is_some_and(|f| !name.contains(f)) {
            continue;
        }
        let hash = cfg.cell_hash(&cell)?;
        let done = {
            let m = manifest.lock().expect("manifest lock");
            is_done(out, m.entries.iter().find(|e| e.slug == cell.slug() && e.seed == cell.seed), &hex(&hash))
        };
        if done && !opts.force {
            report.skipped.push(name);
        } else {
            todo.push((name, cell, hash));
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs.max(1))
        .build()
        .map_err(|e| Error::usage(format!("cannot start worker pool: {e}")))?;
    let results: Vec<Result<(String, ManifestEntry)>> = pool.install(|| {
        todo.par_iter()
            .map(|(name, cell, hash)| {
                let entry = run_cell(cfg, cell, *hash, out, runner);
                write_atomic(&out.join(&entry.entry), &pretty_json(&entry)?)?;
                let mut m = manifest.lock().expect("manifest lock");
                m.upsert(entry.clone());
                m.write(out)?;
                Ok((name.clone(), entry))
            })
            .collect()
    });
    manifest.into_inner().expect("manifest lock").write(out)?;
    for r in results {
        let (name, entry) = r?;
        match entry.error {
            None => report.completed.push(name),
            Some(err) => report.failed.push((name, err)),
        }
    }
    Ok(report)
}

/// Reads the events of one run log.
pub fn read_run_log(path: &Path) -> Result<Vec<RunEvent>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}

fn episodes_of(events: &[RunEvent]) -> Vec<EpisodeRecord> {
    events
        .iter()
        .filter_map(|e| match e {
            RunEvent::Episode(r) => Some(*r),
            RunEvent::Update(_) => None,
        })
        .collect()
}

/// Orders configs the way the results table lists them: kind, then size.
fn table_order(c: &BackboneConfig) -> (usize, usize, usize) {
    let kind = match c.kind() {
        BackboneKind::Separable => 0,
        BackboneKind::CzEntangled => 1,
        BackboneKind::IsingZzEntangled => 2,
        BackboneKind::ClassicalMlp => 3,
    };
    let size = match *c {
        BackboneConfig::ClassicalMlp { hidden } => hidden,
        _ => c.layers().unwrap_or(0),
    };
    let topo = match *c {
        BackboneConfig::CzEntangled { topology: Topology::Chain, .. }
        | BackboneConfig::IsingZzEntangled { topology: Topology::Chain, .. } => 1,
        _ => 0,
    };
    (kind, size, topo)
}

/// One line of `summary.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub slug: String,
    pub backbone: BackboneConfig,
    pub stats: RunStatistics,
}

impl SummaryRow {
    pub const HEADER: &'static str = "backbone,slug,param_num,param_breakdown,runs,final_return_mean,final_return_std,final_return_max";

    pub fn param_breakdown(&self) -> String {
        let n = self.backbone.parameter_count();
        match self.backbone {
            BackboneConfig::ClassicalMlp { hidden } => format!("8x{hidden}+{hidden}x8"),
            _ => format!("{}x{}", self.backbone.params_per_layer().unwrap_or(n), self.backbone.layers().unwrap_or(1)),
        }
    }

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{:.4},{:.4},{}",
            self.backbone.kind().label(),
            self.slug,
            self.backbone.parameter_count(),
            self.param_breakdown(),
            self.stats.runs,
            self.stats.return_mean,
            self.stats.return_std,
            self.stats.return_max
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisReport {
    pub rows: Vec<SummaryRow>,
    pub files: Vec<PathBuf>,
    pub degenerate: Vec<String>,
}

fn completed_entries(out: &Path) -> Result<Vec<ManifestEntry>> {
    let mut entries = Vec::new();
    let slugs = match fs::read_dir(out) {
        Ok(d) => d,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::usage(format!("output directory {} does not exist", out.display())))
        }
        Err(e) => return Err(Error::io(out, e)),
    };
    for slug in slugs {
        let slug = slug.map_err(|e| Error::io(out, e))?.path();
        if !slug.is_dir() {
            continue;
        }
        for seed in fs::read_dir(&slug).map_err(|e| Error::io(&slug, e))? {
            let path = seed.map_err(|e| Error::io(&slug, e))?.path().join(ENTRY);
            if path.is_file() {
                let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
                let entry: ManifestEntry = serde_json::from_slice(&bytes)?;
                if entry.status == RunStatus::Completed {
                    entries.push(entry);
                }
            }
        }
    }
    entries.sort_by(|a, b| (table_order(&a.backbone), a.seed).cmp(&(table_order(&b.backbone), b.seed)));
    Ok(entries)
}

fn analysis_config(out: &Path) -> Result<(PongConfig, AnalysisSection)> {
    let path = out.join(CONFIG_COPY);
    if path.is_file() {
        let cfg = ExperimentConfig::load(&path)?;
        Ok((cfg.environment, cfg.analysis))
    } else {
        Ok((PongConfig::default(), AnalysisSection::default()))
    }
}

/// Aggregates every completed run under `out` into summary and curve CSVs,
/// and compares all final backbones on a shared probe set with linear CKA.
pub fn cmd_analyze(out: &Path) -> Result<AnalysisReport> {
    let entries = completed_entries(out)?;
    if entries.is_empty() {
        return Err(Error::usage(format!("no completed runs under {}", out.display())));
    }
    let (env_cfg, analysis) = analysis_config(out)?;
    let opts = analysis.aggregate_options();

    let mut groups: BTreeMap<(usize, usize, usize), (BackboneConfig, Vec<&ManifestEntry>)> = BTreeMap::new();
    for e in &entries {
        groups.entry(table_order(&e.backbone)).or_insert_with(|| (e.backbone, Vec::new())).1.push(e);
    }

    let mut files = Vec::new();
    let mut summary = format!("{}\n", SummaryRow::HEADER);
    let mut lengths = String::from("backbone,slug,runs,length_mean,length_std,length_min,length_max\n");
    let curves_dir = out.join("curves");
    let mut rows = Vec::new();
    for (backbone, members) in groups.values() {
        let slug = backbone.slug();
        let runs = members
            .iter()
            .map(|e| read_run_log(&out.join(&e.log)).map(|ev| episodes_of(&ev)))
            .collect::<Result<Vec<_>>>()?;
        let agg = match aggregate_runs(&runs, &opts) {
            Ok(a) => a,
            Err(Error::Usage(msg)) => return Err(Error::usage(format!("{slug}: {msg}"))),
            Err(e) => return Err(e),
        };
        let row = SummaryRow { slug: slug.clone(), backbone: *backbone, stats: agg.stats };
        summary.push_str(&row.to_csv());
        summary.push('\n');
        let s = &agg.stats;
        let _ = writeln!(
            lengths,
            "{},{},{},{:.4},{:.4},{},{}",
            backbone.kind().label(),
            slug,
            s.runs,
            s.length_mean,
            s.length_std,
            s.length_min,
            s.length_max
        );
        let mut curve = String::from("step,mean,min,max\n");
        for p in &agg.curve {
            let _ = writeln!(curve, "{},{:.6},{:.6},{:.6}", p.step, p.mean, p.min, p.max);
        }
        let path = curves_dir.join(format!("{slug}.csv"));
        write_atomic(&path, curve.as_bytes())?;
        files.push(path);
        rows.push(row);
    }
    for (name, body) in [("summary.csv", summary), ("episode_lengths.csv", lengths)] {
        let path = out.join(name);
        write_atomic(&path, body.as_bytes())?;
        files.push(path);
    }

    let probes = ProbeSet::collect(&env_cfg, analysis.probe_count, analysis.probe_seed)?;
    let reps = entries
        .par_iter()
        .map(|e| {
            let ckpt_rel = e.checkpoint.as_deref().ok_or_else(|| Error::config(format!("{} has no checkpoint", e.entry)))?;
            let ckpt = Checkpoint::read(&out.join(ckpt_rel))?;
            if hex(&ckpt.config_hash) != e.config_hash {
                return Err(Error::config(format!("{ckpt_rel} does not match its manifest entry")));
            }
            let agent = Agent::new(e.backbone)?;
            if ckpt.params.len() != agent.num_params() {
                return Err(Error::config(format!(
                    "{ckpt_rel} holds {} parameters, {} expects {}",
                    ckpt.params.len(),
                    e.slug,
                    agent.num_params()
                )));
            }
            let (bb, _, _) = agent.split(&ckpt.params);
            Ok(LabelledRepresentation {
                label: format!("{}/{}", e.slug, e.seed),
                group: e.slug.clone(),
                matrix: representations(agent.backbone(), bb, &probes)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let heatmap = cka_heatmap(&reps)?;
    for (name, bytes) in [("probes.json", pretty_json(&probes)?), ("cka.json", pretty_json(&heatmap)?)] {
        let path = out.join(name);
        write_atomic(&path, &bytes)?;
        files.push(path);
    }
    Ok(AnalysisReport { rows, files, degenerate: heatmap.degenerate })
}

pub fn read_trajectory(path: &Path) -> Result<Vec<TrajectoryRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}

pub fn write_trajectory(path: &Path, records: &[TrajectoryRecord]) -> Result<()> {
    let mut body = Vec::new();
    for r in records {
        serde_json::to_writer(&mut body, r)?;
        body.push(b'\n');
    }
    write_atomic(path, &body)
}

/// Plays one greedy episode with the checkpoint stored in `run_dir`.
pub fn record_episode(run_dir: &Path, env_seed: u64) -> Result<Vec<TrajectoryRecord>> {
    let entry_path = run_dir.join(ENTRY);
    let bytes = fs::read(&entry_path).map_err(|e| Error::io(&entry_path, e))?;
    let entry: ManifestEntry = serde_json::from_slice(&bytes)?;
    let ckpt = Checkpoint::read(&run_dir.join(CHECKPOINT))?;
    let root = run_dir.parent().and_then(Path::parent).unwrap_or(run_dir);
    let (env_cfg, _) = analysis_config(root)?;
    let agent = Agent::new(entry.backbone)?;
    if ckpt.params.len() != agent.num_params() {
        return Err(Error::config(format!("checkpoint does not fit {}", entry.slug)));
    }
    let mut env = Pong::new(env_cfg, env_seed)?;
    let mut obs = env.observation();
    let mut out = Vec::new();
    loop {
        let a = Categorical::new(agent.evaluate(&ckpt.params, &obs)?.logits)?.mode();
        let step = env.step(Action::from_index(a)?)?;
        out.push(TrajectoryRecord { obs, action: a as u8, reward: step.reward, done: step.done() });
        obs = step.observation;
        if step.done() {
            return Ok(out);
        }
    }
}

/// Text frames for a trajectory, every `stride`-th step plus the last.
pub fn render_trajectory(records: &[TrajectoryRecord], stride: usize, width: usize, height: usize) -> String {
    let stride = stride.max(1);
    let mut out = String::new();
    for (i, r) in records.iter().enumerate() {
        if i % stride == 0 || i + 1 == records.len() {
            let _ = writeln!(out, "step {i} action {} reward {}", r.action, r.reward);
            out.push_str(&render_frame(&r.obs, width, height));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = r#"
[ppo]
num_envs = 2
num_steps = 8
num_minibatches = 2
update_epochs = 1
total_timesteps = 32

[matrix]
seeds = [0, 1]

[[matrix.configs]]
kind = "cz-entangled"
layers = 1

[[matrix.configs]]
kind = "classical-mlp"
hidden = 4
"#;

    #[test]
    fn parse_validate_roundtrip() {
        let cfg = ExperimentConfig::from_toml(SMALL).unwrap();
        let counts = cfg.validate().unwrap();
        assert_eq!(counts, vec![("cz-entangled-l1".to_string(), 48), ("classical-mlp-h4".to_string(), 64)]);
        let again = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(cfg.cells().len(), 4);
    }

    #[test]
    fn unknown_keys_rejected() {
        let bad = SMALL.replace("[ppo]", "[ppo]\nlearning_rat = 0.1");
        assert!(matches!(ExperimentConfig::from_toml(&bad), Err(Error::Toml(_))));
        let bad = format!("bogus = 1\n{SMALL}");
        assert!(ExperimentConfig::from_toml(&bad).is_err());
    }

    #[test]
    fn duplicates_rejected() {
        let mut cfg = ExperimentConfig::from_toml(SMALL).unwrap();
        cfg.matrix.seeds = vec![3, 3];
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::from_toml(SMALL).unwrap();
        cfg.matrix.configs.push(BackboneConfig::cz(1));
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn hash_separates_cells() {
        let cfg = ExperimentConfig::from_toml(SMALL).unwrap();
        let cells = cfg.cells();
        let hashes: BTreeSet<_> = cells.iter().map(|c| cfg.cell_hash(c).unwrap()).collect();
        assert_eq!(hashes.len(), cells.len());
        let mut other = cfg.clone();
        other.ppo.learning_rate *= 2.0;
        assert_ne!(cfg.cell_hash(&cells[0]).unwrap(), other.cell_hash(&cells[0]).unwrap());
    }

    #[test]
    fn output_root_priority() {
        let mut cfg = ExperimentConfig::from_toml(SMALL).unwrap();
        assert_eq!(resolve_output_root(Some(Path::new("a")), Some(&cfg)), PathBuf::from("a"));
        cfg.output_dir = Some("b".into());
        assert_eq!(resolve_output_root(None, Some(&cfg)), PathBuf::from("b"));
    }

    #[test]
    fn empty_dir_is_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(cmd_analyze(dir.path()), Err(Error::Usage(_))));
        assert!(matches!(cmd_analyze(&dir.path().join("missing")), Err(Error::Usage(_))));
    }
}
