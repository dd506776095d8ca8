//! Experiment management: resolved specs, run directories, comparisons and
//! latency profiles.
//!
//! Layout under the output directory:
//!
//! ```text
//! scheme{S}/seed{N}/              base runs
//! pmax_{W}/scheme{S}/seed{N}/     transmit-power sweep
//! tr_{T}/scheme{S}/seed{N}/       surface update-period sweep
//! compare/                        tables, plot data, render script
//! ```
//!
//! Each run directory holds `config.json` (resolved config and its SHA-256),
//! `metrics.csv`, `checkpoint/` and, once finished, `complete.json`.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::env::{Environment, ScenarioConfig, Scheme};
use crate::error::{Error, Result};
use crate::hdrl::{evaluate, AgentRoster, EpisodeMetrics, EvalReport, LatencyRow, LatencyStats, TrainConfig, Trainer};

/// Environment variable bounding the run worker pool.
pub const WORKERS_ENV: &str = "SIXDMA_WORKERS";

/// Episodes averaged when reading a converged value off a metrics file.
pub const CONVERGED_WINDOW: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub scenario: ScenarioConfig,
    /// `scheme` and `seed` inside are replaced per run.
    pub train: TrainConfig,
    pub schemes: Vec<Scheme>,
    pub seeds: Vec<u64>,
    pub sweep_pmax_w: Vec<f64>,
    pub sweep_update_period: Vec<usize>,
    pub output_dir: PathBuf,
    /// Episodes between checkpoints.
    pub checkpoint_every: usize,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            scenario: ScenarioConfig::default(),
            train: TrainConfig::default(),
            schemes: Scheme::ALL.to_vec(),
            seeds: vec![0],
            sweep_pmax_w: Vec::new(),
            sweep_update_period: Vec::new(),
            output_dir: PathBuf::from("runs"),
            checkpoint_every: 50,
        }
    }
}

impl ExperimentSpec {
    /// Reduced scenario and training settings.
    pub fn desk_scale() -> Self {
        Self {
            scenario: ScenarioConfig::desk_scale(),
            train: TrainConfig::desk_scale(),
            schemes: vec![Scheme::Proposed, Scheme::Fixed],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        self.train.validate()?;
        if self.schemes.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("at least one scheme and one seed are required".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint_every must be positive".into()));
        }
        if let Some(p) = self.sweep_pmax_w.iter().find(|p| !(**p > 0.0 && p.is_finite())) {
            return Err(Error::Config(format!("transmit-power sweep value {p} must be positive")));
        }
        let k = self.scenario.num_slots;
        if let Some(t) = self.sweep_update_period.iter().find(|&&t| t == 0 || !k.is_multiple_of(t)) {
            return Err(Error::Config(format!("update period {t} does not divide K = {k}")));
        }
        Ok(())
    }

    /// Every run implied by the spec: base runs, then the power sweep, then
    /// the update-period sweep.
    pub fn runs(&self) -> Vec<RunKey> {
        let mut runs = Vec::new();
        let mut add = |sweep: Sweep| {
            for &scheme in &self.schemes {
                for &seed in &self.seeds {
                    runs.push(RunKey { scheme, seed, sweep });
                }
            }
        };
        add(Sweep::Base);
        for &p in &self.sweep_pmax_w {
            add(Sweep::PMax(p));
        }
        for &t in &self.sweep_update_period {
            add(Sweep::UpdatePeriod(t));
        }
        runs
    }

    pub fn resolve(&self, key: &RunKey) -> ResolvedRun {
        let mut scenario = self.scenario.clone();
        match key.sweep {
            Sweep::Base => {}
            Sweep::PMax(p) => scenario.p_max_w = p,
            Sweep::UpdatePeriod(t) => scenario.update_period = t,
        }
        let train = TrainConfig {
            scheme: key.scheme,
            seed: key.seed,
            ..self.train.clone()
        };
        ResolvedRun { scenario, train }
    }

    pub fn run_dir(&self, key: &RunKey) -> PathBuf {
        self.output_dir.join(key.relative_dir())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Sweep {
    Base,
    PMax(f64),
    UpdatePeriod(usize),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RunKey {
    pub scheme: Scheme,
    pub seed: u64,
    pub sweep: Sweep,
}

impl RunKey {
    pub fn relative_dir(&self) -> PathBuf {
        let leaf = PathBuf::from(format!("scheme{}", self.scheme.id())).join(format!("seed{}", self.seed));
        match self.sweep {
            Sweep::Base => leaf,
            Sweep::PMax(p) => PathBuf::from(format!("pmax_{p}")).join(leaf),
            Sweep::UpdatePeriod(t) => PathBuf::from(format!("tr_{t}")).join(leaf),
        }
    }
}

/// Fully resolved configuration of one run; echoed into `config.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResolvedRun {
    pub scenario: ScenarioConfig,
    pub train: TrainConfig,
}

impl ResolvedRun {
    /// SHA-256 of the canonical JSON encoding.
    pub fn content_hash(&self) -> Result<String> {
        let bytes = serde_json::to_vec(self)?;
        Ok(hex::encode(Sha256::digest(&bytes)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RunConfigFile {
    config: ResolvedRun,
    sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CompleteMarker {
    episodes: usize,
    sha256: String,
}

/// Reads the resolved configuration echoed into a run directory.
pub fn read_run_config(run_dir: &Path) -> Result<ResolvedRun> {
    let file: RunConfigFile = read_json(&run_dir.join("config.json"))?;
    if file.config.content_hash()? != file.sha256 {
        return Err(Error::Config(format!("{} does not match its recorded hash", run_dir.display())));
    }
    Ok(file.config)
}

/// CLI-level overrides applied on top of a spec file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub desk: bool,
    pub schemes: Option<Vec<Scheme>>,
    pub seeds: Option<Vec<u64>>,
    pub episodes: Option<usize>,
    pub output_dir: Option<PathBuf>,
    pub sweep_pmax_w: Option<Vec<f64>>,
    pub sweep_update_period: Option<Vec<usize>>,
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, p) => *b = p,
    }
}

/// Defaults (optionally the desk preset), then the JSON file, then flags.
pub fn resolve_spec(config_json: Option<&str>, overrides: &Overrides) -> Result<ExperimentSpec> {
    let base = if overrides.desk {
        ExperimentSpec::desk_scale()
    } else {
        ExperimentSpec::default()
    };
    let mut value = serde_json::to_value(&base)?;
    if let Some(text) = config_json {
        let patch: Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("config file: {e}")))?;
        merge(&mut value, patch);
    }
    let mut spec: ExperimentSpec =
        serde_json::from_value(value).map_err(|e| Error::Config(format!("config file: {e}")))?;
    if let Some(s) = &overrides.schemes {
        spec.schemes = s.clone();
    }
    if let Some(s) = &overrides.seeds {
        spec.seeds = s.clone();
    }
    if let Some(e) = overrides.episodes {
        spec.train.episodes = e;
    }
    if let Some(o) = &overrides.output_dir {
        spec.output_dir = o.clone();
    }
    if let Some(p) = &overrides.sweep_pmax_w {
        spec.sweep_pmax_w = p.clone();
    }
    if let Some(t) = &overrides.sweep_update_period {
        spec.sweep_update_period = t.clone();
    }
    spec.validate()?;
    Ok(spec)
}

/// Worker count from [`WORKERS_ENV`], defaulting to the available cores.
pub fn worker_count() -> Result<usize> {
    match std::env::var(WORKERS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::Config(format!("{WORKERS_ENV} must be a positive integer, got '{v}'"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Trained,
    Resumed,
    Skipped,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub status: RunStatus,
    pub episodes: usize,
}

pub fn write_metrics_csv(path: &Path, num_uavs: usize, rows: &[EpisodeMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(EpisodeMetrics::csv_header(num_uavs))?;
    for r in rows {
        w.write_record(r.csv_record())?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<EpisodeMetrics>> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    let num_uavs = header.iter().filter(|h| h.starts_with("reward_uav")).count();
    if header.iter().collect::<Vec<_>>() != EpisodeMetrics::csv_header(num_uavs) {
        return Err(Error::InvalidArgument(format!("{} has an unexpected header", path.display())));
    }
    r.records()
        .map(|rec| {
            let rec = rec?;
            let fields: Vec<String> = rec.iter().map(String::from).collect();
            EpisodeMetrics::from_csv_record(&fields, num_uavs)
        })
        .collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Trains (or resumes) one run into `dir`.
pub fn train_run(run: &ResolvedRun, dir: &Path, checkpoint_every: usize, resume: bool) -> Result<RunOutcome> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let hash = run.content_hash()?;
    let ckpt_dir = dir.join("checkpoint");
    let metrics_path = dir.join("metrics.csv");
    let complete_path = dir.join("complete.json");
    let config_path = dir.join("config.json");
    let m = run.scenario.num_uavs;

    let same_config = || -> bool {
        read_json::<RunConfigFile>(&config_path).is_ok_and(|c| c.sha256 == hash)
    };
    if resume && same_config() {
        if let Ok(done) = read_json::<CompleteMarker>(&complete_path) {
            if done.sha256 == hash {
                return Ok(RunOutcome { dir: dir.to_path_buf(), status: RunStatus::Skipped, episodes: done.episodes });
            }
        }
    }

    let (mut trainer, mut rows, status) = if resume && same_config() && ckpt_dir.join("manifest.json").exists() {
        let trainer = Trainer::resume(run.scenario.clone(), run.train.clone(), &ckpt_dir)?;
        let mut rows = read_metrics_csv(&metrics_path)?;
        rows.truncate(trainer.episode());
        if rows.len() != trainer.episode() {
            return Err(Error::Checkpoint(format!(
                "{} holds {} rows but the checkpoint is at episode {}",
                metrics_path.display(),
                rows.len(),
                trainer.episode()
            )));
        }
        (trainer, rows, RunStatus::Resumed)
    } else {
        let _ = fs::remove_file(&complete_path);
        if ckpt_dir.exists() {
            fs::remove_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
        }
        write_json(&config_path, &RunConfigFile { config: run.clone(), sha256: hash.clone() })?;
        let trainer = Trainer::new(run.scenario.clone(), run.train.clone())?;
        (trainer, Vec::new(), RunStatus::Trained)
    };

    while trainer.episode() < run.train.episodes {
        rows.push(trainer.run_episode()?);
        if trainer.episode() % checkpoint_every == 0 || trainer.episode() == run.train.episodes {
            write_metrics_csv(&metrics_path, m, &rows)?;
            trainer.save_checkpoint(&ckpt_dir)?;
        }
    }
    write_metrics_csv(&metrics_path, m, &rows)?;
    write_json(&complete_path, &CompleteMarker { episodes: rows.len(), sha256: hash })?;
    Ok(RunOutcome { dir: dir.to_path_buf(), status, episodes: rows.len() })
}

/// Runs every (scheme, seed, sweep point) of the spec on a bounded pool.
pub fn cmd_train(spec: &ExperimentSpec, resume: bool, workers: usize) -> Result<Vec<RunOutcome>> {
    spec.validate()?;
    fs::create_dir_all(&spec.output_dir).map_err(|e| Error::io(&spec.output_dir, e))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let runs = spec.runs();
    pool.install(|| {
        runs.par_iter()
            .map(|key| train_run(&spec.resolve(key), &spec.run_dir(key), spec.checkpoint_every, resume))
            .collect()
    })
}

/// Loads a run's checkpoint and evaluates it on `seeds`; writes `eval.json`.
pub fn cmd_eval(spec: &ExperimentSpec, key: &RunKey, seeds: &[u64]) -> Result<EvalReport> {
    let run = spec.resolve(key);
    let dir = spec.run_dir(key);
    let (roster, manifest) = AgentRoster::load(&dir.join("checkpoint"), &run.scenario)?;
    if manifest.meta.scheme != key.scheme {
        return Err(Error::Checkpoint("checkpoint was trained under a different scheme".into()));
    }
    let report = evaluate(&roster, &run.scenario, key.scheme, seeds)?;
    write_json(&dir.join("eval.json"), &report)?;
    Ok(report)
}

/// Median over seeds of the per-run converged value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchemeSummary {
    pub scheme: Scheme,
    pub label: String,
    pub seeds: usize,
    pub converged_sum_rate: f64,
    pub converged_mean_snr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSeries {
    pub x: Vec<f64>,
    /// One series per scheme, aligned with `x`.
    pub series: Vec<(Scheme, Vec<f64>)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub summary: Vec<SchemeSummary>,
    pub pmax: Option<SweepSeries>,
    pub update_period: Option<SweepSeries>,
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Mean of the final `window` episodes (all episodes if fewer).
pub fn converged(rows: &[EpisodeMetrics], window: usize, f: impl Fn(&EpisodeMetrics) -> f64) -> f64 {
    let tail = &rows[rows.len().saturating_sub(window)..];
    tail.iter().map(f).sum::<f64>() / tail.len().max(1) as f64
}

fn completed_metrics(spec: &ExperimentSpec, key: &RunKey, missing: &mut Vec<String>) -> Option<Vec<EpisodeMetrics>> {
    let dir = spec.run_dir(key);
    if !dir.join("complete.json").exists() {
        missing.push(key.relative_dir().display().to_string());
        return None;
    }
    match read_metrics_csv(&dir.join("metrics.csv")) {
        Ok(rows) if !rows.is_empty() => Some(rows),
        _ => {
            missing.push(key.relative_dir().display().to_string());
            None
        }
    }
}

fn summarize(spec: &ExperimentSpec, sweep: Sweep, missing: &mut Vec<String>) -> Vec<SchemeSummary> {
    spec.schemes
        .iter()
        .map(|&scheme| {
            let (mut rates, mut snrs) = (Vec::new(), Vec::new());
            for &seed in &spec.seeds {
                if let Some(rows) = completed_metrics(spec, &RunKey { scheme, seed, sweep }, missing) {
                    rates.push(converged(&rows, CONVERGED_WINDOW, |r| r.mean_sum_rate));
                    snrs.push(converged(&rows, CONVERGED_WINDOW, |r| r.mean_snr));
                }
            }
            SchemeSummary {
                scheme,
                label: scheme.label().to_string(),
                seeds: rates.len(),
                converged_sum_rate: median(&rates).unwrap_or(f64::NAN),
                converged_mean_snr: median(&snrs).unwrap_or(f64::NAN),
            }
        })
        .collect()
}

fn write_series_csv(path: &Path, x_name: &str, series: &SweepSeries) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec![x_name.to_string()];
    header.extend(series.series.iter().map(|(s, _)| s.label().to_string()));
    w.write_record(&header)?;
    for (i, x) in series.x.iter().enumerate() {
        let mut row = vec![x.to_string()];
        row.extend(series.series.iter().map(|(_, ys)| ys[i].to_string()));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

const RENDER_SCRIPT: &str = r#"# Generated by `sixdma compare`. Requires matplotlib.
import csv
import sys
from pathlib import Path

import matplotlib.pyplot as plt

here = Path(__file__).parent
for name, xlabel in [("pmax.csv", "P_max (W)"), ("tr.csv", "T_r (slots)")]:
    path = here / name
    if not path.exists():
        continue
    with path.open() as f:
        rows = list(csv.reader(f))
    header, data = rows[0], rows[1:]
    xs = [float(r[0]) for r in data]
    fig, ax = plt.subplots()
    for col, label in enumerate(header[1:], start=1):
        ax.plot(xs, [float(r[col]) for r in data], marker="o", label=label)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("converged sum rate (bit/s/Hz)")
    ax.legend()
    fig.savefig(here / (path.stem + ".png"), dpi=150)
    print("wrote", here / (path.stem + ".png"), file=sys.stderr)
"#;

/// Builds comparison tables and plot data from finished runs. Any missing
/// run is reported by name.
pub fn cmd_compare(spec: &ExperimentSpec) -> Result<CompareReport> {
    spec.validate()?;
    let mut missing = Vec::new();
    let summary = summarize(spec, Sweep::Base, &mut missing);

    let sweep_series = |points: Vec<(f64, Sweep)>, missing: &mut Vec<String>| -> Option<SweepSeries> {
        if points.is_empty() {
            return None;
        }
        let per_point: Vec<Vec<SchemeSummary>> = points.iter().map(|&(_, s)| summarize(spec, s, missing)).collect();
        Some(SweepSeries {
            x: points.iter().map(|&(x, _)| x).collect(),
            series: spec
                .schemes
                .iter()
                .enumerate()
                .map(|(i, &scheme)| (scheme, per_point.iter().map(|p| p[i].converged_sum_rate).collect()))
                .collect(),
        })
    };
    let pmax = sweep_series(spec.sweep_pmax_w.iter().map(|&p| (p, Sweep::PMax(p))).collect(), &mut missing);
    let update_period = sweep_series(
        spec.sweep_update_period.iter().map(|&t| (t as f64, Sweep::UpdatePeriod(t))).collect(),
        &mut missing,
    );
    if !missing.is_empty() {
        return Err(Error::MissingRuns(missing));
    }

    let out = spec.output_dir.join("compare");
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let mut w = csv::Writer::from_path(out.join("summary.csv"))?;
    w.write_record(["scheme", "label", "seeds", "converged_sum_rate", "converged_mean_snr"])?;
    for s in &summary {
        w.write_record([
            s.scheme.id().to_string(),
            s.label.clone(),
            s.seeds.to_string(),
            s.converged_sum_rate.to_string(),
            s.converged_mean_snr.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(out.join("summary.csv"), e))?;
    if let Some(p) = &pmax {
        write_series_csv(&out.join("pmax.csv"), "pmax_w", p)?;
    }
    if let Some(t) = &update_period {
        write_series_csv(&out.join("tr.csv"), "update_period", t)?;
    }
    let script = out.join("plot.py");
    fs::write(&script, RENDER_SCRIPT).map_err(|e| Error::io(&script, e))?;
    let report = CompareReport { summary, pmax, update_period };
    write_json(&out.join("compare.json"), &report)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileReport {
    pub calls: usize,
    pub rows: Vec<LatencyRow>,
}

impl ProfileReport {
    /// Agent, average, max and P99 in microseconds.
    pub fn table(&self) -> String {
        let mut s = format!("{:<10} {:>12} {:>12} {:>12}\n", "agent", "avg (us)", "max (us)", "P99 (us)");
        for r in &self.rows {
            s.push_str(&format!(
                "{:<10} {:>12.3} {:>12.3} {:>12.3}\n",
                r.agent, r.stats.mean_us, r.stats.max_us, r.stats.p99_us
            ));
        }
        s
    }
}

/// Times `calls` single forward passes per agent on observations from a
/// freshly reset environment.
pub fn cmd_profile(roster: &AgentRoster, scenario: &ScenarioConfig, calls: usize) -> Result<ProfileReport> {
    if calls == 0 {
        return Err(Error::InvalidArgument("profile needs at least one call".into()));
    }
    if roster.uav.len() != scenario.num_uavs {
        return Err(Error::Checkpoint("roster does not match the scenario".into()));
    }
    let env = Environment::new(scenario.clone(), Scheme::Proposed, 0)?;
    let obs = env.build_observations()?;
    let mut rows = Vec::with_capacity(scenario.num_uavs + 2);
    let mut time = |agent: String, net: &crate::rl::Td3Agent, o: &[f64]| -> Result<()> {
        let mut samples = Vec::with_capacity(calls);
        for _ in 0..calls {
            let start = Instant::now();
            std::hint::black_box(net.act(std::hint::black_box(o))?);
            samples.push(start.elapsed().as_secs_f64() * 1e6);
        }
        rows.push(LatencyRow { agent, stats: LatencyStats::from_samples(&samples)? });
        Ok(())
    };
    for (i, agent) in roster.uav.iter().enumerate() {
        time(format!("uav{i}"), agent, &obs.uav[i])?;
    }
    time("beam".into(), &roster.beam, &obs.beam)?;
    time("sixdma".into(), &roster.sixdma, &obs.sixdma)?;
    Ok(ProfileReport { calls, rows })
}
