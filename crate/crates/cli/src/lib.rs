//! Command implementations behind the `gcdisc` binary.
//!
//! Every command writes a [`RunManifest`] next to its outputs. The manifest holds
//! the full configuration snapshot and input paths, so [`replay`] can rerun the
//! command bit-for-bit.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use gcdisc_core::dataset::Dataset;
use gcdisc_core::gc::{self, GcGraph, LambdaMetrics, MetricsReport};
use gcdisc_core::simulate::{simulate_lorenz96, simulate_var, Lorenz96Config, VarConfig};
use gcdisc_core::train::{self, ComponentModel, TrainConfig, TrainHistory};
use serde::{Deserialize, Serialize};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const MANIFEST_FILE: &str = "manifest.json";

/// The default sparsity grid, 5 through 15 in steps of one.
pub fn default_lambdas() -> Vec<f64> {
    (5..=15).map(f64::from).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub lambdas: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            lambdas: default_lambdas(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Score self-edges (diagonal cells) too.
    pub include_diagonal: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            include_diagonal: true,
        }
    }
}

/// Everything a run can be configured with; the TOML config file mirrors this tree.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub lorenz96: Lorenz96Config,
    pub var: VarConfig,
    pub sweep: SweepConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Sets the single top-level seed for every random stream.
    pub fn set_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.lorenz96.seed = seed;
        self.var.seed = seed;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimKind {
    Lorenz96,
    Var,
}

impl SimKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SimKind::Lorenz96 => "lorenz96",
            SimKind::Var => "var",
        }
    }
}

/// Which command a manifest records, with its command-specific inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "lowercase")]
pub enum Invocation {
    Simulate {
        kind: SimKind,
    },
    Train {
        data: PathBuf,
        truth: Option<PathBuf>,
        has_header: bool,
    },
    Sweep {
        data: PathBuf,
        truth: Option<PathBuf>,
        has_header: bool,
    },
    Evaluate {
        graph: PathBuf,
        truth: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub invocation: Invocation,
    pub seed: u64,
    pub config: RunConfig,
    /// Worker threads used; results do not depend on it.
    pub workers: usize,
    /// Output files, relative to the manifest's directory.
    pub artifacts: Vec<PathBuf>,
    pub wall_clock_secs: f64,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading manifest {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing manifest {}", path.display()))
    }

    fn write(&self, out_dir: &Path) -> Result<PathBuf> {
        let path = out_dir.join(MANIFEST_FILE);
        fs::write(&path, serde_json::to_string_pretty(self)? + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    /// Fails if a listed artifact is missing.
    pub fn verify(&self, out_dir: &Path) -> Result<()> {
        for a in &self.artifacts {
            ensure!(out_dir.join(a).is_file(), "artifact {} is missing", a.display());
        }
        Ok(())
    }
}

/// Tracks files written under an output directory.
struct Outputs {
    dir: PathBuf,
    written: Vec<PathBuf>,
}

impl Outputs {
    fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        })
    }

    fn path(&mut self, rel: impl Into<PathBuf>) -> Result<PathBuf> {
        let rel = rel.into();
        let full = self.dir.join(&rel);
        if let Some(parent) = full.parent() {
            fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        self.written.push(rel);
        Ok(full)
    }

    fn text(&mut self, rel: impl Into<PathBuf>, contents: &str) -> Result<()> {
        let path = self.path(rel)?;
        fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))
    }

    fn json<T: Serialize>(&mut self, rel: impl Into<PathBuf>, value: &T) -> Result<()> {
        self.text(rel, &(serde_json::to_string_pretty(value)? + "\n"))
    }

    fn graph(&mut self, prefix: &str, graph: &GcGraph) -> Result<()> {
        graph.write_json(self.path(format!("{prefix}graph.json"))?)?;
        graph.write_csv(self.path(format!("{prefix}graph.csv"))?)?;
        self.text(format!("{prefix}graph.dot"), &graph.to_dot())
    }

    fn finish(self, invocation: Invocation, config: &RunConfig, workers: usize, start: Instant) -> Result<RunManifest> {
        let manifest = RunManifest {
            tool_version: TOOL_VERSION.to_string(),
            invocation,
            seed: config.train.seed,
            config: config.clone(),
            workers,
            artifacts: self.written,
            wall_clock_secs: start.elapsed().as_secs_f64(),
        };
        manifest.write(&self.dir)?;
        Ok(manifest)
    }
}

pub fn cmd_simulate(kind: SimKind, config: &RunConfig, out_dir: &Path) -> Result<RunManifest> {
    let start = Instant::now();
    let mut out = Outputs::create(out_dir)?;
    let dataset = match kind {
        SimKind::Lorenz96 => simulate_lorenz96(&config.lorenz96)?,
        SimKind::Var => {
            let sim = simulate_var(&config.var)?;
            let coefficients: Vec<Vec<Vec<f64>>> = sim
                .coefficients
                .iter()
                .map(|a| a.rows().into_iter().map(|r| r.to_vec()).collect())
                .collect();
            out.json("coefficients.json", &coefficients)?;
            sim.dataset
        }
    };
    dataset.write_csv(out.path("data.csv")?)?;
    if let Some(truth) = dataset.truth() {
        truth.write_json(out.path("truth.json")?)?;
    }
    log::info!(
        "simulated {} variates x {} steps ({})",
        dataset.num_variates(),
        dataset.num_steps(),
        kind.as_str()
    );
    out.finish(Invocation::Simulate { kind }, config, 1, start)
}

/// Metrics JSON written by `train`: learned alpha and usage, plus scores if a truth graph was given.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSummary {
    pub lambda: f64,
    pub edges: usize,
    pub variable_usage: Vec<usize>,
    pub alpha: Vec<Vec<f64>>,
    pub failed_components: Vec<usize>,
    pub metrics: Option<MetricsReport>,
}

/// Outcome of training one lambda: graph plus summary; failures are listed, not fatal.
struct Trained {
    graph: Option<GcGraph>,
    summary: TrainSummary,
}

fn load_truth(path: Option<&Path>) -> Result<Option<GcGraph>> {
    path.map(|p| GcGraph::read(p).with_context(|| format!("reading truth {}", p.display())))
        .transpose()
}

fn train_into(
    dataset: &Dataset,
    cfg: &TrainConfig,
    truth: Option<&GcGraph>,
    include_diagonal: bool,
    workers: usize,
    out: &mut Outputs,
    prefix: &str,
) -> Result<Trained> {
    let results = train::train_all(dataset, cfg, workers)?;
    let mut models: Vec<ComponentModel> = Vec::new();
    let mut histories: Vec<TrainHistory> = Vec::new();
    let mut failed = Vec::new();
    for (v, r) in results.into_iter().enumerate() {
        match r {
            Ok((m, h)) => {
                m.save(out.path(format!("{prefix}checkpoints/component_{v:03}.bin"))?)?;
                out.text(format!("{prefix}history/component_{v:03}.ndjson"), &h.to_ndjson()?)?;
                models.push(m);
                histories.push(h);
            }
            Err(e) => {
                log::error!("component {v}: {e}");
                failed.push(v);
            }
        }
    }
    let mut summary = TrainSummary {
        lambda: cfg.lambda,
        edges: 0,
        variable_usage: gc::variable_usage(&models),
        alpha: train::alphas(&models),
        failed_components: failed,
        metrics: None,
    };
    if !summary.failed_components.is_empty() {
        out.json(format!("{prefix}metrics.json"), &summary)?;
        return Ok(Trained { graph: None, summary });
    }
    let mut graph = gc::extract_graph(&models)?;
    graph.set_variate_names(dataset.variate_names().to_vec())?;
    summary.edges = graph.num_edges();
    if let Some(t) = truth {
        summary.metrics = Some(gc::confusion_metrics(&graph, t, include_diagonal)?);
    }
    out.graph(prefix, &graph)?;
    out.json(format!("{prefix}metrics.json"), &summary)?;
    Ok(Trained {
        graph: Some(graph),
        summary,
    })
}

fn load_data(path: &Path, has_header: bool) -> Result<Dataset> {
    Dataset::load_csv(path, has_header).with_context(|| format!("loading data {}", path.display()))
}

/// Trains all components on a CSV series; writes checkpoints, histories, graph and metrics.
///
/// Components that fail are reported (and listed in `metrics.json`) while the rest
/// are still written; the command then fails.
pub fn cmd_train(
    data: &Path,
    truth: Option<&Path>,
    has_header: bool,
    config: &RunConfig,
    workers: usize,
    out_dir: &Path,
) -> Result<RunManifest> {
    let start = Instant::now();
    config.train.validate()?;
    let dataset = load_data(data, has_header)?;
    let truth_graph = load_truth(truth)?;
    let mut out = Outputs::create(out_dir)?;
    let trained = train_into(
        &dataset,
        &config.train,
        truth_graph.as_ref(),
        config.eval.include_diagonal,
        workers,
        &mut out,
        "",
    )?;
    let invocation = Invocation::Train {
        data: data.to_path_buf(),
        truth: truth.map(Path::to_path_buf),
        has_header,
    };
    let manifest = out.finish(invocation, config, workers, start)?;
    if !trained.summary.failed_components.is_empty() {
        bail!("components {:?} failed to train", trained.summary.failed_components);
    }
    Ok(manifest)
}

/// Sweep results: survival-count scores and per-lambda metrics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepSummary {
    pub lambdas: Vec<f64>,
    pub scores: Vec<Vec<f64>>,
    pub auroc: Option<f64>,
    pub per_lambda: Vec<LambdaMetrics>,
    pub best: Option<LambdaMetrics>,
}

pub fn lambda_dir(lambda: f64) -> String {
    format!("lambda_{lambda}/")
}

/// Trains once per lambda and aggregates the graphs into edge scores.
pub fn cmd_sweep(
    data: &Path,
    truth: Option<&Path>,
    has_header: bool,
    config: &RunConfig,
    workers: usize,
    out_dir: &Path,
) -> Result<RunManifest> {
    let start = Instant::now();
    let lambdas = &config.sweep.lambdas;
    ensure!(lambdas.len() >= 2, "a sweep needs at least two lambda values, got {}", lambdas.len());
    config.train.validate()?;
    let dataset = load_data(data, has_header)?;
    let truth_graph = load_truth(truth)?;
    let mut out = Outputs::create(out_dir)?;
    let mut sweep = Vec::with_capacity(lambdas.len());
    let mut per_lambda = Vec::new();
    let mut failures = BTreeMap::new();
    for &lambda in lambdas {
        let cfg = TrainConfig {
            lambda,
            ..config.train.clone()
        };
        log::info!("sweep: lambda = {lambda}");
        let trained = train_into(
            &dataset,
            &cfg,
            truth_graph.as_ref(),
            config.eval.include_diagonal,
            workers,
            &mut out,
            &lambda_dir(lambda),
        )?;
        match trained.graph {
            Some(g) => {
                if let Some(m) = &trained.summary.metrics {
                    per_lambda.push(LambdaMetrics {
                        lambda,
                        accuracy: m.accuracy,
                        balanced_accuracy: m.balanced_accuracy,
                        edges: g.num_edges(),
                    });
                }
                sweep.push((lambda, g));
            }
            None => {
                failures.insert(lambda.to_string(), trained.summary.failed_components);
            }
        }
    }
    let invocation = Invocation::Sweep {
        data: data.to_path_buf(),
        truth: truth.map(Path::to_path_buf),
        has_header,
    };
    if !failures.is_empty() {
        out.finish(invocation, config, workers, start)?;
        bail!("training failed for some components: {failures:?}");
    }
    let scores = gc::edge_scores_from_sweep(&sweep)?;
    let auroc = truth_graph
        .as_ref()
        .map(|t| gc::auroc(&scores, t, config.eval.include_diagonal))
        .transpose()?;
    let best = per_lambda
        .iter()
        .max_by(|a, b| a.balanced_accuracy.total_cmp(&b.balanced_accuracy))
        .cloned();
    let summary = SweepSummary {
        lambdas: lambdas.clone(),
        scores: scores.scores.clone(),
        auroc,
        per_lambda,
        best,
    };
    out.json("scores.json", &scores)?;
    out.json("metrics.json", &summary)?;
    out.finish(invocation, config, workers, start)
}

/// Scores a predicted graph against a truth graph; writes `metrics.json` when `out_dir` is given.
pub fn cmd_evaluate(graph: &Path, truth: &Path, config: &RunConfig, out_dir: Option<&Path>) -> Result<MetricsReport> {
    let start = Instant::now();
    let pred = GcGraph::read(graph).with_context(|| format!("reading graph {}", graph.display()))?;
    let truth_graph = GcGraph::read(truth).with_context(|| format!("reading truth {}", truth.display()))?;
    ensure!(
        pred.num_variates() == truth_graph.num_variates(),
        "graph has {} variates but truth has {}",
        pred.num_variates(),
        truth_graph.num_variates()
    );
    let report = gc::confusion_metrics(&pred, &truth_graph, config.eval.include_diagonal)?;
    if let Some(dir) = out_dir {
        let mut out = Outputs::create(dir)?;
        out.json("metrics.json", &report)?;
        let invocation = Invocation::Evaluate {
            graph: graph.to_path_buf(),
            truth: truth.to_path_buf(),
        };
        out.finish(invocation, config, 1, start)?;
    }
    Ok(report)
}

/// Reruns the command recorded in a manifest, writing into `out_dir`.
pub fn replay(manifest: &RunManifest, out_dir: &Path) -> Result<RunManifest> {
    let cfg = &manifest.config;
    let workers = manifest.workers;
    match &manifest.invocation {
        Invocation::Simulate { kind } => cmd_simulate(*kind, cfg, out_dir),
        Invocation::Train {
            data,
            truth,
            has_header,
        } => cmd_train(data, truth.as_deref(), *has_header, cfg, workers, out_dir),
        Invocation::Sweep {
            data,
            truth,
            has_header,
        } => cmd_sweep(data, truth.as_deref(), *has_header, cfg, workers, out_dir),
        Invocation::Evaluate { graph, truth } => {
            cmd_evaluate(graph, truth, cfg, Some(out_dir))?;
            RunManifest::load(&out_dir.join(MANIFEST_FILE))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_tree_parses_and_rejects_unknown_keys() {
        let cfg = RunConfig::from_toml(
            "[train]\nlambda = 7.5\ntotal_steps = 100\nlag_mode = \"per-lag\"\n[sweep]\nlambdas = [1.0, 2.0]\n",
        )
        .unwrap();
        assert_eq!(cfg.train.lambda, 7.5);
        assert_eq!(cfg.train.total_steps, 100);
        assert_eq!(cfg.train.warmup_steps, 2000);
        assert_eq!(cfg.sweep.lambdas, vec![1.0, 2.0]);
        assert!(RunConfig::from_toml("[train]\nlamda = 1\n").is_err());
    }

    #[test]
    fn default_sweep_has_eleven_values() {
        let l = default_lambdas();
        assert_eq!(l.len(), 11);
        assert_eq!((l[0], l[10]), (5.0, 15.0));
    }

    #[test]
    fn seed_reaches_every_stream() {
        let mut cfg = RunConfig::default();
        cfg.set_seed(42);
        assert_eq!((cfg.train.seed, cfg.lorenz96.seed, cfg.var.seed), (42, 42, 42));
    }

    #[test]
    fn manifest_round_trips() {
        let m = RunManifest {
            tool_version: TOOL_VERSION.into(),
            invocation: Invocation::Train {
                data: "d.csv".into(),
                truth: None,
                has_header: true,
            },
            seed: 3,
            config: RunConfig::default(),
            workers: 2,
            artifacts: vec!["graph.json".into()],
            wall_clock_secs: 1.5,
        };
        let text = serde_json::to_string(&m).unwrap();
        assert!(text.contains("\"command\":\"train\""));
        assert_eq!(serde_json::from_str::<RunManifest>(&text).unwrap(), m);
    }
}
