//! Run specifications, built-in scenarios, and the experiment driver.
//!
//! A run is described by a flat key-value config (dotted keys, `key = value`
//! lines) layered on top of a named scenario's defaults, with command-line
//! flags taking final precedence. The driver generates synthetic data,
//! partitions it, executes the federation (once per entry of an optional mu
//! sweep), and writes plot-ready CSV metrics plus a summary and a resolved
//! config snapshot that reproduces the run bit-for-bit.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::data::{gen_synthetic, partition_hybrid, split_test_per_class, FeatureSchema};
use crate::error::{Error, Result};
use crate::federation::{
    Mode, ModelConfig, RoundConfig, RunTrace, Simulation,
};
use crate::seeding;

/// Fallback output directory when neither `--out` nor `HYFEM_OUT` is set.
pub const DEFAULT_OUT_DIR: &str = "hyfem-out";

/// Environment variable supplying the default output directory.
pub const OUT_DIR_ENV: &str = "HYFEM_OUT";

/// Fully resolved description of one experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub scenario: String,
    pub seed: u64,
    /// Worker threads for the local-update phase; 0 picks a hardware default.
    pub workers: usize,
    pub out_dir: PathBuf,

    pub num_blocks: usize,
    pub block_width: usize,
    pub embed_width: usize,
    pub num_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub separation: f64,

    pub clients: usize,
    pub classes_per_client: usize,
    pub views_per_client: usize,

    pub extractor_hidden: usize,
    pub head_hidden: usize,
    pub global_head_hidden: usize,
    pub extractor_output_relu: bool,

    pub rounds: RoundConfig,
    /// When non-empty, the experiment runs once per mu value.
    pub mu_sweep: Vec<f64>,
}

impl RunSpec {
    pub fn schema(&self) -> Result<FeatureSchema> {
        FeatureSchema::uniform(
            self.num_blocks,
            self.block_width,
            self.embed_width,
            self.num_classes,
        )
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            extractor_hidden: self.extractor_hidden,
            head_hidden: self.head_hidden,
            global_head_hidden: Some(self.global_head_hidden),
            extractor_output_relu: self.extractor_output_relu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schema()?;
        self.rounds.validate()?;
        let check = |ok: bool, key: &str, reason: &str| -> Result<()> {
            if ok {
                Ok(())
            } else {
                Err(Error::config(key, reason))
            }
        };
        check(self.train_per_class >= 1, "data.train_per_class", "must be >= 1")?;
        check(self.test_per_class >= 1, "data.test_per_class", "must be >= 1")?;
        check(
            self.separation > 0.0 && self.separation.is_finite(),
            "data.separation",
            "must be positive",
        )?;
        check(self.clients >= 1, "partition.clients", "must be >= 1")?;
        check(
            (1..=self.num_classes).contains(&self.classes_per_client),
            "partition.classes_per_client",
            "must lie in 1..=data.num_classes",
        )?;
        check(
            (1..=self.num_blocks).contains(&self.views_per_client),
            "partition.views_per_client",
            "must lie in 1..=data.num_blocks",
        )?;
        check(self.extractor_hidden >= 1, "model.extractor_hidden", "must be >= 1")?;
        check(self.head_hidden >= 1, "model.head_hidden", "must be >= 1")?;
        check(
            self.head_hidden <= self.global_head_hidden,
            "model.global_head_hidden",
            "must be >= model.head_hidden",
        )?;
        for mu in &self.mu_sweep {
            check(
                *mu >= 0.0 && mu.is_finite(),
                "rounds.mu_sweep",
                "every mu must be >= 0",
            )?;
        }
        Ok(())
    }

    /// Resolved flat key-value snapshot; feeding it back through
    /// [`parse_config`] reproduces this spec (the output directory is
    /// intentionally not pinned).
    pub fn snapshot(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "scenario = {}", self.scenario);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "workers = {}", self.workers);
        let _ = writeln!(s, "data.num_blocks = {}", self.num_blocks);
        let _ = writeln!(s, "data.block_width = {}", self.block_width);
        let _ = writeln!(s, "data.embed_width = {}", self.embed_width);
        let _ = writeln!(s, "data.num_classes = {}", self.num_classes);
        let _ = writeln!(s, "data.train_per_class = {}", self.train_per_class);
        let _ = writeln!(s, "data.test_per_class = {}", self.test_per_class);
        let _ = writeln!(s, "data.separation = {}", self.separation);
        let _ = writeln!(s, "partition.clients = {}", self.clients);
        let _ = writeln!(s, "partition.classes_per_client = {}", self.classes_per_client);
        let _ = writeln!(s, "partition.views_per_client = {}", self.views_per_client);
        let _ = writeln!(s, "model.extractor_hidden = {}", self.extractor_hidden);
        let _ = writeln!(s, "model.head_hidden = {}", self.head_hidden);
        let _ = writeln!(s, "model.global_head_hidden = {}", self.global_head_hidden);
        let _ = writeln!(s, "model.extractor_output_relu = {}", self.extractor_output_relu);
        let _ = writeln!(s, "rounds.T = {}", self.rounds.rounds);
        let _ = writeln!(s, "rounds.Q = {}", self.rounds.local_steps);
        let _ = writeln!(s, "rounds.P = {}", self.rounds.matching_passes);
        let _ = writeln!(s, "rounds.batch_size = {}", self.rounds.batch_size);
        let _ = writeln!(s, "rounds.lr = {}", self.rounds.lr_init);
        let _ = writeln!(s, "rounds.lr_decay = {}", self.rounds.lr_decay);
        let _ = writeln!(s, "rounds.lr_decay_every = {}", self.rounds.lr_decay_every);
        let _ = writeln!(s, "rounds.mu = {}", self.rounds.mu);
        let _ = writeln!(s, "rounds.lambda_feat = {}", self.rounds.lambda_feat);
        let _ = writeln!(s, "rounds.mode = {}", self.rounds.mode);
        let sweep = self
            .mu_sweep
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(",");
        let _ = writeln!(s, "rounds.mu_sweep = {sweep}");
        s
    }
}

/// Defaults of a named built-in scenario.
pub fn scenario_defaults(name: &str) -> Result<RunSpec> {
    let base_rounds = RoundConfig {
        rounds: 8,
        local_steps: 8,
        matching_passes: 2,
        batch_size: 8,
        lr_init: 0.01,
        lr_decay: 0.5,
        lr_decay_every: 4,
        mu: 0.1,
        lambda_feat: 1.0,
        mode: Mode::Prox,
    };
    let out_dir = default_out_dir();
    match name {
        // Small smoke scenario.
        "tiny" => Ok(RunSpec {
            scenario: name.to_string(),
            seed: 7,
            workers: 0,
            out_dir,
            num_blocks: 2,
            block_width: 4,
            embed_width: 4,
            num_classes: 3,
            train_per_class: 30,
            test_per_class: 10,
            separation: 6.0,
            clients: 2,
            classes_per_client: 2,
            views_per_client: 1,
            extractor_hidden: 8,
            head_hidden: 8,
            global_head_hidden: 8,
            extractor_output_relu: true,
            rounds: base_rounds,
            mu_sweep: Vec::new(),
        }),
        // Four clients, four views, three views per client.
        "paper-4x3" => Ok(RunSpec {
            scenario: name.to_string(),
            seed: 7,
            workers: 0,
            out_dir,
            num_blocks: 4,
            block_width: 6,
            embed_width: 6,
            num_classes: 8,
            train_per_class: 48,
            test_per_class: 25,
            separation: 6.0,
            clients: 4,
            classes_per_client: 7,
            views_per_client: 3,
            extractor_hidden: 12,
            head_hidden: 16,
            global_head_hidden: 64,
            extractor_output_relu: true,
            rounds: RoundConfig {
                rounds: 32,
                local_steps: 32,
                matching_passes: 4,
                batch_size: 32,
                lr_init: 0.005,
                lr_decay: 0.2,
                lr_decay_every: 8,
                mu: 0.1,
                lambda_feat: 1.0,
                mode: Mode::Prox,
            },
            mu_sweep: Vec::new(),
        }),
        // Eight clients over twelve views, six views each, heterogeneous
        // classes, with a mu sweep.
        "paper-8x6" => Ok(RunSpec {
            scenario: name.to_string(),
            seed: 7,
            workers: 0,
            out_dir,
            num_blocks: 12,
            block_width: 4,
            embed_width: 4,
            num_classes: 8,
            train_per_class: 24,
            test_per_class: 25,
            separation: 2.0,
            clients: 8,
            classes_per_client: 6,
            views_per_client: 6,
            extractor_hidden: 8,
            head_hidden: 16,
            global_head_hidden: 16,
            extractor_output_relu: true,
            rounds: RoundConfig {
                rounds: 12,
                local_steps: 64,
                matching_passes: 8,
                batch_size: 16,
                lr_init: 0.05,
                lr_decay: 1.0,
                lr_decay_every: 8,
                mu: 0.1,
                lambda_feat: 1.0,
                mode: Mode::Prox,
            },
            mu_sweep: vec![0.1, 0.5],
        }),
        other => Err(Error::config(
            "scenario",
            format!("unknown scenario `{other}`; available: tiny, paper-4x3, paper-8x6"),
        )),
    }
}

fn default_out_dir() -> PathBuf {
    std::env::var_os(OUT_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
}

/// Command-line overrides; every field beats both scenario defaults and the
/// config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub scenario: Option<String>,
    pub mu: Option<f64>,
    pub mode: Option<Mode>,
    pub seed: Option<u64>,
    pub rounds: Option<usize>,
    pub out: Option<PathBuf>,
    pub workers: Option<usize>,
}

/// Build a validated [`RunSpec`] from an optional config file plus overrides.
///
/// Unknown keys, malformed values, and constraint violations are rejected
/// with the offending dotted key path.
pub fn parse_config(path: Option<&Path>, overrides: &Overrides) -> Result<RunSpec> {
    let entries = match path {
        Some(p) => parse_key_value_file(p)?,
        None => Vec::new(),
    };

    let scenario = overrides
        .scenario
        .clone()
        .or_else(|| {
            entries
                .iter()
                .find(|(k, _)| k == "scenario")
                .map(|(_, v)| v.clone())
        })
        .ok_or_else(|| Error::config("scenario", "required (flag --scenario or config key)"))?;
    let mut spec = scenario_defaults(&scenario)?;

    for (key, value) in &entries {
        apply_key(&mut spec, key, value)?;
    }

    if let Some(mu) = overrides.mu {
        spec.rounds.mu = mu;
        spec.mu_sweep.clear();
    }
    if let Some(mode) = overrides.mode {
        spec.rounds.mode = mode;
    }
    if let Some(seed) = overrides.seed {
        spec.seed = seed;
    }
    if let Some(rounds) = overrides.rounds {
        spec.rounds.rounds = rounds;
    }
    if let Some(out) = &overrides.out {
        spec.out_dir = out.clone();
    }
    if let Some(workers) = overrides.workers {
        spec.workers = workers;
    }

    spec.validate()?;
    Ok(spec)
}

fn parse_key_value_file(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path)?;
    let mut entries = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Parse {
                line: idx + 1,
                reason: format!("expected `key = value`, got `{line}`"),
            });
        };
        entries.push((key.trim().to_string(), value.trim().to_string()));
    }
    Ok(entries)
}

fn apply_key(spec: &mut RunSpec, key: &str, value: &str) -> Result<()> {
    fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        value
            .parse::<T>()
            .map_err(|e| Error::config(key, format!("cannot parse `{value}`: {e}")))
    }

    match key {
        "scenario" => {} // consumed before defaults were materialized
        "seed" => spec.seed = num(key, value)?,
        "workers" => spec.workers = num(key, value)?,
        "data.num_blocks" => spec.num_blocks = num(key, value)?,
        "data.block_width" => spec.block_width = num(key, value)?,
        "data.embed_width" => spec.embed_width = num(key, value)?,
        "data.num_classes" => spec.num_classes = num(key, value)?,
        "data.train_per_class" => spec.train_per_class = num(key, value)?,
        "data.test_per_class" => spec.test_per_class = num(key, value)?,
        "data.separation" => spec.separation = num(key, value)?,
        "partition.clients" => spec.clients = num(key, value)?,
        "partition.classes_per_client" => spec.classes_per_client = num(key, value)?,
        "partition.views_per_client" => spec.views_per_client = num(key, value)?,
        "model.extractor_hidden" => spec.extractor_hidden = num(key, value)?,
        "model.head_hidden" => spec.head_hidden = num(key, value)?,
        "model.global_head_hidden" => spec.global_head_hidden = num(key, value)?,
        "model.extractor_output_relu" => spec.extractor_output_relu = num(key, value)?,
        "rounds.T" => spec.rounds.rounds = num(key, value)?,
        "rounds.Q" => spec.rounds.local_steps = num(key, value)?,
        "rounds.P" => spec.rounds.matching_passes = num(key, value)?,
        "rounds.batch_size" => spec.rounds.batch_size = num(key, value)?,
        "rounds.lr" => spec.rounds.lr_init = num(key, value)?,
        "rounds.lr_decay" => spec.rounds.lr_decay = num(key, value)?,
        "rounds.lr_decay_every" => spec.rounds.lr_decay_every = num(key, value)?,
        "rounds.mu" => spec.rounds.mu = num(key, value)?,
        "rounds.lambda_feat" => spec.rounds.lambda_feat = num(key, value)?,
        "rounds.mode" => {
            spec.rounds.mode = value
                .parse::<Mode>()
                .map_err(|e| Error::config(key, e.to_string()))?
        }
        "rounds.mu_sweep" => {
            spec.mu_sweep = if value.is_empty() {
                Vec::new()
            } else {
                value
                    .split(',')
                    .map(|v| num::<f64>(key, v.trim()))
                    .collect::<Result<Vec<f64>>>()?
            }
        }
        unknown => {
            return Err(Error::config(
                unknown,
                "unknown key; see the README for the key list",
            ))
        }
    }
    Ok(())
}

/// One finished training run of an experiment.
#[derive(Debug, Clone)]
pub struct CompletedRun {
    pub mu: f64,
    pub trace: RunTrace,
    pub metrics_path: PathBuf,
    pub matching_path: PathBuf,
}

/// Everything an experiment produced.
#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub out_dir: PathBuf,
    pub runs: Vec<CompletedRun>,
    pub summary_path: PathBuf,
    pub snapshot_path: PathBuf,
}

/// Execute a validated spec end to end and write all artifacts.
///
/// All training happens before the first byte is written, so a failing run
/// leaves no partial outputs behind.
pub fn run_experiment(spec: &RunSpec) -> Result<ExperimentOutput> {
    spec.validate()?;

    let schema = spec.schema()?;
    let all = gen_synthetic(
        &schema,
        spec.train_per_class + spec.test_per_class,
        spec.separation,
        seeding::derive(spec.seed, 10),
    )?;
    let (train, test) = split_test_per_class(all, spec.test_per_class);
    let (datasets, plan) = partition_hybrid(
        &train,
        &schema,
        spec.clients,
        spec.classes_per_client,
        spec.views_per_client,
        seeding::derive(spec.seed, 11),
    )?;

    let workers = if spec.workers == 0 {
        Simulation::default_workers(spec.clients)
    } else {
        spec.workers
    };
    let mus: Vec<f64> = if spec.mu_sweep.is_empty() {
        vec![spec.rounds.mu]
    } else {
        spec.mu_sweep.clone()
    };
    let sweeping = spec.mu_sweep.len() > 1;

    let mut finished: Vec<(f64, RunTrace)> = Vec::new();
    for &mu in &mus {
        let cfg = RoundConfig { mu, ..spec.rounds.clone() };
        let mut sim = Simulation::new(
            schema.clone(),
            &spec.model_config(),
            datasets.clone(),
            test.clone(),
            cfg,
            spec.seed,
            workers,
        )?;
        finished.push((mu, sim.run()?));
    }

    // Training done; now write artifacts.
    std::fs::create_dir_all(&spec.out_dir)?;
    let mut runs = Vec::new();
    for (mu, trace) in finished {
        let suffix = if sweeping { format!("_mu{mu}") } else { String::new() };
        let metrics_path = spec.out_dir.join(format!("metrics{suffix}.csv"));
        let matching_path = spec.out_dir.join(format!("matching{suffix}.csv"));
        write_metrics_csv(&metrics_path, &trace)?;
        write_matching_csv(&matching_path, &trace)?;
        runs.push(CompletedRun {
            mu,
            trace,
            metrics_path,
            matching_path,
        });
    }

    let mut summary = String::new();
    summary.push_str(&plan.summary(&schema));
    for run in &runs {
        if let Some(last) = run.trace.rounds.last() {
            summary.push_str(&format!("run.mu={}\n", run.mu));
            summary.push_str(&last.report.summary());
            summary.push_str(&format!(
                "run.final_matching_objective={}\n",
                last.matching_objective
            ));
        }
    }
    let summary_path = spec.out_dir.join("summary.txt");
    std::fs::write(&summary_path, summary)?;

    let snapshot_path = spec.out_dir.join("config.txt");
    std::fs::write(&snapshot_path, spec.snapshot())?;

    Ok(ExperimentOutput {
        out_dir: spec.out_dir.clone(),
        runs,
        summary_path,
        snapshot_path,
    })
}

/// Fixed-header per-round metric trace.
pub fn write_metrics_csv(path: &Path, trace: &RunTrace) -> Result<()> {
    let mut writer = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| Error::invalid(format!("cannot create {}: {e}", path.display())))?;
    writer
        .write_record([
            "round",
            "lr",
            "mode",
            "mu",
            "mean_local_loss",
            "mean_local_acc",
            "global_loss",
            "global_acc",
            "matching_objective",
        ])
        .map_err(|e| Error::invalid(format!("csv write failed: {e}")))?;
    for r in &trace.rounds {
        writer
            .write_record([
                r.round.to_string(),
                r.lr.to_string(),
                r.mode.to_string(),
                r.mu.to_string(),
                r.report.local_loss.to_string(),
                r.report.mean_local_acc.to_string(),
                r.report.global_loss.to_string(),
                r.report.global_acc.to_string(),
                r.matching_objective.to_string(),
            ])
            .map_err(|e| Error::invalid(format!("csv write failed: {e}")))?;
    }
    writer
        .flush()
        .map_err(|e| Error::invalid(format!("csv flush failed: {e}")))?;
    Ok(())
}

/// Per-pass matching telemetry.
pub fn write_matching_csv(path: &Path, trace: &RunTrace) -> Result<()> {
    let mut writer = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| Error::invalid(format!("cannot create {}: {e}", path.display())))?;
    writer
        .write_record(["round", "pass", "client", "total_cost"])
        .map_err(|e| Error::invalid(format!("csv write failed: {e}")))?;
    for p in &trace.matching {
        writer
            .write_record([
                p.round.to_string(),
                p.pass.to_string(),
                p.client_id.to_string(),
                p.objective.to_string(),
            ])
            .map_err(|e| Error::invalid(format!("csv write failed: {e}")))?;
    }
    writer
        .flush()
        .map_err(|e| Error::invalid(format!("csv flush failed: {e}")))?;
    Ok(())
}
