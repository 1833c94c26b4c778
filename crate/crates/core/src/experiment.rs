//! Declarative experiment grids.
//!
//! An experiment is a JSON document naming a task family, the methods, a λ
//! grid and seeds. Every `(method, λ, seed)` cell runs one sequence and
//! writes its own report directory; an aggregate table of means and standard
//! deviations is written at the end. Named presets supply a full document
//! that a user file overrides field by field.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::analysis::{self, histogram_of, omega_correlation};
use crate::continual::{
    estimate_importance_phase, run_sequence, Architecture, ImportanceSource, Method,
    SequenceOutcome, TrainConfig,
};
use crate::error::{Error, Result};
use crate::importance::{Accumulation, SiAccumulator};
use crate::nn::HeadId;
use crate::portable;
use crate::tasks::{
    load_mnist_dir, permuted_mnist, select_subset, synth_classification, synth_embedding, Dataset,
    PermutedMnist, Predicate, TaskSpec,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TaskFamily {
    PermutedMnist {
        tasks: usize,
        /// Class-stratified training subsample; `null` uses every image.
        train_subsample: Option<usize>,
        identity_first: bool,
        shared_head: bool,
    },
    SyntheticClassification {
        tasks: usize,
        classes: usize,
        dim: usize,
        per_class: usize,
        spread: f64,
        /// One output layer for every task instead of one head per task.
        #[serde(default)]
        shared_head: bool,
    },
    SyntheticEmbedding {
        tasks: usize,
        dim_in: usize,
        dim_out: usize,
        n: usize,
        noise: f64,
    },
}

impl TaskFamily {
    fn task_count(&self) -> usize {
        match self {
            TaskFamily::PermutedMnist { tasks, .. }
            | TaskFamily::SyntheticClassification { tasks, .. }
            | TaskFamily::SyntheticEmbedding { tasks, .. } => *tasks,
        }
    }
}

/// Importance restricted to part of one task's classes; the rest of that
/// task is tracked as the complement.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Adaptation {
    pub task: usize,
    pub subset_labels: BTreeSet<usize>,
}

/// Training settings shared by every cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub importance_source: ImportanceSource,
    pub accumulation: Accumulation,
    #[serde(default = "default_xi")]
    pub si_xi: f64,
}

fn default_xi() -> f64 {
    SiAccumulator::DEFAULT_XI
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Diagnostics {
    pub histogram_bins: usize,
    /// Top-k used by Ω summaries and, when `correlate_sources` is set, by the
    /// train-versus-test Ω correlation of the last task.
    pub top_k: usize,
    pub correlate_sources: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub tasks: TaskFamily,
    pub adaptation: Option<Adaptation>,
    pub architecture: Architecture,
    pub train: TrainSettings,
    /// Method tags; kept as text so validation can report every bad tag.
    pub methods: Vec<String>,
    /// λ grid for regularized methods; `null` uses the task-type default.
    pub lambdas: Option<Vec<f64>>,
    pub seeds: Vec<u64>,
    pub parallel: bool,
    pub diagnostics: Diagnostics,
}

pub const PRESETS: [&str; 5] = [
    "permuted-mnist-5",
    "adaptation-subset",
    "synthetic-2task",
    "omega-sources",
    "embedding",
];

/// The full JSON document of a named preset.
pub fn preset(name: &str) -> Result<Value> {
    let base = |tasks: Value, methods: &[&str], lambdas: Value, train: Value| -> Value {
        serde_json::json!({
            "name": name,
            "data_dir": "data/mnist",
            "out_dir": format!("runs/{name}"),
            "tasks": tasks,
            "adaptation": null,
            "architecture": { "hidden": [128, 128] },
            "train": train,
            "methods": methods,
            "lambdas": lambdas,
            "seeds": [1, 2, 3],
            "parallel": false,
            "diagnostics": { "histogram_bins": 50, "top_k": 1000, "correlate_sources": false }
        })
    };
    let synth_train = serde_json::json!({
        "epochs": 10, "batch_size": 20, "lr": 0.05,
        "importance_source": "train", "accumulation": "sum"
    });
    let synth_tasks = |tasks: usize| {
        serde_json::json!({
            "kind": "synthetic-classification",
            "tasks": tasks, "classes": 10, "dim": 20, "per_class": 500, "spread": 3.0
        })
    };
    let mut v = match name {
        "permuted-mnist-5" => base(
            serde_json::json!({
                "kind": "permuted-mnist", "tasks": 5, "train_subsample": 5000,
                "identity_first": true, "shared_head": true
            }),
            &["finetune", "mas-global", "l-mas", "ewc", "si"],
            serde_json::json!([0.1, 1.0, 10.0]),
            serde_json::json!({
                "epochs": 10, "batch_size": 100, "lr": 0.3,
                "importance_source": "train", "accumulation": "sum"
            }),
        ),
        "adaptation-subset" => {
            let mut v = base(
                {
                    let mut t = synth_tasks(4);
                    t["shared_head"] = true.into();
                    t
                },
                &["finetune", "mas-global"],
                serde_json::json!([0.1]),
                synth_train.clone(),
            );
            v["adaptation"] = serde_json::json!({ "task": 0, "subset_labels": [0, 1] });
            v["train"]["importance_source"] = "custom-subset".into();
            v
        }
        "synthetic-2task" => base(
            synth_tasks(2),
            &[
                "finetune",
                "mas-global",
                "mas-vector",
                "l-mas",
                "ewc",
                "si",
                "l2",
                "joint",
            ],
            Value::Null,
            synth_train.clone(),
        ),
        "omega-sources" => {
            let mut v = base(
                synth_tasks(1),
                &["mas-global", "l-mas"],
                Value::Null,
                synth_train.clone(),
            );
            v["diagnostics"]["correlate_sources"] = true.into();
            v
        }
        "embedding" => base(
            serde_json::json!({
                "kind": "synthetic-embedding", "tasks": 3, "dim_in": 20, "dim_out": 8,
                "n": 500, "noise": 0.05
            }),
            &["finetune", "mas-global", "l-mas", "si", "joint"],
            Value::Null,
            synth_train,
        ),
        _ => {
            return Err(Error::Config(format!(
                "unknown preset `{name}` (valid: {})",
                PRESETS.join(", ")
            )))
        }
    };
    v["architecture"]["hidden"] = match name {
        "permuted-mnist-5" => serde_json::json!([128, 128]),
        _ => serde_json::json!([64, 64]),
    };
    Ok(v)
}

/// Recursive object merge; everything that is not an object on both sides
/// is replaced wholesale.
pub fn merge_json(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge_json(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Parses a config document. A `"preset"` key (or `preset` argument, which
/// wins) selects the base document the remaining fields override.
pub fn parse_config(text: &str, preset_name: Option<&str>) -> Result<ExperimentConfig> {
    let mut user: Value = serde_json::from_str(text)?;
    let from_doc = user
        .as_object_mut()
        .and_then(|o| o.remove("preset"))
        .and_then(|v| v.as_str().map(str::to_owned));
    let doc = match preset_name.map(str::to_owned).or(from_doc) {
        Some(p) => {
            let mut base = preset(&p)?;
            merge_json(&mut base, user);
            base
        }
        None => user,
    };
    Ok(serde_json::from_value(doc)?)
}

pub fn load_config(path: &Path, preset_name: Option<&str>) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    parse_config(&text, preset_name)
}

impl ExperimentConfig {
    /// Every constraint violation, each naming its field. Empty means the
    /// config will not fail on configuration grounds.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.seeds.is_empty() {
            v.push("seeds: at least one seed is required".to_string());
        }
        if self.methods.is_empty() {
            v.push("methods: at least one method is required".to_string());
        }
        for (i, m) in self.methods.iter().enumerate() {
            if let Err(e) = m.parse::<Method>() {
                v.push(format!("methods[{i}]: {e}"));
            }
        }
        if let Some(ls) = &self.lambdas {
            if ls.is_empty() {
                v.push("lambdas: give at least one value or null for the default".into());
            }
            for (i, l) in ls.iter().enumerate() {
                if !(*l >= 0.0 && l.is_finite()) {
                    v.push(format!("lambdas[{i}]: must be >= 0, got {l}"));
                }
            }
        }
        let t = &self.train;
        let probe = TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            si_xi: t.si_xi,
            ..TrainConfig::default()
        };
        v.extend(probe.violations("train."));
        if self.architecture.hidden.contains(&0) {
            v.push("architecture.hidden: widths must be >= 1".into());
        }
        let n = self.tasks.task_count();
        if n == 0 {
            v.push("tasks.tasks: at least one task is required".into());
        }
        match &self.tasks {
            TaskFamily::PermutedMnist {
                train_subsample, ..
            } => {
                if *train_subsample == Some(0) {
                    v.push("tasks.train_subsample: must be >= 1 or null".into());
                }
            }
            TaskFamily::SyntheticClassification {
                classes,
                dim,
                per_class,
                spread,
                ..
            } => {
                if *classes < 2 {
                    v.push("tasks.classes: must be >= 2".into());
                }
                if *dim < 1 {
                    v.push("tasks.dim: must be >= 1".into());
                }
                if *per_class < 1 {
                    v.push("tasks.per_class: must be >= 1".into());
                }
                if !(*spread >= 0.0 && spread.is_finite()) {
                    v.push("tasks.spread: must be >= 0".into());
                }
            }
            TaskFamily::SyntheticEmbedding {
                dim_in,
                dim_out,
                n: points,
                noise,
                ..
            } => {
                if *dim_in < 1 || *dim_out < 1 {
                    v.push("tasks.dim_in/dim_out: must be >= 1".into());
                }
                if *points < 1 {
                    v.push("tasks.n: must be >= 1".into());
                }
                if !(*noise >= 0.0 && noise.is_finite()) {
                    v.push("tasks.noise: must be >= 0".into());
                }
                if self.methods.iter().any(|m| m == "ewc") {
                    v.push("methods: ewc needs classification tasks".into());
                }
            }
        }
        match (&self.adaptation, t.importance_source) {
            (Some(a), _) => {
                if a.task >= n {
                    v.push(format!(
                        "adaptation.task: {} is out of range for {n} tasks",
                        a.task
                    ));
                }
                if a.subset_labels.is_empty() {
                    v.push("adaptation.subset_labels: must select at least one class".into());
                }
                if matches!(self.tasks, TaskFamily::SyntheticEmbedding { .. }) {
                    v.push("adaptation: needs classification tasks".into());
                }
                if t.importance_source != ImportanceSource::CustomSubset {
                    v.push("train.importance_source: adaptation needs custom-subset".into());
                }
            }
            (None, ImportanceSource::CustomSubset) => {
                v.push("train.importance_source: custom-subset needs an adaptation block".into());
            }
            _ => {}
        }
        if self.diagnostics.histogram_bins < 2 {
            v.push("diagnostics.histogram_bins: must be >= 2".into());
        }
        if self.diagnostics.top_k < 1 {
            v.push("diagnostics.top_k: must be >= 1".into());
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(v))
        }
    }

    /// `(method, λ)` pairs; methods without a penalty run once.
    /// Training settings of one grid cell.
    pub fn train_config(&self, method: Method, lambda: Option<f64>, seed: u64) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            seed,
            method,
            lambda,
            importance_source: t.importance_source,
            accumulation: t.accumulation,
            si_xi: t.si_xi,
        }
    }

    pub fn grid(&self) -> Result<Vec<(Method, Option<f64>)>> {
        let mut out = Vec::new();
        for tag in &self.methods {
            let m: Method = tag.parse()?;
            match (&self.lambdas, m.estimator()) {
                (Some(ls), Some(_)) => out.extend(ls.iter().map(|&l| (m, Some(l)))),
                _ => out.push((m, None)),
            }
        }
        Ok(out)
    }
}

/// Builds the task list of one seed.
pub fn build_tasks(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<TaskSpec>> {
    let mut tasks = match &cfg.tasks {
        TaskFamily::PermutedMnist {
            tasks,
            train_subsample,
            identity_first,
            shared_head,
        } => {
            let (train, test) = load_mnist_dir(&cfg.data_dir)?;
            permuted_mnist(
                &train,
                &test,
                &PermutedMnist {
                    tasks: *tasks,
                    train_subsample: *train_subsample,
                    seed,
                    identity_first: *identity_first,
                    shared_head: *shared_head,
                },
            )?
        }
        TaskFamily::SyntheticClassification {
            tasks,
            classes,
            dim,
            per_class,
            spread,
            shared_head,
        } => (0..*tasks)
            .map(|i| {
                let mut t =
                    synth_classification(task_seed(seed, i), *classes, *dim, *per_class, *spread)?;
                t.head = (!shared_head).then_some(HeadId(i as u32));
                Ok(t)
            })
            .collect::<Result<_>>()?,
        TaskFamily::SyntheticEmbedding {
            tasks,
            dim_in,
            dim_out,
            n,
            noise,
        } => (0..*tasks)
            .map(|i| synth_embedding(task_seed(seed, i), *dim_in, *dim_out, *n, *noise))
            .collect::<Result<_>>()?,
    };
    if let Some(a) = &cfg.adaptation {
        apply_adaptation(&mut tasks, a)?;
    }
    Ok(tasks)
}

fn task_seed(seed: u64, task: usize) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(task as u64)
}

/// Ω for the adaptation task comes from subset A only; the other tasks use
/// their whole training set. The adaptation task's eval set is split into A
/// and its complement B, tracked as probes.
pub fn apply_adaptation(tasks: &mut [TaskSpec], a: &Adaptation) -> Result<()> {
    let n = tasks.len();
    let target = tasks
        .get(a.task)
        .ok_or_else(|| Error::Config(format!("adaptation task {} of {n}", a.task)))?;
    let classes = target
        .train
        .classes()
        .ok_or_else(|| Error::Config("adaptation needs labeled tasks".into()))?;
    let a_set = a.subset_labels.clone();
    let b_set: BTreeSet<usize> = (0..classes).filter(|c| !a_set.contains(c)).collect();
    let subset = |d: &Dataset, s: &BTreeSet<usize>, name: &str| -> Result<Dataset> {
        Ok(select_subset(d, &Predicate::Labels(s.clone()))?.with_name(name))
    };
    let imp = subset(&target.train, &a_set, "subset-A/train")?.unlabeled();
    let probe_a = subset(&target.eval, &a_set, "subset-A")?;
    let probe_b = subset(&target.eval, &b_set, "subset-B")?;
    for (i, t) in tasks.iter_mut().enumerate() {
        if i == a.task {
            t.importance_set = Some(imp.clone());
            t.probes = vec![probe_a.clone(), probe_b.clone()];
        } else {
            t.importance_set = Some(t.train.unlabeled());
        }
    }
    Ok(())
}

/// One `(method, λ, seed)` result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub method: String,
    pub lambda: f64,
    pub seed: u64,
    pub dir: String,
    pub avg_acc_at_end: f64,
    pub avg_forgetting: f64,
    /// Probe name and forgetting, in report order.
    pub probe_forgetting: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub method: String,
    pub lambda: f64,
    pub seeds: usize,
    pub avg_acc_mean: f64,
    pub avg_acc_std: f64,
    pub avg_forgetting_mean: f64,
    pub avg_forgetting_std: f64,
    pub probes: Vec<(String, f64, f64)>,
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn aggregate(cells: &[CellSummary]) -> Vec<AggregateRow> {
    let mut keys: Vec<(String, u64)> = Vec::new();
    for c in cells {
        let k = (c.method.clone(), c.lambda.to_bits());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(method, bits)| {
            let group: Vec<&CellSummary> = cells
                .iter()
                .filter(|c| c.method == method && c.lambda.to_bits() == bits)
                .collect();
            let col = |f: &dyn Fn(&CellSummary) -> f64| -> Vec<f64> {
                group.iter().map(|c| f(c)).collect()
            };
            let (am, asd) = mean_std(&col(&|c| c.avg_acc_at_end));
            let (fm, fsd) = mean_std(&col(&|c| c.avg_forgetting));
            let probes = group[0]
                .probe_forgetting
                .iter()
                .enumerate()
                .map(|(i, (name, _))| {
                    let (m, s) = mean_std(&col(&|c| c.probe_forgetting[i].1));
                    (name.clone(), m, s)
                })
                .collect();
            AggregateRow {
                method,
                lambda: f64::from_bits(bits),
                seeds: group.len(),
                avg_acc_mean: am,
                avg_acc_std: asd,
                avg_forgetting_mean: fm,
                avg_forgetting_std: fsd,
                probes,
            }
        })
        .collect()
}

fn cell_dir_name(method: Method, lambda: f64, seed: u64) -> String {
    format!("{}-lambda{}-seed{seed}", method.tag(), lambda)
}

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(format!("creating {}", p.display()), e))
}

/// Runs one cell and writes its files under `out_dir`.
pub fn run_cell(
    cfg: &ExperimentConfig,
    tasks: &[TaskSpec],
    method: Method,
    lambda: Option<f64>,
    seed: u64,
) -> Result<(CellSummary, SequenceOutcome)> {
    let train = cfg.train_config(method, lambda, seed);
    let mut outcome = run_sequence(tasks, &cfg.architecture, &train)?;
    let report = &outcome.report;
    let dir = cfg.out_dir.join(cell_dir_name(method, report.lambda, seed));
    mkdir(&dir)?;
    report.write_json(&dir.join("report.json"))?;
    report.write_csv(&dir.join("report.csv"))?;
    crate::continual::write_train_log(&outcome.train_log, &dir.join("train_log.csv"))?;
    portable::write_file(&dir.join("state.masp"), &outcome.state_records(false))?;
    if let Some(p) = &outcome.penalty {
        histogram_of(
            &p.omega().trunk_omega(),
            cfg.diagnostics.histogram_bins,
            cfg.diagnostics.top_k,
        )?
        .write_csv(&dir.join("histogram.csv"))?;
    }
    if cfg.diagnostics.correlate_sources {
        if let Some(last) = tasks.last() {
            let mut per_source = Vec::new();
            for source in [ImportanceSource::Train, ImportanceSource::Test] {
                let c = TrainConfig {
                    importance_source: source,
                    ..train.clone()
                };
                per_source.push(estimate_importance_phase(
                    &mut outcome.net,
                    last,
                    &c,
                    outcome.si.as_ref(),
                )?);
            }
            if let [Some(a), Some(b)] = &per_source[..] {
                let k = cfg.diagnostics.top_k.min(a.trunk_omega().len());
                omega_correlation(a, b, k)?.write_csv(&dir.join("correlation.csv"))?;
            }
        }
    }
    let summary = CellSummary {
        method: report.method.clone(),
        lambda: report.lambda,
        seed,
        dir: dir
            .file_name()
            .unwrap_or_default()
            .to_string_lossy()
            .into_owned(),
        avg_acc_at_end: report.avg_acc_at_end,
        avg_forgetting: report.avg_forgetting,
        probe_forgetting: report
            .probes
            .iter()
            .map(|p| (p.name.clone(), p.forgetting))
            .collect(),
    };
    Ok((summary, outcome))
}

/// `method,lambda,seeds,avg_acc_mean,avg_acc_std,avg_forgetting_mean,avg_forgetting_std`
/// followed by `<probe>_forgetting_mean,<probe>_forgetting_std` pairs.
pub fn write_aggregate_csv(rows: &[AggregateRow], path: &Path) -> Result<()> {
    let mut w = analysis::csv_writer(path)?;
    let mut header: Vec<String> = [
        "method",
        "lambda",
        "seeds",
        "avg_acc_mean",
        "avg_acc_std",
        "avg_forgetting_mean",
        "avg_forgetting_std",
    ]
    .map(String::from)
    .to_vec();
    if let Some(r) = rows.first() {
        for (name, _, _) in &r.probes {
            header.push(format!("{name}_forgetting_mean"));
            header.push(format!("{name}_forgetting_std"));
        }
    }
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![
            r.method.clone(),
            r.lambda.to_string(),
            r.seeds.to_string(),
            r.avg_acc_mean.to_string(),
            r.avg_acc_std.to_string(),
            r.avg_forgetting_mean.to_string(),
            r.avg_forgetting_std.to_string(),
        ];
        for (_, m, s) in &r.probes {
            rec.push(m.to_string());
            rec.push(s.to_string());
        }
        w.write_record(&rec)?;
    }
    analysis::flush(w, path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub name: String,
    pub cells: Vec<CellSummary>,
    pub aggregate: Vec<AggregateRow>,
}

/// Validates, then runs every cell (serially unless `parallel` is set) and
/// writes `cells/…`, `aggregate.csv` and `summary.json` under `out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentSummary> {
    cfg.validate()?;
    let grid = cfg.grid()?;
    mkdir(&cfg.out_dir)?;
    let mut cells: Vec<CellSummary> = if cfg.parallel {
        let per_seed = cfg
            .seeds
            .iter()
            .map(|&seed| Ok((seed, build_tasks(cfg, seed)?)))
            .collect::<Result<Vec<_>>>()?;
        let jobs: Vec<_> = per_seed
            .iter()
            .flat_map(|(seed, tasks)| grid.iter().map(move |&(m, l)| (*seed, tasks, m, l)))
            .collect();
        jobs.par_iter()
            .map(|&(seed, tasks, m, l)| run_cell(cfg, tasks, m, l, seed).map(|(s, _)| s))
            .collect::<Result<_>>()?
    } else {
        // one seed's tasks in memory at a time
        let mut out = Vec::new();
        for &seed in &cfg.seeds {
            let tasks = build_tasks(cfg, seed)?;
            for &(m, l) in &grid {
                out.push(run_cell(cfg, &tasks, m, l, seed)?.0);
            }
        }
        out
    };
    // grid order, then seed, independent of execution order
    let rank = |c: &CellSummary| {
        grid.iter()
            .position(|(m, l)| m.tag() == c.method && l.is_none_or(|l| l == c.lambda))
            .unwrap_or(usize::MAX)
    };
    cells.sort_by_key(|c| (rank(c), c.seed));
    let aggregate = aggregate(&cells);
    write_aggregate_csv(&aggregate, &cfg.out_dir.join("aggregate.csv"))?;
    let summary = ExperimentSummary {
        name: cfg.name.clone(),
        cells,
        aggregate,
    };
    let file = fs::File::create(cfg.out_dir.join("summary.json"))
        .map_err(|e| Error::io("creating summary.json", e))?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(file), &summary)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_preset_is_valid() {
        for p in PRESETS {
            let cfg = parse_config("{}", Some(p)).unwrap();
            assert_eq!(cfg.violations(), Vec::<String>::new(), "{p}");
        }
    }

    #[test]
    fn overrides_are_field_by_field() {
        let cfg = parse_config(
            r#"{"preset": "synthetic-2task", "seeds": [9], "train": {"epochs": 2}}"#,
            None,
        )
        .unwrap();
        assert_eq!(cfg.seeds, vec![9]);
        assert_eq!(cfg.train.epochs, 2);
        assert_eq!(cfg.train.batch_size, 20);
    }

    #[test]
    fn violations_name_fields() {
        let cfg = parse_config(
            r#"{"seeds": [], "lambdas": [-1.0], "methods": ["mas", "lwf"]}"#,
            Some("synthetic-2task"),
        )
        .unwrap();
        let v = cfg.violations();
        assert!(v.iter().any(|s| s.starts_with("seeds")));
        assert!(v.iter().any(|s| s.starts_with("lambdas[0]")));
        assert!(v
            .iter()
            .any(|s| s.starts_with("methods[1]") && s.contains("mas-global")));
        assert_eq!(v.len(), 3);
    }

    #[test]
    fn unknown_fields_and_presets_rejected() {
        assert!(parse_config(r#"{"epochs": 3}"#, Some("embedding")).is_err());
        assert!(parse_config("{}", Some("nope")).is_err());
    }

    #[test]
    fn grid_runs_unregularized_methods_once() {
        let cfg = parse_config(
            r#"{"methods": ["finetune", "mas", "joint"], "lambdas": [0.1, 1.0]}"#,
            Some("synthetic-2task"),
        )
        .unwrap();
        let g = cfg.grid().unwrap();
        assert_eq!(
            g,
            vec![
                (Method::Finetune, None),
                (Method::MasGlobal, Some(0.1)),
                (Method::MasGlobal, Some(1.0)),
                (Method::Joint, None)
            ]
        );
    }

    #[test]
    fn mean_std_examples() {
        assert_eq!(mean_std(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
    }
}
