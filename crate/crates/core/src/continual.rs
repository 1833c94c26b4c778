//! Regularized sequential training.
//!
//! Each task minimizes `L_n(θ) + λ Σ_trunk Ω_ij (θ_ij - θ*_ij)²`, where θ* is
//! the parameter vector at the end of the previous task and Ω the importance
//! accumulated over all previous tasks.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::analysis::{
    self, compute_forgetting, memory_account, NetShape, OmegaSummary, ProbeRow, SequenceReport,
};
use crate::error::{Error, Result};
use crate::importance::{
    merge_across_tasks, Accumulation, Estimator, ImportanceMap, SiAccumulator,
};
use crate::nn::grad::{grad_scalar, Aux, ObjectiveKind};
use crate::nn::{FlatParams, HeadId, Matrix, Network};
use crate::portable::{Record, Scope};
use crate::tasks::{seeded_rng, Dataset, LossKind, TaskSpec};

const INIT_STREAM: u64 = 7;
const SHUFFLE_STREAM: u64 = 1000;
const CHUNK: usize = 1024;
/// Number of top-ranked Ω values summarized in reports.
pub const SUMMARY_TOP_K: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Method {
    Finetune,
    MasGlobal,
    MasVector,
    LocalMas,
    Ewc,
    Si,
    L2,
    /// Trains on all tasks at once; a reference, not a sequential method.
    Joint,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Finetune,
        Method::MasGlobal,
        Method::MasVector,
        Method::LocalMas,
        Method::Ewc,
        Method::Si,
        Method::L2,
        Method::Joint,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Method::Finetune => "finetune",
            Method::MasGlobal => "mas-global",
            Method::MasVector => "mas-vector",
            Method::LocalMas => "l-mas",
            Method::Ewc => "ewc",
            Method::Si => "si",
            Method::L2 => "l2",
            Method::Joint => "joint",
        }
    }

    /// The importance estimator behind a regularized method.
    pub fn estimator(self) -> Option<Estimator> {
        match self {
            Method::Finetune | Method::Joint => None,
            Method::MasGlobal => Some(Estimator::MasGlobal),
            Method::MasVector => Some(Estimator::MasVector),
            Method::LocalMas => Some(Estimator::LocalMas),
            Method::Ewc => Some(Estimator::Ewc),
            Method::Si => Some(Estimator::Si),
            Method::L2 => Some(Estimator::Uniform),
        }
    }

    pub fn valid_tags() -> String {
        let mut tags: Vec<&str> = Method::ALL.iter().map(|m| m.tag()).collect();
        tags.insert(2, "mas");
        tags.join(", ")
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "mas" {
            return Ok(Method::MasGlobal);
        }
        Method::ALL
            .into_iter()
            .find(|m| m.tag() == s)
            .ok_or_else(|| Error::UnknownMethod {
                tag: s.to_owned(),
                valid: Method::valid_tags(),
            })
    }
}

impl TryFrom<String> for Method {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Method> for String {
    fn from(m: Method) -> String {
        m.tag().to_owned()
    }
}

/// Which points the importance pass runs over after a task is trained.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum ImportanceSource {
    #[default]
    #[serde(rename = "train")]
    Train,
    #[serde(rename = "test")]
    Test,
    #[serde(rename = "train+test")]
    TrainTest,
    #[serde(rename = "custom-subset")]
    CustomSubset,
    #[serde(rename = "none")]
    None,
}

/// Default regularization strength for a task type.
pub fn default_lambda(loss: LossKind) -> f64 {
    match loss {
        LossKind::SoftmaxClassification { .. } => 1.0,
        LossKind::L2Embedding => 5.0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub method: Method,
    /// `None` picks [`default_lambda`] for the first task's loss.
    pub lambda: Option<f64>,
    pub importance_source: ImportanceSource,
    pub accumulation: Accumulation,
    pub si_xi: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 100,
            lr: 0.1,
            seed: 0,
            method: Method::MasGlobal,
            lambda: None,
            importance_source: ImportanceSource::Train,
            accumulation: Accumulation::Sum,
            si_xi: SiAccumulator::DEFAULT_XI,
        }
    }
}

impl TrainConfig {
    /// Every violated constraint, prefixed with `prefix`.
    pub fn violations(&self, prefix: &str) -> Vec<String> {
        let mut v = Vec::new();
        if self.epochs < 1 {
            v.push(format!("{prefix}epochs: must be >= 1"));
        }
        if self.batch_size < 1 {
            v.push(format!("{prefix}batch_size: must be >= 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            v.push(format!("{prefix}lr: must be > 0, got {}", self.lr));
        }
        if let Some(l) = self.lambda {
            if !(l >= 0.0 && l.is_finite()) {
                v.push(format!("{prefix}lambda: must be >= 0, got {l}"));
            }
        }
        if !(self.si_xi > 0.0 && self.si_xi.is_finite()) {
            v.push(format!("{prefix}si_xi: must be > 0, got {}", self.si_xi));
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations("");
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(v))
        }
    }

    /// Penalty strength in effect; zero for methods without a penalty.
    pub fn lambda_for(&self, loss: LossKind) -> f64 {
        if self.method.estimator().is_none() {
            return 0.0;
        }
        self.lambda.unwrap_or_else(|| default_lambda(loss))
    }
}

/// The `(θ*, Ω, λ)` triple of the quadratic penalty.
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyState {
    theta_star: FlatParams,
    omega: ImportanceMap,
    lambda: f64,
}

impl PenaltyState {
    pub fn new(theta_star: FlatParams, omega: ImportanceMap, lambda: f64) -> Result<Self> {
        theta_star.check_layout(omega.omega(), "penalty")?;
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::Argument(format!(
                "lambda must be >= 0, got {lambda}"
            )));
        }
        Ok(Self {
            theta_star,
            omega,
            lambda,
        })
    }

    pub fn theta_star(&self) -> &FlatParams {
        &self.theta_star
    }

    pub fn omega(&self) -> &ImportanceMap {
        &self.omega
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// One update that is explicit in the task gradient and implicit in the
    /// penalty: `θ' = (θ - lr·g + 2·lr·λ·Ω·θ*) / (1 + 2·lr·λ·Ω)`.
    ///
    /// This minimizes the linearized task loss plus the exact quadratic
    /// penalty around `θ`, so it stays stable for any `lr·λ·Ω`, where an
    /// explicit gradient step diverges once `2·lr·λ·Ω > 2`. Where `Ω = 0`
    /// (heads included) it is exactly `θ - lr·g`.
    pub fn proximal_step(
        &self,
        theta: &FlatParams,
        task_grad: &FlatParams,
        lr: f64,
    ) -> Result<FlatParams> {
        theta.check_layout(&self.theta_star, "proximal_step")?;
        theta.check_layout(task_grad, "proximal_step")?;
        let mask = theta.layout().trunk_mask();
        let omega = self.omega.omega().values();
        let star = self.theta_star.values();
        let mut out = theta.clone();
        for (i, v) in out.values_mut().iter_mut().enumerate() {
            let explicit = *v - lr * task_grad.values()[i];
            *v = if mask[i] {
                let k = 2.0 * lr * self.lambda * omega[i];
                (explicit + k * star[i]) / (1.0 + k)
            } else {
                explicit
            };
        }
        Ok(out)
    }

    /// Penalty value at `theta` and its gradient added into `grad`.
    fn apply(&self, theta: &FlatParams, grad: &mut FlatParams) -> Result<f64> {
        theta.check_layout(&self.theta_star, "penalty")?;
        let mask = theta.layout().trunk_mask();
        let omega = self.omega.omega().values();
        let star = self.theta_star.values();
        let mut value = 0.0;
        for (i, g) in grad.values_mut().iter_mut().enumerate() {
            if !mask[i] {
                continue;
            }
            let d = theta.values()[i] - star[i];
            value += omega[i] * d * d;
            *g += 2.0 * self.lambda * omega[i] * d;
        }
        Ok(self.lambda * value)
    }
}

#[derive(Debug, Clone)]
pub struct RegularizedLoss {
    pub value: f64,
    pub task_value: f64,
    pub penalty_value: f64,
    pub grad: FlatParams,
    /// Gradient of the task loss alone.
    pub task_grad: FlatParams,
}

/// Task loss plus the quadratic penalty, with the exact gradient. The
/// penalty touches trunk indices only.
pub fn regularized_loss(
    net: &Network,
    x: &Matrix,
    head: Option<HeadId>,
    kind: ObjectiveKind,
    aux: Aux<'_>,
    penalty: Option<&PenaltyState>,
) -> Result<RegularizedLoss> {
    let task = grad_scalar(net, x, head, kind, aux)?;
    let mut grad = task.grad.clone();
    let penalty_value = match penalty {
        Some(p) => p.apply(&net.params(), &mut grad)?,
        None => 0.0,
    };
    Ok(RegularizedLoss {
        value: task.value + penalty_value,
        task_value: task.value,
        penalty_value,
        grad,
        task_grad: task.grad,
    })
}

pub fn task_objective(loss: LossKind) -> ObjectiveKind {
    match loss {
        LossKind::SoftmaxClassification { .. } => ObjectiveKind::CrossEntropy,
        LossKind::L2Embedding => ObjectiveKind::L2Regression,
    }
}

struct Batch {
    x: Matrix,
    labels: Option<Vec<usize>>,
    targets: Option<Matrix>,
}

impl Batch {
    fn of(ds: &Dataset, idx: &[usize]) -> Self {
        Self {
            x: ds.inputs().select_rows(idx),
            labels: ds.labels().map(|l| idx.iter().map(|&i| l[i]).collect()),
            targets: ds.regression_targets().map(|t| t.select_rows(idx)),
        }
    }

    fn aux(&self) -> Aux<'_> {
        match (&self.labels, &self.targets) {
            (Some(l), _) => Aux::Labels(l),
            (_, Some(t)) => Aux::Targets(t),
            _ => Aux::None,
        }
    }
}

/// One row of the per-epoch training log. `task` is empty for joint
/// training, where every epoch covers all tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub task: Option<usize>,
    pub epoch: usize,
    pub loss: f64,
    pub task_loss: f64,
    pub penalty: f64,
}

/// `task,epoch,loss,task_loss,penalty`
pub fn write_train_log(rows: &[TrainLogRow], path: &std::path::Path) -> Result<()> {
    let mut w = analysis::csv_writer(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    analysis::flush(w, path)
}

#[derive(Debug, Clone)]
pub struct TaskTraining {
    pub log: Vec<TrainLogRow>,
    /// The SI path accumulated over this task, when the method is SI.
    pub si: Option<SiAccumulator>,
}

#[derive(Default)]
struct EpochStats {
    loss: f64,
    task_loss: f64,
    penalty: f64,
    batches: usize,
}

impl EpochStats {
    fn add(&mut self, l: &RegularizedLoss) {
        self.loss += l.value;
        self.task_loss += l.task_value;
        self.penalty += l.penalty_value;
        self.batches += 1;
    }

    fn row(&self, task: Option<usize>, epoch: usize) -> TrainLogRow {
        let n = self.batches.max(1) as f64;
        TrainLogRow {
            task,
            epoch,
            loss: self.loss / n,
            task_loss: self.task_loss / n,
            penalty: self.penalty / n,
        }
    }
}

/// One SGD step on a batch of `task`, feeding the SI path when present.
fn sgd_batch(
    net: &mut Network,
    task: &TaskSpec,
    idx: &[usize],
    lr: f64,
    penalty: Option<&PenaltyState>,
    si: Option<&mut SiAccumulator>,
) -> Result<RegularizedLoss> {
    let batch = Batch::of(&task.train, idx);
    let loss = regularized_loss(
        net,
        &batch.x,
        task.head,
        task_objective(task.loss),
        batch.aux(),
        penalty,
    )?;
    let before = net.params();
    let after = match penalty {
        Some(p) => p.proximal_step(&before, &loss.task_grad, lr)?,
        None => crate::nn::sgd_step(&before, &loss.task_grad, lr)?,
    };
    net.set_params(&after)?;
    if let Some(si) = si {
        si.step(&loss.task_grad, &after.sub(&before)?)?;
    }
    Ok(loss)
}

fn check_trainable(net: &Network, task: &TaskSpec) -> Result<()> {
    if task.train.is_empty() {
        return Err(Error::Config(format!(
            "task `{}` has no training points",
            task.name
        )));
    }
    if let Some(h) = task.head {
        if !net.has_head(h) {
            return Err(Error::UnknownHead(h));
        }
    }
    Ok(())
}

fn effective_penalty(penalty: Option<&PenaltyState>) -> Option<&PenaltyState> {
    // λ = 0 skips the penalty entirely so the trajectory matches plain
    // finetuning bit for bit
    penalty.filter(|p| p.lambda > 0.0)
}

/// Minibatch SGD over `task` with an optional penalty from earlier tasks.
/// The penalty enters through [`PenaltyState::proximal_step`]. Other heads
/// receive a zero gradient and stay bit-identical.
pub fn train_task(
    net: &mut Network,
    task: &TaskSpec,
    task_index: usize,
    cfg: &TrainConfig,
    penalty: Option<&PenaltyState>,
) -> Result<TaskTraining> {
    cfg.validate()?;
    check_trainable(net, task)?;
    let penalty = effective_penalty(penalty);
    let mut rng = seeded_rng(cfg.seed, SHUFFLE_STREAM + task_index as u64);
    let mut si = if cfg.method == Method::Si {
        Some(SiAccumulator::new(net.params(), cfg.si_xi)?)
    } else {
        None
    };
    let mut order: Vec<usize> = (0..task.train.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut stats = EpochStats::default();
        for idx in order.chunks(cfg.batch_size) {
            let loss = sgd_batch(net, task, idx, cfg.lr, penalty, si.as_mut())?;
            stats.add(&loss);
        }
        log.push(stats.row(Some(task_index), epoch));
    }
    Ok(TaskTraining { log, si })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub accuracy: f64,
    pub loss: f64,
}

fn log_softmax_at(row: &[f64], y: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row[y] - lse
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Classification: argmax accuracy and mean cross-entropy. Embedding:
/// retrieval accuracy (the nearest target in the set is the point's own)
/// and mean squared error norm.
pub fn evaluate(net: &Network, task: &TaskSpec, ds: &Dataset) -> Result<EvalResult> {
    if ds.is_empty() {
        return Err(Error::Argument(format!("`{}` is empty", ds.name)));
    }
    let n = ds.len();
    let mut outputs = Vec::with_capacity(n);
    let all: Vec<usize> = (0..n).collect();
    for idx in all.chunks(CHUNK) {
        let out = net.predict(&ds.inputs().select_rows(idx), task.head)?;
        outputs.push(out);
    }
    let rows = || {
        outputs
            .iter()
            .flat_map(|m| (0..m.rows()).map(move |r| m.row(r)))
    };
    match task.loss {
        LossKind::SoftmaxClassification { .. } => {
            let labels = ds
                .labels()
                .ok_or_else(|| Error::Argument(format!("`{}` has no labels", ds.name)))?;
            let (mut correct, mut loss) = (0usize, 0.0);
            for (row, &y) in rows().zip(labels) {
                correct += usize::from(argmax(row) == y);
                loss -= log_softmax_at(row, y);
            }
            Ok(EvalResult {
                accuracy: correct as f64 / n as f64,
                loss: loss / n as f64,
            })
        }
        LossKind::L2Embedding => {
            let targets = ds
                .regression_targets()
                .ok_or_else(|| Error::Argument(format!("`{}` has no targets", ds.name)))?;
            let dist = |a: &[f64], b: &[f64]| -> f64 {
                a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
            };
            let (mut correct, mut loss) = (0usize, 0.0);
            for (i, row) in rows().enumerate() {
                let own = dist(row, targets.row(i));
                loss += own;
                let nearest = (0..n)
                    .map(|j| (dist(row, targets.row(j)), j))
                    .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
                    .map(|(_, j)| j);
                correct += usize::from(nearest == Some(i));
            }
            Ok(EvalResult {
                accuracy: correct as f64 / n as f64,
                loss: loss / n as f64,
            })
        }
    }
}

/// The points the importance pass runs over, with labels still attached.
pub fn importance_data(task: &TaskSpec, source: ImportanceSource) -> Result<Option<Dataset>> {
    Ok(match source {
        ImportanceSource::Train => Some(task.train.clone()),
        ImportanceSource::Test => Some(task.eval.clone()),
        ImportanceSource::TrainTest => Some(
            task.train
                .concat(&task.eval, format!("{}/train+test", task.name))?,
        ),
        ImportanceSource::CustomSubset => match &task.importance_set {
            Some(d) if !d.is_empty() => Some(d.clone()),
            _ => {
                return Err(Error::Config(format!(
                    "task `{}` has no importance subset",
                    task.name
                )))
            }
        },
        ImportanceSource::None => None,
    })
}

/// Runs the configured estimator over the configured points of a trained
/// task. Labels are removed first except for EWC, whose Fisher is defined
/// through them. SI is finalized from the path accumulated in training.
pub fn estimate_importance_phase(
    net: &mut Network,
    task: &TaskSpec,
    cfg: &TrainConfig,
    si: Option<&SiAccumulator>,
) -> Result<Option<ImportanceMap>> {
    let Some(estimator) = cfg.method.estimator() else {
        return Ok(None);
    };
    match estimator {
        Estimator::Uniform => return Ok(Some(ImportanceMap::uniform(net.layout().clone()))),
        Estimator::Si => {
            let si = si.ok_or_else(|| Error::State("SI needs the training path".into()))?;
            return si.finalize(&net.params()).map(Some);
        }
        _ => {}
    }
    let Some(data) = importance_data(task, cfg.importance_source)? else {
        return Ok(None);
    };
    if estimator == Estimator::Ewc && task.loss == LossKind::L2Embedding {
        return Err(Error::UnsupportedObjective(
            "EWC Fisher needs a classification likelihood".into(),
        ));
    }
    let labels = if estimator == Estimator::Ewc {
        Some(
            data.labels()
                .ok_or_else(|| {
                    Error::UnsupportedObjective(format!(
                        "EWC needs labeled points but `{}` has none",
                        data.name
                    ))
                })?
                .to_vec(),
        )
    } else {
        None
    };
    let data = data.unlabeled();
    let mut map = ImportanceMap::new(estimator, net.layout().clone());
    let all: Vec<usize> = (0..data.len()).collect();
    for idx in all.chunks(CHUNK) {
        let x = data.inputs().select_rows(idx);
        match estimator {
            Estimator::MasGlobal => map.mas_update(net, &x, task.head)?,
            Estimator::MasVector => map.mas_update_vector_output(net, &x, task.head)?,
            Estimator::LocalMas => map.hebbian_update(net, &x)?,
            Estimator::Ewc => {
                let l = labels.as_ref().expect("checked above");
                let y: Vec<usize> = idx.iter().map(|&i| l[i]).collect();
                map.ewc_fisher_update(net, &x, &y, task.head)?
            }
            Estimator::Si | Estimator::Uniform => unreachable!("handled above"),
        }
    }
    Ok(Some(map))
}

/// Hidden-layer widths of the shared trunk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub hidden: Vec<usize>,
}

/// Seeded network for a task list: a ReLU trunk plus one linear head per
/// distinct head id, or, when no task owns a head, a headless network whose
/// final Identity trunk layer produces the shared output.
pub fn build_network(tasks: &[TaskSpec], arch: &Architecture, seed: u64) -> Result<Network> {
    let first = tasks
        .first()
        .ok_or_else(|| Error::Config("a sequence needs at least one task".into()))?;
    let dim = first.train.dim();
    if let Some(t) = tasks.iter().find(|t| t.train.dim() != dim) {
        return Err(Error::Config(format!(
            "task `{}` has {} features, expected {dim}",
            t.name,
            t.train.dim()
        )));
    }
    let mut rng = seeded_rng(seed, INIT_STREAM);
    let headless = tasks.iter().all(|t| t.head.is_none());
    if !headless && tasks.iter().any(|t| t.head.is_none()) {
        return Err(Error::Config(
            "a sequence cannot mix headless tasks with tasks that own a head".into(),
        ));
    }
    let width = |t: &TaskSpec| match t.loss {
        LossKind::SoftmaxClassification { classes } => classes,
        LossKind::L2Embedding => t.train.regression_targets().map_or(0, Matrix::cols),
    };
    if headless {
        let out = width(first);
        if let Some(t) = tasks.iter().find(|t| width(t) != out) {
            return Err(Error::Config(format!(
                "task `{}` needs {} outputs but the shared output has {out}",
                t.name,
                width(t)
            )));
        }
        return Network::mlp(dim, &arch.hidden, Some(out), &mut rng);
    }
    let mut net = Network::mlp(dim, &arch.hidden, None, &mut rng)?;
    for t in tasks {
        let h = t.head.expect("checked above");
        if net.has_head(h) {
            if net.output_dim(Some(h))? != width(t) {
                return Err(Error::Config(format!(
                    "{h} is shared by tasks of different widths"
                )));
            }
        } else {
            net.add_linear_head(h, width(t), &mut rng)?;
        }
    }
    Ok(net)
}

#[derive(Debug, Clone)]
pub struct SequenceOutcome {
    pub report: SequenceReport,
    pub net: Network,
    /// The penalty the next task would train against.
    pub penalty: Option<PenaltyState>,
    /// The SI accumulator of the last task (training-time state).
    pub si: Option<SiAccumulator>,
    pub train_log: Vec<TrainLogRow>,
}

impl SequenceOutcome {
    /// Records of every float the method keeps: the model, plus Ω and θ*
    /// over the trunk for regularized methods. With `training` set, the SI
    /// accumulator state alive during a task is included too.
    pub fn state_records(&self, training: bool) -> Vec<Record> {
        let mut out = vec![Record::Params {
            name: "model".into(),
            scope: Scope::All,
            params: self.net.params(),
        }];
        if let Some(p) = &self.penalty {
            if p.omega.method() != Estimator::Uniform {
                out.push(Record::Importance {
                    name: "omega".into(),
                    scope: Scope::TrunkOnly,
                    map: p.omega.clone(),
                });
            }
            out.push(Record::Params {
                name: "theta-star".into(),
                scope: Scope::TrunkOnly,
                params: p.theta_star.clone(),
            });
        }
        if let (true, Some(si)) = (training, &self.si) {
            out.push(Record::Params {
                name: "si-path".into(),
                scope: Scope::TrunkOnly,
                params: si.path().clone(),
            });
            out.push(Record::Params {
                name: "si-theta-start".into(),
                scope: Scope::TrunkOnly,
                params: si.theta_start().clone(),
            });
        }
        out
    }
}

fn evaluate_seen(net: &Network, tasks: &[TaskSpec], upto: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut acc = Vec::with_capacity(upto + 1);
    let mut loss = Vec::with_capacity(upto + 1);
    for t in &tasks[..=upto] {
        let r = evaluate(net, t, &t.eval)?;
        acc.push(r.accuracy);
        loss.push(r.loss);
    }
    Ok((acc, loss))
}

fn task_probes(net: &Network, task: &TaskSpec, index: usize) -> Result<Vec<(String, usize, f64)>> {
    task.probes
        .iter()
        .map(|p| Ok((p.name.clone(), index, evaluate(net, task, p)?.accuracy)))
        .collect()
}

fn probe_accuracies(net: &Network, tasks: &[TaskSpec]) -> Result<Vec<(String, usize, f64)>> {
    let mut out = Vec::new();
    for (i, t) in tasks.iter().enumerate() {
        out.extend(task_probes(net, t, i)?);
    }
    Ok(out)
}

fn finish_report(
    report: &mut SequenceReport,
    net: &Network,
    tasks: &[TaskSpec],
    method: Method,
    omega: Option<&ImportanceMap>,
) -> Result<()> {
    let n = tasks.len();
    report.acc_after_training = (0..n).map(|i| report.accuracy[i][i]).collect();
    report.acc_at_end = report.accuracy[n - 1].clone();
    report.memory = memory_account(method, NetShape::of(net), n as u64)?;
    report.omega_stats = omega
        .map(|m| OmegaSummary::of(&m.trunk_omega(), SUMMARY_TOP_K))
        .transpose()?;
    compute_forgetting(report)
}

/// Learns `tasks` one after another. After each task: evaluate every task
/// seen so far, estimate importance on the chosen points, merge it into the
/// running Ω and snapshot θ*.
pub fn run_sequence(
    tasks: &[TaskSpec],
    arch: &Architecture,
    cfg: &TrainConfig,
) -> Result<SequenceOutcome> {
    if cfg.method == Method::Joint {
        return joint_train(tasks, arch, cfg);
    }
    cfg.validate()?;
    let mut net = build_network(tasks, arch, cfg.seed)?;
    let lambda = cfg.lambda_for(tasks[0].loss);
    let mut report = SequenceReport::new(
        cfg.method,
        lambda,
        cfg.seed,
        tasks.iter().map(|t| t.name.clone()).collect(),
    );
    let mut penalty: Option<PenaltyState> = None;
    let mut merged: Option<ImportanceMap> = None;
    let mut train_log = Vec::new();
    let mut last_si = None;
    let mut probe_after: Vec<(String, usize, f64)> = Vec::new();

    for (i, task) in tasks.iter().enumerate() {
        let trained = train_task(&mut net, task, i, cfg, penalty.as_ref())?;
        train_log.extend(trained.log);

        let (acc, loss) = evaluate_seen(&net, tasks, i)?;
        report.accuracy.push(acc);
        report.eval_loss.push(loss);
        probe_after.extend(task_probes(&net, task, i)?);

        let task_map = estimate_importance_phase(&mut net, task, cfg, trained.si.as_ref())?;
        merged = match (merged, task_map) {
            (_, Some(m)) if m.method() == Estimator::Uniform => Some(m),
            (Some(old), Some(new)) => Some(merge_across_tasks(&old, &new, cfg.accumulation)?),
            (None, new) => new,
            (old, None) => old,
        };
        if let Some(m) = &merged {
            penalty = Some(PenaltyState::new(net.params(), m.clone(), lambda)?);
        }
        last_si = trained.si;
    }

    let end = probe_accuracies(&net, tasks)?;
    report.probes = probe_after
        .into_iter()
        .zip(end)
        .map(|((name, task, after), (_, _, at_end))| ProbeRow {
            name,
            task,
            after_training: after,
            at_end,
            forgetting: 0.0,
        })
        .collect();
    finish_report(&mut report, &net, tasks, cfg.method, merged.as_ref())?;
    Ok(SequenceOutcome {
        report,
        net,
        penalty,
        si: last_si,
        train_log,
    })
}

/// Reference run on the union of all tasks: every epoch interleaves one
/// batch per task in round-robin order, each through its own head.
pub fn joint_train(
    tasks: &[TaskSpec],
    arch: &Architecture,
    cfg: &TrainConfig,
) -> Result<SequenceOutcome> {
    cfg.validate()?;
    let mut net = build_network(tasks, arch, cfg.seed)?;
    for t in tasks {
        check_trainable(&net, t)?;
    }
    let mut rngs: Vec<_> = (0..tasks.len())
        .map(|i| seeded_rng(cfg.seed, SHUFFLE_STREAM + i as u64))
        .collect();
    let mut orders: Vec<Vec<usize>> = tasks.iter().map(|t| (0..t.train.len()).collect()).collect();
    let mut train_log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        for (o, rng) in orders.iter_mut().zip(&mut rngs) {
            o.shuffle(rng);
        }
        let chunks: Vec<Vec<&[usize]>> = orders
            .iter()
            .map(|o| o.chunks(cfg.batch_size).collect())
            .collect();
        let rounds = chunks.iter().map(Vec::len).max().unwrap_or(0);
        let mut stats = EpochStats::default();
        for r in 0..rounds {
            for (t, c) in chunks.iter().enumerate() {
                if let Some(idx) = c.get(r) {
                    stats.add(&sgd_batch(&mut net, &tasks[t], idx, cfg.lr, None, None)?);
                }
            }
        }
        let task = (tasks.len() == 1).then_some(0);
        train_log.push(stats.row(task, epoch));
    }
    let mut report = SequenceReport::new(
        Method::Joint,
        0.0,
        cfg.seed,
        tasks.iter().map(|t| t.name.clone()).collect(),
    );
    let last = tasks.len() - 1;
    let (acc, loss) = evaluate_seen(&net, tasks, last)?;
    // every task is "trained" at the same time, so each row repeats the end state
    for i in 0..tasks.len() {
        report.accuracy.push(acc[..=i].to_vec());
        report.eval_loss.push(loss[..=i].to_vec());
    }
    report.probes = probe_accuracies(&net, tasks)?
        .into_iter()
        .map(|(name, task, a)| ProbeRow {
            name,
            task,
            after_training: a,
            at_end: a,
            forgetting: 0.0,
        })
        .collect();
    finish_report(&mut report, &net, tasks, Method::Joint, None)?;
    Ok(SequenceOutcome {
        report,
        net,
        penalty: None,
        si: None,
        train_log,
    })
}
