//! Metrics over finished runs: forgetting, memory accounting and Ω
//! diagnostics.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::continual::Method;
use crate::error::{Error, Result};
use crate::importance::ImportanceMap;

/// Accuracy on one extra evaluation set tracked through a sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub name: String,
    /// Index of the task the probe belongs to.
    pub task: usize,
    pub after_training: f64,
    pub at_end: f64,
    pub forgetting: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceReport {
    pub method: String,
    pub lambda: f64,
    pub seed: u64,
    pub tasks: Vec<String>,
    /// `accuracy[i][j]`: accuracy on task `j` after training task `i` (`j <= i`).
    pub accuracy: Vec<Vec<f64>>,
    /// Eval loss with the same indexing as `accuracy`.
    pub eval_loss: Vec<Vec<f64>>,
    pub acc_after_training: Vec<f64>,
    pub acc_at_end: Vec<f64>,
    pub forgetting: Vec<f64>,
    pub avg_acc_at_end: f64,
    /// Mean forgetting over every task except the last one, which cannot
    /// have been forgotten yet.
    pub avg_forgetting: f64,
    pub probes: Vec<ProbeRow>,
    pub memory: MemoryLedger,
    pub omega_stats: Option<OmegaSummary>,
}

impl SequenceReport {
    pub fn new(method: Method, lambda: f64, seed: u64, tasks: Vec<String>) -> Self {
        Self {
            method: method.tag().to_string(),
            lambda,
            seed,
            tasks,
            accuracy: Vec::new(),
            eval_loss: Vec::new(),
            acc_after_training: Vec::new(),
            acc_at_end: Vec::new(),
            forgetting: Vec::new(),
            avg_acc_at_end: 0.0,
            avg_forgetting: 0.0,
            probes: Vec::new(),
            memory: MemoryLedger::default(),
            omega_stats: None,
        }
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)
            .map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    /// One row per task: `task,name,acc_after_training,acc_at_end,forgetting`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Row<'a> {
            task: usize,
            name: &'a str,
            acc_after_training: f64,
            acc_at_end: f64,
            forgetting: f64,
        }
        let mut w = csv_writer(path)?;
        for (i, name) in self.tasks.iter().enumerate() {
            w.serialize(Row {
                task: i,
                name,
                acc_after_training: self.acc_after_training[i],
                acc_at_end: self.acc_at_end[i],
                forgetting: self.forgetting[i],
            })?;
        }
        flush(w, path)
    }
}

pub(crate) fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    Ok(csv::Writer::from_path(path)?)
}

pub(crate) fn flush(mut w: csv::Writer<std::fs::File>, path: &Path) -> Result<()> {
    w.flush()
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Fills `forgetting` and the averages from the two accuracy vectors.
/// Forgetting stays signed: negative values mean backward transfer.
pub fn compute_forgetting(report: &mut SequenceReport) -> Result<()> {
    let n = report.acc_after_training.len();
    if n == 0 || report.acc_at_end.len() != n {
        return Err(Error::State(format!(
            "forgetting needs matching accuracy vectors (after training: {n}, at end: {})",
            report.acc_at_end.len()
        )));
    }
    report.forgetting = report
        .acc_after_training
        .iter()
        .zip(&report.acc_at_end)
        .map(|(a, e)| a - e)
        .collect();
    report.avg_acc_at_end = report.acc_at_end.iter().sum::<f64>() / n as f64;
    report.avg_forgetting = if n > 1 {
        report.forgetting[..n - 1].iter().sum::<f64>() / (n - 1) as f64
    } else {
        0.0
    };
    for p in &mut report.probes {
        p.forgetting = p.after_training - p.at_end;
    }
    Ok(())
}

/// Float counts per stored artifact.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryBreakdown {
    pub trunk: u64,
    pub heads: u64,
    pub omega: u64,
    pub theta_star: u64,
    pub si_path: u64,
    pub si_theta_start: u64,
    pub task_snapshots: u64,
}

impl MemoryBreakdown {
    fn storage(&self) -> u64 {
        self.trunk + self.heads + self.omega + self.theta_star + self.task_snapshots
    }

    fn training_extra(&self) -> u64 {
        self.si_path + self.si_theta_start
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryLedger {
    /// Floats kept between tasks.
    pub storage_floats: u64,
    /// Floats alive while training a task (storage plus training-only state).
    pub training_floats: u64,
    pub breakdown: MemoryBreakdown,
}

/// Parameter counts of a multi-head network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetShape {
    pub trunk_params: u64,
    pub head_params_per_task: u64,
}

impl NetShape {
    /// Shape of `net`, assuming its heads all have the same size.
    pub fn of(net: &crate::nn::Network) -> Self {
        let trunk = net.layout().trunk_len() as u64;
        let heads = net.heads().len() as u64;
        let head_total = net.param_count() as u64 - trunk;
        Self {
            trunk_params: trunk,
            head_params_per_task: head_total.checked_div(heads).unwrap_or(0),
        }
    }
}

/// Closed-form float counts of `method` after `n_tasks` tasks.
///
/// Regularizer state (Ω, θ*, SI accumulators) covers trunk parameters only
/// and is a single merged copy, so it does not grow with `n_tasks`. Only the
/// task heads do, identically for every method.
pub fn memory_account(method: Method, shape: NetShape, n_tasks: u64) -> Result<MemoryLedger> {
    let t = shape.trunk_params;
    let mut b = MemoryBreakdown {
        trunk: t,
        heads: shape.head_params_per_task * n_tasks,
        ..Default::default()
    };
    match method {
        Method::Finetune | Method::Joint => {}
        Method::L2 => b.theta_star = t,
        Method::MasGlobal | Method::MasVector | Method::LocalMas | Method::Ewc => {
            b.omega = t;
            b.theta_star = t;
        }
        Method::Si => {
            b.omega = t;
            b.theta_star = t;
            b.si_path = t;
            b.si_theta_start = t;
        }
    }
    Ok(MemoryLedger {
        storage_floats: b.storage(),
        training_floats: b.storage() + b.training_extra(),
        breakdown: b,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OmegaSummary {
    pub count: usize,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub median: f64,
    pub top_k: usize,
    /// Smallest value among the `top_k` largest.
    pub top_k_threshold: f64,
    pub frac_above_10x_median: f64,
}

impl OmegaSummary {
    pub fn of(values: &[f64], top_k: usize) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Argument("empty importance map".into()));
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
        };
        let k = top_k.clamp(1, n);
        let above = values.iter().filter(|&&v| v > 10.0 * median).count();
        Ok(Self {
            count: n,
            min: sorted[0],
            max: sorted[n - 1],
            mean: values.iter().sum::<f64>() / n as f64,
            median,
            top_k: k,
            top_k_threshold: sorted[n - k],
            frac_above_10x_median: above as f64 / n as f64,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bins: Vec<HistogramBin>,
    pub summary: OmegaSummary,
}

impl Histogram {
    /// `bin,lo,hi,count`
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Row {
            bin: usize,
            lo: f64,
            hi: f64,
            count: u64,
        }
        let mut w = csv_writer(path)?;
        for (i, b) in self.bins.iter().enumerate() {
            w.serialize(Row {
                bin: i,
                lo: b.lo,
                hi: b.hi,
                count: b.count,
            })?;
        }
        flush(w, path)
    }
}

/// Equal-width histogram of trunk Ω values. When every value is equal the
/// result is one bin holding all of them.
pub fn omega_histogram(map: &ImportanceMap, bins: usize, top_k: usize) -> Result<Histogram> {
    histogram_of(&map.trunk_omega(), bins, top_k)
}

pub fn histogram_of(values: &[f64], bins: usize, top_k: usize) -> Result<Histogram> {
    if bins < 2 {
        return Err(Error::Argument(format!("need at least 2 bins, got {bins}")));
    }
    let summary = OmegaSummary::of(values, top_k)?;
    let (lo, hi) = (summary.min, summary.max);
    let bins = if hi > lo {
        let width = (hi - lo) / bins as f64;
        let mut out: Vec<HistogramBin> = (0..bins)
            .map(|i| HistogramBin {
                lo: lo + width * i as f64,
                hi: if i + 1 == bins {
                    hi
                } else {
                    lo + width * (i + 1) as f64
                },
                count: 0,
            })
            .collect();
        for &v in values {
            let i = (((v - lo) / width) as usize).min(bins - 1);
            out[i].count += 1;
        }
        out
    } else {
        vec![HistogramBin {
            lo,
            hi,
            count: values.len() as u64,
        }]
    };
    Ok(Histogram { bins, summary })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub spearman_all: f64,
    pub spearman_top_k_of_a: f64,
    pub overlap_at_k: f64,
    pub top_k: usize,
}

impl Correlation {
    /// `top_k,spearman_all,spearman_top_k_of_a,overlap_at_k`
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv_writer(path)?;
        w.serialize(self)?;
        flush(w, path)
    }
}

/// Average ranks (1-based); tied values share the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation. Identical rankings give exactly 1; a
/// constant input (undefined correlation) gives 0.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Shape(format!(
            "spearman needs equal non-empty inputs ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    if ra == rb {
        return Ok(1.0);
    }
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return Ok(0.0);
    }
    Ok((cov / (va * vb).sqrt()).clamp(-1.0, 1.0))
}

/// Indices of the `k` largest values; ties go to the lower index.
pub fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

/// Rank agreement of two importance maps over trunk parameters: on all of
/// them, on the `top_k` most important under `a`, and the overlap of the
/// two top-`k` sets.
pub fn omega_correlation(
    a: &ImportanceMap,
    b: &ImportanceMap,
    top_k: usize,
) -> Result<Correlation> {
    a.omega().check_layout(b.omega(), "omega_correlation")?;
    correlation_of(&a.trunk_omega(), &b.trunk_omega(), top_k)
}

pub fn correlation_of(a: &[f64], b: &[f64], top_k: usize) -> Result<Correlation> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("{} vs {} values", a.len(), b.len())));
    }
    if top_k == 0 || top_k > a.len() {
        return Err(Error::Argument(format!(
            "top_k must be in 1..={}, got {top_k}",
            a.len()
        )));
    }
    let top_a = top_k_indices(a, top_k);
    let top_b: std::collections::HashSet<usize> = top_k_indices(b, top_k).into_iter().collect();
    let sub_a: Vec<f64> = top_a.iter().map(|&i| a[i]).collect();
    let sub_b: Vec<f64> = top_a.iter().map(|&i| b[i]).collect();
    Ok(Correlation {
        spearman_all: spearman(a, b)?,
        spearman_top_k_of_a: spearman(&sub_a, &sub_b)?,
        overlap_at_k: top_a.iter().filter(|i| top_b.contains(i)).count() as f64 / top_k as f64,
        top_k,
    })
}
