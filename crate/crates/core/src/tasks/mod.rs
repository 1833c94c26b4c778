//! Datasets and task construction.

mod idx;
mod mnist;
mod synth;

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{HeadId, Matrix};

pub use idx::{load_idx, write_idx};
pub use mnist::{load_mnist_dir, permuted_mnist, PermutedMnist, MNIST_DIM};
pub use synth::{synth_classification, synth_embedding};

/// Seeded generator for an independent stream derived from `seed`.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    None,
    Classes { labels: Vec<usize>, classes: usize },
    Regression(Matrix),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    inputs: Matrix,
    targets: Targets,
}

impl Dataset {
    pub fn new(name: impl Into<String>, inputs: Matrix, targets: Targets) -> Result<Self> {
        let n = inputs.rows();
        match &targets {
            Targets::None => {}
            Targets::Classes { labels, classes } => {
                if labels.len() != n {
                    return Err(Error::Shape(format!(
                        "{} labels for {n} inputs",
                        labels.len()
                    )));
                }
                if let Some(bad) = labels.iter().find(|&&l| l >= *classes) {
                    return Err(Error::Argument(format!(
                        "label {bad} outside [0, {classes})"
                    )));
                }
            }
            Targets::Regression(t) => {
                if t.rows() != n {
                    return Err(Error::Shape(format!("{} targets for {n} inputs", t.rows())));
                }
            }
        }
        Ok(Self {
            name: name.into(),
            inputs,
            targets,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn inputs(&self) -> &Matrix {
        &self.inputs
    }

    pub fn targets(&self) -> &Targets {
        &self.targets
    }

    pub fn labels(&self) -> Option<&[usize]> {
        match &self.targets {
            Targets::Classes { labels, .. } => Some(labels),
            _ => None,
        }
    }

    pub fn classes(&self) -> Option<usize> {
        match &self.targets {
            Targets::Classes { classes, .. } => Some(*classes),
            _ => None,
        }
    }

    pub fn regression_targets(&self) -> Option<&Matrix> {
        match &self.targets {
            Targets::Regression(t) => Some(t),
            _ => None,
        }
    }

    /// Same inputs with labels and targets removed.
    pub fn unlabeled(&self) -> Dataset {
        Dataset {
            name: self.name.clone(),
            inputs: self.inputs.clone(),
            targets: Targets::None,
        }
    }

    pub fn select(&self, indices: &[usize]) -> Dataset {
        let targets = match &self.targets {
            Targets::None => Targets::None,
            Targets::Classes { labels, classes } => Targets::Classes {
                labels: indices.iter().map(|&i| labels[i]).collect(),
                classes: *classes,
            },
            Targets::Regression(t) => Targets::Regression(t.select_rows(indices)),
        };
        Dataset {
            name: self.name.clone(),
            inputs: self.inputs.select_rows(indices),
            targets,
        }
    }

    /// Rows of `self` followed by rows of `other`; targets are kept only when
    /// both sides carry the same kind.
    pub fn concat(&self, other: &Dataset, name: impl Into<String>) -> Result<Dataset> {
        let inputs = self.inputs.vstack(&other.inputs)?;
        let targets = match (&self.targets, &other.targets) {
            (
                Targets::Classes {
                    labels: a,
                    classes: ca,
                },
                Targets::Classes {
                    labels: b,
                    classes: cb,
                },
            ) => Targets::Classes {
                labels: a.iter().chain(b).copied().collect(),
                classes: (*ca).max(*cb),
            },
            (Targets::Regression(a), Targets::Regression(b)) => Targets::Regression(a.vstack(b)?),
            _ => Targets::None,
        };
        Dataset::new(name, inputs, targets)
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum LossKind {
    SoftmaxClassification { classes: usize },
    L2Embedding,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub name: String,
    pub train: Dataset,
    pub eval: Dataset,
    pub loss: LossKind,
    /// Output head; `None` means the trunk output itself is the prediction
    /// (embedding mode, or one output layer shared by every task).
    pub head: Option<HeadId>,
    /// Unlabeled points for importance estimation when the configured source
    /// is a custom subset.
    pub importance_set: Option<Dataset>,
    /// Extra evaluation sets tracked through the sequence (e.g. the subset an
    /// importance map was specialized to, and its complement).
    pub probes: Vec<Dataset>,
}

impl TaskSpec {
    pub fn new(
        name: impl Into<String>,
        train: Dataset,
        eval: Dataset,
        loss: LossKind,
        head: Option<HeadId>,
    ) -> Result<Self> {
        if train.dim() != eval.dim() {
            return Err(Error::Shape(format!(
                "train has {} features, eval has {}",
                train.dim(),
                eval.dim()
            )));
        }
        match loss {
            LossKind::SoftmaxClassification { classes } => {
                for d in [&train, &eval] {
                    match d.classes() {
                        Some(c) if c <= classes => {}
                        _ => {
                            return Err(Error::Argument(format!(
                                "dataset `{}` lacks labels in [0, {classes})",
                                d.name
                            )))
                        }
                    }
                }
            }
            LossKind::L2Embedding => {
                for d in [&train, &eval] {
                    if d.regression_targets().is_none() {
                        return Err(Error::Argument(format!(
                            "dataset `{}` lacks regression targets",
                            d.name
                        )));
                    }
                }
            }
        }
        Ok(Self {
            name: name.into(),
            train,
            eval,
            loss,
            head,
            importance_set: None,
            probes: Vec::new(),
        })
    }

    pub fn with_head(mut self, head: HeadId) -> Self {
        if self.head.is_some() {
            self.head = Some(head);
        }
        self
    }
}

/// Bijection over pixel indices: output pixel `i` takes input pixel
/// `mapping[i]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Permutation {
    mapping: Vec<usize>,
    seed: Option<u64>,
}

impl Permutation {
    pub fn identity(d: usize) -> Self {
        Self {
            mapping: (0..d).collect(),
            seed: None,
        }
    }

    pub fn random(seed: u64, d: usize) -> Self {
        let mut mapping: Vec<usize> = (0..d).collect();
        mapping.shuffle(&mut seeded_rng(seed, 0x9e37));
        Self {
            mapping,
            seed: Some(seed),
        }
    }

    pub fn from_mapping(mapping: Vec<usize>) -> Result<Self> {
        let mut sorted = mapping.clone();
        sorted.sort_unstable();
        if sorted.iter().enumerate().any(|(i, &v)| i != v) {
            return Err(Error::Argument("mapping is not a bijection".into()));
        }
        Ok(Self {
            mapping,
            seed: None,
        })
    }

    pub fn mapping(&self) -> &[usize] {
        &self.mapping
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.mapping.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mapping.is_empty()
    }

    pub fn inverse(&self) -> Permutation {
        let mut inv = vec![0; self.mapping.len()];
        for (i, &m) in self.mapping.iter().enumerate() {
            inv[m] = i;
        }
        Permutation {
            mapping: inv,
            seed: None,
        }
    }
}

/// Re-indexes every input row by `perm`; labels are untouched.
pub fn permuted_task(base: &Dataset, perm: &Permutation) -> Result<Dataset> {
    if perm.len() != base.dim() {
        return Err(Error::Shape(format!(
            "permutation over {} indices applied to {} features",
            perm.len(),
            base.dim()
        )));
    }
    let src = base.inputs();
    let mut out = Matrix::zeros(src.rows(), src.cols());
    for r in 0..src.rows() {
        let row = src.row(r);
        for (o, &m) in out.row_mut(r).iter_mut().zip(perm.mapping()) {
            *o = row[m];
        }
    }
    Dataset::new(base.name.clone(), out, base.targets().clone())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Predicate {
    Labels(BTreeSet<usize>),
    Indices(BTreeSet<usize>),
}

pub fn select_subset(ds: &Dataset, predicate: &Predicate) -> Result<Dataset> {
    let indices: Vec<usize> = match predicate {
        Predicate::Labels(set) => {
            let labels = ds
                .labels()
                .ok_or_else(|| Error::Argument(format!("`{}` has no labels", ds.name)))?;
            (0..ds.len())
                .filter(|&i| set.contains(&labels[i]))
                .collect()
        }
        Predicate::Indices(set) => {
            if let Some(&bad) = set.iter().find(|&&i| i >= ds.len()) {
                return Err(Error::Argument(format!(
                    "index {bad} out of range for {} points",
                    ds.len()
                )));
            }
            set.iter().copied().collect()
        }
    };
    if indices.is_empty() {
        return Err(Error::Config(format!(
            "subset predicate selects no points of `{}`",
            ds.name
        )));
    }
    Ok(ds.select(&indices))
}

/// Class-stratified seeded subsample of `n` points (largest-remainder
/// allocation), returned in original order.
pub fn stratified_subsample(ds: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    let labels = ds
        .labels()
        .ok_or_else(|| Error::Argument("stratified subsampling needs labels".into()))?;
    if n >= ds.len() {
        return Ok(ds.clone());
    }
    let classes = ds.classes().unwrap_or(0);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let total = ds.len();
    let mut quota: Vec<usize> = by_class.iter().map(|c| c.len() * n / total).collect();
    let mut remainders: Vec<(usize, usize)> = by_class
        .iter()
        .enumerate()
        .map(|(c, idx)| ((idx.len() * n) % total, c))
        .collect();
    remainders.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let missing = n - quota.iter().sum::<usize>();
    for &(_, c) in remainders.iter().take(missing) {
        quota[c] += 1;
    }
    let mut rng = seeded_rng(seed, 0x5eed);
    let mut chosen = Vec::with_capacity(n);
    for (c, mut idx) in by_class.into_iter().enumerate() {
        idx.shuffle(&mut rng);
        chosen.extend_from_slice(&idx[..quota[c]]);
    }
    chosen.sort_unstable();
    Ok(ds.select(&chosen))
}
