//! MNIST directory layout and the permuted-MNIST sequence.

use std::path::{Path, PathBuf};

use super::{
    load_idx, permuted_task, stratified_subsample, Dataset, LossKind, Permutation, TaskSpec,
};
use crate::error::{Error, Result};
use crate::nn::HeadId;

/// Pixels per MNIST image.
pub const MNIST_DIM: usize = 784;

fn find(dir: &Path, stem: &str) -> Result<PathBuf> {
    for name in [format!("{stem}.gz"), stem.to_owned()] {
        let p = dir.join(name);
        if p.is_file() {
            return Ok(p);
        }
    }
    Err(Error::io(
        format!("looking for {stem}[.gz] in {}", dir.display()),
        std::io::Error::from(std::io::ErrorKind::NotFound),
    ))
}

/// Loads the `train-*` and `t10k-*` IDX pairs from `dir`, gzipped or not.
pub fn load_mnist_dir(dir: &Path) -> Result<(Dataset, Dataset)> {
    let train = load_idx(
        &find(dir, "train-images-idx3-ubyte")?,
        &find(dir, "train-labels-idx1-ubyte")?,
        "mnist-train",
    )?;
    let test = load_idx(
        &find(dir, "t10k-images-idx3-ubyte")?,
        &find(dir, "t10k-labels-idx1-ubyte")?,
        "mnist-test",
    )?;
    Ok((train, test))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PermutedMnist {
    pub tasks: usize,
    /// Class-stratified training subsample; `None` keeps the whole set.
    pub train_subsample: Option<usize>,
    pub seed: u64,
    /// Whether the first task sees unpermuted digits.
    pub identity_first: bool,
    /// One ten-way output layer shared by all tasks (part of the trunk)
    /// instead of one head per task.
    pub shared_head: bool,
}

/// One task per permutation, each with its own ten-way head unless
/// `shared_head` is set.
pub fn permuted_mnist(
    train: &Dataset,
    test: &Dataset,
    spec: &PermutedMnist,
) -> Result<Vec<TaskSpec>> {
    if spec.tasks == 0 {
        return Err(Error::Config(
            "permuted MNIST needs at least one task".into(),
        ));
    }
    let train = match spec.train_subsample {
        Some(n) => stratified_subsample(train, n, spec.seed)?,
        None => train.clone(),
    };
    (0..spec.tasks)
        .map(|i| {
            let perm = if i == 0 && spec.identity_first {
                Permutation::identity(train.dim())
            } else {
                Permutation::random(
                    spec.seed.wrapping_mul(1_000_003).wrapping_add(i as u64),
                    train.dim(),
                )
            };
            let name = format!("pmnist-{i}");
            TaskSpec::new(
                name.clone(),
                permuted_task(&train, &perm)?.with_name(format!("{name}/train")),
                permuted_task(test, &perm)?.with_name(format!("{name}/eval")),
                LossKind::SoftmaxClassification { classes: 10 },
                (!spec.shared_head).then_some(HeadId(i as u32)),
            )
        })
        .collect()
}
