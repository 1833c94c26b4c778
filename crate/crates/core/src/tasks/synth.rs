//! Seeded synthetic tasks.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{seeded_rng, Dataset, LossKind, Targets, TaskSpec};
use crate::error::{Error, Result};
use crate::nn::{HeadId, Matrix};

/// Number of eval points out of `m`; at least one point always trains.
fn eval_count(m: usize) -> usize {
    m / 5
}

/// Gaussian blobs with unit-variance noise around `classes` means drawn
/// uniformly on the unit sphere and scaled by `spread`. Each class is split
/// 80/20 into train and eval. When a class has fewer than five points the
/// eval split reuses the training points.
pub fn synth_classification(
    seed: u64,
    classes: usize,
    dim: usize,
    per_class: usize,
    spread: f64,
) -> Result<TaskSpec> {
    if classes < 2 || per_class < 1 || dim < 1 {
        return Err(Error::Argument(format!(
            "need classes >= 2, per_class >= 1, dim >= 1 (got {classes}, {per_class}, {dim})"
        )));
    }
    if !(spread.is_finite() && spread >= 0.0) {
        return Err(Error::Argument(format!(
            "spread must be finite and >= 0, got {spread}"
        )));
    }
    let mut rng = seeded_rng(seed, 1);
    let means: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = v
                .iter()
                .map(|x| x * x)
                .sum::<f64>()
                .sqrt()
                .max(f64::MIN_POSITIVE);
            v.iter_mut().for_each(|x| *x *= spread / norm);
            v
        })
        .collect();

    let n_eval = eval_count(per_class);
    let mut train = (Vec::new(), Vec::new());
    let mut eval = (Vec::new(), Vec::new());
    for (c, mean) in means.iter().enumerate() {
        for i in 0..per_class {
            let point: Vec<f64> = mean
                .iter()
                .map(|&mu| mu + Distribution::<f64>::sample(&StandardNormal, &mut rng))
                .collect();
            let dst = if i < per_class - n_eval {
                &mut train
            } else {
                &mut eval
            };
            dst.0.extend(point);
            dst.1.push(c);
        }
    }
    if eval.1.is_empty() {
        eval = train.clone();
    }
    let build = |(x, labels): (Vec<f64>, Vec<usize>), name: &str| -> Result<Dataset> {
        let n = labels.len();
        Dataset::new(
            name,
            Matrix::from_vec(n, dim, x)?,
            Targets::Classes { labels, classes },
        )
    };
    let name = format!("blobs-{seed}");
    TaskSpec::new(
        name.clone(),
        build(train, &format!("{name}/train"))?,
        build(eval, &format!("{name}/eval"))?,
        LossKind::SoftmaxClassification { classes },
        Some(HeadId(0)),
    )
}

/// Regression onto `t = W x + ε` with `x ~ N(0, I)`, a seeded map
/// `W ~ N(0, 1/dim_in)` and `ε ~ U(-noise, noise)`. Headless: the network's
/// last trunk layer produces the embedding directly.
pub fn synth_embedding(
    seed: u64,
    dim_in: usize,
    dim_out: usize,
    n: usize,
    noise: f64,
) -> Result<TaskSpec> {
    if dim_in < 1 || dim_out < 1 || n < 1 {
        return Err(Error::Argument(format!(
            "need dims >= 1 and n >= 1 (got {dim_in}, {dim_out}, {n})"
        )));
    }
    if !(noise.is_finite() && noise >= 0.0) {
        return Err(Error::Argument(format!(
            "noise must be finite and >= 0, got {noise}"
        )));
    }
    let mut rng = seeded_rng(seed, 2);
    let scale = (dim_in as f64).sqrt().recip();
    let w: Vec<f64> = (0..dim_in * dim_out)
        .map(|_| scale * Distribution::<f64>::sample(&StandardNormal, &mut rng))
        .collect();
    let x: Vec<f64> = (0..n * dim_in)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let mut t = vec![0.0; n * dim_out];
    for i in 0..n {
        let xi = &x[i * dim_in..(i + 1) * dim_in];
        for o in 0..dim_out {
            let wo = &w[o * dim_in..(o + 1) * dim_in];
            let eps = if noise > 0.0 {
                rng.gen_range(-noise..=noise)
            } else {
                0.0
            };
            t[i * dim_out + o] = wo.iter().zip(xi).map(|(a, b)| a * b).sum::<f64>() + eps;
        }
    }
    let inputs = Matrix::from_vec(n, dim_in, x)?;
    let targets = Matrix::from_vec(n, dim_out, t)?;
    let n_eval = eval_count(n);
    let n_train = n - n_eval;
    let train_idx: Vec<usize> = (0..n_train).collect();
    let eval_idx: Vec<usize> = if n_eval == 0 {
        train_idx.clone()
    } else {
        (n_train..n).collect()
    };
    let name = format!("embed-{seed}");
    let all = Dataset::new(name.clone(), inputs, Targets::Regression(targets))?;
    TaskSpec::new(
        name.clone(),
        all.select(&train_idx).with_name(format!("{name}/train")),
        all.select(&eval_idx).with_name(format!("{name}/eval")),
        LossKind::L2Embedding,
        None,
    )
}
