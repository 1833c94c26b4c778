//! Reverse-mode gradients of scalar objectives through dense layers.
//!
//! The layer set is closed (dense + ReLU/Identity), so backpropagation is
//! written out per layer instead of going through a general tape. Batch
//! objectives are the mean of the per-sample objective.

use serde::{Deserialize, Serialize};

use super::matrix::{gemm, Matrix};
use super::network::{Network, Trace};
use super::params::{FlatParams, HeadId, Segment};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectiveKind {
    /// `‖F(x)‖²`
    SquaredL2Output,
    /// `-log softmax(F(x))[label]`
    CrossEntropy,
    /// `‖F(x) - target‖²`
    L2Regression,
    /// `log softmax(F(x))[label]`
    LogProbOfLabel,
    /// `F(x)[component]`
    SingleOutputComponent,
}

impl ObjectiveKind {
    pub const ALL: [ObjectiveKind; 5] = [
        ObjectiveKind::SquaredL2Output,
        ObjectiveKind::CrossEntropy,
        ObjectiveKind::L2Regression,
        ObjectiveKind::LogProbOfLabel,
        ObjectiveKind::SingleOutputComponent,
    ];
}

/// Objective-specific payload.
#[derive(Debug, Clone, Copy)]
pub enum Aux<'a> {
    None,
    Labels(&'a [usize]),
    Targets(&'a Matrix),
    Component(usize),
}

#[derive(Debug, Clone)]
pub struct ValueAndGrad {
    pub value: f64,
    pub grad: FlatParams,
}

/// How per-sample gradients are folded together by [`per_sample_grad_sum`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    /// `Σ_k |g_k|`
    Abs,
    /// `Σ_k g_k²`
    Square,
}

fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

fn labels_for<'a>(
    aux: Aux<'a>,
    n: usize,
    classes: usize,
    kind: ObjectiveKind,
) -> Result<&'a [usize]> {
    let Aux::Labels(labels) = aux else {
        return Err(Error::Argument(format!("{kind:?} requires labels")));
    };
    if labels.len() != n {
        return Err(Error::Argument(format!(
            "{} labels for {n} samples",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Argument(format!(
            "label {bad} out of range for {classes} outputs"
        )));
    }
    Ok(labels)
}

/// Per-sample objective values and per-sample `∂L_k/∂F_k` (not averaged).
pub(crate) fn output_gradient(
    kind: ObjectiveKind,
    aux: Aux<'_>,
    out: &Matrix,
) -> Result<(Vec<f64>, Matrix)> {
    let (n, c) = (out.rows(), out.cols());
    let mut values = Vec::with_capacity(n);
    let mut d = Matrix::zeros(n, c);
    match kind {
        ObjectiveKind::SquaredL2Output => {
            for k in 0..n {
                let row = out.row(k);
                values.push(row.iter().map(|v| v * v).sum());
                for (dv, v) in d.row_mut(k).iter_mut().zip(row) {
                    *dv = 2.0 * v;
                }
            }
        }
        ObjectiveKind::CrossEntropy | ObjectiveKind::LogProbOfLabel => {
            let labels = labels_for(aux, n, c, kind)?;
            // CE = -log p_y, dCE/dF = p - e_y; the log-prob is its negation
            let sign = if kind == ObjectiveKind::CrossEntropy {
                1.0
            } else {
                -1.0
            };
            for (k, &y) in labels.iter().enumerate() {
                let lp = log_softmax_row(out.row(k));
                values.push(-sign * lp[y]);
                for (j, dv) in d.row_mut(k).iter_mut().enumerate() {
                    let onehot = if j == y { 1.0 } else { 0.0 };
                    *dv = sign * (lp[j].exp() - onehot);
                }
            }
        }
        ObjectiveKind::L2Regression => {
            let Aux::Targets(t) = aux else {
                return Err(Error::Argument("L2Regression requires targets".into()));
            };
            if (t.rows(), t.cols()) != (n, c) {
                return Err(Error::Argument(format!(
                    "targets are {}x{}, outputs are {n}x{c}",
                    t.rows(),
                    t.cols()
                )));
            }
            for k in 0..n {
                let mut v = 0.0;
                for (j, dv) in d.row_mut(k).iter_mut().enumerate() {
                    let r = out.get(k, j) - t.get(k, j);
                    v += r * r;
                    *dv = 2.0 * r;
                }
                values.push(v);
            }
        }
        ObjectiveKind::SingleOutputComponent => {
            let Aux::Component(o) = aux else {
                return Err(Error::Argument(
                    "SingleOutputComponent requires a component index".into(),
                ));
            };
            if o >= c {
                return Err(Error::Argument(format!(
                    "component {o} out of range for {c} outputs"
                )));
            }
            for k in 0..n {
                values.push(out.get(k, o));
                d.set(k, o, 1.0);
            }
        }
    }
    Ok((values, d))
}

/// Walks the trace backwards. `visit` receives the segment, `∂L/∂z` of that
/// layer (one row per sample) and the layer input.
pub(crate) fn backward_walk(
    net: &Network,
    trace: &Trace,
    d_out: Matrix,
    mut visit: impl FnMut(&Segment, &Matrix, &Matrix),
) {
    let layout = net.layout().clone();
    let mut d_act = d_out;
    for pos in (0..trace.layers.len()).rev() {
        let id = trace.layers[pos];
        let layer = net.layer(id).expect("trace layers exist");
        let seg = layout.segment(id).expect("layer in layout");
        let (input, output) = trace.layer_io(pos);
        let act = layer.activation();
        let mut dz = d_act;
        for (dv, &y) in dz.data_mut().iter_mut().zip(output.data()) {
            *dv *= act.derivative_from_output(y);
        }
        visit(seg, &dz, input);
        if pos > 0 {
            let mut prev = Matrix::zeros(dz.rows(), layer.in_dim());
            gemm(1.0, &dz, false, layer.weights(), false, 0.0, &mut prev);
            d_act = prev;
        } else {
            break;
        }
    }
}

/// Exact gradient of the batch-mean objective with respect to every
/// parameter. Parameters off the forward path get zero gradient.
pub fn grad_scalar(
    net: &Network,
    x: &Matrix,
    head: Option<HeadId>,
    kind: ObjectiveKind,
    aux: Aux<'_>,
) -> Result<ValueAndGrad> {
    let trace = net.trace(x, head)?;
    grad_from_trace(net, &trace, kind, aux)
}

pub(crate) fn grad_from_trace(
    net: &Network,
    trace: &Trace,
    kind: ObjectiveKind,
    aux: Aux<'_>,
) -> Result<ValueAndGrad> {
    let n = trace.output().rows();
    if n == 0 {
        return Err(Error::Argument("empty batch".into()));
    }
    let (values, mut d) = output_gradient(kind, aux, trace.output())?;
    let inv_n = 1.0 / n as f64;
    d.data_mut().iter_mut().for_each(|v| *v *= inv_n);
    let mut grad = FlatParams::zeros(net.layout().clone());
    backward_walk(net, trace, d, |seg, dz, input| {
        let mut dw = Matrix::zeros(seg.out_dim, seg.in_dim);
        gemm(1.0, dz, true, input, false, 0.0, &mut dw);
        let g = grad.values_mut();
        g[seg.weights_range()].copy_from_slice(dw.data());
        let bias = &mut g[seg.bias_range()];
        for k in 0..dz.rows() {
            for (b, v) in bias.iter_mut().zip(dz.row(k)) {
                *b += v;
            }
        }
    });
    Ok(ValueAndGrad {
        value: values.iter().sum::<f64>() * inv_n,
        grad,
    })
}

/// `Σ_k reduce(∂L_k/∂θ)` over the samples of `x`, without materializing
/// per-sample gradients.
///
/// A dense weight's per-sample gradient is the outer product `dz_k ⊗ x_k`, so
/// `|dz_k,o · x_k,i| = |dz_k,o| · |x_k,i|` and the sums reduce to one GEMM per
/// layer (likewise for squares).
pub fn per_sample_grad_sum(
    net: &Network,
    x: &Matrix,
    head: Option<HeadId>,
    kind: ObjectiveKind,
    aux: Aux<'_>,
    reduction: Reduction,
) -> Result<FlatParams> {
    let trace = net.trace(x, head)?;
    per_sample_sum_from_trace(net, &trace, kind, aux, reduction)
}

pub(crate) fn per_sample_sum_from_trace(
    net: &Network,
    trace: &Trace,
    kind: ObjectiveKind,
    aux: Aux<'_>,
    reduction: Reduction,
) -> Result<FlatParams> {
    let (_, d) = output_gradient(kind, aux, trace.output())?;
    let f = match reduction {
        Reduction::Abs => f64::abs,
        Reduction::Square => |v: f64| v * v,
    };
    let mut acc = FlatParams::zeros(net.layout().clone());
    backward_walk(net, trace, d, |seg, dz, input| {
        let dz_r = dz.map(f);
        let in_r = input.map(f);
        let mut dw = Matrix::zeros(seg.out_dim, seg.in_dim);
        gemm(1.0, &dz_r, true, &in_r, false, 0.0, &mut dw);
        let a = acc.values_mut();
        a[seg.weights_range()].copy_from_slice(dw.data());
        let bias = &mut a[seg.bias_range()];
        for k in 0..dz_r.rows() {
            for (b, v) in bias.iter_mut().zip(dz_r.row(k)) {
                *b += v;
            }
        }
    });
    Ok(acc)
}

/// Batch-mean objective value.
pub fn objective_value(
    net: &Network,
    x: &Matrix,
    head: Option<HeadId>,
    kind: ObjectiveKind,
    aux: Aux<'_>,
) -> Result<f64> {
    let out = net.predict(x, head)?;
    let (values, _) = output_gradient(kind, aux, &out)?;
    Ok(values.iter().sum::<f64>() / values.len().max(1) as f64)
}

/// Gradient coordinates smaller than this are compared on an absolute scale;
/// central differences carry ~1e-10 absolute round-off at step 1e-5.
pub const FD_REL_FLOOR: f64 = 1e-3;

/// Relative error used by [`fd_check`].
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(FD_REL_FLOOR)
}

/// Central finite differences against [`grad_scalar`]; returns the worst
/// coordinate-wise relative error.
pub fn fd_check(
    net: &Network,
    x: &Matrix,
    head: Option<HeadId>,
    kind: ObjectiveKind,
    aux: Aux<'_>,
    step: f64,
) -> Result<f64> {
    if step.is_nan() || step <= 0.0 {
        return Err(Error::Argument(format!("step must be > 0, got {step}")));
    }
    let analytic = grad_scalar(net, x, head, kind, aux)?;
    let base = net.params();
    let mut probe = net.clone();
    let mut worst = 0.0f64;
    let mut p = base.clone();
    for i in 0..base.len() {
        let orig = base.values()[i];
        p.values_mut()[i] = orig + step;
        probe.set_params(&p)?;
        let plus = objective_value(&probe, x, head, kind, aux)?;
        p.values_mut()[i] = orig - step;
        probe.set_params(&p)?;
        let minus = objective_value(&probe, x, head, kind, aux)?;
        p.values_mut()[i] = orig;
        let fd = (plus - minus) / (2.0 * step);
        worst = worst.max(relative_error(fd, analytic.grad.values()[i]));
    }
    Ok(worst)
}

/// Smallest `|z|` over all ReLU pre-activations on the path; `INFINITY` when
/// there are none.
pub fn min_relu_margin(net: &Network, x: &Matrix, head: Option<HeadId>) -> Result<f64> {
    let trace = net.trace(x, head)?;
    let mut margin = f64::INFINITY;
    for (pos, id) in trace.layers.iter().enumerate() {
        let layer = net.layer(*id).expect("trace layers exist");
        if layer.activation() != super::layer::Activation::Relu {
            continue;
        }
        let input = &trace.activations[pos];
        let mut z = Matrix::zeros(input.rows(), layer.out_dim());
        gemm(1.0, input, false, layer.weights(), true, 0.0, &mut z);
        for k in 0..z.rows() {
            for (v, b) in z.row(k).iter().zip(layer.bias()) {
                margin = margin.min((v + b).abs());
            }
        }
    }
    Ok(margin)
}
