//! Per-parameter importance estimators.
//!
//! * MAS (global): `Ω_ij = 1/N Σ_k |∂‖F(x_k)‖² / ∂θ_ij|`, one backward pass per
//!   point, labels never used.
//! * MAS (vector output): `Ω_ij = 1/N Σ_k Σ_o |∂F_o(x_k) / ∂θ_ij|`, one
//!   backward pass per output component.
//! * l-MAS (Hebbian): per trunk layer `Ω_ij = 1/N Σ_k |y_i^k · y_j^k|` with
//!   `y_i` the layer input and `y_j` its post-activation output; the bias sees
//!   an input of 1.
//! * EWC: empirical diagonal Fisher `1/N Σ_k (∂ log p(y_k|x_k) / ∂θ)²`.
//! * SI: path integral of `-g · Δθ` over the training steps, normalized by the
//!   squared total displacement plus a damping term.
//!
//! Heads are unshared, so every estimator leaves head entries at zero.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::grad::{per_sample_grad_sum, Aux, ObjectiveKind, Reduction};
use crate::nn::{FlatParams, HeadId, LayerId, Matrix, Network, ParamLayout};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Estimator {
    MasGlobal,
    MasVector,
    #[serde(rename = "l-mas")]
    LocalMas,
    Ewc,
    Si,
    /// Constant importance 1 on the trunk (plain L2 penalty).
    Uniform,
}

impl Estimator {
    pub const ALL: [Estimator; 6] = [
        Estimator::MasGlobal,
        Estimator::MasVector,
        Estimator::LocalMas,
        Estimator::Ewc,
        Estimator::Si,
        Estimator::Uniform,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Estimator::MasGlobal => "mas-global",
            Estimator::MasVector => "mas-vector",
            Estimator::LocalMas => "l-mas",
            Estimator::Ewc => "ewc",
            Estimator::Si => "si",
            Estimator::Uniform => "uniform",
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Estimator::MasGlobal => 1,
            Estimator::MasVector => 2,
            Estimator::LocalMas => 3,
            Estimator::Ewc => 4,
            Estimator::Si => 5,
            Estimator::Uniform => 6,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        Estimator::ALL.into_iter().find(|e| e.code() == code)
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Estimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Estimator::ALL
            .into_iter()
            .find(|e| e.tag() == s)
            .ok_or_else(|| Error::UnknownMethod {
                tag: s.to_owned(),
                valid: Estimator::ALL.map(Estimator::tag).join(", "),
            })
    }
}

/// How per-task maps combine across a sequence.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Accumulation {
    #[default]
    Sum,
    Mean,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceMap {
    method: Estimator,
    omega: FlatParams,
    samples_seen: u64,
    /// Per-task sample counts of merged maps; empty while still accumulating
    /// a single task.
    task_samples: Vec<u64>,
}

impl ImportanceMap {
    pub fn new(method: Estimator, layout: Arc<ParamLayout>) -> Self {
        Self {
            method,
            omega: FlatParams::zeros(layout),
            samples_seen: 0,
            task_samples: Vec::new(),
        }
    }

    /// Plain L2 regularizer: Ω = 1 on every trunk parameter.
    pub fn uniform(layout: Arc<ParamLayout>) -> Self {
        Self {
            method: Estimator::Uniform,
            omega: FlatParams::trunk_filled(layout, 1.0),
            samples_seen: 0,
            task_samples: Vec::new(),
        }
    }

    pub(crate) fn from_parts(
        method: Estimator,
        omega: FlatParams,
        samples_seen: u64,
        task_samples: Vec<u64>,
    ) -> Result<Self> {
        if omega.values().iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Argument(
                "importance values must be finite and non-negative".into(),
            ));
        }
        Ok(Self {
            method,
            omega,
            samples_seen,
            task_samples,
        })
    }

    pub fn method(&self) -> Estimator {
        self.method
    }

    pub fn omega(&self) -> &FlatParams {
        &self.omega
    }

    pub fn samples_seen(&self) -> u64 {
        self.samples_seen
    }

    /// Sample count of each task folded into this map.
    pub fn task_samples(&self) -> Vec<u64> {
        if self.task_samples.is_empty() {
            vec![self.samples_seen]
        } else {
            self.task_samples.clone()
        }
    }

    pub(crate) fn raw_task_samples(&self) -> &[u64] {
        &self.task_samples
    }

    pub fn trunk_omega(&self) -> Vec<f64> {
        self.omega.trunk_values()
    }

    fn expect_method(&self, want: Estimator) -> Result<()> {
        if self.method == want {
            Ok(())
        } else {
            Err(Error::MethodMismatch {
                left: self.method.tag().into(),
                right: want.tag().into(),
            })
        }
    }

    fn expect_layout(&self, net: &Network) -> Result<()> {
        if **self.omega.layout() == **net.layout() {
            Ok(())
        } else {
            Err(Error::Shape(
                "importance map layout does not match network".into(),
            ))
        }
    }

    /// Folds `n` new points whose summed contributions are `batch_sum` into
    /// the running mean.
    fn absorb(&mut self, mut batch_sum: FlatParams, n: u64) {
        if n == 0 {
            return;
        }
        batch_sum.mask_to_trunk();
        let total = (self.samples_seen + n) as f64;
        let nf = n as f64;
        for (w, s) in self.omega.values_mut().iter_mut().zip(batch_sum.values()) {
            *w += (s - nf * *w) / total;
        }
        self.samples_seen += n;
    }

    /// MAS with the squared ℓ2 norm of the output: one backward pass per
    /// point.
    pub fn mas_update(&mut self, net: &Network, x: &Matrix, head: Option<HeadId>) -> Result<()> {
        self.expect_method(Estimator::MasGlobal)?;
        self.expect_layout(net)?;
        let sum = per_sample_grad_sum(
            net,
            x,
            head,
            ObjectiveKind::SquaredL2Output,
            Aux::None,
            Reduction::Abs,
        )?;
        self.absorb(sum, x.rows() as u64);
        Ok(())
    }

    /// MAS on the raw vector output: one backward pass per output component.
    pub fn mas_update_vector_output(
        &mut self,
        net: &Network,
        x: &Matrix,
        head: Option<HeadId>,
    ) -> Result<()> {
        self.expect_method(Estimator::MasVector)?;
        self.expect_layout(net)?;
        let mut total = FlatParams::zeros(net.layout().clone());
        for o in 0..net.output_dim(head)? {
            let s = per_sample_grad_sum(
                net,
                x,
                head,
                ObjectiveKind::SingleOutputComponent,
                Aux::Component(o),
                Reduction::Abs,
            )?;
            total.axpy(1.0, &s)?;
        }
        self.absorb(total, x.rows() as u64);
        Ok(())
    }

    /// Local (Hebbian) MAS: runs a trunk forward pass on `x` and folds the
    /// resulting activations in.
    pub fn hebbian_update(&mut self, net: &mut Network, x: &Matrix) -> Result<()> {
        net.forward(x, None)?;
        self.hebbian_from_cache(net)
    }

    /// Hebbian contributions from the activations cached by the last
    /// [`Network::forward`].
    ///
    /// The rule multiplies each layer's input activation with its
    /// post-activation output. For ReLU layers twice this product is exactly
    /// the gradient of the layer's squared output norm; Identity layers reuse
    /// the same product.
    pub fn hebbian_from_cache(&mut self, net: &Network) -> Result<()> {
        self.expect_method(Estimator::LocalMas)?;
        self.expect_layout(net)?;
        let trace = net
            .last_trace()
            .ok_or_else(|| Error::State("hebbian update needs a prior forward pass".into()))?;
        let n = trace.activations[0].rows();
        let mut sum = FlatParams::zeros(net.layout().clone());
        for (pos, id) in trace.layers.iter().enumerate() {
            if !matches!(id, LayerId::Trunk(_)) {
                continue;
            }
            let seg = net.layout().segment(*id).expect("trace layer in layout");
            let (input, output) = trace.layer_io(pos);
            let y_in = input.map(f64::abs);
            let y_out = output.map(f64::abs);
            let mut w = Matrix::zeros(seg.out_dim, seg.in_dim);
            crate::nn::matrix::gemm(1.0, &y_out, true, &y_in, false, 0.0, &mut w);
            let s = sum.values_mut();
            s[seg.weights_range()].copy_from_slice(w.data());
            let bias = &mut s[seg.bias_range()];
            for k in 0..n {
                for (b, v) in bias.iter_mut().zip(y_out.row(k)) {
                    *b += v;
                }
            }
        }
        self.absorb(sum, n as u64);
        Ok(())
    }

    /// Empirical diagonal Fisher with ground-truth labels.
    pub fn ewc_fisher_update(
        &mut self,
        net: &Network,
        x: &Matrix,
        labels: &[usize],
        head: Option<HeadId>,
    ) -> Result<()> {
        self.expect_method(Estimator::Ewc)?;
        self.expect_layout(net)?;
        if net.output_dim(head)? < 2 {
            return Err(Error::UnsupportedObjective(
                "EWC Fisher needs a softmax output over at least two classes".into(),
            ));
        }
        let sum = per_sample_grad_sum(
            net,
            x,
            head,
            ObjectiveKind::LogProbOfLabel,
            Aux::Labels(labels),
            Reduction::Square,
        )?;
        self.absorb(sum, x.rows() as u64);
        Ok(())
    }
}

/// Combines per-task maps. With [`Accumulation::Sum`] the result is the
/// elementwise sum; with [`Accumulation::Mean`] it is the mean over tasks.
pub fn merge_across_tasks(
    old: &ImportanceMap,
    new: &ImportanceMap,
    mode: Accumulation,
) -> Result<ImportanceMap> {
    if old.method != new.method {
        return Err(Error::MethodMismatch {
            left: old.method.tag().into(),
            right: new.method.tag().into(),
        });
    }
    old.omega.check_layout(&new.omega, "merge_across_tasks")?;
    let mut tasks = old.task_samples();
    let n_old = tasks.len() as f64;
    tasks.extend(new.task_samples());
    let mut omega = old.omega.clone();
    match mode {
        Accumulation::Sum => {
            for (a, b) in omega.values_mut().iter_mut().zip(new.omega.values()) {
                *a += b;
            }
        }
        Accumulation::Mean => {
            let n_new = new.task_samples().len() as f64;
            for (a, b) in omega.values_mut().iter_mut().zip(new.omega.values()) {
                *a = (*a * n_old + b * n_new) / (n_old + n_new);
            }
        }
    }
    Ok(ImportanceMap {
        method: old.method,
        omega,
        samples_seen: old.samples_seen + new.samples_seen,
        task_samples: tasks,
    })
}

/// Synaptic-intelligence path accumulator for one task.
#[derive(Debug, Clone, PartialEq)]
pub struct SiAccumulator {
    path: FlatParams,
    theta_start: FlatParams,
    xi: f64,
    steps: u64,
}

impl SiAccumulator {
    pub const DEFAULT_XI: f64 = 0.1;

    pub fn new(theta_start: FlatParams, xi: f64) -> Result<Self> {
        if !(xi > 0.0 && xi.is_finite()) {
            return Err(Error::Argument(format!("SI damping must be > 0, got {xi}")));
        }
        Ok(Self {
            path: FlatParams::zeros_like(&theta_start),
            theta_start,
            xi,
            steps: 0,
        })
    }

    pub fn path(&self) -> &FlatParams {
        &self.path
    }

    pub fn theta_start(&self) -> &FlatParams {
        &self.theta_start
    }

    pub fn xi(&self) -> f64 {
        self.xi
    }

    /// `path += -grad_before · delta_theta`.
    pub fn step(&mut self, grad_before: &FlatParams, delta_theta: &FlatParams) -> Result<()> {
        self.path.check_layout(grad_before, "si_step")?;
        self.path.check_layout(delta_theta, "si_step")?;
        for ((p, g), d) in self
            .path
            .values_mut()
            .iter_mut()
            .zip(grad_before.values())
            .zip(delta_theta.values())
        {
            *p -= g * d;
        }
        self.steps += 1;
        Ok(())
    }

    /// `Ω = max(0, path) / ((θ_end - θ_start)² + ξ)` on the trunk.
    pub fn finalize(&self, theta_end: &FlatParams) -> Result<ImportanceMap> {
        self.theta_start.check_layout(theta_end, "si_finalize")?;
        let mut omega = FlatParams::zeros_like(theta_end);
        for (i, w) in omega.values_mut().iter_mut().enumerate() {
            let d = theta_end.values()[i] - self.theta_start.values()[i];
            *w = self.path.values()[i].max(0.0) / (d * d + self.xi);
        }
        omega.mask_to_trunk();
        Ok(ImportanceMap {
            method: Estimator::Si,
            omega,
            samples_seen: self.steps,
            task_samples: Vec::new(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::grad::grad_scalar;
    use crate::nn::{sgd_step, Activation, DenseLayer};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar_net(theta: f64) -> Network {
        Network::new(vec![DenseLayer::new(
            Matrix::from_vec(1, 1, vec![theta]).unwrap(),
            vec![0.0],
            Activation::Identity,
        )
        .unwrap()])
        .unwrap()
    }

    fn random_x(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Matrix {
        Matrix::from_vec(n, d, (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn mas_linear_example() {
        let net = scalar_net(2.0);
        let mut map = ImportanceMap::new(Estimator::MasGlobal, net.layout().clone());
        map.mas_update(&net, &Matrix::row_vector(&[3.0]).unwrap(), None)
            .unwrap();
        assert_eq!(map.omega().values()[0], 36.0);
        assert_eq!(map.samples_seen(), 1);
    }

    #[test]
    fn mas_zero_input_bias_free_relu_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Network::mlp(3, &[4, 4], Some(2), &mut rng).unwrap();
        let mut map = ImportanceMap::new(Estimator::MasGlobal, net.layout().clone());
        map.mas_update(&net, &Matrix::zeros(5, 3), None).unwrap();
        assert!(map.omega().values().iter().all(|&v| v == 0.0));
        let mut vec_map = ImportanceMap::new(Estimator::MasVector, net.layout().clone());
        vec_map
            .mas_update_vector_output(&net, &Matrix::zeros(1, 3), None)
            .unwrap();
        // weights see a zero input; biases of the final identity layer do not
        let last = net.layout().segment(LayerId::Trunk(2)).unwrap().clone();
        for (i, v) in vec_map.omega().values().iter().enumerate() {
            if !last.bias_range().contains(&i) {
                assert_eq!(*v, 0.0);
            }
        }
    }

    #[test]
    fn identical_points_batch_equals_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = Network::mlp(3, &[5], Some(2), &mut rng).unwrap();
        let point = random_x(&mut rng, 1, 3);
        let batch = point.select_rows(&[0, 0, 0, 0]);
        let mut a = ImportanceMap::new(Estimator::MasGlobal, net.layout().clone());
        a.mas_update(&net, &batch, None).unwrap();
        let mut b = ImportanceMap::new(Estimator::MasGlobal, net.layout().clone());
        for _ in 0..4 {
            b.mas_update(&net, &point, None).unwrap();
        }
        for (x, y) in a.omega().values().iter().zip(b.omega().values()) {
            assert!((x - y).abs() <= 1e-14 * y.abs());
        }
        assert_eq!(a.samples_seen(), b.samples_seen());
    }

    #[test]
    fn scalar_output_global_is_two_abs_f_times_vector() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Network::mlp(4, &[6], Some(1), &mut rng).unwrap();
        let x = random_x(&mut rng, 1, 4);
        let f = net.predict(&x, None).unwrap().get(0, 0);
        let mut g = ImportanceMap::new(Estimator::MasGlobal, net.layout().clone());
        g.mas_update(&net, &x, None).unwrap();
        let mut v = ImportanceMap::new(Estimator::MasVector, net.layout().clone());
        v.mas_update_vector_output(&net, &x, None).unwrap();
        for (a, b) in g.omega().values().iter().zip(v.omega().values()) {
            assert!((a - 2.0 * f.abs() * b).abs() <= 1e-12 * a.abs().max(1e-300));
        }
    }

    #[test]
    fn vector_output_two_by_two_by_hand() {
        // F = W x with W = [[1, 0], [0, 2]], x = [3, -1]
        // ∂F_0/∂W_0i = x_i, ∂F_1/∂W_1i = x_i, others 0, ∂F_o/∂b_o = 1
        let net = Network::new(vec![DenseLayer::new(
            Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 2.0]).unwrap(),
            vec![0.0, 0.0],
            Activation::Identity,
        )
        .unwrap()])
        .unwrap();
        let mut m = ImportanceMap::new(Estimator::MasVector, net.layout().clone());
        m.mas_update_vector_output(&net, &Matrix::row_vector(&[3.0, -1.0]).unwrap(), None)
            .unwrap();
        assert_eq!(m.omega().values(), &[3.0, 1.0, 3.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn hebbian_elementwise_product() {
        // input [1, 2], output relu([3, -5]) = [3, 0]
        let net_layer = DenseLayer::new(
            Matrix::from_vec(2, 2, vec![1.0, 1.0, -1.0, -2.0]).unwrap(),
            vec![0.0, 0.0],
            Activation::Relu,
        )
        .unwrap();
        let mut net = Network::new(vec![net_layer]).unwrap();
        let mut m = ImportanceMap::new(Estimator::LocalMas, net.layout().clone());
        m.hebbian_update(&mut net, &Matrix::row_vector(&[1.0, 2.0]).unwrap())
            .unwrap();
        // stored out x in: [[3, 6], [0, 0]], i.e. [[3,0],[6,0]] indexed in x out
        assert_eq!(m.omega().values(), &[3.0, 6.0, 0.0, 0.0, 3.0, 0.0]);
    }

    #[test]
    fn hebbian_needs_forward_pass() {
        let net = scalar_net(1.0);
        let mut m = ImportanceMap::new(Estimator::LocalMas, net.layout().clone());
        assert!(matches!(m.hebbian_from_cache(&net), Err(Error::State(_))));
    }

    #[test]
    fn hebbian_is_half_layer_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let layer = DenseLayer::glorot(5, 4, Activation::Relu, &mut rng).unwrap();
        let mut net = Network::new(vec![layer]).unwrap();
        let x = random_x(&mut rng, 1, 5).map(f64::abs);
        let g = grad_scalar(&net, &x, None, ObjectiveKind::SquaredL2Output, Aux::None).unwrap();
        let mut m = ImportanceMap::new(Estimator::LocalMas, net.layout().clone());
        m.hebbian_update(&mut net, &x).unwrap();
        for (h, g) in m.omega().values().iter().zip(g.grad.values()) {
            assert!((2.0 * h - g).abs() <= 1e-12 * g.abs().max(1e-300));
        }
    }

    #[test]
    fn ewc_logistic_closed_form() {
        // two-class linear softmax, logits W x, class 0 label
        // ∂ log p0 / ∂W_0i = (1 - p0) x_i, ∂/∂W_1i = -p1 x_i = -(1 - p0) x_i
        let mut w = FlatParams::zeros(
            Network::new(vec![DenseLayer::new(
                Matrix::zeros(2, 2),
                vec![0.0; 2],
                Activation::Identity,
            )
            .unwrap()])
            .unwrap()
            .layout()
            .clone(),
        );
        w.values_mut()[..4].copy_from_slice(&[0.5, -0.2, 0.1, 0.3]);
        let mut net = Network::from_params(&w).unwrap();
        net.add_linear_head(HeadId(0), 2, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        // make the head an exact identity so logits are the trunk output
        let mut p = net.params();
        let head = net
            .layout()
            .segment(LayerId::Head(HeadId(0), 0))
            .unwrap()
            .clone();
        p.values_mut()[head.range()].copy_from_slice(&[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        net.set_params(&p).unwrap();
        let x: [f64; 2] = [1.5, -2.0];
        let z0 = 0.5 * x[0] - 0.2 * x[1];
        let z1 = 0.1 * x[0] + 0.3 * x[1];
        let p0 = 1.0 / (1.0 + (z1 - z0).exp());
        let mut m = ImportanceMap::new(Estimator::Ewc, net.layout().clone());
        m.ewc_fisher_update(
            &net,
            &Matrix::row_vector(&x).unwrap(),
            &[0],
            Some(HeadId(0)),
        )
        .unwrap();
        let q = (1.0 - p0) * (1.0 - p0);
        let want = [
            q * x[0] * x[0],
            q * x[1] * x[1],
            q * x[0] * x[0],
            q * x[1] * x[1],
            q,
            q,
        ];
        for (a, b) in m.omega().values()[..6].iter().zip(want) {
            assert!((a - b).abs() <= 1e-14);
        }
        assert!(m.omega().values()[6..].iter().all(|&v| v == 0.0));
        // repeating the same point leaves the mean unchanged
        let before = m.omega().clone();
        m.ewc_fisher_update(
            &net,
            &Matrix::row_vector(&x).unwrap(),
            &[0],
            Some(HeadId(0)),
        )
        .unwrap();
        assert!(m.omega().max_abs_diff(&before).unwrap() <= 1e-16);
    }

    #[test]
    fn ewc_requires_softmax_output() {
        let net = scalar_net(1.0);
        let mut m = ImportanceMap::new(Estimator::Ewc, net.layout().clone());
        assert!(matches!(
            m.ewc_fisher_update(&net, &Matrix::row_vector(&[1.0]).unwrap(), &[0], None),
            Err(Error::UnsupportedObjective(_))
        ));
    }

    #[test]
    fn wrong_method_is_rejected() {
        let net = scalar_net(1.0);
        let mut m = ImportanceMap::new(Estimator::Ewc, net.layout().clone());
        assert!(matches!(
            m.mas_update(&net, &Matrix::row_vector(&[1.0]).unwrap(), None),
            Err(Error::MethodMismatch { .. })
        ));
    }

    #[test]
    fn si_single_sgd_step_contributes_lr_g_squared() {
        let net = scalar_net(1.0);
        let p0 = net.params();
        let g = FlatParams::new(vec![0.7, -0.3], p0.layout().clone()).unwrap();
        let lr = 0.1;
        let p1 = sgd_step(&p0, &g, lr).unwrap();
        let mut acc = SiAccumulator::new(p0.clone(), 0.1).unwrap();
        acc.step(&g, &p1.sub(&p0).unwrap()).unwrap();
        for (c, gv) in acc.path().values().iter().zip(g.values()) {
            assert!((c - lr * gv * gv).abs() < 1e-15);
        }
        let zero = FlatParams::zeros_like(&p0);
        let before = acc.path().clone();
        acc.step(&zero, &p1.sub(&p0).unwrap()).unwrap();
        assert_eq!(acc.path(), &before);
    }

    #[test]
    fn si_two_steps_on_quadratic() {
        // f(θ) = θ², θ0 = 1, lr = 0.25: g0 = 2, θ1 = 0.5, g1 = 1, θ2 = 0.25
        // path = 2·0.5 + 1·0.25 = 1.25
        let net = scalar_net(1.0);
        let layout = net.layout().clone();
        let mut theta = FlatParams::new(vec![1.0, 0.0], layout.clone()).unwrap();
        let mut acc = SiAccumulator::new(theta.clone(), 0.1).unwrap();
        for _ in 0..2 {
            let g = FlatParams::new(vec![2.0 * theta.values()[0], 0.0], layout.clone()).unwrap();
            let next = sgd_step(&theta, &g, 0.25).unwrap();
            acc.step(&g, &next.sub(&theta).unwrap()).unwrap();
            theta = next;
        }
        assert_eq!(acc.path().values()[0], 1.25);
        let m = acc.finalize(&theta).unwrap();
        assert!((m.omega().values()[0] - 1.25 / (0.75 * 0.75 + 0.1)).abs() < 1e-15);
    }

    #[test]
    fn si_finalize_examples() {
        let net = scalar_net(0.0);
        let layout = net.layout().clone();
        let start = FlatParams::zeros(layout.clone());
        let mut acc = SiAccumulator::new(start.clone(), 0.1).unwrap();
        assert!(acc
            .finalize(&start)
            .unwrap()
            .omega()
            .values()
            .iter()
            .all(|&v| v == 0.0));
        // path 0.5 on the weight, -0.2 on the bias; Δθ = 1 on the weight
        let g = FlatParams::new(vec![-0.5, 0.2], layout.clone()).unwrap();
        let d = FlatParams::new(vec![1.0, 1.0], layout.clone()).unwrap();
        acc.step(&g, &d).unwrap();
        let end = FlatParams::new(vec![1.0, 1.0], layout).unwrap();
        let m = acc.finalize(&end).unwrap();
        assert!((m.omega().values()[0] - 0.5 / 1.1).abs() < 1e-15);
        assert_eq!(m.omega().values()[1], 0.0);
        assert!(SiAccumulator::new(start, 0.0).is_err());
    }

    #[test]
    fn merge_sum_properties() {
        let net = scalar_net(1.0);
        let l = net.layout().clone();
        let mk = |v: [f64; 2], n| {
            ImportanceMap::from_parts(
                Estimator::MasGlobal,
                FlatParams::new(v.to_vec(), l.clone()).unwrap(),
                n,
                Vec::new(),
            )
            .unwrap()
        };
        let (a, b, c) = (mk([1.0, 2.0], 3), mk([0.5, 0.25], 4), mk([4.0, 0.0], 5));
        let zero = ImportanceMap::new(Estimator::MasGlobal, l.clone());
        assert_eq!(
            merge_across_tasks(&a, &zero, Accumulation::Sum)
                .unwrap()
                .omega(),
            a.omega()
        );
        let ab = merge_across_tasks(&a, &b, Accumulation::Sum).unwrap();
        let ba = merge_across_tasks(&b, &a, Accumulation::Sum).unwrap();
        assert_eq!(ab.omega(), ba.omega());
        let abc = merge_across_tasks(&ab, &c, Accumulation::Sum).unwrap();
        assert_eq!(abc.omega().values(), &[5.5, 2.25]);
        assert_eq!(abc.task_samples(), vec![3, 4, 5]);
        let mean = merge_across_tasks(&ab, &c, Accumulation::Mean).unwrap();
        // (1.5 * 2 + 4) / 3: the left map already holds two tasks
        assert!((mean.omega().values()[0] - 7.0 / 3.0).abs() < 1e-15);
        let other = ImportanceMap::new(Estimator::Ewc, l);
        assert!(matches!(
            merge_across_tasks(&a, &other, Accumulation::Sum),
            Err(Error::MethodMismatch { .. })
        ));
    }

    #[test]
    fn heads_receive_no_importance() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut net = Network::mlp(3, &[4], None, &mut rng).unwrap();
        net.add_linear_head(HeadId(0), 3, &mut rng).unwrap();
        let x = random_x(&mut rng, 4, 3);
        let mut m = ImportanceMap::new(Estimator::MasGlobal, net.layout().clone());
        m.mas_update(&net, &x, Some(HeadId(0))).unwrap();
        let mask = net.layout().trunk_mask().to_vec();
        for (v, t) in m.omega().values().iter().zip(mask) {
            if !t {
                assert_eq!(*v, 0.0);
            }
        }
        assert!(m.omega().values().iter().any(|&v| v > 0.0));
    }

    #[test]
    fn estimator_tags_parse() {
        for e in Estimator::ALL {
            assert_eq!(e.tag().parse::<Estimator>().unwrap(), e);
            assert_eq!(Estimator::from_code(e.code()), Some(e));
        }
        assert!(matches!(
            "bogus".parse::<Estimator>(),
            Err(Error::UnknownMethod { .. })
        ));
    }
}
