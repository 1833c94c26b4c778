use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;

use super::layer::{Activation, DenseLayer};
use super::matrix::Matrix;
use super::params::{FlatParams, HeadId, LayerId, ParamLayout, Segment};
use crate::error::{Error, Result};

/// Post-activation values of every layer on the path taken by one forward
/// pass. `activations[0]` is the input, `activations[l + 1]` the output of
/// `layers[l]`.
#[derive(Debug, Clone)]
pub struct Trace {
    pub layers: Vec<LayerId>,
    pub activations: Vec<Matrix>,
}

impl Trace {
    pub fn output(&self) -> &Matrix {
        self.activations
            .last()
            .expect("trace holds at least the input")
    }

    /// Input and output of the `pos`-th layer on the path.
    pub fn layer_io(&self, pos: usize) -> (&Matrix, &Matrix) {
        (&self.activations[pos], &self.activations[pos + 1])
    }
}

/// Shared trunk plus zero or more unshared heads.
///
/// A headless network is valid and runs in embedding mode: the trunk output
/// is the model output and every parameter is shared.
#[derive(Debug, Clone)]
pub struct Network {
    trunk: Vec<DenseLayer>,
    heads: BTreeMap<HeadId, Vec<DenseLayer>>,
    layout: Arc<ParamLayout>,
    cache: Option<Trace>,
}

impl PartialEq for Network {
    fn eq(&self, other: &Self) -> bool {
        self.trunk == other.trunk && self.heads == other.heads
    }
}

fn check_chain(layers: &[DenseLayer], mut width: usize, what: &str) -> Result<usize> {
    for (i, l) in layers.iter().enumerate() {
        if l.in_dim() != width {
            return Err(Error::Shape(format!(
                "{what} layer {i} expects {} inputs but receives {width}",
                l.in_dim()
            )));
        }
        width = l.out_dim();
    }
    Ok(width)
}

impl Network {
    pub fn new(trunk: Vec<DenseLayer>) -> Result<Self> {
        let first = trunk
            .first()
            .ok_or_else(|| Error::Shape("trunk needs at least one layer".into()))?;
        check_chain(&trunk, first.in_dim(), "trunk")?;
        let mut net = Self {
            trunk,
            heads: BTreeMap::new(),
            layout: Arc::new(ParamLayout::new(Vec::new())?),
            cache: None,
        };
        net.rebuild_layout();
        Ok(net)
    }

    /// Seeded MLP: ReLU hidden layers of the given widths. With `embedding_dim`
    /// set, a final Identity trunk layer of that width is appended (headless
    /// mode).
    pub fn mlp<R: Rng + ?Sized>(
        input_dim: usize,
        hidden: &[usize],
        embedding_dim: Option<usize>,
        rng: &mut R,
    ) -> Result<Self> {
        let mut layers = Vec::new();
        let mut width = input_dim;
        for &h in hidden {
            layers.push(DenseLayer::glorot(width, h, Activation::Relu, rng)?);
            width = h;
        }
        if let Some(d) = embedding_dim {
            layers.push(DenseLayer::glorot(width, d, Activation::Identity, rng)?);
        }
        Self::new(layers)
    }

    /// Adds a single-layer linear head (logits) of `outputs` units.
    pub fn add_linear_head<R: Rng + ?Sized>(
        &mut self,
        id: HeadId,
        outputs: usize,
        rng: &mut R,
    ) -> Result<()> {
        let layer =
            DenseLayer::glorot(self.trunk_output_dim(), outputs, Activation::Identity, rng)?;
        self.add_head(id, vec![layer])
    }

    pub fn add_head(&mut self, id: HeadId, layers: Vec<DenseLayer>) -> Result<()> {
        if layers.is_empty() {
            return Err(Error::Shape(format!("{id} needs at least one layer")));
        }
        if self.heads.contains_key(&id) {
            return Err(Error::Argument(format!("{id} already exists")));
        }
        check_chain(&layers, self.trunk_output_dim(), "head")?;
        self.heads.insert(id, layers);
        self.rebuild_layout();
        Ok(())
    }

    fn rebuild_layout(&mut self) {
        let mut segments = Vec::new();
        let mut offset = 0;
        let mut push = |layer: LayerId, l: &DenseLayer| {
            segments.push(Segment {
                layer,
                offset,
                len: l.param_count(),
                in_dim: l.in_dim(),
                out_dim: l.out_dim(),
                activation: l.activation(),
            });
            offset += l.param_count();
        };
        for (i, l) in self.trunk.iter().enumerate() {
            push(LayerId::Trunk(i), l);
        }
        for (id, layers) in &self.heads {
            for (i, l) in layers.iter().enumerate() {
                push(LayerId::Head(*id, i), l);
            }
        }
        self.layout = Arc::new(ParamLayout::new(segments).expect("segments built contiguously"));
        self.cache = None;
    }

    pub fn input_dim(&self) -> usize {
        self.trunk[0].in_dim()
    }

    pub fn trunk_output_dim(&self) -> usize {
        self.trunk.last().expect("non-empty trunk").out_dim()
    }

    pub fn output_dim(&self, head: Option<HeadId>) -> Result<usize> {
        match head {
            None => Ok(self.trunk_output_dim()),
            Some(h) => Ok(self
                .heads
                .get(&h)
                .ok_or(Error::UnknownHead(h))?
                .last()
                .expect("non-empty head")
                .out_dim()),
        }
    }

    pub fn trunk(&self) -> &[DenseLayer] {
        &self.trunk
    }

    pub fn heads(&self) -> &BTreeMap<HeadId, Vec<DenseLayer>> {
        &self.heads
    }

    pub fn has_head(&self, id: HeadId) -> bool {
        self.heads.contains_key(&id)
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    pub fn param_count(&self) -> usize {
        self.layout.len()
    }

    pub fn layer(&self, id: LayerId) -> Option<&DenseLayer> {
        match id {
            LayerId::Trunk(i) => self.trunk.get(i),
            LayerId::Head(h, i) => self.heads.get(&h).and_then(|ls| ls.get(i)),
        }
    }

    fn layer_mut(&mut self, id: LayerId) -> Option<&mut DenseLayer> {
        match id {
            LayerId::Trunk(i) => self.trunk.get_mut(i),
            LayerId::Head(h, i) => self.heads.get_mut(&h).and_then(|ls| ls.get_mut(i)),
        }
    }

    /// Layers traversed for `head`: the trunk, then the head's layers.
    pub fn path(&self, head: Option<HeadId>) -> Result<Vec<LayerId>> {
        let mut ids: Vec<LayerId> = (0..self.trunk.len()).map(LayerId::Trunk).collect();
        if let Some(h) = head {
            let layers = self.heads.get(&h).ok_or(Error::UnknownHead(h))?;
            ids.extend((0..layers.len()).map(|i| LayerId::Head(h, i)));
        }
        Ok(ids)
    }

    /// Forward pass without touching the cache.
    pub fn trace(&self, x: &Matrix, head: Option<HeadId>) -> Result<Trace> {
        if x.cols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "network expects {} inputs, got {}",
                self.input_dim(),
                x.cols()
            )));
        }
        let layers = self.path(head)?;
        let mut activations = Vec::with_capacity(layers.len() + 1);
        activations.push(x.clone());
        for id in &layers {
            let l = self.layer(*id).expect("path ids exist");
            let y = l.forward(activations.last().expect("non-empty"))?;
            activations.push(y);
        }
        Ok(Trace {
            layers,
            activations,
        })
    }

    /// Forward pass that keeps per-layer activations for later importance
    /// estimation.
    pub fn forward(&mut self, x: &Matrix, head: Option<HeadId>) -> Result<Matrix> {
        let trace = self.trace(x, head)?;
        let out = trace.output().clone();
        self.cache = Some(trace);
        Ok(out)
    }

    /// Forward pass that only returns the output.
    pub fn predict(&self, x: &Matrix, head: Option<HeadId>) -> Result<Matrix> {
        if x.cols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "network expects {} inputs, got {}",
                self.input_dim(),
                x.cols()
            )));
        }
        let mut cur = x.clone();
        for id in self.path(head)? {
            cur = self.layer(id).expect("path ids exist").forward(&cur)?;
        }
        Ok(cur)
    }

    pub fn last_trace(&self) -> Option<&Trace> {
        self.cache.as_ref()
    }

    pub fn params(&self) -> FlatParams {
        let mut values = Vec::with_capacity(self.layout.len());
        for seg in self.layout.segments() {
            let l = self.layer(seg.layer).expect("layout matches layers");
            values.extend_from_slice(l.weights().data());
            values.extend_from_slice(l.bias());
        }
        FlatParams::new(values, self.layout.clone()).expect("layout length matches")
    }

    pub fn set_params(&mut self, params: &FlatParams) -> Result<()> {
        if *params.layout().as_ref() != *self.layout {
            return Err(Error::Shape(
                "parameter layout does not match this network".into(),
            ));
        }
        let segments = self.layout.segments().to_vec();
        for seg in segments {
            let l = self.layer_mut(seg.layer).expect("layout matches layers");
            l.weights_mut()
                .data_mut()
                .copy_from_slice(&params.values()[seg.weights_range()]);
            l.bias_mut()
                .copy_from_slice(&params.values()[seg.bias_range()]);
        }
        self.cache = None;
        Ok(())
    }

    /// In-place `θ -= lr * grad`.
    pub fn sgd_in_place(&mut self, grad: &FlatParams, lr: f64) -> Result<()> {
        if *grad.layout().as_ref() != *self.layout {
            return Err(Error::Shape(
                "gradient layout does not match network".into(),
            ));
        }
        let segments = self.layout.segments().to_vec();
        for seg in segments {
            let l = self.layer_mut(seg.layer).expect("layout matches layers");
            for (w, g) in l
                .weights_mut()
                .data_mut()
                .iter_mut()
                .zip(&grad.values()[seg.weights_range()])
            {
                *w -= lr * g;
            }
            for (b, g) in l
                .bias_mut()
                .iter_mut()
                .zip(&grad.values()[seg.bias_range()])
            {
                *b -= lr * g;
            }
        }
        self.cache = None;
        Ok(())
    }

    /// Rebuilds a network from a flat vector whose layout carries the
    /// architecture.
    pub fn from_params(params: &FlatParams) -> Result<Self> {
        let mut trunk = Vec::new();
        let mut heads: BTreeMap<HeadId, Vec<DenseLayer>> = BTreeMap::new();
        for seg in params.layout().segments() {
            let w = Matrix::from_vec(
                seg.out_dim,
                seg.in_dim,
                params.values()[seg.weights_range()].to_vec(),
            )?;
            let layer = DenseLayer::new(
                w,
                params.values()[seg.bias_range()].to_vec(),
                seg.activation,
            )?;
            match seg.layer {
                LayerId::Trunk(i) => {
                    if i != trunk.len() {
                        return Err(Error::Shape("trunk segments out of order".into()));
                    }
                    trunk.push(layer);
                }
                LayerId::Head(h, i) => {
                    let ls = heads.entry(h).or_default();
                    if i != ls.len() {
                        return Err(Error::Shape(format!("{h} segments out of order")));
                    }
                    ls.push(layer);
                }
            }
        }
        let mut net = Network::new(trunk)?;
        for (h, ls) in heads {
            net.add_head(h, ls)?;
        }
        if *net.layout != **params.layout() {
            return Err(Error::Shape("layout segment order is not canonical".into()));
        }
        Ok(net)
    }
}
