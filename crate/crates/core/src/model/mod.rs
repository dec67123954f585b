//! A small fully connected classifier with rectifier hidden layers, exact
//! reverse-mode gradients, an output head that can grow, frozen teacher
//! snapshots and the ADADELTA optimizer.

mod checkpoint;
mod optimizer;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, DenseMatrix};

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use optimizer::{adadelta_step, AdadeltaConfig, OptimizerState};

/// Hidden widths used when no architecture is configured.
pub const DEFAULT_HIDDEN: [usize; 2] = [64, 32];

/// Standard deviation of the weights of freshly added output rows.
pub const HEAD_INIT_STD: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
}

/// Weights (`out x in`) and biases of one affine layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weights: DenseMatrix,
    pub biases: Vec<f64>,
}

impl LayerParams {
    fn zeros_like(&self) -> Self {
        Self {
            weights: DenseMatrix::zeros(self.weights.rows(), self.weights.cols()),
            biases: vec![0.0; self.biases.len()],
        }
    }

    fn len(&self) -> usize {
        self.weights.as_slice().len() + self.biases.len()
    }
}

/// A parameter-shaped collection of layers. Used for the parameters
/// themselves, their gradients and optimizer accumulators.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub layers: Vec<LayerParams>,
}

impl ParamSet {
    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self.layers.iter().map(LayerParams::zeros_like).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.layers.iter().map(LayerParams::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn same_shape(&self, other: &ParamSet) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.weights.rows() == b.weights.rows()
                    && a.weights.cols() == b.weights.cols()
                    && a.biases.len() == b.biases.len()
            })
    }

    /// Every value, layer by layer, weights before biases.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for l in &self.layers {
            out.extend_from_slice(l.weights.as_slice());
            out.extend_from_slice(&l.biases);
        }
        out
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.as_mut_slice().iter_mut().chain(l.biases.iter_mut()))
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.as_slice().iter().chain(l.biases.iter()))
    }

    fn assign(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.len() {
            return Err(Error::Shape(format!(
                "{} values for {} parameters",
                flat.len(),
                self.len()
            )));
        }
        for (dst, src) in self.values_mut().zip(flat) {
            *dst = *src;
        }
        Ok(())
    }

    /// Adds zero rows to the output layer.
    pub(crate) fn grow_head(&mut self, k_new: usize) {
        if let Some(last) = self.layers.last_mut() {
            let extra = DenseMatrix::zeros(k_new, last.weights.cols());
            last.weights.push_rows(&extra).expect("zero rows share the layer width");
            last.biases.extend(std::iter::repeat_n(0.0, k_new));
        }
    }
}

#[derive(Debug, Clone)]
struct ForwardCache {
    version: u64,
    /// Input of each layer (the batch, then each hidden activation).
    inputs: Vec<DenseMatrix>,
    /// Pre-activations of the hidden layers.
    pre: Vec<DenseMatrix>,
    output_rows: usize,
}

#[derive(Debug, Clone)]
pub struct Classifier {
    params: ParamSet,
    activation: Activation,
    version: u64,
    cache: Option<ForwardCache>,
}

fn affine(x: &DenseMatrix, layer: &LayerParams) -> DenseMatrix {
    let out = layer.weights.rows();
    let mut y = DenseMatrix::zeros(x.rows(), out);
    for (r, xr) in x.iter_rows().enumerate() {
        let yr = y.row_mut(r);
        for (o, v) in yr.iter_mut().enumerate() {
            *v = dot(layer.weights.row(o), xr) + layer.biases[o];
        }
    }
    y
}

fn relu(x: &DenseMatrix) -> DenseMatrix {
    let mut y = x.clone();
    y.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
    y
}

fn run_layers(params: &ParamSet, x: &DenseMatrix, mut cache: Option<&mut ForwardCache>) -> Result<DenseMatrix> {
    let input = params.layers[0].weights.cols();
    if x.cols() != input {
        return Err(Error::Shape(format!(
            "batch has {} features, classifier expects {input}",
            x.cols()
        )));
    }
    let last = params.layers.len() - 1;
    let mut h = x.clone();
    for (i, layer) in params.layers.iter().enumerate() {
        let z = affine(&h, layer);
        if let Some(c) = cache.as_deref_mut() {
            c.inputs.push(h);
        }
        if i == last {
            if !z.all_finite() {
                return Err(Error::Numeric("non-finite logits".into()));
            }
            return Ok(z);
        }
        h = relu(&z);
        if let Some(c) = cache.as_deref_mut() {
            c.pre.push(z);
        }
    }
    unreachable!("classifier has at least one layer")
}

impl Classifier {
    /// He-initialized network with the given layer widths
    /// (`[input, hidden.., output]`).
    pub fn new(layer_sizes: &[usize], seed: u64) -> Result<Self> {
        if layer_sizes.len() < 2 || layer_sizes.contains(&0) {
            return Err(Error::Parameter(format!(
                "layer sizes {layer_sizes:?} need an input and an output, all nonzero"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = layer_sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive standard deviation");
                let data = (0..fan_in * fan_out).map(|_| normal.sample(&mut rng)).collect();
                LayerParams {
                    weights: DenseMatrix::new(fan_out, fan_in, data).expect("sized above"),
                    biases: vec![0.0; fan_out],
                }
            })
            .collect();
        Ok(Self::from_params(ParamSet { layers }))
    }

    /// Wraps explicit parameters. Shapes must chain.
    pub fn from_layers(layers: Vec<LayerParams>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Parameter("classifier without layers".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.biases.len() != l.weights.rows() {
                return Err(Error::Shape(format!(
                    "layer {i}: {} biases for {} outputs",
                    l.biases.len(),
                    l.weights.rows()
                )));
            }
            if i > 0 && l.weights.cols() != layers[i - 1].weights.rows() {
                return Err(Error::Shape(format!(
                    "layer {i} expects {} inputs, previous layer emits {}",
                    l.weights.cols(),
                    layers[i - 1].weights.rows()
                )));
            }
            if !l.weights.all_finite() || l.biases.iter().any(|b| !b.is_finite()) {
                return Err(Error::Numeric(format!("layer {i} has non-finite parameters")));
            }
        }
        Ok(Self::from_params(ParamSet { layers }))
    }

    fn from_params(params: ParamSet) -> Self {
        Self {
            params,
            activation: Activation::Relu,
            version: 0,
            cache: None,
        }
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.params.layers[0].weights.cols()];
        sizes.extend(self.params.layers.iter().map(|l| l.weights.rows()));
        sizes
    }

    pub fn input_size(&self) -> usize {
        self.params.layers[0].weights.cols()
    }

    pub fn head_size(&self) -> usize {
        self.params.layers.last().map_or(0, |l| l.weights.rows())
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn parameters(&self) -> Vec<f64> {
        self.params.flatten()
    }

    pub fn set_parameters(&mut self, flat: &[f64]) -> Result<()> {
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite parameter".into()));
        }
        self.params.assign(flat)?;
        self.touch();
        Ok(())
    }

    fn touch(&mut self) {
        self.version += 1;
        self.cache = None;
    }

    /// Logits for a batch, keeping the activations for [`Self::backward`].
    pub fn forward(&mut self, batch: &DenseMatrix) -> Result<DenseMatrix> {
        let mut cache = ForwardCache {
            version: self.version,
            inputs: Vec::with_capacity(self.params.layers.len()),
            pre: Vec::with_capacity(self.params.layers.len()),
            output_rows: batch.rows(),
        };
        let logits = run_layers(&self.params, batch, Some(&mut cache))?;
        self.cache = Some(cache);
        Ok(logits)
    }

    /// Logits without touching the backward cache.
    pub fn predict(&self, batch: &DenseMatrix) -> Result<DenseMatrix> {
        run_layers(&self.params, batch, None)
    }

    /// Parameter gradients of a scalar loss given its gradient w.r.t. the
    /// logits of the last [`Self::forward`] call.
    pub fn backward(&self, grad_logits: &DenseMatrix) -> Result<ParamSet> {
        let cache = match &self.cache {
            Some(c) if c.version == self.version => c,
            Some(_) => return Err(Error::State("forward cache predates a parameter update".into())),
            None => return Err(Error::State("backward called before forward".into())),
        };
        if grad_logits.rows() != cache.output_rows || grad_logits.cols() != self.head_size() {
            return Err(Error::Shape(format!(
                "gradient is {}x{}, logits were {}x{}",
                grad_logits.rows(),
                grad_logits.cols(),
                cache.output_rows,
                self.head_size()
            )));
        }
        let mut grads = self.params.zeros_like();
        let mut delta = grad_logits.clone();
        for i in (0..self.params.layers.len()).rev() {
            let input = &cache.inputs[i];
            let g = &mut grads.layers[i];
            for (r, dr) in delta.iter_rows().enumerate() {
                let xr = input.row(r);
                for (o, &d) in dr.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    g.biases[o] += d;
                    for (w, x) in g.weights.row_mut(o).iter_mut().zip(xr) {
                        *w += d * x;
                    }
                }
            }
            if i == 0 {
                break;
            }
            // propagate through W and the rectifier of layer i-1
            let weights = &self.params.layers[i].weights;
            let pre = &cache.pre[i - 1];
            let mut next = DenseMatrix::zeros(delta.rows(), weights.cols());
            for (r, dr) in delta.iter_rows().enumerate() {
                let nr = next.row_mut(r);
                for (o, &d) in dr.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    for (n, w) in nr.iter_mut().zip(weights.row(o)) {
                        *n += d * w;
                    }
                }
                for (n, z) in nr.iter_mut().zip(pre.row(r)) {
                    if *z <= 0.0 {
                        *n = 0.0;
                    }
                }
            }
            delta = next;
        }
        Ok(grads)
    }

    /// Appends `k_new` output rows drawn from a seeded `N(0, 0.01²)` with zero
    /// biases. Existing rows are untouched, so old-class logits stay
    /// bit-identical for every input.
    pub fn expand_head(mut self, k_new: usize, seed: u64) -> Result<Self> {
        if k_new == 0 {
            return Err(Error::Parameter("head expansion needs at least one class".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, HEAD_INIT_STD).expect("positive standard deviation");
        let last = self.params.layers.last_mut().expect("at least one layer");
        let width = last.weights.cols();
        let rows = DenseMatrix::new(
            k_new,
            width,
            (0..k_new * width).map(|_| normal.sample(&mut rng)).collect(),
        )?;
        last.weights.push_rows(&rows)?;
        last.biases.extend(std::iter::repeat_n(0.0, k_new));
        self.touch();
        Ok(self)
    }

    pub fn snapshot(&self) -> TeacherSnapshot {
        TeacherSnapshot {
            params: Arc::new(self.params.clone()),
        }
    }

    pub(crate) fn params_mut(&mut self) -> &mut ParamSet {
        self.touch();
        &mut self.params
    }
}

/// Frozen copy of a classifier. Cheap to clone; there is no way to mutate it.
#[derive(Debug, Clone)]
pub struct TeacherSnapshot {
    params: Arc<ParamSet>,
}

impl TeacherSnapshot {
    pub fn head_size(&self) -> usize {
        self.params.layers.last().map_or(0, |l| l.weights.rows())
    }

    pub fn predict(&self, batch: &DenseMatrix) -> Result<DenseMatrix> {
        run_layers(&self.params, batch, None)
    }

    pub fn parameters(&self) -> Vec<f64> {
        self.params.flatten()
    }
}
