//! Fully-connected network with manual forward/backward passes.
//!
//! The passes expose every per-layer quantity the curvature modules consume:
//! input activations `A`, pre-activations `S`, supervised errors `E`, and
//! model-sampled errors `E_F`. Networks carry no bias vectors, so each layer
//! gradient is exactly the rank-`D` product `E^(k+1)·A^(k)ᵀ`.
//!
//! Scaling convention: `E` holds raw per-column derivatives (no `1/D`), so
//! `E·Aᵀ` is the gradient of the summed column losses; [`NetworkState::loss_mean`]
//! divides by the column count for reporting.

use ndarray::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::linalg;
use crate::{Error, Result};

/// Hidden-layer nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative as a function of the pre-activation.
    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
        }
    }
}

/// Output likelihood / loss pairing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// Softmax outputs with cross-entropy loss (categorical likelihood).
    CrossEntropySoftmax,
    /// Linear outputs with `½‖s−y‖²` per column (unit-variance Gaussian).
    SquaredError,
}

/// Supervision for a batch: class indices or regression targets
/// (`n_out × D`).
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Classes(Vec<usize>),
    Values(Array2<f64>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(c) => c.len(),
            Targets::Values(v) => v.ncols(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Select the given columns (without replacement semantics are up to the
    /// caller).
    pub fn select(&self, idx: &[usize]) -> Targets {
        match self {
            Targets::Classes(c) => Targets::Classes(idx.iter().map(|&i| c[i]).collect()),
            Targets::Values(v) => {
                let mut out = Array2::zeros((v.nrows(), idx.len()));
                for (j, &i) in idx.iter().enumerate() {
                    out.column_mut(j).assign(&v.column(i));
                }
                Targets::Values(out)
            }
        }
    }
}

/// Labels drawn from the model's own output distribution plus the seed that
/// produced them.
#[derive(Debug, Clone)]
pub struct LabelSample {
    pub targets: Targets,
    pub rng_seed: u64,
}

/// Per-batch record of everything the forward/backward passes computed.
#[derive(Debug, Clone)]
pub struct BatchTrace {
    /// `a[k]`: inputs to layer `k` (`m_k × D`); `a[0]` is the batch itself.
    pub a: Vec<Array2<f64>>,
    /// `s[k]`: pre-activations of layer `k` (`n_{k+1} × D`); the last entry
    /// holds the logits/outputs.
    pub s: Vec<Array2<f64>>,
    /// Supervised errors `e[k] = ∂L/∂s[k]`, filled by [`NetworkState::backward`].
    pub e: Option<Vec<Array2<f64>>>,
    /// Model-sampled errors, filled by [`NetworkState::backward_sampled`].
    pub e_f: Option<Vec<Array2<f64>>>,
    /// Per-column scale factors for Fisher assembly (`1/√B` for MC mode,
    /// `√(p(y|x)/N)` for full mode); all ones on a plain forward trace.
    pub col_weights: Array1<f64>,
}

impl BatchTrace {
    /// Network outputs (pre-activations of the last layer).
    pub fn logits(&self) -> &Array2<f64> {
        self.s.last().expect("trace has at least one layer")
    }

    /// Number of columns in the batch.
    pub fn batch_size(&self) -> usize {
        self.a[0].ncols()
    }
}

/// Weights plus the architectural tags needed to run passes.
#[derive(Debug, Clone)]
pub struct NetworkState {
    /// `layers[k]` has shape `n_{k+1} × n_k`.
    pub layers: Vec<Array2<f64>>,
    pub activation: Activation,
    pub loss: LossKind,
}

impl NetworkState {
    /// Kaiming-He-initialized network: entries of layer `k` are drawn from
    /// `N(0, 2/fan_in)` under a seeded generator.
    pub fn new(dims: &[usize], activation: Activation, loss: LossKind, seed: u64) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Invalid {
                message: format!("need at least input and output dims, got {dims:?}"),
            });
        }
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for w in dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            layers.push(Array2::from_shape_fn((fan_out, fan_in), |_| {
                dist.sample(&mut rng)
            }));
        }
        Self::from_layers(layers, activation, loss)
    }

    /// Wrap explicit weight matrices, checking that adjacent shapes chain.
    pub fn from_layers(
        layers: Vec<Array2<f64>>,
        activation: Activation,
        loss: LossKind,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Invalid {
                message: "network needs at least one layer".into(),
            });
        }
        for k in 1..layers.len() {
            if layers[k].ncols() != layers[k - 1].nrows() {
                return Err(Error::Shape {
                    context: format!(
                        "layer {k} expects {} inputs but layer {} produces {}",
                        layers[k].ncols(),
                        k - 1,
                        layers[k - 1].nrows()
                    ),
                });
            }
        }
        Ok(NetworkState {
            layers,
            activation,
            loss,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("nonempty").nrows()
    }

    /// Total parameter count `Σ n_{k+1}·n_k`.
    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|w| w.len()).sum()
    }

    /// Per-layer `(n_out, n_in)` shapes.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(|w| w.dim()).collect()
    }

    /// Forward pass: fills `A` and `S` for every layer.
    pub fn forward(&self, x: &Array2<f64>) -> Result<BatchTrace> {
        if x.nrows() != self.input_dim() {
            return Err(Error::Shape {
                context: format!(
                    "layer 0 expects {} input rows, batch has {}",
                    self.input_dim(),
                    x.nrows()
                ),
            });
        }
        if x.ncols() == 0 {
            return Err(Error::Invalid {
                message: "batch must contain at least one column".into(),
            });
        }
        let cols = x.ncols();
        let mut a = Vec::with_capacity(self.num_layers());
        let mut s = Vec::with_capacity(self.num_layers());
        a.push(x.clone());
        for (k, w) in self.layers.iter().enumerate() {
            let pre = linalg::matmul(w.view(), a[k].view());
            if k + 1 < self.num_layers() {
                a.push(pre.mapv(|v| self.activation.apply(v)));
            }
            s.push(pre);
        }
        Ok(BatchTrace {
            a,
            s,
            e: None,
            e_f: None,
            col_weights: Array1::ones(cols),
        })
    }

    /// Top-layer error `∂L/∂s^(ℓ)` for raw (unscaled) column losses.
    fn top_error(&self, logits: &Array2<f64>, targets: &Targets) -> Result<Array2<f64>> {
        let cols = logits.ncols();
        if targets.len() != cols {
            return Err(Error::Shape {
                context: format!("{} targets for a batch of {cols} columns", targets.len()),
            });
        }
        match (self.loss, targets) {
            (LossKind::CrossEntropySoftmax, Targets::Classes(classes)) => {
                let mut err = softmax_columns(logits);
                for (j, &c) in classes.iter().enumerate() {
                    if c >= logits.nrows() {
                        return Err(Error::Invalid {
                            message: format!(
                                "class {c} out of range for {} outputs",
                                logits.nrows()
                            ),
                        });
                    }
                    err[[c, j]] -= 1.0;
                }
                Ok(err)
            }
            (LossKind::SquaredError, Targets::Values(y)) => {
                if y.dim() != logits.dim() {
                    return Err(Error::Shape {
                        context: format!(
                            "targets are {:?} but outputs are {:?}",
                            y.dim(),
                            logits.dim()
                        ),
                    });
                }
                Ok(logits - y)
            }
            (LossKind::CrossEntropySoftmax, Targets::Values(_)) => Err(Error::Invalid {
                message: "cross-entropy expects class targets".into(),
            }),
            (LossKind::SquaredError, Targets::Classes(_)) => Err(Error::Invalid {
                message: "squared error expects value targets".into(),
            }),
        }
    }

    /// Backpropagate a top-layer error through the stored pre-activations.
    fn backprop(&self, trace: &BatchTrace, top: Array2<f64>) -> Vec<Array2<f64>> {
        let layers = self.num_layers();
        let mut errors = vec![Array2::zeros((0, 0)); layers];
        errors[layers - 1] = top;
        for k in (0..layers - 1).rev() {
            let upstream = linalg::matmul(self.layers[k + 1].t(), errors[k + 1].view());
            let deriv = trace.s[k].mapv(|v| self.activation.derivative(v));
            errors[k] = upstream * deriv;
        }
        errors
    }

    /// Backward pass with supervised targets: fills `trace.e` and returns the
    /// per-layer gradients `E^(k+1)·A^(k)ᵀ`.
    pub fn backward(
        &self,
        trace: &mut BatchTrace,
        targets: &Targets,
    ) -> Result<Vec<Array2<f64>>> {
        let top = self.top_error(trace.logits(), targets)?;
        let errors = self.backprop(trace, top);
        let grads = errors
            .iter()
            .zip(&trace.a)
            .map(|(e, a)| linalg::matmul(e.view(), a.t()))
            .collect();
        trace.e = Some(errors);
        Ok(grads)
    }

    /// Backward pass with model-sampled labels: fills `trace.e_f` without
    /// touching `trace.e`.
    pub fn backward_sampled(&self, trace: &mut BatchTrace, sample: &LabelSample) -> Result<()> {
        let top = self.top_error(trace.logits(), &sample.targets)?;
        trace.e_f = Some(self.backprop(trace, top));
        Ok(())
    }

    /// Draw one label per column from the model's output distribution.
    pub fn sample_labels(&self, trace: &BatchTrace, seed: u64) -> LabelSample {
        LabelSample {
            targets: sample_from_logits(trace.logits(), self.loss, seed),
            rng_seed: seed,
        }
    }

    /// Summed column losses (the quantity whose gradient is `E·Aᵀ`).
    pub fn loss_total(&self, logits: &Array2<f64>, targets: &Targets) -> Result<f64> {
        let cols = logits.ncols();
        if targets.len() != cols {
            return Err(Error::Shape {
                context: format!("{} targets for a batch of {cols} columns", targets.len()),
            });
        }
        match (self.loss, targets) {
            (LossKind::CrossEntropySoftmax, Targets::Classes(classes)) => {
                let mut total = 0.0;
                for (j, &c) in classes.iter().enumerate() {
                    let col = logits.column(j);
                    let max = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let lse = max + col.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                    total += lse - col[c];
                }
                Ok(total)
            }
            (LossKind::SquaredError, Targets::Values(y)) => {
                let diff = logits - y;
                Ok(0.5 * diff.iter().map(|v| v * v).sum::<f64>())
            }
            _ => Err(Error::Invalid {
                message: "loss/target kind mismatch".into(),
            }),
        }
    }

    /// Mean column loss — the reported metric.
    pub fn loss_mean(&self, logits: &Array2<f64>, targets: &Targets) -> Result<f64> {
        Ok(self.loss_total(logits, targets)? / logits.ncols() as f64)
    }

    /// Fraction of columns whose argmax matches the class target
    /// (classification only).
    pub fn accuracy(&self, logits: &Array2<f64>, targets: &Targets) -> Option<f64> {
        match targets {
            Targets::Classes(classes) => {
                let mut hits = 0usize;
                for (j, &c) in classes.iter().enumerate() {
                    let col = logits.column(j);
                    let mut best = 0usize;
                    for i in 1..col.len() {
                        if col[i] > col[best] {
                            best = i;
                        }
                    }
                    if best == c {
                        hits += 1;
                    }
                }
                Some(hits as f64 / classes.len() as f64)
            }
            Targets::Values(_) => None,
        }
    }
}

/// Column-wise softmax with the shifted-exponential stabilization.
pub fn softmax_columns(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut col in out.columns_mut() {
        let max = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in col.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in col.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Draw one label per column from the output distribution implied by
/// `loss`: a categorical draw from the softmax, or a unit-variance Gaussian
/// around the outputs. Deterministic in `(logits, seed)`.
pub fn sample_from_logits(logits: &Array2<f64>, loss: LossKind, seed: u64) -> Targets {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    match loss {
        LossKind::CrossEntropySoftmax => {
            let probs = softmax_columns(logits);
            let mut labels = Vec::with_capacity(logits.ncols());
            for col in probs.columns() {
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                let mut chosen = col.len() - 1;
                for (i, p) in col.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        chosen = i;
                        break;
                    }
                }
                labels.push(chosen);
            }
            Targets::Classes(labels)
        }
        LossKind::SquaredError => {
            let noise: Array2<f64> =
                Array2::from_shape_fn(logits.dim(), |_| StandardNormal.sample(&mut rng));
            Targets::Values(logits + &noise)
        }
    }
}
