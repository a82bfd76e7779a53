use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::demo::{ActionVector, StateVector};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Architecture of a single regressor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub output_dim: usize,
    pub hidden_sizes: Vec<usize>,
    pub dropout_rate: f64,
    pub use_layer_norm: bool,
}

impl MlpConfig {
    /// Desk-scale defaults: two hidden layers of 64, dropout 0.5, layer norm on.
    pub fn new(input_dim: usize, output_dim: usize) -> Self {
        Self {
            input_dim,
            output_dim,
            hidden_sizes: vec![64, 64],
            dropout_rate: 0.5,
            use_layer_norm: true,
        }
    }

    pub fn with_hidden(mut self, hidden: impl Into<Vec<usize>>) -> Self {
        self.hidden_sizes = hidden.into();
        self
    }

    pub fn with_dropout(mut self, rate: f64) -> Self {
        self.dropout_rate = rate;
        self
    }

    pub fn with_layer_norm(mut self, on: bool) -> Self {
        self.use_layer_norm = on;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::validation("mlp input/output dims must be positive"));
        }
        if self.hidden_sizes.is_empty() {
            return Err(Error::validation("mlp needs at least one hidden layer"));
        }
        if self.hidden_sizes.contains(&0) {
            return Err(Error::validation("hidden layer sizes must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::validation(format!(
                "dropout_rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

/// Affine map `x · weight + bias`, `weight` stored `[in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: Array1<f64>,
    pub shift: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HiddenLayer {
    pub dense: Dense,
    pub norm: Option<LayerNorm>,
}

/// Weights of one MLP. Hidden layers apply affine → layer norm → ReLU, with
/// inverted dropout between consecutive hidden layers.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParameters {
    config: MlpConfig,
    pub hidden: Vec<HiddenLayer>,
    pub output: Dense,
}

struct LayerCache {
    input: Array2<f64>,
    normed: Option<Array2<f64>>,
    inv_std: Option<Array1<f64>>,
    pre_relu: Array2<f64>,
    mask: Option<Array2<f64>>,
}

pub(crate) struct ForwardCache {
    layers: Vec<LayerCache>,
    last_hidden: Array2<f64>,
    pub(crate) output: Array2<f64>,
}

impl ForwardCache {
    pub(crate) fn pre_relu_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers.iter().flat_map(|l| l.pre_relu.iter().copied())
    }
}

impl MlpParameters {
    /// Glorot-uniform weights from `rng`, zero biases, unit norm gain.
    pub fn init(config: &MlpConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut glorot = |fan_in: usize, fan_out: usize| {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-limit..limit))
        };
        let mut fan_in = config.input_dim;
        let mut hidden = Vec::with_capacity(config.hidden_sizes.len());
        for &h in &config.hidden_sizes {
            hidden.push(HiddenLayer {
                dense: Dense {
                    weight: glorot(fan_in, h),
                    bias: Array1::zeros(h),
                },
                norm: config.use_layer_norm.then(|| LayerNorm {
                    gain: Array1::ones(h),
                    shift: Array1::zeros(h),
                }),
            });
            fan_in = h;
        }
        let output = Dense {
            weight: glorot(fan_in, config.output_dim),
            bias: Array1::zeros(config.output_dim),
        };
        Ok(Self {
            config: config.clone(),
            hidden,
            output,
        })
    }

    /// All-zero parameters of the given shape (also used for gradients and optimizer moments).
    pub fn zeros(config: &MlpConfig) -> Result<Self> {
        config.validate()?;
        let mut fan_in = config.input_dim;
        let mut hidden = Vec::new();
        for &h in &config.hidden_sizes {
            hidden.push(HiddenLayer {
                dense: Dense {
                    weight: Array2::zeros((fan_in, h)),
                    bias: Array1::zeros(h),
                },
                norm: config.use_layer_norm.then(|| LayerNorm {
                    gain: Array1::zeros(h),
                    shift: Array1::zeros(h),
                }),
            });
            fan_in = h;
        }
        Ok(Self {
            config: config.clone(),
            hidden,
            output: Dense {
                weight: Array2::zeros((fan_in, config.output_dim)),
                bias: Array1::zeros(config.output_dim),
            },
        })
    }

    pub fn config(&self) -> &MlpConfig {
        &self.config
    }

    /// Named tensors in declaration order with their shapes.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = Vec::new();
        for (i, layer) in self.hidden.iter().enumerate() {
            out.push((
                format!("hidden{i}.weight"),
                layer.dense.weight.shape().to_vec(),
                layer.dense.weight.as_slice().expect("standard layout"),
            ));
            out.push((
                format!("hidden{i}.bias"),
                vec![layer.dense.bias.len()],
                layer.dense.bias.as_slice().expect("standard layout"),
            ));
            if let Some(norm) = &layer.norm {
                out.push((
                    format!("hidden{i}.norm_gain"),
                    vec![norm.gain.len()],
                    norm.gain.as_slice().expect("standard layout"),
                ));
                out.push((
                    format!("hidden{i}.norm_shift"),
                    vec![norm.shift.len()],
                    norm.shift.as_slice().expect("standard layout"),
                ));
            }
        }
        out.push((
            "output.weight".into(),
            self.output.weight.shape().to_vec(),
            self.output.weight.as_slice().expect("standard layout"),
        ));
        out.push((
            "output.bias".into(),
            vec![self.output.bias.len()],
            self.output.bias.as_slice().expect("standard layout"),
        ));
        out
    }

    /// Mutable views of the tensors, same order as [`tensors`](Self::tensors).
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for layer in &mut self.hidden {
            out.push(layer.dense.weight.as_slice_mut().expect("standard layout"));
            out.push(layer.dense.bias.as_slice_mut().expect("standard layout"));
            if let Some(norm) = &mut layer.norm {
                out.push(norm.gain.as_slice_mut().expect("standard layout"));
                out.push(norm.shift.as_slice_mut().expect("standard layout"));
            }
        }
        out.push(self.output.weight.as_slice_mut().expect("standard layout"));
        out.push(self.output.bias.as_slice_mut().expect("standard layout"));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, _, v)| v.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, _, v)| v.iter().all(|x| x.is_finite()))
    }

    /// Rebuilds parameters from named flat tensors (checkpoint loading).
    pub fn from_tensors(config: &MlpConfig, tensors: &[(String, Vec<f64>)]) -> Result<Self> {
        let mut params = Self::zeros(config)?;
        let expected: Vec<(String, usize)> = params.tensors().into_iter().map(|(n, _, v)| (n, v.len())).collect();
        if expected.len() != tensors.len() {
            return Err(Error::validation(format!(
                "checkpoint has {} tensors, config implies {}",
                tensors.len(),
                expected.len()
            )));
        }
        for (((name, len), (got_name, values)), slot) in expected.iter().zip(tensors).zip(params.tensors_mut()) {
            if name != got_name || *len != values.len() {
                return Err(Error::validation(format!(
                    "tensor {got_name} (len {}) does not match expected {name} (len {len})",
                    values.len()
                )));
            }
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::validation(format!("tensor {name} has non-finite entries")));
            }
            slot.copy_from_slice(values);
        }
        Ok(params)
    }

    /// Single-state inference. With `training_mode` dropout masks are drawn from `dropout_seed`.
    pub fn forward(&self, state: &StateVector, training_mode: bool, dropout_seed: u64) -> Result<ActionVector> {
        if state.len() != self.config.input_dim {
            return Err(Error::Dimension {
                what: "state",
                expected: self.config.input_dim,
                got: state.len(),
            });
        }
        let x = ArrayView2::from_shape((1, state.len()), state.as_slice()).expect("row shape");
        let mut rng = rng::stream(dropout_seed, 0);
        let out = self.forward_batch(x, training_mode.then_some(&mut rng));
        Ok(ActionVector::from_unchecked(out.into_raw_vec_and_offset().0))
    }

    /// Batched inference; `dropout` supplies masks when present.
    pub fn forward_batch(&self, x: ArrayView2<'_, f64>, dropout: Option<&mut Rng>) -> Array2<f64> {
        self.forward_cached(x, dropout).output
    }

    pub(crate) fn forward_cached(&self, x: ArrayView2<'_, f64>, mut dropout: Option<&mut Rng>) -> ForwardCache {
        let p = self.config.dropout_rate;
        let n_hidden = self.hidden.len();
        let mut layers = Vec::with_capacity(n_hidden);
        let mut current = x.to_owned();
        for (i, layer) in self.hidden.iter().enumerate() {
            let mut z = current.dot(&layer.dense.weight);
            z += &layer.dense.bias;
            let (normed, inv_std, pre_relu) = match &layer.norm {
                Some(norm) => {
                    let (n, inv) = normalize_rows(&z);
                    let mut y = &n * &norm.gain;
                    y += &norm.shift;
                    (Some(n), Some(inv), y)
                }
                None => (None, None, z),
            };
            let mut act = pre_relu.mapv(|v| v.max(0.0));
            let mask = match dropout.as_deref_mut() {
                Some(rng) if i + 1 < n_hidden && p > 0.0 => {
                    let keep = 1.0 / (1.0 - p);
                    let m = Array2::from_shape_fn(act.raw_dim(), |_| if rng.random::<f64>() < p { 0.0 } else { keep });
                    act *= &m;
                    Some(m)
                }
                _ => None,
            };
            layers.push(LayerCache {
                input: std::mem::replace(&mut current, act),
                normed,
                inv_std,
                pre_relu,
                mask,
            });
        }
        let mut output = current.dot(&self.output.weight);
        output += &self.output.bias;
        ForwardCache {
            layers,
            last_hidden: current,
            output,
        }
    }

    /// Gradients of a loss given `grad_output = dL/d(output)` for the cached pass.
    pub(crate) fn backward(&self, cache: &ForwardCache, grad_output: &Array2<f64>) -> MlpParameters {
        let mut grads = MlpParameters::zeros(&self.config).expect("validated config");
        grads.output.weight = standard(cache.last_hidden.t().dot(grad_output));
        grads.output.bias = grad_output.sum_axis(Axis(0));
        let mut g = grad_output.dot(&self.output.weight.t());
        for (i, (layer, lc)) in self.hidden.iter().zip(&cache.layers).enumerate().rev() {
            if let Some(mask) = &lc.mask {
                g *= mask;
            }
            g.zip_mut_with(&lc.pre_relu, |gv, &y| {
                if y <= 0.0 {
                    *gv = 0.0;
                }
            });
            let dz = match (&layer.norm, &lc.normed, &lc.inv_std) {
                (Some(norm), Some(n), Some(inv_std)) => {
                    let gnorm = grads.hidden[i].norm.as_mut().expect("shape mirrors params");
                    gnorm.gain = (&g * n).sum_axis(Axis(0));
                    gnorm.shift = g.sum_axis(Axis(0));
                    let gn = &g * &norm.gain;
                    layer_norm_backward(&gn, n, inv_std)
                }
                _ => g,
            };
            grads.hidden[i].dense.weight = standard(lc.input.t().dot(&dz));
            grads.hidden[i].dense.bias = dz.sum_axis(Axis(0));
            g = dz.dot(&layer.dense.weight.t());
        }
        grads
    }
}

fn standard(a: Array2<f64>) -> Array2<f64> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

fn normalize_rows(z: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    let width = z.ncols() as f64;
    let mut n = z.clone();
    let mut inv = Array1::zeros(z.nrows());
    for (mut row, inv_std) in n.rows_mut().into_iter().zip(inv.iter_mut()) {
        let mean = row.sum() / width;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / width;
        *inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        row *= *inv_std;
    }
    (n, inv)
}

fn layer_norm_backward(gn: &Array2<f64>, n: &Array2<f64>, inv_std: &Array1<f64>) -> Array2<f64> {
    let width = n.ncols() as f64;
    let mut dz = gn.clone();
    for ((mut drow, nrow), &s) in dz.rows_mut().into_iter().zip(n.rows()).zip(inv_std) {
        let mean_g = drow.sum() / width;
        let mean_gn = drow.iter().zip(nrow).map(|(g, n)| g * n).sum::<f64>() / width;
        for (d, &nv) in drow.iter_mut().zip(nrow) {
            *d = s * (*d - mean_g - nv * mean_gn);
        }
    }
    dz
}

/// Mean squared error over all batch rows and output dims, and its gradients.
pub fn loss_and_gradients(
    params: &MlpParameters,
    inputs: ArrayView2<'_, f64>,
    targets: ArrayView2<'_, f64>,
    dropout: Option<&mut Rng>,
) -> (f64, MlpParameters) {
    let cache = params.forward_cached(inputs, dropout);
    let diff = &cache.output - &targets;
    let count = diff.len() as f64;
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / count;
    let grad_out = diff * (2.0 / count);
    (loss, params.backward(&cache, &grad_out))
}

/// Mean squared error of deterministic predictions.
pub fn mse(params: &MlpParameters, inputs: ArrayView2<'_, f64>, targets: ArrayView2<'_, f64>) -> f64 {
    let out = params.forward_batch(inputs, None);
    let diff = out - targets;
    diff.iter().map(|d| d * d).sum::<f64>() / diff.len() as f64
}
