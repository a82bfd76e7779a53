//! Finite-difference check of the analytic MSE gradients.

use ndarray::Array2;
use rand::Rng as _;

use super::mlp::{loss_and_gradients, mse, MlpConfig, MlpParameters};
use crate::error::{Error, Result};
use crate::rng;

pub const FD_STEP: f64 = 1e-5;
const BATCH: usize = 8;
/// Pre-activations closer than this to the ReLU kink make central differences
/// straddle a non-differentiable point, so such batches are redrawn.
const KINK_MARGIN: f64 = 1e-3;
/// Floor on the relative-error denominator for near-zero gradients.
const REL_FLOOR: f64 = 1e-6;

/// Largest relative error between analytic and central-difference gradients
/// over every parameter of a randomly initialised net, dropout disabled.
pub fn gradient_check(mlp_config: &MlpConfig, seed: u64) -> Result<f64> {
    mlp_config.validate()?;
    if mlp_config.hidden_sizes.iter().any(|&h| h > 16) {
        return Err(Error::validation(
            "gradient check is limited to hidden layers of at most 16 units",
        ));
    }
    let mut r = rng::stream(seed, 7);
    let mut params = MlpParameters::init(mlp_config, &mut r)?;
    // move biases and norm parameters off their initial values
    for t in params.tensors_mut() {
        for v in t.iter_mut() {
            *v += r.random_range(-0.3..0.3);
        }
    }
    let (x, y) = (0..64)
        .find_map(|_| {
            let x = Array2::from_shape_fn((BATCH, mlp_config.input_dim), |_| r.random_range(-1.0..1.0));
            let y = Array2::from_shape_fn((BATCH, mlp_config.output_dim), |_| r.random_range(-1.0..1.0));
            clear_of_kinks(&params, &x).then_some((x, y))
        })
        .ok_or_else(|| Error::validation("could not draw a batch away from ReLU kinks"))?;

    let (_, analytic) = loss_and_gradients(&params, x.view(), y.view(), None);
    let analytic: Vec<f64> = analytic
        .tensors()
        .iter()
        .flat_map(|(_, _, v)| v.iter().copied())
        .collect();

    let mut max_err: f64 = 0.0;
    let mut flat_index = 0;
    let n_tensors = params.tensors().len();
    for ti in 0..n_tensors {
        let len = params.tensors()[ti].2.len();
        for j in 0..len {
            let orig = params.tensors()[ti].2[j];
            params.tensors_mut()[ti][j] = orig + FD_STEP;
            let plus = mse(&params, x.view(), y.view());
            params.tensors_mut()[ti][j] = orig - FD_STEP;
            let minus = mse(&params, x.view(), y.view());
            params.tensors_mut()[ti][j] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = analytic[flat_index];
            let denom = a.abs().max(numeric.abs()).max(REL_FLOOR);
            max_err = max_err.max((a - numeric).abs() / denom);
            flat_index += 1;
        }
    }
    Ok(max_err)
}

fn clear_of_kinks(params: &MlpParameters, x: &Array2<f64>) -> bool {
    let cache = params.forward_cached(x.view(), None);
    let clear = cache.pre_relu_values().all(|v| v.abs() > KINK_MARGIN);
    clear
}
