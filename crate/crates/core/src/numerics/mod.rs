//! Numeric kernel: tensors, deterministic RNG, and reverse-mode differentiation.
//!
//! Everything above this module (encoders, UNet, trainer, samplers) is built
//! from these pieces. All operations are pure functions of their inputs; the
//! only entropy source in the system is [`Rng`].

pub mod kernels;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use rng::Rng;
pub use tape::{Tape, Var};
pub use tensor::{matmul, softmax, Dtype, Scalar, Tensor};

use crate::error::{Error, Result};
use std::collections::BTreeMap;

/// Named parameter collection; API order is the sorted name order, which is
/// also the checkpoint serialization order.
pub type NamedTensors<T> = BTreeMap<String, Tensor<T>>;

/// Gradient of a scalar loss with respect to every named parameter.
///
/// `loss_fn` builds the loss on the provided tape from the registered
/// parameter variables. Parameters that do not participate in the loss get a
/// zero gradient. Returns the loss value together with the gradient map.
pub fn grad<T: Scalar, F>(params: &NamedTensors<T>, loss_fn: F) -> Result<(T, NamedTensors<T>)>
where
    F: FnOnce(&mut Tape<T>, &BTreeMap<String, Var>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let mut vars = BTreeMap::new();
    for (name, value) in params {
        vars.insert(name.clone(), tape.leaf(value.clone()));
    }
    let loss = loss_fn(&mut tape, &vars)?;
    if tape.value(loss).numel() != 1 {
        return Err(Error::contract(format!(
            "loss must be scalar, got shape {:?}",
            tape.value(loss).shape()
        )));
    }
    let loss_value = tape.value(loss).data()[0];
    tape.backward(loss)?;
    let mut grads = BTreeMap::new();
    for (name, var) in &vars {
        let g = match tape.grad(*var) {
            Some(g) => Tensor::new(params[name].shape().to_vec(), g.to_vec())?,
            None => Tensor::zeros(params[name].shape()),
        };
        grads.insert(name.clone(), g);
    }
    Ok((loss_value, grads))
}

/// Central finite difference of a scalar function at one coordinate of one
/// named parameter. Test-side oracle; independent of the tape.
pub fn central_difference<F>(
    params: &NamedTensors<f64>,
    name: &str,
    index: usize,
    h: f64,
    mut eval: F,
) -> Result<f64>
where
    F: FnMut(&NamedTensors<f64>) -> Result<f64>,
{
    let mut plus = params.clone();
    plus.get_mut(name)
        .ok_or_else(|| Error::contract(format!("unknown parameter {name}")))?
        .data_mut()[index] += h;
    let mut minus = params.clone();
    minus.get_mut(name).unwrap().data_mut()[index] -= h;
    Ok((eval(&plus)? - eval(&minus)?) / (2.0 * h))
}

/// Relative error with a floor so that near-zero gradient pairs compare sanely.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-8 {
        0.0
    } else {
        (a - b).abs() / scale.max(1e-6)
    }
}
