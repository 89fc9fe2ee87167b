//! Value-level wrappers over the tape ops.
//!
//! Convenient for tests and one-shot evaluation; each call runs the op on an
//! ephemeral tape and returns the output tensor.

use crate::autodiff::tape::Tape;
use crate::autodiff::tensor::Tensor;
use crate::error::Result;

/// Pointwise nonlinearity selector.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    LeakyRelu(f64),
    Relu,
    Sigmoid,
}

pub fn conv2d(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (xi, wi, bi) = (tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(b.clone()));
    let out = tape.conv2d(xi, wi, bi, stride, pad)?;
    Ok(tape.value(out).clone())
}

pub fn instance_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (xi, gi, bi) = (tape.constant(x.clone()), tape.constant(gamma.clone()), tape.constant(beta.clone()));
    let out = tape.instance_norm(xi, gi, bi, eps)?;
    Ok(tape.value(out).clone())
}

pub fn pointwise_activation(kind: Activation, x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xi = tape.constant(x.clone());
    let out = match kind {
        Activation::LeakyRelu(slope) => tape.leaky_relu(xi, slope)?,
        Activation::Relu => tape.relu(xi)?,
        Activation::Sigmoid => tape.sigmoid(xi)?,
    };
    Ok(tape.value(out).clone())
}

pub fn softmax(x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xi = tape.constant(x.clone());
    let out = tape.softmax(xi)?;
    Ok(tape.value(out).clone())
}

pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xi = tape.constant(x.clone());
    let out = tape.global_avg_pool(xi)?;
    Ok(tape.value(out).clone())
}

pub fn fully_connected(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (xi, wi, bi) = (tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(b.clone()));
    let out = tape.fully_connected(xi, wi, bi)?;
    Ok(tape.value(out).clone())
}

pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xi = tape.constant(x.clone());
    let out = tape.upsample2x(xi)?;
    Ok(tape.value(out).clone())
}

pub fn circular_convolve(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (ai, bi) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let out = tape.circular_convolve(ai, bi)?;
    Ok(tape.value(out).clone())
}
