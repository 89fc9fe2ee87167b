//! Finite-difference verification of tape gradients.
//!
//! Central differences with a configurable step, compared against the
//! analytic gradient from a reverse sweep. The reported figure is
//! `max_i |analytic_i - numeric_i| / max(1, |analytic_i|, |numeric_i|)`.

use crate::autodiff::tape::{NodeId, Tape};
use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};

/// Builds a scalar loss from leaf nodes (one per checked input tensor).
pub trait LossBuilder {
    fn build(&self, tape: &mut Tape, inputs: &[NodeId]) -> Result<NodeId>;
}

impl<F> LossBuilder for F
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    fn build(&self, tape: &mut Tape, inputs: &[NodeId]) -> Result<NodeId> {
        self(tape, inputs)
    }
}

fn eval_scalar(builder: &impl LossBuilder, inputs: &[Tensor]) -> Result<f64> {
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = builder.build(&mut tape, &ids)?;
    let v = tape.value(loss).item();
    if !v.is_finite() {
        return Err(Error::NonFinite("gradcheck objective is not finite".into()));
    }
    Ok(v)
}

/// Check the gradient of `builder` with respect to every coordinate of every
/// input. Returns the maximum relative error.
pub fn gradcheck_multi(builder: &impl LossBuilder, inputs: &[Tensor], step: f64) -> Result<f64> {
    let all: Vec<Vec<usize>> = inputs.iter().map(|t| (0..t.numel()).collect()).collect();
    let coord_refs: Vec<&[usize]> = all.iter().map(|v| v.as_slice()).collect();
    gradcheck_multi_coords(builder, inputs, step, &coord_refs)
}

/// Like [`gradcheck_multi`] but only probing the listed coordinates per input
/// (for large parameter vectors where probing every entry is wasteful).
pub fn gradcheck_multi_coords(
    builder: &impl LossBuilder,
    inputs: &[Tensor],
    step: f64,
    coords: &[&[usize]],
) -> Result<f64> {
    if step <= 0.0 {
        return Err(Error::Contract("gradcheck step must be > 0".into()));
    }
    if coords.len() != inputs.len() {
        return Err(Error::Contract(
            "gradcheck got coordinate lists for the wrong number of inputs".into(),
        ));
    }

    // Analytic gradients.
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = builder.build(&mut tape, &ids)?;
    if !tape.value(loss).is_scalar() {
        return Err(Error::Contract("gradcheck objective must be scalar".into()));
    }
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(inputs)
        .map(|(id, t)| tape.grad(*id).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let mut worst = 0.0f64;
    for (pos, (input, coord_list)) in inputs.iter().zip(coords).enumerate() {
        for &i in coord_list.iter() {
            let base = input.data()[i];
            let mut probe = inputs.to_vec();
            probe[pos] = input.with_value_at(i, base + step);
            let f_plus = eval_scalar(builder, &probe)?;
            probe[pos] = input.with_value_at(i, base - step);
            let f_minus = eval_scalar(builder, &probe)?;
            let numeric = (f_plus - f_minus) / (2.0 * step);
            let a = analytic[pos][i];
            let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

/// Single-input convenience wrapper: max relative error of d(builder)/dx.
pub fn gradcheck(
    builder: impl Fn(&mut Tape, NodeId) -> Result<NodeId>,
    x: &Tensor,
    step: f64,
) -> Result<f64> {
    let wrapped = move |tape: &mut Tape, ids: &[NodeId]| builder(tape, ids[0]);
    gradcheck_multi(&wrapped, std::slice::from_ref(x), step)
}
