//! The two attention mechanisms used by the encoders.
//!
//! The identity encoder uses a concurrent spatial/channel squeeze-excitation
//! gate (scSE): a channel branch that squeezes to `C/r` units and re-excites
//! through a sigmoid, plus a spatial branch that gates each pixel through a
//! 1x1 projection; the two gated maps are added. The expression encoder wraps
//! the same gate in a supervised module that projects the gated features to
//! one plane per expression class, pools them into class probabilities, and
//! collapses the planes into a single normalized attention map that rescales
//! the input features.

use rand::Rng;

use crate::autodiff::{NodeId, Tape, Tensor};
use crate::error::{Error, Result};

/// Probabilities below this are clamped before the log in the attention loss.
pub const LOG_CLAMP: f64 = 1e-12;

/// Number of expression classes scored by a supervised attention module.
pub const EXPRESSION_CLASSES: usize = 6;

/// Weights of one scSE gate.
#[derive(Clone, Debug)]
pub struct ScseParams {
    /// Squeeze projection, `[C/r, C]`.
    pub fc1_w: Tensor,
    pub fc1_b: Tensor,
    /// Excite projection, `[C, C/r]`.
    pub fc2_w: Tensor,
    pub fc2_b: Tensor,
    /// Spatial gate 1x1 convolution, `[1, C, 1, 1]`.
    pub spatial_w: Tensor,
    pub spatial_b: Tensor,
    pub reduction: usize,
}

pub fn fan_in_uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::rand_uniform(shape, -bound, bound, rng)
}

impl ScseParams {
    /// Fan-in-scaled uniform init; `reduction` must divide `channels`.
    pub fn init(channels: usize, reduction: usize, rng: &mut impl Rng) -> Result<Self> {
        if reduction == 0 || channels % reduction != 0 {
            return Err(Error::Contract(format!(
                "scSE reduction {reduction} must divide channel count {channels}"
            )));
        }
        let mid = channels / reduction;
        Ok(Self {
            fc1_w: fan_in_uniform(&[mid, channels], channels, rng),
            fc1_b: Tensor::zeros(&[mid]),
            fc2_w: fan_in_uniform(&[channels, mid], mid, rng),
            fc2_b: Tensor::zeros(&[channels]),
            spatial_w: fan_in_uniform(&[1, channels, 1, 1], channels, rng),
            spatial_b: Tensor::zeros(&[1]),
            reduction,
        })
    }

    pub fn channels(&self) -> usize {
        self.fc1_w.shape()[1]
    }
}

/// Tape handles for one scSE gate's weights.
#[derive(Clone, Copy, Debug)]
pub struct ScseNodes {
    pub fc1_w: NodeId,
    pub fc1_b: NodeId,
    pub fc2_w: NodeId,
    pub fc2_b: NodeId,
    pub spatial_w: NodeId,
    pub spatial_b: NodeId,
}

impl ScseNodes {
    pub fn constants(tape: &mut Tape, p: &ScseParams) -> Self {
        Self {
            fc1_w: tape.constant(p.fc1_w.clone()),
            fc1_b: tape.constant(p.fc1_b.clone()),
            fc2_w: tape.constant(p.fc2_w.clone()),
            fc2_b: tape.constant(p.fc2_b.clone()),
            spatial_w: tape.constant(p.spatial_w.clone()),
            spatial_b: tape.constant(p.spatial_b.clone()),
        }
    }
}

/// cSE(x) + sSE(x): channel-gated map plus pixel-gated map.
pub fn scse_forward_on(tape: &mut Tape, x: NodeId, p: &ScseNodes) -> Result<NodeId> {
    // Channel branch: squeeze -> ReLU -> excite -> sigmoid gate.
    let squeezed = tape.global_avg_pool(x)?;
    let hidden = tape.fully_connected(squeezed, p.fc1_w, p.fc1_b)?;
    let hidden = tape.relu(hidden)?;
    let excite = tape.fully_connected(hidden, p.fc2_w, p.fc2_b)?;
    let channel_gate = tape.sigmoid(excite)?;
    let cse = tape.mul_channel(x, channel_gate)?;

    // Spatial branch: 1x1 projection -> sigmoid gate per pixel.
    let proj = tape.conv2d(x, p.spatial_w, p.spatial_b, 1, 0)?;
    let shape = tape.value(proj).shape().to_vec();
    let plane = tape.reshape(proj, vec![shape[1], shape[2]])?;
    let spatial_gate = tape.sigmoid(plane)?;
    let sse = tape.mul_spatial(x, spatial_gate)?;

    tape.add(cse, sse)
}

/// Value-level scSE forward.
pub fn scse_forward(x: &Tensor, params: &ScseParams) -> Result<Tensor> {
    if x.shape().len() != 3 || x.shape()[0] != params.channels() {
        return Err(Error::Dim(format!(
            "scSE expects [{}, H, W] input, got {:?}",
            params.channels(),
            x.shape()
        )));
    }
    let mut tape = Tape::new();
    let xid = tape.constant(x.clone());
    let nodes = ScseNodes::constants(&mut tape, params);
    let out = scse_forward_on(&mut tape, xid, &nodes)?;
    Ok(tape.value(out).clone())
}

/// Per-layer output of a supervised attention module.
#[derive(Clone, Debug)]
pub struct AttentionState {
    /// Class-plane maps, `[S, H, W]`.
    pub q_maps: Tensor,
    /// Softmax class probabilities, `[S]`.
    pub class_probs: Tensor,
    /// Normalized attention map in [0,1], `[H, W]`.
    pub attention_map: Tensor,
    /// Input rescaled by the attention map, `[C, H, W]`.
    pub attended: Tensor,
}

impl AttentionState {
    /// Check the structural invariants against the module input.
    pub fn validate(&self, input: &Tensor) -> Result<()> {
        let p = self.class_probs.data();
        if p.iter().any(|&v| v <= 0.0) {
            return Err(Error::Contract("class probabilities must be positive".into()));
        }
        if (p.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(Error::Contract("class probabilities must sum to 1".into()));
        }
        if self
            .attention_map
            .data()
            .iter()
            .any(|&v| !(-1e-12..=1.0 + 1e-12).contains(&v))
        {
            return Err(Error::Contract("attention map must lie in [0,1]".into()));
        }
        let (h, w) = (self.attention_map.shape()[0], self.attention_map.shape()[1]);
        let hw = h * w;
        for (i, (a, x)) in self.attended.data().iter().zip(input.data()).enumerate() {
            let alpha = self.attention_map.data()[i % hw];
            if (a - x * alpha).abs() > 1e-12 * 1f64.max(x.abs()) {
                return Err(Error::Contract(
                    "attended features must equal input times attention map".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Tape handles for a supervised attention module: an scSE gate plus the
/// class projection (1x1, no bias).
#[derive(Clone, Copy, Debug)]
pub struct SupervisedAttentionNodes {
    pub scse: ScseNodes,
    pub proj_w: NodeId,
    /// Constant zero bias for the projection.
    pub proj_zero_b: NodeId,
}

/// Node-level view of the module output (values live on the tape).
#[derive(Clone, Copy, Debug)]
pub struct SupervisedAttentionOut {
    pub q_maps: NodeId,
    pub class_probs: NodeId,
    pub attention_map: NodeId,
    pub attended: NodeId,
}

/// Gate with scSE, project to class planes, pool into class probabilities,
/// then collapse the planes by probability weight and min-max normalize into
/// the attention map that rescales the input.
pub fn supervised_attention_forward_on(
    tape: &mut Tape,
    x: NodeId,
    p: &SupervisedAttentionNodes,
) -> Result<SupervisedAttentionOut> {
    let gated = scse_forward_on(tape, x, &p.scse)?;
    let q_maps = tape.conv2d(gated, p.proj_w, p.proj_zero_b, 1, 0)?;
    let pooled = tape.global_avg_pool(q_maps)?;
    let class_probs = tape.softmax(pooled)?;
    let weighted = tape.weighted_plane_sum(q_maps, class_probs)?;
    let attention_map = tape.minmax_norm(weighted)?;
    let attended = tape.mul_spatial(x, attention_map)?;
    Ok(SupervisedAttentionOut {
        q_maps,
        class_probs,
        attention_map,
        attended,
    })
}

/// Value-level supervised attention forward.
pub fn supervised_attention_forward(
    x: &Tensor,
    scse: &ScseParams,
    proj_w: &Tensor,
) -> Result<AttentionState> {
    if proj_w.shape().len() != 4 || proj_w.shape()[0] != EXPRESSION_CLASSES {
        return Err(Error::Dim(format!(
            "class projection must be [{EXPRESSION_CLASSES}, C, 1, 1], got {:?}",
            proj_w.shape()
        )));
    }
    let mut tape = Tape::new();
    let xid = tape.constant(x.clone());
    let nodes = SupervisedAttentionNodes {
        scse: ScseNodes::constants(&mut tape, scse),
        proj_w: tape.constant(proj_w.clone()),
        proj_zero_b: tape.constant(Tensor::zeros(&[EXPRESSION_CLASSES])),
    };
    let out = supervised_attention_forward_on(&mut tape, xid, &nodes)?;
    Ok(AttentionState {
        q_maps: tape.value(out.q_maps).clone(),
        class_probs: tape.value(out.class_probs).clone(),
        attention_map: tape.value(out.attention_map).clone(),
        attended: tape.value(out.attended).clone(),
    })
}

fn validate_probs(p: &Tensor) -> Result<()> {
    if p.shape().len() != 1 {
        return Err(Error::Dim(format!(
            "probability vector expected, got {:?}",
            p.shape()
        )));
    }
    if p.data().iter().any(|&v| v <= 0.0) || (p.data().iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Contract(
            "probabilities must be positive and sum to 1".into(),
        ));
    }
    Ok(())
}

/// Mean over layers of `-log P[label]`, the per-sample supervision signal for
/// the expression attention modules. Layers are weighted equally.
pub fn attention_loss(class_probs_per_layer: &[Tensor], label: usize) -> Result<f64> {
    if class_probs_per_layer.is_empty() {
        return Err(Error::Contract("attention_loss needs at least one layer".into()));
    }
    let mut total = 0.0;
    for p in class_probs_per_layer {
        validate_probs(p)?;
        if label >= p.numel() {
            return Err(Error::Contract(format!(
                "label {label} out of range for {} classes",
                p.numel()
            )));
        }
        total += -(p.data()[label].max(LOG_CLAMP)).ln();
    }
    Ok(total / class_probs_per_layer.len() as f64)
}

/// Tape version of [`attention_loss`] over per-layer probability nodes.
pub fn attention_loss_on(tape: &mut Tape, probs: &[NodeId], label: usize) -> Result<NodeId> {
    if probs.is_empty() {
        return Err(Error::Contract("attention_loss needs at least one layer".into()));
    }
    let mut acc: Option<NodeId> = None;
    for &p in probs {
        let term = tape.neg_log_prob(p, label, LOG_CLAMP)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
    }
    tape.scale(acc.unwrap(), 1.0 / probs.len() as f64)
}
