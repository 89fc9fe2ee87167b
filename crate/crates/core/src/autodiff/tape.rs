//! Reverse-mode computation tape.
//!
//! Every operation appends a node holding its output tensor and enough saved
//! state to run its backward rule. Nodes only reference earlier nodes, so the
//! node list is already a topological order and `backward` is a single
//! reverse sweep. Gradients accumulate additively into every reachable node;
//! leaves inserted with [`Tape::constant`] are skipped entirely, which also
//! skips the work of differentiating into them.

use std::sync::Arc;

use crate::autodiff::kernels as k;
use crate::autodiff::tensor::{check_finite_slice, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

/// Frozen count-sketch coefficients shared by tape nodes.
#[derive(Debug)]
pub struct SketchCoeffs {
    pub d_out: usize,
    pub hash: Vec<usize>,
    pub sign: Vec<f64>,
}

enum Op {
    Leaf,
    Conv2d { x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize },
    InstanceNorm { x: NodeId, gamma: NodeId, beta: NodeId, mu: Vec<f64>, inv_std: Vec<f64> },
    LeakyRelu { x: NodeId, slope: f64 },
    Relu { x: NodeId },
    Sigmoid { x: NodeId },
    Softmax { x: NodeId },
    GlobalAvgPool { x: NodeId },
    FullyConnected { x: NodeId, w: NodeId, b: NodeId },
    Upsample2x { x: NodeId },
    AvgPool2x { x: NodeId },
    CircConv { a: NodeId, b: NodeId },
    CountSketch { x: NodeId, coeffs: Arc<SketchCoeffs> },
    SignedSqrt { x: NodeId, eps: f64 },
    L2NormChannels { x: NodeId, clamp: f64, norms: Vec<f64> },
    MulChannel { x: NodeId, gate: NodeId },
    MulSpatial { x: NodeId, s: NodeId },
    WeightedPlaneSum { q: NodeId, p: NodeId },
    MinMaxNorm { x: NodeId, imin: usize, imax: usize, range: f64 },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    MulElem { a: NodeId, b: NodeId },
    Scale { x: NodeId, c: f64 },
    AddScalar { x: NodeId },
    Abs { x: NodeId },
    Square { x: NodeId },
    Sum { x: NodeId },
    Mean { x: NodeId },
    Reshape { x: NodeId },
    ConcatVec { a: NodeId, b: NodeId },
    NegLogProb { p: NodeId, index: usize, clamp: f64 },
}

struct Node {
    op: Op,
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

/// Reverse-mode tape. Single-threaded; build one per differentiated scalar.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_run: bool,
}

/// Gradient buffers under construction during the reverse sweep.
struct GradStore {
    bufs: Vec<Option<Vec<f64>>>,
}

impl GradStore {
    fn take(&mut self, id: NodeId, numel: usize) -> Vec<f64> {
        self.bufs[id.0].take().unwrap_or_else(|| vec![0.0; numel])
    }

    fn put(&mut self, id: NodeId, buf: Vec<f64>) {
        self.bufs[id.0] = Some(buf);
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a differentiable leaf (parameter or checked input).
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push_unchecked(Op::Leaf, value, true)
    }

    /// Insert a non-differentiated constant (data, targets, masks).
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push_unchecked(Op::Leaf, value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` root with respect to this node.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn grad_tensor(&self, id: NodeId) -> Option<Tensor> {
        let node = &self.nodes[id.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    /// Drop all gradients and allow another backward pass.
    pub fn reset_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backward_run = false;
    }

    fn push_unchecked(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            grad: None,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>, what: &str) -> Result<NodeId> {
        check_finite_slice(&data, what)?;
        let requires_grad = self.op_requires_grad(&op);
        Ok(self.push_unchecked(op, Tensor::new(shape, data)?, requires_grad))
    }

    fn op_requires_grad(&self, op: &Op) -> bool {
        let dep = |id: &NodeId| self.nodes[id.0].requires_grad;
        match op {
            Op::Leaf => false,
            Op::Conv2d { x, w, b, .. } | Op::FullyConnected { x, w, b } => {
                dep(x) || dep(w) || dep(b)
            }
            Op::InstanceNorm { x, gamma, beta, .. } => dep(x) || dep(gamma) || dep(beta),
            Op::LeakyRelu { x, .. }
            | Op::Relu { x }
            | Op::Sigmoid { x }
            | Op::Softmax { x }
            | Op::GlobalAvgPool { x }
            | Op::Upsample2x { x }
            | Op::AvgPool2x { x }
            | Op::CountSketch { x, .. }
            | Op::SignedSqrt { x, .. }
            | Op::L2NormChannels { x, .. }
            | Op::MinMaxNorm { x, .. }
            | Op::Scale { x, .. }
            | Op::AddScalar { x }
            | Op::Abs { x }
            | Op::Square { x }
            | Op::Sum { x }
            | Op::Mean { x }
            | Op::Reshape { x } => dep(x),
            Op::CircConv { a, b }
            | Op::Add { a, b }
            | Op::Sub { a, b }
            | Op::MulElem { a, b }
            | Op::ConcatVec { a, b } => dep(a) || dep(b),
            Op::MulChannel { x, gate } => dep(x) || dep(gate),
            Op::MulSpatial { x, s } => dep(x) || dep(s),
            Op::WeightedPlaneSum { q, p } => dep(q) || dep(p),
            Op::NegLogProb { p, .. } => dep(p),
        }
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn data(&self, id: NodeId) -> &[f64] {
        self.nodes[id.0].value.data()
    }

    fn want_rank(&self, id: NodeId, rank: usize, what: &str) -> Result<()> {
        if self.shape(id).len() != rank {
            return Err(Error::Dim(format!(
                "{what}: expected rank {rank}, got shape {:?}",
                self.shape(id)
            )));
        }
        Ok(())
    }

    // -- convolution stack --------------------------------------------------

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        self.want_rank(x, 3, "conv2d input")?;
        if self.shape(w).len() != 4 {
            return Err(Error::Dim(format!(
                "conv2d weight must be [c_out, c_in, k, k], got {:?}",
                self.shape(w)
            )));
        }
        let (c_in, h, wd) = (self.shape(x)[0], self.shape(x)[1], self.shape(x)[2]);
        let (c_out, wc_in, kh, kw) = (
            self.shape(w)[0],
            self.shape(w)[1],
            self.shape(w)[2],
            self.shape(w)[3],
        );
        if kh != kw {
            return Err(Error::Dim(format!("conv2d kernel must be square, got {kh}x{kw}")));
        }
        if wc_in != c_in {
            return Err(Error::Dim(format!(
                "conv2d weight expects {wc_in} input channels, input has {c_in}"
            )));
        }
        if self.shape(b) != [c_out] {
            return Err(Error::Dim(format!(
                "conv2d bias shape {:?} does not match {c_out} output channels",
                self.shape(b)
            )));
        }
        if stride < 1 {
            return Err(Error::Contract("conv2d stride must be >= 1".into()));
        }
        if h + 2 * pad < kh || wd + 2 * pad < kh {
            return Err(Error::Contract(format!(
                "conv2d kernel {kh} larger than padded input {h}x{wd} (pad {pad})"
            )));
        }
        let out = k::conv2d_forward(
            self.data(x),
            c_in,
            h,
            wd,
            self.data(w),
            c_out,
            kh,
            self.data(b),
            stride,
            pad,
        );
        let h2 = k::conv_out_dim(h, kh, stride, pad);
        let w2 = k::conv_out_dim(wd, kh, stride, pad);
        self.push(
            Op::Conv2d { x, w, b, stride, pad },
            vec![c_out, h2, w2],
            out,
            "conv2d",
        )
    }

    pub fn instance_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        self.want_rank(x, 3, "instance_norm input")?;
        if eps <= 0.0 {
            return Err(Error::Contract("instance_norm eps must be > 0".into()));
        }
        let (c, h, w) = (self.shape(x)[0], self.shape(x)[1], self.shape(x)[2]);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::Dim(format!(
                "instance_norm affine params must have shape [{c}], got {:?} and {:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let (out, mu, inv_std) =
            k::instance_norm_forward(self.data(x), c, h * w, self.data(gamma), self.data(beta), eps);
        self.push(
            Op::InstanceNorm { x, gamma, beta, mu, inv_std },
            vec![c, h, w],
            out,
            "instance_norm",
        )
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> Result<NodeId> {
        if !(0.0 < slope && slope < 1.0) {
            return Err(Error::Contract(format!(
                "leaky_relu slope must be in (0,1), got {slope}"
            )));
        }
        let out = k::leaky_relu_forward(self.data(x), slope);
        let shape = self.shape(x).to_vec();
        self.push(Op::LeakyRelu { x, slope }, shape, out, "leaky_relu")
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let out = self.data(x).iter().map(|&v| v.max(0.0)).collect();
        let shape = self.shape(x).to_vec();
        self.push(Op::Relu { x }, shape, out, "relu")
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let out = k::sigmoid_forward(self.data(x));
        let shape = self.shape(x).to_vec();
        self.push(Op::Sigmoid { x }, shape, out, "sigmoid")
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        self.want_rank(x, 1, "softmax input")?;
        let out = k::softmax_forward(self.data(x));
        let shape = self.shape(x).to_vec();
        self.push(Op::Softmax { x }, shape, out, "softmax")
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        self.want_rank(x, 3, "global_avg_pool input")?;
        let (c, h, w) = (self.shape(x)[0], self.shape(x)[1], self.shape(x)[2]);
        let out = k::global_avg_pool_forward(self.data(x), c, h * w);
        self.push(Op::GlobalAvgPool { x }, vec![c], out, "global_avg_pool")
    }

    pub fn fully_connected(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        self.want_rank(x, 1, "fully_connected input")?;
        self.want_rank(w, 2, "fully_connected weight")?;
        let n = self.shape(x)[0];
        let (m, wn) = (self.shape(w)[0], self.shape(w)[1]);
        if wn != n {
            return Err(Error::Dim(format!(
                "fully_connected weight [{m},{wn}] does not accept input of length {n}"
            )));
        }
        if self.shape(b) != [m] {
            return Err(Error::Dim(format!(
                "fully_connected bias shape {:?}, expected [{m}]",
                self.shape(b)
            )));
        }
        let out = k::fc_forward(self.data(x), self.data(w), m, n, self.data(b));
        self.push(Op::FullyConnected { x, w, b }, vec![m], out, "fully_connected")
    }

    pub fn upsample2x(&mut self, x: NodeId) -> Result<NodeId> {
        self.want_rank(x, 3, "upsample2x input")?;
        let (c, h, w) = (self.shape(x)[0], self.shape(x)[1], self.shape(x)[2]);
        let out = k::upsample2x_forward(self.data(x), c, h, w);
        self.push(Op::Upsample2x { x }, vec![c, 2 * h, 2 * w], out, "upsample2x")
    }

    pub fn avgpool2x(&mut self, x: NodeId) -> Result<NodeId> {
        self.want_rank(x, 3, "avgpool2x input")?;
        let (c, h, w) = (self.shape(x)[0], self.shape(x)[1], self.shape(x)[2]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Dim(format!("avgpool2x needs even spatial dims, got {h}x{w}")));
        }
        let out = k::avgpool2x_forward(self.data(x), c, h, w);
        self.push(Op::AvgPool2x { x }, vec![c, h / 2, w / 2], out, "avgpool2x")
    }

    /// Circular convolution. Accepts equal-shape rank-1 vectors or rank-3
    /// [d,H,W] maps convolved per pixel along the channel axis.
    pub fn circular_convolve(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dim(format!(
                "circular_convolve operands must share shape: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let shape = self.shape(a).to_vec();
        let (d, hw) = match shape.len() {
            1 => (shape[0], 1),
            3 => (shape[0], shape[1] * shape[2]),
            r => {
                return Err(Error::Dim(format!(
                    "circular_convolve supports rank 1 or 3, got rank {r}"
                )))
            }
        };
        let out = if hw == 1 {
            k::circ_conv_forward(self.data(a), self.data(b))
        } else {
            k::circ_conv_map_forward(self.data(a), self.data(b), d, hw)
        };
        self.push(Op::CircConv { a, b }, shape, out, "circular_convolve")
    }

    /// Count sketch along the channel axis; rank-1 [C] or rank-3 [C,H,W].
    pub fn count_sketch(&mut self, x: NodeId, coeffs: Arc<SketchCoeffs>) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        let (c, hw, out_shape) = match shape.len() {
            1 => (shape[0], 1, vec![coeffs.d_out]),
            3 => (shape[0], shape[1] * shape[2], vec![coeffs.d_out, shape[1], shape[2]]),
            r => {
                return Err(Error::Dim(format!(
                    "count_sketch supports rank 1 or 3, got rank {r}"
                )))
            }
        };
        if coeffs.hash.len() != c || coeffs.sign.len() != c {
            return Err(Error::Dim(format!(
                "count_sketch coefficients cover {} channels, input has {c}",
                coeffs.hash.len()
            )));
        }
        if let Some(&bad) = coeffs.hash.iter().find(|&&h| h >= coeffs.d_out) {
            return Err(Error::Contract(format!(
                "count_sketch hash value {bad} out of range for d_out {}",
                coeffs.d_out
            )));
        }
        let out = k::count_sketch_forward(self.data(x), c, hw, coeffs.d_out, &coeffs.hash, &coeffs.sign);
        self.push(Op::CountSketch { x, coeffs }, out_shape, out, "count_sketch")
    }

    pub fn signed_sqrt(&mut self, x: NodeId, eps: f64) -> Result<NodeId> {
        if eps <= 0.0 {
            return Err(Error::Contract("signed_sqrt eps must be > 0".into()));
        }
        let out = k::signed_sqrt_forward(self.data(x), eps);
        let shape = self.shape(x).to_vec();
        self.push(Op::SignedSqrt { x, eps }, shape, out, "signed_sqrt")
    }

    pub fn l2_normalize_channels(&mut self, x: NodeId, clamp: f64) -> Result<NodeId> {
        self.want_rank(x, 3, "l2_normalize_channels input")?;
        if clamp <= 0.0 {
            return Err(Error::Contract("l2 norm clamp must be > 0".into()));
        }
        let (d, h, w) = (self.shape(x)[0], self.shape(x)[1], self.shape(x)[2]);
        let (out, norms) = k::l2norm_channels_forward(self.data(x), d, h * w, clamp);
        self.push(
            Op::L2NormChannels { x, clamp, norms },
            vec![d, h, w],
            out,
            "l2_normalize_channels",
        )
    }

    pub fn mul_channel(&mut self, x: NodeId, gate: NodeId) -> Result<NodeId> {
        self.want_rank(x, 3, "mul_channel input")?;
        let (c, h, w) = (self.shape(x)[0], self.shape(x)[1], self.shape(x)[2]);
        if self.shape(gate) != [c] {
            return Err(Error::Dim(format!(
                "mul_channel gate shape {:?}, expected [{c}]",
                self.shape(gate)
            )));
        }
        let out = k::mul_channel_forward(self.data(x), self.data(gate), c, h * w);
        self.push(Op::MulChannel { x, gate }, vec![c, h, w], out, "mul_channel")
    }

    pub fn mul_spatial(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        self.want_rank(x, 3, "mul_spatial input")?;
        let (c, h, w) = (self.shape(x)[0], self.shape(x)[1], self.shape(x)[2]);
        if self.shape(s) != [h, w] {
            return Err(Error::Dim(format!(
                "mul_spatial map shape {:?}, expected [{h}, {w}]",
                self.shape(s)
            )));
        }
        let out = k::mul_spatial_forward(self.data(x), self.data(s), c, h * w);
        self.push(Op::MulSpatial { x, s }, vec![c, h, w], out, "mul_spatial")
    }

    pub fn weighted_plane_sum(&mut self, q: NodeId, p: NodeId) -> Result<NodeId> {
        self.want_rank(q, 3, "weighted_plane_sum maps")?;
        let (s, h, w) = (self.shape(q)[0], self.shape(q)[1], self.shape(q)[2]);
        if self.shape(p) != [s] {
            return Err(Error::Dim(format!(
                "weighted_plane_sum weights shape {:?}, expected [{s}]",
                self.shape(p)
            )));
        }
        let out = k::weighted_plane_sum_forward(self.data(q), self.data(p), s, h * w);
        self.push(Op::WeightedPlaneSum { q, p }, vec![h, w], out, "weighted_plane_sum")
    }

    pub fn minmax_norm(&mut self, x: NodeId) -> Result<NodeId> {
        self.want_rank(x, 2, "minmax_norm input")?;
        let (out, imin, imax, range) = k::minmax_norm_forward(self.data(x));
        let shape = self.shape(x).to_vec();
        self.push(Op::MinMaxNorm { x, imin, imax, range }, shape, out, "minmax_norm")
    }

    // -- elementwise / reductions -------------------------------------------

    fn want_same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dim(format!(
                "{what}: shape mismatch {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.want_same_shape(a, b, "add")?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        self.push(Op::Add { a, b }, shape, out, "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.want_same_shape(a, b, "sub")?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x - y).collect();
        let shape = self.shape(a).to_vec();
        self.push(Op::Sub { a, b }, shape, out, "sub")
    }

    pub fn mul_elem(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.want_same_shape(a, b, "mul_elem")?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        self.push(Op::MulElem { a, b }, shape, out, "mul_elem")
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let out = self.data(x).iter().map(|v| c * v).collect();
        let shape = self.shape(x).to_vec();
        self.push(Op::Scale { x, c }, shape, out, "scale")
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let out = self.data(x).iter().map(|v| v + c).collect();
        let shape = self.shape(x).to_vec();
        self.push(Op::AddScalar { x }, shape, out, "add_scalar")
    }

    pub fn abs(&mut self, x: NodeId) -> Result<NodeId> {
        let out = self.data(x).iter().map(|v| v.abs()).collect();
        let shape = self.shape(x).to_vec();
        self.push(Op::Abs { x }, shape, out, "abs")
    }

    pub fn square(&mut self, x: NodeId) -> Result<NodeId> {
        let out = self.data(x).iter().map(|v| v * v).collect();
        let shape = self.shape(x).to_vec();
        self.push(Op::Square { x }, shape, out, "square")
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let out = vec![self.data(x).iter().sum::<f64>()];
        self.push(Op::Sum { x }, Vec::new(), out, "sum")
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.data(x).len() as f64;
        let out = vec![self.data(x).iter().sum::<f64>() / n];
        self.push(Op::Mean { x }, Vec::new(), out, "mean")
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let t = self.nodes[x.0].value.reshaped(shape.clone())?;
        let requires_grad = self.nodes[x.0].requires_grad;
        Ok(self.push_unchecked(
            Op::Reshape { x },
            t,
            requires_grad,
        ))
    }

    pub fn concat_vec(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.want_rank(a, 1, "concat_vec lhs")?;
        self.want_rank(b, 1, "concat_vec rhs")?;
        let mut out = self.data(a).to_vec();
        out.extend_from_slice(self.data(b));
        let n = out.len();
        self.push(Op::ConcatVec { a, b }, vec![n], out, "concat_vec")
    }

    /// -log(max(p[index], clamp)): the per-sample classification loss.
    pub fn neg_log_prob(&mut self, p: NodeId, index: usize, clamp: f64) -> Result<NodeId> {
        self.want_rank(p, 1, "neg_log_prob input")?;
        if index >= self.shape(p)[0] {
            return Err(Error::Contract(format!(
                "neg_log_prob index {index} out of range for {} classes",
                self.shape(p)[0]
            )));
        }
        let out = vec![-(self.data(p)[index].max(clamp)).ln()];
        self.push(Op::NegLogProb { p, index, clamp }, Vec::new(), out, "neg_log_prob")
    }

    // -- backward ------------------------------------------------------------

    /// Reverse sweep from a scalar loss node. Gradients of every reachable
    /// differentiable node become available through [`Tape::grad`].
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.backward_run {
            return Err(Error::State(
                "backward already ran on this tape; use reset_grads or a fresh tape".into(),
            ));
        }
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.backward_run = true;
        let mut grads = GradStore {
            bufs: (0..self.nodes.len()).map(|_| None).collect(),
        };
        grads.put(loss, vec![1.0]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                grads.bufs[id] = None;
                continue;
            }
            let Some(g) = grads.bufs[id].take() else { continue };
            self.dispatch_backward(NodeId(id), &g, &mut grads)?;
            check_finite_slice(&g, "backward gradient")?;
            self.nodes[id].grad = Some(g);
        }
        Ok(())
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn dispatch_backward(&self, id: NodeId, g: &[f64], grads: &mut GradStore) -> Result<()> {
        let numel = |nid: NodeId| self.nodes[nid.0].value.numel();
        match &self.nodes[id.0].op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride, pad } => {
                let (c_in, h, wd) = (self.shape(*x)[0], self.shape(*x)[1], self.shape(*x)[2]);
                let (c_out, kh) = (self.shape(*w)[0], self.shape(*w)[2]);
                let mut dx = self.needs(*x).then(|| grads.take(*x, numel(*x)));
                let mut dw = self.needs(*w).then(|| grads.take(*w, numel(*w)));
                let mut db = self.needs(*b).then(|| grads.take(*b, numel(*b)));
                k::conv2d_backward(
                    g,
                    self.data(*x),
                    c_in,
                    h,
                    wd,
                    self.data(*w),
                    c_out,
                    kh,
                    *stride,
                    *pad,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if let Some(buf) = dx {
                    grads.put(*x, buf);
                }
                if let Some(buf) = dw {
                    grads.put(*w, buf);
                }
                if let Some(buf) = db {
                    grads.put(*b, buf);
                }
            }
            Op::InstanceNorm { x, gamma, beta, mu, inv_std } => {
                let (c, h, w) = (self.shape(*x)[0], self.shape(*x)[1], self.shape(*x)[2]);
                let mut dx = self.needs(*x).then(|| grads.take(*x, numel(*x)));
                let mut dgamma = self.needs(*gamma).then(|| grads.take(*gamma, numel(*gamma)));
                let mut dbeta = self.needs(*beta).then(|| grads.take(*beta, numel(*beta)));
                k::instance_norm_backward(
                    g,
                    self.data(*x),
                    c,
                    h * w,
                    self.data(*gamma),
                    mu,
                    inv_std,
                    dx.as_deref_mut(),
                    dgamma.as_deref_mut(),
                    dbeta.as_deref_mut(),
                );
                if let Some(buf) = dx {
                    grads.put(*x, buf);
                }
                if let Some(buf) = dgamma {
                    grads.put(*gamma, buf);
                }
                if let Some(buf) = dbeta {
                    grads.put(*beta, buf);
                }
            }
            Op::LeakyRelu { x, slope } => {
                if self.needs(*x) {
                    let mut dx = grads.take(*x, numel(*x));
                    k::leaky_relu_backward(g, self.data(*x), *slope, &mut dx);
                    grads.put(*x, dx);
                }
            }
            Op::Relu { x } => {
                if self.needs(*x) {
                    let mut dx = grads.take(*x, numel(*x));
                    for ((d, gi), xi) in dx.iter_mut().zip(g).zip(self.data(*x)) {
                        *d += if *xi > 0.0 { *gi } else { 0.0 };
                    }
                    grads.put(*x, dx);
                }
            }
            Op::Sigmoid { x } => {
                if self.needs(*x) {
                    let mut dx = grads.take(*x, numel(*x));
                    k::sigmoid_backward(g, self.data(id), &mut dx);
                    grads.put(*x, dx);
                }
            }
            Op::Softmax { x } => {
                if self.needs(*x) {
                    let mut dx = grads.take(*x, numel(*x));
                    k::softmax_backward(g, self.data(id), &mut dx);
                    grads.put(*x, dx);
                }
            }
            Op::GlobalAvgPool { x } => {
                if self.needs(*x) {
                    let (c, h, w) = (self.shape(*x)[0], self.shape(*x)[1], self.shape(*x)[2]);
                    let mut dx = grads.take(*x, numel(*x));
                    k::global_avg_pool_backward(g, c, h * w, &mut dx);
                    grads.put(*x, dx);
                }
            }
            Op::FullyConnected { x, w, b } => {
                let (m, n) = (self.shape(*w)[0], self.shape(*w)[1]);
                let mut dx = self.needs(*x).then(|| grads.take(*x, numel(*x)));
                let mut dw = self.needs(*w).then(|| grads.take(*w, numel(*w)));
                let mut db = self.needs(*b).then(|| grads.take(*b, numel(*b)));
                k::fc_backward(
                    g,
                    self.data(*x),
                    self.data(*w),
                    m,
                    n,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if let Some(buf) = dx {
                    grads.put(*x, buf);
                }
                if let Some(buf) = dw {
                    grads.put(*w, buf);
                }
                if let Some(buf) = db {
                    grads.put(*b, buf);
                }
            }
            Op::Upsample2x { x } => {
                if self.needs(*x) {
                    let (c, h, w) = (self.shape(*x)[0], self.shape(*x)[1], self.shape(*x)[2]);
                    let mut dx = grads.take(*x, numel(*x));
                    k::upsample2x_backward(g, c, h, w, &mut dx);
                    grads.put(*x, dx);
                }
            }
            Op::AvgPool2x { x } => {
                if self.needs(*x) {
                    let (c, h, w) = (self.shape(*x)[0], self.shape(*x)[1], self.shape(*x)[2]);
                    let mut dx = grads.take(*x, numel(*x));
                    k::avgpool2x_backward(g, c, h, w, &mut dx);
                    grads.put(*x, dx);
                }
            }
            Op::CircConv { a, b } => {
                let shape = self.shape(*a);
                let (d, hw) = if shape.len() == 1 {
                    (shape[0], 1)
                } else {
                    (shape[0], shape[1] * shape[2])
                };
                if a == b {
                    if self.needs(*a) {
                        let mut da = grads.take(*a, numel(*a));
                        let mut tmp = vec![0.0; da.len()];
                        k::circ_conv_map_backward(
                            g,
                            self.data(*a),
                            self.data(*a),
                            d,
                            hw,
                            Some(&mut tmp),
                            None,
                        );
                        for (dst, t) in da.iter_mut().zip(&tmp) {
                            *dst += 2.0 * t;
                        }
                        grads.put(*a, da);
                    }
                } else {
                    let mut da = self.needs(*a).then(|| grads.take(*a, numel(*a)));
                    let mut db = self.needs(*b).then(|| grads.take(*b, numel(*b)));
                    k::circ_conv_map_backward(
                        g,
                        self.data(*a),
                        self.data(*b),
                        d,
                        hw,
                        da.as_deref_mut(),
                        db.as_deref_mut(),
                    );
                    if let Some(buf) = da {
                        grads.put(*a, buf);
                    }
                    if let Some(buf) = db {
                        grads.put(*b, buf);
                    }
                }
            }
            Op::CountSketch { x, coeffs } => {
                if self.needs(*x) {
                    let shape = self.shape(*x);
                    let (c, hw) = if shape.len() == 1 {
                        (shape[0], 1)
                    } else {
                        (shape[0], shape[1] * shape[2])
                    };
                    let mut dx = grads.take(*x, numel(*x));
                    k::count_sketch_backward(g, c, hw, &coeffs.hash, &coeffs.sign, &mut dx);
                    grads.put(*x, dx);
                }
            }
            Op::SignedSqrt { x, eps } => {
                if self.needs(*x) {
                    let mut dx = grads.take(*x, numel(*x));
                    k::signed_sqrt_backward(g, self.data(*x), *eps, &mut dx);
                    grads.put(*x, dx);
                }
            }
            Op::L2NormChannels { x, clamp, norms } => {
                if self.needs(*x) {
                    let (d, h, w) = (self.shape(*x)[0], self.shape(*x)[1], self.shape(*x)[2]);
                    let mut dx = grads.take(*x, numel(*x));
                    k::l2norm_channels_backward(g, self.data(*x), norms, d, h * w, *clamp, &mut dx);
                    grads.put(*x, dx);
                }
            }
            Op::MulChannel { x, gate } => {
                let (c, h, w) = (self.shape(*x)[0], self.shape(*x)[1], self.shape(*x)[2]);
                let mut dx = self.needs(*x).then(|| grads.take(*x, numel(*x)));
                let mut dgate = self.needs(*gate).then(|| grads.take(*gate, numel(*gate)));
                k::mul_channel_backward(
                    g,
                    self.data(*x),
                    self.data(*gate),
                    c,
                    h * w,
                    dx.as_deref_mut(),
                    dgate.as_deref_mut(),
                );
                if let Some(buf) = dx {
                    grads.put(*x, buf);
                }
                if let Some(buf) = dgate {
                    grads.put(*gate, buf);
                }
            }
            Op::MulSpatial { x, s } => {
                let (c, h, w) = (self.shape(*x)[0], self.shape(*x)[1], self.shape(*x)[2]);
                let mut dx = self.needs(*x).then(|| grads.take(*x, numel(*x)));
                let mut ds = self.needs(*s).then(|| grads.take(*s, numel(*s)));
                k::mul_spatial_backward(
                    g,
                    self.data(*x),
                    self.data(*s),
                    c,
                    h * w,
                    dx.as_deref_mut(),
                    ds.as_deref_mut(),
                );
                if let Some(buf) = dx {
                    grads.put(*x, buf);
                }
                if let Some(buf) = ds {
                    grads.put(*s, buf);
                }
            }
            Op::WeightedPlaneSum { q, p } => {
                let (s, h, w) = (self.shape(*q)[0], self.shape(*q)[1], self.shape(*q)[2]);
                let mut dq = self.needs(*q).then(|| grads.take(*q, numel(*q)));
                let mut dp = self.needs(*p).then(|| grads.take(*p, numel(*p)));
                k::weighted_plane_sum_backward(
                    g,
                    self.data(*q),
                    self.data(*p),
                    s,
                    h * w,
                    dq.as_deref_mut(),
                    dp.as_deref_mut(),
                );
                if let Some(buf) = dq {
                    grads.put(*q, buf);
                }
                if let Some(buf) = dp {
                    grads.put(*p, buf);
                }
            }
            Op::MinMaxNorm { x, imin, imax, range } => {
                if self.needs(*x) {
                    let mut dx = grads.take(*x, numel(*x));
                    k::minmax_norm_backward(g, self.data(id), *imin, *imax, *range, &mut dx);
                    grads.put(*x, dx);
                }
            }
            Op::Add { a, b } => {
                if a == b {
                    if self.needs(*a) {
                        let mut da = grads.take(*a, numel(*a));
                        for (d, gi) in da.iter_mut().zip(g) {
                            *d += 2.0 * gi;
                        }
                        grads.put(*a, da);
                    }
                } else {
                    for nid in [a, b] {
                        if self.needs(*nid) {
                            let mut d = grads.take(*nid, numel(*nid));
                            for (di, gi) in d.iter_mut().zip(g) {
                                *di += gi;
                            }
                            grads.put(*nid, d);
                        }
                    }
                }
            }
            Op::Sub { a, b } => {
                if a == b {
                    // gradient contributions cancel
                } else {
                    if self.needs(*a) {
                        let mut da = grads.take(*a, numel(*a));
                        for (d, gi) in da.iter_mut().zip(g) {
                            *d += gi;
                        }
                        grads.put(*a, da);
                    }
                    if self.needs(*b) {
                        let mut db = grads.take(*b, numel(*b));
                        for (d, gi) in db.iter_mut().zip(g) {
                            *d -= gi;
                        }
                        grads.put(*b, db);
                    }
                }
            }
            Op::MulElem { a, b } => {
                if a == b {
                    if self.needs(*a) {
                        let mut da = grads.take(*a, numel(*a));
                        for ((d, gi), xi) in da.iter_mut().zip(g).zip(self.data(*a)) {
                            *d += 2.0 * gi * xi;
                        }
                        grads.put(*a, da);
                    }
                } else {
                    if self.needs(*a) {
                        let mut da = grads.take(*a, numel(*a));
                        for ((d, gi), bi) in da.iter_mut().zip(g).zip(self.data(*b)) {
                            *d += gi * bi;
                        }
                        grads.put(*a, da);
                    }
                    if self.needs(*b) {
                        let mut db = grads.take(*b, numel(*b));
                        for ((d, gi), ai) in db.iter_mut().zip(g).zip(self.data(*a)) {
                            *d += gi * ai;
                        }
                        grads.put(*b, db);
                    }
                }
            }
            Op::Scale { x, c } => {
                if self.needs(*x) {
                    let mut dx = grads.take(*x, numel(*x));
                    for (d, gi) in dx.iter_mut().zip(g) {
                        *d += c * gi;
                    }
                    grads.put(*x, dx);
                }
            }
            Op::AddScalar { x } => {
                if self.needs(*x) {
                    let mut dx = grads.take(*x, numel(*x));
                    for (d, gi) in dx.iter_mut().zip(g) {
                        *d += gi;
                    }
                    grads.put(*x, dx);
                }
            }
            Op::Abs { x } => {
                if self.needs(*x) {
                    let mut dx = grads.take(*x, numel(*x));
                    for ((d, gi), xi) in dx.iter_mut().zip(g).zip(self.data(*x)) {
                        *d += gi * k::math_sign(*xi);
                    }
                    grads.put(*x, dx);
                }
            }
            Op::Square { x } => {
                if self.needs(*x) {
                    let mut dx = grads.take(*x, numel(*x));
                    for ((d, gi), xi) in dx.iter_mut().zip(g).zip(self.data(*x)) {
                        *d += 2.0 * gi * xi;
                    }
                    grads.put(*x, dx);
                }
            }
            Op::Sum { x } => {
                if self.needs(*x) {
                    let mut dx = grads.take(*x, numel(*x));
                    for d in dx.iter_mut() {
                        *d += g[0];
                    }
                    grads.put(*x, dx);
                }
            }
            Op::Mean { x } => {
                if self.needs(*x) {
                    let mut dx = grads.take(*x, numel(*x));
                    let gi = g[0] / dx.len() as f64;
                    for d in dx.iter_mut() {
                        *d += gi;
                    }
                    grads.put(*x, dx);
                }
            }
            Op::Reshape { x } => {
                if self.needs(*x) {
                    let mut dx = grads.take(*x, numel(*x));
                    for (d, gi) in dx.iter_mut().zip(g) {
                        *d += gi;
                    }
                    grads.put(*x, dx);
                }
            }
            Op::ConcatVec { a, b } => {
                let na = numel(*a);
                if self.needs(*a) {
                    let mut da = grads.take(*a, na);
                    for (d, gi) in da.iter_mut().zip(&g[..na]) {
                        *d += gi;
                    }
                    grads.put(*a, da);
                }
                if self.needs(*b) {
                    let mut db = grads.take(*b, numel(*b));
                    for (d, gi) in db.iter_mut().zip(&g[na..]) {
                        *d += gi;
                    }
                    grads.put(*b, db);
                }
            }
            Op::NegLogProb { p, index, clamp } => {
                if self.needs(*p) {
                    let mut dp = grads.take(*p, numel(*p));
                    let pi = self.data(*p)[*index];
                    if pi > *clamp {
                        dp[*index] += -g[0] / pi;
                    }
                    grads.put(*p, dp);
                }
            }
        }
        Ok(())
    }
}
