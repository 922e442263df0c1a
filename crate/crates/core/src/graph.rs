//! Reverse-mode differentiation over a recorded list of tensor operations.
//!
//! A [`Graph`] is a Wengert list: every op appends one node holding its
//! forward value plus whatever the backward pass needs. Inputs always precede
//! the ops that consume them, so [`Graph::backward`] is a single reverse sweep.
//!
//! Spatial ops take `[C,H,W]` or batched `[N,C,H,W]` values and return the
//! same rank they were given.

use std::hash::{DefaultHasher, Hash, Hasher};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvShape, MatRef};
use crate::tensor::{nchw, spatial_shape, Tensor};

pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Normalization mode for [`Graph::batch_norm`].
#[derive(Debug, Clone, Copy)]
pub enum NormMode<'a> {
    /// Normalize with the statistics of the current batch.
    Batch,
    /// Normalize with stored running statistics.
    Running { mean: &'a [f64], var: &'a [f64] },
}

/// Per-channel statistics observed by a batch-mode normalization:
/// the biased mean and the unbiased variance.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { input: NodeId, kernel: NodeId, bias: Option<NodeId>, pad: usize },
    MaxPool2d { input: NodeId, argmax: Vec<usize> },
    Upsample2d { input: NodeId },
    Dense { input: NodeId, weight: NodeId, bias: Option<NodeId> },
    Relu(NodeId),
    Sigmoid(NodeId),
    SoftmaxChannels(NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Max(NodeId, NodeId),
    Square(NodeId),
    ScaleChannels { x: NodeId, gate: NodeId },
    ScaleSpatial { x: NodeId, map: NodeId },
    SelectChannel { x: NodeId, channel: usize },
    Concat { inputs: Vec<NodeId>, channels: Vec<usize> },
    GlobalAvgPool(NodeId),
    BatchNorm { input: NodeId, scale: NodeId, shift: NodeId, xhat: Vec<f64>, inv_std: Vec<f64>, batch: bool },
    Dropout { input: NodeId, mask: Vec<f64> },
    Sum(NodeId),
    Mean(NodeId),
    /// Weighted sum of scalar nodes.
    Combine(Vec<(NodeId, f64)>),
    /// Scalar function of one node whose gradient was computed in the forward pass.
    Scalar { input: NodeId, local_grad: Tensor },
}

impl Op {
    fn inputs(&self) -> Vec<NodeId> {
        use Op::*;
        match self {
            Leaf => vec![],
            Conv2d { input, kernel, bias, .. } => {
                let mut v = vec![*input, *kernel];
                v.extend(bias);
                v
            }
            Dense { input, weight, bias } => {
                let mut v = vec![*input, *weight];
                v.extend(bias);
                v
            }
            MaxPool2d { input, .. } | Upsample2d { input } | Dropout { input, .. } | Scalar { input, .. } => {
                vec![*input]
            }
            Relu(a) | Sigmoid(a) | SoftmaxChannels(a) | Square(a) | GlobalAvgPool(a) | Sum(a) | Mean(a) => {
                vec![*a]
            }
            SelectChannel { x, .. } => vec![*x],
            Add(a, b) | Mul(a, b) | Max(a, b) => vec![*a, *b],
            ScaleChannels { x, gate } => vec![*x, *gate],
            ScaleSpatial { x, map } => vec![*x, *map],
            Concat { inputs, .. } => inputs.clone(),
            BatchNorm { input, scale, shift, .. } => vec![*input, *scale, *shift],
            Combine(terms) => terms.iter().map(|(id, _)| *id).collect(),
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// The computation record.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients of a scalar with respect to every grad-enabled leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::contract(op, format!("shapes {:?} and {:?} differ", a.shape(), b.shape())));
    }
    Ok(())
}

/// Output pixels per im2col block, sized so one block stays in L2.
fn column_chunk(kdim: usize, p: usize) -> usize {
    const BLOCK_ELEMS: usize = 1 << 17;
    (BLOCK_ELEMS / kdim.max(1)).next_multiple_of(16).max(16).min(p.max(1))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Recorded leaf; gradients are reported for it when `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    pub fn variable(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, true)
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        let inputs = op.inputs();
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        debug_assert!(
            !inputs.iter().all(|i| self.nodes[i.0].value.all_finite()) || value.all_finite(),
            "non-finite output from finite inputs in {op:?}"
        );
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Stride-1 cross-correlation with zero padding.
    /// `kernel` is `[C_out, C_in, k, k]`, `bias` is `[C_out]`.
    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId, bias: Option<NodeId>, pad: usize) -> Result<NodeId> {
        let x = self.value(input);
        let wt = self.value(kernel);
        let (n, cin, h, w) = nchw("conv2d", x.shape())?;
        let &[cout, kcin, kh, kw] = wt.shape() else {
            return Err(Error::contract("conv2d", format!("kernel must be [C_out,C_in,k,k], got {:?}", wt.shape())));
        };
        if kcin != cin {
            return Err(Error::contract("conv2d", format!("input has {cin} channels, kernel expects {kcin}")));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(Error::contract("conv2d", format!("kernel must be square and odd, got {kh}x{kw}")));
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [cout] {
                return Err(Error::contract("conv2d", format!("bias must be [{cout}], got {:?}", self.value(b).shape())));
            }
        }
        let k = kh;
        let (ho, wo) = kernels::conv_out_dims(h, w, k, pad);
        if ho == 0 || wo == 0 {
            return Err(Error::contract("conv2d", format!("{k}x{k} kernel does not fit {h}x{w} with pad {pad}")));
        }
        let p = ho * wo;
        let shape = ConvShape { c: cin, h, w, k, pad };
        let kdim = shape.kdim();
        let weights = MatRef::row_major(wt.data(), kdim);
        let mut out = vec![0.0; n * cout * p];
        if k == 1 && pad == 0 {
            for s in 0..n {
                let img = &x.data()[s * cin * h * w..(s + 1) * cin * h * w];
                let dst = &mut out[s * cout * p..(s + 1) * cout * p];
                kernels::gemm(cout, p, kdim, weights, MatRef::row_major(img, p), dst, false);
            }
        } else {
            let chunk = column_chunk(kdim, p);
            let mut cols = vec![0.0; kdim * chunk];
            for s in 0..n {
                let img = &x.data()[s * cin * h * w..(s + 1) * cin * h * w];
                for p0 in (0..p).step_by(chunk) {
                    let len = chunk.min(p - p0);
                    let cols = &mut cols[..kdim * len];
                    kernels::im2col(img, shape, p0..p0 + len, cols);
                    let dst = &mut out[s * cout * p + p0..];
                    kernels::gemm_pitched(cout, len, kdim, weights, MatRef::row_major(cols, len), dst, p, false);
                }
            }
        }
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for s in 0..n {
                for co in 0..cout {
                    let row = &mut out[(s * cout + co) * p..(s * cout + co + 1) * p];
                    for v in row {
                        *v += bv[co];
                    }
                }
            }
        }
        let shape = spatial_shape(x.shape(), n, cout, ho, wo);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Conv2d { input, kernel, bias, pad }))
    }

    /// 2x2 / stride-2 max pooling. Ties go to the lowest flat index.
    pub fn maxpool2d(&mut self, input: NodeId) -> Result<NodeId> {
        let x = self.value(input);
        let (n, c, h, w) = nchw("maxpool2d", x.shape())?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::contract("maxpool2d", format!("spatial dims must be even, got {h}x{w}")));
        }
        let (ho, wo) = (h / 2, w / 2);
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        let xd = x.data();
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best);
                }
            }
        }
        let shape = spatial_shape(x.shape(), n, c, ho, wo);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::MaxPool2d { input, argmax }))
    }

    /// Hash of every branch taken at a non-smooth point: relu signs, pooling
    /// winners and elementwise-max sides. Two evaluations with equal
    /// fingerprints lie on the same smooth piece of the recorded function.
    pub fn kink_fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (i, node) in self.nodes.iter().enumerate() {
            match &node.op {
                Op::Relu(a) => {
                    i.hash(&mut h);
                    for v in self.value(*a).data() {
                        (*v > 0.0).hash(&mut h);
                    }
                }
                Op::MaxPool2d { argmax, .. } => {
                    i.hash(&mut h);
                    argmax.hash(&mut h);
                }
                Op::Max(a, b) => {
                    i.hash(&mut h);
                    for (p, q) in self.value(*a).data().iter().zip(self.value(*b).data()) {
                        (q > p).hash(&mut h);
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// Flat input index selected by each output cell of a pooling node.
    pub fn pool_indices(&self, id: NodeId) -> Option<&[usize]> {
        match &self.nodes[id.0].op {
            Op::MaxPool2d { argmax, .. } => Some(argmax),
            _ => None,
        }
    }

    /// Nearest-neighbour x2 upsampling.
    pub fn upsample2d(&mut self, input: NodeId) -> Result<NodeId> {
        let x = self.value(input);
        let (n, c, h, w) = nchw("upsample2d", x.shape())?;
        let (ho, wo) = (2 * h, 2 * w);
        let mut out = vec![0.0; n * c * ho * wo];
        let xd = x.data();
        for plane in 0..n * c {
            for oy in 0..ho {
                let src = &xd[plane * h * w + (oy / 2) * w..plane * h * w + (oy / 2 + 1) * w];
                let dst = &mut out[plane * ho * wo + oy * wo..plane * ho * wo + (oy + 1) * wo];
                for (ox, d) in dst.iter_mut().enumerate() {
                    *d = src[ox / 2];
                }
            }
        }
        let shape = spatial_shape(x.shape(), n, c, ho, wo);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Upsample2d { input }))
    }

    /// Fully connected layer: `weight` `[m,n]`, input `[n]` or `[N,n]`.
    pub fn dense(&mut self, input: NodeId, weight: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
        let x = self.value(input);
        let wt = self.value(weight);
        let (batch, nin, batched) = match *x.shape() {
            [n] => (1, n, false),
            [b, n] => (b, n, true),
            _ => return Err(Error::contract("dense", format!("input must be [n] or [N,n], got {:?}", x.shape()))),
        };
        let &[m, wn] = wt.shape() else {
            return Err(Error::contract("dense", format!("weight must be [m,n], got {:?}", wt.shape())));
        };
        if wn != nin {
            return Err(Error::contract("dense", format!("input length {nin} vs weight {:?}", wt.shape())));
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [m] {
                return Err(Error::contract("dense", format!("bias must be [{m}], got {:?}", self.value(b).shape())));
            }
        }
        let mut out = vec![0.0; batch * m];
        kernels::gemm(
            batch,
            m,
            nin,
            MatRef::row_major(x.data(), nin),
            MatRef::transposed(wt.data(), nin),
            &mut out,
            false,
        );
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for row in out.chunks_exact_mut(m) {
                for (o, bb) in row.iter_mut().zip(bv) {
                    *o += bb;
                }
            }
        }
        let shape = if batched { vec![batch, m] } else { vec![m] };
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Dense { input, weight, bias }))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|v| v.max(0.0));
        self.push(value, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(sigmoid);
        self.push(value, Op::Sigmoid(a))
    }

    /// Softmax across the channel axis at every spatial location.
    pub fn softmax_channels(&mut self, a: NodeId) -> Result<NodeId> {
        let x = self.value(a);
        let (n, c, h, w) = nchw("softmax_channels", x.shape())?;
        let p = h * w;
        let mut out = x.data().to_vec();
        for s in 0..n {
            let block = &mut out[s * c * p..(s + 1) * c * p];
            for px in 0..p {
                let mut mx = f64::NEG_INFINITY;
                for ch in 0..c {
                    mx = mx.max(block[ch * p + px]);
                }
                let mut total = 0.0;
                for ch in 0..c {
                    let e = (block[ch * p + px] - mx).exp();
                    block[ch * p + px] = e;
                    total += e;
                }
                for ch in 0..c {
                    block[ch * p + px] /= total;
                }
            }
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.push(value, Op::SoftmaxChannels(a)))
    }

    fn binary(&mut self, op: &'static str, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape(op, x, y)?;
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.binary("elementwise_add", a, b, |p, q| p + q)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.binary("elementwise_mul", a, b, |p, q| p * q)?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    /// Elementwise maximum; where `a == b` the gradient goes to `a`.
    pub fn max(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.binary("elementwise_max", a, b, |p, q| if q > p { q } else { p })?;
        Ok(self.push(value, Op::Max(a, b)))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|v| v * v);
        self.push(value, Op::Square(a))
    }

    /// `out[n,c,h,w] = x[n,c,h,w] * gate[n,c]`.
    pub fn scale_channels(&mut self, x: NodeId, gate: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let gv = self.value(gate);
        let (n, c, h, w) = nchw("scale_channels", xv.shape())?;
        let expected: Vec<usize> = if xv.rank() == 3 { vec![c] } else { vec![n, c] };
        if gv.shape() != expected.as_slice() {
            return Err(Error::contract(
                "scale_channels",
                format!("gate must be {expected:?} for features {:?}, got {:?}", xv.shape(), gv.shape()),
            ));
        }
        let p = h * w;
        let mut out = xv.data().to_vec();
        for (plane, chunk) in out.chunks_exact_mut(p).enumerate() {
            let g = gv.data()[plane];
            for v in chunk {
                *v *= g;
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(value, Op::ScaleChannels { x, gate }))
    }

    /// `out[n,c,h,w] = x[n,c,h,w] * map[n,0,h,w]`.
    pub fn scale_spatial(&mut self, x: NodeId, map: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let mv = self.value(map);
        let (n, c, h, w) = nchw("scale_spatial", xv.shape())?;
        let expected = spatial_shape(xv.shape(), n, 1, h, w);
        if mv.shape() != expected.as_slice() {
            return Err(Error::contract(
                "scale_spatial",
                format!("map must be {expected:?} for features {:?}, got {:?}", xv.shape(), mv.shape()),
            ));
        }
        let p = h * w;
        let mut out = xv.data().to_vec();
        for s in 0..n {
            let m = &mv.data()[s * p..(s + 1) * p];
            for ch in 0..c {
                let row = &mut out[(s * c + ch) * p..(s * c + ch + 1) * p];
                for (v, mm) in row.iter_mut().zip(m) {
                    *v *= mm;
                }
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(value, Op::ScaleSpatial { x, map }))
    }

    /// Single channel as a `[N,1,H,W]` (or `[1,H,W]`) map.
    pub fn select_channel(&mut self, x: NodeId, channel: usize) -> Result<NodeId> {
        let xv = self.value(x);
        let (n, c, h, w) = nchw("select_channel", xv.shape())?;
        if channel >= c {
            return Err(Error::contract("select_channel", format!("channel {channel} of {c}")));
        }
        let p = h * w;
        let mut out = Vec::with_capacity(n * p);
        for s in 0..n {
            out.extend_from_slice(&xv.data()[(s * c + channel) * p..(s * c + channel + 1) * p]);
        }
        let value = Tensor::new(spatial_shape(xv.shape(), n, 1, h, w), out)?;
        Ok(self.push(value, Op::SelectChannel { x, channel }))
    }

    /// Concatenation along the channel axis.
    pub fn concat_channels(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::contract("concat_channels", "no inputs"))?;
        let rank = self.value(*first).rank();
        let (n, _, h, w) = nchw("concat_channels", self.value(*first).shape())?;
        let mut channels = Vec::with_capacity(inputs.len());
        for &id in inputs {
            let v = self.value(id);
            let (n2, c2, h2, w2) = nchw("concat_channels", v.shape())?;
            if v.rank() != rank || n2 != n || h2 != h || w2 != w {
                return Err(Error::contract(
                    "concat_channels",
                    format!("{:?} does not match {:?}", v.shape(), self.value(*first).shape()),
                ));
            }
            channels.push(c2);
        }
        let total: usize = channels.iter().sum();
        let p = h * w;
        let mut out = Vec::with_capacity(n * total * p);
        for s in 0..n {
            for (&id, &c) in inputs.iter().zip(&channels) {
                out.extend_from_slice(&self.value(id).data()[s * c * p..(s + 1) * c * p]);
            }
        }
        let shape = if rank == 3 { vec![total, h, w] } else { vec![n, total, h, w] };
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                channels,
            },
        ))
    }

    /// Spatial mean per channel: `[N,C,H,W] -> [N,C]`, `[C,H,W] -> [C]`.
    pub fn global_avg_pool(&mut self, a: NodeId) -> Result<NodeId> {
        let x = self.value(a);
        let (n, c, h, w) = nchw("global_avg_pool", x.shape())?;
        let p = h * w;
        let out: Vec<f64> = x.data().chunks_exact(p).map(|ch| ch.iter().sum::<f64>() / p as f64).collect();
        let shape = if x.rank() == 3 { vec![c] } else { vec![n, c] };
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::GlobalAvgPool(a)))
    }

    /// Per-channel normalization followed by the affine `scale * xhat + shift`.
    pub fn batch_norm(
        &mut self,
        input: NodeId,
        scale: NodeId,
        shift: NodeId,
        mode: NormMode<'_>,
    ) -> Result<(NodeId, Option<BatchStats>)> {
        let x = self.value(input);
        let (n, c, h, w) = nchw("batchnorm2d", x.shape())?;
        for id in [scale, shift] {
            if self.value(id).shape() != [c] {
                return Err(Error::contract(
                    "batchnorm2d",
                    format!("parameters must be [{c}], got {:?}", self.value(id).shape()),
                ));
            }
        }
        let p = h * w;
        let count = n * p;
        let xd = x.data();
        let (mean, var, stats) = match mode {
            NormMode::Batch => {
                if count < 2 {
                    return Err(Error::contract(
                        "batchnorm2d",
                        "batch statistics need at least two values per channel",
                    ));
                }
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for b in 0..n {
                        s += xd[(b * c + ch) * p..(b * c + ch + 1) * p].iter().sum::<f64>();
                    }
                    let mu = s / count as f64;
                    let mut ss = 0.0;
                    for b in 0..n {
                        ss += xd[(b * c + ch) * p..(b * c + ch + 1) * p]
                            .iter()
                            .map(|v| (v - mu) * (v - mu))
                            .sum::<f64>();
                    }
                    mean[ch] = mu;
                    var[ch] = ss / count as f64;
                }
                let unbiased = var.iter().map(|v| v * count as f64 / (count - 1) as f64).collect();
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats))
            }
            NormMode::Running { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::contract("batchnorm2d", "running statistics length mismatch"));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let gamma = self.value(scale).data();
        let beta = self.value(shift).data();
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for b in 0..n {
            for ch in 0..c {
                let range = (b * c + ch) * p..(b * c + ch + 1) * p;
                for i in range {
                    let xh = (xd[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = gamma[ch] * xh + beta[ch];
                }
            }
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        let id = self.push(
            value,
            Op::BatchNorm {
                input,
                scale,
                shift,
                xhat,
                inv_std,
                batch: matches!(mode, NormMode::Batch),
            },
        );
        Ok((id, stats))
    }

    /// Inverted dropout with a mask derived from `seed`. Identity when
    /// `rate == 0` or outside training.
    pub fn dropout(&mut self, input: NodeId, rate: f64, train: bool, seed: u64) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::contract("dropout", format!("rate must be in [0,1), got {rate}")));
        }
        if !train || rate == 0.0 {
            return Ok(input);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = 1.0 / (1.0 - rate);
        let x = self.value(input);
        let mask: Vec<f64> = (0..x.len())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let data = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Dropout { input, mask }))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let value = Tensor::scalar(x.sum() / x.len() as f64);
        self.push(value, Op::Mean(a))
    }

    /// `Σ weight_i * term_i` over scalar nodes.
    pub fn combine(&mut self, terms: &[(NodeId, f64)]) -> Result<NodeId> {
        let mut total = 0.0;
        for &(id, wgt) in terms {
            let v = self.value(id);
            if !v.is_scalar() {
                return Err(Error::contract("combine", format!("term is not scalar: {:?}", v.shape())));
            }
            total += wgt * v.item();
        }
        Ok(self.push(Tensor::scalar(total), Op::Combine(terms.to_vec())))
    }

    /// Records a scalar-valued function of `input` whose value and gradient
    /// were computed by the caller.
    pub fn scalar_fn(&mut self, input: NodeId, value: f64, local_grad: Tensor) -> Result<NodeId> {
        if local_grad.shape() != self.value(input).shape() {
            return Err(Error::contract("scalar_fn", "gradient shape differs from input"));
        }
        Ok(self.push(Tensor::scalar(value), Op::Scalar { input, local_grad }))
    }

    /// Gradients of the scalar `loss` with respect to every grad-enabled leaf.
    /// The record is consumed: a second call is an error.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::contract("backward", "record already consumed by an earlier backward pass"));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::contract(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.value(loss).shape()),
            ));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.value(loss).shape().to_vec()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gout) = grads[idx].take() else { continue };
            self.backprop(idx, &gout, &mut grads)?;
        }
        for (idx, g) in grads.iter_mut().enumerate() {
            let node = &self.nodes[idx];
            if !(matches!(node.op, Op::Leaf) && node.requires_grad) {
                *g = None;
            } else if g.is_none() {
                *g = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        Ok(Gradients { grads })
    }

    fn backprop(&self, idx: usize, gout: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        let mut acc = |id: NodeId, g: Tensor| {
            if !self.nodes[id.0].requires_grad {
                return;
            }
            match &mut grads[id.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        };
        let needs = |id: NodeId| self.nodes[id.0].requires_grad;
        let go = gout.data();

        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, kernel, bias, pad } => {
                let x = self.value(*input);
                let wt = self.value(*kernel);
                let (n, cin, h, w) = nchw("conv2d", x.shape())?;
                let (cout, k) = (wt.shape()[0], wt.shape()[2]);
                let (ho, wo) = kernels::conv_out_dims(h, w, k, *pad);
                let p = ho * wo;
                let shape = ConvShape { c: cin, h, w, k, pad: *pad };
                let kdim = shape.kdim();
                let mut dw = vec![0.0; cout * kdim];
                let mut dx = vec![0.0; x.len()];
                let wt_t = MatRef::transposed(wt.data(), kdim);
                if k == 1 && *pad == 0 {
                    for s in 0..n {
                        let img = &x.data()[s * cin * h * w..(s + 1) * cin * h * w];
                        let dy = &go[s * cout * p..(s + 1) * cout * p];
                        if needs(*kernel) {
                            let a = MatRef::row_major(dy, p);
                            kernels::gemm(cout, kdim, p, a, MatRef::transposed(img, p), &mut dw, true);
                        }
                        if needs(*input) {
                            let dimg = &mut dx[s * cin * h * w..(s + 1) * cin * h * w];
                            kernels::gemm(kdim, p, cout, wt_t, MatRef::row_major(dy, p), dimg, false);
                        }
                    }
                } else {
                    let chunk = column_chunk(kdim, p);
                    let mut cols = vec![0.0; kdim * chunk];
                    for s in 0..n {
                        let img = &x.data()[s * cin * h * w..(s + 1) * cin * h * w];
                        let dy = &go[s * cout * p..(s + 1) * cout * p];
                        for p0 in (0..p).step_by(chunk) {
                            let len = chunk.min(p - p0);
                            let cols = &mut cols[..kdim * len];
                            let dy_chunk = MatRef { data: &dy[p0..], rs: p, cs: 1 };
                            if needs(*kernel) {
                                kernels::im2col(img, shape, p0..p0 + len, cols);
                                let b = MatRef::transposed(cols, len);
                                kernels::gemm(cout, kdim, len, dy_chunk, b, &mut dw, true);
                            }
                            if needs(*input) {
                                kernels::gemm(kdim, len, cout, wt_t, dy_chunk, cols, false);
                                let dimg = &mut dx[s * cin * h * w..(s + 1) * cin * h * w];
                                kernels::col2im(cols, shape, p0..p0 + len, dimg);
                            }
                        }
                    }
                }
                if needs(*kernel) {
                    acc(*kernel, Tensor::new(wt.shape().to_vec(), dw)?);
                }
                if needs(*input) {
                    acc(*input, Tensor::new(x.shape().to_vec(), dx)?);
                }
                if let Some(b) = bias {
                    if needs(*b) {
                        let mut db = vec![0.0; cout];
                        for s in 0..n {
                            for (co, d) in db.iter_mut().enumerate() {
                                *d += go[(s * cout + co) * p..(s * cout + co + 1) * p].iter().sum::<f64>();
                            }
                        }
                        acc(*b, Tensor::new(vec![cout], db)?);
                    }
                }
            }
            Op::MaxPool2d { input, argmax } => {
                let mut dx = vec![0.0; self.value(*input).len()];
                for (g, &i) in go.iter().zip(argmax) {
                    dx[i] += g;
                }
                acc(*input, Tensor::new(self.value(*input).shape().to_vec(), dx)?);
            }
            Op::Upsample2d { input } => {
                let x = self.value(*input);
                let (n, c, h, w) = nchw("upsample2d", x.shape())?;
                let wo = 2 * w;
                let mut dx = vec![0.0; x.len()];
                for plane in 0..n * c {
                    for oy in 0..2 * h {
                        for ox in 0..wo {
                            dx[plane * h * w + (oy / 2) * w + ox / 2] += go[plane * 4 * h * w + oy * wo + ox];
                        }
                    }
                }
                acc(*input, Tensor::new(x.shape().to_vec(), dx)?);
            }
            Op::Dense { input, weight, bias } => {
                let x = self.value(*input);
                let wt = self.value(*weight);
                let (m, nin) = (wt.shape()[0], wt.shape()[1]);
                let batch = x.len() / nin;
                if needs(*weight) {
                    let mut dw = vec![0.0; m * nin];
                    kernels::gemm(
                        m,
                        nin,
                        batch,
                        MatRef::transposed(go, m),
                        MatRef::row_major(x.data(), nin),
                        &mut dw,
                        false,
                    );
                    acc(*weight, Tensor::new(wt.shape().to_vec(), dw)?);
                }
                if needs(*input) {
                    let mut dx = vec![0.0; batch * nin];
                    kernels::gemm(
                        batch,
                        nin,
                        m,
                        MatRef::row_major(go, m),
                        MatRef::row_major(wt.data(), nin),
                        &mut dx,
                        false,
                    );
                    acc(*input, Tensor::new(x.shape().to_vec(), dx)?);
                }
                if let Some(b) = bias {
                    if needs(*b) {
                        let mut db = vec![0.0; m];
                        for row in go.chunks_exact(m) {
                            for (d, g) in db.iter_mut().zip(row) {
                                *d += g;
                            }
                        }
                        acc(*b, Tensor::new(vec![m], db)?);
                    }
                }
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                let data = x.data().iter().zip(go).map(|(&v, &g)| if v > 0.0 { g } else { 0.0 }).collect();
                acc(*a, Tensor::new(x.shape().to_vec(), data)?);
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                let data = y.data().iter().zip(go).map(|(&s, &g)| g * s * (1.0 - s)).collect();
                acc(*a, Tensor::new(y.shape().to_vec(), data)?);
            }
            Op::SoftmaxChannels(a) => {
                let y = &node.value;
                let (n, c, h, w) = nchw("softmax_channels", y.shape())?;
                let p = h * w;
                let yd = y.data();
                let mut dx = vec![0.0; y.len()];
                for s in 0..n {
                    let base = s * c * p;
                    for px in 0..p {
                        let dot: f64 = (0..c).map(|ch| yd[base + ch * p + px] * go[base + ch * p + px]).sum();
                        for ch in 0..c {
                            let i = base + ch * p + px;
                            dx[i] = yd[i] * (go[i] - dot);
                        }
                    }
                }
                acc(*a, Tensor::new(y.shape().to_vec(), dx)?);
            }
            Op::Add(a, b) => {
                acc(*a, gout.clone());
                acc(*b, gout.clone());
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                if needs(*a) {
                    let d = y.data().iter().zip(go).map(|(v, g)| v * g).collect();
                    acc(*a, Tensor::new(x.shape().to_vec(), d)?);
                }
                if needs(*b) {
                    let d = x.data().iter().zip(go).map(|(v, g)| v * g).collect();
                    acc(*b, Tensor::new(y.shape().to_vec(), d)?);
                }
            }
            Op::Max(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                let mut da = vec![0.0; x.len()];
                let mut db = vec![0.0; x.len()];
                for i in 0..x.len() {
                    if y.data()[i] > x.data()[i] {
                        db[i] = go[i];
                    } else {
                        da[i] = go[i];
                    }
                }
                acc(*a, Tensor::new(x.shape().to_vec(), da)?);
                acc(*b, Tensor::new(y.shape().to_vec(), db)?);
            }
            Op::Square(a) => {
                let x = self.value(*a);
                let d = x.data().iter().zip(go).map(|(v, g)| 2.0 * v * g).collect();
                acc(*a, Tensor::new(x.shape().to_vec(), d)?);
            }
            Op::ScaleChannels { x, gate } => {
                let xv = self.value(*x);
                let gv = self.value(*gate);
                let (_, _, h, w) = nchw("scale_channels", xv.shape())?;
                let p = h * w;
                if needs(*x) {
                    let mut dx = go.to_vec();
                    for (plane, chunk) in dx.chunks_exact_mut(p).enumerate() {
                        let g = gv.data()[plane];
                        for v in chunk {
                            *v *= g;
                        }
                    }
                    acc(*x, Tensor::new(xv.shape().to_vec(), dx)?);
                }
                if needs(*gate) {
                    let dg = xv
                        .data()
                        .chunks_exact(p)
                        .zip(go.chunks_exact(p))
                        .map(|(xs, gs)| xs.iter().zip(gs).map(|(a, b)| a * b).sum())
                        .collect();
                    acc(*gate, Tensor::new(gv.shape().to_vec(), dg)?);
                }
            }
            Op::ScaleSpatial { x, map } => {
                let xv = self.value(*x);
                let mv = self.value(*map);
                let (n, c, h, w) = nchw("scale_spatial", xv.shape())?;
                let p = h * w;
                let mut dx = vec![0.0; xv.len()];
                let mut dm = vec![0.0; mv.len()];
                for s in 0..n {
                    let m = &mv.data()[s * p..(s + 1) * p];
                    let dms = &mut dm[s * p..(s + 1) * p];
                    for ch in 0..c {
                        let r = (s * c + ch) * p..(s * c + ch + 1) * p;
                        let (xs, gs) = (&xv.data()[r.clone()], &go[r.clone()]);
                        let dxs = &mut dx[r];
                        for i in 0..p {
                            dxs[i] = gs[i] * m[i];
                            dms[i] += gs[i] * xs[i];
                        }
                    }
                }
                acc(*x, Tensor::new(xv.shape().to_vec(), dx)?);
                acc(*map, Tensor::new(mv.shape().to_vec(), dm)?);
            }
            Op::SelectChannel { x, channel } => {
                let xv = self.value(*x);
                let (n, c, h, w) = nchw("select_channel", xv.shape())?;
                let p = h * w;
                let mut dx = vec![0.0; xv.len()];
                for s in 0..n {
                    dx[(s * c + channel) * p..(s * c + channel + 1) * p].copy_from_slice(&go[s * p..(s + 1) * p]);
                }
                acc(*x, Tensor::new(xv.shape().to_vec(), dx)?);
            }
            Op::Concat { inputs, channels } => {
                let (n, total, h, w) = nchw("concat_channels", node.value.shape())?;
                let p = h * w;
                let mut offset = 0;
                for (&id, &c) in inputs.iter().zip(channels) {
                    if needs(id) {
                        let mut d = Vec::with_capacity(n * c * p);
                        for s in 0..n {
                            let start = (s * total + offset) * p;
                            d.extend_from_slice(&go[start..start + c * p]);
                        }
                        acc(id, Tensor::new(self.value(id).shape().to_vec(), d)?);
                    }
                    offset += c;
                }
            }
            Op::GlobalAvgPool(a) => {
                let x = self.value(*a);
                let (_, _, h, w) = nchw("global_avg_pool", x.shape())?;
                let p = h * w;
                let mut dx = Vec::with_capacity(x.len());
                for &g in go {
                    dx.extend(std::iter::repeat_n(g / p as f64, p));
                }
                acc(*a, Tensor::new(x.shape().to_vec(), dx)?);
            }
            Op::BatchNorm {
                input,
                scale,
                shift,
                xhat,
                inv_std,
                batch,
            } => {
                let x = self.value(*input);
                let (n, c, h, w) = nchw("batchnorm2d", x.shape())?;
                let p = h * w;
                let count = (n * p) as f64;
                let gamma = self.value(*scale).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        let r = (b * c + ch) * p..(b * c + ch + 1) * p;
                        for i in r {
                            dgamma[ch] += go[i] * xhat[i];
                            dbeta[ch] += go[i];
                        }
                    }
                }
                if needs(*input) {
                    let mut dx = vec![0.0; x.len()];
                    for ch in 0..c {
                        let k = gamma[ch] * inv_std[ch];
                        let (mean_dy, mean_dy_xhat) = if *batch {
                            (dbeta[ch] / count, dgamma[ch] / count)
                        } else {
                            (0.0, 0.0)
                        };
                        for b in 0..n {
                            let r = (b * c + ch) * p..(b * c + ch + 1) * p;
                            for i in r {
                                dx[i] = k * (go[i] - mean_dy - xhat[i] * mean_dy_xhat);
                            }
                        }
                    }
                    acc(*input, Tensor::new(x.shape().to_vec(), dx)?);
                }
                acc(*scale, Tensor::new(vec![c], dgamma)?);
                acc(*shift, Tensor::new(vec![c], dbeta)?);
            }
            Op::Dropout { input, mask } => {
                let d = go.iter().zip(mask).map(|(g, m)| g * m).collect();
                acc(*input, Tensor::new(gout.shape().to_vec(), d)?);
            }
            Op::Sum(a) => {
                let g = go[0];
                acc(*a, Tensor::full(self.value(*a).shape().to_vec(), g));
            }
            Op::Mean(a) => {
                let x = self.value(*a);
                acc(*a, Tensor::full(x.shape().to_vec(), go[0] / x.len() as f64));
            }
            Op::Combine(terms) => {
                for &(id, wgt) in terms {
                    acc(id, Tensor::full(self.value(id).shape().to_vec(), wgt * go[0]));
                }
            }
            Op::Scalar { input, local_grad } => {
                acc(*input, local_grad.map(|v| v * go[0]));
            }
        }
        Ok(())
    }
}
