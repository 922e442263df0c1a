//! Densely connected convolution blocks, squeeze-and-excitation attention,
//! encoder/decoder wrappers, and closed-form parameter accounting.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::NodeId;
use crate::params::{derive_seed, BlockTrace, Initializer, ParamId, Session, StatsId};

pub const DENSE_KERNEL: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub size: usize,
}

impl Conv {
    pub fn init<R: Rng>(init: &mut Initializer<'_, R>, name: &str, cout: usize, cin: usize, k: usize) -> Self {
        let kernel = init.weight(format!("{name}.kernel"), vec![cout, cin, k, k], cin * k * k);
        let bias = init.zeros(format!("{name}.bias"), cout);
        Conv { kernel, bias, size: k }
    }

    /// Same-size ("padded") convolution.
    pub fn forward(&self, sess: &mut Session<'_>, x: NodeId) -> Result<NodeId> {
        let k = sess.param(self.kernel);
        let b = sess.param(self.bias);
        sess.graph.conv2d(x, k, Some(b), (self.size - 1) / 2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn init<R: Rng>(init: &mut Initializer<'_, R>, name: &str, out: usize, inp: usize) -> Self {
        let weight = init.weight(format!("{name}.weight"), vec![out, inp], inp);
        let bias = init.zeros(format!("{name}.bias"), out);
        Linear { weight, bias }
    }

    pub fn forward(&self, sess: &mut Session<'_>, x: NodeId) -> Result<NodeId> {
        let w = sess.param(self.weight);
        let b = sess.param(self.bias);
        sess.graph.dense(x, w, Some(b))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Norm {
    pub scale: ParamId,
    pub shift: ParamId,
    pub stats: StatsId,
}

impl Norm {
    pub fn init<R: Rng>(init: &mut Initializer<'_, R>, name: &str, channels: usize) -> Self {
        let scale = init.ones(format!("{name}.scale"), channels);
        let shift = init.zeros(format!("{name}.shift"), channels);
        let stats = init.store.add_stats(name.to_string(), channels);
        Norm { scale, shift, stats }
    }

    pub fn forward(&self, sess: &mut Session<'_>, x: NodeId) -> Result<NodeId> {
        sess.batch_norm(x, self.scale, self.shift, self.stats)
    }
}

/// Two 5x5 convolutions and a 1x1 fusion convolution with dense connectivity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DenseBlockParams {
    pub norm1: Norm,
    pub conv1: Conv,
    pub norm2: Norm,
    pub conv2: Conv,
    pub conv3: Conv,
    pub in_channels: usize,
    pub filters: usize,
    pub dropout: f64,
}

impl DenseBlockParams {
    pub fn init<R: Rng>(
        init: &mut Initializer<'_, R>,
        name: &str,
        in_channels: usize,
        filters: usize,
        dropout: f64,
    ) -> Self {
        let (c, f) = (in_channels, filters);
        DenseBlockParams {
            norm1: Norm::init(init, &format!("{name}.norm1"), c),
            conv1: Conv::init(init, &format!("{name}.conv1"), f, c, DENSE_KERNEL),
            norm2: Norm::init(init, &format!("{name}.norm2"), c + f),
            conv2: Conv::init(init, &format!("{name}.conv2"), f, c + f, DENSE_KERNEL),
            conv3: Conv::init(init, &format!("{name}.conv3"), f, c + 2 * f, 1),
            in_channels,
            filters,
            dropout,
        }
    }
}

/// Channel (c-SE) and spatial (s-SE) excitation parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeParams {
    pub fc1: Linear,
    pub fc2: Linear,
    pub spatial: Conv,
}

impl SeParams {
    pub fn init<R: Rng>(init: &mut Initializer<'_, R>, name: &str, channels: usize, ratio: usize) -> Result<Self> {
        if ratio == 0 || channels % ratio != 0 {
            return Err(Error::Config(format!("se_ratio {ratio} must divide channel count {channels}")));
        }
        let hidden = channels / ratio;
        Ok(SeParams {
            fc1: Linear::init(init, &format!("{name}.fc1"), hidden, channels),
            fc2: Linear::init(init, &format!("{name}.fc2"), channels, hidden),
            spatial: Conv::init(init, &format!("{name}.spatial"), 1, channels, 1),
        })
    }
}

/// A dense block followed by sc-SE recalibration: the unit used for every
/// encoder, bottleneck and decoder stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockParams {
    pub dense: DenseBlockParams,
    pub se: SeParams,
}

impl BlockParams {
    pub fn init<R: Rng>(
        init: &mut Initializer<'_, R>,
        name: &str,
        in_channels: usize,
        filters: usize,
        ratio: usize,
        dropout: f64,
    ) -> Result<Self> {
        Ok(BlockParams {
            dense: DenseBlockParams::init(init, &format!("{name}.dense"), in_channels, filters, dropout),
            se: SeParams::init(init, &format!("{name}.se"), filters, ratio)?,
        })
    }
}

/// `y1 = conv5(relu(norm(x)))`, `y2 = conv5(relu(norm([x,y1])))`,
/// `out = dropout(conv1([x,y1,y2]))`.
pub fn dense_block_forward(sess: &mut Session<'_>, p: &DenseBlockParams, x: NodeId, seed: u64) -> Result<NodeId> {
    let shape = sess.graph.value(x).shape().to_vec();
    let channels = shape[shape.len() - 3];
    if channels != p.in_channels {
        return Err(Error::contract(
            "dense_block",
            format!("input has {channels} channels, block expects {}", p.in_channels),
        ));
    }
    let a = p.norm1.forward(sess, x)?;
    let a = sess.graph.relu(a);
    let y1 = p.conv1.forward(sess, a)?;

    let xy1 = sess.graph.concat_channels(&[x, y1])?;
    let b = p.norm2.forward(sess, xy1)?;
    let b = sess.graph.relu(b);
    let y2 = p.conv2.forward(sess, b)?;

    let all = sess.graph.concat_channels(&[x, y1, y2])?;
    let out = p.conv3.forward(sess, all)?;
    let train = sess.mode().is_train();
    sess.graph.dropout(out, p.dropout, train, seed)
}

/// Spatial squeeze, channel excitation.
pub fn cse_forward(sess: &mut Session<'_>, p: &SeParams, x: NodeId) -> Result<NodeId> {
    let z = sess.graph.global_avg_pool(x)?;
    let h = p.fc1.forward(sess, z)?;
    let h = sess.graph.relu(h);
    let g = p.fc2.forward(sess, h)?;
    let g = sess.graph.sigmoid(g);
    sess.graph.scale_channels(x, g)
}

/// Channel squeeze, spatial excitation. Returns `(output, attention map)`.
pub fn sse_forward(sess: &mut Session<'_>, p: &SeParams, x: NodeId) -> Result<(NodeId, NodeId)> {
    let m = p.spatial.forward(sess, x)?;
    let m = sess.graph.sigmoid(m);
    let out = sess.graph.scale_spatial(x, m)?;
    Ok((out, m))
}

/// Elementwise max of the c-SE and s-SE branches. Returns `(output, s-SE map)`.
pub fn scse_forward(sess: &mut Session<'_>, p: &SeParams, x: NodeId) -> Result<(NodeId, NodeId)> {
    let c = cse_forward(sess, p, x)?;
    let (s, map) = sse_forward(sess, p, x)?;
    Ok((sess.graph.max(c, s)?, map))
}

fn block_forward(sess: &mut Session<'_>, name: &str, p: &BlockParams, x: NodeId, seed: u64) -> Result<NodeId> {
    let d = dense_block_forward(sess, &p.dense, x, seed)?;
    let (out, map) = scse_forward(sess, &p.se, d)?;
    sess.record_trace(BlockTrace {
        name: name.to_string(),
        input: x,
        attention: map,
        output: out,
    });
    Ok(out)
}

/// Block without resampling (the bottleneck).
pub fn bottleneck_block(sess: &mut Session<'_>, name: &str, p: &BlockParams, x: NodeId, seed: u64) -> Result<NodeId> {
    block_forward(sess, name, p, x, seed)
}

/// Returns `(skip, pooled)`.
pub fn encoder_block(
    sess: &mut Session<'_>,
    name: &str,
    p: &BlockParams,
    x: NodeId,
    seed: u64,
) -> Result<(NodeId, NodeId)> {
    let shape = sess.graph.value(x).shape();
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::contract("encoder_block", format!("spatial dims must be even, got {h}x{w}")));
    }
    let skip = block_forward(sess, name, p, x, seed)?;
    let pooled = sess.graph.maxpool2d(skip)?;
    Ok((skip, pooled))
}

pub fn decoder_block(
    sess: &mut Session<'_>,
    name: &str,
    p: &BlockParams,
    x: NodeId,
    skip: NodeId,
    seed: u64,
) -> Result<NodeId> {
    let xs = sess.graph.value(x).shape();
    let ss = sess.graph.value(skip).shape();
    let (r1, r2) = (xs.len(), ss.len());
    if r1 != r2 || ss[r2 - 2] != 2 * xs[r1 - 2] || ss[r2 - 1] != 2 * xs[r1 - 1] {
        return Err(Error::contract(
            "decoder_block",
            format!("skip {ss:?} must be exactly twice the spatial size of {xs:?}"),
        ));
    }
    let up = sess.graph.upsample2d(x)?;
    let joined = sess.graph.concat_channels(&[up, skip])?;
    block_forward(sess, name, p, joined, seed)
}

/// Seed for the dropout mask of block number `block`.
pub fn block_seed(base: u64, block: u64) -> u64 {
    derive_seed(base, block)
}

// ---- closed-form parameter accounting ----

pub fn linear_param_count(out: usize, inp: usize) -> usize {
    out * inp + out
}

pub fn conv_param_count(out: usize, inp: usize, k: usize) -> usize {
    out * inp * k * k + out
}

pub fn norm_param_count(channels: usize) -> usize {
    2 * channels
}

pub fn dense_block_param_count(in_channels: usize, filters: usize) -> usize {
    let (c, f) = (in_channels, filters);
    norm_param_count(c)
        + conv_param_count(f, c, DENSE_KERNEL)
        + norm_param_count(c + f)
        + conv_param_count(f, c + f, DENSE_KERNEL)
        + conv_param_count(f, c + 2 * f, 1)
}

pub fn se_param_count(channels: usize, ratio: usize) -> usize {
    let hidden = channels / ratio;
    linear_param_count(hidden, channels) + linear_param_count(channels, hidden) + conv_param_count(1, channels, 1)
}

pub fn block_param_count(in_channels: usize, filters: usize, ratio: usize) -> usize {
    dense_block_param_count(in_channels, filters) + se_param_count(filters, ratio)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{Mode, ParamStore};
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn block(cin: usize, f: usize) -> (ParamStore, BlockParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut init = Initializer {
            store: &mut store,
            rng: &mut rng,
        };
        let p = BlockParams::init(&mut init, "b", cin, f, 2, 0.1).unwrap();
        (store, p)
    }

    #[test]
    fn dense_layer_count() {
        // 3 inputs -> 4 outputs: 12 weights + 4 biases
        assert_eq!(linear_param_count(4, 3), 16);
    }

    #[test]
    fn block_count_matches_store() {
        let (store, _) = block(3, 8);
        assert_eq!(store.scalar_count(), block_param_count(3, 8, 2));
    }

    #[test]
    fn se_ratio_must_divide() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut init = Initializer {
            store: &mut store,
            rng: &mut rng,
        };
        assert!(SeParams::init(&mut init, "se", 5, 2).is_err());
    }

    #[test]
    fn encoder_shapes() {
        let (store, p) = block(2, 4);
        let mut sess = Session::new(&store, Mode::Eval, 0);
        let x = sess.graph.constant(Tensor::ones(vec![2, 64, 64]));
        let (skip, pooled) = encoder_block(&mut sess, "e", &p, x, 0).unwrap();
        assert_eq!(sess.graph.value(skip).shape(), &[4, 64, 64]);
        assert_eq!(sess.graph.value(pooled).shape(), &[4, 32, 32]);
    }

    #[test]
    fn encoder_rejects_odd_dims() {
        let (store, p) = block(2, 4);
        let mut sess = Session::new(&store, Mode::Eval, 0);
        let x = sess.graph.constant(Tensor::ones(vec![2, 7, 8]));
        assert!(encoder_block(&mut sess, "e", &p, x, 0).is_err());
    }

    #[test]
    fn dense_block_channel_mismatch() {
        let (store, p) = block(2, 4);
        let mut sess = Session::new(&store, Mode::Eval, 0);
        let x = sess.graph.constant(Tensor::ones(vec![3, 8, 8]));
        assert!(dense_block_forward(&mut sess, &p.dense, x, 0).is_err());
    }
}
