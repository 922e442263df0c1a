//! The full segmentation network: slice-stack encoder, bottleneck, context
//! encoding, decoder with channel recalibration, and the skull-stripping head
//! whose probability map gates the structure features.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::NodeId;
use crate::nn::{self, BlockParams, Conv, Linear};
use crate::params::{BlockTrace, Initializer, Mode, ParamStore, Session};
use crate::tensor::Tensor;

pub const DEPTH: usize = 4;
/// Decoders shared between the structure path and the skull head.
pub const SHARED_DECODERS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AcenetConfig {
    /// Slices stacked above and below the centre slice; input has `2s+1` channels.
    pub s: usize,
    /// Number of label classes including background.
    pub num_structures: usize,
    pub filters: usize,
    pub se_ratio: usize,
    pub dropout: f64,
    /// Adds a second, single-slice encoder whose bottleneck output is
    /// concatenated with the slice-stack encoder's.
    pub parallel_encoders: bool,
    pub skull_module: bool,
    pub context_encoding: bool,
    pub input_size: usize,
}

impl Default for AcenetConfig {
    fn default() -> Self {
        AcenetConfig {
            s: 5,
            num_structures: 28,
            filters: 64,
            se_ratio: 2,
            dropout: 0.1,
            parallel_encoders: false,
            skull_module: true,
            context_encoding: true,
            input_size: 256,
        }
    }
}

impl AcenetConfig {
    /// Small network used by tests and the gradient-check suite.
    pub fn toy() -> Self {
        AcenetConfig {
            s: 1,
            num_structures: 5,
            filters: 8,
            input_size: 32,
            ..Self::default()
        }
    }

    pub fn in_channels(&self) -> usize {
        2 * self.s + 1
    }

    /// Channels leaving the bottleneck stage(s).
    pub fn bottleneck_channels(&self) -> usize {
        if self.parallel_encoders {
            2 * self.filters
        } else {
            self.filters
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = 1 << DEPTH;
        if self.input_size == 0 || self.input_size % unit != 0 {
            return Err(Error::Config(format!(
                "input_size {} must be a positive multiple of {unit}",
                self.input_size
            )));
        }
        if self.num_structures < 2 {
            return Err(Error::Config("num_structures must include background and one structure".into()));
        }
        if self.filters == 0 || self.se_ratio == 0 || self.filters % self.se_ratio != 0 {
            return Err(Error::Config(format!(
                "se_ratio {} must divide filters {}",
                self.se_ratio, self.filters
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0,1)", self.dropout)));
        }
        Ok(())
    }
}

/// The seven architecture variants compared for model complexity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Baseline,
    SingleSlice,
    SingleSliceSkull,
    Stack,
    StackSkull,
    Parallel,
    ParallelSkull,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Baseline,
        Variant::SingleSlice,
        Variant::SingleSliceSkull,
        Variant::Stack,
        Variant::StackSkull,
        Variant::Parallel,
        Variant::ParallelSkull,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::SingleSlice => "s=0",
            Variant::SingleSliceSkull => "s=0+skull",
            Variant::Stack => "s=5",
            Variant::StackSkull => "s=5+skull",
            Variant::Parallel => "parallel",
            Variant::ParallelSkull => "parallel+skull",
        }
    }

    /// `base` with the variant's structural switches applied; widths,
    /// class count and input size are kept.
    pub fn apply(self, base: &AcenetConfig) -> AcenetConfig {
        let (s, context, skull, parallel) = match self {
            Variant::Baseline => (0, false, false, false),
            Variant::SingleSlice => (0, true, false, false),
            Variant::SingleSliceSkull => (0, true, true, false),
            Variant::Stack => (5, true, false, false),
            Variant::StackSkull => (5, true, true, false),
            Variant::Parallel => (5, true, false, true),
            Variant::ParallelSkull => (5, true, true, true),
        };
        AcenetConfig {
            s,
            context_encoding: context,
            skull_module: skull,
            parallel_encoders: parallel,
            ..base.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContextParams {
    /// 1x1 encoding convolution over bottleneck features.
    pub encoding: Conv,
    pub presence: Linear,
    pub gamma: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderChain {
    pub blocks: Vec<BlockParams>,
    pub bottleneck: BlockParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkullHead {
    /// Handles of the first three backbone decoders (aliases, not copies).
    pub shared: Vec<BlockParams>,
    pub last: BlockParams,
    pub classifier: Conv,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: AcenetConfig,
    pub store: ParamStore,
    pub encoder: EncoderChain,
    pub single_slice: Option<EncoderChain>,
    pub context: Option<ContextParams>,
    /// Deepest first; the last entry produces full-resolution features.
    pub decoders: Vec<BlockParams>,
    pub classifier: Conv,
    pub skull: Option<SkullHead>,
}

/// Graph nodes produced by one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardNodes {
    pub brain_logits: NodeId,
    pub skull_logits: Option<NodeId>,
    pub presence_logits: Option<NodeId>,
    pub gamma: Option<NodeId>,
    pub encoding: Option<NodeId>,
}

/// Materialized outputs of an inference pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub brain_logits: Tensor,
    pub skull_logits: Option<Tensor>,
    pub presence_logits: Option<Tensor>,
    pub gamma: Option<Tensor>,
    pub diagnostics: Vec<BlockMaps>,
}

#[derive(Debug, Clone)]
pub struct BlockMaps {
    pub name: String,
    pub input: Tensor,
    pub attention: Tensor,
    pub output: Tensor,
}

fn build_chain(
    init: &mut Initializer<'_, ChaCha8Rng>,
    prefix: &str,
    in_channels: usize,
    cfg: &AcenetConfig,
) -> Result<EncoderChain> {
    let f = cfg.filters;
    let mut blocks = Vec::with_capacity(DEPTH);
    let mut cin = in_channels;
    for i in 0..DEPTH {
        blocks.push(BlockParams::init(init, &format!("{prefix}{i}"), cin, f, cfg.se_ratio, cfg.dropout)?);
        cin = f;
    }
    let bottleneck = BlockParams::init(init, &format!("{prefix}bottleneck"), f, f, cfg.se_ratio, cfg.dropout)?;
    Ok(EncoderChain { blocks, bottleneck })
}

/// Fresh parameters for `config`, deterministic in `seed`.
pub fn build_model(config: &AcenetConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut init = Initializer {
        store: &mut store,
        rng: &mut rng,
    };
    let f = config.filters;
    let c = config.num_structures;
    let r = config.se_ratio;

    let encoder = build_chain(&mut init, "enc", config.in_channels(), config)?;
    let single_slice = if config.parallel_encoders {
        Some(build_chain(&mut init, "single", 1, config)?)
    } else {
        None
    };
    let fb = config.bottleneck_channels();
    let context = if config.context_encoding {
        Some(ContextParams {
            encoding: Conv::init(&mut init, "context.encoding", f, fb, 1),
            presence: Linear::init(&mut init, "context.presence", c - 1, f),
            gamma: Linear::init(&mut init, "context.gamma", f, f),
        })
    } else {
        None
    };
    let mut decoders = Vec::with_capacity(DEPTH);
    for i in 0..DEPTH {
        let cin = if i == 0 { fb + f } else { 2 * f };
        decoders.push(BlockParams::init(&mut init, &format!("dec{i}"), cin, f, r, config.dropout)?);
    }
    let classifier = Conv::init(&mut init, "classifier", c, f, 1);
    let skull = if config.skull_module {
        Some(SkullHead {
            shared: decoders[..SHARED_DECODERS].to_vec(),
            last: BlockParams::init(&mut init, "skull.dec3", 2 * f, f, r, config.dropout)?,
            classifier: Conv::init(&mut init, "skull.classifier", 2, f, 1),
        })
    } else {
        None
    };
    Ok(ModelParams {
        config: config.clone(),
        store,
        encoder,
        single_slice,
        context,
        decoders,
        classifier,
        skull,
    })
}

/// Exact learnable-scalar count for `config`, from layer arithmetic alone.
pub fn count_params(config: &AcenetConfig) -> usize {
    let f = config.filters;
    let c = config.num_structures;
    let r = config.se_ratio;
    let chain = |cin: usize| -> usize {
        nn::block_param_count(cin, f, r)
            + (1..DEPTH).map(|_| nn::block_param_count(f, f, r)).sum::<usize>()
            + nn::block_param_count(f, f, r)
    };
    let mut total = chain(config.in_channels());
    if config.parallel_encoders {
        total += chain(1);
    }
    let fb = config.bottleneck_channels();
    if config.context_encoding {
        total += nn::conv_param_count(f, fb, 1) + nn::linear_param_count(c - 1, f) + nn::linear_param_count(f, f);
    }
    total += nn::block_param_count(fb + f, f, r);
    total += (1..DEPTH).map(|_| nn::block_param_count(2 * f, f, r)).sum::<usize>();
    total += nn::conv_param_count(c, f, 1);
    if config.skull_module {
        total += nn::block_param_count(2 * f, f, r) + nn::conv_param_count(2, f, 1);
    }
    total
}

/// `Y[c,h,w] = X[c,h,w] * gamma[c]`.
pub fn recalibrate(sess: &mut Session<'_>, features: NodeId, gamma: NodeId) -> Result<NodeId> {
    sess.graph.scale_channels(features, gamma)
}

/// Gates features by the skull head's brain probability (softmax channel 1).
pub fn fuse_skull(sess: &mut Session<'_>, features: NodeId, skull_logits: NodeId) -> Result<NodeId> {
    let probs = sess.graph.softmax_channels(skull_logits)?;
    let brain = sess.graph.select_channel(probs, 1)?;
    sess.graph.scale_spatial(features, brain)
}

/// Returns `(e, presence_logits, gamma)`.
pub fn encode_context(sess: &mut Session<'_>, p: &ContextParams, bottleneck: NodeId) -> Result<(NodeId, NodeId, NodeId)> {
    let enc = p.encoding.forward(sess, bottleneck)?;
    let enc = sess.graph.relu(enc);
    let e = sess.graph.global_avg_pool(enc)?;
    let presence = p.presence.forward(sess, e)?;
    let g = p.gamma.forward(sess, e)?;
    let gamma = sess.graph.sigmoid(g);
    Ok((e, presence, gamma))
}

fn run_chain(
    sess: &mut Session<'_>,
    chain: &EncoderChain,
    prefix: &str,
    input: NodeId,
    seed_base: u64,
) -> Result<(Vec<NodeId>, NodeId)> {
    let mut skips = Vec::with_capacity(DEPTH);
    let mut x = input;
    for (i, block) in chain.blocks.iter().enumerate() {
        let seed = nn::block_seed(sess.seed(), seed_base + i as u64);
        let (skip, pooled) = nn::encoder_block(sess, &format!("{prefix}{i}"), block, x, seed)?;
        skips.push(skip);
        x = pooled;
    }
    let seed = nn::block_seed(sess.seed(), seed_base + DEPTH as u64);
    let b = nn::bottleneck_block(sess, &format!("{prefix}bottleneck"), &chain.bottleneck, x, seed)?;
    Ok((skips, b))
}

impl ModelParams {
    pub fn param_count(&self) -> usize {
        self.store.scalar_count()
    }

    /// Records the forward pass for a `[2s+1,H,W]` or `[N,2s+1,H,W]` input.
    pub fn forward(&self, sess: &mut Session<'_>, input: NodeId) -> Result<ForwardNodes> {
        let cfg = &self.config;
        let shape = sess.graph.value(input).shape().to_vec();
        let rank = shape.len();
        if !(3..=4).contains(&rank) {
            return Err(Error::contract("forward", format!("input must be [C,H,W] or [N,C,H,W], got {shape:?}")));
        }
        let (ch, h, w) = (shape[rank - 3], shape[rank - 2], shape[rank - 1]);
        if ch != cfg.in_channels() {
            return Err(Error::contract(
                "forward",
                format!("input has {ch} channels, model expects 2s+1 = {}", cfg.in_channels()),
            ));
        }
        let unit = 1 << DEPTH;
        if h % unit != 0 || w % unit != 0 {
            return Err(Error::contract("forward", format!("spatial size {h}x{w} not divisible by {unit}")));
        }

        let (skips, mut bottleneck) = run_chain(sess, &self.encoder, "enc", input, 0)?;
        if let Some(single) = &self.single_slice {
            let center = sess.graph.select_channel(input, cfg.s)?;
            let (_, b2) = run_chain(sess, single, "single", center, 100)?;
            bottleneck = sess.graph.concat_channels(&[bottleneck, b2])?;
        }

        let (encoding, presence_logits, gamma) = match &self.context {
            Some(ctx) => {
                let (e, p, g) = encode_context(sess, ctx, bottleneck)?;
                (Some(e), Some(p), Some(g))
            }
            None => (None, None, None),
        };

        let mut d = bottleneck;
        let mut shared_out = d;
        for (i, dec) in self.decoders.iter().enumerate() {
            let seed = nn::block_seed(sess.seed(), 200 + i as u64);
            d = nn::decoder_block(sess, &format!("dec{i}"), dec, d, skips[DEPTH - 1 - i], seed)?;
            if i + 1 == SHARED_DECODERS {
                shared_out = d;
            }
        }

        let mut features = d;
        if let Some(g) = gamma {
            features = recalibrate(sess, features, g)?;
        }
        let skull_logits = match &self.skull {
            Some(head) => {
                let seed = nn::block_seed(sess.seed(), 300);
                let s = nn::decoder_block(sess, "skull.dec3", &head.last, shared_out, skips[0], seed)?;
                let logits = head.classifier.forward(sess, s)?;
                features = fuse_skull(sess, features, logits)?;
                Some(logits)
            }
            None => None,
        };
        let brain_logits = self.classifier.forward(sess, features)?;
        Ok(ForwardNodes {
            brain_logits,
            skull_logits,
            presence_logits,
            gamma,
            encoding,
        })
    }

    /// Eval-mode forward pass returning plain tensors; with `traced`, the
    /// per-block input features, s-SE maps and outputs are included.
    pub fn predict(&self, input: &Tensor, traced: bool) -> Result<ForwardOutput> {
        let mut sess = Session::new(&self.store, Mode::Eval, 0);
        if traced {
            sess = sess.with_traces();
        }
        let x = sess.graph.constant(input.clone());
        let nodes = self.forward(&mut sess, x)?;
        let g = &sess.graph;
        let take = |id: Option<NodeId>| id.map(|i| g.value(i).clone());
        let diagnostics = sess
            .traces()
            .iter()
            .map(|t: &BlockTrace| BlockMaps {
                name: t.name.clone(),
                input: g.value(t.input).clone(),
                attention: g.value(t.attention).clone(),
                output: g.value(t.output).clone(),
            })
            .collect();
        Ok(ForwardOutput {
            brain_logits: g.value(nodes.brain_logits).clone(),
            skull_logits: take(nodes.skull_logits),
            presence_logits: take(nodes.presence_logits),
            gamma: take(nodes.gamma),
            diagnostics,
        })
    }
}
