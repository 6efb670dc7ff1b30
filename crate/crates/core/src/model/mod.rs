//! Attribute-prediction backbone with a swappable attention slot after
//! every pooling stage, plus its training loop and evaluation metrics.

mod eval;
mod gradcheck;
mod train;

pub use eval::{evaluate, export_attended_maps, mask_correctness, upsample_nearest, EvalReport};
pub use gradcheck::{model_gradcheck, prepare_model_check, LayerCheck, GRADCHECK_TOLERANCE, MODEL_CHECK_EPSILON};
pub use train::{train, Adam, StepLog, TrainConfig, TrainHistory};

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    ArnnConfig, AttentionRnnLayer, Combiner, DecodeMode, Normalization, SpatialAttention,
};
use crate::baseline::{GlobalSoftAttention, LocalConvAttention};
use crate::block::BlockAttentionLayer;
use crate::error::{contract_err, shape_err, Error, Result};
use crate::nn::{Affine, Conv};
use crate::tensor::{ParamStore, Session, Tensor, Var};

/// Attention placed after each pooling stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionKind {
    /// Learned combiner, expectation decoding.
    Arnn,
    /// Learned combiner, sampled masks during training.
    ArnnSample,
    /// Product-of-Gaussians combiner.
    ArnnInd,
    ArnnIndSample,
    /// Recurrent attention on a `γ`-downsampled grid.
    Brnn(usize),
    /// `3×3` convolutional scoring.
    Ctx,
    /// `1×1` convolutional scoring.
    NoCtx,
    /// Global soft attention at the last stage only.
    San,
    None,
}

impl AttentionKind {
    pub const ALL_NAMES: [&'static str; 9] =
        ["arnn", "arnn-sample", "arnn-ind", "arnn-ind-sample", "brnn:γ", "ctx", "noctx", "san", "none"];

    fn recurrent(self) -> Option<(Combiner, bool)> {
        match self {
            AttentionKind::Arnn => Some((Combiner::Learned, false)),
            AttentionKind::ArnnSample => Some((Combiner::Learned, true)),
            AttentionKind::ArnnInd => Some((Combiner::Independent, false)),
            AttentionKind::ArnnIndSample => Some((Combiner::Independent, true)),
            _ => None,
        }
    }
}

impl fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttentionKind::Arnn => f.write_str("arnn"),
            AttentionKind::ArnnSample => f.write_str("arnn-sample"),
            AttentionKind::ArnnInd => f.write_str("arnn-ind"),
            AttentionKind::ArnnIndSample => f.write_str("arnn-ind-sample"),
            AttentionKind::Brnn(g) => write!(f, "brnn:{g}"),
            AttentionKind::Ctx => f.write_str("ctx"),
            AttentionKind::NoCtx => f.write_str("noctx"),
            AttentionKind::San => f.write_str("san"),
            AttentionKind::None => f.write_str("none"),
        }
    }
}

impl FromStr for AttentionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "arnn" => AttentionKind::Arnn,
            "arnn-sample" => AttentionKind::ArnnSample,
            "arnn-ind" => AttentionKind::ArnnInd,
            "arnn-ind-sample" => AttentionKind::ArnnIndSample,
            "ctx" => AttentionKind::Ctx,
            "noctx" => AttentionKind::NoCtx,
            "san" => AttentionKind::San,
            "none" => AttentionKind::None,
            _ => match s.strip_prefix("brnn:").map(str::parse::<usize>) {
                Some(Ok(g)) if g >= 1 => AttentionKind::Brnn(g),
                _ => {
                    return contract_err(format!(
                        "unknown attention {s:?}; expected one of {}",
                        Self::ALL_NAMES.join(", ")
                    ))
                }
            },
        })
    }
}

/// Standard deviation multiplier used by the sampling variants in training.
pub const TRAIN_SIGMA_SCALE: f64 = 1.0;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub attention: AttentionKind,
    pub image_size: usize,
    pub in_channels: usize,
    pub query_dim: usize,
    pub classes: usize,
    pub stacks: usize,
    pub channels: usize,
    /// Context window of the recurrent and convolutional attentions.
    pub delta: usize,
    /// Hidden channels of each diagonal LSTM.
    pub hidden: usize,
    /// Embedding width of the global soft attention.
    pub san_embed: usize,
    /// Parameter initialization seed.
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(attention: AttentionKind, image_size: usize, query_dim: usize, classes: usize) -> Self {
        Self {
            attention,
            image_size,
            in_channels: 3,
            query_dim,
            classes,
            stacks: 4,
            channels: 32,
            delta: 3,
            hidden: 8,
            san_embed: 64,
            seed: 0,
        }
    }

    /// Spatial extent after each stage.
    pub fn stage_sizes(&self) -> Vec<usize> {
        let mut size = self.image_size;
        (0..self.stacks)
            .map(|_| {
                size /= 2;
                size
            })
            .collect()
    }

    pub fn describe(&self) -> String {
        format!(
            "attention={} image_size={} in_channels={} query_dim={} classes={} stacks={} channels={} delta={} hidden={} san_embed={} init_seed={}",
            self.attention,
            self.image_size,
            self.in_channels,
            self.query_dim,
            self.classes,
            self.stacks,
            self.channels,
            self.delta,
            self.hidden,
            self.san_embed,
            self.seed
        )
    }
}

#[derive(Clone, Debug)]
pub enum AttentionSlot {
    Identity,
    Recurrent(AttentionRnnLayer),
    Block(BlockAttentionLayer),
    Local(LocalConvAttention),
    Global(GlobalSoftAttention),
}

impl AttentionSlot {
    fn attend<'t>(&self, s: &mut Session<'t>, x: Var<'t>, q: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let out = match self {
            AttentionSlot::Identity => {
                let shape = x.shape();
                return Ok((s.constant(Tensor::ones([shape[1], shape[2]])), x));
            }
            AttentionSlot::Recurrent(l) => l.attend(s, x, Some(q))?,
            AttentionSlot::Block(l) => l.attend(s, x, Some(q))?,
            AttentionSlot::Local(l) => l.attend(s, x, Some(q))?,
            AttentionSlot::Global(l) => l.attend(s, x, Some(q))?,
        };
        Ok((out.mask, out.attended))
    }

    fn set_decode(&mut self, mode: DecodeMode) {
        match self {
            AttentionSlot::Recurrent(l) => l.config.decode = mode,
            AttentionSlot::Block(l) => l.inner.config.decode = mode,
            _ => {}
        }
    }
}

/// Output of one forward pass on one image.
pub struct Forward<'t> {
    pub logits: Var<'t>,
    /// Normalized mask of every slot (ones for an identity slot).
    pub masks: Vec<Var<'t>>,
    /// Feature map after every slot.
    pub attended: Vec<Var<'t>>,
}

#[derive(Clone, Debug)]
pub struct AttributeNet {
    pub config: ModelConfig,
    pub convs: Vec<Conv>,
    pub slots: Vec<AttentionSlot>,
    pub head: Affine,
}

impl AttributeNet {
    /// Builds the network and registers its parameters in `store`.
    /// Parameter names depend only on `config`.
    pub fn new(store: &mut ParamStore, config: ModelConfig) -> Result<Self> {
        let c = &config;
        if c.stacks == 0 || c.channels == 0 || c.classes == 0 || c.query_dim == 0 {
            return contract_err("stacks, channels, classes and query length must be positive");
        }
        let sizes = c.stage_sizes();
        if sizes.last().is_some_and(|&s| s == 0) {
            return contract_err(format!("{} stacks do not fit a {}² image", c.stacks, c.image_size));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
        let mut convs = Vec::with_capacity(c.stacks);
        let mut slots = Vec::with_capacity(c.stacks);
        for (k, &size) in sizes.iter().enumerate() {
            let c_in = if k == 0 { c.in_channels } else { c.channels };
            convs.push(Conv::same(store, &format!("stack{k}.conv"), c_in, c.channels, 3, &mut rng)?);
            let last = k + 1 == c.stacks;
            let norm = if last { Normalization::Softmax } else { Normalization::Sigmoid };
            let name = format!("stack{k}.attention");
            let arnn = |decode| ArnnConfig {
                context_channels: 8,
                hidden: c.hidden,
                delta: c.delta,
                query_dim: Some(c.query_dim),
                decode,
                normalization: norm,
                ..ArnnConfig::new(c.channels)
            };
            let slot = match c.attention {
                AttentionKind::None => AttentionSlot::Identity,
                AttentionKind::San if !last => AttentionSlot::Identity,
                AttentionKind::San => AttentionSlot::Global(GlobalSoftAttention::new(
                    store,
                    &name,
                    c.channels,
                    size,
                    size,
                    c.san_embed,
                    Some(c.query_dim),
                    &mut rng,
                )?),
                AttentionKind::Ctx | AttentionKind::NoCtx => {
                    let delta = if c.attention == AttentionKind::Ctx { c.delta } else { 1 };
                    AttentionSlot::Local(LocalConvAttention::new(
                        store,
                        &name,
                        c.channels,
                        delta,
                        c.hidden,
                        Some(c.query_dim),
                        norm,
                        &mut rng,
                    )?)
                }
                AttentionKind::Brnn(gamma) => AttentionSlot::Block(BlockAttentionLayer::new(
                    store,
                    &name,
                    gamma,
                    arnn(DecodeMode::Expectation),
                    &mut rng,
                )?),
                kind => {
                    let (combiner, sample) = kind.recurrent().expect("remaining kinds are recurrent");
                    let decode = if sample {
                        DecodeMode::Sample { sigma_scale: TRAIN_SIGMA_SCALE }
                    } else {
                        DecodeMode::Expectation
                    };
                    AttentionSlot::Recurrent(AttentionRnnLayer::new(
                        store,
                        &name,
                        ArnnConfig { combiner, ..arnn(decode) },
                        &mut rng,
                    )?)
                }
            };
            slots.push(slot);
        }
        let head = Affine::new(store, "head", c.channels, c.classes, &mut rng)?;
        Ok(Self { config, convs, slots, head })
    }

    /// Copy that decodes masks by their expectation, used for evaluation.
    pub fn for_inference(&self) -> Self {
        let mut net = self.clone();
        net.slots.iter_mut().for_each(|s| s.set_decode(DecodeMode::Expectation));
        net
    }

    pub fn forward<'t>(&self, s: &mut Session<'t>, image: Var<'t>, query: Var<'t>) -> Result<Forward<'t>> {
        let c = &self.config;
        if image.shape() != [c.in_channels, c.image_size, c.image_size] {
            return shape_err(format!(
                "model expects a {}×{}×{} image, got {:?}",
                c.in_channels,
                c.image_size,
                c.image_size,
                image.shape()
            ));
        }
        if query.shape() != [c.query_dim] {
            return shape_err(format!("model expects a query of length {}, got {:?}", c.query_dim, query.shape()));
        }
        let mut x = image;
        let mut masks = Vec::with_capacity(c.stacks);
        let mut attended = Vec::with_capacity(c.stacks);
        for (conv, slot) in self.convs.iter().zip(&self.slots) {
            x = conv.forward(s, x)?.relu().max_pool2d(2)?;
            let (mask, out) = slot.attend(s, x, query)?;
            x = out;
            masks.push(mask);
            attended.push(x);
        }
        let pooled = x.sum_axes(&[1, 2])?;
        let logits = self.head.apply_vec(s, pooled)?;
        Ok(Forward { logits, masks, attended })
    }
}
