//! Bidirectional diagonal LSTM attention.
//!
//! A local context convolution feeds two diagonal LSTMs (one per sweep
//! direction). Each direction predicts a Gaussian per location, the two are
//! combined, decoded into a raw mask, normalized and multiplied into every
//! channel of the input.

mod gaussian;
mod lstm;

pub use gaussian::{combine_independent, combine_learned, decode, directional_params, DecodeMode, GaussianField, SIGMA_FLOOR};
pub use lstm::{DiagonalLstm, Direction};

use rand::Rng;

use crate::error::{contract_err, shape_err, Result};
use crate::nn::{Affine, Conv};
use crate::skew::SkewedMap;
use crate::tensor::{ParamStore, Session, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Combiner {
    Learned,
    Independent,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Normalization {
    Sigmoid,
    Softmax,
}

impl Normalization {
    /// Maps an `m×n` raw mask to attention weights.
    pub fn apply<'t>(self, raw: Var<'t>) -> Result<Var<'t>> {
        match self {
            Normalization::Sigmoid => Ok(raw.sigmoid()),
            Normalization::Softmax => raw.softmax_spatial(),
        }
    }
}

/// Result of one attention layer on one feature map.
#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput<'t> {
    /// Normalized `m×n` mask.
    pub mask: Var<'t>,
    /// Input with the mask multiplied into every channel.
    pub attended: Var<'t>,
    /// Combined field, for layers that produce one.
    pub field: Option<GaussianField<'t>>,
}

/// Anything that maps a `c×m×n` map (and optional query) to an `m×n` mask.
pub trait SpatialAttention {
    fn attend<'t>(&self, s: &mut Session<'t>, x: Var<'t>, query: Option<Var<'t>>) -> Result<AttentionOutput<'t>>;
}

/// Checks the input map and query against a layer's expectations.
pub(crate) fn check_inputs(
    x: &Var<'_>,
    channels: usize,
    query: Option<&Var<'_>>,
    query_dim: Option<usize>,
) -> Result<(usize, usize)> {
    let shape = x.shape();
    let &[c, m, n] = shape.as_slice() else {
        return shape_err(format!("attention expects a c×m×n map, got {shape:?}"));
    };
    if c != channels || m == 0 || n == 0 {
        return shape_err(format!("attention expects {channels} channels and a non-empty grid, got {shape:?}"));
    }
    if !x.value().is_finite() {
        return contract_err("attention input contains NaN or infinity");
    }
    match (query, query_dim) {
        (None, None) => {}
        (Some(_), None) => return contract_err("query given to a layer without a query input"),
        (None, Some(d)) => return contract_err(format!("layer expects a query of length {d}")),
        (Some(q), Some(d)) => {
            if q.shape() != [d] {
                return contract_err(format!("query has shape {:?}, expected [{d}]", q.shape()));
            }
            if !q.value().is_finite() {
                return contract_err("query contains NaN or infinity");
            }
        }
    }
    Ok((m, n))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArnnConfig {
    pub in_channels: usize,
    pub context_channels: usize,
    /// Hidden channels `t` of each diagonal LSTM.
    pub hidden: usize,
    /// Odd context window size.
    pub delta: usize,
    pub query_dim: Option<usize>,
    pub combiner: Combiner,
    pub decode: DecodeMode,
    pub normalization: Normalization,
}

impl ArnnConfig {
    pub fn new(in_channels: usize) -> Self {
        Self {
            in_channels,
            context_channels: 8,
            hidden: 8,
            delta: 3,
            query_dim: None,
            combiner: Combiner::Learned,
            decode: DecodeMode::Expectation,
            normalization: Normalization::Sigmoid,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AttentionRnnLayer {
    pub config: ArnnConfig,
    pub context: Conv,
    pub left: DiagonalLstm,
    pub right: DiagonalLstm,
    pub head_left: Affine,
    pub head_right: Affine,
    /// Present for the learned combiner.
    pub combiner: Option<Affine>,
}

impl AttentionRnnLayer {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, config: ArnnConfig, rng: &mut R) -> Result<Self> {
        if config.delta % 2 == 0 {
            return contract_err(format!("context size must be odd, got {}", config.delta));
        }
        if config.hidden == 0 || config.context_channels == 0 || config.in_channels == 0 {
            return contract_err("attention layer channel counts must be positive");
        }
        if let DecodeMode::Sample { sigma_scale } = config.decode {
            if !(sigma_scale >= 0.0 && sigma_scale.is_finite()) {
                return contract_err(format!("sampling scale must be finite and ≥ 0, got {sigma_scale}"));
            }
        }
        let ctx = config.context_channels;
        let lstm_in = ctx + config.query_dim.unwrap_or(0);
        let context = Conv::same(store, &format!("{name}.context"), config.in_channels, ctx, config.delta, rng)?;
        let left = DiagonalLstm::new(store, &format!("{name}.left"), lstm_in, config.hidden, Direction::LeftToRight, rng)?;
        let right =
            DiagonalLstm::new(store, &format!("{name}.right"), lstm_in, config.hidden, Direction::RightToLeft, rng)?;
        // Under softmax the learned combiner makes μ affine in the head
        // outputs, so a bias there only shifts every score equally. The σ
        // rows still matter when masks are sampled.
        let shift_only = config.normalization == Normalization::Softmax && config.combiner == Combiner::Learned;
        let head_bias_from = match (shift_only, config.decode) {
            (false, _) => 0,
            (true, DecodeMode::Expectation) => 2,
            (true, DecodeMode::Sample { .. }) => 1,
        };
        let head_left =
            Affine::with_bias_from(store, &format!("{name}.head_left"), config.hidden, 2, head_bias_from, rng)?;
        let head_right =
            Affine::with_bias_from(store, &format!("{name}.head_right"), config.hidden, 2, head_bias_from, rng)?;
        let combiner = match config.combiner {
            Combiner::Learned => {
                let bias_from = usize::from(shift_only);
                Some(Affine::with_bias_from(store, &format!("{name}.combine"), 4, 2, bias_from, rng)?)
            }
            Combiner::Independent => None,
        };
        Ok(Self { config, context, left, right, head_left, head_right, combiner })
    }

    /// Context features `K_c ⊛ X`, with the query tiled and appended.
    fn context_map<'t>(&self, s: &Session<'t>, x: Var<'t>, query: Option<Var<'t>>) -> Result<Var<'t>> {
        let (m, n) = check_inputs(&x, self.config.in_channels, query.as_ref(), self.config.query_dim)?;
        let c = self.context.forward(s, x)?;
        match query {
            Some(q) => Var::concat(&[c, q.tile_spatial(m, n)?], 0),
            None => Ok(c),
        }
    }

    /// Skewed context map fed to the left-to-right sweep.
    pub fn local_context<'t>(&self, s: &Session<'t>, x: Var<'t>, query: Option<Var<'t>>) -> Result<SkewedMap<Var<'t>>> {
        self.context_map(s, x, query)?.skew()
    }

    /// Combined Gaussian field before decoding.
    pub fn field<'t>(&self, s: &Session<'t>, x: Var<'t>, query: Option<Var<'t>>) -> Result<GaussianField<'t>> {
        let ctx = self.context_map(s, x, query)?;
        let hl = self.left.pass(s, ctx)?;
        let hr = self.right.pass(s, ctx)?;
        let fl = directional_params(s, hl, &self.head_left)?;
        let fr = directional_params(s, hr, &self.head_right)?;
        match &self.combiner {
            Some(comb) => combine_learned(s, &fl, &fr, comb),
            None => combine_independent(&fl, &fr),
        }
    }

    /// Decoded mask before normalization, with the field it came from.
    pub fn raw_mask<'t>(
        &self,
        s: &mut Session<'t>,
        x: Var<'t>,
        query: Option<Var<'t>>,
    ) -> Result<(Var<'t>, GaussianField<'t>)> {
        let field = self.field(s, x, query)?;
        Ok((decode(s, &field, self.config.decode)?, field))
    }
}

impl SpatialAttention for AttentionRnnLayer {
    fn attend<'t>(&self, s: &mut Session<'t>, x: Var<'t>, query: Option<Var<'t>>) -> Result<AttentionOutput<'t>> {
        let (raw, field) = self.raw_mask(s, x, query)?;
        let mask = self.config.normalization.apply(raw)?;
        let attended = x.mul_spatial(mask)?;
        Ok(AttentionOutput { mask, attended, field: Some(field) })
    }
}
