//! Small parameterized building blocks shared by the attention layers and
//! the backbone.

use rand::Rng;

use crate::error::{shape_err, Result};
use crate::tensor::{ParamId, ParamStore, Session, Tensor, Var};

/// Uniform `±1/√fan_in` initialization.
pub(crate) fn init_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

/// Per-location affine map `in → out`, shared across every position.
///
/// The bias covers output rows `bias_from..out`; rows before it are purely
/// linear. Dropping a bias matters under softmax normalization, where a
/// constant offset on the score is unidentifiable.
#[derive(Clone, Debug)]
pub struct Affine {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub bias_from: usize,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Affine {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Self::with_bias_from(store, name, in_dim, out_dim, 0, rng)
    }

    /// Affine map whose first `bias_from` outputs carry no bias.
    pub fn with_bias_from<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias_from: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), init_uniform(&[out_dim, in_dim], in_dim, rng))?;
        let bias = if bias_from < out_dim {
            Some(store.add(format!("{name}.bias"), Tensor::zeros([out_dim - bias_from]))?)
        } else {
            None
        };
        Ok(Self { weight, bias, bias_from, in_dim, out_dim })
    }

    /// Applies the map to every column of an `in×k` matrix.
    pub fn apply_cols<'t>(&self, s: &Session<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let y = s.param(self.weight).matmul(x)?;
        match self.bias {
            None => Ok(y),
            Some(b) if self.bias_from == 0 => y.add_channel_bias(s.param(b)),
            Some(b) => y.add_channel_bias(s.param(b).pad_zeros(&[(self.bias_from, 0)])?),
        }
    }
    /// Applies the map at every location of an `in×m×n` map: `out×m×n`.
    pub fn apply_map<'t>(&self, s: &Session<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let &[c, m, n] = x.shape().as_slice() else {
            return shape_err(format!("pointwise affine expects c×m×n, got {:?}", x.shape()));
        };
        if c != self.in_dim {
            return shape_err(format!("pointwise affine expects {} channels, got {c}", self.in_dim));
        }
        self.apply_cols(s, x.reshape([c, m * n])?)?.reshape([self.out_dim, m, n])
    }

    /// Applies the map to a single vector.
    pub fn apply_vec<'t>(&self, s: &Session<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let d = x.numel();
        self.apply_cols(s, x.reshape([d, 1])?)?.reshape([self.out_dim])
    }
}

/// Square-kernel convolution with a per-channel bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        size: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let fan_in = c_in * size * size;
        let kernel = store.add(format!("{name}.kernel"), init_uniform(&[c_out, c_in, size, size], fan_in, rng))?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([c_out]))?;
        Ok(Self { kernel, bias, stride, padding })
    }

    /// Same-size convolution (odd `size`, stride 1).
    pub fn same<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        size: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Self::new(store, name, c_in, c_out, size, 1, size / 2, rng)
    }

    pub fn forward<'t>(&self, s: &Session<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.conv2d(s.param(self.kernel), self.stride, self.padding)?.add_channel_bias(s.param(self.bias))
    }
}
