//! Block attention: the recurrent layer runs on a `γ`-downsampled map and
//! its raw mask is scaled back up with a transposed convolution.

use rand::Rng;

use crate::attention::{check_inputs, ArnnConfig, AttentionOutput, AttentionRnnLayer, SpatialAttention};
use crate::error::{contract_err, Result};
use crate::nn::init_uniform;
use crate::tensor::{ParamId, ParamStore, Session, Tensor, Var};

#[derive(Clone, Debug)]
pub struct BlockAttentionLayer {
    pub gamma: usize,
    /// `c×c×γ×γ`, applied with stride `γ`.
    pub downsample_kernel: ParamId,
    pub inner: AttentionRnnLayer,
    /// `1×1×γ×γ` transposed-convolution kernel for the mask.
    pub upsample_kernel: ParamId,
}

impl BlockAttentionLayer {
    /// `config` describes the inner layer; its normalization is applied
    /// after upsampling.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        gamma: usize,
        config: ArnnConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if gamma == 0 {
            return contract_err("block size must be at least 1");
        }
        let c = config.in_channels;
        let downsample_kernel =
            store.add(format!("{name}.downsample"), init_uniform(&[c, c, gamma, gamma], c * gamma * gamma, rng))?;
        let inner = AttentionRnnLayer::new(store, &format!("{name}.inner"), config, rng)?;
        let upsample_kernel = store.add(format!("{name}.upsample"), Tensor::ones([1, 1, gamma, gamma]))?;
        Ok(Self { gamma, downsample_kernel, inner, upsample_kernel })
    }

    /// Zero-pads to a multiple of `γ` and applies the strided kernel:
    /// `c×⌈m/γ⌉×⌈n/γ⌉`.
    pub fn downsample<'t>(&self, s: &Session<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        let g = self.gamma;
        let pad = |e: usize| e.div_ceil(g) * g - e;
        let padded = x.pad_zeros(&[(0, 0), (0, pad(shape[1])), (0, pad(shape[2]))])?;
        padded.conv2d(s.param(self.downsample_kernel), g, 0)
    }

    /// Raw `m×n` mask: inner layer on the coarse grid, upsampled and cropped.
    pub fn raw_mask<'t>(&self, s: &mut Session<'t>, x: Var<'t>, query: Option<Var<'t>>) -> Result<Var<'t>> {
        let (m, n) = check_inputs(&x, self.inner.config.in_channels, query.as_ref(), self.inner.config.query_dim)?;
        let coarse = self.downsample(s, x)?;
        let (raw, _) = self.inner.raw_mask(s, coarse, query)?;
        let shape = raw.shape();
        let up = raw
            .reshape([1, shape[0], shape[1]])?
            .conv_transpose2d(s.param(self.upsample_kernel), self.gamma)?;
        up.slice(1, 0, m)?.slice(2, 0, n)?.reshape([m, n])
    }
}

impl SpatialAttention for BlockAttentionLayer {
    fn attend<'t>(&self, s: &mut Session<'t>, x: Var<'t>, query: Option<Var<'t>>) -> Result<AttentionOutput<'t>> {
        let raw = self.raw_mask(s, x, query)?;
        let mask = self.inner.config.normalization.apply(raw)?;
        let attended = x.mul_spatial(mask)?;
        Ok(AttentionOutput { mask, attended, field: None })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::Normalization;
    use crate::tensor::{randomize_for_check, Tape, DEFAULT_EPSILON};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layer(c: usize, gamma: usize) -> (ParamStore, BlockAttentionLayer) {
        let mut rng = ChaCha8Rng::seed_from_u64(gamma as u64);
        let mut store = ParamStore::new();
        let mut cfg = ArnnConfig::new(c);
        cfg.hidden = 2;
        cfg.context_channels = 2;
        let l = BlockAttentionLayer::new(&mut store, "b", gamma, cfg, &mut rng).unwrap();
        (store, l)
    }

    #[test]
    fn downsample_shapes_and_means() {
        let (mut store, l) = layer(1, 2);
        store.get_mut(l.downsample_kernel).value = Tensor::full([1, 1, 2, 2], 0.25);
        let tape = Tape::new();
        let s = Session::inference(&tape, &store, 0);
        #[rustfmt::skip]
        let x = Tensor::new([1, 4, 4], vec![
            1.0, 1.0, 3.0, 3.0,
            1.0, 1.0, 3.0, 3.0,
            5.0, 5.0, 7.0, 7.0,
            5.0, 5.0, 7.0, 7.0,
        ]).unwrap();
        let d = l.downsample(&s, s.constant(x)).unwrap().to_tensor();
        assert_eq!(d.shape(), &[1, 2, 2]);
        assert_eq!(d.data(), &[1.0, 3.0, 5.0, 7.0]);
        let odd = l.downsample(&s, s.constant(Tensor::ones([1, 5, 3]))).unwrap();
        assert_eq!(odd.shape(), vec![1, 3, 2]);
    }

    #[test]
    fn unit_block_is_spatial_identity() {
        let (mut store, l) = layer(1, 1);
        store.get_mut(l.downsample_kernel).value = Tensor::ones([1, 1, 1, 1]);
        let tape = Tape::new();
        let s = Session::inference(&tape, &store, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::randn([1, 3, 5], &mut rng);
        assert_eq!(l.downsample(&s, s.constant(x.clone())).unwrap().to_tensor(), x);
    }

    #[test]
    fn upsampled_mask_replicates_blocks() {
        let (store, l) = layer(1, 2);
        let tape = Tape::new();
        let mut s = Session::inference(&tape, &store, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = s.constant(Tensor::randn([1, 4, 6], &mut rng));
        let raw = l.raw_mask(&mut s, x, None).unwrap().to_tensor();
        assert_eq!(raw.shape(), &[4, 6]);
        for i in 0..4 {
            for j in 0..6 {
                assert_eq!(raw.get(&[i, j]), raw.get(&[i / 2 * 2, j / 2 * 2]));
            }
        }
    }

    #[test]
    fn mask_matches_input_extent() {
        let (store, l) = layer(2, 3);
        let tape = Tape::new();
        let mut s = Session::inference(&tape, &store, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = s.constant(Tensor::randn([2, 7, 5], &mut rng));
        let out = l.attend(&mut s, x, None).unwrap();
        assert_eq!(out.mask.shape(), vec![7, 5]);
        assert_eq!(out.attended.shape(), vec![2, 7, 5]);
        assert_eq!(l.inner.config.normalization, Normalization::Sigmoid);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (mut store, l) = layer(1, 2);
        randomize_for_check(&mut store, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn([1, 6, 6], &mut rng);
        let probe = Tensor::randn([1, 6, 6], &mut rng);
        let err = crate::tensor::finite_diff_report(&mut store, DEFAULT_EPSILON, |s| {
            let xv = s.constant(x.clone());
            let out = l.attend(s, xv, None)?;
            Ok(out.attended.mul(s.constant(probe.clone()))?.sum_all())
        })
        .unwrap();
        assert!(err.max_relative_error < 1e-4, "{err:?}");
    }
}
