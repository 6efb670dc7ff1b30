//! Comparison attention layers: per-location convolutional scoring with or
//! without a neighbourhood, and a global soft attention over the final map.

use rand::Rng;

use crate::attention::{check_inputs, AttentionOutput, Normalization, SpatialAttention};
use crate::error::{contract_err, shape_err, Result};
use crate::nn::{Affine, Conv};
use crate::tensor::{ParamId, ParamStore, Session, Tensor, Var};

/// Score head `δ×δ conv → tanh → 1×1 conv` over features and tiled query.
#[derive(Clone, Debug)]
pub struct LocalConvAttention {
    pub in_channels: usize,
    pub delta: usize,
    pub query_dim: Option<usize>,
    pub normalization: Normalization,
    pub context: Conv,
    pub score: Affine,
}

impl LocalConvAttention {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        delta: usize,
        hidden: usize,
        query_dim: Option<usize>,
        normalization: Normalization,
        rng: &mut R,
    ) -> Result<Self> {
        if delta % 2 == 0 {
            return contract_err(format!("context size must be odd, got {delta}"));
        }
        let c = in_channels + query_dim.unwrap_or(0);
        let context = Conv::same(store, &format!("{name}.context"), c, hidden, delta, rng)?;
        // A constant score offset cancels under softmax.
        let bias_from = usize::from(normalization == Normalization::Softmax);
        let score = Affine::with_bias_from(store, &format!("{name}.score"), hidden, 1, bias_from, rng)?;
        Ok(Self { in_channels, delta, query_dim, normalization, context, score })
    }

    /// Unnormalized `m×n` scores.
    pub fn scores<'t>(&self, s: &Session<'t>, x: Var<'t>, query: Option<Var<'t>>) -> Result<Var<'t>> {
        let (m, n) = check_inputs(&x, self.in_channels, query.as_ref(), self.query_dim)?;
        let input = match query {
            Some(q) => Var::concat(&[x, q.tile_spatial(m, n)?], 0)?,
            None => x,
        };
        self.score.apply_map(s, self.context.forward(s, input)?.tanh())?.reshape([m, n])
    }
}

impl SpatialAttention for LocalConvAttention {
    fn attend<'t>(&self, s: &mut Session<'t>, x: Var<'t>, query: Option<Var<'t>>) -> Result<AttentionOutput<'t>> {
        let mask = self.normalization.apply(self.scores(s, x, query)?)?;
        Ok(AttentionOutput { mask, attended: x.mul_spatial(mask)?, field: None })
    }
}

/// Softmax attention over every position of a fixed-size map.
///
/// Each location is embedded jointly with the query,
/// `score = w·tanh(W_x x + W_q q + b) + p[i,j]`, where `p` is a learned
/// positional bias that pins the spatial size.
#[derive(Clone, Debug)]
pub struct GlobalSoftAttention {
    pub in_channels: usize,
    pub rows: usize,
    pub cols: usize,
    pub query_dim: Option<usize>,
    pub embed: Affine,
    pub query_embed: Option<ParamId>,
    pub score: ParamId,
    pub position: ParamId,
}

impl GlobalSoftAttention {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        rows: usize,
        cols: usize,
        embed_dim: usize,
        query_dim: Option<usize>,
        rng: &mut R,
    ) -> Result<Self> {
        let embed = Affine::new(store, &format!("{name}.embed"), in_channels, embed_dim, rng)?;
        let query_embed = match query_dim {
            Some(d) => Some(store.add(format!("{name}.query"), crate::nn::init_uniform(&[embed_dim, d], d, rng))?),
            None => None,
        };
        let score = store.add(format!("{name}.score"), crate::nn::init_uniform(&[1, embed_dim], embed_dim, rng))?;
        let position = store.add(format!("{name}.position"), Tensor::zeros([rows, cols]))?;
        Ok(Self { in_channels, rows, cols, query_dim, embed, query_embed, score, position })
    }

    pub fn scores<'t>(&self, s: &Session<'t>, x: Var<'t>, query: Option<Var<'t>>) -> Result<Var<'t>> {
        let (m, n) = check_inputs(&x, self.in_channels, query.as_ref(), self.query_dim)?;
        if (m, n) != (self.rows, self.cols) {
            return shape_err(format!(
                "global attention was built for {}×{} maps, got {m}×{n}",
                self.rows, self.cols
            ));
        }
        let mut e = self.embed.apply_map(s, x)?;
        if let (Some(q), Some(wq)) = (query, self.query_embed) {
            let d = self.embed.out_dim;
            let qe = s.param(wq).matmul(q.reshape([q.numel(), 1])?)?.reshape([d])?;
            e = e.add(qe.tile_spatial(m, n)?)?;
        }
        let d = self.embed.out_dim;
        let scores = s.param(self.score).matmul(e.tanh().reshape([d, m * n])?)?.reshape([m, n])?;
        scores.add(s.param(self.position))
    }
}

impl SpatialAttention for GlobalSoftAttention {
    fn attend<'t>(&self, s: &mut Session<'t>, x: Var<'t>, query: Option<Var<'t>>) -> Result<AttentionOutput<'t>> {
        let mask = self.scores(s, x, query)?.softmax_spatial()?;
        Ok(AttentionOutput { mask, attended: x.mul_spatial(mask)?, field: None })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{randomize_for_check, Tape, DEFAULT_EPSILON};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_weights_give_half_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let l = LocalConvAttention::new(&mut store, "c", 2, 1, 4, None, Normalization::Sigmoid, &mut rng).unwrap();
        for p in store.iter_mut() {
            p.value.data_mut().fill(0.0);
        }
        let tape = Tape::new();
        let mut s = Session::inference(&tape, &store, 0);
        let x = s.constant(Tensor::randn([2, 3, 3], &mut rng));
        let out = l.attend(&mut s, x, None).unwrap();
        assert!(out.mask.to_tensor().data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn shifted_input_shifts_interior_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let l = LocalConvAttention::new(&mut store, "c", 1, 3, 3, None, Normalization::Sigmoid, &mut rng).unwrap();
        let x = Tensor::randn([1, 5, 6], &mut rng);
        let shifted = Tensor::from_fn([1, 5, 6], |k| if k % 6 == 0 { 0.0 } else { x.data()[k - 1] });
        let tape = Tape::new();
        let s = Session::inference(&tape, &store, 0);
        let a = l.scores(&s, s.constant(x), None).unwrap().to_tensor();
        let b = l.scores(&s, s.constant(shifted), None).unwrap().to_tensor();
        for i in 0..5 {
            for j in 1..4 {
                assert!((a.get(&[i, j]) - b.get(&[i, j + 1])).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn global_mask_is_a_distribution() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let l = GlobalSoftAttention::new(&mut store, "g", 3, 4, 5, 6, Some(2), &mut rng).unwrap();
        let tape = Tape::new();
        let mut s = Session::inference(&tape, &store, 0);
        let x = s.constant(Tensor::randn([3, 4, 5], &mut rng));
        let q = s.constant(Tensor::new([2], vec![1.0, 0.0]).unwrap());
        let out = l.attend(&mut s, x, Some(q)).unwrap();
        assert!((out.mask.to_tensor().sum() - 1.0).abs() < 1e-10);

        let wrong = s.constant(Tensor::zeros([3, 4, 4]));
        assert!(matches!(l.attend(&mut s, wrong, Some(q)), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn uniform_scores_give_uniform_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let l = GlobalSoftAttention::new(&mut store, "g", 1, 3, 3, 4, None, &mut rng).unwrap();
        store.get_mut(l.score).value.data_mut().fill(0.0);
        let tape = Tape::new();
        let mut s = Session::inference(&tape, &store, 0);
        let x = s.constant(Tensor::randn([1, 3, 3], &mut rng));
        let out = l.attend(&mut s, x, None).unwrap();
        assert!(out.mask.to_tensor().data().iter().all(|&v| (v - 1.0 / 9.0).abs() < 1e-15));
    }

    #[test]
    fn baselines_pass_gradient_checks() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::randn([2, 4, 4], &mut rng);
        let probe = Tensor::randn([2, 4, 4], &mut rng);
        let q = Tensor::randn([3], &mut rng);
        for delta in [1, 3] {
            let mut store = ParamStore::new();
            let l = LocalConvAttention::new(&mut store, "c", 2, delta, 3, Some(3), Normalization::Softmax, &mut rng)
                .unwrap();
            randomize_for_check(&mut store, delta as u64);
            let err = crate::tensor::finite_diff_report(&mut store, DEFAULT_EPSILON, |s| {
                let (xv, qv) = (s.constant(x.clone()), s.constant(q.clone()));
                let out = l.attend(s, xv, Some(qv))?;
                Ok(out.attended.mul(s.constant(probe.clone()))?.sum_all())
            })
            .unwrap();
            assert!(err.max_relative_error < 1e-4, "delta {delta}: {err:?}");
        }
        let mut store = ParamStore::new();
        let l = GlobalSoftAttention::new(&mut store, "g", 2, 4, 4, 5, Some(3), &mut rng).unwrap();
        randomize_for_check(&mut store, 9);
        let err = crate::tensor::finite_diff_report(&mut store, DEFAULT_EPSILON, |s| {
            let (xv, qv) = (s.constant(x.clone()), s.constant(q.clone()));
            let out = l.attend(s, xv, Some(qv))?;
            Ok(out.attended.mul(s.constant(probe.clone()))?.sum_all())
        })
        .unwrap();
        assert!(err.max_relative_error < 1e-4, "global: {err:?}");
    }
}
