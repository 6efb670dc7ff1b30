//! Finite-difference checks of a single attention layer and of a small
//! end-to-end network.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{AttentionKind, AttributeNet, ModelConfig, TRAIN_SIGMA_SCALE};
use crate::attention::{ArnnConfig, AttentionRnnLayer, DecodeMode, Normalization, SpatialAttention};
use crate::baseline::{GlobalSoftAttention, LocalConvAttention};
use crate::block::BlockAttentionLayer;
use crate::error::Result;
use crate::tensor::{
    finite_diff_report, randomize_fan_in, randomize_for_check, GradCheckReport, ParamStore, Session, Tensor, Var,
    DEFAULT_EPSILON,
};

/// Largest relative error a check may report.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// One attention layer on a random `channels×m×n` map with a one-hot query,
/// reduced to a scalar by a fixed random linear read-out of the attended map.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerCheck {
    pub attention: AttentionKind,
    pub channels: usize,
    pub m: usize,
    pub n: usize,
    pub query_dim: usize,
    pub hidden: usize,
    pub delta: usize,
    pub seed: u64,
    pub epsilon: f64,
}

impl LayerCheck {
    pub fn new(attention: AttentionKind) -> Self {
        Self { attention, channels: 1, m: 4, n: 4, query_dim: 3, hidden: 2, delta: 3, seed: 4, epsilon: DEFAULT_EPSILON }
    }

    pub fn run(&self) -> Result<GradCheckReport> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let c = self.channels;
        let arnn = |decode| ArnnConfig {
            context_channels: 2,
            hidden: self.hidden,
            delta: self.delta,
            query_dim: Some(self.query_dim),
            decode,
            ..ArnnConfig::new(c)
        };
        let layer: Box<dyn SpatialAttention> = match self.attention {
            AttentionKind::None => Box::new(Identity),
            AttentionKind::San => Box::new(GlobalSoftAttention::new(
                &mut store,
                "san",
                c,
                self.m,
                self.n,
                4,
                Some(self.query_dim),
                &mut rng,
            )?),
            AttentionKind::Ctx | AttentionKind::NoCtx => {
                let delta = if self.attention == AttentionKind::Ctx { self.delta } else { 1 };
                Box::new(LocalConvAttention::new(
                    &mut store,
                    "ctx",
                    c,
                    delta,
                    self.hidden,
                    Some(self.query_dim),
                    Normalization::Sigmoid,
                    &mut rng,
                )?)
            }
            AttentionKind::Brnn(g) => {
                Box::new(BlockAttentionLayer::new(&mut store, "brnn", g, arnn(DecodeMode::Expectation), &mut rng)?)
            }
            kind => {
                let (combiner, sample) = kind.recurrent().expect("remaining kinds are recurrent");
                let decode = if sample {
                    DecodeMode::Sample { sigma_scale: TRAIN_SIGMA_SCALE }
                } else {
                    DecodeMode::Expectation
                };
                Box::new(AttentionRnnLayer::new(&mut store, "arnn", ArnnConfig { combiner, ..arnn(decode) }, &mut rng)?)
            }
        };
        randomize_for_check(&mut store, self.seed);
        let input = Tensor::randn([c, self.m, self.n], &mut rng);
        let readout = Tensor::randn([c, self.m, self.n], &mut rng);
        let mut query = Tensor::zeros([self.query_dim]);
        query.data_mut()[self.seed as usize % self.query_dim] = 1.0;
        finite_diff_report(&mut store, self.epsilon, |s| {
            let x = s.constant(input.clone());
            let q = s.constant(query.clone());
            let out = layer.attend(s, x, Some(q))?;
            out.attended.mul(s.constant(readout.clone()))?.sum_all().tanh().pipe(Ok)
        })
    }
}

struct Identity;

impl SpatialAttention for Identity {
    fn attend<'t>(
        &self,
        s: &mut Session<'t>,
        x: Var<'t>,
        _query: Option<Var<'t>>,
    ) -> Result<crate::attention::AttentionOutput<'t>> {
        let shape = x.shape();
        let mask = s.constant(Tensor::ones([shape[1], shape[2]]));
        Ok(crate::attention::AttentionOutput { mask, attended: x, field: None })
    }
}

trait Pipe: Sized {
    fn pipe<T>(self, f: impl FnOnce(Self) -> T) -> T {
        f(self)
    }
}

impl<T> Pipe for T {}

/// Step of the end-to-end check. Central differences on a deep stack are
/// quantized at about one ulp of the loss over `2ε`, so the default step
/// cannot resolve the smallest recurrent gradients.
pub const MODEL_CHECK_EPSILON: f64 = 3e-4;

/// Draws fan-in-scaled parameters and keeps every backbone ReLU unit
/// active (positive convolution biases).
pub fn prepare_model_check(store: &mut ParamStore, seed: u64) {
    randomize_fan_in(store, seed, 1.0);
    for p in store.iter_mut() {
        if p.name.starts_with("stack") && p.name.ends_with(".conv.bias") {
            p.value = p.value.map(|v| v.abs() + 0.2);
        }
    }
}

/// Cross-entropy of a `12×12`, 8-channel, two-stack network.
pub fn model_gradcheck(attention: AttentionKind, seed: u64) -> Result<GradCheckReport> {
    let config = ModelConfig { stacks: 2, channels: 8, hidden: 2, ..ModelConfig::new(attention, 12, 10, 5) };
    let mut store = ParamStore::new();
    let net = AttributeNet::new(&mut store, config)?;
    prepare_model_check(&mut store, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let image = Tensor::uniform([3, 12, 12], 0.0, 1.0, &mut rng);
    let mut query = Tensor::zeros([10]);
    query.data_mut()[2] = 1.0;
    finite_diff_report(&mut store, MODEL_CHECK_EPSILON, |s| {
        let img = s.constant(image.clone());
        let q = s.constant(query.clone());
        net.forward(s, img, q)?.logits.cross_entropy(3)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const KINDS: [&str; 9] = ["arnn", "arnn-sample", "arnn-ind", "arnn-ind-sample", "brnn:2", "ctx", "noctx", "san", "none"];

    #[test]
    fn single_layers_on_four_by_four() {
        for name in KINDS {
            let r = LayerCheck::new(name.parse().unwrap()).run().unwrap();
            assert!(r.max_relative_error < GRADCHECK_TOLERANCE, "{name}: {r:?}");
        }
    }

    #[test]
    fn miniature_network_end_to_end() {
        for name in ["arnn", "arnn-ind", "brnn:2", "ctx", "noctx", "san", "none"] {
            let r = model_gradcheck(name.parse().unwrap(), 4).unwrap();
            assert!(r.max_relative_error < GRADCHECK_TOLERANCE, "{name}: {r:?}");
        }
    }

    #[test]
    fn directional_derivatives_match_at_default_scale() {
        // A random direction mixes every coordinate, so the derivative is far
        // above the difference quantum even where single coordinates are not.
        for name in ["arnn", "brnn:2", "san"] {
            let config = ModelConfig { stacks: 2, channels: 8, hidden: 2, ..ModelConfig::new(name.parse().unwrap(), 12, 10, 5) };
            let mut store = ParamStore::new();
            let net = AttributeNet::new(&mut store, config).unwrap();
            randomize_for_check(&mut store, 3);
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let image = Tensor::uniform([3, 12, 12], 0.0, 1.0, &mut rng);
            let mut query = Tensor::zeros([10]);
            query.data_mut()[7] = 1.0;
            let loss = |store: &ParamStore| -> (f64, Vec<Vec<f64>>) {
                let tape = crate::tensor::Tape::new();
                let mut s = Session::new(&tape, store, 0);
                let (img, q) = (s.constant(image.clone()), s.constant(query.clone()));
                let l = net.forward(&mut s, img, q).unwrap().logits.cross_entropy(1).unwrap();
                let g = tape.backward(l).unwrap();
                (l.item(), s.param_grads(&g))
            };
            let (_, grads) = loss(&store);
            let dirs: Vec<Tensor> = store.iter().map(|p| Tensor::randn(p.value.shape(), &mut rng)).collect();
            let analytic: f64 = grads.iter().zip(&dirs).map(|(g, d)| g.iter().zip(d.data()).map(|(a, b)| a * b).sum::<f64>()).sum();
            let eps = 1e-6;
            let shifted = |sign: f64| {
                let mut st = store.clone();
                for (p, d) in st.iter_mut().zip(&dirs) {
                    p.value.data_mut().iter_mut().zip(d.data()).for_each(|(w, v)| *w += sign * eps * v);
                }
                loss(&st).0
            };
            let numeric = (shifted(1.0) - shifted(-1.0)) / (2.0 * eps);
            let err = crate::tensor::relative_error(analytic, numeric);
            assert!(err < 1e-6, "{name}: {analytic} vs {numeric}");
        }
    }
}
