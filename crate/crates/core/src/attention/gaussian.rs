use rand_distr::{Distribution, StandardNormal};

use crate::error::{shape_err, Result};
use crate::nn::Affine;
use crate::tensor::{Session, Tensor, Var};

/// Lower bound added to every softplus-parameterized standard deviation.
pub const SIGMA_FLOOR: f64 = 1e-6;

/// Per-location Gaussian parameters, each `m×n`.
///
/// `pre_sigma` is the unconstrained value `s` with `σ = softplus(s) + 1e−6`
/// when the field came from a head; the independent product has none.
#[derive(Clone, Copy, Debug)]
pub struct GaussianField<'t> {
    pub mu: Var<'t>,
    pub sigma: Var<'t>,
    pub pre_sigma: Option<Var<'t>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DecodeMode {
    Expectation,
    Sample { sigma_scale: f64 },
}

fn sigma_from_pre(s: Var<'_>) -> Var<'_> {
    s.softplus().add_scalar(SIGMA_FLOOR)
}

/// Splits a `2×m×n` head output into a field.
fn field_from_pair<'t>(out: Var<'t>, m: usize, n: usize) -> Result<GaussianField<'t>> {
    let mu = out.slice(0, 0, 1)?.reshape([m, n])?;
    let pre = out.slice(0, 1, 1)?.reshape([m, n])?;
    Ok(GaussianField { mu, sigma: sigma_from_pre(pre), pre_sigma: Some(pre) })
}

/// Applies a `t → 2` head at every location of the hidden map.
pub fn directional_params<'t>(s: &Session<'t>, hidden: Var<'t>, head: &Affine) -> Result<GaussianField<'t>> {
    let shape = hidden.shape();
    let &[_, m, n] = shape.as_slice() else {
        return shape_err(format!("hidden map must be t×m×n, got {shape:?}"));
    };
    if head.out_dim != 2 {
        return shape_err("directional head must produce two outputs");
    }
    field_from_pair(head.apply_map(s, hidden)?, m, n)
}

/// Precision-weighted product of two independent Gaussians per location.
pub fn combine_independent<'t>(l: &GaussianField<'t>, r: &GaussianField<'t>) -> Result<GaussianField<'t>> {
    let pl = l.sigma.square().recip();
    let pr = r.sigma.square().recip();
    let var = pl.add(pr)?.recip();
    let mu = var.mul(l.mu.mul(pl)?.add(r.mu.mul(pr)?)?)?;
    let sigma = var.sqrt().clamp_min(SIGMA_FLOOR);
    Ok(GaussianField { mu, sigma, pre_sigma: None })
}

/// Learned `4 → 2` combination applied at every location.
///
/// The inputs are `(μ_l, s_l, μ_r, s_r)` where `s` is the pre-softplus value
/// of each direction, so a projection onto the left pair reproduces the left
/// field exactly.
pub fn combine_learned<'t>(
    s: &Session<'t>,
    l: &GaussianField<'t>,
    r: &GaussianField<'t>,
    comb: &Affine,
) -> Result<GaussianField<'t>> {
    let shape = l.mu.shape();
    let &[m, n] = shape.as_slice() else {
        return shape_err(format!("field must be m×n, got {shape:?}"));
    };
    let pre = |f: &GaussianField<'t>| -> Result<Var<'t>> {
        match f.pre_sigma {
            Some(p) => Ok(p),
            None => shape_err("learned combination needs head-produced fields"),
        }
    };
    let rows: Vec<Var<'t>> = [l.mu, pre(l)?, r.mu, pre(r)?]
        .into_iter()
        .map(|v| v.reshape([1, m * n]))
        .collect::<Result<_>>()?;
    let out = comb.apply_cols(s, Var::concat(&rows, 0)?)?;
    field_from_pair(out.reshape([2, m, n])?, m, n)
}

/// Turns a field into a raw (unnormalized) mask.
pub fn decode<'t>(s: &mut Session<'t>, field: &GaussianField<'t>, mode: DecodeMode) -> Result<Var<'t>> {
    match mode {
        DecodeMode::Expectation | DecodeMode::Sample { sigma_scale: 0.0 } => Ok(field.mu),
        DecodeMode::Sample { sigma_scale } => {
            let shape = field.mu.shape();
            let numel = field.mu.numel();
            let rng = s.rng();
            let eps: Vec<f64> = (0..numel).map(|_| StandardNormal.sample(rng)).collect();
            let eps = s.constant(Tensor::new(shape, eps)?);
            field.mu.add(field.sigma.scale(sigma_scale).mul(eps)?)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{ParamStore, Tape};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn field<'t>(s: &Session<'t>, mu: &[f64], sigma: &[f64]) -> GaussianField<'t> {
        let k = mu.len();
        GaussianField {
            mu: s.constant(Tensor::new([1, k], mu.to_vec()).unwrap()),
            sigma: s.constant(Tensor::new([1, k], sigma.to_vec()).unwrap()),
            pre_sigma: None,
        }
    }

    #[test]
    fn independent_product_examples() {
        let store = ParamStore::new();
        let tape = Tape::new();
        let s = Session::inference(&tape, &store, 0);
        let out = combine_independent(&field(&s, &[1.0, 5.0], &[1.0, 0.5]), &field(&s, &[3.0, 5.0], &[1.0, 0.5])).unwrap();
        let (mu, sigma) = (out.mu.to_tensor(), out.sigma.to_tensor());
        assert!((mu.data()[0] - 2.0).abs() < 1e-15);
        assert!((sigma.data()[0].powi(2) - 0.5).abs() < 1e-15);
        assert!((mu.data()[1] - 5.0).abs() < 1e-15);
        assert!((sigma.data()[1].powi(2) - 0.125).abs() < 1e-15);

        let wide = combine_independent(&field(&s, &[7.0], &[1e6]), &field(&s, &[-0.4], &[0.3])).unwrap();
        assert!((wide.mu.item() + 0.4).abs() < 1e-6);
        assert!((wide.sigma.item() - 0.3).abs() < 1e-6);
    }

    #[test]
    fn head_with_bias_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let head = Affine::new(&mut store, "h", 3, 2, &mut rng).unwrap();
        store.get_mut(head.weight).value.data_mut().fill(0.0);
        store.get_mut(head.bias.unwrap()).value.data_mut().copy_from_slice(&[0.3, 0.0]);
        let tape = Tape::new();
        let s = Session::inference(&tape, &store, 0);
        let f = directional_params(&s, s.constant(Tensor::zeros([3, 2, 4])), &head).unwrap();
        assert!(f.mu.to_tensor().data().iter().all(|&v| v == 0.3));
        let expected = std::f64::consts::LN_2 + 1e-6;
        assert!(f.sigma.to_tensor().data().iter().all(|&v| (v - expected).abs() < 1e-15));
    }

    #[test]
    fn sample_with_zero_scale_is_expectation() {
        let store = ParamStore::new();
        let tape = Tape::new();
        let mut s = Session::inference(&tape, &store, 9);
        let f = field(&s, &[0.1, -2.0, 3.0], &[1.0, 2.0, 0.5]);
        let a = decode(&mut s, &f, DecodeMode::Expectation).unwrap().to_tensor();
        let b = decode(&mut s, &f, DecodeMode::Sample { sigma_scale: 0.0 }).unwrap().to_tensor();
        assert_eq!(a, b);
        assert_eq!(a, f.mu.to_tensor());
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let store = ParamStore::new();
        let draw = |seed| {
            let tape = Tape::new();
            let mut s = Session::inference(&tape, &store, seed);
            let f = field(&s, &[0.0; 6], &[1.0; 6]);
            decode(&mut s, &f, DecodeMode::Sample { sigma_scale: 2.0 }).unwrap().to_tensor()
        };
        let (a, b, c) = (draw(5), draw(5), draw(6));
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_ne!(a, c);
    }
}
