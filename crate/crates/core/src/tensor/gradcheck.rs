use crate::error::Result;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ParamStore, Session, Tape, Tensor, Var};

pub const DEFAULT_EPSILON: f64 = 1e-5;

/// Seed of the session random stream during a check, so stochastic layers
/// see identical noise in every evaluation.
const CHECK_SEED: u64 = 0x5eed;

/// `|analytic − numeric| / max(1e−8, |analytic| + |numeric|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Standard deviation of [`randomize_for_check`].
pub const CHECK_PARAM_STD: f64 = 0.7;

/// Redraws every parameter from `N(0, 0.7²)`.
///
/// Default initializations keep recurrent hidden states small, which leaves
/// some gradients within a few ulps of the loss; checking at a generic point
/// keeps central differences above round-off.
pub fn randomize_for_check(store: &mut ParamStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in store.iter_mut() {
        p.value = Tensor::randn(p.value.shape(), &mut rng).map(|v| v * CHECK_PARAM_STD);
    }
}

/// Redraws every parameter from `N(0, (gain/√fan_in)²)`, where the fan-in
/// of a rank-`k ≥ 2` tensor is its size over its leading extent. Vectors
/// are drawn with standard deviation `gain/2`.
///
/// Deep stacks need this scaling to stay out of saturation.
pub fn randomize_fan_in(store: &mut ParamStore, seed: u64, gain: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in store.iter_mut() {
        let shape = p.value.shape().to_vec();
        let std = match shape.as_slice() {
            [lead, ..] if shape.len() >= 2 => gain / ((p.value.numel() / lead.max(&1)) as f64).sqrt(),
            _ => 0.5 * gain,
        };
        p.value = Tensor::randn(shape, &mut rng).map(|v| v * std);
    }
}

/// Worst coordinate found by [`finite_diff_report`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

/// Compares reverse-mode gradients of the scalar built by `f` against
/// central differences over every parameter coordinate in `store`, and
/// returns the worst relative error. A NaN anywhere yields NaN.
///
/// `store` is restored to its original values before returning.
pub fn finite_diff_check<F>(store: &mut ParamStore, epsilon: f64, f: F) -> Result<f64>
where
    F: for<'t> Fn(&mut Session<'t>) -> Result<Var<'t>>,
{
    Ok(finite_diff_report(store, epsilon, f)?.max_relative_error)
}

/// [`finite_diff_check`] with the location of the worst coordinate.
pub fn finite_diff_report<F>(store: &mut ParamStore, epsilon: f64, f: F) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&mut Session<'t>) -> Result<Var<'t>>,
{
    assert!(epsilon > 0.0, "finite-difference step must be positive");
    let analytic = {
        let tape = Tape::new();
        let mut session = Session::new(&tape, store, CHECK_SEED);
        let loss = f(&mut session)?;
        let grads = tape.backward(loss)?;
        session.param_grads(&grads)
    };

    let eval = |store: &ParamStore| -> Result<f64> {
        let tape = Tape::new();
        let mut session = Session::inference(&tape, store, CHECK_SEED);
        Ok(f(&mut session)?.item())
    };

    let mut report =
        GradCheckReport { max_relative_error: 0.0, worst: None, analytic: 0.0, numeric: 0.0, coordinates: 0 };
    let ids: Vec<_> = store.ids().collect();
    for (id, grad) in ids.into_iter().zip(&analytic) {
        for (k, &a) in grad.iter().enumerate() {
            let original = store.get(id).value.data()[k];
            store.get_mut(id).value.data_mut()[k] = original + epsilon;
            let plus = eval(store);
            store.get_mut(id).value.data_mut()[k] = original - epsilon;
            let minus = eval(store);
            store.get_mut(id).value.data_mut()[k] = original;
            let numeric = (plus? - minus?) / (2.0 * epsilon);
            let err = relative_error(a, numeric);
            report.coordinates += 1;
            if err.is_nan() || err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst = Some((store.get(id).name.clone(), k));
                report.analytic = a;
                report.numeric = numeric;
                if err.is_nan() {
                    return Ok(report);
                }
            }
        }
    }
    Ok(report)
}
