//! Brute-force reference implementations used by the test suites.
//!
//! Nothing here calls into the production kernels: convolution is four
//! nested loops and dependency analysis is one forward pass per perturbed
//! input cell.

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// Default perturbation size for [`dependency_set`].
pub const PERTURBATION: f64 = 1e-3;

/// Changes smaller than this are treated as round-off.
pub const DEPENDENCY_THRESHOLD: f64 = 1e-12;

/// Which input cells each output cell depends on.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DependencySet {
    pub rows: usize,
    pub cols: usize,
    /// `deps[out][in]`, both flattened row-major over the `rows×cols` grid.
    deps: Vec<Vec<bool>>,
}

impl DependencySet {
    pub fn depends(&self, out: (usize, usize), input: (usize, usize)) -> bool {
        self.deps[out.0 * self.cols + out.1][input.0 * self.cols + input.1]
    }

    /// Input cells that influence `out`.
    pub fn inputs_of(&self, out: (usize, usize)) -> Vec<(usize, usize)> {
        self.deps[out.0 * self.cols + out.1]
            .iter()
            .enumerate()
            .filter(|(_, &d)| d)
            .map(|(k, _)| (k / self.cols, k % self.cols))
            .collect()
    }
}

/// Perturbation oracle over an `m×n` grid.
///
/// `forward` maps a `c×m×n` input to an `m×n` output. Every cell `(i,j)` is
/// perturbed in all channels at once by `epsilon`; output cell `o` depends on
/// `(i,j)` when `|Δo| > 1e−12`.
pub fn dependency_set<F>(forward: F, input: &Tensor, epsilon: f64) -> Result<DependencySet>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let &[c, m, n] = input.shape() else {
        return shape_err(format!("dependency oracle needs a c×m×n input, got {:?}", input.shape()));
    };
    let base = forward(input)?;
    if base.shape() != [m, n] {
        return shape_err(format!("dependency oracle needs an {m}×{n} output, got {:?}", base.shape()));
    }
    let mut deps = vec![vec![false; m * n]; m * n];
    for cell in 0..m * n {
        let mut x = input.clone();
        for ch in 0..c {
            x.data_mut()[ch * m * n + cell] += epsilon;
        }
        let out = forward(&x)?;
        for (o, row) in deps.iter_mut().enumerate() {
            row[cell] = (out.data()[o] - base.data()[o]).abs() > DEPENDENCY_THRESHOLD;
        }
    }
    Ok(DependencySet { rows: m, cols: n, deps })
}

/// Direct convolution with zero padding, `input[c_in×H×W]`,
/// `kernel[c_out×c_in×kh×kw]`.
pub fn reference_conv2d(input: &Tensor, kernel: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let (&[c_in, h, w], &[c_out, kc, kh, kw]) = (input.shape(), kernel.shape()) else {
        return shape_err("reference convolution needs rank-3 input and rank-4 kernel");
    };
    if kc != c_in || stride == 0 || h + 2 * padding < kh || w + 2 * padding < kw {
        return shape_err("reference convolution geometry is invalid");
    }
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (w + 2 * padding - kw) / stride + 1;
    let mut out = vec![0.0; c_out * oh * ow];
    for o in 0..c_out {
        for y in 0..oh {
            for x in 0..ow {
                let mut acc = 0.0;
                for ci in 0..c_in {
                    for dy in 0..kh {
                        for dx in 0..kw {
                            let iy = (y * stride + dy) as isize - padding as isize;
                            let ix = (x * stride + dx) as isize - padding as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            let iv = input.data()[(ci * h + iy as usize) * w + ix as usize];
                            let kv = kernel.data()[((o * c_in + ci) * kh + dy) * kw + dx];
                            acc += iv * kv;
                        }
                    }
                }
                out[(o * oh + y) * ow + x] = acc;
            }
        }
    }
    Tensor::new([c_out, oh, ow], out)
}

/// Product of `N(μ₁, s₁²)` and `N(μ₂, s₂²)` renormalized: returns `(μ, s)`.
pub fn gaussian_product_reference(mu1: f64, s1: f64, mu2: f64, s2: f64) -> (f64, f64) {
    let v1 = s1 * s1;
    let v2 = s2 * s2;
    let v = v1 * v2 / (v1 + v2);
    let mu = (mu1 * v2 + mu2 * v1) / (v1 + v2);
    (mu, v.sqrt())
}
