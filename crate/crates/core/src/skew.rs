//! Coordinate rearrangements that turn diagonal sweeps into column sweeps.
//!
//! Skewing shifts row `i` of an `h×m×n` map right by `i` columns, giving an
//! `h×m×(m+n−1)` map (`2n−1` wide for square maps). Cells on one
//! anti-diagonal of the original (`i + j` constant) land in one skewed
//! column, so a left-to-right column sweep visits the original diagonals in
//! order. Every function here is a pure index permutation (with zero fill),
//! available both on plain tensors and on tape variables.

use crate::error::{shape_err, Result};
use crate::tensor::{Tensor, Var};

/// A skewed map and the column count of the map it came from.
#[derive(Clone, Debug)]
pub struct SkewedMap<T> {
    pub map: T,
    pub original_cols: usize,
}

fn dims3(shape: &[usize], op: &str) -> Result<(usize, usize, usize)> {
    match *shape {
        [h, m, n] if m >= 1 && n >= 1 => Ok((h, m, n)),
        _ => shape_err(format!("{op} expects an h×m×n map with m, n ≥ 1, got {shape:?}")),
    }
}

/// Width of the skewed version of an `m×n` grid.
pub fn skewed_width(m: usize, n: usize) -> usize {
    m + n - 1
}

fn skew_index(h: usize, m: usize, n: usize) -> Vec<Option<usize>> {
    let w = skewed_width(m, n);
    let mut src = vec![None; h * m * w];
    for c in 0..h {
        for i in 0..m {
            for j in 0..n {
                src[(c * m + i) * w + i + j] = Some((c * m + i) * n + j);
            }
        }
    }
    src
}

fn unskew_index(h: usize, m: usize, n: usize) -> Vec<Option<usize>> {
    let w = skewed_width(m, n);
    let mut src = Vec::with_capacity(h * m * n);
    for c in 0..h {
        for i in 0..m {
            for j in 0..n {
                src.push(Some((c * m + i) * w + i + j));
            }
        }
    }
    src
}

fn mirror_index(h: usize, m: usize, n: usize) -> Vec<Option<usize>> {
    let mut src = Vec::with_capacity(h * m * n);
    for c in 0..h {
        for i in 0..m {
            for j in 0..n {
                src.push(Some((c * m + i) * n + (n - 1 - j)));
            }
        }
    }
    src
}

fn shift_index(h: usize, m: usize, n: usize) -> Vec<Option<usize>> {
    let mut src = Vec::with_capacity(h * m * n);
    for c in 0..h {
        for i in 0..m {
            for j in 0..n {
                src.push((i > 0).then(|| (c * m + i - 1) * n + j));
            }
        }
    }
    src
}

fn apply(x: &Tensor, shape: Vec<usize>, src: &[Option<usize>]) -> Result<Tensor> {
    let data = src.iter().map(|s| s.map_or(0.0, |i| x.data()[i])).collect();
    Tensor::new(shape, data)
}

impl<T> SkewedMap<T> {
    fn check(shape: &[usize], original_cols: usize) -> Result<(usize, usize, usize)> {
        let &[h, m, w] = shape else {
            return shape_err(format!("skewed map must be h×m×w, got {shape:?}"));
        };
        if original_cols == 0 || m == 0 || w != skewed_width(m, original_cols) {
            return shape_err(format!(
                "skewed width {w} does not match {m} rows of {original_cols} columns (expected {})",
                (m + original_cols).saturating_sub(1)
            ));
        }
        Ok((h, m, original_cols))
    }
}

impl SkewedMap<Tensor> {
    pub fn new(map: Tensor, original_cols: usize) -> Result<Self> {
        Self::check(map.shape(), original_cols)?;
        Ok(Self { map, original_cols })
    }
}

impl<'t> SkewedMap<Var<'t>> {
    pub fn new(map: Var<'t>, original_cols: usize) -> Result<Self> {
        Self::check(&map.shape(), original_cols)?;
        Ok(Self { map, original_cols })
    }

    /// Inverse of [`Var::skew`].
    pub fn unskew(self) -> Result<Var<'t>> {
        let (h, m, n) = Self::check(&self.map.shape(), self.original_cols)?;
        self.map.gather(vec![h, m, n], unskew_index(h, m, n))
    }
}

pub fn skew(x: &Tensor) -> Result<SkewedMap<Tensor>> {
    let (h, m, n) = dims3(x.shape(), "skew")?;
    let map = apply(x, vec![h, m, skewed_width(m, n)], &skew_index(h, m, n))?;
    Ok(SkewedMap { map, original_cols: n })
}

pub fn unskew(x: &SkewedMap<Tensor>) -> Result<Tensor> {
    let (h, m, n) = SkewedMap::<Tensor>::check(x.map.shape(), x.original_cols)?;
    apply(&x.map, vec![h, m, n], &unskew_index(h, m, n))
}

/// Column `j` moves to column `n−1−j`.
pub fn mirror_cols(x: &Tensor) -> Result<Tensor> {
    let (h, m, n) = dims3(x.shape(), "mirror_cols")?;
    apply(x, vec![h, m, n], &mirror_index(h, m, n))
}

/// Row `i` moves to row `i+1`; row 0 becomes zeros and the last row is dropped.
pub fn shift_down_one_row(x: &Tensor) -> Result<Tensor> {
    let (h, m, n) = dims3(x.shape(), "shift_down_one_row")?;
    apply(x, vec![h, m, n], &shift_index(h, m, n))
}

impl<'t> Var<'t> {
    pub fn skew(self) -> Result<SkewedMap<Var<'t>>> {
        let (h, m, n) = dims3(&self.shape(), "skew")?;
        let map = self.gather(vec![h, m, skewed_width(m, n)], skew_index(h, m, n))?;
        Ok(SkewedMap { map, original_cols: n })
    }

    pub fn mirror_cols(self) -> Result<Var<'t>> {
        let (h, m, n) = dims3(&self.shape(), "mirror_cols")?;
        self.gather(vec![h, m, n], mirror_index(h, m, n))
    }

    pub fn shift_down_one_row(self) -> Result<Var<'t>> {
        let (h, m, n) = dims3(&self.shape(), "shift_down_one_row")?;
        self.gather(vec![h, m, n], shift_index(h, m, n))
    }
}
