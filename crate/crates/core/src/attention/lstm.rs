use rand::Rng;

use crate::error::{shape_err, Result};
use crate::nn::init_uniform;
use crate::skew::SkewedMap;
use crate::tensor::{ParamId, ParamStore, Session, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    LeftToRight,
    RightToLeft,
}

/// Diagonal LSTM swept column by column over a skewed map.
///
/// `k_h` is a `4t×t×2×1` kernel whose top tap reads row `i−1` of the previous
/// skewed column and whose bottom tap reads row `i`. `k_x` is a `4t×c×1×1`
/// kernel over the input column. Gate order along the `4t` axis is
/// output, forget, input, candidate.
#[derive(Clone, Debug)]
pub struct DiagonalLstm {
    pub hidden: usize,
    pub input_channels: usize,
    pub direction: Direction,
    pub k_h: ParamId,
    pub k_x: ParamId,
    pub bias: ParamId,
}

impl DiagonalLstm {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input_channels: usize,
        hidden: usize,
        direction: Direction,
        rng: &mut R,
    ) -> Result<Self> {
        let t = hidden;
        let k_h = store.add(format!("{name}.k_h"), init_uniform(&[4 * t, t, 2, 1], 2 * t, rng))?;
        let k_x = store.add(format!("{name}.k_x"), init_uniform(&[4 * t, input_channels, 1, 1], input_channels, rng))?;
        let mut b = Tensor::zeros([4 * t]);
        b.data_mut()[t..2 * t].fill(1.0);
        let bias = store.add(format!("{name}.bias"), b)?;
        Ok(Self { hidden, input_channels, direction, k_h, k_x, bias })
    }

    /// Runs the recursion over an already skewed input and returns the
    /// unskewed hidden states `t×m×n`. Direction is not applied here.
    pub fn sweep<'t>(&self, s: &Session<'t>, input: &SkewedMap<Var<'t>>) -> Result<Var<'t>> {
        let &[c, m, w] = input.map.shape().as_slice() else {
            return shape_err("diagonal sweep expects a c×m×w skewed map");
        };
        if c != self.input_channels {
            return shape_err(format!("diagonal LSTM expects {} input channels, got {c}", self.input_channels));
        }
        let t = self.hidden;
        // Input-to-state contributions for every column at once.
        let xk = input
            .map
            .conv2d(s.param(self.k_x), 1, 0)?
            .add_channel_bias(s.param(self.bias))?;
        let k_h = s.param(self.k_h).reshape([4 * t, 2 * t])?;

        let mut h = s.constant(Tensor::zeros([t, m]));
        let mut cell = s.constant(Tensor::zeros([t, m]));
        let mut states = Vec::with_capacity(w);
        for j in 0..w {
            let x_col = xk.slice(2, j, 1)?.reshape([4 * t, m])?;
            let pre = if j == 0 {
                x_col
            } else {
                let up = h.pad_zeros(&[(0, 0), (1, 0)])?.slice(1, 0, m)?;
                let taps = Var::concat(&[up.reshape([t, 1, m])?, h.reshape([t, 1, m])?], 1)?.reshape([2 * t, m])?;
                k_h.matmul(taps)?.add(x_col)?
            };
            let o = pre.slice(0, 0, t)?.sigmoid();
            let f = pre.slice(0, t, t)?.sigmoid();
            let i = pre.slice(0, 2 * t, t)?.sigmoid();
            let g = pre.slice(0, 3 * t, t)?.tanh();
            cell = f.mul(cell)?.add(i.mul(g)?)?;
            h = o.mul(cell.tanh())?;
            states.push(h.reshape([t, m, 1])?);
        }
        SkewedMap::<Var>::new(Var::concat(&states, 2)?, input.original_cols)?.unskew()
    }

    /// Full directional pass over an unskewed `c×m×n` context map.
    ///
    /// The right-to-left direction mirrors the columns, sweeps, mirrors back
    /// and shifts down one row, so position `(i,j)` only sees rows above it.
    pub fn pass<'t>(&self, s: &Session<'t>, context: Var<'t>) -> Result<Var<'t>> {
        match self.direction {
            Direction::LeftToRight => self.sweep(s, &context.skew()?),
            Direction::RightToLeft => self
                .sweep(s, &context.mirror_cols()?.skew()?)?
                .mirror_cols()?
                .shift_down_one_row(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sig(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    #[test]
    fn zero_parameters_give_zero_states() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let lstm = DiagonalLstm::new(&mut store, "l", 2, 3, Direction::LeftToRight, &mut rng).unwrap();
        for p in store.iter_mut() {
            p.value.data_mut().fill(0.0);
        }
        let tape = Tape::new();
        let s = Session::inference(&tape, &store, 0);
        let x = s.constant(Tensor::randn([2, 4, 5], &mut rng));
        let h = lstm.pass(&s, x).unwrap();
        assert_eq!(h.shape(), vec![3, 4, 5]);
        assert!(h.to_tensor().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_cell_is_one_lstm_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let lstm = DiagonalLstm::new(&mut store, "l", 1, 1, Direction::LeftToRight, &mut rng).unwrap();
        let kx = store.get(lstm.k_x).value.data().to_vec();
        let b = store.get(lstm.bias).value.data().to_vec();
        let tape = Tape::new();
        let s = Session::inference(&tape, &store, 0);
        let x = 0.7;
        let h = lstm.pass(&s, s.constant(Tensor::full([1, 1, 1], x))).unwrap().item();
        let gate = |k: usize| kx[k] * x + b[k];
        let c = sig(gate(2)) * gate(3).tanh();
        let expected = sig(gate(0)) * c.tanh();
        assert!((h - expected).abs() < 1e-15, "{h} vs {expected}");
    }

    #[test]
    fn right_pass_first_row_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let lstm = DiagonalLstm::new(&mut store, "r", 2, 2, Direction::RightToLeft, &mut rng).unwrap();
        let tape = Tape::new();
        let s = Session::inference(&tape, &store, 0);
        let h = lstm.pass(&s, s.constant(Tensor::randn([2, 3, 4], &mut rng))).unwrap().to_tensor();
        for c in 0..2 {
            for j in 0..4 {
                assert_eq!(h.get(&[c, 0, j]), 0.0);
            }
        }
        assert!(h.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn wrong_channel_count_is_a_shape_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let lstm = DiagonalLstm::new(&mut store, "l", 3, 2, Direction::LeftToRight, &mut rng).unwrap();
        let tape = Tape::new();
        let s = Session::inference(&tape, &store, 0);
        let r = lstm.pass(&s, s.constant(Tensor::zeros([2, 3, 3])));
        assert!(matches!(r, Err(crate::Error::Shape(_))));
    }
}
