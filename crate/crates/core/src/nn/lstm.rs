use rand::Rng;

use super::params::{self, Bound, ParamId, ParamStore};
use super::tape::{Tape, Tensor, Var};

/// Single-layer LSTM cell with fused gate weights, gate order `i, f, g, o`.
#[derive(Debug, Clone, Copy)]
pub struct Lstm {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub hidden: usize,
}

/// Hidden and cell state, each `[batch, hidden]`.
#[derive(Debug, Clone, Copy)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

impl Lstm {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        input: usize,
        hidden: usize,
    ) -> Self {
        let w = store.add(
            format!("{name}.weight"),
            params::init_normal(rng, &[input + hidden, 4 * hidden], input + hidden, 1.0),
        );
        let mut bias = params::zeros(&[4 * hidden]);
        // forget-gate bias starts at 1
        for j in hidden..2 * hidden {
            bias[[j]] = 1.0;
        }
        let b = store.add(format!("{name}.bias"), bias);
        Self {
            w,
            b,
            input,
            hidden,
        }
    }

    pub fn zero_state(&self, tape: &mut Tape, batch: usize) -> LstmState {
        let z = Tensor::zeros(ndarray::IxDyn(&[batch, self.hidden]));
        LstmState {
            h: tape.constant(z.clone()),
            c: tape.constant(z),
        }
    }

    pub fn step(&self, tape: &mut Tape, p: &Bound, x: Var, state: LstmState) -> LstmState {
        let hsz = self.hidden;
        let xh = tape.concat_cols(&[x, state.h]);
        let pre = tape.matmul(xh, p[self.w]);
        let pre = tape.add_row(pre, p[self.b]);
        let i = tape.slice_cols(pre, 0, hsz);
        let f = tape.slice_cols(pre, hsz, 2 * hsz);
        let g = tape.slice_cols(pre, 2 * hsz, 3 * hsz);
        let o = tape.slice_cols(pre, 3 * hsz, 4 * hsz);
        let i = tape.sigmoid(i);
        let f = tape.sigmoid(f);
        let g = tape.tanh(g);
        let o = tape.sigmoid(o);
        let fc = tape.mul(f, state.c);
        let ig = tape.mul(i, g);
        let c = tape.add(fc, ig);
        let tc = tape.tanh(c);
        let h = tape.mul(o, tc);
        LstmState { h, c }
    }

    /// Keeps the previous state for rows whose `mask` entry is 0.
    pub fn masked_step(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: Var,
        state: LstmState,
        mask: &[f64],
    ) -> LstmState {
        let next = self.step(tape, p, x, state);
        if mask.iter().all(|&m| m == 1.0) {
            return next;
        }
        let keep = column_mask(mask, self.hidden, false);
        let hold = column_mask(mask, self.hidden, true);
        let blend = |tape: &mut Tape, new: Var, old: Var| {
            let a = tape.mul_const(new, keep.clone());
            let b = tape.mul_const(old, hold.clone());
            tape.add(a, b)
        };
        LstmState {
            h: blend(tape, next.h, state.h),
            c: blend(tape, next.c, state.c),
        }
    }
}

fn column_mask(mask: &[f64], width: usize, invert: bool) -> Tensor {
    Tensor::from_shape_fn(ndarray::IxDyn(&[mask.len(), width]), |ix| {
        let m = mask[ix[0]];
        if invert {
            1.0 - m
        } else {
            m
        }
    })
}
