//! Parameterized building blocks shared by the models.

use alloc::format;
use alloc::vec::Vec;

use super::params::init;
use super::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::Real;

/// `x [*, in] . W [in, out] + b [1, out]`.
pub fn dense<T: Real>(g: &mut Graph<'_, T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

/// Row lookup for a single code; gradients land in that row only.
pub fn embedding<T: Real>(g: &mut Graph<'_, T>, table: Var, code: usize) -> Result<Var> {
    g.gather_rows(table, &[code])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
}

impl Dense {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, rng: &mut Rng, d_in: usize, d_out: usize) -> Result<Self> {
        let w = store.add(format!("{name}/w"), init::xavier(rng, &[d_in, d_out], d_in, d_out))?;
        let b = store.add(format!("{name}/b"), Tensor::zeros([1, d_out]))?;
        Ok(Self { w, b })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.w), g.param(self.b));
        dense(g, x, w, b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

/// One LSTM direction with input, forget, cell and output gates laid out
/// in that order along the `4 * hidden` axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Lstm {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b: ParamId,
    pub hidden: usize,
}

impl Lstm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, rng: &mut Rng, d_in: usize, hidden: usize) -> Result<Self> {
        let h4 = 4 * hidden;
        let w_ih = store.add(format!("{name}/w_ih"), init::xavier(rng, &[d_in, h4], d_in, h4))?;
        let w_hh = store.add(format!("{name}/w_hh"), init::xavier(rng, &[hidden, h4], hidden, h4))?;
        let mut bias = Tensor::zeros([1, h4]);
        for v in &mut bias.data_mut()[hidden..2 * hidden] {
            *v = T::one();
        }
        let b = store.add(format!("{name}/b"), bias)?;
        Ok(Self { w_ih, w_hh, b, hidden })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, dir: Direction) -> Result<Var> {
        let (w_ih, w_hh, b) = (g.param(self.w_ih), g.param(self.w_hh), g.param(self.b));
        lstm_sequence(g, x, w_ih, w_hh, b, self.hidden, dir)
    }
}

/// Runs an LSTM over `x [T, in]` from a zero state and returns the hidden
/// states `[T, hidden]`, row `t` holding the state after consuming frame `t`
/// in the chosen direction.
pub fn lstm_sequence<T: Real>(g: &mut Graph<'_, T>, x: Var, w_ih: Var, w_hh: Var, b: Var, hidden: usize, dir: Direction) -> Result<Var> {
    let steps = g.rows(x);
    if g.shape(w_hh) != [hidden, 4 * hidden] || g.cols(w_ih) != 4 * hidden {
        return Err(Error::Shape(format!("lstm weights {:?}/{:?} for hidden size {hidden}", g.shape(w_ih), g.shape(w_hh))));
    }
    let xw = g.matmul(x, w_ih)?;
    let xw = g.add_row(xw, b)?;
    let mut h: Option<Var> = None;
    let mut c: Option<Var> = None;
    let mut outs: Vec<Option<Var>> = alloc::vec![None; steps];
    let order: Vec<usize> = match dir {
        Direction::Forward => (0..steps).collect(),
        Direction::Backward => (0..steps).rev().collect(),
    };
    for t in order {
        let mut gates = g.slice_rows(xw, t, 1)?;
        if let Some(h_prev) = h {
            let rec = g.matmul(h_prev, w_hh)?;
            gates = g.add(gates, rec)?;
        }
        let i = g.slice_cols(gates, 0, hidden)?;
        let f = g.slice_cols(gates, hidden, hidden)?;
        let cand = g.slice_cols(gates, 2 * hidden, hidden)?;
        let o = g.slice_cols(gates, 3 * hidden, hidden)?;
        let i = g.sigmoid(i)?;
        let f = g.sigmoid(f)?;
        let cand = g.tanh(cand)?;
        let o = g.sigmoid(o)?;
        let ic = g.mul(i, cand)?;
        let c_new = match c {
            Some(c_prev) => {
                let fc = g.mul(f, c_prev)?;
                g.add(fc, ic)?
            }
            None => ic,
        };
        let tc = g.tanh(c_new)?;
        let h_new = g.mul(o, tc)?;
        outs[t] = Some(h_new);
        h = Some(h_new);
        c = Some(c_new);
    }
    let outs: Vec<Var> = outs.into_iter().map(|o| o.expect("every step visited")).collect();
    g.concat_rows(&outs)
}

/// Forward and backward LSTMs whose outputs are concatenated per frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BiLstm {
    pub fwd: Lstm,
    pub bwd: Lstm,
}

impl BiLstm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, rng: &mut Rng, d_in: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            fwd: Lstm::new(store, &format!("{name}/fwd"), rng, d_in, hidden)?,
            bwd: Lstm::new(store, &format!("{name}/bwd"), rng, d_in, hidden)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let f = self.fwd.forward(g, x, Direction::Forward)?;
        let b = self.bwd.forward(g, x, Direction::Backward)?;
        g.concat_cols(&[f, b])
    }
}
