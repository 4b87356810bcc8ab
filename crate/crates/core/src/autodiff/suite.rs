//! Finite-difference checks of every graph primitive, shared by tests and
//! the command-line gradient checker.

use alloc::string::String;
use alloc::vec::Vec;

use super::layers::{BiLstm, Dense, Direction, Lstm};
use super::{grad_check, GradCheckOptions, GradCheckReport, Graph, ParamStore, Tensor, Var};
use num_traits::Float;

use crate::error::Result;
use crate::rng::{self, Rng};

pub struct PrimitiveCheck {
    pub name: &'static str,
    /// Relative-error bound this primitive is held to.
    pub tolerance: f64,
    pub report: GradCheckReport,
}

impl PrimitiveCheck {
    pub fn passed(&self) -> bool {
        self.report.passed(self.tolerance)
    }
}

/// Fixed projection weights that turn any output into a scalar loss.
fn probe(n: usize) -> Vec<f64> {
    (0..n).map(|i| Float::sin(1.3 * i as f64 + 0.7)).collect()
}

/// Sum of `out` weighted by [`probe`].
pub fn project(g: &mut Graph<'_, f64>, out: Var) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    let w = g.input(Tensor::new(shape, probe(g.value(out).len()))?)?;
    let m = g.mul(out, w)?;
    g.sum(m)
}

/// Values with magnitude in `[0.2, 1]` and random sign, keeping kinks of
/// relu, abs and l1 out of reach of the difference step.
fn away_from_zero(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m: f64 = rng::uniform(rng, 0.2, 1.0);
        if rng::unit(rng) < 0.5 {
            -m
        } else {
            m
        }
    })
}

struct Suite {
    rng: Rng,
    opts: GradCheckOptions,
    out: Vec<PrimitiveCheck>,
}

impl Suite {
    fn run<F>(&mut self, name: &'static str, tolerance: f64, shapes: &[&[usize]], f: F) -> Result<()>
    where
        F: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
    {
        let mut store = ParamStore::new();
        for (i, s) in shapes.iter().enumerate() {
            store.add(alloc::format!("{name}/{i}"), away_from_zero(&mut self.rng, s))?;
        }
        self.run_store(name, tolerance, &store, f)
    }

    fn run_store<F>(&mut self, name: &'static str, tolerance: f64, store: &ParamStore<f64>, f: F) -> Result<()>
    where
        F: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
    {
        let ids: Vec<_> = store.ids().collect();
        let report = grad_check(
            store,
            |g| {
                let vars: Vec<Var> = ids.iter().map(|&id| g.param(id)).collect();
                let y = f(g, &vars)?;
                project(g, y)
            },
            &self.opts,
        )?;
        self.out.push(PrimitiveCheck { name, tolerance, report });
        Ok(())
    }
}

/// Runs the gradient check of every primitive and layer in 64-bit.
pub fn primitive_checks(seed: u64) -> Result<Vec<PrimitiveCheck>> {
    let mut s = Suite { rng: rng::seeded(seed), opts: GradCheckOptions::default(), out: Vec::new() };
    let act = 1e-6;
    let op = 1e-5;

    s.run("tanh", act, &[&[10, 10]], |g, v| g.tanh(v[0]))?;
    s.run("sigmoid", act, &[&[10, 10]], |g, v| g.sigmoid(v[0]))?;
    s.run("softsign", act, &[&[10, 10]], |g, v| g.softsign(v[0]))?;
    s.run("relu", act, &[&[10, 10]], |g, v| g.relu(v[0]))?;
    s.run("softmax", act, &[&[10, 10]], |g, v| g.softmax(v[0]))?;
    s.run("exp", act, &[&[10, 10]], |g, v| g.exp(v[0]))?;
    s.run("square", act, &[&[10, 10]], |g, v| g.square(v[0]))?;
    s.run("log_abs", act, &[&[10, 10]], |g, v| g.log_abs(v[0]))?;
    s.run("scale", op, &[&[3, 4]], |g, v| g.scale(v[0], -1.7))?;
    s.run("add_scalar", op, &[&[3, 4]], |g, v| {
        let y = g.add_scalar(v[0], 0.3)?;
        g.square(y)
    })?;

    s.run("matmul", op, &[&[4, 8], &[8, 3]], |g, v| g.matmul(v[0], v[1]))?;
    s.run("add", op, &[&[3, 4], &[3, 4]], |g, v| g.add(v[0], v[1]))?;
    s.run("sub", op, &[&[3, 4], &[3, 4]], |g, v| g.sub(v[0], v[1]))?;
    s.run("mul", op, &[&[3, 4], &[3, 4]], |g, v| g.mul(v[0], v[1]))?;
    s.run("add_row", op, &[&[3, 4], &[1, 4]], |g, v| g.add_row(v[0], v[1]))?;
    s.run("add_col", op, &[&[3, 4], &[3, 1]], |g, v| g.add_col(v[0], v[1]))?;
    s.run("mul_col", op, &[&[3, 4], &[3, 1]], |g, v| g.mul_col(v[0], v[1]))?;
    s.run("add_scalar_var", op, &[&[3, 4], &[1, 1]], |g, v| g.add_scalar_var(v[0], v[1]))?;
    s.run("sum", op, &[&[3, 4]], |g, v| {
        let y = g.sum(v[0])?;
        g.square(y)
    })?;
    s.run("mean", op, &[&[3, 4]], |g, v| {
        let y = g.mean(v[0])?;
        g.square(y)
    })?;

    s.run("slice_rows", op, &[&[5, 3]], |g, v| g.slice_rows(v[0], 1, 3))?;
    s.run("slice_cols", op, &[&[3, 5]], |g, v| g.slice_cols(v[0], 2, 2))?;
    s.run("concat_rows", op, &[&[2, 3], &[1, 3]], |g, v| g.concat_rows(&[v[0], v[1], v[0]]))?;
    s.run("concat_cols", op, &[&[3, 2], &[3, 1]], |g, v| g.concat_cols(&[v[1], v[0]]))?;
    s.run("transpose", op, &[&[3, 4]], |g, v| g.transpose(v[0]))?;
    s.run("reshape", op, &[&[3, 4]], |g, v| g.reshape(v[0], &[2, 6]))?;
    s.run("repeat_rows", op, &[&[1, 4]], |g, v| g.repeat_rows(v[0], 3))?;
    s.run("permute", op, &[&[2, 6]], |g, v| {
        // squeeze by two: out[2c + p, t] = x[c, 2t + p]
        let src = (0..12u32).map(|i| (i / 3 / 2) * 6 + (i % 3) * 2 + (i / 3) % 2).collect();
        g.permute(v[0], src, &[4, 3])
    })?;
    s.run("gather_rows", op, &[&[5, 3]], |g, v| g.gather_rows(v[0], &[3, 0, 3]))?;
    s.run("gather_cols", op, &[&[3, 5]], |g, v| g.gather_cols(v[0], &[4, 4, 1, 0]))?;
    s.run("embedding", op, &[&[5, 3]], |g, v| super::layers::embedding(g, v[0], 2))?;

    for (name, dilation, causal) in [("conv1d causal d1", 1, true), ("conv1d causal d4", 4, true), ("conv1d noncausal d2", 2, false)] {
        s.run(name, op, &[&[3, 11], &[2, 3, 3]], move |g, v| g.conv1d(v[0], v[1], dilation, causal))?;
    }
    s.run("conv1d pointwise", op, &[&[3, 6], &[4, 3, 1]], |g, v| g.conv1d(v[0], v[1], 1, true))?;
    s.run("conv_transpose1d", op, &[&[2, 4], &[2, 3, 6]], |g, v| g.conv_transpose1d(v[0], v[1], 4))?;

    s.run("l1_loss", op, &[&[3, 4]], |g, v| {
        let target: Vec<f64> = (0..12).map(|i| if i % 2 == 0 { 1.5 } else { -1.5 }).collect();
        g.l1_loss(v[0], &target)
    })?;
    s.run("cross_entropy", op, &[&[4, 6]], |g, v| g.cross_entropy(v[0], &[5, 0, 2, 2]))?;
    s.run("gaussian_nll", op, &[&[3, 4]], |g, v| g.gaussian_nll(v[0]))?;

    let mut store = ParamStore::new();
    let dense = Dense::new(&mut store, "dense", &mut s.rng, 8, 5)?;
    let x = store.add("dense/x", away_from_zero(&mut s.rng, &[4, 8]))?;
    perturb_zeros(&mut store, &mut s.rng);
    s.run_store("dense", op, &store, move |g, _| {
        let x = g.param(x);
        dense.forward(g, x)
    })?;

    for (name, dir) in [("lstm forward", Direction::Forward), ("lstm backward", Direction::Backward)] {
        let mut store = ParamStore::new();
        let lstm = Lstm::new(&mut store, "lstm", &mut s.rng, 3, 2)?;
        let x = store.add("lstm/x", away_from_zero(&mut s.rng, &[4, 3]))?;
        s.run_store(name, op, &store, move |g, _| {
            let x = g.param(x);
            lstm.forward(g, x, dir)
        })?;
    }
    let mut store = ParamStore::new();
    let bi = BiLstm::new(&mut store, "bilstm", &mut s.rng, 3, 2)?;
    let x = store.add("bilstm/x", away_from_zero(&mut s.rng, &[4, 3]))?;
    s.run_store("bilstm", op, &store, move |g, _| {
        let x = g.param(x);
        bi.forward(g, x)
    })?;

    Ok(s.out)
}

/// Gives zero-initialized biases a random value so their check is not
/// degenerate.
fn perturb_zeros(store: &mut ParamStore<f64>, rng: &mut Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            if *v == 0.0 {
                *v = rng::uniform(rng, -0.5, 0.5);
            }
        }
    }
}

/// One line per check, for reports.
pub fn describe(check: &PrimitiveCheck) -> String {
    alloc::format!(
        "{:<22} max rel error {:.3e} (bound {:.0e}) {}",
        check.name,
        check.report.max_rel_error(),
        check.tolerance,
        if check.passed() { "ok" } else { "FAILED" }
    )
}
