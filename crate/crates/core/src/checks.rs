//! Finite-difference verification of every differentiable op and of the
//! full forecaster.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::{BoundStid, Mode, StidConfig, StidParams};
use crate::rng::{derive_seed, rng_from};
use crate::tensor::{concat_last, grad_check, scalar_fn, Tape, Tensor, Var};

pub const GRADCHECK_STEP: f64 = 1e-6;
pub const GRADCHECK_TOL: f64 = 1e-5;
const CASES: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct OpCheck {
    pub name: String,
    pub cases: usize,
    pub max_rel_err: f64,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= GRADCHECK_TOL
    }
}

#[derive(Debug, Clone, Default)]
pub struct GradcheckReport {
    pub ops: Vec<OpCheck>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.ops.iter().all(OpCheck::passed)
    }

    pub fn failures(&self) -> Vec<&OpCheck> {
        self.ops.iter().filter(|o| !o.passed()).collect()
    }

    pub fn max_rel_err(&self) -> f64 {
        self.ops.iter().map(|o| o.max_rel_err).fold(0.0, f64::max)
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
        .expect("shape and data agree")
}

/// Entries bounded away from zero, for ops with a kink there.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    random(rng, shape).map(|x| if x < 0.0 { x - 0.1 } else { x + 0.1 })
}

/// Reduces an op output to a scalar with fixed pseudo-random weights so
/// every output element contributes a distinct coefficient.
fn weighted<'t>(out: Var<'t>, seed: u64) -> Result<Var<'t>> {
    let shape = out.shape();
    let w = random(&mut rng_from(seed, &[0x3e1]), &shape);
    Ok(out.mul(&out.tape().constant(w))?.sum())
}

fn dims(rng: &mut ChaCha8Rng, n: usize, hi: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(1..=hi)).collect()
}

struct Suite {
    seed: u64,
    ops: Vec<OpCheck>,
}

impl Suite {
    fn record(&mut self, name: &str, errs: Vec<f64>) {
        self.ops.push(OpCheck {
            name: name.to_string(),
            cases: errs.len(),
            max_rel_err: errs.into_iter().fold(0.0, f64::max),
        });
    }

    /// Runs `case` for each of the random cases of op `name`; `case` returns
    /// the worst relative error over the op's inputs.
    fn op(&mut self, name: &str, case: impl Fn(&mut ChaCha8Rng, u64) -> Result<f64>) -> Result<()> {
        let mut errs = Vec::with_capacity(CASES);
        for c in 0..CASES {
            let case_seed = derive_seed(self.seed, &[name.len() as u64, c as u64, hash(name)]);
            let mut rng = rng_from(case_seed, &[]);
            errs.push(case(&mut rng, case_seed)?);
        }
        self.record(name, errs);
        Ok(())
    }
}

fn hash(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

/// Gradient check of every primitive and of the composite forecaster
/// (batch 2, 3 variables, `D = 8`, two encoder layers). `inject_fault`
/// swaps in a deliberately wrong derivative for `square`.
pub fn run_gradcheck(seed: u64, inject_fault: bool) -> Result<GradcheckReport> {
    let mut s = Suite { seed, ops: Vec::new() };
    let h = GRADCHECK_STEP;

    s.op("linear", |rng, k| {
        let (b, i, o) = (rng.random_range(1..4), rng.random_range(1..5), rng.random_range(1..5));
        let x = random(rng, &[b, i]);
        let w = random(rng, &[i, o]);
        let bias = random(rng, &[o]);
        let (xc, wc, bc) = (x.clone(), w.clone(), bias.clone());
        let ex = grad_check(
            |t: &Tape, v| weighted(v.linear(&t.constant(wc.clone()), &t.constant(bc.clone()))?, k),
            &x,
            h,
        )?;
        let (xc2, bc2) = (x.clone(), bias.clone());
        let ew = grad_check(
            |t: &Tape, v| weighted(t.constant(xc2.clone()).linear(&v, &t.constant(bc2.clone()))?, k),
            &w,
            h,
        )?;
        let eb = grad_check(
            |t: &Tape, v| weighted(t.constant(xc.clone()).linear(&t.constant(w.clone()), &v)?, k),
            &bias,
            h,
        )?;
        Ok(ex.max(ew).max(eb))
    })?;

    s.op("relu", |rng, k| {
        let shape = dims(rng, 2, 5);
        let x = off_zero(rng, &shape);
        grad_check(scalar_fn(move |_, v| weighted(v.relu(), k)), &x, h)
    })?;

    s.op("dropout", |rng, k| {
        let shape = dims(rng, 2, 6);
        let x = random(rng, &shape);
        grad_check(
            scalar_fn(move |_, v| {
                let mut r = rng_from(k, &[7]);
                weighted(v.dropout(0.3, true, &mut r)?, k)
            }),
            &x,
            h,
        )
    })?;

    for (name, kind) in [("add", 0), ("sub", 1), ("mul", 2)] {
        s.op(name, |rng, k| {
            let shape = dims(rng, 2, 5);
            let a = random(rng, &shape);
            let b = random(rng, &shape);
            let bc = b.clone();
            let ea = grad_check(
                |t: &Tape, v| {
                    let o = t.constant(bc.clone());
                    weighted(binary(kind, v, o)?, k)
                },
                &a,
                h,
            )?;
            let ac = a.clone();
            let eb = grad_check(
                |t: &Tape, v| {
                    let o = t.constant(ac.clone());
                    weighted(binary(kind, o, v)?, k)
                },
                &b,
                h,
            )?;
            Ok(ea.max(eb))
        })?;
    }

    s.op("scale", |rng, k| {
        let c = rng.random_range(-3.0..3.0);
        let shape = dims(rng, 2, 5);
        let x = random(rng, &shape);
        grad_check(scalar_fn(move |_, v| weighted(v.scale(c), k)), &x, h)
    })?;

    s.op("square", |rng, k| {
        let shape = dims(rng, 2, 5);
        let x = random(rng, &shape);
        grad_check(
            scalar_fn(move |_, v| weighted(if inject_fault { v.faulty_square() } else { v.square() }, k)),
            &x,
            h,
        )
    })?;

    s.op("abs", |rng, k| {
        let shape = dims(rng, 2, 5);
        let x = off_zero(rng, &shape);
        grad_check(scalar_fn(move |_, v| weighted(v.abs(), k)), &x, h)
    })?;

    s.op("sum", |rng, _| {
        let shape = dims(rng, 3, 4);
        let x = random(rng, &shape);
        grad_check(scalar_fn(|_, v| Ok(v.square().sum())), &x, h)
    })?;

    s.op("mean", |rng, _| {
        let shape = dims(rng, 3, 4);
        let x = random(rng, &shape);
        grad_check(scalar_fn(|_, v| Ok(v.square().mean())), &x, h)
    })?;

    s.op("reshape", |rng, k| {
        let shape = dims(rng, 3, 4);
        let x = random(rng, &shape);
        let flat = vec![shape[0] * shape[1], shape[2]];
        grad_check(scalar_fn(move |_, v| weighted(v.reshape(&flat)?, k)), &x, h)
    })?;

    s.op("broadcast_leading", |rng, k| {
        let copies = rng.random_range(1..4);
        let shape = dims(rng, 2, 4);
        let x = random(rng, &shape);
        grad_check(scalar_fn(move |_, v| weighted(v.broadcast_leading(copies)?, k)), &x, h)
    })?;

    s.op("gather_expand", |rng, k| {
        let rows = rng.random_range(2..6);
        let d = rng.random_range(1..5);
        let batch = rng.random_range(1..5);
        let repeat = rng.random_range(1..4);
        let index: Vec<usize> = (0..batch).map(|_| rng.random_range(0..rows)).collect();
        let x = random(rng, &[rows, d]);
        grad_check(scalar_fn(move |_, v| weighted(v.gather_expand(&index, repeat)?, k)), &x, h)
    })?;

    s.op("mean_axis1", |rng, k| {
        let shape = dims(rng, 3, 4);
        let x = random(rng, &shape);
        grad_check(scalar_fn(move |_, v| weighted(v.mean_axis1()?, k)), &x, h)
    })?;

    s.op("concat_last", |rng, k| {
        let lead = dims(rng, 2, 3);
        let widths = dims(rng, 3, 4);
        let parts: Vec<Tensor> = widths
            .iter()
            .map(|&w| random(rng, &[lead[0], lead[1], w]))
            .collect();
        let mut worst: f64 = 0.0;
        for i in 0..parts.len() {
            let others = parts.clone();
            let e = grad_check(
                |t: &Tape, v| {
                    let vars: Vec<Var<'_>> = others
                        .iter()
                        .enumerate()
                        .map(|(j, p)| if j == i { v } else { t.constant(p.clone()) })
                        .collect();
                    weighted(concat_last(&vars)?, k)
                },
                &parts[i],
                h,
            )?;
            worst = worst.max(e);
        }
        Ok(worst)
    })?;

    s.op("interleave_rows", |rng, k| {
        let shape = dims(rng, 2, 4);
        let a = random(rng, &shape);
        let b = random(rng, &shape);
        let bc = b.clone();
        let ea = grad_check(|t: &Tape, v| weighted(v.interleave_rows(&t.constant(bc.clone()))?, k), &a, h)?;
        let eb = grad_check(|t: &Tape, v| weighted(t.constant(a.clone()).interleave_rows(&v)?, k), &b, h)?;
        Ok(ea.max(eb))
    })?;

    s.op("cosine_matrix", |rng, k| {
        let shape = [rng.random_range(2..6), rng.random_range(1..5)];
        let x = off_zero(rng, &shape);
        grad_check(scalar_fn(move |_, v| weighted(v.cosine_matrix()?, k)), &x, h)
    })?;

    s.op("paired_cross_entropy", |rng, _| {
        let n = 2 * rng.random_range(1..4);
        let tau = rng.random_range(0.3..2.0);
        let x = random(rng, &[n, n]);
        let partner: Vec<usize> = (0..n).map(|i| i ^ 1).collect();
        grad_check(scalar_fn(move |_, v| v.paired_cross_entropy(&partner, tau)), &x, h)
    })?;

    s.op("log_softmax_last", |rng, k| {
        let shape = dims(rng, 2, 5);
        let x = random(rng, &shape).map(|v| 3.0 * v);
        grad_check(scalar_fn(move |_, v| weighted(v.log_softmax_last(), k)), &x, h)
    })?;

    stid_composite(&mut s)?;
    Ok(GradcheckReport { ops: s.ops })
}

fn binary<'t>(kind: u8, a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    match kind {
        0 => a.add(&b),
        1 => a.sub(&b),
        _ => a.mul(&b),
    }
}

/// Checks the gradient of a weighted sum of forecasts wrt each parameter
/// tensor of a small forecaster, in training mode with a fixed dropout mask.
fn stid_composite(s: &mut Suite) -> Result<()> {
    let config = StidConfig {
        n_vars: 3,
        n_history: 12,
        n_future: 12,
        n_channels: 1,
        steps_per_day: 24,
        embed_dim: 8,
        layers: 2,
        dropout: 0.15,
    };
    let seed = derive_seed(s.seed, &[0x5717]);
    let params = StidParams::init(&config, seed)?;
    let mut rng = rng_from(seed, &[1]);
    let x = random(&mut rng, &[2, 3, 12, 1]);
    let tod = [rng.random_range(0..24), rng.random_range(0..24)];
    let dow = [rng.random_range(0..7), rng.random_range(0..7)];
    let n_tensors = params.named().len();
    let mut errs = Vec::with_capacity(n_tensors);
    for slot in 0..n_tensors {
        let probe = params.named()[slot].1.clone();
        let f = scalar_fn(|t, v| {
            let model = params.bind(t, false);
            let mut vars = model.vars();
            vars[slot] = v;
            let model = BoundStid::from_vars(&config, &vars)?;
            let mut drop_rng = rng_from(seed, &[2]);
            let out = model.forward(t.constant(x.clone()), &tod, &dow, Mode::Train, &mut drop_rng)?;
            weighted(out.y, seed)
        });
        errs.push(grad_check(f, &probe, GRADCHECK_STEP)?);
    }
    s.record("stid_forward", errs);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_build_passes_every_op() {
        let report = run_gradcheck(0, false).unwrap();
        for op in &report.ops {
            assert!(op.passed(), "{} rel err {:e}", op.name, op.max_rel_err);
        }
        let names: Vec<&str> = report.ops.iter().map(|o| o.name.as_str()).collect();
        for expected in ["linear", "relu", "dropout", "cosine_matrix", "paired_cross_entropy", "stid_forward"] {
            assert!(names.contains(&expected), "{expected} missing");
        }
    }

    #[test]
    fn injected_fault_is_caught() {
        let report = run_gradcheck(1, true).unwrap();
        let failed: Vec<&str> = report.failures().iter().map(|o| o.name.as_str()).collect();
        assert_eq!(failed, ["square"]);
    }
}
