//! Central finite differences against the analytic backward pass.
//!
//! The numeric side only ever evaluates forward values, so it shares no code
//! with any op's gradient.

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore, Session};
use super::tensor::Tensor;
use crate::error::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const DEFAULT_STEP: f64 = 1e-4;

/// Worst disagreement over all differentiable inputs of one instance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    /// `(input, entry)` of the worst disagreement.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// `|a − n| / max(|a|, |n|, floor)` where `floor = 1e-6 · max(1, largest |n| of the input)`.
///
/// The floor keeps entries whose true gradient is zero from turning round-off
/// into unbounded relative error.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> (f64, usize) {
    let scale = numeric.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let floor = 1e-6 * scale;
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .enumerate()
        .fold((0.0, 0), |(best, bi), (i, e)| if e > best { (e, i) } else { (best, bi) })
}

/// Compares `backward` with central differences of the scalar built by `f`.
///
/// `f` receives one leaf per entry of `inputs`; inputs whose flag in
/// `differentiable` is false enter as constants and are not perturbed.
pub fn check_gradients<F>(inputs: &[Tensor], differentiable: &[bool], h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |ts: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts
            .iter()
            .zip(differentiable)
            .map(|(t, &d)| if d { g.param(t.clone()) } else { g.input(t.clone()) })
            .collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .zip(differentiable)
        .map(|(t, &d)| if d { g.param(t.clone()) } else { g.input(t.clone()) })
        .collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut report = GradCheck { max_rel_err: 0.0, worst: (0, 0), checked: 0 };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, &d) in differentiable.iter().enumerate() {
        if !d {
            continue;
        }
        let analytic = grads
            .get(vars[k])
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        let mut numeric = vec![0.0; inputs[k].len()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let x0 = inputs[k].data[i];
            work[k].data[i] = x0 + h;
            let fp = eval(&work)?;
            work[k].data[i] = x0 - h;
            let fm = eval(&work)?;
            work[k].data[i] = x0;
            *slot = (fp - fm) / (2.0 * h);
        }
        let (err, at) = relative_error(&analytic, &numeric);
        report.checked += numeric.len();
        if err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst = (k, at);
        }
    }
    Ok(report)
}

/// Finite-difference check of a network's parameter gradients.
///
/// At most `max_entries` evenly spaced entries of each parameter in `ids`
/// are perturbed; `f` builds the scalar loss in the given session.
pub fn check_param_gradients<F>(
    store: &ParamStore,
    ids: &[ParamId],
    h: f64,
    max_entries: usize,
    f: F,
) -> Result<GradCheck>
where
    F: Fn(&mut Session) -> Result<Var>,
{
    let selected = |id: ParamId| id_in(ids, id);
    let mut s = Session::with_trainable(store, selected);
    let loss = f(&mut s)?;
    let analytic = s.gradients(loss)?;
    drop(s);

    let eval = |st: &ParamStore| -> Result<f64> {
        let mut s = Session::frozen(st);
        let l = f(&mut s)?;
        Ok(s.graph.value(l).item())
    };
    let mut work = store.clone();
    let mut report = GradCheck { max_rel_err: 0.0, worst: (0, 0), checked: 0 };
    for (k, &id) in ids.iter().enumerate() {
        let len = store.get(id).len();
        let stride = len.div_ceil(max_entries.max(1)).max(1);
        let entries: Vec<usize> = (0..len).step_by(stride).collect();
        let full = analytic
            .iter()
            .find(|(a, _)| *a == id)
            .map(|(_, g)| g.clone())
            .unwrap_or_else(|| vec![0.0; len]);
        let mut a = Vec::with_capacity(entries.len());
        let mut n = Vec::with_capacity(entries.len());
        for &i in &entries {
            let x0 = store.get(id).data[i];
            work.get_mut(id).data[i] = x0 + h;
            let fp = eval(&work)?;
            work.get_mut(id).data[i] = x0 - h;
            let fm = eval(&work)?;
            work.get_mut(id).data[i] = x0;
            a.push(full[i]);
            n.push((fp - fm) / (2.0 * h));
        }
        let (err, at) = relative_error(&a, &n);
        report.checked += entries.len();
        if err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst = (k, entries[at]);
        }
    }
    Ok(report)
}

fn id_in(ids: &[ParamId], id: ParamId) -> bool {
    ids.contains(&id)
}

/// Outcome of one op's randomized check.
#[derive(Clone, Debug)]
pub struct OpCheck {
    pub op: &'static str,
    pub instances: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

type Builder = fn(&mut Graph, &[Var]) -> Result<Var>;

/// Instance: inputs, differentiability flags, scalarized op.
type Instance = (Vec<Tensor>, Vec<bool>, Builder);

fn randn(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// Weighted sum `Σ r ⊙ y` with the last input as the fixed weights `r`.
fn project(g: &mut Graph, y: Var, r: Var) -> Result<Var> {
    let m = g.mul(y, r)?;
    g.sum(m)
}

/// Random-weights tensor matching `shape`.
fn weights(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

/// Distance from `u` to the nearest integer.
fn integer_gap(u: f64) -> f64 {
    (u - u.round()).abs()
}

/// A transform whose sample points all sit at least `margin` away from cell
/// boundaries, so small perturbations never cross a kink of the kernel.
fn boundary_free_theta(r: usize, margin: f64, rng: &mut ChaCha8Rng) -> [f64; 12] {
    use crate::voxel::{voxel_center, AffineParams};
    loop {
        let mut p = AffineParams::IDENTITY;
        for v in p.iter_mut() {
            *v += rng.gen_range(-0.35..0.35);
        }
        let th = AffineParams::from_slice(&p);
        let ok = (0..r).all(|x| {
            (0..r).all(|y| {
                (0..r).all(|z| {
                    let s = th.apply([voxel_center(x, r), voxel_center(y, r), voxel_center(z, r)]);
                    s.iter()
                        .all(|&c| integer_gap(((c + 1.0) * r as f64 - 1.0) * 0.5) > margin)
                })
            })
        });
        if ok {
            return p;
        }
    }
}

fn instance(op: &'static str, rng: &mut ChaCha8Rng) -> Instance {
    match op {
        "dense" => (
            vec![randn(vec![3, 4], rng), randn(vec![5, 4], rng), randn(vec![5], rng), weights(vec![3, 5], rng)],
            vec![true, true, true, false],
            |g, v| {
                let y = g.dense(v[0], v[1], Some(v[2]))?;
                project(g, y, v[3])
            },
        ),
        "dense_nobias" => (
            vec![randn(vec![2, 6], rng), randn(vec![6, 6], rng), weights(vec![2, 6], rng)],
            vec![true, true, false],
            |g, v| {
                let y = g.dense(v[0], v[1], None)?;
                project(g, y, v[2])
            },
        ),
        "matmul" => (
            vec![randn(vec![3, 4], rng), randn(vec![4, 2], rng), weights(vec![3, 2], rng)],
            vec![true, true, false],
            |g, v| {
                let y = g.matmul(v[0], v[1])?;
                project(g, y, v[2])
            },
        ),
        "conv3" => (
            vec![
                randn(vec![2, 2, 4, 4, 4], rng),
                randn(vec![3, 2, 4, 4, 4], rng),
                randn(vec![3], rng),
                weights(vec![2, 3, 2, 2, 2], rng),
            ],
            vec![true, true, true, false],
            |g, v| {
                let y = g.conv3(v[0], v[1], Some(v[2]), 2, 1)?;
                project(g, y, v[3])
            },
        ),
        "conv3_transpose" => (
            vec![
                randn(vec![2, 3, 2, 2, 2], rng),
                randn(vec![3, 2, 4, 4, 4], rng),
                randn(vec![2], rng),
                weights(vec![2, 2, 4, 4, 4], rng),
            ],
            vec![true, true, true, false],
            |g, v| {
                let y = g.conv3_transpose(v[0], v[1], Some(v[2]), 2, 1)?;
                project(g, y, v[3])
            },
        ),
        "relu" => {
            // keep every input away from the kink
            let mut x = randn(vec![4, 5], rng);
            for v in x.data.iter_mut() {
                if v.abs() < 0.05 {
                    *v = 0.05f64.copysign(*v);
                }
            }
            (vec![x, weights(vec![4, 5], rng)], vec![true, false], |g, v| {
                let y = g.relu(v[0])?;
                project(g, y, v[1])
            })
        }
        "sigmoid" => (
            vec![Tensor::randn(vec![4, 5], 2.0, rng), weights(vec![4, 5], rng)],
            vec![true, false],
            |g, v| {
                let y = g.sigmoid(v[0])?;
                project(g, y, v[1])
            },
        ),
        "add" => (
            vec![randn(vec![3, 3], rng), randn(vec![3, 3], rng), weights(vec![3, 3], rng)],
            vec![true, true, false],
            |g, v| {
                let y = g.add(v[0], v[1])?;
                project(g, y, v[2])
            },
        ),
        "mul" => (
            vec![randn(vec![3, 3], rng), randn(vec![3, 3], rng), weights(vec![3, 3], rng)],
            vec![true, true, false],
            |g, v| {
                let y = g.mul(v[0], v[1])?;
                project(g, y, v[2])
            },
        ),
        "scale" => (
            vec![randn(vec![7], rng), weights(vec![7], rng)],
            vec![true, false],
            |g, v| {
                let y = g.scale(v[0], -1.7)?;
                project(g, y, v[1])
            },
        ),
        "sum" => (vec![randn(vec![2, 3, 4], rng)], vec![true], |g, v| {
            let s = g.sum(v[0])?;
            g.scale(s, 0.3)
        }),
        "frob_sq" => (vec![randn(vec![4, 4], rng)], vec![true], |g, v| g.frob_sq(v[0])),
        "bce" => (
            vec![
                Tensor::uniform(vec![3, 4], 0.05, 0.95, rng),
                // occupancy targets are binary
                Tensor::new(vec![3, 4], (0..12).map(|_| rng.gen_range(0..2) as f64).collect()),
            ],
            vec![true, false],
            |g, v| {
                let t = g.value(v[1]).clone();
                g.bce(v[0], &t)
            },
        ),
        "l2" => (
            vec![randn(vec![2, 12], rng), randn(vec![2, 12], rng), Tensor::uniform(vec![2, 12], 0.0, 1.0, rng)],
            vec![true, false, false],
            |g, v| {
                let t = g.value(v[1]).clone();
                let w = g.value(v[2]).data.clone();
                g.l2(v[0], &t, Some(&w))
            },
        ),
        "cross_entropy" => (
            vec![
                Tensor::uniform(vec![2, 3, 4], 0.05, 0.95, rng),
                Tensor::uniform(vec![2, 3, 4], 0.0, 1.0, rng),
            ],
            vec![true, false],
            |g, v| {
                let t = g.value(v[1]).clone();
                g.cross_entropy(v[0], &t)
            },
        ),
        "softmax" => (
            vec![randn(vec![2, 3, 5], rng), weights(vec![2, 3, 5], rng)],
            vec![true, false],
            |g, v| {
                let y = g.softmax(v[0])?;
                project(g, y, v[1])
            },
        ),
        "reshape" => (
            vec![randn(vec![2, 6], rng), weights(vec![3, 4], rng)],
            vec![true, false],
            |g, v| {
                let y = g.reshape(v[0], vec![3, 4])?;
                project(g, y, v[1])
            },
        ),
        "gather_rows" => (
            vec![randn(vec![3, 4], rng), weights(vec![5, 4], rng)],
            vec![true, false],
            |g, v| {
                let y = g.gather_rows(v[0], &[2, 0, 2, 1, 2])?;
                project(g, y, v[1])
            },
        ),
        "concat" => (
            vec![randn(vec![2, 3, 2], rng), randn(vec![2, 1, 2], rng), weights(vec![2, 4, 2], rng)],
            vec![true, true, false],
            |g, v| {
                let y = g.concat(&[v[0], v[1]], 1)?;
                project(g, y, v[2])
            },
        ),
        "max_axis" => {
            // distinct values per reduced slice, separated well beyond the step
            let mut x = Tensor::zeros(vec![2, 4, 3]);
            for o in 0..2 {
                for i in 0..3 {
                    let mut vals: Vec<f64> = (0..4).map(|m| m as f64 * 0.1).collect();
                    for k in (1..4).rev() {
                        vals.swap(k, rng.gen_range(0..=k));
                    }
                    for (m, v) in vals.into_iter().enumerate() {
                        x.data[(o * 4 + m) * 3 + i] = v + rng.gen_range(0.0..0.01);
                    }
                }
            }
            (vec![x, weights(vec![2, 3], rng)], vec![true, false], |g, v| {
                let y = g.max_axis(v[0], 1)?;
                project(g, y, v[1])
            })
        }
        "grid_sample3:volume" | "grid_sample3:theta" => {
            let r = 4;
            let mut theta = Tensor::zeros(vec![2, 12]);
            for n in 0..2 {
                theta.data[12 * n..12 * n + 12].copy_from_slice(&boundary_free_theta(r, 1e-3, rng));
            }
            let vol = Tensor::uniform(vec![2, r, r, r], 0.0, 1.0, rng);
            let flags = if op == "grid_sample3:volume" {
                vec![true, false, false]
            } else {
                vec![false, true, false]
            };
            (vec![vol, theta, weights(vec![2, r, r, r], rng)], flags, |g, v| {
                let y = g.grid_sample3(v[0], v[1])?;
                project(g, y, v[2])
            })
        }
        other => unreachable!("no gradient instance for {other}"),
    }
}

/// Every differentiable op, in report order.
pub const CHECKED_OPS: &[&str] = &[
    "dense",
    "dense_nobias",
    "conv3",
    "conv3_transpose",
    "relu",
    "sigmoid",
    "add",
    "mul",
    "scale",
    "bce",
    "l2",
    "sum",
    "frob_sq",
    "matmul",
    "cross_entropy",
    "softmax",
    "reshape",
    "gather_rows",
    "concat",
    "max_axis",
    "grid_sample3:volume",
    "grid_sample3:theta",
];

pub fn tolerance(op: &str) -> f64 {
    if op.starts_with("grid_sample3") {
        1e-3
    } else {
        1e-4
    }
}

/// Runs `instances` random checks of every op in [`CHECKED_OPS`].
pub fn op_suite(seed: u64, instances: usize) -> Result<Vec<OpCheck>> {
    let mut out = Vec::with_capacity(CHECKED_OPS.len());
    for (k, &op) in CHECKED_OPS.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((k as u64 + 1) << 32));
        let mut worst = 0.0f64;
        for _ in 0..instances {
            let (inputs, flags, f) = instance(op, &mut rng);
            let r = check_gradients(&inputs, &flags, DEFAULT_STEP, f)?;
            worst = worst.max(r.max_rel_err);
        }
        out.push(OpCheck { op, instances, max_rel_err: worst, tolerance: tolerance(op) });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes() {
        for c in op_suite(0, 3).unwrap() {
            assert!(c.passed(), "{}: {:.3e} > {:.0e}", c.op, c.max_rel_err, c.tolerance);
        }
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // binarize_st's backward is deliberately not the derivative of its forward
        let x = Tensor::new(vec![3], vec![0.2, 0.7, 0.9]);
        let r = check_gradients(&[x], &[true], DEFAULT_STEP, |g, v| {
            let b = g.binarize_st(v[0], 0.5)?;
            g.sum(b)
        })
        .unwrap();
        assert!(r.max_rel_err > 0.5);
    }

    #[test]
    fn relative_error_floor() {
        let (e, _) = relative_error(&[0.0, 1.0], &[1e-13, 1.0]);
        assert!(e < 1e-6);
        let (e, i) = relative_error(&[1.0, 2.0], &[1.0, 1.0]);
        assert_eq!(i, 1);
        assert!((e - 0.5).abs() < 1e-15);
    }
}
