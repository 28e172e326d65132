//! Central-difference gradient checking.
//!
//! Perturbs one coordinate at a time with step `h` and compares the numeric
//! gradient against an analytic one. Errors are scaled by
//! `max(|analytic|, |numeric|, 1)`: check instances are built so gradients
//! have O(1) scale, and the unit floor keeps f32 forward noise from
//! dominating coordinates whose true derivative is near zero.
//!
//! [`op_battery`] runs the whole verification sweep — every differentiable
//! op, randomized instances, backward pass against central differences —
//! and reports the worst disagreement per op.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{CompGraph, NodeId};
use crate::rng::stage_rng;
use crate::tensor::Tensor;

/// Numeric gradient of a scalar function by central differences.
pub fn fd_gradient<F>(mut f: F, x: &Tensor, h: f32) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f32>,
{
    let mut grad = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)? as f64;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)? as f64;
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = ((up - down) / (2.0 * h as f64)) as f32;
    }
    Ok(grad)
}

/// Worst relative disagreement between two gradients.
pub fn max_rel_err(analytic: &Tensor, numeric: &Tensor) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| {
            let denom = a.abs().max(n.abs()).max(1.0) as f64;
            ((a - n).abs() as f64) / denom
        })
        .fold(0.0, f64::max)
}

/// Runs a full check: numeric gradient of `f` at `x` against `analytic`.
/// Returns the worst relative error.
pub fn check_scalar_fn<F>(f: F, x: &Tensor, analytic: &Tensor, h: f32) -> Result<f64>
where
    F: FnMut(&Tensor) -> Result<f32>,
{
    let numeric = fd_gradient(f, x, h)?;
    Ok(max_rel_err(analytic, &numeric))
}

/// Step used by [`op_battery`].
pub const BATTERY_STEP: f32 = 1e-3;

/// Worst finite-difference disagreement observed for one op kind.
#[derive(Debug, Clone, Copy)]
pub struct OpCheck {
    pub name: &'static str,
    pub worst_rel_err: f64,
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Shifts values out of the ±0.05 band around zero so no finite-difference
/// probe straddles the leaky-ReLU kink.
fn away_from_kink(t: Tensor) -> Tensor {
    t.map(|v| if v.abs() < 0.05 { v + 0.1 } else { v })
}

/// Dots the node with fixed random weights (magnitude ≥ 0.5) and sums, so
/// the op's full Jacobian is observable even when plain sums cancel (softmax
/// rows sum to one, for example).
fn weighted_sum(g: &mut CompGraph, node: NodeId, rng: &mut ChaCha8Rng) -> NodeId {
    let shape = g.shape_of(node).to_vec();
    let w = Tensor::from_fn(&shape, |_| {
        let magnitude = rng.gen_range(0.5..1.5f32);
        if rng.gen_bool(0.5) {
            magnitude
        } else {
            -magnitude
        }
    });
    let wn = g.constant(w);
    let prod = g.mul(node, wn).expect("weighting tensor matches the node shape");
    g.reduce_sum(prod).expect("reduce_sum accepts any shape")
}

/// Backprops the scalar `out` and FD-checks the gradient of every fed
/// input. Returns the worst relative disagreement.
fn check_instance(g: &mut CompGraph, out: NodeId, feeds: &[(&str, Tensor)]) -> Result<f64> {
    let feed_refs: Vec<(&str, &Tensor)> = feeds.iter().map(|(n, t)| (*n, t)).collect();
    g.forward(&feed_refs)?;
    let wrt: Vec<NodeId> = feeds
        .iter()
        .map(|(n, _)| g.input_id(n).expect("feeds use declared input names"))
        .collect();
    let grads = g.backward(out, &wrt)?;

    let mut worst = 0.0f64;
    for (i, (_, x)) in feeds.iter().enumerate() {
        let numeric = fd_gradient(
            |probe| {
                let fs: Vec<(&str, &Tensor)> = feeds
                    .iter()
                    .enumerate()
                    .map(|(j, (n, t))| (*n, if j == i { probe } else { t }))
                    .collect();
                g.forward(&fs)?;
                Ok(g.value(out)?.data()[0])
            },
            x,
            BATTERY_STEP,
        )?;
        worst = worst.max(max_rel_err(&grads.grads[wrt[i]], &numeric));
    }
    Ok(worst)
}

type OpBuilder = fn(usize, &mut ChaCha8Rng, &mut CompGraph) -> (NodeId, Vec<(&'static str, Tensor)>);

fn battery_case(name: &'static str, instances: usize, make: OpBuilder) -> Result<OpCheck> {
    let mut worst = 0.0f64;
    for k in 0..instances {
        let mut rng = stage_rng(k as u64, name);
        let mut g = CompGraph::new();
        let (out, feeds) = make(k, &mut rng, &mut g);
        debug_assert_eq!(g.shape_of(out).iter().product::<usize>(), 1);
        worst = worst.max(check_instance(&mut g, out, &feeds)?);
    }
    Ok(OpCheck { name, worst_rel_err: worst })
}

/// FD-verifies the backward pass of every differentiable op over `instances`
/// seeded random instances each (geometry and parameters vary per instance).
/// Returns per-op worst relative errors; callers assert their own tolerance.
pub fn op_battery(instances: usize) -> Result<Vec<OpCheck>> {
    const CONV_GEOMS: [(usize, usize, usize); 3] = [(3, 1, 0), (3, 1, 1), (4, 2, 1)];
    let cases: Vec<(&'static str, OpBuilder)> = vec![
        ("add", |k, rng, g| {
            let shape = [2 + k % 3, 3];
            let a = g.input("a", &shape);
            let b = g.input("b", &shape);
            let sum = g.add(a, b).unwrap();
            let out = weighted_sum(g, sum, rng);
            let ta = rand_tensor(rng, &shape, -2.0, 2.0);
            let tb = rand_tensor(rng, &shape, -2.0, 2.0);
            (out, vec![("a", ta), ("b", tb)])
        }),
        ("mul", |k, rng, g| {
            let shape = [2 + k % 3, 3];
            let a = g.input("a", &shape);
            let b = g.input("b", &shape);
            let prod = g.mul(a, b).unwrap();
            let out = weighted_sum(g, prod, rng);
            let ta = rand_tensor(rng, &shape, -2.0, 2.0);
            let tb = rand_tensor(rng, &shape, -2.0, 2.0);
            (out, vec![("a", ta), ("b", tb)])
        }),
        ("scale", |_, rng, g| {
            let shape = [2, 4];
            let x = g.input("x", &shape);
            let c = rng.gen_range(0.5..2.0f32) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let scaled = g.scale(x, c).unwrap();
            let out = weighted_sum(g, scaled, rng);
            (out, vec![("x", rand_tensor(rng, &shape, -2.0, 2.0))])
        }),
        ("exp", |_, rng, g| {
            let shape = [3, 3];
            let x = g.input("x", &shape);
            let e = g.exp(x).unwrap();
            let out = weighted_sum(g, e, rng);
            (out, vec![("x", rand_tensor(rng, &shape, -1.5, 1.5))])
        }),
        ("leaky_relu", |k, rng, g| {
            let shape = [4, 4];
            let slope = if k % 2 == 0 { 0.01 } else { 0.2 };
            let x = g.input("x", &shape);
            let y = g.leaky_relu(x, slope).unwrap();
            let out = weighted_sum(g, y, rng);
            let t = away_from_kink(rand_tensor(rng, &shape, -2.0, 2.0));
            (out, vec![("x", t)])
        }),
        ("sigmoid", |_, rng, g| {
            let shape = [3, 4];
            let x = g.input("x", &shape);
            let y = g.sigmoid(x).unwrap();
            let out = weighted_sum(g, y, rng);
            (out, vec![("x", rand_tensor(rng, &shape, -3.0, 3.0))])
        }),
        ("softmax", |k, rng, g| {
            let shape = [3 + k % 4];
            let x = g.input("x", &shape);
            let y = g.softmax(x).unwrap();
            let out = weighted_sum(g, y, rng);
            (out, vec![("x", rand_tensor(rng, &shape, -2.0, 2.0))])
        }),
        ("softmax_prob", |k, rng, g| {
            let n = 2 + k % 4;
            let x = g.input("x", &[n]);
            let out = g.softmax_prob(x, k % n).unwrap();
            (out, vec![("x", rand_tensor(rng, &[n], -2.0, 2.0))])
        }),
        ("cross_entropy_logits", |k, rng, g| {
            let n = 2 + k % 4;
            let x = g.input("x", &[n]);
            let out = g.cross_entropy_logits(x, k % n).unwrap();
            (out, vec![("x", rand_tensor(rng, &[n], -2.0, 2.0))])
        }),
        ("mse_loss", |_, rng, g| {
            let shape = [3, 3];
            let a = g.input("a", &shape);
            let b = g.input("b", &shape);
            let out = g.mse_loss(a, b).unwrap();
            let ta = rand_tensor(rng, &shape, -1.0, 1.0);
            let tb = rand_tensor(rng, &shape, -1.0, 1.0);
            (out, vec![("a", ta), ("b", tb)])
        }),
        ("reduce_sum", |k, rng, g| {
            let shape = [2, 2 + k % 3, 2];
            let x = g.input("x", &shape);
            let out = g.reduce_sum(x).unwrap();
            (out, vec![("x", rand_tensor(rng, &shape, -2.0, 2.0))])
        }),
        ("reduce_mean", |k, rng, g| {
            let shape = [2, 2 + k % 3, 2];
            let x = g.input("x", &shape);
            let out = g.reduce_mean(x).unwrap();
            (out, vec![("x", rand_tensor(rng, &shape, -2.0, 2.0))])
        }),
        ("gaussian_kl", |_, rng, g| {
            let shape = [4];
            let mu = g.input("mu", &shape);
            let logvar = g.input("logvar", &shape);
            let out = g.gaussian_kl(mu, logvar).unwrap();
            let tm = rand_tensor(rng, &shape, -1.0, 1.0);
            let tl = rand_tensor(rng, &shape, -1.0, 1.0);
            (out, vec![("mu", tm), ("logvar", tl)])
        }),
        ("affine", |k, rng, g| {
            let n_in = 3 + k % 3;
            let n_out = 2 + k % 2;
            let x = g.input("x", &[n_in]);
            let w = g.input("w", &[n_out, n_in]);
            let b = g.input("b", &[n_out]);
            let y = g.affine(x, w, b).unwrap();
            let out = weighted_sum(g, y, rng);
            let tx = rand_tensor(rng, &[n_in], -1.0, 1.0);
            let tw = rand_tensor(rng, &[n_out, n_in], -0.7, 0.7);
            let tb = rand_tensor(rng, &[n_out], -0.5, 0.5);
            (out, vec![("x", tx), ("w", tw), ("b", tb)])
        }),
        // Geometry cycles over the shapes the models use: same-size, valid,
        // and the stride-2 halving convolution.
        ("conv2d", |k, rng, g| {
            let (kk, stride, pad) = CONV_GEOMS[k % 3];
            let (ci, co, hw) = (1 + k % 2, 2, 6);
            let x = g.input("x", &[ci, hw, hw]);
            let w = g.input("w", &[co, ci, kk, kk]);
            let b = g.input("b", &[co]);
            let y = g.conv2d(x, w, b, stride, pad).unwrap();
            let out = weighted_sum(g, y, rng);
            let tx = rand_tensor(rng, &[ci, hw, hw], -1.0, 1.0);
            let tw = rand_tensor(rng, &[co, ci, kk, kk], -0.5, 0.5);
            let tb = rand_tensor(rng, &[co], -0.5, 0.5);
            (out, vec![("x", tx), ("w", tw), ("b", tb)])
        }),
        ("convt2d", |k, rng, g| {
            let (kk, stride, pad) = CONV_GEOMS[k % 3];
            let (ci, co, hw) = (1 + k % 2, 2, 4);
            let x = g.input("x", &[ci, hw, hw]);
            let w = g.input("w", &[ci, co, kk, kk]);
            let b = g.input("b", &[co]);
            let y = g.convt2d(x, w, b, stride, pad).unwrap();
            let out = weighted_sum(g, y, rng);
            let tx = rand_tensor(rng, &[ci, hw, hw], -1.0, 1.0);
            let tw = rand_tensor(rng, &[ci, co, kk, kk], -0.5, 0.5);
            let tb = rand_tensor(rng, &[co], -0.5, 0.5);
            (out, vec![("x", tx), ("w", tw), ("b", tb)])
        }),
        ("global_avg_pool", |_, rng, g| {
            let shape = [3, 4, 4];
            let x = g.input("x", &shape);
            let y = g.global_avg_pool(x).unwrap();
            let out = weighted_sum(g, y, rng);
            (out, vec![("x", rand_tensor(rng, &shape, -1.0, 1.0))])
        }),
        ("reshape", |_, rng, g| {
            let x = g.input("x", &[2, 3, 4]);
            let y = g.reshape(x, &[4, 6]).unwrap();
            let out = weighted_sum(g, y, rng);
            (out, vec![("x", rand_tensor(rng, &[2, 3, 4], -2.0, 2.0))])
        }),
    ];
    cases
        .into_iter()
        .map(|(name, make)| battery_case(name, instances, make))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovers_a_quadratic_gradient() {
        let x = Tensor::from_vec(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let f = |t: &Tensor| -> Result<f32> {
            Ok(t.data().iter().map(|&v| v * v).sum())
        };
        let analytic = x.scale(2.0);
        let err = check_scalar_fn(f, &x, &analytic, 1e-3).unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn flags_a_wrong_gradient() {
        let x = Tensor::from_vec(vec![2], vec![1.0, 1.0]).unwrap();
        let f = |t: &Tensor| -> Result<f32> { Ok(t.data().iter().sum()) };
        let wrong = Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap();
        let err = check_scalar_fn(f, &x, &wrong, 1e-3).unwrap();
        assert!(err > 0.3);
    }
}
