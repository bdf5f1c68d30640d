//! Central finite-difference checks of reverse-mode gradients (64-bit).

use super::graph::{Graph, Var};
use super::ops;
use super::tensor::Tensor;
use super::{seeded, Rng};
use crate::error::{Error, Result};

/// Scalar-valued function of graph inputs.
pub type ScalarFn = dyn for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>;

/// Pins a closure to the higher-ranked signature of [`ScalarFn`].
pub fn scalar_fn<F>(f: F) -> F
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>,
{
    f
}

pub const DEFAULT_STEP: f64 = 1e-5;

/// Outcome of one check: relative error per input and the worst of them.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub per_input: Vec<f64>,
    pub max_rel_error: f64,
}

fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut a.iter().zip(b).map(|(x, y)| x - y));
    let scale = norm(&mut a.iter().copied()).max(norm(&mut b.iter().copied()));
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

fn eval(f: &ScalarFn, inputs: &[Tensor<f64>]) -> Result<f64> {
    let g = Graph::new();
    // Inputs stay differentiable so functions that take inner gradients work.
    let vars: Vec<Var<f64>> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&g, &vars)?;
    if !out.shape().is_empty() {
        return Err(Error::shape("gradcheck", &out.shape(), &[]));
    }
    Ok(out.value().item())
}

/// Compares `d f / d inputs` from the tape against central differences with
/// step `h`. Relative error is `|a - n| / max(|a|, |n|)` over each input's
/// whole gradient.
pub fn check(f: &ScalarFn, inputs: &[Tensor<f64>], h: f64) -> Result<GradCheck> {
    let g = Graph::new();
    let vars: Vec<Var<f64>> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&g, &vars)?;
    let analytic = g.grad(out, &vars, false)?;
    let mut per_input = Vec::with_capacity(inputs.len());
    let mut work = inputs.to_vec();
    for (i, a) in analytic.iter().enumerate() {
        let mut numeric = Vec::with_capacity(inputs[i].numel());
        for j in 0..inputs[i].numel() {
            let x0 = inputs[i].data()[j];
            work[i].data_mut()[j] = x0 + h;
            let up = eval(f, &work)?;
            work[i].data_mut()[j] = x0 - h;
            let down = eval(f, &work)?;
            work[i].data_mut()[j] = x0;
            numeric.push((up - down) / (2.0 * h));
        }
        per_input.push(rel_error(a.value().data(), &numeric));
    }
    let max_rel_error = per_input.iter().copied().fold(0.0, f64::max);
    Ok(GradCheck {
        per_input,
        max_rel_error,
    })
}

/// Reduces any output to a scalar through a fixed random projection, so a
/// check exercises the full vector-Jacobian product.
pub fn project<'g>(out: Var<'g, f64>, seed: u64) -> Result<Var<'g, f64>> {
    let r = Tensor::uniform(&out.shape(), -1.0, 1.0, &mut seeded(seed));
    Ok(out.mul(out.graph().constant(r))?.sum())
}

/// A named operator check with its random inputs.
pub struct Case {
    pub name: &'static str,
    pub inputs: Vec<Tensor<f64>>,
    pub f: Box<ScalarFn>,
}

fn case(
    name: &'static str,
    shapes: &[&[usize]],
    rng: &mut Rng,
    f: impl for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>> + 'static,
) -> Case {
    Case {
        name,
        inputs: shapes.iter().map(|s| Tensor::uniform(s, -1.0, 1.0, rng)).collect(),
        f: Box::new(f),
    }
}

/// One small random instance (at most 64 elements per input) for every
/// differentiable operator the models and losses use, plus a composite and a
/// second-order case.
pub fn operator_cases(seed: u64) -> Vec<Case> {
    let mut rng = seeded(seed);
    let r = &mut rng;
    vec![
        case("add_broadcast", &[&[2, 3, 1], &[1, 3, 4]], r, |_, v| project(v[0].add(v[1])?, 1)),
        case("sub_broadcast", &[&[2, 1, 4], &[2, 3, 4]], r, |_, v| project(v[0].sub(v[1])?, 2)),
        case("mul_broadcast", &[&[3, 4], &[1, 4]], r, |_, v| project(v[0].mul(v[1])?, 3)),
        case("scalar_ops", &[&[5, 3]], r, |_, v| project(v[0].scale(-1.7).add_scalar(0.3), 4)),
        case("powf", &[&[12]], r, |_, v| project(v[0].square().add_scalar(0.5).powf(-0.5), 5)),
        case("sqrt", &[&[12]], r, |_, v| project(v[0].square().add_scalar(0.1).sqrt(), 6)),
        case("relu", &[&[4, 4]], r, |_, v| project(v[0].relu(), 7)),
        case("leaky_relu", &[&[4, 4]], r, |_, v| project(v[0].leaky_relu(0.2), 8)),
        case("sigmoid", &[&[4, 4]], r, |_, v| project(v[0].sigmoid(), 9)),
        case("tanh", &[&[4, 4]], r, |_, v| project(v[0].tanh(), 10)),
        case("abs", &[&[4, 4]], r, |_, v| project(v[0].abs(), 11)),
        case("sum_to", &[&[2, 3, 4]], r, |_, v| project(v[0].sum_to(&[1, 3, 1])?, 12)),
        case("mean_to", &[&[2, 3, 4]], r, |_, v| project(v[0].mean_to(&[2, 1, 4])?, 13)),
        case("expand", &[&[1, 3, 1]], r, |_, v| project(v[0].expand(&[2, 3, 5])?, 14)),
        case("reshape", &[&[2, 6]], r, |_, v| project(v[0].reshape(&[3, 4])?.square(), 15)),
        case("concat_channels", &[&[2, 1, 2, 2], &[2, 3, 2, 2]], r, |g, v| {
            project(g.concat(&[v[0], v[1]], 1)?.square(), 16)
        }),
        case("narrow", &[&[2, 5, 3]], r, |_, v| project(v[0].narrow(1, 1, 3)?, 17)),
        case("embed", &[&[2, 2, 3]], r, |_, v| project(v[0].embed(1, 2, 5)?, 18)),
        case("conv2d_s1_p1", &[&[1, 2, 4, 4], &[3, 2, 3, 3]], r, |_, v| {
            project(v[0].conv2d(v[1], 1, 1)?, 19)
        }),
        case("conv2d_s2_p1", &[&[2, 2, 4, 4], &[2, 2, 4, 4]], r, |_, v| {
            project(v[0].conv2d(v[1], 2, 1)?, 20)
        }),
        case("conv2d_s1_p3_k7", &[&[1, 1, 4, 4], &[1, 1, 7, 7]], r, |_, v| {
            project(v[0].conv2d(v[1], 1, 3)?, 21)
        }),
        case("conv_transpose2d", &[&[1, 2, 2, 2], &[2, 2, 4, 4]], r, |_, v| {
            project(v[0].conv_transpose2d(v[1], 2, 1, (4, 4))?, 22)
        }),
        case("instance_norm", &[&[2, 2, 3, 3], &[2], &[2]], r, |_, v| {
            project(ops::instance_norm(v[0], v[1], v[2], 1e-5)?, 23)
        }),
        case("add_channel_bias", &[&[2, 3, 2, 2], &[3]], r, |_, v| {
            project(ops::add_channel_bias(v[0], v[1])?, 24)
        }),
        case("tile_spatial", &[&[2, 3]], r, |_, v| project(ops::tile_spatial(v[0], 2, 3)?, 25)),
        case("spatial_mean", &[&[2, 3, 2, 2]], r, |_, v| project(ops::spatial_mean(v[0])?, 26)),
        case("per_sample_sum", &[&[3, 2, 2, 2]], r, |_, v| {
            project(ops::per_sample_sum(v[0].square())?, 27)
        }),
        case("l1_mean", &[&[4, 4]], r, |_, v| Ok(ops::l1_mean(v[0]))),
        case("sq_l2", &[&[4, 4]], r, |_, v| Ok(ops::sq_l2(v[0]))),
        case("l2", &[&[4, 4]], r, |_, v| Ok(ops::l2(v[0], 1e-12))),
        case(
            "composite_5",
            &[&[1, 2, 4, 4], &[3, 2, 3, 3], &[3], &[3], &[1, 3]],
            r,
            |g, v| {
                let h = v[0].conv2d(v[1], 1, 1)?;
                let h = ops::instance_norm(h, v[2], v[3], 1e-5)?.leaky_relu(0.01);
                let t = ops::tile_spatial(v[4], 4, 4)?;
                let h = g.concat(&[h, t], 1)?.tanh();
                project(ops::spatial_mean(h)?.sigmoid(), 28)
            },
        ),
        case("second_order_norm", &[&[1, 1, 4, 4], &[2, 1, 3, 3], &[1, 2, 3, 3]], r, |g, v| {
            // Differentiates the input-gradient norm of a small conv critic.
            let x = v[0];
            let d = x.conv2d(v[1], 1, 1)?.tanh().conv2d(v[2], 1, 1)?.mean();
            let gx = g.grad(d, &[x], true)?[0];
            Ok(ops::l2(gx, 1e-12).add_scalar(-1.0).square())
        }),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOL: f64 = 1e-3;

    #[test]
    fn every_operator_matches_finite_differences() {
        let mut failures = Vec::new();
        for c in operator_cases(7) {
            assert!(c.inputs.iter().all(|t| t.numel() <= 64), "{} too large", c.name);
            let r = check(&*c.f, &c.inputs, DEFAULT_STEP).unwrap_or_else(|e| panic!("{}: {e}", c.name));
            if r.max_rel_error >= TOL {
                failures.push((c.name, r.max_rel_error));
            }
        }
        assert!(failures.is_empty(), "{failures:?}");
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // detach hides a dependency from the tape, so the check must fail.
        fn f<'g>(_: &'g Graph<f64>, v: &[Var<'g, f64>]) -> Result<Var<'g, f64>> {
            Ok(v[0].mul(v[0].detach())?.sum())
        }
        let x = Tensor::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap();
        let r = check(&f, &[x], DEFAULT_STEP).unwrap();
        assert!((r.max_rel_error - 0.5).abs() < 1e-6, "{r:?}");
    }

    #[test]
    fn disconnected_input_has_zero_error() {
        fn f<'g>(_: &'g Graph<f64>, v: &[Var<'g, f64>]) -> Result<Var<'g, f64>> {
            Ok(v[0].sum())
        }
        let r = check(&f, &[Tensor::ones(&[2]), Tensor::ones(&[3])], DEFAULT_STEP).unwrap();
        assert!(r.max_rel_error < 1e-9);
    }
}
