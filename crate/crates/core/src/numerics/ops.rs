//! Composite operators built from the differentiable primitives.

use super::graph::Var;
use super::tensor::Real;
use crate::error::{Error, Result};

/// Per-sample, per-channel normalization of `[N,C,H,W]` with a learned affine
/// (`gamma`, `beta` shaped `[C]`).
pub fn instance_norm<'g, T: Real>(
    x: Var<'g, T>,
    gamma: Var<'g, T>,
    beta: Var<'g, T>,
    eps: f64,
) -> Result<Var<'g, T>> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::shape("instance_norm", &s, &gamma.shape()));
    }
    let (n, c) = (s[0], s[1]);
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape("instance_norm", &s, &gamma.shape()));
    }
    let stat = [n, c, 1, 1];
    let centered = x.sub(x.mean_to(&stat)?)?;
    let var = centered.square().mean_to(&stat)?;
    let inv_std = var.add_scalar(eps).powf(-0.5);
    let normed = centered.mul(inv_std)?;
    let g = gamma.reshape(&[1, c, 1, 1])?;
    let b = beta.reshape(&[1, c, 1, 1])?;
    normed.mul(g)?.add(b)
}

/// Adds a `[C]` bias to `[N,C,H,W]`.
pub fn add_channel_bias<'g, T: Real>(x: Var<'g, T>, bias: Var<'g, T>) -> Result<Var<'g, T>> {
    let c = bias.shape();
    if c.len() != 1 {
        return Err(Error::shape("add_channel_bias", &x.shape(), &c));
    }
    x.add(bias.reshape(&[1, c[0], 1, 1])?)
}

/// Tiles `[N,K]` to `[N,K,H,W]` (each entry becomes a constant map).
pub fn tile_spatial<'g, T: Real>(v: Var<'g, T>, h: usize, w: usize) -> Result<Var<'g, T>> {
    let s = v.shape();
    if s.len() != 2 {
        return Err(Error::shape("tile_spatial", &s, &[h, w]));
    }
    v.reshape(&[s[0], s[1], 1, 1])?.expand(&[s[0], s[1], h, w])
}

/// Mean over the spatial axes: `[N,C,H,W]` -> `[N,C]`.
pub fn spatial_mean<'g, T: Real>(x: Var<'g, T>) -> Result<Var<'g, T>> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::shape("spatial_mean", &s, &[]));
    }
    x.mean_to(&[s[0], s[1], 1, 1])?.reshape(&[s[0], s[1]])
}

/// Sum over every axis except the leading one: `[N,...]` -> `[N]`.
pub fn per_sample_sum<'g, T: Real>(x: Var<'g, T>) -> Result<Var<'g, T>> {
    let s = x.shape();
    let n = *s.first().ok_or_else(|| Error::shape("per_sample_sum", &s, &[]))?;
    let mut target = vec![1; s.len()];
    target[0] = n;
    x.sum_to(&target)?.reshape(&[n])
}

/// Mean absolute value of all entries.
pub fn l1_mean<'g, T: Real>(x: Var<'g, T>) -> Var<'g, T> {
    x.abs().mean()
}

/// Sum of squares of all entries.
pub fn sq_l2<'g, T: Real>(x: Var<'g, T>) -> Var<'g, T> {
    x.square().sum()
}

/// Euclidean norm of all entries; `eps` keeps the derivative finite at 0.
pub fn l2<'g, T: Real>(x: Var<'g, T>, eps: f64) -> Var<'g, T> {
    sq_l2(x).add_scalar(eps).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Graph, Tensor};

    #[test]
    fn constant_channel_normalizes_to_zero() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[1, 2, 3, 3], 5.0));
        let gamma = g.constant(Tensor::ones(&[2]));
        let beta = g.constant(Tensor::zeros(&[2]));
        let y = instance_norm(x, gamma, beta, 1e-5).unwrap();
        assert!(y.value().max_abs() < 1e-12);
    }

    #[test]
    fn normalized_channels_have_unit_variance() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::normal(&[2, 3, 5, 5], 2.0, 3.0, &mut rng));
        let y = instance_norm(x, g.constant(Tensor::ones(&[3])), g.constant(Tensor::zeros(&[3])), 1e-5).unwrap();
        let v = y.value();
        for plane in v.data().chunks(25) {
            let m: f64 = plane.iter().sum::<f64>() / 25.0;
            let var: f64 = plane.iter().map(|p| (p - m).powi(2)).sum::<f64>() / 25.0;
            assert!(m.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn tiling_repeats_entries() {
        let g = Graph::<f64>::new();
        let v = g.constant(Tensor::from_f64(&[1, 2], &[0.25, 0.75]).unwrap());
        let t = tile_spatial(v, 2, 3).unwrap().value();
        assert_eq!(t.shape(), &[1, 2, 2, 3]);
        assert!(t.data()[..6].iter().all(|&x| x == 0.25));
        assert!(t.data()[6..].iter().all(|&x| x == 0.75));
    }
}
