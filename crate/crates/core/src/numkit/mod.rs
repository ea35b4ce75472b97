//! Dense `f64` numerics shared by the rest of the crate.

mod matrix;
mod rng;

pub use matrix::{axpy, dot, norm, Matrix};
pub use rng::Rng;

use crate::error::{Result, StgcError};

/// Norms below this are treated as zero by [`cosine_sim`].
pub const ZERO_NORM: f64 = 1e-12;

pub const LN_EPS: f64 = 1e-5;

/// Numerically stable softmax (max-subtracted).
pub fn softmax(z: &[f64]) -> Result<Vec<f64>> {
    if z.is_empty() {
        return Err(StgcError::Empty("softmax input"));
    }
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= sum);
    Ok(out)
}

pub fn log_softmax(z: &[f64]) -> Result<Vec<f64>> {
    if z.is_empty() {
        return Err(StgcError::Empty("log_softmax input"));
    }
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    Ok(z.iter().map(|v| v - lse).collect())
}

/// Result of a cosine similarity; `zero_norm` marks the degenerate case.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cosine {
    pub value: f64,
    pub zero_norm: bool,
}

/// `u·v / (‖u‖‖v‖)`, or `0` with `zero_norm` set when either norm is below
/// [`ZERO_NORM`].
pub fn cosine_sim(u: &[f64], v: &[f64]) -> Result<Cosine> {
    if u.len() != v.len() {
        return Err(StgcError::Shape(format!(
            "cosine of lengths {} and {}",
            u.len(),
            v.len()
        )));
    }
    let (nu, nv) = (norm(u), norm(v));
    if nu < ZERO_NORM || nv < ZERO_NORM {
        return Ok(Cosine {
            value: 0.0,
            zero_norm: true,
        });
    }
    let c = dot(u, v) / (nu * nv);
    Ok(Cosine {
        value: c.clamp(-1.0, 1.0),
        zero_norm: false,
    })
}

/// Sample Pearson correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(StgcError::Shape(format!(
            "pearson of lengths {} and {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(StgcError::Precondition(
            "pearson needs at least two points".into(),
        ));
    }
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    let scale_x = x.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1.0);
    let scale_y = y.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1.0);
    if sxx <= 1e-24 * scale_x * scale_x * x.len() as f64 {
        return Err(StgcError::DegenerateVariance { which: "x" });
    }
    if syy <= 1e-24 * scale_y * scale_y * y.len() as f64 {
        return Err(StgcError::DegenerateVariance { which: "y" });
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

pub fn mean(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().sum::<f64>() / x.len() as f64
}

/// Population standard deviation.
pub fn std_dev(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    let m = mean(x);
    (x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / x.len() as f64).sqrt()
}

/// Indices of the `k` largest entries, in descending order of value; ties go
/// to the lower index.
pub fn argtopk(x: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[b].total_cmp(&x[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + inner.tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let d_inner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
}

/// Cached values needed to differentiate a layer norm of one row.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormCache {
    pub xhat: Vec<f64>,
    pub inv_std: f64,
}

/// `(x - mean) / sqrt(var + eps) * gain + bias` over one row.
pub fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64]) -> (Vec<f64>, LayerNormCache) {
    let m = mean(x);
    let var = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / x.len() as f64;
    let inv_std = 1.0 / (var + LN_EPS).sqrt();
    let xhat: Vec<f64> = x.iter().map(|v| (v - m) * inv_std).collect();
    let y = xhat
        .iter()
        .zip(gain)
        .zip(bias)
        .map(|((h, g), b)| h * g + b)
        .collect();
    (y, LayerNormCache { xhat, inv_std })
}

/// Backward through [`layer_norm`]: accumulates into `dgain`/`dbias` and
/// returns the input gradient.
pub fn layer_norm_backward(
    dy: &[f64],
    cache: &LayerNormCache,
    gain: &[f64],
    dgain: &mut [f64],
    dbias: &mut [f64],
) -> Vec<f64> {
    let n = dy.len() as f64;
    let mut dxhat = vec![0.0; dy.len()];
    for i in 0..dy.len() {
        dgain[i] += dy[i] * cache.xhat[i];
        dbias[i] += dy[i];
        dxhat[i] = dy[i] * gain[i];
    }
    let mean_d = dxhat.iter().sum::<f64>() / n;
    let mean_dx = dxhat
        .iter()
        .zip(&cache.xhat)
        .map(|(d, h)| d * h)
        .sum::<f64>()
        / n;
    dxhat
        .iter()
        .zip(&cache.xhat)
        .map(|(d, h)| cache.inv_std * (d - mean_d - h * mean_dx))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0; 4]).unwrap(), vec![0.25; 4]);
        let p = softmax(&[2.0, 1.0]).unwrap();
        // e^2 / (e^2 + e^1) evaluated directly
        let e2 = 2f64.exp();
        let e1 = 1f64.exp();
        assert!(close(p[0], e2 / (e2 + e1), 1e-15));
        assert!(close(p[0], 0.731059, 1e-6));
        assert!(close(p[1], 0.268941, 1e-6));
        let p = softmax(&[1000.0, 0.0]).unwrap();
        assert!(p.iter().all(|v| v.is_finite()));
        assert!(close(p[0], 1.0, 1e-12) && p[1] < 1e-300);
        assert!(softmax(&[]).is_err());
    }

    #[test]
    fn log_softmax_matches_log_of_softmax() {
        let z = [0.3, -1.2, 2.5, 0.0];
        let p = softmax(&z).unwrap();
        let lp = log_softmax(&z).unwrap();
        for (a, b) in p.iter().zip(&lp) {
            assert!(close(a.ln(), *b, 1e-14));
        }
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn cosine_examples() {
        assert!(close(
            cosine_sim(&[1., 2., 3.], &[1., 2., 3.]).unwrap().value,
            1.0,
            1e-15
        ));
        assert_eq!(cosine_sim(&[1., 0.], &[0., 1.]).unwrap().value, 0.0);
        let c = cosine_sim(&[1., 0.], &[0.5, 0.5]).unwrap().value;
        assert!(close(c, 0.5 / (0.5f64 * 0.5 * 2.0).sqrt(), 1e-15));
        assert!(close(c, 0.707107, 1e-6));
        let z = cosine_sim(&[0., 0.], &[1., 1.]).unwrap();
        assert_eq!(
            z,
            Cosine {
                value: 0.0,
                zero_norm: true
            }
        );
        assert!(cosine_sim(&[1.], &[1., 2.]).is_err());
    }

    #[test]
    fn pearson_examples() {
        assert!(close(
            pearson(&[1., 2., 3.], &[2., 4., 6.]).unwrap(),
            1.0,
            1e-12
        ));
        assert!(close(
            pearson(&[1., 2., 3.], &[3., 2., 1.]).unwrap(),
            -1.0,
            1e-12
        ));
        // deviations (-1.5,-.5,.5,1.5) and (-1.5,.5,-.5,1.5): sxy = 4, sxx = syy = 5
        assert!(close(
            pearson(&[1., 2., 3., 4.], &[1., 3., 2., 4.]).unwrap(),
            0.8,
            1e-12
        ));
        assert!(matches!(
            pearson(&[1., 1., 1.], &[1., 2., 3.]),
            Err(StgcError::DegenerateVariance { which: "x" })
        ));
        assert!(pearson(&[1.], &[1.]).is_err());
    }

    #[test]
    fn argtopk_ties_prefer_lower_index() {
        assert_eq!(argtopk(&[0., 0., 0., 0.], 2), vec![0, 1]);
        assert_eq!(argtopk(&[2., 1., 0., -1.], 2), vec![0, 1]);
        assert_eq!(argtopk(&[0., 3., 3., 1.], 3), vec![1, 2, 3]);
    }

    #[test]
    fn reducers() {
        assert_eq!(mean(&[1., 2., 3.]), 2.0);
        assert!(close(std_dev(&[1., 3.]), 1.0, 1e-15));
        assert_eq!(std_dev(&[5.]), 0.0);
    }

    #[test]
    fn gelu_grad_matches_finite_difference() {
        for &x in &[-3.0, -1.0, -0.1, 0.0, 0.4, 2.0] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!(close(gelu_grad(x), fd, 1e-8), "x={x}");
        }
        assert_eq!(gelu(0.0), 0.0);
    }

    #[test]
    fn layer_norm_backward_matches_finite_difference() {
        let x = [0.3, -1.0, 2.0, 0.7];
        let g = [1.1, 0.9, -0.5, 1.3];
        let b = [0.1, 0.0, -0.2, 0.3];
        let w = [0.2, -0.7, 1.5, 0.4]; // loss = w · LN(x)
        let loss = |x: &[f64]| dot(&layer_norm(x, &g, &b).0, &w);
        let (_, cache) = layer_norm(&x, &g, &b);
        let mut dg = vec![0.0; 4];
        let mut db = vec![0.0; 4];
        let dx = layer_norm_backward(&w, &cache, &g, &mut dg, &mut db);
        for i in 0..4 {
            let h = 1e-6;
            let mut xp = x;
            let mut xm = x;
            xp[i] += h;
            xm[i] -= h;
            let fd = (loss(&xp) - loss(&xm)) / (2.0 * h);
            assert!(close(dx[i], fd, 1e-7), "i={i}: {} vs {fd}", dx[i]);
        }
        assert_eq!(db, w.to_vec());
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one(z in prop::collection::vec(-500.0f64..500.0, 1..2000)) {
            let p = softmax(&z).unwrap();
            let s: f64 = p.iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-12);
            prop_assert!(p.iter().all(|v| *v >= 0.0));
        }

        #[test]
        fn self_cosine_is_one(u in prop::collection::vec(-10.0f64..10.0, 1..64)) {
            prop_assume!(norm(&u) >= 1e-6);
            let c = cosine_sim(&u, &u).unwrap();
            prop_assert!((c.value - 1.0).abs() < 1e-12);
        }

        #[test]
        fn pearson_in_range(
            xy in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 3..40)
        ) {
            let (x, y): (Vec<f64>, Vec<f64>) = xy.into_iter().unzip();
            if let Ok(r) = pearson(&x, &y) {
                prop_assert!((-1.0..=1.0).contains(&r));
            }
        }
    }

    #[test]
    fn softmax_sums_to_one_at_max_length() {
        let mut rng = super::Rng::new(77);
        let z: Vec<f64> = (0..10_000).map(|_| 30.0 * rng.normal()).collect();
        let s: f64 = softmax(&z).unwrap().iter().sum();
        assert!((s - 1.0).abs() <= 1e-12);
    }
}
