//! Vector primitives with hand-written backward passes.

use crate::error::{Error, Result};

pub const DEFAULT_LN_EPS: f64 = 1e-5;

/// Saved forward state of a single layer-norm evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormCache {
    /// `(x - mean) / sqrt(popvar + eps)`
    pub normalized: Vec<f64>,
    pub inv_std: f64,
}

/// `gamma ⊙ (x - mean(x)) / sqrt(popvar(x) + eps) + beta`, with population variance.
pub fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64], eps: f64) -> Result<Vec<f64>> {
    layer_norm_forward(x, gamma, beta, eps).map(|(y, _)| y)
}

pub fn layer_norm_forward(
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> Result<(Vec<f64>, LayerNormCache)> {
    if x.is_empty() || x.len() != gamma.len() || x.len() != beta.len() {
        return Err(Error::dim(format!(
            "layer_norm lengths x={} gamma={} beta={}",
            x.len(),
            gamma.len(),
            beta.len()
        )));
    }
    if eps < 0.0 {
        return Err(Error::config(format!("layer_norm eps must be >= 0, got {eps}")));
    }
    let mut normalized = vec![0.0; x.len()];
    let inv_std = normalize_into(x, eps, &mut normalized);
    let y = normalized
        .iter()
        .zip(gamma.iter().zip(beta))
        .map(|(n, (g, b))| g * n + b)
        .collect();
    Ok((y, LayerNormCache { normalized, inv_std }))
}

/// Writes the standardized `x` into `out` and returns `1/sqrt(popvar + eps)`.
///
/// A constant input with `eps == 0` has zero variance; it is treated as already centred
/// (output all zeros, `inv_std = 0`) so that the affine shift alone survives.
#[inline]
pub fn normalize_into(x: &[f64], eps: f64, out: &mut [f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let denom = (var + eps).sqrt();
    let inv_std = if denom > 0.0 { 1.0 / denom } else { 0.0 };
    for (o, v) in out.iter_mut().zip(x) {
        *o = (v - mean) * inv_std;
    }
    inv_std
}

/// Accumulates affine gradients: `dgamma += dy ⊙ normalized`, `dbeta += dy`.
#[inline]
pub fn layer_norm_affine_grad(dy: &[f64], normalized: &[f64], dgamma: &mut [f64], dbeta: &mut [f64]) {
    for i in 0..dy.len() {
        dgamma[i] += dy[i] * normalized[i];
        dbeta[i] += dy[i];
    }
}

/// Gradient with respect to the layer-norm input.
pub fn layer_norm_input_grad(dy: &[f64], gamma: &[f64], cache: &LayerNormCache) -> Vec<f64> {
    let n = dy.len() as f64;
    let dxhat: Vec<f64> = dy.iter().zip(gamma).map(|(d, g)| d * g).collect();
    let mean_dxhat = dxhat.iter().sum::<f64>() / n;
    let mean_dxhat_xhat = dxhat
        .iter()
        .zip(&cache.normalized)
        .map(|(d, x)| d * x)
        .sum::<f64>()
        / n;
    dxhat
        .iter()
        .zip(&cache.normalized)
        .map(|(d, x)| cache.inv_std * (d - mean_dxhat - x * mean_dxhat_xhat))
        .collect()
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::dim("softmax of an empty vector"));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("softmax input contains non-finite logits".into()));
    }
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

#[inline]
pub fn softmax_in_place(values: &mut [f64]) {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in values.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in values.iter_mut() {
        *v /= total;
    }
}

/// Vector-Jacobian product of softmax: `p ⊙ (dp - <p, dp>)`.
pub fn softmax_backward(probs: &[f64], dprobs: &[f64]) -> Vec<f64> {
    let dot: f64 = probs.iter().zip(dprobs).map(|(p, d)| p * d).sum();
    probs.iter().zip(dprobs).map(|(p, d)| p * (d - dot)).collect()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// `tanh(u) = 1 - 2 / (e^{2u} + 1)`; one `exp` is about half the cost of libm `tanh`
/// and saturates cleanly at both ends. Absolute error stays at rounding level.
#[inline]
fn tanh_exp(u: f64) -> f64 {
    1.0 - 2.0 / ((2.0 * u).exp() + 1.0)
}

/// GELU, tanh form.
#[inline]
pub fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    0.5 * x * (1.0 + tanh_exp(u))
}

/// `(gelu(x), gelu'(x))` sharing one `exp`.
#[inline]
pub fn gelu_with_grad(x: f64) -> (f64, f64) {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = tanh_exp(u);
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    (0.5 * x * (1.0 + t), 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    gelu_with_grad(x).1
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layer_norm_matches_scalar_oracle() {
        // mean 2, population variance 2/3
        let mean = (1.0 + 2.0 + 3.0) / 3.0;
        let var: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0;
        let expect: Vec<f64> = [1.0, 2.0, 3.0].iter().map(|v| (v - mean) / var.sqrt()).collect();
        let y = layer_norm(&[1.0, 2.0, 3.0], &[1.0; 3], &[0.0; 3], 0.0).unwrap();
        for (a, b) in y.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((y[0] + 1.22474).abs() < 1e-5);
        assert_eq!(y[1], 0.0);
        assert!((y[2] - 1.22474).abs() < 1e-5);
    }

    #[test]
    fn constant_input_leaves_beta() {
        let beta = [0.1, 0.2, 0.3];
        let y = layer_norm(&[5.0; 3], &[1.0; 3], &beta, 1e-5).unwrap();
        assert_eq!(y, beta.to_vec());
        let y = layer_norm(&[5.0; 3], &[1.0; 3], &beta, 0.0).unwrap();
        assert_eq!(y, beta.to_vec());
    }

    #[test]
    fn zero_affine_gives_zero() {
        let y = layer_norm(&[3.0, -1.0, 8.0, 0.5], &[0.0; 4], &[0.0; 4], 1e-5).unwrap();
        assert!(y.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn layer_norm_length_mismatch() {
        assert!(matches!(
            layer_norm(&[1.0, 2.0], &[1.0], &[0.0, 0.0], 0.0),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(layer_norm(&[], &[], &[], 0.0), Err(Error::Dimension(_))));
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0; 4]).unwrap(), vec![0.25; 4]);
        let p = softmax(&[2.0, 1.0]).unwrap();
        let e = std::f64::consts::E;
        let oracle = e * e / (e * e + e);
        assert!((p[0] - oracle).abs() < 1e-15);
        assert!((p[0] - 0.731059).abs() < 1e-6);
        assert!((p[1] - 0.268941).abs() < 1e-6);
        assert!(matches!(softmax(&[]), Err(Error::Dimension(_))));
    }

    #[test]
    fn gelu_matches_libm_tanh_form() {
        assert!((gelu(1.0) - 0.841_191_990_607_477_4).abs() < 1e-12);
        for i in -400..=400 {
            let x = i as f64 * 0.05;
            let oracle = 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh());
            assert!((gelu(x) - oracle).abs() <= 4.0 * f64::EPSILON * (1.0 + x.abs()), "x={x}");
        }
        assert_eq!(gelu(-1e3), 0.0);
        assert_eq!(gelu(1e3), 1e3);
    }

    #[test]
    fn gelu_grad_matches_central_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x={x}");
            assert_eq!(gelu_with_grad(x), (gelu(x), gelu_grad(x)));
        }
    }

    #[test]
    fn layer_norm_input_grad_matches_central_difference() {
        let x = [0.3, -1.2, 2.0, 0.7, -0.1];
        let gamma = [1.1, 0.9, -0.5, 2.0, 0.3];
        let beta = [0.0; 5];
        let w = [0.2, -0.4, 1.0, 0.5, -1.5];
        let loss = |x: &[f64]| -> f64 {
            layer_norm(x, &gamma, &beta, 1e-5)
                .unwrap()
                .iter()
                .zip(&w)
                .map(|(a, b)| a * b)
                .sum()
        };
        let (_, cache) = layer_norm_forward(&x, &gamma, &beta, 1e-5).unwrap();
        let dx = layer_norm_input_grad(&w, &gamma, &cache);
        for i in 0..x.len() {
            let h = 1e-5;
            let mut xp = x;
            xp[i] += h;
            let mut xm = x;
            xm[i] -= h;
            let fd = (loss(&xp) - loss(&xm)) / (2.0 * h);
            assert!((fd - dx[i]).abs() < 1e-8);
        }
    }

    fn non_constant_vec() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-50.0f64..50.0, 2..40).prop_filter("non-constant", |v| {
            let first = v[0];
            v.iter().any(|x| (x - first).abs() > 1e-3)
        })
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_is_shift_invariant(
            logits in prop::collection::vec(-30.0f64..30.0, 1..20),
            shift in -100.0f64..100.0,
        ) {
            let p = softmax(&logits).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|v| *v > 0.0));
            let shifted: Vec<f64> = logits.iter().map(|v| v + shift).collect();
            let q = softmax(&shifted).unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            let argmax = |v: &[f64]| v.iter().enumerate().fold(0, |best, (i, x)| if *x > v[best] { i } else { best });
            prop_assert_eq!(argmax(&logits), argmax(&shifted));
        }

        #[test]
        fn layer_norm_standardizes(x in non_constant_vec()) {
            let n = x.len();
            let y = layer_norm(&x, &vec![1.0; n], &vec![0.0; n], 0.0).unwrap();
            let mean = y.iter().sum::<f64>() / n as f64;
            let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            prop_assert!(mean.abs() < 1e-12);
            prop_assert!((var - 1.0).abs() < 1e-9);
        }
    }
}
