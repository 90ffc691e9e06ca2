//! Central finite-difference oracle for gradients.
//!
//! The oracle only ever evaluates the forward pass, so it stays independent of
//! the backward closures it is used to check.

use crate::scalar::Scalar;

use super::tensor::Tensor;

/// Relative error between an analytic gradient entry and its central
/// finite-difference estimate, with an absolute floor so near-zero entries
/// compare on absolute terms.
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Check d(loss)/d(input) for every listed input of a scalar-valued graph.
///
/// `build` must construct the full forward graph from the current values of
/// the inputs and return the scalar loss tensor. Returns the worst relative
/// error observed across all coordinates.
pub fn check_gradients<S: Scalar>(
    inputs: &[&Tensor<S>],
    h: f64,
    build: impl Fn() -> Tensor<S>,
) -> f64 {
    // Analytic pass.
    for t in inputs {
        t.zero_grad();
    }
    let loss = build();
    loss.backward().expect("gradcheck loss must be scalar");
    let analytic: Vec<Vec<f64>> = inputs
        .iter()
        .map(|t| {
            t.grad()
                .map(|g| g.iter().map(|v| v.as_f64()).collect())
                .unwrap_or_else(|| vec![0.0; t.len()])
        })
        .collect();
    drop(loss);

    // Numeric pass: nudge one coordinate at a time.
    let mut worst = 0.0f64;
    for (ti, t) in inputs.iter().enumerate() {
        for i in 0..t.len() {
            let orig = t.values()[i];
            t.update_values(|v| v[i] = orig + S::from_f64(h));
            let up = build().item().as_f64();
            t.update_values(|v| v[i] = orig - S::from_f64(h));
            let down = build().item().as_f64();
            t.update_values(|v| v[i] = orig);
            let numeric = (up - down) / (2.0 * h);
            let e = rel_err(analytic[ti][i], numeric);
            if e > worst {
                worst = e;
            }
        }
    }
    worst
}

/// Deterministic pseudo-random values for building small test tensors,
/// uniform in (lo, hi), biased away from zero when `avoid_zero` is set so
/// kinked ops (leaky-ReLU, L1) are probed away from their corners.
pub fn test_values(n: usize, seed: u64, lo: f64, hi: f64, avoid_zero: Option<f64>) -> Vec<f64> {
    let mut s = seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(0x2545f4914f6cdd1d);
    (0..n)
        .map(|_| {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            let u = (s >> 11) as f64 / (1u64 << 53) as f64;
            let mut v = lo + u * (hi - lo);
            if let Some(margin) = avoid_zero {
                if v.abs() < margin {
                    v = if v >= 0.0 { v + margin } else { v - margin };
                }
            }
            v
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tensor::dense;

    #[test]
    fn catches_correct_dense_gradient() {
        let x = Tensor::<f64>::parameter(&[2, 3], test_values(6, 1, -1.0, 1.0, None));
        let w = Tensor::<f64>::parameter(&[3, 2], test_values(6, 2, -1.0, 1.0, None));
        let b = Tensor::<f64>::parameter(&[2], test_values(2, 3, -1.0, 1.0, None));
        let worst = check_gradients(&[&x, &w, &b], 1e-5, || {
            dense(&x, &w, &b).unwrap().sigmoid().mean_all()
        });
        assert!(worst < 1e-4, "worst rel err {worst}");
    }
}
