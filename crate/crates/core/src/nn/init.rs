//! Parameter registry and initializers.
//!
//! Each parameter gets its own RNG stream derived from the init seed and the
//! parameter's name, so adding or reordering layers never perturbs the draws
//! of existing ones.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::scalar::Scalar;
use crate::util::{derive_seed, fnv1a64, stream};

use super::tensor::Tensor;

/// Named tensors of one model, in registration order. Trainable parameters
/// and persistent buffers (batch-norm running stats) live side by side;
/// buffers are the entries with `requires_grad() == false`.
pub struct ParamSet<S: Scalar> {
    entries: Vec<(String, Tensor<S>)>,
}

impl<S: Scalar> Default for ParamSet<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamSet<S> {
    pub fn new() -> Self {
        ParamSet { entries: Vec::new() }
    }

    pub fn register(&mut self, name: &str, t: Tensor<S>) -> Tensor<S> {
        assert!(
            self.entries.iter().all(|(n, _)| n != name),
            "duplicate parameter name: {name}"
        );
        self.entries.push((name.to_string(), t.clone()));
        t
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.iter().filter(|(_, t)| t.requires_grad())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn zero_grads(&self) {
        for (_, t) in self.trainable() {
            t.zero_grad();
        }
    }

    /// Total trainable element count.
    pub fn num_trainable_values(&self) -> usize {
        self.trainable().map(|(_, t)| t.len()).sum()
    }
}

fn param_rng(init_seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(init_seed, stream::INIT, fnv1a64(name.as_bytes())))
}

/// Fan-in/fan-out from a weight shape: dense [in, out]; 4-D kernels use
/// receptive-field fans (dim1 * k * k in, dim0 * k * k out).
pub fn fans(shape: &[usize]) -> (usize, usize) {
    match shape {
        [n_in, n_out] => (*n_in, *n_out),
        [a, b, k0, k1] => (b * k0 * k1, a * k0 * k1),
        _ => {
            let n: usize = shape.iter().product();
            (n, n)
        }
    }
}

/// Glorot (Xavier) uniform: U(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
pub fn glorot_uniform<S: Scalar>(shape: &[usize], init_seed: u64, name: &str) -> Tensor<S> {
    let (fan_in, fan_out) = fans(shape);
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let mut rng = param_rng(init_seed, name);
    let n: usize = shape.iter().product();
    let values: Vec<S> = (0..n).map(|_| S::from_f64(rng.gen_range(-a..a))).collect();
    Tensor::parameter(shape, values)
}

/// Gaussian N(0, sigma^2) via Box-Muller on the parameter's stream.
pub fn normal<S: Scalar>(shape: &[usize], sigma: f64, init_seed: u64, name: &str) -> Tensor<S> {
    let mut rng = param_rng(init_seed, name);
    let n: usize = shape.iter().product();
    let values: Vec<S> = (0..n)
        .map(|_| {
            let u1: f64 = 1.0 - rng.gen::<f64>();
            let u2: f64 = rng.gen();
            let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            S::from_f64(z * sigma)
        })
        .collect();
    Tensor::parameter(shape, values)
}

pub fn constant<S: Scalar>(shape: &[usize], v: f64) -> Tensor<S> {
    let n: usize = shape.iter().product();
    Tensor::parameter(shape, vec![S::from_f64(v); n])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn glorot_bound_holds_for_square_shape() {
        let t = glorot_uniform::<f64>(&[100, 100], 3, "w");
        let a = (6.0 / 200.0_f64).sqrt();
        assert!((a - 0.17320508).abs() < 1e-6);
        assert!(t.values().iter().all(|v| v.abs() < a));
    }

    #[test]
    fn same_seed_same_tensor() {
        let a = glorot_uniform::<f32>(&[8, 8], 42, "w");
        let b = glorot_uniform::<f32>(&[8, 8], 42, "w");
        assert_eq!(a.to_vec(), b.to_vec());
        let c = glorot_uniform::<f32>(&[8, 8], 43, "w");
        assert_ne!(a.to_vec(), c.to_vec());
    }

    #[test]
    fn empirical_variance_matches_formula_within_ten_percent() {
        let t = glorot_uniform::<f64>(&[100, 100], 7, "v");
        let vals = t.to_vec();
        let mean: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
        let var: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
        let want = 2.0 / 200.0;
        assert!((var - want).abs() < 0.1 * want, "var {var} vs {want}");
    }

    #[test]
    fn conv_fans_use_receptive_field() {
        assert_eq!(fans(&[32, 1, 4, 4]), (16, 512));
        assert_eq!(fans(&[64, 32, 4, 4]), (512, 1024));
    }
}
