//! Adam with bias correction. Weight decay, when nonzero, enters as an L2
//! term added to the gradient before the moment updates.

use crate::scalar::Scalar;

use super::init::ParamSet;
use super::tensor::Tensor;
use super::NnError;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn new(lr: f64) -> Self {
        AdamConfig { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }

    pub fn with_weight_decay(mut self, wd: f64) -> Self {
        self.weight_decay = wd;
        self
    }
}

struct Slot<S: Scalar> {
    name: String,
    param: Tensor<S>,
    m: Vec<S>,
    v: Vec<S>,
}

/// Optimizer state: first/second moments per parameter plus the shared step
/// counter, bound to the trainable entries of one [`ParamSet`].
pub struct Adam<S: Scalar> {
    cfg: AdamConfig,
    slots: Vec<Slot<S>>,
    t: u64,
}

impl<S: Scalar> Adam<S> {
    pub fn new(params: &ParamSet<S>, cfg: AdamConfig) -> Self {
        let slots = params
            .trainable()
            .map(|(name, p)| Slot {
                name: name.to_string(),
                param: p.clone(),
                m: vec![S::zero(); p.len()],
                v: vec![S::zero(); p.len()],
            })
            .collect();
        Adam { cfg, slots, t: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn config(&self) -> AdamConfig {
        self.cfg
    }

    /// Apply one update from the gradients accumulated on the parameters.
    /// Parameters with no gradient this step are treated as zero-gradient.
    pub fn step(&mut self) -> Result<(), NnError> {
        self.t += 1;
        let t = self.t as i32;
        let b1 = S::from_f64(self.cfg.beta1);
        let b2 = S::from_f64(self.cfg.beta2);
        let lr = S::from_f64(self.cfg.lr);
        let eps = S::from_f64(self.cfg.eps);
        let wd = S::from_f64(self.cfg.weight_decay);
        let bc1 = S::one() - b1.powi(t);
        let bc2 = S::one() - b2.powi(t);
        for slot in &mut self.slots {
            let grad = slot.param.grad();
            slot.param.update_values(|w| {
                for i in 0..w.len() {
                    let mut g = grad.as_ref().map_or(S::zero(), |g| g[i]);
                    if wd != S::zero() {
                        g = g + wd * w[i];
                    }
                    slot.m[i] = b1 * slot.m[i] + (S::one() - b1) * g;
                    slot.v[i] = b2 * slot.v[i] + (S::one() - b2) * g * g;
                    let m_hat = slot.m[i] / bc1;
                    let v_hat = slot.v[i] / bc2;
                    w[i] = w[i] - lr * m_hat / (v_hat.sqrt() + eps);
                }
            });
        }
        Ok(())
    }

    /// Moment tensors and step counter for checkpointing, namespaced `adam/`.
    pub fn state_entries(&self) -> Vec<(String, Vec<usize>, Vec<S>)> {
        let mut out = Vec::new();
        for slot in &self.slots {
            let shape = slot.param.shape().to_vec();
            out.push((format!("adam/m/{}", slot.name), shape.clone(), slot.m.clone()));
            out.push((format!("adam/v/{}", slot.name), shape, slot.v.clone()));
        }
        out
    }

    /// Restore moments and the step counter from checkpoint entries.
    pub fn restore(
        &mut self,
        t: u64,
        mut lookup: impl FnMut(&str) -> Option<Vec<S>>,
    ) -> Result<(), NnError> {
        self.t = t;
        for slot in &mut self.slots {
            let m = lookup(&format!("adam/m/{}", slot.name))
                .ok_or_else(|| NnError::Checkpoint(format!("missing adam/m/{}", slot.name)))?;
            let v = lookup(&format!("adam/v/{}", slot.name))
                .ok_or_else(|| NnError::Checkpoint(format!("missing adam/v/{}", slot.name)))?;
            if m.len() != slot.m.len() || v.len() != slot.v.len() {
                return Err(NnError::Checkpoint(format!("adam state size mismatch for {}", slot.name)));
            }
            slot.m = m;
            slot.v = v;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_param(v: f64) -> (ParamSet<f64>, Tensor<f64>) {
        let mut ps = ParamSet::new();
        let p = ps.register("w", Tensor::parameter(&[1], vec![v]));
        (ps, p)
    }

    #[test]
    fn first_step_magnitude_is_lr_regardless_of_gradient_scale() {
        for &gscale in &[1e-6, 1.0, 1e6] {
            let (ps, p) = single_param(0.0);
            let mut opt = Adam::new(&ps, AdamConfig::new(0.01));
            p.accumulate_grad(|g| g[0] = gscale);
            opt.step().unwrap();
            let w = p.values()[0];
            assert!((w.abs() - 0.01).abs() < 1e-4, "gscale {gscale}: step {w}");
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged_but_counts_step() {
        let (ps, p) = single_param(1.5);
        let mut opt = Adam::new(&ps, AdamConfig::new(0.1));
        opt.step().unwrap();
        assert_eq!(p.values()[0], 1.5);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn descends_quadratic_to_near_zero() {
        // f(w) = w^2 from w=1, lr=0.1: 100 steps land well inside |w| < 0.2.
        let (ps, p) = single_param(1.0);
        let mut opt = Adam::new(&ps, AdamConfig::new(0.1));
        for _ in 0..100 {
            let w = p.values()[0];
            p.zero_grad();
            p.accumulate_grad(|g| g[0] = 2.0 * w);
            opt.step().unwrap();
        }
        assert!(p.values()[0].abs() < 0.2, "w = {}", p.values()[0]);
    }
}
