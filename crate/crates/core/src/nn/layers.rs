//! Thin layer structs tying parameters to their ops.

use crate::scalar::Scalar;

use super::batchnorm::batchnorm;
use super::conv::{conv2d, deconv2d};
use super::init::{constant, glorot_uniform, ParamSet};
use super::tensor::{dense, Tensor};
use super::{Mode, NnError};

pub struct Dense<S: Scalar> {
    pub w: Tensor<S>,
    pub b: Tensor<S>,
}

impl<S: Scalar> Dense<S> {
    pub fn new(ps: &mut ParamSet<S>, name: &str, n_in: usize, n_out: usize, seed: u64) -> Self {
        let w = ps.register(&format!("{name}.w"), glorot_uniform(&[n_in, n_out], seed, &format!("{name}.w")));
        let b = ps.register(&format!("{name}.b"), constant(&[n_out], 0.0));
        Dense { w, b }
    }

    /// Registers with explicit weight/bias tensors (special initializations).
    pub fn with_params(ps: &mut ParamSet<S>, name: &str, w: Tensor<S>, b: Tensor<S>) -> Self {
        let w = ps.register(&format!("{name}.w"), w);
        let b = ps.register(&format!("{name}.b"), b);
        Dense { w, b }
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>, NnError> {
        dense(x, &self.w, &self.b)
    }
}

pub struct Conv2d<S: Scalar> {
    pub w: Tensor<S>,
    pub b: Tensor<S>,
    pub stride: usize,
    pub pad: usize,
}

impl<S: Scalar> Conv2d<S> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamSet<S>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        seed: u64,
    ) -> Self {
        let w = ps.register(
            &format!("{name}.w"),
            glorot_uniform(&[c_out, c_in, kernel, kernel], seed, &format!("{name}.w")),
        );
        let b = ps.register(&format!("{name}.b"), constant(&[c_out], 0.0));
        Conv2d { w, b, stride, pad }
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>, NnError> {
        conv2d(x, &self.w, &self.b, self.stride, self.pad)
    }
}

pub struct Deconv2d<S: Scalar> {
    pub w: Tensor<S>,
    pub b: Tensor<S>,
    pub stride: usize,
    pub pad: usize,
}

impl<S: Scalar> Deconv2d<S> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamSet<S>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        seed: u64,
    ) -> Self {
        let w = ps.register(
            &format!("{name}.w"),
            glorot_uniform(&[c_in, c_out, kernel, kernel], seed, &format!("{name}.w")),
        );
        let b = ps.register(&format!("{name}.b"), constant(&[c_out], 0.0));
        Deconv2d { w, b, stride, pad }
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>, NnError> {
        deconv2d(x, &self.w, &self.b, self.stride, self.pad)
    }
}

pub struct BatchNorm<S: Scalar> {
    pub gamma: Tensor<S>,
    pub beta: Tensor<S>,
    pub running_mean: Tensor<S>,
    pub running_var: Tensor<S>,
    pub momentum: S,
    pub eps: S,
}

impl<S: Scalar> BatchNorm<S> {
    pub const DEFAULT_MOMENTUM: f64 = 0.1;
    pub const DEFAULT_EPS: f64 = 1e-5;

    pub fn new(ps: &mut ParamSet<S>, name: &str, c: usize) -> Self {
        let gamma = ps.register(&format!("{name}.gamma"), constant(&[c], 1.0));
        let beta = ps.register(&format!("{name}.beta"), constant(&[c], 0.0));
        let running_mean =
            ps.register(&format!("{name}.running_mean"), Tensor::constant(&[c], vec![S::zero(); c]));
        let running_var =
            ps.register(&format!("{name}.running_var"), Tensor::constant(&[c], vec![S::one(); c]));
        BatchNorm {
            gamma,
            beta,
            running_mean,
            running_var,
            momentum: S::from_f64(Self::DEFAULT_MOMENTUM),
            eps: S::from_f64(Self::DEFAULT_EPS),
        }
    }

    pub fn forward(&self, x: &Tensor<S>, mode: Mode) -> Result<Tensor<S>, NnError> {
        batchnorm(
            x,
            &self.gamma,
            &self.beta,
            &self.running_mean,
            &self.running_var,
            self.momentum,
            self.eps,
            mode,
        )
    }
}
