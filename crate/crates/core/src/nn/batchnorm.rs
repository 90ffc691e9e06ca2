//! Batch normalization over the channel axis.
//!
//! Train mode normalizes by per-channel batch statistics (biased variance)
//! and folds them into the running estimates with momentum; eval mode applies
//! the running estimates. The running buffers are plain tensors mutated as a
//! side effect of the forward pass, so they ride along in checkpoints without
//! touching the gradient tape.

use crate::scalar::Scalar;

use super::tensor::Tensor;
use super::{Mode, NnError};

/// x: [b, c, ...spatial] (or [b, c]); gamma/beta/running_*: [c].
#[allow(clippy::too_many_arguments)]
pub fn batchnorm<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    running_mean: &Tensor<S>,
    running_var: &Tensor<S>,
    momentum: S,
    eps: S,
    mode: Mode,
) -> Result<Tensor<S>, NnError> {
    let xs = x.shape().to_vec();
    if xs.len() < 2 {
        return Err(NnError::ShapeMismatch { op: "batchnorm".into(), detail: format!("{xs:?}") });
    }
    let (batch, c) = (xs[0], xs[1]);
    let spatial: usize = xs[2..].iter().product();
    if gamma.shape() != [c] || beta.shape() != [c] || running_mean.shape() != [c] || running_var.shape() != [c] {
        return Err(NnError::ShapeMismatch {
            op: "batchnorm".into(),
            detail: format!("channel params must be [{c}]"),
        });
    }
    match mode {
        Mode::Train => {
            if batch < 2 {
                return Err(NnError::DegenerateBatch { batch });
            }
            let n = batch * spatial;
            let n_s = S::from_f64(n as f64);
            let xv = x.values();
            let mut mean = vec![S::zero(); c];
            let mut var = vec![S::zero(); c];
            for ci in 0..c {
                let mut acc = S::zero();
                for bi in 0..batch {
                    let base = (bi * c + ci) * spatial;
                    for &v in &xv[base..base + spatial] {
                        acc = acc + v;
                    }
                }
                mean[ci] = acc / n_s;
                let mut sq = S::zero();
                for bi in 0..batch {
                    let base = (bi * c + ci) * spatial;
                    for &v in &xv[base..base + spatial] {
                        let d = v - mean[ci];
                        sq = sq + d * d;
                    }
                }
                var[ci] = sq / n_s;
            }
            let inv_std: Vec<S> = var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
            let gv = gamma.values();
            let bv = beta.values();
            let mut out = vec![S::zero(); xv.len()];
            for bi in 0..batch {
                for ci in 0..c {
                    let base = (bi * c + ci) * spatial;
                    let (m, is, g, be) = (mean[ci], inv_std[ci], gv[ci], bv[ci]);
                    for j in 0..spatial {
                        out[base + j] = (xv[base + j] - m) * is * g + be;
                    }
                }
            }
            drop(xv);
            drop(gv);
            drop(bv);
            running_mean.update_values(|rm| {
                for (r, &m) in rm.iter_mut().zip(&mean) {
                    *r = (S::one() - momentum) * *r + momentum * m;
                }
            });
            running_var.update_values(|rv| {
                for (r, &v) in rv.iter_mut().zip(&var) {
                    *r = (S::one() - momentum) * *r + momentum * v;
                }
            });
            let saved_mean = mean;
            let saved_inv = inv_std;
            Ok(Tensor::from_op(
                xs,
                out,
                vec![x.clone(), gamma.clone(), beta.clone()],
                Box::new(move |args| {
                    let (xp, gp, bp) = (&args.parents[0], &args.parents[1], &args.parents[2]);
                    let xv = xp.values();
                    let gv = gp.values();
                    // Per-channel reductions of dy and dy*xhat.
                    let mut sum_dy = vec![S::zero(); c];
                    let mut sum_dy_xhat = vec![S::zero(); c];
                    for bi in 0..batch {
                        for ci in 0..c {
                            let base = (bi * c + ci) * spatial;
                            let (m, is) = (saved_mean[ci], saved_inv[ci]);
                            for j in 0..spatial {
                                let dy = args.grad[base + j];
                                sum_dy[ci] = sum_dy[ci] + dy;
                                sum_dy_xhat[ci] = sum_dy_xhat[ci] + dy * (xv[base + j] - m) * is;
                            }
                        }
                    }
                    gp.accumulate_grad(|g| {
                        for ci in 0..c {
                            g[ci] = g[ci] + sum_dy_xhat[ci];
                        }
                    });
                    bp.accumulate_grad(|g| {
                        for ci in 0..c {
                            g[ci] = g[ci] + sum_dy[ci];
                        }
                    });
                    if xp.requires_grad() {
                        xp.accumulate_grad(|gx| {
                            for bi in 0..batch {
                                for ci in 0..c {
                                    let base = (bi * c + ci) * spatial;
                                    let (m, is, g) = (saved_mean[ci], saved_inv[ci], gv[ci]);
                                    let mdy = sum_dy[ci] / n_s;
                                    let mdyx = sum_dy_xhat[ci] / n_s;
                                    for j in 0..spatial {
                                        let xhat = (xv[base + j] - m) * is;
                                        let dy = args.grad[base + j];
                                        gx[base + j] = gx[base + j] + g * is * (dy - mdy - xhat * mdyx);
                                    }
                                }
                            }
                        });
                    }
                }),
            ))
        }
        Mode::Eval => {
            let xv = x.values();
            let gv = gamma.values();
            let bv = beta.values();
            let rm = running_mean.values();
            let rv = running_var.values();
            let inv_std: Vec<S> = rv.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
            let mean = rm.clone();
            let mut out = vec![S::zero(); xv.len()];
            for bi in 0..batch {
                for ci in 0..c {
                    let base = (bi * c + ci) * spatial;
                    let (m, is, g, be) = (mean[ci], inv_std[ci], gv[ci], bv[ci]);
                    for j in 0..spatial {
                        out[base + j] = (xv[base + j] - m) * is * g + be;
                    }
                }
            }
            drop(xv);
            drop(gv);
            drop(bv);
            drop(rm);
            drop(rv);
            Ok(Tensor::from_op(
                xs,
                out,
                vec![x.clone(), gamma.clone(), beta.clone()],
                Box::new(move |args| {
                    let (xp, gp, bp) = (&args.parents[0], &args.parents[1], &args.parents[2]);
                    let xv = xp.values();
                    let gv = gp.values();
                    gp.accumulate_grad(|g| {
                        for bi in 0..batch {
                            for ci in 0..c {
                                let base = (bi * c + ci) * spatial;
                                for j in 0..spatial {
                                    g[ci] = g[ci]
                                        + args.grad[base + j] * (xv[base + j] - mean[ci]) * inv_std[ci];
                                }
                            }
                        }
                    });
                    bp.accumulate_grad(|g| {
                        for bi in 0..batch {
                            for ci in 0..c {
                                let base = (bi * c + ci) * spatial;
                                for j in 0..spatial {
                                    g[ci] = g[ci] + args.grad[base + j];
                                }
                            }
                        }
                    });
                    if xp.requires_grad() {
                        xp.accumulate_grad(|gx| {
                            for bi in 0..batch {
                                for ci in 0..c {
                                    let base = (bi * c + ci) * spatial;
                                    let scale = gv[ci] * inv_std[ci];
                                    for j in 0..spatial {
                                        gx[base + j] = gx[base + j] + args.grad[base + j] * scale;
                                    }
                                }
                            }
                        });
                    }
                }),
            ))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mk(c: usize, v: S64) -> Tensor<f64> {
        Tensor::parameter(&[c], vec![v; c])
    }
    type S64 = f64;

    #[test]
    fn train_mode_normalizes_per_channel() {
        let x = Tensor::constant(
            &[4, 2, 1, 1],
            vec![1.0, 10.0, 2.0, 20.0, 3.0, 30.0, 4.0, 40.0],
        );
        let rm = Tensor::constant(&[2], vec![0.0; 2]);
        let rv = Tensor::constant(&[2], vec![1.0; 2]);
        let y = batchnorm(&x, &mk(2, 1.0), &mk(2, 0.0), &rm, &rv, 0.1, 1e-12, Mode::Train).unwrap();
        let v = y.to_vec();
        for ci in 0..2 {
            let ch: Vec<f64> = (0..4).map(|b| v[b * 2 + ci]).collect();
            let mean: f64 = ch.iter().sum::<f64>() / 4.0;
            let var: f64 = ch.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-5, "channel {ci} mean {mean}");
            assert!((var - 1.0).abs() < 1e-5, "channel {ci} var {var}");
        }
        // running stats moved toward the batch stats
        assert!((rm.values()[0] - 0.1 * 2.5).abs() < 1e-12);
    }

    #[test]
    fn eval_mode_with_unit_stats_is_identity() {
        let x = Tensor::constant(&[1, 3, 1, 1], vec![0.3, -0.7, 2.0]);
        let rm = Tensor::constant(&[3], vec![0.0; 3]);
        let rv = Tensor::constant(&[3], vec![1.0; 3]);
        let y = batchnorm(&x, &mk(3, 1.0), &mk(3, 0.0), &rm, &rv, 0.1, 1e-9, Mode::Eval).unwrap();
        for (a, b) in y.values().iter().zip(x.values().iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn train_mode_rejects_batch_of_one() {
        let x = Tensor::<f64>::constant(&[1, 2, 1, 1], vec![1.0, 2.0]);
        let rm = Tensor::constant(&[2], vec![0.0; 2]);
        let rv = Tensor::constant(&[2], vec![1.0; 2]);
        let r = batchnorm(&x, &mk(2, 1.0), &mk(2, 0.0), &rm, &rv, 0.1, 1e-9, Mode::Train);
        assert!(matches!(r, Err(NnError::DegenerateBatch { batch: 1 })));
    }
}
