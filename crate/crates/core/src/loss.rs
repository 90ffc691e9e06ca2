//! The four training losses and their weighted combination.
//!
//! - reconstruction: mean squared (or mean absolute) pixel error between the
//!   left-branch output and the input;
//! - classifier: cross-entropy between the first-pass explicit logits and the
//!   true label;
//! - explicit: the same cross-entropy applied to the right branch's re-encoded
//!   logits against the random label it was decoded with;
//! - implicit: mean over the batch of the (unsquared) Euclidean distance
//!   between the two branches' re-encoded implicit codes.
//!
//! Cross-entropies are computed from pre-softmax logits through log-sum-exp;
//! softmax probabilities elsewhere are for inspection and conditioning only.

use thiserror::Error;

use crate::nn::tensor::Tensor;
use crate::nn::NnError;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReconNorm {
    L2,
    L1,
}

#[derive(Debug, Error)]
pub enum LossError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("non-finite loss term {term} = {value}")]
    NonFinite { term: &'static str, value: f64 },
}

/// Mean over batch and pixels of the squared (L2) or absolute (L1) difference.
pub fn loss_reconstruction<S: Scalar>(
    xhat: &Tensor<S>,
    x: &Tensor<S>,
    norm: ReconNorm,
) -> Result<Tensor<S>, NnError> {
    if xhat.shape() != x.shape() {
        return Err(NnError::ShapeMismatch {
            op: "loss_reconstruction".into(),
            detail: format!("{:?} vs {:?}", xhat.shape(), x.shape()),
        });
    }
    let n = S::from_f64(xhat.len() as f64);
    let (value, is_l2) = {
        let a = xhat.values();
        let b = x.values();
        let mut acc = S::zero();
        match norm {
            ReconNorm::L2 => {
                for (&u, &v) in a.iter().zip(b.iter()) {
                    let d = u - v;
                    acc = acc + d * d;
                }
                (acc / n, true)
            }
            ReconNorm::L1 => {
                for (&u, &v) in a.iter().zip(b.iter()) {
                    acc = acc + (u - v).abs();
                }
                (acc / n, false)
            }
        }
    };
    Ok(Tensor::from_op(
        vec![1],
        vec![value],
        vec![xhat.clone(), x.clone()],
        Box::new(move |args| {
            let (ap, bp) = (&args.parents[0], &args.parents[1]);
            let go = args.grad[0];
            let av = ap.values();
            let bv = bp.values();
            let two = S::from_f64(2.0);
            let push = |p: &Tensor<S>, sign: S| {
                p.accumulate_grad(|g| {
                    for i in 0..g.len() {
                        let d = av[i] - bv[i];
                        let gi = if is_l2 {
                            two * d / n
                        } else if d > S::zero() {
                            S::one() / n
                        } else if d < S::zero() {
                            -S::one() / n
                        } else {
                            S::zero()
                        };
                        g[i] = g[i] + sign * go * gi;
                    }
                });
            };
            push(ap, S::one());
            push(bp, -S::one());
        }),
    ))
}

/// Mean cross-entropy between one-hot targets and logit rows, via
/// log-sum-exp: mean_b [ lse(z_b) - z_b . y_b ].
fn cross_entropy_logits<S: Scalar>(
    op_name: &'static str,
    logits: &Tensor<S>,
    targets: &Tensor<S>,
) -> Result<Tensor<S>, NnError> {
    let (zs, ys) = (logits.shape(), targets.shape());
    if zs.len() != 2 || zs != ys {
        return Err(NnError::ShapeMismatch {
            op: op_name.into(),
            detail: format!("logits {zs:?} vs targets {ys:?}"),
        });
    }
    let (b, k) = (zs[0], zs[1]);
    let b_s = S::from_f64(b as f64);
    let value = {
        let zv = logits.values();
        let yv = targets.values();
        let mut acc = S::zero();
        for r in 0..b {
            let row = &zv[r * k..(r + 1) * k];
            let m = row.iter().copied().fold(S::neg_infinity(), S::max);
            let mut sum = S::zero();
            for &z in row {
                sum = sum + (z - m).exp();
            }
            let lse = m + sum.ln();
            let dot: S = row.iter().zip(&yv[r * k..(r + 1) * k]).map(|(&z, &y)| z * y).sum();
            acc = acc + lse - dot;
        }
        acc / b_s
    };
    Ok(Tensor::from_op(
        vec![1],
        vec![value],
        vec![logits.clone(), targets.clone()],
        Box::new(move |args| {
            let zp = &args.parents[0];
            if !zp.requires_grad() {
                return;
            }
            let go = args.grad[0];
            let zv = zp.values();
            let yv = args.parents[1].values();
            zp.accumulate_grad(|g| {
                for r in 0..b {
                    let row = &zv[r * k..(r + 1) * k];
                    let m = row.iter().copied().fold(S::neg_infinity(), S::max);
                    let mut sum = S::zero();
                    for &z in row {
                        sum = sum + (z - m).exp();
                    }
                    for j in 0..k {
                        let soft = (row[j] - m).exp() / sum;
                        g[r * k + j] = g[r * k + j] + go * (soft - yv[r * k + j]) / b_s;
                    }
                }
            });
        }),
    ))
}

/// Penalty keeping the encoder's explicit head aligned with the true label.
pub fn loss_classifier<S: Scalar>(
    e_logits: &Tensor<S>,
    y: &Tensor<S>,
) -> Result<Tensor<S>, NnError> {
    cross_entropy_logits("loss_classifier", e_logits, y)
}

/// Consistency of the right branch: its re-encoded explicit logits must
/// recover the random label it was decoded with.
pub fn loss_explicit<S: Scalar>(
    e_r_logits: &Tensor<S>,
    y_tilde: &Tensor<S>,
) -> Result<Tensor<S>, NnError> {
    cross_entropy_logits("loss_explicit", e_r_logits, y_tilde)
}

/// Mean over the batch of || i_l - i_r ||_2 (the norm, not its square).
/// The subgradient at zero distance is defined as zero.
pub fn loss_implicit<S: Scalar>(i_l: &Tensor<S>, i_r: &Tensor<S>) -> Result<Tensor<S>, NnError> {
    let (ls, rs) = (i_l.shape(), i_r.shape());
    if ls.len() != 2 || ls != rs {
        return Err(NnError::ShapeMismatch {
            op: "loss_implicit".into(),
            detail: format!("{ls:?} vs {rs:?}"),
        });
    }
    let (b, m) = (ls[0], ls[1]);
    let b_s = S::from_f64(b as f64);
    let norms: Vec<S> = {
        let a = i_l.values();
        let c = i_r.values();
        (0..b)
            .map(|r| {
                let mut acc = S::zero();
                for j in 0..m {
                    let d = a[r * m + j] - c[r * m + j];
                    acc = acc + d * d;
                }
                acc.sqrt()
            })
            .collect()
    };
    let value = norms.iter().copied().sum::<S>() / b_s;
    Ok(Tensor::from_op(
        vec![1],
        vec![value],
        vec![i_l.clone(), i_r.clone()],
        Box::new(move |args| {
            let (lp, rp) = (&args.parents[0], &args.parents[1]);
            let go = args.grad[0];
            let lv = lp.values();
            let rv = rp.values();
            let push = |p: &Tensor<S>, sign: S| {
                p.accumulate_grad(|g| {
                    for r in 0..b {
                        if norms[r] <= S::zero() {
                            continue;
                        }
                        let scale = sign * go / (b_s * norms[r]);
                        for j in 0..m {
                            let d = lv[r * m + j] - rv[r * m + j];
                            g[r * m + j] = g[r * m + j] + scale * d;
                        }
                    }
                });
            };
            push(lp, S::one());
            push(rp, -S::one());
        }),
    ))
}

/// The four terms with their weights and the combined objective
/// `L = L_r + L_c + lambda_e * L_e + lambda_i * L_i`.
pub struct LossBundle<S: Scalar> {
    pub l_r: Tensor<S>,
    pub l_c: Tensor<S>,
    pub l_e: Tensor<S>,
    pub l_i: Tensor<S>,
    pub total: Tensor<S>,
    pub lambda_e: f64,
    pub lambda_i: f64,
}

/// Snapshot of the bundle's scalar values, for logging and aggregation.
#[derive(Debug, Clone, Copy, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossValues {
    pub l_r: f64,
    pub l_c: f64,
    pub l_e: f64,
    pub l_i: f64,
    pub total: f64,
}

impl LossValues {
    pub fn add(&mut self, other: &LossValues, weight: f64) {
        self.l_r += other.l_r * weight;
        self.l_c += other.l_c * weight;
        self.l_e += other.l_e * weight;
        self.l_i += other.l_i * weight;
        self.total += other.total * weight;
    }

    pub fn scaled(&self, s: f64) -> LossValues {
        LossValues {
            l_r: self.l_r * s,
            l_c: self.l_c * s,
            l_e: self.l_e * s,
            l_i: self.l_i * s,
            total: self.total * s,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.l_r.is_finite()
            && self.l_c.is_finite()
            && self.l_e.is_finite()
            && self.l_i.is_finite()
            && self.total.is_finite()
    }
}

impl<S: Scalar> LossBundle<S> {
    pub fn values(&self) -> LossValues {
        LossValues {
            l_r: self.l_r.item().as_f64(),
            l_c: self.l_c.item().as_f64(),
            l_e: self.l_e.item().as_f64(),
            l_i: self.l_i.item().as_f64(),
            total: self.total.item().as_f64(),
        }
    }
}

fn check_finite<S: Scalar>(term: &'static str, t: &Tensor<S>) -> Result<(), LossError> {
    let v = t.item().as_f64();
    if !v.is_finite() {
        return Err(LossError::NonFinite { term, value: v });
    }
    Ok(())
}

/// Combine the four terms. With weights of zero the corresponding term still
/// contributes nothing to the objective but is reported in the bundle.
pub fn loss_global<S: Scalar>(
    l_r: Tensor<S>,
    l_c: Tensor<S>,
    l_e: Tensor<S>,
    l_i: Tensor<S>,
    lambda_e: f64,
    lambda_i: f64,
) -> Result<LossBundle<S>, LossError> {
    check_finite("l_r", &l_r)?;
    check_finite("l_c", &l_c)?;
    check_finite("l_e", &l_e)?;
    check_finite("l_i", &l_i)?;
    let total = l_r
        .add(&l_c)
        .map_err(LossError::Nn)?
        .add(&l_e.scale(S::from_f64(lambda_e)))
        .map_err(LossError::Nn)?
        .add(&l_i.scale(S::from_f64(lambda_i)))
        .map_err(LossError::Nn)?;
    check_finite("total", &total)?;
    Ok(LossBundle { l_r, l_c, l_e, l_i, total, lambda_e, lambda_i })
}

/// Plain conditional-autoencoder objective: reconstruction only. The other
/// terms are zero constants so the bundle shape stays uniform downstream.
pub fn loss_reconstruction_only<S: Scalar>(l_r: Tensor<S>) -> Result<LossBundle<S>, LossError> {
    check_finite("l_r", &l_r)?;
    let zero = || Tensor::scalar(S::zero());
    Ok(LossBundle {
        total: l_r.scale(S::one()),
        l_r,
        l_c: zero(),
        l_e: zero(),
        l_i: zero(),
        lambda_e: 0.0,
        lambda_i: 0.0,
    })
}
