//! Strided 2-D convolution and its transpose, via im2col + GEMM.
//!
//! Weight layouts follow the usual conventions: conv takes
//! `[c_out, c_in, k, k]`, transpose conv takes `[c_in, c_out, k, k]`. With
//! matching geometry the two ops are exact adjoints of each other, and a
//! single buffer can serve as the kernel of both sides of the identity
//! `<deconv(u, w), v> = <u, conv(v, w)>`.
//!
//! The column matrix spans the whole batch (columns indexed by sample x
//! position), so each layer is three well-shaped GEMM calls plus layout
//! passes. Everything is sequential; outputs are bit-identical for identical
//! inputs.

use crate::scalar::{gemm, MatRef, Scalar};

use super::tensor::Tensor;
use super::NnError;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    fn out_dim(&self, input: usize) -> Option<usize> {
        let span = input + 2 * self.pad;
        if span < self.kernel {
            return None;
        }
        let steps = span - self.kernel;
        if steps % self.stride != 0 {
            return None;
        }
        Some(steps / self.stride + 1)
    }

    fn transpose_out_dim(&self, input: usize) -> usize {
        (input - 1) * self.stride + self.kernel - 2 * self.pad
    }
}

/// col[(c, ky, kx), col_offset + (oy, ox)] = sample[c, oy*s + ky - p, ox*s + kx - p]
/// (zero outside). `col` rows are `row_stride` wide; one call fills one
/// sample's column block.
#[allow(clippy::too_many_arguments)]
fn im2col_t<S: Scalar>(
    sample: &[S],
    c: usize,
    h: usize,
    w: usize,
    g: ConvGeom,
    oh: usize,
    ow: usize,
    col: &mut [S],
    row_stride: usize,
    col_offset: usize,
) {
    let (lo, hi) = valid_ox_range(w, g);
    for ci in 0..c {
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (ci * g.kernel + ky) * g.kernel + kx;
                let base = row * row_stride + col_offset;
                let (ox_lo, ox_hi) = (lo[kx], hi[kx].min(ow));
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let dst = &mut col[base + oy * ow..base + (oy + 1) * ow];
                    if iy < 0 || iy >= h as isize || ox_lo >= ox_hi {
                        dst.iter_mut().for_each(|v| *v = S::zero());
                        continue;
                    }
                    let src_row =
                        &sample[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    dst[..ox_lo].iter_mut().for_each(|v| *v = S::zero());
                    dst[ox_hi..].iter_mut().for_each(|v| *v = S::zero());
                    let start = ox_lo * g.stride + kx - g.pad;
                    for (d, &s) in
                        dst[ox_lo..ox_hi].iter_mut().zip(src_row[start..].iter().step_by(g.stride))
                    {
                        *d = s;
                    }
                }
            }
        }
    }
}

/// Per-kx bounds of the output positions whose reads stay inside [0, w).
fn valid_ox_range(w: usize, g: ConvGeom) -> (Vec<usize>, Vec<usize>) {
    let mut lo = vec![0usize; g.kernel];
    let mut hi = vec![0usize; g.kernel];
    for kx in 0..g.kernel {
        // smallest ox with ox*s + kx - p >= 0, and smallest with >= w
        lo[kx] = (g.pad.saturating_sub(kx)).div_ceil(g.stride);
        hi[kx] = (w + g.pad).saturating_sub(kx).div_ceil(g.stride);
    }
    (lo, hi)
}

/// Adjoint of [`im2col_t`]: scatter-add one sample's column block back onto
/// the image grid.
#[allow(clippy::too_many_arguments)]
fn col2im_add<S: Scalar>(
    col: &[S],
    c: usize,
    h: usize,
    w: usize,
    g: ConvGeom,
    oh: usize,
    ow: usize,
    out_sample: &mut [S],
    row_stride: usize,
    col_offset: usize,
) {
    let (lo, hi) = valid_ox_range(w, g);
    for ci in 0..c {
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (ci * g.kernel + ky) * g.kernel + kx;
                let base = row * row_stride + col_offset;
                let (ox_lo, ox_hi) = (lo[kx], hi[kx].min(ow));
                if ox_lo >= ox_hi {
                    continue;
                }
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut out_sample
                        [(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    let src = &col[base + oy * ow..base + (oy + 1) * ow];
                    let start = ox_lo * g.stride + kx - g.pad;
                    for (&v, d) in
                        src[ox_lo..ox_hi].iter().zip(dst_row[start..].iter_mut().step_by(g.stride))
                    {
                        *d = *d + v;
                    }
                }
            }
        }
    }
}

fn conv_dims<S: Scalar>(
    op: &str,
    x: &Tensor<S>,
    w: &Tensor<S>,
    b: &Tensor<S>,
    transpose: bool,
) -> Result<(usize, usize, usize, usize, usize, usize), NnError> {
    let err = |detail: String| NnError::ShapeMismatch { op: op.to_string(), detail };
    let xs = x.shape();
    let ws = w.shape();
    if xs.len() != 4 || ws.len() != 4 || ws[2] != ws[3] {
        return Err(err(format!("x{xs:?} w{ws:?}")));
    }
    let (batch, c_in, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (c_x_axis, c_out) = if transpose { (ws[0], ws[1]) } else { (ws[1], ws[0]) };
    if c_in != c_x_axis {
        return Err(err(format!("input has {c_in} channels, kernel expects {c_x_axis}")));
    }
    if b.shape() != [c_out] {
        return Err(err(format!("bias {:?}, want [{c_out}]", b.shape())));
    }
    Ok((batch, c_in, h, wd, c_out, ws[2]))
}

/// Strided convolution with zero padding. x: [b, c_in, h, w],
/// w: [c_out, c_in, k, k], b: [c_out] -> [b, c_out, oh, ow].
pub fn conv2d<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    b: &Tensor<S>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<S>, NnError> {
    let (batch, c_in, h, wd, c_out, kernel) = conv_dims("conv2d", x, w, b, false)?;
    let g = ConvGeom { kernel, stride, pad };
    let (oh, ow) = match (g.out_dim(h), g.out_dim(wd)) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return Err(NnError::ShapeMismatch {
                op: "conv2d".into(),
                detail: format!(
                    "spatial {h}x{wd} not divisible by stride {stride} with k={kernel} p={pad}"
                ),
            })
        }
    };
    let (op, ckk) = (oh * ow, c_in * kernel * kernel);
    let bop = batch * op;
    let mut out = vec![S::zero(); batch * c_out * op];
    {
        let xv = x.values();
        let wv = w.values();
        let bv = b.values();
        let mut col = vec![S::zero(); ckk * bop];
        for bi in 0..batch {
            im2col_t(&xv[bi * c_in * h * wd..(bi + 1) * c_in * h * wd], c_in, h, wd, g, oh, ow, &mut col, bop, bi * op);
        }
        // y'[c_out, b*op] = W . col, then scatter to [b, c_out, op] with bias.
        let mut y_prime = vec![S::zero(); c_out * bop];
        gemm(c_out, ckk, bop, S::one(), MatRef::row_major(&wv, ckk), MatRef::row_major(&col, bop), S::zero(), &mut y_prime);
        for bi in 0..batch {
            for co in 0..c_out {
                let src = &y_prime[co * bop + bi * op..co * bop + (bi + 1) * op];
                let dst = &mut out[(bi * c_out + co) * op..(bi * c_out + co + 1) * op];
                let bias = bv[co];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = s + bias;
                }
            }
        }
    }
    Ok(Tensor::from_op(
        vec![batch, c_out, oh, ow],
        out,
        vec![x.clone(), w.clone(), b.clone()],
        Box::new(move |args| {
            conv2d_backward(args.grad, args.parents, batch, c_in, h, wd, c_out, g, oh, ow);
        }),
    ))
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward<S: Scalar>(
    grad: &[S],
    parents: &[Tensor<S>],
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    g: ConvGeom,
    oh: usize,
    ow: usize,
) {
    let (xp, wp, bp) = (&parents[0], &parents[1], &parents[2]);
    let (op, ckk) = (oh * ow, c_in * g.kernel * g.kernel);
    let bop = batch * op;
    bp.accumulate_grad(|gb| {
        for bi in 0..batch {
            for co in 0..c_out {
                let mut s = S::zero();
                for &v in &grad[(bi * c_out + co) * op..(bi * c_out + co + 1) * op] {
                    s = s + v;
                }
                gb[co] = gb[co] + s;
            }
        }
    });
    // dy'[c_out, b*op] gathered once from the NCHW cotangent.
    let mut dy_prime = vec![S::zero(); c_out * bop];
    for bi in 0..batch {
        for co in 0..c_out {
            dy_prime[co * bop + bi * op..co * bop + (bi + 1) * op]
                .copy_from_slice(&grad[(bi * c_out + co) * op..(bi * c_out + co + 1) * op]);
        }
    }
    if wp.requires_grad() {
        // dW += dy' . col^T; the column matrix is recomputed rather than
        // cached from the forward pass to keep memory flat.
        let xv = xp.values();
        let mut col = vec![S::zero(); ckk * bop];
        for bi in 0..batch {
            im2col_t(&xv[bi * c_in * h * w..(bi + 1) * c_in * h * w], c_in, h, w, g, oh, ow, &mut col, bop, bi * op);
        }
        wp.accumulate_grad(|gw| {
            gemm(c_out, bop, ckk, S::one(), MatRef::row_major(&dy_prime, bop), MatRef::transposed(&col, bop), S::one(), gw);
        });
    }
    if xp.requires_grad() {
        let wv = wp.values();
        let mut dcol = vec![S::zero(); ckk * bop];
        gemm(ckk, c_out, bop, S::one(), MatRef::transposed(&wv, ckk), MatRef::row_major(&dy_prime, bop), S::zero(), &mut dcol);
        xp.accumulate_grad(|gx| {
            for bi in 0..batch {
                col2im_add(&dcol, c_in, h, w, g, oh, ow, &mut gx[bi * c_in * h * w..(bi + 1) * c_in * h * w], bop, bi * op);
            }
        });
    }
}

/// Transposed (fractionally strided) convolution. x: [b, c_in, h, w],
/// w: [c_in, c_out, k, k], b: [c_out] -> [b, c_out, (h-1)*s + k - 2p, ...].
pub fn deconv2d<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    b: &Tensor<S>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<S>, NnError> {
    let (batch, c_in, h, wd, c_out, kernel) = conv_dims("deconv2d", x, w, b, true)?;
    let g = ConvGeom { kernel, stride, pad };
    if (h - 1) * stride + kernel < 2 * pad + 1 {
        return Err(NnError::ShapeMismatch {
            op: "deconv2d".into(),
            detail: format!("degenerate output for h={h} k={kernel} s={stride} p={pad}"),
        });
    }
    let (oh, ow) = (g.transpose_out_dim(h), g.transpose_out_dim(wd));
    let (ip, cokk) = (h * wd, c_out * kernel * kernel);
    let bip = batch * ip;
    let mut out = vec![S::zero(); batch * c_out * oh * ow];
    {
        let xv = x.values();
        let wv = w.values();
        let bv = b.values();
        // x'[c_in, b*ip] gathered from NCHW.
        let mut x_prime = vec![S::zero(); c_in * bip];
        for bi in 0..batch {
            for ci in 0..c_in {
                x_prime[ci * bip + bi * ip..ci * bip + (bi + 1) * ip]
                    .copy_from_slice(&xv[(bi * c_in + ci) * ip..(bi * c_in + ci + 1) * ip]);
            }
        }
        // col[(c_out,ky,kx), b*ip] = W^T . x', then scatter-add per sample.
        let mut col = vec![S::zero(); cokk * bip];
        gemm(cokk, c_in, bip, S::one(), MatRef::transposed(&wv, cokk), MatRef::row_major(&x_prime, bip), S::zero(), &mut col);
        for bi in 0..batch {
            let slab = &mut out[bi * c_out * oh * ow..(bi + 1) * c_out * oh * ow];
            col2im_add(&col, c_out, oh, ow, g, h, wd, slab, bip, bi * ip);
            for co in 0..c_out {
                let bias = bv[co];
                for v in &mut slab[co * oh * ow..(co + 1) * oh * ow] {
                    *v = *v + bias;
                }
            }
        }
    }
    Ok(Tensor::from_op(
        vec![batch, c_out, oh, ow],
        out,
        vec![x.clone(), w.clone(), b.clone()],
        Box::new(move |args| {
            deconv2d_backward(args.grad, args.parents, batch, c_in, h, wd, c_out, g, oh, ow);
        }),
    ))
}

#[allow(clippy::too_many_arguments)]
fn deconv2d_backward<S: Scalar>(
    grad: &[S],
    parents: &[Tensor<S>],
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    g: ConvGeom,
    oh: usize,
    ow: usize,
) {
    let (xp, wp, bp) = (&parents[0], &parents[1], &parents[2]);
    let (ip, cokk) = (h * w, c_out * g.kernel * g.kernel);
    let bip = batch * ip;
    let out_sp = oh * ow;
    bp.accumulate_grad(|gb| {
        for bi in 0..batch {
            for co in 0..c_out {
                let mut s = S::zero();
                for &v in &grad[(bi * c_out + co) * out_sp..(bi * c_out + co + 1) * out_sp] {
                    s = s + v;
                }
                gb[co] = gb[co] + s;
            }
        }
    });
    // Data grad is a plain convolution of dY with w; weight grad pairs x'
    // with the column matrix of dY. Both need im2col of the cotangent.
    let mut col = vec![S::zero(); cokk * bip];
    for bi in 0..batch {
        im2col_t(&grad[bi * c_out * out_sp..(bi + 1) * c_out * out_sp], c_out, oh, ow, g, h, w, &mut col, bip, bi * ip);
    }
    if wp.requires_grad() {
        let xv = xp.values();
        let mut x_prime = vec![S::zero(); c_in * bip];
        for bi in 0..batch {
            for ci in 0..c_in {
                x_prime[ci * bip + bi * ip..ci * bip + (bi + 1) * ip]
                    .copy_from_slice(&xv[(bi * c_in + ci) * ip..(bi * c_in + ci + 1) * ip]);
            }
        }
        wp.accumulate_grad(|gw| {
            gemm(c_in, bip, cokk, S::one(), MatRef::row_major(&x_prime, bip), MatRef::transposed(&col, bip), S::one(), gw);
        });
    }
    if xp.requires_grad() {
        let wv = wp.values();
        let mut dx_prime = vec![S::zero(); c_in * bip];
        gemm(c_in, cokk, bip, S::one(), MatRef::row_major(&wv, cokk), MatRef::row_major(&col, bip), S::zero(), &mut dx_prime);
        xp.accumulate_grad(|gx| {
            for bi in 0..batch {
                for ci in 0..c_in {
                    let src = &dx_prime[ci * bip + bi * ip..ci * bip + (bi + 1) * ip];
                    let dst = &mut gx[(bi * c_in + ci) * ip..(bi * c_in + ci + 1) * ip];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d = *d + s;
                    }
                }
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct summation convolution, independent of the im2col path.
    fn naive_conv(
        x: &[f64],
        (b, c_in, h, w): (usize, usize, usize, usize),
        wt: &[f64],
        (c_out, k): (usize, usize),
        bias: &[f64],
        stride: usize,
        pad: usize,
    ) -> (Vec<f64>, usize, usize) {
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        let mut out = vec![0.0; b * c_out * oh * ow];
        for bi in 0..b {
            for co in 0..c_out {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bias[co];
                        for ci in 0..c_in {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                        acc += x[((bi * c_in + ci) * h + iy as usize) * w + ix as usize]
                                            * wt[((co * c_in + ci) * k + ky) * k + kx];
                                    }
                                }
                            }
                        }
                        out[((bi * c_out + co) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        (out, oh, ow)
    }

    fn rand_vec(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn two_by_two_ones_kernel_sums_input() {
        let x = Tensor::constant(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let w = Tensor::parameter(&[1, 1, 2, 2], vec![1.0; 4]);
        let b = Tensor::parameter(&[1], vec![0.0]);
        let y = conv2d(&x, &w, &b, 2, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.item(), 10.0);
    }

    #[test]
    fn matches_direct_summation_oracle() {
        let dims = (2usize, 3usize, 6usize, 6usize);
        let (c_out, k, stride, pad) = (4usize, 4usize, 2usize, 1usize);
        let xv = rand_vec(dims.0 * dims.1 * dims.2 * dims.3, 11);
        let wv = rand_vec(c_out * dims.1 * k * k, 22);
        let bv = rand_vec(c_out, 33);
        let (want, oh, ow) = naive_conv(&xv, dims, &wv, (c_out, k), &bv, stride, pad);
        let x = Tensor::constant(&[dims.0, dims.1, dims.2, dims.3], xv);
        let w = Tensor::parameter(&[c_out, dims.1, k, k], wv);
        let b = Tensor::parameter(&[c_out], bv);
        let y = conv2d(&x, &w, &b, stride, pad).unwrap();
        assert_eq!(y.shape(), &[dims.0, c_out, oh, ow]);
        for (a, e) in y.values().iter().zip(&want) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn halves_spatial_and_doubles_channels() {
        let x = Tensor::<f32>::constant(&[1, 1, 32, 32], vec![0.0; 32 * 32]);
        let w = Tensor::parameter(&[32, 1, 4, 4], vec![0.0; 32 * 16]);
        let b = Tensor::parameter(&[32], vec![0.0; 32]);
        let y = conv2d(&x, &w, &b, 2, 1).unwrap();
        assert_eq!(y.shape(), &[1, 32, 16, 16]);
        // all-zero input, zero bias -> all-zero output
        assert!(y.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn deconv_shape_contract_and_zero_kernel() {
        let x = Tensor::<f32>::constant(&[1, 64, 2, 2], vec![1.0; 64 * 4]);
        let w = Tensor::parameter(&[64, 32, 4, 4], vec![0.0; 64 * 32 * 16]);
        let b = Tensor::parameter(&[32], vec![0.0; 32]);
        let y = deconv2d(&x, &w, &b, 2, 1).unwrap();
        assert_eq!(y.shape(), &[1, 32, 4, 4]);
        assert!(y.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_deconv_adjoint_identity() {
        // <deconv(u, w), v> == <u, conv(v, w)> with a shared kernel buffer.
        let (b, c1, c2, h, w, k, s, p) = (2usize, 4usize, 2usize, 4usize, 4usize, 4usize, 2usize, 1usize);
        let kernel = rand_vec(c1 * c2 * k * k, 5);
        let u = rand_vec(b * c1 * h * w, 6); // deconv input lives in conv's output space
        let v = rand_vec(b * c2 * 2 * h * 2 * w, 7);
        let zero_b1 = Tensor::parameter(&[c2], vec![0.0; c2]);
        let zero_b2 = Tensor::parameter(&[c1], vec![0.0; c1]);
        let ut = Tensor::constant(&[b, c1, h, w], u.clone());
        let vt = Tensor::constant(&[b, c2, 2 * h, 2 * w], v.clone());
        let wt_deconv = Tensor::parameter(&[c1, c2, k, k], kernel.clone());
        let wt_conv = Tensor::parameter(&[c1, c2, k, k], kernel);
        let lhs_img = deconv2d(&ut, &wt_deconv, &zero_b1, s, p).unwrap();
        let rhs_img = conv2d(&vt, &wt_conv, &zero_b2, s, p).unwrap();
        let lhs: f64 = lhs_img.values().iter().zip(&v).map(|(a, b)| a * b).sum();
        let rhs: f64 = rhs_img.values().iter().zip(&u).map(|(a, b)| a * b).sum();
        assert!(
            (lhs - rhs).abs() <= 1e-10 * lhs.abs().max(rhs.abs()).max(1.0),
            "adjoint identity violated: {lhs} vs {rhs}"
        );
    }

    #[test]
    fn rejects_odd_spatial_dims() {
        let x = Tensor::<f32>::constant(&[1, 1, 5, 5], vec![0.0; 25]);
        let w = Tensor::parameter(&[2, 1, 4, 4], vec![0.0; 32]);
        let b = Tensor::parameter(&[2], vec![0.0; 2]);
        assert!(matches!(conv2d(&x, &w, &b, 2, 1), Err(NnError::ShapeMismatch { .. })));
    }

    #[test]
    fn rejects_channel_mismatch() {
        let x = Tensor::<f32>::constant(&[1, 3, 4, 4], vec![0.0; 48]);
        let w = Tensor::parameter(&[2, 1, 4, 4], vec![0.0; 32]);
        let b = Tensor::parameter(&[2], vec![0.0; 2]);
        assert!(matches!(conv2d(&x, &w, &b, 2, 1), Err(NnError::ShapeMismatch { .. })));
    }
}
