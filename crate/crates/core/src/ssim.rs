//! Windowed structural similarity between single-channel images in [0, 1].
//!
//! 11x11 Gaussian window (sigma 1.5), K1 = 0.01, K2 = 0.03, dynamic range 1.0,
//! averaged over all fully-inside window positions. Local statistics are
//! computed with separable Gaussian passes in f64; the expression is written
//! symmetrically, so `ssim(a, b)` and `ssim(b, a)` agree bit for bit and
//! `ssim(a, a)` is exactly 1.

use thiserror::Error;

pub const WINDOW: usize = 11;
pub const SIGMA: f64 = 1.5;
pub const K1: f64 = 0.01;
pub const K2: f64 = 0.03;
pub const DYNAMIC_RANGE: f64 = 1.0;

#[derive(Debug, Error)]
pub enum SsimError {
    #[error("image shapes differ: {0} vs {1} pixels")]
    ShapeMismatch(usize, usize),
    #[error("image {h}x{w} smaller than the {window}x{window} window")]
    ImageSmallerThanWindow { h: usize, w: usize, window: usize },
}

fn gaussian_kernel() -> [f64; WINDOW] {
    let mut k = [0.0; WINDOW];
    let c = (WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SIGMA * SIGMA)).exp();
        sum += *v;
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Valid-mode separable Gaussian blur: [h, w] -> [h-10, w-10].
fn blur_valid(src: &[f64], h: usize, w: usize, kernel: &[f64; WINDOW]) -> Vec<f64> {
    let ow = w - WINDOW + 1;
    let oh = h - WINDOW + 1;
    // horizontal pass
    let mut tmp = vec![0.0f64; h * ow];
    for y in 0..h {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, &kv) in kernel.iter().enumerate() {
                acc += kv * src[y * w + x + i];
            }
            tmp[y * ow + x] = acc;
        }
    }
    // vertical pass
    let mut out = vec![0.0f64; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, &kv) in kernel.iter().enumerate() {
                acc += kv * tmp[(y + i) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    out
}

/// Mean SSIM over window positions; both images are [h, w] slices.
pub fn ssim(a: &[f32], b: &[f32], h: usize, w: usize) -> Result<f64, SsimError> {
    if a.len() != b.len() || a.len() != h * w {
        return Err(SsimError::ShapeMismatch(a.len(), b.len()));
    }
    if h < WINDOW || w < WINDOW {
        return Err(SsimError::ImageSmallerThanWindow { h, w, window: WINDOW });
    }
    let kernel = gaussian_kernel();
    let af: Vec<f64> = a.iter().map(|&v| v as f64).collect();
    let bf: Vec<f64> = b.iter().map(|&v| v as f64).collect();
    let aa: Vec<f64> = af.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = bf.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = af.iter().zip(&bf).map(|(x, y)| x * y).collect();

    let mu_a = blur_valid(&af, h, w, &kernel);
    let mu_b = blur_valid(&bf, h, w, &kernel);
    let e_aa = blur_valid(&aa, h, w, &kernel);
    let e_bb = blur_valid(&bb, h, w, &kernel);
    let e_ab = blur_valid(&ab, h, w, &kernel);

    let c1 = (K1 * DYNAMIC_RANGE) * (K1 * DYNAMIC_RANGE);
    let c2 = (K2 * DYNAMIC_RANGE) * (K2 * DYNAMIC_RANGE);
    let mut total = 0.0f64;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let var_a = e_aa[i] - ma * ma;
        let var_b = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
        let den = (ma * ma + mb * mb + c1) * (var_a + var_b + c2);
        total += num / den;
    }
    Ok(total / mu_a.len() as f64)
}

/// Mean squared error between two images, per pixel in [0,1] units.
pub fn mse(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        let d = x as f64 - y as f64;
        acc += d * d;
    }
    acc / a.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct, non-separable evaluation of the same statistic, as an
    /// independent oracle for the fast path.
    fn ssim_direct(a: &[f32], b: &[f32], h: usize, w: usize) -> f64 {
        let kernel = gaussian_kernel();
        let mut weights = vec![0.0f64; WINDOW * WINDOW];
        for y in 0..WINDOW {
            for x in 0..WINDOW {
                weights[y * WINDOW + x] = kernel[y] * kernel[x];
            }
        }
        let c1 = (K1 * DYNAMIC_RANGE).powi(2);
        let c2 = (K2 * DYNAMIC_RANGE).powi(2);
        let (oh, ow) = (h - WINDOW + 1, w - WINDOW + 1);
        let mut total = 0.0;
        for oy in 0..oh {
            for ox in 0..ow {
                let (mut ma, mut mb, mut eaa, mut ebb, mut eab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for ky in 0..WINDOW {
                    for kx in 0..WINDOW {
                        let wgt = weights[ky * WINDOW + kx];
                        let va = a[(oy + ky) * w + ox + kx] as f64;
                        let vb = b[(oy + ky) * w + ox + kx] as f64;
                        ma += wgt * va;
                        mb += wgt * vb;
                        eaa += wgt * va * va;
                        ebb += wgt * vb * vb;
                        eab += wgt * va * vb;
                    }
                }
                let num = (2.0 * ma * mb + c1) * (2.0 * (eab - ma * mb) + c2);
                let den = (ma * ma + mb * mb + c1) * ((eaa - ma * ma) + (ebb - mb * mb) + c2);
                total += num / den;
            }
        }
        total / (oh * ow) as f64
    }

    fn noise_image(n: usize, seed: u64) -> Vec<f32> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 40) & 0xff) as f32 / 255.0
            })
            .collect()
    }

    #[test]
    fn identical_images_score_exactly_one() {
        let img = noise_image(16 * 16, 3);
        assert_eq!(ssim(&img, &img, 16, 16).unwrap(), 1.0);
    }

    #[test]
    fn symmetric_to_the_bit() {
        let a = noise_image(20 * 14, 4);
        let b = noise_image(20 * 14, 5);
        let ab = ssim(&a, &b, 20, 14).unwrap();
        let ba = ssim(&b, &a, 20, 14).unwrap();
        assert_eq!(ab.to_bits(), ba.to_bits());
    }

    #[test]
    fn constant_images_of_same_value_score_one() {
        let a = vec![0.42f32; 12 * 12];
        assert_eq!(ssim(&a, &a.clone(), 12, 12).unwrap(), 1.0);
    }

    #[test]
    fn fast_path_matches_direct_evaluation() {
        let a = noise_image(18 * 18, 6);
        let b = noise_image(18 * 18, 7);
        let fast = ssim(&a, &b, 18, 18).unwrap();
        let direct = ssim_direct(&a, &b, 18, 18);
        assert!((fast - direct).abs() < 1e-9, "{fast} vs {direct}");
    }

    #[test]
    fn inverted_checkerboard_is_strongly_negative() {
        // Binary checkerboard against its inversion: covariance = -variance,
        // so the structure factor sits near -1 while luminance stays ~1.
        let mut a = vec![0.0f32; 16 * 16];
        for y in 0..16 {
            for x in 0..16 {
                a[y * 16 + x] = ((x + y) % 2) as f32;
            }
        }
        let b: Vec<f32> = a.iter().map(|v| 1.0 - v).collect();
        let s = ssim(&a, &b, 16, 16).unwrap();
        let direct = ssim_direct(&a, &b, 16, 16);
        assert!((s - direct).abs() < 1e-9);
        assert!(s < -0.5, "checkerboard vs inversion scored {s}");
    }

    #[test]
    fn window_larger_than_image_is_rejected() {
        let a = vec![0.0f32; 8 * 8];
        assert!(matches!(
            ssim(&a, &a.clone(), 8, 8),
            Err(SsimError::ImageSmallerThanWindow { .. })
        ));
    }

    #[test]
    fn mse_constant_field() {
        let a = vec![0.5f32; 10];
        let b = vec![0.0f32; 10];
        assert!((mse(&a, &b) - 0.25).abs() < 1e-12);
    }
}
