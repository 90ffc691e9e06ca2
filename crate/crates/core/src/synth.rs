//! Procedurally rendered handwritten-style digit corpus.
//!
//! Ten fixed glyph skeletons (polylines in a unit box) are drawn with
//! per-sample style: rotation, anisotropic scale, shear, translation, and
//! stroke thickness, anti-aliased onto a 28x28 grid — the digit class is the
//! content, the transform parameters are the style. Rendering is a pure
//! function of (seed, sample index), and [`ensure_corpus`] materializes a
//! train/test split as bit-exact IDX files, so the full pipeline can run
//! unchanged where the real MNIST files are not available.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataio::{write_idx_images, write_idx_labels, DataError, ImageSet, LabelSet};
use crate::util::{derive_seed, stream};

pub const GLYPH_HW: usize = 28;
pub const NUM_CLASSES: usize = 10;

type Pt = (f64, f64);

fn circle(cx: f64, cy: f64, rx: f64, ry: f64, n: usize) -> Vec<Pt> {
    (0..=n)
        .map(|i| {
            let t = i as f64 / n as f64 * std::f64::consts::TAU;
            (cx + rx * t.cos(), cy + ry * t.sin())
        })
        .collect()
}

/// Polyline skeletons per digit, coordinates in [0,1] (y down).
fn glyph(class: u8) -> Vec<Vec<Pt>> {
    match class {
        0 => vec![circle(0.5, 0.5, 0.26, 0.37, 20)],
        1 => vec![vec![(0.36, 0.3), (0.54, 0.13), (0.54, 0.87)]],
        2 => vec![
            vec![
                (0.27, 0.33),
                (0.31, 0.2),
                (0.43, 0.13),
                (0.58, 0.13),
                (0.69, 0.2),
                (0.72, 0.33),
                (0.65, 0.47),
                (0.5, 0.6),
                (0.35, 0.73),
                (0.27, 0.86),
            ],
            vec![(0.27, 0.86), (0.74, 0.86)],
        ],
        3 => vec![
            vec![
                (0.29, 0.21),
                (0.39, 0.125),
                (0.55, 0.115),
                (0.67, 0.19),
                (0.69, 0.3),
                (0.61, 0.42),
                (0.48, 0.47),
            ],
            vec![
                (0.48, 0.47),
                (0.63, 0.52),
                (0.71, 0.63),
                (0.68, 0.77),
                (0.55, 0.87),
                (0.38, 0.88),
                (0.28, 0.8),
            ],
        ],
        4 => vec![
            vec![(0.58, 0.12), (0.23, 0.6), (0.79, 0.6)],
            vec![(0.62, 0.35), (0.62, 0.9)],
        ],
        5 => vec![
            vec![(0.71, 0.13), (0.31, 0.13), (0.29, 0.45)],
            vec![
                (0.29, 0.45),
                (0.45, 0.4),
                (0.61, 0.44),
                (0.7, 0.55),
                (0.69, 0.7),
                (0.57, 0.84),
                (0.4, 0.87),
                (0.28, 0.78),
            ],
        ],
        6 => vec![vec![
            (0.62, 0.12),
            (0.48, 0.2),
            (0.37, 0.34),
            (0.31, 0.5),
            (0.3, 0.66),
            (0.37, 0.8),
            (0.5, 0.87),
            (0.62, 0.8),
            (0.67, 0.66),
            (0.61, 0.54),
            (0.48, 0.5),
            (0.36, 0.58),
        ]],
        7 => vec![vec![(0.25, 0.14), (0.75, 0.14), (0.44, 0.88)]],
        8 => vec![circle(0.5, 0.3, 0.17, 0.17, 14), circle(0.5, 0.66, 0.215, 0.215, 14)],
        9 => vec![
            circle(0.48, 0.33, 0.19, 0.19, 14),
            vec![(0.67, 0.33), (0.64, 0.6), (0.55, 0.88)],
        ],
        _ => panic!("glyph class out of range: {class}"),
    }
}

/// Style parameters drawn per sample.
struct Style {
    rot: f64,
    sx: f64,
    sy: f64,
    shear: f64,
    tx: f64,
    ty: f64,
    thickness: f64,
}

impl Style {
    fn sample(rng: &mut ChaCha8Rng) -> Style {
        Style {
            rot: rng.gen_range(-0.35..0.35),
            sx: rng.gen_range(0.75..1.05),
            sy: rng.gen_range(0.75..1.05),
            shear: rng.gen_range(-0.25..0.25),
            tx: rng.gen_range(-1.5..1.5),
            ty: rng.gen_range(-1.5..1.5),
            thickness: rng.gen_range(1.0..2.4),
        }
    }

    fn transform(&self, p: Pt) -> Pt {
        const DESIGN_SIZE: f64 = 21.0;
        let (mut x, mut y) = ((p.0 - 0.5) * DESIGN_SIZE, (p.1 - 0.5) * DESIGN_SIZE);
        x *= self.sx;
        y *= self.sy;
        x += self.shear * y;
        let (c, s) = (self.rot.cos(), self.rot.sin());
        let (rx, ry) = (c * x - s * y, s * x + c * y);
        (rx + GLYPH_HW as f64 / 2.0 + self.tx, ry + GLYPH_HW as f64 / 2.0 + self.ty)
    }
}

fn dist_to_segment(p: Pt, a: Pt, b: Pt) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt()
}

/// Render one digit into a 28x28 [0,1] buffer.
pub fn render_digit(class: u8, rng: &mut ChaCha8Rng) -> Vec<f32> {
    const AA: f64 = 0.9;
    let style = Style::sample(rng);
    let mut img = vec![0.0f32; GLYPH_HW * GLYPH_HW];
    for stroke in glyph(class) {
        let pts: Vec<Pt> = stroke.iter().map(|&p| style.transform(p)).collect();
        for seg in pts.windows(2) {
            let (a, b) = (seg[0], seg[1]);
            let reach = style.thickness / 2.0 + AA;
            let x0 = (a.0.min(b.0) - reach).floor().max(0.0) as usize;
            let x1 = (a.0.max(b.0) + reach).ceil().min(GLYPH_HW as f64) as usize;
            let y0 = (a.1.min(b.1) - reach).floor().max(0.0) as usize;
            let y1 = (a.1.max(b.1) + reach).ceil().min(GLYPH_HW as f64) as usize;
            for y in y0..y1 {
                for x in x0..x1 {
                    let d = dist_to_segment((x as f64 + 0.5, y as f64 + 0.5), a, b);
                    let cov = ((style.thickness / 2.0 + AA / 2.0 - d) / AA).clamp(0.0, 1.0);
                    let px = &mut img[y * GLYPH_HW + x];
                    *px = px.max(cov as f32);
                }
            }
        }
    }
    // Quantize like a u8 source so IDX round trips are exact.
    for v in &mut img {
        *v = (*v * 255.0).round() / 255.0;
    }
    img
}

/// Generate `n` samples; sample `i` is a pure function of (seed, offset + i).
pub fn generate(n: usize, seed: u64, offset: u64) -> (ImageSet, LabelSet) {
    let mut images = Vec::with_capacity(n * GLYPH_HW * GLYPH_HW);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, stream::SYNTH, offset + i as u64));
        let class = rng.gen_range(0..NUM_CLASSES as u8);
        labels.push(class);
        images.extend_from_slice(&render_digit(class, &mut rng));
    }
    (
        ImageSet {
            images,
            n,
            h: GLYPH_HW,
            w: GLYPH_HW,
            c: 1,
            source_dims: (GLYPH_HW, GLYPH_HW),
        },
        LabelSet { labels, num_classes: NUM_CLASSES },
    )
}

/// Standard file names, shared with real MNIST drops.
pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

pub struct CorpusPaths {
    pub dir: PathBuf,
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

impl CorpusPaths {
    pub fn in_dir(dir: &Path) -> CorpusPaths {
        CorpusPaths {
            dir: dir.to_path_buf(),
            train_images: dir.join(TRAIN_IMAGES),
            train_labels: dir.join(TRAIN_LABELS),
            test_images: dir.join(TEST_IMAGES),
            test_labels: dir.join(TEST_LABELS),
        }
    }

    pub fn all_present(&self) -> bool {
        [&self.train_images, &self.train_labels, &self.test_images, &self.test_labels]
            .iter()
            .all(|p| p.exists())
    }
}

/// Write a train/test corpus into `dir` as IDX files unless the four files
/// already exist. Creation goes through a temp directory and an atomic
/// rename, so concurrent callers settle on one copy.
pub fn ensure_corpus(
    dir: &Path,
    train_n: usize,
    test_n: usize,
    seed: u64,
) -> Result<CorpusPaths, DataError> {
    let paths = CorpusPaths::in_dir(dir);
    if paths.all_present() {
        return Ok(paths);
    }
    let io_err = |e: std::io::Error, p: &Path| DataError::Io { path: p.display().to_string(), source: e };
    let parent = dir.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(parent).map_err(|e| io_err(e, parent))?;
    let tmp = parent.join(format!(
        ".tmp-corpus-{}-{}",
        std::process::id(),
        derive_seed(seed, "tmpdir", train_n as u64)
    ));
    fs::create_dir_all(&tmp).map_err(|e| io_err(e, &tmp))?;
    let staged = CorpusPaths::in_dir(&tmp);
    let (train_x, train_y) = generate(train_n, seed, 0);
    write_idx_images(&staged.train_images, &train_x)?;
    write_idx_labels(&staged.train_labels, &train_y)?;
    // Disjoint index space keeps test samples independent of the train draw.
    let (test_x, test_y) = generate(test_n, seed, 1 << 32);
    write_idx_images(&staged.test_images, &test_x)?;
    write_idx_labels(&staged.test_labels, &test_y)?;
    match fs::rename(&tmp, dir) {
        Ok(()) => {}
        Err(_) if CorpusPaths::in_dir(dir).all_present() => {
            // Another process won the race; keep theirs.
            let _ = fs::remove_dir_all(&tmp);
        }
        Err(e) => return Err(io_err(e, dir)),
    }
    Ok(CorpusPaths::in_dir(dir))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rendering_is_deterministic_and_in_range() {
        let (a_x, a_y) = generate(20, 5, 0);
        let (b_x, b_y) = generate(20, 5, 0);
        assert_eq!(a_x.images, b_x.images);
        assert_eq!(a_y.labels, b_y.labels);
        assert!(a_x.images.iter().all(|&v| (0.0..=1.0).contains(&v)));
        // non-trivial: digits actually draw something
        let ink: f32 = a_x.images.iter().sum();
        assert!(ink > 20.0);
    }

    #[test]
    fn classes_cover_all_digits() {
        let (_, y) = generate(500, 1, 0);
        let mut seen = [0usize; 10];
        for &l in &y.labels {
            seen[l as usize] += 1;
        }
        assert!(seen.iter().all(|&c| c > 10), "class histogram {seen:?}");
    }

    #[test]
    fn corpus_files_round_trip_through_idx() {
        let dir = tempfile::tempdir().unwrap();
        let corpus_dir = dir.path().join("corpus");
        let paths = ensure_corpus(&corpus_dir, 30, 10, 9).unwrap();
        let imgs = crate::dataio::load_idx_images(&paths.train_images).unwrap();
        let labels = crate::dataio::load_idx_labels(&paths.train_labels, 10).unwrap();
        assert_eq!(imgs.n, 30);
        assert_eq!(labels.len(), 30);
        let (direct, _) = generate(30, 9, 0);
        assert_eq!(imgs.images, direct.images);
        // idempotent
        let again = ensure_corpus(&corpus_dir, 30, 10, 9).unwrap();
        assert!(again.all_present());
    }
}
