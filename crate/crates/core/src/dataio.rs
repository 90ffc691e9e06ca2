//! IDX dataset ingestion, normalization, padding, and deterministic batching.
//!
//! The IDX container is read and written bit-exactly: 4-byte big-endian magic
//! (0x00000803 for images, 0x00000801 for labels), big-endian u32 dimensions,
//! row-major u8 payload. Pixels are scaled by 1/255 into [0, 1] on load.
//! In-memory images are channel-last `[n, h, w, c]`.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use thiserror::Error;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: bad magic 0x{got:08x}, expected 0x{want:08x}")]
    BadMagic { path: String, got: u32, want: u32 },
    #[error("{path}: truncated — header promises {expected} bytes, found {found}")]
    Truncated { path: String, expected: usize, found: usize },
    #[error("label {value} at index {index} out of range for {num_classes} classes")]
    LabelOutOfRange { index: usize, value: u8, num_classes: usize },
    #[error("pad target {target:?} smaller than source {from:?}")]
    TargetSmaller { from: (usize, usize), target: (usize, usize) },
    #[error("image/label counts differ: {images} vs {labels}")]
    SizeMismatch { images: usize, labels: usize },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Images as [n, h, w, c] reals in [0, 1], plus the pre-padding dimensions.
#[derive(Clone)]
pub struct ImageSet {
    pub images: Vec<f32>,
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    /// Original (h, w) before any padding.
    pub source_dims: (usize, usize),
}

impl ImageSet {
    pub fn pixels_per_image(&self) -> usize {
        self.h * self.w * self.c
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let p = self.pixels_per_image();
        &self.images[i * p..(i + 1) * p]
    }

    /// First `n` images as an independent set.
    pub fn take(&self, n: usize) -> ImageSet {
        let n = n.min(self.n);
        ImageSet {
            images: self.images[..n * self.pixels_per_image()].to_vec(),
            n,
            h: self.h,
            w: self.w,
            c: self.c,
            source_dims: self.source_dims,
        }
    }
}

/// Class labels in {0..num_classes-1}.
#[derive(Clone)]
pub struct LabelSet {
    pub labels: Vec<u8>,
    pub num_classes: usize,
}

impl LabelSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn take(&self, n: usize) -> LabelSet {
        LabelSet { labels: self.labels[..n.min(self.labels.len())].to_vec(), num_classes: self.num_classes }
    }

    /// One-hot rows, [n, num_classes].
    pub fn one_hot_f32(&self, indices: &[usize]) -> Vec<f32> {
        let k = self.num_classes;
        let mut out = vec![0.0f32; indices.len() * k];
        for (r, &i) in indices.iter().enumerate() {
            out[r * k + self.labels[i] as usize] = 1.0;
        }
        out
    }
}

/// One training batch: channel-last images plus one-hot labels.
pub struct Batch {
    /// [b, h, w, c]
    pub x: Vec<f32>,
    /// [b, k], one-hot rows
    pub y: Vec<f32>,
    /// class index per row
    pub labels: Vec<u8>,
    pub b: usize,
}

fn read_be_u32(buf: &[u8], pos: usize) -> u32 {
    u32::from_be_bytes(buf[pos..pos + 4].try_into().unwrap())
}

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    fs::read(path).map_err(|e| DataError::Io { path: path.display().to_string(), source: e })
}

/// Load an IDX3 image file; pixels are scaled by 1/255.
pub fn load_idx_images(path: &Path) -> Result<ImageSet, DataError> {
    let buf = read_file(path)?;
    let p = path.display().to_string();
    if buf.len() < 16 {
        return Err(DataError::Truncated { path: p, expected: 16, found: buf.len() });
    }
    let magic = read_be_u32(&buf, 0);
    if magic != IMAGE_MAGIC {
        return Err(DataError::BadMagic { path: p, got: magic, want: IMAGE_MAGIC });
    }
    let n = read_be_u32(&buf, 4) as usize;
    let h = read_be_u32(&buf, 8) as usize;
    let w = read_be_u32(&buf, 12) as usize;
    let expected = 16 + n * h * w;
    if buf.len() < expected {
        return Err(DataError::Truncated { path: p, expected, found: buf.len() });
    }
    let images = buf[16..expected].iter().map(|&b| b as f32 / 255.0).collect();
    Ok(ImageSet { images, n, h, w, c: 1, source_dims: (h, w) })
}

/// Load an IDX1 label file and validate the class range.
pub fn load_idx_labels(path: &Path, num_classes: usize) -> Result<LabelSet, DataError> {
    let buf = read_file(path)?;
    let p = path.display().to_string();
    if buf.len() < 8 {
        return Err(DataError::Truncated { path: p, expected: 8, found: buf.len() });
    }
    let magic = read_be_u32(&buf, 0);
    if magic != LABEL_MAGIC {
        return Err(DataError::BadMagic { path: p, got: magic, want: LABEL_MAGIC });
    }
    let n = read_be_u32(&buf, 4) as usize;
    let expected = 8 + n;
    if buf.len() < expected {
        return Err(DataError::Truncated { path: p, expected, found: buf.len() });
    }
    let labels: Vec<u8> = buf[8..expected].to_vec();
    for (index, &value) in labels.iter().enumerate() {
        if value as usize >= num_classes {
            return Err(DataError::LabelOutOfRange { index, value, num_classes });
        }
    }
    Ok(LabelSet { labels, num_classes })
}

/// Serialize back to IDX3 bytes; pixels are quantized by round(255 * v).
pub fn idx_image_bytes(set: &ImageSet) -> Vec<u8> {
    assert_eq!(set.c, 1, "IDX images are single-channel");
    let mut out = Vec::with_capacity(16 + set.images.len());
    out.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    out.extend_from_slice(&(set.n as u32).to_be_bytes());
    out.extend_from_slice(&(set.h as u32).to_be_bytes());
    out.extend_from_slice(&(set.w as u32).to_be_bytes());
    out.extend(set.images.iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    out
}

pub fn idx_label_bytes(set: &LabelSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + set.labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(set.labels.len() as u32).to_be_bytes());
    out.extend_from_slice(&set.labels);
    out
}

pub fn write_idx_images(path: &Path, set: &ImageSet) -> Result<(), DataError> {
    fs::write(path, idx_image_bytes(set))
        .map_err(|e| DataError::Io { path: path.display().to_string(), source: e })
}

pub fn write_idx_labels(path: &Path, set: &LabelSet) -> Result<(), DataError> {
    fs::write(path, idx_label_bytes(set))
        .map_err(|e| DataError::Io { path: path.display().to_string(), source: e })
}

/// Zero-pad symmetrically to `target` (h, w); the odd pixel goes after.
/// Center-crop inverts it exactly.
pub fn pad_to(set: &ImageSet, target: (usize, usize)) -> Result<ImageSet, DataError> {
    let (th, tw) = target;
    if th < set.h || tw < set.w {
        return Err(DataError::TargetSmaller { from: (set.h, set.w), target });
    }
    if th == set.h && tw == set.w {
        return Ok(set.clone());
    }
    let (top, left) = ((th - set.h) / 2, (tw - set.w) / 2);
    let c = set.c;
    let mut images = vec![0.0f32; set.n * th * tw * c];
    for i in 0..set.n {
        let src = set.image(i);
        let dst_base = i * th * tw * c;
        for y in 0..set.h {
            let src_row = &src[y * set.w * c..(y + 1) * set.w * c];
            let dst_off = dst_base + ((top + y) * tw + left) * c;
            images[dst_off..dst_off + set.w * c].copy_from_slice(src_row);
        }
    }
    Ok(ImageSet { images, n: set.n, h: th, w: tw, c, source_dims: set.source_dims })
}

/// Center crop to (h, w); inverse of [`pad_to`] on the original region.
pub fn center_crop(set: &ImageSet, target: (usize, usize)) -> Result<ImageSet, DataError> {
    let (th, tw) = target;
    if th > set.h || tw > set.w {
        return Err(DataError::TargetSmaller { from: target, target: (set.h, set.w) });
    }
    let (top, left) = ((set.h - th) / 2, (set.w - tw) / 2);
    let c = set.c;
    let mut images = vec![0.0f32; set.n * th * tw * c];
    for i in 0..set.n {
        let src = set.image(i);
        for y in 0..th {
            let src_off = ((top + y) * set.w + left) * c;
            let dst_off = (i * th + y) * tw * c;
            images[dst_off..dst_off + tw * c].copy_from_slice(&src[src_off..src_off + tw * c]);
        }
    }
    Ok(ImageSet { images, n: set.n, h: th, w: tw, c, source_dims: (th, tw) })
}

/// Deterministic epoch batching: a seeded permutation (identity when
/// `shuffle` is off), split into `ceil(n / batch_size)` batches with the last
/// partial batch retained.
pub fn make_batches(
    x: &ImageSet,
    y: &LabelSet,
    batch_size: usize,
    seed: u64,
    shuffle: bool,
) -> Result<Vec<Batch>, DataError> {
    let order = batch_order(x.n, y, batch_size, seed, shuffle)?;
    Ok(order.iter().map(|idx| gather_batch(x, y, idx)).collect())
}

/// Index plan for one epoch, without materializing pixel data.
pub fn batch_order(
    n: usize,
    y: &LabelSet,
    batch_size: usize,
    seed: u64,
    shuffle: bool,
) -> Result<Vec<Vec<usize>>, DataError> {
    if n != y.len() {
        return Err(DataError::SizeMismatch { images: n, labels: y.len() });
    }
    assert!(batch_size >= 1, "batch_size must be >= 1");
    let mut perm: Vec<usize> = (0..n).collect();
    if shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        perm.shuffle(&mut rng);
    }
    Ok(perm.chunks(batch_size).map(|c| c.to_vec()).collect())
}

/// Materialize one batch from an index list.
pub fn gather_batch(x: &ImageSet, y: &LabelSet, indices: &[usize]) -> Batch {
    let p = x.pixels_per_image();
    let mut xb = Vec::with_capacity(indices.len() * p);
    for &i in indices {
        xb.extend_from_slice(x.image(i));
    }
    Batch {
        x: xb,
        y: y.one_hot_f32(indices),
        labels: indices.iter().map(|&i| y.labels[i]).collect(),
        b: indices.len(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_set(n: usize, h: usize, w: usize) -> (ImageSet, LabelSet) {
        let images = (0..n * h * w).map(|i| ((i * 37) % 256) as f32 / 255.0).collect();
        let labels = (0..n).map(|i| (i % 10) as u8).collect();
        (
            ImageSet { images, n, h, w, c: 1, source_dims: (h, w) },
            LabelSet { labels, num_classes: 10 },
        )
    }

    #[test]
    fn loads_header_and_normalizes_endpoints() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.idx");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
        bytes.extend_from_slice(&2u32.to_be_bytes());
        bytes.extend_from_slice(&2u32.to_be_bytes());
        bytes.extend_from_slice(&2u32.to_be_bytes());
        bytes.extend_from_slice(&[0, 255, 128, 64, 255, 0, 1, 254]);
        fs::write(&path, &bytes).unwrap();
        let set = load_idx_images(&path).unwrap();
        assert_eq!((set.n, set.h, set.w), (2, 2, 2));
        assert_eq!(set.images[0], 0.0);
        assert_eq!(set.images[1], 1.0);
    }

    #[test]
    fn label_magic_in_image_loader_is_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.idx");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
        bytes.extend_from_slice(&[0u8; 12]);
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_idx_images(&path), Err(DataError::BadMagic { got: LABEL_MAGIC, .. })));
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.idx");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
        bytes.extend_from_slice(&10u32.to_be_bytes());
        bytes.extend_from_slice(&28u32.to_be_bytes());
        bytes.extend_from_slice(&28u32.to_be_bytes());
        bytes.extend_from_slice(&[7u8; 100]);
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_idx_images(&path), Err(DataError::Truncated { .. })));
    }

    #[test]
    fn labels_load_and_range_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lab.idx");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
        bytes.extend_from_slice(&3u32.to_be_bytes());
        bytes.extend_from_slice(&[7, 0, 9]);
        fs::write(&path, &bytes).unwrap();
        let set = load_idx_labels(&path, 10).unwrap();
        assert_eq!(set.labels, vec![7, 0, 9]);

        let path2 = dir.path().join("lab2.idx");
        let mut bytes2 = Vec::new();
        bytes2.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
        bytes2.extend_from_slice(&1u32.to_be_bytes());
        bytes2.extend_from_slice(&[12]);
        fs::write(&path2, &bytes2).unwrap();
        assert!(matches!(
            load_idx_labels(&path2, 10),
            Err(DataError::LabelOutOfRange { value: 12, .. })
        ));
    }

    #[test]
    fn idx_round_trip_is_exact() {
        let (set, _) = tiny_set(5, 4, 3);
        let bytes = idx_image_bytes(&set);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rt.idx");
        fs::write(&path, &bytes).unwrap();
        let back = load_idx_images(&path).unwrap();
        assert_eq!(back.images, set.images);
    }

    #[test]
    fn pad_is_symmetric_zero_border_and_crop_inverts() {
        let (set, _) = tiny_set(3, 28, 28);
        let padded = pad_to(&set, (32, 32)).unwrap();
        assert_eq!((padded.h, padded.w), (32, 32));
        assert_eq!(padded.source_dims, (28, 28));
        // 2-pixel zero border on each side
        for i in 0..3 {
            let img = padded.image(i);
            for y in 0..32 {
                for x in 0..32 {
                    if y < 2 || y >= 30 || x < 2 || x >= 30 {
                        assert_eq!(img[y * 32 + x], 0.0, "border at ({y},{x})");
                    }
                }
            }
        }
        let back = center_crop(&padded, (28, 28)).unwrap();
        assert_eq!(back.images, set.images);

        // identity pad
        let same = pad_to(&set, (28, 28)).unwrap();
        assert_eq!(same.images, set.images);

        // shrinking is an error
        assert!(matches!(pad_to(&padded, (28, 28)), Err(DataError::TargetSmaller { .. })));
    }

    #[test]
    fn epoch_of_60000_at_128_gives_469_batches() {
        let (set, labels) = tiny_set(60000, 1, 1);
        let batches = make_batches(&set, &labels, 128, 0, true).unwrap();
        assert_eq!(batches.len(), 469);
        assert_eq!(batches.len() * 100, 46900);
        let total: usize = batches.iter().map(|b| b.b).sum();
        assert_eq!(total, 60000);
    }

    #[test]
    fn every_index_visited_exactly_once_per_epoch() {
        let (set, labels) = tiny_set(1000, 1, 1);
        let order = batch_order(set.n, &labels, 64, 9, true).unwrap();
        let mut seen = vec![0u32; 1000];
        for batch in &order {
            for &i in batch {
                seen[i] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn unshuffled_batches_follow_file_order_and_seeds_reproduce() {
        let (set, labels) = tiny_set(10, 1, 1);
        let plain = batch_order(set.n, &labels, 4, 0, false).unwrap();
        assert_eq!(plain[0], vec![0, 1, 2, 3]);
        assert_eq!(plain[2], vec![8, 9]);
        let a = batch_order(set.n, &labels, 4, 123, true).unwrap();
        let b = batch_order(set.n, &labels, 4, 123, true).unwrap();
        assert_eq!(a, b);
        assert!(matches!(
            make_batches(&set, &LabelSet { labels: vec![0; 9], num_classes: 10 }, 4, 0, false),
            Err(DataError::SizeMismatch { .. })
        ));
    }

    #[test]
    fn one_hot_rows_sum_to_one() {
        let labels = LabelSet { labels: vec![3, 0, 9], num_classes: 10 };
        let oh = labels.one_hot_f32(&[0, 1, 2]);
        for r in 0..3 {
            let s: f32 = oh[r * 10..(r + 1) * 10].iter().sum();
            assert_eq!(s, 1.0);
        }
        assert_eq!(oh[3], 1.0);
    }
}
