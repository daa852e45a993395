//! Dataset ingestion: IDX image/label files, a synthetic Gaussian generator,
//! deterministic splits, and mini-batching.
//!
//! Inputs are always normalized to `[0,1]` (never mean/std standardized) so
//! that an ℓ∞ budget like ε = 0.3 keeps its usual pixel-space meaning and
//! attacks can clamp to the valid range.

use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::tensor::Tensor;

const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
const IDX_LABEL_MAGIC: u32 = 0x0000_0801;
/// Upper bound on bytes implied by an untrusted IDX header.
const MAX_IDX_ELEMENTS: u64 = 1 << 31;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitTag {
    Train,
    Val,
    Test,
    Full,
}

impl std::fmt::Display for SplitTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SplitTag::Train => write!(f, "train"),
            SplitTag::Val => write!(f, "val"),
            SplitTag::Test => write!(f, "test"),
            SplitTag::Full => write!(f, "full"),
        }
    }
}

/// N samples of dimension D in `[0,1]`, with class labels `< classes`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub tag: SplitTag,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, classes: usize, tag: SplitTag) -> Result<Self> {
        if inputs.rows() != labels.len() || labels.is_empty() {
            return Err(Error::dim(format!(
                "{} inputs vs {} labels",
                inputs.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::domain(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        if inputs.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::domain("inputs must lie in [0,1]".to_string()));
        }
        Ok(Dataset {
            inputs,
            labels,
            classes,
            tag,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    /// Dataset restricted to `indices`, in the given order.
    pub fn subset(&self, indices: &[usize], tag: SplitTag) -> Dataset {
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.inputs.row(i));
            labels.push(self.labels[i]);
        }
        Dataset {
            inputs: Tensor::new(vec![indices.len(), d], data).expect("subset shape"),
            labels,
            classes: self.classes,
            tag,
        }
    }

    /// The first `n` samples (or all of them when fewer).
    pub fn take(&self, n: usize, tag: SplitTag) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx, tag)
    }
}

// ── IDX parsing ───────────────────────────────────────────────────────
//
// Big-endian headers: images are (magic, count, rows, cols) then count·rows·
// cols pixel bytes; labels are (magic, count) then count label bytes.

fn be_u32(bytes: &[u8], offset: usize, source: &str) -> Result<u32> {
    let end = offset
        .checked_add(4)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::format(source, offset, "truncated header"))?;
    Ok(u32::from_be_bytes(bytes[offset..end].try_into().expect("4 bytes")))
}

/// Parsed image payload: row-major pixels scaled into `[0,1]`.
#[derive(Debug)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<f32>,
}

pub fn parse_idx_images(bytes: &[u8], source: &str) -> Result<IdxImages> {
    let magic = be_u32(bytes, 0, source)?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(Error::format(
            source,
            0,
            format!("bad image magic 0x{magic:08x}, expected 0x{IDX_IMAGE_MAGIC:08x}"),
        ));
    }
    let count = be_u32(bytes, 4, source)? as u64;
    let rows = be_u32(bytes, 8, source)? as u64;
    let cols = be_u32(bytes, 12, source)? as u64;
    let total = count
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .filter(|&v| v <= MAX_IDX_ELEMENTS)
        .ok_or_else(|| Error::format(source, 4, "image dimensions overflow"))?;
    if count == 0 || rows == 0 || cols == 0 {
        return Err(Error::format(source, 4, "zero count or image size"));
    }
    let expected = 16 + total as usize;
    if bytes.len() != expected {
        let offset = bytes.len().min(expected);
        return Err(Error::format(
            source,
            offset,
            format!("expected {expected} bytes, file has {}", bytes.len()),
        ));
    }
    let pixels = bytes[16..].iter().map(|&b| b as f32 / 255.0).collect();
    Ok(IdxImages {
        count: count as usize,
        rows: rows as usize,
        cols: cols as usize,
        pixels,
    })
}

pub fn parse_idx_labels(bytes: &[u8], source: &str) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, source)?;
    if magic != IDX_LABEL_MAGIC {
        return Err(Error::format(
            source,
            0,
            format!("bad label magic 0x{magic:08x}, expected 0x{IDX_LABEL_MAGIC:08x}"),
        ));
    }
    let count = be_u32(bytes, 4, source)? as u64;
    if count == 0 || count > MAX_IDX_ELEMENTS {
        return Err(Error::format(source, 4, "bad label count"));
    }
    let expected = 8 + count as usize;
    if bytes.len() != expected {
        let offset = bytes.len().min(expected);
        return Err(Error::format(
            source,
            offset,
            format!("expected {expected} bytes, file has {}", bytes.len()),
        ));
    }
    Ok(bytes[8..].to_vec())
}

/// Load a paired IDX image/label file set. Class count is fixed at 10
/// (digit labels); a label byte ≥ 10 is a format error.
pub fn load_idx(images_path: &std::path::Path, labels_path: &std::path::Path) -> Result<Dataset> {
    let image_bytes = std::fs::read(images_path)
        .map_err(|e| Error::io(images_path.display().to_string(), e))?;
    let label_bytes = std::fs::read(labels_path)
        .map_err(|e| Error::io(labels_path.display().to_string(), e))?;
    let images = parse_idx_images(&image_bytes, &images_path.display().to_string())?;
    let labels = parse_idx_labels(&label_bytes, &labels_path.display().to_string())?;
    if images.count != labels.len() {
        return Err(Error::format(
            labels_path.display().to_string(),
            4,
            format!("{} labels for {} images", labels.len(), images.count),
        ));
    }
    let classes = 10;
    if let Some(pos) = labels.iter().position(|&b| b as usize >= classes) {
        return Err(Error::format(
            labels_path.display().to_string(),
            8 + pos,
            format!("label byte {} out of range", labels[pos]),
        ));
    }
    let d = images.rows * images.cols;
    Dataset::new(
        Tensor::new(vec![images.count, d], images.pixels)?,
        labels.iter().map(|&b| b as usize).collect(),
        classes,
        SplitTag::Full,
    )
}

// ── synthetic generator ──────────────────────────────────────────────

/// Gaussian blobs with class means on unit-simplex corners (class `c` means
/// the one-hot vector `e_c` embedded in `D` dimensions), isotropic noise
/// `sigma`, clamped to `[0,1]`. Requires `D ≥ C`.
pub fn synthetic_gaussians(
    classes: usize,
    dim: usize,
    per_class: usize,
    seed: u64,
    sigma: f32,
) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::config("data.classes", "need at least 2 classes"));
    }
    if dim < classes {
        return Err(Error::config(
            "data.dim",
            format!("dim {dim} must be >= classes {classes} for simplex corners"),
        ));
    }
    if per_class == 0 {
        return Err(Error::config("data.per_class", "must be >= 1"));
    }
    let n = classes * per_class;
    let mut rng = Stream::labeled(seed, "synthetic");
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for c in 0..classes {
        for _ in 0..per_class {
            for d in 0..dim {
                let mean = if d == c { 1.0 } else { 0.0 };
                let v = mean + sigma * rng.next_gaussian();
                data.push(v.clamp(0.0, 1.0));
            }
            labels.push(c);
        }
    }
    Dataset::new(
        Tensor::new(vec![n, dim], data)?,
        labels,
        classes,
        SplitTag::Full,
    )
}

// ── splits ────────────────────────────────────────────────────────────

/// Partition a dataset into `fractions.len()` disjoint, exhaustive pieces.
/// Fractions must be positive and sum to 1 within 1e-6; sizes come from
/// cumulative rounding so the union is always exact.
pub fn split(ds: &Dataset, fractions: &[f64], seed: u64) -> Result<Vec<Dataset>> {
    if fractions.is_empty() {
        return Err(Error::config("split", "no fractions given"));
    }
    if fractions.iter().any(|&f| f <= 0.0) {
        return Err(Error::config("split", "fractions must be positive"));
    }
    let sum: f64 = fractions.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::config("split", format!("fractions sum to {sum}")));
    }
    let n = ds.len();
    let mut order: Vec<usize> = (0..n).collect();
    Stream::labeled(seed, "split").shuffle(&mut order);

    let tags = |i: usize| match (fractions.len(), i) {
        (1, 0) => SplitTag::Train,
        (_, 0) => SplitTag::Train,
        (2, 1) => SplitTag::Val,
        (3, 1) => SplitTag::Val,
        (3, 2) => SplitTag::Test,
        _ => SplitTag::Full,
    };

    let mut out = Vec::with_capacity(fractions.len());
    let mut cum = 0.0;
    let mut start = 0;
    for (i, &f) in fractions.iter().enumerate() {
        cum += f;
        let end = if i + 1 == fractions.len() {
            n
        } else {
            (cum * n as f64).round() as usize
        };
        if end <= start {
            return Err(Error::config(
                "split",
                format!("split {i} is empty ({n} samples, fractions {fractions:?})"),
            ));
        }
        out.push(ds.subset(&order[start..end], tags(i)));
        start = end;
    }
    Ok(out)
}

// ── batching ─────────────────────────────────────────────────────────

/// One mini-batch: inputs `[B×D]`, labels, and the source indices.
pub struct Batch {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
}

/// Deterministic epoch iteration: each epoch visits every index exactly
/// once, in an order fixed by `(seed, epoch)`. The final partial batch is
/// included.
pub struct BatchIterator<'a> {
    dataset: &'a Dataset,
    batch_size: usize,
    order: Vec<usize>,
    cursor: usize,
}

impl<'a> BatchIterator<'a> {
    pub fn new(dataset: &'a Dataset, batch_size: usize, seed: u64, epoch: usize) -> Self {
        assert!(batch_size > 0, "batch size must be positive");
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        Stream::indexed(seed, "shuffle", &[epoch as u64]).shuffle(&mut order);
        BatchIterator {
            dataset,
            batch_size,
            order,
            cursor: 0,
        }
    }

    /// Number of batches this epoch will yield.
    pub fn batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }
}

impl<'a> Iterator for BatchIterator<'a> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let indices = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        let picked = self.dataset.subset(&indices, self.dataset.tag);
        Some(Batch {
            inputs: picked.inputs,
            labels: picked.labels,
            indices,
        })
    }
}

// ── tiny IDX writer (fixtures, corpus seeds) ─────────────────────────

/// Serialize images into IDX bytes. Pixels are rounded to the nearest byte.
pub fn encode_idx_images(pixels: &[f32], count: usize, rows: usize, cols: usize) -> Vec<u8> {
    assert_eq!(pixels.len(), count * rows * cols);
    let mut out = Vec::with_capacity(16 + pixels.len());
    out.extend_from_slice(&IDX_IMAGE_MAGIC.to_be_bytes());
    out.extend_from_slice(&(count as u32).to_be_bytes());
    out.extend_from_slice(&(rows as u32).to_be_bytes());
    out.extend_from_slice(&(cols as u32).to_be_bytes());
    out.extend(pixels.iter().map(|&p| (p * 255.0).round().clamp(0.0, 255.0) as u8));
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn idx_fixture_roundtrips_exact_pixels() {
        // Hand-built 2-image 2×2 fixture with known bytes.
        let bytes = vec![
            0x00, 0x00, 0x08, 0x03, // image magic
            0x00, 0x00, 0x00, 0x02, // count = 2
            0x00, 0x00, 0x00, 0x02, // rows = 2
            0x00, 0x00, 0x00, 0x02, // cols = 2
            0, 255, 128, 64, // image 1
            255, 0, 32, 16, // image 2
        ];
        let images = parse_idx_images(&bytes, "fixture").unwrap();
        assert_eq!((images.count, images.rows, images.cols), (2, 2, 2));
        let expected: Vec<f32> = [0u8, 255, 128, 64, 255, 0, 32, 16]
            .iter()
            .map(|&b| b as f32 / 255.0)
            .collect();
        assert_eq!(images.pixels, expected);

        let labels = parse_idx_labels(&encode_idx_labels(&[9, 3]), "labels").unwrap();
        assert_eq!(labels, vec![9, 3]);
    }

    #[test]
    fn idx_bad_magic_and_truncation() {
        let mut bytes = encode_idx_images(&[0.5; 4], 1, 2, 2);
        bytes[3] = 0x01;
        assert!(parse_idx_images(&bytes, "x").is_err());

        let good = encode_idx_images(&[0.5; 4], 1, 2, 2);
        let err = parse_idx_images(&good[..good.len() - 1], "x").unwrap_err();
        assert!(err.to_string().contains("byte"), "{err}");
    }

    #[test]
    fn idx_count_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img");
        let lbl = dir.path().join("lbl");
        std::fs::write(&img, encode_idx_images(&[0.1; 8], 2, 2, 2)).unwrap();
        std::fs::write(&lbl, encode_idx_labels(&[1, 2, 3])).unwrap();
        let err = load_idx(&img, &lbl).unwrap_err();
        assert!(err.to_string().contains("3 labels for 2 images"), "{err}");
    }

    #[test]
    fn load_idx_is_bitwise_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img");
        let lbl = dir.path().join("lbl");
        std::fs::write(&img, encode_idx_images(&[0.25; 18], 2, 3, 3)).unwrap();
        std::fs::write(&lbl, encode_idx_labels(&[7, 1])).unwrap();
        let a = load_idx(&img, &lbl).unwrap();
        let b = load_idx(&img, &lbl).unwrap();
        assert_eq!(a.inputs.bits(), b.inputs.bits());
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.dim(), 9);
    }

    #[test]
    fn synthetic_zero_noise_sits_on_corners() {
        let ds = synthetic_gaussians(3, 5, 4, 1, 0.0).unwrap();
        assert_eq!(ds.len(), 12);
        for (i, &y) in ds.labels.iter().enumerate() {
            let row = ds.inputs.row(i);
            for (d, &v) in row.iter().enumerate() {
                assert_eq!(v, if d == y { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn synthetic_same_seed_is_bitwise_equal() {
        let a = synthetic_gaussians(4, 6, 10, 9, 0.2).unwrap();
        let b = synthetic_gaussians(4, 6, 10, 9, 0.2).unwrap();
        assert_eq!(a.inputs.bits(), b.inputs.bits());
        assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn synthetic_class_means_match_clamped_law() {
        // Clamping a N(μ, σ²) coordinate to [0,1] shifts corner coordinates
        // by σ·φ(0) = σ/√(2π) inward; off-corner coordinates shift outward
        // by the same amount. Tolerance 4σ/√n uses the raw σ, an upper
        // bound on the clamped standard deviation.
        let sigma = 0.1f64;
        let per_class = 2000;
        let ds = synthetic_gaussians(3, 4, per_class, 5, sigma as f32).unwrap();
        let shift = sigma / (2.0 * std::f64::consts::PI).sqrt();
        let tol = 4.0 * sigma / (per_class as f64).sqrt();
        for class in 0..3 {
            for d in 0..4 {
                let mut sum = 0f64;
                let mut count = 0;
                for (i, &y) in ds.labels.iter().enumerate() {
                    if y == class {
                        sum += ds.inputs.row(i)[d] as f64;
                        count += 1;
                    }
                }
                let mean = sum / count as f64;
                let expected = if d == class { 1.0 - shift } else { shift };
                assert!(
                    (mean - expected).abs() < tol,
                    "class {class} dim {d}: mean {mean} expected {expected} tol {tol}"
                );
            }
        }
    }

    #[test]
    fn split_single_fraction_keeps_everything() {
        let ds = synthetic_gaussians(2, 3, 5, 3, 0.05).unwrap();
        let parts = split(&ds, &[1.0], 0).unwrap();
        assert_eq!(parts.len(), 1);
        assert_eq!(parts[0].len(), 10);
    }

    #[test]
    fn split_80_10_10_has_exact_sizes() {
        let ds = synthetic_gaussians(2, 3, 50, 3, 0.05).unwrap();
        let parts = split(&ds, &[0.8, 0.1, 0.1], 0).unwrap();
        assert_eq!(
            parts.iter().map(Dataset::len).collect::<Vec<_>>(),
            vec![80, 10, 10]
        );
    }

    #[test]
    fn split_is_an_exact_partition_for_any_size() {
        // Encode each sample's identity in its label so the union and
        // disjointness of the pieces can be checked exactly.
        for n in [3usize, 7, 10, 53, 100] {
            let inputs = Tensor::new(vec![n, 2], vec![0.5; n * 2]).unwrap();
            let labels: Vec<usize> = (0..n).collect();
            let ds = Dataset::new(inputs, labels, n, SplitTag::Full).unwrap();
            let fractions = [0.5, 0.3, 0.2];
            match split(&ds, &fractions, 9) {
                Ok(parts) => {
                    let mut seen: Vec<usize> =
                        parts.iter().flat_map(|p| p.labels.iter().copied()).collect();
                    assert_eq!(seen.len(), n);
                    seen.sort_unstable();
                    assert_eq!(seen, (0..n).collect::<Vec<_>>());
                }
                // Tiny n can make a piece empty, which is a config error.
                Err(Error::Config { .. }) => assert!(n < 5),
                Err(other) => panic!("unexpected error: {other}"),
            }
        }
    }

    #[test]
    fn split_empty_piece_is_config_error() {
        let ds = synthetic_gaussians(2, 3, 2, 3, 0.05).unwrap();
        assert!(split(&ds, &[0.9, 0.05, 0.05], 0).is_err());
    }

    #[test]
    fn batch_iterator_visits_every_index_once() {
        let ds = synthetic_gaussians(3, 4, 11, 2, 0.1).unwrap();
        let mut seen = vec![0usize; ds.len()];
        let iter = BatchIterator::new(&ds, 8, 42, 0);
        assert_eq!(iter.batches(), 5);
        for batch in iter {
            assert!(batch.inputs.rows() <= 8);
            for &i in &batch.indices {
                seen[i] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c == 1));

        // Same (seed, epoch) → same order; different epoch → different order.
        let o1: Vec<usize> = BatchIterator::new(&ds, 8, 42, 0).flat_map(|b| b.indices).collect();
        let o2: Vec<usize> = BatchIterator::new(&ds, 8, 42, 0).flat_map(|b| b.indices).collect();
        let o3: Vec<usize> = BatchIterator::new(&ds, 8, 42, 1).flat_map(|b| b.indices).collect();
        assert_eq!(o1, o2);
        assert_ne!(o1, o3);
    }
}
