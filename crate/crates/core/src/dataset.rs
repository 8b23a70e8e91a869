//! MNIST ingestion (IDX format), normalization, seeded subsets and the
//! attacker's query-pair stream.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use flate2::bufread::GzDecoder;

use crate::error::{Error, Result};
use crate::numerics::SeededRng;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const NUM_CLASSES: usize = 10;

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

/// Images exactly as stored in an IDX3 file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawImages {
    pub rows: usize,
    pub cols: usize,
    /// `count * rows * cols` bytes, image-major.
    pub pixels: Vec<u8>,
}

impl RawImages {
    pub fn count(&self) -> usize {
        let dim = self.rows * self.cols;
        if dim == 0 {
            0
        } else {
            self.pixels.len() / dim
        }
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let dim = self.rows * self.cols;
        &self.pixels[i * dim..(i + 1) * dim]
    }
}

fn open_maybe_gz(path: &Path) -> Result<Box<dyn Read>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    if path.extension().is_some_and(|ext| ext == "gz") {
        Ok(Box::new(GzDecoder::new(reader)))
    } else {
        Ok(Box::new(reader))
    }
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    open_maybe_gz(path)?
        .read_to_end(&mut buf)
        .map_err(|e| Error::io(path, e))?;
    Ok(buf)
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Truncated {
            path: path.to_path_buf(),
            expected: at + 4,
            found: bytes.len(),
        })
}

/// Parses an IDX3 image file (optionally gzip-compressed by `.gz` suffix).
pub fn load_idx_images(path: impl AsRef<Path>) -> Result<RawImages> {
    let path = path.as_ref();
    let bytes = read_all(path)?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    let n = be_u32(&bytes, 4, path)? as usize;
    let rows = be_u32(&bytes, 8, path)? as usize;
    let cols = be_u32(&bytes, 12, path)? as usize;
    let expected = n * rows * cols;
    let payload = &bytes[16..];
    if payload.len() < expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            found: payload.len(),
        });
    }
    Ok(RawImages {
        rows,
        cols,
        pixels: payload[..expected].to_vec(),
    })
}

/// Parses an IDX1 label file; every label must be a digit class.
pub fn load_idx_labels(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    let path = path.as_ref();
    let bytes = read_all(path)?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: IDX_LABELS_MAGIC,
            found: magic,
        });
    }
    let n = be_u32(&bytes, 4, path)? as usize;
    let payload = &bytes[8..];
    if payload.len() < n {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: n,
            found: payload.len(),
        });
    }
    let labels = payload[..n].to_vec();
    if let Some((i, &bad)) = labels
        .iter()
        .enumerate()
        .find(|(_, &l)| usize::from(l) >= NUM_CLASSES)
    {
        return Err(Error::Data {
            path: path.to_path_buf(),
            reason: format!("label {bad} at index {i} is outside 0..=9"),
        });
    }
    Ok(labels)
}

/// Writes an uncompressed IDX3 image file.
pub fn write_idx_images(path: impl AsRef<Path>, images: &RawImages) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    out.extend_from_slice(&(images.count() as u32).to_be_bytes());
    out.extend_from_slice(&(images.rows as u32).to_be_bytes());
    out.extend_from_slice(&(images.cols as u32).to_be_bytes());
    out.extend_from_slice(&images.pixels);
    write_file(path, &out)
}

/// Writes an uncompressed IDX1 label file.
pub fn write_idx_labels(path: impl AsRef<Path>, labels: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    write_file(path, &out)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(bytes).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Maps every byte to `byte / 255`.
pub fn normalize(raw: &RawImages) -> Vec<f64> {
    raw.pixels.iter().map(|&b| f64::from(b) / 255.0).collect()
}

/// Images with labels. Pixel storage is shared, so subsets are cheap views.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    dim: usize,
    pixels: Arc<[f64]>,
    /// Row of `pixels` backing each item.
    rows: Vec<usize>,
    labels: Vec<u8>,
}

impl LabeledDataset {
    /// Builds a dataset from flat pixels; validates the pixel range and labels.
    pub fn new(dim: usize, pixels: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        if dim == 0 || pixels.len() != dim * labels.len() {
            return Err(Error::Dimension {
                context: "LabeledDataset pixels",
                expected: dim * labels.len(),
                found: pixels.len(),
            });
        }
        if let Some(p) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Argument(format!("pixel {p} outside [0, 1]")));
        }
        if let Some(l) = labels.iter().find(|&&l| usize::from(l) >= NUM_CLASSES) {
            return Err(Error::Argument(format!("label {l} outside 0..=9")));
        }
        Ok(LabeledDataset {
            dim,
            pixels: pixels.into(),
            rows: (0..labels.len()).collect(),
            labels,
        })
    }

    pub fn from_images(images: &[Vec<f64>], labels: Vec<u8>) -> Result<Self> {
        let dim = images.first().map_or(0, Vec::len);
        if images.len() != labels.len() {
            return Err(Error::Dimension {
                context: "LabeledDataset labels",
                expected: images.len(),
                found: labels.len(),
            });
        }
        let mut pixels = Vec::with_capacity(dim * images.len());
        for img in images {
            if img.len() != dim {
                return Err(Error::Dimension {
                    context: "LabeledDataset image",
                    expected: dim,
                    found: img.len(),
                });
            }
            pixels.extend_from_slice(img);
        }
        Self::new(dim, pixels, labels)
    }

    pub fn from_raw(raw: &RawImages, labels: Vec<u8>) -> Result<Self> {
        if raw.count() != labels.len() {
            return Err(Error::Dimension {
                context: "image/label count",
                expected: raw.count(),
                found: labels.len(),
            });
        }
        Self::new(raw.rows * raw.cols, normalize(raw), labels)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn image(&self, i: usize) -> &[f64] {
        let r = self.rows[i];
        &self.pixels[r * self.dim..(r + 1) * self.dim]
    }

    #[inline]
    pub fn label(&self, i: usize) -> usize {
        usize::from(self.labels[i])
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// Index of item `i` in the dataset this one was loaded as.
    pub fn source_index(&self, i: usize) -> usize {
        self.rows[i]
    }

    /// A view of the listed items, in the listed order.
    pub fn select(&self, indices: &[usize]) -> LabeledDataset {
        LabeledDataset {
            dim: self.dim,
            pixels: Arc::clone(&self.pixels),
            rows: indices.iter().map(|&i| self.rows[i]).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// First `n` items (or all of them if `n` exceeds the size).
    pub fn take(&self, n: usize) -> LabeledDataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx)
    }
}

/// Draws `n` items uniformly without replacement, in random order.
pub fn sample_subset(
    data: &LabeledDataset,
    n: usize,
    rng: &mut SeededRng,
) -> Result<LabeledDataset> {
    if n == 0 || n > data.len() {
        return Err(Error::Argument(format!(
            "subset size {n} must be in 1..={}",
            data.len()
        )));
    }
    let mut idx: Vec<usize> = (0..data.len()).collect();
    rng.shuffle(&mut idx);
    idx.truncate(n);
    Ok(data.select(&idx))
}

/// Overlapping consecutive pairs `(0,1), (1,2), …, (n−2, n−1)`.
pub fn pair_sequence(n_queries: usize) -> Result<Vec<(usize, usize)>> {
    if n_queries < 2 {
        return Err(Error::Argument(format!(
            "a query pair stream needs at least 2 queries, got {n_queries}"
        )));
    }
    Ok((1..n_queries).map(|p| (p - 1, p)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn file_names(self) -> (&'static str, &'static str) {
        match self {
            Split::Train => (TRAIN_IMAGES, TRAIN_LABELS),
            Split::Test => (TEST_IMAGES, TEST_LABELS),
        }
    }
}

/// Locates `name` or `name.gz` inside `dir`.
fn find_file(dir: &Path, name: &str) -> Option<PathBuf> {
    [dir.join(name), dir.join(format!("{name}.gz"))]
        .into_iter()
        .find(|p| p.is_file())
}

/// Loads one MNIST split from `dir`, accepting plain or `.gz` IDX files.
pub fn load_mnist(dir: impl AsRef<Path>, split: Split) -> Result<LabeledDataset> {
    let dir = dir.as_ref();
    let (img_name, lbl_name) = split.file_names();
    let missing = |name: &str| {
        Error::Config(format!(
            "MNIST file {name} (or {name}.gz) not found in {}; expected {TRAIN_IMAGES}, \
             {TRAIN_LABELS}, {TEST_IMAGES} and {TEST_LABELS}",
            dir.display()
        ))
    };
    let img_path = find_file(dir, img_name).ok_or_else(|| missing(img_name))?;
    let lbl_path = find_file(dir, lbl_name).ok_or_else(|| missing(lbl_name))?;
    let raw = load_idx_images(&img_path)?;
    let labels = load_idx_labels(&lbl_path)?;
    LabeledDataset::from_raw(&raw, labels)
}

/// Checks that every split file is present without parsing anything.
pub fn check_mnist_dir(dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    for name in [TRAIN_IMAGES, TRAIN_LABELS, TEST_IMAGES, TEST_LABELS] {
        if find_file(dir, name).is_none() {
            return Err(Error::Config(format!(
                "MNIST file {name} (or {name}.gz) not found in {}",
                dir.display()
            )));
        }
    }
    Ok(())
}


#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn idx_round_trip(
            rows in 1usize..6,
            cols in 1usize..6,
            seed in any::<u64>(),
            n in 0usize..5,
        ) {
            let mut rng = SeededRng::new(seed);
            let pixels: Vec<u8> = (0..n * rows * cols).map(|_| rng.below(256) as u8).collect();
            let labels: Vec<u8> = (0..n).map(|_| rng.below(10) as u8).collect();
            let raw = RawImages { rows, cols, pixels };
            let dir = tempfile::tempdir().unwrap();
            write_idx_images(dir.path().join("i"), &raw).unwrap();
            write_idx_labels(dir.path().join("l"), &labels).unwrap();
            prop_assert_eq!(load_idx_images(dir.path().join("i")).unwrap(), raw);
            prop_assert_eq!(load_idx_labels(dir.path().join("l")).unwrap(), labels);
        }
    }
}
