//! IDX image/label files (optionally gzip-compressed) and in-memory datasets.

use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;

use crate::nets::DatasetStats;
use crate::tensor::Tensor;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic 0x{found:08x} at byte 0, expected 0x{expected:08x}")]
    Magic { expected: u32, found: u32 },
    #[error("truncated file: header ends at byte {offset}, file has {actual} bytes")]
    Header { offset: usize, actual: usize },
    #[error("truncated payload starting at byte {offset}: expected {expected} bytes, found {actual}")]
    Truncated { offset: usize, expected: usize, actual: usize },
    #[error("{images} images but {labels} labels")]
    Count { images: usize, labels: usize },
    #[error("label {label} at index {index} is out of range for {classes} classes")]
    Label { index: usize, label: usize, classes: usize },
    #[error("dataset is empty")]
    Empty,
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32, DataError> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(DataError::Header {
            offset: offset + 4,
            actual: bytes.len(),
        })
}

fn header(bytes: &[u8], magic: u32, dims: usize) -> Result<Vec<usize>, DataError> {
    let found = be_u32(bytes, 0)?;
    if found != magic {
        return Err(DataError::Magic { expected: magic, found });
    }
    (0..dims).map(|i| be_u32(bytes, 4 + 4 * i).map(|d| d as usize)).collect()
}

fn payload(bytes: &[u8], offset: usize, expected: usize) -> Result<&[u8], DataError> {
    let actual = bytes.len().saturating_sub(offset);
    if actual < expected {
        return Err(DataError::Truncated {
            offset,
            expected,
            actual,
        });
    }
    Ok(&bytes[offset..offset + expected])
}

/// u8 images `[n, rows, cols]` scaled to `[0, 1]` as `(n, 1, rows, cols)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor<f32>, DataError> {
    let d = header(bytes, IMAGE_MAGIC, 3)?;
    let (n, rows, cols) = (d[0], d[1], d[2]);
    let raw = payload(bytes, 16, n * rows * cols)?;
    let data = raw.iter().map(|&b| f32::from(b) / 255.0).collect();
    Ok(Tensor::new(vec![n, 1, rows, cols], data).expect("extent checked"))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>, DataError> {
    let d = header(bytes, LABEL_MAGIC, 1)?;
    Ok(payload(bytes, 8, d[0])?.to_vec())
}

/// Reads a file, transparently inflating gzip content.
pub fn read_maybe_gz(path: &Path) -> Result<Vec<u8>, DataError> {
    let io = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let raw = std::fs::read(path).map_err(io)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut out).map_err(io)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// (N, C, H, W) in `[0, 1]`.
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, num_classes: usize) -> Result<Self, DataError> {
        if images.batch() != labels.len() {
            return Err(DataError::Count {
                images: images.batch(),
                labels: labels.len(),
            });
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(DataError::Label {
                index,
                label,
                classes: num_classes,
            });
        }
        Ok(Dataset {
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn batch(&self, idx: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        (self.images.select_rows(idx), idx.iter().map(|&i| self.labels[i]).collect())
    }

    /// The first `n` examples (all of them if `n` is larger).
    pub fn head(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        let (images, labels) = self.batch(&idx);
        Dataset {
            images,
            labels,
            num_classes: self.num_classes,
        }
    }

    pub fn stats(&self) -> Result<DatasetStats, DataError> {
        if self.is_empty() {
            return Err(DataError::Empty);
        }
        Ok(DatasetStats::from_images(&self.images).expect("non-empty (N, C, H, W)"))
    }
}

/// Loads a labelled image set from an IDX image file and an IDX label file.
pub fn ingest_idx(images: &Path, labels: &Path) -> Result<Dataset, DataError> {
    let x = parse_idx_images(&read_maybe_gz(images)?)?;
    let y = parse_idx_labels(&read_maybe_gz(labels)?)?;
    let classes = y.iter().copied().max().map_or(0, |m| usize::from(m) + 1).max(10);
    Dataset::new(x, y.into_iter().map(usize::from).collect(), classes)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

fn find(dir: &Path, stem: &str) -> PathBuf {
    let gz = dir.join(format!("{stem}.gz"));
    if gz.exists() {
        gz
    } else {
        dir.join(stem)
    }
}

/// Loads `train-*` or `t10k-*` IDX files from a directory, with or without a
/// `.gz` suffix.
pub fn load_split(dir: &Path, split: Split) -> Result<Dataset, DataError> {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    ingest_idx(
        &find(dir, &format!("{prefix}-images-idx3-ubyte")),
        &find(dir, &format!("{prefix}-labels-idx1-ubyte")),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image_file(n: u32, pixels: &[u8]) -> Vec<u8> {
        let mut b = IMAGE_MAGIC.to_be_bytes().to_vec();
        for d in [n, 2, 2] {
            b.extend(d.to_be_bytes());
        }
        b.extend_from_slice(pixels);
        b
    }

    #[test]
    fn scales_pixels() {
        let x = parse_idx_images(&image_file(1, &[0, 51, 255, 102])).unwrap();
        assert_eq!(x.shape(), &[1, 1, 2, 2]);
        assert_eq!(x.data()[2], 1.0);
        assert_eq!(x.data()[0], 0.0);
    }

    #[test]
    fn truncation_reports_lengths() {
        let err = parse_idx_images(&image_file(2, &[0; 5])).unwrap_err();
        assert!(matches!(err, DataError::Truncated { offset: 16, expected: 8, actual: 5 }));
        assert!(err.to_string().contains("expected 8 bytes, found 5"));
    }

    #[test]
    fn bad_magic() {
        let mut f = image_file(1, &[0; 4]);
        f[3] = 0x01;
        assert!(matches!(parse_idx_images(&f), Err(DataError::Magic { .. })));
        assert!(matches!(parse_idx_labels(&[0, 0, 8]), Err(DataError::Header { .. })));
    }
}
