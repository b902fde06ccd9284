//! IDX ingestion and the MNIST / Fashion-MNIST / combined dataset splits.

use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

/// Images held back from the end of the official training file.
pub const VALIDATION_SIZE: usize = 5000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IdxKind {
    Images,
    Labels,
}

#[derive(Clone, Debug, PartialEq)]
pub enum IdxPart {
    /// `[N × rows·cols]` scaled to `[0, 1]`.
    Images { rows: usize, cols: usize, pixels: Tensor },
    Labels(Vec<u8>),
}

/// Read an IDX file, transparently gunzipping it when it carries the gzip magic.
pub fn load_idx(path: impl AsRef<Path>, kind: IdxKind) -> Result<IdxPart> {
    let path = path.as_ref();
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bytes = if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        out
    } else {
        raw
    };
    parse_idx(&bytes, kind)
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Idx(format!("truncated header at byte {offset}")))
}

pub fn parse_idx(bytes: &[u8], kind: IdxKind) -> Result<IdxPart> {
    let magic = be_u32(bytes, 0)?;
    match kind {
        IdxKind::Images => {
            if magic != IMAGE_MAGIC {
                return Err(Error::Idx(format!(
                    "expected image magic {IMAGE_MAGIC:#010x}, found {magic:#010x}"
                )));
            }
            let n = be_u32(bytes, 4)? as usize;
            let rows = be_u32(bytes, 8)? as usize;
            let cols = be_u32(bytes, 12)? as usize;
            let per = rows
                .checked_mul(cols)
                .ok_or_else(|| Error::Idx("image dimensions overflow".into()))?;
            let need = n
                .checked_mul(per)
                .and_then(|v| v.checked_add(16))
                .ok_or_else(|| Error::Idx("payload size overflows".into()))?;
            if bytes.len() < need {
                return Err(Error::Idx(format!(
                    "truncated payload: header declares {n} images of {rows}x{cols} ({need} bytes), file has {}",
                    bytes.len()
                )));
            }
            if bytes.len() > need {
                return Err(Error::Idx(format!(
                    "dimension mismatch: {} trailing bytes after {n} images of {rows}x{cols}",
                    bytes.len() - need
                )));
            }
            let pixels = bytes[16..need].iter().map(|&b| b as f32 / 255.0).collect();
            Ok(IdxPart::Images {
                rows,
                cols,
                pixels: Tensor::new(vec![n, per], pixels)?,
            })
        }
        IdxKind::Labels => {
            if magic != LABEL_MAGIC {
                return Err(Error::Idx(format!(
                    "expected label magic {LABEL_MAGIC:#010x}, found {magic:#010x}"
                )));
            }
            let n = be_u32(bytes, 4)? as usize;
            if bytes.len() < 8 + n {
                return Err(Error::Idx(format!(
                    "truncated payload: header declares {n} labels, file has {} bytes",
                    bytes.len()
                )));
            }
            if bytes.len() > 8 + n {
                return Err(Error::Idx(format!(
                    "dimension mismatch: {} trailing bytes after {n} labels",
                    bytes.len() - 8 - n
                )));
            }
            Ok(IdxPart::Labels(bytes[8..8 + n].to_vec()))
        }
    }
}

/// Encode `[0,1]` images as an IDX image file (values rounded to 8 bits).
pub fn encode_idx_images(pixels: &Tensor, rows: usize, cols: usize) -> Result<Vec<u8>> {
    if pixels.cols() != rows * cols {
        return Err(Error::Shape(format!(
            "{} pixels per image but {rows}x{cols} declared",
            pixels.cols()
        )));
    }
    let n = pixels.rows();
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IMAGE_MAGIC, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend(pixels.data().iter().map(|&v| quantize(v)));
    Ok(out)
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// `[0,1]` float to an 8-bit intensity.
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Origin {
    #[serde(rename = "M")]
    Mnist,
    #[serde(rename = "F")]
    Fashion,
}

impl Origin {
    pub fn index(self) -> u8 {
        match self {
            Origin::Mnist => 0,
            Origin::Fashion => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Images, class labels and per-record origin tags of one split.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[N × 784]`, values in `[0, 1]`.
    pub images: Tensor,
    pub labels: Vec<u8>,
    pub origins: Vec<Origin>,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<u8>, origin: Origin, split: Split) -> Result<Self> {
        if images.rows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} images but {} labels",
                images.rows(),
                labels.len()
            )));
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument("pixel values outside [0, 1]".into()));
        }
        let origins = vec![origin; labels.len()];
        Ok(Self {
            images,
            labels,
            origins,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.images.cols()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: self.images.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            origins: indices.iter().map(|&i| self.origins[i]).collect(),
            split: self.split,
        }
    }

    pub fn head(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        self.subset(&(0..n).collect::<Vec<_>>())
    }

    /// Concatenation of `self` followed by `other`.
    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        if self.dim() != other.dim() {
            return Err(Error::Shape(format!(
                "cannot concatenate {}-pixel and {}-pixel images",
                self.dim(),
                other.dim()
            )));
        }
        let mut data = self.images.data().to_vec();
        data.extend_from_slice(other.images.data());
        Ok(Dataset {
            images: Tensor::matrix(self.len() + other.len(), self.dim(), data)?,
            labels: [self.labels.as_slice(), other.labels.as_slice()].concat(),
            origins: [self.origins.as_slice(), other.origins.as_slice()].concat(),
            split: self.split,
        })
    }

    /// Records carrying the given origin tag, in order.
    pub fn filter_origin(&self, origin: Origin) -> Dataset {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| self.origins[i] == origin).collect();
        self.subset(&idx)
    }

    /// Labels used for class-conditional statistics: the digit/garment class
    /// for single-source data, the origin tag when both sources are mixed.
    pub fn stat_labels(&self) -> (Vec<u8>, usize) {
        let mixed = self.origins.windows(2).any(|w| w[0] != w[1]);
        if mixed {
            (self.origins.iter().map(|o| o.index()).collect(), 2)
        } else {
            let classes = self.labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0);
            (self.labels.clone(), classes.max(1))
        }
    }
}

#[derive(Clone, Debug)]
pub struct DataSplits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl DataSplits {
    /// Load `train-*` and `t10k-*` IDX files (optionally `.gz`) from `dir` and
    /// carve the validation split from the end of the training file.
    pub fn load_dir(dir: impl AsRef<Path>, origin: Origin) -> Result<Self> {
        let dir = dir.as_ref();
        let load_pair = |prefix: &str| -> Result<(Tensor, Vec<u8>)> {
            let images = load_idx(find_file(dir, &format!("{prefix}-images-idx3-ubyte"))?, IdxKind::Images)?;
            let labels = load_idx(find_file(dir, &format!("{prefix}-labels-idx1-ubyte"))?, IdxKind::Labels)?;
            match (images, labels) {
                (IdxPart::Images { pixels, .. }, IdxPart::Labels(labels)) => Ok((pixels, labels)),
                _ => unreachable!("kinds requested explicitly"),
            }
        };
        let (train_x, train_y) = load_pair("train")?;
        let (test_x, test_y) = load_pair("t10k")?;
        let full = Dataset::new(train_x, train_y, origin, Split::Train)?;
        let test = Dataset::new(test_x, test_y, origin, Split::Test)?;
        Self::from_full_train(full, test, VALIDATION_SIZE)
    }

    pub fn from_full_train(full: Dataset, test: Dataset, val_size: usize) -> Result<Self> {
        if val_size >= full.len() {
            return Err(Error::InvalidArgument(format!(
                "validation size {val_size} leaves no training data out of {}",
                full.len()
            )));
        }
        let cut = full.len() - val_size;
        let mut train = full.subset(&(0..cut).collect::<Vec<_>>());
        let mut val = full.subset(&(cut..full.len()).collect::<Vec<_>>());
        train.split = Split::Train;
        val.split = Split::Val;
        Ok(Self { train, val, test })
    }
}

fn find_file(dir: &Path, stem: &str) -> Result<std::path::PathBuf> {
    for name in [stem.to_string(), format!("{stem}.gz")] {
        let p = dir.join(&name);
        if p.exists() {
            return Ok(p);
        }
    }
    Err(Error::io(
        dir.join(stem),
        std::io::Error::new(std::io::ErrorKind::NotFound, "IDX file not found"),
    ))
}

/// Concatenate MNIST and Fashion-MNIST splits; every record keeps its origin tag.
pub fn build_combined(mnist: &DataSplits, fashion: &DataSplits) -> Result<DataSplits> {
    Ok(DataSplits {
        train: mnist.train.concat(&fashion.train)?,
        val: mnist.val.concat(&fashion.val)?,
        test: mnist.test.concat(&fashion.test)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_image_fixture() -> Vec<u8> {
        let mut bytes = Vec::new();
        for v in [IMAGE_MAGIC, 2, 2, 2] {
            bytes.extend_from_slice(&v.to_be_bytes());
        }
        bytes.extend_from_slice(&[0, 255, 128, 0, 10, 20, 30, 40]);
        bytes
    }

    #[test]
    fn parses_handcrafted_image_file() {
        let part = parse_idx(&two_image_fixture(), IdxKind::Images).unwrap();
        let IdxPart::Images { rows, cols, pixels } = part else { panic!() };
        assert_eq!((rows, cols), (2, 2));
        assert_eq!(pixels.shape(), &[2, 4]);
        assert_eq!(pixels.row(0), &[0.0, 1.0, 128.0 / 255.0, 0.0]);
    }

    #[test]
    fn parses_handcrafted_label_file() {
        let bytes = encode_idx_labels(&[5, 0, 9]);
        assert_eq!(&bytes[..8], &[0, 0, 8, 1, 0, 0, 0, 3]);
        assert_eq!(parse_idx(&bytes, IdxKind::Labels).unwrap(), IdxPart::Labels(vec![5, 0, 9]));
    }

    #[test]
    fn rejects_bad_magic_truncation_and_trailing_bytes() {
        let good = two_image_fixture();
        assert!(matches!(parse_idx(&good, IdxKind::Labels), Err(Error::Idx(_))));
        assert!(matches!(parse_idx(&good[..20], IdxKind::Images), Err(Error::Idx(_))));
        let mut long = good.clone();
        long.push(7);
        assert!(matches!(parse_idx(&long, IdxKind::Images), Err(Error::Idx(_))));
        assert!(parse_idx(&good[..3], IdxKind::Images).is_err());
    }

    #[test]
    fn gzip_files_are_read() {
        use flate2::write::GzEncoder;
        use std::io::Write;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.gz");
        let mut enc = GzEncoder::new(Vec::new(), flate2::Compression::default());
        enc.write_all(&encode_idx_labels(&[1, 2])).unwrap();
        fs::write(&path, enc.finish().unwrap()).unwrap();
        assert_eq!(load_idx(&path, IdxKind::Labels).unwrap(), IdxPart::Labels(vec![1, 2]));
    }

    fn toy(n: usize, origin: Origin) -> Dataset {
        let px: Vec<f32> = (0..n * 4).map(|i| (i % 256) as f32 / 255.0).collect();
        Dataset::new(
            Tensor::matrix(n, 4, px).unwrap(),
            (0..n).map(|i| (i % 10) as u8).collect(),
            origin,
            Split::Train,
        )
        .unwrap()
    }

    #[test]
    fn combined_doubles_and_partitions_back() {
        let a = toy(6, Origin::Mnist);
        let b = toy(6, Origin::Fashion);
        let c = a.concat(&b).unwrap();
        assert_eq!(c.len(), 12);
        assert_eq!(c.filter_origin(Origin::Mnist), a);
        assert_eq!(c.filter_origin(Origin::Fashion), b);
        let (labels, classes) = c.stat_labels();
        assert_eq!(classes, 2);
        assert_eq!(labels[0], 0);
        assert_eq!(labels[11], 1);

        let self_combined = a.concat(&a).unwrap();
        assert_eq!(self_combined.len(), 12);
        assert_eq!(self_combined.images.row(7), a.images.row(1));
    }

    #[test]
    fn combining_mismatched_widths_fails() {
        let a = toy(2, Origin::Mnist);
        let b = Dataset::new(Tensor::zeros(&[2, 3]), vec![0, 1], Origin::Fashion, Split::Train).unwrap();
        assert!(matches!(a.concat(&b), Err(Error::Shape(_))));
    }

    #[test]
    fn validation_is_the_tail_of_train() {
        let full = toy(10, Origin::Mnist);
        let splits = DataSplits::from_full_train(full.clone(), toy(3, Origin::Mnist), 4).unwrap();
        assert_eq!(splits.train.len(), 6);
        assert_eq!(splits.val.len(), 4);
        assert_eq!(splits.val.images.row(0), full.images.row(6));
        assert_eq!(splits.val.split, Split::Val);
    }

    proptest! {
        #[test]
        fn idx_round_trip_is_lossless(bytes in proptest::collection::vec(any::<u8>(), 1..64usize), rows in 1usize..4) {
            let cols = 2;
            let per = rows * cols;
            let n = bytes.len() / per;
            prop_assume!(n > 0);
            let px: Vec<f32> = bytes[..n * per].iter().map(|&b| b as f32 / 255.0).collect();
            let t = Tensor::matrix(n, per, px).unwrap();
            let encoded = encode_idx_images(&t, rows, cols).unwrap();
            let IdxPart::Images { pixels, .. } = parse_idx(&encoded, IdxKind::Images).unwrap() else { unreachable!() };
            prop_assert_eq!(pixels, t);
            let labels: Vec<u8> = bytes.clone();
            prop_assert_eq!(parse_idx(&encode_idx_labels(&labels), IdxKind::Labels).unwrap(), IdxPart::Labels(labels));
        }
    }
}
