//! Labelled datasets: IDX files and synthetic Gaussian blobs.

use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};
use crate::rng::{stream, Stream};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Inputs in `[0,1]^d` with labels in `0..k`. Examples are stored as columns.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    inputs: DMatrix<f64>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl LabeledDataset {
    /// `inputs` is `d × n`, one example per column.
    pub fn new(inputs: DMatrix<f64>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return invalid("dataset must contain at least one example");
        }
        if inputs.ncols() != labels.len() {
            return invalid(format!(
                "{} input columns but {} labels",
                inputs.ncols(),
                labels.len()
            ));
        }
        if inputs.nrows() == 0 {
            return invalid("input dimension must be positive");
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= num_classes) {
            return invalid(format!(
                "label {bad} out of range for {num_classes} classes"
            ));
        }
        if !inputs.iter().all(|x| (0.0..=1.0).contains(x)) {
            return invalid("inputs must lie in [0, 1]");
        }
        Ok(Self {
            inputs,
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

    pub fn input_dim(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn inputs(&self) -> &DMatrix<f64> {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn example(&self, n: usize) -> (&[f64], usize) {
        let d = self.input_dim();
        (&self.inputs.as_slice()[n * d..(n + 1) * d], self.labels[n])
    }

    /// First `n` examples (all of them if `n >= len`).
    pub fn take(&self, n: usize) -> Self {
        self.subset(&(0..n.min(self.len())).collect::<Vec<_>>())
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            inputs: self.inputs.select_columns(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// Splits off the first `n` examples: `(first n, rest)`.
    pub fn split_at(&self, n: usize) -> (Self, Self) {
        let all: Vec<usize> = (0..self.len()).collect();
        let (a, b) = all.split_at(n.min(self.len()));
        (self.subset(a), self.subset(b))
    }

    /// IDX image and label files. Pixels are written as `round(255·x)`;
    /// images are `28×28` when `d = 784`, otherwise `1×d`.
    pub fn to_idx_bytes(&self) -> (Vec<u8>, Vec<u8>) {
        let n = self.len() as u32;
        let d = self.input_dim();
        let (rows, cols) = if d == 784 { (28, 28) } else { (1, d as u32) };
        let mut images = Vec::with_capacity(16 + self.inputs.len());
        for x in [IDX_IMAGES_MAGIC, n, rows, cols] {
            images.extend_from_slice(&x.to_be_bytes());
        }
        images.extend(self.inputs.iter().map(|&x| (x * 255.0).round() as u8));
        let mut labels = Vec::with_capacity(8 + self.len());
        for x in [IDX_LABELS_MAGIC, n] {
            labels.extend_from_slice(&x.to_be_bytes());
        }
        labels.extend(self.labels.iter().map(|&y| y as u8));
        (images, labels)
    }

    /// SHA-256 over both IDX encodings, hex encoded.
    pub fn content_hash(&self) -> String {
        let (img, lab) = self.to_idx_bytes();
        let mut h = Sha256::new();
        h.update(&img);
        h.update(&lab);
        hex::encode(h.finalize())
    }

    pub fn save_idx(&self, images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<()> {
        let (img, lab) = self.to_idx_bytes();
        std::fs::write(images, img)?;
        std::fs::write(labels, lab)?;
        Ok(())
    }
}

/// Byte cursor that reports the offset of the first failed read.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl Reader<'_> {
    fn u32(&mut self) -> Result<u32> {
        let end = self.pos + 4;
        let chunk = self.bytes.get(self.pos..end).ok_or_else(|| Error::Parse {
            offset: self.pos,
            message: format!("{}: truncated header", self.what),
        })?;
        self.pos = end;
        Ok(u32::from_be_bytes(chunk.try_into().unwrap()))
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let available = self.bytes.len() - self.pos;
        if available < n {
            return Err(Error::Parse {
                offset: self.bytes.len(),
                message: format!(
                    "{}: truncated body, need {n} bytes, found {available}",
                    self.what
                ),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
}

fn expect_magic(r: &mut Reader<'_>, magic: u32) -> Result<()> {
    let got = r.u32()?;
    if got != magic {
        return Err(Error::Parse {
            offset: 0,
            message: format!("{}: bad magic 0x{got:08x}, expected 0x{magic:08x}", r.what),
        });
    }
    Ok(())
}

/// Parses in-memory IDX image and label files. Pixels are scaled by 1/255.
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<LabeledDataset> {
    let mut ri = Reader {
        bytes: images,
        pos: 0,
        what: "images",
    };
    expect_magic(&mut ri, IDX_IMAGES_MAGIC)?;
    let n = ri.u32()? as usize;
    let rows = ri.u32()? as usize;
    let cols = ri.u32()? as usize;
    let d = rows * cols;
    let pixels = ri.take(n * d)?.to_vec();
    if ri.pos != images.len() {
        return Err(Error::Parse {
            offset: ri.pos,
            message: "images: trailing bytes".into(),
        });
    }

    let mut rl = Reader {
        bytes: labels,
        pos: 0,
        what: "labels",
    };
    expect_magic(&mut rl, IDX_LABELS_MAGIC)?;
    let count_offset = rl.pos;
    let nl = rl.u32()? as usize;
    if nl != n {
        return Err(Error::Parse {
            offset: count_offset,
            message: format!("labels: count {nl} does not match {n} images"),
        });
    }
    let raw = rl.take(n)?.to_vec();
    if rl.pos != labels.len() {
        return Err(Error::Parse {
            offset: rl.pos,
            message: "labels: trailing bytes".into(),
        });
    }
    if n == 0 || d == 0 {
        return invalid("IDX files contain no examples");
    }
    let label_vec: Vec<usize> = raw.iter().map(|&b| b as usize).collect();
    let k = label_vec.iter().max().copied().unwrap_or(0) + 1;
    let inputs = DMatrix::from_iterator(d, n, pixels.iter().map(|&p| p as f64 / 255.0));
    LabeledDataset::new(inputs, label_vec, k)
}

pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<LabeledDataset> {
    parse_idx(&std::fs::read(images)?, &std::fs::read(labels)?)
}

/// Gaussian blobs clipped to `[0,1]^d` and quantised to multiples of 1/255 so
/// they survive an IDX round trip. Class centres are `0.5 + separation·(u − 0.5)`
/// with `u` uniform in the unit cube; noise has standard deviation 0.1.
/// Example `n` has label `n mod k`.
pub fn synth_blobs(
    k: usize,
    d: usize,
    n: usize,
    separation: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if k == 0 || d == 0 || n == 0 {
        return invalid("synth_blobs needs k, d, n >= 1");
    }
    let mut rng = stream(seed, Stream::Data);
    let centres: Vec<Vec<f64>> = (0..k)
        .map(|_| {
            (0..d)
                .map(|_| 0.5 + separation * (rng.random::<f64>() - 0.5))
                .collect()
        })
        .collect();
    let mut inputs = DMatrix::zeros(d, n);
    let mut labels = Vec::with_capacity(n);
    for col in 0..n {
        let y = col % k;
        for b in 0..d {
            let noise: f64 = rng.sample(StandardNormal);
            let x = (centres[y][b] + 0.1 * noise).clamp(0.0, 1.0);
            inputs[(b, col)] = (x * 255.0).round() / 255.0;
        }
        labels.push(y);
    }
    LabeledDataset::new(inputs, labels, k)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture_bytes() -> (Vec<u8>, Vec<u8>) {
        let mut img = Vec::new();
        for x in [IDX_IMAGES_MAGIC, 4, 28, 28] {
            img.extend_from_slice(&x.to_be_bytes());
        }
        for i in 0..4 * 784 {
            img.push((i * 7 % 256) as u8);
        }
        let mut lab = Vec::new();
        for x in [IDX_LABELS_MAGIC, 4] {
            lab.extend_from_slice(&x.to_be_bytes());
        }
        lab.extend_from_slice(&[3, 1, 4, 1]);
        (img, lab)
    }

    #[test]
    fn parses_fixture() {
        let (img, lab) = fixture_bytes();
        let ds = parse_idx(&img, &lab).unwrap();
        assert_eq!(ds.len(), 4);
        assert_eq!(ds.input_dim(), 784);
        assert_eq!(ds.num_classes(), 5);
        assert_eq!(ds.example(0).0[0], 0.0);
        assert_eq!(ds.example(0).0[1], 7.0 / 255.0);
        assert_eq!(ds.example(1).0[0], (784 * 7 % 256) as f64 / 255.0);
        assert_eq!(ds.labels(), &[3, 1, 4, 1]);
        let (img2, lab2) = ds.to_idx_bytes();
        assert_eq!(img2, img);
        assert_eq!(lab2, lab);
    }

    #[test]
    fn parse_errors() {
        let (img, lab) = fixture_bytes();
        // labels given the image magic
        let mut wrong = lab.clone();
        wrong[..4].copy_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        assert!(matches!(
            parse_idx(&img, &wrong),
            Err(Error::Parse { offset: 0, .. })
        ));
        assert!(matches!(parse_idx(&[], &lab), Err(Error::Parse { .. })));
        assert!(matches!(
            parse_idx(&img[..img.len() - 3], &lab),
            Err(Error::Parse { .. })
        ));
        let mut short = lab.clone();
        short[4..8].copy_from_slice(&3u32.to_be_bytes());
        short.pop();
        assert!(matches!(
            parse_idx(&img, &short),
            Err(Error::Parse { offset: 4, .. })
        ));
    }

    #[test]
    fn synth_properties() {
        let a = synth_blobs(3, 5, 30, 0.8, 42).unwrap();
        let b = synth_blobs(3, 5, 30, 0.8, 42).unwrap();
        assert_eq!(a.to_idx_bytes(), b.to_idx_bytes());
        assert_ne!(a, synth_blobs(3, 5, 30, 0.8, 43).unwrap());
        assert!(a.inputs().iter().all(|x| (0.0..=1.0).contains(x)));
        let one_each = synth_blobs(4, 2, 4, 1.0, 1).unwrap();
        assert_eq!(one_each.labels(), &[0, 1, 2, 3]);
        assert!(synth_blobs(0, 2, 4, 1.0, 1).is_err());
    }

    #[test]
    fn rejects_out_of_range() {
        assert!(LabeledDataset::new(DMatrix::from_element(2, 1, 1.5), vec![0], 2).is_err());
        assert!(LabeledDataset::new(DMatrix::from_element(2, 1, 0.5), vec![2], 2).is_err());
        assert!(LabeledDataset::new(DMatrix::zeros(2, 0), vec![], 2).is_err());
    }
}
