//! Dataset ingestion: MNIST IDX files and a deterministic synthetic
//! generator for CI environments without the real data.

use std::fs::File;
use std::io::Read;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone)]
pub struct Dataset {
    /// [n, features...]; values in [-1, 1].
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    /// Gather a batch by sample indices, flattened to [b, features...].
    pub fn batch(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        let feat: usize = self.sample_shape().iter().product();
        let mut data = Vec::with_capacity(idx.len() * feat);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            data.extend_from_slice(&self.images.data()[i * feat..(i + 1) * feat]);
            labels.push(self.labels[i]);
        }
        let mut shape = vec![idx.len()];
        shape.extend_from_slice(self.sample_shape());
        (Tensor::from_vec(&shape, data).expect("sized"), labels)
    }

    /// Keep only the first n samples.
    pub fn truncated(mut self, n: usize) -> Dataset {
        if n >= self.len() {
            return self;
        }
        let feat: usize = self.sample_shape().iter().product();
        let mut shape = vec![n];
        shape.extend_from_slice(self.sample_shape());
        self.images = Tensor::from_vec(&shape, self.images.data()[..n * feat].to_vec())
            .expect("sized");
        self.labels.truncate(n);
        self
    }
}

fn read_u32_be(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_be_bytes(buf))
}

fn load_idx_images(path: &Path) -> Result<Tensor> {
    let mut f = File::open(path)?;
    let magic = read_u32_be(&mut f)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(format!(
            "{}: image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}",
            path.display()
        )));
    }
    let n = read_u32_be(&mut f)? as usize;
    let rows = read_u32_be(&mut f)? as usize;
    let cols = read_u32_be(&mut f)? as usize;
    let mut raw = vec![0u8; n * rows * cols];
    f.read_exact(&mut raw)?;
    let data: Vec<f64> = raw.iter().map(|&b| b as f64 / 255.0 * 2.0 - 1.0).collect();
    Tensor::from_vec(&[n, rows * cols], data)
}

fn load_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let mut f = File::open(path)?;
    let magic = read_u32_be(&mut f)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(format!(
            "{}: label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}",
            path.display()
        )));
    }
    let n = read_u32_be(&mut f)? as usize;
    let mut raw = vec![0u8; n];
    f.read_exact(&mut raw)?;
    Ok(raw.iter().map(|&b| b as usize).collect())
}

/// Load the MNIST train or test split from IDX files in `dir`. Pixels are
/// normalized to [-1, 1]; labels are 0-9.
pub fn load_mnist(dir: &Path, train: bool) -> Result<Dataset> {
    let prefix = if train { "train" } else { "t10k" };
    let images = load_idx_images(&dir.join(format!("{prefix}-images-idx3-ubyte")))?;
    let labels = load_idx_labels(&dir.join(format!("{prefix}-labels-idx1-ubyte")))?;
    if images.shape()[0] != labels.len() {
        return Err(Error::format(format!(
            "image count {} does not match label count {}",
            images.shape()[0],
            labels.len()
        )));
    }
    Ok(Dataset {
        images,
        labels,
        classes: 10,
    })
}

/// Deterministic synthetic classification data. Classes share one base
/// pattern and differ by sign flips on a sparse informative subset, so the
/// class signal survives activation binarization; additive noise controls
/// difficulty, and amplitude jitter plus class-parity feature pairs add
/// nonlinear structure.
pub fn synthetic(
    seed: u64,
    n: usize,
    features: usize,
    classes: usize,
    noise: f64,
) -> Dataset {
    let mut proto_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x70726f746f);
    // Weak distributed signal: every feature carries a small class-specific
    // sign, so accuracy depends on how many inputs each unit can reach.
    let prototypes: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            (0..features)
                .map(|_| {
                    let m = proto_rng.gen_range(0.25..0.45);
                    if proto_rng.gen_bool(0.5) {
                        m
                    } else {
                        -m
                    }
                })
                .collect()
        })
        .collect();
    // class-parity sign structure over a few feature pairs
    let pair_count = (features / 16).clamp(1, 16);
    let pairs: Vec<(usize, usize)> = (0..pair_count)
        .map(|_| {
            (
                proto_rng.gen_range(0..features),
                proto_rng.gen_range(0..features),
            )
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n * features);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        labels.push(c);
        let amp = rng.gen_range(0.8..1.2);
        let mut x: Vec<f64> = prototypes[c]
            .iter()
            .map(|&p| (p * amp + rng.gen_range(-noise..noise)).clamp(-1.0, 1.0))
            .collect();
        for (pi, &(a, b)) in pairs.iter().enumerate() {
            let want = if (c >> (pi % 4)) & 1 == 1 { 1.0 } else { -1.0 };
            if (x[a] * x[b]).signum() != want {
                x[b] = -x[b];
            }
        }
        data.extend_from_slice(&x);
    }
    Dataset {
        images: Tensor::from_vec(&[n, features], data).expect("sized"),
        labels,
        classes,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_idx_images(path: &Path, n: usize, rows: usize, cols: usize) {
        let mut f = File::create(path).unwrap();
        f.write_all(&IDX_IMAGES_MAGIC.to_be_bytes()).unwrap();
        f.write_all(&(n as u32).to_be_bytes()).unwrap();
        f.write_all(&(rows as u32).to_be_bytes()).unwrap();
        f.write_all(&(cols as u32).to_be_bytes()).unwrap();
        let px: Vec<u8> = (0..n * rows * cols).map(|i| (i % 256) as u8).collect();
        f.write_all(&px).unwrap();
    }

    fn write_idx_labels(path: &Path, n: usize) {
        let mut f = File::create(path).unwrap();
        f.write_all(&IDX_LABELS_MAGIC.to_be_bytes()).unwrap();
        f.write_all(&(n as u32).to_be_bytes()).unwrap();
        let ls: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
        f.write_all(&ls).unwrap();
    }

    #[test]
    fn idx_round_trip_and_pixel_range() {
        let dir = tempfile::tempdir().unwrap();
        write_idx_images(&dir.path().join("train-images-idx3-ubyte"), 12, 4, 4);
        write_idx_labels(&dir.path().join("train-labels-idx1-ubyte"), 12);
        let ds = load_mnist(dir.path(), true).unwrap();
        assert_eq!(ds.len(), 12);
        assert_eq!(ds.sample_shape(), &[16]);
        assert!(ds
            .images
            .data()
            .iter()
            .all(|&v| (-1.0..=1.0).contains(&v)));
        assert_eq!(ds.labels[3], 3);
    }

    #[test]
    fn idx_magic_mismatch_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        // swap the files: labels where images belong
        write_idx_labels(&dir.path().join("train-images-idx3-ubyte"), 4);
        write_idx_labels(&dir.path().join("train-labels-idx1-ubyte"), 4);
        match load_mnist(dir.path(), true) {
            Err(Error::Format(_)) => {}
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn synthetic_is_deterministic_per_seed() {
        let a = synthetic(9, 64, 32, 10, 0.3);
        let b = synthetic(9, 64, 32, 10, 0.3);
        let c = synthetic(10, 64, 32, 10, 0.3);
        assert_eq!(a.images.data(), b.images.data());
        assert_eq!(a.labels, b.labels);
        assert_ne!(a.images.data(), c.images.data());
    }

    #[test]
    fn batch_gathers_rows() {
        let ds = synthetic(1, 10, 4, 2, 0.1);
        let (x, y) = ds.batch(&[3, 7]);
        assert_eq!(x.shape(), &[2, 4]);
        assert_eq!(y, vec![ds.labels[3], ds.labels[7]]);
        assert_eq!(&x.data()[..4], &ds.images.data()[12..16]);
    }
}
