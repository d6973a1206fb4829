//! Datasets: a seeded synthetic image task and IDX (MNIST layout) files.

use std::path::{Path, PathBuf};

use bitlock_core::nn::Batch;
use bitlock_core::rng;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Ten-class images built from class-specific blob layouts with random
    /// shifts, intensity jitter and pixel noise.
    Synthetic {
        #[serde(default = "default_classes")]
        classes: usize,
        #[serde(default = "default_side")]
        side: usize,
        train: usize,
        val: usize,
        test: usize,
        #[serde(default = "default_noise")]
        pixel_noise: f64,
        #[serde(default)]
        seed: u64,
    },
    /// IDX files; `val` samples are held out of the training file.
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        val: usize,
        #[serde(default)]
        seed: u64,
    },
}

fn default_classes() -> usize {
    10
}

fn default_side() -> usize {
    16
}

fn default_noise() -> f64 {
    0.12
}

impl DatasetSpec {
    pub fn input_shape(&self) -> Result<[usize; 3]> {
        match self {
            DatasetSpec::Synthetic { side, .. } => Ok([1, *side, *side]),
            DatasetSpec::Idx { train_images, .. } => {
                let bytes = read(train_images)?;
                let idx = parse_idx(&bytes)?;
                match idx.dims.as_slice() {
                    [_, rows, cols] => Ok([1, *rows, *cols]),
                    _ => Err(HarnessError::Idx {
                        offset: 3,
                        message: format!("expected 3-D image tensor, got {} dimensions", idx.dims.len()),
                    }),
                }
            }
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            DatasetSpec::Synthetic { classes, .. } => *classes,
            DatasetSpec::Idx { .. } => 10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            DatasetSpec::Synthetic {
                classes,
                side,
                train,
                val,
                test,
                pixel_noise,
                ..
            } => {
                if *classes < 2 || *side < 4 || *train == 0 || *val == 0 || *test == 0 {
                    return Err(HarnessError::Config("synthetic dataset too small".into()));
                }
                if !(pixel_noise.is_finite() && *pixel_noise >= 0.0) {
                    return Err(HarnessError::Config("pixel noise must be >= 0".into()));
                }
                Ok(())
            }
            DatasetSpec::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                ..
            } => {
                for p in [train_images, train_labels, test_images, test_labels] {
                    if !p.is_file() {
                        return Err(HarnessError::Config(format!("dataset file {} does not exist", p.display())));
                    }
                }
                Ok(())
            }
        }
    }
}

/// Disjoint train / validation / test / attack splits.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Batch,
    pub val: Batch,
    pub test: Batch,
    /// Attacker's data, `BS` samples disjoint from all other splits.
    pub attack: Batch,
}

impl Splits {
    /// Hex SHA-256 of a split's pixels and labels.
    pub fn hash(batch: &Batch) -> String {
        let mut h = Sha256::new();
        for (x, y) in batch.inputs().iter().zip(batch.labels()) {
            for v in x {
                h.update([(v * 255.0).round() as u8]);
            }
            h.update((*y as u32).to_le_bytes());
        }
        format!("{:x}", h.finalize())
    }
}

struct Blob {
    row: f64,
    col: f64,
    sigma: f64,
    amplitude: f64,
}

fn class_layouts(classes: usize, side: usize, seed: u64) -> Vec<Vec<Blob>> {
    let mut rng = rng::stream(seed, &[0x6c61_796f]);
    let margin = side as f64 * 0.2;
    (0..classes)
        .map(|_| {
            (0..4)
                .map(|_| Blob {
                    row: rng.random_range(margin..side as f64 - margin),
                    col: rng.random_range(margin..side as f64 - margin),
                    sigma: rng.random_range(1.0..2.5),
                    amplitude: rng.random_range(0.5..1.0),
                })
                .collect()
        })
        .collect()
}

fn render(layout: &[Blob], side: usize, noise: f64, rng: &mut rng::Rng) -> Vec<u8> {
    let dr = rng.random_range(-2..=2) as f64;
    let dc = rng.random_range(-2..=2) as f64;
    let gains: Vec<f64> = layout.iter().map(|_| rng.random_range(0.6..1.4)).collect();
    let pixel = Normal::new(0.0, noise.max(f64::MIN_POSITIVE)).expect("finite std");
    let mut out = Vec::with_capacity(side * side);
    for r in 0..side {
        for c in 0..side {
            let mut v = 0.0;
            for (b, g) in layout.iter().zip(&gains) {
                let d2 = (r as f64 - b.row - dr).powi(2) + (c as f64 - b.col - dc).powi(2);
                v += g * b.amplitude * (-d2 / (2.0 * b.sigma * b.sigma)).exp();
            }
            if noise > 0.0 {
                v += pixel.sample(rng);
            }
            out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out
}

/// `n` synthetic samples with balanced, shuffled labels.
pub fn synthetic(classes: usize, side: usize, n: usize, pixel_noise: f64, seed: u64, stream: u64) -> Result<Batch> {
    let layouts = class_layouts(classes, side, seed);
    let mut rng = rng::stream(seed, &[0x7361_6d70, stream]);
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(&mut rng);
    let pixels = labels.iter().map(|&y| render(&layouts[y], side, pixel_noise, &mut rng)).collect();
    Ok(Batch::from_u8(pixels, labels)?)
}

/// Build the four splits. The attack split holds `attack_size` samples.
pub fn make_dataset(spec: &DatasetSpec, attack_size: usize) -> Result<Splits> {
    spec.validate()?;
    match spec {
        DatasetSpec::Synthetic {
            classes,
            side,
            train,
            val,
            test,
            pixel_noise,
            seed,
        } => {
            // One stream per split keeps them independent draws of the same
            // distribution, so no sample can appear in two splits by index.
            let make = |n: usize, s: u64| synthetic(*classes, *side, n, *pixel_noise, *seed, s);
            Ok(Splits {
                train: make(*train, 0)?,
                val: make(*val, 1)?,
                test: make(*test, 2)?,
                attack: make(attack_size, 3)?,
            })
        }
        DatasetSpec::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
            val,
            seed,
        } => {
            let pool = load_idx_pair(train_images, train_labels)?;
            let test = load_idx_pair(test_images, test_labels)?;
            if pool.len() < val + attack_size + 1 {
                return Err(HarnessError::Config(format!(
                    "training file has {} samples, need more than val + attack = {}",
                    pool.len(),
                    val + attack_size
                )));
            }
            let mut order: Vec<usize> = (0..pool.len()).collect();
            order.shuffle(&mut rng::stream(*seed, &[0x6964_7873]));
            let (v, rest) = order.split_at(*val);
            let (a, t) = rest.split_at(attack_size);
            Ok(Splits {
                train: pool.select(t),
                val: pool.select(v),
                test,
                attack: pool.select(a),
            })
        }
    }
}

/// A parsed IDX file holding unsigned bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

/// Parse an IDX buffer. Only the unsigned-byte element type (0x08) is
/// accepted; errors report the byte offset of the offending field.
pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray> {
    let err = |offset: usize, message: String| HarnessError::Idx { offset, message };
    if bytes.len() < 4 {
        return Err(err(bytes.len(), "file shorter than the 4-byte magic number".into()));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(err(0, format!("magic number must start with two zero bytes, got {:02x}{:02x}", bytes[0], bytes[1])));
    }
    if bytes[2] != 0x08 {
        return Err(err(2, format!("unsupported element type 0x{:02x} (only 0x08 unsigned byte)", bytes[2])));
    }
    let ndims = bytes[3] as usize;
    if ndims == 0 {
        return Err(err(3, "zero dimensions".into()));
    }
    let header = 4 + 4 * ndims;
    if bytes.len() < header {
        return Err(err(bytes.len(), format!("header needs {header} bytes for {ndims} dimensions")));
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| err(4, "dimension product overflows".into()))?;
    if bytes.len() != header + count {
        return Err(err(
            header,
            format!("expected {count} data bytes after the header, found {}", bytes.len() - header),
        ));
    }
    Ok(IdxArray {
        dims,
        data: bytes[header..].to_vec(),
    })
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| HarnessError::io(path, e))
}

/// Images (`n × rows × cols`) and labels (`n`) into a batch.
pub fn idx_to_batch(images: &IdxArray, labels: &IdxArray) -> Result<Batch> {
    let [n, rows, cols] = images.dims[..] else {
        return Err(HarnessError::Idx {
            offset: 3,
            message: format!("image file must be 3-D, got {} dimensions", images.dims.len()),
        });
    };
    if labels.dims != [n] {
        return Err(HarnessError::Idx {
            offset: 4,
            message: format!("label file holds {:?} entries for {n} images", labels.dims),
        });
    }
    let pixels = images.data.chunks_exact(rows * cols).map(<[u8]>::to_vec).collect();
    let ys = labels.data.iter().map(|&y| y as usize).collect();
    Ok(Batch::from_u8(pixels, ys)?)
}

pub fn load_idx_pair(images: &Path, labels: &Path) -> Result<Batch> {
    idx_to_batch(&parse_idx(&read(images)?)?, &parse_idx(&read(labels)?)?)
}

/// Encode an unsigned-byte IDX buffer.
pub fn write_idx(dims: &[usize], data: &[u8]) -> Vec<u8> {
    let mut out = vec![0, 0, 0x08, dims.len() as u8];
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(data);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn idx_header_oracle() {
        // Hand-assembled: magic 0x00000803, dims 2 × 2 × 3.
        let mut bytes = vec![0x00, 0x00, 0x08, 0x03, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 3];
        bytes.extend(0..12u8);
        let idx = parse_idx(&bytes).unwrap();
        assert_eq!(idx.dims, vec![2, 2, 3]);
        assert_eq!(idx.data[11], 11);
        assert_eq!(write_idx(&[2, 2, 3], &idx.data), bytes);
    }

    #[test]
    fn idx_errors_carry_offsets() {
        let offset = |b: &[u8]| match parse_idx(b) {
            Err(HarnessError::Idx { offset, .. }) => offset,
            other => panic!("expected IDX error, got {other:?}"),
        };
        assert_eq!(offset(&[0, 0]), 2);
        assert_eq!(offset(&[1, 0, 8, 1]), 0);
        assert_eq!(offset(&[0, 0, 0x0d, 1]), 2);
        assert_eq!(offset(&[0, 0, 8, 0]), 3);
        assert_eq!(offset(&[0, 0, 8, 2, 0, 0, 0, 1]), 8);
        assert_eq!(offset(&[0, 0, 8, 1, 0, 0, 0, 3, 1, 2]), 8);
    }

    #[test]
    fn synthetic_splits_are_seeded_and_disjoint() {
        let spec = DatasetSpec::Synthetic {
            classes: 10,
            side: 16,
            train: 200,
            val: 50,
            test: 50,
            pixel_noise: 0.12,
            seed: 7,
        };
        let a = make_dataset(&spec, 16).unwrap();
        let b = make_dataset(&spec, 16).unwrap();
        assert_eq!(Splits::hash(&a.train), Splits::hash(&b.train));
        assert_eq!(a.attack.len(), 16);
        let test: std::collections::HashSet<Vec<u64>> =
            a.test.inputs().iter().map(|x| x.iter().map(|v| v.to_bits()).collect()).collect();
        assert!(a.attack.inputs().iter().all(|x| !test.contains(&x.iter().map(|v| v.to_bits()).collect::<Vec<_>>())));
        let counts = (0..10).map(|c| a.train.labels().iter().filter(|&&y| y == c).count());
        assert!(counts.into_iter().all(|n| n == 20));
    }

    #[test]
    fn idx_roundtrip_through_files() {
        let dir = std::env::temp_dir().join(format!("bitlock-idx-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let images: Vec<u8> = (0..5 * 4 * 4).map(|i| (i * 3 % 256) as u8).collect();
        std::fs::write(dir.join("img"), write_idx(&[5, 4, 4], &images)).unwrap();
        std::fs::write(dir.join("lbl"), write_idx(&[5], &[0, 1, 2, 3, 4])).unwrap();
        let batch = load_idx_pair(&dir.join("img"), &dir.join("lbl")).unwrap();
        assert_eq!(batch.len(), 5);
        assert_eq!(batch.input(1)[0], 48.0 / 255.0);
        assert_eq!(batch.label(4), 4);
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
