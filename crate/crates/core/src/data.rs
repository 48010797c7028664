//! Datasets: synthetic 2-D toys and IDX-format MNIST.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    TwoMoons,
    GaussianBlobs,
    MnistSubset,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[N, d]`, every value in `[0, 1]`.
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn subset(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        (
            self.features.gather_rows(idx),
            idx.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    pub fn train_split(&self) -> (Tensor, Vec<usize>) {
        self.subset(&self.train)
    }

    pub fn test_split(&self) -> (Tensor, Vec<usize>) {
        self.subset(&self.test)
    }

    /// Reassigns the train/test split: a seeded shuffle, then the last
    /// `floor(N * test_fraction)` shuffled rows become the test split.
    pub fn with_split(mut self, test_fraction: f64, seed: u64) -> Self {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut rng::stream(seed, "split"));
        let n_test = (self.len() as f64 * test_fraction.clamp(0.0, 1.0)).floor() as usize;
        self.test = idx.split_off(self.len() - n_test);
        self.train = idx;
        self
    }
}

/// Affinely maps each column onto `[0, 1]`; constant columns map to 0.5.
fn rescale_columns(rows: &mut [[f64; 2]]) {
    for c in 0..2 {
        let lo = rows.iter().map(|r| r[c]).fold(f64::INFINITY, f64::min);
        let hi = rows.iter().map(|r| r[c]).fold(f64::NEG_INFINITY, f64::max);
        for r in rows.iter_mut() {
            r[c] = if hi > lo {
                ((r[c] - lo) / (hi - lo)).clamp(0.0, 1.0)
            } else {
                0.5
            };
        }
    }
}

fn toy(
    rows: Vec<[f64; 2]>,
    labels: Vec<usize>,
    num_classes: usize,
    provenance: Provenance,
    seed: u64,
) -> Dataset {
    let mut rows = rows;
    rescale_columns(&mut rows);
    let n = rows.len();
    Dataset {
        features: Tensor::matrix(n, 2, rows.into_iter().flatten().collect()),
        labels,
        num_classes,
        train: (0..n).collect(),
        test: Vec::new(),
        provenance,
    }
    .with_split(0.2, seed)
}

/// Two interleaving half circles, `n / 2` points in class 0 and the rest in class 1.
pub fn gen_two_moons(n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::Config(format!("two moons needs n >= 2, got {n}")));
    }
    let mut r = rng::stream(seed, "two-moons");
    let n_outer = n / 2;
    let n_inner = n - n_outer;
    let angle = |i: usize, m: usize| {
        if m <= 1 {
            0.0
        } else {
            std::f64::consts::PI * i as f64 / (m - 1) as f64
        }
    };
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n_outer {
        let t = angle(i, n_outer);
        rows.push([t.cos(), t.sin()]);
        labels.push(0);
    }
    for i in 0..n_inner {
        let t = angle(i, n_inner);
        rows.push([1.0 - t.cos(), 0.5 - t.sin()]);
        labels.push(1);
    }
    for row in &mut rows {
        for v in row.iter_mut() {
            *v += noise * r.sample::<f64, _>(StandardNormal);
        }
    }
    Ok(toy(rows, labels, 2, Provenance::TwoMoons, seed))
}

/// Isotropic Gaussian clusters around `centers` points drawn in `[-5, 5]²`;
/// example `i` belongs to cluster `i mod centers`.
pub fn gen_blobs(n: usize, centers: usize, spread: f64, seed: u64) -> Result<Dataset> {
    if n < 2 || centers == 0 {
        return Err(Error::Config(format!(
            "blobs needs n >= 2 and at least one center, got n={n} centers={centers}"
        )));
    }
    let mut rc = rng::stream(seed, "blobs-centers");
    let means: Vec<[f64; 2]> = (0..centers)
        .map(|_| [rc.gen_range(-5.0..5.0), rc.gen_range(-5.0..5.0)])
        .collect();
    let mut r = rng::stream(seed, "blobs-points");
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % centers;
        rows.push([
            means[c][0] + spread * r.sample::<f64, _>(StandardNormal),
            means[c][1] + spread * r.sample::<f64, _>(StandardNormal),
        ]);
        labels.push(c);
    }
    Ok(toy(rows, labels, centers, Provenance::GaussianBlobs, seed))
}

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    let s = bytes.get(offset..offset + 4).ok_or(Error::Truncated {
        offset,
        needed: 4,
        available: bytes.len().saturating_sub(offset),
    })?;
    Ok(u32::from_be_bytes(s.try_into().expect("4 bytes")))
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<()> {
    let found = be_u32(bytes, 0)?;
    if found != expected {
        return Err(Error::BadMagic {
            offset: 0,
            expected,
            found,
        });
    }
    Ok(())
}

fn payload(bytes: &[u8], offset: usize, needed: usize) -> Result<&[u8]> {
    bytes.get(offset..offset + needed).ok_or(Error::Truncated {
        offset,
        needed,
        available: bytes.len().saturating_sub(offset),
    })
}

/// Parses IDX image and label files; pixels are scaled by `1/255`.
pub fn parse_mnist_idx(images: &[u8], labels: &[u8], limit: Option<usize>) -> Result<Dataset> {
    check_magic(images, IMAGES_MAGIC)?;
    check_magic(labels, LABELS_MAGIC)?;
    let n_images = be_u32(images, 4)? as usize;
    let rows = be_u32(images, 8)? as usize;
    let cols = be_u32(images, 12)? as usize;
    let n_labels = be_u32(labels, 4)? as usize;
    if n_images != n_labels {
        return Err(Error::CountMismatch {
            images: n_images,
            labels: n_labels,
        });
    }
    let n = limit.map_or(n_images, |l| l.min(n_images));
    let d = rows * cols;
    let pixels = payload(images, 16, n_images * d)?;
    let raw_labels = payload(labels, 8, n_labels)?;

    let features = pixels[..n * d]
        .iter()
        .map(|&p| f64::from(p) / 255.0)
        .collect();
    let labels: Vec<usize> = raw_labels[..n].iter().map(|&l| usize::from(l)).collect();
    if let Some((row, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= 10) {
        return Err(Error::LabelOutOfRange {
            row,
            label,
            classes: 10,
        });
    }
    Ok(Dataset {
        features: Tensor::matrix(n, d, features),
        labels,
        num_classes: 10,
        train: (0..n).collect(),
        test: Vec::new(),
        provenance: Provenance::MnistSubset,
    })
}

/// Reads IDX files from disk; `limit` keeps the first rows.
pub fn load_mnist_idx(
    images_path: &Path,
    labels_path: &Path,
    limit: Option<usize>,
) -> Result<Dataset> {
    let images = fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let labels = fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    parse_mnist_idx(&images, &labels, limit)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_images(n: u32, pixels: &[u8]) -> Vec<u8> {
        let mut v = IMAGES_MAGIC.to_be_bytes().to_vec();
        v.extend(n.to_be_bytes());
        v.extend(2u32.to_be_bytes());
        v.extend(2u32.to_be_bytes());
        v.extend(pixels);
        v
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut v = LABELS_MAGIC.to_be_bytes().to_vec();
        v.extend((labels.len() as u32).to_be_bytes());
        v.extend(labels);
        v
    }

    #[test]
    fn parses_and_scales_pixels() {
        let images = idx_images(2, &[0, 255, 51, 0, 1, 2, 3, 4]);
        let d = parse_mnist_idx(&images, &idx_labels(&[7, 3]), None).unwrap();
        assert_eq!(d.features.shape(), &[2, 4]);
        assert_eq!(d.features.data()[1], 1.0);
        assert_eq!(d.features.data()[2], 0.2);
        assert_eq!(d.labels, vec![7, 3]);
        let one = parse_mnist_idx(&images, &idx_labels(&[7, 3]), Some(1)).unwrap();
        assert_eq!(one.labels, vec![7]);
    }

    #[test]
    fn wrong_magic_truncation_and_count_mismatch() {
        let mut images = idx_images(1, &[0, 0, 0, 0]);
        images[3] = 0x04;
        assert!(matches!(
            parse_mnist_idx(&images, &idx_labels(&[1]), None),
            Err(Error::BadMagic {
                offset: 0,
                expected: 0x803,
                found: 0x804
            })
        ));
        let short = idx_images(1, &[0, 0, 0]);
        assert!(matches!(
            parse_mnist_idx(&short, &idx_labels(&[1]), None),
            Err(Error::Truncated {
                offset: 16,
                needed: 4,
                available: 3
            })
        ));
        let images = idx_images(1, &[0, 0, 0, 0]);
        assert!(matches!(
            parse_mnist_idx(&images, &idx_labels(&[1, 2]), None),
            Err(Error::CountMismatch {
                images: 1,
                labels: 2
            })
        ));
    }

    #[test]
    fn two_points_give_one_per_class() {
        let d = gen_two_moons(2, 0.1, 3).unwrap();
        assert_eq!(d.labels, vec![0, 1]);
        let d = gen_blobs(2, 2, 0.5, 3).unwrap();
        assert_eq!(d.labels, vec![0, 1]);
    }

    #[test]
    fn toys_are_in_unit_square_and_split_disjointly() {
        for d in [
            gen_two_moons(101, 0.2, 1).unwrap(),
            gen_blobs(90, 3, 1.0, 1).unwrap(),
        ] {
            assert!(d.features.data().iter().all(|v| (0.0..=1.0).contains(v)));
            let mut all: Vec<usize> = d.train.iter().chain(&d.test).copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..d.len()).collect::<Vec<_>>());
            assert!(!d.test.is_empty());
        }
        assert_eq!(
            gen_two_moons(50, 0.1, 9).unwrap(),
            gen_two_moons(50, 0.1, 9).unwrap()
        );
    }
}
