use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Element, Shape4, Tensor4};

/// Labelled images held as one `(n, c, h, w)` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    pub images: Tensor4<T>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl<T: Element> Dataset<T> {
    pub fn new(images: Tensor4<T>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.shape().n != labels.len() {
            return Err(Error::dim(
                "n",
                format!("{} images but {} labels", images.shape().n, labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Range(format!("label {bad} outside 0..{classes}")));
        }
        Ok(Self {
            images,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample shape with `n == 1`.
    pub fn sample_shape(&self) -> Shape4 {
        Shape4 {
            n: 1,
            ..self.images.shape()
        }
    }

    /// Gathers the listed samples into a batch.
    pub fn batch(&self, indices: &[usize]) -> (Tensor4<T>, Vec<usize>) {
        let per = self.sample_shape().numel();
        let mut data = Vec::with_capacity(per * indices.len());
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        let shape = Shape4 {
            n: indices.len(),
            ..self.images.shape()
        };
        let images = Tensor4::from_vec(shape, data).expect("batch length matches its shape");
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (images, labels)
    }

    /// Splits off the last `count` samples; both parts must be non-empty.
    pub fn split_tail(&self, count: usize) -> Result<(Self, Self)> {
        let n = self.len();
        if count == 0 || count >= n {
            return Err(Error::Config(format!(
                "cannot split {count} of {n} samples into two non-empty sets"
            )));
        }
        let cut = n - count;
        let head: Vec<usize> = (0..cut).collect();
        let tail: Vec<usize> = (cut..n).collect();
        let (a, la) = self.batch(&head);
        let (b, lb) = self.batch(&tail);
        Ok((
            Self {
                images: a,
                labels: la,
                classes: self.classes,
            },
            Self {
                images: b,
                labels: lb,
                classes: self.classes,
            },
        ))
    }
}

/// Single-channel images of Gaussian blobs. Class `c` puts its blob near the
/// `c`-th of `classes` points on a circle around the image centre; blob
/// position jitter and pixel noise are small enough that the classes stay
/// linearly separable.
pub fn synthetic_blobs<T: Element>(
    count: usize,
    classes: usize,
    size: usize,
    seed: u64,
) -> Result<Dataset<T>> {
    if classes == 0 || size < 4 {
        return Err(Error::Config(
            "synthetic data needs at least one class and 4x4 images".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.05).expect("valid std");
    let jitter = Normal::new(0.0, size as f64 / 32.0).expect("valid std");
    let centre = (size as f64 - 1.0) / 2.0;
    let radius = size as f64 * 0.3;
    let sigma = size as f64 / 8.0;

    let mut labels = Vec::with_capacity(count);
    let mut data = Vec::with_capacity(count * size * size);
    for i in 0..count {
        let class = i % classes;
        let angle = 2.0 * PI * class as f64 / classes as f64;
        let cy = centre + radius * angle.sin() + jitter.sample(&mut rng);
        let cx = centre + radius * angle.cos() + jitter.sample(&mut rng);
        let amp = rng.random_range(0.8..1.2);
        for y in 0..size {
            for x in 0..size {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                let v = amp * (-d2 / (2.0 * sigma * sigma)).exp() + noise.sample(&mut rng);
                data.push(T::from_f64_lossy(v));
            }
        }
        labels.push(class);
    }
    let images = Tensor4::from_vec(Shape4::new(count, 1, size, size), data)?;
    Dataset::new(images, labels, classes)
}

pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// Reads a CIFAR-10 binary batch: records of one label byte followed by
/// 3072 pixel bytes (planar RGB, 32x32). Pixels are scaled to `[0, 1]`.
pub fn load_cifar10_bin<T: Element>(path: &Path) -> Result<Dataset<T>> {
    let bytes = std::fs::read(path)?;
    parse_cifar10_bin(&bytes)
}

pub fn parse_cifar10_bin<T: Element>(bytes: &[u8]) -> Result<Dataset<T>> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD) {
        let offset = bytes.len() - bytes.len() % CIFAR_RECORD;
        return Err(Error::Format {
            offset: offset as u64,
            message: format!(
                "length {} is not a positive multiple of the {CIFAR_RECORD}-byte record",
                bytes.len()
            ),
        });
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] >= 10 {
            return Err(Error::Format {
                offset: (i * CIFAR_RECORD) as u64,
                message: format!("label byte {} outside 0..10", rec[0]),
            });
        }
        labels.push(rec[0] as usize);
        data.extend(
            rec[1..]
                .iter()
                .map(|&b| T::from_f64_lossy(b as f64 / 255.0)),
        );
    }
    let images = Tensor4::from_vec(Shape4::new(n, 3, 32, 32), data)?;
    Dataset::new(images, labels, 10)
}

/// Normalised mean error over `N` landmarks: the mean Euclidean distance
/// divided by `sqrt(bbox_w * bbox_h)`.
pub fn nme(pred: &[(f64, f64)], gt: &[(f64, f64)], bbox_w: f64, bbox_h: f64) -> Result<f64> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::dim(
            "landmarks",
            format!(
                "{} predicted vs {} ground-truth landmarks",
                pred.len(),
                gt.len()
            ),
        ));
    }
    if bbox_w <= 0.0 || bbox_h <= 0.0 {
        return Err(Error::Range(format!(
            "bounding box {bbox_w}x{bbox_h} must be positive"
        )));
    }
    let d = (bbox_w * bbox_h).sqrt();
    let total: f64 = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| (p.0 - g.0).hypot(p.1 - g.1))
        .sum();
    Ok(total / pred.len() as f64 / d)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nme_examples() {
        let gt = [(1.0, 2.0), (3.0, 4.0)];
        assert_eq!(nme(&gt, &gt, 10.0, 10.0).unwrap(), 0.0);
        assert_eq!(nme(&[(3.0, 4.0)], &[(0.0, 0.0)], 25.0, 4.0).unwrap(), 0.5);
        assert!(matches!(nme(&gt, &gt, 0.0, 1.0), Err(Error::Range(_))));
        assert!(nme(&gt, &gt[..1], 1.0, 1.0).is_err());
    }

    #[test]
    fn nme_random_matches_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 68;
        let pred: Vec<(f64, f64)> = (0..n).map(|_| (rng.random(), rng.random())).collect();
        let gt: Vec<(f64, f64)> = (0..n).map(|_| (rng.random(), rng.random())).collect();
        let (w, h): (f64, f64) = (3.0, 5.0);
        let mut acc = 0.0;
        for i in 0..n {
            let dx = pred[i].0 - gt[i].0;
            let dy = pred[i].1 - gt[i].1;
            acc += (dx * dx + dy * dy).sqrt() / (w * h).sqrt();
        }
        let expect = acc / n as f64;
        assert!((nme(&pred, &gt, w, h).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn blobs_are_deterministic_and_balanced() {
        let a = synthetic_blobs::<f32>(50, 10, 16, 7).unwrap();
        let b = synthetic_blobs::<f32>(50, 10, 16, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.images.shape(), Shape4::new(50, 1, 16, 16));
        for c in 0..10 {
            assert_eq!(a.labels.iter().filter(|&&l| l == c).count(), 5);
        }
    }

    #[test]
    fn cifar_parse() {
        let mut bytes = vec![0u8; 2 * CIFAR_RECORD];
        bytes[0] = 3;
        bytes[1] = 255;
        bytes[CIFAR_RECORD] = 9;
        let d = parse_cifar10_bin::<f32>(&bytes).unwrap();
        assert_eq!(d.labels, vec![3, 9]);
        assert_eq!(d.images.data()[0], 1.0);
        assert_eq!(d.images.shape(), Shape4::new(2, 3, 32, 32));

        match parse_cifar10_bin::<f32>(&bytes[..CIFAR_RECORD + 5]) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, CIFAR_RECORD as u64),
            other => panic!("{other:?}"),
        }
        bytes[CIFAR_RECORD] = 10;
        match parse_cifar10_bin::<f32>(&bytes) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, CIFAR_RECORD as u64),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn batch_and_split() {
        let d = synthetic_blobs::<f64>(10, 5, 8, 1).unwrap();
        let (x, y) = d.batch(&[3, 1]);
        assert_eq!(x.shape(), Shape4::new(2, 1, 8, 8));
        assert_eq!(y, vec![3, 1]);
        assert_eq!(x.plane(0, 0), d.images.plane(3, 0));
        let (train, test) = d.split_tail(4).unwrap();
        assert_eq!((train.len(), test.len()), (6, 4));
    }
}
