use crate::error::{Error, Result};
use crate::tensor::{lit, Element, Tensor4};

/// Mean softmax cross-entropy over the batch. `logits` is `(n, k, 1, 1)`.
/// Returns the loss and its gradient with respect to the logits.
pub fn cross_entropy_loss<T: Element>(
    logits: &Tensor4<T>,
    labels: &[usize],
) -> Result<(T, Tensor4<T>)> {
    let s = logits.shape();
    if s.h != 1 || s.w != 1 {
        return Err(Error::dim(
            "h",
            format!("logits must be (n, k, 1, 1), got {s}"),
        ));
    }
    if labels.len() != s.n {
        return Err(Error::dim(
            "n",
            format!("{} labels for a batch of {}", labels.len(), s.n),
        ));
    }
    let k = s.c;
    let inv_n = lit::<T>(1.0 / s.n as f64);
    let mut grad = Tensor4::zeros(s);
    let mut total = T::zero();
    for (i, (&label, row)) in labels.iter().zip(logits.data().chunks(k)).enumerate() {
        if label >= k {
            return Err(Error::Range(format!("label {label} outside 0..{k}")));
        }
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let sum: T = row.iter().map(|&z| (z - max).exp()).sum();
        let log_z = max + sum.ln();
        total = total + log_z - row[label];
        let g = &mut grad.data_mut()[i * k..(i + 1) * k];
        for (gj, &z) in g.iter_mut().zip(row) {
            *gj = (z - log_z).exp() * inv_n;
        }
        g[label] = g[label] - inv_n;
    }
    Ok((total * inv_n, grad))
}

/// Mean squared error over all elements, with its gradient.
pub fn l2_loss<T: Element>(pred: &Tensor4<T>, target: &Tensor4<T>) -> Result<(T, Tensor4<T>)> {
    if pred.shape() != target.shape() {
        return Err(Error::dim(
            "shape",
            format!("prediction {} vs target {}", pred.shape(), target.shape()),
        ));
    }
    let n = lit::<T>(pred.numel() as f64);
    let diff = pred.sub(target)?;
    let loss = diff.data().iter().map(|&d| d * d).sum::<T>() / n;
    let grad = diff.scale(lit::<T>(2.0) / n);
    Ok((loss, grad))
}

/// Row-wise arg-max of `(n, k, 1, 1)` logits.
pub fn argmax_rows<T: Element>(logits: &Tensor4<T>) -> Vec<usize> {
    let k = logits.shape().c;
    logits
        .data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |best, (j, &v)| {
                    if v > best.1 {
                        (j, v)
                    } else {
                        best
                    }
                })
                .0
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    use crate::tensor::Shape4;

    fn logits_shape(n: usize, k: usize) -> Shape4 {
        Shape4::new(n, k, 1, 1)
    }
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_logits_give_ln_k() {
        let logits = Tensor4::<f64>::full(logits_shape(3, 7), 0.25);
        let (loss, _) = cross_entropy_loss(&logits, &[0, 3, 6]).unwrap();
        assert!((loss - 7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn large_logits_stay_finite() {
        let logits =
            Tensor4::<f32>::from_vec(logits_shape(1, 3), vec![1000.0, 0.0, -1000.0]).unwrap();
        let (loss, grad) = cross_entropy_loss(&logits, &[0]).unwrap();
        assert!(loss.abs() < 1e-6);
        assert!(grad.all_finite());
    }

    #[test]
    fn label_out_of_range() {
        let logits = Tensor4::<f64>::zeros(logits_shape(1, 3));
        assert!(matches!(
            cross_entropy_loss(&logits, &[3]),
            Err(Error::Range(_))
        ));
    }

    #[test]
    fn l2_zero_at_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = Tensor4::<f64>::randn(Shape4::new(2, 3, 2, 2), 1.0, &mut rng);
        let (loss, grad) = l2_loss(&t, &t).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(grad.max_abs(), 0.0);
    }

    fn fd_check(x: &Tensor4<f64>, analytic: &Tensor4<f64>, f: impl Fn(&Tensor4<f64>) -> f64) {
        let h = 1e-6;
        for i in 0..x.numel() {
            let mut p = x.clone();
            p.data_mut()[i] += h;
            let mut m = x.clone();
            m.data_mut()[i] -= h;
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            let a = analytic.data()[i];
            assert!((fd - a).abs() < 1e-6, "element {i}: fd {fd} analytic {a}");
        }
    }

    #[test]
    fn cross_entropy_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let logits = Tensor4::<f64>::randn(logits_shape(4, 6), 2.0, &mut rng);
        let labels = [1, 0, 5, 2];
        let (_, grad) = cross_entropy_loss(&logits, &labels).unwrap();
        fd_check(&logits, &grad, |z| {
            cross_entropy_loss(z, &labels).unwrap().0
        });
    }

    #[test]
    fn l2_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = Tensor4::<f64>::randn(Shape4::new(2, 3, 2, 1), 1.0, &mut rng);
        let t = Tensor4::<f64>::randn(p.shape(), 1.0, &mut rng);
        let (_, grad) = l2_loss(&p, &t).unwrap();
        fd_check(&p, &grad, |x| l2_loss(x, &t).unwrap().0);
    }

    #[test]
    fn argmax_picks_first_max() {
        let z = Tensor4::<f32>::from_vec(logits_shape(2, 3), vec![0.0, 2.0, 2.0, 5.0, 1.0, 0.0])
            .unwrap();
        assert_eq!(argmax_rows(&z), vec![1, 0]);
    }
}
