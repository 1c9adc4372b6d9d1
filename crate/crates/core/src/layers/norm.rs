use super::{take_cache, Layer, LayerKind, Mode, Param, ParamRole};
use crate::error::{Error, Result};
use crate::tensor::{lit, Element, Shape4, Tensor4};

pub const BN_EPS: f64 = 1e-5;
/// Fraction of the running statistic kept on each train-mode update.
pub const BN_MOMENTUM: f64 = 0.9;
pub const L2_EPS: f64 = 1e-12;

/// Scales every (batch, channel) slice to unit L2 norm; slices with norm
/// below [`L2_EPS`] are divided by `L2_EPS` instead.
pub fn l2_channel_norm<T: Element>(x: &Tensor4<T>) -> Tensor4<T> {
    l2_forward(x).0
}

fn l2_forward<T: Element>(x: &Tensor4<T>) -> (Tensor4<T>, Vec<T>) {
    let s = x.shape();
    let eps = lit::<T>(L2_EPS);
    let mut out = x.clone();
    let mut norms = Vec::with_capacity(s.n * s.c);
    for i in 0..s.n {
        for j in 0..s.c {
            let plane = out.plane_mut(i, j);
            let norm = plane.iter().map(|&v| v * v).sum::<T>().sqrt();
            let denom = norm.max(eps);
            plane.iter_mut().for_each(|v| *v = *v / denom);
            norms.push(norm);
        }
    }
    (out, norms)
}

#[derive(Debug, Default)]
pub struct L2ChannelNorm<T> {
    cache: Option<(Tensor4<T>, Vec<T>)>,
}

impl<T: Element> L2ChannelNorm<T> {
    pub fn new() -> Self {
        Self { cache: None }
    }
}

impl<T: Element> Layer<T> for L2ChannelNorm<T> {
    fn kind(&self) -> LayerKind {
        LayerKind::L2ChannelNorm
    }

    fn output_shape(&self, input: Shape4) -> Result<Shape4> {
        Ok(input)
    }

    fn forward(&mut self, x: &Tensor4<T>, _mode: Mode) -> Result<Tensor4<T>> {
        let (y, norms) = l2_forward(x);
        self.cache = Some((y.clone(), norms));
        Ok(y)
    }

    fn infer(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        Ok(l2_channel_norm(x))
    }

    fn backward(&mut self, grad_out: &Tensor4<T>) -> Result<Tensor4<T>> {
        let (y, norms) = take_cache(&mut self.cache, "l2norm")?;
        grad_out.expect_shape(y.shape(), "grad_out")?;
        let s = y.shape();
        let eps = lit::<T>(L2_EPS);
        let mut gx = grad_out.clone();
        for i in 0..s.n {
            for j in 0..s.c {
                let norm = norms[i * s.c + j];
                let yp = y.plane(i, j);
                let gp = gx.plane_mut(i, j);
                if norm > eps {
                    // d(x/|x|) = (g - y <y, g>) / |x|
                    let proj: T = yp.iter().zip(gp.iter()).map(|(&a, &b)| a * b).sum();
                    for (g, &yv) in gp.iter_mut().zip(yp) {
                        *g = (*g - yv * proj) / norm;
                    }
                } else {
                    gp.iter_mut().for_each(|g| *g = *g / eps);
                }
            }
        }
        Ok(gx)
    }
}

struct BnCache<T> {
    xhat: Tensor4<T>,
    inv_std: Vec<T>,
    mode: Mode,
}

/// Per-channel batch normalisation with learnable scale/shift.
pub struct BatchNorm<T: Element> {
    gamma: Param<T>,
    beta: Param<T>,
    running_mean: Tensor4<T>,
    running_var: Tensor4<T>,
    cache: Option<BnCache<T>>,
}

impl<T: Element> BatchNorm<T> {
    pub fn new(c: usize) -> Self {
        let s = Shape4::new(1, c, 1, 1);
        Self {
            gamma: Param::new(Tensor4::full(s, T::one()), ParamRole::Affine),
            beta: Param::new(Tensor4::zeros(s), ParamRole::Affine),
            running_mean: Tensor4::zeros(s),
            running_var: Tensor4::full(s, T::one()),
            cache: None,
        }
    }

    /// Infer-mode identity: running variance `1 - eps` cancels the epsilon.
    pub fn identity(c: usize) -> Self {
        let mut bn = Self::new(c);
        bn.running_var.fill(lit(1.0 - BN_EPS));
        bn
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.numel()
    }

    pub fn gamma_mut(&mut self) -> &mut Tensor4<T> {
        &mut self.gamma.value
    }

    pub fn beta_mut(&mut self) -> &mut Tensor4<T> {
        &mut self.beta.value
    }

    pub fn running_mean_mut(&mut self) -> &mut Tensor4<T> {
        &mut self.running_mean
    }

    pub fn running_var_mut(&mut self) -> &mut Tensor4<T> {
        &mut self.running_var
    }

    fn check(&self, s: Shape4) -> Result<()> {
        if s.c != self.channels() {
            return Err(Error::dim(
                "c",
                format!("batch norm has {} channels, input {s}", self.channels()),
            ));
        }
        Ok(())
    }

    fn batch_stats(x: &Tensor4<T>) -> (Vec<T>, Vec<T>) {
        let s = x.shape();
        let count = lit::<T>((s.n * s.spatial()) as f64);
        let mut mean = vec![T::zero(); s.c];
        let mut var = vec![T::zero(); s.c];
        for j in 0..s.c {
            let mut acc = T::zero();
            for i in 0..s.n {
                acc = acc + x.plane(i, j).iter().copied().sum::<T>();
            }
            let mu = acc / count;
            let mut sq = T::zero();
            for i in 0..s.n {
                sq = sq
                    + x.plane(i, j)
                        .iter()
                        .map(|&v| (v - mu) * (v - mu))
                        .sum::<T>();
            }
            mean[j] = mu;
            var[j] = sq / count;
        }
        (mean, var)
    }

    fn normalize(&self, x: &Tensor4<T>, mean: &[T], inv_std: &[T]) -> (Tensor4<T>, Tensor4<T>) {
        let s = x.shape();
        let mut xhat = x.clone();
        let mut y = x.clone();
        for i in 0..s.n {
            for j in 0..s.c {
                let (g, b) = (self.gamma.value.data()[j], self.beta.value.data()[j]);
                let xh = xhat.plane_mut(i, j);
                xh.iter_mut().for_each(|v| *v = (*v - mean[j]) * inv_std[j]);
                let yp = y.plane_mut(i, j);
                for (yv, &h) in yp.iter_mut().zip(xhat.plane(i, j)) {
                    *yv = g * h + b;
                }
            }
        }
        (xhat, y)
    }

    fn running_inv_std(&self) -> Vec<T> {
        let eps = lit::<T>(BN_EPS);
        self.running_var
            .data()
            .iter()
            .map(|&v| T::one() / (v + eps).sqrt())
            .collect()
    }
}

impl<T: Element> Layer<T> for BatchNorm<T> {
    fn kind(&self) -> LayerKind {
        LayerKind::BatchNorm
    }

    fn output_shape(&self, input: Shape4) -> Result<Shape4> {
        self.check(input)?;
        Ok(input)
    }

    fn forward(&mut self, x: &Tensor4<T>, mode: Mode) -> Result<Tensor4<T>> {
        self.check(x.shape())?;
        let (mean, inv_std) = match mode {
            Mode::Train => {
                let (mean, var) = Self::batch_stats(x);
                let keep = lit::<T>(BN_MOMENTUM);
                let take = T::one() - keep;
                for j in 0..mean.len() {
                    let rm = &mut self.running_mean.data_mut()[j];
                    *rm = keep * *rm + take * mean[j];
                    let rv = &mut self.running_var.data_mut()[j];
                    *rv = keep * *rv + take * var[j];
                }
                let eps = lit::<T>(BN_EPS);
                let inv = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                (mean, inv)
            }
            Mode::Infer => (self.running_mean.data().to_vec(), self.running_inv_std()),
        };
        let (xhat, y) = self.normalize(x, &mean, &inv_std);
        self.cache = Some(BnCache {
            xhat,
            inv_std,
            mode,
        });
        Ok(y)
    }

    fn infer(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        self.check(x.shape())?;
        Ok(self
            .normalize(x, self.running_mean.data(), &self.running_inv_std())
            .1)
    }

    fn backward(&mut self, grad_out: &Tensor4<T>) -> Result<Tensor4<T>> {
        let BnCache {
            xhat,
            inv_std,
            mode,
        } = take_cache(&mut self.cache, "batch norm")?;
        grad_out.expect_shape(xhat.shape(), "grad_out")?;
        let s = xhat.shape();
        let count = lit::<T>((s.n * s.spatial()) as f64);
        let mut gx = Tensor4::zeros(s);
        for (j, &inv) in inv_std.iter().enumerate() {
            let mut sum_g = T::zero();
            let mut sum_gx = T::zero();
            for i in 0..s.n {
                for (&g, &h) in grad_out.plane(i, j).iter().zip(xhat.plane(i, j)) {
                    sum_g = sum_g + g;
                    sum_gx = sum_gx + g * h;
                }
            }
            self.gamma.grad.data_mut()[j] = self.gamma.grad.data()[j] + sum_gx;
            self.beta.grad.data_mut()[j] = self.beta.grad.data()[j] + sum_g;
            let gamma = self.gamma.value.data()[j];
            let k = gamma * inv;
            for i in 0..s.n {
                let go = grad_out.plane(i, j);
                let xh = xhat.plane(i, j);
                let out = gx.plane_mut(i, j);
                for ((o, &g), &h) in out.iter_mut().zip(go).zip(xh) {
                    *o = match mode {
                        Mode::Train => k * (g - sum_g / count - h * sum_gx / count),
                        Mode::Infer => k * g,
                    };
                }
            }
        }
        Ok(gx)
    }

    fn params(&self) -> Vec<(String, &Param<T>)> {
        vec![("gamma".into(), &self.gamma), ("beta".into(), &self.beta)]
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        vec![
            ("gamma".into(), &mut self.gamma),
            ("beta".into(), &mut self.beta),
        ]
    }

    fn buffers(&self) -> Vec<(String, &Tensor4<T>)> {
        vec![
            ("running_mean".into(), &self.running_mean),
            ("running_var".into(), &self.running_var),
        ]
    }

    fn buffers_mut(&mut self) -> Vec<(String, &mut Tensor4<T>)> {
        vec![
            ("running_mean".into(), &mut self.running_mean),
            ("running_var".into(), &mut self.running_var),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn l2_three_four_five() {
        let x = Tensor4::from_vec(Shape4::new(1, 1, 1, 2), vec![3.0f64, 4.0]).unwrap();
        let y = l2_channel_norm(&x);
        assert!((y.data()[0] - 0.6).abs() < 1e-15);
        assert!((y.data()[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn l2_zero_channel_stays_zero() {
        let x = Tensor4::<f64>::zeros(Shape4::new(2, 3, 2, 2));
        let y = l2_channel_norm(&x);
        assert!(y.data().iter().all(|v| *v == 0.0 && v.is_finite()));
    }

    #[test]
    fn l2_unit_norm_and_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor4::<f64>::randn(Shape4::new(3, 4, 5, 5), 2.0, &mut rng);
        let y = l2_channel_norm(&x);
        for i in 0..3 {
            for j in 0..4 {
                let n: f64 = y.plane(i, j).iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!((n - 1.0).abs() < 1e-6);
            }
        }
        let yy = l2_channel_norm(&y);
        assert!(yy.sub(&y).unwrap().max_abs() < 1e-6);
    }

    #[test]
    fn bn_infer_default_stats_scale_by_eps() {
        // running var 1 leaves the (1 + eps)^-1/2 factor from the epsilon
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor4::<f64>::randn(Shape4::new(2, 3, 4, 4), 1.0, &mut rng);
        let bn = BatchNorm::<f64>::new(3);
        let y = bn.infer(&x).unwrap();
        let k = 1.0 / (1.0 + BN_EPS).sqrt();
        assert!(y.sub(&x.scale(k)).unwrap().max_abs() < 1e-12);
        assert!(y.max_rel_diff(&x, 1e-12).unwrap() < 5.1e-6);
    }

    #[test]
    fn bn_identity_mode_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor4::<f64>::randn(Shape4::new(2, 3, 4, 4), 1.0, &mut rng);
        let y = BatchNorm::<f64>::identity(3).infer(&x).unwrap();
        assert!(y.sub(&x).unwrap().max_abs() < 1e-6);
    }

    #[test]
    fn bn_train_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor4::<f64>::randn(Shape4::new(64, 2, 8, 8), 3.0, &mut rng).map(|v| v + 1.5);
        let mut bn = BatchNorm::<f64>::new(2);
        bn.gamma_mut().data_mut().copy_from_slice(&[2.0, 0.5]);
        bn.beta_mut().data_mut().copy_from_slice(&[-1.0, 3.0]);
        let y = bn.forward(&x, Mode::Train).unwrap();
        for (j, (g, b)) in [(2.0, -1.0), (0.5, 3.0)].into_iter().enumerate() {
            let vals: Vec<f64> = (0..64).flat_map(|i| y.plane(i, j).to_vec()).collect();
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            assert!((mean - b).abs() < 1e-4);
            assert!((var - g * g).abs() < 1e-4 * g * g + 1e-4);
        }
        // running stats moved 10% toward the batch
        let rm = bn.buffers()[0].1.data()[0];
        assert!(rm > 0.1 && rm < 0.2, "{rm}");
    }

    #[test]
    fn bn_constant_channel() {
        let x = Tensor4::<f64>::full(Shape4::new(4, 1, 3, 3), 7.0);
        let mut bn = BatchNorm::<f64>::new(1);
        bn.beta_mut().fill(0.25);
        let y = bn.forward(&x, Mode::Train).unwrap();
        assert!(y.data().iter().all(|v| (v - 0.25).abs() < 1e-9));
    }

    #[test]
    fn bn_channel_mismatch() {
        let bn = BatchNorm::<f64>::new(3);
        assert!(matches!(
            bn.infer(&Tensor4::zeros(Shape4::new(1, 2, 2, 2))),
            Err(Error::Dimension { .. })
        ));
    }
}
