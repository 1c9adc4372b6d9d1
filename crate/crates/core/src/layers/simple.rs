use rand::Rng;

use super::{take_cache, xavier_uniform, Layer, LayerKind, Mode, Param};
use crate::conv::ConvParams;
use crate::error::{Error, Result};
use crate::tensor::{channel_shuffle, lit, Element, Shape4, Tensor4};

#[derive(Debug, Default)]
pub struct Relu<T> {
    cache: Option<Tensor4<T>>,
}

impl<T: Element> Relu<T> {
    pub fn new() -> Self {
        Self { cache: None }
    }
}

impl<T: Element> Layer<T> for Relu<T> {
    fn kind(&self) -> LayerKind {
        LayerKind::Relu
    }

    fn output_shape(&self, input: Shape4) -> Result<Shape4> {
        Ok(input)
    }

    fn forward(&mut self, x: &Tensor4<T>, _mode: Mode) -> Result<Tensor4<T>> {
        let y = self.infer(x)?;
        self.cache = Some(x.clone());
        Ok(y)
    }

    fn infer(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        Ok(x.map(|v| v.max(T::zero())))
    }

    fn backward(&mut self, grad_out: &Tensor4<T>) -> Result<Tensor4<T>> {
        let x = take_cache(&mut self.cache, "relu")?;
        x.zip_map(grad_out, |xv, g| if xv > T::zero() { g } else { T::zero() })
    }
}

/// Global average pooling to `(n, c, 1, 1)`.
#[derive(Debug, Default)]
pub struct AvgPool {
    cache: Option<Shape4>,
}

impl AvgPool {
    pub fn new() -> Self {
        Self { cache: None }
    }
}

impl<T: Element> Layer<T> for AvgPool {
    fn kind(&self) -> LayerKind {
        LayerKind::AvgPool
    }

    fn output_shape(&self, input: Shape4) -> Result<Shape4> {
        Ok(Shape4::new(input.n, input.c, 1, 1))
    }

    fn forward(&mut self, x: &Tensor4<T>, _mode: Mode) -> Result<Tensor4<T>> {
        self.cache = Some(x.shape());
        self.infer(x)
    }

    fn infer(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let s = x.shape();
        let inv = lit::<T>(1.0 / s.spatial() as f64);
        let mut out = Tensor4::zeros(Shape4::new(s.n, s.c, 1, 1));
        for i in 0..s.n {
            for j in 0..s.c {
                out.set(i, j, 0, 0, x.plane(i, j).iter().copied().sum::<T>() * inv);
            }
        }
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor4<T>) -> Result<Tensor4<T>> {
        let s = take_cache(&mut self.cache, "avgpool")?;
        grad_out.expect_shape(Shape4::new(s.n, s.c, 1, 1), "grad_out")?;
        let inv = lit::<T>(1.0 / s.spatial() as f64);
        let mut gx = Tensor4::zeros(s);
        for i in 0..s.n {
            for j in 0..s.c {
                let g = grad_out.get(i, j, 0, 0) * inv;
                gx.plane_mut(i, j).fill(g);
            }
        }
        Ok(gx)
    }
}

/// `k x k` max pooling with implicit `-inf` padding.
#[derive(Debug)]
pub struct MaxPool {
    k: usize,
    geom: ConvParams,
    cache: Option<(Shape4, Vec<usize>)>,
}

impl MaxPool {
    pub fn new(k: usize, stride: usize, padding: usize) -> Self {
        Self {
            k,
            geom: ConvParams::new(stride, padding, 1),
            cache: None,
        }
    }

    fn pool<T: Element>(&self, x: &Tensor4<T>) -> Result<(Tensor4<T>, Vec<usize>)> {
        let s = x.shape();
        let os = <Self as Layer<T>>::output_shape(self, s)?;
        let mut out = Tensor4::zeros(os);
        let mut arg = Vec::with_capacity(os.numel());
        for i in 0..s.n {
            for j in 0..s.c {
                for oy in 0..os.h {
                    for ox in 0..os.w {
                        let mut best: Option<(T, usize)> = None;
                        for ky in 0..self.k {
                            for kx in 0..self.k {
                                let iy = (oy * self.geom.stride + ky) as isize
                                    - self.geom.padding as isize;
                                let ix = (ox * self.geom.stride + kx) as isize
                                    - self.geom.padding as isize;
                                if iy < 0 || ix < 0 || iy >= s.h as isize || ix >= s.w as isize {
                                    continue;
                                }
                                let off = s.offset(i, j, iy as usize, ix as usize);
                                let v = x.data()[off];
                                if best.is_none_or(|(b, _)| v > b) {
                                    best = Some((v, off));
                                }
                            }
                        }
                        let (v, off) = best.ok_or_else(|| {
                            Error::Geometry("pooling window lies entirely in padding".into())
                        })?;
                        out.set(i, j, oy, ox, v);
                        arg.push(off);
                    }
                }
            }
        }
        Ok((out, arg))
    }
}

impl<T: Element> Layer<T> for MaxPool {
    fn kind(&self) -> LayerKind {
        LayerKind::MaxPool
    }

    fn output_shape(&self, input: Shape4) -> Result<Shape4> {
        Ok(Shape4::new(
            input.n,
            input.c,
            self.geom.output_dim(input.h, self.k)?,
            self.geom.output_dim(input.w, self.k)?,
        ))
    }

    fn forward(&mut self, x: &Tensor4<T>, _mode: Mode) -> Result<Tensor4<T>> {
        let (y, arg) = self.pool(x)?;
        self.cache = Some((x.shape(), arg));
        Ok(y)
    }

    fn infer(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        Ok(self.pool(x)?.0)
    }

    fn backward(&mut self, grad_out: &Tensor4<T>) -> Result<Tensor4<T>> {
        let (s, arg) = take_cache(&mut self.cache, "maxpool")?;
        if grad_out.numel() != arg.len() {
            return Err(Error::dim("grad_out", "does not match pooled output"));
        }
        let mut gx = Tensor4::zeros(s);
        for (&off, &g) in arg.iter().zip(grad_out.data()) {
            gx.data_mut()[off] = gx.data()[off] + g;
        }
        Ok(gx)
    }
}

/// Bias-free dense layer over the flattened `(c, h, w)` features; output `(n, out, 1, 1)`.
pub struct FullyConnected<T: Element> {
    weight: Param<T>,
    cache: Option<Tensor4<T>>,
}

impl<T: Element> FullyConnected<T> {
    pub fn new<R: Rng + ?Sized>(in_features: usize, out_features: usize, rng: &mut R) -> Self {
        Self {
            weight: Param::weight(xavier_uniform(
                Shape4::new(out_features, in_features, 1, 1),
                rng,
            )),
            cache: None,
        }
    }

    pub fn weight(&self) -> &Tensor4<T> {
        &self.weight.value
    }

    fn dims(&self) -> (usize, usize) {
        let s = self.weight.value.shape();
        (s.n, s.c)
    }

    fn check(&self, s: Shape4) -> Result<()> {
        let (_, fin) = self.dims();
        if s.c * s.spatial() != fin {
            return Err(Error::dim(
                "features",
                format!("fc expects {fin} features per sample, input {s}"),
            ));
        }
        Ok(())
    }
}

impl<T: Element> Layer<T> for FullyConnected<T> {
    fn kind(&self) -> LayerKind {
        LayerKind::FullyConnected
    }

    fn output_shape(&self, input: Shape4) -> Result<Shape4> {
        self.check(input)?;
        Ok(Shape4::new(input.n, self.dims().0, 1, 1))
    }

    fn forward(&mut self, x: &Tensor4<T>, _mode: Mode) -> Result<Tensor4<T>> {
        let y = self.infer(x)?;
        self.cache = Some(x.clone());
        Ok(y)
    }

    fn infer(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        self.check(x.shape())?;
        let (fout, fin) = self.dims();
        let n = x.shape().n;
        let w = self.weight.value.data();
        let mut out = Vec::with_capacity(n * fout);
        for sample in x.data().chunks(fin) {
            for row in w.chunks(fin) {
                out.push(row.iter().zip(sample).map(|(&a, &b)| a * b).sum());
            }
        }
        Tensor4::from_vec(Shape4::new(n, fout, 1, 1), out)
    }

    fn backward(&mut self, grad_out: &Tensor4<T>) -> Result<Tensor4<T>> {
        let x = take_cache(&mut self.cache, "fc")?;
        let (fout, fin) = self.dims();
        let n = x.shape().n;
        grad_out.expect_shape(Shape4::new(n, fout, 1, 1), "grad_out")?;
        let mut gx = Tensor4::zeros(x.shape());
        {
            let w = self.weight.value.data();
            let gw = self.weight.grad.data_mut();
            for i in 0..n {
                let xi = &x.data()[i * fin..(i + 1) * fin];
                let gi = &grad_out.data()[i * fout..(i + 1) * fout];
                let gxi = &mut gx.data_mut()[i * fin..(i + 1) * fin];
                for (o, &g) in gi.iter().enumerate() {
                    let wrow = &w[o * fin..(o + 1) * fin];
                    let gwrow = &mut gw[o * fin..(o + 1) * fin];
                    for f in 0..fin {
                        gwrow[f] = gwrow[f] + g * xi[f];
                        gxi[f] = gxi[f] + g * wrow[f];
                    }
                }
            }
        }
        Ok(gx)
    }

    fn params(&self) -> Vec<(String, &Param<T>)> {
        vec![("weight".into(), &self.weight)]
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        vec![("weight".into(), &mut self.weight)]
    }
}

#[derive(Debug)]
pub struct ChannelShuffle {
    groups: usize,
    cache: Option<usize>,
}

impl ChannelShuffle {
    pub fn new(groups: usize) -> Self {
        Self {
            groups,
            cache: None,
        }
    }
}

impl<T: Element> Layer<T> for ChannelShuffle {
    fn kind(&self) -> LayerKind {
        LayerKind::ChannelShuffle
    }

    fn output_shape(&self, input: Shape4) -> Result<Shape4> {
        if self.groups == 0 || !input.c.is_multiple_of(self.groups) {
            return Err(Error::dim("c", "groups do not divide channels"));
        }
        Ok(input)
    }

    fn forward(&mut self, x: &Tensor4<T>, _mode: Mode) -> Result<Tensor4<T>> {
        let y = channel_shuffle(x, self.groups)?;
        self.cache = Some(x.shape().c);
        Ok(y)
    }

    fn infer(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        channel_shuffle(x, self.groups)
    }

    fn backward(&mut self, grad_out: &Tensor4<T>) -> Result<Tensor4<T>> {
        let c = take_cache(&mut self.cache, "channel shuffle")?;
        channel_shuffle(grad_out, c / self.groups)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_gradient_mask() {
        let x = Tensor4::from_vec(Shape4::new(1, 1, 1, 3), vec![2.0f64, -1.0, 0.5]).unwrap();
        let mut r = Relu::new();
        assert_eq!(r.forward(&x, Mode::Train).unwrap().data(), &[2.0, 0.0, 0.5]);
        let g = Tensor4::full(x.shape(), 3.0);
        assert_eq!(r.backward(&g).unwrap().data(), &[3.0, 0.0, 3.0]);
    }

    #[test]
    fn avgpool_mean() {
        let x = Tensor4::from_vec(Shape4::new(1, 2, 1, 2), vec![1.0f64, 3.0, -2.0, 4.0]).unwrap();
        let y = Layer::<f64>::infer(&AvgPool::new(), &x).unwrap();
        assert_eq!(y.data(), &[2.0, 1.0]);
    }

    #[test]
    fn maxpool_shape_and_values() {
        let x = Tensor4::from_fn(Shape4::new(1, 1, 4, 4), |_, _, y, x| (y * 4 + x) as f64);
        let mp = MaxPool::new(3, 2, 1);
        let y = Layer::<f64>::infer(&mp, &x).unwrap();
        assert_eq!(y.shape(), Shape4::new(1, 1, 2, 2));
        assert_eq!(y.data(), &[5.0, 7.0, 13.0, 15.0]);
    }

    #[test]
    fn fc_shape_error() {
        let mut rng = rand::rng();
        let fc = FullyConnected::<f64>::new(8, 3, &mut rng);
        assert!(fc.infer(&Tensor4::zeros(Shape4::new(2, 2, 2, 2))).is_ok());
        assert!(fc.infer(&Tensor4::zeros(Shape4::new(2, 3, 2, 2))).is_err());
    }
}
