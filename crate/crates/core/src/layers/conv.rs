use rand::Rng;

use super::{prefixed, take_cache, xavier_uniform, Layer, LayerKind, Mode, Param};
use crate::conv::{conv2d_backward_input, conv2d_backward_weight, conv2d_fast, ConvParams};
use crate::error::{Error, Result};
use crate::tensor::{Element, Shape4, Tensor4};

/// Bias-free convolution in one of three flavours: standard (`groups = 1`),
/// depthwise (`groups = c`, one `k x k` filter per channel) or pointwise (1x1).
pub struct Conv2d<T: Element> {
    kind: LayerKind,
    weight: Param<T>,
    conv: ConvParams,
    cache: Option<Tensor4<T>>,
}

impl<T: Element> Conv2d<T> {
    fn build(kind: LayerKind, weight: Tensor4<T>, conv: ConvParams) -> Result<Self> {
        let ws = weight.shape();
        match kind {
            LayerKind::DepthwiseConv if ws.c != 1 || conv.groups != ws.n => {
                return Err(Error::dim(
                    "weight",
                    format!("depthwise weight must be (c, 1, k, k) with groups == c, got {ws}"),
                ))
            }
            LayerKind::PointwiseConv if ws.h != 1 || ws.w != 1 => {
                return Err(Error::dim(
                    "weight",
                    format!("pointwise weight must be 1x1, got {ws}"),
                ))
            }
            _ => {}
        }
        Ok(Self {
            kind,
            weight: Param::weight(weight),
            conv,
            cache: None,
        })
    }

    /// `k x k` convolution with "same" padding `k / 2`.
    pub fn standard<R: Rng + ?Sized>(
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let w = xavier_uniform(Shape4::new(c_out, c_in, k, k), rng);
        Self::build(
            LayerKind::StandardConv,
            w,
            ConvParams::new(stride, k / 2, 1),
        )
        .expect("standard conv shapes are consistent")
    }

    pub fn depthwise<R: Rng + ?Sized>(c: usize, k: usize, stride: usize, rng: &mut R) -> Self {
        let w = xavier_uniform(Shape4::new(c, 1, k, k), rng);
        Self::build(
            LayerKind::DepthwiseConv,
            w,
            ConvParams::new(stride, k / 2, c),
        )
        .expect("depthwise shapes are consistent")
    }

    pub fn pointwise<R: Rng + ?Sized>(c_in: usize, c_out: usize, rng: &mut R) -> Self {
        let w = xavier_uniform(Shape4::new(c_out, c_in, 1, 1), rng);
        Self::build(LayerKind::PointwiseConv, w, ConvParams::default())
            .expect("pointwise shapes are consistent")
    }

    pub fn standard_from(weight: Tensor4<T>, conv: ConvParams) -> Result<Self> {
        Self::build(LayerKind::StandardConv, weight, conv)
    }

    pub fn depthwise_from(weight: Tensor4<T>, stride: usize) -> Result<Self> {
        let s = weight.shape();
        Self::build(
            LayerKind::DepthwiseConv,
            weight,
            ConvParams::new(stride, s.h / 2, s.n),
        )
    }

    pub fn pointwise_from(weight: Tensor4<T>) -> Result<Self> {
        Self::build(LayerKind::PointwiseConv, weight, ConvParams::default())
    }

    pub fn weight(&self) -> &Tensor4<T> {
        &self.weight.value
    }

    pub fn weight_mut(&mut self) -> &mut Tensor4<T> {
        &mut self.weight.value
    }

    pub fn conv_params(&self) -> ConvParams {
        self.conv
    }
}

impl<T: Element> Layer<T> for Conv2d<T> {
    fn kind(&self) -> LayerKind {
        self.kind
    }

    fn output_shape(&self, input: Shape4) -> Result<Shape4> {
        self.conv.output_shape(input, self.weight.value.shape())
    }

    fn forward(&mut self, x: &Tensor4<T>, _mode: Mode) -> Result<Tensor4<T>> {
        let y = conv2d_fast(x, &self.weight.value, self.conv)?;
        self.cache = Some(x.clone());
        Ok(y)
    }

    fn infer(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        conv2d_fast(x, &self.weight.value, self.conv)
    }

    fn backward(&mut self, grad_out: &Tensor4<T>) -> Result<Tensor4<T>> {
        let x = take_cache(&mut self.cache, "conv")?;
        let ws = self.weight.value.shape();
        let gw = conv2d_backward_weight(&x, grad_out, ws, self.conv)?;
        self.weight.accumulate(&gw)?;
        conv2d_backward_input(grad_out, &self.weight.value, x.shape(), self.conv)
    }

    fn params(&self) -> Vec<(String, &Param<T>)> {
        vec![("weight".into(), &self.weight)]
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        vec![("weight".into(), &mut self.weight)]
    }
}

/// Depthwise separable convolution: pointwise after depthwise, nothing in between.
pub struct Dsc<T: Element> {
    pub depthwise: Conv2d<T>,
    pub pointwise: Conv2d<T>,
}

impl<T: Element> Dsc<T> {
    pub fn new<R: Rng + ?Sized>(
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            depthwise: Conv2d::depthwise(c_in, k, stride, rng),
            pointwise: Conv2d::pointwise(c_in, c_out, rng),
        }
    }

    pub fn from_parts(depthwise: Conv2d<T>, pointwise: Conv2d<T>) -> Result<Self> {
        if depthwise.kind() != LayerKind::DepthwiseConv
            || pointwise.kind() != LayerKind::PointwiseConv
        {
            return Err(Error::Config(
                "DSC needs a depthwise and a pointwise convolution".into(),
            ));
        }
        let m = depthwise.weight().shape().n;
        let pc = pointwise.weight().shape().c;
        if m != pc {
            return Err(Error::dim(
                "c",
                format!("depthwise yields {m} channels, pointwise expects {pc}"),
            ));
        }
        Ok(Self {
            depthwise,
            pointwise,
        })
    }
}

impl<T: Element> Layer<T> for Dsc<T> {
    fn kind(&self) -> LayerKind {
        LayerKind::Dsc
    }

    fn output_shape(&self, input: Shape4) -> Result<Shape4> {
        self.pointwise
            .output_shape(self.depthwise.output_shape(input)?)
    }

    fn forward(&mut self, x: &Tensor4<T>, mode: Mode) -> Result<Tensor4<T>> {
        let d = self.depthwise.forward(x, mode)?;
        self.pointwise.forward(&d, mode)
    }

    fn infer(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        self.pointwise.infer(&self.depthwise.infer(x)?)
    }

    fn backward(&mut self, grad_out: &Tensor4<T>) -> Result<Tensor4<T>> {
        let g = self.pointwise.backward(grad_out)?;
        self.depthwise.backward(&g)
    }

    fn params(&self) -> Vec<(String, &Param<T>)> {
        let mut v = prefixed("dw", self.depthwise.params());
        v.extend(prefixed("pw", self.pointwise.params()));
        v
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        let mut v = prefixed("dw", self.depthwise.params_mut());
        v.extend(prefixed("pw", self.pointwise.params_mut()));
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conv::conv2d_direct;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    fn eye(n: usize) -> Tensor4<f64> {
        Tensor4::from_fn(Shape4::new(n, n, 1, 1), |i, j, _, _| (i == j) as u8 as f64)
    }

    fn dw_identity(c: usize) -> Tensor4<f64> {
        Tensor4::from_fn(Shape4::new(c, 1, 3, 3), |_, _, y, x| {
            (y == 1 && x == 1) as u8 as f64
        })
    }

    #[test]
    fn standard_identity_and_zero() {
        let mut rng = rng();
        let x = Tensor4::<f64>::randn(Shape4::new(2, 1, 5, 5), 1.0, &mut rng);
        let mut conv = Conv2d::standard_from(dw_identity(1), ConvParams::new(1, 1, 1)).unwrap();
        assert_eq!(conv.forward(&x, Mode::Infer).unwrap(), x);
        conv.weight_mut().fill(0.0);
        assert_eq!(conv.infer(&x).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn standard_matches_oracle() {
        let mut rng = rng();
        let conv = Conv2d::<f64>::standard(3, 4, 3, 2, &mut rng);
        let x = Tensor4::randn(Shape4::new(2, 3, 7, 6), 1.0, &mut rng);
        let want = conv2d_direct(&x, conv.weight(), conv.conv_params()).unwrap();
        assert!(conv.infer(&x).unwrap().max_rel_diff(&want, 1e-12).unwrap() < 1e-12);
    }

    #[test]
    fn depthwise_identity_diagonal_and_oracle() {
        let mut rng = rng();
        let x = Tensor4::<f64>::randn(Shape4::new(2, 4, 5, 5), 1.0, &mut rng);
        let id = Conv2d::depthwise_from(dw_identity(4), 1).unwrap();
        assert_eq!(id.infer(&x).unwrap(), x);

        let dw = Conv2d::<f64>::depthwise(4, 3, 1, &mut rng);
        let y = dw.infer(&x).unwrap();
        let mut x0 = x.clone();
        x0.plane_mut(0, 2).fill(0.0);
        let y0 = dw.infer(&x0).unwrap();
        for j in 0..4 {
            if j == 2 {
                assert_eq!(y0.plane(0, j).iter().map(|v| v.abs()).sum::<f64>(), 0.0);
            } else {
                assert_eq!(y0.plane(0, j), y.plane(0, j));
            }
        }
        let want = conv2d_direct(&x, dw.weight(), ConvParams::new(1, 1, 4)).unwrap();
        assert!(y.max_rel_diff(&want, 1e-12).unwrap() < 1e-12);
    }

    #[test]
    fn depthwise_rejects_channel_mismatch() {
        let mut rng = rng();
        let dw = Conv2d::<f64>::depthwise(4, 3, 1, &mut rng);
        let x = Tensor4::zeros(Shape4::new(1, 3, 5, 5));
        assert!(matches!(dw.infer(&x), Err(Error::Dimension { .. })));
    }

    #[test]
    fn pointwise_identity_sum_and_oracle() {
        let mut rng = rng();
        let x = Tensor4::<f64>::randn(Shape4::new(2, 3, 4, 4), 1.0, &mut rng);
        assert_eq!(
            Conv2d::pointwise_from(eye(3)).unwrap().infer(&x).unwrap(),
            x
        );

        let ones = Conv2d::pointwise_from(Tensor4::full(Shape4::new(1, 3, 1, 1), 1.0)).unwrap();
        let s = ones.infer(&x).unwrap();
        for y in 0..4 {
            for xx in 0..4 {
                let want: f64 = (0..3).map(|j| x.get(1, j, y, xx)).sum();
                assert!((s.get(1, 0, y, xx) - want).abs() < 1e-14);
            }
        }
        let pw = Conv2d::<f64>::pointwise(3, 5, &mut rng);
        let want = conv2d_direct(&x, pw.weight(), ConvParams::default()).unwrap();
        assert!(pw.infer(&x).unwrap().max_rel_diff(&want, 1e-12).unwrap() < 1e-12);
    }

    /// d(sum(out))/dP[o][i] = sum over pixels of input channel i.
    #[test]
    fn pointwise_weight_grad_outer_product() {
        let mut rng = rng();
        let x = Tensor4::<f64>::randn(Shape4::new(2, 3, 4, 4), 1.0, &mut rng);
        let mut pw = Conv2d::<f64>::pointwise(3, 2, &mut rng);
        let y = pw.forward(&x, Mode::Train).unwrap();
        pw.backward(&Tensor4::full(y.shape(), 1.0)).unwrap();
        let g = &pw.params()[0].1.grad;
        for o in 0..2 {
            for i in 0..3 {
                let want: f64 = (0..2).map(|n| x.plane(n, i).iter().sum::<f64>()).sum();
                assert!((g.get(o, i, 0, 0) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_before_forward_is_state_error() {
        let mut rng = rng();
        let mut pw = Conv2d::<f64>::pointwise(3, 2, &mut rng);
        let g = Tensor4::zeros(Shape4::new(1, 2, 2, 2));
        assert!(matches!(pw.backward(&g), Err(Error::State(_))));
        let x = Tensor4::zeros(Shape4::new(1, 3, 2, 2));
        pw.forward(&x, Mode::Train).unwrap();
        pw.backward(&g).unwrap();
        assert!(
            matches!(pw.backward(&g), Err(Error::State(_))),
            "cache cleared"
        );
    }

    #[test]
    fn dsc_is_composition() {
        let mut rng = rng();
        let x = Tensor4::<f64>::randn(Shape4::new(2, 4, 6, 6), 1.0, &mut rng);
        let dsc = Dsc::<f64>::new(4, 6, 3, 2, &mut rng);
        let composed = dsc
            .pointwise
            .infer(&dsc.depthwise.infer(&x).unwrap())
            .unwrap();
        let oracle = conv2d_direct(
            &conv2d_direct(&x, dsc.depthwise.weight(), ConvParams::new(2, 1, 4)).unwrap(),
            dsc.pointwise.weight(),
            ConvParams::default(),
        )
        .unwrap();
        let y = dsc.infer(&x).unwrap();
        assert!(y.max_rel_diff(&composed, 1e-12).unwrap() < 1e-6);
        assert!(y.max_rel_diff(&oracle, 1e-12).unwrap() < 1e-6);

        let id = Dsc::from_parts(
            Conv2d::depthwise_from(dw_identity(4), 1).unwrap(),
            Conv2d::pointwise_from(eye(4)).unwrap(),
        )
        .unwrap();
        assert_eq!(id.infer(&x).unwrap(), x);
    }

    #[test]
    fn dsc_with_identity_depthwise_is_dense_pointwise() {
        let mut rng = rng();
        let x = Tensor4::<f64>::randn(Shape4::new(1, 5, 4, 4), 1.0, &mut rng);
        let p = Tensor4::<f64>::randn(Shape4::new(5, 5, 1, 1), 1.0, &mut rng);
        let dsc = Dsc::from_parts(
            Conv2d::depthwise_from(dw_identity(5), 1).unwrap(),
            Conv2d::pointwise_from(p.clone()).unwrap(),
        )
        .unwrap();
        let y = dsc.infer(&x).unwrap();
        // dense matrix-vector product per pixel
        for yy in 0..4 {
            for xx in 0..4 {
                for o in 0..5 {
                    let want: f64 = (0..5)
                        .map(|i| p.get(o, i, 0, 0) * x.get(0, i, yy, xx))
                        .sum();
                    assert!((y.get(0, o, yy, xx) - want).abs() < 1e-12);
                }
            }
        }
    }
}
