use rand::Rng;

use super::{
    prefixed, take_cache, BatchNorm, Conv2d, Layer, LayerKind, Mode, Param, Relu, Sequential,
};
use crate::error::{Error, Result};
use crate::tensor::{channel_concat, channel_shuffle, channel_split, Element, Shape4, Tensor4};

/// ShuffleNetv2 stride-2 unit: two branches on the full input, each producing
/// `c_out / 2` channels at half resolution, then concat and a 2-group shuffle.
///
/// ```text
/// left : dw(s=2) -> BN -> pw(c_in -> h) -> BN -> ReLU
/// right: pw(c_in -> h) -> BN -> ReLU -> dw(s=2) -> BN -> pw(h -> h) -> BN -> ReLU
/// ```
pub struct ShuffleDown<T: Element> {
    left: Sequential<T>,
    right: Sequential<T>,
    half: usize,
    cache: Option<()>,
}

impl<T: Element> ShuffleDown<T> {
    pub fn new<R: Rng + ?Sized>(c_in: usize, c_out: usize, k: usize, rng: &mut R) -> Result<Self> {
        if !c_out.is_multiple_of(2) || c_out == 0 {
            return Err(Error::Config(format!(
                "shuffle down-sample needs an even output channel count, got {c_out}"
            )));
        }
        let h = c_out / 2;
        let left = Sequential::new()
            .with("dw", Conv2d::depthwise(c_in, k, 2, rng))
            .with("bn0", BatchNorm::new(c_in))
            .with("pw", Conv2d::pointwise(c_in, h, rng))
            .with("bn1", BatchNorm::new(h))
            .with("relu", Relu::new());
        let right = Sequential::new()
            .with("pw0", Conv2d::pointwise(c_in, h, rng))
            .with("bn0", BatchNorm::new(h))
            .with("relu0", Relu::new())
            .with("dw", Conv2d::depthwise(h, k, 2, rng))
            .with("bn1", BatchNorm::new(h))
            .with("pw1", Conv2d::pointwise(h, h, rng))
            .with("bn2", BatchNorm::new(h))
            .with("relu1", Relu::new());
        Ok(Self {
            left,
            right,
            half: h,
            cache: None,
        })
    }
}

impl<T: Element> Layer<T> for ShuffleDown<T> {
    fn kind(&self) -> LayerKind {
        LayerKind::ShuffleDown
    }

    fn output_shape(&self, input: Shape4) -> Result<Shape4> {
        let l = self.left.output_shape(input)?;
        let r = self.right.output_shape(input)?;
        if (l.h, l.w) != (r.h, r.w) {
            return Err(Error::dim("h", "branch resolutions differ"));
        }
        Ok(Shape4::new(input.n, l.c + r.c, l.h, l.w))
    }

    fn forward(&mut self, x: &Tensor4<T>, mode: Mode) -> Result<Tensor4<T>> {
        let l = self.left.forward(x, mode)?;
        let r = self.right.forward(x, mode)?;
        self.cache = Some(());
        channel_shuffle(&channel_concat(&l, &r)?, 2)
    }

    fn infer(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let l = self.left.infer(x)?;
        let r = self.right.infer(x)?;
        channel_shuffle(&channel_concat(&l, &r)?, 2)
    }

    fn backward(&mut self, grad_out: &Tensor4<T>) -> Result<Tensor4<T>> {
        take_cache(&mut self.cache, "shuffle down")?;
        let unshuffled = channel_shuffle(grad_out, self.half)?;
        let (gl, gr) = channel_split(&unshuffled, self.half)?;
        let mut gx = self.left.backward(&gl)?;
        gx.add_assign(&self.right.backward(&gr)?)?;
        Ok(gx)
    }

    fn params(&self) -> Vec<(String, &Param<T>)> {
        let mut v = prefixed("left", self.left.params());
        v.extend(prefixed("right", self.right.params()));
        v
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        let mut v = prefixed("left", self.left.params_mut());
        v.extend(prefixed("right", self.right.params_mut()));
        v
    }

    fn buffers(&self) -> Vec<(String, &Tensor4<T>)> {
        let mut v = prefixed("left", self.left.buffers());
        v.extend(prefixed("right", self.right.buffers()));
        v
    }

    fn buffers_mut(&mut self) -> Vec<(String, &mut Tensor4<T>)> {
        let mut v = prefixed("left", self.left.buffers_mut());
        v.extend(prefixed("right", self.right.buffers_mut()));
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn doubles_channels_halves_resolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let unit = ShuffleDown::<f32>::new(24, 48, 3, &mut rng).unwrap();
        let x = Tensor4::randn(Shape4::new(2, 24, 8, 8), 1.0, &mut rng);
        let y = unit.infer(&x).unwrap();
        assert_eq!(y.shape(), Shape4::new(2, 48, 4, 4));
        assert_eq!(unit.output_shape(x.shape()).unwrap(), y.shape());
        // 9*24 + 24*24 + 24*24 + 9*24 + 24*24
        assert_eq!(unit.num_weights(), 216 + 576 + 576 + 216 + 576);
    }

    #[test]
    fn odd_output_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(ShuffleDown::<f32>::new(8, 9, 3, &mut rng).is_err());
    }
}
