//! Stateful layers with owned parameters and explicit forward/backward passes.
//!
//! `forward` caches whatever `backward` needs; `backward` consumes that cache,
//! accumulates parameter gradients and returns the gradient of the input.
//! `infer` is the cache-free, `&self` path used for concurrent evaluation.

mod conv;
mod lpr;
mod norm;
mod shuffle;
mod simple;

pub use conv::{Conv2d, Dsc};
pub use lpr::{Lpr, LprHyper};
pub use norm::{l2_channel_norm, BatchNorm, L2ChannelNorm, BN_EPS, BN_MOMENTUM, L2_EPS};
pub use shuffle::ShuffleDown;
pub use simple::{AvgPool, ChannelShuffle, FullyConnected, MaxPool, Relu};

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Element, Shape4, Tensor4};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerKind {
    StandardConv,
    DepthwiseConv,
    PointwiseConv,
    Dsc,
    Lpr,
    BatchNorm,
    L2ChannelNorm,
    Relu,
    AvgPool,
    MaxPool,
    FullyConnected,
    ChannelShuffle,
    ShuffleDown,
    Sequential,
}

/// Whether a parameter counts toward the weight budget of the cost model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    Weight,
    /// Batch-norm scale/shift.
    Affine,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub value: Tensor4<T>,
    pub grad: Tensor4<T>,
    pub role: ParamRole,
}

impl<T: Element> Param<T> {
    pub fn new(value: Tensor4<T>, role: ParamRole) -> Self {
        let grad = Tensor4::zeros(value.shape());
        Self { value, grad, role }
    }

    pub fn weight(value: Tensor4<T>) -> Self {
        Self::new(value, ParamRole::Weight)
    }

    pub(crate) fn accumulate(&mut self, g: &Tensor4<T>) -> Result<()> {
        self.grad.add_assign(g)
    }
}

pub trait Layer<T: Element>: Send + Sync {
    fn kind(&self) -> LayerKind;

    fn output_shape(&self, input: Shape4) -> Result<Shape4>;

    fn forward(&mut self, x: &Tensor4<T>, mode: Mode) -> Result<Tensor4<T>>;

    fn infer(&self, x: &Tensor4<T>) -> Result<Tensor4<T>>;

    fn backward(&mut self, grad_out: &Tensor4<T>) -> Result<Tensor4<T>>;

    fn params(&self) -> Vec<(String, &Param<T>)> {
        Vec::new()
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        Vec::new()
    }

    /// Non-trainable state (batch-norm running statistics).
    fn buffers(&self) -> Vec<(String, &Tensor4<T>)> {
        Vec::new()
    }

    fn buffers_mut(&mut self) -> Vec<(String, &mut Tensor4<T>)> {
        Vec::new()
    }

    fn zero_grad(&mut self) {
        for (_, p) in self.params_mut() {
            p.grad.fill(T::zero());
        }
    }

    /// Element count of convolution/FC weights, batch-norm affine excluded.
    fn num_weights(&self) -> usize {
        self.params()
            .iter()
            .filter(|(_, p)| p.role == ParamRole::Weight)
            .map(|(_, p)| p.value.numel())
            .sum()
    }
}

pub(crate) fn take_cache<C>(cache: &mut Option<C>, layer: &str) -> Result<C> {
    cache
        .take()
        .ok_or_else(|| Error::State(format!("{layer}: backward called before forward")))
}

pub(crate) fn prefixed<'a, P>(prefix: &str, items: Vec<(String, P)>) -> Vec<(String, P)>
where
    P: 'a,
{
    items
        .into_iter()
        .map(|(name, p)| (format!("{prefix}.{name}"), p))
        .collect()
}

/// Xavier/Glorot uniform initialisation with conv fan conventions:
/// `fan_in = c * kh * kw`, `fan_out = n * kh * kw`.
pub fn xavier_uniform<T: Element, R: Rng + ?Sized>(shape: Shape4, rng: &mut R) -> Tensor4<T> {
    let receptive = shape.h * shape.w;
    let fan_in = shape.c * receptive;
    let fan_out = shape.n * receptive;
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor4::uniform(shape, -limit, limit, rng)
}

/// Ordered stack of named layers.
#[derive(Default)]
pub struct Sequential<T: Element> {
    layers: Vec<(String, Box<dyn Layer<T>>)>,
}

impl<T: Element> Sequential<T> {
    pub fn new() -> Self {
        Self { layers: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, layer: impl Layer<T> + 'static) {
        self.layers.push((name.into(), Box::new(layer)));
    }

    pub fn push_boxed(&mut self, name: impl Into<String>, layer: Box<dyn Layer<T>>) {
        self.layers.push((name.into(), layer));
    }

    pub fn with(mut self, name: impl Into<String>, layer: impl Layer<T> + 'static) -> Self {
        self.push(name, layer);
        self
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &dyn Layer<T>)> {
        self.layers.iter().map(|(n, l)| (n.as_str(), l.as_ref()))
    }

    pub fn get_mut(&mut self, index: usize) -> Option<&mut (dyn Layer<T> + 'static)> {
        self.layers.get_mut(index).map(|(_, l)| l.as_mut())
    }
}

impl<T: Element> Layer<T> for Sequential<T> {
    fn kind(&self) -> LayerKind {
        LayerKind::Sequential
    }

    fn output_shape(&self, input: Shape4) -> Result<Shape4> {
        self.layers
            .iter()
            .try_fold(input, |s, (_, l)| l.output_shape(s))
    }

    fn forward(&mut self, x: &Tensor4<T>, mode: Mode) -> Result<Tensor4<T>> {
        let mut iter = self.layers.iter_mut();
        let Some((_, first)) = iter.next() else {
            return Ok(x.clone());
        };
        let mut h = first.forward(x, mode)?;
        for (_, l) in iter {
            h = l.forward(&h, mode)?;
        }
        Ok(h)
    }

    fn infer(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let mut iter = self.layers.iter();
        let Some((_, first)) = iter.next() else {
            return Ok(x.clone());
        };
        let mut h = first.infer(x)?;
        for (_, l) in iter {
            h = l.infer(&h)?;
        }
        Ok(h)
    }

    fn backward(&mut self, grad_out: &Tensor4<T>) -> Result<Tensor4<T>> {
        let mut iter = self.layers.iter_mut().rev();
        let Some((_, last)) = iter.next() else {
            return Ok(grad_out.clone());
        };
        let mut g = last.backward(grad_out)?;
        for (_, l) in iter {
            g = l.backward(&g)?;
        }
        Ok(g)
    }

    fn params(&self) -> Vec<(String, &Param<T>)> {
        self.layers
            .iter()
            .flat_map(|(name, l)| prefixed(name, l.params()))
            .collect()
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        self.layers
            .iter_mut()
            .flat_map(|(name, l)| prefixed(name, l.params_mut()))
            .collect()
    }

    fn buffers(&self) -> Vec<(String, &Tensor4<T>)> {
        self.layers
            .iter()
            .flat_map(|(name, l)| prefixed(name, l.buffers()))
            .collect()
    }

    fn buffers_mut(&mut self) -> Vec<(String, &mut Tensor4<T>)> {
        self.layers
            .iter_mut()
            .flat_map(|(name, l)| prefixed(name, l.buffers_mut()))
            .collect()
    }
}
