//! Instantiating an [`ArchitectureSpec`] into trainable layers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::arch::{ArchitectureSpec, ModuleSpec, ResolvedModule};
use crate::error::{Error, Result};
use crate::layers::{
    AvgPool, BatchNorm, Conv2d, FullyConnected, Layer, LayerKind, Lpr, LprHyper, MaxPool, Mode,
    Param, Relu, Sequential, ShuffleDown,
};
use crate::tensor::{Element, Shape4, Tensor4};

/// Switches applied to every LPR block of a built network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BuildOptions {
    pub lpr_residual: bool,
    pub lpr_l2norm: bool,
    pub lpr_relu: bool,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self {
            lpr_residual: true,
            lpr_l2norm: true,
            lpr_relu: true,
        }
    }
}

/// A linear stack of blocks built from a spec. Each spec module becomes one
/// named block (`00_conv`, `01_dsc`, ...):
///
/// - `conv`, `dwconv`, `pwconv`: convolution, BN, ReLU
/// - `dsc`, `dsc_down`: depthwise, BN, ReLU, pointwise, BN, ReLU
/// - `lpr`: one [`Lpr`] block
pub struct Network<T: Element> {
    spec: ArchitectureSpec,
    resolved: Vec<ResolvedModule>,
    options: BuildOptions,
    body: Sequential<T>,
}

impl<T: Element> Network<T> {
    pub fn from_spec(spec: &ArchitectureSpec, seed: u64) -> Result<Self> {
        Self::with_options(spec, seed, BuildOptions::default())
    }

    pub fn with_options(spec: &ArchitectureSpec, seed: u64, options: BuildOptions) -> Result<Self> {
        let resolved = spec.resolve()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut body = Sequential::new();
        for m in &resolved {
            body.push_boxed(
                m.name.clone(),
                build_block(m, spec.rank_div, options, &mut rng)?,
            );
        }
        Ok(Self {
            spec: spec.clone(),
            resolved,
            options,
            body,
        })
    }

    pub fn spec(&self) -> &ArchitectureSpec {
        &self.spec
    }

    pub fn resolved(&self) -> &[ResolvedModule] {
        &self.resolved
    }

    pub fn options(&self) -> BuildOptions {
        self.options
    }

    pub fn blocks(&self) -> impl Iterator<Item = (&str, &dyn Layer<T>)> {
        self.body.iter()
    }

    pub fn input_shape(&self, batch: usize) -> Shape4 {
        let s = self.spec.input;
        Shape4::new(batch, s.c, s.h, s.w)
    }

    /// Named parameters followed by named buffers, in a stable order.
    pub fn state(&self) -> Vec<(String, &Tensor4<T>)> {
        let mut v: Vec<_> = self
            .body
            .params()
            .into_iter()
            .map(|(n, p)| (n, &p.value))
            .collect();
        v.extend(self.body.buffers());
        v
    }

    /// Visits every parameter value, then every buffer, in [`state`](Self::state) order.
    pub fn visit_state_mut(
        &mut self,
        mut f: impl FnMut(&str, &mut Tensor4<T>) -> Result<()>,
    ) -> Result<()> {
        for (name, p) in self.body.params_mut() {
            f(&name, &mut p.value)?;
        }
        for (name, b) in self.body.buffers_mut() {
            f(&name, b)?;
        }
        Ok(())
    }
}

fn build_block<T: Element>(
    m: &ResolvedModule,
    rank_div: usize,
    options: BuildOptions,
    rng: &mut ChaCha8Rng,
) -> Result<Box<dyn Layer<T>>> {
    let c_in = m.input.c;
    let conv_bn_relu = |conv: Conv2d<T>, c: usize| -> Box<dyn Layer<T>> {
        Box::new(
            Sequential::new()
                .with("conv", conv)
                .with("bn", BatchNorm::new(c))
                .with("relu", Relu::new()),
        )
    };
    Ok(match m.spec {
        ModuleSpec::Conv { out, k, stride } => {
            conv_bn_relu(Conv2d::standard(c_in, out, k, stride, rng), out)
        }
        ModuleSpec::DepthwiseConv { k, stride } => {
            conv_bn_relu(Conv2d::depthwise(c_in, k, stride, rng), c_in)
        }
        ModuleSpec::Pointwise { out } => conv_bn_relu(Conv2d::pointwise(c_in, out, rng), out),
        ModuleSpec::Dsc { out, k, stride } => Box::new(dsc_block(c_in, out, k, stride, rng)),
        ModuleSpec::DscDown { out } => Box::new(dsc_block(c_in, out, 3, 2, rng)),
        ModuleSpec::ShuffleDown { out } => Box::new(ShuffleDown::new(c_in, out, 3, rng)?),
        ModuleSpec::Lpr { rank_div: d, k, .. } => {
            let rank = m
                .rank
                .ok_or_else(|| Error::Config(format!("{}: unresolved rank", m.name)))?;
            let mut hyper = LprHyper::with_rank_div(c_in, d.unwrap_or(rank_div))
                .rank(rank)
                .residual(options.lpr_residual)
                .l2norm(options.lpr_l2norm)
                .relu(options.lpr_relu);
            hyper.k_size = k;
            Box::new(Lpr::new(hyper, rng)?)
        }
        ModuleSpec::AvgPool => Box::new(AvgPool::new()),
        ModuleSpec::MaxPool => Box::new(MaxPool::new(3, 2, 1)),
        ModuleSpec::Fc { out } => Box::new(FullyConnected::new(m.input.numel(), out, rng)),
    })
}

fn dsc_block<T: Element>(
    c_in: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    rng: &mut ChaCha8Rng,
) -> Sequential<T> {
    Sequential::new()
        .with("dw", Conv2d::depthwise(c_in, k, stride, rng))
        .with("bn0", BatchNorm::new(c_in))
        .with("relu0", Relu::new())
        .with("pw", Conv2d::pointwise(c_in, c_out, rng))
        .with("bn1", BatchNorm::new(c_out))
        .with("relu1", Relu::new())
}

impl<T: Element> Layer<T> for Network<T> {
    fn kind(&self) -> LayerKind {
        LayerKind::Sequential
    }

    fn output_shape(&self, input: Shape4) -> Result<Shape4> {
        self.body.output_shape(input)
    }

    fn forward(&mut self, x: &Tensor4<T>, mode: Mode) -> Result<Tensor4<T>> {
        self.body.forward(x, mode)
    }

    fn infer(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        self.body.infer(x)
    }

    fn backward(&mut self, grad_out: &Tensor4<T>) -> Result<Tensor4<T>> {
        self.body.backward(grad_out)
    }

    fn params(&self) -> Vec<(String, &Param<T>)> {
        self.body.params()
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        self.body.params_mut()
    }

    fn buffers(&self) -> Vec<(String, &Tensor4<T>)> {
        self.body.buffers()
    }

    fn buffers_mut(&mut self) -> Vec<(String, &mut Tensor4<T>)> {
        self.body.buffers_mut()
    }
}
