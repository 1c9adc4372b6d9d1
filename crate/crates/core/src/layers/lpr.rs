//! Low-rank pointwise residual (LPR) block.
//!
//! The dense `m x m` pointwise matrix of a depthwise separable convolution is
//! replaced by a rank-`r` product `P2 (m x r) * P1 (r x m)`, and the
//! depthwise output is added back as a residual:
//!
//! ```text
//! d   = BatchNorm(Depthwise(x))
//! b   = P2 * (P1 * d)            // two 1x1 convolutions
//! b   = L2ChannelNorm(b)         // if use_l2norm
//! out = ReLU(b + d)              // residual if use_residual, ReLU if use_relu
//! ```
//!
//! With normalisation disabled and batch norm in identity mode this is exactly
//! the pointwise matrix `(P2 * P1 + I)` applied after the depthwise filter.
//! Input and output shapes are identical; there is no stride.

use rand::Rng;

use super::{
    prefixed, take_cache, BatchNorm, Conv2d, L2ChannelNorm, Layer, LayerKind, Mode, Param, Relu,
};
use crate::error::{Error, Result};
use crate::tensor::{lit, Element, Shape4, Tensor4};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LprHyper {
    /// Channels in and out.
    pub m: usize,
    pub k_size: usize,
    pub rank: usize,
    pub rank_div: usize,
    pub stride: usize,
    pub use_residual: bool,
    pub use_l2norm: bool,
    pub use_relu: bool,
}

impl LprHyper {
    pub const DEFAULT_RANK_DIV: usize = 8;

    /// Rank derived as `max(1, floor(m / rank_div))`.
    pub fn rank_for(m: usize, rank_div: usize) -> usize {
        (m / rank_div.max(1)).max(1)
    }

    pub fn new(m: usize) -> Self {
        Self::with_rank_div(m, Self::DEFAULT_RANK_DIV)
    }

    pub fn with_rank_div(m: usize, rank_div: usize) -> Self {
        Self {
            m,
            k_size: 3,
            rank: Self::rank_for(m, rank_div),
            rank_div,
            stride: 1,
            use_residual: true,
            use_l2norm: true,
            use_relu: true,
        }
    }

    pub fn rank(mut self, r: usize) -> Self {
        self.rank = r;
        self
    }

    pub fn residual(mut self, on: bool) -> Self {
        self.use_residual = on;
        self
    }

    pub fn l2norm(mut self, on: bool) -> Self {
        self.use_l2norm = on;
        self
    }

    pub fn relu(mut self, on: bool) -> Self {
        self.use_relu = on;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::Config("LPR needs at least one channel".into()));
        }
        if self.rank == 0 || self.rank > self.m {
            return Err(Error::Config(format!(
                "LPR rank {} outside [1, {}]",
                self.rank, self.m
            )));
        }
        if self.stride != 1 {
            return Err(Error::Config(
                "LPR requires identical input-output dimension (stride must be 1)".into(),
            ));
        }
        if self.k_size.is_multiple_of(2) {
            return Err(Error::Config("LPR kernel size must be odd".into()));
        }
        Ok(())
    }
}

pub struct Lpr<T: Element> {
    hyper: LprHyper,
    pub depthwise: Conv2d<T>,
    pub bn: BatchNorm<T>,
    pub p1: Conv2d<T>,
    pub p2: Conv2d<T>,
    l2: L2ChannelNorm<T>,
    relu: Relu<T>,
    cache: Option<()>,
}

impl<T: Element> Lpr<T> {
    /// Xavier-initialised block; `P1` and `P2` are further scaled by `1/sqrt(r)`
    /// so the low-rank branch starts small next to the residual.
    pub fn new<R: Rng + ?Sized>(hyper: LprHyper, rng: &mut R) -> Result<Self> {
        hyper.validate()?;
        let (m, r) = (hyper.m, hyper.rank);
        let depthwise = Conv2d::depthwise(m, hyper.k_size, 1, rng);
        let shrink = lit::<T>(1.0 / (r as f64).sqrt());
        let mut p1 = Conv2d::pointwise(m, r, rng);
        let mut p2 = Conv2d::pointwise(r, m, rng);
        for p in [&mut p1, &mut p2] {
            p.weight_mut()
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = *v * shrink);
        }
        Ok(Self {
            hyper,
            depthwise,
            bn: BatchNorm::new(m),
            p1,
            p2,
            l2: L2ChannelNorm::new(),
            relu: Relu::new(),
            cache: None,
        })
    }

    /// Assembles a block from explicit weights: depthwise `(m,1,k,k)`,
    /// `p1` `(r,m,1,1)`, `p2` `(m,r,1,1)`.
    pub fn from_weights(
        hyper: LprHyper,
        depthwise: Tensor4<T>,
        p1: Tensor4<T>,
        p2: Tensor4<T>,
        bn: BatchNorm<T>,
    ) -> Result<Self> {
        hyper.validate()?;
        let (m, r, k) = (hyper.m, hyper.rank, hyper.k_size);
        depthwise.expect_shape(Shape4::new(m, 1, k, k), "depthwise")?;
        p1.expect_shape(Shape4::new(r, m, 1, 1), "p1")?;
        p2.expect_shape(Shape4::new(m, r, 1, 1), "p2")?;
        if bn.channels() != m {
            return Err(Error::dim("c", "batch norm channels differ from m"));
        }
        Ok(Self {
            hyper,
            depthwise: Conv2d::depthwise_from(depthwise, 1)?,
            bn,
            p1: Conv2d::pointwise_from(p1)?,
            p2: Conv2d::pointwise_from(p2)?,
            l2: L2ChannelNorm::new(),
            relu: Relu::new(),
            cache: None,
        })
    }

    pub fn hyper(&self) -> &LprHyper {
        &self.hyper
    }

    /// The `m x m` matrix `P2 * P1`, row-major.
    pub fn low_rank_matrix(&self) -> Vec<T> {
        let (m, r) = (self.hyper.m, self.hyper.rank);
        let p1 = self.p1.weight().data();
        let p2 = self.p2.weight().data();
        let mut out = vec![T::zero(); m * m];
        for i in 0..m {
            for k in 0..r {
                let a = p2[i * r + k];
                for j in 0..m {
                    out[i * m + j] = out[i * m + j] + a * p1[k * m + j];
                }
            }
        }
        out
    }

    fn check_input(&self, s: Shape4) -> Result<()> {
        if s.c != self.hyper.m {
            return Err(Error::Config(format!(
                "LPR requires identical input-output dimension: block has m = {}, input {s}",
                self.hyper.m
            )));
        }
        Ok(())
    }
}

impl<T: Element> Layer<T> for Lpr<T> {
    fn kind(&self) -> LayerKind {
        LayerKind::Lpr
    }

    fn output_shape(&self, input: Shape4) -> Result<Shape4> {
        self.check_input(input)?;
        Ok(input)
    }

    fn forward(&mut self, x: &Tensor4<T>, mode: Mode) -> Result<Tensor4<T>> {
        self.check_input(x.shape())?;
        let dw = self.depthwise.forward(x, mode)?;
        let d = self.bn.forward(&dw, mode)?;
        let low = self.p1.forward(&d, mode)?;
        let mut branch = self.p2.forward(&low, mode)?;
        if self.hyper.use_l2norm {
            branch = self.l2.forward(&branch, mode)?;
        }
        let mut out = if self.hyper.use_residual {
            branch.add(&d)?
        } else {
            branch
        };
        if self.hyper.use_relu {
            out = self.relu.forward(&out, mode)?;
        }
        self.cache = Some(());
        Ok(out)
    }

    fn infer(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        self.check_input(x.shape())?;
        let d = self.bn.infer(&self.depthwise.infer(x)?)?;
        let mut branch = self.p2.infer(&self.p1.infer(&d)?)?;
        if self.hyper.use_l2norm {
            branch = self.l2.infer(&branch)?;
        }
        let mut out = if self.hyper.use_residual {
            branch.add(&d)?
        } else {
            branch
        };
        if self.hyper.use_relu {
            out = self.relu.infer(&out)?;
        }
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor4<T>) -> Result<Tensor4<T>> {
        take_cache(&mut self.cache, "lpr")?;
        let g = if self.hyper.use_relu {
            self.relu.backward(grad_out)?
        } else {
            grad_out.clone()
        };
        let mut g_branch = g.clone();
        if self.hyper.use_l2norm {
            g_branch = self.l2.backward(&g_branch)?;
        }
        let g_low = self.p2.backward(&g_branch)?;
        let mut g_d = self.p1.backward(&g_low)?;
        if self.hyper.use_residual {
            g_d.add_assign(&g)?;
        }
        let g_dw = self.bn.backward(&g_d)?;
        self.depthwise.backward(&g_dw)
    }

    fn params(&self) -> Vec<(String, &Param<T>)> {
        let mut v = prefixed("dw", self.depthwise.params());
        v.extend(prefixed("bn", self.bn.params()));
        v.extend(prefixed("p1", self.p1.params()));
        v.extend(prefixed("p2", self.p2.params()));
        v
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        let mut v = prefixed("dw", self.depthwise.params_mut());
        v.extend(prefixed("bn", self.bn.params_mut()));
        v.extend(prefixed("p1", self.p1.params_mut()));
        v.extend(prefixed("p2", self.p2.params_mut()));
        v
    }

    fn buffers(&self) -> Vec<(String, &Tensor4<T>)> {
        prefixed("bn", self.bn.buffers())
    }

    fn buffers_mut(&mut self) -> Vec<(String, &mut Tensor4<T>)> {
        prefixed("bn", self.bn.buffers_mut())
    }
}
