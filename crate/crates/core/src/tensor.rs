//! Dense rank-4 tensors in batch/channel/row/column order.
//!
//! Element `(i, j, y, x)` lives at offset `((i * c + j) * h + y) * w + x`.

use std::fmt;
use std::iter::Sum;

use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// On-disk dtype tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u32 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Scalar types a [`Tensor4`] can hold.
pub trait Element:
    Float + Sum + Default + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    const DTYPE: DType;

    fn from_f64_lossy(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    /// `bytes` holds exactly `DTYPE.size()` bytes.
    fn read_le(bytes: &[u8]) -> Self;
}

impl Element for f32 {
    const DTYPE: DType = DType::F32;

    fn from_f64_lossy(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        let mut b = [0u8; 4];
        b.copy_from_slice(bytes);
        f32::from_le_bytes(b)
    }
}

impl Element for f64 {
    const DTYPE: DType = DType::F64;

    fn from_f64_lossy(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        let mut b = [0u8; 8];
        b.copy_from_slice(bytes);
        f64::from_le_bytes(b)
    }
}

#[inline]
pub(crate) fn lit<T: Element>(v: f64) -> T {
    T::from_f64_lossy(v)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape4 {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn spatial(&self) -> usize {
        self.h * self.w
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    #[inline]
    pub fn offset(&self, i: usize, j: usize, y: usize, x: usize) -> usize {
        ((i * self.c + j) * self.h + y) * self.w + x
    }

    pub(crate) fn validate(&self) -> Result<()> {
        for (axis, d) in [("n", self.n), ("c", self.c), ("h", self.h), ("w", self.w)] {
            if d == 0 {
                return Err(Error::dim(axis, "dimension must be at least 1"));
            }
        }
        Ok(())
    }
}

impl fmt::Display for Shape4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4<T> {
    shape: Shape4,
    data: Vec<T>,
}

impl<T: Element> Tensor4<T> {
    pub fn zeros(shape: Shape4) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: Shape4, value: T) -> Self {
        Self {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn from_vec(shape: Shape4, data: Vec<T>) -> Result<Self> {
        shape.validate()?;
        if data.len() != shape.numel() {
            return Err(Error::dim(
                "data",
                format!("{} elements for shape {shape}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn from_fn(shape: Shape4, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.numel());
        for i in 0..shape.n {
            for j in 0..shape.c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        data.push(f(i, j, y, x));
                    }
                }
            }
        }
        Self { shape, data }
    }

    /// Samples i.i.d. uniform values in `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(shape: Shape4, lo: f64, hi: f64, rng: &mut R) -> Self {
        let data = (0..shape.numel())
            .map(|_| T::from_f64_lossy(rng.random_range(lo..hi)))
            .collect();
        Self { shape, data }
    }

    pub fn randn<R: Rng + ?Sized>(shape: Shape4, std: f64, rng: &mut R) -> Self {
        let data = (0..shape.numel())
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::from_f64_lossy(z * std)
            })
            .collect();
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, y: usize, x: usize) -> T {
        self.data[self.shape.offset(i, j, y, x)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, y: usize, x: usize, v: T) {
        let o = self.shape.offset(i, j, y, x);
        self.data[o] = v;
    }

    /// Contiguous `h * w` slice for one (batch, channel) pair.
    pub fn plane(&self, i: usize, j: usize) -> &[T] {
        let hw = self.shape.spatial();
        let start = (i * self.shape.c + j) * hw;
        &self.data[start..start + hw]
    }

    pub fn plane_mut(&mut self, i: usize, j: usize) -> &mut [T] {
        let hw = self.shape.spatial();
        let start = (i * self.shape.c + j) * hw;
        &mut self.data[start..start + hw]
    }

    /// Same data viewed under a new shape with equal element count.
    pub fn reshape(self, shape: Shape4) -> Result<Self> {
        if shape.numel() != self.data.len() {
            return Err(Error::dim(
                "reshape",
                format!("cannot view {} as {shape}", self.shape),
            ));
        }
        Ok(Self {
            shape,
            data: self.data,
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_shape(other.shape, "operand")?;
        Ok(Self {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    /// `self += other`
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.expect_shape(other.shape, "operand")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn dot(&self, other: &Self) -> Result<T> {
        self.expect_shape(other.shape, "operand")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a * b)
            .sum())
    }

    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |m, &v| if v.abs() > m { v.abs() } else { m })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Element>(&self) -> Tensor4<U> {
        Tensor4 {
            shape: self.shape,
            data: self
                .data
                .iter()
                .map(|&v| U::from_f64_lossy(v.as_f64()))
                .collect(),
        }
    }

    pub(crate) fn expect_shape(&self, want: Shape4, what: &'static str) -> Result<()> {
        if self.shape != want {
            return Err(Error::dim(
                what,
                format!("expected shape {want}, got {}", self.shape),
            ));
        }
        Ok(())
    }

    /// Largest elementwise relative difference `|a-b| / max(|a|, |b|, floor)`.
    pub fn max_rel_diff(&self, other: &Self, floor: f64) -> Result<f64> {
        self.expect_shape(other.shape, "operand")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| {
                let (a, b) = (a.as_f64(), b.as_f64());
                (a - b).abs() / a.abs().max(b.abs()).max(floor)
            })
            .fold(0.0, f64::max))
    }
}

/// Permutes channels through the `(groups, c / groups)` transpose.
///
/// Channel `g * (c / groups) + i` moves to position `i * groups + g`.
pub fn channel_shuffle<T: Element>(x: &Tensor4<T>, groups: usize) -> Result<Tensor4<T>> {
    let s = x.shape();
    if groups == 0 || !s.c.is_multiple_of(groups) {
        return Err(Error::dim(
            "c",
            format!("{groups} groups do not divide {} channels", s.c),
        ));
    }
    let per = s.c / groups;
    let mut out = Tensor4::zeros(s);
    for n in 0..s.n {
        for g in 0..groups {
            for i in 0..per {
                let src = g * per + i;
                let dst = i * groups + g;
                out.plane_mut(n, dst).copy_from_slice(x.plane(n, src));
            }
        }
    }
    Ok(out)
}

/// Splits channels into `[0, at)` and `[at, c)`.
pub fn channel_split<T: Element>(x: &Tensor4<T>, at: usize) -> Result<(Tensor4<T>, Tensor4<T>)> {
    let s = x.shape();
    if at == 0 || at >= s.c {
        return Err(Error::dim(
            "c",
            format!("split point {at} outside (0, {})", s.c),
        ));
    }
    let hw = s.spatial();
    let mut a = Vec::with_capacity(s.n * at * hw);
    let mut b = Vec::with_capacity(s.n * (s.c - at) * hw);
    for (n, sample) in x.data().chunks(s.c * hw).enumerate() {
        debug_assert!(n < s.n);
        a.extend_from_slice(&sample[..at * hw]);
        b.extend_from_slice(&sample[at * hw..]);
    }
    Ok((
        Tensor4::from_vec(Shape4::new(s.n, at, s.h, s.w), a)?,
        Tensor4::from_vec(Shape4::new(s.n, s.c - at, s.h, s.w), b)?,
    ))
}

pub fn channel_concat<T: Element>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<Tensor4<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    for (axis, da, db) in [("n", sa.n, sb.n), ("h", sa.h, sb.h), ("w", sa.w, sb.w)] {
        if da != db {
            return Err(Error::dim(axis, format!("cannot concat {sa} with {sb}")));
        }
    }
    let hw = sa.spatial();
    let mut data = Vec::with_capacity(a.numel() + b.numel());
    for (ca, cb) in a.data().chunks(sa.c * hw).zip(b.data().chunks(sb.c * hw)) {
        data.extend_from_slice(ca);
        data.extend_from_slice(cb);
    }
    Tensor4::from_vec(Shape4::new(sa.n, sa.c + sb.c, sa.h, sa.w), data)
}
