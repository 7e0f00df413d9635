//! Dense row-major tensors and the slow reference kernels every optimized
//! path is checked against.
//!
//! Element types are fixed at compile time through [`Element`]; mixing dtypes
//! is a type error, and [`AnyTensor`] is the only place a dtype is inspected at
//! runtime (when reading files).

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    I8,
    I32,
    F64,
}

impl DType {
    /// On-disk dtype code.
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::I8 => 1,
            DType::I32 => 2,
            DType::F64 => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<DType> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::I8),
            2 => Some(DType::I32),
            3 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size_of(self) -> usize {
        match self {
            DType::F32 | DType::I32 => 4,
            DType::I8 => 1,
            DType::F64 => 8,
        }
    }
}

pub trait Element: Copy + Default + PartialEq + Debug + Send + Sync + 'static {
    const DTYPE: DType;
    fn write_le(self, out: &mut Vec<u8>);
    /// `bytes` has exactly `DTYPE.size_of()` bytes.
    fn read_le(bytes: &[u8]) -> Self;
}

macro_rules! impl_element {
    ($t:ty, $dt:expr) => {
        impl Element for $t {
            const DTYPE: DType = $dt;
            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }
            fn read_le(bytes: &[u8]) -> Self {
                <$t>::from_le_bytes(bytes.try_into().expect("element width"))
            }
        }
    };
}

impl_element!(f32, DType::F32);
impl_element!(f64, DType::F64);
impl_element!(i8, DType::I8);
impl_element!(i32, DType::I32);

/// Floating-point element types the network runs in: `f32` for production,
/// `f64` for gradient checks and oracles.
pub trait Real:
    Element + crate::kernels::Accum + Float + AddAssign + SubAssign + MulAssign + DivAssign + Sum + Send + Sync
{
    fn lit(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    fn lit(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn lit(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        const PREVIEW: usize = 8;
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= PREVIEW {
            write!(f, "{:?}", self.data)
        } else {
            write!(f, "{:?}..", &self.data[..PREVIEW])
        }
    }
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!(
                "dimension sizes must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {numel} elements, buffer has {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        assert!(shape.iter().all(|&d| d > 0), "zero-sized dimension");
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::default())
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        assert!(numel > 0, "zero-sized dimension");
        Tensor {
            shape,
            data: (0..numel).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
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

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    /// `[N, C, H, W]` of a rank-4 tensor.
    pub fn dims4(&self) -> Result<[usize; 4]> {
        match self.shape[..] {
            [n, c, h, w] => Ok([n, c, h, w]),
            _ => Err(Error::Shape(format!(
                "expected rank-4 NCHW tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    #[inline]
    pub fn at4(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        let [_, cs, hs, ws] = [self.shape[0], self.shape[1], self.shape[2], self.shape[3]];
        self.data[((n * cs + c) * hs + h) * ws + w]
    }

    pub fn map<U: Element>(&self, f: impl Fn(T) -> U) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn ensure_same_shape(&self, other: &Tensor<T>, op: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(op, "lhs", &self.shape, "rhs", &other.shape));
        }
        Ok(())
    }
}

impl<T: Real> Tensor<T> {
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        self.map(|x| U::lit(x.as_f64()))
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |acc, &x| if x.abs() > acc { x.abs() } else { acc })
    }
}

/// A tensor whose element type is only known at runtime.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
    I8(Tensor<i8>),
    I32(Tensor<i32>),
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
            AnyTensor::I8(_) => DType::I8,
            AnyTensor::I32(_) => DType::I32,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
            AnyTensor::I8(t) => t.shape(),
            AnyTensor::I32(t) => t.shape(),
        }
    }

    pub fn into_f32(self) -> Result<Tensor<f32>> {
        match self {
            AnyTensor::F32(t) => Ok(t),
            other => Err(Error::DType {
                expected: DType::F32,
                found: other.dtype(),
            }),
        }
    }

    pub fn into_f64(self) -> Result<Tensor<f64>> {
        match self {
            AnyTensor::F64(t) => Ok(t),
            other => Err(Error::DType {
                expected: DType::F64,
                found: other.dtype(),
            }),
        }
    }

    pub fn into_i8(self) -> Result<Tensor<i8>> {
        match self {
            AnyTensor::I8(t) => Ok(t),
            other => Err(Error::DType {
                expected: DType::I8,
                found: other.dtype(),
            }),
        }
    }

    pub fn into_i32(self) -> Result<Tensor<i32>> {
        match self {
            AnyTensor::I32(t) => Ok(t),
            other => Err(Error::DType {
                expected: DType::I32,
                found: other.dtype(),
            }),
        }
    }
}

macro_rules! any_from {
    ($t:ty, $v:ident) => {
        impl From<Tensor<$t>> for AnyTensor {
            fn from(t: Tensor<$t>) -> Self {
                AnyTensor::$v(t)
            }
        }
    };
}
any_from!(f32, F32);
any_from!(f64, F64);
any_from!(i8, I8);
any_from!(i32, I32);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvParams {
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl ConvParams {
    pub fn new(stride: usize, pad: usize, groups: usize) -> Self {
        ConvParams {
            stride,
            pad,
            groups,
        }
    }
}

/// Validates a convolution and returns the output shape `[N, Cout, Hout, Wout]`.
pub fn conv_output_shape(
    input: &[usize],
    weight: &[usize],
    bias: Option<&[usize]>,
    p: ConvParams,
) -> Result<[usize; 4]> {
    let (&[n, cin, h, w], &[cout, cin_g, kh, kw]) = (input, weight) else {
        return Err(Error::shape("conv2d", "input", input, "weight", weight));
    };
    let bad = |why: &str| {
        Err(Error::ShapeMismatch {
            op: format!("conv2d ({why})"),
            lhs_name: "input",
            lhs: input.to_vec(),
            rhs_name: "weight",
            rhs: weight.to_vec(),
        })
    };
    if p.stride == 0 || p.groups == 0 {
        return bad("stride and groups must be >= 1");
    }
    if cin % p.groups != 0 || cout % p.groups != 0 {
        return bad("channels not divisible by groups");
    }
    if cin / p.groups != cin_g {
        return bad("weight input channels != Cin/groups");
    }
    if h + 2 * p.pad < kh || w + 2 * p.pad < kw {
        return bad("kernel larger than padded input");
    }
    if let Some(b) = bias {
        if b != [cout] {
            return Err(Error::shape("conv2d", "weight", weight, "bias", b));
        }
    }
    Ok([
        n,
        cout,
        (h + 2 * p.pad - kh) / p.stride + 1,
        (w + 2 * p.pad - kw) / p.stride + 1,
    ])
}

/// Direct convolution: one accumulation per (n, co, oh, ow, ci, kh, kw),
/// zero padding outside the input.
pub fn conv2d_reference<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    p: ConvParams,
) -> Result<Tensor<T>> {
    let [n, cout, ho, wo] =
        conv_output_shape(input.shape(), weight.shape(), bias.map(|b| b.shape()), p)?;
    let [_, cin, h, w] = input.dims4()?;
    let [_, cin_g, kh, kw] = weight.dims4()?;
    let cout_g = cout / p.groups;
    let mut out = Tensor::zeros([n, cout, ho, wo]);
    let od = out.data_mut();
    for b in 0..n {
        for co in 0..cout {
            let g = co / cout_g;
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut acc = bias.map_or(T::zero(), |bt| bt.data()[co]);
                    for ci in 0..cin_g {
                        let c_in = g * cin_g + ci;
                        for y in 0..kh {
                            for x in 0..kw {
                                let ih = (oh * p.stride + y) as isize - p.pad as isize;
                                let iw = (ow * p.stride + x) as isize - p.pad as isize;
                                if ih < 0 || iw < 0 || ih >= h as isize || iw >= w as isize {
                                    continue;
                                }
                                acc += input.at4(b, c_in, ih as usize, iw as usize)
                                    * weight.at4(co, ci, y, x);
                            }
                        }
                    }
                    od[((b * cout + co) * ho + oh) * wo + ow] = acc;
                }
            }
        }
    }
    debug_assert_eq!(cin, cin_g * p.groups);
    Ok(out)
}

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + exp(x))` without overflow.
#[inline]
pub fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    ScalarMul,
    Sigmoid,
    Relu,
    Exp,
    Log,
    /// Clamp to `[lo, hi]`.
    Clamp,
}

#[derive(Debug, Clone, Copy)]
pub enum Operand<'a, T> {
    None,
    Tensor(&'a Tensor<T>),
    Scalar(T),
    Range(T, T),
}

pub fn elementwise<T: Real>(op: ElementwiseOp, a: &Tensor<T>, b: Operand<'_, T>) -> Result<Tensor<T>> {
    use ElementwiseOp::*;
    let binary = |f: fn(T, T) -> T| -> Result<Tensor<T>> {
        let Operand::Tensor(b) = b else {
            return Err(Error::Domain(format!("{op:?} needs a tensor operand")));
        };
        a.ensure_same_shape(b, &format!("{op:?}"))?;
        Ok(Tensor {
            shape: a.shape.clone(),
            data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
        })
    };
    match op {
        Add => binary(|x, y| x + y),
        Sub => binary(|x, y| x - y),
        Mul => binary(|x, y| x * y),
        ScalarMul => match b {
            Operand::Scalar(s) => Ok(a.map(|x| x * s)),
            _ => Err(Error::Domain("ScalarMul needs a scalar operand".into())),
        },
        Sigmoid => Ok(a.map(sigmoid)),
        Relu => Ok(a.map(|x| if x > T::zero() { x } else { T::zero() })),
        Exp => Ok(a.map(|x| x.exp())),
        Log => Ok(a.map(|x| x.ln())),
        Clamp => match b {
            Operand::Range(lo, hi) if lo <= hi => Ok(a.map(|x| x.max(lo).min(hi))),
            _ => Err(Error::Domain("Clamp needs a range lo <= hi".into())),
        },
    }
}

pub fn add<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    elementwise(ElementwiseOp::Add, a, Operand::Tensor(b))
}

pub fn sub<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    elementwise(ElementwiseOp::Sub, a, Operand::Tensor(b))
}

pub fn mul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    elementwise(ElementwiseOp::Mul, a, Operand::Tensor(b))
}

pub fn scale<T: Real>(a: &Tensor<T>, s: T) -> Tensor<T> {
    a.map(|x| x * s)
}

/// Nearest-neighbour 2x upsampling: each pixel becomes a 2x2 block.
pub fn resize_nearest_x2<T: Element>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = input.dims4()?;
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = Vec::with_capacity(n * c * h2 * w2);
    for plane in input.data().chunks_exact(h * w) {
        for oy in 0..h2 {
            let row = &plane[(oy / 2) * w..(oy / 2 + 1) * w];
            for &v in row {
                out.push(v);
                out.push(v);
            }
        }
    }
    Tensor::new([n, c, h2, w2], out)
}

/// Sums each 2x2 block; the adjoint of [`resize_nearest_x2`].
pub fn sum_pool2x2<T: Real>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = input.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!(
            "2x2 pooling needs even spatial dims, got {h}x{w}"
        )));
    }
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    for plane in input.data().chunks_exact(h * w) {
        for y in 0..ho {
            let r0 = &plane[2 * y * w..(2 * y + 1) * w];
            let r1 = &plane[(2 * y + 1) * w..(2 * y + 2) * w];
            for x in 0..wo {
                out.push(r0[2 * x] + r0[2 * x + 1] + r1[2 * x] + r1[2 * x + 1]);
            }
        }
    }
    Tensor::new([n, c, ho, wo], out)
}

pub fn avg_pool2x2<T: Real>(input: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(scale(&sum_pool2x2(input)?, T::lit(0.25)))
}

/// Concatenates NCHW tensors along the channel axis.
pub fn concat_channels<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, ca, h, w] = a.dims4()?;
    let [nb, cb, hb, wb] = b.dims4()?;
    if (n, h, w) != (nb, hb, wb) {
        return Err(Error::shape("concat_channels", "lhs", a.shape(), "rhs", b.shape()));
    }
    let (pa, pb) = (ca * h * w, cb * h * w);
    let mut out = Vec::with_capacity(a.numel() + b.numel());
    for i in 0..n {
        out.extend_from_slice(&a.data()[i * pa..(i + 1) * pa]);
        out.extend_from_slice(&b.data()[i * pb..(i + 1) * pb]);
    }
    Tensor::new([n, ca + cb, h, w], out)
}

/// Splits along the channel axis into the first `c_first` channels and the rest.
pub fn split_channels<T: Element>(x: &Tensor<T>, c_first: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let [n, c, h, w] = x.dims4()?;
    if c_first == 0 || c_first >= c {
        return Err(Error::Shape(format!(
            "cannot split {c} channels at {c_first}"
        )));
    }
    let hw = h * w;
    let mut a = Vec::with_capacity(n * c_first * hw);
    let mut b = Vec::with_capacity(n * (c - c_first) * hw);
    for sample in x.data().chunks_exact(c * hw) {
        a.extend_from_slice(&sample[..c_first * hw]);
        b.extend_from_slice(&sample[c_first * hw..]);
    }
    Ok((
        Tensor::new([n, c_first, h, w], a)?,
        Tensor::new([n, c - c_first, h, w], b)?,
    ))
}

/// Stacks `[1, C, H, W]` tensors into one `[N, C, H, W]` batch.
pub fn stack_batch<T: Element>(items: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = items
        .first()
        .ok_or_else(|| Error::Shape("cannot stack an empty batch".into()))?;
    let [_, c, h, w] = first.dims4()?;
    let mut data = Vec::with_capacity(items.len() * first.numel());
    for t in items {
        if t.shape() != [1, c, h, w] {
            return Err(Error::shape("stack_batch", "first", first.shape(), "item", t.shape()));
        }
        data.extend_from_slice(t.data());
    }
    Tensor::new([items.len(), c, h, w], data)
}

/// Extracts sample `i` of a batch as a `[1, C, H, W]` tensor.
pub fn batch_item<T: Element>(x: &Tensor<T>, i: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.dims4()?;
    if i >= n {
        return Err(Error::Shape(format!("batch index {i} out of range for N={n}")));
    }
    let len = c * h * w;
    Tensor::new([1, c, h, w], x.data()[i * len..(i + 1) * len].to_vec())
}
