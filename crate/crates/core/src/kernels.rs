//! Optimized convolution kernels.
//!
//! Convolutions are computed tap by tap: for every `(input channel, ky, kx)`
//! the whole valid span of an output row is updated with one scaled row of the
//! input, which keeps the inner loop contiguous for stride 1. Each output
//! element is always accumulated in the same order, so the optional
//! plane-parallel mode gives bit-identical results to the sequential one.

use std::ops::{AddAssign, Mul};
use std::sync::atomic::{AtomicBool, Ordering};

use rayon::prelude::*;

use crate::error::Result;
use crate::tensor::{conv_output_shape, ConvParams, Real, Tensor};

static PARALLEL: AtomicBool = AtomicBool::new(false);

/// Enables plane-parallel kernels. Off by default.
pub fn set_parallel(enabled: bool) {
    PARALLEL.store(enabled, Ordering::Relaxed);
}

pub fn parallel_enabled() -> bool {
    PARALLEL.load(Ordering::Relaxed)
}

/// Below this many multiply-accumulates per call the rayon overhead dominates.
const PAR_MIN_WORK: usize = 1 << 17;

/// Types the forward kernel can accumulate in.
pub trait Accum: Copy + Default + Send + Sync + AddAssign + Mul<Output = Self> {}
impl Accum for f32 {}
impl Accum for f64 {}
impl Accum for i32 {}
impl Accum for i64 {}

fn for_each_plane<T: Send>(
    buf: &mut [T],
    plane: usize,
    work: usize,
    f: impl Fn(usize, &mut [T]) + Send + Sync,
) {
    if parallel_enabled() && work >= PAR_MIN_WORK {
        buf.par_chunks_mut(plane)
            .enumerate()
            .for_each(|(i, p)| f(i, p));
    } else {
        buf.chunks_mut(plane).enumerate().for_each(|(i, p)| f(i, p));
    }
}

/// Output positions `o` with `0 <= o*stride + k - pad < len`, as a half-open range.
#[inline]
fn valid_range(out_len: usize, in_len: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi_excl = if in_len + pad > k {
        ((in_len - 1 + pad - k) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo, hi_excl.max(lo))
}

#[derive(Clone, Copy)]
struct Geometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    cin_g: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
    groups: usize,
}

impl Geometry {
    fn new(input: &[usize], weight: &[usize], bias: Option<&[usize]>, p: ConvParams) -> Result<Self> {
        let [n, cout, ho, wo] = conv_output_shape(input, weight, bias, p)?;
        Ok(Geometry {
            n,
            cin: input[1],
            h: input[2],
            w: input[3],
            cout,
            cin_g: weight[1],
            kh: weight[2],
            kw: weight[3],
            ho,
            wo,
            stride: p.stride,
            pad: p.pad,
            groups: p.groups,
        })
    }

    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }

    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn macs(&self) -> usize {
        self.n * self.cout * self.ho * self.wo * self.cin_g * self.kh * self.kw
    }
}

/// Raw forward convolution over slices; shared by the float and integer paths.
/// `input` must already have its zero point removed for integer use.
pub(crate) fn conv2d_forward_raw<A: Accum>(
    input: &[A],
    in_shape: &[usize],
    weight: &[A],
    w_shape: &[usize],
    bias: Option<&[A]>,
    p: ConvParams,
) -> Result<(Vec<A>, [usize; 4])> {
    let bias_shape = bias.map(|b| [b.len()]);
    let g = Geometry::new(in_shape, w_shape, bias_shape.as_ref().map(|s| &s[..]), p)?;
    let plane = g.ho * g.wo;
    let mut out = vec![A::default(); g.n * g.cout * plane];
    let cout_g = g.cout_g();
    for_each_plane(&mut out, plane, g.macs(), |idx, dst| {
        let (b, co) = (idx / g.cout, idx % g.cout);
        let grp = co / cout_g;
        if let Some(bias) = bias {
            dst.fill(bias[co]);
        }
        for ci in 0..g.cin_g {
            let c_in = grp * g.cin_g + ci;
            let src = &input[(b * g.cin + c_in) * g.h * g.w..][..g.h * g.w];
            let taps = &weight[(co * g.cin_g + ci) * g.kh * g.kw..][..g.kh * g.kw];
            if g.pointwise() {
                let wv = taps[0];
                for (o, &x) in dst.iter_mut().zip(src) {
                    *o += wv * x;
                }
                continue;
            }
            for ky in 0..g.kh {
                let (oh0, oh1) = valid_range(g.ho, g.h, ky, g.stride, g.pad);
                for kx in 0..g.kw {
                    let wv = taps[ky * g.kw + kx];
                    let (ow0, ow1) = valid_range(g.wo, g.w, kx, g.stride, g.pad);
                    if ow0 >= ow1 {
                        continue;
                    }
                    for oh in oh0..oh1 {
                        let ih = oh * g.stride + ky - g.pad;
                        let row_out = &mut dst[oh * g.wo + ow0..oh * g.wo + ow1];
                        let iw0 = ow0 * g.stride + kx - g.pad;
                        let row_in = &src[ih * g.w..(ih + 1) * g.w];
                        if g.stride == 1 {
                            for (o, &x) in row_out.iter_mut().zip(&row_in[iw0..]) {
                                *o += wv * x;
                            }
                        } else {
                            for (o, x) in row_out.iter_mut().zip(row_in[iw0..].iter().step_by(g.stride)) {
                                *o += wv * *x;
                            }
                        }
                    }
                }
            }
        }
    });
    Ok((out, [g.n, g.cout, g.ho, g.wo]))
}

/// Optimized 2-D convolution, same semantics as
/// [`conv2d_reference`](crate::tensor::conv2d_reference).
pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    p: ConvParams,
) -> Result<Tensor<T>> {
    let (data, shape) = conv2d_forward_raw(
        input.data(),
        input.shape(),
        weight.data(),
        weight.shape(),
        bias.map(|b| b.data()),
        p,
    )?;
    Tensor::new(shape, data)
}

/// Gradient of a convolution with respect to its input.
pub fn conv2d_backward_input<T: Real>(
    grad_out: &Tensor<T>,
    weight: &Tensor<T>,
    in_shape: &[usize],
    p: ConvParams,
) -> Result<Tensor<T>> {
    let g = Geometry::new(in_shape, weight.shape(), None, p)?;
    if grad_out.shape() != [g.n, g.cout, g.ho, g.wo] {
        return Err(crate::error::Error::shape(
            "conv2d backward",
            "grad_out",
            grad_out.shape(),
            "expected",
            &[g.n, g.cout, g.ho, g.wo],
        ));
    }
    let (go, wt) = (grad_out.data(), weight.data());
    let plane = g.h * g.w;
    let mut gin = vec![T::zero(); g.n * g.cin * plane];
    let cout_g = g.cout_g();
    for_each_plane(&mut gin, plane, g.macs(), |idx, dst| {
        let (b, c_in) = (idx / g.cin, idx % g.cin);
        let grp = c_in / g.cin_g;
        let ci = c_in % g.cin_g;
        for co in grp * cout_g..(grp + 1) * cout_g {
            let src = &go[(b * g.cout + co) * g.ho * g.wo..][..g.ho * g.wo];
            let taps = &wt[(co * g.cin_g + ci) * g.kh * g.kw..][..g.kh * g.kw];
            if g.pointwise() {
                let wv = taps[0];
                for (d, &x) in dst.iter_mut().zip(src) {
                    *d += wv * x;
                }
                continue;
            }
            for ky in 0..g.kh {
                let (oh0, oh1) = valid_range(g.ho, g.h, ky, g.stride, g.pad);
                for kx in 0..g.kw {
                    let wv = taps[ky * g.kw + kx];
                    let (ow0, ow1) = valid_range(g.wo, g.w, kx, g.stride, g.pad);
                    if ow0 >= ow1 {
                        continue;
                    }
                    for oh in oh0..oh1 {
                        let ih = oh * g.stride + ky - g.pad;
                        let row_go = &src[oh * g.wo + ow0..oh * g.wo + ow1];
                        let iw0 = ow0 * g.stride + kx - g.pad;
                        let row_in = &mut dst[ih * g.w..(ih + 1) * g.w];
                        if g.stride == 1 {
                            for (d, &x) in row_in[iw0..].iter_mut().zip(row_go) {
                                *d += wv * x;
                            }
                        } else {
                            for (d, &x) in row_in[iw0..].iter_mut().step_by(g.stride).zip(row_go) {
                                *d += wv * x;
                            }
                        }
                    }
                }
            }
        }
    });
    Tensor::new(in_shape.to_vec(), gin)
}

/// Gradient of a convolution with respect to its weight, summed over the batch.
pub fn conv2d_backward_weight<T: Real>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    w_shape: &[usize],
    p: ConvParams,
) -> Result<Tensor<T>> {
    let g = Geometry::new(input.shape(), w_shape, None, p)?;
    if grad_out.shape() != [g.n, g.cout, g.ho, g.wo] {
        return Err(crate::error::Error::shape(
            "conv2d backward",
            "grad_out",
            grad_out.shape(),
            "expected",
            &[g.n, g.cout, g.ho, g.wo],
        ));
    }
    let (go, x) = (grad_out.data(), input.data());
    let block = g.cin_g * g.kh * g.kw;
    let mut gw = vec![T::zero(); g.cout * block];
    let cout_g = g.cout_g();
    for_each_plane(&mut gw, block, g.macs(), |co, dst| {
        let grp = co / cout_g;
        for b in 0..g.n {
            let src_go = &go[(b * g.cout + co) * g.ho * g.wo..][..g.ho * g.wo];
            for ci in 0..g.cin_g {
                let c_in = grp * g.cin_g + ci;
                let src = &x[(b * g.cin + c_in) * g.h * g.w..][..g.h * g.w];
                if g.pointwise() {
                    let mut acc = T::zero();
                    for (&a, &v) in src_go.iter().zip(src) {
                        acc += a * v;
                    }
                    dst[ci] += acc;
                    continue;
                }
                for ky in 0..g.kh {
                    let (oh0, oh1) = valid_range(g.ho, g.h, ky, g.stride, g.pad);
                    for kx in 0..g.kw {
                        let (ow0, ow1) = valid_range(g.wo, g.w, kx, g.stride, g.pad);
                        if ow0 >= ow1 {
                            continue;
                        }
                        let mut acc = T::zero();
                        for oh in oh0..oh1 {
                            let ih = oh * g.stride + ky - g.pad;
                            let row_go = &src_go[oh * g.wo + ow0..oh * g.wo + ow1];
                            let iw0 = ow0 * g.stride + kx - g.pad;
                            let row_in = &src[ih * g.w..(ih + 1) * g.w];
                            if g.stride == 1 {
                                for (&a, &v) in row_go.iter().zip(&row_in[iw0..]) {
                                    acc += a * v;
                                }
                            } else {
                                for (&a, v) in row_go.iter().zip(row_in[iw0..].iter().step_by(g.stride)) {
                                    acc += a * *v;
                                }
                            }
                        }
                        dst[(ci * g.kh + ky) * g.kw + kx] += acc;
                    }
                }
            }
        }
    });
    Tensor::new(w_shape.to_vec(), gw)
}

/// Per-channel sum of an NCHW gradient: the bias gradient of a convolution.
pub fn channel_sums<T: Real>(grad_out: &Tensor<T>) -> Result<Vec<T>> {
    let [n, c, h, w] = grad_out.dims4()?;
    let mut sums = vec![T::zero(); c];
    for (i, plane) in grad_out.data().chunks_exact(h * w).enumerate() {
        sums[i % c] += plane.iter().copied().sum::<T>();
    }
    debug_assert_eq!(grad_out.numel(), n * c * h * w);
    Ok(sums)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::conv2d_reference;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn valid_range_matches_brute_force() {
        for out_len in 1..6 {
            for in_len in 1..9 {
                for k in 0..3 {
                    for stride in 1..3 {
                        for pad in 0..2 {
                            let (lo, hi) = valid_range(out_len, in_len, k, stride, pad);
                            let brute: Vec<usize> = (0..out_len)
                                .filter(|&o| {
                                    let i = (o * stride + k) as isize - pad as isize;
                                    i >= 0 && (i as usize) < in_len
                                })
                                .collect();
                            let got: Vec<usize> = (lo..hi).collect();
                            assert_eq!(got, brute, "{out_len} {in_len} {k} {stride} {pad}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn forward_matches_reference_with_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(groups, k, stride) in &[(1, 3, 1), (4, 3, 2), (1, 1, 1), (2, 3, 1), (4, 1, 2)] {
            let x = Tensor::from_fn([2, 4, 7, 6], |_| rng.random::<f64>() - 0.5);
            let w = Tensor::from_fn([8, 4 / groups, k, k], |_| rng.random::<f64>() - 0.5);
            let b = Tensor::from_fn([8], |_| rng.random::<f64>());
            let p = ConvParams::new(stride, k / 2, groups);
            let fast = conv2d(&x, &w, Some(&b), p).unwrap();
            let slow = conv2d_reference(&x, &w, Some(&b), p).unwrap();
            assert_eq!(fast.shape(), slow.shape());
            for (a, r) in fast.data().iter().zip(slow.data()) {
                assert!((a - r).abs() <= 1e-12 * r.abs().max(1.0));
            }
        }
    }

    #[test]
    fn parallel_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::from_fn([2, 16, 32, 32], |_| rng.random::<f32>() - 0.5);
        let w = Tensor::from_fn([16, 16, 3, 3], |_| rng.random::<f32>() - 0.5);
        let g = Tensor::from_fn([2, 16, 32, 32], |_| rng.random::<f32>() - 0.5);
        let p = ConvParams::new(1, 1, 1);
        let run = || {
            (
                conv2d(&x, &w, None, p).unwrap(),
                conv2d_backward_input(&g, &w, x.shape(), p).unwrap(),
                conv2d_backward_weight(&g, &x, w.shape(), p).unwrap(),
            )
        };
        let seq = run();
        set_parallel(true);
        let par = run();
        set_parallel(false);
        assert!(seq == par);
    }

    /// Adjoint identity: <conv(x), g> == <x, conv_backward_input(g)>.
    #[test]
    fn backward_input_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for &(groups, k, stride) in &[(1, 3, 1), (3, 3, 2), (1, 1, 1), (3, 1, 2)] {
            let x = Tensor::from_fn([1, 3, 6, 5], |_| rng.random::<f64>() - 0.5);
            let w = Tensor::from_fn([6, 3 / groups, k, k], |_| rng.random::<f64>() - 0.5);
            let p = ConvParams::new(stride, k / 2, groups);
            let y = conv2d(&x, &w, None, p).unwrap();
            let g = Tensor::from_fn(y.shape().to_vec(), |_| rng.random::<f64>() - 0.5);
            let gx = conv2d_backward_input(&g, &w, x.shape(), p).unwrap();
            let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.data().iter().zip(gx.data()).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-12, "{lhs} {rhs}");
            let gw = conv2d_backward_weight(&g, &x, w.shape(), p).unwrap();
            let rhs_w: f64 = w.data().iter().zip(gw.data()).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs_w).abs() < 1e-12, "{lhs} {rhs_w}");
        }
    }
}
