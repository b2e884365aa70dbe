//! Grouped 3-D convolution (cross-correlation, zero padding).
//!
//! Weight layout is `(c_out, c_in / groups, k_t, k_h, k_w)`. Output channel
//! `o` belongs to group `o / (c_out / groups)` and reads only the input
//! channels of that group.
//!
//! Every kernel partitions its output into disjoint contiguous chunks, one
//! per parallel task, and accumulates each element in a fixed order
//! (input channel, then `k_t`, `k_h`, `k_w`). Results are bit-identical
//! for any thread count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape5, Tensor5};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub groups: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub bias: bool,
}

impl ConvSpec {
    pub fn new(
        c_in: usize,
        c_out: usize,
        groups: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        padding: [usize; 3],
    ) -> Self {
        ConvSpec {
            c_in,
            c_out,
            groups,
            kernel,
            stride,
            padding,
            bias: false,
        }
    }

    /// 1×1×1 convolution.
    pub fn pointwise(c_in: usize, c_out: usize, groups: usize, stride: [usize; 3]) -> Self {
        Self::new(c_in, c_out, groups, [1; 3], stride, [0; 3])
    }

    /// k×k×k convolution with "same" padding `(k - 1) / 2`.
    pub fn cube(c_in: usize, c_out: usize, groups: usize, k: usize, stride: [usize; 3]) -> Self {
        Self::new(c_in, c_out, groups, [k; 3], stride, [(k - 1) / 2; 3])
    }

    pub fn with_bias(mut self, bias: bool) -> Self {
        self.bias = bias;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.c_in == 0 || self.c_out == 0 || self.groups == 0 {
            return Err(Error::param(format!("conv {self:?}: zero channel or group count")));
        }
        if !self.c_in.is_multiple_of(self.groups) || !self.c_out.is_multiple_of(self.groups) {
            return Err(Error::param(format!(
                "groups {} must divide c_in {} and c_out {}",
                self.groups, self.c_in, self.c_out
            )));
        }
        if self.kernel.contains(&0) || self.stride.contains(&0) {
            return Err(Error::param(format!("conv {self:?}: zero kernel or stride")));
        }
        Ok(())
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups == self.c_in && self.groups == self.c_out
    }

    pub fn is_pointwise(&self) -> bool {
        self.kernel == [1; 3]
    }

    #[inline]
    pub fn in_per_group(&self) -> usize {
        self.c_in / self.groups
    }

    #[inline]
    pub fn out_per_group(&self) -> usize {
        self.c_out / self.groups
    }

    #[inline]
    pub fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn weight_shape(&self) -> Result<Shape5> {
        let [kt, kh, kw] = self.kernel;
        Shape5::new(self.c_out, self.in_per_group(), kt, kh, kw)
    }

    pub fn weight_count(&self) -> usize {
        self.c_out * self.in_per_group() * self.kernel_volume()
    }

    pub fn output_dims(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            out[a] = out_extent(input[a], self.kernel[a], self.stride[a], self.padding[a])
                .ok_or_else(|| {
                    Error::shape(format!(
                        "kernel {:?} with padding {:?} does not fit input {:?}",
                        self.kernel, self.padding, input
                    ))
                })?;
        }
        Ok(out)
    }

    pub fn output_shape(&self, input: &Shape5) -> Result<Shape5> {
        self.validate()?;
        if input.c() != self.c_in {
            return Err(Error::shape(format!(
                "input has {} channels, conv expects {}",
                input.c(),
                self.c_in
            )));
        }
        let [t, h, w] = self.output_dims([input.t(), input.h(), input.w()])?;
        Shape5::new(input.n(), self.c_out, t, h, w)
    }
}

/// `⌊(len + 2p − k) / s⌋ + 1`, or `None` when the window does not fit.
pub(crate) fn out_extent(len: usize, k: usize, s: usize, p: usize) -> Option<usize> {
    let padded = len + 2 * p;
    (padded >= k).then(|| (padded - k) / s + 1)
}

/// Output indices `o` in `[lo, hi)` whose input position `o·s + k − p`
/// falls inside `[0, len)`.
#[inline]
pub(crate) fn valid_range(out: usize, len: usize, k: usize, s: usize, p: usize) -> (usize, usize) {
    let lo = if k >= p { 0 } else { (p - k).div_ceil(s) };
    if len + p <= k {
        return (0, 0);
    }
    let hi = ((len - 1 + p - k) / s + 1).min(out);
    (lo.min(hi), hi)
}

/// Per-axis geometry shared by the three kernels.
#[derive(Clone, Copy)]
struct Geometry {
    input: [usize; 3],
    output: [usize; 3],
    stride: [usize; 3],
    padding: [usize; 3],
}

impl Geometry {
    #[inline]
    fn range(&self, axis: usize, k: usize) -> (usize, usize) {
        valid_range(
            self.output[axis],
            self.input[axis],
            k,
            self.stride[axis],
            self.padding[axis],
        )
    }

    #[inline]
    fn src(&self, axis: usize, o: usize, k: usize) -> usize {
        o * self.stride[axis] + k - self.padding[axis]
    }

    /// Visit every (output row, input row, ow range, iw start) for one tap.
    #[inline]
    fn for_each_row(&self, tap: [usize; 3], mut f: impl FnMut(usize, usize, usize, usize, usize)) {
        let [kt, kh, kw] = tap;
        let (t0, t1) = self.range(0, kt);
        let (h0, h1) = self.range(1, kh);
        let (w0, w1) = self.range(2, kw);
        if t0 >= t1 || h0 >= h1 || w0 >= w1 {
            return;
        }
        let [_, ih, iw] = self.input;
        let [_, oh, ow] = self.output;
        for ot in t0..t1 {
            let it = self.src(0, ot, kt);
            for oh_ in h0..h1 {
                let ih_ = self.src(1, oh_, kh);
                let out_row = (ot * oh + oh_) * ow;
                let in_row = (it * ih + ih_) * iw;
                f(out_row, in_row, w0, w1, self.src(2, w0, kw));
            }
        }
    }
}

fn geometry(spec: &ConvSpec, input: &Shape5, output: &Shape5) -> Geometry {
    Geometry {
        input: [input.t(), input.h(), input.w()],
        output: [output.t(), output.h(), output.w()],
        stride: spec.stride,
        padding: spec.padding,
    }
}

fn check_weight<T: Scalar>(weight: &Tensor5<T>, spec: &ConvSpec) -> Result<()> {
    let expected = spec.weight_shape()?;
    if *weight.shape() != expected {
        return Err(Error::shape(format!(
            "weight shape {} does not match conv spec (expected {expected})",
            weight.shape()
        )));
    }
    Ok(())
}

fn check_bias<T: Scalar>(bias: Option<&[T]>, spec: &ConvSpec) -> Result<()> {
    match (bias, spec.bias) {
        (Some(b), true) if b.len() == spec.c_out => Ok(()),
        (None, false) => Ok(()),
        (Some(b), true) => Err(Error::shape(format!(
            "bias has {} entries, conv has {} outputs",
            b.len(),
            spec.c_out
        ))),
        _ => Err(Error::param("bias presence does not match conv spec")),
    }
}

pub fn conv3d_forward<T: Scalar>(
    input: &Tensor5<T>,
    weight: &Tensor5<T>,
    bias: Option<&[T]>,
    spec: &ConvSpec,
) -> Result<Tensor5<T>> {
    let out_shape = spec.output_shape(input.shape())?;
    check_weight(weight, spec)?;
    check_bias(bias, spec)?;

    let geo = geometry(spec, input.shape(), &out_shape);
    let in_plane = input.shape().plane();
    let out_plane = out_shape.plane();
    let (c_in, c_out) = (spec.c_in, spec.c_out);
    let (cig, cog) = (spec.in_per_group(), spec.out_per_group());
    let [kt, kh, kw] = spec.kernel;
    let kvol = spec.kernel_volume();
    let stride_w = spec.stride[2];
    let x = input.data();
    let w = weight.data();

    let mut out = vec![T::zero(); out_shape.numel()];
    out.par_chunks_mut(out_plane)
        .enumerate()
        .for_each(|(idx, dst)| {
            let (b, o) = (idx / c_out, idx % c_out);
            let g = o / cog;
            if let Some(bias) = bias {
                dst.fill(bias[o]);
            }
            for icl in 0..cig {
                let ic = g * cig + icl;
                let src = &x[(b * c_in + ic) * in_plane..][..in_plane];
                let wrow = &w[(o * cig + icl) * kvol..][..kvol];
                for a in 0..kt {
                    for bb in 0..kh {
                        for c in 0..kw {
                            let wv = wrow[(a * kh + bb) * kw + c];
                            geo.for_each_row([a, bb, c], |orow, irow, w0, w1, iw0| {
                                let d = &mut dst[orow + w0..orow + w1];
                                axpy_strided(d, &src[irow + iw0..], stride_w, wv);
                            });
                        }
                    }
                }
            }
        });
    Tensor5::from_vec(out_shape, out)
}

/// `dst[i] += a * src[i * stride]`.
#[inline]
fn axpy_strided<T: Scalar>(dst: &mut [T], src: &[T], stride: usize, a: T) {
    if stride == 1 {
        for (d, &s) in dst.iter_mut().zip(src) {
            *d += a * s;
        }
    } else {
        for (d, &s) in dst.iter_mut().zip(src.iter().step_by(stride)) {
            *d += a * s;
        }
    }
}

/// `dst[i * stride] += a * src[i]`.
#[inline]
fn scatter_strided<T: Scalar>(dst: &mut [T], src: &[T], stride: usize, a: T) {
    if stride == 1 {
        for (d, &s) in dst.iter_mut().zip(src) {
            *d += a * s;
        }
    } else {
        for (d, &s) in dst.iter_mut().step_by(stride).zip(src) {
            *d += a * s;
        }
    }
}

/// `Σ a[i] * b[i * stride]`.
#[inline]
fn dot_strided<T: Scalar>(a: &[T], b: &[T], stride: usize) -> T {
    let mut acc = T::zero();
    if stride == 1 {
        for (&x, &y) in a.iter().zip(b) {
            acc += x * y;
        }
    } else {
        for (&x, &y) in a.iter().zip(b.iter().step_by(stride)) {
            acc += x * y;
        }
    }
    acc
}

/// Gradients of one convolution.
#[derive(Clone, Debug)]
pub struct ConvGrads<T: Scalar = f32> {
    pub input: Tensor5<T>,
    pub weight: Tensor5<T>,
    pub bias: Option<Vec<T>>,
}

fn check_grad_output<T: Scalar>(
    input: &Shape5,
    grad_output: &Tensor5<T>,
    spec: &ConvSpec,
) -> Result<Shape5> {
    let out_shape = spec.output_shape(input)?;
    if *grad_output.shape() != out_shape {
        return Err(Error::shape(format!(
            "grad_output {} does not match forward output {out_shape}",
            grad_output.shape()
        )));
    }
    Ok(out_shape)
}

pub fn conv3d_backward<T: Scalar>(
    input: &Tensor5<T>,
    weight: &Tensor5<T>,
    grad_output: &Tensor5<T>,
    spec: &ConvSpec,
) -> Result<ConvGrads<T>> {
    Ok(ConvGrads {
        input: conv3d_backward_input(input.shape(), weight, grad_output, spec)?,
        weight: conv3d_backward_weight(input, grad_output, spec)?,
        bias: if spec.bias {
            Some(conv3d_backward_bias(grad_output))
        } else {
            None
        },
    })
}

/// Adjoint of the forward map in its input argument.
pub fn conv3d_backward_input<T: Scalar>(
    input_shape: &Shape5,
    weight: &Tensor5<T>,
    grad_output: &Tensor5<T>,
    spec: &ConvSpec,
) -> Result<Tensor5<T>> {
    let out_shape = check_grad_output(input_shape, grad_output, spec)?;
    check_weight(weight, spec)?;

    let geo = geometry(spec, input_shape, &out_shape);
    let in_plane = input_shape.plane();
    let out_plane = out_shape.plane();
    let (c_in, c_out) = (spec.c_in, spec.c_out);
    let (cig, cog) = (spec.in_per_group(), spec.out_per_group());
    let [kt, kh, kw] = spec.kernel;
    let kvol = spec.kernel_volume();
    let stride_w = spec.stride[2];
    let gy = grad_output.data();
    let w = weight.data();

    let mut gx = vec![T::zero(); input_shape.numel()];
    gx.par_chunks_mut(in_plane)
        .enumerate()
        .for_each(|(idx, dst)| {
            let (b, ic) = (idx / c_in, idx % c_in);
            let (g, icl) = (ic / cig, ic % cig);
            for o in g * cog..(g + 1) * cog {
                let src = &gy[(b * c_out + o) * out_plane..][..out_plane];
                let wrow = &w[(o * cig + icl) * kvol..][..kvol];
                for a in 0..kt {
                    for bb in 0..kh {
                        for c in 0..kw {
                            let wv = wrow[(a * kh + bb) * kw + c];
                            geo.for_each_row([a, bb, c], |orow, irow, w0, w1, iw0| {
                                scatter_strided(
                                    &mut dst[irow + iw0..],
                                    &src[orow + w0..orow + w1],
                                    stride_w,
                                    wv,
                                );
                            });
                        }
                    }
                }
            }
        });
    Tensor5::from_vec(*input_shape, gx)
}

/// Adjoint of the forward map in its weight argument.
pub fn conv3d_backward_weight<T: Scalar>(
    input: &Tensor5<T>,
    grad_output: &Tensor5<T>,
    spec: &ConvSpec,
) -> Result<Tensor5<T>> {
    let out_shape = check_grad_output(input.shape(), grad_output, spec)?;
    let wshape = spec.weight_shape()?;

    let geo = geometry(spec, input.shape(), &out_shape);
    let n = input.shape().n();
    let in_plane = input.shape().plane();
    let out_plane = out_shape.plane();
    let (c_in, c_out) = (spec.c_in, spec.c_out);
    let (cig, cog) = (spec.in_per_group(), spec.out_per_group());
    let [kt, kh, kw] = spec.kernel;
    let kvol = spec.kernel_volume();
    let stride_w = spec.stride[2];
    let x = input.data();
    let gy = grad_output.data();

    let mut gw = vec![T::zero(); wshape.numel()];
    gw.par_chunks_mut(kvol).enumerate().for_each(|(idx, dst)| {
        let (o, icl) = (idx / cig, idx % cig);
        let ic = (o / cog) * cig + icl;
        for b in 0..n {
            let go = &gy[(b * c_out + o) * out_plane..][..out_plane];
            let xi = &x[(b * c_in + ic) * in_plane..][..in_plane];
            for a in 0..kt {
                for bb in 0..kh {
                    for c in 0..kw {
                        let mut acc = T::zero();
                        geo.for_each_row([a, bb, c], |orow, irow, w0, w1, iw0| {
                            acc += dot_strided(&go[orow + w0..orow + w1], &xi[irow + iw0..], stride_w);
                        });
                        dst[(a * kh + bb) * kw + c] += acc;
                    }
                }
            }
        }
    });
    Tensor5::from_vec(wshape, gw)
}

pub fn conv3d_backward_bias<T: Scalar>(grad_output: &Tensor5<T>) -> Vec<T> {
    let s = grad_output.shape();
    (0..s.c())
        .map(|o| {
            let mut acc = T::zero();
            for b in 0..s.n() {
                for &v in grad_output.plane(b, o) {
                    acc += v;
                }
            }
            acc
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn shape(d: [usize; 5]) -> Shape5 {
        Shape5::from_dims(d).unwrap()
    }

    fn randn<T: Scalar>(s: Shape5, seed: u64) -> Tensor5<T> {
        Tensor5::seeded_normal(s, &mut Rng::new(seed), 1.0).unwrap()
    }

    #[test]
    fn identity_kernel_copies_input() {
        let spec = ConvSpec::pointwise(1, 1, 1, [1; 3]);
        let x = randn::<f32>(shape([2, 1, 3, 4, 5]), 1);
        let w = Tensor5::full(shape([1, 1, 1, 1, 1]), 1.0);
        let y = conv3d_forward(&x, &w, None, &spec).unwrap();
        assert_eq!(y, x);
        let g = conv3d_backward(&x, &w, &y, &spec).unwrap();
        assert_eq!(g.input, y);
    }

    #[test]
    fn stem_output_shape() {
        let spec = ConvSpec::new(3, 64, 1, [3, 7, 7], [1, 2, 2], [1, 3, 3]);
        let out = spec.output_shape(&shape([1, 3, 8, 224, 224])).unwrap();
        assert_eq!(out.dims(), [1, 64, 8, 112, 112]);
    }

    #[test]
    fn divisibility_is_checked() {
        assert!(ConvSpec::cube(6, 8, 4, 3, [1; 3]).validate().is_err());
        assert!(ConvSpec::cube(8, 6, 4, 3, [1; 3]).validate().is_err());
        assert!(ConvSpec::cube(8, 8, 8, 3, [1; 3]).is_depthwise());
    }

    #[test]
    fn channel_mismatch_is_error() {
        let spec = ConvSpec::cube(4, 4, 1, 3, [1; 3]);
        let x = Tensor5::<f32>::zeros(shape([1, 3, 4, 4, 4]));
        let w = Tensor5::zeros(spec.weight_shape().unwrap());
        assert!(matches!(conv3d_forward(&x, &w, None, &spec), Err(Error::Shape(_))));
    }

    #[test]
    fn non_positive_output_is_error() {
        let spec = ConvSpec::new(1, 1, 1, [3, 3, 3], [1; 3], [0; 3]);
        assert!(spec.output_shape(&shape([1, 1, 2, 5, 5])).is_err());
    }

    #[test]
    fn bias_is_added_and_summed() {
        let spec = ConvSpec::pointwise(2, 3, 1, [1; 3]).with_bias(true);
        let x = Tensor5::<f64>::zeros(shape([2, 2, 1, 2, 2]));
        let w = randn(spec.weight_shape().unwrap(), 3);
        let bias = [1.0, -2.0, 0.5];
        let y = conv3d_forward(&x, &w, Some(&bias), &spec).unwrap();
        assert_eq!(y.plane(1, 1), &[-2.0; 4]);
        let g = conv3d_backward(&x, &w, &Tensor5::full(*y.shape(), 1.0), &spec).unwrap();
        assert_eq!(g.bias.unwrap(), vec![8.0; 3]);
        assert!(conv3d_forward(&x, &w, None, &spec).is_err());
    }

    #[test]
    fn valid_range_matches_bruteforce() {
        for len in 1..7 {
            for k in 1..5 {
                for s in 1..4 {
                    for p in 0..3 {
                        let Some(out) = out_extent(len, k, s, p) else { continue };
                        for tap in 0..k {
                            let (lo, hi) = valid_range(out, len, tap, s, p);
                            let expect: Vec<usize> = (0..out)
                                .filter(|&o| {
                                    let i = (o * s + tap) as isize - p as isize;
                                    i >= 0 && (i as usize) < len
                                })
                                .collect();
                            assert_eq!((lo..hi).collect::<Vec<_>>(), expect, "len {len} k {k} s {s} p {p} tap {tap}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn linear_in_input() {
        let spec = ConvSpec::new(4, 6, 2, [3, 3, 3], [1, 2, 2], [1, 1, 1]);
        let s = shape([2, 4, 3, 5, 5]);
        let x = randn::<f32>(s, 10);
        let y = randn::<f32>(s, 11);
        let w = randn::<f32>(spec.weight_shape().unwrap(), 12);
        let (alpha, beta) = (0.7f32, -1.3f32);
        let mix = x.zip_map(&y, |a, b| alpha * a + beta * b).unwrap();
        let lhs = conv3d_forward(&mix, &w, None, &spec).unwrap();
        let cx = conv3d_forward(&x, &w, None, &spec).unwrap();
        let cy = conv3d_forward(&y, &w, None, &spec).unwrap();
        let rhs = cx.zip_map(&cy, |a, b| alpha * a + beta * b).unwrap();
        assert!(lhs.max_abs_diff(&rhs).unwrap() <= 1e-4);
    }

    #[test]
    fn parallel_matches_serial_bitwise() {
        let spec = ConvSpec::new(8, 8, 4, [3, 3, 3], [2, 1, 2], [1, 1, 1]);
        let x = randn::<f32>(shape([3, 8, 4, 6, 7]), 20);
        let w = randn::<f32>(spec.weight_shape().unwrap(), 21);
        let run = |threads| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| {
                let y = conv3d_forward(&x, &w, None, &spec).unwrap();
                let g = conv3d_backward(&x, &w, &y, &spec).unwrap();
                (y, g.input, g.weight)
            })
        };
        let serial = run(1);
        let parallel = run(4);
        assert_eq!(serial.0.data(), parallel.0.data());
        assert_eq!(serial.1.data(), parallel.1.data());
        assert_eq!(serial.2.data(), parallel.2.data());
    }
}
