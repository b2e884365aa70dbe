use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::conv::out_extent;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape5, Tensor5};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolSpec {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl PoolSpec {
    pub fn output_dims(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            if self.kernel[a] == 0 || self.stride[a] == 0 || 2 * self.padding[a] > self.kernel[a] {
                return Err(Error::param(format!("invalid pool {self:?}")));
            }
            out[a] = out_extent(input[a], self.kernel[a], self.stride[a], self.padding[a])
                .ok_or_else(|| {
                    Error::shape(format!(
                        "pool window {:?} larger than padded input {input:?}",
                        self.kernel
                    ))
                })?;
        }
        Ok(out)
    }

    pub fn output_shape(&self, input: &Shape5) -> Result<Shape5> {
        let [t, h, w] = self.output_dims([input.t(), input.h(), input.w()])?;
        Shape5::new(input.n(), input.c(), t, h, w)
    }
}

/// Argmax positions (within each input plane) recorded by the forward pass.
#[derive(Clone, Debug)]
pub struct PoolCache {
    input_shape: Shape5,
    argmax: Vec<u32>,
}

/// Max pooling; padded positions never win. Ties go to the lowest flat
/// input index.
pub fn maxpool3d_forward<T: Scalar>(
    input: &Tensor5<T>,
    spec: &PoolSpec,
) -> Result<(Tensor5<T>, PoolCache)> {
    let ins = *input.shape();
    let outs = spec.output_shape(&ins)?;
    if ins.plane() > u32::MAX as usize {
        return Err(Error::Size("pool plane exceeds u32 indexing".into()));
    }
    let [it, ih, iw] = [ins.t(), ins.h(), ins.w()];
    let [ot, oh, ow] = [outs.t(), outs.h(), outs.w()];
    let (in_plane, out_plane) = (ins.plane(), outs.plane());

    let mut out = vec![T::zero(); outs.numel()];
    let mut argmax = vec![0u32; outs.numel()];
    out.par_chunks_mut(out_plane)
        .zip(argmax.par_chunks_mut(out_plane))
        .zip(input.data().par_chunks(in_plane))
        .for_each(|((dst, arg), src)| {
            for t in 0..ot {
                for h in 0..oh {
                    for w in 0..ow {
                        let mut best = T::neg_infinity();
                        let mut best_i = usize::MAX;
                        for kt in 0..spec.kernel[0] {
                            let Some(x_t) = src_pos(t, kt, spec, 0, it) else { continue };
                            for kh in 0..spec.kernel[1] {
                                let Some(x_h) = src_pos(h, kh, spec, 1, ih) else { continue };
                                for kw in 0..spec.kernel[2] {
                                    let Some(x_w) = src_pos(w, kw, spec, 2, iw) else { continue };
                                    let i = (x_t * ih + x_h) * iw + x_w;
                                    let v = src[i];
                                    if best_i == usize::MAX || v > best || (v == best && i < best_i) {
                                        best = v;
                                        best_i = i;
                                    }
                                }
                            }
                        }
                        let o = (t * oh + h) * ow + w;
                        dst[o] = best;
                        arg[o] = best_i as u32;
                    }
                }
            }
        });
    Ok((
        Tensor5::from_vec(outs, out)?,
        PoolCache {
            input_shape: ins,
            argmax,
        },
    ))
}

#[inline]
fn src_pos(o: usize, k: usize, spec: &PoolSpec, axis: usize, len: usize) -> Option<usize> {
    let i = (o * spec.stride[axis] + k).checked_sub(spec.padding[axis])?;
    (i < len).then_some(i)
}

/// Routes each output gradient to its recorded argmax.
pub fn maxpool3d_backward<T: Scalar>(cache: &PoolCache, grad_output: &Tensor5<T>) -> Result<Tensor5<T>> {
    let ins = cache.input_shape;
    if grad_output.len() != cache.argmax.len() || grad_output.shape().n() != ins.n() {
        return Err(Error::shape("pool backward: grad_output does not match forward output"));
    }
    let out_plane = grad_output.shape().plane();
    let mut gx = vec![T::zero(); ins.numel()];
    gx.par_chunks_mut(ins.plane())
        .zip(grad_output.data().par_chunks(out_plane))
        .zip(cache.argmax.par_chunks(out_plane))
        .for_each(|((dst, g), arg)| {
            for (&g, &a) in g.iter().zip(arg) {
                dst[a as usize] += g;
            }
        });
    Tensor5::from_vec(ins, gx)
}

/// Mean over `(t, h, w)`; output `(n, c, 1, 1, 1)`.
pub fn global_avgpool_forward<T: Scalar>(input: &Tensor5<T>) -> Tensor5<T> {
    let s = input.shape();
    let plane = s.plane();
    let data = input
        .data()
        .chunks(plane)
        .map(|p| T::of(p.iter().map(|v| v.as_f64()).sum::<f64>() / plane as f64))
        .collect();
    Tensor5::from_vec(Shape5::new(s.n(), s.c(), 1, 1, 1).unwrap(), data).unwrap()
}

pub fn global_avgpool_backward<T: Scalar>(input_shape: &Shape5, grad_output: &Tensor5<T>) -> Result<Tensor5<T>> {
    if grad_output.shape().dims() != [input_shape.n(), input_shape.c(), 1, 1, 1] {
        return Err(Error::shape(format!(
            "avgpool backward: grad {} for input {input_shape}",
            grad_output.shape()
        )));
    }
    let plane = input_shape.plane();
    let k = T::of(1.0 / plane as f64);
    let mut data = Vec::with_capacity(input_shape.numel());
    for &g in grad_output.data() {
        data.extend(std::iter::repeat_n(g * k, plane));
    }
    Tensor5::from_vec(*input_shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pool1() -> PoolSpec {
        PoolSpec {
            kernel: [1, 3, 3],
            stride: [1, 2, 2],
            padding: [0, 1, 1],
        }
    }

    #[test]
    fn stem_pool_shape() {
        let s = Shape5::new(1, 64, 8, 112, 112).unwrap();
        assert_eq!(pool1().output_shape(&s).unwrap().dims(), [1, 64, 8, 56, 56]);
    }

    #[test]
    fn window_larger_than_input_is_error() {
        let spec = PoolSpec {
            kernel: [1, 5, 5],
            stride: [1; 3],
            padding: [0; 3],
        };
        assert!(spec.output_shape(&Shape5::new(1, 1, 1, 3, 3).unwrap()).is_err());
    }

    #[test]
    fn constant_input_constant_output() {
        let s = Shape5::new(2, 3, 2, 7, 7).unwrap();
        let x = Tensor5::<f32>::full(s, 1.5);
        let (y, cache) = maxpool3d_forward(&x, &pool1()).unwrap();
        assert!(y.data().iter().all(|&v| v == 1.5));
        // ties resolve to the first in-bounds element of each window
        assert_eq!(cache.argmax[0], 0);
    }

    #[test]
    fn backward_conserves_mass() {
        let s = Shape5::new(1, 2, 2, 6, 6).unwrap();
        let x = Tensor5::<f64>::seeded_normal(s, &mut crate::rng::Rng::new(4), 1.0).unwrap();
        let (y, cache) = maxpool3d_forward(&x, &pool1()).unwrap();
        let g = Tensor5::<f64>::seeded_normal(*y.shape(), &mut crate::rng::Rng::new(5), 1.0).unwrap();
        let gx = maxpool3d_backward(&cache, &g).unwrap();
        assert!((gx.sum() - g.sum()).abs() < 1e-12);
    }

    #[test]
    fn avgpool_values() {
        let s = Shape5::new(1, 1, 2, 1, 1).unwrap();
        let x = Tensor5::<f32>::from_vec(s, vec![2.0, 4.0]).unwrap();
        assert_eq!(global_avgpool_forward(&x).data(), &[3.0]);
        let ones = Tensor5::<f32>::full(Shape5::new(2, 3, 2, 2, 2).unwrap(), 1.0);
        assert!(global_avgpool_forward(&ones).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn avgpool_conservation() {
        let s = Shape5::new(2, 3, 3, 4, 5).unwrap();
        let x = Tensor5::<f32>::seeded_normal(s, &mut crate::rng::Rng::new(8), 1.0).unwrap();
        let y = global_avgpool_forward(&x);
        assert!((y.sum() * s.plane() as f64 - x.sum()).abs() < 1e-4);
    }
}
