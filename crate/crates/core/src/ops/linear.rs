use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape5, Tensor5};

/// `logits[n, k] = Σ_f weight[k, f] · x[n, f] + bias[k]`.
///
/// Features arrive as `(n, f, 1, 1, 1)`; the weight is stored as
/// `(classes, f, 1, 1, 1)` and the bias as `(1, classes, 1, 1, 1)`.
/// Logits come back as `(n, classes, 1, 1, 1)`.
pub fn linear_forward<T: Scalar>(
    input: &Tensor5<T>,
    weight: &Tensor5<T>,
    bias: &Tensor5<T>,
) -> Result<Tensor5<T>> {
    let (n, f, k) = check(input.shape(), weight.shape(), bias.shape())?;
    let (x, w, b) = (input.data(), weight.data(), bias.data());
    let mut out = Vec::with_capacity(n * k);
    for s in 0..n {
        let xs = &x[s * f..(s + 1) * f];
        for c in 0..k {
            let mut acc = b[c];
            for (&wv, &xv) in w[c * f..(c + 1) * f].iter().zip(xs) {
                acc += wv * xv;
            }
            out.push(acc);
        }
    }
    Tensor5::from_vec(Shape5::new(n, k, 1, 1, 1)?, out)
}

/// Returns `(grad_input, grad_weight, grad_bias)`.
pub fn linear_backward<T: Scalar>(
    input: &Tensor5<T>,
    weight: &Tensor5<T>,
    grad_output: &Tensor5<T>,
) -> Result<(Tensor5<T>, Tensor5<T>, Tensor5<T>)> {
    let (n, f) = (input.shape().n(), input.shape().c());
    let k = weight.shape().n();
    if grad_output.shape().dims() != [n, k, 1, 1, 1] {
        return Err(Error::shape(format!(
            "linear backward: grad {} for {n} samples and {k} classes",
            grad_output.shape()
        )));
    }
    let (x, w, g) = (input.data(), weight.data(), grad_output.data());
    let mut gx = vec![T::zero(); n * f];
    let mut gw = vec![T::zero(); k * f];
    let mut gb = vec![T::zero(); k];
    for s in 0..n {
        for c in 0..k {
            let gv = g[s * k + c];
            gb[c] += gv;
            for i in 0..f {
                gx[s * f + i] += w[c * f + i] * gv;
                gw[c * f + i] += gv * x[s * f + i];
            }
        }
    }
    Ok((
        Tensor5::from_vec(*input.shape(), gx)?,
        Tensor5::from_vec(*weight.shape(), gw)?,
        Tensor5::from_vec(Shape5::new(1, k, 1, 1, 1)?, gb)?,
    ))
}

fn check(x: &Shape5, w: &Shape5, b: &Shape5) -> Result<(usize, usize, usize)> {
    if [x.t(), x.h(), x.w()] != [1, 1, 1] {
        return Err(Error::shape(format!("linear expects pooled features, got {x}")));
    }
    let (k, f) = (w.n(), w.c());
    if w.plane() != 1 || x.c() != f {
        return Err(Error::shape(format!("linear weight {w} does not fit features {x}")));
    }
    if b.dims() != [1, k, 1, 1, 1] {
        return Err(Error::shape(format!("linear bias {b} does not fit {k} classes")));
    }
    Ok((x.n(), f, k))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_and_zero_input() {
        let f = Tensor5::<f32>::from_vec(Shape5::new(2, 3, 1, 1, 1).unwrap(), vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let mut w = Tensor5::zeros(Shape5::new(3, 3, 1, 1, 1).unwrap());
        for i in 0..3 {
            w.data_mut()[i * 3 + i] = 1.0;
        }
        let b0 = Tensor5::zeros(Shape5::new(1, 3, 1, 1, 1).unwrap());
        assert_eq!(linear_forward(&f, &w, &b0).unwrap().data(), f.data());

        let b = Tensor5::from_vec(*b0.shape(), vec![0.5, -1.0, 2.0]).unwrap();
        let z = Tensor5::zeros(*f.shape());
        assert_eq!(linear_forward(&z, &w, &b).unwrap().data(), &[0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);
    }

    #[test]
    fn dimension_mismatch() {
        let f = Tensor5::<f32>::zeros(Shape5::new(1, 4, 1, 1, 1).unwrap());
        let w = Tensor5::zeros(Shape5::new(3, 3, 1, 1, 1).unwrap());
        let b = Tensor5::zeros(Shape5::new(1, 3, 1, 1, 1).unwrap());
        assert!(linear_forward(&f, &w, &b).is_err());
        let unpooled = Tensor5::<f32>::zeros(Shape5::new(1, 3, 2, 1, 1).unwrap());
        assert!(linear_forward(&unpooled, &w, &b).is_err());
    }
}
