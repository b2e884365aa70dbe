use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor5};

#[derive(Clone, Debug)]
pub struct XentOutput<T: Scalar = f32> {
    /// Mean negative log-probability of the true class.
    pub loss: f64,
    /// `(softmax − onehot) / n`.
    pub grad: Tensor5<T>,
    pub probs: Tensor5<T>,
}

/// Row-wise softmax of `(n, classes, 1, 1, 1)` logits, computed in f64.
pub fn softmax<T: Scalar>(logits: &Tensor5<T>) -> Tensor5<T> {
    let k = logits.shape().c();
    let data = logits
        .data()
        .chunks(k)
        .flat_map(|row| softmax_row(row).into_iter().map(T::of))
        .collect();
    Tensor5::from_vec(*logits.shape(), data).unwrap()
}

fn softmax_row<T: Scalar>(row: &[T]) -> Vec<f64> {
    let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v.as_f64() - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

pub fn softmax_xent<T: Scalar>(logits: &Tensor5<T>, labels: &[usize]) -> Result<XentOutput<T>> {
    let s = logits.shape();
    let (n, k) = (s.n(), s.c());
    if s.plane() != 1 || labels.len() != n {
        return Err(Error::shape(format!(
            "softmax_xent: logits {s} with {} labels",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::param(format!("label {bad} outside [0, {k})")));
    }
    let mut loss = 0.0;
    let mut probs = Vec::with_capacity(n * k);
    let mut grad = Vec::with_capacity(n * k);
    for (row, &label) in logits.data().chunks(k).zip(labels) {
        let p = softmax_row(row);
        // log-sum-exp form: exact for tiny probabilities, and NaN stays NaN
        let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln();
        loss += lse - row[label].as_f64();
        for (c, &pc) in p.iter().enumerate() {
            let onehot = if c == label { 1.0 } else { 0.0 };
            grad.push(T::of((pc - onehot) / n as f64));
            probs.push(T::of(pc));
        }
    }
    Ok(XentOutput {
        loss: loss / n as f64,
        grad: Tensor5::from_vec(*s, grad)?,
        probs: Tensor5::from_vec(*s, probs)?,
    })
}

/// Index of the largest entry in each row (first one on ties).
pub fn argmax_rows<T: Scalar>(logits: &Tensor5<T>) -> Vec<usize> {
    let k = logits.shape().c();
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::Shape5;

    #[test]
    fn uniform_logits_give_log_k() {
        for k in [2usize, 5, 400] {
            let l = Tensor5::<f32>::full(Shape5::new(3, k, 1, 1, 1).unwrap(), 0.7);
            let out = softmax_xent(&l, &[0, 1, k - 1]).unwrap();
            assert!((out.loss - (k as f64).ln()).abs() < 1e-9);
        }
    }

    #[test]
    fn rows_sum_to_one() {
        let s = Shape5::new(4, 7, 1, 1, 1).unwrap();
        let l = Tensor5::<f32>::seeded_normal(s, &mut Rng::new(1), 5.0).unwrap();
        let p = softmax(&l);
        for row in p.data().chunks(7) {
            assert!((row.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn label_out_of_range() {
        let l = Tensor5::<f32>::zeros(Shape5::new(1, 3, 1, 1, 1).unwrap());
        assert!(matches!(softmax_xent(&l, &[3]), Err(Error::Param(_))));
    }
}
