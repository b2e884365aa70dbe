//! Per-channel batch normalization over `(n, t, h, w)`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape5, Tensor5};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchNormSpec {
    pub channels: usize,
    pub epsilon: f64,
    /// Weight kept by the running statistics on each update.
    pub momentum: f64,
}

impl BatchNormSpec {
    pub fn new(channels: usize) -> Self {
        BatchNormSpec {
            channels,
            epsilon: 1e-5,
            momentum: 0.9,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm<T: Scalar = f32> {
    pub spec: BatchNormSpec,
    pub scale: Tensor5<T>,
    pub shift: Tensor5<T>,
    pub running_mean: Tensor5<T>,
    pub running_var: Tensor5<T>,
}

/// What the backward pass needs from a forward pass.
#[derive(Clone, Debug)]
pub struct BnCache<T: Scalar = f32> {
    mode: Mode,
    xhat: Tensor5<T>,
    inv_std: Vec<f64>,
    batch_mean: Vec<f64>,
    batch_var: Vec<f64>,
    count: usize,
}

pub(crate) fn channel_shape(c: usize) -> Shape5 {
    Shape5::new(1, c, 1, 1, 1).expect("channel count is positive")
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(spec: BatchNormSpec) -> Result<Self> {
        if spec.channels == 0 || !(spec.epsilon > 0.0) {
            return Err(Error::param(format!("invalid batch norm {spec:?}")));
        }
        let s = channel_shape(spec.channels);
        Ok(BatchNorm {
            spec,
            scale: Tensor5::full(s, T::one()),
            shift: Tensor5::zeros(s),
            running_mean: Tensor5::zeros(s),
            running_var: Tensor5::full(s, T::one()),
        })
    }

    pub fn forward(&self, input: &Tensor5<T>, mode: Mode) -> Result<(Tensor5<T>, BnCache<T>)> {
        let s = *input.shape();
        if s.c() != self.spec.channels {
            return Err(Error::shape(format!(
                "batch norm over {} channels got input {s}",
                self.spec.channels
            )));
        }
        let (n, c, plane) = (s.n(), s.c(), s.plane());
        let count = n * plane;
        let (mean, var) = match mode {
            Mode::Train => {
                if count < 2 {
                    return Err(Error::param(
                        "batch norm in train mode needs more than one value per channel",
                    ));
                }
                channel_moments(input)
            }
            Mode::Eval => (
                self.running_mean.data().iter().map(|v| v.as_f64()).collect(),
                self.running_var.data().iter().map(|v| v.as_f64()).collect(),
            ),
        };
        let inv_std: Vec<f64> = var
            .iter()
            .map(|v| 1.0 / (v + self.spec.epsilon).sqrt())
            .collect();

        let mut xhat = vec![T::zero(); s.numel()];
        let mut out = vec![T::zero(); s.numel()];
        let (gamma, beta) = (self.scale.data(), self.shift.data());
        xhat.par_chunks_mut(plane)
            .zip(out.par_chunks_mut(plane))
            .zip(input.data().par_chunks(plane))
            .enumerate()
            .for_each(|(idx, ((xh, y), x))| {
                let ch = idx % c;
                let (m, is) = (T::of(mean[ch]), T::of(inv_std[ch]));
                for ((xh, y), &x) in xh.iter_mut().zip(y.iter_mut()).zip(x) {
                    *xh = (x - m) * is;
                    *y = *xh * gamma[ch] + beta[ch];
                }
            });
        let cache = BnCache {
            mode,
            xhat: Tensor5::from_vec(s, xhat)?,
            inv_std,
            batch_mean: mean,
            batch_var: var,
            count,
        };
        Ok((Tensor5::from_vec(s, out)?, cache))
    }

    /// Returns `(grad_input, grad_scale, grad_shift)`.
    pub fn backward(
        &self,
        cache: &BnCache<T>,
        grad_output: &Tensor5<T>,
    ) -> Result<(Tensor5<T>, Tensor5<T>, Tensor5<T>)> {
        let s = *cache.xhat.shape();
        grad_output.expect_shape(&s, "batch norm backward")?;
        let (c, plane) = (s.c(), s.plane());
        let sums: Vec<(f64, f64)> = (0..c)
            .into_par_iter()
            .map(|ch| {
                let (mut dy_sum, mut dy_xhat) = (0.0, 0.0);
                for b in 0..s.n() {
                    for (&dy, &xh) in grad_output.plane(b, ch).iter().zip(cache.xhat.plane(b, ch)) {
                        dy_sum += dy.as_f64();
                        dy_xhat += dy.as_f64() * xh.as_f64();
                    }
                }
                (dy_sum, dy_xhat)
            })
            .collect();

        let gamma = self.scale.data();
        let m = cache.count as f64;
        let mut gx = vec![T::zero(); s.numel()];
        gx.par_chunks_mut(plane)
            .zip(grad_output.data().par_chunks(plane))
            .zip(cache.xhat.data().par_chunks(plane))
            .enumerate()
            .for_each(|(idx, ((gx, dy), xh))| {
                let ch = idx % c;
                let k = gamma[ch].as_f64() * cache.inv_std[ch];
                match cache.mode {
                    Mode::Train => {
                        let (sum, sum_x) = (sums[ch].0 / m, sums[ch].1 / m);
                        for ((g, &dy), &xh) in gx.iter_mut().zip(dy).zip(xh) {
                            *g = T::of(k * (dy.as_f64() - sum - xh.as_f64() * sum_x));
                        }
                    }
                    Mode::Eval => {
                        for (g, &dy) in gx.iter_mut().zip(dy) {
                            *g = T::of(k * dy.as_f64());
                        }
                    }
                }
            });
        let cs = channel_shape(c);
        let gscale = Tensor5::from_vec(cs, sums.iter().map(|p| T::of(p.1)).collect())?;
        let gshift = Tensor5::from_vec(cs, sums.iter().map(|p| T::of(p.0)).collect())?;
        Ok((Tensor5::from_vec(s, gx)?, gscale, gshift))
    }

    /// Fold the batch statistics of a train-mode pass into the running
    /// estimates (unbiased variance). No-op for eval-mode caches.
    pub fn update_running(&mut self, cache: &BnCache<T>) {
        if cache.mode != Mode::Train {
            return;
        }
        let mom = self.spec.momentum;
        let unbias = cache.count as f64 / (cache.count as f64 - 1.0);
        for (r, &m) in self.running_mean.data_mut().iter_mut().zip(&cache.batch_mean) {
            *r = T::of(mom * r.as_f64() + (1.0 - mom) * m);
        }
        for (r, &v) in self.running_var.data_mut().iter_mut().zip(&cache.batch_var) {
            *r = T::of(mom * r.as_f64() + (1.0 - mom) * v * unbias);
        }
    }
}

/// Per-channel mean and biased variance, two-pass in f64.
fn channel_moments<T: Scalar>(x: &Tensor5<T>) -> (Vec<f64>, Vec<f64>) {
    let s = x.shape();
    let count = (s.n() * s.plane()) as f64;
    (0..s.c())
        .into_par_iter()
        .map(|ch| {
            let mut sum = 0.0;
            for b in 0..s.n() {
                sum += x.plane(b, ch).iter().map(|v| v.as_f64()).sum::<f64>();
            }
            let mean = sum / count;
            let mut sq = 0.0;
            for b in 0..s.n() {
                sq += x
                    .plane(b, ch)
                    .iter()
                    .map(|v| (v.as_f64() - mean).powi(2))
                    .sum::<f64>();
            }
            (mean, sq / count)
        })
        .unzip()
}
