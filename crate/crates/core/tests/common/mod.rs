//! Test-only oracles. Nothing here calls the kernels it is used to check.
#![allow(dead_code)]

use csn_core::ops::ConvSpec;
use csn_core::{Rng, Scalar, Shape5, Tensor5};

pub fn shape(d: [usize; 5]) -> Shape5 {
    Shape5::from_dims(d).unwrap()
}

pub fn randn<T: Scalar>(s: Shape5, seed: u64) -> Tensor5<T> {
    Tensor5::seeded_normal(s, &mut Rng::new(seed), 1.0).unwrap()
}

/// Seven nested loops over signed coordinates, f64 accumulation.
pub fn brute_conv(x: &Tensor5<f64>, w: &Tensor5<f64>, spec: &ConvSpec) -> Tensor5<f64> {
    let [n, cin, it, ih, iw] = x.shape().dims();
    let [kt, kh, kw] = spec.kernel;
    let ext = |len: usize, k: usize, s: usize, p: usize| (len + 2 * p - k) / s + 1;
    let ot = ext(it, kt, spec.stride[0], spec.padding[0]);
    let oh = ext(ih, kh, spec.stride[1], spec.padding[1]);
    let ow = ext(iw, kw, spec.stride[2], spec.padding[2]);
    let cig = cin / spec.groups;
    let cog = spec.c_out / spec.groups;
    let mut out = Tensor5::zeros(shape([n, spec.c_out, ot, oh, ow]));
    for b in 0..n {
        for o in 0..spec.c_out {
            let g = o / cog;
            for t in 0..ot {
                for h in 0..oh {
                    for ww in 0..ow {
                        let mut acc = 0.0;
                        for icl in 0..cig {
                            for a in 0..kt {
                                for bb in 0..kh {
                                    for c in 0..kw {
                                        let st = (t * spec.stride[0] + a) as isize - spec.padding[0] as isize;
                                        let sh = (h * spec.stride[1] + bb) as isize - spec.padding[1] as isize;
                                        let sw = (ww * spec.stride[2] + c) as isize - spec.padding[2] as isize;
                                        if st < 0 || sh < 0 || sw < 0 || st >= it as isize || sh >= ih as isize || sw >= iw as isize {
                                            continue;
                                        }
                                        acc += w.get([o, icl, a, bb, c])
                                            * x.get([b, g * cig + icl, st as usize, sh as usize, sw as usize]);
                                    }
                                }
                            }
                        }
                        out.set([b, o, t, h, ww], acc);
                    }
                }
            }
        }
    }
    out
}

/// Expand a grouped weight into the equivalent dense (G = 1) weight with
/// zeros outside each output channel's group.
pub fn block_diagonal<T: Scalar>(w: &Tensor5<T>, spec: &ConvSpec) -> (Tensor5<T>, ConvSpec) {
    let [cout, cig, kt, kh, kw] = w.shape().dims();
    let cog = cout / spec.groups;
    let mut dense = Tensor5::zeros(shape([cout, spec.c_in, kt, kh, kw]));
    for o in 0..cout {
        let g = o / cog;
        for icl in 0..cig {
            for a in 0..kt {
                for b in 0..kh {
                    for c in 0..kw {
                        dense.set([o, g * cig + icl, a, b, c], w.get([o, icl, a, b, c]));
                    }
                }
            }
        }
    }
    let mut dspec = *spec;
    dspec.groups = 1;
    (dense, dspec)
}

/// Central differences of `f` with respect to selected entries of `x`.
pub fn numeric_grad(
    x: &Tensor5<f64>,
    entries: &[usize],
    h: f64,
    mut f: impl FnMut(&Tensor5<f64>) -> f64,
) -> Vec<f64> {
    entries
        .iter()
        .map(|&i| {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            (f(&xp) - f(&xm)) / (2.0 * h)
        })
        .collect()
}

/// `|a − n| / max(|a|, |n|, floor)`, maximized over entries.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Up to `k` distinct indices in `[0, len)`, spread deterministically.
pub fn sample_indices(len: usize, k: usize, seed: u64) -> Vec<usize> {
    if len <= k {
        return (0..len).collect();
    }
    let mut rng = Rng::new(seed);
    let mut picked: Vec<usize> = (0..k).map(|_| rng.below(len as u64) as usize).collect();
    picked.sort_unstable();
    picked.dedup();
    picked
}
