//! Central finite-difference checks of every backward pass, in `f64`.
//!
//! Each check perturbs a sample of entries of every input and parameter by
//! `±h`, recomputes a scalar loss `Σ r·y` with a fixed random `r`, and
//! compares `(L(+h) − L(−h)) / 2h` against the analytic gradient.

use serde::Serialize;

use crate::error::Result;
use crate::ops::{
    conv3d_backward, conv3d_forward, global_avgpool_backward, global_avgpool_forward,
    linear_backward, linear_forward, maxpool3d_backward, maxpool3d_forward, relu_backward,
    softmax_xent, BatchNorm, BatchNormSpec, ConvSpec, Mode, PoolSpec,
};
use crate::rng::Rng;
use crate::tensor::{Shape5, Tensor5};
use crate::zoo::{make_block, ArchSpec, Block, BlockKind, BlockSpec, Model};

pub const LAYER_TOLERANCE: f64 = 1e-4;
pub const MODEL_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug, Serialize)]
pub struct GradCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

/// Relative error with a floor so that near-zero gradients compare on an
/// absolute scale.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

const FLOOR: f64 = 1e-6;

/// Block losses reach |L| ~ 10², so the difference quotient of an exactly
/// zero gradient (BN parameters whose effect the next batch norm removes)
/// is rounding noise of order ε·|L|/h ≈ 1e-9. Gradients below this floor
/// are compared on an absolute scale.
const BLOCK_FLOOR: f64 = 1e-4;

type T64 = Tensor5<f64>;

/// Accumulates comparisons for one check.
struct Checker {
    rng: Rng,
    h: f64,
    floor: f64,
    /// Entries above this error are re-measured with smaller steps.
    refine_above: f64,
    per_tensor: usize,
    entries: usize,
    worst: f64,
}

impl Checker {
    fn new(seed: u64, h: f64, per_tensor: usize) -> Self {
        Checker {
            rng: Rng::new(seed),
            h,
            floor: FLOOR,
            refine_above: LAYER_TOLERANCE,
            per_tensor,
            entries: 0,
            worst: 0.0,
        }
    }

    fn sample(&mut self, len: usize) -> Vec<usize> {
        if len <= self.per_tensor {
            return (0..len).collect();
        }
        let mut v: Vec<usize> = (0..self.per_tensor).map(|_| self.rng.below(len as u64) as usize).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    /// Compare `analytic` against differences of `loss` as `t[i]` moves.
    ///
    /// A ReLU or max-pool input within `h` of a kink makes one side of the
    /// difference see a different slope; such entries are retried at
    /// `h/10` and `h/100` and keep the best agreement.
    fn compare(&mut self, t: &mut T64, analytic: &T64, mut loss: impl FnMut(&T64) -> Result<f64>) -> Result<()> {
        for i in self.sample(t.len()) {
            let a = analytic.data()[i];
            let mut err = f64::INFINITY;
            let mut h = self.h;
            for _ in 0..3 {
                let orig = t.data()[i];
                t.data_mut()[i] = orig + h;
                let lp = loss(t)?;
                t.data_mut()[i] = orig - h;
                let lm = loss(t)?;
                t.data_mut()[i] = orig;
                err = err.min(rel_err(a, (lp - lm) / (2.0 * h), self.floor));
                if err <= self.refine_above {
                    break;
                }
                h /= 10.0;
            }
            self.worst = self.worst.max(err);
            self.entries += 1;
        }
        Ok(())
    }

    fn finish(self, name: impl Into<String>, tolerance: f64) -> GradCheck {
        GradCheck {
            name: name.into(),
            entries: self.entries,
            max_rel_err: self.worst,
            tolerance,
        }
    }
}

fn randn(s: [usize; 5], rng: &mut Rng) -> Result<T64> {
    Tensor5::seeded_normal(Shape5::from_dims(s)?, rng, 1.0)
}

/// `Σ r·y`; the gradient with respect to `y` is `r`.
fn project(y: &T64, r: &T64) -> Result<f64> {
    y.dot(r)
}

fn check_conv(name: &str, spec: ConvSpec, input: [usize; 5], seed: u64) -> Result<GradCheck> {
    let mut rng = Rng::new(seed);
    let mut x = randn(input, &mut rng)?;
    let mut w = Tensor5::seeded_normal(spec.weight_shape()?, &mut rng, 0.5)?;
    let b: Vec<f64> = (0..spec.c_out).map(|_| rng.normal()).collect();
    let y = conv3d_forward(&x, &w, spec.bias.then_some(b.as_slice()), &spec)?;
    let r = Tensor5::seeded_normal(*y.shape(), &mut rng, 1.0)?;
    let g = conv3d_backward(&x, &w, &r, &spec)?;
    let bias = spec.bias.then_some(b.as_slice());
    let mut c = Checker::new(seed ^ 1, 1e-5, 40);
    c.compare(&mut x, &g.input, |x| project(&conv3d_forward(x, &w, bias, &spec)?, &r))?;
    let x0 = x.clone();
    c.compare(&mut w, &g.weight, |w| project(&conv3d_forward(&x0, w, bias, &spec)?, &r))?;
    if let Some(gb) = g.bias {
        let gb = Tensor5::from_vec(Shape5::new(1, spec.c_out, 1, 1, 1)?, gb)?;
        let mut bt = Tensor5::from_vec(*gb.shape(), b.clone())?;
        c.compare(&mut bt, &gb, |bt| project(&conv3d_forward(&x0, &w, Some(bt.data()), &spec)?, &r))?;
    }
    Ok(c.finish(name, LAYER_TOLERANCE))
}

fn check_bn(mode: Mode, seed: u64) -> Result<GradCheck> {
    let mut rng = Rng::new(seed);
    let s = [2, 3, 2, 3, 3];
    let mut x = randn(s, &mut rng)?;
    let mut bn = BatchNorm::<f64>::new(BatchNormSpec::new(3))?;
    bn.scale = Tensor5::seeded_normal(*bn.scale.shape(), &mut rng, 1.0)?;
    bn.shift = Tensor5::seeded_normal(*bn.shift.shape(), &mut rng, 1.0)?;
    bn.running_mean = Tensor5::seeded_normal(*bn.shift.shape(), &mut rng, 0.5)?;
    bn.running_var = bn.running_mean.map(|v| 0.5 + v * v);
    let (y, cache) = bn.forward(&x, mode)?;
    let r = Tensor5::seeded_normal(*y.shape(), &mut rng, 1.0)?;
    let (gx, gscale, gshift) = bn.backward(&cache, &r)?;
    let mut c = Checker::new(seed ^ 1, 1e-5, 40);
    c.compare(&mut x, &gx, |x| project(&bn.forward(x, mode)?.0, &r))?;
    let mut scale = bn.scale.clone();
    let mut probe = bn.clone();
    c.compare(&mut scale, &gscale, |s| {
        probe.scale = s.clone();
        project(&probe.forward(&x, mode)?.0, &r)
    })?;
    let mut shift = bn.shift.clone();
    let mut probe = bn.clone();
    c.compare(&mut shift, &gshift, |s| {
        probe.shift = s.clone();
        project(&probe.forward(&x, mode)?.0, &r)
    })?;
    let name = match mode {
        Mode::Train => "batchnorm-train",
        Mode::Eval => "batchnorm-eval",
    };
    Ok(c.finish(name, LAYER_TOLERANCE))
}

fn check_simple(name: &str, seed: u64, s: [usize; 5]) -> Result<GradCheck> {
    let mut rng = Rng::new(seed);
    let mut x = randn(s, &mut rng)?;
    let mut c = Checker::new(seed ^ 1, 1e-6, 40);
    match name {
        "relu" => {
            let y = x.relu();
            let r = Tensor5::seeded_normal(*y.shape(), &mut rng, 1.0)?;
            let gx = relu_backward(&y, &r)?;
            c.compare(&mut x, &gx, |x| project(&x.relu(), &r))?;
        }
        "maxpool" => {
            let spec = PoolSpec {
                kernel: [1, 3, 3],
                stride: [1, 2, 2],
                padding: [0, 1, 1],
            };
            let (y, cache) = maxpool3d_forward(&x, &spec)?;
            let r = Tensor5::seeded_normal(*y.shape(), &mut rng, 1.0)?;
            let gx = maxpool3d_backward(&cache, &r)?;
            c.compare(&mut x, &gx, |x| project(&maxpool3d_forward(x, &spec)?.0, &r))?;
        }
        "avgpool" => {
            let y = global_avgpool_forward(&x);
            let r = Tensor5::seeded_normal(*y.shape(), &mut rng, 1.0)?;
            let gx = global_avgpool_backward(x.shape(), &r)?;
            c.compare(&mut x, &gx, |x| project(&global_avgpool_forward(x), &r))?;
        }
        "linear" => {
            let (n, f, k) = (s[0], s[1], 5);
            let mut w = randn([k, f, 1, 1, 1], &mut rng)?;
            let mut b = randn([1, k, 1, 1, 1], &mut rng)?;
            let r = randn([n, k, 1, 1, 1], &mut rng)?;
            let (gx, gw, gb) = linear_backward(&x, &w, &r)?;
            c.compare(&mut x, &gx, |x| project(&linear_forward(x, &w, &b)?, &r))?;
            c.compare(&mut w, &gw, |w| project(&linear_forward(&x, w, &b)?, &r))?;
            c.compare(&mut b, &gb, |b| project(&linear_forward(&x, &w, b)?, &r))?;
        }
        "softmax-xent" => {
            let labels: Vec<usize> = (0..s[0]).map(|i| (i * 3 + 1) % s[1]).collect();
            let out = softmax_xent(&x, &labels)?;
            c.compare(&mut x, &out.grad, |x| Ok(softmax_xent(x, &labels)?.loss))?;
        }
        other => unreachable!("no check named {other}"),
    }
    Ok(c.finish(name, LAYER_TOLERANCE))
}

/// Every layer kernel: convolution at several group counts, strides and
/// paddings; batch norm in both modes; ReLU; both pools; linear; softmax
/// cross-entropy.
pub fn check_layers(seed: u64) -> Result<Vec<GradCheck>> {
    let conv = |cin, cout, g, k: [usize; 3], s: [usize; 3], p: [usize; 3]| ConvSpec::new(cin, cout, g, k, s, p);
    Ok(vec![
        check_conv("conv-dense", conv(3, 4, 1, [3, 3, 3], [1, 1, 1], [1, 1, 1]), [2, 3, 3, 5, 5], seed)?,
        check_conv("conv-grouped", conv(4, 6, 2, [3, 3, 3], [2, 2, 2], [1, 1, 1]), [2, 4, 4, 5, 5], seed + 1)?,
        check_conv("conv-depthwise", conv(4, 4, 4, [3, 3, 3], [1, 2, 2], [1, 1, 1]), [2, 4, 3, 6, 6], seed + 2)?,
        check_conv("conv-pointwise", conv(6, 4, 2, [1, 1, 1], [1, 1, 1], [0, 0, 0]), [2, 6, 2, 3, 3], seed + 3)?,
        check_conv(
            "conv-stem-bias",
            conv(3, 2, 1, [3, 7, 7], [1, 2, 2], [1, 3, 3]).with_bias(true),
            [1, 3, 2, 8, 8],
            seed + 4,
        )?,
        check_bn(Mode::Train, seed + 5)?,
        check_bn(Mode::Eval, seed + 6)?,
        check_simple("relu", seed + 7, [2, 3, 2, 3, 3])?,
        check_simple("maxpool", seed + 8, [2, 2, 2, 5, 5])?,
        check_simple("avgpool", seed + 9, [2, 3, 2, 3, 3])?,
        check_simple("linear", seed + 10, [3, 6, 1, 1, 1])?,
        check_simple("softmax-xent", seed + 11, [4, 5, 1, 1, 1])?,
    ])
}

/// A standalone block, strided and widening so projection paths run.
pub fn check_block(kind: BlockKind, seed: u64) -> Result<GradCheck> {
    let (cin, mid, cout) = if kind.is_simple_family() { (4, 0, 8) } else { (8, 4, 16) };
    let plan = make_block(&BlockSpec {
        kind,
        in_channels: cin,
        mid_channels: mid,
        out_channels: cout,
        stride: [2; 3],
    })?;
    let mut block = Block::<f64>::build("block", plan, seed)?;
    let mut rng = Rng::new(seed ^ 0xB10C);
    // Non-trivial affine parameters so every ReLU sees both signs.
    for l in block.layers_mut() {
        l.bn.scale = Tensor5::seeded_normal(*l.bn.scale.shape(), &mut rng, 1.0)?;
        l.bn.shift = Tensor5::seeded_normal(*l.bn.shift.shape(), &mut rng, 0.5)?;
    }
    let mut x = randn([2, cin, 4, 6, 6], &mut rng)?;
    let (y, cache) = block.forward(&x, Mode::Train)?;
    let r = Tensor5::seeded_normal(*y.shape(), &mut rng, 1.0)?;
    let (gx, grads) = block.backward(&cache, &r)?;

    let mut c = Checker::new(seed ^ 2, 1e-5, 12);
    c.floor = BLOCK_FLOOR;
    c.compare(&mut x, &gx, |x| project(&block.forward(x, Mode::Train)?.0, &r))?;
    let n_layers = block.layers().count();
    for li in 0..n_layers {
        for (k, g) in grads[3 * li..3 * li + 3].iter().enumerate() {
            let mut probe = block.clone();
            let mut t = tensor_of(&mut probe, li, k).clone();
            c.compare(&mut t, g, |t| {
                *tensor_of(&mut probe, li, k) = t.clone();
                project(&probe.forward(&x, Mode::Train)?.0, &r)
            })?;
        }
    }
    Ok(c.finish(format!("block {kind}"), LAYER_TOLERANCE))
}

fn tensor_of(block: &mut Block<f64>, layer: usize, k: usize) -> &mut T64 {
    let l = block.layers_mut().nth(layer).expect("layer index in range");
    match k {
        0 => &mut l.weight,
        1 => &mut l.bn.scale,
        _ => &mut l.bn.shift,
    }
}

/// One representative of each of the eight block kinds.
pub fn check_blocks(seed: u64) -> Result<Vec<GradCheck>> {
    BlockKind::ALL_FAMILIES
        .iter()
        .enumerate()
        .map(|(i, &k)| check_block(k, seed + i as u64))
        .collect()
}

/// End to end through a two-block, eight-channel ip-CSN on a
/// `1×3×4×16×16` input, loss = softmax cross-entropy.
pub fn check_tiny_model(seed: u64) -> Result<GradCheck> {
    check_model("micro-ip-csn", [1, 3, 4, 16, 16], seed)
}

pub fn check_model(arch: &str, input: [usize; 5], seed: u64) -> Result<GradCheck> {
    let arch = ArchSpec::named(arch, 5)?;
    let mut model = Model::<f64>::new(&arch, seed)?;
    let mut rng = Rng::new(seed ^ 0x7E57);
    // A larger classifier scale keeps the loss sensitive to every layer.
    model.fc_weight = Tensor5::seeded_normal(*model.fc_weight.shape(), &mut rng, 0.5)?;
    let mut x = randn(input, &mut rng)?;
    let labels: Vec<usize> = (0..input[0]).map(|i| i % arch.num_classes).collect();
    let loss = |m: &Model<f64>, x: &T64| -> Result<f64> { Ok(softmax_xent(&m.forward(x, Mode::Train)?.0, &labels)?.loss) };

    let (logits, cache) = model.forward(&x, Mode::Train)?;
    let out = softmax_xent(&logits, &labels)?;
    let grads = model.backward(&cache, &out.grad, true)?;
    let mut c = Checker::new(seed ^ 3, 1e-6, 8);
    c.refine_above = MODEL_TOLERANCE;
    let gx = grads.input.expect("input grad requested");
    c.compare(&mut x, &gx, |x| loss(&model, x))?;
    let n = grads.params.len();
    for i in 0..n {
        let mut probe = model.clone();
        let mut t = probe.params()[i].2.clone();
        c.compare(&mut t, &grads.params[i], |t| {
            *probe.params_mut()[i].2 = t.clone();
            loss(&probe, &x)
        })?;
    }
    Ok(c.finish(format!("model {}", arch.name), MODEL_TOLERANCE))
}
