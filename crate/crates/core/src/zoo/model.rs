//! A built network: parameters, forward pass, and the matching backward pass.

use super::arch::ArchSpec;
use super::block::{BlockPlan, ConvPlan, ConvRole};
use crate::error::{Error, Result};
use crate::ops::{
    conv3d_backward_input, conv3d_backward_weight, conv3d_forward, global_avgpool_backward,
    global_avgpool_forward, linear_backward, linear_forward, maxpool3d_backward, maxpool3d_forward,
    relu_backward, BatchNorm, BatchNormSpec, BnCache, ConvSpec, Mode, PoolCache, PoolSpec,
};
use crate::rng::Rng;
use crate::tensor::{Scalar, Shape5, Tensor5};

/// What a named tensor is, which decides whether the optimizer touches it
/// and whether weight decay applies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TensorRole {
    ConvWeight,
    BnScale,
    BnShift,
    FcWeight,
    FcBias,
    RunningMean,
    RunningVar,
}

impl TensorRole {
    pub fn is_param(self) -> bool {
        !matches!(self, TensorRole::RunningMean | TensorRole::RunningVar)
    }

    pub fn decays(self) -> bool {
        matches!(self, TensorRole::ConvWeight | TensorRole::FcWeight)
    }
}

/// Convolution (no bias) → batch norm → optional ReLU.
#[derive(Clone, Debug)]
pub struct ConvBn<T: Scalar = f32> {
    pub name: String,
    pub spec: ConvSpec,
    pub relu: bool,
    pub weight: Tensor5<T>,
    pub bn: BatchNorm<T>,
}

#[derive(Clone, Debug)]
struct ConvBnCache<T: Scalar> {
    input: Tensor5<T>,
    bn: BnCache<T>,
    output: Tensor5<T>,
}

impl<T: Scalar> ConvBn<T> {
    fn new(name: String, plan: &ConvPlan) -> Result<Self> {
        Ok(ConvBn {
            name,
            spec: plan.spec,
            relu: plan.relu,
            weight: Tensor5::zeros(plan.spec.weight_shape()?),
            bn: BatchNorm::new(BatchNormSpec::new(plan.spec.c_out))?,
        })
    }

    /// He-style normal weights with `std = sqrt(2 / (c_out · k³))`; BN
    /// back to identity.
    fn init(&mut self, rng: &mut Rng) -> Result<()> {
        let std = (2.0 / (self.spec.c_out * self.spec.kernel_volume()) as f64).sqrt();
        self.weight = Tensor5::seeded_normal(*self.weight.shape(), rng, std)?;
        self.bn = BatchNorm::new(self.bn.spec)?;
        Ok(())
    }

    fn run(&self, x: &Tensor5<T>, mode: Mode, record: bool) -> Result<(Tensor5<T>, Option<ConvBnCache<T>>)> {
        let inner = || -> Result<_> {
            let y = conv3d_forward(x, &self.weight, None, &self.spec)?;
            let (mut z, cache) = self.bn.forward(&y, mode)?;
            if self.relu {
                z = z.relu();
            }
            let cache = record.then(|| ConvBnCache {
                input: x.clone(),
                bn: cache,
                output: z.clone(),
            });
            Ok((z, cache))
        };
        inner().map_err(|e| e.in_layer(&self.name))
    }

    /// Returns the input gradient (when asked) and pushes
    /// `[weight, scale, shift]` gradients onto `grads`.
    fn backward(
        &self,
        cache: &ConvBnCache<T>,
        grad: &Tensor5<T>,
        want_input: bool,
        grads: &mut Vec<Tensor5<T>>,
    ) -> Result<Option<Tensor5<T>>> {
        let mut inner = || -> Result<_> {
            let g = if self.relu {
                relu_backward(&cache.output, grad)?
            } else {
                grad.clone()
            };
            let (gy, gscale, gshift) = self.bn.backward(&cache.bn, &g)?;
            let gw = conv3d_backward_weight(&cache.input, &gy, &self.spec)?;
            let gx = if want_input {
                Some(conv3d_backward_input(cache.input.shape(), &self.weight, &gy, &self.spec)?)
            } else {
                None
            };
            grads.extend([gw, gscale, gshift]);
            Ok(gx)
        };
        inner().map_err(|e| e.in_layer(&self.name))
    }

    fn tensors(&self) -> [(String, TensorRole, &Tensor5<T>); 5] {
        let n = &self.name;
        [
            (format!("{n}.weight"), TensorRole::ConvWeight, &self.weight),
            (format!("{n}.bn.scale"), TensorRole::BnScale, &self.bn.scale),
            (format!("{n}.bn.shift"), TensorRole::BnShift, &self.bn.shift),
            (format!("{n}.bn.running_mean"), TensorRole::RunningMean, &self.bn.running_mean),
            (format!("{n}.bn.running_var"), TensorRole::RunningVar, &self.bn.running_var),
        ]
    }

    fn tensors_mut(&mut self) -> [(String, TensorRole, &mut Tensor5<T>); 5] {
        let n = &self.name;
        [
            (format!("{n}.weight"), TensorRole::ConvWeight, &mut self.weight),
            (format!("{n}.bn.scale"), TensorRole::BnScale, &mut self.bn.scale),
            (format!("{n}.bn.shift"), TensorRole::BnShift, &mut self.bn.shift),
            (format!("{n}.bn.running_mean"), TensorRole::RunningMean, &mut self.bn.running_mean),
            (format!("{n}.bn.running_var"), TensorRole::RunningVar, &mut self.bn.running_var),
        ]
    }

    fn cast<U: Scalar>(&self) -> ConvBn<U> {
        ConvBn {
            name: self.name.clone(),
            spec: self.spec,
            relu: self.relu,
            weight: self.weight.cast(),
            bn: BatchNorm {
                spec: self.bn.spec,
                scale: self.bn.scale.cast(),
                shift: self.bn.shift.cast(),
                running_mean: self.bn.running_mean.cast(),
                running_var: self.bn.running_var.cast(),
            },
        }
    }
}

#[derive(Clone, Debug)]
pub struct Block<T: Scalar = f32> {
    pub name: String,
    pub plan: BlockPlan,
    pub branch: Vec<ConvBn<T>>,
    pub shortcut: Option<ConvBn<T>>,
}

/// Activations recorded by [`Block::forward`].
#[derive(Clone, Debug)]
pub struct BlockCache<T: Scalar = f32> {
    branch: Vec<ConvBnCache<T>>,
    shortcut: Option<ConvBnCache<T>>,
    output: Tensor5<T>,
}

impl<T: Scalar> Block<T> {
    /// A standalone block initialized like a model's blocks, for testing
    /// blocks in isolation. Layers are named `<name>.<role>`.
    pub fn build(name: &str, plan: BlockPlan, seed: u64) -> Result<Self> {
        let mut b = Self::new(name.to_string(), plan)?;
        for (i, layer) in b.layers_mut().enumerate() {
            layer.init(&mut Rng::stream(seed, i as u64))?;
        }
        Ok(b)
    }

    fn new(name: String, plan: BlockPlan) -> Result<Self> {
        let layer = |c: &ConvPlan| ConvBn::new(format!("{name}.{}", c.role.as_str()), c);
        Ok(Block {
            branch: plan.branch.iter().map(layer).collect::<Result<_>>()?,
            shortcut: plan.shortcut.as_ref().map(layer).transpose()?,
            name,
            plan,
        })
    }

    pub fn layers(&self) -> impl Iterator<Item = &ConvBn<T>> {
        self.branch.iter().chain(self.shortcut.iter())
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut ConvBn<T>> {
        self.branch.iter_mut().chain(self.shortcut.iter_mut())
    }

    fn run(&self, x: &Tensor5<T>, mode: Mode, record: bool) -> Result<(Tensor5<T>, Option<BlockCache<T>>)> {
        let mut caches = Vec::with_capacity(self.branch.len());
        let mut y = None::<Tensor5<T>>;
        for layer in &self.branch {
            let (z, c) = layer.run(y.as_ref().unwrap_or(x), mode, record)?;
            caches.extend(c);
            y = Some(z);
        }
        let y = y.expect("blocks have at least two layers");
        let (sum, sc_cache) = match &self.shortcut {
            Some(sc) => {
                let (s, c) = sc.run(x, mode, record)?;
                (y.add(&s), c)
            }
            None => (y.add(x), None),
        };
        let out = sum.map_err(|e| e.in_layer(&self.name))?.relu();
        let cache = record.then(|| BlockCache {
            branch: caches,
            shortcut: sc_cache,
            output: out.clone(),
        });
        Ok((out, cache))
    }

    pub fn forward(&self, x: &Tensor5<T>, mode: Mode) -> Result<(Tensor5<T>, BlockCache<T>)> {
        let (y, c) = self.run(x, mode, true)?;
        Ok((y, c.expect("recorded")))
    }

    /// Input gradient and `[weight, scale, shift]` gradients per layer in
    /// [`Block::layers`] order.
    pub fn backward(&self, cache: &BlockCache<T>, grad: &Tensor5<T>) -> Result<(Tensor5<T>, Vec<Tensor5<T>>)> {
        let mut rev = Vec::new();
        let gx = self.backward_rev(cache, grad, &mut rev)?;
        rev.reverse();
        Ok((gx, rev))
    }

    fn backward_rev(&self, cache: &BlockCache<T>, grad: &Tensor5<T>, grads: &mut Vec<Tensor5<T>>) -> Result<Tensor5<T>> {
        let g = relu_backward(&cache.output, grad).map_err(|e| e.in_layer(&self.name))?;
        // The caller reverses the whole list, so push in reverse parameter
        // order: shortcut first, then the branch from its last layer.
        let mut branch_grads = Vec::new();
        let mut gb = g.clone();
        for (layer, c) in self.branch.iter().zip(&cache.branch).rev() {
            let mut local = Vec::with_capacity(3);
            gb = layer.backward(c, &gb, true, &mut local)?.expect("input grad requested");
            branch_grads.push(local);
        }
        let gs = match (&self.shortcut, &cache.shortcut) {
            (Some(sc), Some(c)) => {
                let mut local = Vec::with_capacity(3);
                let gx = sc.backward(c, &g, true, &mut local)?.expect("input grad requested");
                branch_grads.insert(0, local);
                gx
            }
            _ => g,
        };
        for local in branch_grads {
            grads.extend(local.into_iter().rev());
        }
        gb.add(&gs).map_err(|e| e.in_layer(&self.name))
    }
}

/// A complete network: stem, pool, residual blocks, global average pool and
/// a linear classifier.
#[derive(Clone, Debug)]
pub struct Model<T: Scalar = f32> {
    pub arch: ArchSpec,
    pub stem: ConvBn<T>,
    pub pool: PoolSpec,
    pub blocks: Vec<Block<T>>,
    pub fc_weight: Tensor5<T>,
    pub fc_bias: Tensor5<T>,
}

/// Activations recorded by [`Model::forward`] for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache<T: Scalar = f32> {
    stem: ConvBnCache<T>,
    pool: PoolCache,
    blocks: Vec<BlockCache<T>>,
    features_shape: Shape5,
    pooled: Tensor5<T>,
}

impl<T: Scalar> ForwardCache<T> {
    /// Name of the first layer whose output holds a NaN or infinity.
    pub fn first_non_finite(&self, model: &Model<T>) -> Option<String> {
        if !self.stem.output.is_finite() {
            return Some(model.stem.name.clone());
        }
        for (b, c) in model.blocks.iter().zip(&self.blocks) {
            for (l, lc) in b.branch.iter().zip(&c.branch) {
                if !lc.output.is_finite() {
                    return Some(l.name.clone());
                }
            }
            if let (Some(l), Some(lc)) = (&b.shortcut, &c.shortcut) {
                if !lc.output.is_finite() {
                    return Some(l.name.clone());
                }
            }
        }
        None
    }
}

/// Parameter gradients in [`Model::params`] order, plus the input gradient
/// when requested.
#[derive(Clone, Debug)]
pub struct Gradients<T: Scalar = f32> {
    pub params: Vec<Tensor5<T>>,
    pub input: Option<Tensor5<T>>,
}

impl<T: Scalar> Model<T> {
    /// Build with deterministic initialization: conv weights
    /// `N(0, 2 / (c_out · k³))`, BN scale 1 and shift 0, fc weights
    /// `N(0, 0.01²)` and zero bias. Tensor `i` draws from stream `i` of `seed`.
    pub fn new(arch: &ArchSpec, seed: u64) -> Result<Self> {
        let mut model = Self::zeroed(arch)?;
        model.init(seed)?;
        Ok(model)
    }

    /// Build with every parameter zero (BN scale one). Useful before loading
    /// a checkpoint.
    pub fn zeroed(arch: &ArchSpec) -> Result<Self> {
        arch.validate()?;
        let stem_plan = ConvPlan {
            role: ConvRole::Stem,
            spec: arch.stem(),
            relu: true,
        };
        let blocks = arch
            .blocks()?
            .into_iter()
            .map(|(name, plan)| Block::new(name, plan))
            .collect::<Result<_>>()?;
        let f = arch.feature_width();
        Ok(Model {
            arch: arch.clone(),
            stem: ConvBn::new("conv1".into(), &stem_plan)?,
            pool: arch.pool(),
            blocks,
            fc_weight: Tensor5::zeros(Shape5::new(arch.num_classes, f, 1, 1, 1)?),
            fc_bias: Tensor5::zeros(Shape5::new(1, arch.num_classes, 1, 1, 1)?),
        })
    }

    fn init(&mut self, seed: u64) -> Result<()> {
        let specs: Vec<ConvSpec> = self.conv_layers().map(|l| l.spec).collect();
        let mut conv_idx = 0;
        for (i, (_, role, t)) in self.tensors_mut().into_iter().enumerate() {
            let mut rng = Rng::stream(seed, i as u64);
            let shape = *t.shape();
            match role {
                TensorRole::ConvWeight => {
                    let s = specs[conv_idx];
                    conv_idx += 1;
                    let std = (2.0 / (s.c_out * s.kernel_volume()) as f64).sqrt();
                    *t = Tensor5::seeded_normal(shape, &mut rng, std)?;
                }
                TensorRole::FcWeight => *t = Tensor5::seeded_normal(shape, &mut rng, 0.01)?,
                TensorRole::BnScale | TensorRole::RunningVar => *t = Tensor5::full(shape, T::one()),
                TensorRole::BnShift | TensorRole::RunningMean | TensorRole::FcBias => *t = Tensor5::zeros(shape),
            }
        }
        Ok(())
    }

    /// Every convolution in network order (stem, then each block's branch
    /// followed by its shortcut).
    pub fn conv_layers(&self) -> impl Iterator<Item = &ConvBn<T>> {
        std::iter::once(&self.stem).chain(self.blocks.iter().flat_map(|b| b.layers()))
    }

    pub fn conv_layers_mut(&mut self) -> impl Iterator<Item = &mut ConvBn<T>> {
        std::iter::once(&mut self.stem).chain(self.blocks.iter_mut().flat_map(|b| b.layers_mut()))
    }

    pub fn layer(&self, name: &str) -> Option<&ConvBn<T>> {
        self.conv_layers().find(|l| l.name == name)
    }

    pub fn layer_mut(&mut self, name: &str) -> Option<&mut ConvBn<T>> {
        self.conv_layers_mut().find(|l| l.name == name)
    }

    /// All named tensors, parameters and BN buffers, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, TensorRole, &Tensor5<T>)> {
        let mut out: Vec<_> = self.conv_layers().flat_map(|l| l.tensors()).collect();
        out.push(("fc.weight".into(), TensorRole::FcWeight, &self.fc_weight));
        out.push(("fc.bias".into(), TensorRole::FcBias, &self.fc_bias));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, TensorRole, &mut Tensor5<T>)> {
        let Model {
            stem,
            blocks,
            fc_weight,
            fc_bias,
            ..
        } = self;
        let mut out: Vec<_> = std::iter::once(stem)
            .chain(blocks.iter_mut().flat_map(|b| b.layers_mut()))
            .flat_map(|l| l.tensors_mut())
            .collect();
        out.push(("fc.weight".into(), TensorRole::FcWeight, fc_weight));
        out.push(("fc.bias".into(), TensorRole::FcBias, fc_bias));
        out
    }

    /// Trainable tensors only, in gradient order.
    pub fn params(&self) -> Vec<(String, TensorRole, &Tensor5<T>)> {
        self.tensors().into_iter().filter(|t| t.1.is_param()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<(String, TensorRole, &mut Tensor5<T>)> {
        self.tensors_mut().into_iter().filter(|t| t.1.is_param()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.2.len()).sum()
    }

    /// Name of the first tensor holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<String> {
        self.tensors().into_iter().find(|t| !t.2.is_finite()).map(|t| t.0)
    }

    /// Output shape of every named stage for an input shape, without running
    /// anything: `conv1`, `pool1`, each block, `pool5`, `fc`.
    pub fn trace_shapes(&self, input: &Shape5) -> Result<Vec<(String, Shape5)>> {
        let mut out = Vec::new();
        let mut s = self.stem.spec.output_shape(input).map_err(|e| e.in_layer("conv1"))?;
        out.push(("conv1".to_string(), s));
        s = self.pool.output_shape(&s).map_err(|e| e.in_layer("pool1"))?;
        out.push(("pool1".to_string(), s));
        for b in &self.blocks {
            let mut y = s;
            for l in &b.branch {
                y = l.spec.output_shape(&y).map_err(|e| e.in_layer(&l.name))?;
            }
            s = y;
            out.push((b.name.clone(), s));
        }
        out.push(("pool5".to_string(), Shape5::new(s.n(), s.c(), 1, 1, 1)?));
        out.push(("fc".to_string(), Shape5::new(s.n(), self.arch.num_classes, 1, 1, 1)?));
        Ok(out)
    }

    fn check_input(&self, x: &Tensor5<T>) -> Result<()> {
        if x.shape().c() != self.arch.in_channels {
            return Err(Error::shape(format!(
                "model expects {} input channels, got {}",
                self.arch.in_channels,
                x.shape()
            ))
            .in_layer("conv1"));
        }
        Ok(())
    }

    /// Activation entering the global average pool.
    pub fn features(&self, x: &Tensor5<T>, mode: Mode) -> Result<Tensor5<T>> {
        self.check_input(x)?;
        let (y, _) = self.stem.run(x, mode, false)?;
        let (mut y, _) = maxpool3d_forward(&y, &self.pool).map_err(|e| e.in_layer("pool1"))?;
        for b in &self.blocks {
            y = b.run(&y, mode, false)?.0;
        }
        Ok(y)
    }

    /// Logits `(n, classes, 1, 1, 1)` without recording activations.
    pub fn predict(&self, x: &Tensor5<T>) -> Result<Tensor5<T>> {
        self.predict_mode(x, Mode::Eval)
    }

    pub fn predict_mode(&self, x: &Tensor5<T>, mode: Mode) -> Result<Tensor5<T>> {
        let f = self.features(x, mode)?;
        let pooled = global_avgpool_forward(&f);
        linear_forward(&pooled, &self.fc_weight, &self.fc_bias).map_err(|e| e.in_layer("fc"))
    }

    /// Logits plus the activations [`Model::backward`] needs.
    pub fn forward(&self, x: &Tensor5<T>, mode: Mode) -> Result<(Tensor5<T>, ForwardCache<T>)> {
        self.check_input(x)?;
        let (y, stem) = self.stem.run(x, mode, true)?;
        let (mut y, pool) = maxpool3d_forward(&y, &self.pool).map_err(|e| e.in_layer("pool1"))?;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (z, c) = b.run(&y, mode, true)?;
            blocks.extend(c);
            y = z;
        }
        let pooled = global_avgpool_forward(&y);
        let logits = linear_forward(&pooled, &self.fc_weight, &self.fc_bias).map_err(|e| e.in_layer("fc"))?;
        let cache = ForwardCache {
            stem: stem.expect("recorded"),
            pool,
            blocks,
            features_shape: *y.shape(),
            pooled,
        };
        Ok((logits, cache))
    }

    /// Gradients of a scalar loss given `d loss / d logits`.
    pub fn backward(&self, cache: &ForwardCache<T>, grad_logits: &Tensor5<T>, want_input: bool) -> Result<Gradients<T>> {
        let (gp, gw, gb) =
            linear_backward(&cache.pooled, &self.fc_weight, grad_logits).map_err(|e| e.in_layer("fc"))?;
        // Collected back to front, reversed at the end.
        let mut rev = vec![gb, gw];
        let mut g = global_avgpool_backward(&cache.features_shape, &gp).map_err(|e| e.in_layer("pool5"))?;
        for (b, c) in self.blocks.iter().zip(&cache.blocks).rev() {
            g = b.backward_rev(c, &g, &mut rev)?;
        }
        g = maxpool3d_backward(&cache.pool, &g).map_err(|e| e.in_layer("pool1"))?;
        let mut local = Vec::with_capacity(3);
        let input = self.stem.backward(&cache.stem, &g, want_input, &mut local)?;
        rev.extend(local.into_iter().rev());
        rev.reverse();
        Ok(Gradients { params: rev, input })
    }

    /// Fold the batch statistics recorded in a train-mode cache into every
    /// BN layer's running estimates.
    pub fn update_running_stats(&mut self, cache: &ForwardCache<T>) {
        self.stem.bn.update_running(&cache.stem.bn);
        for (b, c) in self.blocks.iter_mut().zip(&cache.blocks) {
            for (l, lc) in b.branch.iter_mut().zip(&c.branch) {
                l.bn.update_running(&lc.bn);
            }
            if let (Some(l), Some(lc)) = (&mut b.shortcut, &c.shortcut) {
                l.bn.update_running(&lc.bn);
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            arch: self.arch.clone(),
            stem: self.stem.cast(),
            pool: self.pool,
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    name: b.name.clone(),
                    plan: b.plan.clone(),
                    branch: b.branch.iter().map(|l| l.cast()).collect(),
                    shortcut: b.shortcut.as_ref().map(|l| l.cast()),
                })
                .collect(),
            fc_weight: self.fc_weight.cast(),
            fc_bias: self.fc_bias.cast(),
        }
    }
}
