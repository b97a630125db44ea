//! Network assembly: downsampling stem, dense blocks whose bottleneck 1x1
//! convolutions are routed capsule layers, a square head convolution, 4x4
//! average pooling, primary capsules and a routed class-capsule layer.

use std::collections::HashMap;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{conv2d_output_size, BatchNormState, NormMode, Padding, PoolMode, Tape, Var};
use crate::error::{invalid, Error, Result};
use crate::matrix::Matrix;
use crate::routing::GradMode;
use crate::tensor::Tensor;
use crate::training::standardize;

pub const PRIMARY_CAPSULE_DIM: usize = 8;
pub const TAP_PRE_POOL: &str = "pre_pool_activations";
pub const TAP_PRIMARY: &str = "primary_capsules";
pub const TAP_CLASS: &str = "class_capsules";

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub input_size: usize,
    /// Output channels of the 7x7 stem convolution.
    pub stem_channels: usize,
    /// Output channels of the strided 1x1 convolution closing the stem.
    pub transition_channels: usize,
    pub n_dense_blocks: usize,
    pub layers_per_block: usize,
    pub growth_rate: usize,
    /// Routed 1x1 output maps per composite layer, as a multiple of the growth rate.
    pub bottleneck_width: usize,
    pub head_channels: usize,
    /// Side of the "same"-padded head convolution kernel.
    pub head_kernel: usize,
    pub routing_iters: usize,
    pub caps_dim_class: usize,
    pub n_classes: usize,
    pub grad_mode: GradMode,
    /// `false` builds the unrouted baseline.
    pub routed: bool,
    pub init_std: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            input_size: 256,
            stem_channels: 32,
            transition_channels: 32,
            n_dense_blocks: 2,
            layers_per_block: 8,
            growth_rate: 12,
            bottleneck_width: 4,
            head_channels: 64,
            head_kernel: 9,
            routing_iters: 3,
            caps_dim_class: 16,
            n_classes: 14,
            grad_mode: GradMode::Last,
            routed: true,
            init_std: 0.05,
        }
    }
}

impl NetworkConfig {
    /// Small configuration for 64x64 inputs that trains on one CPU core.
    pub fn desk() -> Self {
        Self {
            input_size: 64,
            stem_channels: 8,
            transition_channels: 16,
            n_dense_blocks: 1,
            layers_per_block: 2,
            growth_rate: 8,
            bottleneck_width: 4,
            head_channels: 16,
            // 9x9 on the 32x32 full-scale map spans about a quarter of it;
            // 3x3 keeps that proportion on the 8x8 desk map.
            head_kernel: 3,
            n_classes: 4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("input_size", self.input_size),
            ("stem_channels", self.stem_channels),
            ("transition_channels", self.transition_channels),
            ("n_dense_blocks", self.n_dense_blocks),
            ("layers_per_block", self.layers_per_block),
            ("growth_rate", self.growth_rate),
            ("bottleneck_width", self.bottleneck_width),
            ("head_channels", self.head_channels),
            ("head_kernel", self.head_kernel),
            ("routing_iters", self.routing_iters),
            ("caps_dim_class", self.caps_dim_class),
            ("n_classes", self.n_classes),
        ];
        for (name, v) in extents {
            if v < 1 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if !self.head_channels.is_multiple_of(PRIMARY_CAPSULE_DIM) {
            return Err(Error::Config(format!(
                "head_channels {} is not a multiple of {PRIMARY_CAPSULE_DIM}",
                self.head_channels
            )));
        }
        if !(self.init_std.is_finite() && self.init_std > 0.0) {
            return Err(Error::Config("init_std must be positive".into()));
        }
        self.shape_trace().map(|_| ())
    }

    pub fn block_input_channels(&self, block: usize) -> usize {
        self.transition_channels + block * self.layers_per_block * self.growth_rate
    }

    pub fn head_input_channels(&self) -> usize {
        self.block_input_channels(self.n_dense_blocks)
    }

    /// Spatial extent after every stage, rejecting configurations whose
    /// arithmetic does not close onto the 4x4 average pool.
    pub fn shape_trace(&self) -> Result<ShapeTrace> {
        let mut trace = ShapeTrace::default();
        let mut size = self.input_size;
        trace.push("input", self.input_size, 1);
        let stages: [(&str, usize, usize, Padding, usize); 4] = [
            ("stem.conv7x7/2", 7, 2, Padding::Same, self.stem_channels),
            ("stem.maxpool3x3/2", 3, 2, Padding::Same, self.stem_channels),
            ("stem.conv1x1/2", 1, 2, Padding::Same, self.transition_channels),
            ("stem.avgpool2x2/1", 2, 1, Padding::Same, self.transition_channels),
        ];
        for (name, window, stride, padding, channels) in stages {
            if size < window {
                return Err(Error::Config(format!(
                    "{name} window {window} exceeds extent {size}; trace so far: {trace}"
                )));
            }
            size = conv2d_output_size(size, window, stride, padding)?.0;
            trace.push(name, size, channels);
        }
        for b in 0..self.n_dense_blocks {
            trace.push(&format!("block{b}"), size, self.block_input_channels(b + 1));
        }
        trace.push("head.conv", size, self.head_channels);
        if size < 4 || !size.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "pre-pool extent {size} is not a positive multiple of 4; trace: {trace}"
            )));
        }
        trace.push("head.avgpool4x4/4", size / 4, self.head_channels);
        Ok(trace)
    }

    pub fn pre_pool_size(&self) -> Result<usize> {
        Ok(self.shape_trace()?.stage("head.conv").expect("traced").0)
    }

    pub fn primary_grid(&self) -> Result<usize> {
        Ok(self.pre_pool_size()? / 4)
    }

    pub fn n_primary_capsules(&self) -> Result<usize> {
        let g = self.primary_grid()?;
        Ok(g * g * self.head_channels / PRIMARY_CAPSULE_DIM)
    }
}

/// Layer-by-layer `(name, extent, channels)` record.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ShapeTrace {
    pub stages: Vec<(String, usize, usize)>,
}

impl ShapeTrace {
    fn push(&mut self, name: &str, size: usize, channels: usize) {
        self.stages.push((name.to_string(), size, channels));
    }

    pub fn stage(&self, name: &str) -> Option<(usize, usize)> {
        self.stages.iter().find(|s| s.0 == name).map(|s| (s.1, s.2))
    }
}

impl fmt::Display for ShapeTrace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.stages.iter().map(|(n, s, c)| format!("{n}={c}x{s}x{s}")).collect();
        write!(f, "{}", parts.join(" -> "))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub config: NetworkConfig,
    params: Vec<Param>,
    index: HashMap<String, usize>,
    bn: Vec<(String, BatchNormState)>,
    bn_index: HashMap<String, usize>,
}

/// Output of one forward pass; the tape stays alive for backpropagation.
pub struct ForwardPass {
    pub tape: Tape,
    pub scores: Var,
    pub params: Vec<Var>,
    pub taps: HashMap<&'static str, Var>,
    /// Coupling matrices of every routed layer, iteration and sample, in
    /// execution order, when tracing was requested.
    pub routing_trace: Vec<Matrix>,
}

impl ForwardPass {
    pub fn scores(&self) -> &Tensor {
        self.tape.value(self.scores)
    }

    pub fn tap(&self, name: &str) -> Result<Var> {
        self.taps
            .get(name)
            .copied()
            .ok_or_else(|| invalid(format!("unknown tap {name:?}")))
    }
}

struct Builder {
    rng: ChaCha8Rng,
    std: f64,
    params: Vec<Param>,
    bn: Vec<(String, BatchNormState)>,
}

impl Builder {
    fn weight(&mut self, name: String, dims: &[usize]) {
        let value = Tensor::randn(dims, self.std, &mut self.rng).with_requires_grad(true);
        self.params.push(Param { name, value });
    }

    fn norm(&mut self, prefix: String, channels: usize) {
        self.params.push(Param {
            name: format!("{prefix}.gamma"),
            value: Tensor::full(&[channels], 1.0).with_requires_grad(true),
        });
        self.params.push(Param {
            name: format!("{prefix}.beta"),
            value: Tensor::zeros(&[channels]).with_requires_grad(true),
        });
        self.bn.push((prefix, BatchNormState::new(channels)));
    }
}

/// Instantiates the network with N(0, init_std^2) weights drawn from `seed`.
pub fn build_network(config: &NetworkConfig, seed: u64) -> Result<Network> {
    config.validate()?;
    let mut b = Builder {
        rng: ChaCha8Rng::seed_from_u64(seed),
        std: config.init_std,
        params: Vec::new(),
        bn: Vec::new(),
    };
    b.weight("stem.conv1.weight".into(), &[config.stem_channels, 1, 7, 7]);
    b.norm("stem.bn1".into(), config.stem_channels);
    b.weight(
        "stem.conv2.weight".into(),
        &[config.transition_channels, config.stem_channels, 1, 1],
    );
    let bottleneck = config.bottleneck_width * config.growth_rate;
    for blk in 0..config.n_dense_blocks {
        let c0 = config.block_input_channels(blk);
        for l in 0..config.layers_per_block {
            let p = format!("block{blk}.layer{l}");
            let c_in = c0 + l * config.growth_rate;
            b.norm(format!("{p}.bn1"), c_in);
            b.weight(format!("{p}.route.weight"), &[c_in, bottleneck]);
            b.norm(format!("{p}.bn2"), bottleneck);
            b.weight(format!("{p}.conv3x3.weight"), &[config.growth_rate, bottleneck, 3, 3]);
        }
    }
    let head_in = config.head_input_channels();
    b.norm("head.bn".into(), head_in);
    b.weight(
        "head.conv.weight".into(),
        &[config.head_channels, head_in, config.head_kernel, config.head_kernel],
    );
    b.weight(
        "caps.weight".into(),
        &[
            config.n_primary_capsules()?,
            config.n_classes,
            PRIMARY_CAPSULE_DIM,
            config.caps_dim_class,
        ],
    );
    Network::from_parts(config.clone(), b.params, b.bn)
}

/// The same architecture with plain 1x1 convolutions in the dense blocks and
/// an unrouted linear class-capsule head.
pub fn baseline_variant(config: &NetworkConfig, seed: u64) -> Result<Network> {
    let mut cfg = config.clone();
    cfg.routed = false;
    build_network(&cfg, seed)
}

impl Network {
    pub fn from_parts(config: NetworkConfig, params: Vec<Param>, bn: Vec<(String, BatchNormState)>) -> Result<Self> {
        let index = params
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.clone(), i))
            .collect::<HashMap<_, _>>();
        let bn_index = bn
            .iter()
            .enumerate()
            .map(|(i, b)| (b.0.clone(), i))
            .collect::<HashMap<_, _>>();
        if index.len() != params.len() || bn_index.len() != bn.len() {
            return Err(invalid("duplicate parameter name"));
        }
        Ok(Self {
            config,
            params,
            index,
            bn,
            bn_index,
        })
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.params[i].value)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.params[i].value)
    }

    pub fn batchnorm_states(&self) -> &[(String, BatchNormState)] {
        &self.bn
    }

    pub fn batchnorm_states_mut(&mut self) -> &mut [(String, BatchNormState)] {
        &mut self.bn
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Runs the network on an `N x 1 x S x S` batch of raw [0,1] images.
    /// Each image is standardized first. Train mode updates batch-norm
    /// running statistics.
    pub fn forward(&mut self, batch: &Tensor, mode: NormMode) -> Result<ForwardPass> {
        let mut bn = std::mem::take(&mut self.bn);
        let out = self.forward_with(batch, mode, &mut bn, false);
        self.bn = bn;
        out
    }

    /// Eval-mode forward pass that leaves the network untouched.
    pub fn forward_eval(&self, batch: &Tensor) -> Result<ForwardPass> {
        let mut bn = self.bn.clone();
        self.forward_with(batch, NormMode::Eval, &mut bn, false)
    }

    /// Forward pass recording every routed 1x1 coupling matrix; running
    /// statistics are not updated.
    pub fn forward_traced(&self, batch: &Tensor, mode: NormMode) -> Result<ForwardPass> {
        let mut bn = self.bn.clone();
        self.forward_with(batch, mode, &mut bn, true)
    }

    fn forward_with(
        &self,
        batch: &Tensor,
        mode: NormMode,
        bn: &mut [(String, BatchNormState)],
        trace: bool,
    ) -> Result<ForwardPass> {
        let cfg = &self.config;
        let (n, c, h, w) = batch.nchw()?;
        if c != 1 || h != cfg.input_size || w != cfg.input_size {
            return Err(invalid(format!(
                "expected N x 1 x {s} x {s} input, got {:?}",
                batch.dims(),
                s = cfg.input_size
            )));
        }
        let plane = h * w;
        let mut standardized = Vec::with_capacity(batch.numel());
        for i in 0..n {
            standardized.extend(standardize(&batch.data()[i * plane..(i + 1) * plane]));
        }
        let mut tape = Tape::new();
        let params: Vec<Var> = self.params.iter().map(|p| tape.leaf(p.value.clone())).collect();
        let mut ctx = Ctx {
            net: self,
            tape,
            params: &params,
            bn,
            mode,
            trace: trace.then(Vec::new),
        };
        let x = ctx.tape.constant(Tensor::new(vec![n, 1, h, w], standardized)?);

        let x = ctx.conv("stem.conv1.weight", x, 2, Padding::Same)?;
        let x = ctx.bn_relu("stem.bn1", x)?;
        let x = ctx.tape.pool2d(x, PoolMode::Max, 3, 2, Padding::Same)?;
        let x = ctx.conv("stem.conv2.weight", x, 2, Padding::Same)?;
        let mut x = ctx.tape.pool2d(x, PoolMode::Avg, 2, 1, Padding::Same)?;

        for blk in 0..cfg.n_dense_blocks {
            let mut features = vec![x];
            for l in 0..cfg.layers_per_block {
                let input = if features.len() == 1 {
                    features[0]
                } else {
                    ctx.tape.concat_channels(&features)?
                };
                let new = ctx.composite_layer(input, blk, l)?;
                features.push(new);
            }
            x = ctx.tape.concat_channels(&features)?;
        }

        let x = ctx.bn_relu("head.bn", x)?;
        let pre_pool = ctx.conv("head.conv.weight", x, 1, Padding::Same)?;
        let pooled = ctx.tape.pool2d(pre_pool, PoolMode::Avg, 4, 4, Padding::Valid)?;
        let caps = ctx.tape.primary_capsules(pooled, PRIMARY_CAPSULE_DIM)?;
        let primary = ctx.tape.squash_capsules(caps)?;
        let fc_w = ctx.param("caps.weight")?;
        let class_caps = if cfg.routed {
            ctx.tape
                .fc_capsule_routing_traced(primary, fc_w, cfg.routing_iters, cfg.grad_mode, ctx.trace.as_mut())?
        } else {
            let s = ctx.tape.fc_capsule_linear(primary, fc_w)?;
            ctx.tape.squash_capsules(s)?
        };
        let scores = ctx.tape.capsule_norms(class_caps)?;
        let taps = HashMap::from([
            (TAP_PRE_POOL, pre_pool),
            (TAP_PRIMARY, primary),
            (TAP_CLASS, class_caps),
        ]);
        let routing_trace = ctx.trace.take().unwrap_or_default();
        Ok(ForwardPass {
            tape: ctx.tape,
            scores,
            params,
            taps,
            routing_trace,
        })
    }
}

struct Ctx<'a> {
    net: &'a Network,
    tape: Tape,
    params: &'a [Var],
    bn: &'a mut [(String, BatchNormState)],
    mode: NormMode,
    trace: Option<Vec<Matrix>>,
}

impl Ctx<'_> {
    fn param(&self, name: &str) -> Result<Var> {
        self.net
            .index
            .get(name)
            .map(|&i| self.params[i])
            .ok_or_else(|| invalid(format!("missing parameter {name}")))
    }

    fn conv(&mut self, name: &str, x: Var, stride: usize, padding: Padding) -> Result<Var> {
        let k = self.param(name)?;
        self.tape.conv2d(x, k, stride, padding)
    }

    fn bn_relu(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let gamma = self.param(&format!("{prefix}.gamma"))?;
        let beta = self.param(&format!("{prefix}.beta"))?;
        let idx = *self
            .net
            .bn_index
            .get(prefix)
            .ok_or_else(|| invalid(format!("missing batchnorm state {prefix}")))?;
        let y = self.tape.batchnorm(x, gamma, beta, &mut self.bn[idx].1, self.mode)?;
        Ok(self.tape.relu(y))
    }

    /// BN-ReLU-Conv1x1(routed)-BN-ReLU-Conv3x3 on the concatenated block input.
    fn composite_layer(&mut self, x: Var, block: usize, layer: usize) -> Result<Var> {
        let cfg = &self.net.config;
        let expected = cfg.block_input_channels(block) + layer * cfg.growth_rate;
        let got = self.tape.dims(x)[1];
        if got != expected {
            return Err(invalid(format!(
                "block{block}.layer{layer} expects {expected} input channels, got {got}"
            )));
        }
        let p = format!("block{block}.layer{layer}");
        let h = self.bn_relu(&format!("{p}.bn1"), x)?;
        let w = self.param(&format!("{p}.route.weight"))?;
        let h = if cfg.routed {
            self.tape
                .conv1x1_capsule_traced(h, w, cfg.routing_iters, cfg.grad_mode, self.trace.as_mut())?
        } else {
            self.tape.conv1x1_plain(h, w)?
        };
        let h = self.bn_relu(&format!("{p}.bn2"), h)?;
        self.conv(&format!("{p}.conv3x3.weight"), h, 1, Padding::Same)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_scale_taps() {
        let cfg = NetworkConfig::default();
        assert_eq!(cfg.pre_pool_size().unwrap(), 32);
        assert_eq!(cfg.primary_grid().unwrap(), 8);
        assert_eq!(cfg.n_primary_capsules().unwrap(), 512);
    }

    #[test]
    fn desk_shape_trace() {
        let cfg = NetworkConfig::desk();
        let t = cfg.shape_trace().unwrap();
        // 64 -> conv7/2 same: 32 -> max3/2 same: 16 -> conv1/2: 8 -> avg2/1 same: 8
        let expect = [
            ("input", 64, 1),
            ("stem.conv7x7/2", 32, 8),
            ("stem.maxpool3x3/2", 16, 8),
            ("stem.conv1x1/2", 8, 16),
            ("stem.avgpool2x2/1", 8, 16),
            ("block0", 8, 32),
            ("head.conv", 8, 16),
            ("head.avgpool4x4/4", 2, 16),
        ];
        let got: Vec<(&str, usize, usize)> = t.stages.iter().map(|(n, s, c)| (n.as_str(), *s, *c)).collect();
        assert_eq!(got, expect);
    }

    #[test]
    fn rejects_inconsistent_configs() {
        let mut cfg = NetworkConfig::desk();
        cfg.head_channels = 12;
        assert!(cfg.validate().is_err());
        let mut cfg = NetworkConfig::desk();
        cfg.input_size = 40; // 40 -> 20 -> 10 -> 5: not a multiple of 4
        let err = build_network(&cfg, 0).unwrap_err().to_string();
        assert!(err.contains("stem.conv1x1/2"), "{err}");
    }

    #[test]
    fn seeded_build_is_deterministic() {
        let cfg = NetworkConfig::desk();
        assert_eq!(build_network(&cfg, 3).unwrap(), build_network(&cfg, 3).unwrap());
        assert_ne!(build_network(&cfg, 3).unwrap(), build_network(&cfg, 4).unwrap());
    }

    #[test]
    fn baseline_has_equal_parameter_count() {
        let cfg = NetworkConfig::desk();
        let routed = build_network(&cfg, 1).unwrap();
        let base = baseline_variant(&cfg, 1).unwrap();
        assert_eq!(routed.parameter_count(), base.parameter_count());
        assert!(!base.config.routed);
    }

    fn batch(n: usize, size: usize) -> Tensor {
        Tensor::from_fn(&[n, 1, size, size], |i| ((i * 7919 % 1000) as f64) / 1000.0)
    }

    #[test]
    fn scores_are_bounded_and_reproducible() {
        let mut net = build_network(&NetworkConfig::desk(), 2).unwrap();
        let x = batch(3, 64);
        let a = net.forward_eval(&x).unwrap().scores().clone();
        assert_eq!(a.dims(), &[3, 4]);
        assert!(a.data().iter().all(|&s| (0.0..1.0).contains(&s)));
        let b = net.forward_eval(&x).unwrap().scores().clone();
        assert_eq!(a, b);
        let t = net.forward(&x, NormMode::Train).unwrap();
        assert!(t.scores().data().iter().all(|&s| (0.0..1.0).contains(&s)));
        assert_ne!(net.batchnorm_states()[0].1, BatchNormState::new(8));
    }

    #[test]
    fn zero_class_weights_give_zero_scores() {
        let mut net = build_network(&NetworkConfig::desk(), 2).unwrap();
        net.param_mut("caps.weight").unwrap().data_mut().fill(0.0);
        let s = net.forward_eval(&batch(2, 64)).unwrap().scores().clone();
        assert!(s.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_input_size_rejected() {
        let net = build_network(&NetworkConfig::desk(), 2).unwrap();
        assert!(net.forward_eval(&batch(1, 32)).is_err());
    }

    #[test]
    fn taps_have_declared_shapes() {
        let net = build_network(&NetworkConfig::desk(), 2).unwrap();
        let pass = net.forward_eval(&batch(2, 64)).unwrap();
        assert_eq!(pass.tape.dims(pass.tap(TAP_PRE_POOL).unwrap()), &[2, 16, 8, 8]);
        assert_eq!(pass.tape.dims(pass.tap(TAP_PRIMARY).unwrap()), &[2, 8, 8]);
        assert_eq!(pass.tape.dims(pass.tap(TAP_CLASS).unwrap()), &[2, 4, 16]);
        assert!(pass.tap("nope").is_err());
    }
}
