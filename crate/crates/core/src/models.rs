//! The three architecture families: encoder/decoder UNets with skip
//! connections, a single-learnable-filter model, and a one-layer bank of 32
//! filters with a 1x1 combiner.
//!
//! UNet wiring per encoder step: conv → (bn) → act [→ conv → (bn) → act]
//! → maxpool. Widths double per step from `base_channels`; the bottleneck
//! doubles once more. Each decoder step upsamples, convolves back to the
//! step's width, concatenates the encoder output of the same resolution
//! (decoder channels first), and fuses with conv(s) shaped like the
//! encoder's. A 1x1 head produces two logit channels: background (0) and
//! particle (1).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::filters::Kernel2D;
use crate::nn::{
    activation_backward, activation_forward, concat_channels, maxpool2_backward, maxpool2_forward, split_channels,
    upsample2_backward, upsample2_forward, Activation, BatchNorm2d, Checkpoint, Conv2d, MaxPoolCache, Mode, NnError,
    Param, Real, Record, Tensor,
};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model spec: {0}")]
    Spec(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UNetSpec {
    /// Number of pooling operations.
    pub steps: usize,
    pub base_channels: usize,
    pub kernel_size: usize,
    pub double_conv: bool,
    pub batch_norm: bool,
    pub activation: Activation,
}

impl Default for UNetSpec {
    fn default() -> Self {
        Self {
            steps: 3,
            base_channels: 8,
            kernel_size: 3,
            double_conv: false,
            batch_norm: true,
            activation: Activation::Relu,
        }
    }
}

impl UNetSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.steps < 1 {
            return Err(ModelError::Spec("steps must be >= 1".into()));
        }
        if self.base_channels < 1 {
            return Err(ModelError::Spec("base_channels must be >= 1".into()));
        }
        if self.steps > 10 {
            return Err(ModelError::Spec(format!("{} steps is beyond any sensible input size", self.steps)));
        }
        check_kernel(self.kernel_size)
    }

    /// Input sides must be multiples of this.
    pub fn divisor(&self) -> usize {
        1 << self.steps
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShallowVariant {
    SingleFilter,
    Wide32,
}

/// Filters in the wide shallow variant.
pub const WIDE_FILTERS: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShallowSpec {
    pub variant: ShallowVariant,
    pub kernel_size: usize,
}

impl Default for ShallowSpec {
    fn default() -> Self {
        Self {
            variant: ShallowVariant::SingleFilter,
            kernel_size: 9,
        }
    }
}

impl ShallowSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        check_kernel(self.kernel_size)
    }
}

fn check_kernel(k: usize) -> Result<(), ModelError> {
    if k % 2 == 0 || k == 0 {
        return Err(ModelError::Spec(format!("kernel_size must be odd, got {k}")));
    }
    Ok(())
}

/// Either architecture spec, as flat JSON tagged by `arch`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "snake_case")]
pub enum ModelSpec {
    Unet(UNetSpec),
    Shallow(ShallowSpec),
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec::Unet(UNetSpec::default())
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        match self {
            ModelSpec::Unet(s) => s.validate(),
            ModelSpec::Shallow(s) => s.validate(),
        }
    }
}

/// conv → optional batch norm → activation.
#[derive(Clone, Debug)]
struct ConvBlock<T> {
    conv: Conv2d<T>,
    bn: Option<BatchNorm2d<T>>,
    act: Activation,
    pre_act: Option<Tensor<T>>,
}

impl<T: Real> ConvBlock<T> {
    fn new(name: &str, in_c: usize, out_c: usize, spec: &UNetSpec, rng: &mut ChaCha8Rng) -> Self {
        Self {
            conv: Conv2d::new(&format!("{name}.conv"), in_c, out_c, spec.kernel_size, rng),
            bn: spec.batch_norm.then(|| BatchNorm2d::new(&format!("{name}.bn"), out_c)),
            act: spec.activation,
            pre_act: None,
        }
    }

    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>, NnError> {
        let mut y = self.conv.forward(x, mode)?;
        if let Some(bn) = &mut self.bn {
            y = bn.forward(&y, mode)?;
        }
        let out = activation_forward(&y, self.act);
        out.ensure_finite(&self.conv.weight.name)?;
        self.pre_act = (mode == Mode::Train).then_some(y);
        Ok(out)
    }

    fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let pre = self
            .pre_act
            .take()
            .ok_or_else(|| NnError::MissingCache(self.conv.weight.name.clone()))?;
        let mut g = activation_backward(&pre, g, self.act)?;
        if let Some(bn) = &mut self.bn {
            g = bn.backward(&g)?;
        }
        let gx = self.conv.backward(&g)?;
        gx.ensure_finite(&self.conv.weight.name)?;
        Ok(gx)
    }

    fn params(&self) -> Vec<&Param<T>> {
        let mut v: Vec<&Param<T>> = self.conv.params().into();
        if let Some(bn) = &self.bn {
            v.extend(bn.params());
        }
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v: Vec<&mut Param<T>> = self.conv.params_mut().into();
        if let Some(bn) = &mut self.bn {
            v.extend(bn.params_mut());
        }
        v
    }
}

fn stack_forward<T: Real>(blocks: &mut [ConvBlock<T>], mut x: Tensor<T>, mode: Mode) -> Result<Tensor<T>, NnError> {
    for b in blocks {
        x = b.forward(&x, mode)?;
    }
    Ok(x)
}

fn stack_backward<T: Real>(blocks: &mut [ConvBlock<T>], mut g: Tensor<T>) -> Result<Tensor<T>, NnError> {
    for b in blocks.iter_mut().rev() {
        g = b.backward(&g)?;
    }
    Ok(g)
}

#[derive(Clone, Debug)]
struct DecoderStep<T> {
    up: ConvBlock<T>,
    fuse: Vec<ConvBlock<T>>,
}

#[derive(Clone, Debug)]
pub struct UNet<T = f64> {
    spec: UNetSpec,
    encoder: Vec<Vec<ConvBlock<T>>>,
    bottleneck: Vec<ConvBlock<T>>,
    /// Indexed by resolution level like the encoder; run deepest first.
    decoder: Vec<DecoderStep<T>>,
    head: Conv2d<T>,
    pools: Vec<Option<MaxPoolCache>>,
}

impl<T: Real> UNet<T> {
    fn new(spec: &UNetSpec, rng: &mut ChaCha8Rng) -> Self {
        let convs = if spec.double_conv { 2 } else { 1 };
        let width = |level: usize| spec.base_channels << level;
        let stack = |prefix: &str, in_c: usize, out_c: usize, rng: &mut ChaCha8Rng| -> Vec<ConvBlock<T>> {
            (0..convs)
                .map(|j| ConvBlock::new(&format!("{prefix}{j}"), if j == 0 { in_c } else { out_c }, out_c, spec, rng))
                .collect()
        };
        let mut encoder = Vec::new();
        for l in 0..spec.steps {
            let in_c = if l == 0 { 1 } else { width(l - 1) };
            encoder.push(stack(&format!("enc{l}."), in_c, width(l), rng));
        }
        let bottleneck = stack("bottleneck.", width(spec.steps - 1), width(spec.steps), rng);
        let mut decoder: Vec<DecoderStep<T>> = Vec::new();
        for l in (0..spec.steps).rev() {
            let up = ConvBlock::new(&format!("dec{l}.up"), width(l + 1), width(l), spec, rng);
            let fuse = stack(&format!("dec{l}.fuse"), 2 * width(l), width(l), rng);
            decoder.push(DecoderStep { up, fuse });
        }
        decoder.reverse();
        let head = Conv2d::new("head", width(0), 2, 1, rng);
        Self {
            spec: spec.clone(),
            encoder,
            bottleneck,
            decoder,
            head,
            pools: vec![None; spec.steps],
        }
    }

    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>, NnError> {
        let d = self.spec.divisor();
        if x.h() % d != 0 || x.w() % d != 0 {
            return Err(NnError::Dimension(format!(
                "{}-step UNet needs sides divisible by {d}, got {}x{}",
                self.spec.steps,
                x.w(),
                x.h()
            )));
        }
        let mut h = x.clone();
        let mut skips = Vec::with_capacity(self.spec.steps);
        for (l, blocks) in self.encoder.iter_mut().enumerate() {
            h = stack_forward(blocks, h, mode)?;
            let (pooled, cache) = maxpool2_forward(&h)?;
            self.pools[l] = (mode == Mode::Train).then_some(cache);
            skips.push(h);
            h = pooled;
        }
        h = stack_forward(&mut self.bottleneck, h, mode)?;
        for l in (0..self.spec.steps).rev() {
            let step = &mut self.decoder[l];
            h = step.up.forward(&upsample2_forward(&h), mode)?;
            h = concat_channels(&h, &skips[l])?;
            h = stack_forward(&mut step.fuse, h, mode)?;
        }
        let out = self.head.forward(&h, mode)?;
        out.ensure_finite("head")?;
        Ok(out)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let mut g = self.head.backward(grad)?;
        let mut skip_grads = vec![None; self.spec.steps];
        for l in 0..self.spec.steps {
            let step = &mut self.decoder[l];
            g = stack_backward(&mut step.fuse, g)?;
            let (g_dec, g_skip) = split_channels(&g, self.spec.base_channels << l)?;
            skip_grads[l] = Some(g_skip);
            g = upsample2_backward(&step.up.backward(&g_dec)?)?;
        }
        g = stack_backward(&mut self.bottleneck, g)?;
        for l in (0..self.spec.steps).rev() {
            let cache = self.pools[l].take().ok_or_else(|| NnError::MissingCache(format!("enc{l}.pool")))?;
            g = maxpool2_backward(&cache, &g)?;
            g.add_assign(skip_grads[l].as_ref().expect("filled above"))?;
            g = stack_backward(&mut self.encoder[l], g)?;
        }
        Ok(g)
    }

    fn blocks(&self) -> Vec<&ConvBlock<T>> {
        let mut v: Vec<&ConvBlock<T>> = self.encoder.iter().flatten().collect();
        v.extend(&self.bottleneck);
        for step in self.decoder.iter().rev() {
            v.push(&step.up);
            v.extend(&step.fuse);
        }
        v
    }

    fn blocks_mut(&mut self) -> Vec<&mut ConvBlock<T>> {
        self.parts_mut().0
    }

    /// Blocks in forward order plus the head, borrowed disjointly.
    fn parts_mut(&mut self) -> (Vec<&mut ConvBlock<T>>, &mut Conv2d<T>) {
        let mut v: Vec<&mut ConvBlock<T>> = self.encoder.iter_mut().flatten().collect();
        v.extend(&mut self.bottleneck);
        for step in self.decoder.iter_mut().rev() {
            v.push(&mut step.up);
            v.extend(&mut step.fuse);
        }
        (v, &mut self.head)
    }
}

/// Layers of the shallow models.
#[derive(Clone, Debug)]
enum Layer<T> {
    Conv(Conv2d<T>),
    Act { act: Activation, input: Option<Tensor<T>> },
    /// Fixed, non-learnable map of one channel `z` to logits `(-z, z)`.
    AntisymmetricHead,
}

/// Plain layer stack.
#[derive(Clone, Debug, Default)]
pub struct Sequential<T = f64> {
    layers: Vec<Layer<T>>,
}

impl<T: Real> Sequential<T> {
    fn new(spec: &ShallowSpec, rng: &mut ChaCha8Rng) -> Self {
        let k = spec.kernel_size;
        let layers = match spec.variant {
            ShallowVariant::SingleFilter => vec![Layer::Conv(Conv2d::new("filter", 1, 1, k, rng)), Layer::AntisymmetricHead],
            ShallowVariant::Wide32 => vec![
                Layer::Conv(Conv2d::new("filters", 1, WIDE_FILTERS, k, rng)),
                Layer::Act {
                    act: Activation::Relu,
                    input: None,
                },
                Layer::Conv(Conv2d::new("head", WIDE_FILTERS, 2, 1, rng)),
            ],
        };
        Self { layers }
    }

    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>, NnError> {
        let mut h = x.clone();
        for layer in &mut self.layers {
            h = match layer {
                Layer::Conv(c) => {
                    let y = c.forward(&h, mode)?;
                    y.ensure_finite(&c.weight.name)?;
                    y
                }
                Layer::Act { act, input } => {
                    let y = activation_forward(&h, *act);
                    *input = (mode == Mode::Train).then_some(h);
                    y
                }
                Layer::AntisymmetricHead => {
                    if h.c() != 1 {
                        return Err(NnError::Shape(format!("antisymmetric head takes 1 channel, got {}", h.c())));
                    }
                    concat_channels(&h.map(|v| -v), &h)?
                }
            };
        }
        Ok(h)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let mut g = grad.clone();
        for layer in self.layers.iter_mut().rev() {
            g = match layer {
                Layer::Conv(c) => c.backward(&g)?,
                Layer::Act { act, input } => {
                    let x = input.take().ok_or_else(|| NnError::MissingCache("activation".into()))?;
                    activation_backward(&x, &g, *act)?
                }
                Layer::AntisymmetricHead => {
                    let (neg, pos) = split_channels(&g, 1)?;
                    let mut d = pos;
                    for (a, &b) in d.data_mut().iter_mut().zip(neg.data()) {
                        *a = *a - b;
                    }
                    d
                }
            };
            g.ensure_finite("sequential backward")?;
        }
        Ok(g)
    }
}

#[derive(Clone, Debug)]
enum Body<T> {
    UNet(UNet<T>),
    Sequential(Sequential<T>),
}

/// A built network with its parameters, running statistics and caches.
#[derive(Clone, Debug)]
pub struct Network<T = f64> {
    spec: Option<ModelSpec>,
    body: Body<T>,
}

pub fn build_unet<T: Real>(spec: &UNetSpec, seed: u64) -> Result<Network<T>, ModelError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(Network {
        spec: Some(ModelSpec::Unet(spec.clone())),
        body: Body::UNet(UNet::new(spec, &mut rng)),
    })
}

pub fn build_shallow<T: Real>(spec: &ShallowSpec, seed: u64) -> Result<Network<T>, ModelError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(Network {
        spec: Some(ModelSpec::Shallow(spec.clone())),
        body: Body::Sequential(Sequential::new(spec, &mut rng)),
    })
}

pub fn build<T: Real>(spec: &ModelSpec, seed: u64) -> Result<Network<T>, ModelError> {
    match spec {
        ModelSpec::Unet(s) => build_unet(s, seed),
        ModelSpec::Shallow(s) => build_shallow(s, seed),
    }
}

/// Total learnable scalars; batch-norm running buffers are not counted.
pub fn count_parameters<T: Real>(net: &Network<T>) -> usize {
    net.params().iter().map(|p| p.numel()).sum()
}

/// First-layer spatial filters and their elementwise mean.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelExport {
    pub kernels: Vec<Kernel2D>,
    pub mean: Kernel2D,
}

/// Raw first-layer filters. Deep networks are rejected unless
/// `first_layer_only` acknowledges that only their input layer is exported.
pub fn export_kernels<T: Real>(net: &Network<T>, first_layer_only: bool) -> Result<KernelExport, ModelError> {
    let conv = match &net.body {
        Body::Sequential(s) => match s.layers.first() {
            Some(Layer::Conv(c)) => c,
            _ => return Err(ModelError::Unsupported("first layer is not a spatial convolution".into())),
        },
        Body::UNet(u) => {
            if !first_layer_only {
                return Err(ModelError::Unsupported(
                    "deep network kernels need the first-layer-only flag".into(),
                ));
            }
            &u.encoder[0][0].conv
        }
    };
    let [out_c, in_c, k, _] = conv.weight.value.shape();
    if in_c != 1 {
        return Err(ModelError::Unsupported(format!("first layer has {in_c} input channels")));
    }
    let kernels = (0..out_c)
        .map(|o| {
            let w = conv.weight.value.plane(o, 0).iter().map(|v| v.as_f64()).collect();
            Kernel2D::new(k / 2, w).expect("square odd kernel")
        })
        .collect::<Vec<_>>();
    let mean = Kernel2D::mean(&kernels).expect("at least one filter");
    Ok(KernelExport { kernels, mean })
}

/// Spec scalars as stored in checkpoints.
fn spec_records(spec: &ModelSpec) -> Vec<Record> {
    let b = |v: bool| if v { 1.0 } else { 0.0 };
    match spec {
        ModelSpec::Unet(s) => vec![
            Record::scalar("spec/arch", 0.0),
            Record::scalar("spec/steps", s.steps as f64),
            Record::scalar("spec/base_channels", s.base_channels as f64),
            Record::scalar("spec/kernel_size", s.kernel_size as f64),
            Record::scalar("spec/double_conv", b(s.double_conv)),
            Record::scalar("spec/batch_norm", b(s.batch_norm)),
            Record::scalar("spec/activation", (s.activation == Activation::LeakyRelu) as u8 as f64),
        ],
        ModelSpec::Shallow(s) => vec![
            Record::scalar(
                "spec/arch",
                match s.variant {
                    ShallowVariant::SingleFilter => 1.0,
                    ShallowVariant::Wide32 => 2.0,
                },
            ),
            Record::scalar("spec/kernel_size", s.kernel_size as f64),
        ],
    }
}

fn spec_from_records(ckpt: &Checkpoint) -> Result<ModelSpec, ModelError> {
    let int = |name: &str| -> Result<usize, ModelError> {
        let v = ckpt.scalar(name)?;
        if v >= 0.0 && v.fract() == 0.0 {
            Ok(v as usize)
        } else {
            Err(ModelError::Spec(format!("checkpoint `{name}` = {v} is not a count")))
        }
    };
    match int("spec/arch")? {
        0 => Ok(ModelSpec::Unet(UNetSpec {
            steps: int("spec/steps")?,
            base_channels: int("spec/base_channels")?,
            kernel_size: int("spec/kernel_size")?,
            double_conv: int("spec/double_conv")? == 1,
            batch_norm: int("spec/batch_norm")? == 1,
            activation: if int("spec/activation")? == 1 {
                Activation::LeakyRelu
            } else {
                Activation::Relu
            },
        })),
        a @ (1 | 2) => Ok(ModelSpec::Shallow(ShallowSpec {
            variant: if a == 1 {
                ShallowVariant::SingleFilter
            } else {
                ShallowVariant::Wide32
            },
            kernel_size: int("spec/kernel_size")?,
        })),
        a => Err(ModelError::Spec(format!("unknown architecture code {a}"))),
    }
}

impl<T: Real> Network<T> {
    /// A network with no layers: forwards its input unchanged.
    pub fn empty() -> Self {
        Self {
            spec: None,
            body: Body::Sequential(Sequential::default()),
        }
    }

    pub fn spec(&self) -> Option<&ModelSpec> {
        self.spec.as_ref()
    }

    pub fn is_deep(&self) -> bool {
        matches!(self.body, Body::UNet(_))
    }

    /// Side-length multiple the network requires of its inputs.
    pub fn divisor(&self) -> usize {
        match &self.body {
            Body::UNet(u) => u.spec.divisor(),
            Body::Sequential(_) => 1,
        }
    }

    /// `(n, 1, h, w)` images to `(n, 2, h, w)` logits.
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>, NnError> {
        if self.spec.is_some() && x.c() != 1 {
            return Err(NnError::Shape(format!("network takes 1 input channel, got {}", x.c())));
        }
        match &mut self.body {
            Body::UNet(u) => u.forward(x, mode),
            Body::Sequential(s) => s.forward(x, mode),
        }
    }

    /// Accumulates parameter gradients from a train-mode forward and returns
    /// the input gradient.
    pub fn backward(&mut self, grad_logits: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        match &mut self.body {
            Body::UNet(u) => u.backward(grad_logits),
            Body::Sequential(s) => s.backward(grad_logits),
        }
    }

    /// Learnable parameters in a fixed order.
    pub fn params(&self) -> Vec<&Param<T>> {
        match &self.body {
            Body::UNet(u) => {
                let mut v: Vec<&Param<T>> = u.blocks().into_iter().flat_map(|b| b.params()).collect();
                v.extend(u.head.params());
                v
            }
            Body::Sequential(s) => s
                .layers
                .iter()
                .flat_map(|l| match l {
                    Layer::Conv(c) => c.params().to_vec(),
                    _ => Vec::new(),
                })
                .collect(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        match &mut self.body {
            Body::UNet(u) => {
                let (blocks, head) = u.parts_mut();
                let mut v: Vec<&mut Param<T>> = Vec::new();
                for b in blocks {
                    v.extend(b.params_mut());
                }
                v.extend(head.params_mut());
                v
            }
            Body::Sequential(s) => s
                .layers
                .iter_mut()
                .flat_map(|l| match l {
                    Layer::Conv(c) => c.params_mut().into_iter().collect(),
                    _ => Vec::new(),
                })
                .collect(),
        }
    }

    pub fn batchnorms(&self) -> Vec<&BatchNorm2d<T>> {
        match &self.body {
            Body::UNet(u) => u.blocks().into_iter().filter_map(|b| b.bn.as_ref()).collect(),
            Body::Sequential(_) => Vec::new(),
        }
    }

    fn batchnorms_mut(&mut self) -> Vec<&mut BatchNorm2d<T>> {
        match &mut self.body {
            Body::UNet(u) => u.blocks_mut().into_iter().filter_map(|b| b.bn.as_mut()).collect(),
            Body::Sequential(_) => Vec::new(),
        }
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Zeroes the output layer so every logit starts at 0. For the
    /// single-filter model, whose head is fixed, the filter is zeroed.
    pub fn zero_head(&mut self) {
        let last = match &mut self.body {
            Body::UNet(u) => Some(&mut u.head),
            Body::Sequential(s) => s.layers.iter_mut().rev().find_map(|l| match l {
                Layer::Conv(c) => Some(c),
                _ => None,
            }),
        };
        if let Some(c) = last {
            c.weight.value.fill(T::zero());
            c.bias.value.fill(T::zero());
        }
    }

    /// Spec, parameters and batch-norm buffers as checkpoint records.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::default();
        if let Some(spec) = &self.spec {
            spec_records(spec).into_iter().for_each(|r| ckpt.push(r));
        }
        for p in self.params() {
            ckpt.push(tensor_record(&p.name, &p.value));
        }
        for bn in self.batchnorms() {
            let c = bn.channels();
            ckpt.push(Record::tensor(format!("{}.running_mean", bn.name()), vec![c], bn.running_mean.clone()));
            ckpt.push(Record::tensor(format!("{}.running_var", bn.name()), vec![c], bn.running_var.clone()));
            ckpt.push(Record::scalar(format!("{}.batches_tracked", bn.name()), bn.batches_tracked as f64));
        }
        ckpt
    }

    /// Rebuilds the architecture from the stored spec and loads every
    /// parameter and buffer.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, ModelError> {
        let spec = spec_from_records(ckpt)?;
        let mut net = build::<T>(&spec, 0)?;
        net.load_records(ckpt)?;
        Ok(net)
    }

    fn load_records(&mut self, ckpt: &Checkpoint) -> Result<(), ModelError> {
        for p in self.params_mut() {
            let r = ckpt.require(&p.name)?;
            let shape = p.value.shape();
            if r.dims != shape {
                return Err(ModelError::Spec(format!(
                    "`{}` stored as {:?}, network expects {shape:?}",
                    p.name, r.dims
                )));
            }
            p.value = Tensor::from_vec(shape, r.data.iter().map(|&v| T::from_f64(v)).collect())?;
        }
        for bn in self.batchnorms_mut() {
            let name = bn.name().to_string();
            for (suffix, buf) in [("running_mean", &mut bn.running_mean), ("running_var", &mut bn.running_var)] {
                let r = ckpt.require(&format!("{name}.{suffix}"))?;
                if r.data.len() != buf.len() {
                    return Err(ModelError::Spec(format!("`{name}.{suffix}` has the wrong length")));
                }
                buf.copy_from_slice(&r.data);
            }
            bn.batches_tracked = ckpt.scalar(&format!("{name}.batches_tracked"))? as u64;
        }
        Ok(())
    }
}

pub(crate) fn tensor_record<T: Real>(name: &str, t: &Tensor<T>) -> Record {
    Record::tensor(name, t.shape().to_vec(), t.data().iter().map(|v| v.as_f64()).collect())
}
