//! U-Net encoder-decoder segmenter and the 1x1 linear combiner.
//!
//! Both architectures map a `C x H x W` input to an `H x W` probability map
//! through a final logistic squashing. Computation is generic over [`Real`]
//! so the same code runs in `f32` for training and `f64` for gradient checks.

mod checkpoint;
mod layers;

pub use checkpoint::{load_model, save_model, WeightsManifest, WEIGHTS_SCHEMA_VERSION};
pub use layers::Activation;

use std::fmt::Debug;

use ndarray::{s, Array2, Array3, ArrayView3, Axis};
use num_traits::{Float, FromPrimitive};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use layers::{max_pool2, max_pool2_backward, Conv, ConvCache, UpCache, UpConv};

/// Scalar type the network can run in.
pub trait Real:
    Float
    + FromPrimitive
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + std::ops::AddAssign
    + Debug
    + Default
    + Send
    + Sync
    + 'static
{
}

impl Real for f32 {}
impl Real for f64 {}

/// Half-width of the uniform weight initialization interval.
pub const INIT_BOUND: f32 = 0.05;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("input {height}x{width} is not divisible by 2^{depth}")]
    Divisibility { height: usize, width: usize, depth: usize },
    #[error("input has {found} channels, model expects {expected}")]
    ChannelMismatch { expected: usize, found: usize },
    #[error("non-finite value in model input")]
    NonFiniteInput,
    #[error("corrupt checkpoint {path}: {reason}")]
    CorruptCheckpoint { path: String, reason: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub in_channels: usize,
    /// Number of pooling levels.
    pub depth: usize,
    /// Channels at the first level; doubled at every level below.
    pub base_width: usize,
    pub conv_per_block: usize,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default = "default_true")]
    pub bias: bool,
}

fn default_true() -> bool {
    true
}

impl UNetConfig {
    /// Reference desk configuration: depth 3, base width 16, two convs per block.
    pub fn reference(in_channels: usize) -> Self {
        UNetConfig {
            in_channels,
            depth: 3,
            base_width: 16,
            conv_per_block: 2,
            activation: Activation::Relu,
            bias: true,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.into()));
        if self.in_channels == 0 {
            return bad("in_channels must be >= 1");
        }
        if self.depth == 0 {
            return bad("depth must be >= 1");
        }
        if self.base_width == 0 {
            return bad("base_width must be >= 1");
        }
        if self.conv_per_block == 0 {
            return bad("conv_per_block must be >= 1");
        }
        if self.depth > 16 {
            return bad("depth must be <= 16");
        }
        Ok(())
    }

    fn width_at(&self, level: usize) -> usize {
        self.base_width << level
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    UNet(UNetConfig),
    /// A single 1x1 convolution followed by the logistic squashing.
    Pointwise { in_channels: usize, bias: bool },
}

impl Architecture {
    pub fn in_channels(&self) -> usize {
        match self {
            Architecture::UNet(c) => c.in_channels,
            Architecture::Pointwise { in_channels, .. } => *in_channels,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        match self {
            Architecture::UNet(c) => c.validate(),
            Architecture::Pointwise { in_channels: 0, .. } => {
                Err(ModelError::InvalidConfig("in_channels must be >= 1".into()))
            }
            Architecture::Pointwise { .. } => Ok(()),
        }
    }
}

/// A named slice of the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
    #[serde(skip)]
    pub offset: usize,
}

impl TensorInfo {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
struct UNetLayout {
    enc: Vec<Vec<Conv>>,
    bottleneck: Vec<Conv>,
    /// Indexed by level; executed deepest first.
    dec: Vec<(UpConv, Vec<Conv>)>,
    head: Conv,
    activation: Activation,
}

#[derive(Clone, Debug, PartialEq)]
enum Layout {
    UNet(UNetLayout),
    Pointwise(Conv),
}

struct LayoutBuilder {
    tensors: Vec<TensorInfo>,
    offset: usize,
}

impl LayoutBuilder {
    fn tensor(&mut self, name: String, shape: Vec<usize>) -> std::ops::Range<usize> {
        let info = TensorInfo { name, shape, offset: self.offset };
        let r = self.offset..self.offset + info.len();
        self.offset = r.end;
        self.tensors.push(info);
        r
    }

    fn conv(&mut self, name: &str, in_ch: usize, out_ch: usize, kernel: usize, bias: bool) -> Conv {
        let weight = self.tensor(format!("{name}.weight"), vec![out_ch, in_ch, kernel, kernel]);
        let bias = bias.then(|| self.tensor(format!("{name}.bias"), vec![out_ch]));
        Conv { in_ch, out_ch, kernel, weight, bias }
    }

    fn up(&mut self, name: &str, in_ch: usize, out_ch: usize, bias: bool) -> UpConv {
        let weight = self.tensor(format!("{name}.weight"), vec![out_ch, 2, 2, in_ch]);
        let bias = bias.then(|| self.tensor(format!("{name}.bias"), vec![out_ch]));
        UpConv { in_ch, out_ch, weight, bias }
    }

    fn block(&mut self, name: &str, in_ch: usize, out_ch: usize, cfg: &UNetConfig) -> Vec<Conv> {
        (0..cfg.conv_per_block)
            .map(|i| {
                let cin = if i == 0 { in_ch } else { out_ch };
                self.conv(&format!("{name}.conv{i}"), cin, out_ch, 3, cfg.bias)
            })
            .collect()
    }
}

fn layout_for(arch: &Architecture) -> (Layout, Vec<TensorInfo>, usize) {
    let mut b = LayoutBuilder { tensors: Vec::new(), offset: 0 };
    let layout = match arch {
        Architecture::Pointwise { in_channels, bias } => Layout::Pointwise(b.conv("head", *in_channels, 1, 1, *bias)),
        Architecture::UNet(cfg) => {
            let mut enc = Vec::with_capacity(cfg.depth);
            let mut cin = cfg.in_channels;
            for l in 0..cfg.depth {
                enc.push(b.block(&format!("enc{l}"), cin, cfg.width_at(l), cfg));
                cin = cfg.width_at(l);
            }
            let bottleneck = b.block("bottleneck", cin, cfg.width_at(cfg.depth), cfg);
            let mut dec: Vec<(UpConv, Vec<Conv>)> = Vec::with_capacity(cfg.depth);
            for l in (0..cfg.depth).rev() {
                let w = cfg.width_at(l);
                let up = b.up(&format!("dec{l}.up"), cfg.width_at(l + 1), w, cfg.bias);
                let convs = b.block(&format!("dec{l}"), 2 * w, w, cfg);
                dec.push((up, convs));
            }
            dec.reverse();
            let head = b.conv("head", cfg.base_width, 1, 1, cfg.bias);
            Layout::UNet(UNetLayout { enc, bottleneck, dec, head, activation: cfg.activation })
        }
    };
    (layout, b.tensors, b.offset)
}

/// A segmentation network with a flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T = f32> {
    arch: Architecture,
    layout: Layout,
    tensors: Vec<TensorInfo>,
    params: Vec<T>,
    init_seed: Option<u64>,
}

/// Builds a U-Net with all parameters set to zero.
pub fn build_unet(config: &UNetConfig) -> Result<Model, ModelError> {
    Model::build(Architecture::UNet(config.clone()))
}

/// Builds the `1x1xm` linear combiner with all parameters set to zero.
pub fn build_pointwise(in_channels: usize, bias: bool) -> Result<Model, ModelError> {
    Model::build(Architecture::Pointwise { in_channels, bias })
}

/// Redraws every parameter uniformly from `[-0.05, +0.05]`.
pub fn init_weights(mut model: Model, seed: u64) -> Model {
    model.init_uniform(seed);
    model
}

pub fn count_params<T>(model: &Model<T>) -> usize {
    model.tensors.iter().map(TensorInfo::len).sum()
}

/// Forward pass producing an `H x W` probability map.
pub fn forward(model: &Model, input: ArrayView3<'_, f32>) -> Result<Array2<f32>, ModelError> {
    model.predict(input)
}

impl<T: Real> Model<T> {
    pub fn build(arch: Architecture) -> Result<Self, ModelError> {
        arch.validate()?;
        let (layout, tensors, n) = layout_for(&arch);
        Ok(Model { arch, layout, tensors, params: vec![T::zero(); n], init_seed: None })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn in_channels(&self) -> usize {
        self.arch.in_channels()
    }

    pub fn tensors(&self) -> &[TensorInfo] {
        &self.tensors
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn init_seed(&self) -> Option<u64> {
        self.init_seed
    }

    pub fn tensor(&self, name: &str) -> Option<&[T]> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .map(|t| &self.params[t.offset..t.offset + t.len()])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [T]> {
        let t = self.tensors.iter().find(|t| t.name == name)?;
        let r = t.offset..t.offset + t.len();
        Some(&mut self.params[r])
    }

    pub fn init_uniform(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Uniform::new_inclusive(-INIT_BOUND, INIT_BOUND).expect("finite bounds");
        for p in &mut self.params {
            *p = T::from_f32(dist.sample(&mut rng)).expect("representable");
        }
        self.init_seed = Some(seed);
    }

    /// Converts parameters to another scalar type.
    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            arch: self.arch.clone(),
            layout: self.layout.clone(),
            tensors: self.tensors.clone(),
            params: self.params.iter().map(|&v| U::from_f64(v.to_f64().expect("finite")).expect("cast")).collect(),
            init_seed: self.init_seed,
        }
    }

    pub fn check_input(&self, input: &ArrayView3<'_, T>) -> Result<(), ModelError> {
        let (c, h, w) = input.dim();
        if c != self.in_channels() {
            return Err(ModelError::ChannelMismatch { expected: self.in_channels(), found: c });
        }
        if let Architecture::UNet(cfg) = &self.arch {
            let k = 1usize << cfg.depth;
            if h % k != 0 || w % k != 0 || h == 0 || w == 0 {
                return Err(ModelError::Divisibility { height: h, width: w, depth: cfg.depth });
            }
        }
        if input.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFiniteInput);
        }
        Ok(())
    }

    /// Inference; values strictly inside `(0, 1)`.
    pub fn predict(&self, input: ArrayView3<'_, T>) -> Result<Array2<T>, ModelError> {
        Ok(self.forward_train(input)?.0)
    }

    /// Forward pass that keeps what the backward pass needs.
    pub fn forward_train(&self, input: ArrayView3<'_, T>) -> Result<(Array2<T>, Tape<T>), ModelError> {
        self.check_input(&input)?;
        let mut tape = Tape { nodes: Vec::new(), probs: Array2::zeros((0, 0)) };
        let logits = match &self.layout {
            Layout::Pointwise(head) => {
                let (y, cache) = head.forward(&self.params, input);
                tape.nodes.push(Node::Conv(cache));
                y
            }
            Layout::UNet(l) => unet_forward(l, &self.params, input, &mut tape),
        };
        let probs = logits.index_axis_move(Axis(0), 0).mapv(squash);
        tape.probs = probs.clone();
        Ok((probs, tape))
    }

    /// Gradient of a scalar loss with respect to all parameters, given the
    /// loss gradient with respect to the output probabilities.
    pub fn backward(&self, tape: Tape<T>, dprobs: &Array2<T>) -> Vec<T> {
        let mut grads = vec![T::zero(); self.params.len()];
        self.backward_into(tape, dprobs, &mut grads);
        grads
    }

    pub fn backward_into(&self, mut tape: Tape<T>, dprobs: &Array2<T>, grads: &mut [T]) {
        let dlogits = ndarray::Zip::from(dprobs)
            .and(&tape.probs)
            .map_collect(|&d, &p| d * p * (T::one() - p))
            .insert_axis(Axis(0));
        match &self.layout {
            Layout::Pointwise(head) => {
                let Some(Node::Conv(cache)) = tape.nodes.pop() else { unreachable!("tape out of order") };
                head.backward(&self.params, &cache, dlogits.view(), grads, false);
            }
            Layout::UNet(l) => unet_backward(l, &self.params, &mut tape, dlogits, grads),
        }
    }
}

/// Logistic function clamped so that outputs stay strictly inside `(0, 1)`.
fn squash<T: Real>(x: T) -> T {
    let p = T::one() / (T::one() + (-x).exp());
    if p.is_nan() {
        return p;
    }
    let eps = T::epsilon();
    p.max(eps).min(T::one() - eps)
}

enum Node<T> {
    Conv(ConvCache<T>),
    Act(Array3<T>),
    Pool(Vec<u8>),
    Up(UpCache<T>),
}

/// Intermediate values recorded by [`Model::forward_train`].
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    probs: Array2<T>,
}

fn block_forward<T: Real>(
    convs: &[Conv],
    act: Activation,
    params: &[T],
    mut x: Array3<T>,
    tape: &mut Tape<T>,
) -> Array3<T> {
    for conv in convs {
        let (mut y, cache) = conv.forward(params, x.view());
        act.apply(&mut y);
        tape.nodes.push(Node::Conv(cache));
        tape.nodes.push(Node::Act(y.clone()));
        x = y;
    }
    x
}

fn block_backward<T: Real>(
    convs: &[Conv],
    act: Activation,
    params: &[T],
    mut dy: Array3<T>,
    tape: &mut Tape<T>,
    grads: &mut [T],
    need_input_grad: bool,
) -> Option<Array3<T>> {
    for (i, conv) in convs.iter().enumerate().rev() {
        let Some(Node::Act(out)) = tape.nodes.pop() else { unreachable!("tape out of order") };
        act.backward(&out, &mut dy);
        let Some(Node::Conv(cache)) = tape.nodes.pop() else { unreachable!("tape out of order") };
        let need = i > 0 || need_input_grad;
        match conv.backward(params, &cache, dy.view(), grads, need) {
            Some(dx) => dy = dx,
            None => return None,
        }
    }
    Some(dy)
}

fn unet_forward<T: Real>(l: &UNetLayout, params: &[T], input: ArrayView3<'_, T>, tape: &mut Tape<T>) -> Array3<T> {
    let mut x = input.to_owned();
    let mut skips = Vec::with_capacity(l.enc.len());
    for block in &l.enc {
        x = block_forward(block, l.activation, params, x, tape);
        let (pooled, arg) = max_pool2(x.view());
        tape.nodes.push(Node::Pool(arg));
        skips.push(x);
        x = pooled;
    }
    x = block_forward(&l.bottleneck, l.activation, params, x, tape);
    for (level, (up, convs)) in l.dec.iter().enumerate().rev() {
        let (u, cache) = up.forward(params, x.view());
        tape.nodes.push(Node::Up(cache));
        let skip = &skips[level];
        let joined = ndarray::concatenate(Axis(0), &[skip.view(), u.view()]).expect("matching planes");
        x = block_forward(convs, l.activation, params, joined, tape);
    }
    let (logits, cache) = l.head.forward(params, x.view());
    tape.nodes.push(Node::Conv(cache));
    logits
}

fn unet_backward<T: Real>(l: &UNetLayout, params: &[T], tape: &mut Tape<T>, dlogits: Array3<T>, grads: &mut [T]) {
    let Some(Node::Conv(cache)) = tape.nodes.pop() else { unreachable!("tape out of order") };
    let mut dx = l.head.backward(params, &cache, dlogits.view(), grads, true).expect("requested");
    let mut dskips = Vec::with_capacity(l.dec.len());
    for (up, convs) in l.dec.iter() {
        let djoined = block_backward(convs, l.activation, params, dx, tape, grads, true).expect("requested");
        let skip_ch = up.out_ch;
        dskips.push(djoined.slice(s![..skip_ch, .., ..]).to_owned());
        let du = djoined.slice(s![skip_ch.., .., ..]);
        let Some(Node::Up(cache)) = tape.nodes.pop() else { unreachable!("tape out of order") };
        dx = up.backward(params, &cache, du, grads);
    }
    dx = block_backward(&l.bottleneck, l.activation, params, dx, tape, grads, true).expect("requested");
    for (level, block) in l.enc.iter().enumerate().rev() {
        let Some(Node::Pool(arg)) = tape.nodes.pop() else { unreachable!("tape out of order") };
        let mut d = max_pool2_backward(dx.view(), &arg);
        d += &dskips[level];
        match block_backward(block, l.activation, params, d, tape, grads, level > 0) {
            Some(next) => dx = next,
            None => break,
        }
    }
    debug_assert!(tape.nodes.is_empty());
}
