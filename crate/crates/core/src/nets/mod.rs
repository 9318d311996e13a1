//! The three network roles: domain mappings (generators), real/fake
//! discriminators and task classifiers.
//!
//! A [`Network`] is a value: an ordered layer table plus a named parameter
//! map. To run it, [`Network::bind`] its parameters into a [`Graph`] (as
//! trainable leaves or as constants) and call [`Network::forward`].

mod checkpoint;

pub use checkpoint::{decode, encode, load_checkpoint, load_checkpoint_as, save_checkpoint};

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Graph, Tensor, TensorError, Var};

/// Classifier conv widths and hidden dense width.
pub const CLASSIFIER_CONV1: usize = 20;
pub const CLASSIFIER_CONV2: usize = 50;
pub const CLASSIFIER_HIDDEN: usize = 50;
pub const DROPOUT_RATE: f64 = 0.5;
/// Generator encoder widths (first and second downsampling stage).
pub const GENERATOR_WIDTHS: [usize; 2] = [8, 16];
pub const DISCRIMINATOR_WIDTHS: [usize; 2] = [8, 16];
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Error)]
pub enum NetError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint parse error at byte {offset}: {detail}")]
    Parse { offset: usize, detail: String },
    #[error("role mismatch: expected {expected}, found {found}")]
    Role { expected: Role, found: Role },
    #[error("input shape {got:?} does not match network input {want:?}")]
    Input { got: Vec<usize>, want: [usize; 3] },
    #[error("unknown parameter '{0}'")]
    UnknownParam(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Generator,
    Discriminator,
    Classifier,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Generator => "generator",
            Role::Discriminator => "discriminator",
            Role::Classifier => "classifier",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv {
        name: String,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Dense {
        name: String,
        inputs: usize,
        outputs: usize,
    },
    Relu,
    LeakyRelu(f64),
    Tanh,
    Sigmoid,
    MaxPool2,
    Upsample2,
    Dropout(f64),
    Flatten,
}

impl Layer {
    /// `(weight name, weight shape)` and `(bias name, bias shape)` for
    /// parametric layers, plus the fan-in used for initialization.
    fn param_shapes(&self) -> Option<[(String, Vec<usize>); 2]> {
        match self {
            Layer::Conv {
                name,
                in_ch,
                out_ch,
                kernel,
                ..
            } => Some([
                (format!("{name}.weight"), vec![*out_ch, *in_ch, *kernel, *kernel]),
                (format!("{name}.bias"), vec![*out_ch]),
            ]),
            Layer::Dense {
                name,
                inputs,
                outputs,
            } => Some([
                (format!("{name}.weight"), vec![*inputs, *outputs]),
                (format!("{name}.bias"), vec![*outputs]),
            ]),
            _ => None,
        }
    }

    fn fan_in(&self) -> usize {
        match self {
            Layer::Conv { in_ch, kernel, .. } => in_ch * kernel * kernel,
            Layer::Dense { inputs, .. } => *inputs,
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitScheme {
    /// `U(-b, b)` with `b = gain·√(3 / fan_in)`.
    UniformFanIn,
    /// `N(0, gain / √fan_in)`.
    NormalScaled,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitSpec {
    pub seed: u64,
    pub scheme: InitScheme,
    pub gain: f64,
}

impl InitSpec {
    pub fn new(seed: u64) -> Self {
        InitSpec {
            seed,
            scheme: InitScheme::UniformFanIn,
            gain: 1.0,
        }
    }
}

/// Forward-pass mode. Dropout is active only in training mode, with a mask
/// derived from `dropout_seed`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train { dropout_seed: u64 },
    Eval,
}

/// Graph handles for one network's parameters.
#[derive(Debug, Clone)]
pub struct Bound {
    prefix: String,
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Wraps variables already in a graph, keyed by local parameter name.
    pub fn from_vars(prefix: &str, vars: BTreeMap<String, Var>) -> Bound {
        Bound {
            prefix: prefix.to_string(),
            vars,
        }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn var(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    /// Graph-wide parameter key for a local parameter name.
    pub fn key(&self, name: &str) -> String {
        format!("{}/{}", self.prefix, name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    role: Role,
    input_shape: [usize; 3],
    layers: Vec<Layer>,
    params: BTreeMap<String, Tensor>,
}

pub(crate) fn mix_seed(seed: u64, salt: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed;
    for b in salt.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    // splitmix finalizer
    h ^= h >> 30;
    h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h ^= h >> 27;
    h = h.wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

fn shape_err(op: &'static str, detail: impl Into<String>) -> NetError {
    NetError::Tensor(TensorError::shape(op, detail))
}

impl Network {
    /// Assembles a network and initializes every parameter from `init`.
    pub fn from_layers(
        role: Role,
        input_shape: [usize; 3],
        layers: Vec<Layer>,
        init: InitSpec,
    ) -> Result<Self, NetError> {
        let mut params = BTreeMap::new();
        for layer in &layers {
            let Some(shapes) = layer.param_shapes() else {
                continue;
            };
            let fan_in = layer.fan_in() as f64;
            let [(wname, wshape), (bname, bshape)] = shapes;
            if params.contains_key(&wname) {
                return Err(NetError::Tensor(TensorError::Contract(format!(
                    "duplicate parameter '{wname}'"
                ))));
            }
            let n: usize = wshape.iter().product();
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(init.seed, &wname));
            let values: Vec<f64> = match init.scheme {
                InitScheme::UniformFanIn => {
                    let bound = init.gain * (3.0 / fan_in).sqrt();
                    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                }
                InitScheme::NormalScaled => {
                    let normal = Normal::new(0.0, init.gain / fan_in.sqrt())
                        .map_err(|e| NetError::Tensor(TensorError::Contract(e.to_string())))?;
                    (0..n).map(|_| normal.sample(&mut rng)).collect()
                }
            };
            params.insert(wname, Tensor::new(&wshape, values)?);
            params.insert(bname, Tensor::zeros(&bshape));
        }
        let net = Network {
            role,
            input_shape,
            layers,
            params,
        };
        net.output_shape()?;
        Ok(net)
    }

    /// Rebuilds a network from decoded parts, checking that the parameter
    /// table matches the layer table exactly.
    pub(crate) fn from_parts(
        role: Role,
        input_shape: [usize; 3],
        layers: Vec<Layer>,
        params: BTreeMap<String, Tensor>,
    ) -> Result<Self, String> {
        let mut expected = BTreeMap::new();
        for layer in &layers {
            if let Some(shapes) = layer.param_shapes() {
                for (name, shape) in shapes {
                    expected.insert(name, shape);
                }
            }
        }
        if expected.len() != params.len() {
            return Err(format!(
                "layer table implies {} parameters, payload has {}",
                expected.len(),
                params.len()
            ));
        }
        for (name, shape) in &expected {
            match params.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(format!(
                        "parameter '{name}' has shape {:?}, layer expects {shape:?}",
                        t.shape()
                    ))
                }
                None => return Err(format!("missing parameter '{name}'")),
            }
        }
        let net = Network {
            role,
            input_shape,
            layers,
            params,
        };
        net.output_shape().map_err(|e| e.to_string())?;
        Ok(net)
    }

    /// A generator with no layers: maps every image to itself.
    pub fn identity_generator(image_shape: [usize; 3]) -> Self {
        Network {
            role: Role::Generator,
            input_shape: image_shape,
            layers: Vec::new(),
            params: BTreeMap::new(),
        }
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    /// Replaces one parameter; the shape must not change.
    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<(), NetError> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| NetError::UnknownParam(name.to_string()))?;
        if slot.shape() != value.shape() {
            return Err(shape_err(
                "set_param",
                format!("'{name}' is {:?}, got {:?}", slot.shape(), value.shape()),
            ));
        }
        *slot = value;
        Ok(())
    }

    /// Zeroes the weight and bias of the last parametric layer.
    pub fn zero_final_layer(&mut self) {
        if let Some([(w, _), (b, _)]) = self.layers.iter().rev().find_map(Layer::param_shapes) {
            for name in [w, b] {
                if let Some(t) = self.params.get_mut(&name) {
                    *t = Tensor::zeros(t.shape());
                }
            }
        }
    }

    /// Bitwise comparison of every parameter.
    pub fn params_bit_eq(&self, other: &Network) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|((na, a), (nb, b))| na == nb && a.bit_eq(b))
    }

    /// Per-example output shape (without the batch axis).
    pub fn output_shape(&self) -> Result<Vec<usize>, NetError> {
        let mut shape: Vec<usize> = self.input_shape.to_vec();
        for layer in &self.layers {
            shape = match (layer, shape.as_slice()) {
                (
                    Layer::Conv {
                        in_ch,
                        out_ch,
                        kernel,
                        stride,
                        padding,
                        name,
                    },
                    &[c, h, w],
                ) => {
                    if c != *in_ch {
                        return Err(shape_err(
                            "build",
                            format!("{name} expects {in_ch} channels, gets {c}"),
                        ));
                    }
                    if h + 2 * padding < *kernel || w + 2 * padding < *kernel {
                        return Err(shape_err(
                            "build",
                            format!("{name}: {h}x{w} input too small for {kernel}x{kernel} kernel"),
                        ));
                    }
                    vec![
                        *out_ch,
                        (h + 2 * padding - kernel) / stride + 1,
                        (w + 2 * padding - kernel) / stride + 1,
                    ]
                }
                (Layer::MaxPool2, &[c, h, w]) => {
                    if h < 2 || w < 2 {
                        return Err(shape_err("build", format!("{h}x{w} too small to pool")));
                    }
                    vec![c, h / 2, w / 2]
                }
                (Layer::Upsample2, &[c, h, w]) => vec![c, 2 * h, 2 * w],
                (Layer::Flatten, s) => vec![s.iter().product()],
                (
                    Layer::Dense {
                        name,
                        inputs,
                        outputs,
                    },
                    &[n],
                ) => {
                    if n != *inputs {
                        return Err(shape_err(
                            "build",
                            format!("{name} expects {inputs} features, gets {n}"),
                        ));
                    }
                    vec![*outputs]
                }
                (
                    Layer::Relu
                    | Layer::LeakyRelu(_)
                    | Layer::Tanh
                    | Layer::Sigmoid
                    | Layer::Dropout(_),
                    s,
                ) => s.to_vec(),
                (layer, s) => {
                    return Err(shape_err(
                        "build",
                        format!("layer {layer:?} cannot take input of shape {s:?}"),
                    ))
                }
            };
        }
        Ok(shape)
    }

    /// Puts every parameter into `g`, as trainable leaves keyed
    /// `"{prefix}/{name}"` or as constants.
    pub fn bind(&self, g: &mut Graph, prefix: &str, trainable: bool) -> Result<Bound, NetError> {
        let mut vars = BTreeMap::new();
        for (name, t) in &self.params {
            let v = if trainable {
                g.param(format!("{prefix}/{name}"), t.clone())?
            } else {
                g.constant(t.clone())
            };
            vars.insert(name.clone(), v);
        }
        Ok(Bound {
            prefix: prefix.to_string(),
            vars,
        })
    }

    /// Runs the layer stack on a `[B,C,H,W]` batch.
    pub fn forward(
        &self,
        g: &mut Graph,
        bound: &Bound,
        x: Var,
        mode: Mode,
    ) -> Result<Var, NetError> {
        let s = g.value(x).shape().to_vec();
        if s.len() != 4 || s[1..] != self.input_shape {
            return Err(NetError::Input {
                got: s,
                want: self.input_shape,
            });
        }
        let batch = s[0];
        let param = |name: String| {
            bound
                .var(&name)
                .ok_or_else(|| NetError::UnknownParam(name.clone()))
        };
        let mut h = x;
        for (li, layer) in self.layers.iter().enumerate() {
            h = match layer {
                Layer::Conv {
                    name,
                    stride,
                    padding,
                    ..
                } => {
                    let w = param(format!("{name}.weight"))?;
                    let b = param(format!("{name}.bias"))?;
                    let y = g.conv2d(h, w, *stride, *padding)?;
                    let ys = g.value(y).shape().to_vec();
                    let e = g.expand(b, batch, ys[2] * ys[3])?;
                    let e = g.reshape(e, &ys)?;
                    g.add(y, e)?
                }
                Layer::Dense { name, outputs, .. } => {
                    let w = param(format!("{name}.weight"))?;
                    let b = param(format!("{name}.bias"))?;
                    let y = g.matmul(h, w)?;
                    let e = g.expand(b, batch, 1)?;
                    let e = g.reshape(e, &[batch, *outputs])?;
                    g.add(y, e)?
                }
                Layer::Relu => g.relu(h),
                Layer::LeakyRelu(slope) => g.leaky_relu(h, *slope),
                Layer::Tanh => g.tanh(h),
                Layer::Sigmoid => g.sigmoid(h),
                Layer::MaxPool2 => g.max_pool2(h)?,
                Layer::Upsample2 => g.upsample2(h)?,
                Layer::Flatten => {
                    let n = g.value(h).numel() / batch;
                    g.reshape(h, &[batch, n])?
                }
                Layer::Dropout(rate) => match mode {
                    Mode::Eval => h,
                    Mode::Train { dropout_seed } => {
                        let shape = g.value(h).shape().to_vec();
                        let n = g.value(h).numel();
                        let mut rng =
                            ChaCha8Rng::seed_from_u64(mix_seed(dropout_seed, &format!("dropout{li}")));
                        let keep = 1.0 - rate;
                        let mask: Vec<f64> = (0..n)
                            .map(|_| {
                                if rng.random::<f64>() < keep {
                                    1.0 / keep
                                } else {
                                    0.0
                                }
                            })
                            .collect();
                        let m = g.constant(Tensor::from_raw(shape, mask));
                        g.mul(h, m)?
                    }
                },
            };
        }
        if self.role == Role::Discriminator {
            h = g.reshape(h, &[batch])?;
        }
        Ok(h)
    }

    /// Eval-mode forward pass outside any training graph.
    pub fn predict(&self, batch: &Tensor) -> Result<Tensor, NetError> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, "net", false)?;
        let x = g.constant(batch.clone());
        let y = self.forward(&mut g, &bound, x, Mode::Eval)?;
        Ok(g.value(y).clone())
    }
}

fn conv(name: &str, in_ch: usize, out_ch: usize, kernel: usize, stride: usize, padding: usize) -> Layer {
    Layer::Conv {
        name: name.to_string(),
        in_ch,
        out_ch,
        kernel,
        stride,
        padding,
    }
}

/// Modified LeNet: two valid 3×3 convolutions with 20 and 50 channels, each
/// followed by relu and 2×2 max-pooling, then dropout and dense layers of
/// width 50 and `num_classes`.
pub fn build_classifier(
    image_shape: [usize; 3],
    num_classes: usize,
    init: InitSpec,
) -> Result<Network, NetError> {
    if num_classes < 2 {
        return Err(shape_err("build_classifier", "need at least two classes"));
    }
    let [c, h, w] = image_shape;
    let after = |d: usize| -> Option<usize> {
        let d = d.checked_sub(2)? / 2;
        let d = d.checked_sub(2)? / 2;
        (d > 0).then_some(d)
    };
    let (Some(fh), Some(fw)) = (after(h), after(w)) else {
        return Err(shape_err(
            "build_classifier",
            format!("{h}x{w} image too small for two conv+pool stages"),
        ));
    };
    let layers = vec![
        conv("conv1", c, CLASSIFIER_CONV1, 3, 1, 0),
        Layer::Relu,
        Layer::MaxPool2,
        conv("conv2", CLASSIFIER_CONV1, CLASSIFIER_CONV2, 3, 1, 0),
        Layer::Relu,
        Layer::MaxPool2,
        Layer::Dropout(DROPOUT_RATE),
        Layer::Flatten,
        Layer::Dense {
            name: "fc1".into(),
            inputs: CLASSIFIER_CONV2 * fh * fw,
            outputs: CLASSIFIER_HIDDEN,
        },
        Layer::Relu,
        Layer::Dense {
            name: "fc2".into(),
            inputs: CLASSIFIER_HIDDEN,
            outputs: num_classes,
        },
    ];
    Network::from_layers(Role::Classifier, image_shape, layers, init)
}

fn check_square_div4(op: &'static str, image_shape: [usize; 3]) -> Result<(), NetError> {
    let [_, h, w] = image_shape;
    if h != w || h == 0 || h % 4 != 0 {
        return Err(shape_err(
            op,
            format!("image must be square with extents divisible by 4, got {h}x{w}"),
        ));
    }
    Ok(())
}

/// Encoder-decoder mapping: two stride-2 convolutions down, a stride-1
/// bottleneck, then two nearest-upsample + convolution stages and a tanh
/// output of the input's shape.
pub fn build_generator(image_shape: [usize; 3], init: InitSpec) -> Result<Network, NetError> {
    check_square_div4("build_generator", image_shape)?;
    let c = image_shape[0];
    let [w1, w2] = GENERATOR_WIDTHS;
    let layers = vec![
        conv("enc1", c, w1, 3, 2, 1),
        Layer::Relu,
        conv("enc2", w1, w2, 3, 2, 1),
        Layer::Relu,
        conv("mid", w2, w2, 3, 1, 1),
        Layer::Relu,
        Layer::Upsample2,
        conv("dec1", w2, w1, 3, 1, 1),
        Layer::Relu,
        Layer::Upsample2,
        conv("out", w1, c, 3, 1, 1),
        Layer::Tanh,
    ];
    Network::from_layers(Role::Generator, image_shape, layers, init)
}

/// Two stride-2 convolutions with leaky relu, a dense layer and a sigmoid:
/// one real/fake probability per example.
pub fn build_discriminator(image_shape: [usize; 3], init: InitSpec) -> Result<Network, NetError> {
    check_square_div4("build_discriminator", image_shape)?;
    let [c, h, _] = image_shape;
    let [w1, w2] = DISCRIMINATOR_WIDTHS;
    let layers = vec![
        conv("conv1", c, w1, 3, 2, 1),
        Layer::LeakyRelu(LEAKY_SLOPE),
        conv("conv2", w1, w2, 3, 2, 1),
        Layer::LeakyRelu(LEAKY_SLOPE),
        Layer::Flatten,
        Layer::Dense {
            name: "fc".into(),
            inputs: w2 * (h / 4) * (h / 4),
            outputs: 1,
        },
        Layer::Sigmoid,
    ];
    Network::from_layers(Role::Discriminator, image_shape, layers, init)
}
