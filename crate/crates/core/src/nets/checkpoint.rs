//! Binary network checkpoints.
//!
//! All integers and floats are little-endian:
//!
//! ```text
//! magic      4 bytes  "ACNT"
//! version    u8       1
//! role       u8       0 generator, 1 discriminator, 2 classifier
//! input      3 × u32  C, H, W
//! n_layers   u32
//! layer*     u8 tag, then:
//!              1 conv    name, in u32, out u32, kernel u32, stride u32, padding u32
//!              2 dense   name, in u32, out u32
//!              3 relu, 5 tanh, 6 sigmoid, 7 maxpool2, 8 upsample2, 10 flatten
//!              4 leaky   slope f64
//!              9 dropout rate f64
//! n_params   u32
//! param*     name, ndim u8, ndim × u32
//! payload    for each param in table order, numel × f64
//! ```
//!
//! `name` is a u16 byte length followed by UTF-8. Parameters appear in
//! lexicographic name order. Trailing bytes are an error.

use std::collections::BTreeMap;
use std::path::Path;

use super::{Layer, NetError, Network, Role};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"ACNT";
pub const VERSION: u8 = 1;

fn role_tag(r: Role) -> u8 {
    match r {
        Role::Generator => 0,
        Role::Discriminator => 1,
        Role::Classifier => 2,
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn name(&mut self, s: &str) {
        self.0.extend_from_slice(&(s.len() as u16).to_le_bytes());
        self.0.extend_from_slice(s.as_bytes());
    }
}

pub fn encode(net: &Network) -> Vec<u8> {
    let mut w = Writer(Vec::with_capacity(64 + net.param_count() * 8));
    w.0.extend_from_slice(MAGIC);
    w.u8(VERSION);
    w.u8(role_tag(net.role));
    for d in net.input_shape {
        w.u32(d);
    }
    w.u32(net.layers.len());
    for layer in &net.layers {
        match layer {
            Layer::Conv {
                name,
                in_ch,
                out_ch,
                kernel,
                stride,
                padding,
            } => {
                w.u8(1);
                w.name(name);
                for v in [*in_ch, *out_ch, *kernel, *stride, *padding] {
                    w.u32(v);
                }
            }
            Layer::Dense {
                name,
                inputs,
                outputs,
            } => {
                w.u8(2);
                w.name(name);
                w.u32(*inputs);
                w.u32(*outputs);
            }
            Layer::Relu => w.u8(3),
            Layer::LeakyRelu(s) => {
                w.u8(4);
                w.f64(*s);
            }
            Layer::Tanh => w.u8(5),
            Layer::Sigmoid => w.u8(6),
            Layer::MaxPool2 => w.u8(7),
            Layer::Upsample2 => w.u8(8),
            Layer::Dropout(r) => {
                w.u8(9);
                w.f64(*r);
            }
            Layer::Flatten => w.u8(10),
        }
    }
    w.u32(net.params.len());
    for (name, t) in &net.params {
        w.name(name);
        w.u8(t.shape().len() as u8);
        for &d in t.shape() {
            w.u32(d);
        }
    }
    for t in net.params.values() {
        for &v in t.data() {
            w.f64(v);
        }
    }
    w.0
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, detail: impl Into<String>) -> NetError {
        NetError::Parse {
            offset: self.pos,
            detail: detail.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], NetError> {
        if self.buf.len() - self.pos < n {
            return Err(self.err(format!(
                "truncated: need {n} bytes for {what}, {} left",
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8, NetError> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<usize, NetError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()) as usize)
    }

    fn f64(&mut self, what: &str) -> Result<f64, NetError> {
        let b = self.take(8, what)?;
        Ok(f64::from_le_bytes(b.try_into().unwrap()))
    }

    fn name(&mut self) -> Result<String, NetError> {
        let b = self.take(2, "name length")?;
        let n = u16::from_le_bytes([b[0], b[1]]) as usize;
        let at = self.pos;
        let raw = self.take(n, "name")?;
        String::from_utf8(raw.to_vec()).map_err(|_| NetError::Parse {
            offset: at,
            detail: "name is not UTF-8".into(),
        })
    }
}

pub fn decode(bytes: &[u8]) -> Result<Network, NetError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(NetError::Parse {
            offset: 0,
            detail: "bad magic, not a network checkpoint".into(),
        });
    }
    let version = r.u8("version")?;
    if version != VERSION {
        return Err(NetError::Parse {
            offset: 4,
            detail: format!("unsupported version {version}"),
        });
    }
    let role = match r.u8("role")? {
        0 => Role::Generator,
        1 => Role::Discriminator,
        2 => Role::Classifier,
        t => {
            return Err(NetError::Parse {
                offset: 5,
                detail: format!("unknown role tag {t}"),
            })
        }
    };
    let input_shape = [r.u32("input C")?, r.u32("input H")?, r.u32("input W")?];
    if input_shape.contains(&0) {
        return Err(NetError::Parse {
            offset: 6,
            detail: format!("zero extent in input shape {input_shape:?}"),
        });
    }
    let n_layers = r.u32("layer count")?;
    let mut layers = Vec::with_capacity(n_layers.min(1024));
    for _ in 0..n_layers {
        let at = r.pos;
        let layer = match r.u8("layer tag")? {
            1 => Layer::Conv {
                name: r.name()?,
                in_ch: r.u32("conv in")?,
                out_ch: r.u32("conv out")?,
                kernel: r.u32("conv kernel")?,
                stride: r.u32("conv stride")?,
                padding: r.u32("conv padding")?,
            },
            2 => Layer::Dense {
                name: r.name()?,
                inputs: r.u32("dense in")?,
                outputs: r.u32("dense out")?,
            },
            3 => Layer::Relu,
            4 => Layer::LeakyRelu(r.f64("leaky slope")?),
            5 => Layer::Tanh,
            6 => Layer::Sigmoid,
            7 => Layer::MaxPool2,
            8 => Layer::Upsample2,
            9 => Layer::Dropout(r.f64("dropout rate")?),
            10 => Layer::Flatten,
            t => {
                return Err(NetError::Parse {
                    offset: at,
                    detail: format!("unknown layer tag {t}"),
                })
            }
        };
        if let Layer::Conv { stride: 0, .. } = layer {
            return Err(NetError::Parse {
                offset: at,
                detail: "conv stride 0".into(),
            });
        }
        layers.push(layer);
    }
    let n_params = r.u32("parameter count")?;
    let mut table = Vec::with_capacity(n_params.min(1024));
    for _ in 0..n_params {
        let at = r.pos;
        let name = r.name()?;
        let ndim = r.u8("ndim")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32("extent")?);
        }
        if ndim == 0 || shape.contains(&0) {
            return Err(NetError::Parse {
                offset: at,
                detail: format!("parameter '{name}' has empty shape {shape:?}"),
            });
        }
        table.push((name, shape));
    }
    let mut params = BTreeMap::new();
    for (name, shape) in table {
        let n: usize = shape.iter().product();
        let at = r.pos;
        let raw = r.take(n * 8, &format!("payload of '{name}'"))?;
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(&shape, values).map_err(|e| NetError::Parse {
            offset: at,
            detail: format!("parameter '{name}': {e}"),
        })?;
        if params.insert(name.clone(), t).is_some() {
            return Err(NetError::Parse {
                offset: at,
                detail: format!("duplicate parameter '{name}'"),
            });
        }
    }
    if r.pos != bytes.len() {
        return Err(r.err(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let end = r.pos;
    Network::from_parts(role, input_shape, layers, params).map_err(|detail| NetError::Parse {
        offset: end,
        detail,
    })
}

pub fn save_checkpoint(net: &Network, path: impl AsRef<Path>) -> Result<(), NetError> {
    std::fs::write(path, encode(net))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Network, NetError> {
    decode(&std::fs::read(path)?)
}

/// Loads a checkpoint and checks it holds a network of the expected role.
pub fn load_checkpoint_as(path: impl AsRef<Path>, expected: Role) -> Result<Network, NetError> {
    let net = load_checkpoint(path)?;
    if net.role != expected {
        return Err(NetError::Role {
            expected,
            found: net.role,
        });
    }
    Ok(net)
}
