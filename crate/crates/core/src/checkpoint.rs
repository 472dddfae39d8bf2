//! Versioned little-endian network checkpoints.
//!
//! Layout: `ILNC`, version byte, architecture name (u16 length + UTF-8),
//! input shape (u8 rank + u32 dims), class count (u32), layer list (u32
//! count, tag byte + fields), parameter and buffer groups (per layer: u32
//! tensor count, each tensor u8 rank + u32 dims + f32 data), then provenance
//! (u16-prefixed config hash, u32 epoch, u64 seed).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{LayerSpec, Network};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"ILNC";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub epoch: u32,
    pub seed: u64,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend(v.to_le_bytes());
    }
    fn u32(&mut self, v: usize) {
        self.0.extend((v as u32).to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u16(s.len() as u16);
        self.0.extend(s.as_bytes());
    }
    fn tensor(&mut self, t: &Tensor<f32>) {
        self.u8(t.ndim() as u8);
        for &d in t.shape() {
            self.u32(d);
        }
        for v in t.data() {
            self.0.extend(v.to_le_bytes());
        }
    }
    fn layer(&mut self, l: &LayerSpec) {
        match *l {
            LayerSpec::Dense { inputs, outputs } => {
                self.u8(0);
                self.u32(inputs);
                self.u32(outputs);
            }
            LayerSpec::Conv3x3 {
                in_channels,
                out_channels,
                stride,
                bias,
            } => {
                self.u8(1);
                self.u32(in_channels);
                self.u32(out_channels);
                self.u32(stride);
                self.u8(bias as u8);
            }
            LayerSpec::Relu => self.u8(2),
            LayerSpec::MaxPool2 => self.u8(3),
            LayerSpec::BatchNorm { channels } => {
                self.u8(4);
                self.u32(channels);
            }
            LayerSpec::GlobalAvgPool => self.u8(5),
            LayerSpec::Dropout { rate } => {
                self.u8(6);
                self.0.extend(rate.to_le_bytes());
            }
            LayerSpec::Residual {
                in_channels,
                out_channels,
                stride,
            } => {
                self.u8(7);
                self.u32(in_channels);
                self.u32(out_channels);
                self.u32(stride);
            }
            LayerSpec::Flatten => self.u8(8),
        }
    }
}

pub fn encode(net: &Network<f32>, prov: &Provenance) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend(MAGIC);
    w.u8(VERSION);
    w.str(net.arch());
    w.u8(net.input_shape().len() as u8);
    for &d in net.input_shape() {
        w.u32(d);
    }
    w.u32(net.num_classes());
    w.u32(net.layers().len());
    for l in net.layers() {
        w.layer(l);
    }
    for groups in [net.param_groups(), net.buffer_groups()] {
        for g in groups {
            w.u32(g.len());
            for t in g {
                w.tensor(t);
            }
        }
    }
    w.str(&prov.config_hash);
    w.u32(prov.epoch as usize);
    w.0.extend(prov.seed.to_le_bytes());
    w.0
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            offset: self.pos as u64,
            msg: msg.into(),
        }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| self.err(format!("truncated: wanted {n} more bytes")))?;
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u16()? as usize;
        let at = self.pos;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format {
            offset: at as u64,
            msg: "invalid UTF-8".into(),
        })
    }
    fn tensor(&mut self) -> Result<Tensor<f32>> {
        let rank = self.u8()? as usize;
        let shape = (0..rank).map(|_| self.u32()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        if n * 4 > self.bytes.len() - self.pos.min(self.bytes.len()) {
            return Err(self.err(format!("tensor {shape:?} runs past the end")));
        }
        let data = (0..n).map(|_| self.f32()).collect::<Result<Vec<_>>>()?;
        Tensor::new(shape, data).map_err(|e| self.err(e.to_string()))
    }
    fn layer(&mut self) -> Result<LayerSpec> {
        let at = self.pos;
        Ok(match self.u8()? {
            0 => LayerSpec::Dense {
                inputs: self.u32()?,
                outputs: self.u32()?,
            },
            1 => LayerSpec::Conv3x3 {
                in_channels: self.u32()?,
                out_channels: self.u32()?,
                stride: self.u32()?,
                bias: self.u8()? != 0,
            },
            2 => LayerSpec::Relu,
            3 => LayerSpec::MaxPool2,
            4 => LayerSpec::BatchNorm { channels: self.u32()? },
            5 => LayerSpec::GlobalAvgPool,
            6 => LayerSpec::Dropout { rate: self.f32()? },
            7 => LayerSpec::Residual {
                in_channels: self.u32()?,
                out_channels: self.u32()?,
                stride: self.u32()?,
            },
            8 => LayerSpec::Flatten,
            tag => {
                return Err(Error::Format {
                    offset: at as u64,
                    msg: format!("unknown layer tag {tag}"),
                })
            }
        })
    }
}

pub fn decode(bytes: &[u8]) -> Result<(Network<f32>, Provenance)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: "not a checkpoint (bad magic)".into(),
        });
    }
    let version = r.u8()?;
    if version != VERSION {
        return Err(Error::Format {
            offset: 4,
            msg: format!("unsupported checkpoint version {version}"),
        });
    }
    let arch = r.str()?;
    let rank = r.u8()? as usize;
    let input_shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let classes = r.u32()?;
    let n_layers = r.u32()?;
    let layers = (0..n_layers).map(|_| r.layer()).collect::<Result<Vec<_>>>()?;
    let read_groups = |r: &mut Reader| -> Result<Vec<Vec<Tensor<f32>>>> {
        (0..n_layers)
            .map(|_| {
                let n = r.u32()?;
                (0..n).map(|_| r.tensor()).collect()
            })
            .collect()
    };
    let params = read_groups(&mut r)?;
    let buffers = read_groups(&mut r)?;
    let prov = Provenance {
        config_hash: r.str()?,
        epoch: r.u32()? as u32,
        seed: u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")),
    };
    if r.pos != bytes.len() {
        return Err(r.err(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let net = Network::from_parts(&arch, &input_shape, classes, layers, params, buffers).map_err(|e| Error::Format {
        offset: r.pos as u64,
        msg: format!("inconsistent network: {e}"),
    })?;
    Ok((net, prov))
}

pub fn save(path: &Path, net: &Network<f32>, prov: &Provenance) -> Result<()> {
    fs::write(path, encode(net, prov))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(Network<f32>, Provenance)> {
    decode(&fs::read(path)?)
}
