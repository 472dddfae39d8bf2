//! Named architectures.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::LayerSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Arch {
    /// 784-1024-1024-10 style MLP (input width follows the data).
    Mlp1024,
    /// Two hidden layers of 64 units; for tests and gradient checks.
    MlpSmall,
    /// VGG-style plain CNN with 6, 8 or 10 conv layers.
    Cnn(usize),
    /// CIFAR ResNet with 6n+2 weighted layers: 8, 14, 20 or 26.
    ResNet(usize),
}

pub const ARCH_NAMES: &[&str] = &[
    "mlp-1024", "mlp-small", "cnn-6", "cnn-8", "cnn-10", "resnet8", "resnet14", "resnet20", "resnet26",
];

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "mlp-1024" => Arch::Mlp1024,
            "mlp-small" => Arch::MlpSmall,
            "cnn-6" => Arch::Cnn(6),
            "cnn-8" => Arch::Cnn(8),
            "cnn-10" => Arch::Cnn(10),
            "resnet8" => Arch::ResNet(8),
            "resnet14" => Arch::ResNet(14),
            "resnet20" => Arch::ResNet(20),
            "resnet26" => Arch::ResNet(26),
            other => {
                return Err(Error::Configuration(format!(
                    "unknown architecture `{other}`; expected one of {}",
                    ARCH_NAMES.join(", ")
                )))
            }
        })
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Arch::Mlp1024 => f.write_str("mlp-1024"),
            Arch::MlpSmall => f.write_str("mlp-small"),
            Arch::Cnn(n) => write!(f, "cnn-{n}"),
            Arch::ResNet(n) => write!(f, "resnet{n}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchOptions {
    /// Inverted-dropout rate applied after each block.
    pub dropout: Option<f32>,
    /// Divides every hidden width (floored at 1). Used for reduced-size stubs.
    pub width_divisor: usize,
}

impl Default for ArchOptions {
    fn default() -> Self {
        Self {
            dropout: None,
            width_divisor: 1,
        }
    }
}

const CNN_WIDTHS: [usize; 5] = [64, 128, 256, 256, 512];

impl Arch {
    pub fn is_convolutional(&self) -> bool {
        matches!(self, Arch::Cnn(_) | Arch::ResNet(_))
    }

    pub fn layers(&self, input_shape: &[usize], num_classes: usize, opts: &ArchOptions) -> Result<Vec<LayerSpec>> {
        let div = opts.width_divisor.max(1);
        let w = |n: usize| (n / div).max(1);
        let mut out = Vec::new();
        let drop = |out: &mut Vec<LayerSpec>| {
            if let Some(rate) = opts.dropout {
                out.push(LayerSpec::Dropout { rate });
            }
        };
        match *self {
            Arch::Mlp1024 | Arch::MlpSmall => {
                let hidden = if *self == Arch::Mlp1024 { w(1024) } else { w(64) };
                let inputs: usize = input_shape.iter().product();
                out.push(LayerSpec::Flatten);
                out.push(LayerSpec::Dense { inputs, outputs: hidden });
                out.push(LayerSpec::Relu);
                drop(&mut out);
                out.push(LayerSpec::Dense { inputs: hidden, outputs: hidden });
                out.push(LayerSpec::Relu);
                drop(&mut out);
                out.push(LayerSpec::Dense { inputs: hidden, outputs: num_classes });
            }
            Arch::Cnn(depth) => {
                let (c, mut h, mut wd) = spatial(input_shape)?;
                let mut ch = c;
                for &width in &CNN_WIDTHS[..depth / 2] {
                    let width = w(width);
                    for _ in 0..2 {
                        out.push(LayerSpec::Conv3x3 {
                            in_channels: ch,
                            out_channels: width,
                            stride: 1,
                            bias: true,
                        });
                        out.push(LayerSpec::Relu);
                        ch = width;
                    }
                    out.push(LayerSpec::MaxPool2);
                    drop(&mut out);
                    h /= 2;
                    wd /= 2;
                }
                out.push(LayerSpec::Flatten);
                out.push(LayerSpec::Dense {
                    inputs: ch * h * wd,
                    outputs: num_classes,
                });
            }
            Arch::ResNet(depth) => {
                let (c, _, _) = spatial(input_shape)?;
                let n = (depth - 2) / 6;
                let widths = [w(16), w(32), w(64)];
                out.push(LayerSpec::Conv3x3 {
                    in_channels: c,
                    out_channels: widths[0],
                    stride: 1,
                    bias: false,
                });
                out.push(LayerSpec::BatchNorm { channels: widths[0] });
                out.push(LayerSpec::Relu);
                let mut ch = widths[0];
                for (stage, &width) in widths.iter().enumerate() {
                    for block in 0..n {
                        let stride = if stage > 0 && block == 0 { 2 } else { 1 };
                        out.push(LayerSpec::Residual {
                            in_channels: ch,
                            out_channels: width,
                            stride,
                        });
                        ch = width;
                    }
                    drop(&mut out);
                }
                out.push(LayerSpec::GlobalAvgPool);
                out.push(LayerSpec::Dense {
                    inputs: ch,
                    outputs: num_classes,
                });
            }
        }
        Ok(out)
    }
}

fn spatial(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape {
        [c, h, w] => Ok((*c, *h, *w)),
        _ => Err(Error::Configuration(format!(
            "convolutional architectures need C×H×W input, got {shape:?}"
        ))),
    }
}
