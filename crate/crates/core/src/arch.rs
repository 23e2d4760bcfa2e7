//! Network manifests: block lists at width 1.0 and the flat weighted-layer view
//! derived from them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Block {
    /// Conv + BN + ReLU. `out` is the base channel count at width 1.0.
    Conv { out: usize, kernel: usize, stride: usize },
    /// MobileNet-style 3x3 depthwise + BN + ReLU, then 1x1 pointwise + BN + ReLU.
    Separable { out: usize, stride: usize },
    /// Two channel-preserving conv + BN layers with an identity skip.
    Residual { kernel: usize },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub name: String,
    pub in_channels: usize,
    pub input_size: usize,
    pub classes: usize,
    pub blocks: Vec<Block>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    Depthwise,
    Pointwise,
    Head,
}

/// One weighted layer. Every non-head layer is followed by batch norm, whose
/// layer id is the layer's index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerInfo {
    pub name: String,
    pub kind: LayerKind,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// Base input channels; `None` for layers reading the network input,
    /// which is never sliced.
    pub in_base: Option<usize>,
    /// Base output channels; for the head this is the class count.
    pub out_base: usize,
    pub in_hw: usize,
    pub out_hw: usize,
}

impl LayerInfo {
    pub fn is_head(&self) -> bool {
        self.kind == LayerKind::Head
    }
}

impl Architecture {
    /// Named presets: `toy`, `convnet` (conv-only body), `mobilenet`, `resnet`.
    pub fn preset(name: &str, in_channels: usize, input_size: usize, classes: usize) -> Result<Self> {
        use Block::*;
        let blocks = match name {
            "toy" => vec![
                Conv { out: 16, kernel: 3, stride: 1 },
                Conv { out: 32, kernel: 3, stride: 2 },
                Residual { kernel: 3 },
            ],
            "convnet" => vec![Conv { out: 64, kernel: 3, stride: 1 }; 5],
            "mobilenet" => vec![
                Conv { out: 32, kernel: 3, stride: 2 },
                Separable { out: 64, stride: 1 },
                Separable { out: 128, stride: 2 },
                Separable { out: 128, stride: 1 },
                Separable { out: 256, stride: 2 },
                Separable { out: 256, stride: 1 },
            ],
            "resnet" => vec![
                Conv { out: 16, kernel: 3, stride: 1 },
                Residual { kernel: 3 },
                Conv { out: 32, kernel: 3, stride: 2 },
                Residual { kernel: 3 },
                Conv { out: 64, kernel: 3, stride: 2 },
                Residual { kernel: 3 },
            ],
            other => {
                return Err(Error::Invalid(format!(
                    "unknown architecture {other:?} (expected toy, convnet, mobilenet or resnet)"
                )))
            }
        };
        let arch = Self {
            name: name.to_string(),
            in_channels,
            input_size,
            classes,
            blocks,
        };
        arch.validate()?;
        Ok(arch)
    }

    /// Parses a block list such as `conv:16:3:1,sep:32:2,res:3`.
    pub fn custom(blocks: &str, in_channels: usize, input_size: usize, classes: usize) -> Result<Self> {
        let bad = |b: &str| Error::Invalid(format!("bad block {b:?} (conv:out:kernel:stride, sep:out:stride, res:kernel)"));
        let mut out = Vec::new();
        for item in blocks.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let parts: Vec<&str> = item.split(':').collect();
            let num = |i: usize| -> Result<usize> { parts.get(i).and_then(|p| p.parse().ok()).ok_or_else(|| bad(item)) };
            let block = match (parts[0], parts.len()) {
                ("conv", 4) => Block::Conv {
                    out: num(1)?,
                    kernel: num(2)?,
                    stride: num(3)?,
                },
                ("sep", 3) => Block::Separable {
                    out: num(1)?,
                    stride: num(2)?,
                },
                ("res", 2) => Block::Residual { kernel: num(1)? },
                _ => return Err(bad(item)),
            };
            out.push(block);
        }
        let arch = Self {
            name: "custom".into(),
            in_channels,
            input_size,
            classes,
            blocks: out,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.in_channels == 0 || self.input_size == 0 || self.classes == 0 {
            problems.push("input channels, input size and classes must be positive".to_string());
        }
        match self.blocks.first() {
            None => problems.push("architecture has no blocks".into()),
            Some(Block::Residual { .. }) => problems.push("first block cannot be residual".into()),
            _ => {}
        }
        for (i, b) in self.blocks.iter().enumerate() {
            let ok = match *b {
                Block::Conv { out, kernel, stride } => out > 0 && kernel % 2 == 1 && stride > 0,
                Block::Separable { out, stride } => out > 0 && stride > 0,
                Block::Residual { kernel } => kernel % 2 == 1,
            };
            if !ok {
                problems.push(format!("block {i} {b:?} is invalid (odd kernels, positive sizes)"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    /// Flat list of weighted layers in execution order, head last.
    pub fn layers(&self) -> Vec<LayerInfo> {
        let mut layers = Vec::new();
        let mut ch: Option<usize> = None;
        let mut hw = self.input_size;
        let push = |layers: &mut Vec<LayerInfo>, kind, kernel: usize, stride: usize, in_base, out_base, hw: &mut usize| {
            let padding = kernel / 2;
            let out_hw = (*hw + 2 * padding - kernel) / stride + 1;
            let idx = layers.len();
            layers.push(LayerInfo {
                name: format!("layer{idx}"),
                kind,
                kernel,
                stride,
                padding,
                in_base,
                out_base,
                in_hw: *hw,
                out_hw,
            });
            *hw = out_hw;
        };
        for block in &self.blocks {
            match *block {
                Block::Conv { out, kernel, stride } => {
                    push(&mut layers, LayerKind::Conv, kernel, stride, ch, out, &mut hw);
                    ch = Some(out);
                }
                Block::Separable { out, stride } => {
                    let c = ch.expect("validated: separable block follows a conv");
                    push(&mut layers, LayerKind::Depthwise, 3, stride, Some(c), c, &mut hw);
                    push(&mut layers, LayerKind::Pointwise, 1, 1, Some(c), out, &mut hw);
                    ch = Some(out);
                }
                Block::Residual { kernel } => {
                    let c = ch.expect("validated: residual block follows a conv");
                    push(&mut layers, LayerKind::Conv, kernel, 1, Some(c), c, &mut hw);
                    push(&mut layers, LayerKind::Conv, kernel, 1, Some(c), c, &mut hw);
                }
            }
        }
        let pre_head = ch.expect("validated: at least one block");
        layers.push(LayerInfo {
            name: "head".into(),
            kind: LayerKind::Head,
            kernel: 1,
            stride: 1,
            padding: 0,
            in_base: Some(pre_head),
            out_base: self.classes,
            in_hw: 1,
            out_hw: 1,
        });
        layers
    }

    /// Base channel count feeding the classifier head.
    pub fn pre_head_channels(&self) -> usize {
        self.layers().last().and_then(|l| l.in_base).unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_layers() {
        let a = Architecture::preset("toy", 3, 8, 10).unwrap();
        let l = a.layers();
        assert_eq!(l.len(), 5);
        assert_eq!(l[0].in_base, None);
        assert_eq!((l[1].in_hw, l[1].out_hw), (8, 4));
        assert_eq!(l[2].in_base, Some(32));
        assert!(l[4].is_head());
        assert_eq!(a.pre_head_channels(), 32);
    }

    #[test]
    fn separable_expands_to_two_layers() {
        let a = Architecture::preset("mobilenet", 3, 32, 10).unwrap();
        let l = a.layers();
        assert_eq!(l[1].kind, LayerKind::Depthwise);
        assert_eq!(l[1].out_base, 32);
        assert_eq!(l[2].kind, LayerKind::Pointwise);
        assert_eq!((l[2].in_base, l[2].out_base), (Some(32), 64));
    }

    #[test]
    fn custom_blocks() {
        let a = Architecture::custom("conv:8:3:1, sep:16:2, res:3", 1, 6, 4).unwrap();
        assert_eq!(a.blocks.len(), 3);
        assert!(Architecture::custom("res:3", 1, 6, 4).is_err());
        assert!(Architecture::custom("conv:8:2:1", 1, 6, 4).is_err());
        assert!(Architecture::custom("pool:2", 1, 6, 4).is_err());
    }
}
