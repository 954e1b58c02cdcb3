use super::{Builder, ConvBn, Ctx, Linear};
use crate::engine::Var;
use crate::error::{Error, Result};

/// Classifier block family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Family {
    /// Squeeze 1x1 then parallel 1x1 / 3x3 expand, concatenated.
    Fire,
    /// Two 3x3 convolutions plus an identity shortcut.
    Residual,
    /// Parallel 1x1 / 3x3 / 5x5 branches, concatenated.
    Inception,
    /// Every layer sees the concatenation of all earlier feature maps.
    Dense,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::Fire, Family::Residual, Family::Inception, Family::Dense];

    pub fn name(self) -> &'static str {
        match self {
            Family::Fire => "fire",
            Family::Residual => "residual",
            Family::Inception => "inception",
            Family::Dense => "dense",
        }
    }
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Unknown {
                kind: "family",
                name: s.to_string(),
            })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierConfig {
    pub family: Family,
    pub in_channels: usize,
    pub n_classes: usize,
    /// Stem width; block widths grow from it.
    pub width: usize,
    /// Number of family blocks.
    pub blocks: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            family: Family::Fire,
            in_channels: 1,
            n_classes: 3,
            width: 16,
            blocks: 2,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::invalid(format!("n_classes must be >= 2, got {}", self.n_classes)));
        }
        if self.in_channels == 0 || self.blocks == 0 || self.width < 4 {
            return Err(Error::invalid(format!("bad classifier config {self:?}")));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        vec![
            ("arch".into(), "classifier".into()),
            ("family".into(), self.family.name().into()),
            ("in_channels".into(), self.in_channels.to_string()),
            ("n_classes".into(), self.n_classes.to_string()),
            ("width".into(), self.width.to_string()),
            ("blocks".into(), self.blocks.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = || Error::format(format!("bad value `{value}` for `{key}`"));
        match key {
            "family" => self.family = value.parse()?,
            "in_channels" => self.in_channels = value.parse().map_err(|_| bad())?,
            "n_classes" => self.n_classes = value.parse().map_err(|_| bad())?,
            "width" => self.width = value.parse().map_err(|_| bad())?,
            "blocks" => self.blocks = value.parse().map_err(|_| bad())?,
            _ => {}
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
enum Block {
    Fire { squeeze: ConvBn, e1: ConvBn, e3: ConvBn },
    Residual { a: ConvBn, b: ConvBn },
    Inception { b1: ConvBn, b3: ConvBn, b5: ConvBn },
    Dense { layers: Vec<ConvBn>, transition: Option<ConvBn> },
}

#[derive(Clone, Debug)]
pub(crate) struct ClassifierArch {
    stem: ConvBn,
    blocks: Vec<Block>,
    head: Linear,
}

const DENSE_LAYERS: usize = 3;

impl ClassifierArch {
    pub fn build(cfg: &ClassifierConfig, b: &mut Builder) -> Self {
        let w = cfg.width;
        let stem_out = match cfg.family {
            Family::Residual => 2 * w,
            _ => w,
        };
        let stem = b.conv_bn("stem", cfg.in_channels, stem_out, 3);
        let mut c = stem_out;
        let mut blocks = Vec::new();
        for i in 0..cfg.blocks {
            let name = |part: &str| format!("block{i}.{part}");
            let out = (2 * w) << i;
            let block = match cfg.family {
                Family::Fire => {
                    let blk = Block::Fire {
                        squeeze: b.conv_bn(&name("squeeze"), c, out / 4, 1),
                        e1: b.conv_bn(&name("expand1"), out / 4, out / 2, 1),
                        e3: b.conv_bn(&name("expand3"), out / 4, out / 2, 3),
                    };
                    c = out;
                    blk
                }
                Family::Residual => Block::Residual {
                    a: b.conv_bn(&name("conv1"), c, c, 3),
                    b: b.conv_bn(&name("conv2"), c, c, 3),
                },
                Family::Inception => {
                    let blk = Block::Inception {
                        b1: b.conv_bn(&name("branch1"), c, out / 4, 1),
                        b3: b.conv_bn(&name("branch3"), c, out / 2, 3),
                        b5: b.conv_bn(&name("branch5"), c, out / 4, 5),
                    };
                    c = out;
                    blk
                }
                Family::Dense => {
                    let transition = (i > 0).then(|| {
                        let t = b.conv_bn(&name("transition"), c, c / 2, 1);
                        c /= 2;
                        t
                    });
                    let layers = (0..DENSE_LAYERS)
                        .map(|l| {
                            let layer = b.conv_bn(&name(&format!("layer{l}")), c, w, 3);
                            c += w;
                            layer
                        })
                        .collect();
                    Block::Dense { layers, transition }
                }
            };
            blocks.push(block);
        }
        let head = b.linear("head", c, cfg.n_classes);
        Self { stem, blocks, head }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let mut h = ctx.conv_bn(&self.stem, x, true)?;
        ctx.tap("stem", h);
        for (i, block) in self.blocks.iter().enumerate() {
            h = match block {
                Block::Dense {
                    transition: Some(t), ..
                } => {
                    let y = ctx.conv_bn(t, h, true)?;
                    ctx.g.avgpool2d(y, 2, 2)?
                }
                _ => ctx.g.maxpool2d(h, 2, 2)?,
            };
            ctx.tap(format!("block{i}.in"), h);
            h = match block {
                Block::Fire { squeeze, e1, e3 } => {
                    let s = ctx.conv_bn(squeeze, h, true)?;
                    let a = ctx.conv_bn(e1, s, true)?;
                    let b = ctx.conv_bn(e3, s, true)?;
                    ctx.g.concat(&[a, b])?
                }
                Block::Residual { a, b } => {
                    let y = ctx.conv_bn(a, h, true)?;
                    let y = ctx.conv_bn(b, y, false)?;
                    let sum = ctx.g.add(h, y)?;
                    ctx.g.relu(sum)?
                }
                Block::Inception { b1, b3, b5 } => {
                    let y1 = ctx.conv_bn(b1, h, true)?;
                    let y3 = ctx.conv_bn(b3, h, true)?;
                    let y5 = ctx.conv_bn(b5, h, true)?;
                    ctx.tap(format!("block{i}.b1"), y1);
                    ctx.tap(format!("block{i}.b3"), y3);
                    ctx.tap(format!("block{i}.b5"), y5);
                    ctx.g.concat(&[y1, y3, y5])?
                }
                Block::Dense { layers, .. } => {
                    let mut feats = vec![h];
                    for layer in layers {
                        let inp = if feats.len() == 1 { feats[0] } else { ctx.g.concat(&feats)? };
                        feats.push(ctx.conv_bn(layer, inp, true)?);
                    }
                    ctx.g.concat(&feats)?
                }
            };
            ctx.tap(format!("block{i}"), h);
        }
        ctx.tap("features", h);
        let pooled = ctx.g.global_avgpool(h)?;
        let n = ctx.g.shape(pooled)[0];
        let c = ctx.g.shape(pooled)[1];
        let flat = ctx.g.reshape(pooled, vec![n, c])?;
        ctx.linear(&self.head, flat)
    }
}
