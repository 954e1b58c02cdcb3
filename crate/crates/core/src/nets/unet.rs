use super::{Builder, Conv, ConvBn, Ctx, TConv};
use crate::engine::Var;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub depth: usize,
    pub out_classes: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            base_channels: 16,
            depth: 4,
            out_classes: 2,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.base_channels == 0 || self.in_channels == 0 || self.out_classes < 2 {
            return Err(Error::invalid(format!("bad U-Net config {self:?}")));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        vec![
            ("arch".into(), "unet".into()),
            ("in_channels".into(), self.in_channels.to_string()),
            ("base_channels".into(), self.base_channels.to_string()),
            ("depth".into(), self.depth.to_string()),
            ("out_classes".into(), self.out_classes.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let slot = match key {
            "in_channels" => &mut self.in_channels,
            "base_channels" => &mut self.base_channels,
            "depth" => &mut self.depth,
            "out_classes" => &mut self.out_classes,
            _ => return Ok(()),
        };
        *slot = value
            .parse()
            .map_err(|_| Error::format(format!("bad value `{value}` for `{key}`")))?;
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct DoubleConv {
    a: ConvBn,
    b: ConvBn,
}

impl DoubleConv {
    fn build(b: &mut Builder, name: &str, cin: usize, cout: usize) -> Self {
        Self {
            a: b.conv_bn(&format!("{name}.conv1"), cin, cout, 3),
            b: b.conv_bn(&format!("{name}.conv2"), cout, cout, 3),
        }
    }

    fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let y = ctx.conv_bn(&self.a, x, true)?;
        ctx.conv_bn(&self.b, y, true)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct UNetArch {
    depth: usize,
    enc: Vec<DoubleConv>,
    bottleneck: DoubleConv,
    up: Vec<TConv>,
    dec: Vec<DoubleConv>,
    head: Conv,
}

impl UNetArch {
    pub fn build(cfg: &UNetConfig, b: &mut Builder) -> Self {
        let ch = |i: usize| cfg.base_channels << i;
        let mut enc = Vec::new();
        let mut cin = cfg.in_channels;
        for i in 0..cfg.depth {
            enc.push(DoubleConv::build(b, &format!("enc{i}"), cin, ch(i)));
            cin = ch(i);
        }
        let bottleneck = DoubleConv::build(b, "bottleneck", cin, ch(cfg.depth));
        let mut up = Vec::new();
        let mut dec = Vec::new();
        // Decoder stored deepest first, the order it runs in.
        for i in (0..cfg.depth).rev() {
            up.push(b.tconv(&format!("up{i}"), ch(i + 1), ch(i)));
            dec.push(DoubleConv::build(b, &format!("dec{i}"), 2 * ch(i), ch(i)));
        }
        let head = b.conv("head", ch(0), cfg.out_classes, 1, true);
        Self {
            depth: cfg.depth,
            enc,
            bottleneck,
            up,
            dec,
            head,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let shape = ctx.g.shape(x);
        let unit = 1usize << self.depth;
        if shape[2] % unit != 0 || shape[3] % unit != 0 {
            return Err(Error::shape(format!(
                "U-Net input {}x{} not divisible by {unit}",
                shape[3], shape[2]
            )));
        }
        let mut skips = Vec::with_capacity(self.depth);
        let mut h = x;
        for (i, block) in self.enc.iter().enumerate() {
            let y = block.forward(ctx, h)?;
            ctx.tap(format!("enc{i}"), y);
            skips.push(y);
            h = ctx.g.maxpool2d(y, 2, 2)?;
        }
        h = self.bottleneck.forward(ctx, h)?;
        ctx.tap("bottleneck", h);
        for (j, (up, block)) in self.up.iter().zip(&self.dec).enumerate() {
            let i = self.depth - 1 - j;
            let u = ctx.tconv(up, h)?;
            let cat = ctx.g.concat(&[skips[i], u])?;
            ctx.tap(format!("skip{i}"), cat);
            h = block.forward(ctx, cat)?;
            ctx.tap(format!("dec{i}"), h);
        }
        ctx.conv(&self.head, h)
    }
}
