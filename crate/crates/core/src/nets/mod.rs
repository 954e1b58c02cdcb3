//! Network builders (U-Net and the reduced-scale classifier families),
//! parameter storage and checkpoints.
//!
//! A [`Model`] owns its parameters; every forward pass records onto a fresh
//! [`Graph`], registering each parameter the first time a layer touches it.

mod checkpoint;
mod classifier;
mod unet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::engine::{BatchNormStats, Graph, Mode, StatUpdate, Tensor, Var};
use crate::error::{Error, Result};

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};
pub use classifier::{ClassifierConfig, Family};
pub use unet::UNetConfig;

use classifier::ClassifierArch;
use unet::UNetArch;

pub const BN_MOMENTUM: f32 = 0.1;
pub const BN_EPS: f32 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(usize);

/// Trainable parameters plus non-trainable buffers (batch-norm running
/// statistics), each kept in declaration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Tensor<f32>>,
    param_names: Vec<String>,
    buffers: Vec<Tensor<f32>>,
    buffer_names: Vec<String>,
}

impl ParamStore {
    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn params(&self) -> &[Tensor<f32>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<f32>] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.param_names
    }

    pub fn buffers(&self) -> &[Tensor<f32>] {
        &self.buffers
    }

    pub fn buffer_names(&self) -> &[String] {
        &self.buffer_names
    }

    pub fn param(&self, id: ParamId) -> &Tensor<f32> {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Tensor<f32> {
        &mut self.params[id.0]
    }

    /// Total number of scalar trainable parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Every named array, parameters first, in declaration order.
    pub fn named_arrays(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.param_names
            .iter()
            .map(String::as_str)
            .zip(&self.params)
            .chain(self.buffer_names.iter().map(String::as_str).zip(&self.buffers))
    }

    fn named_arrays_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<f32>)> {
        self.param_names
            .iter()
            .map(String::as_str)
            .zip(self.params.iter_mut())
            .chain(self.buffer_names.iter().map(String::as_str).zip(self.buffers.iter_mut()))
    }

    fn add_param(&mut self, name: String, value: Tensor<f32>) -> ParamId {
        self.params.push(value);
        self.param_names.push(name);
        ParamId(self.params.len() - 1)
    }

    fn add_buffer(&mut self, name: String, value: Tensor<f32>) -> BufferId {
        self.buffers.push(value);
        self.buffer_names.push(name);
        BufferId(self.buffers.len() - 1)
    }

    /// Commits running statistics recorded by a train-mode forward pass.
    pub fn apply_stat_updates(&mut self, updates: Vec<StatUpdate<f32>>) -> Result<()> {
        for u in updates {
            let (m, v) = (u.key, u.key + 1);
            if v >= self.buffers.len() || self.buffers[m].len() != u.running_mean.len() {
                return Err(Error::shape(format!("stat update for unknown buffer {m}")));
            }
            self.buffers[m] = Tensor::new(vec![u.running_mean.len()], u.running_mean)?;
            self.buffers[v] = Tensor::new(vec![u.running_var.len()], u.running_var)?;
        }
        Ok(())
    }
}

/// Declares layers into a [`ParamStore`] with He-uniform initialization.
pub(crate) struct Builder {
    pub store: ParamStore,
    rng: ChaCha8Rng,
}

impl Builder {
    pub fn new(seed: u64) -> Self {
        Self {
            store: ParamStore::default(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn he_uniform(&mut self, shape: Vec<usize>, fan_in: usize) -> Tensor<f32> {
        let bound = (6.0 / fan_in as f64).sqrt() as f32;
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..bound)).collect();
        Tensor::new(shape, data).expect("consistent shape")
    }

    pub fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, bias: bool) -> Conv {
        let w = self.he_uniform(vec![cout, cin, k, k], cin * k * k);
        let w = self.store.add_param(format!("{name}.weight"), w);
        let b = bias.then(|| self.store.add_param(format!("{name}.bias"), Tensor::zeros(vec![cout])));
        Conv { w, b, pad: k / 2 }
    }

    pub fn bn(&mut self, name: &str, c: usize) -> BatchNorm {
        let gamma = self.store.add_param(format!("{name}.gamma"), Tensor::full(vec![c], 1.0));
        let beta = self.store.add_param(format!("{name}.beta"), Tensor::zeros(vec![c]));
        let mean = self.store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(vec![c]));
        let var = self.store.add_buffer(format!("{name}.running_var"), Tensor::full(vec![c], 1.0));
        debug_assert_eq!(var.0, mean.0 + 1);
        BatchNorm { gamma, beta, mean }
    }

    /// Convolution (no bias) followed by batch-norm and ReLU.
    pub fn conv_bn(&mut self, name: &str, cin: usize, cout: usize, k: usize) -> ConvBn {
        ConvBn {
            conv: self.conv(name, cin, cout, k, false),
            bn: self.bn(&format!("{name}.bn"), cout),
        }
    }

    pub fn tconv(&mut self, name: &str, cin: usize, cout: usize) -> TConv {
        let w = self.he_uniform(vec![cin, cout, 2, 2], cin * 4);
        let w = self.store.add_param(format!("{name}.weight"), w);
        let b = self.store.add_param(format!("{name}.bias"), Tensor::zeros(vec![cout]));
        TConv { w, b }
    }

    pub fn linear(&mut self, name: &str, fin: usize, fout: usize) -> Linear {
        let w = self.he_uniform(vec![fout, fin], fin);
        let w = self.store.add_param(format!("{name}.weight"), w);
        let b = self.store.add_param(format!("{name}.bias"), Tensor::zeros(vec![fout]));
        Linear { w, b }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Conv {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub pad: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub mean: BufferId,
}

#[derive(Clone, Debug)]
pub(crate) struct ConvBn {
    pub conv: Conv,
    pub bn: BatchNorm,
}

#[derive(Clone, Debug)]
pub(crate) struct TConv {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Debug)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

/// Per-forward state: the graph, lazily registered parameter nodes and
/// recorded taps.
pub(crate) struct Ctx<'a> {
    pub g: &'a mut Graph<f32>,
    store: &'a ParamStore,
    vars: Vec<Option<Var>>,
    mode: Mode,
    pub taps: Vec<(String, Var)>,
}

impl<'a> Ctx<'a> {
    fn new(g: &'a mut Graph<f32>, store: &'a ParamStore, mode: Mode) -> Self {
        Self {
            g,
            store,
            vars: vec![None; store.len()],
            mode,
            taps: Vec::new(),
        }
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let v = self.g.param(self.store.params[id.0].clone());
        self.vars[id.0] = Some(v);
        v
    }

    pub fn tap(&mut self, name: impl Into<String>, v: Var) {
        self.taps.push((name.into(), v));
    }

    pub fn conv(&mut self, c: &Conv, x: Var) -> Result<Var> {
        let w = self.p(c.w);
        let b = c.b.map(|b| self.p(b));
        self.g.conv2d(x, w, b, 1, c.pad)
    }

    pub fn bn(&mut self, bn: &BatchNorm, x: Var) -> Result<Var> {
        let gamma = self.p(bn.gamma);
        let beta = self.p(bn.beta);
        let stats = BatchNormStats {
            running_mean: self.store.buffers[bn.mean.0].data(),
            running_var: self.store.buffers[bn.mean.0 + 1].data(),
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
            key: bn.mean.0,
        };
        self.g.batchnorm2d(x, gamma, beta, stats, self.mode)
    }

    /// conv, batch-norm, optional ReLU.
    pub fn conv_bn(&mut self, l: &ConvBn, x: Var, relu: bool) -> Result<Var> {
        let y = self.conv(&l.conv, x)?;
        let y = self.bn(&l.bn, y)?;
        if relu {
            self.g.relu(y)
        } else {
            Ok(y)
        }
    }

    pub fn tconv(&mut self, l: &TConv, x: Var) -> Result<Var> {
        let w = self.p(l.w);
        let b = self.p(l.b);
        self.g.conv_transpose2d(x, w, Some(b), 2, 0)
    }

    pub fn linear(&mut self, l: &Linear, x: Var) -> Result<Var> {
        let w = self.p(l.w);
        let b = self.p(l.b);
        self.g.linear(x, w, Some(b))
    }
}

/// Result of one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    /// Pre-softmax scores: `(N, classes)` for classifiers, `(N, classes, H, W)`
    /// for U-Net.
    pub logits: Var,
    /// Softmax over axis 1 of `logits`.
    pub probs: Var,
    /// Named intermediate activations, in forward order.
    pub taps: Vec<(String, Var)>,
    /// Graph node of each parameter, `None` if the forward never used it.
    pub param_vars: Vec<Option<Var>>,
}

impl Forward {
    pub fn tap(&self, name: &str) -> Result<Var> {
        self.taps
            .iter()
            .find(|(n, _)| n == name)
            .map(|&(_, v)| v)
            .ok_or_else(|| Error::Unknown {
                kind: "tap",
                name: name.to_string(),
            })
    }

    /// Parameter gradients after `backward`, zeros for unused parameters.
    pub fn param_grads(&self, g: &Graph<f32>, store: &ParamStore) -> Vec<Tensor<f32>> {
        self.param_vars
            .iter()
            .zip(store.params())
            .map(|(v, p)| match v.and_then(|v| g.grad(v)) {
                Some(grad) => grad.clone(),
                None => Tensor::zeros(p.shape().to_vec()),
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ModelConfig {
    UNet(UNetConfig),
    Classifier(ClassifierConfig),
}

impl ModelConfig {
    pub fn in_channels(&self) -> usize {
        match self {
            ModelConfig::UNet(c) => c.in_channels,
            ModelConfig::Classifier(c) => c.in_channels,
        }
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        match self {
            ModelConfig::UNet(c) => c.to_kv(),
            ModelConfig::Classifier(c) => c.to_kv(),
        }
    }

    /// Parses the keys written by [`ModelConfig::to_kv`]; unknown keys are
    /// ignored.
    pub fn from_kv(pairs: &[(String, String)]) -> Result<Self> {
        let arch = pairs
            .iter()
            .find(|(k, _)| k == "arch")
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::format("config lacks an `arch` key"))?;
        match arch {
            "unet" => {
                let mut c = UNetConfig::default();
                for (k, v) in pairs {
                    c.set(k, v)?;
                }
                Ok(ModelConfig::UNet(c))
            }
            "classifier" => {
                let mut c = ClassifierConfig::default();
                for (k, v) in pairs {
                    c.set(k, v)?;
                }
                Ok(ModelConfig::Classifier(c))
            }
            other => Err(Error::Unknown {
                kind: "architecture",
                name: other.to_string(),
            }),
        }
    }
}

#[derive(Clone, Debug)]
enum Arch {
    UNet(UNetArch),
    Classifier(ClassifierArch),
}

/// A built network: configuration, architecture wiring and parameters.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    arch: Arch,
    store: ParamStore,
}

pub fn build_unet(cfg: &UNetConfig, seed: u64) -> Result<Model> {
    cfg.validate()?;
    let mut b = Builder::new(seed);
    let arch = UNetArch::build(cfg, &mut b);
    Ok(Model {
        config: ModelConfig::UNet(cfg.clone()),
        arch: Arch::UNet(arch),
        store: b.store,
    })
}

pub fn build_classifier(cfg: &ClassifierConfig, seed: u64) -> Result<Model> {
    cfg.validate()?;
    let mut b = Builder::new(seed);
    let arch = ClassifierArch::build(cfg, &mut b);
    Ok(Model {
        config: ModelConfig::Classifier(cfg.clone()),
        arch: Arch::Classifier(arch),
        store: b.store,
    })
}

/// Swaps the linear head for a freshly initialized one with `n_classes`
/// outputs; every other parameter is carried over unchanged.
pub fn replace_head(model: Model, n_classes: usize, seed: u64) -> Result<Model> {
    let ModelConfig::Classifier(mut cfg) = model.config else {
        return Err(Error::invalid("model has no linear head"));
    };
    cfg.n_classes = n_classes;
    cfg.validate()?;
    let mut fresh = build_classifier(&cfg, seed)?;
    let head: Vec<&str> = vec!["head.weight", "head.bias"];
    for ((name, dst), (_, src)) in fresh.store.named_arrays_mut().zip(model.store.named_arrays()) {
        if !head.contains(&name) {
            *dst = src.clone();
        }
    }
    Ok(fresh)
}

impl Model {
    pub fn build(cfg: &ModelConfig, seed: u64) -> Result<Model> {
        match cfg {
            ModelConfig::UNet(c) => build_unet(c, seed),
            ModelConfig::Classifier(c) => build_classifier(c, seed),
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn n_classes(&self) -> usize {
        match &self.config {
            ModelConfig::UNet(c) => c.out_classes,
            ModelConfig::Classifier(c) => c.n_classes,
        }
    }

    /// Name of the activation used for saliency by default: the last
    /// convolutional feature stack.
    pub fn default_tap(&self) -> &'static str {
        match self.arch {
            Arch::UNet(_) => "dec0",
            Arch::Classifier(_) => "features",
        }
    }

    pub fn forward(&self, g: &mut Graph<f32>, x: Var, mode: Mode) -> Result<Forward> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != self.config.in_channels() {
            return Err(Error::shape(format!(
                "model expects (N, {}, H, W) input, got {shape:?}",
                self.config.in_channels()
            )));
        }
        let mut ctx = Ctx::new(g, &self.store, mode);
        let logits = match &self.arch {
            Arch::UNet(a) => a.forward(&mut ctx, x)?,
            Arch::Classifier(a) => a.forward(&mut ctx, x)?,
        };
        let probs = ctx.g.softmax(logits)?;
        Ok(Forward {
            logits,
            probs,
            taps: ctx.taps,
            param_vars: ctx.vars,
        })
    }

    /// Eval-mode forward without gradient recording; returns probabilities.
    pub fn predict(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut g = Graph::no_grad();
        let xv = g.constant(x.clone());
        let f = self.forward(&mut g, xv, Mode::Eval)?;
        Ok(g.value(f.probs).clone())
    }
}
