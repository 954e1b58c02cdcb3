//! Parameter updates (SGD with momentum, Adam) and the per-epoch
//! learning-rate-drop / early-stopping schedule.

use crate::engine::{Real, Tensor};
use crate::error::{Error, Result};

/// Which update rule a training run uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    SgdMomentum,
    Adam,
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::SgdMomentum => "sgd",
            OptimizerKind::Adam => "adam",
        }
    }
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" | "sgdm" => Ok(OptimizerKind::SgdMomentum),
            "adam" => Ok(OptimizerKind::Adam),
            _ => Err(Error::Unknown {
                kind: "optimizer",
                name: s.to_string(),
            }),
        }
    }
}

/// Hyperparameters of one training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub momentum_beta: f64,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub lr_drop_factor: f64,
    pub lr_patience: usize,
    pub stop_patience: usize,
    /// When false the schedule never emits [`ScheduleAction::DropLr`].
    pub lr_drop_enabled: bool,
    /// When false the schedule never stops early.
    pub early_stop_enabled: bool,
    pub seed: u64,
}

impl TrainConfig {
    /// U-Net defaults: Adam, 50 epochs.
    pub fn segmentation() -> Self {
        Self {
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-3,
            momentum_beta: 0.9,
            adam_betas: (0.9, 0.999),
            adam_eps: 1e-8,
            batch_size: 4,
            max_epochs: 50,
            lr_drop_factor: 0.1,
            lr_patience: 3,
            stop_patience: 6,
            lr_drop_enabled: true,
            early_stop_enabled: true,
            seed: 0,
        }
    }

    /// Classifier defaults: SGD with momentum, 20 epochs.
    pub fn classification() -> Self {
        Self {
            optimizer: OptimizerKind::SgdMomentum,
            max_epochs: 20,
            ..Self::segmentation()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!("learning rate {}", self.learning_rate)));
        }
        if self.lr_patience == 0 || self.stop_patience == 0 {
            return Err(Error::invalid("patience values must be >= 1"));
        }
        if !(self.lr_drop_factor > 0.0 && self.lr_drop_factor < 1.0) {
            return Err(Error::invalid(format!("lr drop factor {} outside (0, 1)", self.lr_drop_factor)));
        }
        for (name, b) in [
            ("momentum", self.momentum_beta),
            ("adam beta1", self.adam_betas.0),
            ("adam beta2", self.adam_betas.1),
        ] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::invalid(format!("{name} {b} outside [0, 1)")));
            }
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::invalid("batch size and max epochs must be >= 1"));
        }
        Ok(())
    }

    /// Flat `key=value` rendering, stable key order.
    pub fn to_kv(&self) -> Vec<(String, String)> {
        let kv = |k: &str, v: String| (k.to_string(), v);
        vec![
            kv("optimizer", self.optimizer.name().to_string()),
            kv("learning_rate", self.learning_rate.to_string()),
            kv("momentum_beta", self.momentum_beta.to_string()),
            kv("adam_beta1", self.adam_betas.0.to_string()),
            kv("adam_beta2", self.adam_betas.1.to_string()),
            kv("adam_eps", self.adam_eps.to_string()),
            kv("batch_size", self.batch_size.to_string()),
            kv("max_epochs", self.max_epochs.to_string()),
            kv("lr_drop_factor", self.lr_drop_factor.to_string()),
            kv("lr_patience", self.lr_patience.to_string()),
            kv("stop_patience", self.stop_patience.to_string()),
            kv("lr_drop_enabled", self.lr_drop_enabled.to_string()),
            kv("early_stop_enabled", self.early_stop_enabled.to_string()),
            kv("seed", self.seed.to_string()),
        ]
    }

    /// Applies one `key=value` pair. Returns `Ok(false)` for keys this
    /// struct does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn parse<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
            value
                .trim()
                .parse()
                .map_err(|_| Error::invalid(format!("bad value `{value}` for `{key}`")))
        }
        match key {
            "optimizer" => self.optimizer = value.trim().parse()?,
            "learning_rate" | "lr" => self.learning_rate = parse(key, value)?,
            "momentum_beta" => self.momentum_beta = parse(key, value)?,
            "adam_beta1" => self.adam_betas.0 = parse(key, value)?,
            "adam_beta2" => self.adam_betas.1 = parse(key, value)?,
            "adam_eps" => self.adam_eps = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "max_epochs" | "epochs" => self.max_epochs = parse(key, value)?,
            "lr_drop_factor" => self.lr_drop_factor = parse(key, value)?,
            "lr_patience" => self.lr_patience = parse(key, value)?,
            "stop_patience" => self.stop_patience = parse(key, value)?,
            "lr_drop_enabled" => self.lr_drop_enabled = parse(key, value)?,
            "early_stop_enabled" => self.early_stop_enabled = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Minimum decrease in validation loss that counts as an improvement.
pub const IMPROVEMENT_THRESHOLD: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopState {
    pub best_val_loss: f64,
    pub epochs_since_improve: usize,
    pub lr_drops_applied: usize,
}

impl Default for EarlyStopState {
    fn default() -> Self {
        Self {
            best_val_loss: f64::INFINITY,
            epochs_since_improve: 0,
            lr_drops_applied: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleAction {
    Continue,
    DropLr,
    Stop,
}

impl ScheduleAction {
    pub fn name(self) -> &'static str {
        match self {
            ScheduleAction::Continue => "continue",
            ScheduleAction::DropLr => "drop_lr",
            ScheduleAction::Stop => "stop",
        }
    }
}

/// Per-epoch schedule: an improvement resets the stagnation counter; after
/// `lr_patience` stagnant epochs the learning rate drops, after
/// `stop_patience` training stops.
pub fn schedule_update(state: &mut EarlyStopState, val_loss: f64, config: &TrainConfig) -> ScheduleAction {
    if val_loss < state.best_val_loss - IMPROVEMENT_THRESHOLD {
        state.best_val_loss = val_loss;
        state.epochs_since_improve = 0;
        return ScheduleAction::Continue;
    }
    state.epochs_since_improve += 1;
    if config.early_stop_enabled && state.epochs_since_improve >= config.stop_patience {
        ScheduleAction::Stop
    } else if config.lr_drop_enabled && state.epochs_since_improve == config.lr_patience {
        state.lr_drops_applied += 1;
        ScheduleAction::DropLr
    } else {
        ScheduleAction::Continue
    }
}

fn check_shapes<T: Real>(params: &[Tensor<T>], grads: &[Tensor<T>], slots: &[Vec<T>]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::shape(format!("{} parameters, {} gradients", params.len(), grads.len())));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::shape(format!("parameter {i}: {:?} vs gradient {:?}", p.shape(), g.shape())));
        }
        if let Some(s) = slots.get(i) {
            if s.len() != p.len() {
                return Err(Error::shape(format!("parameter {i} changed size since the last step")));
            }
        }
    }
    if !slots.is_empty() && slots.len() != params.len() {
        return Err(Error::shape("parameter count changed since the last step"));
    }
    Ok(())
}

fn zeros_like<T: Real>(params: &[Tensor<T>]) -> Vec<Vec<T>> {
    params.iter().map(|p| vec![T::zero(); p.len()]).collect()
}

#[derive(Clone, Debug, Default)]
pub struct MomentumState<T> {
    pub velocity: Vec<Vec<T>>,
}

/// Classic momentum: `v = beta * v + g; w = w - lr * v`.
pub fn sgd_momentum_step<T: Real>(
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut MomentumState<T>,
    lr: T,
    beta: T,
) -> Result<()> {
    check_shapes(params, grads, &state.velocity)?;
    if state.velocity.is_empty() {
        state.velocity = zeros_like(params);
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(state.velocity.iter_mut()) {
        for ((w, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
            *vv = beta * *vv + gv;
            *w = *w - lr * *vv;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, Default)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

/// Bias-corrected Adam.
pub fn adam_step<T: Real>(
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    lr: T,
    betas: (T, T),
    eps: T,
) -> Result<()> {
    check_shapes(params, grads, &state.m)?;
    if state.m.is_empty() {
        state.m = zeros_like(params);
        state.v = zeros_like(params);
    }
    state.step += 1;
    let (b1, b2) = betas;
    let t = state.step as i32;
    let c1 = T::one() - b1.powi(t);
    let c2 = T::one() - b2.powi(t);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        for (((w, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mv = b1 * *mv + (T::one() - b1) * gv;
            *vv = b2 * *vv + (T::one() - b2) * gv * gv;
            let m_hat = *mv / c1;
            let v_hat = *vv / c2;
            *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Optimizer with its state and current learning rate.
#[derive(Clone, Debug)]
pub enum Optimizer<T> {
    Sgd { lr: f64, beta: f64, state: MomentumState<T> },
    Adam { lr: f64, betas: (f64, f64), eps: f64, state: AdamState<T> },
}

impl<T: Real> Optimizer<T> {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        match cfg.optimizer {
            OptimizerKind::SgdMomentum => Optimizer::Sgd {
                lr: cfg.learning_rate,
                beta: cfg.momentum_beta,
                state: MomentumState::default(),
            },
            OptimizerKind::Adam => Optimizer::Adam {
                lr: cfg.learning_rate,
                betas: cfg.adam_betas,
                eps: cfg.adam_eps,
                state: AdamState::default(),
            },
        }
    }

    pub fn lr(&self) -> f64 {
        match self {
            Optimizer::Sgd { lr, .. } | Optimizer::Adam { lr, .. } => *lr,
        }
    }

    pub fn scale_lr(&mut self, factor: f64) {
        match self {
            Optimizer::Sgd { lr, .. } | Optimizer::Adam { lr, .. } => *lr *= factor,
        }
    }

    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        match self {
            Optimizer::Sgd { lr, beta, state } => sgd_momentum_step(params, grads, state, T::lit(*lr), T::lit(*beta)),
            Optimizer::Adam { lr, betas, eps, state } => adam_step(
                params,
                grads,
                state,
                T::lit(*lr),
                (T::lit(betas.0), T::lit(betas.1)),
                T::lit(*eps),
            ),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Vec<Tensor<f64>> {
        vec![Tensor::scalar(v)]
    }

    #[test]
    fn momentum_two_steps() {
        let mut w = scalar(0.0);
        let g = scalar(1.0);
        let mut st = MomentumState::default();
        sgd_momentum_step(&mut w, &g, &mut st, 0.1, 0.9).unwrap();
        assert!((w[0].data()[0] + 0.1).abs() < 1e-15);
        sgd_momentum_step(&mut w, &g, &mut st, 0.1, 0.9).unwrap();
        assert!((st.velocity[0][0] - 1.9).abs() < 1e-15);
        assert!((w[0].data()[0] + 0.29).abs() < 1e-15);
    }

    #[test]
    fn momentum_zero_lr_and_zero_beta() {
        let mut w = vec![Tensor::from_f64(vec![3], &[0.3, -1.0, 7.0]).unwrap()];
        let before = w.clone();
        let g = vec![Tensor::from_f64(vec![3], &[5.0, -2.0, 1e3]).unwrap()];
        let mut st = MomentumState::default();
        for _ in 0..10 {
            sgd_momentum_step(&mut w, &g, &mut st, 0.0, 0.9).unwrap();
        }
        assert_eq!(w, before);

        let mut st = MomentumState::default();
        for _ in 0..3 {
            let prev = w[0].data().to_vec();
            sgd_momentum_step(&mut w, &g, &mut st, 0.01, 0.0).unwrap();
            for ((now, p), gv) in w[0].data().iter().zip(prev).zip(g[0].data()) {
                assert_eq!(*now, p - 0.01 * gv);
            }
        }
    }

    #[test]
    fn adam_first_step() {
        let mut w = scalar(0.0);
        let mut st = AdamState::default();
        adam_step(&mut w, &scalar(1.0), &mut st, 1e-3, (0.9, 0.999), 1e-8).unwrap();
        assert!((st.m[0][0] - 0.1).abs() < 1e-15);
        assert!((st.v[0][0] - 0.001).abs() < 1e-15);
        assert!((w[0].data()[0] + 1e-3).abs() < 1e-10);

        let mut w = scalar(0.25);
        let mut st = AdamState::default();
        adam_step(&mut w, &scalar(0.0), &mut st, 1e-3, (0.9, 0.999), 1e-8).unwrap();
        assert_eq!(w[0].data()[0], 0.25);
    }

    #[test]
    fn adam_constant_gradient_step_tends_to_lr() {
        let mut w = scalar(0.0);
        let mut st = AdamState::default();
        let g = scalar(0.37);
        let mut last = 0.0;
        for _ in 0..1000 {
            let before = w[0].data()[0];
            adam_step(&mut w, &g, &mut st, 1e-3, (0.9, 0.999), 1e-8).unwrap();
            last = (w[0].data()[0] - before).abs();
        }
        assert!((last - 1e-3).abs() < 1e-6, "{last}");
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut w = vec![Tensor::<f64>::zeros(vec![2])];
        let g = vec![Tensor::<f64>::zeros(vec![3])];
        assert!(sgd_momentum_step(&mut w, &g, &mut MomentumState::default(), 0.1, 0.9).is_err());
        assert!(adam_step(&mut w, &g, &mut AdamState::default(), 0.1, (0.9, 0.999), 1e-8).is_err());
    }

    #[test]
    fn schedule_improving_losses_continue() {
        let cfg = TrainConfig::classification();
        let mut st = EarlyStopState::default();
        for l in [1.0, 0.9, 0.8] {
            assert_eq!(schedule_update(&mut st, l, &cfg), ScheduleAction::Continue);
        }
    }

    #[test]
    fn schedule_drops_then_stops() {
        let cfg = TrainConfig::classification();
        let mut st = EarlyStopState::default();
        assert_eq!(schedule_update(&mut st, 1.0, &cfg), ScheduleAction::Continue);
        let actions: Vec<_> = (0..6).map(|_| schedule_update(&mut st, 1.0, &cfg)).collect();
        assert_eq!(
            actions,
            vec![
                ScheduleAction::Continue,
                ScheduleAction::Continue,
                ScheduleAction::DropLr,
                ScheduleAction::Continue,
                ScheduleAction::Continue,
                ScheduleAction::Stop,
            ]
        );
        assert_eq!(st.lr_drops_applied, 1);
    }

    #[test]
    fn schedule_sub_threshold_change_is_not_improvement() {
        let cfg = TrainConfig::classification();
        let mut st = EarlyStopState::default();
        schedule_update(&mut st, 1.0, &cfg);
        schedule_update(&mut st, 1.0 - 5e-7, &cfg);
        assert_eq!(st.epochs_since_improve, 1);
    }

    #[test]
    fn schedule_can_disable_lr_drop() {
        let cfg = TrainConfig {
            lr_drop_enabled: false,
            ..TrainConfig::classification()
        };
        let mut st = EarlyStopState::default();
        schedule_update(&mut st, 1.0, &cfg);
        let actions: Vec<_> = (0..6).map(|_| schedule_update(&mut st, 2.0, &cfg)).collect();
        assert!(!actions.contains(&ScheduleAction::DropLr));
        assert_eq!(actions[5], ScheduleAction::Stop);
    }

    #[test]
    fn config_kv_round_trip() {
        let mut cfg = TrainConfig::segmentation();
        cfg.seed = 99;
        cfg.learning_rate = 0.25;
        let mut back = TrainConfig::classification();
        for (k, v) in cfg.to_kv() {
            assert!(back.set(&k, &v).unwrap());
        }
        assert_eq!(back, cfg);
        assert!(!back.set("family", "fire").unwrap());
        assert!(back.set("batch_size", "four").is_err());
    }

    #[test]
    fn validation() {
        assert!(TrainConfig::segmentation().validate().is_ok());
        let bad = TrainConfig {
            lr_patience: 0,
            ..TrainConfig::segmentation()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            lr_drop_factor: 1.0,
            ..TrainConfig::segmentation()
        };
        assert!(bad.validate().is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn stop_within_patience_of_last_improvement(losses in proptest::collection::vec(0.0f64..2.0, 1..60)) {
                let cfg = TrainConfig::classification();
                let mut st = EarlyStopState::default();
                let mut since = 0usize;
                for l in losses {
                    let improved = l < st.best_val_loss - IMPROVEMENT_THRESHOLD;
                    let action = schedule_update(&mut st, l, &cfg);
                    since = if improved { 0 } else { since + 1 };
                    prop_assert_eq!(action == ScheduleAction::Stop, since >= cfg.stop_patience);
                    if action == ScheduleAction::Stop { break; }
                }
            }
        }
    }
}
