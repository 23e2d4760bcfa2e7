//! Joint training of every switch on one shared weight store.
//!
//! One iteration (wide modes): clear grads; wide switch from labels; full
//! `[1.0]x` switch distilled from the wide switch's predictions; every other
//! switch distilled from the wide predictions plus, with `beta > 0`, the full
//! switch's pre-head activations; then a single optimizer step. Each switch
//! gets its own tape, so gradients from all of them accumulate in the shared
//! parameter store before the step.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::Graph;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::losses::{ce_loss, kd_act_loss, kd_loss, one_hot};
use crate::model::{ElasticModel, NormMode};
use crate::norm::{calibrate, CalibrationOptions};
use crate::optim::{LrSchedule, Sgd, SgdConfig};
use crate::switch::SwitchSpec;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    /// Wide-model distillation with activation matching.
    WideIpkdA,
    /// Wide-model distillation of predictions only.
    WideIpkd,
    /// Distillation from the `[1.0]x` switch; no wide switch.
    Ipkd,
    /// Every switch trained from labels.
    NoKd,
    /// Randomly sampled single-path widths distilled from `[1.0]x`.
    UsBaseline,
}

impl TrainMode {
    pub fn uses_wide(self) -> bool {
        matches!(self, TrainMode::WideIpkdA | TrainMode::WideIpkd)
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim() {
            "wide_ipkd_a" => TrainMode::WideIpkdA,
            "wide_ipkd" => TrainMode::WideIpkd,
            "ipkd" => TrainMode::Ipkd,
            "no_kd" => TrainMode::NoKd,
            "us_baseline" => TrainMode::UsBaseline,
            other => {
                return Err(Error::Invalid(format!(
                    "unknown mode {other:?} (wide_ipkd_a, wide_ipkd, ipkd, no_kd, us_baseline)"
                )))
            }
        })
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainMode::WideIpkdA => "wide_ipkd_a",
            TrainMode::WideIpkd => "wide_ipkd",
            TrainMode::Ipkd => "ipkd",
            TrainMode::NoKd => "no_kd",
            TrainMode::UsBaseline => "us_baseline",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainerConfig {
    pub switches: Vec<SwitchSpec>,
    pub wide: SwitchSpec,
    pub beta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: SgdConfig,
    pub schedule: LrSchedule,
    pub seed: u64,
    pub mode: TrainMode,
    /// Widths sampled per iteration in `us_baseline` mode.
    pub us_samples: usize,
    /// Record wall-clock milliseconds in metrics; off gives byte-stable CSVs.
    pub wall_clock: bool,
    /// Training samples used for the throwaway calibration behind per-epoch
    /// eval accuracy.
    pub eval_calibration_samples: usize,
    pub check_finite: bool,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        let p = |s: &str| s.parse::<SwitchSpec>().expect("literal switch");
        Self {
            switches: vec![p("[1.2]x"), p("[1.0]x"), p("[0.5,0.5]x"), p("[4x0.25]x")],
            wide: p("[1.2]x"),
            beta: 1.0,
            epochs: 8,
            batch_size: 32,
            optimizer: SgdConfig::default(),
            schedule: LrSchedule::Linear,
            seed: 1,
            mode: TrainMode::WideIpkdA,
            us_samples: 2,
            wall_clock: true,
            eval_calibration_samples: 512,
            check_finite: false,
        }
    }
}

impl TrainerConfig {
    /// Checks every rule and reports all violations together.
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        let full = SwitchSpec::full();
        let has = |s: &SwitchSpec| self.switches.contains(s);
        if self.switches.is_empty() {
            bad.push("switch list is empty".to_string());
        }
        if self.mode.uses_wide() {
            if self.wide.len() != 1 || self.wide.total() < 1.0 {
                bad.push(format!("wide switch {} must be a single width >= 1.0", self.wide));
            }
            if !has(&self.wide) {
                bad.push(format!("switch list must include the wide switch {} in mode {}", self.wide, self.mode));
            }
            if self.switches.iter().any(|s| *s != self.wide && *s != full) && !has(&full) {
                bad.push(format!("switch list must include [1.0]x (activation teacher) in mode {}", self.mode));
            }
            for s in self.switches.iter().filter(|s| **s != self.wide) {
                if s.total() > self.wide.total() + 1e-9 {
                    bad.push(format!("switch {s} is wider than the wide switch {}", self.wide));
                }
            }
        }
        if matches!(self.mode, TrainMode::Ipkd | TrainMode::UsBaseline) && !has(&full) {
            bad.push(format!("switch list must include [1.0]x (teacher) in mode {}", self.mode));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            bad.push(format!("beta must be finite and >= 0, got {}", self.beta));
        }
        if self.epochs == 0 {
            bad.push("epochs must be >= 1".into());
        }
        if self.batch_size == 0 {
            bad.push("batch_size must be >= 1".into());
        }
        if !(self.optimizer.lr >= 0.0) {
            bad.push(format!("lr must be >= 0, got {}", self.optimizer.lr));
        }
        if !(0.0..1.0).contains(&self.optimizer.momentum) {
            bad.push(format!("momentum must be in [0, 1), got {}", self.optimizer.momentum));
        }
        if self.mode == TrainMode::UsBaseline && self.us_samples == 0 {
            bad.push("us_samples must be >= 1".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad))
        }
    }

    /// Flat key/value echo, stored in checkpoints.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let switches: Vec<String> = self.switches.iter().map(SwitchSpec::canonical).collect();
        vec![
            ("switches".into(), switches.join(";")),
            ("wide".into(), self.wide.canonical()),
            ("mode".into(), self.mode.to_string()),
            ("beta".into(), self.beta.to_string()),
            ("epochs".into(), self.epochs.to_string()),
            ("batch_size".into(), self.batch_size.to_string()),
            ("lr".into(), self.optimizer.lr.to_string()),
            ("momentum".into(), self.optimizer.momentum.to_string()),
            ("weight_decay".into(), self.optimizer.weight_decay.to_string()),
            ("nesterov".into(), self.optimizer.nesterov.to_string()),
            ("schedule".into(), self.schedule.to_string()),
            ("seed".into(), self.seed.to_string()),
        ]
    }
}

/// Everything needed to continue training bitwise-identically.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub iteration: usize,
    pub epoch: usize,
    /// Mean loss per switch over the last completed epoch.
    pub running_loss: BTreeMap<String, f64>,
    pub optimizer: Sgd<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SwitchLoss {
    pub switch: String,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetric {
    pub epoch: usize,
    pub switch: String,
    pub train_loss: f64,
    pub eval_acc: Option<f64>,
    pub lr: f64,
    pub wall_ms: u64,
}

pub const METRICS_HEADER: &str = "epoch,switch,train_loss,eval_acc,lr,wall_ms";

pub fn metrics_csv(rows: &[EpochMetric]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let acc = r.eval_acc.map(|a| format!("{a:.6}")).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{:.6},{},{:.6},{}\n",
            r.epoch, r.switch, r.train_loss, acc, r.lr, r.wall_ms
        ));
    }
    out
}

pub struct Trainer {
    pub config: TrainerConfig,
    pub state: TrainState,
}

fn check_finite(switch: &str, value: f64, iteration: usize) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss {
            switch: switch.to_string(),
            detail: format!("loss = {value} at iteration {iteration}"),
        })
    }
}

impl Trainer {
    pub fn new(config: TrainerConfig, model: &ElasticModel<f32>) -> Result<Self> {
        config.validate()?;
        for s in &config.switches {
            model.resolve(s)?;
        }
        let optimizer = Sgd::new(config.optimizer, model.params());
        Ok(Self {
            config,
            state: TrainState {
                iteration: 0,
                epoch: 0,
                running_loss: BTreeMap::new(),
                optimizer,
            },
        })
    }

    pub fn resume(config: TrainerConfig, state: TrainState) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, state })
    }

    fn graph(&self) -> Graph<f32> {
        Graph::new().with_finite_check(self.config.check_finite)
    }

    /// Runs one switch on its own tape and back-propagates `loss_fn`'s loss.
    /// Returns the loss value, the detached predictions and (optionally) the
    /// positional activation vector.
    fn run_switch<F>(
        &self,
        model: &mut ElasticModel<f32>,
        spec: &SwitchSpec,
        images: &Tensor<f32>,
        with_activation: bool,
        loss_fn: F,
    ) -> Result<(f64, Tensor<f32>, Option<Tensor<f32>>)>
    where
        F: FnOnce(&mut Graph<f32>, crate::autograd::Var, Option<crate::autograd::Var>) -> Result<crate::autograd::Var>,
    {
        let mut g = self.graph();
        let x = g.constant(images.clone());
        let vars = model.switch_graph(&mut g, spec, x, NormMode::Train, with_activation)?;
        let probs = g.softmax(vars.logits)?;
        let loss = loss_fn(&mut g, probs, vars.activation)?;
        let value = g.value(loss).data()[0] as f64;
        check_finite(&spec.canonical(), value, self.state.iteration)?;
        let preds = g.value(probs).clone();
        let act = vars.activation.map(|a| g.value(a).clone());
        g.backward(loss, model.params_mut())?;
        Ok((value, preds, act))
    }

    /// Steps up to (not including) the optimizer step: zero grads, then every
    /// switch's forward + backward in the fixed order wide, full, list order.
    pub fn accumulate(&self, model: &mut ElasticModel<f32>, images: &Tensor<f32>, labels: &[usize]) -> Result<Vec<SwitchLoss>> {
        model.params_mut().zero_grad();
        let classes = model.classes();
        let targets: Tensor<f32> = one_hot(labels, classes)?;
        let full = SwitchSpec::full();
        let cfg = &self.config;
        let mut losses = Vec::new();
        let from_labels = |g: &mut Graph<f32>, p, _a: Option<_>| {
            let t = g.constant(targets.clone());
            ce_loss(g, p, t)
        };

        match cfg.mode {
            TrainMode::WideIpkdA | TrainMode::WideIpkd => {
                let (l, wide_pred, _) = self.run_switch(model, &cfg.wide, images, false, from_labels)?;
                losses.push(SwitchLoss { switch: cfg.wide.canonical(), loss: l });
                let use_act = cfg.mode == TrainMode::WideIpkdA && cfg.beta > 0.0;
                let mut full_act = None;
                if cfg.switches.contains(&full) {
                    let (l, _, act) = self.run_switch(model, &full, images, use_act, |g, p, _| {
                        let t = g.constant(wide_pred.clone());
                        kd_loss(g, p, t)
                    })?;
                    losses.push(SwitchLoss { switch: full.canonical(), loss: l });
                    full_act = act;
                }
                for spec in cfg.switches.iter().filter(|s| **s != cfg.wide && **s != full) {
                    let (l, _, _) = self.run_switch(model, spec, images, use_act, |g, p, a| {
                        let t = g.constant(wide_pred.clone());
                        match (a, &full_act) {
                            (Some(a), Some(teacher)) => {
                                let ta = g.constant(teacher.clone());
                                kd_act_loss(g, p, t, a, ta, cfg.beta as f32)
                            }
                            _ => kd_loss(g, p, t),
                        }
                    })?;
                    losses.push(SwitchLoss { switch: spec.canonical(), loss: l });
                }
            }
            TrainMode::Ipkd | TrainMode::UsBaseline => {
                let (l, full_pred, _) = self.run_switch(model, &full, images, false, from_labels)?;
                losses.push(SwitchLoss { switch: full.canonical(), loss: l });
                let students: Vec<SwitchSpec> = if cfg.mode == TrainMode::Ipkd {
                    cfg.switches.iter().filter(|s| **s != full).cloned().collect()
                } else {
                    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (self.state.iteration as u64).wrapping_mul(0x9e37_79b9));
                    (0..cfg.us_samples)
                        .map(|_| SwitchSpec::single((rng.gen_range(0.25..1.0) * 40.0_f64).round() / 40.0))
                        .collect::<Result<_>>()?
                };
                for spec in &students {
                    let (l, _, _) = self.run_switch(model, spec, images, false, |g, p, _| {
                        let t = g.constant(full_pred.clone());
                        kd_loss(g, p, t)
                    })?;
                    let name = if cfg.mode == TrainMode::UsBaseline {
                        "us_sampled".to_string()
                    } else {
                        spec.canonical()
                    };
                    losses.push(SwitchLoss { switch: name, loss: l });
                }
            }
            TrainMode::NoKd => {
                for spec in &cfg.switches {
                    let (l, _, _) = self.run_switch(model, spec, images, false, from_labels)?;
                    losses.push(SwitchLoss { switch: spec.canonical(), loss: l });
                }
            }
        }
        Ok(losses)
    }

    /// One full iteration: [`Trainer::accumulate`] then a single optimizer step.
    pub fn train_iteration(
        &mut self,
        model: &mut ElasticModel<f32>,
        images: &Tensor<f32>,
        labels: &[usize],
        lr: f64,
    ) -> Result<Vec<SwitchLoss>> {
        let losses = self.accumulate(model, images, labels)?;
        self.state.optimizer.step(model.params_mut(), lr);
        self.state.iteration += 1;
        Ok(losses)
    }

    pub fn total_iterations(&self, train_len: usize) -> usize {
        self.config.epochs * train_len.div_ceil(self.config.batch_size.max(1))
    }

    /// Runs the remaining epochs. Calibration for the stored model is a
    /// separate phase; per-epoch eval accuracy uses a throwaway calibration on
    /// the first training samples.
    pub fn train(&mut self, model: &mut ElasticModel<f32>, train: &Dataset, eval: Option<&Dataset>) -> Result<Vec<EpochMetric>> {
        self.train_until(model, train, eval, self.config.epochs)
    }

    /// Like [`Trainer::train`] but stops after epoch `stop - 1`; the learning
    /// rate schedule still spans the configured number of epochs.
    pub fn train_until(
        &mut self,
        model: &mut ElasticModel<f32>,
        train: &Dataset,
        eval: Option<&Dataset>,
        stop: usize,
    ) -> Result<Vec<EpochMetric>> {
        if train.is_empty() {
            return Err(Error::Dataset("empty training set".into()));
        }
        let total = self.total_iterations(train.len());
        let mut metrics = Vec::new();
        while self.state.epoch < self.config.epochs.min(stop) {
            let epoch = self.state.epoch;
            let started = Instant::now();
            let batches = train.batch_indices(self.config.batch_size, Some(self.config.seed.wrapping_add(epoch as u64)));
            let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
            let mut order: Vec<String> = Vec::new();
            let mut lr = 0.0;
            for idx in &batches {
                let (images, labels) = train.gather(idx)?;
                lr = self.config.schedule.lr_at(self.config.optimizer.lr, self.state.iteration, total, epoch);
                for sl in self.train_iteration(model, &images, &labels, lr)? {
                    if !sums.contains_key(&sl.switch) {
                        order.push(sl.switch.clone());
                    }
                    let e = sums.entry(sl.switch).or_insert((0.0, 0));
                    e.0 += sl.loss * idx.len() as f64;
                    e.1 += idx.len();
                }
            }
            let wall_ms = if self.config.wall_clock {
                started.elapsed().as_millis() as u64
            } else {
                0
            };
            let accs = match eval {
                Some(data) => Some(self.eval_accuracies(model, train, data)?),
                None => None,
            };
            self.state.running_loss.clear();
            for name in order {
                let (s, n) = sums[&name];
                let loss = s / n as f64;
                self.state.running_loss.insert(name.clone(), loss);
                let eval_acc = accs.as_ref().and_then(|a| a.get(&name).copied());
                metrics.push(EpochMetric {
                    epoch,
                    switch: name,
                    train_loss: loss,
                    eval_acc,
                    lr,
                    wall_ms,
                });
            }
            log::info!(
                "epoch {epoch}: {}",
                self.state
                    .running_loss
                    .iter()
                    .map(|(k, v)| format!("{k}={v:.4}"))
                    .collect::<Vec<_>>()
                    .join(" ")
            );
            self.state.epoch += 1;
        }
        Ok(metrics)
    }

    fn eval_accuracies(&self, model: &ElasticModel<f32>, train: &Dataset, eval: &Dataset) -> Result<BTreeMap<String, f64>> {
        let calib = train.head(self.config.eval_calibration_samples)?;
        let stats = calibrate(model, &self.config.switches, &calib.images, CalibrationOptions::default())?;
        let mut tmp = model.clone();
        tmp.attach_stats(stats);
        self.config
            .switches
            .iter()
            .map(|s| Ok((s.canonical(), evaluate(&tmp, s, eval)?)))
            .collect()
    }
}

/// Top-1 accuracy of the fused logits using the model's attached statistics.
pub fn evaluate(model: &ElasticModel<f32>, spec: &SwitchSpec, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Dataset("empty evaluation set".into()));
    }
    let mut correct = 0usize;
    for idx in data.batch_indices(256, None) {
        let (images, labels) = data.gather(&idx)?;
        let out = model.forward_switch(spec, &images, NormMode::Eval)?;
        correct += predictions(&out.logits)?
            .iter()
            .zip(&labels)
            .filter(|(p, l)| p == l)
            .count();
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Row-wise argmax of `[B, C]` logits.
pub fn predictions(logits: &Tensor<f32>) -> Result<Vec<usize>> {
    let [_, c] = logits.dims2("predictions")?;
    Ok(logits
        .data()
        .chunks(c)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect())
}
