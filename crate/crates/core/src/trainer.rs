//! Optimization loop.
//!
//! Each step draws a mode (cfg with probability `cfg_ratio`), builds a batch
//! whose text is dropped for every sample on cfg steps, evaluates the
//! combined loss, backpropagates, clips the global gradient norm, applies
//! AdamW with decoupled weight decay under a warmup-cosine schedule, and
//! updates the EMA copy of the weights. All randomness for step `s` comes
//! from streams keyed by `(seed, s)`, so a run resumed from a checkpoint
//! replays the uninterrupted run exactly.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Archive, CheckpointError};
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossConfig, TrainMode};
use crate::model::{ForwardOptions, Model, ModelConfig, ModelParams};
use crate::rng::{self, Rng};
use crate::synthdata::{Grammar, GrammarSpec};
use crate::tensor::{PoolMode, Reduction, Tape, Tensor};

pub const ADAM_EPS: f64 = 1e-8;
pub const METRICS_HEADER: &str = "step,mode,lr,loss_total,loss_ce,loss_rr,grad_norm,clip_scale";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub peak_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub ema_decay: f64,
    pub cfg_ratio: f64,
    pub lambda: f64,
    pub batch_size: usize,
    pub pool_mode: PoolMode,
    pub ce_reduction: Reduction,
    pub rr_in_conditional: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_steps: 3000,
            warmup_steps: 120,
            peak_lr: 3e-3,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.1,
            grad_clip: 1.0,
            ema_decay: 0.99,
            cfg_ratio: 0.1,
            lambda: 3.0,
            batch_size: 16,
            pool_mode: PoolMode::Max,
            ce_reduction: Reduction::Mean,
            rr_in_conditional: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(0.0..=1.0).contains(&self.cfg_ratio) {
            return fail(format!("cfg_ratio must be in [0, 1], got {}", self.cfg_ratio));
        }
        if self.total_steps == 0 || self.warmup_steps >= self.total_steps {
            return fail(format!(
                "warmup_steps ({}) must be below total_steps ({})",
                self.warmup_steps, self.total_steps
            ));
        }
        // Batches are built with at least two samples even when the
        // regularizer is off, so the same check covers both cases.
        if self.batch_size < 2 {
            return fail(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return fail(format!("lambda must be a finite non-negative number, got {}", self.lambda));
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2), ("ema_decay", self.ema_decay)] {
            if !(0.0..=1.0).contains(&v) {
                return fail(format!("{name} must be in [0, 1], got {v}"));
            }
        }
        if self.peak_lr <= 0.0 || self.grad_clip <= 0.0 || self.weight_decay < 0.0 {
            return fail("peak_lr and grad_clip must be positive, weight_decay non-negative".into());
        }
        Ok(())
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            lambda: self.lambda,
            pool: self.pool_mode,
            reduction: self.ce_reduction,
            rr_in_conditional: self.rr_in_conditional,
        }
    }
}

/// Linear warmup from 0 to `peak_lr`, then cosine decay to 0 at
/// `total_steps`.
pub fn lr_at_step(step: usize, cfg: &TrainConfig) -> Result<f64> {
    if step > cfg.total_steps {
        return Err(Error::Config(format!("step {step} is past total_steps {}", cfg.total_steps)));
    }
    if step < cfg.warmup_steps {
        return Ok(cfg.peak_lr * step as f64 / cfg.warmup_steps as f64);
    }
    let progress = (step - cfg.warmup_steps) as f64 / (cfg.total_steps - cfg.warmup_steps) as f64;
    Ok(cfg.peak_lr * (1.0 + (PI * progress).cos()) / 2.0)
}

pub fn choose_mode(r: &mut Rng, cfg_ratio: f64) -> TrainMode {
    let u: f64 = r.gen();
    if u < cfg_ratio {
        TrainMode::Cfg
    } else {
        TrainMode::Conditional
    }
}

/// Scales every gradient by `max_norm / norm` when the global L2 norm
/// exceeds `max_norm`. Returns `(norm before clipping, scale applied)`.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> (f64, f64) {
    let norm = grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= scale);
        }
        (norm, scale)
    } else {
        (norm, 1.0)
    }
}

/// `ema <- decay * ema + (1 - decay) * params`, elementwise.
pub fn ema_update(ema: &mut ModelParams, params: &ModelParams, decay: f64) {
    for (e, p) in ema.tensors.iter_mut().zip(&params.tensors) {
        for (a, b) in e.data_mut().iter_mut().zip(p.data()) {
            *a = decay * *a + (1.0 - decay) * b;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

/// First and second moment buffers plus the step count used for bias
/// correction.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: ModelParams,
    pub v: ModelParams,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        Self { m: params.zeros_like(), v: params.zeros_like(), t: 0 }
    }
}

/// One bias-corrected Adam step with decoupled weight decay
/// (`p <- p - lr * wd * p`) applied to the tensors flagged in `decay`.
pub fn adamw_step(
    params: &mut ModelParams,
    adam: &mut AdamState,
    grads: &[Tensor],
    decay: &[bool],
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    if grads.len() != params.tensors.len() || decay.len() != params.tensors.len() {
        return Err(Error::Dimension(format!("{} gradients for {} parameters", grads.len(), params.tensors.len())));
    }
    for (i, g) in grads.iter().enumerate() {
        if g.shape() != params.tensors[i].shape() {
            return Err(Error::Dimension(format!("gradient for {} has shape {:?}", params.names[i], g.shape())));
        }
        if !g.all_finite() {
            return Err(Error::NonFiniteGradient(params.names[i].clone()));
        }
    }
    adam.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(adam.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(adam.t as i32);
    for (i, g) in grads.iter().enumerate() {
        let shrink = if decay[i] { 1.0 - lr * cfg.weight_decay } else { 1.0 };
        let p = params.tensors[i].data_mut();
        let m = adam.m.tensors[i].data_mut();
        let v = adam.v.tensors[i].data_mut();
        for j in 0..p.len() {
            let gj = g.data()[j];
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            p[j] = p[j] * shrink - lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Everything needed to continue a run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    pub adam: AdamState,
    pub ema: ModelParams,
    /// Number of completed steps; also selects the next step's random streams.
    pub step: usize,
}

/// One row of the metrics stream.
#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub mode: TrainMode,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_ce: f64,
    pub loss_rr: Option<f64>,
    pub grad_norm: f64,
    pub clip_scale: f64,
}

impl StepMetrics {
    pub fn csv_row(&self) -> String {
        let rr = self.loss_rr.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step,
            self.mode.as_str(),
            self.lr,
            self.loss_total,
            self.loss_ce,
            rr,
            self.grad_norm,
            self.clip_scale
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CheckpointHeader {
    grammar: GrammarSpec,
    model: ModelConfig,
    train: TrainConfig,
    step: usize,
    adam_t: u64,
}

pub struct Trainer {
    grammar: Grammar,
    model: Model,
    config: TrainConfig,
    state: TrainState,
    decay_mask: Vec<bool>,
}

impl Trainer {
    pub fn new(grammar: GrammarSpec, model: ModelConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let grammar = Grammar::new(grammar)?;
        check_compatible(grammar.spec(), &model)?;
        let model = Model::new(model)?;
        let params = model.init_params(model.config().seed);
        let state = TrainState { adam: AdamState::new(&params), ema: params.clone(), params, step: 0 };
        Ok(Self::assemble(grammar, model, config, state))
    }

    fn assemble(grammar: Grammar, model: Model, config: TrainConfig, state: TrainState) -> Self {
        // Matrices and embedding tables decay; biases and norm gains do not.
        let decay_mask = state.params.tensors.iter().map(|t| t.rank() >= 2).collect();
        Self { grammar, model, config, state, decay_mask }
    }

    pub fn grammar(&self) -> &Grammar {
        &self.grammar
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn is_done(&self) -> bool {
        self.state.step >= self.config.total_steps
    }

    pub fn step(&mut self) -> Result<StepMetrics> {
        let (metrics, grads) = self.compute_step()?;
        self.apply(metrics, grads)
    }

    /// Runs the forward/backward half of a step and returns the metrics and
    /// clipped gradients without touching the state.
    fn compute_step(&self) -> Result<(StepMetrics, Vec<Tensor>)> {
        let cfg = &self.config;
        let s = self.state.step;
        if s >= cfg.total_steps {
            return Err(Error::Config(format!("run already finished {} steps", cfg.total_steps)));
        }
        let mode = choose_mode(&mut rng::stream(cfg.seed, &[rng::LABEL_MODE, s as u64]), cfg.cfg_ratio);
        let batch_seed = rng::derive(cfg.seed, &[rng::LABEL_BATCH, s as u64]);
        let batch = self.grammar.make_batch(batch_seed, cfg.batch_size, mode == TrainMode::Cfg)?;

        let mut tape = Tape::new();
        let vars = self.model.leaves(&mut tape, &self.state.params);
        let opts = ForwardOptions { dropout_seed: Some(rng::derive(cfg.seed, &[rng::LABEL_DROPOUT, s as u64])) };
        let out = self.model.forward(&mut tape, &vars, &batch, opts)?;
        let terms = total_loss(&mut tape, &out, &batch, mode, &cfg.loss_config())?;
        let loss_total = tape.value(terms.total).item()?;
        if !loss_total.is_finite() {
            return Err(Error::Divergence { step: s + 1, reason: format!("loss is {loss_total}") });
        }
        tape.backward(terms.total)?;
        let mut grads: Vec<Tensor> = vars.iter().map(|&v| tape.grad_tensor(v)).collect();
        if let Some(i) = grads.iter().position(|g| !g.all_finite()) {
            return Err(Error::Divergence {
                step: s + 1,
                reason: Error::NonFiniteGradient(self.state.params.names[i].clone()).to_string(),
            });
        }
        let (grad_norm, clip_scale) = clip_grad_norm(&mut grads, cfg.grad_clip);
        let metrics = StepMetrics {
            step: s + 1,
            mode,
            lr: lr_at_step(s + 1, cfg)?,
            loss_total,
            loss_ce: tape.value(terms.ce).item()?,
            loss_rr: terms.rr.map(|v| tape.value(v).item()).transpose()?,
            grad_norm,
            clip_scale,
        };
        Ok((metrics, grads))
    }

    fn apply(&mut self, metrics: StepMetrics, grads: Vec<Tensor>) -> Result<StepMetrics> {
        let cfg = &self.config;
        let adam = AdamWConfig { beta1: cfg.beta1, beta2: cfg.beta2, weight_decay: cfg.weight_decay, eps: ADAM_EPS };
        adamw_step(&mut self.state.params, &mut self.state.adam, &grads, &self.decay_mask, metrics.lr, &adam)?;
        ema_update(&mut self.state.ema, &self.state.params, cfg.ema_decay);
        self.state.step += 1;
        Ok(metrics)
    }

    /// Gradients the next step would apply, after clipping; for inspection.
    pub fn peek_gradients(&self) -> Result<(StepMetrics, Vec<Tensor>)> {
        self.compute_step()
    }

    /// Steps until `total_steps` or `max_steps` more steps, whichever comes
    /// first, handing each metrics row to `sink`.
    pub fn run(&mut self, max_steps: Option<usize>, mut sink: impl FnMut(&StepMetrics) -> Result<()>) -> Result<()> {
        let mut budget = max_steps.unwrap_or(usize::MAX);
        while !self.is_done() && budget > 0 {
            let m = self.step()?;
            sink(&m)?;
            budget -= 1;
        }
        Ok(())
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let header = CheckpointHeader {
            grammar: self.grammar.spec().clone(),
            model: self.model.config().clone(),
            train: self.config.clone(),
            step: self.state.step,
            adam_t: self.state.adam.t,
        };
        let mut arrays = Vec::new();
        let groups = [
            ("param", &self.state.params),
            ("adam_m", &self.state.adam.m),
            ("adam_v", &self.state.adam.v),
            ("ema", &self.state.ema),
        ];
        for (prefix, set) in groups {
            for (name, t) in set.names.iter().zip(&set.tensors) {
                arrays.push((format!("{prefix}/{name}"), t.clone()));
            }
        }
        Ok(Archive { header: serde_json::to_string(&header)?, arrays })
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        self.to_archive()?.save(path)?;
        Ok(())
    }

    pub fn from_archive(archive: &Archive) -> Result<Self> {
        let header: CheckpointHeader = serde_json::from_str(&archive.header)
            .map_err(|e| CheckpointError::Malformed(format!("header: {e}")))?;
        header.train.validate()?;
        let grammar = Grammar::new(header.grammar)?;
        check_compatible(grammar.spec(), &header.model)?;
        let model = Model::new(header.model)?;
        let names = model.param_names();
        let group = |prefix: &str| -> Result<ModelParams> {
            let tensors = names
                .iter()
                .map(|n| {
                    archive
                        .get(&format!("{prefix}/{n}"))
                        .cloned()
                        .ok_or_else(|| CheckpointError::Malformed(format!("missing array {prefix}/{n}")).into())
                })
                .collect::<Result<Vec<_>>>()?;
            let set = ModelParams { names: names.clone(), tensors };
            model.check_params(&set).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
            Ok(set)
        };
        let state = TrainState {
            params: group("param")?,
            adam: AdamState { m: group("adam_m")?, v: group("adam_v")?, t: header.adam_t },
            ema: group("ema")?,
            step: header.step,
        };
        if archive.arrays.len() != 4 * names.len() {
            return Err(CheckpointError::Malformed("unexpected extra arrays".into()).into());
        }
        Ok(Self::assemble(grammar, model, header.train, state))
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }
}

pub fn check_compatible(grammar: &GrammarSpec, model: &ModelConfig) -> Result<()> {
    if model.streams != grammar.streams
        || model.audio_vocab != grammar.audio_vocab
        || model.text_dim != grammar.text_dim
        || model.max_len < grammar.audio_len()
    {
        return Err(Error::Config("model config does not match the grammar's stream, vocabulary or length sizes".into()));
    }
    Ok(())
}

/// Append-only CSV writer for [`StepMetrics`].
pub struct MetricsWriter<W: Write> {
    out: W,
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(mut out: W) -> Result<Self> {
        writeln!(out, "{METRICS_HEADER}")?;
        Ok(Self { out })
    }

    /// Continues an existing stream without writing the header again.
    pub fn append(out: W) -> Self {
        Self { out }
    }

    pub fn write(&mut self, m: &StepMetrics) -> Result<()> {
        writeln!(self.out, "{}", m.csv_row())?;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}
