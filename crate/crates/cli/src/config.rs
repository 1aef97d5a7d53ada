//! Flat JSON run configuration covering the grammar, model, training and
//! sampling settings. Every key is optional; unknown keys are rejected.

use std::path::Path;

use rrlm::model::ModelConfig;
use rrlm::sampler::SampleConfig;
use rrlm::synthdata::GrammarSpec;
use rrlm::tensor::{PoolMode, Reduction};
use rrlm::trainer::TrainConfig;
use rrlm::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub n_event_types: usize,
    pub n_attributes: usize,
    pub motif_len: usize,
    pub streams: usize,
    pub audio_vocab: usize,
    pub text_vocab: usize,
    pub text_dim: usize,
    pub noise_prob: f64,
    pub max_events: usize,
    pub grammar_seed: u64,

    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub dropout_rate: f64,

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
    pub checkpoint_every: usize,

    pub top_k: usize,
    pub temperature: f64,
    pub guidance_scale: f64,
    pub chunk_size: usize,
    pub eval_prompts: usize,

    /// Seed for initialization, training order, sampling and evaluation.
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let g = GrammarSpec::default();
        let m = ModelConfig::for_grammar(&g);
        let t = TrainConfig::default();
        let s = SampleConfig::default();
        Self {
            n_event_types: g.n_event_types,
            n_attributes: g.n_attributes,
            motif_len: g.motif_len,
            streams: g.streams,
            audio_vocab: g.audio_vocab,
            text_vocab: g.text_vocab,
            text_dim: g.text_dim,
            noise_prob: g.noise_prob,
            max_events: g.max_events,
            grammar_seed: g.seed,
            d_model: m.d_model,
            n_layers: m.n_layers,
            n_heads: m.n_heads,
            d_ff: m.d_ff,
            dropout_rate: m.dropout_rate,
            total_steps: t.total_steps,
            warmup_steps: t.warmup_steps,
            peak_lr: t.peak_lr,
            beta1: t.beta1,
            beta2: t.beta2,
            weight_decay: t.weight_decay,
            grad_clip: t.grad_clip,
            ema_decay: t.ema_decay,
            cfg_ratio: t.cfg_ratio,
            lambda: t.lambda,
            batch_size: t.batch_size,
            pool_mode: t.pool_mode,
            ce_reduction: t.ce_reduction,
            rr_in_conditional: t.rr_in_conditional,
            checkpoint_every: 500,
            top_k: s.top_k,
            temperature: s.temperature,
            guidance_scale: s.guidance_scale,
            chunk_size: s.chunk_size,
            eval_prompts: 200,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Canonical form: pretty JSON in field order with a trailing newline.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn validate(&self) -> Result<()> {
        self.grammar().validate()?;
        self.model().validate()?;
        self.train().validate()?;
        self.sample().validate(self.audio_vocab)?;
        if self.eval_prompts == 0 || self.checkpoint_every == 0 {
            return Err(Error::Config("eval_prompts and checkpoint_every must be positive".into()));
        }
        Ok(())
    }

    pub fn grammar(&self) -> GrammarSpec {
        GrammarSpec {
            n_event_types: self.n_event_types,
            n_attributes: self.n_attributes,
            motif_len: self.motif_len,
            streams: self.streams,
            audio_vocab: self.audio_vocab,
            text_vocab: self.text_vocab,
            text_dim: self.text_dim,
            noise_prob: self.noise_prob,
            max_events: self.max_events,
            seed: self.grammar_seed,
        }
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            dropout_rate: self.dropout_rate,
            seed: self.seed,
            ..ModelConfig::for_grammar(&self.grammar())
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            total_steps: self.total_steps,
            warmup_steps: self.warmup_steps,
            peak_lr: self.peak_lr,
            beta1: self.beta1,
            beta2: self.beta2,
            weight_decay: self.weight_decay,
            grad_clip: self.grad_clip,
            ema_decay: self.ema_decay,
            cfg_ratio: self.cfg_ratio,
            lambda: self.lambda,
            batch_size: self.batch_size,
            pool_mode: self.pool_mode,
            ce_reduction: self.ce_reduction,
            rr_in_conditional: self.rr_in_conditional,
            seed: self.seed,
        }
    }

    pub fn sample(&self) -> SampleConfig {
        SampleConfig {
            top_k: self.top_k,
            temperature: self.temperature,
            guidance_scale: self.guidance_scale,
            seed: self.seed,
            chunk_size: self.chunk_size,
        }
    }
}
