//! Autoregressive generation with top-k/temperature sampling and
//! classifier-free guidance.
//!
//! Every prompt runs twice per step inside one batch: once with its text and
//! once with the text dropped. The two logit vectors are mixed per stream,
//! filtered, and each stream draws its next token independently. Prompt `p`
//! draws from its own stream `(seed, p)`, so results do not depend on how
//! prompts are chunked into batches.

use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelParams};
use crate::rng::{self, Rng};
use crate::synthdata::{dump_dataset, Grammar, Scene, TokenBatch, TokenGrid};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleConfig {
    pub top_k: usize,
    pub temperature: f64,
    pub guidance_scale: f64,
    pub seed: u64,
    /// Prompts generated together in one forward batch.
    pub chunk_size: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self { top_k: 16, temperature: 1.0, guidance_scale: 3.0, seed: 0, chunk_size: 50 }
    }
}

impl SampleConfig {
    pub fn validate(&self, vocab: usize) -> Result<()> {
        if self.top_k == 0 || self.top_k > vocab {
            return Err(Error::Config(format!("top_k must be in [1, {vocab}], got {}", self.top_k)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if !(self.guidance_scale >= 0.0 && self.guidance_scale.is_finite()) {
            return Err(Error::Config(format!("guidance_scale must be non-negative, got {}", self.guidance_scale)));
        }
        if self.chunk_size == 0 {
            return Err(Error::Config("chunk_size must be positive".into()));
        }
        Ok(())
    }
}

/// Ids of the `k` largest logits, ties broken toward the lower id.
pub fn top_k_ids(logits: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > logits.len() {
        return Err(Error::Config(format!("top_k {k} out of range for {} logits", logits.len())));
    }
    let mut ids: Vec<usize> = (0..logits.len()).collect();
    ids.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    ids.truncate(k);
    ids.sort_unstable();
    Ok(ids)
}

/// Temperature-scaled softmax restricted to the top `k` logits; every other
/// id gets probability exactly 0.
pub fn top_k_filter(logits: &[f64], k: usize, temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    let keep = top_k_ids(logits, k)?;
    let max = keep.iter().map(|&i| logits[i] / temperature).fold(f64::NEG_INFINITY, f64::max);
    let mut probs = vec![0.0; logits.len()];
    let mut total = 0.0;
    for &i in &keep {
        let e = (logits[i] / temperature - max).exp();
        probs[i] = e;
        total += e;
    }
    probs.iter_mut().for_each(|p| *p /= total);
    Ok(probs)
}

/// Guided logits `uncond + gamma * (cond - uncond)`, evaluated as
/// `gamma * cond + (1 - gamma) * uncond` so that gamma 0 and 1 return the
/// inputs exactly.
pub fn cfg_combine(cond: &[f64], uncond: &[f64], gamma: f64) -> Result<Vec<f64>> {
    if cond.len() != uncond.len() {
        return Err(Error::Dimension(format!("cond has {} logits, uncond {}", cond.len(), uncond.len())));
    }
    Ok(cond.iter().zip(uncond).map(|(&c, &u)| gamma * c + (1.0 - gamma) * u).collect())
}

/// Inverse-CDF draw; only ids with non-zero probability can be returned.
pub fn draw(r: &mut Rng, probs: &[f64]) -> usize {
    let u: f64 = r.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// One sampling decision, reported to an optional observer.
#[derive(Clone, Debug)]
pub struct SampleEvent {
    pub prompt: usize,
    pub stream: usize,
    pub position: usize,
    pub retained: Vec<usize>,
    pub token: usize,
}

pub type Observer<'a> = &'a mut dyn FnMut(&SampleEvent);

/// Generates a full `[K, audio_len]` token grid for each prompt.
///
/// The heads have no end token, so the grid is sampled to the maximum
/// length; use [`apply_duration`] to cut it to the prompt's event count.
pub fn generate(
    model: &Model,
    params: &ModelParams,
    grammar: &Grammar,
    prompts: &[Scene],
    cfg: &SampleConfig,
    mut observer: Option<Observer<'_>>,
) -> Result<Vec<TokenGrid>> {
    let spec = grammar.spec();
    cfg.validate(spec.audio_vocab)?;
    for p in prompts {
        p.check(spec)?;
    }
    let mut out = Vec::with_capacity(prompts.len());
    for (c, chunk) in prompts.chunks(cfg.chunk_size).enumerate() {
        let first = c * cfg.chunk_size;
        let grids = generate_chunk(model, params, grammar, chunk, first, cfg, &mut observer)?;
        out.extend(grids);
    }
    Ok(out)
}

fn generate_chunk(
    model: &Model,
    params: &ModelParams,
    grammar: &Grammar,
    prompts: &[Scene],
    first: usize,
    cfg: &SampleConfig,
    observer: &mut Option<Observer<'_>>,
) -> Result<Vec<TokenGrid>> {
    let spec = grammar.spec();
    let (n, k_streams, len, vocab) = (prompts.len(), spec.streams, spec.audio_len(), spec.audio_vocab);
    let mut rngs: Vec<Rng> = (0..n).map(|p| rng::stream(cfg.seed, &[rng::LABEL_SAMPLE, (first + p) as u64])).collect();
    let mut grids = vec![TokenGrid::filled(k_streams, len, spec.pad_token()); n];

    let doubled: Vec<Scene> = prompts.iter().chain(prompts).cloned().collect();
    let (text, text_mask) = grammar.encode_texts(&doubled);
    let cfg_dropped: Vec<bool> = (0..2 * n).map(|b| b >= n).collect();

    for i in 0..len {
        // Position i only reads tokens before it, so the forward pass can
        // stop at i + 1.
        let t = i + 1;
        let mut audio_tokens = Vec::with_capacity(2 * n * k_streams * t);
        for b in 0..2 * n {
            let g = &grids[b % n];
            for k in 0..k_streams {
                audio_tokens.extend_from_slice(&g.stream(k)[..t]);
            }
        }
        let batch = TokenBatch {
            batch: 2 * n,
            streams: k_streams,
            audio_len: t,
            text_len: spec.text_len(),
            audio_tokens,
            text_embeddings: text.clone(),
            text_mask: text_mask.clone(),
            audio_mask: vec![true; 2 * n * t],
            cfg_dropped: cfg_dropped.clone(),
            scenes: doubled.clone(),
        };
        let (logits, _) = model.forward_values(params, &batch)?;
        let row = |b: usize, k: usize| {
            let start = ((b * k_streams + k) * t + i) * vocab;
            &logits.data()[start..start + vocab]
        };
        for p in 0..n {
            for k in 0..k_streams {
                let mixed = cfg_combine(row(p, k), row(n + p, k), cfg.guidance_scale)?;
                let probs = top_k_filter(&mixed, cfg.top_k, cfg.temperature)?;
                let token = draw(&mut rngs[p], &probs);
                grids[p].set(k, i, token);
                if let Some(obs) = observer.as_mut() {
                    let retained = (0..vocab).filter(|&v| probs[v] > 0.0).collect();
                    obs(&SampleEvent { prompt: first + p, stream: k, position: i, retained, token });
                }
            }
        }
    }
    Ok(grids)
}

/// Replaces every position past `n_events` motifs with the pad token.
pub fn apply_duration(grid: &mut TokenGrid, n_events: usize, motif_len: usize, pad: usize) {
    let keep = (n_events * motif_len).min(grid.len);
    for k in 0..grid.streams {
        for i in keep..grid.len {
            grid.set(k, i, pad);
        }
    }
}

/// Generates and trims each grid to its prompt's duration.
pub fn generate_for_prompts(
    model: &Model,
    params: &ModelParams,
    grammar: &Grammar,
    prompts: &[Scene],
    cfg: &SampleConfig,
) -> Result<Vec<TokenGrid>> {
    let spec = grammar.spec();
    let mut grids = generate(model, params, grammar, prompts, cfg, None)?;
    for (g, p) in grids.iter_mut().zip(prompts) {
        apply_duration(g, p.len(), spec.motif_len, spec.pad_token());
    }
    Ok(grids)
}

/// `n` prompt scenes; prompt `i` comes from stream `(seed, label, i)`.
pub fn sample_prompts(grammar: &Grammar, seed: u64, label: u64, n: usize) -> Vec<Scene> {
    (0..n).map(|i| grammar.sample_scene(&mut rng::stream(seed, &[label, i as u64]))).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleManifest {
    pub n: usize,
    pub seed: u64,
    pub top_k: usize,
    pub temperature: f64,
    pub guidance_scale: f64,
    pub tokens_file: String,
    pub prompt_scenes: Vec<String>,
}

pub fn scene_label(scene: &Scene) -> String {
    scene.events.iter().map(|e| format!("{}:{}", e.event_type, e.attribute)).collect::<Vec<_>>().join(" ")
}

/// Writes `tokens.bin` (dataset format) and `manifest.json` into `dir`.
pub fn write_samples(dir: &Path, grammar: &Grammar, prompts: &[Scene], grids: &[TokenGrid], cfg: &SampleConfig) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let records: Vec<(Scene, TokenGrid)> = prompts.iter().cloned().zip(grids.iter().cloned()).collect();
    dump_dataset(&dir.join("tokens.bin"), grammar.spec(), &records)?;
    let manifest = SampleManifest {
        n: prompts.len(),
        seed: cfg.seed,
        top_k: cfg.top_k,
        temperature: cfg.temperature,
        guidance_scale: cfg.guidance_scale,
        tokens_file: "tokens.bin".into(),
        prompt_scenes: prompts.iter().map(scene_label).collect(),
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}
