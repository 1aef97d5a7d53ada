//! Pre-norm transformer decoder over multi-stream audio tokens.
//!
//! At position `i` the input is the sum of the `streams` token embeddings of
//! the previous step (a reserved begin token at `i = 0`) plus a fixed
//! sinusoidal position offset. Each layer runs causal self-attention,
//! cross-attention into the projected text embeddings, and a GELU
//! feed-forward block, each as a residual branch. For samples flagged
//! `cfg_dropped` the cross-attention branch contributes nothing, and when a
//! whole batch is dropped the branch is not built at all. One linear head
//! per stream predicts that stream's token at position `i`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::synthdata::{sinusoidal_positions, GrammarSpec, TokenBatch};
use crate::tensor::{AttentionSpec, PoolMode, Tape, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;
/// Amplitude of the fixed sinusoidal offsets added to the audio inputs.
pub const AUDIO_POSITION_SCALE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub streams: usize,
    pub audio_vocab: usize,
    pub text_dim: usize,
    pub max_len: usize,
    pub dropout_rate: f64,
    pub seed: u64,
}

impl ModelConfig {
    /// Defaults sized for `grammar`.
    pub fn for_grammar(grammar: &GrammarSpec) -> Self {
        Self {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            streams: grammar.streams,
            audio_vocab: grammar.audio_vocab,
            text_dim: grammar.text_dim,
            max_len: grammar.audio_len(),
            dropout_rate: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.d_model, self.n_layers, self.n_heads, self.d_ff, self.streams, self.audio_vocab, self.text_dim, self.max_len];
        if dims.contains(&0) {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout_rate must be in [0, 1), got {}", self.dropout_rate)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

#[derive(Clone, Debug)]
struct ParamDef {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

#[derive(Clone, Debug)]
struct AttnIdx {
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
}

#[derive(Clone, Debug)]
struct LayerIdx {
    ln1: (usize, usize),
    self_attn: AttnIdx,
    ln2: (usize, usize),
    cross_attn: AttnIdx,
    ln3: (usize, usize),
    ff_w1: usize,
    ff_b1: usize,
    ff_w2: usize,
    ff_b2: usize,
}

#[derive(Clone, Debug)]
struct Layout {
    embed: Vec<usize>,
    text_w: usize,
    text_b: usize,
    layers: Vec<LayerIdx>,
    ln_f: (usize, usize),
    head_w: Vec<usize>,
    head_b: Vec<usize>,
}

struct LayoutBuilder {
    defs: Vec<ParamDef>,
}

impl LayoutBuilder {
    fn add(&mut self, name: String, shape: &[usize], init: Init) -> usize {
        self.defs.push(ParamDef { name, shape: shape.to_vec(), init });
        self.defs.len() - 1
    }

    fn norm(&mut self, prefix: &str, d: usize) -> (usize, usize) {
        (self.add(format!("{prefix}.gain"), &[d], Init::Ones), self.add(format!("{prefix}.bias"), &[d], Init::Zeros))
    }

    fn attn(&mut self, prefix: &str, d: usize) -> AttnIdx {
        let mut proj = |n: &str| {
            let w = self.add(format!("{prefix}.w{n}"), &[d, d], Init::Normal(INIT_STD));
            let b = self.add(format!("{prefix}.b{n}"), &[d], Init::Zeros);
            (w, b)
        };
        let (wq, bq) = proj("q");
        let (wk, bk) = proj("k");
        let (wv, bv) = proj("v");
        let (wo, bo) = proj("o");
        AttnIdx { wq, bq, wk, bk, wv, bv, wo, bo }
    }
}

fn build_layout(c: &ModelConfig) -> (Layout, Vec<ParamDef>) {
    let d = c.d_model;
    let mut lb = LayoutBuilder { defs: Vec::new() };
    let embed = (0..c.streams)
        .map(|k| lb.add(format!("embed.{k}"), &[c.audio_vocab + 1, d], Init::Normal(INIT_STD)))
        .collect();
    let text_w = lb.add("text_proj.w".into(), &[c.text_dim, d], Init::Normal(INIT_STD));
    let text_b = lb.add("text_proj.b".into(), &[d], Init::Zeros);
    let layers = (0..c.n_layers)
        .map(|l| {
            let p = format!("layers.{l}");
            let ln1 = lb.norm(&format!("{p}.ln1"), d);
            let self_attn = lb.attn(&format!("{p}.self_attn"), d);
            let ln2 = lb.norm(&format!("{p}.ln2"), d);
            let cross_attn = lb.attn(&format!("{p}.cross_attn"), d);
            let ln3 = lb.norm(&format!("{p}.ln3"), d);
            let ff_w1 = lb.add(format!("{p}.ff.w1"), &[d, c.d_ff], Init::Normal(INIT_STD));
            let ff_b1 = lb.add(format!("{p}.ff.b1"), &[c.d_ff], Init::Zeros);
            let ff_w2 = lb.add(format!("{p}.ff.w2"), &[c.d_ff, d], Init::Normal(INIT_STD));
            let ff_b2 = lb.add(format!("{p}.ff.b2"), &[d], Init::Zeros);
            LayerIdx { ln1, self_attn, ln2, cross_attn, ln3, ff_w1, ff_b1, ff_w2, ff_b2 }
        })
        .collect();
    let ln_f = lb.norm("ln_f", d);
    let head_std = INIT_STD / (c.n_layers as f64).sqrt();
    let mut head_w = Vec::new();
    let mut head_b = Vec::new();
    for k in 0..c.streams {
        head_w.push(lb.add(format!("head.{k}.w"), &[d, c.audio_vocab], Init::Normal(head_std)));
        head_b.push(lb.add(format!("head.{k}.b"), &[c.audio_vocab], Init::Zeros));
    }
    (Layout { embed, text_w, text_b, layers, ln_f, head_w, head_b }, lb.defs)
}

/// Named parameter tensors in a fixed order determined by the config.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

impl ModelParams {
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn checksum(&self) -> u64 {
        self.tensors.iter().fold(0u64, |h, t| h.rotate_left(7) ^ t.checksum())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn zeros_like(&self) -> Self {
        Self { names: self.names.clone(), tensors: self.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect() }
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    /// Seed for dropout masks; `None` disables dropout.
    pub dropout_seed: Option<u64>,
}

/// Tape handles produced by [`Model::forward`].
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// One `[batch * len, audio_vocab]` logit matrix per stream; row
    /// `b * len + i` predicts token `i` of sample `b`.
    pub logits: Vec<Var>,
    /// Final-layer normalized states `[batch * len, d_model]`.
    pub hidden: Var,
    pub batch: usize,
    pub len: usize,
}

impl ForwardOutput {
    /// Logits rearranged to `[batch, streams, len, vocab]`.
    pub fn logits_tensor(&self, tape: &Tape) -> Tensor {
        let vocab = tape.shape(self.logits[0])[1];
        let streams = self.logits.len();
        let mut data = vec![0.0; self.batch * streams * self.len * vocab];
        for (k, &v) in self.logits.iter().enumerate() {
            let src = tape.value(v).data();
            for b in 0..self.batch {
                let rows = &src[b * self.len * vocab..(b + 1) * self.len * vocab];
                let dst = ((b * streams + k) * self.len) * vocab;
                data[dst..dst + rows.len()].copy_from_slice(rows);
            }
        }
        Tensor::new(vec![self.batch, streams, self.len, vocab], data).expect("logit layout")
    }

    /// Hidden states as `[batch, len, d_model]`.
    pub fn hidden_tensor(&self, tape: &Tape) -> Tensor {
        let h = tape.value(self.hidden);
        h.clone().reshape(&[self.batch, self.len, h.shape()[1]]).expect("hidden layout")
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    layout: Layout,
    defs: Vec<ParamDef>,
    positions: Tensor,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (layout, defs) = build_layout(&config);
        let mut positions = sinusoidal_positions(config.max_len, config.d_model);
        positions.data_mut().iter_mut().for_each(|v| *v *= AUDIO_POSITION_SCALE);
        Ok(Self { config, layout, defs, positions })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn param_names(&self) -> Vec<String> {
        self.defs.iter().map(|d| d.name.clone()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.defs.iter().map(|d| d.shape.iter().product::<usize>()).sum()
    }

    /// Indices of every cross-attention parameter (including the shared text
    /// projection feeding it).
    pub fn cross_attention_params(&self) -> Vec<usize> {
        let mut idx = vec![self.layout.text_w, self.layout.text_b];
        for l in &self.layout.layers {
            let a = &l.cross_attn;
            idx.extend([l.ln2.0, l.ln2.1, a.wq, a.bq, a.wk, a.bk, a.wv, a.bv, a.wo, a.bo]);
        }
        idx
    }

    /// Normal(0, 0.02) weights, Normal(0, 0.02 / sqrt(n_layers)) output
    /// heads, zero biases, unit layer-norm gains.
    pub fn init_params(&self, seed: u64) -> ModelParams {
        let mut r = rng::stream(seed, &[rng::LABEL_INIT]);
        let tensors = self
            .defs
            .iter()
            .map(|d| match d.init {
                Init::Normal(std) => rng::normal_tensor(&mut r, &d.shape, std),
                Init::Zeros => Tensor::zeros(&d.shape),
                Init::Ones => Tensor::full(&d.shape, 1.0),
            })
            .collect();
        ModelParams { names: self.param_names(), tensors }
    }

    pub fn check_params(&self, params: &ModelParams) -> Result<()> {
        if params.tensors.len() != self.defs.len() {
            return Err(Error::Dimension(format!(
                "{} parameter tensors for a model with {}",
                params.tensors.len(),
                self.defs.len()
            )));
        }
        for (d, t) in self.defs.iter().zip(&params.tensors) {
            if t.shape() != d.shape.as_slice() {
                return Err(Error::Dimension(format!("parameter {} has shape {:?}, expected {:?}", d.name, t.shape(), d.shape)));
            }
        }
        Ok(())
    }

    /// Registers parameters on the tape as trainable leaves.
    pub fn leaves(&self, tape: &mut Tape, params: &ModelParams) -> Vec<Var> {
        params.tensors.iter().map(|t| tape.leaf(t.clone())).collect()
    }

    pub fn constants(&self, tape: &mut Tape, params: &ModelParams) -> Vec<Var> {
        params.tensors.iter().map(|t| tape.constant(t.clone())).collect()
    }

    fn check_batch(&self, batch: &TokenBatch) -> Result<()> {
        let c = &self.config;
        if batch.streams != c.streams || batch.audio_len > c.max_len || batch.audio_len == 0 {
            return Err(Error::Dimension(format!(
                "batch of {} streams x {} steps for a model of {} streams x {} steps",
                batch.streams, batch.audio_len, c.streams, c.max_len
            )));
        }
        if batch.text_embeddings.shape() != [batch.batch, batch.text_len, c.text_dim] {
            return Err(Error::Dimension(format!(
                "text embeddings {:?}, expected [{}, {}, {}]",
                batch.text_embeddings.shape(),
                batch.batch,
                batch.text_len,
                c.text_dim
            )));
        }
        Ok(())
    }

    fn linear(&self, tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }

    fn dropout(&self, tape: &mut Tape, x: Var, seed: Option<u64>, site: u64) -> Result<Var> {
        let (Some(seed), rate) = (seed, self.config.dropout_rate) else { return Ok(x) };
        if rate == 0.0 {
            return Ok(x);
        }
        use rand::Rng as _;
        let mut r = rng::stream(seed, &[rng::LABEL_DROPOUT, site]);
        let keep = 1.0 / (1.0 - rate);
        let shape = tape.shape(x).to_vec();
        let n: usize = shape.iter().product();
        let mask = (0..n).map(|_| if r.gen_bool(rate) { 0.0 } else { keep }).collect();
        let m = tape.constant(Tensor::new(shape, mask)?);
        tape.mul(x, m)
    }

    /// Builds the forward graph for `batch` on `tape` using parameter handles
    /// `p` (as returned by [`Model::leaves`] or [`Model::constants`]).
    pub fn forward(&self, tape: &mut Tape, p: &[Var], batch: &TokenBatch, opts: ForwardOptions) -> Result<ForwardOutput> {
        self.check_batch(batch)?;
        let c = &self.config;
        let l = &self.layout;
        let (bsz, len, d) = (batch.batch, batch.audio_len, c.d_model);
        let bos = c.audio_vocab;

        let mut x: Option<Var> = None;
        for k in 0..c.streams {
            let ids: Vec<usize> = (0..bsz)
                .flat_map(|b| (0..len).map(move |i| if i == 0 { bos } else { batch.token(b, k, i - 1) }))
                .collect();
            let e = tape.embedding(p[l.embed[k]], &ids)?;
            x = Some(match x {
                None => e,
                Some(acc) => tape.add(acc, e)?,
            });
        }
        let pos: Vec<f64> = (0..bsz).flat_map(|_| self.positions.data()[..len * d].iter().copied()).collect();
        let pos = tape.constant(Tensor::new(vec![bsz * len, d], pos)?);
        let mut x = tape.add(x.expect("at least one stream"), pos)?;

        let active: Vec<bool> = batch.cfg_dropped.iter().map(|&dropped| !dropped).collect();
        let any_active = active.iter().any(|&a| a);
        let memory = if any_active {
            // Dropped samples' text is zeroed so its values cannot reach any
            // gradient through the shared projection.
            let tv = batch.text_len;
            let mut text = batch.text_embeddings.clone().reshape(&[bsz * tv, c.text_dim])?;
            for (b, &on) in active.iter().enumerate() {
                if !on {
                    text.data_mut()[b * tv * c.text_dim..(b + 1) * tv * c.text_dim].iter_mut().for_each(|v| *v = 0.0);
                }
            }
            let text = tape.constant(text);
            Some(self.linear(tape, text, p[l.text_w], p[l.text_b])?)
        } else {
            None
        };
        let gate = if any_active && active.iter().any(|&a| !a) {
            let g: Vec<f64> = active.iter().flat_map(|&a| std::iter::repeat_n(if a { 1.0 } else { 0.0 }, len * d)).collect();
            Some(tape.constant(Tensor::new(vec![bsz * len, d], g)?))
        } else {
            None
        };

        for (li, layer) in l.layers.iter().enumerate() {
            let site = li as u64 * 3;
            let h = tape.layer_norm(x, p[layer.ln1.0], p[layer.ln1.1], LAYER_NORM_EPS)?;
            let spec = AttentionSpec { batch: bsz, q_len: len, kv_len: len, heads: c.n_heads, causal: true, key_mask: None, active: None };
            let a = self.attention_block(tape, p, &layer.self_attn, h, h, spec)?;
            let a = self.dropout(tape, a, opts.dropout_seed, site)?;
            x = tape.add(x, a)?;

            if let Some(mem) = memory {
                let h = tape.layer_norm(x, p[layer.ln2.0], p[layer.ln2.1], LAYER_NORM_EPS)?;
                let spec = AttentionSpec {
                    batch: bsz,
                    q_len: len,
                    kv_len: batch.text_len,
                    heads: c.n_heads,
                    causal: false,
                    key_mask: Some(batch.text_mask.clone()),
                    active: Some(active.clone()),
                };
                let mut a = self.attention_block(tape, p, &layer.cross_attn, h, mem, spec)?;
                if let Some(g) = gate {
                    a = tape.mul(a, g)?;
                }
                let a = self.dropout(tape, a, opts.dropout_seed, site + 1)?;
                x = tape.add(x, a)?;
            }

            let h = tape.layer_norm(x, p[layer.ln3.0], p[layer.ln3.1], LAYER_NORM_EPS)?;
            let f = self.linear(tape, h, p[layer.ff_w1], p[layer.ff_b1])?;
            let f = tape.gelu(f);
            let f = self.linear(tape, f, p[layer.ff_w2], p[layer.ff_b2])?;
            let f = self.dropout(tape, f, opts.dropout_seed, site + 2)?;
            x = tape.add(x, f)?;
        }

        let hidden = tape.layer_norm(x, p[l.ln_f.0], p[l.ln_f.1], LAYER_NORM_EPS)?;
        let logits = (0..c.streams)
            .map(|k| self.linear(tape, hidden, p[l.head_w[k]], p[l.head_b[k]]))
            .collect::<Result<Vec<_>>>()?;
        Ok(ForwardOutput { logits, hidden, batch: bsz, len })
    }

    fn attention_block(&self, tape: &mut Tape, p: &[Var], a: &AttnIdx, queries: Var, keys: Var, spec: AttentionSpec) -> Result<Var> {
        let q = self.linear(tape, queries, p[a.wq], p[a.bq])?;
        let k = self.linear(tape, keys, p[a.wk], p[a.bk])?;
        let v = self.linear(tape, keys, p[a.wv], p[a.bv])?;
        let o = tape.attention(q, k, v, spec)?;
        self.linear(tape, o, p[a.wo], p[a.bo])
    }

    /// Gradient-free forward; returns logits `[B, K, T, V]` and hidden
    /// states `[B, T, d_model]`.
    pub fn forward_values(&self, params: &ModelParams, batch: &TokenBatch) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let p = self.constants(&mut tape, params);
        let out = self.forward(&mut tape, &p, batch, ForwardOptions::default())?;
        Ok((out.logits_tensor(&tape), out.hidden_tensor(&tape)))
    }
}

/// `T^b`: pooled raw text embeddings `[B, text_dim]`, a constant with
/// respect to the model.
pub fn pooled_text_representation(batch: &TokenBatch, mode: PoolMode) -> Result<Tensor> {
    let d = batch.text_embeddings.shape()[2];
    let mut tape = Tape::new();
    let x = tape.constant(batch.text_embeddings.clone().reshape(&[batch.batch * batch.text_len, d])?);
    let pooled = tape.pool(x, &batch.text_mask, batch.batch, mode)?;
    Ok(tape.value(pooled).clone())
}

/// `A^b`: pooled final hidden states over each sample's unmasked audio
/// positions, `[B, d_model]`, differentiable.
pub fn pooled_audio_representation(tape: &mut Tape, output: &ForwardOutput, batch: &TokenBatch, mode: PoolMode) -> Result<Var> {
    tape.pool(output.hidden, &batch.audio_mask, output.batch, mode)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_indivisible_heads() {
        let mut c = ModelConfig::for_grammar(&GrammarSpec::default());
        c.n_heads = 5;
        assert!(matches!(Model::new(c), Err(Error::Config(_))));
    }

    #[test]
    fn parameter_names_are_unique() {
        let m = Model::new(ModelConfig::for_grammar(&GrammarSpec::default())).unwrap();
        let names = m.param_names();
        let set: std::collections::HashSet<_> = names.iter().collect();
        assert_eq!(set.len(), names.len());
    }
}
