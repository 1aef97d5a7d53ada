//! Synthetic scene grammar standing in for an audio tokenizer and a frozen
//! text encoder.
//!
//! A [`Scene`] is an ordered list of `(event_type, attribute)` events. Its
//! "audio" is the concatenation of one fixed random motif per event on each
//! of `streams` token streams, lightly corrupted by noise; its "text" is one
//! type token and one attribute token per event followed by a separator,
//! embedded through a frozen random table. Because motifs are distinct, the
//! audio side can be decoded back into a scene, which makes text/audio
//! alignment measurable exactly.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

/// Amplitude of the sinusoidal position offsets added to text embeddings.
pub const TEXT_POSITION_SCALE: f64 = 0.25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrammarSpec {
    pub n_event_types: usize,
    pub n_attributes: usize,
    pub motif_len: usize,
    pub streams: usize,
    pub audio_vocab: usize,
    pub text_vocab: usize,
    pub text_dim: usize,
    pub noise_prob: f64,
    pub max_events: usize,
    pub seed: u64,
}

impl Default for GrammarSpec {
    fn default() -> Self {
        Self {
            n_event_types: 16,
            n_attributes: 4,
            motif_len: 6,
            streams: 2,
            audio_vocab: 64,
            text_vocab: 64,
            text_dim: 32,
            noise_prob: 0.05,
            max_events: 4,
            seed: 0,
        }
    }
}

impl GrammarSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.audio_vocab < 8 {
            return fail(format!("audio_vocab must be at least 8, got {}", self.audio_vocab));
        }
        if self.motif_len < 2 {
            return fail(format!("motif_len must be at least 2, got {}", self.motif_len));
        }
        if self.n_event_types == 0 || self.n_attributes == 0 || self.streams == 0 || self.text_dim == 0 {
            return fail("grammar sizes must be positive".into());
        }
        if self.max_events == 0 || self.max_events > self.n_event_types {
            return fail(format!(
                "max_events must be in 1..={} (event types are drawn without replacement), got {}",
                self.n_event_types, self.max_events
            ));
        }
        if self.text_vocab < self.n_event_types + self.n_attributes + 1 {
            return fail(format!(
                "text_vocab {} cannot hold {} type tokens, {} attribute tokens and a separator",
                self.text_vocab, self.n_event_types, self.n_attributes
            ));
        }
        let motifs = self.n_event_types * self.n_attributes;
        let capacity = (self.audio_vocab as f64).powi(self.motif_len as i32);
        if (motifs as f64) > capacity / 2.0 {
            return fail(format!("{motifs} distinct motifs do not fit in the token space"));
        }
        if !(0.0..=1.0).contains(&self.noise_prob) {
            return fail(format!("noise_prob must be in [0, 1], got {}", self.noise_prob));
        }
        Ok(())
    }

    /// Reserved id used for padding and as the begin-of-sequence input.
    pub fn pad_token(&self) -> usize {
        self.audio_vocab
    }

    pub fn audio_len(&self) -> usize {
        self.max_events * self.motif_len
    }

    pub fn text_len(&self) -> usize {
        2 * self.max_events + 1
    }

    pub fn n_motifs(&self) -> usize {
        self.n_event_types * self.n_attributes
    }

    pub fn separator_token(&self) -> usize {
        self.n_event_types + self.n_attributes
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Event {
    pub event_type: usize,
    pub attribute: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Scene {
    pub events: Vec<Event>,
}

impl Scene {
    pub fn new(events: Vec<Event>) -> Self {
        Self { events }
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn check(&self, spec: &GrammarSpec) -> Result<()> {
        if self.events.len() > spec.max_events {
            return Err(Error::Index(format!("scene has {} events, max is {}", self.events.len(), spec.max_events)));
        }
        for e in &self.events {
            if e.event_type >= spec.n_event_types || e.attribute >= spec.n_attributes {
                return Err(Error::Index(format!("event {e:?} outside the grammar")));
            }
        }
        Ok(())
    }
}

/// Integer tokens laid out `[streams, len]`, stream-major.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenGrid {
    pub streams: usize,
    pub len: usize,
    pub data: Vec<usize>,
}

impl TokenGrid {
    pub fn filled(streams: usize, len: usize, value: usize) -> Self {
        Self { streams, len, data: vec![value; streams * len] }
    }

    pub fn get(&self, k: usize, i: usize) -> usize {
        self.data[k * self.len + i]
    }

    pub fn set(&mut self, k: usize, i: usize, v: usize) {
        self.data[k * self.len + i] = v;
    }

    pub fn stream(&self, k: usize) -> &[usize] {
        &self.data[k * self.len..(k + 1) * self.len]
    }
}

/// A validated grammar with its motif tables and frozen text encoder.
#[derive(Clone, Debug)]
pub struct Grammar {
    spec: GrammarSpec,
    /// `motifs[k][m]` for motif index `m = event_type * n_attributes + attribute`.
    motifs: Vec<Vec<Vec<usize>>>,
    text_table: Tensor,
    positions: Tensor,
}

impl Grammar {
    pub fn new(spec: GrammarSpec) -> Result<Self> {
        spec.validate()?;
        let mut motifs = Vec::with_capacity(spec.streams);
        for k in 0..spec.streams {
            let mut r = rng::stream(spec.seed, &[rng::LABEL_MOTIFS, k as u64]);
            let mut table: Vec<Vec<usize>> = Vec::with_capacity(spec.n_motifs());
            while table.len() < spec.n_motifs() {
                let m: Vec<usize> = (0..spec.motif_len).map(|_| r.gen_range(0..spec.audio_vocab)).collect();
                if !table.contains(&m) {
                    table.push(m);
                }
            }
            motifs.push(table);
        }

        let mut r = rng::stream(spec.seed, &[rng::LABEL_TEXT_TABLE]);
        let mut table = rng::normal_tensor(&mut r, &[spec.text_vocab, spec.text_dim], 1.0);
        for row in table.data_mut().chunks_mut(spec.text_dim) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.iter_mut().for_each(|v| *v /= norm);
        }
        let positions = sinusoid(spec.text_len(), spec.text_dim, TEXT_POSITION_SCALE);
        Ok(Self { spec, motifs, text_table: table, positions })
    }

    pub fn spec(&self) -> &GrammarSpec {
        &self.spec
    }

    pub fn motif(&self, stream: usize, event: Event) -> &[usize] {
        &self.motifs[stream][event.event_type * self.spec.n_attributes + event.attribute]
    }

    pub fn text_table(&self) -> &Tensor {
        &self.text_table
    }

    /// Event count uniform in `1..=max_events`, distinct event types,
    /// uniform attributes.
    pub fn sample_scene(&self, r: &mut Rng) -> Scene {
        let s = &self.spec;
        let n = r.gen_range(1..=s.max_events);
        let types = index::sample(r, s.n_event_types, n).into_vec();
        let events = types
            .into_iter()
            .map(|event_type| Event { event_type, attribute: r.gen_range(0..s.n_attributes) })
            .collect();
        Scene { events }
    }

    /// Text token ids: `type, attribute` per event, then the separator.
    pub fn scene_text_ids(&self, scene: &Scene) -> Vec<usize> {
        let s = &self.spec;
        let mut ids = Vec::with_capacity(2 * scene.len() + 1);
        for e in &scene.events {
            ids.push(e.event_type);
            ids.push(s.n_event_types + e.attribute);
        }
        ids.push(s.separator_token());
        ids
    }

    /// Frozen text encoding `[len, text_dim]`: table row plus position offset.
    pub fn scene_to_text(&self, scene: &Scene) -> (Vec<usize>, Tensor) {
        let ids = self.scene_text_ids(scene);
        let d = self.spec.text_dim;
        let mut data = Vec::with_capacity(ids.len() * d);
        for (j, &id) in ids.iter().enumerate() {
            let row = self.text_table.row(id);
            let pos = self.positions.row(j);
            data.extend(row.iter().zip(pos).map(|(a, b)| a + b));
        }
        let emb = Tensor::new(vec![ids.len(), d], data).expect("rows of text_dim");
        (ids, emb)
    }

    /// Noise-free motif concatenation, padded to the full audio length.
    pub fn clean_audio_tokens(&self, scene: &Scene) -> TokenGrid {
        let s = &self.spec;
        let mut grid = TokenGrid::filled(s.streams, s.audio_len(), s.pad_token());
        for k in 0..s.streams {
            for (w, &e) in scene.events.iter().enumerate() {
                for (i, &tok) in self.motif(k, e).iter().enumerate() {
                    grid.set(k, w * s.motif_len + i, tok);
                }
            }
        }
        grid
    }

    /// Motif concatenation with each emitted token independently replaced by
    /// a uniform random token with probability `noise_prob`.
    pub fn scene_to_audio_tokens(&self, r: &mut Rng, scene: &Scene) -> TokenGrid {
        let s = &self.spec;
        let mut grid = self.clean_audio_tokens(scene);
        let valid = scene.len() * s.motif_len;
        for k in 0..s.streams {
            for i in 0..valid {
                if r.gen_bool(s.noise_prob) {
                    grid.set(k, i, r.gen_range(0..s.audio_vocab));
                }
            }
        }
        grid
    }

    /// Decodes each motif-aligned window to the `(event_type, attribute)` whose
    /// motifs agree with the most tokens summed over streams. Pad-only windows
    /// are skipped. Ties go to the lowest motif index.
    pub fn decode_audio_tokens(&self, tokens: &TokenGrid) -> Decoded {
        let s = &self.spec;
        let pad = s.pad_token();
        let mut events = Vec::new();
        let mut agreement = Vec::new();
        for w in 0..tokens.len / s.motif_len {
            let span = w * s.motif_len..(w + 1) * s.motif_len;
            let present: usize =
                (0..tokens.streams).map(|k| span.clone().filter(|&i| tokens.get(k, i) != pad).count()).sum();
            if present == 0 {
                continue;
            }
            let mut best = (0usize, 0usize);
            for m in 0..s.n_motifs() {
                let hits: usize = (0..tokens.streams.min(s.streams))
                    .map(|k| {
                        span.clone()
                            .zip(&self.motifs[k][m])
                            .filter(|&(i, &t)| tokens.get(k, i) == t)
                            .count()
                    })
                    .sum();
                if hits > best.1 || m == 0 {
                    best = (m, hits);
                }
            }
            events.push(Event { event_type: best.0 / s.n_attributes, attribute: best.0 % s.n_attributes });
            agreement.push(best.1 as f64 / present as f64);
        }
        Decoded { scene: Scene { events }, agreement }
    }

    /// Text-side tensors for a list of scenes: `[B, text_len, text_dim]`
    /// embeddings (zero rows past each scene's text) and the validity mask.
    pub fn encode_texts(&self, scenes: &[Scene]) -> (Tensor, Vec<bool>) {
        let (tv, d) = (self.spec.text_len(), self.spec.text_dim);
        let mut data = vec![0.0; scenes.len() * tv * d];
        let mut mask = vec![false; scenes.len() * tv];
        for (b, scene) in scenes.iter().enumerate() {
            let (_, emb) = self.scene_to_text(scene);
            let rows = emb.shape()[0];
            data[b * tv * d..b * tv * d + rows * d].copy_from_slice(emb.data());
            mask[b * tv..b * tv + rows].iter_mut().for_each(|m| *m = true);
        }
        (Tensor::new(vec![scenes.len(), tv, d], data).expect("batch layout"), mask)
    }

    /// Assembles a batch from scenes and their audio tokens.
    pub fn batch_from_parts(&self, scenes: Vec<Scene>, audio: &[TokenGrid], cfg_dropped: Vec<bool>) -> Result<TokenBatch> {
        let s = &self.spec;
        let b = scenes.len();
        if audio.len() != b || cfg_dropped.len() != b {
            return Err(Error::Dimension(format!(
                "{b} scenes, {} token grids, {} cfg flags",
                audio.len(),
                cfg_dropped.len()
            )));
        }
        let ta = s.audio_len();
        let mut audio_tokens = Vec::with_capacity(b * s.streams * ta);
        for grid in audio {
            if grid.streams != s.streams || grid.len != ta {
                return Err(Error::Dimension(format!(
                    "token grid [{}, {}] for a grammar of [{}, {ta}]",
                    grid.streams, grid.len, s.streams
                )));
            }
            audio_tokens.extend_from_slice(&grid.data);
        }
        let audio_mask = scenes
            .iter()
            .flat_map(|sc| (0..ta).map(move |i| i < sc.len() * s.motif_len))
            .collect();
        let (text_embeddings, text_mask) = self.encode_texts(&scenes);
        Ok(TokenBatch {
            batch: b,
            streams: s.streams,
            audio_len: ta,
            text_len: s.text_len(),
            audio_tokens,
            text_embeddings,
            text_mask,
            audio_mask,
            cfg_dropped,
            scenes,
        })
    }

    /// `batch` independent scenes; sample `b` draws from the child stream
    /// `(seed, b)`, so the result does not depend on evaluation order.
    pub fn make_batch(&self, seed: u64, batch: usize, cfg_drop: bool) -> Result<TokenBatch> {
        if batch < 2 {
            return Err(Error::BatchSize(batch));
        }
        let (scenes, audio): (Vec<Scene>, Vec<TokenGrid>) = (0..batch)
            .map(|b| {
                let mut r = rng::stream(seed, &[rng::LABEL_BATCH, b as u64]);
                let scene = self.sample_scene(&mut r);
                let grid = self.scene_to_audio_tokens(&mut r, &scene);
                (scene, grid)
            })
            .unzip();
        self.batch_from_parts(scenes, &audio, vec![cfg_drop; batch])
    }
}

fn sinusoid(len: usize, dim: usize, scale: f64) -> Tensor {
    let mut data = vec![0.0; len * dim];
    for p in 0..len {
        for i in 0..dim {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let angle = p as f64 * freq;
            data[p * dim + i] = scale * if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![len, dim], data).expect("sinusoid layout")
}

/// Fixed sinusoidal position table `[len, dim]` with unit amplitude.
pub fn sinusoidal_positions(len: usize, dim: usize) -> Tensor {
    sinusoid(len, dim, 1.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub scene: Scene,
    /// Fraction of non-pad tokens in each decoded window that match the
    /// chosen motif.
    pub agreement: Vec<f64>,
}

/// One training or evaluation batch.
#[derive(Clone, Debug)]
pub struct TokenBatch {
    pub batch: usize,
    pub streams: usize,
    pub audio_len: usize,
    pub text_len: usize,
    /// `[batch, streams, audio_len]`.
    pub audio_tokens: Vec<usize>,
    /// `[batch, text_len, text_dim]`.
    pub text_embeddings: Tensor,
    /// `[batch, text_len]`.
    pub text_mask: Vec<bool>,
    /// `[batch, audio_len]`.
    pub audio_mask: Vec<bool>,
    pub cfg_dropped: Vec<bool>,
    pub scenes: Vec<Scene>,
}

impl TokenBatch {
    pub fn token(&self, b: usize, k: usize, i: usize) -> usize {
        self.audio_tokens[(b * self.streams + k) * self.audio_len + i]
    }

    pub fn set_cfg(&mut self, dropped: bool) {
        self.cfg_dropped.iter_mut().for_each(|d| *d = dropped);
    }

    pub fn grid(&self, b: usize) -> TokenGrid {
        let n = self.streams * self.audio_len;
        TokenGrid { streams: self.streams, len: self.audio_len, data: self.audio_tokens[b * n..(b + 1) * n].to_vec() }
    }
}

const DATA_MAGIC: &[u8; 8] = b"RRLMDATA";
const DATA_VERSION: u32 = 1;

/// Writes a dataset file: magic, version, grammar JSON header, then per
/// record the scene events and token grid as little-endian `u32`s.
pub fn dump_dataset(path: &Path, spec: &GrammarSpec, records: &[(Scene, TokenGrid)]) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(DATA_MAGIC);
    out.extend_from_slice(&DATA_VERSION.to_le_bytes());
    let header = serde_json::to_string(spec)?;
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&(records.len() as u64).to_le_bytes());
    let mut put = |v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
    for (scene, grid) in records {
        put(scene.len());
        for e in &scene.events {
            put(e.event_type);
            put(e.attribute);
        }
        put(grid.streams);
        put(grid.len);
        for &t in &grid.data {
            put(t);
        }
    }
    std::fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<(GrammarSpec, Vec<(Scene, TokenGrid)>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut r = ByteReader { buf: &bytes, pos: 0 };
    if r.take(8)? != DATA_MAGIC {
        return Err(Error::Format("not a dataset file".into()));
    }
    let version = r.u32()?;
    if version != DATA_VERSION as usize {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let hlen = r.u64()?;
    let spec: GrammarSpec = serde_json::from_slice(r.take(hlen)?)?;
    let count = r.u64()?;
    let mut records = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let n = r.u32()?;
        let mut events = Vec::with_capacity(n.min(64));
        for _ in 0..n {
            let event_type = r.u32()?;
            let attribute = r.u32()?;
            events.push(Event { event_type, attribute });
        }
        let streams = r.u32()?;
        let len = r.u32()?;
        let data = (0..streams * len).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        records.push((Scene { events }, TokenGrid { streams, len, data }));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes in dataset file".into()));
    }
    Ok((spec, records))
}

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.saturating_add(n);
        let s = self.buf.get(self.pos..end).ok_or_else(|| Error::Format("dataset file is truncated".into()))?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<usize> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")) as usize)
    }
}
