//! Proxy metrics computed exactly from the synthetic grammar.
//!
//! - scene accuracy and event F1: decoded scenes against their prompts;
//! - proxy KL: `KL(ref || gen)` of Laplace-smoothed event-type histograms of
//!   the decoded sets;
//! - proxy FAD: Fréchet distance between Gaussians fitted to projected
//!   token-bigram histograms.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelParams};
use crate::rng;
use crate::sampler::{generate_for_prompts, sample_prompts, SampleConfig};
use crate::synthdata::{Event, Grammar, Scene, TokenGrid};

/// Dimension of the projected bigram features.
pub const FEATURE_DIM: usize = 32;
pub const KL_SMOOTHING: f64 = 1.0;
pub const EVAL_CSV_HEADER: &str = "scene_acc,scene_f1,proxy_fad,proxy_kl";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneScore {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Exact-match rate plus micro-averaged event F1 over multisets of
/// `(event_type, attribute)` pairs.
pub fn scene_accuracy(generated: &[Scene], prompts: &[Scene]) -> Result<SceneScore> {
    if generated.len() != prompts.len() {
        return Err(Error::Metric(format!("{} generated scenes for {} prompts", generated.len(), prompts.len())));
    }
    if prompts.is_empty() {
        return Err(Error::Metric("no scenes to score".into()));
    }
    let (mut exact, mut tp, mut n_gen, mut n_ref) = (0usize, 0usize, 0usize, 0usize);
    for (g, p) in generated.iter().zip(prompts) {
        if g == p {
            exact += 1;
        }
        let mut counts: HashMap<Event, usize> = HashMap::new();
        for e in &p.events {
            *counts.entry(*e).or_default() += 1;
        }
        for e in &g.events {
            if let Some(c) = counts.get_mut(e).filter(|c| **c > 0) {
                *c -= 1;
                tp += 1;
            }
        }
        n_gen += g.len();
        n_ref += p.len();
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, n_gen);
    let recall = ratio(tp, n_ref);
    let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    Ok(SceneScore { accuracy: exact as f64 / prompts.len() as f64, precision, recall, f1 })
}

/// Laplace-smoothed event-type distribution of a set of scenes.
pub fn event_type_distribution(scenes: &[Scene], n_types: usize) -> Vec<f64> {
    let mut counts = vec![KL_SMOOTHING; n_types];
    for e in scenes.iter().flat_map(|s| &s.events) {
        counts[e.event_type] += 1.0;
    }
    let total: f64 = counts.iter().sum();
    counts.iter().map(|c| c / total).collect()
}

/// `KL(p || q)` in nats.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).filter(|(a, _)| **a > 0.0).map(|(a, b)| a * (a / b).ln()).sum::<f64>().max(0.0)
}

pub fn proxy_kl(generated: &[Scene], reference: &[Scene], n_types: usize) -> Result<f64> {
    if generated.is_empty() || reference.is_empty() {
        return Err(Error::Metric("proxy_kl needs non-empty sets".into()));
    }
    if let Some(e) = generated.iter().chain(reference).flat_map(|s| &s.events).find(|e| e.event_type >= n_types) {
        return Err(Error::Metric(format!("event type {} out of range", e.event_type)));
    }
    let p = event_type_distribution(reference, n_types);
    let q = event_type_distribution(generated, n_types);
    Ok(kl_divergence(&p, &q))
}

/// Maps token grids to fixed-size features: per stream, a histogram of
/// consecutive non-pad token pairs hashed into `vocab` buckets, normalized
/// to sum 1 over all streams, then multiplied by a seeded Gaussian
/// projection to [`FEATURE_DIM`] dimensions.
pub struct BigramFeaturizer {
    streams: usize,
    vocab: usize,
    pad: usize,
    projection: DMatrix<f64>,
}

impl BigramFeaturizer {
    pub fn new(grammar: &Grammar) -> Self {
        let s = grammar.spec();
        let rows = s.streams * s.audio_vocab;
        let mut r = rng::stream(s.seed, &[rng::LABEL_PROJECTION]);
        let scale = 1.0 / (FEATURE_DIM as f64).sqrt();
        let data: Vec<f64> = (0..rows * FEATURE_DIM).map(|_| rng::normal(&mut r, 1.0) * scale).collect();
        Self {
            streams: s.streams,
            vocab: s.audio_vocab,
            pad: s.pad_token(),
            projection: DMatrix::from_row_slice(FEATURE_DIM, rows, &data),
        }
    }

    fn bucket(&self, k: usize, a: usize, b: usize) -> usize {
        k * self.vocab + (rng::derive(0x6269_6772, &[k as u64, a as u64, b as u64]) % self.vocab as u64) as usize
    }

    pub fn histogram(&self, grid: &TokenGrid) -> DVector<f64> {
        let mut h = DVector::zeros(self.streams * self.vocab);
        for k in 0..self.streams.min(grid.streams) {
            let s = grid.stream(k);
            for w in s.windows(2) {
                if w[0] != self.pad && w[1] != self.pad {
                    h[self.bucket(k, w[0], w[1])] += 1.0;
                }
            }
        }
        let total = h.sum();
        if total > 0.0 {
            h /= total;
        }
        h
    }

    pub fn features(&self, grid: &TokenGrid) -> Vec<f64> {
        (&self.projection * self.histogram(grid)).iter().copied().collect()
    }
}

/// Mean and covariance (denominator `n - 1`) of row vectors.
pub fn gaussian_fit(rows: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = rows.len();
    if n < 2 {
        return Err(Error::Metric(format!("need at least 2 samples for a covariance, got {n}")));
    }
    let d = rows[0].len();
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::Metric("feature rows differ in length".into()));
    }
    let x = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
    let mean = DVector::from_fn(d, |j, _| x.column(j).sum() / n as f64);
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    Ok((mean, cov))
}

/// Square root of a symmetric PSD matrix via eigendecomposition, negative
/// eigenvalues clamped to 0.
pub fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `|mu1 - mu2|^2 + Tr(S1 + S2 - 2 (S1 S2)^{1/2})`, with the trace of the
/// cross term taken as `Tr((S1^{1/2} S2 S1^{1/2})^{1/2})`.
pub fn frechet_gaussian(mu1: &DVector<f64>, s1: &DMatrix<f64>, mu2: &DVector<f64>, s2: &DMatrix<f64>) -> f64 {
    let shift = (mu1 - mu2).norm_squared();
    let r1 = psd_sqrt(s1);
    let cross = psd_sqrt(&(&r1 * s2 * &r1)).trace();
    (shift + s1.trace() + s2.trace() - 2.0 * cross).max(0.0)
}

/// Fréchet distance between Gaussian fits of two feature sets. Sets with
/// fewer than `dim + 1` rows fall back to diagonal covariances.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let (mu1, mut s1) = gaussian_fit(a)?;
    let (mu2, mut s2) = gaussian_fit(b)?;
    if mu1.len() != mu2.len() {
        return Err(Error::Metric("feature sets differ in dimension".into()));
    }
    let d = mu1.len();
    if a.len() < d + 1 || b.len() < d + 1 {
        s1 = DMatrix::from_diagonal(&s1.diagonal());
        s2 = DMatrix::from_diagonal(&s2.diagonal());
    }
    Ok(frechet_gaussian(&mu1, &s1, &mu2, &s2))
}

pub fn proxy_fad(generated: &[TokenGrid], reference: &[TokenGrid], grammar: &Grammar) -> Result<f64> {
    let f = BigramFeaturizer::new(grammar);
    let fa: Vec<Vec<f64>> = generated.iter().map(|g| f.features(g)).collect();
    let fb: Vec<Vec<f64>> = reference.iter().map(|g| f.features(g)).collect();
    frechet_distance(&fa, &fb)
}

/// `n` freshly rendered (noisy) scenes; set `set` of seed `seed`.
pub fn reference_set(grammar: &Grammar, seed: u64, set: u64, n: usize) -> (Vec<Scene>, Vec<TokenGrid>) {
    (0..n)
        .map(|i| {
            let mut r = rng::stream(seed, &[rng::LABEL_REFERENCE, set, i as u64]);
            let scene = grammar.sample_scene(&mut r);
            let grid = grammar.scene_to_audio_tokens(&mut r, &scene);
            (scene, grid)
        })
        .unzip()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_samples: usize,
    pub scene_accuracy: f64,
    pub scene_precision: f64,
    pub scene_recall: f64,
    pub scene_f1: f64,
    pub proxy_fad: f64,
    pub proxy_kl: f64,
    pub seed: u64,
    pub top_k: usize,
    pub temperature: f64,
    pub guidance_scale: f64,
}

impl EvalReport {
    pub fn check(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        let ok = unit(self.scene_accuracy)
            && unit(self.scene_precision)
            && unit(self.scene_recall)
            && unit(self.scene_f1)
            && self.proxy_fad >= 0.0
            && self.proxy_kl >= 0.0
            && self.proxy_fad.is_finite()
            && self.proxy_kl.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::Metric(format!("report out of range: {self:?}")))
        }
    }

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{}", self.scene_accuracy, self.scene_f1, self.proxy_fad, self.proxy_kl)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// Scores already generated grids against their prompts and a fresh
/// reference set of the same size.
pub fn evaluate_grids(grammar: &Grammar, prompts: &[Scene], grids: &[TokenGrid], cfg: &SampleConfig) -> Result<EvalReport> {
    let decoded: Vec<Scene> = grids.iter().map(|g| grammar.decode_audio_tokens(g).scene).collect();
    let score = scene_accuracy(&decoded, prompts)?;
    let (_, ref_grids) = reference_set(grammar, cfg.seed, 0, prompts.len());
    let ref_decoded: Vec<Scene> = ref_grids.iter().map(|g| grammar.decode_audio_tokens(g).scene).collect();
    let report = EvalReport {
        n_samples: prompts.len(),
        scene_accuracy: score.accuracy,
        scene_precision: score.precision,
        scene_recall: score.recall,
        scene_f1: score.f1,
        proxy_fad: proxy_fad(grids, &ref_grids, grammar)?,
        proxy_kl: proxy_kl(&decoded, &ref_decoded, grammar.spec().n_event_types)?,
        seed: cfg.seed,
        top_k: cfg.top_k,
        temperature: cfg.temperature,
        guidance_scale: cfg.guidance_scale,
    };
    report.check()?;
    Ok(report)
}

/// Samples `n_prompts` scenes, generates audio tokens for them with
/// `params` (normally the EMA weights) and scores the result.
pub fn run_eval(model: &Model, params: &ModelParams, grammar: &Grammar, n_prompts: usize, cfg: &SampleConfig) -> Result<EvalReport> {
    let prompts = sample_prompts(grammar, cfg.seed, rng::LABEL_EVAL, n_prompts);
    let grids = generate_for_prompts(model, params, grammar, &prompts, cfg)?;
    evaluate_grids(grammar, &prompts, &grids, cfg)
}

/// `(proxy_fad, proxy_kl)` between two independent reference sets of size
/// `n`: the sampling noise floor of the metrics.
pub fn reference_noise_floor(grammar: &Grammar, seed: u64, n: usize) -> Result<(f64, f64)> {
    let (sa, ga) = reference_set(grammar, seed, 1, n);
    let (sb, gb) = reference_set(grammar, seed, 2, n);
    let da: Vec<Scene> = ga.iter().map(|g| grammar.decode_audio_tokens(g).scene).collect();
    let db: Vec<Scene> = gb.iter().map(|g| grammar.decode_audio_tokens(g).scene).collect();
    debug_assert_eq!(sa.len(), sb.len());
    Ok((proxy_fad(&ga, &gb, grammar)?, proxy_kl(&da, &db, grammar.spec().n_event_types)?))
}
