//! Training objectives: per-stream next-token cross entropy, batch pairwise
//! cosine similarity, and the similarity-discrepancy regularizer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{pooled_audio_representation, pooled_text_representation, ForwardOutput};
use crate::synthdata::TokenBatch;
use crate::tensor::{PoolMode, Reduction, Tape, Tensor, Var};

pub const COSINE_EPS: f64 = 1e-8;

/// Which branch of the combined objective a step uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    /// Text-conditioned step: plain cross entropy.
    Conditional,
    /// Text-dropped step: cross entropy plus the weighted regularizer.
    Cfg,
}

impl TrainMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::Conditional => "conditional",
            TrainMode::Cfg => "cfg",
        }
    }
}

/// Sum over streams of the cross entropy of each stream's next-token
/// predictions. Padding positions are ignored; with [`Reduction::Mean`] each
/// stream is averaged over the batch's valid positions before summing.
pub fn sequence_cross_entropy(tape: &mut Tape, output: &ForwardOutput, batch: &TokenBatch, reduction: Reduction) -> Result<Var> {
    let pad = tape.shape(output.logits[0])[1];
    let mut total: Option<Var> = None;
    for (k, &logits) in output.logits.iter().enumerate() {
        let targets: Vec<usize> = (0..batch.batch)
            .flat_map(|b| (0..batch.audio_len).map(move |i| (b, i)))
            .map(|(b, i)| if batch.audio_mask[b * batch.audio_len + i] { batch.token(b, k, i) } else { pad })
            .collect();
        let ce = tape.cross_entropy(logits, &targets, Some(pad), reduction)?;
        total = Some(match total {
            None => ce,
            Some(acc) => tape.add(acc, ce)?,
        });
    }
    total.ok_or_else(|| Error::Dimension("model output has no streams".into()))
}

fn require_flags(batch: &TokenBatch, dropped: bool, what: &str) -> Result<()> {
    if batch.cfg_dropped.iter().any(|&d| d != dropped) {
        return Err(Error::ModeMismatch(format!(
            "{what} needs every sample's cfg_dropped = {dropped}"
        )));
    }
    Ok(())
}

/// Cross entropy for a text-conditioned forward pass.
pub fn conditional_ce(tape: &mut Tape, output: &ForwardOutput, batch: &TokenBatch, reduction: Reduction) -> Result<Var> {
    require_flags(batch, false, "conditional cross entropy")?;
    sequence_cross_entropy(tape, output, batch, reduction)
}

/// Cross entropy for a text-dropped forward pass. The arithmetic is the
/// conditional one; only the forward pass differs.
pub fn unconditional_ce(tape: &mut Tape, output: &ForwardOutput, batch: &TokenBatch, reduction: Reduction) -> Result<Var> {
    require_flags(batch, true, "unconditional cross entropy")?;
    sequence_cross_entropy(tape, output, batch, reduction)
}

/// `[B, B]` cosine similarities between the rows of `reps`.
pub fn pairwise_similarity(tape: &mut Tape, reps: Var) -> Result<Var> {
    let shape = tape.shape(reps).to_vec();
    if shape.len() != 2 {
        return Err(Error::Dimension(format!("pairwise similarity needs [B, D], got {shape:?}")));
    }
    if shape[0] < 2 {
        return Err(Error::BatchSize(shape[0]));
    }
    tape.pairwise_cosine(reps, COSINE_EPS)
}

/// Mean squared discrepancy between the off-diagonal entries of the text
/// and audio similarity matrices, over all `B (B - 1)` ordered pairs. The
/// text matrix is detached: no gradient flows into it.
pub fn representation_regularization(tape: &mut Tape, text_sim: Var, audio_sim: Var) -> Result<Var> {
    let (ts, as_) = (tape.shape(text_sim).to_vec(), tape.shape(audio_sim).to_vec());
    if ts != as_ || ts.len() != 2 || ts[0] != ts[1] {
        return Err(Error::Dimension(format!("similarity matrices {ts:?} vs {as_:?}")));
    }
    let b = ts[0];
    if b < 2 {
        return Err(Error::BatchSize(b));
    }
    let text = tape.constant(tape.value(text_sim).clone());
    let diff = tape.sub(text, audio_sim)?;
    let sq = tape.mul(diff, diff)?;
    let off: Vec<f64> = (0..b * b).map(|i| if i / b == i % b { 0.0 } else { 1.0 }).collect();
    let off = tape.constant(Tensor::new(vec![b, b], off)?);
    let sq = tape.mul(sq, off)?;
    let total = tape.sum_sorted(sq);
    Ok(tape.scale(total, 1.0 / (b * (b - 1)) as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda: f64,
    pub pool: PoolMode,
    pub reduction: Reduction,
    /// Also add the regularizer on conditional steps.
    pub rr_in_conditional: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda: 3.0, pool: PoolMode::Max, reduction: Reduction::Mean, rr_in_conditional: false }
    }
}

/// Handles to the pieces of the combined objective.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub ce: Var,
    pub rr: Option<Var>,
}

/// Builds the regularizer from this batch's pooled text and audio
/// representations.
pub fn batch_regularizer(tape: &mut Tape, output: &ForwardOutput, batch: &TokenBatch, pool: PoolMode) -> Result<Var> {
    if batch.batch < 2 {
        return Err(Error::BatchSize(batch.batch));
    }
    let text = tape.constant(pooled_text_representation(batch, pool)?);
    let text_sim = pairwise_similarity(tape, text)?;
    let audio = pooled_audio_representation(tape, output, batch, pool)?;
    let audio_sim = pairwise_similarity(tape, audio)?;
    representation_regularization(tape, text_sim, audio_sim)
}

/// Conditional steps use the plain cross entropy; cfg steps add
/// `lambda * regularizer` to the unconditional cross entropy.
pub fn total_loss(tape: &mut Tape, output: &ForwardOutput, batch: &TokenBatch, mode: TrainMode, cfg: &LossConfig) -> Result<LossTerms> {
    match mode {
        TrainMode::Conditional => {
            let ce = conditional_ce(tape, output, batch, cfg.reduction)?;
            if cfg.rr_in_conditional {
                let rr = batch_regularizer(tape, output, batch, cfg.pool)?;
                let weighted = tape.scale(rr, cfg.lambda);
                let total = tape.add(ce, weighted)?;
                Ok(LossTerms { total, ce, rr: Some(rr) })
            } else {
                Ok(LossTerms { total: ce, ce, rr: None })
            }
        }
        TrainMode::Cfg => {
            if batch.batch < 2 {
                return Err(Error::BatchSize(batch.batch));
            }
            let ce = unconditional_ce(tape, output, batch, cfg.reduction)?;
            let rr = batch_regularizer(tape, output, batch, cfg.pool)?;
            let weighted = tape.scale(rr, cfg.lambda);
            let total = tape.add(ce, weighted)?;
            Ok(LossTerms { total, ce, rr: Some(rr) })
        }
    }
}
