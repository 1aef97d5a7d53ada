//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates forward values on fresh tapes with
//! every input registered as a constant, so it shares no code path with the
//! reverse sweep it checks.

use crate::error::Result;
use crate::losses::{total_loss, LossConfig, TrainMode};
use crate::model::{pooled_audio_representation, ForwardOptions, Model, ModelConfig, ModelParams};
use crate::synthdata::{Grammar, GrammarSpec};
use crate::rng;
use crate::tensor::{AttentionSpec, PoolMode, Reduction, Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;

/// Denominator floor for the relative error; keeps near-zero gradient
/// entries from turning round-off into huge ratios.
pub const REL_FLOOR: f64 = 1e-4;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Maximum relative error between reverse-mode and central-difference
/// gradients of `f` with respect to every entry of every input.
pub fn check<F>(inputs: &[Tensor], f: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| tape.grad_tensor(v)).collect();

    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = values.iter().map(|v| t.constant(v.clone())).collect();
        let out = f(&mut t, &vs)?;
        t.value(out).item()
    };

    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (i, grad) in analytic.iter().enumerate() {
        for e in 0..inputs[i].numel() {
            let x0 = inputs[i].data()[e];
            probe[i].data_mut()[e] = x0 + FD_STEP;
            let up = eval(&probe)?;
            probe[i].data_mut()[e] = x0 - FD_STEP;
            let down = eval(&probe)?;
            probe[i].data_mut()[e] = x0;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(grad.data()[e], numeric));
        }
    }
    Ok(worst)
}

/// One line of a gradient-check report.
#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// Tolerance for single primitive operations.
pub const PRIMITIVE_TOLERANCE: f64 = 1e-5;
/// Tolerance for the whole toy-model loss.
pub const MODEL_TOLERANCE: f64 = 1e-4;

/// Weighted sum `sum(w * x)` so vector-valued ops reduce to a generic scalar.
pub fn weighted_sum(tape: &mut Tape, x: Var, w: &Tensor) -> Result<Var> {
    let shaped = w.clone().reshape(tape.shape(x))?;
    let w = tape.constant(shaped);
    let p = tape.mul(x, w)?;
    Ok(tape.sum(p))
}

/// Finite-difference checks of every differentiable primitive, worst case
/// over `seeds` random draws each.
pub fn primitive_suite(seeds: u64) -> Result<Vec<CheckResult>> {
    type Case = (&'static str, fn(&mut rng::Rng) -> Result<f64>);
    let cases: [Case; 13] = [
        ("matmul", |r| {
            let a = rng::normal_tensor(r, &[3, 4], 1.0);
            let b = rng::normal_tensor(r, &[4, 2], 1.0);
            let w = rng::normal_tensor(r, &[3, 2], 1.0);
            check(&[a, b], |t, v| {
                let y = t.matmul(v[0], v[1])?;
                weighted_sum(t, y, &w)
            })
        }),
        ("add_sub_mul_scale", |r| {
            let a = rng::normal_tensor(r, &[2, 3], 1.0);
            let b = rng::normal_tensor(r, &[2, 3], 1.0);
            let w = rng::normal_tensor(r, &[2, 3], 1.0);
            check(&[a, b], |t, v| {
                let s = t.add(v[0], v[1])?;
                let d = t.sub(s, v[1])?;
                let m = t.mul(d, v[1])?;
                let y = t.scale(m, -1.7);
                weighted_sum(t, y, &w)
            })
        }),
        ("add_row", |r| {
            let x = rng::normal_tensor(r, &[4, 3], 1.0);
            let b = rng::normal_tensor(r, &[3], 1.0);
            let w = rng::normal_tensor(r, &[4, 3], 1.0);
            check(&[x, b], |t, v| {
                let y = t.add_row(v[0], v[1])?;
                weighted_sum(t, y, &w)
            })
        }),
        ("gelu", |r| {
            let x = rng::normal_tensor(r, &[9], 1.5);
            let w = rng::normal_tensor(r, &[9], 1.0);
            check(&[x], |t, v| {
                let y = t.gelu(v[0]);
                weighted_sum(t, y, &w)
            })
        }),
        ("softmax", |r| {
            let x = rng::normal_tensor(r, &[7], 1.0);
            let w = rng::normal_tensor(r, &[7], 1.0);
            check(&[x], |t, v| {
                let y = t.softmax(v[0], 0)?;
                weighted_sum(t, y, &w)
            })
        }),
        ("softmax_inner_axis", |r| {
            let x = rng::normal_tensor(r, &[2, 3, 4], 1.0);
            let w = rng::normal_tensor(r, &[2, 3, 4], 1.0);
            check(&[x], |t, v| {
                let y = t.softmax(v[0], 1)?;
                weighted_sum(t, y, &w)
            })
        }),
        ("layer_norm", |r| {
            let x = rng::normal_tensor(r, &[3, 5], 1.0);
            let g = rng::normal_tensor(r, &[5], 1.0);
            let b = rng::normal_tensor(r, &[5], 1.0);
            let w = rng::normal_tensor(r, &[3, 5], 1.0);
            check(&[x, g, b], |t, v| {
                let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
                weighted_sum(t, y, &w)
            })
        }),
        ("embedding", |r| {
            let table = rng::normal_tensor(r, &[5, 3], 1.0);
            let w = rng::normal_tensor(r, &[4, 3], 1.0);
            check(&[table], |t, v| {
                let y = t.embedding(v[0], &[4, 0, 4, 2])?;
                weighted_sum(t, y, &w)
            })
        }),
        ("attention", |r| {
            let (batch, tq, tk, d) = (2, 3, 4, 4);
            let q = rng::normal_tensor(r, &[batch * tq, d], 1.0);
            let k = rng::normal_tensor(r, &[batch * tk, d], 1.0);
            let vv = rng::normal_tensor(r, &[batch * tk, d], 1.0);
            let w = rng::normal_tensor(r, &[batch * tq, d], 1.0);
            let spec = AttentionSpec {
                batch,
                q_len: tq,
                kv_len: tk,
                heads: 2,
                causal: false,
                key_mask: Some(vec![true, true, false, true, true, true, true, false]),
                active: None,
            };
            check(&[q, k, vv], |t, v| {
                let y = t.attention(v[0], v[1], v[2], spec.clone())?;
                weighted_sum(t, y, &w)
            })
        }),
        ("causal_attention", |r| {
            let (batch, len, d) = (2, 4, 6);
            let q = rng::normal_tensor(r, &[batch * len, d], 1.0);
            let k = rng::normal_tensor(r, &[batch * len, d], 1.0);
            let vv = rng::normal_tensor(r, &[batch * len, d], 1.0);
            let w = rng::normal_tensor(r, &[batch * len, d], 1.0);
            let spec = AttentionSpec {
                batch,
                q_len: len,
                kv_len: len,
                heads: 3,
                causal: true,
                key_mask: None,
                active: Some(vec![true, false]),
            };
            check(&[q, k, vv], |t, v| {
                let y = t.attention(v[0], v[1], v[2], spec.clone())?;
                weighted_sum(t, y, &w)
            })
        }),
        ("cross_entropy", |r| {
            let logits = rng::normal_tensor(r, &[5, 8], 1.0);
            check(&[logits], |t, v| t.cross_entropy(v[0], &[1, 7, 8, 0, 3], Some(8), Reduction::Mean))
        }),
        ("pool_max_and_mean", |r| {
            let x = rng::normal_tensor(r, &[6, 3], 1.0);
            let w1 = rng::normal_tensor(r, &[2, 3], 1.0);
            let w2 = rng::normal_tensor(r, &[2, 3], 1.0);
            let mask = [true, false, true, true, true, false];
            check(&[x], |t, v| {
                let a = t.pool(v[0], &mask, 2, PoolMode::Max)?;
                let b = t.pool(v[0], &mask, 2, PoolMode::Mean)?;
                let sa = weighted_sum(t, a, &w1)?;
                let sb = weighted_sum(t, b, &w2)?;
                t.add(sa, sb)
            })
        }),
        ("cosine_and_pairwise", |r| {
            let a = rng::normal_tensor(r, &[5], 1.0);
            let b = rng::normal_tensor(r, &[5], 1.0);
            let x = rng::normal_tensor(r, &[4, 5], 1.0);
            let w = rng::normal_tensor(r, &[4, 4], 1.0);
            check(&[a, b, x], |t, v| {
                let c = t.cosine(v[0], v[1], 1e-8)?;
                let s = t.pairwise_cosine(v[2], 1e-8)?;
                let ws = weighted_sum(t, s, &w)?;
                t.add(c, ws)
            })
        }),
    ];

    let mut out = Vec::with_capacity(cases.len());
    for (name, case) in cases {
        let mut worst = 0.0f64;
        for seed in 0..seeds {
            let mut r = rng::stream(seed, &[0x6772_6164]);
            worst = worst.max(case(&mut r)?);
        }
        out.push(CheckResult { name: name.to_string(), max_rel_error: worst, tolerance: PRIMITIVE_TOLERANCE });
    }
    Ok(out)
}

/// Grammar small enough for whole-model finite differences.
pub fn toy_grammar() -> GrammarSpec {
    GrammarSpec {
        n_event_types: 3,
        n_attributes: 2,
        motif_len: 2,
        streams: 2,
        audio_vocab: 8,
        text_vocab: 8,
        text_dim: 4,
        noise_prob: 0.05,
        max_events: 2,
        seed: 0,
    }
}

/// One layer, `d_model = 8`.
pub fn toy_model_config(grammar: &GrammarSpec) -> ModelConfig {
    ModelConfig { d_model: 8, n_layers: 1, n_heads: 2, d_ff: 16, ..ModelConfig::for_grammar(grammar) }
}

/// Initial parameters plus Normal(0, 0.3) noise, so that gains, biases and
/// attention patterns are all generic.
pub fn toy_params(model: &Model, seed: u64) -> ModelParams {
    let mut p = model.init_params(seed);
    let mut r = rng::stream(seed, &[0x6e6f_6973]);
    for t in &mut p.tensors {
        t.data_mut().iter_mut().for_each(|v| *v += rng::normal(&mut r, 0.3));
    }
    p
}

/// Finite-difference checks of the full toy model: the conditional loss,
/// the cfg loss with `lambda = 3`, and a weighted sum of the pooled audio
/// representation.
pub fn model_suite(seeds: u64) -> Result<Vec<CheckResult>> {
    let grammar = Grammar::new(toy_grammar())?;
    let model = Model::new(toy_model_config(grammar.spec()))?;
    let loss_cfg = LossConfig { lambda: 3.0, ..LossConfig::default() };
    let mut worst = [0.0f64; 3];
    for seed in 0..seeds {
        let params = toy_params(&model, seed);
        let cond = grammar.make_batch(seed, 3, false)?;
        let dropped = grammar.make_batch(seed, 3, true)?;
        let run = |batch: &crate::synthdata::TokenBatch, mode: TrainMode| {
            check(&params.tensors, |t, v| {
                let out = model.forward(t, v, batch, ForwardOptions::default())?;
                Ok(total_loss(t, &out, batch, mode, &loss_cfg)?.total)
            })
        };
        worst[0] = worst[0].max(run(&cond, TrainMode::Conditional)?);
        worst[1] = worst[1].max(run(&dropped, TrainMode::Cfg)?);
        let w = rng::normal_tensor(&mut rng::stream(seed, &[0x706f_6f6c]), &[3, 8], 1.0);
        worst[2] = worst[2].max(check(&params.tensors, |t, v| {
            let out = model.forward(t, v, &cond, ForwardOptions::default())?;
            let a = pooled_audio_representation(t, &out, &cond, PoolMode::Max)?;
            weighted_sum(t, a, &w)
        })?);
    }
    Ok(vec![
        CheckResult { name: "model_conditional_loss".into(), max_rel_error: worst[0], tolerance: MODEL_TOLERANCE },
        CheckResult { name: "model_cfg_loss_lambda3".into(), max_rel_error: worst[1], tolerance: MODEL_TOLERANCE },
        CheckResult { name: "model_pooled_audio".into(), max_rel_error: worst[2], tolerance: PRIMITIVE_TOLERANCE },
    ])
}

/// Primitive suite followed by the model suite.
pub fn full_suite(seeds: u64) -> Result<Vec<CheckResult>> {
    let mut out = primitive_suite(seeds)?;
    out.extend(model_suite(seeds.min(3))?);
    Ok(out)
}
