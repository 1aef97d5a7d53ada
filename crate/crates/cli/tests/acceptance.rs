//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line for
//! its criterion before asserting, so the verdicts can be read from
//! `cargo test --test acceptance -- --nocapture` in one place.

use std::time::Instant;

use nalgebra::DMatrix;
use rrlm::eval::{proxy_fad, proxy_kl, reference_noise_floor, reference_set, run_eval, EvalReport};
use rrlm::gradcheck::{self, toy_params};
use rrlm::losses::{batch_regularizer, pairwise_similarity, representation_regularization, total_loss, unconditional_ce, LossConfig, TrainMode};
use rrlm::model::{ForwardOptions, Model, ModelConfig, ModelParams};
use rrlm::sampler::{draw, generate, top_k_filter, top_k_ids, SampleConfig, SampleEvent};
use rrlm::synthdata::{Grammar, GrammarSpec, Scene};
use rrlm::tensor::{PoolMode, Reduction, Tape, Tensor};
use rrlm::trainer::{ema_update, MetricsWriter, TrainConfig, Trainer};
use rrlm::rng;
use rrlm_cli::ablate::{grid_csv, run_grid, GridFile};
use rrlm_cli::config::RunConfig;

fn verdict(criterion: u32, name: &str, ok: bool, detail: &str) {
    println!("{} criterion {criterion:>2} ({name}): {detail}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "criterion {criterion} ({name}) failed: {detail}");
}

fn scalar(tape: &Tape, v: rrlm::tensor::Var) -> f64 {
    tape.value(v).item().unwrap()
}

fn default_model() -> (Grammar, Model) {
    let g = Grammar::new(GrammarSpec::default()).unwrap();
    let m = Model::new(ModelConfig::for_grammar(g.spec())).unwrap();
    (g, m)
}

fn trainer(cfg_ratio: f64, lambda: f64, total: usize, seed: u64) -> Trainer {
    let g = GrammarSpec::default();
    let m = ModelConfig { seed, ..ModelConfig::for_grammar(&g) };
    let t = TrainConfig { total_steps: total, warmup_steps: total / 10, cfg_ratio, lambda, seed, ..TrainConfig::default() };
    Trainer::new(g, m, t).unwrap()
}

fn global_norm(g: &[Tensor]) -> f64 {
    g.iter().flat_map(|t| t.data()).map(|v| v * v).sum::<f64>().sqrt()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

#[test]
fn criterion_01_gradient_integrity() {
    let start = Instant::now();
    let results = gradcheck::full_suite(20).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let model_checks = ["model_conditional_loss", "model_cfg_loss_lambda3"];
    let mut worst_prim: f64 = 0.0;
    let mut worst_model: f64 = 0.0;
    for r in &results {
        if model_checks.contains(&r.name.as_str()) {
            worst_model = worst_model.max(r.max_rel_error);
        } else {
            worst_prim = worst_prim.max(r.max_rel_error);
        }
    }
    let covered = model_checks.iter().all(|n| results.iter().any(|r| r.name == *n));
    let ok = covered && worst_prim < 1e-5 && worst_model < 1e-4 && secs < 120.0;
    let detail = format!(
        "{} checks; worst primitive {worst_prim:.2e} (< 1e-5), worst model {worst_model:.2e} (< 1e-4), {secs:.1}s (< 120s)",
        results.len()
    );
    verdict(1, "gradient integrity", ok, &detail);
}

fn similarity(x: Tensor) -> Tensor {
    let mut tape = Tape::new();
    let v = tape.constant(x);
    let s = pairwise_similarity(&mut tape, v).unwrap();
    tape.value(s).clone()
}

fn rr_value(text_sim: Tensor, audio_sim: Tensor) -> f64 {
    let mut tape = Tape::new();
    let t = tape.constant(text_sim);
    let a = tape.constant(audio_sim);
    let rr = representation_regularization(&mut tape, t, a).unwrap();
    scalar(&tape, rr)
}

#[test]
fn criterion_02_regularizer_exactness() {
    // B = 2: text similarity 0 off the diagonal, audio similarity 1.
    let text_sim = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let audio_sim = Tensor::matrix(2, 2, vec![1.0, 1.0, 1.0, 1.0]).unwrap();
    let hand = rr_value(text_sim, audio_sim);

    let mut r = rng::stream(2, &[0]);
    let (b, d) = (8, 6);
    let text = rng::normal_tensor(&mut r, &[b, d], 1.0);
    let identical = rr_value(similarity(text.clone()), similarity(text.clone()));

    let raw = rng::normal_tensor(&mut r, &[d, d], 1.0);
    let q = DMatrix::from_row_slice(d, d, raw.data()).qr().q();
    let rotated = DMatrix::from_row_slice(b, d, text.data()) * q;
    let scaled: Vec<f64> = (0..b).flat_map(|i| (0..d).map(move |j| (i, j))).map(|(i, j)| rotated[(i, j)] * (0.5 + i as f64)).collect();
    let transformed = rr_value(similarity(text), similarity(Tensor::matrix(b, d, scaled).unwrap()));

    let ok = hand == 1.0 && identical == 0.0 && transformed < 1e-10;
    let detail = format!("hand case {hand} (= 1), identical {identical} (= 0), rotated+scaled {transformed:.2e} (< 1e-10)");
    verdict(2, "regularizer exactness", ok, &detail);
}

#[test]
fn criterion_03_mode_dispatch() {
    // Conditional-only training is bit-identical for lambda 0 and 3.
    let mut runs = [trainer(0.0, 0.0, 8, 1), trainer(0.0, 3.0, 8, 1)];
    let csv: Vec<String> = runs
        .iter_mut()
        .map(|t| {
            let mut w = MetricsWriter::append(Vec::new());
            t.run(None, |m| w.write(m)).unwrap();
            String::from_utf8(w.into_inner()).unwrap()
        })
        .collect();
    let cond_same = csv[0] == csv[1] && runs[0].state() == runs[1].state();

    // A cfg step's total against separately computed components.
    let (g, m) = default_model();
    let p = toy_params(&m, 3);
    let batch = g.make_batch(11, 6, true).unwrap();
    let component = |which: u8| {
        let mut tape = Tape::new();
        let vars = m.constants(&mut tape, &p);
        let out = m.forward(&mut tape, &vars, &batch, ForwardOptions::default()).unwrap();
        let v = match which {
            0 => unconditional_ce(&mut tape, &out, &batch, Reduction::Mean).unwrap(),
            _ => batch_regularizer(&mut tape, &out, &batch, PoolMode::Max).unwrap(),
        };
        scalar(&tape, v)
    };
    let (ce, rr) = (component(0), component(1));
    let mut tape = Tape::new();
    let vars = m.constants(&mut tape, &p);
    let out = m.forward(&mut tape, &vars, &batch, ForwardOptions::default()).unwrap();
    let terms = total_loss(&mut tape, &out, &batch, TrainMode::Cfg, &LossConfig { lambda: 3.0, ..LossConfig::default() }).unwrap();
    let gap = (scalar(&tape, terms.total) - (ce + 3.0 * rr)).abs();

    let ok = cond_same && gap < 1e-12 && rr > 0.0;
    let detail = format!("conditional runs bit-identical: {cond_same}; |total - (ce + 3 rr)| = {gap:.2e} (< 1e-12), rr = {rr:.4}");
    verdict(3, "mode dispatch", ok, &detail);
}

#[test]
fn criterion_04_cfg_structure() {
    let (g, m) = default_model();
    let p = toy_params(&m, 4);
    let mut batch = g.make_batch(4, 4, true).unwrap();
    let (l0, _) = m.forward_values(&p, &batch).unwrap();
    let mut r = rng::stream(4, &[1]);
    batch.text_embeddings = rng::normal_tensor(&mut r, batch.text_embeddings.shape(), 10.0);
    let (l1, _) = m.forward_values(&p, &batch).unwrap();
    let invariant = l0.checksum() == l1.checksum() && l0.data() == l1.data();

    let mut t = trainer(1.0, 0.0, 10, 4);
    let cross = t.model().cross_attention_params();
    let mut zero = !cross.is_empty();
    while !t.is_done() {
        let (metrics, grads) = t.peek_gradients().unwrap();
        zero &= metrics.mode == TrainMode::Cfg;
        zero &= cross.iter().all(|&i| grads[i].data().iter().all(|&v| v == 0.0));
        t.step().unwrap();
    }
    let ok = invariant && zero;
    let detail = format!(
        "dropped logits text-invariant: {invariant}; cross-attention grads exactly zero over 10 cfg steps ({} tensors): {zero}",
        cross.len()
    );
    verdict(4, "cfg structure", ok, &detail);
}

#[test]
fn criterion_05_causality() {
    let g = Grammar::new(GrammarSpec { motif_len: 4, max_events: 2, ..GrammarSpec::default() }).unwrap();
    let m = Model::new(ModelConfig::for_grammar(g.spec())).unwrap();
    let p = toy_params(&m, 5);
    let base = g.make_batch(5, 2, false).unwrap();
    let (len, streams, v) = (base.audio_len, base.streams, g.spec().audio_vocab);
    let (l0, _) = m.forward_values(&p, &base).unwrap();
    let at = |t: &Tensor, k: usize, i: usize| t.data()[(k * len + i) * v..][..v].to_vec();
    let mut violations = 0;
    for i in 0..len {
        for k in 0..streams {
            let mut probe = base.clone();
            probe.audio_tokens[k * len + i] = (probe.audio_tokens[k * len + i] + 29) % v;
            let (l1, _) = m.forward_values(&p, &probe).unwrap();
            for j in 0..=i {
                for kk in 0..streams {
                    violations += usize::from(at(&l0, kk, j) != at(&l1, kk, j));
                }
            }
        }
    }
    let ok = len == 8 && violations == 0;
    verdict(5, "causality", ok, &format!("length {len}, {} probes, {violations} earlier-position changes (= 0)", len * streams));
}

#[test]
fn criterion_06_directional_reproduction() {
    let start = Instant::now();
    let mut rows: Vec<[EvalReport; 2]> = Vec::new();
    for seed in 0..3 {
        let run = |lambda: f64| {
            let cfg = RunConfig { lambda, seed, ..RunConfig::default() };
            let mut t = Trainer::new(cfg.grammar(), cfg.model(), cfg.train()).unwrap();
            t.run(None, |_| Ok(())).unwrap();
            run_eval(t.model(), &t.state().ema, t.grammar(), cfg.eval_prompts, &cfg.sample()).unwrap()
        };
        let pair = [run(0.0), run(3.0)];
        println!(
            "  seed {seed}: base acc {:.3} fad {:.6} | rr acc {:.3} fad {:.6}",
            pair[0].scene_accuracy, pair[0].proxy_fad, pair[1].scene_accuracy, pair[1].proxy_fad
        );
        rows.push(pair);
    }
    let med = |i: usize, f: fn(&EvalReport) -> f64| median(rows.iter().map(|r| f(&r[i])).collect());
    let (acc_base, acc_rr) = (med(0, |r| r.scene_accuracy), med(1, |r| r.scene_accuracy));
    let (fad_base, fad_rr) = (med(0, |r| r.proxy_fad), med(1, |r| r.proxy_fad));
    let secs = start.elapsed().as_secs_f64();
    let ok = acc_rr >= acc_base && fad_rr <= fad_base && secs < 45.0 * 60.0;
    let detail = format!(
        "median scene_acc rr {acc_rr:.3} vs base {acc_base:.3} (rr >= base); median proxy_fad rr {fad_rr:.6} vs base {fad_base:.6} (rr <= base); {secs:.0}s (< 2700s)"
    );
    verdict(6, "directional reproduction", ok, &detail);
}

#[test]
fn criterion_07_ablation_harness() {
    let base = RunConfig { total_steps: 30, warmup_steps: 3, eval_prompts: 20, ..RunConfig::default() };
    let grid: GridFile =
        serde_json::from_str(r#"{"pool": ["max", "mean"], "lambda": [0, 1, 2, 3, 4], "cfg_ratio": [0, 0.1, 0.2]}"#).unwrap();
    let cells = grid.expand(&base).unwrap();
    let first = grid_csv(&run_grid(&base, &cells, 1).unwrap());
    let second = grid_csv(&run_grid(&base, &cells, 2).unwrap());
    let rows = first.lines().count() - 1;
    let ok = rows == 30 && first == second;
    verdict(7, "ablation harness", ok, &format!("{rows} rows (= 30), re-run byte-identical: {}", first == second));
}

#[test]
fn criterion_08_sampler_contracts() {
    let mut r = rng::stream(8, &[0]);
    let mut argmax_ok = true;
    for _ in 0..200 {
        let l: Vec<f64> = (0..64).map(|_| rng::normal(&mut r, 3.0)).collect();
        let arg = (0..64).max_by(|&a, &b| l[a].total_cmp(&l[b]).then(b.cmp(&a))).unwrap();
        argmax_ok &= draw(&mut r, &top_k_filter(&l, 1, 1.0).unwrap()) == arg;
    }

    let l: Vec<f64> = (0..64).map(|_| rng::normal(&mut r, 2.0)).collect();
    let keep = top_k_ids(&l, 16).unwrap();
    let probs = top_k_filter(&l, 16, 1.0).unwrap();
    let outside = (0..10_000).filter(|_| !keep.contains(&draw(&mut r, &probs))).count();

    // Instrumented generation: every emitted id is in its step's top-k set.
    let (g, m) = default_model();
    let p = toy_params(&m, 8);
    let prompts: Vec<Scene> = rrlm::sampler::sample_prompts(&g, 8, rng::LABEL_PROMPT, 2);
    let mut stray = 0;
    let mut obs = |e: &SampleEvent| stray += usize::from(!e.retained.contains(&e.token) || e.retained.len() != 16);
    generate(&m, &p, &g, &prompts, &SampleConfig { seed: 8, ..SampleConfig::default() }, Some(&mut obs)).unwrap();

    let cfg = SampleConfig { guidance_scale: 0.0, seed: 8, ..SampleConfig::default() };
    let a = generate(&m, &p, &g, &prompts[..1], &cfg, None).unwrap();
    let b = generate(&m, &p, &g, &prompts[1..], &cfg, None).unwrap();
    let independent = prompts[0] != prompts[1] && a == b;

    let ok = argmax_ok && outside == 0 && stray == 0 && independent;
    let detail = format!(
        "k=1 is argmax: {argmax_ok}; census ids outside top-16: {outside} of 10000; generation strays: {stray}; gamma=0 prompt-independent: {independent}"
    );
    verdict(8, "sampler contracts", ok, &detail);
}

#[test]
fn criterion_09_trainer_contracts() {
    let dir = tempfile::tempdir().unwrap();
    let csv = |t: &mut Trainer, steps: Option<usize>| {
        let mut w = MetricsWriter::append(Vec::new());
        t.run(steps, |m| w.write(m)).unwrap();
        String::from_utf8(w.into_inner()).unwrap()
    };
    let mut whole = trainer(0.3, 3.0, 24, 9);
    let full = csv(&mut whole, None);
    let mut first = trainer(0.3, 3.0, 24, 9);
    let mut resumed = csv(&mut first, Some(11));
    let path = dir.path().join("mid.ckpt");
    first.save_checkpoint(&path).unwrap();
    let mut second = Trainer::load_checkpoint(&path).unwrap();
    resumed.push_str(&csv(&mut second, None));
    let resume_ok = resumed == full && second.state() == whole.state();

    let mut t = trainer(0.3, 3.0, 24, 10);
    let mut worst: f64 = 0.0;
    while !t.is_done() {
        let (_, grads) = t.peek_gradients().unwrap();
        worst = worst.max(global_norm(&grads));
        t.step().unwrap();
    }

    let (_, m) = default_model();
    let held: ModelParams = m.init_params(1);
    let start = m.init_params(2);
    let mut ema = start.clone();
    let mut ema_err: f64 = 0.0;
    for n in 1..=100 {
        ema_update(&mut ema, &held, 0.99);
        let decay = 0.99f64.powi(n);
        for ((e, s), p) in ema.tensors.iter().zip(&start.tensors).zip(&held.tensors) {
            for ((&e, &s), &p) in e.data().iter().zip(s.data()).zip(p.data()) {
                ema_err = ema_err.max((e - (p + decay * (s - p))).abs());
            }
        }
    }

    let ok = resume_ok && worst <= 1.0 + 1e-12 && ema_err < 1e-12;
    let detail = format!(
        "resume reproduces metric stream: {resume_ok}; max post-clip norm {worst:.15} (<= 1 + 1e-12); EMA closed-form error {ema_err:.1e}"
    );
    verdict(9, "trainer contracts", ok, &detail);
}

#[test]
fn criterion_10_metric_sanity() {
    let (g, m) = default_model();
    let (scenes, grids) = reference_set(&g, 0, 0, 500);
    let decoded: Vec<Scene> = grids.iter().map(|t| g.decode_audio_tokens(t).scene).collect();
    let fad_self = proxy_fad(&grids, &grids, &g).unwrap();
    let kl_self = proxy_kl(&decoded, &decoded, g.spec().n_event_types).unwrap();
    assert_eq!(scenes.len(), 500);

    let untrained = run_eval(&m, &m.init_params(0), &g, 200, &SampleConfig::default()).unwrap();
    let (fad_floor, kl_floor) = reference_noise_floor(&g, 0, 500).unwrap();

    let ok = fad_self < 1e-8 && kl_self < 1e-12 && untrained.scene_accuracy < 0.05 && fad_floor < 0.05 && kl_floor < 0.01;
    let detail = format!(
        "fad(X,X) {fad_self:.1e} (< 1e-8); kl(X,X) {kl_self:.1e} (< 1e-12); untrained acc {:.3} (< 0.05); ref-vs-ref n=500 fad {fad_floor:.5} (< 0.05), kl {kl_floor:.5} (< 0.01)",
        untrained.scene_accuracy
    );
    verdict(10, "metric sanity", ok, &detail);
}
