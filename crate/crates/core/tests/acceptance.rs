//! Acceptance suite. Runs without the libtest harness so every criterion
//! prints exactly one PASS/FAIL line; the process fails if any criterion does.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use brains::casemodel::{fit_preprocess, generate_synthetic, CaseRecord, GeneratorConfig, LabelSet, SubtypeLabel};
use brains::diagnose::{
    checkpoint_from_bytes, checkpoint_load, checkpoint_save, checkpoint_to_bytes, example_loss, example_loss_grads,
    predict_local, predict_remote, rerank_aux_loss_grads, Checkpoint, DiagnoseError, Model, ModelConfig,
    RemoteConfig, TrainConfig,
};
use brains::encoder::{EncoderConfig, HiddenSequence};
use brains::eval::{compute_metrics, run_experiment, run_experiment_on, ExperimentConfig, Variant};
use brains::fusion::{build_concat, fuse, fuse_backward, ConcatMatrix, FusionParams};
use brains::linalg::Matrix;
use brains::retrieval::{index_load, index_save, read_index, retrieve_vector, write_index, RerankerParams, VectorIndex};
use brains::screen::{Artifacts, ErrorCode};

use common::Reply;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);
type Perturb<'a> = dyn FnMut(&mut dyn FnMut(&mut Matrix)) -> f64 + 'a;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

fn rand_sequence(rng: &mut ChaCha8Rng, d: usize, tokens: usize, scale: f64) -> HiddenSequence {
    HiddenSequence {
        cls: rand_vec(rng, d, scale),
        tokens: (0..tokens).map(|_| rand_vec(rng, d, scale)).collect(),
        source_len: tokens,
    }
}

fn rand_concat(rng: &mut ChaCha8Rng, d: usize, cases: usize, scale: f64) -> ConcatMatrix {
    let seqs: Vec<HiddenSequence> = (0..cases).map(|_| {
        let t = rng.random_range(0..5);
        rand_sequence(rng, d, t, scale)
    }).collect();
    build_concat(&seqs.iter().collect::<Vec<_>>()).unwrap()
}

fn rand_fusion(rng: &mut ChaCha8Rng) -> (usize, FusionParams) {
    let d = [3, 4, 8, 16][rng.random_range(0..4)];
    let dk = [1, 2, 4, 8][rng.random_range(0..4)];
    let shared = rng.random_bool(0.5);
    (d, FusionParams::init(d, dk, shared, rng))
}

/// |a - n| / max(|a|, |n|, 1e-6)
fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

const H: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-4;

// ---------------------------------------------------------------------------

fn attention_normalization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1001);
    let (mut worst, mut calls, mut empty) = (0.0f64, 0, 0);
    for _ in 0..10_000 {
        let (d, params) = rand_fusion(&mut rng);
        let scale = [0.1, 1.0, 10.0, 50.0][rng.random_range(0..4)];
        let cases = rng.random_range(1..=6);
        let mut a = rand_concat(&mut rng, d, cases, scale);
        let masked: Vec<usize> = (0..cases).filter(|_| rng.random_bool(0.3)).collect();
        a.mask_cases(&masked);
        let t = rand_vec(&mut rng, d, scale);
        let out = fuse(&t, Some(&a), &params).map_err(|e| e.to_string())?;
        calls += 1;
        ensure(out.weights.len() == a.rows.len(), || "weight count".into())?;
        for (w, m) in out.weights.iter().zip(&a.mask) {
            ensure((0.0..=1.0).contains(w), || format!("weight {w} outside [0,1]"))?;
            ensure(!*m || *w == 0.0, || format!("masked row has weight {w}"))?;
        }
        if a.active_rows() == 0 {
            empty += 1;
            ensure(out.no_evidence && out.vector.iter().all(|x| *x == 0.0), || "fully masked input".into())?;
            continue;
        }
        let sum: f64 = out.weights.iter().sum();
        worst = worst.max((sum - 1.0).abs());
        ensure((sum - 1.0).abs() <= 1e-9, || format!("weights sum to {sum}"))?;
    }
    Ok(format!("{calls} fuse calls ({empty} fully masked), max |sum - 1| = {worst:.2e}"))
}

fn loss_of(params: &FusionParams, t: &[f64], a: &ConcatMatrix, up: &[f64]) -> f64 {
    let v = fuse(t, Some(a), params).unwrap().vector;
    v.iter().zip(up).map(|(x, g)| x * g).sum()
}

fn fd_matrix(
    m: &mut Perturb,
    rows: usize,
    cols: usize,
    analytic: &Matrix,
    worst: &mut f64,
) -> Result<(), String> {
    for r in 0..rows {
        for c in 0..cols {
            let plus = m(&mut |w: &mut Matrix| w.set(r, c, w.get(r, c) + H));
            let minus = m(&mut |w: &mut Matrix| w.set(r, c, w.get(r, c) - H));
            let n = (plus - minus) / (2.0 * H);
            let e = rel_err(analytic.get(r, c), n);
            *worst = worst.max(e);
            ensure(e <= GRAD_TOL, || format!("({r},{c}) analytic {} numeric {n}", analytic.get(r, c)))?;
        }
    }
    Ok(())
}

fn fusion_gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2002);
    let mut worst = 0.0f64;
    let mut configs = 0;
    while configs < 120 {
        let (d, params) = rand_fusion(&mut rng);
        let cases = rng.random_range(1..=4);
        let mut a = rand_concat(&mut rng, d, cases, 1.0);
        if cases > 1 && rng.random_bool(0.5) {
            a.mask_cases(&[rng.random_range(0..cases)]);
        }
        if a.active_rows() == 0 {
            continue;
        }
        configs += 1;
        let t = rand_vec(&mut rng, d, 1.0);
        let up = rand_vec(&mut rng, params.d_k(), 1.0);
        let g = fuse_backward(&t, Some(&a), &params, &up).map_err(|e| e.to_string())?;

        for which in 0..3 {
            let analytic = match which {
                0 => g.w_q.clone(),
                1 => g.w_k.clone(),
                _ => match &g.w_v {
                    Some(v) => v.clone(),
                    None => continue,
                },
            };
            let mut eval = |f: &mut dyn FnMut(&mut Matrix)| {
                let mut p = params.clone();
                match which {
                    0 => f(&mut p.w_q),
                    1 => f(&mut p.w_k),
                    _ => f(p.w_v.as_mut().unwrap()),
                }
                loss_of(&p, &t, &a, &up)
            };
            fd_matrix(&mut eval, analytic.rows(), analytic.cols(), &analytic, &mut worst)
                .map_err(|e| format!("config {configs} tensor {which}: {e}"))?;
        }
        for i in 0..d {
            let mut tp = t.clone();
            tp[i] += H;
            let mut tm = t.clone();
            tm[i] -= H;
            let n = (loss_of(&params, &tp, &a, &up) - loss_of(&params, &tm, &a, &up)) / (2.0 * H);
            let e = rel_err(g.t_cls[i], n);
            worst = worst.max(e);
            ensure(e <= GRAD_TOL, || format!("config {configs} t_cls[{i}]"))?;
        }
        let rows = g.rows.as_ref().unwrap();
        for (r, grad_row) in rows.iter().enumerate() {
            for (i, &grad) in grad_row.iter().enumerate() {
                let mut ap = a.clone();
                ap.rows[r][i] += H;
                let mut am = a.clone();
                am.rows[r][i] -= H;
                let n = (loss_of(&params, &t, &ap, &up) - loss_of(&params, &t, &am, &up)) / (2.0 * H);
                let e = rel_err(grad, n);
                worst = worst.max(e);
                ensure(e <= GRAD_TOL, || format!("config {configs} row {r}[{i}]"))?;
            }
        }
    }
    Ok(format!("{configs} configurations, every coordinate, max rel err {worst:.2e}"))
}

fn tiny_model(rng: &mut ChaCha8Rng, records: &[CaseRecord]) -> Model {
    let d = [8, 16][rng.random_range(0..2)];
    let cfg = ModelConfig {
        encoder: EncoderConfig { d, heads: 4, seed: rng.random(), ..Default::default() },
        d_k: [4, 8][rng.random_range(0..2)],
        shared_kv: rng.random_bool(0.5),
        seed: rng.random(),
        ..Default::default()
    };
    let mut m = Model::init(cfg, Some(fit_preprocess(records).unwrap())).unwrap();
    // move away from the zero-initialised head so every path carries signal
    for (name, t) in m.tensors_mut() {
        if name.starts_with("head.") {
            for x in t.as_mut_slice() {
                *x = rng.random_range(-0.5..0.5);
            }
        }
    }
    m
}

fn end_to_end_gradients() -> Outcome {
    let records = generate_synthetic(&GeneratorConfig { n: 60, ..Default::default() }, 77).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3003);
    let (mut worst, mut checked) = (0.0f64, 0usize);
    let configs = 30;
    for c in 0..configs {
        let model = tiny_model(&mut rng, &records);
        let unfreeze = c % 2 == 0;
        let target = &records[rng.random_range(0..records.len())];
        let k = rng.random_range(0..=5);
        let refs: Vec<&CaseRecord> = (0..k).map(|_| &records[rng.random_range(0..records.len())]).collect();
        let masked: Vec<usize> = (0..k).filter(|_| rng.random_bool(0.25)).collect();
        let (loss, grads) = example_loss_grads(&model, target, &refs, &masked, unfreeze).map_err(|e| e.to_string())?;
        let direct = example_loss(&model, target, &refs, &masked).map_err(|e| e.to_string())?;
        ensure(loss == direct, || format!("config {c}: loss {loss} vs {direct}"))?;
        if unfreeze {
            ensure(grads.0.contains_key("encoder.projection"), || "projection gradient missing".into())?;
        }
        for (name, g) in &grads.0 {
            // sample up to 24 coordinates per tensor
            let n = g.rows() * g.cols();
            for _ in 0..n.min(24) {
                let idx = rng.random_range(0..n);
                let (r, col) = (idx / g.cols(), idx % g.cols());
                let eval = |delta: f64| {
                    let mut m = model.clone();
                    for (tn, t) in m.tensors_mut() {
                        if &tn == name {
                            t.set(r, col, t.get(r, col) + delta);
                        }
                    }
                    example_loss(&m, target, &refs, &masked).unwrap()
                };
                let num = (eval(H) - eval(-H)) / (2.0 * H);
                let e = rel_err(g.get(r, col), num);
                worst = worst.max(e);
                checked += 1;
                ensure(e <= GRAD_TOL, || format!("config {c} {name}[{r},{col}]: analytic {} numeric {num}", g.get(r, col)))?;
            }
        }
    }

    let mut rworst = 0.0f64;
    let rconfigs = 30;
    for c in 0..rconfigs {
        let d = [4, 8][rng.random_range(0..2)];
        let mut m = Matrix::identity(d);
        for x in m.as_mut_slice() {
            *x += rng.random_range(-0.3..0.3);
        }
        let q = rand_vec(&mut rng, d, 1.0);
        let n = rng.random_range(2..=20);
        let cands: Vec<Vec<f64>> = (0..n).map(|_| rand_vec(&mut rng, d, 1.0)).collect();
        let rel: Vec<f64> = (0..n).map(|i| if i == 0 { 1.0 } else if rng.random_bool(0.4) { rng.random() } else { 0.0 }).collect();
        let temp = [0.1, 0.5, 1.0][rng.random_range(0..3)];
        let (_, g) = rerank_aux_loss_grads(&m, &q, &cands, &rel, temp);
        for r in 0..d {
            for col in 0..d {
                let eval = |delta: f64| {
                    let mut mm = m.clone();
                    mm.set(r, col, mm.get(r, col) + delta);
                    rerank_aux_loss_grads(&mm, &q, &cands, &rel, temp).0
                };
                let num = (eval(H) - eval(-H)) / (2.0 * H);
                let e = rel_err(g.get(r, col), num);
                rworst = rworst.max(e);
                ensure(e <= GRAD_TOL, || format!("rerank config {c} [{r},{col}]"))?;
            }
        }
    }
    Ok(format!(
        "{configs} model configurations ({checked} sampled coordinates incl. encoder projection), max rel err {worst:.2e}; \
         {rconfigs} reranker configurations, max rel err {rworst:.2e}"
    ))
}

// ---------------------------------------------------------------------------

fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v = rand_vec(rng, d, 1.0);
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 {
            return v.iter().map(|x| x / n).collect();
        }
    }
}

fn retrieval_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4004);
    let (mut corpora, mut queries, mut tie_groups) = (0, 0, 0);
    for _ in 0..1000 {
        let d = [8, 64][rng.random_range(0..2)];
        let size = rng.random_range(1..=512);
        let mut vectors: Vec<Vec<f64>> = Vec::with_capacity(size);
        for i in 0..size {
            if i > 0 && rng.random_bool(0.15) {
                vectors.push(vectors[rng.random_range(0..i)].clone());
                tie_groups += 1;
            } else {
                vectors.push(unit(&mut rng, d));
            }
        }
        let mut ids: Vec<String> = (0..size).map(|i| format!("c{:04}-{}", rng.random_range(0..10_000), i)).collect();
        // insertion order differs from id order
        ids.reverse();
        let mut index = VectorIndex::new(d);
        for (id, v) in ids.iter().zip(&vectors) {
            index.add(id, v, LabelSet::EMPTY, [0; 32]).map_err(|e| e.to_string())?;
        }
        corpora += 1;
        for _ in 0..3 {
            let q = if rng.random_bool(0.5) { vectors[rng.random_range(0..size)].clone() } else { unit(&mut rng, d) };
            let n1 = rng.random_range(1..=size + 3);
            // oracle: score every vector, full sort by (score desc, id asc)
            let mut all: Vec<(f64, &str)> = ids
                .iter()
                .zip(&vectors)
                .map(|(id, v)| {
                    let mut s = 0.0;
                    for (a, b) in q.iter().zip(v) {
                        s += a * f64::from(*b as f32);
                    }
                    (s, id.as_str())
                })
                .collect();
            all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(b.1)));
            let expect: Vec<&str> = all.iter().take(n1).map(|x| x.1).collect();
            let got = index.search(&q, n1).map_err(|e| e.to_string())?;
            let got_ids: Vec<&str> = got.iter().map(|c| c.id.as_str()).collect();
            ensure(got_ids == expect, || format!("search mismatch (size {size}, d {d}, n1 {n1})"))?;

            // two-stage path with identity reranker and self-exclusion
            let exclude = ids[rng.random_range(0..size)].clone();
            let k = rng.random_range(1..=8);
            let pool: Vec<&str> = all.iter().map(|x| x.1).filter(|id| *id != exclude).take(n1.min(size)).collect();
            let expect_k: Vec<&str> = pool.iter().copied().take(k).collect();
            match retrieve_vector(&q, Some(&exclude), &index, &RerankerParams::identity(d), k, Some(n1.min(size))) {
                Ok(r) => {
                    let got: Vec<&str> = r.items.iter().map(|c| c.id.as_str()).collect();
                    ensure(got == expect_k, || format!("retrieve mismatch (size {size}, k {k})"))?;
                }
                Err(_) => ensure(pool.is_empty(), || "retrieve failed with candidates left".into())?,
            }
            queries += 1;
        }
    }
    Ok(format!("{corpora} corpora, {queries} queries, {tie_groups} duplicated vectors; identical to exhaustive sort"))
}

// ---------------------------------------------------------------------------

fn masking_invariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5005);
    let mut trials = 0;
    while trials < 500 {
        let (d, params) = rand_fusion(&mut rng);
        let cases = rng.random_range(2..=6);
        let mut a = rand_concat(&mut rng, d, cases, 1.0);
        let m = rng.random_range(1..cases);
        let masked = rand::seq::index::sample(&mut rng, cases, m).into_vec();
        a.mask_cases(&masked);
        let t = rand_vec(&mut rng, d, 1.0);
        let up = rand_vec(&mut rng, params.d_k(), 1.0);
        let mut b = a.clone();
        for &c in &masked {
            for r in b.boundaries[c].clone() {
                b.rows[r] = rand_vec(&mut rng, d, 100.0);
            }
        }
        let (fa, fb) = (fuse(&t, Some(&a), &params).unwrap(), fuse(&t, Some(&b), &params).unwrap());
        ensure(fa.vector == fb.vector && fa.weights == fb.weights, || format!("trial {trials}: output changed"))?;
        let (ga, gb) = (fuse_backward(&t, Some(&a), &params, &up).unwrap(), fuse_backward(&t, Some(&b), &params, &up).unwrap());
        ensure(ga.w_q == gb.w_q && ga.w_k == gb.w_k && ga.w_v == gb.w_v, || format!("trial {trials}: parameter grads changed"))?;
        let rows = gb.rows.as_ref().unwrap();
        for &c in &masked {
            for r in b.boundaries[c].clone() {
                ensure(rows[r].iter().all(|x| *x == 0.0), || format!("trial {trials}: masked row gradient non-zero"))?;
            }
        }
        trials += 1;
    }

    // the same through the full model: a masked reference case's features are irrelevant
    let records = generate_synthetic(&GeneratorConfig { n: 40, ..Default::default() }, 5).unwrap();
    let mut full = 0;
    for _ in 0..50 {
        let model = tiny_model(&mut rng, &records);
        let target = &records[rng.random_range(0..records.len())];
        let refs: Vec<&CaseRecord> = (0..3).map(|_| &records[rng.random_range(0..records.len())]).collect();
        let masked = vec![rng.random_range(0..3)];
        let mut swapped = refs.clone();
        swapped[masked[0]] = &records[rng.random_range(0..records.len())];
        let (la, ga) = example_loss_grads(&model, target, &refs, &masked, true).unwrap();
        let (lb, gb) = example_loss_grads(&model, target, &swapped, &masked, true).unwrap();
        ensure(la == lb && ga.0 == gb.0, || "model loss or gradients depend on a masked case".into())?;
        full += 1;
    }
    Ok(format!("{trials} fusion trials and {full} full-model trials: bit-identical outputs, masked gradients exactly 0"))
}

fn metrics_fixture() -> Outcome {
    let s = |codes: &[u8]| codes.iter().map(|c| SubtypeLabel::from_code(*c).unwrap()).collect::<LabelSet>();
    // (pred, gold); labels 1..5 map to codes 0..4
    let pairs = [(s(&[0]), s(&[0])), (s(&[1]), s(&[0, 1])), (s(&[2, 3]), s(&[2])), (s(&[]), s(&[4]))];
    let m = compute_metrics(&pairs).map_err(|e| e.to_string())?;
    // hand count: TP 3 (A:1, B:2, C:3), FP 1 (C:4), FN 2 (B:1, D:5)
    let (tp, fp, fn_) = (3.0, 1.0, 2.0);
    let (p, r) = (tp / (tp + fp), tp / (tp + fn_));
    let f1 = 2.0 * 0.75 * 0.6 / 1.35;
    ensure((m.counts.tp, m.counts.fp, m.counts.fn_) == (3, 1, 2), || format!("counts {:?}", m.counts))?;
    ensure(m.overall.p == p && p == 0.75, || format!("precision {}", m.overall.p))?;
    ensure(m.overall.r == r && r == 0.6, || format!("recall {}", m.overall.r))?;
    ensure((m.overall.f1 - f1).abs() <= 1e-9, || format!("f1 {}", m.overall.f1))?;
    ensure(m.overall.correct == 0.25, || format!("correct {}", m.overall.correct))?;
    Ok(format!("P {} R {} F1 {:.10} correct {}", m.overall.p, m.overall.r, m.overall.f1, m.overall.correct))
}

// ---------------------------------------------------------------------------

fn directional_ablation() -> Outcome {
    let mock = common::copy_first_similar();
    let cfg = ExperimentConfig {
        variants: vec![Variant::NoRag, Variant::Rag1, Variant::Rag2, Variant::BrainsK5],
        remote: Some(RemoteConfig { base_url: mock.base_url.clone(), timeout_ms: 10_000, ..Default::default() }),
        ..Default::default()
    };
    ensure(cfg.generator.n == 2000 && cfg.corpus_seed == 42, || "not the default corpus".into())?;
    let started = Instant::now();
    let report = run_experiment(&cfg).map_err(|e| e.to_string())?;
    let secs = started.elapsed().as_secs_f64();
    let get = |n: &str| -> Result<f64, String> {
        let v = report.variant(n).ok_or_else(|| format!("{n} missing"))?;
        match &v.failure {
            Some(f) => Err(format!("{n} failed: {f}")),
            None => Ok(v.overall.correct),
        }
    };
    let (base, rag1, rag2, brains) = (get("no-rag")?, get("rag-1")?, get("rag-2")?, get("brains-k5")?);
    let summary = format!(
        "no-rag {base:.3}, rag-1 {rag1:.3}, rag-2 {rag2:.3}, brains-k5 {brains:.3} on {} test cases in {secs:.0} s",
        report.test_size
    );
    println!("{}", report.table().trim_end());
    ensure(brains - base >= 0.05, || format!("margin {:.3} < 0.05; {summary}", brains - base))?;
    ensure(rag1 <= brains && rag2 <= brains, || format!("a rag variant beats brains-k5; {summary}"))?;
    ensure(secs <= 300.0, || format!("runtime over 5 minutes; {summary}"))?;
    Ok(summary)
}

// ---------------------------------------------------------------------------

fn run_cli(args: &[&str]) -> Result<Vec<u8>, String> {
    let o = Command::new(env!("CARGO_BIN_EXE_brains"))
        .args(args)
        .env_remove("BRAINS_CONFIG")
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    if !o.status.success() {
        return Err(format!("brains {}: {}", args.join(" "), String::from_utf8_lossy(&o.stderr)));
    }
    Ok(o.stdout)
}

fn determinism() -> Outcome {
    let run = |dir: &Path| -> Result<[Vec<u8>; 4], String> {
        let p = |f: &str| dir.join(f).to_str().unwrap().to_string();
        let cfg = p("cfg.json");
        std::fs::write(&cfg, json!({"train": {"epochs": 3}}).to_string()).map_err(|e| e.to_string())?;
        run_cli(&["generate", "--n", "400", "--seed", "42", "--out", &p("corpus.jsonl")])?;
        run_cli(&["index", "--corpus", &p("corpus.jsonl"), "--out", &p("index.bin"), "--seed", "42", "--config", &cfg])?;
        let t = run_cli(&["train", "--corpus", &p("corpus.jsonl"), "--out", &p("model.ckpt"), "--seed", "42", "--config", &cfg])?;
        let digest: Value = serde_json::from_slice(&t).map_err(|e| e.to_string())?;
        run_cli(&[
            "eval", "--corpus", &p("corpus.jsonl"), "--variants", "no-rag,brains-k5", "--out", &p("report.json"),
            "--seed", "42", "--config", &cfg,
        ])?;
        let read = |f: &str| std::fs::read(dir.join(f)).map_err(|e| e.to_string());
        Ok([read("corpus.jsonl")?, read("index.bin")?, digest["digest"].to_string().into_bytes(), read("report.json")?])
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (ra, rb) = (run(a.path())?, run(b.path())?);
    let names = ["corpus", "index", "checkpoint digest", "report JSON"];
    for ((x, y), n) in ra.iter().zip(&rb).zip(names) {
        ensure(x == y, || format!("{n} differs between runs"))?;
    }
    let ck_a = std::fs::read(a.path().join("model.ckpt")).unwrap();
    ensure(ck_a == std::fs::read(b.path().join("model.ckpt")).unwrap(), || "checkpoint bytes differ".into())?;
    Ok(format!(
        "generate, index, train, eval (N=400) twice: byte-identical corpus ({} B), index ({} B), checkpoint {}, report ({} B)",
        ra[0].len(),
        ra[1].len(),
        String::from_utf8_lossy(&ra[2]).trim_matches('"').get(..12).unwrap_or(""),
        ra[3].len()
    ))
}

// ---------------------------------------------------------------------------

fn round_trips() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let art = common::artifacts(200, 9);
    let model = &art.checkpoint.model;

    let ipath = dir.path().join("m.index");
    index_save(&art.base.index, &ipath).map_err(|e| e.to_string())?;
    let loaded = index_load(&ipath).map_err(|e| e.to_string())?;
    ensure(loaded == art.base.index, || "index changed on reload".into())?;
    for e in art.base.index.entries() {
        let q = art.base.index.vector(&e.id).unwrap();
        ensure(art.base.index.search(&q, 50).unwrap() == loaded.search(&q, 50).unwrap(), || "query results differ".into())?;
    }

    let cpath = dir.path().join("m.ckpt");
    checkpoint_save(&art.checkpoint, &cpath).map_err(|e| e.to_string())?;
    let ck = checkpoint_load(&cpath).map_err(|e| e.to_string())?;
    ensure(ck == art.checkpoint, || "checkpoint changed on reload".into())?;
    let mut preds = 0;
    for r in art.base.records() {
        let a = predict_local(r, model, &art.base, None).unwrap();
        let b = predict_local(r, &ck.model, &art.base, None).unwrap();
        ensure(a == b, || format!("prediction for {} differs", r.id()))?;
        preds += 1;
    }

    // corruption
    let bytes = checkpoint_to_bytes(&art.checkpoint);
    let mut flipped = bytes.clone();
    flipped[bytes.len() / 3] ^= 0x10;
    let code = |r: Result<Checkpoint, DiagnoseError>| r.err().map(|e| e.code());
    ensure(code(checkpoint_from_bytes(&flipped)) == Some("CorruptCheckpoint"), || "flipped byte accepted".into())?;
    ensure(code(checkpoint_from_bytes(&bytes[..bytes.len() - 7])) == Some("CorruptCheckpoint"), || "truncation accepted".into())?;
    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    ensure(code(checkpoint_from_bytes(&bad_magic)) == Some("CorruptCheckpoint"), || "bad magic accepted".into())?;
    let mut v2 = bytes.clone();
    v2[4..8].copy_from_slice(&2u32.to_le_bytes());
    let n = v2.len() - 32;
    let digest = Sha256::digest(&v2[..n]);
    v2[n..].copy_from_slice(&digest);
    ensure(
        matches!(checkpoint_from_bytes(&v2), Err(DiagnoseError::VersionMismatch { found: 2, expected: 1 })),
        || "future version not reported".into(),
    )?;

    let mut ibytes = Vec::new();
    write_index(&mut ibytes, &art.base.index).unwrap();
    let icode = |b: &[u8]| read_index(b).err().map(|e| e.to_string());
    let mut ib = ibytes.clone();
    ib[0] = b'Z';
    ensure(icode(&ib).is_some_and(|m| m.contains("magic")), || "bad index magic accepted".into())?;
    ensure(icode(&ibytes[..ibytes.len() - 5]).is_some(), || "truncated index accepted".into())?;
    let mut trailing = ibytes.clone();
    trailing.push(0);
    ensure(icode(&trailing).is_some_and(|m| m.contains("trailing")), || "trailing bytes accepted".into())?;

    // the same failures through the artifact loader carry the public codes
    let corpus = dir.path().join("c.jsonl");
    let recs: Vec<CaseRecord> = art.base.records().cloned().collect();
    brains::casemodel::io::write_jsonl_file(&corpus, &recs).unwrap();
    ensure(Artifacts::load(&cpath, &ipath, &corpus).is_ok(), || "clean artifacts rejected".into())?;
    std::fs::write(&cpath, &flipped).unwrap();
    let e = Artifacts::load(&cpath, &ipath, &corpus).unwrap_err();
    ensure(e.code() == ErrorCode::CorruptArtifact, || format!("loader code {:?}", e.code()))?;
    std::fs::write(&cpath, &v2).unwrap();
    let e = Artifacts::load(&cpath, &ipath, &corpus).unwrap_err();
    ensure(e.code() == ErrorCode::VersionMismatch, || format!("loader code {:?}", e.code()))?;
    checkpoint_save(&art.checkpoint, &cpath).unwrap();
    std::fs::write(&ipath, &trailing).unwrap();
    let e = Artifacts::load(&cpath, &ipath, &corpus).unwrap_err();
    ensure(e.code() == ErrorCode::CorruptArtifact, || format!("loader code {:?}", e.code()))?;

    Ok(format!(
        "{} indexed queries and {preds} predictions bit-exact after reload; flipped, truncated, bad-magic, \
         future-version and trailing-byte files rejected",
        art.base.len()
    ))
}

// ---------------------------------------------------------------------------

fn remote_contract() -> Outcome {
    let art = common::artifacts(60, 4);
    let model = &art.checkpoint.model;
    let target = art.base.records().next().unwrap().clone();
    let retrieved = model.neighbours(&target, &art.base, 2).unwrap();
    let cfg = |url: &str| RemoteConfig { base_url: url.into(), backoff_ms: 5, timeout_ms: 2000, concat_cases: 2, ..Default::default() };

    // success
    let mock = common::scripted(vec![Reply::ok("Late-Onset Alzheimer's Disease; Sporadic Alzheimer's Disease")]);
    let r = predict_remote(&target, &retrieved, &art.base, &cfg(&mock.base_url)).map_err(|e| e.to_string())?;
    ensure(r.decided.codes() == vec![1, 3] && !r.parse_failure && r.remote_attempts == Some(1), || format!("success: {r:?}"))?;
    let (path, body) = mock.requests.lock().unwrap()[0].clone();
    ensure(path == "/v1/chat/completions", || format!("path {path}"))?;
    let user = body["messages"][1]["content"].as_str().unwrap_or("");
    ensure(user.contains("Similar case 2: ") && body["temperature"] == 0.0, || "request shape".into())?;

    // retry then success
    let mock = common::scripted(vec![Reply::status(500), Reply::status(500), Reply::ok("Early-Onset")]);
    let r = predict_remote(&target, &retrieved, &art.base, &cfg(&mock.base_url)).map_err(|e| e.to_string())?;
    ensure(r.remote_attempts == Some(3) && mock.hits() == 3 && r.decided.codes() == vec![0], || format!("retry: {r:?}"))?;

    // retries exhausted
    let mock = common::scripted(vec![Reply::status(503)]);
    let e = predict_remote(&target, &retrieved, &art.base, &cfg(&mock.base_url)).unwrap_err();
    ensure(matches!(e, DiagnoseError::BackendHttpError { status: 503, .. }) && mock.hits() == 3, || format!("exhausted: {e}"))?;

    // client error is not retried
    let mock = common::scripted(vec![Reply::status(400)]);
    let e = predict_remote(&target, &retrieved, &art.base, &cfg(&mock.base_url)).unwrap_err();
    ensure(matches!(e, DiagnoseError::BackendHttpError { status: 400, .. }) && mock.hits() == 1, || format!("400: {e}"))?;

    // timeout
    let mock = common::scripted(vec![Reply::ok("Sporadic").delayed(1500)]);
    let started = Instant::now();
    let e = predict_remote(&target, &retrieved, &art.base, &RemoteConfig { timeout_ms: 200, ..cfg(&mock.base_url) }).unwrap_err();
    ensure(matches!(e, DiagnoseError::BackendTimeout { attempts: 1 }), || format!("timeout: {e}"))?;
    ensure(started.elapsed() < Duration::from_millis(1400), || "timeout not enforced".into())?;

    // unparseable replies
    let mock = common::scripted(vec![Reply::ok("I am unable to determine this.")]);
    let r = predict_remote(&target, &retrieved, &art.base, &cfg(&mock.base_url)).map_err(|e| e.to_string())?;
    ensure(r.parse_failure && r.decided.is_empty(), || "unparseable content".into())?;
    let mock = common::scripted(vec![Reply { status: 200, body: "<html>".into(), delay: Duration::ZERO }]);
    let r = predict_remote(&target, &retrieved, &art.base, &cfg(&mock.base_url)).map_err(|e| e.to_string())?;
    ensure(r.parse_failure && r.decided.is_empty(), || "non-JSON body".into())?;

    // a dead backend fails only the remote variants
    let mock = common::scripted(vec![Reply::status(500)]);
    let ecfg = ExperimentConfig {
        variants: vec![Variant::NoRag, Variant::Rag1, Variant::BrainsK5],
        generator: GeneratorConfig { n: 150, ..Default::default() },
        train: TrainConfig { epochs: 1, ..ExperimentConfig::default().train },
        remote: Some(RemoteConfig { max_retries: 0, ..cfg(&mock.base_url) }),
        ..Default::default()
    };
    let corpus = generate_synthetic(&ecfg.generator, 1).unwrap();
    let rep = run_experiment_on(&ecfg, &corpus).map_err(|e| e.to_string())?;
    let fail = |n: &str| rep.variant(n).and_then(|v| v.failure.clone());
    ensure(
        fail("rag-1").as_deref() == Some("BackendHttpError") && fail("no-rag").is_none() && fail("brains-k5").is_none(),
        || format!("experiment under backend failure: {:?}", rep.variants.iter().map(|v| &v.failure).collect::<Vec<_>>()),
    )?;
    Ok("success, retry-then-success (3 attempts), exhausted retries, 4xx without retry, timeout (1 attempt), \
        unparseable content and body, experiment survives a dead backend"
        .into())
}

// ---------------------------------------------------------------------------

fn service_contract() -> Outcome {
    use axum::body::Body;
    use axum::http::{Request, StatusCode};
    use http_body_util::BodyExt;
    use tower::ServiceExt;

    use brains::config::ServiceConfig;
    use brains::service::{router, AppState};

    let rt = tokio::runtime::Runtime::new().unwrap();
    rt.block_on(async {
        let call = |st: &Arc<AppState>, req: Request<Body>| {
            let app = router(st.clone());
            async move {
                let resp = app.oneshot(req).await.unwrap();
                let s = resp.status();
                let b = resp.into_body().collect().await.unwrap().to_bytes();
                (s, serde_json::from_slice::<Value>(&b).unwrap_or(Value::Null))
            }
        };
        let get = |u: &str| Request::get(u).body(Body::empty()).unwrap();
        let post = |u: &str, b: String| Request::post(u).body(Body::from(b)).unwrap();
        let case = json!({"id": "walk-in", "mmse": 23, "cdr": 0.5, "age": 72, "nwbv": 0.72}).to_string();

        let st = AppState::new(ServiceConfig::default(), None);
        let (s, h) = call(&st, get("/healthz")).await;
        ensure(s == StatusCode::OK && h["status"] == "starting", || format!("initial healthz {h}"))?;
        let (s, v) = call(&st, post("/v1/screen", case.clone())).await;
        ensure(s == StatusCode::SERVICE_UNAVAILABLE && v["error"] == "NotReady", || format!("pre-ready screen {s}"))?;

        st.install(common::artifacts(100, 2));
        let (_, h) = call(&st, get("/healthz")).await;
        ensure(h["status"] == "ready" && h["index_size"] == 100, || format!("ready healthz {h}"))?;

        let (s, v) = call(&st, post("/v1/screen", case.clone())).await;
        ensure(s == StatusCode::OK && v["scores"].as_array().map(Vec::len) == Some(5), || format!("screen {s} {v}"))?;
        ensure(v["evidence"].as_array().map(Vec::len) == Some(5), || "evidence count".into())?;

        let (s, v) = call(&st, post("/v1/screen", json!({"id": "x", "mmse": -1, "cdr": 0.5, "age": 70}).to_string())).await;
        ensure(
            s == StatusCode::BAD_REQUEST && v["fields"][0]["field"] == "mmse" && v["fields"][0]["code"] == "RangeViolation",
            || format!("field error {s} {v}"),
        )?;

        // stage then swap: the old snapshot keeps serving until the rebuilt one is installed
        let old = st.current().unwrap();
        let before = st.generation();
        let import = [
            json!({"id": "imp-1", "mmse": 26, "cdr": 0.5, "age": 58, "labels": [0, 2]}).to_string(),
            json!({"id": "imp-2", "mmse": 99, "cdr": 0.5, "age": 58}).to_string(),
        ]
        .join("\n");
        let (s, v) = call(&st, post("/v1/corpus/import", import)).await;
        ensure(s == StatusCode::ACCEPTED && v["accepted"] == 1 && v["rejected"][0]["line"] == 2, || format!("import {s} {v}"))?;
        for _ in 0..500 {
            if st.generation() > before {
                break;
            }
            tokio::time::sleep(Duration::from_millis(10)).await;
        }
        ensure(st.generation() == before + 1, || "rebuild never installed".into())?;
        ensure(old.base.len() == 100 && !old.base.index.contains("imp-1"), || "old snapshot was mutated".into())?;
        let (_, h) = call(&st, get("/healthz")).await;
        ensure(h["index_size"] == 101, || format!("post-import healthz {h}"))?;
        let (s, _) = call(&st, get("/v1/cases/imp-1/similar?k=3")).await;
        ensure(s == StatusCode::OK, || format!("imported case not visible: {s}"))?;
        let (s, _) = call(&st, get("/v1/cases/imp-2/similar?k=3")).await;
        ensure(s == StatusCode::NOT_FOUND, || "rejected case became visible".into())?;
        Ok("healthz starting->ready, 503 before ready, screen 200, field-error 400, import 202 then atomic swap (100->101)"
            .to_string())
    })
}

// ---------------------------------------------------------------------------

fn main() {
    let criteria: [Criterion; 10] = [
        ("attention-normalization", attention_normalization),
        ("gradient-correctness/fusion", fusion_gradients),
        ("gradient-correctness/end-to-end", end_to_end_gradients),
        ("retrieval-oracle", retrieval_oracle),
        ("masking-invariance", masking_invariance),
        ("metrics-fixture", metrics_fixture),
        ("round-trips", round_trips),
        ("remote-contract", remote_contract),
        ("service-contract", service_contract),
        ("determinism", determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut all: Vec<Criterion> = criteria.to_vec();
    all.push(("directional-ablation", directional_ablation));
    let mut failed = 0;
    let mut ran = 0;
    for (name, f) in all {
        if !filter.is_empty() && !filter.iter().any(|x| name.contains(x.as_str())) {
            continue;
        }
        ran += 1;
        let started = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panic".into()))
        });
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {name} [{secs:.1}s]: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL {name} [{secs:.1}s]: {why}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
