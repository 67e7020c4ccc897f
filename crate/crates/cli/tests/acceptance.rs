//! Acceptance criteria, one PASS/FAIL line each. Runs without the libtest
//! harness so the lines always reach the test log.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use fpo_core::annotate::{align_tokens, annotate_pair, edit_distance, locate_errors, span_mask, PreferencePair};
use fpo_core::evalrep::{EvalReport, SweepReport};
use fpo_core::model::{init_model, ModelCheckpoint};
use fpo_core::optimloss::{dpo_loss, fpo_loss, LossVariant, PairBatch, TrainConfig};
use fpo_core::pipeline::{gradcheck_suite, task_spec, ExperimentConfig, GRADCHECK_TOLERANCE};
use fpo_core::records::read_document;
use fpo_core::rng::rng_for;
use fpo_core::scoring::{composite_score, select_pair, CompositeScore, MetricComponents, ScoreWeights};
use fpo_core::seq::{GenSample, SampleMeta, TokenId, TokenSeq};
use fpo_core::task::{apply_edit, reference_render, Edit, ErrorCategory, ErrorKind, ErrorSpan, Injector, TaskSpec, SILENCE};
use rand::Rng;

type Outcome = Result<String, String>;

struct Criterion {
    name: &'static str,
    limit: Option<Duration>,
    run: fn() -> Outcome,
}

fn main() {
    let criteria = [
        Criterion { name: "gradient suite", limit: Some(Duration::from_secs(60)), run: gradient_suite },
        Criterion { name: "loss identities", limit: None, run: loss_identities },
        Criterion { name: "mask-policy suite", limit: Some(Duration::from_secs(120)), run: mask_policy_suite },
        Criterion { name: "alignment oracle", limit: Some(Duration::from_secs(60)), run: alignment_oracle },
        Criterion { name: "scorer suite", limit: None, run: scorer_suite },
        Criterion { name: "end-to-end bad-case reduction", limit: Some(Duration::from_secs(600)), run: end_to_end },
        Criterion { name: "data-efficiency sweep", limit: Some(Duration::from_secs(1800)), run: data_efficiency },
        Criterion { name: "determinism", limit: None, run: determinism },
    ];
    let mut failed = 0;
    for c in &criteria {
        let t = Instant::now();
        let mut out = (c.run)();
        let took = t.elapsed();
        if let (Ok(_), Some(limit)) = (&out, c.limit) {
            if took > limit {
                out = Err(format!("took {took:.1?}, limit {limit:?}"));
            }
        }
        match out {
            Ok(detail) => println!("PASS  {:<32} {detail} [{took:.1?}]", c.name),
            Err(why) => {
                failed += 1;
                println!("FAIL  {:<32} {why} [{took:.1?}]", c.name);
            }
        }
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ---------------------------------------------------------------- gradients

fn gradient_suite() -> Outcome {
    let cfg = ExperimentConfig::default();
    let spec = task_spec(&cfg).map_err(e2s)?;
    let rows = gradcheck_suite(&cfg, &spec, 20, 1e-5, 50).map_err(e2s)?;
    let worst = rows.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    for r in &rows {
        ensure(r.instances >= 20 && r.max_rel_error < GRADCHECK_TOLERANCE, || {
            format!("{}: max rel error {:.3e} over {} instances", r.target, r.max_rel_error, r.instances)
        })?;
    }
    Ok(format!("{} targets x 20 instances, worst rel error {worst:.2e}", rows.len()))
}

// ---------------------------------------------------------------- loss identities

fn task_pairs(cfg: &ExperimentConfig, spec: &TaskSpec, n: usize) -> Vec<PreferencePair> {
    let injector = Injector::for_task(spec);
    let oracle = cfg.oracle(spec);
    let mut rng = rng_for(17, "acceptance-pairs", 0);
    let mut pairs = Vec::new();
    while pairs.len() < n {
        let text = spec.sample_text(&mut rng);
        let clean = reference_render(spec, &text).unwrap();
        let kind = ErrorKind::ALL[pairs.len() % ErrorKind::ALL.len()];
        let Ok(c) = injector.inject(&clean, kind, rng.gen()) else { continue };
        let w = &cfg.scoring.weights;
        let sw = fpo_core::scoring::score_output(&clean, &clean, &oracle, w).unwrap();
        let sl = fpo_core::scoring::score_output(&c.corrupted, &clean, &oracle, w).unwrap();
        let p = annotate_pair(&text, &clean, &clean, &c.corrupted, sw, sl, spec.silence, cfg.masks.winner_policy).unwrap();
        if !p.degenerate {
            pairs.push(p);
        }
    }
    pairs
}

fn swapped(p: &PreferencePair) -> PreferencePair {
    PreferencePair {
        winner: p.loser.clone(),
        loser: p.winner.clone(),
        score_w: p.score_l,
        score_l: p.score_w,
        spans_w: p.spans_l.clone(),
        spans_l: p.spans_w.clone(),
        mask_w: p.mask_l.clone(),
        mask_l: p.mask_w.clone(),
        aligned_pairs: p.aligned_pairs.iter().map(|&(w, l)| (l, w)).collect(),
        ..p.clone()
    }
}

fn with_masks(p: &PreferencePair, on: bool) -> PreferencePair {
    let mut q = p.clone();
    q.mask_w.0.iter_mut().for_each(|b| *b = on);
    q.mask_l.0.iter_mut().for_each(|b| *b = on);
    if !on {
        q.aligned_pairs.clear();
    }
    q
}

fn loss_identities() -> Outcome {
    let cfg = ExperimentConfig::default();
    let spec = task_spec(&cfg).map_err(e2s)?;
    let pairs = task_pairs(&cfg, &spec, 50);
    let reference = init_model(&cfg.model, 3).map_err(e2s)?;
    let mut theta = init_model(&cfg.model, 4).map_err(e2s)?;
    theta.params.iter_mut().for_each(|p| *p *= 4.0);
    let tc = |variant| TrainConfig {
        beta: 0.7,
        loss_variant: variant,
        ..Default::default()
    };
    let loss = |m: &ModelCheckpoint, ps: &[&PreferencePair], v: LossVariant| {
        let batch = PairBatch::build(m, &reference, ps).unwrap();
        match v {
            LossVariant::DpoUtterance => dpo_loss(m, &batch, &tc(v)).unwrap(),
            _ => fpo_loss(m, &batch, &tc(v)).unwrap(),
        }
    };
    let ln2 = std::f64::consts::LN_2;
    let (mut at_ref, mut swap) = (0.0f64, 0.0f64);
    for p in &pairs {
        let (l, _) = loss(&reference, &[p], LossVariant::DpoUtterance);
        at_ref = at_ref.max((l - ln2).abs());

        let full = with_masks(p, true);
        let a = loss(&theta, &[&full], LossVariant::FpoSequenceSigmoid);
        let b = loss(&theta, &[&full], LossVariant::DpoUtterance);
        ensure(
            a.0.to_bits() == b.0.to_bits() && a.1.iter().zip(&b.1).all(|(x, y)| x.to_bits() == y.to_bits()),
            || format!("full-mask sequence loss {} differs from dpo {}", a.0, b.0),
        )?;

        let dead = with_masks(p, false);
        for v in [LossVariant::FpoTokenSigmoid, LossVariant::FpoSequenceSigmoid] {
            let one = loss(&theta, &[p], v);
            let both = loss(&theta, &[p, &dead], v);
            ensure(
                (both.0 * 2.0).to_bits() == one.0.to_bits()
                    && both.1.iter().zip(&one.1).all(|(x, y)| (x * 2.0).to_bits() == y.to_bits()),
                || format!("{v}: zero-mask pair changed the loss"),
            )?;
        }

        let s = swapped(p);
        let (l1, _) = loss(&theta, &[p], LossVariant::DpoUtterance);
        let (l2, _) = loss(&theta, &[&s], LossVariant::DpoUtterance);
        swap = swap.max(((-l1).exp() + (-l2).exp() - 1.0).abs());
    }
    ensure(at_ref < 1e-9, || format!("theta=ref dpo loss off log 2 by {at_ref:.2e}"))?;
    ensure(swap < 1e-9, || format!("swap identity off by {swap:.2e}"))?;
    Ok(format!(
        "{} task pairs: |l-log2| {at_ref:.1e}, swap {swap:.1e}, full-mask and zero-mask bit-exact",
        pairs.len()
    ))
}

// ---------------------------------------------------------------- masks

fn mask_policy_suite() -> Outcome {
    let cfg = ExperimentConfig::default();
    let spec = task_spec(&cfg).map_err(e2s)?;
    let injector = Injector::for_task(&spec);
    let mut summary = Vec::new();
    for kind in ErrorKind::ALL {
        let mut rng = rng_for(23, "acceptance-masks", kind as u64);
        let (mut n, mut correct, mut worst_boundary) = (0usize, 0usize, 0usize);
        while n < 1000 {
            let text = spec.sample_text(&mut rng);
            let clean = reference_render(&spec, &text).map_err(e2s)?;
            let Ok(c) = injector.inject(&clean, kind, rng.gen()) else { continue };
            n += 1;
            let truth = c.injected_spans[0];
            let len = c.corrupted.len();

            // shape rules on the injected span
            let m = span_mask(len, &[truth]).map_err(e2s)?;
            let expect: Vec<bool> = match kind.category() {
                ErrorCategory::Temporal => (0..len).map(|i| (truth.start..truth.end).contains(&i)).collect(),
                ErrorCategory::SemanticPhonetic => (0..len).map(|i| i >= truth.start).collect(),
            };
            ensure(m.0 == expect, || format!("{kind}: mask {} for span {truth:?}", m.to_bitstring()))?;

            let found = locate_errors(&clean, &c.corrupted, SILENCE).map_err(e2s)?;
            if let [d] = found.as_slice() {
                if d.kind == kind {
                    correct += 1;
                    let b = equivalent_spans(&clean, &c.corrupted, truth)
                        .iter()
                        .map(|t| d.start.abs_diff(t.start).max(d.end.abs_diff(t.end)))
                        .min()
                        .unwrap_or(usize::MAX);
                    worst_boundary = worst_boundary.max(b);
                    // the pair mask built from the detection follows the same rule
                    let p = annotate_pair(
                        &text,
                        &clean,
                        &clean,
                        &c.corrupted,
                        dummy_score(),
                        dummy_score(),
                        SILENCE,
                        cfg.masks.winner_policy,
                    )
                    .map_err(e2s)?;
                    let on: Vec<usize> = (0..len).filter(|&i| p.mask_l.0[i]).collect();
                    let want: Vec<usize> = match kind.category() {
                        ErrorCategory::Temporal => (d.start..d.end).collect(),
                        ErrorCategory::SemanticPhonetic => (d.start..len).collect(),
                    };
                    ensure(on == want, || format!("{kind}: loser mask {on:?}, expected {want:?}"))?;
                }
            }
        }
        let acc = correct as f64 / n as f64;
        ensure(acc >= 0.95, || format!("{kind}: kind accuracy {acc:.3}"))?;
        ensure(worst_boundary <= 1, || format!("{kind}: boundary error {worst_boundary}"))?;
        summary.push(format!("{kind} {:.1}%/{worst_boundary}", 100.0 * acc));
    }
    Ok(format!("1000/kind, accuracy/max boundary vs closest equivalent injection: {}", summary.join(", ")))
}

/// Spans of every injection of the same kind that yields exactly the same
/// corrupted sequence; a block repeated inside a periodic run has several.
fn equivalent_spans(clean: &TokenSeq, corrupted: &TokenSeq, truth: ErrorSpan) -> Vec<ErrorSpan> {
    let n = clean.content().len();
    let edits: Vec<Edit> = match truth.kind {
        ErrorKind::Repetition => (0..n)
            .flat_map(|start| (1..=n - start).map(move |len| Edit::Repeat { start, len }))
            .collect(),
        ErrorKind::AbnormalSilence | ErrorKind::UnnaturalPause => (0..=n)
            .map(|at| Edit::InsertSilence { at, count: truth.len(), kind: truth.kind })
            .collect(),
        _ => vec![],
    };
    let mut spans = vec![truth];
    for e in edits {
        if let Ok(alt) = apply_edit(clean, &e, SILENCE) {
            if alt.corrupted == *corrupted {
                spans.extend(alt.injected_spans.iter().filter(|s| s.kind == truth.kind));
            }
        }
    }
    spans
}

fn dummy_score() -> CompositeScore {
    CompositeScore { w: 1.0, m: 1.0, c: 1.0, dur: 1.0, s: 1.0 }
}

// ---------------------------------------------------------------- alignment

fn all_strings(max_len: usize, symbols: TokenId) -> Vec<Vec<TokenId>> {
    let mut out = vec![vec![]];
    let mut layer = vec![vec![]];
    for _ in 0..max_len {
        let next: Vec<Vec<TokenId>> = layer
            .iter()
            .flat_map(|s: &Vec<TokenId>| {
                (0..symbols).map(move |a| {
                    let mut t = s.clone();
                    t.push(a);
                    t
                })
            })
            .collect();
        out.extend(next.iter().cloned());
        layer = next;
    }
    out
}

/// Edit distance by breadth-first search over single-token edits. Paths stay
/// within the enumerated lengths: deletions can always be applied before
/// insertions without changing the cost.
fn bfs_distances(strings: &[Vec<TokenId>], symbols: TokenId, max_len: usize) -> Vec<Vec<u8>> {
    let index: HashMap<&[TokenId], u32> = strings.iter().enumerate().map(|(i, s)| (s.as_slice(), i as u32)).collect();
    let adj: Vec<Vec<u32>> = strings
        .iter()
        .map(|s| {
            let mut nb = Vec::new();
            for i in 0..s.len() {
                let mut t = s.clone();
                t.remove(i);
                nb.push(index[t.as_slice()]);
                for a in (0..symbols).filter(|&a| a != s[i]) {
                    let mut t = s.clone();
                    t[i] = a;
                    nb.push(index[t.as_slice()]);
                }
            }
            if s.len() < max_len {
                for i in 0..=s.len() {
                    for a in 0..symbols {
                        let mut t = s.clone();
                        t.insert(i, a);
                        nb.push(index[t.as_slice()]);
                    }
                }
            }
            nb
        })
        .collect();
    (0..strings.len())
        .map(|src| {
            let mut dist = vec![u8::MAX; strings.len()];
            dist[src] = 0;
            let mut q = VecDeque::from([src as u32]);
            while let Some(u) = q.pop_front() {
                let du = dist[u as usize];
                for &v in &adj[u as usize] {
                    if dist[v as usize] == u8::MAX {
                        dist[v as usize] = du + 1;
                        q.push_back(v);
                    }
                }
            }
            dist
        })
        .collect()
}

fn alignment_oracle() -> Outcome {
    let strings = all_strings(6, 4);
    let dist = bfs_distances(&strings, 4, 6);
    let mut checked = 0u64;
    for (i, a) in strings.iter().enumerate() {
        for (j, b) in strings.iter().enumerate() {
            let ops = align_tokens(a, b);
            let want = dist[i][j] as usize;
            ensure(ops.cost() == want && edit_distance(a, b) == want, || {
                format!("{a:?} -> {b:?}: cost {}, brute force {want}", ops.cost())
            })?;
            ops.check(a, b).map_err(|e| format!("{a:?} -> {b:?}: {e}"))?;
            checked += 1;
        }
    }
    Ok(format!("{checked} pairs of {} strings", strings.len()))
}

// ---------------------------------------------------------------- scorer

fn scorer_suite() -> Outcome {
    let mut rng = rng_for(31, "acceptance-scorer", 0);
    let mut weights = || {
        let raw: [f64; 4] = std::array::from_fn(|_| rng.gen_range(0.0..1.0));
        let t: f64 = raw.iter().sum();
        ScoreWeights {
            lambda_w: raw[0] / t,
            lambda_m: raw[1] / t,
            lambda_c: raw[2] / t,
            lambda_d: 1.0 - (raw[0] + raw[1] + raw[2]) / t,
            p: 1.0 + 3.0 * raw[0],
        }
    };
    let mut rng = rng_for(31, "acceptance-scorer", 1);
    for _ in 0..100_000 {
        let wt = weights();
        let v: [f64; 4] = std::array::from_fn(|_| rng.gen_range(0.0..=1.0));
        let comp = |v: [f64; 4]| MetricComponents { w: v[0], m: v[1], c: v[2], dur: v[3] };
        let s = composite_score(comp(v), &wt).map_err(e2s)?.s;
        ensure((0.0..=1.0).contains(&s), || format!("score {s} out of range for {v:?}"))?;
        let k = rng.gen_range(0..4);
        let mut up = v;
        up[k] = rng.gen_range(v[k]..=1.0);
        let s2 = composite_score(comp(up), &wt).map_err(e2s)?.s;
        ensure(s2 >= s, || format!("raising component {k} of {v:?} lowered the score {s} -> {s2}"))?;
    }

    // selection over every 3-sample grid at step 0.1
    let only_w = ScoreWeights { lambda_w: 1.0, lambda_m: 0.0, lambda_c: 0.0, lambda_d: 0.0, p: 1.0 };
    let sample = |tenths: u32| {
        let x = tenths as f64 / 10.0;
        GenSample {
            condition: TokenSeq::new(vec![4]),
            output: TokenSeq::terminated(&[12]),
            meta: SampleMeta { temperature: 1.0, top_k: 0, seed: 0, index: 0, forced_eos: false },
            score: Some(CompositeScore { w: x, m: 0.0, c: 0.0, dur: 0.0, s: x }),
        }
    };
    let mut kept = 0;
    for a in 0..=10 {
        for b in 0..=10 {
            for c in 0..=10 {
                let g = [a, b, c];
                let samples: Vec<GenSample> = g.iter().map(|&t| sample(t)).collect();
                let got = select_pair(&samples, &only_w, 0.3).map_err(e2s)?;
                let hi = *g.iter().max().unwrap();
                let lo = *g.iter().min().unwrap();
                let want = (hi - lo > 3).then(|| {
                    (g.iter().position(|&t| t == hi).unwrap(), g.iter().position(|&t| t == lo).unwrap())
                });
                ensure(got == want, || format!("grid {g:?}: selected {got:?}, expected {want:?}"))?;
                kept += usize::from(want.is_some());
            }
        }
    }
    Ok(format!("1e5 tuples in range and monotone; 1331 grids, {kept} pairs kept at tau 0.3"))
}

// ---------------------------------------------------------------- pipeline via the binary

const MODELS: [&str; 3] = ["fpo_token_sigmoid", "dpo_utterance", "fpo_sequence_sigmoid"];

fn run_dir(name: &str) -> PathBuf {
    let d = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(name);
    let _ = std::fs::remove_dir_all(&d);
    d
}

fn lab(dir: &Path, seed: u64, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_fpo-lab"))
        .args(["--seed", &seed.to_string(), "--out-dir"])
        .arg(dir)
        .args(args)
        .env_remove("FPO_SEED")
        .env_remove("FPO_OUT_DIR")
        .env_remove("FPO_CONFIG")
        .output()
        .map_err(e2s)?;
    ensure(out.status.success(), || {
        format!("fpo-lab {} failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr).trim())
    })
}

fn pipeline(dir: &Path, seed: u64) -> Result<(), String> {
    lab(dir, seed, &["gen-sft"])?;
    lab(dir, seed, &["train-sft"])?;
    lab(dir, seed, &["build-pairs"])?;
    for v in ["fpo", "dpo", "fpo-seq"] {
        lab(dir, seed, &["train", "--variant", v])?;
    }
    lab(dir, seed, &["eval"])
}

fn bad_case(dir: &Path, model: &str) -> Result<f64, String> {
    let r: EvalReport = read_document(&dir.join(format!("eval_{model}.json")), "eval_report", None).map_err(e2s)?;
    Ok(r.bad_case_ratio)
}

fn end_to_end() -> Outcome {
    let mut rows = Vec::new();
    for seed in [0u64, 1, 2] {
        let dir = run_dir(&format!("e2e-{seed}"));
        pipeline(&dir, seed)?;
        let y: serde_json::Value = read_document(&dir.join("pair_yield.json"), "pair_yield", None).map_err(e2s)?;
        let pairs = y["selected"].as_u64().unwrap_or(0);
        let sft = bad_case(&dir, "sft")?;
        let mut by = BTreeMap::new();
        for m in MODELS {
            by.insert(m, bad_case(&dir, m)?);
        }
        rows.push((seed, pairs, sft, by));
    }
    let mut detail = Vec::new();
    let (mut gain, mut wins) = (0.0, 0);
    for (seed, pairs, sft, by) in &rows {
        ensure(*pairs >= 200, || format!("seed {seed}: only {pairs} pairs"))?;
        ensure((0.10..=0.20).contains(sft), || format!("seed {seed}: SFT bad-case {sft:.3} outside 10-20%"))?;
        let fpo = by["fpo_token_sigmoid"];
        let dpo = by["dpo_utterance"];
        gain += (sft - fpo) / sft / rows.len() as f64;
        wins += usize::from(fpo <= dpo);
        detail.push(format!("s{seed} sft {sft:.3} fpo {fpo:.3} dpo {dpo:.3}"));
    }
    let summary = format!("{}; mean FPO reduction {:.1}%, FPO<=DPO in {wins}/3", detail.join(", "), 100.0 * gain);
    ensure(gain >= 0.30, || format!("{summary}: reduction below 30%"))?;
    ensure(wins >= 2, || format!("{summary}: FPO beat DPO in fewer than 2 seeds"))?;
    Ok(summary)
}

fn data_efficiency() -> Outcome {
    let dir = run_dir("sweep");
    lab(&dir, 0, &["gen-sft"])?;
    lab(&dir, 0, &["train-sft"])?;
    lab(&dir, 0, &["sweep"])?;
    let report: SweepReport = read_document(&dir.join("sweep.json"), "sweep_report", None).map_err(e2s)?;
    let mut wins = 0;
    let mut cells = Vec::new();
    for b in [50, 100, 200, 400] {
        let f = report.cell(b, LossVariant::FpoTokenSigmoid).ok_or(format!("no fpo cell at {b}"))?;
        let d = report.cell(b, LossVariant::DpoUtterance).ok_or(format!("no dpo cell at {b}"))?;
        wins += usize::from(f.mean_bad_case_ratio <= d.mean_bad_case_ratio);
        cells.push(format!("{b}: {:.3} vs {:.3}", f.mean_bad_case_ratio, d.mean_bad_case_ratio));
    }
    let summary = format!("FPO vs DPO {}; FPO<=DPO in {wins}/4", cells.join(", "));
    ensure(wins >= 3, || summary.clone())?;
    Ok(summary)
}

fn snapshot(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let mut files = BTreeMap::new();
    for e in std::fs::read_dir(dir).map_err(e2s)? {
        let e = e.map_err(e2s)?;
        files.insert(e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).map_err(e2s)?);
    }
    Ok(files)
}

fn all_commands(dir: &Path, seed: u64) -> Result<(), String> {
    lab(dir, seed, &["config"])?;
    pipeline(dir, seed)?;
    lab(dir, seed, &["sample", "--prompts", "16"])?;
    lab(dir, seed, &["sweep"])?;
    lab(dir, seed, &["gradcheck", "--instances", "2", "--coords", "10"])
}

fn determinism() -> Outcome {
    let dir = run_dir("determinism");
    all_commands(&dir, 5)?;
    let first = snapshot(&dir)?;
    all_commands(&dir, 5)?;
    let second = snapshot(&dir)?;
    ensure(first.keys().eq(second.keys()), || "artifact sets differ between runs".into())?;
    let differ: Vec<&String> = first.iter().filter(|(k, v)| second[*k] != **v).map(|(k, _)| k).collect();
    ensure(differ.is_empty(), || format!("artifacts differ on rerun: {differ:?}"))?;
    let bytes: usize = first.values().map(Vec::len).sum();
    Ok(format!("{} artifacts ({bytes} bytes) byte-identical across reruns", first.len()))
}
