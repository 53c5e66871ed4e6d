//! Acceptance criteria, one PASS/FAIL line each. Runs without the libtest
//! harness so the lines are always printed.

mod common;

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use common::metric_oracles::*;
use common::oracle_step_logits;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use saver::bridge::{read_trace, read_trace_file, write_trace};
use saver::decoder::{
    beam_decode, collect_visual_hidden, decode, decode_with_trace, greedy_decode, replay, saver_decode, DecodeParams,
    ModelBackend, VisualInput,
};
use saver::metrics::{
    chair, pope_generate, pope_score, to_jsonl, Answer, CaptionRecord, ImageAnnotation, Label, Strategy, Style,
};
use saver::revision::{build_sas_table, log_softmax, LayerSpec, SaverParams};
use saver::toy::fixture::planted_case;
use saver::toy::{build_toy, synth_image, PositionEncoding, ToyConfig};
use saver::Error;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_toy(rng: &mut ChaCha8Rng, seed: u64) -> (ToyConfig, VisualInput) {
    let heads = [1, 2, 4][rng.gen_range(0..3)];
    let config = ToyConfig {
        n_layers: rng.gen_range(3..=8),
        d_model: heads * 2 * rng.gen_range(2..=6),
        n_heads: heads,
        vocab_size: rng.gen_range(8..=64),
        n_visual: rng.gen_range(2..=16),
        seed,
        positions: if rng.gen_bool(0.5) { PositionEncoding::Rope } else { PositionEncoding::Learned },
        max_positions: 64,
    };
    let visual = VisualInput::Embeddings(synth_image(&config, seed ^ 0x5eed));
    (config, visual)
}

fn random_saver(rng: &mut ChaCha8Rng, n_layers: usize, alpha: f64) -> SaverParams {
    let mut layers: Vec<usize> = (1..n_layers).filter(|_| rng.gen_bool(0.6)).collect();
    if layers.is_empty() {
        layers.push(1);
    }
    SaverParams {
        alpha,
        top_p: rng.gen_range(0.05..=1.0),
        top_k: rng.gen_range(1..=25),
        n_image_tokens: rng.gen_range(1..=60),
        layers: LayerSpec::Explicit(layers),
    }
}

fn equivalence() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let configs = 120;
    for seed in 0..configs {
        let (config, vis) = random_toy(&mut rng, seed);
        let m = build_toy(config.clone()).map_err(|e| e.to_string())?;
        let prompt: Vec<u32> = (0..rng.gen_range(1..=4)).map(|_| rng.gen_range(0..config.vocab_size as u32)).collect();
        let base = DecodeParams { max_new_tokens: 8, ..Default::default() };
        let g = greedy_decode(&m, &prompt, &vis, &base).map_err(|e| e.to_string())?;
        let with = DecodeParams { saver: Some(random_saver(&mut rng, config.n_layers, 0.0)), ..base.clone() };
        let s = saver_decode(&m, &prompt, &vis, &with).map_err(|e| e.to_string())?;
        ensure(g.tokens == s.tokens, || format!("seed {seed}: alpha=0 {:?} != greedy {:?}", s.tokens, g.tokens))?;
        for p in [base, DecodeParams { saver: Some(random_saver(&mut rng, config.n_layers, 0.6)), ..with }] {
            let single = decode(&m, &prompt, &vis, &p).map_err(|e| e.to_string())?;
            let beam = beam_decode(&m, &prompt, &vis, &p).map_err(|e| e.to_string())?;
            ensure(single.tokens == beam.best.tokens, || format!("seed {seed}: B=1 beam differs from single path"))?;
        }
    }
    let t = start.elapsed();
    ensure(t < Duration::from_secs(10), || format!("took {t:?}"))?;
    Ok(format!("{configs} configurations, alpha=0 and B=1 identities exact, {t:.2?}"))
}

fn locality() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut steps = 0;
    for seed in 0..60 {
        let (config, vis) = random_toy(&mut rng, 1000 + seed);
        let m = build_toy(config.clone()).map_err(|e| e.to_string())?;
        let alpha = rng.gen_range(0.0..2.0);
        let sp = random_saver(&mut rng, config.n_layers, alpha);
        let p = DecodeParams { max_new_tokens: 10, ..DecodeParams::with_saver(sp.clone()) };
        let out = saver_decode(&m, &[1], &vis, &p).map_err(|e| e.to_string())?;
        let (session, _) = m.prefill(&[1], &vis).map_err(|e| e.to_string())?;
        let layers = sp.layers.resolve(config.n_layers).map_err(|e| e.to_string())?;
        let hidden = collect_visual_hidden(&m, &session, &layers).map_err(|e| e.to_string())?;
        let table = build_sas_table(&hidden, m.unembedding(), &layers, config.n_layers).map_err(|e| e.to_string())?;
        let n = sp.n_image_tokens.min(config.n_visual);
        for r in &out.records {
            steps += 1;
            let gamma = r.gamma.unwrap_or(-1.0);
            ensure((0.0..=1.0).contains(&gamma), || format!("gamma {gamma} outside [0, 1]"))?;
            for (i, (a, b)) in r.final_logits.iter().zip(&r.revised_logits).enumerate() {
                if !r.candidate_ids.contains(&(i as u32)) {
                    ensure(a.to_bits() == b.to_bits(), || format!("seed {seed} step {}: index {i} changed", r.step_index))?;
                }
            }
            // Rescaling the score from a mean to a sum must not move the argmax.
            let mut best: Option<(usize, f64)> = None;
            for &l in &layers {
                let mut sigma = f64::NEG_INFINITY;
                for &c in &r.candidate_ids {
                    let mut probs: Vec<f64> = table.token_probs(l, c).unwrap().iter().map(|&x| f64::from(x)).collect();
                    probs.sort_by(|a, b| b.total_cmp(a));
                    sigma = sigma.max(probs[..n].iter().sum());
                }
                if best.is_none_or(|(_, s)| sigma > s) {
                    best = Some((l, sigma));
                }
            }
            ensure(best.map(|b| b.0) == r.chosen_layer, || format!("sum-scored layer {best:?} != {:?}", r.chosen_layer))?;
        }
    }
    let t = start.elapsed();
    ensure(t < Duration::from_secs(5), || format!("took {t:?}"))?;
    Ok(format!("{steps} steps checked bitwise outside the candidate set, {t:.2?}"))
}

fn precompute() -> Check {
    for seed in 0..10 {
        let case = planted_case(seed).map_err(|e| e.to_string())?;
        let m = &case.model;
        let layers = m.recorded_layers();
        let (mut s, _) = m.prefill(&case.prompt, &case.visual).map_err(|e| e.to_string())?;
        let first = collect_visual_hidden(m, &s, &layers).map_err(|e| e.to_string())?;
        let table = build_sas_table(&first, m.unembedding(), &layers, 6).map_err(|e| e.to_string())?;
        for t in 1..=12u32 {
            m.step(&mut s, 30 + t).map_err(|e| e.to_string())?;
            let now = collect_visual_hidden(m, &s, &layers).map_err(|e| e.to_string())?;
            for (l, mat) in &now {
                let same = mat.as_slice().iter().zip(first[l].as_slice()).all(|(a, b)| a.to_bits() == b.to_bits());
                ensure(same, || format!("seed {seed}: layer {l} visual state changed at step {t}"))?;
            }
            let rebuilt = build_sas_table(&now, m.unembedding(), &layers, 6).map_err(|e| e.to_string())?;
            ensure(rebuilt == table, || format!("seed {seed}: per-step table differs at step {t}"))?;
        }
    }
    Ok("visual states bitwise constant over 12 steps; per-step tables equal the prefill table".into())
}

/// Golden pass rate recorded on the first run (50 of 50 seeds); the allowed
/// tolerance is 5 percentage points.
const GOLDEN_FLIP_RATE: f64 = 1.0;

fn fixture_efficacy() -> Check {
    let seeds = 50;
    let (mut flips, mut greedy_flips, mut gap_sum) = (0, 0, 0.0);
    for seed in 0..seeds {
        let case = planted_case(seed).map_err(|e| e.to_string())?;
        let saver = SaverParams::default();
        let layers = saver.layers.resolve(6).map_err(|e| e.to_string())?;
        gap_sum += case.sas_gap(&layers, saver.n_image_tokens).map_err(|e| e.to_string())?;
        let base = DecodeParams { max_new_tokens: 1, ..Default::default() };
        let g = greedy_decode(&case.model, &case.prompt, &case.visual, &base).map_err(|e| e.to_string())?;
        let s = saver_decode(&case.model, &case.prompt, &case.visual, &DecodeParams { saver: Some(saver), ..base })
            .map_err(|e| e.to_string())?;
        ensure(g.tokens[0] == case.spec.distractor_token, || format!("seed {seed}: greedy did not name the distractor"))?;
        flips += usize::from(s.tokens[0] == case.spec.grounded_token);
        greedy_flips += usize::from(g.tokens[0] == case.spec.grounded_token);
    }
    let gap = gap_sum / seeds as f64;
    let rate = flips as f64 / seeds as f64;
    let summary = format!(
        "mean early-layer SAS gap {gap:.3}, revised flips {flips}/{seeds} ({:.0}%), greedy flips {greedy_flips}/{seeds}",
        100.0 * rate
    );
    ensure(gap >= 0.3, || summary.clone())?;
    ensure(rate >= 0.8 && rate >= GOLDEN_FLIP_RATE - 0.05, || summary.clone())?;
    ensure(greedy_flips == 0, || summary.clone())?;
    Ok(summary)
}

fn ann(id: &str, objects: &[&str]) -> ImageAnnotation {
    ImageAnnotation {
        image_id: id.into(),
        style: Style::Original,
        objects: objects.iter().map(|s| s.to_string()).collect(),
        captions: vec![],
    }
}

fn cap(id: &str, text: &str) -> CaptionRecord {
    CaptionRecord { image_id: id.into(), caption: text.into() }
}

fn metric_oracles() -> Check {
    let lex = lexicon();
    let one = chair(&[cap("a", "a dog, a cup and a bench")], &[ann("a", &["dog", "cup"])], &lex).map_err(|e| e.to_string())?;
    ensure(one.overall.chair_i == 1.0 / 3.0 && one.overall.chair_s == 1.0, || format!("single example {:?}", one.overall))?;
    let three = chair(
        &[cap("a", "a dog and a cat"), cap("b", "a car near a bench"), cap("c", "a tv, a mug, a bear and people")],
        &[ann("a", &["dog", "cat"]), ann("b", &["car"]), ann("c", &["tv", "cup"])],
        &lex,
    )
    .map_err(|e| e.to_string())?;
    ensure(three.overall.chair_i == 3.0 / 8.0 && three.overall.chair_s == 2.0 / 3.0, || format!("three-caption example {:?}", three.overall))?;

    let mut rng = ChaCha8Rng::seed_from_u64(1000);
    let trials = 1000;
    for trial in 0..trials {
        let n = rng.gen_range(2..=10);
        let corpus = random_corpus(&mut rng, n, 1);
        let results: Vec<CaptionRecord> = (0..rng.gen_range(0..=12))
            .map(|_| cap(&corpus[rng.gen_range(0..n)].image_id, &random_caption(&mut rng)))
            .collect();
        let r = chair(&results, &corpus, &lex).map_err(|e| e.to_string())?.overall;
        let o = chair_recount(&results, &corpus, None);
        let same = (r.hallucinated_instances, r.mentioned_instances, r.captions_with_hallucination, r.n_captions)
            == (o.hallucinated, o.mentioned, o.bad_captions, o.captions)
            && r.chair_i == frac(o.hallucinated, o.mentioned)
            && r.chair_s == frac(o.bad_captions, o.captions);
        ensure(same, || format!("trial {trial}: chair {r:?} vs recount {o:?}"))?;

        let strategy = Strategy::ALL[trial % 3];
        let universe: std::collections::BTreeSet<&String> = corpus.iter().flat_map(|c| &c.objects).collect();
        let min_absent = corpus.iter().map(|c| universe.len() - c.objects.len()).min().unwrap();
        let per_image = 2 * min_absent.clamp(1, 3);
        if min_absent == 0 {
            continue;
        }
        let qs = pope_generate(&corpus, strategy, per_image, rng.gen()).map_err(|e| e.to_string())?.questions;
        let qs: Vec<_> = qs.into_iter().take(40).collect();
        let mut answers = BTreeMap::new();
        for q in &qs {
            if rng.gen_bool(0.9) {
                answers.insert(q.question_id.clone(), [Answer::Yes, Answer::No, Answer::Unknown][rng.gen_range(0..3)]);
            }
        }
        let list: Vec<_> = answers.iter().map(|(k, v)| (k.clone(), *v)).collect();
        let got = pope_score(&list, &qs).map_err(|e| e.to_string())?.overall;
        let want = pope_recount(&answers, &qs.iter().collect::<Vec<_>>());
        ensure(got == want, || format!("trial {trial}: pope {got:?} vs recount {want:?}"))?;
    }
    Ok(format!("hand examples 1/3, 3/8, 2/3 exact; {trials} random trials equal the recounts"))
}

fn pope_generation() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let corpus = random_corpus(&mut rng, 10, 2);
    let mut n_questions = 0;
    for strategy in Strategy::ALL {
        let a = pope_generate(&corpus, strategy, 6, 5).map_err(|e| e.to_string())?;
        let b = pope_generate(&corpus, strategy, 6, 5).map_err(|e| e.to_string())?;
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let (pa, pb) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
        std::fs::write(&pa, to_jsonl(&a.questions).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        std::fs::write(&pb, to_jsonl(&b.questions).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        ensure(std::fs::read(&pa).unwrap() == std::fs::read(&pb).unwrap(), || format!("{strategy}: files differ"))?;
        for q in &a.questions {
            n_questions += 1;
            let img = corpus.iter().find(|c| c.image_id == q.image_id).unwrap();
            ensure((q.expected == Label::Yes) == img.objects.contains(&q.object), || format!("label mismatch {q:?}"))?;
        }
        if strategy == Strategy::Adversarial {
            for img in &corpus {
                let nos: Vec<String> = a
                    .questions
                    .iter()
                    .filter(|q| q.image_id == img.image_id && q.expected == Label::No)
                    .map(|q| q.object.clone())
                    .collect();
                let oracle = cooccurrence_order(&corpus, img);
                ensure(nos[..] == oracle[..nos.len()], || format!("{}: {nos:?} vs {oracle:?}", img.image_id))?;
            }
        }
    }
    Ok(format!("{n_questions} questions label-consistent; adversarial prefix matches; files byte-identical"))
}

fn bridge_trace() -> Check {
    let rel = |x: f64, y: f64| (x - y).abs() / x.abs().max(y.abs()).max(1e-12);
    let mut worst: f64 = 0.0;
    for seed in 0..5 {
        let case = planted_case(seed).map_err(|e| e.to_string())?;
        let p = DecodeParams { max_new_tokens: 8, ..DecodeParams::with_saver(SaverParams::default()) };
        let (live, trace) = decode_with_trace(&case.model, &case.prompt, &case.visual, &p).map_err(|e| e.to_string())?;
        let back = read_trace(&write_trace(&trace).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        ensure(back == trace, || format!("seed {seed}: round trip differs"))?;
        let replayed = replay(&back, &p).map_err(|e| e.to_string())?;
        ensure(replayed.len() == live.records.len(), || "record count differs".into())?;
        for (a, b) in live.records.iter().zip(&replayed) {
            ensure(
                a.candidate_ids == b.candidate_ids && a.chosen_layer == b.chosen_layer && a.emitted_token == b.emitted_token,
                || format!("seed {seed} step {}: discrete fields differ", a.step_index),
            )?;
            worst = worst.max(rel(a.gamma.unwrap(), b.gamma.unwrap()));
            for (x, y) in a.revised_logits.iter().zip(&b.revised_logits) {
                worst = worst.max(rel(f64::from(*x), f64::from(*y)));
            }
        }
    }
    ensure(worst <= 1e-5, || format!("replay relative error {worst:e}"))?;
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/traces/corrupt");
    let errors = [
        read_trace_file(dir.join("bad_magic.svtr")).err(),
        read_trace_file(dir.join("bad_version.svtr")).err(),
        read_trace_file(dir.join("truncated.svtr")).err(),
    ];
    let named = matches!(
        errors,
        [Some(Error::NotATrace), Some(Error::UnsupportedVersion(_)), Some(Error::CorruptTrace(_))]
    );
    ensure(named, || format!("corrupt fixtures gave {errors:?}"))?;
    Ok(format!("round trips exact; replay max relative error {worst:e}; three named errors"))
}

fn exhaustive_beam() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(512);
    let instances = 100;
    for i in 0..instances {
        let config = ToyConfig {
            n_layers: 3,
            d_model: 8,
            n_heads: 2,
            vocab_size: 8,
            n_visual: 3,
            seed: 9000 + i,
            positions: PositionEncoding::Learned,
            max_positions: 16,
        };
        let m = build_toy(config.clone()).map_err(|e| e.to_string())?;
        let vis = VisualInput::Embeddings(synth_image(&config, i));
        let prompt = [rng.gen_range(0..8u32)];
        let saver = (i % 2 == 1).then(|| SaverParams {
            alpha: rng.gen_range(0.2..1.5),
            top_p: rng.gen_range(0.3..=1.0),
            top_k: rng.gen_range(1..=8),
            n_image_tokens: 2,
            layers: LayerSpec::Explicit(vec![1, 2]),
        });
        let p = DecodeParams { max_new_tokens: 3, beam_width: 512, saver: saver.clone(), ..Default::default() };
        let got = beam_decode(&m, &prompt, &vis, &p).map_err(|e| e.to_string())?;

        // Enumerate the whole tree: scores for every prefix from the uncached pass.
        let mut prefix_scores: BTreeMap<Vec<u32>, Vec<f64>> = BTreeMap::new();
        let mut frontier = vec![Vec::new()];
        for _ in 0..3 {
            let mut next = Vec::new();
            for prefix in frontier {
                let z = oracle_step_logits(&m, &vis, &prompt, &prefix, saver.as_ref());
                prefix_scores.insert(prefix.clone(), log_softmax(&z).unwrap());
                for t in 0..8u32 {
                    let mut s = prefix.clone();
                    s.push(t);
                    next.push(s);
                }
            }
            frontier = next;
        }
        let mut best: Option<(f64, Vec<u32>)> = None;
        for seq in frontier {
            let score: f64 = (0..3).map(|k| prefix_scores[&seq[..k].to_vec()][seq[k] as usize]).sum();
            if best.as_ref().is_none_or(|(b, _)| score > *b) {
                best = Some((score, seq));
            }
        }
        let (score, seq) = best.unwrap();
        ensure(got.best.tokens == seq, || format!("instance {i}: beam {:?} vs optimum {seq:?}", got.best.tokens))?;
        ensure((got.beams[0].log_prob - score).abs() < 1e-9, || format!("instance {i}: score {} vs {score}", got.beams[0].log_prob))?;
    }
    Ok(format!("{instances} instances, beam width 512 returns the enumerated optimum"))
}

fn main() {
    let start = Instant::now();
    let criteria: [(&str, fn() -> Check); 8] = [
        ("equivalence suite", equivalence),
        ("revision locality", locality),
        ("precompute validity", precompute),
        ("fixture efficacy", fixture_efficacy),
        ("metric oracles", metric_oracles),
        ("POPE generation", pope_generation),
        ("bridge/trace", bridge_trace),
        ("exhaustive beam oracle", exhaustive_beam),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let t = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(msg) => println!("PASS  {name}: {msg} [{:.2?}]", t.elapsed()),
            Err(msg) => {
                failed += 1;
                println!("FAIL  {name}: {msg} [{:.2?}]", t.elapsed());
            }
        }
    }
    let total = start.elapsed();
    if total < Duration::from_secs(60) {
        println!("PASS  suite runtime: acceptance criteria completed in {total:.2?} (limit 60 s)");
    } else {
        failed += 1;
        println!("FAIL  suite runtime: {total:.2?} exceeds 60 s");
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
