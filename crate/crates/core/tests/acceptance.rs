//! Acceptance checks, one line per criterion. Runs offline; dataset and live-provider
//! checks are skipped with a notice when their inputs are missing.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ttr_core::baselines::{
    eda_change_count, random_deletion, random_insertion, random_swap, Eda, EdaConfig, SeededRandom, SynonymLexicon,
};
use ttr_core::dataset_io::{read_dataset, subsample, write_dataset, DatasetFile, DatasetFormat};
use ttr_core::label_tools::{parse_iob_response, validate_iob_sequence, IobScheme};
use ttr_core::llm_gateway::{Gateway, Matcher, MockProvider, MockRule, Reply, ResponseCache};
use ttr_core::metrics::{
    accuracy, distinct_n, distinct_n_global, macro_f1, semantic_variability_pairwise, similarity_greedy_f1,
    wilcoxon_signed_rank, SimilarityScorer, WilcoxonMethod,
};
use ttr_core::pipeline::{build_gateway, cmd_evaluate, run_augment, AugmentConfig, EvaluateConfig, Method};
use ttr_core::ttr_engine::{parse_regeneration_response, parse_transplant_response, TtrEngine};
use ttr_core::{ContinuationMode, IobTag, RunConfig, SeedSample, TaskType};

enum Outcome {
    Pass(String),
    Fail(String),
    Skip(String),
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

const VOCAB: [&str; 8] = ["the", "cat", "sat", "on", "a", "mat", "dog", "ran"];

fn random_text(rng: &mut ChaCha8Rng, max_tokens: usize) -> String {
    let len = rng.random_range(1..=max_tokens);
    (0..len).map(|_| VOCAB[rng.random_range(0..VOCAB.len())]).collect::<Vec<_>>().join(" ")
}

// ---- independent oracles ---------------------------------------------------

fn oracle_distinct(texts: &[String], n: usize) -> f64 {
    let mut grams: Vec<String> = Vec::new();
    for t in texts {
        let toks: Vec<&str> = t.split(' ').collect();
        if toks.len() >= n {
            for i in 0..=toks.len() - n {
                grams.push(toks[i..i + n].join("\u{1}"));
            }
        }
    }
    let total = grams.len();
    grams.sort();
    grams.dedup();
    if total == 0 {
        0.0
    } else {
        grams.len() as f64 / total as f64
    }
}

fn oracle_f1(c: &str, r: &str) -> f64 {
    let c: Vec<&str> = c.split(' ').collect();
    let r: Vec<&str> = r.split(' ').collect();
    let p = c.iter().filter(|t| r.contains(t)).count() as f64 / c.len() as f64;
    let rec = r.iter().filter(|t| c.contains(t)).count() as f64 / r.len() as f64;
    if p + rec == 0.0 {
        0.0
    } else {
        2.0 * p * rec / (p + rec)
    }
}

fn oracle_pairwise(groups: &BTreeMap<String, Vec<String>>) -> f64 {
    let per_group: Vec<f64> = groups
        .values()
        .map(|g| {
            let mut scores = Vec::new();
            for (i, a) in g.iter().enumerate() {
                for b in &g[i + 1..] {
                    scores.push(1.0 - oracle_f1(a, b));
                }
            }
            scores.iter().sum::<f64>() / scores.len() as f64
        })
        .collect();
    per_group.iter().sum::<f64>() / per_group.len() as f64
}

fn oracle_macro_f1(gold: &[String], pred: &[String], classes: &[String]) -> f64 {
    let mut sum = 0.0;
    for c in classes {
        let tp = gold.iter().zip(pred).filter(|(g, p)| *g == c && *p == c).count() as f64;
        let predicted = pred.iter().filter(|p| *p == c).count() as f64;
        let actual = gold.iter().filter(|g| *g == c).count() as f64;
        let precision = if predicted > 0.0 { tp / predicted } else { 0.0 };
        let recall = if actual > 0.0 { tp / actual } else { 0.0 };
        sum += if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
    }
    sum / classes.len() as f64
}

/// Two-sided exact p by enumerating all sign assignments over average ranks.
fn oracle_wilcoxon(a: &[f64], b: &[f64]) -> (f64, f64) {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    let n = d.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| d[i].abs().partial_cmp(&d[j].abs()).unwrap());
    // doubled average ranks keep every sum integral
    let mut rank2 = vec![0i64; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && d[order[j + 1]].abs() == d[order[i]].abs() {
            j += 1;
        }
        for k in i..=j {
            rank2[order[k]] = (i + j + 2) as i64;
        }
        i = j + 1;
    }
    let total: i64 = rank2.iter().sum();
    let w_plus: i64 = (0..n).filter(|&k| d[k] > 0.0).map(|k| rank2[k]).sum();
    let stat = w_plus.min(total - w_plus);
    let mut at_or_below = 0u64;
    for mask in 0u64..(1 << n) {
        let w: i64 = (0..n).filter(|k| mask >> k & 1 == 1).map(|k| rank2[k]).sum();
        if w <= stat {
            at_or_below += 1;
        }
    }
    (stat as f64 / 2.0, (2.0 * at_or_below as f64 / (1u64 << n) as f64).min(1.0))
}

// ---- criteria --------------------------------------------------------------

fn fixture_seeds() -> Vec<SeedSample> {
    vec![
        SeedSample::classification("p1", "the acting was warm and the script sparkled", "positive"),
        SeedSample::classification("p2", "a clever, joyful ride from start to finish", "positive"),
        SeedSample::classification("p3", "i left the cinema smiling and humming the score", "positive"),
        SeedSample::classification("n1", "the plot drags and the jokes fall flat", "negative"),
        SeedSample::classification("n2", "a tired sequel with nothing new to say", "negative"),
        SeedSample::classification("n3", "the pacing is sluggish and the ending is a mess", "negative"),
    ]
}

fn scripted_gateway(cache: &Path) -> Gateway {
    let mock = MockProvider::new(vec![MockRule::new(Matcher::Any, Reply::Synthetic)]).unwrap().named("mock");
    Gateway::new().with_provider(Arc::new(mock)).with_cache(ResponseCache::open(cache).unwrap())
}

/// Augmented file, metrics.txt, metrics.jsonl, live calls.
type RunFiles = (Vec<u8>, Vec<u8>, Vec<u8>, u64);

fn mock_determinism(work: &Path) -> Outcome {
    let started = Instant::now();
    let data = work.join("seeds.jsonl");
    write_dataset(&fixture_seeds(), &DatasetFile::new(&data, DatasetFormat::JsonLines, TaskType::Classification).unwrap())
        .unwrap();
    let run = |name: &str, cache: &Path| -> Result<RunFiles, String> {
        let out = work.join(name);
        let mut cfg = AugmentConfig::new(&data, Method::Ttr, TaskType::Classification, &out);
        cfg.run.k_per_seed = 3;
        cfg.run.mode = ContinuationMode::ForwardFirst;
        let gw = scripted_gateway(cache);
        let done = run_augment(&cfg, &gw).map_err(|e| e.to_string())?;
        let eval = work.join(format!("{name}-eval"));
        cmd_evaluate(&EvaluateConfig::new(&out, TaskType::Classification, &eval)).map_err(|e| e.to_string())?;
        let read = |p: PathBuf| fs::read(p).unwrap();
        Ok((
            read(out.join("run-0/augmented.jsonl")),
            read(eval.join("metrics.txt")),
            read(eval.join("metrics.jsonl")),
            done.manifest.cache.live_calls,
        ))
    };
    let outcome = (|| -> Result<Outcome, String> {
        let a = run("cold-a", &work.join("cache-a.jsonl"))?;
        let b = run("cold-b", &work.join("cache-b.jsonl"))?;
        let w = run("warm", &work.join("cache-a.jsonl"))?;
        let samples = String::from_utf8_lossy(&a.0).lines().count();
        let secs = started.elapsed().as_secs_f64();
        let same = a.0 == b.0 && a.0 == w.0 && a.1 == b.1 && a.1 == w.1 && a.2 == b.2 && a.2 == w.2;
        Ok(check(
            same && samples == 18 && w.3 == 0 && secs < 5.0,
            format!("{samples} samples, identical={same}, warm live calls={}, {secs:.2}s", w.3),
        ))
    })();
    outcome.unwrap_or_else(Outcome::Fail)
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let exact = SimilarityScorer::ExactToken;
    let mut worst: f64 = 0.0;
    let trials = 150;
    for _ in 0..trials {
        let n_texts = rng.random_range(2..=10);
        let texts: Vec<String> = (0..n_texts).map(|_| random_text(&mut rng, 12)).collect();
        let split = rng.random_range(1..n_texts);
        let n = rng.random_range(1..=3);
        let diffs = [
            distinct_n_global(&texts[..split], &texts[split..], n).unwrap() - oracle_distinct(&texts, n),
            similarity_greedy_f1(&texts[0], &texts[1], &exact).unwrap() - oracle_f1(&texts[0], &texts[1]),
        ];
        let mut groups = BTreeMap::new();
        for (i, chunk) in texts.chunks(2).enumerate().filter(|(_, c)| c.len() == 2) {
            groups.insert(format!("g{i}"), chunk.to_vec());
        }
        let pairwise = semantic_variability_pairwise(&groups, &exact).unwrap() - oracle_pairwise(&groups);

        let classes: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let m = rng.random_range(1..=10);
        let gold: Vec<String> = (0..m).map(|_| classes[rng.random_range(0..3)].clone()).collect();
        let pred: Vec<String> = (0..m).map(|_| classes[rng.random_range(0..3)].clone()).collect();
        let acc = gold.iter().zip(&pred).filter(|(g, p)| g == p).count() as f64 / m as f64;
        let score_diffs = [
            accuracy(&gold, &pred).unwrap() - acc,
            macro_f1(&gold, &pred, &classes).unwrap() - oracle_macro_f1(&gold, &pred, &classes),
        ];
        for d in diffs.iter().chain(&score_diffs).chain([&pairwise]) {
            worst = worst.max(d.abs());
        }
    }
    check(worst <= 1e-9, format!("{trials} fixtures x 5 metrics, max |diff| = {worst:.2e}"))
}

fn wilcoxon_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    let mut fixtures = 0;
    // quarter steps keep differences exact, so tie structure is unambiguous
    while fixtures < 50 {
        let n = rng.random_range(5..=12);
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(0..20) as f64 / 4.0).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.random_range(0..20) as f64 / 4.0).collect();
        let nonzero = a.iter().zip(&b).filter(|(x, y)| *x - *y != 0.0).count();
        if nonzero < 5 {
            continue;
        }
        let r = match wilcoxon_signed_rank(&a, &b) {
            Ok(r) => r,
            Err(e) => return Outcome::Fail(format!("fixture {fixtures}: {e}")),
        };
        let (stat, p) = oracle_wilcoxon(&a, &b);
        if r.method != WilcoxonMethod::Exact {
            return Outcome::Fail(format!("fixture {fixtures} used the normal approximation"));
        }
        worst = worst.max((r.p_value - p).abs()).max((r.statistic - stat).abs());
        fixtures += 1;
    }
    let base: Vec<f64> = (0..10).map(|i| 0.80 + 0.003 * i as f64).collect();
    let shifted: Vec<f64> = base.iter().map(|x| x + 0.02).collect();
    let shift = wilcoxon_signed_rank(&shifted, &base).unwrap();
    check(
        worst <= 1e-12 && (shift.p_value - 2.0 / 1024.0).abs() <= 1e-12 && shift.significant(),
        format!(
            "50 fixtures, max |diff| = {worst:.2e}; constant shift p = {:.5} significant={}",
            shift.p_value,
            shift.significant()
        ),
    )
}

fn eda_properties() -> Outcome {
    let lexicon = SynonymLexicon::bundled();
    let words: Vec<String> = ["good", "movie", "the", "film", "bad", "story", "a", "great", "and", "was"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let mut meta = ChaCha8Rng::seed_from_u64(99);
    let mut problems = Vec::new();
    for trial in 0..1000u64 {
        let len = meta.random_range(1..=25);
        let tokens: Vec<String> = (0..len).map(|_| words[meta.random_range(0..words.len())].clone()).collect();
        let alpha = meta.random_range(0.05..0.5);
        let p = meta.random_range(0.0..1.0);
        let mut rng = SeededRandom::new(trial);

        if random_deletion(&tokens, p, &mut rng).is_empty() {
            problems.push(format!("trial {trial}: deletion emptied the text"));
        }
        if random_deletion(&tokens, 0.0, &mut rng) != tokens {
            problems.push(format!("trial {trial}: p_delete=0 changed the text"));
        }
        let mut swapped = random_swap(&tokens, eda_change_count(alpha, len), &mut rng);
        let mut sorted = tokens.clone();
        swapped.sort();
        sorted.sort();
        if swapped != sorted {
            problems.push(format!("trial {trial}: swap changed the multiset"));
        }
        let expected = len + ((alpha * len as f64).round() as usize).max(1);
        let has_synonym = tokens.iter().any(|t| !lexicon.synonyms(t).is_empty());
        let inserted = random_insertion(&tokens, eda_change_count(alpha, len), &lexicon, &mut rng);
        if has_synonym && inserted.len() != expected {
            problems.push(format!("trial {trial}: insertion gave {} tokens, expected {expected}", inserted.len()));
        }

        let seed = SeedSample::classification(format!("s{trial}"), tokens.join(" "), "positive");
        let cfg = EdaConfig { alpha, p_delete: p, rng_seed: trial, synonym_lexicon: None };
        let first = Eda::new(cfg.clone()).unwrap().augment(&seed, 2).unwrap();
        let second = Eda::new(cfg).unwrap().augment(&seed, 2).unwrap();
        if first != second {
            problems.push(format!("trial {trial}: fixed rng_seed did not reproduce"));
        }
    }
    check(problems.is_empty(), if problems.is_empty() { "1000 trials".into() } else { problems[..problems.len().min(3)].join("; ") })
}

fn mode_contract() -> Outcome {
    let engine = TtrEngine::default();
    let seed = SeedSample::classification("s", "the film was a delight", "positive");
    let blocks = |mode| engine.build_transplant_prompt(&seed, mode, "sentence").unwrap().instruction_blocks();
    let forward = blocks(ContinuationMode::ForwardFirst);
    let backward = blocks(ContinuationMode::BackwardFirst);
    let uni = blocks(ContinuationMode::Unidirectional);

    let gw = Gateway::new().with_provider(Arc::new(MockProvider::synthetic()));
    let contexts: Vec<_> = [ContinuationMode::Unidirectional, ContinuationMode::ForwardFirst]
        .into_iter()
        .map(|mode| {
            let cfg = RunConfig { mode, ..RunConfig::default() };
            engine.transplant(&seed, &cfg, &gw, 0).map(|o| o.context)
        })
        .collect();
    let (uni_ctx, fwd_ctx) = match (&contexts[0], &contexts[1]) {
        (Ok(u), Ok(f)) => (u, f),
        _ => return Outcome::Fail("transplant failed under the mock provider".into()),
    };
    let forward_first = forward.first().map(String::as_str) == Some("Subsequent Sentence")
        && forward.last().map(String::as_str) == Some("Preceding Sentence");
    let backward_first = backward.first().map(String::as_str) == Some("Preceding Sentence")
        && backward.last().map(String::as_str) == Some("Subsequent Sentence");
    let ok = uni_ctx.preceding.is_empty()
        && !fwd_ctx.preceding.is_empty()
        && uni.len() < forward.len()
        && uni.len() < backward.len()
        && forward != backward
        && forward_first
        && backward_first;
    check(ok, format!("forward {forward:?}, backward {backward:?}, unidirectional {uni:?}"))
}

fn parser_robustness() -> Outcome {
    let seed = "the film was a delight";
    let fw = ContinuationMode::ForwardFirst;
    let uni = ContinuationMode::Unidirectional;
    let transplant_good: [(&str, ContinuationMode); 10] = [
        ("Preceding Sentence: [It opened.]\nOriginal Text: [x]\nSubsequent Sentence: [It closed.]", fw),
        ("**Preceding Sentence:** It opened.\n**Original Text:** x\n**Subsequent Sentence:** It closed.", fw),
        ("PRECEDING SENTENCE: [It opened.]\nSUBSEQUENT SENTENCE: [It closed.]", fw),
        ("   preceding sentence  :    [ It opened. ]   \n\n  subsequent sentence:   [It closed.]  ", fw),
        ("1. Preceding Sentence: \"It opened.\"\n2. Original Text: x\n3. Subsequent Sentence: \"It closed.\"", fw),
        ("Sure! Here it is.\n\nPreceding Sentence: It opened.\nSubsequent Sentence: It closed.\n\nHope this helps.", fw),
        ("- *Preceding Sentence*: It opened.\n- *Subsequent Sentence*: It closed.", fw),
        ("Preceding Sentence:\n[It opened.]\n\nSubsequent Sentence:\n[It closed.]", fw),
        ("Original Text: [x]\nSubsequent Sentence: [It closed.]", uni),
        ("## Subsequent Sentence: It closed.", uni),
    ];
    let regen_good = [
        "Preceding Sentence: [a]\nMiddle Sentence: [A new line.]\nSubsequent Sentence: [b]",
        "**Middle Sentence:** A new line.",
        "MIDDLE SENTENCE: [A new line.]",
        "   middle sentence :   A new line.   ",
        "2. Middle Sentence: \"A new line.\"",
        "Here you go:\n\nMiddle Sentence: A new line.\n\nLet me know if you need more.",
        "Middle Sentence:\n[A new line.]",
        "- Middle Sentence: `A new line.`",
        "### Middle Sentence\nMiddle Sentence: [A new line.]",
        "Preceding Sentence: a\n\n  Middle  Sentence: **A new line.**\nSubsequent Sentence: b",
    ];
    let iob_good = [
        "entities: ['EU', 'rejects']\nlabels: ['B-ORG', 'O']\nIDs: [1, 0]",
        "**entities:** ['EU', 'rejects']\n**labels:** ['B-ORG', 'O']\n**IDs:** [1, 0]",
        "ENTITIES: [\"EU\", \"rejects\"]\nLABELS: [\"B-ORG\", \"O\"]\nIDS: [1, 0]",
        "  entities :  [ 'EU' ,  'rejects' ]  \n labels:['B-ORG','O']\n  IDs : [ 1 , 0 ] ",
        "sentence: EU rejects\nentities: ['EU', 'rejects']\nlabels: ['B-ORG', 'O']\nIDs: [1, 0]",
        "1. entities: ['EU', 'rejects']\n2. labels: ['B-ORG', 'O']\n3. IDs: [1, 0]",
        "entities: [EU, rejects]\nlabels: [B-ORG, O]\nIDs: [1, 0]",
        "Here is the annotation.\n\nentities: ['EU', 'rejects']\nlabels: ['b-org', 'o']\nIDs: [1, 0]",
        "tokens: ['EU', 'rejects']\ntags: ['B-ORG', 'O']\nlabel ids: [1, 0]",
        "- entities: `['EU', 'rejects']`\n- labels: `['B-ORG', 'O']`\n- IDs: `[1, 0]`",
    ];
    let mut wrong = Vec::new();
    for (i, (raw, mode)) in transplant_good.iter().enumerate() {
        match parse_transplant_response(raw, seed, *mode) {
            Ok(c) if c.subsequent == "It closed."
                && c.original == seed
                && c.preceding == if *mode == uni { "" } else { "It opened." } => {}
            other => wrong.push(format!("transplant {i}: {other:?}")),
        }
    }
    for (i, raw) in regen_good.iter().enumerate() {
        match parse_regeneration_response(raw) {
            Ok(m) if m == "A new line." => {}
            other => wrong.push(format!("regeneration {i}: {other:?}")),
        }
    }
    for (i, raw) in iob_good.iter().enumerate() {
        match parse_iob_response(raw) {
            Ok((t, g)) if t == ["EU", "rejects"] && g == [IobTag::BOrg, IobTag::O] => {}
            other => wrong.push(format!("iob {i}: {other:?}")),
        }
    }
    let malformed: [(&str, u8); 10] = [
        ("Preceding Sentence: [It opened.]\nOriginal Text: [x]", 0),
        ("Original Text: [x]\nSubsequent Sentence: [It closed.]", 0),
        ("Preceding Sentence: []\nSubsequent Sentence: [It closed.]", 0),
        ("I am unable to help with that request.", 0),
        ("Preceding Sentence: [a]\nSubsequent Sentence: [b]", 1),
        ("Middle Sentence: [ ]", 1),
        ("entities: ['EU', 'rejects']\nlabels: ['B-ORG']\nIDs: [1, 0]", 2),
        ("entities: ['EU', 'rejects']\nlabels: ['B-ORG', 'O']\nIDs: [3, 0]", 2),
        ("entities: ['EU', 'rejects']\nlabels: ['B-CITY', 'O']\nIDs: [9, 0]", 2),
        ("entities: ['EU', 'rejects'\nlabels: ['B-ORG', 'O']\nIDs: [1, 0]", 2),
    ];
    let mut missed = Vec::new();
    for (i, (raw, kind)) in malformed.iter().enumerate() {
        let failed = match kind {
            0 => parse_transplant_response(raw, seed, fw).is_err(),
            1 => parse_regeneration_response(raw).is_err(),
            _ => parse_iob_response(raw).is_err(),
        };
        if !failed {
            missed.push(i);
        }
    }
    check(
        wrong.is_empty() && missed.is_empty(),
        format!("30 well-formed cases ({} wrong), 10 malformed ({} accepted) {}", wrong.len(), missed.len(), wrong.join("; ")),
    )
}

fn iob_validation() -> Outcome {
    let fixtures: [(&str, &[usize], &[usize]); 20] = [
        ("O O O", &[], &[]),
        ("B-PER I-PER O", &[], &[]),
        ("I-PER O", &[0], &[]),
        ("O I-LOC", &[1], &[]),
        ("B-ORG I-PER", &[1], &[1]),
        ("B-LOC I-LOC I-LOC", &[], &[]),
        ("I-MISC I-MISC", &[0], &[]),
        ("B-PER B-PER I-PER", &[], &[]),
        ("B-ORG I-ORG I-LOC", &[2], &[2]),
        ("O I-ORG I-ORG O I-PER", &[1, 4], &[]),
        ("B-MISC O I-MISC", &[2], &[]),
        ("I-LOC B-LOC I-ORG", &[0, 2], &[2]),
        ("B-PER", &[], &[]),
        ("I-PER", &[0], &[]),
        ("B-LOC I-PER I-LOC", &[1, 2], &[1, 2]),
        ("O O B-ORG I-ORG O B-MISC I-MISC", &[], &[]),
        ("B-ORG O I-ORG B-PER I-PER I-MISC", &[2, 5], &[5]),
        ("I-ORG I-PER", &[0, 1], &[1]),
        ("B-MISC I-MISC I-MISC O O", &[], &[]),
        ("O I-MISC B-LOC I-LOC O I-LOC", &[1, 5], &[]),
    ];
    let mut wrong = Vec::new();
    for (i, (seq, iob2, lenient)) in fixtures.iter().enumerate() {
        let tags: Vec<IobTag> = seq.split(' ').map(|t| t.parse().unwrap()).collect();
        let got2 = validate_iob_sequence(&tags, IobScheme::Iob2).positions();
        let got_l = validate_iob_sequence(&tags, IobScheme::Lenient).positions();
        if got2 != *iob2 || got_l != *lenient {
            wrong.push(format!("#{i} {seq}: iob2 {got2:?}, lenient {got_l:?}"));
        }
    }
    let expected_ids = [
        ("O", 0u8),
        ("B-ORG", 1),
        ("B-MISC", 2),
        ("B-PER", 3),
        ("I-PER", 4),
        ("B-LOC", 5),
        ("I-ORG", 6),
        ("I-MISC", 7),
        ("I-LOC", 8),
    ];
    let map_ok = expected_ids.iter().all(|(name, id)| {
        let tag: IobTag = name.parse().unwrap();
        tag.id() == *id && IobTag::from_id(*id) == Some(tag) && tag.to_string() == *name
    }) && IobTag::from_id(9).is_none();
    check(wrong.is_empty() && map_ok, format!("20 sequences x 2 schemes, tag/id map ok={map_ok} {}", wrong.join("; ")))
}

/// Candidate SST-2 locations: `TTR_SST2_PATH`, then common relative paths.
fn sst2_file() -> Option<PathBuf> {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../..");
    std::env::var_os("TTR_SST2_PATH")
        .map(PathBuf::from)
        .into_iter()
        .chain(
            ["data/sst2/train.tsv", "data/SST-2/train.tsv", "data/sst2/train.jsonl", "data/sst2/subsample.jsonl"]
                .iter()
                .map(|p| root.join(p)),
        )
        .find(|p| p.is_file())
}

/// GLUE-style `sentence<TAB>label` with a header row, or any format the dataset reader accepts.
fn load_sst2(path: &Path) -> Result<Vec<SeedSample>, String> {
    let body = fs::read_to_string(path).map_err(|e| e.to_string())?;
    if body.starts_with("sentence\tlabel") {
        return Ok(body
            .lines()
            .skip(1)
            .enumerate()
            .filter_map(|(i, l)| l.rsplit_once('\t').map(|(t, y)| SeedSample::classification(format!("sst2-{i}"), t, y)))
            .collect());
    }
    read_dataset(&DatasetFile::infer(path, TaskType::Classification).map_err(|e| e.to_string())?).map_err(|e| e.to_string())
}

fn sst2_spot_check() -> Outcome {
    let Some(path) = sst2_file() else {
        return Outcome::Skip("no SST-2 file found (set TTR_SST2_PATH)".into());
    };
    let all = match load_sst2(&path) {
        Ok(s) => s,
        Err(e) => return Outcome::Fail(format!("{}: {e}", path.display())),
    };
    let picked = if all.len() == 20 {
        all
    } else {
        match subsample(&all, TaskType::Classification, 10, 20, 0) {
            Ok(p) => p,
            Err(e) => return Outcome::Fail(e.to_string()),
        }
    };
    let texts: Vec<&str> = picked.iter().map(|s| s.text.as_str()).collect();
    let d3 = distinct_n(&texts, 3).unwrap();
    check((0.97..=1.00).contains(&d3), format!("{}: Distinct-3 = {d3:.4} over {} seeds", path.display(), texts.len()))
}

fn live_smoke(work: &Path) -> Outcome {
    let (provider, model) = if std::env::var_os("OPENAI_API_KEY").is_some() {
        ("openai", std::env::var("TTR_LIVE_MODEL").unwrap_or_else(|_| "gpt-4o-mini".into()))
    } else if std::env::var_os("DEEPSEEK_API_KEY").is_some() {
        ("deepseek", std::env::var("TTR_LIVE_MODEL").unwrap_or_else(|_| "deepseek-chat".into()))
    } else {
        return Outcome::Skip("no OPENAI_API_KEY or DEEPSEEK_API_KEY".into());
    };
    let data = work.join("live.jsonl");
    write_dataset(&fixture_seeds()[2..4], &DatasetFile::new(&data, DatasetFormat::JsonLines, TaskType::Classification).unwrap())
        .unwrap();
    let cache = work.join("live-cache.jsonl");
    let mut cfg = AugmentConfig::new(&data, Method::Ttr, TaskType::Classification, work.join("live"));
    cfg.run = RunConfig { k_per_seed: 1, provider: provider.into(), model, label_type: "sentiment".into(), ..RunConfig::default() };
    let result = build_gateway(provider, None, Some(&cache), 2).and_then(|gw| run_augment(&cfg, &gw));
    match result {
        Ok(done) => check(
            done.failures == 0 && done.manifest.cache.entries > 0,
            format!("{provider}: {} samples, {} failures, {} cache entries", done.samples, done.failures, done.manifest.cache.entries),
        ),
        Err(e) => Outcome::Fail(format!("{provider}: {e}")),
    }
}

type Criterion<'a> = Box<dyn Fn() -> Outcome + 'a>;

fn main() {
    let work = tempfile::tempdir().expect("temp dir");
    let criteria: Vec<(&str, Criterion)> = vec![
        ("mock end-to-end determinism", Box::new(|| mock_determinism(work.path()))),
        ("metric oracles", Box::new(metric_oracles)),
        ("wilcoxon exactness", Box::new(wilcoxon_exactness)),
        ("eda properties", Box::new(eda_properties)),
        ("ablation mode contract", Box::new(mode_contract)),
        ("parser robustness", Box::new(parser_robustness)),
        ("iob validation", Box::new(iob_validation)),
        ("sst-2 distinct-3 spot check", Box::new(sst2_spot_check)),
        ("live provider smoke test", Box::new(|| live_smoke(work.path()))),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let (tag, detail) = match run() {
            Outcome::Pass(d) => ("PASS", d),
            Outcome::Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Outcome::Skip(d) => ("SKIP", d),
        };
        println!("{tag} [{}] {name}: {detail}", i + 1);
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
