//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fails.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ssum::corpus::bpe::{EOS, PAD, SOS};
use ssum::corpus::{generate_toy_corpus, FeatureMatrix};
use ssum::decode::{beam_search, BeamConfig};
use ssum::eval::{lcs_len, meteor_lite, rouge_l, rouge_n, score_corpus, tokenize, wer};
use ssum::leakage::LeakageScores;
use ssum::model::{
    frame_target, gradcheck_suite, Encoding, Example, GradcheckOptions, Model, ModelConfig, ModelInput, NormMode,
    PositionalMode,
};
use ssum::pipeline::{run_experiment, ExperimentConfig, ExperimentReport};
use ssum::tensor::Mat;
use ssum::training::{make_batches, noam_lr, plateau_lr, Adam, BatchItem, BatchRule};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn feats(rows: usize, cols: usize, seed: u64) -> FeatureMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    FeatureMatrix::new(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap()
}

fn gradients() -> Outcome {
    let t = Instant::now();
    let entries = gradcheck_suite(&ModelConfig::tiny(), &[1, 2, 3, 4, 5], GradcheckOptions::default()).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let worst = entries.iter().map(|e| e.report.max_rel_err).fold(0.0, f64::max);
    let checked: usize = entries.iter().map(|e| e.report.checked).sum();
    outcome(
        worst < 1e-4 && secs < 120.0,
        format!("{} runs, {checked} scalars, max relative error {worst:.2e}, {secs:.1}s", entries.len()),
    )
}

fn normalization_causality_masking() -> Outcome {
    let (mut sum_err, mut causal_err, mut pad_err, mut ln_err) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for seed in 0..5u64 {
        for mode in [PositionalMode::Learned, PositionalMode::AbsoluteSinusoidal] {
            let cfg = ModelConfig {
                positional_mode: mode,
                ..ModelConfig::tiny()
            };
            let m = Model::new(cfg, seed).unwrap();
            let enc = m.encode_input(ModelInput::Speech(&feats(20, 5, seed))).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
            let a: Vec<u32> = std::iter::once(SOS).chain((0..7).map(|_| rng.gen_range(2..11))).collect();
            let full = m.decoder_forward(&a, &enc).unwrap();
            for out in &full {
                sum_err = sum_err.max((out.distribution.iter().sum::<f64>() - 1.0).abs());
            }
            for l in 0..a.len() {
                let mut b = a.clone();
                for t in b.iter_mut().skip(l + 1) {
                    *t = rng.gen_range(2..11);
                }
                let other = m.decoder_forward(&b, &enc).unwrap();
                let step = m.decoder_step(&a[..=l], &enc).unwrap();
                for (x, y) in full[l].distribution.iter().zip(&other[l].distribution) {
                    causal_err = causal_err.max((x - y).abs());
                }
                for (x, y) in full[l].distribution.iter().zip(&step.distribution) {
                    causal_err = causal_err.max((x - y).abs());
                }
            }

            // Zero-padded frames with a valid length, padded targets, and a padded batch.
            let short = feats(17, 5, seed + 7);
            let mut data = short.data().to_vec();
            data.extend(feats(9, 5, seed + 8).data());
            let long = FeatureMatrix::new(26, 5, data).unwrap();
            let pa = m.speech_preencode(&short, None).unwrap();
            let pb = m.speech_preencode(&long, Some(17)).unwrap();
            let (ea, eb) = (m.encode(&pa), m.encode(&pb));
            let n = ea.valid_len();
            pad_err = pad_err.max(ea.states.max_abs_diff(&eb.states.slice_rows(0, n)));
            let da = m.decoder_forward(&a, &ea).unwrap();
            let db = m.decoder_forward(&a, &eb).unwrap();
            for (x, y) in da.iter().zip(&db) {
                for (p, q) in x.distribution.iter().zip(&y.distribution) {
                    pad_err = pad_err.max((p - q).abs());
                }
            }
            let target = frame_target(&[4, 5, 6]);
            let mut padded = target.clone();
            padded.extend([PAD; 4]);
            let la = m.forward_loss(&[Example { input: ModelInput::Speech(&short), target: &target }]).unwrap();
            let lb = m.forward_loss(&[Example { input: ModelInput::Speech(&short), target: &padded }]).unwrap();
            pad_err = pad_err.max((la.loss - lb.loss).abs());
            let other = feats(31, 5, seed + 9);
            let lc = m
                .forward_loss(&[
                    Example { input: ModelInput::Speech(&short), target: &target },
                    Example { input: ModelInput::Speech(&other), target: &padded },
                ])
                .unwrap();
            let ld = m.forward_loss(&[Example { input: ModelInput::Speech(&other), target: &padded }]).unwrap();
            pad_err = pad_err.max((lc.loss * 6.0 - (la.loss * 3.0 + ld.loss * 3.0)).abs());

            let po = m.speech_preencode(&other, None).unwrap();
            let joint = m.encode_batch(&[pa.clone(), po.clone()]);
            ln_err = ln_err.max(joint[0].states.max_abs_diff(&m.encode(&pa).states));
            ln_err = ln_err.max(joint[1].states.max_abs_diff(&m.encode(&po).states));
        }
    }
    // Batch normalization is expected to couple the batch; report it alongside.
    let bn = Model::new(ModelConfig { norm_mode: NormMode::BatchNorm, ..ModelConfig::tiny() }, 0).unwrap();
    let pa = bn.speech_preencode(&feats(17, 5, 1), None).unwrap();
    let pb = bn.speech_preencode(&feats(31, 5, 2), None).unwrap();
    let bn_gap = bn.encode_batch(&[pa.clone(), pb])[0].states.max_abs_diff(&bn.encode(&pa).states);
    outcome(
        sum_err <= 1e-6 && causal_err <= 1e-6 && pad_err <= 1e-5 && ln_err <= 1e-6,
        format!(
            "sum-to-one {sum_err:.1e}, future-token {causal_err:.1e}, padding {pad_err:.1e}, LN batch {ln_err:.1e} (BN batch gap {bn_gap:.1e})"
        ),
    )
}

fn sharpened(vocab: usize, seed: u64) -> Model {
    let mut m = Model::new(ModelConfig { vocab_size: vocab, ..ModelConfig::tiny() }, seed).unwrap();
    let w = m.layout.decoder.output.w;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for x in m.params[w].data_mut() {
        *x = rng.gen_range(-2.0..2.0);
    }
    m
}

fn random_encoding(m: &Model, seed: u64) -> Encoding {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = rng.gen_range(4..12);
    let ids: Vec<u32> = (0..len).map(|_| rng.gen_range(3..42)).collect();
    m.encode_input(ModelInput::Phonemes(&ids)).unwrap()
}

fn beam_oracle() -> Outcome {
    let m = sharpened(4, 3);
    let max_len = 3;
    let mut mismatches = 0;
    for i in 0..100 {
        let enc = random_encoding(&m, 1000 + i);
        // Every token sequence over the emittable tokens {eos, unk}, stopping at eos.
        let mut best: Option<(f64, Vec<u32>)> = None;
        let mut stack = vec![(vec![SOS], 0.0)];
        while let Some((seq, lp)) = stack.pop() {
            if seq.len() > max_len {
                continue;
            }
            let dist = m.decoder_step(&seq, &enc).unwrap().distribution;
            for tok in [EOS, 3] {
                let mut next = seq.clone();
                next.push(tok);
                let score = lp + dist[tok as usize].ln();
                if tok == EOS {
                    if best.as_ref().map_or(true, |b| score > b.0) {
                        best = Some((score, next));
                    }
                } else {
                    stack.push((next, score));
                }
            }
        }
        let (score, seq) = best.unwrap();
        let cfg = BeamConfig { beam_width: 1 << max_len, max_len, length_norm: false };
        let r = beam_search(&m, &enc, &cfg).unwrap();
        if r.best.tokens != seq || (r.best.log_prob - score).abs() > 1e-9 {
            mismatches += 1;
        }
    }
    let best_finished = |m: &Model, enc: &Encoding, w: usize, max_len: usize| {
        let r = beam_search(m, enc, &BeamConfig { beam_width: w, max_len, length_norm: false }).unwrap();
        if r.best.finished {
            r.best.log_prob
        } else {
            f64::NEG_INFINITY
        }
    };
    let mut violations = 0;
    for i in 0..100 {
        let enc = random_encoding(&m, 3000 + i);
        let scores: Vec<f64> = (1..=8).map(|w| best_finished(&m, &enc, w, max_len)).collect();
        violations += scores.windows(2).filter(|p| p[1] < p[0] - 1e-12).count();
    }
    // Wider vocabularies are reported only: beam search need not be monotone there.
    let mut wide_violations = 0;
    let wide = sharpened(11, 5);
    for i in 0..50 {
        let enc = random_encoding(&wide, 5000 + i);
        let scores: Vec<f64> = (1..=6).map(|w| best_finished(&wide, &enc, w, 8)).collect();
        wide_violations += scores.windows(2).filter(|p| p[1] < p[0] - 1e-12).count();
    }
    outcome(
        mismatches == 0 && violations == 0,
        format!(
            "{mismatches}/100 exhaustive mismatches, {violations} width-monotonicity violations over 100x8 searches (vocab 11, max_len 8: {wide_violations} of 250 width steps decrease)"
        ),
    )
}

fn lcs_brute(a: &[u8], b: &[u8]) -> usize {
    match (a.split_first(), b.split_first()) {
        (Some((x, ar)), Some((y, br))) => {
            if x == y {
                1 + lcs_brute(ar, br)
            } else {
                lcs_brute(ar, b).max(lcs_brute(a, br))
            }
        }
        _ => 0,
    }
}

fn metric_oracles() -> Outcome {
    let mut seqs: Vec<Vec<u8>> = vec![vec![]];
    let mut frontier = vec![vec![]];
    for _ in 0..6 {
        let mut next = Vec::new();
        for s in &frontier {
            for c in 0..3u8 {
                let mut t: Vec<u8> = s.clone();
                t.push(c);
                next.push(t);
            }
        }
        seqs.extend(next.iter().cloned());
        frontier = next;
    }
    let names = ["x", "y", "z"];
    let as_words = |s: &Vec<u8>| s.iter().map(|&c| names[c as usize]).collect::<Vec<_>>();
    let words: Vec<Vec<&str>> = seqs.iter().map(as_words).collect();
    let mut lcs_bad = 0usize;
    for (i, a) in seqs.iter().enumerate() {
        for (j, b) in seqs.iter().enumerate() {
            if lcs_len(&words[i], &words[j]) != lcs_brute(a, b) {
                lcs_bad += 1;
            }
        }
    }
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-9;
    let t = |s: &str| tokenize(s);
    let mut hand_bad = Vec::new();
    let mut check = |name: &str, ok: bool| {
        if !ok {
            hand_bad.push(name.to_string());
        }
    };
    let r = rouge_n(&t("the cat sat on the mat"), &t("the cat the mat"), 1);
    check("rouge1 clipping", close(r.precision, 1.0) && close(r.recall, 4.0 / 6.0) && close(r.f1, 0.8));
    let r = rouge_n(&t("a b"), &t("c d"), 1);
    check("rouge1 disjoint", r.f1 == 0.0);
    let r = rouge_n(&t("a b c"), &t("a b c"), 2);
    check("rouge2 identical", close(r.f1, 1.0));
    let r = rouge_l(&t("a b c d"), &t("a c b d"));
    check("rougeL swap", close(r.precision, 0.75) && close(r.recall, 0.75) && close(r.f1, 0.75));
    check("meteor none", meteor_lite(&t("a b"), &t("c d")) == 0.0);
    check("meteor identical", close(meteor_lite(&t("hello world"), &t("hello world")), 0.9375));
    let fmean = 1.0 * (2.0 / 3.0) / (0.9 * 1.0 + 0.1 * (2.0 / 3.0));
    check("meteor partial", close(meteor_lite(&t("the cat sat"), &t("the cat")), fmean * 0.9375));
    check("wer identical", wer(&t("a b c"), &t("a b c")).unwrap() == 0.0);
    check("wer sub+ins", close(wer(&t("a b c"), &t("a x c d")).unwrap(), 2.0 / 3.0));
    check("wer empty hyp", close(wer(&t("a b c"), &t("")).unwrap(), 1.0));
    check("wer empty ref", wer(&t(""), &t("a")).is_err());
    let pairs = vec![(t("a b c d"), t("a c b d")), (t("a b"), t("a b"))];
    check("corpus mean", close(score_corpus(&pairs).unwrap().rouge_l.f1, (0.75 + 1.0) / 2.0));
    outcome(
        lcs_bad == 0 && hand_bad.is_empty(),
        format!(
            "LCS DP vs brute force: {lcs_bad} mismatches over {} pairs; hand examples failing: {}",
            seqs.len() * seqs.len(),
            if hand_bad.is_empty() { "none".to_string() } else { hand_bad.join(", ") }
        ),
    )
}

fn schedulers() -> Outcome {
    let mut bad = Vec::new();
    let peak = 2e-3;
    if noam_lr(40_000, peak, 40_000) != peak {
        bad.push("noam peak");
    }
    if noam_lr(20_000, peak, 40_000) != 0.5 * peak {
        bad.push("noam warmup branch");
    }
    if noam_lr(160_000, peak, 40_000) != 0.5 * peak {
        bad.push("noam decay branch");
    }
    if plateau_lr(&[0.1, 0.2, 0.3], 1e-4, 0.5, 0) != 1e-4 {
        bad.push("plateau improving");
    }
    if plateau_lr(&[0.5, 0.5, 0.5], 1e-4, 0.5, 0) != 1e-4 * 0.25 {
        bad.push("plateau trace");
    }
    // theta 1.0, gradients 0.5 then -0.2, lr 0.1, betas 0.9/0.98, eps 1e-9.
    let mut p = vec![Mat::from_vec(1, 1, vec![1.0])];
    let mut adam = Adam::new(&p, 0.0);
    adam.step(&mut p, &[Mat::from_vec(1, 1, vec![0.5])], &[0.1]);
    let after1 = 1.0 - 0.1 * 0.5 / (0.5 + 1e-9);
    let e1 = (p[0].get(0, 0) - after1).abs();
    adam.step(&mut p, &[Mat::from_vec(1, 1, vec![-0.2])], &[0.1]);
    let (m2, v2) = (0.025, 0.0057);
    let after2 = after1 - 0.1 * (m2 / 0.19) / ((v2 / 0.0396f64).sqrt() + 1e-9);
    let e2 = (p[0].get(0, 0) - after2).abs();
    if e1 > 1e-12 || e2 > 1e-12 {
        bad.push("adam trace");
    }
    let items = [100, 100, 150].map(|len| BatchItem { len, modality: ssum::corpus::Modality::Speech, real: true });
    let mut batches = make_batches(&items, BatchRule::MaxTotalLength, 250, 0);
    batches.sort();
    if batches != vec![vec![0, 1], vec![2]] {
        bad.push("packing");
    }
    outcome(
        bad.is_empty(),
        format!(
            "adam errors {e1:.1e}/{e2:.1e}; failing: {}",
            if bad.is_empty() { "none".to_string() } else { bad.join(", ") }
        ),
    )
}

fn metric_at(report: &ExperimentReport, system: &str, alpha: f64) -> Option<f64> {
    let rows = &report.leakage.as_ref()?.sweep;
    rows.iter().find(|r| r.system == system && r.alpha == alpha).and_then(|r| r.metric)
}

fn stage_one(report: &ExperimentReport, cfg: &ExperimentConfig, minutes: f64) -> Outcome {
    let corpus = generate_toy_corpus(&cfg.corpus.toy).unwrap();
    let vocab = corpus.vocabulary().len();
    let asr = report.system("asr").expect("asr system");
    let w = asr.scores.wer;
    outcome(
        corpus.train.len() >= 2000 && vocab <= 80 && w < 0.10 && minutes < 30.0,
        format!(
            "{} train utterances, {vocab} words, noise {}; eval WER {:.2}%; whole experiment {minutes:.1} min",
            corpus.train.len(),
            cfg.corpus.toy.noise_sigma,
            100.0 * w
        ),
    )
}

fn stages_two_three(report: &ExperimentReport) -> Outcome {
    let ssum = report.system("ssum").expect("ssum system");
    let aug = report.system("augmented").expect("augmented system");
    let a = ssum.scores.rouge_l.f1 > 0.85;
    let transferred: Vec<&String> = report
        .external_only_words
        .iter()
        .filter(|w| aug.oov_hits[*w] >= 1 && ssum.oov_emitted[*w] == 0)
        .collect();
    let b = !transferred.is_empty();
    let sub = |s: &ssum::pipeline::SystemReport| s.oov_subset.as_ref().map(|r| r.rouge_l.f1);
    let (s2, s3) = (sub(ssum), sub(aug));
    let c = matches!((s2, s3), (Some(x), Some(y)) if y >= x);
    let hits: BTreeMap<&String, (usize, usize)> = report
        .external_only_words
        .iter()
        .map(|w| (w, (ssum.oov_hits[w], aug.oov_hits[w])))
        .collect();
    outcome(
        a && b && c,
        format!(
            "(a) ssum ROUGE-L {:.4} {}; (b) held-out word hits ssum/augmented {:?} {}; (c) external-vocabulary subset ROUGE-L ssum {:.4} vs augmented {:.4} {}",
            ssum.scores.rouge_l.f1,
            if a { "ok" } else { "FAIL" },
            hits,
            if b { "ok" } else { "FAIL" },
            s2.unwrap_or(f64::NAN),
            s3.unwrap_or(f64::NAN),
            if c { "ok" } else { "FAIL" }
        ),
    )
}

fn leakage(report: &ExperimentReport, out: &Path) -> Outcome {
    let leak = report.leakage.as_ref().expect("leakage summary");
    let scores = LeakageScores::read_tsv(out.join("leakage_scores.tsv")).unwrap();
    let planted: Vec<&String> = leak.planted_dup_ids.iter().collect();
    let planted_high = planted
        .iter()
        .all(|id| scores.samples.iter().any(|s| &&s.id == id && s.score > 0.9));
    let at_09 = leak.counts.iter().find(|c| c.alpha == 0.9).expect("alpha 0.9 in grid");
    let mut removed = at_09.removed_ids.clone();
    removed.sort();
    let mut expected: Vec<String> = planted.iter().map(|s| s.to_string()).collect();
    expected.sort();
    let exact = removed == expected;
    let kept: Vec<usize> = leak.counts.iter().map(|c| c.kept).collect();
    let monotone = kept.windows(2).all(|w| w[0] <= w[1]);
    // The lowest threshold that still keeps samples.
    let lo = leak.counts.iter().find(|c| c.kept > 0).map_or(1.0, |c| c.alpha);
    let drop = |s: &str| -> Option<f64> { Some(metric_at(report, s, 1.0)? - metric_at(report, s, lo)?) };
    let (mem, ssum, aug) = (drop("retrieval"), drop("ssum"), drop("augmented"));
    let steeper = matches!((mem, ssum, aug), (Some(m), Some(s), Some(a)) if m > s && m > a);
    outcome(
        planted_high && exact && monotone && steeper,
        format!(
            "planted {} all > 0.9: {planted_high}; removed at 0.9 equals planted: {exact}; kept {:?}; ROUGE-L drop from alpha 1.0 to {lo}: retrieval {:.4}, ssum {:.4}, augmented {:.4}",
            planted.len(),
            kept,
            mem.unwrap_or(f64::NAN),
            ssum.unwrap_or(f64::NAN),
            aug.unwrap_or(f64::NAN)
        ),
    )
}

fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn determinism(cfg: &ExperimentConfig, first: &Path, second: &Path) -> Outcome {
    run_experiment(cfg, second, &mut std::io::sink()).unwrap();
    let (a, b) = (tree(first), tree(second));
    let differing: Vec<&String> = a
        .keys()
        .chain(b.keys())
        .filter(|k| a.get(*k) != b.get(*k))
        .collect();
    let count = |pred: &dyn Fn(&str) -> bool| a.keys().filter(|k| pred(k)).count();
    outcome(
        differing.is_empty(),
        format!(
            "{} files compared ({} manifests, {} decode files, {} reports); differing: {:?}",
            a.len(),
            count(&|k| k.ends_with(".jsonl")),
            count(&|k| k.starts_with("decodes")),
            count(&|k| k.ends_with("report.json") || k.ends_with("sweep.tsv") || k.ends_with("leakage_scores.tsv")),
            differing
        ),
    )
}

fn main() {
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut report_line = |n: usize, name: &'static str, o: Outcome| {
        println!("criterion {n} [{}] {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, name, o));
    };
    report_line(1, "gradient suite", gradients());
    report_line(2, "normalization, causality and masking", normalization_causality_masking());
    report_line(3, "beam oracle", beam_oracle());
    report_line(4, "metric oracles", metric_oracles());

    let cfg = ExperimentConfig::preset("toy").unwrap();
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("run1");
    let t = Instant::now();
    let report = run_experiment(&cfg, &first, &mut std::io::sink()).unwrap();
    let minutes = t.elapsed().as_secs_f64() / 60.0;
    report_line(5, "toy stage (i) ASR", stage_one(&report, &cfg, minutes));
    report_line(6, "toy stages (ii) and (iii)", stages_two_three(&report));
    report_line(7, "leakage analog", leakage(&report, &first));
    report_line(8, "determinism", determinism(&cfg, &first, &dir.path().join("run2")));
    report_line(9, "scheduler and optimizer", schedulers());

    let failed: Vec<usize> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    if failed.is_empty() {
        println!("all 9 criteria pass");
    } else {
        println!("failing criteria: {failed:?}");
        std::process::exit(1);
    }
}
