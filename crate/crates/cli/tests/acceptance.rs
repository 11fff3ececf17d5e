//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the process exits non-zero if any fails.

use std::collections::HashSet;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sentimix::corpus::{generate_synthetic, parse_conllu, serialize_conllu, CorpusError, LangTag, Sentiment, SynthConfig, Token, Tweet};
use sentimix::eval::weighted_f1;
use sentimix::model::{
    checkpoint_bytes, load_checkpoint, model_from_bytes, save_checkpoint, Example, HeadKind, Model, ModelConfig, ModelError,
    Trainable,
};
use sentimix::numerics::grad_check;
use sentimix::textnorm::{normalize, NormConfig};
use sentimix::tokenizer::{build_vocab, TokenSequence, CLS, PAD, SEP};
use sentimix::train::{
    self, discriminative_lrs, encode_tweets, frozen_groups, mask_tokens, stlr, tweet_text, EncodedTweet, ScheduleConfig,
    TrainConfig,
};
use sentimix_cli::{cmd_ablate, cmd_finetune, cmd_pretrain, cmd_synth, RunConfig, ABLATION_ROWS};

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn perturbed(model: &Model, seed: u64) -> Model {
    let mut m = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::new(0.0, 0.3).unwrap();
    for t in m.params_mut().tensors_mut() {
        for v in t.data_mut() {
            *v += dist.sample(&mut rng);
        }
    }
    m
}

fn random_sequence(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> TokenSequence {
    let len = rng.gen_range(1..=cfg.max_len - 2);
    let mut ids = vec![CLS];
    ids.extend((0..len).map(|_| rng.gen_range(5..cfg.vocab_size)));
    ids.push(SEP);
    let real = ids.len();
    ids.resize(cfg.max_len, PAD);
    let mut attention_mask = vec![1u8; real];
    attention_mask.resize(cfg.max_len, 0);
    TokenSequence { ids, attention_mask }
}

fn grad_fidelity() -> Outcome {
    let start = Instant::now();
    let cfg = ModelConfig::tiny();
    let mut worst: f64 = 0.0;
    for kind in [HeadKind::Mlm, HeadKind::Classifier] {
        let model = perturbed(&Model::init(cfg.clone(), 0).unwrap().swap_head(kind, 1), 42);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let batch: Vec<TokenSequence> = (0..2).map(|_| random_sequence(&mut rng, &cfg)).collect();
        let targets: Vec<Vec<(usize, usize)>> =
            batch.iter().map(|s| vec![(1, s.ids[1]), (s.real_len() - 1, 9)]).collect();
        let examples: Vec<Example> = batch
            .iter()
            .enumerate()
            .map(|(i, s)| match kind {
                HeadKind::Mlm => Example::Mlm { ids: s.real_ids(), targets: &targets[i] },
                HeadKind::Classifier => Example::Classify { ids: s.real_ids(), label: i % 3 },
            })
            .collect();
        let x = model.params().flatten();
        let f = |v: &[f64]| {
            let mut m = model.clone();
            m.params_mut().assign_flat(v).unwrap();
            let (loss, g) = m.loss_and_grad(&examples, None, Trainable::all()).unwrap();
            Ok((loss, g.flatten()))
        };
        let report = grad_check(f, &x, 1e-4).map_err(|e| e.to_string())?;
        if report.n_checked != x.len() {
            return Err(format!("checked {} of {} parameters", report.n_checked, x.len()));
        }
        worst = worst.max(report.max_rel_error);
    }
    let elapsed = start.elapsed();
    check(worst <= 1e-4 && elapsed < Duration::from_secs(60), format!("max rel err {worst:.2e}, {elapsed:.1?}"))
}

fn stlr_points() -> Outcome {
    let cfg = ScheduleConfig { lr_max: 0.01, cut_frac: 0.1, ratio: 32.0, discr_factor: 2.6, total_steps: 100 };
    let mut worst: f64 = 0.0;
    for (t, want) in [(0, 3.125e-4), (10, 0.01), (55, 5.15625e-3)] {
        let got = stlr(t, &cfg).map_err(|e| e.to_string())?;
        worst = worst.max((got - want).abs());
    }
    check(worst <= 1e-12, format!("max abs err {worst:.1e}"))
}

fn discriminative() -> Outcome {
    let lrs = discriminative_lrs(0.01, 2.6, 3);
    let example_err =
        lrs.iter().zip([0.01, 3.84615e-3, 1.47929e-3]).map(|(g, w)| (g - w).abs()).fold(0.0_f64, f64::max);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..1000 {
        let lr = rng.gen_range(1e-6..1.0);
        let factor = rng.gen_range(1.01..10.0);
        let n = rng.gen_range(1..20);
        let lrs = discriminative_lrs(lr, factor, n);
        let geometric = lrs.len() == n
            && lrs[0] == lr
            && (1..n).all(|k| (lrs[k - 1] / lrs[k] - factor).abs() <= 1e-9 * factor);
        if !geometric {
            return Err(format!("not geometric for lr {lr}, factor {factor}, n {n}"));
        }
    }
    check(example_err <= 1e-8, format!("example err {example_err:.1e}, 1000 random configs geometric"))
}

fn small_corpus(n_per_class: usize, seed: u64) -> (Vec<Tweet>, sentimix::tokenizer::Vocabulary) {
    let data = generate_synthetic(&SynthConfig { n_per_class, ..SynthConfig::default() }, seed).unwrap();
    let norm = NormConfig::default();
    let texts: Vec<String> = data.tweets().iter().map(|t| tweet_text(t, Some(&norm))).collect();
    let vocab = build_vocab(&texts, 1000, 2).unwrap();
    (data.into_tweets(), vocab)
}

fn unfreezing() -> Outcome {
    let (tweets, vocab) = small_corpus(60, 5);
    let mcfg = ModelConfig { vocab_size: vocab.size(), max_len: 24, ..ModelConfig::tiny() };
    let model = Model::init(mcfg.clone(), 0).unwrap().swap_head(HeadKind::Classifier, 1);
    let data = encode_tweets(&tweets, &vocab, Some(&NormConfig::default()), mcfg.max_len);
    let cfg = TrainConfig { epochs: 1, max_len: mcfg.max_len, ..TrainConfig::default() };
    let sched = ScheduleConfig::new(1e-2, 1);
    let (after, _) = train::finetune(model.clone(), &data, &data, &cfg, &sched).map_err(|e| e.to_string())?;
    let head: HashSet<usize> = model.groups()[0].tensor_indices.iter().copied().collect();
    let before_t = model.params().tensors();
    let after_t = after.params().tensors();
    let bits = |t: &sentimix::numerics::Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<u64>>();
    let frozen_identical = (0..before_t.len()).filter(|i| !head.contains(i)).all(|i| bits(before_t[i]) == bits(after_t[i]));
    let head_moved = head.iter().any(|&i| bits(before_t[i]) != bits(after_t[i]));

    let mut monotone = true;
    for n in 1..=20 {
        for epoch in 0..=20 {
            let now = frozen_groups(epoch, n);
            let next = frozen_groups(epoch + 1, n);
            monotone &= next.is_subset(&now) && !now.contains(&0) && now.len() - next.len() == usize::from(!now.is_empty());
        }
    }
    check(
        frozen_identical && head_moved && monotone,
        format!("non-head bit-identical: {frozen_identical}, head moved: {head_moved}, monotone: {monotone}"),
    )
}

fn brute_force_f1(y_true: &[Sentiment], y_pred: &[Sentiment]) -> f64 {
    let n = y_true.len() as f64;
    Sentiment::ALL
        .iter()
        .map(|&c| {
            let pairs = y_true.iter().zip(y_pred);
            let tp = pairs.clone().filter(|(t, p)| **t == c && **p == c).count() as f64;
            let fp = pairs.clone().filter(|(t, p)| **t != c && **p == c).count() as f64;
            let fn_ = pairs.filter(|(t, p)| **t == c && **p != c).count() as f64;
            let p = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
            let r = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
            let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
            (tp + fn_) / n * f
        })
        .sum()
}

fn metric() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.gen_range(1..60);
        let y_true: Vec<Sentiment> = (0..n).map(|_| Sentiment::ALL[rng.gen_range(0..3)]).collect();
        let y_pred: Vec<Sentiment> = (0..n).map(|_| Sentiment::ALL[rng.gen_range(0..3)]).collect();
        let got = weighted_f1(&y_true, &y_pred).map_err(|e| e.to_string())?;
        worst = worst.max((got - brute_force_f1(&y_true, &y_pred)).abs());
    }
    use Sentiment::{Negative as Neg, Positive as Pos};
    let example = weighted_f1(&[Pos, Pos, Neg], &[Pos, Neg, Neg]).map_err(|e| e.to_string())?;
    check(
        worst <= 1e-12 && (example - 2.0 / 3.0).abs() <= 1e-9,
        format!("max err vs brute force {worst:.1e}, example {example:.5}"),
    )
}

fn normalization() -> Outcome {
    let cfg = NormConfig::default();
    let golden = normalize("Qué GRANDEEE @juan #wow", &cfg) == "que grande"
        && normalize("Hoy estoy feliiiizzz", &cfg) == "hoy estoy feliz";
    const PIECES: &[&str] =
        &["a", "o", "Q", "á", "É", "ñ", "ü", "e\u{301}", "@", "#", "@user", "#Tag", " ", "\t", "\n", "!", "😀", "jaja", "sííí"];
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut failures = 0;
    for _ in 0..10_000 {
        let mut s = String::new();
        for _ in 0..rng.gen_range(0..25) {
            let piece = PIECES.choose(&mut rng).unwrap();
            for _ in 0..if rng.gen_bool(0.2) { rng.gen_range(2..6) } else { 1 } {
                s.push_str(piece);
            }
        }
        let once = normalize(&s, &cfg);
        failures += usize::from(normalize(&once, &cfg) != once);
    }
    check(golden && failures == 0, format!("golden cases: {golden}, idempotence failures: {failures}/10000"))
}

fn random_dataset(rng: &mut ChaCha8Rng) -> Vec<Tweet> {
    const CHARS: &[char] = &['a', 'z', 'Ñ', 'é', ' ', '#', '@', '😀', '1', ':', 'м', '\u{301}'];
    const TAGS: &[&str] = &["en", "spa", "hi", "mixed", "univ", "ne", "other", "fw"];
    let n = rng.gen_range(0..15);
    (0..n)
        .map(|i| {
            let tokens = (0..rng.gen_range(1..10))
                .map(|_| {
                    let surface: String = (0..rng.gen_range(1..8)).map(|_| *CHARS.choose(rng).unwrap()).collect();
                    Token::new(surface, LangTag::parse(TAGS.choose(rng).unwrap()))
                })
                .collect();
            let label = [None, Some(Sentiment::Positive), Some(Sentiment::Negative), Some(Sentiment::Neutral)]
                [rng.gen_range(0..4)];
            Tweet { uid: format!("{}{i}", rng.gen_range(0..1000)), tokens, label }
        })
        .collect()
}

fn corpus_roundtrip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for k in 0..1000 {
        let mut tweets = random_dataset(&mut rng);
        let mut seen = HashSet::new();
        tweets.retain(|t| seen.insert(t.uid.clone()));
        let back = parse_conllu(&serialize_conllu(&tweets)).map_err(|e| format!("dataset {k}: {e}"))?;
        if back != tweets {
            return Err(format!("dataset {k} did not round-trip"));
        }
    }
    let text = "meta\t1\tpositive\nhola\tspa\nbad line\n\nmeta\t2\tjoyful\nhi\ten\n";
    let token_err = parse_conllu(text);
    let text = "meta\t1\nhola\tspa\n\nmeta\t2\tjoyful\nhi\ten\n";
    let label_err = parse_conllu(text);
    let lines_ok = token_err == Err(CorpusError::MalformedTokenLine { line: 3 })
        && label_err == Err(CorpusError::UnknownSentiment { line: 4, value: "joyful".into() });
    check(lines_ok, format!("1000 datasets round-trip, error lines correct: {lines_ok}"))
}

fn fixed_mask_loss(model: &Model, data: &[EncodedTweet]) -> f64 {
    let v = model.config().vocab_size;
    let masked: Vec<_> = data.iter().enumerate().map(|(i, e)| mask_tokens(&e.seq, 0.15, v, 1000 + i as u64)).collect();
    let targets: Vec<_> = masked.iter().map(|m| m.targets()).collect();
    let examples: Vec<Example> = masked
        .iter()
        .zip(&targets)
        .zip(data)
        .filter(|((_, t), _)| !t.is_empty())
        .map(|((m, t), e)| Example::Mlm { ids: &m.ids[..e.seq.real_len()], targets: t })
        .collect();
    model.loss(&examples, None).unwrap()
}

fn mlm_signal() -> Outcome {
    let (tweets, vocab) = small_corpus(667, 0);
    let mcfg = ModelConfig { vocab_size: vocab.size(), ..ModelConfig::tiny() };
    let data = encode_tweets(&tweets, &vocab, Some(&NormConfig::default()), mcfg.max_len);
    let model = Model::init(mcfg.clone(), 0).map_err(|e| e.to_string())?;
    let ln_v = (vocab.size() as f64).ln();
    let untrained = fixed_mask_loss(&model, &data);
    let steps: usize = 200;
    let cfg = TrainConfig {
        max_len: mcfg.max_len,
        epochs: steps.div_ceil(data.len().div_ceil(16)),
        max_steps: Some(steps),
        ..TrainConfig::default()
    };
    let (trained, _) =
        train::pretrain_mlm(model, &data, &cfg, &ScheduleConfig::new(1e-2, steps)).map_err(|e| e.to_string())?;
    let fin = fixed_mask_loss(&trained, &data);
    check(
        fin < 0.8 * ln_v && (untrained - ln_v).abs() <= 0.15 * ln_v,
        format!("V={} ln V={ln_v:.3}, untrained {untrained:.3}, after {steps} steps {fin:.3}", vocab.size()),
    )
}

fn run_pipeline(dir: &Path) -> Result<(f64, Duration, Vec<u8>), String> {
    let start = Instant::now();
    let cfg = RunConfig {
        out: dir.to_path_buf(),
        train: dir.join("train.conllu"),
        valid: dir.join("valid.conllu"),
        test: dir.join("valid.conllu"),
        ..RunConfig::default()
    };
    cmd_synth(&cfg).map_err(|e| e.to_string())?;
    cmd_pretrain(&cfg).map_err(|e| e.to_string())?;
    let outcome = cmd_finetune(&cfg, false).map_err(|e| e.to_string())?;
    let f1 = outcome.reports.last().map_or(0.0, |r| r.weighted_f1);
    let elapsed = start.elapsed();
    let ckpt = std::fs::read(cfg.finetuned_path()).map_err(|e| e.to_string())?;
    Ok((f1, elapsed, ckpt))
}

fn end_to_end(a: &Path, b: &Path) -> Outcome {
    let (f1, elapsed, first) = run_pipeline(a)?;
    let (f1_again, _, second) = run_pipeline(b)?;
    let reproducible = first == second && f1.to_bits() == f1_again.to_bits();
    check(
        f1 >= 0.90 && elapsed < Duration::from_secs(600) && reproducible,
        format!("weighted-F1 {f1:.4} in {elapsed:.1?}, bit-reproducible: {reproducible}"),
    )
}

fn ablation(data_dir: &Path, out: &Path) -> Outcome {
    let cfg = RunConfig {
        out: out.to_path_buf(),
        train: data_dir.join("train.conllu"),
        valid: data_dir.join("valid.conllu"),
        seeds: vec![0, 1, 2],
        ..RunConfig::default()
    };
    let rows = cmd_ablate(&cfg).map_err(|e| e.to_string())?;
    let labels_ok = rows.iter().map(|r| r.configuration).eq(ABLATION_ROWS);
    let m: Vec<f64> = rows.iter().map(|r| r.mean()).collect();
    check(
        labels_ok && m[0] <= m[1] && m[1] <= m[2] && m[2] - m[0] >= 0.02,
        format!("means base {:.4}, +pre {:.4}, +pre+ulmfit {:.4}", m[0], m[1], m[2]),
    )
}

fn checkpoints(dir: &Path) -> Outcome {
    let model = perturbed(&Model::init(ModelConfig::tiny(), 0).unwrap(), 3).swap_head(HeadKind::Classifier, 1);
    let path = dir.join("model.ckpt");
    save_checkpoint(&model, &path).map_err(|e| e.to_string())?;
    let back = load_checkpoint(&path).map_err(|e| e.to_string())?;
    let exact = back.params().tensors().iter().zip(model.params().tensors()).all(|(a, b)| {
        a.data().iter().map(|v| v.to_bits()).eq(b.data().iter().map(|v| v.to_bits()))
    }) && back.config() == model.config()
        && back.head_kind() == model.head_kind();

    let bytes = checkpoint_bytes(&model);
    let mut rejected = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..100 {
        let mut bad = bytes.clone();
        let i = rng.gen_range(8..bad.len());
        bad[i] ^= 1 << rng.gen_range(0..8);
        rejected += usize::from(matches!(model_from_bytes(&bad), Err(ModelError::ChecksumMismatch)));
    }
    let truncated = matches!(model_from_bytes(&bytes[..bytes.len() - 1]), Err(ModelError::ChecksumMismatch));
    check(exact && rejected == 100 && truncated, format!("bit-exact: {exact}, corrupted rejected: {rejected}/100, truncated rejected: {truncated}"))
}

fn main() {
    let tmp = tempfile::tempdir().expect("temp dir");
    let (e2e_a, e2e_b) = (tmp.path().join("e2e_a"), tmp.path().join("e2e_b"));
    let criteria: Vec<(&str, Box<dyn FnOnce() -> Outcome>)> = vec![
        ("1 gradient fidelity", Box::new(grad_fidelity)),
        ("2 slanted triangular schedule", Box::new(stlr_points)),
        ("3 discriminative rates", Box::new(discriminative)),
        ("4 gradual unfreezing", Box::new(unfreezing)),
        ("5 weighted-F1", Box::new(metric)),
        ("6 normalization", Box::new(normalization)),
        ("7 corpus round trip", Box::new(corpus_roundtrip)),
        ("8 masked-LM learning signal", Box::new(mlm_signal)),
        ("9 end to end", Box::new(|| end_to_end(&e2e_a, &e2e_b))),
        ("10 ablation ordering", Box::new(|| ablation(&tmp.path().join("e2e_a"), &tmp.path().join("ablation")))),
        ("11 checkpoint integrity", Box::new(|| checkpoints(tmp.path()))),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        let start = Instant::now();
        match run() {
            Ok(detail) => println!("PASS criterion {name}: {detail} [{:.1?}]", start.elapsed()),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {name}: {detail} [{:.1?}]", start.elapsed());
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", 11 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
