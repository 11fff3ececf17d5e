use super::*;
use crate::corpus::{generate_synthetic, SynthConfig};
use crate::model::{ModelConfig, ParamGroup, Params};
use crate::numerics::Tensor;
use crate::tokenizer::{build_vocab, CLS, PAD, SEP};

fn sched100() -> ScheduleConfig {
    ScheduleConfig::new(0.01, 100)
}

#[test]
fn stlr_tabulated_points() {
    let s = sched100();
    assert!((stlr(0, &s).unwrap() - 3.125e-4).abs() <= 1e-12);
    assert!((stlr(10, &s).unwrap() - 0.01).abs() <= 1e-12);
    assert!((stlr(55, &s).unwrap() - 5.15625e-3).abs() <= 1e-12);
    assert!((stlr(100, &s).unwrap() - 3.125e-4).abs() <= 1e-12);
    assert!(matches!(stlr(101, &s), Err(TrainError::StepOutOfRange { t: 101, total_steps: 100 })));
}

#[test]
fn stlr_shape() {
    let s = sched100();
    let lrs: Vec<f64> = (0..=100).map(|t| stlr(t, &s).unwrap()).collect();
    let peak = lrs.iter().cloned().fold(f64::MIN, f64::max);
    assert_eq!(peak, 0.01);
    assert_eq!(lrs[10], peak);
    assert!(lrs[..=10].windows(2).all(|w| w[0] < w[1]));
    assert!(lrs[10..].windows(2).all(|w| w[0] > w[1]));
    // piecewise linear: constant first differences on each side of the peak
    let up = lrs[1] - lrs[0];
    assert!(lrs[..=10].windows(2).all(|w| ((w[1] - w[0]) - up).abs() < 1e-15));
    let down = lrs[11] - lrs[10];
    assert!(lrs[10..].windows(2).all(|w| ((w[1] - w[0]) - down).abs() < 1e-15));
}

#[test]
fn stlr_rejects_degenerate_configs() {
    assert!(stlr(0, &ScheduleConfig::new(0.01, 5)).is_err()); // cut = 0
    assert!(stlr(0, &ScheduleConfig { ratio: 1.0, ..sched100() }).is_err());
    assert!(stlr(0, &ScheduleConfig { lr_max: 0.0, ..sched100() }).is_err());
    // fractional cut never drives the rate below the floor
    let s = ScheduleConfig::new(0.01, 15);
    for t in 0..=15 {
        assert!(stlr(t, &s).unwrap() >= 0.01 / 32.0);
    }
}

#[test]
fn discriminative_examples() {
    let lrs = discriminative_lrs(0.01, 2.6, 3);
    let expected = [0.01, 3.84615e-3, 1.47929e-3];
    for (a, b) in lrs.iter().zip(expected) {
        assert!((a - b).abs() <= 1e-8, "{a} vs {b}");
    }
    assert_eq!(discriminative_lrs(0.3, 1.0, 4), vec![0.3; 4]);
    assert_eq!(discriminative_lrs(0.3, 2.0, 1), vec![0.3]);
}

#[test]
fn frozen_group_examples() {
    assert_eq!(frozen_groups(0, 6), [1, 2, 3, 4, 5].into());
    assert_eq!(frozen_groups(2, 6), [3, 4, 5].into());
    assert!(frozen_groups(5, 6).is_empty());
    assert!(frozen_groups(9, 6).is_empty());
    assert!(frozen_groups(0, 1).is_empty());
}

#[test]
fn mask_tokens_rules() {
    let mut ids = vec![CLS];
    ids.extend(5..25);
    ids.push(SEP);
    let real = ids.len();
    ids.resize(30, PAD);
    let mut attention_mask = vec![1u8; real];
    attention_mask.resize(30, 0);
    let seq = TokenSequence { ids, attention_mask };

    let none = mask_tokens(&seq, 0.0, 50, 3);
    assert!(none.positions.is_empty());
    assert_eq!(none.ids, seq.ids);

    for seed in 0..50 {
        let m = mask_tokens(&seq, 1.0, 50, seed);
        assert_eq!(m.positions, (1..real - 1).collect::<Vec<_>>());
        assert_eq!(m.originals, (5..25).collect::<Vec<_>>());
        assert_eq!(&m.ids[real - 1..], &seq.ids[real - 1..]);
        assert_eq!(m.ids[0], CLS);
        assert!(m.ids.iter().all(|&i| i == MASK || i >= N_SPECIALS || seq.ids.contains(&i)));
        assert_eq!(m, mask_tokens(&seq, 1.0, 50, seed));
    }
}

#[test]
fn mask_rate_is_binomial() {
    let mut ids = vec![CLS];
    ids.extend((0..10_000).map(|i| 5 + i % 40));
    ids.push(SEP);
    let seq = TokenSequence { attention_mask: vec![1; ids.len()], ids };
    let m = mask_tokens(&seq, 0.15, 45, 1);
    let n = m.positions.len() as f64;
    let sigma = (10_000.0f64 * 0.15 * 0.85).sqrt();
    assert!((n - 1500.0).abs() <= 3.0 * sigma, "{n}");
    // of the selected: ~80% MASK, ~10% random, ~10% unchanged
    let masked = m.positions.iter().filter(|&&p| m.ids[p] == MASK).count() as f64;
    assert!((masked / n - 0.8).abs() < 0.05);
    let unchanged = m.positions.iter().zip(&m.originals).filter(|(&p, &o)| m.ids[p] == o).count() as f64;
    assert!(unchanged / n > 0.05 && unchanged / n < 0.16);
}

fn two_group_params() -> (Params, Vec<ParamGroup>) {
    let model = Model::init(ModelConfig::tiny(), 0).unwrap();
    let groups = model.groups();
    (model.params().clone(), groups)
}

fn filled_like(p: &Params, v: f64) -> Params {
    let mut g = p.zeros_like();
    for t in g.tensors_mut() {
        t.data_mut().iter_mut().for_each(|x| *x = v);
    }
    g
}

#[test]
fn adamw_zero_gradient_is_pure_decay() {
    let (mut params, groups) = two_group_params();
    let before = params.clone();
    let grads = params.zeros_like();
    let mut state = OptimizerState::new(&params, groups.len());
    let rates = vec![Some(0.1); groups.len()];
    adamw_step(&mut params, &grads, &mut state, &groups, &rates, 1e-2, &AdamConfig::default()).unwrap();
    for (a, b) in params.tensors().iter().zip(before.tensors()) {
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(*x, y * (1.0 - 1e-3));
        }
    }
    assert_eq!(state.t(), 1);
}

#[test]
fn adamw_first_step_has_magnitude_lr() {
    let (mut params, groups) = two_group_params();
    let before = params.clone();
    let grads = filled_like(&params, -0.37);
    let mut state = OptimizerState::new(&params, groups.len());
    let rates = vec![Some(0.05); groups.len()];
    adamw_step(&mut params, &grads, &mut state, &groups, &rates, 0.0, &AdamConfig::default()).unwrap();
    for (a, b) in params.tensors().iter().zip(before.tensors()) {
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y - 0.05).abs() < 1e-8);
        }
    }
}

#[test]
fn adamw_frozen_groups_are_untouched() {
    let (mut params, groups) = two_group_params();
    let grads = filled_like(&params, 0.5);
    let mut state = OptimizerState::new(&params, groups.len());
    let all = vec![Some(0.01); groups.len()];
    adamw_step(&mut params, &grads, &mut state, &groups, &all, 1e-2, &AdamConfig::default()).unwrap();

    let before_p = params.clone();
    let before_s = state.clone();
    let mut rates = all.clone();
    rates[1] = None;
    rates[3] = None;
    for _ in 0..3 {
        adamw_step(&mut params, &grads, &mut state, &groups, &rates, 1e-2, &AdamConfig::default()).unwrap();
    }
    let (p0, p1) = (before_p.tensors(), params.tensors());
    let (m0, m1) = (before_s.first_moment().tensors(), state.first_moment().tensors());
    let (v0, v1) = (before_s.second_moment().tensors(), state.second_moment().tensors());
    for (g, group) in groups.iter().enumerate() {
        for &i in &group.tensor_indices {
            if rates[g].is_none() {
                assert_eq!(p0[i], p1[i]);
                assert_eq!(m0[i], m1[i]);
                assert_eq!(v0[i], v1[i]);
            } else {
                assert_ne!(p0[i], p1[i]);
            }
        }
    }
    assert_eq!(state.t(), 4);
    assert_eq!(state.group_steps(), &[4, 1, 4, 1]);
}

#[test]
fn adamw_shape_checks() {
    let (mut params, groups) = two_group_params();
    let mut state = OptimizerState::new(&params, groups.len());
    let mut grads = params.clone();
    grads.head.bias = Tensor::zeros(&[5]);
    let rates = vec![Some(0.01); groups.len()];
    let adam = AdamConfig::default();
    assert!(matches!(
        adamw_step(&mut params, &grads, &mut state, &groups, &rates, 0.0, &adam),
        Err(TrainError::ShapeMismatch(_))
    ));
    let grads = params.zeros_like();
    assert!(matches!(
        adamw_step(&mut params, &grads, &mut state, &groups, &rates[..2], 0.0, &adam),
        Err(TrainError::ShapeMismatch(_))
    ));
}

#[test]
fn batches_cover_every_example_once() {
    let b = epoch_batches(37, 16, 5, 0);
    assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![16, 16, 5]);
    let mut all: Vec<usize> = b.concat();
    all.sort_unstable();
    assert_eq!(all, (0..37).collect::<Vec<_>>());
    assert_eq!(b, epoch_batches(37, 16, 5, 0));
    assert_ne!(b, epoch_batches(37, 16, 5, 1));
}

#[test]
fn step_rates_honor_toggles() {
    let s = sched100();
    let on = TrainConfig::default();
    let r = step_rates(10, 0, 4, &on, &s).unwrap();
    assert_eq!(r, vec![Some(0.01), None, None, None]);
    let r = step_rates(10, 1, 4, &on, &s).unwrap();
    assert_eq!(r[..2], [Some(0.01), Some(0.01 / 2.6)]);
    let off = TrainConfig::default().with_ulmfit(false);
    assert_eq!(step_rates(0, 0, 4, &off, &s).unwrap(), vec![Some(0.01); 4]);
}

#[test]
fn history_csv_format() {
    let h = TrainHistory {
        rows: vec![
            HistoryRow { epoch: 0, step: 0, lr: 0.5, loss: 2.0, val_weighted_f1: None },
            HistoryRow { epoch: 0, step: 1, lr: 0.25, loss: 1.0, val_weighted_f1: Some(0.75) },
            HistoryRow { epoch: 1, step: 2, lr: 0.125, loss: 0.5, val_weighted_f1: None },
        ],
    };
    assert_eq!(h.to_csv(), "epoch,step,lr,loss,val_weighted_f1\n0,0,0.5,2,\n0,1,0.25,1,0.75\n1,2,0.125,0.5,\n");
    assert_eq!(h.epoch_mean_losses(), vec![1.5, 0.5]);
}

struct Fixture {
    vocab_size: usize,
    train: Vec<EncodedTweet>,
    valid: Vec<EncodedTweet>,
}

fn fixture(max_len: usize) -> Fixture {
    let data = generate_synthetic(&SynthConfig { n_per_class: 40, ..SynthConfig::default() }, 0).unwrap();
    let norm = NormConfig::default();
    let texts: Vec<String> = data.tweets().iter().map(|t| tweet_text(t, Some(&norm))).collect();
    let vocab = build_vocab(&texts, 100, 2).unwrap();
    let encoded = encode_tweets(data.tweets(), &vocab, Some(&norm), max_len);
    let (train, valid) = encoded.split_at(90);
    Fixture { vocab_size: vocab.size(), train: train.to_vec(), valid: valid.to_vec() }
}

fn small_config(vocab_size: usize, max_len: usize) -> ModelConfig {
    ModelConfig { n_layers: 2, hidden: 16, n_heads: 2, ff_dim: 32, vocab_size, max_len, ..ModelConfig::default() }
}

#[test]
fn pretraining_is_deterministic_and_learns() {
    let f = fixture(24);
    let model = Model::init(small_config(f.vocab_size, 24), 0).unwrap();
    let cfg = TrainConfig { max_len: 24, max_steps: Some(60), ..TrainConfig::default() };
    let sched = ScheduleConfig::new(5e-3, 1);
    let (m1, h1) = pretrain_mlm(model.clone(), &f.train, &cfg, &sched).unwrap();
    let (m2, h2) = pretrain_mlm(model.clone(), &f.train, &cfg, &sched).unwrap();
    assert_eq!(h1, h2);
    assert_eq!(m1, m2);
    assert_eq!(h1.rows.last().unwrap().step, 59);
    let means = h1.epoch_mean_losses();
    assert!(means.last().unwrap() < &(0.9 * means[0]), "{means:?}");

    let c = m1.swap_head(HeadKind::Classifier, 0);
    assert!(matches!(pretrain_mlm(c, &f.train, &cfg, &sched), Err(TrainError::Model(ModelError::WrongHead { .. }))));
    assert!(matches!(pretrain_mlm(model, &[], &cfg, &sched), Err(TrainError::EmptyDataset)));
}

#[test]
fn finetune_epoch_zero_only_moves_the_head() {
    let f = fixture(24);
    let model = Model::init(small_config(f.vocab_size, 24), 0).unwrap().swap_head(HeadKind::Classifier, 1);
    let checksum = model.encoder_checksum();
    let cfg = TrainConfig { max_len: 24, batch_size: 4, max_steps: Some(10), ..TrainConfig::default() };
    let (tuned, outcome) = finetune(model.clone(), &f.train, &f.valid, &cfg, &ScheduleConfig::new(0.01, 1)).unwrap();
    assert_eq!(tuned.encoder_checksum(), checksum);
    assert_ne!(tuned.params().head, model.params().head);
    assert_eq!(outcome.reports.len(), 1);
    assert_eq!(outcome.history.rows.len(), 10);
    assert!(outcome.history.rows.iter().all(|r| r.epoch == 0));
}

#[test]
fn finetune_learns_and_reports_each_epoch() {
    let f = fixture(24);
    let model = Model::init(small_config(f.vocab_size, 24), 0).unwrap().swap_head(HeadKind::Classifier, 1);
    let cfg = TrainConfig { max_len: 24, epochs: 4, batch_size: 8, ..TrainConfig::default() }.with_ulmfit(false);
    let sched = ScheduleConfig::new(3e-3, 1);
    let (_, a) = finetune(model.clone(), &f.train, &f.valid, &cfg, &sched).unwrap();
    let (_, b) = finetune(model.clone(), &f.train, &f.valid, &cfg, &sched).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.reports.len(), 4);
    let logged: Vec<f64> = a.history.rows.iter().filter_map(|r| r.val_weighted_f1).collect();
    assert_eq!(logged, a.reports.iter().map(|r| r.weighted_f1).collect::<Vec<_>>());
    let losses = a.history.epoch_mean_losses();
    assert!(losses[3] < losses[0], "{losses:?}");
}

#[test]
fn finetune_rejects_bad_inputs() {
    let f = fixture(24);
    let model = Model::init(small_config(f.vocab_size, 24), 0).unwrap();
    let cfg = TrainConfig { max_len: 24, ..TrainConfig::default() };
    let sched = ScheduleConfig::new(0.01, 1);
    assert!(matches!(
        finetune(model.clone(), &f.train, &f.valid, &cfg, &sched),
        Err(TrainError::Model(ModelError::WrongHead { .. }))
    ));
    let c = model.swap_head(HeadKind::Classifier, 0);
    let mut unlabeled = f.train.clone();
    unlabeled[3].label = None;
    let uid = unlabeled[3].uid.clone();
    match finetune(c.clone(), &unlabeled, &f.valid, &cfg, &sched) {
        Err(TrainError::UnlabeledData { uid: u }) => assert_eq!(u, uid),
        other => panic!("{other:?}"),
    }
    let wrong_len = TrainConfig { max_len: 30, ..cfg };
    assert!(matches!(finetune(c, &f.train, &f.valid, &wrong_len, &sched), Err(TrainError::InvalidConfig(_))));
}
