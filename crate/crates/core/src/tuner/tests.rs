use super::*;
use crate::corpus::{collect, CollectOptions};
use crate::demo::{demo_corpus, demo_domain};
use crate::encoder::{EncoderSpec, TinyEncoder};

fn tiny() -> TinyEncoder {
    TinyEncoder::new(EncoderSpec::tiny(), 3).unwrap()
}

fn small_config() -> TuneConfig {
    TuneConfig {
        batch_size: 6,
        prefix_length: 4,
        learning_rate: 1e-2,
        rho: 1.0,
        seed: 11,
        ..TuneConfig::default()
    }
}

fn demo_data(enc: &TinyEncoder, config: &TuneConfig) -> (TrainingData, TrainingData) {
    let slices = collect(demo_corpus(6, 0.9, 2).iter(), &demo_domain(), CollectOptions::default()).unwrap();
    split_corpus(&slices, enc, config).unwrap()
}

#[test]
fn defaults_match_published_hyperparameters() {
    let c = TuneConfig::default();
    assert_eq!(c.lambda, 7.0 / 3.0);
    assert_eq!(c.rho, 15.0);
    assert_eq!(c.learning_rate, 5e-5);
    assert_eq!(c.batch_size, 32);
    assert_eq!(c.prefix_length, 40);
    assert_eq!(c.max_epochs, 10);
    assert_eq!(c.checkpoint_every_steps, 500);
    assert_eq!((c.beta1, c.beta2, c.epsilon), (0.9, 0.999, 1e-8));
    assert!(c.clip_norm.is_none());
    c.validate().unwrap();
}

#[test]
fn config_kv_roundtrip_and_validation() {
    let mut c = small_config();
    c.layer = LayerSelector::Layer(1);
    c.clip_norm = Some(2.5);
    c.max_steps = Some(9);
    let mut back = TuneConfig::default();
    for (k, v) in c.to_kv() {
        assert!(back.set(k, &v).unwrap(), "{k}");
    }
    assert_eq!(back, c);
    assert!(!back.set("unknown_key", "1").unwrap());
    assert!(back.set("lambda", "7/3").unwrap());
    assert_eq!(back.lambda, 7.0 / 3.0);
    assert!(back.set("rho", "wide").is_err());
    let zero_k = TuneConfig {
        prefix_length: 0,
        ..TuneConfig::default()
    };
    assert!(matches!(zero_k.validate(), Err(TuneError::InvalidConfig(m)) if m.contains("nothing to train")));
}

#[test]
fn batch_split_arithmetic() {
    assert_eq!(batch_counts(2, 32), (11, 10));
    assert_eq!(batch_counts(3, 32), (8, 8));
    assert_eq!(batch_counts(2, 6), (2, 2));
}

#[test]
fn batches_are_stratified_and_seeded() {
    let enc = tiny();
    let config = small_config();
    let (train, _) = demo_data(&enc, &config);
    let a = batch_for_step(&train, &config, 3).unwrap();
    let b = batch_for_step(&train, &config, 3).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 6);
    assert_ne!(a, batch_for_step(&train, &config, 4).unwrap());
    for i in 0..2 {
        let n = a
            .iter()
            .filter(|s| {
                s.roles
                    .iter()
                    .any(|r| matches!(r, WordRole::Attribute { attribute, .. } if *attribute == i))
            })
            .count();
        assert!(n >= 2);
    }
}

#[test]
fn single_attribute_rejected() {
    let data = TrainingData {
        neutral: vec![],
        attributes: vec![vec![]],
    };
    let mut rng = derived_rng(0, "x");
    assert!(matches!(
        assemble_batch(&data, 4, &mut rng),
        Err(TuneError::InvalidConfig(_))
    ));
}

#[test]
fn heldout_split_is_disjoint() {
    let enc = tiny();
    let config = small_config();
    let (train, heldout) = demo_data(&enc, &config);
    for (t, h) in train.attributes.iter().zip(&heldout.attributes) {
        assert!(!h.is_empty());
        assert!(h.iter().all(|s| !t.contains(s)));
    }
    let n = train.neutral.len() + heldout.neutral.len();
    assert_eq!(heldout.neutral.len(), (0.05 * n as f64).round() as usize);
}

fn sentence(enc: &TinyEncoder, text: &str, roles: &[(usize, usize, WordRole)]) -> PreparedSentence {
    let spans: Vec<(usize, usize)> = roles.iter().map(|&(a, b, _)| (a, b)).collect();
    let t = enc.tokenize_sentence(text, &spans).unwrap();
    PreparedSentence {
        text: text.into(),
        token_ids: t.token_ids,
        spans: t.word_spans,
        roles: roles.iter().map(|r| r.2).collect(),
    }
}

fn attr(i: usize) -> WordRole {
    WordRole::Attribute {
        attribute: i,
        concept: 0,
    }
}

#[test]
fn identical_prototypes_with_zero_lambda_are_stationary() {
    let enc = tiny();
    let config = TuneConfig {
        lambda: 0.0,
        ..small_config()
    };
    // the same text tagged once per attribute: identical prototypes
    let a0 = sentence(
        &enc,
        "the kid likes math",
        &[(4, 7, attr(0)), (14, 18, WordRole::Neutral(0))],
    );
    let a1 = sentence(
        &enc,
        "the kid likes math",
        &[(4, 7, attr(1)), (14, 18, WordRole::Neutral(0))],
    );
    let n = sentence(&enc, "art is fun", &[(0, 3, WordRole::Neutral(1))]);
    let batch = vec![&a0, &a1, &n];
    let mut trainer = Trainer::new(&enc, config.clone()).unwrap();
    let mut state = TrainState::init(&enc, &config);
    let before = state.prompt.clone();
    let report = trainer.train_step(&mut state, &batch, 2).unwrap();
    assert!(report.loss.bias.abs() < 1e-12);
    assert!(report.grad_norm < 1e-12, "grad norm {}", report.grad_norm);
    for (a, b) in before.per_layer_kv.iter().zip(state.prompt.per_layer_kv.iter()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn objective_gradient_matches_finite_differences() {
    let enc = tiny();
    let config = small_config();
    let (train, _) = demo_data(&enc, &config);
    let batch = batch_for_step(&train, &config, 1).unwrap();
    let prompt = PromptParameters::init(2, 4, 8, 5);
    let mut frozen = FrozenCache::new();
    let obj = batch_objective(&enc, &prompt, &batch, 2, &mut frozen, &config, true).unwrap();
    let grad = obj.grad.unwrap();
    let mut f = |p: &PromptParameters| {
        batch_objective(&enc, p, &batch, 2, &mut frozen, &config, false)
            .unwrap()
            .loss
            .total
    };
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    // a strided subset keeps the test fast
    for (i, (idx, &an)) in grad.indexed_iter().enumerate() {
        if i % 7 != 0 {
            continue;
        }
        let mut plus = prompt.clone();
        plus.per_layer_kv[idx] += h;
        let mut minus = prompt.clone();
        minus.per_layer_kv[idx] -= h;
        let num = (f(&plus) - f(&minus)) / (2.0 * h);
        worst = worst.max((an - num).abs() / an.abs().max(num.abs()).max(1e-7));
    }
    assert!(worst < 1e-4, "max relative error {worst}");
}

#[test]
fn steps_leave_base_untouched_and_log_exact_totals() {
    let enc = tiny();
    let config = small_config();
    let (train, _) = demo_data(&enc, &config);
    let checksum = enc.base_checksum();
    let mut trainer = Trainer::new(&enc, config.clone()).unwrap();
    let mut state = TrainState::init(&enc, &config);
    let start = state.prompt.clone();
    for _ in 0..3 {
        let batch = batch_for_step(&train, &config, state.step + 1).unwrap();
        let r = trainer.train_step(&mut state, &batch, 2).unwrap();
        assert_eq!(r.loss.total, r.loss.bias + config.lambda * r.loss.representation);
        assert_eq!(enc.base_checksum(), checksum);
    }
    assert_eq!(state.step, 3);
    assert_eq!(state.adam.t, 3);
    assert_ne!(state.prompt, start);
}

#[test]
fn non_finite_prompt_aborts() {
    let enc = tiny();
    let config = small_config();
    let (train, _) = demo_data(&enc, &config);
    let mut trainer = Trainer::new(&enc, config.clone()).unwrap();
    let mut state = TrainState::init(&enc, &config);
    state.prompt.per_layer_kv[[0, 0, 0, 0]] = f64::NAN;
    let batch = batch_for_step(&train, &config, 1).unwrap();
    assert!(matches!(
        trainer.train_step(&mut state, &batch, 2),
        Err(TuneError::NonFiniteLoss { step: 1, .. })
    ));
}

#[test]
fn zero_epochs_gives_initial_checkpoint_only() {
    let enc = tiny();
    let config = TuneConfig {
        max_epochs: 0,
        ..small_config()
    };
    let (train, heldout) = demo_data(&enc, &config);
    let dir = tempfile::tempdir().unwrap();
    let trail = tune_prepared(&train, &heldout, &enc, &config, dir.path(), None).unwrap();
    assert_eq!(trail.steps(), vec![0]);
    assert!(trail.entries[0].path.exists());
    assert_eq!(read_trail(&dir.path().join("trail.tsv")).unwrap(), trail);
}

#[test]
fn checkpoint_schedule_and_selection() {
    let enc = tiny();
    let config = TuneConfig {
        checkpoint_every_steps: 5,
        max_steps: Some(12),
        max_epochs: 100,
        ..small_config()
    };
    let (train, heldout) = demo_data(&enc, &config);
    let spe = steps_per_epoch(&train, config.batch_size);
    let smallest = train.attributes.iter().map(Vec::len).min().unwrap();
    assert_eq!(spe as usize, smallest.div_ceil(2));
    assert!(
        spe == 10 || spe > 12,
        "schedule below assumes epoch ends at 10 or after 12"
    );
    let dir = tempfile::tempdir().unwrap();
    let trail = tune_prepared(&train, &heldout, &enc, &config, dir.path(), None).unwrap();
    assert_eq!(trail.steps(), vec![0, 5, 10, 12]);
    let metrics = std::fs::read_to_string(dir.path().join("metrics.tsv")).unwrap();
    assert_eq!(metrics.lines().count(), 12);
    for (i, line) in metrics.lines().enumerate() {
        let f: Vec<f64> = line.split('\t').map(|x| x.parse().unwrap()).collect();
        assert_eq!(f.len(), 5);
        assert_eq!(f[0] as usize, i + 1);
        assert_eq!(f[3], f[1] + config.lambda * f[2]);
    }
    let initial = trail.entries[0].heldout.total;
    for e in &trail.entries {
        assert!(e.heldout.total.is_finite() && e.heldout.total <= 2.0 * initial);
    }
    assert_eq!(
        select_checkpoint_at(&trail, CheckpointPolicy::Early, 5).unwrap().step,
        5
    );
    assert_eq!(select_checkpoint(&trail, CheckpointPolicy::Final).unwrap().step, 12);
}

#[test]
fn resume_reproduces_metrics() {
    let enc = tiny();
    let config = TuneConfig {
        checkpoint_every_steps: 4,
        max_steps: Some(10),
        ..small_config()
    };
    let (train, heldout) = demo_data(&enc, &config);
    let full = tempfile::tempdir().unwrap();
    let trail = tune_prepared(&train, &heldout, &enc, &config, full.path(), None).unwrap();
    let full_metrics = std::fs::read_to_string(full.path().join("metrics.tsv")).unwrap();

    let part = tempfile::tempdir().unwrap();
    let short = TuneConfig {
        max_steps: Some(4),
        ..config.clone()
    };
    let first = tune_prepared(&train, &heldout, &enc, &short, part.path(), None).unwrap();
    let ckpt = first.entries.last().unwrap().path.clone();
    let resumed = tune_prepared(&train, &heldout, &enc, &config, part.path(), Some(&ckpt)).unwrap();
    let part_metrics = std::fs::read_to_string(part.path().join("metrics.tsv")).unwrap();
    assert_eq!(part_metrics, full_metrics);
    assert_eq!(resumed.steps(), trail.steps());
    let a = read_state(&trail.entries.last().unwrap().path).unwrap();
    let b = read_state(&resumed.entries.last().unwrap().path).unwrap();
    assert_eq!(a, b);
}

#[test]
fn selection_examples() {
    let entry = |step| TrailEntry {
        step,
        path: PathBuf::from(format!("{step}")),
        heldout: total_loss(0.0, 0.0, 1.0).unwrap(),
    };
    let trail = CheckpointTrail {
        entries: vec![entry(500), entry(1000), entry(1200)],
    };
    assert_eq!(select_checkpoint(&trail, CheckpointPolicy::Early).unwrap().step, 500);
    assert_eq!(select_checkpoint(&trail, CheckpointPolicy::Final).unwrap().step, 1200);
    let single = CheckpointTrail {
        entries: vec![entry(7)],
    };
    assert_eq!(select_checkpoint(&single, CheckpointPolicy::Early).unwrap().step, 7);
    assert_eq!(select_checkpoint(&single, CheckpointPolicy::Final).unwrap().step, 7);
    assert!(matches!(
        select_checkpoint(&CheckpointTrail::default(), CheckpointPolicy::Final),
        Err(TuneError::EmptyTrail)
    ));
}

use std::path::PathBuf;

/// Desk-scale setup with separated attribute prototypes; returns the
/// fixed-batch losses before training and after `steps` steps.
fn fixed_batch_run(config: TuneConfig, steps: u64) -> (LossBreakdown, LossBreakdown) {
    let spec = EncoderSpec {
        hidden_size: 16,
        ..EncoderSpec::tiny()
    };
    let enc = TinyEncoder::new(spec, 1).unwrap();
    let slices = collect(
        demo_corpus(30, 0.9, 2).iter(),
        &demo_domain(),
        CollectOptions::default(),
    )
    .unwrap();
    let (train, _) = split_corpus(&slices, &enc, &config).unwrap();
    let fixed: Vec<_> = (0..4)
        .map(|i| batch_for_step(&train, &config, 100_000 + i).unwrap())
        .collect();
    let mut trainer = Trainer::new(&enc, config.clone()).unwrap();
    let mut state = TrainState::init(&enc, &config);
    let first = trainer.evaluate(&state.prompt, &fixed, 2).unwrap();
    for step in 1..=steps {
        let batch = batch_for_step(&train, &config, step).unwrap();
        trainer.train_step(&mut state, &batch, 2).unwrap();
    }
    (first, trainer.evaluate(&state.prompt, &fixed, 2).unwrap())
}

fn desk_config() -> TuneConfig {
    TuneConfig {
        learning_rate: 3e-2,
        rho: 1.0,
        prefix_length: 8,
        seed: 4,
        ..TuneConfig::default()
    }
}

#[test]
fn bias_decreases_within_fifty_steps() {
    let (first, last) = fixed_batch_run(desk_config(), 50);
    assert!(last.bias < first.bias, "{} -> {}", first.bias, last.bias);
}

#[test]
fn huge_lambda_preserves_representation() {
    let config = TuneConfig {
        lambda: 1e6,
        learning_rate: 1e-2,
        ..desk_config()
    };
    let (first, last) = fixed_batch_run(config, 150);
    assert!(
        last.representation <= first.representation,
        "{} -> {}",
        first.representation,
        last.representation
    );
}
