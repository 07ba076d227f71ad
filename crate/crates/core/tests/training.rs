use pulsar::data::*;
use pulsar::network::ModelConfig;
use pulsar::risk::{RiskConfig, RiskMode};
use pulsar::streams::StreamKind;
use pulsar::training::*;
use pulsar::Error;

use proptest::prelude::*;

fn small_model(adaptive: bool) -> ModelConfig {
    ModelConfig { frames: 16, channels: vec![4, 8], temporal_kernel: 3, embed_channels: 2, dropout: 0.0, adaptive, ..ModelConfig::default() }
}

/// Clips of 16 frames from a small generated set, split into train and val.
fn toy_sets(n_per_class: usize, seed: u64) -> (ClipSet, ClipSet) {
    let cfg = SynthConfig { n_healthy: n_per_class, n_pd: n_per_class, contamination: 0.0, seed, ..SynthConfig::default() };
    let seqs = generate_synthetic(&cfg).unwrap();
    let (tr, va) = split_by_participant(&seqs, 0.2, seed).unwrap();
    let take = |s: &[KeypointSequence]| {
        let (clips, _) = prepare_clips(s, 16);
        // one window per recording keeps the set small
        let first: Vec<Clip> = clips.into_iter().filter(|c| c.clip_index == 0).collect();
        ClipSet::from_clips(&first, StreamKind::Joint).unwrap()
    };
    (take(&tr), take(&va))
}

fn pn_config() -> TrainConfig {
    TrainConfig {
        risk: RiskConfig { theta_p: 0.5, mode: RiskMode::Pn, ..RiskConfig::default() },
        precision: Precision::F64,
        ..TrainConfig::default()
    }
}

#[test]
fn plateau_halves_after_six_flat_epochs() {
    let cfg = PlateauConfig::default();
    let mut s = PlateauState::new(1e-4);
    let lrs: Vec<f64> = [0.6; 6].iter().map(|&a| plateau_step(&mut s, &cfg, a)).collect();
    assert_eq!(&lrs[..5], &[1e-4; 5]);
    assert_eq!(lrs[5], 5e-5);
}

#[test]
fn plateau_never_cuts_while_improving() {
    let cfg = PlateauConfig::default();
    let mut s = PlateauState::new(1e-3);
    for i in 0..40 {
        assert_eq!(plateau_step(&mut s, &cfg, i as f64 / 40.0), 1e-3);
    }
}

#[test]
fn plateau_improvement_resets_the_count() {
    let cfg = PlateauConfig::default();
    let mut s = PlateauState::new(1.0);
    for a in [0.5, 0.5, 0.5, 0.5, 0.5, 0.7] {
        plateau_step(&mut s, &cfg, a);
    }
    assert_eq!((s.lr, s.stale), (1.0, 0));
    for _ in 0..4 {
        plateau_step(&mut s, &cfg, 0.7);
    }
    assert_eq!(s.lr, 1.0);
    assert_eq!(plateau_step(&mut s, &cfg, 0.7), 0.5);
}

#[test]
fn plateau_config_validation() {
    assert!(PlateauConfig { factor: 1.0, patience: 5 }.validate().is_err());
    assert!(PlateauConfig { factor: 0.5, patience: 0 }.validate().is_err());
}

/// Independent restatement of the patience rule as a scan over the trace.
fn reference_lrs(trace: &[f64], lr0: f64, factor: f64, patience: usize) -> Vec<f64> {
    let mut out = Vec::new();
    let mut lr = lr0;
    let mut best = f64::NEG_INFINITY;
    let mut last_event = 0usize; // index after the last improvement or cut
    for (i, &a) in trace.iter().enumerate() {
        if a > best {
            best = a;
            last_event = i + 1;
        } else if i + 1 - last_event == patience {
            lr *= factor;
            last_event = i + 1;
        }
        out.push(lr);
    }
    out
}

proptest! {
    #[test]
    fn plateau_matches_reference(
        trace in proptest::collection::vec((0u8..6).prop_map(|k| k as f64 / 5.0), 1..60),
        patience in 1usize..7,
        factor in 0.1f64..0.9,
    ) {
        let cfg = PlateauConfig { factor, patience };
        let mut s = PlateauState::new(0.01);
        let got: Vec<f64> = trace.iter().map(|&a| plateau_step(&mut s, &cfg, a)).collect();
        prop_assert_eq!(got, reference_lrs(&trace, 0.01, factor, patience));
    }
}

#[test]
fn overfits_twenty_clips_with_pn_risk() {
    let (train, _) = toy_sets(13, 1);
    let idx: Vec<usize> = (0..20).collect();
    let train20 = ClipSet {
        x: train.gather(&idx),
        labeled_positive: train.labeled_positive[..20].to_vec(),
        truth: train.truth[..20].to_vec(),
        participants: train.participants[..20].to_vec(),
        ..train.clone()
    };
    // full-batch steps: 200 epochs of one batch is 200 steps
    // constant learning rate: this checks capacity, not the schedule
    let scheduler = PlateauConfig { factor: 0.5, patience: 1000 };
    let cfg = TrainConfig { batch_size: 20, lr: 1e-2, max_epochs: 200, scheduler, ..pn_config() };
    let model = ModelConfig { channels: vec![8, 16], ..small_model(false) };
    let ckpt = train_stream(&model, &train20, &train20, &cfg).unwrap();
    let last = ckpt.history.last().unwrap();
    assert_eq!(ckpt.history.iter().map(|r| r.steps).sum::<usize>(), 200);
    assert!(last.train_risk < 0.1, "final risk {}", last.train_risk);
}

#[test]
fn training_is_deterministic_to_the_byte() {
    let (train, val) = toy_sets(8, 2);
    let cfg = TrainConfig { batch_size: 5, max_epochs: 3, lr: 1e-3, ..pn_config() };
    let model = ModelConfig { dropout: 0.3, ..small_model(true) };
    let a = train_stream(&model, &train, &val, &cfg).unwrap().to_bytes().unwrap();
    let b = train_stream(&model, &train, &val, &cfg).unwrap().to_bytes().unwrap();
    assert_eq!(a, b);
}

#[test]
fn steps_per_epoch_and_best_epoch_bookkeeping() {
    let (train, val) = toy_sets(8, 3);
    let n = train.len();
    let cfg = TrainConfig { batch_size: 4, max_epochs: 4, lr: 1e-3, ..pn_config() };
    let ckpt = train_stream(&small_model(false), &train, &val, &cfg).unwrap();
    for r in &ckpt.history {
        assert_eq!(r.steps, n.div_ceil(4));
    }
    let max = ckpt.history.iter().map(|r| r.val_accuracy).fold(f64::MIN, f64::max);
    assert_eq!(ckpt.best_val_accuracy, max);
    assert_eq!(ckpt.history[ckpt.best_epoch - 1].val_accuracy, max);
    let mut log = Vec::new();
    write_log(&ckpt.history, &mut log).unwrap();
    assert_eq!(String::from_utf8(log).unwrap().lines().count(), 4);
}

#[test]
fn pu_training_runs_with_f32() {
    let (train, val) = toy_sets(8, 4);
    let cfg = TrainConfig {
        batch_size: 6,
        max_epochs: 2,
        precision: Precision::F32,
        risk: RiskConfig { theta_p: 0.3, mode: RiskMode::PuNonneg, ..RiskConfig::default() },
        ..TrainConfig::default()
    };
    let ckpt = train_stream(&small_model(true), &train, &val, &cfg).unwrap();
    assert_eq!(ckpt.dtype, "f32");
    assert!(ckpt.history.iter().all(|r| r.train_risk.is_finite()));
}

#[test]
fn training_preconditions() {
    let (train, val) = toy_sets(6, 5);
    let mut unlabeled = train.clone();
    unlabeled.labeled_positive.iter_mut().for_each(|p| *p = false);
    let pu = TrainConfig { risk: RiskConfig { mode: RiskMode::PuNonneg, ..RiskConfig::default() }, ..pn_config() };
    assert!(matches!(train_stream(&small_model(false), &unlabeled, &val, &pu), Err(Error::Config(_))));

    let bone = TrainConfig { stream: StreamKind::Bone, ..pn_config() };
    assert!(matches!(train_stream(&small_model(false), &train, &val, &bone), Err(Error::Config(_))));
    assert!(matches!(
        train_stream(&small_model(false), &train, &val, &TrainConfig { batch_size: 0, ..pn_config() }),
        Err(Error::Config(_))
    ));
}

fn trained_checkpoint() -> Checkpoint {
    let (train, val) = toy_sets(6, 6);
    let cfg = TrainConfig { batch_size: 4, max_epochs: 2, lr: 1e-3, ..pn_config() };
    train_stream(&small_model(true), &train, &val, &cfg).unwrap()
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let ckpt = trained_checkpoint();
    let dir = tempfile::tempdir().unwrap();
    let (p1, p2) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    save_checkpoint(&ckpt, &p1).unwrap();
    let loaded = load_checkpoint(&p1).unwrap();
    assert_eq!(loaded, ckpt);
    save_checkpoint(&loaded, &p2).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    assert!(std::fs::read(&p1).unwrap().starts_with(CHECKPOINT_MAGIC));
}

#[test]
fn corrupted_magic_names_the_tag() {
    let mut bytes = trained_checkpoint().to_bytes().unwrap();
    bytes[0] = b'X';
    let err = Checkpoint::from_bytes(&bytes).unwrap_err();
    assert!(err.to_string().contains("PULSARCK1"), "{err}");
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn truncated_checkpoint_is_rejected() {
    let bytes = trained_checkpoint().to_bytes().unwrap();
    for cut in [5, 12, 40, bytes.len() - 3] {
        assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Checkpoint(_))), "cut {cut}");
    }
}

#[test]
fn loading_under_another_model_config_fails_shape_validation() {
    let ckpt = trained_checkpoint();
    let err = ckpt.check_config(&ModelConfig { channels: vec![4, 16], ..ckpt.model.clone() }).unwrap_err();
    assert!(err.to_string().contains("shape validation"), "{err}");
    let err = ckpt.check_config(&small_model(false)).unwrap_err();
    assert!(err.to_string().contains("shape validation"), "{err}");
    ckpt.check_config(&ckpt.model).unwrap();
}

#[test]
fn loaded_network_reproduces_predictions() {
    let ckpt = trained_checkpoint();
    let (_, val) = toy_sets(6, 6);
    let net = ckpt.network::<f64>().unwrap();
    let again = Checkpoint::from_bytes(&ckpt.to_bytes().unwrap()).unwrap().network::<f64>().unwrap();
    let x = val.all::<f64>();
    assert_eq!(net.predict(&x, 8).unwrap(), again.predict(&x, 8).unwrap());
}
