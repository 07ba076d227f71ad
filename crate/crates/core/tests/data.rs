use pulsar::data::*;
use pulsar::graph::{Handedness, INDEX_TIP, THUMB_TIP};
use pulsar::Error;

use proptest::prelude::*;

fn frame(x: f64, y: f64, conf: f64) -> Option<Vec<Landmark>> {
    Some(vec![[x, y, conf]; 21])
}

fn seq(id: &str, label: Label, frames: Vec<Option<Vec<Landmark>>>) -> KeypointSequence {
    KeypointSequence {
        participant_id: id.into(),
        hand: Handedness::Right,
        label,
        true_label: None,
        fps: 30.0,
        frames,
    }
}

/// Frames whose x encodes their original index, so order can be checked.
fn indexed(n: usize) -> KeypointSequence {
    seq("a", Label::Positive, (0..n).map(|i| frame(i as f64 / 1000.0, 0.5, 0.9)).collect())
}

#[test]
fn empty_file_parses_to_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.jsonl");
    std::fs::write(&path, "").unwrap();
    assert!(parse_keypoint_file(&path).unwrap().is_empty());
}

#[test]
fn short_landmark_frame_is_rejected_with_its_index() {
    let mut s = indexed(3);
    s.frames[2] = Some(vec![[0.5, 0.5, 0.9]; 20]);
    let text = to_jsonl(&[indexed(1), s]).unwrap();
    let err = parse_keypoints(&text, "mem.jsonl").unwrap_err();
    match &err {
        Error::Parse { line, msg, .. } => {
            assert_eq!(*line, 2);
            assert!(msg.contains("frame 2"), "{msg}");
            assert!(msg.contains("20"), "{msg}");
        }
        other => panic!("unexpected {other:?}"),
    }
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn malformed_and_out_of_range_lines_are_rejected() {
    let err = parse_keypoints("{\"participant_id\": 3}\n", "x").unwrap_err();
    assert!(matches!(err, Error::Parse { line: 1, .. }));
    let mut s = indexed(2);
    s.frames[1] = frame(1.2, 0.5, 0.9);
    let err = parse_keypoints(&to_jsonl(&[s]).unwrap(), "x").unwrap_err();
    assert!(err.to_string().contains("outside [0, 1]"), "{err}");
}

#[test]
fn generated_dataset_round_trips_through_a_file() {
    let cfg = SynthConfig { n_healthy: 6, n_pd: 6, seed: 3, ..SynthConfig::default() };
    let seqs = generate_synthetic(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("synth.jsonl");
    write_keypoint_file(&path, &seqs).unwrap();
    assert_eq!(parse_keypoint_file(&path).unwrap(), seqs);
}

#[test]
fn null_frames_survive_parsing_as_markers() {
    let text = r#"{"participant_id":"q","hand":"left","label":"unlabeled","fps":25,"frames":[null]}"#;
    let got = parse_keypoints(text, "x").unwrap();
    assert_eq!(got[0].frames, vec![None]);
    assert_eq!(got[0].true_label, None);
    assert_eq!(got[0].hand, Handedness::Left);
}

#[test]
fn cleaning_drops_invalid_frames_in_order() {
    let mut s = indexed(100);
    for i in (0..100).step_by(10) {
        s.frames[i] = None;
    }
    let (clean, report) = clean_sequence(&s);
    assert_eq!(clean.frames.len(), 90);
    assert_eq!(report.invalid_dropped, 10);
    let xs: Vec<f64> = clean.frames.iter().map(|f| f.as_ref().unwrap()[0][0]).collect();
    assert!(xs.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn cleaning_drops_low_confidence_frames() {
    let mut s = indexed(4);
    s.frames[1] = frame(0.5, 0.5, 0.49);
    s.frames[2] = frame(0.5, 0.5, 0.5);
    let (clean, report) = clean_sequence(&s);
    assert_eq!(clean.frames.len(), 3);
    assert_eq!(report.low_confidence_dropped, 1);
}

#[test]
fn cleaning_all_valid_is_identity() {
    let s = indexed(37);
    let (clean, report) = clean_sequence(&s);
    assert_eq!(clean, s);
    assert!(!report.empty);
}

#[test]
fn cleaning_all_invalid_is_empty_and_flagged() {
    let s = seq("z", Label::Unlabeled, vec![None; 12]);
    let (clean, report) = clean_sequence(&s);
    assert!(clean.frames.is_empty());
    assert!(report.empty);
}

#[test]
fn segmentation_counts() {
    assert_eq!(segment_clips(&indexed(200), CLIP_FRAMES).len(), 2);
    assert!(segment_clips(&indexed(79), CLIP_FRAMES).is_empty());
    let (_, report) = prepare_clips(&[indexed(79)], CLIP_FRAMES);
    assert_eq!(report.sequences_skipped, vec![("a".to_string(), 79)]);
}

#[test]
fn segmentation_windows_are_disjoint() {
    let clips = segment_clips(&indexed(160), CLIP_FRAMES);
    assert_eq!(clips.len(), 2);
    for (k, c) in clips.iter().enumerate() {
        assert_eq!(c.data.shape(), &[2, 80, 21]);
        assert_eq!(c.start_frame, 80 * k);
        for t in 0..80 {
            let x = c.data.data()[t * 21];
            assert!((x - (80 * k + t) as f64 / 1000.0).abs() < 1e-12);
        }
    }
}

#[test]
fn left_hands_are_mirrored_at_segmentation() {
    let mut s = indexed(80);
    s.hand = Handedness::Left;
    let c = &segment_clips(&s, 80)[0];
    assert!((c.data.data()[21] - (1.0 - 0.001)).abs() < 1e-12);
}

fn one_point_clip(x: f64, y: f64) -> Clip {
    let s = seq("p", Label::Positive, vec![frame(x, y, 0.9); 80]);
    segment_clips(&s, 80).remove(0)
}

#[test]
fn hv_flip_maps_point() {
    let c = flip_clip(&one_point_clip(0.3, 0.8), Augmentation::Hv);
    let half = c.data.len() / 2;
    assert!((c.data.data()[0] - 0.7).abs() < 1e-12);
    assert!((c.data.data()[half] - 0.2).abs() < 1e-12);
    assert_eq!(c.augmentation, Augmentation::Hv);
}

#[test]
fn horizontal_flip_is_an_involution() {
    let c = one_point_clip(0.3, 0.8);
    let twice = flip_clip(&flip_clip(&c, Augmentation::H), Augmentation::Id);
    let back = flip_clip(&flip_clip(&c, Augmentation::H), Augmentation::H);
    assert_ne!(twice.data, c.data);
    assert!(back.data.max_abs_diff(&c.data) < 1e-15);
}

#[test]
fn augmentation_quadruples_and_keeps_labels() {
    let clips: Vec<Clip> = (0..5).map(|i| one_point_clip(0.1 * i as f64, 0.5)).collect();
    let aug = augment_all(&clips);
    assert_eq!(aug.len(), 20);
    for group in aug.chunks(4) {
        let tags: Vec<_> = group.iter().map(|c| c.augmentation).collect();
        assert_eq!(tags, Augmentation::ALL.to_vec());
        assert!(group.iter().all(|c| c.label == Label::Positive && c.frames() == 80));
    }
}

fn participants(n: usize) -> Vec<KeypointSequence> {
    (0..n)
        .map(|i| seq(&format!("id{i}"), if i % 2 == 0 { Label::Positive } else { Label::Unlabeled }, vec![]))
        .collect()
}

#[test]
fn split_ten_participants() {
    let (train, val) = split_by_participant(&participants(10), 0.2, 7).unwrap();
    assert_eq!((train.len(), val.len()), (8, 2));
    let pos = val.iter().filter(|s| s.label == Label::Positive).count();
    assert_eq!(pos, 1, "stratified split keeps one positive in validation");
}

#[test]
fn split_is_deterministic_and_disjoint() {
    let mut seqs = participants(30);
    // a second recording for some participants must follow its owner
    seqs.extend(participants(5).into_iter().map(|mut s| {
        s.hand = Handedness::Left;
        s
    }));
    let a = split_by_participant(&seqs, 0.2, 11).unwrap();
    let b = split_by_participant(&seqs, 0.2, 11).unwrap();
    assert_eq!(a, b);
    let train: std::collections::BTreeSet<_> = a.0.iter().map(|s| &s.participant_id).collect();
    assert!(a.1.iter().all(|s| !train.contains(&s.participant_id)));
    let val_ids: std::collections::BTreeSet<_> = a.1.iter().map(|s| &s.participant_id).collect();
    assert_eq!(val_ids.len(), 6);
}

#[test]
fn split_needs_two_participants() {
    assert!(matches!(split_by_participant(&participants(1), 0.2, 0), Err(Error::Data(_))));
    assert!(matches!(split_by_participant(&participants(4), 1.5, 0), Err(Error::Config(_))));
}

#[test]
fn synth_config_validation() {
    for bad in [
        SynthConfig { n_pd: 0, ..SynthConfig::default() },
        SynthConfig { contamination: 1.0, ..SynthConfig::default() },
        SynthConfig { fps: 0.0, ..SynthConfig::default() },
    ] {
        assert!(matches!(generate_synthetic(&bad), Err(Error::Config(_))));
    }
    let mut cfg = SynthConfig::default();
    cfg.healthy.freq_mean = 0.0;
    assert!(generate_synthetic(&cfg).is_err());
}

#[test]
fn generated_sequences_are_valid_and_yield_clips() {
    let seqs = generate_synthetic(&SynthConfig { n_healthy: 20, n_pd: 20, ..SynthConfig::default() }).unwrap();
    assert_eq!(seqs.len(), 40);
    for s in &seqs {
        s.validate().unwrap();
    }
    let (clips, report) = prepare_clips(&seqs, CLIP_FRAMES);
    assert!(report.sequences_skipped.is_empty(), "{report:?}");
    assert_eq!(clips.len(), 40);
}

#[test]
fn generator_is_byte_identical_for_a_seed() {
    let cfg = SynthConfig { n_healthy: 10, n_pd: 10, seed: 42, ..SynthConfig::default() };
    let a = to_jsonl(&generate_synthetic(&cfg).unwrap()).unwrap();
    let b = to_jsonl(&generate_synthetic(&cfg).unwrap()).unwrap();
    assert_eq!(a, b);
    let c = to_jsonl(&generate_synthetic(&SynthConfig { seed: 43, ..cfg }).unwrap()).unwrap();
    assert_ne!(a, c);
}

#[test]
fn contamination_hides_the_expected_share_of_positives() {
    let cfg = SynthConfig { n_healthy: 10, n_pd: 100, contamination: 0.3, seed: 5, ..SynthConfig::default() };
    let seqs = generate_synthetic(&cfg).unwrap();
    let counts = class_counts(&seqs);
    assert_eq!(counts.hidden_positive + counts.labeled_positive, 100);
    assert_eq!(counts.negative, 10);
    // Binomial(100, 0.3): sd ~ 4.6, allow 3 sd
    let hidden = counts.hidden_positive as f64;
    assert!((hidden - 30.0).abs() <= 3.0 * (100.0f64 * 0.3 * 0.7).sqrt(), "hidden {hidden}");
    let prior = unlabeled_positive_prior(&seqs).unwrap();
    assert!((prior - hidden / (hidden + 10.0)).abs() < 1e-12);
    assert!(seqs.iter().all(|s| s.label == Label::Unlabeled || s.true_label == Some(TrueLabel::Positive)));
}

/// Tap rate of a recording: upward crossings of the mean thumb-index distance,
/// divided by the span of the valid frames.
fn tap_frequency(s: &KeypointSequence) -> f64 {
    let (clean, _) = clean_sequence(s);
    let d: Vec<f64> = clean
        .frames
        .iter()
        .flatten()
        .map(|p| ((p[THUMB_TIP][0] - p[INDEX_TIP][0]).powi(2) + (p[THUMB_TIP][1] - p[INDEX_TIP][1]).powi(2)).sqrt())
        .collect();
    // 3-frame moving average suppresses frame noise before counting
    let smooth: Vec<f64> = d.windows(3).map(|w| w.iter().sum::<f64>() / 3.0).collect();
    let mean = smooth.iter().sum::<f64>() / smooth.len() as f64;
    let crossings = smooth.windows(2).filter(|w| w[0] < mean && w[1] >= mean).count();
    crossings as f64 * s.fps / smooth.len() as f64
}

fn brute_auroc(pos: &[f64], neg: &[f64]) -> f64 {
    let mut wins = 0.0;
    for p in pos {
        for n in neg {
            wins += if p > n { 1.0 } else if p == n { 0.5 } else { 0.0 };
        }
    }
    wins / (pos.len() * neg.len()) as f64
}

#[test]
fn frequency_threshold_separates_default_classes() {
    let seqs = generate_synthetic(&SynthConfig { seed: 9, ..SynthConfig::default() }).unwrap();
    let correct = seqs
        .iter()
        .filter(|s| (tap_frequency(s) < 3.0) == s.true_label.unwrap().is_positive())
        .count();
    let acc = correct as f64 / seqs.len() as f64;
    assert!(acc >= 0.9, "oracle accuracy {acc}");
}

#[test]
fn identical_classes_are_indistinguishable() {
    let mut cfg = SynthConfig { n_healthy: 200, n_pd: 200, jitter_sd: 0.0, seed: 2, ..SynthConfig::default() };
    cfg.pd = cfg.healthy.clone();
    let seqs = generate_synthetic(&cfg).unwrap();
    let (pos, neg): (Vec<_>, Vec<_>) = seqs.iter().partition(|s| s.true_label.unwrap().is_positive());
    let score = |v: &[&KeypointSequence]| v.iter().map(|s| -tap_frequency(s)).collect::<Vec<_>>();
    let auc = brute_auroc(&score(&pos), &score(&neg));
    assert!((auc - 0.5).abs() <= 0.05, "auroc {auc}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn cleaning_preserves_order_and_segmentation_is_exhaustive(
        mask in proptest::collection::vec(0u8..3, 0..300),
        t in 1usize..100,
    ) {
        let frames = mask.iter().enumerate().map(|(i, m)| match m {
            0 => None,
            1 => frame(i as f64 / 1000.0, 0.5, 0.2),
            _ => frame(i as f64 / 1000.0, 0.5, 0.9),
        }).collect();
        let (clean, report) = clean_sequence(&seq("a", Label::Positive, frames));
        let kept = mask.iter().filter(|&&m| m == 2).count();
        prop_assert_eq!(clean.frames.len(), kept);
        prop_assert_eq!(report.invalid_dropped + report.low_confidence_dropped + kept, mask.len());
        let xs: Vec<f64> = clean.frames.iter().map(|f| f.as_ref().unwrap()[0][0]).collect();
        prop_assert!(xs.windows(2).all(|w| w[0] < w[1]));

        let clips = segment_clips(&clean, t);
        prop_assert_eq!(clips.len(), kept / t);
        for (k, c) in clips.iter().enumerate() {
            prop_assert_eq!(c.start_frame, k * t);
            prop_assert_eq!(c.frames(), t);
            prop_assert!((c.data.data()[0] - xs[k * t]).abs() < 1e-15);
        }
    }

    #[test]
    fn flips_preserve_shape_label_and_range(x in 0.0f64..=1.0, y in 0.0f64..=1.0) {
        for c in augment_clip(&one_point_clip(x, y)) {
            prop_assert_eq!(c.data.shape(), &[2, 80, 21]);
            prop_assert_eq!(c.label, Label::Positive);
            prop_assert!(c.data.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
