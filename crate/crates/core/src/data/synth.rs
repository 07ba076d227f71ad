//! Synthetic finger-tapping recordings.
//!
//! Each sequence is a static hand pose whose thumb and index finger open
//! and close periodically. Healthy hands tap fast and wide with constant
//! amplitude; PD-like hands tap slower and narrower, lose amplitude with
//! every tap and carry jerky noise on the tapping fingers. A fraction of PD-like sequences is emitted
//! as unlabeled, with the hidden truth kept in `true_label`.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::keypoints::{KeypointSequence, Label, Landmark, TrueLabel};
use crate::error::{Error, Result};
use crate::graph::{Handedness, VERTEX_COUNT};

/// Tapping kinematics of one class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassParams {
    /// Mean tapping frequency in Hz.
    pub freq_mean: f64,
    /// Between-sequence spread of the frequency.
    pub freq_sd: f64,
    /// Fractional amplitude lost per completed tap.
    pub decrement: f64,
    /// SD of independent per-frame noise on the tapping fingertips.
    pub jerk_sd: f64,
    /// Peak aperture relative to [`SynthConfig::amplitude`].
    pub amplitude_scale: f64,
}

impl Default for ClassParams {
    fn default() -> Self {
        ClassParams { freq_mean: 4.0, freq_sd: 0.3, decrement: 0.0, jerk_sd: 0.0, amplitude_scale: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_healthy: usize,
    pub n_pd: usize,
    pub healthy: ClassParams,
    pub pd: ClassParams,
    /// Peak thumb-index aperture in normalized image units.
    pub amplitude: f64,
    /// SD of the slow whole-hand sway and of per-landmark noise.
    pub jitter_sd: f64,
    /// Multiplies the per-participant spread of hand size, placement and
    /// tilt; 0 puts every hand in the same rest pose.
    pub pose_spread: f64,
    /// Fraction of PD-like sequences hidden in the unlabeled pool.
    pub contamination: f64,
    pub fps: f64,
    /// Seconds of tapping per sequence (excluding no-hand frames).
    pub duration: f64,
    /// Up to this many frames without a hand before and after the tapping.
    pub max_lead_frames: usize,
    /// Probability that a tapping frame is tracked with low confidence.
    pub low_confidence_rate: f64,
    pub left_fraction: f64,
    /// Participant id prefix, so independent sets never share ids.
    pub id_prefix: String,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_healthy: 100,
            n_pd: 100,
            healthy: ClassParams::default(),
            pd: ClassParams { freq_mean: 2.0, freq_sd: 0.3, decrement: 0.03, jerk_sd: 0.004, amplitude_scale: 0.6 },
            amplitude: 0.1,
            jitter_sd: 0.002,
            pose_spread: 1.0,
            contamination: 0.2,
            fps: 30.0,
            duration: 3.0,
            max_lead_frames: 12,
            low_confidence_rate: 0.02,
            left_fraction: 0.5,
            id_prefix: "p".into(),
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// A held-out pool shaped like a clinical test cohort: 182
    /// participants, 83 of them PD-like, with ids that cannot collide with
    /// the default training pool.
    pub fn test_pool(seed: u64) -> Self {
        SynthConfig { n_healthy: 99, n_pd: 83, id_prefix: "t".into(), seed, ..SynthConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_healthy == 0 || self.n_pd == 0 {
            return bad("both class counts must be positive".into());
        }
        for (name, c) in [("healthy", &self.healthy), ("pd", &self.pd)] {
            if !(c.freq_mean > 0.0) || !(c.amplitude_scale > 0.0) || c.freq_sd < 0.0 || !(0.0..1.0).contains(&c.decrement) || c.jerk_sd < 0.0 {
                return bad(format!("{name}: frequency and amplitude scale must be positive, spreads non-negative, decrement in [0, 1)"));
            }
        }
        if !(0.0..1.0).contains(&self.contamination) {
            return bad(format!("contamination {} outside [0, 1)", self.contamination));
        }
        if !(self.fps > 0.0) || !(self.duration > 0.0) || !(self.amplitude > 0.0) || self.jitter_sd < 0.0 || !(0.0..=1.0).contains(&self.pose_spread) {
            return bad("fps, duration and amplitude must be positive, jitter non-negative, pose spread in [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.low_confidence_rate) || !(0.0..=1.0).contains(&self.left_fraction) {
            return bad("rates must lie in [0, 1]".into());
        }
        Ok(())
    }
}

/// Right-hand rest pose around the origin with the fingertips of thumb and
/// index touching; y grows downward as in image coordinates.
fn rest_pose() -> [[f64; 2]; VERTEX_COUNT] {
    let mut p = [[0.0; 2]; VERTEX_COUNT];
    // (base position, direction angle in degrees from straight up, segment length)
    let fingers = [
        ([-0.30, -0.25], -35.0, 0.22),
        ([-0.15, -0.55], -8.0, 0.24),
        ([0.0, -0.58], 0.0, 0.26),
        ([0.14, -0.55], 8.0, 0.24),
        ([0.26, -0.48], 16.0, 0.19),
    ];
    for (f, (base, angle, len)) in fingers.iter().enumerate() {
        let a = (*angle as f64).to_radians();
        let dir = [a.sin(), -a.cos()];
        for j in 0..4 {
            let s = *len * j as f64;
            p[4 * f + 1 + j] = [base[0] + dir[0] * s, base[1] + dir[1] * s];
        }
    }
    // pinch: bend thumb and index so their tips meet
    let meet = [-0.26, -0.95];
    for (j, w) in [(2, 0.33), (3, 0.66), (4, 1.0)] {
        let d = [meet[0] - p[4][0], meet[1] - p[4][1]];
        p[j][0] += w * d[0];
        p[j][1] += w * d[1];
    }
    for (j, w) in [(6, 0.33), (7, 0.66), (8, 1.0)] {
        let d = [meet[0] - p[8][0], meet[1] - p[8][1]];
        p[j][0] += w * d[0];
        p[j][1] += w * d[1];
    }
    p
}

struct Sequence<'a> {
    cfg: &'a SynthConfig,
    class: &'a ClassParams,
}

impl Sequence<'_> {
    fn frames(&self, rng: &mut ChaCha8Rng) -> Vec<Option<Vec<Landmark>>> {
        let cfg = self.cfg;
        let pose = rest_pose();
        let spread = cfg.pose_spread;
        let mut around = |centre: f64, half: f64| centre + spread * half * rng.gen_range(-1.0..1.0);
        let scale = 0.2 * around(1.0, 0.1);
        // the wrist sits below centre so the whole hand is roughly centred
        let origin = [around(0.5, 0.04), around(0.61, 0.03)];
        let tilt: f64 = around(0.0, 0.1);
        let (sin, cos) = tilt.sin_cos();
        let freq = (self.class.freq_mean + self.class.freq_sd * rng.sample::<f64, _>(rand_distr::StandardNormal)).max(0.3);
        let phase0: f64 = rng.gen_range(0.0..1.0);
        let sway = Normal::new(0.0, cfg.jitter_sd.max(f64::MIN_POSITIVE)).expect("valid sd");
        let jerk = Normal::new(0.0, self.class.jerk_sd.max(f64::MIN_POSITIVE)).expect("valid sd");

        // opening directions of thumb (away from index) and index (away from thumb)
        let open_thumb = [-0.45, 0.2];
        let open_index = [0.25, -0.35];
        let norm = |v: [f64; 2]| {
            let n = (v[0] * v[0] + v[1] * v[1]).sqrt();
            [v[0] / n, v[1] / n]
        };
        let (ut, ui) = (norm(open_thumb), norm(open_index));

        let n = (cfg.duration * cfg.fps).round() as usize;
        let lead = rng.gen_range(0..=cfg.max_lead_frames);
        let tail = rng.gen_range(0..=cfg.max_lead_frames);
        let mut out: Vec<Option<Vec<Landmark>>> = vec![None; lead];
        let (mut drift_x, mut drift_y) = (0.0, 0.0);
        for t in 0..n {
            let time = t as f64 / cfg.fps;
            let phase = phase0 + freq * time;
            let taps = phase.floor();
            let amp = cfg.amplitude * self.class.amplitude_scale * (1.0 - self.class.decrement).powf(taps);
            let aperture = amp * 0.5 * (1.0 - (2.0 * PI * phase).cos());
            // slow sway: a damped random walk shared by every landmark
            drift_x = 0.9 * drift_x + sway.sample(rng);
            drift_y = 0.9 * drift_y + sway.sample(rng);

            let low_conf = rng.gen::<f64>() < cfg.low_confidence_rate;
            let mut frame = Vec::with_capacity(VERTEX_COUNT);
            for (j, rest) in pose.iter().enumerate() {
                let (mut x, mut y) = (rest[0] * scale, rest[1] * scale);
                let (w, u) = match j {
                    3 => (0.5, Some(ut)),
                    4 => (1.0, Some(ut)),
                    6 => (0.33, Some(ui)),
                    7 => (0.66, Some(ui)),
                    8 => (1.0, Some(ui)),
                    _ => (0.0, None),
                };
                if let Some(u) = u {
                    x += 0.5 * aperture * w * u[0];
                    y += 0.5 * aperture * w * u[1];
                    if self.class.jerk_sd > 0.0 {
                        x += w * jerk.sample(rng);
                        y += w * jerk.sample(rng);
                    }
                }
                let (rx, ry) = (cos * x - sin * y, sin * x + cos * y);
                let nx = if cfg.jitter_sd > 0.0 { 0.25 * sway.sample(rng) } else { 0.0 };
                let ny = if cfg.jitter_sd > 0.0 { 0.25 * sway.sample(rng) } else { 0.0 };
                let px = (origin[0] + rx + drift_x + nx).clamp(0.0, 1.0);
                let py = (origin[1] + ry + drift_y + ny).clamp(0.0, 1.0);
                let conf = if low_conf { rng.gen_range(0.1..0.4) } else { rng.gen_range(0.85..1.0) };
                frame.push([px, py, conf]);
            }
            out.push(Some(frame));
        }
        out.extend(std::iter::repeat(None).take(tail));
        out
    }
}

/// Generates `n_healthy + n_pd` single-hand sequences, one per participant,
/// in a seeded random order.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Vec<KeypointSequence>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut classes: Vec<bool> = std::iter::repeat(false).take(cfg.n_healthy).chain(std::iter::repeat(true).take(cfg.n_pd)).collect();
    rand::seq::SliceRandom::shuffle(classes.as_mut_slice(), &mut rng);
    let mut out = Vec::with_capacity(classes.len());
    for (i, &pd) in classes.iter().enumerate() {
        let class = if pd { &cfg.pd } else { &cfg.healthy };
        let hidden = pd && rng.gen::<f64>() < cfg.contamination;
        let hand = if rng.gen::<f64>() < cfg.left_fraction { Handedness::Left } else { Handedness::Right };
        let mut frames = Sequence { cfg, class }.frames(&mut rng);
        if hand == Handedness::Left {
            for p in frames.iter_mut().flatten().flatten() {
                p[0] = 1.0 - p[0];
            }
        }
        out.push(KeypointSequence {
            participant_id: format!("{}{:04}", cfg.id_prefix, i),
            hand,
            label: if pd && !hidden { Label::Positive } else { Label::Unlabeled },
            true_label: Some(if pd { TrueLabel::Positive } else { TrueLabel::Negative }),
            fps: cfg.fps,
            frames,
        });
    }
    Ok(out)
}

/// Share of true positives inside the unlabeled pool, `None` when the
/// sequences carry no ground truth or nothing is unlabeled.
pub fn unlabeled_positive_prior(seqs: &[KeypointSequence]) -> Option<f64> {
    let unlabeled: Vec<_> = seqs.iter().filter(|s| s.label == Label::Unlabeled).collect();
    if unlabeled.is_empty() || unlabeled.iter().any(|s| s.true_label.is_none()) {
        return None;
    }
    let hidden = unlabeled.iter().filter(|s| s.true_label == Some(TrueLabel::Positive)).count();
    Some(hidden as f64 / unlabeled.len() as f64)
}

/// Fraction of sequences labeled positive.
pub fn labeled_positive_fraction(seqs: &[KeypointSequence]) -> f64 {
    if seqs.is_empty() {
        return 0.0;
    }
    seqs.iter().filter(|s| s.label == Label::Positive).count() as f64 / seqs.len() as f64
}

/// Counts per (true class, training label).
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ClassCounts {
    pub labeled_positive: usize,
    pub hidden_positive: usize,
    pub negative: usize,
}

pub fn class_counts(seqs: &[KeypointSequence]) -> ClassCounts {
    let mut c = ClassCounts::default();
    for s in seqs {
        match (s.label, s.true_label) {
            (Label::Positive, _) => c.labeled_positive += 1,
            (Label::Unlabeled, Some(TrueLabel::Positive)) => c.hidden_positive += 1,
            (Label::Unlabeled, _) => c.negative += 1,
        }
    }
    c
}
