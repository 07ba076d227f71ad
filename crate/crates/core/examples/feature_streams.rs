//! Derives the bone, velocity and acceleration streams from the joint
//! coordinates of one synthetic clip.
//!
//! `cargo run --example feature_streams`

use pulsar::data::{generate_synthetic, prepare_clips, SynthConfig, CLIP_FRAMES};
use pulsar::graph::{build_hand_graph, Handedness, THUMB_TIP, WRIST};
use pulsar::streams::{derive_stream, StreamKind};

fn main() -> pulsar::Result<()> {
    let seqs = generate_synthetic(&SynthConfig { n_healthy: 1, n_pd: 1, ..SynthConfig::default() })?;
    let (clips, _) = prepare_clips(&seqs, CLIP_FRAMES);
    let graph = build_hand_graph(Handedness::Right);
    for clip in clips.iter().take(2) {
        println!("participant {} (truth positive: {})", clip.participant_id, clip.truth());
        for kind in [StreamKind::Joint, StreamKind::Bone, StreamKind::Velocity, StreamKind::Acceleration] {
            let s = derive_stream(kind, &clip.data, &graph)?;
            let (c, t, v) = (s.shape()[0], s.shape()[1], s.shape()[2]);
            // mean magnitude at the wrist and the thumb tip
            let mag = |vertex: usize| {
                (0..t).map(|f| (0..c).map(|ch| s.data()[(ch * t + f) * v + vertex].powi(2)).sum::<f64>().sqrt()).sum::<f64>() / t as f64
            };
            println!("  {:<13} wrist {:.4}  thumb tip {:.4}", kind.name(), mag(WRIST), mag(THUMB_TIP));
        }
    }
    Ok(())
}
