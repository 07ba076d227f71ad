//! Generates a synthetic finger-tapping pool, reports its label bookkeeping
//! and clip yield, and writes it as keypoint JSONL.
//!
//! `cargo run --example synth_dataset [out.jsonl]`

use pulsar::data::{
    class_counts, generate_synthetic, labeled_positive_fraction, prepare_clips, unlabeled_positive_prior,
    write_keypoint_file, SynthConfig, CLIP_FRAMES,
};

fn main() -> pulsar::Result<()> {
    let cfg = SynthConfig { contamination: 0.3, ..SynthConfig::default() };
    let seqs = generate_synthetic(&cfg)?;
    let c = class_counts(&seqs);
    println!("{} sequences at {} fps", seqs.len(), seqs[0].fps);
    println!("labeled positive {}, hidden positive {}, negative {}", c.labeled_positive, c.hidden_positive, c.negative);
    println!("labeled positive fraction {:.3}", labeled_positive_fraction(&seqs));
    if let Some(p) = unlabeled_positive_prior(&seqs) {
        println!("positive share inside the unlabeled set {p:.3}");
    }
    let (clips, report) = prepare_clips(&seqs, CLIP_FRAMES);
    println!("{} clips of {CLIP_FRAMES} frames, {} of {} frames dropped", clips.len(), report.frames_dropped, report.frames_in);

    if let Some(path) = std::env::args().nth(1) {
        write_keypoint_file(&path, &seqs)?;
        println!("wrote {path}");
    }
    Ok(())
}
