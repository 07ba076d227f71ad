//! Trains one joint-stream classifier on a small synthetic pool with the
//! non-negative PU risk, saves the checkpoint and reloads it.
//!
//! `cargo run --release --example train_stream [epochs]`

use pulsar::data::{augment_all, generate_synthetic, prepare_clips, split_by_participant, ClipSet, SynthConfig, CLIP_FRAMES};
use pulsar::network::ModelConfig;
use pulsar::risk::{RiskConfig, RiskMode};
use pulsar::streams::StreamKind;
use pulsar::training::{load_checkpoint, save_checkpoint, train_stream, TrainConfig};

fn main() -> pulsar::Result<()> {
    let epochs = std::env::args().nth(1).map_or(8, |s| s.parse().expect("epochs must be an integer"));
    let seqs = generate_synthetic(&SynthConfig { n_healthy: 24, n_pd: 24, contamination: 0.3, ..SynthConfig::default() })?;
    let (train_seqs, val_seqs) = split_by_participant(&seqs, 0.2, 0)?;
    let (train_clips, _) = prepare_clips(&train_seqs, CLIP_FRAMES);
    let (val_clips, _) = prepare_clips(&val_seqs, CLIP_FRAMES);
    let train = ClipSet::from_clips(&augment_all(&train_clips), StreamKind::Joint)?;
    let val = ClipSet::from_clips(&val_clips, StreamKind::Joint)?;
    println!("{} training clips (flips included), {} validation clips", train.len(), val.len());

    let model = ModelConfig { channels: vec![8, 16], ..ModelConfig::default() };
    let cfg = TrainConfig {
        lr: 1e-3,
        max_epochs: epochs,
        risk: RiskConfig { theta_p: 0.5, mode: RiskMode::PuNonneg, ..RiskConfig::default() },
        ..TrainConfig::default()
    };
    let ckpt = train_stream(&model, &train, &val, &cfg)?;
    for r in &ckpt.history {
        println!("epoch {:>2}  risk {:.4}  val acc {:.3}  lr {:.1e}", r.epoch, r.train_risk, r.val_accuracy, r.lr);
    }
    println!("kept epoch {} (val acc {:.3})", ckpt.best_epoch, ckpt.best_val_accuracy);

    let path = std::env::temp_dir().join("pulsar-example-joint.ckpt");
    save_checkpoint(&ckpt, &path)?;
    let back = load_checkpoint(&path)?;
    println!("reloaded {} ({} dtype), identical: {}", path.display(), back.dtype, back == ckpt);
    Ok(())
}
