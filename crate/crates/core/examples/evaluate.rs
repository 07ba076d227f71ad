//! Scores three toy models of different strength, fuses two streams,
//! bootstraps the metrics over participants and runs the Friedman test with
//! Holm-corrected pairwise comparisons.
//!
//! `cargo run --example evaluate`

use pulsar::eval::{bootstrap_eval, compute_metrics, friedman_test, fuse_streams, BootstrapConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn main() -> pulsar::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let noise = Normal::new(0.0, 1.0).unwrap();
    // 150 participants with two clips each
    let participants: Vec<String> = (0..300).map(|i| format!("p{:03}", i / 2)).collect();
    let truth: Vec<bool> = (0..300).map(|i| (i / 2) % 5 < 2).collect();
    let mut scores = |margin: f64| -> Vec<f64> {
        truth.iter().map(|&t| if t { margin } else { -margin } + noise.sample(&mut rng)).collect()
    };
    let weak = scores(0.3);
    let joint = scores(0.8);
    let velocity = scores(0.8);
    let fused = fuse_streams(&[joint.clone(), velocity])?;
    let models = vec![("weak".to_string(), weak), ("joint".to_string(), joint), ("fused".to_string(), fused)];

    for (name, s) in &models {
        let m = compute_metrics(s, &truth)?;
        println!("{name:<6} acc {:.3}  F1m {:.3}  AUC {:.3}", m.accuracy, m.macro_f1, m.auroc.unwrap_or(f64::NAN));
    }
    let cfg = BootstrapConfig { participants: 120, reps: 20, seed: 0 };
    let reports = bootstrap_eval(&participants, &truth, &models, &cfg)?;
    for r in &reports {
        println!("{:<6} bootstrap accuracy {:.3} ± {:.3}", r.model, r.accuracy.mean, r.accuracy.std);
    }

    let names: Vec<String> = reports.iter().map(|r| r.model.clone()).collect();
    let matrix: Vec<Vec<f64>> = (0..cfg.reps).map(|i| reports.iter().map(|r| r.accuracies()[i]).collect()).collect();
    let f = friedman_test(&matrix, &names)?;
    println!("Friedman chi2 {:.2} (df {}), p {:.2e}, mean ranks {:?}", f.statistic, f.df, f.p_value, f.average_ranks);
    for c in &f.pairwise {
        println!("  {} vs {}: z {:+.2}, Holm p {:.3e}", c.a, c.b, c.z, c.p_holm);
    }
    Ok(())
}
