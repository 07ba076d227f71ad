//! Trains all five variants on a synthetic pool, evaluates them on a
//! separate synthetic test pool, and prints the comparison table.
//!
//! `cargo run --release --example ablation [epochs]`

use pulsar::data::{generate_synthetic, SynthConfig};
use pulsar::experiment::{run_ablation, ExperimentConfig};

fn main() -> pulsar::Result<()> {
    let epochs = std::env::args().nth(1).map_or(Ok(30), |s| s.parse()).expect("epochs must be an integer");
    let pool = generate_synthetic(&SynthConfig::default())?;
    let test = generate_synthetic(&SynthConfig::test_pool(1))?;
    let mut cfg = ExperimentConfig::default();
    cfg.train.max_epochs = epochs;

    let report = run_ablation(&pool, &test, &cfg)?;
    println!("{:<26} {:>5} {:>8}", "run", "best", "val acc");
    for r in &report.runs {
        println!("{:<26} {:>5} {:>8.3}", r.run, r.best_epoch, r.best_val_accuracy);
    }
    println!("\n{} test clips from {} participants", report.test_clips, report.test_participants);
    println!("{:<9} {:>6} {:>6} {:>6} {:>6} {:>6} {:>6}   bootstrap acc", "variant", "acc", "prec", "rec", "F1m", "F1w", "AUC");
    for v in &report.variants {
        let m = &v.metrics;
        println!(
            "{:<9} {:>6.3} {:>6.3} {:>6.3} {:>6.3} {:>6.3} {:>6.3}   {:.3} ± {:.3}",
            v.variant.name(),
            m.accuracy,
            m.precision,
            m.recall,
            m.macro_f1,
            m.weighted_f1,
            m.auroc.unwrap_or(f64::NAN),
            v.bootstrap.accuracy.mean,
            v.bootstrap.accuracy.std
        );
        if v.stream_metrics.len() > 1 {
            for (s, sm) in &v.stream_metrics {
                println!("  {:<13} acc {:.3} AUC {:.3}", s.name(), sm.accuracy, sm.auroc.unwrap_or(f64::NAN));
            }
        }
    }
    let f = &report.friedman;
    println!("\nFriedman chi2 = {:.2} (df {}), p = {:.3e}", f.statistic, f.df, f.p_value);
    for (m, r) in f.models.iter().zip(&f.average_ranks) {
        println!("  {m:<9} mean rank {r:.2}");
    }
    println!("finished in {:.0} s", report.seconds);
    Ok(())
}
