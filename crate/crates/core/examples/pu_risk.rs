//! Compares the PN, unbiased PU and non-negative PU risks on scores where
//! part of the unlabeled set is positive.
//!
//! `cargo run --example pu_risk`

use pulsar::risk::{risk, RiskConfig, RiskMode};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn main() -> pulsar::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let pos = Normal::new(1.5, 1.0).unwrap();
    let neg = Normal::new(-1.5, 1.0).unwrap();
    let labeled: Vec<f64> = (0..100).map(|_| pos.sample(&mut rng)).collect();
    // unlabeled: 30 hidden positives among 100
    let unlabeled: Vec<f64> = (0..100).map(|i| if i < 30 { pos.sample(&mut rng) } else { neg.sample(&mut rng) }).collect();
    let negatives = &unlabeled[30..];

    for (mode, theta_p, other) in [
        (RiskMode::Pn, 0.5, &unlabeled[..]),
        (RiskMode::Pn, 0.5, negatives),
        (RiskMode::PuUnbiased, 0.3, &unlabeled[..]),
        (RiskMode::PuNonneg, 0.3, &unlabeled[..]),
    ] {
        let cfg = RiskConfig { mode, theta_p, ..RiskConfig::default() };
        let r = risk(&labeled, other, &cfg)?;
        let b = r.breakdown;
        println!(
            "{:<12} theta_p {theta_p:.1} on {:>3} others: risk {:.4} (positive {:.4}, other {:.4}, clamped {})",
            mode.tag(),
            other.len(),
            b.total,
            b.positive_term,
            b.unlabeled_or_negative_term,
            b.clamped
        );
    }
    // a scorer that pushes all unlabeled data to negative goes below zero
    // under the unbiased estimator
    let (p, u) = (vec![8.0; 10], vec![-8.0; 10]);
    let cfg = RiskConfig { mode: RiskMode::PuUnbiased, theta_p: 0.6, ..RiskConfig::default() };
    let unbiased = risk(&p, &u, &cfg)?.breakdown;
    let nonneg = risk(&p, &u, &RiskConfig { mode: RiskMode::PuNonneg, ..cfg })?.breakdown;
    println!("memorising scorer: unbiased {:.4}, non-negative {:.4} (clamped {})", unbiased.total, nonneg.total, nonneg.clamped);
    Ok(())
}
