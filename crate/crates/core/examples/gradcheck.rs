//! Runs the finite-difference gradient check over every primitive and the
//! composite network, then again with a deliberately broken backward rule.
//!
//! `cargo run --release --example gradcheck [seed]`

use pulsar::gradsuite::run_suite;
use pulsar::numeric::OpKind;

fn main() -> pulsar::Result<()> {
    let seed = std::env::args().nth(1).map_or(0, |s| s.parse().expect("seed must be an integer"));
    let report = run_suite(seed, None)?;
    println!("{:<28} {:>10} {:>10} {:>7}", "case", "max rel", "max abs", "checked");
    for c in &report.cases {
        println!("{:<28} {:>10.2e} {:>10.2e} {:>7} {}", c.name, c.max_rel_err, c.max_abs_err, c.checked, if c.passed { "" } else { "FAIL" });
    }
    println!("all within {:.0e}: {}", report.tolerance, report.passed());

    let broken = run_suite(seed, Some(OpKind::TemporalConv))?;
    println!("with a faulty temporal_conv backward, failing cases: {:?}", broken.failures());
    Ok(())
}
