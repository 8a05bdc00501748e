//! Runs every known-answer check: critic calibration, gradient-penalty closed
//! forms and finite-difference gradient checks.
//!
//! cargo run --release --example oracle_checks -- [seed]

fn main() -> awh::Result<()> {
    let seed = std::env::args().nth(1).map_or(0, |s| s.parse().expect("seed must be an integer"));
    let checks = awh::oracle::run_all(seed)?;
    for c in &checks {
        println!("{c}");
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    println!("{} checks, {failed} failed", checks.len());
    Ok(())
}
