//! Acceptance suite. Prints one line per criterion; exits nonzero if any fails
//! or runs past its time limit.
//!
//! `STOCHFLOW_SEED` and `STOCHFLOW_BUDGET` override the seed and budget scale.

use stochflow::acceptance::{verify_all, Budget};

fn main() {
    let seed = std::env::var("STOCHFLOW_SEED").ok().and_then(|s| s.parse().ok()).unwrap_or(20240601);
    let scale = std::env::var("STOCHFLOW_BUDGET").ok().and_then(|s| s.parse().ok()).unwrap_or(1.0);
    let summary = verify_all(&Budget::new(seed, scale), |c| {
        println!("{}", c.line());
        if !c.pass {
            println!("    {}", c.details);
        }
    });
    let ok = summary.criteria.iter().all(|c| c.pass && c.within_limit());
    println!("acceptance: {}/{} criteria pass", summary.criteria.iter().filter(|c| c.pass && c.within_limit()).count(), summary.criteria.len());
    if !ok {
        std::process::exit(1);
    }
}
