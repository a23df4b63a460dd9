//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. Pass criterion numbers as arguments to run a
//! subset, e.g. `cargo test -p knit-cli --test acceptance -- 1 9`.

mod common;
mod metrics;
mod model;
mod synthetic;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

pub type Outcome = Result<String, String>;

/// Fails the enclosing criterion with a formatted message.
#[macro_export]
macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err(format!($($arg)+));
        }
    };
}

struct Criterion {
    id: u32,
    name: &'static str,
    /// Wall-clock budget in seconds.
    budget: Option<f64>,
    run: fn() -> Outcome,
}

const CRITERIA: &[Criterion] = &[
    Criterion { id: 1, name: "mask oracle equivalence", budget: Some(30.0), run: model::mask_oracle },
    Criterion { id: 2, name: "KT-Attn layer-1 locality", budget: Some(60.0), run: model::layer1_locality },
    Criterion { id: 3, name: "injection identity at alpha 0", budget: None, run: model::injection_identity },
    Criterion { id: 4, name: "annealing contract", budget: None, run: model::annealing },
    Criterion { id: 5, name: "gradient integrity", budget: Some(120.0), run: model::gradients },
    Criterion { id: 6, name: "synthetic knowledge benefit", budget: Some(900.0), run: synthetic::benefit },
    Criterion { id: 7, name: "MI direction", budget: None, run: synthetic::mi_direction },
    Criterion { id: 8, name: "gate fidelity and sparsity", budget: None, run: synthetic::gate_fidelity },
    Criterion { id: 9, name: "metric correctness", budget: None, run: metrics::metrics },
    Criterion { id: 10, name: "protocol determinism", budget: None, run: synthetic::determinism },
];

fn main() -> ExitCode {
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for c in CRITERIA.iter().filter(|c| wanted.is_empty() || wanted.contains(&c.id)) {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        let outcome = match (outcome, c.budget) {
            (Ok(_), Some(b)) if secs > b => Err(format!("took {secs:.1}s, budget {b:.0}s")),
            (o, _) => o,
        };
        match outcome {
            Ok(detail) => println!("PASS {:>2} {} ({secs:.1}s): {detail}", c.id, c.name),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:>2} {} ({secs:.1}s): {detail}", c.id, c.name);
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
