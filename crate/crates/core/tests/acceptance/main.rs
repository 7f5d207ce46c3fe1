//! One line per acceptance criterion, then a nonzero exit if any failed.

/// Returns `Err(msg)` from the enclosing check when `cond` is false.
macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

#[path = "../common/fixture.rs"]
mod fixture;
#[path = "../common/trace.rs"]
mod trace;
#[path = "../common/world.rs"]
mod world;

mod chunking;
mod determinism;
mod metric_oracles;
mod sinkhorn;
mod structural;
mod trace_equality;

use std::panic;
use std::time::Instant;

type Check = fn() -> Result<String, String>;

fn main() {
    let criteria: [(&str, Check); 8] = [
        ("sinkhorn-knopp", sinkhorn::check),
        ("propagation-trace", trace_equality::check),
        ("end-to-end-determinism", determinism::check),
        ("chunking", chunking::check),
        ("metric-oracles", metric_oracles::check),
        ("structural-constants", structural::check),
        ("composite-usage", composite::check),
        ("sigmoid-normalization", sigmoid::check),
    ];
    // a test filter argument (as passed by `cargo test <name>`) narrows the run
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (name, check) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = panic::catch_unwind(check).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("acceptance {name}: PASS ({detail}; {secs:.2}s)"),
            Err(detail) => {
                failed += 1;
                println!("acceptance {name}: FAIL ({detail}; {secs:.2}s)");
            }
        }
    }
    if failed > 0 {
        println!("acceptance: {failed} criteria failed");
        std::process::exit(1);
    }
}
