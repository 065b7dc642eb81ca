//! Acceptance suite. Prints one PASS/FAIL/SKIP line per criterion and exits
//! non-zero if any criterion fails. `ACCEPTANCE_ONLY=1,5,9` runs a subset
//! (criterion 11 needs 9 and 10).

mod models;
mod oracles;
mod properties;
mod runs;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

pub type Outcome = Result<String, String>;

struct Suite {
    only: Option<Vec<u8>>,
    failed: Vec<u8>,
}

impl Suite {
    fn selected(&self, id: u8) -> bool {
        self.only.as_ref().is_none_or(|o| o.contains(&id))
    }

    fn run(&mut self, id: u8, name: &str, budget: Duration, f: impl FnOnce() -> Option<Outcome>) {
        if !self.selected(id) {
            return;
        }
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Some(Err(format!("panicked: {msg}")))
        });
        let secs = t.elapsed();
        let (status, detail) = match outcome {
            None => (
                "SKIP",
                "no dataset configured (set TERRAINSEG_RUGD_ROOT / TERRAINSEG_RELLIS_ROOT)".to_string(),
            ),
            Some(Ok(d)) if secs <= budget => ("PASS", d),
            Some(Ok(d)) => ("FAIL", format!("{d}; over the {}s budget", budget.as_secs())),
            Some(Err(d)) => ("FAIL", d),
        };
        if status == "FAIL" {
            self.failed.push(id);
        }
        println!(
            "criterion {id:>2} {name:<34} {status}  {detail} [{:.1}s]",
            secs.as_secs_f64()
        );
    }
}

fn main() {
    let only = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|v| v.trim().parse().ok()).collect());
    let mut suite = Suite {
        only,
        failed: Vec::new(),
    };
    let secs = Duration::from_secs;
    let dir = tempfile::tempdir().expect("temp dir");
    let d = dir.path();

    suite.run(1, "coarsification oracle equivalence", secs(30), || {
        Some(properties::coarsify_oracle())
    });
    suite.run(2, "coarsification monotonicity", secs(30), || {
        Some(properties::coarsify_properties())
    });
    suite.run(3, "FPS greedy optimality", secs(60), || {
        Some(properties::fps_optimality())
    });
    suite.run(4, "fusion algebra", secs(10), || Some(properties::fusion_algebra()));
    suite.run(5, "mIoU oracle", secs(10), || Some(properties::miou_oracle()));
    suite.run(6, "loss correctness", secs(10), || Some(properties::loss_correctness()));
    suite.run(7, "gradient check", secs(300), || Some(models::gradients()));
    suite.run(8, "shape contracts", secs(60), || Some(models::shapes()));

    let (ckpt1, ckpt2) = (d.join("overfit1.safetensors"), d.join("overfit2.safetensors"));
    let (run1, run2) = (d.join("smoke/run1"), d.join("smoke/run2"));
    suite.run(9, "overfit sanity", secs(600), || {
        Some(runs::overfit(&d.join("overfit1"), &ckpt1))
    });
    suite.run(10, "end-to-end smoke", secs(1800), || {
        std::fs::create_dir_all(d.join("smoke")).ok();
        Some(runs::smoke(&d.join("smoke"), &run1))
    });
    suite.run(11, "determinism", secs(2400), || {
        let again = runs::overfit(&d.join("overfit2"), &ckpt2)
            .and_then(|_| runs::run_pipeline(&d.join("smoke/pipeline.toml"), &run2));
        Some(again.and_then(|_| runs::determinism(&run1, &run2, &ckpt1, &ckpt2)))
    });
    suite.run(12, "full-scale densities (optional)", Duration::MAX, || {
        runs::full_scale(&d.join("full"))
    });

    if !suite.failed.is_empty() {
        println!("acceptance: failed criteria {:?}", suite.failed);
        std::process::exit(1);
    }
    println!("acceptance: all selected criteria passed");
}
