//! Analytic gradients against central differences over many random draws.

use std::collections::BTreeMap;

use noisy_sep::checks::{model_checks, primitive_checks, TOLERANCE};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const DRAWS: u64 = 50;

#[test]
fn every_primitive_over_fifty_random_instances() {
    let mut worst: BTreeMap<String, f64> = BTreeMap::new();
    let mut failures = Vec::new();
    for draw in 0..DRAWS {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + draw);
        for o in primitive_checks(&mut rng).unwrap() {
            let w = worst.entry(o.name.to_string()).or_insert(0.0);
            *w = w.max(o.report.max_rel_err);
            if !o.report.pass {
                failures.push(format!("{} (draw {draw}): {:?}", o.name, o.report.failure));
            }
        }
    }
    assert!(worst.len() >= 10, "only {} primitives covered", worst.len());
    assert!(failures.is_empty(), "{failures:#?}");
    assert!(worst.values().all(|&e| e <= TOLERANCE), "{worst:#?}");
}

#[test]
fn composite_losses_across_seeds() {
    for seed in [1, 2, 3] {
        for o in model_checks(seed).unwrap() {
            assert!(o.report.pass, "{} seed {seed}: {:?}", o.name, o.report);
        }
    }
}
