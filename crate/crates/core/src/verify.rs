//! Self-checks run by `deepmaxent verify`: gradient checks, the
//! Poisson/normalized-loss identity, the saturated batch property and
//! agreement of the batched losses with the direct oracles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::gradcheck;
use crate::losses::{self, BatchLabels, LossKind};
use crate::matrix::Matrix;
use crate::synth::oracle_full_loss;
use crate::train::verify_batch_property;

pub const IDENTITY_TOLERANCE: f64 = 1e-10;
pub const ORACLE_TOLERANCE: f64 = 1e-12;
pub const BATCH_PROPERTY_TOLERANCE: f64 = 1e-3;
pub const BATCH_PROPERTY_CASES: [(usize, usize); 6] = [(4, 2), (4, 3), (6, 2), (6, 3), (6, 5), (8, 4)];

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VerifyOptions {
    pub gradient_instances: usize,
    pub identity_instances: usize,
    pub oracle_instances: usize,
    pub seed: u64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            gradient_instances: 50,
            identity_instances: 1000,
            oracle_instances: 1000,
            seed: 0,
        }
    }
}

pub fn run(opts: &VerifyOptions) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for kind in LossKind::ALL {
        let outcomes = gradcheck::check_loss(kind, opts.gradient_instances, opts.seed)?;
        let worst = outcomes.iter().map(|o| o.max_rel_error).fold(0.0, f64::max);
        let worst_abs = outcomes.iter().map(|o| o.max_abs_error).fold(0.0, f64::max);
        out.push(CheckResult {
            name: format!("gradient {kind}"),
            passed: outcomes.iter().all(|o| o.passed()),
            detail: format!(
                "{} instances, max relative error {worst:.2e}, max absolute error {worst_abs:.2e}",
                outcomes.len()
            ),
        });
    }

    let worst = identity_residual(opts.identity_instances, opts.seed)?;
    out.push(CheckResult {
        name: "poisson/normalized identity".into(),
        passed: worst < IDENTITY_TOLERANCE,
        detail: format!("{} instances, max residual {worst:.2e}", opts.identity_instances),
    });

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for (k, n) in BATCH_PROPERTY_CASES {
        let counts: Vec<f64> = (0..k)
            .map(|_| rng.random_range(0..6) as f64 + crate::train::DEFAULT_DELTA)
            .collect();
        let report = verify_batch_property(k, n, &counts, rng.random())?;
        out.push(CheckResult {
            name: format!("batch property K={k} n={n}"),
            passed: report.max_deviation < BATCH_PROPERTY_TOLERANCE,
            detail: format!(
                "max deviation {:.2e} after {} steps",
                report.max_deviation, report.steps
            ),
        });
    }

    for kind in LossKind::ALL {
        let worst = oracle_residual(kind, opts.oracle_instances, opts.seed)?;
        out.push(CheckResult {
            name: format!("oracle {kind}"),
            passed: worst < ORACLE_TOLERANCE,
            detail: format!("{} instances, max difference {worst:.2e}", opts.oracle_instances),
        });
    }
    Ok(out)
}

fn identity_residual(instances: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let k = rng.random_range(2..=50);
        let n = rng.random_range(1..=10);
        let lambda = Matrix::from_vec(
            k,
            n,
            (0..k * n).map(|_| rng.random_range(-3.0f64..3.0).exp()).collect(),
        )?;
        let y = Matrix::from_vec(k, n, (0..k * n).map(|_| rng.random_range(0.01..5.0)).collect())?;
        worst = worst.max(losses::verify_poisson_maxent_equivalence(&lambda, &y)?.abs());
    }
    Ok(worst)
}

fn oracle_residual(kind: LossKind, instances: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let delta = crate::train::DEFAULT_DELTA;
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let k = rng.random_range(2..=50);
        let n = rng.random_range(1..=10);
        let z = Matrix::from_vec(k, n, (0..k * n).map(|_| rng.random_range(-3.0..3.0)).collect())?;
        let mut y = Matrix::from_vec(
            k,
            n,
            (0..k * n).map(|_| rng.random_range(0..5) as f64).collect(),
        )?;
        if y.sum() == 0.0 {
            y.set(0, 0, 1.0);
        }
        let labels = BatchLabels::new(y.clone(), delta)?;
        let batched = losses::loss_value(&z, &labels, kind)?;
        let direct = oracle_full_loss(&z.map(f64::exp), &y, kind, delta)?;
        worst = worst.max((batched - direct).abs());
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quick_suite_passes() {
        let opts = VerifyOptions {
            gradient_instances: 3,
            identity_instances: 50,
            oracle_instances: 50,
            seed: 3,
        };
        let results = run(&opts).unwrap();
        assert_eq!(results.len(), 5 + 1 + 6 + 5);
        for r in &results {
            assert!(r.passed, "{r:?}");
        }
    }
}
