//! Runtime verification suites behind `dksg selftest` and the acceptance
//! tests: oracle comparisons, structural invariants and worked examples.

mod criteria;
mod examples;

pub use criteria::{
    counts_from_row, dice_iou_feasible, equation_oracles, metric_oracle, structural_invariants, ORACLE_TOL,
    PUBLISHED_CVC, PUBLISHED_KVASIR,
};
pub use examples::examples;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl std::fmt::Display for Check {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let status = if self.passed { "PASS" } else { "FAIL" };
        if self.detail.is_empty() {
            write!(f, "{status} {}", self.name)
        } else {
            write!(f, "{status} {}: {}", self.name, self.detail)
        }
    }
}

/// Collects checks; a check that returns an error counts as failed.
#[derive(Default)]
pub(crate) struct Suite {
    pub checks: Vec<Check>,
}

impl Suite {
    pub fn check(&mut self, name: &str, f: impl FnOnce() -> Result<(bool, String)>) {
        let (passed, detail) = match f() {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        self.checks.push(Check { name: name.to_string(), passed, detail });
    }

    /// A check that is a plain boolean.
    pub fn expect(&mut self, name: &str, f: impl FnOnce() -> Result<bool>) {
        self.check(name, || Ok((f()?, String::new())));
    }
}

/// Every suite, in a fixed order.
pub fn run_all(seed: u64) -> Vec<Check> {
    let mut all = examples(seed);
    all.extend(equation_oracles(100, seed));
    all.extend(structural_invariants(seed));
    all.extend(metric_oracle(seed).into_iter().filter(|c| !c.name.starts_with("published_row")));
    all
}

pub(crate) fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f32> {
    Tensor::uniform(shape.to_vec(), -1.0, 1.0, rng)
}

pub(crate) fn rand_bits(rng: &mut ChaCha8Rng, n: usize, p: f64) -> Vec<bool> {
    (0..n).map(|_| rng.gen_bool(p)).collect()
}

pub(crate) fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
