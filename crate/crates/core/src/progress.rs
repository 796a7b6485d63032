//! Iteration progress and loss traces shared by the optimizers.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// Receives `(stage, iteration, total_iterations)` as optimizers advance.
pub trait Progress: Send + Sync {
    fn report(&self, stage: &str, iteration: usize, total: usize);
}

impl<F: Fn(&str, usize, usize) + Send + Sync> Progress for F {
    fn report(&self, stage: &str, iteration: usize, total: usize) {
        self(stage, iteration, total)
    }
}

/// Discards all reports.
pub struct Silent;

impl Progress for Silent {
    fn report(&self, _: &str, _: usize, _: usize) {}
}

/// Per-iteration losses of one optimization run. Entry `i` is the loss at
/// the `i`-th iterate (entry 0 is the initialization).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub total: Vec<f64>,
    pub terms: BTreeMap<String, Vec<f64>>,
    pub best_iteration: usize,
}

impl LossTrace {
    pub fn push(&mut self, total: f64, terms: &[(&str, f64)]) {
        self.total.push(total);
        for (name, v) in terms {
            self.terms.entry(name.to_string()).or_default().push(*v);
        }
    }

    pub fn initial(&self) -> f64 {
        self.total.first().copied().unwrap_or(f64::NAN)
    }

    pub fn best(&self) -> f64 {
        self.total.get(self.best_iteration).copied().unwrap_or(f64::NAN)
    }

    pub fn term(&self, name: &str) -> &[f64] {
        self.terms.get(name).map(Vec::as_slice).unwrap_or(&[])
    }
}
