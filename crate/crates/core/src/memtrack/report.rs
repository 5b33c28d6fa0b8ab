use std::fmt::Write as _;

use serde::Serialize;

use super::{Category, CategoryStats, MemoryLedger};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CategoryLine {
    pub category: Category,
    #[serde(flatten)]
    pub stats: CategoryStats,
}

/// Ratios of this run's peaks to a baseline run on the same model and batch.
/// Activation bytes are left out of `model_state_peak_ratio`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BaselineComparison {
    pub baseline: String,
    pub optim_state_ratio: f64,
    pub grad_peak_ratio: f64,
    pub model_state_peak_ratio: f64,
}

/// Snapshot of a tracked run's ledger.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MemoryReport {
    pub method: String,
    pub categories: Vec<CategoryLine>,
    pub total_peak_bytes: usize,
    pub model_state_peak_bytes: usize,
    pub comparison: Option<BaselineComparison>,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        if a == 0 {
            1.0
        } else {
            f64::INFINITY
        }
    } else {
        a as f64 / b as f64
    }
}

impl MemoryReport {
    pub fn from_ledger(method: impl Into<String>, ledger: &MemoryLedger) -> Self {
        let categories = Category::ALL
            .iter()
            .map(|&category| CategoryLine {
                category,
                stats: ledger.stats(category),
            })
            .collect();
        // Per-category peaks may occur at different times; their sum bounds the
        // simultaneous model-state peak from above.
        let model_state_peak_bytes = [Category::Param, Category::Grad, Category::OptimState]
            .iter()
            .map(|&c| ledger.peak_bytes(c))
            .sum();
        MemoryReport {
            method: method.into(),
            categories,
            total_peak_bytes: ledger.total_peak(),
            model_state_peak_bytes,
            comparison: None,
        }
    }

    pub fn stats(&self, category: Category) -> CategoryStats {
        self.categories
            .iter()
            .find(|l| l.category == category)
            .map(|l| l.stats)
            .unwrap_or_default()
    }

    pub fn compare_to(mut self, baseline: &MemoryReport) -> Self {
        self.comparison = Some(BaselineComparison {
            baseline: baseline.method.clone(),
            optim_state_ratio: ratio(
                self.stats(Category::OptimState).peak_bytes,
                baseline.stats(Category::OptimState).peak_bytes,
            ),
            grad_peak_ratio: ratio(
                self.stats(Category::Grad).peak_bytes,
                baseline.stats(Category::Grad).peak_bytes,
            ),
            model_state_peak_ratio: ratio(
                self.model_state_peak_bytes,
                baseline.model_state_peak_bytes,
            ),
        });
        self
    }

    /// `key: value` lines.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "method: {}", self.method);
        for line in &self.categories {
            let c = line.category.name();
            let s = line.stats;
            let _ = writeln!(out, "{c}.live_bytes: {}", s.live_bytes);
            let _ = writeln!(out, "{c}.peak_bytes: {}", s.peak_bytes);
            let _ = writeln!(out, "{c}.peak_count: {}", s.peak_count);
        }
        let _ = writeln!(out, "total_peak_bytes: {}", self.total_peak_bytes);
        let _ = writeln!(out, "model_state_peak_bytes: {}", self.model_state_peak_bytes);
        if let Some(c) = &self.comparison {
            let _ = writeln!(out, "baseline: {}", c.baseline);
            let _ = writeln!(out, "optim_state_ratio: {:.9}", c.optim_state_ratio);
            let _ = writeln!(out, "grad_peak_ratio: {:.9}", c.grad_peak_ratio);
            let _ = writeln!(out, "model_state_peak_ratio: {:.9}", c.model_state_peak_ratio);
        }
        out
    }
}
