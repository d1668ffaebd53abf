use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::RunConfig;
use crate::selection::Restriction;
use crate::taxonomy::{DatasetKind, TaxonomyLevel};

/// Accuracy of one restriction under one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRow {
    pub restriction: Restriction,
    pub label: String,
    pub seed: u64,
    pub correct: usize,
    pub valid_count: usize,
    /// `None` when no instance was valid.
    pub accuracy: Option<f64>,
}

impl SeedRow {
    pub fn new(
        dataset: DatasetKind,
        restriction: Restriction,
        seed: u64,
        correct: usize,
        valid_count: usize,
    ) -> Self {
        Self {
            restriction,
            label: restriction.label(dataset),
            seed,
            correct,
            valid_count,
            accuracy: (valid_count > 0).then(|| correct as f64 / valid_count as f64),
        }
    }
}

/// Mean and spread of one restriction across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub restriction: Restriction,
    pub label: String,
    pub proximal: bool,
    pub mean_accuracy: Option<f64>,
    pub std_accuracy: Option<f64>,
    /// Seeds that contributed a defined accuracy.
    pub seeds_counted: usize,
    pub mean_valid: f64,
    pub std_valid: f64,
}

/// How often `[NAME]` templates could not be bound, per seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NameBindingRow {
    pub seed: u64,
    pub instances_affected: usize,
    pub templates_skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: DatasetKind,
    pub dataset_level: TaxonomyLevel,
    pub proximal_restriction: Option<Restriction>,
    pub total_instances: usize,
    pub config: serde_json::Value,
    pub per_seed: Vec<SeedRow>,
    pub aggregates: Vec<AggregateRow>,
    pub name_binding: Vec<NameBindingRow>,
}

/// Mean and sample standard deviation; the deviation is 0 for one value.
///
/// Deviations are taken from the first value before averaging, so equal
/// inputs give back exactly that value and a deviation of exactly 0.
pub fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    let (&first, _) = values.split_first()?;
    let n = values.len() as f64;
    let mean = first + values.iter().map(|v| v - first).sum::<f64>() / n;
    if values.len() < 2 {
        return Some((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Some((mean, var.sqrt()))
}

impl EvalReport {
    pub fn build(
        config: &RunConfig,
        total_instances: usize,
        per_seed: Vec<SeedRow>,
        name_binding: Vec<NameBindingRow>,
    ) -> Self {
        let proximal = config.proximal_restriction();
        let aggregates = config
            .levels
            .iter()
            .map(|restriction| {
                let rows: Vec<&SeedRow> =
                    per_seed.iter().filter(|r| r.restriction == *restriction).collect();
                let accuracies: Vec<f64> = rows.iter().filter_map(|r| r.accuracy).collect();
                let valid: Vec<f64> = rows.iter().map(|r| r.valid_count as f64).collect();
                let accuracy = mean_std(&accuracies);
                let (mean_valid, std_valid) = mean_std(&valid).unwrap_or((0.0, 0.0));
                AggregateRow {
                    restriction: *restriction,
                    label: restriction.label(config.dataset),
                    proximal: proximal == Some(*restriction),
                    mean_accuracy: accuracy.map(|a| a.0),
                    std_accuracy: accuracy.map(|a| a.1),
                    seeds_counted: accuracies.len(),
                    mean_valid,
                    std_valid,
                }
            })
            .collect();
        Self {
            dataset: config.dataset,
            dataset_level: config.dataset.dataset_level(),
            proximal_restriction: proximal,
            total_instances,
            config: serde_json::to_value(config).expect("config serializes"),
            per_seed,
            aggregates,
            name_binding,
        }
    }

    pub fn aggregate(&self, restriction: Restriction) -> Option<&AggregateRow> {
        self.aggregates.iter().find(|a| a.restriction == restriction)
    }

    pub fn to_json(&self) -> String {
        let mut out = serde_json::to_string_pretty(self).expect("report serializes");
        out.push('\n');
        out
    }

    /// Aligned table: one row per restriction with mean ± std accuracy in
    /// percent, the proximal row starred.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let valid = self
            .aggregates
            .first()
            .map(|a| format!("{:.0}±{:.0} valid", a.mean_valid, a.std_valid))
            .unwrap_or_default();
        let seeds: Vec<String> = {
            let mut s: Vec<u64> = self.per_seed.iter().map(|r| r.seed).collect();
            s.dedup();
            s.iter().map(u64::to_string).collect()
        };
        let _ = writeln!(
            out,
            "{} ({} total) ({}: {})  ({valid})  seeds: {}",
            self.dataset,
            self.total_instances,
            self.dataset_level.value(),
            self.dataset_level.name(),
            seeds.join(",")
        );
        let width = self
            .aggregates
            .iter()
            .map(|a| a.label.len() + 1)
            .max()
            .unwrap_or(5)
            .max(5);
        let _ = writeln!(out, "{:<width$}  Accuracy", "Level");
        for row in &self.aggregates {
            let label = if row.proximal {
                format!("{}*", row.label)
            } else {
                row.label.clone()
            };
            let accuracy = match (row.mean_accuracy, row.std_accuracy) {
                (Some(mean), Some(std)) => format!("{:.2} ± {:.2}", mean * 100.0, std * 100.0),
                _ => "n/a".to_string(),
            };
            let _ = writeln!(out, "{label:<width$}  {accuracy}");
        }
        let _ = writeln!(out, "* = level of proximal context");
        out
    }
}
