//! Experiment reports: JSON documents with the config echo, per-seed
//! metrics, cross-seed summary statistics, and the schedule's context
//! profile. Everything except the timestamp and wall time is a pure
//! function of config + seeds.

use crate::config::ExperimentConfig;
use promptlab_core::schedule::ContextProfile;
use promptlab_core::train::Metrics;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub per_class_accuracy: Vec<f64>,
    pub loss_curve: Vec<f64>,
}

impl From<&Metrics> for MetricsReport {
    fn from(m: &Metrics) -> Self {
        MetricsReport {
            accuracy: m.accuracy,
            per_class_accuracy: m.per_class_accuracy.clone(),
            loss_curve: m.loss_curve.clone(),
        }
    }
}

/// Named accuracy surfaces of one seed's run. Which entries appear depends
/// on the protocol: `train` always, `base`/`new` for the class split,
/// `eval` (one per dataset) for cross-dataset transfer, `heldout` for the
/// plain protocol.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub train: MetricsReport,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub base: Option<MetricsReport>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub new: Option<MetricsReport>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub heldout: Option<MetricsReport>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub eval: Vec<MetricsReport>,
}

/// Mean and sample standard deviation of one accuracy surface across seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub surface: String,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerProfileReport {
    pub layer: usize,
    pub context_len: usize,
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileReport {
    pub per_layer: Vec<LayerProfileReport>,
    pub total_flops: u64,
    pub peak_context_len: usize,
}

impl From<&ContextProfile> for ProfileReport {
    fn from(p: &ContextProfile) -> Self {
        ProfileReport {
            per_layer: p
                .per_layer
                .iter()
                .map(|l| LayerProfileReport {
                    layer: l.layer,
                    context_len: l.context_len,
                    flops: l.flops,
                })
                .collect(),
            total_flops: p.total_flops,
            peak_context_len: p.peak_context_len,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    /// The fully resolved config the run used, defaults included.
    pub config: ExperimentConfig,
    pub per_seed: Vec<SeedResult>,
    /// Mean/std per accuracy surface, recomputable from `per_seed`.
    pub summary: Vec<Summary>,
    /// Context lengths and FLOPs of the vision schedule.
    pub context_profile: ProfileReport,
    pub versions: Versions,
    /// Unix seconds when the report was written; excluded from determinism
    /// comparisons along with `wall_time_seconds`.
    pub generated_at: u64,
    pub wall_time_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Versions {
    pub cli: String,
    pub core: String,
    pub report_schema: u32,
}

pub const REPORT_SCHEMA_VERSION: u32 = 1;

impl Versions {
    pub fn current() -> Self {
        Versions {
            cli: env!("CARGO_PKG_VERSION").to_string(),
            core: promptlab_core::VERSION.to_string(),
            report_schema: REPORT_SCHEMA_VERSION,
        }
    }
}

fn mean_and_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Build the summary rows from per-seed results; one row per surface that
/// appears in every seed.
pub fn summarize(per_seed: &[SeedResult]) -> Vec<Summary> {
    let mut rows = Vec::new();
    let mut push = |surface: &str, values: Vec<f64>| {
        if values.len() == per_seed.len() && !values.is_empty() {
            let (mean, std) = mean_and_std(&values);
            rows.push(Summary {
                surface: surface.to_string(),
                mean_accuracy: mean,
                std_accuracy: std,
            });
        }
    };
    push("train", per_seed.iter().map(|s| s.train.accuracy).collect());
    push(
        "base",
        per_seed.iter().filter_map(|s| s.base.as_ref().map(|m| m.accuracy)).collect(),
    );
    push(
        "new",
        per_seed.iter().filter_map(|s| s.new.as_ref().map(|m| m.accuracy)).collect(),
    );
    push(
        "heldout",
        per_seed.iter().filter_map(|s| s.heldout.as_ref().map(|m| m.accuracy)).collect(),
    );
    let eval_count = per_seed.iter().map(|s| s.eval.len()).min().unwrap_or(0);
    for i in 0..eval_count {
        let values: Vec<f64> = per_seed.iter().map(|s| s.eval[i].accuracy).collect();
        let (mean, std) = mean_and_std(&values);
        rows.push(Summary {
            surface: format!("eval.{i}"),
            mean_accuracy: mean,
            std_accuracy: std,
        });
    }
    rows
}

pub fn to_json(report: &Report) -> crate::error::Result<String> {
    serde_json::to_string_pretty(report)
        .map_err(|e| crate::error::CliError::config(e.to_string()))
}

pub fn from_json(text: &str) -> crate::error::Result<Report> {
    serde_json::from_str(text).map_err(|e| crate::error::CliError::config(e.to_string()))
}
