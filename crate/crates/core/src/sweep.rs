//! Ablation sweeps: one full run per setting along a single axis.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backends::BackendSet;
use crate::config::PipelineConfig;
use crate::evaluation::EvaluationReport;
use crate::manifest::Dataset;
use crate::pipeline::{run_stages, PipelineError, RunOptions};
use crate::scoring::PromptVariant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    K,
    Tn,
    Prompt,
    Components,
}

impl FromStr for SweepAxis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "k" => Ok(SweepAxis::K),
            "tn" => Ok(SweepAxis::Tn),
            "prompt" => Ok(SweepAxis::Prompt),
            "components" => Ok(SweepAxis::Components),
            other => Err(format!("unknown sweep axis `{other}` (expected k, tn, prompt or components)")),
        }
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepAxis::K => "k",
            SweepAxis::Tn => "tn",
            SweepAxis::Prompt => "prompt",
            SweepAxis::Components => "components",
        })
    }
}

pub const K_VALUES: [usize; 6] = [1, 3, 5, 7, 9, 10];

/// `(window_seconds, frames_per_window)` rows.
pub const TN_VALUES: [(f64, usize); 6] = [(2.5, 10), (5.0, 10), (10.0, 10), (20.0, 10), (10.0, 5), (10.0, 20)];

/// Named configurations for every setting along `axis`, derived from `base`.
pub fn settings(base: &PipelineConfig, axis: SweepAxis) -> Vec<(String, PipelineConfig)> {
    let with = |f: &dyn Fn(&mut PipelineConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    match axis {
        SweepAxis::K => K_VALUES
            .iter()
            .map(|&k| (format!("K={k}"), with(&|c| c.neighbors = k)))
            .collect(),
        SweepAxis::Tn => TN_VALUES
            .iter()
            .map(|&(t, n)| (format!("T={t} N={n}"), with(&|c| {
                c.window_seconds = t;
                c.frames_per_window = n;
            })))
            .collect(),
        SweepAxis::Prompt => PromptVariant::all()
            .iter()
            .map(|v| {
                let b = |x: bool| if x { "on" } else { "off" };
                (
                    format!("impersonation={} anomaly_prior={}", b(v.impersonation), b(v.anomaly_prior)),
                    with(&|c| {
                        c.impersonation = v.impersonation;
                        c.anomaly_prior = v.anomaly_prior;
                    }),
                )
            })
            .collect(),
        SweepAxis::Components => {
            let plain = with(&|c| {
                c.skip_cleaning = false;
                c.skip_summary = false;
                c.skip_refinement = false;
            });
            let off = |f: &dyn Fn(&mut PipelineConfig)| {
                let mut c = plain.clone();
                f(&mut c);
                c
            };
            vec![
                ("skip-cleaning".to_string(), off(&|c| c.skip_cleaning = true)),
                ("skip-summary".to_string(), off(&|c| c.skip_summary = true)),
                ("skip-refinement".to_string(), off(&|c| c.skip_refinement = true)),
                ("full".to_string(), plain.clone()),
            ]
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub axis: SweepAxis,
    pub reports: Vec<EvaluationReport>,
}

/// Runs every setting along `axis`. Settings share upstream stage caches
/// wherever their fingerprints agree.
pub fn ablation_sweep(
    dataset: &Dataset,
    base: &PipelineConfig,
    backends: &BackendSet,
    axis: SweepAxis,
    force: bool,
) -> Result<SweepTable, PipelineError> {
    let mut reports = Vec::new();
    for (label, cfg) in settings(base, axis) {
        log::info!("sweep {axis}: {label}");
        let outcome = run_stages(
            dataset,
            &cfg,
            backends,
            &RunOptions {
                force,
                stop_after: None,
                label: Some(label),
            },
        )?;
        reports.push(outcome.report.expect("full run"));
    }
    Ok(SweepTable { axis, reports })
}
