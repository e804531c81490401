use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{CliResult, RunConfig};
use crate::interpret::CounterfactualKind;
use crate::metrics::EvalReport;

/// Axis swept by `ablate`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum AblationGrid {
    /// Quantization levels 50, 100, 150, 200, 250.
    V,
    /// Segment lengths 1000, 2000, 3000, 4000.
    M,
    /// Loss weights (1,0), (0,1), (1,1).
    Loss,
    /// Counterfactual kind used during training.
    Cf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationEntry {
    pub grid: AblationGrid,
    pub label: String,
    pub config: RunConfig,
    pub report: EvalReport,
    /// Test-set MSE of always predicting the most frequent training level.
    pub baseline_mse: Option<f64>,
    pub final_total_loss: Option<f64>,
}

/// The configurations of one sweep, each labelled.
pub fn ablation_grid(base: &RunConfig, grid: AblationGrid) -> Vec<(String, RunConfig)> {
    let with = |f: &dyn Fn(&mut RunConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    match grid {
        AblationGrid::V => [50, 100, 150, 200, 250]
            .into_iter()
            .map(|v| (format!("v{v}"), with(&|c| c.levels = v)))
            .collect(),
        AblationGrid::M => [1000, 2000, 3000, 4000]
            .into_iter()
            .map(|m| (format!("m{m}"), with(&|c| c.segment_length = m)))
            .collect(),
        AblationGrid::Loss => [(1.0, 0.0), (0.0, 1.0), (1.0, 1.0)]
            .into_iter()
            .map(|(a1, a2)| {
                (
                    format!("alpha{a1}_{a2}"),
                    with(&|c| {
                        c.train.alpha1 = a1;
                        c.train.alpha2 = a2;
                    }),
                )
            })
            .collect(),
        AblationGrid::Cf => [
            ("none", CounterfactualKind::None),
            ("substitution", CounterfactualKind::Substitution),
            ("addition", CounterfactualKind::Addition),
            ("label_flip", CounterfactualKind::LabelFlip),
        ]
        .into_iter()
        .map(|(name, k)| (format!("cf_{name}"), with(&|c| c.train.counterfactual_kind = k)))
        .collect(),
    }
}

/// Trains and evaluates every configuration of the sweep, in grid order.
pub fn run_ablation(base: &RunConfig, grid: AblationGrid) -> CliResult<Vec<AblationEntry>> {
    ablation_grid(base, grid)
        .into_iter()
        .map(|(label, config)| {
            let outcome = config.experiment()?.run()?;
            Ok(AblationEntry {
                grid,
                label,
                report: outcome.test_report,
                baseline_mse: outcome.baseline.mse(),
                final_total_loss: outcome.training.history.last().map(|h| h.total),
                config,
            })
        })
        .collect()
}

pub fn summary_csv(entries: &[AblationEntry]) -> String {
    let opt = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
    let mut out = String::from("label,sensitivity,specificity,ppv,npv,accuracy,mse,mae,baseline_mse\n");
    for e in entries {
        let r = &e.report;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            e.label,
            opt(r.sensitivity),
            opt(r.specificity),
            opt(r.ppv),
            opt(r.npv),
            opt(r.accuracy),
            opt(r.mse),
            opt(r.mae),
            opt(e.baseline_mse)
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_shapes() {
        let base = RunConfig::default();
        assert_eq!(ablation_grid(&base, AblationGrid::V).len(), 5);
        assert_eq!(ablation_grid(&base, AblationGrid::M).len(), 4);
        assert_eq!(ablation_grid(&base, AblationGrid::Loss).len(), 3);
        assert_eq!(ablation_grid(&base, AblationGrid::Cf).len(), 4);
        let v: Vec<usize> = ablation_grid(&base, AblationGrid::V).iter().map(|(_, c)| c.levels).collect();
        assert_eq!(v, vec![50, 100, 150, 200, 250]);
        let loss = ablation_grid(&base, AblationGrid::Loss);
        assert_eq!((loss[1].1.train.alpha1, loss[1].1.train.alpha2), (0.0, 1.0));
    }
}
