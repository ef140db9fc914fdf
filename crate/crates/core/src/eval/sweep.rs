//! Metric sweeps over perturbation radii.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::{worst_case_hazard, PerturbationSet};
use crate::data::SurvivalDataset;
use crate::error::{Error, Result};
use crate::eval::metrics::{concordance_index, ibs_grid, integrated_brier_hazards, negll_metric};
use crate::nn::Network;
use crate::objectives::{fgsm_perturb, Batch, LossParams, StepRule};
use crate::survival::{
    hazard, km_estimator, population_curve_from_outputs, survival_quantiles_from_outputs, time_grid, SampledCurve,
    StepCurve,
};

/// Radii evaluated by default, ascending.
pub const DEFAULT_EPS_GRID: [f64; 12] = [0.0, 0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0];

/// Integration points of the IBS grid.
pub const IBS_GRID_POINTS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Attack {
    /// Hazards at FGSM-perturbed covariates.
    Fgsm,
    /// Certified maximum hazard over the ball.
    #[serde(rename = "worstcase")]
    WorstCase,
}

impl Attack {
    pub fn as_str(&self) -> &'static str {
        match self {
            Attack::Fgsm => "fgsm",
            Attack::WorstCase => "worstcase",
        }
    }
}

impl fmt::Display for Attack {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Attack {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fgsm" => Ok(Attack::Fgsm),
            "worstcase" => Ok(Attack::WorstCase),
            _ => Err(Error::Config(format!("unknown attack {s:?} (expected fgsm|worstcase)"))),
        }
    }
}

/// One evaluated (dataset, method, attack, ε) cell. A set flag means the
/// metric could not be computed (overflow or undefined) and the value is a
/// placeholder: `NaN` for CI, `+inf` for IBS and NegLL.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub dataset: String,
    pub method: String,
    pub attack: Attack,
    pub eps: f64,
    pub ci: f64,
    pub ibs: f64,
    pub negll: f64,
    pub ci_flag: bool,
    pub ibs_flag: bool,
    pub negll_flag: bool,
    pub seed: u64,
}

/// Checks that every radius is on the declared grid.
pub fn validate_eps_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::Config("eps grid must not be empty".into()));
    }
    for &e in grid {
        if !DEFAULT_EPS_GRID.iter().any(|&d| (d - e).abs() < 1e-12) {
            return Err(Error::Config(format!(
                "eps {e} is not on the evaluation grid {DEFAULT_EPS_GRID:?}"
            )));
        }
    }
    Ok(())
}

/// Parses a comma-separated list of radii.
pub fn parse_eps_grid(text: &str) -> Result<Vec<f64>> {
    let grid = text
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("eps grid entry {s:?} is not a number")))
        })
        .collect::<Result<Vec<_>>>()?;
    validate_eps_grid(&grid)?;
    Ok(grid)
}

/// Settings shared by every cell of a sweep.
#[derive(Debug, Clone)]
pub struct SweepConfig {
    pub dataset: String,
    pub method: String,
    pub seed: u64,
    /// Loss used to craft FGSM perturbations.
    pub loss_params: LossParams,
    pub step_rule: StepRule,
    /// Emit population, quantile and Kaplan-Meier curves.
    pub curves: bool,
}

/// Per-record hazards of `net` on `test` under `attack` at radius `eps`.
pub fn attacked_hazards(
    net: &Network,
    test: &SurvivalDataset,
    attack: Attack,
    eps: f64,
    params: LossParams,
    rule: StepRule,
) -> Result<Vec<f64>> {
    let batch = Batch::full(test)?;
    match attack {
        Attack::Fgsm => {
            let perturbed = fgsm_perturb(net, &batch, eps, params, rule)?.batch;
            (0..perturbed.len())
                .map(|i| net.forward(perturbed.row(i)).map(hazard))
                .collect()
        }
        Attack::WorstCase => (0..batch.len())
            .map(|i| {
                let set = PerturbationSet::new(batch.row(i), eps)?;
                Ok(worst_case_hazard(net, &set)?.value)
            })
            .collect(),
    }
}

/// Named curves emitted by a sweep.
#[derive(Debug, Clone, Default)]
pub struct SweepCurves {
    pub curves: Vec<(String, SampledCurve)>,
    pub km: Option<StepCurve>,
}

#[derive(Debug, Clone)]
pub struct SweepOutput {
    pub records: Vec<MetricRecord>,
    pub curves: SweepCurves,
    /// Largest number of records excluded from any Brier evaluation.
    pub brier_exclusions: usize,
}

fn cell(
    net: &Network,
    test: &SurvivalDataset,
    censor_km: &StepCurve,
    attack: Attack,
    eps: f64,
    cfg: &SweepConfig,
) -> Result<(MetricRecord, Vec<f64>, usize)> {
    let hazards = attacked_hazards(net, test, attack, eps, cfg.loss_params, cfg.step_rule)?;
    let grid = ibs_grid(test.max_time(), IBS_GRID_POINTS);
    let (ci, ci_flag) = match concordance_index(&hazards, &test.time, &test.event) {
        Ok(c) => (c, false),
        Err(Error::UndefinedMetric(_)) => (f64::NAN, true),
        Err(e) => return Err(e),
    };
    let (ibs, ibs_flag, excluded) = match integrated_brier_hazards(&hazards, &test.time, &test.event, censor_km, &grid)
    {
        Ok(b) if b.value.is_finite() => (b.value, false, b.excluded),
        Ok(b) => (f64::INFINITY, true, b.excluded),
        Err(Error::UndefinedMetric(_)) => (f64::INFINITY, true, test.len()),
        Err(e) => return Err(e),
    };
    let nll = negll_metric(&hazards, &test.time, &test.event)?;
    Ok((
        MetricRecord {
            dataset: cfg.dataset.clone(),
            method: cfg.method.clone(),
            attack,
            eps,
            ci,
            ibs,
            negll: nll.value,
            ci_flag,
            ibs_flag,
            negll_flag: nll.overflow,
            seed: cfg.seed,
        },
        hazards,
        excluded,
    ))
}

/// Evaluates CI, IBS and NegLL of `net` on `test` for every radius in
/// `eps_grid`. `censor_km` is the censoring Kaplan-Meier of the training
/// split. Cells run in parallel on the current rayon pool; output order
/// follows `eps_grid`.
pub fn attack_sweep(
    net: &Network,
    test: &SurvivalDataset,
    censor_km: &StepCurve,
    attack: Attack,
    eps_grid: &[f64],
    cfg: &SweepConfig,
) -> Result<SweepOutput> {
    validate_eps_grid(eps_grid)?;
    if test.dim() != net.input_dim() {
        return Err(Error::Codec(format!(
            "dataset encodes {} features but the model expects {}",
            test.dim(),
            net.input_dim()
        )));
    }
    let cells = eps_grid
        .par_iter()
        .map(|&eps| cell(net, test, censor_km, attack, eps, cfg))
        .collect::<Result<Vec<_>>>()?;

    let mut curves = SweepCurves::default();
    if cfg.curves {
        let grid = time_grid(test.max_time(), crate::survival::DEFAULT_GRID_POINTS);
        for ((_, hazards, _), &eps) in cells.iter().zip(eps_grid) {
            let gs: Vec<f64> = hazards.iter().map(|h| h.ln()).collect();
            let tag = format!("{attack}_eps{eps:.2}");
            curves
                .curves
                .push((format!("population_{tag}"), population_curve_from_outputs(&gs, &grid)?));
            let (lo, hi) = survival_quantiles_from_outputs(&gs, &grid, 0.05, 0.95)?;
            curves.curves.push((format!("quantile05_{tag}"), lo));
            curves.curves.push((format!("quantile95_{tag}"), hi));
        }
        curves.km = Some(km_estimator(&test.time, &test.event)?);
    }
    let brier_exclusions = cells.iter().map(|c| c.2).max().unwrap_or(0);
    Ok(SweepOutput {
        records: cells.into_iter().map(|c| c.0).collect(),
        curves,
        brier_exclusions,
    })
}

/// Kaplan-Meier of the censoring distribution (`1 - e` as the event).
pub fn censoring_km(train: &SurvivalDataset) -> Result<StepCurve> {
    let flipped: Vec<bool> = train.event.iter().map(|e| !e).collect();
    km_estimator(&train.time, &flipped)
}
