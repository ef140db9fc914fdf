//! Exponential proportional-hazards distribution functions.
//!
//! With network output `G`, the hazard is the constant `exp(G)` and the
//! survival function is `S(t) = exp(-exp(G) t)`. The baseline hazard is folded
//! into the output bias. Likelihood terms are computed in log space.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::nn::{Matrix, Network};

/// One right-censored observation. `event == true` means the event was seen
/// at `time`; otherwise `time` is the censoring time.
#[derive(Debug, Clone, PartialEq)]
pub struct SurvRecord {
    pub x: Vec<f64>,
    pub time: f64,
    pub event: bool,
}

impl SurvRecord {
    pub fn new(x: Vec<f64>, time: f64, event: bool) -> Result<Self> {
        if !(time > 0.0) || !time.is_finite() {
            return Err(Error::Domain(format!("time must be positive and finite, got {time}")));
        }
        Ok(Self { x, time, event })
    }
}

/// `exp(G)`; overflows to `+inf`.
#[inline]
pub fn hazard(g: f64) -> f64 {
    g.exp()
}

fn check_time(t: f64, allow_zero: bool) -> Result<()> {
    let ok = if allow_zero { t >= 0.0 } else { t > 0.0 };
    if !ok || t.is_nan() {
        return Err(Error::Domain(format!(
            "time must be {}, got {t}",
            if allow_zero { ">= 0" } else { "> 0" }
        )));
    }
    Ok(())
}

/// Cumulative hazard `exp(G) t`, with `t = 0` mapping to 0 even when the
/// hazard overflows.
#[inline]
pub(crate) fn cum_hazard(g: f64, t: f64) -> f64 {
    if t == 0.0 {
        0.0
    } else {
        hazard(g) * t
    }
}

pub fn survival(g: f64, t: f64) -> Result<f64> {
    check_time(t, true)?;
    Ok((-cum_hazard(g, t)).exp())
}

pub fn log_survival(g: f64, t: f64) -> Result<f64> {
    check_time(t, true)?;
    Ok(-cum_hazard(g, t))
}

/// `log f(t) = G - exp(G) t`
pub fn log_pdf(g: f64, t: f64) -> Result<f64> {
    check_time(t, false)?;
    Ok(g - cum_hazard(g, t))
}

/// `F(t) = 1 - S(t)`, evaluated without cancellation for small hazards.
pub fn cdf(g: f64, t: f64) -> Result<f64> {
    check_time(t, true)?;
    Ok(-(-cum_hazard(g, t)).exp_m1())
}

/// Curve values on an explicit time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledCurve {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

impl SampledCurve {
    /// Two-column `time,survival` CSV.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("time,survival\n");
        for (t, v) in self.times.iter().zip(&self.values) {
            let _ = writeln!(out, "{t},{v}");
        }
        out
    }
}

/// `n` equally spaced points from 0 to `max_time` inclusive.
pub fn time_grid(max_time: f64, n: usize) -> Vec<f64> {
    if n < 2 {
        return vec![max_time];
    }
    (0..n)
        .map(|i| max_time * i as f64 / (n - 1) as f64)
        .collect()
}

pub const DEFAULT_GRID_POINTS: usize = 100;

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.iter().any(|&t| !(t >= 0.0)) {
        return Err(Error::Domain("time grid must be nonnegative".into()));
    }
    if grid.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::Domain("time grid must be sorted ascending".into()));
    }
    Ok(())
}

/// Network outputs for every row of `x`.
pub fn outputs(net: &Network, x: &Matrix) -> Result<Vec<f64>> {
    (0..x.rows()).map(|r| net.forward(x.row(r))).collect()
}

/// Survival curve of a single instance on `grid`.
pub fn instance_curve(g: f64, grid: &[f64]) -> Result<SampledCurve> {
    check_grid(grid)?;
    Ok(SampledCurve {
        times: grid.to_vec(),
        values: grid.iter().map(|&t| (-cum_hazard(g, t)).exp()).collect(),
    })
}

/// Dataset average of instance survival curves.
pub fn population_curve_from_outputs(gs: &[f64], grid: &[f64]) -> Result<SampledCurve> {
    check_grid(grid)?;
    if gs.is_empty() {
        return Err(Error::Domain("population curve needs at least one instance".into()));
    }
    let n = gs.len() as f64;
    let values = grid
        .iter()
        .map(|&t| gs.iter().map(|&g| (-cum_hazard(g, t)).exp()).sum::<f64>() / n)
        .collect();
    Ok(SampledCurve {
        times: grid.to_vec(),
        values,
    })
}

pub fn population_curve(net: &Network, x: &Matrix, grid: &[f64]) -> Result<SampledCurve> {
    if x.rows() == 0 {
        return Err(Error::Domain("population curve needs at least one instance".into()));
    }
    population_curve_from_outputs(&outputs(net, x)?, grid)
}

/// Index (0-based, ascending order) of the empirical `q`-quantile: the
/// smallest order statistic whose empirical CDF reaches `q`.
pub(crate) fn quantile_rank(n: usize, q: f64) -> usize {
    // q * n lands a hair above an integer for q like 0.05
    let k = (q * n as f64 - 1e-9).ceil() as usize;
    k.clamp(1, n) - 1
}

/// Pointwise empirical quantile curves of the instance survival curves.
///
/// Survival is decreasing in `G`, so the `q` survival quantile at every time
/// is the curve of the instance whose output is the `q`-th largest; the
/// curves are therefore evaluated on two fixed instances.
pub fn survival_quantiles_from_outputs(
    gs: &[f64],
    grid: &[f64],
    q_lo: f64,
    q_hi: f64,
) -> Result<(SampledCurve, SampledCurve)> {
    check_grid(grid)?;
    if gs.is_empty() {
        return Err(Error::Domain("quantiles need at least one instance".into()));
    }
    if !(0.0..=1.0).contains(&q_lo) || !(0.0..=1.0).contains(&q_hi) {
        return Err(Error::Domain("quantile levels must lie in [0, 1]".into()));
    }
    let mut desc = gs.to_vec();
    desc.sort_by(|a, b| b.total_cmp(a));
    let pick = |q: f64| desc[quantile_rank(desc.len(), q)];
    Ok((instance_curve(pick(q_lo), grid)?, instance_curve(pick(q_hi), grid)?))
}

pub fn survival_quantiles(
    net: &Network,
    x: &Matrix,
    grid: &[f64],
    q_lo: f64,
    q_hi: f64,
) -> Result<(SampledCurve, SampledCurve)> {
    survival_quantiles_from_outputs(&outputs(net, x)?, grid, q_lo, q_hi)
}

/// Right-continuous step function starting at 1 at time 0. `values[i]` holds
/// on `[times[i], times[i + 1])`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepCurve {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

impl StepCurve {
    /// `S(t)`
    pub fn eval(&self, t: f64) -> f64 {
        let idx = self.times.partition_point(|&s| s <= t);
        if idx == 0 {
            1.0
        } else {
            self.values[idx - 1]
        }
    }

    /// Left limit `S(t-)`.
    pub fn eval_left(&self, t: f64) -> f64 {
        let idx = self.times.partition_point(|&s| s < t);
        if idx == 0 {
            1.0
        } else {
            self.values[idx - 1]
        }
    }

    pub fn sample(&self, grid: &[f64]) -> SampledCurve {
        SampledCurve {
            times: grid.to_vec(),
            values: grid.iter().map(|&t| self.eval(t)).collect(),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("time,survival\n0,1\n");
        for (t, v) in self.times.iter().zip(&self.values) {
            let _ = writeln!(out, "{t},{v}");
        }
        out
    }
}

/// Kaplan-Meier product-limit estimate. At tied times events are counted
/// before censorings, so a censoring at `t` is still at risk for events at `t`.
pub fn km_estimator(times: &[f64], events: &[bool]) -> Result<StepCurve> {
    if times.len() != events.len() {
        return Err(Error::Shape {
            expected: times.len(),
            got: events.len(),
        });
    }
    if times.is_empty() {
        return Err(Error::Domain("Kaplan-Meier needs at least one observation".into()));
    }
    if times.iter().any(|&t| !(t > 0.0)) {
        return Err(Error::Domain("Kaplan-Meier times must be positive".into()));
    }
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));

    let mut at_risk = times.len();
    let mut surv = 1.0;
    let mut out = StepCurve {
        times: Vec::new(),
        values: Vec::new(),
    };
    let mut i = 0;
    while i < order.len() {
        let t = times[order[i]];
        let mut deaths = 0;
        let mut leaving = 0;
        while i < order.len() && times[order[i]] == t {
            deaths += usize::from(events[order[i]]);
            leaving += 1;
            i += 1;
        }
        if deaths > 0 {
            surv *= 1.0 - deaths as f64 / at_risk as f64;
            out.times.push(t);
            out.values.push(surv);
        }
        at_risk -= leaving;
    }
    Ok(out)
}
