//! Survival metrics: Harrell's concordance, IPCW Brier score and its time
//! integral, and the negative log-likelihood of predicted hazards.

use crate::error::{Error, Result};
use crate::survival::StepCurve;

fn check_lengths(a: usize, times: &[f64], events: &[bool]) -> Result<()> {
    if a != times.len() || a != events.len() {
        return Err(Error::Shape {
            expected: times.len(),
            got: a.min(events.len()),
        });
    }
    Ok(())
}

/// Harrell's C over pairs with `t_i < t_j` and `e_i = 1`: concordant when
/// `risk_i > risk_j`, half credit for tied risks.
pub fn concordance_index(risks: &[f64], times: &[f64], events: &[bool]) -> Result<f64> {
    check_lengths(risks.len(), times, events)?;
    if risks.iter().any(|r| r.is_nan()) {
        return Err(Error::Input("risk scores must not be NaN".into()));
    }
    // counted in half-units so the ratio is exact
    let mut credit: u64 = 0;
    let mut pairs: u64 = 0;
    for i in 0..risks.len() {
        if !events[i] {
            continue;
        }
        for j in 0..risks.len() {
            if times[i] < times[j] {
                pairs += 1;
                if risks[i] > risks[j] {
                    credit += 2;
                } else if risks[i] == risks[j] {
                    credit += 1;
                }
            }
        }
    }
    if pairs == 0 {
        return Err(Error::UndefinedMetric("concordance index: no comparable pairs".into()));
    }
    Ok(credit as f64 / (2 * pairs) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BrierScore {
    pub value: f64,
    /// Records dropped because the censoring survival was zero where needed.
    pub excluded: usize,
}

/// Inverse-probability-of-censoring weighted Brier score at `tau`.
///
/// `surv[i]` is the predicted `S(tau | x_i)`; `censor_km` estimates the
/// censoring survival `G` and is fitted on the training split.
pub fn brier_ipcw(surv: &[f64], times: &[f64], events: &[bool], censor_km: &StepCurve, tau: f64) -> Result<BrierScore> {
    check_lengths(surv.len(), times, events)?;
    let mut total = 0.0;
    let mut included = 0usize;
    let mut excluded = 0usize;
    let g_tau = censor_km.eval(tau);
    for i in 0..surv.len() {
        let s = surv[i];
        if times[i] <= tau {
            if events[i] {
                let g = censor_km.eval_left(times[i]);
                if g > 0.0 {
                    total += s * s / g;
                    included += 1;
                } else {
                    excluded += 1;
                }
            } else {
                // censored before tau: zero weight, still in the average
                included += 1;
            }
        } else if g_tau > 0.0 {
            total += (1.0 - s) * (1.0 - s) / g_tau;
            included += 1;
        } else {
            excluded += 1;
        }
    }
    if included == 0 {
        return Err(Error::UndefinedMetric(format!("Brier score at {tau}: every record excluded")));
    }
    Ok(BrierScore {
        value: total / included as f64,
        excluded,
    })
}

/// `n` evenly spaced points on `(0, max_time]`.
pub fn ibs_grid(max_time: f64, n: usize) -> Vec<f64> {
    (1..=n).map(|k| max_time * k as f64 / n as f64).collect()
}

/// Trapezoidal integral of the Brier score over `grid` divided by the grid
/// span. `surv_at(i, t)` is the predicted survival of record `i` at `t`.
pub fn integrated_brier(
    surv_at: impl Fn(usize, f64) -> f64,
    times: &[f64],
    events: &[bool],
    censor_km: &StepCurve,
    grid: &[f64],
) -> Result<BrierScore> {
    if grid.len() < 2 {
        return Err(Error::Domain("integration grid needs at least two points".into()));
    }
    if grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Domain("integration grid must be strictly ascending".into()));
    }
    let n = times.len();
    let mut scores = Vec::with_capacity(grid.len());
    let mut excluded = 0;
    for &tau in grid {
        let surv: Vec<f64> = (0..n).map(|i| surv_at(i, tau)).collect();
        let b = brier_ipcw(&surv, times, events, censor_km, tau)?;
        excluded = excluded.max(b.excluded);
        scores.push(b.value);
    }
    let mut area = 0.0;
    for k in 1..grid.len() {
        area += 0.5 * (scores[k] + scores[k - 1]) * (grid[k] - grid[k - 1]);
    }
    Ok(BrierScore {
        value: area / (grid[grid.len() - 1] - grid[0]),
        excluded,
    })
}

/// IBS of an exponential model with per-record hazards.
pub fn integrated_brier_hazards(
    hazards: &[f64],
    times: &[f64],
    events: &[bool],
    censor_km: &StepCurve,
    grid: &[f64],
) -> Result<BrierScore> {
    check_lengths(hazards.len(), times, events)?;
    integrated_brier(|i, t| exp_survival(hazards[i], t), times, events, censor_km, grid)
}

fn exp_survival(hazard: f64, t: f64) -> f64 {
    if t == 0.0 {
        1.0
    } else {
        (-hazard * t).exp()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NegLl {
    pub value: f64,
    /// A hazard (or `hazard * t`) was infinite; `value` is `+inf`.
    pub overflow: bool,
}

/// `-Σ e_i (log λ_i - λ_i t_i) + (1 - e_i)(-λ_i t_i)`; infinite hazards are
/// flagged rather than reported as a number.
pub fn negll_metric(hazards: &[f64], times: &[f64], events: &[bool]) -> Result<NegLl> {
    check_lengths(hazards.len(), times, events)?;
    let mut total = 0.0;
    for i in 0..hazards.len() {
        let lam = hazards[i];
        if lam.is_nan() || lam < 0.0 {
            return Err(Error::Input(format!("hazard must be >= 0, got {lam}")));
        }
        let cum = lam * times[i];
        total += if events[i] { cum - lam.ln() } else { cum };
    }
    let overflow = !total.is_finite();
    Ok(NegLl {
        value: if overflow { f64::INFINITY } else { total },
        overflow,
    })
}
