//! Fast oracle checks behind the `selftest` command: bound soundness,
//! gradient agreement with finite differences, and metric oracles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bounds::{crown_ibp_bounds, ibp_bounds, PerturbationSet};
use crate::eval::metrics::{brier_ipcw, concordance_index, integrated_brier};
use crate::nn::{Matrix, Network};
use crate::objectives::Batch;
use crate::survival::{km_estimator, SurvRecord};
use crate::trainer::{method_batch, method_loss, method_loss_grad, Method, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

pub fn run_all(seed: u64) -> Vec<CheckResult> {
    vec![
        bound_soundness(seed, 100, 21),
        gradient_agreement(seed, 4),
        concordance_oracle(seed, 20),
        km_fixture(),
        brier_fixture(),
        ibs_fixture(),
    ]
}

/// Random network with weights uniform in [-1, 1].
pub fn random_net(dims: &[usize], rng: &mut impl Rng) -> Network {
    let weights = dims
        .windows(2)
        .map(|w| {
            let data = (0..w[0] * w[1]).map(|_| rng.gen_range(-1.0..1.0)).collect();
            Matrix::from_row_major(w[1], w[0], data).expect("consistent shape")
        })
        .collect();
    let biases = dims[1..]
        .iter()
        .map(|&n| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    Network::from_parts(weights, biases, crate::nn::DEFAULT_LEAKY_SLOPE).expect("valid network")
}

/// Sampled extrema of a 2-input network over the ℓ∞ ball: a `grid × grid`
/// lattice including the corners.
pub fn grid_extrema(net: &Network, center: &[f64], eps: f64, grid: usize) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for i in 0..grid {
        for j in 0..grid {
            let a = center[0] - eps + 2.0 * eps * i as f64 / (grid - 1) as f64;
            let b = center[1] - eps + 2.0 * eps * j as f64 / (grid - 1) as f64;
            let g = net.forward(&[a, b]).expect("2-input network");
            lo = lo.min(g);
            hi = hi.max(g);
        }
    }
    (lo, hi)
}

/// Outcome counts of a bound-soundness sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BoundStats {
    pub balls: usize,
    /// Intervals (IBP or CROWN-IBP) missing a sampled extremum by more than 1e-6.
    pub violations: usize,
    /// Balls where CROWN-IBP is wider than IBP by more than 1e-9.
    pub looser: usize,
}

/// Random 2-8-8-1 networks at radii 0.01, 0.1 and 0.5, each bound compared
/// against a `grid × grid` lattice over the ball.
pub fn bound_stats(seed: u64, nets: usize, grid: usize) -> BoundStats {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stats = BoundStats::default();
    for _ in 0..nets {
        let net = random_net(&[2, 8, 8, 1], &mut rng);
        let center = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        for eps in [0.01, 0.1, 0.5] {
            let set = PerturbationSet::new(&center, eps).expect("valid set");
            let (ibp, _) = ibp_bounds(&net, &set).expect("bounds");
            let crown = crown_ibp_bounds(&net, &set).expect("bounds");
            let (lo, hi) = grid_extrema(&net, &center, eps, grid);
            for b in [ibp, crown] {
                if b.lb > lo + 1e-6 || b.ub < hi - 1e-6 {
                    stats.violations += 1;
                }
            }
            if crown.width() > ibp.width() + 1e-9 {
                stats.looser += 1;
            }
            stats.balls += 1;
        }
    }
    stats
}

pub fn bound_soundness(seed: u64, nets: usize, grid: usize) -> CheckResult {
    let s = bound_stats(seed, nets, grid);
    CheckResult {
        name: "bound_soundness",
        passed: s.violations == 0 && s.looser == 0,
        detail: format!(
            "{} balls, {} containment violations, {} CROWN wider than IBP",
            s.balls, s.violations, s.looser
        ),
    }
}

fn fd_agrees(analytic: f64, numeric: f64) -> bool {
    (analytic - numeric).abs() <= 1e-4 * analytic.abs().max(numeric.abs()).max(1e-3)
}

/// Central-difference check of every method's parameter and input
/// gradients on small random instances.
pub fn gradient_agreement(seed: u64, instances: usize) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let h = 1e-6;
    let mut checked = 0;
    let mut bad = Vec::new();
    for inst in 0..instances {
        let mut net = random_net(&[3, 6, 5, 1], &mut rng);
        let records: Vec<SurvRecord> = (0..6)
            .map(|_| {
                SurvRecord::new(
                    (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                    rng.gen_range(0.1..2.0),
                    rng.gen_bool(0.6),
                )
                .expect("valid record")
            })
            .collect();
        let batch = Batch::from_records(&records).expect("valid batch");
        let eps = rng.gen_range(0.05..0.3);
        for method in Method::ALL {
            let cfg = TrainConfig {
                method,
                rank_weight: Some(0.5),
                ..TrainConfig::default()
            };
            let eval = method_batch(&net, &batch, &cfg, eps, inst as u64).expect("perturbation");
            let (_, grad) = method_loss_grad(&net, &eval, &cfg, eps).expect("gradient");
            let params = net.flat_params();
            let analytic = grad.params.flat();
            for k in 0..params.len() {
                let mut p = params.clone();
                p[k] += h;
                net.set_flat_params(&p).expect("same shape");
                let up = method_loss(&net, &eval, &cfg, eps).expect("loss").total;
                p[k] -= 2.0 * h;
                net.set_flat_params(&p).expect("same shape");
                let down = method_loss(&net, &eval, &cfg, eps).expect("loss").total;
                net.set_flat_params(&params).expect("same shape");
                checked += 1;
                if !fd_agrees(analytic[k], (up - down) / (2.0 * h)) {
                    bad.push(format!("{method} param {k}"));
                }
            }
            for i in 0..eval.len() {
                for d in 0..eval.dim() {
                    let mut up = eval.clone();
                    up.row_mut(i)[d] += h;
                    let mut down = eval.clone();
                    down.row_mut(i)[d] -= h;
                    let fd = (method_loss(&net, &up, &cfg, eps).expect("loss").total
                        - method_loss(&net, &down, &cfg, eps).expect("loss").total)
                        / (2.0 * h);
                    checked += 1;
                    if !fd_agrees(grad.inputs[i * eval.dim() + d], fd) {
                        bad.push(format!("{method} input {i}/{d}"));
                    }
                }
            }
        }
    }
    CheckResult {
        name: "gradient_agreement",
        passed: bad.is_empty(),
        detail: format!(
            "{checked} partials, {} mismatches{}",
            bad.len(),
            bad.first().map(|b| format!(", first: {b}")).unwrap_or_default()
        ),
    }
}

pub fn concordance_oracle(seed: u64, fixtures: usize) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc1);
    let mut mismatches = 0;
    for _ in 0..fixtures {
        let n = rng.gen_range(2..=200);
        let risks: Vec<f64> = (0..n).map(|_| rng.gen_range(0..10) as f64).collect();
        let times: Vec<f64> = (0..n).map(|_| rng.gen_range(1..50) as f64).collect();
        let events: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..n {
            for j in 0..n {
                if events[i] && times[i] < times[j] {
                    den += 1.0;
                    num += if risks[i] > risks[j] {
                        1.0
                    } else if risks[i] == risks[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        let ok = match concordance_index(&risks, &times, &events) {
            Ok(c) => c == num / den,
            Err(_) => den == 0.0,
        };
        mismatches += usize::from(!ok);
    }
    CheckResult {
        name: "concordance_oracle",
        passed: mismatches == 0,
        detail: format!("{fixtures} fixtures, {mismatches} mismatches"),
    }
}

pub fn km_fixture() -> CheckResult {
    // times 1, 2, 2, 3 with events 1, 1, 0, 1: S(1) = 3/4, S(2) = 3/4 * 2/3, S(3) = 0
    let km = km_estimator(&[1.0, 2.0, 2.0, 3.0], &[true, true, false, true]).expect("valid input");
    let expect = [(0.5, 1.0), (1.0, 0.75), (2.0, 0.5), (2.5, 0.5), (3.0, 0.0)];
    let worst = expect
        .iter()
        .map(|&(t, s)| (km.eval(t) - s).abs())
        .fold(0.0, f64::max);
    CheckResult {
        name: "kaplan_meier_fixture",
        passed: worst <= 1e-10,
        detail: format!("max abs error {worst:e}"),
    }
}

pub fn brier_fixture() -> CheckResult {
    // censoring survival: 1 before t = 2, 2/3 from t = 2
    let km = km_estimator(&[1.0, 2.0, 3.0, 4.0], &[false, true, false, false]).expect("valid input");
    let hand = (0.04 + 0.0 + 0.09 * 1.5 + 0.16 * 1.5) / 4.0;
    let got = brier_ipcw(
        &[0.2, 0.6, 0.7, 0.4],
        &[1.0, 2.0, 3.0, 2.5],
        &[true, false, true, true],
        &km,
        2.5,
    )
    .map(|b| b.value)
    .unwrap_or(f64::NAN);
    let err = (got - hand).abs();
    CheckResult {
        name: "brier_fixture",
        passed: err <= 1e-10,
        detail: format!("abs error {err:e}"),
    }
}

pub fn ibs_fixture() -> CheckResult {
    // S(t) = 1 - t/4 for every record; censoring survival 1 before t = 2, 1/2 after.
    // Brier at t = 1, 2, 3: 0.6875/3, 0.75/3, 0.1875/3; trapezoid over [1, 3] / 2.
    let times = [1.0, 2.0, 3.0];
    let events = [true, false, true];
    let cens: Vec<bool> = events.iter().map(|e| !e).collect();
    let km = km_estimator(&times, &cens).expect("valid input");
    let hand = ((0.6875 + 0.75) / 2.0 + (0.75 + 0.1875) / 2.0) / 3.0 / 2.0;
    let got = integrated_brier(|_, t| 1.0 - t / 4.0, &times, &events, &km, &[1.0, 2.0, 3.0])
        .map(|b| b.value)
        .unwrap_or(f64::NAN);
    let err = (got - hand).abs();
    CheckResult {
        name: "ibs_fixture",
        passed: err <= 1e-10,
        detail: format!("abs error {err:e}"),
    }
}
