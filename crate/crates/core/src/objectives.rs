//! Training losses and input perturbations.
//!
//! All losses are functions of the per-record network outputs `G_i`:
//!
//! * negative censored log-likelihood, `Σ exp(G_i) t_i - e_i G_i`;
//! * pairwise ranking loss over acceptable pairs `(t_i < t_j, e_i = 1)`,
//!   `exp(-(F(t_i | G_i) - F(t_i | G_j)) / σ)`;
//! * the combined objective `-LL + w * rank`;
//! * a certified upper bound on the combined objective over per-record ℓ∞
//!   balls, composed from CROWN-IBP bounds `[lb_i, ub_i]` on each `G_i`;
//! * the mixed objective `κ * clean + (1 - κ) * certified`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bounds::BoundTape;
use crate::data::SurvivalDataset;
use crate::error::{Error, Result};
use crate::nn::{Network, ParamGrads};
use crate::survival::{log_pdf, log_survival, SurvRecord};

/// Rows of a dataset processed together.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    dim: usize,
    x: Vec<f64>,
    time: Vec<f64>,
    event: Vec<bool>,
    /// Row indices in the parent dataset.
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn from_records(records: &[SurvRecord]) -> Result<Self> {
        let first = records
            .first()
            .ok_or_else(|| Error::Input("batch must not be empty".into()))?;
        let dim = first.x.len();
        let mut x = Vec::with_capacity(records.len() * dim);
        for r in records {
            if r.x.len() != dim {
                return Err(Error::Shape {
                    expected: dim,
                    got: r.x.len(),
                });
            }
            if !(r.time > 0.0) {
                return Err(Error::Domain(format!("record time must be positive, got {}", r.time)));
            }
            x.extend_from_slice(&r.x);
        }
        Ok(Self {
            dim,
            x,
            time: records.iter().map(|r| r.time).collect(),
            event: records.iter().map(|r| r.event).collect(),
            indices: (0..records.len()).collect(),
        })
    }

    pub fn from_dataset(data: &SurvivalDataset, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::Input("batch must not be empty".into()));
        }
        let dim = data.dim();
        let mut x = Vec::with_capacity(indices.len() * dim);
        for &i in indices {
            x.extend_from_slice(data.x.row(i));
        }
        Ok(Self {
            dim,
            x,
            time: indices.iter().map(|&i| data.time[i]).collect(),
            event: indices.iter().map(|&i| data.event[i]).collect(),
            indices: indices.to_vec(),
        })
    }

    pub fn full(data: &SurvivalDataset) -> Result<Self> {
        let all: Vec<usize> = (0..data.len()).collect();
        Self::from_dataset(data, &all)
    }

    pub fn len(&self) -> usize {
        self.time.len()
    }

    pub fn is_empty(&self) -> bool {
        self.time.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.x[i * self.dim..(i + 1) * self.dim]
    }

    pub fn covariates(&self) -> &[f64] {
        &self.x
    }

    pub fn times(&self) -> &[f64] {
        &self.time
    }

    pub fn events(&self) -> &[bool] {
        &self.event
    }

    pub fn record(&self, i: usize) -> SurvRecord {
        SurvRecord {
            x: self.row(i).to_vec(),
            time: self.time[i],
            event: self.event[i],
        }
    }

    fn check(&self, net: &Network) -> Result<()> {
        if self.dim != net.input_dim() {
            return Err(Error::Shape {
                expected: net.input_dim(),
                got: self.dim,
            });
        }
        if let Some(v) = self.x.iter().find(|v| !v.is_finite()) {
            return Err(Error::Input(format!("non-finite covariate {v} in batch")));
        }
        Ok(())
    }
}

/// Weights of the combined objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParams {
    /// Ranking-term weight `w`.
    pub w: f64,
    /// Ranking temperature `σ`.
    pub sigma: f64,
}

impl LossParams {
    /// `w = 1 / batch_size`, `σ = 1`.
    pub fn for_batch_size(batch_size: usize) -> Self {
        Self {
            w: 1.0 / batch_size.max(1) as f64,
            sigma: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub neg_ll: f64,
    pub rank: f64,
    pub clean_combined: f64,
    pub certified_upper: f64,
    pub total: f64,
}

/// Loss value with gradients with respect to the parameters and to every
/// covariate of the batch (row-major, same layout as the batch).
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub value: f64,
    pub params: ParamGrads,
    pub inputs: Vec<f64>,
}

// ---- per-record terms as functions of G ----

/// `-(e log f + (1 - e) log S)` and its derivative in `G`.
#[inline]
fn nll_term(g: f64, t: f64, event: bool) -> (f64, f64) {
    let cum = g.exp() * t;
    if event {
        (cum - g, cum - 1.0)
    } else {
        (cum, cum)
    }
}

/// `F(t | G)` and `dF/dG`.
#[inline]
fn cdf_and_slope(g: f64, t: f64) -> (f64, f64) {
    let cum = g.exp() * t;
    if cum.is_infinite() {
        return (1.0, 0.0);
    }
    let s = (-cum).exp();
    (-(-cum).exp_m1(), s * cum)
}

#[inline]
fn acceptable(time: &[f64], event: &[bool], i: usize, j: usize) -> bool {
    event[i] && time[i] < time[j]
}

/// Ranking loss where the first element of each pair takes output `gi[i]`
/// and the second `gj[j]`; with `gi == gj` this is the clean ranking loss.
/// Returns the value and derivatives with respect to `gi` and `gj`.
fn rank_terms(gi: &[f64], gj: &[f64], time: &[f64], event: &[bool], sigma: f64) -> (f64, Vec<f64>, Vec<f64>) {
    let n = time.len();
    let mut total = 0.0;
    let mut d_gi = vec![0.0; n];
    let mut d_gj = vec![0.0; n];
    for i in 0..n {
        if !event[i] {
            continue;
        }
        let t = time[i];
        let (fi, dfi) = cdf_and_slope(gi[i], t);
        for j in 0..n {
            if j == i || !acceptable(time, event, i, j) {
                continue;
            }
            let (fj, dfj) = cdf_and_slope(gj[j], t);
            let eta = (-(fi - fj) / sigma).exp();
            total += eta;
            d_gi[i] -= eta * dfi / sigma;
            d_gj[j] += eta * dfj / sigma;
        }
    }
    (total, d_gi, d_gj)
}

fn outputs(net: &Network, batch: &Batch) -> Vec<f64> {
    (0..batch.len()).map(|i| net.forward_unchecked(batch.row(i))).collect()
}

/// Right-censored log-likelihood `Σ e log f(t) + (1 - e) log S(t)`.
pub fn loglik(net: &Network, batch: &Batch) -> Result<f64> {
    batch.check(net)?;
    let mut total = 0.0;
    for i in 0..batch.len() {
        let g = net.forward_unchecked(batch.row(i));
        let t = batch.time[i];
        total += if batch.event[i] {
            log_pdf(g, t)?
        } else {
            log_survival(g, t)?
        };
    }
    Ok(total)
}

pub fn rank_loss(net: &Network, batch: &Batch, sigma: f64) -> Result<f64> {
    batch.check(net)?;
    if !(sigma > 0.0) {
        return Err(Error::Domain(format!("sigma must be positive, got {sigma}")));
    }
    let gs = outputs(net, batch);
    Ok(rank_terms(&gs, &gs, &batch.time, &batch.event, sigma).0)
}

fn check_params(params: &LossParams) -> Result<()> {
    if !(params.w >= 0.0) {
        return Err(Error::Domain(format!("rank weight must be >= 0, got {}", params.w)));
    }
    if !(params.sigma > 0.0) {
        return Err(Error::Domain(format!("sigma must be positive, got {}", params.sigma)));
    }
    Ok(())
}

/// `-loglik + w * rank_loss`
pub fn combined_loss(net: &Network, batch: &Batch, params: LossParams) -> Result<f64> {
    Ok(clean_parts(net, batch, params)?.clean_combined)
}

fn clean_parts(net: &Network, batch: &Batch, params: LossParams) -> Result<LossBreakdown> {
    batch.check(net)?;
    check_params(&params)?;
    let gs = outputs(net, batch);
    let neg_ll: f64 = gs
        .iter()
        .zip(&batch.time)
        .zip(&batch.event)
        .map(|((&g, &t), &e)| nll_term(g, t, e).0)
        .sum();
    let rank = rank_terms(&gs, &gs, &batch.time, &batch.event, params.sigma).0;
    let clean = neg_ll + params.w * rank;
    Ok(LossBreakdown {
        neg_ll,
        rank,
        clean_combined: clean,
        certified_upper: f64::NAN,
        total: clean,
    })
}

/// Backpropagates per-record output adjoints through the network.
fn backprop_outputs(net: &Network, batch: &Batch, g_adj: &[f64]) -> (ParamGrads, Vec<f64>) {
    let mut grads = ParamGrads::zeros_like(net);
    let mut inputs = vec![0.0; batch.x.len()];
    let dim = batch.dim;
    for (i, &adj) in g_adj.iter().enumerate() {
        if adj == 0.0 {
            continue;
        }
        let trace = net.trace(batch.row(i));
        net.backward_accumulate(&trace, adj, &mut grads, Some(&mut inputs[i * dim..(i + 1) * dim]));
    }
    (grads, inputs)
}

fn clean_with_grad(net: &Network, batch: &Batch, params: LossParams) -> Result<(LossBreakdown, Vec<f64>)> {
    batch.check(net)?;
    check_params(&params)?;
    let gs = outputs(net, batch);
    let mut neg_ll = 0.0;
    let mut g_adj = vec![0.0; gs.len()];
    for i in 0..gs.len() {
        let (v, d) = nll_term(gs[i], batch.time[i], batch.event[i]);
        neg_ll += v;
        g_adj[i] = d;
    }
    let (rank, d_i, d_j) = rank_terms(&gs, &gs, &batch.time, &batch.event, params.sigma);
    for i in 0..gs.len() {
        g_adj[i] += params.w * (d_i[i] + d_j[i]);
    }
    let clean = neg_ll + params.w * rank;
    Ok((
        LossBreakdown {
            neg_ll,
            rank,
            clean_combined: clean,
            certified_upper: f64::NAN,
            total: clean,
        },
        g_adj,
    ))
}

pub fn combined_loss_grad(net: &Network, batch: &Batch, params: LossParams) -> Result<LossGrad> {
    let (parts, g_adj) = clean_with_grad(net, batch, params)?;
    let (grads, inputs) = backprop_outputs(net, batch, &g_adj);
    Ok(LossGrad {
        value: parts.clean_combined,
        params: grads,
        inputs,
    })
}

// ---- certified bound ----

/// Upper bound on the combined loss over the per-record balls.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CertifiedLoss {
    pub value: f64,
    /// A hazard overflowed and `value` is `+inf`.
    pub overflow: bool,
}

struct CertifiedEval {
    value: f64,
    lb_adj: Vec<f64>,
    ub_adj: Vec<f64>,
    tapes: Vec<BoundTape>,
}

fn certified_eval(net: &Network, batch: &Batch, eps: f64, params: LossParams) -> Result<CertifiedEval> {
    batch.check(net)?;
    check_params(&params)?;
    if !(eps >= 0.0) || !eps.is_finite() {
        return Err(Error::Domain(format!("eps must be finite and >= 0, got {eps}")));
    }
    let n = batch.len();
    let tapes: Vec<BoundTape> = (0..n).map(|i| BoundTape::record(net, batch.row(i), eps)).collect();
    let lb: Vec<f64> = tapes.iter().map(|t| t.bounds().lb).collect();
    let ub: Vec<f64> = tapes.iter().map(|t| t.bounds().ub).collect();

    let mut value = 0.0;
    let mut lb_adj = vec![0.0; n];
    let mut ub_adj = vec![0.0; n];
    // each likelihood term is convex in G: its maximum sits at an endpoint
    for i in 0..n {
        let (at_lb, d_lb) = nll_term(lb[i], batch.time[i], batch.event[i]);
        let (at_ub, d_ub) = nll_term(ub[i], batch.time[i], batch.event[i]);
        if at_ub >= at_lb {
            value += at_ub;
            ub_adj[i] += d_ub;
        } else {
            value += at_lb;
            lb_adj[i] += d_lb;
        }
    }
    // the ranking term decreases in G_i and increases in G_j
    let (rank, d_i, d_j) = rank_terms(&lb, &ub, &batch.time, &batch.event, params.sigma);
    value += params.w * rank;
    for i in 0..n {
        lb_adj[i] += params.w * d_i[i];
        ub_adj[i] += params.w * d_j[i];
    }
    Ok(CertifiedEval {
        value,
        lb_adj,
        ub_adj,
        tapes,
    })
}

pub fn certified_upper_loss(net: &Network, batch: &Batch, eps: f64, params: LossParams) -> Result<CertifiedLoss> {
    let eval = certified_eval(net, batch, eps, params)?;
    Ok(CertifiedLoss {
        value: eval.value,
        overflow: eval.value.is_infinite(),
    })
}

pub fn certified_upper_loss_grad(net: &Network, batch: &Batch, eps: f64, params: LossParams) -> Result<LossGrad> {
    let eval = certified_eval(net, batch, eps, params)?;
    let mut grads = ParamGrads::zeros_like(net);
    let mut inputs = vec![0.0; batch.x.len()];
    let dim = batch.dim;
    for (i, tape) in eval.tapes.iter().enumerate() {
        tape.backward(
            net,
            eval.lb_adj[i],
            eval.ub_adj[i],
            &mut grads,
            Some(&mut inputs[i * dim..(i + 1) * dim]),
        );
    }
    Ok(LossGrad {
        value: eval.value,
        params: grads,
        inputs,
    })
}

fn check_kappa(kappa: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&kappa) {
        return Err(Error::Domain(format!("kappa must lie in [0, 1], got {kappa}")));
    }
    Ok(())
}

/// `κ * combined + (1 - κ) * certified_upper`. On a zero-radius ball the
/// certified term equals the clean term and the total is the clean loss.
pub fn sawar_loss(net: &Network, batch: &Batch, eps: f64, kappa: f64, params: LossParams) -> Result<LossBreakdown> {
    check_kappa(kappa)?;
    let mut parts = clean_parts(net, batch, params)?;
    if eps == 0.0 {
        parts.certified_upper = parts.clean_combined;
        return Ok(parts);
    }
    let cert = certified_upper_loss(net, batch, eps, params)?;
    parts.certified_upper = cert.value;
    parts.total = kappa * parts.clean_combined + (1.0 - kappa) * cert.value;
    Ok(parts)
}

pub fn sawar_loss_grad(
    net: &Network,
    batch: &Batch,
    eps: f64,
    kappa: f64,
    params: LossParams,
) -> Result<(LossBreakdown, LossGrad)> {
    check_kappa(kappa)?;
    let (mut parts, g_adj) = clean_with_grad(net, batch, params)?;
    let (mut grads, mut inputs) = backprop_outputs(net, batch, &g_adj);
    if eps == 0.0 {
        parts.certified_upper = parts.clean_combined;
        let value = parts.total;
        return Ok((parts, LossGrad { value, params: grads, inputs }));
    }
    let cert = certified_upper_loss_grad(net, batch, eps, params)?;
    grads.scale(kappa);
    grads.add_scaled(&cert.params, 1.0 - kappa);
    for (a, b) in inputs.iter_mut().zip(&cert.inputs) {
        *a = kappa * *a + (1.0 - kappa) * b;
    }
    parts.certified_upper = cert.value;
    parts.total = kappa * parts.clean_combined + (1.0 - kappa) * cert.value;
    let value = parts.total;
    Ok((parts, LossGrad { value, params: grads, inputs }))
}

// ---- perturbations ----

/// How a gradient is turned into an ascent step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepRule {
    /// `x + α ∇L`
    #[default]
    Raw,
    /// `x + α sign(∇L)`
    Sign,
}

/// A perturbed batch plus the rows whose gradient was not finite and which
/// were therefore left at their clean values.
#[derive(Debug, Clone)]
pub struct Perturbed {
    pub batch: Batch,
    pub flagged: Vec<usize>,
}

fn check_eps(eps: f64) -> Result<()> {
    if !(eps >= 0.0) || !eps.is_finite() {
        return Err(Error::Domain(format!("eps must be finite and >= 0, got {eps}")));
    }
    Ok(())
}

/// Single projected ascent step of size `eps` on the combined loss.
pub fn fgsm_perturb(net: &Network, batch: &Batch, eps: f64, params: LossParams, rule: StepRule) -> Result<Perturbed> {
    pgd_perturb(net, batch, eps, 1, params, rule)
}

/// `steps` projected ascent steps of size `eps / steps`, each projected back
/// onto the per-record ℓ∞ ball. Times and events are never touched.
pub fn pgd_perturb(
    net: &Network,
    batch: &Batch,
    eps: f64,
    steps: usize,
    params: LossParams,
    rule: StepRule,
) -> Result<Perturbed> {
    check_eps(eps)?;
    if steps == 0 {
        return Err(Error::Config("PGD needs at least one step".into()));
    }
    batch.check(net)?;
    check_params(&params)?;
    let mut current = batch.clone();
    let mut flagged = vec![false; batch.len()];
    if eps == 0.0 {
        return Ok(Perturbed {
            batch: current,
            flagged: Vec::new(),
        });
    }
    let alpha = eps / steps as f64;
    let dim = batch.dim;
    for _ in 0..steps {
        let grad = combined_loss_grad(net, &current, params)?;
        for i in 0..batch.len() {
            if flagged[i] {
                continue;
            }
            let g = &grad.inputs[i * dim..(i + 1) * dim];
            if g.iter().any(|v| !v.is_finite()) {
                flagged[i] = true;
                current.row_mut(i).copy_from_slice(batch.row(i));
                continue;
            }
            let origin = batch.row(i);
            for ((xc, &gv), &x0) in current.row_mut(i).iter_mut().zip(g).zip(origin) {
                let step = match rule {
                    StepRule::Raw => alpha * gv,
                    StepRule::Sign => alpha * sign(gv),
                };
                *xc = (*xc + step).clamp(x0 - eps, x0 + eps);
            }
        }
    }
    Ok(Perturbed {
        batch: current,
        flagged: flagged
            .iter()
            .enumerate()
            .filter_map(|(i, &f)| f.then_some(i))
            .collect(),
    })
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `x + clip(sqrt(eps) z, -eps, eps)` with i.i.d. standard normal `z`.
pub fn noise_perturb(batch: &Batch, eps: f64, seed: u64) -> Result<Batch> {
    check_eps(eps)?;
    let mut out = batch.clone();
    if eps == 0.0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = eps.sqrt();
    for v in out.x.iter_mut() {
        let z: f64 = StandardNormal.sample(&mut rng);
        *v += (scale * z).clamp(-eps, eps);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Matrix;
    use rand::Rng;

    fn linear(w: f64, b: f64) -> Network {
        Network::from_parts(vec![Matrix::from_rows(&[vec![w]]).unwrap()], vec![vec![b]], 0.01).unwrap()
    }

    fn rec(x: f64, t: f64, e: bool) -> SurvRecord {
        SurvRecord::new(vec![x], t, e).unwrap()
    }

    fn fixture() -> Batch {
        Batch::from_records(&[rec(0.5, 1.0, true), rec(-0.3, 2.0, false), rec(1.2, 3.0, true)]).unwrap()
    }

    const P1: LossParams = LossParams { w: 1.0, sigma: 1.0 };

    #[test]
    fn loglik_examples() {
        let zero = linear(0.0, 0.0);
        let censored = Batch::from_records(&[rec(0.0, 1.5, false), rec(0.0, 2.5, false)]).unwrap();
        assert_eq!(loglik(&zero, &censored).unwrap(), -4.0);
        let one = Batch::from_records(&[rec(0.0, 1.0, true)]).unwrap();
        assert_eq!(loglik(&zero, &one).unwrap(), -1.0);
    }

    #[test]
    fn loglik_matches_term_by_term_sum() {
        let net = linear(0.7, -0.2);
        let b = fixture();
        let mut expected = 0.0;
        for (x, t, e) in [(0.5, 1.0, true), (-0.3, 2.0, false), (1.2, 3.0, true)] {
            let g: f64 = 0.7 * x - 0.2;
            let lam = g.exp();
            expected += if e { g - lam * t } else { -lam * t };
        }
        assert!((loglik(&net, &b).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn rank_loss_examples() {
        let net = linear(0.0, 0.0);
        let censored = Batch::from_records(&[rec(0.0, 1.0, false), rec(0.0, 2.0, false)]).unwrap();
        assert_eq!(rank_loss(&net, &censored, 1.0).unwrap(), 0.0);
        let pair = Batch::from_records(&[rec(0.0, 1.0, true), rec(0.0, 2.0, false)]).unwrap();
        assert_eq!(rank_loss(&net, &pair, 1.0).unwrap(), 1.0);
        assert!(rank_loss(&net, &pair, 0.0).is_err());
    }

    #[test]
    fn rank_loss_matches_pair_enumeration() {
        let net = linear(0.7, -0.2);
        let b = fixture();
        let data = [(0.5, 1.0, true), (-0.3, 2.0, false), (1.2, 3.0, true)];
        let f = |x: f64, t: f64| 1.0 - (-(0.7f64 * x - 0.2).exp() * t).exp();
        let mut expected = 0.0;
        for (i, &(xi, ti, ei)) in data.iter().enumerate() {
            for (j, &(xj, tj, _)) in data.iter().enumerate() {
                if i != j && ei && ti < tj {
                    expected += (-(f(xi, ti) - f(xj, ti)) / 1.0f64).exp();
                }
            }
        }
        assert!((rank_loss(&net, &b, 1.0).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn combined_loss_examples() {
        let net = linear(0.7, -0.2);
        let b = fixture();
        let ll = loglik(&net, &b).unwrap();
        let rank = rank_loss(&net, &b, 1.0).unwrap();
        let only_ll = combined_loss(&net, &b, LossParams { w: 0.0, sigma: 1.0 }).unwrap();
        assert!((only_ll + ll).abs() < 1e-12);
        assert!((combined_loss(&net, &b, P1).unwrap() - (-ll + rank)).abs() < 1e-12);
        let p = LossParams::for_batch_size(b.len());
        assert_eq!(p.w, 1.0 / 3.0);
        assert!((combined_loss(&net, &b, p).unwrap() - (-ll + rank / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn fgsm_examples() {
        let net = linear(1.0, 0.0);
        let b = Batch::from_records(&[rec(0.0, 1.0, false)]).unwrap();
        let same = fgsm_perturb(&net, &b, 0.0, P1, StepRule::Raw).unwrap();
        assert_eq!(same.batch, b);
        // d/dx (e^x t) = 1 at x = 0
        let moved = fgsm_perturb(&net, &b, 0.1, P1, StepRule::Raw).unwrap();
        assert!((moved.batch.row(0)[0] - 0.1).abs() < 1e-15);
        assert_eq!(moved.batch.times(), b.times());
        assert_eq!(moved.batch.events(), b.events());
    }

    #[test]
    fn pgd_single_step_is_fgsm() {
        let net = Network::init(&[2, 4, 1], 0.01, 3).unwrap();
        let b = Batch::from_records(&[
            SurvRecord::new(vec![0.2, -0.1], 1.0, true).unwrap(),
            SurvRecord::new(vec![-0.5, 0.4], 2.0, false).unwrap(),
        ])
        .unwrap();
        for rule in [StepRule::Raw, StepRule::Sign] {
            let a = fgsm_perturb(&net, &b, 0.3, P1, rule).unwrap();
            let p = pgd_perturb(&net, &b, 0.3, 1, P1, rule).unwrap();
            assert_eq!(a.batch, p.batch);
        }
        assert_eq!(pgd_perturb(&net, &b, 0.0, 7, P1, StepRule::Raw).unwrap().batch, b);
        assert!(pgd_perturb(&net, &b, 0.1, 0, P1, StepRule::Raw).is_err());
    }

    #[test]
    fn pgd_ascends_on_linear_censored_toy() {
        let net = linear(1.0, 0.0);
        let b = Batch::from_records(&[rec(0.0, 1.0, false), rec(0.3, 2.0, false)]).unwrap();
        let eps = 0.5;
        let mut prev = combined_loss(&net, &b, P1).unwrap();
        for k in 1..=8 {
            // k steps of the same size eps / 8 on a convex objective
            let mut cur = b.clone();
            for _ in 0..k {
                let g = combined_loss_grad(&net, &cur, P1).unwrap();
                for i in 0..cur.len() {
                    let x0 = b.row(i)[0];
                    let v = (cur.row(i)[0] + eps / 8.0 * g.inputs[i]).clamp(x0 - eps, x0 + eps);
                    cur.row_mut(i)[0] = v;
                }
            }
            let loss = combined_loss(&net, &cur, P1).unwrap();
            assert!(loss >= prev - 1e-12);
            prev = loss;
        }
        let pgd = pgd_perturb(&net, &b, eps, 10, P1, StepRule::Raw).unwrap();
        let attacked = combined_loss(&net, &pgd.batch, P1).unwrap();
        let clean = combined_loss(&net, &b, P1).unwrap();
        let cert = certified_upper_loss(&net, &b, eps, P1).unwrap().value;
        assert!(clean <= attacked && attacked <= cert + 1e-9);
    }

    #[test]
    fn perturbations_stay_in_ball() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let net = Network::init(&[3, 6, 1], 0.01, 9).unwrap();
        let recs: Vec<SurvRecord> = (0..20)
            .map(|i| {
                SurvRecord::new(
                    (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect(),
                    1.0 + i as f64,
                    i % 3 == 0,
                )
                .unwrap()
            })
            .collect();
        let b = Batch::from_records(&recs).unwrap();
        for eps in [0.05, 0.5, 1.0] {
            let outs = [
                fgsm_perturb(&net, &b, eps, P1, StepRule::Raw).unwrap().batch,
                pgd_perturb(&net, &b, eps, 10, P1, StepRule::Sign).unwrap().batch,
                noise_perturb(&b, eps, 4).unwrap(),
            ];
            for out in outs {
                for (a, c) in out.covariates().iter().zip(b.covariates()) {
                    assert!((a - c).abs() <= eps + 1e-12);
                }
                assert_eq!(out.times(), b.times());
                assert_eq!(out.events(), b.events());
            }
        }
    }

    #[test]
    fn noise_examples() {
        let b = fixture();
        assert_eq!(noise_perturb(&b, 0.0, 1).unwrap(), b);
        assert_eq!(noise_perturb(&b, 0.3, 1).unwrap(), noise_perturb(&b, 0.3, 1).unwrap());
        assert_ne!(noise_perturb(&b, 0.3, 1).unwrap(), noise_perturb(&b, 0.3, 2).unwrap());
    }

    #[test]
    fn noise_scale_is_sqrt_eps() {
        // eps large enough that clipping at eps (> 3 sqrt(eps)) almost never binds
        let eps: f64 = 16.0;
        let n = 100_000;
        let recs: Vec<SurvRecord> = (0..n).map(|_| rec(0.0, 1.0, false)).collect();
        let b = Batch::from_records(&recs).unwrap();
        let out = noise_perturb(&b, eps, 77).unwrap();
        let vals: Vec<f64> = out.covariates().iter().copied().filter(|v| v.abs() < eps).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        let ratio = var.sqrt() / eps.sqrt();
        assert!((ratio - 1.0).abs() < 0.05, "std ratio {ratio}");
    }

    #[test]
    fn certified_examples() {
        let net = Network::init(&[2, 5, 1], 0.01, 2).unwrap();
        let b = Batch::from_records(&[
            SurvRecord::new(vec![0.2, -0.1], 1.0, true).unwrap(),
            SurvRecord::new(vec![-0.5, 0.4], 2.0, false).unwrap(),
            SurvRecord::new(vec![0.9, 0.0], 0.5, true).unwrap(),
        ])
        .unwrap();
        let clean = combined_loss(&net, &b, P1).unwrap();
        let at_zero = certified_upper_loss(&net, &b, 0.0, P1).unwrap().value;
        assert!((at_zero - clean).abs() < 1e-9);

        // censored record, linear G: max of e^G t over the ball is e^{G_ub} t
        let lin = linear(2.0, 0.1);
        let single = Batch::from_records(&[rec(0.3, 1.7, false)]).unwrap();
        let cert = certified_upper_loss(&lin, &single, 0.2, P1).unwrap().value;
        let expected = (2.0f64 * 0.5 + 0.1).exp() * 1.7;
        assert!((cert - expected).abs() < 1e-12 * expected);
    }

    #[test]
    fn certified_overflow_is_flagged() {
        let lin = linear(1.0, 800.0);
        let b = Batch::from_records(&[rec(0.0, 1.0, false)]).unwrap();
        let cert = certified_upper_loss(&lin, &b, 0.1, P1).unwrap();
        assert!(cert.overflow && cert.value.is_infinite());
    }

    #[test]
    fn certified_dominates_and_grows_with_eps() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for trial in 0..10 {
            let net = Network::init(&[2, 6, 6, 1], 0.01, trial).unwrap();
            let recs: Vec<SurvRecord> = (0..6)
                .map(|_| {
                    SurvRecord::new(
                        vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
                        rng.gen_range(0.1..3.0),
                        rng.gen_bool(0.6),
                    )
                    .unwrap()
                })
                .collect();
            let b = Batch::from_records(&recs).unwrap();
            let clean = combined_loss(&net, &b, P1).unwrap();
            let mut prev = clean;
            for eps in [0.0, 0.05, 0.1, 0.3, 0.6, 1.0] {
                let cert = certified_upper_loss(&net, &b, eps, P1).unwrap().value;
                assert!(cert >= clean - 1e-9);
                assert!(cert >= prev - 1e-9, "not monotone at eps {eps}");
                prev = cert;
            }
        }
    }

    #[test]
    fn sawar_endpoints() {
        let net = Network::init(&[2, 5, 1], 0.01, 4).unwrap();
        let b = Batch::from_records(&[
            SurvRecord::new(vec![0.2, -0.1], 1.0, true).unwrap(),
            SurvRecord::new(vec![-0.5, 0.4], 2.0, false).unwrap(),
        ])
        .unwrap();
        let clean = combined_loss(&net, &b, P1).unwrap();
        let cert = certified_upper_loss(&net, &b, 0.2, P1).unwrap().value;
        let one = sawar_loss(&net, &b, 0.2, 1.0, P1).unwrap();
        assert!((one.total - clean).abs() < 1e-12);
        let zero = sawar_loss(&net, &b, 0.2, 0.0, P1).unwrap();
        assert!((zero.total - cert).abs() < 1e-12);
        let half = sawar_loss(&net, &b, 0.2, 0.5, P1).unwrap();
        assert!((half.total - (clean + cert) / 2.0).abs() < 1e-12);
        assert!(half.certified_upper >= half.clean_combined - 1e-9);
        assert!(sawar_loss(&net, &b, 0.2, 1.5, P1).is_err());
        let flat = sawar_loss(&net, &b, 0.0, 0.5, P1).unwrap();
        assert_eq!(flat.total, clean);
    }

    fn fd_close(a: f64, b: f64) -> bool {
        let d = (a - b).abs();
        d <= 1e-7 || d <= 1e-4 * a.abs().max(b.abs())
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let h = 1e-6;
        for trial in 0..8 {
            let mut net = Network::init(&[3, 5, 4, 1], 0.01, 100 + trial).unwrap();
            let recs: Vec<SurvRecord> = (0..5)
                .map(|_| {
                    SurvRecord::new(
                        (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                        rng.gen_range(0.2..2.0),
                        rng.gen_bool(0.5),
                    )
                    .unwrap()
                })
                .collect();
            let b = Batch::from_records(&recs).unwrap();
            let p = LossParams { w: 0.4, sigma: 1.0 };
            let eps = 0.15;
            let eval = |n: &Network, bb: &Batch| sawar_loss(n, bb, eps, 0.5, p).unwrap().total;
            let (_, grad) = sawar_loss_grad(&net, &b, eps, 0.5, p).unwrap();
            let params = net.flat_params();
            let analytic = grad.params.flat();
            for i in 0..params.len() {
                let mut q = params.clone();
                q[i] += h;
                net.set_flat_params(&q).unwrap();
                let fp = eval(&net, &b);
                q[i] -= 2.0 * h;
                net.set_flat_params(&q).unwrap();
                let fm = eval(&net, &b);
                net.set_flat_params(&params).unwrap();
                let fd = (fp - fm) / (2.0 * h);
                assert!(fd_close(analytic[i], fd), "trial {trial} param {i}: {} vs {fd}", analytic[i]);
            }
            for k in 0..b.covariates().len() {
                let mut bp = b.clone();
                bp.x[k] += h;
                let mut bm = b.clone();
                bm.x[k] -= h;
                let fd = (eval(&net, &bp) - eval(&net, &bm)) / (2.0 * h);
                assert!(fd_close(grad.inputs[k], fd), "input {k}: {} vs {fd}", grad.inputs[k]);
            }
        }
    }
}
