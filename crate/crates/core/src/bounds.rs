//! Certified bounds on the scalar network output over an ℓ∞ ball.
//!
//! Two bounding routes are provided:
//!
//! * interval bound propagation (IBP), which pushes boxes through every
//!   affine layer with center/radius arithmetic and through Leaky ReLU by
//!   monotonicity;
//! * CROWN-IBP, which takes the IBP pre-activation boxes of every hidden
//!   layer, linearly relaxes each Leaky ReLU inside its box and propagates a
//!   linear bound on the output backward to the input, where it is
//!   maximised in closed form over the ball.
//!
//! The reported CROWN-IBP interval is intersected with the IBP interval, so it
//! is never looser than IBP. Every bound can be differentiated with respect to
//! the network parameters and the ball center through [`BoundTape`].

use crate::error::{Error, Result};
use crate::nn::{dot, leaky_relu, leaky_relu_grad, Network, ParamGrads};

/// ℓ∞ ball `{x̃ : |x̃ - center|_∞ ≤ radius}`.
#[derive(Debug, Clone, Copy)]
pub struct PerturbationSet<'a> {
    pub center: &'a [f64],
    pub radius: f64,
}

impl<'a> PerturbationSet<'a> {
    pub fn new(center: &'a [f64], radius: f64) -> Result<Self> {
        if !(radius >= 0.0) || !radius.is_finite() {
            return Err(Error::Input(format!("ball radius must be finite and >= 0, got {radius}")));
        }
        if center.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("ball center has non-finite entries".into()));
        }
        Ok(Self { center, radius })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarBounds {
    pub lb: f64,
    pub ub: f64,
}

impl ScalarBounds {
    pub fn width(&self) -> f64 {
        self.ub - self.lb
    }

    pub fn contains(&self, v: f64, slack: f64) -> bool {
        v >= self.lb - slack && v <= self.ub + slack
    }
}

/// Pre-activation boxes of every layer, the output layer last.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerBounds {
    pub lower: Vec<Vec<f64>>,
    pub upper: Vec<Vec<f64>>,
}

fn check_set(net: &Network, set: &PerturbationSet<'_>) -> Result<()> {
    if set.center.len() != net.input_dim() {
        return Err(Error::Shape {
            expected: net.input_dim(),
            got: set.center.len(),
        });
    }
    Ok(())
}

/// IBP output bounds together with every intermediate pre-activation box.
pub fn ibp_bounds(net: &Network, set: &PerturbationSet<'_>) -> Result<(ScalarBounds, LayerBounds)> {
    check_set(net, set)?;
    let ibp = IbpPass::run(net, set.center, set.radius);
    let out = ibp.output();
    Ok((
        out,
        LayerBounds {
            lower: ibp.lower,
            upper: ibp.upper,
        },
    ))
}

/// CROWN-IBP output bounds, intersected with IBP.
pub fn crown_ibp_bounds(net: &Network, set: &PerturbationSet<'_>) -> Result<ScalarBounds> {
    check_set(net, set)?;
    Ok(BoundTape::record(net, set.center, set.radius).bounds())
}

/// Upper bound on `max exp(G(x̃))` over the ball.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorstCaseHazard {
    pub value: f64,
    /// `exp` overflowed and `value` is `+inf`.
    pub overflow: bool,
}

pub fn worst_case_hazard(net: &Network, set: &PerturbationSet<'_>) -> Result<WorstCaseHazard> {
    let bounds = crown_ibp_bounds(net, set)?;
    let value = bounds.ub.exp();
    Ok(WorstCaseHazard {
        value,
        overflow: value.is_infinite(),
    })
}

/// Forward interval pass. Layer `i` consumes the box `mid[i] ± rad[i]`.
#[derive(Debug, Clone)]
struct IbpPass {
    mid: Vec<Vec<f64>>,
    rad: Vec<Vec<f64>>,
    lower: Vec<Vec<f64>>,
    upper: Vec<Vec<f64>>,
}

impl IbpPass {
    fn run(net: &Network, center: &[f64], radius: f64) -> Self {
        let n = net.num_layers();
        let slope = net.leaky_slope();
        let mut mid = Vec::with_capacity(n);
        let mut rad = Vec::with_capacity(n);
        let mut lower = Vec::with_capacity(n);
        let mut upper = Vec::with_capacity(n);
        mid.push(center.to_vec());
        rad.push(vec![radius; center.len()]);
        for (i, (w, b)) in net.weights().iter().zip(net.biases()).enumerate() {
            let (m, r) = (&mid[i], &rad[i]);
            let mut lo = Vec::with_capacity(w.rows());
            let mut hi = Vec::with_capacity(w.rows());
            for j in 0..w.rows() {
                let row = w.row(j);
                let c = dot(row, m) + b[j];
                let spread: f64 = row.iter().zip(r).map(|(wv, rv)| wv.abs() * rv).sum();
                lo.push(c - spread);
                hi.push(c + spread);
            }
            if i + 1 < n {
                let (next_mid, next_rad) = lo
                    .iter()
                    .zip(&hi)
                    .map(|(&l, &u)| {
                        let (hl, hu) = (leaky_relu(l, slope), leaky_relu(u, slope));
                        ((hu + hl) / 2.0, (hu - hl) / 2.0)
                    })
                    .unzip();
                mid.push(next_mid);
                rad.push(next_rad);
            }
            lower.push(lo);
            upper.push(hi);
        }
        Self {
            mid,
            rad,
            lower,
            upper,
        }
    }

    fn output(&self) -> ScalarBounds {
        ScalarBounds {
            lb: self.lower.last().unwrap()[0],
            ub: self.upper.last().unwrap()[0],
        }
    }

    /// Reverse pass. `lower_adj`/`upper_adj` hold adjoints of every
    /// pre-activation box and are consumed in place.
    fn backward(
        &self,
        net: &Network,
        mut lower_adj: Vec<Vec<f64>>,
        mut upper_adj: Vec<Vec<f64>>,
        grads: &mut ParamGrads,
        center_grad: Option<&mut [f64]>,
    ) {
        let slope = net.leaky_slope();
        let mut center_grad = center_grad;
        for i in (0..net.num_layers()).rev() {
            let w = &net.weights()[i];
            let (m, r) = (&self.mid[i], &self.rad[i]);
            let mut mid_adj = vec![0.0; w.cols()];
            let mut rad_adj = vec![0.0; w.cols()];
            let mut any = false;
            for j in 0..w.rows() {
                let (la, ua) = (lower_adj[i][j], upper_adj[i][j]);
                if la == 0.0 && ua == 0.0 {
                    continue;
                }
                any = true;
                let c_adj = la + ua;
                let s_adj = ua - la;
                grads.biases[i][j] += c_adj;
                let grow = grads.weights[i].row_mut(j);
                for (col, &wv) in w.row(j).iter().enumerate() {
                    grow[col] += c_adj * m[col] + s_adj * r[col] * sign(wv);
                    mid_adj[col] += wv * c_adj;
                    rad_adj[col] += wv.abs() * s_adj;
                }
            }
            if !any {
                if i == 0 {
                    break;
                }
                continue;
            }
            if i == 0 {
                if let Some(cg) = center_grad.as_deref_mut() {
                    for (g, a) in cg.iter_mut().zip(&mid_adj) {
                        *g += a;
                    }
                }
                break;
            }
            let (prev_lo, prev_hi) = (&self.lower[i - 1], &self.upper[i - 1]);
            for k in 0..w.cols() {
                let hu_adj = (mid_adj[k] + rad_adj[k]) / 2.0;
                let hl_adj = (mid_adj[k] - rad_adj[k]) / 2.0;
                lower_adj[i - 1][k] += hl_adj * leaky_relu_grad(prev_lo[k], slope);
                upper_adj[i - 1][k] += hu_adj * leaky_relu_grad(prev_hi[k], slope);
            }
        }
    }
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// A linear bound `h ≈ slope * z + offset` on one Leaky ReLU.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Line {
    slope: f64,
    offset: f64,
    /// The line is the chord through `(l, φ(l))` and `(u, u)` and therefore
    /// depends on the box endpoints.
    chord: bool,
}

/// Upper and lower relaxing lines of Leaky ReLU over `[l, u]`.
fn relax(l: f64, u: f64, alpha: f64) -> (Line, Line) {
    if l >= 0.0 {
        let id = Line {
            slope: 1.0,
            offset: 0.0,
            chord: false,
        };
        (id, id)
    } else if u <= 0.0 {
        let neg = Line {
            slope: alpha,
            offset: 0.0,
            chord: false,
        };
        (neg, neg)
    } else {
        let a = (u - alpha * l) / (u - l);
        let upper = Line {
            slope: a,
            offset: l * (alpha - a),
            chord: true,
        };
        // Leaky ReLU is convex, so any slope in [alpha, 1] through the origin
        // lies below it; pick the one covering the larger side of the box.
        let lower = Line {
            slope: if u >= -l { 1.0 } else { alpha },
            offset: 0.0,
            chord: false,
        };
        (upper, lower)
    }
}

/// Partial derivatives of the chord's (slope, offset) with respect to (l, u).
fn chord_partials(l: f64, u: f64, alpha: f64) -> [[f64; 2]; 2] {
    let d = u - l;
    let a = (u - alpha * l) / d;
    let da_dl = u * (1.0 - alpha) / (d * d);
    let da_du = l * (alpha - 1.0) / (d * d);
    let dc_dl = (alpha - a) - l * da_dl;
    let dc_du = -l * da_du;
    [[da_dl, da_du], [dc_dl, dc_du]]
}

/// One backward linear pass bounding `sign * G` from above.
#[derive(Debug, Clone)]
struct CrownPass {
    sign: f64,
    /// Per hidden layer `i`: coefficients on the activations of layer `i`
    /// before relaxation.
    lam: Vec<Vec<f64>>,
    /// Per hidden layer: coefficients on the pre-activations after relaxation.
    lam_pre: Vec<Vec<f64>>,
    lines: Vec<Vec<Line>>,
    /// Coefficients on the input.
    lam_in: Vec<f64>,
    value: f64,
}

impl CrownPass {
    fn run(net: &Network, ibp: &IbpPass, center: &[f64], radius: f64, sign: f64) -> Self {
        let n = net.num_layers();
        let alpha = net.leaky_slope();
        let hidden = n - 1;
        let mut lam_store = vec![Vec::new(); hidden];
        let mut lam_pre_store = vec![Vec::new(); hidden];
        let mut lines_store = vec![Vec::new(); hidden];

        let top = &net.weights()[n - 1];
        let mut lam: Vec<f64> = top.row(0).iter().map(|w| sign * w).collect();
        let mut kappa = sign * net.biases()[n - 1][0];

        for i in (0..hidden).rev() {
            let (lo, hi) = (&ibp.lower[i], &ibp.upper[i]);
            let mut lines = Vec::with_capacity(lam.len());
            let mut lam_pre = Vec::with_capacity(lam.len());
            for (j, &coef) in lam.iter().enumerate() {
                let (up, down) = relax(lo[j], hi[j], alpha);
                let line = if coef >= 0.0 { up } else { down };
                kappa += coef * line.offset;
                lam_pre.push(coef * line.slope);
                lines.push(line);
            }
            kappa += dot(&lam_pre, &net.biases()[i]);
            let w = &net.weights()[i];
            let mut next = vec![0.0; w.cols()];
            w.tmul_vec(&lam_pre, &mut next);
            lam_store[i] = std::mem::replace(&mut lam, next);
            lam_pre_store[i] = lam_pre;
            lines_store[i] = lines;
        }
        // `lam` is now the coefficient vector on the input
        let value = dot(&lam, center) + radius * lam.iter().map(|v| v.abs()).sum::<f64>() + kappa;
        Self {
            sign,
            lam: lam_store,
            lam_pre: lam_pre_store,
            lines: lines_store,
            lam_in: lam,
            value,
        }
    }

    /// Adds the adjoint `adj` of `value` into parameter, center and
    /// pre-activation box adjoints.
    #[allow(clippy::too_many_arguments)]
    fn backward(
        &self,
        net: &Network,
        ibp: &IbpPass,
        center: &[f64],
        radius: f64,
        adj: f64,
        grads: &mut ParamGrads,
        center_grad: Option<&mut [f64]>,
        lower_adj: &mut [Vec<f64>],
        upper_adj: &mut [Vec<f64>],
    ) {
        if adj == 0.0 {
            return;
        }
        let n = net.num_layers();
        let alpha = net.leaky_slope();
        let mut lam_adj: Vec<f64> = center
            .iter()
            .zip(&self.lam_in)
            .map(|(&x, &l)| adj * (x + radius * sign(l)))
            .collect();
        if let Some(cg) = center_grad {
            for (g, &l) in cg.iter_mut().zip(&self.lam_in) {
                *g += adj * l;
            }
        }
        let kappa_adj = adj;
        for i in 0..n - 1 {
            let w = &net.weights()[i];
            let lam_pre = &self.lam_pre[i];
            let lam = &self.lam[i];
            // lam_in_of_layer = W^T lam_pre ; kappa += lam_pre . b
            let gw = &mut grads.weights[i];
            let mut lam_pre_adj = vec![0.0; w.rows()];
            for j in 0..w.rows() {
                let row = w.row(j);
                lam_pre_adj[j] = dot(row, &lam_adj) + kappa_adj * net.biases()[i][j];
                if lam_pre[j] != 0.0 {
                    for (g, &la) in gw.row_mut(j).iter_mut().zip(&lam_adj) {
                        *g += lam_pre[j] * la;
                    }
                }
                grads.biases[i][j] += kappa_adj * lam_pre[j];
            }
            // lam_pre = lam * slope ; kappa += lam * offset
            let mut next_adj = Vec::with_capacity(w.rows());
            for j in 0..w.rows() {
                let line = self.lines[i][j];
                next_adj.push(lam_pre_adj[j] * line.slope + kappa_adj * line.offset);
                if line.chord {
                    let slope_adj = lam_pre_adj[j] * lam[j];
                    let offset_adj = kappa_adj * lam[j];
                    let p = chord_partials(ibp.lower[i][j], ibp.upper[i][j], alpha);
                    lower_adj[i][j] += slope_adj * p[0][0] + offset_adj * p[1][0];
                    upper_adj[i][j] += slope_adj * p[0][1] + offset_adj * p[1][1];
                }
            }
            lam_adj = next_adj;
        }
        // top layer: lam = sign * W_top, kappa = sign * b_top
        let top = n - 1;
        for (g, &la) in grads.weights[top].row_mut(0).iter_mut().zip(&lam_adj) {
            *g += self.sign * la;
        }
        grads.biases[top][0] += self.sign * kappa_adj;
    }
}

/// Which route supplied a reported endpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Source {
    Ibp,
    Crown,
}

/// Recorded CROWN-IBP computation for one ball, replayable in reverse.
#[derive(Debug, Clone)]
pub struct BoundTape {
    center: Vec<f64>,
    radius: f64,
    ibp: IbpPass,
    upper_pass: Option<CrownPass>,
    lower_pass: Option<CrownPass>,
    lb_source: Source,
    ub_source: Source,
    bounds: ScalarBounds,
}

impl BoundTape {
    /// Computes CROWN-IBP bounds; inputs are assumed validated.
    pub(crate) fn record(net: &Network, center: &[f64], radius: f64) -> Self {
        let ibp = IbpPass::run(net, center, radius);
        let ibp_out = ibp.output();
        if radius == 0.0 || net.num_layers() == 1 {
            // degenerate ball or a purely affine map: IBP is exact
            return Self {
                center: center.to_vec(),
                radius,
                ibp,
                upper_pass: None,
                lower_pass: None,
                lb_source: Source::Ibp,
                ub_source: Source::Ibp,
                bounds: ibp_out,
            };
        }
        let upper_pass = CrownPass::run(net, &ibp, center, radius, 1.0);
        let lower_pass = CrownPass::run(net, &ibp, center, radius, -1.0);
        let crown_ub = upper_pass.value;
        let crown_lb = -lower_pass.value;
        let (mut ub, mut ub_source) = if crown_ub <= ibp_out.ub {
            (crown_ub, Source::Crown)
        } else {
            (ibp_out.ub, Source::Ibp)
        };
        let (mut lb, mut lb_source) = if crown_lb >= ibp_out.lb {
            (crown_lb, Source::Crown)
        } else {
            (ibp_out.lb, Source::Ibp)
        };
        if lb > ub {
            // rounding on a (near) zero-width box; the IBP box is ordered by construction
            lb = ibp_out.lb;
            ub = ibp_out.ub;
            lb_source = Source::Ibp;
            ub_source = Source::Ibp;
        }
        Self {
            center: center.to_vec(),
            radius,
            ibp,
            upper_pass: Some(upper_pass),
            lower_pass: Some(lower_pass),
            lb_source,
            ub_source,
            bounds: ScalarBounds { lb, ub },
        }
    }

    pub fn bounds(&self) -> ScalarBounds {
        self.bounds
    }

    /// Accumulates `lb_adj * d(lb) + ub_adj * d(ub)` with respect to the
    /// parameters into `grads` and with respect to the center into
    /// `center_grad`.
    pub(crate) fn backward(
        &self,
        net: &Network,
        lb_adj: f64,
        ub_adj: f64,
        grads: &mut ParamGrads,
        center_grad: Option<&mut [f64]>,
    ) {
        let n = net.num_layers();
        let mut lower_adj: Vec<Vec<f64>> = self.ibp.lower.iter().map(|v| vec![0.0; v.len()]).collect();
        let mut upper_adj = lower_adj.clone();
        let mut center_grad = center_grad;
        match self.ub_source {
            Source::Ibp => upper_adj[n - 1][0] += ub_adj,
            Source::Crown => self.upper_pass.as_ref().unwrap().backward(
                net,
                &self.ibp,
                &self.center,
                self.radius,
                ub_adj,
                grads,
                center_grad.as_deref_mut(),
                &mut lower_adj,
                &mut upper_adj,
            ),
        }
        match self.lb_source {
            Source::Ibp => lower_adj[n - 1][0] += lb_adj,
            // lb = -value of the pass bounding -G
            Source::Crown => self.lower_pass.as_ref().unwrap().backward(
                net,
                &self.ibp,
                &self.center,
                self.radius,
                -lb_adj,
                grads,
                center_grad.as_deref_mut(),
                &mut lower_adj,
                &mut upper_adj,
            ),
        }
        self.ibp.backward(net, lower_adj, upper_adj, grads, center_grad);
    }
}

/// CROWN-IBP bounds without the IBP intersection; exposed for diagnostics.
pub fn raw_crown_bounds(net: &Network, set: &PerturbationSet<'_>) -> Result<ScalarBounds> {
    check_set(net, set)?;
    let ibp = IbpPass::run(net, set.center, set.radius);
    if net.num_layers() == 1 {
        return Ok(ibp.output());
    }
    let up = CrownPass::run(net, &ibp, set.center, set.radius, 1.0);
    let down = CrownPass::run(net, &ibp, set.center, set.radius, -1.0);
    Ok(ScalarBounds {
        lb: -down.value,
        ub: up.value,
    })
}
