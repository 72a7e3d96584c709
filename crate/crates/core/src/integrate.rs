//! Method-of-steps integration: the delayed state equation forward, the
//! advanced adjoint equation backward, and cost quadrature along trajectories.
//!
//! Fixed-step schemes with cubic-Hermite dense output. Integration spans are
//! split at the control's segment boundaries so discontinuous controls (bang
//! arcs, needle perturbations) never straddle a step.

use crate::error::{Error, Result};
use crate::mesh::{cubic_hermite, DelayVector, InterpRule, SampledFunction, Segment, TimeGrid};
use crate::problem::{extended_adjoint, OcpProblem};
use nalgebra::DVector;

/// One explicit fixed-step scheme. `step` returns the new value together with
/// the derivative at the step's start (stored for dense output).
pub trait Scheme: Send + Sync {
    fn name(&self) -> &'static str;
    fn order(&self) -> usize;
    fn step(
        &self,
        t: f64,
        h: f64,
        y: &DVector<f64>,
        rhs: &mut dyn FnMut(f64, &DVector<f64>) -> Result<DVector<f64>>,
    ) -> Result<(DVector<f64>, DVector<f64>)>;
}

pub struct Rk4;

impl Scheme for Rk4 {
    fn name(&self) -> &'static str {
        "rk4"
    }

    fn order(&self) -> usize {
        4
    }

    fn step(
        &self,
        t: f64,
        h: f64,
        y: &DVector<f64>,
        rhs: &mut dyn FnMut(f64, &DVector<f64>) -> Result<DVector<f64>>,
    ) -> Result<(DVector<f64>, DVector<f64>)> {
        let k1 = rhs(t, y)?;
        let k2 = rhs(t + 0.5 * h, &(y + &k1 * (0.5 * h)))?;
        let k3 = rhs(t + 0.5 * h, &(y + &k2 * (0.5 * h)))?;
        let k4 = rhs(t + h, &(y + &k3 * h))?;
        let next = y + (k1.clone() + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        Ok((next, k1))
    }
}

pub struct Heun;

impl Scheme for Heun {
    fn name(&self) -> &'static str {
        "heun"
    }

    fn order(&self) -> usize {
        2
    }

    fn step(
        &self,
        t: f64,
        h: f64,
        y: &DVector<f64>,
        rhs: &mut dyn FnMut(f64, &DVector<f64>) -> Result<DVector<f64>>,
    ) -> Result<(DVector<f64>, DVector<f64>)> {
        let k1 = rhs(t, y)?;
        let k2 = rhs(t + h, &(y + &k1 * h))?;
        let next = y + (k1.clone() + k2) * (0.5 * h);
        Ok((next, k1))
    }
}

/// Scheme registry; schemes are selected by name from configuration.
pub fn scheme_by_name(name: &str) -> Result<Box<dyn Scheme>> {
    match name {
        "rk4" => Ok(Box::new(Rk4)),
        "heun" => Ok(Box::new(Heun)),
        other => Err(Error::Config(format!(
            "unknown integration scheme '{other}' (available: rk4, heun)"
        ))),
    }
}

/// Fixed-step integrator configuration.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct IntegratorConfig {
    pub step: f64,
    pub scheme: String,
    pub dense_output: bool,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        IntegratorConfig {
            step: 1e-3,
            scheme: "rk4".into(),
            dense_output: true,
        }
    }
}

impl IntegratorConfig {
    pub fn with_step(step: f64) -> Self {
        IntegratorConfig {
            step,
            ..Default::default()
        }
    }

    pub fn scheme(&self) -> Result<Box<dyn Scheme>> {
        scheme_by_name(&self.scheme)
    }

    /// Resolution guard. Functional lags must either be resolved by at least
    /// four steps or be negligible next to the step (below `h/4`, handled by
    /// local dense extrapolation); lags in between alias the breakpoints.
    pub fn validate(&self, delays: &DelayVector) -> Result<()> {
        if !(self.step > 0.0) {
            return Err(Error::Config(format!("step must be positive, got {}", self.step)));
        }
        for (name, lag) in [
            ("state lag", delays.state_lag),
            ("control lag", delays.control_lag),
        ] {
            if lag > 0.25 * self.step && lag < 4.0 * self.step {
                return Err(Error::Config(format!(
                    "step {} under-resolves {name} {lag}: need step <= lag/4 (or lag <= step/4)",
                    self.step
                )));
            }
        }
        Ok(())
    }

    fn output_interp(&self) -> InterpRule {
        if self.dense_output {
            InterpRule::CubicHermite
        } else {
            InterpRule::Linear
        }
    }
}

/// Growing dense solution used while a pass is in flight. Stores nodes in
/// integration order (ascending for forward passes, descending for backward)
/// and interpolates with cubic Hermite; queries past the growing end fall
/// back to extending the last completed cell's cubic.
pub(crate) struct DenseTrack {
    ts: Vec<f64>,
    ys: Vec<DVector<f64>>,
    ks: Vec<DVector<f64>>,
    forward: bool,
}

impl DenseTrack {
    pub(crate) fn new(forward: bool, t0: f64, y0: DVector<f64>, k0: DVector<f64>) -> Self {
        DenseTrack {
            ts: vec![t0],
            ys: vec![y0],
            ks: vec![k0],
            forward,
        }
    }

    pub(crate) fn push(&mut self, t: f64, y: DVector<f64>, k: DVector<f64>) {
        self.ts.push(t);
        self.ys.push(y);
        self.ks.push(k);
    }

    pub(crate) fn last_value(&self) -> &DVector<f64> {
        self.ys.last().unwrap()
    }

    pub(crate) fn set_last_deriv(&mut self, k: DVector<f64>) {
        *self.ks.last_mut().unwrap() = k;
    }

    /// Interpolate at `t`; extends beyond the growing end when asked.
    pub(crate) fn eval(&self, t: f64) -> DVector<f64> {
        let n = self.ts.len();
        if n == 1 {
            let dt = t - self.ts[0];
            return &self.ys[0] + &self.ks[0] * dt;
        }
        // Index of the cell [ts[i], ts[i+1]] containing t (in track order).
        let inside = |a: f64, b: f64| {
            if self.forward {
                t >= a && t <= b
            } else {
                t <= a && t >= b
            }
        };
        let past_end = if self.forward {
            t > *self.ts.last().unwrap()
        } else {
            t < *self.ts.last().unwrap()
        };
        let i = if past_end {
            n - 2
        } else {
            // Binary search over monotone ts.
            let mut lo = 0usize;
            let mut hi = n - 1;
            while hi - lo > 1 {
                let mid = (lo + hi) / 2;
                let below = if self.forward { self.ts[mid] <= t } else { self.ts[mid] >= t };
                if below {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            debug_assert!(inside(self.ts[lo], self.ts[lo + 1]) || t == self.ts[lo]);
            lo
        };
        cubic_hermite(
            self.ts[i],
            self.ts[i + 1],
            &self.ys[i],
            &self.ys[i + 1],
            &self.ks[i],
            &self.ks[i + 1],
            t,
        )
    }

}

/// Piecewise-uniform span decomposition of `[t0, t1]` honoring interior
/// breakpoints. Each span gets `ceil(len/h)` steps.
fn spans(t0: f64, t1: f64, h: f64, breakpoints: &[f64]) -> Vec<(f64, f64, usize)> {
    let mut cuts: Vec<f64> = breakpoints
        .iter()
        .copied()
        .filter(|&b| b > t0 + 1e-12 && b < t1 - 1e-12)
        .collect();
    cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    cuts.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    let mut edges = vec![t0];
    edges.extend(cuts);
    edges.push(t1);
    edges
        .windows(2)
        .map(|w| {
            let len = w[1] - w[0];
            let n = ((len / h).ceil() as usize).max(1);
            (w[0], w[1], n)
        })
        .collect()
}

/// All segment edges of a sampled function (potential discontinuities or
/// kinks), shifted by each offset and kept when they land inside `(t0, t1)`.
/// A jump of the function at `b` enters an integrand reading `f(t - lag)` at
/// `t = b + lag`, so integration spans are cut there.
fn shifted_edges(f: &SampledFunction, offsets: &[f64], t0: f64, t1: f64) -> Vec<f64> {
    let mut edges: Vec<f64> = f.segments().iter().map(|s| s.grid().t_start()).collect();
    edges.push(f.t_end());
    let mut out = Vec::new();
    for &off in offsets {
        for &e in &edges {
            let b = e + off;
            if b > t0 && b < t1 {
                out.push(b);
            }
        }
    }
    out
}

fn check_finite(y: &DVector<f64>, bound: f64, t: f64) -> Result<()> {
    if y.iter().any(|v| !v.is_finite()) || y.amax() > bound {
        return Err(Error::NonFiniteState { t });
    }
    Ok(())
}

/// Integrate the delayed state equation forward on `[0, t_f]` from the
/// history, returning the state on `[-delta, t_f]` (history included).
pub fn integrate_state(
    prob: &OcpProblem,
    delays: &DelayVector,
    control: &SampledFunction,
    t_f: f64,
    cfg: &IntegratorConfig,
) -> Result<SampledFunction> {
    cfg.validate(delays)?;
    let scheme = cfg.scheme()?;
    if control.t_end() < t_f - 1e-9 {
        return Err(Error::invalid(
            "control",
            format!("control ends at {} but horizon is {t_f}", control.t_end()),
        ));
    }

    let hist = &prob.history_state;
    let x0 = prob.initial_state();
    let tau_t = delays.time_lag;
    let tau_x = delays.state_lag;
    let tau_u = delays.control_lag;

    let mut track = DenseTrack::new(true, 0.0, x0.clone(), DVector::zeros(prob.state_dim));

    // Control reads at the upper edge of the current step take the left
    // limit, so discontinuities sitting exactly on a step edge never leak
    // into the step below them.
    let u_at = |tt: f64, upper_edge: f64| -> Result<DVector<f64>> {
        if (tt - upper_edge).abs() <= 1e-12 * (1.0 + upper_edge.abs()) {
            control.eval_left_limit(tt)
        } else {
            control.eval(tt)
        }
    };
    let u_pair = |tt: f64, upper_edge: f64| -> Result<(DVector<f64>, DVector<f64>)> {
        let u_now = u_at(tt, upper_edge)?;
        let v = if tau_u == 0.0 {
            u_now.clone()
        } else if (tt - upper_edge).abs() <= 1e-12 * (1.0 + upper_edge.abs()) {
            control.eval_left_limit(tt - tau_u)?
        } else {
            control.eval(tt - tau_u)?
        };
        Ok((u_now, v))
    };

    // The RHS resolves delayed arguments from history, the completed track,
    // or (for zero lag) the in-flight stage value.
    let eval_delayed_state =
        |track: &DenseTrack, t: f64, stage_y: &DVector<f64>| -> Result<DVector<f64>> {
            if tau_x == 0.0 {
                return Ok(stage_y.clone());
            }
            let td = t - tau_x;
            if td <= 0.0 {
                hist.eval(td)
            } else {
                Ok(track.eval(td))
            }
        };

    // Initial derivative for dense output.
    {
        let y = x0.clone();
        let yd = eval_delayed_state(&track, 0.0, &y)?;
        let (u_now, v) = u_pair(0.0, f64::NAN)?;
        let k0 = (prob.dynamics)(0.0, -tau_t, &y, &yd, &u_now, &v);
        track.set_last_deriv(k0);
    }

    let mut segments: Vec<Segment> = hist.segments().to_vec();
    // The integrand reads u(t) and u(t - control_lag); the delayed-state
    // argument crosses the history junction at t = state_lag.
    let mut bps = shifted_edges(control, &[0.0, tau_u], 0.0, t_f);
    if tau_x > 0.0 && tau_x < t_f {
        bps.push(tau_x);
    }
    for (a, b, n) in spans(0.0, t_f, cfg.step, &bps) {
        let h = (b - a) / n as f64;
        let mut node_values = vec![track.last_value().clone()];
        let mut node_derivs: Vec<DVector<f64>> = Vec::with_capacity(n + 1);
        for k in 0..n {
            let t = a + k as f64 * h;
            let t_next = if k == n - 1 { b } else { a + (k + 1) as f64 * h };
            let y = track.last_value().clone();
            let mut rhs = |tt: f64, yy: &DVector<f64>| -> Result<DVector<f64>> {
                let yd = eval_delayed_state(&track, tt, yy)?;
                let (u_now, v) = u_pair(tt, t_next)?;
                Ok((prob.dynamics)(tt, tt - tau_t, yy, &yd, &u_now, &v))
            };
            let (y_next, k1) = scheme.step(t, t_next - t, &y, &mut rhs)?;
            check_finite(&y_next, prob.state_bound, t_next)?;
            track.set_last_deriv(k1.clone());
            node_derivs.push(k1);
            track.push(t_next, y_next.clone(), DVector::zeros(prob.state_dim));
            node_values.push(y_next);
        }
        // Derivative at the span's final node (left limit of the last cell).
        let t_end = b;
        let y_end = track.last_value().clone();
        let yd = eval_delayed_state(&track, t_end, &y_end)?;
        let (u_now, v) = u_pair(t_end, t_end)?;
        let k_end = (prob.dynamics)(t_end, t_end - tau_t, &y_end, &yd, &u_now, &v);
        track.set_last_deriv(k_end.clone());
        node_derivs.push(k_end);

        let grid = TimeGrid::new(a, b, n)?;
        segments.push(Segment::new(
            grid,
            node_values,
            Some(node_derivs),
            cfg.output_interp(),
        )?);
    }
    SampledFunction::new(segments)
}

/// Composite Simpson quadrature of the running cost along `(x, u)`.
pub fn integrate_cost(
    prob: &OcpProblem,
    delays: &DelayVector,
    x: &SampledFunction,
    u: &SampledFunction,
    t_f: f64,
    cfg: &IntegratorConfig,
) -> Result<f64> {
    cfg.validate(delays)?;
    let tau_t = delays.time_lag;
    let tau_x = delays.state_lag;
    let tau_u = delays.control_lag;
    let g = |t: f64, at_upper: bool| -> Result<f64> {
        let xt = x.eval(t)?;
        let yt = if tau_x == 0.0 { xt.clone() } else { x.eval(t - tau_x)? };
        let ut = if at_upper { u.eval_left_limit(t)? } else { u.eval(t)? };
        let vt = if tau_u == 0.0 {
            ut.clone()
        } else if at_upper {
            u.eval_left_limit(t - tau_u)?
        } else {
            u.eval(t - tau_u)?
        };
        Ok((prob.running_cost)(t, t - tau_t, &xt, &yt, &ut, &vt))
    };
    let bps = shifted_edges(u, &[0.0, tau_u], 0.0, t_f);
    let mut total = 0.0;
    for (a, b, n) in spans(0.0, t_f, cfg.step, &bps) {
        let h = (b - a) / n as f64;
        for k in 0..n {
            let t0 = a + k as f64 * h;
            let t1 = if k == n - 1 { b } else { t0 + h };
            total += (t1 - t0) / 6.0
                * (g(t0, false)? + 4.0 * g(0.5 * (t0 + t1), false)? + g(t1, true)?);
        }
    }
    Ok(total)
}

/// Integrate the adjoint equation backward from `p(t_f) = p_terminal`.
///
/// The advanced adjoint argument reads from the tail already computed within
/// the current pass; the advanced-term indicator vanishes identically on
/// `(t_f - state_lag, t_f]`.
#[allow(clippy::too_many_arguments)]
pub fn integrate_adjoint(
    prob: &OcpProblem,
    delays: &DelayVector,
    x: &SampledFunction,
    u: &SampledFunction,
    p_terminal: &DVector<f64>,
    p0: f64,
    t_f: f64,
    cfg: &IntegratorConfig,
) -> Result<SampledFunction> {
    cfg.validate(delays)?;
    let scheme = cfg.scheme()?;
    let n_dim = prob.state_dim;
    let tau_t = delays.time_lag;
    let tau_x = delays.state_lag;
    let tau_u = delays.control_lag;

    let mut track = DenseTrack::new(false, t_f, p_terminal.clone(), DVector::zeros(n_dim));

    // The indicator cuts off at t_f - tau_x. Integration spans never straddle
    // the cutoff (it is a forced breakpoint); a stage landing exactly on it
    // takes the gate value of the span it belongs to, so the advanced
    // contribution is identically zero on the terminal span.
    let cutoff = t_f - tau_x;
    let tie_tol = 1e-12 * (1.0 + t_f.abs());
    let gate_on = |t: f64, span_above_cutoff: bool| -> bool {
        if t < cutoff - tie_tol {
            true
        } else if t > cutoff + tie_tol {
            false
        } else {
            !span_above_cutoff
        }
    };

    let rhs_at = |track: &DenseTrack,
                  t: f64,
                  p: &DVector<f64>,
                  span_above_cutoff: bool,
                  upper_edge: f64|
     -> Result<DVector<f64>> {
        let at_upper = (t - upper_edge).abs() <= 1e-12 * (1.0 + upper_edge.abs());
        let u_read = |tt: f64| -> Result<DVector<f64>> {
            if at_upper {
                u.eval_left_limit(tt)
            } else {
                u.eval(tt)
            }
        };
        let xt = x.eval(t)?;
        let yt = if tau_x == 0.0 { xt.clone() } else { x.eval(t - tau_x)? };
        let ut = u_read(t)?;
        let vt = if tau_u == 0.0 { ut.clone() } else { u_read(t - tau_u)? };
        let grad_x = (prob.jac_state)(t, t - tau_t, &xt, &yt, &ut, &vt).transpose()
            * extended_adjoint(p, p0);
        let mut dp = -grad_x;
        if gate_on(t, span_above_cutoff) {
            let ta = (t + tau_x).min(t_f);
            let x_a = x.eval(ta)?;
            let y_a = xt.clone();
            let u_a = u_read(ta)?;
            let v_a = if tau_u == 0.0 { u_a.clone() } else { u_read(ta - tau_u)? };
            let p_a = if tau_x == 0.0 { p.clone() } else { track.eval(ta) };
            let grad_y = (prob.jac_delayed_state)(ta, ta - tau_t, &x_a, &y_a, &u_a, &v_a)
                .transpose()
                * extended_adjoint(&p_a, p0);
            dp -= grad_y;
        }
        Ok(dp)
    };

    {
        let above = t_f > cutoff + tie_tol;
        let k0 = rhs_at(&track, t_f, p_terminal, above, t_f)?;
        track.set_last_deriv(k0);
    }

    // The backward integrand reads u at t, t - tau_u, t + tau_x and
    // t + tau_x - tau_u, and x at t, t - tau_x and t + tau_x.
    let mut bps = shifted_edges(u, &[0.0, tau_u, -tau_x, tau_u - tau_x], 0.0, t_f);
    bps.extend(shifted_edges(x, &[0.0, tau_x, -tau_x], 0.0, t_f));
    if tau_x > 0.0 && t_f - tau_x > 0.0 {
        bps.push(t_f - tau_x);
    }
    if tau_u > 0.0 && t_f - tau_u > 0.0 {
        bps.push(t_f - tau_u);
    }

    let mut rev_segments: Vec<Segment> = Vec::new();
    let mut all_spans = spans(0.0, t_f, cfg.step, &bps);
    all_spans.reverse();
    for (a, b, n) in all_spans {
        // Integrate from b down to a.
        let above = a >= cutoff - tie_tol;
        let h = (b - a) / n as f64;
        let mut node_values = vec![track.last_value().clone()];
        let mut node_derivs: Vec<DVector<f64>> = Vec::with_capacity(n + 1);
        for k in 0..n {
            let t = b - k as f64 * h;
            let t_next = if k == n - 1 { a } else { b - (k + 1) as f64 * h };
            let p = track.last_value().clone();
            let mut rhs = |tt: f64, pp: &DVector<f64>| -> Result<DVector<f64>> {
                rhs_at(&track, tt, pp, above, t)
            };
            let (p_next, k1) = scheme.step(t, t_next - t, &p, &mut rhs)?;
            check_finite(&p_next, prob.state_bound * 1e3, t_next)?;
            track.set_last_deriv(k1.clone());
            node_derivs.push(k1);
            track.push(t_next, p_next.clone(), DVector::zeros(n_dim));
            node_values.push(p_next);
        }
        let p_end = track.last_value().clone();
        let k_end = rhs_at(&track, a, &p_end, above, f64::NAN)?;
        track.set_last_deriv(k_end.clone());
        node_derivs.push(k_end);

        node_values.reverse();
        node_derivs.reverse();
        let grid = TimeGrid::new(a, b, n)?;
        rev_segments.push(Segment::new(
            grid,
            node_values,
            Some(node_derivs),
            cfg.output_interp(),
        )?);
    }
    rev_segments.reverse();
    SampledFunction::new(rev_segments)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::InterpRule;
    use crate::problem::{CostFn, DynamicsFn, OcpBuilder};
    use crate::problem::{ControlSet, Target};
    use crate::problem::FinalTimeMode;
    use approx::assert_relative_eq;
    use nalgebra::dvector;
    use std::sync::Arc;

    fn pure_dde_problem(delta: f64) -> OcpProblem {
        // x' = -x(t - 1), constant history 1, no control influence.
        let dyn_f: DynamicsFn = Arc::new(|_t, _s, _x, y, _u, _v| dvector![-y[0]]);
        let cost: CostFn = Arc::new(|_t, _s, _x, _y, _u, _v| 0.0);
        let hist_x = SampledFunction::constant(-delta, 0.0, dvector![1.0]).unwrap();
        let hist_u = SampledFunction::constant(-delta, 0.0, dvector![0.0]).unwrap();
        OcpBuilder::new(
            "pure-dde",
            1,
            1,
            dyn_f,
            cost,
            ControlSet::Box {
                lower: dvector![-1.0],
                upper: dvector![1.0],
            },
            Target::free(1),
            hist_x,
            hist_u,
            FinalTimeMode::Fixed(2.0),
        )
        .build()
        .unwrap()
    }

    fn zero_control(delta: f64, t_f: f64) -> SampledFunction {
        SampledFunction::from_fn(-delta, t_f, 8, InterpRule::PiecewiseConstant, |_| dvector![0.0])
            .unwrap()
    }

    /// Piecewise-polynomial solution of x' = -x(t-1), x == 1 on [-1, 0],
    /// continued interval by interval through exact polynomial integration.
    /// On [0,1] this is 1 - t; on [1,2] it is t^2/2 - 2t + 3/2.
    pub(crate) fn dde_exact(t: f64) -> f64 {
        if t <= 0.0 {
            return 1.0;
        }
        // Coefficients of x on [k, k+1] in powers of (t - k).
        let mut coeffs = vec![1.0f64]; // history segment [-1, 0]
        let mut left_value = 1.0;
        let mut k = 0usize;
        loop {
            // x'(t) = -x(t-1): integrate the previous segment's polynomial.
            let mut next = vec![0.0; coeffs.len() + 1];
            next[0] = left_value;
            for (i, c) in coeffs.iter().enumerate() {
                next[i + 1] = -c / (i as f64 + 1.0);
            }
            if t <= (k + 1) as f64 {
                let s = t - k as f64;
                return next.iter().rev().fold(0.0, |acc, c| acc * s + c);
            }
            left_value = next.iter().sum();
            coeffs = next;
            k += 1;
        }
    }

    #[test]
    fn dde_exact_matches_hand_pieces() {
        approx::assert_relative_eq!(dde_exact(0.5), 0.5, epsilon = 1e-15);
        approx::assert_relative_eq!(dde_exact(1.5), 1.5 * 1.5 / 2.0 - 3.0 + 1.5, epsilon = 1e-15);
        approx::assert_relative_eq!(dde_exact(2.0), 2.0 - 4.0 + 1.5, epsilon = 1e-15);
    }

    #[test]
    fn zero_field_keeps_initial_state() {
        let delta = 1.0;
        let dyn_f: DynamicsFn = Arc::new(|_t, _s, _x, _y, _u, _v| dvector![0.0]);
        let cost: CostFn = Arc::new(|_t, _s, _x, _y, _u, _v| 0.0);
        let hist_x = SampledFunction::constant(-delta, 0.0, dvector![2.5]).unwrap();
        let hist_u = SampledFunction::constant(-delta, 0.0, dvector![0.0]).unwrap();
        let prob = OcpBuilder::new(
            "still",
            1,
            1,
            dyn_f,
            cost,
            ControlSet::Ball { radius: 1.0 },
            Target::free(1),
            hist_x,
            hist_u,
            FinalTimeMode::Fixed(1.0),
        )
        .build()
        .unwrap();
        let delays = DelayVector::zero(delta);
        let u = zero_control(delta, 1.0);
        let x = integrate_state(&prob, &delays, &u, 1.0, &IntegratorConfig::with_step(0.05)).unwrap();
        for t in [0.0, 0.33, 1.0] {
            assert_relative_eq!(x.eval(t).unwrap()[0], 2.5, epsilon = 1e-12);
        }
    }

    #[test]
    fn method_of_steps_matches_hand_solution() {
        let prob = pure_dde_problem(1.0);
        let delays = DelayVector::new(0.0, 1.0, 0.0, 1.0).unwrap();
        let u = zero_control(1.0, 2.0);
        let cfg = IntegratorConfig::with_step(1e-3);
        let x = integrate_state(&prob, &delays, &u, 2.0, &cfg).unwrap();
        let mut worst: f64 = 0.0;
        let mut t = 0.0;
        while t <= 2.0 {
            worst = worst.max((x.eval(t).unwrap()[0] - dde_exact(t)).abs());
            t += 0.01;
        }
        assert!(worst < 1e-8, "max error {worst}");
    }

    #[test]
    fn convergence_order_of_rk4_dense_output() {
        // The solution's polynomial degree grows by one per unit interval; a
        // horizon of 6 makes the local degree exceed the scheme's order so the
        // truncation error is observable.
        let prob = pure_dde_problem(1.0);
        let delays = DelayVector::new(0.0, 1.0, 0.0, 1.0).unwrap();
        let t_f = 6.0;
        let u = zero_control(1.0, t_f);
        let mut errs = Vec::new();
        let hs = [1e-2, 5e-3, 2.5e-3, 1.25e-3];
        for &h in &hs {
            let x = integrate_state(&prob, &delays, &u, t_f, &IntegratorConfig::with_step(h)).unwrap();
            let mut worst: f64 = 0.0;
            let mut t = 0.0;
            while t <= t_f {
                worst = worst.max((x.eval(t).unwrap()[0] - dde_exact(t)).abs());
                t += 0.0173;
            }
            errs.push(worst);
        }
        // Least-squares slope of log(err) against log(h).
        let slope = log_log_slope(&hs, &errs);
        assert!(slope >= 2.8, "observed order {slope}, errors {errs:?}");
    }

    pub(crate) fn log_log_slope(xs: &[f64], ys: &[f64]) -> f64 {
        let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
        let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
        let n = lx.len() as f64;
        let mx = lx.iter().sum::<f64>() / n;
        let my = ly.iter().sum::<f64>() / n;
        let num: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
        let den: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
        num / den
    }

    #[test]
    fn cost_quadrature_exact_for_polynomials() {
        let delta = 0.5;
        let dyn_f: DynamicsFn = Arc::new(|_t, _s, _x, _y, _u, _v| dvector![0.0]);
        let cost: CostFn = Arc::new(|t, _s, _x, _y, _u, _v| t);
        let hist_x = SampledFunction::constant(-delta, 0.0, dvector![0.0]).unwrap();
        let hist_u = SampledFunction::constant(-delta, 0.0, dvector![0.0]).unwrap();
        let prob = OcpBuilder::new(
            "ramp-cost",
            1,
            1,
            dyn_f,
            cost,
            ControlSet::Ball { radius: 1.0 },
            Target::free(1),
            hist_x,
            hist_u,
            FinalTimeMode::Fixed(2.0),
        )
        .build()
        .unwrap();
        let delays = DelayVector::zero(delta);
        let u = zero_control(delta, 2.0);
        let cfg = IntegratorConfig::with_step(0.1);
        let x = integrate_state(&prob, &delays, &u, 2.0, &cfg).unwrap();
        let c = integrate_cost(&prob, &delays, &x, &u, 2.0, &cfg).unwrap();
        assert_relative_eq!(c, 2.0, epsilon = 1e-12);

        // Unit running cost over a unit horizon.
        let one: CostFn = Arc::new(|_t, _s, _x, _y, _u, _v| 1.0);
        let mut prob2 = prob.clone();
        prob2.running_cost = one;
        let c = integrate_cost(&prob2, &delays, &x, &u, 1.0, &cfg).unwrap();
        assert_relative_eq!(c, 1.0, epsilon = 1e-13);

        let zero: CostFn = Arc::new(|_t, _s, _x, _y, _u, _v| 0.0);
        let mut prob3 = prob.clone();
        prob3.running_cost = zero;
        let c = integrate_cost(&prob3, &delays, &x, &u, 2.0, &cfg).unwrap();
        assert_eq!(c, 0.0);
    }

    #[test]
    fn adjoint_constant_when_jacobians_vanish() {
        // x' = u: jac_x of (f, f0) is zero, so p stays at its terminal value.
        let dyn_f: DynamicsFn = Arc::new(|_t, _s, _x, _y, u, _v| dvector![u[0]]);
        let cost: CostFn = Arc::new(|_t, _s, _x, _y, _u, _v| 0.0);
        let hist_x = SampledFunction::constant(-0.5, 0.0, dvector![0.0]).unwrap();
        let hist_u = SampledFunction::constant(-0.5, 0.0, dvector![0.0]).unwrap();
        let prob = OcpBuilder::new(
            "drift",
            1,
            1,
            dyn_f,
            cost,
            ControlSet::Box {
                lower: dvector![-1.0],
                upper: dvector![1.0],
            },
            Target::free(1),
            hist_x,
            hist_u,
            FinalTimeMode::Fixed(1.0),
        )
        .build()
        .unwrap();
        let delays = DelayVector::zero(0.5);
        let cfg = IntegratorConfig::with_step(0.02);
        let u = SampledFunction::from_fn(-0.5, 1.0, 30, InterpRule::Linear, |t| dvector![t.max(0.0)])
            .unwrap();
        let x = integrate_state(&prob, &delays, &u, 1.0, &cfg).unwrap();
        let p = integrate_adjoint(&prob, &delays, &x, &u, &dvector![3.0], -1.0, 1.0, &cfg).unwrap();
        for t in [0.0, 0.4, 1.0] {
            assert_relative_eq!(p.eval(t).unwrap()[0], 3.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn advanced_term_is_exactly_zero_past_horizon_cutoff() {
        // x' = y (delayed state) makes jac_delayed_state nonzero; on
        // (t_f - lag, t_f] the adjoint derivative must come from jac_state only,
        // which vanishes here, so p is exactly constant on that tail.
        let dyn_f: DynamicsFn = Arc::new(|_t, _s, _x, y, _u, _v| dvector![y[0]]);
        let cost: CostFn = Arc::new(|_t, _s, _x, _y, _u, _v| 0.0);
        let hist_x = SampledFunction::constant(-1.0, 0.0, dvector![1.0]).unwrap();
        let hist_u = SampledFunction::constant(-1.0, 0.0, dvector![0.0]).unwrap();
        let prob = OcpBuilder::new(
            "delayed-drift",
            1,
            1,
            dyn_f,
            cost,
            ControlSet::Ball { radius: 1.0 },
            Target::free(1),
            hist_x,
            hist_u,
            FinalTimeMode::Fixed(1.0),
        )
        .build()
        .unwrap();
        let delays = DelayVector::new(0.0, 0.4, 0.0, 1.0).unwrap();
        let cfg = IntegratorConfig::with_step(0.01);
        let u = zero_control(1.0, 1.0);
        let x = integrate_state(&prob, &delays, &u, 1.0, &cfg).unwrap();
        let p = integrate_adjoint(&prob, &delays, &x, &u, &dvector![2.0], -1.0, 1.0, &cfg).unwrap();
        // Tail [0.6, 1.0]: identically the terminal value.
        for t in [0.6001, 0.8, 1.0] {
            assert_eq!(p.eval(t).unwrap()[0], 2.0);
        }
        // Below the cutoff the advanced term acts.
        assert!((p.eval(0.3).unwrap()[0] - 2.0).abs() > 1e-3);
    }

    #[test]
    fn resolution_guard_rejects_aliasing_delays() {
        let cfg = IntegratorConfig::with_step(0.01);
        // In the danger band (h/4, 4h).
        let bad = DelayVector::new(0.0, 0.02, 0.0, 1.0).unwrap();
        assert!(cfg.validate(&bad).is_err());
        // Well resolved.
        let ok = DelayVector::new(0.0, 0.2, 0.0, 1.0).unwrap();
        assert!(cfg.validate(&ok).is_ok());
        // Negligible.
        let tiny = DelayVector::new(0.0, 0.001, 0.0, 1.0).unwrap();
        assert!(cfg.validate(&tiny).is_ok());
        // The explicit time shift needs no resolution.
        let shift_only = DelayVector::new(0.02, 0.0, 0.0, 1.0).unwrap();
        assert!(cfg.validate(&shift_only).is_ok());
    }

    #[test]
    fn non_finite_state_detected() {
        let dyn_f: DynamicsFn = Arc::new(|_t, _s, x, _y, _u, _v| dvector![x[0] * x[0]]);
        let cost: CostFn = Arc::new(|_t, _s, _x, _y, _u, _v| 0.0);
        let hist_x = SampledFunction::constant(-0.5, 0.0, dvector![5.0]).unwrap();
        let hist_u = SampledFunction::constant(-0.5, 0.0, dvector![0.0]).unwrap();
        let prob = OcpBuilder::new(
            "blowup",
            1,
            1,
            dyn_f,
            cost,
            ControlSet::Ball { radius: 1.0 },
            Target::free(1),
            hist_x,
            hist_u,
            FinalTimeMode::Fixed(2.0),
        )
        .with_state_bound(1e6)
        .build()
        .unwrap();
        let delays = DelayVector::zero(0.5);
        let u = zero_control(0.5, 2.0);
        let res = integrate_state(&prob, &delays, &u, 2.0, &IntegratorConfig::with_step(1e-3));
        assert!(matches!(res, Err(Error::NonFiniteState { .. })));
    }
}
