//! Needle-like control variations, the linear variation system they
//! propagate through, endpoint-cone sampling, and the multiplier inequality
//! — the machinery that certifies first-order optimality geometrically.
//!
//! Everything here works on the extended phase (state plus running cost), so
//! vectors have dimension `n + 1` with the cost row last.

use crate::error::{Error, Result};
use crate::integrate::{integrate_cost, integrate_state, IntegratorConfig};
use crate::mesh::{DelayVector, InterpRule, SampledFunction, Segment, TimeGrid};
use crate::pmp::Extremal;
use crate::problem::{extended_adjoint, OcpProblem};
use nalgebra::DVector;
use serde::Serialize;

/// Extended field along the extremal at `t`; controls are read as left
/// limits when `left` is set (endpoint evaluations).
fn extended_field_at(
    prob: &OcpProblem,
    delays: &DelayVector,
    ext: &Extremal,
    t: f64,
    left: bool,
) -> Result<DVector<f64>> {
    let x = ext.state.eval(t)?;
    let y = if delays.state_lag == 0.0 {
        x.clone()
    } else {
        ext.state.eval(t - delays.state_lag)?
    };
    let read = |tt: f64| -> Result<DVector<f64>> {
        if left {
            ext.control.eval_left_limit(tt)
        } else {
            ext.control.eval(tt)
        }
    };
    let u = read(t)?;
    let v = if delays.control_lag == 0.0 {
        u.clone()
    } else {
        read(t - delays.control_lag)?
    };
    Ok(prob.extended_field(t, t - delays.time_lag, &x, &y, &u, &v))
}

/// First-order effect of swapping the control value to `z`:
/// the increment of the extended field at `s` (direct slot) and at
/// `s + control_lag` (delayed slot; zero past the horizon cutoff).
pub fn control_swap_vectors(
    prob: &OcpProblem,
    delays: &DelayVector,
    ext: &Extremal,
    s: f64,
    z: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    if !(0.0 < s && s < ext.t_f) {
        return Err(Error::OutOfDomain {
            t: s,
            lo: 0.0,
            hi: ext.t_f,
        });
    }
    let lag_t = delays.time_lag;
    let lag_x = delays.state_lag;
    let lag_u = delays.control_lag;

    let x = ext.state.eval(s)?;
    let y = if lag_x == 0.0 { x.clone() } else { ext.state.eval(s - lag_x)? };
    let u_s = ext.control.eval(s)?;
    let v_s = if lag_u == 0.0 { u_s.clone() } else { ext.control.eval(s - lag_u)? };
    let minus = prob.extended_field(s, s - lag_t, &x, &y, z, &v_s)
        - prob.extended_field(s, s - lag_t, &x, &y, &u_s, &v_s);

    let n1 = prob.state_dim + 1;
    let plus = if lag_u > 0.0 && s + lag_u <= ext.t_f {
        let ta = s + lag_u;
        let xa = ext.state.eval(ta)?;
        let ya = if lag_x == 0.0 { xa.clone() } else { ext.state.eval(ta - lag_x)? };
        let ua = ext.control.eval(ta)?;
        prob.extended_field(ta, ta - lag_t, &xa, &ya, &ua, z)
            - prob.extended_field(ta, ta - lag_t, &xa, &ya, &ua, &u_s)
    } else {
        DVector::zeros(n1)
    };
    Ok((minus, plus))
}

/// Propagate an extended perturbation through the linearized delayed
/// dynamics along the extremal: starts at `psi(s) = xi`, is zero on
/// `(s - state_lag, s)`, and is returned at `t_query`.
pub fn variation_vector(
    prob: &OcpProblem,
    delays: &DelayVector,
    ext: &Extremal,
    s: f64,
    xi: &DVector<f64>,
    t_query: f64,
    cfg: &IntegratorConfig,
) -> Result<DVector<f64>> {
    if !(s < t_query && t_query <= ext.t_f + 1e-12) {
        return Err(Error::OutOfDomain {
            t: t_query,
            lo: s,
            hi: ext.t_f,
        });
    }
    let n = prob.state_dim;
    let n1 = n + 1;
    if xi.len() != n1 {
        return Err(Error::DimensionMismatch {
            expected: n1,
            got: xi.len(),
        });
    }
    let lag_t = delays.time_lag;
    let lag_x = delays.state_lag;
    let lag_u = delays.control_lag;

    // Growing dense history of psi for the delayed read.
    let mut ts = vec![s];
    let mut ys = vec![xi.clone()];
    let eval_psi = |ts: &[f64], ys: &[DVector<f64>], td: f64| -> DVector<f64> {
        if td < s {
            return DVector::zeros(n1);
        }
        // Linear interpolation over the recorded nodes.
        match ts.binary_search_by(|a| a.partial_cmp(&td).unwrap()) {
            Ok(i) => ys[i].clone(),
            Err(i) => {
                if i == 0 {
                    ys[0].clone()
                } else if i >= ts.len() {
                    ys[ts.len() - 1].clone()
                } else {
                    let w = (td - ts[i - 1]) / (ts[i] - ts[i - 1]);
                    &ys[i - 1] * (1.0 - w) + &ys[i] * w
                }
            }
        }
    };

    let rhs = |ts: &[f64], ys: &[DVector<f64>], t: f64, psi: &DVector<f64>| -> Result<DVector<f64>> {
        let x = ext.state.eval(t)?;
        let y = if lag_x == 0.0 { x.clone() } else { ext.state.eval(t - lag_x)? };
        let u = ext.control.eval(t)?;
        let v = if lag_u == 0.0 { u.clone() } else { ext.control.eval(t - lag_u)? };
        let jx = (prob.jac_state)(t, t - lag_t, &x, &y, &u, &v);
        let jy = (prob.jac_delayed_state)(t, t - lag_t, &x, &y, &u, &v);
        let psi_state = psi.rows(0, n).clone_owned();
        let psi_delayed = if lag_x == 0.0 {
            psi_state.clone()
        } else {
            eval_psi(ts, ys, t - lag_x).rows(0, n).clone_owned()
        };
        Ok(jx * psi_state + jy * psi_delayed)
    };

    // Fixed-step fourth-order integration from s to t_query, landing on
    // t_query exactly.
    let total = t_query - s;
    let n_steps = ((total / cfg.step).ceil() as usize).max(1);
    let h = total / n_steps as f64;
    let mut psi = xi.clone();
    let mut t = s;
    for k in 0..n_steps {
        let t_next = if k == n_steps - 1 { t_query } else { s + (k + 1) as f64 * h };
        let hh = t_next - t;
        let k1 = rhs(&ts, &ys, t, &psi)?;
        let k2 = rhs(&ts, &ys, t + 0.5 * hh, &(&psi + &k1 * (0.5 * hh)))?;
        let k3 = rhs(&ts, &ys, t + 0.5 * hh, &(&psi + &k2 * (0.5 * hh)))?;
        let k4 = rhs(&ts, &ys, t_next, &(&psi + &k3 * hh))?;
        psi += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (hh / 6.0);
        if psi.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState { t: t_next });
        }
        t = t_next;
        ts.push(t);
        ys.push(psi.clone());
    }
    Ok(psi)
}

/// Endpoint effect of the swap at `s` with value `z`: the direct variation
/// plus the delayed-slot variation started at `s + control_lag`.
pub fn endpoint_variation(
    prob: &OcpProblem,
    delays: &DelayVector,
    ext: &Extremal,
    s: f64,
    z: &DVector<f64>,
    cfg: &IntegratorConfig,
) -> Result<DVector<f64>> {
    let (minus, plus) = control_swap_vectors(prob, delays, ext, s, z)?;
    let mut total = variation_vector(prob, delays, ext, s, &minus, ext.t_f, cfg)?;
    if plus.amax() > 0.0 {
        let sa = s + delays.control_lag;
        if sa < ext.t_f {
            total += variation_vector(prob, delays, ext, sa, &plus, ext.t_f, cfg)?;
        } else {
            total += plus;
        }
    }
    Ok(total)
}

/// A needle perturbation family: constant control values on shrinking
/// intervals `(t_i - w_i eta, t_i]` plus a horizon shift `d eta`.
#[derive(Debug, Clone)]
pub struct NeedleSpec {
    pub times: Vec<f64>,
    pub values: Vec<DVector<f64>>,
    /// Relative widths; the interval i has width `width_weights[i] * eta`.
    pub width_weights: Vec<f64>,
    /// Horizon shift per unit eta (zero for pure needle checks).
    pub shift_weight: f64,
}

impl NeedleSpec {
    pub fn single(time: f64, value: DVector<f64>) -> Self {
        NeedleSpec {
            times: vec![time],
            values: vec![value],
            width_weights: vec![1.0],
            shift_weight: 0.0,
        }
    }

    pub fn pure_shift(shift_weight: f64) -> Self {
        NeedleSpec {
            times: Vec::new(),
            values: Vec::new(),
            width_weights: Vec::new(),
            shift_weight,
        }
    }

    fn validate(&self, ext: &Extremal, eta_max: f64) -> Result<()> {
        if self.times.len() != self.values.len() || self.times.len() != self.width_weights.len() {
            return Err(Error::invalid("needle spec", "times/values/widths lengths differ"));
        }
        for w in self.times.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::invalid("needle spec", "times must be strictly increasing"));
            }
        }
        for (&t, &w) in self.times.iter().zip(&self.width_weights) {
            if !(0.0 < t && t < ext.t_f) {
                return Err(Error::invalid("needle spec", format!("time {t} outside (0, t_f)")));
            }
            if t - w * eta_max < ext.state.t_start() {
                return Err(Error::invalid("needle spec", "needle reaches before the history start"));
            }
        }
        Ok(())
    }
}

/// Mesh times suitable as perturbation sites: interior nodes more than two
/// steps away from every delay breakpoint `k*state_lag + l*control_lag`.
pub fn needle_times(ext: &Extremal, delays: &DelayVector, h: f64, count: usize) -> Vec<f64> {
    let t_f = ext.t_f;
    let mut breakpoints = Vec::new();
    let (lx, lu) = (delays.state_lag, delays.control_lag);
    let mut k = 0.0;
    while lx > 0.0 && k * lx <= t_f {
        let mut l = 0.0;
        loop {
            let b = k * lx + l * lu;
            if b > t_f {
                break;
            }
            breakpoints.push(b);
            if lu == 0.0 {
                break;
            }
            l += 1.0;
        }
        k += 1.0;
    }
    if lx == 0.0 && lu > 0.0 {
        let mut l = 0.0;
        while l * lu <= t_f {
            breakpoints.push(l * lu);
            l += 1.0;
        }
    }
    let mut out = Vec::new();
    let n_try = (count * 4).max(16);
    for i in 1..n_try {
        let t = t_f * i as f64 / n_try as f64;
        let clear = breakpoints.iter().all(|&b| (t - b).abs() > 2.0 * h);
        if clear && t > 4.0 * h && t < t_f - 4.0 * h {
            out.push(t);
            if out.len() == count {
                break;
            }
        }
    }
    out
}

/// Build the control with the needle intervals spliced in (or, with an empty
/// spec, a control resampled on the identical composite mesh so differences
/// against a perturbed run carry no resampling noise). Extends past the
/// extremal's horizon by the endpoint's left limit.
fn spliced_control(
    ext: &Extremal,
    spec: &NeedleSpec,
    eta: f64,
    horizon: f64,
    cfg: &IntegratorConfig,
    with_needles: bool,
) -> Result<SampledFunction> {
    let mut edges = vec![0.0];
    for (&t, &w) in spec.times.iter().zip(&spec.width_weights) {
        edges.push(t - w * eta);
        edges.push(t);
    }
    edges.push(ext.t_f.min(horizon));
    if horizon > ext.t_f {
        edges.push(horizon);
    }
    edges.sort_by(|a, b| a.partial_cmp(b).unwrap());
    edges.dedup_by(|a, b| (*a - *b).abs() < 1e-15);

    let tail_value = ext.control.eval_left_limit(ext.t_f)?;
    let in_needle = |t: f64| -> Option<usize> {
        spec.times
            .iter()
            .zip(&spec.width_weights)
            .position(|(&ti, &wi)| t > ti - wi * eta && t <= ti)
    };
    let mut segments: Vec<Segment> = ext
        .control
        .segments()
        .iter()
        .filter(|s| s.grid().t_end() <= 0.0)
        .cloned()
        .collect();
    for w in edges.windows(2) {
        let (a, b) = (w[0], w[1]);
        if b - a <= 1e-15 {
            continue;
        }
        let n = (((b - a) / cfg.step).ceil() as usize).max(1);
        let grid = TimeGrid::new(a, b, n)?;
        let mid = 0.5 * (a + b);
        let needle = if with_needles { in_needle(mid) } else { None };
        let values: Vec<DVector<f64>> = grid
            .nodes()
            .iter()
            .map(|&t| match needle {
                Some(i) => Ok(spec.values[i].clone()),
                None => {
                    if t > ext.t_f {
                        Ok(tail_value.clone())
                    } else {
                        ext.control.eval(t.min(ext.t_f))
                    }
                }
            })
            .collect::<Result<_>>()?;
        segments.push(Segment::new(grid, values, None, InterpRule::PiecewiseConstant)?);
    }
    SampledFunction::new(segments)
}

/// Extended endpoint (state, accumulated cost) under a control, at `horizon`.
fn extended_endpoint(
    prob: &OcpProblem,
    delays: &DelayVector,
    control: &SampledFunction,
    horizon: f64,
    cfg: &IntegratorConfig,
) -> Result<DVector<f64>> {
    let x = integrate_state(prob, delays, control, horizon, cfg)?;
    let cost = integrate_cost(prob, delays, &x, control, horizon, cfg)?;
    let xf = x.eval(horizon)?;
    let mut out = DVector::zeros(prob.state_dim + 1);
    out.rows_mut(0, prob.state_dim).copy_from(&xf);
    out[prob.state_dim] = cost;
    Ok(out)
}

/// Result of the first-order endpoint expansion check.
#[derive(Debug, Clone, Serialize)]
pub struct NeedleCheck {
    /// `(eta, remainder)` pairs down the ladder.
    pub remainders: Vec<(f64, f64)>,
    /// Log-log slope of the remainder against eta; superlinear (> 1) means
    /// the first-order expansion holds. Infinite when every remainder sits
    /// at the integration noise floor.
    pub slope: f64,
    pub linear_term_norm: f64,
}

/// Measure how fast the endpoint expansion's remainder shrinks along an eta
/// ladder: simulate the perturbed control, subtract the predicted first-order
/// terms (horizon shift plus needle variation vectors), and fit the slope.
pub fn needle_endpoint_check(
    prob: &OcpProblem,
    delays: &DelayVector,
    ext: &Extremal,
    spec: &NeedleSpec,
    eta_ladder: &[f64],
    cfg: &IntegratorConfig,
) -> Result<NeedleCheck> {
    if eta_ladder.len() < 2 {
        return Err(Error::invalid("needle check", "ladder needs at least two widths"));
    }
    let eta_max = eta_ladder.iter().cloned().fold(0.0, f64::max);
    spec.validate(ext, eta_max)?;

    // First-order coefficients, independent of eta.
    let field_end = extended_field_at(prob, delays, ext, ext.t_f, true)?;
    let mut needle_term = DVector::zeros(prob.state_dim + 1);
    for ((&ti, z), &wi) in spec.times.iter().zip(&spec.values).zip(&spec.width_weights) {
        needle_term += endpoint_variation(prob, delays, ext, ti, z, cfg)? * wi;
    }

    let mut remainders = Vec::with_capacity(eta_ladder.len());
    for &eta in eta_ladder {
        let delta = spec.shift_weight * eta;
        let horizon = ext.t_f + delta;
        let perturbed = spliced_control(ext, spec, eta, horizon, cfg, true)?;
        let baseline_ctrl = spliced_control(ext, spec, eta, horizon.max(ext.t_f), cfg, false)?;
        let end_perturbed = extended_endpoint(prob, delays, &perturbed, horizon, cfg)?;
        let end_base = extended_endpoint(prob, delays, &baseline_ctrl, ext.t_f, cfg)?;
        let predicted = &end_base + &field_end * delta + &needle_term * eta;
        let r = (end_perturbed - predicted).norm();
        remainders.push((eta, r));
    }

    // Fit on the points above the integration noise floor.
    let floor = 1e-12;
    let fit: Vec<(f64, f64)> = remainders
        .iter()
        .copied()
        .filter(|&(_, r)| r > floor)
        .collect();
    let slope = if fit.len() < 2 {
        f64::INFINITY
    } else {
        let lx: Vec<f64> = fit.iter().map(|(e, _)| e.ln()).collect();
        let ly: Vec<f64> = fit.iter().map(|(_, r)| r.ln()).collect();
        let n = lx.len() as f64;
        let mx = lx.iter().sum::<f64>() / n;
        let my = ly.iter().sum::<f64>() / n;
        let num: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
        let den: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
        num / den
    };
    Ok(NeedleCheck {
        remainders,
        slope,
        linear_term_norm: needle_term.norm(),
    })
}

/// A finite sample of the endpoint variation cone.
#[derive(Debug, Clone)]
pub struct ConeSample {
    /// Extended endpoint variation vectors (cost row last).
    pub vectors: Vec<DVector<f64>>,
    /// `(time, swap value)` generating each vector; the augmented field
    /// directions carry the endpoint time.
    pub provenance: Vec<(f64, DVector<f64>)>,
}

/// Endpoint variation vectors for each `(s, z)` pair; the augmented variant
/// appends the extended field at the endpoint with both signs.
pub fn cone_sample(
    prob: &OcpProblem,
    delays: &DelayVector,
    ext: &Extremal,
    pairs: &[(f64, DVector<f64>)],
    augmented: bool,
    cfg: &IntegratorConfig,
) -> Result<ConeSample> {
    let mut vectors = Vec::with_capacity(pairs.len() + 2);
    let mut provenance = Vec::with_capacity(pairs.len() + 2);
    for (s, z) in pairs {
        vectors.push(endpoint_variation(prob, delays, ext, *s, z, cfg)?);
        provenance.push((*s, z.clone()));
    }
    if augmented {
        let f_end = extended_field_at(prob, delays, ext, ext.t_f, true)?;
        vectors.push(f_end.clone());
        provenance.push((ext.t_f, ext.control.eval_left_limit(ext.t_f)?));
        vectors.push(-f_end);
        provenance.push((ext.t_f, ext.control.eval_left_limit(ext.t_f)?));
    }
    Ok(ConeSample { vectors, provenance })
}

/// Largest pairing of the terminal multiplier `(p(t_f), p0)` against the
/// sampled cone; nonpositive (up to tolerance) certifies the inequality.
/// Negative infinity for an empty sample (vacuous).
pub fn multiplier_check(ext: &Extremal, cone: &ConeSample) -> f64 {
    let psi = extended_adjoint(&ext.terminal_adjoint(), ext.cost_multiplier);
    cone.vectors
        .iter()
        .map(|w| psi.dot(w))
        .fold(f64::NEG_INFINITY, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pmp::tests::reference_extremal;
    use crate::problems::counterexample;
    use approx::assert_relative_eq;
    use nalgebra::dvector;

    fn cfg() -> IntegratorConfig {
        IntegratorConfig::with_step(1e-3)
    }

    #[test]
    fn swap_with_own_control_value_vanishes() {
        let prob = counterexample(10.0, 1.0).unwrap();
        let ext = reference_extremal(1.0, 400);
        let z = ext.control.eval(0.5).unwrap();
        let (minus, plus) = control_swap_vectors(&prob, &ext.delays, &ext, 0.5, &z).unwrap();
        assert_eq!(minus.amax(), 0.0);
        assert_eq!(plus.amax(), 0.0);
    }

    #[test]
    fn swap_vector_matches_direct_field_difference() {
        let prob = counterexample(10.0, 1.0).unwrap();
        let ext = reference_extremal(1.0, 400);
        let z = dvector![1.0, 0.0];
        let (minus, plus) = control_swap_vectors(&prob, &ext.delays, &ext, 0.5, &z).unwrap();
        // With zero delays the delayed-slot increment collapses into nothing
        // and the direct increment is the plain field difference (0, 1, 0).
        assert_relative_eq!(minus[0], 0.0, epsilon = 1e-14);
        assert_relative_eq!(minus[1], 1.0, epsilon = 1e-14);
        assert_relative_eq!(minus[2], 0.0, epsilon = 1e-14);
        assert_eq!(plus.amax(), 0.0);
    }

    #[test]
    fn variation_vector_is_linear_and_constant_on_reference_extremal() {
        let prob = counterexample(10.0, 1.0).unwrap();
        let ext = reference_extremal(1.0, 400);
        let xi = dvector![0.0, 1.0, 0.0];
        // The state jacobian vanishes along the reference extremal, so the
        // variation vector is frozen at its seed.
        let psi = variation_vector(&prob, &ext.delays, &ext, 0.5, &xi, 1.0, &cfg()).unwrap();
        assert_relative_eq!((psi.clone() - &xi).amax(), 0.0, epsilon = 1e-10);
        // Zero seed stays zero; doubling the seed doubles the result.
        let zero = variation_vector(
            &prob,
            &ext.delays,
            &ext,
            0.5,
            &dvector![0.0, 0.0, 0.0],
            1.0,
            &cfg(),
        )
        .unwrap();
        assert_eq!(zero.amax(), 0.0);
        let psi2 =
            variation_vector(&prob, &ext.delays, &ext, 0.5, &(&xi * 2.0), 1.0, &cfg()).unwrap();
        assert_relative_eq!((psi2 - psi * 2.0).amax(), 0.0, epsilon = 1e-10);
    }

    #[test]
    fn needle_remainder_superlinear_on_reference_extremal() {
        let prob = counterexample(10.0, 1.0).unwrap();
        let ext = reference_extremal(1.0, 1000);
        let spec = NeedleSpec::single(0.5, dvector![1.0, 0.0]);
        let ladder = [1e-2, 3.16e-3, 1e-3, 3.16e-4, 1e-4];
        let check =
            needle_endpoint_check(&prob, &ext.delays, &ext, &spec, &ladder, &cfg()).unwrap();
        assert!(
            check.slope >= 1.5,
            "slope {} remainders {:?}",
            check.slope,
            check.remainders
        );
    }

    #[test]
    fn noop_needle_remainder_sits_at_noise_floor() {
        let prob = counterexample(10.0, 1.0).unwrap();
        let ext = reference_extremal(1.0, 1000);
        // The needle re-applies the extremal's own control value.
        let spec = NeedleSpec::single(0.5, dvector![0.0, 0.0]);
        let ladder = [1e-2, 1e-3, 1e-4];
        let check =
            needle_endpoint_check(&prob, &ext.delays, &ext, &spec, &ladder, &cfg()).unwrap();
        for (_, r) in &check.remainders {
            assert!(*r < 1e-10, "remainder {r}");
        }
    }

    #[test]
    fn pure_shift_check_verifies_leading_term() {
        let prob = counterexample(10.0, 1.0).unwrap();
        let ext = reference_extremal(1.0, 1000);
        let spec = NeedleSpec::pure_shift(1.0);
        let ladder = [1e-2, 3.16e-3, 1e-3, 3.16e-4, 1e-4];
        let check =
            needle_endpoint_check(&prob, &ext.delays, &ext, &spec, &ladder, &cfg()).unwrap();
        assert!(
            check.slope >= 1.5 || check.remainders.iter().all(|(_, r)| *r < 1e-10),
            "slope {} remainders {:?}",
            check.slope,
            check.remainders
        );
    }

    #[test]
    fn cone_sample_size_and_multiplier_inequality() {
        let prob = counterexample(10.0, 1.0).unwrap();
        let ext = reference_extremal(1.0, 600);
        let mut pairs = Vec::new();
        for i in 1..6 {
            let s = i as f64 / 6.0;
            for z in [dvector![1.0, 0.0], dvector![-1.0, 0.0], dvector![0.0, 1.0]] {
                pairs.push((s, z));
            }
        }
        let sample = cone_sample(&prob, &ext.delays, &ext, &pairs, false, &cfg()).unwrap();
        assert_eq!(sample.vectors.len(), pairs.len());
        let max_pairing = multiplier_check(&ext, &sample);
        assert!(max_pairing <= 1e-8, "pairing {max_pairing}");

        let augmented = cone_sample(&prob, &ext.delays, &ext, &pairs, true, &cfg()).unwrap();
        assert_eq!(augmented.vectors.len(), pairs.len() + 2);
        // The endpoint field pairs to the Hamiltonian value, which vanishes
        // for this free-time extremal, so the augmented sample also passes.
        let max_aug = multiplier_check(&ext, &augmented);
        assert!(max_aug.abs() <= 1e-8, "augmented pairing {max_aug}");
    }

    /// Closed-form bang-bang extremal of the minimum-time double integrator
    /// from (-1, 0): switch at t = 1, t_f = 2, adjoint (1, 1 - t).
    fn double_integrator_extremal() -> Extremal {
        let t_f = 2.0;
        let hist = SampledFunction::constant(-1.0, 0.0, dvector![-1.0, 0.0]).unwrap();
        let x_main = SampledFunction::from_fn(0.0, t_f, 400, InterpRule::Linear, |t| {
            if t <= 1.0 {
                dvector![-1.0 + t * t / 2.0, t]
            } else {
                dvector![-(t_f - t) * (t_f - t) / 2.0, t_f - t]
            }
        })
        .unwrap();
        let state = SampledFunction::concat(&hist, &x_main).unwrap();
        let adjoint =
            SampledFunction::from_fn(0.0, t_f, 400, InterpRule::Linear, |t| dvector![1.0, 1.0 - t])
                .unwrap();
        let u_hist = SampledFunction::constant(-1.0, 0.0, dvector![0.0]).unwrap();
        let u_main = SampledFunction::from_fn(0.0, t_f, 400, InterpRule::PiecewiseConstant, |t| {
            dvector![if t < 1.0 { 1.0 } else { -1.0 }]
        })
        .unwrap();
        let control = SampledFunction::concat(&u_hist, &u_main).unwrap();
        Extremal {
            state,
            adjoint,
            cost_multiplier: -1.0,
            control,
            t_f,
            delays: DelayVector::zero(1.0),
        }
    }

    #[test]
    fn multiplier_check_is_direction_sensitive() {
        let prob = crate::problems::double_integrator(-1.0, 0.0, 1.0).unwrap();
        let mut ext = double_integrator_extremal();
        // Swapping the control off its bang value mid-arc loses Hamiltonian
        // value, so the pairing is strictly negative.
        let pairs = vec![(0.5, dvector![-1.0])];
        let sample = cone_sample(&prob, &ext.delays, &ext, &pairs, false, &cfg()).unwrap();
        let base = multiplier_check(&ext, &sample);
        assert!(base < -0.5, "need a strictly negative pairing, got {base}");
        // Flipping the multiplier pair flips the verdict.
        ext.adjoint = SampledFunction::from_fn(0.0, 2.0, 400, InterpRule::Linear, |t| {
            dvector![-1.0, t - 1.0]
        })
        .unwrap();
        ext.cost_multiplier = 1.0;
        let flipped = multiplier_check(&ext, &sample);
        assert!(flipped > 0.5, "flipped pairing {flipped}");
    }

    #[test]
    fn empty_cone_is_vacuous() {
        let ext = reference_extremal(1.0, 50);
        let sample = ConeSample {
            vectors: Vec::new(),
            provenance: Vec::new(),
        };
        assert_eq!(multiplier_check(&ext, &sample), f64::NEG_INFINITY);
    }

    #[test]
    fn needle_times_avoid_breakpoints() {
        let ext = reference_extremal(1.0, 100);
        let delays = DelayVector::new(0.0, 0.3, 0.2, 1.0).unwrap();
        let h = 0.01;
        let times = needle_times(&ext, &delays, h, 8);
        assert!(!times.is_empty());
        for t in &times {
            for k in 0..4 {
                for l in 0..6 {
                    let b = k as f64 * 0.3 + l as f64 * 0.2;
                    if b <= 1.0 {
                        assert!((t - b).abs() > 2.0 * h, "time {t} too close to breakpoint {b}");
                    }
                }
            }
        }
    }
}
