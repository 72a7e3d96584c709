//! Continuation in the delay parameter: march from zero delays to a target
//! triple along the linear path `tau(s) = s * target`, warm-starting each
//! solve from the previous extremal, with step halving on failure and
//! doubling after consecutive accepts. Continuity metrics compare each
//! accepted extremal against the zero-delay seed.

use crate::error::{Error, Result};
use crate::mesh::{DelayVector, SampledFunction};
use crate::pmp::{Extremal, ResidualReport, SingularReport};
use crate::solve::{solve, ShootingUnknowns, SolveConfig, SolveResult};
use crate::problem::OcpProblem;
use serde::Serialize;

#[derive(Debug, Clone, Serialize, serde::Deserialize)]
pub struct HomotopyPolicy {
    /// Initial (and maximal) step in the path parameter s.
    pub initial_step: f64,
    /// Below this step the continuation gives up.
    pub min_step: f64,
    /// Consecutive accepted steps before the step doubles.
    pub accepts_to_double: usize,
}

impl Default for HomotopyPolicy {
    fn default() -> Self {
        HomotopyPolicy {
            initial_step: 0.25,
            min_step: 1.0 / 1024.0,
            accepts_to_double: 2,
        }
    }
}

/// One accepted continuation step.
pub struct HomotopyStep {
    pub s: f64,
    pub delays: DelayVector,
    pub extremal: Extremal,
    pub report: ResidualReport,
    pub unknowns: ShootingUnknowns,
    pub singular: SingularReport,
    /// Newton iterations spent across all solve stages at this step.
    pub newton_iterations: usize,
}

/// The continuation record: accepted steps in path order (step 0 is the
/// zero-delay seed), plus diagnostics for rejected attempts.
pub struct HomotopyPath {
    pub target: DelayVector,
    pub steps: Vec<HomotopyStep>,
    /// `(s, error)` pairs for attempts that failed.
    pub failures: Vec<(f64, String)>,
    pub reached_target: bool,
    /// Set when the step underflowed before reaching the target.
    pub stuck: Option<String>,
}

impl HomotopyPath {
    pub fn last_step(&self) -> &HomotopyStep {
        self.steps.last().expect("path holds at least the seed")
    }
}

fn newton_iteration_count(sol: &SolveResult) -> usize {
    sol.trace
        .stages
        .iter()
        .map(|st| st.iterations.len().saturating_sub(1))
        .sum()
}

/// March from the zero-delay seed to `target`.
///
/// The seed must solve the zero-delay problem (its report below the
/// configured tolerances). Numerical failures shrink the step; a step
/// underflow ends the path early with `stuck` set rather than erroring, so
/// callers can persist the partial path.
pub fn continue_to(
    prob: &OcpProblem,
    target: &DelayVector,
    seed: &SolveResult,
    policy: &HomotopyPolicy,
    cfg: &SolveConfig,
) -> Result<HomotopyPath> {
    if !seed.extremal.delays.is_zero() {
        return Err(Error::Config(
            "the continuation seed must solve the zero-delay problem".into(),
        ));
    }
    if !seed.report.below(&cfg.tolerances) {
        return Err(Error::Config(
            "the continuation seed's residual report is above tolerance".into(),
        ));
    }
    let mut path = HomotopyPath {
        target: *target,
        steps: vec![HomotopyStep {
            s: 0.0,
            delays: DelayVector::zero(target.horizon_bound),
            extremal: seed.extremal.clone(),
            report: seed.report.clone(),
            unknowns: seed.unknowns.clone(),
            singular: seed.singular.clone(),
            newton_iterations: newton_iteration_count(seed),
        }],
        failures: Vec::new(),
        reached_target: target.is_zero(),
        stuck: None,
    };
    if path.reached_target {
        return Ok(path);
    }

    let mut s = 0.0;
    let mut ds = policy.initial_step;
    let mut consecutive = 0usize;
    while s < 1.0 {
        let s_next = (s + ds).min(1.0);
        let delays = target.scaled(s_next);
        let prev = path.steps.last().unwrap();
        let guess = ShootingUnknowns {
            adjoint_seed: prev.unknowns.adjoint_seed.clone(),
            t_f: prev.unknowns.t_f,
        };
        match solve(prob, &delays, &guess, Some(&prev.extremal), cfg) {
            Ok(sol) => {
                path.steps.push(HomotopyStep {
                    s: s_next,
                    delays,
                    newton_iterations: newton_iteration_count(&sol),
                    extremal: sol.extremal,
                    report: sol.report,
                    unknowns: sol.unknowns,
                    singular: sol.singular,
                });
                s = s_next;
                consecutive += 1;
                if consecutive >= policy.accepts_to_double {
                    ds = (2.0 * ds).min(policy.initial_step);
                    consecutive = 0;
                }
            }
            Err(e) => {
                path.failures.push((s_next, e.to_string()));
                consecutive = 0;
                ds *= 0.5;
                if ds < policy.min_step {
                    path.stuck = Some(format!(
                        "step underflow at s = {s} (last failure at s = {s_next}: {e})"
                    ));
                    return Ok(path);
                }
            }
        }
    }
    path.reached_target = true;
    Ok(path)
}

/// Per-step distances to the zero-delay extremal, in the topologies the
/// continuation is expected to respect: uniform for the state and adjoint,
/// weak (test-function pairings) and strong L2 for the control, plus the
/// final-time gap.
#[derive(Debug, Clone, Serialize)]
pub struct ContinuityStepMetrics {
    pub s: f64,
    pub delays: [f64; 3],
    pub sup_x: f64,
    pub sup_p: f64,
    pub dt_f: f64,
    pub weak_u: f64,
    pub strong_u: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ContinuityReport {
    pub per_step: Vec<ContinuityStepMetrics>,
}

/// Legendre polynomial values P_0..P_{n-1} at `x` in [-1, 1].
fn legendre_values(n: usize, x: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(n);
    let mut p_prev = 1.0;
    let mut p = x;
    for k in 0..n {
        match k {
            0 => out.push(1.0),
            1 => out.push(x),
            _ => {
                let kf = (k - 1) as f64;
                let next = ((2.0 * kf + 1.0) * x * p - kf * p_prev) / (kf + 1.0);
                p_prev = p;
                p = next;
                out.push(p);
            }
        }
    }
    out
}

/// Union of both functions' nodes restricted to `[0, hi]`.
fn union_nodes(a: &SampledFunction, b: &SampledFunction, hi: f64) -> Vec<f64> {
    let mut nodes: Vec<f64> = a
        .all_nodes()
        .into_iter()
        .chain(b.all_nodes())
        .filter(|&t| (0.0..=hi).contains(&t))
        .collect();
    nodes.sort_by(|x, y| x.partial_cmp(y).unwrap());
    nodes.dedup_by(|x, y| (*x - *y).abs() < 1e-12);
    if nodes.first().map_or(true, |&t| t > 0.0) {
        nodes.insert(0, 0.0);
    }
    if nodes.last().map_or(true, |&t| t < hi) {
        nodes.push(hi);
    }
    nodes
}

/// Distances between one step and the seed on the common horizon.
fn step_metrics(
    step: &HomotopyStep,
    seed: &HomotopyStep,
    test_set_size: usize,
) -> Result<ContinuityStepMetrics> {
    let t_common = step.extremal.t_f.min(seed.extremal.t_f);
    let x_nodes = union_nodes(&step.extremal.state, &seed.extremal.state, t_common);
    let mut sup_x: f64 = 0.0;
    for &t in &x_nodes {
        sup_x = sup_x.max((step.extremal.state.eval(t)? - seed.extremal.state.eval(t)?).amax());
    }
    let p_nodes = union_nodes(&step.extremal.adjoint, &seed.extremal.adjoint, t_common);
    let mut sup_p: f64 = 0.0;
    for &t in &p_nodes {
        sup_p = sup_p.max((step.extremal.adjoint.eval(t)? - seed.extremal.adjoint.eval(t)?).amax());
    }

    // Control pairings by the midpoint rule on the union cells (exact for
    // piecewise-constant differences, second order otherwise).
    let u_nodes = union_nodes(&step.extremal.control, &seed.extremal.control, t_common);
    let m = step.extremal.control.dim();
    let mut weak = vec![0.0f64; test_set_size * m];
    let mut strong_sq = 0.0f64;
    for w in u_nodes.windows(2) {
        let (a, b) = (w[0], w[1]);
        if b - a <= 0.0 {
            continue;
        }
        let t = 0.5 * (a + b);
        let diff = step.extremal.control.eval(t)? - seed.extremal.control.eval(t)?;
        let len = b - a;
        strong_sq += diff.norm_squared() * len;
        let x = 2.0 * t / t_common - 1.0;
        let phis = legendre_values(test_set_size, x);
        for (j, phi) in phis.iter().enumerate() {
            for c in 0..m {
                weak[j * m + c] += diff[c] * phi * len;
            }
        }
    }
    let weak_u = weak.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    Ok(ContinuityStepMetrics {
        s: step.s,
        delays: step.delays.components(),
        sup_x,
        sup_p,
        dt_f: (step.extremal.t_f - seed.extremal.t_f).abs(),
        weak_u,
        strong_u: strong_sq.sqrt(),
    })
}

/// Metrics for every accepted step against the path's zero-delay seed.
pub fn continuity_metrics(path: &HomotopyPath, test_set_size: usize) -> Result<ContinuityReport> {
    let seed = path.steps.first().expect("path holds at least the seed");
    let per_step = path
        .steps
        .iter()
        .map(|step| step_metrics(step, seed, test_set_size.max(1)))
        .collect::<Result<Vec<_>>>()?;
    Ok(ContinuityReport { per_step })
}
