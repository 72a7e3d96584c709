//! Boundary-value solver for a fixed delay triple: an inner damped
//! forward-backward sweep makes the state/adjoint/control functions mutually
//! consistent for a given terminal adjoint seed, and an outer damped Newton
//! iteration moves the seed (plus the final time, when free) until the
//! boundary, transversality and final-time conditions vanish.
//!
//! When the plain Newton stalls on a problem solved with a bang-type law
//! (vanishing switching gradients make the residual nonsmooth), the solver
//! retries along a Tikhonov ladder: the same problem under the saturated
//! quadratic law with decreasing regularization, warm-starting each stage,
//! and finishes with a polish stage under the original law.

use crate::error::{Error, Result};
use crate::integrate::{integrate_adjoint, integrate_state, IntegratorConfig};
use crate::mesh::{DelayVector, InterpRule, SampledFunction, Segment, TimeGrid};
use crate::pmp::{
    control_law, residual_report, synthesize_control, transversality_residual, ControlLaw,
    Extremal, QuadraticLaw, ResidualReport, SingularReport, Tolerances,
};
use crate::problem::{FinalTimeMode, OcpProblem};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;

/// Inner fixed-point iteration configuration.
#[derive(Debug, Clone, serde::Deserialize, Serialize)]
pub struct SweepConfig {
    pub max_sweeps: usize,
    /// Damping weight on the new candidate, in (0, 1].
    pub damping: f64,
    pub tol_fixed_point: f64,
    pub integrator: IntegratorConfig,
    /// Keep per-sweep snapshots (diagnostics; costs memory).
    #[serde(default)]
    pub record_iterates: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            max_sweeps: 120,
            damping: 0.5,
            tol_fixed_point: 1e-10,
            integrator: IntegratorConfig::default(),
            record_iterates: false,
        }
    }
}

/// Snapshot of one sweep iteration: the iterate the synthesis consumed and
/// the control candidate it produced (before damping).
pub struct SweepIterate {
    pub state: SampledFunction,
    pub adjoint: SampledFunction,
    pub control_candidate: SampledFunction,
}

pub struct SweepOutcome {
    pub extremal: Extremal,
    pub sweeps: usize,
    pub defect: f64,
    pub defect_history: Vec<f64>,
    pub singular: SingularReport,
    pub iterates: Vec<SweepIterate>,
}

/// Mutually consistent (state, adjoint, control) trio used to start a sweep.
#[derive(Clone)]
pub struct WarmStart {
    pub state: SampledFunction,
    pub adjoint: SampledFunction,
    pub control: SampledFunction,
}

impl WarmStart {
    /// Resample an extremal onto a (possibly different) horizon; evaluation
    /// times beyond the extremal's own horizon clamp to its endpoint.
    pub fn from_extremal(
        prob: &OcpProblem,
        ext: &Extremal,
        t_f: f64,
        interp: InterpRule,
        cfg: &IntegratorConfig,
    ) -> Result<Self> {
        let n = ((t_f / cfg.step).ceil() as usize).max(2);
        let clamp_hi = ext.t_f;
        let sample = |f: &SampledFunction, interp: InterpRule| -> Result<SampledFunction> {
            let grid = TimeGrid::new(0.0, t_f, n)?;
            let values: Vec<DVector<f64>> = grid
                .nodes()
                .iter()
                .map(|&t| f.eval(t.min(clamp_hi)))
                .collect::<Result<_>>()?;
            Ok(SampledFunction::from_segment(Segment::new(
                grid, values, None, interp,
            )?))
        };
        let control_main = sample(&ext.control, interp)?;
        let control = SampledFunction::concat(&prob.history_control, &control_main)?;
        let state_main = sample(&ext.state, InterpRule::Linear)?;
        let state = SampledFunction::concat(&prob.history_state, &state_main)?;
        let adjoint = sample(&ext.adjoint, InterpRule::Linear)?;
        Ok(WarmStart {
            state,
            adjoint,
            control,
        })
    }

    /// Resample this trio onto a new horizon, clamping evaluation times past
    /// the current one.
    pub fn resampled(
        &self,
        prob: &OcpProblem,
        t_f: f64,
        interp: InterpRule,
        cfg: &IntegratorConfig,
    ) -> Result<Self> {
        let n = ((t_f / cfg.step).ceil() as usize).max(2);
        let sample = |f: &SampledFunction, interp: InterpRule| -> Result<SampledFunction> {
            let hi = f.t_end();
            let grid = TimeGrid::new(0.0, t_f, n)?;
            let values: Vec<DVector<f64>> = grid
                .nodes()
                .iter()
                .map(|&t| f.eval(t.min(hi)))
                .collect::<Result<_>>()?;
            Ok(SampledFunction::from_segment(Segment::new(
                grid, values, None, interp,
            )?))
        };
        let control = SampledFunction::concat(&prob.history_control, &sample(&self.control, interp)?)?;
        let state = SampledFunction::concat(&prob.history_state, &sample(&self.state, InterpRule::Linear)?)?;
        let adjoint = sample(&self.adjoint, InterpRule::Linear)?;
        Ok(WarmStart {
            state,
            adjoint,
            control,
        })
    }

    /// Cold start: a constant admissible control, the trajectory it induces,
    /// and the adjoint integrated backward from the seed.
    pub fn cold(
        prob: &OcpProblem,
        delays: &DelayVector,
        terminal_adjoint: &DVector<f64>,
        t_f: f64,
        cfg: &IntegratorConfig,
    ) -> Result<Self> {
        let u_rest = prob.control_set.clamp(&DVector::zeros(prob.control_dim));
        let main = SampledFunction::constant(0.0, t_f, u_rest)?;
        let control = SampledFunction::concat(&prob.history_control, &main)?;
        let state = integrate_state(prob, delays, &control, t_f, cfg)?;
        let adjoint =
            integrate_adjoint(prob, delays, &state, &control, terminal_adjoint, -1.0, t_f, cfg)?;
        Ok(WarmStart {
            state,
            adjoint,
            control,
        })
    }
}

/// Sup distance over the nodes of `a` restricted to `[0, hi]`.
fn sup_distance(a: &SampledFunction, b: &SampledFunction, hi: f64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for &t in a.all_nodes().iter().filter(|&&t| (0.0..=hi).contains(&t)) {
        let d = (a.eval(t)? - b.eval(t)?).amax();
        worst = worst.max(d);
    }
    Ok(worst)
}

/// `alpha * a + (1 - alpha) * b`, sampled on `a`'s own segments.
fn blend_onto(a: &SampledFunction, b: &SampledFunction, alpha: f64) -> Result<SampledFunction> {
    if alpha >= 1.0 {
        return Ok(a.clone());
    }
    let mut segments = Vec::with_capacity(a.segments().len());
    for seg in a.segments() {
        let grid = seg.grid().clone();
        let values: Vec<DVector<f64>> = grid
            .nodes()
            .iter()
            .zip(seg.values())
            .map(|(&t, va)| Ok(va * alpha + b.eval(t)? * (1.0 - alpha)))
            .collect::<Result<_>>()?;
        let derivs = match seg.derivs() {
            Some(da) => Some(
                grid.nodes()
                    .iter()
                    .zip(da)
                    .map(|(&t, ka)| Ok(ka * alpha + b.eval_deriv(t)? * (1.0 - alpha)))
                    .collect::<Result<Vec<_>>>()?,
            ),
            None => None,
        };
        segments.push(Segment::new(grid, values, derivs, seg.interp())?);
    }
    SampledFunction::new(segments)
}

/// Inner iteration: synthesize, damp, integrate forward, integrate backward
/// with the given terminal adjoint, repeat until the candidate stops moving.
/// The defect compares the *undamped* candidate with the previous iterate, so
/// damping cannot fake convergence.
#[allow(clippy::too_many_arguments)]
pub fn sweep(
    prob: &OcpProblem,
    delays: &DelayVector,
    law: &dyn ControlLaw,
    terminal_adjoint: &DVector<f64>,
    t_f: f64,
    warm: &WarmStart,
    cfg: &SweepConfig,
) -> Result<SweepOutcome> {
    let icfg = &cfg.integrator;
    let mut state = warm.state.clone();
    let mut adjoint = warm.adjoint.clone();
    let mut control = warm.control.clone();
    let mut alpha = cfg.damping;
    let mut prev_defect = f64::INFINITY;
    let mut history = Vec::new();
    let mut iterates = Vec::new();
    let mut singular = SingularReport::default();
    let mut converged = false;
    let mut sweeps = 0;

    for k in 0..cfg.max_sweeps {
        sweeps = k + 1;
        let (u_cand, sing) =
            synthesize_control(prob, delays, law, &state, &adjoint, &control, -1.0, t_f, icfg)?;
        if cfg.record_iterates {
            iterates.push(SweepIterate {
                state: state.clone(),
                adjoint: adjoint.clone(),
                control_candidate: u_cand.clone(),
            });
        }
        let u_next = blend_onto(&u_cand, &control, alpha)?;
        let x_next = integrate_state(prob, delays, &u_next, t_f, icfg)?;
        let p_int =
            integrate_adjoint(prob, delays, &x_next, &u_next, terminal_adjoint, -1.0, t_f, icfg)?;
        let defect = sup_distance(&p_int, &adjoint, t_f)? + sup_distance(&u_cand, &control, t_f)?;
        history.push(defect);
        singular = sing;

        let p_next = blend_onto(&p_int, &adjoint, alpha)?;
        state = x_next;
        adjoint = p_next;
        control = u_next;

        if defect < cfg.tol_fixed_point {
            converged = true;
            break;
        }
        if defect > prev_defect {
            alpha = (0.5 * alpha).max(1e-3);
        } else {
            alpha = cfg.damping;
        }
        prev_defect = defect;
        // Plateau cutoff: a fixed-point iteration that has not shrunk its
        // defect by at least 8% over 40 sweeps is chattering, not converging.
        if k >= 50 && defect >= 0.92 * history[k - 40] {
            break;
        }
    }

    if !converged {
        return Err(Error::SweepDiverged {
            iterations: sweeps,
            last_defect: *history.last().unwrap_or(&f64::NAN),
            defect_history: history,
        });
    }

    // One clean undamped pass so the returned functions satisfy the
    // integrated equations exactly.
    let x_final = integrate_state(prob, delays, &control, t_f, icfg)?;
    let p_final =
        integrate_adjoint(prob, delays, &x_final, &control, terminal_adjoint, -1.0, t_f, icfg)?;
    let extremal = Extremal {
        state: x_final,
        adjoint: p_final,
        cost_multiplier: -1.0,
        control,
        t_f,
        delays: *delays,
    };
    Ok(SweepOutcome {
        extremal,
        sweeps,
        defect: *history.last().unwrap(),
        defect_history: history,
        singular,
        iterates,
    })
}

/// Shooting unknowns: the adjoint seed (applied at the final time, where the
/// backward passes start) plus the final time itself when it is free.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct ShootingUnknowns {
    pub adjoint_seed: Vec<f64>,
    pub t_f: Option<f64>,
}

impl ShootingUnknowns {
    pub fn new(adjoint_seed: Vec<f64>, t_f: Option<f64>) -> Result<Self> {
        if let Some(t) = t_f {
            if !(t > 0.0) {
                return Err(Error::invalid(
                    "shooting unknowns",
                    "final time must be positive",
                ));
            }
        }
        Ok(ShootingUnknowns { adjoint_seed, t_f })
    }

    fn to_vector(&self) -> DVector<f64> {
        let mut z = self.adjoint_seed.clone();
        if let Some(t) = self.t_f {
            z.push(t);
        }
        DVector::from_vec(z)
    }

    fn from_vector(z: &DVector<f64>, n: usize, free_time: bool) -> Self {
        let adjoint_seed = z.iter().take(n).copied().collect();
        let t_f = if free_time { Some(z[n]) } else { None };
        ShootingUnknowns { adjoint_seed, t_f }
    }
}

/// Residual of the shooting map at the given unknowns: boundary condition,
/// transversality components, and the final-time condition when free. The
/// residual dimension equals the unknown dimension.
pub fn shooting_residual(
    prob: &OcpProblem,
    delays: &DelayVector,
    law: &dyn ControlLaw,
    unknowns: &ShootingUnknowns,
    warm: &WarmStart,
    cfg: &SweepConfig,
) -> Result<(DVector<f64>, SweepOutcome)> {
    let t_f = match (prob.final_time_mode, unknowns.t_f) {
        (FinalTimeMode::Fixed(t), None) => t,
        (FinalTimeMode::Free, Some(t)) => t,
        (FinalTimeMode::Fixed(_), Some(_)) => {
            return Err(Error::Config(
                "final-time unknown supplied for a fixed-final-time problem".into(),
            ))
        }
        (FinalTimeMode::Free, None) => {
            return Err(Error::Config(
                "free final time needs a final-time guess".into(),
            ))
        }
    };
    if t_f < 4.0 * cfg.integrator.step {
        return Err(Error::invalid(
            "horizon",
            format!("final time {t_f} too short"),
        ));
    }
    let seed = DVector::from_vec(unknowns.adjoint_seed.clone());
    if seed.len() != prob.state_dim {
        return Err(Error::DimensionMismatch {
            expected: prob.state_dim,
            got: seed.len(),
        });
    }
    // The warm trio may live on a different horizon (free-time iterations
    // move t_f); adapt it before sweeping.
    let horizon_matches = (warm.control.t_end() - t_f).abs() <= 1e-12 * (1.0 + t_f.abs());
    let adapted;
    let warm = if horizon_matches {
        warm
    } else {
        adapted = warm.resampled(prob, t_f, law.interp(), &cfg.integrator)?;
        &adapted
    };
    let outcome = sweep(prob, delays, law, &seed, t_f, warm, cfg)?;
    let ext = &outcome.extremal;

    let boundary = prob.target.boundary_residual(&ext.state.eval(t_f)?);
    let trans = transversality_residual(ext, &prob.target);
    let mut parts: Vec<f64> = boundary.iter().copied().collect();
    parts.extend(trans.iter().copied());
    if prob.final_time_mode.is_free() {
        parts.push(crate::pmp::free_time_residual(prob, delays, ext)?);
    }
    Ok((DVector::from_vec(parts), outcome))
}

#[derive(Debug, Clone, Serialize)]
pub struct IterationRecord {
    pub residual_norm: f64,
    pub step_scale: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct StageTrace {
    pub law: String,
    pub converged: bool,
    pub iterations: Vec<IterationRecord>,
}

/// Per-stage Newton history, serialized alongside solve artifacts.
#[derive(Debug, Clone, Default, Serialize)]
pub struct SolveTrace {
    pub stages: Vec<StageTrace>,
}

#[derive(Debug, Clone, Serialize, serde::Deserialize)]
pub struct SolveConfig {
    pub sweep: SweepConfig,
    pub newton_tol: f64,
    pub newton_max_iters: usize,
    pub fd_step: f64,
    pub max_backtracks: usize,
    /// Retry with the Tikhonov ladder when the plain Newton stalls.
    pub regularization_fallback: bool,
    /// Synthesis law name; `None` uses the problem's default.
    pub law: Option<String>,
    pub maximality_lattice: usize,
    pub tolerances: Tolerances,
}

impl Default for SolveConfig {
    fn default() -> Self {
        SolveConfig {
            sweep: SweepConfig::default(),
            newton_tol: 1e-8,
            newton_max_iters: 60,
            fd_step: 1e-6,
            max_backtracks: 8,
            regularization_fallback: true,
            law: None,
            maximality_lattice: 15,
            tolerances: Tolerances::default(),
        }
    }
}

#[derive(Debug)]
pub struct SolveResult {
    pub extremal: Extremal,
    pub report: ResidualReport,
    pub unknowns: ShootingUnknowns,
    pub trace: SolveTrace,
    pub singular: SingularReport,
}

struct StageState {
    z: DVector<f64>,
    warm: WarmStart,
    outcome: Option<SweepOutcome>,
    best_norm: f64,
}

/// One damped-Newton stage under a fixed law. Returns the advanced state and
/// whether the residual dropped below tolerance.
fn newton_stage(
    prob: &OcpProblem,
    delays: &DelayVector,
    law: &dyn ControlLaw,
    mut st: StageState,
    free_time: bool,
    cfg: &SolveConfig,
    trace: &mut SolveTrace,
) -> Result<(StageState, bool)> {
    let n = prob.state_dim;
    let mut stage = StageTrace {
        law: law.name().into(),
        converged: false,
        iterations: Vec::new(),
    };
    let eval = |z: &DVector<f64>, warm: &WarmStart| -> Result<(DVector<f64>, SweepOutcome)> {
        let unk = ShootingUnknowns::from_vector(z, n, free_time);
        shooting_residual(prob, delays, law, &unk, warm, &cfg.sweep)
    };

    let (mut r, mut outcome) = match eval(&st.z, &st.warm) {
        Ok(pair) => pair,
        Err(e) => {
            trace.stages.push(stage);
            st.outcome = None;
            return match e {
                Error::SweepDiverged { .. } | Error::NonFiniteState { .. } => Ok((st, false)),
                other => Err(other),
            };
        }
    };
    let mut norm = r.norm();
    st.best_norm = st.best_norm.min(norm);
    stage.iterations.push(IterationRecord {
        residual_norm: norm,
        step_scale: 0.0,
    });

    for _ in 0..cfg.newton_max_iters {
        if norm < cfg.newton_tol {
            break;
        }
        // Forward-difference jacobian, columns evaluated against the frozen
        // warm start so the map stays consistent within the iteration.
        let dim = st.z.len();
        let mut jac = DMatrix::zeros(r.len(), dim);
        let mut jac_ok = true;
        for j in 0..dim {
            let h = cfg.fd_step * (1.0 + st.z[j].abs());
            let mut zp = st.z.clone();
            zp[j] += h;
            match eval(&zp, &st.warm) {
                Ok((rp, _)) => jac.set_column(j, &((rp - &r) / h)),
                Err(_) => {
                    jac_ok = false;
                    break;
                }
            }
        }
        if !jac_ok {
            break;
        }
        let direction = match jac.clone().lu().solve(&(-&r)) {
            Some(d) if d.iter().all(|v| v.is_finite()) => d,
            _ => {
                // Rank-deficient jacobian: least-squares direction.
                let svd = jac.clone().svd(true, true);
                match svd.solve(&(-&r), 1e-10) {
                    Ok(d) => d,
                    Err(_) => break,
                }
            }
        };

        let mut accepted = false;
        let mut scale = 1.0;
        for _ in 0..=cfg.max_backtracks {
            let z_trial = &st.z + &direction * scale;
            if free_time && z_trial[n] <= 4.0 * cfg.sweep.integrator.step {
                scale *= 0.5;
                continue;
            }
            match eval(&z_trial, &st.warm) {
                Ok((r_trial, out_trial)) => {
                    let n_trial = r_trial.norm();
                    if n_trial < norm * (1.0 - 1e-4 * scale) {
                        st.z = z_trial;
                        r = r_trial;
                        norm = n_trial;
                        st.warm = WarmStart {
                            state: out_trial.extremal.state.clone(),
                            adjoint: out_trial.extremal.adjoint.clone(),
                            control: out_trial.extremal.control.clone(),
                        };
                        outcome = out_trial;
                        accepted = true;
                        break;
                    }
                }
                Err(Error::SweepDiverged { .. }) | Err(Error::NonFiniteState { .. }) => {}
                Err(e) => {
                    if !e.is_config() {
                        return Err(e);
                    }
                }
            }
            scale *= 0.5;
        }
        st.best_norm = st.best_norm.min(norm);
        stage.iterations.push(IterationRecord {
            residual_norm: norm,
            step_scale: if accepted { scale } else { 0.0 },
        });
        if !accepted {
            break;
        }
    }
    stage.converged = norm < cfg.newton_tol;
    let converged = stage.converged;
    trace.stages.push(stage);
    st.best_norm = st.best_norm.min(norm);
    st.outcome = Some(outcome);
    Ok((st, converged))
}

/// Tikhonov weights for the regularized retry ladder.
const TIKHONOV_LADDER: [f64; 3] = [0.5, 0.125, 0.03125];

/// Full solve: plain Newton under the requested law, the regularization
/// ladder on stall, and a polish stage under the original law. The result is
/// a normal extremal (cost multiplier -1) whose residual report passes the
/// configured tolerances.
pub fn solve(
    prob: &OcpProblem,
    delays: &DelayVector,
    guess: &ShootingUnknowns,
    warm: Option<&Extremal>,
    cfg: &SolveConfig,
) -> Result<SolveResult> {
    if prob.final_time_mode.is_free() && delays.control_lag > 0.0 {
        return Err(Error::Config(
            "free final time with a positive control lag is not supported".into(),
        ));
    }
    cfg.sweep.integrator.validate(delays)?;
    let law_name = cfg.law.as_deref().unwrap_or(prob.default_law);
    let law = control_law(law_name)?;
    let free_time = prob.final_time_mode.is_free();
    if free_time && guess.t_f.is_none() {
        return Err(Error::Config(
            "free final time needs a final-time guess".into(),
        ));
    }
    if !free_time && guess.t_f.is_some() {
        return Err(Error::Config(
            "final-time guess supplied for a fixed-final-time problem".into(),
        ));
    }

    let t_f0 = match prob.final_time_mode {
        FinalTimeMode::Fixed(t) => t,
        FinalTimeMode::Free => guess.t_f.unwrap(),
    };
    let seed0 = DVector::from_vec(guess.adjoint_seed.clone());
    if seed0.len() != prob.state_dim {
        return Err(Error::DimensionMismatch {
            expected: prob.state_dim,
            got: seed0.len(),
        });
    }

    let warm0 = match warm {
        Some(ext) => {
            WarmStart::from_extremal(prob, ext, t_f0, law.interp(), &cfg.sweep.integrator)?
        }
        None => WarmStart::cold(prob, delays, &seed0, t_f0, &cfg.sweep.integrator)?,
    };

    let mut trace = SolveTrace::default();
    let initial = StageState {
        z: guess.to_vector(),
        warm: warm0.clone(),
        outcome: None,
        best_norm: f64::INFINITY,
    };

    let (after_plain, plain_ok) =
        newton_stage(prob, delays, law.as_ref(), initial, free_time, cfg, &mut trace)?;

    let final_state = if plain_ok {
        after_plain
    } else if cfg.regularization_fallback && matches!(law_name, "ball" | "box") {
        // Ladder: regularized stages, each warm-starting the next from its
        // best point, then a polish under the original law.
        let mut carry = StageState {
            z: guess.to_vector(),
            warm: warm0,
            outcome: None,
            best_norm: after_plain.best_norm,
        };
        for eps in TIKHONOV_LADDER {
            let reg = QuadraticLaw::with_tikhonov(eps);
            let (advanced, _ok) = newton_stage(prob, delays, &reg, carry, free_time, cfg, &mut trace)?;
            carry = advanced;
        }
        let (polished, ok) =
            newton_stage(prob, delays, law.as_ref(), carry, free_time, cfg, &mut trace)?;
        if !ok {
            return Err(Error::NewtonStalled {
                best_residual: polished.best_norm,
            });
        }
        polished
    } else {
        return Err(Error::NewtonStalled {
            best_residual: after_plain.best_norm,
        });
    };

    let best_norm = final_state.best_norm;
    let outcome = final_state.outcome.ok_or(Error::NewtonStalled {
        best_residual: best_norm,
    })?;
    let extremal = outcome.extremal;
    extremal.validate(prob)?;
    let report = residual_report(prob, delays, &extremal, cfg.maximality_lattice)?;
    if !report.below(&cfg.tolerances) {
        return Err(Error::invalid(
            "solve",
            format!("residual report above tolerance: {report:?}"),
        ));
    }
    let unknowns = ShootingUnknowns::from_vector(&final_state.z, prob.state_dim, free_time);
    Ok(SolveResult {
        extremal,
        report,
        unknowns,
        trace,
        singular: outcome.singular,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{counterexample, delayed_lq, double_integrator, LqParams};
    use approx::assert_relative_eq;

    fn fast_cfg(step: f64) -> SolveConfig {
        SolveConfig {
            sweep: SweepConfig {
                integrator: IntegratorConfig::with_step(step),
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn sweep_is_a_fixed_point_on_the_reference_extremal() {
        let prob = counterexample(10.0, 1.0).unwrap();
        let delays = DelayVector::zero(1.0);
        let cfg = SweepConfig {
            integrator: IntegratorConfig::with_step(2e-3),
            ..Default::default()
        };
        let ext = crate::pmp::tests::reference_extremal(1.0, 500);
        let warm =
            WarmStart::from_extremal(&prob, &ext, 1.0, InterpRule::Linear, &cfg.integrator)
                .unwrap();
        let law = crate::pmp::BallLaw::default();
        let out = sweep(
            &prob,
            &delays,
            &law,
            &nalgebra::dvector![1.0, 0.0],
            1.0,
            &warm,
            &cfg,
        )
        .unwrap();
        assert_eq!(out.sweeps, 1);
        assert!(out.defect < 1e-10, "defect {}", out.defect);
        assert_relative_eq!(out.extremal.state.eval(0.7).unwrap()[0], 0.7, epsilon = 1e-9);
        assert_relative_eq!(
            out.extremal.adjoint.eval(0.2).unwrap()[0],
            1.0,
            epsilon = 1e-10
        );
    }

    #[test]
    fn shooting_residual_vanishes_at_the_reference_unknowns() {
        let prob = counterexample(10.0, 1.0).unwrap();
        let delays = DelayVector::zero(1.0);
        let cfg = SweepConfig {
            integrator: IntegratorConfig::with_step(1e-3),
            ..Default::default()
        };
        let ext = crate::pmp::tests::reference_extremal(1.0, 1000);
        let warm =
            WarmStart::from_extremal(&prob, &ext, 1.0, InterpRule::Linear, &cfg.integrator)
                .unwrap();
        let law = crate::pmp::BallLaw::default();
        let unk = ShootingUnknowns::new(vec![1.0, 0.0], Some(1.0)).unwrap();
        let (r, _) = shooting_residual(&prob, &delays, &law, &unk, &warm, &cfg).unwrap();
        assert!(r.norm() < 1e-8, "residual {r:?}");
    }

    #[test]
    fn solve_recovers_reference_extremal_from_offset_guess() {
        let prob = counterexample(10.0, 1.0).unwrap();
        let delays = DelayVector::zero(1.0);
        let cfg = fast_cfg(1e-3);
        let guess = ShootingUnknowns::new(vec![0.8, 0.1], Some(0.9)).unwrap();
        let sol = solve(&prob, &delays, &guess, None, &cfg).unwrap();
        assert_relative_eq!(sol.extremal.t_f, 1.0, epsilon = 1e-6);
        let p0 = sol.extremal.adjoint.eval(0.0).unwrap();
        assert_relative_eq!(p0[0], 1.0, epsilon = 1e-6);
        assert!(p0[1].abs() < 1e-6);
        // Controls vanish along the solution.
        let u_mid = sol.extremal.control.eval(0.5).unwrap();
        assert!(u_mid.amax() < 1e-6, "u(0.5) = {u_mid:?}");
    }

    #[test]
    fn solve_lq_without_delays_has_trivial_newton() {
        let prob = delayed_lq(LqParams::default(), 1.0).unwrap();
        let delays = DelayVector::zero(1.0);
        let cfg = fast_cfg(2e-3);
        let guess = ShootingUnknowns::new(vec![0.0], None).unwrap();
        let sol = solve(&prob, &delays, &guess, None, &cfg).unwrap();
        // Free endpoint: terminal adjoint must vanish.
        assert!(sol.extremal.terminal_adjoint().amax() < 1e-10);
        assert!(sol.report.boundary_defect < 1e-12);
    }

    #[test]
    fn free_time_with_control_lag_rejected() {
        let prob = counterexample(10.0, 1.0).unwrap();
        let delays = DelayVector::new(0.0, 0.0, 0.1, 1.0).unwrap();
        let cfg = fast_cfg(1e-3);
        let guess = ShootingUnknowns::new(vec![1.0, 0.0], Some(1.0)).unwrap();
        let err = solve(&prob, &delays, &guess, None, &cfg).unwrap_err();
        assert!(err.is_config(), "{err}");
    }

    #[test]
    fn unreachable_target_stalls() {
        // Start far outside the region the state bound allows to traverse.
        let prob = double_integrator(-40.0, 0.0, 1.0).unwrap();
        let delays = DelayVector::zero(1.0);
        let mut cfg = fast_cfg(5e-3);
        cfg.newton_max_iters = 12;
        cfg.regularization_fallback = false;
        let guess = ShootingUnknowns::new(vec![1.0, 1.0], Some(1.0)).unwrap();
        let err = solve(&prob, &delays, &guess, None, &cfg).unwrap_err();
        match err {
            Error::NewtonStalled { .. } | Error::SweepDiverged { .. } => {}
            other => panic!("expected a solver failure, got {other}"),
        }
    }
}
