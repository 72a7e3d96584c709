//! Built-in problems, selectable by name, and the block reduction that turns
//! a pure-control-delay problem into a larger non-delayed one.

use crate::error::{Error, Result};
use crate::mesh::{DelayVector, InterpRule, SampledFunction, TimeGrid};
use crate::problem::{
    AffineStructure, ControlSet, CostFn, CostStructure, DynamicsFn, FieldFn, FinalTimeMode,
    GainFn, JacobianFn, OcpBuilder, OcpProblem, QuadraticCostWeights, Target,
};
use nalgebra::{dvector, DMatrix, DVector};
use std::collections::BTreeMap;
use std::sync::Arc;

/// Flat numeric parameters from configuration.
pub type ProblemParams = BTreeMap<String, f64>;

pub struct ProblemEntry {
    pub name: &'static str,
    pub summary: &'static str,
    pub build: fn(&ProblemParams, f64) -> Result<OcpProblem>,
}

/// Registry of built-in problems.
pub fn registry() -> Vec<ProblemEntry> {
    vec![
        ProblemEntry {
            name: "counterexample",
            summary: "planar minimum-time problem on the unit ball whose delay enters \
                      through the shifted time argument; oscillation parameter `k`",
            build: |p, delta| counterexample(p.get("k").copied().unwrap_or(10.0), delta),
        },
        ProblemEntry {
            name: "delayed-lq",
            summary: "scalar linear dynamics with delayed state/control terms and \
                      quadratic cost; parameters a0,a1,b0,b1,k1..k4,x0,tf,u_max",
            build: |p, delta| delayed_lq(LqParams::from_params(p), delta),
        },
        ProblemEntry {
            name: "double-integrator",
            summary: "classical minimum-time double integrator to the origin \
                      (no delayed terms); parameters x1_0,x2_0",
            build: |p, delta| {
                double_integrator(
                    p.get("x1_0").copied().unwrap_or(-1.0),
                    p.get("x2_0").copied().unwrap_or(0.0),
                    delta,
                )
            },
        },
    ]
}

pub fn build_by_name(name: &str, params: &ProblemParams, delta: f64) -> Result<OcpProblem> {
    registry()
        .into_iter()
        .find(|e| e.name == name)
        .map(|e| (e.build)(params, delta))
        .unwrap_or_else(|| {
            let known: Vec<&str> = registry().iter().map(|e| e.name).collect();
            Err(Error::Config(format!(
                "unknown problem '{name}' (available: {})",
                known.join(", ")
            )))
        })
}

fn constant_history(delta: f64, value: DVector<f64>) -> SampledFunction {
    SampledFunction::constant(-delta, 0.0, value).expect("delta > 0")
}

fn pc_history(delta: f64, value: DVector<f64>) -> SampledFunction {
    let grid = TimeGrid::new(-delta, 0.0, 1).expect("delta > 0");
    SampledFunction::from_segment(
        crate::mesh::Segment::new(
            grid,
            vec![value.clone(), value],
            None,
            InterpRule::PiecewiseConstant,
        )
        .expect("consistent"),
    )
}

/// Planar minimum-time problem with unit-ball controls. The second control
/// component acts through the gap `t - s` between the two time arguments, so
/// it only matters when the time-argument lag is positive. `oscillation`
/// controls the spatial frequency of the gain pair.
pub fn counterexample(oscillation: f64, delta: f64) -> Result<OcpProblem> {
    let w = 2.0 * std::f64::consts::PI * oscillation;
    let gain_a = move |a: f64| (w * a).cos();
    let gain_b = move |a: f64| (w * a).sin();
    let d_gain_a = move |a: f64| -w * (w * a).sin();
    let d_gain_b = move |a: f64| w * (w * a).cos();
    counterexample_custom(
        Arc::new(gain_a),
        Arc::new(gain_b),
        Arc::new(d_gain_a),
        Arc::new(d_gain_b),
        delta,
    )
}

/// Same problem with caller-supplied smooth gains and their derivatives.
pub fn counterexample_custom(
    gain_a: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    gain_b: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    d_gain_a: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    d_gain_b: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    delta: f64,
) -> Result<OcpProblem> {
    let (ga, gb) = (gain_a.clone(), gain_b.clone());
    let dynamics: DynamicsFn = Arc::new(move |t, s, x, _y, u, _v| {
        let lag = t - s;
        dvector![
            1.0 - x[1] * x[1] + lag * u[1] * ga(x[0]),
            u[0] + lag * u[1] * gb(x[0])
        ]
    });
    let running_cost: CostFn = Arc::new(|_t, _s, _x, _y, _u, _v| 1.0);

    let (ga, gb, dga, dgb) = (gain_a.clone(), gain_b.clone(), d_gain_a, d_gain_b);
    let jac_state: JacobianFn = Arc::new(move |t, s, x, _y, u, _v| {
        let lag = t - s;
        DMatrix::from_row_slice(
            3,
            2,
            &[
                lag * u[1] * dga(x[0]),
                -2.0 * x[1],
                lag * u[1] * dgb(x[0]),
                0.0,
                0.0,
                0.0,
            ],
        )
    });
    let jac_delayed_state: JacobianFn = Arc::new(|_t, _s, _x, _y, _u, _v| DMatrix::zeros(3, 2));
    let (ga2, gb2) = (ga.clone(), gb.clone());
    let jac_control: JacobianFn = Arc::new(move |t, s, x, _y, _u, _v| {
        let lag = t - s;
        DMatrix::from_row_slice(
            3,
            2,
            &[0.0, lag * ga2(x[0]), 1.0, lag * gb2(x[0]), 0.0, 0.0],
        )
    });
    let jac_delayed_control: JacobianFn = Arc::new(|_t, _s, _x, _y, _u, _v| DMatrix::zeros(3, 2));

    let drift: FieldFn = Arc::new(|_t, _s, x, _y| dvector![1.0 - x[1] * x[1], 0.0]);
    let (ga3, gb3) = (ga, gb);
    let control_gain: GainFn = Arc::new(move |t, s, x, _y| {
        let lag = t - s;
        DMatrix::from_row_slice(2, 2, &[0.0, lag * ga3(x[0]), 1.0, lag * gb3(x[0])])
    });
    let delayed_control_gain: GainFn = Arc::new(|_t, _s, _x, _y| DMatrix::zeros(2, 2));
    let affine = AffineStructure {
        drift,
        control_gain,
        delayed_control_gain,
        cost: CostStructure::Affine {
            drift: Arc::new(|_t, _s, _x, _y, _u, _v| 1.0),
            lin_u: Arc::new(|_t, _s, _x, _y| dvector![0.0, 0.0]),
            lin_v: Arc::new(|_t, _s, _x, _y| dvector![0.0, 0.0]),
        },
    };

    OcpBuilder::new(
        "counterexample",
        2,
        2,
        dynamics,
        running_cost,
        ControlSet::Ball { radius: 1.0 },
        Target::Point(dvector![1.0, 0.0]),
        constant_history(delta, dvector![0.0, 0.0]),
        pc_history(delta, dvector![0.0, 0.0]),
        FinalTimeMode::Free,
    )
    .with_jacobians(jac_state, jac_delayed_state, jac_control, jac_delayed_control)
    .with_affine(affine)
    .with_state_bound(50.0)
    .with_default_law("ball")
    .build()
}

/// Parameters of the scalar delayed linear-quadratic family.
#[derive(Debug, Clone, Copy)]
pub struct LqParams {
    pub state_gain: f64,
    pub delayed_state_gain: f64,
    pub control_gain: f64,
    pub delayed_control_gain: f64,
    pub weights: QuadraticCostWeights,
    pub initial_state: f64,
    pub final_time: f64,
    pub control_limit: f64,
}

impl Default for LqParams {
    fn default() -> Self {
        LqParams {
            state_gain: 0.0,
            delayed_state_gain: 1.0,
            control_gain: 1.0,
            delayed_control_gain: 0.0,
            weights: QuadraticCostWeights {
                state: 1.0,
                delayed_state: 0.0,
                control: 1.0,
                delayed_control: 0.0,
            },
            initial_state: 1.0,
            final_time: 1.0,
            control_limit: 10.0,
        }
    }
}

impl LqParams {
    pub fn from_params(p: &ProblemParams) -> Self {
        let d = LqParams::default();
        LqParams {
            state_gain: p.get("a0").copied().unwrap_or(d.state_gain),
            delayed_state_gain: p.get("a1").copied().unwrap_or(d.delayed_state_gain),
            control_gain: p.get("b0").copied().unwrap_or(d.control_gain),
            delayed_control_gain: p.get("b1").copied().unwrap_or(d.delayed_control_gain),
            weights: QuadraticCostWeights {
                state: p.get("k1").copied().unwrap_or(d.weights.state),
                delayed_state: p.get("k2").copied().unwrap_or(d.weights.delayed_state),
                control: p.get("k3").copied().unwrap_or(d.weights.control),
                delayed_control: p.get("k4").copied().unwrap_or(d.weights.delayed_control),
            },
            initial_state: p.get("x0").copied().unwrap_or(d.initial_state),
            final_time: p.get("tf").copied().unwrap_or(d.final_time),
            control_limit: p.get("u_max").copied().unwrap_or(d.control_limit),
        }
    }
}

/// Scalar control-affine dynamics with delayed state and control terms and a
/// quadratic running cost; fixed final time, free endpoint.
pub fn delayed_lq(params: LqParams, delta: f64) -> Result<OcpProblem> {
    if params.weights.control <= 0.0 {
        return Err(Error::invalid(
            "lq weights",
            "control weight must be positive (coercivity)",
        ));
    }
    if params.final_time <= 0.0 || params.control_limit <= 0.0 {
        return Err(Error::invalid(
            "lq params",
            "final time and control limit must be positive",
        ));
    }
    let LqParams {
        state_gain: a0,
        delayed_state_gain: a1,
        control_gain: b0,
        delayed_control_gain: b1,
        weights,
        initial_state,
        final_time,
        control_limit,
    } = params;

    let dynamics: DynamicsFn =
        Arc::new(move |_t, _s, x, y, u, v| dvector![a0 * x[0] + a1 * y[0] + b0 * u[0] + b1 * v[0]]);
    let w = weights;
    let running_cost: CostFn = Arc::new(move |_t, _s, x, y, u, v| {
        w.state * x[0] * x[0]
            + w.delayed_state * y[0] * y[0]
            + w.control * u[0] * u[0]
            + w.delayed_control * v[0] * v[0]
    });
    let jac_state: JacobianFn = Arc::new(move |_t, _s, x, _y, _u, _v| {
        DMatrix::from_column_slice(2, 1, &[a0, 2.0 * w.state * x[0]])
    });
    let jac_delayed_state: JacobianFn = Arc::new(move |_t, _s, _x, y, _u, _v| {
        DMatrix::from_column_slice(2, 1, &[a1, 2.0 * w.delayed_state * y[0]])
    });
    let jac_control: JacobianFn = Arc::new(move |_t, _s, _x, _y, u, _v| {
        DMatrix::from_column_slice(2, 1, &[b0, 2.0 * w.control * u[0]])
    });
    let jac_delayed_control: JacobianFn = Arc::new(move |_t, _s, _x, _y, _u, v| {
        DMatrix::from_column_slice(2, 1, &[b1, 2.0 * w.delayed_control * v[0]])
    });

    let affine = AffineStructure {
        drift: Arc::new(move |_t, _s, x, y| dvector![a0 * x[0] + a1 * y[0]]),
        control_gain: Arc::new(move |_t, _s, _x, _y| DMatrix::from_element(1, 1, b0)),
        delayed_control_gain: Arc::new(move |_t, _s, _x, _y| DMatrix::from_element(1, 1, b1)),
        cost: CostStructure::Quadratic(weights),
    };

    OcpBuilder::new(
        "delayed-lq",
        1,
        1,
        dynamics,
        running_cost,
        ControlSet::Box {
            lower: dvector![-control_limit],
            upper: dvector![control_limit],
        },
        Target::free(1),
        constant_history(delta, dvector![initial_state]),
        pc_history(delta, dvector![0.0]),
        FinalTimeMode::Fixed(final_time),
    )
    .with_jacobians(jac_state, jac_delayed_state, jac_control, jac_delayed_control)
    .with_affine(affine)
    .with_default_law("quadratic")
    .build()
}

/// Minimum-time double integrator to the origin with |u| <= 1. Starting from
/// (-1, 0) the optimal solution is bang-bang with one switch at t = 1,
/// t_f = 2, and adjoint p(t) = (1, 1 - t).
pub fn double_integrator(x1_0: f64, x2_0: f64, delta: f64) -> Result<OcpProblem> {
    let dynamics: DynamicsFn = Arc::new(|_t, _s, x, _y, u, _v| dvector![x[1], u[0]]);
    let running_cost: CostFn = Arc::new(|_t, _s, _x, _y, _u, _v| 1.0);
    let jac_state: JacobianFn = Arc::new(|_t, _s, _x, _y, _u, _v| {
        DMatrix::from_row_slice(3, 2, &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0])
    });
    let jac_delayed_state: JacobianFn = Arc::new(|_t, _s, _x, _y, _u, _v| DMatrix::zeros(3, 2));
    let jac_control: JacobianFn =
        Arc::new(|_t, _s, _x, _y, _u, _v| DMatrix::from_column_slice(3, 1, &[0.0, 1.0, 0.0]));
    let jac_delayed_control: JacobianFn = Arc::new(|_t, _s, _x, _y, _u, _v| DMatrix::zeros(3, 1));

    let affine = AffineStructure {
        drift: Arc::new(|_t, _s, x, _y| dvector![x[1], 0.0]),
        control_gain: Arc::new(|_t, _s, _x, _y| DMatrix::from_column_slice(2, 1, &[0.0, 1.0])),
        delayed_control_gain: Arc::new(|_t, _s, _x, _y| DMatrix::zeros(2, 1)),
        cost: CostStructure::Affine {
            drift: Arc::new(|_t, _s, _x, _y, _u, _v| 1.0),
            lin_u: Arc::new(|_t, _s, _x, _y| dvector![0.0]),
            lin_v: Arc::new(|_t, _s, _x, _y| dvector![0.0]),
        },
    };

    OcpBuilder::new(
        "double-integrator",
        2,
        1,
        dynamics,
        running_cost,
        ControlSet::Box {
            lower: dvector![-1.0],
            upper: dvector![1.0],
        },
        Target::Point(dvector![0.0, 0.0]),
        constant_history(delta, dvector![x1_0, x2_0]),
        pc_history(delta, dvector![0.0]),
        FinalTimeMode::Free,
    )
    .with_jacobians(jac_state, jac_delayed_state, jac_control, jac_delayed_control)
    .with_affine(affine)
    .with_default_law("box")
    .build()
}

/// Result of rewriting a pure-control-delay problem as a non-delayed problem
/// on one delay interval, with time blocks stacked into the state and control.
///
/// Adjacent blocks are tied by the linkage conditions
/// `X_block[i](0) = X_block[i-1](block_len)`, which are not expressible as a
/// single-phase initial condition; consumers (the collocation oracle) enforce
/// them as equality constraints.
pub struct GuinnReduction {
    pub reduced: OcpProblem,
    /// Number of stacked blocks.
    pub blocks: usize,
    /// Reduced horizon = length of one block.
    pub block_len: f64,
    pub original_t_f: f64,
    pub original_state_dim: usize,
    pub original_control_dim: usize,
}

/// Rewrite `prob` (pure control delay, fixed final time) as a non-delayed
/// problem on `[0, block_len]` with `n_lag_intervals + 1` stacked blocks.
///
/// Requires `n_lag_intervals * lag < t_f <= (n_lag_intervals + 1) * lag`
/// with the lower inequality strict, and for more than one block the horizon
/// must be an exact multiple of the lag (ragged final blocks are rejected).
pub fn guinn_reduce(
    prob: &OcpProblem,
    delays: &DelayVector,
    n_lag_intervals: usize,
) -> Result<GuinnReduction> {
    let lag = delays.control_lag;
    if delays.time_lag != 0.0 || delays.state_lag != 0.0 {
        return Err(Error::invalid(
            "reduction",
            "only pure control delays are supported (time and state lags must be zero)",
        ));
    }
    if lag <= 0.0 {
        return Err(Error::invalid("reduction", "control lag must be positive"));
    }
    let t_f = match prob.final_time_mode {
        FinalTimeMode::Fixed(t) => t,
        FinalTimeMode::Free => {
            return Err(Error::invalid("reduction", "final time must be fixed"))
        }
    };
    let n = n_lag_intervals;
    if !(n as f64 * lag < t_f - 1e-12 && t_f <= (n as f64 + 1.0) * lag + 1e-12) {
        return Err(Error::invalid(
            "reduction",
            format!("need n*lag < t_f <= (n+1)*lag strictly; got n = {n}, lag = {lag}, t_f = {t_f}"),
        ));
    }
    let blocks = n + 1;
    let block_len = if n == 0 { t_f } else { lag };
    if n > 0 && (t_f - blocks as f64 * lag).abs() > 1e-9 {
        return Err(Error::invalid(
            "reduction",
            format!("t_f = {t_f} is not a whole number of lag intervals (lag = {lag})"),
        ));
    }

    let sd = prob.state_dim;
    let cd = prob.control_dim;
    let red_sd = sd * blocks;
    let red_cd = cd * blocks;

    let block_of = move |z: &DVector<f64>, i: usize, d: usize| -> DVector<f64> {
        DVector::from_iterator(d, (0..d).map(|j| z[i * d + j]))
    };

    let dynamics: DynamicsFn = {
        let base = prob.dynamics.clone();
        let hist = prob.history_control.clone();
        Arc::new(move |t, _s, x_st, _y, u_st, _v| {
            let mut out = DVector::zeros(red_sd);
            for i in 0..blocks {
                let ti = t + i as f64 * lag;
                let xi = block_of(x_st, i, sd);
                let ui = block_of(u_st, i, cd);
                let vi = if i == 0 {
                    hist.eval(t - lag).expect("history covers one lag interval")
                } else {
                    block_of(u_st, i - 1, cd)
                };
                let fi = base(ti, ti, &xi, &xi, &ui, &vi);
                out.rows_mut(i * sd, sd).copy_from(&fi);
            }
            out
        })
    };

    let running_cost: CostFn = {
        let base = prob.running_cost.clone();
        let hist = prob.history_control.clone();
        Arc::new(move |t, _s, x_st, _y, u_st, _v| {
            let mut total = 0.0;
            for i in 0..blocks {
                let ti = t + i as f64 * lag;
                let xi = block_of(x_st, i, sd);
                let ui = block_of(u_st, i, cd);
                let vi = if i == 0 {
                    hist.eval(t - lag).expect("history covers one lag interval")
                } else {
                    block_of(u_st, i - 1, cd)
                };
                total += base(ti, ti, &xi, &xi, &ui, &vi);
            }
            total
        })
    };

    let control_set = match &prob.control_set {
        ControlSet::Box { lower, upper } => {
            let mut lo = DVector::zeros(red_cd);
            let mut hi = DVector::zeros(red_cd);
            for i in 0..blocks {
                lo.rows_mut(i * cd, cd).copy_from(lower);
                hi.rows_mut(i * cd, cd).copy_from(upper);
            }
            ControlSet::Box { lower: lo, upper: hi }
        }
        _ => {
            return Err(Error::invalid(
                "reduction",
                "only box control sets are supported by the stacked problem",
            ))
        }
    };

    let target = match &prob.target {
        Target::Point(p) => {
            let mut mat = DMatrix::zeros(sd, red_sd);
            mat.view_mut((0, (blocks - 1) * sd), (sd, sd))
                .copy_from(&DMatrix::identity(sd, sd));
            Target::Affine { mat, rhs: p.clone() }
        }
        Target::Affine { mat, rhs } => {
            let k = mat.nrows();
            let mut big = DMatrix::zeros(k, red_sd);
            big.view_mut((0, (blocks - 1) * sd), (k, sd)).copy_from(mat);
            Target::Affine {
                mat: big,
                rhs: rhs.clone(),
            }
        }
    };

    // Only block 0's initial value is meaningful; the rest come from linkage.
    let x0 = prob.initial_state();
    let mut stacked0 = DVector::zeros(red_sd);
    stacked0.rows_mut(0, sd).copy_from(&x0);
    let hist_state = constant_history(delays.horizon_bound, stacked0);
    let hist_mid = match &control_set {
        ControlSet::Box { lower, upper } => (lower + upper) * 0.5,
        _ => unreachable!(),
    };
    let hist_control = pc_history(delays.horizon_bound, hist_mid);

    let reduced = OcpBuilder::new(
        format!("{}-reduced", prob.name),
        red_sd,
        red_cd,
        dynamics,
        running_cost,
        control_set,
        target,
        hist_state,
        hist_control,
        FinalTimeMode::Fixed(block_len),
    )
    .with_state_bound(prob.state_bound)
    .skip_audit()
    .build()?;

    Ok(GuinnReduction {
        reduced,
        blocks,
        block_len,
        original_t_f: t_f,
        original_state_dim: sd,
        original_control_dim: cd,
    })
}

impl GuinnReduction {
    fn unstack(
        &self,
        stacked: &SampledFunction,
        dim: usize,
        block_offset: impl Fn(usize) -> usize,
    ) -> Result<SampledFunction> {
        let nodes: Vec<f64> = stacked
            .all_nodes()
            .into_iter()
            .filter(|&t| t >= 0.0)
            .collect();
        let mut segments = Vec::new();
        for i in 0..self.blocks {
            let off = block_offset(i);
            let shift = i as f64 * self.block_len;
            let vals: Vec<DVector<f64>> = nodes
                .iter()
                .map(|&t| {
                    let z = stacked.eval(t)?;
                    Ok(DVector::from_iterator(dim, (0..dim).map(|j| z[off + j])))
                })
                .collect::<Result<_>>()?;
            let grid = TimeGrid::new(shift, shift + self.block_len, nodes.len() - 1)?;
            segments.push(crate::mesh::Segment::new(grid, vals, None, InterpRule::Linear)?);
        }
        SampledFunction::new(segments)
    }

    /// Map a stacked state trajectory back to the original horizon.
    pub fn unstack_state(&self, stacked: &SampledFunction) -> Result<SampledFunction> {
        let d = self.original_state_dim;
        self.unstack(stacked, d, |i| i * d)
    }

    pub fn unstack_control(&self, stacked: &SampledFunction) -> Result<SampledFunction> {
        let d = self.original_control_dim;
        self.unstack(stacked, d, |i| i * d)
    }

    /// Stack a control on `[-delta, t_f]` into the reduced control on one block.
    pub fn stack_control(&self, u: &SampledFunction, n_steps: usize) -> Result<SampledFunction> {
        let cd = self.original_control_dim;
        let blocks = self.blocks;
        let block_len = self.block_len;
        SampledFunction::from_fn(0.0, block_len, n_steps, InterpRule::Linear, |sigma| {
            let mut w = DVector::zeros(cd * blocks);
            for i in 0..blocks {
                let t = (sigma + i as f64 * block_len).min(self.original_t_f);
                let ui = u.eval(t).expect("control covers the horizon");
                w.rows_mut(i * cd, cd).copy_from(&ui);
            }
            w
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::integrate::{integrate_state, IntegratorConfig};
    use approx::assert_relative_eq;

    #[test]
    fn registry_builds_all_entries() {
        for entry in registry() {
            let prob = (entry.build)(&ProblemParams::new(), 1.0).unwrap();
            assert!(prob.state_dim > 0);
        }
    }

    #[test]
    fn unknown_problem_is_a_config_error() {
        let err = build_by_name("nope", &ProblemParams::new(), 1.0).unwrap_err();
        assert!(err.is_config());
        assert!(err.to_string().contains("nope"));
    }

    #[test]
    fn counterexample_reduces_to_classical_form_at_zero_lag() {
        let prob = counterexample(10.0, 1.0).unwrap();
        // With t = s the gap vanishes: x1' = 1 - x2^2, x2' = u1.
        let x = dvector![0.3, 0.4];
        let u = dvector![0.7, -0.2];
        let f = (prob.dynamics)(1.0, 1.0, &x, &x, &u, &u);
        assert_relative_eq!(f[0], 1.0 - 0.16, epsilon = 1e-15);
        assert_relative_eq!(f[1], 0.7, epsilon = 1e-15);
        // Unit running cost.
        assert_eq!((prob.running_cost)(0.5, 0.5, &x, &x, &u, &u), 1.0);
        // Unit-ball control set.
        assert!(prob.control_set.contains(&dvector![0.6, 0.8], 1e-12));
        assert!(!prob.control_set.contains(&dvector![0.8, 0.8], 1e-12));
    }

    #[test]
    fn counterexample_hamiltonian_at_reference_extremal() {
        let prob = counterexample(10.0, 1.0).unwrap();
        let t = 0.4;
        let x = dvector![t, 0.0];
        let p = dvector![1.0, 0.0];
        let u = dvector![0.0, 0.0];
        let h = prob.hamiltonian(t, t, &x, &x, &p, -1.0, &u, &u).unwrap();
        assert_relative_eq!(h, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn lq_rejects_non_coercive_weights() {
        let mut params = LqParams::default();
        params.weights.control = 0.0;
        assert!(delayed_lq(params, 1.0).is_err());
    }

    #[test]
    fn lq_dual_representation_hamiltonians_agree() {
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        let prob = delayed_lq(LqParams::default(), 1.0).unwrap();
        let aff = prob.affine.as_ref().unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let t: f64 = rng.gen_range(0.0..1.0);
            let x = dvector![rng.gen_range(-1.0..1.0)];
            let y = dvector![rng.gen_range(-1.0..1.0)];
            let u = dvector![rng.gen_range(-2.0..2.0)];
            let v = dvector![rng.gen_range(-2.0..2.0)];
            let p = dvector![rng.gen_range(-3.0..3.0)];
            let generic = prob.hamiltonian(t, t, &x, &y, &p, -1.0, &u, &v).unwrap();
            let f_aff = (aff.drift)(t, t, &x, &y)
                + (aff.control_gain)(t, t, &x, &y) * &u
                + (aff.delayed_control_gain)(t, t, &x, &y) * &v;
            let cost = match &aff.cost {
                CostStructure::Quadratic(w) => {
                    w.state * x[0] * x[0]
                        + w.delayed_state * y[0] * y[0]
                        + w.control * u[0] * u[0]
                        + w.delayed_control * v[0] * v[0]
                }
                _ => unreachable!(),
            };
            let via_affine = p.dot(&f_aff) - cost;
            assert_relative_eq!(generic, via_affine, epsilon = 1e-12);
        }
    }

    #[test]
    fn hamiltonian_affine_in_control_for_affine_problems() {
        let prob = counterexample(4.0, 1.0).unwrap();
        let x = dvector![0.2, -0.1];
        let p = dvector![0.5, 1.5];
        let u1 = dvector![0.3, 0.4];
        let u2 = dvector![-0.5, 0.1];
        let v = dvector![0.0, 0.0];
        let alpha = 0.37;
        let mix = &u1 * alpha + &u2 * (1.0 - alpha);
        let h_mix = prob.hamiltonian(0.8, 0.5, &x, &x, &p, -1.0, &mix, &v).unwrap();
        let h1 = prob.hamiltonian(0.8, 0.5, &x, &x, &p, -1.0, &u1, &v).unwrap();
        let h2 = prob.hamiltonian(0.8, 0.5, &x, &x, &p, -1.0, &u2, &v).unwrap();
        assert_relative_eq!(h_mix, alpha * h1 + (1.0 - alpha) * h2, epsilon = 1e-12);
    }

    fn control_delay_instance(lag: f64, t_f: f64) -> (OcpProblem, DelayVector) {
        let params = LqParams {
            state_gain: 0.0,
            delayed_state_gain: 0.0,
            control_gain: 1.0,
            delayed_control_gain: 1.0,
            weights: QuadraticCostWeights {
                state: 1.0,
                delayed_state: 0.0,
                control: 1.0,
                delayed_control: 0.0,
            },
            initial_state: 1.0,
            final_time: t_f,
            control_limit: 4.0,
        };
        let prob = delayed_lq(params, 1.0).unwrap();
        let delays = DelayVector::new(0.0, 0.0, lag, 1.0).unwrap();
        (prob, delays)
    }

    #[test]
    fn reduction_rejects_bad_configurations() {
        let (prob, delays) = control_delay_instance(0.25, 0.5);
        // Exact multiple with one lag interval: accepted (two full blocks).
        assert!(guinn_reduce(&prob, &delays, 1).is_ok());
        // Boundary case n = 2 with t_f = 2*lag: the strict lower inequality fails.
        assert!(guinn_reduce(&prob, &delays, 2).is_err());
        // State delays rejected.
        let bad = DelayVector::new(0.0, 0.1, 0.25, 1.0).unwrap();
        assert!(guinn_reduce(&prob, &bad, 1).is_err());
        // Ragged horizon rejected.
        let (prob2, delays2) = control_delay_instance(0.3, 0.5);
        assert!(guinn_reduce(&prob2, &delays2, 1).is_err());
    }

    #[test]
    fn single_block_reduction_freezes_lagged_control_at_history() {
        let (prob, delays) = control_delay_instance(0.6, 0.5); // t_f < lag
        let red = guinn_reduce(&prob, &delays, 0).unwrap();
        assert_eq!(red.blocks, 1);
        // v slot frozen at the (zero) history: dynamics reduce to x' = u.
        let x = dvector![0.7];
        let u = dvector![0.3];
        let f = (red.reduced.dynamics)(0.2, 0.2, &x, &x, &u, &u);
        assert_relative_eq!(f[0], 0.3, epsilon = 1e-14);
    }

    #[test]
    fn stacked_simulation_matches_direct_delayed_simulation() {
        let lag = 0.25;
        let t_f = 0.5;
        let (prob, delays) = control_delay_instance(lag, t_f);
        let red = guinn_reduce(&prob, &delays, 1).unwrap();
        assert_eq!(red.blocks, 2);

        // A smooth admissible control on [0, t_f], preceded by the problem's
        // (zero) control history so both routes see the same lagged values.
        let u_main = SampledFunction::from_fn(0.0, t_f, 200, InterpRule::Linear, |t| {
            dvector![(3.0 * t).sin().max(0.0) - 0.2]
        })
        .unwrap();
        let u = SampledFunction::concat(&prob.history_control, &u_main).unwrap();
        let cfg = IntegratorConfig::with_step(1e-3);
        let x_direct = integrate_state(&prob, &delays, &u, t_f, &cfg).unwrap();

        // Simulate the stacked system with the linkage enforced by fixed-point
        // chaining: block i must start where block i-1 ended. The stacking
        // mesh is a multiple of the control mesh so resampling is exact.
        let w = red.stack_control(&u, 500).unwrap();
        let zero_delays = DelayVector::zero(1.0);
        let mut red_prob = red.reduced.clone();
        let mut block1_start = 0.0;
        let mut xs = None;
        for _ in 0..=red.blocks {
            red_prob.history_state = constant_history(1.0, dvector![1.0, block1_start]);
            let sol = integrate_state(&red_prob, &zero_delays, &w, red.block_len, &cfg).unwrap();
            block1_start = sol.eval(red.block_len).unwrap()[0];
            xs = Some(sol);
        }
        let x_unstacked = red.unstack_state(&xs.unwrap()).unwrap();

        let mut worst: f64 = 0.0;
        let mut t = 0.0;
        while t <= t_f {
            let a = x_direct.eval(t).unwrap()[0];
            let b = x_unstacked.eval(t).unwrap()[0];
            worst = worst.max((a - b).abs());
            t += 0.005;
        }
        assert!(worst < 1e-8, "stacked vs direct mismatch {worst}");
    }
}
