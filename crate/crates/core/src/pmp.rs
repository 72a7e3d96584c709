//! Extremals, control synthesis from the pointwise maximality condition, and
//! residual diagnostics for the first-order optimality conditions.
//!
//! Synthesis laws are interchangeable strategies behind [`ControlLaw`],
//! selected by name ("ball", "box", "quadratic", "grid"). Each law maximizes
//! the gated two-term Hamiltonian sum in which the control enters both at `t`
//! and (through the delayed slot) at `t + control_lag`; the advanced-time
//! factors are taken from the previous sweep iterate so the maximization is
//! pointwise explicit.

use crate::error::{Error, Result};
use crate::integrate::IntegratorConfig;
use crate::mesh::{DelayVector, InterpRule, SampledFunction, Segment, TimeGrid};
use crate::problem::{extended_adjoint, CostStructure, OcpProblem, Target};
use nalgebra::DVector;
use serde::Serialize;

/// A Pontryagin extremal candidate: state and control on the full horizon
/// (history included), adjoint on `[0, t_f]`, and the constant cost
/// multiplier (`-1` for normal extremals).
#[derive(Debug, Clone)]
pub struct Extremal {
    pub state: SampledFunction,
    pub adjoint: SampledFunction,
    pub cost_multiplier: f64,
    pub control: SampledFunction,
    pub t_f: f64,
    pub delays: DelayVector,
}

impl Extremal {
    /// Nontriviality and admissibility checks.
    pub fn validate(&self, prob: &OcpProblem) -> Result<()> {
        let p_sup = self.adjoint_sup();
        if p_sup + self.cost_multiplier.abs() <= 0.0 {
            return Err(Error::invalid("extremal", "trivial multiplier pair"));
        }
        if self.cost_multiplier > 0.0 {
            return Err(Error::invalid("extremal", "cost multiplier must be <= 0"));
        }
        for &t in self
            .control
            .all_nodes()
            .iter()
            .filter(|&&t| t >= 0.0 && t <= self.t_f)
        {
            let u = self.control.eval(t)?;
            if !prob.control_set.contains(&u, 1e-7) {
                return Err(Error::invalid(
                    "extremal",
                    format!("control at t = {t} outside the admissible set"),
                ));
            }
        }
        Ok(())
    }

    /// Sup norm of the adjoint over its nodes.
    pub fn adjoint_sup(&self) -> f64 {
        self.adjoint
            .all_nodes()
            .iter()
            .map(|&t| self.adjoint.eval(t).map(|v| v.amax()).unwrap_or(0.0))
            .fold(0.0, f64::max)
    }

    pub fn terminal_adjoint(&self) -> DVector<f64> {
        self.adjoint
            .eval(self.t_f)
            .expect("adjoint defined up to t_f")
    }
}

/// Inputs a synthesis law reads: the current sweep iterate.
pub struct SynthesisContext<'a> {
    pub prob: &'a OcpProblem,
    pub delays: &'a DelayVector,
    pub state: &'a SampledFunction,
    pub adjoint: &'a SampledFunction,
    /// Previous control iterate, used for advanced-time factors.
    pub control_prev: &'a SampledFunction,
    pub cost_multiplier: f64,
    pub t_f: f64,
    scale_cache: std::cell::OnceCell<f64>,
}

impl<'a> SynthesisContext<'a> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        prob: &'a OcpProblem,
        delays: &'a DelayVector,
        state: &'a SampledFunction,
        adjoint: &'a SampledFunction,
        control_prev: &'a SampledFunction,
        cost_multiplier: f64,
        t_f: f64,
    ) -> Self {
        SynthesisContext {
            prob,
            delays,
            state,
            adjoint,
            control_prev,
            cost_multiplier,
            t_f,
            scale_cache: std::cell::OnceCell::new(),
        }
    }

    pub fn for_extremal(prob: &'a OcpProblem, ext: &'a Extremal) -> Self {
        SynthesisContext::new(
            prob,
            &ext.delays,
            &ext.state,
            &ext.adjoint,
            &ext.control,
            ext.cost_multiplier,
            ext.t_f,
        )
    }

    fn args_at(&self, t: f64) -> Result<(DVector<f64>, DVector<f64>, DVector<f64>, DVector<f64>)> {
        let x = self.state.eval(t)?;
        let y = if self.delays.state_lag == 0.0 {
            x.clone()
        } else {
            self.state.eval(t - self.delays.state_lag)?
        };
        let u = self.control_prev.eval(t)?;
        let v = if self.delays.control_lag == 0.0 {
            u.clone()
        } else {
            self.control_prev.eval(t - self.delays.control_lag)?
        };
        Ok((x, y, u, v))
    }

    /// Gradient in the control of the gated Hamiltonian sum, evaluated on the
    /// iterate. The first term differentiates the control slot at `t`, the
    /// second the delayed-control slot at `t + control_lag` (zero past the
    /// horizon cutoff).
    pub fn switching_gradient(&self, t: f64) -> Result<DVector<f64>> {
        let lag_u = self.delays.control_lag;
        let lag_t = self.delays.time_lag;
        let (x, y, u, v) = self.args_at(t)?;
        let p = self.adjoint.eval(t)?;
        let ptilde = extended_adjoint(&p, self.cost_multiplier);
        let mut phi = (self.prob.jac_control)(t, t - lag_t, &x, &y, &u, &v).transpose() * &ptilde;
        let ta = t + lag_u;
        if lag_u > 0.0 && ta <= self.t_f {
            let (xa, ya, ua, _va) = self.args_at(ta)?;
            let pa = self.adjoint.eval(ta)?;
            let pa_tilde = extended_adjoint(&pa, self.cost_multiplier);
            // The candidate occupies the delayed slot at ta; the iterate's
            // value at t stands in as the linearization point.
            let va = self.control_prev.eval(t)?;
            phi += (self.prob.jac_delayed_control)(ta, ta - lag_t, &xa, &ya, &ua, &va).transpose()
                * &pa_tilde;
        }
        Ok(phi)
    }

    /// Value of `H(t, ..., w, v(t)) + 1{t + lag <= t_f} H(t + lag, ..., u(t + lag), w)`
    /// for a candidate control `w`.
    pub fn gated_hamiltonian_sum(&self, t: f64, w: &DVector<f64>) -> Result<f64> {
        let lag_u = self.delays.control_lag;
        let lag_t = self.delays.time_lag;
        let (x, y, _u, v) = self.args_at(t)?;
        let p = self.adjoint.eval(t)?;
        let mut total = self
            .prob
            .hamiltonian(t, t - lag_t, &x, &y, &p, self.cost_multiplier, w, &v)?;
        let ta = t + lag_u;
        if lag_u > 0.0 && ta <= self.t_f {
            let (xa, ya, ua, _va) = self.args_at(ta)?;
            let pa = self.adjoint.eval(ta)?;
            total += self
                .prob
                .hamiltonian(ta, ta - lag_t, &xa, &ya, &pa, self.cost_multiplier, &ua, w)?;
        }
        Ok(total)
    }

    /// Scale that makes the singular threshold invariant under scaling of the
    /// multiplier pair. Computed once per context.
    pub fn multiplier_scale(&self) -> f64 {
        *self.scale_cache.get_or_init(|| {
            let sup = self
                .adjoint
                .all_nodes()
                .iter()
                .map(|&t| self.adjoint.eval(t).map(|v| v.amax()).unwrap_or(0.0))
                .fold(0.0, f64::max);
            sup.max(self.cost_multiplier.abs()).max(1e-300)
        })
    }
}

/// Pointwise synthesis output.
pub struct PointSynthesis {
    pub value: DVector<f64>,
    /// Norm of the switching gradient when the law is gradient-driven.
    pub gradient_norm: Option<f64>,
    pub singular: bool,
}

/// One interchangeable maximization strategy.
pub trait ControlLaw: Send + Sync {
    fn name(&self) -> &'static str;
    /// Interpolation rule for the synthesized control.
    fn interp(&self) -> InterpRule;
    fn control_at(&self, ctx: &SynthesisContext, t: f64) -> Result<PointSynthesis>;
}

/// Normalized-gradient law for ball control sets: `u = r phi / |phi|`, zero
/// on the singular set where the gradient vanishes.
pub struct BallLaw {
    pub singular_rel_tol: f64,
}

impl Default for BallLaw {
    fn default() -> Self {
        BallLaw {
            singular_rel_tol: 1e-9,
        }
    }
}

impl ControlLaw for BallLaw {
    fn name(&self) -> &'static str {
        "ball"
    }

    fn interp(&self) -> InterpRule {
        InterpRule::Linear
    }

    fn control_at(&self, ctx: &SynthesisContext, t: f64) -> Result<PointSynthesis> {
        let radius = match ctx.prob.control_set {
            crate::problem::ControlSet::Ball { radius } => radius,
            _ => return Err(Error::Config("the ball law needs a ball control set".into())),
        };
        let phi = ctx.switching_gradient(t)?;
        let norm = phi.norm();
        let tol = self.singular_rel_tol * ctx.multiplier_scale();
        if norm < tol {
            Ok(PointSynthesis {
                value: DVector::zeros(phi.len()),
                gradient_norm: Some(norm),
                singular: true,
            })
        } else {
            Ok(PointSynthesis {
                value: phi * (radius / norm),
                gradient_norm: Some(norm),
                singular: false,
            })
        }
    }
}

/// Componentwise sign law for box control sets (bang-bang).
pub struct BoxLaw {
    pub singular_rel_tol: f64,
}

impl Default for BoxLaw {
    fn default() -> Self {
        BoxLaw {
            singular_rel_tol: 1e-9,
        }
    }
}

impl ControlLaw for BoxLaw {
    fn name(&self) -> &'static str {
        "box"
    }

    fn interp(&self) -> InterpRule {
        InterpRule::PiecewiseConstant
    }

    fn control_at(&self, ctx: &SynthesisContext, t: f64) -> Result<PointSynthesis> {
        let (lower, upper) = match &ctx.prob.control_set {
            crate::problem::ControlSet::Box { lower, upper } => (lower.clone(), upper.clone()),
            _ => return Err(Error::Config("the box law needs a box control set".into())),
        };
        let phi = ctx.switching_gradient(t)?;
        let tol = self.singular_rel_tol * ctx.multiplier_scale();
        let mut weakest = f64::INFINITY;
        let mut value = DVector::zeros(phi.len());
        for (i, &g) in phi.iter().enumerate() {
            weakest = weakest.min(g.abs());
            value[i] = if g > 0.0 {
                upper[i]
            } else if g < 0.0 {
                lower[i]
            } else {
                0.5 * (lower[i] + upper[i])
            };
        }
        Ok(PointSynthesis {
            value,
            gradient_norm: Some(weakest),
            singular: weakest < tol,
        })
    }
}

/// Closed-form saturated maximizer for quadratic control costs: the interior
/// stationary point of the gated sum, clamped into the control set. With a
/// Tikhonov weight it regularizes affine-cost problems instead.
pub struct QuadraticLaw {
    pub tikhonov: Option<f64>,
}

impl QuadraticLaw {
    pub fn from_cost() -> Self {
        QuadraticLaw { tikhonov: None }
    }

    pub fn with_tikhonov(eps: f64) -> Self {
        QuadraticLaw { tikhonov: Some(eps) }
    }
}

impl ControlLaw for QuadraticLaw {
    fn name(&self) -> &'static str {
        "quadratic"
    }

    fn interp(&self) -> InterpRule {
        InterpRule::Linear
    }

    fn control_at(&self, ctx: &SynthesisContext, t: f64) -> Result<PointSynthesis> {
        let p0 = ctx.cost_multiplier;
        if p0 >= 0.0 {
            return Err(Error::Config(
                "the quadratic law needs a negative cost multiplier".into(),
            ));
        }
        let lag_u = ctx.delays.control_lag;
        let gated = lag_u > 0.0 && t + lag_u <= ctx.t_f;

        let (numerator, curvature) = match (&ctx.prob.affine, self.tikhonov) {
            (Some(aff), None) => {
                let w = match aff.cost {
                    CostStructure::Quadratic(w) => w,
                    _ => {
                        return Err(Error::Config(
                            "the quadratic law needs a quadratic cost structure or a Tikhonov weight"
                                .into(),
                        ))
                    }
                };
                let lag_t = ctx.delays.time_lag;
                let (x, y, _u, _v) = ctx.args_at(t)?;
                let p = ctx.adjoint.eval(t)?;
                let mut num = (aff.control_gain)(t, t - lag_t, &x, &y).transpose() * &p;
                if gated {
                    let ta = t + lag_u;
                    let (xa, ya, _ua, _va) = ctx.args_at(ta)?;
                    let pa = ctx.adjoint.eval(ta)?;
                    num += (aff.delayed_control_gain)(ta, ta - lag_t, &xa, &ya).transpose() * &pa;
                }
                let curv =
                    2.0 * (-p0) * (w.control + if gated { w.delayed_control } else { 0.0 });
                (num, curv)
            }
            (_, Some(eps)) => {
                let phi = ctx.switching_gradient(t)?;
                (phi, 2.0 * (-p0) * eps)
            }
            (None, None) => {
                return Err(Error::Config(
                    "the quadratic law needs an affine problem structure".into(),
                ))
            }
        };
        let unconstrained = numerator / curvature;
        let value = ctx.prob.control_set.clamp(&unconstrained);
        Ok(PointSynthesis {
            value,
            gradient_norm: None,
            singular: false,
        })
    }
}

/// Exhaustive lattice maximization; validation only.
pub struct GridLaw {
    pub per_axis: usize,
}

impl Default for GridLaw {
    fn default() -> Self {
        GridLaw { per_axis: 17 }
    }
}

impl ControlLaw for GridLaw {
    fn name(&self) -> &'static str {
        "grid"
    }

    fn interp(&self) -> InterpRule {
        InterpRule::PiecewiseConstant
    }

    fn control_at(&self, ctx: &SynthesisContext, t: f64) -> Result<PointSynthesis> {
        let lattice = ctx
            .prob
            .control_set
            .lattice(ctx.prob.control_dim, self.per_axis);
        let mut best: Option<(DVector<f64>, f64)> = None;
        for w in lattice {
            let value = ctx.gated_hamiltonian_sum(t, &w)?;
            match &best {
                Some((_, v)) if *v >= value => {}
                _ => best = Some((w, value)),
            }
        }
        let (value, _) = best.ok_or_else(|| Error::Config("empty control lattice".into()))?;
        Ok(PointSynthesis {
            value,
            gradient_norm: None,
            singular: false,
        })
    }
}

/// Synthesis-law registry; laws are selected by name from configuration.
pub fn control_law(name: &str) -> Result<Box<dyn ControlLaw>> {
    match name {
        "ball" => Ok(Box::new(BallLaw::default())),
        "box" => Ok(Box::new(BoxLaw::default())),
        "quadratic" => Ok(Box::new(QuadraticLaw::from_cost())),
        "grid" => Ok(Box::new(GridLaw::default())),
        other => Err(Error::Config(format!(
            "unknown synthesis law '{other}' (available: ball, box, quadratic, grid)"
        ))),
    }
}

/// Where the synthesized control ran into a vanishing switching gradient.
#[derive(Debug, Clone, Default, Serialize)]
pub struct SingularReport {
    pub flagged: bool,
    /// Longest run of consecutive singular mesh nodes.
    pub longest_run: usize,
    /// Intervals on which the gradient stayed below the threshold.
    pub spans: Vec<(f64, f64)>,
}

impl SingularReport {
    pub fn merge(&mut self, other: &SingularReport) {
        self.flagged |= other.flagged;
        self.longest_run = self.longest_run.max(other.longest_run);
        for s in &other.spans {
            if !self.spans.contains(s) {
                self.spans.push(*s);
            }
        }
    }
}

/// Mesh cells a singular run must exceed before the flag is raised (strong
/// continuity of controls may fail across such arcs).
const SINGULAR_RUN_CELLS: usize = 5;

/// Pointwise synthesis on a uniform mesh over `[0, t_f]`, history prepended.
#[allow(clippy::too_many_arguments)]
pub fn synthesize_control(
    prob: &OcpProblem,
    delays: &DelayVector,
    law: &dyn ControlLaw,
    state: &SampledFunction,
    adjoint: &SampledFunction,
    control_prev: &SampledFunction,
    cost_multiplier: f64,
    t_f: f64,
    cfg: &IntegratorConfig,
) -> Result<(SampledFunction, SingularReport)> {
    let ctx = SynthesisContext::new(prob, delays, state, adjoint, control_prev, cost_multiplier, t_f);
    let n_steps = ((t_f / cfg.step).ceil() as usize).max(2);
    let grid = TimeGrid::new(0.0, t_f, n_steps)?;
    let mut values = Vec::with_capacity(grid.n_nodes());
    let mut report = SingularReport::default();
    let mut run = 0usize;
    let mut run_start = 0.0;
    for &t in grid.nodes() {
        let point = law.control_at(&ctx, t)?;
        if point.singular {
            if run == 0 {
                run_start = t;
            }
            run += 1;
            report.longest_run = report.longest_run.max(run);
            if run > SINGULAR_RUN_CELLS {
                report.flagged = true;
            }
        } else {
            if run > SINGULAR_RUN_CELLS {
                report.spans.push((run_start, t));
            }
            run = 0;
        }
        values.push(point.value);
    }
    if run > SINGULAR_RUN_CELLS {
        report.spans.push((run_start, t_f));
    }
    let seg = Segment::new(grid, values, None, law.interp())?;
    let synthesized = SampledFunction::from_segment(seg);
    let full = SampledFunction::concat(&prob.history_control, &synthesized)?;
    Ok((full, report))
}

/// Largest advantage any lattice point has over the extremal's own control in
/// the gated Hamiltonian sum; nonpositive (up to tolerance) certifies the
/// maximality condition on the lattice.
pub fn maximality_defect(
    prob: &OcpProblem,
    delays: &DelayVector,
    ext: &Extremal,
    per_axis: usize,
) -> Result<f64> {
    let ctx = SynthesisContext::new(
        prob,
        delays,
        &ext.state,
        &ext.adjoint,
        &ext.control,
        ext.cost_multiplier,
        ext.t_f,
    );
    let lattice = prob.control_set.lattice(prob.control_dim, per_axis);
    let mut worst = f64::NEG_INFINITY;
    for &t in ext
        .state
        .all_nodes()
        .iter()
        .filter(|&&t| (0.0..=ext.t_f).contains(&t))
    {
        let own = ctx.gated_hamiltonian_sum(t, &ext.control.eval(t)?)?;
        for w in &lattice {
            let trial = ctx.gated_hamiltonian_sum(t, w)?;
            worst = worst.max(trial - own);
        }
    }
    Ok(worst)
}

/// Components of the terminal adjoint lying in the target's tangent space.
/// Empty for a point target (the condition is vacuous there).
pub fn transversality_residual(ext: &Extremal, target: &Target) -> DVector<f64> {
    let p_final = ext.terminal_adjoint();
    match target.tangent_basis(p_final.len()) {
        None => DVector::zeros(0),
        Some(basis) => basis.transpose() * p_final,
    }
}

/// Hamiltonian value at the final time; must vanish for free-final-time
/// extremals. Controls are read as left limits at the endpoint.
pub fn free_time_residual(prob: &OcpProblem, delays: &DelayVector, ext: &Extremal) -> Result<f64> {
    if !prob.final_time_mode.is_free() {
        return Err(Error::Config(
            "final-time residual requested for a fixed-final-time problem".into(),
        ));
    }
    let t = ext.t_f;
    let x = ext.state.eval(t)?;
    let y = if delays.state_lag == 0.0 {
        x.clone()
    } else {
        ext.state.eval(t - delays.state_lag)?
    };
    let p = ext.adjoint.eval(t)?;
    let u = ext.control.eval_left_limit(t)?;
    let v = if delays.control_lag == 0.0 {
        u.clone()
    } else {
        ext.control.eval_left_limit(t - delays.control_lag)?
    };
    prob.hamiltonian(t, t - delays.time_lag, &x, &y, &p, ext.cost_multiplier, &u, &v)
}

/// Sup-norm defects of the first-order conditions on the mesh.
#[derive(Debug, Clone, Serialize)]
pub struct ResidualReport {
    pub adjoint_defect: f64,
    pub maximality_defect: f64,
    pub transversality_defect: f64,
    pub free_time_defect: f64,
    pub boundary_defect: f64,
}

/// Acceptance thresholds for a [`ResidualReport`].
#[derive(Debug, Clone, Serialize, serde::Deserialize)]
pub struct Tolerances {
    pub adjoint: f64,
    pub maximality: f64,
    pub transversality: f64,
    pub free_time: f64,
    pub boundary: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            // The adjoint defect compares dense-output derivatives against
            // the recomputed right-hand side at cell midpoints, an O(h^3)
            // quantity on the integration mesh.
            adjoint: 1e-4,
            maximality: 1e-8,
            transversality: 1e-8,
            free_time: 1e-8,
            boundary: 1e-8,
        }
    }
}

impl ResidualReport {
    pub fn below(&self, tol: &Tolerances) -> bool {
        self.adjoint_defect <= tol.adjoint
            && self.maximality_defect <= tol.maximality
            && self.transversality_defect <= tol.transversality
            && self.free_time_defect <= tol.free_time
            && self.boundary_defect <= tol.boundary
    }

    pub fn max_shooting_defect(&self) -> f64 {
        self.transversality_defect
            .max(self.free_time_defect)
            .max(self.boundary_defect)
    }
}

/// Defect of the adjoint equation measured at cell midpoints: the dense
/// interpolant's derivative against the recomputed right-hand side.
fn adjoint_equation_defect(prob: &OcpProblem, delays: &DelayVector, ext: &Extremal) -> Result<f64> {
    let lag_t = delays.time_lag;
    let lag_x = delays.state_lag;
    let lag_u = delays.control_lag;
    let t_f = ext.t_f;
    let p0 = ext.cost_multiplier;
    let nodes = ext.adjoint.all_nodes();
    let mut worst: f64 = 0.0;
    for w in nodes.windows(2) {
        let t = 0.5 * (w[0] + w[1]);
        let lhs = ext.adjoint.eval_deriv(t)?;
        let x = ext.state.eval(t)?;
        let y = if lag_x == 0.0 { x.clone() } else { ext.state.eval(t - lag_x)? };
        let u = ext.control.eval(t)?;
        let v = if lag_u == 0.0 { u.clone() } else { ext.control.eval(t - lag_u)? };
        let p = ext.adjoint.eval(t)?;
        let mut rhs = -prob.hamiltonian_grad_state(t, t - lag_t, &x, &y, &p, p0, &u, &v);
        if t + lag_x <= t_f {
            let ta = t + lag_x;
            let xa = ext.state.eval(ta)?;
            let ua = ext.control.eval(ta)?;
            let va = if lag_u == 0.0 { ua.clone() } else { ext.control.eval(ta - lag_u)? };
            let pa = ext.adjoint.eval(ta)?;
            rhs -= prob.hamiltonian_grad_delayed_state(ta, ta - lag_t, &xa, &x, &pa, p0, &ua, &va);
        }
        worst = worst.max((lhs - rhs).amax());
    }
    Ok(worst)
}

/// Assemble the full diagnostic report for an extremal.
pub fn residual_report(
    prob: &OcpProblem,
    delays: &DelayVector,
    ext: &Extremal,
    maximality_lattice: usize,
) -> Result<ResidualReport> {
    let boundary = {
        let r = prob.target.boundary_residual(&ext.state.eval(ext.t_f)?);
        if r.is_empty() {
            0.0
        } else {
            r.abs().max()
        }
    };
    let transversality = {
        let r = transversality_residual(ext, &prob.target);
        if r.is_empty() {
            0.0
        } else {
            r.abs().max()
        }
    };
    let free_time = if prob.final_time_mode.is_free() {
        free_time_residual(prob, delays, ext)?.abs()
    } else {
        0.0
    };
    let maximality = maximality_defect(prob, delays, ext, maximality_lattice)?.max(0.0);
    let adjoint = adjoint_equation_defect(prob, delays, ext)?;
    Ok(ResidualReport {
        adjoint_defect: adjoint,
        maximality_defect: maximality,
        transversality_defect: transversality,
        free_time_defect: free_time,
        boundary_defect: boundary,
    })
}
