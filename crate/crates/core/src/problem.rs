//! Problem definition: dynamics, running cost, derivatives, control set,
//! target set, history functions and final-time mode.
//!
//! Dynamics and cost are callbacks `(t, s, x, y, u, v)` where `s` is the
//! shifted explicit time argument, `y` the delayed state and `v` the delayed
//! control. Jacobian callbacks differentiate the extended field
//! `(f, f0): R^n x R -> R^{n+1}` so the adjoint and variational equations can
//! share them.

use crate::error::{Error, Result};
use crate::mesh::SampledFunction;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fmt;
use std::sync::Arc;

pub type DynamicsFn =
    Arc<dyn Fn(f64, f64, &DVector<f64>, &DVector<f64>, &DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync>;
pub type CostFn =
    Arc<dyn Fn(f64, f64, &DVector<f64>, &DVector<f64>, &DVector<f64>, &DVector<f64>) -> f64 + Send + Sync>;
pub type JacobianFn =
    Arc<dyn Fn(f64, f64, &DVector<f64>, &DVector<f64>, &DVector<f64>, &DVector<f64>) -> DMatrix<f64> + Send + Sync>;
pub type FieldFn = Arc<dyn Fn(f64, f64, &DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync>;
pub type GainFn = Arc<dyn Fn(f64, f64, &DVector<f64>, &DVector<f64>) -> DMatrix<f64> + Send + Sync>;

/// Admissible control set. Compact and convex by construction; the vertex
/// list is only used to validate bang-bang structure, never as the feasible
/// set of a solve.
#[derive(Clone)]
pub enum ControlSet {
    Ball { radius: f64 },
    Box { lower: DVector<f64>, upper: DVector<f64> },
    Vertices { points: Vec<DVector<f64>> },
}

impl fmt::Debug for ControlSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ControlSet::Ball { radius } => write!(f, "Ball(r={radius})"),
            ControlSet::Box { lower, upper } => write!(f, "Box({lower:?}..{upper:?})"),
            ControlSet::Vertices { points } => write!(f, "Vertices(n={})", points.len()),
        }
    }
}

impl ControlSet {
    pub fn dim(&self) -> usize {
        match self {
            ControlSet::Ball { .. } => 0, // dimension-agnostic; checked against problem
            ControlSet::Box { lower, .. } => lower.len(),
            ControlSet::Vertices { points } => points.first().map_or(0, |p| p.len()),
        }
    }

    pub fn contains(&self, u: &DVector<f64>, tol: f64) -> bool {
        match self {
            ControlSet::Ball { radius } => u.norm() <= radius + tol,
            ControlSet::Box { lower, upper } => u
                .iter()
                .zip(lower.iter().zip(upper.iter()))
                .all(|(ui, (lo, hi))| *ui >= lo - tol && *ui <= hi + tol),
            ControlSet::Vertices { points } => points
                .iter()
                .any(|p| (p - u).amax() <= tol),
        }
    }

    /// Clamp a point into the set (used by saturated closed-form laws).
    pub fn clamp(&self, u: &DVector<f64>) -> DVector<f64> {
        match self {
            ControlSet::Ball { radius } => {
                let n = u.norm();
                if n <= *radius || n == 0.0 {
                    u.clone()
                } else {
                    u * (*radius / n)
                }
            }
            ControlSet::Box { lower, upper } => DVector::from_iterator(
                u.len(),
                u.iter()
                    .zip(lower.iter().zip(upper.iter()))
                    .map(|(ui, (lo, hi))| ui.max(*lo).min(*hi)),
            ),
            ControlSet::Vertices { points } => points
                .iter()
                .min_by(|a, b| {
                    let da = (*a - u).norm();
                    let db = (*b - u).norm();
                    da.partial_cmp(&db).unwrap()
                })
                .cloned()
                .unwrap_or_else(|| u.clone()),
        }
    }

    /// A deterministic lattice covering the set, for grid-search synthesis and
    /// maximality audits. `per_axis` controls resolution.
    pub fn lattice(&self, dim: usize, per_axis: usize) -> Vec<DVector<f64>> {
        let per_axis = per_axis.max(2);
        match self {
            ControlSet::Ball { radius } => match dim {
                1 => linspace(-radius, *radius, per_axis)
                    .into_iter()
                    .map(|x| DVector::from_vec(vec![x]))
                    .collect(),
                2 => {
                    let mut pts = vec![DVector::zeros(2)];
                    let n_r = (per_axis / 2).max(2);
                    for (i, r) in linspace(0.0, *radius, n_r).into_iter().enumerate().skip(1) {
                        let n_ang = (per_axis * i).max(4);
                        for k in 0..n_ang {
                            let a = 2.0 * std::f64::consts::PI * k as f64 / n_ang as f64;
                            pts.push(DVector::from_vec(vec![r * a.cos(), r * a.sin()]));
                        }
                    }
                    pts
                }
                _ => {
                    // Axis cross plus center: coarse but deterministic.
                    let mut pts = vec![DVector::zeros(dim)];
                    for i in 0..dim {
                        for x in linspace(-radius, *radius, per_axis) {
                            let mut p = DVector::zeros(dim);
                            p[i] = x;
                            pts.push(p);
                        }
                    }
                    pts
                }
            },
            ControlSet::Box { lower, upper } => {
                let axes: Vec<Vec<f64>> = (0..dim)
                    .map(|i| linspace(lower[i], upper[i], per_axis))
                    .collect();
                let mut pts = vec![DVector::zeros(dim)];
                pts.clear();
                let mut idx = vec![0usize; dim];
                loop {
                    pts.push(DVector::from_iterator(dim, (0..dim).map(|i| axes[i][idx[i]])));
                    let mut carry = 0;
                    loop {
                        idx[carry] += 1;
                        if idx[carry] < per_axis {
                            break;
                        }
                        idx[carry] = 0;
                        carry += 1;
                        if carry == dim {
                            return pts;
                        }
                    }
                }
            }
            ControlSet::Vertices { points } => points.clone(),
        }
    }

    /// Deterministic sample points in the set (for construction-time checks).
    fn sample(&self, dim: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
        match self {
            ControlSet::Ball { radius } => {
                let raw = DVector::from_iterator(dim, (0..dim).map(|_| rng.gen_range(-1.0..1.0)));
                let n = raw.norm();
                if n == 0.0 {
                    raw
                } else {
                    &raw * (rng.gen_range(0.0..1.0) * radius / n)
                }
            }
            ControlSet::Box { lower, upper } => DVector::from_iterator(
                dim,
                (0..dim).map(|i| rng.gen_range(lower[i]..=upper[i])),
            ),
            ControlSet::Vertices { points } => {
                points[rng.gen_range(0..points.len())].clone()
            }
        }
    }
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n <= 1 {
        return vec![lo];
    }
    (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect()
}

/// Terminal target: a point, or an affine submanifold `{x : A x = b}`.
/// An affine target with zero rows is a free endpoint.
#[derive(Debug, Clone)]
pub enum Target {
    Point(DVector<f64>),
    Affine { mat: DMatrix<f64>, rhs: DVector<f64> },
}

impl Target {
    pub fn free(state_dim: usize) -> Self {
        Target::Affine {
            mat: DMatrix::zeros(0, state_dim),
            rhs: DVector::zeros(0),
        }
    }

    /// Rows of the boundary residual (`n` for a point, `k` for affine).
    pub fn boundary_dim(&self, state_dim: usize) -> usize {
        match self {
            Target::Point(_) => state_dim,
            Target::Affine { mat, .. } => mat.nrows(),
        }
    }

    pub fn boundary_residual(&self, x_final: &DVector<f64>) -> DVector<f64> {
        match self {
            Target::Point(p) => x_final - p,
            Target::Affine { mat, rhs } => mat * x_final - rhs,
        }
    }

    /// Orthonormal basis of the tangent space of the target at any of its
    /// points (kernel of `A`); `None` for a point target (trivial tangent).
    pub fn tangent_basis(&self, state_dim: usize) -> Option<DMatrix<f64>> {
        match self {
            Target::Point(_) => None,
            Target::Affine { mat, .. } => {
                if mat.nrows() == 0 {
                    return Some(DMatrix::identity(state_dim, state_dim));
                }
                // Row-space basis from the (thin) SVD, then complete it with
                // Gram-Schmidt over the standard basis; the completions span
                // the kernel.
                let svd = mat.clone().svd(false, true);
                let v_t = svd.v_t.expect("requested");
                let tol = 1e-12 * svd.singular_values.max().max(1.0);
                let rank = svd.singular_values.iter().filter(|s| **s > tol).count();
                let mut accumulated: Vec<DVector<f64>> = (0..rank)
                    .map(|i| v_t.row(i).transpose().clone_owned())
                    .collect();
                let mut kernel: Vec<DVector<f64>> = Vec::new();
                for i in 0..state_dim {
                    let mut e = DVector::zeros(state_dim);
                    e[i] = 1.0;
                    for b in &accumulated {
                        let proj = b.dot(&e);
                        e -= b * proj;
                    }
                    if e.norm() > 1e-10 {
                        let e = e.normalize();
                        accumulated.push(e.clone());
                        kernel.push(e);
                    }
                }
                let mut basis = DMatrix::zeros(state_dim, kernel.len());
                for (j, k) in kernel.iter().enumerate() {
                    basis.set_column(j, k);
                }
                Some(basis)
            }
        }
    }
}

/// Whether the final time is fixed or a solve unknown.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum FinalTimeMode {
    Fixed(f64),
    Free,
}

impl FinalTimeMode {
    pub fn is_free(&self) -> bool {
        matches!(self, FinalTimeMode::Free)
    }
}

/// Quadratic running-cost weights `k1 |x|^2 + k2 |y|^2 + k3 |u|^2 + k4 |v|^2`.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct QuadraticCostWeights {
    pub state: f64,
    pub delayed_state: f64,
    pub control: f64,
    pub delayed_control: f64,
}

/// Structure available when the dynamics are affine in `(u, v)`:
/// `f = drift + B_u u + B_v v`.
#[derive(Clone)]
pub struct AffineStructure {
    pub drift: FieldFn,
    pub control_gain: GainFn,
    pub delayed_control_gain: GainFn,
    pub cost: CostStructure,
}

/// Running-cost structure for affine problems.
#[derive(Clone)]
pub enum CostStructure {
    /// `f0 = drift + <lin_u, u> + <lin_v, v>`.
    Affine {
        drift: CostFn,
        lin_u: FieldFn,
        lin_v: FieldFn,
    },
    /// Quadratic norms with constant weights; `control` weight must be > 0
    /// for the closed-form saturated law.
    Quadratic(QuadraticCostWeights),
}

/// An optimal control problem with constant delays.
#[derive(Clone)]
pub struct OcpProblem {
    pub name: String,
    pub state_dim: usize,
    pub control_dim: usize,
    pub dynamics: DynamicsFn,
    pub running_cost: CostFn,
    /// Jacobians of the extended field `(f, f0)`, shape `(n+1) x n`.
    pub jac_state: JacobianFn,
    pub jac_delayed_state: JacobianFn,
    /// Shape `(n+1) x m`.
    pub jac_control: JacobianFn,
    pub jac_delayed_control: JacobianFn,
    pub control_set: ControlSet,
    pub target: Target,
    pub history_state: SampledFunction,
    pub history_control: SampledFunction,
    pub final_time_mode: FinalTimeMode,
    pub affine: Option<AffineStructure>,
    /// A-priori bound on `t_f + |x(t)|`; used only as a divergence guard.
    pub state_bound: f64,
    /// Synthesis law this problem is normally solved with.
    pub default_law: &'static str,
}

impl fmt::Debug for OcpProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("OcpProblem")
            .field("name", &self.name)
            .field("state_dim", &self.state_dim)
            .field("control_dim", &self.control_dim)
            .field("control_set", &self.control_set)
            .field("final_time_mode", &self.final_time_mode)
            .finish()
    }
}

impl OcpProblem {
    /// Evaluate the extended field `(f, f0)`.
    pub fn extended_field(
        &self,
        t: f64,
        s: f64,
        x: &DVector<f64>,
        y: &DVector<f64>,
        u: &DVector<f64>,
        v: &DVector<f64>,
    ) -> DVector<f64> {
        let f = (self.dynamics)(t, s, x, y, u, v);
        let f0 = (self.running_cost)(t, s, x, y, u, v);
        let mut out = DVector::zeros(self.state_dim + 1);
        out.rows_mut(0, self.state_dim).copy_from(&f);
        out[self.state_dim] = f0;
        out
    }

    /// History segment start (`-delta`).
    pub fn history_start(&self) -> f64 {
        self.history_state.t_start()
    }

    /// Initial state `phi1(0)`.
    pub fn initial_state(&self) -> DVector<f64> {
        self.history_state
            .eval(0.0)
            .expect("history defined at 0 by construction")
    }

    /// Value of the Hamiltonian `<p, f> + p0 f0`.
    #[allow(clippy::too_many_arguments)]
    pub fn hamiltonian(
        &self,
        t: f64,
        s: f64,
        x: &DVector<f64>,
        y: &DVector<f64>,
        p: &DVector<f64>,
        p0: f64,
        u: &DVector<f64>,
        v: &DVector<f64>,
    ) -> Result<f64> {
        for (what, vec, want) in [
            ("state", x, self.state_dim),
            ("delayed state", y, self.state_dim),
            ("adjoint", p, self.state_dim),
            ("control", u, self.control_dim),
            ("delayed control", v, self.control_dim),
        ] {
            if vec.len() != want {
                let _ = what;
                return Err(Error::DimensionMismatch {
                    expected: want,
                    got: vec.len(),
                });
            }
        }
        let f = (self.dynamics)(t, s, x, y, u, v);
        let f0 = (self.running_cost)(t, s, x, y, u, v);
        Ok(p.dot(&f) + p0 * f0)
    }

    /// Gradient of the Hamiltonian in the (undelayed) state: `jac_x^T (p, p0)`.
    #[allow(clippy::too_many_arguments)]
    pub fn hamiltonian_grad_state(
        &self,
        t: f64,
        s: f64,
        x: &DVector<f64>,
        y: &DVector<f64>,
        p: &DVector<f64>,
        p0: f64,
        u: &DVector<f64>,
        v: &DVector<f64>,
    ) -> DVector<f64> {
        let jac = (self.jac_state)(t, s, x, y, u, v);
        jac.transpose() * extended_adjoint(p, p0)
    }

    /// Gradient in the delayed state: `jac_y^T (p, p0)`.
    #[allow(clippy::too_many_arguments)]
    pub fn hamiltonian_grad_delayed_state(
        &self,
        t: f64,
        s: f64,
        x: &DVector<f64>,
        y: &DVector<f64>,
        p: &DVector<f64>,
        p0: f64,
        u: &DVector<f64>,
        v: &DVector<f64>,
    ) -> DVector<f64> {
        let jac = (self.jac_delayed_state)(t, s, x, y, u, v);
        jac.transpose() * extended_adjoint(p, p0)
    }
}

/// Stack `(p, p0)` into the extended adjoint vector.
pub fn extended_adjoint(p: &DVector<f64>, p0: f64) -> DVector<f64> {
    let n = p.len();
    let mut out = DVector::zeros(n + 1);
    out.rows_mut(0, n).copy_from(p);
    out[n] = p0;
    out
}

/// Builder with finite-difference fallback for missing jacobians and a
/// mandatory consistency audit at `build()`.
pub struct OcpBuilder {
    name: String,
    state_dim: usize,
    control_dim: usize,
    dynamics: DynamicsFn,
    running_cost: CostFn,
    jacobians: Option<(JacobianFn, JacobianFn, JacobianFn, JacobianFn)>,
    control_set: ControlSet,
    target: Target,
    history_state: SampledFunction,
    history_control: SampledFunction,
    final_time_mode: FinalTimeMode,
    affine: Option<AffineStructure>,
    state_bound: f64,
    default_law: &'static str,
    skip_audit: bool,
}

impl OcpBuilder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: impl Into<String>,
        state_dim: usize,
        control_dim: usize,
        dynamics: DynamicsFn,
        running_cost: CostFn,
        control_set: ControlSet,
        target: Target,
        history_state: SampledFunction,
        history_control: SampledFunction,
        final_time_mode: FinalTimeMode,
    ) -> Self {
        OcpBuilder {
            name: name.into(),
            state_dim,
            control_dim,
            dynamics,
            running_cost,
            jacobians: None,
            control_set,
            target,
            history_state,
            history_control,
            final_time_mode,
            affine: None,
            state_bound: 1e3,
            default_law: "grid",
            skip_audit: false,
        }
    }

    pub fn with_jacobians(
        mut self,
        jac_state: JacobianFn,
        jac_delayed_state: JacobianFn,
        jac_control: JacobianFn,
        jac_delayed_control: JacobianFn,
    ) -> Self {
        self.jacobians = Some((jac_state, jac_delayed_state, jac_control, jac_delayed_control));
        self
    }

    pub fn with_affine(mut self, affine: AffineStructure) -> Self {
        self.affine = Some(affine);
        self
    }

    pub fn with_state_bound(mut self, bound: f64) -> Self {
        self.state_bound = bound;
        self
    }

    pub fn with_default_law(mut self, law: &'static str) -> Self {
        self.default_law = law;
        self
    }

    /// Skip the construction audit (test helper for deliberately bad inputs).
    pub fn skip_audit(mut self) -> Self {
        self.skip_audit = true;
        self
    }

    pub fn build(self) -> Result<OcpProblem> {
        let n = self.state_dim;
        let m = self.control_dim;
        if self.history_state.dim() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: self.history_state.dim(),
            });
        }
        if self.history_control.dim() != m {
            return Err(Error::DimensionMismatch {
                expected: m,
                got: self.history_control.dim(),
            });
        }

        let (jac_state, jac_delayed_state, jac_control, jac_delayed_control) = match self.jacobians
        {
            Some(j) => j,
            None => fd_jacobians(n, m, self.dynamics.clone(), self.running_cost.clone()),
        };

        let prob = OcpProblem {
            name: self.name,
            state_dim: n,
            control_dim: m,
            dynamics: self.dynamics,
            running_cost: self.running_cost,
            jac_state,
            jac_delayed_state,
            jac_control,
            jac_delayed_control,
            control_set: self.control_set,
            target: self.target,
            history_state: self.history_state,
            history_control: self.history_control,
            final_time_mode: self.final_time_mode,
            affine: self.affine,
            state_bound: self.state_bound,
            default_law: self.default_law,
        };

        if !self.skip_audit {
            audit_problem(&prob)?;
        }
        Ok(prob)
    }
}

/// Central finite-difference jacobians of the extended field.
pub fn fd_jacobians(
    n: usize,
    m: usize,
    dynamics: DynamicsFn,
    cost: CostFn,
) -> (JacobianFn, JacobianFn, JacobianFn, JacobianFn) {
    let field = move |t: f64,
                      s: f64,
                      x: &DVector<f64>,
                      y: &DVector<f64>,
                      u: &DVector<f64>,
                      v: &DVector<f64>|
          -> DVector<f64> {
        let f = dynamics(t, s, x, y, u, v);
        let f0 = cost(t, s, x, y, u, v);
        let mut out = DVector::zeros(n + 1);
        out.rows_mut(0, n).copy_from(&f);
        out[n] = f0;
        out
    };
    let field = Arc::new(field);

    // One closure per differentiated slot.
    macro_rules! jac_wrt {
        ($slot:tt, $cols:expr) => {{
            let field = field.clone();
            let jac = move |t: f64,
                            s: f64,
                            x: &DVector<f64>,
                            y: &DVector<f64>,
                            u: &DVector<f64>,
                            v: &DVector<f64>|
                  -> DMatrix<f64> {
                let cols = $cols;
                let mut out = DMatrix::zeros(n + 1, cols);
                for j in 0..cols {
                    let base = jac_wrt!(@get $slot, x, y, u, v)[j];
                    let h = 1e-6 * (1.0 + base.abs());
                    let mut hi_arg = jac_wrt!(@get $slot, x, y, u, v).clone();
                    let mut lo_arg = hi_arg.clone();
                    hi_arg[j] = base + h;
                    lo_arg[j] = base - h;
                    let hi = jac_wrt!(@call $slot, field, t, s, x, y, u, v, hi_arg);
                    let lo = jac_wrt!(@call $slot, field, t, s, x, y, u, v, lo_arg);
                    out.set_column(j, &((hi - lo) / (2.0 * h)));
                }
                out
            };
            Arc::new(jac) as JacobianFn
        }};
        (@get x, $x:ident, $y:ident, $u:ident, $v:ident) => { $x };
        (@get y, $x:ident, $y:ident, $u:ident, $v:ident) => { $y };
        (@get u, $x:ident, $y:ident, $u:ident, $v:ident) => { $u };
        (@get v, $x:ident, $y:ident, $u:ident, $v:ident) => { $v };
        (@call x, $f:ident, $t:ident, $s:ident, $x:ident, $y:ident, $u:ident, $v:ident, $arg:ident) => { $f($t, $s, &$arg, $y, $u, $v) };
        (@call y, $f:ident, $t:ident, $s:ident, $x:ident, $y:ident, $u:ident, $v:ident, $arg:ident) => { $f($t, $s, $x, &$arg, $u, $v) };
        (@call u, $f:ident, $t:ident, $s:ident, $x:ident, $y:ident, $u:ident, $v:ident, $arg:ident) => { $f($t, $s, $x, $y, &$arg, $v) };
        (@call v, $f:ident, $t:ident, $s:ident, $x:ident, $y:ident, $u:ident, $v:ident, $arg:ident) => { $f($t, $s, $x, $y, $u, &$arg) };
    }

    (
        jac_wrt!(x, n),
        jac_wrt!(y, n),
        jac_wrt!(u, m),
        jac_wrt!(v, m),
    )
}

/// Construction-time consistency audit:
/// - analytic jacobians against central finite differences at random points,
/// - the affine representation against the generic callbacks,
/// - control history values inside the control set.
fn audit_problem(prob: &OcpProblem) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x0c7);
    let n = prob.state_dim;
    let m = prob.control_dim;
    let (fd_x, fd_y, fd_u, fd_v) = fd_jacobians(n, m, prob.dynamics.clone(), prob.running_cost.clone());

    for _ in 0..20 {
        let t: f64 = rng.gen_range(0.0..2.0);
        let s = t - rng.gen_range(0.0..0.5);
        let x = DVector::from_iterator(n, (0..n).map(|_| rng.gen_range(-1.0..1.0)));
        let y = DVector::from_iterator(n, (0..n).map(|_| rng.gen_range(-1.0..1.0)));
        let u = prob.control_set.sample(m, &mut rng);
        let v = prob.control_set.sample(m, &mut rng);

        let pairs: [(&JacobianFn, &JacobianFn, &str); 4] = [
            (&prob.jac_state, &fd_x, "state"),
            (&prob.jac_delayed_state, &fd_y, "delayed state"),
            (&prob.jac_control, &fd_u, "control"),
            (&prob.jac_delayed_control, &fd_v, "delayed control"),
        ];
        for (analytic, fd, what) in pairs {
            let a = analytic(t, s, &x, &y, &u, &v);
            let b = fd(t, s, &x, &y, &u, &v);
            let scale = 1.0_f64.max(b.amax());
            if (a.clone() - b).amax() > 1e-5 * scale {
                return Err(Error::invalid(
                    "problem jacobians",
                    format!("{what} jacobian disagrees with finite differences in '{}'", prob.name),
                ));
            }
        }

        if let Some(aff) = &prob.affine {
            let drift = (aff.drift)(t, s, &x, &y);
            let bu = (aff.control_gain)(t, s, &x, &y);
            let bv = (aff.delayed_control_gain)(t, s, &x, &y);
            let recomposed = &drift + &bu * &u + &bv * &v;
            let direct = (prob.dynamics)(t, s, &x, &y, &u, &v);
            if (recomposed - direct).amax() > 1e-10 {
                return Err(Error::invalid(
                    "affine structure",
                    format!("affine recomposition disagrees with dynamics in '{}'", prob.name),
                ));
            }
            if let CostStructure::Quadratic(w) = &aff.cost {
                if w.control <= 0.0 {
                    return Err(Error::invalid(
                        "affine structure",
                        "quadratic cost needs a positive control weight",
                    ));
                }
            }
        }
    }

    // Sample the control history against the control set.
    let hc = &prob.history_control;
    let nodes = hc.all_nodes();
    for &t in &nodes {
        let v = hc.eval(t)?;
        if !prob.control_set.contains(&v, 1e-9) {
            return Err(Error::invalid(
                "control history",
                format!("history control at t = {t} lies outside the control set"),
            ));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::InterpRule;
    use approx::assert_relative_eq;
    use nalgebra::dvector;

    fn toy_problem() -> OcpProblem {
        // x' = -x + u with quadratic-ish cost, free endpoint.
        let dyn_f: DynamicsFn = Arc::new(|_t, _s, x, _y, u, _v| dvector![-x[0] + u[0]]);
        let cost: CostFn = Arc::new(|_t, _s, x, _y, u, _v| x[0] * x[0] + u[0] * u[0]);
        let hist_x = SampledFunction::constant(-1.0, 0.0, dvector![1.0]).unwrap();
        let hist_u = SampledFunction::from_fn(-1.0, 0.0, 2, InterpRule::PiecewiseConstant, |_| {
            dvector![0.0]
        })
        .unwrap();
        OcpBuilder::new(
            "toy",
            1,
            1,
            dyn_f,
            cost,
            ControlSet::Box {
                lower: dvector![-5.0],
                upper: dvector![5.0],
            },
            Target::free(1),
            hist_x,
            hist_u,
            FinalTimeMode::Fixed(1.0),
        )
        .build()
        .unwrap()
    }

    #[test]
    fn fd_jacobians_audit_passes() {
        let prob = toy_problem();
        let x = dvector![0.3];
        let u = dvector![0.2];
        let j = (prob.jac_state)(0.0, 0.0, &x, &x, &u, &u);
        assert_relative_eq!(j[(0, 0)], -1.0, epsilon = 1e-6);
        assert_relative_eq!(j[(1, 0)], 0.6, epsilon = 1e-6);
    }

    #[test]
    fn hamiltonian_zero_multipliers() {
        let prob = toy_problem();
        let x = dvector![0.5];
        let u = dvector![0.1];
        let h = prob
            .hamiltonian(0.0, 0.0, &x, &x, &dvector![0.0], 0.0, &u, &u)
            .unwrap();
        assert_eq!(h, 0.0);
    }

    #[test]
    fn hamiltonian_dimension_mismatch_rejected() {
        let prob = toy_problem();
        let bad = dvector![0.1, 0.2];
        assert!(prob
            .hamiltonian(0.0, 0.0, &bad, &bad, &dvector![1.0], -1.0, &dvector![0.0], &dvector![0.0])
            .is_err());
    }

    #[test]
    fn wrong_jacobian_fails_audit() {
        let dyn_f: DynamicsFn = Arc::new(|_t, _s, x, _y, u, _v| dvector![-x[0] + u[0]]);
        let cost: CostFn = Arc::new(|_t, _s, _x, _y, _u, _v| 1.0);
        let wrong: JacobianFn = Arc::new(|_t, _s, _x, _y, _u, _v| DMatrix::from_element(2, 1, 7.0));
        let hist_x = SampledFunction::constant(-1.0, 0.0, dvector![0.0]).unwrap();
        let hist_u = SampledFunction::constant(-1.0, 0.0, dvector![0.0]).unwrap();
        let res = OcpBuilder::new(
            "bad",
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
        .with_jacobians(wrong.clone(), wrong.clone(), wrong.clone(), wrong)
        .build();
        assert!(res.is_err());
    }

    #[test]
    fn history_control_outside_set_rejected() {
        let dyn_f: DynamicsFn = Arc::new(|_t, _s, _x, _y, u, _v| dvector![u[0]]);
        let cost: CostFn = Arc::new(|_t, _s, _x, _y, _u, _v| 1.0);
        let hist_x = SampledFunction::constant(-1.0, 0.0, dvector![0.0]).unwrap();
        let hist_u = SampledFunction::constant(-1.0, 0.0, dvector![3.0]).unwrap();
        let res = OcpBuilder::new(
            "bad-history",
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
        .build();
        assert!(res.is_err());
    }

    #[test]
    fn target_projections() {
        // Target {x1 = 1} in R^2: tangent space spanned by e2.
        let target = Target::Affine {
            mat: DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            rhs: dvector![1.0],
        };
        let basis = target.tangent_basis(2).unwrap();
        assert_eq!(basis.ncols(), 1);
        let p = dvector![3.0, 0.0];
        let resid = basis.transpose() * &p;
        assert_relative_eq!(resid.norm(), 0.0, epsilon = 1e-12);
        let p = dvector![3.0, 1.0];
        let resid = basis.transpose() * &p;
        assert_relative_eq!(resid.norm(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn ball_lattice_stays_inside() {
        let set = ControlSet::Ball { radius: 1.0 };
        for p in set.lattice(2, 8) {
            assert!(set.contains(&p, 1e-12));
        }
    }
}
