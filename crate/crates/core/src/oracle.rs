//! Independent reference solutions by direct collocation: trapezoidal
//! transcription of the delayed linear-quadratic family into an equality-
//! constrained quadratic program, solved through its dense KKT system.
//!
//! Nothing in the indirect solver calls into this module; it exists to
//! cross-validate solver output through a numerically unrelated route.

use crate::error::{Error, Result};
use crate::problems::LqParams;
use nalgebra::{DMatrix, DVector};

/// Transcribed solution on the collocation mesh; multipliers of the dynamics
/// rows estimate the adjoint at the interval midpoints.
pub struct CollocationSolution {
    pub times: Vec<f64>,
    pub states: Vec<f64>,
    pub controls: Vec<f64>,
    /// Adjoint estimate at interval midpoints `(t_{i+1/2}, p)`.
    pub adjoint_midpoints: Vec<(f64, f64)>,
    pub cost: f64,
}

fn interp_sorted(ts: &[f64], vals: &[f64], t: f64) -> f64 {
    if t <= ts[0] {
        return vals[0];
    }
    if t >= *ts.last().unwrap() {
        return *vals.last().unwrap();
    }
    let i = ts.partition_point(|&a| a <= t).saturating_sub(1);
    let w = (t - ts[i]) / (ts[i + 1] - ts[i]);
    vals[i] * (1.0 - w) + vals[i + 1] * w
}

impl CollocationSolution {
    pub fn state_at(&self, t: f64) -> f64 {
        interp_sorted(&self.times, &self.states, t)
    }

    pub fn control_at(&self, t: f64) -> f64 {
        interp_sorted(&self.times, &self.controls, t)
    }

    pub fn adjoint_at(&self, t: f64) -> f64 {
        let ts: Vec<f64> = self.adjoint_midpoints.iter().map(|(a, _)| *a).collect();
        let ps: Vec<f64> = self.adjoint_midpoints.iter().map(|(_, b)| *b).collect();
        interp_sorted(&ts, &ps, t)
    }
}

/// Affine functional over the decision vector: `sum(w_j z_j) + constant`.
#[derive(Clone)]
struct AffineFunctional {
    weights: Vec<(usize, f64)>,
    constant: f64,
}

impl AffineFunctional {
    fn constant(c: f64) -> Self {
        AffineFunctional {
            weights: Vec::new(),
            constant: c,
        }
    }

    fn var(idx: usize) -> Self {
        AffineFunctional {
            weights: vec![(idx, 1.0)],
            constant: 0.0,
        }
    }

    fn blend(a_idx: usize, b_idx: usize, w: f64) -> Self {
        AffineFunctional {
            weights: vec![(a_idx, 1.0 - w), (b_idx, w)],
            constant: 0.0,
        }
    }

    fn scaled(&self, s: f64) -> Self {
        AffineFunctional {
            weights: self.weights.iter().map(|&(i, w)| (i, w * s)).collect(),
            constant: self.constant * s,
        }
    }
}

/// Quadratic-program accumulator: minimize `z^T Q z + c^T z` s.t. `A z = b`.
struct QpBuilder {
    dim: usize,
    q: DMatrix<f64>,
    c: DVector<f64>,
    a_rows: Vec<AffineFunctional>,
    b: Vec<f64>,
    fixed_cost: f64,
}

impl QpBuilder {
    fn new(dim: usize) -> Self {
        QpBuilder {
            dim,
            q: DMatrix::zeros(dim, dim),
            c: DVector::zeros(dim),
            a_rows: Vec::new(),
            b: Vec::new(),
            fixed_cost: 0.0,
        }
    }

    /// Add `weight * (functional)^2` to the objective.
    fn add_square(&mut self, f: &AffineFunctional, weight: f64) {
        if weight == 0.0 {
            return;
        }
        for &(i, wi) in &f.weights {
            for &(j, wj) in &f.weights {
                self.q[(i, j)] += weight * wi * wj;
            }
            self.c[i] += 2.0 * weight * wi * f.constant;
        }
        self.fixed_cost += weight * f.constant * f.constant;
    }

    /// Add the equality `functional = rhs`.
    fn add_constraint(&mut self, f: AffineFunctional, rhs: f64) {
        self.b.push(rhs - f.constant);
        self.a_rows.push(f);
    }

    /// Solve the KKT system `[2Q A^T; A 0] [z; lambda] = [-c; b]`.
    fn solve(self) -> Result<(DVector<f64>, DVector<f64>, f64)> {
        let m = self.a_rows.len();
        let n = self.dim;
        let mut kkt = DMatrix::zeros(n + m, n + m);
        kkt.view_mut((0, 0), (n, n)).copy_from(&(&self.q * 2.0));
        for (r, row) in self.a_rows.iter().enumerate() {
            for &(i, w) in &row.weights {
                kkt[(n + r, i)] += w;
                kkt[(i, n + r)] += w;
            }
        }
        let mut rhs = DVector::zeros(n + m);
        rhs.rows_mut(0, n).copy_from(&(-&self.c));
        for (r, b) in self.b.iter().enumerate() {
            rhs[n + r] = *b;
        }
        let sol = kkt
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::invalid("collocation", "singular KKT system"))?;
        let z = sol.rows(0, n).clone_owned();
        let lambda = sol.rows(n, m).clone_owned();
        let cost = (&z.transpose() * &self.q * &z)[(0, 0)] + self.c.dot(&z) + self.fixed_cost;
        Ok((z, lambda, cost))
    }
}

/// Affine functional for the trajectory value at time `t` (nodes `offset + i`),
/// falling back to the constant history value for `t <= 0`.
fn value_functional(
    t: f64,
    h: f64,
    n_nodes: usize,
    offset: usize,
    history: f64,
) -> AffineFunctional {
    if t <= 0.0 {
        return AffineFunctional::constant(history);
    }
    let pos = t / h;
    let i = (pos.floor() as usize).min(n_nodes - 2);
    let w = pos - i as f64;
    if w.abs() < 1e-12 {
        AffineFunctional::var(offset + i)
    } else {
        AffineFunctional::blend(offset + i, offset + i + 1, w)
    }
}

/// Direct transcription of the scalar delayed linear-quadratic problem on a
/// uniform mesh with `n_intervals` trapezoidal cells.
pub fn collocate_delayed_lq(
    params: &LqParams,
    state_lag: f64,
    control_lag: f64,
    n_intervals: usize,
) -> Result<CollocationSolution> {
    let n_nodes = n_intervals + 1;
    let t_f = params.final_time;
    let h = t_f / n_intervals as f64;
    let x_off = 0;
    let u_off = n_nodes;
    let dim = 2 * n_nodes;
    let mut qp = QpBuilder::new(dim);

    let x_at = |t: f64| value_functional(t, h, n_nodes, x_off, params.initial_state);
    let u_at = |t: f64| value_functional(t, h, n_nodes, u_off, 0.0);

    // Node field values f_i = a0 x_i + a1 x(t_i - lx) + b0 u_i + b1 u(t_i - lu).
    let field = |i: usize| -> AffineFunctional {
        let t = i as f64 * h;
        let mut f = AffineFunctional::var(x_off + i).scaled(params.state_gain);
        let xd = x_at(t - state_lag).scaled(params.delayed_state_gain);
        let ud = u_at(t - control_lag).scaled(params.delayed_control_gain);
        let un = AffineFunctional::var(u_off + i).scaled(params.control_gain);
        for part in [xd, un, ud] {
            for (idx, w) in part.weights {
                f.weights.push((idx, w));
            }
            f.constant += part.constant;
        }
        f
    };

    // Initial condition and trapezoidal dynamics rows.
    qp.add_constraint(AffineFunctional::var(x_off), params.initial_state);
    for i in 0..n_intervals {
        let fi = field(i);
        let fj = field(i + 1);
        let mut row = AffineFunctional::var(x_off + i + 1);
        row.weights.push((x_off + i, -1.0));
        for (idx, w) in fi.weights {
            row.weights.push((idx, -0.5 * h * w));
        }
        for (idx, w) in fj.weights {
            row.weights.push((idx, -0.5 * h * w));
        }
        row.constant += -0.5 * h * (fi.constant + fj.constant);
        qp.add_constraint(row, 0.0);
    }

    // Trapezoidal objective.
    let w = params.weights;
    for i in 0..n_nodes {
        let t = i as f64 * h;
        let quad_w = if i == 0 || i == n_nodes - 1 { 0.5 * h } else { h };
        qp.add_square(&AffineFunctional::var(x_off + i), quad_w * w.state);
        qp.add_square(&x_at(t - state_lag), quad_w * w.delayed_state);
        qp.add_square(&AffineFunctional::var(u_off + i), quad_w * w.control);
        qp.add_square(&u_at(t - control_lag), quad_w * w.delayed_control);
    }

    let (z, lambda, cost) = qp.solve()?;
    let times: Vec<f64> = (0..n_nodes).map(|i| i as f64 * h).collect();
    let states: Vec<f64> = (0..n_nodes).map(|i| z[x_off + i]).collect();
    let controls: Vec<f64> = (0..n_nodes).map(|i| z[u_off + i]).collect();
    // lambda[0] belongs to the initial condition; dynamics rows follow. The
    // multiplier of the row advancing x over [t_i, t_{i+1}] estimates the
    // adjoint at the midpoint; the sign matches the convention in which the
    // Hamiltonian is maximized with a negative cost multiplier.
    let adjoint_midpoints: Vec<(f64, f64)> = (0..n_intervals)
        .map(|i| ((i as f64 + 0.5) * h, -lambda[i + 1]))
        .collect();
    Ok(CollocationSolution {
        times,
        states,
        controls,
        adjoint_midpoints,
        cost,
    })
}

/// Solution of the block-stacked (non-delayed) rewrite of a pure-control-
/// delay instance, with the block linkage enforced as equality constraints,
/// mapped back to the original horizon.
pub struct StackedCollocationSolution {
    pub times: Vec<f64>,
    pub states: Vec<f64>,
    pub controls: Vec<f64>,
    pub cost: f64,
}

impl StackedCollocationSolution {
    pub fn state_at(&self, t: f64) -> f64 {
        interp_sorted(&self.times, &self.states, t)
    }

    pub fn control_at(&self, t: f64) -> f64 {
        interp_sorted(&self.times, &self.controls, t)
    }
}

/// Transcribe the stacked rewrite directly: `blocks` copies of the scalar
/// system on one lag interval, block `i` driven by its own control and the
/// previous block's control (the zero history for block 0), tied by
/// `x_block[i](0) = x_block[i-1](end)`.
///
/// The state itself must be undelayed (the delayed-state gain is folded into
/// the plain one), and the horizon must equal `blocks * control_lag`.
pub fn collocate_guinn_stacked(
    params: &LqParams,
    control_lag: f64,
    blocks: usize,
    n_intervals: usize,
) -> Result<StackedCollocationSolution> {
    if blocks == 0 {
        return Err(Error::invalid("stacked collocation", "need at least one block"));
    }
    let t_f = params.final_time;
    if (t_f - blocks as f64 * control_lag).abs() > 1e-9 {
        return Err(Error::invalid(
            "stacked collocation",
            "horizon must equal blocks * control_lag",
        ));
    }
    let a_eff = params.state_gain + params.delayed_state_gain;
    let k_state = params.weights.state + params.weights.delayed_state;
    let n_nodes = n_intervals + 1;
    let h = control_lag / n_intervals as f64;
    let x_off = |b: usize| b * n_nodes;
    let u_off = |b: usize| blocks * n_nodes + b * n_nodes;
    let dim = 2 * blocks * n_nodes;
    let mut qp = QpBuilder::new(dim);

    // Field of block b at node i.
    let field = |b: usize, i: usize| -> AffineFunctional {
        let mut f = AffineFunctional::var(x_off(b) + i).scaled(a_eff);
        let un = AffineFunctional::var(u_off(b) + i).scaled(params.control_gain);
        let ud = if b == 0 {
            AffineFunctional::constant(0.0)
        } else {
            AffineFunctional::var(u_off(b - 1) + i).scaled(params.delayed_control_gain)
        };
        for part in [un, ud] {
            for (idx, w) in part.weights {
                f.weights.push((idx, w));
            }
            f.constant += part.constant;
        }
        f
    };

    qp.add_constraint(AffineFunctional::var(x_off(0)), params.initial_state);
    for b in 0..blocks {
        for i in 0..n_intervals {
            let fi = field(b, i);
            let fj = field(b, i + 1);
            let mut row = AffineFunctional::var(x_off(b) + i + 1);
            row.weights.push((x_off(b) + i, -1.0));
            for (idx, w) in fi.weights {
                row.weights.push((idx, -0.5 * h * w));
            }
            for (idx, w) in fj.weights {
                row.weights.push((idx, -0.5 * h * w));
            }
            row.constant += -0.5 * h * (fi.constant + fj.constant);
            qp.add_constraint(row, 0.0);
        }
        if b > 0 {
            // Linkage to the previous block's endpoint.
            let mut row = AffineFunctional::var(x_off(b));
            row.weights.push((x_off(b - 1) + n_intervals, -1.0));
            qp.add_constraint(row, 0.0);
        }
    }

    let w = params.weights;
    for b in 0..blocks {
        for i in 0..n_nodes {
            let quad_w = if i == 0 || i == n_nodes - 1 { 0.5 * h } else { h };
            qp.add_square(&AffineFunctional::var(x_off(b) + i), quad_w * k_state);
            qp.add_square(&AffineFunctional::var(u_off(b) + i), quad_w * w.control);
            if b > 0 {
                qp.add_square(
                    &AffineFunctional::var(u_off(b - 1) + i),
                    quad_w * w.delayed_control,
                );
            }
        }
    }

    let (z, _lambda, cost) = qp.solve()?;
    // Unstack, dropping the duplicated shared endpoints between blocks.
    let mut times = Vec::new();
    let mut states = Vec::new();
    let mut controls = Vec::new();
    for b in 0..blocks {
        for i in 0..n_nodes {
            let t = b as f64 * control_lag + i as f64 * h;
            if b > 0 && i == 0 {
                continue;
            }
            times.push(t);
            states.push(z[x_off(b) + i]);
            controls.push(z[u_off(b) + i]);
        }
    }
    Ok(StackedCollocationSolution {
        times,
        states,
        controls,
        cost,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::QuadraticCostWeights;

    /// Backward scalar Riccati sweep for x' = a x + b u, cost q x^2 + r u^2,
    /// free endpoint: an independent closed-route reference.
    fn riccati_reference(a: f64, b: f64, q: f64, r: f64, t_f: f64, n: usize) -> Vec<(f64, f64)> {
        let h = t_f / n as f64;
        let rhs = |p: f64| -(2.0 * a * p - p * p * b * b / r + q);
        let mut out = vec![(t_f, 0.0)];
        let mut p = 0.0;
        for i in (0..n).rev() {
            let k1 = rhs(p);
            let k2 = rhs(p - 0.5 * h * k1);
            let k3 = rhs(p - 0.5 * h * k2);
            let k4 = rhs(p - h * k3);
            p -= h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            out.push((i as f64 * h, p));
        }
        out.reverse();
        out
    }

    #[test]
    fn collocation_matches_riccati_without_delays() {
        let params = LqParams {
            state_gain: 1.0,
            delayed_state_gain: 0.0,
            ..LqParams::default()
        };
        let sol = collocate_delayed_lq(&params, 0.0, 0.0, 400).unwrap();
        let riccati = riccati_reference(1.0, 1.0, 1.0, 1.0, 1.0, 4000);
        let h = 1.0 / 4000.0;
        let p_at = |t: f64| {
            let i = ((t / h) as usize).min(riccati.len() - 2);
            let w = (t - riccati[i].0) / h;
            riccati[i].1 * (1.0 - w) + riccati[i + 1].1 * w
        };
        // Propagate the Riccati feedback trajectory and compare.
        let mut x = 1.0;
        let mut worst_x: f64 = 0.0;
        let mut worst_u: f64 = 0.0;
        for i in 0..4000 {
            let t = i as f64 * h;
            let k1 = (1.0 - p_at(t)) * x;
            let k2 = (1.0 - p_at(t + 0.5 * h)) * (x + 0.5 * h * k1);
            let k3 = (1.0 - p_at(t + 0.5 * h)) * (x + 0.5 * h * k2);
            let k4 = (1.0 - p_at(t + h)) * (x + h * k3);
            if i % 10 == 0 {
                worst_x = worst_x.max((sol.state_at(t) - x).abs());
                worst_u = worst_u.max((sol.control_at(t) - (-p_at(t) * x)).abs());
            }
            x += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        }
        assert!(worst_x < 1e-4, "state gap {worst_x}");
        assert!(worst_u < 1e-3, "control gap {worst_u}");
    }

    #[test]
    fn collocation_adjoint_sign_matches_feedback() {
        // In this convention the interior stationarity gives u = p b / (2 r),
        // so u and the adjoint estimate share signs when b > 0.
        let params = LqParams::default();
        let sol = collocate_delayed_lq(&params, 0.0, 0.0, 300).unwrap();
        for i in (30..270).step_by(40) {
            let t = sol.adjoint_midpoints[i].0;
            let p = sol.adjoint_midpoints[i].1;
            let u = sol.control_at(t);
            assert!((u - p / 2.0).abs() < 1e-3, "u {u} vs p/2 {}", p / 2.0);
        }
    }

    #[test]
    fn stacked_transcription_agrees_with_delayed_transcription() {
        // Pure control delay: both transcriptions describe the same problem.
        let lag = 0.25;
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
            final_time: 0.5,
            control_limit: 4.0,
        };
        let direct = collocate_delayed_lq(&params, 0.0, lag, 400).unwrap();
        let stacked = collocate_guinn_stacked(&params, lag, 2, 200).unwrap();
        let mut worst: f64 = 0.0;
        for i in 0..=100 {
            let t = 0.5 * i as f64 / 100.0;
            worst = worst.max((direct.state_at(t) - stacked.state_at(t)).abs());
            worst = worst.max((direct.control_at(t) - stacked.control_at(t)).abs());
        }
        assert!(worst < 2e-3, "transcription gap {worst}");
        assert!((direct.cost - stacked.cost).abs() < 1e-4);
    }
}
