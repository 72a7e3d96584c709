//! Time grids, sampled functions with dense interpolation, and delay handling.
//!
//! Every trajectory-valued quantity in this crate (states, adjoints, controls,
//! history functions) is a [`SampledFunction`]: an ordered list of contiguous
//! uniform segments, each carrying node values and an interpolation rule.
//! History segments on `[-delta, 0]` are concatenated with solution segments so
//! delayed evaluations go through a single code path.

use crate::error::{Error, Result};
use nalgebra::DVector;
use std::io::Write;

/// A uniform grid of `n_steps + 1` nodes on `[t_start, t_end]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    t_start: f64,
    t_end: f64,
    n_steps: usize,
    nodes: Vec<f64>,
}

impl TimeGrid {
    pub fn new(t_start: f64, t_end: f64, n_steps: usize) -> Result<Self> {
        if !(t_start.is_finite() && t_end.is_finite()) || t_end <= t_start {
            return Err(Error::invalid(
                "time grid",
                format!("need finite t_start < t_end, got [{t_start}, {t_end}]"),
            ));
        }
        if n_steps == 0 {
            return Err(Error::invalid("time grid", "n_steps must be positive"));
        }
        let h = (t_end - t_start) / n_steps as f64;
        let mut nodes: Vec<f64> = (0..=n_steps).map(|i| t_start + i as f64 * h).collect();
        // Pin the endpoint so that domain checks are exact.
        nodes[n_steps] = t_end;
        Ok(TimeGrid {
            t_start,
            t_end,
            n_steps,
            nodes,
        })
    }

    pub fn t_start(&self) -> f64 {
        self.t_start
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn n_nodes(&self) -> usize {
        self.n_steps + 1
    }

    pub fn step(&self) -> f64 {
        (self.t_end - self.t_start) / self.n_steps as f64
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn node(&self, i: usize) -> f64 {
        self.nodes[i]
    }

    pub fn contains(&self, t: f64) -> bool {
        t >= self.t_start && t <= self.t_end
    }

    /// Index of the cell containing `t`, clamped to `[0, n_steps - 1]`.
    pub fn cell_of(&self, t: f64) -> usize {
        let raw = ((t - self.t_start) / self.step()).floor() as isize;
        raw.clamp(0, self.n_steps as isize - 1) as usize
    }
}

/// Interpolation rule attached to a segment of sampled values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum InterpRule {
    /// Right-continuous step function; the value on `[t_i, t_{i+1})` is `v_i`.
    PiecewiseConstant,
    Linear,
    /// Cubic Hermite from node values and stored node derivatives.
    CubicHermite,
}

/// One uniform segment of a sampled function.
#[derive(Debug, Clone)]
pub struct Segment {
    grid: TimeGrid,
    values: Vec<DVector<f64>>,
    derivs: Option<Vec<DVector<f64>>>,
    interp: InterpRule,
}

impl Segment {
    pub fn new(
        grid: TimeGrid,
        values: Vec<DVector<f64>>,
        derivs: Option<Vec<DVector<f64>>>,
        interp: InterpRule,
    ) -> Result<Self> {
        if values.len() != grid.n_nodes() {
            return Err(Error::invalid(
                "segment",
                format!(
                    "{} values for {} nodes on [{}, {}]",
                    values.len(),
                    grid.n_nodes(),
                    grid.t_start(),
                    grid.t_end()
                ),
            ));
        }
        let dim = values[0].len();
        if values.iter().any(|v| v.len() != dim) {
            return Err(Error::invalid("segment", "values of mixed dimension"));
        }
        if interp == InterpRule::CubicHermite {
            match &derivs {
                Some(d) if d.len() == values.len() && d.iter().all(|v| v.len() == dim) => {}
                _ => {
                    return Err(Error::invalid(
                        "segment",
                        "cubic-hermite interpolation needs one stored derivative per node",
                    ))
                }
            }
        }
        Ok(Segment {
            grid,
            values,
            derivs,
            interp,
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn values(&self) -> &[DVector<f64>] {
        &self.values
    }

    pub fn derivs(&self) -> Option<&[DVector<f64>]> {
        self.derivs.as_deref()
    }

    pub fn interp(&self) -> InterpRule {
        self.interp
    }

    fn dim(&self) -> usize {
        self.values[0].len()
    }

    /// Interpolated value at `t`; `t` may lie slightly outside the segment, in
    /// which case the boundary cell's rule is extended (used internally during
    /// in-flight integration steps, never exposed through `SampledFunction`).
    fn eval_unchecked(&self, t: f64) -> DVector<f64> {
        let k = self.grid.cell_of(t);
        let t0 = self.grid.node(k);
        let t1 = self.grid.node(k + 1);
        let h = t1 - t0;
        match self.interp {
            InterpRule::PiecewiseConstant => {
                if t >= self.grid.t_end() {
                    self.values[self.grid.n_steps()].clone()
                } else {
                    self.values[k].clone()
                }
            }
            InterpRule::Linear => {
                let s = (t - t0) / h;
                &self.values[k] * (1.0 - s) + &self.values[k + 1] * s
            }
            InterpRule::CubicHermite => {
                let d = self.derivs.as_ref().expect("checked at construction");
                cubic_hermite(t0, t1, &self.values[k], &self.values[k + 1], &d[k], &d[k + 1], t)
            }
        }
    }

    /// Time derivative of the interpolant at `t` (cubic-hermite only).
    fn eval_deriv_unchecked(&self, t: f64) -> DVector<f64> {
        let k = self.grid.cell_of(t);
        let t0 = self.grid.node(k);
        let t1 = self.grid.node(k + 1);
        match self.interp {
            InterpRule::PiecewiseConstant => DVector::zeros(self.dim()),
            InterpRule::Linear => (&self.values[k + 1] - &self.values[k]) / (t1 - t0),
            InterpRule::CubicHermite => {
                let d = self.derivs.as_ref().expect("checked at construction");
                cubic_hermite_deriv(t0, t1, &self.values[k], &self.values[k + 1], &d[k], &d[k + 1], t)
            }
        }
    }
}

/// Cubic Hermite interpolation on `[t0, t1]` from endpoint values and derivatives.
pub fn cubic_hermite(
    t0: f64,
    t1: f64,
    y0: &DVector<f64>,
    y1: &DVector<f64>,
    k0: &DVector<f64>,
    k1: &DVector<f64>,
    t: f64,
) -> DVector<f64> {
    let h = t1 - t0;
    let s = (t - t0) / h;
    let s2 = s * s;
    let s3 = s2 * s;
    let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
    let h10 = s3 - 2.0 * s2 + s;
    let h01 = -2.0 * s3 + 3.0 * s2;
    let h11 = s3 - s2;
    y0 * h00 + k0 * (h10 * h) + y1 * h01 + k1 * (h11 * h)
}

/// Derivative in `t` of the cubic Hermite interpolant.
pub fn cubic_hermite_deriv(
    t0: f64,
    t1: f64,
    y0: &DVector<f64>,
    y1: &DVector<f64>,
    k0: &DVector<f64>,
    k1: &DVector<f64>,
    t: f64,
) -> DVector<f64> {
    let h = t1 - t0;
    let s = (t - t0) / h;
    let s2 = s * s;
    let dh00 = (6.0 * s2 - 6.0 * s) / h;
    let dh10 = 3.0 * s2 - 4.0 * s + 1.0;
    let dh01 = (-6.0 * s2 + 6.0 * s) / h;
    let dh11 = 3.0 * s2 - 2.0 * s;
    y0 * dh00 + k0 * dh10 + y1 * dh01 + k1 * dh11
}

/// A vector-valued function of time represented by contiguous sampled segments.
#[derive(Debug, Clone)]
pub struct SampledFunction {
    segments: Vec<Segment>,
    dim: usize,
}

impl SampledFunction {
    pub fn new(segments: Vec<Segment>) -> Result<Self> {
        if segments.is_empty() {
            return Err(Error::invalid("sampled function", "no segments"));
        }
        let dim = segments[0].dim();
        for w in segments.windows(2) {
            let gap = (w[1].grid.t_start() - w[0].grid.t_end()).abs();
            if gap > 1e-9 * (1.0 + w[0].grid.t_end().abs()) {
                return Err(Error::invalid(
                    "sampled function",
                    format!(
                        "segments not contiguous: [{}, {}] then [{}, {}]",
                        w[0].grid.t_start(),
                        w[0].grid.t_end(),
                        w[1].grid.t_start(),
                        w[1].grid.t_end()
                    ),
                ));
            }
        }
        if segments.iter().any(|s| s.dim() != dim) {
            return Err(Error::invalid("sampled function", "segments of mixed dimension"));
        }
        Ok(SampledFunction { segments, dim })
    }

    pub fn from_segment(segment: Segment) -> Self {
        let dim = segment.dim();
        SampledFunction {
            segments: vec![segment],
            dim,
        }
    }

    /// Constant function on `[t_start, t_end]`.
    pub fn constant(t_start: f64, t_end: f64, value: DVector<f64>) -> Result<Self> {
        let grid = TimeGrid::new(t_start, t_end, 1)?;
        let seg = Segment::new(grid, vec![value.clone(), value], None, InterpRule::Linear)?;
        Ok(SampledFunction::from_segment(seg))
    }

    /// Sample a closure on a fresh uniform grid.
    pub fn from_fn(
        t_start: f64,
        t_end: f64,
        n_steps: usize,
        interp: InterpRule,
        f: impl Fn(f64) -> DVector<f64>,
    ) -> Result<Self> {
        let grid = TimeGrid::new(t_start, t_end, n_steps)?;
        let values: Vec<_> = grid.nodes().iter().map(|&t| f(t)).collect();
        let derivs = match interp {
            InterpRule::CubicHermite => {
                // Central finite differences for the stored derivatives.
                let h = grid.step();
                let n = grid.n_nodes();
                let mut d = Vec::with_capacity(n);
                for i in 0..n {
                    let (a, b, w) = if i == 0 {
                        (0, 1, h)
                    } else if i == n - 1 {
                        (n - 2, n - 1, h)
                    } else {
                        (i - 1, i + 1, 2.0 * h)
                    };
                    d.push((&values[b] - &values[a]) / w);
                }
                Some(d)
            }
            _ => None,
        };
        Ok(SampledFunction::from_segment(Segment::new(
            grid, values, derivs, interp,
        )?))
    }

    /// Like [`from_fn`](Self::from_fn) but with exact derivatives supplied.
    pub fn from_fn_with_deriv(
        t_start: f64,
        t_end: f64,
        n_steps: usize,
        f: impl Fn(f64) -> DVector<f64>,
        df: impl Fn(f64) -> DVector<f64>,
    ) -> Result<Self> {
        let grid = TimeGrid::new(t_start, t_end, n_steps)?;
        let values: Vec<_> = grid.nodes().iter().map(|&t| f(t)).collect();
        let derivs: Vec<_> = grid.nodes().iter().map(|&t| df(t)).collect();
        Ok(SampledFunction::from_segment(Segment::new(
            grid,
            values,
            Some(derivs),
            InterpRule::CubicHermite,
        )?))
    }

    /// Concatenate `head` (e.g. a history on `[-delta, 0]`) with `tail`.
    pub fn concat(head: &SampledFunction, tail: &SampledFunction) -> Result<Self> {
        let mut segments = head.segments.clone();
        segments.extend(tail.segments.iter().cloned());
        SampledFunction::new(segments)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn t_start(&self) -> f64 {
        self.segments[0].grid.t_start()
    }

    pub fn t_end(&self) -> f64 {
        self.segments.last().unwrap().grid.t_end()
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    /// All segment nodes in order, deduplicating shared segment endpoints.
    pub fn all_nodes(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for seg in &self.segments {
            for &t in seg.grid.nodes() {
                if out.last().map_or(true, |&last: &f64| t > last) {
                    out.push(t);
                }
            }
        }
        out
    }

    /// Snap roundoff-scale overshoot onto the domain edge; anything larger is
    /// a genuine domain violation.
    fn snap(&self, t: f64) -> Result<f64> {
        let lo = self.t_start();
        let hi = self.t_end();
        let tol = 1e-12 * (1.0 + lo.abs().max(hi.abs()));
        if t < lo - tol || t > hi + tol {
            return Err(Error::OutOfDomain { t, lo, hi });
        }
        Ok(t.clamp(lo, hi))
    }

    /// Segment owning `t`. At a shared edge the right segment wins, so
    /// junction discontinuities evaluate right-continuously (controls jump).
    fn segment_for(&self, t: f64) -> Result<&Segment> {
        // Few segments in practice; linear scan.
        for seg in &self.segments {
            if t < seg.grid.t_end() {
                return Ok(seg);
            }
        }
        Ok(self.segments.last().unwrap())
    }

    fn segment_left_of(&self, t: f64) -> &Segment {
        for seg in &self.segments {
            if t <= seg.grid.t_end() {
                return seg;
            }
        }
        self.segments.last().unwrap()
    }

    /// Interpolated value at `t`. Exact at nodes; errors outside the domain.
    /// Discontinuity points evaluate right-continuously.
    pub fn eval(&self, t: f64) -> Result<DVector<f64>> {
        let t = self.snap(t)?;
        Ok(self.segment_for(t)?.eval_unchecked(t))
    }

    /// Left limit at `t`: at segment junctions and piecewise-constant nodes
    /// the value approached from below. Integrators use this for reads at the
    /// trailing edge of a step so discontinuities never leak across it.
    pub fn eval_left_limit(&self, t: f64) -> Result<DVector<f64>> {
        let t = self.snap(t)?;
        let seg = self.segment_left_of(t);
        if seg.interp == InterpRule::PiecewiseConstant {
            let grid = &seg.grid;
            let k = grid.cell_of(t);
            let node_tol = 1e-9 * grid.step();
            if (t - grid.node(k)).abs() <= node_tol && k > 0 {
                return Ok(seg.values[k - 1].clone());
            }
            if (t - grid.t_end()).abs() <= node_tol {
                return Ok(seg.values[grid.n_steps() - 1].clone());
            }
        }
        Ok(seg.eval_unchecked(t))
    }

    /// Derivative of the interpolant at `t`.
    pub fn eval_deriv(&self, t: f64) -> Result<DVector<f64>> {
        let t = self.snap(t)?;
        Ok(self.segment_for(t)?.eval_deriv_unchecked(t))
    }

    /// Retarded evaluation `f(t - lag)`; reads from history segments when
    /// `t - lag < 0`.
    pub fn eval_delayed(&self, t: f64, lag: f64) -> Result<DVector<f64>> {
        self.eval(t - lag)
    }

    /// Advanced evaluation with the horizon indicator: returns
    /// `(f(t + lead), 1)` when `t + lead <= horizon` and `(0, 0)` otherwise.
    pub fn eval_advanced(&self, t: f64, lead: f64, horizon: f64) -> Result<(DVector<f64>, f64)> {
        self.snap(t)?;
        if t + lead > horizon {
            Ok((DVector::zeros(self.dim), 0.0))
        } else {
            Ok((self.eval(t + lead)?, 1.0))
        }
    }

    /// Sup-norm distance to `other` sampled at `times`.
    pub fn sup_distance(&self, other: &SampledFunction, times: &[f64]) -> Result<f64> {
        let mut sup: f64 = 0.0;
        for &t in times {
            let d = (self.eval(t)? - other.eval(t)?).amax();
            sup = sup.max(d);
        }
        Ok(sup)
    }

    /// Write as CSV: first column `t`, one column per component.
    ///
    /// Values are printed with 17 significant digits so that files round-trip
    /// through `f64` parsing bit-exactly.
    pub fn write_csv(&self, w: &mut impl Write, component_names: &[String]) -> Result<()> {
        if component_names.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: component_names.len(),
            });
        }
        writeln!(w, "t,{}", component_names.join(","))?;
        for t in self.all_nodes() {
            let v = self.eval(t)?;
            let row: Vec<String> = v.iter().map(|x| format_float(*x)).collect();
            writeln!(w, "{},{}", format_float(t), row.join(","))?;
        }
        Ok(())
    }
}

/// 17 significant digits: enough for exact `f64` round-trips.
pub fn format_float(x: f64) -> String {
    format!("{x:.16e}")
}

/// The constant-delay triple plus the horizon bound.
///
/// `time_lag` shifts the dynamics' explicit second time argument,
/// `state_lag` delays the state argument, `control_lag` delays the control
/// argument. All three live in `[0, horizon_bound]`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DelayVector {
    pub time_lag: f64,
    pub state_lag: f64,
    pub control_lag: f64,
    pub horizon_bound: f64,
}

impl DelayVector {
    pub fn new(time_lag: f64, state_lag: f64, control_lag: f64, horizon_bound: f64) -> Result<Self> {
        if !(horizon_bound > 0.0) {
            return Err(Error::invalid(
                "delay vector",
                format!("horizon bound must be positive, got {horizon_bound}"),
            ));
        }
        for (name, v) in [
            ("time lag", time_lag),
            ("state lag", state_lag),
            ("control lag", control_lag),
        ] {
            if !(0.0..=horizon_bound).contains(&v) {
                return Err(Error::invalid(
                    "delay vector",
                    format!("{name} {v} outside [0, {horizon_bound}]"),
                ));
            }
        }
        Ok(DelayVector {
            time_lag,
            state_lag,
            control_lag,
            horizon_bound,
        })
    }

    pub fn zero(horizon_bound: f64) -> Self {
        DelayVector {
            time_lag: 0.0,
            state_lag: 0.0,
            control_lag: 0.0,
            horizon_bound,
        }
    }

    pub fn components(&self) -> [f64; 3] {
        [self.time_lag, self.state_lag, self.control_lag]
    }

    pub fn is_zero(&self) -> bool {
        self.time_lag == 0.0 && self.state_lag == 0.0 && self.control_lag == 0.0
    }

    /// Smallest strictly positive lag that creates a functional delay
    /// (state or control); the explicit time shift does not.
    pub fn min_functional_lag(&self) -> Option<f64> {
        [self.state_lag, self.control_lag]
            .into_iter()
            .filter(|&x| x > 0.0)
            .fold(None, |acc, x| Some(acc.map_or(x, |a: f64| a.min(x))))
    }

    /// Scale all three components by `s`, keeping the bound.
    pub fn scaled(&self, s: f64) -> Self {
        DelayVector {
            time_lag: self.time_lag * s,
            state_lag: self.state_lag * s,
            control_lag: self.control_lag * s,
            horizon_bound: self.horizon_bound,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::dvector;

    fn scalar_fn(
        t0: f64,
        t1: f64,
        n: usize,
        interp: InterpRule,
        f: impl Fn(f64) -> f64,
    ) -> SampledFunction {
        SampledFunction::from_fn(t0, t1, n, interp, |t| dvector![f(t)]).unwrap()
    }

    #[test]
    fn constant_function_evaluates_everywhere() {
        let f = SampledFunction::constant(-1.0, 2.0, dvector![3.5]).unwrap();
        for t in [-1.0, -0.3, 0.0, 1.999, 2.0] {
            assert_eq!(f.eval(t).unwrap()[0], 3.5);
        }
    }

    #[test]
    fn linear_interp_midpoint() {
        let grid = TimeGrid::new(0.0, 1.0, 1).unwrap();
        let seg = Segment::new(grid, vec![dvector![0.0], dvector![2.0]], None, InterpRule::Linear)
            .unwrap();
        let f = SampledFunction::from_segment(seg);
        assert_eq!(f.eval(0.5).unwrap()[0], 1.0);
    }

    #[test]
    fn cubic_hermite_tracks_sine() {
        let f = SampledFunction::from_fn_with_deriv(
            0.0,
            1.0,
            100,
            |t| dvector![t.sin()],
            |t| dvector![t.cos()],
        )
        .unwrap();
        let t = 0.377;
        assert!((f.eval(t).unwrap()[0] - t.sin()).abs() < 1e-8);
    }

    #[test]
    fn out_of_domain_is_an_error() {
        let f = scalar_fn(0.0, 1.0, 4, InterpRule::Linear, |t| t);
        assert!(matches!(f.eval(1.0 + 1e-9), Err(Error::OutOfDomain { .. })));
        assert!(matches!(f.eval(-0.1), Err(Error::OutOfDomain { .. })));
    }

    #[test]
    fn delayed_eval_reads_history() {
        // f == phi on [-1, 0], identity afterwards.
        let hist = SampledFunction::from_fn(-1.0, 0.0, 10, InterpRule::Linear, |t| dvector![10.0 * t])
            .unwrap();
        let main = scalar_fn(0.0, 1.0, 10, InterpRule::Linear, |t| t);
        let f = SampledFunction::concat(&hist, &main).unwrap();
        // Pure history read.
        assert_relative_eq!(f.eval_delayed(0.2, 0.5).unwrap()[0], -3.0, epsilon = 1e-12);
        // Zero lag.
        assert_relative_eq!(f.eval_delayed(0.7, 0.0).unwrap()[0], 0.7, epsilon = 1e-12);
        // Identity function read.
        assert_relative_eq!(f.eval_delayed(1.0, 0.25).unwrap()[0], 0.75, epsilon = 1e-12);
        // Below the history start.
        assert!(f.eval_delayed(0.2, 1.5).is_err());
    }

    #[test]
    fn advanced_eval_vanishes_past_horizon() {
        // Cubic Hermite reproduces t^2 exactly.
        let f = SampledFunction::from_fn_with_deriv(
            0.0,
            1.0,
            10,
            |t| dvector![t * t],
            |t| dvector![2.0 * t],
        )
        .unwrap();
        let (v, ind) = f.eval_advanced(0.5, 0.25, 1.0).unwrap();
        assert_relative_eq!(v[0], 0.5625, epsilon = 1e-12);
        assert_eq!(ind, 1.0);
        let (v, ind) = f.eval_advanced(0.9, 0.25, 1.0).unwrap();
        assert_eq!(v[0], 0.0);
        assert_eq!(ind, 0.0);
        let (v, ind) = f.eval_advanced(0.3, 0.0, 1.0).unwrap();
        assert_relative_eq!(v[0], 0.09, epsilon = 1e-12);
        assert_eq!(ind, 1.0);
    }

    #[test]
    fn piecewise_constant_is_right_continuous() {
        let f = scalar_fn(0.0, 1.0, 2, InterpRule::PiecewiseConstant, |t| t);
        assert_eq!(f.eval(0.0).unwrap()[0], 0.0);
        assert_eq!(f.eval(0.49).unwrap()[0], 0.0);
        assert_eq!(f.eval(0.5).unwrap()[0], 0.5);
        assert_eq!(f.eval(1.0).unwrap()[0], 1.0);
    }

    #[test]
    fn delay_vector_rejects_out_of_range() {
        assert!(DelayVector::new(0.1, 0.2, 0.3, 1.0).is_ok());
        assert!(DelayVector::new(-0.1, 0.0, 0.0, 1.0).is_err());
        assert!(DelayVector::new(0.0, 1.5, 0.0, 1.0).is_err());
        assert!(DelayVector::new(0.0, 0.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn csv_round_trips_values() {
        let f = scalar_fn(0.0, 1.0, 4, InterpRule::Linear, |t| t * std::f64::consts::PI);
        let mut buf = Vec::new();
        f.write_csv(&mut buf, &["x_1".into()]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "t,x_1");
        let row: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(row[0].parse::<f64>().unwrap(), 0.0);
        let last = text.lines().last().unwrap();
        let parts: Vec<&str> = last.split(',').collect();
        assert_eq!(parts[1].parse::<f64>().unwrap(), std::f64::consts::PI);
    }
}
