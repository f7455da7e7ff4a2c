//! Closed-loop solver for the boundary-coupled network.
//!
//! Every boundary-to-boundary path takes at least `Δ = min_j l_j / v_max`, so
//! the inflow at time `s` depends only on outflow traces, which in turn depend
//! on the initial state or on inflow at times `<= s − Δ`. Inflow traces are
//! computed generation by generation and stored in a [`TraceLedger`]; states
//! are then read off exactly along characteristics.

use std::sync::Arc;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::lattice::spectral_radius;

use super::field::{BoundaryVector, Profile, StateField};
use super::ops::{boundary_traces, dirichlet_apply, resolvent_apply, scatter_to_vertices, transfer_operator};
use super::signal::{BoundaryHistory, BoundarySignal, Routed, Side};
use super::system::TransportSystem;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SolverOptions {
    /// Ceiling on the spacing of ledger stamps.
    pub dt_max: f64,
    /// Reject negative data and check the cone on the way.
    pub positivity: bool,
    /// Slack for the cone checks.
    pub tol: f64,
    /// Largest number of characteristic-arrival events added as stamps.
    pub event_cap: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            dt_max: 0.01,
            positivity: true,
            tol: 1e-9,
            event_cap: 20_000,
        }
    }
}

/// Inflow traces `z_j(s, l_j, v_k)` at time stamps, with one-sided values so
/// that jumps at stamps are kept; linear in time between stamps.
#[derive(Debug, Clone)]
pub struct TraceLedger {
    n_nodes: usize,
    stamps: Vec<f64>,
    /// `left[j][n · K + k]`
    left: Vec<Vec<f64>>,
    right: Vec<Vec<f64>>,
    /// Vertex values `g(s) = Γ z(s) + K u(s)` (right limits).
    vertex: Vec<Vec<f64>>,
}

impl TraceLedger {
    pub fn stamps(&self) -> &[f64] {
        &self.stamps
    }

    pub fn horizon(&self) -> f64 {
        *self.stamps.last().unwrap_or(&0.0)
    }

    fn snap(&self, s: f64) -> Option<usize> {
        let eps = 1e-12 * (1.0 + s.abs());
        let i = self.stamps.partition_point(|&t| t < s - eps);
        (i < self.stamps.len() && (self.stamps[i] - s).abs() <= eps).then_some(i)
    }

    /// Inflow of edge `j` at node `k` and time `s` (`0 <= s <= horizon`).
    pub fn eval(&self, j: usize, k: usize, s: f64, side: Side) -> f64 {
        self.eval_upto(j, k, s, side, self.stamps.len())
    }

    fn eval_upto(&self, j: usize, k: usize, s: f64, side: Side, filled: usize) -> f64 {
        let kn = self.n_nodes;
        if let Some(n) = self.snap(s) {
            debug_assert!(n < filled, "ledger read ahead of the generation front");
            return match side {
                Side::Left => self.left[j][n * kn + k],
                Side::Right => self.right[j][n * kn + k],
            };
        }
        let n = self.stamps.partition_point(|&t| t <= s).saturating_sub(1);
        debug_assert!(n + 1 < filled, "ledger read ahead of the generation front");
        let (t0, t1) = (self.stamps[n], self.stamps[n + 1]);
        let a = self.right[j][n * kn + k];
        let b = self.left[j][(n + 1) * kn + k];
        a + (s - t0) / (t1 - t0) * (b - a)
    }
}

/// Output of [`closed_loop_solve`].
#[derive(Clone)]
pub struct ClosedLoopSolution {
    sys: Arc<TransportSystem>,
    x0: StateField,
    ledger: Arc<TraceLedger>,
    pub horizon: f64,
    pub generations: usize,
    pub snapshots: Vec<(f64, StateField)>,
    /// Smallest ledger value (inflow traces).
    pub min_trace: f64,
}

impl ClosedLoopSolution {
    pub fn ledger(&self) -> &TraceLedger {
        &self.ledger
    }

    /// `z_j(t, x, v_k)`.
    pub fn eval(&self, j: usize, k: usize, x: f64, t: f64) -> f64 {
        eval_state(&self.sys, &self.x0, &self.ledger, j, k, x, t)
    }

    /// State at `t <= horizon` as an exact-evaluation field.
    pub fn state_at(&self, t: f64) -> Result<StateField> {
        if !(t >= 0.0) || t > self.horizon * (1.0 + 1e-12) {
            return Err(Error::InvalidArgument(format!("state requested at t = {t} outside [0, {}]", self.horizon)));
        }
        Ok(state_field(&self.sys, &self.x0, &self.ledger, t))
    }

    /// Times in `[0, t_max]` where `t ↦ z_j(t, x, v_k)` may jump or kink.
    pub fn time_breaks(&self, j: usize, k: usize, x: f64, t_max: f64) -> Vec<f64> {
        let sys = &self.sys;
        let (l, v) = (sys.length(j), sys.velocity(k));
        let arrival = (l - x) / v;
        let mut out = vec![0.0, t_max];
        out.push(arrival);
        for &y in self.x0.profile(j, k).breaks().iter().chain(sys.absorption(j).breaks()) {
            if y > x {
                out.push((y - x) / v);
            }
        }
        out.extend(self.ledger.stamps.iter().map(|s| s + arrival));
        out.retain(|t| (0.0..=t_max).contains(t));
        out.sort_by(|a, b| a.partial_cmp(b).unwrap());
        out.dedup();
        out
    }

    /// Vertex values `Γ z + K u` at the ledger stamps.
    pub fn vertex_traces(&self) -> BoundarySignal {
        BoundarySignal {
            n_vertices: self.sys.n_vertices(),
            n_nodes: self.sys.n_nodes(),
            times: self.ledger.stamps.clone(),
            values: self.ledger.vertex.clone(),
        }
    }
}

fn eval_state(sys: &TransportSystem, x0: &StateField, ledger: &TraceLedger, j: usize, k: usize, x: f64, t: f64) -> f64 {
    let (l, v) = (sys.length(j), sys.velocity(k));
    let abs = sys.absorption(j);
    let y = x + v * t;
    if y <= l {
        ((abs.potential(k, y) - abs.potential(k, x)) / v).exp() * x0.eval(j, k, y)
    } else {
        let s = (t - (l - x) / v).max(0.0);
        ((abs.potential(k, l) - abs.potential(k, x)) / v).exp() * ledger.eval(j, k, s, Side::Right)
    }
}

fn state_field(sys: &Arc<TransportSystem>, x0: &StateField, ledger: &Arc<TraceLedger>, t: f64) -> StateField {
    let profiles = (0..sys.n_edges())
        .map(|j| {
            (0..sys.n_nodes())
                .map(|k| {
                    let (l, v) = (sys.length(j), sys.velocity(k));
                    let d = v * t;
                    let mut breaks: Vec<f64> = x0.profile(j, k).breaks().iter().map(|b| b - d).collect();
                    breaks.push(l - d);
                    breaks.extend(sys.absorption(j).breaks().iter().flat_map(|&b| [b, b - d]));
                    breaks.extend(ledger.stamps.iter().take_while(|&&s| s <= t).map(|s| l - v * (t - s)));
                    let (sys, x0, ledger) = (sys.clone(), x0.clone(), ledger.clone());
                    Profile::new(l, move |x| eval_state(&sys, &x0, &ledger, j, k, x, t), breaks)
                })
                .collect()
        })
        .collect();
    StateField::from_profiles(profiles)
}

fn merge_times(mut ts: Vec<f64>) -> Vec<f64> {
    ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut out: Vec<f64> = Vec::with_capacity(ts.len());
    for t in ts {
        match out.last() {
            Some(&p) if t - p <= 1e-12 * (1.0 + p.abs()) => {}
            _ => out.push(t),
        }
    }
    out
}

/// Number of generations needed to cover `[0, horizon]`.
pub fn generation_count(sys: &TransportSystem, horizon: f64) -> usize {
    (horizon / sys.min_transit() - 1e-12).ceil().max(0.0) as usize
}

/// Solves the network with boundary condition
/// `z_j(t, l_j) = w_j (Γ z(t) + K u(t))_{tail(j)}`, where the control history
/// `u` has one channel per column of the graph's control matrix.
pub fn closed_loop_solve(
    sys: &Arc<TransportSystem>,
    x0: &StateField,
    u: Option<Arc<dyn BoundaryHistory>>,
    horizon: f64,
    snapshot_times: &[f64],
    opts: &SolverOptions,
) -> Result<ClosedLoopSolution> {
    if !(horizon >= 0.0) || !horizon.is_finite() {
        return Err(Error::InvalidArgument(format!("horizon must be finite and >= 0, got {horizon}")));
    }
    if !(opts.dt_max > 0.0) {
        return Err(Error::InvalidArgument("dt_max must be positive".into()));
    }
    x0.check_shape(sys)?;
    let (m, kn, nv) = (sys.n_edges(), sys.n_nodes(), sys.n_vertices());
    let routed: Option<Routed> = match u {
        Some(u) => {
            if u.nodes() != kn {
                return Err(Error::Shape(format!("input has {} nodes, grid has {kn}", u.nodes())));
            }
            if u.horizon() < horizon {
                return Err(Error::ShortHistory {
                    available: u.horizon(),
                    requested: horizon,
                });
            }
            Some(Routed::new(sys.graph().control().clone(), u)?)
        }
        None => None,
    };
    if opts.positivity && !x0.is_nonneg(opts.tol) {
        return Err(Error::Positivity(format!("initial state has minimum {:.3e}", x0.min_value())));
    }
    if let Some(&t) = snapshot_times.iter().find(|&&t| !(t >= 0.0) || t > horizon) {
        return Err(Error::InvalidArgument(format!("snapshot time {t} outside [0, {horizon}]")));
    }

    // stamps: uniform grid no coarser than Δ, plus characteristic arrivals of
    // jumps in the data
    let delta = sys.min_transit();
    let h = opts.dt_max.min(delta);
    let n_uniform = (horizon / h).ceil() as usize;
    let mut times: Vec<f64> = (0..=n_uniform).map(|i| (i as f64 * h).min(horizon)).collect();
    let mut events: Vec<f64> = Vec::new();
    for j in 0..m {
        for k in 0..kn {
            let v = sys.velocity(k);
            for &y in x0.profile(j, k).breaks().iter().chain(sys.absorption(j).breaks()) {
                if y > 0.0 {
                    events.push(y / v);
                }
            }
        }
    }
    if let Some(r) = &routed {
        events.extend(r.breakpoints().into_iter().filter(|&t| t > 0.0));
    }
    let transits: Vec<f64> = merge_times((0..m).flat_map(|j| (0..kn).map(move |k| (j, k))).map(|(j, k)| sys.transit(j, k)).collect());
    let mut front = merge_times(events.into_iter().filter(|&t| t <= horizon).collect());
    let mut all_events = front.clone();
    while !front.is_empty() && all_events.len() < opts.event_cap {
        let next: Vec<f64> = front
            .iter()
            .flat_map(|e| transits.iter().map(move |d| e + d))
            .filter(|&t| t <= horizon)
            .collect();
        front = merge_times(next);
        let room = opts.event_cap.saturating_sub(all_events.len());
        front.truncate(room);
        all_events.extend(front.iter().copied());
    }
    times.extend(all_events);
    let stamps = merge_times(times);
    let ns = stamps.len();

    let mut ledger = TraceLedger {
        n_nodes: kn,
        stamps,
        left: vec![vec![0.0; ns * kn]; m],
        right: vec![vec![0.0; ns * kn]; m],
        vertex: Vec::with_capacity(ns),
    };

    let exp_l: Vec<Vec<f64>> = (0..m)
        .map(|j| {
            let a = sys.absorption(j);
            (0..kn).map(|k| (a.potential(k, sys.length(j)) / sys.velocity(k)).exp()).collect()
        })
        .collect();

    let mut min_trace = f64::INFINITY;
    for n in 0..ns {
        let s = ledger.stamps[n];
        let sides: &[Side] = if n == 0 { &[Side::Right] } else { &[Side::Left, Side::Right] };
        for &side in sides {
            let eps = 1e-12 * (1.0 + s);
            let mut outflow = vec![vec![0.0; kn]; m];
            for (j, row) in outflow.iter_mut().enumerate() {
                let abs = sys.absorption(j);
                for (k, slot) in row.iter_mut().enumerate() {
                    let v = sys.velocity(k);
                    let tau = s - sys.transit(j, k);
                    let from_initial = tau < -eps || (tau.abs() <= eps && side == Side::Left);
                    *slot = if from_initial {
                        let mut y = (v * s).min(sys.length(j));
                        if side == Side::Left && s > 0.0 {
                            y = (y - 1e-12 * (1.0 + y)).max(0.0);
                        }
                        (abs.potential(k, y) / v).exp() * x0.eval(j, k, y)
                    } else {
                        exp_l[j][k] * ledger.eval_upto(j, k, tau.max(0.0), side, n)
                    };
                }
            }
            let mut g = scatter_to_vertices(sys, &outflow);
            if let Some(r) = &routed {
                for i in 0..nv {
                    for k in 0..kn {
                        let val = r.eval_side(i, k, s, side);
                        if opts.positivity && val < -opts.tol {
                            return Err(Error::Positivity(format!("input at vertex {i} is {val:.3e} at t = {s}")));
                        }
                        g.values[sys.bindex(i, k)] += val;
                    }
                }
            }
            for j in 0..m {
                let e = sys.graph().edge(j);
                for k in 0..kn {
                    let val = e.weight * g.get(e.tail, k);
                    min_trace = min_trace.min(val);
                    match side {
                        Side::Left => ledger.left[j][n * kn + k] = val,
                        Side::Right => ledger.right[j][n * kn + k] = val,
                    }
                }
            }
            if n == 0 {
                for j in 0..m {
                    for k in 0..kn {
                        ledger.left[j][k] = ledger.right[j][k];
                    }
                }
            }
            if side == Side::Right {
                ledger.vertex.push(g.values);
            }
        }
    }

    let ledger = Arc::new(ledger);
    let snapshots: Vec<(f64, StateField)> = snapshot_times
        .iter()
        .map(|&t| (t, state_field(sys, x0, &ledger, t)))
        .collect();
    if opts.positivity {
        if min_trace < -opts.tol {
            return Err(Error::Positivity(format!("inflow trace reached {min_trace:.3e}")));
        }
        for (t, z) in &snapshots {
            if !z.is_nonneg(opts.tol) {
                return Err(Error::Positivity(format!("state at t = {t} has minimum {:.3e}", z.min_value())));
            }
        }
    }
    Ok(ClosedLoopSolution {
        sys: sys.clone(),
        x0: x0.clone(),
        ledger,
        horizon,
        generations: generation_count(sys, horizon),
        snapshots,
        min_trace: if min_trace.is_finite() { min_trace } else { 0.0 },
    })
}

/// `R(μ, 𝒜) f = (I + D_μ (I − Γ D_μ)^{-1} Γ) R(μ, A) f`, refused unless
/// `r(Γ D_μ) < 1`.
pub fn closed_loop_resolvent(sys: &TransportSystem, f: &StateField, mu: f64) -> Result<StateField> {
    let h = transfer_operator(sys, mu);
    let radius = spectral_radius(&h, 1e-12, 100_000)?.radius;
    if radius >= 1.0 {
        return Err(Error::Characteristic { mu, radius });
    }
    let rf = resolvent_apply(sys, f, mu)?;
    let (_, gamma) = boundary_traces(sys, &rf)?;
    if gamma.values.iter().all(|&x| x == 0.0) {
        return Ok(rf);
    }
    let dim = sys.boundary_dim();
    let lhs = DMatrix::<f64>::identity(dim, dim) - h;
    let rhs = nalgebra::DVector::from_vec(gamma.values);
    let y = lhs.lu().solve(&rhs).ok_or(Error::Characteristic { mu, radius })?;
    let y = BoundaryVector::from_values(sys.n_vertices(), sys.n_nodes(), y.iter().copied().collect())?;
    let lift = dirichlet_apply(sys, &y, mu)?;
    Ok(rf.combine(1.0, &lift, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Edge, MetricGraph};
    use crate::lattice::{gauss_legendre_unit, Quadrature};
    use crate::transport::signal::StepHistory;
    use crate::transport::system::{Absorption, Kernel};

    fn unit_loop() -> Arc<TransportSystem> {
        Arc::new(TransportSystem::conservative(MetricGraph::unit_loop(1.0), Quadrature::point(1.0)).unwrap())
    }

    #[test]
    fn zero_data_stays_zero() {
        let sys = unit_loop();
        let u: Arc<dyn BoundaryHistory> = Arc::new(StepHistory::zeros(1, 1));
        let sol = closed_loop_solve(&sys, &StateField::zeros(&sys), Some(u), 2.0, &[1.0, 2.0], &SolverOptions::default()).unwrap();
        for (_, z) in &sol.snapshots {
            assert_eq!(z.max_abs(), 0.0);
        }
    }

    #[test]
    fn constant_is_periodic() {
        let sys = unit_loop();
        let x0 = StateField::constant(&sys, 1.0);
        let sol = closed_loop_solve(&sys, &x0, None, 3.0, &[0.3, 1.0, 2.71, 3.0], &SolverOptions::default()).unwrap();
        assert_eq!(sol.generations, 3);
        for (_, z) in &sol.snapshots {
            for i in 0..=50 {
                assert!((z.eval(0, 0, i as f64 / 50.0) - 1.0).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn rejects_bad_data() {
        let sys = unit_loop();
        let opts = SolverOptions::default();
        assert!(closed_loop_solve(&sys, &StateField::zeros(&sys), None, -1.0, &[], &opts).is_err());
        let neg = StateField::constant(&sys, -1.0);
        assert!(matches!(closed_loop_solve(&sys, &neg, None, 1.0, &[], &opts), Err(Error::Positivity(_))));
        let signed = SolverOptions { positivity: false, ..opts };
        assert!(closed_loop_solve(&sys, &neg, None, 1.0, &[], &signed).is_ok());
        let u: Arc<dyn BoundaryHistory> = Arc::new(StepHistory::constant(1, 1, -0.5));
        let zero = StateField::zeros(&sys);
        assert!(matches!(closed_loop_solve(&sys, &zero, Some(u), 1.0, &[], &opts), Err(Error::Positivity(_))));
    }

    #[test]
    fn control_enters_at_the_tail() {
        let sys = unit_loop();
        let u: Arc<dyn BoundaryHistory> = Arc::new(StepHistory::new(1, 1, vec![0.0, 0.5], vec![vec![1.0], vec![0.0]], 5.0).unwrap());
        let sol = closed_loop_solve(&sys, &StateField::zeros(&sys), Some(u), 1.8, &[], &SolverOptions::default()).unwrap();
        // the pulse enters during [0, 0.5), then circulates with period 1
        assert_eq!(sol.eval(0, 0, 0.75, 0.5), 1.0);
        assert_eq!(sol.eval(0, 0, 0.25, 0.5), 0.0);
        assert_eq!(sol.eval(0, 0, 0.75, 1.5), 1.0);
        assert_eq!(sol.eval(0, 0, 0.25, 1.5), 0.0);
        assert_eq!(sol.eval(0, 0, 0.1, 1.2), 1.0);
        assert_eq!(sol.eval(0, 0, 0.5, 1.2), 0.0);
    }

    fn laplace(sol: &ClosedLoopSolution, j: usize, k: usize, x: f64, mu: f64, t_end: f64) -> f64 {
        let (gx, gw) = gauss_legendre_unit(8);
        let breaks = sol.time_breaks(j, k, x, t_end);
        let mut s = 0.0;
        for w in breaks.windows(2) {
            let (c, r) = (0.5 * (w[0] + w[1]), 0.5 * (w[1] - w[0]));
            for (xi, wi) in gx.iter().zip(&gw) {
                let t = c + r * xi;
                s += wi * r * (-mu * t).exp() * sol.eval(j, k, x, t);
            }
        }
        s
    }

    #[test]
    fn laplace_matches_resolvent_on_two_vertices() {
        let edges = vec![
            Edge { tail: 0, head: 1, length: 1.0, weight: 1.0 },
            Edge { tail: 1, head: 0, length: 0.5, weight: 0.6 },
            Edge { tail: 1, head: 1, length: 0.75, weight: 0.4 },
        ];
        let g = MetricGraph::uncontrolled(2, edges).unwrap();
        let vq = Quadrature::midpoint(1.0, 2.0, 2).unwrap();
        let abs = vec![
            Absorption::constant(1.0, -0.5, 2),
            Absorption::table(vec![0.0, 0.25, 0.5], vec![vec![0.0, -1.0], vec![-0.3, 0.0]]).unwrap(),
            Absorption::constant(0.75, 0.0, 2),
        ];
        let kern = vec![Kernel::Identity, Kernel::constant(0.5, 2), Kernel::Identity];
        let sys = Arc::new(TransportSystem::new(g, vq, abs, kern).unwrap());
        let x0 = StateField::from_fn_with_breaks(&sys, &[0.4], |j, k, x, _| if x < 0.4 { 1.0 + j as f64 } else { 0.5 + k as f64 * x });
        let mu = 3.0;
        let t_end = 8.0;
        let opts = SolverOptions { dt_max: 0.005, ..SolverOptions::default() };
        let sol = closed_loop_solve(&sys, &x0, None, t_end, &[], &opts).unwrap();
        let r = closed_loop_resolvent(&sys, &x0, mu).unwrap();
        for j in 0..3 {
            for k in 0..2 {
                for x in [0.0, 0.1, 0.33, 0.5] {
                    let a = laplace(&sol, j, k, x, mu, t_end);
                    let b = r.eval(j, k, x);
                    assert!((a - b).abs() <= 1e-4 * b.abs().max(1e-3), "edge {j} node {k} x {x}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn characteristic_gate_refuses() {
        let g = MetricGraph::unit_loop(1.0);
        let sys = TransportSystem::new(g, Quadrature::point(1.0), vec![Absorption::constant(1.0, 0.0, 1)], vec![Kernel::constant(50.0, 1)]).unwrap();
        let f = StateField::constant(&sys, 1.0);
        assert!(matches!(closed_loop_resolvent(&sys, &f, 1.0), Err(Error::Characteristic { .. })));
        assert!(closed_loop_resolvent(&sys, &f, 5.0).is_ok());
    }
}
