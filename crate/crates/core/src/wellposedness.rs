//! Empirical admissibility, regularity and feedback checks.
//!
//! Every estimate here is a lower bound: a running maximum over a seeded probe
//! family. Probe `i` is drawn from its own random stream, so the first `n`
//! probes do not depend on how many are requested and the reported maxima are
//! nondecreasing in the probe count.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::lattice::{signal_norm, spectral_radius, Quadrature, RadiusMethod};
use crate::oracle::{step_operators, transfer, PosLti};
use crate::transport::{
    input_map, io_map, scatter_to_vertices, BoundaryHistory, Profile, StateField, StepHistory, TransportSystem,
};

/// Slack for monotonicity and positivity verdicts.
pub const VERDICT_TOL: f64 = 1e-12;

/// Work ceiling (block multiplications) for the nilpotency count.
const GENERATION_BUDGET: usize = 200_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeFamily {
    /// Positive step functions and positive bumps.
    Positive,
    /// The same magnitudes with random signs.
    Signed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ProbeConfig {
    pub count: usize,
    pub seed: u64,
    pub family: ProbeFamily,
}

impl ProbeConfig {
    pub fn positive(count: usize, seed: u64) -> Self {
        Self {
            count,
            seed,
            family: ProbeFamily::Positive,
        }
    }

    pub fn signed(count: usize, seed: u64) -> Self {
        Self {
            count,
            seed,
            family: ProbeFamily::Signed,
        }
    }
}

/// Magnitudes and signs come from separate streams so that the signed family
/// is the positive family with random signs.
struct ProbeRng {
    mag: ChaCha8Rng,
    sign: ChaCha8Rng,
    signed: bool,
}

impl ProbeRng {
    fn new(cfg: &ProbeConfig, index: usize) -> Self {
        let mut mag = ChaCha8Rng::seed_from_u64(cfg.seed);
        mag.set_stream(2 * index as u64);
        let mut sign = ChaCha8Rng::seed_from_u64(cfg.seed);
        sign.set_stream(2 * index as u64 + 1);
        Self {
            mag,
            sign,
            signed: cfg.family == ProbeFamily::Signed,
        }
    }

    fn amplitude(&mut self) -> f64 {
        let a = 0.05 + 0.95 * self.mag.gen::<f64>();
        if self.signed && self.sign.gen::<bool>() {
            -a
        } else {
            a
        }
    }

    fn below(&mut self, n: usize) -> usize {
        self.mag.gen_range(0..n)
    }
}

/// Piecewise-constant signal on `[0, tau]`: `values[m]` holds on
/// `[times[m], times[m+1])`, one entry per input coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct StepSignal {
    pub times: Vec<f64>,
    pub values: Vec<Vec<f64>>,
    pub tau: f64,
}

impl StepSignal {
    pub fn new(times: Vec<f64>, values: Vec<Vec<f64>>, tau: f64) -> Result<Self> {
        if times.is_empty() || times.len() != values.len() || times[0] != 0.0 {
            return Err(Error::Shape("step signal needs one value row per step, starting at 0".into()));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) || !(tau > *times.last().unwrap()) {
            return Err(Error::InvalidArgument("step times must increase and end before tau".into()));
        }
        let dim = values[0].len();
        if values.iter().any(|r| r.len() != dim) {
            return Err(Error::Shape("step rows must share the input dimension".into()));
        }
        Ok(Self { times, values, tau })
    }

    pub fn constant(dim: usize, tau: f64, value: f64) -> Self {
        Self {
            times: vec![0.0],
            values: vec![vec![value; dim]],
            tau,
        }
    }

    pub fn dim(&self) -> usize {
        self.values[0].len()
    }

    /// Probe `index` of the family: the constant 1 first, then alternating
    /// dyadic steps with random amplitudes and single-cell bumps.
    pub fn probe(dim: usize, tau: f64, cfg: &ProbeConfig, index: usize) -> Self {
        if index == 0 {
            return Self::constant(dim, tau, 1.0);
        }
        let mut rng = ProbeRng::new(cfg, index);
        if index % 2 == 1 {
            let depth = rng.below(7);
            let cells = 1usize << depth;
            let times = (0..cells).map(|i| tau * i as f64 / cells as f64).collect();
            let values = (0..cells).map(|_| (0..dim).map(|_| rng.amplitude()).collect()).collect();
            Self { times, values, tau }
        } else {
            let depth = 1 + rng.below(8);
            let cells = 1usize << depth;
            let cell = rng.below(cells);
            let coord = rng.below(dim);
            let a = rng.amplitude();
            let mut times = vec![0.0];
            let mut values = vec![vec![0.0; dim]];
            let start = tau * cell as f64 / cells as f64;
            let mut bump = vec![0.0; dim];
            bump[coord] = a;
            if cell == 0 {
                values[0] = bump;
            } else {
                times.push(start);
                values.push(bump);
            }
            if cell + 1 < cells {
                times.push(tau * (cell + 1) as f64 / cells as f64);
                values.push(vec![0.0; dim]);
            }
            Self { times, values, tau }
        }
    }

    fn pieces(&self) -> Vec<f64> {
        let mut b = self.times.clone();
        b.push(self.tau);
        b
    }

    /// `‖u‖_{L^p([0, τ]; U)}` with `‖·‖_U` the weighted ℓ¹ norm.
    pub fn norm(&self, weights: &[f64], p: f64) -> Result<f64> {
        let grid = Quadrature::composite(&self.pieces(), 1)?;
        signal_norm(&self.values, weights, p, &grid)
    }

    /// The same signal on `[0, tau]`, zero before `tau − self.tau`.
    pub fn delayed(&self, tau: f64) -> Result<Self> {
        let shift = tau - self.tau;
        if !(shift >= 0.0) {
            return Err(Error::InvalidArgument(format!("cannot delay a signal on [0, {}] to [0, {tau}]", self.tau)));
        }
        if shift == 0.0 {
            return Ok(self.clone());
        }
        let mut times = vec![0.0];
        let mut values = vec![vec![0.0; self.dim()]];
        times.extend(self.times.iter().map(|t| t + shift));
        values.extend(self.values.iter().cloned());
        Ok(Self { times, values, tau })
    }

    /// Pointwise absolute value.
    pub fn abs(&self) -> Self {
        Self {
            times: self.times.clone(),
            values: self.values.iter().map(|r| r.iter().map(|x| x.abs()).collect()).collect(),
            tau: self.tau,
        }
    }
}

/// Operations needed by the checks, implemented by the transport network and
/// by finite-dimensional positive systems.
pub trait SystemHandle {
    type State;

    fn input_dim(&self) -> usize;
    fn input_weights(&self) -> Vec<f64>;
    fn output_dim(&self) -> usize;
    fn output_weights(&self) -> Vec<f64>;

    /// `‖Φ_τ u‖`.
    fn control_norm(&self, u: &StepSignal) -> Result<f64>;

    fn probe_state(&self, cfg: &ProbeConfig, index: usize) -> Self::State;
    fn state_norm(&self, x: &Self::State) -> f64;
    /// `(∫_0^α ‖C T(t) x‖^p dt)^{1/p}`.
    fn observation_norm(&self, x: &Self::State, alpha: f64, p: f64) -> Result<f64>;

    /// Lower end of the range where the transfer function is probed.
    fn mu_floor(&self) -> f64;
    fn transfer(&self, mu: f64) -> Result<DMatrix<f64>>;
    fn feedthrough(&self) -> DMatrix<f64>;

    /// Block `d` is the output at `(d + 1/2) dt` for a unit input held on
    /// `[0, dt)` in each input coordinate.
    fn volterra_blocks(&self, dt: f64, steps: usize) -> Result<Vec<DMatrix<f64>>>;
}

impl SystemHandle for TransportSystem {
    type State = StateField;

    fn input_dim(&self) -> usize {
        self.boundary_dim()
    }

    fn input_weights(&self) -> Vec<f64> {
        self.weights().repeat(self.n_vertices())
    }

    fn output_dim(&self) -> usize {
        self.boundary_dim()
    }

    fn output_weights(&self) -> Vec<f64> {
        self.input_weights()
    }

    fn control_norm(&self, u: &StepSignal) -> Result<f64> {
        let h = StepHistory::new(self.n_vertices(), self.n_nodes(), u.times.clone(), u.values.clone(), u.tau)?;
        Ok(input_map(self, Arc::new(h), u.tau)?.norm(self))
    }

    fn probe_state(&self, cfg: &ProbeConfig, index: usize) -> StateField {
        if index == 0 {
            return StateField::constant(self, 1.0);
        }
        let mut rng = ProbeRng::new(cfg, index);
        let (m, kn) = (self.n_edges(), self.n_nodes());
        let bump = index.is_multiple_of(2).then(|| {
            let depth = rng.below(7);
            (rng.below(m), rng.below(kn), depth, rng.below(1 << depth), rng.amplitude())
        });
        let profiles = (0..m)
            .map(|j| {
                let l = self.length(j);
                (0..kn)
                    .map(|k| {
                        let (cells, amps) = match bump {
                            Some((bj, bk, depth, cell, a)) => {
                                let cells = 1usize << depth;
                                let amps = (0..cells).map(|c| if (bj, bk, cell) == (j, k, c) { a } else { 0.0 }).collect();
                                (cells, amps)
                            }
                            None => {
                                let cells = 1usize << rng.below(5);
                                (cells, (0..cells).map(|_| rng.amplitude()).collect::<Vec<f64>>())
                            }
                        };
                        let breaks = (0..=cells).map(|c| l * c as f64 / cells as f64).collect();
                        Profile::piecewise_constant(breaks, amps).expect("dyadic cells are valid")
                    })
                    .collect()
            })
            .collect();
        StateField::from_profiles(profiles)
    }

    fn state_norm(&self, x: &StateField) -> f64 {
        x.norm(self)
    }

    fn observation_norm(&self, x: &StateField, alpha: f64, p: f64) -> Result<f64> {
        // The output vanishes after the longest transit. Pieces are fixed on
        // that window and clipped at alpha, so a longer horizon only adds
        // pieces.
        let t_end = (0..self.n_edges())
            .map(|j| self.length(j) / self.velocity(0))
            .fold(0.0, f64::max);
        let mut breaks: Vec<f64> = (0..=32).map(|i| t_end * i as f64 / 32.0).collect();
        for j in 0..self.n_edges() {
            for k in 0..self.n_nodes() {
                let v = self.velocity(k);
                let pts = x.profile(j, k).breaks().iter().chain(self.absorption(j).breaks());
                breaks.extend(pts.map(|b| b / v));
                breaks.push(self.length(j) / v);
            }
        }
        breaks.push(alpha);
        breaks.retain(|&t| (0.0..=alpha).contains(&t));
        breaks.sort_by(|a, b| a.partial_cmp(b).unwrap());
        breaks.dedup_by(|a, b| (*a - *b).abs() <= 1e-14 * (1.0 + b.abs()));
        let grid = Quadrature::composite(&breaks, 8)?;
        let samples: Vec<Vec<f64>> = grid
            .nodes()
            .iter()
            .map(|&t| {
                let outflow: Vec<Vec<f64>> = (0..self.n_edges())
                    .map(|j| {
                        (0..self.n_nodes())
                            .map(|k| {
                                let y = self.velocity(k) * t;
                                if y <= self.length(j) {
                                    self.gain(j, k, 0.0, y) * x.eval(j, k, y)
                                } else {
                                    0.0
                                }
                            })
                            .collect()
                    })
                    .collect();
                scatter_to_vertices(self, &outflow).values
            })
            .collect();
        signal_norm(&samples, &self.output_weights(), p, &grid)
    }

    fn mu_floor(&self) -> f64 {
        self.q_tilde()
    }

    fn transfer(&self, mu: f64) -> Result<DMatrix<f64>> {
        Ok(crate::transport::transfer_operator(self, mu))
    }

    fn feedthrough(&self) -> DMatrix<f64> {
        DMatrix::zeros(self.boundary_dim(), self.boundary_dim())
    }

    fn volterra_blocks(&self, dt: f64, steps: usize) -> Result<Vec<DMatrix<f64>>> {
        let dim = self.boundary_dim();
        let tgrid: Vec<f64> = (0..steps).map(|d| (d as f64 + 0.5) * dt).collect();
        let mut blocks = vec![DMatrix::zeros(dim, dim); steps];
        for c in 0..dim {
            let mut on = vec![0.0; dim];
            on[c] = 1.0;
            let u = StepHistory::new(self.n_vertices(), self.n_nodes(), vec![0.0, dt], vec![on, vec![0.0; dim]], f64::INFINITY)?;
            let y = io_map(self, &u as &dyn BoundaryHistory, &tgrid)?;
            for (block, row) in blocks.iter_mut().zip(&y.values) {
                for (r, val) in row.iter().enumerate() {
                    block[(r, c)] = *val;
                }
            }
        }
        Ok(blocks)
    }
}

impl SystemHandle for PosLti {
    type State = DVector<f64>;

    fn input_dim(&self) -> usize {
        self.inputs()
    }

    fn input_weights(&self) -> Vec<f64> {
        vec![1.0; self.inputs()]
    }

    fn output_dim(&self) -> usize {
        self.outputs()
    }

    fn output_weights(&self) -> Vec<f64> {
        vec![1.0; self.outputs()]
    }

    fn control_norm(&self, u: &StepSignal) -> Result<f64> {
        let grid = u.pieces();
        let mut samples: Vec<DVector<f64>> = u.values.iter().map(|r| DVector::from_column_slice(r)).collect();
        samples.push(DVector::zeros(self.inputs()));
        let z = crate::oracle::simulate_mild(self, &DVector::zeros(self.states()), &samples, &grid)?;
        Ok(z.last().map_or(0.0, |x| x.iter().map(|v| v.abs()).sum()))
    }

    fn probe_state(&self, cfg: &ProbeConfig, index: usize) -> DVector<f64> {
        let n = self.states();
        if index == 0 {
            return DVector::from_element(n, 1.0);
        }
        let mut rng = ProbeRng::new(cfg, index);
        if index.is_multiple_of(2) {
            let mut x = DVector::zeros(n);
            let i = rng.below(n);
            x[i] = rng.amplitude();
            x
        } else {
            DVector::from_fn(n, |_, _| rng.amplitude())
        }
    }

    fn state_norm(&self, x: &DVector<f64>) -> f64 {
        x.iter().map(|v| v.abs()).sum()
    }

    fn observation_norm(&self, x: &DVector<f64>, alpha: f64, p: f64) -> Result<f64> {
        let grid = Quadrature::gauss_legendre(0.0, alpha, 32, 8)?;
        let samples: Vec<Vec<f64>> = grid
            .nodes()
            .iter()
            .map(|&t| (&self.c * (&self.a * t).exp() * x).iter().copied().collect())
            .collect();
        signal_norm(&samples, &self.output_weights(), p, &grid)
    }

    fn mu_floor(&self) -> f64 {
        self.abscissa()
    }

    fn transfer(&self, mu: f64) -> Result<DMatrix<f64>> {
        transfer(self, mu)
    }

    fn feedthrough(&self) -> DMatrix<f64> {
        self.d.clone()
    }

    fn volterra_blocks(&self, dt: f64, steps: usize) -> Result<Vec<DMatrix<f64>>> {
        let mut blocks = Vec::with_capacity(steps);
        if steps == 0 {
            return Ok(blocks);
        }
        let (_, half) = step_operators(self, 0.5 * dt);
        blocks.push(&self.c * half + &self.d);
        let (e_full, g_full) = step_operators(self, dt);
        let (e_half, _) = step_operators(self, 0.5 * dt);
        // state at (d + 1/2) dt after the pulse: e^{A (d − 1/2) dt} ∫_0^dt e^{sA} ds B
        let mut x = e_half * g_full;
        for _ in 1..steps {
            blocks.push(&self.c * &x);
            x = &e_full * x;
        }
        Ok(blocks)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ZeroClassFit {
    pub exponent: f64,
    pub intercept: f64,
    pub r_squared: f64,
    /// Predicted exponent `1/q = 1 − 1/p`.
    pub predicted: f64,
    pub taus: Vec<f64>,
    pub estimates: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdmissibilityReport {
    pub tau_or_alpha: f64,
    pub p: f64,
    pub constant_estimate: f64,
    pub probe_count: usize,
    pub probe_family: ProbeFamily,
    /// No probe had positive norm; the estimate is meaningless.
    pub degenerate: bool,
    pub zero_class_fit: Option<ZeroClassFit>,
}

fn check_p(p: f64) -> Result<()> {
    if !(p >= 1.0) || !p.is_finite() {
        return Err(Error::InvalidArgument(format!("p must be in [1, inf), got {p}")));
    }
    Ok(())
}

/// `κ̂(τ) = max ‖Φ_τ u‖ / ‖u‖_{L^p}` over the probe family.
pub fn control_admissibility<S: SystemHandle>(sys: &S, tau: f64, p: f64, probes: &ProbeConfig) -> Result<AdmissibilityReport> {
    let family: Vec<StepSignal> = (0..probes.count)
        .map(|i| StepSignal::probe(sys.input_dim(), tau, probes, i))
        .collect();
    let mut report = control_admissibility_with(sys, tau, p, &family)?;
    report.probe_family = probes.family;
    Ok(report)
}

/// As [`control_admissibility`] with explicit probes.
pub fn control_admissibility_with<S: SystemHandle>(sys: &S, tau: f64, p: f64, probes: &[StepSignal]) -> Result<AdmissibilityReport> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("tau must be positive, got {tau}")));
    }
    check_p(p)?;
    let weights = sys.input_weights();
    let mut best = 0.0f64;
    let mut used = 0;
    let mut signed = false;
    for u in probes {
        if u.dim() != sys.input_dim() || (u.tau - tau).abs() > 1e-12 * tau {
            return Err(Error::Shape(format!("probe has dimension {} on [0, {}]", u.dim(), u.tau)));
        }
        signed |= u.values.iter().flatten().any(|&x| x < 0.0);
        let un = u.norm(&weights, p)?;
        if un > 0.0 {
            best = best.max(sys.control_norm(u)? / un);
            used += 1;
        }
    }
    Ok(AdmissibilityReport {
        tau_or_alpha: tau,
        p,
        constant_estimate: best,
        probe_count: probes.len(),
        probe_family: if signed { ProbeFamily::Signed } else { ProbeFamily::Positive },
        degenerate: used == 0,
        zero_class_fit: None,
    })
}

/// Least-squares fit of `log κ̂(τ) = e · log τ + c`, with `p > 1`.
pub fn zero_class_scan<S: SystemHandle>(sys: &S, p: f64, tau_grid: &[f64], probes: &ProbeConfig) -> Result<AdmissibilityReport> {
    check_p(p)?;
    if p == 1.0 {
        return Err(Error::InvalidArgument(
            "zero-class scan needs p > 1; for p = 1 the constant need not vanish".into(),
        ));
    }
    if tau_grid.is_empty() {
        return Err(Error::InvalidArgument("empty tau grid".into()));
    }
    let mut estimates = tau_grid
        .iter()
        .map(|&tau| control_admissibility(sys, tau, p, probes).map(|r| r.constant_estimate))
        .collect::<Result<Vec<f64>>>()?;
    // A probe on [0, σ] delayed to end at τ > σ has the same ratio, so each
    // estimate may take the maximum over all shorter horizons in the grid.
    let mut order: Vec<usize> = (0..tau_grid.len()).collect();
    order.sort_by(|&a, &b| tau_grid[a].partial_cmp(&tau_grid[b]).unwrap());
    let mut running = 0.0f64;
    for &i in &order {
        running = running.max(estimates[i]);
        estimates[i] = running;
    }
    let (i_min, &tau_min) = tau_grid
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .unwrap();
    let degenerate = estimates.iter().any(|&k| !(k > 0.0));
    let fit = if tau_grid.len() >= 5 && !degenerate {
        let xs: Vec<f64> = tau_grid.iter().map(|t| t.ln()).collect();
        let ys: Vec<f64> = estimates.iter().map(|k| k.ln()).collect();
        let (e, c, r2) = linear_fit(&xs, &ys);
        Some(ZeroClassFit {
            exponent: e,
            intercept: c,
            r_squared: r2,
            predicted: 1.0 - 1.0 / p,
            taus: tau_grid.to_vec(),
            estimates: estimates.clone(),
        })
    } else {
        None
    };
    Ok(AdmissibilityReport {
        tau_or_alpha: tau_min,
        p,
        constant_estimate: estimates[i_min],
        probe_count: probes.count,
        probe_family: probes.family,
        degenerate,
        zero_class_fit: fit,
    })
}

/// Ordinary least squares `y = a x + b`; returns `(a, b, r²)`.
fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let a = sxy / sxx;
    let b = my - a * mx;
    let sse: f64 = xs.iter().zip(ys).map(|(x, y)| (y - a * x - b).powi(2)).sum();
    let r2 = if syy > 0.0 { 1.0 - sse / syy } else { 1.0 };
    (a, b, r2)
}

/// `γ̂(α) = max (∫_0^α ‖C T(t) x‖^p dt)^{1/p} / ‖x‖` over positive probe states.
pub fn observation_admissibility<S: SystemHandle>(sys: &S, alpha: f64, p: f64, probes: &ProbeConfig) -> Result<AdmissibilityReport> {
    let states: Vec<S::State> = (0..probes.count).map(|i| sys.probe_state(probes, i)).collect();
    let mut report = observation_admissibility_with(sys, alpha, p, &states)?;
    report.probe_family = probes.family;
    Ok(report)
}

/// As [`observation_admissibility`] with explicit probe states.
pub fn observation_admissibility_with<S: SystemHandle>(sys: &S, alpha: f64, p: f64, states: &[S::State]) -> Result<AdmissibilityReport> {
    if !(alpha > 0.0) {
        return Err(Error::InvalidArgument(format!("alpha must be positive, got {alpha}")));
    }
    check_p(p)?;
    let mut best = 0.0f64;
    let mut used = 0;
    for x in states {
        let xn = sys.state_norm(x);
        if xn > 0.0 {
            best = best.max(sys.observation_norm(x, alpha, p)? / xn);
            used += 1;
        }
    }
    Ok(AdmissibilityReport {
        tau_or_alpha: alpha,
        p,
        constant_estimate: best,
        probe_count: states.len(),
        probe_family: ProbeFamily::Positive,
        degenerate: used == 0,
        zero_class_fit: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegularityReport {
    pub mus: Vec<f64>,
    /// `H(μ_k) g`.
    pub outputs: Vec<Vec<f64>>,
    pub monotone: bool,
    /// Largest entrywise increase between consecutive `μ`.
    pub max_violation: f64,
    /// `(μ_b H(μ_b) g − μ_a H(μ_a) g) / (μ_b − μ_a)` from the last two points.
    pub limit: Vec<f64>,
    /// `D g`.
    pub feedthrough: Vec<f64>,
    /// `max |limit − D g|`.
    pub limit_error: f64,
}

/// Samples `μ ↦ H(μ) g` on an increasing grid and checks it decreases
/// entrywise towards the feedthrough.
pub fn regularity_probe<S: SystemHandle>(sys: &S, mu_grid: &[f64], g: &[f64]) -> Result<RegularityReport> {
    if mu_grid.is_empty() || mu_grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidArgument("mu grid must be nonempty and increasing".into()));
    }
    let floor = sys.mu_floor();
    if !(mu_grid[0] > floor) {
        return Err(Error::InvalidArgument(format!("mu grid starts at {} <= {floor}", mu_grid[0])));
    }
    if g.len() != sys.input_dim() {
        return Err(Error::Shape(format!("g has {} entries, expected {}", g.len(), sys.input_dim())));
    }
    let gv = DVector::from_column_slice(g);
    let outputs = mu_grid
        .iter()
        .map(|&mu| sys.transfer(mu).map(|h| (h * &gv).iter().copied().collect::<Vec<f64>>()))
        .collect::<Result<Vec<_>>>()?;
    let mut max_violation = 0.0f64;
    for w in outputs.windows(2) {
        for (a, b) in w[0].iter().zip(&w[1]) {
            max_violation = max_violation.max(b - a);
        }
    }
    let scale = outputs.iter().flatten().fold(0.0f64, |m, x| m.max(x.abs()));
    let feedthrough: Vec<f64> = (sys.feedthrough() * &gv).iter().copied().collect();
    let limit: Vec<f64> = match outputs.len() {
        1 => outputs[0].clone(),
        n => {
            let (ma, mb) = (mu_grid[n - 2], mu_grid[n - 1]);
            outputs[n - 2]
                .iter()
                .zip(&outputs[n - 1])
                .map(|(ha, hb)| (mb * hb - ma * ha) / (mb - ma))
                .collect()
        }
    };
    let limit_error = limit.iter().zip(&feedthrough).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    Ok(RegularityReport {
        mus: mu_grid.to_vec(),
        outputs,
        monotone: max_violation <= VERDICT_TOL * (1.0 + scale),
        max_violation,
        limit,
        feedthrough,
        limit_error,
    })
}

/// Causal block-Toeplitz discretization of the input-output map on a uniform
/// grid: input held constant on `[t_m, t_{m+1})`, output sampled at cell
/// midpoints.
#[derive(Debug, Clone)]
pub struct VolterraOperator {
    pub dt: f64,
    pub blocks: Vec<DMatrix<f64>>,
}

impl VolterraOperator {
    pub fn new<S: SystemHandle>(sys: &S, tau: f64, dt: f64) -> Result<Self> {
        if !(tau > 0.0) || !(dt > 0.0) {
            return Err(Error::InvalidArgument(format!("tau and dt must be positive, got {tau}, {dt}")));
        }
        let steps = ((tau / dt) - 1e-9).ceil().max(1.0) as usize;
        Ok(Self {
            dt,
            blocks: sys.volterra_blocks(dt, steps)?,
        })
    }

    pub fn steps(&self) -> usize {
        self.blocks.len()
    }

    /// Blocks of `K 𝔽`.
    fn closed(&self, k: &DMatrix<f64>) -> Result<Vec<DMatrix<f64>>> {
        let out = self.blocks.first().map_or(0, |b| b.nrows());
        if k.ncols() != out {
            return Err(Error::Shape(format!("K has {} columns, outputs have {out} entries", k.ncols())));
        }
        Ok(self.blocks.iter().map(|b| k * b).collect())
    }

    /// Dense matrix of `K 𝔽` on the grid (block lower triangular).
    pub fn matrix(&self, k: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let kf = self.closed(k)?;
        let (r, c) = kf[0].shape();
        let n = self.steps();
        let mut m = DMatrix::zeros(n * r, n * c);
        for i in 0..n {
            for j in 0..=i {
                m.view_mut((i * r, j * c), (r, c)).copy_from(&kf[i - j]);
            }
        }
        Ok(m)
    }

    /// Solves `v = u + K 𝔽 v` by forward substitution; `u[m]` is the input
    /// on `[t_m, t_{m+1})`.
    pub fn feedback_solve(&self, k: &DMatrix<f64>, u: &[DVector<f64>]) -> Result<Vec<DVector<f64>>> {
        let kf = self.closed(k)?;
        let dim = kf[0].nrows();
        if kf[0].ncols() != dim {
            return Err(Error::Shape("feedback loop needs K 𝔽 square".into()));
        }
        if u.len() > self.steps() || u.iter().any(|x| x.len() != dim) {
            return Err(Error::Shape(format!("input needs at most {} samples of length {dim}", self.steps())));
        }
        let lu = (DMatrix::<f64>::identity(dim, dim) - &kf[0]).lu();
        let mut v: Vec<DVector<f64>> = Vec::with_capacity(u.len());
        for (i, ui) in u.iter().enumerate() {
            let mut rhs = ui.clone();
            for (m, vm) in v.iter().enumerate() {
                let blk = &kf[i - m];
                if blk.iter().any(|&x| x != 0.0) {
                    rhs += blk * vm;
                }
            }
            v.push(lu.solve(&rhs).ok_or(Error::Singular { mu: 0.0, eigenvalue: 1.0 })?);
        }
        Ok(v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FeedbackReport {
    pub radius: f64,
    pub radius_method: RadiusMethod,
    pub admissible: bool,
    /// `(I − K 𝔽)^{-1} >= 0` on the grid.
    pub inverse_positive: bool,
    /// Nilpotency index of `K 𝔽` on the grid, when it is nilpotent and the
    /// count fits the work budget.
    pub generations: Option<usize>,
    pub steps: usize,
    pub dt: f64,
}

/// Discretizes `K 𝔽` on `[0, tau]` and checks `r(K 𝔽) < 1` and positivity of
/// `(I − K 𝔽)^{-1}`. The matrix is block lower triangular, so its spectrum is
/// that of the diagonal block.
pub fn feedback_admissibility<S: SystemHandle>(sys: &S, k: &DMatrix<f64>, tau: f64, dt: f64) -> Result<FeedbackReport> {
    let op = VolterraOperator::new(sys, tau, dt)?;
    feedback_admissibility_of(&op, k)
}

pub fn feedback_admissibility_of(op: &VolterraOperator, k: &DMatrix<f64>) -> Result<FeedbackReport> {
    let kf = op.closed(k)?;
    let dim = kf[0].nrows();
    if kf[0].ncols() != dim {
        return Err(Error::Shape("feedback loop needs K 𝔽 square".into()));
    }
    let est = spectral_radius(&kf[0], 1e-12, 100_000)?;
    let admissible = est.radius < 1.0;
    let n = op.steps();
    let scale = kf.iter().flatten().fold(0.0f64, |m, x| m.max(x.abs()));
    let is_zero = |m: &DMatrix<f64>| m.iter().all(|&x| x.abs() <= 1e-14 * (1.0 + scale));

    // Q_d blocks of (I − K𝔽)^{-1}: Q_0 = (I − KF_0)^{-1}, Q_d = Q_0 Σ_{m=1}^d KF_m Q_{d−m}
    let mut inverse_positive = false;
    if admissible {
        if let Some(q0) = (DMatrix::<f64>::identity(dim, dim) - &kf[0]).try_inverse() {
            let mut q: Vec<DMatrix<f64>> = vec![q0.clone()];
            for d in 1..n {
                let mut acc = DMatrix::zeros(dim, dim);
                for m in 1..=d {
                    if !is_zero(&kf[m]) {
                        acc += &kf[m] * &q[d - m];
                    }
                }
                q.push(&q0 * acc);
            }
            let qs = q.iter().flatten().fold(0.0f64, |m, x| m.max(x.abs()));
            inverse_positive = q.iter().flatten().all(|&x| x >= -VERDICT_TOL * (1.0 + qs));
        }
    }

    let generations = if is_zero(&kf[0]) {
        let mut power = kf.clone();
        let mut count = 1;
        let mut budget = GENERATION_BUDGET;
        loop {
            if power.iter().all(is_zero) {
                break Some(count);
            }
            if count > n || budget == 0 {
                break None;
            }
            let mut next = vec![DMatrix::zeros(dim, dim); n];
            for (d, slot) in next.iter_mut().enumerate() {
                for m in 0..=d {
                    if is_zero(&power[m]) || is_zero(&kf[d - m]) {
                        continue;
                    }
                    *slot += &power[m] * &kf[d - m];
                    budget = budget.saturating_sub(1);
                }
            }
            power = next;
            count += 1;
        }
    } else {
        None
    };

    Ok(FeedbackReport {
        radius: est.radius,
        radius_method: est.method,
        admissible,
        inverse_positive,
        generations,
        steps: n,
        dt: op.dt,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::MetricGraph;
    use crate::transport::{closed_loop_solve, SolverOptions};

    fn unit_loop() -> TransportSystem {
        TransportSystem::conservative(MetricGraph::unit_loop(1.0), Quadrature::point(1.0)).unwrap()
    }

    #[test]
    fn loop_control_constant_is_one() {
        let sys = unit_loop();
        for tau in [0.1, 0.5, 1.0] {
            let r = control_admissibility(&sys, tau, 1.0, &ProbeConfig::positive(24, 7)).unwrap();
            assert!((r.constant_estimate - 1.0).abs() < 1e-6, "tau {tau}: {}", r.constant_estimate);
            assert!(!r.degenerate);
        }
    }

    #[test]
    fn zero_probes_are_degenerate() {
        let sys = unit_loop();
        let r = control_admissibility_with(&sys, 0.5, 1.0, &[StepSignal::constant(1, 0.5, 0.0)]).unwrap();
        assert!(r.degenerate);
        let r = observation_admissibility_with(&sys, 0.5, 1.0, &[StateField::zeros(&sys)]).unwrap();
        assert!(r.degenerate);
    }

    #[test]
    fn signed_matches_positive_on_the_loop() {
        let sys = unit_loop();
        let pos = control_admissibility(&sys, 0.7, 1.0, &ProbeConfig::positive(16, 3)).unwrap();
        let sgn = control_admissibility(&sys, 0.7, 1.0, &ProbeConfig::signed(16, 3)).unwrap();
        assert!((pos.constant_estimate - sgn.constant_estimate).abs() < 1e-9);
        assert_eq!(sgn.probe_family, ProbeFamily::Signed);
    }

    #[test]
    fn zero_class_exponent() {
        let sys = unit_loop();
        let taus = [0.4, 0.2, 0.1, 0.05, 0.025];
        let r = zero_class_scan(&sys, 2.0, &taus, &ProbeConfig::positive(16, 1)).unwrap();
        let fit = r.zero_class_fit.unwrap();
        assert!((0.4..=0.6).contains(&fit.exponent), "{}", fit.exponent);
        assert!(zero_class_scan(&sys, 1.0, &taus, &ProbeConfig::positive(4, 1)).is_err());
        let few = zero_class_scan(&sys, 2.0, &taus[..3], &ProbeConfig::positive(4, 1)).unwrap();
        assert!(few.zero_class_fit.is_none());
    }

    #[test]
    fn delay_keeps_the_ratio() {
        let edges = vec![
            crate::graph::Edge { tail: 0, head: 1, length: 0.7, weight: 1.0 },
            crate::graph::Edge { tail: 1, head: 0, length: 1.3, weight: 1.0 },
        ];
        let g = MetricGraph::uncontrolled(2, edges).unwrap();
        let sys = TransportSystem::conservative(g, Quadrature::midpoint(0.5, 1.5, 3).unwrap()).unwrap();
        let cfg = ProbeConfig::positive(8, 9);
        for i in 0..8 {
            let u = StepSignal::probe(sys.input_dim(), 0.4, &cfg, i);
            let d = u.delayed(1.1).unwrap();
            let w = sys.input_weights();
            let a = sys.control_norm(&u).unwrap() / u.norm(&w, 2.0).unwrap();
            let b = sys.control_norm(&d).unwrap() / d.norm(&w, 2.0).unwrap();
            assert!((a - b).abs() <= 1e-10 * a, "probe {i}: {a} vs {b}");
        }
        assert!(StepSignal::constant(1, 1.0, 1.0).delayed(0.5).is_err());
    }

    #[test]
    fn observation_bounded_by_mass() {
        let sys = unit_loop();
        for alpha in [0.3, 1.0] {
            let r = observation_admissibility(&sys, alpha, 1.0, &ProbeConfig::positive(24, 5)).unwrap();
            assert!(r.constant_estimate <= 1.0 + 1e-6);
        }
    }

    #[test]
    fn regularity_examples() {
        let sys = unit_loop();
        let mus = [1.0, 2.0, 4.0, 8.0, 16.0, 32.0];
        let r = regularity_probe(&sys, &mus, &[1.0]).unwrap();
        assert!(r.monotone);
        for (mu, out) in mus.iter().zip(&r.outputs) {
            assert!((out[0] - (-mu).exp()).abs() < 1e-15);
        }
        assert!(r.limit_error < 1e-4);

        let lti = PosLti::scalar(-1.0, 1.0, 1.0, 0.25);
        let mus: Vec<f64> = (0..8).map(|i| 10f64.powi(i)).collect();
        let r = regularity_probe(&lti, &mus, &[1.0]).unwrap();
        assert!(r.monotone);
        for (mu, out) in mus.iter().zip(&r.outputs) {
            assert!((out[0] - (1.0 / (mu + 1.0) + 0.25)).abs() < 1e-12);
        }
        assert!(r.limit_error < 1e-4);

        let z = regularity_probe(&lti, &mus, &[0.0]).unwrap();
        assert!(z.outputs.iter().all(|o| o[0] == 0.0));
    }

    #[test]
    fn short_horizon_feedback_is_trivial() {
        let sys = unit_loop();
        let k = DMatrix::from_element(1, 1, 5.0);
        let r = feedback_admissibility(&sys, &k, 0.9, 0.05).unwrap();
        assert_eq!(r.radius, 0.0);
        assert!(r.admissible);
        assert_eq!(r.generations, Some(1));
        let r = feedback_admissibility(&sys, &DMatrix::zeros(1, 1), 3.0, 0.05).unwrap();
        assert_eq!(r.radius, 0.0);
    }

    #[test]
    fn delay_loop_closes_in_three_generations() {
        let sys = Arc::new(unit_loop());
        let k = DMatrix::identity(1, 1);
        let (tau, dt) = (2.5, 0.05);
        let r = feedback_admissibility(sys.as_ref(), &k, tau, dt).unwrap();
        assert_eq!(r.radius, 0.0);
        assert!(r.admissible && r.inverse_positive);
        assert_eq!(r.generations, Some(3));

        let op = VolterraOperator::new(sys.as_ref(), tau, dt).unwrap();
        let times: Vec<f64> = (0..op.steps()).map(|m| m as f64 * dt).collect();
        let amp = |t: f64| if t < 0.3 { 1.0 } else if t < 0.7 { 0.25 } else { 0.0 };
        let u: Vec<DVector<f64>> = times.iter().map(|&t| DVector::from_element(1, amp(t))).collect();
        let v = op.feedback_solve(&k, &u).unwrap();

        let hist: Arc<dyn BoundaryHistory> =
            Arc::new(StepHistory::new(1, 1, vec![0.0, 0.3, 0.7], vec![vec![1.0], vec![0.25], vec![0.0]], tau).unwrap());
        let sol = closed_loop_solve(&sys, &StateField::zeros(&sys), Some(hist), tau, &[], &SolverOptions::default()).unwrap();
        let traces = sol.vertex_traces();
        for (m, &t) in times.iter().enumerate() {
            let n = traces.times.iter().position(|&s| (s - t).abs() < 1e-12).unwrap();
            assert!((traces.values[n][0] - v[m][0]).abs() < 1e-8, "t {t}");
        }
    }

    #[test]
    fn lti_blocks_match_simulation() {
        let sys = PosLti::new(
            DMatrix::from_row_slice(2, 2, &[-1.0, 0.5, 0.2, -2.0]),
            DMatrix::from_row_slice(2, 1, &[1.0, 0.3]),
            DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
            DMatrix::from_element(1, 1, 0.1),
        )
        .unwrap();
        let dt = 0.1;
        let op = VolterraOperator::new(&sys, 1.0, dt).unwrap();
        // y at (d + 1/2) dt for a pulse on [0, dt), from an exact simulation
        for d in 0..op.steps() {
            let t = (d as f64 + 0.5) * dt;
            let (grid, u) = if d == 0 {
                (vec![0.0, t], vec![DVector::from_element(1, 1.0), DVector::from_element(1, 1.0)])
            } else {
                (vec![0.0, dt, t], vec![DVector::from_element(1, 1.0), DVector::zeros(1), DVector::zeros(1)])
            };
            let y = crate::oracle::io_response(&sys, &DVector::zeros(2), &u, &grid).unwrap();
            assert!((y.last().unwrap()[0] - op.blocks[d][(0, 0)]).abs() < 1e-13, "block {d}");
        }
    }
}
