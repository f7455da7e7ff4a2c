//! Command-line front end.
//!
//! Every run writes `report.json` into the output directory; `simulate` and
//! `spectrum` add CSV files. The exit status is 0 when every gate passes, 1
//! when a gate fails and 2 on errors.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::lattice::spectral_radius;
use crate::oracle::{feedback_compose, neumann_resolvent, positivity_classify, transfer, PosLti};
use crate::scenario::{parse_scenario, Scenario};
use crate::transport::{
    closed_loop_resolvent, closed_loop_solve, dirichlet_apply, resolvent_apply, semigroup_apply, transfer_operator,
    BoundaryVector, SolverOptions,
};
use crate::wellposedness::{
    control_admissibility, feedback_admissibility, observation_admissibility, zero_class_scan, ProbeConfig, SystemHandle,
};

pub const REPORT_SCHEMA: u32 = 1;
pub const CSV_SCHEMA: &str = "posflow-csv v1";

#[derive(Debug, Parser)]
#[command(name = "posflow", version, about = "Positive boundary-controlled transport networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve the closed loop and write snapshots and vertex traces.
    Simulate(Flags),
    /// Check assumptions, the characteristic equation and positivity.
    Check(Flags),
    /// Estimate admissibility constants and the zero-class exponent.
    Admissibility(Flags),
    /// Sweep the transfer operator over a mu grid.
    Spectrum(Flags),
    /// Run the finite-dimensional property battery.
    Oracle(Flags),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Simulate(_) => "simulate",
            Command::Check(_) => "check",
            Command::Admissibility(_) => "admissibility",
            Command::Spectrum(_) => "spectrum",
            Command::Oracle(_) => "oracle",
        }
    }

    fn flags(&self) -> &Flags {
        match self {
            Command::Simulate(f) | Command::Check(f) | Command::Admissibility(f) | Command::Spectrum(f) | Command::Oracle(f) => f,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct Flags {
    #[arg(long)]
    pub scenario: PathBuf,
    /// Output directory (created if missing).
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    /// `a:b:n`, n evenly spaced values from a to b.
    #[arg(long)]
    pub mu_grid: Option<MuGrid>,
    /// Comma-separated tau values.
    #[arg(long, value_delimiter = ',')]
    pub tau_grid: Option<Vec<f64>>,
    #[arg(long)]
    pub p: Option<f64>,
    /// Overrides the scenario seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MuGrid(pub Vec<f64>);

impl FromStr for MuGrid {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() != 3 {
            return Err(format!("expected a:b:n, got {s:?}"));
        }
        let a: f64 = parts[0].parse().map_err(|e| format!("{e}"))?;
        let b: f64 = parts[1].parse().map_err(|e| format!("{e}"))?;
        let n: usize = parts[2].parse().map_err(|e| format!("{e}"))?;
        if n == 0 || !(b >= a) || (n == 1 && b != a) {
            return Err(format!("bad mu grid {s:?}"));
        }
        Ok(MuGrid(linspace(a, b, n)))
    }
}

fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![a];
    }
    (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Gate {
    pub name: String,
    pub pass: bool,
    pub reason: String,
}

impl Gate {
    fn new(name: &str, pass: bool, reason: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            pass,
            reason: reason.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub schema_version: u32,
    pub command: String,
    pub scenario_hash: String,
    pub seed: u64,
    pub warnings: Vec<String>,
    pub gates: Vec<Gate>,
    pub metrics: Map<String, Value>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.gates.iter().all(|g| g.pass)
    }
}

/// Parses `args`, runs the command and returns the exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli.command) {
        Ok(report) => {
            if report.passed() {
                0
            } else {
                for g in report.gates.iter().filter(|g| !g.pass) {
                    eprintln!("gate failed: {}: {}", g.name, g.reason);
                }
                1
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

/// Runs one command, writes its artifacts and returns the report.
pub fn run(cmd: &Command) -> Result<Report> {
    let flags = cmd.flags();
    let scenario = parse_scenario(&flags.scenario)?;
    let seed = flags.seed.unwrap_or(scenario.seed);
    fs::create_dir_all(&flags.out)?;
    let mut ctx = Context {
        scenario: &scenario,
        flags,
        seed,
        gates: Vec::new(),
        metrics: Map::new(),
    };
    match cmd {
        Command::Simulate(_) => ctx.simulate()?,
        Command::Check(_) => ctx.check()?,
        Command::Admissibility(_) => ctx.admissibility()?,
        Command::Spectrum(_) => ctx.spectrum()?,
        Command::Oracle(_) => ctx.oracle()?,
    }
    let report = Report {
        schema_version: REPORT_SCHEMA,
        command: cmd.name().into(),
        scenario_hash: scenario.hash.clone(),
        seed,
        warnings: scenario.warnings.clone(),
        gates: ctx.gates,
        metrics: ctx.metrics,
    };
    let mut text = serde_json::to_string_pretty(&report).map_err(|e| Error::Scenario(e.to_string()))?;
    text.push('\n');
    fs::write(flags.out.join("report.json"), text)?;
    Ok(report)
}

struct Context<'a> {
    scenario: &'a Scenario,
    flags: &'a Flags,
    seed: u64,
    gates: Vec<Gate>,
    metrics: Map<String, Value>,
}

/// 17 significant digits.
fn num(x: f64) -> String {
    format!("{x:.16e}")
}

fn write_csv(path: &Path, kind: &str, header: &str, rows: &str) -> Result<()> {
    let mut s = String::with_capacity(rows.len() + 64);
    let _ = writeln!(s, "# {CSV_SCHEMA} {kind}");
    let _ = writeln!(s, "{header}");
    s.push_str(rows);
    fs::write(path, s)?;
    Ok(())
}

impl Context<'_> {
    fn metric(&mut self, key: &str, v: impl Serialize) {
        self.metrics.insert(key.into(), serde_json::to_value(v).unwrap_or(Value::Null));
    }

    fn mu_grid(&self) -> Vec<f64> {
        match &self.flags.mu_grid {
            Some(g) => g.0.clone(),
            None => {
                let q = self.scenario.system.q_tilde();
                linspace(q + 0.5, q + 20.0, 40)
            }
        }
    }

    fn simulate(&mut self) -> Result<()> {
        let sc = self.scenario;
        let sys = &sc.system;
        let tol = sc.tolerances;
        let opts = SolverOptions {
            dt_max: tol.dt_max,
            positivity: true,
            tol: tol.positivity,
            ..SolverOptions::default()
        };
        let times = if sc.snapshot_times.is_empty() {
            vec![0.0, sc.horizon]
        } else {
            sc.snapshot_times.clone()
        };
        let sol = match closed_loop_solve(sys, &sc.initial, sc.inputs.clone(), sc.horizon, &times, &opts) {
            Ok(s) => s,
            Err(Error::Positivity(msg)) => {
                self.gates.push(Gate::new("positivity", false, msg));
                return Ok(());
            }
            Err(e) => return Err(e),
        };

        let n = tol.samples_per_edge;
        let mut rows = String::new();
        let mut mass_rows = String::new();
        let mut min_value = f64::INFINITY;
        let mut masses = Vec::with_capacity(sol.snapshots.len());
        for (t, z) in &sol.snapshots {
            for j in 0..sys.n_edges() {
                let l = sys.length(j);
                for k in 0..sys.n_nodes() {
                    let v = sys.velocity(k);
                    for i in 0..n {
                        let x = l * i as f64 / (n - 1) as f64;
                        let val = z.eval(j, k, x);
                        min_value = min_value.min(val);
                        let _ = writeln!(rows, "{},{j},{},{},{}", num(*t), num(x), num(v), num(val));
                    }
                }
            }
            min_value = min_value.min(z.min_value());
            let m = z.mass(sys);
            masses.push(m);
            let _ = writeln!(mass_rows, "{},{}", num(*t), num(m));
        }
        write_csv(&self.flags.out.join("snapshots.csv"), "snapshots", "time,edge,x,v,value", &rows)?;
        write_csv(&self.flags.out.join("mass.csv"), "mass", "time,mass", &mass_rows)?;

        let traces = sol.vertex_traces();
        let mut trows = String::new();
        for (t, row) in traces.times.iter().zip(&traces.values) {
            for i in 0..traces.n_vertices {
                for k in 0..traces.n_nodes {
                    let _ = writeln!(trows, "{},{i},{},{}", num(*t), num(sys.velocity(k)), num(row[i * traces.n_nodes + k]));
                }
            }
        }
        write_csv(&self.flags.out.join("traces.csv"), "traces", "time,vertex,v,value", &trows)?;

        let m0 = sc.initial.mass(sys);
        let drift = masses.iter().map(|m| (m - m0).abs()).fold(0.0, f64::max) / m0.abs().max(f64::MIN_POSITIVE);
        if min_value.is_infinite() {
            min_value = 0.0;
        }
        self.metric("min_value", min_value.min(sol.min_trace));
        self.metric("initial_mass", m0);
        self.metric("snapshot_masses", &masses);
        self.metric("relative_mass_drift", drift);
        self.metric("generations", sol.generations);
        self.metric("ledger_stamps", sol.ledger().stamps().len());
        let floor = -tol.positivity * (1.0 + sc.initial.max_abs());
        let ok = min_value >= floor && sol.min_trace >= floor;
        self.gates.push(Gate::new(
            "positivity",
            ok,
            format!("minimum sampled value {:.3e}", min_value.min(sol.min_trace)),
        ));
        Ok(())
    }

    fn check(&mut self) -> Result<()> {
        let sc = self.scenario;
        let sys = &sc.system;
        let a = &sc.assumptions;
        self.gates.push(Gate::new("A1", true, format!("v_min = {}", sys.vgrid().bounds().0)));
        self.gates.push(Gate::new(
            "A2",
            a.a2_pass,
            format!("vertices without outgoing edge: {:?}", a.a2_failing_vertices),
        ));
        self.gates.push(Gate::new("A3", a.a3_pass, format!("weight residuals {:?}", a.a3_residuals)));
        self.metric("assumptions", a);
        self.metric("q_tilde", sys.q_tilde());
        self.metric("kappa", sys.kappa());
        self.metric("min_transit", sys.min_transit());

        let mus = self.mu_grid();
        let mut radii = Vec::with_capacity(mus.len());
        for &mu in &mus {
            radii.push(spectral_radius(&transfer_operator(sys, mu), 1e-12, 100_000)?.radius);
        }
        let first_ok = mus.iter().zip(&radii).find(|(_, r)| **r < 1.0).map(|(m, _)| *m);
        self.gates.push(Gate::new(
            "characteristic gate",
            first_ok.is_some(),
            match first_ok {
                Some(mu) => format!("r(Gamma D_mu) < 1 from mu = {mu}"),
                None => format!(
                    "r(Gamma D_mu) >= 1 for all sampled mu in [{}, {}]",
                    mus.first().unwrap_or(&f64::NAN),
                    mus.last().unwrap_or(&f64::NAN)
                ),
            },
        ));
        self.metric("mu_grid", &mus);
        self.metric("transfer_radius", &radii);

        // positivity spot checks on seeded positive probes
        let tol = sc.tolerances.positivity;
        let probes = ProbeConfig::positive(4, self.seed);
        let mu = first_ok.unwrap_or(mus[0]).max(sys.q_tilde() + 0.5);
        let t = 0.37 * sys.min_transit();
        let mut worst = f64::INFINITY;
        for i in 0..probes.count {
            let f = sys.probe_state(&probes, i);
            let scale = f.max_abs().max(1.0);
            worst = worst.min(semigroup_apply(sys, &f, t)?.min_value() / scale);
            worst = worst.min(resolvent_apply(sys, &f, mu)?.min_value() / scale);
            if first_ok.is_some() {
                worst = worst.min(closed_loop_resolvent(sys, &f, mu)?.min_value() / scale);
            }
        }
        let g = BoundaryVector::from_values(sys.n_vertices(), sys.n_nodes(), vec![1.0; sys.boundary_dim()])?;
        worst = worst.min(dirichlet_apply(sys, &g, mu)?.min_value());
        self.gates.push(Gate::new("positivity", worst >= -tol, format!("minimum scaled value {worst:.3e}")));
        self.metric("positivity_min", worst);
        Ok(())
    }

    fn admissibility(&mut self) -> Result<()> {
        let sc = self.scenario;
        let sys = sc.system.as_ref();
        let p = self.flags.p.unwrap_or(2.0);
        let taus = self.flags.tau_grid.clone().unwrap_or_else(|| vec![0.4, 0.2, 0.1, 0.05, 0.025]);
        if taus.is_empty() || taus.iter().any(|t| !(*t > 0.0)) {
            return Err(Error::InvalidArgument("tau grid needs positive values".into()));
        }
        let count = sc.tolerances.probes;
        let pos = ProbeConfig::positive(count, self.seed);
        let tau_max = taus.iter().cloned().fold(0.0, f64::max);

        let kappa = taus
            .iter()
            .map(|&tau| control_admissibility(sys, tau, p, &pos))
            .collect::<Result<Vec<_>>>()?;
        let signed = control_admissibility(sys, tau_max, p, &ProbeConfig::signed(count, self.seed))?;
        let best_pos = kappa
            .iter()
            .find(|r| r.tau_or_alpha == tau_max)
            .map_or(0.0, |r| r.constant_estimate);
        self.gates.push(Gate::new(
            "probes",
            kappa.iter().all(|r| !r.degenerate),
            "every tau has a probe with positive norm",
        ));
        self.gates.push(Gate::new(
            "signed dominated",
            signed.constant_estimate <= best_pos + 1e-9,
            format!("signed {:.6e} vs positive {:.6e}", signed.constant_estimate, best_pos),
        ));
        self.metric("control", &kappa);
        self.metric("control_signed", &signed);

        if p > 1.0 {
            let scan = zero_class_scan(sys, p, &taus, &pos)?;
            if let Some(fit) = &scan.zero_class_fit {
                self.gates.push(Gate::new(
                    "zero class",
                    fit.exponent >= fit.predicted - 0.1,
                    format!("fitted exponent {:.4} (bound exponent {:.4})", fit.exponent, fit.predicted),
                ));
            }
            self.metric("zero_class", &scan);
        }
        // positive observations on an L¹ state space are L¹-admissible; p > 1 is not expected to be bounded
        let obs = observation_admissibility(sys, tau_max, 1.0, &pos)?;
        self.metric("observation_l1", &obs);

        let k = DMatrix::<f64>::identity(sys.boundary_dim(), sys.boundary_dim());
        let horizon = if sc.horizon > 0.0 { sc.horizon } else { tau_max };
        let fb = feedback_admissibility(sys, &k, horizon, sc.tolerances.volterra_dt)?;
        self.gates.push(Gate::new(
            "feedback",
            fb.admissible && fb.inverse_positive,
            format!("r(K F) = {:.3e} on [0, {horizon}]", fb.radius),
        ));
        self.metric("feedback", &fb);
        Ok(())
    }

    fn spectrum(&mut self) -> Result<()> {
        let sys = &self.scenario.system;
        let mus = self.mu_grid();
        let mut rows = String::new();
        let mut prev: Option<DMatrix<f64>> = None;
        let mut monotone = true;
        let mut nonneg = true;
        let mut radii = Vec::with_capacity(mus.len());
        for &mu in &mus {
            let h = transfer_operator(sys, mu);
            let r = spectral_radius(&h, 1e-12, 100_000)?.radius;
            let max = h.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let min = h.iter().cloned().fold(f64::INFINITY, f64::min);
            nonneg &= min >= 0.0;
            if let Some(p) = &prev {
                monotone &= h.iter().zip(p.iter()).all(|(a, b)| *a <= *b * (1.0 + 1e-12));
            }
            let _ = writeln!(rows, "{},{},{},{}", num(mu), num(r), num(max), num(min));
            radii.push(r);
            prev = Some(h);
        }
        write_csv(&self.flags.out.join("spectrum.csv"), "spectrum", "mu,radius,max_entry,min_entry", &rows)?;
        self.gates.push(Gate::new("positive", nonneg, "entries of H(mu) are nonnegative"));
        self.gates.push(Gate::new("monotone", monotone, "H(mu) is entrywise nonincreasing in mu"));
        self.metric("mu_grid", &mus);
        self.metric("transfer_radius", &radii);
        Ok(())
    }

    fn oracle(&mut self) -> Result<()> {
        let count = self.scenario.tolerances.probes.max(1);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let grid: Vec<f64> = (0..=40).map(|i| i as f64 * 0.1).collect();
        let (mut internal, mut external) = (true, true);
        let (mut neumann_err, mut feedback_err) = (0.0f64, 0.0f64);
        let mut monotone = true;
        let mut refused = true;
        for _ in 0..count {
            let n = rng.gen_range(1..=4);
            let m = rng.gen_range(1..=2);
            let p = rng.gen_range(1..=2);
            let sys = random_positive(&mut rng, n, m, p);
            let pos = positivity_classify(&sys, &grid);
            internal &= pos.internal;
            external &= pos.external;

            // R(μ, A) by Neumann series over the diagonal/off-diagonal split
            let diag = DMatrix::from_diagonal(&sys.a.diagonal());
            let off = &sys.a - &diag;
            let mu = sys.abscissa() + 1.0;
            let ns = neumann_resolvent(&diag, &off, mu, 400)?;
            let direct = (DMatrix::<f64>::identity(n, n) * mu - &sys.a).try_inverse().ok_or(Error::Singular { mu, eigenvalue: mu })?;
            neumann_err = neumann_err.max((&ns.resolvent - &direct).amax() / direct.amax().max(1e-300));

            let mus: Vec<f64> = (0..8).map(|i| mu + i as f64).collect();
            let hs = mus.iter().map(|&s| transfer(&sys, s)).collect::<Result<Vec<_>>>()?;
            monotone &= hs.windows(2).all(|w| w[1].iter().zip(w[0].iter()).all(|(b, a)| *b <= *a * (1.0 + 1e-12)));

            // closed-loop transfer against H (I − K H)^{-1}
            let mut k = DMatrix::from_fn(m, p, |_, _| rng.gen::<f64>());
            let r_kd = spectral_radius(&(&k * &sys.d), 1e-13, 100_000)?.radius;
            if r_kd > 0.0 {
                k *= 0.5 / r_kd;
            }
            let fb = feedback_compose(&sys, &k)?;
            let cl = fb.closed_loop().ok_or(Error::Divergent { radius: fb.r_kd })?;
            let s = cl.abscissa().max(sys.abscissa()) + 1.0;
            let h = transfer(&sys, s)?;
            let loop_h = &h * (DMatrix::<f64>::identity(m, m) - &k * &h).try_inverse().ok_or(Error::Divergent { radius: 1.0 })?;
            let err = (transfer(&cl, s)? - &loop_h).amax() / loop_h.amax().max(1e-300);
            feedback_err = feedback_err.max(err);

            let r = spectral_radius(&(&k * &sys.d), 1e-13, 100_000)?.radius;
            if r > 0.0 {
                let big = &k * (1.5 / r);
                refused &= !feedback_compose(&sys, &big)?.admissible;
            }
        }
        self.gates.push(Gate::new("internal positivity", internal, "random Metzler systems"));
        self.gates.push(Gate::new("external positivity", external, "impulse responses are nonnegative"));
        self.gates.push(Gate::new("neumann", neumann_err < 1e-10, format!("relative error {neumann_err:.3e}")));
        self.gates.push(Gate::new("transfer monotone", monotone, "H(mu) nonincreasing above the abscissa"));
        self.gates.push(Gate::new("feedback", feedback_err < 1e-9, format!("relative error {feedback_err:.3e}")));
        self.gates.push(Gate::new("refusal", refused, "r(KD) >= 1 is refused"));
        self.metric("systems", count);
        self.metric(
            "errors",
            json!({ "neumann": neumann_err, "feedback": feedback_err }),
        );
        Ok(())
    }
}

/// Random positive system: Metzler `A` with a dominant negative diagonal,
/// `B, C >= 0`, `D > 0`.
pub fn random_positive(rng: &mut impl Rng, n: usize, m: usize, p: usize) -> PosLti {
    let mut a = DMatrix::from_fn(n, n, |_, _| rng.gen::<f64>());
    for i in 0..n {
        a[(i, i)] = -0.5 - 3.0 * rng.gen::<f64>();
    }
    let b = DMatrix::from_fn(n, m, |_, _| rng.gen::<f64>());
    let c = DMatrix::from_fn(p, n, |_, _| rng.gen::<f64>());
    let d = DMatrix::from_fn(p, m, |_, _| 0.05 + 0.25 * rng.gen::<f64>());
    PosLti::new(a, b, c, d).expect("dimensions agree")
}
