//! Scenario files: one TOML document describing a transport network, its
//! data and the tolerances of a run.
//!
//! ```toml
//! schema_version = 1
//! seed = 7
//! horizon = 3.0
//! snapshot_times = [0.0, 1.5, 3.0]
//!
//! [graph]
//! vertices = 1
//! control = [[1.0]]          # N rows, one column per input channel
//!
//! [velocity]
//! v_min = 1.0
//! v_max = 1.0
//! nodes = 1
//! rule = "midpoint"          # midpoint | trapezoid | gauss
//!
//! [[edge]]
//! tail = 0
//! head = 0
//! length = 1.0
//! weight = 1.0
//! absorption = 0.0           # or { breaks = [...], values = [...] }
//! kernel = "identity"        # or { constant = c } or { table = [[...]] }
//! initial = 1.0              # or { breaks = [...], values = [...] }
//!
//! [[input]]                  # one per control column
//! times = [0.0, 0.5]
//! values = [1.0, 0.0]        # or waveform = "sine", offset, amplitude, period
//!
//! [tolerances]
//! dt_max = 0.01
//! positivity = 1e-9
//! ```

use std::path::Path;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::Deserialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{AssumptionReport, Edge, MetricGraph};
use crate::lattice::Quadrature;
use crate::transport::{Absorption, BoundaryHistory, FnHistory, Kernel, Profile, StateField, StepHistory, TransportSystem};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    schema_version: u32,
    #[serde(default)]
    seed: u64,
    horizon: f64,
    #[serde(default)]
    snapshot_times: Vec<f64>,
    graph: RawGraph,
    velocity: RawVelocity,
    #[serde(rename = "edge")]
    edges: Vec<RawEdge>,
    #[serde(default, rename = "input")]
    inputs: Vec<RawInput>,
    #[serde(default)]
    tolerances: Tolerances,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGraph {
    vertices: usize,
    #[serde(default)]
    control: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
enum VelocityRule {
    Midpoint,
    Trapezoid,
    Gauss,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawVelocity {
    v_min: f64,
    v_max: f64,
    nodes: usize,
    #[serde(default = "default_rule")]
    rule: VelocityRule,
}

fn default_rule() -> VelocityRule {
    VelocityRule::Midpoint
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum SegmentValue {
    Uniform(f64),
    PerNode(Vec<f64>),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum RawAbsorption {
    Constant(f64),
    Table { breaks: Vec<f64>, values: Vec<SegmentValue> },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum RawKernel {
    Named(String),
    Constant { constant: f64 },
    Table { table: Vec<Vec<f64>> },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum RawProfile {
    Constant(f64),
    Table { breaks: Vec<f64>, values: Vec<f64> },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEdge {
    tail: usize,
    head: usize,
    length: f64,
    weight: f64,
    #[serde(default = "zero_absorption")]
    absorption: RawAbsorption,
    #[serde(default = "identity_kernel")]
    kernel: RawKernel,
    #[serde(default = "zero_profile")]
    initial: RawProfile,
}

fn zero_absorption() -> RawAbsorption {
    RawAbsorption::Constant(0.0)
}

fn identity_kernel() -> RawKernel {
    RawKernel::Named("identity".into())
}

fn zero_profile() -> RawProfile {
    RawProfile::Constant(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Waveform {
    Constant,
    Sine,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawInput {
    times: Option<Vec<f64>>,
    values: Option<Vec<f64>>,
    waveform: Option<Waveform>,
    #[serde(default)]
    offset: f64,
    #[serde(default = "one")]
    amplitude: f64,
    #[serde(default = "one")]
    period: f64,
}

fn one() -> f64 {
    1.0
}

/// Numerical settings of a run.
#[derive(Debug, Clone, Copy, PartialEq, Deserialize, serde::Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    /// Ceiling on the trace ledger spacing.
    pub dt_max: f64,
    /// Slack allowed below zero in positivity checks.
    pub positivity: f64,
    /// Spatial samples per edge in snapshot CSVs.
    pub samples_per_edge: usize,
    /// Probe count for admissibility estimates.
    pub probes: usize,
    /// Volterra step for feedback checks.
    pub volterra_dt: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            dt_max: 0.01,
            positivity: 1e-9,
            samples_per_edge: 33,
            probes: 32,
            volterra_dt: 0.05,
        }
    }
}

/// A validated scenario.
#[derive(Clone)]
pub struct Scenario {
    pub system: Arc<TransportSystem>,
    pub initial: StateField,
    /// One channel per control column, `None` without inputs.
    pub inputs: Option<Arc<dyn BoundaryHistory>>,
    pub horizon: f64,
    pub snapshot_times: Vec<f64>,
    pub tolerances: Tolerances,
    pub seed: u64,
    pub assumptions: AssumptionReport,
    pub warnings: Vec<String>,
    /// SHA-256 of the file bytes.
    pub hash: String,
}

pub fn parse_scenario(path: &Path) -> Result<Scenario> {
    let text = std::fs::read_to_string(path)?;
    parse_scenario_str(&text)
}

pub fn parse_scenario_str(text: &str) -> Result<Scenario> {
    let raw: RawScenario = toml::from_str(text).map_err(|e| Error::Scenario(e.to_string()))?;
    let hash = hex::encode(Sha256::digest(text.as_bytes()));
    build(raw, hash)
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Scenario(msg.into())
}

fn build(raw: RawScenario, hash: String) -> Result<Scenario> {
    if raw.schema_version != SCHEMA_VERSION {
        return Err(bad(format!("schema_version {} is not supported (expected {SCHEMA_VERSION})", raw.schema_version)));
    }
    if !(raw.horizon >= 0.0) || !raw.horizon.is_finite() {
        return Err(bad(format!("horizon must be finite and >= 0, got {}", raw.horizon)));
    }
    if let Some(t) = raw.snapshot_times.iter().find(|&&t| !(t >= 0.0) || t > raw.horizon) {
        return Err(bad(format!("snapshot time {t} outside [0, {}]", raw.horizon)));
    }

    let vq = velocity_grid(&raw.velocity)?;
    let kn = vq.len();

    let nv = raw.graph.vertices;
    let control = if raw.graph.control.is_empty() {
        DMatrix::zeros(nv, 0)
    } else {
        let cols = raw.graph.control[0].len();
        if raw.graph.control.len() != nv || raw.graph.control.iter().any(|r| r.len() != cols) {
            return Err(bad(format!("graph.control must have {nv} rows of equal length")));
        }
        DMatrix::from_fn(nv, cols, |i, l| raw.graph.control[i][l])
    };
    let edges: Vec<Edge> = raw
        .edges
        .iter()
        .map(|e| Edge {
            tail: e.tail,
            head: e.head,
            length: e.length,
            weight: e.weight,
        })
        .collect();
    let graph = MetricGraph::new(nv, edges, control).map_err(|e| bad(e.to_string()))?;

    let mut absorption = Vec::with_capacity(raw.edges.len());
    let mut kernels = Vec::with_capacity(raw.edges.len());
    for (j, e) in raw.edges.iter().enumerate() {
        absorption.push(edge_absorption(j, e, kn)?);
        kernels.push(edge_kernel(j, &e.kernel, kn)?);
    }
    let system = TransportSystem::new(graph, vq, absorption, kernels).map_err(|e| bad(e.to_string()))?;

    let profiles = raw
        .edges
        .iter()
        .enumerate()
        .map(|(j, e)| {
            let p = match &e.initial {
                RawProfile::Constant(c) => Profile::constant(e.length, *c),
                RawProfile::Table { breaks, values } => {
                    let p = Profile::piecewise_constant(breaks.clone(), values.clone()).map_err(|err| bad(format!("edge {j}: initial: {err}")))?;
                    if (p.length() - e.length).abs() > 1e-12 * e.length {
                        return Err(bad(format!("edge {j}: initial table must cover [0, {}]", e.length)));
                    }
                    p
                }
            };
            Ok(vec![p; kn])
        })
        .collect::<Result<Vec<_>>>()?;
    let initial = StateField::from_profiles(profiles);

    let n_ctrl = system.graph().n_controls();
    if raw.inputs.len() != n_ctrl {
        return Err(bad(format!("{} input channels for {n_ctrl} control columns", raw.inputs.len())));
    }
    let inputs = if n_ctrl == 0 {
        None
    } else {
        Some(input_history(&raw.inputs, kn)?)
    };

    let assumptions = system.graph().check_assumptions();
    let mut warnings = assumptions.warnings();
    if initial.min_value() < 0.0 {
        warnings.push("initial state has negative values".into());
    }
    let t = raw.tolerances;
    if !(t.dt_max > 0.0) || !(t.positivity >= 0.0) || t.samples_per_edge < 2 || !(t.volterra_dt > 0.0) {
        return Err(bad("tolerances: dt_max and volterra_dt must be positive, samples_per_edge >= 2"));
    }

    Ok(Scenario {
        system: Arc::new(system),
        initial,
        inputs,
        horizon: raw.horizon,
        snapshot_times: raw.snapshot_times,
        tolerances: t,
        seed: raw.seed,
        assumptions,
        warnings,
        hash,
    })
}

fn velocity_grid(v: &RawVelocity) -> Result<Quadrature> {
    if !(v.v_min > 0.0) {
        return Err(bad(format!("velocity.v_min must be > 0, got {}", v.v_min)));
    }
    if !(v.v_max >= v.v_min) || !v.v_max.is_finite() {
        return Err(bad(format!("velocity.v_max must be finite and >= v_min, got {}", v.v_max)));
    }
    if v.nodes == 0 {
        return Err(bad("velocity.nodes must be >= 1"));
    }
    if v.v_max == v.v_min {
        if v.nodes != 1 {
            return Err(bad("a degenerate velocity interval takes a single node"));
        }
        return Ok(Quadrature::point(v.v_min));
    }
    let q = match v.rule {
        VelocityRule::Midpoint => Quadrature::midpoint(v.v_min, v.v_max, v.nodes),
        VelocityRule::Trapezoid => Quadrature::trapezoid(v.v_min, v.v_max, v.nodes),
        VelocityRule::Gauss => Quadrature::gauss_legendre(v.v_min, v.v_max, 1, v.nodes),
    };
    q.map_err(|e| bad(format!("velocity: {e}")))
}

fn edge_absorption(j: usize, e: &RawEdge, kn: usize) -> Result<Absorption> {
    match &e.absorption {
        RawAbsorption::Constant(q) => {
            if !q.is_finite() {
                return Err(bad(format!("edge {j}: absorption must be finite")));
            }
            Ok(Absorption::constant(e.length, *q, kn))
        }
        RawAbsorption::Table { breaks, values } => {
            let rows = values
                .iter()
                .map(|s| match s {
                    SegmentValue::Uniform(q) => Ok(vec![*q; kn]),
                    SegmentValue::PerNode(r) if r.len() == kn => Ok(r.clone()),
                    SegmentValue::PerNode(r) => Err(bad(format!("edge {j}: absorption row has {} entries, grid has {kn}", r.len()))),
                })
                .collect::<Result<Vec<_>>>()?;
            Absorption::table(breaks.clone(), rows).map_err(|err| bad(format!("edge {j}: {err}")))
        }
    }
}

fn edge_kernel(j: usize, k: &RawKernel, kn: usize) -> Result<Kernel> {
    match k {
        RawKernel::Named(n) if n == "identity" => Ok(Kernel::Identity),
        RawKernel::Named(n) => Err(bad(format!("edge {j}: unknown kernel {n:?}"))),
        RawKernel::Constant { constant } => Ok(Kernel::constant(*constant, kn)),
        RawKernel::Table { table } => {
            if table.len() != kn || table.iter().any(|r| r.len() != kn) {
                return Err(bad(format!("edge {j}: kernel table must be {kn}x{kn}")));
            }
            Ok(Kernel::Matrix(DMatrix::from_fn(kn, kn, |a, b| table[a][b])))
        }
    }
}

fn input_history(inputs: &[RawInput], kn: usize) -> Result<Arc<dyn BoundaryHistory>> {
    let n = inputs.len();
    if inputs.iter().all(|i| i.waveform.is_none()) {
        // merge the step tables onto common breakpoints
        let mut times: Vec<f64> = Vec::new();
        for (c, inp) in inputs.iter().enumerate() {
            let (t, v) = match (&inp.times, &inp.values) {
                (Some(t), Some(v)) if t.len() == v.len() && !t.is_empty() => (t, v),
                _ => return Err(bad(format!("input {c}: step table needs matching times and values"))),
            };
            if t[0] != 0.0 || t.windows(2).any(|w| !(w[1] > w[0])) {
                return Err(bad(format!("input {c}: times must start at 0 and increase")));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(bad(format!("input {c}: values must be finite")));
            }
            times.extend(t.iter().copied());
        }
        times.sort_by(|a, b| a.partial_cmp(b).unwrap());
        times.dedup();
        let values = times
            .iter()
            .map(|&s| {
                let mut row = Vec::with_capacity(n * kn);
                for inp in inputs {
                    let (t, v) = (inp.times.as_ref().unwrap(), inp.values.as_ref().unwrap());
                    let i = t.partition_point(|&x| x <= s) - 1;
                    row.extend(std::iter::repeat_n(v[i], kn));
                }
                row
            })
            .collect();
        return Ok(Arc::new(StepHistory::new(n, kn, times, values, f64::INFINITY)?));
    }
    let mut waves = Vec::with_capacity(n);
    let mut breaks = Vec::new();
    for (c, inp) in inputs.iter().enumerate() {
        match inp.waveform {
            Some(w) => {
                if inp.times.is_some() || inp.values.is_some() {
                    return Err(bad(format!("input {c}: give either a waveform or a step table")));
                }
                if !(inp.period > 0.0) {
                    return Err(bad(format!("input {c}: period must be positive")));
                }
                waves.push((w, inp.offset, inp.amplitude, inp.period, None));
            }
            None => {
                let (t, v) = match (&inp.times, &inp.values) {
                    (Some(t), Some(v)) if t.len() == v.len() && !t.is_empty() && t[0] == 0.0 => (t.clone(), v.clone()),
                    _ => return Err(bad(format!("input {c}: step table needs matching times and values from 0"))),
                };
                breaks.extend(t[1..].iter().copied());
                waves.push((Waveform::Constant, 0.0, 0.0, 1.0, Some((t, v))));
            }
        }
    }
    breaks.sort_by(|a, b| a.partial_cmp(b).unwrap());
    breaks.dedup();
    let f = move |c: usize, _k: usize, t: f64| -> f64 {
        let (w, offset, amp, period, table) = &waves[c];
        if let Some((ts, vs)) = table {
            return vs[ts.partition_point(|&x| x <= t).saturating_sub(1)];
        }
        match w {
            Waveform::Constant => offset + amp,
            Waveform::Sine => offset + amp * (2.0 * std::f64::consts::PI * t / period).sin(),
        }
    };
    Ok(Arc::new(FnHistory::new(n, kn, f, breaks, f64::INFINITY)))
}
