use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// One-sided limit selector at a jump.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
}

/// Time offset used for left limits of closure-backed histories.
pub const LEFT_EPS: f64 = 1e-12;

/// Time history of a velocity-sampled vector signal: `components` channels
/// (vertices or control channels), each sampled on `nodes` velocity nodes.
/// Values are right-continuous in time.
pub trait BoundaryHistory: Send + Sync {
    fn components(&self) -> usize;
    fn nodes(&self) -> usize;
    fn eval(&self, comp: usize, node: usize, t: f64) -> f64;

    fn eval_left(&self, comp: usize, node: usize, t: f64) -> f64 {
        self.eval(comp, node, (t - LEFT_EPS * (1.0 + t.abs())).max(0.0))
    }

    fn eval_side(&self, comp: usize, node: usize, t: f64, side: Side) -> f64 {
        match side {
            Side::Left => self.eval_left(comp, node, t),
            Side::Right => self.eval(comp, node, t),
        }
    }

    /// End of the interval on which the history is defined.
    fn horizon(&self) -> f64 {
        f64::INFINITY
    }

    /// Times where the history may jump or kink.
    fn breakpoints(&self) -> Vec<f64> {
        Vec::new()
    }
}

/// Piecewise-constant history: `values[m]` holds on `[times[m], times[m+1])`,
/// the last value up to the horizon. Entry `c · nodes + k` of a value row is
/// channel `c` at node `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepHistory {
    components: usize,
    nodes: usize,
    times: Vec<f64>,
    values: Vec<Vec<f64>>,
    horizon: f64,
}

impl StepHistory {
    pub fn new(components: usize, nodes: usize, times: Vec<f64>, values: Vec<Vec<f64>>, horizon: f64) -> Result<Self> {
        if times.is_empty() || times.len() != values.len() {
            return Err(Error::Shape(format!("{} step times for {} value rows", times.len(), values.len())));
        }
        if times[0] != 0.0 || times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidArgument("step times must start at 0 and increase".into()));
        }
        if values.iter().any(|r| r.len() != components * nodes) {
            return Err(Error::Shape(format!("step rows must have {} entries", components * nodes)));
        }
        if !(horizon >= *times.last().unwrap()) {
            return Err(Error::InvalidArgument("horizon precedes the last step".into()));
        }
        Ok(Self {
            components,
            nodes,
            times,
            values,
            horizon,
        })
    }

    pub fn constant(components: usize, nodes: usize, value: f64) -> Self {
        Self::new(components, nodes, vec![0.0], vec![vec![value; components * nodes]], f64::INFINITY)
            .expect("constant history is valid")
    }

    pub fn zeros(components: usize, nodes: usize) -> Self {
        Self::constant(components, nodes, 0.0)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    fn index(&self, t: f64) -> usize {
        self.times.partition_point(|&s| s <= t).saturating_sub(1)
    }

    fn index_left(&self, t: f64) -> usize {
        self.times.partition_point(|&s| s < t).saturating_sub(1)
    }
}

impl BoundaryHistory for StepHistory {
    fn components(&self) -> usize {
        self.components
    }

    fn nodes(&self) -> usize {
        self.nodes
    }

    fn eval(&self, comp: usize, node: usize, t: f64) -> f64 {
        self.values[self.index(t)][comp * self.nodes + node]
    }

    fn eval_left(&self, comp: usize, node: usize, t: f64) -> f64 {
        self.values[self.index_left(t)][comp * self.nodes + node]
    }

    fn horizon(&self) -> f64 {
        self.horizon
    }

    fn breakpoints(&self) -> Vec<f64> {
        self.times[1..].to_vec()
    }
}

type HistoryFn = Arc<dyn Fn(usize, usize, f64) -> f64 + Send + Sync>;

/// History given by a closure `f(comp, node, t)`.
#[derive(Clone)]
pub struct FnHistory {
    components: usize,
    nodes: usize,
    f: HistoryFn,
    breaks: Vec<f64>,
    horizon: f64,
}

impl fmt::Debug for FnHistory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FnHistory")
            .field("components", &self.components)
            .field("nodes", &self.nodes)
            .field("breaks", &self.breaks)
            .finish()
    }
}

impl FnHistory {
    pub fn new(
        components: usize,
        nodes: usize,
        f: impl Fn(usize, usize, f64) -> f64 + Send + Sync + 'static,
        breaks: Vec<f64>,
        horizon: f64,
    ) -> Self {
        Self {
            components,
            nodes,
            f: Arc::new(f),
            breaks,
            horizon,
        }
    }
}

impl BoundaryHistory for FnHistory {
    fn components(&self) -> usize {
        self.components
    }

    fn nodes(&self) -> usize {
        self.nodes
    }

    fn eval(&self, comp: usize, node: usize, t: f64) -> f64 {
        (self.f)(comp, node, t)
    }

    fn horizon(&self) -> f64 {
        self.horizon
    }

    fn breakpoints(&self) -> Vec<f64> {
        self.breaks.clone()
    }
}

/// Control channels routed to vertices through the gains `b_il`:
/// `(K u)_i = Σ_l b_il u_l`.
pub struct Routed {
    gains: DMatrix<f64>,
    inner: Arc<dyn BoundaryHistory>,
}

impl Routed {
    pub fn new(gains: DMatrix<f64>, inner: Arc<dyn BoundaryHistory>) -> Result<Self> {
        if gains.ncols() != inner.components() {
            return Err(Error::Shape(format!(
                "control matrix has {} columns, input has {} channels",
                gains.ncols(),
                inner.components()
            )));
        }
        Ok(Self { gains, inner })
    }
}

impl BoundaryHistory for Routed {
    fn components(&self) -> usize {
        self.gains.nrows()
    }

    fn nodes(&self) -> usize {
        self.inner.nodes()
    }

    fn eval(&self, comp: usize, node: usize, t: f64) -> f64 {
        (0..self.gains.ncols())
            .filter(|&l| self.gains[(comp, l)] != 0.0)
            .map(|l| self.gains[(comp, l)] * self.inner.eval(l, node, t))
            .sum()
    }

    fn eval_left(&self, comp: usize, node: usize, t: f64) -> f64 {
        (0..self.gains.ncols())
            .filter(|&l| self.gains[(comp, l)] != 0.0)
            .map(|l| self.gains[(comp, l)] * self.inner.eval_left(l, node, t))
            .sum()
    }

    fn horizon(&self) -> f64 {
        self.inner.horizon()
    }

    fn breakpoints(&self) -> Vec<f64> {
        self.inner.breakpoints()
    }
}

/// Boundary values sampled at given times; `values[n][i · K + k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundarySignal {
    pub n_vertices: usize,
    pub n_nodes: usize,
    pub times: Vec<f64>,
    pub values: Vec<Vec<f64>>,
}

impl BoundarySignal {
    pub fn max_abs(&self) -> f64 {
        self.values.iter().flatten().fold(0.0, |m, x| m.max(x.abs()))
    }
}
