//! Finite directed metric graphs with boundary weights.
//!
//! Edge `j` is the interval `[0, l_j]`; material enters at `x = l_j` from the
//! tail vertex and leaves at `x = 0` into the head vertex. The weight `w_j` is
//! the share of the tail vertex's outflow routed into edge `j`, i.e. the entry
//! `w_{tail(j), j}` of the weighted outgoing incidence matrix.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};

/// Tolerance on the Kirchhoff row sums.
pub const KIRCHHOFF_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Edge {
    pub tail: usize,
    pub head: usize,
    pub length: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricGraph {
    n_vertices: usize,
    edges: Vec<Edge>,
    /// N x n matrix of control gains `b_il`.
    control: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphMatrices {
    pub i_out: DMatrix<f64>,
    pub i_in: DMatrix<f64>,
    pub i_w_out: DMatrix<f64>,
    pub adjacency: DMatrix<f64>,
}

impl GraphMatrices {
    /// Signed incidence `I_out − I_in`.
    pub fn incidence(&self) -> DMatrix<f64> {
        &self.i_out - &self.i_in
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssumptionReport {
    /// Every vertex has an outgoing edge.
    pub a2_pass: bool,
    pub a2_failing_vertices: Vec<usize>,
    /// Outgoing weights sum to one at every vertex.
    pub a3_pass: bool,
    /// `1 − Σ_j w_ij` per vertex.
    pub a3_residuals: Vec<f64>,
    /// `M >= N >= n`.
    pub size_pass: bool,
    /// Column sums of the adjacency matrix; reported when A3 holds.
    pub column_sums: Option<Vec<f64>>,
    pub column_stochastic: Option<bool>,
}

impl AssumptionReport {
    pub fn warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        if !self.a2_pass {
            w.push(format!("A2: vertices without outgoing edge: {:?}", self.a2_failing_vertices));
        }
        if !self.a3_pass {
            let bad: Vec<String> = self
                .a3_residuals
                .iter()
                .enumerate()
                .filter(|(_, r)| r.abs() > KIRCHHOFF_TOL)
                .map(|(i, r)| format!("vertex {i}: residual {r:.3e}"))
                .collect();
            w.push(format!("A3: weights do not sum to 1 ({})", bad.join(", ")));
        }
        if !self.size_pass {
            w.push("size: expected edges >= vertices >= controls".into());
        }
        w
    }
}

impl MetricGraph {
    pub fn new(n_vertices: usize, edges: Vec<Edge>, control: DMatrix<f64>) -> Result<Self> {
        if n_vertices == 0 {
            return Err(Error::Graph("graph needs at least one vertex".into()));
        }
        if edges.is_empty() {
            return Err(Error::Graph("graph needs at least one edge".into()));
        }
        for (j, e) in edges.iter().enumerate() {
            if e.tail >= n_vertices || e.head >= n_vertices {
                return Err(Error::Graph(format!(
                    "edge {j}: endpoint ({}, {}) out of range for {n_vertices} vertices",
                    e.tail, e.head
                )));
            }
            if !(e.length > 0.0) || !e.length.is_finite() {
                return Err(Error::Graph(format!("edge {j}: length must be positive, got {}", e.length)));
            }
            if !(0.0..=1.0).contains(&e.weight) {
                return Err(Error::Graph(format!("edge {j}: weight must lie in [0, 1], got {}", e.weight)));
            }
        }
        if control.nrows() != n_vertices {
            return Err(Error::Graph(format!(
                "control matrix has {} rows, expected {n_vertices}",
                control.nrows()
            )));
        }
        if control.iter().any(|&b| !(b >= 0.0)) {
            return Err(Error::Graph("control gains must be nonnegative".into()));
        }
        Ok(Self {
            n_vertices,
            edges,
            control,
        })
    }

    /// Graph without control channels.
    pub fn uncontrolled(n_vertices: usize, edges: Vec<Edge>) -> Result<Self> {
        Self::new(n_vertices, edges, DMatrix::zeros(n_vertices, 0))
    }

    /// One vertex with a single loop edge of length `length` and weight 1.
    pub fn unit_loop(length: f64) -> Self {
        Self::new(
            1,
            vec![Edge {
                tail: 0,
                head: 0,
                length,
                weight: 1.0,
            }],
            DMatrix::identity(1, 1),
        )
        .expect("loop graph is valid")
    }

    pub fn with_control(mut self, control: DMatrix<f64>) -> Result<Self> {
        if control.nrows() != self.n_vertices {
            return Err(Error::Graph("control matrix row count must equal vertex count".into()));
        }
        self.control = control;
        Ok(self)
    }

    pub fn n_vertices(&self) -> usize {
        self.n_vertices
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn n_controls(&self) -> usize {
        self.control.ncols()
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn edge(&self, j: usize) -> &Edge {
        &self.edges[j]
    }

    pub fn control(&self) -> &DMatrix<f64> {
        &self.control
    }

    pub fn min_length(&self) -> f64 {
        self.edges.iter().map(|e| e.length).fold(f64::INFINITY, f64::min)
    }

    pub fn max_length(&self) -> f64 {
        self.edges.iter().map(|e| e.length).fold(0.0, f64::max)
    }

    /// Edges leaving vertex `i`.
    pub fn outgoing(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.edges.iter().enumerate().filter(move |(_, e)| e.tail == i).map(|(j, _)| j)
    }

    /// Edges entering vertex `i`.
    pub fn incoming(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.edges.iter().enumerate().filter(move |(_, e)| e.head == i).map(|(j, _)| j)
    }

    pub fn build_matrices(&self) -> GraphMatrices {
        let (n, m) = (self.n_vertices, self.edges.len());
        let mut i_out = DMatrix::zeros(n, m);
        let mut i_in = DMatrix::zeros(n, m);
        let mut i_w_out = DMatrix::zeros(n, m);
        for (j, e) in self.edges.iter().enumerate() {
            i_out[(e.tail, j)] = 1.0;
            i_in[(e.head, j)] = 1.0;
            i_w_out[(e.tail, j)] = e.weight;
        }
        let adjacency = &i_in * i_w_out.transpose();
        GraphMatrices {
            i_out,
            i_in,
            i_w_out,
            adjacency,
        }
    }

    pub fn check_assumptions(&self) -> AssumptionReport {
        let mats = self.build_matrices();
        let n = self.n_vertices;
        let a2_failing_vertices: Vec<usize> = (0..n).filter(|&i| self.outgoing(i).next().is_none()).collect();
        let a3_residuals: Vec<f64> = (0..n).map(|i| 1.0 - mats.i_w_out.row(i).sum()).collect();
        let a3_pass = a3_residuals.iter().all(|r| r.abs() <= KIRCHHOFF_TOL);
        let (column_sums, column_stochastic) = if a3_pass {
            let sums: Vec<f64> = (0..n).map(|l| mats.adjacency.column(l).sum()).collect();
            let ok = sums.iter().all(|s| (s - 1.0).abs() <= KIRCHHOFF_TOL);
            (Some(sums), Some(ok))
        } else {
            (None, None)
        };
        AssumptionReport {
            a2_pass: a2_failing_vertices.is_empty(),
            a2_failing_vertices,
            a3_pass,
            a3_residuals,
            size_pass: self.edges.len() >= n && n >= self.n_controls(),
            column_sums,
            column_stochastic,
        }
    }
}
