use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::graph::MetricGraph;
use crate::lattice::Quadrature;

/// Absorption rate `q_j(x, v_k)` on one edge, piecewise constant in `x` for
/// each velocity node.
#[derive(Debug, Clone, PartialEq)]
pub struct Absorption {
    breaks: Vec<f64>,
    /// `values[segment][node]`
    values: Vec<Vec<f64>>,
    /// `cumulative[node][i] = ∫_0^{breaks[i]} q dσ`
    cumulative: Vec<Vec<f64>>,
}

impl Absorption {
    pub fn constant(length: f64, q: f64, n_nodes: usize) -> Self {
        Self::table(vec![0.0, length], vec![vec![q; n_nodes]]).expect("constant absorption is valid")
    }

    pub fn table(breaks: Vec<f64>, values: Vec<Vec<f64>>) -> Result<Self> {
        if breaks.len() < 2 || values.len() != breaks.len() - 1 {
            return Err(Error::InvalidArgument(format!(
                "absorption table needs one value row per segment ({} breaks, {} rows)",
                breaks.len(),
                values.len()
            )));
        }
        if breaks[0] != 0.0 || breaks.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidArgument("absorption breaks must start at 0 and increase".into()));
        }
        let n_nodes = values[0].len();
        if n_nodes == 0 || values.iter().any(|r| r.len() != n_nodes) {
            return Err(Error::InvalidArgument("absorption rows must share the node count".into()));
        }
        if values.iter().flatten().any(|q| !q.is_finite()) {
            return Err(Error::InvalidArgument("absorption must be finite".into()));
        }
        let cumulative = (0..n_nodes)
            .map(|k| {
                let mut acc = vec![0.0];
                for (s, w) in breaks.windows(2).enumerate() {
                    acc.push(acc[s] + values[s][k] * (w[1] - w[0]));
                }
                acc
            })
            .collect();
        Ok(Self {
            breaks,
            values,
            cumulative,
        })
    }

    pub fn length(&self) -> f64 {
        *self.breaks.last().unwrap()
    }

    pub fn n_nodes(&self) -> usize {
        self.values[0].len()
    }

    pub fn breaks(&self) -> &[f64] {
        &self.breaks
    }

    fn segment(&self, x: f64) -> usize {
        let s = self.breaks.partition_point(|&b| b <= x);
        s.saturating_sub(1).min(self.values.len() - 1)
    }

    pub fn rate(&self, node: usize, x: f64) -> f64 {
        self.values[self.segment(x)][node]
    }

    /// `∫_0^x q(σ, v_node) dσ`, closed form.
    pub fn potential(&self, node: usize, x: f64) -> f64 {
        let s = self.segment(x);
        self.cumulative[node][s] + self.values[s][node] * (x - self.breaks[s])
    }

    pub fn sup_abs(&self) -> f64 {
        self.values.iter().flatten().fold(0.0, |m, q| m.max(q.abs()))
    }

    pub fn min(&self) -> f64 {
        self.values.iter().flatten().fold(f64::INFINITY, |m, &q| m.min(q))
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().flatten().all(|&q| q == 0.0)
    }
}

/// Scattering kernel `ℓ_j(0, v, v')` on the velocity grid.
#[derive(Debug, Clone, PartialEq)]
pub enum Kernel {
    /// `J = I`, no velocity mixing.
    Identity,
    /// `ℓ(v_a, v_b)` sampled on the grid, entrywise nonnegative.
    Matrix(DMatrix<f64>),
}

impl Kernel {
    pub fn constant(c: f64, n_nodes: usize) -> Self {
        Kernel::Matrix(DMatrix::from_element(n_nodes, n_nodes, c))
    }

    /// `(J f)(v_a) = Σ_b ℓ(v_a, v_b) ω_b f(v_b)`.
    pub fn scatter(&self, trace: &[f64], weights: &[f64]) -> Vec<f64> {
        match self {
            Kernel::Identity => trace.to_vec(),
            Kernel::Matrix(l) => (0..l.nrows())
                .map(|a| (0..l.ncols()).map(|b| l[(a, b)] * weights[b] * trace[b]).sum())
                .collect(),
        }
    }

    /// Coefficient of `f(v_b)` in `(J f)(v_a)`.
    pub fn coefficient(&self, a: usize, b: usize, weights: &[f64]) -> f64 {
        match self {
            Kernel::Identity => {
                if a == b {
                    1.0
                } else {
                    0.0
                }
            }
            Kernel::Matrix(l) => l[(a, b)] * weights[b],
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Kernel::Matrix(l) if l.iter().all(|&x| x == 0.0))
    }
}

/// The transport network: graph, velocity grid, absorption and scattering.
#[derive(Debug, Clone)]
pub struct TransportSystem {
    graph: MetricGraph,
    vgrid: Quadrature,
    absorption: Vec<Arc<Absorption>>,
    kernels: Vec<Kernel>,
}

impl TransportSystem {
    pub fn new(graph: MetricGraph, vgrid: Quadrature, absorption: Vec<Absorption>, kernels: Vec<Kernel>) -> Result<Self> {
        let m = graph.n_edges();
        let k = vgrid.len();
        let (vmin, _) = vgrid.bounds();
        if !(vmin > 0.0) || vgrid.nodes().iter().any(|&v| !(v > 0.0)) {
            return Err(Error::InvalidArgument(format!("velocities must be positive (v_min = {vmin})")));
        }
        if absorption.len() != m || kernels.len() != m {
            return Err(Error::Shape(format!(
                "{m} edges but {} absorption and {} kernel entries",
                absorption.len(),
                kernels.len()
            )));
        }
        for (j, (a, e)) in absorption.iter().zip(graph.edges()).enumerate() {
            if a.n_nodes() != k {
                return Err(Error::Shape(format!("edge {j}: absorption has {} nodes, grid has {k}", a.n_nodes())));
            }
            if (a.length() - e.length).abs() > 1e-12 * e.length {
                return Err(Error::Shape(format!(
                    "edge {j}: absorption covers [0, {}] but the edge has length {}",
                    a.length(),
                    e.length
                )));
            }
        }
        for (j, kern) in kernels.iter().enumerate() {
            if let Kernel::Matrix(l) = kern {
                if l.nrows() != k || l.ncols() != k {
                    return Err(Error::Shape(format!("edge {j}: kernel is {}x{}, grid has {k}", l.nrows(), l.ncols())));
                }
                if l.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
                    return Err(Error::InvalidArgument(format!("edge {j}: kernel samples must be finite and >= 0")));
                }
            }
        }
        Ok(Self {
            graph,
            vgrid,
            absorption: absorption.into_iter().map(Arc::new).collect(),
            kernels,
        })
    }

    /// Zero absorption and identity scattering on every edge.
    pub fn conservative(graph: MetricGraph, vgrid: Quadrature) -> Result<Self> {
        let k = vgrid.len();
        let absorption = graph.edges().iter().map(|e| Absorption::constant(e.length, 0.0, k)).collect();
        let kernels = vec![Kernel::Identity; graph.n_edges()];
        Self::new(graph, vgrid, absorption, kernels)
    }

    pub fn graph(&self) -> &MetricGraph {
        &self.graph
    }

    pub fn vgrid(&self) -> &Quadrature {
        &self.vgrid
    }

    pub fn n_nodes(&self) -> usize {
        self.vgrid.len()
    }

    pub fn n_edges(&self) -> usize {
        self.graph.n_edges()
    }

    pub fn n_vertices(&self) -> usize {
        self.graph.n_vertices()
    }

    /// Dimension of the discretized boundary space, `N · K`.
    pub fn boundary_dim(&self) -> usize {
        self.n_vertices() * self.n_nodes()
    }

    pub fn velocity(&self, k: usize) -> f64 {
        self.vgrid.nodes()[k]
    }

    pub fn weights(&self) -> &[f64] {
        self.vgrid.weights()
    }

    pub fn length(&self, j: usize) -> f64 {
        self.graph.edge(j).length
    }

    pub fn absorption(&self, j: usize) -> &Arc<Absorption> {
        &self.absorption[j]
    }

    pub fn kernel(&self, j: usize) -> &Kernel {
        &self.kernels[j]
    }

    /// `q̃ = sup_j ‖q_j‖∞`.
    pub fn q_tilde(&self) -> f64 {
        self.absorption.iter().map(|a| a.sup_abs()).fold(0.0, f64::max)
    }

    /// Lower bound `κ` of the absorption.
    pub fn kappa(&self) -> f64 {
        self.absorption.iter().map(|a| a.min()).fold(f64::INFINITY, f64::min)
    }

    pub fn v_max(&self) -> f64 {
        self.vgrid.nodes().iter().cloned().fold(0.0, f64::max)
    }

    /// Shortest boundary-to-boundary transit time `min_j l_j / v_max`.
    pub fn min_transit(&self) -> f64 {
        self.graph.min_length() / self.v_max()
    }

    /// Transit time of edge `j` at velocity node `k`.
    pub fn transit(&self, j: usize, k: usize) -> f64 {
        self.length(j) / self.velocity(k)
    }

    /// `exp((P(y) − P(x)) / v)`: absorption gain along a characteristic from
    /// `y` down to `x`.
    pub fn gain(&self, j: usize, k: usize, x: f64, y: f64) -> f64 {
        let a = &self.absorption[j];
        ((a.potential(k, y) - a.potential(k, x)) / self.velocity(k)).exp()
    }

    /// Index of node `k` at vertex `i` in boundary vectors.
    pub fn bindex(&self, i: usize, k: usize) -> usize {
        i * self.n_nodes() + k
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn piecewise_potential() {
        let a = Absorption::table(vec![0.0, 0.5, 2.0], vec![vec![-1.0], vec![2.0]]).unwrap();
        assert_eq!(a.potential(0, 0.0), 0.0);
        assert!((a.potential(0, 0.25) + 0.25).abs() < 1e-15);
        assert!((a.potential(0, 1.0) - (-0.5 + 1.0)).abs() < 1e-15);
        assert!((a.potential(0, 2.0) - (-0.5 + 3.0)).abs() < 1e-15);
        assert_eq!(a.sup_abs(), 2.0);
        assert_eq!(a.min(), -1.0);
        assert!(Absorption::table(vec![0.0, 0.5], vec![]).is_err());
    }

    #[test]
    fn flux_preserving_kernel_scatter() {
        let q = Quadrature::midpoint(0.5, 1.5, 2).unwrap();
        let v = q.nodes().to_vec();
        let w = q.weights().to_vec();
        // ℓ(v_a, v_b) = v_b / (Σ_a ω_a v_a)
        let s: f64 = v.iter().zip(&w).map(|(a, b)| a * b).sum();
        let l = DMatrix::from_fn(2, 2, |_, b| v[b] / s);
        let kern = Kernel::Matrix(l);
        let trace = [0.3, 1.7];
        let out = kern.scatter(&trace, &w);
        let flux_in: f64 = (0..2).map(|b| w[b] * v[b] * trace[b]).sum();
        let flux_out: f64 = (0..2).map(|a| w[a] * v[a] * out[a]).sum();
        assert!((flux_in - flux_out).abs() < 1e-15);
    }
}
