//! Ordered-vector-space primitives on discretized L¹/Lᵖ spaces.
//!
//! Function spaces are represented by samples against a quadrature with
//! strictly positive weights, so integral operators assembled from them stay
//! entrywise nonnegative and the cone structure survives discretization.

use nalgebra::DMatrix;
use petgraph::algo::tarjan_scc;
use petgraph::graph::DiGraph;
use serde::Serialize;

use crate::error::{Error, Result};

/// Relative slack used for cone membership: `f >= 0` means
/// `min f >= -CONE_TOL * (1 + max |f|)`.
pub const CONE_TOL: f64 = 1e-12;

/// Largest matrix handed to the dense eigenvalue fallback.
pub const DENSE_LIMIT: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum Rule {
    Midpoint,
    Trapezoid,
    GaussLegendre(usize),
    /// Single node carrying unit mass (degenerate interval).
    Point,
}

/// Nodes and positive weights on an interval.
#[derive(Debug, Clone, PartialEq)]
pub struct Quadrature {
    nodes: Vec<f64>,
    weights: Vec<f64>,
    rule: Rule,
    lower: f64,
    upper: f64,
}

impl Quadrature {
    pub fn midpoint(a: f64, b: f64, n: usize) -> Result<Self> {
        check_interval(a, b, n)?;
        let h = (b - a) / n as f64;
        let nodes = (0..n).map(|i| a + (i as f64 + 0.5) * h).collect();
        Ok(Self {
            nodes,
            weights: vec![h; n],
            rule: Rule::Midpoint,
            lower: a,
            upper: b,
        })
    }

    pub fn trapezoid(a: f64, b: f64, n: usize) -> Result<Self> {
        check_interval(a, b, n)?;
        if n < 2 {
            return Err(Error::InvalidArgument("trapezoid rule needs at least 2 nodes".into()));
        }
        let h = (b - a) / (n - 1) as f64;
        let nodes = (0..n).map(|i| a + i as f64 * h).collect();
        let mut weights = vec![h; n];
        weights[0] = 0.5 * h;
        weights[n - 1] = 0.5 * h;
        Ok(Self {
            nodes,
            weights,
            rule: Rule::Trapezoid,
            lower: a,
            upper: b,
        })
    }

    /// Composite Gauss-Legendre rule with `panels` equal panels of `order` nodes.
    pub fn gauss_legendre(a: f64, b: f64, panels: usize, order: usize) -> Result<Self> {
        check_interval(a, b, panels)?;
        let h = (b - a) / panels as f64;
        let breaks: Vec<f64> = (0..=panels).map(|i| a + i as f64 * h).collect();
        Self::composite(&breaks, order)
    }

    /// Composite Gauss-Legendre rule on the cells delimited by `breaks`
    /// (sorted). Zero-length cells are skipped.
    pub fn composite(breaks: &[f64], order: usize) -> Result<Self> {
        if breaks.len() < 2 || order == 0 {
            return Err(Error::InvalidArgument("composite rule needs two breaks and order >= 1".into()));
        }
        let (xs, ws) = gauss_legendre_unit(order);
        let mut nodes = Vec::with_capacity((breaks.len() - 1) * order);
        let mut weights = Vec::with_capacity(nodes.capacity());
        for cell in breaks.windows(2) {
            let (a, b) = (cell[0], cell[1]);
            if b < a {
                return Err(Error::InvalidArgument("breaks must be sorted".into()));
            }
            if b - a <= 0.0 {
                continue;
            }
            let (c, r) = (0.5 * (a + b), 0.5 * (b - a));
            for (x, w) in xs.iter().zip(&ws) {
                nodes.push(c + r * x);
                weights.push(r * w);
            }
        }
        if nodes.is_empty() {
            return Err(Error::InvalidArgument("composite rule over an empty interval".into()));
        }
        Ok(Self {
            nodes,
            weights,
            rule: Rule::GaussLegendre(order),
            lower: breaks[0],
            upper: *breaks.last().unwrap(),
        })
    }

    /// Single node with unit weight: the Dirac measure at `v`.
    pub fn point(v: f64) -> Self {
        Self {
            nodes: vec![v],
            weights: vec![1.0],
            rule: Rule::Point,
            lower: v,
            upper: v,
        }
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn rule(&self) -> Rule {
        self.rule
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn bounds(&self) -> (f64, f64) {
        (self.lower, self.upper)
    }

    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(&x, &w)| w * f(x)).sum()
    }
}

fn check_interval(a: f64, b: f64, n: usize) -> Result<()> {
    if !(a.is_finite() && b.is_finite()) || b <= a || n == 0 {
        return Err(Error::InvalidArgument(format!(
            "quadrature needs a < b and n >= 1 (got [{a}, {b}], n = {n})"
        )));
    }
    Ok(())
}

/// Gauss-Legendre nodes and weights on [-1, 1].
pub fn gauss_legendre_unit(n: usize) -> (Vec<f64>, Vec<f64>) {
    if n == 1 {
        return (vec![0.0], vec![2.0]);
    }
    let mut xs = vec![0.0; n];
    let mut ws = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        // Newton on P_n from the Tricomi initial guess
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        xs[i] = -x;
        xs[n - 1 - i] = x;
        ws[i] = w;
        ws[n - 1 - i] = w;
    }
    (xs, ws)
}

/// Samples against a fixed quadrature, tagged with the cone tolerance.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedVector {
    pub values: Vec<f64>,
    pub weights: Vec<f64>,
    pub tolerance: f64,
}

impl WeightedVector {
    pub fn new(values: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if values.len() != weights.len() {
            return Err(Error::Shape(format!(
                "{} values against {} weights",
                values.len(),
                weights.len()
            )));
        }
        if weights.iter().any(|&w| !(w > 0.0)) {
            return Err(Error::InvalidArgument("weights must be strictly positive".into()));
        }
        Ok(Self {
            values,
            weights,
            tolerance: CONE_TOL,
        })
    }

    pub fn norm(&self) -> f64 {
        weighted_l1(&self.values, &self.weights)
    }

    pub fn is_nonneg(&self) -> bool {
        is_nonneg_with(&self.values, self.tolerance)
    }

    pub fn decompose(&self) -> (Self, Self) {
        let (p, m) = decompose_pm(&self.values);
        (
            Self { values: p, ..self.clone() },
            Self { values: m, ..self.clone() },
        )
    }
}

/// Splits `f` into its positive and negative parts, `f = f₊ − f₋`.
pub fn decompose_pm(f: &[f64]) -> (Vec<f64>, Vec<f64>) {
    f.iter().map(|&x| (x.max(0.0), (-x).max(0.0))).unzip()
}

pub fn is_nonneg(f: &[f64]) -> bool {
    is_nonneg_with(f, CONE_TOL)
}

pub fn is_nonneg_with(f: &[f64], rel_tol: f64) -> bool {
    let scale = f.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    f.iter().all(|&x| x >= -rel_tol * (1.0 + scale))
}

fn weighted_l1(values: &[f64], weights: &[f64]) -> f64 {
    values.iter().zip(weights).map(|(v, w)| w * v.abs()).sum()
}

/// Discretized L¹ norm of a state sampled against `weights`
/// (products of spatial and velocity weights).
pub fn state_norm(values: &[f64], weights: &[f64]) -> Result<f64> {
    if values.len() != weights.len() {
        return Err(Error::Shape(format!(
            "state has {} samples, quadrature has {} weights",
            values.len(),
            weights.len()
        )));
    }
    Ok(weighted_l1(values, weights))
}

/// Discretized Lᵖ([0, τ]; U) norm. `samples[k]` is the signal at the k-th
/// time node of `grid`; its U-norm is the weighted L¹ norm with
/// `coord_weights`.
pub fn signal_norm(samples: &[Vec<f64>], coord_weights: &[f64], p: f64, grid: &Quadrature) -> Result<f64> {
    if !(p >= 1.0) || !p.is_finite() {
        return Err(Error::InvalidArgument(format!("signal norm needs p in [1, inf), got {p}")));
    }
    if samples.len() != grid.len() {
        return Err(Error::Shape(format!(
            "{} time samples against {} quadrature nodes",
            samples.len(),
            grid.len()
        )));
    }
    let mut acc = 0.0;
    for (s, w) in samples.iter().zip(grid.weights()) {
        let un = state_norm(s, coord_weights)?;
        acc += w * un.powf(p);
    }
    Ok(acc.powf(1.0 / p))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum RadiusMethod {
    /// Acyclic sparsity pattern; the matrix is nilpotent.
    Nilpotent,
    /// Collatz-Wielandt bracketing on each irreducible block.
    CollatzWielandt,
    /// Dense eigenvalues.
    Dense,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SpectralEstimate {
    pub radius: f64,
    pub converged: bool,
    pub iterations: usize,
    pub method: RadiusMethod,
}

/// Spectral radius of a square matrix.
///
/// Entrywise nonnegative input is split into irreducible blocks (strongly
/// connected components of its sparsity graph); the Perron root of each block
/// is bracketed by Collatz-Wielandt quotients of the shifted matrix `M + I`
/// until the bracket is narrower than `tol`. Matrices with negative entries go
/// to the dense eigenvalue fallback (at most [`DENSE_LIMIT`] rows).
pub fn spectral_radius(m: &DMatrix<f64>, tol: f64, max_iter: usize) -> Result<SpectralEstimate> {
    let n = m.nrows();
    if n != m.ncols() {
        return Err(Error::Shape(format!("spectral radius of a {}x{} matrix", n, m.ncols())));
    }
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidArgument("matrix has non-finite entries".into()));
    }
    if n == 0 {
        return Ok(SpectralEstimate {
            radius: 0.0,
            converged: true,
            iterations: 0,
            method: RadiusMethod::Nilpotent,
        });
    }
    if m.iter().any(|&x| x < 0.0) {
        let radius = dense_spectral_radius(m)?;
        return Ok(SpectralEstimate {
            radius,
            converged: true,
            iterations: 0,
            method: RadiusMethod::Dense,
        });
    }

    let mut graph = DiGraph::<usize, ()>::with_capacity(n, 0);
    let ids: Vec<_> = (0..n).map(|i| graph.add_node(i)).collect();
    for j in 0..n {
        for i in 0..n {
            if m[(i, j)] > 0.0 {
                graph.add_edge(ids[j], ids[i], ());
            }
        }
    }
    let mut radius = 0.0f64;
    let mut iterations = 0;
    let mut any_cycle = false;
    for comp in tarjan_scc(&graph) {
        let idx: Vec<usize> = comp.iter().map(|id| graph[*id]).collect();
        if idx.len() == 1 {
            let d = m[(idx[0], idx[0])];
            if d > 0.0 {
                any_cycle = true;
                radius = radius.max(d);
            }
            continue;
        }
        any_cycle = true;
        let block = DMatrix::from_fn(idx.len(), idx.len(), |a, b| m[(idx[a], idx[b])]);
        match perron_root(&block, tol, max_iter) {
            Ok((r, it)) => {
                iterations += it;
                radius = radius.max(r);
            }
            Err(e) => {
                if n <= DENSE_LIMIT {
                    let r = dense_spectral_radius(m)?;
                    return Ok(SpectralEstimate {
                        radius: r,
                        converged: false,
                        iterations: max_iter,
                        method: RadiusMethod::Dense,
                    });
                }
                return Err(e);
            }
        }
    }
    Ok(SpectralEstimate {
        radius,
        converged: true,
        iterations,
        method: if any_cycle {
            RadiusMethod::CollatzWielandt
        } else {
            RadiusMethod::Nilpotent
        },
    })
}

/// Perron root of an irreducible nonnegative block.
fn perron_root(block: &DMatrix<f64>, tol: f64, max_iter: usize) -> Result<(f64, usize)> {
    let n = block.nrows();
    let shifted = block + DMatrix::<f64>::identity(n, n);
    let mut x = nalgebra::DVector::from_element(n, 1.0 / n as f64);
    let (mut lower, mut upper) = (0.0, f64::INFINITY);
    for it in 1..=max_iter {
        let y = &shifted * &x;
        let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
        for i in 0..n {
            let q = y[i] / x[i];
            lo = lo.min(q);
            hi = hi.max(q);
        }
        lower = lo - 1.0;
        upper = hi - 1.0;
        if upper - lower <= tol * (1.0 + upper.abs()).max(1.0) {
            return Ok((0.5 * (lower + upper), it));
        }
        let s = y.sum();
        x = y / s;
    }
    Err(Error::NotConverged {
        iterations: max_iter,
        lower,
        upper,
    })
}

/// Largest eigenvalue modulus from a real Schur decomposition.
pub fn dense_spectral_radius(m: &DMatrix<f64>) -> Result<f64> {
    let n = m.nrows();
    if n != m.ncols() {
        return Err(Error::Shape(format!("spectral radius of a {}x{} matrix", n, m.ncols())));
    }
    if n > DENSE_LIMIT {
        return Err(Error::TooLarge(n));
    }
    if n == 0 {
        return Ok(0.0);
    }
    let eig = m.clone().complex_eigenvalues();
    Ok(eig.iter().fold(0.0f64, |r, z| r.max(z.norm())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decompose_examples() {
        let (p, m) = decompose_pm(&[3.0, -2.0]);
        assert_eq!(p, vec![3.0, 0.0]);
        assert_eq!(m, vec![0.0, 2.0]);
        let f = [0.5, 0.0, 7.0];
        let (p, m) = decompose_pm(&f);
        assert_eq!(p, f.to_vec());
        assert!(m.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn gauss_legendre_weights_and_exactness() {
        for n in 1..=12 {
            let (x, w) = gauss_legendre_unit(n);
            let s: f64 = w.iter().sum();
            assert!((s - 2.0).abs() < 1e-13, "n={n} sum={s}");
            assert!(w.iter().all(|&wi| wi > 0.0));
            assert!(x.windows(2).all(|p| p[0] < p[1]));
            // exact for degree 2n-1
            let deg = 2 * n - 1;
            let q: f64 = x.iter().zip(&w).map(|(xi, wi)| wi * xi.powi(deg as i32 - 1)).sum();
            let exact = if (deg - 1) % 2 == 0 { 2.0 / deg as f64 } else { 0.0 };
            assert!((q - exact).abs() < 1e-13, "n={n}");
        }
    }

    #[test]
    fn rules_sum_to_length() {
        for q in [
            Quadrature::midpoint(0.5, 2.0, 7).unwrap(),
            Quadrature::trapezoid(0.5, 2.0, 7).unwrap(),
            Quadrature::gauss_legendre(0.5, 2.0, 3, 5).unwrap(),
        ] {
            let s: f64 = q.weights().iter().sum();
            assert!((s - 1.5).abs() < 1e-12);
            assert!(q.nodes().windows(2).all(|p| p[0] <= p[1]));
        }
        assert!(Quadrature::midpoint(1.0, 1.0, 3).is_err());
    }

    #[test]
    fn state_norm_examples() {
        assert_eq!(state_norm(&[0.0; 4], &[0.25; 4]).unwrap(), 0.0);
        // f = 1 on [0,2] x [0,1] with a tensor midpoint rule
        let qx = Quadrature::midpoint(0.0, 2.0, 8).unwrap();
        let qv = Quadrature::midpoint(0.0, 1.0, 3).unwrap();
        let w: Vec<f64> = qx
            .weights()
            .iter()
            .flat_map(|a| qv.weights().iter().map(move |b| a * b))
            .collect();
        let f = vec![1.0; w.len()];
        assert!((state_norm(&f, &w).unwrap() - 2.0).abs() < 1e-14);
        assert!(state_norm(&f[1..], &w).is_err());
    }

    #[test]
    fn signal_norm_examples() {
        let grid = Quadrature::midpoint(0.0, 1.0, 100).unwrap();
        let zero: Vec<Vec<f64>> = grid.nodes().iter().map(|_| vec![0.0]).collect();
        assert_eq!(signal_norm(&zero, &[1.0], 2.0, &grid).unwrap(), 0.0);
        let one: Vec<Vec<f64>> = grid.nodes().iter().map(|_| vec![1.0]).collect();
        assert!((signal_norm(&one, &[1.0], 2.0, &grid).unwrap() - 1.0).abs() < 1e-14);
        let ramp: Vec<Vec<f64>> = grid.nodes().iter().map(|&t| vec![t]).collect();
        // midpoint is exact for linear integrands
        assert!((signal_norm(&ramp, &[1.0], 1.0, &grid).unwrap() - 0.5).abs() < 1e-14);
        assert!(signal_norm(&ramp, &[1.0], 0.5, &grid).is_err());
    }

    #[test]
    fn radius_examples() {
        let id = DMatrix::<f64>::identity(3, 3);
        let r = spectral_radius(&id, 1e-12, 1000).unwrap();
        assert!((r.radius - 1.0).abs() < 1e-12);
        let nil = DMatrix::from_row_slice(2, 2, &[0.0, 2.0, 0.0, 0.0]);
        let r = spectral_radius(&nil, 1e-12, 1000).unwrap();
        assert_eq!(r.radius, 0.0);
        assert_eq!(r.method, RadiusMethod::Nilpotent);
        // periodic irreducible block
        let perm = DMatrix::from_row_slice(2, 2, &[0.0, 4.0, 1.0, 0.0]);
        let r = spectral_radius(&perm, 1e-12, 10_000).unwrap();
        assert!((r.radius - 2.0).abs() < 1e-10, "{r:?}");
        // signed input goes dense
        let rot = DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0]);
        let r = spectral_radius(&rot, 1e-12, 100).unwrap();
        assert_eq!(r.method, RadiusMethod::Dense);
        assert!((r.radius - 1.0).abs() < 1e-12);
    }
}
