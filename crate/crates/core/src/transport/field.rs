use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::lattice::{self, Quadrature, WeightedVector};

use super::system::TransportSystem;

/// Gauss-Legendre order used for spatial integrals.
pub const SPACE_ORDER: usize = 6;
/// Cells per unit length for spatial integrals, on top of the breakpoints.
pub const SPACE_CELLS: usize = 32;

type Eval = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// A function on `[0, l]` given by an exact evaluation closure together with
/// the points where it may fail to be smooth.
#[derive(Clone)]
pub struct Profile {
    length: f64,
    eval: Eval,
    breaks: Arc<Vec<f64>>,
}

impl fmt::Debug for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Profile")
            .field("length", &self.length)
            .field("breaks", &self.breaks.len())
            .finish()
    }
}

impl Profile {
    pub fn new(length: f64, eval: impl Fn(f64) -> f64 + Send + Sync + 'static, breaks: Vec<f64>) -> Self {
        let mut b: Vec<f64> = breaks
            .into_iter()
            .filter(|x| x.is_finite() && *x > 0.0 && *x < length)
            .collect();
        b.push(0.0);
        b.push(length);
        b.sort_by(|a, c| a.partial_cmp(c).unwrap());
        b.dedup();
        Self {
            length,
            eval: Arc::new(eval),
            breaks: Arc::new(b),
        }
    }

    pub fn zero(length: f64) -> Self {
        Self::new(length, |_| 0.0, vec![])
    }

    pub fn constant(length: f64, c: f64) -> Self {
        Self::new(length, move |_| c, vec![])
    }

    /// `values[i]` on `[breaks[i], breaks[i+1])`.
    pub fn piecewise_constant(breaks: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if breaks.len() != values.len() + 1 || breaks.len() < 2 {
            return Err(Error::Shape(format!(
                "{} breaks for {} piecewise-constant values",
                breaks.len(),
                values.len()
            )));
        }
        if breaks[0] != 0.0 || breaks.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidArgument("profile breaks must start at 0 and increase".into()));
        }
        let length = *breaks.last().unwrap();
        let b = breaks.clone();
        Ok(Self::new(
            length,
            move |x| {
                let i = b.partition_point(|&t| t <= x).saturating_sub(1).min(values.len() - 1);
                values[i]
            },
            breaks,
        ))
    }

    /// Linear interpolation through `(knots[i], values[i])`.
    pub fn piecewise_linear(knots: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if knots.len() != values.len() || knots.len() < 2 {
            return Err(Error::Shape("piecewise-linear profile needs matching knots and values".into()));
        }
        if knots[0] != 0.0 || knots.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidArgument("profile knots must start at 0 and increase".into()));
        }
        let length = *knots.last().unwrap();
        let k = knots.clone();
        Ok(Self::new(
            length,
            move |x| {
                let i = k.partition_point(|&t| t <= x).saturating_sub(1).min(k.len() - 2);
                let s = ((x - k[i]) / (k[i + 1] - k[i])).clamp(0.0, 1.0);
                values[i] + s * (values[i + 1] - values[i])
            },
            knots,
        ))
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn eval(&self, x: f64) -> f64 {
        (self.eval)(x)
    }

    pub fn breaks(&self) -> &[f64] {
        &self.breaks
    }

    /// Breaks-aligned composite Gauss-Legendre rule on `[0, l]`.
    pub fn quadrature(&self) -> Quadrature {
        let cells = ((self.length * SPACE_CELLS as f64).ceil() as usize).max(4);
        let h = self.length / cells as f64;
        let mut b: Vec<f64> = (0..=cells).map(|i| i as f64 * h).collect();
        b.extend(self.breaks.iter().copied());
        b.sort_by(|a, c| a.partial_cmp(c).unwrap());
        b.dedup();
        Quadrature::composite(&b, SPACE_ORDER).expect("profile has positive length")
    }

    pub fn integral(&self) -> f64 {
        self.quadrature().integrate(|x| self.eval(x))
    }

    pub fn l1(&self) -> f64 {
        self.quadrature().integrate(|x| self.eval(x).abs())
    }

    pub fn map(&self, g: impl Fn(f64, f64) -> f64 + Send + Sync + 'static) -> Self {
        let me = self.clone();
        Self::new(self.length, move |x| g(x, me.eval(x)), self.breaks.to_vec())
    }

    /// `alpha · self + beta · other`.
    pub fn combine(&self, alpha: f64, other: &Profile, beta: f64) -> Self {
        let (a, b) = (self.clone(), other.clone());
        let mut breaks = self.breaks.to_vec();
        breaks.extend(other.breaks.iter().copied());
        Self::new(self.length, move |x| alpha * a.eval(x) + beta * b.eval(x), breaks)
    }
}

/// State of the network: one profile per (edge, velocity node).
#[derive(Debug, Clone)]
pub struct StateField {
    profiles: Vec<Vec<Profile>>,
}

impl StateField {
    pub fn from_profiles(profiles: Vec<Vec<Profile>>) -> Self {
        Self { profiles }
    }

    pub fn zeros(sys: &TransportSystem) -> Self {
        Self::from_fn(sys, |_, _, _, _| 0.0)
    }

    pub fn constant(sys: &TransportSystem, c: f64) -> Self {
        let profiles = (0..sys.n_edges())
            .map(|j| (0..sys.n_nodes()).map(|_| Profile::constant(sys.length(j), c)).collect())
            .collect();
        Self { profiles }
    }

    /// `f(edge, node, x, v)`, assumed smooth in `x`.
    pub fn from_fn(sys: &TransportSystem, f: impl Fn(usize, usize, f64, f64) -> f64 + Send + Sync + Clone + 'static) -> Self {
        let profiles = (0..sys.n_edges())
            .map(|j| {
                (0..sys.n_nodes())
                    .map(|k| {
                        let v = sys.velocity(k);
                        let f = f.clone();
                        Profile::new(sys.length(j), move |x| f(j, k, x, v), vec![])
                    })
                    .collect()
            })
            .collect();
        Self { profiles }
    }

    /// As [`StateField::from_fn`], with `f` allowed to jump or kink at the
    /// given positions (clipped to each edge).
    pub fn from_fn_with_breaks(
        sys: &TransportSystem,
        breaks: &[f64],
        f: impl Fn(usize, usize, f64, f64) -> f64 + Send + Sync + Clone + 'static,
    ) -> Self {
        let profiles = (0..sys.n_edges())
            .map(|j| {
                (0..sys.n_nodes())
                    .map(|k| {
                        let v = sys.velocity(k);
                        let f = f.clone();
                        Profile::new(sys.length(j), move |x| f(j, k, x, v), breaks.to_vec())
                    })
                    .collect()
            })
            .collect();
        Self { profiles }
    }

    pub fn check_shape(&self, sys: &TransportSystem) -> Result<()> {
        if self.profiles.len() != sys.n_edges() || self.profiles.iter().any(|p| p.len() != sys.n_nodes()) {
            return Err(Error::Shape(format!(
                "state has {} edges, system has {} edges x {} nodes",
                self.profiles.len(),
                sys.n_edges(),
                sys.n_nodes()
            )));
        }
        for (j, row) in self.profiles.iter().enumerate() {
            if row.iter().any(|p| (p.length() - sys.length(j)).abs() > 1e-12 * sys.length(j)) {
                return Err(Error::Shape(format!("edge {j}: profile length differs from edge length")));
            }
        }
        Ok(())
    }

    pub fn n_edges(&self) -> usize {
        self.profiles.len()
    }

    pub fn profile(&self, j: usize, k: usize) -> &Profile {
        &self.profiles[j][k]
    }

    pub fn profiles(&self) -> &[Vec<Profile>] {
        &self.profiles
    }

    pub fn eval(&self, j: usize, k: usize, x: f64) -> f64 {
        self.profiles[j][k].eval(x)
    }

    /// Samples on `n >= 2` uniformly spaced points of each edge,
    /// `[edge][node][i]`.
    pub fn sample_uniform(&self, n: usize) -> Vec<Vec<Vec<f64>>> {
        let n = n.max(2);
        self.profiles
            .iter()
            .map(|row| {
                row.iter()
                    .map(|p| {
                        let h = p.length() / (n - 1) as f64;
                        (0..n).map(|i| p.eval(i as f64 * h)).collect()
                    })
                    .collect()
            })
            .collect()
    }

    /// Samples against the tensor quadrature (space rule of each profile
    /// times the velocity weights).
    pub fn weighted(&self, sys: &TransportSystem) -> WeightedVector {
        let mut values = Vec::new();
        let mut weights = Vec::new();
        for row in &self.profiles {
            for (k, p) in row.iter().enumerate() {
                let q = p.quadrature();
                let wv = sys.weights()[k];
                for (&x, &w) in q.nodes().iter().zip(q.weights()) {
                    values.push(p.eval(x));
                    weights.push(w * wv);
                }
            }
        }
        WeightedVector::new(values, weights).expect("positive weights")
    }

    /// `‖f‖_X = Σ_j ∬ |f_j| dx dv`.
    pub fn norm(&self, sys: &TransportSystem) -> f64 {
        self.fold_nodes(sys, |p| p.l1())
    }

    /// `Σ_j ∬ f_j dx dv`.
    pub fn mass(&self, sys: &TransportSystem) -> f64 {
        self.fold_nodes(sys, |p| p.integral())
    }

    fn fold_nodes(&self, sys: &TransportSystem, f: impl Fn(&Profile) -> f64) -> f64 {
        self.profiles
            .iter()
            .map(|row| row.iter().enumerate().map(|(k, p)| sys.weights()[k] * f(p)).sum::<f64>())
            .sum()
    }

    /// Smallest value over quadrature nodes and a uniform 65-point grid.
    pub fn min_value(&self) -> f64 {
        let mut m = f64::INFINITY;
        for row in &self.profiles {
            for p in row {
                let q = p.quadrature();
                for &x in q.nodes() {
                    m = m.min(p.eval(x));
                }
                let h = p.length() / 64.0;
                for i in 0..=64 {
                    m = m.min(p.eval(i as f64 * h));
                }
            }
        }
        m
    }

    pub fn max_abs(&self) -> f64 {
        let mut m = 0.0f64;
        for row in &self.profiles {
            for p in row {
                for &x in p.quadrature().nodes() {
                    m = m.max(p.eval(x).abs());
                }
            }
        }
        m
    }

    /// Cone membership with the relative slack of [`lattice::is_nonneg_with`].
    pub fn is_nonneg(&self, rel_tol: f64) -> bool {
        let m = self.min_value();
        m >= -rel_tol * (1.0 + self.max_abs())
    }

    /// `alpha · self + beta · other`.
    pub fn combine(&self, alpha: f64, other: &StateField, beta: f64) -> Self {
        let profiles = self
            .profiles
            .iter()
            .zip(&other.profiles)
            .map(|(r1, r2)| r1.iter().zip(r2).map(|(a, b)| a.combine(alpha, b, beta)).collect())
            .collect();
        Self { profiles }
    }

    pub fn scale(&self, alpha: f64) -> Self {
        let profiles = self
            .profiles
            .iter()
            .map(|r| r.iter().map(|p| p.map(move |_, y| alpha * y)).collect())
            .collect();
        Self { profiles }
    }

    /// Positive and negative parts, evaluated lazily.
    pub fn decompose(&self) -> (Self, Self) {
        let part = |sign: f64| {
            let profiles = self
                .profiles
                .iter()
                .map(|r| r.iter().map(|p| p.map(move |_, y| (sign * y).max(0.0))).collect())
                .collect();
            Self { profiles }
        };
        (part(1.0), part(-1.0))
    }
}

/// Element of `∂X = L¹([v_min, v_max])^N` on the velocity grid; entry
/// `i · K + k` is vertex `i` at node `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryVector {
    pub n_vertices: usize,
    pub n_nodes: usize,
    pub values: Vec<f64>,
}

impl BoundaryVector {
    pub fn zeros(n_vertices: usize, n_nodes: usize) -> Self {
        Self {
            n_vertices,
            n_nodes,
            values: vec![0.0; n_vertices * n_nodes],
        }
    }

    pub fn from_values(n_vertices: usize, n_nodes: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n_vertices * n_nodes {
            return Err(Error::Shape(format!(
                "boundary vector of length {}, expected {}",
                values.len(),
                n_vertices * n_nodes
            )));
        }
        Ok(Self {
            n_vertices,
            n_nodes,
            values,
        })
    }

    pub fn get(&self, i: usize, k: usize) -> f64 {
        self.values[i * self.n_nodes + k]
    }

    pub fn component(&self, i: usize) -> &[f64] {
        &self.values[i * self.n_nodes..(i + 1) * self.n_nodes]
    }

    /// `Σ_i Σ_k ω_k |g_i(v_k)|`.
    pub fn norm(&self, weights: &[f64]) -> f64 {
        self.values
            .iter()
            .enumerate()
            .map(|(idx, g)| weights[idx % self.n_nodes] * g.abs())
            .sum()
    }

    pub fn is_nonneg(&self) -> bool {
        lattice::is_nonneg(&self.values)
    }
}
