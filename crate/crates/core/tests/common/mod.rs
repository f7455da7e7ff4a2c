//! Independent reference computations shared by the integration tests.
#![allow(dead_code)]

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use posflow::graph::{Edge, MetricGraph};
use posflow::lattice::{gauss_legendre_unit, Quadrature};
use posflow::oracle::PosLti;
use posflow::transport::{Absorption, BoundaryVector, Kernel, Profile, StateField, StepHistory, TransportSystem};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut impl Rng, a: f64, b: f64) -> f64 {
    a + (b - a) * rng.gen::<f64>()
}

/// Random network satisfying the vertex and weight assumptions: at most 4
/// vertices, 6 edges and 8 velocity nodes, piecewise-constant absorption and
/// a nonnegative kernel with row mass at most one.
pub fn random_network(rng: &mut impl Rng) -> Arc<TransportSystem> {
    let n = rng.gen_range(1..=4);
    let m = rng.gen_range(n..=6);
    let mut edges = Vec::with_capacity(m);
    for j in 0..m {
        let tail = if j < n { j } else { rng.gen_range(0..n) };
        edges.push(Edge {
            tail,
            head: rng.gen_range(0..n),
            length: uniform(rng, 0.5, 2.0),
            weight: uniform(rng, 0.2, 1.0),
        });
    }
    for i in 0..n {
        let total: f64 = edges.iter().filter(|e| e.tail == i).map(|e| e.weight).sum();
        for e in edges.iter_mut().filter(|e| e.tail == i) {
            e.weight /= total;
        }
    }
    let graph = MetricGraph::uncontrolled(n, edges.clone()).unwrap();
    let kn = rng.gen_range(1..=8);
    let vmin = uniform(rng, 0.5, 1.5);
    let vgrid = Quadrature::midpoint(vmin, vmin + uniform(rng, 0.1, 1.5), kn).unwrap();
    let total_w: f64 = vgrid.weights().iter().sum();
    let absorption = edges
        .iter()
        .map(|e| {
            let segs = rng.gen_range(1..=3);
            let mut breaks = vec![0.0];
            for s in 1..segs {
                breaks.push(e.length * (s as f64 + uniform(rng, -0.3, 0.3)) / segs as f64);
            }
            breaks.push(e.length);
            let values = (0..segs).map(|_| (0..kn).map(|_| uniform(rng, -1.0, 0.3)).collect()).collect();
            Absorption::table(breaks, values).unwrap()
        })
        .collect();
    let kernels = edges
        .iter()
        .map(|_| {
            if rng.gen_bool(0.4) {
                Kernel::Identity
            } else {
                Kernel::Matrix(DMatrix::from_fn(kn, kn, |_, _| rng.gen::<f64>() / total_w))
            }
        })
        .collect();
    Arc::new(TransportSystem::new(graph, vgrid, absorption, kernels).unwrap())
}

/// Piecewise-linear profile with one jump, values in `[lo, lo + 3]`.
pub fn random_profile(rng: &mut impl Rng, length: f64, lo: f64) -> Profile {
    let c = length * uniform(rng, 0.2, 0.8);
    let (a, b) = (uniform(rng, 0.0, 2.0), uniform(rng, 0.0, 1.0) / length);
    let (d, e) = (uniform(rng, 0.0, 2.0), uniform(rng, 0.0, 1.0) / length);
    Profile::new(
        length,
        move |x| if x < c { lo + a + b * x } else { lo + d + e * x },
        vec![c],
    )
}

pub fn random_field(rng: &mut impl Rng, sys: &TransportSystem) -> StateField {
    field_with_floor(rng, sys, 0.0)
}

pub fn random_signed_field(rng: &mut impl Rng, sys: &TransportSystem) -> StateField {
    field_with_floor(rng, sys, -1.5)
}

fn field_with_floor(rng: &mut impl Rng, sys: &TransportSystem, lo: f64) -> StateField {
    StateField::from_profiles(
        (0..sys.n_edges())
            .map(|j| (0..sys.n_nodes()).map(|_| random_profile(rng, sys.length(j), lo)).collect())
            .collect(),
    )
}

pub fn random_boundary(rng: &mut impl Rng, sys: &TransportSystem) -> BoundaryVector {
    let values = (0..sys.boundary_dim()).map(|_| uniform(rng, 0.0, 2.0)).collect();
    BoundaryVector::from_values(sys.n_vertices(), sys.n_nodes(), values).unwrap()
}

/// Nonnegative vertex input, piecewise constant on a random partition of `[0, horizon]`.
pub fn random_history(rng: &mut impl Rng, sys: &TransportSystem, horizon: f64) -> StepHistory {
    let pieces = rng.gen_range(1..=5);
    let mut times: Vec<f64> = (0..pieces).map(|_| uniform(rng, 0.0, horizon)).collect();
    times[0] = 0.0;
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let values = (0..pieces)
        .map(|_| (0..sys.boundary_dim()).map(|_| uniform(rng, 0.0, 2.0)).collect())
        .collect();
    StepHistory::new(sys.n_vertices(), sys.n_nodes(), times, values, horizon).unwrap()
}

/// `∫_0^x q_j(σ, v_k) dσ`, summed segment by segment from the rates.
pub fn potential(sys: &TransportSystem, j: usize, k: usize, x: f64) -> f64 {
    let abs = sys.absorption(j);
    let mut acc = 0.0;
    for w in abs.breaks().windows(2) {
        let (a, b) = (w[0], w[1].min(x));
        if b > a {
            acc += abs.rate(k, 0.5 * (w[0] + w[1])) * (b - a);
        }
    }
    acc
}

/// Semigroup evaluated directly from the characteristic formula.
pub fn semigroup_point(sys: &TransportSystem, f: &StateField, j: usize, k: usize, x: f64, t: f64) -> f64 {
    let (l, v) = (sys.length(j), sys.velocity(k));
    let y = x + v * t;
    if y > l {
        return 0.0;
    }
    ((potential(sys, j, k, y) - potential(sys, j, k, x)) / v).exp() * f.eval(j, k, y)
}

/// Composite Gauss-Legendre integral of `g` over `[a, b]` split at `breaks`.
pub fn integrate(mut breaks: Vec<f64>, a: f64, b: f64, panels: usize, g: impl Fn(f64) -> f64) -> f64 {
    breaks.retain(|&t| t > a && t < b);
    breaks.push(a);
    breaks.push(b);
    breaks.sort_by(|p, q| p.partial_cmp(q).unwrap());
    breaks.dedup();
    let (gx, gw) = gauss_legendre_unit(10);
    let mut s = 0.0;
    for w in breaks.windows(2) {
        let h = (w[1] - w[0]) / panels as f64;
        for p in 0..panels {
            let c = w[0] + (p as f64 + 0.5) * h;
            for (xi, wi) in gx.iter().zip(&gw) {
                s += wi * 0.5 * h * g(c + 0.5 * h * xi);
            }
        }
    }
    s
}

/// `∫_0^∞ e^{−μt} (T(t) f)_j(x, v_k) dt` by quadrature in time. The integrand
/// vanishes once the characteristic leaves the edge.
pub fn laplace_of_semigroup(sys: &TransportSystem, f: &StateField, j: usize, k: usize, x: f64, mu: f64) -> f64 {
    let (l, v) = (sys.length(j), sys.velocity(k));
    let t_end = (l - x) / v;
    let breaks = f
        .profile(j, k)
        .breaks()
        .iter()
        .chain(sys.absorption(j).breaks())
        .filter(|&&y| y > x)
        .map(|&y| (y - x) / v)
        .collect();
    integrate(breaks, 0.0, t_end, 4, |t| (-mu * t).exp() * semigroup_point(sys, f, j, k, x, t))
}

/// Trajectory of the interconnection `u = K y + w` with
/// `y = (I − D K)^{-1} (C z + D w)`, integrated by classical RK4 with
/// `substeps` steps per input interval. Returns states and outputs on `grid`.
pub fn rk4_interconnection(
    sys: &PosLti,
    k: &DMatrix<f64>,
    z0: &DVector<f64>,
    w: &[DVector<f64>],
    grid: &[f64],
    substeps: usize,
) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
    let p = sys.c.nrows();
    let solve_y = (DMatrix::<f64>::identity(p, p) - &sys.d * k).try_inverse().unwrap();
    let output = |z: &DVector<f64>, wk: &DVector<f64>| &solve_y * (&sys.c * z + &sys.d * wk);
    let rhs = |z: &DVector<f64>, wk: &DVector<f64>| {
        let u = k * output(z, wk) + wk;
        &sys.a * z + &sys.b * u
    };
    let mut z = z0.clone();
    let mut states = vec![z.clone()];
    let mut outputs = vec![output(&z, &w[0])];
    for n in 1..grid.len() {
        let h = (grid[n] - grid[n - 1]) / substeps as f64;
        let wk = &w[n - 1];
        for _ in 0..substeps {
            let k1 = rhs(&z, wk);
            let k2 = rhs(&(&z + &k1 * (0.5 * h)), wk);
            let k3 = rhs(&(&z + &k2 * (0.5 * h)), wk);
            let k4 = rhs(&(&z + &k3 * h), wk);
            z += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        }
        states.push(z.clone());
        outputs.push(output(&z, &w[n.min(w.len() - 1)]));
    }
    (states, outputs)
}

/// Random positive system with `B, C` entries in `[0, 0.5)` and `D` in `[0, 0.5)`.
pub fn random_lti(rng: &mut impl Rng, n: usize, m: usize, p: usize) -> PosLti {
    let mut a = DMatrix::from_fn(n, n, |_, _| 0.5 * rng.gen::<f64>());
    for i in 0..n {
        a[(i, i)] = -uniform(rng, 0.5, 3.0);
    }
    let b = DMatrix::from_fn(n, m, |_, _| 0.5 * rng.gen::<f64>());
    let c = DMatrix::from_fn(p, n, |_, _| 0.5 * rng.gen::<f64>());
    let d = DMatrix::from_fn(p, m, |_, _| 0.5 * rng.gen::<f64>());
    PosLti::new(a, b, c, d).unwrap()
}

/// Largest eigenvalue modulus, from nalgebra's Schur form.
pub fn eig_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Nonnegative `K` rescaled so that `r(K D)` equals `target`.
pub fn gain_with_radius(rng: &mut impl Rng, d: &DMatrix<f64>, target: f64) -> DMatrix<f64> {
    loop {
        let k = DMatrix::from_fn(d.ncols(), d.nrows(), |_, _| rng.gen::<f64>());
        let r = eig_radius(&(&k * d));
        if r > 1e-3 {
            return k * (target / r);
        }
    }
}

/// Sample points along each edge, including both ends.
pub fn edge_samples(sys: &TransportSystem, j: usize, n: usize) -> Vec<f64> {
    let l = sys.length(j);
    (0..=n).map(|i| l * i as f64 / n as f64).collect()
}

/// `max |a − b|` and `max |b|` over edge samples.
pub fn compare_fields(sys: &TransportSystem, a: &StateField, b: &StateField, n: usize) -> (f64, f64) {
    let (mut err, mut scale) = (0.0f64, 0.0f64);
    for j in 0..sys.n_edges() {
        for k in 0..sys.n_nodes() {
            for x in edge_samples(sys, j, n) {
                let (p, q) = (a.eval(j, k, x), b.eval(j, k, x));
                err = err.max((p - q).abs());
                scale = scale.max(q.abs());
            }
        }
    }
    (err, scale)
}
