//! Explicit operators of the transport network, evaluated along
//! characteristics.

use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::lattice::gauss_legendre_unit;

use super::field::{BoundaryVector, Profile, StateField};
use super::signal::{BoundaryHistory, BoundarySignal};
use super::system::TransportSystem;

/// Gauss-Legendre order for the resolvent's inner integrals.
const RESOLVENT_ORDER: usize = 10;

/// `(T(t) f)_j(x, v) = exp(∫_0^t q_j(x + vσ, v) dσ) f_j(x + vt, v)` when
/// `x + vt <= l_j`, and 0 otherwise.
pub fn semigroup_apply(sys: &TransportSystem, f: &StateField, t: f64) -> Result<StateField> {
    if !(t >= 0.0) {
        return Err(Error::InvalidArgument(format!("semigroup needs t >= 0, got {t}")));
    }
    f.check_shape(sys)?;
    if t == 0.0 {
        return Ok(f.clone());
    }
    let profiles = (0..sys.n_edges())
        .map(|j| {
            (0..sys.n_nodes())
                .map(|k| {
                    let l = sys.length(j);
                    let v = sys.velocity(k);
                    let d = v * t;
                    let src = f.profile(j, k).clone();
                    let abs = sys.absorption(j).clone();
                    let mut breaks: Vec<f64> = src.breaks().iter().map(|b| b - d).collect();
                    breaks.push(l - d);
                    breaks.extend(abs.breaks().iter().flat_map(|&b| [b, b - d]));
                    Profile::new(
                        l,
                        move |x| {
                            let y = x + d;
                            if y <= l {
                                ((abs.potential(k, y) - abs.potential(k, x)) / v).exp() * src.eval(y)
                            } else {
                                0.0
                            }
                        },
                        breaks,
                    )
                })
                .collect()
        })
        .collect();
    Ok(StateField::from_profiles(profiles))
}

/// `(R(μ, A) f)_j(x, v) = ∫_x^{l_j} exp(∫_x^y (q_j(σ, v) − μ)/v dσ) f_j(y, v) dy / v`.
///
/// The inner exponentials are closed form; the outer integral is accumulated
/// from `x = l_j` downwards on a breaks-aligned grid of Gauss-Legendre cells.
pub fn resolvent_apply(sys: &TransportSystem, f: &StateField, mu: f64) -> Result<StateField> {
    let q_tilde = sys.q_tilde();
    if !(mu > q_tilde) {
        return Err(Error::InvalidArgument(format!("resolvent needs mu > q~ = {q_tilde}, got {mu}")));
    }
    f.check_shape(sys)?;
    let (gx, gw) = gauss_legendre_unit(RESOLVENT_ORDER);
    let (gx, gw) = (Arc::new(gx), Arc::new(gw));
    let profiles = (0..sys.n_edges())
        .map(|j| {
            (0..sys.n_nodes())
                .map(|k| {
                    let l = sys.length(j);
                    let v = sys.velocity(k);
                    let src = f.profile(j, k).clone();
                    let abs = sys.absorption(j).clone();

                    let h = (l / 16.0).min(2.0 * v / (mu + q_tilde));
                    let n_uniform = (l / h).ceil() as usize;
                    let mut cells: Vec<f64> = (0..=n_uniform).map(|i| (i as f64 * l / n_uniform as f64).min(l)).collect();
                    cells.extend(src.breaks().iter().copied());
                    cells.extend(abs.breaks().iter().copied());
                    cells.retain(|x| (0.0..=l).contains(x));
                    cells.sort_by(|a, b| a.partial_cmp(b).unwrap());
                    cells.dedup();

                    // ∫_a^b exp((P(y) − P(a) − μ(y − a))/v) f(y) dy / v
                    let piece = {
                        let (src, abs, gx, gw) = (src.clone(), abs.clone(), gx.clone(), gw.clone());
                        move |a: f64, b: f64| -> f64 {
                            if b <= a {
                                return 0.0;
                            }
                            let (c, r) = (0.5 * (a + b), 0.5 * (b - a));
                            let pa = abs.potential(k, a);
                            let mut s = 0.0;
                            for (xi, wi) in gx.iter().zip(gw.iter()) {
                                let y = c + r * xi;
                                let e = ((abs.potential(k, y) - pa - mu * (y - a)) / v).exp();
                                s += wi * e * src.eval(y);
                            }
                            s * r / v
                        }
                    };
                    let transfer = {
                        let abs = abs.clone();
                        move |a: f64, b: f64| ((abs.potential(k, b) - abs.potential(k, a) - mu * (b - a)) / v).exp()
                    };

                    let m = cells.len();
                    let mut acc = vec![0.0; m];
                    for i in (0..m - 1).rev() {
                        acc[i] = transfer(cells[i], cells[i + 1]) * acc[i + 1] + piece(cells[i], cells[i + 1]);
                    }
                    let cells = Arc::new(cells);
                    let acc = Arc::new(acc);
                    let breaks = cells.to_vec();
                    Profile::new(
                        l,
                        move |x| {
                            if x >= l {
                                return 0.0;
                            }
                            let x = x.max(0.0);
                            let i = cells.partition_point(|&c| c <= x).saturating_sub(1).min(cells.len() - 2);
                            let right = cells[i + 1];
                            transfer(x, right) * acc[i + 1] + piece(x, right)
                        },
                        breaks,
                    )
                })
                .collect()
        })
        .collect();
    Ok(StateField::from_profiles(profiles))
}

/// `(D_μ g)_j(x, v) = exp(∫_x^{l_j} (q_j(σ, v) − μ)/v dσ) Σ_i w_ij g_i(v)`.
pub fn dirichlet_apply(sys: &TransportSystem, g: &BoundaryVector, mu: f64) -> Result<StateField> {
    check_boundary(sys, g)?;
    let profiles = (0..sys.n_edges())
        .map(|j| {
            let e = *sys.graph().edge(j);
            (0..sys.n_nodes())
                .map(|k| {
                    let v = sys.velocity(k);
                    let c = e.weight * g.get(e.tail, k);
                    let abs = sys.absorption(j).clone();
                    let l = e.length;
                    let pl = abs.potential(k, l);
                    let breaks = abs.breaks().to_vec();
                    if c == 0.0 {
                        return Profile::zero(l);
                    }
                    Profile::new(l, move |x| c * ((pl - abs.potential(k, x) - mu * (l - x)) / v).exp(), breaks)
                })
                .collect()
        })
        .collect();
    Ok(StateField::from_profiles(profiles))
}

fn check_boundary(sys: &TransportSystem, g: &BoundaryVector) -> Result<()> {
    if g.n_vertices != sys.n_vertices() || g.n_nodes != sys.n_nodes() || g.values.len() != sys.boundary_dim() {
        return Err(Error::Shape(format!(
            "boundary vector is {}x{}, system has {} vertices x {} nodes",
            g.n_vertices,
            g.n_nodes,
            sys.n_vertices(),
            sys.n_nodes()
        )));
    }
    Ok(())
}

/// Outflow traces `f_j(0, ·)` of every edge.
pub fn outflow_traces(sys: &TransportSystem, f: &StateField) -> Vec<Vec<f64>> {
    (0..sys.n_edges())
        .map(|j| (0..sys.n_nodes()).map(|k| f.eval(j, k, 0.0)).collect())
        .collect()
}

/// Scatters per-edge outflow traces at `x = 0` and routes them to head
/// vertices: `Γ`-side assembly `I_in (J f)(0, ·)`.
pub fn scatter_to_vertices(sys: &TransportSystem, outflow: &[Vec<f64>]) -> BoundaryVector {
    let mut out = BoundaryVector::zeros(sys.n_vertices(), sys.n_nodes());
    for (j, trace) in outflow.iter().enumerate() {
        if trace.iter().all(|&x| x == 0.0) {
            continue;
        }
        let head = sys.graph().edge(j).head;
        let s = sys.kernel(j).scatter(trace, sys.weights());
        for (k, val) in s.into_iter().enumerate() {
            out.values[sys.bindex(head, k)] += val;
        }
    }
    out
}

/// Boundary operators: `(G f)_i = Σ_{j out of i} f_j(l_j, ·)` and
/// `Γ f = I_in (J f)(0, ·)`.
pub fn boundary_traces(sys: &TransportSystem, f: &StateField) -> Result<(BoundaryVector, BoundaryVector)> {
    f.check_shape(sys)?;
    let mut g = BoundaryVector::zeros(sys.n_vertices(), sys.n_nodes());
    for j in 0..sys.n_edges() {
        let tail = sys.graph().edge(j).tail;
        let l = sys.length(j);
        for k in 0..sys.n_nodes() {
            g.values[sys.bindex(tail, k)] += f.eval(j, k, l);
        }
    }
    let gamma = scatter_to_vertices(sys, &outflow_traces(sys, f));
    Ok((g, gamma))
}

fn check_history(sys: &TransportSystem, u: &dyn BoundaryHistory, t: f64) -> Result<()> {
    if u.components() != sys.n_vertices() || u.nodes() != sys.n_nodes() {
        return Err(Error::Shape(format!(
            "boundary history is {}x{}, system has {} vertices x {} nodes",
            u.components(),
            u.nodes(),
            sys.n_vertices(),
            sys.n_nodes()
        )));
    }
    if u.horizon() < t {
        return Err(Error::ShortHistory {
            available: u.horizon(),
            requested: t,
        });
    }
    Ok(())
}

/// Input map `(Φ_t u)_j(x, v) = exp(∫_x^{l_j} q/v dσ) w_j u_{tail(j)}(t − (l_j − x)/v)`
/// for `t >= (l_j − x)/v`, and 0 before the characteristic reaches `x`.
pub fn input_map(sys: &TransportSystem, u: Arc<dyn BoundaryHistory>, t: f64) -> Result<StateField> {
    if !(t >= 0.0) {
        return Err(Error::InvalidArgument(format!("input map needs t >= 0, got {t}")));
    }
    check_history(sys, u.as_ref(), t)?;
    let input_breaks: Vec<f64> = u.breakpoints().into_iter().filter(|&s| s >= 0.0 && s <= t).collect();
    let profiles = (0..sys.n_edges())
        .map(|j| {
            let e = *sys.graph().edge(j);
            (0..sys.n_nodes())
                .map(|k| {
                    let (l, v, w) = (e.length, sys.velocity(k), e.weight);
                    if w == 0.0 {
                        return Profile::zero(l);
                    }
                    let abs = sys.absorption(j).clone();
                    let pl = abs.potential(k, l);
                    let u = u.clone();
                    let tail = e.tail;
                    let mut breaks: Vec<f64> = input_breaks.iter().map(|s| l - v * (t - s)).collect();
                    breaks.push(l - v * t);
                    breaks.extend(abs.breaks().iter().copied());
                    Profile::new(
                        l,
                        move |x| {
                            let s = t - (l - x) / v;
                            if s >= 0.0 {
                                ((pl - abs.potential(k, x)) / v).exp() * w * u.eval(tail, k, s)
                            } else {
                                0.0
                            }
                        },
                        breaks,
                    )
                })
                .collect()
        })
        .collect();
    Ok(StateField::from_profiles(profiles))
}

/// Input-output map `(𝔽u)(t) = Γ Φ_t u`, sampled at `tgrid`. Edge `j`
/// contributes at node `v_b` only once `t >= l_j / v_b`; before the shortest
/// transit time the output is exactly zero.
pub fn io_map(sys: &TransportSystem, u: &dyn BoundaryHistory, tgrid: &[f64]) -> Result<BoundarySignal> {
    let t_end = tgrid.iter().cloned().fold(0.0, f64::max);
    check_history(sys, u, t_end)?;
    let (m, kn) = (sys.n_edges(), sys.n_nodes());
    let gains: Vec<Vec<f64>> = (0..m)
        .map(|j| {
            let abs = sys.absorption(j);
            (0..kn)
                .map(|k| (abs.potential(k, sys.length(j)) / sys.velocity(k)).exp())
                .collect()
        })
        .collect();
    let mut values = Vec::with_capacity(tgrid.len());
    for &t in tgrid {
        let mut outflow = vec![vec![0.0; kn]; m];
        for (j, row) in outflow.iter_mut().enumerate() {
            let e = sys.graph().edge(j);
            if e.weight == 0.0 {
                continue;
            }
            for (k, slot) in row.iter_mut().enumerate() {
                let delay = sys.transit(j, k);
                if t >= delay {
                    *slot = gains[j][k] * e.weight * u.eval(e.tail, k, t - delay);
                }
            }
        }
        values.push(scatter_to_vertices(sys, &outflow).values);
    }
    Ok(BoundarySignal {
        n_vertices: sys.n_vertices(),
        n_nodes: kn,
        times: tgrid.to_vec(),
        values,
    })
}

/// Matrix of `g ↦ Γ D_μ g` on the velocity grid, quadrature weights folded in.
pub fn transfer_operator(sys: &TransportSystem, mu: f64) -> DMatrix<f64> {
    let kn = sys.n_nodes();
    let dim = sys.boundary_dim();
    let mut h = DMatrix::zeros(dim, dim);
    for j in 0..sys.n_edges() {
        let e = sys.graph().edge(j);
        if e.weight == 0.0 {
            continue;
        }
        let abs = sys.absorption(j);
        let kern = sys.kernel(j);
        for b in 0..kn {
            let v = sys.velocity(b);
            let lift = e.weight * ((abs.potential(b, e.length) - mu * e.length) / v).exp();
            for a in 0..kn {
                let c = kern.coefficient(a, b, sys.weights());
                if c != 0.0 {
                    h[(sys.bindex(e.head, a), sys.bindex(e.tail, b))] += c * lift;
                }
            }
        }
    }
    h
}
