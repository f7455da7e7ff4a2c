//! Finite-dimensional positive LTI systems under the componentwise order.
//!
//! Every algebraic identity of the infinite-dimensional theory has an exact
//! matrix shadow here, so this module doubles as the brute-force oracle for
//! transfer functions, feedback composition and perturbation series.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::lattice::dense_spectral_radius;

/// Off-diagonal entries of a Metzler matrix must be at least this.
pub const METZLER_TOL: f64 = -1e-14;

/// Slack for sign checks on computed trajectories.
pub const POSITIVITY_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct PosLti {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
}

impl PosLti {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>, d: DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::Shape(format!("A is {}x{}", n, a.ncols())));
        }
        if b.nrows() != n {
            return Err(Error::Shape(format!("B has {} rows, expected {n}", b.nrows())));
        }
        if c.ncols() != n {
            return Err(Error::Shape(format!("C has {} columns, expected {n}", c.ncols())));
        }
        if d.nrows() != c.nrows() || d.ncols() != b.ncols() {
            return Err(Error::Shape(format!(
                "D is {}x{}, expected {}x{}",
                d.nrows(),
                d.ncols(),
                c.nrows(),
                b.ncols()
            )));
        }
        Ok(Self { a, b, c, d })
    }

    /// Scalar system `x' = a x + b u, y = c x + d u`.
    pub fn scalar(a: f64, b: f64, c: f64, d: f64) -> Self {
        let m = |v| DMatrix::from_element(1, 1, v);
        Self {
            a: m(a),
            b: m(b),
            c: m(c),
            d: m(d),
        }
    }

    pub fn states(&self) -> usize {
        self.a.nrows()
    }

    pub fn inputs(&self) -> usize {
        self.b.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.c.nrows()
    }

    /// A Metzler and B, C, D entrywise nonnegative.
    pub fn is_positive(&self) -> bool {
        is_metzler(&self.a) && is_nonneg(&self.b) && is_nonneg(&self.c) && is_nonneg(&self.d)
    }

    /// Spectral abscissa of A.
    pub fn abscissa(&self) -> f64 {
        if self.states() == 0 {
            return f64::NEG_INFINITY;
        }
        self.a
            .clone()
            .complex_eigenvalues()
            .iter()
            .fold(f64::NEG_INFINITY, |s, z| s.max(z.re))
    }
}

pub fn is_metzler(a: &DMatrix<f64>) -> bool {
    (0..a.nrows()).all(|i| (0..a.ncols()).all(|j| i == j || a[(i, j)] >= METZLER_TOL))
}

pub fn is_nonneg(m: &DMatrix<f64>) -> bool {
    m.iter().all(|&x| x >= 0.0)
}

/// `e^{tA} x`.
pub fn expm_apply(a: &DMatrix<f64>, t: f64, x: &DVector<f64>) -> Result<DVector<f64>> {
    if !(t >= 0.0) {
        return Err(Error::InvalidArgument(format!("expm_apply needs t >= 0, got {t}")));
    }
    if a.nrows() != x.len() {
        return Err(Error::Shape(format!("A is {}x{}, x has {}", a.nrows(), a.ncols(), x.len())));
    }
    if t == 0.0 {
        return Ok(x.clone());
    }
    Ok((a * t).exp() * x)
}

/// One exact step of length `h` for a constant input: returns
/// `(e^{hA}, ∫_0^h e^{sA} ds B)` from the exponential of the augmented matrix.
pub(crate) fn step_operators(sys: &PosLti, h: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let (n, m) = (sys.states(), sys.inputs());
    let mut aug = DMatrix::zeros(n + m, n + m);
    aug.view_mut((0, 0), (n, n)).copy_from(&(&sys.a * h));
    aug.view_mut((0, n), (n, m)).copy_from(&(&sys.b * h));
    let e = aug.exp();
    (
        e.view((0, 0), (n, n)).into_owned(),
        e.view((0, n), (n, m)).into_owned(),
    )
}

fn check_signal(sys: &PosLti, u: &[DVector<f64>], grid: &[f64]) -> Result<()> {
    if u.len() != grid.len() {
        return Err(Error::Shape(format!("{} input samples on a grid of {}", u.len(), grid.len())));
    }
    if grid.first().is_some_and(|&t| t != 0.0) {
        return Err(Error::InvalidArgument("time grid must start at 0".into()));
    }
    if grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidArgument("time grid must be increasing".into()));
    }
    if let Some(bad) = u.iter().find(|v| v.len() != sys.inputs()) {
        return Err(Error::Shape(format!("input sample of length {}, expected {}", bad.len(), sys.inputs())));
    }
    Ok(())
}

/// Mild solution on `grid` for the piecewise-constant input holding `u[k]`
/// on `[grid[k], grid[k+1])`. Each step is integrated exactly.
pub fn simulate_mild(sys: &PosLti, x0: &DVector<f64>, u: &[DVector<f64>], grid: &[f64]) -> Result<Vec<DVector<f64>>> {
    check_signal(sys, u, grid)?;
    if x0.len() != sys.states() {
        return Err(Error::Shape(format!("x0 has {}, expected {}", x0.len(), sys.states())));
    }
    let mut out = Vec::with_capacity(grid.len());
    if grid.is_empty() {
        return Ok(out);
    }
    out.push(x0.clone());
    let mut cache: Option<(f64, DMatrix<f64>, DMatrix<f64>)> = None;
    for k in 1..grid.len() {
        let h = grid[k] - grid[k - 1];
        let reuse = matches!(&cache, Some((hc, _, _)) if (hc - h).abs() <= 1e-15 * h);
        if !reuse {
            let (e, g) = step_operators(sys, h);
            cache = Some((h, e, g));
        }
        let (_, e, g) = cache.as_ref().unwrap();
        let next = e * &out[k - 1] + g * &u[k - 1];
        out.push(next);
    }
    Ok(out)
}

/// `y(t_k) = C z(t_k) + D u(t_k)`.
pub fn io_response(sys: &PosLti, x0: &DVector<f64>, u: &[DVector<f64>], grid: &[f64]) -> Result<Vec<DVector<f64>>> {
    let z = simulate_mild(sys, x0, u, grid)?;
    Ok(z.iter().zip(u).map(|(zk, uk)| &sys.c * zk + &sys.d * uk).collect())
}

/// `H(μ) = C (μI − A)^{-1} B + D`.
pub fn transfer(sys: &PosLti, mu: f64) -> Result<DMatrix<f64>> {
    let n = sys.states();
    if n > 0 {
        let eig = sys.a.clone().complex_eigenvalues();
        for z in eig.iter() {
            if (z.re - mu).hypot(z.im) <= 1e-10 * (1.0 + mu.abs()) {
                return Err(Error::Singular { mu, eigenvalue: z.re });
            }
        }
    }
    let shifted = DMatrix::<f64>::identity(n, n) * mu - &sys.a;
    let x = shifted
        .lu()
        .solve(&sys.b)
        .ok_or(Error::Singular { mu, eigenvalue: mu })?;
    Ok(&sys.c * x + &sys.d)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Positivity {
    pub internal: bool,
    pub external: bool,
}

/// Internal positivity from the sign pattern; external positivity from the
/// impulse response `C e^{tA} B` sampled on `grid` together with `D >= 0`.
pub fn positivity_classify(sys: &PosLti, grid: &[f64]) -> Positivity {
    let internal = sys.is_positive();
    let mut external = is_nonneg(&sys.d);
    if external {
        let cb = &sys.c * &sys.b;
        let scale = cb.iter().fold(1.0f64, |m, x| m.max(x.abs()));
        for &t in grid {
            let h = &sys.c * (&sys.a * t).exp() * &sys.b;
            if h.iter().any(|&x| x < -POSITIVITY_TOL * scale) {
                external = false;
                break;
            }
        }
    }
    Positivity { internal, external }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackResult {
    pub a_k: DMatrix<f64>,
    pub b_k: DMatrix<f64>,
    pub c_k: DMatrix<f64>,
    pub d_k: DMatrix<f64>,
    pub admissible: bool,
    pub r_kd: f64,
    /// r(K H(μ₀)) at `mu0`, one unit right of the spectral abscissa.
    pub r_kh: f64,
    pub mu0: f64,
}

impl FeedbackResult {
    pub fn closed_loop(&self) -> Option<PosLti> {
        self.admissible.then(|| PosLti {
            a: self.a_k.clone(),
            b: self.b_k.clone(),
            c: self.c_k.clone(),
            d: self.d_k.clone(),
        })
    }
}

/// Closes the loop `u = K y + v`. Refused (with the radii reported) when
/// `r(KD) >= 1`.
pub fn feedback_compose(sys: &PosLti, k: &DMatrix<f64>) -> Result<FeedbackResult> {
    let (m, p) = (sys.inputs(), sys.outputs());
    if k.nrows() != m || k.ncols() != p {
        return Err(Error::Shape(format!("K is {}x{}, expected {m}x{p}", k.nrows(), k.ncols())));
    }
    if !is_nonneg(k) {
        return Err(Error::InvalidArgument("feedback K must be entrywise nonnegative".into()));
    }
    let kd = k * &sys.d;
    let r_kd = dense_spectral_radius(&kd)?;
    let mu0 = if sys.states() == 0 { 1.0 } else { sys.abscissa() + 1.0 };
    let r_kh = dense_spectral_radius(&(k * transfer(sys, mu0)?))?;
    let empty = |r, c| DMatrix::zeros(r, c);
    if r_kd >= 1.0 {
        return Ok(FeedbackResult {
            a_k: empty(0, 0),
            b_k: empty(0, 0),
            c_k: empty(0, 0),
            d_k: empty(0, 0),
            admissible: false,
            r_kd,
            r_kh,
            mu0,
        });
    }
    let inv_u = (DMatrix::<f64>::identity(m, m) - &kd)
        .try_inverse()
        .ok_or(Error::Divergent { radius: r_kd })?;
    let inv_y = (DMatrix::<f64>::identity(p, p) - &sys.d * k)
        .try_inverse()
        .ok_or(Error::Divergent { radius: r_kd })?;
    let c_k = &inv_y * &sys.c;
    Ok(FeedbackResult {
        a_k: &sys.a + &sys.b * k * &c_k,
        b_k: &sys.b * &inv_u,
        d_k: &sys.d * &inv_u,
        c_k,
        admissible: true,
        r_kd,
        r_kh,
        mu0,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeumannResult {
    pub resolvent: DMatrix<f64>,
    /// r(R(μ, A) B).
    pub ratio: f64,
    /// Bound on the ∞-norm distance to `R(μ, A + B)`.
    pub tail_bound: f64,
}

/// Partial sum `Σ_{n < n_terms} (R(μ,A) B)^n R(μ,A)` of the Neumann series
/// for `R(μ, A + B)`.
pub fn neumann_resolvent(a: &DMatrix<f64>, b: &DMatrix<f64>, mu: f64, n_terms: usize) -> Result<NeumannResult> {
    let n = a.nrows();
    if a.ncols() != n || b.nrows() != n || b.ncols() != n {
        return Err(Error::Shape("neumann_resolvent needs square A and B of equal size".into()));
    }
    let base = PosLti::new(a.clone(), DMatrix::identity(n, n), DMatrix::identity(n, n), DMatrix::zeros(n, n))?;
    let r = transfer(&base, mu)?;
    let rb = &r * b;
    let ratio = dense_spectral_radius(&rb)?;
    if ratio >= 1.0 {
        return Err(Error::Divergent { radius: ratio });
    }
    let mut term = r.clone();
    let mut sum = DMatrix::zeros(n, n);
    for _ in 0..n_terms {
        sum += &term;
        term = &rb * term;
    }
    let tail_bound = tail_bound(&r, &rb, n_terms);
    Ok(NeumannResult {
        resolvent: sum,
        ratio,
        tail_bound,
    })
}

fn inf_norm(m: &DMatrix<f64>) -> f64 {
    (0..m.nrows())
        .map(|i| m.row(i).iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Bound on `‖Σ_{n >= N} (RB)^n R‖∞`. For nonnegative `R` and `RB` the rate
/// is the Collatz-Wielandt quotient `ρ` of `RB` at `x = (I − RB)^{-1} 1`,
/// measured in the norm weighted by `x`; otherwise `‖RB‖∞` when it is below 1.
fn tail_bound(r: &DMatrix<f64>, rb: &DMatrix<f64>, n_terms: usize) -> f64 {
    let n = r.nrows();
    if n == 0 {
        return 0.0;
    }
    if is_nonneg(r) && is_nonneg(rb) {
        let ones = DVector::from_element(n, 1.0);
        if let Some(x) = (DMatrix::<f64>::identity(n, n) - rb).lu().solve(&ones) {
            if x.iter().all(|&xi| xi > 0.0 && xi.is_finite()) {
                let quotient = |m: &DMatrix<f64>| {
                    let mx = m * &x;
                    (0..n).map(|i| mx[i] / x[i]).fold(0.0, f64::max)
                };
                let rho = quotient(rb);
                if rho < 1.0 {
                    let spread = x.max() / x.min();
                    return rho.powi(n_terms as i32) / (1.0 - rho) * quotient(r) * spread;
                }
            }
        }
    }
    let q = inf_norm(rb);
    if q < 1.0 {
        q.powi(n_terms as i32) / (1.0 - q) * inf_norm(r)
    } else {
        f64::INFINITY
    }
}
