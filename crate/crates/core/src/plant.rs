//! Discrete-time linear state-space plant.
//!
//! ```text
//! g[k+1] = A g[k] + B u[k] + E d[k]
//! y[k]   = C g[k]
//! ```
//!
//! The state `g` is glucose in raw model units, `u` the control rate and `d`
//! an exogenous disturbance (meals). Control bounds and the per-step rate
//! limit travel with the model so every consumer sees the same limits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, ShapeError};
use crate::linalg::{norm2, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearSsm {
    a: Matrix,
    b: Matrix,
    c: Matrix,
    e: Matrix,
    u_min: Vec<f64>,
    u_max: Vec<f64>,
    du_max: f64,
}

impl LinearSsm {
    pub fn new(
        a: Matrix,
        b: Matrix,
        c: Matrix,
        e: Matrix,
        u_min: Vec<f64>,
        u_max: Vec<f64>,
        du_max: f64,
    ) -> Result<Self> {
        let nx = a.rows();
        if !a.is_square() {
            return Err(ShapeError::new("plant A", format!("{}x{} is not square", a.rows(), a.cols())).into());
        }
        if nx == 0 {
            return Err(Error::invalid("plant", "state dimension must be positive"));
        }
        let nu = b.cols();
        let ny = c.rows();
        let nd = e.cols();
        if b.rows() != nx || nu == 0 {
            return Err(ShapeError::new("plant B", format!("expected {nx}xnu with nu>0, got {}x{}", b.rows(), b.cols())).into());
        }
        if c.cols() != nx || ny == 0 {
            return Err(ShapeError::new("plant C", format!("expected nyx{nx} with ny>0, got {}x{}", c.rows(), c.cols())).into());
        }
        if e.rows() != nx || nd == 0 {
            return Err(ShapeError::new("plant E", format!("expected {nx}xnd with nd>0, got {}x{}", e.rows(), e.cols())).into());
        }
        if u_min.len() != nu || u_max.len() != nu {
            return Err(ShapeError::new(
                "plant bounds",
                format!("u_min/u_max must have length {nu}, got {}/{}", u_min.len(), u_max.len()),
            )
            .into());
        }
        if let Some(i) = (0..nu).find(|&i| !(u_min[i] < u_max[i])) {
            return Err(Error::invalid("plant bounds", format!("u_min[{i}] must be < u_max[{i}]")));
        }
        if !(du_max > 0.0) || !du_max.is_finite() {
            return Err(Error::invalid("plant du_max", format!("must be positive and finite, got {du_max}")));
        }
        let all = [&a, &b, &c, &e];
        if all.iter().any(|m| m.as_slice().iter().any(|x| !x.is_finite())) {
            return Err(Error::invalid("plant", "matrices must be finite"));
        }
        Ok(Self { a, b, c, e, u_min, u_max, du_max })
    }

    /// Scalar plant shipped as the default. The control input raises the
    /// output so the target band is reachable at steady state.
    pub fn default_scalar() -> Self {
        Self::scalar(0.95, 0.5, 1.0, 0.3, 0.0, 5.0, 1.0)
    }

    pub fn scalar(a: f64, b: f64, c: f64, e: f64, u_min: f64, u_max: f64, du_max: f64) -> Self {
        let m = |v: f64| Matrix::from_row_major(1, 1, vec![v]).expect("1x1");
        Self::new(m(a), m(b), m(c), m(e), vec![u_min], vec![u_max], du_max).expect("valid scalar plant")
    }

    pub fn nx(&self) -> usize {
        self.a.rows()
    }
    pub fn nu(&self) -> usize {
        self.b.cols()
    }
    pub fn ny(&self) -> usize {
        self.c.rows()
    }
    pub fn nd(&self) -> usize {
        self.e.cols()
    }
    pub fn a(&self) -> &Matrix {
        &self.a
    }
    pub fn b(&self) -> &Matrix {
        &self.b
    }
    pub fn c(&self) -> &Matrix {
        &self.c
    }
    pub fn e(&self) -> &Matrix {
        &self.e
    }
    pub fn u_min(&self) -> &[f64] {
        &self.u_min
    }
    pub fn u_max(&self) -> &[f64] {
        &self.u_max
    }
    pub fn du_max(&self) -> f64 {
        self.du_max
    }

    /// `A g + B u + E d`.
    pub fn step(&self, g: &[f64], u: &[f64], d: &[f64]) -> Result<Vec<f64>, ShapeError> {
        check_len("step", "g", g, self.nx())?;
        check_len("step", "u", u, self.nu())?;
        check_len("step", "d", d, self.nd())?;
        let mut next = vec![0.0; self.nx()];
        let mut tmp = vec![0.0; self.nx()];
        self.a.matvec_into(g, &mut next);
        self.b.matvec_into(u, &mut tmp);
        next.iter_mut().zip(&tmp).for_each(|(n, t)| *n += t);
        self.e.matvec_into(d, &mut tmp);
        next.iter_mut().zip(&tmp).for_each(|(n, t)| *n += t);
        Ok(next)
    }

    /// `C g`.
    pub fn observe(&self, g: &[f64]) -> Result<Vec<f64>, ShapeError> {
        check_len("observe", "g", g, self.nx())?;
        let mut y = vec![0.0; self.ny()];
        self.c.matvec_into(g, &mut y);
        Ok(y)
    }

    /// Returns a copy with different control bounds.
    pub fn with_bounds(&self, u_min: Vec<f64>, u_max: Vec<f64>, du_max: f64) -> Result<Self> {
        Self::new(self.a.clone(), self.b.clone(), self.c.clone(), self.e.clone(), u_min, u_max, du_max)
    }

    pub fn spectral_radius(&self) -> Result<f64> {
        spectral_radius(&self.a)
    }
}

fn check_len(op: &str, name: &str, v: &[f64], n: usize) -> Result<(), ShapeError> {
    if v.len() != n {
        return Err(ShapeError::new(op, format!("operand `{name}` has length {}, expected {n}", v.len())));
    }
    Ok(())
}

/// Control bounds handed to [`euler_discretize`].
#[derive(Debug, Clone, PartialEq)]
pub struct ControlBounds {
    pub u_min: Vec<f64>,
    pub u_max: Vec<f64>,
    pub du_max: f64,
}

/// Forward-Euler discretization of `dg/dt = Ac g + Bc u + Ec d`:
/// `A = I + dt Ac`, `B = dt Bc`, `E = dt Ec`. The observation map is identity
/// when `c` is `None`.
pub fn euler_discretize(
    ac: &Matrix,
    bc: &Matrix,
    ec: &Matrix,
    c: Option<Matrix>,
    dt: f64,
    bounds: ControlBounds,
) -> Result<LinearSsm> {
    if !ac.is_square() {
        return Err(ShapeError::new("euler_discretize", format!("Ac is {}x{}, not square", ac.rows(), ac.cols())).into());
    }
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::invalid("euler_discretize dt", format!("must be > 0, got {dt}")));
    }
    let a = Matrix::identity(ac.rows()).add(&ac.scaled(dt))?;
    let c = c.unwrap_or_else(|| Matrix::identity(ac.rows()));
    LinearSsm::new(a, bc.scaled(dt), c, ec.scaled(dt), bounds.u_min, bounds.u_max, bounds.du_max)
}

const RADIUS_TOL: f64 = 1e-9;
const RADIUS_MAX_ITERS: usize = 10_000;

/// Largest absolute eigenvalue of a square matrix.
///
/// Power iteration on the matrix itself: `A` is repeatedly squared and
/// renormalised, and the estimate `||A^(2^j)||^(1/2^j)` is refined until two
/// successive estimates agree to a relative tolerance of 1e-9. Working on the
/// matrix rather than a single vector keeps complex-conjugate and `±λ` pairs
/// from oscillating.
pub fn spectral_radius(a: &Matrix) -> Result<f64> {
    if !a.is_square() {
        return Err(ShapeError::new("spectral_radius", format!("{}x{} is not square", a.rows(), a.cols())).into());
    }
    if a.rows() == 0 {
        return Ok(0.0);
    }
    let n0 = a.norm();
    if n0 == 0.0 {
        return Ok(0.0);
    }
    let mut m = a.scaled(1.0 / n0);
    // log ||A^(2^j)|| accumulated in a form that never overflows.
    let mut log_norm = n0.ln();
    let mut power = 1.0_f64;
    let mut estimate = n0;
    for _ in 0..RADIUS_MAX_ITERS {
        let sq = m.matmul(&m)?;
        let s = sq.norm();
        if s == 0.0 {
            return Ok(0.0);
        }
        log_norm = 2.0 * log_norm + s.ln();
        power *= 2.0;
        m = sq.scaled(1.0 / s);
        let next = (log_norm / power).exp();
        if !power.is_finite() {
            break;
        }
        if (next - estimate).abs() <= RADIUS_TOL * next.abs() {
            return Ok(next);
        }
        estimate = next;
    }
    Err(Error::Numerical(format!(
        "spectral radius did not converge within {RADIUS_MAX_ITERS} iterations"
    )))
}

/// Euclidean norm of a state, used by stability checks.
pub fn state_norm(g: &[f64]) -> f64 {
    norm2(g)
}
