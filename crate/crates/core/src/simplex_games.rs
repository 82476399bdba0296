//! Evolutionary games on the categorical manifold.
//!
//! A population state is an interior point of the probability simplex. The
//! replicator field `p_i (f_i(p) - <f(p)>)` is the gradient of a potential with
//! respect to the Shahshahani metric whenever the payoff matrix is symmetric,
//! and the cross-entropy `kl(target, p)` is a Lyapunov function near an
//! interior ESS.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};
use crate::flow_engine::Trajectory;

/// Smallest component accepted by [`SimplexPoint::new`].
pub const INTERIOR_EPS: f64 = 1e-12;
/// Tolerance on `|sum(p) - 1|`.
pub const SUM_TOL: f64 = 1e-12;

/// Interior point of the probability simplex.
#[derive(Clone, Debug, PartialEq)]
pub struct SimplexPoint(DVector<f64>);

impl SimplexPoint {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        Self::with_floor(p, INTERIOR_EPS)
    }

    /// Like [`SimplexPoint::new`] but with a caller-chosen lower bound on every component.
    pub fn with_floor(p: Vec<f64>, floor: f64) -> Result<Self> {
        if p.is_empty() {
            return Err(Error::NotInterior("empty probability vector".into()));
        }
        if let Some(i) = p.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("simplex component p[{i}]")));
        }
        if let Some((i, &v)) = p.iter().enumerate().find(|(_, &v)| v < floor) {
            return Err(Error::NotInterior(format!(
                "p[{i}] = {v:e} is below {floor:e}"
            )));
        }
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > SUM_TOL {
            return Err(Error::NotInterior(format!(
                "components sum to {sum:.17} instead of 1"
            )));
        }
        Ok(Self(DVector::from_vec(p)))
    }

    pub fn uniform(n: usize) -> Self {
        Self(DVector::from_element(n, 1.0 / n as f64))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }
}

type FitnessFn = dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync;

/// Fitness assignment on the simplex.
#[derive(Clone)]
pub enum FiniteLandscape {
    /// Linear landscape `f(p) = A p`.
    Matrix(DMatrix<f64>),
    /// Arbitrary landscape `p -> f(p)` of fixed dimension.
    Function { dim: usize, f: Arc<FitnessFn> },
}

impl fmt::Debug for FiniteLandscape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Matrix(a) => f.debug_tuple("Matrix").field(a).finish(),
            Self::Function { dim, .. } => f.debug_struct("Function").field("dim", dim).finish(),
        }
    }
}

impl FiniteLandscape {
    pub fn matrix(a: DMatrix<f64>) -> Result<Self> {
        check_dim("payoff matrix columns", a.nrows(), a.ncols())?;
        if a.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("payoff matrix".into()));
        }
        Ok(Self::Matrix(a))
    }

    pub fn function<F>(dim: usize, f: F) -> Self
    where
        F: Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    {
        Self::Function { dim, f: Arc::new(f) }
    }

    /// Constant fitness `(c, ..., c)`.
    pub fn constant(dim: usize, c: f64) -> Self {
        Self::function(dim, move |_| DVector::from_element(dim, c))
    }

    /// Fitness vector that does not depend on `p`.
    pub fn fixed(values: Vec<f64>) -> Self {
        let v = DVector::from_vec(values);
        Self::function(v.len(), move |_| v.clone())
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Matrix(a) => a.nrows(),
            Self::Function { dim, .. } => *dim,
        }
    }

    pub fn fitness(&self, p: &SimplexPoint) -> Result<DVector<f64>> {
        check_dim("landscape", self.dim(), p.dim())?;
        let f = match self {
            Self::Matrix(a) => a * p.as_vector(),
            Self::Function { f, .. } => f(p.as_vector()),
        };
        check_dim("fitness vector", p.dim(), f.len())?;
        Ok(f)
    }
}

/// `<f(p)> = sum_i p_i f_i(p)`.
pub fn mean_fitness(p: &SimplexPoint, landscape: &FiniteLandscape) -> Result<f64> {
    Ok(p.as_vector().dot(&landscape.fitness(p)?))
}

/// Replicator vector field `v_i = p_i (f_i(p) - <f(p)>)`.
pub fn replicator_rhs(p: &SimplexPoint, landscape: &FiniteLandscape) -> Result<DVector<f64>> {
    let f = landscape.fitness(p)?;
    let mean = p.as_vector().dot(&f);
    Ok(p.as_vector().component_mul(&f.add_scalar(-mean)))
}

/// Gradient of a potential `V` with respect to the Shahshahani metric, restricted
/// to the tangent space of the simplex. `grad_v` holds the Euclidean partials.
pub fn shahshahani_gradient(p: &SimplexPoint, grad_v: &DVector<f64>) -> Result<DVector<f64>> {
    check_dim("potential gradient", p.dim(), grad_v.len())?;
    let p = p.as_vector();
    let projected = p.dot(grad_v);
    Ok(DVector::from_fn(p.len(), |i, _| {
        p[i] * (grad_v[i] - projected)
    }))
}

/// `u - ln(1 + u)`, accurate for small `|u|`.
fn excess_log(u: f64) -> f64 {
    if u.abs() < 1e-3 {
        let u2 = u * u;
        u2 * (0.5 - u / 3.0 + u2 / 4.0 - u2 * u / 5.0 + u2 * u2 / 6.0)
    } else {
        u - u.ln_1p()
    }
}

/// Categorical Kullback-Leibler divergence `sum_i p_i ln(p_i / q_i)`.
///
/// Evaluated as `sum_i p_i (u_i - ln(1 + u_i))` with `u_i = q_i / p_i - 1`, which
/// is the same quantity on the simplex but keeps every term nonnegative and
/// avoids cancellation when `q` is close to `p`.
pub fn kl_categorical(p: &SimplexPoint, q: &SimplexPoint) -> Result<f64> {
    check_dim("kl_categorical", p.dim(), q.dim())?;
    Ok(p.as_slice()
        .iter()
        .zip(q.as_slice())
        .map(|(&pi, &qi)| pi * excess_log((qi - pi) / pi))
        .sum())
}

/// Fisher information of the categorical family, `diag(1/p_i)`.
pub fn fisher_categorical(p: &SimplexPoint) -> DMatrix<f64> {
    DMatrix::from_diagonal(&p.as_vector().map(|x| 1.0 / x))
}

/// Cross-entropy Lyapunov series `kl(target, p(t))` along a trajectory.
pub fn lyapunov_series(
    target: &SimplexPoint,
    traj: &Trajectory<SimplexPoint>,
) -> Result<Vec<f64>> {
    traj.states()
        .iter()
        .map(|p| kl_categorical(target, p))
        .collect()
}

/// Outcome of the perturbation test in [`ess_candidate`].
#[derive(Clone, Debug, PartialEq)]
pub struct EssVerdict {
    pub candidate: bool,
    /// Smallest observed `(p_hat - p) . f(p)` over the mesh.
    pub min_margin: f64,
    pub probes: usize,
}

/// Radius of the perturbation mesh used by [`ess_candidate`].
pub const ESS_PROBE_RADIUS: f64 = 1e-3;

/// Samples the ESS condition `p_hat . f(p) > p . f(p)` on a deterministic mesh of
/// nearby interior points. This can falsify an ESS but never proves one.
///
/// The mesh uses the edge directions `e_i - e_j` (both signs) and the directions
/// towards each vertex, each normalised to length [`ESS_PROBE_RADIUS`].
pub fn ess_candidate(p_hat: &SimplexPoint, landscape: &FiniteLandscape) -> Result<EssVerdict> {
    check_dim("landscape", landscape.dim(), p_hat.dim())?;
    let n = p_hat.dim();
    let base = p_hat.as_vector();
    let mut directions: Vec<DVector<f64>> = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let mut d = DVector::zeros(n);
                d[i] = 1.0;
                d[j] = -1.0;
                directions.push(d);
            }
        }
        let mut d = -base.clone();
        d[i] += 1.0;
        if d.norm() > 0.0 {
            directions.push(d);
        }
    }

    let mut min_margin = f64::INFINITY;
    let mut probes = 0;
    for d in directions {
        let step = &d * (ESS_PROBE_RADIUS / d.norm());
        let probe = base + step;
        if probe.iter().any(|&x| x <= 0.0) {
            continue;
        }
        let sum = probe.sum();
        let probe = SimplexPoint(probe / sum);
        let f = landscape.fitness(&probe)?;
        let margin = base.dot(&f) - probe.as_vector().dot(&f);
        min_margin = min_margin.min(margin);
        probes += 1;
    }
    if probes == 0 {
        return Err(Error::Degenerate(
            "no interior perturbation fits around the candidate".into(),
        ));
    }
    Ok(EssVerdict {
        candidate: min_margin > 0.0,
        min_margin,
        probes,
    })
}
