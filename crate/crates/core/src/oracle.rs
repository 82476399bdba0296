//! Brute-force verifiers that share no code path with the analytic modules:
//! a grid-discretised continuous-trait replicator, central finite differences
//! and Monte Carlo expectations, plus random instance generators.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::gaussian_manifold::{GaussianParams, ManifoldTangent, QuadBilinearLandscape};

const MASS_TOL: f64 = 1e-12;

/// Probability weights on the midpoints of `K` uniform cells covering
/// `[s_min, s_max]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GridDensity {
    s_min: f64,
    h: f64,
    weights: Vec<f64>,
}

impl GridDensity {
    pub fn new(s_min: f64, s_max: f64, weights: Vec<f64>) -> Result<Self> {
        if !(s_min.is_finite() && s_max.is_finite() && s_max > s_min) {
            return Err(Error::InvalidArgument(format!(
                "grid domain [{s_min}, {s_max}] is empty"
            )));
        }
        if weights.is_empty() {
            return Err(Error::InvalidArgument("grid needs at least one cell".into()));
        }
        let d = Self {
            s_min,
            h: (s_max - s_min) / weights.len() as f64,
            weights,
        };
        d.validate()?;
        Ok(d)
    }

    /// Discretised `N(mean, var)`: weights proportional to the density at the
    /// cell midpoints, renormalised.
    pub fn gaussian(s_min: f64, s_max: f64, cells: usize, mean: f64, var: f64) -> Result<Self> {
        if !(var > 0.0) {
            return Err(Error::InvalidArgument(format!("variance must be positive, got {var}")));
        }
        if cells == 0 {
            return Err(Error::InvalidArgument("grid needs at least one cell".into()));
        }
        let h = (s_max - s_min) / cells as f64;
        let raw: Vec<f64> = (0..cells)
            .map(|k| {
                let s = s_min + (k as f64 + 0.5) * h;
                (-(s - mean).powi(2) / (2.0 * var)).exp()
            })
            .collect();
        let total: f64 = raw.iter().sum();
        if !(total > 0.0) {
            return Err(Error::Degenerate("Gaussian has no mass on the grid".into()));
        }
        Self::new(s_min, s_max, raw.into_iter().map(|w| w / total).collect())
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(k) = self.weights.iter().position(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "grid weight {k} is {}",
                self.weights[k]
            )));
        }
        let mass: f64 = self.weights.iter().sum();
        if (mass - 1.0).abs() > MASS_TOL {
            return Err(Error::InvalidArgument(format!("grid mass is {mass:.17}")));
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.weights.len()
    }

    pub fn cell_width(&self) -> f64 {
        self.h
    }

    pub fn node(&self, k: usize) -> f64 {
        self.s_min + (k as f64 + 0.5) * self.h
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.cells()).map(|k| self.node(k)).collect()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

/// Time derivative of the weights under the replicator equation with fitness
/// `pi(s) = -q s^2 + b s mu`, `mu` the current mean trait.
pub fn grid_replicator_rhs(d: &GridDensity, q: f64, b: f64) -> Result<Vec<f64>> {
    d.validate()?;
    Ok(rhs_unchecked(&d.nodes(), d.weights(), q, b))
}

fn rhs_unchecked(nodes: &[f64], w: &[f64], q: f64, b: f64) -> Vec<f64> {
    let mu: f64 = nodes.iter().zip(w).map(|(s, w)| s * w).sum();
    let payoff: Vec<f64> = nodes.iter().map(|s| -q * s * s + b * s * mu).collect();
    let mean_payoff: f64 = payoff.iter().zip(w).map(|(p, w)| p * w).sum();
    w.iter()
        .zip(&payoff)
        .map(|(w, p)| w * (p - mean_payoff))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridMoments {
    pub mean: f64,
    pub variance: f64,
    /// `None` when the variance vanishes.
    pub skewness: Option<f64>,
    pub excess_kurtosis: Option<f64>,
}

pub fn grid_moments(d: &GridDensity) -> Result<GridMoments> {
    d.validate()?;
    let nodes = d.nodes();
    let w = d.weights();
    let mean: f64 = nodes.iter().zip(w).map(|(s, w)| s * w).sum();
    let central = |k: i32| -> f64 {
        nodes
            .iter()
            .zip(w)
            .map(|(s, w)| w * (s - mean).powi(k))
            .sum()
    };
    let variance = central(2);
    let (skewness, excess_kurtosis) = if variance > 0.0 {
        (
            Some(central(3) / variance.powf(1.5)),
            Some(central(4) / (variance * variance) - 3.0),
        )
    } else {
        (None, None)
    };
    Ok(GridMoments {
        mean,
        variance,
        skewness,
        excess_kurtosis,
    })
}

#[derive(Clone, Debug)]
pub struct GridRun {
    pub times: Vec<f64>,
    pub moments: Vec<GridMoments>,
    pub final_density: GridDensity,
    /// Largest `|sum(w) - 1|` seen before renormalisation, over all steps.
    pub max_mass_drift: f64,
}

/// RK4 integration of the grid replicator with renormalisation after every
/// step. Moments are recorded every `record_every` steps and at `t_end`.
pub fn integrate_grid(
    d0: &GridDensity,
    q: f64,
    b: f64,
    dt: f64,
    t_end: f64,
    record_every: usize,
) -> Result<GridRun> {
    d0.validate()?;
    if !(dt > 0.0 && t_end > 0.0) || record_every == 0 {
        return Err(Error::InvalidArgument(
            "grid integration needs dt > 0, t_end > 0 and record_every >= 1".into(),
        ));
    }
    let steps = ((t_end / dt) - 1e-9).ceil().max(1.0) as usize;
    let nodes = d0.nodes();
    let mut w = d0.weights().to_vec();
    let mut times = vec![0.0];
    let mut moments = vec![grid_moments(d0)?];
    let mut max_mass_drift: f64 = 0.0;

    let stage = |w: &[f64], k: &[f64], h: f64| -> Vec<f64> {
        w.iter().zip(k).map(|(w, k)| w + h * k).collect()
    };
    for step in 0..steps {
        let t = step as f64 * dt;
        let h = if step + 1 == steps { t_end - t } else { dt };
        let k1 = rhs_unchecked(&nodes, &w, q, b);
        let k2 = rhs_unchecked(&nodes, &stage(&w, &k1, 0.5 * h), q, b);
        let k3 = rhs_unchecked(&nodes, &stage(&w, &k2, 0.5 * h), q, b);
        let k4 = rhs_unchecked(&nodes, &stage(&w, &k3, h), q, b);
        for i in 0..w.len() {
            w[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            if !w[i].is_finite() {
                return Err(Error::NonFinite(format!("grid weight at t = {}", t + h)));
            }
            // Positivity is preserved by the exact flow; clip roundoff only.
            w[i] = w[i].max(0.0);
        }
        let mass: f64 = w.iter().sum();
        max_mass_drift = max_mass_drift.max((mass - 1.0).abs());
        w.iter_mut().for_each(|x| *x /= mass);

        if (step + 1) % record_every == 0 || step + 1 == steps {
            let t_next = if step + 1 == steps { t_end } else { (step + 1) as f64 * dt };
            let d = GridDensity {
                s_min: d0.s_min,
                h: d0.h,
                weights: w.clone(),
            };
            times.push(t_next);
            moments.push(grid_moments(&d)?);
        }
    }
    Ok(GridRun {
        times,
        moments,
        final_density: GridDensity {
            s_min: d0.s_min,
            h: d0.h,
            weights: w,
        },
        max_mass_drift,
    })
}

/// Central differences of `objective` in every coordinate of `a` and every
/// entry of `C`. An off-diagonal entry `(i, j)` is moved together with `(j, i)`,
/// each by `h/2`, so the result follows the entrywise gradient convention.
pub fn finite_diff_grad<F>(objective: F, g: &GaussianParams, h: f64) -> Result<ManifoldTangent>
where
    F: Fn(&GaussianParams) -> Result<f64>,
{
    if !(1e-8..=1e-3).contains(&h) {
        return Err(Error::InvalidArgument(format!("step h = {h} outside [1e-8, 1e-3]")));
    }
    let n = g.dim();
    let eval = |mean: DVector<f64>, cov: DMatrix<f64>| -> Result<f64> {
        let v = objective(&GaussianParams::new(mean, cov)?)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite("objective value".into()))
        }
    };

    let mut da = DVector::zeros(n);
    for i in 0..n {
        let mut plus = g.mean().clone();
        let mut minus = g.mean().clone();
        plus[i] += h;
        minus[i] -= h;
        da[i] = (eval(plus, g.cov().clone())? - eval(minus, g.cov().clone())?) / (2.0 * h);
    }

    let mut dc = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let mut bump = DMatrix::zeros(n, n);
            if i == j {
                bump[(i, i)] = h;
            } else {
                bump[(i, j)] = 0.5 * h;
                bump[(j, i)] = 0.5 * h;
            }
            let up = eval(g.mean().clone(), g.cov() + &bump)?;
            let down = eval(g.mean().clone(), g.cov() - &bump)?;
            let d = (up - down) / (2.0 * h);
            dc[(i, j)] = d;
            dc[(j, i)] = d;
        }
    }
    Ok(ManifoldTangent { da, dc })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub std_error: f64,
}

/// Sample mean of `f(s, y)` over independent pairs `s, y ~ N(a, C)`.
pub fn mc_expectation(
    l: &QuadBilinearLandscape,
    g: &GaussianParams,
    m: usize,
    seed: u64,
) -> Result<McEstimate> {
    if m < 100 {
        return Err(Error::InvalidArgument(format!("need m >= 100, got {m}")));
    }
    if l.dim() != g.dim() {
        return Err(Error::DimensionMismatch {
            what: "landscape",
            expected: g.dim(),
            got: l.dim(),
        });
    }
    let n = g.dim();
    let chol = g
        .cov()
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("covariance".into()))?;
    let lower = chol.l();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = |rng: &mut ChaCha8Rng| {
        let z = DVector::from_iterator(n, (0..n).map(|_| StandardNormal.sample(&mut *rng)));
        g.mean() + &lower * z
    };
    // Welford accumulation.
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for k in 0..m {
        let s = draw(&mut rng);
        let y = draw(&mut rng);
        let f = -s.dot(&(l.q() * &s)) + s.dot(&(l.b() * &y));
        let delta = f - mean;
        mean += delta / (k + 1) as f64;
        m2 += delta * (f - mean);
    }
    let var = m2 / (m - 1) as f64;
    Ok(McEstimate {
        mean,
        std_error: (var / m as f64).sqrt(),
    })
}

/// Random SPD matrix `M M'/n + shift I` with standard normal `M`.
pub fn random_spd<R: Rng>(rng: &mut R, n: usize, shift: f64) -> DMatrix<f64> {
    let m = random_matrix(rng, n);
    let spd = &m * m.transpose() / n as f64 + DMatrix::identity(n, n) * shift;
    (&spd + spd.transpose()) * 0.5
}

/// Matrix with i.i.d. standard normal entries.
pub fn random_matrix<R: Rng>(rng: &mut R, n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |_, _| StandardNormal.sample(&mut *rng))
}

pub fn random_vector<R: Rng>(rng: &mut R, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| StandardNormal.sample(&mut *rng))
}

/// Random landscape with `Q` SPD (eigenvalues at least `0.5`) and Gaussian `B`.
pub fn random_landscape<R: Rng>(rng: &mut R, n: usize) -> QuadBilinearLandscape {
    let q = random_spd(rng, n, 0.5);
    let b = random_matrix(rng, n);
    QuadBilinearLandscape::new(q, b).expect("random SPD Q is valid")
}

/// Random Gaussian state with covariance eigenvalues at least `0.3`.
pub fn random_gaussian<R: Rng>(rng: &mut R, n: usize) -> GaussianParams {
    let a = random_vector(rng, n);
    GaussianParams::new(a, random_spd(rng, n, 0.3)).expect("random SPD C is valid")
}

/// Random symmetric tangent `(da, dC)` with standard normal entries.
pub fn random_tangent<R: Rng>(rng: &mut R, n: usize) -> ManifoldTangent {
    let da = random_vector(rng, n);
    let m = random_matrix(rng, n);
    ManifoldTangent {
        da,
        dc: (&m + m.transpose()) * 0.5,
    }
}

/// Random interior simplex point with components bounded away from zero.
pub fn random_simplex<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let mut p: Vec<f64> = raw.iter().map(|x| x / total).collect();
    // Put the rounding residue on the largest component.
    let residue = 1.0 - p.iter().sum::<f64>();
    let imax = (0..n).max_by(|&i, &j| p[i].total_cmp(&p[j])).unwrap_or(0);
    p[imax] += residue;
    p
}
