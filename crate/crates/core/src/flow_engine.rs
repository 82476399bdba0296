//! Fixed-step RK4 integration of the replicator flows, the closed-form
//! covariance solution, spectral classification of the mean dynamics and
//! convergence-rate fitting.

use nalgebra::{Complex, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::gaussian_manifold::{
    expected_fitness, replicator_rhs_gaussian, symmetrize, GaussianParams, QuadBilinearLandscape,
};
use crate::nes_engine::sigma_normalized_rhs;
use crate::simplex_games::{kl_categorical, mean_fitness, replicator_rhs, FiniteLandscape, SimplexPoint};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub dt: f64,
    pub t_end: f64,
    pub record_every: usize,
    pub boundary_eps: f64,
}

impl FlowConfig {
    pub fn new(dt: f64, t_end: f64, record_every: usize) -> Result<Self> {
        let cfg = Self {
            dt,
            t_end,
            record_every,
            boundary_eps: 1e-12,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_boundary_eps(mut self, eps: f64) -> Result<Self> {
        self.boundary_eps = eps;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::InvalidArgument(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.t_end > 0.0 && self.t_end.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "t_end must be positive, got {}",
                self.t_end
            )));
        }
        if self.record_every == 0 {
            return Err(Error::InvalidArgument("record_every must be at least 1".into()));
        }
        if !(self.boundary_eps > 0.0 && self.boundary_eps <= 1e-6) {
            return Err(Error::InvalidArgument(format!(
                "boundary_eps must lie in (0, 1e-6], got {}",
                self.boundary_eps
            )));
        }
        Ok(())
    }

    /// Number of steps; the last one is shortened when `t_end` is not a multiple of `dt`.
    pub fn steps(&self) -> usize {
        ((self.t_end / self.dt) - 1e-9).ceil().max(1.0) as usize
    }
}

/// A state that can be advanced by the integrator through flat coordinates.
pub trait FlowState: Clone {
    fn coords(&self) -> Vec<f64>;

    /// Rebuilds a state from coordinates, enforcing the manifold guards.
    fn rebuild(&self, coords: &[f64], t: f64, cfg: &FlowConfig) -> Result<Self>;

    fn column_names(&self) -> Vec<String>;
}

/// Largest per-step drift of `sum(p)` attributed to rounding.
pub const SIMPLEX_DRIFT_TOL: f64 = 1e-9;

impl FlowState for SimplexPoint {
    fn coords(&self) -> Vec<f64> {
        self.as_slice().to_vec()
    }

    fn rebuild(&self, coords: &[f64], t: f64, cfg: &FlowConfig) -> Result<Self> {
        check_dim("simplex coordinates", self.dim(), coords.len())?;
        if coords.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("simplex state at t = {t}")));
        }
        if let Some((index, &value)) = coords
            .iter()
            .enumerate()
            .find(|(_, &v)| v < cfg.boundary_eps)
        {
            return Err(Error::BoundaryEvent { t, index, value });
        }
        // RK4 preserves sum(p) = 1 exactly in exact arithmetic; only rounding
        // drift is removed here. Anything larger means the field is not tangent.
        let sum: f64 = coords.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_DRIFT_TOL {
            return Err(Error::NotInterior(format!(
                "components sum to {sum:.17} at t = {t}; the vector field is not tangent to the simplex"
            )));
        }
        SimplexPoint::with_floor(coords.iter().map(|x| x / sum).collect(), 0.0)
    }

    fn column_names(&self) -> Vec<String> {
        (1..=self.dim()).map(|i| format!("p_{i}")).collect()
    }
}

impl FlowState for GaussianParams {
    fn coords(&self) -> Vec<f64> {
        let n = self.dim();
        let mut out: Vec<f64> = self.mean().iter().copied().collect();
        for i in 0..n {
            for j in 0..n {
                out.push(self.cov()[(i, j)]);
            }
        }
        out
    }

    fn rebuild(&self, coords: &[f64], t: f64, cfg: &FlowConfig) -> Result<Self> {
        let n = self.dim();
        check_dim("Gaussian coordinates", n + n * n, coords.len())?;
        if coords.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("Gaussian state at t = {t}")));
        }
        let mean = DVector::from_column_slice(&coords[..n]);
        let cov = symmetrize(&DMatrix::from_row_slice(n, n, &coords[n..]));
        GaussianParams::new(mean, cov).map_err(|e| match e {
            Error::NotPositiveDefinite(_) => Error::SpdViolation { t, dt: cfg.dt },
            other => other,
        })
    }

    fn column_names(&self) -> Vec<String> {
        let n = self.dim();
        let mut names: Vec<String> = (1..=n).map(|i| format!("a_{i}")).collect();
        for i in 1..=n {
            for j in 1..=n {
                names.push(format!("C_{i}{j}"));
            }
        }
        names
    }
}

/// Time-indexed states with named per-sample diagnostics.
#[derive(Clone, Debug)]
pub struct Trajectory<S> {
    times: Vec<f64>,
    states: Vec<S>,
    diagnostic_names: Vec<String>,
    diagnostics: Vec<Vec<f64>>,
}

impl<S> Default for Trajectory<S> {
    fn default() -> Self {
        Self {
            times: Vec::new(),
            states: Vec::new(),
            diagnostic_names: Vec::new(),
            diagnostics: Vec::new(),
        }
    }
}

impl<S> Trajectory<S> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a sample. Times must be strictly increasing and no diagnostics
    /// may be attached yet.
    pub fn push(&mut self, t: f64, state: S) -> Result<()> {
        if !t.is_finite() {
            return Err(Error::NonFinite("trajectory time".into()));
        }
        if let Some(&last) = self.times.last() {
            if t <= last {
                return Err(Error::InvalidArgument(format!(
                    "trajectory times must increase ({t} after {last})"
                )));
            }
        }
        if !self.diagnostic_names.is_empty() {
            return Err(Error::InvalidArgument(
                "cannot push after diagnostics are attached".into(),
            ));
        }
        self.times.push(t);
        self.states.push(state);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn states(&self) -> &[S] {
        &self.states
    }

    pub fn last(&self) -> Option<(f64, &S)> {
        self.times.last().copied().zip(self.states.last())
    }

    pub fn diagnostic_names(&self) -> &[String] {
        &self.diagnostic_names
    }

    /// Row `k` holds the diagnostics of sample `k`, in `diagnostic_names` order.
    pub fn diagnostic_rows(&self) -> &[Vec<f64>] {
        &self.diagnostics
    }

    pub fn diagnostic(&self, name: &str) -> Option<Vec<f64>> {
        let col = self.diagnostic_names.iter().position(|n| n == name)?;
        Some(self.diagnostics.iter().map(|row| row[col]).collect())
    }

    /// Evaluates `f` at every sample and records the values under `names`.
    pub fn attach_diagnostics<F>(&mut self, names: &[&str], mut f: F) -> Result<()>
    where
        F: FnMut(f64, &S) -> Result<Vec<f64>>,
    {
        let mut rows = Vec::with_capacity(self.len());
        for (t, s) in self.times.iter().zip(&self.states) {
            let values = f(*t, s)?;
            check_dim("diagnostic row", names.len(), values.len())?;
            rows.push(values);
        }
        if self.diagnostics.is_empty() {
            self.diagnostics = rows;
        } else {
            for (row, extra) in self.diagnostics.iter_mut().zip(rows) {
                row.extend(extra);
            }
        }
        self.diagnostic_names
            .extend(names.iter().map(|n| n.to_string()));
        Ok(())
    }
}

fn axpy(base: &[f64], h: f64, k: &[f64]) -> Vec<f64> {
    base.iter().zip(k).map(|(b, k)| b + h * k).collect()
}

/// Classical fixed-step RK4. Every stage state is rebuilt through
/// [`FlowState::rebuild`], so the manifold guards apply to intermediate stages too.
pub fn integrate<S, F>(mut rhs: F, state0: &S, cfg: &FlowConfig) -> Result<Trajectory<S>>
where
    S: FlowState,
    F: FnMut(&S) -> Result<Vec<f64>>,
{
    cfg.validate()?;
    let steps = cfg.steps();
    let mut traj = Trajectory::new();
    traj.push(0.0, state0.clone())?;

    let mut state = state0.clone();
    let mut eval = |s: &S, t: f64| -> Result<Vec<f64>> {
        let k = rhs(s)?;
        if k.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("vector field at t = {t}")));
        }
        Ok(k)
    };
    for step in 0..steps {
        let t = step as f64 * cfg.dt;
        let h = if step + 1 == steps { cfg.t_end - t } else { cfg.dt };
        let y = state.coords();

        let k1 = eval(&state, t)?;
        let s2 = state.rebuild(&axpy(&y, 0.5 * h, &k1), t + 0.5 * h, cfg)?;
        let k2 = eval(&s2, t + 0.5 * h)?;
        let s3 = state.rebuild(&axpy(&y, 0.5 * h, &k2), t + 0.5 * h, cfg)?;
        let k3 = eval(&s3, t + 0.5 * h)?;
        let s4 = state.rebuild(&axpy(&y, h, &k3), t + h, cfg)?;
        let k4 = eval(&s4, t + h)?;

        let next: Vec<f64> = (0..y.len())
            .map(|i| y[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
            .collect();
        let t_next = if step + 1 == steps { cfg.t_end } else { (step + 1) as f64 * cfg.dt };
        state = state.rebuild(&next, t_next, cfg)?;

        if (step + 1) % cfg.record_every == 0 || step + 1 == steps {
            traj.push(t_next, state.clone())?;
        }
    }
    Ok(traj)
}

/// Replicator flow on the simplex. Diagnostics: `meanFitness`, plus `KL` to
/// `target` when given.
pub fn simplex_flow(
    landscape: &FiniteLandscape,
    p0: &SimplexPoint,
    target: Option<&SimplexPoint>,
    cfg: &FlowConfig,
) -> Result<Trajectory<SimplexPoint>> {
    let mut traj = integrate(
        |p: &SimplexPoint| Ok(replicator_rhs(p, landscape)?.as_slice().to_vec()),
        p0,
        cfg,
    )?;
    traj.attach_diagnostics(&["meanFitness"], |_, p| Ok(vec![mean_fitness(p, landscape)?]))?;
    if let Some(target) = target {
        traj.attach_diagnostics(&["KL"], |_, p| Ok(vec![kl_categorical(target, p)?]))?;
    }
    Ok(traj)
}

fn gaussian_diagnostics(
    traj: &mut Trajectory<GaussianParams>,
    landscape: &QuadBilinearLandscape,
) -> Result<()> {
    traj.attach_diagnostics(&["J", "traceC"], |_, g| {
        Ok(vec![expected_fitness(g, landscape)?, g.cov().trace()])
    })
}

/// Replicator flow `(C(B - 2Q)a, -2CQC)` on the Gaussian manifold, with `J`
/// and `traceC` diagnostics.
pub fn gaussian_flow(
    landscape: &QuadBilinearLandscape,
    g0: &GaussianParams,
    cfg: &FlowConfig,
) -> Result<Trajectory<GaussianParams>> {
    check_dim("landscape", landscape.dim(), g0.dim())?;
    let mut traj = integrate(
        |g: &GaussianParams| Ok(replicator_rhs_gaussian(g, landscape)?.to_coords()),
        g0,
        cfg,
    )?;
    gaussian_diagnostics(&mut traj, landscape)?;
    Ok(traj)
}

/// The same flow divided by `sigma_f(a, C)`.
pub fn sigma_flow(
    landscape: &QuadBilinearLandscape,
    g0: &GaussianParams,
    cfg: &FlowConfig,
) -> Result<Trajectory<GaussianParams>> {
    check_dim("landscape", landscape.dim(), g0.dim())?;
    let mut traj = integrate(
        |g: &GaussianParams| Ok(sigma_normalized_rhs(g, landscape)?.to_coords()),
        g0,
        cfg,
    )?;
    gaussian_diagnostics(&mut traj, landscape)?;
    Ok(traj)
}

/// `C(t) = (C0^-1 + 2tQ)^-1`.
pub fn closed_form_covariance(c0: &DMatrix<f64>, q: &DMatrix<f64>, t: f64) -> Result<DMatrix<f64>> {
    check_dim("covariance", c0.nrows(), c0.ncols())?;
    check_dim("Q", c0.nrows(), q.nrows())?;
    check_dim("Q", c0.ncols(), q.ncols())?;
    if !(t >= 0.0) {
        return Err(Error::InvalidArgument(format!("t must be nonnegative, got {t}")));
    }
    let c0_inv = c0
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("C0".into()))?
        .inverse();
    let precision = symmetrize(&(c0_inv + q * (2.0 * t)));
    let chol = precision
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("C0^-1 + 2tQ".into()))?;
    Ok(symmetrize(&chol.inverse()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RateModel {
    #[serde(rename = "one-over-t")]
    OneOverT,
    #[serde(rename = "exponential")]
    Exponential,
}

impl RateModel {
    pub fn tag(self) -> &'static str {
        match self {
            Self::OneOverT => "one-over-t",
            Self::Exponential => "exponential",
        }
    }
}

/// Winning model of [`fit_convergence_rate`].
///
/// For `OneOverT`, `rate` is the constant `k` in `trace(C) ~ k / t`; for
/// `Exponential` it is `gamma` in `trace(C) ~ exp(alpha - gamma t)`.
/// `r_squared` is measured on `ln trace(C)` over the fitted window.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FittedRate {
    pub model: RateModel,
    pub rate: f64,
    pub r_squared: f64,
    /// Residual sums of squares of both candidate models, `[one-over-t, exponential]`.
    pub sse: [f64; 2],
}

#[derive(Clone, Debug, PartialEq)]
pub struct AsymptoticReport {
    pub eigenvalues: Vec<Complex<f64>>,
    pub converges_to_delta_at_zero: bool,
    pub fitted_rate: Option<FittedRate>,
}

/// Spectrum of `B - 2Q`; the mean and covariance both collapse to zero iff
/// every eigenvalue has negative real part.
pub fn classify_asymptotics(landscape: &QuadBilinearLandscape) -> Result<AsymptoticReport> {
    let mut eigenvalues: Vec<Complex<f64>> =
        landscape.drift_matrix().complex_eigenvalues().iter().copied().collect();
    if eigenvalues.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::EigenFailure("non-finite eigenvalue of B - 2Q".into()));
    }
    eigenvalues.sort_by(|x, y| x.re.total_cmp(&y.re).then(x.im.total_cmp(&y.im)));
    let converges = eigenvalues.iter().all(|z| z.re < 0.0);
    Ok(AsymptoticReport {
        eigenvalues,
        converges_to_delta_at_zero: converges,
        fitted_rate: None,
    })
}

/// Smallest trace accepted by [`fit_convergence_rate`].
pub const MIN_FIT_TRACE: f64 = 1e-14;
/// Fewest samples accepted by [`fit_convergence_rate`].
pub const MIN_FIT_SAMPLES: usize = 20;

/// Fits `trace(C) t ~ k` and `ln trace(C) ~ alpha - gamma t` to the tail half of
/// `(times, traces)` in log space and returns the model with the smaller
/// residual sum of squares.
pub fn fit_rate_series(times: &[f64], traces: &[f64]) -> Result<FittedRate> {
    check_dim("trace series", times.len(), traces.len())?;
    if times.len() < MIN_FIT_SAMPLES {
        return Err(Error::Degenerate(format!(
            "need at least {MIN_FIT_SAMPLES} samples, got {}",
            times.len()
        )));
    }
    if let Some(v) = traces.iter().find(|&&v| !(v >= MIN_FIT_TRACE)) {
        return Err(Error::Degenerate(format!(
            "trace {v:e} is below {MIN_FIT_TRACE:e}"
        )));
    }
    let start = times.len() / 2;
    let t = &times[start..];
    let y: Vec<f64> = traces[start..].iter().map(|v| v.ln()).collect();
    if t[0] <= 0.0 {
        return Err(Error::Degenerate("tail window must start after t = 0".into()));
    }
    let m = t.len() as f64;
    let y_mean = y.iter().sum::<f64>() / m;
    let sst: f64 = y.iter().map(|v| (v - y_mean).powi(2)).sum();

    // ln trace = c - ln t
    let shifted: Vec<f64> = y.iter().zip(t).map(|(y, t)| y + t.ln()).collect();
    let c = shifted.iter().sum::<f64>() / m;
    let sse_inv: f64 = shifted.iter().map(|v| (v - c).powi(2)).sum();

    // ln trace = alpha - gamma t
    let t_mean = t.iter().sum::<f64>() / m;
    let stt: f64 = t.iter().map(|v| (v - t_mean).powi(2)).sum();
    let sty: f64 = t.iter().zip(&y).map(|(t, y)| (t - t_mean) * (y - y_mean)).sum();
    let slope = sty / stt;
    let alpha = y_mean - slope * t_mean;
    let sse_exp: f64 = t
        .iter()
        .zip(&y)
        .map(|(t, y)| (y - alpha - slope * t).powi(2))
        .sum();

    let r2 = |sse: f64| if sst > 0.0 { 1.0 - sse / sst } else { 1.0 };
    let fit = if sse_exp < sse_inv {
        FittedRate {
            model: RateModel::Exponential,
            rate: -slope,
            r_squared: r2(sse_exp),
            sse: [sse_inv, sse_exp],
        }
    } else {
        FittedRate {
            model: RateModel::OneOverT,
            rate: c.exp(),
            r_squared: r2(sse_inv),
            sse: [sse_inv, sse_exp],
        }
    };
    if !(fit.rate.is_finite() && fit.r_squared.is_finite()) {
        return Err(Error::Degenerate("rate fit produced non-finite values".into()));
    }
    Ok(fit)
}

/// [`fit_rate_series`] on the `traceC` diagnostic of a Gaussian trajectory.
pub fn fit_convergence_rate(traj: &Trajectory<GaussianParams>) -> Result<FittedRate> {
    let traces = traj
        .diagnostic("traceC")
        .unwrap_or_else(|| traj.states().iter().map(|g| g.cov().trace()).collect());
    fit_rate_series(traj.times(), &traces)
}
