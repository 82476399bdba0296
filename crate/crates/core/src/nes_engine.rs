//! Natural Evolution Strategies on the Gaussian manifold.
//!
//! The search gradient is estimated with the log-likelihood trick
//! `grad J ~ (1/m) sum_i f(x_i) grad log p(x_i | a, C)` and mapped through the
//! inverse Fisher metric. Fitness can be replaced by rank-based utilities
//! (fitness shaping), and [`sigma_normalized_rhs`] is the continuous-time
//! counterpart of the shaped flow.
//!
//! Sampling is chunked: chunk `c` of a batch draws from a ChaCha8 stream keyed
//! by `(seed, c)`, and all reductions run in chunk order, so a seed determines
//! the result bit-for-bit regardless of thread count.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::flow_engine::Trajectory;
use crate::gaussian_manifold::{
    expected_fitness, natural_grad, replicator_rhs_gaussian, symmetrize, vanilla_grad,
    GaussianParams, ManifoldTangent, QuadBilinearLandscape,
};

/// Samples per RNG stream.
pub const SAMPLE_CHUNK: usize = 1024;
const OPPONENT_STREAM_OFFSET: u64 = 1 << 40;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapingKind {
    None,
    Rank,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapingSpec {
    pub kind: ShapingKind,
    /// Fraction of the best samples that receive positive raw weight.
    pub truncation: f64,
}

impl ShapingSpec {
    pub fn none() -> Self {
        Self {
            kind: ShapingKind::None,
            truncation: 1.0,
        }
    }

    pub fn rank(truncation: f64) -> Result<Self> {
        let spec = Self {
            kind: ShapingKind::Rank,
            truncation,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.truncation > 0.0 && self.truncation <= 1.0 {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "truncation must lie in (0, 1], got {}",
                self.truncation
            )))
        }
    }
}

/// How the opponent trait `y` in `f(s, y)` enters per-sample fitness.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Opponents {
    /// Conditional expectation over `y`: `-s'Qs + s'Ba`.
    #[default]
    Mean,
    /// One independent draw `y_i ~ N(a, C)` per sample.
    Paired,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleBatch {
    pub points: Vec<DVector<f64>>,
    pub fitness: Vec<f64>,
    pub utilities: Vec<f64>,
    pub seed: u64,
}

fn draw_stream(g: &GaussianParams, seed: u64, stream: u64, count: usize) -> Vec<DVector<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let l = g.cholesky().l();
    let n = g.dim();
    (0..count)
        .map(|_| {
            let z = DVector::from_iterator(n, (0..n).map(|_| StandardNormal.sample(&mut rng)));
            g.mean() + &l * z
        })
        .collect()
}

fn draw(g: &GaussianParams, m: usize, seed: u64, stream_offset: u64) -> Vec<DVector<f64>> {
    let chunks = m.div_ceil(SAMPLE_CHUNK);
    (0..chunks)
        .into_par_iter()
        .map(|c| {
            let count = SAMPLE_CHUNK.min(m - c * SAMPLE_CHUNK);
            draw_stream(g, seed, stream_offset + c as u64, count)
        })
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect()
}

/// `m` i.i.d. draws from `N(a, C)`, deterministic in `seed`.
pub fn sample_gaussian(g: &GaussianParams, m: usize, seed: u64) -> Result<Vec<DVector<f64>>> {
    if m < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 samples, got {m}")));
    }
    Ok(draw(g, m, seed, 0))
}

/// Score function `(C^-1 (x - a), (C^-1 r r' C^-1 - C^-1) / 2)` with `r = x - a`.
pub fn log_likelihood_grad(x: &DVector<f64>, g: &GaussianParams) -> Result<ManifoldTangent> {
    check_dim("sample", g.dim(), x.len())?;
    let precision = g.precision();
    let whitened = &precision * (x - g.mean());
    let dc = (&whitened * whitened.transpose() - precision) * 0.5;
    Ok(ManifoldTangent {
        da: whitened,
        dc: symmetrize(&dc),
    })
}

/// Centered, truncated-logarithmic rank utilities.
///
/// With `mu = ceil(truncation * m)`, the sample of rank `i` (1 = fittest) gets
/// raw weight `max(0, ln(mu + 1) - ln i)`. Weights are normalised to sum to one
/// and shifted by `-1/m`. Ties keep index order. With [`ShapingKind::None`] the
/// fitness values are returned unchanged.
pub fn rank_utilities(fitness: &[f64], spec: &ShapingSpec) -> Result<Vec<f64>> {
    let m = fitness.len();
    if m < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 samples, got {m}")));
    }
    spec.validate()?;
    if fitness.iter().any(|f| f.is_nan()) {
        return Err(Error::NonFinite("fitness values".into()));
    }
    if spec.kind == ShapingKind::None {
        return Ok(fitness.to_vec());
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&i, &j| fitness[j].total_cmp(&fitness[i]));

    let mu = (spec.truncation * m as f64).ceil() as usize;
    let top = ((mu + 1) as f64).ln();
    let raw: Vec<f64> = (1..=m).map(|rank| (top - (rank as f64).ln()).max(0.0)).collect();
    let total: f64 = raw.iter().sum();
    let shift = 1.0 / m as f64;

    let mut utilities = vec![0.0; m];
    for (rank0, &idx) in order.iter().enumerate() {
        utilities[idx] = raw[rank0] / total - shift;
    }
    Ok(utilities)
}

/// Draws a batch, evaluates fitness and applies shaping.
pub fn evaluate_batch(
    g: &GaussianParams,
    l: &QuadBilinearLandscape,
    m: usize,
    seed: u64,
    shaping: &ShapingSpec,
    opponents: Opponents,
) -> Result<SampleBatch> {
    check_dim("landscape", l.dim(), g.dim())?;
    let points = sample_gaussian(g, m, seed)?;
    let fitness: Vec<f64> = match opponents {
        Opponents::Mean => {
            let resident = g.mean();
            points.par_iter().map(|s| l.fitness(s, resident)).collect()
        }
        Opponents::Paired => {
            let ys = draw(g, m, seed, OPPONENT_STREAM_OFFSET);
            points
                .par_iter()
                .zip(ys.par_iter())
                .map(|(s, y)| l.fitness(s, y))
                .collect()
        }
    };
    let utilities = rank_utilities(&fitness, shaping)?;
    Ok(SampleBatch {
        points,
        fitness,
        utilities,
        seed,
    })
}

/// `sum_i w_i grad log p(x_i)`, where `w_i` is `f_i / m` without shaping and the
/// rank utility with it.
pub fn search_gradient_from_batch(
    g: &GaussianParams,
    batch: &SampleBatch,
    shaping: &ShapingSpec,
) -> Result<ManifoldTangent> {
    let m = batch.points.len();
    check_dim("batch utilities", m, batch.utilities.len())?;
    let n = g.dim();
    let weights: Vec<f64> = match shaping.kind {
        ShapingKind::None => batch.utilities.iter().map(|f| f / m as f64).collect(),
        ShapingKind::Rank => batch.utilities.clone(),
    };

    // Per-chunk moments, reduced in chunk order.
    let partials: Vec<(DVector<f64>, DMatrix<f64>, f64)> = batch
        .points
        .par_chunks(SAMPLE_CHUNK)
        .zip(weights.par_chunks(SAMPLE_CHUNK))
        .map(|(xs, ws)| {
            let mut first = DVector::zeros(n);
            let mut second = DMatrix::zeros(n, n);
            let mut total = 0.0;
            for (x, &w) in xs.iter().zip(ws) {
                let r = x - g.mean();
                second.ger(w, &r, &r, 1.0);
                first.axpy(w, &r, 1.0);
                total += w;
            }
            (first, second, total)
        })
        .collect();
    let (first, second, total) = partials.into_iter().fold(
        (DVector::zeros(n), DMatrix::zeros(n, n), 0.0),
        |(f, s, t), (pf, ps, pt)| (f + pf, s + ps, t + pt),
    );

    let chol = g.cholesky();
    let precision = g.precision();
    let da = chol.solve(&first);
    let left = chol.solve(&second);
    let sandwich = symmetrize(&chol.solve(&left.transpose()));
    let dc = (sandwich - precision * total) * 0.5;
    let grad = ManifoldTangent {
        da,
        dc: symmetrize(&dc),
    };
    if !grad.is_finite() {
        return Err(Error::NonFinite("search gradient".into()));
    }
    Ok(grad)
}

/// Monte Carlo search gradient with mean-field opponents.
pub fn estimate_search_gradient(
    g: &GaussianParams,
    l: &QuadBilinearLandscape,
    m: usize,
    seed: u64,
    shaping: &ShapingSpec,
) -> Result<ManifoldTangent> {
    let batch = evaluate_batch(g, l, m, seed, shaping, Opponents::Mean)?;
    search_gradient_from_batch(g, &batch, shaping)
}

/// `sigma_f(a, C) = sqrt(a'(B' - 2Q) C (B - 2Q) a + Tr[(QC)^2])`.
pub fn sigma_f(g: &GaussianParams, l: &QuadBilinearLandscape) -> Result<f64> {
    check_dim("landscape", l.dim(), g.dim())?;
    let drift = l.drift_matrix() * g.mean();
    let mean_term = drift.dot(&(g.cov() * &drift));
    let qc = l.q() * g.cov();
    let trace_term = qc.dot(&qc.transpose());
    let radicand = mean_term + trace_term;
    if !(radicand >= 0.0) {
        return Err(Error::Degenerate(format!(
            "sigma_f radicand is {radicand:e}"
        )));
    }
    Ok(radicand.sqrt())
}

/// Replicator field divided by [`sigma_f`].
pub fn sigma_normalized_rhs(
    g: &GaussianParams,
    l: &QuadBilinearLandscape,
) -> Result<ManifoldTangent> {
    let sigma = sigma_f(g, l)?;
    if !(sigma > 0.0) {
        return Err(Error::Degenerate("sigma_f vanishes".into()));
    }
    Ok(replicator_rhs_gaussian(g, l)?.scaled(1.0 / sigma))
}

/// Gradient source for [`natural_gradient_ascent`].
#[derive(Clone, Debug, PartialEq)]
pub enum AscentMode {
    Analytic,
    Sampled {
        m: usize,
        seed: u64,
        shaping: ShapingSpec,
    },
}

/// Seed used at iteration `k` of a sampled run.
pub fn iteration_seed(seed: u64, k: usize) -> u64 {
    seed.wrapping_add((k as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Discrete natural-gradient ascent `theta <- theta + step * F^-1 grad J`.
/// Sample `k` of the returned trajectory sits at time `k * step`, with `J` and
/// `traceC` diagnostics.
pub fn natural_gradient_ascent(
    g0: &GaussianParams,
    l: &QuadBilinearLandscape,
    step: f64,
    iters: usize,
    mode: &AscentMode,
) -> Result<Trajectory<GaussianParams>> {
    check_dim("landscape", l.dim(), g0.dim())?;
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::InvalidArgument(format!("step must be positive, got {step}")));
    }
    if let AscentMode::Sampled { m, shaping, .. } = mode {
        if *m < 2 {
            return Err(Error::InvalidArgument(format!("need at least 2 samples, got {m}")));
        }
        shaping.validate()?;
    }

    let mut traj = Trajectory::new();
    traj.push(0.0, g0.clone())?;
    let mut g = g0.clone();
    for k in 0..iters {
        let grad = match mode {
            AscentMode::Analytic => vanilla_grad(&g, l)?,
            AscentMode::Sampled { m, seed, shaping } => {
                estimate_search_gradient(&g, l, *m, iteration_seed(*seed, k), shaping)?
            }
        };
        let t = (k + 1) as f64 * step;
        let direction = natural_grad(&g, &grad)?;
        g = g.displaced(&direction, step).map_err(|e| match e {
            Error::NotPositiveDefinite(_) => Error::SpdViolation { t, dt: step },
            other => other,
        })?;
        traj.push(t, g.clone())?;
    }
    traj.attach_diagnostics(&["J", "traceC"], |_, g| {
        Ok(vec![expected_fitness(g, l)?, g.cov().trace()])
    })?;
    Ok(traj)
}
