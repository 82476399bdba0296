//! The Gaussian statistical manifold `N(a, C)` under a quadratic-bilinear
//! fitness landscape `f(s, y) = -s'Qs + s'By`.
//!
//! Gradients with respect to `C` use the entrywise convention: `d/dC Tr(QC) = Q`
//! with no factor-of-two correction on the off-diagonal. Under that convention
//! the Fisher metric acts on a tangent `(da, dC)` as `(C^-1 da, C^-1 dC C^-1 / 2)`
//! and its inverse as `(C da, 2 C dC C)`. Neither is ever materialised as a
//! dense matrix.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{check_dim, Error, Result};

/// Symmetry tolerance for matrix inputs.
pub const SYMMETRY_TOL: f64 = 1e-10;

fn check_finite_matrix(name: &str, m: &DMatrix<f64>) -> Result<()> {
    if m.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(name.to_string()))
    }
}

fn check_symmetric(name: &str, m: &DMatrix<f64>) -> Result<()> {
    check_dim("square matrix", m.nrows(), m.ncols())?;
    let scale = m.amax().max(1.0);
    let asym = (m - m.transpose()).amax();
    if asym > SYMMETRY_TOL * scale {
        return Err(Error::InvalidArgument(format!(
            "{name} is not symmetric (max asymmetry {asym:e})"
        )));
    }
    Ok(())
}

pub(crate) fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn factor(name: &str, m: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(m.clone()).ok_or_else(|| Error::NotPositiveDefinite(name.to_string()))
}

/// Point `(a, C)` on the Gaussian manifold. `C` is symmetrised on construction
/// and must admit a Cholesky factorisation.
#[derive(Clone, Debug)]
pub struct GaussianParams {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
}

impl GaussianParams {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        check_dim("covariance rows", mean.len(), cov.nrows())?;
        check_dim("covariance columns", mean.len(), cov.ncols())?;
        if mean.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("mean vector".into()));
        }
        check_finite_matrix("covariance", &cov)?;
        check_symmetric("covariance", &cov)?;
        let cov = symmetrize(&cov);
        let chol = factor("covariance", &cov)?;
        Ok(Self { mean, cov, chol })
    }

    /// `N(0, I_n)`.
    pub fn standard(n: usize) -> Self {
        Self::new(DVector::zeros(n), DMatrix::identity(n, n)).expect("identity is SPD")
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn cholesky(&self) -> &Cholesky<f64, Dyn> {
        &self.chol
    }

    pub fn precision(&self) -> DMatrix<f64> {
        symmetrize(&self.chol.inverse())
    }

    pub fn ln_det_cov(&self) -> f64 {
        2.0 * self.chol.l_dirty().diagonal().iter().map(|x| x.ln()).sum::<f64>()
    }

    /// `(a + h da, C + h dC)`, failing if the result leaves the SPD cone.
    pub fn displaced(&self, t: &ManifoldTangent, h: f64) -> Result<Self> {
        check_dim("tangent", self.dim(), t.dim())?;
        Self::new(&self.mean + &t.da * h, &self.cov + &t.dc * h)
    }
}

/// Quadratic-bilinear landscape `f(s, y) = -s'Qs + s'By` with `Q` SPD.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadBilinearLandscape {
    q: DMatrix<f64>,
    b: DMatrix<f64>,
}

impl QuadBilinearLandscape {
    pub fn new(q: DMatrix<f64>, b: DMatrix<f64>) -> Result<Self> {
        check_finite_matrix("Q", &q)?;
        check_finite_matrix("B", &b)?;
        check_symmetric("Q", &q)?;
        check_dim("B rows", q.nrows(), b.nrows())?;
        check_dim("B columns", q.ncols(), b.ncols())?;
        let q = symmetrize(&q);
        factor("Q", &q)?;
        Ok(Self { q, b })
    }

    pub fn dim(&self) -> usize {
        self.q.nrows()
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    /// `B - 2Q`, whose spectrum governs the mean dynamics.
    pub fn drift_matrix(&self) -> DMatrix<f64> {
        &self.b - &self.q * 2.0
    }

    /// `f(s, y)` for a single pair.
    pub fn fitness(&self, s: &DVector<f64>, y: &DVector<f64>) -> f64 {
        -s.dot(&(&self.q * s)) + s.dot(&(&self.b * y))
    }
}

/// Tangent vector `(da, dC)` with symmetric `dC`.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifoldTangent {
    pub da: DVector<f64>,
    pub dc: DMatrix<f64>,
}

impl ManifoldTangent {
    pub fn new(da: DVector<f64>, dc: DMatrix<f64>) -> Result<Self> {
        check_dim("tangent dC rows", da.len(), dc.nrows())?;
        check_symmetric("tangent dC", &dc)?;
        Ok(Self {
            da,
            dc: symmetrize(&dc),
        })
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            da: DVector::zeros(n),
            dc: DMatrix::zeros(n, n),
        }
    }

    pub fn dim(&self) -> usize {
        self.da.len()
    }

    /// Euclidean pairing `da.da' + <dC, dC'>_F`, the pairing under which the
    /// vanilla gradient acts on tangents.
    pub fn dot(&self, other: &Self) -> f64 {
        self.da.dot(&other.da) + self.dc.dot(&other.dc)
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            da: &self.da * s,
            dc: &self.dc * s,
        }
    }

    /// Coordinates `[da..., dC row-major...]`.
    pub fn to_coords(&self) -> Vec<f64> {
        let n = self.dim();
        let mut out = Vec::with_capacity(n + n * n);
        out.extend(self.da.iter());
        for i in 0..n {
            for j in 0..n {
                out.push(self.dc[(i, j)]);
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.da.iter().chain(self.dc.iter()).all(|x| x.is_finite())
    }
}

/// Mean fitness `J(a, C) = E[f(s, y)] = -a'Qa - Tr(QC) + a'Ba` for independent
/// `s, y ~ N(a, C)`.
pub fn expected_fitness(g: &GaussianParams, l: &QuadBilinearLandscape) -> Result<f64> {
    expected_fitness_against(g, g.mean(), l)
}

/// Expected fitness of strategies `s ~ N(a, C)` playing against opponents whose
/// mean trait is `resident_mean`: `-a'Qa - Tr(QC) + a'B resident_mean`.
///
/// [`vanilla_grad`] is the gradient of this function in `(a, C)` with the
/// resident held fixed, evaluated at `resident_mean = a`.
pub fn expected_fitness_against(
    g: &GaussianParams,
    resident_mean: &DVector<f64>,
    l: &QuadBilinearLandscape,
) -> Result<f64> {
    check_dim("landscape", l.dim(), g.dim())?;
    check_dim("resident mean", g.dim(), resident_mean.len())?;
    let a = g.mean();
    let trace_qc = l.q().dot(g.cov());
    Ok(-a.dot(&(l.q() * a)) - trace_qc + a.dot(&(l.b() * resident_mean)))
}

/// Vanilla gradient `(-2Qa + Ba, -Q)`.
pub fn vanilla_grad(g: &GaussianParams, l: &QuadBilinearLandscape) -> Result<ManifoldTangent> {
    check_dim("landscape", l.dim(), g.dim())?;
    let a = g.mean();
    Ok(ManifoldTangent {
        da: l.b() * a - (l.q() * a) * 2.0,
        dc: -l.q().clone(),
    })
}

/// Inverse Fisher map `(da, dC) -> (C da, 2 C dC C)`.
pub fn natural_grad(g: &GaussianParams, t: &ManifoldTangent) -> Result<ManifoldTangent> {
    check_dim("tangent", g.dim(), t.dim())?;
    let c = g.cov();
    Ok(ManifoldTangent {
        da: c * &t.da,
        dc: symmetrize(&(c * &t.dc * c * 2.0)),
    })
}

/// Fisher map `(da, dC) -> (C^-1 da, C^-1 dC C^-1 / 2)`.
pub fn fisher_map(g: &GaussianParams, t: &ManifoldTangent) -> Result<ManifoldTangent> {
    check_dim("tangent", g.dim(), t.dim())?;
    let chol = g.cholesky();
    let da = chol.solve(&t.da);
    // C^-1 dC C^-1 = (C^-1 (C^-1 dC)')' and dC is symmetric.
    let left = chol.solve(&t.dc);
    let both = chol.solve(&left.transpose());
    Ok(ManifoldTangent {
        da,
        dc: symmetrize(&both) * 0.5,
    })
}

/// Replicator vector field on `N(a, C)`: `(C(B - 2Q)a, -2CQC)`.
pub fn replicator_rhs_gaussian(
    g: &GaussianParams,
    l: &QuadBilinearLandscape,
) -> Result<ManifoldTangent> {
    check_dim("landscape", l.dim(), g.dim())?;
    let c = g.cov();
    let da = c * (l.drift_matrix() * g.mean());
    let dc = symmetrize(&(c * l.q() * c)) * -2.0;
    Ok(ManifoldTangent { da, dc })
}

/// `KL(N(a1, C1) || N(a0, C0))` in closed form.
pub fn kl_gaussian(g1: &GaussianParams, g0: &GaussianParams) -> Result<f64> {
    check_dim("kl_gaussian", g0.dim(), g1.dim())?;
    let n = g0.dim() as f64;
    let chol0 = g0.cholesky();
    let trace_term = chol0.solve(g1.cov()).trace();
    let diff = g0.mean() - g1.mean();
    let maha = diff.dot(&chol0.solve(&diff));
    let kl = 0.5 * (trace_term - n + maha + g0.ln_det_cov() - g1.ln_det_cov());
    if !kl.is_finite() {
        return Err(Error::NonFinite("Gaussian KL divergence".into()));
    }
    Ok(kl.max(0.0))
}

/// `1/2 dtheta' F dtheta = 1/2 da' C^-1 da + 1/4 Tr((C^-1 dC)^2)`.
pub fn fisher_quadratic_form(g: &GaussianParams, t: &ManifoldTangent) -> Result<f64> {
    check_dim("tangent", g.dim(), t.dim())?;
    let chol = g.cholesky();
    let mean_part = t.da.dot(&chol.solve(&t.da));
    let m = chol.solve(&t.dc);
    // Tr(M M) without forming the product.
    let cov_part = m.dot(&m.transpose());
    Ok(0.5 * mean_part + 0.25 * cov_part)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, dvector};

    fn scalar_params(a: f64, c: f64) -> GaussianParams {
        GaussianParams::new(dvector![a], dmatrix![c]).unwrap()
    }

    fn scalar_landscape(q: f64, b: f64) -> QuadBilinearLandscape {
        QuadBilinearLandscape::new(dmatrix![q], dmatrix![b]).unwrap()
    }

    #[test]
    fn construction_checks() {
        assert!(matches!(
            GaussianParams::new(dvector![0.0, 0.0], dmatrix![1.0, 2.0; 2.0, 1.0]),
            Err(Error::NotPositiveDefinite(_))
        ));
        assert!(matches!(
            GaussianParams::new(dvector![0.0, 0.0], dmatrix![1.0, 0.5; 0.0, 1.0]),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            GaussianParams::new(dvector![0.0], dmatrix![1.0, 0.0; 0.0, 1.0]),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(QuadBilinearLandscape::new(dmatrix![-1.0], dmatrix![0.0]).is_err());
        assert!(QuadBilinearLandscape::new(dmatrix![1.0], dmatrix![0.0, 1.0]).is_err());

        // Tiny asymmetry is absorbed by symmetrisation.
        let g = GaussianParams::new(dvector![0.0, 0.0], dmatrix![1.0, 0.3 + 1e-13; 0.3, 1.0]).unwrap();
        assert_eq!(g.cov()[(0, 1)], g.cov()[(1, 0)]);
    }

    #[test]
    fn expected_fitness_examples() {
        let n = 4;
        let l = QuadBilinearLandscape::new(DMatrix::identity(n, n), DMatrix::from_element(n, n, 0.7))
            .unwrap();
        let j = expected_fitness(&GaussianParams::standard(n), &l).unwrap();
        assert!((j + n as f64).abs() < 1e-15);

        let j = expected_fitness(&scalar_params(2.0, 1.0), &scalar_landscape(0.5, 1.0)).unwrap();
        assert!((j - 1.5).abs() < 1e-15);
    }

    #[test]
    fn vanilla_grad_examples() {
        let l = QuadBilinearLandscape::new(
            dmatrix![2.0, 0.5; 0.5, 1.0],
            dmatrix![0.3, -1.0; 2.0, 0.1],
        )
        .unwrap();
        let g = GaussianParams::new(dvector![0.0, 0.0], dmatrix![1.5, 0.2; 0.2, 0.8]).unwrap();
        let t = vanilla_grad(&g, &l).unwrap();
        assert_eq!(t.da, dvector![0.0, 0.0]);
        assert_eq!(t.dc, -l.q().clone());

        let t = vanilla_grad(&scalar_params(1.0, 3.0), &scalar_landscape(0.5, 1.0)).unwrap();
        assert_eq!(t.da[0], 0.0);
        assert_eq!(t.dc[(0, 0)], -0.5);
    }

    #[test]
    fn natural_grad_examples() {
        let g = GaussianParams::standard(2);
        let t = ManifoldTangent::new(dvector![1.0, -2.0], dmatrix![0.5, 0.1; 0.1, -0.3]).unwrap();
        let nat = natural_grad(&g, &t).unwrap();
        assert_eq!(nat.da, t.da);
        assert_eq!(nat.dc, t.dc * 2.0);

        let g = scalar_params(0.0, 4.0);
        let t = ManifoldTangent::new(dvector![1.0], dmatrix![-0.5]).unwrap();
        let nat = natural_grad(&g, &t).unwrap();
        assert_eq!(nat.da[0], 4.0);
        assert_eq!(nat.dc[(0, 0)], -16.0);
    }

    #[test]
    fn natural_grad_of_vanilla_matches_closed_form_display() {
        let l = QuadBilinearLandscape::new(
            dmatrix![2.0, 0.5; 0.5, 1.0],
            dmatrix![0.3, -1.0; 2.0, 0.1],
        )
        .unwrap();
        let g = GaussianParams::new(dvector![0.7, -1.1], dmatrix![1.5, 0.2; 0.2, 0.8]).unwrap();
        let nat = natural_grad(&g, &vanilla_grad(&g, &l).unwrap()).unwrap();
        let c = g.cov();
        let expect_da = c * (l.b() - l.q() * 2.0) * g.mean();
        let expect_dc = c * l.q() * c * -2.0;
        assert!((nat.da - expect_da).amax() < 1e-14);
        assert!((nat.dc - expect_dc).amax() < 1e-14);
    }

    #[test]
    fn replicator_examples() {
        let l = QuadBilinearLandscape::new(dmatrix![1.0, 0.2; 0.2, 0.5], dmatrix![0.0, 1.0; -1.0, 0.0])
            .unwrap();
        let g = GaussianParams::new(dvector![0.0, 0.0], dmatrix![2.0, 0.3; 0.3, 1.0]).unwrap();
        let v = replicator_rhs_gaussian(&g, &l).unwrap();
        assert_eq!(v.da, dvector![0.0, 0.0]);
        let expect = g.cov() * l.q() * g.cov() * -2.0;
        assert!((v.dc - expect).amax() < 1e-15);

        let v = replicator_rhs_gaussian(&scalar_params(1.0, 1.0), &scalar_landscape(0.5, 0.0)).unwrap();
        assert_eq!(v.da[0], -1.0);
        assert_eq!(v.dc[(0, 0)], -1.0);
    }

    #[test]
    fn covariance_velocity_is_negative_definite() {
        let l = QuadBilinearLandscape::new(dmatrix![1.0, 0.2; 0.2, 0.5], dmatrix![0.0, 1.0; -1.0, 0.0])
            .unwrap();
        let g = GaussianParams::new(dvector![0.4, 0.1], dmatrix![2.0, 0.3; 0.3, 1.0]).unwrap();
        let v = replicator_rhs_gaussian(&g, &l).unwrap();
        let eig = v.dc.clone().symmetric_eigenvalues();
        assert!(eig.iter().all(|&x| x < 0.0), "{eig}");
    }

    #[test]
    fn kl_gaussian_examples() {
        let g = GaussianParams::new(dvector![0.4, 0.1], dmatrix![2.0, 0.3; 0.3, 1.0]).unwrap();
        assert!(kl_gaussian(&g, &g).unwrap().abs() < 1e-15);
        let kl = kl_gaussian(&scalar_params(1.0, 1.0), &scalar_params(0.0, 1.0)).unwrap();
        assert!((kl - 0.5).abs() < 1e-15);

        let h = GaussianParams::new(dvector![-0.2, 0.5], dmatrix![1.0, -0.1; -0.1, 0.5]).unwrap();
        let forward = kl_gaussian(&g, &h).unwrap();
        let backward = kl_gaussian(&h, &g).unwrap();
        assert!(forward > 0.0 && backward > 0.0);
        assert!((forward - backward).abs() > 1e-3);
        assert!(kl_gaussian(&g, &scalar_params(0.0, 1.0)).is_err());
    }

    #[test]
    fn fisher_quadratic_form_examples() {
        let g = GaussianParams::new(dvector![0.4, 0.1], dmatrix![2.0, 0.3; 0.3, 1.0]).unwrap();
        assert_eq!(fisher_quadratic_form(&g, &ManifoldTangent::zeros(2)).unwrap(), 0.0);

        let g = GaussianParams::standard(3);
        let t = ManifoldTangent::new(dvector![1.0, 0.0, 0.0], DMatrix::zeros(3, 3)).unwrap();
        assert!((fisher_quadratic_form(&g, &t).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn fisher_map_inverts_natural_grad() {
        let g = GaussianParams::new(dvector![0.4, 0.1], dmatrix![2.0, 0.3; 0.3, 1.0]).unwrap();
        let t = ManifoldTangent::new(dvector![1.0, -2.0], dmatrix![0.5, 0.1; 0.1, -0.3]).unwrap();
        let round = fisher_map(&g, &natural_grad(&g, &t).unwrap()).unwrap();
        assert!((round.da - &t.da).amax() < 1e-13);
        assert!((round.dc - &t.dc).amax() < 1e-13);
        // The quadratic form is half the pairing of t with F t.
        let quad = fisher_quadratic_form(&g, &t).unwrap();
        let pairing = t.dot(&fisher_map(&g, &t).unwrap());
        assert!((quad - 0.5 * pairing).abs() < 1e-13);
    }
}
