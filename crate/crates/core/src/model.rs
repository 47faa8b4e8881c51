//! Mixing-model parameterization for one-unit extraction.
//!
//! For dataset `k` and block `t` the mixing matrix is written in terms of the
//! mixing vector `a = [gamma; g]` and the separating vector `w = [beta; h]`:
//!
//! ```text
//!        | gamma   h^H                   |          | conj(beta)   h^H        |
//!   A =  |                               |     W =  |                         |
//!        | g       (g h^H - I) / gamma   |          | g            -gamma I   |
//! ```
//!
//! and `W = A^{-1}` whenever the distortionless constraint `w^H a = 1` holds.
//! The lower block of `W` is the blocking matrix `B` with `B a = 0`.
//!
//! Under the constant separating vector model (`csv`), `beta` and `h` are
//! shared by all blocks of a dataset while `gamma` and `g` vary per block.

use nalgebra::DMatrix;
use num_complex::Complex;

use crate::linalg::{hermitian_part, invert};
use crate::scalar::{cabs, creal, CMat, CVec, Real};
use crate::{IveError, Result};

/// Floor applied to `|gamma|` and `|beta|`.
pub const PARAM_FLOOR: f64 = 1e-10;
/// Floor applied to the coupling denominator `w^H C w`.
pub const QUAD_FLOOR: f64 = 1e-12;

/// Per-(dataset, block) parameter table.
///
/// Mixing-vector parts are stored densely per `(k, t)`. Separating-vector
/// parts have one backing value per `(k, t)`, or per `k` under the constant
/// separating vector model; accessors take `(k, t)` in both cases.
#[derive(Clone, Debug, PartialEq)]
pub struct IveParams<T: Real> {
    d: usize,
    k_count: usize,
    t_count: usize,
    csv: bool,
    gamma: Vec<Complex<T>>,
    g: Vec<CVec<T>>,
    beta: Vec<Complex<T>>,
    h: Vec<CVec<T>>,
    floor: T,
}

impl<T: Real> IveParams<T> {
    /// Identity-like parameters (`gamma = beta = 1`, `g = h = 0`).
    pub fn new(d: usize, k_count: usize, t_count: usize, csv: bool) -> Self {
        assert!(d >= 1 && k_count >= 1 && t_count >= 1);
        let dense = k_count * t_count;
        let sep = if csv { k_count } else { dense };
        Self {
            d,
            k_count,
            t_count,
            csv,
            gamma: vec![Complex::new(T::one(), T::zero()); dense],
            g: vec![CVec::zeros(d - 1); dense],
            beta: vec![Complex::new(T::one(), T::zero()); sep],
            h: vec![CVec::zeros(d - 1); sep],
            floor: T::lit(PARAM_FLOOR),
        }
    }

    /// Builds CSV parameters from one separating vector per dataset and one
    /// mixing vector per `(k, t)` (indexed `k * t_count + t`).
    pub fn from_vectors(w: &[CVec<T>], a: &[CVec<T>], t_count: usize) -> Result<Self> {
        let k_count = w.len();
        if k_count == 0 || t_count == 0 || a.len() != k_count * t_count {
            return Err(IveError::Dimension(format!(
                "{} separating vectors and {} mixing vectors for T = {}",
                w.len(),
                a.len(),
                t_count
            )));
        }
        let d = w[0].len();
        if d == 0 || w.iter().chain(a.iter()).any(|v| v.len() != d) {
            return Err(IveError::Dimension("vectors of unequal length".into()));
        }
        let mut p = Self::new(d, k_count, t_count, true);
        for (k, wk) in w.iter().enumerate() {
            p.set_separating(k, 0, wk);
        }
        for k in 0..k_count {
            for t in 0..t_count {
                p.set_mixing(k, t, &a[k * t_count + t]);
            }
        }
        Ok(p)
    }

    pub fn with_floor(mut self, floor: T) -> Self {
        self.floor = floor;
        self
    }

    pub fn d(&self) -> usize {
        self.d
    }
    pub fn k_count(&self) -> usize {
        self.k_count
    }
    pub fn t_count(&self) -> usize {
        self.t_count
    }
    pub fn is_csv(&self) -> bool {
        self.csv
    }
    pub fn floor(&self) -> T {
        self.floor
    }

    #[inline]
    fn dense(&self, k: usize, t: usize) -> usize {
        assert!(k < self.k_count && t < self.t_count, "index ({k}, {t}) out of range");
        k * self.t_count + t
    }

    #[inline]
    fn sep(&self, k: usize, t: usize) -> usize {
        let i = self.dense(k, t);
        if self.csv {
            k
        } else {
            i
        }
    }

    pub fn gamma(&self, k: usize, t: usize) -> Complex<T> {
        self.gamma[self.dense(k, t)]
    }
    pub fn g(&self, k: usize, t: usize) -> &CVec<T> {
        &self.g[self.dense(k, t)]
    }
    pub fn beta(&self, k: usize, t: usize) -> Complex<T> {
        self.beta[self.sep(k, t)]
    }
    pub fn h(&self, k: usize, t: usize) -> &CVec<T> {
        &self.h[self.sep(k, t)]
    }

    pub fn set_gamma(&mut self, k: usize, t: usize, v: Complex<T>) {
        let i = self.dense(k, t);
        self.gamma[i] = v;
    }
    pub fn set_g(&mut self, k: usize, t: usize, v: &CVec<T>) {
        assert_eq!(v.len(), self.d - 1);
        let i = self.dense(k, t);
        self.g[i] = v.clone();
    }
    pub fn set_beta(&mut self, k: usize, t: usize, v: Complex<T>) {
        let i = self.sep(k, t);
        self.beta[i] = v;
    }
    pub fn set_h(&mut self, k: usize, t: usize, v: &CVec<T>) {
        assert_eq!(v.len(), self.d - 1);
        let i = self.sep(k, t);
        self.h[i] = v.clone();
    }

    /// `a = [gamma; g]`.
    pub fn mixing_vector(&self, k: usize, t: usize) -> CVec<T> {
        let g = self.g(k, t);
        CVec::from_fn(self.d, |i, _| if i == 0 { self.gamma(k, t) } else { g[i - 1] })
    }

    /// `w = [beta; h]`.
    pub fn separating_vector(&self, k: usize, t: usize) -> CVec<T> {
        let h = self.h(k, t);
        CVec::from_fn(self.d, |i, _| if i == 0 { self.beta(k, t) } else { h[i - 1] })
    }

    pub fn set_mixing(&mut self, k: usize, t: usize, a: &CVec<T>) {
        assert_eq!(a.len(), self.d);
        self.set_gamma(k, t, a[0]);
        let g = a.rows(1, self.d - 1).into_owned();
        self.set_g(k, t, &g);
    }

    pub fn set_separating(&mut self, k: usize, t: usize, w: &CVec<T>) {
        assert_eq!(w.len(), self.d);
        self.set_beta(k, t, w[0]);
        let h = w.rows(1, self.d - 1).into_owned();
        self.set_h(k, t, &h);
    }

    fn check_floor(&self, name: &'static str, v: Complex<T>) -> Result<()> {
        let m = cabs(v);
        if m > self.floor {
            Ok(())
        } else {
            Err(IveError::SingularParameterization {
                name,
                value: m.as_f64(),
                floor: self.floor.as_f64(),
            })
        }
    }

    /// Mixing matrix with first column `[gamma; g]`, first row `[gamma, h^H]`
    /// and lower-right block `(g h^H - I) / gamma`.
    pub fn assemble_mixing(&self, k: usize, t: usize) -> Result<CMat<T>> {
        let gamma = self.gamma(k, t);
        self.check_floor("gamma", gamma)?;
        let (g, h) = (self.g(k, t), self.h(k, t));
        let d = self.d;
        let inv_gamma = Complex::new(T::one(), T::zero()) / gamma;
        Ok(DMatrix::from_fn(d, d, |i, j| match (i, j) {
            (0, 0) => gamma,
            (0, j) => h[j - 1].conj(),
            (i, 0) => g[i - 1],
            (i, j) => {
                let delta = if i == j { T::one() } else { T::zero() };
                (g[i - 1] * h[j - 1].conj() - creal(delta)) * inv_gamma
            }
        }))
    }

    /// De-mixing matrix `[w^H; B]`.
    pub fn assemble_demixing(&self, k: usize, t: usize) -> CMat<T> {
        let d = self.d;
        let (beta, h) = (self.beta(k, t), self.h(k, t));
        let b = self.blocking_matrix(k, t);
        DMatrix::from_fn(d, d, |i, j| match (i, j) {
            (0, 0) => beta.conj(),
            (0, j) => h[j - 1].conj(),
            (i, j) => b[(i - 1, j)],
        })
    }

    /// `B = [g, -gamma I]`, the `(d-1) x d` matrix annihilating `[gamma; g]`.
    pub fn blocking_matrix(&self, k: usize, t: usize) -> CMat<T> {
        let (gamma, g) = (self.gamma(k, t), self.g(k, t));
        DMatrix::from_fn(self.d - 1, self.d, |i, j| {
            if j == 0 {
                g[i]
            } else if j == i + 1 {
                -gamma
            } else {
                Complex::new(T::zero(), T::zero())
            }
        })
    }

    /// `beta = (1 - g^H h) / conj(gamma)`.
    pub fn complete_beta(&self, k: usize, t: usize) -> Result<Complex<T>> {
        let gamma = self.gamma(k, t);
        self.check_floor("gamma", gamma)?;
        let one = Complex::new(T::one(), T::zero());
        Ok((one - self.g(k, t).dotc(self.h(k, t))) / gamma.conj())
    }

    /// `gamma = (1 - h^H g) / conj(beta)`.
    pub fn complete_gamma(&self, k: usize, t: usize) -> Result<Complex<T>> {
        let beta = self.beta(k, t);
        self.check_floor("beta", beta)?;
        let one = Complex::new(T::one(), T::zero());
        Ok((one - self.h(k, t).dotc(self.g(k, t))) / beta.conj())
    }

    /// `|gamma conj(beta) - (1 - h^H g)|`.
    pub fn distortion_residual(&self, k: usize, t: usize) -> T {
        let one = Complex::new(T::one(), T::zero());
        let lhs = self.gamma(k, t) * self.beta(k, t).conj();
        let rhs = one - self.h(k, t).dotc(self.g(k, t));
        cabs(lhs - rhs)
    }
}

/// Ground truth kept alongside simulated data.
#[derive(Clone, Debug)]
pub struct GroundTruth<T: Real> {
    /// Sources `d x N_b` per `(k, t)`, SOI in row 0.
    pub sources: Vec<CMat<T>>,
    /// Mixing matrices `d x d` per `(k, t)`.
    pub mixing: Vec<CMat<T>>,
}

/// Observations `x^{k,t}`: `K` datasets of `T` blocks, each `d x N_b`.
#[derive(Clone, Debug)]
pub struct Dataset<T: Real> {
    d: usize,
    k_count: usize,
    t_count: usize,
    n_b: usize,
    blocks: Vec<CMat<T>>,
    truth: Option<GroundTruth<T>>,
}

impl<T: Real> Dataset<T> {
    /// `blocks` is indexed `k * t_count + t`; every block must be `d x N_b`
    /// with a common `N_b`.
    pub fn new(k_count: usize, t_count: usize, blocks: Vec<CMat<T>>) -> Result<Self> {
        if k_count == 0 || t_count == 0 || blocks.len() != k_count * t_count {
            return Err(IveError::Dimension(format!(
                "expected {} blocks, got {}",
                k_count * t_count,
                blocks.len()
            )));
        }
        let (d, n_b) = blocks[0].shape();
        if d == 0 || n_b == 0 || blocks.iter().any(|b| b.shape() != (d, n_b)) {
            return Err(IveError::Dimension("blocks must share shape d x N_b".into()));
        }
        Ok(Self {
            d,
            k_count,
            t_count,
            n_b,
            blocks,
            truth: None,
        })
    }

    /// Mixes `sources` with `mixing` block by block and keeps both as truth.
    pub fn from_model(
        k_count: usize,
        t_count: usize,
        sources: Vec<CMat<T>>,
        mixing: Vec<CMat<T>>,
    ) -> Result<Self> {
        if sources.len() != mixing.len() {
            return Err(IveError::Dimension("sources/mixing count mismatch".into()));
        }
        let blocks = sources.iter().zip(&mixing).map(|(s, a)| a * s).collect();
        let mut ds = Self::new(k_count, t_count, blocks)?;
        ds.truth = Some(GroundTruth { sources, mixing });
        Ok(ds)
    }

    pub fn d(&self) -> usize {
        self.d
    }
    pub fn k_count(&self) -> usize {
        self.k_count
    }
    pub fn t_count(&self) -> usize {
        self.t_count
    }
    pub fn n_b(&self) -> usize {
        self.n_b
    }
    /// `N = T * N_b`.
    pub fn n_total(&self) -> usize {
        self.t_count * self.n_b
    }
    pub fn truth(&self) -> Option<&GroundTruth<T>> {
        self.truth.as_ref()
    }

    pub fn block(&self, k: usize, t: usize) -> &CMat<T> {
        assert!(k < self.k_count && t < self.t_count);
        &self.blocks[k * self.t_count + t]
    }

    pub fn true_mixing(&self, k: usize, t: usize) -> Option<&CMat<T>> {
        self.truth.as_ref().map(|g| &g.mixing[k * self.t_count + t])
    }

    pub fn true_sources(&self, k: usize, t: usize) -> Option<&CMat<T>> {
        self.truth.as_ref().map(|g| &g.sources[k * self.t_count + t])
    }

    /// Dataset `k` alone, as a `K = 1` dataset (used to run ICE per mixture).
    pub fn single(&self, k: usize) -> Dataset<T> {
        let range = k * self.t_count..(k + 1) * self.t_count;
        Dataset {
            d: self.d,
            k_count: 1,
            t_count: self.t_count,
            n_b: self.n_b,
            blocks: self.blocks[range.clone()].to_vec(),
            truth: self.truth.as_ref().map(|g| GroundTruth {
                sources: g.sources[range.clone()].to_vec(),
                mixing: g.mixing[range].to_vec(),
            }),
        }
    }

    /// Applies `x -> M_k x` to every block of dataset `k`. Ground-truth
    /// mixing is transformed consistently.
    pub fn transformed(&self, transforms: &[CMat<T>]) -> Result<Dataset<T>> {
        if transforms.len() != self.k_count
            || transforms.iter().any(|m| m.shape() != (self.d, self.d))
        {
            return Err(IveError::Dimension("one d x d transform per dataset".into()));
        }
        let idx = |i: usize| i / self.t_count;
        let blocks = self
            .blocks
            .iter()
            .enumerate()
            .map(|(i, b)| &transforms[idx(i)] * b)
            .collect();
        let truth = self.truth.as_ref().map(|g| GroundTruth {
            sources: g.sources.clone(),
            mixing: g
                .mixing
                .iter()
                .enumerate()
                .map(|(i, a)| &transforms[idx(i)] * a)
                .collect(),
        });
        Ok(Dataset {
            truth,
            blocks,
            ..*self
        })
    }
}

/// `(1 / N_b) sum x x^H`, symmetrized.
pub fn sample_covariance<T: Real>(block: &CMat<T>) -> CMat<T> {
    let n = block.ncols().max(1);
    let scale = creal(T::one() / T::from_usize(n).unwrap());
    hermitian_part(&((block * block.adjoint()) * scale))
}

/// Sample covariances of every `(k, t)` block with optional cached inverses.
#[derive(Clone, Debug)]
pub struct CovarianceSet<T: Real> {
    k_count: usize,
    t_count: usize,
    cx: Vec<CMat<T>>,
    inverse: Option<Vec<CMat<T>>>,
    rank_warnings: usize,
}

impl<T: Real> CovarianceSet<T> {
    pub fn from_dataset(data: &Dataset<T>, with_inverse: bool) -> Result<Self> {
        let cx: Vec<_> = (0..data.k_count())
            .flat_map(|k| (0..data.t_count()).map(move |t| (k, t)))
            .map(|(k, t)| sample_covariance(data.block(k, t)))
            .collect();
        let rank_warnings = if data.n_b() < data.d() { cx.len() } else { 0 };
        let mut set = Self::from_matrices(data.k_count(), data.t_count(), cx, with_inverse)?;
        set.rank_warnings = rank_warnings;
        Ok(set)
    }

    pub fn from_matrices(
        k_count: usize,
        t_count: usize,
        cx: Vec<CMat<T>>,
        with_inverse: bool,
    ) -> Result<Self> {
        if cx.len() != k_count * t_count {
            return Err(IveError::Dimension("one covariance per (k, t)".into()));
        }
        let inverse = if with_inverse {
            Some(cx.iter().map(invert).collect::<Result<Vec<_>>>()?)
        } else {
            None
        };
        Ok(Self {
            k_count,
            t_count,
            cx,
            inverse,
            rank_warnings: 0,
        })
    }

    pub fn k_count(&self) -> usize {
        self.k_count
    }
    pub fn t_count(&self) -> usize {
        self.t_count
    }
    /// Number of blocks with fewer samples than channels.
    pub fn rank_warnings(&self) -> usize {
        self.rank_warnings
    }

    pub fn cx(&self, k: usize, t: usize) -> &CMat<T> {
        &self.cx[k * self.t_count + t]
    }

    pub fn inverse(&self, k: usize, t: usize) -> Option<&CMat<T>> {
        self.inverse.as_ref().map(|v| &v[k * self.t_count + t])
    }

    /// `<C_x^{k,t}>_t`.
    pub fn block_average(&self, k: usize) -> CMat<T> {
        let scale = creal(T::one() / T::from_usize(self.t_count).unwrap());
        let mut acc = self.cx(k, 0).clone();
        for t in 1..self.t_count {
            acc += self.cx(k, t);
        }
        acc * scale
    }
}

/// `a = C w / (w^H C w)`.
pub fn orthogonal_coupling<T: Real>(w: &CVec<T>, cx: &CMat<T>) -> Result<CVec<T>> {
    let cw = cx * w;
    let q = w.dotc(&cw);
    if !(cabs(q) > T::lit(QUAD_FLOOR)) {
        return Err(IveError::DegenerateDirection(cabs(q).as_f64()));
    }
    Ok(cw / q)
}

/// `C_z = B C_x B^H`.
pub fn background_cov<T: Real>(cx: &CMat<T>, params: &IveParams<T>, k: usize, t: usize) -> CMat<T> {
    let b = params.blocking_matrix(k, t);
    hermitian_part(&(&b * cx * b.adjoint()))
}

/// `C_z^{-1}` from a cached `C_x^{-1}` without inverting `C_z`.
///
/// With `A = [a, Q]` the assembled mixing matrix, `C_v^{-1} = A^H C_x^{-1} A`
/// and `C_z` is the lower-right block of `C_v`, so its inverse is the Schur
/// complement `Q^H C^{-1} Q - Q^H C^{-1} a a^H C^{-1} Q / (a^H C^{-1} a)`.
/// Valid when the distortionless constraint holds.
pub fn background_cov_inverse<T: Real>(
    cx_inv: &CMat<T>,
    params: &IveParams<T>,
    k: usize,
    t: usize,
) -> Result<CMat<T>> {
    let d = params.d();
    let mixing = params.assemble_mixing(k, t)?;
    let a = mixing.column(0).into_owned();
    let q = mixing.columns(1, d - 1).into_owned();
    let ci_a = cx_inv * &a;
    let denom = a.dotc(&ci_a);
    if !(cabs(denom) > T::lit(QUAD_FLOOR)) {
        return Err(IveError::DegenerateDirection(cabs(denom).as_f64()));
    }
    let qh_ci_a = q.adjoint() * &ci_a;
    let core = q.adjoint() * cx_inv * &q;
    Ok(hermitian_part(&(core - &qh_ci_a * qh_ci_a.adjoint() / denom)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::cx;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> Complex<f64> {
        cx(re, im)
    }

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> CVec<f64> {
        CVec::from_fn(n, |_, _| c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
    }

    fn rand_params(rng: &mut ChaCha8Rng, d: usize) -> IveParams<f64> {
        let mut p = IveParams::new(d, 1, 1, false);
        p.set_gamma(0, 0, c(rng.random_range(0.5..2.0), rng.random_range(-1.0..1.0)));
        p.set_g(0, 0, &rand_vec(rng, d - 1));
        p.set_h(0, 0, &rand_vec(rng, d - 1));
        let beta = p.complete_beta(0, 0).unwrap();
        p.set_beta(0, 0, beta);
        p
    }

    #[test]
    fn mixing_d2_identity_like() {
        let p = IveParams::<f64>::new(2, 1, 1, false);
        let a = p.assemble_mixing(0, 0).unwrap();
        let expect = CMat::from_row_slice(2, 2, &[c(1., 0.), c(0., 0.), c(0., 0.), c(-1., 0.)]);
        assert_eq!(a, expect);
        assert_eq!(p.assemble_demixing(0, 0), expect);
    }

    #[test]
    fn mixing_lower_block_for_gamma_two() {
        let mut p = IveParams::<f64>::new(4, 1, 1, false);
        p.set_gamma(0, 0, c(2.0, 0.0));
        let a = p.assemble_mixing(0, 0).unwrap();
        let lower = a.view((1, 1), (3, 3)).into_owned();
        assert_eq!(lower, CMat::identity(3, 3) * c(-0.5, 0.0));
    }

    #[test]
    fn demixing_inverts_mixing() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for d in [2, 3, 5] {
            let p = rand_params(&mut rng, d);
            let a = p.assemble_mixing(0, 0).unwrap();
            let w = p.assemble_demixing(0, 0);
            assert!((&w * &a - CMat::identity(d, d)).norm() < 1e-12);
            // oracle: direct numerical inversion
            let inv = a.clone().try_inverse().unwrap();
            assert!((inv - w).norm() < 1e-10);
        }
    }

    #[test]
    fn demixing_determinant_d5_gamma_two() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = rand_params(&mut rng, 5);
        p.set_gamma(0, 0, c(2.0, 0.0));
        let beta = p.complete_beta(0, 0).unwrap();
        p.set_beta(0, 0, beta);
        let det = p.assemble_demixing(0, 0).determinant().norm_sqr();
        assert!((det - 64.0).abs() < 64.0 * 1e-10);
    }

    #[test]
    fn gamma_floor_is_an_error() {
        let mut p = IveParams::<f64>::new(3, 1, 1, false);
        p.set_gamma(0, 0, c(1e-12, 0.0));
        assert!(matches!(
            p.assemble_mixing(0, 0),
            Err(IveError::SingularParameterization { name: "gamma", .. })
        ));
        assert!(p.complete_beta(0, 0).is_err());
    }

    #[test]
    fn blocking_matrix_cases() {
        let p = IveParams::<f64>::new(3, 1, 1, false);
        let b = p.blocking_matrix(0, 0);
        let z = c(0., 0.);
        let m1 = c(-1., 0.);
        assert_eq!(b, CMat::from_row_slice(2, 3, &[z, m1, z, z, z, m1]));

        let mut p = IveParams::<f64>::new(3, 1, 1, false);
        p.set_mixing(0, 0, &CVec::from_vec(vec![c(2., 0.), c(1., 0.), c(-1., 0.)]));
        let b = p.blocking_matrix(0, 0);
        let expect = CMat::from_row_slice(
            2,
            3,
            &[c(1., 0.), c(-2., 0.), z, c(-1., 0.), z, c(-2., 0.)],
        );
        assert_eq!(b, expect);
        assert_eq!((&b * p.mixing_vector(0, 0)).norm(), 0.0);
    }

    #[test]
    fn complete_beta_direct_formula() {
        let mut p = IveParams::<f64>::new(3, 1, 1, false);
        assert_eq!(p.complete_beta(0, 0).unwrap(), c(1.0, 0.0));
        p.set_gamma(0, 0, c(0.0, 1.0));
        p.set_g(0, 0, &CVec::from_vec(vec![c(1., 0.), c(0., 0.)]));
        p.set_h(0, 0, &CVec::from_vec(vec![c(0.5, 0.), c(0., 0.)]));
        let beta = p.complete_beta(0, 0).unwrap();
        assert!((beta - c(0.0, 0.5)).norm() < 1e-15);
    }

    #[test]
    fn complete_gamma_mirrors_beta() {
        let mut p = IveParams::<f64>::new(3, 1, 1, false);
        assert_eq!(p.complete_gamma(0, 0).unwrap(), c(1.0, 0.0));
        p.set_beta(0, 0, c(0.0, 1.0));
        p.set_h(0, 0, &CVec::from_vec(vec![c(1., 0.), c(0., 0.)]));
        p.set_g(0, 0, &CVec::from_vec(vec![c(0.5, 0.), c(0., 0.)]));
        let gamma = p.complete_gamma(0, 0).unwrap();
        assert!((gamma - c(0.0, 0.5)).norm() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = rand_params(&mut rng, 4);
        p.set_beta(0, 0, c(0.7, -0.2));
        let gamma = p.complete_gamma(0, 0).unwrap();
        p.set_gamma(0, 0, gamma);
        assert!(p.distortion_residual(0, 0) < 1e-14);

        p.set_beta(0, 0, c(0.0, 0.0));
        assert!(p.complete_gamma(0, 0).is_err());
    }

    #[test]
    fn csv_shares_separating_vector() {
        let mut p = IveParams::<f64>::new(3, 2, 3, true);
        let w = CVec::from_vec(vec![c(1., 1.), c(2., 0.), c(0., 3.)]);
        p.set_separating(1, 2, &w);
        for t in 0..3 {
            assert_eq!(p.separating_vector(1, t), w);
        }
        assert_ne!(p.separating_vector(0, 0), w);
    }

    #[test]
    fn coupling_examples() {
        let w = CVec::from_vec(vec![c(2., 0.), c(0., 0.), c(0., 0.)]);
        let a = orthogonal_coupling(&w, &CMat::identity(3, 3)).unwrap();
        assert_eq!(a, CVec::from_vec(vec![c(0.5, 0.), c(0., 0.), c(0., 0.)]));

        let cx = CMat::from_diagonal(&CVec::from_vec(vec![c(4., 0.), c(1., 0.)]));
        let w = CVec::from_vec(vec![c(1., 0.), c(1., 0.)]);
        let a = orthogonal_coupling(&w, &cx).unwrap();
        assert!((a - CVec::from_vec(vec![c(0.8, 0.), c(0.2, 0.)])).norm() < 1e-15);

        let zero = CVec::zeros(2);
        assert!(matches!(
            orthogonal_coupling(&zero, &cx),
            Err(IveError::DegenerateDirection(_))
        ));
    }

    #[test]
    fn covariance_single_sample() {
        let x = CMat::from_column_slice(2, 1, &[c(1., 0.), c(0., 1.)]);
        let cx = sample_covariance(&x);
        let expect = CMat::from_row_slice(2, 2, &[c(1., 0.), c(0., -1.), c(0., 1.), c(1., 0.)]);
        assert_eq!(cx, expect);
    }

    #[test]
    fn covariance_is_bilinear() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = CMat::from_fn(3, 50, |_, _| c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
        let m = CMat::from_fn(3, 3, |_, _| c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
        let lhs = sample_covariance(&(&m * &x));
        let rhs = &m * sample_covariance(&x) * m.adjoint();
        assert!((lhs - rhs).norm() < 1e-12);
    }

    #[test]
    fn rank_warning_recorded() {
        let x = CMat::from_element(4, 2, c(1., 0.));
        let ds = Dataset::new(1, 1, vec![x]).unwrap();
        let cov = CovarianceSet::from_dataset(&ds, false).unwrap();
        assert_eq!(cov.rank_warnings(), 1);
    }

    #[test]
    fn background_cov_identity() {
        let p = IveParams::<f64>::new(4, 1, 1, false);
        let cz = background_cov(&CMat::identity(4, 4), &p, 0, 0);
        assert_eq!(cz, CMat::identity(3, 3));
    }

    #[test]
    fn background_inverse_lemma_matches_direct() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for d in [2, 3, 6] {
            let m = CMat::from_fn(d, d, |_, _| c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
            let cx = &m * m.adjoint() + CMat::identity(d, d) * c(0.1, 0.);
            let p = rand_params(&mut rng, d);
            let direct = background_cov(&cx, &p, 0, 0).try_inverse().unwrap();
            let lemma = background_cov_inverse(&cx.clone().try_inverse().unwrap(), &p, 0, 0).unwrap();
            assert!((&direct - &lemma).norm() <= 1e-8 * direct.norm());
        }
    }

    #[test]
    fn background_cov_rank_deficient_stays_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let v = rand_vec(&mut rng, 5);
        let cx = &v * v.adjoint();
        let p = rand_params(&mut rng, 5);
        let cz = background_cov(&cx, &p, 0, 0);
        let eig = nalgebra::SymmetricEigen::new(cz);
        assert!(eig.eigenvalues.min() >= -1e-10);
    }

    #[test]
    fn dataset_validates_shapes() {
        let a = CMat::<f64>::zeros(3, 10);
        let b = CMat::<f64>::zeros(3, 9);
        assert!(Dataset::new(1, 2, vec![a.clone(), b]).is_err());
        assert!(Dataset::new(2, 1, vec![a.clone()]).is_err());
        let ds = Dataset::new(1, 2, vec![a.clone(), a]).unwrap();
        assert_eq!(ds.n_total(), 20);
    }
}
