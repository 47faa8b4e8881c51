//! Seeded synthetic mixtures.
//!
//! Every trial draws from its own `ChaCha8` stream: the experiment seed
//! selects the key and the trial index selects the stream, so trials are
//! reproducible independently of scheduling.

use nalgebra::DMatrix;
use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use statrs::function::gamma::ln_gamma;

use crate::linalg::condition_number;
use crate::model::Dataset;
use crate::scalar::{CMat, CVec, Real};
use crate::{IveError, Result};

/// Default cap on the condition number of random mixing matrices.
pub const COND_CAP: f64 = 1e4;
/// Attempts before a conditioned draw gives up.
pub const MAX_ATTEMPTS: usize = 100;
/// Shape of the exponential-power law that gives a circular Laplacean.
pub const LAPLACE_ALPHA: f64 = 0.5;

pub type TrialRng = ChaCha8Rng;

/// Generator for trial `trial` of an experiment seeded with `seed`.
pub fn trial_rng(seed: u64, trial: u64) -> TrialRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial);
    rng
}

/// Circular complex Gaussian with `E|z|^2 = 1`.
pub fn complex_gaussian<R: Rng + ?Sized>(rng: &mut R) -> Complex<f64> {
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

fn lift<T: Real>(z: Complex<f64>) -> Complex<T> {
    Complex::new(T::lit(z.re), T::lit(z.im))
}

pub fn complex_gaussian_matrix<T: Real, R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> CMat<T> {
    // column-major fill keeps the draw order independent of nalgebra internals
    let mut m = CMat::zeros(rows, cols);
    for j in 0..cols {
        for i in 0..rows {
            m[(i, j)] = lift(complex_gaussian(rng));
        }
    }
    m
}

/// `lambda^2` such that `p(s) ~ exp(-(lambda^2 ||s||^2)^alpha)` on `C^K` has
/// unit variance per component:
/// `lambda^2 = Gamma((K + 1)/alpha) / (K Gamma(K/alpha))`.
pub fn exp_power_lambda2(k: usize, alpha: f64) -> f64 {
    let k = k as f64;
    (ln_gamma((k + 1.0) / alpha) - ln_gamma(k / alpha)).exp() / k
}

/// Draws `n` samples of the spherically symmetric exponential-power law on
/// `C^K`, returned as a `K x n` matrix.
///
/// The direction is uniform on the unit sphere and `(lambda^2 r^2)^alpha`
/// is `Gamma(K/alpha, 1)`.
pub fn sample_exp_power<T: Real, R: Rng + ?Sized>(rng: &mut R, k: usize, alpha: f64, n: usize) -> Result<CMat<T>> {
    if !(alpha > 0.0) || k == 0 {
        return Err(IveError::InvalidArgument(format!("exp-power needs K >= 1 and alpha > 0 (got {k}, {alpha})")));
    }
    let lambda = exp_power_lambda2(k, alpha).sqrt();
    let radial = Gamma::new(k as f64 / alpha, 1.0).map_err(|e| IveError::InvalidArgument(e.to_string()))?;
    let mut out = CMat::zeros(k, n);
    let mut dir = vec![Complex::new(0.0, 0.0); k];
    for j in 0..n {
        let norm = loop {
            dir.iter_mut().for_each(|z| *z = complex_gaussian(rng));
            let norm = dir.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
            if norm > 0.0 {
                break norm;
            }
        };
        let q: f64 = radial.sample(rng);
        let r = q.powf(0.5 / alpha) / lambda;
        for i in 0..k {
            out[(i, j)] = lift(dir[i] * (r / norm));
        }
    }
    Ok(out)
}

/// Haar-distributed unitary matrix: QR of a complex Gaussian matrix with the
/// phases of `diag(R)` moved into `Q`.
pub fn random_unitary<T: Real, R: Rng + ?Sized>(rng: &mut R, n: usize) -> CMat<T> {
    let g: CMat<T> = complex_gaussian_matrix(rng, n, n);
    let qr = g.qr();
    let (q, r) = (qr.q(), qr.r());
    let phases = CVec::from_fn(n, |i, _| {
        let d = r[(i, i)];
        let m = d.norm_sqr().sqrt();
        if m > T::zero() {
            d / m
        } else {
            Complex::new(T::one(), T::zero())
        }
    });
    q * CMat::from_diagonal(&phases)
}

/// Complex Gaussian `d x d` matrix with condition number at most `cond_cap`,
/// together with the number of draws it took.
pub fn random_mixing_with_attempts<T: Real, R: Rng + ?Sized>(
    rng: &mut R,
    d: usize,
    cond_cap: f64,
) -> Result<(CMat<T>, usize)> {
    if !(cond_cap > 1.0) {
        return Err(IveError::InvalidArgument("cond_cap must exceed 1".into()));
    }
    if d == 1 {
        return Ok((CMat::identity(1, 1), 1));
    }
    for attempt in 1..=MAX_ATTEMPTS {
        let m = complex_gaussian_matrix::<T, R>(rng, d, d);
        if condition_number(&m).as_f64() <= cond_cap {
            return Ok((m, attempt));
        }
    }
    Err(IveError::GenerationFailed(MAX_ATTEMPTS))
}

pub fn random_mixing<T: Real, R: Rng + ?Sized>(rng: &mut R, d: usize, cond_cap: f64) -> Result<CMat<T>> {
    random_mixing_with_attempts(rng, d, cond_cap).map(|(m, _)| m)
}

/// Sources of one block: `d x n` independent exp-power(`alpha`) rows except
/// row 0, which is taken from `soi` (the row of the dependent vector
/// component belonging to this dataset).
fn block_sources<T: Real, R: Rng + ?Sized>(
    rng: &mut R,
    d: usize,
    n: usize,
    alpha: f64,
    soi: &CMat<T>,
    k: usize,
) -> Result<CMat<T>> {
    let mut s = CMat::zeros(d, n);
    s.row_mut(0).copy_from(&soi.row(k));
    for i in 1..d {
        let row: CMat<T> = sample_exp_power(rng, 1, alpha, n)?;
        s.row_mut(i).copy_from(&row.row(0));
    }
    Ok(s)
}

/// Dependent SOI vector component: `U l` with `l` iid exp-power(`alpha`)
/// across datasets and `U` a random `K x K` unitary, shape `K x n`.
fn soi_component<T: Real, R: Rng + ?Sized>(rng: &mut R, unitary: &CMat<T>, n: usize, alpha: f64) -> Result<CMat<T>> {
    let k = unitary.nrows();
    let mut iid = CMat::zeros(k, n);
    for i in 0..k {
        let row: CMat<T> = sample_exp_power(rng, 1, alpha, n)?;
        iid.row_mut(i).copy_from(&row.row(0));
    }
    Ok(unitary * iid)
}

/// Single-block data for one-unit extraction: per dataset `d` independent
/// circular exp-power sources (Laplacean for `alpha = 0.5`); the first
/// sources of the `K` datasets form a unitary-mixed, dependent vector
/// component; each dataset gets its own random mixing matrix.
pub fn generate_iva_dataset<T: Real, R: Rng + ?Sized>(rng: &mut R, k: usize, d: usize, n: usize) -> Result<Dataset<T>> {
    generate_iva_dataset_with(rng, k, d, n, LAPLACE_ALPHA)
}

pub fn generate_iva_dataset_with<T: Real, R: Rng + ?Sized>(
    rng: &mut R,
    k: usize,
    d: usize,
    n: usize,
    alpha: f64,
) -> Result<Dataset<T>> {
    generate_csv_dataset_with(rng, k, d, 1, n, d, alpha)
}

/// Piecewise-determined data: the first `n_csv` rows of every block's
/// de-mixing matrix are shared across the `T` blocks of a dataset; the
/// remaining rows are redrawn per block.
pub fn generate_csv_dataset<T: Real, R: Rng + ?Sized>(
    rng: &mut R,
    k: usize,
    d: usize,
    t: usize,
    n_b: usize,
    n_csv: usize,
) -> Result<Dataset<T>> {
    generate_csv_dataset_with(rng, k, d, t, n_b, n_csv, LAPLACE_ALPHA)
}

pub fn generate_csv_dataset_with<T: Real, R: Rng + ?Sized>(
    rng: &mut R,
    k_count: usize,
    d: usize,
    t_count: usize,
    n_b: usize,
    n_csv: usize,
    alpha: f64,
) -> Result<Dataset<T>> {
    if k_count == 0 || d == 0 || t_count == 0 || n_b == 0 {
        return Err(IveError::InvalidArgument("dimensions must be positive".into()));
    }
    if n_csv == 0 || n_csv > d {
        return Err(IveError::InvalidArgument(format!("need 1 <= n_csv <= d (got {n_csv})")));
    }
    let unitary: CMat<T> = random_unitary(rng, k_count);
    let mut mixing = Vec::with_capacity(k_count * t_count);
    for _ in 0..k_count {
        if t_count == 1 || n_csv == d {
            let a: CMat<T> = random_mixing(rng, d, COND_CAP)?;
            mixing.extend(std::iter::repeat_n(a, t_count));
            continue;
        }
        let shared: CMat<T> = complex_gaussian_matrix(rng, n_csv, d);
        for _ in 0..t_count {
            let demixing = (1..=MAX_ATTEMPTS)
                .find_map(|_| {
                    let fresh: CMat<T> = complex_gaussian_matrix(rng, d - n_csv, d);
                    let mut w = DMatrix::zeros(d, d);
                    w.rows_mut(0, n_csv).copy_from(&shared);
                    w.rows_mut(n_csv, d - n_csv).copy_from(&fresh);
                    (condition_number(&w).as_f64() <= COND_CAP).then_some(w)
                })
                .ok_or(IveError::GenerationFailed(MAX_ATTEMPTS))?;
            mixing.push(demixing.try_inverse().ok_or(IveError::RankDeficient(0.0))?);
        }
    }
    let mut sources = Vec::with_capacity(k_count * t_count);
    let mut soi = Vec::with_capacity(t_count);
    for _ in 0..t_count {
        soi.push(soi_component(rng, &unitary, n_b, alpha)?);
    }
    for k in 0..k_count {
        for soi_t in &soi {
            sources.push(block_sources(rng, d, n_b, alpha, soi_t, k)?);
        }
    }
    Dataset::from_model(k_count, t_count, sources, mixing)
}

/// `d` independent vector components, each drawn jointly across the `K`
/// datasets from the exp-power law; one random mixing matrix per dataset.
pub fn generate_separation_dataset<T: Real, R: Rng + ?Sized>(
    rng: &mut R,
    k_count: usize,
    d: usize,
    n: usize,
    alpha: f64,
) -> Result<Dataset<T>> {
    if k_count == 0 || d == 0 || n == 0 {
        return Err(IveError::InvalidArgument("dimensions must be positive".into()));
    }
    let mut sources = vec![CMat::<T>::zeros(d, n); k_count];
    for i in 0..d {
        let comp: CMat<T> = sample_exp_power(rng, k_count, alpha, n)?;
        for (k, s) in sources.iter_mut().enumerate() {
            s.row_mut(i).copy_from(&comp.row(k));
        }
    }
    let mixing = (0..k_count)
        .map(|_| random_mixing(rng, d, COND_CAP))
        .collect::<Result<Vec<CMat<T>>>>()?;
    Dataset::from_model(k_count, 1, sources, mixing)
}

/// True separating vector of `source` in dataset `k`, block `t`:
/// the conjugated row of `A^{-1}`.
pub fn true_separating<T: Real>(data: &Dataset<T>, k: usize, t: usize, source: usize) -> Result<CVec<T>> {
    let a = data
        .true_mixing(k, t)
        .ok_or_else(|| IveError::InvalidArgument("dataset has no ground truth".into()))?;
    let w = a.clone().try_inverse().ok_or(IveError::RankDeficient(0.0))?;
    Ok(w.row(source).adjoint())
}

/// True separating vectors of the SOI plus a complex Gaussian perturbation
/// rescaled to Euclidean norm `perturbation`.
pub fn near_ideal_init<T: Real, R: Rng + ?Sized>(rng: &mut R, data: &Dataset<T>, perturbation: f64) -> Result<Vec<CVec<T>>> {
    (0..data.k_count())
        .map(|k| {
            let w = true_separating(data, k, 0, 0)?;
            let noise: CMat<T> = complex_gaussian_matrix(rng, data.d(), 1);
            let noise = noise.column(0).into_owned();
            let scale = T::lit(perturbation) / noise.norm();
            Ok(w + noise * Complex::new(scale, T::zero()))
        })
        .collect()
}
