//! One-unit blind extraction.
//!
//! Three update rules share the same bookkeeping:
//!
//! * `QuickIVE-1` treats the mixing vector `a = [gamma; g]` as free and takes
//!   an exact Newton-Raphson step in `h`; `beta` then follows from the
//!   distortionless constraint. Single block only.
//! * `QuickIVE-2` treats `beta` as free and takes a Newton-Raphson step on
//!   the whole separating vector using the score normalized by
//!   `nu = E[phi s]`. Works for any number of blocks with a constant
//!   separating vector.
//! * The gradient baseline follows the same normalized gradient with a fixed
//!   step size.
//!
//! After every update the separating vector is rescaled to unit output
//! variance and the mixing vectors are re-derived from it through the
//! orthogonal coupling `a = C w / (w^H C w)`.
//!
//! Hessians are reported in the transposed convention
//! `H = -(1/|gamma|^2) E[phi' z z^H]^T`, so the Newton direction is
//! `-(conj H)^{-1} grad`.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use num_complex::Complex;

use crate::linalg::{condition_number, conj, solve};
use crate::model::{background_cov, background_cov_inverse, orthogonal_coupling, CovarianceSet, Dataset, IveParams};
use crate::scalar::{cabs, creal, CMat, CVec, Real};
use crate::score::{ScoreFunction, STAT_FLOOR};
use crate::{IveError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Algorithm {
    QuickIve1,
    QuickIve2,
    Gradient,
}

impl Algorithm {
    pub fn id(self) -> &'static str {
        match self {
            Algorithm::QuickIve1 => "quickive1",
            Algorithm::QuickIve2 => "quickive2",
            Algorithm::Gradient => "gradient",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Algorithm {
    type Err = IveError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "quickive1" => Ok(Algorithm::QuickIve1),
            "quickive2" => Ok(Algorithm::QuickIve2),
            "gradient" => Ok(Algorithm::Gradient),
            other => Err(IveError::Config(format!("unknown extraction algorithm '{other}'"))),
        }
    }
}

/// Which Hessian `QuickIVE-1` inverts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum HessianMode {
    /// `-(1/|gamma|^2) E[phi' z z^H]^T`
    #[default]
    Exact,
    /// `-(rho/|gamma|^2) C_z^T`, inverted through the cached `C_x^{-1}` when
    /// available.
    Approx,
}

impl FromStr for HessianMode {
    type Err = IveError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(HessianMode::Exact),
            "approx" => Ok(HessianMode::Approx),
            other => Err(IveError::Config(format!("unknown hessian mode '{other}'"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ExtractOptions<T: Real> {
    pub hessian: HessianMode,
    /// Step size of the gradient baseline.
    pub mu: T,
    /// Gradient step taken when the Hessian is ill-conditioned.
    pub fallback_step: T,
    /// Condition number above which the Hessian is not inverted.
    pub cond_limit: T,
}

impl<T: Real> Default for ExtractOptions<T> {
    fn default() -> Self {
        Self {
            hessian: HessianMode::Exact,
            mu: T::lit(0.2),
            fallback_step: T::lit(0.1),
            cond_limit: T::lit(1e12),
        }
    }
}

/// Stop once `1 - |w_new^H w_old| / (||w_new|| ||w_old||) < tol` for every
/// dataset, or after `max_iter` iterations.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StoppingRule<T: Real> {
    pub tol: T,
    pub max_iter: usize,
}

impl<T: Real> StoppingRule<T> {
    pub fn new(tol: T, max_iter: usize) -> Result<Self> {
        if !(tol > T::zero()) || max_iter == 0 {
            return Err(IveError::InvalidArgument(format!(
                "stopping rule needs tol > 0 and max_iter >= 1 (got {tol}, {max_iter})"
            )));
        }
        Ok(Self { tol, max_iter })
    }
}

impl<T: Real> Default for StoppingRule<T> {
    fn default() -> Self {
        Self {
            tol: T::lit(1e-6),
            max_iter: 1000,
        }
    }
}

/// `1 - |x^H y| / (||x|| ||y||)`.
pub fn direction_change<T: Real>(x: &CVec<T>, y: &CVec<T>) -> T {
    let denom = x.norm() * y.norm();
    if !(denom > T::zero()) {
        return T::one();
    }
    T::one() - cabs(x.dotc(y)) / denom
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterationRecord<T: Real> {
    pub iteration: usize,
    /// Largest gradient norm over datasets.
    pub gradient_norm: T,
    /// Largest relative change `||w_new - w_old|| / ||w_old||`.
    pub step_norm: T,
    /// Largest stopping statistic over datasets.
    pub criterion: T,
    /// Datasets whose Hessian was skipped for a gradient step.
    pub fallbacks: usize,
}

/// Separating vectors `w^k` and mixing vectors `a^{k,t}` of a one-unit run.
#[derive(Clone, Debug)]
pub struct ExtractionState<T: Real> {
    w: Vec<CVec<T>>,
    a: Vec<CVec<T>>,
    t_count: usize,
    pub iteration: usize,
    pub last_step_norm: T,
    pub diagnostics: Vec<IterationRecord<T>>,
}

impl<T: Real> ExtractionState<T> {
    /// Normalizes the initial separating vectors and couples mixing vectors.
    pub fn from_separating(init_w: &[CVec<T>], cov: &CovarianceSet<T>) -> Result<Self> {
        if init_w.len() != cov.k_count() {
            return Err(IveError::Dimension(format!(
                "{} initial vectors for {} datasets",
                init_w.len(),
                cov.k_count()
            )));
        }
        let (w, a) = normalize_and_couple(init_w.to_vec(), cov)?;
        Ok(Self {
            w,
            a,
            t_count: cov.t_count(),
            iteration: 0,
            last_step_norm: T::zero(),
            diagnostics: Vec::new(),
        })
    }

    /// Takes `(w, a)` as given; `a` is indexed `k * t_count + t`.
    pub fn from_parts(w: Vec<CVec<T>>, a: Vec<CVec<T>>, t_count: usize) -> Result<Self> {
        // validates shapes
        IveParams::from_vectors(&w, &a, t_count)?;
        Ok(Self {
            w,
            a,
            t_count,
            iteration: 0,
            last_step_norm: T::zero(),
            diagnostics: Vec::new(),
        })
    }

    pub fn k_count(&self) -> usize {
        self.w.len()
    }
    pub fn t_count(&self) -> usize {
        self.t_count
    }
    pub fn d(&self) -> usize {
        self.w[0].len()
    }
    pub fn w(&self, k: usize) -> &CVec<T> {
        &self.w[k]
    }
    pub fn separating_vectors(&self) -> &[CVec<T>] {
        &self.w
    }
    pub fn a(&self, k: usize, t: usize) -> &CVec<T> {
        &self.a[k * self.t_count + t]
    }

    /// The `(gamma, g, beta, h)` view of the current vectors.
    pub fn params(&self) -> IveParams<T> {
        IveParams::from_vectors(&self.w, &self.a, self.t_count).expect("state shapes are validated")
    }

    /// Largest `|w^H a - 1|` over all `(k, t)`.
    pub fn constraint_residual(&self) -> T {
        let one = creal(T::one());
        let mut worst = T::zero();
        for k in 0..self.k_count() {
            for t in 0..self.t_count {
                let r = cabs(self.w[k].dotc(self.a(k, t)) - one);
                if r > worst {
                    worst = r;
                }
            }
        }
        worst
    }

    /// `(e^{i theta} w, e^{i theta} a)`; keeps `w^H a` unchanged.
    pub fn rotated(&self, theta: T) -> Self {
        let rot = Complex::new(theta.cos(), theta.sin());
        let mut out = self.clone();
        out.w.iter_mut().for_each(|v| *v *= rot);
        out.a.iter_mut().for_each(|v| *v *= rot);
        out
    }

    /// Extracted signal `w^H x^{k,t}` of dataset `k`, blocks concatenated.
    pub fn extracted(&self, data: &Dataset<T>, k: usize) -> Vec<Complex<T>> {
        (0..data.t_count())
            .flat_map(|t| (self.w[k].adjoint() * data.block(k, t)).iter().copied().collect::<Vec<_>>())
            .collect()
    }
}

/// Rescales each `w^k` to unit output variance under the block-averaged
/// covariance, then couples `a^{k,t} = C^{k,t} w / (w^H C^{k,t} w)`.
pub fn normalize_and_couple<T: Real>(
    mut w: Vec<CVec<T>>,
    cov: &CovarianceSet<T>,
) -> Result<(Vec<CVec<T>>, Vec<CVec<T>>)> {
    let mut a = Vec::with_capacity(w.len() * cov.t_count());
    for (k, wk) in w.iter_mut().enumerate() {
        let c_avg = cov.block_average(k);
        let q = wk.dotc(&(&c_avg * &*wk)).re;
        if !(q > T::lit(crate::model::QUAD_FLOOR)) {
            return Err(IveError::DegenerateDirection(q.as_f64()));
        }
        *wk /= creal(q.sqrt());
        for t in 0..cov.t_count() {
            a.push(orthogonal_coupling(wk, cov.cx(k, t))?);
        }
    }
    Ok((w, a))
}

/// Outputs `s_{k,n} = (w^k)^H x^{k,t}_n` of block `t`, one row per dataset.
pub fn block_outputs<T: Real>(w: &[CVec<T>], data: &Dataset<T>, t: usize) -> CMat<T> {
    let n = data.n_b();
    let mut out = CMat::zeros(w.len(), n);
    for (k, wk) in w.iter().enumerate() {
        out.row_mut(k).copy_from(&(wk.adjoint() * data.block(k, t)));
    }
    out
}

/// Score values and conjugate derivatives on one block (`K x N_b` each).
struct ScoreBlock<T: Real> {
    outputs: CMat<T>,
    phi: CMat<T>,
    dphi: CMat<T>,
}

impl<T: Real> ScoreBlock<T> {
    fn new(w: &[CVec<T>], data: &Dataset<T>, t: usize, score: &dyn ScoreFunction<T>) -> Self {
        let outputs = block_outputs(w, data, t);
        let (kk, n) = outputs.shape();
        let mut phi = CMat::zeros(kk, n);
        let mut dphi = CMat::zeros(kk, n);
        for j in 0..n {
            let col = outputs.column(j);
            let s = col.as_slice();
            for k in 0..kk {
                let (p, dp) = score.eval_with_deriv(s, k);
                phi[(k, j)] = p;
                dphi[(k, j)] = dp;
            }
        }
        Self { outputs, phi, dphi }
    }

    /// `E[phi^k s_k]`
    fn nu(&self, k: usize, t: usize) -> Result<Complex<T>> {
        let n = self.outputs.ncols();
        let mut acc = creal(T::zero());
        for j in 0..n {
            acc += self.phi[(k, j)] * self.outputs[(k, j)];
        }
        let nu = acc.unscale(T::from_usize(n).unwrap());
        if cabs(nu) > T::lit(STAT_FLOOR) {
            Ok(nu)
        } else {
            Err(IveError::DegenerateStatistic {
                name: "nu",
                value: cabs(nu).as_f64(),
                k,
                t,
            })
        }
    }

    /// `E[phi'^k]`
    fn rho(&self, k: usize) -> Complex<T> {
        let n = self.outputs.ncols();
        self.dphi.row(k).sum() / T::from_usize(n).unwrap()
    }
}

/// `E[c_n v_n]` over the columns `v_n` of `x`.
fn weighted_mean<T: Real>(x: &CMat<T>, weights: impl Iterator<Item = Complex<T>>) -> CVec<T> {
    let n = x.ncols();
    let mut acc = CVec::zeros(x.nrows());
    for (j, c) in weights.enumerate() {
        acc.axpy(c, &x.column(j), creal(T::one()));
    }
    acc.unscale(T::from_usize(n).unwrap())
}

/// `E[c_n v_n v_n^H]`. With real weights only the upper triangle is
/// accumulated and the result is mirrored.
fn weighted_outer<T: Real>(x: &CMat<T>, weights: impl Iterator<Item = Complex<T>>) -> CMat<T> {
    let (m, n) = x.shape();
    let weights: Vec<Complex<T>> = weights.collect();
    let hermitian = weights.iter().all(|c| c.im == T::zero());
    let mut acc = CMat::zeros(m, m);
    for (j, &c) in weights.iter().enumerate() {
        let col = x.column(j);
        for q in 0..m {
            let cq = col[q].conj() * c;
            let rows = if hermitian { q + 1 } else { m };
            for p in 0..rows {
                acc[(p, q)] += col[p] * cq;
            }
        }
    }
    if hermitian {
        for q in 0..m {
            for p in q + 1..m {
                acc[(p, q)] = acc[(q, p)].conj();
            }
        }
    }
    acc.unscale(T::from_usize(n).unwrap())
}

fn ensure_single_block<T: Real>(state: &ExtractionState<T>) -> Result<()> {
    if state.t_count != 1 {
        return Err(IveError::Unsupported(format!(
            "QuickIVE-1 needs a single block, got T = {}",
            state.t_count
        )));
    }
    Ok(())
}

fn gamma_checked<T: Real>(a: &CVec<T>) -> Result<Complex<T>> {
    let gamma = a[0];
    if cabs(gamma) > T::lit(crate::model::PARAM_FLOOR) {
        Ok(gamma)
    } else {
        Err(IveError::SingularParameterization {
            name: "gamma",
            value: cabs(gamma).as_f64(),
            floor: crate::model::PARAM_FLOOR,
        })
    }
}

/// Background signals `z = B x = g x_1 - gamma x_2` of a block.
fn background<T: Real>(a: &CVec<T>, x: &CMat<T>) -> CMat<T> {
    let (d, n) = x.shape();
    let gamma = a[0];
    CMat::from_fn(d - 1, n, |i, j| a[i + 1] * x[(0, j)] - gamma * x[(i + 1, j)])
}

fn ive1_gradient_from<T: Real>(a: &CVec<T>, x: &CMat<T>, sb: &ScoreBlock<T>, k: usize) -> Result<CVec<T>> {
    let gamma = gamma_checked(a)?;
    let z = background(a, x);
    Ok(weighted_mean(&z, sb.phi.row(k).iter().copied()) / gamma)
}

fn ive1_hessian_from<T: Real>(a: &CVec<T>, x: &CMat<T>, sb: &ScoreBlock<T>, k: usize) -> Result<CMat<T>> {
    let gamma = gamma_checked(a)?;
    let z = background(a, x);
    let m = weighted_outer(&z, sb.dphi.row(k).iter().copied());
    Ok(m.transpose() * creal(-T::one() / gamma.norm_sqr()))
}

/// `grad_h = (1/gamma) E[phi^k z^k]`.
pub fn quickive1_gradient<T: Real>(
    state: &ExtractionState<T>,
    data: &Dataset<T>,
    score: &dyn ScoreFunction<T>,
    k: usize,
) -> Result<CVec<T>> {
    ensure_single_block(state)?;
    let sb = ScoreBlock::new(&state.w, data, 0, score);
    ive1_gradient_from(state.a(k, 0), data.block(k, 0), &sb, k)
}

/// `H_h = -(1/|gamma|^2) E[phi'^k z z^H]^T`.
pub fn quickive1_hessian<T: Real>(
    state: &ExtractionState<T>,
    data: &Dataset<T>,
    score: &dyn ScoreFunction<T>,
    k: usize,
) -> Result<CMat<T>> {
    ensure_single_block(state)?;
    let sb = ScoreBlock::new(&state.w, data, 0, score);
    ive1_hessian_from(state.a(k, 0), data.block(k, 0), &sb, k)
}

/// `H_h ~ -(rho/|gamma|^2) C_z^T`, in the same transposed convention as
/// [`quickive1_hessian`].
pub fn quickive1_hessian_approx<T: Real>(
    state: &ExtractionState<T>,
    cov: &CovarianceSet<T>,
    rho: Complex<T>,
    k: usize,
) -> Result<CMat<T>> {
    ensure_single_block(state)?;
    let gamma = gamma_checked(state.a(k, 0))?;
    let cz = background_cov(cov.cx(k, 0), &state.params(), k, 0);
    Ok(cz.transpose() * (-rho / gamma.norm_sqr()))
}

/// Per-block quantities of the normalized gradient: `E[phi x]`, `nu`, and
/// optionally `E[phi' x x^H]`.
struct Ive2Block<T: Real> {
    phi_x: CVec<T>,
    nu: Complex<T>,
    outer: Option<CMat<T>>,
}

fn ive2_block<T: Real>(
    x: &CMat<T>,
    sb: &ScoreBlock<T>,
    k: usize,
    t: usize,
    nu: Option<Complex<T>>,
    hessian: bool,
) -> Result<Ive2Block<T>> {
    let nu = match nu {
        Some(v) => v,
        None => sb.nu(k, t)?,
    };
    Ok(Ive2Block {
        phi_x: weighted_mean(x, sb.phi.row(k).iter().copied()),
        nu,
        outer: hessian.then(|| weighted_outer(x, sb.dphi.row(k).iter().copied())),
    })
}

fn ive2_blocks<T: Real>(
    state: &ExtractionState<T>,
    data: &Dataset<T>,
    score: &dyn ScoreFunction<T>,
    k: usize,
    nu: Option<&[Complex<T>]>,
    hessian: bool,
) -> Result<Vec<Ive2Block<T>>> {
    (0..state.t_count)
        .map(|t| {
            let sb = ScoreBlock::new(&state.w, data, t, score);
            ive2_block(data.block(k, t), &sb, k, t, nu.map(|v| v[t]), hessian)
        })
        .collect()
}

fn ive2_gradient_from<T: Real>(state: &ExtractionState<T>, k: usize, blocks: &[Ive2Block<T>]) -> CVec<T> {
    let mut acc = CVec::zeros(state.d());
    for (t, b) in blocks.iter().enumerate() {
        acc += state.a(k, t) - &b.phi_x / b.nu;
    }
    acc.unscale(T::from_usize(blocks.len()).unwrap())
}

fn ive2_hessian_from<T: Real>(blocks: &[Ive2Block<T>]) -> CMat<T> {
    let d = blocks[0].phi_x.len();
    let mut acc = CMat::zeros(d, d);
    for b in blocks {
        let outer = b.outer.as_ref().expect("hessian terms requested");
        acc += outer.transpose() / b.nu;
    }
    acc * creal(-T::one() / T::from_usize(blocks.len()).unwrap())
}

/// `nu_{k,t}` for every block.
pub fn quickive2_nu<T: Real>(
    state: &ExtractionState<T>,
    data: &Dataset<T>,
    score: &dyn ScoreFunction<T>,
    k: usize,
) -> Result<Vec<Complex<T>>> {
    (0..state.t_count)
        .map(|t| ScoreBlock::new(&state.w, data, t, score).nu(k, t))
        .collect()
}

/// Normalized gradient `<a^{k,t} - E[phi x^{k,t}] / nu_{k,t}>_t` with `nu`
/// recomputed from the current outputs.
pub fn quickive2_gradient<T: Real>(
    state: &ExtractionState<T>,
    data: &Dataset<T>,
    score: &dyn ScoreFunction<T>,
    k: usize,
) -> Result<CVec<T>> {
    let blocks = ive2_blocks(state, data, score, k, None, false)?;
    Ok(ive2_gradient_from(state, k, &blocks))
}

/// As [`quickive2_gradient`] with `nu` held at the given per-block values.
pub fn quickive2_gradient_frozen<T: Real>(
    state: &ExtractionState<T>,
    data: &Dataset<T>,
    score: &dyn ScoreFunction<T>,
    k: usize,
    nu: &[Complex<T>],
) -> Result<CVec<T>> {
    let blocks = ive2_blocks(state, data, score, k, Some(nu), false)?;
    Ok(ive2_gradient_from(state, k, &blocks))
}

/// Unnormalized gradient `<a^{k,t} - E[phi x^{k,t}]>_t`.
pub fn quickive2_raw_gradient<T: Real>(
    state: &ExtractionState<T>,
    data: &Dataset<T>,
    score: &dyn ScoreFunction<T>,
    k: usize,
) -> Result<CVec<T>> {
    let ones = vec![creal(T::one()); state.t_count];
    quickive2_gradient_frozen(state, data, score, k, &ones)
}

/// `H_w = -<E[phi' x x^H]^T / nu_{k,t}>_t`.
pub fn quickive2_hessian<T: Real>(
    state: &ExtractionState<T>,
    data: &Dataset<T>,
    score: &dyn ScoreFunction<T>,
    k: usize,
) -> Result<CMat<T>> {
    let blocks = ive2_blocks(state, data, score, k, None, true)?;
    Ok(ive2_hessian_from(&blocks))
}

pub fn quickive2_hessian_frozen<T: Real>(
    state: &ExtractionState<T>,
    data: &Dataset<T>,
    score: &dyn ScoreFunction<T>,
    k: usize,
    nu: &[Complex<T>],
) -> Result<CMat<T>> {
    let blocks = ive2_blocks(state, data, score, k, Some(nu), true)?;
    Ok(ive2_hessian_from(&blocks))
}

/// Result of the update half of a step, before normalization.
pub struct Update<T: Real> {
    pub w: Vec<CVec<T>>,
    pub gradient_norm: T,
    pub fallbacks: usize,
}

/// `-(conj H)^{-1} grad`, or `fallback * grad` when `conj H` is too badly
/// conditioned to invert.
fn newton_direction<T: Real>(
    hessian_conj: &CMat<T>,
    grad: &CVec<T>,
    opts: &ExtractOptions<T>,
) -> (CVec<T>, bool) {
    let cond = condition_number(hessian_conj);
    if cond.is_finite() && cond < opts.cond_limit {
        if let Some(x) = solve(hessian_conj, grad) {
            if x.iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
                return (-x, false);
            }
        }
    }
    (grad * creal(opts.fallback_step), true)
}

/// `QuickIVE-1` update of every `h^k` followed by completing `beta^k`;
/// all datasets use the outputs of the current state.
pub fn quickive1_update<T: Real>(
    state: &ExtractionState<T>,
    data: &Dataset<T>,
    cov: &CovarianceSet<T>,
    score: &dyn ScoreFunction<T>,
    opts: &ExtractOptions<T>,
) -> Result<Update<T>> {
    ensure_single_block(state)?;
    let d = state.d();
    let sb = ScoreBlock::new(&state.w, data, 0, score);
    let params = state.params();
    let mut out = Update {
        w: Vec::with_capacity(state.k_count()),
        gradient_norm: T::zero(),
        fallbacks: 0,
    };
    for k in 0..state.k_count() {
        let a = state.a(k, 0);
        let x = data.block(k, 0);
        let grad = ive1_gradient_from(a, x, &sb, k)?;
        out.gradient_norm = out.gradient_norm.max(grad.norm());
        let (delta, fallback) = if d == 1 {
            (grad.clone(), false)
        } else {
            match opts.hessian {
                HessianMode::Exact => {
                    let h = ive1_hessian_from(a, x, &sb, k)?;
                    newton_direction(&conj(&h), &grad, opts)
                }
                HessianMode::Approx => {
                    let gamma = gamma_checked(a)?;
                    let rho = sb.rho(k);
                    if !(cabs(rho) > T::lit(STAT_FLOOR)) {
                        (&grad * creal(opts.fallback_step), true)
                    } else if let Some(ci) = cov.inverse(k, 0) {
                        // conj(H) = -(conj(rho)/|gamma|^2) C_z
                        let cz_inv = background_cov_inverse(ci, &params, k, 0)?;
                        if condition_number(&cz_inv) < opts.cond_limit {
                            (cz_inv * &grad * (creal(gamma.norm_sqr()) / rho.conj()), false)
                        } else {
                            (&grad * creal(opts.fallback_step), true)
                        }
                    } else {
                        let h = quickive1_hessian_approx(state, cov, rho, k)?;
                        newton_direction(&conj(&h), &grad, opts)
                    }
                }
            }
        };
        out.fallbacks += usize::from(fallback);
        let mut p = IveParams::new(d, 1, 1, false);
        p.set_mixing(0, 0, a);
        let h_new = params.h(k, 0) + delta;
        p.set_h(0, 0, &h_new);
        let beta = p.complete_beta(0, 0)?;
        p.set_beta(0, 0, beta);
        out.w.push(p.separating_vector(0, 0));
    }
    Ok(out)
}

/// `QuickIVE-2` update `w <- w - (conj H)^{-1} grad` for every dataset.
pub fn quickive2_update<T: Real>(
    state: &ExtractionState<T>,
    data: &Dataset<T>,
    score: &dyn ScoreFunction<T>,
    opts: &ExtractOptions<T>,
) -> Result<Update<T>> {
    let blocks: Vec<ScoreBlock<T>> = (0..state.t_count)
        .map(|t| ScoreBlock::new(&state.w, data, t, score))
        .collect();
    let mut out = Update {
        w: Vec::with_capacity(state.k_count()),
        gradient_norm: T::zero(),
        fallbacks: 0,
    };
    for k in 0..state.k_count() {
        let per_block = blocks
            .iter()
            .enumerate()
            .map(|(t, sb)| ive2_block(data.block(k, t), sb, k, t, None, true))
            .collect::<Result<Vec<_>>>()?;
        let grad = ive2_gradient_from(state, k, &per_block);
        let hess = ive2_hessian_from(&per_block);
        out.gradient_norm = out.gradient_norm.max(grad.norm());
        let (delta, fallback) = newton_direction(&conj(&hess), &grad, opts);
        out.fallbacks += usize::from(fallback);
        out.w.push(state.w(k) + delta);
    }
    Ok(out)
}

/// Gradient-ascent update `w <- w + mu grad`.
pub fn gradient_update<T: Real>(
    state: &ExtractionState<T>,
    data: &Dataset<T>,
    score: &dyn ScoreFunction<T>,
    mu: T,
) -> Result<Update<T>> {
    if mu < T::zero() {
        return Err(IveError::InvalidArgument("step size must be non-negative".into()));
    }
    let blocks: Vec<ScoreBlock<T>> = (0..state.t_count)
        .map(|t| ScoreBlock::new(&state.w, data, t, score))
        .collect();
    let mut out = Update {
        w: Vec::with_capacity(state.k_count()),
        gradient_norm: T::zero(),
        fallbacks: 0,
    };
    for k in 0..state.k_count() {
        let per_block = blocks
            .iter()
            .enumerate()
            .map(|(t, sb)| ive2_block(data.block(k, t), sb, k, t, None, false))
            .collect::<Result<Vec<_>>>()?;
        let grad = ive2_gradient_from(state, k, &per_block);
        out.gradient_norm = out.gradient_norm.max(grad.norm());
        out.w.push(state.w(k) + grad * creal(mu));
    }
    Ok(out)
}

/// Normalizes and couples the updated vectors and records diagnostics.
pub fn finish_step<T: Real>(
    state: &ExtractionState<T>,
    update: Update<T>,
    cov: &CovarianceSet<T>,
) -> Result<ExtractionState<T>> {
    let (w, a) = normalize_and_couple(update.w, cov)?;
    let mut step = T::zero();
    let mut criterion = T::zero();
    for (new, old) in w.iter().zip(&state.w) {
        step = step.max((new - old).norm() / old.norm());
        criterion = criterion.max(direction_change(new, old));
    }
    let iteration = state.iteration + 1;
    let mut diagnostics = state.diagnostics.clone();
    diagnostics.push(IterationRecord {
        iteration,
        gradient_norm: update.gradient_norm,
        step_norm: step,
        criterion,
        fallbacks: update.fallbacks,
    });
    Ok(ExtractionState {
        w,
        a,
        t_count: state.t_count,
        iteration,
        last_step_norm: step,
        diagnostics,
    })
}

pub fn quickive1_step<T: Real>(
    state: &ExtractionState<T>,
    data: &Dataset<T>,
    cov: &CovarianceSet<T>,
    score: &dyn ScoreFunction<T>,
    opts: &ExtractOptions<T>,
) -> Result<ExtractionState<T>> {
    let update = quickive1_update(state, data, cov, score, opts)?;
    finish_step(state, update, cov)
}

pub fn quickive2_step<T: Real>(
    state: &ExtractionState<T>,
    data: &Dataset<T>,
    cov: &CovarianceSet<T>,
    score: &dyn ScoreFunction<T>,
    opts: &ExtractOptions<T>,
) -> Result<ExtractionState<T>> {
    let update = quickive2_update(state, data, score, opts)?;
    finish_step(state, update, cov)
}

pub fn gradient_baseline_step<T: Real>(
    state: &ExtractionState<T>,
    data: &Dataset<T>,
    cov: &CovarianceSet<T>,
    score: &dyn ScoreFunction<T>,
    mu: T,
) -> Result<ExtractionState<T>> {
    let update = gradient_update(state, data, score, mu)?;
    finish_step(state, update, cov)
}

pub fn step<T: Real>(
    algorithm: Algorithm,
    state: &ExtractionState<T>,
    data: &Dataset<T>,
    cov: &CovarianceSet<T>,
    score: &dyn ScoreFunction<T>,
    opts: &ExtractOptions<T>,
) -> Result<ExtractionState<T>> {
    match algorithm {
        Algorithm::QuickIve1 => quickive1_step(state, data, cov, score, opts),
        Algorithm::QuickIve2 => quickive2_step(state, data, cov, score, opts),
        Algorithm::Gradient => gradient_baseline_step(state, data, cov, score, opts.mu),
    }
}

#[derive(Clone, Debug)]
pub struct ExtractionRun<T: Real> {
    pub state: ExtractionState<T>,
    pub iterations: usize,
    pub converged: bool,
    pub wall_ms: f64,
    pub fallbacks: usize,
}

/// Iterates `algorithm` from `init_w` until the stopping rule fires.
pub fn run_extraction<T: Real>(
    algorithm: Algorithm,
    data: &Dataset<T>,
    cov: &CovarianceSet<T>,
    score: &dyn ScoreFunction<T>,
    init_w: &[CVec<T>],
    stopping: &StoppingRule<T>,
    opts: &ExtractOptions<T>,
) -> Result<ExtractionRun<T>> {
    let start = Instant::now();
    let state = ExtractionState::from_separating(init_w, cov)?;
    run_from_state(algorithm, state, data, cov, score, stopping, opts, start)
}

/// Continues iterating an existing state.
pub fn resume_extraction<T: Real>(
    algorithm: Algorithm,
    state: ExtractionState<T>,
    data: &Dataset<T>,
    cov: &CovarianceSet<T>,
    score: &dyn ScoreFunction<T>,
    stopping: &StoppingRule<T>,
    opts: &ExtractOptions<T>,
) -> Result<ExtractionRun<T>> {
    run_from_state(algorithm, state, data, cov, score, stopping, opts, Instant::now())
}

#[allow(clippy::too_many_arguments)]
fn run_from_state<T: Real>(
    algorithm: Algorithm,
    mut state: ExtractionState<T>,
    data: &Dataset<T>,
    cov: &CovarianceSet<T>,
    score: &dyn ScoreFunction<T>,
    stopping: &StoppingRule<T>,
    opts: &ExtractOptions<T>,
    start: Instant,
) -> Result<ExtractionRun<T>> {
    let mut iterations = 0;
    let mut fallbacks = 0;
    let mut converged = false;
    while iterations < stopping.max_iter {
        state = step(algorithm, &state, data, cov, score, opts)?;
        iterations += 1;
        let last = state.diagnostics.last().expect("step records diagnostics");
        fallbacks += last.fallbacks;
        if last.criterion < stopping.tol {
            converged = true;
            break;
        }
    }
    Ok(ExtractionRun {
        state,
        iterations,
        converged,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
        fallbacks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::cx;
    use crate::score::{NormScore, RationalScore};
    use crate::simgen::{generate_csv_dataset, generate_iva_dataset, near_ideal_init, trial_rng};
    use proptest::prelude::*;

    /// `phi = c conj(s_k)`: constant conjugate derivative `c`.
    struct Linear(f64);

    impl ScoreFunction<f64> for Linear {
        fn name(&self) -> &str {
            "linear"
        }
        fn eval(&self, s: &[Complex<f64>], k: usize) -> Complex<f64> {
            s[k].conj() * self.0
        }
        fn conj_deriv(&self, _s: &[Complex<f64>], _k: usize) -> Complex<f64> {
            cx(self.0, 0.0)
        }
    }

    fn problem(seed: u64, k: usize, d: usize, t: usize) -> (Dataset<f64>, CovarianceSet<f64>, Vec<CVec<f64>>) {
        let mut rng = trial_rng(seed, 0);
        let data = if t == 1 {
            generate_iva_dataset(&mut rng, k, d, 400).unwrap()
        } else {
            generate_csv_dataset(&mut rng, k, d, t, 400, d.min(2)).unwrap()
        };
        let init = near_ideal_init(&mut rng, &data, 0.1).unwrap();
        let cov = CovarianceSet::from_dataset(&data, true).unwrap();
        (data, cov, init)
    }

    fn rank_one() -> (Dataset<f64>, ExtractionState<f64>) {
        let a = CVec::from_vec(vec![cx(1.0, 0.5), cx(-0.3, 0.2), cx(0.7, -1.0)]);
        let s = [cx(1.0, 0.0), cx(-0.5, 2.0), cx(0.3, -0.1), cx(0.0, 1.5)];
        let x = CMat::from_fn(3, 4, |i, j| a[i] * s[j]);
        let w = &a / cx(a.norm_squared(), 0.0);
        let state = ExtractionState::from_parts(vec![w], vec![a], 1).unwrap();
        (Dataset::new(1, 1, vec![x]).unwrap(), state)
    }

    #[test]
    fn vanishing_background_gives_zero_derivatives() {
        let (data, state) = rank_one();
        let g = quickive1_gradient(&state, &data, &RationalScore, 0).unwrap();
        let h = quickive1_hessian(&state, &data, &RationalScore, 0).unwrap();
        assert!(g.norm() < 1e-14 && h.norm() < 1e-14);
    }

    #[test]
    fn constant_derivative_hessians() {
        let (data, cov, init) = problem(1, 2, 4, 1);
        let state = ExtractionState::from_separating(&init, &cov).unwrap();
        let c = 0.7;
        for k in 0..2 {
            let a = state.a(k, 0);
            let z = background(a, data.block(k, 0));
            let cz = &z * z.adjoint() / cx(data.n_b() as f64, 0.0);
            let expect = cz.transpose() * cx(-c / a[0].norm_sqr(), 0.0);
            let h = quickive1_hessian(&state, &data, &Linear(c), k).unwrap();
            assert!((h - &expect).norm() < 1e-12 * expect.norm());
            // unit output variance makes nu = c
            let h2 = quickive2_hessian(&state, &data, &Linear(c), k).unwrap();
            let expect2 = -cov.cx(k, 0).transpose();
            assert!((h2 - &expect2).norm() < 1e-10 * expect2.norm());
        }
    }

    #[test]
    fn single_sample_gradient_vanishes() {
        let e1 = CVec::from_vec(vec![cx(1.0, 0.0), cx(0.0, 0.0)]);
        let data = Dataset::new(1, 1, vec![CMat::from_column_slice(2, 1, e1.as_slice())]).unwrap();
        let state = ExtractionState::from_parts(vec![e1.clone()], vec![e1], 1).unwrap();
        let g = quickive2_gradient(&state, &data, &RationalScore, 0).unwrap();
        assert!(g.norm() < 1e-15);
    }

    #[test]
    fn block_hessian_is_average_of_blocks() {
        let (data, cov, init) = problem(2, 2, 4, 3);
        let state = ExtractionState::from_separating(&init, &cov).unwrap();
        for k in 0..2 {
            let joint = quickive2_hessian(&state, &data, &NormScore::new(), k).unwrap();
            let mut avg = CMat::zeros(4, 4);
            for t in 0..3 {
                let blocks = (0..2).map(|j| data.block(j, t).clone()).collect();
                let one = Dataset::new(2, 1, blocks).unwrap();
                let a = (0..2).map(|j| state.a(j, t).clone()).collect();
                let st = ExtractionState::from_parts(state.separating_vectors().to_vec(), a, 1).unwrap();
                avg += quickive2_hessian(&st, &one, &NormScore::new(), k).unwrap() / cx(3.0, 0.0);
            }
            assert!((joint - &avg).norm() < 1e-12 * avg.norm());
        }
    }

    #[test]
    fn zero_step_size_keeps_state() {
        let (data, cov, init) = problem(3, 3, 5, 1);
        let state = ExtractionState::from_separating(&init, &cov).unwrap();
        let next = gradient_baseline_step(&state, &data, &cov, &RationalScore, 0.0).unwrap();
        for k in 0..3 {
            assert!((next.w(k) - state.w(k)).norm() < 1e-12 * state.w(k).norm());
        }
        assert!(gradient_baseline_step(&state, &data, &cov, &RationalScore, -1.0).is_err());
    }

    #[test]
    fn loose_tolerance_stops_after_one_iteration() {
        let (data, cov, init) = problem(4, 2, 4, 1);
        let rule = StoppingRule::new(2.0, 100).unwrap();
        for alg in [Algorithm::QuickIve1, Algorithm::QuickIve2, Algorithm::Gradient] {
            let run = run_extraction(alg, &data, &cov, &RationalScore, &init, &rule, &ExtractOptions::default()).unwrap();
            assert_eq!(run.iterations, 1);
            assert!(run.converged);
        }
        assert!(StoppingRule::new(0.0, 10).is_err());
        assert!(StoppingRule::new(1e-6, 0).is_err());
    }

    #[test]
    fn converged_run_restarts_in_one_iteration() {
        let (data, cov, init) = problem(5, 3, 6, 1);
        let opts = ExtractOptions::default();
        for alg in [Algorithm::QuickIve1, Algorithm::QuickIve2] {
            let tight = StoppingRule::new(1e-13, 500).unwrap();
            let run = run_extraction(alg, &data, &cov, &RationalScore, &init, &tight, &opts).unwrap();
            assert!(run.converged);
            let again = resume_extraction(alg, run.state, &data, &cov, &RationalScore, &StoppingRule::default(), &opts).unwrap();
            assert_eq!(again.iterations, 1);
        }
    }

    #[test]
    fn single_block_rule_rejects_blocks() {
        let (data, cov, init) = problem(6, 2, 4, 3);
        let state = ExtractionState::from_separating(&init, &cov).unwrap();
        let opts = ExtractOptions::default();
        let err = quickive1_step(&state, &data, &cov, &RationalScore, &opts).unwrap_err();
        assert!(matches!(err, IveError::Unsupported(_)));
        assert!(quickive2_step(&state, &data, &cov, &RationalScore, &opts).is_ok());
    }

    #[test]
    fn approximate_hessian_shares_fixed_points() {
        let (data, cov, init) = problem(7, 3, 5, 1);
        let tight = StoppingRule::new(1e-14, 2000).unwrap();
        let exact = ExtractOptions::default();
        let approx = ExtractOptions {
            hessian: HessianMode::Approx,
            ..ExtractOptions::default()
        };
        let a = run_extraction(Algorithm::QuickIve1, &data, &cov, &RationalScore, &init, &tight, &exact).unwrap();
        let b = run_extraction(Algorithm::QuickIve1, &data, &cov, &RationalScore, &init, &tight, &approx).unwrap();
        assert!(a.converged && b.converged);
        for k in 0..3 {
            assert!(direction_change(a.state.w(k), b.state.w(k)) < 1e-9);
            for st in [&a.state, &b.state] {
                let g = quickive1_gradient(st, &data, &RationalScore, k).unwrap();
                assert!(g.norm() < 2e-6);
            }
        }
    }

    #[test]
    fn zero_curvature_falls_back_to_gradient() {
        let (data, cov, init) = problem(8, 2, 4, 1);
        let state = ExtractionState::from_separating(&init, &cov).unwrap();
        for hessian in [HessianMode::Exact, HessianMode::Approx] {
            let opts = ExtractOptions {
                hessian,
                ..ExtractOptions::default()
            };
            let next = quickive1_step(&state, &data, &cov, &Linear(0.0), &opts).unwrap();
            assert_eq!(next.diagnostics[0].fallbacks, 2);
        }
    }

    #[test]
    fn runs_are_repeatable() {
        let (data, cov, init) = problem(9, 3, 6, 1);
        let rule = StoppingRule::default();
        let opts = ExtractOptions::default();
        let a = run_extraction(Algorithm::QuickIve2, &data, &cov, &RationalScore, &init, &rule, &opts).unwrap();
        let b = run_extraction(Algorithm::QuickIve2, &data, &cov, &RationalScore, &init, &rule, &opts).unwrap();
        assert_eq!(a.iterations, b.iterations);
        assert_eq!(a.state.separating_vectors(), b.state.separating_vectors());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn steps_restore_invariants(seed in 0u64..10_000, alg in 0usize..3, t in 1usize..=3, norm in any::<bool>()) {
            let alg = [Algorithm::QuickIve1, Algorithm::QuickIve2, Algorithm::Gradient][alg];
            let t = if alg == Algorithm::QuickIve1 { 1 } else { t };
            let (data, cov, init) = problem(seed, 2, 4, t);
            let score: Box<dyn ScoreFunction<f64>> = if norm { Box::new(NormScore::new()) } else { Box::new(RationalScore) };
            let mut state = ExtractionState::from_separating(&init, &cov).unwrap();
            for _ in 0..3 {
                state = step(alg, &state, &data, &cov, score.as_ref(), &ExtractOptions::default()).unwrap();
                prop_assert!(state.constraint_residual() < 1e-10);
                for k in 0..2 {
                    let w = state.w(k);
                    let q = w.dotc(&(cov.block_average(k) * w)).re;
                    prop_assert!((q - 1.0).abs() < 1e-10);
                }
            }
        }
    }
}
