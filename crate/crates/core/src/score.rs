//! Model score functions `phi^k(s) = -d log f(s) / d s_k` and the
//! statistics built from them.
//!
//! Only the conjugate Wirtinger derivative `d phi^k / d conj(s_k)` is
//! provided; the update rules assume circular sources.

use std::sync::atomic::{AtomicUsize, Ordering};

use num_complex::Complex;

use crate::scalar::{cabs, creal, CMat, Real};
use crate::{IveError, Result};

/// Floor applied to `|nu|` and `|rho|`.
pub const STAT_FLOOR: f64 = 1e-10;

/// Identifiers accepted by [`score_by_name`].
pub const SCORE_NAMES: [&str; 2] = ["rational", "norm"];

pub trait ScoreFunction<T: Real>: Send + Sync {
    fn name(&self) -> &str;

    /// `phi^k(s)` for `s` in `C^K`.
    fn eval(&self, s: &[Complex<T>], k: usize) -> Complex<T>;

    /// `d phi^k / d conj(s_k)`.
    fn conj_deriv(&self, s: &[Complex<T>], k: usize) -> Complex<T>;

    fn eval_with_deriv(&self, s: &[Complex<T>], k: usize) -> (Complex<T>, Complex<T>) {
        (self.eval(s, k), self.conj_deriv(s, k))
    }

    /// Log of the model density this score derives from, up to a constant.
    fn log_density(&self, _s: &[Complex<T>]) -> Option<T> {
        None
    }
}

#[inline]
fn norm_sqr<T: Real>(s: &[Complex<T>]) -> T {
    s.iter().fold(T::zero(), |acc, z| acc + z.norm_sqr())
}

/// `phi^k(s) = conj(s_k) / (1 + ||s||^2)`, paired with
/// `log f(s) = -log(1 + ||s||^2)`.
#[derive(Clone, Copy, Debug, Default)]
pub struct RationalScore;

impl<T: Real> ScoreFunction<T> for RationalScore {
    fn name(&self) -> &str {
        "rational"
    }

    fn eval(&self, s: &[Complex<T>], k: usize) -> Complex<T> {
        s[k].conj() / (T::one() + norm_sqr(s))
    }

    fn conj_deriv(&self, s: &[Complex<T>], k: usize) -> Complex<T> {
        self.eval_with_deriv(s, k).1
    }

    #[inline]
    fn eval_with_deriv(&self, s: &[Complex<T>], k: usize) -> (Complex<T>, Complex<T>) {
        let q = T::one() + norm_sqr(s);
        let inv = T::one() / q;
        let phi = s[k].conj() * inv;
        let deriv = (q - s[k].norm_sqr()) * inv * inv;
        (phi, creal(deriv))
    }

    fn log_density(&self, s: &[Complex<T>]) -> Option<T> {
        Some(-(T::one() + norm_sqr(s)).ln())
    }
}

/// `phi^k(s) = conj(s_k) / ||s||`, paired with `log f(s) = -2 ||s||`.
///
/// At `s = 0` both the value and the derivative are taken as zero and the
/// event is counted.
#[derive(Debug, Default)]
pub struct NormScore {
    zero_hits: AtomicUsize,
}

impl NormScore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of evaluations that hit `s = 0`.
    pub fn zero_hits(&self) -> usize {
        self.zero_hits.load(Ordering::Relaxed)
    }

    /// Strict evaluation that reports `s = 0` instead of substituting.
    pub fn try_eval<T: Real>(&self, s: &[Complex<T>], k: usize) -> Result<(Complex<T>, Complex<T>)> {
        let r2 = norm_sqr(s);
        if r2 > T::zero() {
            Ok(self.eval_with_deriv(s, k))
        } else {
            Err(IveError::SingularScore)
        }
    }
}

impl Clone for NormScore {
    fn clone(&self) -> Self {
        Self {
            zero_hits: AtomicUsize::new(self.zero_hits()),
        }
    }
}

impl<T: Real> ScoreFunction<T> for NormScore {
    fn name(&self) -> &str {
        "norm"
    }

    fn eval(&self, s: &[Complex<T>], k: usize) -> Complex<T> {
        self.eval_with_deriv(s, k).0
    }

    fn conj_deriv(&self, s: &[Complex<T>], k: usize) -> Complex<T> {
        self.eval_with_deriv(s, k).1
    }

    #[inline]
    fn eval_with_deriv(&self, s: &[Complex<T>], k: usize) -> (Complex<T>, Complex<T>) {
        let r2 = norm_sqr(s);
        if !(r2 > T::zero()) {
            self.zero_hits.fetch_add(1, Ordering::Relaxed);
            let zero = Complex::new(T::zero(), T::zero());
            return (zero, zero);
        }
        let r = r2.sqrt();
        let inv = T::one() / r;
        let phi = s[k].conj() * inv;
        let deriv = inv - s[k].norm_sqr() * inv * inv * inv * T::lit(0.5);
        (phi, creal(deriv))
    }

    fn log_density(&self, s: &[Complex<T>]) -> Option<T> {
        Some(-T::lit(2.0) * norm_sqr(s).sqrt())
    }
}

/// Looks up a registered score function.
pub fn score_by_name<T: Real>(name: &str) -> Option<Box<dyn ScoreFunction<T>>> {
    match name {
        "rational" => Some(Box::new(RationalScore)),
        "norm" => Some(Box::new(NormScore::new())),
        _ => None,
    }
}

/// Sample average of `f(column)` over the columns of a `K x N_b` block.
fn column_mean<T: Real>(
    outputs: &CMat<T>,
    mut f: impl FnMut(&[Complex<T>]) -> Complex<T>,
) -> Complex<T> {
    let n = outputs.ncols();
    let mut acc = Complex::new(T::zero(), T::zero());
    for j in 0..n {
        let col = outputs.column(j);
        acc += f(col.as_slice());
    }
    acc / T::from_usize(n.max(1)).unwrap()
}

fn floored<T: Real>(name: &'static str, v: Complex<T>, k: usize, t: usize) -> Result<Complex<T>> {
    if cabs(v) > T::lit(STAT_FLOOR) {
        Ok(v)
    } else {
        Err(IveError::DegenerateStatistic {
            name,
            value: cabs(v).as_f64(),
            k,
            t,
        })
    }
}

/// `nu_{k,t} = E[phi^k(s) s_k]` over a block of outputs (`K x N_b`,
/// one row per dataset).
pub fn nu_stat<T: Real>(
    outputs: &CMat<T>,
    score: &dyn ScoreFunction<T>,
    k: usize,
    t: usize,
) -> Result<Complex<T>> {
    let nu = column_mean(outputs, |s| score.eval(s, k) * s[k]);
    floored("nu", nu, k, t)
}

/// `rho_{k,t} = E[d phi^k / d conj(s_k)]` over a block of outputs.
pub fn rho_stat<T: Real>(
    outputs: &CMat<T>,
    score: &dyn ScoreFunction<T>,
    k: usize,
    t: usize,
) -> Result<Complex<T>> {
    let rho = column_mean(outputs, |s| score.conj_deriv(s, k));
    floored("rho", rho, k, t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::cx;
    use proptest::prelude::*;

    type C = Complex<f64>;

    /// Central-difference Wirtinger derivative in the conjugate direction.
    fn numeric_conj_deriv(score: &dyn ScoreFunction<f64>, s: &[C], k: usize) -> C {
        let h = 1e-5;
        let probe = |dz: C| {
            let mut p = s.to_vec();
            p[k] += dz;
            score.eval(&p, k)
        };
        let d_re = (probe(cx(h, 0.0)) - probe(cx(-h, 0.0))) / (2.0 * h);
        let d_im = (probe(cx(0.0, h)) - probe(cx(0.0, -h))) / (2.0 * h);
        (d_re + cx(0.0, 1.0) * d_im) * 0.5
    }

    #[test]
    fn rational_examples() {
        let s = [cx(1.0, 0.0)];
        assert_eq!(ScoreFunction::<f64>::eval(&RationalScore, &s, 0), cx(0.5, 0.0));
        assert_eq!(ScoreFunction::<f64>::conj_deriv(&RationalScore, &s, 0), cx(0.25, 0.0));
        let fd = numeric_conj_deriv(&RationalScore, &s, 0);
        assert!((fd - cx(0.25, 0.0)).norm() < 1e-6);

        let s = [cx(0.0, 0.0), cx(0.0, 3.0)];
        assert_eq!(ScoreFunction::<f64>::eval(&RationalScore, &s, 0), cx(0.0, 0.0));
        let d = ScoreFunction::<f64>::conj_deriv(&RationalScore, &s, 0);
        assert!((d - cx(0.1, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn norm_examples() {
        let score = NormScore::new();
        assert_eq!(score.eval(&[cx(2.0, 0.0)], 0), cx(1.0, 0.0));
        let s = [cx(1.0, 0.0), cx(0.0, 0.0), cx(0.0, 0.0)];
        assert_eq!(score.conj_deriv(&s, 0), cx(0.5, 0.0));
        assert!((numeric_conj_deriv(&score, &s, 0) - cx(0.5, 0.0)).norm() < 1e-6);
        let s = [cx(0.0, 0.0), cx(1.0, 0.0)];
        assert_eq!(score.eval(&s, 0), cx(0.0, 0.0));
        assert_eq!(score.conj_deriv(&s, 0), cx(1.0, 0.0));
    }

    #[test]
    fn norm_at_origin_is_zero_and_counted() {
        let score = NormScore::new();
        let s = [cx(0.0, 0.0); 2];
        assert_eq!(score.eval(&s, 1), cx(0.0, 0.0));
        assert_eq!(score.conj_deriv(&s, 1), cx(0.0, 0.0));
        assert_eq!(score.zero_hits(), 2);
        assert_eq!(score.try_eval(&s, 0), Err(IveError::SingularScore));
    }

    #[test]
    fn registry() {
        for name in SCORE_NAMES {
            let s = score_by_name::<f64>(name).unwrap();
            assert_eq!(s.name(), name);
        }
        assert!(score_by_name::<f64>("tanh").is_none());
    }

    #[test]
    fn nu_rho_examples() {
        let ones = CMat::from_element(1, 8, cx(1.0, 0.0));
        assert_eq!(nu_stat(&ones, &RationalScore, 0, 0).unwrap(), cx(0.5, 0.0));

        let zeros = CMat::from_element(1, 8, cx(0.0, 0.0));
        assert_eq!(rho_stat(&zeros, &RationalScore, 0, 0).unwrap(), cx(1.0, 0.0));
        // nu of an all-zero block is degenerate
        assert!(matches!(
            nu_stat(&zeros, &RationalScore, 0, 0),
            Err(IveError::DegenerateStatistic { name: "nu", .. })
        ));

        let mut block = CMat::from_element(2, 4, cx(0.0, 0.0));
        block.row_mut(0).fill(cx(1.0, 0.0));
        let rho = rho_stat(&block, &NormScore::new(), 0, 0).unwrap();
        assert!((rho - cx(0.5, 0.0)).norm() < 1e-15);

        // norm score: nu = E|s|
        let vals = [cx(1.0, 1.0), cx(-2.0, 0.5), cx(0.3, -0.1)];
        let block = CMat::from_row_slice(1, 3, &vals);
        let nu = nu_stat(&block, &NormScore::new(), 0, 0).unwrap();
        let mean_abs = vals.iter().map(|z| z.norm()).sum::<f64>() / 3.0;
        assert!((nu - cx(mean_abs, 0.0)).norm() < 1e-14);
    }

    #[test]
    fn nu_rho_match_naive_loops() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let block = CMat::from_fn(3, 200, |_, _| cx(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)));
        let score = RationalScore;
        for k in 0..3 {
            let (mut nu, mut rho) = (cx(0.0, 0.0), cx(0.0, 0.0));
            for j in 0..200 {
                let s: Vec<C> = (0..3).map(|i| block[(i, j)]).collect();
                let r2: f64 = s.iter().map(|z| z.norm_sqr()).sum();
                nu += s[k].conj() / (1.0 + r2) * s[k];
                rho += cx((1.0 + r2 - s[k].norm_sqr()) / (1.0 + r2).powi(2), 0.0);
            }
            nu /= 200.0;
            rho /= 200.0;
            assert!((nu_stat(&block, &score, k, 0).unwrap() - nu).norm() < 1e-12);
            assert!((rho_stat(&block, &score, k, 0).unwrap() - rho).norm() < 1e-12);
        }
    }

    fn point(max_k: usize) -> impl Strategy<Value = (Vec<C>, usize)> {
        (1..=max_k).prop_flat_map(|kk| {
            (
                proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0), kk),
                0..kk,
                0.1f64..10.0,
            )
                .prop_filter_map("nonzero", |(v, k, radius)| {
                    let s: Vec<C> = v.into_iter().map(|(a, b)| cx(a, b)).collect();
                    let n = s.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
                    (n > 1e-3).then(|| (s.iter().map(|z| z * (radius / n)).collect(), k))
                })
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn conj_deriv_matches_finite_difference((s, k) in point(4)) {
            let scores: [&dyn ScoreFunction<f64>; 2] = [&RationalScore, &NormScore::new()];
            for score in scores {
                let exact = score.conj_deriv(&s, k);
                let fd = numeric_conj_deriv(score, &s, k);
                prop_assert!((exact - fd).norm() <= 1e-6 * (1.0 + exact.norm()));
            }
        }

        #[test]
        fn rational_is_bounded((s, k) in point(4)) {
            prop_assert!(ScoreFunction::<f64>::eval(&RationalScore, &s, k).norm() <= 0.5 + 1e-15);
        }

        #[test]
        fn phase_of_own_slot_cancels((s, k) in point(4), theta in 0.0f64..6.3) {
            let rot = Complex::from_polar(1.0, theta);
            let mut r = s.clone();
            r[k] *= rot;
            let scores: [&dyn ScoreFunction<f64>; 2] = [&RationalScore, &NormScore::new()];
            for score in scores {
                let before = score.eval(&s, k) * s[k];
                let after = score.eval(&r, k) * r[k];
                prop_assert!((before - after).norm() < 1e-12);
            }
        }
    }
}
