//! Separation quality measures and their aggregation.

use std::fmt;

use num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::scalar::{CMat, Real};

/// Magnitude cap applied to every dB value.
pub const DB_CAP: f64 = 150.0;
/// SIR above which an extraction counts as a success.
pub const SUCCESS_DB: f64 = 15.0;
/// SIR below which a different source was extracted.
pub const OTHER_SOURCE_DB: f64 = -15.0;

fn to_db(ratio: f64) -> f64 {
    if ratio.is_nan() {
        return -DB_CAP;
    }
    (10.0 * ratio.log10()).clamp(-DB_CAP, DB_CAP)
}

/// SIR of `extracted` against `true_soi`, in dB.
///
/// `extracted` is split into its projection on `true_soi` and a residual;
/// the ratio of their energies is invariant to complex scaling of either
/// argument.
pub fn sir<T: Real>(extracted: &[Complex<T>], true_soi: &[Complex<T>]) -> f64 {
    assert_eq!(extracted.len(), true_soi.len());
    let (mut ss, mut sy, mut yy) = (0.0, Complex::new(0.0, 0.0), 0.0);
    for (y, s) in extracted.iter().zip(true_soi) {
        let y = Complex::new(y.re.as_f64(), y.im.as_f64());
        let s = Complex::new(s.re.as_f64(), s.im.as_f64());
        ss += s.norm_sqr();
        sy += s.conj() * y;
        yy += y.norm_sqr();
    }
    if !(ss > 0.0) || !(yy > 0.0) {
        return -DB_CAP;
    }
    let signal = sy.norm_sqr() / ss;
    let residual = (yy - signal).max(0.0);
    if residual == 0.0 {
        return DB_CAP;
    }
    to_db(signal / residual)
}

/// Assignment maximizing `sum_i weights[i][perm[i]]` (Hungarian method on
/// the negated weights).
pub fn max_weight_assignment(weights: &[Vec<f64>]) -> Vec<usize> {
    let n = weights.len();
    if n == 0 {
        return Vec::new();
    }
    let max = weights
        .iter()
        .flat_map(|r| r.iter().copied())
        .fold(f64::NEG_INFINITY, f64::max);
    let cost = |i: usize, j: usize| max - weights[i][j];
    // potentials and matching, 1-based with a virtual column 0
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut col_match = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        col_match[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = col_match[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[col_match[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if col_match[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            col_match[j0] = col_match[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut perm = vec![0; n];
    for j in 1..=n {
        perm[col_match[j] - 1] = j - 1;
    }
    perm
}

/// Per-output ISR in dB of the de-mixing `w` against the true mixing
/// `a_true`, after resolving the order of the outputs.
pub fn isr<T: Real>(w: &CMat<T>, a_true: &CMat<T>) -> Vec<f64> {
    let g = w * a_true;
    let n = g.nrows();
    let m = g.ncols();
    let mut power = vec![vec![0.0; m]; n];
    for i in 0..n {
        let row_max = (0..m).map(|j| g[(i, j)].norm_sqr().as_f64()).fold(0.0, f64::max);
        for j in 0..m {
            let p = g[(i, j)].norm_sqr().as_f64();
            power[i][j] = if row_max > 0.0 { p / row_max } else { 0.0 };
        }
    }
    let perm = max_weight_assignment(&power);
    (0..n)
        .map(|i| {
            let own = power[i][perm[i]];
            let rest: f64 = (0..m).filter(|&j| j != perm[i]).map(|j| power[i][j]).sum();
            if own <= 0.0 {
                DB_CAP
            } else if rest == 0.0 {
                -DB_CAP
            } else {
                to_db(rest / own)
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Classification {
    Success,
    OtherSource,
    Failure,
}

impl fmt::Display for Classification {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Classification::Success => "success",
            Classification::OtherSource => "other_source",
            Classification::Failure => "failure",
        })
    }
}

/// `> 15 dB` success, `< -15 dB` other source, failure otherwise
/// (both boundaries count as failure).
pub fn classify_outcome(sir_db: f64) -> Classification {
    if sir_db > SUCCESS_DB {
        Classification::Success
    } else if sir_db < OTHER_SOURCE_DB {
        Classification::OtherSource
    } else {
        Classification::Failure
    }
}

/// Result of one extraction of one mixture, or of one separation trial.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrialOutcome {
    pub trial: usize,
    /// Mixture index within the trial.
    pub k: usize,
    pub algorithm: String,
    /// SIR of the extracted signal (extraction only).
    pub sir_db: Option<f64>,
    /// Per-source ISR (separation only).
    pub isr_db: Vec<f64>,
    pub iterations: usize,
    pub wall_ms: f64,
    pub classification: Option<Classification>,
    /// Set when the algorithm returned an error.
    pub error: Option<String>,
}

/// Fixed-width histogram with right-closed bins `(lo, lo + width]`; values
/// outside the range land in the first or last bin.
#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    pub lo: f64,
    pub width: f64,
    pub counts: Vec<usize>,
}

impl Histogram {
    /// Default SIR binning: width 2 dB over `[-51, 51]`, so that `+-15` dB
    /// fall on bin edges.
    pub fn sir_default() -> Self {
        Self::new(-51.0, 51.0, 2.0)
    }

    pub fn new(lo: f64, hi: f64, width: f64) -> Self {
        assert!(hi > lo && width > 0.0);
        let bins = ((hi - lo) / width).round().max(1.0) as usize;
        Self {
            lo,
            width,
            counts: vec![0; bins],
        }
    }

    pub fn add(&mut self, value: f64) {
        let last = self.counts.len() - 1;
        let pos = ((value - self.lo) / self.width).ceil() - 1.0;
        let mut idx = if pos.is_nan() || pos < 0.0 {
            0
        } else {
            (pos as usize).min(last)
        };
        // settle rounding at the edges against the edges themselves
        let edge = |i: usize| self.lo + i as f64 * self.width;
        while idx > 0 && value <= edge(idx) {
            idx -= 1;
        }
        while idx < last && value > edge(idx + 1) {
            idx += 1;
        }
        self.counts[idx] += 1;
    }

    pub fn from_values(values: impl IntoIterator<Item = f64>, lo: f64, hi: f64, width: f64) -> Self {
        let mut h = Self::new(lo, hi, width);
        values.into_iter().for_each(|v| h.add(v));
        h
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Count in bins whose lower edge is at or above `edge`.
    pub fn mass_above(&self, edge: f64) -> usize {
        self.bins()
            .filter(|(lo, _, _)| *lo >= edge - 1e-9)
            .map(|(_, _, c)| c)
            .sum()
    }

    /// `(bin_lo, bin_hi, count)` for every bin.
    pub fn bins(&self) -> impl Iterator<Item = (f64, f64, usize)> + '_ {
        self.counts.iter().enumerate().map(move |(i, &c)| {
            let lo = self.lo + i as f64 * self.width;
            (lo, lo + self.width, c)
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramRow {
    pub bin_lo: f64,
    pub bin_hi: f64,
    pub count: usize,
    pub algorithm: String,
    pub experiment: String,
}

pub fn histogram_rows(h: &Histogram, algorithm: &str, experiment: &str) -> Vec<HistogramRow> {
    h.bins()
        .map(|(bin_lo, bin_hi, count)| HistogramRow {
            bin_lo,
            bin_hi,
            count,
            algorithm: algorithm.to_string(),
            experiment: experiment.to_string(),
        })
        .collect()
}

/// One point of a separation trial: iteration, cumulative compute time and
/// mean ISR over sources.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub iteration: usize,
    pub wall_ms: f64,
    pub isr_db: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub iteration: usize,
    pub wall_ms_mean: f64,
    pub isr_db_mean: f64,
    pub algorithm: String,
}

/// Averages trajectories point by point; shorter trajectories are padded
/// with their last point.
pub fn mean_trajectory(trajectories: &[Vec<TrajectoryPoint>], algorithm: &str) -> Vec<TrajectoryRow> {
    let len = trajectories.iter().map(Vec::len).max().unwrap_or(0);
    let live: Vec<_> = trajectories.iter().filter(|t| !t.is_empty()).collect();
    if live.is_empty() {
        return Vec::new();
    }
    let n = live.len() as f64;
    (0..len)
        .map(|i| {
            let (mut wall, mut isr) = (0.0, 0.0);
            for t in &live {
                let p = t.get(i).unwrap_or_else(|| t.last().unwrap());
                wall += p.wall_ms;
                isr += p.isr_db;
            }
            TrajectoryRow {
                iteration: i,
                wall_ms_mean: wall / n,
                isr_db_mean: isr / n,
                algorithm: algorithm.to_string(),
            }
        })
        .collect()
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::cx;
    use proptest::prelude::*;

    type C = Complex<f64>;

    fn signal(n: usize, seed: u64) -> Vec<C> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| cx(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect()
    }

    #[test]
    fn sir_examples() {
        let s = signal(64, 1);
        let scaled: Vec<C> = s.iter().map(|z| z * cx(0.0, 2.0)).collect();
        assert_eq!(sir(&scaled, &s), DB_CAP);

        let orth: Vec<C> = vec![cx(1.0, 0.0), cx(-1.0, 0.0)];
        assert_eq!(sir(&orth, &[cx(1.0, 0.0), cx(1.0, 0.0)]), -DB_CAP);
        assert_eq!(sir(&[cx(0.0, 0.0); 2], &[cx(1.0, 0.0); 2]), -DB_CAP);

        // noise orthogonal to s with a tenth of its energy
        let s = [cx(1.0, 0.0), cx(1.0, 0.0)];
        let amp = 0.1_f64.sqrt();
        let n = [cx(amp, 0.0), cx(-amp, 0.0)];
        let n_energy: f64 = n.iter().map(|z| z.norm_sqr()).sum();
        assert!((n_energy - 0.2).abs() < 1e-15);
        let y: Vec<C> = s.iter().zip(&n).map(|(a, b)| a + b).collect();
        assert!((sir(&y, &s) - 10.0).abs() < 1e-10);
    }

    #[test]
    fn classification_boundaries() {
        assert_eq!(classify_outcome(20.0), Classification::Success);
        assert_eq!(classify_outcome(-30.0), Classification::OtherSource);
        assert_eq!(classify_outcome(0.0), Classification::Failure);
        assert_eq!(classify_outcome(15.0), Classification::Failure);
        assert_eq!(classify_outcome(-15.0), Classification::Failure);
    }

    #[test]
    fn isr_examples() {
        let a = CMat::from_row_slice(
            3,
            3,
            &[
                cx(1.0, 0.5), cx(0.2, 0.0), cx(0.0, -1.0),
                cx(0.3, 0.0), cx(2.0, 0.0), cx(0.1, 0.1),
                cx(-0.5, 0.0), cx(0.0, 0.4), cx(1.5, 0.0),
            ],
        );
        let w = a.clone().try_inverse().unwrap();
        assert!(isr(&w, &a).iter().all(|&v| v < -100.0));

        let mut pw = w.clone();
        pw.swap_rows(0, 2);
        pw.row_mut(1).scale_mut(-3.0);
        pw.row_mut(0).iter_mut().for_each(|z| *z *= cx(0.0, 2.0));
        assert!(isr(&pw, &a).iter().all(|&v| v < -100.0));

        let g = CMat::from_row_slice(2, 2, &[cx(1.0, 0.0), cx(0.1, 0.0), cx(0.0, 0.0), cx(1.0, 0.0)]);
        let v = isr(&g, &CMat::identity(2, 2));
        assert!((v[0] + 20.0).abs() < 1e-10);
        assert_eq!(v[1], -DB_CAP);
    }

    #[test]
    fn assignment_brute_force() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for n in 1..=5 {
            let w: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| rng.random::<f64>()).collect()).collect();
            let perm = max_weight_assignment(&w);
            let score = |p: &[usize]| p.iter().enumerate().map(|(i, &j)| w[i][j]).sum::<f64>();
            let mut best = f64::NEG_INFINITY;
            let mut idx: Vec<usize> = (0..n).collect();
            permute(&mut idx, 0, &mut |p| best = best.max(score(p)));
            assert!((score(&perm) - best).abs() < 1e-12);
        }
    }

    fn permute(v: &mut Vec<usize>, i: usize, f: &mut impl FnMut(&[usize])) {
        if i == v.len() {
            f(v);
            return;
        }
        for j in i..v.len() {
            v.swap(i, j);
            permute(v, i + 1, f);
            v.swap(i, j);
        }
    }

    #[test]
    fn histogram_basics() {
        let h = Histogram::from_values(Vec::<f64>::new(), -51.0, 51.0, 2.0);
        assert_eq!(h.total(), 0);
        let h = Histogram::from_values([3.0], -51.0, 51.0, 2.0);
        assert_eq!(h.counts.iter().filter(|&&c| c > 0).count(), 1);
        let vals = [150.0, -150.0, 15.0, 15.0001, -15.0, 0.0, 49.5];
        let h = Histogram::from_values(vals, -51.0, 51.0, 2.0);
        assert_eq!(h.total(), vals.len());
        let successes = vals.iter().filter(|&&v| classify_outcome(v) == Classification::Success).count();
        assert_eq!(h.mass_above(SUCCESS_DB), successes);
    }

    #[test]
    fn trajectory_padding() {
        let p = |i, w, v| TrajectoryPoint { iteration: i, wall_ms: w, isr_db: v };
        let rows = mean_trajectory(&[vec![p(0, 0.0, 0.0), p(1, 1.0, -10.0)], vec![p(0, 0.0, -2.0)]], "x");
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1].isr_db_mean, -6.0);
        assert!(mean_trajectory(&[], "x").is_empty());
    }

    proptest! {
        #[test]
        fn sir_scale_invariant(re in -5.0f64..5.0, im in -5.0f64..5.0, re2 in -5.0f64..5.0, seed in 0u64..1000) {
            prop_assume!(re.abs() + im.abs() > 1e-3 && re2.abs() > 1e-3);
            let s = signal(32, seed);
            let y: Vec<C> = s.iter().zip(signal(32, seed + 1)).map(|(a, b)| a + b * 0.3).collect();
            let base = sir(&y, &s);
            let ys: Vec<C> = y.iter().map(|z| z * cx(re, im)).collect();
            let ss: Vec<C> = s.iter().map(|z| z * cx(re2, 0.0)).collect();
            prop_assert!((sir(&ys, &ss) - base).abs() < 1e-9);
        }

        #[test]
        fn histogram_counts_every_value(vals in proptest::collection::vec(-200.0f64..200.0, 0..50)) {
            let h = Histogram::from_values(vals.iter().copied(), -51.0, 51.0, 2.0);
            prop_assert_eq!(h.total(), vals.len());
            let successes = vals.iter().filter(|&&v| v > SUCCESS_DB).count();
            prop_assert_eq!(h.mass_above(SUCCESS_DB), successes);
        }
    }
}
