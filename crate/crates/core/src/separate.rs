//! Parallel separation: `d` one-unit updates per dataset followed by the
//! symmetric orthogonalization `W <- W (W^H W)^{-1/2}`.
//!
//! Separation runs on whitened data, where unit output variance and mutual
//! decorrelation of the outputs both reduce to `W` being unitary. De-mixing
//! matrices are reported in the original coordinates.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use crate::extract::{direction_change, quickive1_update, quickive2_update, ExtractOptions, ExtractionState, StoppingRule};
use crate::linalg::hermitian_power;
use crate::model::{orthogonal_coupling, CovarianceSet, Dataset};
use crate::scalar::{CMat, Real};
use crate::score::ScoreFunction;
use crate::{IveError, Result};

/// Smallest singular value accepted by [`symmetric_orthogonalize`].
pub const RANK_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    QuickIva1,
    QuickIva2,
}

impl Variant {
    pub fn id(self) -> &'static str {
        match self {
            Variant::QuickIva1 => "quickiva1",
            Variant::QuickIva2 => "quickiva2",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Variant {
    type Err = IveError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "quickiva1" => Ok(Variant::QuickIva1),
            "quickiva2" => Ok(Variant::QuickIva2),
            other => Err(IveError::Config(format!("unknown separation variant '{other}'"))),
        }
    }
}

/// `W (W^H W)^{-1/2}`, the unitary polar factor of `W`.
pub fn symmetric_orthogonalize<T: Real>(w: &CMat<T>) -> Result<CMat<T>> {
    let floor = T::lit(RANK_FLOOR * RANK_FLOOR);
    let gram = w.adjoint() * w;
    let inv_sqrt = hermitian_power(&gram, T::lit(-0.5), floor)?;
    Ok(w * inv_sqrt)
}

/// Whitened copy of a dataset: `x~ = V x` with `V = C_x^{-1/2}` per dataset.
#[derive(Clone, Debug)]
pub struct Whitened<T: Real> {
    pub data: Dataset<T>,
    pub cov: CovarianceSet<T>,
    pub transforms: Vec<CMat<T>>,
}

pub fn whiten<T: Real>(data: &Dataset<T>, with_inverse: bool) -> Result<Whitened<T>> {
    if data.t_count() != 1 {
        return Err(IveError::Unsupported(format!(
            "separation needs a single block, got T = {}",
            data.t_count()
        )));
    }
    let raw = CovarianceSet::from_dataset(data, false)?;
    let transforms = (0..data.k_count())
        .map(|k| hermitian_power(raw.cx(k, 0), T::lit(-0.5), T::zero()))
        .collect::<Result<Vec<_>>>()?;
    let white = data.transformed(&transforms)?;
    let cov = CovarianceSet::from_dataset(&white, with_inverse)?;
    Ok(Whitened {
        data: white,
        cov,
        transforms,
    })
}

/// De-mixing matrices (rows are `w_i^H`) in whitened coordinates.
#[derive(Clone, Debug)]
pub struct SeparationState<T: Real> {
    pub w: Vec<CMat<T>>,
    pub iteration: usize,
    /// Largest row-wise stopping statistic of the last iteration.
    pub last_criterion: T,
    /// Hessian fallbacks taken over the whole run.
    pub fallbacks: usize,
}

impl<T: Real> SeparationState<T> {
    pub fn new(w: Vec<CMat<T>>) -> Self {
        Self {
            w,
            iteration: 0,
            last_criterion: T::one(),
            fallbacks: 0,
        }
    }

    pub fn d(&self) -> usize {
        self.w[0].nrows()
    }

    /// `W~ V`: de-mixing of dataset `k` in the original coordinates.
    pub fn demixing(&self, k: usize, transforms: &[CMat<T>]) -> CMat<T> {
        &self.w[k] * &transforms[k]
    }

    /// One-unit view of row `i` across all datasets.
    fn row_state(&self, i: usize, cov: &CovarianceSet<T>) -> Result<ExtractionState<T>> {
        let w: Vec<_> = self.w.iter().map(|m| m.row(i).adjoint()).collect();
        let a = w
            .iter()
            .enumerate()
            .map(|(k, wk)| orthogonal_coupling(wk, cov.cx(k, 0)))
            .collect::<Result<Vec<_>>>()?;
        ExtractionState::from_parts(w, a, 1)
    }
}

/// One parallel iteration on whitened data: each row takes one `QuickIVE`
/// update without the per-row rescaling, then every `W^k` is
/// orthogonalized.
pub fn quickiva_iteration<T: Real>(
    state: &SeparationState<T>,
    data: &Dataset<T>,
    cov: &CovarianceSet<T>,
    score: &dyn ScoreFunction<T>,
    variant: Variant,
    opts: &ExtractOptions<T>,
) -> Result<SeparationState<T>> {
    if data.t_count() != 1 {
        return Err(IveError::Unsupported("parallel separation needs T = 1".into()));
    }
    let d = state.d();
    let mut next: Vec<CMat<T>> = state.w.clone();
    let mut fallbacks = 0;
    for i in 0..d {
        let row = state.row_state(i, cov)?;
        let update = match variant {
            Variant::QuickIva1 => quickive1_update(&row, data, cov, score, opts)?,
            Variant::QuickIva2 => quickive2_update(&row, data, score, opts)?,
        };
        fallbacks += update.fallbacks;
        for (k, wk) in update.w.iter().enumerate() {
            next[k].row_mut(i).copy_from(&wk.adjoint());
        }
    }
    let next = next.iter().map(symmetric_orthogonalize).collect::<Result<Vec<_>>>()?;
    let mut criterion = T::zero();
    for (new, old) in next.iter().zip(&state.w) {
        for i in 0..d {
            let c = direction_change(&new.row(i).adjoint(), &old.row(i).adjoint());
            criterion = criterion.max(c);
        }
    }
    Ok(SeparationState {
        w: next,
        iteration: state.iteration + 1,
        last_criterion: criterion,
        fallbacks: state.fallbacks + fallbacks,
    })
}

/// De-mixing matrices (original coordinates) after a given iteration with
/// the compute time spent up to that point.
#[derive(Clone, Debug)]
pub struct Snapshot<T: Real> {
    pub iteration: usize,
    pub elapsed_ms: f64,
    pub demixing: Vec<CMat<T>>,
}

#[derive(Clone, Debug)]
pub struct SeparationRun<T: Real> {
    pub state: SeparationState<T>,
    pub transforms: Vec<CMat<T>>,
    /// Snapshot 0 is the orthogonalized initial point.
    pub history: Vec<Snapshot<T>>,
    pub converged: bool,
}

impl<T: Real> SeparationRun<T> {
    pub fn iterations(&self) -> usize {
        self.state.iteration
    }

    pub fn demixing(&self, k: usize) -> CMat<T> {
        self.state.demixing(k, &self.transforms)
    }
}

/// Runs up to `budget` iterations from `init_w` (one de-mixing matrix per
/// dataset, original coordinates). With a stopping rule, the run ends early
/// once every row's direction change is below its tolerance.
pub fn run_separation<T: Real>(
    variant: Variant,
    data: &Dataset<T>,
    score: &dyn ScoreFunction<T>,
    init_w: &[CMat<T>],
    budget: usize,
    stopping: Option<&StoppingRule<T>>,
    opts: &ExtractOptions<T>,
) -> Result<SeparationRun<T>> {
    let d = data.d();
    if init_w.len() != data.k_count() || init_w.iter().any(|w| w.shape() != (d, d)) {
        return Err(IveError::Dimension("one d x d initial de-mixing matrix per dataset".into()));
    }
    let mut clock = 0.0;
    let start = Instant::now();
    let white = whiten(data, opts.hessian == crate::extract::HessianMode::Approx)?;
    // express the initial de-mixing in whitened coordinates: W~ = W V^{-1}
    let init = init_w
        .iter()
        .zip(&white.transforms)
        .map(|(w, v)| {
            let v_inv = v.clone().try_inverse().ok_or(IveError::RankDeficient(0.0))?;
            symmetric_orthogonalize(&(w * v_inv))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut state = SeparationState::new(init);
    clock += start.elapsed().as_secs_f64() * 1e3;

    let snapshot = |s: &SeparationState<T>, clock: f64| Snapshot {
        iteration: s.iteration,
        elapsed_ms: clock,
        demixing: (0..s.w.len()).map(|k| s.demixing(k, &white.transforms)).collect(),
    };
    let mut history = vec![snapshot(&state, clock)];
    let mut converged = false;
    while state.iteration < budget {
        let tick = Instant::now();
        state = quickiva_iteration(&state, &white.data, &white.cov, score, variant, opts)?;
        clock += tick.elapsed().as_secs_f64() * 1e3;
        history.push(snapshot(&state, clock));
        if let Some(rule) = stopping {
            if state.last_criterion < rule.tol {
                converged = true;
                break;
            }
        }
    }
    Ok(SeparationRun {
        state,
        transforms: white.transforms,
        history,
        converged,
    })
}
