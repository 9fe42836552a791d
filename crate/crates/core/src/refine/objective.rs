//! Refined-model MAP objective: the linear system matrix `H(theta)`, the
//! closed-form least-squares gain solution, and the decoupled fitness
//! function the Stage-2 optimizers minimize.
//!
//! The refined parameter vector stacks the path delays, the per-band timing
//! offsets, and the residual phase offsets of bands 2..M (band 1's phase is
//! absorbed into the gains and pinned to zero, which removes the gain/phase
//! ambiguity of the raw model). Eliminating the complex gains through least
//! squares reduces the search dimension from `3K + 2M - 1` to `K + 2M - 1`;
//! when the timing-offset prior is degenerate (`sigma_p = 0`) the timing
//! dimensions are dropped as well.

use nalgebra::{Cholesky, DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::grid::fill_phase_ramp;
use crate::model::{cis, MultibandConfig, Observation};
use crate::turbo::CoarseEstimate;

/// Flattened layout of the refined parameter vector:
/// `[delays; timing offsets (optional); phases of bands 2..M]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamLayout {
    pub paths: usize,
    pub bands: usize,
    /// Timing offsets are estimated only when their prior is non-degenerate.
    pub with_timing: bool,
}

impl ParamLayout {
    pub fn dim(&self) -> usize {
        self.paths + if self.with_timing { self.bands } else { 0 } + self.bands - 1
    }

    pub fn delay_index(&self, k: usize) -> usize {
        k
    }

    pub fn timing_index(&self, m: usize) -> Option<usize> {
        self.with_timing.then_some(self.paths + m)
    }

    /// Index of the residual phase of band `m` (1-based within 1..bands-1,
    /// i.e. `m >= 1` in 0-based band numbering).
    pub fn phase_index(&self, m: usize) -> usize {
        debug_assert!(m >= 1);
        self.paths + if self.with_timing { self.bands } else { 0 } + (m - 1)
    }

    pub fn is_delay_dim(&self, d: usize) -> bool {
        d < self.paths
    }

    pub fn is_phase_dim(&self, d: usize) -> bool {
        d >= self.paths + if self.with_timing { self.bands } else { 0 }
    }
}

/// Refined-model parameters in physical units.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinedParams {
    /// Path delays, seconds.
    pub delays: Vec<f64>,
    /// Per-band timing offsets, seconds (all-zero when not estimated).
    pub timing_offsets: Vec<f64>,
    /// Residual phase offsets of bands 2..M, radians.
    pub rel_phases: Vec<f64>,
}

impl RefinedParams {
    pub fn layout(&self, with_timing: bool) -> ParamLayout {
        ParamLayout {
            paths: self.delays.len(),
            bands: self.timing_offsets.len(),
            with_timing,
        }
    }

    pub fn to_vec(&self, layout: &ParamLayout) -> Vec<f64> {
        let mut v = Vec::with_capacity(layout.dim());
        v.extend_from_slice(&self.delays);
        if layout.with_timing {
            v.extend_from_slice(&self.timing_offsets);
        }
        v.extend_from_slice(&self.rel_phases);
        v
    }

    pub fn from_slice(layout: &ParamLayout, x: &[f64]) -> Self {
        debug_assert_eq!(x.len(), layout.dim());
        let delays = x[..layout.paths].to_vec();
        let timing_offsets = if layout.with_timing {
            x[layout.paths..layout.paths + layout.bands].to_vec()
        } else {
            vec![0.0; layout.bands]
        };
        let phase_start = layout.paths + if layout.with_timing { layout.bands } else { 0 };
        let rel_phases = x[phase_start..].to_vec();
        Self { delays, timing_offsets, rel_phases }
    }

    /// Smallest delay: the line-of-sight estimate.
    pub fn los_delay(&self) -> f64 {
        self.delays.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// System matrix of the refined linear model, `N x K`. The row block of band
/// `m` in column `k` is
/// `e^{-j 2 pi (f'_m + n fs) tau_k} e^{-j 2 pi n fs delta_m} e^{j phi'_m}`
/// with `f'_m = fc_m - fc_1` and `phi'_1 = 0`.
pub fn build_h(config: &MultibandConfig, params: &RefinedParams) -> DMatrix<Complex64> {
    let n_total = config.total_samples();
    let paths = params.delays.len();
    let fc1 = config.subband(0).fc_hz;
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut h = DMatrix::zeros(n_total, paths);
    let mut row0 = 0usize;
    for m in 0..config.num_subbands() {
        let sb = config.subband(m);
        let n0 = -(sb.n as i64) / 2;
        let fc_rel = sb.fc_hz - fc1;
        let phase = if m == 0 { 0.0 } else { params.rel_phases[m - 1] };
        let delta = params.timing_offsets[m];
        for (k, &tau) in params.delays.iter().enumerate() {
            let base = cis(-two_pi * fc_rel * tau + phase);
            let step = -two_pi * sb.fs_hz * (tau + delta);
            let col = &mut h.column_mut(k).as_mut_slice()[row0..row0 + sb.n];
            fill_phase_ramp(col, n0, step);
            for v in col.iter_mut() {
                *v *= base;
            }
        }
        row0 += sb.n;
    }
    h
}

fn solve_gains(
    mut gram: DMatrix<Complex64>,
    rhs: DVector<Complex64>,
) -> (DVector<Complex64>, bool) {
    let k = gram.nrows();
    let well_conditioned = |chol: &Cholesky<Complex64, nalgebra::Dyn>| {
        let l = chol.l_dirty();
        let mut lo = f64::INFINITY;
        let mut hi: f64 = 0.0;
        for i in 0..k {
            let d = l[(i, i)].re.abs();
            lo = lo.min(d);
            hi = hi.max(d);
        }
        lo > 1e-7 * hi
    };
    if let Some(chol) = Cholesky::new(gram.clone()) {
        if well_conditioned(&chol) {
            return (chol.solve(&rhs), false);
        }
    }
    let ridge = 1e-10 * gram.trace().re / k as f64;
    for i in 0..k {
        gram[(i, i)] += Complex64::new(ridge, 0.0);
    }
    match Cholesky::new(gram.clone()) {
        Some(chol) => (chol.solve(&rhs), true),
        None => {
            let sol = gram.lu().solve(&rhs).unwrap_or_else(|| DVector::zeros(k));
            (sol, true)
        }
    }
}

/// Least-squares gain solution `(H^H H)^{-1} H^H y`. An ill-conditioned
/// system (near-coincident delays) falls back to ridge regularization with
/// `1e-10 tr(H^H H)/K` and reports it through the flag.
pub fn ls_gains(h: &DMatrix<Complex64>, y: &DVector<Complex64>) -> (DVector<Complex64>, bool) {
    solve_gains(h.ad_mul(h), h.ad_mul(y))
}

/// Decoupled MAP objective over the refined parameters.
#[derive(Debug, Clone)]
pub struct RefinedObjective {
    config: MultibandConfig,
    y: DVector<Complex64>,
    layout: ParamLayout,
    /// `1/sigma_ns^2`, or 1 for noiseless observations.
    noise_weight: f64,
    timing_prior_std: f64,
}

impl RefinedObjective {
    pub fn new(obs: &Observation, paths: usize) -> Self {
        let with_timing = obs.timing_prior_std > 0.0;
        Self::from_parts(
            obs.config.clone(),
            DVector::from_vec(obs.stacked()),
            obs.noise_var,
            obs.timing_prior_std,
            ParamLayout { paths, bands: obs.config.num_subbands(), with_timing },
        )
    }

    pub fn from_parts(
        config: MultibandConfig,
        y: DVector<Complex64>,
        noise_var: f64,
        timing_prior_std: f64,
        layout: ParamLayout,
    ) -> Self {
        assert_eq!(y.len(), config.total_samples());
        let noise_weight = if noise_var > 0.0 { 1.0 / noise_var } else { 1.0 };
        Self { config, y, layout, noise_weight, timing_prior_std }
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn config(&self) -> &MultibandConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.layout.dim()
    }

    /// Residual of the prior penalty for the candidate's timing offsets.
    fn timing_penalty(&self, params: &RefinedParams) -> f64 {
        if self.layout.with_timing && self.timing_prior_std > 0.0 {
            let sp2 = self.timing_prior_std * self.timing_prior_std;
            params.timing_offsets.iter().map(|d| d * d / (2.0 * sp2)).sum()
        } else {
            0.0
        }
    }

    /// Fitness and LS gains of one candidate.
    pub fn fitness_and_gains(&self, params: &RefinedParams) -> (f64, DVector<Complex64>, bool) {
        let h = build_h(&self.config, params);
        let (gains, flagged) = solve_gains(h.ad_mul(&h), h.ad_mul(&self.y));
        let paths = gains.len();
        let mut resid = 0.0;
        for i in 0..self.y.len() {
            let mut model = Complex64::new(0.0, 0.0);
            for k in 0..paths {
                model += h[(i, k)] * gains[k];
            }
            resid += (self.y[i] - model).norm_sqr();
        }
        (resid * self.noise_weight + self.timing_penalty(params), gains, flagged)
    }

    pub fn fitness_params(&self, params: &RefinedParams) -> f64 {
        self.fitness_and_gains(params).0
    }

    /// Fitness of a flattened candidate vector.
    pub fn fitness(&self, x: &[f64]) -> f64 {
        self.fitness_params(&RefinedParams::from_slice(&self.layout, x))
    }

    /// Joint-space objective: gains taken from the candidate instead of the
    /// inner least squares (used by the joint PSO baseline).
    pub fn fitness_joint(&self, params: &RefinedParams, gains: &[Complex64]) -> f64 {
        let h = build_h(&self.config, params);
        let mut resid = 0.0;
        for i in 0..self.y.len() {
            let mut model = Complex64::new(0.0, 0.0);
            for (k, g) in gains.iter().enumerate() {
                model += h[(i, k)] * g;
            }
            resid += (self.y[i] - model).norm_sqr();
        }
        resid * self.noise_weight + self.timing_penalty(params)
    }
}

/// Decoupled MAP fitness of `theta` against stacked observations `y`:
/// `||y - H(theta) g*(theta)||^2 / sigma_ns^2 + sum_m delta_m^2 / (2 sigma_p^2)`.
/// With `sigma_p = 0` the timing penalty is dropped (the offsets are fixed
/// rather than estimated); with `sigma_ns^2 = 0` the residual is unweighted.
pub fn fitness(
    config: &MultibandConfig,
    params: &RefinedParams,
    y: &[Complex64],
    noise_var: f64,
    timing_prior_std: f64,
) -> f64 {
    let layout = params.layout(timing_prior_std > 0.0);
    let obj = RefinedObjective::from_parts(
        config.clone(),
        DVector::from_column_slice(y),
        noise_var,
        timing_prior_std,
        layout,
    );
    obj.fitness_params(params)
}

/// Box search space of the refined parameters.
#[derive(Debug, Clone)]
pub struct SearchSpace {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub layout: ParamLayout,
}

impl SearchSpace {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, layout: ParamLayout) -> Result<Self> {
        if lower.len() != layout.dim() || upper.len() != layout.dim() {
            return Err(Error::DimensionMismatch { expected: layout.dim(), got: lower.len() });
        }
        if lower.iter().zip(&upper).any(|(l, u)| l > u) {
            return Err(Error::InvalidParameter("search space has lower > upper".into()));
        }
        Ok(Self { lower, upper, layout })
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn width(&self, d: usize) -> f64 {
        self.upper[d] - self.lower[d]
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .enumerate()
            .all(|(d, &v)| v >= self.lower[d] - 1e-30 && v <= self.upper[d] + 1e-30)
    }
}

/// Search space centered on the coarse estimates: each delay dimension spans
/// `+- e_tau` around a detected delay, each timing dimension (present only
/// for `sigma_p > 0`) spans `+- e_delta` around the coarse offset, and each
/// residual phase spans the full period `[0, 2 pi]`.
pub fn search_space_from_coarse(
    coarse: &CoarseEstimate,
    e_tau: f64,
    e_delta: f64,
    timing_prior_std: f64,
    bands: usize,
) -> Result<SearchSpace> {
    if coarse.delays.is_empty() {
        return Err(Error::EmptySupport);
    }
    let layout = ParamLayout {
        paths: coarse.delays.len(),
        bands,
        with_timing: timing_prior_std > 0.0,
    };
    let mut lower = Vec::with_capacity(layout.dim());
    let mut upper = Vec::with_capacity(layout.dim());
    for &tau in &coarse.delays {
        lower.push(tau - e_tau);
        upper.push(tau + e_tau);
    }
    if layout.with_timing {
        for &d in &coarse.timing_offsets {
            lower.push(d - e_delta);
            upper.push(d + e_delta);
        }
    }
    for _ in 1..bands {
        lower.push(0.0);
        upper.push(2.0 * std::f64::consts::PI);
    }
    SearchSpace::new(lower, upper, layout)
}
