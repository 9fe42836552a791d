//! Stage-1 coarse estimator: turbo Bayesian inference on the sparse
//! delay-grid representation of the carrier-free signal model.
//!
//! Outer loop (EM-style): the E-step computes per-band gain posteriors for
//! the current timing offsets and off-grid corrections through turbo message
//! passing; the M-step performs one Armijo ascent step per parameter block on
//! the MM surrogate. Delays are read out from the grid points whose pooled
//! activation probability crosses a threshold.

mod estep;
mod mstep;

pub use estep::{
    e_step, extrinsic_a, extrinsic_b, lmmse_update, pooled_support_prob, support_messages,
    BGPrior, BandPosterior, EStepOpts, EStepResult, ModuleABand, ModuleAState, ModuleBBand,
    ModuleBState,
};
pub use mstep::{m_step, ArmijoOpts, MStepOutcome, Surrogate};

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::grid::{fill_phase_ramp, steering_gram, DelayGrid};
use crate::model::{cis, Observation};
use estep::{e_step_with_parts, LmmseParts};

/// Options of the coarse estimator.
#[derive(Debug, Clone)]
pub struct TurboOpts {
    /// Outer EM iteration budget.
    pub max_em_iters: usize,
    /// Outer stopping threshold on the per-block parameter change, measured
    /// relative to the grid spacing.
    pub em_tol: f64,
    pub estep: EStepOpts,
    /// Expected path count; the activation prior defaults to
    /// `expected_paths / L`.
    pub expected_paths: usize,
    /// Explicit activation prior, overriding `expected_paths`.
    pub activation_prob: Option<f64>,
    /// Explicit per-band gain variance, overriding the
    /// `mean |y_m|^2 * L / N_m` rule.
    pub gain_var: Option<f64>,
    /// Pooled activation probability above which a grid point is detected.
    pub support_threshold: f64,
    pub armijo: ArmijoOpts,
    /// Noise-variance floor relative to the mean observation power
    /// (keeps zero-noise observations usable).
    pub noise_floor_rel: f64,
}

impl Default for TurboOpts {
    fn default() -> Self {
        Self {
            max_em_iters: 100,
            em_tol: 1e-5,
            estep: EStepOpts::default(),
            expected_paths: 4,
            activation_prob: None,
            gain_var: None,
            support_threshold: 0.5,
            armijo: ArmijoOpts::default(),
            noise_floor_rel: 1e-10,
        }
    }
}

/// Output of the coarse stage.
#[derive(Debug, Clone)]
pub struct CoarseEstimate {
    /// Detected delays (grid point + off-grid correction), ascending;
    /// the first entry is the line-of-sight estimate.
    pub delays: Vec<f64>,
    /// Estimated per-band timing offsets.
    pub timing_offsets: Vec<f64>,
    /// Pooled activation probability per grid point.
    pub support_prob: Vec<f64>,
    /// Detected grid indices after de-duplication.
    pub support: Vec<usize>,
    /// Final grid including converged off-grid corrections.
    pub grid: DelayGrid,
    /// Per-band gain posterior means from the final E-step.
    pub post_means: Vec<DVector<Complex64>>,
    /// Per-band gain posterior covariances from the final E-step.
    pub post_covs: Vec<DMatrix<Complex64>>,
    /// Outer iterations run.
    pub iters: usize,
    /// Outer loop converged before the iteration budget.
    pub converged: bool,
    /// Final E-step converged.
    pub estep_converged: bool,
    /// No grid point crossed the support threshold; the single most probable
    /// point was used instead.
    pub fallback_used: bool,
    /// Extrinsic-variance clamping events over the whole run.
    pub clamp_events: usize,
    /// Effective noise variance used (after flooring).
    pub noise_var_eff: f64,
}

impl CoarseEstimate {
    /// Line-of-sight delay estimate: the smallest detected delay.
    pub fn los_delay(&self) -> f64 {
        self.delays[0]
    }
}

/// `Phi^H Phi` and `Phi^H y` for one band, without materializing `Phi`:
/// the Gram comes from the closed-form Dirichlet kernel and the projection
/// from `O(N L)` phase-ramp accumulation.
fn lmmse_parts_fast(
    obs: &Observation,
    m: usize,
    delta: f64,
    delays: &[f64],
) -> LmmseParts {
    let sb = obs.config.subband(m);
    let n0 = -(sb.n as i64) / 2;
    let two_pi_fs = 2.0 * std::f64::consts::PI * sb.fs_hz;
    let gram = steering_gram(sb.fs_hz, sb.n, delays);

    // q = S^H y, then proj_l = a_l^H q.
    let step_s = -two_pi_fs * delta;
    let ratio_conj = cis(step_s).conj();
    let mut s_conj = cis(step_s * n0 as f64).conj();
    let q: Vec<Complex64> = obs
        .band(m)
        .iter()
        .map(|y| {
            let out = s_conj * y;
            s_conj *= ratio_conj;
            out
        })
        .collect();
    let mut ramp = vec![Complex64::new(0.0, 0.0); sb.n];
    let proj = DVector::from_iterator(
        delays.len(),
        delays.iter().map(|&d| {
            fill_phase_ramp(&mut ramp, n0, two_pi_fs * d);
            ramp.iter().zip(&q).map(|(a_conj, qi)| a_conj * qi).sum::<Complex64>()
        }),
    );
    LmmseParts { gram, proj }
}

fn resolve_prior(obs: &Observation, grid_len: usize, opts: &TurboOpts) -> Result<BGPrior> {
    let p = opts
        .activation_prob
        .unwrap_or_else(|| (opts.expected_paths as f64 / grid_len as f64).clamp(1e-3, 0.9));
    let band_vars: Vec<f64> = (0..obs.config.num_subbands())
        .map(|m| {
            opts.gain_var.unwrap_or_else(|| {
                let n = obs.config.subband(m).n as f64;
                let mean_power: f64 =
                    obs.band(m).iter().map(|y| y.norm_sqr()).sum::<f64>() / n;
                (mean_power * grid_len as f64 / n).max(1e-300)
            })
        })
        .collect();
    BGPrior::with_constant_var(p, &band_vars, grid_len)
}

/// Detected support: pooled probability over threshold, de-duplicated so no
/// two detections are closer than half the grid spacing (the more probable
/// one wins).
fn detect_support(
    pooled: &[f64],
    grid: &DelayGrid,
    threshold: f64,
) -> (Vec<usize>, bool) {
    let mut detected: Vec<usize> =
        (0..pooled.len()).filter(|&l| pooled[l] > threshold).collect();
    let mut fallback = false;
    if detected.is_empty() {
        let best = (0..pooled.len())
            .max_by(|&a, &b| pooled[a].partial_cmp(&pooled[b]).expect("finite probs"))
            .expect("non-empty grid");
        detected.push(best);
        fallback = true;
    }
    detected.sort_by(|&a, &b| grid.delay(a).partial_cmp(&grid.delay(b)).unwrap());
    let min_sep = grid.spacing() / 2.0;
    let mut kept: Vec<usize> = Vec::with_capacity(detected.len());
    for l in detected {
        match kept.last() {
            Some(&prev) if (grid.delay(l) - grid.delay(prev)).abs() < min_sep => {
                if pooled[l] > pooled[prev] {
                    *kept.last_mut().unwrap() = l;
                }
            }
            _ => kept.push(l),
        }
    }
    (kept, fallback)
}

/// Run the coarse estimator on one observation.
///
/// Alternates the turbo E-step with the blockwise M-step until neither
/// parameter block moves by more than `em_tol` grid spacings or the budget
/// `max_em_iters` is exhausted; a zero budget returns the prior-only
/// estimate with the non-convergence flag set. Timing offsets are frozen at
/// zero when the observation was generated with `sigma_p = 0` (the prior
/// degenerates to a hard constraint).
pub fn run_turbo_bi(
    obs: &Observation,
    grid: &DelayGrid,
    opts: &TurboOpts,
) -> Result<CoarseEstimate> {
    let config = &obs.config;
    let bands = config.num_subbands();
    let max_fs = config.subbands().iter().map(|s| s.fs_hz).fold(0.0, f64::max);
    let max_delay = grid.points()[grid.len() - 1] + grid.spacing() / 2.0;
    if max_delay >= 0.5 / max_fs {
        return Err(Error::InvalidParameter(format!(
            "grid span {max_delay:e} s reaches the coarse-model alias period {:e} s",
            0.5 / max_fs
        )));
    }

    let noise_var_eff = obs
        .noise_var
        .max(opts.noise_floor_rel * obs.mean_power())
        .max(1e-300);
    let prior = resolve_prior(obs, grid.len(), opts)?;
    let update_deltas = obs.timing_prior_std > 0.0;

    let mut grid = grid.clone();
    let mut deltas = vec![0.0; bands];
    let ys: Vec<&[Complex64]> = (0..bands).map(|m| obs.band(m)).collect();

    if opts.max_em_iters == 0 {
        let pooled = vec![prior.activation_prob; grid.len()];
        let (support, _) = detect_support(&pooled, &grid, opts.support_threshold);
        let delays: Vec<f64> = support.iter().map(|&l| grid.delay(l)).collect();
        let l_len = grid.len();
        return Ok(CoarseEstimate {
            delays,
            timing_offsets: deltas,
            support_prob: pooled,
            support,
            post_means: (0..bands).map(|_| DVector::zeros(l_len)).collect(),
            post_covs: (0..bands)
                .map(|m| {
                    DMatrix::from_fn(l_len, l_len, |i, j| {
                        if i == j {
                            Complex64::new(prior.gain_var[m][i], 0.0)
                        } else {
                            Complex64::new(0.0, 0.0)
                        }
                    })
                })
                .collect(),
            grid,
            iters: 0,
            converged: false,
            estep_converged: false,
            fallback_used: true,
            clamp_events: 0,
            noise_var_eff,
        });
    }

    let mut clamp_events = 0usize;
    let mut converged = false;
    let mut iters = 0usize;
    for it in 1..=opts.max_em_iters {
        iters = it;
        let delays = grid.delays();
        let parts: Vec<LmmseParts> = (0..bands)
            .map(|m| lmmse_parts_fast(obs, m, deltas[m], &delays))
            .collect();
        let res = e_step_with_parts(&parts, &prior, noise_var_eff, &opts.estep);
        clamp_events += res.clamped;

        let post_means: Vec<DVector<Complex64>> =
            res.module_a.bands.iter().map(|b| b.post_mean.clone()).collect();
        let post_covs: Vec<DMatrix<Complex64>> =
            res.module_a.bands.iter().map(|b| b.post_cov.clone()).collect();
        let surr = Surrogate::new(
            config,
            grid.points(),
            ys.clone(),
            &post_means,
            &post_covs,
            noise_var_eff,
            obs.timing_prior_std,
        );
        let out = m_step(
            &surr,
            &deltas,
            &grid.offsets,
            grid.spacing(),
            update_deltas,
            &opts.armijo,
        );

        let delta_change = deltas
            .iter()
            .zip(&out.deltas)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let offset_change = grid
            .offsets
            .iter()
            .zip(&out.offsets)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        deltas = out.deltas;
        grid.offsets = out.offsets;
        if delta_change.max(offset_change) / grid.spacing() <= opts.em_tol {
            converged = true;
            break;
        }
    }

    // Final E-step so the reported posterior matches the final parameters.
    let delays_now = grid.delays();
    let parts: Vec<LmmseParts> = (0..bands)
        .map(|m| lmmse_parts_fast(obs, m, deltas[m], &delays_now))
        .collect();
    let final_res = e_step_with_parts(&parts, &prior, noise_var_eff, &opts.estep);
    clamp_events += final_res.clamped;

    let band_ln: Vec<&[(f64, f64)]> = final_res
        .module_b
        .bands
        .iter()
        .map(|b| b.band_support_ln.as_slice())
        .collect();
    let pooled = pooled_support_prob(&band_ln, prior.activation_prob);
    let (support, fallback_used) = detect_support(&pooled, &grid, opts.support_threshold);
    let mut delays: Vec<f64> = support.iter().map(|&l| grid.delay(l)).collect();
    delays.sort_by(|a, b| a.partial_cmp(b).unwrap());

    Ok(CoarseEstimate {
        delays,
        timing_offsets: deltas,
        support_prob: pooled,
        support,
        post_means: final_res.module_a.bands.iter().map(|b| b.post_mean.clone()).collect(),
        post_covs: final_res.module_a.bands.iter().map(|b| b.post_cov.clone()).collect(),
        grid,
        iters,
        converged,
        estep_converged: final_res.converged,
        fallback_used,
        clamp_events,
        noise_var_eff,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{
        observe, ChannelRealization, MultibandConfig, NoiseSpec,
    };

    fn vi_config() -> MultibandConfig {
        MultibandConfig::uniform_plan(2, 1.80e9, 40.0e6, 60.0e3, 180.0e6).unwrap()
    }

    fn channel(delays: Vec<f64>, gains: Vec<Complex64>, bands: usize) -> ChannelRealization {
        ChannelRealization::new(gains, delays, vec![0.0; bands], vec![0.0; bands], 0.0).unwrap()
    }

    #[test]
    fn recovers_on_grid_paths_noiselessly() {
        // Two on-grid paths, no distortions: both delays recovered to well
        // under 1e-3 grid spacings.
        let cfg = vi_config();
        let grid = DelayGrid::uniform(250.0e-9, 51).unwrap(); // spacing 5 ns
        let ch = channel(
            vec![40.0e-9, 90.0e-9],
            vec![Complex64::new(0.9, 0.3), Complex64::new(-0.4, 0.6)],
            2,
        );
        let obs = observe(&ch, &cfg, &NoiseSpec { snr_db: f64::INFINITY, seed: 1 }).unwrap();
        let est = run_turbo_bi(&obs, &grid, &TurboOpts::default()).unwrap();
        assert_eq!(est.delays.len(), 2, "support: {:?}", est.support);
        let spacing = grid.spacing();
        assert!(
            (est.delays[0] - 40.0e-9).abs() < 1e-3 * spacing,
            "LoS {} vs 40 ns",
            est.delays[0]
        );
        assert!((est.delays[1] - 90.0e-9).abs() < 1e-3 * spacing);
    }

    #[test]
    fn off_grid_path_refined_below_spacing() {
        // Single path half a spacing off-grid: recovered error well below the
        // grid spacing once the off-grid correction engages.
        let cfg = vi_config();
        let grid = DelayGrid::uniform(250.0e-9, 51).unwrap();
        let truth = 62.5e-9; // between grid points 60 ns and 65 ns
        let ch = channel(vec![truth], vec![Complex64::new(1.0, -0.2)], 2);
        let obs = observe(&ch, &cfg, &NoiseSpec { snr_db: f64::INFINITY, seed: 2 }).unwrap();
        let est = run_turbo_bi(&obs, &grid, &TurboOpts::default()).unwrap();
        let err = (est.los_delay() - truth).abs();
        assert!(
            err < grid.spacing() / 20.0,
            "error {:.3} ns vs spacing {:.3} ns",
            err * 1e9,
            grid.spacing() * 1e9
        );
    }

    #[test]
    fn zero_budget_returns_prior_only_with_flag() {
        let cfg = vi_config();
        let grid = DelayGrid::uniform(250.0e-9, 41).unwrap();
        let ch = channel(vec![50.0e-9], vec![Complex64::new(1.0, 0.0)], 2);
        let obs = observe(&ch, &cfg, &NoiseSpec { snr_db: 10.0, seed: 3 }).unwrap();
        let est = run_turbo_bi(&obs, &grid, &TurboOpts { max_em_iters: 0, ..Default::default() })
            .unwrap();
        assert!(!est.converged);
        assert!(est.fallback_used);
        assert_eq!(est.delays.len(), 1);
        for p in &est.support_prob {
            assert!((p - est.support_prob[0]).abs() < 1e-15);
        }
    }

    #[test]
    fn grid_reaching_alias_period_rejected() {
        let cfg = vi_config();
        // 1/(2 fs) = 8.33 us; a grid spanning that must be refused.
        let grid = DelayGrid::uniform(9.0e-6, 11).unwrap();
        let ch = channel(vec![50.0e-9], vec![Complex64::new(1.0, 0.0)], 2);
        let obs = observe(&ch, &cfg, &NoiseSpec { snr_db: 10.0, seed: 3 }).unwrap();
        assert!(run_turbo_bi(&obs, &grid, &TurboOpts::default()).is_err());
    }

    #[test]
    fn support_dedup_keeps_strongest() {
        let grid = DelayGrid::uniform(100.0e-9, 11).unwrap(); // 10 ns spacing
        let mut pooled = vec![0.0; 11];
        pooled[3] = 0.9;
        pooled[4] = 0.95;
        let mut g = grid.clone();
        // Pull the two detections within half a spacing of each other.
        g.offsets[3] = 4.9e-9;
        g.offsets[4] = -4.9e-9;
        let (kept, fallback) = detect_support(&pooled, &g, 0.5);
        assert!(!fallback);
        assert_eq!(kept, vec![4]);
    }
}
