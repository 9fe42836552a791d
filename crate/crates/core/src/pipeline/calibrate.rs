//! Offline calibration of the refined-stage search half-widths.
//!
//! Runs the coarse stage alone over a sweep plan and tabulates the coarse
//! RMSE of the delay and timing-offset estimates per cell. The refined stage
//! sizes its search box at three times the tabulated RMSE around the coarse
//! estimates.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::montecarlo::ExperimentPlan;
use super::TsgeOpts;
use crate::error::Result;
use crate::model::{observe, sample_channel, NoiseSpec};
use crate::seeds::{derive_seed, STREAM_CHANNEL, STREAM_NOISE};
use crate::turbo::run_turbo_bi;

/// One calibration cell: scenario key and measured coarse accuracy.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ECell {
    pub snr_db: f64,
    pub sigma_p_s: f64,
    pub bandwidth_hz: f64,
    /// RMSE of the coarse delay estimates (true paths matched to the nearest
    /// detected delay), seconds.
    pub rmse_tau_s: f64,
    /// RMSE of the coarse timing-offset estimates, seconds.
    pub rmse_delta_s: f64,
    pub trials: usize,
}

/// Calibration table keyed by (SNR, timing prior std, bandwidth).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ETable {
    pub cells: Vec<ECell>,
}

impl ETable {
    /// Nearest cell under a weighted distance (1 dB ~ 1 ns ~ 100 MHz).
    pub fn lookup(&self, snr_db: f64, sigma_p_s: f64, bandwidth_hz: f64) -> Option<&ECell> {
        let snr_db = if snr_db.is_finite() { snr_db } else { 1e3 };
        self.cells.iter().min_by(|a, b| {
            let score = |c: &ECell| {
                (c.snr_db - snr_db).abs()
                    + (c.sigma_p_s - sigma_p_s).abs() * 1e9
                    + (c.bandwidth_hz - bandwidth_hz).abs() * 1e-8
            };
            score(a).partial_cmp(&score(b)).expect("finite scores")
        })
    }
}

/// Run the coarse stage over every cell of `plan` and measure its RMSE.
pub fn calibrate(plan: &ExperimentPlan, opts: &TsgeOpts) -> Result<ETable> {
    plan.validate()?;
    let opts = plan.apply_overrides(opts);
    let mut cells = Vec::with_capacity(plan.sweep.values.len());
    for cell_idx in 0..plan.sweep.values.len() {
        let cell = plan.cell(cell_idx)?;
        let per_trial: Vec<(Vec<f64>, Vec<f64>)> = (0..plan.trials)
            .into_par_iter()
            .map(|trial| {
                let ch_seed = derive_seed(plan.master_seed, &[STREAM_CHANNEL, trial as u64]);
                let noise_seed = derive_seed(
                    plan.master_seed,
                    &[STREAM_NOISE, cell_idx as u64, trial as u64],
                );
                let channel = sample_channel(
                    plan.base.paths,
                    (plan.base.delay_min_s, plan.base.delay_max_s),
                    cell.sigma_p_s,
                    plan.base.bands,
                    ch_seed,
                )
                .expect("valid plan");
                let obs = observe(
                    &channel,
                    &cell.config,
                    &NoiseSpec { snr_db: cell.snr_db, seed: noise_seed },
                )
                .expect("valid plan");
                let grid = opts.build_grid(&cell.config).expect("valid grid options");
                match run_turbo_bi(&obs, &grid, &opts.turbo) {
                    Ok(coarse) => {
                        let tau_errs: Vec<f64> = channel
                            .delays
                            .iter()
                            .map(|&t| {
                                coarse
                                    .delays
                                    .iter()
                                    .map(|&d| d - t)
                                    .min_by(|a, b| {
                                        a.abs().partial_cmp(&b.abs()).expect("finite")
                                    })
                                    .expect("support never empty")
                            })
                            .collect();
                        let delta_errs: Vec<f64> = coarse
                            .timing_offsets
                            .iter()
                            .zip(&channel.timing_offsets)
                            .map(|(est, tru)| est - tru)
                            .collect();
                        (tau_errs, delta_errs)
                    }
                    Err(_) => (Vec::new(), Vec::new()),
                }
            })
            .collect();
        let tau_errs: Vec<f64> =
            per_trial.iter().flat_map(|(t, _)| t.iter().copied()).collect();
        let delta_errs: Vec<f64> =
            per_trial.iter().flat_map(|(_, d)| d.iter().copied()).collect();
        let rms = |v: &[f64]| {
            if v.is_empty() {
                0.0
            } else {
                (v.iter().map(|e| e * e).sum::<f64>() / v.len() as f64).sqrt()
            }
        };
        cells.push(ECell {
            snr_db: cell.snr_db,
            sigma_p_s: cell.sigma_p_s,
            bandwidth_hz: cell.config.subband(0).bandwidth_hz(),
            rmse_tau_s: rms(&tau_errs),
            rmse_delta_s: rms(&delta_errs),
            trials: plan.trials,
        });
    }
    Ok(ETable { cells })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lookup_prefers_matching_cell() {
        let table = ETable {
            cells: vec![
                ECell {
                    snr_db: 0.0,
                    sigma_p_s: 0.0,
                    bandwidth_hz: 40.0e6,
                    rmse_tau_s: 4.0e-9,
                    rmse_delta_s: 0.0,
                    trials: 10,
                },
                ECell {
                    snr_db: 10.0,
                    sigma_p_s: 0.0,
                    bandwidth_hz: 40.0e6,
                    rmse_tau_s: 1.0e-9,
                    rmse_delta_s: 0.0,
                    trials: 10,
                },
                ECell {
                    snr_db: 10.0,
                    sigma_p_s: 1.0e-9,
                    bandwidth_hz: 40.0e6,
                    rmse_tau_s: 2.0e-9,
                    rmse_delta_s: 0.5e-9,
                    trials: 10,
                },
            ],
        };
        let hit = table.lookup(9.0, 0.0, 40.0e6).unwrap();
        assert_eq!(hit.rmse_tau_s, 1.0e-9);
        let hit = table.lookup(12.0, 1.1e-9, 40.0e6).unwrap();
        assert_eq!(hit.rmse_tau_s, 2.0e-9);
        // Infinite SNR maps to the highest-SNR cell.
        let hit = table.lookup(f64::INFINITY, 0.0, 40.0e6).unwrap();
        assert_eq!(hit.snr_db, 10.0);
    }
}
