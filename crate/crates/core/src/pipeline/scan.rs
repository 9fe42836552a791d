//! One-dimensional likelihood-landscape scans.
//!
//! The scan sweeps one path delay while every other parameter sits at its
//! true value and records the residual objective, exposing the lobe structure
//! that motivates the two-stage estimation: the raw model oscillates at the
//! carrier period, the carrier-free coarse model shows a single wide
//! mainlobe, and the refined model shows a sharper mainlobe with sidelobes at
//! the inverse carrier separation.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::model::{cfr_sample, cis, ChannelRealization, Observation};
use crate::refine::{build_h, ls_gains, ParamLayout, RefinedParams};

/// Which signal model the objective is evaluated under.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScanModel {
    /// Raw model with explicit carrier phases; gains fixed at the truth.
    Original,
    /// Carrier-free model with per-band absorbed gains fixed at the truth.
    Coarse,
    /// Relative-carrier model; gains re-solved by least squares per point.
    Refined,
}

impl std::str::FromStr for ScanModel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "original" => Ok(Self::Original),
            "coarse" => Ok(Self::Coarse),
            "refined" => Ok(Self::Refined),
            other => Err(Error::Parse(format!("unknown scan model '{other}'"))),
        }
    }
}

/// Scanned parameter: one path delay (0-based path index).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScanAxis {
    Delay(usize),
}

impl std::str::FromStr for ScanAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let rest = s
            .strip_prefix("tau")
            .ok_or_else(|| Error::Parse(format!("unknown scan axis '{s}'")))?;
        let k: usize = rest
            .parse()
            .map_err(|_| Error::Parse(format!("unknown scan axis '{s}'")))?;
        if k == 0 {
            return Err(Error::Parse("path indices are 1-based (tau1, tau2, ...)".into()));
        }
        Ok(Self::Delay(k - 1))
    }
}

/// Inclusive scan range with `steps` evaluation points.
#[derive(Debug, Clone, Copy)]
pub struct ScanRange {
    pub start: f64,
    pub stop: f64,
    pub steps: usize,
}

impl ScanRange {
    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        let n = self.steps.max(2);
        (0..n).map(move |i| {
            self.start + (self.stop - self.start) * i as f64 / (n - 1) as f64
        })
    }
}

impl std::str::FromStr for ScanRange {
    type Err = Error;
    /// Parses `start:stop:steps` (seconds, seconds, count).
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() != 3 {
            return Err(Error::Parse(format!("range '{s}' is not start:stop:steps")));
        }
        let start: f64 =
            parts[0].parse().map_err(|_| Error::Parse(format!("bad range start '{}'", parts[0])))?;
        let stop: f64 =
            parts[1].parse().map_err(|_| Error::Parse(format!("bad range stop '{}'", parts[1])))?;
        let steps: usize =
            parts[2].parse().map_err(|_| Error::Parse(format!("bad step count '{}'", parts[2])))?;
        if steps < 2 || !(stop > start) {
            return Err(Error::Parse("range needs stop > start and at least 2 steps".into()));
        }
        Ok(Self { start, stop, steps })
    }
}

/// Residual objective `||y - model(tau)||^2` along the scanned delay, with
/// all remaining parameters at the truth. Gains are held at the truth for
/// the original and coarse models and re-solved by least squares for the
/// refined model.
pub fn scan_likelihood(
    model: ScanModel,
    obs: &Observation,
    truth: &ChannelRealization,
    axis: ScanAxis,
    range: &ScanRange,
) -> Result<Vec<(f64, f64)>> {
    let ScanAxis::Delay(path) = axis;
    if path >= truth.num_paths() {
        return Err(Error::IndexOutOfRange(format!(
            "path {} of {}",
            path + 1,
            truth.num_paths()
        )));
    }
    let config = &obs.config;
    if truth.phase_offsets.len() != config.num_subbands() {
        return Err(Error::DimensionMismatch {
            expected: config.num_subbands(),
            got: truth.phase_offsets.len(),
        });
    }
    let two_pi = 2.0 * std::f64::consts::PI;
    let y = obs.stacked();

    let curve = range
        .values()
        .map(|tau_scan| {
            let mut delays = truth.delays.clone();
            delays[path] = tau_scan;
            let value = match model {
                ScanModel::Original => {
                    let mut resid = 0.0;
                    for m in 0..config.num_subbands() {
                        let sb = config.subband(m);
                        let rot = cis(truth.phase_offsets[m]);
                        for n in config.subcarrier_indices(m) {
                            let f = config.freq_hz(m, n);
                            let mut cfr = Complex64::new(0.0, 0.0);
                            for (k, &tau) in delays.iter().enumerate() {
                                cfr += truth.gains[k] * cis(-two_pi * f * tau);
                            }
                            let timing = cis(
                                -two_pi * n as f64 * sb.fs_hz * truth.timing_offsets[m],
                            );
                            resid += (obs.sample(m, n) - cfr * timing * rot).norm_sqr();
                        }
                    }
                    resid
                }
                ScanModel::Coarse => {
                    // Per-band gains absorb the carrier phase of the TRUE
                    // delays; only the subcarrier ramp follows the scan.
                    let mut resid = 0.0;
                    for m in 0..config.num_subbands() {
                        let sb = config.subband(m);
                        let rot = cis(truth.phase_offsets[m]);
                        let band_gains: Vec<Complex64> = truth
                            .gains
                            .iter()
                            .zip(&truth.delays)
                            .map(|(&g, &tau)| g * rot * cis(-two_pi * sb.fc_hz * tau))
                            .collect();
                        for n in config.subcarrier_indices(m) {
                            let mut model_val = Complex64::new(0.0, 0.0);
                            for (k, &tau) in delays.iter().enumerate() {
                                model_val +=
                                    band_gains[k] * cis(-two_pi * n as f64 * sb.fs_hz * tau);
                            }
                            let timing = cis(
                                -two_pi * n as f64 * sb.fs_hz * truth.timing_offsets[m],
                            );
                            resid += (obs.sample(m, n) - model_val * timing).norm_sqr();
                        }
                    }
                    resid
                }
                ScanModel::Refined => {
                    let layout = ParamLayout {
                        paths: truth.num_paths(),
                        bands: config.num_subbands(),
                        with_timing: obs.timing_prior_std > 0.0,
                    };
                    let rel_phases: Vec<f64> = (1..config.num_subbands())
                        .map(|m| {
                            (truth.phase_offsets[m] - truth.phase_offsets[0])
                                .rem_euclid(two_pi)
                        })
                        .collect();
                    let params = RefinedParams {
                        delays: delays.clone(),
                        timing_offsets: truth.timing_offsets.clone(),
                        rel_phases,
                    };
                    debug_assert_eq!(layout.dim(), params.to_vec(&layout).len());
                    let h = build_h(config, &params);
                    let yv = nalgebra::DVector::from_column_slice(&y);
                    let (g, _) = ls_gains(&h, &yv);
                    (&yv - &h * &g).norm_squared()
                }
            };
            (tau_scan, value)
        })
        .collect();
    Ok(curve)
}

/// Indices of strict-enough local minima of a sampled curve.
pub fn local_minima(values: &[f64]) -> Vec<usize> {
    (1..values.len().saturating_sub(1))
        .filter(|&i| values[i] < values[i - 1] && values[i] <= values[i + 1])
        .collect()
}

/// Indices of local maxima of a sampled curve.
pub fn local_maxima(values: &[f64]) -> Vec<usize> {
    (1..values.len().saturating_sub(1))
        .filter(|&i| values[i] > values[i - 1] && values[i] >= values[i + 1])
        .collect()
}

/// Mainlobe of a sampled objective: the global minimum together with the
/// nearest flanking local maxima (curve edge if none).
#[derive(Debug, Clone, Copy)]
pub struct Mainlobe {
    pub center: f64,
    pub left: f64,
    pub right: f64,
}

impl Mainlobe {
    /// Mean distance from the center to the flanks.
    pub fn half_width(&self) -> f64 {
        0.5 * ((self.center - self.left) + (self.right - self.center))
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.left && x <= self.right
    }
}

pub fn mainlobe(curve: &[(f64, f64)]) -> Option<Mainlobe> {
    if curve.len() < 3 {
        return None;
    }
    let values: Vec<f64> = curve.iter().map(|&(_, v)| v).collect();
    let center_idx = (0..values.len())
        .min_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite"))?;
    let maxima = local_maxima(&values);
    let left_idx = maxima.iter().copied().filter(|&i| i < center_idx).max().unwrap_or(0);
    let right_idx = maxima
        .iter()
        .copied()
        .filter(|&i| i > center_idx)
        .min()
        .unwrap_or(values.len() - 1);
    Some(Mainlobe {
        center: curve[center_idx].0,
        left: curve[left_idx].0,
        right: curve[right_idx].0,
    })
}

/// Median spacing between adjacent local minima of a sampled curve.
pub fn median_minima_spacing(curve: &[(f64, f64)]) -> Option<f64> {
    let values: Vec<f64> = curve.iter().map(|&(_, v)| v).collect();
    let minima = local_minima(&values);
    if minima.len() < 2 {
        return None;
    }
    let mut spacings: Vec<f64> = minima
        .windows(2)
        .map(|w| curve[w[1]].0 - curve[w[0]].0)
        .collect();
    spacings.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    Some(spacings[spacings.len() / 2])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{observe, ChannelRealization, MultibandConfig, NoiseSpec, Subband};

    fn scaled_scenario() -> (MultibandConfig, ChannelRealization, Observation) {
        // Low-carrier scaled plan so lobe periods are resolvable with few
        // points: carrier 200 MHz, band 32 MHz.
        let cfg = MultibandConfig::new(vec![
            Subband { fc_hz: 2.0e8, fs_hz: 1.0e6, n: 32 },
            Subband { fc_hz: 2.6e8, fs_hz: 1.0e6, n: 32 },
        ])
        .unwrap();
        let ch = ChannelRealization::new(
            vec![Complex64::new(1.0, 0.0)],
            vec![100.0e-9],
            vec![0.8, 2.3],
            vec![0.0, 0.0],
            0.0,
        )
        .unwrap();
        let obs = observe(&ch, &cfg, &NoiseSpec { snr_db: f64::INFINITY, seed: 1 }).unwrap();
        (cfg, ch, obs)
    }

    #[test]
    fn axis_and_range_parsing() {
        assert_eq!("tau1".parse::<ScanAxis>().unwrap(), ScanAxis::Delay(0));
        assert_eq!("tau3".parse::<ScanAxis>().unwrap(), ScanAxis::Delay(2));
        assert!("tau0".parse::<ScanAxis>().is_err());
        assert!("delta1".parse::<ScanAxis>().is_err());
        let r: ScanRange = "1.0e-9:5.0e-9:5".parse().unwrap();
        let vals: Vec<f64> = r.values().collect();
        assert_eq!(vals.len(), 5);
        assert!((vals[0] - 1.0e-9).abs() < 1e-18);
        assert!((vals[4] - 5.0e-9).abs() < 1e-18);
        assert!("1:2".parse::<ScanRange>().is_err());
    }

    #[test]
    fn all_models_dip_to_zero_at_truth() {
        let (_, ch, obs) = scaled_scenario();
        let range = ScanRange { start: 99.0e-9, stop: 101.0e-9, steps: 401 };
        for model in [ScanModel::Original, ScanModel::Coarse, ScanModel::Refined] {
            let curve =
                scan_likelihood(model, &obs, &ch, ScanAxis::Delay(0), &range).unwrap();
            let min = curve
                .iter()
                .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
                .unwrap();
            assert!(
                (min.0 - 100.0e-9).abs() <= 5.0e-12,
                "{model:?}: minimum at {} ns",
                min.0 * 1e9
            );
            assert!(min.1 < 1e-12 * obs.mean_power() * 64.0);
        }
    }

    #[test]
    fn coarse_scan_single_mainlobe_contains_truth() {
        let (cfg, ch, obs) = scaled_scenario();
        let bw = cfg.subband(0).bandwidth_hz();
        let range = ScanRange { start: 40.0e-9, stop: 160.0e-9, steps: 1201 };
        let curve =
            scan_likelihood(ScanModel::Coarse, &obs, &ch, ScanAxis::Delay(0), &range).unwrap();
        let lobe = mainlobe(&curve).unwrap();
        assert!(lobe.contains(100.0e-9));
        // Half-width near 1/B.
        let expected = 1.0 / bw;
        assert!(
            (lobe.half_width() - expected).abs() < 0.4 * expected,
            "half-width {} ns vs 1/B {} ns",
            lobe.half_width() * 1e9,
            expected * 1e9
        );
    }

    #[test]
    fn original_scan_oscillates_at_carrier_period() {
        let (cfg, ch, obs) = scaled_scenario();
        let range = ScanRange { start: 90.0e-9, stop: 110.0e-9, steps: 4001 };
        let curve =
            scan_likelihood(ScanModel::Original, &obs, &ch, ScanAxis::Delay(0), &range)
                .unwrap();
        let period = median_minima_spacing(&curve).unwrap();
        let expected = 1.0 / cfg.subband(0).fc_hz;
        assert!(
            (period - expected).abs() < 0.3 * expected,
            "period {} ns vs 1/fc {} ns",
            period * 1e9,
            expected * 1e9
        );
    }

    #[test]
    fn refined_scan_sidelobes_at_carrier_separation() {
        let (cfg, ch, obs) = scaled_scenario();
        let range = ScanRange { start: 70.0e-9, stop: 130.0e-9, steps: 4001 };
        let curve =
            scan_likelihood(ScanModel::Refined, &obs, &ch, ScanAxis::Delay(0), &range)
                .unwrap();
        let spacing = median_minima_spacing(&curve).unwrap();
        let expected = 1.0 / (cfg.subband(1).fc_hz - cfg.subband(0).fc_hz);
        assert!(
            (spacing - expected).abs() < 0.3 * expected,
            "sidelobe spacing {} ns vs {} ns",
            spacing * 1e9,
            expected * 1e9
        );
        // Refined mainlobe narrower than the coarse one.
        let refined_lobe = mainlobe(&curve).unwrap();
        let coarse_curve =
            scan_likelihood(ScanModel::Coarse, &obs, &ch, ScanAxis::Delay(0), &range).unwrap();
        let coarse_lobe = mainlobe(&coarse_curve).unwrap();
        assert!(refined_lobe.half_width() < coarse_lobe.half_width());
    }

    #[test]
    fn lobe_helpers_on_synthetic_curve() {
        let curve: Vec<(f64, f64)> =
            (0..200).map(|i| (i as f64, ((i as f64) * 0.2).sin())).collect();
        let values: Vec<f64> = curve.iter().map(|&(_, v)| v).collect();
        let minima = local_minima(&values);
        let maxima = local_maxima(&values);
        assert!(!minima.is_empty() && !maxima.is_empty());
        // sin period is 2 pi / 0.2 ~ 31.4 samples
        let spacing = median_minima_spacing(&curve).unwrap();
        assert!((spacing - 31.4).abs() < 1.0);
    }
}
