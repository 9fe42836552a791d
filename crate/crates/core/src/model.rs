//! Multiband OFDM frequency plan, synthetic multipath channels, and noisy
//! channel-frequency-response (CFR) observations.
//!
//! A measurement campaign collects CFR samples over `M` non-overlapping OFDM
//! subbands. Subband `m` has `N[m]` subcarriers at spacing `fs[m]` around
//! carrier `fc[m]`; the subcarrier index runs over `-N/2 ..= N/2-1`. Each CFR
//! sample of a `K`-path channel is a sum of complex exponentials in the path
//! delays, further rotated by two per-subband hardware distortions: a random
//! phase offset and a receiver timing offset.

use num_complex::Complex64;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Unit-magnitude complex exponential `e^{j x}`.
#[inline]
pub(crate) fn cis(x: f64) -> Complex64 {
    let (s, c) = x.sin_cos();
    Complex64::new(c, s)
}

/// One OFDM subband of the frequency plan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Subband {
    /// Carrier frequency in Hz.
    pub fc_hz: f64,
    /// Subcarrier spacing in Hz.
    pub fs_hz: f64,
    /// Subcarrier count (even).
    pub n: usize,
}

impl Subband {
    /// Occupied bandwidth `N * fs` in Hz.
    pub fn bandwidth_hz(&self) -> f64 {
        self.n as f64 * self.fs_hz
    }

    /// Spectrum occupied by this subband, `[fc - N fs / 2, fc + N fs / 2)`.
    pub fn spectrum_hz(&self) -> (f64, f64) {
        let half = self.bandwidth_hz() / 2.0;
        (self.fc_hz - half, self.fc_hz + half)
    }
}

/// The multiband frequency plan: carrier, spacing, and subcarrier count per
/// subband, with pairwise non-overlapping spectra.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultibandConfig {
    subbands: Vec<Subband>,
}

impl MultibandConfig {
    pub fn new(subbands: Vec<Subband>) -> Result<Self> {
        let cfg = Self { subbands };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Validate the plan invariants. Needed after deserializing.
    pub fn validate(&self) -> Result<()> {
        if self.subbands.is_empty() {
            return Err(Error::InvalidConfig("at least one subband required".into()));
        }
        for (m, sb) in self.subbands.iter().enumerate() {
            if !(sb.fc_hz > 0.0) {
                return Err(Error::InvalidConfig(format!("subband {m}: fc must be > 0")));
            }
            if !(sb.fs_hz > 0.0) {
                return Err(Error::InvalidConfig(format!("subband {m}: fs must be > 0")));
            }
            if sb.n < 2 || sb.n % 2 != 0 {
                return Err(Error::InvalidConfig(format!(
                    "subband {m}: subcarrier count must be even and >= 2, got {}",
                    sb.n
                )));
            }
        }
        for i in 0..self.subbands.len() {
            for j in (i + 1)..self.subbands.len() {
                let (lo_i, hi_i) = self.subbands[i].spectrum_hz();
                let (lo_j, hi_j) = self.subbands[j].spectrum_hz();
                if lo_i < hi_j && lo_j < hi_i {
                    return Err(Error::InvalidConfig(format!(
                        "subbands {i} and {j} overlap in frequency"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Build an `m`-subband plan with equal per-band bandwidth and subcarrier
    /// spacing. The subcarrier count is the largest even number of spacings
    /// fitting the bandwidth, `N = 2*floor(B / (2 fs))`. Consecutive carriers
    /// are placed `bandwidth + gap` apart, so `gap` is the guard band between
    /// adjacent subband spectra.
    pub fn uniform_plan(
        bands: usize,
        fc1_hz: f64,
        bandwidth_hz: f64,
        fs_hz: f64,
        gap_hz: f64,
    ) -> Result<Self> {
        if bands == 0 {
            return Err(Error::InvalidConfig("at least one subband required".into()));
        }
        if !(bandwidth_hz > 0.0) || !(fs_hz > 0.0) {
            return Err(Error::InvalidConfig("bandwidth and fs must be > 0".into()));
        }
        let n = 2 * ((bandwidth_hz / (2.0 * fs_hz)).floor() as usize);
        if n < 2 {
            return Err(Error::InvalidConfig(
                "bandwidth must fit at least two subcarriers".into(),
            ));
        }
        let subbands = (0..bands)
            .map(|m| Subband {
                fc_hz: fc1_hz + m as f64 * (bandwidth_hz + gap_hz),
                fs_hz,
                n,
            })
            .collect();
        Self::new(subbands)
    }

    pub fn num_subbands(&self) -> usize {
        self.subbands.len()
    }

    pub fn subbands(&self) -> &[Subband] {
        &self.subbands
    }

    pub fn subband(&self, m: usize) -> &Subband {
        &self.subbands[m]
    }

    /// Total CFR sample count over all subbands.
    pub fn total_samples(&self) -> usize {
        self.subbands.iter().map(|s| s.n).sum()
    }

    /// Signed subcarrier indices of subband `m`: `-N/2 ..= N/2-1`.
    pub fn subcarrier_indices(&self, m: usize) -> impl Iterator<Item = i64> {
        let half = self.subbands[m].n as i64 / 2;
        -half..half
    }

    /// Absolute frequency of subcarrier `n` in subband `m`.
    pub fn freq_hz(&self, m: usize, n: i64) -> f64 {
        let sb = &self.subbands[m];
        sb.fc_hz + n as f64 * sb.fs_hz
    }

    fn check_indices(&self, m: usize, n: i64) -> Result<()> {
        if m >= self.subbands.len() {
            return Err(Error::IndexOutOfRange(format!(
                "subband {m} of {}",
                self.subbands.len()
            )));
        }
        let half = self.subbands[m].n as i64 / 2;
        if n < -half || n >= half {
            return Err(Error::IndexOutOfRange(format!(
                "subcarrier {n} outside [{}, {})",
                -half, half
            )));
        }
        Ok(())
    }
}

/// A `K`-path multipath channel together with the per-subband distortion
/// factors of one measurement campaign.
#[derive(Debug, Clone)]
pub struct ChannelRealization {
    /// Complex path gains, one per path.
    pub gains: Vec<Complex64>,
    /// Path delays in seconds, strictly increasing; `delays[0]` is the
    /// line-of-sight delay.
    pub delays: Vec<f64>,
    /// Random phase offset per subband, radians in `[0, 2pi)`.
    pub phase_offsets: Vec<f64>,
    /// Receiver timing offset per subband, seconds.
    pub timing_offsets: Vec<f64>,
    /// Standard deviation of the timing-offset prior the offsets were drawn
    /// from (seconds).
    pub timing_prior_std: f64,
}

impl ChannelRealization {
    pub fn new(
        gains: Vec<Complex64>,
        delays: Vec<f64>,
        phase_offsets: Vec<f64>,
        timing_offsets: Vec<f64>,
        timing_prior_std: f64,
    ) -> Result<Self> {
        if gains.is_empty() || gains.len() != delays.len() {
            return Err(Error::InvalidParameter(
                "gains and delays must be non-empty and of equal length".into(),
            ));
        }
        if phase_offsets.len() != timing_offsets.len() {
            return Err(Error::InvalidParameter(
                "phase and timing offsets must have one entry per subband".into(),
            ));
        }
        if delays.iter().any(|&t| t < 0.0) {
            return Err(Error::InvalidParameter("delays must be non-negative".into()));
        }
        if delays.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidParameter("delays must be strictly increasing".into()));
        }
        if timing_prior_std < 0.0 {
            return Err(Error::InvalidParameter("timing prior std must be >= 0".into()));
        }
        Ok(Self { gains, delays, phase_offsets, timing_offsets, timing_prior_std })
    }

    pub fn num_paths(&self) -> usize {
        self.gains.len()
    }

    /// Line-of-sight delay (the smallest path delay), seconds.
    pub fn los_delay(&self) -> f64 {
        self.delays[0]
    }
}

/// Noise specification for one observation: target SNR and RNG seed.
/// `snr_db = +inf` produces a noiseless observation.
#[derive(Debug, Clone, Copy)]
pub struct NoiseSpec {
    pub snr_db: f64,
    pub seed: u64,
}

/// Stacked noisy CFR samples together with the noise variance and the
/// timing-offset prior std they were generated under.
#[derive(Debug, Clone)]
pub struct Observation {
    samples: Vec<Vec<Complex64>>,
    /// Noise variance `sigma_ns^2` (per complex sample).
    pub noise_var: f64,
    /// Timing-offset prior standard deviation `sigma_p` in seconds.
    pub timing_prior_std: f64,
    pub config: MultibandConfig,
}

impl Observation {
    pub fn new(
        samples: Vec<Vec<Complex64>>,
        noise_var: f64,
        timing_prior_std: f64,
        config: MultibandConfig,
    ) -> Result<Self> {
        if samples.len() != config.num_subbands() {
            return Err(Error::DimensionMismatch {
                expected: config.num_subbands(),
                got: samples.len(),
            });
        }
        for (m, band) in samples.iter().enumerate() {
            if band.len() != config.subband(m).n {
                return Err(Error::DimensionMismatch {
                    expected: config.subband(m).n,
                    got: band.len(),
                });
            }
        }
        if noise_var < 0.0 || timing_prior_std < 0.0 {
            return Err(Error::InvalidParameter("variances must be >= 0".into()));
        }
        Ok(Self { samples, noise_var, timing_prior_std, config })
    }

    /// Samples of subband `m`, ordered by subcarrier index `-N/2 ..= N/2-1`.
    pub fn band(&self, m: usize) -> &[Complex64] {
        &self.samples[m]
    }

    /// Sample at subband `m`, signed subcarrier index `n`.
    pub fn sample(&self, m: usize, n: i64) -> Complex64 {
        let half = self.config.subband(m).n as i64 / 2;
        self.samples[m][(n + half) as usize]
    }

    /// All samples stacked band-by-band (subcarriers ascending within a band).
    pub fn stacked(&self) -> Vec<Complex64> {
        self.samples.iter().flatten().copied().collect()
    }

    /// Mean squared magnitude over all samples.
    pub fn mean_power(&self) -> f64 {
        let total: f64 = self.samples.iter().flatten().map(|y| y.norm_sqr()).sum();
        total / self.config.total_samples() as f64
    }
}

/// Noiseless, distortion-free CFR sample of subband `m`, subcarrier `n`:
/// the sum over paths of `gain_k * e^{-j 2 pi f(m,n) delay_k}`.
pub fn cfr_sample(
    channel: &ChannelRealization,
    m: usize,
    n: i64,
    config: &MultibandConfig,
) -> Result<Complex64> {
    config.check_indices(m, n)?;
    let f = config.freq_hz(m, n);
    Ok(channel
        .gains
        .iter()
        .zip(&channel.delays)
        .map(|(&g, &tau)| g * cis(-2.0 * std::f64::consts::PI * f * tau))
        .sum())
}

/// Noise variance that realizes `snr_db` against the mean noiseless sample
/// power of `channel` under `config`. Returns 0 for `snr_db = +inf`.
pub fn snr_to_noise_var(snr_db: f64, channel: &ChannelRealization, config: &MultibandConfig) -> f64 {
    if snr_db.is_infinite() && snr_db > 0.0 {
        return 0.0;
    }
    let mut power = 0.0;
    for m in 0..config.num_subbands() {
        for n in config.subcarrier_indices(m) {
            power += cfr_sample(channel, m, n, config)
                .expect("indices from config are valid")
                .norm_sqr();
        }
    }
    let mean_power = power / config.total_samples() as f64;
    mean_power / 10f64.powf(snr_db / 10.0)
}

/// Generate one noisy observation: per sample, the CFR value rotated by the
/// subband's timing-offset and phase-offset distortions, plus circularly
/// symmetric complex Gaussian noise of variance `sigma_ns^2` derived from
/// `noise.snr_db`. Training symbols are fixed to 1. Reproducible under a
/// fixed `noise.seed`.
pub fn observe(
    channel: &ChannelRealization,
    config: &MultibandConfig,
    noise: &NoiseSpec,
) -> Result<Observation> {
    if channel.phase_offsets.len() != config.num_subbands() {
        return Err(Error::DimensionMismatch {
            expected: config.num_subbands(),
            got: channel.phase_offsets.len(),
        });
    }
    let noise_var = snr_to_noise_var(noise.snr_db, channel, config);
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let sigma = (noise_var / 2.0).sqrt();

    let two_pi = 2.0 * std::f64::consts::PI;
    let mut samples = Vec::with_capacity(config.num_subbands());
    for m in 0..config.num_subbands() {
        let sb = config.subband(m);
        let phase_rot = cis(channel.phase_offsets[m]);
        let delta = channel.timing_offsets[m];
        let mut band = Vec::with_capacity(sb.n);
        for n in config.subcarrier_indices(m) {
            let cfr = cfr_sample(channel, m, n, config)?;
            let timing_rot = cis(-two_pi * n as f64 * sb.fs_hz * delta);
            let w = if sigma > 0.0 {
                Complex64::new(sigma * std_normal.sample(&mut rng), sigma * std_normal.sample(&mut rng))
            } else {
                Complex64::new(0.0, 0.0)
            };
            band.push(cfr * timing_rot * phase_rot + w);
        }
        samples.push(band);
    }
    Observation::new(samples, noise_var, channel.timing_prior_std, config.clone())
}

/// Draw a random `k`-path channel: Rayleigh gain magnitudes (unit mean-square)
/// with uniform phases, delays uniform in `delay_range` then sorted ascending,
/// per-subband phase offsets uniform in `[0, 2pi)`, and timing offsets
/// `delta_m = sigma_p * z_m` with `z_m` standard normal (so realizations at
/// different `sigma_p` under the same seed share the underlying draws).
pub fn sample_channel(
    k: usize,
    delay_range: (f64, f64),
    timing_prior_std: f64,
    num_subbands: usize,
    seed: u64,
) -> Result<ChannelRealization> {
    if k < 1 {
        return Err(Error::InvalidParameter("path count must be >= 1".into()));
    }
    let (lo, hi) = delay_range;
    if !(lo >= 0.0) || !(hi > lo) {
        return Err(Error::InvalidParameter(format!(
            "delay range [{lo}, {hi}] must be non-empty and non-negative"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let two_pi = 2.0 * std::f64::consts::PI;

    // Rayleigh magnitude with E[r^2] = 1 via inverse CDF.
    let rayleigh_scale = std::f64::consts::FRAC_1_SQRT_2;
    let mags: Vec<f64> = (0..k)
        .map(|_| {
            let u: f64 = rng.random();
            rayleigh_scale * (-2.0 * (1.0 - u).ln()).sqrt()
        })
        .collect();
    let phases: Vec<f64> = (0..k).map(|_| two_pi * rng.random::<f64>()).collect();
    let mut delays: Vec<f64> = (0..k).map(|_| rng.random_range(lo..hi)).collect();
    delays.sort_by(|a, b| a.partial_cmp(b).expect("finite delays"));
    let phase_offsets: Vec<f64> = (0..num_subbands).map(|_| two_pi * rng.random::<f64>()).collect();
    let timing_offsets: Vec<f64> = (0..num_subbands)
        .map(|_| timing_prior_std * std_normal.sample(&mut rng))
        .collect();

    let gains = mags
        .iter()
        .zip(&phases)
        .map(|(&r, &p)| Complex64::from_polar(r, p))
        .collect();
    ChannelRealization::new(gains, delays, phase_offsets, timing_offsets, timing_prior_std)
}
