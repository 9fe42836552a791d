//! Turbo E-step: per-subband LMMSE estimation (Module A) exchanging extrinsic
//! messages with a cross-band sparsity combiner (Module B) until the gain
//! posteriors settle.
//!
//! Module A treats the sparse gain vector of band `m` as Gaussian with the
//! prior handed over by Module B and computes the exact linear-Gaussian
//! posterior against the band's measurements. Module B treats Module A's
//! extrinsic output as an AWGN observation of the gains and applies the
//! Bernoulli-Gaussian prior with a support vector shared by all bands; the
//! cross-band product in `support_messages` is what couples the subbands.
//! All probability ratios are evaluated in the log domain.

use nalgebra::{Cholesky, DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};

/// Per-element variance floor applied to point-mass posteriors so the
/// averaged variance stays positive.
pub(crate) const VAR_FLOOR: f64 = 1e-12;

/// Bernoulli-Gaussian prior on the per-band sparse gain vectors: a grid point
/// is active in all bands with probability `activation_prob`, and an active
/// gain of band `m` at grid point `l` is zero-mean complex Gaussian with
/// variance `gain_var[m][l]`.
#[derive(Debug, Clone)]
pub struct BGPrior {
    pub activation_prob: f64,
    pub gain_var: Vec<Vec<f64>>,
}

impl BGPrior {
    pub fn new(activation_prob: f64, gain_var: Vec<Vec<f64>>) -> Result<Self> {
        if !(activation_prob > 0.0 && activation_prob < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "activation probability must be in (0,1), got {activation_prob}"
            )));
        }
        if gain_var.is_empty() || gain_var.iter().any(|v| v.iter().any(|&s| !(s > 0.0))) {
            return Err(Error::InvalidParameter("gain variances must be positive".into()));
        }
        Ok(Self { activation_prob, gain_var })
    }

    /// Constant gain variance per band.
    pub fn with_constant_var(activation_prob: f64, band_vars: &[f64], len: usize) -> Result<Self> {
        Self::new(
            activation_prob,
            band_vars.iter().map(|&v| vec![v; len]).collect(),
        )
    }
}

/// LMMSE state of one subband.
#[derive(Debug, Clone)]
pub struct ModuleABand {
    pub prior_mean: DVector<Complex64>,
    pub prior_var: f64,
    pub post_mean: DVector<Complex64>,
    pub post_cov: DMatrix<Complex64>,
    pub ext_mean: DVector<Complex64>,
    pub ext_var: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct ModuleAState {
    pub bands: Vec<ModuleABand>,
}

/// Sparsity-combiner state of one subband.
#[derive(Debug, Clone)]
pub struct ModuleBBand {
    pub prior_mean: DVector<Complex64>,
    pub prior_var: f64,
    pub post_mean: DVector<Complex64>,
    /// Averaged posterior variance of the band.
    pub post_var: f64,
    /// Per-element posterior variance before averaging.
    pub elem_var: Vec<f64>,
    /// Support evidence of this band alone, per grid point.
    pub band_support_prob: Vec<f64>,
    /// Support belief combining the prior with all other bands' evidence.
    pub cross_support_prob: Vec<f64>,
    /// (ln p, ln(1-p)) of `band_support_prob`, kept for stable pooling.
    pub(crate) band_support_ln: Vec<(f64, f64)>,
}

#[derive(Debug, Clone)]
pub struct ModuleBState {
    pub bands: Vec<ModuleBBand>,
}

/// Outcome of one E-step run.
#[derive(Debug, Clone)]
pub struct EStepResult {
    pub module_a: ModuleAState,
    pub module_b: ModuleBState,
    pub iters: usize,
    pub converged: bool,
    /// Number of extrinsic-variance clamping events.
    pub clamped: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct EStepOpts {
    /// Relative change of the stacked Module-B posterior means below which
    /// the turbo loop stops.
    pub tol: f64,
    pub max_iters: usize,
    /// Cap factor for extrinsic variances: `v_ext <= cap * v_pri`.
    pub ext_var_cap: f64,
}

impl Default for EStepOpts {
    fn default() -> Self {
        Self { tol: 1e-6, max_iters: 50, ext_var_cap: 1e8 }
    }
}

/// Precomputed sufficient statistics of one band's linear model.
#[derive(Debug, Clone)]
pub(crate) struct LmmseParts {
    /// `Phi^H Phi`.
    pub gram: DMatrix<Complex64>,
    /// `Phi^H y`.
    pub proj: DVector<Complex64>,
}

impl LmmseParts {
    pub fn from_matrix(phi: &DMatrix<Complex64>, y: &DVector<Complex64>) -> Self {
        Self { gram: phi.adjoint() * phi, proj: phi.adjoint() * y }
    }
}

pub(crate) fn lmmse_from_parts(
    parts: &LmmseParts,
    prior_mean: &DVector<Complex64>,
    prior_var: f64,
    noise_var: f64,
) -> (DVector<Complex64>, DMatrix<Complex64>) {
    assert!(prior_var > 0.0 && noise_var > 0.0, "lmmse needs positive variances");
    let l = parts.gram.nrows();
    let mut precision = parts.gram.map(|z| z / noise_var);
    for i in 0..l {
        precision[(i, i)] += Complex64::new(1.0 / prior_var, 0.0);
    }
    let chol = Cholesky::new(precision)
        .expect("posterior precision matrix is positive definite for positive variances");
    let cov = chol.inverse();
    let rhs = prior_mean.map(|z| z / prior_var) + parts.proj.map(|z| z / noise_var);
    let mean = &cov * rhs;
    (mean, cov)
}

/// Linear-Gaussian posterior of one band's gains:
/// covariance `(Phi^H Phi / sigma^2 + I / v_pri)^{-1}` and mean
/// `cov * (x_pri / v_pri + Phi^H y / sigma^2)`. Cost is dominated by the
/// `O(N L^2)` product `Phi^H Phi`.
pub fn lmmse_update(
    phi: &DMatrix<Complex64>,
    y: &DVector<Complex64>,
    prior_mean: &DVector<Complex64>,
    prior_var: f64,
    noise_var: f64,
) -> (DVector<Complex64>, DMatrix<Complex64>) {
    lmmse_from_parts(&LmmseParts::from_matrix(phi, y), prior_mean, prior_var, noise_var)
}

/// Extrinsic message out of Module A: per element,
/// `v_ext = (1/v_post - 1/v_pri)^{-1}` and
/// `x_ext = v_ext (x_post/v_post - x_pri/v_pri)`, with `v_post` the diagonal
/// of the posterior covariance. Elements where the posterior gained nothing
/// over the prior (`v_post >= v_pri`) get `v_ext` clamped to
/// `cap * v_pri`; the number of clamping events is returned.
pub fn extrinsic_a(
    post_mean: &DVector<Complex64>,
    post_cov: &DMatrix<Complex64>,
    prior_mean: &DVector<Complex64>,
    prior_var: f64,
    cap: f64,
) -> (DVector<Complex64>, DVector<f64>, usize) {
    let l = post_mean.len();
    let mut ext_mean = DVector::zeros(l);
    let mut ext_var = DVector::zeros(l);
    let mut clamped = 0;
    let v_cap = cap * prior_var;
    for i in 0..l {
        let v_post = post_cov[(i, i)].re;
        let denom = 1.0 / v_post - 1.0 / prior_var;
        let v_ext = if denom > 0.0 {
            let v = 1.0 / denom;
            if v > v_cap {
                clamped += 1;
                v_cap
            } else {
                v
            }
        } else {
            clamped += 1;
            v_cap
        };
        ext_var[i] = v_ext;
        ext_mean[i] = (post_mean[i] / v_post - prior_mean[i] / prior_var) * v_ext;
    }
    (ext_mean, ext_var, clamped)
}

/// Extrinsic message out of Module B (same algebra as [`extrinsic_a`] at the
/// band level: scalar posterior variance, vector means).
pub fn extrinsic_b(
    post_mean: &DVector<Complex64>,
    post_var: f64,
    prior_mean: &DVector<Complex64>,
    prior_var: f64,
    cap: f64,
) -> (DVector<Complex64>, f64, usize) {
    let v_cap = cap * prior_var;
    let denom = 1.0 / post_var - 1.0 / prior_var;
    let (v_ext, clamped) = if denom > 0.0 {
        let v = 1.0 / denom;
        if v > v_cap {
            (v_cap, 1)
        } else {
            (v, 0)
        }
    } else {
        (v_cap, 1)
    };
    let ext_mean =
        (post_mean.map(|z| z / post_var) - prior_mean.map(|z| z / prior_var)).map(|z| z * v_ext);
    (ext_mean, v_ext, clamped)
}

/// `ln CN(0; mu, v)` for a squared magnitude `q = |mu|^2`.
#[inline]
fn ln_cn_zero(q: f64, v: f64) -> f64 {
    -(std::f64::consts::PI * v).ln() - q / v
}

/// Numerically stable `ln(1 + e^x)`.
#[inline]
fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Outcome of the sparsity combiner for one band.
#[derive(Debug, Clone)]
pub struct BandPosterior {
    pub band_support_prob: Vec<f64>,
    pub cross_support_prob: Vec<f64>,
    pub post_mean: DVector<Complex64>,
    pub post_var: f64,
    pub elem_var: Vec<f64>,
    pub(crate) band_support_ln: Vec<(f64, f64)>,
}

/// Sum-product messages of the common-support factor graph, for all bands at
/// once (the support coupling needs every band's evidence).
///
/// Per band `m` and grid point `l`:
/// * the band's own support evidence
///   `pi = (1 + CN(0; x_pri, v_pri)/CN(0; x_pri, v_pri + gain_var))^{-1}`,
/// * the cross-band belief `pi_hat` combining the activation prior with the
///   other bands' evidence,
/// * the Bernoulli-Gaussian posterior of the gain: activation probability,
///   mean, per-element variance, and the band-averaged variance.
pub fn support_messages(
    prior_means: &[DVector<Complex64>],
    prior_vars: &[f64],
    prior: &BGPrior,
) -> Vec<BandPosterior> {
    let bands = prior_means.len();
    assert_eq!(bands, prior_vars.len());
    assert_eq!(bands, prior.gain_var.len());
    let len = prior_means[0].len();
    let ln_ps = prior.activation_prob.ln();
    let ln_1m_ps = (1.0 - prior.activation_prob).ln();

    // Band evidence in log domain: (ln pi, ln(1 - pi)) per (m, l).
    let mut ln_pi = vec![vec![(0.0f64, 0.0f64); len]; bands];
    for m in 0..bands {
        let v = prior_vars[m];
        for l in 0..len {
            let s2 = prior.gain_var[m][l];
            let q = prior_means[m][l].norm_sqr();
            let ln_ratio = ln_cn_zero(q, v) - ln_cn_zero(q, v + s2);
            // pi = sigmoid(-ln_ratio)
            ln_pi[m][l] = (-softplus(ln_ratio), -softplus(-ln_ratio));
        }
    }
    let mut tot: Vec<(f64, f64)> = vec![(0.0, 0.0); len];
    for m in 0..bands {
        for l in 0..len {
            tot[l].0 += ln_pi[m][l].0;
            tot[l].1 += ln_pi[m][l].1;
        }
    }

    (0..bands)
        .map(|m| {
            let v = prior_vars[m];
            let mut band_support = Vec::with_capacity(len);
            let mut cross_support = Vec::with_capacity(len);
            let mut post_mean = DVector::zeros(len);
            let mut elem_var = Vec::with_capacity(len);
            let mut band_ln = Vec::with_capacity(len);
            for l in 0..len {
                let s2 = prior.gain_var[m][l];
                let x = prior_means[m][l];
                let q = x.norm_sqr();
                let (lp, l1p) = ln_pi[m][l];
                band_support.push(sigmoid(lp - l1p));
                band_ln.push((lp, l1p));

                // Cross-band combination, leaving this band's evidence out.
                let t = (ln_ps + tot[l].0 - lp) - (ln_1m_ps + tot[l].1 - l1p);
                let cross = sigmoid(t);
                cross_support.push(cross);
                let ln_cross = -softplus(-t);
                let ln_1m_cross = -softplus(t);

                // Posterior of the gain: BG message times the Gaussian
                // observation message.
                let v_c = s2 * v / (s2 + v);
                let mu_c = x * (v_c / v);
                let ln_active = ln_cross + ln_cn_zero(q, s2 + v);
                let ln_inactive = ln_1m_cross + ln_cn_zero(q, v);
                let p_act = sigmoid(ln_active - ln_inactive);
                post_mean[l] = mu_c * p_act;
                let var = p_act * v_c + p_act * (1.0 - p_act) * mu_c.norm_sqr();
                elem_var.push(var.max(VAR_FLOOR));
            }
            let post_var = elem_var.iter().sum::<f64>() / len as f64;
            BandPosterior {
                band_support_prob: band_support,
                cross_support_prob: cross_support,
                post_mean,
                post_var,
                elem_var,
                band_support_ln: band_ln,
            }
        })
        .collect()
}

/// Pooled activation probability per grid point: the activation prior
/// combined with every band's evidence (the read-out used for support
/// detection).
pub fn pooled_support_prob(bands: &[&[(f64, f64)]], activation_prob: f64) -> Vec<f64> {
    let len = bands[0].len();
    let ln_ps = activation_prob.ln();
    let ln_1m_ps = (1.0 - activation_prob).ln();
    (0..len)
        .map(|l| {
            let mut t = ln_ps - ln_1m_ps;
            for band in bands {
                t += band[l].0 - band[l].1;
            }
            sigmoid(t)
        })
        .collect()
}

pub(crate) fn e_step_with_parts(
    parts: &[LmmseParts],
    prior: &BGPrior,
    noise_var: f64,
    opts: &EStepOpts,
) -> EStepResult {
    let bands = parts.len();
    let len = parts[0].gram.nrows();
    let cap = opts.ext_var_cap;

    let mut a_bands: Vec<ModuleABand> = (0..bands)
        .map(|m| {
            let init_var =
                prior.gain_var[m].iter().sum::<f64>() / prior.gain_var[m].len() as f64;
            ModuleABand {
                prior_mean: DVector::zeros(len),
                prior_var: init_var,
                post_mean: DVector::zeros(len),
                post_cov: DMatrix::zeros(len, len),
                ext_mean: DVector::zeros(len),
                ext_var: DVector::zeros(len),
            }
        })
        .collect();
    let mut b_bands: Vec<ModuleBBand> = (0..bands)
        .map(|_| ModuleBBand {
            prior_mean: DVector::zeros(len),
            prior_var: 1.0,
            post_mean: DVector::zeros(len),
            post_var: 1.0,
            elem_var: vec![1.0; len],
            band_support_prob: vec![prior.activation_prob; len],
            cross_support_prob: vec![prior.activation_prob; len],
            band_support_ln: vec![
                (
                    prior.activation_prob.ln(),
                    (1.0 - prior.activation_prob).ln()
                );
                len
            ],
        })
        .collect();

    let mut clamped = 0usize;
    let mut converged = false;
    let mut iters = 0usize;
    let mut prev_stack: Option<DVector<Complex64>> = None;

    for it in 1..=opts.max_iters {
        iters = it;
        // Module A: per-band LMMSE plus extrinsic.
        for m in 0..bands {
            let band = &mut a_bands[m];
            let (mean, cov) =
                lmmse_from_parts(&parts[m], &band.prior_mean, band.prior_var, noise_var);
            let (ext_mean, ext_var, c) =
                extrinsic_a(&mean, &cov, &band.prior_mean, band.prior_var, cap);
            clamped += c;
            band.post_mean = mean;
            band.post_cov = cov;
            band.ext_mean = ext_mean;
            band.ext_var = ext_var;
        }

        // Module B prior = Module A extrinsic (variance averaged per band).
        let prior_means: Vec<DVector<Complex64>> =
            (0..bands).map(|m| a_bands[m].ext_mean.clone()).collect();
        let prior_vars: Vec<f64> =
            (0..bands).map(|m| a_bands[m].ext_var.mean()).collect();
        let posts = support_messages(&prior_means, &prior_vars, prior);

        for (m, post) in posts.into_iter().enumerate() {
            let (a_prior_mean, a_prior_var, c) = extrinsic_b(
                &post.post_mean,
                post.post_var,
                &prior_means[m],
                prior_vars[m],
                cap,
            );
            clamped += c;
            b_bands[m] = ModuleBBand {
                prior_mean: prior_means[m].clone(),
                prior_var: prior_vars[m],
                post_mean: post.post_mean,
                post_var: post.post_var,
                elem_var: post.elem_var,
                band_support_prob: post.band_support_prob,
                cross_support_prob: post.cross_support_prob,
                band_support_ln: post.band_support_ln,
            };
            a_bands[m].prior_mean = a_prior_mean;
            a_bands[m].prior_var = a_prior_var;
        }

        // Convergence: relative change of the stacked Module-B posterior.
        let stack = DVector::from_iterator(
            bands * len,
            b_bands.iter().flat_map(|b| b.post_mean.iter().copied()),
        );
        if let Some(prev) = prev_stack.take() {
            let denom = prev.norm().max(1e-300);
            if (&stack - &prev).norm() / denom < opts.tol {
                converged = true;
                prev_stack = Some(stack);
                break;
            }
        }
        prev_stack = Some(stack);
    }

    EStepResult {
        module_a: ModuleAState { bands: a_bands },
        module_b: ModuleBState { bands: b_bands },
        iters,
        converged,
        clamped,
    }
}

/// Run the turbo E-step for fixed measurement matrices: alternate Module A
/// and Module B with extrinsic message exchange until the posterior means
/// settle or the iteration budget is exhausted (non-convergence is reported
/// in the result flag).
pub fn e_step(
    ys: &[DVector<Complex64>],
    phis: &[DMatrix<Complex64>],
    prior: &BGPrior,
    noise_var: f64,
    opts: &EStepOpts,
) -> EStepResult {
    assert_eq!(ys.len(), phis.len(), "one measurement matrix per band");
    let parts: Vec<LmmseParts> = phis
        .iter()
        .zip(ys)
        .map(|(phi, y)| LmmseParts::from_matrix(phi, y))
        .collect();
    e_step_with_parts(&parts, prior, noise_var, opts)
}
