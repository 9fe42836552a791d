//! Delay-domain dictionary for the coarse signal model: uniform delay grid
//! with off-grid corrections, steering vectors, timing-offset diagonals, and
//! per-subband measurement matrices.
//!
//! The steering vector of subband `m` at delay `d` has entries
//! `e^{-j 2 pi n fs d}` over the signed subcarrier indices `n`. Because the
//! entries lie on a geometric progression, inner products between steering
//! vectors (and their delay derivatives) reduce to a Dirichlet kernel that is
//! evaluated in closed form here; the hot paths of the estimators use these
//! instead of `O(N L^2)` matrix products.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::model::{cis, MultibandConfig};

/// Uniform delay grid over `[0, span]` with per-point off-grid corrections.
#[derive(Debug, Clone)]
pub struct DelayGrid {
    points: Vec<f64>,
    /// Off-grid correction per grid point, seconds.
    pub offsets: Vec<f64>,
}

impl DelayGrid {
    /// Uniform grid of `len` points spanning `[0, span]`, endpoints included,
    /// with zero off-grid corrections.
    pub fn uniform(span: f64, len: usize) -> Result<Self> {
        if !(span > 0.0) {
            return Err(Error::InvalidParameter("grid span must be > 0".into()));
        }
        if len < 2 {
            return Err(Error::InvalidParameter("grid needs at least 2 points".into()));
        }
        let spacing = span / (len - 1) as f64;
        Ok(Self {
            points: (0..len).map(|l| l as f64 * spacing).collect(),
            offsets: vec![0.0; len],
        })
    }

    /// Grid sized for `config`: spacing approximately a quarter of the inverse
    /// of the widest subband bandwidth.
    pub fn for_config(config: &MultibandConfig, span: f64) -> Result<Self> {
        let max_bw = config
            .subbands()
            .iter()
            .map(|s| s.bandwidth_hz())
            .fold(0.0, f64::max);
        let len = ((span * 4.0 * max_bw).ceil() as usize + 1).max(2);
        Self::uniform(span, len)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Grid spacing in seconds.
    pub fn spacing(&self) -> f64 {
        self.points[1] - self.points[0]
    }

    /// Nominal (on-grid) delay points.
    pub fn points(&self) -> &[f64] {
        &self.points
    }

    /// Corrected delay of grid point `l`: `points[l] + offsets[l]`.
    pub fn delay(&self, l: usize) -> f64 {
        self.points[l] + self.offsets[l]
    }

    /// All corrected delays.
    pub fn delays(&self) -> Vec<f64> {
        self.points.iter().zip(&self.offsets).map(|(p, o)| p + o).collect()
    }

    /// Clamp every off-grid correction to half the grid spacing, preserving
    /// the identifiability of neighboring grid points.
    pub fn clamp_offsets(&mut self) {
        let half = self.spacing() / 2.0;
        for o in &mut self.offsets {
            *o = o.clamp(-half, half);
        }
    }
}

/// Fill `out[i] = e^{j step (n0 + i)}` via the geometric recurrence
/// (one `sin_cos` plus one multiply per entry).
pub(crate) fn fill_phase_ramp(out: &mut [Complex64], n0: i64, step: f64) {
    let ratio = cis(step);
    let mut w = cis(step * n0 as f64);
    for v in out.iter_mut() {
        *v = w;
        w *= ratio;
    }
}

/// Steering vector of subband `m` at delay `d` (seconds): entries
/// `e^{-j 2 pi n fs d}` for `n = -N/2 ..= N/2-1`.
pub fn steering_vector(config: &MultibandConfig, m: usize, d: f64) -> DVector<Complex64> {
    let sb = config.subband(m);
    let step = -2.0 * std::f64::consts::PI * sb.fs_hz * d;
    DVector::from_iterator(
        sb.n,
        config.subcarrier_indices(m).map(|n| cis(step * n as f64)),
    )
}

/// Diagonal of the timing-offset matrix of subband `m` for offset `delta`:
/// `e^{-j 2 pi n fs delta}` per subcarrier. The matrix itself is
/// `diag(...)` and is unitary for any `delta`.
pub fn timing_offset_diag(config: &MultibandConfig, m: usize, delta: f64) -> DVector<Complex64> {
    steering_vector(config, m, delta)
}

/// Basis matrix of subband `m`: column `l` is the steering vector at the
/// corrected grid delay `points[l] + offsets[l]`.
pub fn basis_matrix(config: &MultibandConfig, m: usize, grid: &DelayGrid) -> DMatrix<Complex64> {
    let sb = config.subband(m);
    let n0 = -(sb.n as i64) / 2;
    let mut a = DMatrix::zeros(sb.n, grid.len());
    for l in 0..grid.len() {
        let step = -2.0 * std::f64::consts::PI * sb.fs_hz * grid.delay(l);
        fill_phase_ramp(a.column_mut(l).as_mut_slice(), n0, step);
    }
    a
}

/// Measurement matrix of subband `m`: the timing-offset diagonal applied to
/// the basis matrix. Entry `(n, l)` equals
/// `e^{-j 2 pi n fs (points[l] + offsets[l] + delta)}`.
pub fn measurement_matrix(
    config: &MultibandConfig,
    m: usize,
    delta: f64,
    grid: &DelayGrid,
) -> DMatrix<Complex64> {
    let mut phi = basis_matrix(config, m, grid);
    let diag = timing_offset_diag(config, m, delta);
    for l in 0..phi.ncols() {
        let mut col = phi.column_mut(l);
        for (v, s) in col.iter_mut().zip(diag.iter()) {
            *v *= s;
        }
    }
    phi
}

/// Dirichlet kernel `D(theta) = sum_{n=-N/2}^{N/2-1} e^{j n theta}`
/// and its derivative `D'(theta)`, in closed form.
///
/// `D(theta) = e^{-j theta/2} R(theta)` with
/// `R = sin(N theta / 2) / sin(theta / 2)`. Near `theta = 0` the derivative
/// quotient cancels catastrophically, so a series branch takes over for
/// `|N theta / 2| < 0.1`.
pub(crate) fn dirichlet(theta: f64, n: usize) -> (Complex64, Complex64) {
    let nf = n as f64;
    let a = theta / 2.0;
    let na = nf * a;
    let (r, r_prime) = if na.abs() < 0.1 {
        // log-derivative series: R'/R = -(N^2-1)a/6 - (N^4-1)a^3/90 - (N^6-1)a^5/945
        let n2 = nf * nf;
        let lg = -(n2 - 1.0) * a / 6.0
            - (n2 * n2 - 1.0) * a.powi(3) / 90.0
            - (n2 * n2 * n2 - 1.0) * a.powi(5) / 945.0;
        let r = if a == 0.0 { nf } else { (na).sin() / a.sin() };
        (r, r * lg / 2.0)
    } else {
        let (sin_na, cos_na) = na.sin_cos();
        let (sin_a, cos_a) = a.sin_cos();
        let r = sin_na / sin_a;
        // d/dtheta of sin(N theta/2)/sin(theta/2), quotient form (stable away
        // from theta = 0; sin(theta/2) != 0 within one alias period).
        let rp = (0.5 * nf * cos_na * sin_a - 0.5 * sin_na * cos_a) / (sin_a * sin_a);
        (r, rp)
    };
    let rot = cis(-a);
    let d = rot * r;
    let d_prime = rot * Complex64::new(r_prime, -0.5 * r);
    (d, d_prime)
}

/// Gram matrix of steering vectors at `delays`:
/// entry `(l, j) = a(d_l)^H a(d_j) = D(2 pi fs (d_l - d_j))`.
pub(crate) fn steering_gram(fs_hz: f64, n: usize, delays: &[f64]) -> DMatrix<Complex64> {
    let two_pi = 2.0 * std::f64::consts::PI;
    let len = delays.len();
    let mut g = DMatrix::zeros(len, len);
    for l in 0..len {
        g[(l, l)] = Complex64::new(n as f64, 0.0);
        for j in 0..l {
            let theta = two_pi * fs_hz * (delays[l] - delays[j]);
            let (d, _) = dirichlet(theta, n);
            g[(l, j)] = d;
            g[(j, l)] = d.conj();
        }
    }
    g
}

/// Cross Gram between steering derivatives and steering vectors:
/// entry `(l, j) = a'(d_l)^H a(d_j) = 2 pi fs D'(2 pi fs (d_l - d_j))`,
/// where `a'` is the elementwise derivative in the delay.
pub(crate) fn steering_deriv_gram(fs_hz: f64, n: usize, delays: &[f64]) -> DMatrix<Complex64> {
    let two_pi = 2.0 * std::f64::consts::PI;
    let len = delays.len();
    let mut w = DMatrix::zeros(len, len);
    for l in 0..len {
        for j in 0..len {
            let theta = two_pi * fs_hz * (delays[l] - delays[j]);
            let (_, dp) = dirichlet(theta, n);
            w[(l, j)] = two_pi * fs_hz * dp;
        }
    }
    w
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn small_config(n: usize, fs: f64) -> MultibandConfig {
        MultibandConfig::new(vec![crate::model::Subband { fc_hz: 1.0e9, fs_hz: fs, n }]).unwrap()
    }

    #[test]
    fn grid_uniform_spacing() {
        let g = DelayGrid::uniform(250.0e-9, 41).unwrap();
        assert_eq!(g.len(), 41);
        assert_abs_diff_eq!(g.spacing(), 6.25e-9, epsilon = 1e-18);
        assert_abs_diff_eq!(g.points()[40], 250.0e-9, epsilon = 1e-18);
        assert!(DelayGrid::uniform(0.0, 4).is_err());
        assert!(DelayGrid::uniform(1.0e-7, 1).is_err());
    }

    #[test]
    fn grid_clamp_offsets() {
        let mut g = DelayGrid::uniform(100.0e-9, 11).unwrap();
        g.offsets[3] = 40.0e-9;
        g.offsets[4] = -40.0e-9;
        g.clamp_offsets();
        assert_abs_diff_eq!(g.offsets[3], 5.0e-9, epsilon = 1e-18);
        assert_abs_diff_eq!(g.offsets[4], -5.0e-9, epsilon = 1e-18);
    }

    #[test]
    fn steering_zero_delay_all_ones() {
        let cfg = small_config(8, 1.0e6);
        let a = steering_vector(&cfg, 0, 0.0);
        for v in a.iter() {
            assert_abs_diff_eq!(v.re, 1.0, epsilon = 1e-15);
            assert_abs_diff_eq!(v.im, 0.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn steering_quarter_period() {
        // N=4, fs=1 Hz, d=0.25 s: entries at n=-2,-1,0,1 are (-1, j, 1, -j).
        let cfg = small_config(4, 1.0);
        let a = steering_vector(&cfg, 0, 0.25);
        let expected = [
            Complex64::new(-1.0, 0.0),
            Complex64::new(0.0, 1.0),
            Complex64::new(1.0, 0.0),
            Complex64::new(0.0, -1.0),
        ];
        for (v, e) in a.iter().zip(&expected) {
            assert_abs_diff_eq!(v.re, e.re, epsilon = 1e-12);
            assert_abs_diff_eq!(v.im, e.im, epsilon = 1e-12);
        }
    }

    #[test]
    fn timing_offset_half_period() {
        // N=2, fs=1 Hz, delta=0.5 s: diag entries at n=-1,0 are (-1, 1).
        let cfg = small_config(2, 1.0);
        let s = timing_offset_diag(&cfg, 0, 0.5);
        assert_abs_diff_eq!(s[0].re, -1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s[0].im, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s[1].re, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn timing_offset_zero_is_identity_and_always_unitary() {
        let cfg = small_config(16, 2.0e6);
        let s0 = timing_offset_diag(&cfg, 0, 0.0);
        for v in s0.iter() {
            assert_abs_diff_eq!(v.re, 1.0, epsilon = 1e-15);
        }
        let s = timing_offset_diag(&cfg, 0, 3.7e-7);
        for v in s.iter() {
            assert_abs_diff_eq!(v.norm_sqr(), 1.0, epsilon = 1e-13);
        }
    }

    #[test]
    fn basis_columns_match_steering() {
        let cfg = small_config(16, 2.0e6);
        let mut grid = DelayGrid::uniform(2.0e-7, 5).unwrap();
        grid.offsets[2] = 1.0e-8;
        let a = basis_matrix(&cfg, 0, &grid);
        for l in 0..grid.len() {
            let col = steering_vector(&cfg, 0, grid.delay(l));
            for (v, e) in a.column(l).iter().zip(col.iter()) {
                assert_abs_diff_eq!(v.re, e.re, epsilon = 1e-12);
                assert_abs_diff_eq!(v.im, e.im, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn basis_perturbation_is_columnwise() {
        let cfg = small_config(16, 2.0e6);
        let grid = DelayGrid::uniform(2.0e-7, 5).unwrap();
        let a0 = basis_matrix(&cfg, 0, &grid);
        let mut perturbed = grid.clone();
        perturbed.offsets[1] = 5.0e-9;
        let a1 = basis_matrix(&cfg, 0, &perturbed);
        for l in [0usize, 2, 3, 4] {
            assert_eq!(a0.column(l), a1.column(l));
        }
        assert!((a0.column(1) - a1.column(1)).norm() > 1e-3);
    }

    #[test]
    fn basis_reproduces_on_grid_signal() {
        // K on-grid paths with per-band gains placed at matching indices:
        // A x equals the direct sum of gain * steering over the paths.
        let cfg = small_config(32, 1.0e6);
        let grid = DelayGrid::uniform(4.0e-7, 9).unwrap();
        let a = basis_matrix(&cfg, 0, &grid);
        let mut x = DVector::zeros(9);
        x[2] = Complex64::new(0.8, -0.5);
        x[6] = Complex64::new(-0.1, 0.9);
        let direct = steering_vector(&cfg, 0, grid.delay(2)) * x[2]
            + steering_vector(&cfg, 0, grid.delay(6)) * x[6];
        let via_basis = &a * &x;
        assert!((via_basis - direct).norm() < 1e-10);
    }

    #[test]
    fn measurement_matrix_entry_formula() {
        let cfg = small_config(8, 3.0e6);
        let mut grid = DelayGrid::uniform(1.0e-7, 4).unwrap();
        grid.offsets = vec![2.0e-9, -3.0e-9, 0.0, 1.0e-9];
        let delta = 4.0e-9;
        let phi = measurement_matrix(&cfg, 0, delta, &grid);
        for (row, n) in cfg.subcarrier_indices(0).enumerate() {
            for l in 0..grid.len() {
                let expected = cis(
                    -2.0 * std::f64::consts::PI
                        * n as f64
                        * cfg.subband(0).fs_hz
                        * (grid.delay(l) + delta),
                );
                let got = phi[(row, l)];
                assert_abs_diff_eq!(got.re, expected.re, epsilon = 1e-12);
                assert_abs_diff_eq!(got.im, expected.im, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn measurement_delta_zero_equals_basis() {
        let cfg = small_config(16, 2.0e6);
        let grid = DelayGrid::uniform(2.0e-7, 6).unwrap();
        assert_eq!(measurement_matrix(&cfg, 0, 0.0, &grid), basis_matrix(&cfg, 0, &grid));
    }

    #[test]
    fn measurement_shift_commutation() {
        // Phi(delta, grid) == Phi(0, grid with every offset shifted by delta).
        let cfg = small_config(32, 1.5e6);
        let mut grid = DelayGrid::uniform(3.0e-7, 7).unwrap();
        grid.offsets = vec![1.0e-9, 0.0, -2.0e-9, 3.0e-9, 0.0, -1.0e-9, 2.0e-9];
        let delta = 2.5e-9;
        let phi = measurement_matrix(&cfg, 0, delta, &grid);
        let mut shifted = grid.clone();
        for o in &mut shifted.offsets {
            *o += delta;
        }
        let phi_shift = measurement_matrix(&cfg, 0, 0.0, &shifted);
        let diff = (&phi - &phi_shift).norm() / phi.norm();
        assert!(diff < 1e-12, "relative difference {diff}");
    }

    #[test]
    fn dirichlet_matches_direct_sum() {
        for &n in &[4usize, 8, 64, 666] {
            for &theta in &[
                0.0, 1e-9, 1e-6, 2e-4, 0.19 / n as f64, 0.21 / n as f64, 2e-3, 0.02, 0.5, 3.0,
                -2.0, -1e-5,
            ] {
                let (d, dp) = dirichlet(theta, n);
                let mut sum = Complex64::new(0.0, 0.0);
                let mut dsum = Complex64::new(0.0, 0.0);
                let half = n as i64 / 2;
                for k in -half..half {
                    let e = cis(theta * k as f64);
                    sum += e;
                    dsum += Complex64::new(0.0, k as f64) * e;
                }
                let tol = 1e-10 * n as f64;
                assert_abs_diff_eq!(d.re, sum.re, epsilon = tol);
                assert_abs_diff_eq!(d.im, sum.im, epsilon = tol);
                let dtol = 1e-10 * (n as f64).powi(2);
                assert_abs_diff_eq!(dp.re, dsum.re, epsilon = dtol);
                assert_abs_diff_eq!(dp.im, dsum.im, epsilon = dtol);
            }
        }
    }

    #[test]
    fn gram_matches_matrix_product() {
        let cfg = small_config(32, 1.5e6);
        let mut grid = DelayGrid::uniform(3.0e-7, 6).unwrap();
        grid.offsets = vec![1.0e-9, -0.5e-9, 0.0, 2.0e-9, -1.5e-9, 0.5e-9];
        let a = basis_matrix(&cfg, 0, &grid);
        let direct = a.adjoint() * &a;
        let closed = steering_gram(cfg.subband(0).fs_hz, 32, &grid.delays());
        assert!((direct - closed).norm() < 1e-9);
    }

    #[test]
    fn deriv_gram_matches_direct_sum() {
        let fs = 1.5e6;
        let n = 32;
        let delays = [3.0e-8, 9.0e-8, 9.1e-8, 2.0e-7];
        let w = steering_deriv_gram(fs, n, &delays);
        let two_pi = 2.0 * std::f64::consts::PI;
        for l in 0..delays.len() {
            for j in 0..delays.len() {
                let mut direct = Complex64::new(0.0, 0.0);
                for k in -(n as i64 / 2)..(n as i64 / 2) {
                    // conj(a'(d_l)[k]) * a(d_j)[k]
                    let a_l = cis(-two_pi * k as f64 * fs * delays[l]);
                    let ap_l = Complex64::new(0.0, -two_pi * k as f64 * fs) * a_l;
                    let a_j = cis(-two_pi * k as f64 * fs * delays[j]);
                    direct += ap_l.conj() * a_j;
                }
                let got = w[(l, j)];
                assert!(
                    (got - direct).norm() <= 1e-8 * direct.norm().max(1.0),
                    "entry ({l},{j}): {got} vs {direct}"
                );
            }
        }
    }

    proptest! {
        #[test]
        fn steering_norm_is_sqrt_n(d in -1.0e-6f64..1.0e-6, n_half in 1usize..64) {
            let cfg = small_config(2 * n_half, 1.0e6);
            let a = steering_vector(&cfg, 0, d);
            let norm = a.norm();
            prop_assert!((norm - (2.0 * n_half as f64).sqrt()).abs() < 1e-10);
        }

        #[test]
        fn measurement_columns_norm_sqrt_n(delta in -1.0e-7f64..1.0e-7, seedling in 0u64..1000) {
            let cfg = small_config(16, 1.0e6);
            let mut grid = DelayGrid::uniform(2.0e-7, 5).unwrap();
            // poor man's deterministic jitter
            for (i, o) in grid.offsets.iter_mut().enumerate() {
                *o = ((seedling as f64 * 0.37 + i as f64 * 1.7).sin()) * grid.spacing() / 2.0;
            }
            let phi = measurement_matrix(&cfg, 0, delta, &grid);
            for l in 0..grid.len() {
                prop_assert!((phi.column(l).norm() - 4.0).abs() < 1e-10);
            }
        }
    }
}
