//! Penalized spatio-temporal regression.
//!
//! Every frame is modelled as `x_t = μ_t + u_t + θ ⊙ x_{t-1} + e_t` where `u` holds sparse
//! transient events and `θ` holds sparse, spatially clustered AR(1) coefficients that flag
//! persistent anomalies. The exponentially weighted least-squares term is carried in the
//! recursive statistics `Φ` and `Ψ`, so each frame costs the same regardless of how many
//! frames came before it.

mod admm;
mod diff;

pub use admm::{
    closed_form_theta, fast_objective, objective, solve_theta, solve_theta_with, theta_path,
    threshold_path, AdmmStepInfo, AdmmWorkspace, ThetaSolution,
};
pub use diff::{DiffOperator, SpectralScratch};

use crate::error::{Error, Result};
use crate::frame::Frame;

/// `sgn(x) · max(|x| − γ, 0)`.
#[inline]
pub fn soft_threshold(x: f64, gamma: f64) -> f64 {
    debug_assert!(gamma >= 0.0);
    if x > gamma {
        x - gamma
    } else if x < -gamma {
        x + gamma
    } else {
        0.0
    }
}

/// Natural-event estimate for one pixel: `S(residual, γ₁/2)`.
#[inline]
pub fn solve_u(residual: f64, gamma1: f64) -> f64 {
    soft_threshold(residual, 0.5 * gamma1)
}

/// Penalty weights and ADMM controls for one `(γ₁, γ₂, γ₃)` setting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PenaltyConfig {
    pub gamma1: f64,
    pub gamma2: f64,
    pub gamma3: f64,
    pub rho_p: f64,
    pub rho_q: f64,
    /// Factor applied to a penalty parameter whose residual decays too slowly.
    pub rho_growth: f64,
    /// A residual must shrink below this fraction of its previous value to keep `ρ` fixed.
    pub residual_ratio_alpha: f64,
    /// Upper bound for the adaptive penalty parameters.
    pub rho_max: f64,
    pub max_iter: usize,
    pub tol: f64,
    /// Replace `Φ̃²` by `λ₀ I` in the θ system so it is diagonalized by the DFT.
    pub fast_path: bool,
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        PenaltyConfig {
            gamma1: 0.05,
            gamma2: 0.0,
            gamma3: 0.0,
            rho_p: 1.0,
            rho_q: 1.0,
            rho_growth: 2.0,
            residual_ratio_alpha: 0.7,
            rho_max: 2.0,
            max_iter: 200,
            tol: 1e-6,
            fast_path: true,
        }
    }
}

impl PenaltyConfig {
    /// Frame-rate settings: fixed `ρ = 4`, relative tolerance `1e-3` and at most 10 cycles
    /// per warm-started solve, so each θ solve resumes from the previous frame's iterate.
    pub fn realtime() -> Self {
        PenaltyConfig {
            rho_p: 4.0,
            rho_q: 4.0,
            rho_max: 4.0,
            max_iter: 10,
            tol: 1e-3,
            ..PenaltyConfig::default()
        }
    }

    pub fn with_gammas(mut self, gamma1: f64, gamma2: f64, gamma3: f64) -> Self {
        self.gamma1 = gamma1;
        self.gamma2 = gamma2;
        self.gamma3 = gamma3;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let nonneg = |name, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::invalid(
                    name,
                    format!("must be finite and >= 0, got {v}"),
                ))
            }
        };
        nonneg("gamma1", self.gamma1)?;
        nonneg("gamma2", self.gamma2)?;
        nonneg("gamma3", self.gamma3)?;
        if !(self.rho_p > 0.0) || !(self.rho_q > 0.0) {
            return Err(Error::invalid("rho", "rho_p and rho_q must be > 0"));
        }
        if !(self.rho_growth > 1.0) {
            return Err(Error::invalid("rho_growth", "must be > 1"));
        }
        if !(self.residual_ratio_alpha > 0.0 && self.residual_ratio_alpha < 1.0) {
            return Err(Error::invalid("residual_ratio_alpha", "must lie in (0, 1)"));
        }
        if !(self.rho_max >= self.rho_p.max(self.rho_q)) {
            return Err(Error::invalid(
                "rho_max",
                "must be >= the initial rho values",
            ));
        }
        if !(self.tol > 0.0) {
            return Err(Error::invalid("tol", "must be > 0"));
        }
        if self.max_iter == 0 {
            return Err(Error::invalid("max_iter", "must be >= 1"));
        }
        Ok(())
    }
}

/// Streaming model for one pixel grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorState {
    pub width: usize,
    pub height: usize,
    pub theta: Vec<f64>,
    pub phi: Vec<f64>,
    pub psi: Vec<f64>,
    pub u_current: Vec<f64>,
    pub prev_frame: Option<Frame>,
    /// Number of frames consumed so far.
    pub t: usize,
    /// Forgetting factor in (0, 1).
    pub lambda: f64,
    /// Ridge weight folded into `Φ̃`.
    pub lambda0: f64,
}

impl DetectorState {
    pub fn new(width: usize, height: usize, lambda: f64, lambda0: f64) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("grid", "width and height must be >= 1"));
        }
        if !(lambda > 0.0 && lambda < 1.0) {
            return Err(Error::invalid(
                "lambda",
                format!("must lie in (0, 1), got {lambda}"),
            ));
        }
        if !(lambda0 >= 0.0 && lambda0.is_finite()) {
            return Err(Error::invalid(
                "lambda0",
                format!("must be >= 0, got {lambda0}"),
            ));
        }
        let n = width * height;
        Ok(DetectorState {
            width,
            height,
            theta: vec![0.0; n],
            phi: vec![0.0; n],
            psi: vec![0.0; n],
            u_current: vec![0.0; n],
            prev_frame: None,
            t: 0,
            lambda,
            lambda0,
        })
    }

    #[inline]
    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    /// `(1 − λ) / (1 − λᵀ)`, the weight normalizer for the current frame count.
    pub fn weight_normalizer(&self) -> f64 {
        weight_normalizer(self.lambda, self.t)
    }

    pub fn normalized_stats(&self) -> NormalizedStats {
        NormalizedStats::from_recursive(
            &self.phi,
            &self.psi,
            self.weight_normalizer(),
            self.lambda0,
        )
    }

    fn check_invariants(&self) {
        let n = self.pixels();
        debug_assert_eq!(self.theta.len(), n);
        debug_assert_eq!(self.phi.len(), n);
        debug_assert_eq!(self.psi.len(), n);
        debug_assert_eq!(self.u_current.len(), n);
        debug_assert!(self.phi.iter().all(|&p| p >= 0.0));
    }
}

pub fn weight_normalizer(lambda: f64, t: usize) -> f64 {
    if t == 0 {
        return 1.0;
    }
    (1.0 - lambda) / (1.0 - lambda.powi(t as i32))
}

/// Per-pixel data term of the θ problem: `‖Φ̃ θ − θ̃‖²` with diagonal `Φ̃`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedStats {
    pub phi_tilde: Vec<f64>,
    pub theta_tilde: Vec<f64>,
    /// Ridge weight, needed by the `Φ̃² ≈ λ₀ I` fast path.
    pub lambda0: f64,
}

impl NormalizedStats {
    /// `Φ̃ = sqrt(c Φ + λ₀)` and `θ̃ = c Ψ / Φ̃` with `c = (1 − λ)/(1 − λᵀ)`.
    pub fn from_recursive(phi: &[f64], psi: &[f64], normalizer: f64, lambda0: f64) -> Self {
        let mut stats = NormalizedStats {
            phi_tilde: vec![0.0; phi.len()],
            theta_tilde: vec![0.0; phi.len()],
            lambda0,
        };
        stats.refresh(phi, psi, normalizer);
        stats
    }

    pub(crate) fn refresh(&mut self, phi: &[f64], psi: &[f64], normalizer: f64) {
        for (i, (&ph, &ps)) in phi.iter().zip(psi).enumerate() {
            let pt = (normalizer * ph + self.lambda0).sqrt();
            self.phi_tilde[i] = pt;
            self.theta_tilde[i] = if pt > 0.0 { normalizer * ps / pt } else { 0.0 };
        }
    }

    /// Direct construction, mainly for solver tests.
    pub fn new(phi_tilde: Vec<f64>, theta_tilde: Vec<f64>, lambda0: f64) -> Result<Self> {
        if phi_tilde.len() != theta_tilde.len() {
            return Err(Error::Malformed(
                "phi_tilde and theta_tilde lengths differ".into(),
            ));
        }
        Ok(NormalizedStats {
            phi_tilde,
            theta_tilde,
            lambda0,
        })
    }

    pub fn len(&self) -> usize {
        self.phi_tilde.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phi_tilde.is_empty()
    }

    /// Linear coefficient `Φ̃ θ̃` (equal to `c Ψ`).
    pub(crate) fn linear_term(&self, i: usize) -> f64 {
        self.phi_tilde[i] * self.theta_tilde[i]
    }

    /// Diagonal of the quadratic term actually used by a solve.
    pub(crate) fn quadratic_term(&self, i: usize, fast_path: bool) -> f64 {
        if fast_path {
            self.lambda0
        } else {
            self.phi_tilde[i] * self.phi_tilde[i]
        }
    }

    /// Unpenalized minimizer `θ̂₀,₀`, zero where the quadratic term vanishes.
    pub fn unpenalized(&self, fast_path: bool) -> Vec<f64> {
        closed_form_theta(self, 0.0, fast_path)
    }
}

fn check_dims(expected: (usize, usize), frame: &Frame) -> Result<()> {
    frame.ensure_dims(expected.0, expected.1)
}

/// Folds one frame into `Φ` and `Ψ` with a given natural-event estimate `u`:
/// `Φ ← λΦ + x²_{t−1}`, `Ψ ← λΨ + x_{t−1}(x_t − μ_t − u_t)`.
pub fn update_sufficient_stats(
    state: &mut DetectorState,
    frame: &Frame,
    background: &Frame,
    u: &[f64],
) -> Result<()> {
    let dims = (state.width, state.height);
    check_dims(dims, frame)?;
    check_dims(dims, background)?;
    if u.len() != state.pixels() {
        return Err(Error::Malformed("u has the wrong length".into()));
    }
    let Some(prev) = state.prev_frame.take() else {
        return Err(Error::invalid(
            "state",
            "needs at least one prior frame (t >= 1)",
        ));
    };
    let lambda = state.lambda;
    for i in 0..state.pixels() {
        let xp = prev.values[i];
        state.phi[i] = lambda * state.phi[i] + xp * xp;
        state.psi[i] = lambda * state.psi[i] + xp * (frame.values[i] - background.values[i] - u[i]);
    }
    state.u_current.copy_from_slice(u);
    state.prev_frame = Some(frame.clone());
    state.t += 1;
    state.check_invariants();
    Ok(())
}

/// Limits of the u/θ alternation inside one frame.
pub const MAX_ALTERNATIONS: usize = 50;

/// Diagnostics for one processed frame.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepRecord {
    pub t: usize,
    pub alternations: usize,
    pub admm_iterations: usize,
    pub converged: bool,
    pub max_delta_u: f64,
    pub max_delta_theta: f64,
}

impl std::fmt::Display for StepRecord {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "t={} alternations={} admm_iterations={} converged={} delta_u={:.3e} delta_theta={:.3e}",
            self.t,
            self.alternations,
            self.admm_iterations,
            self.converged,
            self.max_delta_u,
            self.max_delta_theta
        )
    }
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub u: Frame,
    pub theta: Vec<f64>,
    pub record: StepRecord,
}

/// One outer time step of the recursive estimator.
///
/// `Φ` and a provisional `Ψ⁽⁰⁾` (without `u`) are formed first; then `u` and `θ` are
/// alternated: `u = S(x − μ − θ x_{t−1}, γ₁/2)`, `Ψ = Ψ⁽⁰⁾ − x_{t−1} u`, followed by one θ
/// pass (closed form when `γ₃ = 0`, otherwise one ADMM cycle). The first frame only
/// seeds `prev_frame`.
pub fn step_frame(
    state: &mut DetectorState,
    ws: &mut AdmmWorkspace,
    frame: &Frame,
    background: &Frame,
    cfg: &PenaltyConfig,
    op: &DiffOperator,
) -> Result<StepOutput> {
    let (w, h) = (state.width, state.height);
    check_dims((w, h), frame)?;
    check_dims((w, h), background)?;
    if op.width() != w || op.height() != h {
        return Err(Error::DimensionMismatch {
            expected: (w, h),
            got: (op.width(), op.height()),
        });
    }
    ws.ensure_len(state.pixels());
    let n = state.pixels();

    let Some(prev) = state.prev_frame.take() else {
        state.prev_frame = Some(frame.clone());
        state.t = 1;
        state.u_current.iter_mut().for_each(|v| *v = 0.0);
        return Ok(StepOutput {
            u: Frame::zeros(w, h),
            theta: state.theta.clone(),
            record: StepRecord {
                t: 1,
                converged: true,
                ..StepRecord::default()
            },
        });
    };

    let lambda = state.lambda;
    let mut psi0 = vec![0.0; n];
    let mut detrended = vec![0.0; n];
    for i in 0..n {
        let xp = prev.values[i];
        state.phi[i] = lambda * state.phi[i] + xp * xp;
        detrended[i] = frame.values[i] - background.values[i];
        psi0[i] = lambda * state.psi[i] + xp * detrended[i];
    }
    state.t += 1;
    let normalizer = state.weight_normalizer();

    let mut theta = state.theta.clone();
    let mut u = state.u_current.clone();
    if cfg.gamma2 == 0.0 && cfg.gamma3 == 0.0 && !cfg.fast_path && state.lambda0 > 0.0 {
        joint_fixed_point(
            state,
            &prev.values,
            &detrended,
            &psi0,
            normalizer,
            cfg.gamma1,
            &mut u,
            &mut theta,
        );
    }
    let mut stats = NormalizedStats::from_recursive(&state.phi, &psi0, normalizer, state.lambda0);
    let mut record = StepRecord {
        t: state.t,
        ..StepRecord::default()
    };
    let half_gamma1 = 0.5 * cfg.gamma1;
    // Both alternation tolerances are relative to the magnitudes involved.
    let u_scale = detrended.iter().fold(1.0f64, |m, v| m.max(v.abs()));

    for k in 0..MAX_ALTERNATIONS {
        let mut delta_u = 0.0f64;
        for i in 0..n {
            let xp = prev.values[i];
            let nu = soft_threshold(detrended[i] - theta[i] * xp, half_gamma1);
            delta_u = delta_u.max((nu - u[i]).abs());
            u[i] = nu;
            state.psi[i] = psi0[i] - xp * nu;
        }
        stats.refresh(&state.phi, &state.psi, normalizer);

        let mut delta_theta = 0.0f64;
        if cfg.gamma3 == 0.0 {
            for i in 0..n {
                let a = stats.quadratic_term(i, cfg.fast_path);
                let next = if a > 0.0 {
                    soft_threshold(stats.linear_term(i), 0.5 * cfg.gamma2) / a
                } else {
                    0.0
                };
                delta_theta = delta_theta.max((next - theta[i]).abs());
                theta[i] = next;
            }
        } else {
            if k == 0 {
                ws.warm_start(&theta, op);
            }
            let info = admm::admm_theta_step(ws, &stats, cfg, op)?;
            record.admm_iterations += 1;
            delta_theta = info.delta_theta;
            theta.copy_from_slice(ws.theta());
        }

        record.alternations = k + 1;
        record.max_delta_u = delta_u;
        record.max_delta_theta = delta_theta;
        let theta_scale = theta.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        if delta_u < cfg.tol * u_scale && delta_theta < cfg.tol * theta_scale {
            record.converged = true;
            break;
        }
    }
    if !theta.iter().all(|v| v.is_finite()) {
        return Err(Error::Diverged {
            iteration: record.alternations,
        });
    }

    state.theta.copy_from_slice(&theta);
    state.u_current.copy_from_slice(&u);
    state.prev_frame = Some(frame.clone());
    state.check_invariants();
    log::trace!("step {record}");
    Ok(StepOutput {
        u: Frame {
            width: w,
            height: h,
            values: u,
        },
        theta,
        record,
    })
}

/// Exact limit of the u/θ alternation when θ has no penalty: per pixel the pair minimizes
/// `(Φ + λ₀/c)θ² − 2θ(Ψ⁽⁰⁾ − x_{t−1}u) + u² − 2u(x − μ) + γ₁|u|`, which is jointly strictly
/// convex, so the sign of the residual at `u = 0` decides the active branch.
#[allow(clippy::too_many_arguments)]
fn joint_fixed_point(
    state: &DetectorState,
    prev: &[f64],
    detrended: &[f64],
    psi0: &[f64],
    normalizer: f64,
    gamma1: f64,
    u: &mut [f64],
    theta: &mut [f64],
) {
    let ridge = state.lambda0 / normalizer;
    let half = 0.5 * gamma1;
    for i in 0..u.len() {
        let (xp, d, phi) = (prev[i], detrended[i], state.phi[i]);
        let t0 = psi0[i] / (phi + ridge);
        let r = d - t0 * xp;
        if r.abs() <= half {
            u[i] = 0.0;
            theta[i] = t0;
        } else {
            let s = r.signum();
            let t = (psi0[i] - xp * d + s * xp * half) / (phi - xp * xp + ridge);
            theta[i] = t;
            u[i] = d - t * xp - s * half;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn soft_threshold_examples() {
        assert_eq!(soft_threshold(3.0, 1.0), 2.0);
        assert_eq!(soft_threshold(-0.5, 1.0), 0.0);
        assert_eq!(soft_threshold(-3.0, 1.0), -2.0);
        for x in [-7.5, -1e-9, 0.0, 2.0, 1e9] {
            assert_eq!(soft_threshold(x, 0.0), x);
        }
    }

    #[test]
    fn solve_u_examples() {
        assert_eq!(solve_u(5.0, 2.0), 4.0);
        assert_eq!(solve_u(0.0, 2.0), 0.0);
    }

    #[test]
    fn first_update_after_seed_sets_phi_to_square() {
        let mut state = DetectorState::new(1, 1, 0.5, 1.0).unwrap();
        state.prev_frame = Some(Frame::filled(1, 1, 2.0));
        state.t = 1;
        update_sufficient_stats(
            &mut state,
            &Frame::filled(1, 1, 3.0),
            &Frame::zeros(1, 1),
            &[0.0],
        )
        .unwrap();
        assert_eq!(state.phi[0], 4.0);
        assert_eq!(state.psi[0], 6.0);
        assert_eq!(state.t, 2);
    }

    #[test]
    fn zero_previous_frame_only_decays() {
        let mut state = DetectorState::new(2, 1, 0.3, 1.0).unwrap();
        state.phi = vec![2.0, 5.0];
        state.psi = vec![-1.0, 4.0];
        state.prev_frame = Some(Frame::zeros(2, 1));
        state.t = 4;
        update_sufficient_stats(
            &mut state,
            &Frame::filled(2, 1, 9.0),
            &Frame::zeros(2, 1),
            &[0.0, 0.0],
        )
        .unwrap();
        assert_eq!(state.phi, vec![0.3 * 2.0, 0.3 * 5.0]);
        assert_eq!(state.psi, vec![0.3 * -1.0, 0.3 * 4.0]);
    }

    #[test]
    fn update_without_prior_frame_is_an_error() {
        let mut state = DetectorState::new(1, 1, 0.5, 1.0).unwrap();
        let err =
            update_sufficient_stats(&mut state, &Frame::zeros(1, 1), &Frame::zeros(1, 1), &[0.0]);
        assert!(matches!(err, Err(Error::InvalidParameter { .. })));
    }

    #[test]
    fn mismatched_frame_is_rejected() {
        let mut state = DetectorState::new(2, 2, 0.5, 1.0).unwrap();
        state.prev_frame = Some(Frame::zeros(2, 2));
        state.t = 1;
        let err = update_sufficient_stats(
            &mut state,
            &Frame::zeros(3, 2),
            &Frame::zeros(2, 2),
            &[0.0; 4],
        );
        assert!(matches!(err, Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn normalized_stats_fold_ridge() {
        let stats = NormalizedStats::from_recursive(&[3.0, 0.0], &[2.0, 0.0], 0.5, 1.0);
        assert!((stats.phi_tilde[0] - 2.5f64.sqrt()).abs() < 1e-15);
        assert!((stats.theta_tilde[0] - 1.0 / 2.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(stats.phi_tilde[1], 1.0);
        assert_eq!(stats.theta_tilde[1], 0.0);
        // λ₀ = 0 with a pixel that never varied: guarded division
        let stats = NormalizedStats::from_recursive(&[0.0], &[0.0], 1.0, 0.0);
        assert_eq!(stats.theta_tilde[0], 0.0);
    }

    #[test]
    fn config_validation_names_the_field() {
        let cfg = PenaltyConfig {
            rho_growth: 1.0,
            ..PenaltyConfig::default()
        };
        match cfg.validate() {
            Err(Error::InvalidParameter { name, .. }) => assert_eq!(name, "rho_growth"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(PenaltyConfig::default().validate().is_ok());
    }

    #[test]
    fn state_rejects_bad_forgetting_factor() {
        assert!(DetectorState::new(2, 2, 1.0, 1.0).is_err());
        assert!(DetectorState::new(2, 2, 0.0, 1.0).is_err());
        assert!(DetectorState::new(0, 2, 0.5, 1.0).is_err());
    }

    #[test]
    fn unpenalized_step_satisfies_both_fixed_point_conditions() {
        let (w, h) = (3, 2);
        let op = DiffOperator::new(w, h);
        let mut ws = AdmmWorkspace::new(w * h);
        let mut state = DetectorState::new(w, h, 0.3, 1.0).unwrap();
        let cfg = PenaltyConfig {
            gamma1: 3.0,
            fast_path: false,
            ..PenaltyConfig::default()
        };
        let mu = Frame::filled(w, h, 10.0);
        let frames = [
            [12.0, 9.0, 30.0, 10.0, 11.0, 8.0],
            [14.0, 10.0, 60.0, 9.0, 10.0, 40.0],
            [15.0, 12.0, 90.0, 9.5, 12.0, 11.0],
        ];
        let mut prev: Option<Frame> = None;
        for values in frames {
            let x = Frame::new(w, h, values.to_vec()).unwrap();
            let out = step_frame(&mut state, &mut ws, &x, &mu, &cfg, &op).unwrap();
            if let Some(p) = &prev {
                let ridge = state.lambda0 / state.weight_normalizer();
                for i in 0..w * h {
                    let (xp, d) = (p.values[i], x.values[i] - mu.values[i]);
                    let (u, th) = (out.u.values[i], out.theta[i]);
                    // u is the γ₁/2 soft-threshold of the residual and θ solves the ridge
                    // normal equation with Ψ computed from that u.
                    assert!(
                        (u - soft_threshold(d - th * xp, 1.5)).abs() < 1e-9,
                        "u at {i}"
                    );
                    assert!(
                        (th * (state.phi[i] + ridge) - state.psi[i]).abs() < 1e-9,
                        "θ at {i}"
                    );
                }
            }
            prev = Some(x);
        }
    }

    proptest::proptest! {
        #[test]
        fn soft_threshold_is_non_expansive(a in -1e3..1e3f64, b in -1e3..1e3f64, g in 0.0..50.0f64) {
            // Up to rounding in the two subtractions.
            let slack = 1e-15 * (a.abs() + b.abs() + g);
            proptest::prop_assert!((soft_threshold(a, g) - soft_threshold(b, g)).abs() <= (a - b).abs() + slack);
        }

        #[test]
        fn recursive_stats_equal_batch_sums(
            values in proptest::collection::vec(0.0..255.0f64, 4 * 2..=4 * 50),
            lambda in 0.05..0.95f64,
        ) {
            let frames: Vec<Frame> = values.chunks_exact(4).map(|c| Frame::new(2, 2, c.to_vec()).unwrap()).collect();
            let mu = Frame::filled(2, 2, 5.0);
            let u = [1.0, 0.0, -2.0, 0.5];
            let mut state = DetectorState::new(2, 2, lambda, 1.0).unwrap();
            state.prev_frame = Some(frames[0].clone());
            for f in &frames[1..] {
                update_sufficient_stats(&mut state, f, &mu, &u).unwrap();
            }
            let t = frames.len() - 1;
            for i in 0..4 {
                let (mut phi, mut psi) = (0.0, 0.0);
                for s in 1..=t {
                    let wgt = lambda.powi((t - s) as i32);
                    let xp = frames[s - 1].values[i];
                    phi += wgt * xp * xp;
                    psi += wgt * xp * (frames[s].values[i] - mu.values[i] - u[i]);
                }
                proptest::prop_assert!((state.phi[i] - phi).abs() <= 1e-10 * phi.abs().max(1.0));
                proptest::prop_assert!((state.psi[i] - psi).abs() <= 1e-10 * psi.abs().max(1.0));
            }
        }
    }
}
