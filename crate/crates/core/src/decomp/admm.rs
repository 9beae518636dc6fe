//! ADMM for `min ‖Φ̃θ − θ̃‖² + γ₂‖θ‖₁ + γ₃‖Dθ‖₁` with splits `p = Dθ`, `q = θ`.

use super::diff::{DiffOperator, SpectralScratch};
use super::{soft_threshold, NormalizedStats, PenaltyConfig};
use crate::error::{Error, Result};

const PCG_MAX_ITER: usize = 500;
const PCG_REL_TOL: f64 = 1e-13;

/// Split variables, duals and cached factors for one grid.
#[derive(Debug, Clone, Default)]
pub struct AdmmWorkspace {
    theta: Vec<f64>,
    p: Vec<f64>,
    y: Vec<f64>,
    q: Vec<f64>,
    z: Vec<f64>,
    rhs: Vec<f64>,
    buf2n: Vec<f64>,
    bufn: Vec<f64>,
    pcg: PcgBuffers,
    scratch: SpectralScratch,
    /// `(diag, rho_p)` the cached spectrum was built for.
    spectrum_key: Option<(f64, f64)>,
    spectrum: Vec<f64>,
    pub rho_p: f64,
    pub rho_q: f64,
    prev_res_p: f64,
    prev_res_q: f64,
    pub iteration: usize,
}

#[derive(Debug, Clone, Default)]
struct PcgBuffers {
    r: Vec<f64>,
    zr: Vec<f64>,
    d: Vec<f64>,
    ad: Vec<f64>,
}

/// Diagnostics of one ADMM cycle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdmmStepInfo {
    pub delta_theta: f64,
    /// `max(1, ‖θ‖∞)`; tolerances are relative to it.
    pub theta_scale: f64,
    /// `‖p − Dθ‖∞` after the cycle.
    pub residual_p: f64,
    /// `‖q − θ‖∞` after the cycle.
    pub residual_q: f64,
    pub rho_p: f64,
    pub rho_q: f64,
}

impl AdmmStepInfo {
    pub fn converged(&self, tol: f64) -> bool {
        let tol = tol * self.theta_scale;
        self.delta_theta < tol && self.residual_p < 10.0 * tol && self.residual_q < 10.0 * tol
    }
}

impl AdmmWorkspace {
    pub fn new(pixels: usize) -> Self {
        let mut ws = AdmmWorkspace::default();
        ws.ensure_len(pixels);
        ws
    }

    /// Resizes to `pixels`, zeroing everything if the size changes.
    pub fn ensure_len(&mut self, pixels: usize) {
        if self.theta.len() == pixels {
            return;
        }
        self.theta = vec![0.0; pixels];
        self.q = vec![0.0; pixels];
        self.z = vec![0.0; pixels];
        self.rhs = vec![0.0; pixels];
        self.bufn = vec![0.0; pixels];
        self.p = vec![0.0; 2 * pixels];
        self.y = vec![0.0; 2 * pixels];
        self.buf2n = vec![0.0; 2 * pixels];
        self.spectrum_key = None;
        self.iteration = 0;
    }

    pub fn pixels(&self) -> usize {
        self.theta.len()
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn p(&self) -> &[f64] {
        &self.p
    }

    pub fn q(&self) -> &[f64] {
        &self.q
    }

    /// Zeroes all iterates and duals.
    pub fn reset(&mut self) {
        for v in [
            &mut self.theta,
            &mut self.q,
            &mut self.z,
            &mut self.p,
            &mut self.y,
        ] {
            v.iter_mut().for_each(|x| *x = 0.0);
        }
        self.iteration = 0;
    }

    /// Sets `θ` and the consistent splits `p = Dθ`, `q = θ`; duals are kept.
    pub fn warm_start(&mut self, theta: &[f64], op: &DiffOperator) {
        self.ensure_len(theta.len());
        self.theta.copy_from_slice(theta);
        self.q.copy_from_slice(theta);
        op.apply(theta, &mut self.p);
    }

    /// Heap footprint in f64 slots; constant for a fixed grid.
    pub fn allocated_len(&self) -> usize {
        self.theta.capacity()
            + self.p.capacity()
            + self.y.capacity()
            + self.q.capacity()
            + self.z.capacity()
            + self.rhs.capacity()
            + self.buf2n.capacity()
            + self.bufn.capacity()
            + self.spectrum.capacity()
            + self.pcg.r.capacity()
            + self.pcg.zr.capacity()
            + self.pcg.d.capacity()
            + self.pcg.ad.capacity()
    }

    fn begin_solve(&mut self, cfg: &PenaltyConfig) {
        self.rho_p = cfg.rho_p;
        self.rho_q = cfg.rho_q;
        self.prev_res_p = f64::INFINITY;
        self.prev_res_q = f64::INFINITY;
        self.iteration = 0;
    }

    fn fast_spectrum(&mut self, op: &DiffOperator, diag: f64) {
        let key = (diag, self.rho_p);
        if self.spectrum_key != Some(key) {
            self.spectrum = op.inverse_spectrum(diag, self.rho_p);
            self.spectrum_key = Some(key);
        }
    }
}

/// One ADMM cycle: θ-update, p/q soft-thresholding, dual ascent, then the ρ rule.
pub(crate) fn admm_theta_step(
    ws: &mut AdmmWorkspace,
    stats: &NormalizedStats,
    cfg: &PenaltyConfig,
    op: &DiffOperator,
) -> Result<AdmmStepInfo> {
    let n = stats.len();
    ws.ensure_len(n);
    if ws.rho_p <= 0.0 || ws.rho_q <= 0.0 {
        ws.begin_solve(cfg);
    }
    // Without an ℓ₁ term on θ the q split only adds proximal damping, so it is dropped
    // whenever the remaining quadratic is still strictly positive.
    let use_q = cfg.gamma2 > 0.0 || stats.lambda0 <= 0.0;
    let rho_p = ws.rho_p;
    let rho_q = if use_q { ws.rho_q } else { 0.0 };

    // rhs = 2Φ̃θ̃ + Dᵀ(ρ_p p − y) + ρ_q q − z
    for (b, (&p, &y)) in ws.buf2n.iter_mut().zip(ws.p.iter().zip(&ws.y)) {
        *b = rho_p * p - y;
    }
    op.apply_transpose(&ws.buf2n, &mut ws.rhs);
    for (r, ((&pt, &tt), (&q, &z))) in ws.rhs.iter_mut().zip(
        stats
            .phi_tilde
            .iter()
            .zip(&stats.theta_tilde)
            .zip(ws.q.iter().zip(&ws.z)),
    ) {
        *r += 2.0 * pt * tt + rho_q * q - z;
    }

    ws.bufn.copy_from_slice(&ws.theta);
    if cfg.fast_path {
        let diag = 2.0 * stats.lambda0 + rho_q;
        ws.fast_spectrum(op, diag);
        op.apply_inverse_spectrum(&ws.rhs, &ws.spectrum, &mut ws.theta, &mut ws.scratch);
    } else {
        solve_exact(ws, stats, op, rho_q);
    }
    let (delta_theta, theta_norm) = max_abs_diff(&ws.theta, &ws.bufn);
    if !delta_theta.is_finite() {
        return Err(Error::Diverged {
            iteration: ws.iteration,
        });
    }

    op.apply(&ws.theta, &mut ws.buf2n);
    let inv_p = 1.0 / rho_p;
    let (res_p2, res_p_inf) = split_update(
        &mut ws.p,
        &mut ws.y,
        &ws.buf2n,
        rho_p,
        inv_p,
        cfg.gamma3 * inv_p,
    );
    let (res_q2, res_q_inf) = if use_q {
        let inv_q = 1.0 / rho_q;
        split_update(
            &mut ws.q,
            &mut ws.z,
            &ws.theta,
            rho_q,
            inv_q,
            cfg.gamma2 * inv_q,
        )
    } else {
        ws.q.copy_from_slice(&ws.theta);
        ws.z.iter_mut().for_each(|v| *v = 0.0);
        (0.0, 0.0)
    };

    // Grow ρ only while the residual is stalling and still above tolerance.
    let (res_p, res_q) = (res_p2.sqrt(), res_q2.sqrt());
    let floor = 0.1 * cfg.tol;
    if res_p_inf > floor && res_p >= cfg.residual_ratio_alpha * ws.prev_res_p {
        ws.rho_p = (ws.rho_p * cfg.rho_growth).min(cfg.rho_max);
    }
    if res_q_inf > floor && res_q >= cfg.residual_ratio_alpha * ws.prev_res_q {
        ws.rho_q = (ws.rho_q * cfg.rho_growth).min(cfg.rho_max);
    }
    ws.prev_res_p = res_p;
    ws.prev_res_q = res_q;
    ws.iteration += 1;

    Ok(AdmmStepInfo {
        delta_theta,
        theta_scale: theta_norm.max(1.0),
        residual_p: res_p_inf,
        residual_q: res_q_inf,
        rho_p: ws.rho_p,
        rho_q: ws.rho_q,
    })
}

/// `split = S(target + dual/ρ, t)`, `dual −= ρ (split − target)`; returns the squared
/// 2-norm and the ∞-norm of `split − target`.
#[inline]
fn split_update(
    split: &mut [f64],
    dual: &mut [f64],
    target: &[f64],
    rho: f64,
    inv_rho: f64,
    t: f64,
) -> (f64, f64) {
    // Independent accumulator lanes keep the reductions from serializing the loop.
    const LANES: usize = 4;
    let mut sq = [0.0; LANES];
    let mut inf = [0.0f64; LANES];
    let chunks = split
        .chunks_mut(LANES)
        .zip(dual.chunks_mut(LANES))
        .zip(target.chunks(LANES));
    for ((s, d), x) in chunks {
        for l in 0..s.len() {
            let v = x[l] + d[l] * inv_rho;
            let next = v - v.clamp(-t, t);
            let r = next - x[l];
            s[l] = next;
            d[l] -= rho * r;
            sq[l] += r * r;
            let a = r.abs();
            inf[l] = if a > inf[l] { a } else { inf[l] };
        }
    }
    let sq = sq.iter().sum();
    let inf = inf.iter().fold(0.0f64, |m, &v| m.max(v));
    (sq, inf)
}

/// `‖a − b‖∞`, NaN if any entry is NaN.
/// `(‖a − b‖∞, ‖a‖∞)`, with NaN propagated into the first.
fn max_abs_diff(a: &[f64], b: &[f64]) -> (f64, f64) {
    let (mut m, mut top) = (0.0f64, 0.0f64);
    let mut nan = false;
    for (x, y) in a.iter().zip(b) {
        let d = (x - y).abs();
        nan |= d.is_nan();
        m = if d > m { d } else { m };
        top = top.max(x.abs());
    }
    (if nan { f64::NAN } else { m }, top)
}

/// Preconditioned CG on `((2Φ̃² + ρ_q) I + ρ_p DᵀD) θ = rhs`, warm-started at the
/// current θ, with the circulant system at the mean diagonal as preconditioner.
fn solve_exact(ws: &mut AdmmWorkspace, stats: &NormalizedStats, op: &DiffOperator, rho_q: f64) {
    let n = stats.len();
    let rho_p = ws.rho_p;
    let diag: Vec<f64> = stats
        .phi_tilde
        .iter()
        .map(|p| 2.0 * p * p + rho_q)
        .collect();
    let mean_diag = diag.iter().sum::<f64>() / n as f64;
    ws.fast_spectrum(op, mean_diag);

    let pcg = &mut ws.pcg;
    pcg.r.resize(n, 0.0);
    pcg.zr.resize(n, 0.0);
    pcg.d.resize(n, 0.0);
    pcg.ad.resize(n, 0.0);

    let apply_a = |x: &[f64], out: &mut [f64], tmp2: &mut [f64]| {
        op.apply(x, tmp2);
        op.apply_transpose(tmp2, out);
        for i in 0..n {
            out[i] = diag[i] * x[i] + rho_p * out[i];
        }
    };

    apply_a(&ws.theta, &mut pcg.ad, &mut ws.buf2n);
    for i in 0..n {
        pcg.r[i] = ws.rhs[i] - pcg.ad[i];
    }
    let rhs_norm = dot(&ws.rhs, &ws.rhs).sqrt().max(f64::MIN_POSITIVE);
    op.apply_inverse_spectrum(&pcg.r, &ws.spectrum, &mut pcg.zr, &mut ws.scratch);
    pcg.d.copy_from_slice(&pcg.zr);
    let mut rz = dot(&pcg.r, &pcg.zr);
    for _ in 0..PCG_MAX_ITER {
        if dot(&pcg.r, &pcg.r).sqrt() <= PCG_REL_TOL * rhs_norm || rz == 0.0 {
            break;
        }
        apply_a(&pcg.d, &mut pcg.ad, &mut ws.buf2n);
        let alpha = rz / dot(&pcg.d, &pcg.ad);
        for i in 0..n {
            ws.theta[i] += alpha * pcg.d[i];
            pcg.r[i] -= alpha * pcg.ad[i];
        }
        op.apply_inverse_spectrum(&pcg.r, &ws.spectrum, &mut pcg.zr, &mut ws.scratch);
        let rz_next = dot(&pcg.r, &pcg.zr);
        let beta = rz_next / rz;
        rz = rz_next;
        for i in 0..n {
            pcg.d[i] = pcg.zr[i] + beta * pcg.d[i];
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Result of a full θ solve.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaSolution {
    pub theta: Vec<f64>,
    pub iterations: usize,
    /// False when `max_iter` ran out first.
    pub converged: bool,
    pub residual_p: f64,
    pub residual_q: f64,
}

/// Minimizer of the diagonal problem with `γ₃ = 0`: `θ_s = S(Φ̃_s θ̃_s, γ₂/2) / a_s`,
/// where `a_s` is `Φ̃²_s`, or `λ₀` on the fast path.
pub fn closed_form_theta(stats: &NormalizedStats, gamma2: f64, fast_path: bool) -> Vec<f64> {
    (0..stats.len())
        .map(|i| {
            let a = stats.quadratic_term(i, fast_path);
            if a > 0.0 {
                soft_threshold(stats.linear_term(i), 0.5 * gamma2) / a
            } else {
                0.0
            }
        })
        .collect()
}

/// Cold-started solve.
pub fn solve_theta(
    stats: &NormalizedStats,
    cfg: &PenaltyConfig,
    op: &DiffOperator,
) -> Result<ThetaSolution> {
    let mut ws = AdmmWorkspace::new(stats.len());
    solve_theta_with(&mut ws, stats, cfg, op, false)
}

/// Runs ADMM cycles until `‖θ⁽ᵏ⁺¹⁾ − θ⁽ᵏ⁾‖∞ < tol` with `‖p − Dθ‖∞` and `‖q − θ‖∞`
/// below `10·tol`, or `max_iter` is hit. Tolerances scale with `max(1, ‖θ‖∞)`. With `warm` the iterates and duals left in `ws` by the
/// previous solve are reused.
pub fn solve_theta_with(
    ws: &mut AdmmWorkspace,
    stats: &NormalizedStats,
    cfg: &PenaltyConfig,
    op: &DiffOperator,
    warm: bool,
) -> Result<ThetaSolution> {
    cfg.validate()?;
    let n = stats.len();
    if op.pixels() != n {
        return Err(Error::DimensionMismatch {
            expected: (op.width(), op.height()),
            got: (n, 1),
        });
    }
    ws.ensure_len(n);
    if !warm {
        ws.reset();
    }
    let carried = (ws.rho_p, ws.rho_q);
    ws.begin_solve(cfg);
    if warm && carried.0 > 0.0 && carried.1 > 0.0 {
        // ρ is adaptive state like the duals and is warm-started with them.
        ws.rho_p = carried.0.min(cfg.rho_max);
        ws.rho_q = carried.1.min(cfg.rho_max);
    }

    if cfg.gamma3 == 0.0 {
        let theta = closed_form_theta(stats, cfg.gamma2, cfg.fast_path);
        ws.warm_start(&theta, op);
        return Ok(ThetaSolution {
            theta,
            iterations: 0,
            converged: true,
            residual_p: 0.0,
            residual_q: 0.0,
        });
    }

    let mut info = None;
    for _ in 0..cfg.max_iter {
        let step = admm_theta_step(ws, stats, cfg, op)?;
        info = Some(step);
        if step.converged(cfg.tol) {
            break;
        }
    }
    let info = info.expect("max_iter >= 1 is validated");
    let converged = info.converged(cfg.tol);
    log::trace!("admm iterations={} converged={converged}", ws.iteration);
    if !converged {
        // Warm-started solves on a small budget stop early by design and pick up from this
        // iterate on the next frame.
        let level = if warm {
            log::Level::Debug
        } else {
            log::Level::Warn
        };
        log::log!(
            level,
            "admm stopped at max_iter={} delta_theta={:.3e} residual_p={:.3e} residual_q={:.3e}",
            cfg.max_iter,
            info.delta_theta,
            info.residual_p,
            info.residual_q
        );
    }
    Ok(ThetaSolution {
        theta: ws.theta.clone(),
        iterations: ws.iteration,
        converged,
        residual_p: info.residual_p,
        residual_q: info.residual_q,
    })
}

/// `‖Φ̃θ − θ̃‖² + γ₂‖θ‖₁ + γ₃‖Dθ‖₁`.
pub fn objective(
    stats: &NormalizedStats,
    theta: &[f64],
    gamma2: f64,
    gamma3: f64,
    op: &DiffOperator,
) -> f64 {
    let fit: f64 = theta
        .iter()
        .zip(stats.phi_tilde.iter().zip(&stats.theta_tilde))
        .map(|(&t, (&p, &tt))| (p * t - tt).powi(2))
        .sum();
    fit + penalties(theta, gamma2, gamma3, op)
}

/// The objective with `Φ̃²` replaced by `λ₀ I`:
/// `λ₀‖θ‖² − 2⟨Φ̃θ̃, θ⟩ + ‖θ̃‖² + γ₂‖θ‖₁ + γ₃‖Dθ‖₁`.
pub fn fast_objective(
    stats: &NormalizedStats,
    theta: &[f64],
    gamma2: f64,
    gamma3: f64,
    op: &DiffOperator,
) -> f64 {
    let fit: f64 = theta
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            stats.lambda0 * t * t - 2.0 * stats.linear_term(i) * t + stats.theta_tilde[i].powi(2)
        })
        .sum();
    fit + penalties(theta, gamma2, gamma3, op)
}

fn penalties(theta: &[f64], gamma2: f64, gamma3: f64, op: &DiffOperator) -> f64 {
    let l1: f64 = theta.iter().map(|t| t.abs()).sum();
    let tv = if gamma3 > 0.0 {
        op.total_variation(theta)
    } else {
        0.0
    };
    gamma2 * l1 + gamma3 * tv
}

/// `S(base, γ₂ / (2λ₀))` for each `γ₂`; the γ₂-path of the fast-path problem.
pub fn threshold_path(base: &[f64], gamma2_list: &[f64], lambda0: f64) -> Vec<Vec<f64>> {
    gamma2_list
        .iter()
        .map(|&g2| {
            let t = 0.5 * g2 / lambda0;
            base.iter().map(|&b| soft_threshold(b, t)).collect()
        })
        .collect()
}

/// Solves once at `γ₂ = 0` and derives every other `γ₂` by soft-thresholding.
/// Only valid on the fast path, where the data term is `λ₀‖θ‖² − 2⟨Φ̃θ̃, θ⟩`.
pub fn theta_path(
    stats: &NormalizedStats,
    gamma3: f64,
    gamma2_list: &[f64],
    cfg: &PenaltyConfig,
    op: &DiffOperator,
) -> Result<Vec<Vec<f64>>> {
    if !cfg.fast_path {
        return Err(Error::invalid(
            "fast_path",
            "the gamma2 path requires the fast path",
        ));
    }
    if !(stats.lambda0 > 0.0) {
        return Err(Error::invalid(
            "lambda0",
            "the gamma2 path requires lambda0 > 0",
        ));
    }
    if gamma2_list.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::invalid("gamma2_list", "must be sorted ascending"));
    }
    if gamma2_list.iter().any(|g| !(*g >= 0.0)) {
        return Err(Error::invalid("gamma2_list", "entries must be >= 0"));
    }
    let base_cfg = cfg.with_gammas(cfg.gamma1, 0.0, gamma3);
    let base = solve_theta(stats, &base_cfg, op)?.theta;
    Ok(threshold_path(&base, gamma2_list, stats.lambda0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_stats(rng: &mut ChaCha8Rng, n: usize, lambda0: f64) -> NormalizedStats {
        let phi_tilde: Vec<f64> = (0..n)
            .map(|_| (rng.random_range(0.0..2.0) + lambda0).sqrt())
            .collect();
        let theta_tilde = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        NormalizedStats::new(phi_tilde, theta_tilde, lambda0).unwrap()
    }

    fn tight(cfg: PenaltyConfig) -> PenaltyConfig {
        PenaltyConfig {
            tol: 1e-10,
            max_iter: 20_000,
            ..cfg
        }
    }

    #[test]
    fn no_penalty_gives_diagonal_least_squares() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let stats = random_stats(&mut rng, 9, 1.0);
        let op = DiffOperator::new(3, 3);
        let cfg = tight(PenaltyConfig::default().with_gammas(0.0, 0.0, 0.0));
        let mut exact = cfg;
        exact.fast_path = false;
        let sol = solve_theta(&stats, &exact, &op).unwrap();
        for i in 0..9 {
            let expected = stats.theta_tilde[i] / stats.phi_tilde[i];
            assert!((sol.theta[i] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn large_gamma2_shrinks_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let stats = random_stats(&mut rng, 16, 1.0);
        let op = DiffOperator::new(4, 4);
        let max_lin = (0..16)
            .map(|i| stats.linear_term(i).abs())
            .fold(0.0, f64::max);
        for fast_path in [true, false] {
            let cfg = PenaltyConfig {
                fast_path,
                ..tight(PenaltyConfig::default().with_gammas(0.0, 2.0 * max_lin, 0.3))
            };
            let sol = solve_theta(&stats, &cfg, &op).unwrap();
            assert!(sol.converged);
            assert!(sol.theta.iter().all(|t| t.abs() < 1e-8), "{:?}", sol.theta);
        }
    }

    #[test]
    fn zero_data_gives_zero() {
        let stats = NormalizedStats::new(vec![1.3; 12], vec![0.0; 12], 1.0).unwrap();
        let op = DiffOperator::new(4, 3);
        for (g2, g3) in [(0.0, 0.0), (0.5, 0.0), (0.0, 0.7), (1.0, 2.0)] {
            let cfg = PenaltyConfig::default().with_gammas(0.0, g2, g3);
            let sol = solve_theta(&stats, &cfg, &op).unwrap();
            assert!(sol.theta.iter().all(|&t| t == 0.0));
        }
    }

    #[test]
    fn single_pixel_scalar_problem() {
        // (θ − 3)² + 2|θ| is minimized at θ = 2
        let stats = NormalizedStats::new(vec![1.0], vec![3.0], 1.0).unwrap();
        let op = DiffOperator::new(1, 1);
        for g3 in [0.0, 5.0] {
            let cfg = PenaltyConfig {
                fast_path: false,
                ..tight(PenaltyConfig::default().with_gammas(0.0, 2.0, g3))
            };
            let sol = solve_theta(&stats, &cfg, &op).unwrap();
            assert!((sol.theta[0] - 2.0).abs() < 1e-8, "{:?}", sol.theta);
        }
    }

    #[test]
    fn pcg_matches_dense_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (w, h) = (5, 3);
        let n = w * h;
        let op = DiffOperator::new(w, h);
        let stats = random_stats(&mut rng, n, 0.5);
        let mut ws = AdmmWorkspace::new(n);
        ws.rho_p = 1.7;
        ws.rho_q = 0.6;
        for v in ws.rhs.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        let rhs = ws.rhs.clone();
        solve_exact(&mut ws, &stats, &op, 0.6);

        let mut dense = DMatrix::<f64>::zeros(n, n);
        let mut e = vec![0.0; n];
        let mut d = vec![0.0; 2 * n];
        let mut col = vec![0.0; n];
        for j in 0..n {
            e.iter_mut().for_each(|v| *v = 0.0);
            e[j] = 1.0;
            op.apply(&e, &mut d);
            op.apply_transpose(&d, &mut col);
            for i in 0..n {
                dense[(i, j)] = 1.7 * col[i];
            }
            dense[(j, j)] += 2.0 * stats.phi_tilde[j].powi(2) + 0.6;
        }
        let expected = dense.lu().solve(&DVector::from_vec(rhs)).unwrap();
        for i in 0..n {
            assert!((ws.theta[i] - expected[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn primal_feasibility_at_convergence() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let stats = random_stats(&mut rng, 16, 1.0);
        let op = DiffOperator::new(4, 4);
        let cfg = PenaltyConfig::default().with_gammas(0.0, 0.4, 0.4);
        let mut ws = AdmmWorkspace::new(16);
        let sol = solve_theta_with(&mut ws, &stats, &cfg, &op, false).unwrap();
        assert!(sol.converged);
        let mut d = vec![0.0; 32];
        op.apply(&sol.theta, &mut d);
        let rp = ws
            .p()
            .iter()
            .zip(&d)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let rq = ws
            .q()
            .iter()
            .zip(&sol.theta)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(rp < 10.0 * cfg.tol && rq < 10.0 * cfg.tol);
    }

    #[test]
    fn theta_path_single_zero_entry_is_base() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let stats = random_stats(&mut rng, 16, 1.0);
        let op = DiffOperator::new(4, 4);
        let cfg = PenaltyConfig::default().with_gammas(0.0, 0.0, 0.3);
        let path = theta_path(&stats, 0.3, &[0.0], &cfg, &op).unwrap();
        let base = solve_theta(&stats, &cfg, &op).unwrap().theta;
        assert_eq!(path[0], base);
    }

    #[test]
    fn theta_path_rejects_exact_path_and_unsorted() {
        let stats = NormalizedStats::new(vec![1.0; 4], vec![1.0; 4], 1.0).unwrap();
        let op = DiffOperator::new(2, 2);
        let cfg = PenaltyConfig {
            fast_path: false,
            ..PenaltyConfig::default()
        };
        assert!(theta_path(&stats, 0.1, &[0.0], &cfg, &op).is_err());
        assert!(theta_path(&stats, 0.1, &[0.2, 0.1], &PenaltyConfig::default(), &op).is_err());
    }

    #[test]
    fn workspace_does_not_grow() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let op = DiffOperator::new(6, 5);
        let cfg = PenaltyConfig::default().with_gammas(0.0, 0.1, 0.2);
        let mut ws = AdmmWorkspace::new(30);
        let stats = random_stats(&mut rng, 30, 1.0);
        solve_theta_with(&mut ws, &stats, &cfg, &op, true).unwrap();
        let size = ws.allocated_len();
        for _ in 0..50 {
            let stats = random_stats(&mut rng, 30, 1.0);
            solve_theta_with(&mut ws, &stats, &cfg, &op, true).unwrap();
            assert_eq!(ws.allocated_len(), size);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn solution_beats_trivial_candidates(seed in any::<u64>(), g2 in 0.0..1.5f64, g3 in 0.0..1.5f64, fast in any::<bool>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let stats = random_stats(&mut rng, 9, 1.0);
            let op = DiffOperator::new(3, 3);
            let cfg = PenaltyConfig { fast_path: fast, ..tight(PenaltyConfig::default().with_gammas(0.0, g2, g3)) };
            let sol = solve_theta(&stats, &cfg, &op).unwrap();
            let f = |t: &[f64]| if fast { fast_objective(&stats, t, g2, g3, &op) } else { objective(&stats, t, g2, g3, &op) };
            let unpen = stats.unpenalized(fast);
            let at_sol = f(&sol.theta);
            prop_assert!(at_sol <= f(&vec![0.0; 9]) + 1e-6);
            prop_assert!(at_sol <= f(&unpen) + 1e-6);
        }

        #[test]
        fn threshold_path_support_nests(base in proptest::collection::vec(-3.0..3.0f64, 1..40), mut gammas in proptest::collection::vec(0.0..4.0f64, 1..8)) {
            gammas.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let path = threshold_path(&base, &gammas, 1.0);
            for pair in path.windows(2) {
                for (hi, lo) in pair[1].iter().zip(&pair[0]) {
                    prop_assert!(*hi == 0.0 || *lo != 0.0);
                }
            }
        }
    }
}
