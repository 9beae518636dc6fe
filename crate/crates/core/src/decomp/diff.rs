//! Periodic first-difference operator `D = [Dx; Dy]` on a `width x height` grid and the
//! spectral solve of `(d I + rho DᵀD) x = r`.
//!
//! With circular boundaries `DᵀD` is block-circulant, so the 2D DFT diagonalizes it with
//! eigenvalues `4 sin²(πj/W) + 4 sin²(πk/H)`.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

#[derive(Clone)]
pub struct DiffOperator {
    width: usize,
    height: usize,
    /// Spectrum of DᵀD, stored transposed: index `j * height + k`.
    eigenvalues: Vec<f64>,
    /// Columns `j <= width / 2` of the spectrum, same layout; enough for real inputs.
    half_eigenvalues: Vec<f64>,
    row_fwd: Arc<dyn RealToComplex<f64>>,
    row_inv: Arc<dyn ComplexToReal<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for DiffOperator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DiffOperator")
            .field("width", &self.width)
            .field("height", &self.height)
            .finish_non_exhaustive()
    }
}

/// Reusable buffers for [`DiffOperator::apply_fast_inverse`].
#[derive(Debug, Clone, Default)]
pub struct SpectralScratch {
    real: Vec<f64>,
    grid: Vec<Complex64>,
    transposed: Vec<Complex64>,
    fft: Vec<Complex64>,
}

impl DiffOperator {
    pub fn new(width: usize, height: usize) -> Self {
        assert!(width >= 1 && height >= 1, "grid must be non-empty");
        let mut planner = FftPlanner::new();
        let mut real_planner = RealFftPlanner::new();
        let mut eigenvalues = vec![0.0; width * height];
        for j in 0..width {
            let sx = (PI * j as f64 / width as f64).sin();
            for k in 0..height {
                let sy = (PI * k as f64 / height as f64).sin();
                eigenvalues[j * height + k] = 4.0 * sx * sx + 4.0 * sy * sy;
            }
        }
        let half_eigenvalues = eigenvalues[..(width / 2 + 1) * height].to_vec();
        DiffOperator {
            width,
            height,
            eigenvalues,
            half_eigenvalues,
            row_fwd: real_planner.plan_fft_forward(width),
            row_inv: real_planner.plan_fft_inverse(width),
            col_fwd: planner.plan_fft_forward(height),
            col_inv: planner.plan_fft_inverse(height),
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    /// Eigenvalue of DᵀD for horizontal frequency `j` and vertical frequency `k`.
    pub fn eigenvalue(&self, j: usize, k: usize) -> f64 {
        self.eigenvalues[j * self.height + k]
    }

    pub fn eigenvalues(&self) -> impl Iterator<Item = f64> + '_ {
        self.eigenvalues.iter().copied()
    }

    /// `out[..n] = Dx θ`, `out[n..] = Dy θ`.
    pub fn apply(&self, theta: &[f64], out: &mut [f64]) {
        let (w, h) = (self.width, self.height);
        let n = w * h;
        debug_assert_eq!(theta.len(), n);
        debug_assert_eq!(out.len(), 2 * n);
        let (dx, dy) = out.split_at_mut(n);
        for y in 0..h {
            let row = &theta[y * w..(y + 1) * w];
            let dx_row = &mut dx[y * w..(y + 1) * w];
            for x in 0..w - 1 {
                dx_row[x] = row[x + 1] - row[x];
            }
            dx_row[w - 1] = row[0] - row[w - 1];
            let next = if y + 1 == h { 0 } else { y + 1 };
            let below = &theta[next * w..(next + 1) * w];
            for (d, (b, r)) in dy[y * w..(y + 1) * w].iter_mut().zip(below.iter().zip(row)) {
                *d = b - r;
            }
        }
    }

    /// `out = Dxᵀ p[..n] + Dyᵀ p[n..]`.
    pub fn apply_transpose(&self, p: &[f64], out: &mut [f64]) {
        let (w, h) = (self.width, self.height);
        let n = w * h;
        debug_assert_eq!(p.len(), 2 * n);
        debug_assert_eq!(out.len(), n);
        let (px, py) = p.split_at(n);
        for y in 0..h {
            let prev = if y == 0 { h - 1 } else { y - 1 };
            let px_row = &px[y * w..(y + 1) * w];
            let out_row = &mut out[y * w..(y + 1) * w];
            out_row[0] = px_row[w - 1] - px_row[0];
            for x in 1..w {
                out_row[x] = px_row[x - 1] - px_row[x];
            }
            let py_row = &py[y * w..(y + 1) * w];
            let py_prev = &py[prev * w..(prev + 1) * w];
            for (o, (a, b)) in out_row.iter_mut().zip(py_prev.iter().zip(py_row)) {
                *o += a - b;
            }
        }
    }

    /// Anisotropic total variation `‖Dθ‖₁`.
    pub fn total_variation(&self, theta: &[f64]) -> f64 {
        let mut d = vec![0.0; 2 * self.pixels()];
        self.apply(theta, &mut d);
        d.iter().map(|v| v.abs()).sum()
    }

    /// Solves `(diag I + rho DᵀD) out = rhs` through the 2D DFT.
    pub fn apply_fast_inverse(
        &self,
        rhs: &[f64],
        diag: f64,
        rho: f64,
        out: &mut [f64],
        scratch: &mut SpectralScratch,
    ) {
        debug_assert!(diag > 0.0);
        self.apply_spectral(rhs, out, scratch, |lambda| 1.0 / (diag + rho * lambda));
    }

    /// `(DᵀD)⁺ rhs`; the constant component of `rhs` is discarded.
    pub fn apply_laplacian_pinv(
        &self,
        rhs: &[f64],
        out: &mut [f64],
        scratch: &mut SpectralScratch,
    ) {
        self.apply_spectral(rhs, out, scratch, |lambda| {
            if lambda > 1e-12 {
                1.0 / lambda
            } else {
                0.0
            }
        });
    }

    /// Spectrum of `(diag I + rho DᵀD)⁻¹`, in the layout expected by [`Self::apply_inverse_spectrum`].
    pub fn inverse_spectrum(&self, diag: f64, rho: f64) -> Vec<f64> {
        self.half_eigenvalues
            .iter()
            .map(|&l| 1.0 / (diag + rho * l))
            .collect()
    }

    pub fn apply_inverse_spectrum(
        &self,
        rhs: &[f64],
        spectrum: &[f64],
        out: &mut [f64],
        scratch: &mut SpectralScratch,
    ) {
        debug_assert_eq!(spectrum.len(), self.half_eigenvalues.len());
        let mut i = 0usize;
        self.apply_spectral(rhs, out, scratch, |_| {
            let s = spectrum[i];
            i += 1;
            s
        });
    }

    /// Applies the circulant operator whose spectrum is `filter(Λ)`. The filter is
    /// evaluated once per stored half-spectrum entry, in storage order.
    pub(crate) fn apply_spectral(
        &self,
        rhs: &[f64],
        out: &mut [f64],
        scratch: &mut SpectralScratch,
        mut filter: impl FnMut(f64) -> f64,
    ) {
        let (w, h) = (self.width, self.height);
        let m = w / 2 + 1;
        debug_assert_eq!(rhs.len(), w * h);
        scratch.real.resize(w * h, 0.0);
        scratch.grid.resize(m * h, Complex64::default());
        scratch.transposed.resize(m * h, Complex64::default());
        let need = [
            self.row_fwd.get_scratch_len(),
            self.row_inv.get_scratch_len(),
            self.col_fwd.get_inplace_scratch_len(),
            self.col_inv.get_inplace_scratch_len(),
        ]
        .into_iter()
        .max()
        .unwrap_or(0);
        scratch.fft.resize(need, Complex64::default());

        scratch.real.copy_from_slice(rhs);
        for (row, spec) in scratch
            .real
            .chunks_exact_mut(w)
            .zip(scratch.grid.chunks_exact_mut(m))
        {
            self.row_fwd
                .process_with_scratch(row, spec, &mut scratch.fft)
                .expect("buffer sizes match the plan");
        }
        transpose(&scratch.grid, &mut scratch.transposed, m, h);
        self.col_fwd
            .process_with_scratch(&mut scratch.transposed, &mut scratch.fft);
        for (c, &lambda) in scratch.transposed.iter_mut().zip(&self.half_eigenvalues) {
            *c *= filter(lambda);
        }
        self.col_inv
            .process_with_scratch(&mut scratch.transposed, &mut scratch.fft);
        transpose(&scratch.transposed, &mut scratch.grid, h, m);
        let norm = 1.0 / (w * h) as f64;
        for (spec, o) in scratch
            .grid
            .chunks_exact_mut(m)
            .zip(out.chunks_exact_mut(w))
        {
            // The DC and Nyquist bins of a real signal are real; drop rounding residue.
            spec[0].im = 0.0;
            if w % 2 == 0 {
                spec[m - 1].im = 0.0;
            }
            self.row_inv
                .process_with_scratch(spec, o, &mut scratch.fft)
                .expect("buffer sizes match the plan");
            o.iter_mut().for_each(|v| *v *= norm);
        }
    }
}

/// `src` is `rows x cols` row-major; `dst` becomes `cols x rows`.
fn transpose(src: &[Complex64], dst: &mut [Complex64], cols: usize, rows: usize) {
    const BLOCK: usize = 16;
    for rb in (0..rows).step_by(BLOCK) {
        for cb in (0..cols).step_by(BLOCK) {
            for r in rb..(rb + BLOCK).min(rows) {
                for c in cb..(cb + BLOCK).min(cols) {
                    dst[c * rows + r] = src[r * cols + c];
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense_dtd(op: &DiffOperator) -> Vec<Vec<f64>> {
        let n = op.pixels();
        let mut cols = Vec::with_capacity(n);
        let mut d = vec![0.0; 2 * n];
        let mut out = vec![0.0; n];
        for i in 0..n {
            let mut e = vec![0.0; n];
            e[i] = 1.0;
            op.apply(&e, &mut d);
            op.apply_transpose(&d, &mut out);
            cols.push(out.clone());
        }
        cols
    }

    #[test]
    fn single_pixel_spectrum_is_zero() {
        let op = DiffOperator::new(1, 1);
        assert_eq!(op.eigenvalues().collect::<Vec<_>>(), vec![0.0]);
        let mut d = vec![1.0; 2];
        op.apply(&[5.0], &mut d);
        assert_eq!(d, vec![0.0, 0.0]);
    }

    #[test]
    fn constant_image_is_in_null_space() {
        let op = DiffOperator::new(7, 5);
        let mut d = vec![1.0; 70];
        op.apply(&[3.25; 35], &mut d);
        assert!(d.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn transpose_is_adjoint() {
        let op = DiffOperator::new(5, 4);
        let theta: Vec<f64> = (0..20).map(|i| ((i * 7) % 11) as f64 - 4.0).collect();
        let p: Vec<f64> = (0..40).map(|i| ((i * 5) % 13) as f64 * 0.5 - 3.0).collect();
        let mut dt = vec![0.0; 40];
        op.apply(&theta, &mut dt);
        let mut dtp = vec![0.0; 20];
        op.apply_transpose(&p, &mut dtp);
        let lhs: f64 = dt.iter().zip(&p).map(|(a, b)| a * b).sum();
        let rhs: f64 = theta.iter().zip(&dtp).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn spectral_reconstruction_matches_dense_dtd() {
        // Dense oracle: assemble DᵀD column by column from the stencil, then compare against
        // the circulant operator rebuilt from the spectrum (filter = Λ).
        let op = DiffOperator::new(8, 8);
        let dense = dense_dtd(&op);
        let n = op.pixels();
        let mut scratch = SpectralScratch::default();
        let mut col = vec![0.0; n];
        for i in 0..n {
            let mut e = vec![0.0; n];
            e[i] = 1.0;
            op.apply_spectral(&e, &mut col, &mut scratch, |l| l);
            for r in 0..n {
                assert!((col[r] - dense[i][r]).abs() < 1e-10, "entry ({r},{i})");
            }
        }
    }

    #[test]
    fn fast_inverse_of_constant_is_scaled_constant() {
        let op = DiffOperator::new(6, 9);
        let mut out = vec![0.0; 54];
        let mut scratch = SpectralScratch::default();
        op.apply_fast_inverse(&[2.0; 54], 4.0, 3.0, &mut out, &mut scratch);
        assert!(out.iter().all(|v| (v - 0.5).abs() < 1e-12));
    }

    #[test]
    fn fast_inverse_without_coupling_is_diagonal() {
        let op = DiffOperator::new(4, 3);
        let rhs: Vec<f64> = (0..12).map(|i| i as f64 - 5.5).collect();
        let mut out = vec![0.0; 12];
        op.apply_fast_inverse(&rhs, 2.5, 0.0, &mut out, &mut SpectralScratch::default());
        for (o, r) in out.iter().zip(&rhs) {
            assert!((o - r / 2.5).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_row_grid_works() {
        let op = DiffOperator::new(10, 1);
        let theta: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let mut d = vec![0.0; 20];
        op.apply(&theta, &mut d);
        assert_eq!(d[0], 1.0);
        assert_eq!(d[9], -9.0);
        assert!(d[10..].iter().all(|&v| v == 0.0));
    }

    proptest::proptest! {
        #[test]
        fn fast_inverse_is_self_adjoint_and_positive(
            w in 1usize..9,
            h in 1usize..9,
            diag in 0.1..5.0f64,
            rho in 0.0..5.0f64,
            seed in proptest::collection::vec(-1.0..1.0f64, 128),
        ) {
            let n = w * h;
            let (a, b) = (&seed[..n], &seed[64..64 + n]);
            let op = DiffOperator::new(w, h);
            let mut scratch = SpectralScratch::default();
            let (mut ia, mut ib) = (vec![0.0; n], vec![0.0; n]);
            op.apply_fast_inverse(a, diag, rho, &mut ia, &mut scratch);
            op.apply_fast_inverse(b, diag, rho, &mut ib, &mut scratch);
            let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>();
            proptest::prop_assert!((dot(&ia, b) - dot(a, &ib)).abs() < 1e-10);
            if a.iter().any(|v| *v != 0.0) {
                proptest::prop_assert!(dot(&ia, a) > 0.0);
            }
        }
    }
}
