//! Eigensystems of the circular filtering operators on a 2D DFT grid.
//!
//! Every operator handled here (uniform blur `T`, the scaled gradient stack
//! `D = sqrt(tau) [grad_h; grad_v]`, the pre-filter `F`) is a periodic filter,
//! so it is diagonal in the unitary 2D Fourier basis. Frequencies are flattened
//! row-major: `p = p1 * n2 + p2`.
//!
//! Closed-form spectra are evaluated on the folded index `min(q, n - q)`, which
//! makes them bitwise symmetric under `p -> -p`.

use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::Array2;
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Result, StabError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FrequencyGrid {
    pub n1: usize,
    pub n2: usize,
}

impl FrequencyGrid {
    pub fn new(n1: usize, n2: usize) -> Result<Self> {
        if n1 == 0 || n2 == 0 {
            return Err(StabError::InvalidParameter(format!(
                "grid dimensions must be positive, got {n1}x{n2}"
            )));
        }
        Ok(Self { n1, n2 })
    }

    /// Number of frequencies `P = n1 * n2`.
    pub fn len(&self) -> usize {
        self.n1 * self.n2
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, p1: usize, p2: usize) -> usize {
        debug_assert!(p1 < self.n1 && p2 < self.n2);
        p1 * self.n2 + p2
    }

    pub fn coords(&self, p: usize) -> (usize, usize) {
        (p / self.n2, p % self.n2)
    }

    /// Flat index of the conjugate frequency `-p`.
    pub fn conjugate(&self, p: usize) -> usize {
        let (p1, p2) = self.coords(p);
        self.index((self.n1 - p1) % self.n1, (self.n2 - p2) % self.n2)
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n1, self.n2)
    }
}

fn fold(q: usize, n: usize) -> usize {
    q.min(n - q)
}

/// Spectra of the degradation and regularization operators plus the norm weights.
///
/// `beta_d_unit` is the `tau = 1` gradient spectrum; layer `n` uses
/// `tau_n * beta_d_unit[p]`.
#[derive(Debug, Clone)]
pub struct EigenSystem {
    pub grid: FrequencyGrid,
    pub blur_k: usize,
    pub beta_t: Vec<f64>,
    pub beta_d_unit: Vec<f64>,
    pub t_eig: Vec<Complex64>,
    pub weights: Vec<f64>,
}

impl EigenSystem {
    /// Uniform `k x k` blur, forward-difference gradient and weights `beta_t^2 + epsilon`.
    pub fn new(grid: FrequencyGrid, blur_k: usize, epsilon: f64) -> Result<Self> {
        let (t_eig, beta_t) = uniform_blur_eigs(blur_k, grid)?;
        let beta_d_unit = gradient_eigs(1.0, grid)?;
        let weights = norm_weights(&beta_t, epsilon)?;
        Self::from_parts(grid, blur_k, beta_t, beta_d_unit, t_eig, weights)
    }

    pub fn from_parts(
        grid: FrequencyGrid,
        blur_k: usize,
        beta_t: Vec<f64>,
        beta_d_unit: Vec<f64>,
        t_eig: Vec<Complex64>,
        weights: Vec<f64>,
    ) -> Result<Self> {
        let p = grid.len();
        if beta_t.len() != p || beta_d_unit.len() != p || t_eig.len() != p || weights.len() != p {
            return Err(StabError::SizeMismatch(format!(
                "eigensystem arrays must all have length {p}"
            )));
        }
        for q in 0..p {
            let (bt, bd, w) = (beta_t[q], beta_d_unit[q], weights[q]);
            if !(bt.is_finite() && bt >= 0.0 && bd.is_finite() && bd >= 0.0) {
                return Err(StabError::InvalidParameter(format!(
                    "eigenvalues must be finite and nonnegative (p={q}: beta_t={bt}, beta_d={bd})"
                )));
            }
            if !(w.is_finite() && w > 0.0) {
                return Err(StabError::InvalidParameter(format!(
                    "weights must be finite and positive (p={q}: {w})"
                )));
            }
            let mag = t_eig[q].norm_sqr();
            if (mag - bt).abs() > 1e-12 * bt.max(1e-300) && (mag - bt).abs() > 1e-15 {
                return Err(StabError::NumericalInconsistency(format!(
                    "|t_eig|^2 = {mag} differs from beta_t = {bt} at p={q}"
                )));
            }
        }
        Ok(Self {
            grid,
            blur_k,
            beta_t,
            beta_d_unit,
            t_eig,
            weights,
        })
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    /// Spectrum of `D_n^* D_n` for a given scale `tau`.
    pub fn beta_d(&self, tau: f64) -> Vec<f64> {
        self.beta_d_unit.iter().map(|b| tau * b).collect()
    }

    /// `sup_p (beta_t + tau * beta_d_unit)`.
    pub fn sup_gram(&self, tau: f64) -> f64 {
        self.beta_t
            .iter()
            .zip(&self.beta_d_unit)
            .map(|(t, d)| t + tau * d)
            .fold(0.0, f64::max)
    }
}

/// Spatial `k x k` uniform kernel, circularly centered on pixel (0, 0).
pub fn uniform_blur_kernel(k: usize, grid: FrequencyGrid) -> Result<Array2<f64>> {
    check_kernel(k, grid)?;
    let r = (k / 2) as isize;
    let w = 1.0 / (k * k) as f64;
    let mut h = Array2::zeros(grid.shape());
    for di in -r..=r {
        for dj in -r..=r {
            let i = di.rem_euclid(grid.n1 as isize) as usize;
            let j = dj.rem_euclid(grid.n2 as isize) as usize;
            h[[i, j]] += w;
        }
    }
    Ok(h)
}

fn check_kernel(k: usize, grid: FrequencyGrid) -> Result<()> {
    if k == 0 || k.is_multiple_of(2) {
        return Err(StabError::InvalidKernel(format!(
            "blur size must be odd and positive, got {k}"
        )));
    }
    if k > grid.n1.min(grid.n2) {
        return Err(StabError::InvalidKernel(format!(
            "blur size {k} exceeds grid {}x{}",
            grid.n1, grid.n2
        )));
    }
    Ok(())
}

/// 1D response of the centered box `(1, ..., 1) / k` at frequency index `q` of `n`.
fn box_response(k: usize, q: usize, n: usize) -> f64 {
    let q = fold(q, n);
    let r = k / 2;
    let omega = 2.0 * PI * q as f64 / n as f64;
    let mut s = 1.0;
    for j in 1..=r {
        s += 2.0 * (omega * j as f64).cos();
    }
    s / k as f64
}

/// Eigenvalues of the centered `k x k` uniform blur and of `T^* T`.
pub fn uniform_blur_eigs(k: usize, grid: FrequencyGrid) -> Result<(Vec<Complex64>, Vec<f64>)> {
    check_kernel(k, grid)?;
    let h1: Vec<f64> = (0..grid.n1).map(|q| box_response(k, q, grid.n1)).collect();
    let h2: Vec<f64> = (0..grid.n2).map(|q| box_response(k, q, grid.n2)).collect();
    let mut t_eig = Vec::with_capacity(grid.len());
    let mut beta_t = Vec::with_capacity(grid.len());
    for a in &h1 {
        for b in &h2 {
            let t = a * b;
            t_eig.push(Complex64::new(t, 0.0));
            beta_t.push(t * t);
        }
    }
    Ok((t_eig, beta_t))
}

/// Spectrum of `D^* D` for `D = sqrt(tau) [grad_h; grad_v]` with periodic forward differences.
pub fn gradient_eigs(tau: f64, grid: FrequencyGrid) -> Result<Vec<f64>> {
    if !(tau >= 0.0 && tau.is_finite()) {
        return Err(StabError::InvalidParameter(format!(
            "tau must be finite and nonnegative, got {tau}"
        )));
    }
    let s = |q: usize, n: usize| {
        let v = (PI * fold(q, n) as f64 / n as f64).sin();
        4.0 * v * v
    };
    let g1: Vec<f64> = (0..grid.n1).map(|q| s(q, grid.n1)).collect();
    let g2: Vec<f64> = (0..grid.n2).map(|q| s(q, grid.n2)).collect();
    let mut out = Vec::with_capacity(grid.len());
    for a in &g1 {
        for b in &g2 {
            out.push(tau * (a + b));
        }
    }
    Ok(out)
}

/// Weights `beta_t^2 + epsilon` of the bias-channel norm.
pub fn norm_weights(beta_t: &[f64], epsilon: f64) -> Result<Vec<f64>> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(StabError::InvalidParameter(format!(
            "weight floor must be positive, got {epsilon}"
        )));
    }
    Ok(beta_t.iter().map(|b| b * b + epsilon).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub enum PreFilterSpec {
    /// `x0 = 0`
    Zero,
    /// `x0 = b0`
    Identity,
    /// `F T^*` acts as a Wiener filter with prior ratio `sigma`.
    Wiener { sigma: f64 },
    Custom(Vec<Complex64>),
}

impl PreFilterSpec {
    pub fn constant(value: f64) -> Self {
        PreFilterSpec::Custom(Vec::from([Complex64::new(value, 0.0)]))
    }
}

/// Frequency response `phi_p` of the pre-filter.
///
/// A one-element `Custom` array is broadcast to every frequency.
pub fn prefilter_eigs(spec: &PreFilterSpec, eig: &EigenSystem) -> Result<Vec<Complex64>> {
    let p = eig.len();
    match spec {
        PreFilterSpec::Zero => Ok(vec![Complex64::new(0.0, 0.0); p]),
        PreFilterSpec::Identity => Ok(vec![Complex64::new(1.0, 0.0); p]),
        PreFilterSpec::Wiener { sigma } => {
            if !(*sigma > 0.0 && sigma.is_finite()) {
                return Err(StabError::InvalidParameter(format!(
                    "wiener sigma must be positive, got {sigma}"
                )));
            }
            Ok(eig
                .beta_t
                .iter()
                .map(|b| Complex64::new(1.0 / (b + sigma), 0.0))
                .collect())
        }
        PreFilterSpec::Custom(phi) if phi.len() == 1 => Ok(vec![phi[0]; p]),
        PreFilterSpec::Custom(phi) => {
            if phi.len() != p {
                return Err(StabError::SizeMismatch(format!(
                    "custom pre-filter has {} entries, grid has {p}",
                    phi.len()
                )));
            }
            Ok(phi.clone())
        }
    }
}

/// Unitary 2D FFT on a fixed grid.
#[derive(Clone)]
pub struct Fft2 {
    grid: FrequencyGrid,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
    scale: f64,
}

impl std::fmt::Debug for Fft2 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Fft2").field("grid", &self.grid).finish()
    }
}

impl Fft2 {
    pub fn new(grid: FrequencyGrid) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            grid,
            row_fwd: planner.plan_fft_forward(grid.n2),
            row_inv: planner.plan_fft_inverse(grid.n2),
            col_fwd: planner.plan_fft_forward(grid.n1),
            col_inv: planner.plan_fft_inverse(grid.n1),
            scale: 1.0 / (grid.len() as f64).sqrt(),
        }
    }

    pub fn grid(&self) -> FrequencyGrid {
        self.grid
    }

    fn transform(&self, data: &mut [Complex64], inverse: bool) {
        let (n1, n2) = self.grid.shape();
        debug_assert_eq!(data.len(), n1 * n2);
        let (rows, cols) = if inverse {
            (&self.row_inv, &self.col_inv)
        } else {
            (&self.row_fwd, &self.col_fwd)
        };
        rows.process(data);
        let mut column = vec![Complex64::new(0.0, 0.0); n1];
        for j in 0..n2 {
            for i in 0..n1 {
                column[i] = data[i * n2 + j];
            }
            cols.process(&mut column);
            for i in 0..n1 {
                data[i * n2 + j] = column[i] * self.scale;
            }
        }
    }

    pub fn forward_in_place(&self, data: &mut [Complex64]) {
        self.transform(data, false);
    }

    pub fn inverse_in_place(&self, data: &mut [Complex64]) {
        self.transform(data, true);
    }

    /// Spectrum of a real image, flattened row-major.
    pub fn forward_real(&self, x: &Array2<f64>) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.forward_in_place(&mut buf);
        buf
    }

    /// Inverse transform of a flattened spectrum; returns the complex image.
    pub fn inverse(&self, spectrum: &[Complex64]) -> Vec<Complex64> {
        let mut buf = spectrum.to_vec();
        self.inverse_in_place(&mut buf);
        buf
    }
}
