//! The unrolled forward-backward network.
//!
//! Layer `n` computes `x_n = R_n(W_n x_{n-1} + V~_n b0)` where `W_n` is diagonal in
//! the DFT basis (multiplication by `beta_p^{(n)}`), `V~_n` is the scalar
//! `lambda_n / (1 + lambda_n chi_n) * eta_{1,n-1}` and `R_n` is a separable
//! proximity operator applied pixelwise.

use ndarray::Array2;
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::coeffs::LayerSchedule;
use crate::error::{Result, StabError};
use crate::spectral::{prefilter_eigs, EigenSystem, Fft2, FrequencyGrid, PreFilterSpec};

/// Relative size of imaginary residue tolerated after an inverse transform.
pub const IMAG_TOL: f64 = 1e-10;

/// A real image on the periodic grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalGrid {
    pub values: Array2<f64>,
}

impl SignalGrid {
    pub fn new(values: Array2<f64>) -> Self {
        Self { values }
    }

    pub fn zeros(grid: FrequencyGrid) -> Self {
        Self::new(Array2::zeros(grid.shape()))
    }

    pub fn from_flat(grid: FrequencyGrid, data: Vec<f64>) -> Result<Self> {
        Array2::from_shape_vec(grid.shape(), data)
            .map(Self::new)
            .map_err(|e| StabError::SizeMismatch(e.to_string()))
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn as_slice(&self) -> &[f64] {
        self.values.as_slice().expect("signal grids are contiguous")
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        self.values.as_slice_mut().expect("signal grids are contiguous")
    }

    pub fn norm(&self) -> f64 {
        self.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Unitary spectrum, flattened row-major.
    pub fn spectrum(&self, fft: &Fft2) -> Vec<Complex64> {
        fft.forward_real(&self.values)
    }

    /// Real image from a spectrum; fails when the imaginary part is not negligible.
    pub fn from_spectrum(fft: &Fft2, spectrum: &[Complex64]) -> Result<Self> {
        let mut buf = spectrum.to_vec();
        fft.inverse_in_place(&mut buf);
        let data = real_part(&buf)?;
        Self::from_flat(fft.grid(), data)
    }
}

fn real_part(buf: &[Complex64]) -> Result<Vec<f64>> {
    let mut max_re = 0.0f64;
    let mut max_im = 0.0f64;
    for c in buf {
        max_re = max_re.max(c.re.abs());
        max_im = max_im.max(c.im.abs());
    }
    if max_im > IMAG_TOL * max_re.max(1.0) {
        return Err(StabError::NumericalInconsistency(format!(
            "imaginary residue {max_im:e} after inverse transform"
        )));
    }
    Ok(buf.iter().map(|c| c.re).collect())
}

/// Proximity operator of `gamma g0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ProxSpec {
    /// `g0 = 0`
    Identity,
    /// `g0 = ||.||_1`, soft-thresholding at `gamma`
    L1,
    /// indicator of the nonnegative orthant
    NonnegProjection,
    /// indicator of `[lo, hi]^N`
    Box { lo: f64, hi: f64 },
}

impl ProxSpec {
    pub fn validate(&self) -> Result<()> {
        if let ProxSpec::Box { lo, hi } = *self {
            if !(lo < hi) {
                return Err(StabError::InvalidParameter(format!(
                    "box projection needs lo < hi, got [{lo}, {hi}]"
                )));
            }
        }
        Ok(())
    }

    /// `g0(x)`, with `+inf` for points outside the constraint set.
    pub fn penalty(&self, x: &[f64]) -> f64 {
        match *self {
            ProxSpec::Identity => 0.0,
            ProxSpec::L1 => x.iter().map(|v| v.abs()).sum(),
            ProxSpec::NonnegProjection => {
                if x.iter().all(|&v| v >= 0.0) {
                    0.0
                } else {
                    f64::INFINITY
                }
            }
            ProxSpec::Box { lo, hi } => {
                if x.iter().all(|&v| (lo..=hi).contains(&v)) {
                    0.0
                } else {
                    f64::INFINITY
                }
            }
        }
    }

    /// Applies the proximity operator with step `gamma` in place.
    pub fn apply_in_place(&self, gamma: f64, x: &mut [f64]) {
        match *self {
            ProxSpec::Identity => {}
            ProxSpec::L1 => {
                for v in x {
                    *v = v.signum() * (v.abs() - gamma).max(0.0);
                }
            }
            ProxSpec::NonnegProjection => {
                for v in x {
                    *v = v.max(0.0);
                }
            }
            ProxSpec::Box { lo, hi } => {
                for v in x {
                    *v = v.clamp(lo, hi);
                }
            }
        }
    }
}

/// `R_n x`
pub fn apply_prox(spec: &ProxSpec, schedule: &LayerSchedule, n: usize, x: &SignalGrid) -> SignalGrid {
    let mut out = x.clone();
    spec.apply_in_place(schedule.prox_step(n), out.as_mut_slice());
    out
}

/// State of the virtual network.
#[derive(Debug, Clone, PartialEq)]
pub struct VirtualState {
    pub x: SignalGrid,
    pub b: SignalGrid,
}

/// A configured network: schedule, spectra, activation and a transform plan.
#[derive(Debug, Clone)]
pub struct Network<'a> {
    pub schedule: &'a LayerSchedule,
    pub eig: &'a EigenSystem,
    pub prox: ProxSpec,
    fft: Fft2,
    layer_betas: Vec<Vec<f64>>,
}

impl<'a> Network<'a> {
    pub fn new(schedule: &'a LayerSchedule, eig: &'a EigenSystem, prox: ProxSpec) -> Result<Self> {
        prox.validate()?;
        let layer_betas = crate::coeffs::beta_layer(schedule, eig);
        Ok(Self {
            schedule,
            eig,
            prox,
            fft: Fft2::new(eig.grid),
            layer_betas,
        })
    }

    pub fn m(&self) -> usize {
        self.schedule.m()
    }

    pub fn fft(&self) -> &Fft2 {
        &self.fft
    }

    fn check(&self, s: &SignalGrid) -> Result<()> {
        if s.shape() != self.eig.grid.shape() {
            return Err(StabError::SizeMismatch(format!(
                "signal is {:?}, eigensystem grid is {:?}",
                s.shape(),
                self.eig.grid.shape()
            )));
        }
        Ok(())
    }

    /// `R_n(W_n x + c b)` for a bias scale `c`, reusing `buf` for the spectrum.
    fn affine_prox(
        &self,
        n: usize,
        x: &[f64],
        b: &[f64],
        c: f64,
        buf: &mut Vec<Complex64>,
        out: &mut [f64],
    ) -> Result<()> {
        buf.clear();
        buf.extend(x.iter().map(|&v| Complex64::new(v, 0.0)));
        self.fft.forward_in_place(buf);
        for (z, &beta) in buf.iter_mut().zip(&self.layer_betas[n - 1]) {
            *z *= beta;
        }
        self.fft.inverse_in_place(buf);
        let re = real_part(buf)?;
        for ((o, r), &bv) in out.iter_mut().zip(re).zip(b) {
            *o = r + c * bv;
        }
        self.prox.apply_in_place(self.schedule.prox_step(n), out);
        Ok(())
    }

    /// One layer of the network with fixed bias `b0`.
    pub fn layer_forward(&self, n: usize, x: &SignalGrid, b0: &SignalGrid) -> Result<SignalGrid> {
        if n == 0 || n > self.m() {
            return Err(StabError::IndexOutOfRange(format!("layer {n} not in 1..={}", self.m())));
        }
        self.check(x)?;
        self.check(b0)?;
        let c = self.schedule.bias_gain(n) * self.schedule.eta_prod_unchecked(1, n - 1);
        let mut out = SignalGrid::zeros(self.eig.grid);
        let mut buf = Vec::with_capacity(self.eig.len());
        self.affine_prox(n, x.as_slice(), b0.as_slice(), c, &mut buf, out.as_mut_slice())?;
        Ok(out)
    }

    /// `x_0, ..., x_m`.
    pub fn trajectory(&self, x0: &SignalGrid, b0: &SignalGrid) -> Result<Vec<SignalGrid>> {
        self.check(x0)?;
        self.check(b0)?;
        let mut traj = vec![x0.clone()];
        let mut buf = Vec::with_capacity(self.eig.len());
        for n in 1..=self.m() {
            let c = self.schedule.bias_gain(n) * self.schedule.eta_prod_unchecked(1, n - 1);
            let mut out = SignalGrid::zeros(self.eig.grid);
            let prev = traj.last().expect("nonempty");
            self.affine_prox(n, prev.as_slice(), b0.as_slice(), c, &mut buf, out.as_mut_slice())?;
            traj.push(out);
        }
        Ok(traj)
    }

    /// `x_m`.
    pub fn run(&self, x0: &SignalGrid, b0: &SignalGrid) -> Result<SignalGrid> {
        self.check(x0)?;
        self.check(b0)?;
        let mut x = x0.clone();
        let mut next = SignalGrid::zeros(self.eig.grid);
        let mut buf = Vec::with_capacity(self.eig.len());
        for n in 1..=self.m() {
            let c = self.schedule.bias_gain(n) * self.schedule.eta_prod_unchecked(1, n - 1);
            self.affine_prox(n, x.as_slice(), b0.as_slice(), c, &mut buf, next.as_mut_slice())?;
            std::mem::swap(&mut x, &mut next);
        }
        Ok(x)
    }

    /// Virtual network on `z = (x, b)`: `x_n = R_n(W_n x + gain_n b)`, `b_n = eta_n b`.
    pub fn run_virtual_trajectory(&self, z0: &VirtualState) -> Result<Vec<VirtualState>> {
        self.check(&z0.x)?;
        self.check(&z0.b)?;
        let mut traj = vec![z0.clone()];
        let mut buf = Vec::with_capacity(self.eig.len());
        for n in 1..=self.m() {
            let prev = traj.last().expect("nonempty");
            let mut x = SignalGrid::zeros(self.eig.grid);
            self.affine_prox(
                n,
                prev.x.as_slice(),
                prev.b.as_slice(),
                self.schedule.bias_gain(n),
                &mut buf,
                x.as_mut_slice(),
            )?;
            let eta = self.schedule.eta[n - 1];
            let b = SignalGrid::new(prev.b.values.mapv(|v| eta * v));
            traj.push(VirtualState { x, b });
        }
        Ok(traj)
    }

    pub fn run_virtual(&self, z0: &VirtualState) -> Result<VirtualState> {
        Ok(self.run_virtual_trajectory(z0)?.pop().expect("nonempty"))
    }

    /// `F b0` with `F` acting as multiplication by `phi_p`.
    pub fn apply_prefilter(&self, phi: &[Complex64], b0: &SignalGrid) -> Result<SignalGrid> {
        if phi.len() != self.eig.len() {
            return Err(StabError::SizeMismatch(format!(
                "pre-filter has {} entries, grid has {}",
                phi.len(),
                self.eig.len()
            )));
        }
        let mut spec = b0.spectrum(&self.fft);
        for (z, f) in spec.iter_mut().zip(phi) {
            *z *= f;
        }
        SignalGrid::from_spectrum(&self.fft, &spec)
    }

    /// Network with `x0 = F b0`.
    pub fn run_single_input(&self, b0: &SignalGrid, phi: &[Complex64]) -> Result<SignalGrid> {
        if self.m() < 2 {
            return Err(StabError::UnsupportedConfiguration(
                "single-input network needs at least two layers".into(),
            ));
        }
        self.check(b0)?;
        let x0 = self.apply_prefilter(phi, b0)?;
        self.run(&x0, b0)
    }
}

pub fn layer_forward(
    x: &SignalGrid,
    b0: &SignalGrid,
    schedule: &LayerSchedule,
    eig: &EigenSystem,
    spec: ProxSpec,
    n: usize,
) -> Result<SignalGrid> {
    Network::new(schedule, eig, spec)?.layer_forward(n, x, b0)
}

pub fn run_network(
    x0: &SignalGrid,
    b0: &SignalGrid,
    schedule: &LayerSchedule,
    eig: &EigenSystem,
    spec: ProxSpec,
) -> Result<SignalGrid> {
    Network::new(schedule, eig, spec)?.run(x0, b0)
}

pub fn run_virtual(
    z0: &VirtualState,
    schedule: &LayerSchedule,
    eig: &EigenSystem,
    spec: ProxSpec,
) -> Result<VirtualState> {
    Network::new(schedule, eig, spec)?.run_virtual(z0)
}

pub fn run_single_input(
    b0: &SignalGrid,
    prefilter: &PreFilterSpec,
    schedule: &LayerSchedule,
    eig: &EigenSystem,
    spec: ProxSpec,
) -> Result<SignalGrid> {
    let phi = prefilter_eigs(prefilter, eig)?;
    Network::new(schedule, eig, spec)?.run_single_input(b0, &phi)
}

/// `T x` computed spectrally.
pub fn apply_blur(fft: &Fft2, eig: &EigenSystem, x: &SignalGrid, adjoint: bool) -> Result<SignalGrid> {
    let mut spec = x.spectrum(fft);
    for (z, t) in spec.iter_mut().zip(&eig.t_eig) {
        *z *= if adjoint { t.conj() } else { *t };
    }
    SignalGrid::from_spectrum(fft, &spec)
}

/// `y = T xbar + w` with i.i.d. `N(0, sigma^2)` noise, and `b0 = T^* y`.
pub fn make_observation(
    xbar: &SignalGrid,
    eig: &EigenSystem,
    noise_sigma: f64,
    seed: u64,
) -> Result<(SignalGrid, SignalGrid)> {
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(StabError::InvalidParameter(format!(
            "noise level must be nonnegative, got {noise_sigma}"
        )));
    }
    if xbar.shape() != eig.grid.shape() {
        return Err(StabError::SizeMismatch("image and eigensystem grids differ".into()));
    }
    let fft = Fft2::new(eig.grid);
    let mut y = apply_blur(&fft, eig, xbar, false)?;
    if noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, noise_sigma).map_err(|e| StabError::InvalidParameter(e.to_string()))?;
        for v in y.as_mut_slice() {
            *v += normal.sample(&mut rng);
        }
    }
    let b0 = apply_blur(&fft, eig, &y, true)?;
    Ok((y, b0))
}

/// `1/2 ||T x - y||^2 + tau/2 ||D x||^2 + mu (g0(x) + chi_bar/2 ||x||^2)`.
pub fn objective_value(
    x: &SignalGrid,
    y: &SignalGrid,
    eig: &EigenSystem,
    tau: f64,
    mu: f64,
    chi_bar: f64,
    spec: &ProxSpec,
) -> Result<f64> {
    if x.shape() != eig.grid.shape() || y.shape() != eig.grid.shape() {
        return Err(StabError::SizeMismatch("signal and eigensystem grids differ".into()));
    }
    let fft = Fft2::new(eig.grid);
    let xs = x.spectrum(&fft);
    let ys = y.spectrum(&fft);
    let mut fit = 0.0;
    let mut reg = 0.0;
    for p in 0..eig.len() {
        fit += (eig.t_eig[p] * xs[p] - ys[p]).norm_sqr();
        reg += eig.beta_d_unit[p] * xs[p].norm_sqr();
    }
    let g0 = spec.penalty(x.as_slice());
    if g0.is_infinite() {
        return Ok(f64::INFINITY);
    }
    let value = 0.5 * fit + 0.5 * tau * reg + mu * (g0 + 0.5 * chi_bar * x.norm().powi(2));
    Ok(value)
}
