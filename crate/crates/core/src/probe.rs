//! Independent checks of the certificates: dense operators on tiny grids,
//! power iteration, closed-form 2x2 eigenvalues and Monte-Carlo Lipschitz ratios.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::bounds::gamma_alpha;
use crate::coeffs::LayerSchedule;
use crate::error::{Result, StabError};
use crate::network::{Network, SignalGrid, VirtualState};
use crate::spectral::{uniform_blur_kernel, EigenSystem, Fft2, FrequencyGrid};

/// Largest number of pixels accepted by the dense assembly (8 x 8).
pub const DENSE_MAX_PIXELS: usize = 64;

/// Largest eigenvalue of `[[beta^2, s], [s, eta^2 + w beta~^2]]` with `s = sqrt(w) beta beta~`.
///
/// Uses `mean + hypot(half difference, off-diagonal)`, which avoids the cancellation
/// of the expanded discriminant.
pub fn two_by_two_oracle(beta: f64, beta_tilde: f64, eta: f64, weight: f64) -> f64 {
    let a = beta * beta;
    let c = eta * eta + weight * beta_tilde * beta_tilde;
    let b = weight.sqrt() * beta * beta_tilde;
    0.5 * (a + c) + (0.5 * (a - c)).hypot(b)
}

/// Top eigenpair of a symmetric 2x2 matrix `[[a, b], [b, c]]`.
fn top_eigvec_2x2(a: f64, b: f64, c: f64) -> (f64, [f64; 2]) {
    let nu = 0.5 * (a + c) + (0.5 * (a - c)).hypot(b);
    let v1 = [b, nu - a];
    let v2 = [nu - c, b];
    let n1 = v1[0].hypot(v1[1]);
    let n2 = v2[0].hypot(v2[1]);
    let v = if n1 >= n2 && n1 > 0.0 {
        [v1[0] / n1, v1[1] / n1]
    } else if n2 > 0.0 {
        [v2[0] / n2, v2[1] / n2]
    } else if a >= c {
        [1.0, 0.0]
    } else {
        [0.0, 1.0]
    };
    (nu, v)
}

// ---------------------------------------------------------------------------
// Dense operators
// ---------------------------------------------------------------------------

/// Naive unitary DFT matrix on a grid, row `p`, column `k`, both flattened row-major.
pub fn dft_matrix(grid: FrequencyGrid) -> Vec<Vec<Complex64>> {
    let (n1, n2) = grid.shape();
    let scale = 1.0 / (grid.len() as f64).sqrt();
    (0..grid.len())
        .map(|p| {
            let (p1, p2) = grid.coords(p);
            (0..grid.len())
                .map(|k| {
                    let (k1, k2) = grid.coords(k);
                    let phase = -2.0 * std::f64::consts::PI
                        * ((p1 * k1) as f64 / n1 as f64 + (p2 * k2) as f64 / n2 as f64);
                    Complex64::from_polar(scale, phase)
                })
                .collect()
        })
        .collect()
}

/// Real matrix `F^* diag(d) F`; `d` must be symmetric under `p -> -p`.
fn spectral_multiplier(grid: FrequencyGrid, f: &[Vec<Complex64>], d: &[f64]) -> DMatrix<f64> {
    let n = grid.len();
    DMatrix::from_fn(n, n, |r, c| {
        let mut acc = Complex64::new(0.0, 0.0);
        for p in 0..n {
            acc += f[p][r].conj() * d[p] * f[p][c];
        }
        acc.re
    })
}

/// Circulant convolution matrix of the blur kernel.
pub fn dense_blur(grid: FrequencyGrid, blur_k: usize) -> Result<DMatrix<f64>> {
    let kernel = uniform_blur_kernel(blur_k, grid)?;
    let (n1, n2) = grid.shape();
    Ok(DMatrix::from_fn(grid.len(), grid.len(), |r, c| {
        let (i1, i2) = grid.coords(r);
        let (j1, j2) = grid.coords(c);
        kernel[[(i1 + n1 - j1) % n1, (i2 + n2 - j2) % n2]]
    }))
}

/// Stacked horizontal and vertical forward differences (2N x N).
pub fn dense_gradient(grid: FrequencyGrid) -> DMatrix<f64> {
    let (n1, n2) = grid.shape();
    let n = grid.len();
    let mut d = DMatrix::zeros(2 * n, n);
    for r in 0..n {
        let (i, j) = grid.coords(r);
        d[(r, grid.index(i, (j + 1) % n2))] += 1.0;
        d[(r, r)] -= 1.0;
        d[(n + r, grid.index((i + 1) % n1, j))] += 1.0;
        d[(n + r, r)] -= 1.0;
    }
    d
}

/// Layer operators of the virtual network assembled as dense matrices.
///
/// Coordinates are `(x, c)` with `b = Omega^{1/2} c`, so the Euclidean norm of
/// `(x, c)` is the weighted product norm of `(x, b)`.
#[derive(Debug, Clone)]
pub struct DenseModel {
    pub n: usize,
    pub layers: Vec<DMatrix<f64>>,
}

fn check_dense_size(grid: FrequencyGrid) -> Result<()> {
    if grid.len() > DENSE_MAX_PIXELS {
        return Err(StabError::ResourceGuard(format!(
            "dense assembly limited to {DENSE_MAX_PIXELS} pixels, grid has {}",
            grid.len()
        )));
    }
    Ok(())
}

impl DenseModel {
    pub fn new(schedule: &LayerSchedule, eig: &EigenSystem) -> Result<Self> {
        let grid = eig.grid;
        check_dense_size(grid)?;
        let n = grid.len();
        let t = dense_blur(grid, eig.blur_k)?;
        let ttt = t.transpose() * &t;
        let d = dense_gradient(grid);
        let dtd = d.transpose() * &d;
        let f = dft_matrix(grid);
        let sqrt_w: Vec<f64> = eig.weights.iter().map(|w| w.sqrt()).collect();
        let omega_half = spectral_multiplier(grid, &f, &sqrt_w);
        let id = DMatrix::<f64>::identity(n, n);
        let layers = (1..=schedule.m())
            .map(|k| {
                let lambda = schedule.lambda[k - 1];
                let w = (&id - (&ttt + &dtd * schedule.tau[k - 1]) * lambda)
                    / (1.0 + lambda * schedule.chi(k));
                let mut u = DMatrix::zeros(2 * n, 2 * n);
                u.view_mut((0, 0), (n, n)).copy_from(&w);
                u.view_mut((0, n), (n, n)).copy_from(&(&omega_half * schedule.bias_gain(k)));
                u.view_mut((n, n), (n, n)).copy_from(&(&id * schedule.eta[k - 1]));
                u
            })
            .collect();
        Ok(Self { n, layers })
    }

    /// `U_n ... U_i`, optionally with the bias output rows zeroed.
    pub fn segment(&self, i: usize, n: usize, with_bias: bool) -> Result<DMatrix<f64>> {
        let m = self.layers.len();
        if i == 0 || i > n || n > m {
            return Err(StabError::IndexOutOfRange(format!(
                "segment ({i}, {n}) needs 1 <= i <= n <= {m}"
            )));
        }
        let mut prod = self.layers[i - 1].clone();
        for k in i + 1..=n {
            prod = &self.layers[k - 1] * prod;
        }
        if !with_bias {
            let dim = self.n;
            prod.view_mut((dim, 0), (dim, 2 * dim)).fill(0.0);
        }
        Ok(prod)
    }
}

/// Dense `U_n o ... o U_i` in weighted coordinates; `with_bias = false` keeps only the x output.
pub fn dense_operator(
    schedule: &LayerSchedule,
    eig: &EigenSystem,
    i: usize,
    n: usize,
    with_bias: bool,
) -> Result<DMatrix<f64>> {
    DenseModel::new(schedule, eig)?.segment(i, n, with_bias)
}

/// Spectral norm and top right singular vector by power iteration on `M^T M`.
#[derive(Debug, Clone)]
pub struct PowerResult {
    pub norm: f64,
    pub vector: DVector<f64>,
    pub iterations: usize,
}

/// Number of repeated squarings of `M^T M` before iterating.
///
/// Singular values of the layer operators come in tight clusters (relative gaps
/// of 1e-7 are common), where plain power iteration stalls far from the top
/// value. Iterating with `(M^T M)^(2^k)` raises the gap ratio to the `2^k`-th
/// power; the Rayleigh quotient is always taken with `M^T M` itself.
const SQUARINGS: usize = 12;

pub fn power_iteration(m: &DMatrix<f64>, seed: u64) -> PowerResult {
    const MAX_ITER: usize = 10_000;
    let g = m.transpose() * m;
    let dim = g.ncols();
    let mut h = g.clone();
    for _ in 0..SQUARINGS {
        let scale = h.amax();
        if scale == 0.0 {
            break;
        }
        h /= scale;
        h = &h * &h;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = DVector::from_fn(dim, |_, _| StandardNormal.sample(&mut rng));
    v /= v.norm();
    let mut rho = 0.0;
    let mut iterations = 0;
    for it in 1..=MAX_ITER {
        iterations = it;
        let gv = &g * &v;
        let new_rho = v.dot(&gv);
        let residual = (&gv - &v * new_rho).norm();
        let stagnant = (new_rho - rho).abs() <= 1e-15 * new_rho.abs();
        rho = new_rho;
        if rho == 0.0 || residual <= 1e-12 * rho.abs() || (stagnant && it > 10) {
            break;
        }
        let hv = &h * &v;
        let hn = hv.norm();
        if hn == 0.0 {
            break;
        }
        v = hv / hn;
    }
    PowerResult {
        norm: rho.max(0.0).sqrt(),
        vector: v,
        iterations,
    }
}

/// Boolean outcome of the sufficient averagedness test evaluated with dense norms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DenseAveraged {
    pub alpha: f64,
    pub theta_m: f64,
    pub norm_1m: f64,
    pub norm_shifted: f64,
    pub holds: bool,
}

/// `||U_{1..m} - gamma I|| - ||U_{1..m}|| <= 2^m alpha - 2 theta_m` with dense norms.
pub fn dense_averagedness(schedule: &LayerSchedule, eig: &EigenSystem, alpha: f64) -> Result<DenseAveraged> {
    if !(0.5..=1.0).contains(&alpha) {
        return Err(StabError::InvalidParameter(format!("alpha must lie in [1/2, 1], got {alpha}")));
    }
    let model = DenseModel::new(schedule, eig)?;
    let m = schedule.m();
    let mut norms = vec![vec![0.0; m + 1]; m + 1];
    for i in 1..=m {
        for n in i..=m {
            norms[i][n] = power_iteration(&model.segment(i, n, true)?, (i * 31 + n) as u64).norm;
        }
    }
    let mut theta = vec![1.0; m + 1];
    for n in 1..=m {
        theta[n] = (1..=n).map(|i| theta[i - 1] * norms[i][n]).sum();
    }
    let full = model.segment(1, m, true)?;
    let dim = full.nrows();
    let shifted = full - DMatrix::<f64>::identity(dim, dim) * gamma_alpha(m, alpha);
    let norm_shifted = power_iteration(&shifted, 7).norm;
    let lhs = norm_shifted - norms[1][m];
    let rhs = 2f64.powi(m as i32) * alpha - 2.0 * theta[m];
    Ok(DenseAveraged {
        alpha,
        theta_m: theta[m],
        norm_1m: norms[1][m],
        norm_shifted,
        holds: lhs <= rhs,
    })
}

// ---------------------------------------------------------------------------
// Monte-Carlo ratios
// ---------------------------------------------------------------------------

/// Map whose Lipschitz ratio is sampled.
#[derive(Debug, Clone, PartialEq)]
pub enum ProbeTarget {
    /// `(x0, b0) -> (x_m, b_m)`
    Virtual,
    /// `(x0, b0) -> x_m`
    XOutput,
    /// `b0 -> x_m` with `x0 = F b0`, `F` given by its frequency response.
    SingleInput(Vec<Complex64>),
}

/// Input/output norms of the probed map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormSpec {
    /// weighted product norm on both sides
    WeightedProduct,
    /// weighted product norm on the input, `||x||` on the output
    Seminorm,
    /// `||b||_w` on the input, `||x||` on the output
    WeightedInput,
}

impl NormSpec {
    fn matches(&self, target: &ProbeTarget) -> bool {
        matches!(
            (target, self),
            (ProbeTarget::Virtual, NormSpec::WeightedProduct)
                | (ProbeTarget::XOutput, NormSpec::Seminorm)
                | (ProbeTarget::SingleInput(_), NormSpec::WeightedInput)
        )
    }
}

/// An input perturbation. `x` is ignored for the single-input map.
#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub x: SignalGrid,
    pub b: SignalGrid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    pub empirical_lip: f64,
    pub theoretical_lip: f64,
    pub trials: usize,
    pub seed: u64,
    pub violation: bool,
    /// Ratios of the seeded probes first, then one per random trial.
    pub ratios: Vec<f64>,
}

impl ProbeReport {
    /// `theoretical (1 + 1e-9) - empirical`
    pub fn margin(&self) -> f64 {
        self.theoretical_lip * (1.0 + VIOLATION_TOL) - self.empirical_lip
    }
}

pub const VIOLATION_TOL: f64 = 1e-9;
pub const DEFAULT_SCALES: [f64; 3] = [1.0, 1e-2, 1e-4];

/// `||b||_w^2 = sum_p |b_p|^2 / w_p`
pub fn weighted_norm_sq(fft: &Fft2, eig: &EigenSystem, b: &SignalGrid) -> f64 {
    b.spectrum(fft)
        .iter()
        .zip(&eig.weights)
        .map(|(z, w)| z.norm_sqr() / w)
        .sum()
}

struct Evaluator<'n, 'a> {
    net: &'n Network<'a>,
    target: ProbeTarget,
}

enum Output {
    Pair(VirtualState),
    X(SignalGrid),
}

impl Evaluator<'_, '_> {
    fn input_norm(&self, p: &Probe) -> f64 {
        let wb = weighted_norm_sq(self.net.fft(), self.net.eig, &p.b);
        match self.target {
            ProbeTarget::SingleInput(_) => wb.sqrt(),
            _ => (p.x.norm().powi(2) + wb).sqrt(),
        }
    }

    fn eval(&self, p: &Probe) -> Result<Output> {
        match &self.target {
            ProbeTarget::Virtual => Ok(Output::Pair(
                self.net.run_virtual(&VirtualState { x: p.x.clone(), b: p.b.clone() })?,
            )),
            ProbeTarget::XOutput => Ok(Output::X(self.net.run(&p.x, &p.b)?)),
            ProbeTarget::SingleInput(phi) => Ok(Output::X(self.net.run_single_input(&p.b, phi)?)),
        }
    }

    fn distance(&self, a: &Output, b: &Output) -> f64 {
        match (a, b) {
            (Output::Pair(u), Output::Pair(v)) => {
                let dx = SignalGrid::new(&u.x.values - &v.x.values);
                let db = SignalGrid::new(&u.b.values - &v.b.values);
                (dx.norm().powi(2) + weighted_norm_sq(self.net.fft(), self.net.eig, &db)).sqrt()
            }
            (Output::X(u), Output::X(v)) => SignalGrid::new(&u.values - &v.values).norm(),
            _ => unreachable!("outputs of one evaluator share a kind"),
        }
    }

    fn ratio(&self, base: &Probe, dir: &Probe, scale: f64) -> Result<f64> {
        let nu = self.input_norm(dir);
        if nu == 0.0 {
            return Err(StabError::InvalidParameter("probe direction has zero norm".into()));
        }
        let shifted = Probe {
            x: SignalGrid::new(&base.x.values + &(&dir.x.values * (scale / nu))),
            b: SignalGrid::new(&base.b.values + &(&dir.b.values * (scale / nu))),
        };
        let a = self.eval(&shifted)?;
        let b = self.eval(base)?;
        Ok(self.distance(&a, &b) / scale)
    }
}

fn gaussian_signal(grid: FrequencyGrid, rng: &mut ChaCha8Rng) -> SignalGrid {
    let data = (0..grid.len()).map(|_| StandardNormal.sample(rng)).collect();
    SignalGrid::from_flat(grid, data).expect("shape matches grid")
}

/// Largest observed `dist(S(z + s u), S(z)) / s` over seeded and random probes.
///
/// Trial `t` draws its base point and direction from a generator seeded with
/// `seed + t` and uses scale `scales[t % scales.len()]`.
#[allow(clippy::too_many_arguments)]
pub fn empirical_lipschitz(
    net: &Network,
    target: ProbeTarget,
    norm: NormSpec,
    theoretical_lip: f64,
    trials: usize,
    seed: u64,
    scales: &[f64],
    seeded: &[Probe],
) -> Result<ProbeReport> {
    if !norm.matches(&target) {
        return Err(StabError::InvalidUsage(format!(
            "norm {norm:?} does not apply to target {target:?}"
        )));
    }
    if trials == 0 {
        return Err(StabError::InvalidParameter("trials must be at least 1".into()));
    }
    if scales.is_empty() || scales.iter().any(|s| !(*s > 0.0)) {
        return Err(StabError::InvalidParameter("perturbation scales must be positive".into()));
    }
    let single = matches!(target, ProbeTarget::SingleInput(_));
    let ev = Evaluator { net, target };
    let grid = net.eig.grid;
    let zero = SignalGrid::zeros(grid);

    let mut ratios = Vec::with_capacity(seeded.len() + trials);
    for p in seeded {
        let base = Probe {
            x: zero.clone(),
            b: zero.clone(),
        };
        ratios.push(ev.ratio(&base, p, 1.0)?);
    }
    let random: Vec<f64> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(t as u64));
            let base = Probe {
                x: gaussian_signal(grid, &mut rng),
                b: gaussian_signal(grid, &mut rng),
            };
            let mut dir = Probe {
                x: gaussian_signal(grid, &mut rng),
                b: gaussian_signal(grid, &mut rng),
            };
            if single {
                dir.x = zero.clone();
            }
            ev.ratio(&base, &dir, scales[t % scales.len()])
        })
        .collect::<Result<Vec<_>>>()?;
    ratios.extend(random);
    let empirical_lip = ratios.iter().copied().fold(0.0, f64::max);
    Ok(ProbeReport {
        empirical_lip,
        theoretical_lip,
        trials: ratios.len(),
        seed,
        violation: empirical_lip > theoretical_lip * (1.0 + VIOLATION_TOL),
        ratios,
    })
}

/// x-output check against `theta_bar_m / 2^{m-1}`.
pub fn seminorm_check(
    net: &Network,
    theoretical_lip: f64,
    trials: usize,
    seed: u64,
    seeded: &[Probe],
) -> Result<ProbeReport> {
    empirical_lipschitz(
        net,
        ProbeTarget::XOutput,
        NormSpec::Seminorm,
        theoretical_lip,
        trials,
        seed,
        &DEFAULT_SCALES,
        seeded,
    )
}

/// Cosine mode at a frequency, `cos(2 pi (p1 k1 / n1 + p2 k2 / n2))`.
fn cosine_mode(grid: FrequencyGrid, p: usize, amplitude: f64) -> SignalGrid {
    let (n1, n2) = grid.shape();
    let (p1, p2) = grid.coords(p);
    let data = (0..grid.len())
        .map(|k| {
            let (k1, k2) = grid.coords(k);
            let phase = 2.0 * std::f64::consts::PI
                * ((p1 * k1) as f64 / n1 as f64 + (p2 * k2) as f64 / n2 as f64);
            amplitude * phase.cos()
        })
        .collect();
    SignalGrid::from_flat(grid, data).expect("shape matches grid")
}

/// Input direction attaining the linear part's norm for the full cascade.
///
/// The extremal frequency `p*` is located from the per-frequency 2x2 blocks; the
/// probe is the real cosine mode at `p*` carrying that block's top right singular
/// vector. Every spectrum involved is even in `p`, so the mode excites `p*` and
/// `-p*` identically and the linear ratio equals the block norm exactly.
pub fn singular_probe(schedule: &LayerSchedule, eig: &EigenSystem, target: &ProbeTarget) -> Result<Probe> {
    let m = schedule.m();
    let eta = schedule.eta_prod_unchecked(1, m);
    let mut best = (-1.0, 0usize, [0.0, 0.0]);
    for p in 0..eig.len() {
        let (beta, tilde) = schedule.segment_coeffs(1, m, eig.beta_t[p], eig.beta_d_unit[p]);
        let sw = eig.weights[p].sqrt();
        let (value, v) = match target {
            ProbeTarget::Virtual => top_eigvec_2x2(beta * beta, sw * beta * tilde, eta * eta + sw * sw * tilde * tilde),
            ProbeTarget::XOutput => {
                let r = beta.hypot(sw * tilde);
                let v = if r > 0.0 { [beta / r, sw * tilde / r] } else { [1.0, 0.0] };
                (r * r, v)
            }
            ProbeTarget::SingleInput(phi) => {
                if phi.len() != eig.len() {
                    return Err(StabError::SizeMismatch("pre-filter length differs from grid".into()));
                }
                (eig.weights[p] * (phi[p] * beta + tilde).norm_sqr(), [0.0, 1.0])
            }
        };
        if value > best.0 {
            best = (value, p, v);
        }
    }
    let (_, p, v) = best;
    let sw = eig.weights[p].sqrt();
    Ok(Probe {
        x: cosine_mode(eig.grid, p, v[0]),
        b: cosine_mode(eig.grid, p, sw * v[1]),
    })
}
