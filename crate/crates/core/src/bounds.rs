//! Lipschitz and averagedness certificates of the unrolled network.
//!
//! Three families of constants are computed:
//!
//! * the virtual network on `(x, b)` with the weighted product norm
//!   `||(x, b)||^2 = ||x||^2 + sum_p |b_p|^2 / w_p` (`theta_n`),
//! * the network with input `(x0, b0)` and output `x_m` (`theta_bar`),
//! * the single-input network `x0 = F b0` with output `x_m` (`theta_hat`).
//!
//! All suprema over frequencies are exact maxima over the finite DFT grid.
//! Frequencies that share identical spectral data are evaluated once, see
//! [`FrequencySamples`].

use std::collections::HashMap;

use num_complex::Complex64;
use rayon::prelude::*;

use crate::coeffs::{CoefficientTable, LayerSchedule};
use crate::error::{Result, StabError};
use crate::spectral::{prefilter_eigs, EigenSystem, PreFilterSpec};

/// Residual tolerance for square roots of quantities that are nonnegative in exact arithmetic.
pub const DISC_CLAMP: f64 = 1e-12;

/// Largest eigenvalue of the 2x2 block `[[x, sqrt(x w)], [sqrt(x w), e + w]]`
/// with `x = beta^2`, `e = eta^2`, `w = weight * beta_tilde^2`.
///
/// The discriminant `s^2 - 4 x e` is evaluated as `(x - e)^2 + w (w + 2 (x + e))`,
/// which has no cancellation when `x` and `e` are close.
#[inline]
pub fn top_eigenvalue(x: f64, e: f64, w: f64) -> Result<f64> {
    if !(x >= 0.0 && e >= 0.0 && w >= 0.0) {
        return Err(StabError::NumericalInconsistency(format!(
            "invalid 2x2 block entries (x={x}, e={e}, w={w})"
        )));
    }
    if e == 0.0 {
        return Ok(x + w);
    }
    if w == 0.0 {
        return Ok(x.max(e));
    }
    let d = x - e;
    let disc = d * d + w * (w + 2.0 * (x + e));
    Ok(0.5 * (x + w + e + disc.sqrt()))
}

/// Spectral data of one frequency class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrequencySample {
    pub beta_t: f64,
    pub beta_d_unit: f64,
    pub weight: f64,
}

/// Distinct frequencies of an eigensystem together with their pre-filter responses.
///
/// Two frequencies whose `(beta_t, beta_d_unit, weight, phi...)` agree bitwise give
/// identical per-frequency terms, so only one representative is kept.
#[derive(Debug, Clone)]
pub struct FrequencySamples {
    pub samples: Vec<FrequencySample>,
    /// `phi[f][k]`: response of pre-filter `f` at sample `k`.
    pub phi: Vec<Vec<Complex64>>,
    /// Flat frequency index of each sample's first occurrence.
    pub representative: Vec<usize>,
}

impl FrequencySamples {
    pub fn new(eig: &EigenSystem, prefilters: &[PreFilterSpec]) -> Result<Self> {
        let responses = prefilters
            .iter()
            .map(|f| prefilter_eigs(f, eig))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_responses(eig, &responses))
    }

    pub fn from_responses(eig: &EigenSystem, responses: &[Vec<Complex64>]) -> Self {
        let mut seen: HashMap<Vec<u64>, ()> = HashMap::with_capacity(eig.len() / 2);
        let mut samples = Vec::new();
        let mut representative = Vec::new();
        let mut phi = vec![Vec::new(); responses.len()];
        for p in 0..eig.len() {
            let mut key = vec![
                eig.beta_t[p].to_bits(),
                eig.beta_d_unit[p].to_bits(),
                eig.weights[p].to_bits(),
            ];
            for r in responses {
                key.push(r[p].re.to_bits());
                key.push(r[p].im.to_bits());
            }
            if seen.insert(key, ()).is_none() {
                samples.push(FrequencySample {
                    beta_t: eig.beta_t[p],
                    beta_d_unit: eig.beta_d_unit[p],
                    weight: eig.weights[p],
                });
                representative.push(p);
                for (f, r) in responses.iter().enumerate() {
                    phi[f].push(r[p]);
                }
            }
        }
        Self {
            samples,
            phi,
            representative,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn prefilter_count(&self) -> usize {
        self.phi.len()
    }
}

/// Upper-triangular array indexed by segments `1 <= i <= n <= m`.
#[derive(Debug, Clone, PartialEq)]
pub struct Triangular {
    m: usize,
    data: Vec<f64>,
}

impl Triangular {
    pub fn filled(m: usize, value: f64) -> Self {
        Self {
            m,
            data: vec![value; m * (m + 1) / 2],
        }
    }

    pub fn m(&self) -> usize {
        self.m
    }

    #[inline]
    fn offset(&self, i: usize, n: usize) -> usize {
        debug_assert!(1 <= i && i <= n && n <= self.m);
        // row r holds m - r + 1 entries
        (i - 1) * (self.m + 1) - (i - 1) * i / 2 + (n - i)
    }

    #[inline]
    pub fn get(&self, i: usize, n: usize) -> f64 {
        self.data[self.offset(i, n)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, n: usize, v: f64) {
        let k = self.offset(i, n);
        self.data[k] = v;
    }

    fn max_assign(&mut self, other: &Self) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a = a.max(*b);
        }
    }
}

/// Squared segment norms and the other suprema over frequencies needed by the ledger.
#[derive(Debug, Clone)]
pub struct SegmentNorms {
    pub m: usize,
    /// `a_{i,n}`: squared norm of `U_n o ... o U_i` under the weighted product norm.
    pub a: Triangular,
    /// `a_bar_{i,n}`: squared semi-norm (x-output) of the same segment.
    pub a_bar: Triangular,
    /// `sup_p w_p |beta_{1,n,p} phi_p + beta~_{1,n,p}|^2` per pre-filter, index `n - 1`.
    pub a_hat_open: Vec<Vec<f64>>,
    pub alphas: Vec<f64>,
    /// `b_alpha` for each entry of `alphas`.
    pub b_alpha: Vec<f64>,
    /// `sup_p max(|beta_{1,m,p}|, sqrt(w_p beta~_{1,m,p}^2 + eta_{1,m}^2))`
    pub corollary_lower: f64,
    /// `sup_p (beta_p^{(n)})^2 + w_p gain_n^2 + eta_n^2`, index `n - 1`.
    pub corollary_terms: Vec<f64>,
}

struct Accum {
    a: Triangular,
    a_bar: Triangular,
    a_hat_open: Vec<Vec<f64>>,
    b_alpha: Vec<f64>,
    corollary_lower: f64,
    corollary_terms: Vec<f64>,
}

impl Accum {
    fn new(m: usize, filters: usize, alphas: usize) -> Self {
        Self {
            a: Triangular::filled(m, 0.0),
            a_bar: Triangular::filled(m, 0.0),
            a_hat_open: vec![vec![0.0; m]; filters],
            b_alpha: vec![0.0; alphas],
            corollary_lower: 0.0,
            corollary_terms: vec![0.0; m],
        }
    }

    fn merge(mut self, other: Self) -> Self {
        self.a.max_assign(&other.a);
        self.a_bar.max_assign(&other.a_bar);
        for (x, y) in self.a_hat_open.iter_mut().zip(&other.a_hat_open) {
            for (u, v) in x.iter_mut().zip(y) {
                *u = u.max(*v);
            }
        }
        for (u, v) in self.b_alpha.iter_mut().zip(&other.b_alpha) {
            *u = u.max(*v);
        }
        self.corollary_lower = self.corollary_lower.max(other.corollary_lower);
        for (u, v) in self.corollary_terms.iter_mut().zip(&other.corollary_terms) {
            *u = u.max(*v);
        }
        self
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.5..=1.0).contains(&alpha) {
        return Err(StabError::InvalidParameter(format!(
            "alpha must lie in [1/2, 1], got {alpha}"
        )));
    }
    Ok(())
}

/// `gamma_alpha = 2^m (1 - alpha)`
pub fn gamma_alpha(m: usize, alpha: f64) -> f64 {
    2f64.powi(m as i32) * (1.0 - alpha)
}

impl SegmentNorms {
    /// One pass over the frequency samples.
    pub fn compute(schedule: &LayerSchedule, samples: &FrequencySamples, alphas: &[f64]) -> Result<Self> {
        Self::compute_with(schedule, samples, alphas, false)
    }

    /// Same as [`SegmentNorms::compute`], splitting the frequency loop across the rayon pool.
    pub fn compute_parallel(
        schedule: &LayerSchedule,
        samples: &FrequencySamples,
        alphas: &[f64],
    ) -> Result<Self> {
        Self::compute_with(schedule, samples, alphas, true)
    }

    fn compute_with(
        schedule: &LayerSchedule,
        samples: &FrequencySamples,
        alphas: &[f64],
        parallel: bool,
    ) -> Result<Self> {
        for &alpha in alphas {
            check_alpha(alpha)?;
        }
        let m = schedule.m();
        let filters = samples.prefilter_count();

        // gain[i][n] = gain_n * eta_{i,n-1}, eta2[i][n] = eta_{i,n}^2
        let mut gain = Triangular::filled(m, 0.0);
        let mut eta2 = Triangular::filled(m, 0.0);
        for i in 1..=m {
            for n in i..=m {
                gain.set(i, n, schedule.bias_gain(n) * schedule.eta_prod_unchecked(i, n - 1));
                eta2.set(i, n, schedule.eta_prod_unchecked(i, n).powi(2));
            }
        }
        let eta_1m = schedule.eta_prod_unchecked(1, m);
        let gammas: Vec<f64> = alphas.iter().map(|&a| gamma_alpha(m, a)).collect();
        let layer_gain2: Vec<f64> = (1..=m).map(|n| schedule.bias_gain(n).powi(2)).collect();

        let work = |range: std::ops::Range<usize>| -> Result<Accum> {
            let mut acc = Accum::new(m, filters, alphas.len());
            let mut layer = vec![0.0; m + 1];
            for k in range {
                let s = samples.samples[k];
                for n in 1..=m {
                    layer[n] = schedule.layer_beta(n, s.beta_t, s.beta_d_unit);
                    let term = layer[n] * layer[n]
                        + s.weight * layer_gain2[n - 1]
                        + schedule.eta[n - 1] * schedule.eta[n - 1];
                    acc.corollary_terms[n - 1] = acc.corollary_terms[n - 1].max(term);
                }
                for i in 1..=m {
                    let mut prod = 1.0;
                    let mut tilde = 0.0;
                    for n in i..=m {
                        prod *= layer[n];
                        tilde = layer[n] * tilde + gain.get(i, n);
                        let x = prod * prod;
                        let w = s.weight * tilde * tilde;
                        let nu = top_eigenvalue(x, eta2.get(i, n), w)?;
                        let off = acc.a.offset(i, n);
                        acc.a.data[off] = acc.a.data[off].max(nu);
                        acc.a_bar.data[off] = acc.a_bar.data[off].max(x + w);
                        if i == 1 {
                            for f in 0..filters {
                                let phi = samples.phi[f][k];
                                let v = s.weight * (phi * prod + tilde).norm_sqr();
                                acc.a_hat_open[f][n - 1] = acc.a_hat_open[f][n - 1].max(v);
                            }
                            if n == m {
                                for (g, &gamma) in gammas.iter().enumerate() {
                                    let nu = top_eigenvalue(
                                        (prod - gamma).powi(2),
                                        (eta_1m - gamma).powi(2),
                                        w,
                                    )?;
                                    acc.b_alpha[g] = acc.b_alpha[g].max(nu);
                                }
                                let low = prod.abs().max((w + eta_1m * eta_1m).sqrt());
                                acc.corollary_lower = acc.corollary_lower.max(low);
                            }
                        }
                    }
                }
            }
            Ok(acc)
        };

        let total = samples.len();
        let acc = if parallel && total > 256 {
            let chunk = 256;
            let starts: Vec<usize> = (0..total).step_by(chunk).collect();
            starts
                .par_iter()
                .map(|&s| work(s..(s + chunk).min(total)))
                .try_reduce(|| Accum::new(m, filters, alphas.len()), |a, b| Ok(a.merge(b)))?
        } else {
            work(0..total)?
        };

        Ok(Self {
            m,
            a: acc.a,
            a_bar: acc.a_bar,
            a_hat_open: acc.a_hat_open,
            alphas: alphas.to_vec(),
            b_alpha: acc.b_alpha,
            corollary_lower: acc.corollary_lower,
            corollary_terms: acc.corollary_terms,
        })
    }

    /// `a_hat_{1,n}` for pre-filter `f`: the leakage term is present unless `n = m`.
    pub fn a_hat(&self, schedule: &LayerSchedule, f: usize, n: usize) -> f64 {
        let open = self.a_hat_open[f][n - 1];
        if n == self.m {
            open
        } else {
            open + schedule.eta_prod_unchecked(1, n).powi(2)
        }
    }
}

// ---------------------------------------------------------------------------
// Table-based evaluation of single quantities
// ---------------------------------------------------------------------------

fn check_segment(schedule: &LayerSchedule, i: usize, n: usize) -> Result<()> {
    if i == 0 || i > n || n > schedule.m() {
        return Err(StabError::IndexOutOfRange(format!(
            "segment ({i}, {n}) needs 1 <= i <= n <= {}",
            schedule.m()
        )));
    }
    Ok(())
}

/// `a_{i,n}` from materialized tables.
pub fn a_in(
    table: &CoefficientTable,
    eig: &EigenSystem,
    schedule: &LayerSchedule,
    i: usize,
    n: usize,
) -> Result<f64> {
    check_segment(schedule, i, n)?;
    let beta = table.beta_seg(i, n)?;
    let tilde = table.beta_tilde_seg(i, n)?;
    let e = schedule.eta_prod_unchecked(i, n).powi(2);
    let mut best = 0.0f64;
    for p in 0..eig.len() {
        let nu = top_eigenvalue(beta[p] * beta[p], e, eig.weights[p] * tilde[p] * tilde[p])?;
        best = best.max(nu);
    }
    Ok(best)
}

/// `a_bar_{i,n} = sup_p beta_{i,n,p}^2 + w_p beta~_{i,n,p}^2`
pub fn a_bar_in(
    table: &CoefficientTable,
    eig: &EigenSystem,
    schedule: &LayerSchedule,
    i: usize,
    n: usize,
) -> Result<f64> {
    check_segment(schedule, i, n)?;
    let beta = table.beta_seg(i, n)?;
    let tilde = table.beta_tilde_seg(i, n)?;
    Ok((0..eig.len())
        .map(|p| beta[p] * beta[p] + eig.weights[p] * tilde[p] * tilde[p])
        .fold(0.0, f64::max))
}

/// `a_hat_{1,n}` for a pre-filter response `phi`.
pub fn a_hat_1n(
    table: &CoefficientTable,
    eig: &EigenSystem,
    schedule: &LayerSchedule,
    phi: &[Complex64],
    n: usize,
) -> Result<f64> {
    check_segment(schedule, 1, n)?;
    if phi.len() != eig.len() {
        return Err(StabError::SizeMismatch(format!(
            "pre-filter has {} entries, grid has {}",
            phi.len(),
            eig.len()
        )));
    }
    let beta = table.beta_seg(1, n)?;
    let tilde = table.beta_tilde_seg(1, n)?;
    let sup = (0..eig.len())
        .map(|p| eig.weights[p] * (phi[p] * beta[p] + tilde[p]).norm_sqr())
        .fold(0.0, f64::max);
    if n == schedule.m() {
        Ok(sup)
    } else {
        Ok(sup + schedule.eta_prod_unchecked(1, n).powi(2))
    }
}

/// All `a_{i,n}` and `a_bar_{i,n}` from materialized tables.
pub fn segment_tables(
    table: &CoefficientTable,
    eig: &EigenSystem,
    schedule: &LayerSchedule,
) -> Result<(Triangular, Triangular)> {
    let m = schedule.m();
    let mut a = Triangular::filled(m, 0.0);
    let mut a_bar = Triangular::filled(m, 0.0);
    for i in 1..=m {
        for n in i..=m {
            a.set(i, n, a_in(table, eig, schedule, i, n)?);
            a_bar.set(i, n, a_bar_in(table, eig, schedule, i, n)?);
        }
    }
    Ok((a, a_bar))
}

// ---------------------------------------------------------------------------
// Recursions
// ---------------------------------------------------------------------------

/// A Lipschitz estimate with its lower and upper bounds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Certificate {
    pub value: f64,
    pub lower: f64,
    pub upper: f64,
}

impl Certificate {
    /// Smallest slack of the sandwich `lower <= value <= upper`.
    pub fn slack(&self) -> f64 {
        (self.value - self.lower).min(self.upper - self.value)
    }
}

fn pow2(k: usize) -> f64 {
    2f64.powi(k as i32)
}

/// `theta_n = sum_{i=1}^n theta_{i-1} sqrt(a_{i,n})`, `theta_0 = 1`.
pub fn theta_sequence(a: &Triangular) -> Vec<f64> {
    let m = a.m();
    let mut theta = vec![1.0; m + 1];
    for n in 1..=m {
        theta[n] = (1..=n).map(|i| theta[i - 1] * a.get(i, n).sqrt()).sum();
    }
    theta
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThetaVnn {
    pub theta: Vec<f64>,
    pub cert: Certificate,
}

/// Virtual-network constant `theta_m / 2^{m-1}` with `sqrt(a_{1,m}) <= . <= prod sqrt(a_{n,n})`.
pub fn theta_vnn(a: &Triangular) -> ThetaVnn {
    let m = a.m();
    let theta = theta_sequence(a);
    let upper = (1..=m).map(|n| a.get(n, n).sqrt()).product();
    ThetaVnn {
        cert: Certificate {
            value: theta[m] / pow2(m - 1),
            lower: a.get(1, m).sqrt(),
            upper,
        },
        theta,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThetaBar {
    pub theta_bar: f64,
    pub cert: Certificate,
}

/// x-output constant of the first `n` layers: `sum_i theta_{i-1} sqrt(a_bar_{i,n})`.
pub fn theta_bar_at(a: &Triangular, a_bar: &Triangular, n: usize) -> ThetaBar {
    let theta = theta_sequence(a);
    let value: f64 = (1..=n).map(|i| theta[i - 1] * a_bar.get(i, n).sqrt()).sum();
    let upper = a_bar.get(n, n).sqrt() * (1..n).map(|k| a.get(k, k).sqrt()).product::<f64>();
    ThetaBar {
        theta_bar: value,
        cert: Certificate {
            value: value / pow2(n - 1),
            lower: a_bar.get(1, n).sqrt(),
            upper,
        },
    }
}

pub fn theta_bar(a: &Triangular, a_bar: &Triangular) -> ThetaBar {
    theta_bar_at(a, a_bar, a.m())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThetaHat {
    /// `theta_hat_0 = 1`, intermediate values for `n < m`, final value at `m`.
    pub theta_hat: Vec<f64>,
    pub cert: Certificate,
}

/// Single-input constant. `a_hat[n-1]` holds `a_hat_{1,n}` with the leakage
/// term included for `n < m` and omitted for `n = m`.
pub fn theta_hat(a_hat: &[f64], a: &Triangular, a_bar: &Triangular) -> Result<ThetaHat> {
    let m = a.m();
    if m < 2 {
        return Err(StabError::UnsupportedConfiguration(
            "single-input bound needs at least two layers".into(),
        ));
    }
    let mut th = vec![1.0; m + 1];
    for n in 1..m {
        th[n] = a_hat[n - 1].sqrt() + (2..=n).map(|i| th[i - 1] * a.get(i, n).sqrt()).sum::<f64>();
    }
    th[m] = a_hat[m - 1].sqrt() + (2..=m).map(|i| th[i - 1] * a_bar.get(i, m).sqrt()).sum::<f64>();
    let upper = (a_bar.get(m, m) * (2..m).map(|n| a.get(n, n)).product::<f64>() * a_hat[0]).sqrt();
    Ok(ThetaHat {
        cert: Certificate {
            value: th[m] / pow2(m - 1),
            lower: a_hat[m - 1].sqrt(),
            upper,
        },
        theta_hat: th,
    })
}

/// Result of the sufficient averagedness test for one `alpha`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AveragedTest {
    pub alpha: f64,
    pub b_alpha: f64,
    /// `2^m alpha - 2 theta_m - (sqrt(b_alpha) - sqrt(a_{1,m}))`; the condition holds when `>= 0`.
    pub margin: f64,
    pub holds: bool,
}

pub fn averaged_condition(m: usize, alpha: f64, b_alpha: f64, a_1m: f64, theta_m: f64) -> AveragedTest {
    let lhs = b_alpha.sqrt() - a_1m.sqrt();
    let rhs = pow2(m) * alpha - 2.0 * theta_m;
    AveragedTest {
        alpha,
        b_alpha,
        margin: rhs - lhs,
        holds: lhs <= rhs,
    }
}

/// Sufficient condition for the virtual network to be `alpha`-averaged, from tables.
pub fn averagedness(
    a_1m: f64,
    theta_m: f64,
    table: &CoefficientTable,
    eig: &EigenSystem,
    schedule: &LayerSchedule,
    alpha: f64,
) -> Result<AveragedTest> {
    check_alpha(alpha)?;
    let m = schedule.m();
    let gamma = gamma_alpha(m, alpha);
    let eta = schedule.eta_prod_unchecked(1, m);
    let beta = table.beta_seg(1, m)?;
    let tilde = table.beta_tilde_seg(1, m)?;
    let mut b = 0.0f64;
    for p in 0..eig.len() {
        let nu = top_eigenvalue(
            (beta[p] - gamma).powi(2),
            (eta - gamma).powi(2),
            eig.weights[p] * tilde[p] * tilde[p],
        )?;
        b = b.max(nu);
    }
    Ok(averaged_condition(m, alpha, b, a_1m, theta_m))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitMode {
    /// `x0` fixed (e.g. zero).
    Fixed,
    /// `x0 = b0`.
    Data,
}

/// Lipschitz constant with respect to `b0` deduced from the virtual-network constant.
pub fn vartheta(lip_vnn: f64, eta_1m: f64, mode: InitMode) -> Result<f64> {
    let scale = match mode {
        InitMode::Fixed => 1.0,
        InitMode::Data => 2.0,
    };
    let mut r = scale * lip_vnn * lip_vnn - eta_1m * eta_1m;
    if r < 0.0 {
        if r < -DISC_CLAMP {
            return Err(StabError::NumericalInconsistency(format!(
                "virtual-network constant {lip_vnn} below leakage product {eta_1m}"
            )));
        }
        r = 0.0;
    }
    Ok(r.sqrt())
}

/// Separable bounds sandwiching `theta_m / 2^{m-1}`.
pub fn corollary_bounds(
    table: &CoefficientTable,
    eig: &EigenSystem,
    schedule: &LayerSchedule,
) -> Result<(f64, f64)> {
    let m = schedule.m();
    let eta = schedule.eta_prod_unchecked(1, m);
    let beta = table.beta_seg(1, m)?;
    let tilde = table.beta_tilde_seg(1, m)?;
    let lower = (0..eig.len())
        .map(|p| beta[p].abs().max((eig.weights[p] * tilde[p] * tilde[p] + eta * eta).sqrt()))
        .fold(0.0, f64::max);
    let mut upper = 1.0;
    for n in 1..=m {
        let layer = table.beta_layer(n)?;
        let g2 = schedule.bias_gain(n).powi(2);
        let e2 = schedule.eta[n - 1].powi(2);
        let sup = (0..eig.len())
            .map(|p| layer[p] * layer[p] + eig.weights[p] * g2 + e2)
            .fold(0.0, f64::max);
        upper *= sup.sqrt();
    }
    Ok((lower, upper))
}

// ---------------------------------------------------------------------------
// Ledger
// ---------------------------------------------------------------------------

/// Every certificate of one configuration.
#[derive(Debug, Clone)]
pub struct BoundLedger {
    pub m: usize,
    /// `theta_n`, `n = 0..=m`.
    pub theta: Vec<f64>,
    pub theta_bar_m: f64,
    /// `theta_hat_n`, `n = 0..=m`, for the first requested pre-filter (absent when `m < 2`).
    pub theta_hat: Option<Vec<f64>>,
    pub vnn: Certificate,
    pub xout: Certificate,
    /// Single-input certificates, one per requested pre-filter (empty when `m < 2`).
    pub single: Vec<Certificate>,
    pub corollary_lower: f64,
    pub corollary_upper: f64,
    pub eta_1m: f64,
    pub vartheta_fixed_init: f64,
    pub vartheta_data_init: f64,
    pub averaged: Vec<AveragedTest>,
}

impl BoundLedger {
    pub fn from_norms(schedule: &LayerSchedule, norms: &SegmentNorms) -> Result<Self> {
        let m = schedule.m();
        let vnn = theta_vnn(&norms.a);
        let bar = theta_bar(&norms.a, &norms.a_bar);
        let mut single = Vec::new();
        let mut theta_hat_seq = None;
        if m >= 2 {
            for f in 0..norms.a_hat_open.len() {
                let hats: Vec<f64> = (1..=m).map(|n| norms.a_hat(schedule, f, n)).collect();
                let th = theta_hat(&hats, &norms.a, &norms.a_bar)?;
                if theta_hat_seq.is_none() {
                    theta_hat_seq = Some(th.theta_hat.clone());
                }
                single.push(th.cert);
            }
        }
        let corollary_upper = norms.corollary_terms.iter().map(|t| t.sqrt()).product();
        let eta_1m = schedule.eta_prod_unchecked(1, m);
        let theta_m = vnn.theta[m];
        let a_1m = norms.a.get(1, m);
        let averaged = norms
            .alphas
            .iter()
            .zip(&norms.b_alpha)
            .map(|(&alpha, &b)| averaged_condition(m, alpha, b, a_1m, theta_m))
            .collect();
        // the corollary's lower bound never exceeds sqrt(a_{1,m}); keep the larger
        let vnn_cert = Certificate {
            lower: vnn.cert.lower.max(norms.corollary_lower),
            upper: vnn.cert.upper.min(corollary_upper),
            value: vnn.cert.value,
        };
        Ok(Self {
            m,
            theta_bar_m: bar.theta_bar,
            theta_hat: theta_hat_seq,
            vnn: vnn_cert,
            xout: bar.cert,
            single,
            corollary_lower: norms.corollary_lower,
            corollary_upper,
            eta_1m,
            vartheta_fixed_init: vartheta(vnn.cert.value, eta_1m, InitMode::Fixed)?,
            vartheta_data_init: vartheta(vnn.cert.value, eta_1m, InitMode::Data)?,
            averaged,
            theta: vnn.theta,
        })
    }

    /// Convenience: full computation for one eigensystem and schedule.
    pub fn compute(
        eig: &EigenSystem,
        schedule: &LayerSchedule,
        prefilters: &[PreFilterSpec],
        alphas: &[f64],
    ) -> Result<Self> {
        let samples = FrequencySamples::new(eig, prefilters)?;
        let norms = SegmentNorms::compute_parallel(schedule, &samples, alphas)?;
        Self::from_norms(schedule, &norms)
    }
}

/// Certificates of the network truncated after `n` layers, for `n = 1..=m`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerRow {
    pub n: usize,
    pub vnn: Certificate,
    pub xout: Certificate,
    pub single: Certificate,
}

/// Per-layer curves for one pre-filter index `f` of `norms`.
pub fn layer_curves(schedule: &LayerSchedule, norms: &SegmentNorms, f: usize) -> Vec<LayerRow> {
    let m = schedule.m();
    let a = &norms.a;
    let a_bar = &norms.a_bar;
    let theta = theta_sequence(a);
    let open = &norms.a_hat_open[f];
    // intermediate single-input values, leakage included
    let mut inter = vec![1.0; m + 1];
    for n in 1..=m {
        let hat = open[n - 1] + schedule.eta_prod_unchecked(1, n).powi(2);
        inter[n] = hat.sqrt() + (2..=n).map(|i| inter[i - 1] * a.get(i, n).sqrt()).sum::<f64>();
    }
    (1..=m)
        .map(|n| {
            let vnn = Certificate {
                value: theta[n] / pow2(n - 1),
                lower: a.get(1, n).sqrt(),
                upper: (1..=n).map(|k| a.get(k, k).sqrt()).product(),
            };
            let xout = theta_bar_at(a, a_bar, n).cert;
            let single_value =
                open[n - 1].sqrt() + (2..=n).map(|i| inter[i - 1] * a_bar.get(i, n).sqrt()).sum::<f64>();
            let single_upper = if n == 1 {
                open[0].sqrt()
            } else {
                let first = open[0] + schedule.eta[0].powi(2);
                (a_bar.get(n, n) * (2..n).map(|k| a.get(k, k)).product::<f64>() * first).sqrt()
            };
            let single = Certificate {
                value: single_value / pow2(n - 1),
                lower: open[n - 1].sqrt(),
                upper: single_upper,
            };
            LayerRow { n, vnn, xout, single }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Stationary closed forms
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct StationaryReport {
    /// `|beta_p| <= 1` for every frequency.
    pub necessary_spectrum_ok: bool,
    /// Closed form of the same condition: `lambda (sup_p c_p - chi) <= 2`.
    pub spectrum_iff_ok: bool,
    /// `w_p gain^2 (sum_j beta^j eta^{m-j-1})^2 + eta^{2m} <= 1` for every frequency.
    pub necessary_eta_ok: bool,
    /// `(1 - lambda c_p)^2 + w_p lambda^2 + (1 + lambda chi)^2 (eta^2 - 1) <= 0` for every frequency.
    pub sufficient_ok: bool,
    /// Largest left-hand side of the sufficient condition.
    pub sufficient_margin: f64,
    /// `inf_p c_p / sqrt(c_p^2 + w_p)`
    pub eta_max: f64,
    /// `[sup_p lambda_1p(eta), inf_p lambda_2p(eta)]` when `chi = 0` and nonempty.
    pub lambda_interval: Option<(f64, f64)>,
}

/// Roots of `(c^2 + w) l^2 - 2 c l + eta^2`, `None` when they are complex.
pub fn stationary_lambda_roots(c: f64, w: f64, eta: f64) -> Option<(f64, f64)> {
    let a = c * c + w;
    let disc = c * c - eta * eta * a;
    if disc < 0.0 {
        return None;
    }
    let big = c + disc.sqrt();
    if big == 0.0 {
        return Some((0.0, 0.0));
    }
    Some((eta * eta / big, big / a))
}

pub fn stationary_report(schedule: &LayerSchedule, eig: &EigenSystem) -> Result<StationaryReport> {
    if !schedule.is_stationary() {
        return Err(StabError::InvalidUsage(
            "stationary report needs identical parameters in every layer".into(),
        ));
    }
    let m = schedule.m();
    let lambda = schedule.lambda[0];
    let tau = schedule.tau[0];
    let eta = schedule.eta[0];
    let chi = schedule.chi(1);
    let gain = schedule.bias_gain(1);

    let mut spectrum_ok = true;
    let mut eta_ok = true;
    let mut sufficient_margin = f64::NEG_INFINITY;
    let mut eta_max = f64::INFINITY;
    let mut lo = f64::NEG_INFINITY;
    let mut hi = f64::INFINITY;
    let mut roots_exist = true;
    let mut sup_c = 0.0f64;
    for p in 0..eig.len() {
        let c = eig.beta_t[p] + tau * eig.beta_d_unit[p];
        let w = eig.weights[p];
        sup_c = sup_c.max(c);
        let beta = schedule.layer_beta(1, eig.beta_t[p], eig.beta_d_unit[p]);
        spectrum_ok &= beta.abs() <= 1.0;
        let geo: f64 = (0..m)
            .map(|j| beta.powi(j as i32) * eta.powi((m - j - 1) as i32))
            .sum();
        eta_ok &= w * gain * gain * geo * geo + eta.powi(2 * m as i32) <= 1.0;
        let lhs = (1.0 - lambda * c).powi(2) + w * lambda * lambda
            + (1.0 + lambda * chi).powi(2) * (eta * eta - 1.0);
        sufficient_margin = sufficient_margin.max(lhs);
        eta_max = eta_max.min(c / (c * c + w).sqrt());
        match stationary_lambda_roots(c, w, eta) {
            Some((r1, r2)) => {
                lo = lo.max(r1);
                hi = hi.min(r2);
            }
            None => roots_exist = false,
        }
    }
    let lambda_interval = if chi == 0.0 && roots_exist && lo <= hi {
        Some((lo, hi))
    } else {
        None
    };
    Ok(StationaryReport {
        necessary_spectrum_ok: spectrum_ok,
        spectrum_iff_ok: lambda * (sup_c - chi) <= 2.0,
        necessary_eta_ok: eta_ok,
        sufficient_ok: sufficient_margin <= 0.0,
        sufficient_margin,
        eta_max,
        lambda_interval,
    })
}
