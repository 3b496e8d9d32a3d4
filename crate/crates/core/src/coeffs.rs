//! Per-layer schedules and the spectral coefficient tables of the unrolled network.
//!
//! Layer and segment indices are 1-based throughout this module, matching the
//! layer numbering of the network (`n = 1..=m`, segments `1 <= i <= n <= m`).

use crate::error::{Result, StabError};
use crate::spectral::EigenSystem;

/// Per-layer scalar parameters.
///
/// `chi_n = mu_n * chi_bar` is derived, never stored.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSchedule {
    pub lambda: Vec<f64>,
    pub tau: Vec<f64>,
    pub mu: Vec<f64>,
    pub eta: Vec<f64>,
    pub chi_bar: f64,
}

impl LayerSchedule {
    pub fn new(
        lambda: Vec<f64>,
        tau: Vec<f64>,
        mu: Vec<f64>,
        eta: Vec<f64>,
        chi_bar: f64,
    ) -> Result<Self> {
        let m = lambda.len();
        if m == 0 {
            return Err(StabError::InvalidParameter("schedule needs at least one layer".into()));
        }
        if tau.len() != m || mu.len() != m || eta.len() != m {
            return Err(StabError::SizeMismatch(format!(
                "schedule lengths differ: lambda={m}, tau={}, mu={}, eta={}",
                tau.len(),
                mu.len(),
                eta.len()
            )));
        }
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if let Some(l) = lambda.iter().find(|&&l| !(l.is_finite() && l > 0.0)) {
            return Err(StabError::InvalidParameter(format!("lambda must be positive, got {l}")));
        }
        if let Some(t) = tau.iter().find(|&&t| !finite_nonneg(t)) {
            return Err(StabError::InvalidParameter(format!("tau must be nonnegative, got {t}")));
        }
        if let Some(u) = mu.iter().find(|&&u| !finite_nonneg(u)) {
            return Err(StabError::InvalidParameter(format!("mu must be nonnegative, got {u}")));
        }
        if let Some(e) = eta.iter().find(|&&e| !finite_nonneg(e)) {
            return Err(StabError::InvalidParameter(format!("eta must be nonnegative, got {e}")));
        }
        if !finite_nonneg(chi_bar) {
            return Err(StabError::InvalidParameter(format!(
                "chi_bar must be nonnegative, got {chi_bar}"
            )));
        }
        Ok(Self {
            lambda,
            tau,
            mu,
            eta,
            chi_bar,
        })
    }

    pub fn stationary(m: usize, lambda: f64, tau: f64, mu: f64, eta: f64, chi_bar: f64) -> Result<Self> {
        Self::new(vec![lambda; m], vec![tau; m], vec![mu; m], vec![eta; m], chi_bar)
    }

    pub fn m(&self) -> usize {
        self.lambda.len()
    }

    pub fn is_stationary(&self) -> bool {
        let same = |v: &[f64]| v.iter().all(|x| *x == v[0]);
        same(&self.lambda) && same(&self.tau) && same(&self.mu) && same(&self.eta)
    }

    /// `chi_n = mu_n * chi_bar`
    pub fn chi(&self, n: usize) -> f64 {
        self.mu[n - 1] * self.chi_bar
    }

    /// Bias gain `lambda_n / (1 + lambda_n chi_n)`.
    pub fn bias_gain(&self, n: usize) -> f64 {
        let l = self.lambda[n - 1];
        l / (1.0 + l * self.chi(n))
    }

    /// Threshold `lambda_n mu_n / (1 + lambda_n chi_n)` of the layer activation.
    pub fn prox_step(&self, n: usize) -> f64 {
        self.bias_gain(n) * self.mu[n - 1]
    }

    /// `beta_p^{(n)}` for one frequency.
    #[inline]
    pub fn layer_beta(&self, n: usize, beta_t: f64, beta_d_unit: f64) -> f64 {
        let l = self.lambda[n - 1];
        (1.0 - l * (beta_t + self.tau[n - 1] * beta_d_unit)) / (1.0 + l * self.chi(n))
    }

    /// Leakage product `eta_j ... eta_i` (1 when `j < i`), with `eta_0 = 1`.
    pub fn eta_prod(&self, i: usize, j: usize) -> Result<f64> {
        let m = self.m();
        if i == 0 || i > m + 1 || j > m {
            return Err(StabError::IndexOutOfRange(format!(
                "eta_prod({i}, {j}) needs 1 <= i <= {} and j <= {m}",
                m + 1
            )));
        }
        Ok(self.eta_prod_unchecked(i, j))
    }

    /// `(beta_{i,n,p}, beta~_{i,n,p})` for a single frequency.
    pub fn segment_coeffs(&self, i: usize, n: usize, beta_t: f64, beta_d_unit: f64) -> (f64, f64) {
        let mut prod = 1.0;
        let mut tilde = 0.0;
        for k in i..=n {
            let b = self.layer_beta(k, beta_t, beta_d_unit);
            prod *= b;
            tilde = b * tilde + self.bias_gain(k) * self.eta_prod_unchecked(i, k - 1);
        }
        (prod, tilde)
    }

    pub(crate) fn eta_prod_unchecked(&self, i: usize, j: usize) -> f64 {
        if j < i {
            return 1.0;
        }
        self.eta[i - 1..j].iter().product()
    }
}

/// Spectral coefficient tables materialized over every segment `(i, n)`.
#[derive(Debug, Clone)]
pub struct CoefficientTable {
    m: usize,
    p: usize,
    beta_layer: Vec<Vec<f64>>,
    beta_seg: Vec<Vec<f64>>,
    beta_tilde_seg: Vec<Vec<f64>>,
}

fn seg_index(m: usize, i: usize, n: usize) -> usize {
    // rows i = 1..m, each holding n = i..m
    let before: usize = (1..i).map(|r| m - r + 1).sum();
    before + (n - i)
}

/// `beta_p^{(n)}` for every layer and frequency (m x P).
pub fn beta_layer(schedule: &LayerSchedule, eig: &EigenSystem) -> Vec<Vec<f64>> {
    (1..=schedule.m())
        .map(|n| {
            eig.beta_t
                .iter()
                .zip(&eig.beta_d_unit)
                .map(|(&t, &d)| schedule.layer_beta(n, t, d))
                .collect()
        })
        .collect()
}

pub fn eta_prod(schedule: &LayerSchedule, i: usize, j: usize) -> Result<f64> {
    schedule.eta_prod(i, j)
}

impl CoefficientTable {
    pub fn build(schedule: &LayerSchedule, eig: &EigenSystem) -> Self {
        let m = schedule.m();
        let p = eig.len();
        let layers = beta_layer(schedule, eig);
        let mut beta_seg = Vec::with_capacity(m * (m + 1) / 2);
        let mut beta_tilde_seg = Vec::with_capacity(m * (m + 1) / 2);
        for i in 1..=m {
            let mut prod = vec![1.0; p];
            let mut tilde = vec![0.0; p];
            for n in i..=m {
                let gain = schedule.bias_gain(n) * schedule.eta_prod_unchecked(i, n - 1);
                let layer = &layers[n - 1];
                for q in 0..p {
                    prod[q] *= layer[q];
                    tilde[q] = layer[q] * tilde[q] + gain;
                }
                beta_seg.push(prod.clone());
                beta_tilde_seg.push(tilde.clone());
            }
        }
        Self {
            m,
            p,
            beta_layer: layers,
            beta_seg,
            beta_tilde_seg,
        }
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn len(&self) -> usize {
        self.p
    }

    pub fn is_empty(&self) -> bool {
        self.p == 0
    }

    fn check_seg(&self, i: usize, n: usize) -> Result<usize> {
        if i == 0 || i > n || n > self.m {
            return Err(StabError::IndexOutOfRange(format!(
                "segment ({i}, {n}) needs 1 <= i <= n <= {}",
                self.m
            )));
        }
        Ok(seg_index(self.m, i, n))
    }

    pub fn beta_layer(&self, n: usize) -> Result<&[f64]> {
        if n == 0 || n > self.m {
            return Err(StabError::IndexOutOfRange(format!("layer {n} not in 1..={}", self.m)));
        }
        Ok(&self.beta_layer[n - 1])
    }

    /// `beta_{i,n,p} = prod_{j=i}^n beta_p^{(j)}`
    pub fn beta_seg(&self, i: usize, n: usize) -> Result<&[f64]> {
        let k = self.check_seg(i, n)?;
        Ok(&self.beta_seg[k])
    }

    /// `beta~_{i,n,p}`, the spectrum of the bias-to-signal block of `U_n o ... o U_i`.
    pub fn beta_tilde_seg(&self, i: usize, n: usize) -> Result<&[f64]> {
        let k = self.check_seg(i, n)?;
        Ok(&self.beta_tilde_seg[k])
    }
}

pub fn beta_seg(table: &CoefficientTable, i: usize, n: usize) -> Result<&[f64]> {
    table.beta_seg(i, n)
}

pub fn beta_tilde_seg(table: &CoefficientTable, i: usize, n: usize) -> Result<&[f64]> {
    table.beta_tilde_seg(i, n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::{EigenSystem, FrequencyGrid};
    use num_complex::Complex64;
    use proptest::prelude::*;

    /// Literal double sum for `beta~_{i,n,p}`.
    fn tilde_direct(s: &LayerSchedule, layers: &[Vec<f64>], i: usize, n: usize, q: usize) -> f64 {
        let mut total = 0.0;
        for j in i..n {
            let mut prod = 1.0;
            for k in (j + 1)..=n {
                prod *= layers[k - 1][q];
            }
            total += prod * s.bias_gain(j) * s.eta_prod_unchecked(i, j - 1);
        }
        total + s.bias_gain(n) * s.eta_prod_unchecked(i, n - 1)
    }

    fn synthetic_eig(values: &[(f64, f64)]) -> EigenSystem {
        let grid = FrequencyGrid::new(1, values.len()).unwrap();
        let beta_t: Vec<f64> = values.iter().map(|v| v.0).collect();
        let beta_d: Vec<f64> = values.iter().map(|v| v.1).collect();
        let t_eig = beta_t.iter().map(|b| Complex64::new(b.sqrt(), 0.0)).collect();
        EigenSystem::from_parts(grid, 1, beta_t, beta_d, t_eig, vec![1.0; values.len()]).unwrap()
    }

    #[test]
    fn beta_layer_examples() {
        let s = LayerSchedule::stationary(1, 1.0, 1.0, 0.0, 1.0, 0.0).unwrap();
        assert_eq!(s.layer_beta(1, 0.5, 0.5), 0.0);
        let s = LayerSchedule::stationary(1, 1.0, 0.0, 1.0, 1.0, 1.0).unwrap();
        assert_eq!(s.layer_beta(1, 0.0, 0.0), 0.5);

        let grid = FrequencyGrid::new(8, 8).unwrap();
        let eig = EigenSystem::new(grid, 3, 0.01).unwrap();
        let s = LayerSchedule::stationary(1, 0.5, 0.3, 0.0, 1.0, 0.0).unwrap();
        assert_eq!(beta_layer(&s, &eig)[0][0], 0.5);
    }

    #[test]
    fn eta_prod_examples() {
        let s = LayerSchedule::new(vec![1.0; 3], vec![0.0; 3], vec![0.0; 3], vec![0.9, 0.8, 0.5], 0.0).unwrap();
        assert_eq!(s.eta_prod(2, 1).unwrap(), 1.0);
        assert_eq!(s.eta_prod(3, 3).unwrap(), 0.5);
        assert!(s.eta_prod(0, 1).is_err());
        assert!(s.eta_prod(5, 1).is_err());
        assert!(s.eta_prod(1, 4).is_err());
        assert_eq!(s.eta_prod(4, 3).unwrap(), 1.0);

        let s = LayerSchedule::stationary(15, 1.0, 0.01, 0.0, 0.98, 0.0).unwrap();
        let e = s.eta_prod(1, 15).unwrap();
        assert!((e - 0.98f64.powi(15)).abs() < 1e-15);
    }

    #[test]
    fn segment_examples() {
        // beta^{(1)} = 0.5 and beta^{(2)} = -0.2 at one frequency
        let eig = synthetic_eig(&[(0.5, 0.0)]);
        let s = LayerSchedule::new(vec![1.0, 2.4], vec![0.0; 2], vec![0.0; 2], vec![1.0; 2], 0.0).unwrap();
        let t = CoefficientTable::build(&s, &eig);
        assert!((t.beta_seg(1, 2).unwrap()[0] + 0.1).abs() < 1e-15);
        assert_eq!(t.beta_seg(2, 2).unwrap(), t.beta_layer(2).unwrap());
        assert!(t.beta_seg(2, 1).is_err());
        assert!(t.beta_tilde_seg(1, 3).is_err());
    }

    #[test]
    fn stationary_segment_is_power() {
        let eig = synthetic_eig(&[(0.2, 0.1), (0.9, 0.0), (0.0, 3.0)]);
        let s = LayerSchedule::stationary(6, 0.7, 0.5, 0.0, 1.0, 0.0).unwrap();
        let t = CoefficientTable::build(&s, &eig);
        let layer = t.beta_layer(1).unwrap();
        for q in 0..3 {
            let got = t.beta_seg(1, 6).unwrap()[q];
            assert!((got - layer[q].powi(6)).abs() <= 1e-14 * layer[q].powi(6).abs().max(1e-300));
        }
    }

    #[test]
    fn tilde_three_layer_example() {
        // beta^{(n)} = 0.5: 1 - lambda * c = 0.5 with lambda = 1 -> c = 0.5
        let eig = synthetic_eig(&[(0.5, 0.0)]);
        let s = LayerSchedule::stationary(3, 1.0, 0.0, 0.0, 1.0, 0.0).unwrap();
        let t = CoefficientTable::build(&s, &eig);
        assert!((t.beta_tilde_seg(1, 3).unwrap()[0] - 1.75).abs() < 1e-15);
        let layers = beta_layer(&s, &eig);
        assert!((tilde_direct(&s, &layers, 1, 3, 0) - 1.75).abs() < 1e-15);
    }

    #[test]
    fn limit_cases_hold() {
        let grid = FrequencyGrid::new(6, 6).unwrap();
        let eig = EigenSystem::new(grid, 3, 0.01).unwrap();
        let s = LayerSchedule::new(
            vec![0.3, 1.2, 0.8, 1.9],
            vec![0.01, 0.02, 0.0, 0.5],
            vec![1.0, 0.5, 2.0, 0.0],
            vec![0.9, 0.7, 1.0, 0.2],
            0.3,
        )
        .unwrap();
        let t = CoefficientTable::build(&s, &eig);
        for n in 1..=4 {
            assert_eq!(t.beta_seg(n, n).unwrap(), t.beta_layer(n).unwrap());
            let gain = s.bias_gain(n);
            assert!(t.beta_tilde_seg(n, n).unwrap().iter().all(|&v| v == gain));
        }
    }

    #[test]
    fn stationary_tilde_matches_geometric_closed_form() {
        let eig = synthetic_eig(&[(0.3, 0.05), (1.0, 0.0), (0.01, 0.08)]);
        for eta in [1.0, 0.9, 0.5] {
            let (lambda, chi_bar, mu) = (0.8, 0.2, 1.5);
            let m = 7;
            let s = LayerSchedule::stationary(m, lambda, 1.0, mu, eta, chi_bar).unwrap();
            let t = CoefficientTable::build(&s, &eig);
            let chi = mu * chi_bar;
            for q in 0..3 {
                let b = t.beta_layer(1).unwrap()[q];
                let closed = lambda / (1.0 + lambda * chi)
                    * (0..m).map(|j| b.powi(j as i32) * eta.powi((m - j - 1) as i32)).sum::<f64>();
                let got = t.beta_tilde_seg(1, m).unwrap()[q];
                assert!((got - closed).abs() <= 1e-12 * closed.abs());
            }
        }
        // eta equal to beta: every geometric term equals beta^{m-1}
        let eig = synthetic_eig(&[(0.5, 0.0)]);
        let s = LayerSchedule::stationary(5, 1.0, 0.0, 0.0, 0.5, 0.0).unwrap();
        let t = CoefficientTable::build(&s, &eig);
        let expected = 5.0 * 0.5f64.powi(4);
        assert!((t.beta_tilde_seg(1, 5).unwrap()[0] - expected).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn recursion_matches_double_sum(
            m in 1usize..=6,
            seed in prop::collection::vec((0.05f64..2.0, 0.0f64..0.05, 0.0f64..2.0, 0.0f64..1.2), 6),
            chi_bar in 0.0f64..0.5,
            freqs in prop::collection::vec((0.0f64..1.0, 0.0f64..8.0), 1..64),
        ) {
            let lambda: Vec<f64> = seed.iter().take(m).map(|s| s.0).collect();
            let tau: Vec<f64> = seed.iter().take(m).map(|s| s.1).collect();
            let mu: Vec<f64> = seed.iter().take(m).map(|s| s.2).collect();
            let eta: Vec<f64> = seed.iter().take(m).map(|s| s.3).collect();
            let s = LayerSchedule::new(lambda, tau, mu, eta, chi_bar).unwrap();
            let eig = synthetic_eig(&freqs);
            let t = CoefficientTable::build(&s, &eig);
            let layers = beta_layer(&s, &eig);
            for i in 1..=m {
                for n in i..=m {
                    let rec = t.beta_tilde_seg(i, n).unwrap();
                    for q in 0..freqs.len() {
                        let direct = tilde_direct(&s, &layers, i, n, q);
                        let scale = direct.abs().max(1e-300);
                        prop_assert!((rec[q] - direct).abs() <= 1e-12 * scale.max(1.0),
                            "({i},{n}) p={q}: {} vs {direct}", rec[q]);
                    }
                }
            }
        }
    }

    #[test]
    fn schedule_validation() {
        assert!(LayerSchedule::new(vec![], vec![], vec![], vec![], 0.0).is_err());
        assert!(LayerSchedule::new(vec![0.0], vec![0.0], vec![0.0], vec![1.0], 0.0).is_err());
        assert!(LayerSchedule::new(vec![1.0], vec![-0.1], vec![0.0], vec![1.0], 0.0).is_err());
        assert!(LayerSchedule::new(vec![1.0], vec![0.0], vec![0.0], vec![-1.0], 0.0).is_err());
        assert!(LayerSchedule::new(vec![1.0, 1.0], vec![0.0], vec![0.0], vec![1.0], 0.0).is_err());
        let s = LayerSchedule::new(vec![1.0], vec![0.0], vec![2.0], vec![1.0], 0.25).unwrap();
        assert_eq!(s.chi(1), 0.5);
    }
}
