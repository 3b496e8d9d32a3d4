//! Command implementations behind the `stab` binary.
//!
//! Every command returns its CSV as a string so that callers (the binary, tests)
//! decide where it goes. Floats are written with 17 significant digits.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::bounds::{
    layer_curves, top_eigenvalue, BoundLedger, FrequencySamples, SegmentNorms,
};
use crate::config::ScenarioConfig;
use crate::error::{Result, StabError};
use crate::network::{make_observation, objective_value, Network, SignalGrid};
use crate::pgm::Pgm;
use crate::probe::{
    dense_averagedness, empirical_lipschitz, power_iteration, singular_probe, two_by_two_oracle, DenseModel,
    NormSpec, ProbeReport, ProbeTarget, DEFAULT_SCALES,
};
use crate::spectral::{prefilter_eigs, EigenSystem, FrequencyGrid, PreFilterSpec};

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const VERIFICATION_FAILED: i32 = 1;
    pub const NUMERIC_FAILURE: i32 = 2;
    pub const USAGE: i32 = 64;
    pub const IO: i32 = 65;
}

pub fn exit_code(err: &StabError) -> i32 {
    match err {
        StabError::Io(_) => exit::IO,
        StabError::NumericalInconsistency(_) => exit::NUMERIC_FAILURE,
        _ => exit::USAGE,
    }
}

pub fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

fn fmt_bool(b: bool) -> String {
    if b { "1" } else { "0" }.to_string()
}

struct CsvOut {
    w: csv::Writer<Vec<u8>>,
}

impl CsvOut {
    fn new(header: &[String]) -> Result<Self> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        w.write_record(header).map_err(|e| StabError::Io(e.to_string()))?;
        Ok(Self { w })
    }

    fn row(&mut self, fields: &[String]) -> Result<()> {
        self.w.write_record(fields).map_err(|e| StabError::Io(e.to_string()))
    }

    fn finish(self) -> Result<String> {
        let bytes = self.w.into_inner().map_err(|e| StabError::Io(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| StabError::Io(e.to_string()))
    }
}

// ---------------------------------------------------------------------------
// bounds-grid
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct GridOutput {
    pub csv: String,
    pub failed_cells: usize,
}

impl GridOutput {
    pub fn exit_code(&self) -> i32 {
        if self.failed_cells > 0 {
            exit::NUMERIC_FAILURE
        } else {
            exit::OK
        }
    }
}

fn alpha_label(alpha: f64) -> String {
    format!("averaged_{alpha}")
}

pub fn grid_header(alphas: &[f64]) -> Vec<String> {
    let mut h: Vec<String> = [
        "lambda",
        "eta",
        "theta_vnn",
        "lower_vnn",
        "upper_vnn",
        "nonexpansive_vnn",
        "theta_bar",
        "theta_hat_F0",
        "theta_hat_F1",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    h.extend(alphas.iter().map(|&a| alpha_label(a)));
    h.extend(
        [
            "vartheta_fixed",
            "vartheta_data",
            "diff_separable",
            "diff_theta_minus_bar",
            "theta_1",
            "error",
        ]
        .iter()
        .map(|s| s.to_string()),
    );
    h
}

#[allow(clippy::too_many_arguments)]
fn grid_cell(
    m: usize,
    lambda: f64,
    eta: f64,
    tau: f64,
    mu: f64,
    chi_bar: f64,
    samples: &FrequencySamples,
    alphas: &[f64],
) -> Result<Vec<String>> {
    let schedule = crate::coeffs::LayerSchedule::stationary(m, lambda, tau, mu, eta, chi_bar)?;
    let norms = SegmentNorms::compute(&schedule, samples, alphas)?;
    let l = BoundLedger::from_norms(&schedule, &norms)?;
    let theta_1 = l.theta[1];
    let scale = 2f64.powi(m as i32 - 1);
    let hat = |k: usize| l.single.get(k).map(|c| c.value);
    let tail = [
        l.vartheta_fixed_init,
        l.vartheta_data_init,
        theta_1.powi(m as i32) - l.theta[m] / scale,
        l.theta[m] - l.theta_bar_m,
        theta_1,
    ];
    let head = [l.vnn.value, l.vnn.lower, l.vnn.upper, l.xout.value];
    let hats = [hat(0), hat(1)];
    if head.iter().chain(&tail).chain(hats.iter().flatten()).any(|v| !v.is_finite()) {
        return Err(StabError::NumericalInconsistency("non-finite certificate".into()));
    }
    let mut row = vec![fmt_float(lambda), fmt_float(eta)];
    row.extend(head[..3].iter().map(|&v| fmt_float(v)));
    row.push(fmt_bool(l.vnn.value <= 1.0));
    row.push(fmt_float(head[3]));
    row.extend(hats.iter().map(|h| h.map(fmt_float).unwrap_or_default()));
    row.extend(l.averaged.iter().map(|t| fmt_bool(t.holds)));
    row.extend(tail.iter().map(|&v| fmt_float(v)));
    row.push(String::new());
    Ok(row)
}

/// One row per `(lambda, eta)` cell, lambda-major.
pub fn bounds_grid(cfg: &ScenarioConfig) -> Result<GridOutput> {
    let (lambdas, etas, tau, mu) = cfg.stationary_sweep()?;
    let eig = cfg.eigensystem()?;
    let samples = FrequencySamples::new(&eig, &[PreFilterSpec::Zero, PreFilterSpec::Identity])?;
    let alphas = cfg.sweep.alpha.clone();
    let m = cfg.schedule.m;
    let chi_bar = cfg.schedule.chi_bar;
    let header = grid_header(&alphas);
    let width = header.len();
    let cells: Vec<(f64, f64)> = lambdas
        .iter()
        .flat_map(|&l| etas.iter().map(move |&e| (l, e)))
        .collect();
    let rows: Vec<std::result::Result<Vec<String>, String>> = cells
        .par_iter()
        .map(|&(lambda, eta)| {
            grid_cell(m, lambda, eta, tau, mu, chi_bar, &samples, &alphas).map_err(|e| e.to_string())
        })
        .collect();
    let mut out = CsvOut::new(&header)?;
    let mut failed = 0;
    for ((lambda, eta), row) in cells.iter().zip(rows) {
        match row {
            Ok(r) => out.row(&r)?,
            Err(msg) => {
                failed += 1;
                let mut r = vec![String::new(); width];
                r[0] = fmt_float(*lambda);
                r[1] = fmt_float(*eta);
                r[width - 1] = msg;
                out.row(&r)?;
            }
        }
    }
    Ok(GridOutput {
        csv: out.finish()?,
        failed_cells: failed,
    })
}

// ---------------------------------------------------------------------------
// bounds-layers
// ---------------------------------------------------------------------------

pub const LAYER_HEADER: [&str; 11] = [
    "n",
    "theta_vnn",
    "lower_vnn",
    "upper_vnn",
    "theta_bar",
    "theta_xout",
    "lower_xout",
    "upper_xout",
    "theta_hat",
    "lower_single",
    "upper_single",
];

/// Per-layer curves `theta_n / 2^{n-1}` of the three families with their bounds.
pub fn bounds_layers(cfg: &ScenarioConfig) -> Result<String> {
    let schedule = cfg.layer_schedule()?;
    let m = schedule.m();
    if m < 2 {
        return Err(StabError::Config("bounds-layers needs m >= 2".into()));
    }
    let eig = cfg.eigensystem()?;
    let samples = FrequencySamples::new(&eig, &[cfg.prefilter()])?;
    let norms = SegmentNorms::compute_parallel(&schedule, &samples, &[])?;
    let ledger = BoundLedger::from_norms(&schedule, &norms)?;
    let rows = layer_curves(&schedule, &norms, 0);
    let header: Vec<String> = LAYER_HEADER.iter().map(|s| s.to_string()).collect();
    let mut out = CsvOut::new(&header)?;
    for r in rows {
        let bar = if r.n == m { fmt_float(ledger.xout.value) } else { String::new() };
        out.row(&[
            r.n.to_string(),
            fmt_float(r.vnn.value),
            fmt_float(r.vnn.lower),
            fmt_float(r.vnn.upper),
            bar,
            fmt_float(r.xout.value),
            fmt_float(r.xout.lower),
            fmt_float(r.xout.upper),
            fmt_float(r.single.value),
            fmt_float(r.single.lower),
            fmt_float(r.single.upper),
        ])?;
    }
    out.finish()
}

// ---------------------------------------------------------------------------
// verify
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default)]
pub struct VerifyOptions {
    pub trials: Option<usize>,
    pub seed: Option<u64>,
    /// Halves every certificate fed to the Monte-Carlo checks (harness self-test).
    pub tamper: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub ok: bool,
    pub margin: f64,
}

#[derive(Debug, Clone)]
pub struct VerifyOutput {
    pub checks: Vec<Check>,
    pub csv: String,
}

impl VerifyOutput {
    pub fn violations(&self) -> usize {
        self.checks.iter().filter(|c| !c.ok).count()
    }

    pub fn exit_code(&self) -> i32 {
        if self.violations() > 0 {
            exit::VERIFICATION_FAILED
        } else {
            exit::OK
        }
    }
}

fn check(name: impl Into<String>, margin: f64) -> Check {
    Check {
        name: name.into(),
        ok: margin >= 0.0,
        margin,
    }
}

/// The configured scenario on a grid of at most 8 x 8 pixels.
fn shrunken_eig(cfg: &ScenarioConfig) -> Result<EigenSystem> {
    let grid = FrequencyGrid::new(cfg.grid.n1.min(8), cfg.grid.n2.min(8))?;
    EigenSystem::new(grid, cfg.grid.blur_k, cfg.grid.epsilon)
}

fn dense_checks(cfg: &ScenarioConfig, checks: &mut Vec<Check>) -> Result<()> {
    let schedule = cfg.layer_schedule()?;
    let m = schedule.m();
    let eig = shrunken_eig(cfg)?;
    let samples = FrequencySamples::new(&eig, &[])?;
    let alphas = cfg.sweep.alpha.clone();
    let norms = SegmentNorms::compute(&schedule, &samples, &alphas)?;
    let ledger = BoundLedger::from_norms(&schedule, &norms)?;
    let model = DenseModel::new(&schedule, &eig)?;
    for i in 1..=m {
        for n in i..=m {
            let dense = power_iteration(&model.segment(i, n, true)?, (i * 1000 + n) as u64).norm;
            let closed = norms.a.get(i, n).sqrt();
            checks.push(check(format!("dense_a_{i}_{n}"), 1e-8 - (dense - closed).abs() / closed.max(1e-300)));
        }
    }
    let dense = power_iteration(&model.segment(1, m, false)?, 1).norm;
    let closed = norms.a_bar.get(1, m).sqrt();
    checks.push(check(format!("dense_abar_1_{m}"), 1e-8 - (dense - closed).abs() / closed.max(1e-300)));
    for t in &ledger.averaged {
        let d = dense_averagedness(&schedule, &eig, t.alpha)?;
        let agree = d.holds == t.holds;
        checks.push(Check {
            name: format!("dense_averaged_{}", t.alpha),
            ok: agree,
            margin: if agree { t.margin.abs() } else { -t.margin.abs() },
        });
    }
    Ok(())
}

fn oracle_check(seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let beta: f64 = rng.random_range(-2.0..2.0);
        let tilde: f64 = rng.random_range(-2.0..2.0);
        let eta: f64 = rng.random_range(0.0..1.0);
        let w: f64 = rng.random_range(0.01..1.01);
        let o = two_by_two_oracle(beta, tilde, eta, w);
        let f = top_eigenvalue(beta * beta, eta * eta, w * tilde * tilde)?;
        worst = worst.max((o - f).abs() / o.max(1.0));
    }
    Ok(check("oracle_2x2", 1e-14 - worst))
}

#[allow(clippy::too_many_arguments)]
fn empirical_check(
    net: &Network,
    target: ProbeTarget,
    norm: NormSpec,
    certificate: f64,
    lower: f64,
    trials: usize,
    seed: u64,
    tight: bool,
    label: &str,
    checks: &mut Vec<Check>,
) -> Result<ProbeReport> {
    let probe = singular_probe(net.schedule, net.eig, &target)?;
    let report = empirical_lipschitz(net, target, norm, certificate, trials, seed, &DEFAULT_SCALES, &[probe])?;
    checks.push(Check {
        name: format!("empirical_{label}"),
        ok: !report.violation,
        margin: report.margin(),
    });
    if tight {
        checks.push(check(format!("tight_{label}"), report.empirical_lip - 0.999 * lower));
    }
    Ok(report)
}

pub fn verify(cfg: &ScenarioConfig, opts: &VerifyOptions) -> Result<VerifyOutput> {
    let trials = opts.trials.unwrap_or(cfg.verify.trials);
    if trials == 0 {
        return Err(StabError::Config("trials must be at least 1".into()));
    }
    let seed = opts.seed.unwrap_or(cfg.verify.seed);
    let mut checks = vec![oracle_check(seed)?];
    dense_checks(cfg, &mut checks)?;

    let schedule = cfg.layer_schedule()?;
    let eig = cfg.eigensystem()?;
    let prefilter = cfg.prefilter();
    let ledger = BoundLedger::compute(&eig, &schedule, std::slice::from_ref(&prefilter), &[])?;
    let prox = cfg.prox_spec()?;
    let net = Network::new(&schedule, &eig, prox)?;
    let factor = if opts.tamper { 0.5 } else { 1.0 };
    let linear = prox == crate::network::ProxSpec::Identity;
    empirical_check(
        &net,
        ProbeTarget::Virtual,
        NormSpec::WeightedProduct,
        factor * ledger.vnn.value,
        ledger.vnn.lower,
        trials,
        seed,
        linear,
        "vnn",
        &mut checks,
    )?;
    empirical_check(
        &net,
        ProbeTarget::XOutput,
        NormSpec::Seminorm,
        factor * ledger.xout.value,
        ledger.xout.lower,
        trials,
        seed,
        linear,
        "xout",
        &mut checks,
    )?;
    if let Some(single) = ledger.single.first() {
        let phi = prefilter_eigs(&prefilter, &eig)?;
        empirical_check(
            &net,
            ProbeTarget::SingleInput(phi),
            NormSpec::WeightedInput,
            factor * single.value,
            single.lower,
            trials,
            seed,
            linear,
            "single",
            &mut checks,
        )?;
    }

    let mut out = CsvOut::new(&["name".into(), "status".into(), "margin".into()])?;
    for c in &checks {
        out.row(&[
            c.name.clone(),
            if c.ok { "ok" } else { "violation" }.to_string(),
            fmt_float(c.margin),
        ])?;
    }
    Ok(VerifyOutput {
        checks,
        csv: out.finish()?,
    })
}

// ---------------------------------------------------------------------------
// restore
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct RestoreOutput {
    pub image: Pgm,
    pub sidecar: String,
    pub restored: SignalGrid,
    pub observation: SignalGrid,
    pub truth: SignalGrid,
}

/// Blurs (and optionally corrupts) the input image, then runs the single-input network.
///
/// The grid size is taken from the image; the `[grid]` section supplies the blur
/// and the weight floor.
pub fn restore(cfg: &ScenarioConfig, input: &[u8]) -> Result<RestoreOutput> {
    let img = Pgm::parse(input)?;
    let grid = FrequencyGrid::new(img.height, img.width)?;
    let eig = EigenSystem::new(grid, cfg.grid.blur_k, cfg.grid.epsilon)?;
    let schedule = cfg.layer_schedule()?;
    let prox = cfg.prox_spec()?;
    let prefilter = cfg.prefilter();
    let truth = SignalGrid::from_flat(grid, img.to_unit())?;
    let (y, b0) = make_observation(&truth, &eig, cfg.restore.noise_sigma, cfg.verify.seed)?;
    let net = Network::new(&schedule, &eig, prox)?;
    let phi: Vec<Complex64> = prefilter_eigs(&prefilter, &eig)?;
    let x0 = net.apply_prefilter(&phi, &b0)?;
    let traj = net.trajectory(&x0, &b0)?;
    let restored = traj.last().expect("nonempty").clone();

    let mut out = CsvOut::new(&["key".into(), "value".into()])?;
    for (n, x) in traj.iter().enumerate() {
        let k = n.max(1);
        let j = objective_value(
            x,
            &y,
            &eig,
            schedule.tau[k - 1],
            schedule.mu[k - 1],
            schedule.chi_bar,
            &prox,
        )?;
        out.row(&[format!("objective_{n}"), fmt_float(j)])?;
    }
    let dist = |a: &SignalGrid, b: &SignalGrid| SignalGrid::new(&a.values - &b.values).norm();
    out.row(&["dist_observation_truth".into(), fmt_float(dist(&y, &truth))])?;
    out.row(&["dist_restored_truth".into(), fmt_float(dist(&restored, &truth))])?;

    let ledger = BoundLedger::compute(&eig, &schedule, std::slice::from_ref(&prefilter), &cfg.sweep.alpha)?;
    let mut kv = vec![
        ("lip_vnn", ledger.vnn.value),
        ("lower_vnn", ledger.vnn.lower),
        ("upper_vnn", ledger.vnn.upper),
        ("lip_xout", ledger.xout.value),
        ("lower_xout", ledger.xout.lower),
        ("upper_xout", ledger.xout.upper),
    ];
    if let Some(s) = ledger.single.first() {
        kv.extend([("lip_single", s.value), ("lower_single", s.lower), ("upper_single", s.upper)]);
    }
    kv.extend([
        ("corollary_lower", ledger.corollary_lower),
        ("corollary_upper", ledger.corollary_upper),
        ("eta_1m", ledger.eta_1m),
        ("vartheta_fixed_init", ledger.vartheta_fixed_init),
        ("vartheta_data_init", ledger.vartheta_data_init),
    ]);
    for (k, v) in kv {
        out.row(&[k.to_string(), fmt_float(v)])?;
    }
    for (n, t) in ledger.theta.iter().enumerate() {
        out.row(&[format!("theta_{n}"), fmt_float(*t)])?;
    }
    if let Some(th) = &ledger.theta_hat {
        for (n, t) in th.iter().enumerate() {
            out.row(&[format!("theta_hat_{n}"), fmt_float(*t)])?;
        }
    }
    for t in &ledger.averaged {
        out.row(&[format!("b_alpha_{}", t.alpha), fmt_float(t.b_alpha)])?;
        out.row(&[alpha_label(t.alpha), fmt_bool(t.holds)])?;
    }

    Ok(RestoreOutput {
        image: Pgm::from_unit(img.width, img.height, restored.as_slice()),
        sidecar: out.finish()?,
        restored,
        observation: y,
        truth,
    })
}
