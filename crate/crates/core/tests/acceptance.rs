//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits nonzero
//! if any criterion fails.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::path::PathBuf;
use std::time::Instant;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use stab::bounds::{stationary_report, BoundLedger, FrequencySamples, SegmentNorms};
use stab::cli;
use stab::coeffs::LayerSchedule;
use stab::config::ScenarioConfig;
use stab::network::{Network, ProxSpec};
use stab::probe::{empirical_lipschitz, power_iteration, singular_probe, DenseModel, NormSpec, ProbeTarget, DEFAULT_SCALES};
use stab::spectral::{prefilter_eigs, EigenSystem, FrequencyGrid, PreFilterSpec};

type Outcome = Result<String, String>;

const SLACK: f64 = -1e-12;

fn configs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn sweep_config() -> ScenarioConfig {
    ScenarioConfig::from_toml_str(
        r#"
[grid]
n1 = 256
n2 = 256
blur_k = 3
epsilon = 1e-2

[schedule]
m = 15
lambda = { start = 0.01, stop = 2.0, count = 50 }
eta = { start = 0.0, stop = 1.0, count = 25 }
tau = 1e-2
mu = 0.0
chi_bar = 0.0
"#,
    )
    .expect("sweep config parses")
}

fn random_schedule(rng: &mut ChaCha8Rng, m: usize) -> LayerSchedule {
    let lambda = (0..m).map(|_| rng.random_range(0.05..2.0)).collect();
    let tau = (0..m).map(|_| rng.random_range(0.0..0.1)).collect();
    let mu = (0..m).map(|_| rng.random_range(0.0..2.0)).collect();
    let eta = (0..m).map(|_| rng.random_range(0.0..1.0)).collect();
    let chi_bar = rng.random_range(0.0..0.05);
    LayerSchedule::new(lambda, tau, mu, eta, chi_bar).expect("valid random schedule")
}

fn random_eig(rng: &mut ChaCha8Rng, n1: usize, n2: usize) -> EigenSystem {
    let kmax = n1.min(n2);
    let choices: Vec<usize> = [1, 3, 5].into_iter().filter(|&k| k <= kmax).collect();
    let k = choices[rng.random_range(0..choices.len())];
    let eps = rng.random_range(1e-3..1e-1);
    EigenSystem::new(FrequencyGrid::new(n1, n2).unwrap(), k, eps).unwrap()
}

/// 1. Dense power-iteration norms of every segment against the closed form.
fn oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    let mut segments = 0;
    for side in [4usize, 8] {
        for m in 1..=3 {
            for trial in 0..20 {
                let eig = random_eig(&mut rng, side, side);
                let s = random_schedule(&mut rng, m);
                let samples = FrequencySamples::new(&eig, &[]).map_err(|e| e.to_string())?;
                let norms = SegmentNorms::compute(&s, &samples, &[]).map_err(|e| e.to_string())?;
                let model = DenseModel::new(&s, &eig).map_err(|e| e.to_string())?;
                for i in 1..=m {
                    for n in i..=m {
                        let dense = power_iteration(&model.segment(i, n, true).unwrap(), trial as u64).norm;
                        let closed = norms.a.get(i, n).sqrt();
                        let rel = (dense - closed).abs() / closed;
                        worst = worst.max(rel);
                        segments += 1;
                        if !(rel <= 1e-8) {
                            return Err(format!(
                                "{side}x{side}, m={m}, segment ({i},{n}): dense {dense:e} vs closed {closed:e} (rel {rel:e})"
                            ));
                        }
                    }
                }
            }
        }
    }
    Ok(format!("{segments} segments, worst relative error {worst:.2e} (tol 1e-8)"))
}

struct Cell {
    lambda: f64,
    eta: f64,
    ledger: BoundLedger,
    worst_projection: f64,
}

fn sweep_cells() -> Result<(Vec<Cell>, f64), String> {
    let cfg = sweep_config();
    let (lambdas, etas, tau, mu) = cfg.stationary_sweep().map_err(|e| e.to_string())?;
    let eig = cfg.eigensystem().map_err(|e| e.to_string())?;
    let filters = [PreFilterSpec::constant(0.0), PreFilterSpec::constant(0.5), PreFilterSpec::constant(1.0)];
    let samples = FrequencySamples::new(&eig, &filters).map_err(|e| e.to_string())?;
    let m = cfg.schedule.m;
    let mut cells = Vec::new();
    for &lambda in &lambdas {
        for &eta in &etas {
            let s = LayerSchedule::stationary(m, lambda, tau, mu, eta, cfg.schedule.chi_bar).unwrap();
            let norms = SegmentNorms::compute_parallel(&s, &samples, &[]).map_err(|e| e.to_string())?;
            let mut worst_projection = f64::INFINITY;
            for i in 1..=m {
                for n in i..=m {
                    worst_projection = worst_projection.min(norms.a.get(i, n) - norms.a_bar.get(i, n));
                }
            }
            let ledger = BoundLedger::from_norms(&s, &norms).map_err(|e| e.to_string())?;
            cells.push(Cell {
                lambda,
                eta,
                ledger,
                worst_projection,
            });
        }
    }
    let sup_c = (0..eig.len())
        .map(|p| eig.beta_t[p] + tau * eig.beta_d_unit[p])
        .fold(f64::NEG_INFINITY, f64::max);
    Ok((cells, sup_c))
}

/// 2. Lower/upper sandwiches and the orderings between the certificates.
fn sandwich_suite(cells: &[Cell]) -> Outcome {
    let m = 15;
    let scale = 2f64.powi(m - 1);
    let mut worst = f64::INFINITY;
    let mut record = |what: &str, cell: &Cell, slack: f64| -> Result<(), String> {
        worst = worst.min(slack);
        if slack >= SLACK {
            Ok(())
        } else {
            Err(format!("{what} at lambda={}, eta={}: slack {slack:e}", cell.lambda, cell.eta))
        }
    };
    for c in cells {
        let l = &c.ledger;
        record("vnn sandwich", c, l.vnn.slack())?;
        record("x-output sandwich", c, l.xout.slack())?;
        for (k, cert) in l.single.iter().enumerate() {
            record(&format!("single-input sandwich (filter {k})"), c, cert.slack())?;
        }
        record("a_bar <= a", c, c.worst_projection)?;
        record("theta_bar <= theta", c, l.theta[m as usize] - l.theta_bar_m)?;
        record("theta_m / 2^(m-1) <= theta_1^m", c, l.theta[1].powi(m) - l.theta[m as usize] / scale)?;
        record("theta_m / 2^(m-1) >= eta^m", c, l.vnn.value - c.eta.powi(m))?;
    }
    Ok(format!("{} cells, smallest slack {worst:e} (tol -1e-12)", cells.len()))
}

/// 3. The 15-layer nonexpansive region is strictly larger than the one-layer region.
fn region_growth(cells: &[Cell]) -> Outcome {
    let deep: Vec<bool> = cells.iter().map(|c| c.ledger.vnn.value <= 1.0).collect();
    let shallow: Vec<bool> = cells.iter().map(|c| c.ledger.theta[1] <= 1.0).collect();
    let n_deep = deep.iter().filter(|&&b| b).count();
    let n_shallow = shallow.iter().filter(|&&b| b).count();
    let n_both = deep.iter().zip(&shallow).filter(|(d, s)| **d && **s).count();
    let msg = format!("|deep|={n_deep}, |shallow|={n_shallow}, |deep and shallow|={n_both}");
    if n_deep > n_both && n_deep > n_shallow {
        Ok(msg)
    } else {
        Err(msg)
    }
}

/// 4. Larger pre-filters never give a smaller single-input certificate.
fn prefilter_monotonicity(cells: &[Cell], sup_c: f64) -> Outcome {
    let mut tested = 0;
    let mut worst = f64::INFINITY;
    for c in cells.iter().filter(|c| c.lambda * sup_c <= 1.0) {
        let v: Vec<f64> = c.ledger.single.iter().map(|cert| cert.value).collect();
        let slack = (v[1] - v[0]).min(v[2] - v[1]);
        worst = worst.min(slack);
        tested += 1;
        if slack < SLACK {
            return Err(format!(
                "lambda={}, eta={}: phi 0/0.5/1 give {:e}/{:e}/{:e}",
                c.lambda, c.eta, v[0], v[1], v[2]
            ));
        }
    }
    if tested == 0 {
        return Err("no cell satisfies the step-size condition".into());
    }
    Ok(format!("{tested} cells under the step-size condition, smallest slack {worst:e} (tol -1e-12)"))
}

/// 5. `b_1 = a_{1,m}` and the alpha = 1 test coincides with nonexpansiveness.
fn averagedness_consistency() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut worst = 0.0f64;
    let mut holds = 0;
    for trial in 0..100 {
        let n1 = rng.random_range(6..=20);
        let n2 = rng.random_range(6..=20);
        let eig = random_eig(&mut rng, n1, n2);
        let m = rng.random_range(1..=15);
        let mut s = random_schedule(&mut rng, m);
        // keep a useful share of nonexpansive configurations
        for l in s.lambda.iter_mut() {
            *l *= rng.random_range(0.1..1.0);
        }
        let samples = FrequencySamples::new(&eig, &[]).map_err(|e| e.to_string())?;
        let norms = SegmentNorms::compute(&s, &samples, &[1.0]).map_err(|e| e.to_string())?;
        let ledger = BoundLedger::from_norms(&s, &norms).map_err(|e| e.to_string())?;
        let diff = (norms.b_alpha[0] - norms.a.get(1, m)).abs();
        worst = worst.max(diff);
        if diff > 1e-12 {
            return Err(format!("config {trial}: |b_1 - a_1m| = {diff:e}"));
        }
        let nonexpansive = ledger.theta[m] / 2f64.powi(m as i32 - 1) <= 1.0;
        if ledger.averaged[0].holds != nonexpansive {
            return Err(format!("config {trial}: alpha = 1 test disagrees with theta_m / 2^(m-1) <= 1"));
        }
        holds += usize::from(nonexpansive);
    }
    Ok(format!("100 configs ({holds} nonexpansive), max |b_1 - a_1m| = {worst:e}"))
}

/// 6. Monte-Carlo ratios never exceed the certificates; linear case is tight.
fn empirical_certification() -> Outcome {
    let eig = EigenSystem::new(FrequencyGrid::new(64, 64).unwrap(), 3, 1e-2).unwrap();
    let phi: Vec<Complex64> = prefilter_eigs(&PreFilterSpec::Identity, &eig).unwrap();
    let samples = FrequencySamples::new(&eig, &[PreFilterSpec::Identity]).map_err(|e| e.to_string())?;
    let mut lines = Vec::new();
    let mut min_margin = f64::INFINITY;
    let mut min_tight = f64::INFINITY;
    for (pi, prox) in [ProxSpec::Identity, ProxSpec::L1, ProxSpec::NonnegProjection].into_iter().enumerate() {
        for (ci, &(lambda, eta)) in [(0.5, 0.9), (1.0, 0.98), (1.5, 0.5)].iter().enumerate() {
            let s = LayerSchedule::stationary(15, lambda, 1e-2, 0.0, eta, 0.0).unwrap();
            let norms = SegmentNorms::compute_parallel(&s, &samples, &[]).map_err(|e| e.to_string())?;
            let ledger = BoundLedger::from_norms(&s, &norms).map_err(|e| e.to_string())?;
            let net = Network::new(&s, &eig, prox).map_err(|e| e.to_string())?;
            let families = [
                (ProbeTarget::Virtual, NormSpec::WeightedProduct, ledger.vnn.value, "vnn"),
                (ProbeTarget::XOutput, NormSpec::Seminorm, ledger.xout.value, "xout"),
                (ProbeTarget::SingleInput(phi.clone()), NormSpec::WeightedInput, ledger.single[0].value, "single"),
            ];
            for (target, norm, cert, label) in families {
                let seeded = singular_probe(&s, &eig, &target).map_err(|e| e.to_string())?;
                let seed = 6000 + 100 * pi as u64 + 10 * ci as u64;
                let report = empirical_lipschitz(&net, target.clone(), norm, cert, 1000, seed, &DEFAULT_SCALES, &[seeded])
                    .map_err(|e| e.to_string())?;
                min_margin = min_margin.min(report.margin() / cert);
                if report.violation {
                    return Err(format!(
                        "{prox:?} lambda={lambda} eta={eta} {label}: empirical {:e} > certificate {cert:e}",
                        report.empirical_lip
                    ));
                }
                if prox == ProxSpec::Identity && label == "vnn" {
                    let lower = norms.a.get(1, 15).sqrt();
                    let ratio = report.empirical_lip / lower;
                    min_tight = min_tight.min(ratio);
                    if ratio < 0.999 {
                        return Err(format!(
                            "identity lambda={lambda} eta={eta}: empirical {:e} < 0.999 sqrt(a_1m) = {:e}",
                            report.empirical_lip,
                            0.999 * lower
                        ));
                    }
                }
            }
        }
        lines.push(format!("{prox:?}"));
    }
    Ok(format!(
        "{} proxes x 3 cells x 3 families, min relative margin {min_margin:.3e}, identity empirical/sqrt(a_1m) >= {min_tight:.6}",
        lines.len()
    ))
}

/// 7. Stationary closed-form conditions.
fn stationary_conditions() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let mut sufficient_hits = 0;
    let mut interval_points = 0;
    let mut worst_eta = 0.0f64;
    for trial in 0..1000 {
        let n = rng.random_range(6..=16);
        let eig = random_eig(&mut rng, n, n);
        let m = rng.random_range(1..=15);
        let tau = rng.random_range(0.0..0.05);
        let (mu, chi_bar) = match trial % 3 {
            0 => (0.0, 0.0),
            1 => (rng.random_range(0.0..2.0), 0.0),
            _ => (rng.random_range(0.0..2.0), rng.random_range(0.0..0.05)),
        };
        let mut lambda = rng.random_range(0.01..2.5);
        let mut eta = rng.random_range(0.0..1.0);
        let probe = LayerSchedule::stationary(m, lambda, tau, mu, eta, chi_bar).unwrap();
        let first = stationary_report(&probe, &eig).map_err(|e| e.to_string())?;

        // eta_max against bisection on "every quadratic in lambda has a real root"
        let c: Vec<f64> = (0..eig.len()).map(|p| eig.beta_t[p] + tau * eig.beta_d_unit[p]).collect();
        let real_roots = |e: f64| (0..eig.len()).all(|p| e * e * (c[p] * c[p] + eig.weights[p]) <= c[p] * c[p]);
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        while hi - lo > 1e-11 {
            let mid = 0.5 * (lo + hi);
            if real_roots(mid) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let err = (first.eta_max - lo).abs();
        worst_eta = worst_eta.max(err);
        if err > 1e-10 {
            return Err(format!("config {trial}: eta_max {:e} vs bisection {lo:e}", first.eta_max));
        }

        // half the draws target the admissible region so the implication is exercised
        if trial % 2 == 0 {
            eta = rng.random_range(0.0..1.0) * first.eta_max;
            let s = LayerSchedule::stationary(m, lambda, tau, mu, eta, chi_bar).unwrap();
            if let Some((a, b)) = stationary_report(&s, &eig).map_err(|e| e.to_string())?.lambda_interval {
                lambda = a + rng.random_range(0.0..1.0) * (b - a);
            }
        }
        let s = LayerSchedule::stationary(m, lambda, tau, mu, eta, chi_bar).unwrap();
        let report = stationary_report(&s, &eig).map_err(|e| e.to_string())?;
        let lip = BoundLedger::compute(&eig, &s, &[], &[]).map_err(|e| e.to_string())?.vnn.value;
        if report.sufficient_ok {
            sufficient_hits += 1;
            if lip > 1.0 + 1e-12 {
                return Err(format!("config {trial}: sufficient condition holds but lip = {lip:e}"));
            }
        }

        if let Some((a, b)) = report.lambda_interval {
            for j in 1..10 {
                let l = a + (b - a) * j as f64 / 10.0;
                let sj = LayerSchedule::stationary(m, l, tau, mu, eta, chi_bar).unwrap();
                let rj = stationary_report(&sj, &eig).map_err(|e| e.to_string())?;
                interval_points += 1;
                if !rj.sufficient_ok {
                    return Err(format!(
                        "config {trial}: lambda={l} inside [{a}, {b}] fails the sufficient condition (margin {:e})",
                        rj.sufficient_margin
                    ));
                }
                let lj = BoundLedger::compute(&eig, &sj, &[], &[]).map_err(|e| e.to_string())?.vnn.value;
                if lj > 1.0 + 1e-12 {
                    return Err(format!("config {trial}: lambda={l} in interval but lip = {lj:e}"));
                }
            }
        }
    }
    if sufficient_hits == 0 || interval_points == 0 {
        return Err(format!(
            "vacuous run: {sufficient_hits} sufficient configs, {interval_points} interval points"
        ));
    }
    Ok(format!(
        "1000 configs, {sufficient_hits} satisfy the sufficient condition, {interval_points} interval points, eta_max error <= {worst_eta:.1e}"
    ))
}

/// 8. Per-layer curves of the nonstationary configuration.
fn nonstationary_curves() -> Outcome {
    let cfg = ScenarioConfig::load(&configs_dir().join("nonstationary.toml")).map_err(|e| e.to_string())?;
    let s = cfg.layer_schedule().map_err(|e| e.to_string())?;
    let in_range = |v: &[f64], lo: f64, hi: f64| v.iter().all(|x| (lo..=hi).contains(x));
    let ok_config = cfg.grid.blur_k == 5
        && in_range(&s.lambda, 0.5128, 0.9585)
        && in_range(&s.tau, 0.0099, 0.0249)
        && s.eta.iter().all(|&e| e == 0.98)
        && (1..=s.m()).all(|n| s.chi(n) == 1e-3)
        && cfg.prefilter() == PreFilterSpec::Identity
        && s.m() == 15;
    if !ok_config {
        return Err("configs/nonstationary.toml does not describe the reference configuration".into());
    }
    let csv = cli::bounds_layers(&cfg).map_err(|e| e.to_string())?;
    let mut reader = csv::Reader::from_reader(csv.as_bytes());
    let mut rows = 0;
    let mut largest = 0.0f64;
    for rec in reader.records() {
        let rec = rec.map_err(|e| e.to_string())?;
        let f = |k: usize| rec[k].parse::<f64>().unwrap();
        let n = &rec[0];
        for (name, v, lo, hi) in [("vnn", f(1), f(2), f(3)), ("xout", f(5), f(6), f(7)), ("single", f(8), f(9), f(10))] {
            largest = largest.max(v).max(hi);
            if !(lo <= v && v <= hi) {
                return Err(format!("n={n} {name}: {v:e} outside [{lo:e}, {hi:e}]"));
            }
            if !(v < 1e3) {
                return Err(format!("n={n} {name}: {v:e} is not below 1e3"));
            }
        }
        rows += 1;
    }
    if rows != 15 {
        return Err(format!("expected 15 rows, got {rows}"));
    }
    Ok(format!("15 layers, all curves within bounds, largest value {largest:.4}"))
}

/// 9. Byte-identical sweep CSV across runs and thread counts.
fn determinism() -> Outcome {
    let cfg = sweep_config();
    let run = |threads: usize| -> Result<String, String> {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().map_err(|e| e.to_string())?;
        pool.install(|| cli::bounds_grid(&cfg)).map(|g| g.csv).map_err(|e| e.to_string())
    };
    let a = run(1)?;
    let b = run(1)?;
    let c = run(8)?;
    if a != b {
        return Err("two single-thread runs differ".into());
    }
    if a != c {
        return Err("1-thread and 8-thread runs differ".into());
    }
    Ok(format!("{} bytes identical across 3 runs (1, 1, 8 threads)", a.len()))
}

fn report(idx: usize, name: &str, start: Instant, outcome: &Outcome) -> bool {
    let secs = start.elapsed().as_secs_f64();
    match outcome {
        Ok(msg) => println!("PASS criterion {idx} ({name}): {msg} [{secs:.1}s]"),
        Err(msg) => println!("FAIL criterion {idx} ({name}): {msg} [{secs:.1}s]"),
    }
    outcome.is_ok()
}

fn main() {
    let mut passed = 0;
    let mut total = 0;
    let mut tally = |ok: bool| {
        total += 1;
        passed += usize::from(ok);
    };

    let t = Instant::now();
    tally(report(1, "oracle equivalence", t, &oracle_equivalence()));

    let t = Instant::now();
    match sweep_cells() {
        Ok((cells, sup_c)) => {
            tally(report(2, "sandwich suite", t, &sandwich_suite(&cells)));
            let t = Instant::now();
            tally(report(3, "nonexpansive region growth", t, &region_growth(&cells)));
            let t = Instant::now();
            tally(report(4, "pre-filter monotonicity", t, &prefilter_monotonicity(&cells, sup_c)));
        }
        Err(e) => {
            for (i, name) in [(2, "sandwich suite"), (3, "nonexpansive region growth"), (4, "pre-filter monotonicity")] {
                tally(report(i, name, t, &Err(e.clone())));
            }
        }
    }

    let t = Instant::now();
    tally(report(5, "averagedness consistency", t, &averagedness_consistency()));
    let t = Instant::now();
    tally(report(6, "empirical certification", t, &empirical_certification()));
    let t = Instant::now();
    tally(report(7, "stationary conditions", t, &stationary_conditions()));
    let t = Instant::now();
    tally(report(8, "nonstationary curves", t, &nonstationary_curves()));
    let t = Instant::now();
    tally(report(9, "determinism", t, &determinism()));

    println!("acceptance: {passed}/{total} criteria passed");
    if passed != total {
        std::process::exit(1);
    }
}
