use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use stab::cli::{self, exit, VerifyOptions};
use stab::config::ScenarioConfig;
use stab::{Result, StabError};

#[derive(Parser)]
#[command(name = "stab", version, about = "Stability certificates for unrolled forward-backward networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Certificates over a stationary (lambda, eta) sweep
    BoundsGrid {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-layer certificate curves of a (possibly nonstationary) schedule
    BoundsLayers {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dense and Monte-Carlo checks of the certificates
    Verify {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, hide = true)]
        tamper_certificate: bool,
    },
    /// Blur an image and restore it with the single-input network
    Restore {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn write(path: &Path, data: &[u8]) -> Result<()> {
    std::fs::write(path, data).map_err(|e| StabError::Io(format!("{}: {e}", path.display())))
}

fn sidecar_path(out: &Path) -> PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(".csv");
    PathBuf::from(name)
}

fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var("STAB_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| StabError::Config(format!("STAB_THREADS must be a positive integer, got {value:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| StabError::Config(e.to_string()))
}

fn run(command: Command) -> Result<i32> {
    configure_threads()?;
    match command {
        Command::BoundsGrid { config, out } => {
            let cfg = ScenarioConfig::load(&config)?;
            let grid = cli::bounds_grid(&cfg)?;
            write(&out, grid.csv.as_bytes())?;
            if grid.failed_cells > 0 {
                eprintln!("{} cell(s) failed, see the error column", grid.failed_cells);
            }
            Ok(grid.exit_code())
        }
        Command::BoundsLayers { config, out } => {
            let cfg = ScenarioConfig::load(&config)?;
            write(&out, cli::bounds_layers(&cfg)?.as_bytes())?;
            Ok(exit::OK)
        }
        Command::Verify {
            config,
            trials,
            seed,
            out,
            tamper_certificate,
        } => {
            let cfg = ScenarioConfig::load(&config)?;
            let opts = VerifyOptions {
                trials,
                seed,
                tamper: tamper_certificate,
            };
            let report = cli::verify(&cfg, &opts)?;
            write(&out, report.csv.as_bytes())?;
            for c in report.checks.iter().filter(|c| !c.ok) {
                eprintln!("violation: {} (margin {:e})", c.name, c.margin);
            }
            Ok(report.exit_code())
        }
        Command::Restore { config, input, out } => {
            let cfg = ScenarioConfig::load(&config)?;
            let data = std::fs::read(&input).map_err(|e| StabError::Io(format!("{}: {e}", input.display())))?;
            let restored = cli::restore(&cfg, &data)?;
            write(&out, &restored.image.encode())?;
            write(&sidecar_path(&out), restored.sidecar.as_bytes())?;
            Ok(exit::OK)
        }
    }
}

fn main() -> ExitCode {
    let parsed = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { exit::USAGE } else { exit::OK };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    let code = match run(parsed.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("stab: {e}");
            cli::exit_code(&e)
        }
    };
    ExitCode::from(code as u8)
}
