//! Batch command-line front end.
//!
//! Subcommands dispatch to the library's experiment drivers (plus a raw
//! trajectory dump and the stability-constant report), write their outputs
//! atomically, and translate the result into a CI-friendly exit code:
//!
//! - `0`: completed, all verdicts pass
//! - `10`: completed, at least one verdict inconclusive
//! - `20`: completed, at least one theorem check failed
//! - `1`: usage or runtime error (bad flags, bad config, I/O)
//!
//! With a fixed `--seed`, outputs are byte-identical across runs and across
//! `--threads` settings.

use clap::{Parser, Subcommand};
use meanfield::config::{parse_config, RunConfig};
use meanfield::dynamics::{step_ips2, write_positions_csv, ParticleEnsemble};
use meanfield::error::{Error, Result};
use meanfield::experiments::{
    atomic_write, check_kernel_clt_bound, run_chaos, run_concentration, run_contraction,
    run_convergence_rate, run_coupling_check, run_moment_monitor, ExperimentResult, Verdict,
};
use meanfield::field::MixtureField;
use meanfield::rng::subsystem_rng;
use meanfield::stability::compute_constants;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(
    name = "meanfield",
    version,
    about = "Interacting particle systems with self-generated fields: simulation and theorem checks"
)]
struct Cli {
    /// JSON configuration file (defaults are tuned per subcommand).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Master seed override; fully determines every random artifact.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,

    /// Worker thread count (default: available cores, or MEANFIELD_THREADS).
    #[arg(long, global = true, value_name = "K")]
    threads: Option<usize>,

    /// Output directory (default: the config's out_dir, else ".").
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Cmd {
    /// Dump one raw particle trajectory (sampled-field system) as CSV.
    Simulate,
    /// Print and write the stability/contraction constant report.
    Stability,
    /// Convergence rate of the particle system to the limit flow vs N.
    Rates,
    /// Geometric contraction of the limit flow from separated starts.
    Contract,
    /// Propagation of chaos: pair decorrelation and marginal convergence.
    Chaos,
    /// Tail concentration of the distance to the limit flow.
    Concentrate,
    /// Pathwise audit of the coupling inequality.
    Couple,
    /// Moment boundedness monitor with closed-form ceilings.
    Moments,
    /// Kernel central-limit bound on centered averages.
    Cltbound,
}

impl Cmd {
    fn name(self) -> &'static str {
        match self {
            Cmd::Simulate => "simulate",
            Cmd::Stability => "stability",
            Cmd::Rates => "rates",
            Cmd::Contract => "contract",
            Cmd::Chaos => "chaos",
            Cmd::Concentrate => "concentrate",
            Cmd::Couple => "couple",
            Cmd::Moments => "moments",
            Cmd::Cltbound => "cltbound",
        }
    }
}

const EXIT_INCONCLUSIVE: u8 = 10;
const EXIT_THEOREM_FAIL: u8 = 20;

/// Print a line to stdout, ignoring a closed pipe (e.g. `meanfield ... | head`).
fn say(line: &str) {
    use std::io::Write;
    let _ = writeln!(std::io::stdout(), "{line}");
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::Config(list) = &e {
                for v in list {
                    eprintln!("  - {v}");
                }
            }
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    init_threads(cli.threads)?;

    let mut cfg = match &cli.config {
        Some(path) => parse_config(path)?,
        None => RunConfig::recommended(cli.cmd.name()),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate_for(cli.cmd.name())?;
    let out_dir = cli
        .out
        .clone()
        .or_else(|| cfg.out_dir.clone().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&out_dir)?;

    match cli.cmd {
        Cmd::Simulate => simulate(&cfg, &out_dir),
        Cmd::Stability => stability(&cfg, &out_dir),
        _ => experiment(cli.cmd, &cfg, &out_dir),
    }
}

/// Thread-count resolution: flag, then MEANFIELD_THREADS, then all cores.
fn init_threads(flag: Option<usize>) -> Result<()> {
    let from_env = match std::env::var("MEANFIELD_THREADS") {
        Ok(s) => Some(s.parse::<usize>().map_err(|_| {
            Error::invalid(format!("MEANFIELD_THREADS must be a positive integer, got {s:?}"))
        })?),
        Err(_) => None,
    };
    let threads = flag.or(from_env);
    if let Some(t) = threads {
        if t == 0 {
            return Err(Error::invalid("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn simulate(cfg: &RunConfig, out_dir: &std::path::Path) -> Result<ExitCode> {
    let params = cfg.to_model_params()?;
    let n = cfg.grid[0];
    let mut rng = subsystem_rng(cfg.seed, 0x53494d55); // "SIMU"
    let mut ens = ParticleEnsemble::init_gaussian(
        params.dim,
        n,
        &vec![0.0; params.dim],
        1.0,
        &mut rng,
    )?;
    let mut field = MixtureField::single(params.pprime, vec![0.0; params.dim])?;

    let mut wtr = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["step".to_string(), "particle".to_string()];
    header.extend((0..params.dim).map(|c| format!("coord{c}")));
    wtr.write_record(&header)?;
    write_positions_csv(&mut wtr, &ens)?;
    for _ in 0..cfg.n_steps {
        let (e2, f2) = step_ips2(&ens, &field, n, &params, &mut rng)?;
        ens = e2;
        field = f2;
        write_positions_csv(&mut wtr, &ens)?;
    }
    let bytes = wtr
        .into_inner()
        .map_err(|e| Error::invalid(e.to_string()))?;
    let path = out_dir.join("simulate.csv");
    atomic_write(&path, &bytes)?;
    say(&format!(
        "simulate: {} particles, {} steps, seed {} -> {}",
        n,
        cfg.n_steps,
        cfg.seed,
        path.display()
    ));
    Ok(ExitCode::SUCCESS)
}

fn stability(cfg: &RunConfig, out_dir: &std::path::Path) -> Result<ExitCode> {
    let params = cfg.to_model_params()?;
    let report = compute_constants(&params, cfg.tau)?;
    let json = serde_json::to_string_pretty(&report)?;
    say(&json);
    let path = out_dir.join("stability.json");
    atomic_write(&path, json.as_bytes())?;
    Ok(ExitCode::SUCCESS)
}

fn experiment(cmd: Cmd, cfg: &RunConfig, out_dir: &std::path::Path) -> Result<ExitCode> {
    let ecfg = cfg.to_experiment_config()?;
    let result: ExperimentResult = match cmd {
        Cmd::Rates => run_convergence_rate(&ecfg)?,
        Cmd::Contract => run_contraction(&ecfg)?,
        Cmd::Chaos => run_chaos(&ecfg)?,
        Cmd::Concentrate => run_concentration(&ecfg)?,
        Cmd::Couple => run_coupling_check(&ecfg)?,
        Cmd::Moments => run_moment_monitor(&ecfg)?,
        Cmd::Cltbound => check_kernel_clt_bound(&ecfg)?,
        Cmd::Simulate | Cmd::Stability => unreachable!("handled by the caller"),
    };
    let (csv_path, man_path) = result.write_outputs(&ecfg, out_dir)?;
    for v in &result.verdicts {
        say(&format!("verdict {}: {} — {}", v.name, v.verdict, v.detail));
    }
    let overall = result.overall();
    say(&format!(
        "{} overall: {} ({}, {})",
        result.experiment,
        overall,
        csv_path.display(),
        man_path.display()
    ));
    Ok(match overall {
        Verdict::Pass => ExitCode::SUCCESS,
        Verdict::Inconclusive => ExitCode::from(EXIT_INCONCLUSIVE),
        Verdict::Fail => ExitCode::from(EXIT_THEOREM_FAIL),
    })
}
