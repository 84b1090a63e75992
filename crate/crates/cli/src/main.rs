use std::ops::RangeInclusive;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dashmech_cli::{load_config, parse_seeds, run, sweep, Failure};

/// Dashboard mechanism experiments.
#[derive(Parser)]
#[command(name = "dashmech", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Output directory (beats the config's `out`; default `out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Grid knots, used only when the config has no `grid`.
    #[arg(long, global = true)]
    grid: Option<usize>,
    /// Print errors only.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// One seeded run (the config's `seed`).
    Run { config: PathBuf },
    /// Independent runs over a seed range.
    Sweep {
        config: PathBuf,
        /// Inclusive range `A..B`; defaults to the config's `seeds`.
        #[arg(long, value_parser = parse_seeds)]
        seeds: Option<RangeInclusive<u64>>,
        /// Failure probability of the high-probability single-call bound.
        #[arg(long, default_value_t = 0.05)]
        delta: f64,
        /// Also write a full run directory per seed.
        #[arg(long)]
        keep_runs: bool,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("dashmech: {f}");
            ExitCode::from(f.exit_code())
        }
    }
}

fn execute(cli: &Cli) -> Result<(), Failure> {
    let say = |m: String| {
        if !cli.quiet {
            println!("{m}");
        }
    };
    match &cli.command {
        Command::Run { config } => {
            let cfg = load_config(config, cli.grid)?;
            let out = out_dir(cli, cfg.out.as_deref());
            let checks = run(&cfg, cfg.seed, &out)?;
            say(format!("wrote {}", out.display()));
            for c in &checks.balance {
                say(format!(
                    "agent {}: max |B| {} (bound {}, {})",
                    c.agent,
                    c.max_abs,
                    c.bound,
                    dashmech_cli::report::kind_name(c.kind)
                ));
            }
            if let Some(n) = checks.nash {
                say(format!("static Nash: max |ṽ−v| {}, max best-response gap {}", n.max_value_error, n.max_gap));
            }
            match checks.violation() {
                Some(m) => Err(Failure::Violation(m)),
                None => Ok(()),
            }
        }
        Command::Sweep { config, seeds, delta, keep_runs } => {
            let cfg = load_config(config, cli.grid)?;
            let seeds = match (seeds, cfg.seeds) {
                (Some(r), _) => r.clone(),
                (None, Some([a, b])) => a..=b,
                (None, None) => cfg.seed..=cfg.seed,
            };
            let out = out_dir(cli, cfg.out.as_deref());
            let summary = sweep(&cfg, seeds, &out, *delta, *keep_runs)?;
            say(format!("wrote {}", out.display()));
            say(summary.render());
            match summary.failure() {
                Some(f) => Err(f),
                None => Ok(()),
            }
        }
    }
}

fn out_dir(cli: &Cli, from_config: Option<&str>) -> PathBuf {
    cli.out.clone().or_else(|| from_config.map(PathBuf::from)).unwrap_or_else(|| PathBuf::from("out"))
}
