use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use kimad::allocator::{allocate_bruteforce, allocate_dp, Allocation, AllocationProblem};
use kimad::config::load_config;
use kimad::records::{summarize, to_records, write_records_file, write_summary_file, Summary};
use kimad::simulator::{run, sweep, Mode, SimConfig};
use kimad::{verify, Error, Result};

#[derive(Parser)]
#[command(name = "kimad", version, about = "Bandwidth-adaptive EF21 training simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute one configuration and write rounds.csv and summary.json.
    Run {
        #[command(flatten)]
        common: Common,
        /// Override the configured mode (gd, ef21, kimad, kimad+).
        #[arg(long)]
        mode: Option<Mode>,
    },
    /// Run EF21 once per fixed k and report the best.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated k values.
        #[arg(long, value_delimiter = ',', required = true)]
        k: Vec<usize>,
    },
    /// Run the built-in property and theory checks.
    Verify {
        #[arg(long, default_value_t = 21)]
        seed: u64,
    },
    /// Solve an allocation problem (JSON) exhaustively and with the DP.
    Oracle {
        /// Problem file: {"layers": [[{"cost_bits": .., "error": ..}, ..], ..], "budget_bits": .., "discretization": ..}
        #[arg(long)]
        problem: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    /// Configuration file; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Override the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the configured round count.
    #[arg(long)]
    rounds: Option<usize>,
}

impl Common {
    fn load(&self) -> Result<SimConfig> {
        let mut c = match &self.config {
            Some(p) => load_config(p)?,
            None => SimConfig::default(),
        };
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(r) = self.rounds {
            c.rounds = r;
        }
        Ok(c)
    }
}

#[derive(Serialize)]
struct SweepEntry {
    k: usize,
    records: String,
    summary: Summary,
}

#[derive(Serialize)]
struct SweepSummary {
    best_k: usize,
    best_final_loss: f64,
    runs: Vec<SweepEntry>,
}

#[derive(Serialize)]
struct OracleReport {
    bruteforce: Allocation,
    dp: Allocation,
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io(format!("{}: {e}", dir.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Io(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Run { common, mode } => {
            let mut config = common.load()?;
            if let Some(m) = mode {
                config.mode = m;
            }
            config.validate()?;
            log::info!("running {} for up to {} rounds", config.mode, config.rounds);
            let metrics = run(config.clone())?;
            create_dir(&common.out)?;
            write_records_file(&common.out.join("rounds.csv"), &to_records(&metrics))?;
            let summary = summarize(&config, &metrics);
            write_summary_file(&common.out.join("summary.json"), &summary)?;
            println!(
                "{}: {} rounds, final loss {:.6e}, sim time {:.3} s",
                summary.mode, summary.rounds, summary.final_loss, summary.total_sim_time_s
            );
        }
        Command::Sweep { common, k } => {
            let config = common.load()?;
            let result = sweep(&config, &k)?;
            create_dir(&common.out)?;
            let mut runs = Vec::with_capacity(result.runs.len());
            for r in &result.runs {
                let name = format!("rounds_k{}.csv", r.k);
                write_records_file(&common.out.join(&name), &to_records(&r.metrics))?;
                let c = SimConfig { mode: Mode::Ef21, fixed_k: r.k, ..config.clone() };
                let summary = summarize(&c, &r.metrics);
                log::info!("k={} final loss {:.6e}", r.k, summary.final_loss);
                runs.push(SweepEntry { k: r.k, records: name, summary });
            }
            let best = &runs[result.best];
            let out = SweepSummary {
                best_k: best.k,
                best_final_loss: best.summary.final_loss,
                runs,
            };
            write_json(&common.out.join("sweep_summary.json"), &out)?;
            println!("best k = {} (final loss {:.6e})", out.best_k, out.best_final_loss);
        }
        Command::Verify { seed } => {
            let results = verify::run_all(seed);
            let failed = results.iter().filter(|r| !r.passed).count();
            for r in &results {
                println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
            }
            if failed > 0 {
                return Err(Error::Numeric(format!("{failed} check(s) failed")));
            }
        }
        Command::Oracle { problem } => {
            let text = fs::read_to_string(&problem).map_err(|e| Error::Io(format!("{}: {e}", problem.display())))?;
            let p: AllocationProblem = serde_json::from_str(&text)
                .map_err(|e| Error::Input { line: e.line(), message: e.to_string() })?;
            p.validate()?;
            let report = OracleReport {
                bruteforce: allocate_bruteforce(&p)?,
                dp: allocate_dp(&p)?,
            };
            println!("{}", serde_json::to_string_pretty(&report).map_err(|e| Error::Io(e.to_string()))?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("KIMAD_LOG", "warn")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("kimad: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
