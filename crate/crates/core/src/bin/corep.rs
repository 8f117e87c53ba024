use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use corep_lab::harness::{
    ablate, degree_sweep, export_graph, graph_verify, selfcheck, train, write_matrix_csv, HarnessError, RunConfig,
    Trainer, Variant,
};

#[derive(Parser)]
#[command(name = "corep", about = "Causal-origin representation lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// `key = value` config file; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set seed=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig, HarnessError> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", p.display())))?;
                RunConfig::from_text(&text)?
            }
            None => RunConfig::default(),
        };
        cfg.apply_overrides(&self.overrides)?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one run and write the metrics CSV.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Metrics CSV path; stdout if omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Directory for periodic checkpoints (see `checkpoint_every`).
        #[arg(long)]
        checkpoint_dir: Option<PathBuf>,
        /// Continue from a checkpoint. Only `--set` keys outside the run
        /// definition (total_steps, checkpoint_every, wall_clock) may change.
        #[arg(long, conflicts_with = "config")]
        resume: Option<PathBuf>,
    },
    /// Compare variants against the full model under one seed.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Comma-separated variants; all of them if omitted.
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
    },
    /// Returns across non-stationarity degrees, normalized to degree 1.0.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_delimiter = ',', required = true)]
        degrees: Vec<f64>,
    },
    /// Write both branch adjacencies at a probe state as CSV.
    GraphExport {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated probe state.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
        state: Vec<f64>,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Check the MAG construction on the worked example and sampled families.
    GraphVerify {
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Finite-difference gradient checks.
    Selfcheck {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(cli: Cli) -> Result<bool, HarnessError> {
    match cli.command {
        Command::Train { cfg, out, checkpoint_dir, resume } => {
            let mut trainer = match resume {
                Some(p) => Trainer::from_checkpoint(&fs::read_to_string(p)?, &cfg.overrides)?,
                None => Trainer::new(cfg.load()?)?,
            };
            let sink: Box<dyn Write> = match out {
                Some(p) => Box::new(BufWriter::new(fs::File::create(p)?)),
                None => Box::new(io::stdout().lock()),
            };
            train(&mut trainer, sink, checkpoint_dir.as_deref())?;
            Ok(true)
        }
        Command::Ablate { cfg, variants } => {
            let cfg = cfg.load()?;
            let variants: Vec<Variant> = if variants.is_empty() {
                Variant::ALL.to_vec()
            } else {
                variants.iter().map(|v| v.trim().parse()).collect::<Result<_, _>>()?
            };
            println!("variant,final_return,normalized");
            for r in ablate(&cfg, &variants)? {
                println!("{},{},{}", r.variant, r.final_return, r.normalized);
            }
            Ok(true)
        }
        Command::Sweep { cfg, degrees } => {
            let cfg = cfg.load()?;
            println!("degree,final_return,normalized");
            for r in degree_sweep(&cfg, &degrees)? {
                println!("{},{},{}", r.degree, r.final_return, r.normalized);
            }
            Ok(true)
        }
        Command::GraphExport { checkpoint, state, out_dir } => {
            let (core, general) = export_graph(&fs::read_to_string(checkpoint)?, &state)?;
            fs::create_dir_all(&out_dir)?;
            write_matrix_csv(BufWriter::new(fs::File::create(out_dir.join("a_core.csv"))?), &core)?;
            if let Some(g) = general {
                write_matrix_csv(BufWriter::new(fs::File::create(out_dir.join("a_general.csv"))?), &g)?;
            }
            Ok(true)
        }
        Command::GraphVerify { trials, seed } => {
            let r = graph_verify(trials, seed)?;
            println!("worked example: {}", if r.worked_example { "ok" } else { "MISMATCH" });
            println!("sampled families: {}/{} MAG, {}/{} order-compatible", r.mag_ok, r.trials, r.order_ok, r.trials);
            for f in &r.failures {
                println!("  {f}");
            }
            Ok(r.passed())
        }
        Command::Selfcheck { trials, seed } => {
            let r = selfcheck(trials, seed)?;
            for (name, err) in &r.results {
                let mark = if *err <= r.tolerance { "ok" } else { "FAIL" };
                println!("{name:<22} {err:.3e} {mark}");
            }
            Ok(r.passed())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
