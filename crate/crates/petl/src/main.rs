use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use petl::config::{self, resolve_arch};
use petl::{report, runner, Error, Result};
use petl_core::accounting::complexity_table;
use petl_core::backbone::DEFAULT_USE_LAYERS;
use petl_core::petl::{Method, PetlConfig};

#[derive(Parser)]
#[command(name = "petl", version, about = "Parameter-efficient transfer learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate one configuration.
    Run { config: PathBuf },
    /// Run every cell of a grid file.
    Sweep { grid: PathBuf },
    /// Print trainable-parameter counts for an architecture.
    Counts {
        /// `transformer`, `conformer`, or a TOML file with an arch table.
        arch: String,
        /// Add the ablation grids to the default methods.
        #[arg(long)]
        all_methods: bool,
        #[arg(long, default_value_t = DEFAULT_USE_LAYERS)]
        use_layers: usize,
        #[arg(long)]
        csv: bool,
    },
    /// Fold a trained SSF/LoRA delta into the weights, or bake a prefix.
    Merge {
        ckpt: PathBuf,
        arch: String,
        /// Seed of the base the delta is applied to.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Gather every report.csv under a directory.
    Report {
        dir: PathBuf,
        #[arg(long)]
        csv: bool,
    },
}

fn ablation_grid() -> Vec<Method> {
    let mut methods = Method::table_rows().to_vec();
    for cfg in PetlConfig::ablation_grid() {
        if !methods.contains(&cfg.into()) {
            methods.push(cfg.into());
        }
    }
    methods
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config } => {
            let cfg = config::load_experiment(&config)?;
            let outcome = runner::execute(&cfg)?;
            print!("{}", report::rows_text(std::slice::from_ref(&outcome.row)));
        }
        Command::Sweep { grid } => {
            let grid = config::load_grid(&grid)?;
            let outcome = runner::sweep(&grid)?;
            print!("{}", report::rows_text(&outcome.rows));
            for (i, msg) in &outcome.failures {
                eprintln!("cell {i} failed: {msg}");
            }
        }
        Command::Counts {
            arch,
            all_methods,
            use_layers,
            csv,
        } => {
            let cfg = resolve_arch(&arch)?;
            if use_layers == 0 || use_layers > cfg.n_layers {
                return Err(Error::Schema {
                    field: "use_layers".into(),
                    reason: format!("{use_layers} is outside 1..={}", cfg.n_layers),
                });
            }
            let methods = if all_methods {
                ablation_grid()
            } else {
                Method::table_rows().to_vec()
            };
            let rows = complexity_table(&[(arch.clone(), cfg)], &methods, use_layers);
            if csv {
                print!("{}", report::complexity_csv(&rows)?);
            } else {
                print!("{}", report::complexity_text(&rows));
            }
        }
        Command::Merge { ckpt, arch, seed, out } => {
            let cfg = resolve_arch(&arch)?;
            let out = out.unwrap_or_else(|| ckpt.with_extension("merged.petl"));
            let outcome = runner::merge(&ckpt, &cfg, seed, &out)?;
            println!(
                "{}: max |Δ| = {:.3e}, structure preserved: {}, wrote {}",
                outcome.method.label(),
                outcome.max_abs_diff,
                outcome.structure_preserved,
                outcome.output.display()
            );
        }
        Command::Report { dir, csv } => {
            let rows = report::collect(&dir)?;
            if csv {
                print!("{}", report::to_csv(&rows)?);
            } else {
                print!("{}", report::rows_text(&rows));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
