use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};

use iumad::config::ExperimentConfig;
use iumad::data::{generate_synthetic_dataset, load_dataset, write_dataset};
use iumad::report::{fm_display, regenerate, write_report};
use iumad::run::{base_dataset, prepare_dataset, run_incremental_on, run_seed, thread_pool, SeedOptions};
use iumad::schedule::build_schedule;
use iumad::study::{
    component_variants, fusion_variants, injection_variants, modality_variants, run_variants, study_table,
    write_study, NOISE_LEVELS, SPURIOUS_ON,
};
use iumad::verify::run_all;

#[derive(Parser)]
#[command(name = "iumad", version, about = "Incremental unified multimodal anomaly detection")]
#[command(after_help = "Worker threads are capped by the IUMAD_THREADS environment variable.")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Configuration files.
    Config {
        #[command(subcommand)]
        action: ConfigAction,
    },
    /// Dataset generation and validation.
    Data {
        #[command(subcommand)]
        action: DataAction,
    },
    /// Trains every seed and writes a checkpoint after each step.
    Train {
        config: PathBuf,
        #[arg(long, default_value = "checkpoints")]
        out: PathBuf,
    },
    /// Full incremental protocol with evaluation and report.
    Run {
        config: PathBuf,
        #[arg(long, default_value = "runs/latest")]
        out: PathBuf,
    },
    /// Component (Mamba × IBFM) and fusion-kind ablation grids.
    Ablate {
        config: PathBuf,
        #[arg(long, value_enum, default_value_t = Grid::Both)]
        grid: Grid,
        #[arg(long, default_value = "runs/ablation")]
        out: PathBuf,
    },
    /// Redundant-noise sweep with and without spurious background injection.
    InjectStudy {
        config: PathBuf,
        #[arg(long, default_value = "runs/injection")]
        out: PathBuf,
        /// Also compare RGB+depth with each modality alone.
        #[arg(long)]
        modalities: bool,
    },
    /// Gradient, information-theory and metric self-checks.
    Verify {
        /// Print the gate reports as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Rebuilds tables and charts of a finished run.
    Report { run_dir: PathBuf },
}

#[derive(Subcommand)]
enum ConfigAction {
    /// Writes a config with every default filled in.
    Init {
        #[arg(long)]
        out: Option<PathBuf>,
        /// Small preset that finishes in minutes on one core.
        #[arg(long)]
        compact: bool,
    },
}

#[derive(Subcommand)]
enum DataAction {
    /// Writes the synthetic dataset described by a config.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "data/synthetic")]
        out: PathBuf,
    },
    /// Loads a dataset directory and reports its contents.
    Validate { path: PathBuf },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Grid {
    Components,
    Fusion,
    Both,
}

fn load_config(path: &Path) -> anyhow::Result<ExperimentConfig> {
    ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Config {
            action: ConfigAction::Init { out, compact },
        } => {
            let cfg = if compact { ExperimentConfig::compact() } else { ExperimentConfig::default() };
            match out {
                Some(p) => {
                    std::fs::write(&p, cfg.to_toml()).with_context(|| format!("writing {}", p.display()))?;
                    println!("wrote {}", p.display());
                }
                None => print!("{}", cfg.to_toml()),
            }
        }
        Command::Data {
            action: DataAction::Synth { config, out },
        } => {
            let cfg = match config {
                Some(p) => load_config(&p)?,
                None => ExperimentConfig::default(),
            };
            let ds = generate_synthetic_dataset(&cfg.synth)?;
            write_dataset(&ds, &out)?;
            println!("wrote {} objects to {}", ds.len(), out.display());
        }
        Command::Data {
            action: DataAction::Validate { path },
        } => {
            let ds = load_dataset(&path)?;
            let (h, w) = ds.hw().unwrap_or_default();
            println!("{} objects, {h}x{w}", ds.len());
            for o in &ds.objects {
                let bad = o.test.iter().filter(|s| s.is_anomalous).count();
                println!(
                    "  {:<16} train {:>4}  test {:>4} ({} good, {} defect)",
                    o.name,
                    o.train.len(),
                    o.test.len(),
                    o.test.len() - bad,
                    bad
                );
            }
        }
        Command::Train { config, out } => {
            let cfg = load_config(&config)?;
            let ds = prepare_dataset(&cfg)?;
            let schedule = build_schedule(ds.len(), &cfg.setting, cfg.base_epochs, cfg.incr_epochs)?;
            let pool = thread_pool()?;
            for &seed in &cfg.seeds {
                let dir = out.join(format!("seed_{seed}"));
                let opts = SeedOptions {
                    checkpoint_dir: Some(&dir),
                    ..SeedOptions::default()
                };
                let r = pool.install(|| run_seed(&cfg, &ds, &schedule, seed, &opts))?;
                for (step, st) in r.train.iter().enumerate() {
                    let last = st.epoch_loss.last().copied().unwrap_or(f64::NAN);
                    println!("seed {seed} step {step}: {} updates, final epoch loss {last:.4}", st.updates);
                }
                println!("checkpoints in {}", dir.display());
            }
        }
        Command::Run { config, out } => {
            let cfg = load_config(&config)?;
            let ds = prepare_dataset(&cfg)?;
            let r = run_incremental_on(&cfg, &ds)?;
            write_report(&r, &out)?;
            let f = r.final_mean;
            println!(
                "final I-AUROC {:.2} ± {:.2}  P-AUROC {:.2}  AUPRO {:.2}",
                f.iauroc.mean, f.iauroc.std, f.pauroc.mean, f.aupro.mean
            );
            println!("FM(I-AUROC) {}", fm_display(r.forgetting.iauroc.map(|m| m.mean)));
            println!("report in {} ({:.1}s)", out.display(), r.wall_clock_secs);
        }
        Command::Ablate { config, grid, out } => {
            let cfg = load_config(&config)?;
            let ds = base_dataset(&cfg)?;
            let mut grids = Vec::new();
            if grid != Grid::Fusion {
                grids.push(("components", component_variants(&cfg)));
            }
            if grid != Grid::Components {
                grids.push(("fusion", fusion_variants(&cfg)));
            }
            for (name, variants) in grids {
                let rows = run_variants(&cfg, &ds, &variants)?;
                write_study(&rows, &out, name)?;
                println!("{name}:\n{}", study_table(&rows));
            }
            println!("tables in {}", out.display());
        }
        Command::InjectStudy { config, out, modalities } => {
            let cfg = load_config(&config)?;
            if !cfg.injection.is_identity() {
                bail!("inject-study sweeps injection itself; leave [injection] at its defaults");
            }
            let ds = base_dataset(&cfg)?;
            let rows = run_variants(&cfg, &ds, &injection_variants(&cfg, &NOISE_LEVELS, SPURIOUS_ON))?;
            write_study(&rows, &out, "injection")?;
            println!("injection:\n{}", study_table(&rows));
            if modalities {
                let rows = run_variants(&cfg, &ds, &modality_variants(&cfg))?;
                write_study(&rows, &out, "modalities")?;
                println!("modalities:\n{}", study_table(&rows));
            }
        }
        Command::Verify { json } => {
            let gates = run_all();
            if json {
                println!("{}", serde_json::to_string_pretty(&gates)?);
            } else {
                for g in &gates {
                    println!("gate {} {:<22} {} ({:.1}s)", g.gate, g.name, if g.passed { "PASS" } else { "FAIL" }, g.secs);
                    for c in &g.checks {
                        println!("    [{}] {}: {}", if c.passed { "ok" } else { "FAIL" }, c.name, c.detail);
                    }
                }
            }
            if gates.iter().any(|g| !g.passed) {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Report { run_dir } => {
            let r = regenerate(&run_dir)?;
            println!(
                "{}: {} seeds, final I-AUROC {:.2}, FM(I-AUROC) {}",
                run_dir.display(),
                r.seeds.len(),
                r.final_mean.iauroc.mean,
                fm_display(r.forgetting.iauroc.map(|m| m.mean))
            );
        }
    }
    Ok(ExitCode::SUCCESS)
}
