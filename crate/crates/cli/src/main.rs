use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use m2retinex::data::{generate_corpus, load_ppm, save_ppm, DatasetManifest, Split};
use m2retinex::numerics::GradCheckOptions;
use m2retinex::run::{self, Checkpoint, Engine, GradCheckScope, RunConfig};
use m2retinex::{Error, Result};

#[derive(Parser)]
#[command(name = "m2rx", version, about = "Multi-modal Retinex low-light enhancer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic paired corpus with a manifest.
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train from a config file; relative paths resolve against its directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides both model.init_seed and optim.seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides io.checkpoint_dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-image and mean PSNR/SSIM as JSON lines.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
        /// Score ground truth against itself instead of running the model.
        #[arg(long)]
        identity: bool,
        /// Also write the report to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Enhance one PPM image.
    Enhance {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        tau: Option<usize>,
    },
    /// Finite-difference audit of one block or the whole model.
    Gradcheck {
        /// Model section source; defaults apply without it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "block")]
        scope: String,
        #[arg(long, default_value_t = 8)]
        size: usize,
        #[arg(long)]
        seed: Option<u64>,
        /// Multiplies analytic gradients before comparison.
        #[arg(long, default_value_t = 1.0, hide = true)]
        inject_grad_scale: f64,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Synth { n, size, seed, out } => {
            let m = generate_corpus(n, size, seed, &out)?;
            println!(
                "wrote {} pairs ({} train, {} val) to {}",
                m.entries.len(),
                m.count(Split::Train),
                m.count(Split::Val),
                out.display()
            );
            Ok(())
        }
        Command::Train { config, seed, out } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(seed) = seed {
                cfg.model.init_seed = seed;
                cfg.optim.seed = seed;
            }
            if let Some(out) = out {
                cfg.io.checkpoint_dir = out;
            }
            cfg.resolve_paths(config.parent().unwrap_or(Path::new("")));
            let summary = run::train(&cfg)?;
            if let Some(last) = summary.records.last() {
                println!(
                    "step {} train_loss {:.6} val_psnr {:.3} dB (inputs {:.3} dB, best {:.3} dB)",
                    last.step, last.train_loss, last.val_psnr_db, summary.input_val_psnr_db, summary.best_val_psnr_db
                );
            }
            println!("checkpoint {}", summary.final_checkpoint.display());
            Ok(())
        }
        Command::Eval {
            checkpoint,
            manifest,
            split,
            identity,
            out,
        } => {
            let split: Split = split.parse().map_err(|e: Error| Error::Usage(e.to_string()))?;
            let manifest = DatasetManifest::load(&manifest)?;
            let images = run::load_images(&manifest, split)?;
            if images.is_empty() {
                return Err(Error::Config(format!("split `{split}` is empty")));
            }
            let report = if identity {
                run::identity_metrics(&images, |p| &p.gt)?
            } else {
                let (engine, store) = Engine::from_checkpoint(Checkpoint::load(&checkpoint)?)?;
                engine.evaluate(&store, &images)?
            };
            let text: String = report.json_lines().iter().map(|l| format!("{l}\n")).collect();
            print!("{text}");
            if let Some(out) = out {
                std::fs::write(&out, text).map_err(|e| Error::Io { path: out, source: e })?;
            }
            Ok(())
        }
        Command::Enhance {
            checkpoint,
            input,
            out,
            tau,
        } => {
            let (engine, store) = Engine::from_checkpoint(Checkpoint::load(&checkpoint)?)?;
            let low = load_ppm(&input)?;
            let (img, timings) = engine.enhance(&store, &low, tau)?;
            save_ppm(&img, &out)?;
            for (stage, d) in timings {
                println!("{stage}: {:.3} ms", d.as_secs_f64() * 1e3);
            }
            Ok(())
        }
        Command::Gradcheck {
            config,
            scope,
            size,
            seed,
            inject_grad_scale,
        } => {
            let scope: GradCheckScope = scope.parse()?;
            let mut cfg = match config {
                Some(path) => RunConfig::load(path)?,
                None => RunConfig::default(),
            };
            if let Some(seed) = seed {
                cfg.model.init_seed = seed;
            }
            let engine = Engine::new(cfg)?;
            let opts = GradCheckOptions {
                analytic_scale: inject_grad_scale,
                ..GradCheckOptions::default()
            };
            let report = run::run_gradcheck(&engine, scope, size, &opts)?;
            let mut stdout = std::io::stdout().lock();
            let _ = writeln!(stdout, "{report}");
            if report.passed() {
                Ok(())
            } else {
                Err(Error::Numeric(format!(
                    "gradient check failed: max relative error {:.3e}",
                    report.max_rel_error()
                )))
            }
        }
    }
}
