//! Thin CLI over the library: `synth`, `train`, `eval`, `derain` and
//! `gp-inspect`. Flags override config-file values; the resolved merge is
//! snapshotted into the output directory. Set `RUST_LOG` for verbosity.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use syn2real::cli::{self, RunSpec};

#[derive(Parser)]
#[command(name = "syn2real", version, about = "Semi-supervised image deraining with GP pseudo-labels")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthesize source/target rain domains and their manifests.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on the manifests named in the config.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// off | syn2real | syn2real++
        #[arg(long)]
        gp_mode: Option<String>,
        /// lin | se | rq
        #[arg(long)]
        kernel: Option<String>,
        /// Nearest neighbors used for GP conditioning.
        #[arg(long)]
        nn: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a checkpoint against a labeled manifest.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Derain a single PNG.
    Derain {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long = "out")]
        output: PathBuf,
    },
    /// Inspect the GP pathway for one image against a bank dump.
    GpInspect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        bank: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        /// Assert the dump's mode: off | syn2real | syn2real++
        #[arg(long)]
        mode: Option<String>,
        #[arg(long, default_value_t = 8)]
        nn: usize,
        #[arg(long, default_value_t = 1.0)]
        sigma_eps2: f64,
    },
}

fn load_spec(config: &Option<PathBuf>) -> syn2real::Result<RunSpec> {
    match config {
        Some(path) => RunSpec::load(path),
        None => Ok(RunSpec::default()),
    }
}

fn run(cmd: Cmd) -> syn2real::Result<()> {
    match cmd {
        Cmd::Synth { config, out } => {
            let spec = load_spec(&config)?;
            let outputs = cli::cmd_synth(&spec, &out)?;
            println!("wrote manifests:");
            for p in [
                outputs.source_train,
                outputs.source_test,
                outputs.target_train,
                outputs.target_test,
            ] {
                println!("  {}", p.display());
            }
        }
        Cmd::Train { config, out, gp_mode, kernel, nn, seed } => {
            let mut spec = load_spec(&config)?;
            if let Some(m) = gp_mode {
                spec.train.gp_mode = cli::parse_gp_mode(&m)?;
            }
            if let Some(k) = kernel {
                spec.train.kernel = cli::parse_kernel(&k)?;
            }
            if let Some(n) = nn {
                spec.train.n_neighbors = n;
            }
            if let Some(s) = seed {
                spec.train.seed = s;
            }
            cli::cmd_train(&spec, &out)?;
            println!("training complete; checkpoint and run log in {}", out.display());
        }
        Cmd::Eval { checkpoint, manifest, out } => {
            let report = cli::cmd_eval(&checkpoint, &manifest, &out)?;
            println!(
                "{}: {} images ({} skipped)",
                report.summary.name,
                report.summary.rows.len(),
                report.summary.skipped
            );
            println!("  image_id                      psnr     ssim");
            for row in &report.summary.rows {
                println!("  {:<28} {:>7.3}  {:.4}", row.image_id, row.psnr, row.ssim);
            }
            println!(
                "  mean                         {:>7.3}  {:.4}",
                report.summary.mean_psnr, report.summary.mean_ssim
            );
        }
        Cmd::Derain { checkpoint, input, output } => {
            cli::cmd_derain(&checkpoint, &input, &output)?;
            println!("wrote {}", output.display());
        }
        Cmd::GpInspect { checkpoint, bank, input, mode, nn, sigma_eps2 } => {
            let mode =
                mode.map(|m| cli::parse_gp_mode(&m)).transpose()?;
            let report =
                cli::cmd_gp_inspect(&checkpoint, &bank, &input, mode, nn, sigma_eps2)?;
            report.print();
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
