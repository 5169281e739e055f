mod config;
mod error;
mod output;
mod runs;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{ElementsChoice, FileConfig, FormatChoice, NoiseArgs, VariantChoice};
use error::CliError;
use output::Sink;

#[derive(Parser)]
#[command(
    name = "triport",
    version,
    about = "Second-quantized simulator for three-level photonic teleportation"
)]
struct Cli {
    /// Configuration file (TOML); flags override its values
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Seed for every stochastic subcommand (default 42)
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (default: $TRIPORT_OUT_DIR, then ./results)
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Worker thread count; results are identical for any value
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Which artifact formats to write
    #[arg(long, global = true, value_enum)]
    format: Option<FormatChoice>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Teleport one three-level state through the full pipeline
    Teleport {
        /// Input amplitudes, e.g. "1,0,0" or "1,i,-1"
        #[arg(long)]
        input: Option<String>,
        /// Post-selection variant
        #[arg(long, value_enum)]
        variant: Option<VariantChoice>,
        /// Measurement network model
        #[arg(long, value_enum)]
        elements: Option<ElementsChoice>,
    },
    /// Teleport all twelve mutually unbiased basis states
    MubSuite {
        #[arg(long, value_enum)]
        variant: Option<VariantChoice>,
        #[arg(long, value_enum)]
        elements: Option<ElementsChoice>,
    },
    /// Fidelity and success rate over a detection x pair-rate grid
    SweepLandscape {
        /// Detection efficiencies, comma separated
        #[arg(long, value_delimiter = ',')]
        grid_p_d: Option<Vec<f64>>,
        /// Pair-emission probabilities, comma separated
        #[arg(long, value_delimiter = ',')]
        grid_p: Option<Vec<f64>>,
        #[command(flatten)]
        noise: NoiseArgs,
    },
    /// Fidelity under random splitting-ratio perturbations
    SweepSplitting {
        /// Perturbation half-widths, comma separated
        #[arg(long, value_delimiter = ',')]
        deviations: Option<Vec<f64>>,
        /// Random draws per half-width
        #[arg(long)]
        trials: Option<u32>,
    },
    /// Two-photon interference dip scan
    Hom {
        #[arg(long)]
        bandwidth_nm: Option<f64>,
        #[arg(long)]
        visibility: Option<f64>,
        #[arg(long)]
        delay_max_fs: Option<f64>,
        #[arg(long)]
        delay_step_fs: Option<f64>,
    },
    /// Rotation-and-phase mesh for a measurement network
    Decompose {
        /// Network size (Fourier multiport only; 2 to 6)
        #[arg(long)]
        modes: Option<usize>,
        #[arg(long, value_enum)]
        elements: Option<ElementsChoice>,
    },
    /// Print the classical and qubit-subspace fidelity bounds
    Bounds,
    /// Entanglement-witness fidelity of the noisy photon source
    Witness {
        #[command(flatten)]
        noise: NoiseArgs,
        /// Random perturbation draws to average (default 1)
        #[arg(long)]
        trials: Option<u32>,
    },
    /// Check result files against their embedded digests
    Verify {
        /// Files to check (default: every artifact in the output directory)
        files: Vec<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let file = config::load(cli.config.as_deref())?;

    if let Some(k) = cli.threads.or(file.threads) {
        if k == 0 {
            return Err(CliError::Config("threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build_global()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    }

    let seed = cli.seed.or(file.seed).unwrap_or(42);
    let out = cli
        .out
        .or_else(|| file.out.clone())
        .or_else(|| std::env::var_os("TRIPORT_OUT_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("results"));
    let format = cli.format.or(file.format).unwrap_or(FormatChoice::Both);
    let sink = Sink { dir: out, format };

    dispatch(cli.command, &file, seed, &sink)
}

fn dispatch(command: Command, file: &FileConfig, seed: u64, sink: &Sink) -> Result<(), CliError> {
    match command {
        Command::Teleport {
            input,
            variant,
            elements,
        } => {
            let section = &file.teleport;
            let input = input
                .or_else(|| section.input.clone())
                .unwrap_or_else(|| "1,0,0".into());
            let variant = variant.or(section.variant).unwrap_or(VariantChoice::Main);
            let elements = elements
                .or(section.elements)
                .unwrap_or(ElementsChoice::Ideal);
            runs::teleport(&input, variant, elements, seed, sink)
        }
        Command::MubSuite { variant, elements } => {
            let section = &file.mub_suite;
            let variant = variant.or(section.variant).unwrap_or(VariantChoice::Main);
            let elements = elements
                .or(section.elements)
                .unwrap_or(ElementsChoice::Ideal);
            runs::mub_suite(variant, elements, seed, sink)
        }
        Command::SweepLandscape {
            grid_p_d,
            grid_p,
            noise,
        } => {
            let section = &file.landscape;
            let p_d = grid_p_d
                .or_else(|| section.p_d.clone())
                .unwrap_or_else(|| vec![0.08, 0.12, 0.16, 0.20, 0.24]);
            let p = grid_p
                .or_else(|| section.p.clone())
                .unwrap_or_else(|| vec![0.001, 0.0018, 0.0032, 0.0056, 0.01, 0.013, 0.02]);
            let params = config::resolve_noise(&file.noise, &noise)?;
            runs::sweep_landscape(p_d, p, params, seed, sink)
        }
        Command::SweepSplitting { deviations, trials } => {
            let section = &file.splitting;
            let deviations = deviations
                .or_else(|| section.deviations.clone())
                .unwrap_or_else(|| vec![0.0, 0.02, 0.05, 0.10]);
            let trials = trials.or(section.trials).unwrap_or(1000);
            runs::sweep_splitting(deviations, trials, seed, sink)
        }
        Command::Hom {
            bandwidth_nm,
            visibility,
            delay_max_fs,
            delay_step_fs,
        } => {
            let section = &file.hom;
            runs::hom(
                bandwidth_nm.or(section.bandwidth_nm).unwrap_or(3.0),
                visibility.or(section.visibility).unwrap_or(0.82),
                delay_max_fs.or(section.delay_max_fs).unwrap_or(2000.0),
                delay_step_fs.or(section.delay_step_fs).unwrap_or(10.0),
                seed,
                sink,
            )
        }
        Command::Decompose { modes, elements } => {
            let section = &file.decompose;
            let modes = modes.or(section.modes).unwrap_or(3);
            let elements = elements
                .or(section.elements)
                .unwrap_or(ElementsChoice::Ideal);
            runs::decompose(modes, elements, seed, sink)
        }
        Command::Bounds => runs::bounds(seed, sink),
        Command::Witness { noise, trials } => {
            let params = config::resolve_noise(&file.noise, &noise)?;
            let trials = trials.or(file.witness.trials).unwrap_or(1);
            runs::witness(params, trials, seed, sink)
        }
        Command::Verify { files } => runs::verify(files, sink),
    }
}
