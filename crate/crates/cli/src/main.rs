use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ffabic::codec::DecodeOptions;
use ffabic::training::Stage;
use ffabic_cli::commands::{self, AblationArgs, TrainArgs};
use ffabic_cli::CliResult;

#[derive(Parser)]
#[command(name = "ffabic", version, about = "Frequency-band-aware generative image codec")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone, Copy)]
struct DecodeFlags {
    /// Sampler steps (defaults to the model's setting).
    #[arg(long)]
    steps: Option<usize>,
    /// Sampler noise seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Reconstruct from the content representation without sampling.
    #[arg(long)]
    bypass_diffusion: bool,
}

impl From<DecodeFlags> for DecodeOptions {
    fn from(f: DecodeFlags) -> Self {
        DecodeOptions { steps: f.steps, seed: f.seed, bypass: f.bypass_diffusion }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train the staged schedule, or one stage of it.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// 1, 2, 3 or joint.
        #[arg(long)]
        stage: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// Directory of PNG training images; synthetic images otherwise.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Resume checkpoint of the given stage.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    Compress {
        #[arg(long)]
        model: PathBuf,
        #[arg(short = 'i', long = "input")]
        input: PathBuf,
        #[arg(short = 'o', long = "output")]
        output: PathBuf,
    },
    Decompress {
        #[arg(long)]
        model: PathBuf,
        #[arg(short = 'i', long = "input")]
        input: PathBuf,
        #[arg(short = 'o', long = "output")]
        output: PathBuf,
        #[command(flatten)]
        decode: DecodeFlags,
    },
    /// Per-image bpp, PSNR and MS-SSIM.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        decode: DecodeFlags,
    },
    /// One averaged rate-distortion point per model.
    RdCurve {
        #[arg(long, num_args = 1.., required = true)]
        models: Vec<PathBuf>,
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Curve label (defaults to the output file name).
        #[arg(long)]
        label: Option<String>,
        #[command(flatten)]
        decode: DecodeFlags,
    },
    /// Average rate difference of two curves at equal quality.
    BdRate {
        #[arg(long)]
        anchor: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long, default_value = "psnr")]
        metric: String,
    },
    /// Per-band activation maps of every attention block of the encoder.
    Bands {
        #[arg(long)]
        model: PathBuf,
        #[arg(short = 'i', long = "input")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and score one codec per attention window base.
    AblateWindows {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "2,4,8")]
        bases: Vec<usize>,
    },
}

fn run(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::Train { config, out, stage, seed, data, resume } => {
            let stage = stage.map(|s| s.parse::<Stage>()).transpose().map_err(|e| ffabic_cli::CliError::Usage(e.to_string()))?;
            commands::train(&TrainArgs { config, out, stage, seed, data, resume })
        }
        Command::Compress { model, input, output } => {
            let n = commands::compress_file(&model, &input, &output)?;
            log::info!("wrote {n} bytes to {}", output.display());
            Ok(())
        }
        Command::Decompress { model, input, output, decode } => commands::decompress_file(&model, &input, &output, &decode.into()),
        Command::Eval { model, dir, out, decode } => commands::eval(&model, &dir, &out, &decode.into()).map(|_| ()),
        Command::RdCurve { models, dir, out, label, decode } => {
            let label =
                label.unwrap_or_else(|| out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "curve".into()));
            commands::rd_curve(&models, &dir, &out, &label, &decode.into())
        }
        Command::BdRate { anchor, test, metric } => {
            println!("{}", commands::format_percent(commands::bd_rate_files(&anchor, &test, &metric)?));
            Ok(())
        }
        Command::Bands { model, input, out } => {
            let n = commands::bands(&model, &input, &out)?;
            log::info!("wrote {n} maps to {}", out.display());
            Ok(())
        }
        Command::AblateWindows { config, dir, out, data, bases } => {
            commands::ablate_windows(&AblationArgs { config, dir, out, data, bases }).map(|_| ())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
