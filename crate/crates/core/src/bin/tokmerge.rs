use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use tokmerge::calibrate::{MergeSchedule, ScheduleKind};
use tokmerge::synth::SynthSpec;
use tokmerge::workbench::{
    cmd_bench, cmd_calibrate, cmd_encode, cmd_synth, cmd_verify, exit_code, load_config, BenchArgs,
    CalibrateArgs, EncodeMode, VerifyArgs,
};
use tokmerge::Result;

#[derive(Parser)]
#[command(
    name = "tokmerge",
    version,
    about = "Token merging and unmerging workbench"
)]
struct Cli {
    /// Worker threads for per-image work (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic grayscale corpus.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 32)]
        height: usize,
        #[arg(long, default_value_t = 32)]
        width: usize,
        #[arg(long, default_value_t = 4)]
        patch: usize,
        #[arg(long, default_value_t = 120)]
        count: usize,
        /// Rectangle counts, cycled over the images.
        #[arg(long, value_delimiter = ',', default_value = "0,2,4,8,16,32")]
        rects: Vec<usize>,
        #[arg(long, default_value_t = 0.0)]
        sigma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Calibrate per-layer merge thresholds on a corpus.
    Calibrate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "constant")]
        schedule: ScheduleKind,
        #[arg(long)]
        r_bar: usize,
        #[arg(long, default_value_t = 8)]
        batch_size: usize,
        #[arg(long, default_value_t = 4)]
        num_batches: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Identifier stored in the profile (default: manifest fingerprint).
        #[arg(long)]
        corpus_id: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Encode a corpus and report token counts.
    Encode {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, conflicts_with_all = ["topr", "off"])]
        profile: Option<PathBuf>,
        #[arg(long, conflicts_with = "off")]
        topr: Option<usize>,
        #[arg(long)]
        off: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check fast paths against brute-force references.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_delimiter = ',', default_value = "1,7,32,96")]
        sizes: Vec<usize>,
        #[arg(long, hide = true)]
        perturb: bool,
    },
    /// Analytic MFLOPs and measured attention time.
    Bench {
        #[arg(long, default_value_t = 576)]
        n: usize,
        #[arg(long, value_delimiter = ',', default_value = "89,195,394")]
        n_un: Vec<usize>,
        #[arg(long, default_value_t = 32)]
        heads: usize,
        #[arg(long, default_value_t = 128)]
        head_dim: usize,
        #[arg(long, default_value_t = 3)]
        reps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(cmd: Command, out: &mut impl Write) -> Result<bool> {
    match cmd {
        Command::Synth {
            out: dir,
            height,
            width,
            patch,
            count,
            rects,
            sigma,
            seed,
        } => {
            let spec = SynthSpec {
                h: height,
                w: width,
                patch,
                count,
                r_values: rects,
                sigma,
                seed,
            };
            cmd_synth(&spec, &dir, out)?;
        }
        Command::Calibrate {
            manifest,
            config,
            schedule,
            r_bar,
            batch_size,
            num_batches,
            seed,
            corpus_id,
            out: path,
        } => {
            let args = CalibrateArgs {
                manifest: &manifest,
                config: load_config(config.as_deref())?,
                schedule: MergeSchedule {
                    kind: schedule,
                    r_bar,
                },
                batch_size,
                num_batches,
                seed,
                out_profile: &path,
                corpus_id,
            };
            cmd_calibrate(&args, out)?;
        }
        Command::Encode {
            manifest,
            config,
            profile,
            topr,
            off,
            out: path,
        } => {
            let mode = match (profile, topr, off) {
                (Some(p), None, false) => EncodeMode::Profile(p),
                (None, Some(r), false) => EncodeMode::TopR(r),
                (None, None, true) => EncodeMode::Off,
                _ => {
                    return Err(tokmerge::Error::InvalidArgument(
                        "exactly one of --profile, --topr, --off is required".into(),
                    ))
                }
            };
            cmd_encode(
                &manifest,
                &load_config(config.as_deref())?,
                &mode,
                &path,
                out,
            )?;
        }
        Command::Verify {
            seed,
            sizes,
            perturb,
        } => {
            return Ok(cmd_verify(
                &VerifyArgs {
                    seed,
                    sizes,
                    perturb,
                },
                out,
            )?
            .all_passed());
        }
        Command::Bench {
            n,
            n_un,
            heads,
            head_dim,
            reps,
            seed,
        } => {
            cmd_bench(
                &BenchArgs {
                    n,
                    n_un,
                    heads,
                    head_dim,
                    reps,
                    seed,
                },
                out,
            )?;
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(t) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let stdout = io::stdout();
    let mut out = stdout.lock();
    match run(cli.cmd, &mut out) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
