//! `cbct`: simulate data, train, evaluate and inspect sparse-view cone-beam
//! CT reconstructors.

use std::path::PathBuf;
use std::process::ExitCode;

use cbct_core::data::{load_projections, save_volume};
use cbct_core::harness::{self, AdjointPreset, Axis, Method, TrainConfig};
use cbct_core::Error;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "cbct", version, about = "Sparse-view cone-beam CT reconstruction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate phantoms, simulate sparse scans and write a dataset directory.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the configured model on a simulated dataset.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate methods on the test split and write a report.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoints of the learned methods, comma separated.
        #[arg(long, value_delimiter = ',')]
        checkpoint: Vec<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Comma-separated list of identity, fdk, fdkconvnet, pdnet, pdunet.
        #[arg(long, default_value = "fdk")]
        methods: String,
    },
    /// Reconstruct one projection file into an HU volume.
    Reconstruct {
        #[arg(long)]
        method: String,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Supplies the grid for fdk.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        projections: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write one slice of a volume as an 8-bit PGM image.
    ExportSlice {
        #[arg(long)]
        volume: PathBuf,
        #[arg(long)]
        axis: String,
        #[arg(long)]
        index: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dot-product tests of the projector and FDK transposes.
    AdjointTest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "default")]
        preset: String,
        #[arg(long = "f64")]
        double: bool,
    },
}

fn config(path: &Option<PathBuf>) -> cbct_core::Result<TrainConfig> {
    match path {
        Some(p) => TrainConfig::load(p),
        None => Ok(TrainConfig::default()),
    }
}

/// Returns `Ok(false)` for a completed command whose check failed.
fn run(cmd: Command) -> cbct_core::Result<bool> {
    match cmd {
        Command::Simulate { config: c, n, seed, out } => {
            let ds = harness::simulate_dataset(&config(&c)?, n, seed, &out)?;
            let m = &ds.manifest;
            println!("wrote {n} volumes to {} (train {}, validation {}, test {})", out.display(), m.train.len(), m.validation.len(), m.test.len());
        }
        Command::Train { config: c, data, out, resume } => {
            let cfg = config(&c)?;
            let summary = harness::train(&cfg, &data, &out, resume.as_deref(), |log| {
                let val = log.val_loss.map_or("-".to_string(), |v| format!("{v:.6}"));
                println!("epoch {:4}  train {:.6}  val {val}  {:.1}s", log.epoch, log.train_loss, log.seconds);
            })?;
            if let Some((e, v)) = summary.best {
                println!("best epoch {e} (loss {v:.6}); checkpoints in {}", out.display());
            }
        }
        Command::Eval { config: c, checkpoint, data, report, methods } => {
            let methods = harness::parse_methods(&methods)?;
            let r = harness::evaluate(&config(&c)?, &checkpoint, &data, &methods)?;
            harness::write_report(&r, &report)?;
            print!("{}", r.to_table());
        }
        Command::Reconstruct { method, checkpoint, config: c, projections, out } => {
            let method: Method = method.parse()?;
            let stack = load_projections(&projections)?;
            let v = harness::reconstruct(method, checkpoint.as_deref(), &stack, &config(&c)?)?;
            save_volume(&out, &v)?;
        }
        Command::ExportSlice { volume, axis, index, out } => {
            let axis: Axis = axis.parse()?;
            harness::export_slice(&volume, axis, index, &out)?;
        }
        Command::AdjointTest { seed, preset, double } => {
            let preset: AdjointPreset = preset.parse()?;
            let r = harness::adjoint_test(preset, seed, double)?;
            let verdict = |gap: f64| if gap <= r.tolerance { "ok" } else { "FAIL" };
            println!("precision  {}", if double { "f64" } else { "f32" });
            println!("projector  relative error {:.3e}  {}", r.projector_gap, verdict(r.projector_gap));
            println!("fdk        relative error {:.3e}  {}", r.fdk_gap, verdict(r.fdk_gap));
            println!("tolerance  {:.0e}", r.tolerance);
            return Ok(r.pass());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    // usage errors are validation errors (1); clap would use 2, our I/O code
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            let io = matches!(e, Error::Io { .. });
            ExitCode::from(if io { 2 } else { 1 })
        }
    }
}
