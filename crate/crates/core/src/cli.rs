//! Command-line front end. Every subcommand maps onto one library entry
//! point; flags given on the command line override values from `--config`.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;

use crate::data::{generate_phantom_set, PhantomSpec};
use crate::error::{Error, Result};
use crate::eval::OracleTrainConfig;
use crate::experiment::{build_oracle, Experiment, load_gated_oracle, run_evaluation, run_training, RunConfig};
use crate::formats::{read_image, read_sinogram, write_image, write_sinogram};
use crate::model::load_params;
use crate::radon::{fbp_reconstruct, forward_project, AngleSet, Domain, DEFAULT_PITCH_MM};

/// Environment variable overriding the worker thread count.
pub const THREADS_ENV: &str = "AUTOMAP_THREADS";

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_IO: i32 = 4;

#[derive(Parser, Debug)]
#[command(name = "automap-ct", version, about = "Sparse-view CT reconstruction with AUTOMAP and FBP")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Forward-project an image into a sinogram.
    Project {
        #[arg(long)]
        image: PathBuf,
        /// four_view, two_view, or a comma-separated list of degrees.
        #[arg(long, default_value = "four_view")]
        angles: String,
        #[arg(long)]
        out: PathBuf,
        /// Pixel pitch assumed for PGM input.
        #[arg(long, default_value_t = DEFAULT_PITCH_MM)]
        pitch_mm: f64,
    },
    /// Filtered backprojection of a sinogram.
    Fbp {
        #[arg(long)]
        sino: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Output domain: normalized (clamped to [0, 1]) or hu.
        #[arg(long, default_value = "normalized")]
        domain: String,
    },
    /// Train AUTOMAP as described by a run configuration.
    Train(RunArgs),
    /// Evaluate trained weights on the configured test set.
    Eval {
        #[arg(long)]
        weights: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Write seeded synthetic phantoms (HU images).
    MakePhantoms {
        #[arg(long)]
        count: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        n: usize,
    },
    /// Train the digit oracle and check its held-out accuracy.
    TrainOracle {
        /// Directory holding the four MNIST IDX files.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = OracleTrainConfig::default().epochs)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// `--config` plus per-field overrides.
#[derive(Args, Debug, Clone)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub angles: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub train_limit: Option<usize>,
    #[arg(long)]
    pub test_limit: Option<usize>,
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    #[arg(long)]
    pub oracle: Option<PathBuf>,
}

impl RunArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config)?;
        macro_rules! apply {
            ($($field:ident),*) => {$(
                if let Some(v) = &self.$field {
                    cfg.$field = v.clone().into();
                }
            )*};
        }
        apply!(angles, epochs, batch_size, learning_rate, seed, data_dir, output_dir);
        if self.train_limit.is_some() {
            cfg.train_limit = self.train_limit;
        }
        if self.test_limit.is_some() {
            cfg.test_limit = self.test_limit;
        }
        if self.oracle.is_some() {
            cfg.oracle = self.oracle.clone();
        }
        cfg.validate()?;
        if cfg.experiment != Experiment::Phantom && !cfg.data_dir.exists() {
            return Err(Error::Config(format!("data_dir: {} does not exist", cfg.data_dir.display())));
        }
        if let Some(o) = cfg.oracle.as_ref().filter(|o| !o.exists()) {
            return Err(Error::Config(format!("oracle: {} does not exist", o.display())));
        }
        Ok(cfg)
    }
}

/// Maps an error to the documented process exit code.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) | Error::Shape { .. } => EXIT_CONFIG,
        Error::NonFinite(_) => EXIT_NUMERIC,
        Error::Io { .. } | Error::Format { .. } => EXIT_IO,
    }
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .map_err(|_| Error::Config(format!("{THREADS_ENV} must be a positive integer, got `{v}`")))?;
        // Fails only if a pool already exists, in which case it is kept.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    Ok(())
}

fn ensure_exists(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "no such file")))
    }
}

pub fn execute(cli: Cli) -> Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Project {
            image,
            angles,
            out,
            pitch_mm,
        } => {
            let angles = AngleSet::parse(&angles).map_err(|e| Error::Config(format!("--angles: {e}")))?;
            ensure_exists(&image)?;
            let img = read_image(&image, pitch_mm)?;
            let sino = forward_project(&img, &angles)?;
            write_sinogram(&out, &sino)?;
            info!("wrote {} ({} angles x {} bins)", out.display(), sino.angles_deg().len(), sino.bins());
        }
        Command::Fbp { sino, out, domain } => {
            let domain = match domain.as_str() {
                "normalized" => Domain::Normalized,
                "hu" => Domain::Hounsfield,
                other => return Err(Error::Config(format!("--domain: expected normalized or hu, got `{other}`"))),
            };
            ensure_exists(&sino)?;
            let img = fbp_reconstruct(&read_sinogram(&sino)?, domain)?;
            write_image(&out, &img)?;
            info!("wrote {}", out.display());
        }
        Command::Train(args) => {
            let cfg = args.resolve()?;
            let run = run_training(&cfg)?;
            println!("{}", run.dir.display());
        }
        Command::Eval { weights, run } => {
            let cfg = run.resolve()?;
            ensure_exists(&weights)?;
            let params = load_params(&weights)?;
            let oracle = match &cfg.oracle {
                Some(path) => Some(load_gated_oracle(path, &cfg.data_dir)?),
                None => None,
            };
            let outcome = run_evaluation(&cfg, &params, oracle.as_ref())?;
            print!("{}", outcome.report.to_text());
        }
        Command::MakePhantoms { count, seed, out, n } => {
            let spec = PhantomSpec {
                n,
                ..PhantomSpec::default()
            };
            for p in generate_phantom_set(&spec, seed, count)? {
                write_image(&out.join(format!("phantom_{:04}.img", p.label)), &p.image)?;
            }
            info!("wrote {count} phantoms to {}", out.display());
        }
        Command::TrainOracle { data, out, epochs, seed } => {
            ensure_exists(&data)?;
            let cfg = OracleTrainConfig {
                epochs,
                seed,
                ..OracleTrainConfig::default()
            };
            let (oracle, accuracy) = build_oracle(&data, &cfg)?;
            oracle.save(&out)?;
            println!("held-out accuracy = {accuracy:.4}");
            if accuracy < crate::eval::ORACLE_MIN_ACCURACY {
                return Err(Error::invalid(format!(
                    "oracle accuracy {accuracy:.4} is below {}; weights written but unusable",
                    crate::eval::ORACLE_MIN_ACCURACY
                )));
            }
        }
    }
    Ok(())
}

/// Parses arguments, runs the command and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
