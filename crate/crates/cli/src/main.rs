//! Batch driver: index, fuse, eval, sweep and synth subcommands.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::error;

use simplace::engine::{
    write_config_echo, write_eval_outputs, write_fuse_outputs, write_sweep_outputs, Engine,
    EngineConfig,
};
use simplace::eval::IouAggregation;
use simplace::fusion::{OmegaClamp, TemplateCoverage};
use simplace::synth::{generate_suite, SynthConfig};
use simplace::{
    build_index, load_manifest, DatasetManifest, Error, ErrorKind, FusionConfig, Method,
    PosteriorMode, UpdateScope,
};

const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_PARTIAL: u8 = 4;

#[derive(Parser)]
#[command(name = "simplace", version, about = "Similar-place prior fusion for road segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the reference descriptor index and report its size.
    Index {
        #[arg(long)]
        manifest: PathBuf,
        /// Check that every referenced file exists.
        #[arg(long)]
        strict: bool,
    },
    /// Fuse every query and write fused logits and predictions.
    Fuse(RunArgs),
    /// Evaluate baselines and fusion; write frames.csv and summary.txt.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated: query,dataset_avg,prior_only,prior_query,gt_prior.
        #[arg(long, value_delimiter = ',', default_value = "query,dataset_avg,prior_only,prior_query")]
        methods: Vec<String>,
    },
    /// Evaluate Prior+Query over several ell values; write sweep.csv.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long = "ells", value_delimiter = ',', required = true)]
        ells: Vec<usize>,
    },
    /// Generate the seeded synthetic suite.
    Synth {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 40)]
        references: usize,
        #[arg(long, default_value_t = 10)]
        queries: usize,
        #[arg(long)]
        out: PathBuf,
        /// Generator parameters; defaults to the bundled synth-v1 config.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    AsPublished,
    Conjugate,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScopeArg {
    RoadCandidates,
    AllPixels,
}

#[derive(Clone, Copy, ValueEnum)]
enum CoverageArg {
    PerReference,
    TemplateArgmax,
}

#[derive(Clone, Copy, ValueEnum)]
enum IouModeArg {
    PerFrame,
    PixelPooled,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Check that every referenced file exists before running.
    #[arg(long)]
    strict: bool,
    /// References averaged into the template.
    #[arg(long, default_value_t = 5)]
    k: usize,
    /// References used for the wider coverage estimate.
    #[arg(long, default_value_t = 10)]
    ell: usize,
    #[arg(long, default_value_t = 1e-3)]
    omega_min: f64,
    #[arg(long, default_value_t = 1e3)]
    omega_max: f64,
    #[arg(long, value_enum, default_value = "conjugate")]
    posterior_mode: ModeArg,
    /// Target class name; defaults to the manifest's road class.
    #[arg(long = "class")]
    class: Option<String>,
    #[arg(long, value_enum, default_value = "road-candidates")]
    update_scope: ScopeArg,
    #[arg(long, value_enum, default_value = "per-reference")]
    template_coverage: CoverageArg,
    /// Geographic exclusion radius in meters.
    #[arg(long, default_value_t = 50.0)]
    geo_radius: f64,
    #[arg(long, value_enum, default_value = "per-frame")]
    iou_mode: IouModeArg,
    /// Per-class confidences for ground-truth pseudo-logits (comma-separated).
    #[arg(long, value_delimiter = ',')]
    class_confidence: Option<Vec<f64>>,
    /// Worker threads; outputs do not depend on this.
    #[arg(long, default_value_t = default_workers())]
    workers: usize,
}

fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

enum Failure {
    Error(Error),
    Partial(usize),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

impl RunArgs {
    fn engine_config(&self, manifest: &DatasetManifest) -> Result<EngineConfig, Error> {
        let road_class = match &self.class {
            None => manifest.schema.road_index(),
            Some(name) => manifest
                .schema
                .class_index(name)
                .ok_or_else(|| Error::Config(format!("class {name:?} not in schema")))?,
        };
        Ok(EngineConfig {
            fusion: FusionConfig {
                k: self.k,
                ell: self.ell,
                omega_clamp: OmegaClamp {
                    min: self.omega_min,
                    max: self.omega_max,
                },
                posterior_mode: match self.posterior_mode {
                    ModeArg::AsPublished => PosteriorMode::AsPublished,
                    ModeArg::Conjugate => PosteriorMode::Conjugate,
                },
                road_class,
                update_scope: match self.update_scope {
                    ScopeArg::RoadCandidates => UpdateScope::RoadCandidates,
                    ScopeArg::AllPixels => UpdateScope::AllPixels,
                },
                template_coverage: match self.template_coverage {
                    CoverageArg::PerReference => TemplateCoverage::PerReference,
                    CoverageArg::TemplateArgmax => TemplateCoverage::TemplateArgmax,
                },
            },
            geo_radius_m: self.geo_radius,
            aggregation: match self.iou_mode {
                IouModeArg::PerFrame => IouAggregation::PerFrame,
                IouModeArg::PixelPooled => IouAggregation::PixelPooled,
            },
            class_confidence: self.class_confidence.clone(),
        })
    }

    fn engine(&self) -> Result<Engine, Error> {
        let manifest = load_manifest(&self.manifest, self.strict)?;
        let cfg = self.engine_config(&manifest)?;
        Engine::new(manifest, cfg)
    }
}

fn partial<T>(failures: &[(String, Error)], ok: T) -> Result<T, Failure> {
    if failures.is_empty() {
        Ok(ok)
    } else {
        for (id, e) in failures {
            error!("{id}: {e}");
        }
        Err(Failure::Partial(failures.len()))
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Index { manifest, strict } => {
            let m = load_manifest(&manifest, strict)?;
            let index = build_index::<f64>(&m)?;
            println!(
                "indexed {} descriptors, dims {}, {} with geotags",
                index.len(),
                index.dims(),
                index.geotagged()
            );
            Ok(())
        }
        Command::Fuse(args) => {
            let engine = args.engine()?;
            write_config_echo(&args.out, "fuse", &args.manifest, engine.config(), &[], &[])?;
            let batch = engine.fuse_all(args.workers)?;
            write_fuse_outputs(&args.out, &batch.frames, engine.config().fusion.road_class)?;
            println!("fused {} queries into {}", batch.frames.len(), args.out.display());
            partial(&batch.failures, ())
        }
        Command::Eval { run, methods } => {
            let methods = methods
                .iter()
                .map(|m| m.parse::<Method>())
                .collect::<Result<Vec<_>, _>>()?;
            if methods.is_empty() {
                return Err(Error::Config("method set is empty".into()).into());
            }
            let engine = run.engine()?;
            write_config_echo(&run.out, "eval", &run.manifest, engine.config(), &methods, &[])?;
            let batch = engine.evaluate_all(&methods, run.workers)?;
            let report = write_eval_outputs(&run.out, &batch.frames, engine.config().aggregation)?;
            print!("{}", simplace::eval::summary_table(&report));
            partial(&batch.failures, ())
        }
        Command::Sweep { run, ells } => {
            let engine = run.engine()?;
            write_config_echo(&run.out, "sweep", &run.manifest, engine.config(), &[Method::PriorQuery], &ells)?;
            let (rows, failures) = engine.sweep_ell(&ells, run.workers)?;
            write_sweep_outputs(&run.out, &rows)?;
            print!("{}", simplace::engine::sweep_csv(&rows));
            partial(&failures, ())
        }
        Command::Synth {
            seed,
            references,
            queries,
            out,
            config,
        } => {
            let cfg = match config {
                None => SynthConfig::default(),
                Some(p) => SynthConfig::parse(&read_text(&p)?)?,
            };
            let suite = generate_suite(&cfg, seed, references, queries, &out)?;
            println!("manifest {}", suite.manifest_path.display());
            println!("digest {}", suite.digest);
            Ok(())
        }
    }
}

fn read_text(path: &Path) -> Result<String, Error> {
    std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Partial(n)) => {
            eprintln!("error: {n} frame(s) failed");
            ExitCode::from(EXIT_PARTIAL)
        }
        Err(Failure::Error(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Config => EXIT_CONFIG,
                ErrorKind::Data => EXIT_DATA,
            })
        }
    }
}
