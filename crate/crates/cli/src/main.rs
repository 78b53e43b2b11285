//! `dpstyler`: train, evaluate and inspect DPStyler models from a TOML config.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dpstyler::backend::toy::{write_toy_dataset, ToyDatasetSpec};
use dpstyler::backend::EncoderBackend;
use dpstyler::inference::{evaluate, export_embeddings, EvalReport};
use dpstyler::trainer::EpochMetrics;
use dpstyler::{
    load_checkpoint, save_checkpoint, train_one_model, Checkpoint32, EnsembleBundle, Error, Fusion,
    RunConfig, ToyBackend, ZeroShotClassifier, ZeroShotPrompt,
};

#[derive(Parser)]
#[command(
    name = "dpstyler",
    version,
    about = "Source-free domain generalization with dynamic prompt styles"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (TOML)
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Output directory, overriding `output_dir`
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Master seed, overriding `train.seed`
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum FusionArg {
    Max,
    Average,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model per template
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate an ensemble of checkpoints on the configured dataset
    Eval {
        #[command(flatten)]
        common: Common,
        /// Score fusion, overriding `eval.fusion`
        #[arg(long)]
        fusion: Option<FusionArg>,
        /// Checkpoints to ensemble; defaults to this config's checkpoints in the output directory
        checkpoints: Vec<PathBuf>,
    },
    /// Evaluate the "[class]" and "a photo of a [class]" zero-shot baselines
    Zeroshot {
        #[command(flatten)]
        common: Common,
    },
    /// Write raw (and optionally removed) image embeddings as CSV
    ExportEmbeddings {
        #[command(flatten)]
        common: Common,
        /// Checkpoint whose remover produces the extra columns
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Destination file; its directory must exist
        #[arg(long, value_name = "PATH")]
        output: Option<PathBuf>,
    },
    /// Print the configuration after default-merging
    Info {
        #[command(flatten)]
        common: Common,
    },
    /// Generate a synthetic multi-domain dataset for the toy backend
    ToyData {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 4)]
        domains: usize,
        #[arg(long, default_value_t = 50)]
        images_per_domain: usize,
        /// Emit content-only images
        #[arg(long)]
        noiseless: bool,
        #[arg(long, default_value_t = 1)]
        data_seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Diverged { .. } | Error::Domain(_) => 3,
        _ => 2,
    }
}

fn load(common: &Common) -> Result<RunConfig, Error> {
    let mut config = RunConfig::load(&common.config)?;
    if let Some(out) = &common.out {
        config.output_dir = std::path::absolute(out).unwrap_or_else(|_| out.clone());
    }
    if let Some(seed) = common.seed {
        config.train.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

fn create_dir(dir: &Path) -> Result<(), Error> {
    fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Error> {
    fs::write(path, contents).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn checkpoint_name(template_id: &str, fingerprint: &str) -> String {
    format!("{template_id}-{fingerprint}.dpst")
}

fn run(command: Command) -> Result<(), Error> {
    match command {
        Command::Train { common } => train(&load(&common)?),
        Command::Eval {
            common,
            fusion,
            checkpoints,
        } => {
            let mut config = load(&common)?;
            if let Some(f) = fusion {
                config.eval.fusion = match f {
                    FusionArg::Max => Fusion::Max,
                    FusionArg::Average => Fusion::Average,
                };
            }
            eval(&config, checkpoints)
        }
        Command::Zeroshot { common } => zeroshot(&load(&common)?),
        Command::ExportEmbeddings {
            common,
            checkpoint,
            output,
        } => export(&load(&common)?, checkpoint, output),
        Command::Info { common } => info(&load(&common)?),
        Command::ToyData {
            common,
            domains,
            images_per_domain,
            noiseless,
            data_seed,
        } => toy_data(
            &load(&common)?,
            &ToyDatasetSpec {
                domains,
                images_per_domain,
                noiseless,
                seed: data_seed,
                ..Default::default()
            },
        ),
    }
}

fn train(config: &RunConfig) -> Result<(), Error> {
    let task = config.task()?;
    let backend = config.toy_backend()?;
    let lexicon = config.lexicon::<f32>(&backend)?;
    let train_config = config.train_config();
    let fingerprint = config.fingerprint();
    let out = config.output_dir();
    create_dir(&out)?;
    write_file(&out.join(format!("config-{fingerprint}.toml")), config.to_toml())?;

    let templates = config.templates()?;
    let results: Vec<Result<(), Error>> = std::thread::scope(|scope| {
        let handles: Vec<_> = templates
            .iter()
            .map(|template| {
                let (task, backend, lexicon, train_config) = (&task, &backend, &lexicon, &train_config);
                let (out, fingerprint) = (&out, &fingerprint);
                scope.spawn(move || -> Result<(), Error> {
                    let stem = format!("{}-{fingerprint}", template.id());
                    let metrics_path = out.join(format!("{stem}.metrics.jsonl"));
                    let mut log = String::new();
                    let model = train_one_model(
                        task,
                        backend,
                        template,
                        lexicon.as_ref(),
                        train_config,
                        |m: &EpochMetrics| {
                            log.push_str(&m.to_json_line());
                            log.push('\n');
                        },
                    );
                    write_file(&metrics_path, &log)?;
                    let model = model?;
                    let path = out.join(checkpoint_name(template.id(), fingerprint));
                    save_checkpoint(&model.checkpoint, &path)?;
                    let last = model.history.last().expect("at least one epoch");
                    println!(
                        "{}: L_U {:.5}  L_C {:.5}  train acc {:.1}%  -> {}",
                        template.id(),
                        last.mean_uncertainty,
                        last.mean_classification,
                        model.final_train_accuracy * 100.0,
                        path.display()
                    );
                    Ok(())
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("training thread panicked"))
            .collect()
    });
    results.into_iter().collect()
}

fn default_checkpoints(config: &RunConfig) -> Result<Vec<PathBuf>, Error> {
    let out = config.output_dir();
    let fingerprint = config.fingerprint();
    let mut found = Vec::new();
    for template in config.templates()? {
        let path = out.join(checkpoint_name(template.id(), &fingerprint));
        if path.is_file() {
            found.push(path);
        }
    }
    if found.is_empty() {
        return Err(Error::Config(format!(
            "no checkpoints given and none for config {fingerprint} in {}",
            out.display()
        )));
    }
    Ok(found)
}

fn finish_report(config: &RunConfig, mut report: EvalReport, name: &str) -> Result<(), Error> {
    report.config_fingerprint = config.fingerprint();
    report.seed = config.train.seed;
    print!("{}", report.to_table());
    if report.total_errors() > 0 {
        eprintln!("{} image(s) could not be decoded", report.total_errors());
    }
    let out = config.output_dir();
    create_dir(&out)?;
    let path = out.join(format!("{name}-{}.json", report.config_fingerprint));
    write_file(&path, report.to_json())
}

fn check_compatible(
    checkpoint: &Checkpoint32,
    path: &Path,
    backend: &ToyBackend,
    config: &RunConfig,
) -> Result<(), Error> {
    let expected = EncoderBackend::<f32>::descriptor(backend);
    if checkpoint.backend != expected {
        return Err(Error::Config(format!(
            "{} was trained on backend {:?}, config uses {:?}",
            path.display(),
            checkpoint.backend,
            expected
        )));
    }
    if checkpoint.class_names != config.classes {
        return Err(Error::Config(format!(
            "{} has classes {:?}, config has {:?}",
            path.display(),
            checkpoint.class_names,
            config.classes
        )));
    }
    Ok(())
}

fn eval(config: &RunConfig, checkpoints: Vec<PathBuf>) -> Result<(), Error> {
    let manifest = config.manifest()?;
    let backend = config.toy_backend()?;
    let paths = if checkpoints.is_empty() {
        default_checkpoints(config)?
    } else {
        checkpoints
    };
    let mut members = Vec::with_capacity(paths.len());
    for path in &paths {
        let c: Checkpoint32 = load_checkpoint(path)?;
        check_compatible(&c, path, &backend, config)?;
        members.push(c);
    }
    let bundle =
        EnsembleBundle::new(members, config.eval.fusion).map_err(|e| Error::Config(e.to_string()))?;
    let report = evaluate(&manifest, &backend, &bundle)?;
    finish_report(config, report, &format!("report-{}", config.eval.fusion))
}

fn zeroshot(config: &RunConfig) -> Result<(), Error> {
    let manifest = config.manifest()?;
    let backend = config.toy_backend()?;
    let task = config.task()?;
    for prompt in [ZeroShotPrompt::C, ZeroShotPrompt::PC] {
        let classifier = ZeroShotClassifier::<f32>::new(&backend, &task, prompt)?;
        let report = evaluate(&manifest, &backend, &classifier)?;
        finish_report(config, report, &format!("zeroshot-{prompt}"))?;
    }
    Ok(())
}

fn export(config: &RunConfig, checkpoint: Option<PathBuf>, output: Option<PathBuf>) -> Result<(), Error> {
    let manifest = config.manifest()?;
    let backend = config.toy_backend()?;
    let output = match output {
        Some(p) => {
            let parent = p
                .parent()
                .filter(|d| !d.as_os_str().is_empty())
                .unwrap_or(Path::new("."));
            if !parent.is_dir() {
                return Err(Error::Config(format!(
                    "output directory {} does not exist",
                    parent.display()
                )));
            }
            p
        }
        None => {
            let out = config.output_dir();
            create_dir(&out)?;
            out.join(format!("embeddings-{}.csv", config.fingerprint()))
        }
    };
    let checkpoint = match &checkpoint {
        Some(path) => {
            let c: Checkpoint32 = load_checkpoint(path)?;
            check_compatible(&c, path, &backend, config)?;
            Some(c)
        }
        None => None,
    };
    let summary = export_embeddings(&manifest, &backend, checkpoint.as_ref(), &output)?;
    println!("{} rows written to {}", summary.rows, output.display());
    if summary.failures > 0 {
        eprintln!("{} image(s) could not be decoded", summary.failures);
    }
    Ok(())
}

fn info(config: &RunConfig) -> Result<(), Error> {
    let mut stdout = std::io::stdout().lock();
    let _ = writeln!(stdout, "# fingerprint {}", config.fingerprint());
    for t in config.templates()? {
        let _ = writeln!(stdout, "# template {} = {:?}", t.id(), t.pattern());
    }
    let _ = write!(stdout, "{}", config.to_toml());
    Ok(())
}

fn toy_data(config: &RunConfig, spec: &ToyDatasetSpec) -> Result<(), Error> {
    let backend = config.toy_backend()?;
    let root = if let Some(r) = &config.eval.root {
        config.resolve(r)
    } else if let Some(m) = &config.eval.manifest {
        config
            .resolve(m)
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default()
    } else {
        config.output_dir().join("toy-data")
    };
    create_dir(&root)?;
    let dim = EncoderBackend::<f32>::token_dim(&backend);
    let manifest = write_toy_dataset(&root, &config.task()?, dim, spec)?;
    println!(
        "{} images written; manifest {}",
        spec.domains * spec.images_per_domain,
        manifest.display()
    );
    Ok(())
}
