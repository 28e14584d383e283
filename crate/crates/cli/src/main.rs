//! `wheelgen`: batch generation and store operations without the UI.
//!
//! Exit codes: 0 success, 2 invalid input, 3 backend or I/O failure.

mod bench;

use std::fs;
use std::io::Write as _;
use std::net::IpAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};
use wheelgen_core::exemplars::{aggregate_top_percent, build_corpus, Dataset, ExemplarStore, VoteMatrix};
use wheelgen_core::image::DiskImageStore;
use wheelgen_core::toy::{train_toy_denoiser, TrainConfig, TrainingItem};
use wheelgen_core::{DenoiseSchedule, GenerationRequest, Generator, ImageRepo, ImageTensor, RecordStore, ToyEmbedder};
use wheelgen_service::{standard_backends, ServiceConfig};

#[derive(Parser)]
#[command(name = "wheelgen", version, about = "Symmetry-constrained wheel concept generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one request file and write its PNGs and record.
    Generate(GenerateArgs),
    #[command(subcommand)]
    Corpus(CorpusCmd),
    /// Fit the toy mixture backend on an exemplar store.
    Train(TrainArgs),
    #[command(subcommand)]
    Exemplars(ExemplarsCmd),
    #[command(subcommand)]
    Bench(BenchCmd),
    #[command(subcommand)]
    Images(ImagesCmd),
    /// Start the HTTP service.
    Serve(ServeArgs),
}

#[derive(Args)]
struct StoreArgs {
    /// Store root, same layout the service uses.
    #[arg(long, env = "WHEELGEN_STORE", default_value = "wheelgen-store")]
    store: PathBuf,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    request: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the request seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the request backend.
    #[arg(long)]
    backend: Option<String>,
    /// Trained mixture artifact to register as a backend.
    #[arg(long, env = "WHEELGEN_MODEL")]
    model: Option<PathBuf>,
    #[arg(long, env = "WHEELGEN_CANVAS", default_value_t = 64)]
    canvas: usize,
    #[command(flatten)]
    store: StoreArgs,
}

#[derive(Subcommand)]
enum CorpusCmd {
    /// Generate a labelled synthetic wheel corpus as an exemplar store.
    Build {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        canvas: usize,
    },
    /// Add a folder of labelled images to an exemplar store.
    Import {
        #[arg(long)]
        dir: PathBuf,
        /// CSV with `file,labels[,kind]`; labels are `;`-separated.
        #[arg(long)]
        labels: PathBuf,
        /// Exemplar store directory.
        #[arg(long, default_value = "wheelgen-store/exemplars")]
        into: PathBuf,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// Exemplar store whose wheels form the training set.
    #[arg(long)]
    corpus: PathBuf,
    /// JSON training config; missing keys keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum ExemplarsCmd {
    /// Top-percentile exemplar set from a vote matrix.
    Aggregate {
        /// JSON `{keyword, counts: {id: votes}, rater_count}`.
        #[arg(long)]
        votes: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        percentile: f64,
        #[arg(long, default_value_t = 1)]
        min_votes: u32,
        /// Also record the set in this exemplar store.
        #[arg(long)]
        into: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum BenchCmd {
    /// Per-operator latency as CSV on stdout.
    Symmetry {
        #[arg(long, default_value_t = 64)]
        canvas: usize,
        /// Comma-separated repetition numbers.
        #[arg(long, value_delimiter = ',', num_args = 1.., required = true)]
        k: Vec<u32>,
        #[arg(long, default_value_t = 20)]
        reps: usize,
    },
}

#[derive(Subcommand)]
enum ImagesCmd {
    /// Put images into the store and print their references as JSON lines.
    Add {
        #[arg(required = true)]
        files: Vec<PathBuf>,
        #[command(flatten)]
        store: StoreArgs,
    },
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, env = "WHEELGEN_BIND", default_value = "127.0.0.1")]
    bind: IpAddr,
    #[arg(long, env = "WHEELGEN_PORT", default_value_t = 8080)]
    port: u16,
    #[arg(long, env = "WHEELGEN_BACKEND")]
    backend: Option<String>,
    #[arg(long, env = "WHEELGEN_MODEL")]
    model: Option<PathBuf>,
    #[arg(long, env = "WHEELGEN_CANVAS", default_value_t = 64)]
    canvas: usize,
    #[arg(long, env = "WHEELGEN_WORKERS", default_value_t = 1)]
    workers: usize,
    #[arg(long, env = "WHEELGEN_SEED_CORPUS", default_value_t = 200)]
    seed_corpus: usize,
    #[command(flatten)]
    store: StoreArgs,
}

/// Bad input from the user; exits with 2.
#[derive(Debug)]
struct Invalid(String);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Invalid(msg.into()).into()
}

fn exit_code(e: &anyhow::Error) -> u8 {
    use wheelgen_core::Error as E;
    for cause in e.chain() {
        if cause.is::<Invalid>() {
            return 2;
        }
        if let Some(core) = cause.downcast_ref::<E>() {
            return match core {
                E::Param(_) | E::Reference(_) | E::Invalid(_) | E::VoteRejected(_) | E::EmptySet(_) => 2,
                _ => 3,
            };
        }
    }
    3
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let filter = if matches!(cli.command, Command::Serve(_)) { "info" } else { "warn" };
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(filter)),
        )
        .with_writer(std::io::stderr)
        .init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if let Some(wheelgen_core::Error::Invalid(violations)) = e.downcast_ref::<wheelgen_core::Error>() {
                eprintln!("error: request failed validation");
                for v in violations {
                    eprintln!("  {v}");
                }
            } else {
                eprintln!("error: {e:#}");
            }
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Generate(a) => generate(a),
        Command::Corpus(CorpusCmd::Build { n, seed, out, canvas }) => {
            let corpus = build_corpus(n, seed, canvas)?;
            let mut store = ExemplarStore::in_memory();
            store.add_corpus(&corpus);
            fs::create_dir_all(&out).with_context(|| out.display().to_string())?;
            store.save_to(&out)?;
            print!("{}", corpus.report());
            Ok(())
        }
        Command::Corpus(CorpusCmd::Import { dir, labels, into }) => {
            fs::create_dir_all(&into).with_context(|| into.display().to_string())?;
            let mut store = ExemplarStore::open(&into)?;
            let added = store.import_folder(&dir, &labels)?;
            store.save()?;
            println!("imported {added} images into {} ({} entries)", into.display(), store.len());
            Ok(())
        }
        Command::Train(a) => train(a),
        Command::Exemplars(ExemplarsCmd::Aggregate {
            votes,
            percentile,
            min_votes,
            into,
        }) => {
            let text = fs::read(&votes).with_context(|| votes.display().to_string())?;
            let m: VoteMatrix = serde_json::from_slice(&text).map_err(|e| invalid(format!("{}: {e}", votes.display())))?;
            let m = VoteMatrix::from_counts(&m.keyword, m.counts, m.rater_count)?;
            let set = aggregate_top_percent(&m, percentile, min_votes)?;
            if let Some(dir) = into {
                let mut store = ExemplarStore::open(&dir)?;
                store.set_exemplars(set.clone(), &m.counts);
                store.save()?;
            }
            println!("{}", serde_json::to_string_pretty(&set)?);
            Ok(())
        }
        Command::Bench(BenchCmd::Symmetry { canvas, k, reps }) => {
            if reps == 0 {
                return Err(invalid("--reps must be at least 1"));
            }
            let rows = bench::symmetry(canvas, &k, reps)?;
            let mut w = csv::Writer::from_writer(std::io::stdout().lock());
            for r in rows {
                w.serialize(r)?;
            }
            w.flush()?;
            Ok(())
        }
        Command::Images(ImagesCmd::Add { files, store }) => {
            let repo = DiskImageStore::open(store.store.join("images"))?;
            let mut out = std::io::stdout().lock();
            for f in files {
                let img = ImageTensor::load(&f)?;
                let r = repo.put(&img)?;
                writeln!(out, "{}", serde_json::to_string(&r)?)?;
            }
            Ok(())
        }
        Command::Serve(a) => {
            let config = ServiceConfig {
                addr: (a.bind, a.port).into(),
                store: a.store.store,
                default_backend: a.backend,
                canvas: a.canvas,
                model: a.model,
                workers: a.workers,
                seed_corpus: a.seed_corpus,
            };
            config.validate().map_err(|e| invalid(e.to_string()))?;
            tokio::runtime::Runtime::new()?.block_on(wheelgen_service::serve(config))
        }
    }
}

fn load_exemplars(dir: &Path, canvas: usize) -> Result<ExemplarStore> {
    if dir.join(wheelgen_core::exemplars::MANIFEST).exists() {
        return Ok(ExemplarStore::open(dir)?);
    }
    // no store yet: a fixed synthetic corpus keeps keyword sampling usable
    let mut store = ExemplarStore::in_memory();
    store.add_corpus(&build_corpus(200, 0, canvas)?);
    Ok(store)
}

fn generate(a: GenerateArgs) -> Result<()> {
    let text = fs::read(&a.request).with_context(|| a.request.display().to_string())?;
    let mut req: GenerationRequest =
        serde_json::from_slice(&text).map_err(|e| invalid(format!("{}: {e}", a.request.display())))?;
    if let Some(seed) = a.seed {
        req.seed = seed;
    }
    if let Some(b) = a.backend {
        req.backend_id = b;
    }
    let (backends, model_id) = standard_backends(a.canvas, a.model.as_deref())?;
    if req.backend_id.trim().is_empty() {
        req.backend_id = model_id.unwrap_or_else(|| wheelgen_core::toy::MixtureDenoiser::SYNTHETIC_ID.into());
    }
    let root = &a.store.store;
    let images = Arc::new(DiskImageStore::open(root.join("images"))?);
    let exemplars = load_exemplars(&root.join("exemplars"), a.canvas)?;
    let generator = Generator::new(a.canvas, backends, Arc::new(ToyEmbedder), images, exemplars);
    let req = generator.check(&req)?;
    let records = RecordStore::open(root.join("records"))?;
    let rec = generator.generate_record(&req, None, &records)?;

    fs::create_dir_all(&a.out).with_context(|| a.out.display().to_string())?;
    let mut stdout = std::io::stdout().lock();
    for (i, r) in rec.outputs.iter().enumerate() {
        let path = a.out.join(format!("output-{i:02}.png"));
        let bytes = generator.images().png_bytes(&r.sha256)?;
        fs::write(&path, bytes).with_context(|| path.display().to_string())?;
        writeln!(stdout, "{}", path.display())?;
    }
    let path = a.out.join("record.json");
    fs::write(&path, serde_json::to_vec_pretty(&rec)?).with_context(|| path.display().to_string())?;
    writeln!(stdout, "{}", path.display())?;
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let config: TrainConfig = match &a.config {
        Some(p) => {
            let text = fs::read(p).with_context(|| p.display().to_string())?;
            serde_json::from_slice(&text).map_err(|e| invalid(format!("{}: {e}", p.display())))?
        }
        None => TrainConfig::default(),
    };
    if !a.corpus.join(wheelgen_core::exemplars::MANIFEST).exists() {
        return Err(anyhow!("{} is not an exemplar store (no manifest)", a.corpus.display()));
    }
    let store = ExemplarStore::open(&a.corpus)?;
    let items = store
        .entries()
        .filter(|e| e.kind == Dataset::Wheel)
        .map(|e| {
            Ok(TrainingItem {
                image: store.image(&e.id)?.as_ref().clone(),
                labels: e.labels.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let model = train_toy_denoiser(&items, &DenoiseSchedule::default_toy(), &ToyEmbedder, &config)?;
    model.save(&a.out)?;
    let rep = model.training.as_ref().expect("fresh model carries its report");
    println!(
        "trained `{}` on {} images in {:.1}s: noise mse {:.4} -> {:.4} (mixture only {:.4})",
        config.id, rep.examples, rep.seconds, rep.initial_loss, rep.final_loss, rep.mixture_loss
    );
    println!("wrote {}", a.out.display());
    Ok(())
}
