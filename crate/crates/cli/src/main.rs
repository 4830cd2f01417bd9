use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use clickfeed_core::eval::render_table;
use clickfeed_core::ranker::{score_no_feedback, score_with_feedback};
use clickfeed_core::store::ingest;
use clickfeed_core::trainer::gradient_check;
use clickfeed_core::{
    encode_query, generate_synthetic, run_ablation, run_protocol, seed, top_k, AblationGrid, Dataset, EncoderStack,
    Feedback, LossConfig, LossKind, OracleConfig, OracleMode, ProtocolParams, RankerParams, Retriever,
    SelectorConfig, SynthConfig, TrainerConfig,
};
use clickfeed_service::{AppState, ServiceConfig};

#[derive(Parser)]
#[command(name = "clickfeed", version, about = "Click-feedback retrieval engine")]
struct Cli {
    /// Root seed; every random stream is derived from it by name.
    #[arg(long, global = true, default_value_t = 7)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset bundle.
    GenSynthetic {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        synth: SynthArgs,
    },
    /// Validate an embedding file against its metadata, or a whole bundle.
    IngestCheck {
        #[arg(long, conflicts_with_all = ["embeddings", "metadata"])]
        dataset: Option<PathBuf>,
        #[arg(long, requires = "metadata")]
        embeddings: Option<PathBuf>,
        #[arg(long, requires = "embeddings")]
        metadata: Option<PathBuf>,
    },
    /// Run one query, optionally with feedback.
    Search {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        query: String,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long, value_delimiter = ',')]
        likes: Vec<usize>,
        #[arg(long, value_delimiter = ',')]
        dislikes: Vec<usize>,
        #[command(flatten)]
        ranker: RankerArgs,
    },
    /// Run the retrieve → feedback → re-rank protocol on the test split.
    Benchmark {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        protocol: ProtocolArgs,
        /// Write the report JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one of the ablation grids.
    Ablate {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        protocol: ProtocolArgs,
        #[arg(long, value_enum)]
        grid: GridArg,
        /// Write all reports as a JSON array here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train adapters with feedback-guided losses.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_enum, default_value_t = LossArg::Ranking)]
        loss: LossArg,
        /// Separate image adapters for text→image and image→image similarity.
        #[arg(long)]
        sep_enc: bool,
        #[arg(long, default_value_t = 30)]
        epochs: usize,
        #[arg(long, default_value_t = 1e-2)]
        learning_rate: f64,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[arg(long, default_value_t = 0.2)]
        margin: f64,
        #[arg(long, default_value_t = 0.07)]
        temperature: f64,
        #[arg(long, default_value_t = 1.0)]
        alignment_weight: f64,
        #[command(flatten)]
        protocol: ProtocolArgs,
        /// Adapter checkpoint output.
        #[arg(long)]
        out: PathBuf,
        /// Loss curve JSON output.
        #[arg(long)]
        curve: Option<PathBuf>,
    },
    /// Compare analytic loss gradients with finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long, value_enum)]
        loss: Option<LossArg>,
    },
    /// Start the HTTP session service.
    Serve {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        ranker: RankerArgs,
        #[arg(long, env = "CLICKFEED_BIND", default_value = "127.0.0.1:8080")]
        bind: SocketAddr,
        #[arg(long, env = "CLICKFEED_K", default_value_t = 10)]
        k: usize,
        #[arg(long, env = "CLICKFEED_SESSION_TTL_SECS", default_value_t = 1800)]
        session_ttl_secs: u64,
        /// Directory of static UI assets to serve alongside the API.
        #[arg(long, env = "CLICKFEED_STATIC_DIR")]
        static_dir: Option<PathBuf>,
    },
}

#[derive(Args, Clone)]
struct SynthArgs {
    #[arg(long, default_value_t = SynthConfig::default().n_items)]
    n_items: usize,
    #[arg(long, default_value_t = SynthConfig::default().n_attributes)]
    n_attributes: usize,
    #[arg(long, default_value_t = SynthConfig::default().attrs_per_item)]
    attrs_per_item: usize,
    #[arg(long, default_value_t = SynthConfig::default().dim)]
    dim: usize,
    #[arg(long, default_value_t = SynthConfig::default().noise_sigma)]
    noise_sigma: f64,
    #[arg(long, default_value_t = SynthConfig::default().query_attrs)]
    query_attrs: usize,
    #[arg(long, default_value_t = SynthConfig::default().n_train_queries)]
    n_train: usize,
    #[arg(long, default_value_t = SynthConfig::default().n_test_queries)]
    n_test: usize,
}

impl SynthArgs {
    fn config(&self, seed: u64) -> SynthConfig {
        SynthConfig {
            n_items: self.n_items,
            n_attributes: self.n_attributes,
            attrs_per_item: self.attrs_per_item,
            dim: self.dim,
            noise_sigma: self.noise_sigma,
            query_attrs: self.query_attrs,
            n_train_queries: self.n_train,
            n_test_queries: self.n_test,
            seed,
        }
    }
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Dataset bundle directory. Without it, the default synthetic benchmark
    /// is generated in memory from --seed.
    #[arg(long, env = "CLICKFEED_DATASET")]
    dataset: Option<PathBuf>,
    /// Adapter checkpoint to apply.
    #[arg(long, env = "CLICKFEED_ADAPTERS")]
    adapters: Option<PathBuf>,
}

impl DataArgs {
    fn load(&self, seed: u64) -> Result<(Dataset, Retriever)> {
        let dataset = match &self.dataset {
            Some(dir) => Dataset::load_dir(dir).with_context(|| format!("loading dataset from {}", dir.display()))?,
            None => generate_synthetic(&SynthConfig { seed, ..SynthConfig::default() })?,
        };
        let retriever = match &self.adapters {
            Some(path) => {
                let stack = EncoderStack::load(path).with_context(|| format!("loading adapters from {}", path.display()))?;
                Retriever::new(&dataset, stack)?
            }
            None => Retriever::plain(&dataset),
        };
        Ok((dataset, retriever))
    }
}

#[derive(Args, Clone)]
struct RankerArgs {
    #[arg(long, env = "CLICKFEED_LAMBDA_P", default_value_t = 1.0)]
    lambda_p: f64,
    #[arg(long, env = "CLICKFEED_LAMBDA_N", default_value_t = 0.5)]
    lambda_n: f64,
}

impl RankerArgs {
    fn params(&self) -> Result<RankerParams> {
        Ok(RankerParams::new(self.lambda_p, self.lambda_n)?)
    }
}

#[derive(Args, Clone)]
struct ProtocolArgs {
    #[command(flatten)]
    ranker: RankerArgs,
    #[arg(long, default_value_t = 1)]
    n_like: usize,
    #[arg(long, default_value_t = 1)]
    n_dislike: usize,
    #[arg(long, value_enum, default_value_t = OracleArg::Preference)]
    oracle: OracleArg,
    /// Candidate pool size shown to the oracle.
    #[arg(long, default_value_t = 10)]
    pool_k: usize,
    #[arg(long, default_value_t = 0.0)]
    lambda_diversity: f64,
    /// Keep the target out of the candidate pool.
    #[arg(long)]
    exclude_target_feedback: bool,
}

impl ProtocolArgs {
    fn params(&self) -> Result<ProtocolParams> {
        Ok(ProtocolParams {
            ranker: self.ranker.params()?,
            oracle: self.oracle_config(),
            selector: self.selector_config(),
            recall_ks: vec![1, 5, 10],
            exclude_target_feedback: self.exclude_target_feedback,
        })
    }

    fn oracle_config(&self) -> OracleConfig {
        let mode = match self.oracle {
            OracleArg::Preference => OracleMode::PreferenceEmbedding,
            OracleArg::AttributeIou => OracleMode::AttributeIou,
        };
        OracleConfig { n_like: self.n_like, n_dislike: self.n_dislike, mode }
    }

    fn selector_config(&self) -> SelectorConfig {
        SelectorConfig { k: self.pool_k, lambda_diversity: self.lambda_diversity }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum OracleArg {
    Preference,
    AttributeIou,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum LossArg {
    Ranking,
    Contrastive,
}

impl From<LossArg> for LossKind {
    fn from(l: LossArg) -> Self {
        match l {
            LossArg::Ranking => LossKind::Ranking,
            LossArg::Contrastive => LossKind::Contrastive,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum GridArg {
    Lambda,
    Count,
    Diversity,
}

impl From<GridArg> for AblationGrid {
    fn from(g: GridArg) -> Self {
        match g {
            GridArg::Lambda => AblationGrid::Lambda,
            GridArg::Count => AblationGrid::Count,
            GridArg::Diversity => AblationGrid::Diversity,
        }
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn print_stage(label: &str, m: &clickfeed_core::StageMetrics) {
    let r = |k| m.r_at.get(k).map_or(f64::NAN, |v| v * 100.0);
    println!("{label:<9} R@1 {:5.1}  R@5 {:5.1}  R@10 {:5.1}  MedR {:4}  MeanR {:7.1}", r(1), r(5), r(10), m.medr, m.meanr);
}

fn test_split(dataset: &Dataset) -> Result<Vec<usize>> {
    let split = dataset.splits().test.clone();
    if split.is_empty() {
        bail!("dataset has an empty test split");
    }
    Ok(split)
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::GenSynthetic { out, synth } => {
            let ds = generate_synthetic(&synth.config(seed))?;
            ds.save_dir(&out)?;
            println!("wrote {} items, {} queries to {}", ds.len(), ds.queries().len(), out.display());
            println!("checksum {}", ds.checksum());
        }
        Command::IngestCheck { dataset, embeddings, metadata } => match (dataset, embeddings, metadata) {
            (Some(dir), _, _) => {
                let ds = Dataset::load_dir(&dir)?;
                println!(
                    "ok: {} items, dim {}, {} vocab tokens, {} queries ({} train / {} test)",
                    ds.len(),
                    ds.dim(),
                    ds.vocab().tokens().len(),
                    ds.queries().len(),
                    ds.splits().train.len(),
                    ds.splits().test.len()
                );
                println!("checksum {}", ds.checksum());
            }
            (None, Some(e), Some(m)) => {
                let (items, rows) = ingest(&e, &m)?;
                println!("ok: {} items, dim {}", items.len(), rows.dim());
            }
            _ => bail!("pass --dataset, or both --embeddings and --metadata"),
        },
        Command::Search { data, query, k, likes, dislikes, ranker } => {
            let (ds, retriever) = data.load(seed)?;
            let qvec = retriever.query(&encode_query(&query, ds.vocab())?)?;
            let feedback = Feedback::new(likes, dislikes);
            let scores = if feedback.is_empty() {
                score_no_feedback(&qvec, retriever.catalog())?
            } else {
                score_with_feedback(&qvec, &feedback, &ranker.params()?, retriever.catalog())?
            };
            for (pos, id) in top_k(&scores, k)?.into_iter().enumerate() {
                println!("{:>3}  {:>6}  {:+.4}  {}", pos + 1, id, scores[id], ds.items()[id].text);
            }
        }
        Command::Benchmark { data, protocol, out } => {
            let (ds, retriever) = data.load(seed)?;
            let report = run_protocol(&ds, &retriever, &test_split(&ds)?, &protocol.params()?, seed)?;
            print_stage("baseline", &report.baseline);
            print_stage("feedback", &report.feedback);
            println!("checksum {}  ({} ms)", report.checksum(), report.wall_time_ms);
            if let Some(path) = out {
                write_json(&path, &report)?;
            }
        }
        Command::Ablate { data, protocol, grid, out } => {
            let (ds, retriever) = data.load(seed)?;
            let grid: AblationGrid = grid.into();
            let points = grid.points(&protocol.params()?);
            let reports = run_ablation(&ds, &retriever, &test_split(&ds)?, &points, seed)?;
            print!("{}", render_table(grid, &reports));
            if let Some(path) = out {
                write_json(&path, &reports)?;
            }
        }
        Command::Train {
            data,
            loss,
            sep_enc,
            epochs,
            learning_rate,
            batch_size,
            margin,
            temperature,
            alignment_weight,
            protocol,
            out,
            curve,
        } => {
            let (ds, retriever) = data.load(seed)?;
            let mut stack = retriever.stack().clone();
            if sep_enc && stack.image_unimodal.is_none() {
                stack.image_unimodal = Some(stack.image_crossmodal.clone());
            }
            let cfg = TrainerConfig {
                loss: LossConfig { kind: loss.into(), margin, temperature, alignment_weight },
                batch_size,
                epochs,
                learning_rate,
                oracle: protocol.oracle_config(),
                selector: protocol.selector_config(),
                exclude_target_feedback: protocol.exclude_target_feedback,
                seed: seed::derive(seed, "train"),
            };
            let outcome = clickfeed_core::train(&ds, &cfg, stack)?;
            for e in &outcome.curve {
                println!("epoch {:>3}  loss {:.6}", e.epoch, e.mean_loss);
            }
            outcome.stack.save(&out)?;
            if let Some(path) = curve {
                write_json(&path, &outcome.curve)?;
            }
            let trained = Retriever::new(&ds, outcome.stack)?;
            let params = protocol.params()?;
            let split = test_split(&ds)?;
            let before = run_protocol(&ds, &retriever, &split, &params, seed)?;
            let after = run_protocol(&ds, &trained, &split, &params, seed)?;
            print_stage("untrained", &before.feedback);
            print_stage("trained", &after.feedback);
        }
        Command::Gradcheck { trials, tolerance, loss } => {
            let kinds = match loss {
                Some(l) => vec![l.into()],
                None => vec![LossKind::Ranking, LossKind::Contrastive],
            };
            let mut failed = false;
            for kind in kinds {
                let r = gradient_check(kind, trials, tolerance, seed)?;
                println!(
                    "{:?}: {} trials, {} entries, {} resampled, max rel err {:.3e} (tol {:.0e}) {}",
                    r.kind,
                    r.trials,
                    r.checked_entries,
                    r.resampled,
                    r.max_rel_err,
                    r.tolerance,
                    if r.passed { "PASS" } else { "FAIL" }
                );
                failed |= !r.passed;
            }
            if failed {
                bail!("gradient check failed");
            }
        }
        Command::Serve { data, ranker, bind, k, session_ttl_secs, static_dir } => {
            let (ds, retriever) = data.load(seed)?;
            let config =
                ServiceConfig { ranker: ranker.params()?, default_k: k, session_ttl: Duration::from_secs(session_ttl_secs) };
            let state = Arc::new(AppState::new(Arc::new(ds), Arc::new(retriever), config));
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(clickfeed_service::serve(bind, state, static_dir))?;
        }
    }
    Ok(())
}

fn main() {
    tracing_subscriber::fmt().with_env_filter(
        tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
    ).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

