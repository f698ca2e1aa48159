use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use marginflow::eval::{self, RetrievalMode, DEFAULT_KS};
use marginflow::io::{self, EvalSplit, SplitTag};
use marginflow::loss::{index_class_ids, LossKind};
use marginflow::margins::{self, ClassTextEmbeddings, DistanceMetric, NormMode};
use marginflow::selftest::{self, SelftestOptions};
use marginflow::trainer::{self, TrainConfig};
use marginflow::{Error, Result};

#[derive(Parser)]
#[command(
    name = "marginflow",
    version,
    about = "Adaptive-margin metric learning on precomputed features"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    Cosine,
    Euclidean,
}

#[derive(Clone, Copy, ValueEnum)]
enum NormArg {
    Analytic,
    Minmax,
}

#[derive(Subcommand)]
enum Command {
    /// Build the class distance matrix from class text embeddings (EMB1).
    MarginsBuild {
        #[arg(long)]
        class_text: PathBuf,
        /// One class id per line; defaults to `<class-text>.ids` if present,
        /// otherwise the row indices.
        #[arg(long)]
        class_ids: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "cosine")]
        metric: MetricArg,
        #[arg(long, value_enum, default_value = "analytic")]
        norm: NormArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the embedding head and proxies; writes a CKP1 checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        /// MGN1 margin matrix; required for the adaptive_margin loss.
        #[arg(long)]
        margins: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Embed features with a trained head; writes EMB1.
    Embed {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recall@K of query against gallery.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        query_features: PathBuf,
        #[arg(long)]
        query_labels: PathBuf,
        #[arg(long)]
        gallery_features: PathBuf,
        #[arg(long)]
        gallery_labels: PathBuf,
        /// Rank by Hamming distance between sign bits.
        #[arg(long)]
        binary: bool,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_KS)]
        ks: Vec<usize>,
    },
    /// Run the built-in gradient, identity, monotonicity, oracle and format checks.
    Selftest {
        /// Perturb the analytic loss gradients (negative control).
        #[arg(long)]
        inject_fault: bool,
    },
}

fn margins_build(
    class_text: &Path,
    class_ids: Option<&Path>,
    metric: MetricArg,
    norm: NormArg,
    out: &Path,
) -> Result<()> {
    let emb = io::load_matrix(class_text)?;
    let ids = match class_ids {
        Some(p) => io::load_class_ids(p)?,
        None => {
            let mut sidecar = class_text.as_os_str().to_owned();
            sidecar.push(".ids");
            let sidecar = PathBuf::from(sidecar);
            if sidecar.exists() {
                io::load_class_ids(&sidecar)?
            } else {
                index_class_ids(emb.rows())
            }
        }
    };
    let metric = match metric {
        MetricArg::Cosine => DistanceMetric::Cosine,
        MetricArg::Euclidean => DistanceMetric::Euclidean,
    };
    let norm = match norm {
        NormArg::Analytic => NormMode::Analytic,
        NormArg::Minmax => NormMode::MinMax,
    };
    let cte = ClassTextEmbeddings::new(emb, ids)?;
    let m = margins::build_margin_matrix(&cte, metric, norm)?;
    margins::save_margin_matrix(&m, out)?;
    println!("classes={}", m.num_classes());
    match m.off_diagonal_stats() {
        Some((lo, mean, hi)) => println!("min={lo} mean={mean} max={hi}"),
        None => eprintln!("warning: a single class gives a 1x1 zero margin matrix"),
    }
    Ok(())
}

fn train(
    config: &Path,
    features: &Path,
    labels: &Path,
    margins: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let cfg = TrainConfig::load(config)?;
    cfg.validate()?;
    let bundle = io::load_bundle(features, labels, SplitTag::Train)?;
    for w in io::validate_bundle(&bundle, cfg.sampler.k)? {
        eprintln!("warning: {w}");
    }
    let margins = match (cfg.loss.kind, margins) {
        (LossKind::AdaptiveMargin, None) => {
            return Err(Error::Config(
                "loss = adaptive_margin needs a margin matrix; pass --margins <MGN1 file>".into(),
            ))
        }
        (LossKind::AdaptiveMargin, Some(p)) => Some(margins::load_margin_matrix(p)?),
        (_, Some(_)) => {
            eprintln!("warning: --margins is ignored for loss = {}", cfg.loss.kind);
            None
        }
        (_, None) => None,
    };
    let ckpt = trainer::train_with_progress(&bundle, margins.as_ref(), &cfg, |r| {
        println!("iter={} lr={} loss={}", r.iteration, r.lr, r.loss);
    })?;
    trainer::save_checkpoint(&ckpt, out)
}

fn embed(ckpt: &Path, features: &Path, out: &Path) -> Result<()> {
    let ckpt = trainer::load_checkpoint(ckpt)?;
    let feats = io::load_matrix(features)?;
    let emb = ckpt.head.forward(&feats)?;
    io::save_matrix(&emb, out)?;
    println!("rows={} dim={}", emb.rows(), emb.cols());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn evaluate(
    ckpt: &Path,
    qf: &Path,
    ql: &Path,
    gf: &Path,
    gl: &Path,
    binary: bool,
    mut ks: Vec<usize>,
) -> Result<()> {
    ks.sort_unstable();
    ks.dedup();
    let ckpt = trainer::load_checkpoint(ckpt)?;
    let split = EvalSplit::new(
        io::load_bundle(qf, ql, SplitTag::Query)?,
        io::load_bundle(gf, gl, SplitTag::Gallery)?,
    )?;
    let q = eval::embed_dataset(&ckpt, &split.query)?;
    let g = eval::embed_dataset(&ckpt, &split.gallery)?;
    let mode = if binary {
        RetrievalMode::Binary
    } else {
        RetrievalMode::Float
    };
    let report = eval::recall_at_k(
        &q,
        &split.query.labels,
        &g,
        &split.gallery.labels,
        &ks,
        mode,
    )?;
    print!("{report}");
    println!("mode={mode}");
    for line in report.machine_lines() {
        println!("{line}");
    }
    Ok(())
}

fn run_selftest(inject_fault: bool) -> ExitCode {
    let results = selftest::run(SelftestOptions { inject_fault });
    for r in &results {
        println!("{r}");
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    println!("{} checks, {failed} failed", results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

fn configure_threads() {
    let Ok(v) = std::env::var("MF_THREADS") else {
        return;
    };
    match v.trim().parse::<usize>() {
        Ok(n) if n > 0 => {
            if let Err(e) = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
            {
                eprintln!("warning: could not size the thread pool: {e}");
            }
        }
        _ => eprintln!("warning: ignoring MF_THREADS={v:?}; expected a positive integer"),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    configure_threads();
    let result = match cli.command {
        Command::MarginsBuild {
            class_text,
            class_ids,
            metric,
            norm,
            out,
        } => margins_build(&class_text, class_ids.as_deref(), metric, norm, &out),
        Command::Train {
            config,
            features,
            labels,
            margins,
            out,
        } => train(&config, &features, &labels, margins.as_deref(), &out),
        Command::Embed {
            ckpt,
            features,
            out,
        } => embed(&ckpt, &features, &out),
        Command::Eval {
            ckpt,
            query_features,
            query_labels,
            gallery_features,
            gallery_labels,
            binary,
            ks,
        } => evaluate(
            &ckpt,
            &query_features,
            &query_labels,
            &gallery_features,
            &gallery_labels,
            binary,
            ks,
        ),
        Command::Selftest { inject_fault } => return run_selftest(inject_fault),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
