//! Command-line interface.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use cpcl_core::clustering::{cluster_set, clustering_distance, ClusterBackend, PseudoLabeling};
use cpcl_core::corpus::{synth_corpus, Corpus, EmbeddingSet, SynthSpec};
use cpcl_core::metrics;
use cpcl_core::oplm;
use cpcl_core::pmm::init_memory;
use cpcl_core::trainer::{encode_with, train_epoch, EpochReport, ProjectionHead, TrainConfig, TrainState};
use serde::Serialize;

use crate::checkpoint;
use crate::format;
use crate::probe::{LossKind, ProbeBatch};

pub const EPOCHS_FILE: &str = "epochs.jsonl";
pub const OUTLIERS_FILE: &str = "outliers.tsv";
pub const CHECKPOINT_DIR: &str = "checkpoints";
const OUTLIER_HEADER: &str = "epoch\toutliers_image_before\toutliers_text_before\toutliers_image_after\toutliers_text_after";

#[derive(Debug, Parser)]
#[command(name = "cpcl", version, about = "Prototype-based cross-modal alignment on embedding corpora")]
pub struct Cli {
    /// Overrides the seed of the config (or of `synth`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// JSON config: a `SynthSpec` for `synth`, a `TrainConfig` otherwise.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Directory for output files.
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus directory.
    Synth(SynthArgs),
    /// Cluster both modalities and print a labeling report.
    Cluster(ClusterArgs),
    /// Cluster, mine outlier labels and print the mining report.
    Mine(MineArgs),
    /// Train projection heads.
    Train(TrainArgs),
    /// Score text-to-image (or image-to-text) retrieval.
    Eval(EvalArgs),
    /// Evaluate a loss on a JSON batch file.
    LossProbe(ProbeArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub identities: Option<usize>,
    #[arg(long)]
    pub images_per_id: Option<usize>,
    #[arg(long)]
    pub texts_per_image: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    /// Per-component instance noise.
    #[arg(long)]
    pub noise: Option<f64>,
    /// Per-component modality offset scale.
    #[arg(long)]
    pub gap: Option<f64>,
    /// Fraction of identities drawn with inflated noise.
    #[arg(long)]
    pub outlier_fraction: Option<f64>,
}

#[derive(Debug, Args)]
pub struct CorpusArgs {
    /// Corpus directory (images.emb, texts.emb, pairs.json[, truth.json]).
    #[arg(long)]
    pub corpus: PathBuf,
    /// Encode through the heads of this checkpoint first.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ClusterArgs {
    #[command(flatten)]
    pub input: CorpusArgs,
    /// Write the clustering distance matrices as TSV into the output directory.
    #[arg(long)]
    pub dump_distances: bool,
    /// Write the initial prototype matrices into the output directory.
    #[arg(long)]
    pub dump_memory: bool,
}

#[derive(Debug, Args)]
pub struct MineArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Convert a training `epochs.jsonl` into an outlier-count TSV instead.
    #[arg(long, conflicts_with = "corpus")]
    pub series: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Corpus scored after every epoch; defaults to the training corpus when
    /// it carries ground truth.
    #[arg(long)]
    pub eval_corpus: Option<PathBuf>,
    /// Skip per-epoch evaluation.
    #[arg(long)]
    pub no_eval: bool,
    /// Continue from a checkpoint directory (or its state.bin).
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Overrides the configured number of epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Direction {
    T2i,
    I2t,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub input: CorpusArgs,
    #[arg(long, value_enum, default_value_t = Direction::T2i)]
    pub direction: Direction,
    /// Fail on queries without any relevant gallery item.
    #[arg(long)]
    pub strict: bool,
    /// Write per-query average precision as TSV.
    #[arg(long)]
    pub per_query: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    /// JSON batch file.
    #[arg(long)]
    pub batch: PathBuf,
    #[arg(long, value_enum, default_value_t = LossKind::Overall)]
    pub loss: LossKind,
}

fn print_json<T: Serialize>(out: &mut dyn Write, value: &T) -> anyhow::Result<()> {
    serde_json::to_writer_pretty(&mut *out, value)?;
    writeln!(out)?;
    Ok(())
}

fn read_json_file<T: for<'de> serde::Deserialize<'de>>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn out_dir(cli: &Cli) -> anyhow::Result<&Path> {
    cli.out_dir.as_deref().context("--out-dir is required for this command")
}

fn train_config(cli: &Cli) -> anyhow::Result<TrainConfig> {
    let mut cfg: TrainConfig = match &cli.config {
        Some(p) => read_json_file(p)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn identity_heads(dim: usize) -> (ProjectionHead, ProjectionHead) {
    (ProjectionHead::identity(dim), ProjectionHead::identity(dim))
}

/// Loads a corpus and encodes it through checkpoint heads if given.
fn features(args_corpus: &Path, checkpoint: Option<&Path>) -> anyhow::Result<(Corpus, EmbeddingSet, EmbeddingSet)> {
    let corpus = format::load_corpus(args_corpus)?;
    let (ih, th) = match checkpoint {
        Some(p) => {
            let (state, _) = checkpoint::load_checkpoint(p)?;
            (state.image_head, state.text_head)
        }
        None => identity_heads(corpus.dim()),
    };
    let images = encode_with((&ih, &th), &corpus.images)?;
    let texts = encode_with((&ih, &th), &corpus.texts)?;
    Ok((corpus, images, texts))
}

#[derive(Debug, Serialize)]
struct ModalityReport {
    n_clusters: usize,
    outliers: usize,
    /// `size_histogram[s]` = number of clusters with `s` members.
    size_histogram: Vec<usize>,
}

impl ModalityReport {
    fn of(labels: &PseudoLabeling) -> Self {
        let sizes = labels.cluster_sizes();
        let mut hist = vec![0; sizes.iter().max().map_or(0, |m| m + 1)];
        for s in sizes {
            hist[s] += 1;
        }
        ModalityReport { n_clusters: labels.n_clusters(), outliers: labels.n_outliers(), size_histogram: hist }
    }
}

#[derive(Debug, Serialize)]
struct ClusterReport {
    image: ModalityReport,
    text: ModalityReport,
}

#[derive(Debug, Serialize)]
struct LabelsFile<'a> {
    image: &'a [Option<usize>],
    text: &'a [Option<usize>],
}

fn cluster_both(cfg: &TrainConfig, images: &EmbeddingSet, texts: &EmbeddingSet) -> anyhow::Result<(PseudoLabeling, PseudoLabeling)> {
    let lv = cluster_set(images, &cfg.clustering.image, cfg.seed)?;
    let lt = cluster_set(texts, &cfg.clustering.text, cfg.seed ^ 1)?;
    Ok((lv, lt))
}

fn write_distances(path: &Path, set: &EmbeddingSet, backend: &ClusterBackend) -> anyhow::Result<()> {
    let dist = match backend {
        ClusterBackend::Dbscan { metric, .. } => clustering_distance(set, metric)?,
        ClusterBackend::Kmeans { .. } => cpcl_core::affinity::cosine_distance_matrix(set),
    };
    let mut w = std::io::BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    for i in 0..dist.n() {
        let row: Vec<String> = dist.row(i).iter().map(|d| d.to_string()).collect();
        writeln!(w, "{}", row.join("\t"))?;
    }
    w.flush()?;
    Ok(())
}

fn run_cluster(cli: &Cli, args: &ClusterArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let cfg = train_config(cli)?;
    let (_, images, texts) = features(&args.input.corpus, args.input.checkpoint.as_deref())?;
    let (lv, lt) = cluster_both(&cfg, &images, &texts)?;
    if let Some(dir) = &cli.out_dir {
        fs::create_dir_all(dir)?;
        let labels = LabelsFile { image: lv.labels(), text: lt.labels() };
        fs::write(dir.join("labels.json"), serde_json::to_string_pretty(&labels)? + "\n")?;
    }
    if args.dump_distances {
        let dir = out_dir(cli)?;
        write_distances(&dir.join("image_distances.tsv"), &images, &cfg.clustering.image)?;
        write_distances(&dir.join("text_distances.tsv"), &texts, &cfg.clustering.text)?;
    }
    if args.dump_memory {
        let dir = out_dir(cli)?;
        for (set, labels, name) in [(&images, &lv, "image_memory.emb"), (&texts, &lt, "text_memory.emb")] {
            if labels.n_clusters() == 0 {
                log::warn!("{name}: no clusters, nothing to dump");
                continue;
            }
            let mem = init_memory(set, labels, &cfg.memory, cfg.temperature, cfg.seed)?;
            format::save_matrix(mem.prototypes(), dir.join(name))?;
        }
    }
    print_json(out, &ClusterReport { image: ModalityReport::of(&lv), text: ModalityReport::of(&lt) })
}

/// Outlier-count TSV from epoch reports.
pub fn outlier_series(reports: &[EpochReport]) -> String {
    let mut s = String::from(OUTLIER_HEADER);
    s.push('\n');
    for r in reports {
        s.push_str(&outlier_row(r));
    }
    s
}

fn outlier_row(r: &EpochReport) -> String {
    format!(
        "{}\t{}\t{}\t{}\t{}\n",
        r.epoch, r.outliers_image_before, r.outliers_text_before, r.outliers_image_after, r.outliers_text_after
    )
}

pub fn read_epoch_reports(path: &Path) -> anyhow::Result<Vec<EpochReport>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut reports = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        reports.push(serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), n + 1))?);
    }
    Ok(reports)
}

fn run_mine(cli: &Cli, args: &MineArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    if let Some(series) = &args.series {
        let tsv = outlier_series(&read_epoch_reports(series)?);
        match &cli.out_dir {
            Some(dir) => {
                fs::create_dir_all(dir)?;
                fs::write(dir.join(OUTLIERS_FILE), tsv)?;
            }
            None => out.write_all(tsv.as_bytes())?,
        }
        return Ok(());
    }
    let input = args.corpus.as_deref().context("mine needs --corpus or --series")?;
    let ckpt = args.checkpoint.as_deref();
    let cfg = train_config(cli)?;
    let (corpus, images, texts) = features(input, ckpt)?;
    let (mut lv, mut lt) = cluster_both(&cfg, &images, &texts)?;
    let report = oplm::run_refined_stage(&images, &texts, &corpus.pairs, &mut lv, &mut lt, &cfg.oplm)?;
    if let Some(dir) = &cli.out_dir {
        fs::create_dir_all(dir)?;
        let labels = LabelsFile { image: lv.labels(), text: lt.labels() };
        fs::write(dir.join("labels.json"), serde_json::to_string_pretty(&labels)? + "\n")?;
    }
    print_json(out, &report)
}

fn checkpoint_dir(out: &Path, epoch: usize) -> PathBuf {
    out.join(CHECKPOINT_DIR).join(format!("epoch-{epoch:04}"))
}

fn run_train(cli: &Cli, args: &TrainArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let dir = out_dir(cli)?;
    let corpus = format::load_corpus(&args.corpus)?;
    let (mut state, mut cfg) = match &args.resume {
        Some(path) => {
            let (state, saved) = checkpoint::load_checkpoint(path)?;
            if cli.config.is_some() || cli.seed.is_some() {
                let requested = train_config(cli)?;
                if requested != saved {
                    log::warn!("--config/--seed differ from the checkpoint's config; resuming with the checkpoint's");
                }
            }
            (state, saved)
        }
        None => {
            let cfg = train_config(cli)?;
            (TrainState::new(corpus.dim(), &cfg), cfg)
        }
    };
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    cfg.validate()?;
    if state.image_head.input_dim() != corpus.dim() {
        bail!("checkpoint heads expect dim {}, corpus has {}", state.image_head.input_dim(), corpus.dim());
    }
    let eval_corpus = match &args.eval_corpus {
        Some(p) => Some(format::load_corpus(p)?),
        None if !args.no_eval && corpus.ground_truth.is_some() => Some(corpus.clone()),
        None => None,
    };

    fs::create_dir_all(dir)?;
    let fresh = args.resume.is_none();
    let open = |name: &str| -> anyhow::Result<File> {
        let path = dir.join(name);
        let mut opts = OpenOptions::new();
        opts.create(true);
        if fresh { opts.write(true).truncate(true) } else { opts.append(true) };
        opts.open(&path).with_context(|| format!("opening {}", path.display()))
    };
    let mut epochs_file = open(EPOCHS_FILE)?;
    let mut outliers_file = open(OUTLIERS_FILE)?;
    if fresh || outliers_file.metadata()?.len() == 0 {
        writeln!(outliers_file, "{OUTLIER_HEADER}")?;
    }

    while state.epoch < cfg.epochs {
        let report = train_epoch(&mut state, &corpus, &cfg, eval_corpus.as_ref())?;
        let line = serde_json::to_string(&report)?;
        writeln!(epochs_file, "{line}")?;
        outliers_file.write_all(outlier_row(&report).as_bytes())?;
        checkpoint::save_checkpoint(checkpoint_dir(dir, report.epoch), &state, &cfg)?;
        log::info!(
            "epoch {} lr {:.2e} clusters {}/{} outliers {}/{} R@1 {}",
            report.epoch,
            report.lr,
            report.n_clusters_image,
            report.n_clusters_text,
            report.outliers_image_after,
            report.outliers_text_after,
            report.metrics.map_or("-".into(), |m| format!("{:.3}", m.r1)),
        );
        writeln!(out, "{line}")?;
    }
    Ok(())
}

fn run_eval(args: &EvalArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let (corpus, images, texts) = features(&args.input.corpus, args.input.checkpoint.as_deref())?;
    let truth = corpus.ground_truth.as_ref();
    let result = match args.direction {
        Direction::T2i => metrics::rank_gallery(&texts, &images, truth)?,
        Direction::I2t => metrics::rank_gallery(&images, &texts, truth)?,
    };
    let report = metrics::report(&result, args.strict)?;
    if let Some(path) = &args.per_query {
        let mut w = std::io::BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
        writeln!(w, "query\tap")?;
        for q in 0..result.n_queries() {
            match metrics::average_precision(&result, q) {
                Some(ap) => writeln!(w, "{q}\t{ap}")?,
                None => writeln!(w, "{q}\tNA")?,
            }
        }
        w.flush()?;
    }
    print_json(out, &report)
}

fn run_synth(cli: &Cli, args: &SynthArgs) -> anyhow::Result<()> {
    let dir = out_dir(cli)?;
    let mut spec: SynthSpec = match &cli.config {
        Some(p) => read_json_file(p)?,
        None => SynthSpec::default(),
    };
    let overrides = [
        (&mut spec.n_identities, args.identities),
        (&mut spec.images_per_id, args.images_per_id),
        (&mut spec.texts_per_image, args.texts_per_image),
        (&mut spec.dim, args.dim),
    ];
    for (field, value) in overrides {
        if let Some(v) = value {
            *field = v;
        }
    }
    if let Some(v) = args.noise {
        spec.intra_id_noise = v;
    }
    if let Some(v) = args.gap {
        spec.modality_offset_scale = v;
    }
    if let Some(v) = args.outlier_fraction {
        spec.outlier_fraction = v;
    }
    if let Some(s) = cli.seed {
        spec.seed = s;
    }
    let corpus = synth_corpus(&spec)?;
    format::save_corpus(&corpus, dir)?;
    log::info!(
        "wrote {} images, {} texts ({} pairs) to {}",
        corpus.images.count(),
        corpus.texts.count(),
        corpus.pairs.n_pairs(),
        dir.display()
    );
    Ok(())
}

/// Runs a parsed command line, writing reports to `out`.
pub fn run(cli: &Cli, out: &mut dyn Write) -> anyhow::Result<()> {
    match &cli.command {
        Command::Synth(a) => run_synth(cli, a),
        Command::Cluster(a) => run_cluster(cli, a, out),
        Command::Mine(a) => run_mine(cli, a, out),
        Command::Train(a) => run_train(cli, a, out),
        Command::Eval(a) => run_eval(a, out),
        Command::LossProbe(a) => print_json(out, &ProbeBatch::load(&a.batch)?.probe(a.loss)?),
    }
}
