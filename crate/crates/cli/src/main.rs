use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use awe_core::checkpoint::Checkpoint;
use awe_core::corpus::{
    generate_synthetic_corpus, load_alignments, load_pairs, mine_pairs, write_pairs, SegmentStore,
};
use awe_core::eval::{embed_segments, format_ap_report, format_pr_curve, samediff_ap, write_text};
use awe_core::expt::{run_experiment, ExperimentPlan};
use awe_core::feats::{featurize_dir, read_feature_archive, write_feature_archive};
use awe_core::qbe::{
    build_index, format_qbe_report, group_queries, run_qbe, GroundTruth, InstanceAggregation,
    SegmentIndex, WindowConfig,
};
use awe_core::train::{format_epoch_log, train_model, TrainingData};
use awe_core::{EncoderConfig, MfccConfig, SyntheticFamilySpec, TrainConfig};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

#[derive(Parser)]
#[command(name = "awe", version, about = "Contrastive acoustic word embeddings")]
struct Cli {
    /// More log output (repeat for debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// MFCCs for every WAV file in a directory.
    Featurize(FeaturizeArgs),
    /// Write a synthetic multi-family corpus.
    Synth(SynthArgs),
    /// Sample same-word positive pairs from an alignment file.
    MinePairs(MinePairsArgs),
    /// Train an encoder on one or more pair files.
    Train(TrainArgs),
    /// Same-different average precision of a model.
    EvalSamediff(EvalArgs),
    /// Embed every window of a search collection.
    QbeIndex(QbeIndexArgs),
    /// Query-by-example search and P@10.
    Qbe(QbeArgs),
    /// Run an experiment plan.
    Experiment(ExperimentArgs),
}

#[derive(Args)]
struct FeaturizeArgs {
    #[arg(long)]
    wav_dir: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    no_cmvn: bool,
    #[arg(long, default_value_t = 25.0)]
    window_ms: f64,
    #[arg(long, default_value_t = 10.0)]
    shift_ms: f64,
    #[arg(long, default_value_t = 26)]
    n_mels: usize,
    #[arg(long, default_value_t = 13)]
    n_ceps: usize,
    #[arg(long, default_value_t = 0.97)]
    preemphasis: f64,
}

#[derive(Args)]
struct SynthArgs {
    /// TOML file with `SyntheticFamilySpec` fields; defaults otherwise.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct MinePairsArgs {
    #[arg(long)]
    align: PathBuf,
    /// Pairs per language (or in total with --pooled).
    #[arg(long)]
    n: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Sample from all languages together instead of per language.
    #[arg(long)]
    pooled: bool,
    /// Keep only these languages.
    #[arg(long, value_delimiter = ',')]
    languages: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

/// `train.toml`: optional `[encoder]` and `[train]` tables.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainFile {
    encoder: EncoderConfig,
    train: TrainConfig,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    feats: PathBuf,
    /// Comma-separated pair files, one per language.
    #[arg(long, value_delimiter = ',', required = true)]
    pairs: Vec<PathBuf>,
    #[arg(long)]
    dev_feats: PathBuf,
    #[arg(long)]
    dev_align: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch CSV log; defaults to `<out>.log.csv`.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    feats: PathBuf,
    #[arg(long)]
    align: PathBuf,
    #[arg(long)]
    report: PathBuf,
    #[arg(long)]
    pr_curve: Option<PathBuf>,
}

#[derive(Args)]
struct QbeIndexArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    feats: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = WindowConfig::default().min_len)]
    min_len: u32,
    #[arg(long, default_value_t = WindowConfig::default().max_len)]
    max_len: u32,
    #[arg(long, default_value_t = WindowConfig::default().len_step)]
    len_step: u32,
    #[arg(long, default_value_t = WindowConfig::default().stride)]
    stride: u32,
}

#[derive(Args)]
struct QbeArgs {
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Alignment rows of the spoken query instances.
    #[arg(long)]
    queries: PathBuf,
    /// Archive holding the query utterances.
    #[arg(long)]
    query_feats: PathBuf,
    /// TSV `utterance_id<TAB>word_type` rows.
    #[arg(long)]
    truth: PathBuf,
    #[arg(long)]
    report: PathBuf,
    /// Rank once by the per-utterance minimum over instances.
    #[arg(long)]
    pool_min: bool,
}

#[derive(Args)]
struct ExperimentArgs {
    /// Plan file; the built-in default plan otherwise.
    #[arg(long)]
    plan: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Override the plan's seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Print the resolved plan and exit.
    #[arg(long)]
    print_plan: bool,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match cli.cmd {
        Cmd::Featurize(a) => featurize(a),
        Cmd::Synth(a) => synth(a),
        Cmd::MinePairs(a) => mine(a),
        Cmd::Train(a) => train(a),
        Cmd::EvalSamediff(a) => eval(a),
        Cmd::QbeIndex(a) => qbe_index(a),
        Cmd::Qbe(a) => qbe(a),
        Cmd::Experiment(a) => experiment(a),
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn featurize(a: FeaturizeArgs) -> Result<()> {
    let cfg = MfccConfig {
        window_ms: a.window_ms,
        shift_ms: a.shift_ms,
        n_mels: a.n_mels,
        n_ceps: a.n_ceps,
        preemphasis: a.preemphasis,
        cmvn: !a.no_cmvn,
        ..MfccConfig::default()
    };
    let feats = featurize_dir(&a.wav_dir, &cfg)?;
    if feats.is_empty() {
        bail!("no .wav files in {}", a.wav_dir.display());
    }
    write_feature_archive(&feats, &a.out)?;
    println!("{} utterances -> {}", feats.len(), a.out.display());
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut spec = match &a.spec {
        Some(p) => SyntheticFamilySpec::from_toml(&read_text(p)?)?,
        None => SyntheticFamilySpec::default(),
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    let corpus = generate_synthetic_corpus(&spec)?;
    corpus.write_to_dir(&a.out_dir)?;
    println!(
        "{} languages, {} utterances, {} segments -> {}",
        corpus.languages.len(),
        corpus.features.len(),
        corpus.segments.len(),
        a.out_dir.display()
    );
    Ok(())
}

fn mine(a: MinePairsArgs) -> Result<()> {
    let mut segs = load_alignments(&a.align)?;
    if !a.languages.is_empty() {
        segs.retain(|s| a.languages.contains(&s.language_id));
    }
    let pairs = mine_pairs(&segs, a.n, !a.pooled, a.seed)?;
    write_pairs(&pairs, &a.out)?;
    println!("{} pairs -> {}", pairs.len(), a.out.display());
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let file: TrainFile = match &a.config {
        Some(p) => toml::from_str(&read_text(p)?).with_context(|| format!("parsing {}", p.display()))?,
        None => TrainFile::default(),
    };
    let mut cfg = file.train;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let feats = read_feature_archive(&a.feats)?;
    let per_language = a
        .pairs
        .iter()
        .map(load_pairs)
        .collect::<awe_core::Result<Vec<_>>>()?;
    let data = TrainingData::from_pairs(&feats, &per_language)?;
    let dev_feats = read_feature_archive(&a.dev_feats)?;
    let dev = SegmentStore::build(&dev_feats, &load_alignments(&a.dev_align)?)?;
    let mut enc = file.encoder;
    enc.input_dim = data.store.dim;
    let out = train_model(&data, &dev, &enc, &cfg)?;
    out.checkpoint.save(&a.out)?;
    let log_path = a
        .log
        .unwrap_or_else(|| PathBuf::from(format!("{}.log.csv", a.out.display())));
    write_text(&log_path, &format_epoch_log(&out.log))?;
    println!(
        "best epoch {} (dev AP {:.4}) -> {}",
        out.best_epoch,
        out.checkpoint.meta.dev_score,
        a.out.display()
    );
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.model)?;
    let feats = read_feature_archive(&a.feats)?;
    let segs = load_alignments(&a.align)?;
    let langs: Vec<&str> = segs.iter().map(|s| s.language_id.as_str()).collect();
    if let Some(l) = langs
        .iter()
        .find(|l| ck.meta.training_languages.iter().any(|t| t == *l))
    {
        log::warn!("evaluation language {l} was used to train this model");
    }
    let emb = embed_segments(&ck, &feats, &segs)?;
    let r = samediff_ap(&emb)?;
    write_text(&a.report, &format_ap_report(emb.len(), &r))?;
    if let Some(p) = &a.pr_curve {
        write_text(p, &format_pr_curve(&r))?;
    }
    println!("AP {:.4} over {} segments", r.ap, emb.len());
    Ok(())
}

fn qbe_index(a: QbeIndexArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.model)?;
    let feats = read_feature_archive(&a.feats)?;
    let wcfg = WindowConfig {
        min_len: a.min_len,
        max_len: a.max_len,
        len_step: a.len_step,
        stride: a.stride,
    };
    let index = build_index(&ck, &feats, &wcfg)?;
    index.save(&a.out)?;
    println!(
        "{} utterances, {} windows -> {}",
        index.utterances.len(),
        index.n_windows(),
        a.out.display()
    );
    Ok(())
}

fn qbe(a: QbeArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.model)?;
    let index = SegmentIndex::load(&a.index)?;
    if index.embed_dim != ck.config.embed_dim {
        bail!(
            "index was built with {}-dimensional embeddings, model produces {}",
            index.embed_dim,
            ck.config.embed_dim
        );
    }
    let query_feats = read_feature_archive(&a.query_feats)?;
    let truth = GroundTruth::load(&a.truth)?;
    let queries = group_queries(&load_alignments(&a.queries)?);
    let agg = if a.pool_min {
        InstanceAggregation::PoolMin
    } else {
        InstanceAggregation::Average
    };
    let results = queries
        .iter()
        .map(|q| run_qbe(&ck, q, &query_feats, &index, &truth, agg))
        .collect::<awe_core::Result<Vec<_>>>()?;
    write_text(&a.report, &format_qbe_report(&results))?;
    let mean = results.iter().map(|r| r.p_at_10).sum::<f64>() / results.len().max(1) as f64;
    println!("{} queries, mean P@10 {:.4}", results.len(), mean);
    Ok(())
}

fn experiment(a: ExperimentArgs) -> Result<()> {
    let mut plan = match &a.plan {
        Some(p) => ExperimentPlan::load(p)?,
        None => ExperimentPlan::default(),
    };
    if !a.seeds.is_empty() {
        plan.seeds = a.seeds;
    }
    if a.print_plan {
        print!("{}", plan.to_toml()?);
        return Ok(());
    }
    let table = run_experiment(&plan, &a.out)?;
    println!("{} result rows -> {}", table.rows.len(), a.out.display());
    Ok(())
}
