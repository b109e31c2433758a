use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::Serialize;
use serde_json::json;

use semrank_core::ablate::run_ablation;
use semrank_core::corpus::{
    co_engagement_pairs, filter_min_count, leave_one_out_split, load_interactions, load_jsonl,
    load_metadata, write_jsonl, write_metadata, CoEngagementOptions,
};
use semrank_core::embed::refine_embeddings;
use semrank_core::evalkit::{build_episodes, evaluate_rerank};
use semrank_core::parse::parse_check_line;
use semrank_core::policy::mock_outputs;
use semrank_core::promptgen::{
    generate_traces, ChatCompletion, HttpChatClient, MockTeacher, PromptContext, TraceOutcome,
};
use semrank_core::reward::score_batch;
use semrank_core::rqcodec::train::train;
use semrank_core::sid::build_registry;
use semrank_core::synth::{gaussian_mixture, mixture_co_engagement, synthetic_corpus};
use semrank_core::{
    AblationConfig, Checkpoint, CoEngagementSet, EmbeddingStore, EpisodeOutput, EvalSplit,
    MarkovRetriever, RerankEpisode, ScoringInput, SidRegistry, SplitSet,
};

use crate::config::RunConfig;

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn ensure_parent(path: &Path) -> Result<PathBuf> {
    let dir = parent_dir(path);
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn print_json(value: &impl Serialize) -> Result<()> {
    let mut out = io::stdout().lock();
    serde_json::to_writer(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn train_pairs(cfg: &RunConfig, split: &SplitSet) -> CoEngagementSet {
    co_engagement_pairs(
        &split.train_log(),
        CoEngagementOptions {
            window: cfg.ingest.co_engagement_window,
        },
    )
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Interactions JSON-lines.
    #[arg(long)]
    interactions: PathBuf,
    /// Item metadata JSON-lines; copied for the kept items.
    #[arg(long)]
    metadata: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
}

pub fn ingest(cfg: &RunConfig, a: IngestArgs) -> Result<()> {
    let log = load_interactions(&a.interactions)?;
    let filtered = filter_min_count(&log, cfg.ingest.min_count);
    if filtered.is_empty() {
        bail!(semrank_core::Error::Empty(format!(
            "no users survive min_count = {}",
            cfg.ingest.min_count
        )));
    }
    let split = leave_one_out_split(&filtered)?;
    split.write(&a.out_dir)?;
    let items = filtered.items();
    let mut meta_items = None;
    if let Some(m) = &a.metadata {
        let meta = load_metadata(m)?;
        let kept: BTreeMap<_, _> = meta.into_iter().filter(|(k, _)| items.contains(k)).collect();
        meta_items = Some(kept.len());
        write_metadata(a.out_dir.join("metadata.jsonl"), &kept)?;
    }
    cfg.snapshot(&a.out_dir, "ingest")?;
    print_json(&json!({
        "events_in": log.num_events(),
        "events_kept": filtered.num_events(),
        "users": filtered.num_users(),
        "items": items.len(),
        "metadata_items": meta_items,
    }))
}

#[derive(Debug, Args)]
pub struct RefineArgs {
    /// Embedding file (binary or JSON-lines).
    #[arg(long)]
    embeddings: PathBuf,
    /// Split directory written by `ingest`; positives come from its train part.
    #[arg(long)]
    split: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

pub fn refine_embed(cfg: &RunConfig, a: RefineArgs) -> Result<()> {
    let store = EmbeddingStore::load(&a.embeddings)?;
    let split = SplitSet::read(&a.split)?;
    let pairs = train_pairs(cfg, &split);
    let refined = refine_embeddings(&store, &pairs, &cfg.contrastive)?;
    let dir = ensure_parent(&a.out)?;
    refined.store.save(&a.out)?;
    cfg.snapshot(&dir, "refine-embed")?;
    print_json(&json!({
        "items": refined.store.len(),
        "pairs": pairs.num_pairs(),
        "epoch_losses": refined.epoch_losses,
    }))
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    embeddings: PathBuf,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
}

pub fn train_codebook(cfg: &RunConfig, a: TrainArgs) -> Result<()> {
    let store = EmbeddingStore::load(&a.embeddings)?;
    let trained = train(&store, &cfg.codebook)?;
    let dir = ensure_parent(&a.out)?;
    let ckpt = Checkpoint {
        stack: trained.stack,
        seed: cfg.codebook.seed,
        config: Some(cfg.codebook.clone()),
    };
    ckpt.save(&a.out)?;
    let history = a.out.with_extension("history.json");
    write_json(&history, &trained.history)?;
    cfg.snapshot(&dir, "train-codebook")?;
    print_json(&json!({
        "levels": ckpt.stack.num_levels(),
        "codebook_sizes": ckpt.stack.codebook_sizes(),
        "final": trained.history.last(),
    }))
}

#[derive(Debug, Args)]
pub struct TokenizeArgs {
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Registry JSON-lines.
    #[arg(long)]
    out: PathBuf,
}

pub fn tokenize(cfg: &RunConfig, a: TokenizeArgs) -> Result<()> {
    let store = EmbeddingStore::load(&a.embeddings)?;
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let registry = build_registry(
        &store,
        &ckpt.stack,
        cfg.codebook.effective_random_last(),
        cfg.codebook.seed,
    )?;
    let dir = ensure_parent(&a.out)?;
    registry.save(&a.out)?;
    cfg.snapshot(&dir, "tokenize")?;
    print_json(&registry.report()?)
}

#[derive(Debug, Args)]
pub struct UniquenessArgs {
    #[arg(long)]
    registry: PathBuf,
    /// Also write the report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn uniqueness_report(cfg: &RunConfig, a: UniquenessArgs) -> Result<()> {
    let report = SidRegistry::load(&a.registry)?.report()?;
    if let Some(out) = &a.out {
        let dir = ensure_parent(out)?;
        write_json(out, &report)?;
        cfg.snapshot(&dir, "uniqueness-report")?;
    }
    print_json(&report)
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Run on the seeded Gaussian-mixture corpus from `ablate.mixture`.
    #[arg(long, conflicts_with = "embeddings")]
    synthetic: bool,
    #[arg(long, required_unless_present = "synthetic")]
    embeddings: Option<PathBuf>,
    /// Split directory supplying co-engagement positives for contrastive rows.
    #[arg(long, requires = "embeddings")]
    split: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
}

pub fn ablate(cfg: &RunConfig, a: AblateArgs) -> Result<()> {
    let (store, pairs) = if a.synthetic {
        let mix = gaussian_mixture(&cfg.ablate.mixture)?;
        let pairs = mixture_co_engagement(&mix, cfg.ablate.pairs_per_item, cfg.ablate.mixture.seed);
        (mix.store, pairs)
    } else {
        let store = EmbeddingStore::load(a.embeddings.as_ref().expect("required by clap"))?;
        let pairs = match &a.split {
            Some(dir) => train_pairs(cfg, &SplitSet::read(dir)?),
            None => {
                log::warn!("no --split given; contrastive rows run without positives");
                CoEngagementSet::default()
            }
        };
        (store, pairs)
    };
    let ab = AblationConfig {
        train: cfg.codebook.clone(),
        contrastive: cfg.ablate.contrastive.clone(),
        rows: cfg.ablate.rows.clone(),
    };
    let report = run_ablation(&store, &pairs, &ab)?;
    std::fs::create_dir_all(&a.out_dir)?;
    let table = report.to_table();
    std::fs::write(a.out_dir.join("ablation.txt"), &table)?;
    std::fs::write(a.out_dir.join("ablation.csv"), report.to_csv())?;
    write_json(&a.out_dir.join("ablation.json"), &report)?;
    cfg.snapshot(&a.out_dir, "ablate")?;
    print!("{table}");
    Ok(())
}

#[derive(Debug, Args)]
pub struct EpisodesArgs {
    #[arg(long)]
    split: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    which: WhichSplit,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum WhichSplit {
    Valid,
    Test,
}

pub fn episodes(cfg: &RunConfig, a: EpisodesArgs) -> Result<()> {
    let split = SplitSet::read(&a.split)?;
    let retriever = MarkovRetriever::fit(&split.train_log(), cfg.eval.smoothing)?;
    let which = match a.which {
        WhichSplit::Valid => EvalSplit::Valid,
        WhichSplit::Test => EvalSplit::Test,
    };
    let built = build_episodes(&split, &retriever, cfg.eval.n_candidates, which)?;
    let dir = ensure_parent(&a.out)?;
    RerankEpisode::save_all(&a.out, &built.episodes)?;
    cfg.snapshot(&dir, "episodes")?;
    print_json(&json!({
        "episodes": built.episodes.len(),
        "skipped": built.skipped,
    }))
}

#[derive(Debug, Args)]
pub struct GenTracesArgs {
    #[arg(long)]
    episodes: PathBuf,
    #[arg(long)]
    registry: PathBuf,
    #[arg(long)]
    metadata: PathBuf,
    /// ChatSample JSON-lines; episodes without a sample go to
    /// `<out>.rejected.jsonl`.
    #[arg(long)]
    out: PathBuf,
}

pub fn gen_traces(cfg: &RunConfig, a: GenTracesArgs) -> Result<()> {
    let episodes = RerankEpisode::load_all(&a.episodes)?;
    let registry = SidRegistry::load(&a.registry)?;
    let meta = load_metadata(&a.metadata)?;
    let ctx = PromptContext::new(&registry, &meta);
    let client: Box<dyn ChatCompletion> = if cfg.teacher.mock {
        Box::new(MockTeacher::new(cfg.teacher.seed))
    } else {
        Box::new(HttpChatClient::new(cfg.teacher.client.clone())?)
    };
    let mut concurrency = cfg.teacher.client.max_concurrency;
    if cfg.workers > 0 {
        concurrency = concurrency.min(cfg.workers);
    }
    let outcomes = generate_traces(
        client.as_ref(),
        &episodes,
        &ctx,
        &cfg.prompt,
        cfg.teacher.strategy,
        cfg.teacher.max_attempts,
        concurrency,
    )?;
    let (samples, rejected): (Vec<_>, Vec<_>) = outcomes
        .into_iter()
        .partition(|o| matches!(o, TraceOutcome::Sample(_)));
    let samples: Vec<_> = samples
        .into_iter()
        .filter_map(|o| match o {
            TraceOutcome::Sample(s) => Some(s),
            _ => None,
        })
        .collect();
    let dir = ensure_parent(&a.out)?;
    semrank_core::ChatSample::save_all(&a.out, &samples)?;
    let rejected_path = a.out.with_extension("rejected.jsonl");
    write_jsonl(&rejected_path, &rejected)?;
    cfg.snapshot(&dir, "gen-traces")?;
    let attempts: usize = samples.iter().map(|s| s.provenance.attempts).sum();
    print_json(&json!({
        "episodes": episodes.len(),
        "samples": samples.len(),
        "rejected": rejected.len(),
        "mean_attempts": if samples.is_empty() { 0.0 } else { attempts as f64 / samples.len() as f64 },
    }))
}

#[derive(Debug, Args)]
pub struct ParseCheckArgs {
    /// Input JSON-lines of {raw, n}; stdin when absent.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Output JSON-lines; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn parse_check(a: ParseCheckArgs) -> Result<()> {
    let reader: Box<dyn BufRead> = match &a.input {
        Some(p) => Box::new(BufReader::new(
            File::open(p).with_context(|| format!("opening {}", p.display()))?,
        )),
        None => Box::new(io::stdin().lock()),
    };
    let mut writer: Box<dyn Write> = match &a.out {
        Some(p) => {
            ensure_parent(p)?;
            Box::new(BufWriter::new(File::create(p)?))
        }
        None => Box::new(io::stdout().lock()),
    };
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = parse_check_line(&line).map_err(|e| match e {
            semrank_core::Error::Json(j) => semrank_core::Error::Parse {
                line: i + 1,
                message: j.to_string(),
            },
            other => other,
        })?;
        serde_json::to_writer(&mut writer, &rec)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    /// Scoring JSON-lines, one group per line.
    #[arg(long)]
    input: PathBuf,
    /// Batch score JSON.
    #[arg(long)]
    out: PathBuf,
}

pub fn score_rewards(cfg: &RunConfig, a: ScoreArgs) -> Result<()> {
    let inputs: Vec<ScoringInput> = load_jsonl(&a.input)?;
    let batch = score_batch(&inputs, &cfg.reward)?;
    let dir = ensure_parent(&a.out)?;
    write_json(&a.out, &batch)?;
    cfg.snapshot(&dir, "score-rewards")?;
    let outputs: Vec<_> = batch.groups.iter().flat_map(|g| &g.rewards).collect();
    let mean = |f: fn(&semrank_core::reward::RewardRecord) -> f64| {
        outputs.iter().map(|r| f(r)).sum::<f64>() / outputs.len().max(1) as f64
    };
    print_json(&json!({
        "groups": batch.groups.len(),
        "kept_groups": batch.kept_groups,
        "dropped_groups": batch.dropped_groups,
        "mean_ranking_reward": mean(|r| r.r_rank),
        "mean_total_reward": mean(|r| r.total),
        "objective": batch.objective,
    }))
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    episodes: PathBuf,
    /// Outputs JSON-lines of {episode_id, raw_text | ranking}.
    #[arg(long)]
    outputs: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
}

pub fn evaluate(cfg: &RunConfig, a: EvaluateArgs) -> Result<()> {
    let episodes = RerankEpisode::load_all(&a.episodes)?;
    let outputs: Vec<EpisodeOutput> = load_jsonl(&a.outputs)?;
    let report = evaluate_rerank(&episodes, &outputs, &cfg.eval.ks, &cfg.eval.method)?;
    std::fs::create_dir_all(&a.out_dir)?;
    write_json(&a.out_dir.join("report.json"), &report)?;
    std::fs::write(a.out_dir.join("report.csv"), report.to_csv())?;
    let table = report.to_table();
    std::fs::write(a.out_dir.join("report.txt"), &table)?;
    cfg.snapshot(&a.out_dir, "evaluate")?;
    print!("{table}");
    Ok(())
}

#[derive(Debug, Args)]
pub struct MockPolicyArgs {
    #[arg(long)]
    episodes: PathBuf,
    /// One output per episode, for `evaluate`.
    #[arg(long)]
    outputs: PathBuf,
    /// `reward.group_size` samples per episode, for `score-rewards`.
    #[arg(long)]
    scoring: PathBuf,
}

pub fn mock_policy(cfg: &RunConfig, a: MockPolicyArgs) -> Result<()> {
    let episodes = RerankEpisode::load_all(&a.episodes)?;
    let (outputs, scoring) = mock_outputs(&episodes, &cfg.mock_policy, cfg.reward.group_size)?;
    let dir = ensure_parent(&a.outputs)?;
    ensure_parent(&a.scoring)?;
    write_jsonl(&a.outputs, &outputs)?;
    write_jsonl(&a.scoring, &scoring)?;
    cfg.snapshot(&dir, "mock-policy")?;
    print_json(&json!({ "episodes": episodes.len() }))
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    out_dir: PathBuf,
}

pub fn synth(cfg: &RunConfig, a: SynthArgs) -> Result<()> {
    let corpus = synthetic_corpus(&cfg.synth)?;
    std::fs::create_dir_all(&a.out_dir)?;
    write_jsonl(&a.out_dir.join("interactions.jsonl"), &corpus.events)?;
    write_metadata(a.out_dir.join("metadata.jsonl"), &corpus.metadata)?;
    corpus.embeddings.save(a.out_dir.join("embeddings.bin"))?;
    cfg.snapshot(&a.out_dir, "synth")?;
    print_json(&json!({
        "events": corpus.events.len(),
        "items": corpus.metadata.len(),
        "dim": corpus.embeddings.dim(),
    }))
}
