//! Pipeline driver: task generation, toy-model training, gradient dumping,
//! influence scoring, expert/sparsity planning, pruning, evaluation, plan
//! comparison, and the reversed-allocation ablation.
//!
//! Every run is deterministic: all randomness flows from explicit seeds,
//! and identical flags plus identical inputs produce byte-identical
//! artifacts. Each artifact embeds (or carries in its JSON sidecar) the
//! effective configuration and the SHA-256 of every input that produced
//! it. Config precedence is flags, then `--config` file, then built-in
//! defaults. Errors leave as structured JSON on stderr with a nonzero
//! exit. `LAYERIF_THREADS` caps internal parallelism.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use layerif::analysis::{ablation_reversed, compare_allocations, heatmap_export};
use layerif::expert_planner::{plan_experts, ExpertPlanConfig};
use layerif::gradient_store::read_gradient_set;
use layerif::if_engine::{
    influence_matrix, Backend, DampingRule, IfBackendConfig, DEFAULT_MAX_EXACT_DIM,
};
use layerif::layer_scores::{
    aggregate, normalize_abs_minmax, smooth, LayerScoreVector, Strategy, SMOOTH_POLYORDER,
    SMOOTH_WINDOW,
};
use layerif::pruning_exec::{
    activation_weighted_mask, apply_mask, magnitude_mask_scoped, read_mask, write_mask, Criterion,
    MaskScope, PruneEvalReport,
};
use layerif::sparsity_planner::{plan_sparsity, reverse_plan, SparsityPlan, SparsityPlanConfig};
use layerif::toy_model::{
    dump_gradients, evaluate, generate_task, ModelConfig, SyntheticTask, TaskConfig,
    ToyTransformer, TrainOptions,
};

#[derive(Parser)]
#[command(name = "layerif", version, about = "Layer-wise influence scoring pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic classification task.
    GenTask(GenTaskArgs),
    /// Train the toy transformer on a task and save a checkpoint.
    TrainToy(TrainToyArgs),
    /// Dump per-sample, per-block gradients for a trained checkpoint.
    DumpGrads(DumpGradsArgs),
    /// Score layers: influence matrix plus aggregated layer scores.
    Score(ScoreArgs),
    /// Map layer scores to per-layer expert counts.
    PlanExperts(PlanExpertsArgs),
    /// Map layer scores to per-layer sparsity ratios.
    PlanSparsity(PlanSparsityArgs),
    /// Build a pruning mask for a checkpoint from a sparsity plan.
    Prune(PruneArgs),
    /// Evaluate a checkpoint, optionally under a pruning mask.
    Eval(EvalArgs),
    /// Compare two expert allocations by rank agreement.
    Compare(CompareArgs),
    /// Run the forward-vs-reversed pruning ablation.
    Ablate(AblateArgs),
}

fn main() -> ExitCode {
    init_threads();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            emit_error("usage", &e.to_string());
            return ExitCode::from(2);
        }
    };
    let outcome = match cli.command {
        Command::GenTask(a) => run_gen_task(a),
        Command::TrainToy(a) => run_train_toy(a),
        Command::DumpGrads(a) => run_dump_grads(a),
        Command::Score(a) => run_score(a),
        Command::PlanExperts(a) => run_plan_experts(a),
        Command::PlanSparsity(a) => run_plan_sparsity(a),
        Command::Prune(a) => run_prune(a),
        Command::Eval(a) => run_eval(a),
        Command::Compare(a) => run_compare(a),
        Command::Ablate(a) => run_ablate(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            emit_error("pipeline", &format!("{e:#}"));
            ExitCode::FAILURE
        }
    }
}

fn emit_error(kind: &str, message: &str) {
    eprintln!("{}", json!({ "error": { "kind": kind, "message": message } }));
}

fn init_threads() {
    if let Ok(v) = std::env::var("LAYERIF_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            if n >= 1 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Provenance and artifact plumbing
// ---------------------------------------------------------------------------

/// Embedded in every artifact: the subcommand, the effective config after
/// flag/file/default resolution, and the SHA-256 of every input.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct Provenance {
    command: String,
    config: Value,
    inputs: BTreeMap<String, String>,
}

fn provenance(command: &str, config: Value, inputs: &[&Path]) -> Result<Provenance> {
    let mut hashes = BTreeMap::new();
    for path in inputs {
        hashes.insert(path.display().to_string(), hash_input(path)?);
    }
    Ok(Provenance { command: command.into(), config, inputs: hashes })
}

/// SHA-256 of a file, or of a flat directory (file names and contents in
/// name order).
fn hash_input(path: &Path) -> Result<String> {
    let mut hasher = Sha256::new();
    if path.is_dir() {
        let mut names: Vec<PathBuf> = fs::read_dir(path)
            .with_context(|| format!("reading directory {}", path.display()))?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        names.sort();
        for name in names {
            hasher.update(name.file_name().unwrap_or_default().as_encoded_bytes());
            hasher.update(fs::read(&name).with_context(|| format!("reading {}", name.display()))?);
        }
    } else {
        hasher.update(fs::read(path).with_context(|| format!("reading {}", path.display()))?);
    }
    Ok(format!("{:x}", hasher.finalize()))
}

/// Short identifier for a plan file, derived from its content hash.
fn plan_id(path: &Path) -> Result<String> {
    Ok(format!("sha256:{}", &hash_input(path)?[..16]))
}

/// Serializes `value` with the provenance object folded in and writes it.
fn write_json_artifact<T: Serialize>(value: &T, prov: &Provenance, path: &Path) -> Result<()> {
    let mut v = serde_json::to_value(value)?;
    v.as_object_mut()
        .context("artifact must serialize to a JSON object")?
        .insert("provenance".into(), serde_json::to_value(prov)?);
    write_text(path, &serde_json::to_string_pretty(&v)?)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut owned = text.to_string();
    if !owned.ends_with('\n') {
        owned.push('\n');
    }
    fs::write(path, owned).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Loads the optional `--config` file for a subcommand.
fn file_cfg<T: DeserializeOwned + Default>(path: &Option<PathBuf>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => read_json(p),
    }
}

/// Flags beat the config file; the config file beats the default.
fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

fn config_inputs(config: &Option<PathBuf>) -> Vec<&Path> {
    config.iter().map(PathBuf::as_path).collect()
}

/// The layer-scores artifact: full score vectors plus the settings that
/// produced them and the layer sizes needed by downstream planners.
#[derive(Debug, Serialize, Deserialize)]
struct ScoresArtifact {
    raw: Vec<f64>,
    normalized: Vec<f64>,
    smoothed: Vec<f64>,
    smoothing_skipped: bool,
    strategy: Strategy,
    window: usize,
    polyorder: usize,
    source: String,
    layer_dims: Vec<usize>,
}

impl ScoresArtifact {
    fn to_scores(&self) -> LayerScoreVector {
        LayerScoreVector {
            raw: self.raw.clone(),
            strategy: self.strategy,
            normalized: Some(self.normalized.clone()),
            smoothed: Some(self.smoothed.clone()),
            smoothing_skipped: self.smoothing_skipped,
            source: self.source.clone(),
        }
    }
}

// ---------------------------------------------------------------------------
// gen-task
// ---------------------------------------------------------------------------

#[derive(Args)]
struct GenTaskArgs {
    /// Output task JSON path.
    #[arg(long)]
    out: PathBuf,
    /// Seed for task generation.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    train_size: Option<usize>,
    #[arg(long)]
    val_size: Option<usize>,
    #[arg(long)]
    test_size: Option<usize>,
    #[arg(long)]
    vocab: Option<usize>,
    #[arg(long)]
    seq_len: Option<usize>,
    #[arg(long)]
    num_classes: Option<usize>,
    /// Tokens are drawn from [0, token_range).
    #[arg(long)]
    token_range: Option<usize>,
    /// JSON file with defaults for the flags above.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default)]
struct GenTaskFileCfg {
    seed: Option<u64>,
    train_size: Option<usize>,
    val_size: Option<usize>,
    test_size: Option<usize>,
    vocab: Option<usize>,
    seq_len: Option<usize>,
    num_classes: Option<usize>,
    token_range: Option<usize>,
}

fn run_gen_task(a: GenTaskArgs) -> Result<()> {
    let f: GenTaskFileCfg = file_cfg(&a.config)?;
    let d = TaskConfig::default();
    let cfg = TaskConfig {
        seed: pick(a.seed, f.seed, d.seed),
        train_size: pick(a.train_size, f.train_size, d.train_size),
        val_size: pick(a.val_size, f.val_size, d.val_size),
        test_size: pick(a.test_size, f.test_size, d.test_size),
        vocab: pick(a.vocab, f.vocab, d.vocab),
        seq_len: pick(a.seq_len, f.seq_len, d.seq_len),
        num_classes: pick(a.num_classes, f.num_classes, d.num_classes),
        token_range: pick(a.token_range, f.token_range, d.token_range),
    };
    let task = generate_task(&cfg);
    let prov = provenance("gen-task", serde_json::to_value(&cfg)?, &config_inputs(&a.config))?;
    write_json_artifact(&task, &prov, &a.out)?;
    println!("wrote task with {} train sequences to {}", task.train.len(), a.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// train-toy
// ---------------------------------------------------------------------------

#[derive(Args)]
struct TrainToyArgs {
    /// Task JSON produced by gen-task.
    #[arg(long)]
    task: PathBuf,
    /// Output checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Weight-init seed; the shuffle seed defaults to seed + 1.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    num_blocks: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    n_heads: Option<usize>,
    #[arg(long)]
    d_ff: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    shuffle_seed: Option<u64>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default)]
struct TrainToyFileCfg {
    seed: Option<u64>,
    num_blocks: Option<usize>,
    d_model: Option<usize>,
    n_heads: Option<usize>,
    d_ff: Option<usize>,
    epochs: Option<usize>,
    lr: Option<f64>,
    batch_size: Option<usize>,
    shuffle_seed: Option<u64>,
}

fn run_train_toy(a: TrainToyArgs) -> Result<()> {
    let f: TrainToyFileCfg = file_cfg(&a.config)?;
    let task: SyntheticTask = read_json(&a.task)?;
    let dm = ModelConfig::default();
    let seed = pick(a.seed, f.seed, dm.rng_seed);
    let cfg = ModelConfig {
        num_blocks: pick(a.num_blocks, f.num_blocks, dm.num_blocks),
        d_model: pick(a.d_model, f.d_model, dm.d_model),
        n_heads: pick(a.n_heads, f.n_heads, dm.n_heads),
        d_ff: pick(a.d_ff, f.d_ff, dm.d_ff),
        vocab: task.config.vocab,
        seq_len: task.config.seq_len,
        num_classes: task.config.num_classes,
        rng_seed: seed,
    };
    let dt = TrainOptions::default();
    let opts = TrainOptions {
        epochs: pick(a.epochs, f.epochs, dt.epochs),
        lr: pick(a.lr, f.lr, dt.lr),
        batch_size: pick(a.batch_size, f.batch_size, dt.batch_size),
        shuffle_seed: pick(a.shuffle_seed, f.shuffle_seed, seed.wrapping_add(1)),
    };

    let mut model = ToyTransformer::new(&cfg)?;
    let report = layerif::toy_model::train_with(&mut model, &task, &opts)?;
    model.save(&a.out)?;

    let val = evaluate(&model, &task.val);
    let effective = json!({
        "model": cfg,
        "epochs": opts.epochs,
        "lr": opts.lr,
        "batch_size": opts.batch_size,
        "shuffle_seed": opts.shuffle_seed,
    });
    let mut inputs: Vec<&Path> = vec![&a.task];
    inputs.extend(config_inputs(&a.config));
    let prov = provenance("train-toy", effective, &inputs)?;
    let meta = json!({
        "model_id": model.model_id(),
        "train_losses": report.losses,
        "val_accuracy": val.accuracy,
        "val_cross_entropy": val.cross_entropy,
    });
    let meta_path = a.out.with_extension("meta.json");
    write_json_artifact(&meta, &prov, &meta_path)?;
    println!(
        "trained {} epochs, final loss {:.6}, val accuracy {:.4}; checkpoint at {}",
        report.losses.len(),
        report.losses.last().unwrap(),
        val.accuracy,
        a.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// dump-grads
// ---------------------------------------------------------------------------

#[derive(Args)]
struct DumpGradsArgs {
    #[arg(long)]
    task: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Output gradient-set directory.
    #[arg(long)]
    out: PathBuf,
    /// Use only the first N training sequences.
    #[arg(long)]
    train_count: Option<usize>,
    /// Use only the first N validation sequences.
    #[arg(long)]
    val_count: Option<usize>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default)]
struct DumpGradsFileCfg {
    train_count: Option<usize>,
    val_count: Option<usize>,
}

fn run_dump_grads(a: DumpGradsArgs) -> Result<()> {
    let f: DumpGradsFileCfg = file_cfg(&a.config)?;
    let mut task: SyntheticTask = read_json(&a.task)?;
    let model = ToyTransformer::load(&a.model)?;
    let train_count = pick(a.train_count, f.train_count, task.train.len());
    let val_count = pick(a.val_count, f.val_count, task.val.len());
    if train_count > task.train.len() || val_count > task.val.len() {
        bail!(
            "requested {train_count} train / {val_count} val sequences, task has {} / {}",
            task.train.len(),
            task.val.len()
        );
    }
    task.train.truncate(train_count);
    task.val.truncate(val_count);

    let gs = dump_gradients(&model, &task, &a.out)?;
    let effective = json!({ "train_count": train_count, "val_count": val_count });
    let mut inputs: Vec<&Path> = vec![&a.task, &a.model];
    inputs.extend(config_inputs(&a.config));
    let prov = provenance("dump-grads", effective, &inputs)?;
    write_text(&a.out.join("provenance.json"), &serde_json::to_string_pretty(&prov)?)?;
    println!(
        "dumped {} train and {} val gradient rows over {} layers to {}",
        gs.num_train(),
        gs.num_val(),
        gs.num_layers(),
        a.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// score
// ---------------------------------------------------------------------------

#[derive(Args)]
struct ScoreArgs {
    /// Gradient-set directory from dump-grads.
    #[arg(long)]
    grads: PathBuf,
    /// Output directory for influence and score artifacts.
    #[arg(long)]
    out_dir: PathBuf,
    /// exact | closed-form | hessian-free.
    #[arg(long)]
    backend: Option<String>,
    /// "scaled-default" or a positive number.
    #[arg(long)]
    damping: Option<String>,
    #[arg(long)]
    max_exact_dim: Option<usize>,
    /// positive_only | all | top_fraction.
    #[arg(long)]
    strategy: Option<String>,
    /// Fraction used by the top_fraction strategy.
    #[arg(long)]
    top_fraction: Option<f64>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    polyorder: Option<usize>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default)]
struct ScoreFileCfg {
    backend: Option<String>,
    damping: Option<String>,
    max_exact_dim: Option<usize>,
    strategy: Option<String>,
    top_fraction: Option<f64>,
    window: Option<usize>,
    polyorder: Option<usize>,
}

fn parse_damping(s: &str) -> Result<DampingRule> {
    if s == "scaled-default" {
        return Ok(DampingRule::ScaledDefault);
    }
    let value: f64 = s
        .parse()
        .with_context(|| format!("damping must be 'scaled-default' or a number, got '{s}'"))?;
    Ok(DampingRule::Fixed(value))
}

fn parse_strategy(name: &str, fraction: f64) -> Result<Strategy> {
    match name {
        "positive_only" => Ok(Strategy::PositiveOnly),
        "all" => Ok(Strategy::All),
        "top_fraction" => Ok(Strategy::TopFraction(fraction)),
        other => bail!("unknown strategy '{other}' (expected positive_only, all, top_fraction)"),
    }
}

fn run_score(a: ScoreArgs) -> Result<()> {
    let f: ScoreFileCfg = file_cfg(&a.config)?;
    let backend: Backend =
        pick(a.backend, f.backend, "closed-form".into()).parse().map_err(anyhow::Error::msg)?;
    let damping = parse_damping(&pick(a.damping, f.damping, "scaled-default".into()))?;
    let max_exact_dim = pick(a.max_exact_dim, f.max_exact_dim, DEFAULT_MAX_EXACT_DIM);
    let strategy_name = pick(a.strategy, f.strategy, "positive_only".into());
    let top_fraction = pick(a.top_fraction, f.top_fraction, 0.25);
    let strategy = parse_strategy(&strategy_name, top_fraction)?;
    let window = pick(a.window, f.window, SMOOTH_WINDOW);
    let polyorder = pick(a.polyorder, f.polyorder, SMOOTH_POLYORDER);

    let gs = read_gradient_set(&a.grads)?;
    let backend_cfg = IfBackendConfig { backend, damping, max_exact_dim };
    let infl = influence_matrix(&gs, &backend_cfg)?;

    let effective = json!({
        "backend": backend,
        "damping": damping,
        "max_exact_dim": max_exact_dim,
        "strategy": strategy,
        "window": window,
        "polyorder": polyorder,
    });
    let mut inputs: Vec<&Path> = vec![&a.grads];
    inputs.extend(config_inputs(&a.config));
    let prov = provenance("score", effective, &inputs)?;

    fs::create_dir_all(&a.out_dir)?;
    write_text(&a.out_dir.join("influence.csv"), &infl.to_csv())?;
    write_json_artifact(&infl.sidecar(), &prov, &a.out_dir.join("influence.json"))?;

    let scored = aggregate(&infl, strategy)?;
    let normalized = normalize_abs_minmax(&scored);
    let mut smoothed = smooth(&normalized, window, polyorder)?;
    // Make downstream plan/report identifiers self-describing.
    smoothed.source = format!("{}:{backend}:{}", smoothed.source, strategy.label());
    if smoothed.smoothing_skipped {
        eprintln!(
            "warning: {} layers is shorter than the window of {window}; smoothing skipped",
            smoothed.num_layers()
        );
    }
    write_text(&a.out_dir.join("scores.csv"), &smoothed.to_csv())?;
    let artifact = ScoresArtifact {
        raw: smoothed.raw.clone(),
        normalized: smoothed.normalized.clone().unwrap(),
        smoothed: smoothed.smoothed.clone().unwrap(),
        smoothing_skipped: smoothed.smoothing_skipped,
        strategy,
        window,
        polyorder,
        source: smoothed.source.clone(),
        layer_dims: gs.layer_dims.clone(),
    };
    write_json_artifact(&artifact, &prov, &a.out_dir.join("scores.json"))?;
    println!(
        "scored {} samples x {} layers with {backend} into {}",
        infl.num_samples(),
        infl.num_layers(),
        a.out_dir.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// plan-experts
// ---------------------------------------------------------------------------

#[derive(Args)]
struct PlanExpertsArgs {
    /// scores.json produced by score.
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Total expert budget T.
    #[arg(long)]
    budget: Option<usize>,
    /// Sharpening exponent beta.
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default)]
struct PlanExpertsFileCfg {
    budget: Option<usize>,
    beta: Option<f64>,
}

fn run_plan_experts(a: PlanExpertsArgs) -> Result<()> {
    let f: PlanExpertsFileCfg = file_cfg(&a.config)?;
    let d = ExpertPlanConfig::default();
    let cfg = ExpertPlanConfig {
        budget: pick(a.budget, f.budget, d.budget),
        beta: pick(a.beta, f.beta, d.beta),
    };
    let artifact: ScoresArtifact = read_json(&a.scores)?;
    let alloc = plan_experts(&artifact.to_scores(), &cfg)?;

    let effective = json!({ "budget": cfg.budget, "beta": cfg.beta });
    let mut inputs: Vec<&Path> = vec![&a.scores];
    inputs.extend(config_inputs(&a.config));
    let prov = provenance("plan-experts", effective, &inputs)?;
    write_json_artifact(&alloc, &prov, &a.out)?;
    println!(
        "allocated {} experts over {} layers into {}",
        alloc.budget,
        alloc.layers.len(),
        a.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// plan-sparsity
// ---------------------------------------------------------------------------

#[derive(Args)]
struct PlanSparsityArgs {
    /// scores.json produced by score.
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Global sparsity target S in (0, 1).
    #[arg(long)]
    target: Option<f64>,
    /// Band lower edge (default max(S - 0.1, 0)).
    #[arg(long)]
    e1: Option<f64>,
    /// Band upper edge (default S + 0.1).
    #[arg(long)]
    e2: Option<f64>,
    /// Relative band: sets (e1, e2) = (S - eps*S, S + eps*S).
    #[arg(long)]
    epsilon: Option<f64>,
    /// Per-layer ratio ceiling.
    #[arg(long)]
    cap: Option<f64>,
    /// Plan against the complemented profile (ablation direction).
    #[arg(long)]
    reverse: bool,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default)]
struct PlanSparsityFileCfg {
    target: Option<f64>,
    e1: Option<f64>,
    e2: Option<f64>,
    epsilon: Option<f64>,
    cap: Option<f64>,
}

fn run_plan_sparsity(a: PlanSparsityArgs) -> Result<()> {
    let f: PlanSparsityFileCfg = file_cfg(&a.config)?;
    let artifact: ScoresArtifact = read_json(&a.scores)?;
    let target = pick(a.target, f.target, 0.5);
    let epsilon = a.epsilon.or(f.epsilon);
    let base = match epsilon {
        Some(eps) => SparsityPlanConfig::with_epsilon(target, eps, artifact.layer_dims.clone()),
        None => SparsityPlanConfig::with_default_window(target, artifact.layer_dims.clone()),
    };
    let cfg = SparsityPlanConfig {
        e1: pick(a.e1, f.e1, base.e1),
        e2: pick(a.e2, f.e2, base.e2),
        cap: pick(a.cap, f.cap, base.cap),
        ..base
    };
    let scores = artifact.to_scores();
    let plan = if a.reverse { reverse_plan(&scores, &cfg)? } else { plan_sparsity(&scores, &cfg)? };

    let effective = json!({
        "target": cfg.target,
        "e1": cfg.e1,
        "e2": cfg.e2,
        "epsilon": epsilon,
        "cap": cfg.cap,
        "reverse": a.reverse,
        "layer_dims": cfg.layer_dims,
    });
    let mut inputs: Vec<&Path> = vec![&a.scores];
    inputs.extend(config_inputs(&a.config));
    let prov = provenance("plan-sparsity", effective, &inputs)?;
    write_json_artifact(&plan, &prov, &a.out)?;
    println!(
        "planned ratios for {} layers (achieved {:.6}) into {}",
        plan.ratios.len(),
        plan.achieved,
        a.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// prune
// ---------------------------------------------------------------------------

#[derive(Args)]
struct PruneArgs {
    #[arg(long)]
    model: PathBuf,
    /// Sparsity-plan JSON from plan-sparsity.
    #[arg(long)]
    plan: PathBuf,
    /// Output directory for the mask artifacts.
    #[arg(long)]
    out_dir: PathBuf,
    /// magnitude | activation-weighted.
    #[arg(long)]
    criterion: Option<String>,
    /// block | per-matrix (magnitude criterion only).
    #[arg(long)]
    scope: Option<String>,
    /// Task JSON; required by the activation-weighted criterion.
    #[arg(long)]
    task: Option<PathBuf>,
    /// Calibration sequences taken from the start of the val split.
    #[arg(long)]
    calib_count: Option<usize>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default)]
struct PruneFileCfg {
    criterion: Option<String>,
    scope: Option<String>,
    calib_count: Option<usize>,
}

fn parse_scope(s: &str) -> Result<MaskScope> {
    match s {
        "block" => Ok(MaskScope::Block),
        "per-matrix" => Ok(MaskScope::PerMatrix),
        other => bail!("unknown scope '{other}' (expected block or per-matrix)"),
    }
}

fn run_prune(a: PruneArgs) -> Result<()> {
    let f: PruneFileCfg = file_cfg(&a.config)?;
    let criterion: Criterion =
        pick(a.criterion, f.criterion, "magnitude".into()).parse().map_err(anyhow::Error::msg)?;
    let scope = parse_scope(&pick(a.scope, f.scope, "block".into()))?;
    let calib_count = pick(a.calib_count, f.calib_count, 32);

    let model = ToyTransformer::load(&a.model)?;
    let plan: SparsityPlan = read_json(&a.plan)?;
    let mask = match criterion {
        Criterion::Magnitude => magnitude_mask_scoped(&model, &plan, scope)?,
        Criterion::ActivationWeighted => {
            if scope != MaskScope::Block {
                bail!("the activation-weighted criterion is row-structured; --scope per-matrix only applies to magnitude");
            }
            let task_path = a
                .task
                .as_ref()
                .context("--task is required for the activation-weighted criterion")?;
            let task: SyntheticTask = read_json(task_path)?;
            let n = calib_count.min(task.val.len());
            if n == 0 {
                bail!("the task's val split is empty; nothing to calibrate on");
            }
            activation_weighted_mask(&model, &plan, &task.val[..n])?
        }
    };

    let effective = json!({
        "criterion": criterion,
        "scope": scope,
        "calib_count": calib_count,
        "plan_id": plan_id(&a.plan)?,
    });
    let mut inputs: Vec<&Path> = vec![&a.model, &a.plan];
    if let Some(t) = &a.task {
        inputs.push(t);
    }
    inputs.extend(config_inputs(&a.config));
    let prov = provenance("prune", effective, &inputs)?;
    write_mask(&mask, &a.out_dir)?;
    write_text(&a.out_dir.join("provenance.json"), &serde_json::to_string_pretty(&prov)?)?;
    println!(
        "built {criterion} mask (global sparsity {:.6}) into {}",
        mask.global_sparsity(),
        a.out_dir.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    task: PathBuf,
    /// train | val | test.
    #[arg(long)]
    split: Option<String>,
    /// Mask directory from prune; evaluated unpruned when omitted.
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Plan file to record as the report's plan id.
    #[arg(long)]
    plan: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default)]
struct EvalFileCfg {
    split: Option<String>,
}

fn run_eval(a: EvalArgs) -> Result<()> {
    let f: EvalFileCfg = file_cfg(&a.config)?;
    let split = pick(a.split, f.split, "val".into());
    let task: SyntheticTask = read_json(&a.task)?;
    let samples = match split.as_str() {
        "train" => &task.train,
        "val" => &task.val,
        "test" => &task.test,
        other => bail!("unknown split '{other}' (expected train, val, test)"),
    };
    let mut model = ToyTransformer::load(&a.model)?;
    let (criterion, achieved) = match &a.mask {
        Some(dir) => {
            let mask = read_mask(dir)?;
            let sparsity = mask.global_sparsity();
            model = apply_mask(&model, &mask)?;
            (mask.criterion.to_string(), sparsity)
        }
        None => ("none".into(), 0.0),
    };
    let metrics = evaluate(&model, samples);
    let report = PruneEvalReport {
        criterion,
        plan_id: match &a.plan {
            Some(p) => plan_id(p)?,
            None => "none".into(),
        },
        achieved_sparsity: achieved,
        accuracy: metrics.accuracy,
        cross_entropy: metrics.cross_entropy,
    };

    let effective = json!({ "split": split });
    let mut inputs: Vec<&Path> = vec![&a.model, &a.task];
    inputs.extend(a.mask.as_deref());
    inputs.extend(a.plan.as_deref());
    inputs.extend(config_inputs(&a.config));
    let prov = provenance("eval", effective, &inputs)?;
    write_json_artifact(&report, &prov, &a.out)?;
    println!(
        "evaluated {split} split: accuracy {:.4}, cross-entropy {:.6}",
        report.accuracy, report.cross_entropy
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// compare
// ---------------------------------------------------------------------------

#[derive(Args)]
struct CompareArgs {
    /// Expert-plan JSON (left side).
    #[arg(long)]
    plan_a: PathBuf,
    /// Expert-plan JSON (right side).
    #[arg(long)]
    plan_b: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also export both allocations as a heatmap CSV.
    #[arg(long)]
    heatmap: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

fn run_compare(a: CompareArgs) -> Result<()> {
    let alloc_a: layerif::expert_planner::ExpertAllocation = read_json(&a.plan_a)?;
    let alloc_b: layerif::expert_planner::ExpertAllocation = read_json(&a.plan_b)?;
    let report = compare_allocations(&alloc_a, &alloc_b)?;

    let effective = json!({ "plan_a": plan_id(&a.plan_a)?, "plan_b": plan_id(&a.plan_b)? });
    let mut inputs: Vec<&Path> = vec![&a.plan_a, &a.plan_b];
    inputs.extend(config_inputs(&a.config));
    let prov = provenance("compare", effective, &inputs)?;
    write_json_artifact(&report, &prov, &a.out)?;

    if let Some(path) = &a.heatmap {
        let name = |p: &Path| {
            p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "plan".into())
        };
        let csv = heatmap_export(&[(name(&a.plan_a), alloc_a), (name(&a.plan_b), alloc_b)])?;
        write_text(path, &csv)?;
    }
    println!("spearman {:.4} between {} and {}", report.spearman, report.id_a, report.id_b);
    Ok(())
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    model: PathBuf,
    /// scores.json produced by score.
    #[arg(long)]
    scores: PathBuf,
    /// Task JSON; supplies the evaluation split and the calibration pool.
    #[arg(long)]
    task: PathBuf,
    /// Output directory for ablation.csv and ablation.json.
    #[arg(long)]
    out_dir: PathBuf,
    /// Evaluation split: train | val | test.
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    target: Option<f64>,
    #[arg(long)]
    e1: Option<f64>,
    #[arg(long)]
    e2: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    cap: Option<f64>,
    /// Comma-separated criteria list.
    #[arg(long)]
    criteria: Option<String>,
    /// Number of seeds, numbered seed, seed+1, ...
    #[arg(long)]
    seeds: Option<usize>,
    /// First seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default)]
struct AblateFileCfg {
    split: Option<String>,
    target: Option<f64>,
    e1: Option<f64>,
    e2: Option<f64>,
    epsilon: Option<f64>,
    cap: Option<f64>,
    criteria: Option<String>,
    seeds: Option<usize>,
    seed: Option<u64>,
}

fn run_ablate(a: AblateArgs) -> Result<()> {
    let f: AblateFileCfg = file_cfg(&a.config)?;
    let split = pick(a.split, f.split, "val".into());
    let target = pick(a.target, f.target, 0.5);
    let epsilon = a.epsilon.or(f.epsilon);
    let criteria_names = pick(a.criteria, f.criteria, "magnitude,activation-weighted".into());
    let seeds_count = pick(a.seeds, f.seeds, 10);
    let seed_base = pick(a.seed, f.seed, 0);

    let criteria: Vec<Criterion> = criteria_names
        .split(',')
        .map(|s| s.trim().parse().map_err(anyhow::Error::msg))
        .collect::<Result<_>>()?;
    let seeds: Vec<u64> = (0..seeds_count as u64).map(|i| seed_base + i).collect();

    let artifact: ScoresArtifact = read_json(&a.scores)?;
    let base = match epsilon {
        Some(eps) => SparsityPlanConfig::with_epsilon(target, eps, artifact.layer_dims.clone()),
        None => SparsityPlanConfig::with_default_window(target, artifact.layer_dims.clone()),
    };
    let cfg = SparsityPlanConfig {
        e1: pick(a.e1, f.e1, base.e1),
        e2: pick(a.e2, f.e2, base.e2),
        cap: pick(a.cap, f.cap, base.cap),
        ..base
    };

    let model = ToyTransformer::load(&a.model)?;
    let task: SyntheticTask = read_json(&a.task)?;
    let eval_samples = match split.as_str() {
        "train" => &task.train,
        "val" => &task.val,
        "test" => &task.test,
        other => bail!("unknown split '{other}' (expected train, val, test)"),
    };
    let table = ablation_reversed(
        &model,
        &artifact.to_scores(),
        &cfg,
        &criteria,
        &seeds,
        eval_samples,
        &task.val,
    )?;

    let effective = json!({
        "split": split,
        "target": cfg.target,
        "e1": cfg.e1,
        "e2": cfg.e2,
        "epsilon": epsilon,
        "cap": cfg.cap,
        "criteria": criteria,
        "seeds": seeds,
    });
    let mut inputs: Vec<&Path> = vec![&a.model, &a.scores, &a.task];
    inputs.extend(config_inputs(&a.config));
    let prov = provenance("ablate", effective, &inputs)?;
    fs::create_dir_all(&a.out_dir)?;
    write_text(&a.out_dir.join("ablation.csv"), &table.to_csv())?;
    write_json_artifact(&table, &prov, &a.out_dir.join("ablation.json"))?;
    println!(
        "ablated {} rows: forward wins {}, reversed wins {}, ties {}",
        table.rows.len(),
        table.forward_wins,
        table.reversed_wins,
        table.ties
    );
    Ok(())
}
