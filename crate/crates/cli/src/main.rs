use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use xrec::adapter::AdapterPair;
use xrec::datagen::{self, Split, WorldConfig};
use xrec::emissions::{self, EmissionsParams, GpuProfile};
use xrec::eval::{self, GeneratedRecord, JudgeConfig, MetricReport};
use xrec::graph::{self, GnnConfig};
use xrec::lm::{self, DecodeMode, PretrainConfig, ToyLm};
use xrec::pipeline::{self, AblationFlags, GenerationConfig, OptimizerKind, TrainConfig};

const SUMMARY_FILE: &str = "summary.json";
const ROWS_FILE: &str = "rows.csv";
const REPORT_FILE: &str = "report.md";
const GENERATED_FILE: &str = "generated.jsonl";

#[derive(Debug, Parser)]
#[command(name = "xrec", version, about = "Explainable recommendation pipeline at desk scale")]
#[command(args_override_self = true)]
struct Cli {
    /// Flat `key = value` file; keys are flag names, flags given on the command line win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic world and write it as JSONL.
    GenData(GenDataArgs),
    /// Train LightGCN embeddings on the train split.
    TrainGnn(TrainGnnArgs),
    /// Train the MoE adapters against the frozen LM (pretraining the LM first if needed).
    TrainAdapter(TrainAdapterArgs),
    /// Generate explanations with trained adapters.
    Generate(GenerateArgs),
    /// Score generated explanations against the ground truth.
    Evaluate(EvaluateArgs),
    /// Render one table from several evaluation summaries.
    Report(ReportArgs),
    /// Estimate kg CO2e for a run time.
    Emissions(EmissionsArgs),
}

#[derive(Debug, Args, Serialize)]
struct Accounting {
    /// Power profile used for emissions lines: h100 or a100_mig.
    #[arg(long, default_value = "h100")]
    gpu_profile: String,
    /// CSV that receives one emissions line per command.
    #[arg(long, default_value = "emissions.csv")]
    emissions_file: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct GenDataArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    num_users: usize,
    #[arg(long, default_value_t = 200)]
    num_items: usize,
    #[arg(long, default_value_t = 8)]
    num_topics: usize,
    #[arg(long, default_value_t = 15)]
    interactions_per_user: usize,
    #[arg(long, default_value_t = 0.05)]
    concentration: f64,
    /// Keep only samples inside the k-core of the interaction graph.
    #[arg(long)]
    k_core: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
struct TrainGnnArgs {
    #[arg(long)]
    data: PathBuf,
    /// Run directory receiving the embeddings.
    #[arg(long)]
    run: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2)]
    gnn_layers: usize,
    #[arg(long, default_value_t = 32)]
    gnn_dim: usize,
    #[arg(long, default_value_t = 1e-3)]
    gnn_lr: f64,
    #[arg(long, default_value_t = 1e-4)]
    gnn_l2: f64,
    #[arg(long, default_value_t = 1)]
    gnn_negatives: usize,
    #[arg(long, default_value_t = 400)]
    gnn_epochs: usize,
    #[command(flatten)]
    #[serde(flatten)]
    accounting: Accounting,
}

#[derive(Debug, Args, Serialize)]
struct TrainAdapterArgs {
    #[arg(long)]
    data: PathBuf,
    /// Run directory holding the embeddings and the LM.
    #[arg(long)]
    run: PathBuf,
    /// full, wo-injection, wo-embeddings, wo-profiles or fixed-moe.
    #[arg(long, default_value = "full")]
    ablation: String,
    /// Output directory; defaults to `<run>/<ablation>`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 1e-6)]
    weight_decay: f64,
    /// sgd or adamw.
    #[arg(long, default_value = "sgd")]
    optimizer: String,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    early_stopping: bool,
    #[arg(long, default_value_t = 8)]
    num_experts: usize,
    #[arg(long, default_value_t = 0.2)]
    dropout: f64,
    #[arg(long, default_value_t = 0.01)]
    noise_factor: f64,
    #[arg(long, default_value_t = 64)]
    lm_dim: usize,
    #[arg(long, default_value_t = 2)]
    lm_layers: usize,
    #[arg(long, default_value_t = 4)]
    lm_heads: usize,
    #[arg(long, default_value_t = 128)]
    lm_max_len: usize,
    #[arg(long, default_value_t = 40)]
    lm_epochs: usize,
    #[arg(long, default_value_t = 3e-3)]
    lm_lr: f64,
    #[command(flatten)]
    #[serde(flatten)]
    accounting: Accounting,
}

#[derive(Debug, Args, Serialize)]
struct GenerateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    run: PathBuf,
    /// Directory written by train-adapter; defaults to `<run>/<ablation>`.
    #[arg(long)]
    adapter_dir: Option<PathBuf>,
    /// Used only to locate the default adapter directory.
    #[arg(long, default_value = "full")]
    ablation: String,
    #[arg(long, default_value = "test")]
    split: String,
    /// Defaults to `<adapter-dir>/generated.jsonl`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// greedy, or a positive temperature.
    #[arg(long, default_value = "greedy")]
    decode: String,
    #[arg(long, default_value_t = 40)]
    max_new_tokens: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[command(flatten)]
    #[serde(flatten)]
    accounting: Accounting,
}

#[derive(Debug, Args, Serialize)]
struct EvaluateArgs {
    #[arg(long)]
    data: PathBuf,
    /// Run directory whose LM provides the embedding and likelihood metrics.
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    generated: PathBuf,
    /// Report label; defaults to the adapter run's variant.
    #[arg(long)]
    variant: Option<String>,
    /// Score a seeded random subset of ceil(fraction * N) samples.
    #[arg(long, default_value_t = 1.0)]
    fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Defaults to the directory of the generated file.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Use the live chat-completion judge instead of the stub.
    #[arg(long, default_value_t = false, action = clap::ArgAction::Set)]
    judge_live: bool,
    #[arg(long, default_value = "http://127.0.0.1:8000/v1")]
    judge_endpoint: String,
    #[arg(long, default_value = "judge")]
    judge_model: String,
    #[arg(long, default_value_t = 60)]
    judge_timeout: u64,
    #[arg(long, default_value_t = 3)]
    judge_retries: usize,
    #[arg(long, default_value_t = 4)]
    judge_concurrency: usize,
    /// Name of an environment variable holding the judge API key.
    #[arg(long)]
    judge_api_key_env: Option<String>,
    /// Optional `uid,iid,score` CSV of externally computed BLEURT scores.
    #[arg(long)]
    bleurt_scores: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    accounting: Accounting,
}

#[derive(Debug, Args, Serialize)]
struct ReportArgs {
    /// summary.json files written by evaluate.
    #[arg(long, num_args = 1.., required = true)]
    summaries: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct EmissionsArgs {
    #[arg(long, default_value = "h100")]
    gpu_profile: String,
    #[arg(long)]
    hours: f64,
    #[arg(long, default_value_t = emissions::DEFAULT_CARBON_INTENSITY)]
    carbon_intensity: f64,
    #[arg(long, default_value_t = emissions::DEFAULT_PUE)]
    pue: f64,
}

/// Splices `--key=value` pairs from the `--config` file in right after the
/// subcommand, so that flags given later on the command line override them.
fn expand_config(args: Vec<OsString>) -> Result<Vec<OsString>> {
    let mut config = None;
    let mut rest = Vec::with_capacity(args.len());
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            config = Some(PathBuf::from(it.next().ok_or_else(|| anyhow!("--config needs a path"))?));
        } else if let Some(p) = s.strip_prefix("--config=") {
            config = Some(PathBuf::from(p));
        } else {
            rest.push(a);
        }
    }
    let Some(path) = config else { return Ok(rest) };
    let text = fs::read_to_string(&path).with_context(|| format!("cannot read config file {}", path.display()))?;
    let entries = pipeline::parse_key_values(&text).map_err(|e| anyhow!("config file {}: {e}", path.display()))?;
    let sub = rest
        .iter()
        .skip(1)
        .position(|a| !a.to_string_lossy().starts_with('-'))
        .map(|p| p + 2)
        .unwrap_or(rest.len());
    let injected = entries
        .iter()
        .filter(|(k, _)| k.as_str() != "config")
        .map(|(k, v)| OsString::from(format!("--{}={v}", k.replace('_', "-"))));
    let tail = rest.split_off(sub);
    rest.extend(injected);
    rest.extend(tail);
    Ok(rest)
}

/// Flattens a serialisable args struct into `key=value` entries; unset
/// optional flags are omitted.
fn effective_config<T: Serialize>(args: &T) -> BTreeMap<String, String> {
    let serde_json::Value::Object(map) = serde_json::to_value(args).expect("args serialise") else {
        return BTreeMap::new();
    };
    map.into_iter()
        .filter_map(|(k, v)| match v {
            serde_json::Value::Null => None,
            serde_json::Value::String(s) => Some((k, s)),
            other => Some((k, other.to_string())),
        })
        .collect()
}

fn record_emissions(acc: &Accounting, command: &str, started: Instant) -> Result<()> {
    let profile = GpuProfile::parse(&acc.gpu_profile)?;
    let seconds = started.elapsed().as_secs_f64();
    emissions::append_emissions(&acc.emissions_file, command, profile, seconds)?;
    Ok(())
}

fn variant_dir(run: &Path, ablation: &str) -> Result<PathBuf> {
    let flags = AblationFlags::parse_variant(ablation).ok_or_else(|| unknown_variant(ablation))?;
    Ok(run.join(flags.name().replace('/', "").replace('+', "_")))
}

fn unknown_variant(name: &str) -> anyhow::Error {
    anyhow!("unknown ablation `{name}` (expected full, wo-injection, wo-embeddings, wo-profiles or fixed-moe)")
}

fn require(path: &Path, hint: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        bail!("missing file {} ({hint})", path.display())
    }
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    let config = WorldConfig {
        num_users: a.num_users,
        num_items: a.num_items,
        interactions_per_user: a.interactions_per_user,
        concentration: a.concentration,
        ..WorldConfig::new(a.seed).with_topics(a.num_topics)
    };
    let mut world = datagen::generate_world(&config)?;
    if let Some(k) = a.k_core {
        let dropped = world.dataset.retain_k_core(k)?;
        println!("{k}-core filter dropped {dropped} samples");
    }
    datagen::write_dataset(&a.out, &world.dataset)?;
    println!(
        "wrote {} samples, {} users, {} items to {}",
        world.dataset.samples.len(),
        world.dataset.num_users(),
        world.dataset.num_items(),
        a.out.display()
    );
    Ok(())
}

fn train_gnn(a: &TrainGnnArgs) -> Result<()> {
    let started = Instant::now();
    let dataset = datagen::load_dataset(&a.data)?;
    let graph = dataset.graph(&[Split::Train])?;
    let config = GnnConfig {
        num_layers: a.gnn_layers,
        embed_dim: a.gnn_dim,
        learning_rate: a.gnn_lr,
        l2_lambda: a.gnn_l2,
        num_neg_samples: a.gnn_negatives,
        epochs: a.gnn_epochs,
        seed: a.seed,
        ..GnnConfig::default()
    };
    let (table, trace) = graph::train_gnn_with_trace(&graph, &config)?;
    let held: Vec<(usize, usize)> = dataset.split(Split::Valid).iter().map(|s| (s.uid, s.iid)).collect();
    fs::create_dir_all(&a.run).with_context(|| format!("cannot create {}", a.run.display()))?;
    pipeline::save_embeddings(&a.run.join(pipeline::EMBEDDINGS_FILE), &table)?;
    pipeline::write_run_config(&a.run.join("gnn_config"), &effective_config(a))?;
    let auc = if held.is_empty() {
        f64::NAN
    } else {
        graph::ranking_auc(&table, &graph, &held)
    };
    println!(
        "trained {} epochs, final BPR loss {:.4}, validation AUC {:.3}",
        trace.len(),
        trace.last().map_or(f64::NAN, |e| e.mean_loss),
        auc
    );
    record_emissions(&a.accounting, "train-gnn", started)
}

fn load_or_pretrain_lm(a: &TrainAdapterArgs, dataset: &datagen::Dataset, emb: &graph::EmbeddingTable) -> Result<ToyLm> {
    let path = a.run.join(pipeline::LM_FILE);
    if path.exists() {
        return ToyLm::load(&path).with_context(|| format!("cannot load {}", path.display()));
    }
    let examples = pipeline::pretraining_examples(dataset, emb, Split::Train)?;
    let config = PretrainConfig {
        d_lm: a.lm_dim,
        n_layers: a.lm_layers,
        n_heads: a.lm_heads,
        max_seq_len: a.lm_max_len,
        seed: a.seed,
        max_epochs: a.lm_epochs,
        learning_rate: a.lm_lr,
        ..PretrainConfig::default()
    };
    let (lm, report) = lm::pretrain_on_examples(&examples, &config)?;
    lm.save(&path)?;
    println!(
        "pretrained LM for {} epochs, final loss {:.4}",
        report.epoch_losses.len(),
        report.epoch_losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(lm)
}

fn train_adapter(a: &TrainAdapterArgs) -> Result<()> {
    let started = Instant::now();
    let flags = AblationFlags::parse_variant(&a.ablation).ok_or_else(|| unknown_variant(&a.ablation))?;
    let optimizer = match a.optimizer.as_str() {
        "sgd" => OptimizerKind::Sgd,
        "adamw" => OptimizerKind::AdamW,
        other => bail!("unknown optimizer `{other}` (expected sgd or adamw)"),
    };
    let emb_path = a.run.join(pipeline::EMBEDDINGS_FILE);
    require(&emb_path, "run train-gnn first")?;
    let dataset = datagen::load_dataset(&a.data)?;
    let emb = pipeline::load_embeddings(&emb_path)?;
    let lm = load_or_pretrain_lm(a, &dataset, &emb)?;
    let out = match &a.out {
        Some(p) => p.clone(),
        None => variant_dir(&a.run, &a.ablation)?,
    };
    fs::create_dir_all(&out).with_context(|| format!("cannot create {}", out.display()))?;

    let mut pair = AdapterPair::new(emb.dim(), lm.config().d_lm, a.seed)?;
    for adapter in [&mut pair.user, &mut pair.item] {
        let mut c = adapter.config().clone();
        c.num_experts = a.num_experts;
        c.dropout_rate = a.dropout;
        c.noise_factor = a.noise_factor;
        *adapter = xrec::adapter::MoeAdapter::new(c)?;
    }
    let config = TrainConfig {
        learning_rate: a.lr,
        weight_decay: a.weight_decay,
        optimizer,
        early_stopping: a.early_stopping,
        seed: a.seed,
        ..TrainConfig::default()
    };
    let train = dataset.split(Split::Train);
    let digest_before = lm.digest();
    let adapters = if flags.use_embeddings {
        let outcome = pipeline::train_adapter(&lm, &pair, &emb, &dataset, &train, &config, &flags)?;
        pipeline::write_loss_trace(&out.join(pipeline::LOSS_TRACE_FILE), &outcome.trace)?;
        println!(
            "trained on {} samples{}, final ATL {:.4}",
            outcome.trace.len(),
            if outcome.stopped_early { " (early stop)" } else { "" },
            outcome.trace.last().map_or(f64::NAN, |r| r.atl)
        );
        outcome.adapters
    } else {
        println!("embeddings disabled: adapters are not used");
        pair
    };
    if lm.digest() != digest_before {
        bail!("LM parameters changed during adapter training");
    }
    adapters.save(&out.join(pipeline::ADAPTERS_FILE))?;

    let mut entries = effective_config(a);
    entries.insert("out".into(), out.display().to_string());
    entries.insert("variant".into(), flags.name());
    entries.insert("use_profiles".into(), flags.use_profiles.to_string());
    entries.insert("use_injection".into(), flags.use_injection.to_string());
    entries.insert("use_embeddings".into(), flags.use_embeddings.to_string());
    entries.insert("fixed_moe_inputs".into(), flags.fixed_moe_inputs.to_string());
    entries.insert("lm_digest".into(), digest_before);
    pipeline::write_run_config(&out.join(pipeline::RUN_CONFIG_FILE), &entries)?;
    record_emissions(&a.accounting, "train-adapter", started)
}

fn flag(entries: &BTreeMap<String, String>, key: &str, path: &Path) -> Result<bool> {
    entries
        .get(key)
        .ok_or_else(|| anyhow!("{} has no `{key}` entry", path.display()))?
        .parse()
        .with_context(|| format!("{}: `{key}` is not a boolean", path.display()))
}

fn generate(a: &GenerateArgs) -> Result<()> {
    let started = Instant::now();
    let dir = match &a.adapter_dir {
        Some(p) => p.clone(),
        None => variant_dir(&a.run, &a.ablation)?,
    };
    let run_config_path = dir.join(pipeline::RUN_CONFIG_FILE);
    require(&run_config_path, "run train-adapter first")?;
    let rc = pipeline::read_run_config(&run_config_path)?;
    let flags = AblationFlags {
        use_profiles: flag(&rc, "use_profiles", &run_config_path)?,
        use_injection: flag(&rc, "use_injection", &run_config_path)?,
        use_embeddings: flag(&rc, "use_embeddings", &run_config_path)?,
        fixed_moe_inputs: flag(&rc, "fixed_moe_inputs", &run_config_path)?,
    };
    let train_seed: u64 = rc
        .get("seed")
        .map(|s| s.parse())
        .transpose()
        .context("run_config seed is not an integer")?
        .unwrap_or(0);
    let split = Split::parse(&a.split).ok_or_else(|| anyhow!("unknown split `{}` (expected train, valid or test)", a.split))?;
    let decode = match a.decode.as_str() {
        "greedy" => DecodeMode::Greedy,
        t => {
            let temp: f64 = t.parse().map_err(|_| anyhow!("--decode must be `greedy` or a positive number"))?;
            if !(temp > 0.0) {
                bail!("--decode temperature must be positive");
            }
            DecodeMode::Temperature(temp)
        }
    };
    let lm_path = a.run.join(pipeline::LM_FILE);
    require(&lm_path, "run train-adapter first")?;
    let dataset = datagen::load_dataset(&a.data)?;
    let emb = pipeline::load_embeddings(&a.run.join(pipeline::EMBEDDINGS_FILE))?;
    let lm = ToyLm::load(&lm_path)?;
    let adapters = AdapterPair::load(&dir.join(pipeline::ADAPTERS_FILE))?;
    let samples = dataset.split(split);
    let config = GenerationConfig {
        decode,
        max_new_tokens: a.max_new_tokens,
        seed: a.seed,
        workers: a.workers,
    };
    let generated = pipeline::generate_explanations(&lm, &adapters, &emb, &dataset, &samples, &flags, &config, train_seed);
    let mut records = Vec::with_capacity(generated.len());
    let mut failures = 0usize;
    for g in generated {
        match g.output {
            Ok(text) => records.push(GeneratedRecord {
                uid: g.uid,
                iid: g.iid,
                generated: text,
            }),
            Err(e) => {
                failures += 1;
                eprintln!("sample ({}, {}) failed: {e}", g.uid, g.iid);
            }
        }
    }
    let out = a.out.clone().unwrap_or_else(|| dir.join(GENERATED_FILE));
    eval::write_generated(&out, &records)?;
    println!("wrote {} explanations to {} ({failures} failed)", records.len(), out.display());
    record_emissions(&a.accounting, "generate", started)
}

fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let started = Instant::now();
    if !(a.fraction > 0.0 && a.fraction <= 1.0) {
        bail!("--fraction must be in (0, 1]");
    }
    require(&a.generated, "run generate first")?;
    let lm_path = a.run.join(pipeline::LM_FILE);
    require(&lm_path, "run train-adapter first")?;
    let dataset = datagen::load_dataset(&a.data)?;
    let lm = ToyLm::load(&lm_path)?;
    let all = eval::read_generated(&a.generated)?;
    let subset: Vec<GeneratedRecord> = eval::seeded_subset(all.len(), a.fraction, a.seed)
        .into_iter()
        .map(|k| all[k].clone())
        .collect();
    let out = match &a.out {
        Some(p) => p.clone(),
        None => a.generated.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    let variant = match &a.variant {
        Some(v) => v.clone(),
        None => {
            let rc = out.join(pipeline::RUN_CONFIG_FILE);
            if rc.exists() {
                pipeline::read_run_config(&rc)?.get("variant").cloned().unwrap_or_else(|| "run".into())
            } else {
                "run".into()
            }
        }
    };
    let judge = JudgeConfig {
        endpoint: a.judge_endpoint.clone(),
        model: a.judge_model.clone(),
        timeout_secs: a.judge_timeout,
        max_retries: a.judge_retries,
        concurrency: a.judge_concurrency,
        stub_mode: !a.judge_live,
        api_key: match &a.judge_api_key_env {
            Some(var) => Some(std::env::var(var).with_context(|| format!("environment variable {var} is not set"))?),
            None => None,
        },
        ..JudgeConfig::default()
    };
    let (mut report, mut rows) = eval::evaluate(&variant, &subset, &dataset, &lm, &judge)?;
    if let Some(path) = &a.bleurt_scores {
        let scores = eval::read_external_scores(path)?;
        eval::add_external_metric(&mut report, &mut rows, "bleurt", &scores)?;
    }
    fs::create_dir_all(&out).with_context(|| format!("cannot create {}", out.display()))?;
    eval::write_rows_csv(&out.join(ROWS_FILE), &rows)?;
    let summary = serde_json::to_string_pretty(&report)?;
    fs::write(out.join(SUMMARY_FILE), summary).with_context(|| format!("cannot write {}", out.display()))?;
    fs::write(out.join(REPORT_FILE), eval::render_report(std::slice::from_ref(&report)))
        .with_context(|| format!("cannot write {}", out.display()))?;
    println!("scored {} of {} samples; report in {}", subset.len(), all.len(), out.display());
    for m in &report.metrics {
        println!("  {}: mean {:.4} std {:.4} (n={})", m.metric, m.mean, m.std, m.count);
    }
    println!("  usr: {:.4}", report.usr);
    record_emissions(&a.accounting, "evaluate", started)
}

fn report(a: &ReportArgs) -> Result<()> {
    let mut reports = Vec::new();
    for p in &a.summaries {
        let text = fs::read_to_string(p).with_context(|| format!("cannot read {}", p.display()))?;
        let r: MetricReport = serde_json::from_str(&text).with_context(|| format!("malformed summary {}", p.display()))?;
        reports.push(r);
    }
    fs::write(&a.out, eval::render_report(&reports)).with_context(|| format!("cannot write {}", a.out.display()))?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn emissions_cmd(a: &EmissionsArgs) -> Result<()> {
    let profile = GpuProfile::parse(&a.gpu_profile)?;
    let params = EmissionsParams {
        carbon_intensity: a.carbon_intensity,
        pue: a.pue,
        ..EmissionsParams::for_profile(profile, a.hours)
    };
    println!("{:.6}", emissions::emissions_estimate(&params)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::TrainGnn(a) => train_gnn(a),
        Command::TrainAdapter(a) => train_adapter(a),
        Command::Generate(a) => generate(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Report(a) => report(a),
        Command::Emissions(a) => emissions_cmd(a),
    }
}

fn main() -> ExitCode {
    let args = match expand_config(std::env::args_os().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
