//! Prompt assembly, adapter-only training, early stopping, generation, and
//! the run directory layout.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapter::{make_fixed_inputs, AdapterError, AdapterPair, Mode};
use crate::checkpoint::{self, CheckpointError};
use crate::datagen::{Dataset, ExplanationSample, Split};
use crate::graph::{EmbeddingTable, GraphError};
use crate::lm::{
    encode_pair, slot_positions, DecodeMode, InjectionDepth, InjectionOptions, LmError, LmExample, Slot, SlotInputs,
    ToyLm,
};
use crate::numerics::{NumericsError, Tape, Tensor};
use crate::optim::{Adam, DecayedSgd};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("no profile for user {0}")]
    MissingUserProfile(usize),
    #[error("no profile for item {0}")]
    MissingItemProfile(usize),
    #[error("no embedding for user {0}")]
    MissingUserEmbedding(usize),
    #[error("no embedding for item {0}")]
    MissingItemEmbedding(usize),
    #[error("the LM must be frozen before adapter training")]
    LmNotFrozen,
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed run file {path}: {reason}")]
    Malformed { path: String, reason: String },
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    pub use_profiles: bool,
    pub use_injection: bool,
    pub use_embeddings: bool,
    pub fixed_moe_inputs: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self::full()
    }
}

impl AblationFlags {
    pub fn full() -> Self {
        Self {
            use_profiles: true,
            use_injection: true,
            use_embeddings: true,
            fixed_moe_inputs: false,
        }
    }

    pub fn without_injection() -> Self {
        Self {
            use_injection: false,
            ..Self::full()
        }
    }

    pub fn without_embeddings() -> Self {
        Self {
            use_embeddings: false,
            ..Self::full()
        }
    }

    pub fn without_profiles() -> Self {
        Self {
            use_profiles: false,
            ..Self::full()
        }
    }

    pub fn fixed_moe() -> Self {
        Self {
            fixed_moe_inputs: true,
            ..Self::full()
        }
    }

    /// Every combination of the four flags.
    pub fn all_combinations() -> Vec<Self> {
        (0..16u8)
            .map(|bits| Self {
                use_profiles: bits & 1 != 0,
                use_injection: bits & 2 != 0,
                use_embeddings: bits & 4 != 0,
                fixed_moe_inputs: bits & 8 != 0,
            })
            .collect()
    }

    /// Variant names used in reports and on the command line.
    pub fn name(&self) -> String {
        let mut parts = Vec::new();
        if !self.use_embeddings {
            parts.push("w/o-emb");
        } else if !self.use_injection {
            parts.push("w/o-inj");
        }
        if !self.use_profiles {
            parts.push("w/o-prof");
        }
        if self.fixed_moe_inputs && self.use_embeddings {
            parts.push("fixed-moe");
        }
        if parts.is_empty() {
            "full".to_string()
        } else {
            parts.join("+")
        }
    }

    pub fn parse_variant(name: &str) -> Option<Self> {
        match name {
            "full" => Some(Self::full()),
            "w/o-inj" | "wo-inj" | "wo-injection" | "without-injection" => Some(Self::without_injection()),
            "w/o-emb" | "wo-emb" | "wo-embeddings" | "without-embeddings" => Some(Self::without_embeddings()),
            "w/o-prof" | "wo-prof" | "wo-profiles" | "without-profiles" => Some(Self::without_profiles()),
            "fixed-moe" => Some(Self::fixed_moe()),
            _ => None,
        }
    }

    fn injection_options(&self) -> InjectionOptions {
        InjectionOptions {
            depth: if self.use_injection {
                InjectionDepth::AllLayers
            } else {
                InjectionDepth::FirstLayer
            },
            ..InjectionOptions::default()
        }
    }
}

pub const INSTRUCTION: &str = "explain why the user would enjoy the item:";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSpec {
    pub text: String,
    pub user_profile: Option<String>,
    pub item_profile: Option<String>,
    pub target: Option<String>,
}

impl PromptSpec {
    pub fn has_placeholders(&self) -> bool {
        self.text.contains(crate::lm::vocab::USER_EMBED)
    }
}

pub fn assemble_prompt(
    sample: &ExplanationSample,
    dataset: &Dataset,
    flags: &AblationFlags,
) -> Result<PromptSpec, PipelineError> {
    let user = dataset.user(sample.uid).ok_or(PipelineError::MissingUserProfile(sample.uid))?;
    let item = dataset.item(sample.iid).ok_or(PipelineError::MissingItemProfile(sample.iid))?;
    let mut text = String::new();
    if flags.use_embeddings {
        text.push_str("<USER_EMBED> <ITEM_EMBED> ");
    }
    let (mut user_profile, mut item_profile) = (None, None);
    if flags.use_profiles {
        let up = user.profile.clone();
        let ip = format!("{}, {}", item.title, item.description);
        write!(text, "user profile: {up} item profile: {ip} ").expect("string write");
        user_profile = Some(up);
        item_profile = Some(ip);
    }
    text.push_str(INSTRUCTION);
    Ok(PromptSpec {
        text,
        user_profile,
        item_profile,
        target: Some(sample.explanation.clone()),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum OptimizerKind {
    /// Gradient descent with decoupled weight decay.
    #[default]
    Sgd,
    /// Adam with decoupled weight decay.
    AdamW,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub optimizer: OptimizerKind,
    pub early_stopping: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            batch_size: 1,
            learning_rate: 1e-4,
            weight_decay: 1e-6,
            optimizer: OptimizerKind::Sgd,
            early_stopping: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop,
}

/// Early stopping on the rolling average train loss (ATL, window 10).
///
/// Inert until more than `N/5` samples have been processed; afterwards a
/// strictly lower ATL than the best seen resets the counter, anything else
/// increments it, and training stops when the counter reaches `N/10`.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopState {
    pub dataset_size: usize,
    window: Vec<f64>,
    pub best_atl: f64,
    pub samples_since_best: usize,
    pub processed: usize,
}

pub const ATL_WINDOW: usize = 10;

impl EarlyStopState {
    pub fn new(dataset_size: usize) -> Self {
        Self {
            dataset_size,
            window: Vec::with_capacity(ATL_WINDOW),
            best_atl: f64::INFINITY,
            samples_since_best: 0,
            processed: 0,
        }
    }

    pub fn enabled_after(&self) -> usize {
        self.dataset_size / 5
    }

    pub fn patience(&self) -> usize {
        (self.dataset_size / 10).max(1)
    }

    pub fn atl(&self) -> f64 {
        self.window.iter().sum::<f64>() / self.window.len().max(1) as f64
    }

    pub fn update(&mut self, loss: f64) -> StopDecision {
        if self.window.len() == ATL_WINDOW {
            self.window.remove(0);
        }
        self.window.push(loss);
        self.processed += 1;
        if self.processed <= self.enabled_after() {
            return StopDecision::Continue;
        }
        let atl = self.atl();
        if atl < self.best_atl {
            self.best_atl = atl;
            self.samples_since_best = 0;
        } else {
            self.samples_since_best += 1;
        }
        if self.samples_since_best >= self.patience() {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub sample_index: usize,
    pub loss: f64,
    pub atl: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub adapters: AdapterPair,
    pub trace: Vec<LossRecord>,
    pub stopped_early: bool,
}

/// Relative change of the running-best ATL over the last `N/10` records.
pub fn plateau_change(trace: &[LossRecord]) -> f64 {
    if trace.is_empty() {
        return 0.0;
    }
    let span = (trace.len() / 10).max(1);
    let mut best = f64::INFINITY;
    let running: Vec<f64> = trace
        .iter()
        .map(|r| {
            best = best.min(r.atl);
            best
        })
        .collect();
    let end = running[running.len() - 1];
    let start = running[running.len() - 1 - span.min(running.len() - 1)];
    if start == 0.0 {
        return 0.0;
    }
    (start - end).abs() / start.abs()
}

fn adapter_inputs(
    embeddings: &EmbeddingTable,
    fixed: &Option<(Vec<f64>, Vec<f64>)>,
    uid: usize,
    iid: usize,
) -> Result<(Vec<f64>, Vec<f64>), PipelineError> {
    if let Some((u, i)) = fixed {
        return Ok((u.clone(), i.clone()));
    }
    if uid >= embeddings.num_users() {
        return Err(PipelineError::MissingUserEmbedding(uid));
    }
    if iid >= embeddings.num_items() {
        return Err(PipelineError::MissingItemEmbedding(iid));
    }
    Ok((embeddings.user(uid).to_vec(), embeddings.item(iid).to_vec()))
}

/// Per-sample adapter training against the frozen LM.
///
/// Gradients reach only the adapter parameters: the LM is bound as
/// constants. Without embeddings there is nothing to train and the loop
/// only records the loss trace.
pub fn train_adapter(
    lm: &ToyLm,
    adapters: &AdapterPair,
    embeddings: &EmbeddingTable,
    dataset: &Dataset,
    samples: &[ExplanationSample],
    config: &TrainConfig,
    flags: &AblationFlags,
) -> Result<TrainOutcome, PipelineError> {
    if !lm.is_frozen() {
        return Err(PipelineError::LmNotFrozen);
    }
    if config.batch_size != 1 {
        return Err(PipelineError::Config("batch_size is fixed at 1".into()));
    }
    if !(config.learning_rate > 0.0) || config.weight_decay < 0.0 {
        return Err(PipelineError::Config("learning_rate must be positive and weight_decay non-negative".into()));
    }
    let mut adapters = adapters.clone();
    adapters.set_mode(Mode::Training);
    let fixed = flags
        .fixed_moe_inputs
        .then(|| make_fixed_inputs(adapters.user.config().in_dim, config.seed));
    let options = flags.injection_options();
    let sgd = DecayedSgd {
        learning_rate: config.learning_rate,
        weight_decay: config.weight_decay,
    };
    let mut adam = Adam::new(config.learning_rate, config.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut trace = Vec::new();
    let mut stopped_early = false;
    let user_groups = adapters.user.num_parameter_groups();

    'epochs: for _ in 0..config.epochs {
        let mut stop = EarlyStopState::new(samples.len());
        for sample in samples {
            let prompt = assemble_prompt(sample, dataset, flags)?;
            let (prompt_ids, target_ids) = encode_pair(lm.vocab(), &prompt.text, &sample.explanation);
            let mut tape = Tape::new();
            let lm_vars = lm.bind(&mut tape, false);
            let mut slots = Vec::new();
            let mut bound = None;
            if flags.use_embeddings {
                let (xu, xi) = adapter_inputs(embeddings, &fixed, sample.uid, sample.iid)?;
                let uv = adapters.user.bind(&mut tape);
                let iv = adapters.item.bind(&mut tape);
                let xu = tape.constant(Tensor::row(xu));
                let xi = tape.constant(Tensor::row(xi));
                let yu = adapters.user.adapt_on_tape(&mut tape, &uv, xu, &mut rng)?;
                let yi = adapters.item.adapt_on_tape(&mut tape, &iv, xi, &mut rng)?;
                let (up, ip) = slot_positions(&prompt_ids);
                if let Some(p) = up {
                    slots.push(Slot { position: p, vector: yu });
                }
                if let Some(p) = ip {
                    slots.push(Slot { position: p, vector: yi });
                }
                bound = Some((uv, iv));
            }
            let loss = lm.nll_on_tape(&mut tape, &lm_vars, &prompt_ids, &target_ids, &slots, options)?;
            let loss_value = tape.value(loss).item();
            if let Some((uv, iv)) = bound {
                tape.backward(loss)?;
                let gu = adapters.user.collect_grads(&tape, &uv);
                let gi = adapters.item.collect_grads(&tape, &iv);
                if config.optimizer == OptimizerKind::AdamW {
                    adam.tick();
                }
                let mut step = |slot: usize, p: &mut [f64], g: &[f64]| match config.optimizer {
                    OptimizerKind::Sgd => sgd.step(p, g),
                    OptimizerKind::AdamW => adam.update(slot, p, g),
                };
                adapters.user.apply(&gu, &mut step);
                adapters.item.apply(&gi, |slot, p, g| step(user_groups + slot, p, g));
            }
            let decision = stop.update(loss_value);
            trace.push(LossRecord {
                sample_index: trace.len(),
                loss: loss_value,
                atl: stop.atl(),
            });
            if config.early_stopping && decision == StopDecision::Stop {
                stopped_early = true;
                break 'epochs;
            }
        }
    }
    adapters.set_mode(Mode::Inference);
    Ok(TrainOutcome {
        adapters,
        trace,
        stopped_early,
    })
}

/// Pretraining examples: full training prompts with the GNN vectors as slot inputs.
pub fn pretraining_examples(
    dataset: &Dataset,
    embeddings: &EmbeddingTable,
    split: Split,
) -> Result<Vec<LmExample>, PipelineError> {
    dataset
        .samples
        .iter()
        .filter(|s| s.split == split)
        .map(|s| {
            let prompt = assemble_prompt(s, dataset, &AblationFlags::full())?;
            let (user, item) = adapter_inputs(embeddings, &None, s.uid, s.iid)?;
            Ok(LmExample {
                prompt: prompt.text,
                target: s.explanation.clone(),
                slot_inputs: Some(SlotInputs { user, item }),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenerationConfig {
    pub decode: DecodeMode,
    pub max_new_tokens: usize,
    pub seed: u64,
    pub workers: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            decode: DecodeMode::Greedy,
            max_new_tokens: 40,
            seed: 0,
            workers: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedExplanation {
    pub uid: usize,
    pub iid: usize,
    pub reference: String,
    pub output: Result<String, String>,
}

/// The adapted (user, item) vectors fed to the LM for one sample.
pub fn adapted_vectors(
    adapters: &AdapterPair,
    embeddings: &EmbeddingTable,
    uid: usize,
    iid: usize,
    flags: &AblationFlags,
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>), PipelineError> {
    let fixed = flags
        .fixed_moe_inputs
        .then(|| make_fixed_inputs(adapters.user.config().in_dim, seed));
    let (xu, xi) = adapter_inputs(embeddings, &fixed, uid, iid)?;
    let mut a = adapters.clone();
    a.set_mode(Mode::Inference);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((a.user.adapt(&xu, &mut rng)?, a.item.adapt(&xi, &mut rng)?))
}

fn generate_one(
    lm: &ToyLm,
    adapters: &AdapterPair,
    embeddings: &EmbeddingTable,
    dataset: &Dataset,
    sample: &ExplanationSample,
    flags: &AblationFlags,
    config: &GenerationConfig,
    index: usize,
    fixed_seed: u64,
) -> Result<String, PipelineError> {
    let prompt = assemble_prompt(sample, dataset, flags)?;
    let mut ids = vec![crate::lm::vocab::BOS_ID];
    ids.extend(lm.vocab().tokenize(&prompt.text));
    let mut injections = Vec::new();
    if flags.use_embeddings {
        let (yu, yi) = adapted_vectors(adapters, embeddings, sample.uid, sample.iid, flags, fixed_seed)?;
        let (up, ip) = slot_positions(&ids);
        if let Some(p) = up {
            injections.push((p, yu));
        }
        if let Some(p) = ip {
            injections.push((p, yi));
        }
    }
    let seed = config.seed.wrapping_add(index as u64);
    Ok(lm.generate(
        &ids,
        &injections,
        flags.injection_options(),
        config.decode,
        config.max_new_tokens,
        seed,
    )?)
}

/// Generates one explanation per sample, in input order. Per-sample
/// failures are recorded in `output` without aborting the batch.
/// `fixed_seed` must match the training seed when `fixed_moe_inputs` is set.
pub fn generate_explanations(
    lm: &ToyLm,
    adapters: &AdapterPair,
    embeddings: &EmbeddingTable,
    dataset: &Dataset,
    samples: &[ExplanationSample],
    flags: &AblationFlags,
    config: &GenerationConfig,
    fixed_seed: u64,
) -> Vec<GeneratedExplanation> {
    let run = |(index, sample): (usize, &ExplanationSample)| GeneratedExplanation {
        uid: sample.uid,
        iid: sample.iid,
        reference: sample.explanation.clone(),
        output: generate_one(lm, adapters, embeddings, dataset, sample, flags, config, index, fixed_seed)
            .map_err(|e| e.to_string()),
    };
    let workers = config.workers.max(1).min(samples.len().max(1));
    if workers == 1 {
        return samples.iter().enumerate().map(run).collect();
    }
    let chunk = samples.len().div_ceil(workers);
    let indexed: Vec<(usize, &ExplanationSample)> = samples.iter().enumerate().collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = indexed
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().copied().map(run).collect::<Vec<_>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("generation worker panicked"))
            .collect()
    })
}

pub const LM_FILE: &str = "lm.bin";
pub const ADAPTERS_FILE: &str = "adapters.bin";
pub const EMBEDDINGS_FILE: &str = "gnn_embeddings.bin";
pub const RUN_CONFIG_FILE: &str = "run_config";
pub const LOSS_TRACE_FILE: &str = "loss_trace.csv";

const EMB_MAGIC: &[u8; 8] = b"XRECGNNE";

#[derive(Serialize, Deserialize)]
struct EmbeddingHeader {
    dim: usize,
}

pub fn save_embeddings(path: &Path, table: &EmbeddingTable) -> Result<(), PipelineError> {
    let users = Tensor::matrix(table.num_users(), table.dim(), table.user_buffer().to_vec())?;
    let items = Tensor::matrix(table.num_items(), table.dim(), table.item_buffer().to_vec())?;
    let bytes = checkpoint::encode(
        EMB_MAGIC,
        &EmbeddingHeader { dim: table.dim() },
        &[("users".to_string(), &users), ("items".to_string(), &items)],
    );
    Ok(checkpoint::write_file(path, &bytes)?)
}

pub fn load_embeddings(path: &Path) -> Result<EmbeddingTable, PipelineError> {
    let mut ck = checkpoint::decode::<EmbeddingHeader>(EMB_MAGIC, &checkpoint::read_file(path)?)?;
    let users = ck.take("users")?.into_data();
    let items = ck.take("items")?.into_data();
    Ok(EmbeddingTable::new(ck.header.dim, users, items)?)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// `key=value` lines, sorted by key.
pub fn write_run_config(path: &Path, entries: &BTreeMap<String, String>) -> Result<(), PipelineError> {
    let mut out = String::new();
    for (k, v) in entries {
        writeln!(out, "{k}={v}").expect("string write");
    }
    fs::write(path, out).map_err(io_err(path))
}

pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>, String> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected key=value", n + 1))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

pub fn read_run_config(path: &Path) -> Result<BTreeMap<String, String>, PipelineError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_key_values(&text).map_err(|reason| PipelineError::Malformed {
        path: path.display().to_string(),
        reason,
    })
}

pub fn write_loss_trace(path: &Path, trace: &[LossRecord]) -> Result<(), PipelineError> {
    let mut out = String::from("sample_index,loss,atl\n");
    for r in trace {
        writeln!(out, "{},{},{}", r.sample_index, r.loss, r.atl).expect("string write");
    }
    fs::write(path, out).map_err(io_err(path))
}

pub fn read_loss_trace(path: &Path) -> Result<Vec<LossRecord>, PipelineError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let malformed = |reason: String| PipelineError::Malformed {
        path: path.display().to_string(),
        reason,
    };
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(n, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 3 {
                return Err(malformed(format!("line {}: expected 3 fields", n + 2)));
            }
            let bad = |_| malformed(format!("line {}: bad number", n + 2));
            Ok(LossRecord {
                sample_index: f[0].parse().map_err(|_| malformed(format!("line {}: bad index", n + 2)))?,
                loss: f[1].parse().map_err(bad)?,
                atl: f[2].parse().map_err(bad)?,
            })
        })
        .collect()
}
