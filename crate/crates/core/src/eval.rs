//! Explanation metrics, the judge client, aggregation, and report rendering.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::datagen::Dataset;
use crate::emissions::DISCREPANCY_NOTE;
use crate::lm::vocab::{split_words, BOS_ID};
use crate::lm::{InjectionOptions, LmError, ToyLm};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("usr of an empty list is undefined")]
    EmptyList,
    #[error("text has no tokens: {0:?}")]
    EmptyText(String),
    #[error("metric `{0}` has no usable rows")]
    NoRows(String),
    #[error("{file}:{line}: {reason}")]
    Malformed { file: String, line: usize, reason: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Lm(#[from] LmError),
}

/// Unique trimmed strings over total strings.
pub fn usr<S: AsRef<str>>(explanations: &[S]) -> Result<f64, EvalError> {
    if explanations.is_empty() {
        return Err(EvalError::EmptyList);
    }
    let unique: HashSet<&str> = explanations.iter().map(|s| s.as_ref().trim()).collect();
    Ok(unique.len() as f64 / explanations.len() as f64)
}

/// Contextual token vectors for a text.
pub trait TokenEmbedder {
    fn embed_tokens(&self, text: &str) -> Result<Vec<Vec<f64>>, EvalError>;
}

/// Final-layer hidden states of the frozen LM, read after a `<BOS>` prefix.
impl TokenEmbedder for ToyLm {
    fn embed_tokens(&self, text: &str) -> Result<Vec<Vec<f64>>, EvalError> {
        let ids = self.vocab().tokenize(text);
        if ids.is_empty() {
            return Err(EvalError::EmptyText(text.to_string()));
        }
        let mut seq = vec![BOS_ID];
        let keep = ids.len().min(self.config().max_seq_len - 1);
        seq.extend_from_slice(&ids[..keep]);
        let mut states = self.hidden_states(&seq)?;
        states.remove(0);
        Ok(states)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrecisionRecall {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

fn greedy_side(from: &[Vec<f64>], to: &[Vec<f64>]) -> f64 {
    from.iter()
        .map(|a| to.iter().map(|b| cosine(a, b)).fold(f64::NEG_INFINITY, f64::max))
        .sum::<f64>()
        / from.len() as f64
}

/// Greedy-matching cosine precision, recall, and F1 between token vectors.
pub fn greedy_match(candidate: &[Vec<f64>], reference: &[Vec<f64>]) -> PrecisionRecall {
    let precision = greedy_side(candidate, reference);
    let recall = greedy_side(reference, candidate);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    PrecisionRecall { precision, recall, f1 }
}

pub fn embed_sim_score<E: TokenEmbedder + ?Sized>(
    candidate: &str,
    reference: &str,
    embedder: &E,
) -> Result<PrecisionRecall, EvalError> {
    let c = embedder.embed_tokens(candidate)?;
    let r = embedder.embed_tokens(reference)?;
    if c.is_empty() {
        return Err(EvalError::EmptyText(candidate.to_string()));
    }
    if r.is_empty() {
        return Err(EvalError::EmptyText(reference.to_string()));
    }
    Ok(greedy_match(&c, &r))
}

/// Mean log-probability of the reference tokens given `<BOS> candidate`.
pub fn likelihood_score(candidate: &str, reference: &str, lm: &ToyLm) -> Result<f64, EvalError> {
    let mut target = lm.vocab().tokenize(reference);
    if target.is_empty() {
        return Err(EvalError::EmptyText(reference.to_string()));
    }
    let max = lm.config().max_seq_len;
    target.truncate(max - 1);
    // keep the end of the candidate, nearest to the reference
    let cand = lm.vocab().tokenize(candidate);
    let room = max - 1 - target.len();
    let mut prompt = vec![BOS_ID];
    prompt.extend_from_slice(&cand[cand.len().saturating_sub(room)..]);
    Ok(-lm.nll_on_target(&prompt, &[], &target, InjectionOptions::default())?)
}

pub const JUDGE_SYSTEM_PROMPT: &str = "Score the given explanation against the ground truth on a scale from 0 to 100, focusing on the alignment of meanings rather than the formatting.\nProvide your score as a number and do not provide any other text.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeConfig {
    pub endpoint: String,
    pub model: String,
    pub system_prompt: String,
    pub timeout_secs: u64,
    pub max_retries: usize,
    pub concurrency: usize,
    pub stub_mode: bool,
    pub api_key: Option<String>,
}

impl Default for JudgeConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://127.0.0.1:8000/v1".to_string(),
            model: "judge".to_string(),
            system_prompt: JUDGE_SYSTEM_PROMPT.to_string(),
            timeout_secs: 60,
            max_retries: 3,
            concurrency: 4,
            stub_mode: true,
            api_key: None,
        }
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum JudgeError {
    #[error("judge unavailable after {attempts} attempts: {last_error}")]
    Unavailable { attempts: usize, last_error: String },
    #[error("judge reply has no score in [0, 100]: {raw:?}")]
    Unparseable { raw: String },
}

/// Token-level F1 of the lowercased word multisets.
pub fn token_f1(candidate: &str, reference: &str) -> f64 {
    let c = split_words(candidate);
    let r = split_words(reference);
    if c.is_empty() || r.is_empty() {
        return if c == r { 1.0 } else { 0.0 };
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &r {
        *counts.entry(t.as_str()).or_default() += 1;
    }
    let mut common = 0usize;
    for t in &c {
        if let Some(n) = counts.get_mut(t.as_str()) {
            if *n > 0 {
                *n -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let p = common as f64 / c.len() as f64;
    let rc = common as f64 / r.len() as f64;
    2.0 * p * rc / (p + rc)
}

pub fn stub_judge_score(candidate: &str, reference: &str) -> u8 {
    (100.0 * token_f1(candidate, reference)).round() as u8
}

/// First run of ASCII digits in the reply, accepted when it lies in 0..=100.
pub fn parse_judge_reply(reply: &str) -> Result<u8, JudgeError> {
    let unparseable = || JudgeError::Unparseable { raw: reply.to_string() };
    let start = reply.find(|c: char| c.is_ascii_digit()).ok_or_else(unparseable)?;
    let digits: String = reply[start..].chars().take_while(char::is_ascii_digit).collect();
    match digits.parse::<u32>() {
        Ok(v) if v <= 100 => Ok(v as u8),
        _ => Err(unparseable()),
    }
}

pub fn judge_user_message(candidate: &str, reference: &str) -> String {
    format!("Ground truth: {reference}\nExplanation: {candidate}")
}

fn judge_request(agent: &ureq::Agent, config: &JudgeConfig, candidate: &str, reference: &str) -> Result<String, String> {
    let url = format!("{}/chat/completions", config.endpoint.trim_end_matches('/'));
    let body = json!({
        "model": config.model,
        "messages": [
            {"role": "system", "content": config.system_prompt},
            {"role": "user", "content": judge_user_message(candidate, reference)},
        ],
    });
    let mut req = agent.post(&url).header("Content-Type", "application/json");
    if let Some(key) = &config.api_key {
        req = req.header("Authorization", &format!("Bearer {key}"));
    }
    let resp = req.send_json(&body).map_err(|e| e.to_string())?;
    let value: Value = resp.into_body().read_json().map_err(|e| e.to_string())?;
    value["choices"][0]["message"]["content"]
        .as_str()
        .map(str::to_string)
        .ok_or_else(|| format!("reply without choices[0].message.content: {value}"))
}

fn judge_agent(config: &JudgeConfig) -> ureq::Agent {
    ureq::Agent::config_builder()
        .timeout_global(Some(Duration::from_secs(config.timeout_secs.max(1))))
        .build()
        .into()
}

fn judge_with_agent(agent: &ureq::Agent, candidate: &str, reference: &str, config: &JudgeConfig) -> Result<u8, JudgeError> {
    if config.stub_mode {
        return Ok(stub_judge_score(candidate, reference));
    }
    let attempts = config.max_retries + 1;
    let mut last_error = String::new();
    for _ in 0..attempts {
        match judge_request(agent, config, candidate, reference) {
            Ok(reply) => return parse_judge_reply(&reply),
            Err(e) => last_error = e,
        }
    }
    Err(JudgeError::Unavailable { attempts, last_error })
}

pub fn judge_score(candidate: &str, reference: &str, config: &JudgeConfig) -> Result<u8, JudgeError> {
    judge_with_agent(&judge_agent(config), candidate, reference, config)
}

/// Scores `(candidate, reference)` pairs with at most `config.concurrency`
/// requests in flight. Results keep the input order.
pub fn judge_batch(pairs: &[(String, String)], config: &JudgeConfig) -> Vec<Result<u8, JudgeError>> {
    let agent = judge_agent(config);
    let workers = config.concurrency.max(1).min(pairs.len().max(1));
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<u8, JudgeError>>>> = Mutex::new(vec![None; pairs.len()]);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some((c, r)) = pairs.get(i) else { break };
                let score = judge_with_agent(&agent, c, r, config);
                results.lock().expect("judge results lock")[i] = Some(score);
            });
        }
    });
    results
        .into_inner()
        .expect("judge results lock")
        .into_iter()
        .map(|r| r.expect("every pair is scored"))
        .collect()
}

/// Broken-sentence detector for digit-heavy generations.
pub fn detect_numeric_anomaly(explanation: &str) -> bool {
    let mut non_ws = 0usize;
    let mut digits = 0usize;
    let mut run = 0usize;
    let mut longest = 0usize;
    for c in explanation.chars() {
        if !c.is_whitespace() {
            non_ws += 1;
        }
        if c.is_ascii_digit() {
            digits += 1;
        }
        if c.is_ascii_digit() || c == '/' {
            run += 1;
            longest = longest.max(run);
        } else {
            run = 0;
        }
    }
    (non_ws > 0 && digits * 10 >= non_ws * 3) || longest >= 12
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub sample_id: String,
    pub metric: String,
    /// `None` marks a missing judge row; it is excluded from aggregation.
    pub value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub count: usize,
    pub excluded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub variant: String,
    pub metrics: Vec<MetricSummary>,
    pub usr: f64,
    pub anomaly_count: usize,
    pub samples: usize,
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Per-metric summaries in first-seen metric order.
pub fn aggregate(rows: &[MetricRow]) -> Result<Vec<MetricSummary>, EvalError> {
    let mut order: Vec<&str> = Vec::new();
    let mut groups: HashMap<&str, (Vec<f64>, usize)> = HashMap::new();
    for r in rows {
        let entry = groups.entry(r.metric.as_str()).or_insert_with(|| {
            order.push(r.metric.as_str());
            (Vec::new(), 0)
        });
        match r.value {
            Some(v) => entry.0.push(v),
            None => entry.1 += 1,
        }
    }
    order
        .into_iter()
        .map(|m| {
            let (values, excluded) = &groups[m];
            if values.is_empty() {
                return Err(EvalError::NoRows(m.to_string()));
            }
            let (mean, std) = mean_std(values);
            Ok(MetricSummary {
                metric: m.to_string(),
                mean,
                std,
                count: values.len(),
                excluded: *excluded,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedRecord {
    pub uid: usize,
    pub iid: usize,
    pub generated: String,
}

pub const METRIC_EMBED_SIM: &str = "embed_sim_f1";
pub const METRIC_LIKELIHOOD: &str = "likelihood";
pub const METRIC_JUDGE: &str = "judge";

/// Scores generated explanations against the dataset's ground truth.
pub fn evaluate(
    variant: &str,
    generated: &[GeneratedRecord],
    dataset: &Dataset,
    lm: &ToyLm,
    judge: &JudgeConfig,
) -> Result<(MetricReport, Vec<MetricRow>), EvalError> {
    let truth: HashMap<(usize, usize), &str> = dataset
        .samples
        .iter()
        .map(|s| ((s.uid, s.iid), s.explanation.as_str()))
        .collect();
    let mut pairs = Vec::new();
    let mut ids = Vec::new();
    for g in generated {
        let reference = truth.get(&(g.uid, g.iid)).ok_or_else(|| EvalError::Malformed {
            file: "generated".into(),
            line: ids.len() + 1,
            reason: format!("no ground truth for ({}, {})", g.uid, g.iid),
        })?;
        pairs.push((g.generated.clone(), reference.to_string()));
        ids.push(format!("{}:{}", g.uid, g.iid));
    }
    let judged = judge_batch(&pairs, judge);
    let mut rows = Vec::new();
    for ((id, (cand, reference)), judged) in ids.iter().zip(&pairs).zip(judged) {
        let sim = match embed_sim_score(cand, reference, lm) {
            Ok(s) => Some(s.f1),
            Err(EvalError::EmptyText(_)) => Some(0.0),
            Err(e) => return Err(e),
        };
        let lik = likelihood_score(cand, reference, lm).ok();
        rows.push(MetricRow {
            sample_id: id.clone(),
            metric: METRIC_EMBED_SIM.into(),
            value: sim,
        });
        rows.push(MetricRow {
            sample_id: id.clone(),
            metric: METRIC_LIKELIHOOD.into(),
            value: lik,
        });
        rows.push(MetricRow {
            sample_id: id.clone(),
            metric: METRIC_JUDGE.into(),
            value: judged.ok().map(f64::from),
        });
    }
    let texts: Vec<&str> = generated.iter().map(|g| g.generated.as_str()).collect();
    let report = MetricReport {
        variant: variant.to_string(),
        metrics: aggregate(&rows)?,
        usr: usr(&texts)?,
        anomaly_count: texts.iter().filter(|t| detect_numeric_anomaly(t)).count(),
        samples: generated.len(),
    };
    Ok((report, rows))
}

fn higher_is_better(metric: &str) -> bool {
    metric != "perplexity"
}

/// Markdown table: one row per variant; mean and std per metric, then USR.
/// The best value of each column is bold (highest mean, lowest std, highest USR).
pub fn render_report(reports: &[MetricReport]) -> String {
    let mut metrics: Vec<String> = Vec::new();
    for r in reports {
        for m in &r.metrics {
            if !metrics.contains(&m.metric) {
                metrics.push(m.metric.clone());
            }
        }
    }
    let lookup = |r: &MetricReport, m: &str| r.metrics.iter().find(|s| s.metric == m).cloned();
    let best = |values: Vec<Option<f64>>, high: bool| -> Option<f64> {
        values
            .into_iter()
            .flatten()
            .fold(None, |acc: Option<f64>, v| match acc {
                Some(a) if (high && a >= v) || (!high && a <= v) => Some(a),
                _ => Some(v),
            })
    };
    let cell = |v: Option<f64>, best: Option<f64>| match v {
        Some(x) if Some(x) == best => format!("**{x:.4}**"),
        Some(x) => format!("{x:.4}"),
        None => "n/a".to_string(),
    };

    let mut out = String::new();
    out.push_str("| Variant |");
    for m in &metrics {
        write!(out, " {m} mean | {m} std |").expect("string write");
    }
    out.push_str(" USR |\n|---|");
    for _ in &metrics {
        out.push_str("---|---|");
    }
    out.push_str("---|\n");
    let mean_best: Vec<Option<f64>> = metrics
        .iter()
        .map(|m| best(reports.iter().map(|r| lookup(r, m).map(|s| s.mean)).collect(), higher_is_better(m)))
        .collect();
    let std_best: Vec<Option<f64>> = metrics
        .iter()
        .map(|m| best(reports.iter().map(|r| lookup(r, m).map(|s| s.std)).collect(), false))
        .collect();
    let usr_best = best(reports.iter().map(|r| Some(r.usr)).collect(), true);
    for r in reports {
        write!(out, "| {} |", r.variant).expect("string write");
        for (k, m) in metrics.iter().enumerate() {
            let s = lookup(r, m);
            write!(
                out,
                " {} | {} |",
                cell(s.as_ref().map(|s| s.mean), mean_best[k]),
                cell(s.as_ref().map(|s| s.std), std_best[k])
            )
            .expect("string write");
        }
        writeln!(out, " {} |", cell(Some(r.usr), usr_best)).expect("string write");
    }
    out.push('\n');
    for r in reports {
        let excluded: Vec<String> = r
            .metrics
            .iter()
            .filter(|m| m.excluded > 0)
            .map(|m| format!("{} excluded from {}", m.excluded, m.metric))
            .collect();
        write!(out, "- {}: {} samples, {} numeric anomalies", r.variant, r.samples, r.anomaly_count)
            .expect("string write");
        if !excluded.is_empty() {
            write!(out, "; {}", excluded.join(", ")).expect("string write");
        }
        out.push('\n');
    }
    out.push_str(
        "\nNotes:\n\
         - Means measure explainability (higher is better); standard deviations measure stability (lower is better).\n\
         - embed_sim and likelihood use the run's own frozen LM, so their values are comparable only between variants scored with the same LM.\n",
    );
    writeln!(out, "- {DISCREPANCY_NOTE}").expect("string write");
    out
}

pub fn write_rows_csv(path: &Path, rows: &[MetricRow]) -> Result<(), EvalError> {
    let mut out = String::from("sample_id,metric,value\n");
    for r in rows {
        let v = r.value.map(|v| v.to_string()).unwrap_or_default();
        writeln!(out, "{},{},{}", r.sample_id, r.metric, v).expect("string write");
    }
    fs::write(path, out).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn write_generated(path: &Path, records: &[GeneratedRecord]) -> Result<(), EvalError> {
    let mut out = String::new();
    for r in records {
        writeln!(out, "{}", json!({"uid": r.uid, "iid": r.iid, "generated": r.generated})).expect("string write");
    }
    fs::write(path, out).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_generated(path: &Path) -> Result<Vec<GeneratedRecord>, EvalError> {
    let file = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|source| EvalError::Io {
        path: file.clone(),
        source,
    })?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |reason: String| EvalError::Malformed {
            file: file.clone(),
            line: n + 1,
            reason,
        };
        let v: Value = serde_json::from_str(line).map_err(|e| malformed(e.to_string()))?;
        let field = |name: &str| v.get(name).ok_or_else(|| malformed(format!("missing field `{name}`")));
        let uid = field("uid")?.as_u64().ok_or_else(|| malformed("`uid` must be an integer".into()))?;
        let iid = field("iid")?.as_u64().ok_or_else(|| malformed("`iid` must be an integer".into()))?;
        let generated = field("generated")?
            .as_str()
            .ok_or_else(|| malformed("`generated` must be a string".into()))?
            .to_string();
        out.push(GeneratedRecord {
            uid: uid as usize,
            iid: iid as usize,
            generated,
        });
    }
    Ok(out)
}

/// Reads externally computed per-sample scores from a `uid,iid,score` CSV
/// (header optional), keyed by the `uid:iid` sample id used in rows.
pub fn read_external_scores(path: &Path) -> Result<HashMap<String, f64>, EvalError> {
    let file = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|source| EvalError::Io {
        path: file.clone(),
        source,
    })?;
    let mut out = HashMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (n == 0 && line.starts_with("uid")) {
            continue;
        }
        let malformed = |reason: &str| EvalError::Malformed {
            file: file.clone(),
            line: n + 1,
            reason: reason.to_string(),
        };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let [uid, iid, score] = fields[..] else {
            return Err(malformed("expected uid,iid,score"));
        };
        let uid: usize = uid.parse().map_err(|_| malformed("uid must be an integer"))?;
        let iid: usize = iid.parse().map_err(|_| malformed("iid must be an integer"))?;
        let score: f64 = score.parse().map_err(|_| malformed("score must be a number"))?;
        out.insert(format!("{uid}:{iid}"), score);
    }
    Ok(out)
}

/// Adds one row per scored sample for an externally computed metric and
/// re-aggregates. Samples without a score are recorded as missing.
pub fn add_external_metric(
    report: &mut MetricReport,
    rows: &mut Vec<MetricRow>,
    metric: &str,
    scores: &HashMap<String, f64>,
) -> Result<(), EvalError> {
    let mut seen = HashSet::new();
    let ids: Vec<String> = rows
        .iter()
        .filter(|r| seen.insert(r.sample_id.clone()))
        .map(|r| r.sample_id.clone())
        .collect();
    for id in ids {
        rows.push(MetricRow {
            value: scores.get(&id).copied(),
            sample_id: id,
            metric: metric.to_string(),
        });
    }
    report.metrics = aggregate(rows)?;
    Ok(())
}

/// `ceil(fraction * n)` distinct indices chosen by a seeded shuffle, in
/// ascending order. The small slack keeps `0.1 * 300` at 30.
pub fn seeded_subset(n: usize, fraction: f64, seed: u64) -> Vec<usize> {
    let take = ((fraction.clamp(0.0, 1.0) * n as f64) - 1e-9).ceil().max(0.0) as usize;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx.truncate(take.min(n));
    idx.sort_unstable();
    idx
}

/// Groups rows by metric for inspection; values in input order.
pub fn rows_by_metric(rows: &[MetricRow]) -> BTreeMap<String, Vec<Option<f64>>> {
    let mut out: BTreeMap<String, Vec<Option<f64>>> = BTreeMap::new();
    for r in rows {
        out.entry(r.metric.clone()).or_default().push(r.value);
    }
    out
}
