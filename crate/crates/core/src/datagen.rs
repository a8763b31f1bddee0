//! Synthetic recommendation world and the JSONL dataset format.
//!
//! Users and items carry sparse topic mixtures. Interactions are drawn in
//! proportion to mixture affinity, and each ground-truth explanation names
//! the dominant shared topic through its topic words. Profiles are rendered
//! from neutral word pools, so the topic behind an explanation is only
//! recoverable from the interaction graph.

use std::collections::HashSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::graph::{k_core_filter, GraphError, InteractionGraph};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid world config: {0}")]
    Config(String),
    #[error("{file}:{line}: malformed record: {reason}")]
    Malformed { file: String, line: usize, reason: String },
    #[error("{file}:{line}: missing field `{field}`")]
    MissingField { file: String, line: usize, field: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "valid" => Some(Split::Valid),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExplanationSample {
    pub uid: usize,
    pub iid: usize,
    pub explanation: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserProfile {
    pub uid: usize,
    pub profile: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ItemProfile {
    pub iid: usize,
    pub title: String,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Dataset {
    pub samples: Vec<ExplanationSample>,
    pub users: Vec<UserProfile>,
    pub items: Vec<ItemProfile>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<ExplanationSample> {
        self.samples.iter().filter(|s| s.split == split).cloned().collect()
    }

    pub fn user(&self, uid: usize) -> Option<&UserProfile> {
        self.users.iter().find(|u| u.uid == uid)
    }

    pub fn item(&self, iid: usize) -> Option<&ItemProfile> {
        self.items.iter().find(|i| i.iid == iid)
    }

    pub fn num_users(&self) -> usize {
        self.users.iter().map(|u| u.uid + 1).max().unwrap_or(0)
    }

    pub fn num_items(&self) -> usize {
        self.items.iter().map(|i| i.iid + 1).max().unwrap_or(0)
    }

    /// Interaction graph over the samples of the given splits.
    pub fn graph(&self, splits: &[Split]) -> Result<InteractionGraph, GraphError> {
        let edges = self
            .samples
            .iter()
            .filter(|s| splits.contains(&s.split))
            .map(|s| (s.uid, s.iid));
        InteractionGraph::new(self.num_users(), self.num_items(), edges)
    }

    /// Keeps only the samples inside the k-core of the full interaction
    /// graph. Ids and profiles are left untouched. Returns the number of
    /// samples dropped.
    pub fn retain_k_core(&mut self, k: usize) -> Result<usize, GraphError> {
        let all = [Split::Train, Split::Valid, Split::Test];
        let core = k_core_filter(&self.graph(&all)?, k)?;
        let users: HashSet<usize> = core.user_ids.into_iter().collect();
        let items: HashSet<usize> = core.item_ids.into_iter().collect();
        let before = self.samples.len();
        self.samples.retain(|s| users.contains(&s.uid) && items.contains(&s.iid));
        Ok(before - self.samples.len())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldConfig {
    pub num_users: usize,
    pub num_items: usize,
    pub num_topics: usize,
    pub interactions_per_user: usize,
    pub topic_vocab: Vec<Vec<String>>,
    /// Symmetric Dirichlet concentration of the topic mixtures.
    pub concentration: f64,
    pub seed: u64,
    pub train_fraction: f64,
    pub valid_fraction: f64,
    pub test_fraction: f64,
}

const TOPIC_WORDS: [[&str; 4]; 8] = [
    ["jazz", "brass", "swing", "blues"],
    ["mystery", "clues", "suspense", "detectives"],
    ["gardening", "soil", "blossoms", "seeds"],
    ["astronomy", "stars", "telescopes", "orbits"],
    ["cooking", "spices", "recipes", "flavors"],
    ["hiking", "trails", "summits", "maps"],
    ["painting", "colors", "canvases", "brushes"],
    ["chess", "tactics", "openings", "endgames"],
];

const TITLE_ADJECTIVES: [&str; 20] = [
    "silver", "quiet", "golden", "hidden", "distant", "little", "northern", "velvet", "crimson", "gentle", "ancient",
    "bright", "wandering", "hollow", "amber", "frozen", "lucky", "secret", "broken", "endless",
];

const TITLE_NOUNS: [&str; 20] = [
    "harbor", "lantern", "meadow", "compass", "orchard", "river", "tower", "window", "garden", "bridge", "island",
    "forest", "letter", "mirror", "canyon", "village", "anchor", "kettle", "ribbon", "valley",
];

const TASTE_WORDS: [&str; 20] = [
    "warmth", "humor", "detail", "comfort", "craft", "novelty", "depth", "pace", "charm", "value", "clarity",
    "energy", "nostalgia", "elegance", "variety", "calm", "wit", "polish", "surprise", "honesty",
];

const DESCRIPTION_WORDS: [&str; 16] = [
    "classic", "compact", "deluxe", "original", "special", "standard", "modern", "handmade", "limited", "popular",
    "portable", "premium", "simple", "sturdy", "vintage", "fresh",
];

impl WorldConfig {
    /// 200 users, 200 items, 8 topics, 15 interactions per user, 0.8/0.1/0.1 splits.
    pub fn new(seed: u64) -> Self {
        Self {
            num_users: 200,
            num_items: 200,
            num_topics: 8,
            interactions_per_user: 15,
            topic_vocab: default_topic_vocab(8),
            concentration: 0.05,
            seed,
            train_fraction: 0.8,
            valid_fraction: 0.1,
            test_fraction: 0.1,
        }
    }

    pub fn with_topics(mut self, num_topics: usize) -> Self {
        self.num_topics = num_topics;
        self.topic_vocab = default_topic_vocab(num_topics);
        self
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let err = |m: String| Err(DataError::Config(m));
        if self.num_users == 0 || self.num_items == 0 || self.num_topics == 0 {
            return err("users, items and topics must be positive".into());
        }
        if self.topic_vocab.len() != self.num_topics {
            return err(format!("{} topic word lists for {} topics", self.topic_vocab.len(), self.num_topics));
        }
        if let Some(k) = self.topic_vocab.iter().position(|w| w.len() < 3) {
            return err(format!("topic {k} has fewer than 3 words"));
        }
        let requested = self.num_users.saturating_mul(self.interactions_per_user);
        if requested > self.num_users * self.num_items || self.interactions_per_user > self.num_items {
            return err(format!(
                "{requested} interactions requested but only {} user-item pairs exist",
                self.num_users * self.num_items
            ));
        }
        let fractions = [self.train_fraction, self.valid_fraction, self.test_fraction];
        if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return err("split fractions must be in [0, 1] and sum to 1".into());
        }
        if !(self.concentration > 0.0) {
            return err("concentration must be positive".into());
        }
        Ok(())
    }
}

pub fn default_topic_vocab(num_topics: usize) -> Vec<Vec<String>> {
    (0..num_topics)
        .map(|k| match TOPIC_WORDS.get(k) {
            Some(words) => words.iter().map(|w| w.to_string()).collect(),
            None => (0..4).map(|j| format!("topic{k}word{j}")).collect(),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub dataset: Dataset,
    /// All interactions, across every split.
    pub graph: InteractionGraph,
    pub user_topics: Vec<Vec<f64>>,
    pub item_topics: Vec<Vec<f64>>,
}

/// Topic weight of the pair: `theta_u . phi_i`.
pub fn affinity(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Topic with the largest product weight for the pair.
pub fn dominant_topic(a: &[f64], b: &[f64]) -> usize {
    let mut best = 0;
    for k in 0..a.len() {
        if a[k] * b[k] > a[best] * b[best] {
            best = k;
        }
    }
    best
}

fn dirichlet<R: Rng>(k: usize, alpha: f64, rng: &mut R) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("positive concentration");
    loop {
        let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        if total > 0.0 && total.is_finite() {
            return draws.into_iter().map(|d| d / total).collect();
        }
    }
}

fn capitalize(w: &str) -> String {
    let mut c = w.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

pub fn render_explanation(title: &str, topic_words: &[String], taste: &[&str]) -> String {
    format!(
        "The user would enjoy {title} because it offers {} and {}, matching their taste for {} and {}.",
        topic_words[0], topic_words[1], taste[0], taste[1]
    )
}

pub fn generate_world(config: &WorldConfig) -> Result<World, DataError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let k = config.num_topics;
    let user_topics: Vec<Vec<f64>> = (0..config.num_users)
        .map(|_| dirichlet(k, config.concentration, &mut rng))
        .collect();
    let item_topics: Vec<Vec<f64>> = (0..config.num_items)
        .map(|_| dirichlet(k, config.concentration, &mut rng))
        .collect();

    let mut title_pairs: Vec<(usize, usize)> = (0..TITLE_ADJECTIVES.len())
        .flat_map(|a| (0..TITLE_NOUNS.len()).map(move |n| (a, n)))
        .collect();
    title_pairs.shuffle(&mut rng);
    let items: Vec<ItemProfile> = (0..config.num_items)
        .map(|iid| {
            let (a, n) = title_pairs[iid % title_pairs.len()];
            let round = iid / title_pairs.len();
            let mut title = format!("{} {}", capitalize(TITLE_ADJECTIVES[a]), capitalize(TITLE_NOUNS[n]));
            if round > 0 {
                title.push_str(&format!(" {}", round + 1));
            }
            let description = DESCRIPTION_WORDS
                .choose_multiple(&mut rng, 2)
                .copied()
                .collect::<Vec<_>>()
                .join(" ");
            ItemProfile { iid, title, description }
        })
        .collect();

    let mut taste_pairs: Vec<(usize, usize)> = (0..TASTE_WORDS.len())
        .flat_map(|a| (0..TASTE_WORDS.len()).filter(move |&b| b != a).map(move |b| (a, b)))
        .collect();
    taste_pairs.shuffle(&mut rng);
    let mut user_taste: Vec<Vec<&str>> = Vec::with_capacity(config.num_users);
    let users: Vec<UserProfile> = (0..config.num_users)
        .map(|uid| {
            let (a, b) = taste_pairs[uid % taste_pairs.len()];
            let third = loop {
                let c = rng.random_range(0..TASTE_WORDS.len());
                if c != a && c != b {
                    break c;
                }
            };
            let words = vec![TASTE_WORDS[a], TASTE_WORDS[b], TASTE_WORDS[third]];
            let profile = format!("{}, {}, {}", words[0], words[1], words[2]);
            user_taste.push(words);
            UserProfile { uid, profile }
        })
        .collect();

    let mut pairs = Vec::with_capacity(config.num_users * config.interactions_per_user);
    for (uid, theta) in user_topics.iter().enumerate() {
        let mut weights: Vec<f64> = item_topics.iter().map(|phi| affinity(theta, phi) + 1e-4).collect();
        for _ in 0..config.interactions_per_user {
            let total: f64 = weights.iter().sum();
            let mut u = rng.random::<f64>() * total;
            let mut pick = weights.len() - 1;
            for (i, w) in weights.iter().enumerate() {
                if *w > 0.0 && u < *w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            while weights[pick] == 0.0 {
                pick -= 1;
            }
            weights[pick] = 0.0;
            pairs.push((uid, pick));
        }
    }

    pairs.shuffle(&mut rng);
    let n = pairs.len();
    let n_train = (config.train_fraction * n as f64).round() as usize;
    let n_valid = ((config.valid_fraction * n as f64).round() as usize).min(n - n_train);
    let mut samples: Vec<ExplanationSample> = pairs
        .iter()
        .enumerate()
        .map(|(idx, &(uid, iid))| {
            let split = if idx < n_train {
                Split::Train
            } else if idx < n_train + n_valid {
                Split::Valid
            } else {
                Split::Test
            };
            let topic = dominant_topic(&user_topics[uid], &item_topics[iid]);
            let explanation = render_explanation(&items[iid].title, &config.topic_vocab[topic], &user_taste[uid]);
            ExplanationSample {
                uid,
                iid,
                explanation,
                split,
            }
        })
        .collect();
    samples.sort_by_key(|s| (s.uid, s.iid));
    let graph = InteractionGraph::new(config.num_users, config.num_items, pairs.iter().copied())?;
    Ok(World {
        dataset: Dataset { samples, users, items },
        graph,
        user_topics,
        item_topics,
    })
}

pub const SAMPLES_FILE: &str = "samples.jsonl";
pub const USERS_FILE: &str = "user_profiles.jsonl";
pub const ITEMS_FILE: &str = "item_profiles.jsonl";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn write_lines(path: &Path, lines: impl Iterator<Item = Value>) -> Result<(), DataError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for v in lines {
        writeln!(w, "{v}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn write_dataset(dir: &Path, dataset: &Dataset) -> Result<(), DataError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_lines(
        &dir.join(SAMPLES_FILE),
        dataset.samples.iter().map(|s| {
            json!({"uid": s.uid, "iid": s.iid, "explanation": s.explanation, "split": s.split.as_str()})
        }),
    )?;
    write_lines(
        &dir.join(USERS_FILE),
        dataset.users.iter().map(|u| json!({"uid": u.uid, "profile": u.profile})),
    )?;
    write_lines(
        &dir.join(ITEMS_FILE),
        dataset
            .items
            .iter()
            .map(|i| json!({"iid": i.iid, "title": i.title, "description": i.description})),
    )
}

struct Record {
    file: String,
    line: usize,
    value: serde_json::Map<String, Value>,
}

impl Record {
    fn field(&self, name: &str) -> Result<&Value, DataError> {
        self.value.get(name).ok_or_else(|| DataError::MissingField {
            file: self.file.clone(),
            line: self.line,
            field: name.to_string(),
        })
    }

    fn malformed(&self, reason: String) -> DataError {
        DataError::Malformed {
            file: self.file.clone(),
            line: self.line,
            reason,
        }
    }

    fn id(&self, name: &str) -> Result<usize, DataError> {
        let v = self.field(name)?;
        v.as_u64()
            .map(|x| x as usize)
            .ok_or_else(|| self.malformed(format!("`{name}` must be a non-negative integer")))
    }

    fn text(&self, name: &str) -> Result<String, DataError> {
        let v = self.field(name)?;
        v.as_str()
            .map(str::to_string)
            .ok_or_else(|| self.malformed(format!("`{name}` must be a string")))
    }
}

fn read_records(path: &Path) -> Result<Vec<Record>, DataError> {
    let content = fs::read_to_string(path).map_err(io_err(path))?;
    let file = path
        .file_name()
        .map(|f| f.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut out = Vec::new();
    for (idx, raw) in content.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(raw).map_err(|e| DataError::Malformed {
            file: file.to_string(),
            line,
            reason: e.to_string(),
        })?;
        let Value::Object(value) = value else {
            return Err(DataError::Malformed {
                file: file.to_string(),
                line,
                reason: "expected a JSON object".into(),
            });
        };
        out.push(Record {
            file: file.clone(),
            line,
            value,
        });
    }
    Ok(out)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset, DataError> {
    let samples = read_records(&dir.join(SAMPLES_FILE))?
        .iter()
        .map(|r| {
            let split = r.text("split")?;
            Ok(ExplanationSample {
                uid: r.id("uid")?,
                iid: r.id("iid")?,
                explanation: r.text("explanation")?,
                split: Split::parse(&split).ok_or_else(|| r.malformed(format!("unknown split `{split}`")))?,
            })
        })
        .collect::<Result<Vec<_>, DataError>>()?;
    let users = read_records(&dir.join(USERS_FILE))?
        .iter()
        .map(|r| {
            Ok(UserProfile {
                uid: r.id("uid")?,
                profile: r.text("profile")?,
            })
        })
        .collect::<Result<Vec<_>, DataError>>()?;
    let items = read_records(&dir.join(ITEMS_FILE))?
        .iter()
        .map(|r| {
            Ok(ItemProfile {
                iid: r.id("iid")?,
                title: r.text("title")?,
                description: r.text("description")?,
            })
        })
        .collect::<Result<Vec<_>, DataError>>()?;
    Ok(Dataset { samples, users, items })
}

/// Paths of the three dataset files under `dir`.
pub fn dataset_files(dir: &Path) -> [PathBuf; 3] {
    [dir.join(SAMPLES_FILE), dir.join(USERS_FILE), dir.join(ITEMS_FILE)]
}

/// Checks uniqueness of (uid, iid) pairs and profile coverage.
pub fn check_consistency(dataset: &Dataset) -> Result<(), String> {
    let mut seen = HashSet::new();
    for s in &dataset.samples {
        if !seen.insert((s.uid, s.iid)) {
            return Err(format!("duplicate pair ({}, {})", s.uid, s.iid));
        }
        if s.explanation.trim().is_empty() {
            return Err(format!("empty explanation for ({}, {})", s.uid, s.iid));
        }
        if dataset.user(s.uid).is_none() {
            return Err(format!("user {} has no profile", s.uid));
        }
        if dataset.item(s.iid).is_none() {
            return Err(format!("item {} has no profile", s.iid));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> WorldConfig {
        WorldConfig {
            num_users: 40,
            num_items: 30,
            interactions_per_user: 6,
            ..WorldConfig::new(seed)
        }
    }

    #[test]
    fn k_core_retention_leaves_degrees_at_least_k() {
        let mut ds = generate_world(&small(3)).unwrap().dataset;
        let before = ds.samples.len();
        let dropped = ds.retain_k_core(7).unwrap();
        assert_eq!(ds.samples.len() + dropped, before);
        let g = ds.graph(&[Split::Train, Split::Valid, Split::Test]).unwrap();
        for u in 0..g.num_users() {
            let d = g.user_degree(u);
            assert!(d == 0 || d >= 7, "user {u} has degree {d}");
        }
        for i in 0..g.num_items() {
            let d = g.item_degree(i);
            assert!(d == 0 || d >= 7, "item {i} has degree {d}");
        }
        // every user has exactly 6 interactions, so nothing survives
        assert!(ds.samples.is_empty());
        let mut ds = generate_world(&small(3)).unwrap().dataset;
        assert_eq!(ds.retain_k_core(1).unwrap(), 0);
    }

    #[test]
    fn default_scale() {
        let w = generate_world(&WorldConfig::new(0)).unwrap();
        assert_eq!(w.dataset.samples.len(), 3000);
        assert_eq!(w.dataset.split(Split::Test).len(), 300);
        assert_eq!(w.dataset.split(Split::Train).len(), 2400);
        check_consistency(&w.dataset).unwrap();
        let distinct: HashSet<&str> = w.dataset.samples.iter().map(|s| s.explanation.as_str()).collect();
        assert_eq!(distinct.len(), w.dataset.samples.len());
    }

    #[test]
    fn single_topic_uses_its_words() {
        let w = generate_world(&small(1).with_topics(1)).unwrap();
        assert!(w.dataset.samples.iter().all(|s| s.explanation.contains("offers jazz and brass")));
    }

    #[test]
    fn too_many_interactions() {
        let c = WorldConfig {
            interactions_per_user: 31,
            ..small(0)
        };
        assert!(matches!(generate_world(&c), Err(DataError::Config(_))));
    }

    #[test]
    fn interacting_pairs_have_higher_affinity() {
        let w = generate_world(&small(2)).unwrap();
        let (mut pos, mut all) = (0.0, 0.0);
        for (u, i) in w.graph.edges() {
            pos += affinity(&w.user_topics[u], &w.item_topics[i]);
        }
        pos /= w.graph.num_edges() as f64;
        for t in &w.user_topics {
            for p in &w.item_topics {
                all += affinity(t, p);
            }
        }
        all /= (w.user_topics.len() * w.item_topics.len()) as f64;
        assert!(pos > all, "{pos} vs {all}");
    }

    #[test]
    fn round_trip_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let w = generate_world(&small(3)).unwrap();
        write_dataset(dir.path(), &w.dataset).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), w.dataset);
        let first: Vec<Vec<u8>> = dataset_files(dir.path()).iter().map(|p| fs::read(p).unwrap()).collect();
        write_dataset(dir.path(), &generate_world(&small(3)).unwrap().dataset).unwrap();
        let second: Vec<Vec<u8>> = dataset_files(dir.path()).iter().map(|p| fs::read(p).unwrap()).collect();
        assert_eq!(first, second);
    }

    #[test]
    fn empty_and_three_sample_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &Dataset::default()).unwrap();
        assert_eq!(fs::read_to_string(dir.path().join(SAMPLES_FILE)).unwrap(), "");
        assert_eq!(load_dataset(dir.path()).unwrap(), Dataset::default());

        let ds = Dataset {
            samples: (0..3)
                .map(|k| ExplanationSample {
                    uid: k,
                    iid: 2 - k,
                    explanation: format!("because {k}"),
                    split: [Split::Train, Split::Valid, Split::Test][k],
                })
                .collect(),
            users: vec![],
            items: vec![],
        };
        write_dataset(dir.path(), &ds).unwrap();
        let text = fs::read_to_string(dir.path().join(SAMPLES_FILE)).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert_eq!(load_dataset(dir.path()).unwrap(), ds);
    }

    #[test]
    fn missing_field_names_field_and_line() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &Dataset::default()).unwrap();
        fs::write(
            dir.path().join(SAMPLES_FILE),
            "{\"uid\":0,\"iid\":1,\"explanation\":\"x\",\"split\":\"train\"}\n{\"uid\":0,\"explanation\":\"y\",\"split\":\"test\"}\n",
        )
        .unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(matches!(&err, DataError::MissingField { line: 2, field, .. } if field == "iid"));
        assert!(err.to_string().contains("iid"));

        fs::write(dir.path().join(SAMPLES_FILE), "not json\n").unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(DataError::Malformed { line: 1, .. })));
    }
}
