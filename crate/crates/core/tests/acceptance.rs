//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

use std::collections::{BTreeSet, HashMap};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use xrec::adapter::{AdapterPair, Mode};
use xrec::datagen::{generate_world, Dataset, Split, WorldConfig};
use xrec::emissions::{emissions_estimate, EmissionsParams, GpuProfile, DISCREPANCY_NOTE};
use xrec::eval::{
    aggregate, detect_numeric_anomaly, embed_sim_score, likelihood_score, render_report, stub_judge_score, usr,
    MetricReport, MetricRow,
};
use xrec::graph::{bpr_loss_on_tape, k_core_filter, train_gnn, EmbeddingTable, GnnConfig, InteractionGraph};
use xrec::lm::vocab::{BOS_ID, EOS_ID};
use xrec::lm::{pretrain_on_examples, InjectionOptions, PretrainConfig, Slot, ToyLm, ToyLmConfig, Vocab};
use xrec::numerics::{grad_check, NumericsError, OpKind, Tape, Tensor, Var};
use xrec::pipeline::{
    adapted_vectors, generate_explanations, plateau_change, pretraining_examples, train_adapter, AblationFlags,
    EarlyStopState, GenerationConfig, StopDecision, TrainConfig,
};

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
/// Pretraining epoch cap for the acceptance runs.
const LM_EPOCHS: usize = 3;
/// Desk-scale adapter step size; the 1e-4 default barely moves the adapters
/// within one pass over a 2,400-sample train split.
const ADAPTER_LR: f64 = 1e-2;

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- 1

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// `sum(y * w)` with a fixed random weight, so every output coordinate matters.
fn weighted_sum(t: &mut Tape, y: Var, seed: u64) -> Result<Var, NumericsError> {
    let shape = t.value(y).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let n: usize = shape.iter().product();
    let w = Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let wv = t.constant(w);
    let p = t.mul(y, wv)?;
    t.sum(p)
}

fn op_instance(kind: OpKind, seed: u64) -> Result<f64, NumericsError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = random_tensor(&mut rng, 3, 4, -1.5, 1.5);
    let b = random_tensor(&mut rng, 4, 2, -1.0, 1.0);
    let same = random_tensor(&mut rng, 3, 4, -1.0, 1.0);
    let row = random_tensor(&mut rng, 1, 4, -1.0, 1.0);
    let gain = random_tensor(&mut rng, 1, 4, 0.5, 1.5);
    let bias = random_tensor(&mut rng, 1, 4, -0.5, 0.5);
    let ids: Vec<usize> = (0..5).map(|_| rng.random_range(0..3)).collect();
    let targets: Vec<usize> = (0..3).map(|_| rng.random_range(0..4)).collect();
    let positive = random_tensor(&mut rng, 3, 4, 0.5, 2.0);
    let eps = 1e-3;
    let mut worst: f64 = 0.0;
    let mut run = |point: &Tensor, f: &dyn Fn(&mut Tape, Var) -> Result<Var, NumericsError>| -> Result<(), NumericsError> {
        worst = worst.max(grad_check(f, point, eps)?);
        Ok(())
    };
    match kind {
        OpKind::MatMul => {
            run(&a, &|t, x| {
                let bv = t.constant(b.clone());
                let y = t.matmul(x, bv)?;
                weighted_sum(t, y, seed)
            })?;
            run(&b, &|t, x| {
                let av = t.constant(a.clone());
                let y = t.matmul(av, x)?;
                weighted_sum(t, y, seed)
            })?;
            run(&a, &|t, x| {
                let sv = t.constant(same.clone());
                let y = t.matmul_t(x, sv)?;
                weighted_sum(t, y, seed)
            })?;
        }
        OpKind::Add => {
            run(&a, &|t, x| {
                let c = t.constant(same.clone());
                let y = t.add(x, c)?;
                weighted_sum(t, y, seed)
            })?;
            run(&row, &|t, x| {
                let c = t.constant(a.clone());
                let y = t.add(c, x)?;
                weighted_sum(t, y, seed)
            })?;
        }
        OpKind::Multiply => run(&a, &|t, x| {
            let c = t.constant(same.clone());
            let y = t.mul(x, c)?;
            weighted_sum(t, y, seed)
        })?,
        OpKind::ScalarScale => run(&a, &|t, x| {
            let y = t.scale(x, -1.7)?;
            weighted_sum(t, y, seed)
        })?,
        OpKind::RowSoftmax => {
            run(&a, &|t, x| {
                let y = t.softmax(x, false)?;
                weighted_sum(t, y, seed)
            })?;
            let square = a.data()[..9].to_vec();
            run(&Tensor::matrix(3, 3, square).unwrap(), &|t, x| {
                let y = t.softmax(x, true)?;
                weighted_sum(t, y, seed)
            })?;
        }
        OpKind::LayerNorm => {
            run(&a, &|t, x| {
                let g = t.constant(gain.clone());
                let bb = t.constant(bias.clone());
                let y = t.layer_norm(x, g, bb)?;
                weighted_sum(t, y, seed)
            })?;
            run(&gain, &|t, g| {
                let x = t.constant(a.clone());
                let bb = t.constant(bias.clone());
                let y = t.layer_norm(x, g, bb)?;
                weighted_sum(t, y, seed)
            })?;
            run(&bias, &|t, bb| {
                let x = t.constant(a.clone());
                let g = t.constant(gain.clone());
                let y = t.layer_norm(x, g, bb)?;
                weighted_sum(t, y, seed)
            })?;
        }
        OpKind::Gelu => run(&a, &|t, x| {
            let y = t.gelu(x)?;
            weighted_sum(t, y, seed)
        })?,
        OpKind::EmbeddingLookup => run(&a, &|t, x| {
            let y = t.embed(x, &ids)?;
            weighted_sum(t, y, seed)
        })?,
        OpKind::ConcatRows => run(&a, &|t, x| {
            let c = t.constant(same.clone());
            let y = t.concat_rows(&[c, x, x])?;
            weighted_sum(t, y, seed)
        })?,
        OpKind::SliceRows => run(&a, &|t, x| {
            let y = t.slice_rows(x, 1, 3)?;
            weighted_sum(t, y, seed)
        })?,
        OpKind::Mean => run(&a, &|t, x| {
            let sq = t.mul(x, x)?;
            t.mean(sq)
        })?,
        OpKind::CrossEntropyWithLogits => run(&a, &|t, x| t.cross_entropy(x, &targets))?,
        OpKind::Sigmoid => run(&a, &|t, x| {
            let y = t.sigmoid(x)?;
            weighted_sum(t, y, seed)
        })?,
        OpKind::Log => run(&positive, &|t, x| {
            let y = t.log(x)?;
            weighted_sum(t, y, seed)
        })?,
    }
    Ok(worst)
}

fn bpr_instance(seed: u64) -> Result<f64, NumericsError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u = random_tensor(&mut rng, 1, 6, -1.0, 1.0);
    let p = random_tensor(&mut rng, 1, 6, -1.0, 1.0);
    let n = random_tensor(&mut rng, 1, 6, -1.0, 1.0);
    let mut worst: f64 = 0.0;
    for which in 0..3 {
        let point = [&u, &p, &n][which].clone();
        let err = grad_check(
            |t, x| {
                let mut vs = [u.clone(), p.clone(), n.clone()].map(|v| t.constant(v));
                vs[which] = x;
                bpr_loss_on_tape(t, vs[0], vs[1], vs[2], 1e-4, 1.5)
            },
            &point,
            1e-3,
        )?;
        worst = worst.max(err);
    }
    Ok(worst)
}

fn moe_lm_instance(seed: u64) -> Result<f64, NumericsError> {
    let vocab = Vocab::build(&["say up down now"]);
    let lm = ToyLm::new(
        ToyLmConfig {
            d_lm: 8,
            n_layers: 2,
            n_heads: 2,
            max_seq_len: 16,
            vocab_size: vocab.len(),
            seed,
        },
        vocab.clone(),
    )
    .unwrap();
    let mut pair = AdapterPair::new(5, 8, seed).unwrap();
    pair.set_mode(Mode::Inference);
    let say = vocab.id("say").unwrap();
    let (up, down) = (vocab.id("up").unwrap(), vocab.id("down").unwrap());
    let prompt = [BOS_ID, xrec::lm::vocab::USER_EMBED_ID, xrec::lm::vocab::ITEM_EMBED_ID, say];
    let target = [up, down, EOS_ID];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xu = random_tensor(&mut rng, 1, 5, -1.0, 1.0);
    let xi = random_tensor(&mut rng, 1, 5, -1.0, 1.0);
    grad_check(
        |t, x| {
            let lm_vars = lm.bind(t, false);
            let uv = pair.user.bind(t);
            let iv = pair.item.bind(t);
            let xi_v = t.constant(xi.clone());
            let mut r = ChaCha8Rng::seed_from_u64(0);
            let yu = pair.user.adapt_on_tape(t, &uv, x, &mut r).map_err(|e| NumericsError::UnknownOp(e.to_string()))?;
            let yi = pair.item.adapt_on_tape(t, &iv, xi_v, &mut r).map_err(|e| NumericsError::UnknownOp(e.to_string()))?;
            let slots = [Slot { position: 1, vector: yu }, Slot { position: 2, vector: yi }];
            lm.nll_on_tape(t, &lm_vars, &prompt, &target, &slots, InjectionOptions::default())
                .map_err(|e| NumericsError::UnknownOp(e.to_string()))
        },
        &xu,
        1e-3,
    )
}

fn criterion_1() -> Outcome {
    let started = Instant::now();
    let mut worst: Vec<(String, f64)> = Vec::new();
    for kind in OpKind::ALL {
        let e = (0..10).map(|s| op_instance(kind, s)).collect::<Result<Vec<_>, _>>().map_err(|e| e.to_string())?;
        worst.push((kind.name().to_string(), e.into_iter().fold(0.0, f64::max)));
    }
    for (name, f) in [("bpr", bpr_instance as fn(u64) -> Result<f64, NumericsError>), ("moe-through-lm-nll", moe_lm_instance)] {
        let e = (0..10).map(f).collect::<Result<Vec<_>, _>>().map_err(|e| e.to_string())?;
        worst.push((name.to_string(), e.into_iter().fold(0.0, f64::max)));
    }
    let elapsed = started.elapsed();
    let (name, max) = worst.iter().cloned().fold((String::new(), 0.0), |a, b| if b.1 > a.1 { b } else { a });
    check(
        max <= 1e-4 && elapsed < Duration::from_secs(10),
        format!("{} checks, worst relative error {max:.2e} ({name}), {:.1}s", worst.len(), elapsed.as_secs_f64()),
    )
}

// ---------------------------------------------------------------- shared pipeline runs

struct SeedRun {
    seed: u64,
    dataset: Dataset,
    emb: EmbeddingTable,
    lm: ToyLm,
    init: AdapterPair,
    scores: HashMap<String, f64>,
    full_outputs: Vec<String>,
    elapsed: Duration,
}

fn train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        learning_rate: ADAPTER_LR,
        ..TrainConfig::default()
    }
}

fn run_seed(seed: u64) -> SeedRun {
    let started = Instant::now();
    let world = generate_world(&WorldConfig::new(seed)).unwrap();
    let dataset = world.dataset;
    let graph = dataset.graph(&[Split::Train]).unwrap();
    let emb = train_gnn(&graph, &GnnConfig { seed, ..GnnConfig::default() }).unwrap();
    let examples = pretraining_examples(&dataset, &emb, Split::Train).unwrap();
    let (lm, _) = pretrain_on_examples(
        &examples,
        &PretrainConfig {
            seed,
            max_epochs: LM_EPOCHS,
            ..PretrainConfig::default()
        },
    )
    .unwrap();
    let init = AdapterPair::new(emb.dim(), lm.config().d_lm, seed).unwrap();
    let train = dataset.split(Split::Train);
    let test = dataset.split(Split::Test);
    let mut scores = HashMap::new();
    let mut full_outputs = Vec::new();
    for flags in [
        AblationFlags::full(),
        AblationFlags::without_injection(),
        AblationFlags::without_embeddings(),
        AblationFlags::without_profiles(),
    ] {
        let adapters = if flags.use_embeddings {
            train_adapter(&lm, &init, &emb, &dataset, &train, &train_config(seed), &flags).unwrap().adapters
        } else {
            init.clone()
        };
        let generated = generate_explanations(&lm, &adapters, &emb, &dataset, &test, &flags, &GenerationConfig::default(), seed);
        let outputs: Vec<String> = generated.iter().map(|g| g.output.clone().unwrap_or_default()).collect();
        let mean = generated
            .iter()
            .zip(&outputs)
            .map(|(g, o)| f64::from(stub_judge_score(o, &g.reference)))
            .sum::<f64>()
            / generated.len() as f64;
        if flags == AblationFlags::full() {
            full_outputs = outputs;
        }
        scores.insert(flags.name(), mean);
    }
    let elapsed = started.elapsed();
    eprintln!(
        "seed {seed}: full {:.2}, w/o-inj {:.2}, w/o-emb {:.2}, w/o-prof {:.2} ({:.0}s)",
        scores["full"],
        scores["w/o-inj"],
        scores["w/o-emb"],
        scores["w/o-prof"],
        elapsed.as_secs_f64()
    );
    SeedRun {
        seed,
        dataset,
        emb,
        lm,
        init,
        scores,
        full_outputs,
        elapsed,
    }
}

// ---------------------------------------------------------------- 2

fn criterion_2(run: &SeedRun) -> Outcome {
    let before = run.lm.digest();
    if run.lm.recorded_digest() != Some(before.as_str()) {
        return Err("recorded digest differs from the parameters".into());
    }
    let train = run.dataset.split(Split::Train);
    let slice = &train[..60];
    let cfg = TrainConfig {
        early_stopping: false,
        ..train_config(run.seed)
    };
    let combos = AblationFlags::all_combinations();
    for flags in &combos {
        train_adapter(&run.lm, &run.init, &run.emb, &run.dataset, slice, &cfg, flags).map_err(|e| e.to_string())?;
        if run.lm.digest() != before {
            return Err(format!("digest changed under {}", flags.name()));
        }
    }
    Ok(format!("digest unchanged across {} flag combinations", combos.len()))
}

// ---------------------------------------------------------------- 3

fn criterion_3(run: &SeedRun) -> Outcome {
    let value = usr(&run.full_outputs).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let pool = ["a", "b", "c", "a b", " a", "b ", "xyz"];
    for _ in 0..1000 {
        let len = rng.random_range(1..12);
        let list: Vec<String> = (0..len).map(|_| pool.choose(&mut rng).unwrap().to_string()).collect();
        let mut sorted: Vec<&str> = list.iter().map(|s| s.trim()).collect();
        sorted.sort_unstable();
        sorted.dedup();
        let oracle = sorted.len() as f64 / list.len() as f64;
        if usr(&list).unwrap() != oracle {
            return Err(format!("usr disagrees with the set-count oracle on {list:?}"));
        }
    }
    check(
        value >= 0.99,
        format!("full-pipeline USR {value:.4} over {} test generations; oracle agrees on 1000 lists", run.full_outputs.len()),
    )
}

// ---------------------------------------------------------------- 4, 5

fn criterion_4(runs: &[SeedRun]) -> Outcome {
    let ok = runs
        .iter()
        .filter(|r| r.scores["full"] > r.scores["w/o-inj"] && r.scores["w/o-inj"] > r.scores["w/o-emb"])
        .count();
    let slowest = runs.iter().map(|r| r.elapsed).max().unwrap_or_default();
    let detail = runs
        .iter()
        .map(|r| format!("{:.1}>{:.1}>{:.1}", r.scores["full"], r.scores["w/o-inj"], r.scores["w/o-emb"]))
        .collect::<Vec<_>>()
        .join(" ");
    check(
        ok >= 4 && slowest < Duration::from_secs(600),
        format!("ordering holds in {ok}/5 seeds [{detail}], slowest seed {:.0}s", slowest.as_secs_f64()),
    )
}

fn criterion_5(runs: &[SeedRun]) -> Outcome {
    let ok = runs.iter().filter(|r| r.scores["full"] >= r.scores["w/o-prof"]).count();
    let detail = runs
        .iter()
        .map(|r| format!("{:.1}/{:.1}", r.scores["full"], r.scores["w/o-prof"]))
        .collect::<Vec<_>>()
        .join(" ");
    check(ok >= 3, format!("full >= w/o-profiles in {ok}/5 seeds [{detail}]"))
}

// ---------------------------------------------------------------- 6

fn criterion_6(run: &SeedRun) -> Outcome {
    let flags = AblationFlags::fixed_moe();
    let train = run.dataset.split(Split::Train);
    let outcome = train_adapter(&run.lm, &run.init, &run.emb, &run.dataset, &train, &train_config(run.seed), &flags)
        .map_err(|e| e.to_string())?;
    let test = run.dataset.split(Split::Test);
    let vectors: Vec<(Vec<f64>, Vec<f64>)> = test
        .iter()
        .map(|s| adapted_vectors(&outcome.adapters, &run.emb, s.uid, s.iid, &flags, run.seed))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let users_equal = vectors.iter().all(|v| v.0 == vectors[0].0);
    let items_equal = vectors.iter().all(|v| v.1 == vectors[0].1);
    let change = plateau_change(&outcome.trace);
    check(
        users_equal && items_equal && change < 0.01,
        format!(
            "{} test samples share one user and one item vector: {}; ATL plateau change {:.4} over the last {} of {} samples",
            test.len(),
            users_equal && items_equal,
            change,
            (outcome.trace.len() / 10).max(1),
            outcome.trace.len()
        ),
    )
}

// ---------------------------------------------------------------- 7

fn criterion_7() -> Outcome {
    let world = generate_world(&WorldConfig::new(0)).unwrap();
    let ds = &world.dataset;
    let graph = ds.graph(&[Split::Train]).unwrap();
    let started = Instant::now();
    let table = train_gnn(&graph, &GnnConfig::default()).map_err(|e| e.to_string())?;
    let elapsed = started.elapsed();
    let held: Vec<(usize, usize)> = ds.split(Split::Test).iter().map(|s| (s.uid, s.iid)).collect();
    let interacted: BTreeSet<(usize, usize)> = ds.samples.iter().map(|s| (s.uid, s.iid)).collect();
    let score = |u: usize, i: usize| table.user(u).iter().zip(table.item(i)).map(|(a, b)| a * b).sum::<f64>();
    let (mut wins, mut total) = (0.0, 0.0);
    for &(u, i) in &held {
        for j in 0..ds.num_items() {
            if interacted.contains(&(u, j)) {
                continue;
            }
            total += 1.0;
            let (a, b) = (score(u, i), score(u, j));
            wins += if a > b { 1.0 } else if a == b { 0.5 } else { 0.0 };
        }
    }
    let auc = wins / total;
    // negatives exclude every known interaction, not just the training edges
    let known = ds.graph(&[Split::Train, Split::Valid]).unwrap();
    let library = xrec::graph::ranking_auc(&table, &known, &held);
    check(
        auc > 0.8 && (auc - library).abs() < 1e-12 && elapsed < Duration::from_secs(60),
        format!("held-out AUC {auc:.4} (library {library:.4}), trained in {:.1}s", elapsed.as_secs_f64()),
    )
}

// ---------------------------------------------------------------- 8

fn brute_force_core(g: &InteractionGraph, k: usize) -> (BTreeSet<usize>, BTreeSet<usize>) {
    let mut users: BTreeSet<usize> = (0..g.num_users()).collect();
    let mut items: BTreeSet<usize> = (0..g.num_items()).collect();
    loop {
        let live: Vec<(usize, usize)> = g.edges().filter(|(u, i)| users.contains(u) && items.contains(i)).collect();
        let bad_u = users.iter().copied().find(|&u| live.iter().filter(|e| e.0 == u).count() < k);
        let bad_i = items.iter().copied().find(|&i| live.iter().filter(|e| e.1 == i).count() < k);
        match (bad_u, bad_i) {
            (Some(u), _) => {
                users.remove(&u);
            }
            (None, Some(i)) => {
                items.remove(&i);
            }
            (None, None) => return (users, items),
        }
    }
}

fn criterion_8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for case in 0..100 {
        let nu = rng.random_range(1..=10);
        let ni = rng.random_range(1..=20 - nu);
        let density: f64 = rng.random_range(0.1..0.9);
        let edges: Vec<(usize, usize)> = (0..nu)
            .flat_map(|u| (0..ni).map(move |i| (u, i)))
            .filter(|_| rng.random::<f64>() < density)
            .collect();
        let g = InteractionGraph::new(nu, ni, edges).unwrap();
        let k = rng.random_range(1..=4);
        let core = k_core_filter(&g, k).map_err(|e| e.to_string())?;
        let got = (
            core.user_ids.iter().copied().collect::<BTreeSet<_>>(),
            core.item_ids.iter().copied().collect::<BTreeSet<_>>(),
        );
        if got != brute_force_core(&g, k) {
            return Err(format!("case {case}: node sets differ (k={k})"));
        }
    }
    Ok("100 random graphs match the peeling oracle".into())
}

// ---------------------------------------------------------------- 9

fn criterion_9(run: &SeedRun) -> Outcome {
    let words: Vec<&String> = run.lm.vocab().tokens()[5..].iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst_sim: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.random_range(1..15);
        let text: Vec<&str> = (0..n).map(|_| words.choose(&mut rng).unwrap().as_str()).collect();
        let s = embed_sim_score(&text.join(" "), &text.join(" "), &run.lm).map_err(|e| e.to_string())?;
        worst_sim = worst_sim.max((s.f1 - 1.0).abs());
    }

    let vocab = Vocab::build(&["alpha beta gamma delta"]);
    let mut uniform = ToyLm::new(ToyLmConfig::new(vocab.len(), 1), vocab).unwrap();
    let v = uniform.config().vocab_size;
    uniform.set_constant_logits(&vec![0.0; v]).unwrap();
    let lik = likelihood_score("alpha beta", "gamma delta alpha", &uniform).map_err(|e| e.to_string())?;
    let lik_err = (lik + (v as f64).ln()).abs();

    let mut agg_err: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.random_range(1..40);
        let values: Vec<f64> = (0..n).map(|_| rng.random_range(-100.0..100.0)).collect();
        let rows: Vec<MetricRow> = values
            .iter()
            .enumerate()
            .map(|(k, v)| MetricRow {
                sample_id: k.to_string(),
                metric: "m".into(),
                value: Some(*v),
            })
            .collect();
        let s = &aggregate(&rows).map_err(|e| e.to_string())?[0];
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = (values.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64).sqrt();
        agg_err = agg_err.max((s.mean - mean).abs()).max((s.std - std).abs());
    }
    check(
        worst_sim < 1e-12 && lik_err < 1e-9 && agg_err < 1e-12,
        format!("self-similarity error {worst_sim:.1e}, uniform likelihood error {lik_err:.1e}, aggregate error {agg_err:.1e}"),
    )
}

// ---------------------------------------------------------------- 10

fn criterion_10() -> Outcome {
    let mut state = EarlyStopState::new(100);
    let mut processed = 0;
    for _ in 0..100 {
        processed += 1;
        if state.update(1.0) == StopDecision::Stop {
            break;
        }
    }
    check(
        processed == 31 && state.enabled_after() == 20 && state.patience() == 10,
        format!("constant trace stops after {processed} samples (enabled after {}, patience {})", state.enabled_after(), state.patience()),
    )
}

// ---------------------------------------------------------------- 11

fn criterion_11() -> Outcome {
    let h100 = emissions_estimate(&EmissionsParams::for_profile(GpuProfile::H100, 1.0)).map_err(|e| e.to_string())?;
    let mig = emissions_estimate(&EmissionsParams::for_profile(GpuProfile::A100Mig, 2.0)).map_err(|e| e.to_string())?;
    let report = render_report(&[MetricReport {
        variant: "full".into(),
        metrics: aggregate(&[MetricRow {
            sample_id: "0:0".into(),
            metric: "judge".into(),
            value: Some(50.0),
        }])
        .unwrap(),
        usr: 1.0,
        anomaly_count: 0,
        samples: 1,
    }]);
    let err = (h100 - 0.22 * 1.2 * 0.91).abs().max((mig - 0.22 * 1.2 * 0.65 * 2.0).abs());
    check(
        err < 1e-9 && report.contains(DISCREPANCY_NOTE),
        format!("h100 1h = {h100:.5} kg, a100_mig 2h = {mig:.5} kg, discrepancy note present"),
    )
}

// ---------------------------------------------------------------- 12

fn criterion_12() -> Outcome {
    let broken = [
        "The user would enjoy 00927/231317/0042 because of 11/2020/3",
        "8812093312764500192837465564738291",
    ];
    let fine = [
        "The user would enjoy Silver Harbor because it offers jazz and brass, matching their taste for warmth and wit.",
        "The user would enjoy this cookbook because it has clear recipes and bold flavors.",
        "This hotel suits the user: quiet rooms, friendly staff and a short walk to the beach.",
        "The user would appreciate the restaurant for its 3 course tasting menu and relaxed patio.",
        "A cozy cafe with strong espresso, fresh pastries and fast wifi, which fits the user's work habits.",
        "The user would enjoy the 2 hour hike for its views of the valley and well marked trails.",
    ];
    let missed: Vec<&str> = broken.iter().copied().filter(|s| !detect_numeric_anomaly(s)).collect();
    let false_alarms: Vec<&str> = fine.iter().copied().filter(|s| detect_numeric_anomaly(s)).collect();
    check(
        missed.is_empty() && false_alarms.is_empty(),
        format!("{} of 2 digit-run strings flagged, {} of 6 well-formed explanations flagged", 2 - missed.len(), false_alarms.len()),
    )
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(p) => Err(format!(
            "panicked: {}",
            p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default()
        )),
    }
}

fn main() -> ExitCode {
    // `cargo test` passes harness flags such as `--list`; only run on a plain invocation.
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let runs: Vec<SeedRun> = SEEDS.iter().map(|&s| run_seed(s)).collect();
    let first = &runs[0];
    let results: Vec<(&str, Outcome)> = vec![
        ("gradient suite", guarded(criterion_1)),
        ("frozen LM digest", guarded(|| criterion_2(first))),
        ("unique sentence ratio", guarded(|| criterion_3(first))),
        ("ablation ordering", guarded(|| criterion_4(&runs))),
        ("profile ablation", guarded(|| criterion_5(&runs))),
        ("fixed MoE inputs", guarded(|| criterion_6(first))),
        ("GNN ranking quality", guarded(criterion_7)),
        ("k-core oracle", guarded(criterion_8)),
        ("metric identities", guarded(|| criterion_9(first))),
        ("early stopping schedule", guarded(criterion_10)),
        ("emissions", guarded(criterion_11)),
        ("numeric anomaly detector", guarded(criterion_12)),
    ];
    let mut failed = 0;
    for (k, (name, outcome)) in results.iter().enumerate() {
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {:>2} {tag} {name}: {detail}", k + 1);
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
