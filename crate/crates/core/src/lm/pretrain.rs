use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::model::{InjectionOptions, Slot, ToyLm, ToyLmConfig};
use super::vocab::{Vocab, BOS_ID, EOS_ID, ITEM_EMBED_ID, USER_EMBED_ID};
use super::LmError;
use crate::numerics::{Tape, Tensor};
use crate::optim::Adam;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub d_lm: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub seed: u64,
    pub max_epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Stop once the mean epoch loss improves by less than this.
    pub tolerance: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        let lm = ToyLmConfig::new(5, 0);
        Self {
            d_lm: lm.d_lm,
            n_layers: lm.n_layers,
            n_heads: lm.n_heads,
            max_seq_len: lm.max_seq_len,
            seed: 0,
            max_epochs: 40,
            learning_rate: 3e-3,
            batch_size: 8,
            tolerance: 1e-3,
        }
    }
}

/// Side inputs read into the two reserved slots during pretraining.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotInputs {
    pub user: Vec<f64>,
    pub item: Vec<f64>,
}

/// One pretraining sequence: `<BOS> prompt target <EOS>`, with the loss on
/// `target <EOS>`.
#[derive(Debug, Clone, PartialEq)]
pub struct LmExample {
    pub prompt: String,
    pub target: String,
    pub slot_inputs: Option<SlotInputs>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PretrainReport {
    pub epoch_losses: Vec<f64>,
}

/// `[<BOS>] + prompt` and `target + [<EOS>]` as ids.
pub fn encode_pair(vocab: &Vocab, prompt: &str, target: &str) -> (Vec<usize>, Vec<usize>) {
    let mut p = vec![BOS_ID];
    p.extend(vocab.tokenize(prompt));
    let mut t = vocab.tokenize(target);
    t.push(EOS_ID);
    (p, t)
}

/// Positions of the user and item placeholders, if present.
pub fn slot_positions(ids: &[usize]) -> (Option<usize>, Option<usize>) {
    (
        ids.iter().position(|&i| i == USER_EMBED_ID),
        ids.iter().position(|&i| i == ITEM_EMBED_ID),
    )
}

/// Next-token pretraining on plain strings; the loss covers every token.
pub fn pretrain_lm(corpus: &[String], config: &PretrainConfig) -> Result<ToyLm, LmError> {
    let examples: Vec<LmExample> = corpus
        .iter()
        .map(|s| LmExample {
            prompt: String::new(),
            target: s.clone(),
            slot_inputs: None,
        })
        .collect();
    pretrain_on_examples(&examples, config).map(|(lm, _)| lm)
}

/// Trains a fresh LM on `examples` and freezes it.
///
/// When examples carry [`SlotInputs`], two linear readers map them into the
/// slots at every layer while the LM trains, so the LM learns to consume
/// continuous vectors at the reserved positions. The readers are discarded
/// afterwards; they are not part of the returned model.
pub fn pretrain_on_examples(examples: &[LmExample], config: &PretrainConfig) -> Result<(ToyLm, PretrainReport), LmError> {
    if examples.is_empty() {
        return Err(LmError::EmptyCorpus);
    }
    if config.batch_size == 0 || !(config.learning_rate > 0.0) {
        return Err(LmError::Config("batch_size and learning_rate must be positive".into()));
    }
    let texts: Vec<&str> = examples.iter().flat_map(|e| [e.prompt.as_str(), e.target.as_str()]).collect();
    let vocab = Vocab::build(&texts);
    let lm_config = ToyLmConfig {
        d_lm: config.d_lm,
        n_layers: config.n_layers,
        n_heads: config.n_heads,
        max_seq_len: config.max_seq_len,
        vocab_size: vocab.len(),
        seed: config.seed,
    };
    let mut lm = ToyLm::new(lm_config, vocab)?;

    let encoded: Vec<(Vec<usize>, Vec<usize>)> = examples
        .iter()
        .map(|e| encode_pair(lm.vocab(), &e.prompt, &e.target))
        .collect();
    for (p, t) in &encoded {
        if p.len() + t.len() > config.max_seq_len {
            return Err(LmError::SequenceTooLong {
                len: p.len() + t.len(),
                max: config.max_seq_len,
            });
        }
    }

    let in_dim = examples.iter().find_map(|e| e.slot_inputs.as_ref().map(|s| s.user.len()));
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9);
    let mut readers: Vec<Tensor> = match in_dim {
        Some(n) => {
            let normal = Normal::new(0.0, 1.0 / (n as f64).sqrt()).expect("finite std");
            (0..2)
                .map(|_| {
                    let data = (0..config.d_lm * n).map(|_| normal.sample(&mut rng)).collect();
                    Tensor::matrix(config.d_lm, n, data).map(|t| t.with_requires_grad(true))
                })
                .collect::<Result<_, _>>()?
        }
        None => Vec::new(),
    };

    let n_params = lm.parameters().count();
    let mut adam = Adam::new(config.learning_rate, 0.0);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut report = PretrainReport::default();

    for _epoch in 0..config.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut grads: Vec<Vec<f64>> = Vec::new();
            for &idx in batch {
                let (prompt, target) = &encoded[idx];
                let mut tape = Tape::new();
                let vars = lm.bind(&mut tape, true);
                let reader_vars: Vec<_> = readers.iter().map(|r| tape.leaf(r.clone())).collect();
                let mut slots = Vec::new();
                if let (Some(inputs), false) = (&examples[idx].slot_inputs, readers.is_empty()) {
                    let (up, ip) = slot_positions(prompt);
                    for (pos, x, r) in [(up, &inputs.user, reader_vars[0]), (ip, &inputs.item, reader_vars[1])] {
                        if let Some(position) = pos {
                            let xv = tape.constant(Tensor::row(x.clone()));
                            let vector = tape.matmul_t(xv, r)?;
                            slots.push(Slot { position, vector });
                        }
                    }
                }
                let loss = lm.nll_on_tape(&mut tape, &vars, prompt, target, &slots, InjectionOptions::default())?;
                epoch_loss += tape.value(loss).item();
                tape.backward(loss)?;
                let all = vars.vars().iter().chain(&reader_vars);
                if grads.is_empty() {
                    grads = all
                        .map(|v| tape.grad(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; tape.value(*v).len()]))
                        .collect();
                } else {
                    for (acc, v) in grads.iter_mut().zip(all) {
                        if let Some(g) = tape.grad(*v) {
                            for (a, b) in acc.iter_mut().zip(g) {
                                *a += b;
                            }
                        }
                    }
                }
            }
            let inv = 1.0 / batch.len() as f64;
            adam.tick();
            let params = lm.parameters_mut()?;
            for (slot, (p, g)) in params.iter_mut().chain(readers.iter_mut()).zip(&mut grads).enumerate() {
                g.iter_mut().for_each(|v| *v *= inv);
                adam.update(slot, p.data_mut(), g);
            }
            debug_assert_eq!(grads.len(), n_params + readers.len());
        }
        let mean = epoch_loss / examples.len() as f64;
        let improved = report.epoch_losses.last().map(|prev| prev - mean);
        report.epoch_losses.push(mean);
        if !mean.is_finite() {
            return Err(LmError::Diverged);
        }
        if matches!(improved, Some(d) if d < config.tolerance) {
            break;
        }
    }
    lm.freeze();
    Ok((lm, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::model::DecodeMode;

    fn tiny() -> PretrainConfig {
        PretrainConfig {
            d_lm: 16,
            n_layers: 1,
            n_heads: 2,
            max_seq_len: 32,
            max_epochs: 60,
            learning_rate: 1e-2,
            batch_size: 4,
            ..PretrainConfig::default()
        }
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(matches!(pretrain_lm(&[], &tiny()), Err(LmError::EmptyCorpus)));
    }

    #[test]
    fn one_sentence_corpus_is_reproduced_greedily() {
        let sentence = "the user would enjoy the quiet garden.".to_string();
        let corpus = vec![sentence; 8];
        let lm = pretrain_lm(&corpus, &tiny()).unwrap();
        assert!(lm.is_frozen());
        let out = lm
            .generate(&[BOS_ID], &[], InjectionOptions::default(), DecodeMode::Greedy, 20, 0)
            .unwrap();
        assert_eq!(out, "the user would enjoy the quiet garden.");
    }

    #[test]
    fn same_seed_same_digest() {
        let corpus = vec!["a b c".to_string(), "c b a".to_string()];
        let cfg = PretrainConfig { max_epochs: 3, ..tiny() };
        let a = pretrain_lm(&corpus, &cfg).unwrap();
        let b = pretrain_lm(&corpus, &cfg).unwrap();
        assert_eq!(a.recorded_digest(), b.recorded_digest());
        assert_eq!(a.digest(), a.recorded_digest().unwrap());
    }

    #[test]
    fn slot_inputs_are_read() {
        // the target word is decided by the sign of the user slot input
        let mut examples = Vec::new();
        for k in 0..16 {
            let s = if k % 2 == 0 { 1.0 } else { -1.0 };
            examples.push(LmExample {
                prompt: "<USER_EMBED> <ITEM_EMBED> say".into(),
                target: if s > 0.0 { "up".into() } else { "down".into() },
                slot_inputs: Some(SlotInputs {
                    user: vec![s, 0.5 * s],
                    item: vec![0.1, 0.1],
                }),
            });
        }
        let (lm, report) = pretrain_on_examples(&examples, &tiny()).unwrap();
        assert!(report.epoch_losses.last().unwrap() < &report.epoch_losses[0]);
        assert_eq!(lm.num_parameters(), lm.parameters().map(|(_, t)| t.len()).sum::<usize>());
    }
}
