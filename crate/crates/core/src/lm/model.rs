use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::vocab::{Vocab, EOS_ID};
use super::LmError;
use crate::checkpoint;
use crate::numerics::{kernels, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyLmConfig {
    pub d_lm: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl ToyLmConfig {
    /// `d_lm = 64`, 2 layers, 4 heads, context 128.
    pub fn new(vocab_size: usize, seed: u64) -> Self {
        Self {
            d_lm: 64,
            n_layers: 2,
            n_heads: 4,
            max_seq_len: 128,
            vocab_size,
            seed,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_lm / self.n_heads
    }

    pub fn validate(&self) -> Result<(), LmError> {
        if self.d_lm == 0 || self.n_heads == 0 || self.n_layers == 0 || self.max_seq_len == 0 {
            return Err(LmError::Config("sizes must be positive".into()));
        }
        if self.d_lm % self.n_heads != 0 {
            return Err(LmError::Config(format!(
                "d_lm {} is not divisible by n_heads {}",
                self.d_lm, self.n_heads
            )));
        }
        if self.vocab_size < 5 {
            return Err(LmError::Config("vocabulary must hold the reserved tokens".into()));
        }
        Ok(())
    }
}

/// How an injected vector meets the hidden state at its slot.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum InjectionMode {
    #[default]
    Replace,
    Additive,
}

/// Which block inputs receive the injection.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum InjectionDepth {
    #[default]
    AllLayers,
    /// Only the embedding layer; deeper blocks see whatever the slot evolved into.
    FirstLayer,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InjectionOptions {
    pub mode: InjectionMode,
    pub depth: InjectionDepth,
}

/// A vector placed at a reserved position.
#[derive(Debug, Clone, Copy)]
pub struct Slot {
    pub position: usize,
    pub vector: Var,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DecodeMode {
    Greedy,
    Temperature(f64),
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct HeadLayout {
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct BlockLayout {
    ln1_g: usize,
    ln1_b: usize,
    heads: Vec<HeadLayout>,
    bo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Layout {
    tok_emb: usize,
    pos_emb: usize,
    blocks: Vec<BlockLayout>,
    lnf_g: usize,
    lnf_b: usize,
    w_out: usize,
    b_out: usize,
}

/// Builds the parameter list; `init(name, rows, cols)` supplies each tensor's values.
fn build_layout<F>(config: &ToyLmConfig, mut init: F) -> (Layout, Vec<(String, Tensor)>)
where
    F: FnMut(&str, usize, usize) -> Vec<f64>,
{
    let mut params: Vec<(String, Tensor)> = Vec::new();
    let mut push = |name: String, rows: usize, cols: usize| -> usize {
        let data = init(&name, rows, cols);
        let t = if rows == 1 {
            Tensor::row(data)
        } else {
            Tensor::matrix(rows, cols, data).expect("layout shapes are consistent")
        };
        params.push((name, t));
        params.len() - 1
    };
    let (d, v, dh) = (config.d_lm, config.vocab_size, config.head_dim());
    let tok_emb = push("tok_emb".into(), v, d);
    let pos_emb = push("pos_emb".into(), config.max_seq_len, d);
    let mut blocks = Vec::new();
    for l in 0..config.n_layers {
        let ln1_g = push(format!("block{l}.ln1.gain"), 1, d);
        let ln1_b = push(format!("block{l}.ln1.bias"), 1, d);
        let heads = (0..config.n_heads)
            .map(|h| HeadLayout {
                wq: push(format!("block{l}.head{h}.wq"), d, dh),
                wk: push(format!("block{l}.head{h}.wk"), d, dh),
                wv: push(format!("block{l}.head{h}.wv"), d, dh),
                wo: push(format!("block{l}.head{h}.wo"), dh, d),
            })
            .collect();
        let bo = push(format!("block{l}.attn.bias"), 1, d);
        let ln2_g = push(format!("block{l}.ln2.gain"), 1, d);
        let ln2_b = push(format!("block{l}.ln2.bias"), 1, d);
        let w1 = push(format!("block{l}.mlp.w1"), d, 4 * d);
        let b1 = push(format!("block{l}.mlp.b1"), 1, 4 * d);
        let w2 = push(format!("block{l}.mlp.w2"), 4 * d, d);
        let b2 = push(format!("block{l}.mlp.b2"), 1, d);
        blocks.push(BlockLayout {
            ln1_g,
            ln1_b,
            heads,
            bo,
            ln2_g,
            ln2_b,
            w1,
            b1,
            w2,
            b2,
        });
    }
    let lnf_g = push("ln_f.gain".into(), 1, d);
    let lnf_b = push("ln_f.bias".into(), 1, d);
    let w_out = push("out.weight".into(), d, v);
    let b_out = push("out.bias".into(), 1, v);
    let layout = Layout {
        tok_emb,
        pos_emb,
        blocks,
        lnf_g,
        lnf_b,
        w_out,
        b_out,
    };
    (layout, params)
}

/// Decoder-only transformer with pre-norm blocks and learned positions.
///
/// Positions holding `<USER_EMBED>`/`<ITEM_EMBED>` are slots: at each block
/// input their hidden state is overwritten by a slot vector. Without an
/// explicit injection the slot vector is the LM's own embedding row for the
/// reserved token, so a plain forward pass and a pass that injects those
/// rows are the same computation.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyLm {
    config: ToyLmConfig,
    vocab: Vocab,
    names: Vec<String>,
    params: Vec<Tensor>,
    layout: Layout,
    frozen: bool,
    digest: Option<String>,
}

/// Tape handles for the LM parameters, aligned with the parameter list.
#[derive(Debug, Clone)]
pub struct LmVars(Vec<Var>);

impl LmVars {
    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl ToyLm {
    /// Random initialization under `config.seed`.
    pub fn new(config: ToyLmConfig, vocab: Vocab) -> Result<Self, LmError> {
        config.validate()?;
        if vocab.len() != config.vocab_size || !vocab.is_well_formed() {
            return Err(LmError::Config(format!(
                "vocabulary of {} tokens does not match vocab_size {}",
                vocab.len(),
                config.vocab_size
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let residual_scale = 1.0 / ((2 * config.n_layers) as f64).sqrt();
        let (layout, named) = build_layout(&config, |name, rows, cols| {
            let n = rows * cols;
            let std = if name.ends_with("gain") {
                return vec![1.0; n];
            } else if name.ends_with("bias") || name.ends_with(".b1") || name.ends_with(".b2") {
                return vec![0.0; n];
            } else if name.ends_with("_emb") {
                0.1
            } else if name.ends_with(".wo") || name.ends_with(".w2") {
                residual_scale / (rows as f64).sqrt()
            } else {
                1.0 / (rows as f64).sqrt()
            };
            let normal = Normal::new(0.0, std).expect("finite std");
            (0..n).map(|_| normal.sample(&mut rng)).collect()
        });
        let (names, params) = named.into_iter().unzip();
        Ok(Self {
            config,
            vocab,
            names,
            params,
            layout,
            frozen: false,
            digest: None,
        })
    }

    pub fn config(&self) -> &ToyLmConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Digest recorded when the model was frozen.
    pub fn recorded_digest(&self) -> Option<&str> {
        self.digest.as_deref()
    }

    /// Marks the model frozen and records its parameter digest.
    pub fn freeze(&mut self) {
        self.frozen = true;
        self.digest = Some(self.digest());
    }

    /// SHA-256 over the config, vocabulary, and every parameter's bits.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serializes"));
        for t in self.vocab.tokens() {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        for (name, t) in self.names.iter().zip(&self.params) {
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn parameters(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.params)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Mutable parameter access, refused once the model is frozen.
    pub fn parameters_mut(&mut self) -> Result<&mut [Tensor], LmError> {
        if self.frozen {
            return Err(LmError::Frozen);
        }
        Ok(&mut self.params)
    }

    /// Zeroes the output projection and sets its bias, so every position
    /// yields the logits `bias` regardless of input.
    pub fn set_constant_logits(&mut self, bias: &[f64]) -> Result<(), LmError> {
        if bias.len() != self.config.vocab_size {
            return Err(LmError::Config("bias length must equal vocab_size".into()));
        }
        let (w, b) = (self.layout.w_out, self.layout.b_out);
        let params = self.parameters_mut()?;
        params[w].data_mut().fill(0.0);
        params[b].data_mut().copy_from_slice(bias);
        Ok(())
    }

    /// The LM's own embedding row for token `id`.
    pub fn token_embedding(&self, id: usize) -> &[f64] {
        self.params[self.layout.tok_emb].row_slice(id)
    }

    /// Adds the parameters to `tape`. Trainable leaves are only produced for
    /// an unfrozen model with `trainable == true`; otherwise they are constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> LmVars {
        let grad = trainable && !self.frozen;
        LmVars(
            self.params
                .iter()
                .map(|t| tape.leaf(t.clone().with_requires_grad(grad)))
                .collect(),
        )
    }

    fn check_ids(&self, ids: &[usize]) -> Result<(), LmError> {
        if ids.is_empty() {
            return Err(LmError::EmptySequence);
        }
        if ids.len() > self.config.max_seq_len {
            return Err(LmError::SequenceTooLong {
                len: ids.len(),
                max: self.config.max_seq_len,
            });
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= self.config.vocab_size) {
            return Err(LmError::TokenOutOfRange(bad));
        }
        Ok(())
    }

    /// Final-layer-normed hidden states (`len(ids) x d_lm`).
    ///
    /// `slots` overrides the default slot vector at reserved positions. Each
    /// slot position must hold a reserved id; each vector must be `1 x d_lm`.
    pub fn hidden_on_tape(
        &self,
        tape: &mut Tape,
        vars: &LmVars,
        ids: &[usize],
        slots: &[Slot],
        options: InjectionOptions,
    ) -> Result<Var, LmError> {
        self.check_ids(ids)?;
        let v = &vars.0;
        let lay = &self.layout;
        let t_len = ids.len();

        let mut all_slots: Vec<Slot> = Vec::new();
        for s in slots {
            match ids.get(s.position) {
                Some(&id) if Vocab::is_reserved_slot(id) => {}
                _ => return Err(LmError::InjectionPosition(s.position)),
            }
            let got = tape.value(s.vector).len();
            if got != self.config.d_lm || tape.value(s.vector).rows() != 1 {
                return Err(LmError::InjectionDim {
                    expected: self.config.d_lm,
                    got,
                });
            }
            if all_slots.iter().any(|o| o.position == s.position) {
                return Err(LmError::InjectionPosition(s.position));
            }
            all_slots.push(*s);
        }
        for (p, &id) in ids.iter().enumerate() {
            if Vocab::is_reserved_slot(id) && !all_slots.iter().any(|s| s.position == p) {
                let own = tape.embed(v[lay.tok_emb], &[id])?;
                all_slots.push(Slot { position: p, vector: own });
            }
        }
        all_slots.sort_by_key(|s| s.position);

        let tok = tape.embed(v[lay.tok_emb], ids)?;
        let positions: Vec<usize> = (0..t_len).collect();
        let pos = tape.embed(v[lay.pos_emb], &positions)?;
        let mut h = tape.add(tok, pos)?;

        let scale = 1.0 / (self.config.head_dim() as f64).sqrt();
        for (l, b) in lay.blocks.iter().enumerate() {
            if l == 0 || options.depth == InjectionDepth::AllLayers {
                h = overwrite_slots(tape, h, t_len, &all_slots, options.mode)?;
            }
            let a = tape.layer_norm(h, v[b.ln1_g], v[b.ln1_b])?;
            let mut attn: Option<Var> = None;
            for head in &b.heads {
                let q = tape.matmul(a, v[head.wq])?;
                let k = tape.matmul(a, v[head.wk])?;
                let val = tape.matmul(a, v[head.wv])?;
                let s = tape.matmul_t(q, k)?;
                let s = tape.scale(s, scale)?;
                let p = tape.softmax(s, true)?;
                let o = tape.matmul(p, val)?;
                let proj = tape.matmul(o, v[head.wo])?;
                attn = Some(match attn {
                    Some(acc) => tape.add(acc, proj)?,
                    None => proj,
                });
            }
            let attn = tape.add(attn.expect("at least one head"), v[b.bo])?;
            h = tape.add(h, attn)?;
            let m = tape.layer_norm(h, v[b.ln2_g], v[b.ln2_b])?;
            let f = tape.matmul(m, v[b.w1])?;
            let f = tape.add(f, v[b.b1])?;
            let f = tape.gelu(f)?;
            let f = tape.matmul(f, v[b.w2])?;
            let f = tape.add(f, v[b.b2])?;
            h = tape.add(h, f)?;
        }
        Ok(tape.layer_norm(h, v[lay.lnf_g], v[lay.lnf_b])?)
    }

    /// Output projection of hidden rows.
    pub fn project_on_tape(&self, tape: &mut Tape, vars: &LmVars, hidden: Var) -> Result<Var, LmError> {
        let logits = tape.matmul(hidden, vars.0[self.layout.w_out])?;
        Ok(tape.add(logits, vars.0[self.layout.b_out])?)
    }

    pub fn logits_on_tape(
        &self,
        tape: &mut Tape,
        vars: &LmVars,
        ids: &[usize],
        slots: &[Slot],
        options: InjectionOptions,
    ) -> Result<Var, LmError> {
        let h = self.hidden_on_tape(tape, vars, ids, slots, options)?;
        self.project_on_tape(tape, vars, h)
    }

    /// Mean negative log-likelihood of `target` given `prompt`, over target
    /// positions only. `prompt` must be non-empty (it normally starts with `<BOS>`).
    pub fn nll_on_tape(
        &self,
        tape: &mut Tape,
        vars: &LmVars,
        prompt: &[usize],
        target: &[usize],
        slots: &[Slot],
        options: InjectionOptions,
    ) -> Result<Var, LmError> {
        if prompt.is_empty() || target.is_empty() {
            return Err(LmError::EmptySequence);
        }
        let total = prompt.len() + target.len();
        if total > self.config.max_seq_len {
            return Err(LmError::SequenceTooLong {
                len: total,
                max: self.config.max_seq_len,
            });
        }
        let mut ids = prompt.to_vec();
        ids.extend_from_slice(&target[..target.len() - 1]);
        let h = self.hidden_on_tape(tape, vars, &ids, slots, options)?;
        let rows = tape.slice_rows(h, prompt.len() - 1, ids.len())?;
        let logits = self.project_on_tape(tape, vars, rows)?;
        Ok(tape.cross_entropy(logits, target)?)
    }

    /// Plain forward pass: reserved positions hold the LM's own embeddings.
    pub fn forward(&self, ids: &[usize]) -> Result<Tensor, LmError> {
        self.forward_with(ids, &[], InjectionOptions::default())
    }

    /// Forward pass with injections. Every reserved position must be covered.
    pub fn forward_injected(&self, ids: &[usize], injections: &[(usize, Vec<f64>)]) -> Result<Tensor, LmError> {
        for (p, &id) in ids.iter().enumerate() {
            if Vocab::is_reserved_slot(id) && !injections.iter().any(|(q, _)| *q == p) {
                return Err(LmError::MissingInjection(p));
            }
        }
        self.forward_with(ids, injections, InjectionOptions::default())
    }

    /// Forward pass with partial injections and explicit options.
    pub fn forward_with(
        &self,
        ids: &[usize],
        injections: &[(usize, Vec<f64>)],
        options: InjectionOptions,
    ) -> Result<Tensor, LmError> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let slots = constant_slots(&mut tape, injections);
        let out = self.logits_on_tape(&mut tape, &vars, ids, &slots, options)?;
        Ok(tape.value(out).clone())
    }

    pub fn nll_on_target(
        &self,
        prompt: &[usize],
        injections: &[(usize, Vec<f64>)],
        target: &[usize],
        options: InjectionOptions,
    ) -> Result<f64, LmError> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let slots = constant_slots(&mut tape, injections);
        let out = self.nll_on_tape(&mut tape, &vars, prompt, target, &slots, options)?;
        Ok(tape.value(out).item())
    }

    /// Contextual final hidden states, one row per token.
    pub fn hidden_states(&self, ids: &[usize]) -> Result<Vec<Vec<f64>>, LmError> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let h = self.hidden_on_tape(&mut tape, &vars, ids, &[], InjectionOptions::default())?;
        let t = tape.value(h);
        Ok((0..t.rows()).map(|r| t.row_slice(r).to_vec()).collect())
    }

    /// Autoregressive decoding until `<EOS>`, `max_new` tokens, or a full
    /// context. Returns the generated ids (without `<EOS>`).
    pub fn generate_ids(
        &self,
        prompt: &[usize],
        injections: &[(usize, Vec<f64>)],
        options: InjectionOptions,
        mode: DecodeMode,
        max_new: usize,
        seed: u64,
    ) -> Result<Vec<usize>, LmError> {
        self.check_ids(prompt)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ids = prompt.to_vec();
        let mut out = Vec::new();
        while out.len() < max_new && ids.len() < self.config.max_seq_len {
            let mut tape = Tape::new();
            let vars = self.bind(&mut tape, false);
            let slots = constant_slots(&mut tape, injections);
            let h = self.hidden_on_tape(&mut tape, &vars, &ids, &slots, options)?;
            let last = tape.slice_rows(h, ids.len() - 1, ids.len())?;
            let logits = self.project_on_tape(&mut tape, &vars, last)?;
            let logits = tape.value(logits).data();
            let next = match mode {
                DecodeMode::Greedy => argmax(logits),
                DecodeMode::Temperature(t) => sample(logits, t, &mut rng),
            };
            if next == EOS_ID {
                break;
            }
            out.push(next);
            ids.push(next);
        }
        Ok(out)
    }

    pub fn generate(
        &self,
        prompt: &[usize],
        injections: &[(usize, Vec<f64>)],
        options: InjectionOptions,
        mode: DecodeMode,
        max_new: usize,
        seed: u64,
    ) -> Result<String, LmError> {
        let ids = self.generate_ids(prompt, injections, options, mode, max_new, seed)?;
        Ok(self.vocab.detokenize(&ids))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = LmHeader {
            config: self.config.clone(),
            vocab: self.vocab.tokens().to_vec(),
            frozen: self.frozen,
            digest: self.digest.clone(),
        };
        let tensors: Vec<(String, &Tensor)> = self.names.iter().cloned().zip(&self.params).collect();
        checkpoint::encode(LM_MAGIC, &header, &tensors)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, LmError> {
        let mut ck = checkpoint::decode::<LmHeader>(LM_MAGIC, bytes)?;
        let vocab = Vocab::from_tokens(ck.header.vocab.clone());
        let mut lm = ToyLm::new(ck.header.config.clone(), vocab)?;
        for (name, slot) in lm.names.iter().zip(lm.params.iter_mut()) {
            let t = ck.take(name)?;
            if t.shape() != slot.shape() {
                return Err(LmError::Config(format!("tensor `{name}` has shape {:?}", t.shape())));
            }
            *slot = t;
        }
        if let Some(recorded) = &ck.header.digest {
            if *recorded != lm.digest() {
                return Err(LmError::DigestMismatch);
            }
        }
        lm.frozen = ck.header.frozen;
        lm.digest = ck.header.digest;
        Ok(lm)
    }

    pub fn save(&self, path: &Path) -> Result<(), LmError> {
        Ok(checkpoint::write_file(path, &self.to_bytes())?)
    }

    pub fn load(path: &Path) -> Result<Self, LmError> {
        Self::from_bytes(&checkpoint::read_file(path)?)
    }
}

const LM_MAGIC: &[u8; 8] = b"XRECTOYL";

#[derive(Serialize, Deserialize)]
struct LmHeader {
    config: ToyLmConfig,
    vocab: Vec<String>,
    frozen: bool,
    digest: Option<String>,
}

fn constant_slots(tape: &mut Tape, injections: &[(usize, Vec<f64>)]) -> Vec<Slot> {
    injections
        .iter()
        .map(|(p, v)| Slot {
            position: *p,
            vector: tape.constant(Tensor::row(v.clone())),
        })
        .collect()
}

fn overwrite_slots(
    tape: &mut Tape,
    h: Var,
    t_len: usize,
    slots: &[Slot],
    mode: InjectionMode,
) -> Result<Var, LmError> {
    if slots.is_empty() {
        return Ok(h);
    }
    let mut parts = Vec::with_capacity(2 * slots.len() + 1);
    let mut cursor = 0;
    for s in slots {
        if s.position > cursor {
            parts.push(tape.slice_rows(h, cursor, s.position)?);
        }
        let row = match mode {
            InjectionMode::Replace => s.vector,
            InjectionMode::Additive => {
                let cur = tape.slice_rows(h, s.position, s.position + 1)?;
                tape.add(cur, s.vector)?
            }
        };
        parts.push(row);
        cursor = s.position + 1;
    }
    if cursor < t_len {
        parts.push(tape.slice_rows(h, cursor, t_len)?);
    }
    Ok(tape.concat_rows(&parts)?)
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn sample<R: rand::Rng>(logits: &[f64], temperature: f64, rng: &mut R) -> usize {
    if temperature <= 0.0 {
        return argmax(logits);
    }
    let mut p: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
    let n = p.len();
    kernels::softmax_in_place(&mut p, n);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    n - 1
}
