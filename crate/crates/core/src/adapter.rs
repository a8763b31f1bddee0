//! Mixture-of-experts adapter from the GNN embedding space to the LM hidden space.
//!
//! Each expert is an affine map `W_k x + b_k`; a softmax gate over
//! `G x` mixes all experts (dense gating). In training mode the gate logits
//! receive Gaussian noise scaled by `noise_factor` and the mixed output goes
//! through inverted dropout. Inference mode is a pure function of the
//! parameters and the input.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{self, CheckpointError};
use crate::numerics::{NumericsError, Tape, Tensor, Var};

#[derive(Debug, Error)]
pub enum AdapterError {
    #[error("adapter expects input of dimension {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("invalid adapter config: {0}")]
    Config(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub num_experts: usize,
    pub in_dim: usize,
    pub out_dim: usize,
    pub dropout_rate: f64,
    pub noise_factor: f64,
    pub seed: u64,
}

impl AdapterConfig {
    /// 8 experts, dropout 0.2, router noise 0.01.
    pub fn new(in_dim: usize, out_dim: usize, seed: u64) -> Self {
        Self {
            num_experts: 8,
            in_dim,
            out_dim,
            dropout_rate: 0.2,
            noise_factor: 0.01,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), AdapterError> {
        if self.num_experts == 0 || self.in_dim == 0 || self.out_dim == 0 {
            return Err(AdapterError::Config("experts and dimensions must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(AdapterError::Config(format!("dropout_rate {} not in [0, 1)", self.dropout_rate)));
        }
        if !(self.noise_factor >= 0.0) {
            return Err(AdapterError::Config(format!("noise_factor {} is negative", self.noise_factor)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Training,
    Inference,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoeAdapter {
    config: AdapterConfig,
    /// One `out_dim x in_dim` matrix per expert.
    expert_weights: Vec<Tensor>,
    /// One `1 x out_dim` row per expert.
    expert_biases: Vec<Tensor>,
    /// `num_experts x in_dim`.
    gate_weights: Tensor,
    mode: Mode,
}

/// Tape handles for one adapter's parameters.
#[derive(Debug, Clone)]
pub struct AdapterVars {
    pub expert_weights: Vec<Var>,
    pub expert_biases: Vec<Var>,
    pub gate_weights: Var,
}

impl MoeAdapter {
    /// Parameters drawn uniformly from `±1/sqrt(in_dim)` under `config.seed`.
    pub fn new(config: AdapterConfig) -> Result<Self, AdapterError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let bound = 1.0 / (config.in_dim as f64).sqrt();
        let mut uniform = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-bound..=bound)).collect() };
        let (e, i, o) = (config.num_experts, config.in_dim, config.out_dim);
        let expert_weights = (0..e)
            .map(|_| Tensor::matrix(o, i, uniform(o * i)).map(|t| t.with_requires_grad(true)))
            .collect::<Result<Vec<_>, _>>()?;
        let expert_biases = (0..e)
            .map(|_| Tensor::row(uniform(o)).with_requires_grad(true))
            .collect();
        let gate_weights = Tensor::matrix(e, i, uniform(e * i))?.with_requires_grad(true);
        Ok(Self {
            config,
            expert_weights,
            expert_biases,
            gate_weights,
            mode: Mode::Training,
        })
    }

    /// Builds an adapter from explicit parameters.
    pub fn from_parameters(
        config: AdapterConfig,
        expert_weights: Vec<Tensor>,
        expert_biases: Vec<Tensor>,
        gate_weights: Tensor,
    ) -> Result<Self, AdapterError> {
        config.validate()?;
        let (e, i, o) = (config.num_experts, config.in_dim, config.out_dim);
        let bad = expert_weights.len() != e
            || expert_biases.len() != e
            || expert_weights.iter().any(|w| w.matrix_dims() != Some((o, i)))
            || expert_biases.iter().any(|b| b.len() != o)
            || gate_weights.matrix_dims() != Some((e, i));
        if bad {
            return Err(AdapterError::Config("parameter shapes do not match the config".into()));
        }
        Ok(Self {
            config,
            expert_weights: expert_weights.into_iter().map(|t| t.with_requires_grad(true)).collect(),
            expert_biases: expert_biases
                .into_iter()
                .map(|t| Tensor::row(t.into_data()).with_requires_grad(true))
                .collect(),
            gate_weights: gate_weights.with_requires_grad(true),
            mode: Mode::Training,
        })
    }

    pub fn config(&self) -> &AdapterConfig {
        &self.config
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn expert_weights(&self) -> &[Tensor] {
        &self.expert_weights
    }

    pub fn expert_biases(&self) -> &[Tensor] {
        &self.expert_biases
    }

    pub fn gate_weights(&self) -> &Tensor {
        &self.gate_weights
    }

    pub fn all_finite(&self) -> bool {
        self.parameters().iter().all(|(_, t)| t.all_finite())
    }

    /// Named parameter tensors in a fixed order.
    pub fn parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (k, w) in self.expert_weights.iter().enumerate() {
            out.push((format!("expert.{k}.weight"), w));
        }
        for (k, b) in self.expert_biases.iter().enumerate() {
            out.push((format!("expert.{k}.bias"), b));
        }
        out.push(("gate.weight".to_string(), &self.gate_weights));
        out
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        out.extend(self.expert_weights.iter_mut());
        out.extend(self.expert_biases.iter_mut());
        out.push(&mut self.gate_weights);
        out
    }

    /// Adds the parameters to `tape` as trainable leaves.
    pub fn bind(&self, tape: &mut Tape) -> AdapterVars {
        AdapterVars {
            expert_weights: self.expert_weights.iter().map(|t| tape.leaf(t.clone())).collect(),
            expert_biases: self.expert_biases.iter().map(|t| tape.leaf(t.clone())).collect(),
            gate_weights: tape.leaf(self.gate_weights.clone()),
        }
    }

    /// Records the adapter forward pass for a `1 x in_dim` input row.
    pub fn adapt_on_tape<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        vars: &AdapterVars,
        x: Var,
        rng: &mut R,
    ) -> Result<Var, AdapterError> {
        let got = tape.value(x).len();
        if got != self.config.in_dim || tape.value(x).rows() != 1 {
            return Err(AdapterError::Dimension {
                expected: self.config.in_dim,
                got,
            });
        }
        let training = self.mode == Mode::Training;
        let mut logits = tape.matmul_t(x, vars.gate_weights)?;
        if training && self.config.noise_factor > 0.0 {
            let noise: Vec<f64> = (0..self.config.num_experts)
                .map(|_| {
                    let eps: f64 = StandardNormal.sample(rng);
                    eps * self.config.noise_factor
                })
                .collect();
            let noise = tape.constant(Tensor::row(noise));
            logits = tape.add(logits, noise)?;
        }
        let gate = tape.softmax(logits, false)?;
        let mut outputs = Vec::with_capacity(self.config.num_experts);
        for (w, b) in vars.expert_weights.iter().zip(&vars.expert_biases) {
            let proj = tape.matmul_t(x, *w)?;
            outputs.push(tape.add(proj, *b)?);
        }
        let stacked = tape.concat_rows(&outputs)?;
        let mut y = tape.matmul(gate, stacked)?;
        if training && self.config.dropout_rate > 0.0 {
            let keep = 1.0 - self.config.dropout_rate;
            let mask: Vec<f64> = (0..self.config.out_dim)
                .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                .collect();
            let mask = tape.constant(Tensor::row(mask));
            y = tape.mul(y, mask)?;
        }
        Ok(y)
    }

    /// Gate distribution for input `x` without noise.
    pub fn gate(&self, x: &[f64]) -> Result<Vec<f64>, AdapterError> {
        self.check_input(x)?;
        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::row(x.to_vec()));
        let g = tape.constant(self.gate_weights.clone());
        let logits = tape.matmul_t(xv, g)?;
        let gate = tape.softmax(logits, false)?;
        Ok(tape.value(gate).data().to_vec())
    }

    /// Standalone forward pass in the adapter's current mode.
    pub fn adapt<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> Result<Vec<f64>, AdapterError> {
        self.check_input(x)?;
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let xv = tape.constant(Tensor::row(x.to_vec()));
        let y = self.adapt_on_tape(&mut tape, &vars, xv, rng)?;
        Ok(tape.value(y).data().to_vec())
    }

    fn check_input(&self, x: &[f64]) -> Result<(), AdapterError> {
        if x.len() != self.config.in_dim {
            return Err(AdapterError::Dimension {
                expected: self.config.in_dim,
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Reads the gradients that `tape` accumulated for `vars`, in
    /// [`MoeAdapter::parameters`] order. Missing gradients read as zero.
    pub fn collect_grads(&self, tape: &Tape, vars: &AdapterVars) -> Vec<Vec<f64>> {
        vars.expert_weights
            .iter()
            .chain(&vars.expert_biases)
            .chain(std::iter::once(&vars.gate_weights))
            .map(|v| {
                tape.grad(*v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; tape.value(*v).len()])
            })
            .collect()
    }

    /// Applies `update(group_index, params, grads)` to every parameter group.
    pub fn apply<F>(&mut self, grads: &[Vec<f64>], mut update: F)
    where
        F: FnMut(usize, &mut [f64], &[f64]),
    {
        for (slot, (param, grad)) in self.parameters_mut().into_iter().zip(grads).enumerate() {
            update(slot, param.data_mut(), grad);
        }
    }

    pub fn num_parameter_groups(&self) -> usize {
        2 * self.config.num_experts + 1
    }
}

/// Random vectors that stand in for GNN embeddings: the same pair is fed
/// to the adapters for every example.
pub fn make_fixed_inputs(in_dim: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f1e5);
    let mut draw = || -> Vec<f64> {
        (0..in_dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                0.1 * z
            })
            .collect()
    };
    let user = draw();
    let item = draw();
    (user, item)
}

/// Separate adapters for the user and the item pathway.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterPair {
    pub user: MoeAdapter,
    pub item: MoeAdapter,
}

#[derive(Serialize, Deserialize)]
struct PairHeader {
    user: AdapterConfig,
    item: AdapterConfig,
}

const MAGIC: &[u8; 8] = b"XRECADPT";

impl AdapterPair {
    pub fn new(in_dim: usize, out_dim: usize, seed: u64) -> Result<Self, AdapterError> {
        Ok(Self {
            user: MoeAdapter::new(AdapterConfig::new(in_dim, out_dim, seed))?,
            item: MoeAdapter::new(AdapterConfig::new(in_dim, out_dim, seed.wrapping_add(1)))?,
        })
    }

    pub fn with_configs(user: AdapterConfig, item: AdapterConfig) -> Result<Self, AdapterError> {
        Ok(Self {
            user: MoeAdapter::new(user)?,
            item: MoeAdapter::new(item)?,
        })
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.user.set_mode(mode);
        self.item.set_mode(mode);
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = PairHeader {
            user: self.user.config.clone(),
            item: self.item.config.clone(),
        };
        let mut tensors = Vec::new();
        for (prefix, a) in [("user", &self.user), ("item", &self.item)] {
            for (name, t) in a.parameters() {
                tensors.push((format!("{prefix}.{name}"), t));
            }
        }
        checkpoint::encode(MAGIC, &header, &tensors)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, AdapterError> {
        let mut ck = checkpoint::decode::<PairHeader>(MAGIC, bytes)?;
        let (user_cfg, item_cfg) = (ck.header.user.clone(), ck.header.item.clone());
        let mut load = |prefix: &str, config: AdapterConfig| -> Result<MoeAdapter, AdapterError> {
            let e = config.num_experts;
            let weights = (0..e)
                .map(|k| ck.take(&format!("{prefix}.expert.{k}.weight")))
                .collect::<Result<Vec<_>, _>>()?;
            let biases = (0..e)
                .map(|k| ck.take(&format!("{prefix}.expert.{k}.bias")))
                .collect::<Result<Vec<_>, _>>()?;
            let gate = ck.take(&format!("{prefix}.gate.weight"))?;
            MoeAdapter::from_parameters(config, weights, biases, gate)
        };
        let user = load("user", user_cfg)?;
        let item = load("item", item_cfg)?;
        Ok(Self { user, item })
    }

    pub fn save(&self, path: &Path) -> Result<(), AdapterError> {
        Ok(checkpoint::write_file(path, &self.to_bytes())?)
    }

    pub fn load(path: &Path) -> Result<Self, AdapterError> {
        Self::from_bytes(&checkpoint::read_file(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;
    use approx::assert_abs_diff_eq;

    fn identity(n: usize) -> Tensor {
        let mut d = vec![0.0; n * n];
        for i in 0..n {
            d[i * n + i] = 1.0;
        }
        Tensor::matrix(n, n, d).unwrap()
    }

    fn cfg(experts: usize, dim: usize) -> AdapterConfig {
        AdapterConfig {
            num_experts: experts,
            ..AdapterConfig::new(dim, dim, 0)
        }
    }

    #[test]
    fn defaults() {
        let c = AdapterConfig::new(32, 64, 1);
        assert_eq!(c.num_experts, 8);
        assert_eq!(c.dropout_rate, 0.2);
        assert_eq!(c.noise_factor, 0.01);
    }

    #[test]
    fn single_identity_expert_is_identity() {
        let mut a = MoeAdapter::from_parameters(
            cfg(1, 3),
            vec![identity(3)],
            vec![Tensor::row(vec![0.0; 3])],
            Tensor::matrix(1, 3, vec![0.4, -0.1, 2.0]).unwrap(),
        )
        .unwrap();
        a.set_mode(Mode::Inference);
        let x = [0.5, -1.25, 3.0];
        let y = a.adapt(&x, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for (a, b) in x.iter().zip(&y) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn identical_experts_give_the_shared_output() {
        let w = Tensor::matrix(2, 2, vec![1.0, 2.0, -3.0, 0.5]).unwrap();
        let b = Tensor::row(vec![0.1, -0.2]);
        let mut a = MoeAdapter::from_parameters(
            cfg(2, 2),
            vec![w.clone(), w],
            vec![b.clone(), b],
            Tensor::matrix(2, 2, vec![3.0, -1.0, 0.2, 0.7]).unwrap(),
        )
        .unwrap();
        a.set_mode(Mode::Inference);
        let y = a.adapt(&[1.0, 1.0], &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_abs_diff_eq!(y[0], 3.1, epsilon = 1e-12);
        assert_abs_diff_eq!(y[1], -2.7, epsilon = 1e-12);
    }

    #[test]
    fn hand_mixture() {
        let mut a = MoeAdapter::from_parameters(
            cfg(2, 1),
            vec![Tensor::matrix(1, 1, vec![2.0]).unwrap(), Tensor::matrix(1, 1, vec![0.0]).unwrap()],
            vec![Tensor::row(vec![0.0]), Tensor::row(vec![0.0])],
            Tensor::matrix(2, 1, vec![3f64.ln(), 0.0]).unwrap(),
        )
        .unwrap();
        a.set_mode(Mode::Inference);
        let g = a.gate(&[1.0]).unwrap();
        assert_abs_diff_eq!(g[0], 0.75, epsilon = 1e-12);
        assert_abs_diff_eq!(g[1], 0.25, epsilon = 1e-12);
        let y = a.adapt(&[1.0], &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_abs_diff_eq!(y[0], 1.5, epsilon = 1e-12);
    }

    #[test]
    fn inference_is_deterministic_and_gate_sums_to_one() {
        let mut a = MoeAdapter::new(AdapterConfig::new(6, 4, 9)).unwrap();
        a.set_mode(Mode::Inference);
        let x = [0.3, -0.1, 0.9, 0.0, 0.2, -0.5];
        let y1 = a.adapt(&x, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let y2 = a.adapt(&x, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(y1, y2);
        let g = a.gate(&x).unwrap();
        assert!(g.iter().all(|v| *v >= 0.0));
        assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch() {
        let a = MoeAdapter::new(AdapterConfig::new(3, 2, 0)).unwrap();
        assert!(matches!(
            a.adapt(&[1.0], &mut ChaCha8Rng::seed_from_u64(0)),
            Err(AdapterError::Dimension { expected: 3, got: 1 })
        ));
    }

    #[test]
    fn gradients_pass_grad_check() {
        let mut a = MoeAdapter::new(AdapterConfig::new(3, 2, 5)).unwrap();
        a.set_mode(Mode::Inference);
        let x = Tensor::row(vec![0.4, -0.3, 0.8]);
        let target = Tensor::row(vec![0.7, -1.1]);
        // loss = sum((y - target)^2 weighted) through every parameter
        let loss = |t: &mut Tape, y: Var| -> Result<Var, NumericsError> {
            let tv = t.constant(target.clone());
            let neg = t.scale(tv, -1.0)?;
            let d = t.add(y, neg)?;
            let sq = t.mul(d, d)?;
            t.sum(sq)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err_x = grad_check(
            |t, xv| {
                let vars = a.bind(t);
                let y = a.adapt_on_tape(t, &vars, xv, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
                loss(t, y)
            },
            &x,
            1e-3,
        )
        .unwrap();
        assert!(err_x <= 1e-4, "{err_x}");

        let groups = a.num_parameter_groups();
        for slot in 0..groups {
            let point = a.parameters()[slot].1.clone();
            let err = grad_check(
                |t, p| {
                    let mut vars = a.bind(t);
                    let e = a.config.num_experts;
                    if slot < e {
                        vars.expert_weights[slot] = p;
                    } else if slot < 2 * e {
                        vars.expert_biases[slot - e] = p;
                    } else {
                        vars.gate_weights = p;
                    }
                    let xv = t.constant(x.clone());
                    let y = a.adapt_on_tape(t, &vars, xv, &mut rng.clone()).unwrap();
                    loss(t, y)
                },
                &point,
                1e-3,
            )
            .unwrap();
            assert!(err <= 1e-4, "group {slot}: {err}");
        }
        let _ = rng.random::<u8>();
    }

    #[test]
    fn dropout_is_unbiased_on_average() {
        let mut a = MoeAdapter::new(AdapterConfig::new(4, 8, 21)).unwrap();
        let x = [0.5, -0.2, 0.9, 0.1];
        a.set_mode(Mode::Inference);
        let reference = a.adapt(&x, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        a.set_mode(Mode::Training);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let n = 20_000;
        let mut acc = vec![0.0; 8];
        for _ in 0..n {
            let y = a.adapt(&x, &mut rng).unwrap();
            for (s, v) in acc.iter_mut().zip(y) {
                *s += v;
            }
        }
        for (s, r) in acc.iter().zip(&reference) {
            let mean = s / n as f64;
            assert!((mean - r).abs() <= 0.02 * r.abs(), "{mean} vs {r}");
        }
    }

    #[test]
    fn fixed_inputs_are_seeded() {
        assert_eq!(make_fixed_inputs(16, 4), make_fixed_inputs(16, 4));
        assert_ne!(make_fixed_inputs(16, 4), make_fixed_inputs(16, 5));
        let (u, i) = make_fixed_inputs(16, 4);
        assert_ne!(u, i);
    }

    #[test]
    fn checkpoint_round_trip() {
        let pair = AdapterPair::new(5, 3, 8).unwrap();
        let back = AdapterPair::from_bytes(&pair.to_bytes()).unwrap();
        assert_eq!(back, pair);
    }
}
