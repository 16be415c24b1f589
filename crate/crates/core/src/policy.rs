//! Slot-factorized autoregressive softmax policy.
//!
//! Each slot `s` has a weight matrix mapping its input to `SLOT_SIZES[s]`
//! logits. The input is the policy feature vector (instance features followed
//! by guidance features) followed by one-hot encodings of every previously
//! emitted tier slot. Because every quantity is a product of small softmaxes,
//! log-probabilities, gradients, entropy and KL are all exact.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trajectory::{Trajectory, SLOT_COUNT, SLOT_SIZES};

/// Width of the one-hot block each earlier slot contributes.
const PREV_WIDTH: usize = 4;

/// Floor applied to log-probabilities fed into ratios and KL terms.
pub const LOGP_FLOOR: f64 = -80.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyLayout {
    pub instance_dim: usize,
    pub guidance_dim: usize,
}

impl PolicyLayout {
    pub fn feature_dim(&self) -> usize {
        self.instance_dim + self.guidance_dim
    }

    pub fn slot_input_dim(&self, slot: usize) -> usize {
        self.feature_dim() + PREV_WIDTH * slot
    }

    pub fn param_count(&self) -> usize {
        (0..SLOT_COUNT)
            .map(|s| SLOT_SIZES[s] * self.slot_input_dim(s))
            .sum()
    }
}

/// Per-slot weight matrices, row-major `[token][input]`. Gradients share this
/// type.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    layout: PolicyLayout,
    slots: Vec<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub temperature: f64,
    pub top_k: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            temperature: 0.99,
            top_k: 100,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::config("sampler.temperature", "must be > 0"));
        }
        if self.top_k == 0 {
            return Err(Error::config("sampler.top_k", "must be >= 1"));
        }
        Ok(())
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / sum).collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

fn categorical_entropy(logits: &[f64]) -> f64 {
    let lp = log_softmax(logits);
    -lp.iter().map(|l| l.exp() * l).sum::<f64>()
}

/// Exact KL(p || q) between two softmax distributions given by logits.
pub fn categorical_kl(p_logits: &[f64], q_logits: &[f64]) -> f64 {
    let lp = log_softmax(p_logits);
    let lq = log_softmax(q_logits);
    lp.iter()
        .zip(&lq)
        .map(|(a, b)| a.exp() * (a - b))
        .sum::<f64>()
        .max(0.0)
}

impl PolicyParams {
    /// All-zero weights: the uniform policy.
    pub fn zeros(layout: PolicyLayout) -> Self {
        let slots = (0..SLOT_COUNT)
            .map(|s| vec![0.0; SLOT_SIZES[s] * layout.slot_input_dim(s)])
            .collect();
        PolicyParams { layout, slots }
    }

    pub fn layout(&self) -> PolicyLayout {
        self.layout
    }

    pub fn param_count(&self) -> usize {
        self.layout.param_count()
    }

    pub fn slot_weights(&self, slot: usize) -> &[f64] {
        &self.slots[slot]
    }

    pub fn slot_weights_mut(&mut self, slot: usize) -> &mut [f64] {
        &mut self.slots[slot]
    }

    /// Weight from input column `col` to token `token` of `slot`.
    pub fn weight(&self, slot: usize, token: usize, col: usize) -> f64 {
        self.slots[slot][token * self.layout.slot_input_dim(slot) + col]
    }

    pub fn set_weight(&mut self, slot: usize, token: usize, col: usize, value: f64) {
        let w = self.layout.slot_input_dim(slot);
        self.slots[slot][token * w + col] = value;
    }

    /// Column of the one-hot input that records `prev_slot` having emitted `token`.
    pub fn prev_col(&self, prev_slot: usize, token: usize) -> usize {
        self.layout.feature_dim() + PREV_WIDTH * prev_slot + token
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.slots.iter().flatten()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.slots.iter_mut().flatten()
    }

    /// Deep copy used as the reference or old policy.
    pub fn snapshot(&self) -> PolicyParams {
        self.clone()
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &PolicyParams) {
        debug_assert_eq!(self.layout, other.layout);
        for (a, b) in self.iter_mut().zip(other.iter()) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        self.iter_mut().for_each(|w| *w *= alpha);
    }

    pub fn max_abs(&self) -> f64 {
        self.iter().fold(0.0, |m, w| m.max(w.abs()))
    }

    pub fn max_abs_diff(&self, other: &PolicyParams) -> f64 {
        self.iter()
            .zip(other.iter())
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    fn check_features(&self, features: &[f64]) -> Result<()> {
        if features.len() != self.layout.feature_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.layout.feature_dim(),
                got: features.len(),
            });
        }
        Ok(())
    }

    /// Logits of `slot` given the features and the tokens of earlier slots.
    pub fn logits(&self, slot: usize, features: &[f64], prefix: &[usize]) -> Vec<f64> {
        debug_assert_eq!(prefix.len(), slot);
        let width = self.layout.slot_input_dim(slot);
        let d = self.layout.feature_dim();
        let w = &self.slots[slot];
        (0..SLOT_SIZES[slot])
            .map(|k| {
                let row = &w[k * width..(k + 1) * width];
                let mut z: f64 = row[..d].iter().zip(features).map(|(a, b)| a * b).sum();
                for (j, &tok) in prefix.iter().enumerate() {
                    z += row[d + PREV_WIDTH * j + tok];
                }
                z
            })
            .collect()
    }

    /// Adds `dz[k] * input` to row `k` of `slot` for every token `k`, where
    /// `input` is the slot input at the given context.
    fn accumulate(&mut self, slot: usize, features: &[f64], prefix: &[usize], dz: &[f64]) {
        let width = self.layout.slot_input_dim(slot);
        let d = self.layout.feature_dim();
        let w = &mut self.slots[slot];
        for (k, &g) in dz.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let row = &mut w[k * width..(k + 1) * width];
            for (r, x) in row[..d].iter_mut().zip(features) {
                *r += g * x;
            }
            for (j, &tok) in prefix.iter().enumerate() {
                row[d + PREV_WIDTH * j + tok] += g;
            }
        }
    }

    /// Draws one trajectory. Sampling uses the temperature-scaled, top-k
    /// truncated softmax; the recorded log-probabilities are always under the
    /// untruncated temperature-1 distribution.
    pub fn sample_with<R: Rng + ?Sized>(
        &self,
        features: &[f64],
        cfg: &SamplerConfig,
        guided: bool,
        rng: &mut R,
    ) -> Result<Trajectory> {
        self.check_features(features)?;
        let mut tokens = Vec::with_capacity(SLOT_COUNT);
        let mut logps = Vec::with_capacity(SLOT_COUNT);
        for slot in 0..SLOT_COUNT {
            let logits = self.logits(slot, features, &tokens);
            let tok = draw(&logits, cfg, rng);
            logps.push(log_softmax(&logits)[tok]);
            tokens.push(tok);
        }
        Trajectory::from_tokens(&tokens, logps, guided)
    }

    /// One trajectory from a generator seeded with `cfg.seed`.
    pub fn sample(&self, features: &[f64], cfg: &SamplerConfig) -> Result<Trajectory> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        self.sample_with(features, cfg, false, &mut rng)
    }

    fn check_traj(&self, features: &[f64], traj: &Trajectory) -> Result<[usize; SLOT_COUNT]> {
        self.check_features(features)?;
        Ok(traj.tokens())
    }

    /// Exact per-token log-probabilities under the full softmax and their sum.
    pub fn log_prob(&self, features: &[f64], traj: &Trajectory) -> Result<(Vec<f64>, f64)> {
        let tokens = self.check_traj(features, traj)?;
        let per: Vec<f64> = (0..SLOT_COUNT)
            .map(|s| log_softmax(&self.logits(s, features, &tokens[..s]))[tokens[s]])
            .collect();
        let sum = per.iter().sum();
        Ok((per, sum))
    }

    /// Gradient of the trajectory log-probability with respect to all weights.
    pub fn grad_log_prob(&self, features: &[f64], traj: &Trajectory) -> Result<PolicyParams> {
        let mut grad = PolicyParams::zeros(self.layout);
        let coef = [1.0; SLOT_COUNT];
        self.accumulate_token_grads(features, traj, &coef, &mut grad)?;
        Ok(grad)
    }

    /// `grad += sum_t coef[t] * d log pi(token_t | context_t)`.
    pub fn accumulate_token_grads(
        &self,
        features: &[f64],
        traj: &Trajectory,
        coef: &[f64; SLOT_COUNT],
        grad: &mut PolicyParams,
    ) -> Result<()> {
        let tokens = self.check_traj(features, traj)?;
        for s in 0..SLOT_COUNT {
            if coef[s] == 0.0 {
                continue;
            }
            let prefix = &tokens[..s];
            let p = softmax(&self.logits(s, features, prefix));
            let dz: Vec<f64> = p
                .iter()
                .enumerate()
                .map(|(k, pk)| coef[s] * (f64::from(u8::from(k == tokens[s])) - pk))
                .collect();
            grad.accumulate(s, features, prefix, &dz);
        }
        Ok(())
    }

    /// Sum over the trajectory's visited contexts of KL(self || reference).
    pub fn kl_at_visited(&self, reference: &PolicyParams, features: &[f64], traj: &Trajectory) -> Result<f64> {
        let tokens = self.check_traj(features, traj)?;
        Ok((0..SLOT_COUNT)
            .map(|s| {
                let prefix = &tokens[..s];
                categorical_kl(
                    &self.logits(s, features, prefix),
                    &reference.logits(s, features, prefix),
                )
            })
            .sum())
    }

    /// `grad += scale * d/dtheta [sum over visited contexts of KL(self || reference)]`.
    pub fn accumulate_kl_grad(
        &self,
        reference: &PolicyParams,
        features: &[f64],
        traj: &Trajectory,
        scale: f64,
        grad: &mut PolicyParams,
    ) -> Result<()> {
        let tokens = self.check_traj(features, traj)?;
        for s in 0..SLOT_COUNT {
            let prefix = &tokens[..s];
            let lp = log_softmax(&self.logits(s, features, prefix));
            let lq = log_softmax(&reference.logits(s, features, prefix));
            let kl: f64 = lp.iter().zip(&lq).map(|(a, b)| a.exp() * (a - b)).sum();
            // dKL/dz_k = p_k (log p_k - log q_k - KL)
            let dz: Vec<f64> = lp
                .iter()
                .zip(&lq)
                .map(|(a, b)| scale * a.exp() * (a - b - kl))
                .collect();
            grad.accumulate(s, features, prefix, &dz);
        }
        Ok(())
    }

    /// Joint entropy of the trajectory distribution, computed by ancestral
    /// enumeration over all slot prefixes.
    pub fn entropy(&self, features: &[f64]) -> Result<f64> {
        self.check_features(features)?;
        let mut prefix = Vec::with_capacity(SLOT_COUNT);
        Ok(self.entropy_from(features, &mut prefix))
    }

    fn entropy_from(&self, features: &[f64], prefix: &mut Vec<usize>) -> f64 {
        let slot = prefix.len();
        if slot == SLOT_COUNT {
            return 0.0;
        }
        let logits = self.logits(slot, features, prefix);
        let mut h = categorical_entropy(&logits);
        if slot + 1 < SLOT_COUNT {
            for (tok, p) in softmax(&logits).into_iter().enumerate() {
                if p == 0.0 {
                    continue;
                }
                prefix.push(tok);
                h += p * self.entropy_from(features, prefix);
                prefix.pop();
            }
        }
        h
    }

    /// Every complete token sequence with its exact probability.
    pub fn enumerate(&self, features: &[f64]) -> Result<Vec<([usize; SLOT_COUNT], f64)>> {
        self.check_features(features)?;
        let mut out = Vec::with_capacity(SLOT_SIZES.iter().product());
        let mut prefix = Vec::with_capacity(SLOT_COUNT);
        self.enumerate_from(features, &mut prefix, 1.0, &mut out);
        Ok(out)
    }

    fn enumerate_from(
        &self,
        features: &[f64],
        prefix: &mut Vec<usize>,
        mass: f64,
        out: &mut Vec<([usize; SLOT_COUNT], f64)>,
    ) {
        let slot = prefix.len();
        if slot == SLOT_COUNT {
            let mut toks = [0; SLOT_COUNT];
            toks.copy_from_slice(prefix);
            out.push((toks, mass));
            return;
        }
        let p = softmax(&self.logits(slot, features, prefix));
        for (tok, pk) in p.into_iter().enumerate() {
            prefix.push(tok);
            self.enumerate_from(features, prefix, mass * pk, out);
            prefix.pop();
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            config_hash: None,
            step: None,
            params: self.clone(),
        }
    }
}

fn draw<R: Rng + ?Sized>(logits: &[f64], cfg: &SamplerConfig, rng: &mut R) -> usize {
    let k = cfg.top_k.min(logits.len());
    let mut order: Vec<usize> = (0..logits.len()).collect();
    // stable: ties keep the lower index first
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]));
    let keep = &order[..k];
    if k == 1 {
        return keep[0];
    }
    let scaled: Vec<f64> = keep.iter().map(|&i| logits[i] / cfg.temperature).collect();
    let p = softmax(&scaled);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (&i, pi) in keep.iter().zip(&p) {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    keep[k - 1]
}

pub const CHECKPOINT_FORMAT: &str = "agrl-policy";
pub const CHECKPOINT_VERSION: u32 = 1;

/// On-disk policy: a version header followed by the weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    /// Hash of the experiment config that produced the weights, if any.
    pub config_hash: Option<String>,
    /// Training step the weights were taken at.
    #[serde(default)]
    pub step: Option<usize>,
    pub params: PolicyParams,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unknown format `{}`", ck.format)));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", ck.version)));
        }
        let layout = ck.params.layout;
        let shapes_ok = ck.params.slots.len() == SLOT_COUNT
            && (0..SLOT_COUNT).all(|s| ck.params.slots[s].len() == SLOT_SIZES[s] * layout.slot_input_dim(s));
        if !shapes_ok {
            return Err(Error::Checkpoint("weight shapes do not match the layout".into()));
        }
        if ck.params.iter().any(|w| !w.is_finite()) {
            return Err(Error::Checkpoint("non-finite weight".into()));
        }
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
