//! Interval, allocation and value heads on top of the encoder, plus the
//! [`Agent`] that owns encoder and heads together.

use std::f64::consts::{E, PI};

use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

pub const SIGMA_MIN: f64 = 1e-3;
pub const SIGMA_MAX: f64 = 1.0;
/// Starting bias of the log-std head, inside the clamp range so the head
/// receives gradient from the first update.
pub const LOG_STD_INIT: f64 = -1.0;
const NORMALIZE_FLOOR: f64 = 1e-12;

/// Numeric head outputs for one state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyOutput {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
    pub values: Vec<f64>,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledAction {
    pub interval_index: usize,
    pub interval: usize,
    /// Pre-squash Gaussian sample.
    pub raw: Vec<f64>,
    pub weights: Vec<f64>,
    pub log_prob: f64,
}

/// `w_i = (tanh(a_i) + 1) / 2`, L1-normalized; uniform when all mass vanishes.
pub fn squash_normalize(raw: &[f64]) -> Vec<f64> {
    let shifted: Vec<f64> = raw.iter().map(|a| (a.tanh() + 1.0) / 2.0).collect();
    let total: f64 = shifted.iter().sum();
    if total < NORMALIZE_FLOOR {
        return vec![1.0 / raw.len() as f64; raw.len()];
    }
    shifted.iter().map(|s| s / total).collect()
}

/// Diagonal Gaussian log-density.
pub fn gaussian_log_density(x: &[f64], mean: &[f64], log_std: &[f64]) -> f64 {
    x.iter()
        .zip(mean)
        .zip(log_std)
        .map(|((x, m), ls)| {
            let z = (x - m) / ls.exp();
            -0.5 * z * z - ls - 0.5 * (2.0 * PI).ln()
        })
        .sum()
}

/// `log p(l) + log N(raw; mean, diag sigma^2)`.
pub fn joint_log_prob(out: &PolicyOutput, interval_index: usize, raw: &[f64]) -> f64 {
    out.probs[interval_index].max(crate::tensor::LOG_FLOOR).ln()
        + gaussian_log_density(raw, &out.mean, &out.log_std)
}

pub fn interval_entropy(probs: &[f64]) -> f64 {
    -probs
        .iter()
        .filter(|p| **p > 0.0)
        .map(|p| p * p.ln())
        .sum::<f64>()
}

pub fn gaussian_entropy(log_std: &[f64]) -> f64 {
    log_std
        .iter()
        .map(|ls| ls + 0.5 * (2.0 * PI * E).ln())
        .sum()
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding left u above the running total; take the last nonzero entry
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(probs.len() - 1)
}

/// How an action is chosen from the head outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActMode {
    Sample,
    /// Argmax interval (ties to the shortest) and the mean allocation.
    Greedy,
}

/// Draw (or pick greedily) a joint action. `forced` overrides the interval
/// choice with a fixed index while keeping the allocation rule.
pub fn select_action<R: Rng + ?Sized>(
    out: &PolicyOutput,
    intervals: &[usize],
    mode: ActMode,
    forced: Option<usize>,
    rng: &mut R,
) -> SampledAction {
    let interval_index = forced.unwrap_or_else(|| match mode {
        ActMode::Sample => sample_categorical(&out.probs, rng),
        ActMode::Greedy => argmax(&out.probs),
    });
    let raw: Vec<f64> = match mode {
        ActMode::Sample => out
            .mean
            .iter()
            .zip(&out.log_std)
            .map(|(m, ls)| m + ls.exp() * rng.sample::<f64, _>(StandardNormal))
            .collect(),
        ActMode::Greedy => out.mean.clone(),
    };
    let weights = squash_normalize(&raw);
    let log_prob = joint_log_prob(out, interval_index, &raw);
    SampledAction {
        interval_index,
        interval: intervals[interval_index],
        raw,
        weights,
        log_prob,
    }
}

/// Graph handles for a batch of `B` states over `N` assets and `L` intervals.
#[derive(Debug, Clone, Copy)]
pub struct PolicyVars {
    /// `[B, L]`
    pub logits: Var,
    pub probs: Var,
    pub log_probs: Var,
    /// `[B, N]`
    pub mean: Var,
    pub log_std: Var,
    /// `[B, L]`
    pub values: Var,
    /// `[B]`
    pub value: Var,
}

#[derive(Debug, Clone)]
pub struct PolicyHeads {
    n_intervals: usize,
    interval_w: ParamId,
    interval_b: ParamId,
    mean_w: ParamId,
    mean_b: ParamId,
    log_std_w: ParamId,
    log_std_b: ParamId,
    value_w: ParamId,
    value_b: ParamId,
}

impl PolicyHeads {
    pub fn new<R: Rng + ?Sized>(
        d_s: usize,
        n_intervals: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            n_intervals,
            interval_w: store.register_weight("policy.interval.w", &[d_s, n_intervals], d_s, rng)?,
            interval_b: store.register_zeros("policy.interval.b", &[n_intervals])?,
            mean_w: store.register_weight("policy.mean.w", &[d_s, 1], d_s, rng)?,
            mean_b: store.register_zeros("policy.mean.b", &[1])?,
            log_std_w: store.register_weight("policy.log_std.w", &[d_s, 1], d_s, rng)?,
            log_std_b: store.register_full("policy.log_std.b", &[1], LOG_STD_INIT)?,
            value_w: store.register_weight("policy.value.w", &[d_s, n_intervals], d_s, rng)?,
            value_b: store.register_zeros("policy.value.b", &[n_intervals])?,
        })
    }

    pub fn n_intervals(&self) -> usize {
        self.n_intervals
    }

    /// Heads over embeddings `[B, N, d_s]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, emb: Var) -> Result<PolicyVars> {
        let s = g.shape(emb).to_vec();
        if s.len() != 3 {
            return Err(Error::shape("policy heads", format!("expected [B, N, d_s], got {s:?}")));
        }
        let (b, n) = (s[0], s[1]);
        let pooled = g.mean_axis(emb, 1)?;

        let w = g.param(store, self.interval_w);
        let bias = g.param(store, self.interval_b);
        let z = g.matmul(pooled, w)?;
        let logits = g.add(z, bias)?;
        let probs = g.softmax_last(logits)?;
        let log_probs = g.log(probs)?;

        let per_asset = |g: &mut Graph, w: ParamId, bias: ParamId| -> Result<Var> {
            let w = g.param(store, w);
            let bias = g.param(store, bias);
            let y = g.matmul(emb, w)?;
            let y = g.add(y, bias)?;
            g.reshape(y, &[b, n])
        };
        let mean = per_asset(g, self.mean_w, self.mean_b)?;
        let raw_log_std = per_asset(g, self.log_std_w, self.log_std_b)?;
        let log_std = g.clamp(raw_log_std, SIGMA_MIN.ln(), SIGMA_MAX.ln())?;

        let w = g.param(store, self.value_w);
        let bias = g.param(store, self.value_b);
        let v = g.matmul(pooled, w)?;
        let values = g.add(v, bias)?;
        let weighted = g.mul(probs, values)?;
        let value = g.sum_axis(weighted, 1)?;
        Ok(PolicyVars {
            logits,
            probs,
            log_probs,
            mean,
            log_std,
            values,
            value,
        })
    }
}

/// Graph terms needed by the PPO loss for a batch of stored actions.
#[derive(Debug, Clone, Copy)]
pub struct ActionTerms {
    /// `[B]` joint log-probabilities of the stored actions.
    pub log_prob: Var,
    /// `[B]` discrete plus Gaussian entropy.
    pub entropy: Var,
    /// `[B]` value head of the stored interval.
    pub chosen_value: Var,
}

impl PolicyVars {
    /// `onehot` is `[B, L]`, `raw` is `[B, N]`.
    pub fn action_terms(&self, g: &mut Graph, onehot: Var, raw: Var) -> Result<ActionTerms> {
        let n = g.shape(raw)[1];
        let picked = g.mul(self.log_probs, onehot)?;
        let discrete = g.sum_axis(picked, 1)?;

        let diff = g.sub(raw, self.mean)?;
        let neg_ls = g.neg(self.log_std)?;
        let inv_std = g.exp(neg_ls)?;
        let z = g.mul(diff, inv_std)?;
        let z2 = g.mul(z, z)?;
        let quad = g.scale(z2, -0.5)?;
        let per = g.sub(quad, self.log_std)?;
        let summed = g.sum_axis(per, 1)?;
        let gauss = g.add_scalar(summed, -0.5 * n as f64 * (2.0 * PI).ln())?;
        let log_prob = g.add(discrete, gauss)?;

        let plogp = g.mul(self.probs, self.log_probs)?;
        let h_disc = g.sum_axis(plogp, 1)?;
        let h_disc = g.neg(h_disc)?;
        let ls_sum = g.sum_axis(self.log_std, 1)?;
        let h_gauss = g.add_scalar(ls_sum, 0.5 * n as f64 * (2.0 * PI * E).ln())?;
        let entropy = g.add(h_disc, h_gauss)?;

        let vsel = g.mul(self.values, onehot)?;
        let chosen_value = g.sum_axis(vsel, 1)?;
        Ok(ActionTerms {
            log_prob,
            entropy,
            chosen_value,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSpec {
    pub encoder: EncoderConfig,
    pub intervals: Vec<usize>,
    pub lookback: usize,
    pub n_features: usize,
}

/// Encoder and heads with their parameter registry.
#[derive(Debug, Clone)]
pub struct Agent {
    pub spec: AgentSpec,
    pub store: ParamStore,
    encoder: Encoder,
    heads: PolicyHeads,
}

impl Agent {
    pub fn new<R: Rng + ?Sized>(spec: AgentSpec, rng: &mut R) -> Result<Self> {
        if spec.intervals.is_empty() {
            return Err(Error::config("env.intervals", "need at least one interval"));
        }
        let mut store = ParamStore::new();
        let encoder = Encoder::new(
            spec.encoder.clone(),
            spec.lookback,
            spec.n_features,
            &mut store,
            rng,
        )?;
        let heads = PolicyHeads::new(spec.encoder.d_s, spec.intervals.len(), &mut store, rng)?;
        Ok(Self {
            spec,
            store,
            encoder,
            heads,
        })
    }

    pub fn intervals(&self) -> &[usize] {
        &self.spec.intervals
    }

    /// Forward a batch `[B, N, tau, F]` already placed in `g`.
    pub fn forward(
        &self,
        g: &mut Graph,
        input: Var,
        dropout_rng: Option<&mut dyn RngCore>,
    ) -> Result<PolicyVars> {
        let enc = self.encoder.forward(g, &self.store, input, dropout_rng)?;
        self.heads.forward(g, &self.store, enc.embeddings)
    }

    /// Evaluation-mode outputs for a batch of normalized windows `[N, tau, F]`.
    pub fn evaluate(&self, states: &[Tensor]) -> Result<Vec<PolicyOutput>> {
        let mut g = Graph::new();
        let batch = Tensor::stack(states)?;
        let x = g.constant(batch)?;
        let vars = self.forward(&mut g, x, None)?;
        let b = states.len();
        let rows = |v: Var| -> Vec<Vec<f64>> {
            let t = g.value(v);
            let w = t.len() / b;
            t.data().chunks(w).map(<[f64]>::to_vec).collect()
        };
        let (logits, probs, mean, log_std, values) = (
            rows(vars.logits),
            rows(vars.probs),
            rows(vars.mean),
            rows(vars.log_std),
            rows(vars.values),
        );
        let value = g.value(vars.value).data().to_vec();
        Ok((0..b)
            .map(|i| PolicyOutput {
                logits: logits[i].clone(),
                probs: probs[i].clone(),
                mean: mean[i].clone(),
                log_std: log_std[i].clone(),
                values: values[i].clone(),
                value: value[i],
            })
            .collect())
    }

    /// Evaluate one normalized window and choose an action.
    pub fn act<R: Rng + ?Sized>(
        &self,
        state: &Tensor,
        mode: ActMode,
        forced: Option<usize>,
        rng: &mut R,
    ) -> Result<(PolicyOutput, SampledAction)> {
        let out = self
            .evaluate(std::slice::from_ref(state))?
            .pop()
            .expect("one state in, one output out");
        let action = select_action(&out, &self.spec.intervals, mode, forced, rng);
        Ok((out, action))
    }
}
