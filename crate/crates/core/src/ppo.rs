//! Rollout collection, advantage estimation and clipped-surrogate updates.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{EnvConfig, Environment, StepResult};
use crate::error::{Error, Result};
use crate::market::MarketFrame;
use crate::policy::{ActMode, Agent, AgentSpec};
use crate::rng::{substream, Stream};
use crate::tensor::{Adam, AdamConfig, Checkpoint, Graph, Tensor, Var};

const ADV_STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PpoConfig {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub minibatch: usize,
    /// Decision epochs collected before an update; an episode end also
    /// triggers one.
    pub rollout_len: usize,
    pub episodes: usize,
    pub max_grad_norm: f64,
    /// Discount by `gamma^h` for an `h`-day interval instead of `gamma` per
    /// decision.
    pub per_day_discount: bool,
    /// Run the validation segment every this many episodes (0 = never).
    pub eval_every: usize,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            gae_lambda: 0.95,
            clip: 0.2,
            entropy_coef: 0.01,
            value_coef: 0.5,
            learning_rate: 3e-4,
            epochs: 4,
            minibatch: 64,
            rollout_len: 128,
            episodes: 50,
            max_grad_norm: 0.5,
            per_day_discount: false,
            eval_every: 1,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, field: &str, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::config(field, msg))
            }
        };
        check(self.gamma > 0.0 && self.gamma <= 1.0, "ppo.gamma", "must lie in (0, 1]")?;
        check((0.0..=1.0).contains(&self.gae_lambda), "ppo.gae_lambda", "must lie in [0, 1]")?;
        check(self.clip > 0.0 && self.clip < 1.0, "ppo.clip", "must lie in (0, 1)")?;
        check(self.entropy_coef >= 0.0, "ppo.entropy_coef", "must be non-negative")?;
        check(self.value_coef >= 0.0, "ppo.value_coef", "must be non-negative")?;
        check(self.learning_rate > 0.0, "ppo.learning_rate", "must be positive")?;
        check(self.epochs >= 1, "ppo.epochs", "must be at least 1")?;
        check(self.minibatch >= 1, "ppo.minibatch", "must be at least 1")?;
        check(self.rollout_len >= 1, "ppo.rollout_len", "must be at least 1")?;
        check(self.max_grad_norm > 0.0, "ppo.max_grad_norm", "must be positive")?;
        Ok(())
    }
}

/// One stored decision.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    /// Normalized look-back window `[N, tau, F]`.
    pub state: Tensor,
    pub epoch: usize,
    pub next_epoch: usize,
    pub interval_index: usize,
    pub interval: usize,
    pub best_interval: usize,
    pub raw: Vec<f64>,
    pub weights: Vec<f64>,
    pub reward: f64,
    pub raw_return: f64,
    pub cost_factor: f64,
    pub log_prob: f64,
    pub value: f64,
    pub values: Vec<f64>,
    pub probs: Vec<f64>,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub transitions: Vec<Transition>,
    /// Value estimate of the state following the last transition, or zero
    /// when the episode ended.
    pub bootstrap_value: f64,
    pub episode_ended: bool,
}

/// Run the sampling policy for at most `max_len` decisions.
pub fn collect_rollout<R: Rng + ?Sized>(
    env: &mut Environment<'_>,
    agent: &Agent,
    max_len: usize,
    rng: &mut R,
) -> Result<Rollout> {
    let mut transitions = Vec::with_capacity(max_len);
    let mut ended = env.is_done();
    while transitions.len() < max_len && !ended {
        let state = env.observe()?.normalized();
        let (out, action) = agent.act(&state, ActMode::Sample, None, rng)?;
        let Some(step) = env.step(action.interval, &action.weights)? else {
            if let Some(last) = transitions.last_mut() {
                let last: &mut Transition = last;
                last.done = true;
            }
            ended = true;
            break;
        };
        ended = step.done;
        transitions.push(Transition {
            state,
            epoch: step.epoch,
            next_epoch: step.next_epoch,
            interval_index: action.interval_index,
            interval: action.interval,
            best_interval: step.best_interval,
            raw: action.raw,
            weights: action.weights,
            reward: step.reward,
            raw_return: step.raw_return,
            cost_factor: step.cost_factor,
            log_prob: action.log_prob,
            value: out.value,
            values: out.values,
            probs: out.probs,
            done: step.done,
        });
    }
    let bootstrap_value = if ended {
        0.0
    } else {
        let state = env.observe()?.normalized();
        agent.evaluate(std::slice::from_ref(&state))?[0].value
    };
    Ok(Rollout {
        transitions,
        bootstrap_value,
        episode_ended: ended,
    })
}

/// Generalized advantage estimation over decision epochs. Returns
/// `(advantages, return targets)`; advantages are not normalized.
pub fn compute_advantages(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    discounts: &[f64],
    bootstrap_value: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut next_value = bootstrap_value;
    let mut next_adv = 0.0;
    for i in (0..n).rev() {
        let live = if dones[i] { 0.0 } else { 1.0 };
        let gamma = discounts[i];
        let delta = rewards[i] + gamma * next_value * live - values[i];
        adv[i] = delta + gamma * lambda * live * next_adv;
        next_value = values[i];
        next_adv = adv[i];
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, returns)
}

/// Shift and scale to zero mean and unit (population) standard deviation.
pub fn normalize_advantages(adv: &mut [f64]) {
    if adv.is_empty() {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt().max(ADV_STD_FLOOR);
    adv.iter_mut().for_each(|a| *a = (*a - mean) / std);
}

fn discounts(cfg: &PpoConfig, transitions: &[Transition]) -> Vec<f64> {
    transitions
        .iter()
        .map(|t| {
            if cfg.per_day_discount {
                cfg.gamma.powi(t.interval as i32)
            } else {
                cfg.gamma
            }
        })
        .collect()
}

/// Advantages (normalized) and return targets for a rollout.
pub fn rollout_targets(cfg: &PpoConfig, rollout: &Rollout) -> (Vec<f64>, Vec<f64>) {
    let t = &rollout.transitions;
    let rewards: Vec<f64> = t.iter().map(|x| x.reward).collect();
    let values: Vec<f64> = t.iter().map(|x| x.value).collect();
    let dones: Vec<bool> = t.iter().map(|x| x.done).collect();
    let (mut adv, ret) = compute_advantages(
        &rewards,
        &values,
        &dones,
        &discounts(cfg, t),
        rollout.bootstrap_value,
        cfg.gae_lambda,
    );
    normalize_advantages(&mut adv);
    (adv, ret)
}

/// Loss graph handles for one minibatch.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub policy: Var,
    pub value: Var,
    pub entropy: Var,
    /// `[B]` probability ratios.
    pub ratio: Var,
}

/// Build the PPO loss for `batch` in `g`.
pub fn minibatch_loss(
    g: &mut Graph,
    agent: &Agent,
    cfg: &PpoConfig,
    batch: &[&Transition],
    advantages: &[f64],
    returns: &[f64],
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<LossVars> {
    let b = batch.len();
    let l = agent.intervals().len();
    let n = batch[0].raw.len();
    let states: Vec<Tensor> = batch.iter().map(|t| t.state.clone()).collect();
    let x = g.constant(Tensor::stack(&states)?)?;
    let vars = agent.forward(g, x, dropout_rng.map(|r| r as &mut dyn rand::RngCore))?;
    let mut onehot = vec![0.0; b * l];
    for (i, t) in batch.iter().enumerate() {
        onehot[i * l + t.interval_index] = 1.0;
    }
    let onehot = g.constant(Tensor::new(vec![b, l], onehot)?)?;
    let raw = g.constant(Tensor::new(
        vec![b, n],
        batch.iter().flat_map(|t| t.raw.iter().copied()).collect(),
    )?)?;
    let terms = vars.action_terms(g, onehot, raw)?;
    let old = g.constant(Tensor::vector(batch.iter().map(|t| t.log_prob).collect()))?;
    let adv = g.constant(Tensor::vector(advantages.to_vec()))?;
    let ret = g.constant(Tensor::vector(returns.to_vec()))?;

    let diff = g.sub(terms.log_prob, old)?;
    let ratio = g.exp(diff)?;
    let s1 = g.mul(ratio, adv)?;
    let clipped = g.clamp(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip)?;
    let s2 = g.mul(clipped, adv)?;
    let surr = g.minimum(s1, s2)?;
    let surr = g.mean(surr)?;
    let policy = g.neg(surr)?;

    let err = g.sub(terms.chosen_value, ret)?;
    let sq = g.mul(err, err)?;
    let value = g.mean(sq)?;
    let entropy = g.mean(terms.entropy)?;

    let v_term = g.scale(value, cfg.value_coef)?;
    let e_term = g.scale(entropy, -cfg.entropy_coef)?;
    let total = g.add(policy, v_term)?;
    let total = g.add(total, e_term)?;
    Ok(LossVars {
        total,
        policy,
        value,
        entropy,
        ratio,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub grad_norm: f64,
    pub minibatches: usize,
}

/// Several epochs of shuffled minibatch Adam steps on one rollout.
pub fn ppo_update(
    agent: &mut Agent,
    adam: &mut Adam,
    cfg: &PpoConfig,
    rollout: &Rollout,
    shuffle_rng: &mut ChaCha8Rng,
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<UpdateStats> {
    let t = &rollout.transitions;
    if t.is_empty() {
        return Ok(UpdateStats::default());
    }
    let (adv, ret) = rollout_targets(cfg, rollout);
    let mut order: Vec<usize> = (0..t.len()).collect();
    let mut stats = UpdateStats::default();
    let mut clipped = 0usize;
    let mut seen = 0usize;
    for _ in 0..cfg.epochs {
        order.shuffle(shuffle_rng);
        for chunk in order.chunks(cfg.minibatch) {
            let batch: Vec<&Transition> = chunk.iter().map(|&i| &t[i]).collect();
            let a: Vec<f64> = chunk.iter().map(|&i| adv[i]).collect();
            let r: Vec<f64> = chunk.iter().map(|&i| ret[i]).collect();
            let mut g = Graph::new();
            let loss = minibatch_loss(
                &mut g,
                agent,
                cfg,
                &batch,
                &a,
                &r,
                dropout_rng.as_deref_mut(),
            )
            .map_err(|e| Error::Training(format!("loss evaluation failed: {e}")))?;
            let value_of = |v: Var| g.value(v).data()[0];
            let (lp, lv, le) = (value_of(loss.policy), value_of(loss.value), value_of(loss.entropy));
            if !value_of(loss.total).is_finite() {
                return Err(Error::Training(format!(
                    "non-finite loss (policy {lp}, value {lv}, entropy {le})"
                )));
            }
            agent.store.zero_grad();
            g.backward(loss.total, &mut agent.store)?;
            let norm = agent.store.clip_grad_norm(cfg.max_grad_norm);
            if !norm.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite gradient norm (policy {lp}, value {lv}, entropy {le})"
                )));
            }
            adam.step(&mut agent.store);
            clipped += g
                .value(loss.ratio)
                .data()
                .iter()
                .filter(|r| (**r - 1.0).abs() > cfg.clip)
                .count();
            seen += chunk.len();
            stats.policy_loss += lp;
            stats.value_loss += lv;
            stats.entropy += le;
            stats.grad_norm += norm;
            stats.minibatches += 1;
        }
    }
    let m = stats.minibatches as f64;
    stats.policy_loss /= m;
    stats.value_loss /= m;
    stats.entropy /= m;
    stats.grad_norm /= m;
    stats.clip_fraction = clipped as f64 / seen as f64;
    Ok(stats)
}

/// Greedy episode over `frame`. `forced` pins the interval index.
pub fn greedy_episode(
    agent: &Agent,
    frame: &MarketFrame,
    env: &EnvConfig,
    forced: Option<usize>,
) -> Result<Vec<StepResult>> {
    let mut environment = Environment::new(env.clone(), frame)?;
    // greedy selection draws nothing from the generator
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut steps = Vec::new();
    while !environment.is_done() {
        let state = environment.observe()?.normalized();
        let (_, action) = agent.act(&state, ActMode::Greedy, forced, &mut rng)?;
        match environment.step(action.interval, &action.weights)? {
            Some(s) => steps.push(s),
            None => break,
        }
    }
    Ok(steps)
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub episode: usize,
    pub steps: usize,
    pub mean_reward: f64,
    pub final_value: f64,
    pub interval_histogram: Vec<usize>,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub validation_value: Option<f64>,
}

/// Resumable counters and generator states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    pub episode: usize,
    pub total_steps: u64,
    pub best_validation: Option<f64>,
    pub rollout_rng: ChaCha8Rng,
    pub shuffle_rng: ChaCha8Rng,
    pub dropout_rng: ChaCha8Rng,
}

impl TrainerState {
    pub fn new(seed: u64) -> Self {
        Self {
            episode: 0,
            total_steps: 0,
            best_validation: None,
            rollout_rng: substream(seed, Stream::Rollout),
            shuffle_rng: substream(seed, Stream::Shuffle),
            dropout_rng: substream(seed, Stream::Dropout),
        }
    }
}

const META_TRAINER: &str = "trainer";
const META_SPEC: &str = "agent_spec";
const META_PPO: &str = "ppo";
const META_ENV: &str = "env";

#[derive(Debug, Clone)]
pub struct Trainer {
    pub agent: Agent,
    pub adam: Adam,
    pub ppo: PpoConfig,
    pub env: EnvConfig,
    pub state: TrainerState,
    best: Option<Checkpoint>,
}

impl Trainer {
    /// Fresh agent initialized from the policy-init substream of `seed`.
    pub fn new(spec: AgentSpec, ppo: PpoConfig, env: EnvConfig, seed: u64) -> Result<Self> {
        ppo.validate()?;
        env.validate()?;
        let agent = Agent::new(spec, &mut substream(seed, Stream::PolicyInit))?;
        let adam = Adam::new(
            AdamConfig {
                lr: ppo.learning_rate,
                ..AdamConfig::default()
            },
            &agent.store,
        );
        Ok(Self {
            agent,
            adam,
            ppo,
            env,
            state: TrainerState::new(seed),
            best: None,
        })
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::capture(&self.agent.store, Some(self.adam.state()));
        ck.meta.insert(META_TRAINER.into(), serde_json::to_value(&self.state)?);
        ck.meta.insert(META_SPEC.into(), serde_json::to_value(&self.agent.spec)?);
        ck.meta.insert(META_PPO.into(), serde_json::to_value(&self.ppo)?);
        ck.meta.insert(META_ENV.into(), serde_json::to_value(&self.env)?);
        Ok(ck)
    }

    /// Rebuild a trainer exactly as it was when `ck` was taken.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let field = |key: &str| {
            ck.meta
                .get(key)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("missing `{key}` metadata")))
        };
        let spec: AgentSpec = serde_json::from_value(field(META_SPEC)?)?;
        let ppo: PpoConfig = serde_json::from_value(field(META_PPO)?)?;
        let env: EnvConfig = serde_json::from_value(field(META_ENV)?)?;
        let state: TrainerState = serde_json::from_value(field(META_TRAINER)?)?;
        let mut agent = Agent::new(spec, &mut ChaCha8Rng::seed_from_u64(0))?;
        ck.restore_into(&mut agent.store)?;
        let adam_cfg = AdamConfig {
            lr: ppo.learning_rate,
            ..AdamConfig::default()
        };
        let adam = match &ck.optimizer {
            Some(s) => Adam::from_state(adam_cfg, s.clone(), &agent.store)?,
            None => Adam::new(adam_cfg, &agent.store),
        };
        Ok(Self {
            agent,
            adam,
            ppo,
            env,
            state,
            best: None,
        })
    }

    /// Checkpoint of the best validation episode so far (or the latest one
    /// when no validation segment is used).
    pub fn best_checkpoint(&self) -> Option<&Checkpoint> {
        self.best.as_ref()
    }

    /// Play one training episode with updates every `rollout_len` decisions
    /// and at the episode end.
    pub fn run_episode(
        &mut self,
        train: &MarketFrame,
        validation: Option<&MarketFrame>,
    ) -> Result<EpisodeLog> {
        let mut env = Environment::new(self.env.clone(), train)?;
        let mut hist = vec![0usize; self.agent.intervals().len()];
        let mut steps = 0usize;
        let mut reward_sum = 0.0;
        let mut totals = UpdateStats::default();
        let use_dropout = self.agent.spec.encoder.dropout > 0.0;
        loop {
            let rollout = collect_rollout(
                &mut env,
                &self.agent,
                self.ppo.rollout_len,
                &mut self.state.rollout_rng,
            )?;
            for t in &rollout.transitions {
                hist[t.interval_index] += 1;
                reward_sum += t.reward;
            }
            steps += rollout.transitions.len();
            let dropout = if use_dropout {
                Some(&mut self.state.dropout_rng)
            } else {
                None
            };
            let stats = ppo_update(
                &mut self.agent,
                &mut self.adam,
                &self.ppo,
                &rollout,
                &mut self.state.shuffle_rng,
                dropout,
            )?;
            let m = stats.minibatches as f64;
            totals.policy_loss += stats.policy_loss * m;
            totals.value_loss += stats.value_loss * m;
            totals.entropy += stats.entropy * m;
            totals.minibatches += stats.minibatches;
            if rollout.episode_ended {
                break;
            }
        }
        self.state.episode += 1;
        self.state.total_steps += steps as u64;
        let m = totals.minibatches.max(1) as f64;
        let eval_now = self.ppo.eval_every > 0 && self.state.episode % self.ppo.eval_every == 0;
        let validation_value = match validation {
            Some(v) if eval_now => {
                let run = greedy_episode(&self.agent, v, &self.env, None)?;
                Some(run.last().map_or(self.env.initial_value, |s| s.value))
            }
            _ => None,
        };
        let improved = match (validation, validation_value) {
            (None, _) => true,
            (Some(_), Some(v)) => self.state.best_validation.is_none_or(|b| v > b),
            (Some(_), None) => false,
        };
        if improved {
            if validation_value.is_some() {
                self.state.best_validation = validation_value;
            }
            self.best = Some(self.checkpoint()?);
        }
        Ok(EpisodeLog {
            episode: self.state.episode,
            steps,
            mean_reward: if steps > 0 { reward_sum / steps as f64 } else { 0.0 },
            final_value: env.state().value,
            interval_histogram: hist,
            policy_loss: totals.policy_loss / m,
            value_loss: totals.value_loss / m,
            entropy: totals.entropy / m,
            validation_value,
        })
    }

    /// Run `episodes` episodes, writing one JSON line per episode to `log`.
    pub fn train(
        &mut self,
        train: &MarketFrame,
        validation: Option<&MarketFrame>,
        episodes: usize,
        log: &mut dyn Write,
    ) -> Result<Vec<EpisodeLog>> {
        let mut out = Vec::with_capacity(episodes);
        let result = (|| {
            for _ in 0..episodes {
                let rec = self.run_episode(train, validation)?;
                serde_json::to_writer(&mut *log, &rec)?;
                log.write_all(b"\n")
                    .map_err(|e| Error::io("writing training log", e))?;
                out.push(rec);
            }
            Ok(())
        })();
        log.flush().map_err(|e| Error::io("flushing training log", e))?;
        result.map(|_| out)
    }
}
