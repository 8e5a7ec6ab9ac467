//! Property checks shared by the integration tests and the acceptance run.
//! Each returns the worst observed deviation or a description of the first
//! violation.

use adarl_core::backtest::{compute_metrics, max_drawdown, run_backtest, MetricOptions, Strategy};
use adarl_core::env::{cost_factor, EnvConfig, Environment};
use adarl_core::policy::{select_action, ActMode};
use adarl_core::ppo::{collect_rollout, PpoConfig, Trainer};
use adarl_core::tensor::Checkpoint;
use adarl_core::{AttentionMode, MarketFrame};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::grad::{rand_tensor, tiny_agent, tiny_encoder_config};
use super::oracle::{closes_of, random_market, random_weights, replay, OracleParams};

const INTERVAL_SETS: [&[usize]; 5] = [&[1, 5, 20], &[1, 2, 3], &[1, 3, 7], &[2, 4], &[1]];

fn random_env(rng: &mut ChaCha8Rng, frame: &MarketFrame, zero_cost: bool) -> Option<EnvConfig> {
    let intervals = INTERVAL_SETS[rng.random_range(0..INTERVAL_SETS.len())].to_vec();
    let cfg = EnvConfig {
        cost_rate: if zero_cost { 0.0 } else { rng.random_range(0.0..0.01) },
        bonus: rng.random_range(0.0..0.5),
        lookback: rng.random_range(1..=10),
        initial_value: rng.random_range(0.5..2.0),
        intervals,
        zero_cost_entry: false,
    };
    (frame.n_days() >= cfg.min_days()).then_some(cfg)
}

/// Random episodes with random actions, compared step by step against the
/// straight-line oracle. Returns the largest absolute difference in V, mu,
/// R and r, or an error on any structural mismatch (h*, epoch, length).
pub fn env_oracle(episodes: usize, seed: u64, zero_cost: bool) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut done = 0;
    while done < episodes {
        let frame = random_market(&mut rng);
        let Some(cfg) = random_env(&mut rng, &frame, zero_cost) else { continue };
        let n = frame.n_assets();
        let actions: Vec<(usize, Vec<f64>)> = (0..frame.n_days())
            .map(|_| {
                let h = cfg.intervals[rng.random_range(0..cfg.intervals.len())];
                (h, random_weights(&mut rng, n))
            })
            .collect();
        let mut env = Environment::new(cfg.clone(), &frame).map_err(|e| e.to_string())?;
        let mut steps = Vec::new();
        let mut growth_product = cfg.initial_value;
        for (h, w) in &actions {
            if env.is_done() {
                break;
            }
            let s = env.step(*h, w).map_err(|e| e.to_string())?.ok_or("unexpected end of data")?;
            if s.next_epoch - s.epoch != *h {
                return Err(format!("epoch advanced by {} for h={h}", s.next_epoch - s.epoch));
            }
            growth_product *= s.growth;
            steps.push(s);
        }
        let expected = replay(
            &closes_of(&frame),
            &OracleParams {
                cost: cfg.cost_rate,
                bonus: cfg.bonus,
                intervals: &cfg.intervals,
                lookback: cfg.lookback,
                v0: cfg.initial_value,
            },
            &actions,
        );
        if expected.len() != steps.len() {
            return Err(format!("{} steps vs oracle {}", steps.len(), expected.len()));
        }
        for (s, o) in steps.iter().zip(&expected) {
            if s.epoch != o.epoch || s.best_interval != o.best {
                return Err(format!(
                    "epoch {} h* {} vs oracle epoch {} h* {}",
                    s.epoch, s.best_interval, o.epoch, o.best
                ));
            }
            for d in [
                s.value - o.value,
                s.cost_factor - o.mu,
                s.raw_return - o.raw_return,
                s.reward - o.reward,
            ] {
                worst = worst.max(d.abs());
            }
        }
        if zero_cost {
            worst = worst.max((env.state().value - growth_product).abs());
        }
        done += 1;
    }
    Ok(worst)
}

/// Allocations sampled from a tiny policy on random windows, plus cost
/// factors for random trades. Returns the largest simplex-sum or
/// probability-sum deviation.
pub fn simplex_and_bounds(samples: usize, seed: u64) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let batch = 100;
    let mut drawn = 0;
    while drawn < samples {
        let mode = if rng.random_bool(0.5) { AttentionMode::Variate } else { AttentionMode::Temporal };
        let mut agent = tiny_agent(mode, &mut rng);
        // Exaggerate the allocation head so saturated scores occur.
        let gain = rng.random_range(1.0..50.0);
        let mean_w = agent.store.id("policy.mean.w").unwrap();
        for x in agent.store.get_mut(mean_w).tensor.data_mut() {
            *x *= gain;
        }
        let states: Vec<_> = (0..batch)
            .map(|_| rand_tensor(&mut rng, &[2, 4, 4], -0.3, 0.3))
            .collect();
        let outs = agent.evaluate(&states).map_err(|e| e.to_string())?;
        for out in &outs {
            let psum: f64 = out.probs.iter().sum();
            worst = worst.max((psum - 1.0).abs());
            if out.probs.iter().any(|p| *p < 0.0) {
                return Err(format!("negative probability in {:?}", out.probs));
            }
            let a = select_action(out, agent.intervals(), ActMode::Sample, None, &mut rng);
            let wsum: f64 = a.weights.iter().sum();
            worst = worst.max((wsum - 1.0).abs());
            if a.weights.iter().any(|w| !(*w >= 0.0)) {
                return Err(format!("negative weight in {:?}", a.weights));
            }
            let c = rng.random_range(0.0..0.05);
            let prev = random_weights(&mut rng, a.weights.len());
            let mu = cost_factor(&a.weights, &prev, c);
            if !(mu >= 1.0 - 2.0 * c - 1e-15 && mu <= 1.0 + 1e-15) {
                return Err(format!("cost factor {mu} outside [1 - 2c, 1] for c = {c}"));
            }
        }
        drawn += batch;
    }
    Ok(worst)
}

/// Shaped rewards of sampled rollouts against `R (1 +/- b)`, exactly, plus
/// the `b = 0` identity and a recomputation of `R`, `h*` and `r` from raw
/// prices. Returns the number of transitions checked.
pub fn reward_shaping(episodes: usize, seed: u64) -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checked = 0;
    let mut done = 0;
    while done < episodes {
        let frame = random_market(&mut rng);
        let bonus = if done % 2 == 0 { 0.0 } else { rng.random_range(0.05..0.9) };
        let cfg = EnvConfig {
            lookback: 4,
            bonus,
            ..EnvConfig::default()
        };
        if frame.n_days() < cfg.min_days() {
            continue;
        }
        let agent = tiny_agent(AttentionMode::Variate, &mut rng);
        let mut env = Environment::new(cfg.clone(), &frame).map_err(|e| e.to_string())?;
        let rollout = collect_rollout(&mut env, &agent, 10_000, &mut rng).map_err(|e| e.to_string())?;
        for t in &rollout.transitions {
            let expected = if t.interval == t.best_interval {
                t.raw_return * (1.0 + bonus)
            } else {
                t.raw_return * (1.0 - bonus)
            };
            // Independent recomputation from raw prices.
            let held = |h: usize| -> f64 {
                (0..frame.n_assets())
                    .map(|i| t.weights[i] * frame.close(t.epoch + h, i) / frame.close(t.epoch, i))
                    .sum::<f64>()
                    - 1.0
            };
            let mut best = cfg.intervals[0];
            for &h in &cfg.intervals {
                if held(h) > held(best) {
                    best = h;
                }
            }
            let r_oracle = held(t.interval) * if t.interval == best { 1.0 + bonus } else { 1.0 - bonus };
            if best != t.best_interval || (r_oracle - t.reward).abs() > 1e-10 {
                return Err(format!(
                    "epoch {}: stored r {} h* {}, recomputed r {r_oracle} h* {best}",
                    t.epoch, t.reward, t.best_interval
                ));
            }
            if t.reward != expected {
                return Err(format!("reward {} vs {expected} (b = {bonus})", t.reward));
            }
            if bonus == 0.0 && t.reward != t.raw_return {
                return Err(format!("b = 0 but r {} != R {}", t.reward, t.raw_return));
            }
            if bonus < 1.0 && t.reward.signum() != t.raw_return.signum() && t.raw_return != 0.0 {
                return Err("shaped reward changed sign".into());
            }
            checked += 1;
        }
        done += 1;
    }
    Ok(checked)
}

fn random_curve(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    let mut v = rng.random_range(0.5..2.0);
    (0..len)
        .map(|_| {
            v *= 1.0 + rng.random_range(-0.05..0.05);
            v
        })
        .collect()
}

pub fn brute_force_mdd(curve: &[f64]) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..curve.len() {
        for j in i + 1..curve.len() {
            worst = worst.max((curve[i] - curve[j]) / curve[i]);
        }
    }
    worst
}

/// Largest |MDD - brute force| over random curves, in percent.
pub fn mdd_against_brute_force(curves: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = MetricOptions::default();
    (0..curves)
        .map(|_| {
            let len = rng.random_range(2..=500);
            let c = random_curve(&mut rng, len);
            let m = compute_metrics(&c, &opts).unwrap();
            let brute = brute_force_mdd(&c);
            (m.mdd - 100.0 * brute).abs().max((max_drawdown(&c) - brute).abs())
        })
        .fold(0.0, f64::max)
}

/// CAGR of a curve that doubles over exactly one year of daily periods.
pub fn doubling_cagr() -> f64 {
    let ppy = 252;
    let curve: Vec<f64> = (0..=ppy).map(|d| 2f64.powf(d as f64 / ppy as f64)).collect();
    compute_metrics(&curve, &MetricOptions::default()).unwrap().cagr
}

/// Largest relative change of any metric under positive rescaling.
pub fn scale_invariance(curves: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = MetricOptions::default();
    let mut worst = 0.0f64;
    for _ in 0..curves {
        let len = rng.random_range(2..=300);
        let c = random_curve(&mut rng, len);
        let k = 10f64.powf(rng.random_range(-3.0..3.0));
        let scaled: Vec<f64> = c.iter().map(|v| v * k).collect();
        let a = compute_metrics(&c, &opts).unwrap();
        let b = compute_metrics(&scaled, &opts).unwrap();
        for (x, y) in [
            (a.cagr, b.cagr),
            (a.sharpe, b.sharpe),
            (a.sortino, b.sortino),
            (a.calmar, b.calmar),
            (a.mdd, b.mdd),
        ] {
            worst = worst.max((x - y).abs() / x.abs().max(1e-12));
        }
        if a.flags != b.flags {
            return f64::INFINITY;
        }
    }
    worst
}

/// Train, checkpoint through JSON, resume, backtest; returns the report
/// serialized as JSON.
pub fn train_resume_backtest(seed: u64, frame: &MarketFrame, validation: &MarketFrame) -> String {
    let spec = adarl_core::AgentSpec {
        encoder: tiny_encoder_config(AttentionMode::Variate),
        intervals: vec![1, 5, 20],
        lookback: 4,
        n_features: frame.n_features(),
    };
    let env = EnvConfig {
        lookback: 4,
        ..EnvConfig::default()
    };
    let ppo = PpoConfig {
        rollout_len: 16,
        minibatch: 8,
        epochs: 2,
        ..PpoConfig::default()
    };
    let mut sink = Vec::new();
    let mut first = Trainer::new(spec, ppo, env.clone(), seed).unwrap();
    first.train(frame, Some(validation), 2, &mut sink).unwrap();
    let text = first.checkpoint().unwrap().to_json().unwrap();
    let mut resumed = Trainer::from_checkpoint(&Checkpoint::from_json(&text).unwrap()).unwrap();
    resumed.train(frame, Some(validation), 2, &mut sink).unwrap();
    let report = run_backtest(
        Strategy::Learned(&resumed.agent),
        validation,
        &env,
        &MetricOptions::default(),
    )
    .unwrap();
    serde_json::to_string(&report).unwrap()
}
