//! Small end-to-end training runs on synthetic markets with a known answer.

use adarl_core::backtest::{run_backtest, MetricOptions, Strategy};
use adarl_core::env::{best_interval, uniform, EnvConfig};
use adarl_core::market::{generate_synthetic, RegimeSpec, SynthSpec};
use adarl_core::policy::{Agent, AgentSpec};
use adarl_core::ppo::{PpoConfig, Trainer};
use adarl_core::{AttentionMode, EncoderConfig, MarketFrame};
use chrono::NaiveDate;

pub const LOOKBACK: usize = 16;
pub const INTERVALS: [usize; 3] = [1, 5, 20];

pub fn experiment_env() -> EnvConfig {
    EnvConfig {
        lookback: LOOKBACK,
        ..EnvConfig::default()
    }
}

fn spec(n_features: usize) -> AgentSpec {
    AgentSpec {
        encoder: EncoderConfig {
            mode: AttentionMode::Variate,
            d_model: 32,
            heads: 2,
            layers: 1,
            t_pred: 4,
            d_s: 32,
            dropout: 0.0,
            input_scale: 10.0,
        },
        intervals: INTERVALS.to_vec(),
        lookback: LOOKBACK,
        n_features,
    }
}

fn start() -> NaiveDate {
    NaiveDate::from_ymd_opt(2000, 1, 3).unwrap()
}

fn train(frame: &MarketFrame, seed: u64, episodes: usize, learning_rate: f64) -> Agent {
    let ppo = PpoConfig {
        gamma: 0.5,
        learning_rate,
        ..PpoConfig::default()
    };
    let mut trainer = Trainer::new(spec(frame.n_features()), ppo, experiment_env(), seed).unwrap();
    for _ in 0..episodes {
        trainer.run_episode(frame, None).unwrap();
    }
    trainer.agent
}

/// Alternating regimes: a volatile, mean-reverting, falling one (label 0)
/// where short holds win, and a calm trending one (label 1) where the
/// longest hold wins.
pub fn interval_market(seed: u64) -> (SynthSpec, MarketFrame) {
    let spec = SynthSpec {
        n_assets: 5,
        n_days: 1500,
        regimes: vec![
            RegimeSpec {
                days: 150,
                drift: vec![-0.004],
                vol: vec![0.03],
                reversion: 0.5,
            },
            RegimeSpec {
                days: 150,
                drift: vec![0.003],
                vol: vec![0.004],
                reversion: 0.0,
            },
        ],
        seed: Some(1000 + seed),
        initial_price: 100.0,
        start_date: start(),
    };
    let frame = generate_synthetic(&spec).unwrap();
    (spec, frame)
}

pub const TEST_START: usize = 1200;

pub struct IntervalResult {
    pub p_short_volatile: f64,
    pub p_short_calm: f64,
    /// Share of volatile-regime test epochs where h = 1 is the ex-post best
    /// hold for uniform weights.
    pub short_best_volatile: f64,
    /// Same for h = 20 in the calm regime.
    pub long_best_calm: f64,
    pub agent: Agent,
    pub test: MarketFrame,
}

impl IntervalResult {
    pub fn gap(&self) -> f64 {
        self.p_short_volatile - self.p_short_calm
    }
}

/// Test epochs whose look-back window and longest hold lie inside one
/// regime, with that regime's label.
fn interior_epochs(labels: &[usize], n_test: usize) -> Vec<(usize, usize)> {
    let hmax = *INTERVALS.iter().max().unwrap();
    (LOOKBACK - 1..n_test - hmax - 1)
        .filter_map(|t| {
            let g = TEST_START + t;
            let r = labels[g + 1];
            (g + 1 - LOOKBACK..=g + hmax)
                .all(|d| labels[d] == r)
                .then_some((t, r))
        })
        .collect()
}

pub fn interval_experiment(seed: u64) -> IntervalResult {
    let (spec, frame) = interval_market(seed);
    let labels = spec.regime_labels();
    let train_frame = frame.slice_days(0, 900).unwrap();
    let test = frame.slice_days(TEST_START, 1500).unwrap();
    let agent = train(&train_frame, seed, 40, 3e-4);

    let epochs = interior_epochs(&labels, test.n_days());
    let states: Vec<_> = epochs
        .iter()
        .map(|&(t, _)| test.state_at(t, LOOKBACK).unwrap().normalized())
        .collect();
    let outs = agent.evaluate(&states).unwrap();
    let w = uniform(test.n_assets());
    let mut p = [0.0; 2];
    let mut hits = [0.0; 2];
    let mut n = [0.0; 2];
    for (&(t, r), out) in epochs.iter().zip(&outs) {
        p[r] += out.probs[0];
        n[r] += 1.0;
        let best = best_interval(&test, t, &w, &INTERVALS).unwrap().unwrap();
        let target = if r == 0 { 1 } else { 20 };
        if best == target {
            hits[r] += 1.0;
        }
    }
    IntervalResult {
        p_short_volatile: p[0] / n[0],
        p_short_calm: p[1] / n[1],
        short_best_volatile: hits[0] / n[0],
        long_best_calm: hits[1] / n[1],
        agent,
        test,
    }
}

pub struct AllocationResult {
    pub dominant_weight: f64,
    pub learned_value: f64,
    pub uniform_value: f64,
}

/// One asset drifts upward in a calm market; the rest are driftless.
pub fn allocation_market(seed: u64) -> MarketFrame {
    let spec = SynthSpec {
        n_assets: 5,
        n_days: 800,
        regimes: vec![RegimeSpec {
            days: 800,
            drift: vec![0.0, 0.0, 0.003, 0.0, 0.0],
            vol: vec![0.003],
            reversion: 0.0,
        }],
        seed: Some(2000 + seed),
        initial_price: 100.0,
        start_date: start(),
    };
    generate_synthetic(&spec).unwrap()
}

pub const DOMINANT: usize = 2;

pub fn allocation_experiment(seed: u64) -> AllocationResult {
    let frame = allocation_market(seed);
    let train_frame = frame.slice_days(0, 600).unwrap();
    let validation = frame.slice_days(600, 800).unwrap();
    let agent = train(&train_frame, seed, 150, 1e-3);
    let env = experiment_env();
    let opts = MetricOptions::default();
    let learned = run_backtest(Strategy::Learned(&agent), &validation, &env, &opts).unwrap();
    let uniform = run_backtest(Strategy::UniformBuyHold, &validation, &env, &opts).unwrap();
    let dominant_weight = learned.decisions.iter().map(|d| d.weights[DOMINANT]).sum::<f64>()
        / learned.decisions.len() as f64;
    AllocationResult {
        dominant_weight,
        learned_value: learned.final_value,
        uniform_value: uniform.final_value,
    }
}
