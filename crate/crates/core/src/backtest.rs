//! Deterministic evaluation, performance metrics and baseline strategies.

use std::collections::BTreeMap;
use std::io::Write;

use chrono::NaiveDate;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{self, EnvConfig, EnvState, StepOutcome, TraceRecord};
use crate::error::{Error, Result};
use crate::market::MarketFrame;
use crate::policy::{ActMode, Agent};

pub const MOMENTUM_WINDOW: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricOptions {
    pub periods_per_year: f64,
    /// Scale SR and SoR by `sqrt(periods_per_year)`.
    pub annualize: bool,
}

impl Default for MetricOptions {
    fn default() -> Self {
        Self {
            periods_per_year: 252.0,
            annualize: false,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricFlags {
    /// Returns have zero dispersion; SR reported as 0.
    pub sharpe_undefined: bool,
    /// No negative returns; SoR reported as 0.
    pub sortino_undefined: bool,
    /// No drawdown; CR reported as 0.
    pub calmar_undefined: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Percent.
    pub cagr: f64,
    pub sharpe: f64,
    pub sortino: f64,
    pub calmar: f64,
    /// Percent.
    pub mdd: f64,
    pub flags: MetricFlags,
}

/// Largest peak-to-trough decline as a fraction of the peak.
pub fn max_drawdown(curve: &[f64]) -> f64 {
    let mut peak = f64::NEG_INFINITY;
    let mut worst: f64 = 0.0;
    for &v in curve {
        peak = peak.max(v);
        worst = worst.max((peak - v) / peak);
    }
    worst
}

pub fn compute_metrics(curve: &[f64], opts: &MetricOptions) -> Result<Metrics> {
    if curve.len() < 2 {
        return Err(Error::InsufficientData {
            needed: 2,
            available: curve.len(),
        });
    }
    if curve.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(Error::Contract("equity curve must be positive and finite".into()));
    }
    let days = (curve.len() - 1) as f64;
    let rets: Vec<f64> = curve.windows(2).map(|w| w[1] / w[0] - 1.0).collect();
    let mean = rets.iter().sum::<f64>() / days;
    let growth = curve[curve.len() - 1] / curve[0];
    let cagr = (growth.powf(opts.periods_per_year / days) - 1.0) * 100.0;
    let scale = if opts.annualize {
        opts.periods_per_year.sqrt()
    } else {
        1.0
    };
    let mut flags = MetricFlags::default();

    let std = if rets.len() > 1 {
        (rets.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (days - 1.0)).sqrt()
    } else {
        0.0
    };
    let sharpe = if std > 1e-15 {
        mean / std * scale
    } else {
        flags.sharpe_undefined = true;
        0.0
    };

    let downside: Vec<f64> = rets.iter().copied().filter(|r| *r < 0.0).collect();
    let sortino = if downside.is_empty() {
        flags.sortino_undefined = true;
        0.0
    } else {
        let rms = (downside.iter().map(|r| r * r).sum::<f64>() / downside.len() as f64).sqrt();
        mean / rms * scale
    };

    let mdd = max_drawdown(curve);
    let calmar = if mdd > 0.0 {
        (cagr / 100.0) / mdd
    } else {
        flags.calmar_undefined = true;
        0.0
    };
    Ok(Metrics {
        cagr,
        sharpe,
        sortino,
        calmar,
        mdd: mdd * 100.0,
        flags,
    })
}

#[derive(Debug, Clone, Copy)]
pub enum Strategy<'a> {
    /// Greedy learned policy; its own interval set.
    Learned(&'a Agent),
    /// Always rebalance every `h` days, using the agent's greedy
    /// allocation when one is given and a uniform constant mix otherwise.
    Fixed { h: usize, agent: Option<&'a Agent> },
    /// Uniform buy-and-hold standing in for a capitalization index.
    IndexProxy,
    UniformBuyHold,
    /// Equal weight on the top quintile by trailing return.
    Csm,
    /// Equal weight on the bottom quintile by trailing return.
    Blsw,
}

impl Strategy<'_> {
    pub fn label(&self) -> String {
        match self {
            Strategy::Learned(a) if a.intervals().len() > 3 => "adaptive-dense".into(),
            Strategy::Learned(_) => "adaptive".into(),
            Strategy::Fixed { h, .. } => format!("fixed-{h}"),
            Strategy::IndexProxy => "index-proxy".into(),
            Strategy::UniformBuyHold => "uniform-buy-hold".into(),
            Strategy::Csm => "csm".into(),
            Strategy::Blsw => "blsw".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineKind {
    IndexProxy,
    Csm,
    Blsw,
}

/// Target weights of a rule-based baseline at `epoch`. `holdings` are the
/// current drifted weights, used by the buy-and-hold index.
pub fn baseline_weights(
    kind: BaselineKind,
    frame: &MarketFrame,
    epoch: usize,
    holdings: &[f64],
    first: bool,
) -> Vec<f64> {
    let n = frame.n_assets();
    match kind {
        BaselineKind::IndexProxy => {
            if first {
                env::uniform(n)
            } else {
                holdings.to_vec()
            }
        }
        BaselineKind::Csm | BaselineKind::Blsw => {
            if epoch < MOMENTUM_WINDOW {
                return env::uniform(n);
            }
            let mut rets: Vec<f64> = (0..n)
                .map(|i| frame.close(epoch, i) / frame.close(epoch - MOMENTUM_WINDOW, i) - 1.0)
                .collect();
            if kind == BaselineKind::Blsw {
                rets.iter_mut().for_each(|r| *r = -*r);
            }
            let k = (n / 5).max(1);
            let mut sorted = rets.clone();
            sorted.sort_by(|a, b| b.total_cmp(a));
            let cutoff = sorted[k - 1];
            let chosen: Vec<bool> = rets.iter().map(|r| *r >= cutoff).collect();
            let count = chosen.iter().filter(|c| **c).count() as f64;
            chosen.iter().map(|&c| if c { 1.0 / count } else { 0.0 }).collect()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestReport {
    pub strategy: String,
    pub cost_multiplier: f64,
    pub dates: Vec<NaiveDate>,
    pub equity: Vec<f64>,
    pub decisions: Vec<TraceRecord>,
    pub interval_histogram: BTreeMap<usize, usize>,
    pub metrics: Metrics,
    /// Last point of the equity curve.
    pub final_value: f64,
    /// Portfolio value after the last completed decision interval.
    pub env_final_value: f64,
}

/// Evaluate `strategy` on `frame`. Decisions start at the first day with a
/// full look-back window; after the last decision the position is held to
/// the end of the segment, so every strategy yields a curve of equal length.
pub fn run_backtest(
    strategy: Strategy<'_>,
    frame: &MarketFrame,
    env_cfg: &EnvConfig,
    opts: &MetricOptions,
) -> Result<BacktestReport> {
    let mut cfg = env_cfg.clone();
    let forced = match strategy {
        Strategy::Learned(agent) => {
            cfg.intervals = agent.intervals().to_vec();
            None
        }
        Strategy::Fixed { h, agent } => {
            if !cfg.intervals.contains(&h) {
                return Err(Error::config(
                    "compare.strategies",
                    format!("fixed interval {h} is not a candidate {:?}", cfg.intervals),
                ));
            }
            match agent {
                Some(a) => Some(a.intervals().iter().position(|&x| x == h).ok_or_else(|| {
                    Error::config(
                        "compare.strategies",
                        format!("fixed interval {h} unknown to the agent"),
                    )
                })?),
                None => None,
            }
        }
        _ => None,
    };
    let mut state: EnvState = env::reset(&cfg, frame)?;
    let start = state.epoch;
    let mut equity = vec![state.value];
    let mut decisions = Vec::new();
    let mut hist = BTreeMap::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let rebalance = cfg.max_interval();
    while !state.done {
        let (h, w) = match strategy {
            Strategy::Learned(agent) => {
                let s = frame.state_at(state.epoch, cfg.lookback)?.normalized();
                let (_, a) = agent.act(&s, ActMode::Greedy, None, &mut rng)?;
                (a.interval, a.weights)
            }
            Strategy::Fixed { h, agent } => match agent {
                Some(agent) => {
                    let s = frame.state_at(state.epoch, cfg.lookback)?.normalized();
                    let (_, a) = agent.act(&s, ActMode::Greedy, forced, &mut rng)?;
                    (h, a.weights)
                }
                None => (h, env::uniform(frame.n_assets())),
            },
            Strategy::IndexProxy | Strategy::UniformBuyHold => (
                rebalance,
                baseline_weights(BaselineKind::IndexProxy, frame, state.epoch, &state.holdings, state.first),
            ),
            Strategy::Csm => (
                rebalance,
                baseline_weights(BaselineKind::Csm, frame, state.epoch, &state.holdings, state.first),
            ),
            Strategy::Blsw => (
                rebalance,
                baseline_weights(BaselineKind::Blsw, frame, state.epoch, &state.holdings, state.first),
            ),
        };
        let (result, next) = match env::step(&cfg, frame, &state, h, &w)? {
            StepOutcome::Moved { result, next } => (result, next),
            StepOutcome::EndOfData => break,
        };
        let base = result.cost_factor * result.value_before;
        for d in 1..h {
            let y = frame.price_relative(result.epoch, d)?;
            equity.push(base * dot(&y, &w));
        }
        equity.push(result.value);
        *hist.entry(h).or_insert(0) += 1;
        decisions.push(TraceRecord::from_step(frame, &result));
        state = next;
    }
    let env_final_value = state.value;
    let last = frame.n_days() - 1;
    for d in 1..=(last - state.epoch) {
        let y = frame.price_relative(state.epoch, d)?;
        equity.push(state.value * dot(&y, &state.holdings));
    }
    let dates = frame.dates()[start..].to_vec();
    debug_assert_eq!(dates.len(), equity.len());
    let metrics = compute_metrics(&equity, opts)?;
    Ok(BacktestReport {
        strategy: strategy.label(),
        cost_multiplier: 1.0,
        final_value: *equity.last().expect("non-empty"),
        env_final_value,
        dates,
        equity,
        decisions,
        interval_histogram: hist,
        metrics,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Backtest every strategy at every cost multiplier; rows ordered by
/// strategy then multiplier.
pub fn compare(
    strategies: &[Strategy<'_>],
    frame: &MarketFrame,
    env_cfg: &EnvConfig,
    cost_multipliers: &[f64],
    opts: &MetricOptions,
) -> Result<Vec<BacktestReport>> {
    if strategies.is_empty() {
        return Err(Error::config("compare.strategies", "no strategies listed"));
    }
    let mut out = Vec::with_capacity(strategies.len() * cost_multipliers.len());
    for s in strategies {
        for &m in cost_multipliers {
            let cfg = EnvConfig {
                cost_rate: env_cfg.cost_rate * m,
                ..env_cfg.clone()
            };
            if !(0.0..1.0).contains(&cfg.cost_rate) {
                return Err(Error::config(
                    "compare.cost_multipliers",
                    format!("multiplier {m} gives cost rate {}", cfg.cost_rate),
                ));
            }
            let mut report = run_backtest(*s, frame, &cfg, opts)?;
            report.cost_multiplier = m;
            out.push(report);
        }
    }
    Ok(out)
}

pub const TABLE_HEADER: &str = "strategy,cost_multiplier,cagr,sr,sor,cr,mdd,final_value";

/// Comparison table as comma-separated text.
pub fn write_table<W: Write>(reports: &[BacktestReport], mut out: W) -> Result<()> {
    let io = |e| Error::io("writing comparison table", e);
    writeln!(out, "{TABLE_HEADER}").map_err(io)?;
    for r in reports {
        let m = &r.metrics;
        writeln!(
            out,
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.8}",
            r.strategy, r.cost_multiplier, m.cagr, m.sharpe, m.sortino, m.calmar, m.mdd, r.final_value
        )
        .map_err(io)?;
    }
    Ok(())
}

/// `date,value` rows.
pub fn write_equity<W: Write>(report: &BacktestReport, mut out: W) -> Result<()> {
    let io = |e| Error::io("writing equity series", e);
    writeln!(out, "date,value").map_err(io)?;
    for (d, v) in report.dates.iter().zip(&report.equity) {
        writeln!(out, "{d},{v}").map_err(io)?;
    }
    Ok(())
}
