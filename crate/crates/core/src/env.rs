//! Variable-horizon portfolio environment.

use std::io::Write;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market::{MarketFrame, StateTensor};

const SIMPLEX_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    pub cost_rate: f64,
    pub bonus: f64,
    pub intervals: Vec<usize>,
    pub lookback: usize,
    pub initial_value: f64,
    /// Skip the cost of the very first allocation instead of charging
    /// turnover against a uniform starting portfolio.
    pub zero_cost_entry: bool,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            cost_rate: 0.002,
            bonus: 0.2,
            intervals: vec![1, 5, 20],
            lookback: 30,
            initial_value: 1.0,
            zero_cost_entry: false,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.cost_rate) {
            return Err(Error::config("env.cost_rate", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.bonus) {
            return Err(Error::config("env.bonus", "must lie in [0, 1)"));
        }
        if self.intervals.is_empty() || self.intervals[0] == 0 {
            return Err(Error::config("env.intervals", "need at least one interval >= 1"));
        }
        if self.intervals.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("env.intervals", "must be strictly ascending"));
        }
        if self.lookback == 0 {
            return Err(Error::config("env.lookback", "must be at least 1"));
        }
        if !(self.initial_value.is_finite() && self.initial_value > 0.0) {
            return Err(Error::config("env.initial_value", "must be positive"));
        }
        Ok(())
    }

    pub fn max_interval(&self) -> usize {
        *self.intervals.last().expect("validated non-empty")
    }

    /// Fewest days a segment needs for one decision.
    pub fn min_days(&self) -> usize {
        self.lookback + self.max_interval()
    }

    pub fn interval_index(&self, h: usize) -> Option<usize> {
        self.intervals.iter().position(|&x| x == h)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub epoch: usize,
    pub value: f64,
    /// Allocation chosen at the previous decision epoch.
    pub last_allocation: Vec<f64>,
    /// That allocation after drifting with prices up to `epoch`; the
    /// pre-rebalance portfolio.
    pub holdings: Vec<f64>,
    pub first: bool,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepResult {
    pub epoch: usize,
    pub next_epoch: usize,
    pub interval: usize,
    pub best_interval: usize,
    pub weights: Vec<f64>,
    /// `y . w` over the chosen horizon.
    pub growth: f64,
    pub raw_return: f64,
    pub reward: f64,
    pub cost_factor: f64,
    pub value_before: f64,
    pub value: f64,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StepOutcome {
    Moved { result: StepResult, next: EnvState },
    /// The requested interval runs past the data; nothing was changed.
    EndOfData,
}

pub fn uniform(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

pub fn check_simplex(w: &[f64]) -> Result<()> {
    let sum: f64 = w.iter().sum();
    if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::Contract(format!(
            "weights {w:?} are not on the simplex (sum {sum})"
        )));
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `w' = (y * w) / (y . w)`.
pub fn drifted_weights(w: &[f64], y: &[f64]) -> Result<Vec<f64>> {
    if w.len() != y.len() {
        return Err(Error::shape(
            "drifted_weights",
            format!("{} weights vs {} price relatives", w.len(), y.len()),
        ));
    }
    let g = dot(w, y);
    if !(g > 0.0 && g.is_finite()) {
        return Err(Error::Contract(format!("portfolio growth y.w = {g} must be positive")));
    }
    Ok(w.iter().zip(y).map(|(wi, yi)| wi * yi / g).collect())
}

/// `mu = 1 - c * sum |w - w'|`.
pub fn cost_factor(w: &[f64], drifted: &[f64], cost_rate: f64) -> f64 {
    let turnover: f64 = w.iter().zip(drifted).map(|(a, b)| (a - b).abs()).sum();
    1.0 - cost_rate * turnover
}

/// Ex-post best interval for holding `w` from `epoch`, over the feasible
/// candidates. Ties go to the shortest interval. `None` when no candidate
/// fits in the data.
pub fn best_interval(
    frame: &MarketFrame,
    epoch: usize,
    w: &[f64],
    intervals: &[usize],
) -> Result<Option<usize>> {
    let mut best: Option<(usize, f64)> = None;
    for &h in intervals {
        if epoch + h >= frame.n_days() {
            continue;
        }
        let ret = dot(&frame.price_relative(epoch, h)?, w) - 1.0;
        if best.is_none_or(|(_, b)| ret > b) {
            best = Some((h, ret));
        }
    }
    Ok(best.map(|(h, _)| h))
}

/// `r = R (1 + b)` when the chosen interval is the best one, else `R (1 - b)`.
pub fn shaped_reward(raw: f64, hit: bool, bonus: f64) -> f64 {
    if hit {
        raw * (1.0 + bonus)
    } else {
        raw * (1.0 - bonus)
    }
}

/// Initial state for a segment; the first epoch is the first day with a full
/// look-back window.
pub fn reset(config: &EnvConfig, frame: &MarketFrame) -> Result<EnvState> {
    config.validate()?;
    if frame.n_days() < config.min_days() {
        return Err(Error::InsufficientData {
            needed: config.min_days(),
            available: frame.n_days(),
        });
    }
    let epoch = config.lookback - 1;
    let n = frame.n_assets();
    Ok(EnvState {
        epoch,
        value: config.initial_value,
        last_allocation: uniform(n),
        holdings: uniform(n),
        first: true,
        done: is_terminal(config, frame, epoch),
    })
}

fn is_terminal(config: &EnvConfig, frame: &MarketFrame, epoch: usize) -> bool {
    epoch + config.max_interval() >= frame.n_days()
}

/// One environment transition. Pure: the input state is never modified.
pub fn step(
    config: &EnvConfig,
    frame: &MarketFrame,
    state: &EnvState,
    h: usize,
    w: &[f64],
) -> Result<StepOutcome> {
    if state.done {
        return Err(Error::Contract("step called on a finished episode".into()));
    }
    if config.interval_index(h).is_none() {
        return Err(Error::Contract(format!(
            "interval {h} is not a candidate {:?}",
            config.intervals
        )));
    }
    if w.len() != frame.n_assets() {
        return Err(Error::shape(
            "step",
            format!("{} weights for {} assets", w.len(), frame.n_assets()),
        ));
    }
    check_simplex(w)?;
    let t = state.epoch;
    if t + h >= frame.n_days() {
        return Ok(StepOutcome::EndOfData);
    }
    let y = frame.price_relative(t, h)?;
    let growth = dot(&y, w);
    let raw_return = growth - 1.0;
    let best = best_interval(frame, t, w, &config.intervals)?.expect("chosen interval is feasible");
    let reward = shaped_reward(raw_return, h == best, config.bonus);
    let cost_factor = if state.first && config.zero_cost_entry {
        1.0
    } else {
        cost_factor(w, &state.holdings, config.cost_rate)
    };
    let value = cost_factor * state.value * growth;
    let next_epoch = t + h;
    let done = is_terminal(config, frame, next_epoch);
    let next = EnvState {
        epoch: next_epoch,
        value,
        last_allocation: w.to_vec(),
        holdings: drifted_weights(w, &y)?,
        first: false,
        done,
    };
    Ok(StepOutcome::Moved {
        result: StepResult {
            epoch: t,
            next_epoch,
            interval: h,
            best_interval: best,
            weights: w.to_vec(),
            growth,
            raw_return,
            reward,
            cost_factor,
            value_before: state.value,
            value,
            done,
        },
        next,
    })
}

/// Stateful wrapper over `reset`/`step` bound to one market segment.
#[derive(Debug, Clone)]
pub struct Environment<'a> {
    config: EnvConfig,
    frame: &'a MarketFrame,
    state: EnvState,
}

impl<'a> Environment<'a> {
    pub fn new(config: EnvConfig, frame: &'a MarketFrame) -> Result<Self> {
        let state = reset(&config, frame)?;
        Ok(Self {
            config,
            frame,
            state,
        })
    }

    pub fn reset(&mut self) {
        self.state = reset(&self.config, self.frame).expect("validated at construction");
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn frame(&self) -> &'a MarketFrame {
        self.frame
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    pub fn is_done(&self) -> bool {
        self.state.done
    }

    pub fn observe(&self) -> Result<StateTensor> {
        self.frame.state_at(self.state.epoch, self.config.lookback)
    }

    /// Advance by `h` days holding `w`. `None` means the interval did not fit
    /// in the data and the state is unchanged.
    pub fn step(&mut self, h: usize, w: &[f64]) -> Result<Option<StepResult>> {
        match step(&self.config, self.frame, &self.state, h, w)? {
            StepOutcome::Moved { result, next } => {
                self.state = next;
                Ok(Some(result))
            }
            StepOutcome::EndOfData => Ok(None),
        }
    }
}

/// One line of an episode trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub epoch: usize,
    pub date: NaiveDate,
    pub interval: usize,
    pub best_interval: usize,
    pub weights: Vec<f64>,
    pub cost_factor: f64,
    pub raw_return: f64,
    pub reward: f64,
    pub value: f64,
}

impl TraceRecord {
    pub fn from_step(frame: &MarketFrame, s: &StepResult) -> Self {
        Self {
            epoch: s.epoch,
            date: frame.dates()[s.epoch],
            interval: s.interval,
            best_interval: s.best_interval,
            weights: s.weights.clone(),
            cost_factor: s.cost_factor,
            raw_return: s.raw_return,
            reward: s.reward,
            value: s.value,
        }
    }
}

/// Write records as JSON lines.
pub fn write_trace<W: Write>(records: &[TraceRecord], mut out: W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")
            .map_err(|e| Error::io("writing trace", e))?;
    }
    Ok(())
}
