//! Straight-line re-derivation of the trading environment from raw closing
//! prices, written without reference to the library's helpers.

use adarl_core::market::{generate_synthetic, MarketFrame, RegimeSpec, SynthSpec, OHLC};
use chrono::NaiveDate;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct OracleStep {
    pub epoch: usize,
    pub best: usize,
    pub raw_return: f64,
    pub reward: f64,
    pub mu: f64,
    pub value: f64,
}

pub struct OracleParams<'a> {
    pub cost: f64,
    pub bonus: f64,
    pub intervals: &'a [usize],
    pub lookback: usize,
    pub v0: f64,
}

/// Replay `actions` (interval, weights) on `closes[day][asset]` until the
/// data runs out.
pub fn replay(closes: &[Vec<f64>], p: &OracleParams<'_>, actions: &[(usize, Vec<f64>)]) -> Vec<OracleStep> {
    let days = closes.len();
    let n = closes[0].len();
    let hmax = *p.intervals.iter().max().unwrap();
    let mut t = p.lookback - 1;
    let mut v = p.v0;
    let mut prev = vec![1.0 / n as f64; n];
    let mut out = Vec::new();
    for (h, w) in actions {
        if t + hmax >= days {
            break;
        }
        let mut turnover = 0.0;
        for i in 0..n {
            turnover += (w[i] - prev[i]).abs();
        }
        let mu = 1.0 - p.cost * turnover;

        let mut best = 0;
        let mut best_ret = f64::NEG_INFINITY;
        for &c in p.intervals {
            let mut g = 0.0;
            for i in 0..n {
                g += w[i] * closes[t + c][i] / closes[t][i];
            }
            if g - 1.0 > best_ret || (g - 1.0 == best_ret && c < best) {
                best_ret = g - 1.0;
                best = c;
            }
        }

        let mut growth = 0.0;
        for i in 0..n {
            growth += w[i] * closes[t + h][i] / closes[t][i];
        }
        let raw = growth - 1.0;
        let reward = if *h == best { raw * (1.0 + p.bonus) } else { raw * (1.0 - p.bonus) };
        v = mu * v * growth;
        for i in 0..n {
            prev[i] = w[i] * (closes[t + h][i] / closes[t][i]) / growth;
        }
        out.push(OracleStep {
            epoch: t,
            best,
            raw_return: raw,
            reward,
            mu,
            value: v,
        });
        t += h;
    }
    out
}

/// Random point on the simplex, sometimes sparse.
pub fn random_weights(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut w: Vec<f64> = (0..n)
        .map(|_| if rng.random_bool(0.2) { 0.0 } else { rng.random_range(0.0..1.0) })
        .collect();
    if w.iter().sum::<f64>() == 0.0 {
        w[rng.random_range(0..n)] = 1.0;
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= s);
    w
}

/// Random synthetic market for oracle comparisons.
pub fn random_market(rng: &mut ChaCha8Rng) -> MarketFrame {
    let n_assets = rng.random_range(1..=5);
    let n_days = rng.random_range(30..=90);
    let spec = SynthSpec {
        n_assets,
        n_days,
        regimes: vec![RegimeSpec {
            days: n_days,
            drift: vec![rng.random_range(-0.003..0.003)],
            vol: vec![rng.random_range(0.001..0.04)],
            reversion: rng.random_range(0.0..0.5),
        }],
        seed: Some(rng.random()),
        initial_price: 100.0,
        start_date: NaiveDate::from_ymd_opt(2001, 1, 1).unwrap(),
    };
    generate_synthetic(&spec).unwrap()
}

pub fn closes_of(frame: &MarketFrame) -> Vec<Vec<f64>> {
    (0..frame.n_days()).map(|d| frame.closes(d)).collect()
}

/// OHLC frame with every feature equal to the close, on consecutive days.
pub fn frame_from_closes(closes: &[Vec<f64>]) -> MarketFrame {
    let n = closes[0].len();
    let start = NaiveDate::from_ymd_opt(2001, 1, 1).unwrap();
    let dates = (0..closes.len())
        .map(|d| start + chrono::Days::new(d as u64))
        .collect();
    let features = closes
        .iter()
        .flat_map(|day| day.iter().flat_map(|&c| [c; 4]))
        .collect();
    MarketFrame::new(
        (0..n).map(|i| format!("A{i}")).collect(),
        dates,
        OHLC.iter().map(|s| s.to_string()).collect(),
        features,
    )
    .unwrap()
}
