use chrono::{Datelike, NaiveDate, Weekday};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{MarketFrame, OHLC};
use crate::error::{Error, Result};
use crate::rng::{substream, Stream};

/// One market regime. `drift` and `vol` hold either a single value shared by
/// every asset or one value per asset, in daily log-return units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeSpec {
    pub days: usize,
    pub drift: Vec<f64>,
    pub vol: Vec<f64>,
    /// Daily pull of the log price back toward its drift trend line.
    /// Zero gives a plain geometric random walk.
    #[serde(default)]
    pub reversion: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_assets: usize,
    pub n_days: usize,
    /// Regimes are laid out in order and the sequence repeats until
    /// `n_days` is covered.
    pub regimes: Vec<RegimeSpec>,
    /// Generator seed. When absent, callers holding a master seed fill it
    /// in with [`SynthSpec::seeded_from`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default = "default_initial_price")]
    pub initial_price: f64,
    #[serde(default = "default_start_date")]
    pub start_date: NaiveDate,
}

fn default_initial_price() -> f64 {
    100.0
}

fn default_start_date() -> NaiveDate {
    NaiveDate::from_ymd_opt(2000, 1, 3).expect("valid date")
}

impl RegimeSpec {
    fn param(values: &[f64], asset: usize) -> f64 {
        if values.len() == 1 {
            values[0]
        } else {
            values[asset]
        }
    }

    pub fn drift_of(&self, asset: usize) -> f64 {
        Self::param(&self.drift, asset)
    }

    pub fn vol_of(&self, asset: usize) -> f64 {
        Self::param(&self.vol, asset)
    }
}

impl SynthSpec {
    /// Copy of the spec whose missing seed is drawn from the data substream
    /// of `master`.
    pub fn seeded_from(&self, master: u64) -> Self {
        let mut out = self.clone();
        if out.seed.is_none() {
            out.seed = Some(substream(master, Stream::Data).next_u64());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: String| Err(Error::config(field, message));
        if self.n_assets == 0 {
            return bad("synth.n_assets", "must be positive".into());
        }
        if self.n_days < 2 {
            return bad("synth.n_days", "need at least two days".into());
        }
        if self.regimes.is_empty() {
            return bad("synth.regimes", "at least one regime is required".into());
        }
        if !(self.initial_price.is_finite() && self.initial_price > 0.0) {
            return bad("synth.initial_price", "must be positive and finite".into());
        }
        for (k, r) in self.regimes.iter().enumerate() {
            if r.days == 0 {
                return bad("synth.regimes", format!("regime {k} has zero days"));
            }
            for (name, values) in [("drift", &r.drift), ("vol", &r.vol)] {
                if values.len() != 1 && values.len() != self.n_assets {
                    return bad(
                        "synth.regimes",
                        format!(
                            "regime {k} {name} has {} entries; expected 1 or {}",
                            values.len(),
                            self.n_assets
                        ),
                    );
                }
                if values.iter().any(|v| !v.is_finite()) {
                    return bad("synth.regimes", format!("regime {k} {name} is not finite"));
                }
            }
            if r.vol.iter().any(|v| *v < 0.0) {
                return bad("synth.regimes", format!("regime {k} has negative volatility"));
            }
            if !(0.0..=1.0).contains(&r.reversion) {
                return bad("synth.regimes", format!("regime {k} reversion outside [0, 1]"));
            }
        }
        Ok(())
    }

    /// Index into `regimes` governing the return from day `day - 1` to `day`.
    /// Day 0 belongs to the first regime.
    pub fn regime_of(&self, day: usize) -> usize {
        let cycle: usize = self.regimes.iter().map(|r| r.days).sum();
        let mut pos = day.saturating_sub(1) % cycle;
        for (k, r) in self.regimes.iter().enumerate() {
            if pos < r.days {
                return k;
            }
            pos -= r.days;
        }
        unreachable!("position reduced modulo the cycle length")
    }

    /// Regime label of every day in the generated calendar.
    pub fn regime_labels(&self) -> Vec<usize> {
        (0..self.n_days).map(|d| self.regime_of(d)).collect()
    }
}

/// Monday-to-Friday calendar starting at the first weekday on or after `start`.
fn business_days(start: NaiveDate, n: usize) -> Vec<NaiveDate> {
    let mut out = Vec::with_capacity(n);
    let mut d = start;
    while out.len() < n {
        if !matches!(d.weekday(), Weekday::Sat | Weekday::Sun) {
            out.push(d);
        }
        d = d.succ_opt().expect("calendar overflow");
    }
    out
}

/// Draw a regime-switching geometric random walk. Each day's log return is
/// `drift + x_t - x_{t-1}` where the deviation `x` follows
/// `x_t = (1 - reversion) x_{t-1} + vol * z`.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<MarketFrame> {
    spec.validate()?;
    let (n, t) = (spec.n_assets, spec.n_days);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.unwrap_or(0));
    let mut trend = vec![spec.initial_price.ln(); n];
    let mut dev = vec![0.0; n];
    let mut close: Vec<f64> = vec![spec.initial_price; n];
    let mut features = Vec::with_capacity(t * n * 4);
    for day in 0..t {
        let regime = &spec.regimes[spec.regime_of(day)];
        for i in 0..n {
            let vol = regime.vol_of(i);
            let open = close[i];
            if day > 0 {
                let z: f64 = rng.sample(StandardNormal);
                trend[i] += regime.drift_of(i);
                dev[i] = (1.0 - regime.reversion) * dev[i] + vol * z;
                close[i] = (trend[i] + dev[i]).exp();
            }
            let c = close[i];
            let up: f64 = rng.sample::<f64, _>(StandardNormal).abs();
            let down: f64 = rng.sample::<f64, _>(StandardNormal).abs();
            let high = open.max(c) * (0.5 * vol * up).exp();
            let low = open.min(c) * (-0.5 * vol * down).exp();
            features.extend([open, high, low, c]);
        }
    }
    MarketFrame::new(
        (0..n).map(|i| format!("S{i:02}")).collect(),
        business_days(spec.start_date, t),
        OHLC.iter().map(|s| s.to_string()).collect(),
        features,
    )
}
