//! Aligned OHLC panels, look-back state windows, price relatives and a
//! seeded regime-switching market generator.

mod csv_io;
mod synth;

pub use csv_io::{load_csv, save_csv, AlignPolicy, LoadOptions};
pub use synth::{generate_synthetic, RegimeSpec, SynthSpec};

use chrono::NaiveDate;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default feature schema.
pub const OHLC: [&str; 4] = ["open", "high", "low", "close"];

/// A T x N x F panel of per-asset features indexed by trading day.
#[derive(Debug, Clone, PartialEq)]
pub struct MarketFrame {
    assets: Vec<String>,
    dates: Vec<NaiveDate>,
    feature_names: Vec<String>,
    close_index: usize,
    /// Row-major `[day][asset][feature]`.
    features: Vec<f64>,
}

impl MarketFrame {
    pub fn new(
        assets: Vec<String>,
        dates: Vec<NaiveDate>,
        feature_names: Vec<String>,
        features: Vec<f64>,
    ) -> Result<Self> {
        let close_index = feature_names
            .iter()
            .position(|f| f == "close")
            .ok_or_else(|| Error::Contract("feature schema has no `close` column".into()))?;
        let (t, n, f) = (dates.len(), assets.len(), feature_names.len());
        if features.len() != t * n * f {
            return Err(Error::shape(
                "market frame",
                format!("{t} days x {n} assets x {f} features != {}", features.len()),
            ));
        }
        if n == 0 {
            return Err(Error::Contract("market frame has no assets".into()));
        }
        if let Some(w) = dates.windows(2).find(|w| w[0] >= w[1]) {
            return Err(Error::Contract(format!(
                "calendar not strictly increasing at {} -> {}",
                w[0], w[1]
            )));
        }
        if let Some(v) = features.iter().find(|v| !v.is_finite()) {
            return Err(Error::Contract(format!("non-finite feature value {v}")));
        }
        let frame = Self {
            assets,
            dates,
            feature_names,
            close_index,
            features,
        };
        for day in 0..t {
            for asset in 0..n {
                let c = frame.close(day, asset);
                if c <= 0.0 {
                    return Err(Error::Contract(format!(
                        "close of {} on {} is {c}; prices must be positive",
                        frame.assets[asset], frame.dates[day]
                    )));
                }
            }
        }
        Ok(frame)
    }

    pub fn n_days(&self) -> usize {
        self.dates.len()
    }

    pub fn n_assets(&self) -> usize {
        self.assets.len()
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn assets(&self) -> &[String] {
        &self.assets
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn feature(&self, day: usize, asset: usize, feature: usize) -> f64 {
        let (n, f) = (self.n_assets(), self.n_features());
        self.features[(day * n + asset) * f + feature]
    }

    /// All features of one asset on one day.
    pub fn row(&self, day: usize, asset: usize) -> &[f64] {
        let (n, f) = (self.n_assets(), self.n_features());
        let start = (day * n + asset) * f;
        &self.features[start..start + f]
    }

    pub fn close(&self, day: usize, asset: usize) -> f64 {
        self.feature(day, asset, self.close_index)
    }

    pub fn closes(&self, day: usize) -> Vec<f64> {
        (0..self.n_assets()).map(|i| self.close(day, i)).collect()
    }

    /// Contiguous sub-panel of days `[start, end)`.
    pub fn slice_days(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.n_days() {
            return Err(Error::Range(format!(
                "day range [{start}, {end}) outside calendar of {} days",
                self.n_days()
            )));
        }
        let stride = self.n_assets() * self.n_features();
        Ok(Self {
            assets: self.assets.clone(),
            dates: self.dates[start..end].to_vec(),
            feature_names: self.feature_names.clone(),
            close_index: self.close_index,
            features: self.features[start * stride..end * stride].to_vec(),
        })
    }

    /// Sub-panel of the days falling within `[from, to]` (inclusive).
    pub fn slice_dates(&self, from: NaiveDate, to: NaiveDate) -> Result<Self> {
        let start = self.dates.partition_point(|d| *d < from);
        let end = self.dates.partition_point(|d| *d <= to);
        if start >= end {
            return Err(Error::Range(format!("no trading days between {from} and {to}")));
        }
        self.slice_days(start, end)
    }

    /// Look-back window of `lookback` days ending at (and including) `epoch`.
    pub fn state_at(&self, epoch: usize, lookback: usize) -> Result<StateTensor> {
        if lookback == 0 {
            return Err(Error::Contract("look-back window must be at least 1".into()));
        }
        if epoch >= self.n_days() || epoch + 1 < lookback {
            return Err(Error::Range(format!(
                "epoch {epoch} with look-back {lookback} outside calendar of {} days",
                self.n_days()
            )));
        }
        let (n, f) = (self.n_assets(), self.n_features());
        let first = epoch + 1 - lookback;
        let mut window = Vec::with_capacity(n * lookback * f);
        for asset in 0..n {
            for day in first..=epoch {
                window.extend_from_slice(self.row(day, asset));
            }
        }
        Ok(StateTensor {
            window: Tensor::new(vec![n, lookback, f], window)?,
            epoch,
            close_index: self.close_index,
        })
    }

    /// `y_i = close_{i, t+h} / close_{i, t}`.
    pub fn price_relative(&self, epoch: usize, horizon: usize) -> Result<Vec<f64>> {
        let end = epoch + horizon;
        if end >= self.n_days() {
            return Err(Error::Range(format!(
                "horizon {horizon} from day {epoch} runs past the last day {}",
                self.n_days().saturating_sub(1)
            )));
        }
        Ok((0..self.n_assets())
            .map(|i| self.close(end, i) / self.close(epoch, i))
            .collect())
    }
}

/// N x tau x F look-back window ending at `epoch`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateTensor {
    pub window: Tensor,
    pub epoch: usize,
    close_index: usize,
}

impl StateTensor {
    /// Encoder input: every feature divided by the asset's last close in the
    /// window, minus one, so a flat price history maps to zeros.
    pub fn normalized(&self) -> Tensor {
        let s = self.window.shape();
        let (n, tau, f) = (s[0], s[1], s[2]);
        let src = self.window.data();
        let mut out = Vec::with_capacity(src.len());
        for asset in 0..n {
            let block = &src[asset * tau * f..(asset + 1) * tau * f];
            let last_close = block[(tau - 1) * f + self.close_index];
            out.extend(block.iter().map(|v| v / last_close - 1.0));
        }
        Tensor::new(s.to_vec(), out).expect("same shape")
    }
}
