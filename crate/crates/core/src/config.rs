//! Run configuration: data source, chronological splits and every module
//! config, read from one TOML file.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::backtest::MetricOptions;
use crate::encoder::EncoderConfig;
use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::market::{generate_synthetic, load_csv, AlignPolicy, LoadOptions, MarketFrame, SynthSpec};
use crate::policy::AgentSpec;
use crate::ppo::PpoConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Long-format CSV file. Relative paths are resolved against the
    /// directory of the config file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthSpec>,
    #[serde(default)]
    pub align: AlignPolicy,
}

/// Inclusive calendar range; dates are quoted `"YYYY-MM-DD"` strings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DateRange {
    pub start: NaiveDate,
    pub end: NaiveDate,
}

/// Either three explicit date ranges or three fractions of the aligned
/// calendar, in train/validation/test order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<DateRange>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation: Option<DateRange>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<DateRange>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fractions: Option<[f64; 3]>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train: None,
            validation: None,
            test: None,
            fractions: Some([0.6, 0.2, 0.2]),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Segment {
    Train,
    Validation,
    Test,
}

impl Segment {
    pub fn as_str(self) -> &'static str {
        match self {
            Segment::Train => "train",
            Segment::Validation => "val",
            Segment::Test => "test",
        }
    }
}

impl fmt::Display for Segment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Segment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Segment::Train),
            "val" | "validation" => Ok(Segment::Validation),
            "test" => Ok(Segment::Test),
            other => Err(Error::config("segment", format!("unknown segment `{other}`"))),
        }
    }
}

/// Strategy names accepted in `[compare] strategies`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StrategySpec {
    Adaptive,
    AdaptiveDense,
    Fixed(usize),
    IndexProxy,
    UniformBuyHold,
    Csm,
    Blsw,
}

impl FromStr for StrategySpec {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Ok(match s {
            "adaptive" | "learned" => StrategySpec::Adaptive,
            "adaptive-dense" => StrategySpec::AdaptiveDense,
            "index-proxy" | "index" => StrategySpec::IndexProxy,
            "uniform-buy-hold" => StrategySpec::UniformBuyHold,
            "csm" => StrategySpec::Csm,
            "blsw" => StrategySpec::Blsw,
            other => match other.strip_prefix("fixed-").map(str::parse::<usize>) {
                Some(Ok(h)) if h > 0 => StrategySpec::Fixed(h),
                _ => return Err(format!("unknown strategy `{other}`")),
            },
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareConfig {
    pub strategies: Vec<String>,
    pub cost_multipliers: Vec<f64>,
    /// Checkpoint of an agent trained with intervals `1..=20`, used for
    /// the `adaptive-dense` strategy.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dense_checkpoint: Option<PathBuf>,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            strategies: [
                "adaptive",
                "fixed-1",
                "fixed-5",
                "fixed-20",
                "index-proxy",
                "csm",
                "blsw",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
            cost_multipliers: vec![1.0, 5.0, 10.0],
            dense_checkpoint: None,
        }
    }
}

impl CompareConfig {
    pub fn parsed_strategies(&self) -> Result<Vec<StrategySpec>> {
        self.strategies
            .iter()
            .map(|s| s.parse().map_err(|m| Error::config("compare.strategies", m)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub env: EnvConfig,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub ppo: PpoConfig,
    #[serde(default)]
    pub metrics: MetricOptions,
    #[serde(default)]
    pub compare: CompareConfig,
}

/// The three chronological segments of a run.
#[derive(Debug, Clone)]
pub struct Segments {
    pub train: MarketFrame,
    pub validation: MarketFrame,
    pub test: MarketFrame,
}

impl Segments {
    pub fn get(&self, segment: Segment) -> &MarketFrame {
        match segment {
            Segment::Train => &self.train,
            Segment::Validation => &self.validation,
            Segment::Test => &self.test,
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config("config", e.to_string()))
    }

    /// Parse, resolve relative paths against the file's directory and
    /// validate.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("config", format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = self.data.path.as_mut() {
            fix(p);
        }
        if let Some(p) = self.compare.dense_checkpoint.as_mut() {
            fix(p);
        }
        fix(&mut self.output_dir);
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.data.path, &self.data.synth) {
            (Some(_), Some(_)) => {
                return Err(Error::config("data", "set either `path` or `synth`, not both"))
            }
            (None, None) => return Err(Error::config("data", "one of `path` or `synth` is required")),
            (Some(p), None) if !p.is_file() => {
                return Err(Error::config(
                    "data.path",
                    format!("{} does not exist", p.display()),
                ))
            }
            (None, Some(s)) => s.validate()?,
            _ => {}
        }
        self.env.validate()?;
        self.encoder.validate(self.env.lookback)?;
        self.ppo.validate()?;
        self.validate_split()?;
        if !(self.metrics.periods_per_year.is_finite() && self.metrics.periods_per_year > 0.0) {
            return Err(Error::config("metrics.periods_per_year", "must be positive"));
        }
        let strategies = self.compare.parsed_strategies()?;
        for s in &strategies {
            if let StrategySpec::Fixed(h) = s {
                if !self.env.intervals.contains(h) {
                    return Err(Error::config(
                        "compare.strategies",
                        format!("fixed-{h} is not one of env.intervals {:?}", self.env.intervals),
                    ));
                }
            }
        }
        if self.compare.cost_multipliers.iter().any(|m| !(m.is_finite() && *m >= 0.0)) {
            return Err(Error::config("compare.cost_multipliers", "must be finite and non-negative"));
        }
        if let Some(p) = &self.compare.dense_checkpoint {
            if !p.is_file() {
                return Err(Error::config(
                    "compare.dense_checkpoint",
                    format!("{} does not exist", p.display()),
                ));
            }
        }
        Ok(())
    }

    fn validate_split(&self) -> Result<()> {
        let s = &self.split;
        let ranges = [s.train, s.validation, s.test];
        let n_ranges = ranges.iter().filter(|r| r.is_some()).count();
        match (s.fractions, n_ranges) {
            (Some(_), 0) => {}
            (Some(_), _) => {
                return Err(Error::config("split", "use either date ranges or fractions, not both"))
            }
            (None, 3) => {}
            (None, _) => {
                return Err(Error::config(
                    "split",
                    "train, validation and test ranges are all required",
                ))
            }
        }
        if let Some(f) = s.fractions {
            if f.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
                return Err(Error::config("split.fractions", "each fraction must be positive"));
            }
            if f.iter().sum::<f64>() > 1.0 + 1e-9 {
                return Err(Error::config("split.fractions", "fractions sum to more than 1"));
            }
        }
        let names = ["split.train", "split.validation", "split.test"];
        let mut prev_end: Option<NaiveDate> = None;
        for (r, name) in ranges.iter().zip(names) {
            let Some(r) = r else { continue };
            if r.start > r.end {
                return Err(Error::config(name, "start is after end"));
            }
            if prev_end.is_some_and(|p| r.start <= p) {
                return Err(Error::config(name, "segments must be chronological and non-overlapping"));
            }
            prev_end = Some(r.end);
        }
        Ok(())
    }

    /// Synth spec with its seed filled in from the run seed.
    pub fn synth_spec(&self) -> Option<SynthSpec> {
        self.data.synth.as_ref().map(|s| s.seeded_from(self.seed))
    }

    /// Copy with every derived value made explicit, so that feeding it back
    /// in reproduces the run.
    pub fn echo(&self) -> Self {
        let mut out = self.clone();
        out.data.synth = self.synth_spec();
        out
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("config", e.to_string()))
    }

    pub fn agent_spec(&self, n_features: usize) -> AgentSpec {
        AgentSpec {
            encoder: self.encoder.clone(),
            intervals: self.env.intervals.clone(),
            lookback: self.env.lookback,
            n_features,
        }
    }

    pub fn load_frame(&self) -> Result<MarketFrame> {
        let min_days = self.env.min_days();
        let frame = match (&self.data.path, self.synth_spec()) {
            (Some(p), _) => load_csv(
                p,
                &LoadOptions {
                    align: self.data.align,
                    min_days,
                    ..LoadOptions::default()
                },
            )?,
            (None, Some(spec)) => generate_synthetic(&spec)?,
            (None, None) => return Err(Error::config("data", "no data source")),
        };
        if frame.n_days() < min_days {
            return Err(Error::InsufficientData {
                needed: min_days,
                available: frame.n_days(),
            });
        }
        Ok(frame)
    }

    /// Cut `frame` into the configured segments; each must hold at least
    /// one look-back window plus the longest interval.
    pub fn split(&self, frame: &MarketFrame) -> Result<Segments> {
        let n = frame.n_days();
        let [train, validation, test] = if let Some(f) = self.split.fractions {
            let a = (f[0] * n as f64).floor() as usize;
            let b = a + (f[1] * n as f64).floor() as usize;
            let c = (b + (f[2] * n as f64).floor() as usize).min(n);
            [
                frame.slice_days(0, a)?,
                frame.slice_days(a, b)?,
                frame.slice_days(b, c)?,
            ]
        } else {
            let get = |r: Option<DateRange>| {
                let r = r.expect("validated");
                frame.slice_dates(r.start, r.end)
            };
            [
                get(self.split.train)?,
                get(self.split.validation)?,
                get(self.split.test)?,
            ]
        };
        let need = self.env.min_days();
        for (seg, name) in [(&train, "train"), (&validation, "validation"), (&test, "test")] {
            if seg.n_days() < need {
                return Err(Error::config(
                    format!("split.{name}"),
                    format!("segment has {} days, needs at least {need}", seg.n_days()),
                ));
            }
        }
        Ok(Segments {
            train,
            validation,
            test,
        })
    }
}
