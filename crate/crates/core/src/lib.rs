//! Adaptive-rebalancing portfolio agent: autodiff tensors, market data,
//! trading environment, attention encoder, hybrid policy, PPO training and
//! backtesting.

pub mod backtest;
pub mod config;
pub mod encoder;
pub mod env;
pub mod error;
pub mod market;
pub mod policy;
pub mod ppo;
pub mod rng;
pub mod tensor;

pub use backtest::{compare, compute_metrics, run_backtest, BacktestReport, MetricOptions, Metrics, Strategy};
pub use config::{RunConfig, Segment, Segments, StrategySpec};
pub use encoder::{AttentionMode, EncoderConfig};
pub use env::{EnvConfig, Environment, StepResult, TraceRecord};
pub use error::{Error, Result};
pub use market::{generate_synthetic, load_csv, save_csv, MarketFrame, SynthSpec};
pub use policy::{ActMode, Agent, AgentSpec};
pub use ppo::{EpisodeLog, PpoConfig, Trainer};
pub use tensor::{Checkpoint, Tensor};
