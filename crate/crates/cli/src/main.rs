use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use adarl_core::backtest::{write_equity, write_table};
use adarl_core::env::write_trace;
use adarl_core::{
    compare, generate_synthetic, run_backtest, save_csv, Agent, BacktestReport, Checkpoint, Error,
    MarketFrame, Result, RunConfig, Segment, Strategy, StrategySpec, SynthSpec, Trainer,
};
use chrono::NaiveDate;
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "adarl", version, about = "Adaptive-rebalancing portfolio agent")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an agent on the train segment, selecting on the validation segment.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Resume from this checkpoint instead of starting fresh.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Greedy evaluation of a trained checkpoint on one segment.
    Backtest {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = SegmentArg::Test)]
        segment: SegmentArg,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run every configured strategy at every cost multiplier.
    Compare {
        #[arg(long)]
        config: PathBuf,
        /// Trained agent for the `adaptive` and `fixed-h` strategies.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = SegmentArg::Test)]
        segment: SegmentArg,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Generate a synthetic market CSV from a TOML spec.
    Synth {
        #[arg(long)]
        config: PathBuf,
        /// Output CSV file.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SegmentArg {
    Train,
    Val,
    Test,
}

impl From<SegmentArg> for Segment {
    fn from(s: SegmentArg) -> Self {
        match s {
            SegmentArg::Train => Segment::Train,
            SegmentArg::Val => Segment::Validation,
            SegmentArg::Test => Segment::Test,
        }
    }
}

const META_TRAIN_DATES: &str = "train_dates";

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_invalid_input() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train {
            config,
            checkpoint,
            out,
            seed,
        } => {
            let cfg = load_config(&config, out, seed)?;
            cmd_train(&cfg, checkpoint.as_deref())
        }
        Command::Backtest {
            config,
            checkpoint,
            segment,
            out,
            seed,
        } => {
            let cfg = load_config(&config, out, seed)?;
            cmd_backtest(&cfg, &checkpoint, segment.into())
        }
        Command::Compare {
            config,
            checkpoint,
            segment,
            out,
            seed,
        } => {
            let cfg = load_config(&config, out, seed)?;
            cmd_compare(&cfg, checkpoint.as_deref(), segment.into())
        }
        Command::Synth { config, out, seed } => cmd_synth(&config, &out, seed),
    }
}

fn load_config(path: &Path, out: Option<PathBuf>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(out) = out {
        cfg.output_dir = out;
    }
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))
}

fn create_file(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(format!("creating {}", path.display()), e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn date_span(frame: &MarketFrame) -> serde_json::Value {
    let d = frame.dates();
    serde_json::json!([d[0], d[d.len() - 1]])
}

fn cmd_train(cfg: &RunConfig, resume: Option<&Path>) -> Result<()> {
    let started = Instant::now();
    let frame = cfg.load_frame()?;
    let seg = cfg.split(&frame)?;
    let spec = cfg.agent_spec(frame.n_features());
    let mut trainer = match resume {
        Some(path) => {
            let mut t = Trainer::from_checkpoint(&Checkpoint::load(path)?)?;
            if t.agent.spec != spec {
                return Err(Error::Checkpoint(
                    "checkpoint network does not match the config".into(),
                ));
            }
            // Only the episode target may change on resume.
            t.ppo.episodes = cfg.ppo.episodes;
            if t.ppo != cfg.ppo || t.env != cfg.env {
                return Err(Error::Checkpoint(
                    "checkpoint training settings differ from the config".into(),
                ));
            }
            t
        }
        None => Trainer::new(spec, cfg.ppo.clone(), cfg.env.clone(), cfg.seed)?,
    };

    let dir = &cfg.output_dir;
    create_dir(dir)?;
    write_text(&dir.join("config.toml"), &cfg.echo().to_toml_string()?)?;
    let log_path = dir.join("train_log.jsonl");
    let log_file = if resume.is_some() {
        fs::OpenOptions::new().create(true).append(true).open(&log_path)
    } else {
        File::create(&log_path)
    }
    .map_err(|e| Error::io(format!("opening {}", log_path.display()), e))?;
    let mut log = BufWriter::new(log_file);

    let remaining = cfg.ppo.episodes.saturating_sub(trainer.state.episode);
    eprintln!(
        "training {remaining} episodes on {} days ({} assets)",
        seg.train.n_days(),
        seg.train.n_assets()
    );
    trainer.train(&seg.train, Some(&seg.validation), remaining, &mut log)?;

    let span = date_span(&seg.train);
    let mut last = trainer.checkpoint()?;
    last.meta.insert(META_TRAIN_DATES.into(), span.clone());
    let mut best = trainer.best_checkpoint().cloned().unwrap_or_else(|| last.clone());
    best.meta.insert(META_TRAIN_DATES.into(), span);
    last.save(&dir.join("checkpoint_last.json"))?;
    best.save(&dir.join("checkpoint_best.json"))?;
    eprintln!(
        "done in {:.1}s, best validation value {:?}",
        started.elapsed().as_secs_f64(),
        trainer.state.best_validation
    );
    Ok(())
}

/// Load a checkpoint and check it fits `frame` and the configured
/// look-back window.
fn load_agent(path: &Path, cfg: &RunConfig, frame: &MarketFrame, segment: Segment) -> Result<Agent> {
    let ck = Checkpoint::load(path)?;
    if segment != Segment::Train {
        if let Some(span) = ck.meta.get(META_TRAIN_DATES) {
            let span: [NaiveDate; 2] = serde_json::from_value(span.clone())?;
            let (first, last) = (frame.dates()[0], frame.dates()[frame.n_days() - 1]);
            if first <= span[1] && span[0] <= last {
                return Err(Error::config(
                    "segment",
                    format!("{segment} segment overlaps the training dates {} to {}", span[0], span[1]),
                ));
            }
        }
    }
    let agent = Trainer::from_checkpoint(&ck)?.agent;
    if agent.spec.n_features != frame.n_features() || agent.spec.lookback != cfg.env.lookback {
        return Err(Error::Checkpoint(format!(
            "checkpoint expects {} features and look-back {}, config gives {} and {}",
            agent.spec.n_features,
            agent.spec.lookback,
            frame.n_features(),
            cfg.env.lookback
        )));
    }
    Ok(agent)
}

fn write_report(dir: &Path, report: &BacktestReport) -> Result<()> {
    create_dir(dir)?;
    let text = serde_json::to_string_pretty(report)?;
    write_text(&dir.join("report.json"), &text)?;
    let mut eq = create_file(&dir.join("equity.csv"))?;
    write_equity(report, &mut eq)?;
    eq.flush().map_err(|e| Error::io("writing equity series", e))?;
    let mut tr = create_file(&dir.join("trace.jsonl"))?;
    write_trace(&report.decisions, &mut tr)?;
    tr.flush().map_err(|e| Error::io("writing trace", e))
}

fn print_metrics(report: &BacktestReport) {
    let m = &report.metrics;
    println!(
        "{:<18} x{:<4} CAGR {:>8.3}%  SR {:>7.4}  SoR {:>7.4}  CR {:>7.4}  MDD {:>7.3}%  V {:.6}",
        report.strategy, report.cost_multiplier, m.cagr, m.sharpe, m.sortino, m.calmar, m.mdd, report.final_value
    );
}

fn cmd_backtest(cfg: &RunConfig, checkpoint: &Path, segment: Segment) -> Result<()> {
    let frame = cfg.load_frame()?;
    let seg = cfg.split(&frame)?;
    let data = seg.get(segment);
    let agent = load_agent(checkpoint, cfg, data, segment)?;
    let report = run_backtest(Strategy::Learned(&agent), data, &cfg.env, &cfg.metrics)?;
    write_report(&cfg.output_dir.join(format!("backtest-{segment}")), &report)?;
    print_metrics(&report);
    Ok(())
}

fn cmd_compare(cfg: &RunConfig, checkpoint: Option<&Path>, segment: Segment) -> Result<()> {
    let frame = cfg.load_frame()?;
    let seg = cfg.split(&frame)?;
    let data = seg.get(segment);
    let specs = cfg.compare.parsed_strategies()?;
    let agent = checkpoint
        .map(|p| load_agent(p, cfg, data, segment))
        .transpose()?;
    let needs_dense = specs.contains(&StrategySpec::AdaptiveDense);
    let dense = match (&cfg.compare.dense_checkpoint, needs_dense) {
        (Some(p), true) => Some(load_agent(p, cfg, data, segment)?),
        (None, true) => {
            return Err(Error::config(
                "compare.dense_checkpoint",
                "required by the adaptive-dense strategy",
            ))
        }
        _ => None,
    };
    let mut strategies = Vec::with_capacity(specs.len());
    for s in specs {
        strategies.push(match s {
            StrategySpec::Adaptive => Strategy::Learned(agent.as_ref().ok_or_else(|| {
                Error::config("checkpoint", "the adaptive strategy needs --checkpoint")
            })?),
            StrategySpec::AdaptiveDense => Strategy::Learned(dense.as_ref().expect("loaded above")),
            StrategySpec::Fixed(h) => Strategy::Fixed {
                h,
                agent: agent.as_ref(),
            },
            StrategySpec::IndexProxy => Strategy::IndexProxy,
            StrategySpec::UniformBuyHold => Strategy::UniformBuyHold,
            StrategySpec::Csm => Strategy::Csm,
            StrategySpec::Blsw => Strategy::Blsw,
        });
    }
    let reports = compare(&strategies, data, &cfg.env, &cfg.compare.cost_multipliers, &cfg.metrics)?;

    let dir = cfg.output_dir.join(format!("compare-{segment}"));
    let equity_dir = dir.join("equity");
    create_dir(&equity_dir)?;
    let mut table = create_file(&dir.join("table.csv"))?;
    write_table(&reports, &mut table)?;
    table.flush().map_err(|e| Error::io("writing comparison table", e))?;
    for r in &reports {
        let mut f = create_file(&equity_dir.join(format!("{}_x{}.csv", r.strategy, r.cost_multiplier)))?;
        write_equity(r, &mut f)?;
        f.flush().map_err(|e| Error::io("writing equity series", e))?;
        print_metrics(r);
    }
    Ok(())
}

fn cmd_synth(spec_path: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let text = fs::read_to_string(spec_path)
        .map_err(|e| Error::config("config", format!("{}: {e}", spec_path.display())))?;
    let mut spec: SynthSpec =
        toml::from_str(&text).map_err(|e| Error::config("config", e.to_string()))?;
    if seed.is_some() {
        spec.seed = seed;
    }
    let frame = generate_synthetic(&spec.seeded_from(0))?;
    save_csv(&frame, out)?;
    eprintln!("wrote {} days x {} assets to {}", frame.n_days(), frame.n_assets(), out.display());
    Ok(())
}
