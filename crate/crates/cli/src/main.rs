use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use rxt::bench::data::{gen_dialogues, read_dataset, write_dataset, DataConfig};
use rxt::bench::efficacy::{ablation_drop, run_seeds, GapReport};
use rxt::bench::latency::{latency_bench, LatencyRow};
use rxt::bench::report::{cost_rows, emit_report, read_cost_csv, read_eval_csv, read_latency_csv, CostRow, EvalRow};
use rxt::bench::BenchConfig;
use rxt::model::checkpoint::{self, load_expecting};
use rxt::model::{Baseline, Rxt};
use rxt::runtime::repl::run_repl;
use rxt::runtime::{load_session, save_session, Engine, GenerationSettings, Sampling, UpdateMode};
use rxt::training::curriculum::{run_curriculum, train_baseline, Stage, TrainConfig};

/// Reactive encoder-decoder with a fixed-size short-term memory.
#[derive(Parser)]
#[command(name = "rxt", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Interactive chat on stdin/stdout with a trained checkpoint.
    Chat(ChatArgs),
    /// Run curriculum stages, writing checkpoints and metrics.csv.
    Train(TrainArgs),
    /// Latency, cost-model, or evaluation benchmarks as CSV plus summary.txt.
    Bench(BenchArgs),
    /// Generate the synthetic fact-recall dialogues.
    GenData(GenDataArgs),
}

#[derive(Args)]
struct ChatArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Sampling temperature; greedy decoding when omitted.
    #[arg(long, conflicts_with = "greedy")]
    temp: Option<f64>,
    #[arg(long)]
    greedy: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 32)]
    max_new_tokens: usize,
    /// Memory state file: loaded if present, written on exit.
    #[arg(long)]
    session: Option<PathBuf>,
    /// Append one JSON line per interaction.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Run memory updates on the calling thread instead of in the background.
    #[arg(long)]
    inline: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    #[value(name = "3")]
    Three,
    #[value(name = "4")]
    Four,
    Baseline,
    /// Stages 1 to 4, then the baseline.
    All,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_enum)]
    stage: StageArg,
    /// TOML training config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory written by `gen-data`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BenchKind {
    Latency,
    Cost,
    Eval,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(value_enum)]
    kind: BenchKind,
    /// TOML bench config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 3)]
    turns: usize,
    #[arg(long, default_value_t = 2000)]
    dialogues: usize,
    #[arg(long, default_value_t = 3)]
    value_len: usize,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Chat(a) => chat(a),
        Command::Train(a) => train(a),
        Command::Bench(a) => bench(a),
        Command::GenData(a) => gen_data(a),
    }
}

fn chat(a: ChatArgs) -> Result<()> {
    let (model, _): (Rxt, _) = checkpoint::load(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let model = Arc::new(model);
    let stm = match &a.session {
        Some(p) if p.exists() => load_session(p, &model)?,
        _ => model.initial_stm()?,
    };
    let mode = if a.inline { UpdateMode::Inline } else { UpdateMode::Background };
    let mut engine = Engine::with_stm(model.clone(), mode, stm)?;
    let settings = GenerationSettings {
        max_new_tokens: a.max_new_tokens,
        sampling: match a.temp {
            Some(tau) => Sampling::Temperature { tau, seed: a.seed },
            None => Sampling::Greedy,
        },
        ..Default::default()
    };
    settings.validate()?;
    let mut log = match &a.log {
        Some(p) => Some(BufWriter::new(
            File::options().create(true).append(true).open(p).with_context(|| format!("opening {}", p.display()))?,
        )),
        None => None,
    };
    let summary = run_repl(
        &mut engine,
        &settings,
        io::stdin().lock(),
        io::stdout().lock(),
        log.as_mut().map(|w| w as &mut dyn Write),
    )?;
    if let Some(w) = log.as_mut() {
        w.flush()?;
    }
    if let Some(p) = &a.session {
        save_session(p, &model, &engine.stm())?;
    }
    if let Some(e) = engine.take_update_error() {
        log::warn!("last memory update failed: {e}");
    }
    log::info!("{} interactions, {} resets, {} errors", summary.interactions, summary.resets, summary.errors);
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    let data = read_dataset(&a.data).with_context(|| format!("reading dataset from {}", a.data.display()))?;
    let stages: Vec<Stage> = match a.stage {
        StageArg::One => vec![Stage::Joint],
        StageArg::Two => vec![Stage::Sft],
        StageArg::Three => vec![Stage::MemAttn],
        StageArg::Four => vec![Stage::MemoryAware],
        StageArg::Baseline => vec![],
        StageArg::All => Stage::ALL.to_vec(),
    };
    let mut summaries = run_curriculum(&cfg, &data, &a.out, &stages)?;
    if matches!(a.stage, StageArg::Baseline | StageArg::All) {
        summaries.push(train_baseline(&cfg, &data, &a.out)?);
    }
    for s in summaries {
        println!(
            "{}: {} steps, final loss {:.4}, {:.1}s -> {}",
            s.stage,
            s.steps,
            s.final_loss,
            s.seconds,
            s.checkpoint.display()
        );
    }
    Ok(())
}

fn read_or_empty<T>(path: &Path, read: fn(&Path) -> rxt::Result<Vec<T>>) -> Result<Vec<T>> {
    if path.exists() {
        Ok(read(path)?)
    } else {
        Ok(Vec::new())
    }
}

fn bench(a: BenchArgs) -> Result<()> {
    let cfg = match &a.config {
        Some(p) => BenchConfig::load(p)?,
        None => BenchConfig::default(),
    };
    // keep results from other bench kinds already in the output directory
    let mut latency: Vec<LatencyRow> = read_or_empty(&a.out.join("latency.csv"), read_latency_csv)?;
    let mut cost: Vec<CostRow> = read_or_empty(&a.out.join("cost.csv"), read_cost_csv)?;
    let mut eval: Vec<EvalRow> = read_or_empty(&a.out.join("eval.csv"), read_eval_csv)?;
    match a.kind {
        BenchKind::Latency => latency = run_latency(&cfg)?,
        BenchKind::Cost => cost = cost_rows(&cfg.cost)?,
        BenchKind::Eval => eval = run_eval(&cfg, &a.out)?,
    }
    let summary = emit_report(&a.out, &latency, &cost, &eval)?;
    print!("{}", summary.to_text());
    Ok(())
}

fn run_latency(cfg: &BenchConfig) -> Result<Vec<LatencyRow>> {
    let (rxt, base) = match (&cfg.rxt_checkpoint, &cfg.baseline_checkpoint) {
        (Some(r), Some(b)) => {
            let (rxt, _): (Rxt, _) = checkpoint::load(r)?;
            let (base, _): (Baseline, _) = load_expecting(b, &rxt.config)?;
            (rxt, base)
        }
        _ => (Rxt::new(cfg.model.clone())?, Baseline::new(cfg.model.clone())?),
    };
    Ok(latency_bench(Arc::new(rxt), &base, &cfg.latency)?)
}

fn run_eval(cfg: &BenchConfig, out: &Path) -> Result<Vec<EvalRow>> {
    let results = run_seeds(&cfg.train, &cfg.data, &cfg.seeds, &out.join("runs"))?;
    for r in &results {
        println!(
            "seed {}: stage-3 cosine {:.4}, fact accuracy drop with zeroed memory {:.1}%",
            r.seed,
            r.stage3_cosine,
            100.0 * ablation_drop(r)
        );
    }
    let gap = GapReport::new(&results);
    println!(
        "fact PPL gap (baseline - rxt): mean {:.3}, sd rxt {:.3}, sd baseline {:.3}",
        gap.mean_gap, gap.sd_rxt, gap.sd_baseline
    );
    Ok(results.iter().flat_map(|r| r.eval_rows()).collect())
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    if a.turns < 2 {
        bail!("--turns must be at least 2");
    }
    let cfg = DataConfig {
        seed: a.seed,
        n_dialogues: a.dialogues,
        n_turns: a.turns,
        value_len: a.value_len,
        ..Default::default()
    };
    let ds = gen_dialogues(&cfg, rxt::model::ModelConfig::default().vocab_size)?;
    write_dataset(&a.out, &ds)?;
    let text = format!(
        "seed {}\nturns {}\ntrain {}\nval {}\ntest {}\n",
        a.seed,
        a.turns,
        ds.train.len(),
        ds.val.len(),
        ds.test.len()
    );
    std::fs::write(a.out.join("summary.txt"), &text)?;
    print!("{text}");
    Ok(())
}
