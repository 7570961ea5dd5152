//! `confusable`: train, evaluate and benchmark confusion-guided few-shot
//! learners from flat config files, with seeded reproducible runs.
//!
//! Exit codes: 0 success, 2 configuration/input error, 3 numerical failure.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use confusable_core::{
    cme_benchmark, cost_table_csv, evaluate_all_way, generate_synthetic, run_training, Config,
    DataBundle, Dataset, EmbeddingLearner, Error, LearnerKind, LearnerParams, Split, TrainSinks,
};

#[derive(Parser)]
#[command(name = "confusable", version, about, disable_help_subcommand = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic confusable-class dataset directory.
    Generate(GenerateArgs),
    /// Train a learner; writes manifest, metrics CSV and checkpoints.
    Train(TrainArgs),
    /// Evaluate a parameter checkpoint with an all-way support set.
    Eval(EvalArgs),
    /// Measure estimator refresh cost against the traditional full pass.
    BenchCme(BenchArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Config file with a [synthetic] section.
    #[arg(long)]
    config: PathBuf,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// Override synthetic.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Split tag to store (meta_train|validation|meta_test).
    #[arg(long, default_value = "meta_train")]
    split: String,
}

#[derive(Args)]
struct TrainArgs {
    /// Config file with [train]/[episode]/[cme]/[model]/[data] sections.
    #[arg(long)]
    config: PathBuf,
    /// Output run directory.
    #[arg(long)]
    out: PathBuf,
    /// Override train.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override train.mode (confusable|confusable-count|traditional|uniform).
    #[arg(long)]
    mode: Option<String>,
    /// Override train.episodes.
    #[arg(long)]
    episodes: Option<usize>,
    /// Write an episode trace log (targets, distractors, objective).
    #[arg(long)]
    trace: bool,
    /// Worker-thread cap (used to parallelize sweep values).
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Sweep one hyperparameter, e.g. `rho=0,0.3,0.6,0.9,1.0`
    /// (supported: rho, n_d, n_te, n_tc).
    #[arg(long)]
    sweep: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    /// Parameter checkpoint written during training.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory to evaluate on.
    #[arg(long)]
    dataset: PathBuf,
    /// Probability head (prototypical|matching).
    #[arg(long, default_value = "prototypical")]
    learner: String,
    /// Support instances per class.
    #[arg(long, default_value_t = 5)]
    shots: usize,
    /// Query instances per class.
    #[arg(long, default_value_t = 5)]
    queries: usize,
    /// Evaluation episodes (reported mean and stddev).
    #[arg(long, default_value_t = 10)]
    episodes: usize,
    /// Evaluate on a seeded subset of this many classes (default: all).
    #[arg(long)]
    way: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the report JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Config file; uses [data], [model], [episode], [cme] and [bench] keys.
    #[arg(long)]
    config: PathBuf,
    /// Write the cost table CSV here (also printed to stdout).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override bench.seed.
    #[arg(long)]
    seed: Option<u64>,
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(args) => cmd_generate(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::BenchCme(args) => cmd_bench(args),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Numerical(_) => 3,
        _ => 2,
    }
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Written before a run starts; the config snapshot plus seed fully
/// determine the outputs.
#[derive(Serialize)]
struct RunManifest {
    command: String,
    version: String,
    seed: u64,
    out_dir: String,
    started_unix: u64,
    config: BTreeMap<String, String>,
}

fn write_manifest(out: &Path, command: &str, seed: u64, cfg: &Config) -> Result<(), Error> {
    fs::create_dir_all(out)?;
    let manifest = RunManifest {
        command: command.to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed,
        out_dir: out.display().to_string(),
        started_unix: unix_now(),
        config: cfg
            .entries()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect(),
    };
    let f = fs::File::create(out.join("manifest.json"))?;
    serde_json::to_writer_pretty(f, &manifest)
        .map_err(|e| Error::config(format!("writing manifest: {e}")))?;
    Ok(())
}

fn write_summary(out: &Path, summary: &serde_json::Value) -> Result<(), Error> {
    let f = fs::File::create(out.join("summary.json"))?;
    serde_json::to_writer_pretty(f, summary)
        .map_err(|e| Error::config(format!("writing summary: {e}")))?;
    Ok(())
}

fn cmd_generate(args: GenerateArgs) -> Result<(), Error> {
    let mut cfg = Config::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.set("synthetic.seed", seed.to_string());
    }
    let split = Split::parse(&args.split)?;
    let spec = cfg.synthetic_spec()?;
    write_manifest(&args.out, "generate", spec.seed, &cfg)?;
    let dataset = generate_synthetic(&spec)?.with_split(split);
    dataset.save_dir(&args.out)?;
    println!(
        "generated k={} d_in={} instances={} split={} checksum={:016x}",
        dataset.k(),
        dataset.d_in(),
        dataset.k() * spec.n_per_class,
        dataset.split(),
        dataset.checksum()
    );
    Ok(())
}

fn load_bundle(cfg: &Config) -> Result<DataBundle, Error> {
    let train_path: String = cfg.require("data.train")?;
    let train = Dataset::load_dir(Path::new(&train_path))?;
    let val = match cfg.raw("data.val") {
        Some(p) => Some(Dataset::load_dir(Path::new(p))?),
        None => None,
    };
    let test = match cfg.raw("data.test") {
        Some(p) => Some(Dataset::load_dir(Path::new(p))?),
        None => None,
    };
    Ok(DataBundle { train, val, test })
}

fn cmd_train(args: TrainArgs) -> Result<(), Error> {
    let mut cfg = Config::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.set("train.seed", seed.to_string());
    }
    if let Some(mode) = &args.mode {
        cfg.set("train.mode", mode.clone());
    }
    if let Some(episodes) = args.episodes {
        cfg.set("train.episodes", episodes.to_string());
    }
    match &args.sweep {
        None => train_single(&cfg, &args.out, args.trace),
        Some(sweep) => train_sweep(&cfg, &args.out, args.trace, sweep, args.threads.max(1)),
    }
}

fn train_single(cfg: &Config, out: &Path, trace: bool) -> Result<(), Error> {
    let train_cfg = cfg.train_config()?;
    let data = load_bundle(cfg)?;
    write_manifest(out, "train", train_cfg.seed, cfg)?;
    let mut sinks = TrainSinks {
        metrics: Some(Box::new(fs::File::create(out.join("metrics.csv"))?)),
        trace: if trace {
            Some(Box::new(fs::File::create(out.join("trace.jsonl"))?))
        } else {
            None
        },
        checkpoint_dir: Some(out.join("checkpoints")),
    };
    let state = run_training(&data, &train_cfg, &mut sinks)?;
    state.params.save(&out.join("params_final.ckpt"))?;
    state.estimator.save(&out.join("estimator_final.ckpt"))?;
    let last = state.history.last();
    write_summary(
        out,
        &serde_json::json!({
            "finished_unix": unix_now(),
            "episodes_run": state.episode,
            "mode": train_cfg.mode.to_string(),
            "final_train_j": last.map(|r| r.train_j),
            "final_val_accuracy": state.eval_history.last(),
        }),
    )?;
    println!(
        "trained mode={} episodes={} out={}",
        train_cfg.mode,
        state.episode,
        out.display()
    );
    Ok(())
}

const SWEEP_KEYS: [(&str, &str); 4] = [
    ("rho", "cme.rho"),
    ("n_d", "episode.n_d"),
    ("n_te", "cme.n_te"),
    ("n_tc", "episode.n_tc"),
];

fn train_sweep(
    cfg: &Config,
    out: &Path,
    trace: bool,
    sweep: &str,
    threads: usize,
) -> Result<(), Error> {
    let (param, values) = sweep
        .split_once('=')
        .ok_or_else(|| Error::config("sweep must look like `rho=0,0.5,0.9`"))?;
    let key = SWEEP_KEYS
        .iter()
        .find(|(name, _)| *name == param)
        .map(|(_, key)| *key)
        .ok_or_else(|| {
            Error::config(format!(
                "unsupported sweep parameter `{param}` (supported: {})",
                SWEEP_KEYS.map(|(n, _)| n).join(", ")
            ))
        })?;
    let values: Vec<String> = values.split(',').map(|v| v.trim().to_string()).collect();
    if values.is_empty() {
        return Err(Error::config("sweep needs at least one value"));
    }
    // Validate every configuration up front.
    let mut jobs = Vec::new();
    for v in &values {
        let mut sub = cfg.clone();
        sub.set(key, v.clone());
        sub.train_config()?;
        jobs.push((v.clone(), sub, out.join(format!("sweep_{param}_{v}"))));
    }
    fs::create_dir_all(out)?;
    let failures = std::sync::Mutex::new(Vec::<String>::new());
    std::thread::scope(|scope| {
        for chunk in jobs.chunks(threads.max(1)) {
            let handles: Vec<_> = chunk
                .iter()
                .map(|(v, sub, dir)| {
                    let failures = &failures;
                    scope.spawn(move || {
                        if let Err(e) = train_single(sub, dir, trace) {
                            failures.lock().unwrap().push(format!("{param}={v}: {e}"));
                        }
                    })
                })
                .collect();
            for h in handles {
                h.join().expect("sweep worker panicked");
            }
        }
    });
    let failures = failures.into_inner().unwrap();
    if let Some(first) = failures.first() {
        return Err(Error::config(format!("sweep run failed: {first}")));
    }
    println!("swept {param} over {} values into {}", values.len(), out.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), Error> {
    let params = LearnerParams::load(&args.checkpoint)?;
    let dataset = Dataset::load_dir(&args.dataset)?;
    if params.d_in() != dataset.d_in() {
        return Err(Error::config(format!(
            "checkpoint expects d_in={}, dataset has d_in={}",
            params.d_in(),
            dataset.d_in()
        )));
    }
    let kind = LearnerKind::parse(&args.learner)?;
    let dataset = match args.way {
        None => dataset,
        Some(way) => {
            let mut rng = confusable_core::rng::substream(args.seed, "eval-way");
            confusable_core::dataset::subset_classes(&dataset, way, &mut rng)?
        }
    };
    let learner = EmbeddingLearner::new(&params, kind);
    let report = evaluate_all_way(
        &dataset,
        &learner,
        args.shots,
        args.queries,
        args.episodes,
        args.seed,
    )?;
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::config(format!("serializing report: {e}")))?;
    println!("{json}");
    if let Some(out) = &args.out {
        fs::write(out, json)?;
    }
    Ok(())
}

fn cmd_bench(args: BenchArgs) -> Result<(), Error> {
    let mut cfg = Config::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.set("bench.seed", seed.to_string());
    }
    let data_path: String = cfg.require("data.train")?;
    let dataset = Dataset::load_dir(Path::new(&data_path))?;
    let train_cfg = cfg.train_config()?;
    let seed: u64 = cfg.get_or("bench.seed", 0)?;
    let repetitions: usize = cfg.get_or("bench.repetitions", 5)?;
    let variants: Vec<(usize, usize)> = cfg
        .get_or("bench.variants", "1:8".to_string())?
        .split(',')
        .map(|pair| -> Result<(usize, usize), Error> {
            let (m, n) = pair
                .trim()
                .split_once(':')
                .ok_or_else(|| Error::config(format!("bad bench variant `{pair}` (want M:n_te)")))?;
            Ok((
                m.parse()
                    .map_err(|_| Error::config(format!("bad M in `{pair}`")))?,
                n.parse()
                    .map_err(|_| Error::config(format!("bad n_te in `{pair}`")))?,
            ))
        })
        .collect::<Result<_, _>>()?;
    let params = match cfg.raw("bench.checkpoint") {
        Some(path) => LearnerParams::load(Path::new(path))?,
        None => {
            let mut rng = confusable_core::rng::substream(seed, "bench-init");
            LearnerParams::init(dataset.d_in(), &train_cfg.hidden, train_cfg.d_emb, &mut rng)
        }
    };
    let learner = EmbeddingLearner::new(&params, train_cfg.learner);
    let rows = cme_benchmark(
        &dataset,
        &learner,
        train_cfg.episode.n_s,
        train_cfg.episode.n_q,
        train_cfg.cme_temperature,
        &variants,
        repetitions,
        seed,
    )?;
    let csv = cost_table_csv(&rows);
    print!("{csv}");
    if let Some(out) = &args.out {
        let mut f = fs::File::create(out)?;
        f.write_all(csv.as_bytes())?;
    }
    Ok(())
}
