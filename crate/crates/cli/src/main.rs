use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use msvad_core::checkpoint::Checkpoint;
use msvad_core::config::{Ablation, RunConfig};
use msvad_core::data::{generate_dataset, ClipStore};
use msvad_core::eval::{self, ProfileReport};
use msvad_core::objective::{read_scores_csv, write_scores_csv, Normalization};
use msvad_core::score::Scorer;
use msvad_core::train::{Trainer, LOSS_LOG_HEADER};
use msvad_core::Tensor;

const CONFIG_ECHO: &str = "config.toml";
const CHECKPOINT: &str = "model.ckpt";
const LOSS_LOG: &str = "loss_log.csv";
const REPORT: &str = "report.txt";

#[derive(Parser)]
#[command(name = "msvad", version, about = "Multi-scale state-space video anomaly detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset of normal training clips and labelled test clips.
    Generate(GenerateArgs),
    /// Train on the normal clips of a dataset.
    Train(TrainArgs),
    /// Write per-frame anomaly scores for the test clips of a dataset.
    Score(ScoreArgs),
    /// Frame-level AUC of a directory of score files.
    Eval(EvalArgs),
    /// Parameter count, FLOP estimate and measured throughput of a checkpoint.
    Profile(ProfileArgs),
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; missing keys take the preset's values.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Base configuration when no file is given.
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Single-threaded, bit-reproducible execution. Every command already
    /// runs on one thread; the flag is accepted for scripts that request it.
    #[arg(long)]
    deterministic: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Full,
    Desk,
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    train_clips: Option<usize>,
    #[arg(long)]
    test_clips: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
    /// Also write the packed raw container next to the PNG frames.
    #[arg(long)]
    raw: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset written by `generate`. Its echoed config is used when
    /// neither --config nor --preset is given.
    #[arg(long)]
    data: PathBuf,
    /// Ablation preset: M1..M4 or L1..L3.
    #[arg(long)]
    ablation: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Continue from a checkpoint; its config is kept apart from the step budget.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Also checkpoint every this many steps.
    #[arg(long)]
    checkpoint_every: Option<usize>,
}

#[derive(Args)]
struct ScoreArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Clip name prefix selecting the clips to score.
    #[arg(long, default_value = "test_")]
    prefix: String,
    #[arg(long, value_enum)]
    normalization: Option<NormArg>,
    /// Weight of the frame PSNR in the combined score.
    #[arg(long)]
    alpha: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum NormArg {
    PerVideo,
    Global,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Directory of `<clip>.csv` score files.
    #[arg(long)]
    scores: PathBuf,
    /// Dataset holding the ground-truth labels.
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args)]
struct ProfileArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 2)]
    warmup: usize,
    #[arg(long, default_value_t = 8)]
    timed: usize,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Score(a) => cmd_score(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Profile(a) => cmd_profile(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

/// File, else preset, else `fallback`; then the seed flag.
fn resolve_config(common: &Common, fallback: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = match (&common.config, common.preset) {
        (Some(_), Some(_)) => unreachable!("clap rejects --config with --preset"),
        (Some(path), None) => load_config(path)?,
        (None, Some(Preset::Full)) => RunConfig::full(),
        (None, Some(Preset::Desk)) => RunConfig::desk(),
        (None, None) => match fallback {
            Some(path) if path.exists() => load_config(path)?,
            _ => RunConfig::full(),
        },
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn load_config(path: &Path) -> Result<RunConfig> {
    RunConfig::load(path).with_context(|| format!("loading config {}", path.display()))
}

fn prepare_out(common: &Common, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&common.out)
        .with_context(|| format!("creating output directory {}", common.out.display()))?;
    cfg.validate()?;
    cfg.save(&common.out.join(CONFIG_ECHO))?;
    Ok(())
}

fn cmd_generate(a: GenerateArgs) -> Result<()> {
    let mut cfg = resolve_config(&a.common, None)?;
    if let Some(n) = a.train_clips {
        cfg.data.train_clips = n;
    }
    if let Some(n) = a.test_clips {
        cfg.data.test_clips = n;
    }
    if let Some(n) = a.frames {
        cfg.data.frames_per_clip = n;
    }
    prepare_out(&a.common, &cfg)?;
    let store = generate_dataset(&cfg.dataset_spec(a.raw), &a.common.out)?;
    println!(
        "generated {} clips under {}",
        store.names().len(),
        a.common.out.display()
    );
    Ok(())
}

fn load_clips(store: &ClipStore, prefix: &str) -> Result<Vec<Tensor>> {
    let names = store.names_with_prefix(prefix);
    if names.is_empty() {
        bail!("no clips named {prefix}* under {}", store.root().display());
    }
    names
        .iter()
        .map(|n| store.frames(n).with_context(|| format!("reading clip {n}")))
        .collect()
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let store = ClipStore::open(&a.data)?;
    let clips = load_clips(&store, "train_")?;
    let mut trainer = match &a.resume {
        Some(path) => {
            let c = &a.common;
            if c.config.is_some() || c.preset.is_some() || c.seed.is_some() || a.ablation.is_some() {
                bail!("--resume keeps the checkpoint's config; drop --config, --preset, --seed and --ablation");
            }
            let mut ckpt = Checkpoint::load(path)?;
            apply_budget(&mut ckpt.config, &a);
            Trainer::resume(&ckpt, clips)?
        }
        None => {
            let mut cfg = resolve_config(&a.common, Some(&a.data.join(CONFIG_ECHO)))?;
            if let Some(name) = &a.ablation {
                cfg.ablation = Ablation::preset(name)?;
            }
            apply_budget(&mut cfg, &a);
            Trainer::new(cfg, clips)?
        }
    };
    prepare_out(&a.common, &trainer.cfg)?;
    let log_path = a.common.out.join(LOSS_LOG);
    let fresh = trainer.step == 0 || !log_path.exists();
    let file = fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(!fresh)
        .truncate(fresh)
        .open(&log_path)?;
    let mut log = BufWriter::new(file);
    if fresh {
        writeln!(log, "{LOSS_LOG_HEADER}")?;
    }
    let total = trainer.total_steps();
    let every = a.checkpoint_every.unwrap_or(trainer.steps_per_epoch()).max(1);
    let ckpt_path = a.common.out.join(CHECKPOINT);
    log::info!(
        "training {} parameters for {} steps ({} per epoch) from step {}",
        trainer.params.num_elements(),
        total,
        trainer.steps_per_epoch(),
        trainer.step
    );
    while trainer.step < total {
        let until = ((trainer.step / every + 1) * every).min(total);
        trainer.run_until(until, &mut log)?;
        log.flush()?;
        trainer.checkpoint().save(&ckpt_path)?;
    }
    trainer.checkpoint().save(&ckpt_path)?;
    println!("trained to step {}; checkpoint {}", trainer.step, ckpt_path.display());
    Ok(())
}

fn apply_budget(cfg: &mut RunConfig, a: &TrainArgs) {
    if let Some(n) = a.epochs {
        cfg.train.epochs = n;
    }
    if let Some(n) = a.max_steps {
        cfg.train.max_steps = n;
    }
    if let Some(n) = a.batch_size {
        cfg.train.batch_size = n;
    }
    if let Some(lr) = a.lr {
        cfg.train.lr = lr;
    }
}

fn cmd_score(a: ScoreArgs) -> Result<()> {
    if a.common.config.is_some() || a.common.preset.is_some() {
        bail!("score takes its config from the checkpoint");
    }
    let mut ckpt = Checkpoint::load(&a.checkpoint)?;
    if let Some(n) = a.normalization {
        ckpt.config.score.normalization = match n {
            NormArg::PerVideo => Normalization::PerVideo,
            NormArg::Global => Normalization::Global,
        };
    }
    if let Some(alpha) = a.alpha {
        ckpt.config.score.alpha = Some(alpha);
    }
    prepare_out(&a.common, &ckpt.config)?;
    let store = ClipStore::open(&a.data)?;
    let names = store.names_with_prefix(&a.prefix);
    if names.is_empty() {
        bail!("no clips named {}* under {}", a.prefix, a.data.display());
    }
    let scorer = Scorer::from_checkpoint(&ckpt)?;
    let scored = scorer.score(&store, &names)?;
    for clip in &scored {
        write_scores_csv(&a.common.out.join(format!("{}.csv", clip.name)), &clip.records)?;
    }
    println!("scored {} clips into {}", scored.len(), a.common.out.display());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let store = ClipStore::open(&a.data)?;
    let mut files: Vec<PathBuf> = fs::read_dir(&a.scores)
        .with_context(|| format!("reading {}", a.scores.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    files.sort();
    if files.is_empty() {
        bail!("no score files in {}", a.scores.display());
    }
    let (mut scores, mut labels) = (Vec::new(), Vec::new());
    for f in &files {
        let clip = f.file_stem().unwrap().to_string_lossy().into_owned();
        let truth = store
            .labels(&clip)
            .with_context(|| format!("labels of clip {clip}"))?;
        for r in read_scores_csv(f)? {
            let Some(&l) = truth.get(r.frame_index) else {
                bail!("{}: frame {} has no label", f.display(), r.frame_index);
            };
            scores.push(r.anomaly_score);
            labels.push(l);
        }
    }
    let cfg = resolve_config(&a.common, Some(&a.scores.join(CONFIG_ECHO)))?;
    prepare_out(&a.common, &cfg)?;
    let report = eval::evaluate(&scores, &labels)?;
    print!("{}", report.text());
    fs::write(a.common.out.join("eval.txt"), report.text())?;
    merge_report(&a.common.out.join(REPORT), &report.key_values())?;
    Ok(())
}

fn cmd_profile(a: ProfileArgs) -> Result<()> {
    if a.common.config.is_some() || a.common.preset.is_some() {
        bail!("profile takes its config from the checkpoint");
    }
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    prepare_out(&a.common, &ckpt.config)?;
    let scorer = Scorer::from_checkpoint(&ckpt)?;
    let cfg = &ckpt.config;
    let shape = [cfg.data.k, cfg.data.height, cfg.data.width, 3];
    let flops = eval::estimate_flops(cfg, &shape)?;
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(cfg.seed);
    let windows: Vec<Tensor> = (0..4).map(|_| Tensor::uniform(&shape, 0.0, 1.0, &mut rng)).collect();
    let fps = eval::measure_fps(
        &scorer.model,
        &scorer.params,
        &scorer.memories,
        &windows,
        a.warmup,
        a.timed,
        a.repeats,
    )?;
    let params = eval::count_params(&scorer.params);
    let report = ProfileReport {
        params,
        params_m: params as f64 / 1e6,
        flops_g: flops.gflops(),
        fps,
        flops,
    };
    print!("{}", report.text());
    fs::write(a.common.out.join("profile.txt"), report.text())?;
    merge_report(&a.common.out.join(REPORT), &report.key_values())?;
    Ok(())
}

/// Update `key=value` lines in place so eval and profile can share a report.
fn merge_report(path: &Path, pairs: &[(&str, String)]) -> Result<()> {
    let mut entries: BTreeMap<String, String> = BTreeMap::new();
    if let Ok(text) = fs::read_to_string(path) {
        for line in text.lines() {
            if let Some((k, v)) = line.split_once('=') {
                entries.insert(k.to_string(), v.to_string());
            }
        }
    }
    for (k, v) in pairs {
        entries.insert(k.to_string(), v.clone());
    }
    let pairs: Vec<(&str, String)> = entries.iter().map(|(k, v)| (k.as_str(), v.clone())).collect();
    eval::write_key_values(path, &pairs)?;
    Ok(())
}
