//! `rml` command-line interface.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};

use rml::encoder::EncoderParams;
use rml::eval::evaluate_model;
use rml::experiment::{
    dataset_config, run_experiment, run_training, sweep_report, thread_budget, train_config,
    ExperimentSpec, KvConfig,
};
use rml::losses::LossVariant;
use rml::synth_data::{generate, inject_noise, NoiseSpec, PairDataset, SplitFractions};

#[derive(Parser)]
#[command(name = "rml", version, about = "Robust text-to-image matching under noisy correspondence")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset, optionally with injected noise.
    GenData(GenDataArgs),
    /// Train on a dataset file and write history, checkpoints and metrics.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a split of a dataset file.
    Evaluate(EvaluateArgs),
    /// Run a grid of experiments from a key = value spec.
    Experiment(ExperimentArgs),
    /// Turn a summary CSV into a long-format sweep table.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    identities: Option<usize>,
    #[arg(long = "images-per-id")]
    images_per_id: Option<usize>,
    #[arg(long)]
    captions_per_image: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    data_noise_std: Option<f64>,
    #[arg(long)]
    prototype_offset: Option<f64>,
    /// Fraction of pairs whose captions are shuffled.
    #[arg(long, default_value_t = 0.0)]
    noise_rate: f64,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Noise injected into the training split.
    #[arg(long)]
    noise_rate: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    select_ratio: Option<f64>,
    #[arg(long)]
    loss: Option<LossVariant>,
    #[arg(long)]
    lr: Option<f64>,
    /// Epochs before consensus division starts.
    #[arg(long)]
    warmup_epochs: Option<usize>,
    /// Epochs of linear learning-rate ramp.
    #[arg(long)]
    lr_warmup_epochs: Option<usize>,
    /// Train on every pair without consensus division.
    #[arg(long)]
    no_ccd: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Identity-disjoint split to evaluate, as laid out by `train`.
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// `key=value` overrides applied on top of the spec file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    summary: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn load_kv(path: Option<&PathBuf>) -> anyhow::Result<KvConfig> {
    Ok(match path {
        Some(p) => KvConfig::load(p)?,
        None => KvConfig::default(),
    })
}

fn set_opt<T: ToString>(kv: &mut KvConfig, key: &str, v: Option<T>) {
    if let Some(v) = v {
        kv.set(key, v.to_string());
    }
}

fn gen_data(a: GenDataArgs) -> anyhow::Result<()> {
    let mut kv = load_kv(a.config.as_ref())?;
    set_opt(&mut kv, "identities", a.identities);
    set_opt(&mut kv, "images_per_id", a.images_per_id);
    set_opt(&mut kv, "captions_per_image", a.captions_per_image);
    set_opt(&mut kv, "dim", a.dim);
    set_opt(&mut kv, "data_noise_std", a.data_noise_std);
    set_opt(&mut kv, "prototype_offset", a.prototype_offset);
    set_opt(&mut kv, "data_seed", a.seed);
    let cfg = dataset_config(&kv)?;
    let mut data = generate(&cfg)?;
    if a.noise_rate > 0.0 {
        data = inject_noise(
            &data,
            &NoiseSpec {
                noise_rate: a.noise_rate,
                seed: rml::synth_data::noise_seed(cfg.seed),
            },
        )?;
    }
    data.save(&a.out)?;
    println!("wrote {} pairs ({} noisy) to {}", data.len(), data.num_noisy(), a.out.display());
    Ok(())
}

fn train(a: TrainArgs) -> anyhow::Result<()> {
    let mut kv = load_kv(a.config.as_ref())?;
    set_opt(&mut kv, "epochs", a.epochs);
    set_opt(&mut kv, "batch_size", a.batch_size);
    set_opt(&mut kv, "margin", a.margin);
    set_opt(&mut kv, "tau", a.tau);
    set_opt(&mut kv, "select_ratio", a.select_ratio);
    set_opt(&mut kv, "loss", a.loss);
    set_opt(&mut kv, "lr", a.lr);
    set_opt(&mut kv, "warmup_epochs", a.warmup_epochs);
    set_opt(&mut kv, "lr_warmup_epochs", a.lr_warmup_epochs);
    set_opt(&mut kv, "seed", a.seed);
    set_opt(&mut kv, "noise_rate", a.noise_rate);
    if a.no_ccd {
        kv.set("ccd", "off");
    }
    let cfg = train_config(&kv)?;
    let noise_rate: f64 = kv.get("noise_rate")?.unwrap_or(0.0);
    let data = PairDataset::load(&a.data)?;
    let out = run_training(&data, noise_rate, &cfg, &a.out_dir, true)?;
    let m = &out.last.metrics;
    println!(
        "epochs={} rank1={} rank5={} rank10={} mAP={} mINP={} similarity_std={}",
        out.state.epoch, m.rank1, m.rank5, m.rank10, m.map, m.minp, out.last.similarity_std
    );
    if let Some((epoch, best)) = &out.best {
        println!("best epoch {epoch}: rank1={} mAP={}", best.metrics.rank1, best.metrics.map);
    }
    println!("outputs in {}", a.out_dir.display());
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> anyhow::Result<()> {
    let params = EncoderParams::load(&a.checkpoint)?;
    let data = PairDataset::load(&a.data)?;
    let target = match a.split {
        SplitArg::All => data,
        s => {
            let splits = data.split(SplitFractions::default())?;
            match s {
                SplitArg::Train => splits.train,
                SplitArg::Val => splits.val,
                _ => splits.test,
            }
        }
    };
    let eval = evaluate_model(&params, &target)?;
    let json = eval.to_json();
    match &a.out {
        Some(p) => json.save(p)?,
        None => println!("{}", serde_json::to_string_pretty(&json)?),
    }
    Ok(())
}

fn experiment(a: ExperimentArgs) -> anyhow::Result<bool> {
    let mut kv = KvConfig::load(&a.config)?;
    for o in &a.overrides {
        kv.set_override(o)?;
    }
    if let Some(d) = &a.out_dir {
        kv.set("out_dir", d.display().to_string());
    }
    let spec = ExperimentSpec::from_kv(&kv)?;
    let summary = run_experiment(&spec, thread_budget())?;
    let failed = summary.rows.iter().filter(|r| !r.is_ok()).count();
    println!(
        "{}: {} cells, {} failed; summary at {}",
        spec.name,
        summary.rows.len(),
        failed,
        spec.out_dir.join("summary.csv").display()
    );
    Ok(summary.all_ok())
}

fn report(a: ReportArgs) -> anyhow::Result<()> {
    let text = std::fs::read_to_string(&a.summary)
        .with_context(|| format!("reading {}", a.summary.display()))?;
    let long = sweep_report(&text)?;
    std::fs::write(&a.out, long).with_context(|| format!("writing {}", a.out.display()))?;
    Ok(())
}

fn run() -> anyhow::Result<bool> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenData(a) => gen_data(a)?,
        Command::Train(a) => train(a)?,
        Command::Evaluate(a) => evaluate(a)?,
        Command::Experiment(a) => return experiment(a),
        Command::Report(a) => report(a)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
