//! Subcommand implementations.

use std::path::{Path, PathBuf};

use candle::Device;
use clap::{Args, Parser, Subcommand};
use rand::Rng;
use udgan_core::data::{make_synthetic_with, DatasetManifest, Domain, ImageSize, PersonImage, Split, SyntheticSpec};
use udgan_core::metrics::evaluate;
use udgan_core::miner::validate_mining;
use udgan_core::nn::{device_from_env, load_checkpoint, read_checkpoint, Mode, QuadNoise, UdGan};
use udgan_core::train::{
    checkpoint_name, cosine_lr, epoch_rng, load_train_images, make_alternating_schedule, mine_target_pairs,
    run_stage1, run_stage2, run_stage3, shuffled_batches, DomainSet, RunOptions, MINING_REPORT_FILE,
};
use udgan_core::nn::Ctx;
use udgan_core::Parallelism;

use crate::config::{Preset, RunConfig};
use crate::error::{CliError, CliResult};
use crate::montage::{montage, Tile};

pub const SUMMARY_FILE: &str = "eval_summary.csv";
pub const PER_QUERY_FILE: &str = "eval_per_query.csv";
pub const GRID_FILE: &str = "grid.png";
pub const GRID_PAIRS_FILE: &str = "grid_pairs.csv";
pub const SPEC_FILE: &str = "spec.toml";

/// Steps listed by `train --dry-run`.
const SCHEDULE_HEAD: usize = 8;

#[derive(Debug, Parser)]
#[command(name = "udgan", version, about = "Domain-adaptive person re-identification with identity/content swapping")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a labelled synthetic dataset (PNG files plus manifest.csv).
    MakeSynthetic(MakeSyntheticArgs),
    /// Run one training stage, resuming from the previous stage's checkpoint.
    Train(TrainArgs),
    /// Mine same-identity pairs on the target training split.
    MinePairs(MineArgs),
    /// Cross-camera retrieval evaluation (CMC and mAP) on query/gallery.
    Evaluate(EvaluateArgs),
    /// Montage of originals, self-reconstructions and identity swaps.
    GenerateGrid(GridArgs),
}

/// Flags shared by the configuration-driven commands.
#[derive(Debug, Args)]
pub struct Common {
    /// TOML run configuration; absent fields keep the preset's values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Preset::Default)]
    pub preset: Preset,
    /// Output directory (overrides `out`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Random seed (overrides `train.seed`).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Disable data parallelism.
    #[arg(long)]
    pub sequential: bool,
    /// Suppress per-epoch progress lines.
    #[arg(long)]
    pub quiet: bool,
}

impl Common {
    fn resolve(&self) -> CliResult<RunConfig> {
        let mut cfg = RunConfig::load(self.config.as_deref(), self.preset)?;
        if let Some(out) = &self.out {
            cfg.out = out.clone();
        }
        if let Some(seed) = self.seed {
            cfg.train.seed = seed;
        }
        Ok(cfg)
    }

    fn options(&self) -> RunOptions {
        RunOptions {
            par: self.par(),
            verbose: !self.quiet,
        }
    }

    fn par(&self) -> Parallelism {
        if self.sequential {
            Parallelism::Sequential
        } else {
            Parallelism::Parallel
        }
    }
}

#[derive(Debug, Args)]
pub struct MakeSyntheticArgs {
    #[arg(long, default_value_t = 16)]
    pub ids: usize,
    #[arg(long, default_value_t = 8)]
    pub per_id: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 48)]
    pub height: usize,
    #[arg(long, default_value_t = 16)]
    pub width: usize,
    #[arg(long, default_value_t = 4)]
    pub cameras: u32,
    /// Generator depth the image size must be compatible with.
    #[arg(long, default_value_t = 4)]
    pub generator_blocks: usize,
    /// `source` or `target`.
    #[arg(long, default_value = "source", value_parser = ["source", "target"])]
    pub domain: String,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
    pub stage: u8,
    #[command(flatten)]
    pub common: Common,
    /// Source dataset root (overrides `source.root`).
    #[arg(long)]
    pub source: Option<PathBuf>,
    /// Target dataset root (overrides `target.root`).
    #[arg(long)]
    pub target: Option<PathBuf>,
    /// Validate the configuration and print the start of the schedule.
    #[arg(long)]
    pub dry_run: bool,
    /// Retrain even if this stage's checkpoint already exists.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct MineArgs {
    #[command(flatten)]
    pub common: Common,
    /// Model checkpoint (default: latest stage checkpoint in the output directory).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Target dataset root (overrides `target.root`).
    #[arg(long)]
    pub target: Option<PathBuf>,
    /// Score the pairs against the identities in the manifest.
    #[arg(long)]
    pub labels: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Dataset whose query and gallery splits are evaluated (default: target).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Label written into the summary row.
    #[arg(long, default_value = "eval")]
    pub tag: String,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Dataset to sample from (default: target).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Number of (identity, content) pairs, one montage column each.
    #[arg(long, default_value_t = 6)]
    pub pairs: usize,
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::MakeSynthetic(a) => cmd_make_synthetic(&a),
        Command::Train(a) => cmd_train(&a),
        Command::MinePairs(a) => cmd_mine_pairs(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
        Command::GenerateGrid(a) => cmd_generate_grid(&a),
    }
}

pub fn cmd_make_synthetic(a: &MakeSyntheticArgs) -> CliResult<()> {
    let spec = SyntheticSpec {
        num_identities: a.ids,
        images_per_identity: a.per_id,
        image_size: ImageSize::new(a.height, a.width),
        seed: a.seed,
        num_cameras: a.cameras,
        domain: if a.domain == "target" { Domain::Target } else { Domain::Source },
        generator_blocks: a.generator_blocks,
        ..SyntheticSpec::default()
    };
    let data = make_synthetic_with(&spec, Parallelism::Parallel)?;
    std::fs::create_dir_all(&a.out)?;
    let text = toml::to_string_pretty(&spec).map_err(|e| CliError::Runtime(e.to_string()))?;
    std::fs::write(a.out.join(SPEC_FILE), text)?;
    let manifest = data.write_to(&a.out)?;
    println!("wrote {} images to {}", manifest.len(), a.out.display());
    Ok(())
}

fn device() -> CliResult<Device> {
    device_from_env().map_err(|e| CliError::Config(e.to_string()))
}

fn to_device(images: Vec<PersonImage>, device: &Device) -> CliResult<Vec<PersonImage>> {
    if device.is_cpu() {
        return Ok(images);
    }
    images
        .into_iter()
        .map(|mut p| {
            p.pixels = p.pixels.to_device(device)?;
            Ok(p)
        })
        .collect()
}

fn load_split_images(
    manifest: &DatasetManifest,
    cfg: &RunConfig,
    splits: &[Split],
    domain: Domain,
    par: Parallelism,
    device: &Device,
) -> CliResult<Vec<PersonImage>> {
    let rows: Vec<usize> = manifest
        .entries()
        .iter()
        .enumerate()
        .filter(|(_, e)| splits.contains(&e.split))
        .map(|(i, _)| i)
        .collect();
    let m = &cfg.train.model;
    to_device(manifest.load_images(&rows, m.image_size, &m.normalization, domain, par)?, device)
}

fn load_train(manifest: &DatasetManifest, cfg: &RunConfig, domain: Domain, par: Parallelism, device: &Device) -> CliResult<Vec<PersonImage>> {
    to_device(load_train_images(manifest, &cfg.train, domain, par)?, device)
}

fn require_checkpoint(path: &Path, hint: &str) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Data(format!("{} not found; {hint}", path.display())))
    }
}

/// Prints the plan for `stage` without training.
fn dry_run(cfg: &RunConfig, stage: u8) -> CliResult<()> {
    let t = &cfg.train;
    let count = |role: &str, ds: &crate::config::DatasetConfig| -> CliResult<usize> {
        let n = ds.open(role)?.train_indices().len();
        println!("{role}: {n} training images");
        Ok(n)
    };
    let mut rng = epoch_rng(t.seed, stage, 0, 0);
    println!("stage {stage}: config valid, output directory {}", cfg.out.display());
    match stage {
        1 => {
            let n = count("source", &cfg.source)?;
            let batches = shuffled_batches(n, t.stage1.batch_size, 2, &mut rng);
            println!(
                "{} epochs x {} steps, warm-up {} epochs",
                t.stage1.epochs,
                batches.len(),
                t.stage1.warmup_epochs
            );
            for (k, b) in batches.iter().take(SCHEDULE_HEAD).enumerate() {
                println!("  epoch 1 step {}: S, {} images, lr {:.3e}", k + 1, b.len(), cosine_lr(0, t.stage1.epochs - 1, t.stage1.lr)?);
            }
        }
        2 => {
            let n = count("target", &cfg.target)?;
            let steps = n.div_ceil(t.stage2.batch_size / 2);
            println!("{} epochs x at most {steps} steps (pairs are mined when the stage starts)", t.stage2.epochs);
            for k in 0..steps.min(SCHEDULE_HEAD) {
                println!("  epoch 1 step {}: T, {} pairs, lr {:.3e}", k + 1, t.stage2.batch_size / 2, t.stage2.lr);
            }
        }
        _ => {
            let ns = count("source", &cfg.source)?;
            let nt = count("target", &cfg.target)?;
            let source_steps = shuffled_batches(ns, t.stage3.source_batch_size, 2, &mut rng).len();
            let target_steps = nt.div_ceil(t.stage3.target_batch_size / 2);
            let schedule = make_alternating_schedule(source_steps, target_steps)?;
            println!(
                "{} epochs x {} steps ({source_steps} source, at most {target_steps} target)",
                t.stage3.epochs,
                schedule.len()
            );
            for (k, s) in schedule.iter().take(SCHEDULE_HEAD).enumerate() {
                println!("  epoch 1 step {}: {} batch {}, lr {:.3e}", k + 1, s.domain, s.batch + 1, t.stage3.lr);
            }
        }
    }
    Ok(())
}

pub fn cmd_train(a: &TrainArgs) -> CliResult<()> {
    let mut cfg = a.common.resolve()?;
    if let Some(s) = &a.source {
        cfg.source.root = Some(s.clone());
    }
    if let Some(t) = &a.target {
        cfg.target.root = Some(t.clone());
    }
    cfg.validate()?;
    if a.dry_run {
        return dry_run(&cfg, a.stage);
    }
    cfg.write_effective()?;

    let out = &cfg.out;
    let ckpt = out.join(checkpoint_name(a.stage));
    if ckpt.is_file() && !a.force {
        let (meta, _) = read_checkpoint(&ckpt)?;
        let current = serde_json::to_value(&cfg.train).map_err(|e| CliError::Runtime(e.to_string()))?;
        if meta.stage == a.stage && meta.config == current {
            println!("stage {} already complete: {}", a.stage, ckpt.display());
            return Ok(());
        }
        return Err(CliError::Config(format!(
            "{} was produced with a different configuration; pass --force to retrain",
            ckpt.display()
        )));
    }
    let previous = (a.stage > 1).then(|| out.join(checkpoint_name(a.stage - 1)));
    if let Some(p) = &previous {
        require_checkpoint(p, &format!("run `udgan train --stage {}` first", a.stage - 1))?;
    }

    let device = device()?;
    let opts = a.common.options();
    let par = opts.par;
    let outcome = match a.stage {
        1 => {
            let manifest = cfg.source.open("source")?;
            let images = load_train(&manifest, &cfg, Domain::Source, par, &device)?;
            run_stage1(&cfg.train, DomainSet { manifest: &manifest, images: &images }, out, opts)?
        }
        2 => {
            let (model, _) = load_checkpoint(previous.as_deref().unwrap_or(&ckpt), &device)?;
            let manifest = cfg.target.open("target")?;
            let images = load_train(&manifest, &cfg, Domain::Target, par, &device)?;
            run_stage2(&cfg.train, model, DomainSet { manifest: &manifest, images: &images }, out, opts)?
        }
        _ => {
            let (model, _) = load_checkpoint(previous.as_deref().unwrap_or(&ckpt), &device)?;
            let source = cfg.source.open("source")?;
            let target = cfg.target.open("target")?;
            let source_images = load_train(&source, &cfg, Domain::Source, par, &device)?;
            let target_images = load_train(&target, &cfg, Domain::Target, par, &device)?;
            run_stage3(
                &cfg.train,
                model,
                DomainSet { manifest: &source, images: &source_images },
                DomainSet { manifest: &target, images: &target_images },
                out,
                opts,
            )?
        }
    };
    if let Some(acc) = outcome.train_accuracy {
        println!("training accuracy: {acc:.4}");
    }
    if let Some(report) = &outcome.mining {
        println!("mined pairs: {} kept of {}", report.kept_pairs, report.total_queries);
    }
    println!("checkpoint: {}", outcome.checkpoint.display());
    println!("metric log: {}", outcome.metric_log.display());
    Ok(())
}

/// The given checkpoint, or the newest stage checkpoint in `out`.
fn pick_checkpoint(explicit: Option<&Path>, out: &Path) -> CliResult<PathBuf> {
    if let Some(p) = explicit {
        require_checkpoint(p, "check the --checkpoint path")?;
        return Ok(p.to_path_buf());
    }
    (1..=3)
        .rev()
        .map(|k| out.join(checkpoint_name(k)))
        .find(|p| p.is_file())
        .ok_or_else(|| CliError::Data(format!("no stage checkpoint in {}; train first or pass --checkpoint", out.display())))
}

fn open_model(explicit: Option<&Path>, cfg: &RunConfig, device: &Device) -> CliResult<UdGan> {
    let path = pick_checkpoint(explicit, &cfg.out)?;
    let (model, _) = load_checkpoint(&path, device)?;
    if model.config().image_size != cfg.train.model.image_size {
        return Err(CliError::Config(format!(
            "{} expects {:?} images but the configuration says {:?}",
            path.display(),
            model.config().image_size,
            cfg.train.model.image_size
        )));
    }
    Ok(model)
}

pub fn cmd_mine_pairs(a: &MineArgs) -> CliResult<()> {
    let mut cfg = a.common.resolve()?;
    if let Some(t) = &a.target {
        cfg.target.root = Some(t.clone());
    }
    cfg.validate()?;
    cfg.write_effective()?;
    let device = device()?;
    let model = open_model(a.checkpoint.as_deref(), &cfg, &device)?;
    let manifest = cfg.target.open("target")?;
    let images = load_train(&manifest, &cfg, Domain::Target, a.common.par(), &device)?;
    let set = DomainSet { manifest: &manifest, images: &images };
    let (pairs, mut report) = mine_target_pairs(&cfg.train, &model, set, &cfg.out, a.common.par())?;
    if a.labels {
        let labels: Vec<i64> = images.iter().map(|p| p.identity).collect();
        report = validate_mining(&pairs, &labels)?;
        report.write_text(&cfg.out.join(MINING_REPORT_FILE))?;
    }
    print!("{report}");
    Ok(())
}

pub fn cmd_evaluate(a: &EvaluateArgs) -> CliResult<()> {
    let mut cfg = a.common.resolve()?;
    if let Some(d) = &a.data {
        cfg.target.root = Some(d.clone());
    }
    cfg.validate()?;
    cfg.write_effective()?;
    let device = device()?;
    let model = open_model(a.checkpoint.as_deref(), &cfg, &device)?;
    let manifest = cfg.target.open("target")?;
    let par = a.common.par();
    let queries = load_split_images(&manifest, &cfg, &[Split::Query], Domain::Target, par, &device)?;
    let gallery = load_split_images(&manifest, &cfg, &[Split::Gallery], Domain::Target, par, &device)?;
    let report = evaluate(&queries, &gallery, &model, cfg.train.eval_batch_size, par)?;
    report.write_summary_csv(&cfg.out.join(SUMMARY_FILE), &a.tag)?;
    report.write_per_query_csv(&cfg.out.join(PER_QUERY_FILE))?;
    println!(
        "{}: rank1 {:.4} rank5 {:.4} rank10 {:.4} mAP {:.4} over {} queries",
        a.tag,
        report.rank(1),
        report.rank(5),
        report.rank(10),
        report.map,
        report.num_valid_queries
    );
    Ok(())
}

#[derive(serde::Serialize)]
struct GridPair<'a> {
    column: usize,
    identity_path: &'a str,
    content_path: &'a str,
}

pub fn cmd_generate_grid(a: &GridArgs) -> CliResult<()> {
    let mut cfg = a.common.resolve()?;
    if let Some(d) = &a.data {
        cfg.target.root = Some(d.clone());
    }
    cfg.validate()?;
    if a.pairs == 0 {
        return Err(CliError::Config("--pairs must be at least 1".into()));
    }
    cfg.write_effective()?;
    let device = device()?;
    let model = open_model(a.checkpoint.as_deref(), &cfg, &device)?;
    let manifest = cfg.target.open("target")?;
    let images = load_split_images(&manifest, &cfg, &Split::ALL, Domain::Target, a.common.par(), &device)?;
    let people: Vec<usize> = (0..images.len()).filter(|&i| images[i].identity >= 0).collect();
    if people.iter().all(|&i| images[i].identity == images[people[0]].identity) {
        return Err(CliError::Data("generate-grid needs images of at least two identities".into()));
    }

    let mut rng = epoch_rng(cfg.train.seed, 5, 0, 0);
    let mut chosen = Vec::with_capacity(a.pairs);
    while chosen.len() < a.pairs {
        let first = people[rng.random_range(0..people.len())];
        let second = people[rng.random_range(0..people.len())];
        if images[first].identity != images[second].identity {
            chosen.push((first, second));
        }
    }
    let stack = |pick: fn(&(usize, usize)) -> usize| -> CliResult<candle::Tensor> {
        let t: Vec<&candle::Tensor> = chosen.iter().map(|c| &images[pick(c)].pixels).collect();
        Ok(candle::Tensor::stack(&t, 0)?)
    };
    let x1 = stack(|c| c.0)?;
    let x2 = stack(|c| c.1)?;
    let out = model.swap_generate(&x1, &x2, Mode::Eval, QuadNoise::Zero, &Ctx::new(cfg.train.seed))?;
    let norm = &cfg.train.model.normalization;
    let rows = [&x1, out.quad.get(0, 0), out.quad.get(0, 1)];
    let tiles: Vec<Vec<Tile>> = rows
        .iter()
        .map(|t| (0..a.pairs).map(|k| Ok(udgan_core::data::denormalize(&t.get(k)?, norm)?)).collect())
        .collect::<CliResult<_>>()?;
    let grid = montage(&tiles)?;
    let path = cfg.out.join(GRID_FILE);
    grid.save(&path).map_err(|e| CliError::Runtime(e.to_string()))?;

    let mut w = csv::Writer::from_path(cfg.out.join(GRID_PAIRS_FILE)).map_err(|e| CliError::Runtime(e.to_string()))?;
    for (k, &(first, second)) in chosen.iter().enumerate() {
        w.serialize(GridPair {
            column: k + 1,
            identity_path: &images[first].path,
            content_path: &images[second].path,
        })
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    w.flush()?;
    println!("wrote {} ({} x 3 tiles)", path.display(), a.pairs);
    Ok(())
}
