//! The three training stages.

use std::path::{Path, PathBuf};

use candle::{DType, Device, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::log::{write_metric_log, MetricRow};
use super::optim::{Adam, Optimizer, Sgd};
use super::schedule::{cosine_lr, epoch_rng, make_alternating_schedule, pair_batches, shuffled_batches, StepDomain};
use crate::data::{DatasetManifest, Domain, PersonImage};
use crate::losses::{adversarial_loss_d, adversarial_loss_g, identity_loss, kl_loss, reconstruction_loss, target_loss};
use crate::metrics::{cosine, embed_images};
use crate::miner::{mine_pairs, write_pairs_csv, MinedPair, MiningReport};
use crate::nn::{
    save_checkpoint, CheckpointMeta, Ctx, Mode, QuadNoise, SwapModes, UdGan, GROUP_CLASSIFIER, GROUP_CONTENT,
    GROUP_DISCRIMINATOR, GROUP_GENERATOR, GROUP_ID_HEAD, GROUP_TRUNK, IDENTITY_GROUPS,
};
use crate::parallel::Parallelism;
use crate::{Error, Result};

/// Checkpoint file written by a completed stage.
pub fn checkpoint_name(stage: u8) -> String {
    format!("stage{stage}.ckpt")
}

/// Metric log written by a completed stage.
pub fn metric_log_name(stage: u8) -> String {
    format!("stage{stage}_metrics.csv")
}

pub const PAIRS_FILE: &str = "target_pairs.csv";
pub const MINING_REPORT_FILE: &str = "mining_report.txt";

/// Training images of one domain, in [`DatasetManifest::train_indices`] order.
#[derive(Debug, Clone, Copy)]
pub struct DomainSet<'a> {
    pub manifest: &'a DatasetManifest,
    pub images: &'a [PersonImage],
}

/// Decodes the training split of `manifest` at the model's resolution.
pub fn load_train_images(
    manifest: &DatasetManifest,
    cfg: &TrainConfig,
    domain: Domain,
    par: Parallelism,
) -> Result<Vec<PersonImage>> {
    let rows = manifest.train_indices();
    if rows.is_empty() {
        return Err(Error::data(format!("{} has no labelled training images", manifest.root().display())));
    }
    manifest.load_images(&rows, cfg.model.image_size, &cfg.model.normalization, domain, par)
}

/// Knobs that do not influence results.
#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    pub par: Parallelism,
    /// Print one line per epoch to stderr.
    pub verbose: bool,
}

/// What a stage leaves behind.
pub struct StageOutcome {
    pub model: UdGan,
    pub log: Vec<MetricRow>,
    /// Checksums of the frozen groups: once before training, then after each
    /// audited epoch.
    pub frozen_checksums: Vec<String>,
    pub checkpoint: PathBuf,
    pub metric_log: PathBuf,
    /// Stage 1: accuracy on the source training images, evaluation mode.
    pub train_accuracy: Option<f64>,
    pub pairs: Vec<MinedPair>,
    pub mining: Option<MiningReport>,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn stack(images: &[PersonImage], idx: &[usize]) -> Result<Tensor> {
    let pixels: Vec<&Tensor> = idx.iter().map(|&i| &images[i].pixels).collect();
    Ok(Tensor::stack(&pixels, 0)?)
}

fn class_labels(set: &DomainSet) -> Result<Vec<u32>> {
    set.images
        .iter()
        .map(|p| {
            set.manifest
                .class_of(p.identity)
                .map(|c| c as u32)
                .ok_or_else(|| Error::data(format!("`{}` has no training class", p.path)))
        })
        .collect()
}

fn nonempty(set: &DomainSet, what: &str) -> Result<()> {
    if set.images.is_empty() {
        return Err(Error::data(format!("{what} training split is empty")));
    }
    Ok(())
}

fn device_of(set: &DomainSet) -> Device {
    set.images[0].pixels.device().clone()
}

fn stage_ctx(seed: u64, stage: u8) -> Ctx {
    Ctx::new(seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(stage as u64 + 1)))
}

struct Audit {
    groups: &'static [&'static str],
    baseline: String,
    history: Vec<String>,
}

impl Audit {
    fn new(model: &UdGan, groups: &'static [&'static str]) -> Result<Self> {
        let baseline = model.params().checksum(groups)?;
        Ok(Self {
            groups,
            history: vec![baseline.clone()],
            baseline,
        })
    }

    fn check(&mut self, model: &UdGan, stage: u8, epoch: usize) -> Result<()> {
        let now = model.params().checksum(self.groups)?;
        self.history.push(now.clone());
        if now != self.baseline {
            return Err(Error::invalid(format!(
                "stage {stage} epoch {epoch}: frozen groups {:?} changed",
                self.groups
            )));
        }
        Ok(())
    }
}

fn finish(
    stage: u8,
    cfg: &TrainConfig,
    model: &UdGan,
    epochs: usize,
    log: &[MetricRow],
    out_dir: &Path,
) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(out_dir)?;
    let metric_log = out_dir.join(metric_log_name(stage));
    write_metric_log(&metric_log, log)?;
    let checkpoint = out_dir.join(checkpoint_name(stage));
    let meta = CheckpointMeta {
        stage,
        epochs_completed: epochs,
        model: model.config().clone(),
        config: serde_json::to_value(cfg)?,
    };
    save_checkpoint(&checkpoint, model, &meta)?;
    Ok((checkpoint, metric_log))
}

fn say(opts: &RunOptions, log: &[MetricRow], stage: u8, epoch: usize, total: usize) {
    if !opts.verbose {
        return;
    }
    let rows: Vec<&MetricRow> = log.iter().filter(|r| r.epoch == epoch).collect();
    let mean = |f: fn(&MetricRow) -> Option<f64>| {
        let v: Vec<f64> = rows.iter().filter_map(|r| f(r)).collect();
        if v.is_empty() {
            "-".to_string()
        } else {
            format!("{:.4}", v.iter().sum::<f64>() / v.len() as f64)
        }
    };
    eprintln!(
        "stage {stage} epoch {epoch}/{total}: id {} rec {} kl {} adv_g {} adv_d {}",
        mean(|r| r.loss_id),
        mean(|r| r.loss_rec),
        mean(|r| r.loss_kl),
        mean(|r| r.loss_adv_g),
        mean(|r| r.loss_adv_d),
    );
}

/// Fraction of images whose arg-max class equals the label, evaluation mode.
pub fn classification_accuracy(model: &UdGan, images: &[PersonImage], labels: &[u32], batch: usize) -> Result<f64> {
    if images.is_empty() || images.len() != labels.len() {
        return Err(Error::invalid("accuracy needs one label per image"));
    }
    let mut correct = 0;
    for (chunk, ys) in (0..images.len()).collect::<Vec<_>>().chunks(batch).zip(labels.chunks(batch)) {
        let v = model.encode_identity(&stack(images, chunk)?, Mode::Eval)?;
        let pred = model.classify(&v)?.argmax(1)?.to_vec1::<u32>()?;
        correct += pred.iter().zip(ys).filter(|(p, y)| p == y).count();
    }
    Ok(correct as f64 / images.len() as f64)
}

/// Stage 1: identity encoder and classifier on the labelled source domain.
///
/// During warm-up the trunk and identity head run in evaluation mode and only
/// the classifier is optimized; their checksum is audited after every warm-up
/// epoch.
pub fn run_stage1(cfg: &TrainConfig, source: DomainSet, out_dir: &Path, opts: RunOptions) -> Result<StageOutcome> {
    cfg.validate()?;
    nonempty(&source, "source")?;
    let labels = class_labels(&source)?;
    let mut model_cfg = cfg.model.clone();
    if model_cfg.num_classes == 0 {
        model_cfg.num_classes = source.manifest.num_classes();
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= model_cfg.num_classes) {
        return Err(Error::config(format!(
            "class {bad} does not fit a {}-way classifier",
            model_cfg.num_classes
        )));
    }
    let model = UdGan::new(model_cfg, cfg.seed, &device_of(&source))?;
    let s1 = &cfg.stage1;
    let mut warm_opt = Adam::amsgrad(model.params().trainable(&[GROUP_CLASSIFIER]), s1.optimizer);
    let mut full_opt = Adam::amsgrad(model.params().trainable(&IDENTITY_GROUPS), s1.optimizer);
    const WARMUP_FROZEN: [&str; 2] = [GROUP_TRUNK, GROUP_ID_HEAD];
    let mut audit = Audit::new(&model, &WARMUP_FROZEN)?;
    let mut log = Vec::new();
    for epoch in 0..s1.epochs {
        let lr = cosine_lr(epoch, s1.epochs - 1, s1.lr)?;
        let warm = epoch < s1.warmup_epochs;
        let batches = shuffled_batches(source.images.len(), s1.batch_size, 2, &mut epoch_rng(cfg.seed, 1, epoch, 0));
        for batch in &batches {
            let x = stack(source.images, batch)?;
            let y: Vec<u32> = batch.iter().map(|&i| labels[i]).collect();
            let v_id = if warm {
                model.encode_identity(&x, Mode::Eval)?.detach()
            } else {
                model.encode_identity(&x, Mode::Train)?
            };
            let loss = identity_loss(&model.classify(&v_id)?, &y, cfg.losses.label_smoothing)?;
            let grads = loss.backward()?;
            if warm {
                warm_opt.step(&grads, lr)?;
            } else {
                full_opt.step(&grads, lr)?;
            }
            let mut row = MetricRow::new(1, epoch + 1, StepDomain::Source, lr);
            row.loss_id = Some(scalar(&loss)?);
            log.push(row);
        }
        if warm {
            audit.check(&model, 1, epoch + 1)?;
        }
        say(&opts, &log, 1, epoch + 1, s1.epochs);
    }
    let accuracy = classification_accuracy(&model, source.images, &labels, cfg.eval_batch_size)?;
    let (checkpoint, metric_log) = finish(1, cfg, &model, s1.epochs, &log, out_dir)?;
    Ok(StageOutcome {
        model,
        log,
        frozen_checksums: audit.history,
        checkpoint,
        metric_log,
        train_accuracy: Some(accuracy),
        pairs: Vec::new(),
        mining: None,
    })
}

/// Mines target pairs with the model's current identity encoder and writes
/// the pair CSV and report into `out_dir`.
pub fn mine_target_pairs(
    cfg: &TrainConfig,
    model: &UdGan,
    target: DomainSet,
    out_dir: &Path,
    par: Parallelism,
) -> Result<(Vec<MinedPair>, MiningReport)> {
    nonempty(&target, "target")?;
    let embeddings = embed_images(target.images, model, cfg.eval_batch_size, par)?;
    let (pairs, report) = mine_pairs(&embeddings, cfg.miner_k, par)?;
    if pairs.is_empty() {
        return Err(Error::data("mining produced no pairs"));
    }
    std::fs::create_dir_all(out_dir)?;
    let rows = target.manifest.train_indices();
    write_pairs_csv(&out_dir.join(PAIRS_FILE), &pairs, target.manifest, &rows)?;
    report.write_text(&out_dir.join(MINING_REPORT_FILE))?;
    Ok((pairs, report))
}

struct TargetOptimizers {
    generator: Adam,
    discriminator: Sgd,
    lr: f64,
    discriminator_lr: f64,
}

/// Discriminator update, then generator/encoder update, on one pair batch.
fn target_step(
    cfg: &TrainConfig,
    model: &UdGan,
    images: &[PersonImage],
    batch: &[usize],
    modes: SwapModes,
    opts: &mut TargetOptimizers,
    ctx: &Ctx,
    row: &mut MetricRow,
) -> Result<()> {
    let queries: Vec<usize> = batch.iter().step_by(2).copied().collect();
    let matches: Vec<usize> = batch.iter().skip(1).step_by(2).copied().collect();
    let x1 = stack(images, &queries)?;
    let x2 = stack(images, &matches)?;
    let out = model.swap_generate(&x1, &x2, modes, QuadNoise::Independent, ctx)?;
    let fake = out.quad.stacked()?;
    let real = Tensor::cat(&[&x1, &x2], 0)?;

    let (real_patches, _) = model.discriminate(&real)?;
    let (fake_patches, _) = model.discriminate(&fake.detach())?;
    let loss_d = adversarial_loss_d(&real_patches, &fake_patches)?;
    opts.discriminator.step(&loss_d.backward()?, opts.discriminator_lr)?;

    let (fake_patches, _) = model.discriminate(&fake)?;
    let adv_g = adversarial_loss_g(&fake_patches)?;
    let rec = reconstruction_loss(&out.quad, &x1, &x2, cfg.recon_target)?;
    let [c1, c2] = &out.content;
    let kl = kl_loss(&Tensor::cat(&[&c1.mu, &c2.mu], 0)?, &Tensor::cat(&[&c1.logvar, &c2.logvar], 0)?)?;
    let total = target_loss(&rec, &kl, &adv_g, &cfg.losses)?;
    opts.generator.step(&total.backward()?, opts.lr)?;

    row.loss_rec = Some(scalar(&rec)?);
    row.loss_kl = Some(scalar(&kl)?);
    row.loss_adv_g = Some(scalar(&adv_g)?);
    row.loss_adv_d = Some(scalar(&loss_d)?);
    Ok(())
}

/// Stage 2: content encoder, generator and discriminator on mined target
/// pairs, identity side frozen and audited after every epoch.
pub fn run_stage2(
    cfg: &TrainConfig,
    model: UdGan,
    target: DomainSet,
    out_dir: &Path,
    opts: RunOptions,
) -> Result<StageOutcome> {
    cfg.validate()?;
    let (pairs, report) = mine_target_pairs(cfg, &model, target, out_dir, opts.par)?;
    let s2 = &cfg.stage2;
    let mut optimizers = TargetOptimizers {
        generator: Adam::new(model.params().trainable(&[GROUP_CONTENT, GROUP_GENERATOR]), s2.optimizer),
        discriminator: Sgd::new(model.params().trainable(&[GROUP_DISCRIMINATOR]), s2.discriminator_momentum),
        lr: s2.lr,
        discriminator_lr: s2.discriminator_lr,
    };
    let mut audit = Audit::new(&model, &IDENTITY_GROUPS)?;
    let ctx = stage_ctx(cfg.seed, 2);
    let mut log = Vec::new();
    for epoch in 0..s2.epochs {
        let batches = pair_batches(&pairs, s2.batch_size, &mut epoch_rng(cfg.seed, 2, epoch, 0))?;
        for batch in &batches {
            let mut row = MetricRow::new(2, epoch + 1, StepDomain::Target, s2.lr);
            target_step(cfg, &model, target.images, batch, SwapModes::frozen_identity(), &mut optimizers, &ctx, &mut row)?;
            log.push(row);
        }
        audit.check(&model, 2, epoch + 1)?;
        say(&opts, &log, 2, epoch + 1, s2.epochs);
    }
    let (checkpoint, metric_log) = finish(2, cfg, &model, s2.epochs, &log, out_dir)?;
    Ok(StageOutcome {
        model,
        log,
        frozen_checksums: audit.history,
        checkpoint,
        metric_log,
        train_accuracy: None,
        pairs,
        mining: Some(report),
    })
}

/// Stage 3: every module trains, alternating source identity steps and
/// target generation steps. Epochs are passes over the source data.
pub fn run_stage3(
    cfg: &TrainConfig,
    model: UdGan,
    source: DomainSet,
    target: DomainSet,
    out_dir: &Path,
    opts: RunOptions,
) -> Result<StageOutcome> {
    cfg.validate()?;
    nonempty(&source, "source")?;
    let labels = class_labels(&source)?;
    if source.manifest.num_classes() != model.config().num_classes {
        return Err(Error::data(format!(
            "source has {} classes but the checkpoint classifier has {}",
            source.manifest.num_classes(),
            model.config().num_classes
        )));
    }
    let (pairs, report) = mine_target_pairs(cfg, &model, target, out_dir, opts.par)?;
    let s3 = &cfg.stage3;
    let s2 = &cfg.stage2;
    let mut id_opt = Adam::amsgrad(model.params().trainable(&IDENTITY_GROUPS), cfg.stage1.optimizer);
    let mut optimizers = TargetOptimizers {
        generator: Adam::new(
            model.params().trainable(&[GROUP_CONTENT, GROUP_GENERATOR, GROUP_TRUNK, GROUP_ID_HEAD]),
            s2.optimizer,
        ),
        discriminator: Sgd::new(model.params().trainable(&[GROUP_DISCRIMINATOR]), s2.discriminator_momentum),
        lr: s3.lr,
        discriminator_lr: s3.lr,
    };
    let ctx = stage_ctx(cfg.seed, 3);
    let mut log = Vec::new();
    for epoch in 0..s3.epochs {
        let source_batches =
            shuffled_batches(source.images.len(), s3.source_batch_size, 2, &mut epoch_rng(cfg.seed, 3, epoch, 0));
        let target_batches = pair_batches(&pairs, s3.target_batch_size, &mut epoch_rng(cfg.seed, 3, epoch, 1))?;
        for step in make_alternating_schedule(source_batches.len(), target_batches.len())? {
            let mut row = MetricRow::new(3, epoch + 1, step.domain, s3.lr);
            match step.domain {
                StepDomain::Source => {
                    let batch = &source_batches[step.batch];
                    let x = stack(source.images, batch)?;
                    let y: Vec<u32> = batch.iter().map(|&i| labels[i]).collect();
                    let logits = model.classify(&model.encode_identity(&x, Mode::Train)?)?;
                    let loss = identity_loss(&logits, &y, cfg.losses.label_smoothing)?;
                    id_opt.step(&loss.backward()?, s3.lr)?;
                    row.loss_id = Some(scalar(&loss)?);
                }
                StepDomain::Target => target_step(
                    cfg,
                    &model,
                    target.images,
                    &target_batches[step.batch],
                    SwapModes::from(Mode::Train),
                    &mut optimizers,
                    &ctx,
                    &mut row,
                )?,
            }
            log.push(row);
        }
        say(&opts, &log, 3, epoch + 1, s3.epochs);
    }
    let (checkpoint, metric_log) = finish(3, cfg, &model, s3.epochs, &log, out_dir)?;
    Ok(StageOutcome {
        model,
        log,
        frozen_checksums: Vec::new(),
        checkpoint,
        metric_log,
        train_accuracy: None,
        pairs,
        mining: Some(report),
    })
}

/// Outcome of the identity-preservation check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreservationReport {
    pub pairs: usize,
    pub preserved: usize,
    pub fraction: f64,
}

/// For sampled pairs of images with different identities, generates
/// `X12 = G(v_Id(X1), v_C(X2))` and asks `judge` whether `X12` is closer (by
/// cosine similarity of identity codes) to `X1` than to an image of another
/// random identity. Generation is deterministic (`v_C = mu`, evaluation mode).
pub fn identity_preservation(
    judge: &UdGan,
    model: &UdGan,
    images: &[PersonImage],
    num_pairs: usize,
    seed: u64,
    batch: usize,
) -> Result<PreservationReport> {
    let ids: std::collections::BTreeSet<i64> = images.iter().map(|p| p.identity).collect();
    if ids.len() < 2 || num_pairs == 0 || batch == 0 {
        return Err(Error::invalid("preservation check needs two identities, pairs and a batch size"));
    }
    let mut rng = epoch_rng(seed, 4, 0, 0);
    let mut other = |of: i64| loop {
        let k = rng.random_range(0..images.len());
        if images[k].identity != of {
            return k;
        }
    };
    let mut triples = Vec::with_capacity(num_pairs);
    for t in 0..num_pairs {
        let first = t % images.len();
        let id = images[first].identity;
        let content = other(id);
        let distractor = other(id);
        triples.push((first, content, distractor));
    }
    let ctx = Ctx::new(seed);
    let mut preserved = 0;
    for chunk in triples.chunks(batch) {
        let firsts: Vec<usize> = chunk.iter().map(|t| t.0).collect();
        let contents: Vec<usize> = chunk.iter().map(|t| t.1).collect();
        let distractors: Vec<usize> = chunk.iter().map(|t| t.2).collect();
        let x1 = stack(images, &firsts)?;
        let out = model.swap_generate(&x1, &stack(images, &contents)?, Mode::Eval, QuadNoise::Zero, &ctx)?;
        let swapped = out.quad.get(0, 1);
        let e_swap = judge.encode_identity(swapped, Mode::Eval)?.to_vec2::<f32>()?;
        let e_first = judge.encode_identity(&x1, Mode::Eval)?.to_vec2::<f32>()?;
        let e_other = judge.encode_identity(&stack(images, &distractors)?, Mode::Eval)?.to_vec2::<f32>()?;
        preserved += (0..chunk.len())
            .filter(|&k| cosine(&e_swap[k], &e_first[k]) > cosine(&e_swap[k], &e_other[k]))
            .count();
    }
    Ok(PreservationReport {
        pairs: num_pairs,
        preserved,
        fraction: preserved as f64 / num_pairs as f64,
    })
}
