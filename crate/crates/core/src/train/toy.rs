//! The toy end-to-end run: two synthetic domains, all three stages and the
//! checks used to judge the result.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::log::{epoch_means, smooth};
use super::schedule::StepDomain;
use super::stages::{identity_preservation, run_stage1, run_stage2, run_stage3, DomainSet, PreservationReport, RunOptions};
use crate::data::{make_synthetic_with, Domain, PersonImage, Split, SyntheticDataset, SyntheticSpec};
use crate::miner::{validate_mining, MiningReport};
use crate::nn::load_checkpoint;
use crate::Result;

/// Window, in epochs, of the stage-2 reconstruction-loss smoothing.
pub const REC_SMOOTHING_WINDOW: usize = 10;
/// Number of held-out swaps judged for identity preservation.
pub const PRESERVATION_PAIRS: usize = 96;

/// Source and target toy datasets (16 identities x 8 images each).
pub fn toy_datasets(cfg: &TrainConfig, opts: RunOptions) -> Result<(SyntheticDataset, SyntheticDataset)> {
    let base = SyntheticSpec {
        image_size: cfg.model.image_size,
        generator_blocks: cfg.model.generator_blocks,
        ..SyntheticSpec::default()
    };
    let source = make_synthetic_with(&SyntheticSpec { seed: cfg.seed.wrapping_add(7), domain: Domain::Source, ..base.clone() }, opts.par)?;
    let target = make_synthetic_with(&SyntheticSpec { seed: cfg.seed.wrapping_add(1007), domain: Domain::Target, ..base }, opts.par)?;
    Ok((source, target))
}

/// Everything the toy run reports.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToyReport {
    pub stage1_train_accuracy: f64,
    /// Per-epoch mean stage-2 reconstruction loss, smoothed.
    pub stage2_rec_smoothed: Vec<f64>,
    pub preservation: PreservationReport,
    /// Precision of the stage-2 mined pairs against the (hidden) target labels.
    pub mining: MiningReport,
    pub stage3_domains: Vec<StepDomain>,
    pub warmup_checksums: Vec<String>,
    pub stage2_checksums: Vec<String>,
    pub metric_logs: Vec<PathBuf>,
    pub seconds: [f64; 3],
}

fn split_images(data: &SyntheticDataset, cfg: &TrainConfig, splits: &[Split]) -> Result<Vec<PersonImage>> {
    let rows: Vec<usize> = data
        .manifest
        .entries()
        .iter()
        .enumerate()
        .filter(|(_, e)| splits.contains(&e.split))
        .map(|(i, _)| i)
        .collect();
    data.person_images(&rows, &cfg.model.normalization)
}

/// Runs stages 1-3 on the toy domains, writing checkpoints and logs into `out_dir`.
pub fn run_toy(cfg: &TrainConfig, out_dir: &Path, opts: RunOptions) -> Result<ToyReport> {
    let (source, target) = toy_datasets(cfg, opts)?;
    let source_train = source.person_images(&source.manifest.train_indices(), &cfg.model.normalization)?;
    let target_train = target.person_images(&target.manifest.train_indices(), &cfg.model.normalization)?;
    let held_out = split_images(&target, cfg, &[Split::Query, Split::Gallery])?;
    let source_set = DomainSet { manifest: &source.manifest, images: &source_train };
    let target_set = DomainSet { manifest: &target.manifest, images: &target_train };

    let clock = std::time::Instant::now();
    let s1 = run_stage1(cfg, source_set, out_dir, opts)?;
    let t1 = clock.elapsed().as_secs_f64();
    let s2 = run_stage2(cfg, s1.model, target_set, out_dir, opts)?;
    let t2 = clock.elapsed().as_secs_f64() - t1;
    let s3 = run_stage3(cfg, s2.model, source_set, target_set, out_dir, opts)?;
    let t3 = clock.elapsed().as_secs_f64() - t1 - t2;

    let (judge, _) = load_checkpoint(&s1.checkpoint, s3.model.device())?;
    let preservation = identity_preservation(
        &judge,
        &s3.model,
        &held_out,
        PRESERVATION_PAIRS,
        cfg.seed,
        cfg.eval_batch_size,
    )?;
    let labels: Vec<i64> = target_train.iter().map(|p| p.identity).collect();
    let mining = validate_mining(&s2.pairs, &labels)?;
    let rec: Vec<f64> = epoch_means(&s2.log, |r| r.loss_rec).into_iter().map(|(_, v)| v).collect();
    Ok(ToyReport {
        stage1_train_accuracy: s1.train_accuracy.unwrap_or(0.0),
        stage2_rec_smoothed: smooth(&rec, REC_SMOOTHING_WINDOW)?,
        preservation,
        mining,
        stage3_domains: s3.log.iter().map(|r| r.step_domain).collect(),
        warmup_checksums: s1.frozen_checksums,
        stage2_checksums: s2.frozen_checksums,
        metric_logs: vec![s1.metric_log, s2.metric_log, s3.metric_log],
        seconds: [t1, t2, t3],
    })
}
