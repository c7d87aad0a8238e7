use std::path::Path;

use serde::{Deserialize, Serialize};

use super::schedule::StepDomain;
use crate::{Error, Result};

/// One optimizer step of the metric log; losses not computed in that step are empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub stage: u8,
    /// 1-based.
    pub epoch: usize,
    pub step_domain: StepDomain,
    pub loss_id: Option<f64>,
    pub loss_rec: Option<f64>,
    pub loss_kl: Option<f64>,
    pub loss_adv_g: Option<f64>,
    pub loss_adv_d: Option<f64>,
    pub lr: f64,
}

impl MetricRow {
    pub(crate) fn new(stage: u8, epoch: usize, step_domain: StepDomain, lr: f64) -> Self {
        Self {
            stage,
            epoch,
            step_domain,
            loss_id: None,
            loss_rec: None,
            loss_kl: None,
            loss_adv_g: None,
            loss_adv_d: None,
            lr,
        }
    }
}

pub fn write_metric_log(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(["stage", "epoch", "step_domain", "loss_id", "loss_rec", "loss_kl", "loss_adv_g", "loss_adv_d", "lr"])?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metric_log(path: &Path) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Per-epoch mean of a logged loss, in epoch order (epochs without a value are skipped).
pub fn epoch_means(rows: &[MetricRow], field: impl Fn(&MetricRow) -> Option<f64>) -> Vec<(usize, f64)> {
    let mut out: Vec<(usize, f64, usize)> = Vec::new();
    for r in rows {
        let Some(v) = field(r) else { continue };
        match out.last_mut() {
            Some((e, sum, n)) if *e == r.epoch => {
                *sum += v;
                *n += 1;
            }
            _ => out.push((r.epoch, v, 1)),
        }
    }
    out.into_iter().map(|(e, s, n)| (e, s / n as f64)).collect()
}

/// Trailing moving average with the given window (shorter at the start).
pub fn smooth(values: &[f64], window: usize) -> Result<Vec<f64>> {
    if window == 0 {
        return Err(Error::invalid("smoothing window must be positive"));
    }
    Ok((0..values.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(window);
            let w = &values[lo..=i];
            w.iter().sum::<f64>() / w.len() as f64
        })
        .collect())
}
