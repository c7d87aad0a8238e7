//! Runs the three-stage toy pipeline and prints its report.
//!
//! cargo run --release -p udgan-core --example toy_pipeline [OUT_DIR] [OVERRIDES_JSON]
//!
//! `OVERRIDES_JSON` is merged into the toy preset, e.g. `{"stage2": {"epochs": 50}}`.

use serde_json::Value;
use udgan_core::train::{run_toy, RunOptions, TrainConfig};

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, p) => *b = p,
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let out = args.next().unwrap_or_else(|| "toy_run".into());
    let mut cfg = serde_json::to_value(TrainConfig::toy())?;
    if let Some(patch) = args.next() {
        merge(&mut cfg, serde_json::from_str(&patch)?);
    }
    let cfg: TrainConfig = serde_json::from_value(cfg)?;
    let report = run_toy(&cfg, out.as_ref(), RunOptions { verbose: true, ..RunOptions::default() })?;
    let rec = &report.stage2_rec_smoothed;
    println!("stage-1 train accuracy: {:.3}", report.stage1_train_accuracy);
    println!("stage-2 smoothed rec loss: first {:.4}, last {:.4}", rec[0], rec[rec.len() - 1]);
    println!("target mining:\n{}", report.mining);
    println!(
        "identity preservation: {}/{} ({:.3})",
        report.preservation.preserved, report.preservation.pairs, report.preservation.fraction
    );
    println!("seconds per stage: {:?}", report.seconds);
    Ok(())
}
