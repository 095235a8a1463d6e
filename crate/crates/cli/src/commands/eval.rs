use std::path::Path;

use serde::Serialize;
use vseg::io::{load_checkpoint, VolumeFile};
use vseg::metrics::{evaluate, MetricsReport};
use vseg::net::Network;
use vseg::{Error, Result};

use crate::commands::segment::segment_volume;
use crate::data::{ensure_dir, read_sample, write_text, Manifest};
use crate::report::{aggregate, per_sample_csv, Aggregate};

#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub per_sample: Vec<(String, MetricsReport)>,
    /// Files that could not be evaluated, with the reason.
    pub failures: Vec<(String, String)>,
    pub aggregate: Aggregate,
}

/// Scores the samples of `data_dir` against predictions read from
/// `predictions` (same file names as the label files) or, when absent,
/// produced by the checkpoint. Per-file failures are collected.
pub fn cmd_eval(
    checkpoint: Option<&Path>,
    data_dir: &Path,
    predictions: Option<&Path>,
    out: &Path,
    pad: bool,
) -> Result<EvalReport> {
    let net: Option<Network> = match (checkpoint, predictions) {
        (_, Some(_)) => None,
        (Some(c), None) => Some(load_checkpoint(c)?),
        (None, None) => {
            return Err(Error::Config("eval needs a checkpoint or a predictions directory".into()));
        }
    };
    let manifest = Manifest::load(data_dir)?;
    let mut per_sample = Vec::new();
    let mut failures = Vec::new();
    let mut num_classes = 2;
    for entry in &manifest.files {
        let result = (|| -> Result<MetricsReport> {
            let sample = read_sample(data_dir, entry)?;
            let pred = match (&net, predictions) {
                (_, Some(dir)) => VolumeFile::read(dir.join(&entry.labels))?.to_labels()?.0,
                (Some(net), None) => {
                    if net.config().num_classes != sample.labels.num_classes() {
                        return Err(Error::Config(format!(
                            "checkpoint predicts {} classes, labels have {}",
                            net.config().num_classes,
                            sample.labels.num_classes()
                        )));
                    }
                    segment_volume(net, &sample.volume, sample.labels.spacing(), pad)?.0
                }
                (None, None) => unreachable!(),
            };
            if pred.num_classes() != sample.labels.num_classes() {
                return Err(Error::Config(format!(
                    "prediction has {} classes, labels have {}",
                    pred.num_classes(),
                    sample.labels.num_classes()
                )));
            }
            let pred = pred.with_spacing(sample.labels.spacing())?;
            num_classes = sample.labels.num_classes();
            evaluate(&pred, &sample.labels, &sample.mask)
        })();
        match result {
            Ok(r) => per_sample.push((entry.labels.clone(), r)),
            Err(e) => failures.push((entry.labels.clone(), e.to_string())),
        }
    }
    let reports: Vec<MetricsReport> = per_sample.iter().map(|(_, r)| r.clone()).collect();
    let report = EvalReport {
        aggregate: aggregate(&reports, num_classes),
        per_sample,
        failures,
    };
    ensure_dir(out)?;
    write_text(&out.join("eval_per_sample.csv"), &per_sample_csv(&report.per_sample))?;
    write_text(&out.join("eval_aggregate.csv"), &report.aggregate.to_csv())?;
    write_text(&out.join("eval.json"), &serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}
