use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use serde::Serialize;
use vseg::io::save_checkpoint;
use vseg::metrics::{evaluate, MetricsReport};
use vseg::net::build;
use vseg::phantom::{dataset, generate, Sample};
use vseg::trainer::{train_with, History, SampleSource, TrainEvent};
use vseg::Result;

use crate::commands::segment::segment_volume;
use crate::config::RunConfig;
use crate::data::{ensure_dir, read_dir_samples, write_text};
use crate::report::{aggregate, per_sample_csv, Aggregate};

#[derive(Clone, Debug, Serialize)]
pub struct TrainReport {
    pub history: History,
    pub checkpoint: PathBuf,
    pub held_out: Option<Aggregate>,
}

/// Held-out phantoms following the training indices, fully annotated.
pub fn held_out_samples(cfg: &RunConfig) -> Result<Vec<Sample>> {
    let spec = cfg.phantom.clone().fully_annotated();
    (cfg.train_samples..cfg.train_samples + cfg.held_out_samples)
        .map(|i| generate(&spec, i))
        .collect()
}

pub fn score_samples(net: &vseg::net::Network, samples: &[Sample]) -> Result<Vec<MetricsReport>> {
    samples
        .iter()
        .map(|s| {
            let (pred, _) = segment_volume(net, &s.volume, s.labels.spacing(), false)?;
            evaluate(&pred, &s.labels, &s.mask)
        })
        .collect()
}

/// Trains with the first seed; writes checkpoints, history and held-out metrics to `out`.
pub fn cmd_train(cfg: &RunConfig, data_dir: Option<&Path>, out: &Path) -> Result<TrainReport> {
    cfg.validate()?;
    ensure_dir(out)?;
    let seed = cfg.primary_seed();
    let mut schedule = cfg.schedule.clone();
    schedule.seed = seed;
    let net = build(&cfg.network, seed)?;
    let held_out = held_out_samples(cfg)?;

    let from_dir: Option<Vec<Sample>> = data_dir
        .map(|d| read_dir_samples(d).map(|v| v.into_iter().map(|(_, s)| s).collect()))
        .transpose()?;
    let lazy = dataset(&cfg.phantom, cfg.train_samples)?;
    let source: &dyn SampleSource = match &from_dir {
        Some(v) => v,
        None => &lazy,
    };

    let history = train_with(&net, source, &held_out, &cfg.loss, &schedule, |event, net| {
        if let TrainEvent::Checkpoint { epoch, phase_boundary } = event {
            let name = if phase_boundary {
                "checkpoint_phase1.vseg".to_string()
            } else {
                format!("checkpoint_epoch{:04}.vseg", epoch + 1)
            };
            save_checkpoint(net, out.join(name))?;
        }
        Ok(ControlFlow::Continue(()))
    })?;

    let checkpoint = out.join("checkpoint.vseg");
    save_checkpoint(&net, &checkpoint)?;
    write_text(&out.join("history.csv"), &history.to_csv())?;
    write_text(&out.join("config.json"), &cfg.to_json()?)?;
    let held = if held_out.is_empty() {
        None
    } else {
        let reports = score_samples(&net, &held_out)?;
        let named: Vec<(String, MetricsReport)> = reports
            .iter()
            .enumerate()
            .map(|(i, r)| (format!("held_out_{i}"), r.clone()))
            .collect();
        let agg = aggregate(&reports, cfg.network.num_classes);
        write_text(&out.join("metrics_per_sample.csv"), &per_sample_csv(&named))?;
        write_text(&out.join("metrics.csv"), &agg.to_csv())?;
        write_text(&out.join("metrics.json"), &serde_json::to_string_pretty(&agg)?)?;
        Some(agg)
    };
    Ok(TrainReport {
        history,
        checkpoint,
        held_out: held,
    })
}
