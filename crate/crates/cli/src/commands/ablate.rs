use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use vseg::blocks::{BlockKind, MergeKind};
use vseg::losses::{LossConfig, LossFamily};
use vseg::metrics::class_name;
use vseg::net::{build, NetworkConfig, PoolScheme};
use vseg::phantom::{dataset, Sample};
use vseg::trainer::train;
use vseg::{Error, Result};

use crate::commands::train::{held_out_samples, score_samples};
use crate::config::RunConfig;
use crate::data::{ensure_dir, write_text};
use crate::report::fmt_opt;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Grid {
    /// Down-sampling schemes Pool 1–4.
    Pool,
    /// Plain, residual and SE residual blocks with concatenated or summed skips.
    Arch,
    /// The four training objectives.
    Loss,
}

impl Grid {
    pub fn name(self) -> &'static str {
        match self {
            Grid::Pool => "pool",
            Grid::Arch => "arch",
            Grid::Loss => "loss",
        }
    }
}

#[derive(Clone, Debug)]
pub struct Variant {
    pub label: String,
    pub network: NetworkConfig,
    pub loss: LossConfig,
}

pub fn variants(cfg: &RunConfig, grid: Grid) -> Vec<Variant> {
    let base = |network: NetworkConfig, loss: LossConfig, label: String| Variant { label, network, loss };
    match grid {
        Grid::Pool => PoolScheme::ALL
            .iter()
            .map(|&p| {
                let net = NetworkConfig {
                    pool_scheme: p,
                    ..cfg.network.clone()
                };
                base(net, cfg.loss, p.label().to_string())
            })
            .collect(),
        Grid::Arch => {
            let kinds = [
                (BlockKind::Plain, "Vanilla UNet"),
                (BlockKind::Residual, "3D Res UNet"),
                (BlockKind::SeResidual, "3D SE Res UNet"),
            ];
            let mut out = Vec::new();
            for (merge, suffix) in [(MergeKind::Concat, ""), (MergeKind::Sum, " (sum)")] {
                for (kind, name) in kinds {
                    let net = NetworkConfig {
                        block_kind: kind,
                        merge,
                        ..cfg.network.clone()
                    };
                    out.push(base(net, cfg.loss, format!("{name}{suffix}")));
                }
            }
            out
        }
        Grid::Loss => LossFamily::ALL
            .iter()
            .map(|&f| {
                let loss = LossConfig {
                    family: f,
                    lambda: f.default_lambda(),
                    ..cfg.loss
                };
                base(cfg.network.clone(), loss, f.label().to_string())
            })
            .collect(),
    }
}

/// One trained grid cell.
#[derive(Clone, Debug, Serialize)]
pub struct CellResult {
    pub variant: String,
    pub seed: u64,
    /// Mean held-out DSC per foreground class (index 0 = class 1).
    pub class_dsc: Vec<Option<f64>>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationTable {
    pub grid: Grid,
    pub columns: Vec<String>,
    /// Anatomy names followed by "Average".
    pub rows: Vec<String>,
    /// `values[row][column]`, averaged over seeds.
    pub values: Vec<Vec<Option<f64>>>,
    pub cells: Vec<CellResult>,
}

impl AblationTable {
    pub fn value(&self, row: &str, column: &str) -> Option<f64> {
        let r = self.rows.iter().position(|x| x == row)?;
        let c = self.columns.iter().position(|x| x == column)?;
        self.values[r][c]
    }

    pub fn failures(&self) -> Vec<&CellResult> {
        self.cells.iter().filter(|c| c.error.is_some()).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("anatomy");
        for c in &self.columns {
            s.push(',');
            s.push_str(c);
        }
        s.push('\n');
        for (r, row) in self.rows.iter().enumerate() {
            s.push_str(row);
            for v in &self.values[r] {
                s.push(',');
                s.push_str(&fmt_opt(*v));
            }
            s.push('\n');
        }
        s
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn run_cell(cfg: &RunConfig, variant: &Variant, seed: u64, held_out: &[Sample]) -> Result<Vec<Option<f64>>> {
    let mut schedule = cfg.schedule.clone();
    schedule.seed = seed;
    schedule.eval_every = 0;
    let net = build(&variant.network, seed)?;
    let data = dataset(&cfg.phantom, cfg.train_samples)?;
    train(&net, &data, &[], &variant.loss, &schedule)?;
    let reports = score_samples(&net, held_out)?;
    Ok((1..variant.network.num_classes)
        .map(|k| {
            mean(
                reports
                    .iter()
                    .filter_map(|r| r.classes.iter().find(|c| c.class_id == k).and_then(|c| c.dsc)),
            )
        })
        .collect())
}

/// Trains every variant for every seed on the same phantoms and tabulates
/// held-out DSC per anatomy. Failed cells are recorded and skipped.
pub fn cmd_ablate(cfg: &RunConfig, grid: Grid, jobs: usize, out: &Path) -> Result<AblationTable> {
    cfg.validate()?;
    if cfg.held_out_samples == 0 {
        return Err(Error::Config("ablation needs held_out_samples > 0".into()));
    }
    ensure_dir(out)?;
    let vars = variants(cfg, grid);
    let held_out = held_out_samples(cfg)?;
    let jobs_list: Vec<(usize, u64)> = (0..vars.len())
        .flat_map(|v| cfg.seeds.iter().map(move |&s| (v, s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let cells: Vec<CellResult> = pool.install(|| {
        jobs_list
            .par_iter()
            .map(|&(v, seed)| {
                let variant = &vars[v];
                let (class_dsc, error) = match run_cell(cfg, variant, seed, &held_out) {
                    Ok(d) => (d, None),
                    Err(e) => (vec![None; cfg.network.num_classes - 1], Some(e.to_string())),
                };
                CellResult {
                    variant: variant.label.clone(),
                    seed,
                    class_dsc,
                    error,
                }
            })
            .collect()
    });

    let anatomies = cfg.network.num_classes - 1;
    let mut values = vec![vec![None; vars.len()]; anatomies + 1];
    for (vi, variant) in vars.iter().enumerate() {
        let mine: Vec<&CellResult> = cells.iter().filter(|c| c.variant == variant.label).collect();
        for (k, row) in values.iter_mut().enumerate().take(anatomies) {
            row[vi] = mean(mine.iter().filter_map(|c| c.class_dsc[k]));
        }
        values[anatomies][vi] = mean((0..anatomies).filter_map(|k| values[k][vi]));
    }
    let table = AblationTable {
        grid,
        columns: vars.iter().map(|v| v.label.clone()).collect(),
        rows: (1..=anatomies)
            .map(class_name)
            .chain(std::iter::once("Average".to_string()))
            .collect(),
        values,
        cells,
    };
    write_text(&out.join(format!("ablate_{}.csv", grid.name())), &table.to_csv())?;
    write_text(
        &out.join(format!("ablate_{}.json", grid.name())),
        &serde_json::to_string_pretty(&table)?,
    )?;
    Ok(table)
}
