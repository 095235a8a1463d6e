//! Aggregation of per-sample metrics into mean ± sd tables.

use serde::{Deserialize, Serialize};
use vseg::metrics::{class_name, MetricsReport};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAggregate {
    pub class_id: usize,
    pub name: String,
    pub dsc_mean: Option<f64>,
    pub dsc_sd: Option<f64>,
    pub hd95_mean: Option<f64>,
    pub hd95_sd: Option<f64>,
    /// Samples contributing a DSC value.
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub classes: Vec<ClassAggregate>,
    /// Mean of the per-class DSC means.
    pub mean_dsc: Option<f64>,
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_sd(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    (Some(mean), Some(sd))
}

pub fn aggregate(reports: &[MetricsReport], num_classes: usize) -> Aggregate {
    let classes: Vec<ClassAggregate> = (1..num_classes)
        .map(|k| {
            let find = |r: &MetricsReport| r.classes.iter().find(|c| c.class_id == k).cloned();
            let dsc: Vec<f64> = reports.iter().filter_map(|r| find(r).and_then(|c| c.dsc)).collect();
            let hd: Vec<f64> = reports.iter().filter_map(|r| find(r).and_then(|c| c.hd95)).collect();
            let (dsc_mean, dsc_sd) = mean_sd(&dsc);
            let (hd95_mean, hd95_sd) = mean_sd(&hd);
            ClassAggregate {
                class_id: k,
                name: class_name(k),
                dsc_mean,
                dsc_sd,
                hd95_mean,
                hd95_sd,
                n: dsc.len(),
            }
        })
        .collect();
    let means: Vec<f64> = classes.iter().filter_map(|c| c.dsc_mean).collect();
    let mean_dsc = mean_sd(&means).0;
    Aggregate { classes, mean_dsc }
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl Aggregate {
    /// `name,dsc_mean,dsc_sd,hd95_mean,hd95_sd,n`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("name,dsc_mean,dsc_sd,hd95_mean,hd95_sd,n\n");
        for c in &self.classes {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                c.name,
                fmt_opt(c.dsc_mean),
                fmt_opt(c.dsc_sd),
                fmt_opt(c.hd95_mean),
                fmt_opt(c.hd95_sd),
                c.n
            ));
        }
        s
    }
}

/// `sample,name,dsc,hd95,voxels,fraction`, annotated classes only.
pub fn per_sample_csv(reports: &[(String, MetricsReport)]) -> String {
    let mut s = String::from("sample,name,dsc,hd95,voxels,fraction\n");
    for (sample, r) in reports {
        for c in r.annotated() {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                sample,
                c.name,
                fmt_opt(c.dsc),
                fmt_opt(c.hd95),
                c.voxels,
                c.fraction
            ));
        }
    }
    s
}
