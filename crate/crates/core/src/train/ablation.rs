// One setting per row along a single design axis, each trained from scratch
// with the same recipe and seed.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{train, TrainConfig, TrainOutputs};
use crate::error::{Error, Result};
use crate::model::{count_flops, Hgct, ModelConfig};
use crate::skeleton::{DatasetSplit, SkeletonGraph};
use crate::tensor::{DType, Scalar};
use crate::topology::TopologyMode;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationAxis {
    Topology,
    Alpha,
    Gamma,
    Positional,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 4] = [
        AblationAxis::Topology,
        AblationAxis::Alpha,
        AblationAxis::Gamma,
        AblationAxis::Positional,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::Topology => "topology",
            AblationAxis::Alpha => "alpha",
            AblationAxis::Gamma => "gamma",
            AblationAxis::Positional => "positional",
        }
    }
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationAxis::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::config(format!("unknown ablation axis `{s}` (topology, alpha, gamma, positional)")))
    }
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// The configurations of one axis, labelled, derived from `base`.
///
/// Changing α changes both stream widths; head counts that no longer divide
/// them drop to the largest divisor below the configured count.
pub fn ablation_settings(axis: AblationAxis, base: &ModelConfig) -> Result<Vec<(String, ModelConfig)>> {
    let mut out = Vec::new();
    match axis {
        AblationAxis::Topology => {
            for mode in TopologyMode::ALL {
                out.push((mode.name().to_string(), ModelConfig { topology: mode, ..base.clone() }));
            }
        }
        AblationAxis::Alpha => {
            for (label, alpha) in [("1/2", 0.5), ("1/4", 0.25), ("1/8", 0.125)] {
                let mut cfg = base.clone();
                cfg.dstt.alpha = alpha;
                cfg.dstt.fit_heads(base.dstt.s_heads, base.dstt.t_heads);
                out.push((label.to_string(), cfg));
            }
        }
        AblationAxis::Gamma => {
            for gamma in 1..=4 {
                let mut cfg = base.clone();
                cfg.dstt.gamma = gamma;
                out.push((gamma.to_string(), cfg));
            }
        }
        AblationAxis::Positional => {
            for (joint, frame) in [(false, false), (true, false), (false, true), (true, true)] {
                let mut cfg = base.clone();
                cfg.dstt.use_joint_type = joint;
                cfg.dstt.use_frame_order = frame;
                let on = |b: bool| if b { "on" } else { "off" };
                out.push((format!("joint_type={},frame_order={}", on(joint), on(frame)), cfg));
            }
        }
    }
    for (_, cfg) in &out {
        cfg.validate()?;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub setting: String,
    pub params: usize,
    pub macs: u64,
    pub s_heads: usize,
    pub t_heads: usize,
    pub final_accuracy: f64,
    pub best_accuracy: f64,
    pub epochs_run: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub axis: AblationAxis,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn run_one<F: Scalar>(
    cfg: ModelConfig,
    graph: &SkeletonGraph,
    recipe: &TrainConfig,
    train_split: &DatasetSplit,
    test_split: &DatasetSplit,
) -> Result<(usize, super::RunReport)> {
    let mut model = Hgct::<F>::new(cfg, graph.clone(), recipe.seed)?;
    let report = train(&mut model, recipe, train_split, test_split, &TrainOutputs::default())?;
    Ok((model.param_count(), report))
}

/// Trains every setting of `axis` and tabulates parameters and accuracy.
/// Accuracies are reported as measured; no ordering is assumed.
pub fn run_ablation(
    axis: AblationAxis,
    base: &ModelConfig,
    graph: &SkeletonGraph,
    recipe: &TrainConfig,
    train_split: &DatasetSplit,
    test_split: &DatasetSplit,
) -> Result<AblationTable> {
    let mut rows = Vec::new();
    for (setting, cfg) in ablation_settings(axis, base)? {
        log::info!("ablation {axis}: {setting}");
        let macs = count_flops(&cfg, recipe.frames, cfg.v)?.macs;
        let (s_heads, t_heads) = (cfg.dstt.s_heads, cfg.dstt.t_heads);
        let (params, report) = match recipe.dtype {
            DType::F32 => run_one::<f32>(cfg, graph, recipe, train_split, test_split)?,
            DType::F64 => run_one::<f64>(cfg, graph, recipe, train_split, test_split)?,
        };
        rows.push(AblationRow {
            setting,
            params,
            macs,
            s_heads,
            t_heads,
            final_accuracy: report.final_test_accuracy(),
            best_accuracy: report.best_test_accuracy(),
            epochs_run: report.epochs.len(),
        });
    }
    Ok(AblationTable { axis, rows })
}
