use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::AttentionKind;
use crate::error::{Error, Result};

use super::config::{AblationAxis, RunConfig, Task};
use super::metrics::write_json;
use super::runs::{finetune, pretrain};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationCell {
    pub axis: AblationAxis,
    pub setting: String,
    pub task: Task,
    /// Latent-attention layer indices of the cell's encoder.
    pub pmla_layers: Vec<usize>,
    pub metric: String,
    pub value: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationReport {
    pub cells: Vec<AblationCell>,
}

fn axis_name(a: AblationAxis) -> &'static str {
    match a {
        AblationAxis::Scanning => "scanning",
        AblationAxis::Pmla => "pmla",
        AblationAxis::Placement => "placement",
        AblationAxis::LatentDim => "latent_dim",
    }
}

fn json_name<T: Serialize>(v: &T) -> String {
    match serde_json::to_value(v) {
        Ok(serde_json::Value::String(s)) => s,
        Ok(other) => other.to_string(),
        Err(_) => "?".into(),
    }
}

/// Every cell of the matrix as `(axis, setting, config)`.
pub fn ablation_cells(base: &RunConfig) -> Vec<(AblationAxis, String, RunConfig)> {
    let ab = &base.ablation;
    let mut out = Vec::new();
    let with = |task: Task, edit: &dyn Fn(&mut RunConfig)| {
        let mut c = base.clone();
        c.task = task;
        c.checkpoint = None;
        edit(&mut c);
        c
    };
    for &axis in &ab.axes {
        match axis {
            AblationAxis::Scanning => {
                for task in [Task::FinetuneCls, Task::FinetuneSeg] {
                    for &s in &ab.scanning {
                        out.push((axis, json_name(&s), with(task, &|c| c.encoder.strategy = s)));
                    }
                }
            }
            AblationAxis::Pmla => {
                out.push((axis, "none".into(), with(Task::FinetuneCls, &|c| c.encoder.pmla_positions.clear())));
                out.push((axis, "pmla".into(), with(Task::FinetuneCls, &|c| c.encoder.attention.kind = AttentionKind::Pmla)));
                out.push((axis, "mha".into(), with(Task::FinetuneCls, &|c| c.encoder.attention.kind = AttentionKind::Mha)));
            }
            AblationAxis::Placement => {
                for &p in &ab.placements {
                    out.push((
                        axis,
                        json_name(&p),
                        with(Task::FinetuneCls, &|c| c.encoder.pmla_positions = vec![p.index(c.encoder.depth)]),
                    ));
                }
            }
            AblationAxis::LatentDim => {
                for &d in &ab.latent_dims {
                    out.push((axis, d.to_string(), with(Task::FinetuneCls, &|c| c.encoder.attention.latent_dim = d)));
                }
            }
        }
    }
    out
}

fn run_cell(cfg: &mut RunConfig, pretrain_first: bool) -> Result<f64> {
    cfg.validate()?;
    if pretrain_first {
        let mut pre = cfg.clone();
        pre.task = Task::Pretrain;
        pre.encoder.strategy = Task::Pretrain.default_strategy();
        pre.out_dir = cfg.out_dir.join("pretrain");
        let r = pretrain(&pre)?;
        cfg.checkpoint = Some(r.checkpoint);
    }
    Ok(finetune(cfg)?.headline())
}

/// Runs the matrix. A failing cell is recorded and the rest still run.
pub fn ablate(base: &RunConfig) -> Result<AblationReport> {
    let root = base.out_dir.as_path();
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut cells = Vec::new();
    for (axis, setting, mut cfg) in ablation_cells(base) {
        cfg.out_dir = root.join("cells").join(format!("{}_{}_{}", axis_name(axis), setting, cfg.task.name()));
        let pmla_layers = cfg.encoder.pmla_positions.clone();
        let metric = match cfg.task {
            Task::FinetuneSeg => "test_instance_miou",
            _ => "test_accuracy",
        };
        let (value, error) = match run_cell(&mut cfg, base.ablation.pretrain) {
            Ok(v) => (Some(v), None),
            Err(e) => (None, Some(e.to_string())),
        };
        cells.push(AblationCell {
            axis,
            setting,
            task: cfg.task,
            pmla_layers,
            metric: metric.into(),
            value,
            error,
        });
    }
    let report = AblationReport { cells };
    write_json(&root.join("ablation.json"), &report)?;
    write_table(&root.join("ablation.md"), &report)?;
    write_csv(&root.join("ablation.csv"), &report)?;
    Ok(report)
}

fn cell_value(c: &AblationCell) -> String {
    match (&c.value, &c.error) {
        (Some(v), _) => format!("{:.2}", 100.0 * v),
        (None, Some(_)) => "failed".into(),
        (None, None) => "-".into(),
    }
}

/// One markdown table per axis: scanning is `strategy × task`, the others
/// list their settings with the latent layer indices.
pub fn render_table(report: &AblationReport) -> String {
    let mut out = String::new();
    let mut axes: Vec<AblationAxis> = Vec::new();
    for c in &report.cells {
        if !axes.contains(&c.axis) {
            axes.push(c.axis);
        }
    }
    for axis in axes {
        let cells: Vec<&AblationCell> = report.cells.iter().filter(|c| c.axis == axis).collect();
        out.push_str(&format!("### {}\n\n", axis_name(axis)));
        if axis == AblationAxis::Scanning {
            out.push_str("| scanning | classification acc (%) | segmentation inst. mIoU (%) |\n|---|---|---|\n");
            let mut settings: Vec<&str> = Vec::new();
            for c in &cells {
                if !settings.contains(&c.setting.as_str()) {
                    settings.push(&c.setting);
                }
            }
            for s in settings {
                let get = |t: Task| {
                    cells
                        .iter()
                        .find(|c| c.setting == s && c.task == t)
                        .map_or("-".to_string(), |c| cell_value(c))
                };
                out.push_str(&format!("| {s} | {} | {} |\n", get(Task::FinetuneCls), get(Task::FinetuneSeg)));
            }
        } else {
            out.push_str("| setting | latent layers | classification acc (%) |\n|---|---|---|\n");
            for c in cells {
                out.push_str(&format!("| {} | {:?} | {} |\n", c.setting, c.pmla_layers, cell_value(c)));
            }
        }
        out.push('\n');
    }
    let failures: Vec<&AblationCell> = report.cells.iter().filter(|c| c.error.is_some()).collect();
    if !failures.is_empty() {
        out.push_str("### failures\n\n");
        for c in failures {
            out.push_str(&format!(
                "- {}/{}/{}: {}\n",
                axis_name(c.axis),
                c.setting,
                c.task.name(),
                c.error.as_deref().unwrap_or("")
            ));
        }
    }
    out
}

fn write_table(path: &Path, report: &AblationReport) -> Result<()> {
    fs::write(path, render_table(report)).map_err(|e| Error::io(path, e))
}

fn write_csv(path: &Path, report: &AblationReport) -> Result<()> {
    let mut text = String::from("axis,setting,task,pmla_layers,metric,value,error\n");
    for c in &report.cells {
        let layers: Vec<String> = c.pmla_layers.iter().map(usize::to_string).collect();
        text.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            axis_name(c.axis),
            c.setting,
            c.task.name(),
            layers.join(" "),
            c.metric,
            c.value.map_or(String::new(), |v| v.to_string()),
            c.error.as_deref().unwrap_or("").replace([',', '\n'], ";")
        ));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
