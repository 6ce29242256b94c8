//! Run configuration, training loops, evaluation and ablation sweeps.
//!
//! Every run writes into its `out_dir`: the resolved `config.json`,
//! `metrics.jsonl` (one deterministic record per step), `timing.jsonl`
//! (wall-clock per step), `summary.csv`, and `.plma` checkpoints.

mod ablate;
mod config;
mod metrics;
mod pipeline;
mod runs;

pub use ablate::{ablate, ablation_cells, render_table, AblationCell, AblationReport};
pub use config::{
    apply_override, AblationAxis, AblationConfig, DataConfig, MaskConfig, RunConfig, Task, TrainConfig,
};
pub use metrics::{
    accuracy, miou, part_ious, read_metrics, write_json, write_summary_csv, MetricsWriter, MiouReport, StepRecord,
};
pub use pipeline::{
    classify_forward, classify_forward_train, encode_batch, is_backbone, make_batch, prepare, pretrain_forward, segment_forward, Batch,
    Corruption, Prepared, PretrainModel, PretrainOutput,
};
pub use runs::{
    finetune, finetune_on, generate, load_backbone, load_dataset, pretrain, pretrain_on, probe, Dataset,
    FinetuneReport, GenerateReport, PretrainReport, ProbeSummary,
};
