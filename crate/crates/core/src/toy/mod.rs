//! Toy multimodal decoder with planted image heads, its counting benchmark
//! and the staged masking protocol.

mod config;
mod data;
mod model;
mod protocol;

pub use config::{PlantTarget, PlantedHead, ToyModelConfig};
pub use data::{gen_dataset, ToySample, BBOX_ROWS};
pub use model::{build_model, ForwardOutput, ToyModel, DIGITS};
pub use protocol::{
    ablation_protocol, full_plan, head_stats, sample_meta, write_dumps, AblationReport, AblationRow, PlanRow,
};
