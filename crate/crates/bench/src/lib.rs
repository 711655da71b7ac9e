//! Shared fixtures for the criterion benches.

use rcp_core::backbone::Backbone;
use rcp_core::harness::{generate_batch, Split, SyntheticExample, TaskConfig};
use rcp_core::rcp::{RcpConfig, RcpModel, Variant};

pub struct Fixture {
    pub task: TaskConfig,
    pub backbone: Backbone,
    pub model: RcpModel,
    pub batch: Vec<SyntheticExample>,
}

/// Untrained default-size backbone and plug-ins with a small batch.
pub fn fixture(batch: usize) -> Fixture {
    let task = TaskConfig::default();
    let cfg = task.backbone_config(8, 32, 4, 64);
    let backbone = Backbone::new(cfg.clone(), 1).expect("valid backbone");
    let model = RcpModel::new(RcpConfig::for_backbone(&cfg, 0.11, Variant::Full), &cfg, 1).expect("valid plug-ins");
    let batch = generate_batch(&task, 1, Split::Train, 0, batch).expect("valid task");
    Fixture { task, backbone, model, batch }
}
