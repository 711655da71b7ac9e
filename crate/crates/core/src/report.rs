//! Post-training diagnostics of one run: drift, retention, efficiency, summary.

use crate::backbone::{Backbone, ForwardMode};
use crate::config::RunConfig;
use crate::error::Result;
use crate::harness::{evaluate, generate_batch, EvalReport, Split};
use crate::metrics::{efficiency_csv, flops_total, kv_cache_bytes, CostModel, RetentionReport};
use crate::pruner::CumulativeMask;
use crate::rcp::RcpModel;

/// Headline numbers of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub accuracy_full: f64,
    pub accuracy_pruned: f64,
    /// Retained vision tokens averaged over layers and examples.
    pub avg_tokens: f64,
    pub flops_ratio: f64,
    pub cache_ratio: f64,
    /// Repair distance at the designated layers on the eval split.
    pub final_repair_loss: f64,
}

impl Summary {
    pub const KEYS: [&'static str; 6] = [
        "accuracy_full",
        "accuracy_pruned",
        "avg_tokens",
        "flops_ratio",
        "cache_ratio",
        "final_repair_loss",
    ];

    pub fn values(&self) -> [f64; 6] {
        [
            self.accuracy_full,
            self.accuracy_pruned,
            self.avg_tokens,
            self.flops_ratio,
            self.cache_ratio,
            self.final_repair_loss,
        ]
    }
}

pub struct RunReport {
    pub summary: Summary,
    pub drift: Vec<(usize, f64)>,
    pub retention: RetentionReport,
    pub efficiency_csv: String,
    pub full: EvalReport,
    pub pruned: EvalReport,
}

fn cost_for(cfg: &RunConfig, mask: &CumulativeMask, n_fixed: usize) -> CostModel {
    CostModel::from_retention(
        cfg.n_layers,
        cfg.d_model,
        cfg.n_heads,
        cfg.d_ff,
        cfg.bytes_per_element,
        n_fixed,
        mask.values().len(),
        &mask.per_layer_retention(cfg.n_layers),
    )
}

/// Evaluates the eval split with physical token removal and derives all reports.
pub fn build_report(cfg: &RunConfig, backbone: &Backbone, model: &RcpModel) -> Result<RunReport> {
    let task = cfg.task();
    let examples = generate_batch(&task, cfg.seed, Split::Eval, 0, cfg.eval_examples)?;
    let full = evaluate(backbone, None, &examples, ForwardMode::Teacher, 1.0)?;
    let pruned = evaluate(backbone, Some(model), &examples, ForwardMode::Gathered, cfg.target_retention)?;
    let n_fixed = task.seq_len() - task.n_vision;
    let dense = cost_for(cfg, &CumulativeMask::dense(task.n_vision), n_fixed);
    let (f0, b0) = (flops_total(&dense) as f64, kv_cache_bytes(&dense) as f64);
    let (mut f, mut b) = (0.0, 0.0);
    for m in &pruned.masks {
        let c = cost_for(cfg, m, n_fixed);
        f += flops_total(&c) as f64;
        b += kv_cache_bytes(&c) as f64;
    }
    let n = pruned.masks.len().max(1) as f64;
    let mean_retention = CostModel::from_retention(
        cfg.n_layers,
        cfg.d_model,
        cfg.n_heads,
        cfg.d_ff,
        cfg.bytes_per_element,
        n_fixed,
        task.n_vision,
        &pruned.per_layer_retention,
    );
    let mut rows = vec![("dense".to_string(), dense.clone()), ("pruned-mean".to_string(), mean_retention)];
    for r in [0.33, 0.22, 0.11] {
        let c = CostModel::from_retention(
            cfg.n_layers,
            cfg.d_model,
            cfg.n_heads,
            cfg.d_ff,
            cfg.bytes_per_element,
            n_fixed,
            task.n_vision,
            &vec![r; cfg.n_layers],
        );
        rows.push((format!("uniform-{r}"), c));
    }
    let summary = Summary {
        accuracy_full: full.accuracy,
        accuracy_pruned: pruned.accuracy,
        avg_tokens: pruned.avg_tokens,
        flops_ratio: f / n / f0,
        cache_ratio: b / n / b0,
        final_repair_loss: pruned.repair_loss,
    };
    Ok(RunReport {
        summary,
        drift: pruned.drift.iter().copied().enumerate().collect(),
        retention: RetentionReport::from_masks(cfg.target_retention, &pruned.masks)?,
        efficiency_csv: efficiency_csv(&rows, &dense),
        full,
        pruned,
    })
}
