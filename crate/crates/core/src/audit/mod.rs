//! Causality audit, the repeats-task expressivity experiment, the
//! closed-form cost model and wall-clock measurement.

mod cost;
mod expressivity;
mod leak;
mod measure;

pub use cost::{block_cost, estimate_cost, shorten_cost, upsample_cost, CostEstimate, OpCounts, StageCost};
pub use expressivity::{expressivity_experiment, ClassAccuracy, ExpressivityConfig, ExpressivityResult};
pub use leak::{
    audit_cell, audit_grid, audit_model_config, grid_hierarchy, grid_len, leak_audit, AuditCell,
    AuditReport, Offender, AUDIT_TOLERANCE,
};
pub use measure::{count_forward_flops, measure_run, RunMeasurement};
