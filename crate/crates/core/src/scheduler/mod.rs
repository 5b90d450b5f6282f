//! Two-processor (NPU + CPU) simulation of chunked prefill subgraphs.

mod cost;
mod deps;
mod instances;
mod optimal;
mod report;
mod sim;
mod validate;

pub use cost::{
    derive_costs, derive_costs_measured, shape_key, stage_work, CostEntry, CostMode, CostModel, CostOptions, COST_VERSION,
};
pub use deps::{build_dependencies, DependencyGraph, NodeCosts, StageDesc, SubgraphNode};
pub use instances::{random_instance, Instance};
pub use optimal::{schedule_optimal, DEFAULT_OPTIMAL_LIMIT};
pub use report::{bubble_rate, ScheduleEvent, ScheduleReport, SCHEDULE_VERSION};
pub use sim::{contribution, schedule_greedy, schedule_inorder, NodeState, ReadyState};
pub use validate::validate_schedule;
