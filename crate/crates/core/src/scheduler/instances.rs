use rand::Rng;

use crate::error::Result;
use crate::graph::Processor;
use crate::rng;

use super::deps::{build_dependencies, DependencyGraph, NodeCosts, StageDesc};

/// Small random scheduling problem.
#[derive(Debug, Clone)]
pub struct Instance {
    pub graph: DependencyGraph,
    pub costs: NodeCosts,
}

impl Instance {
    /// Total NPU work is at least total CPU work.
    pub fn npu_dominant(&self) -> bool {
        let (npu, cpu) = self.costs.totals(&self.graph);
        npu >= cpu
    }
}

/// Instance `index` of the seeded family: 1..=`max_chunks` chunks,
/// 1..=`max_stages` stages, each stage on a random processor and
/// cross-chunk with probability 0.4, durations uniform in 1..=20.
pub fn random_instance(seed: u64, index: u64, max_chunks: usize, max_stages: usize) -> Result<Instance> {
    let mut r = rng::stream(seed, &format!("sched-instance-{index}"));
    let chunks = r.gen_range(1..=max_chunks.max(1));
    let stages: Vec<StageDesc> = (0..r.gen_range(1..=max_stages.max(1)))
        .map(|_| StageDesc {
            cross_chunk: r.gen_bool(0.4),
            processor: if r.gen_bool(0.5) { Processor::Npu } else { Processor::Cpu },
        })
        .collect();
    let graph = build_dependencies(chunks, &stages)?;
    let costs = NodeCosts::new((0..graph.len()).map(|_| r.gen_range(1..=20)).collect())?;
    Ok(Instance { graph, costs })
}
