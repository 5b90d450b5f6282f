use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{stage_kind, Processor};

/// Scheduling-relevant facts about one stage column `j`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageDesc {
    /// Reads state from all earlier chunks (attention).
    pub cross_chunk: bool,
    pub processor: Processor,
}

impl StageDesc {
    /// Stage descriptors of a model with `layers` decoder layers.
    pub fn for_layers(layers: usize) -> Vec<StageDesc> {
        (0..layers * crate::graph::STAGES_PER_LAYER)
            .map(|j| {
                let k = stage_kind(j);
                StageDesc {
                    cross_chunk: k.is_cross_chunk(),
                    processor: k.processor(),
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubgraphNode {
    pub chunk: usize,
    pub stage: usize,
    pub processor: Processor,
    pub duration: u64,
}

/// Subgraph `(i, j)` has id `i * stages + j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DependencyGraph {
    chunks: usize,
    stages: Vec<StageDesc>,
    preds: Vec<Vec<usize>>,
    succs: Vec<Vec<usize>>,
}

/// Edges: a cross-chunk stage `j` waits on stage `j-1` of chunks `0..=i`; any
/// other stage waits on stage `j-1` of its own chunk. Stage 0 has no inputs.
pub fn build_dependencies(chunks: usize, stages: &[StageDesc]) -> Result<DependencyGraph> {
    let m = stages.len();
    if chunks == 0 || m == 0 {
        return Err(Error::InvalidArgument(format!(
            "need at least one chunk and one stage, got {chunks}x{m}"
        )));
    }
    let n = chunks * m;
    let mut preds = vec![Vec::new(); n];
    let mut succs = vec![Vec::new(); n];
    for i in 0..chunks {
        for j in 1..m {
            let v = i * m + j;
            let from: Vec<usize> = if stages[j].cross_chunk {
                (0..=i).map(|k| k * m + j - 1).collect()
            } else {
                vec![i * m + j - 1]
            };
            for u in from {
                preds[v].push(u);
                succs[u].push(v);
            }
        }
    }
    for s in &mut succs {
        s.sort_unstable();
    }
    Ok(DependencyGraph {
        chunks,
        stages: stages.to_vec(),
        preds,
        succs,
    })
}

impl DependencyGraph {
    pub fn chunks(&self) -> usize {
        self.chunks
    }

    pub fn stages(&self) -> usize {
        self.stages.len()
    }

    pub fn stage_descs(&self) -> &[StageDesc] {
        &self.stages
    }

    pub fn len(&self) -> usize {
        self.preds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.preds.is_empty()
    }

    pub fn id(&self, chunk: usize, stage: usize) -> usize {
        chunk * self.stages.len() + stage
    }

    pub fn coords(&self, id: usize) -> (usize, usize) {
        (id / self.stages.len(), id % self.stages.len())
    }

    pub fn processor(&self, id: usize) -> Processor {
        self.stages[id % self.stages.len()].processor
    }

    pub fn preds(&self, id: usize) -> &[usize] {
        &self.preds[id]
    }

    pub fn succs(&self, id: usize) -> &[usize] {
        &self.succs[id]
    }

    pub fn edge_count(&self) -> usize {
        self.preds.iter().map(Vec::len).sum()
    }

    pub fn node(&self, id: usize, costs: &NodeCosts) -> SubgraphNode {
        let (chunk, stage) = self.coords(id);
        SubgraphNode {
            chunk,
            stage,
            processor: self.processor(id),
            duration: costs.get(id),
        }
    }
}

/// Duration of every node, indexed by node id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeCosts(Vec<u64>);

impl NodeCosts {
    pub fn new(durations: Vec<u64>) -> Result<Self> {
        if let Some(i) = durations.iter().position(|&d| d == 0) {
            return Err(Error::InvalidCost(format!("node {i} has zero duration")));
        }
        Ok(Self(durations))
    }

    pub fn get(&self, id: usize) -> u64 {
        self.0[id]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[u64] {
        &self.0
    }

    pub fn check(&self, g: &DependencyGraph) -> Result<()> {
        if self.0.len() != g.len() {
            return Err(Error::InvalidCost(format!(
                "{} durations for {} nodes",
                self.0.len(),
                g.len()
            )));
        }
        Ok(())
    }

    /// Total duration per processor, `(npu, cpu)`.
    pub fn totals(&self, g: &DependencyGraph) -> (u64, u64) {
        let mut t = (0, 0);
        for (id, &d) in self.0.iter().enumerate() {
            match g.processor(id) {
                Processor::Npu => t.0 += d,
                Processor::Cpu => t.1 += d,
            }
        }
        t
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn descs(kinds: &[(bool, Processor)]) -> Vec<StageDesc> {
        kinds
            .iter()
            .map(|&(cross_chunk, processor)| StageDesc { cross_chunk, processor })
            .collect()
    }

    #[test]
    fn single_chunk_is_a_chain() {
        let g = build_dependencies(1, &descs(&[(false, Processor::Npu), (true, Processor::Cpu), (false, Processor::Npu)]))
            .unwrap();
        assert!(g.preds(0).is_empty());
        assert_eq!(g.preds(1), &[0]);
        assert_eq!(g.preds(2), &[1]);
        assert_eq!(g.edge_count(), 2);
    }

    #[test]
    fn cross_chunk_predecessors() {
        let g = build_dependencies(3, &descs(&[(false, Processor::Npu), (true, Processor::Cpu)])).unwrap();
        let preds: Vec<(usize, usize)> = g.preds(g.id(2, 1)).iter().map(|&p| g.coords(p)).collect();
        assert_eq!(preds, vec![(0, 0), (1, 0), (2, 0)]);
        assert_eq!(g.preds(g.id(1, 0)), &[] as &[usize]);
    }

    #[test]
    fn zero_durations_rejected() {
        assert!(matches!(NodeCosts::new(vec![1, 0]), Err(Error::InvalidCost(_))));
        assert!(build_dependencies(0, &descs(&[(false, Processor::Npu)])).is_err());
    }

    #[test]
    fn model_stage_layout() {
        let d = StageDesc::for_layers(2);
        assert_eq!(d.len(), 10);
        assert!(d[1].cross_chunk && d[6].cross_chunk);
        assert_eq!(d.iter().filter(|s| s.cross_chunk).count(), 2);
        assert_eq!(d[0].processor, Processor::Npu);
        assert_eq!(d[3].processor, Processor::Cpu);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use std::collections::VecDeque;

        proptest! {
            /// Kahn's algorithm must consume every node, and no edge may be
            /// implied by a longer path.
            #[test]
            fn acyclic_and_reduced(
                n in 1usize..5,
                stages in proptest::collection::vec((any::<bool>(), any::<bool>()), 1..6)
            ) {
                let d: Vec<StageDesc> = stages.iter().map(|&(c, npu)| StageDesc {
                    cross_chunk: c,
                    processor: if npu { Processor::Npu } else { Processor::Cpu },
                }).collect();
                let g = build_dependencies(n, &d).unwrap();
                let mut indeg: Vec<usize> = (0..g.len()).map(|v| g.preds(v).len()).collect();
                let mut q: VecDeque<usize> = (0..g.len()).filter(|&v| indeg[v] == 0).collect();
                let mut seen = 0;
                while let Some(u) = q.pop_front() {
                    seen += 1;
                    for &v in g.succs(u) {
                        indeg[v] -= 1;
                        if indeg[v] == 0 { q.push_back(v); }
                    }
                }
                prop_assert_eq!(seen, g.len());

                for v in 0..g.len() {
                    for &u in g.preds(v) {
                        // search u -> v avoiding the direct edge
                        let mut stack: Vec<usize> = g.succs(u).iter().copied().filter(|&w| w != v).collect();
                        let mut vis = vec![false; g.len()];
                        while let Some(w) = stack.pop() {
                            prop_assert_ne!(w, v);
                            if !vis[w] {
                                vis[w] = true;
                                stack.extend(g.succs(w));
                            }
                        }
                    }
                }

                for i in 0..n {
                    for j in 1..d.len() {
                        let want = if d[j].cross_chunk { i + 1 } else { 1 };
                        prop_assert_eq!(g.preds(g.id(i, j)).len(), want);
                    }
                }
            }
        }
    }
}
