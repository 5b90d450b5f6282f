//! Two-processor event engine plus the greedy and in-order dispatch rules.

use crate::error::{Error, Result};
use crate::graph::Processor;

use super::deps::{DependencyGraph, NodeCosts};
use super::report::{ScheduleEvent, ScheduleReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeState {
    Waiting,
    Running,
    Done,
}

/// Completion state seen by a dispatch decision.
#[derive(Debug, Clone)]
pub struct ReadyState {
    state: Vec<NodeState>,
}

impl ReadyState {
    pub fn new(nodes: usize) -> Self {
        Self {
            state: vec![NodeState::Waiting; nodes],
        }
    }

    pub fn with(states: Vec<NodeState>) -> Self {
        Self { state: states }
    }

    pub fn get(&self, id: usize) -> NodeState {
        self.state[id]
    }

    pub fn set(&mut self, id: usize, s: NodeState) {
        self.state[id] = s;
    }

    /// Waiting with every predecessor done.
    pub fn is_ready(&self, g: &DependencyGraph, id: usize) -> bool {
        self.state[id] == NodeState::Waiting && g.preds(id).iter().all(|&p| self.state[p] == NodeState::Done)
    }

    pub fn all_done(&self) -> bool {
        self.state.iter().all(|&s| s == NodeState::Done)
    }
}

/// Signed stall-reduction score of starting ready node `g` now.
///
/// `S` holds the successors of `g` that become ready the moment `g`
/// completes, counting nodes that are currently running as complete. Only the
/// members of `S` on the other processor are summed: positive when `g` runs on
/// the CPU (it feeds the NPU), negative when `g` runs on the NPU.
pub fn contribution(g: &DependencyGraph, node: usize, state: &ReadyState, costs: &NodeCosts) -> Result<i64> {
    if !state.is_ready(g, node) {
        let (chunk, stage) = g.coords(node);
        return Err(Error::NotReady { chunk, stage });
    }
    let here = g.processor(node);
    let mut sum: i64 = 0;
    for &v in g.succs(node) {
        let unlocks = g
            .preds(v)
            .iter()
            .all(|&p| p == node || state.get(p) != NodeState::Waiting);
        if unlocks && g.processor(v) != here {
            sum += costs.get(v) as i64;
        }
    }
    Ok(match here {
        Processor::Cpu => sum,
        Processor::Npu => -sum,
    })
}

/// Runs the event loop; `pick` chooses the node an idle processor starts, if any.
/// Processors are offered work NPU first, then CPU, at every decision instant.
pub(crate) fn simulate<F>(name: &str, g: &DependencyGraph, costs: &NodeCosts, mut pick: F) -> Result<ScheduleReport>
where
    F: FnMut(&ReadyState, Processor) -> Result<Option<usize>>,
{
    costs.check(g)?;
    let mut state = ReadyState::new(g.len());
    let mut running: [Option<(usize, u64, u64)>; 2] = [None, None];
    let mut events = Vec::with_capacity(g.len());
    let mut now = 0u64;
    loop {
        for (slot, proc) in [Processor::Npu, Processor::Cpu].into_iter().enumerate() {
            if running[slot].is_some() {
                continue;
            }
            if let Some(v) = pick(&state, proc)? {
                debug_assert!(state.is_ready(g, v) && g.processor(v) == proc);
                state.set(v, NodeState::Running);
                running[slot] = Some((v, now, now + costs.get(v)));
            }
        }
        let Some(next) = running.iter().flatten().map(|r| r.2).min() else {
            if state.all_done() {
                break;
            }
            return Err(Error::Invariant(format!("{name}: no runnable subgraph at t={now}")));
        };
        now = next;
        for (slot, r) in running.iter_mut().enumerate() {
            if let Some((v, start, end)) = *r {
                if end == now {
                    state.set(v, NodeState::Done);
                    let (chunk, stage) = g.coords(v);
                    events.push(ScheduleEvent {
                        chunk,
                        stage,
                        processor: if slot == 0 { Processor::Npu } else { Processor::Cpu },
                        start,
                        end,
                    });
                    *r = None;
                }
            }
        }
    }
    Ok(ScheduleReport::from_events(name, events))
}

/// Out-of-order list scheduling: an idle processor starts the ready node with
/// the largest contribution, breaking ties by smaller chunk then smaller stage.
pub fn schedule_greedy(g: &DependencyGraph, costs: &NodeCosts) -> Result<ScheduleReport> {
    simulate("greedy", g, costs, |state, proc| {
        let mut best: Option<(i64, usize)> = None;
        // ids ascend in (chunk, stage) order, so the first maximum wins ties
        for v in 0..g.len() {
            if g.processor(v) != proc || !state.is_ready(g, v) {
                continue;
            }
            let c = contribution(g, v, state, costs)?;
            if best.map_or(true, |(bc, _)| c > bc) {
                best = Some((c, v));
            }
        }
        Ok(best.map(|(_, v)| v))
    })
}

/// Baseline: each processor works through its own subgraphs strictly in
/// prompt order (chunk-major, then stage) and idles while the head of its
/// queue is not ready.
pub fn schedule_inorder(g: &DependencyGraph, costs: &NodeCosts) -> Result<ScheduleReport> {
    let queue = |p: Processor| -> Vec<usize> { (0..g.len()).filter(|&v| g.processor(v) == p).collect() };
    let queues = [queue(Processor::Npu), queue(Processor::Cpu)];
    let mut heads = [0usize, 0usize];
    simulate("inorder", g, costs, |state, proc| {
        let slot = usize::from(proc == Processor::Cpu);
        let Some(&v) = queues[slot].get(heads[slot]) else {
            return Ok(None);
        };
        if state.is_ready(g, v) {
            heads[slot] += 1;
            Ok(Some(v))
        } else {
            Ok(None)
        }
    })
}
