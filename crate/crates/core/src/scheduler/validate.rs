use crate::error::{Error, Result};
use crate::graph::Processor;

use super::deps::{DependencyGraph, NodeCosts};
use super::report::{bubble_rate, ScheduleReport};

fn fail<T>(msg: String) -> Result<T> {
    Err(Error::Invariant(msg))
}

/// Checks a report against the graph it claims to schedule: every node runs
/// exactly once on its own processor for exactly its duration, after all its
/// predecessors end, with no overlap on either processor, and the summary
/// fields agree with the events.
pub fn validate_schedule(g: &DependencyGraph, costs: &NodeCosts, report: &ScheduleReport) -> Result<()> {
    costs.check(g)?;
    let n = g.len();
    if report.events.len() != n {
        return fail(format!("{} events for {n} subgraphs", report.events.len()));
    }
    let mut span: Vec<Option<(u64, u64)>> = vec![None; n];
    for e in &report.events {
        if e.chunk >= g.chunks() || e.stage >= g.stages() {
            return fail(format!("event ({},{}) outside the graph", e.chunk, e.stage));
        }
        let v = g.id(e.chunk, e.stage);
        if span[v].is_some() {
            return fail(format!("subgraph ({},{}) scheduled twice", e.chunk, e.stage));
        }
        if e.processor != g.processor(v) {
            return fail(format!("subgraph ({},{}) ran on {}", e.chunk, e.stage, e.processor));
        }
        if e.end < e.start || e.end - e.start != costs.get(v) {
            return fail(format!(
                "subgraph ({},{}) ran {}..{} but costs {}",
                e.chunk,
                e.stage,
                e.start,
                e.end,
                costs.get(v)
            ));
        }
        span[v] = Some((e.start, e.end));
    }
    for v in 0..n {
        let (start, _) = span[v].expect("all events seen");
        for &p in g.preds(v) {
            let (_, pend) = span[p].expect("all events seen");
            if pend > start {
                let (a, b) = g.coords(v);
                let (c, d) = g.coords(p);
                return fail(format!("({a},{b}) starts at {start} before ({c},{d}) ends at {pend}"));
            }
        }
    }
    for proc in [Processor::Npu, Processor::Cpu] {
        let mut runs: Vec<(u64, u64)> = report
            .events
            .iter()
            .filter(|e| e.processor == proc)
            .map(|e| (e.start, e.end))
            .collect();
        runs.sort_unstable();
        if let Some(w) = runs.windows(2).find(|w| w[1].0 < w[0].1) {
            return fail(format!("{proc} overlap: {:?} and {:?}", w[0], w[1]));
        }
        let busy: u64 = runs.iter().map(|r| r.1 - r.0).sum();
        let claimed = if proc == Processor::Npu { report.npu_busy } else { report.cpu_busy };
        if busy != claimed {
            return fail(format!("{proc} busy {claimed} but events sum to {busy}"));
        }
    }
    let makespan = report.events.iter().map(|e| e.end).max().unwrap_or(0);
    if makespan != report.makespan {
        return fail(format!("makespan {} but last event ends at {makespan}", report.makespan));
    }
    let bubble = bubble_rate(report.npu_busy, makespan);
    if (bubble - report.bubble_rate).abs() > 1e-12 {
        return fail(format!("bubble rate {} but events give {bubble}", report.bubble_rate));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::super::deps::{build_dependencies, StageDesc};
    use super::super::report::ScheduleEvent;
    use super::super::sim::schedule_greedy;
    use super::*;
    use crate::graph::Processor::{Cpu, Npu};

    fn setup() -> (DependencyGraph, NodeCosts, ScheduleReport) {
        let stages = [
            StageDesc { cross_chunk: false, processor: Npu },
            StageDesc { cross_chunk: true, processor: Cpu },
        ];
        let g = build_dependencies(2, &stages).unwrap();
        let costs = NodeCosts::new(vec![2, 3, 4, 5]).unwrap();
        let r = schedule_greedy(&g, &costs).unwrap();
        (g, costs, r)
    }

    #[test]
    fn accepts_engine_output() {
        let (g, c, r) = setup();
        validate_schedule(&g, &c, &r).unwrap();
    }

    #[test]
    fn rejects_tampering() {
        let (g, c, r) = setup();
        let mutate = |f: &dyn Fn(&mut Vec<ScheduleEvent>)| {
            let mut events = r.events.clone();
            f(&mut events);
            ScheduleReport::from_events("x", events)
        };
        // dependency broken: shift attention of chunk 1 to t=0
        let bad = mutate(&|ev| {
            for e in ev.iter_mut().filter(|e| e.chunk == 1 && e.stage == 1) {
                e.end -= e.start;
                e.start = 0;
            }
        });
        assert!(validate_schedule(&g, &c, &bad).unwrap_err().is_invariant());
        // duration changed
        let bad = mutate(&|ev| ev[0].end += 1);
        assert!(validate_schedule(&g, &c, &bad).is_err());
        // missing event
        let bad = mutate(&|ev| {
            ev.pop();
        });
        assert!(validate_schedule(&g, &c, &bad).is_err());
        // NPU overlap
        let bad = mutate(&|ev| {
            for e in ev.iter_mut().filter(|e| e.chunk == 1 && e.stage == 0) {
                e.start = 1;
                e.end = 5;
            }
        });
        assert!(validate_schedule(&g, &c, &bad).is_err());
        // summary mismatch
        let mut bad = r.clone();
        bad.makespan += 1;
        assert!(validate_schedule(&g, &c, &bad).is_err());
    }
}
