//! Exhaustive branch-and-bound oracle for tiny instances.

use crate::error::{Error, Result};
use crate::graph::Processor;

use super::deps::{DependencyGraph, NodeCosts};
use super::report::{ScheduleEvent, ScheduleReport};
use super::sim::schedule_greedy;

pub const DEFAULT_OPTIMAL_LIMIT: usize = 12;

/// Minimum-makespan schedule by enumeration of per-processor orders.
///
/// Every non-preemptive schedule can be left-shifted into a semi-active one
/// without growing the makespan, and a semi-active schedule is fixed by its
/// start order. The search appends one eligible node at a time, placing it at
/// the earliest time its processor and predecessors allow, and only accepts
/// nodes in nondecreasing `(start, id)` order so each schedule is visited once.
pub fn schedule_optimal(g: &DependencyGraph, costs: &NodeCosts, limit: usize) -> Result<ScheduleReport> {
    if g.len() > limit {
        return Err(Error::InstanceTooLarge { nodes: g.len(), limit });
    }
    costs.check(g)?;
    let incumbent = schedule_greedy(g, costs)?;
    let n = g.len();
    let mut tail = vec![0u64; n];
    for v in (0..n).rev() {
        // succs always have larger ids
        let after = g.succs(v).iter().map(|&s| tail[s]).max().unwrap_or(0);
        tail[v] = costs.get(v) + after;
    }
    let mut remaining = [0u64; 2];
    for v in 0..n {
        remaining[slot(g.processor(v))] += costs.get(v);
    }
    let mut search = Search {
        g,
        costs,
        tail,
        start: vec![None; n],
        best: incumbent.makespan,
        best_starts: None,
    };
    search.run(&mut State {
        avail: [0, 0],
        remaining,
        last: None,
        placed: 0,
        makespan: 0,
    });
    let Some(starts) = search.best_starts else {
        let mut r = incumbent;
        r.scheduler = "optimal".into();
        return Ok(r);
    };
    let events = (0..n)
        .map(|v| {
            let (chunk, stage) = g.coords(v);
            ScheduleEvent {
                chunk,
                stage,
                processor: g.processor(v),
                start: starts[v],
                end: starts[v] + costs.get(v),
            }
        })
        .collect();
    Ok(ScheduleReport::from_events("optimal", events))
}

fn slot(p: Processor) -> usize {
    usize::from(p == Processor::Cpu)
}

struct State {
    avail: [u64; 2],
    remaining: [u64; 2],
    last: Option<(u64, usize)>,
    placed: usize,
    makespan: u64,
}

struct Search<'a> {
    g: &'a DependencyGraph,
    costs: &'a NodeCosts,
    tail: Vec<u64>,
    start: Vec<Option<u64>>,
    best: u64,
    best_starts: Option<Vec<u64>>,
}

impl Search<'_> {
    fn end(&self, v: usize) -> Option<u64> {
        self.start[v].map(|s| s + self.costs.get(v))
    }

    fn lower_bound(&self, st: &State) -> u64 {
        let floor = st.last.map_or(0, |l| l.0);
        let mut lb = st.makespan;
        for p in 0..2 {
            if st.remaining[p] > 0 {
                lb = lb.max(st.avail[p].max(floor) + st.remaining[p]);
            }
        }
        for v in 0..self.g.len() {
            if self.start[v].is_some() {
                continue;
            }
            let ready = self.g.preds(v).iter().filter_map(|&p| self.end(p)).max().unwrap_or(0);
            lb = lb.max(ready.max(floor) + self.tail[v]);
        }
        lb
    }

    fn run(&mut self, st: &mut State) {
        let n = self.g.len();
        if st.placed == n {
            if st.makespan < self.best {
                self.best = st.makespan;
                self.best_starts = Some(self.start.iter().map(|s| s.unwrap()).collect());
            }
            return;
        }
        if self.lower_bound(st) >= self.best {
            return;
        }
        for v in 0..n {
            if self.start[v].is_some() {
                continue;
            }
            let mut ready = 0;
            let mut eligible = true;
            for &p in self.g.preds(v) {
                match self.end(p) {
                    Some(e) => ready = ready.max(e),
                    None => {
                        eligible = false;
                        break;
                    }
                }
            }
            if !eligible {
                continue;
            }
            let p = slot(self.g.processor(v));
            let s = ready.max(st.avail[p]);
            if let Some((ls, lv)) = st.last {
                if s < ls || (s == ls && v < lv) {
                    continue;
                }
            }
            let d = self.costs.get(v);
            let saved = (st.avail[p], st.last, st.makespan);
            self.start[v] = Some(s);
            st.avail[p] = s + d;
            st.remaining[p] -= d;
            st.last = Some((s, v));
            st.placed += 1;
            st.makespan = st.makespan.max(s + d);
            self.run(st);
            self.start[v] = None;
            st.placed -= 1;
            st.remaining[p] += d;
            (st.avail[p], st.last, st.makespan) = saved;
        }
    }
}
