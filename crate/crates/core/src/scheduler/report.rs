use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::graph::Processor;

pub const SCHEDULE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleEvent {
    pub chunk: usize,
    pub stage: usize,
    pub processor: Processor,
    pub start: u64,
    pub end: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleReport {
    pub version: u32,
    pub scheduler: String,
    pub events: Vec<ScheduleEvent>,
    pub makespan: u64,
    pub npu_busy: u64,
    pub cpu_busy: u64,
    /// `1 - npu_busy / makespan`.
    pub bubble_rate: f64,
}

impl ScheduleReport {
    pub fn from_events(scheduler: &str, mut events: Vec<ScheduleEvent>) -> Self {
        events.sort_by_key(|e| (e.start, e.processor, e.chunk, e.stage));
        let makespan = events.iter().map(|e| e.end).max().unwrap_or(0);
        let busy = |p: Processor| -> u64 {
            events.iter().filter(|e| e.processor == p).map(|e| e.end - e.start).sum()
        };
        let (npu_busy, cpu_busy) = (busy(Processor::Npu), busy(Processor::Cpu));
        Self {
            version: SCHEDULE_VERSION,
            scheduler: scheduler.to_string(),
            events,
            makespan,
            npu_busy,
            cpu_busy,
            bubble_rate: bubble_rate(npu_busy, makespan),
        }
    }

    /// Gantt rows `chunk,stage,processor,start,end` with a header line.
    pub fn gantt_csv(&self) -> String {
        let mut s = String::from("scheduler,chunk,stage,processor,start,end\n");
        for e in &self.events {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                self.scheduler, e.chunk, e.stage, e.processor, e.start, e.end
            );
        }
        s
    }
}

pub fn bubble_rate(npu_busy: u64, makespan: u64) -> f64 {
    if makespan == 0 {
        0.0
    } else {
        1.0 - npu_busy as f64 / makespan as f64
    }
}
