//! Busy-interval records for timeline plots.

use std::collections::BTreeMap;
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::isa::Role;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Engine {
    Tma,
    TensorCore,
    /// Non-MMA compute charged by `BUBBLES`.
    Bubble,
}

impl Engine {
    pub fn name(self) -> &'static str {
        match self {
            Engine::Tma => "tma",
            Engine::TensorCore => "tensorcore",
            Engine::Bubble => "bubble",
        }
    }
}

/// One busy interval `[start, end)` of an engine on behalf of a WarpGroup.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GanttEntry {
    pub sm: u32,
    pub block: u32,
    pub warpgroup: Role,
    pub engine: Engine,
    pub start: u64,
    pub end: u64,
    pub label: String,
}

/// Keeps entries on SM `sm` (if given) and in `blocks` (if non-empty),
/// sorted by lane then start.
pub fn filter(entries: &[GanttEntry], sm: Option<u32>, blocks: &[u32]) -> Vec<GanttEntry> {
    let mut out: Vec<GanttEntry> = entries
        .iter()
        .filter(|e| sm.is_none_or(|s| e.sm == s))
        .filter(|e| blocks.is_empty() || blocks.contains(&e.block))
        .cloned()
        .collect();
    sort(&mut out);
    out
}

pub fn sort(entries: &mut [GanttEntry]) {
    entries.sort_by(|a, b| {
        (a.sm, a.block, a.warpgroup, a.engine, a.start, a.end).cmp(&(b.sm, b.block, b.warpgroup, b.engine, b.start, b.end))
    });
}

pub fn to_csv(entries: &[GanttEntry]) -> String {
    let mut out = String::from("sm,block,warpgroup,engine,start,end,label\n");
    for e in entries {
        let _ = writeln!(out, "{},{},{},{},{},{},{}", e.sm, e.block, e.warpgroup, e.engine.name(), e.start, e.end, e.label);
    }
    out
}

/// First pair of overlapping intervals within one lane, where a lane is
/// whatever `key` maps an entry to.
pub fn find_overlap<K: Ord>(entries: &[GanttEntry], key: impl Fn(&GanttEntry) -> K) -> Option<(GanttEntry, GanttEntry)> {
    let mut lanes: BTreeMap<K, Vec<&GanttEntry>> = BTreeMap::new();
    for e in entries {
        lanes.entry(key(e)).or_default().push(e);
    }
    for lane in lanes.values_mut() {
        lane.sort_by_key(|e| (e.start, e.end));
        for w in lane.windows(2) {
            if w[1].start < w[0].end {
                return Some((w[0].clone(), w[1].clone()));
            }
        }
    }
    None
}

/// Total busy cycles of `engine` across all entries.
pub fn busy_cycles(entries: &[GanttEntry], engine: Engine) -> u64 {
    entries.iter().filter(|e| e.engine == engine).map(|e| e.end - e.start).sum()
}
