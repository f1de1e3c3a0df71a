use std::collections::{BTreeMap, HashSet};
use std::fmt;

use serde::Serialize;

use super::{Dtype, Instruction, Role, TraceProgram, WarpGroupProgram};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Severity {
    Error,
    Warning,
}

/// Where a diagnostic points. Fields are filled as far as they apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct Location {
    pub block_id: Option<u32>,
    pub role: Option<Role>,
    /// Instruction index within the WarpGroup stream.
    pub pc: Option<usize>,
    pub map_id: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Diagnostic {
    pub severity: Severity,
    pub location: Location,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sev = match self.severity {
            Severity::Error => "error",
            Severity::Warning => "warning",
        };
        write!(f, "{sev}")?;
        if let Some(b) = self.location.block_id {
            write!(f, " [block {b}")?;
            if let Some(r) = self.location.role {
                write!(f, " {r}")?;
            }
            if let Some(pc) = self.location.pc {
                write!(f, " pc {pc}")?;
            }
            write!(f, "]")?;
        }
        if let Some(m) = self.location.map_id {
            write!(f, " [map {m}]")?;
        }
        write!(f, ": {}", self.message)
    }
}

/// Shapes the tensor-core model can time: dense FP16 m64nNk16.
pub fn wgmma_shape_supported(m: u32, n: u32, k: u32, dtype: Dtype, sparse: bool) -> bool {
    m == 64 && k == 16 && (8..=256).contains(&n) && n.is_multiple_of(8) && dtype == Dtype::F16 && !sparse
}

struct Checker<'a> {
    program: &'a TraceProgram,
    out: Vec<Diagnostic>,
}

impl Checker<'_> {
    fn error(&mut self, location: Location, message: String) {
        self.out.push(Diagnostic { severity: Severity::Error, location, message });
    }

    fn warn(&mut self, location: Location, message: String) {
        self.out.push(Diagnostic { severity: Severity::Warning, location, message });
    }

    fn check_thread(&mut self, wg: &WarpGroupProgram) -> StageUse {
        let stages = self.program.stages;
        let mut usage = StageUse::default();
        let mut wgmma_open: BTreeMap<u32, usize> = BTreeMap::new();
        let mut wgmma_committed: HashSet<u32> = HashSet::new();
        let mut tma_open: BTreeMap<u32, usize> = BTreeMap::new();
        let mut tma_committed: HashSet<u32> = HashSet::new();
        let mut pending_acquire: HashSet<u32> = HashSet::new();

        for (pc, inst) in wg.instructions.iter().enumerate() {
            let loc = Location { block_id: Some(wg.block_id), role: Some(wg.role), pc: Some(pc), map_id: None };
            if let Some(sid) = inst.stage() {
                if sid >= stages {
                    self.error(loc, format!("stage index {sid} out of range for ring depth {stages}"));
                }
            }
            match *inst {
                Instruction::TmaTensor { gmem, map, sid, .. } => {
                    self.check_tile(loc, map, gmem);
                    *usage.loads.entry(sid).or_default() += 1;
                    if wg.role == Role::Producer && !pending_acquire.remove(&sid) {
                        self.error(loc, format!("TMA_TENSOR into stage {sid} without a preceding ACQUIRE_STAGE {sid}"));
                    }
                }
                Instruction::TmaStore { gmem, map, gid, .. } => {
                    self.check_tile(loc, map, gmem);
                    if tma_committed.contains(&gid) {
                        self.error(loc, format!("TMA_STORE joins store group {gid} after it was committed"));
                    }
                    *tma_open.entry(gid).or_default() += 1;
                }
                Instruction::TmaCommit { gid } => {
                    if tma_open.remove(&gid).is_none() {
                        self.error(loc, format!("TMA_COMMIT {gid} seals an empty group"));
                    }
                    tma_committed.insert(gid);
                }
                Instruction::TmaWait { gid, .. } => {
                    if !tma_committed.iter().any(|&g| g <= gid) {
                        self.error(loc, format!("TMA_WAIT {gid} references no committed store group"));
                    }
                }
                Instruction::Wgmma(w) => {
                    if !wgmma_shape_supported(w.m, w.n, w.k, w.dtype, w.sparse) {
                        self.error(
                            loc,
                            format!(
                                "unsupported WGMMA m{}n{}k{} {}{}",
                                w.m,
                                w.n,
                                w.k,
                                w.dtype.keyword(),
                                if w.sparse { " sparse" } else { "" }
                            ),
                        );
                    }
                    if wgmma_committed.contains(&w.gid) {
                        self.error(loc, format!("WGMMA joins group {} after it was committed", w.gid));
                    }
                    *wgmma_open.entry(w.gid).or_default() += 1;
                }
                Instruction::WgmmaCommit { gid } => {
                    if wgmma_open.remove(&gid).is_none() {
                        self.error(loc, format!("WGMMA_COMMIT {gid} seals an empty group"));
                    }
                    wgmma_committed.insert(gid);
                }
                Instruction::WgmmaWait { gid, .. } => {
                    if !wgmma_committed.iter().any(|&g| g <= gid) {
                        self.error(loc, format!("WGMMA_WAIT {gid} references no committed group"));
                    }
                }
                Instruction::AcquireStage { sid } => {
                    if wg.role != Role::Producer {
                        self.error(loc, "ACQUIRE_STAGE outside the producer WarpGroup".into());
                    }
                    *usage.acquires.entry(sid).or_default() += 1;
                    pending_acquire.insert(sid);
                }
                Instruction::ReleaseStage { sid } => {
                    if wg.role == Role::Producer {
                        self.error(loc, "RELEASE_STAGE inside the producer WarpGroup".into());
                    }
                    *usage.releases.entry(sid).or_default() += 1;
                }
                Instruction::MbWait { sid } => {
                    *usage.waits.entry(sid).or_default() += 1;
                }
                Instruction::BarArrive { .. } | Instruction::BarWait { .. } | Instruction::Bubbles { .. } => {}
            }
        }
        for (gid, _) in wgmma_open {
            let loc = Location { block_id: Some(wg.block_id), role: Some(wg.role), ..Location::default() };
            self.warn(loc, format!("WGMMA group {gid} is never committed"));
        }
        for (gid, _) in tma_open {
            let loc = Location { block_id: Some(wg.block_id), role: Some(wg.role), ..Location::default() };
            self.warn(loc, format!("store group {gid} is never committed"));
        }
        usage
    }

    fn check_tile(&mut self, loc: Location, map: u32, gmem: u64) {
        let Some(desc) = self.program.tensor_map(map) else {
            self.error(Location { map_id: Some(map), ..loc }, format!("unresolved tensor map {map}"));
            return;
        };
        if let Err(e) = desc.tile_coords(gmem) {
            self.error(Location { map_id: Some(map), ..loc }, e.to_string());
        }
    }
}

#[derive(Default)]
struct StageUse {
    acquires: BTreeMap<u32, u32>,
    releases: BTreeMap<u32, u32>,
    loads: BTreeMap<u32, u32>,
    waits: BTreeMap<u32, u32>,
}

/// Static checks of a parsed program. An empty result means the program
/// satisfies every ISA invariant and the ring-buffer protocol: each
/// consumer releases every stage exactly as often as the producer
/// acquires it, and never waits on a stage more often than it is filled.
pub fn validate_program(program: &TraceProgram) -> Vec<Diagnostic> {
    let mut ck = Checker { program, out: Vec::new() };

    if program.stages == 0 {
        ck.error(Location::default(), "ring depth must be positive".into());
    }
    let mut seen_maps = HashSet::new();
    for m in &program.tensor_maps {
        let loc = Location { map_id: Some(m.map_id), ..Location::default() };
        if !seen_maps.insert(m.map_id) {
            ck.error(loc, format!("tensor map {} declared twice", m.map_id));
        }
        if let Err(e) = m.check() {
            ck.error(loc, e.to_string());
        }
    }

    let mut seen_blocks = HashSet::new();
    for block in &program.blocks {
        let loc = Location { block_id: Some(block.block_id), ..Location::default() };
        if !seen_blocks.insert(block.block_id) {
            ck.error(loc, format!("block id {} appears twice", block.block_id));
        }
        let producers = block.programs.iter().filter(|p| p.role == Role::Producer).count();
        if producers != 1 {
            ck.error(loc, format!("expected exactly one producer WarpGroup, found {producers}"));
        }
        if block.consumers().next().is_none() {
            ck.error(loc, "block has no consumer WarpGroup".into());
        }
        let mut roles = HashSet::new();
        for wg in &block.programs {
            if wg.block_id != block.block_id {
                ck.error(loc, format!("{} program carries block id {}", wg.role, wg.block_id));
            }
            if !roles.insert(wg.role) {
                ck.error(loc, format!("duplicate {} WarpGroup", wg.role));
            }
        }

        let mut producer_use = None;
        let mut consumer_use = Vec::new();
        for wg in &block.programs {
            let usage = ck.check_thread(wg);
            if wg.role == Role::Producer {
                producer_use = Some(usage);
            } else {
                consumer_use.push((wg.role, usage));
            }
        }
        let Some(prod) = producer_use else { continue };
        for (role, usage) in &consumer_use {
            let cloc = Location { block_id: Some(block.block_id), role: Some(*role), ..Location::default() };
            let sids: HashSet<u32> = prod.acquires.keys().chain(usage.releases.keys()).copied().collect();
            let mut sids: Vec<u32> = sids.into_iter().collect();
            sids.sort_unstable();
            for sid in sids {
                let acquired = prod.acquires.get(&sid).copied().unwrap_or(0);
                let released = usage.releases.get(&sid).copied().unwrap_or(0);
                if acquired != released {
                    ck.error(
                        cloc,
                        format!("stage {sid}: producer acquires it {acquired} time(s) but {role} releases it {released} time(s)"),
                    );
                }
            }
            for (&sid, &waits) in &usage.waits {
                let loads = prod.loads.get(&sid).copied().unwrap_or(0);
                if waits > loads {
                    ck.error(cloc, format!("stage {sid}: {role} waits {waits} time(s) but only {loads} load(s) fill it"));
                }
            }
        }
    }
    ck.out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::parse_trace;

    const PIPE: &str = "\
STAGES 2
DEF_TMAP 0 2 64 256 2 128 64 16 2 0x0
THREAD 0 PRODUCER
ACQUIRE_STAGE 0
TMA_TENSOR 0x0 0x0 0 0
ACQUIRE_STAGE 1
TMA_TENSOR 0x0 0x1000 0 1
ACQUIRE_STAGE 0
TMA_TENSOR 0x0 0x2000 0 0
THREAD 0 CONSUMER1
MB_WAIT 0
RELEASE_STAGE 0
MB_WAIT 1
RELEASE_STAGE 1
MB_WAIT 0
RELEASE_STAGE 0
";

    #[test]
    fn well_formed_pipeline_is_clean() {
        let p = parse_trace(PIPE).unwrap();
        assert_eq!(validate_program(&p), vec![]);
    }

    #[test]
    fn out_of_range_stage() {
        let text = PIPE.replace("ACQUIRE_STAGE 1\nTMA_TENSOR 0x0 0x1000 0 1", "ACQUIRE_STAGE 2\nTMA_TENSOR 0x0 0x1000 0 2");
        let p = parse_trace(&text).unwrap();
        let diags = validate_program(&p);
        assert!(diags.iter().any(|d| d.message.contains("stage index 2 out of range")), "{diags:?}");
    }

    #[test]
    fn missing_release_is_a_protocol_error() {
        let text = PIPE.replacen("RELEASE_STAGE 0\nMB_WAIT 1", "MB_WAIT 1", 1);
        let p = parse_trace(&text).unwrap();
        let diags = validate_program(&p);
        assert_eq!(diags.len(), 1, "{diags:?}");
        assert!(diags[0].message.contains("stage 0"));
        assert_eq!(diags[0].location.role, Some(Role::Consumer1));
    }

    #[test]
    fn out_of_bounds_tile() {
        // rows are 128 bytes apart; 0x7900 is row 242, a 16-row box overruns 256
        let text = PIPE.replace("0x2000 0 0", "0x7900 0 0");
        let diags = validate_program(&parse_trace(&text).unwrap());
        assert!(diags.iter().any(|d| d.message.contains("leaves the tensor")), "{diags:?}");
    }

    #[test]
    fn block_shape_checks() {
        let p = parse_trace("THREAD 0 CONSUMER1\nBUBBLES 1\n").unwrap();
        let diags = validate_program(&p);
        assert!(diags.iter().any(|d| d.message.contains("exactly one producer")));
        let p = parse_trace("THREAD 0 PRODUCER\nBUBBLES 1\n").unwrap();
        assert!(validate_program(&p).iter().any(|d| d.message.contains("no consumer")));
    }

    #[test]
    fn unsupported_wgmma_and_closed_group() {
        let text = "\
THREAD 0 PRODUCER
BUBBLES 1
THREAD 0 CONSUMER1
WGMMA 0 0 0 64 64 16 E4M3 0 SS 0 0
WGMMA_COMMIT 0
WGMMA 0 0 0 64 64 16 F16 0 SS 0 0
WGMMA_COMMIT 0
";
        let diags = validate_program(&parse_trace(text).unwrap());
        assert!(diags.iter().any(|d| d.message.contains("unsupported WGMMA")));
        assert!(diags.iter().any(|d| d.message.contains("after it was committed")));
    }

    #[test]
    fn load_without_acquire() {
        let text = PIPE.replacen("ACQUIRE_STAGE 0\nTMA_TENSOR 0x0 0x0 0 0", "TMA_TENSOR 0x0 0x0 0 0", 1);
        let diags = validate_program(&parse_trace(&text).unwrap());
        assert!(diags.iter().any(|d| d.message.contains("without a preceding ACQUIRE_STAGE")));
    }
}
