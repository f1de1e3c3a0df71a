//! Per-SM Tensor Memory Accelerator: descriptor-driven line generation,
//! setup latency, bounded in-flight lines and completion tracking.

use std::collections::{HashMap, HashSet, VecDeque};

use crate::isa::{TensorMapDescriptor, TensorMapError};
use crate::mem::{AccessKind, Backpressure, MemRequest};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum TmaKind {
    TensorLoad,
    TensorStore,
    /// Plain byte-range copy; skips the tensor-map setup path.
    Bulk,
}

impl TmaKind {
    pub fn uses_descriptor(self) -> bool {
        !matches!(self, TmaKind::Bulk)
    }

    fn access(self) -> AccessKind {
        match self {
            TmaKind::TensorStore => AccessKind::Write,
            TmaKind::TensorLoad | TmaKind::Bulk => AccessKind::Read,
        }
    }
}

/// Visits the byte offset (relative to the tensor base) of every element
/// of the box at `coords`, innermost dimension fastest.
fn for_each_element(desc: &TensorMapDescriptor, coords: &[u64], mut f: impl FnMut(u64)) {
    let rank = desc.rank();
    let mut idx = vec![0u64; rank];
    loop {
        let offset: u64 = (0..rank).map(|d| (coords[d] + idx[d]) * desc.strides[d]).sum();
        f(offset);
        let mut d = 0;
        loop {
            idx[d] += 1;
            if idx[d] < desc.box_dims[d] {
                break;
            }
            idx[d] = 0;
            d += 1;
            if d == rank {
                return;
            }
        }
    }
}

/// Line addresses a tile access touches, in first-touch order.
///
/// With `dedup` every line appears once; without it one request is
/// produced per element, as an engine without line merging would.
pub fn generate_line_requests(
    desc: &TensorMapDescriptor,
    gmem: u64,
    line_size: u64,
    dedup: bool,
) -> Result<Vec<u64>, TensorMapError> {
    let coords = desc.tile_coords(gmem)?;
    let elem = u64::from(desc.elem_size);
    let align = |addr: u64| addr / line_size * line_size;
    let mut out = Vec::new();
    if !dedup {
        for_each_element(desc, &coords, |off| out.push(align(desc.base_addr + off)));
        return Ok(out);
    }
    // Walk whole innermost rows; each is a contiguous byte run.
    let row_bytes = desc.box_dims[0] * elem;
    let mut seen = HashSet::new();
    let mut outer = desc.clone();
    outer.box_dims[0] = 1;
    for_each_element(&outer, &coords, |off| {
        let start = desc.base_addr + off;
        let mut line = align(start);
        while line < start + row_bytes {
            if seen.insert(line) {
                out.push(line);
            }
            line += line_size;
        }
    });
    Ok(out)
}

/// An operation handed to the engine. `token` identifies it in
/// completion and busy-interval events.
#[derive(Debug, Clone)]
pub struct TmaOp {
    pub kind: TmaKind,
    pub lines: Vec<u64>,
    pub token: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TmaEvent {
    /// Every line of the op has been answered.
    Completed { token: u64 },
    /// The engine was busy with this op (setup and line generation) over
    /// `[start, end)`.
    Busy { token: u64, start: u64, end: u64 },
}

#[derive(Debug)]
struct Active {
    op: TmaOp,
    accepted: u64,
    gen_start: u64,
    next: usize,
}

#[derive(Debug)]
pub struct TmaEngine {
    sm: u32,
    lines_per_cycle: u32,
    max_inflight: u32,
    setup_descriptor: u64,
    setup_bulk: u64,
    queue: VecDeque<TmaOp>,
    active: Option<Active>,
    /// token → lines not yet answered.
    outstanding: HashMap<u64, u32>,
    /// Ops whose generation finished, so they may complete.
    generated: HashSet<u64>,
    inflight: u32,
    max_inflight_seen: u32,
    events: Vec<TmaEvent>,
}

impl TmaEngine {
    pub fn new(sm: u32, cfg: &crate::config::SimConfig) -> Self {
        Self {
            sm,
            lines_per_cycle: cfg.tma_lines_per_cycle,
            max_inflight: cfg.tma_max_inflight_lines,
            setup_descriptor: cfg.tma_setup_cycles(true),
            setup_bulk: cfg.tma_setup_cycles(false),
            queue: VecDeque::new(),
            active: None,
            outstanding: HashMap::new(),
            generated: HashSet::new(),
            inflight: 0,
            max_inflight_seen: 0,
            events: Vec::new(),
        }
    }

    pub fn setup_latency(&self, kind: TmaKind) -> u64 {
        if kind.uses_descriptor() {
            self.setup_descriptor
        } else {
            self.setup_bulk
        }
    }

    /// Queues an op; it is accepted FIFO on a later tick.
    pub fn enqueue(&mut self, op: TmaOp) {
        debug_assert!(!op.lines.is_empty());
        self.queue.push_back(op);
    }

    pub fn inflight(&self) -> u32 {
        self.inflight
    }

    pub fn max_inflight_seen(&self) -> u32 {
        self.max_inflight_seen
    }

    pub fn is_idle(&self) -> bool {
        self.queue.is_empty() && self.active.is_none() && self.outstanding.is_empty()
    }

    /// Records a line response for the op with `token`.
    pub fn on_response(&mut self, token: u64) {
        let left = self.outstanding.get_mut(&token).expect("response for unknown TMA op");
        *left -= 1;
        self.inflight -= 1;
        if *left == 0 && self.generated.remove(&token) {
            self.outstanding.remove(&token);
            self.events.push(TmaEvent::Completed { token });
        }
    }

    /// One engine cycle: accept the next op if idle, then emit up to
    /// `lines_per_cycle` line requests through `submit`.
    pub fn tick(&mut self, now: u64, mut submit: impl FnMut(MemRequest) -> Result<(), Backpressure>) {
        if self.active.is_none() {
            if let Some(op) = self.queue.pop_front() {
                let setup = self.setup_latency(op.kind);
                self.outstanding.insert(op.token, op.lines.len() as u32);
                self.active = Some(Active { op, accepted: now, gen_start: now + setup, next: 0 });
            }
        }
        let Some(a) = self.active.as_mut() else { return };
        if now < a.gen_start {
            return;
        }
        let access = a.op.kind.access();
        for _ in 0..self.lines_per_cycle {
            if a.next == a.op.lines.len() || self.inflight >= self.max_inflight {
                break;
            }
            let req = MemRequest { line_addr: a.op.lines[a.next], kind: access, sm: self.sm, tag: a.op.token };
            if submit(req).is_err() {
                break;
            }
            a.next += 1;
            self.inflight += 1;
        }
        self.max_inflight_seen = self.max_inflight_seen.max(self.inflight);
        debug_assert!(self.inflight <= self.max_inflight);
        if a.next == a.op.lines.len() {
            let token = a.op.token;
            self.events.push(TmaEvent::Busy { token, start: a.accepted, end: now + 1 });
            self.active = None;
            // Responses cannot arrive in the cycle the line was sent, so the
            // op always still has outstanding lines here.
            self.generated.insert(token);
        }
    }

    pub fn drain_events(&mut self) -> Vec<TmaEvent> {
        std::mem::take(&mut self.events)
    }

    /// Earliest cycle the engine needs a tick, or `None` when it only waits
    /// on memory responses.
    pub fn next_tick(&self, now: u64) -> Option<u64> {
        match &self.active {
            Some(a) if a.gen_start > now + 1 => Some(a.gen_start),
            Some(a) if a.next < a.op.lines.len() && self.inflight >= self.max_inflight => None,
            Some(_) => Some(now + 1),
            None if !self.queue.is_empty() => Some(now + 1),
            None => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::SimConfig;

    fn desc(dims: &[u64], strides: &[u64], box_dims: &[u64], elem: u32) -> TensorMapDescriptor {
        TensorMapDescriptor {
            map_id: 0,
            dims: dims.to_vec(),
            strides: strides.to_vec(),
            box_dims: box_dims.to_vec(),
            elem_size: elem,
            base_addr: 0x10000,
        }
    }

    /// Brute-force reference: every byte of every element, deduplicated.
    fn oracle_lines(d: &TensorMapDescriptor, gmem: u64, line: u64) -> Vec<u64> {
        let coords = d.tile_coords(gmem).unwrap();
        let mut seen = Vec::new();
        for_each_element(d, &coords, |off| {
            for b in 0..u64::from(d.elem_size) {
                let l = (d.base_addr + off + b) / line * line;
                if !seen.contains(&l) {
                    seen.push(l);
                }
            }
        });
        seen
    }

    #[test]
    fn one_dimensional_line() {
        let d = desc(&[64], &[2], &[64], 2);
        assert_eq!(generate_line_requests(&d, 0x10000, 128, true).unwrap(), vec![0x10000]);
    }

    #[test]
    fn two_dimensional_tile() {
        let d = desc(&[1024, 128], &[2, 2048], &[128, 64], 2);
        let lines = generate_line_requests(&d, 0x10000, 128, true).unwrap();
        assert_eq!(lines.len(), 128);
        assert_eq!(lines, oracle_lines(&d, 0x10000, 128));
        let raw = generate_line_requests(&d, 0x10000, 128, false).unwrap();
        assert_eq!(raw.len(), 128 * 64);
        assert_eq!(raw.len() / lines.len(), 64);
    }

    #[test]
    fn overlapping_rows_share_lines() {
        let d = desc(&[1024, 128], &[2, 128], &[128, 64], 2);
        let lines = generate_line_requests(&d, 0x10000, 128, true).unwrap();
        assert_eq!(lines, oracle_lines(&d, 0x10000, 128));
        assert!((lines.len() as u64) < 128 * 64 / 64);
    }

    #[test]
    fn out_of_bounds_box_is_an_error() {
        let d = desc(&[64, 4], &[2, 128], &[64, 2], 2);
        assert!(generate_line_requests(&d, 0x10000 + 3 * 128, 128, true).is_err());
    }

    fn run_op(lines: usize, max_inflight: u32, latency: u64) -> (Vec<(u64, TmaEvent)>, u32, u64) {
        let cfg = SimConfig { tma_max_inflight_lines: max_inflight, ..SimConfig::default() };
        let mut eng = TmaEngine::new(0, &cfg);
        eng.enqueue(TmaOp { kind: TmaKind::TensorLoad, lines: (0..lines as u64).map(|l| l * 128).collect(), token: 7 });
        let mut pending: Vec<(u64, u64)> = Vec::new();
        let mut events = Vec::new();
        let mut last_emit = 0;
        let mut now = 1;
        while !eng.is_idle() {
            let due: Vec<_> = pending.iter().filter(|(t, _)| *t == now).copied().collect();
            pending.retain(|(t, _)| *t != now);
            for (_, tag) in due {
                eng.on_response(tag);
            }
            eng.tick(now, |req| {
                pending.push((now + latency, req.tag));
                last_emit = now;
                Ok(())
            });
            events.extend(eng.drain_events().into_iter().map(|e| (now, e)));
            now += 1;
        }
        (events, eng.max_inflight_seen(), last_emit)
    }

    #[test]
    fn closed_form_timing_with_fixed_latency() {
        // accepted at cycle 1; setup covers cycles 1..=170
        let (events, _, last_emit) = run_op(128, 1 << 20, 258);
        assert_eq!(last_emit, 1 + 170 + 63);
        let done = events.iter().find(|(_, e)| matches!(e, TmaEvent::Completed { .. })).unwrap().0;
        assert_eq!(done, 1 + 170 + 63 + 258);
        assert!(events.contains(&(234, TmaEvent::Busy { token: 7, start: 1, end: 235 })));
    }

    #[test]
    fn inflight_cap_holds_under_slow_memory() {
        let (_, peak, _) = run_op(128, 64, 5000);
        assert_eq!(peak, 64);
    }

    #[test]
    fn ops_are_accepted_fifo() {
        let cfg = SimConfig::default();
        let mut eng = TmaEngine::new(0, &cfg);
        for token in 0..2 {
            eng.enqueue(TmaOp { kind: TmaKind::TensorLoad, lines: vec![token * 128], token });
        }
        let mut busy = Vec::new();
        for now in 1..400 {
            eng.tick(now, |_| Ok(()));
            busy.extend(eng.drain_events());
        }
        assert_eq!(
            busy,
            vec![TmaEvent::Busy { token: 0, start: 1, end: 172 }, TmaEvent::Busy { token: 1, start: 172, end: 343 }]
        );
    }

    #[test]
    fn setup_costs() {
        let eng = TmaEngine::new(0, &SimConfig::default());
        assert_eq!(eng.setup_latency(TmaKind::Bulk), 40);
        assert_eq!(eng.setup_latency(TmaKind::TensorLoad), 170);
        let flat = TmaEngine::new(0, &SimConfig { tma_flat_setup: Some(5), ..SimConfig::default() });
        assert_eq!(flat.setup_latency(TmaKind::TensorStore), 5);
    }

    #[test]
    fn idle_engine_emits_nothing() {
        let mut eng = TmaEngine::new(0, &SimConfig::default());
        eng.tick(0, |_| panic!("no requests expected"));
        assert!(eng.drain_events().is_empty());
    }
}
