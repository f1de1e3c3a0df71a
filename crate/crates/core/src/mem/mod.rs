//! Request path from the SMs to DRAM: per-TPC read coalescing, a sliced
//! L2 with MSHRs and a partition-aware latency model, and DRAM channels.

mod cache;
mod dram;
mod hash;

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashMap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{SimConfig, SliceHash};

pub use cache::{CacheSlice, Evicted};
pub use dram::Dram;
pub use hash::slice_hash;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AccessKind {
    Read,
    Write,
}

/// A cache-line request leaving an SM. `tag` is opaque to the memory
/// system and handed back with the response.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemRequest {
    pub line_addr: u64,
    pub kind: AccessKind,
    pub sm: u32,
    pub tag: u64,
}

/// A response arriving back at an SM.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Delivery {
    pub sm: u32,
    pub tag: u64,
    pub line_addr: u64,
    pub kind: AccessKind,
}

/// The target slice's request queue is full; retry next cycle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Backpressure;

/// Byte and event counters for every level of the hierarchy.
///
/// `l2_read_requests`/`l2_write_requests` count line requests as issued by
/// the SMs, before any coalescing. `l2_read_bytes`/`l2_write_bytes` count
/// what actually reaches the L2 slices.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrafficCounters {
    pub l2_read_bytes: u64,
    pub l2_write_bytes: u64,
    pub dram_read_bytes: u64,
    pub dram_write_bytes: u64,
    pub l2_hits: u64,
    pub l2_misses: u64,
    pub mshr_merges: u64,
    pub lrc_merges: u64,
    pub l2_read_requests: u64,
    pub l2_write_requests: u64,
    pub remotecopy_inserts: u64,
    pub max_mshr_occupancy: u64,
    pub line_size: u64,
}

impl TrafficCounters {
    /// Bytes requested from the L2 by the SMs, before coalescing.
    pub fn l2_requested_bytes(&self) -> u64 {
        (self.l2_read_requests + self.l2_write_requests) * self.line_size
    }

    pub fn dram_bytes(&self) -> u64 {
        self.dram_read_bytes + self.dram_write_bytes
    }
}

#[derive(Debug, Clone, Copy)]
struct Forwarded {
    line: u64,
    kind: AccessKind,
    sm: u32,
    tag: u64,
}

#[derive(Debug, Default)]
struct MshrEntry {
    waiters: Vec<Forwarded>,
    dirty_on_fill: bool,
    shadow: bool,
}

#[derive(Debug)]
struct Slice {
    cache: CacheSlice,
    req_q: VecDeque<Forwarded>,
    mshr: HashMap<u64, MshrEntry>,
    resp_inflight: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Response {
    ready: u64,
    seq: u64,
    slice: u32,
    req: ForwardedKey,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ForwardedKey {
    line: u64,
    kind: AccessKind,
    sm: u32,
    tag: u64,
}

impl Ord for Response {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.ready, self.seq).cmp(&(other.ready, other.seq))
    }
}

impl PartialOrd for Response {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone)]
struct Params {
    num_sms: u32,
    line_size: u64,
    slices: u32,
    partitions: u32,
    hash: SliceHash,
    near: u64,
    far: u64,
    req_q: usize,
    resp_q: u32,
    mshr_cap: usize,
    lrc: bool,
    remotecopy: bool,
    p_max: f64,
    threshold: f64,
}

impl Params {
    fn sm_partition(&self, sm: u32) -> u32 {
        (u64::from(sm) * u64::from(self.partitions) / u64::from(self.num_sms)) as u32
    }

    fn slice_partition(&self, slice: u32) -> u32 {
        (u64::from(slice) * u64::from(self.partitions) / u64::from(self.slices)) as u32
    }

    fn latency(&self, sm: u32, slice: u32) -> u64 {
        if self.sm_partition(sm) == self.slice_partition(slice) {
            self.near
        } else {
            self.far
        }
    }

    /// The slice in `partition` that mirrors `home` for shadow copies.
    fn mirror(&self, home: u32, partition: u32) -> u32 {
        let per = self.slices / self.partitions;
        partition * per + home % per
    }
}

/// The shared memory hierarchy below the SMs.
#[derive(Debug)]
pub struct MemorySystem {
    p: Params,
    slices: Vec<Slice>,
    dram: Dram,
    /// (tpc, line) → every requester waiting on the one forwarded read.
    lrc: HashMap<(u32, u64), Vec<(u32, u64)>>,
    responses: BinaryHeap<Reverse<Response>>,
    seq: u64,
    rng: ChaCha8Rng,
    counters: TrafficCounters,
}

impl MemorySystem {
    pub fn new(cfg: &SimConfig) -> Self {
        let p = Params {
            num_sms: cfg.num_sms,
            line_size: cfg.line_size,
            slices: cfg.l2_slices,
            partitions: cfg.l2_partitions,
            hash: cfg.slice_hash,
            near: cfg.l2_near_latency,
            far: cfg.l2_far_latency,
            req_q: cfg.l2_req_q as usize,
            resp_q: cfg.l2_resp_q,
            mshr_cap: cfg.llc_mshr_per_slice as usize,
            lrc: cfg.lrc_enabled,
            remotecopy: cfg.remotecopy_enabled && cfg.l2_partitions > 1,
            p_max: cfg.remotecopy_p_max,
            threshold: cfg.remotecopy_occupancy_threshold,
        };
        let sets = cfg.l2_sets_per_slice();
        let slices = (0..cfg.l2_slices)
            .map(|_| Slice {
                cache: CacheSlice::new(sets, cfg.l2_ways, cfg.l2_slices),
                req_q: VecDeque::new(),
                mshr: HashMap::new(),
                resp_inflight: 0,
            })
            .collect();
        Self {
            dram: Dram::new(
                cfg.dram_channels,
                cfg.dram_latency_cycles,
                cfg.dram_bytes_per_cycle_per_channel,
                cfg.line_size,
            ),
            p,
            slices,
            lrc: HashMap::new(),
            responses: BinaryHeap::new(),
            seq: 0,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            counters: TrafficCounters { line_size: cfg.line_size, ..TrafficCounters::default() },
        }
    }

    pub fn counters(&self) -> &TrafficCounters {
        &self.counters
    }

    pub fn home_slice(&self, line_addr: u64) -> u32 {
        slice_hash(line_addr / self.p.line_size, self.p.slices, self.p.hash)
    }

    pub fn mshr_occupancy(&self, slice: u32) -> usize {
        self.slices[slice as usize].mshr.len()
    }

    /// Offers a request to the hierarchy. Reads to a line already in
    /// flight from the same TPC piggyback on that read.
    pub fn submit(&mut self, req: MemRequest, _now: u64) -> Result<(), Backpressure> {
        debug_assert_eq!(req.line_addr % self.p.line_size, 0, "unaligned line request");
        let line = req.line_addr / self.p.line_size;
        let tpc = req.sm / 2;
        if req.kind == AccessKind::Read && self.p.lrc {
            if let Some(waiters) = self.lrc.get_mut(&(tpc, line)) {
                waiters.push((req.sm, req.tag));
                self.counters.lrc_merges += 1;
                self.counters.l2_read_requests += 1;
                return Ok(());
            }
        }
        let target = self.route(line, req.sm, req.kind);
        let slice = &mut self.slices[target as usize];
        if slice.req_q.len() >= self.p.req_q {
            return Err(Backpressure);
        }
        slice.req_q.push_back(Forwarded { line, kind: req.kind, sm: req.sm, tag: req.tag });
        match req.kind {
            AccessKind::Read => {
                self.counters.l2_read_requests += 1;
                self.counters.l2_read_bytes += self.p.line_size;
                if self.p.lrc {
                    self.lrc.insert((tpc, line), vec![(req.sm, req.tag)]);
                }
            }
            AccessKind::Write => {
                self.counters.l2_write_requests += 1;
                self.counters.l2_write_bytes += self.p.line_size;
            }
        }
        Ok(())
    }

    fn route(&self, line: u64, sm: u32, kind: AccessKind) -> u32 {
        let home = slice_hash(line, self.p.slices, self.p.hash);
        if kind == AccessKind::Read && self.p.remotecopy {
            let part = self.p.sm_partition(sm);
            if part != self.p.slice_partition(home) {
                let mirror = self.p.mirror(home, part);
                if self.slices[mirror as usize].cache.contains(line) {
                    return mirror;
                }
            }
        }
        home
    }

    /// Hands back every response due by `now`, fanning coalesced reads out
    /// to all their requesters.
    pub fn deliver(&mut self, now: u64) -> Vec<Delivery> {
        let mut out = Vec::new();
        while let Some(Reverse(r)) = self.responses.peek() {
            if r.ready > now {
                break;
            }
            let Reverse(r) = self.responses.pop().expect("peeked");
            self.slices[r.slice as usize].resp_inflight -= 1;
            let req = r.req;
            let line_addr = req.line * self.p.line_size;
            if req.kind == AccessKind::Read {
                self.maybe_shadow(r.slice, req.line, req.sm);
            }
            if req.kind == AccessKind::Read && self.p.lrc {
                let waiters = self.lrc.remove(&(req.sm / 2, req.line)).expect("coalescer entry for forwarded read");
                out.extend(waiters.into_iter().map(|(sm, tag)| Delivery { sm, tag, line_addr, kind: req.kind }));
            } else {
                out.push(Delivery { sm: req.sm, tag: req.tag, line_addr, kind: req.kind });
            }
        }
        out
    }

    /// Far-partition read responses may leave a shadow copy in the
    /// requester's near partition, with probability ramping linearly from
    /// zero at the occupancy threshold to `p_max` at a full slice.
    fn maybe_shadow(&mut self, served_by: u32, line: u64, sm: u32) {
        if !self.p.remotecopy {
            return;
        }
        let part = self.p.sm_partition(sm);
        if part == self.p.slice_partition(served_by) {
            return;
        }
        let mirror = self.p.mirror(served_by, part) as usize;
        let m = &self.slices[mirror];
        if m.cache.contains(line) || m.mshr.contains_key(&line) {
            return;
        }
        let occ = m.cache.occupancy();
        if occ < self.p.threshold {
            return;
        }
        let span = 1.0 - self.p.threshold;
        let p = if span <= 0.0 { self.p.p_max } else { self.p.p_max * ((occ - self.p.threshold) / span).min(1.0) };
        if self.rng.gen::<f64>() < p {
            self.counters.remotecopy_inserts += 1;
            let ev = self.slices[mirror].cache.insert(line, false, true);
            self.writeback(mirror as u32, ev);
        }
    }

    fn writeback(&mut self, slice: u32, ev: Option<Evicted>) {
        if let Some(Evicted { line, dirty: true }) = ev {
            self.counters.dram_write_bytes += self.p.line_size;
            self.dram.enqueue_write(slice, line);
        }
    }

    fn respond(&mut self, now: u64, slice: u32, f: Forwarded) {
        let ready = now + self.p.latency(f.sm, slice);
        self.seq += 1;
        self.slices[slice as usize].resp_inflight += 1;
        self.responses.push(Reverse(Response {
            ready,
            seq: self.seq,
            slice,
            req: ForwardedKey { line: f.line, kind: f.kind, sm: f.sm, tag: f.tag },
        }));
    }

    /// Applies DRAM fills, lets every slice serve the head of its request
    /// queue, then advances DRAM.
    pub fn tick(&mut self, now: u64) {
        while let Some((slice, line)) = self.dram.pop_fill(now) {
            self.fill(now, slice, line);
        }
        for s in 0..self.slices.len() {
            self.serve_head(now, s as u32);
        }
        self.dram.tick(now);
    }

    fn fill(&mut self, now: u64, slice: u32, line: u64) {
        let entry = self.slices[slice as usize].mshr.remove(&line).expect("fill without MSHR entry");
        let ev = self.slices[slice as usize].cache.insert(line, entry.dirty_on_fill, entry.shadow);
        self.writeback(slice, ev);
        for w in entry.waiters {
            if w.kind == AccessKind::Read {
                self.respond(now, slice, w);
            }
        }
    }

    fn serve_head(&mut self, now: u64, s: u32) {
        let resp_q = self.p.resp_q;
        let mshr_cap = self.p.mshr_cap;
        let slice = &mut self.slices[s as usize];
        let Some(&head) = slice.req_q.front() else { return };
        let write = head.kind == AccessKind::Write;
        if slice.cache.contains(head.line) {
            if slice.resp_inflight >= resp_q {
                return;
            }
            slice.req_q.pop_front();
            slice.cache.access(head.line, write);
            self.counters.l2_hits += 1;
            self.respond(now, s, head);
            return;
        }
        if let Some(entry) = slice.mshr.get_mut(&head.line) {
            slice.req_q.pop_front();
            self.counters.mshr_merges += 1;
            if write {
                entry.dirty_on_fill = true;
                self.respond(now, s, head);
            } else {
                entry.waiters.push(head);
            }
            return;
        }
        if write {
            // Full-line writes allocate without fetching the old data.
            if slice.resp_inflight >= resp_q {
                return;
            }
            slice.req_q.pop_front();
            self.counters.l2_misses += 1;
            let ev = slice.cache.insert(head.line, true, false);
            self.writeback(s, ev);
            self.respond(now, s, head);
            return;
        }
        if slice.mshr.len() >= mshr_cap {
            return;
        }
        slice.req_q.pop_front();
        self.counters.l2_misses += 1;
        let home = slice_hash(head.line, self.p.slices, self.p.hash);
        slice.mshr.insert(head.line, MshrEntry { waiters: vec![head], dirty_on_fill: false, shadow: home != s });
        let occ = slice.mshr.len() as u64;
        self.counters.max_mshr_occupancy = self.counters.max_mshr_occupancy.max(occ);
        self.counters.dram_read_bytes += self.p.line_size;
        self.dram.enqueue_read(s, head.line);
    }

    /// Whether anything is queued or in flight anywhere in the hierarchy.
    pub fn is_idle(&self) -> bool {
        self.responses.is_empty()
            && self.dram.is_idle()
            && self.slices.iter().all(|s| s.req_q.is_empty() && s.mshr.is_empty())
    }

    /// Earliest cycle at which the hierarchy can change state on its own,
    /// or `None` if it is idle.
    pub fn next_event(&self, now: u64) -> Option<u64> {
        if self.dram.has_queued() || self.slices.iter().any(|s| !s.req_q.is_empty()) {
            return Some(now + 1);
        }
        let resp = self.responses.peek().map(|Reverse(r)| r.ready);
        match (resp, self.dram.next_fill()) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        }
    }

    /// Writes back every dirty line at the end of a run; the DRAM bytes
    /// are counted but not timed.
    pub fn flush(&mut self) {
        for slice in &mut self.slices {
            let dirty = slice.cache.drain_dirty().len() as u64;
            self.counters.dram_write_bytes += dirty * self.p.line_size;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> SimConfig {
        SimConfig { remotecopy_enabled: false, ..SimConfig::default() }
    }

    fn read(line_addr: u64, sm: u32, tag: u64) -> MemRequest {
        MemRequest { line_addr, kind: AccessKind::Read, sm, tag }
    }

    /// Runs until idle, returning (cycle, delivery) pairs.
    fn drain(mem: &mut MemorySystem, start: u64) -> Vec<(u64, Delivery)> {
        let mut out = Vec::new();
        let mut now = start;
        while !mem.is_idle() {
            for d in mem.deliver(now) {
                out.push((now, d));
            }
            mem.tick(now);
            now += 1;
            assert!(now < start + 1_000_000);
        }
        out
    }

    #[test]
    fn miss_then_hit_latencies() {
        let mut mem = MemorySystem::new(&cfg());
        // line 0 lives in slice 0, near to SM 0
        mem.submit(read(0, 0, 1), 0).unwrap();
        let got = drain(&mut mem, 0);
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].0, 350 + 258);
        mem.submit(read(0, 0, 2), 1000).unwrap();
        let got = drain(&mut mem, 1000);
        assert_eq!(got[0].0, 1000 + 258);
        let c = mem.counters();
        assert_eq!((c.l2_hits, c.l2_misses, c.dram_read_bytes), (1, 1, 128));
    }

    #[test]
    fn far_hit_latency() {
        let mut mem = MemorySystem::new(&cfg());
        mem.submit(read(0, 100, 1), 0).unwrap();
        drain(&mut mem, 0);
        mem.submit(read(0, 100, 2), 2000).unwrap();
        assert_eq!(drain(&mut mem, 2000)[0].0, 2000 + 414);
    }

    #[test]
    fn coalescer_merges_within_a_tpc_only() {
        let mut mem = MemorySystem::new(&cfg());
        mem.submit(read(0, 0, 1), 0).unwrap();
        mem.submit(read(0, 1, 2), 0).unwrap();
        mem.submit(read(0, 2, 3), 0).unwrap();
        let got = drain(&mut mem, 0);
        assert_eq!(got.len(), 3);
        let c = mem.counters();
        assert_eq!(c.lrc_merges, 1);
        assert_eq!(c.l2_read_requests, 3);
        assert_eq!(c.l2_read_bytes, 2 * 128);
        // SM 2's read merged in the MSHR: one DRAM read in total
        assert_eq!(c.mshr_merges, 1);
        assert_eq!(c.dram_read_bytes, 128);
    }

    #[test]
    fn without_coalescer_every_read_reaches_l2() {
        let mut mem = MemorySystem::new(&SimConfig { lrc_enabled: false, ..cfg() });
        mem.submit(read(0, 0, 1), 0).unwrap();
        mem.submit(read(0, 1, 2), 0).unwrap();
        assert_eq!(drain(&mut mem, 0).len(), 2);
        assert_eq!(mem.counters().l2_read_bytes, 256);
    }

    #[test]
    fn request_queue_backpressure() {
        let mut mem = MemorySystem::new(&cfg());
        let same_slice: Vec<u64> = (0..100_000u64).filter(|l| mem.home_slice(l * 128) == 3).take(33).collect();
        for (i, l) in same_slice.iter().enumerate().take(32) {
            mem.submit(read(l * 128, 0, i as u64), 0).unwrap();
        }
        assert_eq!(mem.submit(read(same_slice[32] * 128, 0, 99), 0), Err(Backpressure));
    }

    #[test]
    fn mshr_caps_outstanding_misses() {
        let c = SimConfig { l2_slices: 1, l2_partitions: 1, l2_total_bytes: 1 << 20, llc_mshr_per_slice: 256, l2_req_q: 1024, ..cfg() };
        let mut mem = MemorySystem::new(&c);
        for i in 0..300u64 {
            mem.submit(read(i * 128, 0, i), 0).unwrap();
        }
        mem.tick(0);
        let mut now = 1;
        let mut peak = 0;
        while !mem.is_idle() {
            mem.deliver(now);
            mem.tick(now);
            peak = peak.max(mem.mshr_occupancy(0));
            now += 1;
        }
        assert_eq!(peak, 256);
        assert_eq!(mem.counters().max_mshr_occupancy, 256);
        assert_eq!(mem.counters().dram_read_bytes, 300 * 128);
    }

    #[test]
    fn dirty_lines_are_written_back() {
        let c = SimConfig { l2_slices: 1, l2_partitions: 1, l2_total_bytes: 128 * 16, ..cfg() };
        let mut mem = MemorySystem::new(&c);
        for i in 0..20u64 {
            mem.submit(MemRequest { line_addr: i * 128, kind: AccessKind::Write, sm: 0, tag: i }, 0).unwrap();
            drain(&mut mem, i * 1000);
        }
        // 16-line cache: four evictions during the run, 16 on flush
        assert_eq!(mem.counters().dram_write_bytes, 4 * 128);
        mem.flush();
        assert_eq!(mem.counters().dram_write_bytes, 20 * 128);
        assert_eq!(mem.counters().dram_read_bytes, 0);
    }

    #[test]
    fn shadow_copies_need_occupancy() {
        // one 16-way set per slice
        let c = SimConfig {
            remotecopy_enabled: true,
            remotecopy_p_max: 1.0,
            l2_total_bytes: 80 * 16 * 128,
            ..cfg()
        };
        let mut mem = MemorySystem::new(&c);
        // fill slice 40, the partition-1 mirror of slice 0, from a near SM
        let mirror_lines: Vec<u64> = (1..100_000u64).filter(|l| mem.home_slice(l * 128) == 40).take(16).collect();
        for (i, l) in mirror_lines.iter().enumerate() {
            mem.submit(read(l * 128, 100, i as u64), 0).unwrap();
        }
        drain(&mut mem, 0);
        assert_eq!(mem.counters().remotecopy_inserts, 0);
        // line 0 is homed in slice 0 (partition 0); SM 100 is in partition 1
        mem.submit(read(0, 100, 1), 10_000).unwrap();
        drain(&mut mem, 10_000);
        assert_eq!(mem.counters().remotecopy_inserts, 1);
        mem.submit(read(0, 100, 2), 20_000).unwrap();
        assert_eq!(drain(&mut mem, 20_000)[0].0, 20_000 + 258);

        let c = SimConfig { remotecopy_enabled: true, remotecopy_p_max: 1.0, ..cfg() };
        let mut mem = MemorySystem::new(&c);
        mem.submit(read(0, 100, 1), 0).unwrap();
        drain(&mut mem, 0);
        assert_eq!(mem.counters().remotecopy_inserts, 0);
    }
}
