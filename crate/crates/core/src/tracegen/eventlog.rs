//! Binary per-warp event logs from an instrumented FA3 kernel and their
//! offline translation into trace programs.
//!
//! Layout: a little-endian header `{num_warps: u32, buffer_len: u32}`
//! followed by one buffer of `buffer_len` 16-byte records per warp, warps
//! of block `b` at buffers `b * num_warps ..`. Warps 0-3 are the producer,
//! 4-7 the first consumer and 8-11 the second. Unused slots hold
//! `event_id = 0`; a full buffer ends with the `0xFFFF` overflow sentinel.

use std::fmt;

use crate::isa::{Instruction, Role, ThreadBlock, TraceProgram, WarpGroupProgram};

use super::{
    block_desc, bubble_cycles, k_stage, load_stage, pv_group, qk_group, serial_barriers, store_output, v_stage,
    BlockDesc, Fa3Workload, Schedule, Tensor, TensorLayout, PINGPONG_QK, PINGPONG_SOFTMAX,
};

pub const ENTRY_BYTES: usize = 16;
pub const HEADER_BYTES: usize = 8;
pub const WARPS_PER_WARPGROUP: u32 = 4;
pub const EMPTY_SLOT: u16 = 0;
pub const OVERFLOW_SENTINEL: u16 = 0xFFFF;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u16)]
pub enum EventId {
    TmaQIssue = 1,
    TmaKIssue = 2,
    TmaVIssue = 3,
    WaitKStart = 4,
    GemmQkIssue = 5,
    WaitVStart = 6,
    GemmPvIssue = 7,
    /// Wait until at most one WGMMA group is outstanding.
    WaitWg1 = 8,
    /// Wait until all WGMMA groups have drained.
    WaitWg0 = 9,
}

impl EventId {
    pub fn from_u16(v: u16) -> Option<Self> {
        use EventId::*;
        Some(match v {
            1 => TmaQIssue,
            2 => TmaKIssue,
            3 => TmaVIssue,
            4 => WaitKStart,
            5 => GemmQkIssue,
            6 => WaitVStart,
            7 => GemmPvIssue,
            8 => WaitWg1,
            9 => WaitWg0,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EventLogEntry {
    pub timestamp: u64,
    pub event_id: u16,
    pub stage: u16,
    /// Tile index.
    pub payload: u16,
}

impl EventLogEntry {
    pub fn new(timestamp: u64, id: EventId, stage: u32, payload: u16) -> Self {
        Self { timestamp, event_id: id as u16, stage: stage as u16, payload }
    }

    pub fn encode(&self) -> [u8; ENTRY_BYTES] {
        let mut out = [0u8; ENTRY_BYTES];
        out[0..8].copy_from_slice(&self.timestamp.to_le_bytes());
        out[8..10].copy_from_slice(&self.event_id.to_le_bytes());
        out[10..12].copy_from_slice(&self.stage.to_le_bytes());
        out[12..14].copy_from_slice(&self.payload.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8; ENTRY_BYTES]) -> Self {
        let u16_at = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]);
        Self {
            timestamp: u64::from_le_bytes(bytes[0..8].try_into().unwrap()),
            event_id: u16_at(8),
            stage: u16_at(10),
            payload: u16_at(12),
        }
    }

    /// Fields that must agree across the warps of one WarpGroup.
    fn key(&self) -> (u16, u16, u16) {
        (self.event_id, self.stage, self.payload)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EventLogError {
    #[error("event log is {len} bytes, shorter than its header")]
    MissingHeader { len: usize },
    #[error("event log body of {body} bytes does not hold whole buffers of {buffer_len} entries")]
    Truncated { body: usize, buffer_len: u32 },
    #[error("{buffers} warp buffers is not a multiple of {num_warps} warps per block")]
    PartialBlock { buffers: usize, num_warps: u32 },
    #[error("{got} warps per block does not fit {consumers} consumer WarpGroups (expected {expected})")]
    WarpCount { got: u32, expected: u32, consumers: u32 },
    #[error("warp buffer {warp}, entry {index}: unknown event id {id:#x}")]
    UnknownEvent { warp: usize, index: usize, id: u16 },
    #[error("warp buffer {warp}, entry {index}: timestamps go backwards")]
    Unsorted { warp: usize, index: usize },
    #[error("block {block} {role}: warp {warp} disagrees with lane 0 of its WarpGroup")]
    Mismatch { block: u32, role: Role, warp: u32 },
    #[error("block {block} {role}, event {index}: unexpected event id {id}")]
    Unexpected { block: u32, role: Role, index: usize, id: u16 },
    #[error("block {block} {role}, event {index}: tile index {tile} out of range")]
    TileRange { block: u32, role: Role, index: usize, tile: u16 },
    #[error("block {block}: no Q load in the producer stream")]
    NoQLoad { block: u32 },
    #[error("workload has {tiles} tiles, more than a 16-bit payload can index")]
    PayloadOverflow { tiles: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventLog {
    pub num_warps: u32,
    pub buffer_len: u32,
    /// One padded buffer per warp.
    pub buffers: Vec<Vec<EventLogEntry>>,
}

impl EventLog {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_BYTES + self.buffers.len() * self.buffer_len as usize * ENTRY_BYTES);
        out.extend_from_slice(&self.num_warps.to_le_bytes());
        out.extend_from_slice(&self.buffer_len.to_le_bytes());
        let empty = EventLogEntry { timestamp: 0, event_id: EMPTY_SLOT, stage: 0, payload: 0 };
        for buf in &self.buffers {
            for i in 0..self.buffer_len as usize {
                out.extend_from_slice(&buf.get(i).unwrap_or(&empty).encode());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, EventLogError> {
        if bytes.len() < HEADER_BYTES {
            return Err(EventLogError::MissingHeader { len: bytes.len() });
        }
        let num_warps = u32::from_le_bytes(bytes[0..4].try_into().unwrap());
        let buffer_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        let body = &bytes[HEADER_BYTES..];
        let buf_bytes = buffer_len as usize * ENTRY_BYTES;
        if (buf_bytes == 0 && !body.is_empty()) || (buf_bytes > 0 && !body.len().is_multiple_of(buf_bytes)) {
            return Err(EventLogError::Truncated { body: body.len(), buffer_len });
        }
        let buffers: Vec<Vec<EventLogEntry>> = if buf_bytes == 0 {
            Vec::new()
        } else {
            body.chunks_exact(buf_bytes)
                .map(|chunk| chunk.chunks_exact(ENTRY_BYTES).map(|e| EventLogEntry::decode(e.try_into().unwrap())).collect())
                .collect()
        };
        if num_warps == 0 || !buffers.len().is_multiple_of(num_warps as usize) {
            return Err(EventLogError::PartialBlock { buffers: buffers.len(), num_warps });
        }
        Ok(Self { num_warps, buffer_len, buffers })
    }
}

fn role_of_warpgroup(wg: u32) -> Role {
    Role::ALL[wg as usize]
}

fn producer_events(w: &Fa3Workload, blk: &BlockDesc) -> Vec<(EventId, u32, u16)> {
    let mut out = vec![(EventId::TmaQIssue, load_stage(0, w.stages), blk.q_tile as u16)];
    for j in 0..w.kv_tiles() {
        out.push((EventId::TmaKIssue, k_stage(j, w.stages), j as u16));
        out.push((EventId::TmaVIssue, v_stage(j, w.stages), j as u16));
    }
    out
}

fn consumer_events(w: &Fa3Workload) -> Vec<(EventId, u32, u16)> {
    let mut out = Vec::new();
    for j in 0..w.kv_tiles() {
        let (sk, sv, t) = (k_stage(j, w.stages), v_stage(j, w.stages), j as u16);
        out.extend([
            (EventId::WaitKStart, sk, t),
            (EventId::GemmQkIssue, sk, t),
            (EventId::WaitVStart, sv, t),
            (EventId::GemmPvIssue, sv, t),
            (EventId::WaitWg1, sk, t),
            (EventId::WaitWg0, sv, t),
        ]);
    }
    out
}

/// What an instrumented kernel would log for this workload. Buffers are
/// sized to the longest stream.
pub fn emit_event_log(w: &Fa3Workload) -> Result<EventLog, EventLogError> {
    emit_event_log_with_capacity(w, None)
}

/// Like [`emit_event_log`], but streams longer than `capacity` keep their
/// first `capacity - 1` events followed by the overflow sentinel.
pub fn emit_event_log_with_capacity(w: &Fa3Workload, capacity: Option<u32>) -> Result<EventLog, EventLogError> {
    let tiles = w.kv_tiles().max(w.q_tiles());
    if tiles > u64::from(u16::MAX) + 1 {
        return Err(EventLogError::PayloadOverflow { tiles });
    }
    let wgs = 1 + w.consumers;
    let num_warps = wgs * WARPS_PER_WARPGROUP;
    let consumer_stream = consumer_events(w);
    let mut buffers = Vec::new();
    for blk in super::grid_blocks(w) {
        let producer_stream = producer_events(w, &blk);
        for wg in 0..wgs {
            let stream = if wg == 0 { &producer_stream } else { &consumer_stream };
            for lane_warp in 0..WARPS_PER_WARPGROUP {
                let warp = u64::from(wg * WARPS_PER_WARPGROUP + lane_warp);
                // Warps of one WarpGroup log the same events a few cycles apart.
                let mut buf: Vec<EventLogEntry> = stream
                    .iter()
                    .enumerate()
                    .map(|(i, &(id, stage, payload))| EventLogEntry::new(1000 * i as u64 + warp, id, stage, payload))
                    .collect();
                if let Some(cap) = capacity {
                    let cap = cap as usize;
                    if buf.len() > cap && cap > 0 {
                        buf.truncate(cap - 1);
                        let ts = buf.last().map_or(0, |e| e.timestamp + 1);
                        buf.push(EventLogEntry { timestamp: ts, event_id: OVERFLOW_SENTINEL, stage: 0, payload: 0 });
                    }
                }
                buffers.push(buf);
            }
        }
    }
    let buffer_len = match capacity {
        Some(cap) => cap,
        None => buffers.iter().map(Vec::len).max().unwrap_or(0) as u32,
    };
    Ok(EventLog { num_warps, buffer_len, buffers })
}

/// Result of translating an event log.
#[derive(Debug, Clone)]
pub struct Translation {
    pub program: TraceProgram,
    /// Streams cut short by a full buffer.
    pub warnings: Vec<String>,
}

impl fmt::Display for Translation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} blocks, {} warnings", self.program.blocks.len(), self.warnings.len())
    }
}

/// One WarpGroup's events after dedup, and whether the buffer overflowed.
struct Stream {
    events: Vec<EventLogEntry>,
    truncated: bool,
}

fn dedup_warpgroup(log: &EventLog, block: u32, wg: u32) -> Result<Stream, EventLogError> {
    let first = (block * log.num_warps + wg * WARPS_PER_WARPGROUP) as usize;
    let mut lane0: Option<Vec<EventLogEntry>> = None;
    for lane_warp in 0..WARPS_PER_WARPGROUP {
        let warp = first + lane_warp as usize;
        let mut events = Vec::new();
        let mut last_ts = 0;
        for (index, e) in log.buffers[warp].iter().enumerate() {
            if e.event_id == EMPTY_SLOT {
                continue;
            }
            if e.event_id != OVERFLOW_SENTINEL && EventId::from_u16(e.event_id).is_none() {
                return Err(EventLogError::UnknownEvent { warp, index, id: e.event_id });
            }
            if e.timestamp < last_ts {
                return Err(EventLogError::Unsorted { warp, index });
            }
            last_ts = e.timestamp;
            events.push(*e);
        }
        match &lane0 {
            None => lane0 = Some(events),
            Some(reference) => {
                if !reference.iter().map(EventLogEntry::key).eq(events.iter().map(EventLogEntry::key)) {
                    return Err(EventLogError::Mismatch { block, role: role_of_warpgroup(wg), warp: lane_warp });
                }
            }
        }
    }
    let mut events = lane0.unwrap_or_default();
    let truncated = events.last().is_some_and(|e| e.event_id == OVERFLOW_SENTINEL);
    events.retain(|e| e.event_id != OVERFLOW_SENTINEL);
    Ok(Stream { events, truncated })
}

fn translate_producer(
    w: &Fa3Workload,
    layout: &TensorLayout,
    blk: &BlockDesc,
    stream: &Stream,
) -> Result<Vec<Instruction>, EventLogError> {
    let (block, role) = (blk.block_id, Role::Producer);
    let mut out = Vec::new();
    for (index, e) in stream.events.iter().enumerate() {
        let sid = u32::from(e.stage);
        let tile = u64::from(e.payload);
        let (tensor, head, len, tile_rows, tiles) = match EventId::from_u16(e.event_id) {
            Some(EventId::TmaQIssue) => (Tensor::Q, blk.q_head, w.l, w.t_m, w.q_tiles()),
            Some(EventId::TmaKIssue) => (Tensor::K, blk.kv_head, w.s, w.t_n, w.kv_tiles()),
            Some(EventId::TmaVIssue) => (Tensor::V, blk.kv_head, w.s, w.t_n, w.kv_tiles()),
            _ => return Err(EventLogError::Unexpected { block, role, index, id: e.event_id }),
        };
        if tile >= tiles {
            return Err(EventLogError::TileRange { block, role, index, tile: e.payload });
        }
        let rows = TensorLayout::rows(len, tile_rows, tile);
        out.push(Instruction::AcquireStage { sid });
        out.push(Instruction::TmaTensor {
            smem: super::smem_stage(sid),
            gmem: layout.addr(tensor, blk.batch, head, tile * tile_rows),
            map: layout.map_id(tensor, rows),
            sid,
        });
    }
    Ok(out)
}

fn translate_consumer(
    w: &Fa3Workload,
    layout: &TensorLayout,
    blk: &BlockDesc,
    consumer: usize,
    sid_q: u32,
    stream: &Stream,
) -> Result<Vec<Instruction>, EventLogError> {
    let role = role_of_warpgroup(1 + consumer as u32);
    let block = blk.block_id;
    let paired = w.consumers == 2;
    let pingpong = paired && w.schedule == Schedule::PingPong;
    let serialized = paired && !pingpong;
    let (own, peer) = serial_barriers(consumer);
    let bubbles = bubble_cycles(w.t_m, w.t_n, w.d);

    let mut out = Vec::new();
    if serialized && consumer == 1 {
        out.push(Instruction::BarArrive { bid: peer });
    }
    out.push(Instruction::MbWait { sid: sid_q });
    out.push(Instruction::ReleaseStage { sid: sid_q });
    let (mut sid_k, mut sid_v, mut j) = (0u32, 0u32, 0u64);
    for (index, e) in stream.events.iter().enumerate() {
        let tile = u64::from(e.payload);
        if tile >= w.kv_tiles() {
            return Err(EventLogError::TileRange { block, role, index, tile: e.payload });
        }
        let gid_pv = (2 * j + 1) as u32;
        match EventId::from_u16(e.event_id) {
            Some(EventId::WaitKStart) => {
                sid_k = u32::from(e.stage);
                j = tile;
                if serialized {
                    out.push(Instruction::BarWait { bid: own, count: 1 });
                }
                out.push(Instruction::MbWait { sid: sid_k });
            }
            Some(EventId::GemmQkIssue) => {
                j = tile;
                if pingpong {
                    out.push(if consumer == 0 {
                        Instruction::BarArrive { bid: PINGPONG_QK }
                    } else {
                        Instruction::BarWait { bid: PINGPONG_QK, count: 1 }
                    });
                }
                qk_group(w, j, sid_k, &mut out);
            }
            Some(EventId::WaitVStart) => {
                sid_v = u32::from(e.stage);
                out.push(Instruction::MbWait { sid: sid_v });
            }
            Some(EventId::GemmPvIssue) => {
                j = tile;
                pv_group(w, j, sid_v, &mut out);
            }
            Some(EventId::WaitWg1) => {
                // The QK group is done: its K stage can go back to the producer.
                out.push(Instruction::WgmmaWait { gid: gid_pv, max_outstanding: 1 });
                out.push(Instruction::ReleaseStage { sid: sid_k });
                if pingpong {
                    out.push(if consumer == 0 {
                        Instruction::BarWait { bid: PINGPONG_SOFTMAX, count: 1 }
                    } else {
                        Instruction::BarArrive { bid: PINGPONG_SOFTMAX }
                    });
                }
                out.push(Instruction::Bubbles { cycles: bubbles });
            }
            Some(EventId::WaitWg0) => {
                out.push(Instruction::WgmmaWait { gid: gid_pv, max_outstanding: 0 });
                out.push(Instruction::ReleaseStage { sid: sid_v });
                if serialized {
                    out.push(Instruction::BarArrive { bid: peer });
                }
            }
            _ => return Err(EventLogError::Unexpected { block, role, index, id: e.event_id }),
        }
    }
    if !stream.truncated {
        store_output(w, layout, blk, consumer, &mut out);
    }
    Ok(out)
}

/// Rebuilds a trace program from an event log, reconstructing global
/// addresses from tile indices and the workload's tensor layout.
pub fn translate_event_log(log: &EventLog, w: &Fa3Workload) -> Result<Translation, EventLogError> {
    let expected = (1 + w.consumers) * WARPS_PER_WARPGROUP;
    if log.num_warps != expected {
        return Err(EventLogError::WarpCount { got: log.num_warps, expected, consumers: w.consumers });
    }
    let layout = TensorLayout::new(w);
    let num_blocks = log.buffers.len() / log.num_warps as usize;
    let mut warnings = Vec::new();
    let mut blocks = Vec::with_capacity(num_blocks);
    for block in 0..num_blocks as u32 {
        let blk = block_desc(w, block);
        let mut programs = Vec::new();
        let producer = dedup_warpgroup(log, block, 0)?;
        let sid_q = producer
            .events
            .iter()
            .find(|e| e.event_id == EventId::TmaQIssue as u16)
            .map(|e| u32::from(e.stage))
            .ok_or(EventLogError::NoQLoad { block })?;
        let mut streams = vec![(Role::Producer, producer)];
        for c in 0..w.consumers {
            streams.push((role_of_warpgroup(1 + c), dedup_warpgroup(log, block, 1 + c)?));
        }
        for (idx, (role, stream)) in streams.iter().enumerate() {
            if stream.truncated {
                warnings.push(format!(
                    "block {block} {role}: event buffer overflowed after {} events; trace is truncated",
                    stream.events.len()
                ));
            }
            let instructions = match role {
                Role::Producer => translate_producer(w, &layout, &blk, stream)?,
                _ => translate_consumer(w, &layout, &blk, idx - 1, sid_q, stream)?,
            };
            programs.push(WarpGroupProgram { block_id: block, role: *role, instructions });
        }
        blocks.push(ThreadBlock { block_id: block, programs });
    }
    Ok(Translation { program: TraceProgram { stages: w.stages, tensor_maps: layout.descriptors(), blocks }, warnings })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entry_codec() {
        let e = EventLogEntry { timestamp: 0x0102_0304_0506_0708, event_id: 5, stage: 2, payload: 0xBEEF };
        let bytes = e.encode();
        assert_eq!(bytes.len(), 16);
        assert_eq!(&bytes[..8], &[8, 7, 6, 5, 4, 3, 2, 1]);
        assert_eq!(&bytes[8..], &[5, 0, 2, 0, 0xEF, 0xBE, 0, 0]);
        assert_eq!(EventLogEntry::decode(&bytes), e);
    }

    #[test]
    fn bytes_round_trip() {
        let w = Fa3Workload::new(1, 128, 300, 1, 2, 64);
        let log = emit_event_log(&w).unwrap();
        let bytes = log.to_bytes();
        assert_eq!(bytes.len(), HEADER_BYTES + log.buffers.len() * log.buffer_len as usize * ENTRY_BYTES);
        let back = EventLog::from_bytes(&bytes).unwrap();
        assert_eq!(back.num_warps, 12);
        assert_eq!(translate_event_log(&back, &w).unwrap().program, super::super::gen_fa3_trace(&w));
    }

    #[test]
    fn malformed_logs() {
        assert!(matches!(EventLog::from_bytes(&[0; 4]), Err(EventLogError::MissingHeader { .. })));
        let mut bytes = emit_event_log(&Fa3Workload::new(1, 64, 64, 1, 1, 64)).unwrap().to_bytes();
        bytes.pop();
        assert!(matches!(EventLog::from_bytes(&bytes), Err(EventLogError::Truncated { .. })));
    }
}
