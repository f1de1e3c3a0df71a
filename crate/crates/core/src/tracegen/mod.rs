//! Synthetic FlashAttention-3 forward-pass traces: one producer and one or
//! two consumer WarpGroups per (batch, query head, query tile) block.

pub mod eventlog;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::config::{parse_kv, take, take_int, ConfigError};
use crate::isa::{
    Dtype, Instruction, Role, TensorMapDescriptor, ThreadBlock, TraceProgram, WarpGroupProgram, Wgmma, WgmmaMode,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    /// `[batch][seq][head][dim]`
    Bshd,
    /// `[batch][head][seq][dim]`
    Bhsd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    /// Consumers hand the tensor core to each other once their MMAs are
    /// issued, overlapping one consumer's softmax with the other's MMAs.
    PingPong,
    /// A consumer hands over only after finishing its whole tile.
    Serialized,
}

/// Attention shape and kernel tiling.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fa3Workload {
    pub b: u64,
    /// Query sequence length.
    pub l: u64,
    /// Key/value sequence length.
    pub s: u64,
    pub h_kv: u64,
    /// Query heads per KV head.
    pub g: u64,
    pub d: u64,
    pub t_m: u64,
    pub t_n: u64,
    /// Bytes per element.
    pub p: u64,
    pub stages: u32,
    pub consumers: u32,
    pub layout: Layout,
    pub schedule: Schedule,
}

impl Fa3Workload {
    pub fn new(b: u64, l: u64, s: u64, h_kv: u64, g: u64, d: u64) -> Self {
        Self {
            b,
            l,
            s,
            h_kv,
            g,
            d,
            t_m: 64,
            t_n: 176,
            p: 2,
            stages: crate::isa::DEFAULT_STAGES,
            consumers: 2,
            layout: Layout::Bshd,
            schedule: Schedule::PingPong,
        }
    }

    /// Reads `B, L, S, H_KV, G, D` (required) and `T_M, T_N, P, STAGES,
    /// CONSUMERS, LAYOUT, SCHEDULE` (optional) from `key = value` text.
    pub fn from_kv_text(text: &str) -> Result<Self, ConfigError> {
        let mut map = parse_kv(text)?;
        let mut req = |key: &str| take_int(&mut map, key)?.ok_or_else(|| ConfigError::Missing(key.to_string()));
        let mut w = Fa3Workload::new(req("B")?, req("L")?, req("S")?, req("H_KV")?, req("G")?, req("D")?);
        if let Some(v) = take_int(&mut map, "T_M")? {
            w.t_m = v;
        }
        if let Some(v) = take_int(&mut map, "T_N")? {
            w.t_n = v;
        }
        if let Some(v) = take_int(&mut map, "P")? {
            w.p = v;
        }
        if let Some(v) = take::<u32>(&mut map, "STAGES")? {
            w.stages = v;
        }
        if let Some(v) = take::<u32>(&mut map, "CONSUMERS")? {
            w.consumers = v;
        }
        if let Some(v) = map.remove("LAYOUT") {
            w.layout = match v.to_ascii_lowercase().as_str() {
                "bshd" => Layout::Bshd,
                "bhsd" => Layout::Bhsd,
                _ => return Err(ConfigError::Value { key: "LAYOUT".into(), value: v }),
            };
        }
        if let Some(v) = map.remove("SCHEDULE") {
            w.schedule = match v.to_ascii_lowercase().as_str() {
                "pingpong" | "ping-pong" => Schedule::PingPong,
                "serialized" => Schedule::Serialized,
                _ => return Err(ConfigError::Value { key: "SCHEDULE".into(), value: v }),
            };
        }
        if let Some(key) = map.into_keys().next() {
            return Err(ConfigError::UnknownKey(key));
        }
        Ok(w)
    }

    pub fn h_q(&self) -> u64 {
        self.h_kv * self.g
    }

    pub fn q_tiles(&self) -> u64 {
        self.l.div_ceil(self.t_m)
    }

    pub fn kv_tiles(&self) -> u64 {
        self.s.div_ceil(self.t_n)
    }

    pub fn num_blocks(&self) -> u64 {
        self.b * self.h_q() * self.q_tiles()
    }

    /// Checks the shape is one the trace generator can express.
    pub fn check(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        for (name, v) in [("B", self.b), ("L", self.l), ("S", self.s), ("H_KV", self.h_kv), ("G", self.g), ("D", self.d), ("T_M", self.t_m), ("T_N", self.t_n)] {
            if v == 0 {
                return invalid(format!("`{name}` must be positive"));
            }
        }
        if self.p != 2 {
            return invalid(format!("traces are FP16 only (P = 2), got P = {}", self.p));
        }
        if !self.d.is_multiple_of(16) || self.d > 256 {
            return invalid(format!("D = {} must be a multiple of 16 no larger than 256", self.d));
        }
        if !self.t_n.is_multiple_of(8) || self.t_n > 256 {
            return invalid(format!("T_N = {} must be a multiple of 8 no larger than 256", self.t_n));
        }
        if self.stages < 2 {
            return invalid("the K/V ring needs at least 2 stages".into());
        }
        if !(1..=2).contains(&self.consumers) {
            return invalid(format!("CONSUMERS must be 1 or 2, got {}", self.consumers));
        }
        Ok(())
    }
}

/// Softmax and rescale cost of one consumer tile in cycles: rowmax and
/// rowsum at 128 FP32 ops/cycle, exp at 16 MUFU ops/cycle, FP32→FP16 at
/// 256 ops/cycle and the output rescale at 128 ops/cycle.
pub fn bubble_breakdown(t_m: u64, t_n: u64, d: u64) -> [u64; 5] {
    let s = t_m * t_n;
    [s.div_ceil(128), s.div_ceil(16), s.div_ceil(128), s.div_ceil(256), (t_m * d).div_ceil(128)]
}

pub fn bubble_cycles(t_m: u64, t_n: u64, d: u64) -> u64 {
    bubble_breakdown(t_m, t_n, d).iter().sum()
}

/// Coordinates of one thread block in the attention grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockDesc {
    pub block_id: u32,
    pub batch: u64,
    pub q_head: u64,
    pub kv_head: u64,
    pub q_tile: u64,
}

/// One block per (batch, query head, query tile), query tiles fastest.
pub fn grid_blocks(w: &Fa3Workload) -> Vec<BlockDesc> {
    let mut out = Vec::with_capacity(w.num_blocks() as usize);
    for batch in 0..w.b {
        for q_head in 0..w.h_q() {
            for q_tile in 0..w.q_tiles() {
                out.push(BlockDesc { block_id: out.len() as u32, batch, q_head, kv_head: q_head / w.g, q_tile });
            }
        }
    }
    out
}

pub fn block_desc(w: &Fa3Workload, block_id: u32) -> BlockDesc {
    let id = u64::from(block_id);
    let q_tile = id % w.q_tiles();
    let q_head = id / w.q_tiles() % w.h_q();
    let batch = id / w.q_tiles() / w.h_q();
    BlockDesc { block_id, batch, q_head, kv_head: q_head / w.g, q_tile }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Tensor {
    Q,
    K,
    V,
    O,
}

impl fmt::Display for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Tensor::Q => "Q",
            Tensor::K => "K",
            Tensor::V => "V",
            Tensor::O => "O",
        })
    }
}

/// Global-memory placement of Q, K, V and O plus one tensor map per
/// (tensor, tile height) the trace needs.
#[derive(Debug, Clone)]
pub struct TensorLayout {
    w: Fa3Workload,
    bases: BTreeMap<Tensor, u64>,
    maps: BTreeMap<(Tensor, u64), u32>,
}

/// Start of the first tensor; every tensor is 64 KiB aligned.
pub const GMEM_BASE: u64 = 0x10000;
const GMEM_ALIGN: u64 = 0x10000;

const SMEM_STAGE_STRIDE: u64 = 0x10000;
const SMEM_Q: u64 = 0x100000;
const SMEM_O: u64 = 0x200000;
const SMEM_O_STRIDE: u64 = 0x10000;

impl TensorLayout {
    pub fn new(w: &Fa3Workload) -> Self {
        let mut bases = BTreeMap::new();
        let mut next = GMEM_BASE;
        for t in [Tensor::K, Tensor::V, Tensor::Q, Tensor::O] {
            bases.insert(t, next);
            let (heads, seq) = Self::extent(w, t);
            next += (w.b * heads * seq * w.d * w.p).next_multiple_of(GMEM_ALIGN);
        }
        let mut heights: BTreeSet<(Tensor, u64)> = BTreeSet::new();
        for qt in 0..w.q_tiles() {
            let rows = Self::rows(w.l, w.t_m, qt);
            heights.insert((Tensor::Q, rows));
            for part in consumer_rows(rows, w.consumers).into_iter().filter(|&r| r > 0) {
                heights.insert((Tensor::O, part));
            }
        }
        for j in 0..w.kv_tiles() {
            let rows = Self::rows(w.s, w.t_n, j);
            heights.insert((Tensor::K, rows));
            heights.insert((Tensor::V, rows));
        }
        let maps = heights.into_iter().enumerate().map(|(i, key)| (key, i as u32)).collect();
        Self { w: w.clone(), bases, maps }
    }

    fn extent(w: &Fa3Workload, t: Tensor) -> (u64, u64) {
        match t {
            Tensor::Q | Tensor::O => (w.h_q(), w.l),
            Tensor::K | Tensor::V => (w.h_kv, w.s),
        }
    }

    /// Height of tile `idx` when `len` rows are cut into tiles of `tile`.
    pub fn rows(len: u64, tile: u64, idx: u64) -> u64 {
        tile.min(len - idx * tile)
    }

    pub fn base(&self, t: Tensor) -> u64 {
        self.bases[&t]
    }

    /// Byte strides of (row, head, batch).
    fn strides(&self, t: Tensor) -> (u64, u64, u64) {
        let (heads, seq) = Self::extent(&self.w, t);
        let row = self.w.d * self.w.p;
        match self.w.layout {
            Layout::Bshd => (heads * row, row, seq * heads * row),
            Layout::Bhsd => (row, seq * row, heads * seq * row),
        }
    }

    pub fn addr(&self, t: Tensor, batch: u64, head: u64, row: u64) -> u64 {
        let (rs, hs, bs) = self.strides(t);
        self.base(t) + batch * bs + head * hs + row * rs
    }

    pub fn map_id(&self, t: Tensor, rows: u64) -> u32 {
        self.maps[&(t, rows)]
    }

    pub fn descriptors(&self) -> Vec<TensorMapDescriptor> {
        self.maps
            .iter()
            .map(|(&(t, rows), &map_id)| {
                let (heads, seq) = Self::extent(&self.w, t);
                let (rs, hs, bs) = self.strides(t);
                let (d, p) = (self.w.d, self.w.p);
                let (dims, strides, box_dims) = match self.w.layout {
                    Layout::Bshd => (vec![d, heads, seq, self.w.b], vec![p, hs, rs, bs], vec![d, 1, rows, 1]),
                    Layout::Bhsd => (vec![d, seq, heads, self.w.b], vec![p, rs, hs, bs], vec![d, rows, 1, 1]),
                };
                TensorMapDescriptor { map_id, dims, strides, box_dims, elem_size: p as u32, base_addr: self.base(t) }
            })
            .collect()
    }
}

/// Output rows each consumer owns; the first takes the larger half.
fn consumer_rows(rows: u64, consumers: u32) -> Vec<u64> {
    match consumers {
        1 => vec![rows],
        _ => vec![rows - rows / 2, rows / 2],
    }
}

fn consumer_role(idx: usize) -> Role {
    if idx == 0 {
        Role::Consumer1
    } else {
        Role::Consumer2
    }
}

/// Ring stage of the `n`-th load of a block (Q is load 0, then K and V
/// of each tile alternate).
pub fn load_stage(n: u64, stages: u32) -> u32 {
    (n % u64::from(stages)) as u32
}

pub fn k_stage(j: u64, stages: u32) -> u32 {
    load_stage(1 + 2 * j, stages)
}

pub fn v_stage(j: u64, stages: u32) -> u32 {
    load_stage(2 + 2 * j, stages)
}

pub fn smem_stage(sid: u32) -> u64 {
    u64::from(sid) * SMEM_STAGE_STRIDE
}

/// Ping-pong handoff barriers: consumer 1 arrives on `PINGPONG_QK`
/// before its QK MMAs and consumer 2 waits on it before its own; consumer 2
/// arrives on `PINGPONG_SOFTMAX` before softmax and consumer 1 waits on it
/// before its own.
pub const PINGPONG_QK: u32 = 0;
pub const PINGPONG_SOFTMAX: u32 = 1;

/// Serialized mode: consumer `c` waits on barrier `c` before a tile and
/// arrives on the other's after finishing it.
pub fn serial_barriers(consumer: usize) -> (u32, u32) {
    (consumer as u32, 1 - consumer as u32)
}

/// `Q·Kᵀ` for one KV tile: D/16 k-steps of m64 n{T_N} k16, sealed as one group.
pub fn qk_group(w: &Fa3Workload, j: u64, sid_k: u32, out: &mut Vec<Instruction>) {
    let gid = (2 * j) as u32;
    for step in 0..w.d / 16 {
        out.push(Instruction::Wgmma(Wgmma {
            d: 0,
            a: SMEM_Q + step * 32,
            b: smem_stage(sid_k) + step * 32,
            m: 64,
            n: w.t_n as u32,
            k: 16,
            dtype: Dtype::F16,
            acc: step > 0,
            mode: WgmmaMode::Ss,
            sparse: false,
            gid,
        }));
    }
    out.push(Instruction::WgmmaCommit { gid });
}

/// `P·V` for one KV tile: ceil(T_N/16) k-steps of m64 n{D} k16 with P
/// held in registers.
pub fn pv_group(w: &Fa3Workload, j: u64, sid_v: u32, out: &mut Vec<Instruction>) {
    let gid = (2 * j + 1) as u32;
    for step in 0..w.t_n.div_ceil(16) {
        out.push(Instruction::Wgmma(Wgmma {
            d: 1,
            a: 0,
            b: smem_stage(sid_v) + step * 32,
            m: 64,
            n: w.d as u32,
            k: 16,
            dtype: Dtype::F16,
            acc: j > 0 || step > 0,
            mode: WgmmaMode::Rs,
            sparse: false,
            gid,
        }));
    }
    out.push(Instruction::WgmmaCommit { gid });
}

/// Epilogue: each consumer writes its share of the output rows.
pub fn store_output(w: &Fa3Workload, layout: &TensorLayout, blk: &BlockDesc, consumer: usize, out: &mut Vec<Instruction>) {
    let rows = TensorLayout::rows(w.l, w.t_m, blk.q_tile);
    let parts = consumer_rows(rows, w.consumers);
    let mine = parts[consumer];
    if mine == 0 {
        return;
    }
    let first_row = blk.q_tile * w.t_m + parts[..consumer].iter().sum::<u64>();
    out.push(Instruction::TmaStore {
        smem: SMEM_O + consumer as u64 * SMEM_O_STRIDE,
        gmem: layout.addr(Tensor::O, blk.batch, blk.q_head, first_row),
        map: layout.map_id(Tensor::O, mine),
        gid: 0,
    });
    out.push(Instruction::TmaCommit { gid: 0 });
    out.push(Instruction::TmaWait { gid: 0, max_outstanding: 0 });
}

fn producer_program(w: &Fa3Workload, layout: &TensorLayout, blk: &BlockDesc) -> Vec<Instruction> {
    let mut out = Vec::new();
    let sid_q = load_stage(0, w.stages);
    let q_rows = TensorLayout::rows(w.l, w.t_m, blk.q_tile);
    out.push(Instruction::AcquireStage { sid: sid_q });
    out.push(Instruction::TmaTensor {
        smem: smem_stage(sid_q),
        gmem: layout.addr(Tensor::Q, blk.batch, blk.q_head, blk.q_tile * w.t_m),
        map: layout.map_id(Tensor::Q, q_rows),
        sid: sid_q,
    });
    for j in 0..w.kv_tiles() {
        let rows = TensorLayout::rows(w.s, w.t_n, j);
        for (t, sid) in [(Tensor::K, k_stage(j, w.stages)), (Tensor::V, v_stage(j, w.stages))] {
            out.push(Instruction::AcquireStage { sid });
            out.push(Instruction::TmaTensor {
                smem: smem_stage(sid),
                gmem: layout.addr(t, blk.batch, blk.kv_head, j * w.t_n),
                map: layout.map_id(t, rows),
                sid,
            });
        }
    }
    out
}

fn consumer_program(w: &Fa3Workload, layout: &TensorLayout, blk: &BlockDesc, consumer: usize) -> Vec<Instruction> {
    let mut out = Vec::new();
    let paired = w.consumers == 2;
    let pingpong = paired && w.schedule == Schedule::PingPong;
    let serialized = paired && !pingpong;
    let (own, peer) = serial_barriers(consumer);
    if serialized && consumer == 1 {
        // Let the first consumer take the first tile.
        out.push(Instruction::BarArrive { bid: peer });
    }
    let sid_q = load_stage(0, w.stages);
    out.push(Instruction::MbWait { sid: sid_q });
    out.push(Instruction::ReleaseStage { sid: sid_q });
    let bubbles = bubble_cycles(w.t_m, w.t_n, w.d);
    for j in 0..w.kv_tiles() {
        let (sid_k, sid_v) = (k_stage(j, w.stages), v_stage(j, w.stages));
        let gid_pv = (2 * j + 1) as u32;
        if serialized {
            out.push(Instruction::BarWait { bid: own, count: 1 });
        }
        out.push(Instruction::MbWait { sid: sid_k });
        if pingpong {
            out.push(if consumer == 0 {
                Instruction::BarArrive { bid: PINGPONG_QK }
            } else {
                Instruction::BarWait { bid: PINGPONG_QK, count: 1 }
            });
        }
        qk_group(w, j, sid_k, &mut out);
        out.push(Instruction::MbWait { sid: sid_v });
        pv_group(w, j, sid_v, &mut out);
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
        out.push(Instruction::WgmmaWait { gid: gid_pv, max_outstanding: 0 });
        out.push(Instruction::ReleaseStage { sid: sid_v });
        if serialized {
            out.push(Instruction::BarArrive { bid: peer });
        }
    }
    store_output(w, layout, blk, consumer, &mut out);
    out
}

/// Builds the full trace for a workload. The caller should `check()` the
/// workload first.
pub fn gen_fa3_trace(w: &Fa3Workload) -> TraceProgram {
    let layout = TensorLayout::new(w);
    let blocks = grid_blocks(w)
        .iter()
        .map(|blk| {
            let mut programs = vec![WarpGroupProgram {
                block_id: blk.block_id,
                role: Role::Producer,
                instructions: producer_program(w, &layout, blk),
            }];
            for c in 0..w.consumers as usize {
                programs.push(WarpGroupProgram {
                    block_id: blk.block_id,
                    role: consumer_role(c),
                    instructions: consumer_program(w, &layout, blk, c),
                });
            }
            ThreadBlock { block_id: blk.block_id, programs }
        })
        .collect();
    TraceProgram { stages: w.stages, tensor_maps: layout.descriptors(), blocks }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::{validate_program, Opcode};

    #[test]
    fn bubble_budget() {
        assert_eq!(bubble_breakdown(64, 176, 128), [88, 704, 88, 44, 64]);
        assert_eq!(bubble_cycles(64, 176, 128), 988);
        assert_eq!(bubble_cycles(1, 1, 1), 5);
    }

    #[test]
    fn grid_shapes() {
        assert_eq!(grid_blocks(&Fa3Workload::new(1, 64, 64, 1, 1, 64)).len(), 1);
        assert_eq!(grid_blocks(&Fa3Workload::new(1, 512, 512, 8, 4, 128)).len(), 256);
        let w = Fa3Workload::new(1, 65, 64, 1, 1, 64);
        assert_eq!(w.q_tiles(), 2);
        let w = Fa3Workload::new(2, 300, 100, 3, 2, 64);
        for blk in grid_blocks(&w) {
            assert_eq!(block_desc(&w, blk.block_id), blk);
        }
    }

    #[test]
    fn layout_addresses() {
        let mut w = Fa3Workload::new(1, 512, 512, 1, 1, 128);
        w.layout = Layout::Bhsd;
        let lay = TensorLayout::new(&w);
        assert_eq!(lay.base(Tensor::K), 0x10000);
        assert_eq!(lay.addr(Tensor::K, 0, 0, 3 * 176), 0x10000 + 3 * 45056);
        for d in lay.descriptors() {
            d.check().unwrap();
        }
    }

    #[test]
    fn generated_traces_validate() {
        for (l, s, consumers, layout) in [(512, 512, 2, Layout::Bshd), (65, 200, 2, Layout::Bhsd), (130, 17 * 8, 1, Layout::Bshd), (1, 1, 2, Layout::Bshd)] {
            let mut w = Fa3Workload::new(2, l, s, 2, 2, 64);
            w.consumers = consumers;
            w.layout = layout;
            w.check().unwrap();
            let p = gen_fa3_trace(&w);
            assert_eq!(validate_program(&p), vec![], "L={l} S={s}");
            assert_eq!(p.blocks.len() as u64, w.num_blocks());
        }
    }

    #[test]
    fn wgmma_counts() {
        let w = Fa3Workload::new(1, 64, 512, 1, 1, 128);
        let p = gen_fa3_trace(&w);
        let c1 = p.blocks[0].program(Role::Consumer1).unwrap();
        let n = c1.instructions.iter().filter(|i| i.opcode() == Opcode::Wgmma).count() as u64;
        assert_eq!(n, w.kv_tiles() * (128 / 16 + 11));
    }

    #[test]
    fn config_parsing() {
        let w = Fa3Workload::from_kv_text("B=1\nL=512\nS=512\nH_KV=8\nG=4\nD=128\n").unwrap();
        assert_eq!((w.t_m, w.t_n, w.p), (64, 176, 2));
        let err = Fa3Workload::from_kv_text("B=1\nL=512\nH_KV=8\nG=4\nD=128\n").unwrap_err();
        assert_eq!(err, ConfigError::Missing("S".into()));
        assert!(Fa3Workload::from_kv_text("B=1\nL=1\nS=1\nH_KV=1\nG=1\nD=16\nX=1").is_err());
    }
}
