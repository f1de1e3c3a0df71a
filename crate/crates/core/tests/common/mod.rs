//! Oracles and hand-built traces shared by the integration tests.
#![allow(dead_code)]

use fa3sim::analytical::{HardwareParams, WorkloadParams};
use fa3sim::config::SimConfig;
use fa3sim::isa::{Instruction, Role, TensorMapDescriptor, ThreadBlock, TraceProgram, WarpGroupProgram};
use fa3sim::mem::MemorySystem;
use fa3sim::tracegen::Fa3Workload;

/// Grouped-query shape used by the sim-vs-model checks: 32 blocks.
pub fn small_gqa() -> Fa3Workload {
    Fa3Workload::new(1, 512, 512, 2, 2, 128)
}

/// Traffic totals computed by walking every block and every wave.
#[derive(Debug, PartialEq, Eq)]
pub struct Enumerated {
    pub l2: u128,
    pub dram_ideal: u128,
    pub dram_real: u128,
}

/// Walks the grid block by block. Each block reads its Q rows, writes its
/// O rows and streams all of K and V through L2. DRAM sees each tensor
/// once when K/V stay resident, or K/V once per wave of concurrently
/// resident blocks of the same KV head otherwise.
pub fn enumerate_traffic(w: &WorkloadParams, hw: &HardwareParams) -> Enumerated {
    let (p, d) = (w.p as u128, w.d as u128);
    let row_bytes = p * d;
    let q_tiles = w.l.div_ceil(w.t_m);
    let slots = (hw.n_sm * hw.o_limit) as u128;
    let mut l2 = 0u128;
    let mut q_o = 0u128;
    let mut kv_real = 0u128;
    for _batch in 0..w.b {
        for _kv_head in 0..w.h_kv {
            let mut blocks_in_group = 0u128;
            for _g in 0..w.g {
                for qt in 0..q_tiles {
                    let rows = (w.t_m.min(w.l - qt * w.t_m)) as u128;
                    l2 += row_bytes * (2 * rows + 2 * w.s as u128);
                    q_o += row_bytes * 2 * rows;
                    blocks_in_group += 1;
                }
            }
            let mut waves = 0u128;
            let mut scheduled = 0u128;
            while scheduled < blocks_in_group {
                scheduled += slots;
                waves += 1;
            }
            kv_real += waves.max(1) * 2 * w.s as u128 * row_bytes;
        }
    }
    let kv_once = w.b as u128 * w.h_kv as u128 * 2 * w.s as u128 * row_bytes;
    Enumerated { l2, dram_ideal: q_o + kv_once, dram_real: q_o + kv_real }
}

/// A line address at or above `from` whose home slice is in partition 0.
pub fn near_line(cfg: &SimConfig, from: u64) -> u64 {
    let mem = MemorySystem::new(cfg);
    let per = cfg.l2_slices / cfg.l2_partitions;
    (from / cfg.line_size..).map(|l| l * cfg.line_size).find(|&a| mem.home_slice(a) < per).unwrap()
}

/// One-line 1D tensor map at `addr`.
pub fn line_map(map_id: u32, addr: u64, line: u64) -> TensorMapDescriptor {
    TensorMapDescriptor { map_id, dims: vec![line / 2], strides: vec![2], box_dims: vec![line / 2], elem_size: 2, base_addr: addr }
}

fn load(sid: u32, gmem: u64, map: u32) -> [Instruction; 2] {
    [Instruction::AcquireStage { sid }, Instruction::TmaTensor { smem: 0, gmem, map, sid }]
}

/// Loads one line twice: the first load warms L2, the producer then waits
/// for the consumer to see it before issuing the second, timed load. The
/// consumer marks its wake-up with a one-cycle bubble.
pub fn latency_probe(cfg: &SimConfig) -> TraceProgram {
    let addr = near_line(cfg, 0x10000);
    let mut producer = Vec::new();
    producer.extend(load(0, addr, 0));
    producer.push(Instruction::BarWait { bid: 0, count: 1 });
    producer.extend(load(1, addr, 0));
    let consumer = vec![
        Instruction::MbWait { sid: 0 },
        Instruction::ReleaseStage { sid: 0 },
        Instruction::BarArrive { bid: 0 },
        Instruction::MbWait { sid: 1 },
        Instruction::Bubbles { cycles: 1 },
        Instruction::ReleaseStage { sid: 1 },
    ];
    TraceProgram {
        stages: 2,
        tensor_maps: vec![line_map(0, addr, cfg.line_size)],
        blocks: vec![ThreadBlock {
            block_id: 0,
            programs: vec![
                WarpGroupProgram { block_id: 0, role: Role::Producer, instructions: producer },
                WarpGroupProgram { block_id: 0, role: Role::Consumer1, instructions: consumer },
            ],
        }],
    }
}

/// `blocks` blocks, each loading `lines` distinct 128-byte lines with a
/// single 2D TMA load.
pub fn burst(blocks: u32, lines: u64) -> TraceProgram {
    let base = 0x100000;
    let map = TensorMapDescriptor {
        map_id: 0,
        dims: vec![64, lines * u64::from(blocks)],
        strides: vec![2, 128],
        box_dims: vec![64, lines],
        elem_size: 2,
        base_addr: base,
    };
    let blocks = (0..blocks)
        .map(|b| ThreadBlock {
            block_id: b,
            programs: vec![
                WarpGroupProgram {
                    block_id: b,
                    role: Role::Producer,
                    instructions: load(0, base + u64::from(b) * lines * 128, 0).to_vec(),
                },
                WarpGroupProgram {
                    block_id: b,
                    role: Role::Consumer1,
                    instructions: vec![Instruction::MbWait { sid: 0 }, Instruction::ReleaseStage { sid: 0 }],
                },
            ],
        })
        .collect();
    TraceProgram { stages: 1, tensor_maps: vec![map], blocks }
}

/// One L2 slice so every miss competes for the same MSHR file. Its single
/// DRAM channel gets the bandwidth of all 80 so the MSHRs, not DRAM, bound
/// the miss rate.
pub fn single_slice(mshr: u32) -> SimConfig {
    SimConfig {
        l2_slices: 1,
        l2_partitions: 1,
        llc_mshr_per_slice: mshr,
        l2_total_bytes: 4 << 20,
        dram_bytes_per_cycle_per_channel: 22 * 80,
        ..SimConfig::default()
    }
}
