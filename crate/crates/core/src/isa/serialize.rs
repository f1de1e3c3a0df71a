use std::fmt::Write;

use super::{Instruction, TraceProgram, WgmmaMode};

fn join(values: &[u64]) -> String {
    values.iter().map(u64::to_string).collect::<Vec<_>>().join(" ")
}

fn write_instruction(out: &mut String, inst: &Instruction) {
    let mnemonic = inst.opcode().mnemonic();
    // Writing into a String cannot fail.
    let _ = match *inst {
        Instruction::TmaTensor { smem, gmem, map, sid } => {
            writeln!(out, "{mnemonic} {smem:#x} {gmem:#x} {map} {sid}")
        }
        Instruction::MbWait { sid }
        | Instruction::AcquireStage { sid }
        | Instruction::ReleaseStage { sid } => writeln!(out, "{mnemonic} {sid}"),
        Instruction::TmaStore { smem, gmem, map, gid } => {
            writeln!(out, "{mnemonic} {smem:#x} {gmem:#x} {map} {gid}")
        }
        Instruction::TmaCommit { gid } | Instruction::WgmmaCommit { gid } => {
            writeln!(out, "{mnemonic} {gid}")
        }
        Instruction::TmaWait { gid, max_outstanding }
        | Instruction::WgmmaWait { gid, max_outstanding } => {
            writeln!(out, "{mnemonic} {gid} {max_outstanding}")
        }
        Instruction::Wgmma(w) => {
            let mode = match w.mode {
                WgmmaMode::Ss => "SS",
                WgmmaMode::Rs => "RS",
            };
            writeln!(
                out,
                "{mnemonic} {:#x} {:#x} {:#x} {} {} {} {} {} {mode} {} {}",
                w.d,
                w.a,
                w.b,
                w.m,
                w.n,
                w.k,
                w.dtype.keyword(),
                u8::from(w.acc),
                u8::from(w.sparse),
                w.gid
            )
        }
        Instruction::BarArrive { bid } => writeln!(out, "{mnemonic} {bid}"),
        Instruction::BarWait { bid, count } => writeln!(out, "{mnemonic} {bid} {count}"),
        Instruction::Bubbles { cycles } => writeln!(out, "{mnemonic} {cycles}"),
    };
}

/// One instruction in trace syntax, without the newline.
impl std::fmt::Display for Instruction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mut line = String::new();
        write_instruction(&mut line, self);
        f.write_str(line.trim_end())
    }
}

/// Renders a program in the line-oriented trace format. Output is
/// byte-stable: the same program always serializes identically.
pub fn serialize_trace(program: &TraceProgram) -> String {
    let mut out = String::new();
    out.push_str("# fa3sim trace\n");
    let _ = writeln!(out, "STAGES {}", program.stages);
    for m in &program.tensor_maps {
        let _ = writeln!(
            out,
            "DEF_TMAP {} {} {} {} {} {} {:#x}",
            m.map_id,
            m.rank(),
            join(&m.dims),
            join(&m.strides),
            join(&m.box_dims),
            m.elem_size,
            m.base_addr
        );
    }
    for block in &program.blocks {
        for wg in &block.programs {
            let _ = writeln!(out, "THREAD {} {}", block.block_id, wg.role.keyword());
            for inst in &wg.instructions {
                write_instruction(&mut out, inst);
            }
        }
    }
    out
}
