use std::collections::{HashMap, HashSet};

use super::{
    Dtype, Instruction, Opcode, Role, TensorMapDescriptor, TensorMapError, ThreadBlock,
    TraceProgram, WarpGroupProgram, Wgmma, WgmmaMode, DEFAULT_STAGES,
};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("line {line}: {kind}")]
pub struct ParseError {
    /// 1-based line number.
    pub line: usize,
    pub kind: ParseErrorKind,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ParseErrorKind {
    #[error("unknown opcode `{0}`")]
    UnknownOpcode(String),
    #[error("{opcode} takes {expected} operands, found {found}")]
    Arity { opcode: &'static str, expected: usize, found: usize },
    #[error("invalid number `{0}`")]
    Number(String),
    #[error("invalid {what} `{token}`")]
    Token { what: &'static str, token: String },
    #[error("instruction before any THREAD header")]
    OutsideThread,
    #[error("block {block} already has a {role} WarpGroup")]
    DuplicateRole { block: u32, role: Role },
    #[error("tensor map {0} declared twice")]
    DuplicateMap(u32),
    #[error("tensor map {0}: {1}")]
    BadMap(u32, TensorMapError),
    #[error("unresolved tensor map {0}")]
    UnresolvedMap(u32),
    #[error("{opcode} {gid} without a preceding open group with that id")]
    EmptyCommit { opcode: &'static str, gid: u32 },
    #[error("{opcode} {gid} waits on no committed group with id <= {gid}")]
    DanglingWait { opcode: &'static str, gid: u32 },
    #[error("STAGES must be positive and appear before any THREAD")]
    Stages,
}

fn err(line: usize, kind: ParseErrorKind) -> ParseError {
    ParseError { line, kind }
}

fn number(line: usize, tok: &str) -> Result<u64, ParseError> {
    let parsed = match tok.strip_prefix("0x").or_else(|| tok.strip_prefix("0X")) {
        Some(hex) => u64::from_str_radix(hex, 16),
        None => tok.parse::<u64>(),
    };
    parsed.map_err(|_| err(line, ParseErrorKind::Number(tok.to_string())))
}

fn small(line: usize, tok: &str) -> Result<u32, ParseError> {
    let v = number(line, tok)?;
    u32::try_from(v).map_err(|_| err(line, ParseErrorKind::Number(tok.to_string())))
}

fn flag(line: usize, tok: &str, what: &'static str) -> Result<bool, ParseError> {
    match tok {
        "0" => Ok(false),
        "1" => Ok(true),
        _ => Err(err(line, ParseErrorKind::Token { what, token: tok.to_string() })),
    }
}

fn expect_arity(line: usize, op: Opcode, ops: &[&str], n: usize) -> Result<(), ParseError> {
    if ops.len() == n {
        Ok(())
    } else {
        Err(err(line, ParseErrorKind::Arity { opcode: op.mnemonic(), expected: n, found: ops.len() }))
    }
}

fn parse_tmap(line: usize, ops: &[&str]) -> Result<TensorMapDescriptor, ParseError> {
    let arity = |expected| {
        err(line, ParseErrorKind::Arity { opcode: "DEF_TMAP", expected, found: ops.len() })
    };
    if ops.len() < 2 {
        return Err(arity(2));
    }
    let map_id = small(line, ops[0])?;
    let rank = number(line, ops[1])? as usize;
    // base_addr is optional and defaults to zero.
    let fixed = 2 + 3 * rank + 1;
    if ops.len() != fixed && ops.len() != fixed + 1 {
        return Err(arity(fixed + 1));
    }
    let list = |from: usize| -> Result<Vec<u64>, ParseError> {
        ops[from..from + rank].iter().map(|t| number(line, t)).collect()
    };
    let desc = TensorMapDescriptor {
        map_id,
        dims: list(2)?,
        strides: list(2 + rank)?,
        box_dims: list(2 + 2 * rank)?,
        elem_size: small(line, ops[2 + 3 * rank])?,
        base_addr: if ops.len() == fixed + 1 { number(line, ops[fixed])? } else { 0 },
    };
    desc.check().map_err(|e| err(line, ParseErrorKind::BadMap(map_id, e)))?;
    Ok(desc)
}

fn parse_instruction(line: usize, op: Opcode, ops: &[&str]) -> Result<Instruction, ParseError> {
    use Instruction as I;
    let arity = |n| expect_arity(line, op, ops, n);
    let inst = match op {
        Opcode::DefTmap => unreachable!("handled at trace level"),
        Opcode::TmaTensor => {
            arity(4)?;
            I::TmaTensor {
                smem: number(line, ops[0])?,
                gmem: number(line, ops[1])?,
                map: small(line, ops[2])?,
                sid: small(line, ops[3])?,
            }
        }
        Opcode::MbWait => {
            arity(1)?;
            I::MbWait { sid: small(line, ops[0])? }
        }
        Opcode::AcquireStage => {
            arity(1)?;
            I::AcquireStage { sid: small(line, ops[0])? }
        }
        Opcode::ReleaseStage => {
            arity(1)?;
            I::ReleaseStage { sid: small(line, ops[0])? }
        }
        Opcode::TmaStore => {
            arity(4)?;
            I::TmaStore {
                smem: number(line, ops[0])?,
                gmem: number(line, ops[1])?,
                map: small(line, ops[2])?,
                gid: small(line, ops[3])?,
            }
        }
        Opcode::TmaCommit => {
            arity(1)?;
            I::TmaCommit { gid: small(line, ops[0])? }
        }
        Opcode::TmaWait => {
            arity(2)?;
            I::TmaWait { gid: small(line, ops[0])?, max_outstanding: small(line, ops[1])? }
        }
        Opcode::Wgmma => {
            arity(11)?;
            let dtype = Dtype::from_keyword(ops[6]).ok_or_else(|| {
                err(line, ParseErrorKind::Token { what: "dtype", token: ops[6].to_string() })
            })?;
            let mode = match ops[8] {
                "SS" => WgmmaMode::Ss,
                "RS" => WgmmaMode::Rs,
                other => {
                    return Err(err(
                        line,
                        ParseErrorKind::Token { what: "WGMMA mode", token: other.to_string() },
                    ))
                }
            };
            I::Wgmma(Wgmma {
                d: number(line, ops[0])?,
                a: number(line, ops[1])?,
                b: number(line, ops[2])?,
                m: small(line, ops[3])?,
                n: small(line, ops[4])?,
                k: small(line, ops[5])?,
                dtype,
                acc: flag(line, ops[7], "accumulate flag")?,
                mode,
                sparse: flag(line, ops[9], "sparsity flag")?,
                gid: small(line, ops[10])?,
            })
        }
        Opcode::WgmmaCommit => {
            arity(1)?;
            I::WgmmaCommit { gid: small(line, ops[0])? }
        }
        Opcode::WgmmaWait => {
            arity(2)?;
            I::WgmmaWait { gid: small(line, ops[0])?, max_outstanding: small(line, ops[1])? }
        }
        Opcode::BarArrive => {
            arity(1)?;
            I::BarArrive { bid: small(line, ops[0])? }
        }
        Opcode::BarWait => {
            arity(2)?;
            I::BarWait { bid: small(line, ops[0])?, count: small(line, ops[1])? }
        }
        Opcode::Bubbles => {
            arity(1)?;
            I::Bubbles { cycles: number(line, ops[0])? }
        }
    };
    Ok(inst)
}

/// Group bookkeeping used to reject empty commits and dangling waits.
#[derive(Default)]
struct GroupTrack {
    open: HashSet<u32>,
    min_committed: Option<u32>,
}

impl GroupTrack {
    fn add(&mut self, gid: u32) {
        self.open.insert(gid);
    }

    fn commit(&mut self, gid: u32) -> bool {
        if !self.open.remove(&gid) {
            return false;
        }
        self.min_committed = Some(self.min_committed.map_or(gid, |m| m.min(gid)));
        true
    }

    fn can_wait(&self, gid: u32) -> bool {
        self.min_committed.is_some_and(|m| m <= gid)
    }
}

#[derive(Default)]
struct ThreadTrack {
    wgmma: GroupTrack,
    tma: GroupTrack,
}

/// Parses trace text into a [`TraceProgram`], resolving tensor-map
/// references and rejecting empty commits and dangling waits.
///
/// Protocol-level checks (stage ranges, producer/consumer matching,
/// tile bounds) are left to [`super::validate_program`].
pub fn parse_trace(text: &str) -> Result<TraceProgram, ParseError> {
    let mut stages = None;
    let mut maps: Vec<TensorMapDescriptor> = Vec::new();
    let mut blocks: Vec<ThreadBlock> = Vec::new();
    let mut block_index: HashMap<u32, usize> = HashMap::new();
    // (block slot, program slot) of the section being filled.
    let mut current: Option<(usize, usize)> = None;
    let mut track = ThreadTrack::default();
    let mut map_refs: Vec<(usize, u32)> = Vec::new();

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("");
        let mut toks = content.split_whitespace();
        let Some(head) = toks.next() else { continue };
        let ops: Vec<&str> = toks.collect();

        match head {
            "STAGES" => {
                if ops.len() != 1 {
                    return Err(err(
                        line,
                        ParseErrorKind::Arity { opcode: "STAGES", expected: 1, found: ops.len() },
                    ));
                }
                let depth = small(line, ops[0])?;
                if depth == 0 || stages.is_some() || !blocks.is_empty() {
                    return Err(err(line, ParseErrorKind::Stages));
                }
                stages = Some(depth);
            }
            "THREAD" => {
                if ops.len() != 2 {
                    return Err(err(
                        line,
                        ParseErrorKind::Arity { opcode: "THREAD", expected: 2, found: ops.len() },
                    ));
                }
                let block_id = small(line, ops[0])?;
                let role = Role::from_keyword(ops[1]).ok_or_else(|| {
                    err(line, ParseErrorKind::Token { what: "role", token: ops[1].to_string() })
                })?;
                let b = *block_index.entry(block_id).or_insert_with(|| {
                    blocks.push(ThreadBlock { block_id, programs: Vec::new() });
                    blocks.len() - 1
                });
                if blocks[b].program(role).is_some() {
                    return Err(err(line, ParseErrorKind::DuplicateRole { block: block_id, role }));
                }
                blocks[b].programs.push(WarpGroupProgram::new(block_id, role));
                current = Some((b, blocks[b].programs.len() - 1));
                track = ThreadTrack::default();
            }
            _ => {
                let op = Opcode::from_mnemonic(head)
                    .ok_or_else(|| err(line, ParseErrorKind::UnknownOpcode(head.to_string())))?;
                if op == Opcode::DefTmap {
                    let desc = parse_tmap(line, &ops)?;
                    if maps.iter().any(|m| m.map_id == desc.map_id) {
                        return Err(err(line, ParseErrorKind::DuplicateMap(desc.map_id)));
                    }
                    maps.push(desc);
                    continue;
                }
                let inst = parse_instruction(line, op, &ops)?;
                let (b, p) = current.ok_or_else(|| err(line, ParseErrorKind::OutsideThread))?;
                match inst {
                    Instruction::TmaTensor { map, .. } => map_refs.push((line, map)),
                    Instruction::TmaStore { map, gid, .. } => {
                        map_refs.push((line, map));
                        track.tma.add(gid);
                    }
                    Instruction::Wgmma(w) => track.wgmma.add(w.gid),
                    Instruction::WgmmaCommit { gid } => {
                        if !track.wgmma.commit(gid) {
                            return Err(err(line, ParseErrorKind::EmptyCommit { opcode: "WGMMA_COMMIT", gid }));
                        }
                    }
                    Instruction::TmaCommit { gid } => {
                        if !track.tma.commit(gid) {
                            return Err(err(line, ParseErrorKind::EmptyCommit { opcode: "TMA_COMMIT", gid }));
                        }
                    }
                    Instruction::WgmmaWait { gid, .. } => {
                        if !track.wgmma.can_wait(gid) {
                            return Err(err(line, ParseErrorKind::DanglingWait { opcode: "WGMMA_WAIT", gid }));
                        }
                    }
                    Instruction::TmaWait { gid, .. }
                        if !track.tma.can_wait(gid) => {
                            return Err(err(line, ParseErrorKind::DanglingWait { opcode: "TMA_WAIT", gid }));
                        }
                    _ => {}
                }
                blocks[b].programs[p].instructions.push(inst);
            }
        }
    }

    for (line, map) in map_refs {
        if !maps.iter().any(|m| m.map_id == map) {
            return Err(err(line, ParseErrorKind::UnresolvedMap(map)));
        }
    }
    for block in &mut blocks {
        block.programs.sort_by_key(|p| p.role);
    }
    Ok(TraceProgram { stages: stages.unwrap_or(DEFAULT_STAGES), tensor_maps: maps, blocks })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_program() {
        let text = "DEF_TMAP 0 2 512 128 2 256 64 128 2\nTHREAD 0 PRODUCER\nTMA_TENSOR 0x0 0x10000 0 0\n";
        let p = parse_trace(text).unwrap();
        assert_eq!(p.tensor_maps.len(), 1);
        assert_eq!(p.tensor_maps[0].base_addr, 0);
        assert_eq!(p.blocks.len(), 1);
        let prod = p.blocks[0].program(Role::Producer).unwrap();
        assert_eq!(
            prod.instructions,
            vec![Instruction::TmaTensor { smem: 0, gmem: 0x10000, map: 0, sid: 0 }]
        );
        assert_eq!(p.stages, DEFAULT_STAGES);
    }

    #[test]
    fn dangling_wgmma_wait() {
        let text = "THREAD 0 CONSUMER1\nWGMMA 0 0 0 64 64 16 F16 1 SS 0 4\nWGMMA_COMMIT 4\nWGMMA_WAIT 3 0\n";
        let e = parse_trace(text).unwrap_err();
        assert_eq!(e.line, 4);
        assert!(matches!(e.kind, ParseErrorKind::DanglingWait { gid: 3, .. }));
    }

    #[test]
    fn commit_without_wgmma() {
        let e = parse_trace("THREAD 0 CONSUMER1\nWGMMA_COMMIT 0\n").unwrap_err();
        assert!(matches!(e.kind, ParseErrorKind::EmptyCommit { .. }));
    }

    #[test]
    fn unresolved_map() {
        let e = parse_trace("THREAD 0 PRODUCER\nTMA_TENSOR 0 0 7 0\n").unwrap_err();
        assert_eq!(e, ParseError { line: 2, kind: ParseErrorKind::UnresolvedMap(7) });
    }

    #[test]
    fn arity_and_unknown_opcode() {
        let e = parse_trace("THREAD 0 PRODUCER\nMB_WAIT 1 2\n").unwrap_err();
        assert!(matches!(e.kind, ParseErrorKind::Arity { expected: 1, found: 2, .. }));
        let e = parse_trace("THREAD 0 PRODUCER\nNOP\n").unwrap_err();
        assert_eq!(e.kind, ParseErrorKind::UnknownOpcode("NOP".into()));
    }

    #[test]
    fn syntax_errors_carry_line_numbers() {
        let e = parse_trace("# header\n\nTHREAD 0 PRODUCER\nBUBBLES 12x\n").unwrap_err();
        assert_eq!(e.line, 4);
        assert!(matches!(e.kind, ParseErrorKind::Number(_)));
        let e = parse_trace("MB_WAIT 0\n").unwrap_err();
        assert_eq!(e.kind, ParseErrorKind::OutsideThread);
        let e = parse_trace("THREAD 0 PRODUCER\nTHREAD 0 PRODUCER\n").unwrap_err();
        assert!(matches!(e.kind, ParseErrorKind::DuplicateRole { .. }));
        let e = parse_trace("THREAD 0 CONSUMER1\nWGMMA 0 0 0 64 64 16 F16 1 XS 0 0\n").unwrap_err();
        assert!(matches!(e.kind, ParseErrorKind::Token { what: "WGMMA mode", .. }));
    }

    #[test]
    fn every_opcode_parses() {
        let text = "\
STAGES 2
DEF_TMAP 3 1 4096 2 64 2 0x1000
THREAD 5 PRODUCER
ACQUIRE_STAGE 1
TMA_TENSOR 0x100 0x1000 3 1
THREAD 5 CONSUMER2
MB_WAIT 1
RELEASE_STAGE 1
WGMMA 0 0 0 64 176 16 f16 0 RS 0 9
WGMMA_COMMIT 9
WGMMA_WAIT 9 0
BAR_ARRIVE 2
BAR_WAIT 3 1
BUBBLES 988
TMA_STORE 0x100 0x1000 3 0
TMA_COMMIT 0
TMA_WAIT 0 0
";
        let p = parse_trace(text).unwrap();
        assert_eq!(p.stages, 2);
        assert_eq!(p.tensor_maps[0].base_addr, 0x1000);
        let mut seen: HashSet<Opcode> = p
            .blocks
            .iter()
            .flat_map(|b| &b.programs)
            .flat_map(|w| &w.instructions)
            .map(|i| i.opcode())
            .collect();
        seen.insert(Opcode::DefTmap);
        assert_eq!(seen.len(), Opcode::ALL.len());
    }

    #[test]
    fn stages_after_thread_is_rejected() {
        let e = parse_trace("THREAD 0 PRODUCER\nSTAGES 2\n").unwrap_err();
        assert_eq!(e.kind, ParseErrorKind::Stages);
    }

    #[test]
    fn bad_descriptor_rejected() {
        // innermost stride must equal element size
        let e = parse_trace("DEF_TMAP 0 1 64 4 64 2\n").unwrap_err();
        assert!(matches!(e.kind, ParseErrorKind::BadMap(0, TensorMapError::InnerStride { .. })));
    }
}
