//! Abstract WarpGroup-level instruction set, the line-oriented trace format
//! and static validation of trace programs.
//!
//! A trace is a set of thread blocks. Each block holds one producer
//! WarpGroup and one or more consumer WarpGroups; every WarpGroup is a
//! single in-order instruction stream (a "logical thread").

mod parse;
mod serialize;
mod validate;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use parse::{parse_trace, ParseError, ParseErrorKind};
pub use serialize::serialize_trace;
pub use validate::{validate_program, wgmma_shape_supported, Diagnostic, Location, Severity};

/// Default number of K/V ring-buffer stages when a trace has no `STAGES` header.
pub const DEFAULT_STAGES: u32 = 3;

/// Metadata the TMA unit needs to generate addresses for a tile.
///
/// All per-dimension lists are ordered innermost dimension first, so
/// `strides[0]` is the element size.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorMapDescriptor {
    pub map_id: u32,
    /// Element counts per dimension.
    pub dims: Vec<u64>,
    /// Byte strides per dimension.
    pub strides: Vec<u64>,
    /// Tile extents in elements.
    pub box_dims: Vec<u64>,
    pub elem_size: u32,
    pub base_addr: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TensorMapError {
    #[error("rank must be in 1..=5, got {0}")]
    Rank(usize),
    #[error("dims, strides and box must all have length {rank}")]
    Lengths { rank: usize },
    #[error("dimension {dim}: box extent {extent} exceeds tensor extent {size}")]
    BoxTooLarge { dim: usize, extent: u64, size: u64 },
    #[error("innermost stride {stride} must equal element size {elem_size}")]
    InnerStride { stride: u64, elem_size: u32 },
    #[error("dims, strides, box and element size must be positive")]
    NonPositive,
    #[error("tile origin {gmem:#x} lies below tensor base {base:#x}")]
    BelowBase { gmem: u64, base: u64 },
    #[error("tile origin {gmem:#x} is not element-aligned")]
    Misaligned { gmem: u64 },
    #[error("tile at {gmem:#x} leaves the tensor in dimension {dim} (coord {coord} + box {extent} > {size})")]
    OutOfBounds {
        gmem: u64,
        dim: usize,
        coord: u64,
        extent: u64,
        size: u64,
    },
}

impl TensorMapDescriptor {
    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn check(&self) -> Result<(), TensorMapError> {
        let rank = self.dims.len();
        if !(1..=5).contains(&rank) {
            return Err(TensorMapError::Rank(rank));
        }
        if self.strides.len() != rank || self.box_dims.len() != rank {
            return Err(TensorMapError::Lengths { rank });
        }
        if self.elem_size == 0
            || self.dims.iter().chain(&self.strides).chain(&self.box_dims).any(|&v| v == 0)
        {
            return Err(TensorMapError::NonPositive);
        }
        if self.strides[0] != u64::from(self.elem_size) {
            return Err(TensorMapError::InnerStride {
                stride: self.strides[0],
                elem_size: self.elem_size,
            });
        }
        for (dim, (&extent, &size)) in self.box_dims.iter().zip(&self.dims).enumerate() {
            if extent > size {
                return Err(TensorMapError::BoxTooLarge { dim, extent, size });
            }
        }
        Ok(())
    }

    /// Elements in one box.
    pub fn box_elems(&self) -> u64 {
        self.box_dims.iter().product()
    }

    /// Bytes in one box.
    pub fn box_bytes(&self) -> u64 {
        self.box_elems() * u64::from(self.elem_size)
    }

    /// Decomposes a tile origin address into per-dimension element
    /// coordinates and checks that the whole box stays inside the tensor.
    ///
    /// Coordinates are peeled off greedily from the outermost dimension.
    pub fn tile_coords(&self, gmem: u64) -> Result<Vec<u64>, TensorMapError> {
        if gmem < self.base_addr {
            return Err(TensorMapError::BelowBase { gmem, base: self.base_addr });
        }
        let mut offset = gmem - self.base_addr;
        let mut coords = vec![0; self.rank()];
        for dim in (0..self.rank()).rev() {
            coords[dim] = offset / self.strides[dim];
            offset %= self.strides[dim];
        }
        if offset != 0 {
            return Err(TensorMapError::Misaligned { gmem });
        }
        for dim in 0..self.rank() {
            if coords[dim] + self.box_dims[dim] > self.dims[dim] {
                return Err(TensorMapError::OutOfBounds {
                    gmem,
                    dim,
                    coord: coords[dim],
                    extent: self.box_dims[dim],
                    size: self.dims[dim],
                });
            }
        }
        Ok(coords)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Producer,
    Consumer1,
    Consumer2,
}

impl Role {
    pub const ALL: [Role; 3] = [Role::Producer, Role::Consumer1, Role::Consumer2];

    pub fn keyword(self) -> &'static str {
        match self {
            Role::Producer => "PRODUCER",
            Role::Consumer1 => "CONSUMER1",
            Role::Consumer2 => "CONSUMER2",
        }
    }

    pub fn from_keyword(s: &str) -> Option<Role> {
        Role::ALL.into_iter().find(|r| r.keyword() == s)
    }

    pub fn is_consumer(self) -> bool {
        !matches!(self, Role::Producer)
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Role::Producer => "producer",
            Role::Consumer1 => "consumer1",
            Role::Consumer2 => "consumer2",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum WgmmaMode {
    /// Both operands in shared memory.
    Ss,
    /// A from registers, B from shared memory.
    Rs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Dtype {
    F16,
    Bf16,
    Tf32,
    E4m3,
    E5m2,
    S8,
}

impl Dtype {
    pub const ALL: [Dtype; 6] = [Dtype::F16, Dtype::Bf16, Dtype::Tf32, Dtype::E4m3, Dtype::E5m2, Dtype::S8];

    pub fn keyword(self) -> &'static str {
        match self {
            Dtype::F16 => "F16",
            Dtype::Bf16 => "BF16",
            Dtype::Tf32 => "TF32",
            Dtype::E4m3 => "E4M3",
            Dtype::E5m2 => "E5M2",
            Dtype::S8 => "S8",
        }
    }

    pub fn from_keyword(s: &str) -> Option<Dtype> {
        Dtype::ALL.into_iter().find(|d| d.keyword().eq_ignore_ascii_case(s))
    }
}

/// Operands of one `WGMMA`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Wgmma {
    pub d: u64,
    pub a: u64,
    pub b: u64,
    pub m: u32,
    pub n: u32,
    pub k: u32,
    pub dtype: Dtype,
    pub acc: bool,
    pub mode: WgmmaMode,
    pub sparse: bool,
    pub gid: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Opcode {
    DefTmap,
    TmaTensor,
    MbWait,
    AcquireStage,
    ReleaseStage,
    TmaStore,
    TmaCommit,
    TmaWait,
    Wgmma,
    WgmmaCommit,
    WgmmaWait,
    BarArrive,
    BarWait,
    Bubbles,
}

impl Opcode {
    pub const ALL: [Opcode; 14] = [
        Opcode::DefTmap,
        Opcode::TmaTensor,
        Opcode::MbWait,
        Opcode::AcquireStage,
        Opcode::ReleaseStage,
        Opcode::TmaStore,
        Opcode::TmaCommit,
        Opcode::TmaWait,
        Opcode::Wgmma,
        Opcode::WgmmaCommit,
        Opcode::WgmmaWait,
        Opcode::BarArrive,
        Opcode::BarWait,
        Opcode::Bubbles,
    ];

    pub fn mnemonic(self) -> &'static str {
        match self {
            Opcode::DefTmap => "DEF_TMAP",
            Opcode::TmaTensor => "TMA_TENSOR",
            Opcode::MbWait => "MB_WAIT",
            Opcode::AcquireStage => "ACQUIRE_STAGE",
            Opcode::ReleaseStage => "RELEASE_STAGE",
            Opcode::TmaStore => "TMA_STORE",
            Opcode::TmaCommit => "TMA_COMMIT",
            Opcode::TmaWait => "TMA_WAIT",
            Opcode::Wgmma => "WGMMA",
            Opcode::WgmmaCommit => "WGMMA_COMMIT",
            Opcode::WgmmaWait => "WGMMA_WAIT",
            Opcode::BarArrive => "BAR_ARRIVE",
            Opcode::BarWait => "BAR_WAIT",
            Opcode::Bubbles => "BUBBLES",
        }
    }

    pub fn from_mnemonic(s: &str) -> Option<Opcode> {
        Opcode::ALL.into_iter().find(|op| op.mnemonic() == s)
    }
}

/// One instruction of a WarpGroup stream. `DEF_TMAP` is a trace-level
/// declaration and lives in [`TraceProgram::tensor_maps`] instead.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Instruction {
    TmaTensor { smem: u64, gmem: u64, map: u32, sid: u32 },
    MbWait { sid: u32 },
    AcquireStage { sid: u32 },
    ReleaseStage { sid: u32 },
    TmaStore { smem: u64, gmem: u64, map: u32, gid: u32 },
    TmaCommit { gid: u32 },
    TmaWait { gid: u32, max_outstanding: u32 },
    Wgmma(Wgmma),
    WgmmaCommit { gid: u32 },
    WgmmaWait { gid: u32, max_outstanding: u32 },
    BarArrive { bid: u32 },
    BarWait { bid: u32, count: u32 },
    Bubbles { cycles: u64 },
}

impl Instruction {
    pub fn opcode(&self) -> Opcode {
        match self {
            Instruction::TmaTensor { .. } => Opcode::TmaTensor,
            Instruction::MbWait { .. } => Opcode::MbWait,
            Instruction::AcquireStage { .. } => Opcode::AcquireStage,
            Instruction::ReleaseStage { .. } => Opcode::ReleaseStage,
            Instruction::TmaStore { .. } => Opcode::TmaStore,
            Instruction::TmaCommit { .. } => Opcode::TmaCommit,
            Instruction::TmaWait { .. } => Opcode::TmaWait,
            Instruction::Wgmma(_) => Opcode::Wgmma,
            Instruction::WgmmaCommit { .. } => Opcode::WgmmaCommit,
            Instruction::WgmmaWait { .. } => Opcode::WgmmaWait,
            Instruction::BarArrive { .. } => Opcode::BarArrive,
            Instruction::BarWait { .. } => Opcode::BarWait,
            Instruction::Bubbles { .. } => Opcode::Bubbles,
        }
    }

    /// Stage index referenced by ring-buffer instructions.
    pub fn stage(&self) -> Option<u32> {
        match *self {
            Instruction::TmaTensor { sid, .. }
            | Instruction::MbWait { sid }
            | Instruction::AcquireStage { sid }
            | Instruction::ReleaseStage { sid } => Some(sid),
            _ => None,
        }
    }
}

/// A single WarpGroup's instruction stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WarpGroupProgram {
    pub block_id: u32,
    pub role: Role,
    pub instructions: Vec<Instruction>,
}

impl WarpGroupProgram {
    pub fn new(block_id: u32, role: Role) -> Self {
        Self { block_id, role, instructions: Vec::new() }
    }
}

/// All WarpGroups of one CTA, ordered by role.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThreadBlock {
    pub block_id: u32,
    pub programs: Vec<WarpGroupProgram>,
}

impl ThreadBlock {
    pub fn program(&self, role: Role) -> Option<&WarpGroupProgram> {
        self.programs.iter().find(|p| p.role == role)
    }

    pub fn consumers(&self) -> impl Iterator<Item = &WarpGroupProgram> {
        self.programs.iter().filter(|p| p.role.is_consumer())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceProgram {
    /// Ring-buffer depth shared by every block.
    pub stages: u32,
    pub tensor_maps: Vec<TensorMapDescriptor>,
    pub blocks: Vec<ThreadBlock>,
}

impl Default for TraceProgram {
    fn default() -> Self {
        Self { stages: DEFAULT_STAGES, tensor_maps: Vec::new(), blocks: Vec::new() }
    }
}

impl TraceProgram {
    pub fn tensor_map(&self, map_id: u32) -> Option<&TensorMapDescriptor> {
        self.tensor_maps.iter().find(|m| m.map_id == map_id)
    }

    pub fn instruction_count(&self) -> usize {
        self.blocks
            .iter()
            .flat_map(|b| &b.programs)
            .map(|p| p.instructions.len())
            .sum()
    }

    pub fn count_opcode(&self, opcode: Opcode) -> usize {
        self.blocks
            .iter()
            .flat_map(|b| &b.programs)
            .flat_map(|p| &p.instructions)
            .filter(|i| i.opcode() == opcode)
            .count()
    }
}
