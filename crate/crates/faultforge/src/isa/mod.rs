//! MiniISA: registers, opcodes, instructions, memory regions and programs.
//!
//! Word-addressed memory, sixteen registers (r15 is the pc and is never an
//! operand), NZCV flags written only by compare instructions.

mod asm;
mod cfg;
mod exec;

pub use asm::{assemble, disassemble, AsmError};
pub use cfg::{build_cfg, BasicBlock};
pub use exec::{effective_addr, exec_one, run_with, MachineState, Memory, StepEffect};

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;

/// Register identifier, `r0` through `r15`.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Reg(pub u8);

/// Program counter register; never a valid instruction operand.
pub const PC: Reg = Reg(15);
/// Scratch register used by epilogues and detect handlers; not dumped.
pub const SCRATCH: Reg = Reg(14);
/// Number of registers dumped into the output buffer (r0..r13).
pub const DUMPED_REGS: usize = 14;

impl Reg {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for Reg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

impl fmt::Debug for Reg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

impl std::str::FromStr for Reg {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let n = s
            .strip_prefix('r')
            .and_then(|t| t.parse::<u8>().ok())
            .filter(|&n| n < 16)
            .ok_or_else(|| format!("invalid register `{s}`"))?;
        Ok(Reg(n))
    }
}

impl Serialize for Reg {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Reg {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Instruction opcodes. `Movi`/`Addi`/`Subi`/`Cmpi` are the immediate forms
/// sharing the `mov`/`add`/`sub`/`cmp` mnemonics; shifts only take immediates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Opcode {
    Nop,
    Movi,
    Mov,
    Add,
    Addi,
    Sub,
    Subi,
    And,
    Orr,
    Eor,
    Lsl,
    Lsr,
    Cmp,
    Cmpi,
    Ldr,
    Str,
    B,
    Beq,
    Bne,
    Blt,
    Bge,
    Halt,
}

impl Opcode {
    /// Assembly mnemonic (immediate forms share the register-form mnemonic).
    pub fn mnemonic(self) -> &'static str {
        use Opcode::*;
        match self {
            Nop => "nop",
            Movi | Mov => "mov",
            Add | Addi => "add",
            Sub | Subi => "sub",
            And => "and",
            Orr => "orr",
            Eor => "eor",
            Lsl => "lsl",
            Lsr => "lsr",
            Cmp | Cmpi => "cmp",
            Ldr => "ldr",
            Str => "str",
            B => "b",
            Beq => "beq",
            Bne => "bne",
            Blt => "blt",
            Bge => "bge",
            Halt => "halt",
        }
    }
}

/// One MiniISA instruction. Field use depends on the opcode; `target` is the
/// branch label resolved to an instruction index after assembly.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instruction {
    pub op: Opcode,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub dest: Option<Reg>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub src1: Option<Reg>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub src2: Option<Reg>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub imm: Option<i32>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub label: Option<String>,
    #[serde(skip)]
    pub target: Option<usize>,
}

impl Instruction {
    fn new(op: Opcode) -> Self {
        Instruction { op, dest: None, src1: None, src2: None, imm: None, label: None, target: None }
    }

    pub fn nop() -> Self {
        Self::new(Opcode::Nop)
    }

    pub fn halt() -> Self {
        Self::new(Opcode::Halt)
    }

    pub fn movi(dest: Reg, imm: i32) -> Self {
        Instruction { dest: Some(dest), imm: Some(imm), ..Self::new(Opcode::Movi) }
    }

    pub fn mov(dest: Reg, src: Reg) -> Self {
        Instruction { dest: Some(dest), src1: Some(src), ..Self::new(Opcode::Mov) }
    }

    pub fn alu(op: Opcode, dest: Reg, a: Reg, b: Reg) -> Self {
        Instruction { dest: Some(dest), src1: Some(a), src2: Some(b), ..Self::new(op) }
    }

    pub fn add(dest: Reg, a: Reg, b: Reg) -> Self {
        Self::alu(Opcode::Add, dest, a, b)
    }

    pub fn addi(dest: Reg, a: Reg, imm: i32) -> Self {
        Instruction { dest: Some(dest), src1: Some(a), imm: Some(imm), ..Self::new(Opcode::Addi) }
    }

    pub fn subi(dest: Reg, a: Reg, imm: i32) -> Self {
        Instruction { dest: Some(dest), src1: Some(a), imm: Some(imm), ..Self::new(Opcode::Subi) }
    }

    pub fn cmp(a: Reg, b: Reg) -> Self {
        Instruction { src1: Some(a), src2: Some(b), ..Self::new(Opcode::Cmp) }
    }

    pub fn cmpi(a: Reg, imm: i32) -> Self {
        Instruction { src1: Some(a), imm: Some(imm), ..Self::new(Opcode::Cmpi) }
    }

    pub fn ldr(dest: Reg, base: Reg, off: i32) -> Self {
        Instruction { dest: Some(dest), src1: Some(base), imm: Some(off), ..Self::new(Opcode::Ldr) }
    }

    pub fn store(value: Reg, base: Reg, off: i32) -> Self {
        Instruction { src1: Some(value), src2: Some(base), imm: Some(off), ..Self::new(Opcode::Str) }
    }

    pub fn branch(op: Opcode, label: impl Into<String>) -> Self {
        Instruction { label: Some(label.into()), ..Self::new(op) }
    }

    pub fn is_branch(&self) -> bool {
        matches!(self.op, Opcode::B | Opcode::Beq | Opcode::Bne | Opcode::Blt | Opcode::Bge)
    }

    pub fn is_cond_branch(&self) -> bool {
        matches!(self.op, Opcode::Beq | Opcode::Bne | Opcode::Blt | Opcode::Bge)
    }

    /// Registers read by this instruction (flags excluded).
    pub fn reads(&self) -> Vec<Reg> {
        use Opcode::*;
        match self.op {
            Mov | Addi | Subi | Lsl | Lsr | Cmpi | Ldr => self.src1.into_iter().collect(),
            Add | Sub | And | Orr | Eor | Cmp | Str => {
                self.src1.into_iter().chain(self.src2).collect()
            }
            _ => Vec::new(),
        }
    }

    /// Register written by this instruction, if any.
    pub fn write_reg(&self) -> Option<Reg> {
        self.dest
    }

    /// True for instructions that latch the NZCV flags.
    pub fn writes_flags(&self) -> bool {
        matches!(self.op, Opcode::Cmp | Opcode::Cmpi)
    }

    /// True for instructions whose behaviour depends on the NZCV flags.
    pub fn reads_flags(&self) -> bool {
        self.is_cond_branch()
    }
}

/// Declared memory region: `len` words starting at word address `base`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemRegion {
    pub name: String,
    pub base: u32,
    pub len: u32,
    pub init: Vec<u32>,
}

impl MemRegion {
    pub fn new(name: impl Into<String>, base: u32, init: Vec<u32>) -> Self {
        MemRegion { name: name.into(), base, len: init.len() as u32, init }
    }

    pub fn contains(&self, addr: u32) -> bool {
        addr >= self.base && addr < self.base + self.len
    }
}

/// NZCV condition flags; written only by `cmp`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Flags {
    pub n: bool,
    pub z: bool,
    pub c: bool,
    pub v: bool,
}

/// An assembled program: instructions, resolved labels, declared memory
/// regions and the derived basic-block structure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Program {
    pub instructions: Vec<Instruction>,
    pub labels: BTreeMap<String, usize>,
    pub regions: Vec<MemRegion>,
    #[serde(skip)]
    pub blocks: Vec<BasicBlock>,
}

/// Schema tag carried by every JSON document this crate emits.
pub const SCHEMA_VERSION: u32 = 1;

impl Program {
    /// Builds a program from parts, resolving branch targets and validating
    /// the structural invariants (labels, regions, operand arity).
    pub fn from_parts(
        instructions: Vec<Instruction>,
        labels: BTreeMap<String, usize>,
        regions: Vec<MemRegion>,
    ) -> Result<Program, AsmError> {
        let mut p = Program { instructions, labels, regions, blocks: Vec::new() };
        p.finalize()?;
        Ok(p)
    }

    pub(crate) fn finalize(&mut self) -> Result<(), AsmError> {
        asm::validate(self)?;
        for i in 0..self.instructions.len() {
            let target = match &self.instructions[i].label {
                Some(l) => Some(
                    *self
                        .labels
                        .get(l)
                        .ok_or_else(|| AsmError::UnknownLabel { line: 0, label: l.clone() })?,
                ),
                None => None,
            };
            self.instructions[i].target = target;
        }
        self.blocks = cfg::build_cfg(&self.instructions);
        Ok(())
    }

    /// Index of the basic block containing instruction `idx`.
    pub fn block_of(&self, idx: usize) -> usize {
        match self.blocks.binary_search_by_key(&idx, |b| b.entry) {
            Ok(b) => b,
            Err(ins) => ins - 1,
        }
    }

    /// Canonical JSON form (instruction list, labels and regions).
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "schema": SCHEMA_VERSION,
            "program": self,
        })
    }

    /// Parses the canonical JSON form and revalidates it.
    pub fn from_json(v: &serde_json::Value) -> Result<Program, AsmError> {
        let schema = v.get("schema").and_then(|s| s.as_u64()).unwrap_or(0);
        if schema != SCHEMA_VERSION as u64 {
            return Err(AsmError::Schema { found: schema });
        }
        let mut p: Program = serde_json::from_value(v.get("program").cloned().unwrap_or_default())
            .map_err(|e| AsmError::Json { msg: e.to_string() })?;
        p.finalize()?;
        Ok(p)
    }

    /// Total words across all declared regions.
    pub fn region_words(&self) -> usize {
        self.regions.iter().map(|r| r.len as usize).sum()
    }

    pub fn region(&self, name: &str) -> Option<&MemRegion> {
        self.regions.iter().find(|r| r.name == name)
    }
}

/// Why a run stopped.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    Halted,
    Trapped(Trap),
    BudgetExceeded,
}

/// Execution traps; memory accesses outside declared regions are never
/// silently performed.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
pub enum Trap {
    #[error("access to undeclared word address {addr:#x} at instruction {at}")]
    OutOfRegion { addr: u32, at: usize },
    #[error("program counter ran past the last instruction")]
    PcOffEnd,
}

/// One executed instruction in a run trace.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEntry {
    /// Static index of the executed instruction.
    pub at: usize,
    /// Register write performed, if any.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub write: Option<(Reg, u32)>,
    /// Memory word written, if any: (address, value).
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub store: Option<(u32, u32)>,
}

/// Sequence of executed instructions; index = dynamic instruction index.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trace(pub Vec<TraceEntry>);

impl Trace {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &TraceEntry> {
        self.0.iter()
    }

    /// How many times the instruction at `static_idx` was executed.
    pub fn executions_of(&self, static_idx: usize) -> usize {
        self.0.iter().filter(|e| e.at == static_idx).count()
    }

    /// Consecutive (from, to) static index pairs in execution order.
    pub fn transitions(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.0.windows(2).map(|w| (w[0].at, w[1].at))
    }
}

impl std::ops::Index<usize> for Trace {
    type Output = TraceEntry;
    fn index(&self, i: usize) -> &TraceEntry {
        &self.0[i]
    }
}

/// Byte-exact observable result of a run: r0..r13 at the end, then the
/// declared regions concatenated in declaration order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputBuffer {
    pub regs: Vec<u32>,
    pub mem: Vec<u32>,
}

impl OutputBuffer {
    pub fn capture(state: &MachineState) -> OutputBuffer {
        OutputBuffer {
            regs: state.regs[..DUMPED_REGS].to_vec(),
            mem: state.mem.concat_words(),
        }
    }

    /// Little-endian byte serialization, registers first.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.regs
            .iter()
            .chain(self.mem.iter())
            .flat_map(|w| w.to_le_bytes())
            .collect()
    }

    /// Hex dump, eight words per line.
    pub fn hex_dump(&self) -> String {
        let mut out = String::new();
        for (label, words) in [("regs", &self.regs), ("mem", &self.mem)] {
            out.push_str(label);
            out.push(':');
            for (i, w) in words.iter().enumerate() {
                out.push(if i % 8 == 0 { '\n' } else { ' ' });
                out.push_str(&format!("{w:08x}"));
            }
            out.push('\n');
        }
        out
    }

    /// Indices of dumped registers whose value differs from `other`.
    pub fn reg_diff(&self, other: &OutputBuffer) -> Vec<usize> {
        (0..self.regs.len()).filter(|&i| self.regs[i] != other.regs[i]).collect()
    }
}

/// Full result of executing a program.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunResult {
    pub output: OutputBuffer,
    pub trace: Trace,
    pub termination: Termination,
}

impl RunResult {
    pub fn halted(&self) -> bool {
        self.termination == Termination::Halted
    }
}
