//! Architectural interpreter: machine state, single-step execution, and the
//! reference run loop. Fault drivers reuse `exec_one` with their own loops.

use super::{
    Flags, Instruction, MemRegion, Opcode, OutputBuffer, Program, Reg, RunResult, Termination,
    Trace, TraceEntry, Trap,
};

/// Word-addressed memory over the declared regions, in declaration order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Memory {
    regions: Vec<(u32, Vec<u32>)>,
}

impl Memory {
    pub fn from_regions(regions: &[MemRegion]) -> Memory {
        Memory {
            regions: regions.iter().map(|r| (r.base, r.init.clone())).collect(),
        }
    }

    pub fn read(&self, addr: u32) -> Option<u32> {
        self.regions.iter().find_map(|(base, words)| {
            addr.checked_sub(*base)
                .and_then(|off| words.get(off as usize))
                .copied()
        })
    }

    pub fn write(&mut self, addr: u32, value: u32) -> bool {
        for (base, words) in &mut self.regions {
            if let Some(w) = addr
                .checked_sub(*base)
                .and_then(|off| words.get_mut(off as usize))
            {
                *w = value;
                return true;
            }
        }
        false
    }

    /// All region words concatenated in declaration order.
    pub fn concat_words(&self) -> Vec<u32> {
        self.regions.iter().flat_map(|(_, w)| w.iter().copied()).collect()
    }
}

/// Registers, flags and memory of one running program.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MachineState {
    pub regs: [u32; 16],
    pub flags: Flags,
    pub mem: Memory,
}

impl MachineState {
    pub fn new(program: &Program, regs: [u32; 16]) -> MachineState {
        MachineState {
            regs,
            flags: Flags::default(),
            mem: Memory::from_regions(&program.regions),
        }
    }
}

/// Outcome of executing a single instruction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StepEffect {
    /// Where control goes next; the caller decides whether to follow it.
    pub next_pc: usize,
    pub write: Option<(Reg, u32)>,
    pub store: Option<(u32, u32)>,
    pub halted: bool,
}

fn set_cmp_flags(flags: &mut Flags, a: u32, b: u32) {
    let r = a.wrapping_sub(b);
    flags.n = (r as i32) < 0;
    flags.z = r == 0;
    flags.c = a >= b;
    flags.v = ((a ^ b) & (a ^ r)) >> 31 == 1;
}

fn cond_holds(op: Opcode, f: &Flags) -> bool {
    match op {
        Opcode::Beq => f.z,
        Opcode::Bne => !f.z,
        Opcode::Blt => f.n != f.v,
        Opcode::Bge => f.n == f.v,
        _ => unreachable!("not a conditional branch"),
    }
}

/// Executes one instruction against `state`. `at` is the static index used
/// for fall-through; `load_override` replaces the value a `ldr` delivers
/// (memory is read and trap-checked regardless).
pub fn exec_one(
    state: &mut MachineState,
    insn: &Instruction,
    at: usize,
    load_override: Option<u32>,
) -> Result<StepEffect, Trap> {
    use Opcode::*;
    let mut eff = StepEffect { next_pc: at + 1, write: None, store: None, halted: false };
    let rd = |r: Option<Reg>| state.regs[r.unwrap().index()];
    match insn.op {
        Nop => {}
        Halt => eff.halted = true,
        Movi => eff.write = Some((insn.dest.unwrap(), insn.imm.unwrap() as u32)),
        Mov => eff.write = Some((insn.dest.unwrap(), rd(insn.src1))),
        Add => eff.write = Some((insn.dest.unwrap(), rd(insn.src1).wrapping_add(rd(insn.src2)))),
        Sub => eff.write = Some((insn.dest.unwrap(), rd(insn.src1).wrapping_sub(rd(insn.src2)))),
        And => eff.write = Some((insn.dest.unwrap(), rd(insn.src1) & rd(insn.src2))),
        Orr => eff.write = Some((insn.dest.unwrap(), rd(insn.src1) | rd(insn.src2))),
        Eor => eff.write = Some((insn.dest.unwrap(), rd(insn.src1) ^ rd(insn.src2))),
        Addi => {
            eff.write =
                Some((insn.dest.unwrap(), rd(insn.src1).wrapping_add(insn.imm.unwrap() as u32)))
        }
        Subi => {
            eff.write =
                Some((insn.dest.unwrap(), rd(insn.src1).wrapping_sub(insn.imm.unwrap() as u32)))
        }
        // Shifts of 32 or more clear the register, so corrupted shift
        // amounts stay well defined instead of aborting the interpreter.
        Lsl => {
            let v = rd(insn.src1).checked_shl(insn.imm.unwrap() as u32).unwrap_or(0);
            eff.write = Some((insn.dest.unwrap(), v));
        }
        Lsr => {
            let v = rd(insn.src1).checked_shr(insn.imm.unwrap() as u32).unwrap_or(0);
            eff.write = Some((insn.dest.unwrap(), v));
        }
        Cmp => set_cmp_flags(&mut state.flags, rd(insn.src1), rd(insn.src2)),
        Cmpi => set_cmp_flags(&mut state.flags, rd(insn.src1), insn.imm.unwrap() as u32),
        Ldr => {
            let addr = rd(insn.src1).wrapping_add(insn.imm.unwrap() as u32);
            let loaded = state.mem.read(addr).ok_or(Trap::OutOfRegion { addr, at })?;
            eff.write = Some((insn.dest.unwrap(), load_override.unwrap_or(loaded)));
        }
        Str => {
            let addr = rd(insn.src2).wrapping_add(insn.imm.unwrap() as u32);
            let value = rd(insn.src1);
            if !state.mem.write(addr, value) {
                return Err(Trap::OutOfRegion { addr, at });
            }
            eff.store = Some((addr, value));
        }
        B => eff.next_pc = insn.target.unwrap(),
        Beq | Bne | Blt | Bge => {
            if cond_holds(insn.op, &state.flags) {
                eff.next_pc = insn.target.unwrap();
            }
        }
    }
    if let Some((r, v)) = eff.write {
        state.regs[r.index()] = v;
    }
    Ok(eff)
}

/// Effective address a memory instruction would touch under `state`, using
/// the same arithmetic as `exec_one`. `None` for non-memory instructions.
pub fn effective_addr(state: &MachineState, insn: &Instruction) -> Option<u32> {
    let base = match insn.op {
        Opcode::Ldr => insn.src1?,
        Opcode::Str => insn.src2?,
        _ => return None,
    };
    Some(state.regs[base.index()].wrapping_add(insn.imm? as u32))
}

/// Runs a program to completion from the given register file, recording a
/// full trace. `budget` bounds the number of executed instructions.
pub fn run_with(program: &Program, regs: [u32; 16], budget: usize) -> RunResult {
    let mut state = MachineState::new(program, regs);
    let mut trace = Vec::new();
    let mut pc = 0usize;
    let termination = loop {
        if trace.len() >= budget {
            break Termination::BudgetExceeded;
        }
        if pc >= program.instructions.len() {
            break Termination::Trapped(Trap::PcOffEnd);
        }
        let insn = &program.instructions[pc];
        match exec_one(&mut state, insn, pc, None) {
            Ok(eff) => {
                trace.push(TraceEntry { at: pc, write: eff.write, store: eff.store });
                if eff.halted {
                    break Termination::Halted;
                }
                pc = eff.next_pc;
                state.regs[super::PC.index()] = pc as u32;
            }
            Err(t) => break Termination::Trapped(t),
        }
    };
    RunResult { output: OutputBuffer::capture(&state), trace: Trace(trace), termination }
}
