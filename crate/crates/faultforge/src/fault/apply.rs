//! Drives a program run while weaving in the elementary effects of one
//! fault spec at their dynamic step indices.

use super::{CorruptKind, FaultEffect, FaultSpec, OperandSlot};
use crate::isa::{
    effective_addr, exec_one, Instruction, MachineState, Opcode, OutputBuffer, Program, RunResult,
    StepEffect, Termination, Trace, TraceEntry, Trap, PC,
};
use crate::timing::Operand;
use std::collections::BTreeMap;

/// Everything scheduled to happen at one dynamic step.
#[derive(Default)]
struct SiteActions {
    /// State rewrites applied before the instruction executes.
    pre: Vec<(crate::isa::Reg, CorruptKind, bool)>,
    skip: bool,
    substitution: Option<(OperandSlot, Operand)>,
    load: Option<CorruptKind>,
    magic: Option<usize>,
    /// Earlier step indices whose instructions re-execute after this one.
    replays: Vec<usize>,
}

fn plan(effects: &[FaultEffect]) -> BTreeMap<usize, SiteActions> {
    let mut sites: BTreeMap<usize, SiteActions> = BTreeMap::new();
    for e in effects {
        let slot = sites.entry(e.site()).or_default();
        match *e {
            FaultEffect::Skip { .. } => slot.skip = true,
            FaultEffect::Replay { replayed, .. } => slot.replays.push(replayed),
            FaultEffect::RegisterCorruption { reg, value, .. } => {
                slot.pre.push((reg, value, false))
            }
            FaultEffect::MshwReset { reg, .. } => {
                slot.pre.push((reg, CorruptKind::Set(0), true))
            }
            FaultEffect::OperandSubstitution { slot: s, with, .. } => {
                slot.substitution = Some((s, with))
            }
            FaultEffect::LoadCorruption { value, .. } => slot.load = Some(value),
            FaultEffect::MagicEdge { target, .. } => slot.magic = Some(target),
        }
    }
    sites
}

/// Applies `effects` while running `program` from `regs`. Deterministic;
/// effects whose site is never reached simply do not fire.
pub fn apply_effects(
    program: &Program,
    regs: [u32; 16],
    effects: &[FaultEffect],
    budget: usize,
) -> RunResult {
    let sites = plan(effects);
    let mut state = MachineState::new(program, regs);
    let mut trace: Vec<TraceEntry> = Vec::new();
    let mut executed: Vec<usize> = Vec::new();
    let mut pc = 0usize;
    let mut step = 0usize;
    // An armed edge override: (exit instruction index, target entry index).
    let mut armed: Option<(usize, usize)> = None;

    let termination = 'run: loop {
        if step >= budget {
            break Termination::BudgetExceeded;
        }
        if pc >= program.instructions.len() {
            break Termination::Trapped(Trap::PcOffEnd);
        }
        let actions = sites.get(&step);

        if let Some(a) = actions {
            for &(reg, value, mshw) in &a.pre {
                let old = state.regs[reg.index()];
                state.regs[reg.index()] = if mshw { old & 0x0000_FFFF } else { value.apply(old) };
            }
        }

        let original = &program.instructions[pc];
        let mut substituted: Option<Instruction> = None;
        let mut load_override: Option<u32> = None;
        let mut skip = false;
        if let Some(a) = actions {
            skip = a.skip;
            if !skip {
                if let Some((slot, with)) = a.substitution {
                    substituted = super::substitute(original, slot, with);
                }
                if let Some(value) = a.load {
                    if original.op == Opcode::Ldr {
                        if let Some(addr) = effective_addr(&state, original) {
                            if let Some(delivered) = state.mem.read(addr) {
                                load_override = Some(value.apply(delivered));
                            }
                        }
                    }
                }
            }
        }
        let insn = substituted.as_ref().unwrap_or(original);

        let eff = if skip {
            StepEffect { next_pc: pc + 1, write: None, store: None, halted: false }
        } else {
            match exec_one(&mut state, insn, pc, load_override) {
                Ok(eff) => eff,
                Err(t) => break Termination::Trapped(t),
            }
        };
        trace.push(TraceEntry { at: pc, write: eff.write, store: eff.store });
        executed.push(pc);

        if let Some(a) = actions {
            if let Some(target) = a.magic {
                let exit = program.blocks[program.block_of(pc)].exit;
                armed = Some((exit, target));
            }
            // Re-execution is register-and-memory only: it leaves the
            // program counter and the control-flow trace untouched.
            for &r in &a.replays {
                let Some(&rpc) = executed.get(r) else { continue };
                let rinsn = &program.instructions[rpc];
                if rinsn.is_branch() || rinsn.op == Opcode::Halt {
                    continue;
                }
                if let Err(t) = exec_one(&mut state, rinsn, rpc, None) {
                    break 'run Termination::Trapped(t);
                }
            }
        }

        if eff.halted {
            break Termination::Halted;
        }
        let mut next = eff.next_pc;
        if let Some((exit, target)) = armed {
            if pc == exit {
                next = target;
                armed = None;
            }
        }
        pc = next;
        state.regs[PC.index()] = pc as u32;
        step += 1;
    };
    RunResult { output: OutputBuffer::capture(&state), trace: Trace(trace), termination }
}

/// Applies a full spec; see `apply_effects`.
pub fn apply_fault(
    program: &Program,
    regs: [u32; 16],
    spec: &FaultSpec,
    budget: usize,
) -> RunResult {
    apply_effects(program, regs, &spec.effects, budget)
}
