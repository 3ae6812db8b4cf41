//! Issue/retire timing over a run trace: a dual-issue window model that
//! assigns each dynamic instruction an issue and retire cycle, and derives
//! the set of in-flight instructions a pulse at a given cycle can touch.

use crate::isa::{Opcode, Program, Reg, Trace};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fmt;

/// Window geometry. Defaults model a dual-issue core with an eight-cycle
/// in-flight window and a reorder slack of twice the window depth.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimingConfig {
    pub issue_width: usize,
    pub window_depth: u32,
    /// Maximum dynamic-index distance between two in-flight instructions.
    pub reorder_slack: usize,
    /// Seeded ±1 retire jitter on loads (the only variable-latency op).
    pub load_jitter: bool,
}

impl Default for TimingConfig {
    fn default() -> Self {
        TimingConfig { issue_width: 2, window_depth: 8, reorder_slack: 16, load_jitter: true }
    }
}

/// Issue/retire cycles for one dynamic instruction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimedEntry {
    pub issue: u32,
    pub retire: u32,
}

/// Cycle assignment for a whole trace.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimedTrace {
    pub entries: Vec<TimedEntry>,
    pub total_cycles: u32,
}

#[derive(Debug, thiserror::Error)]
pub enum TimingError {
    #[error("cycle {cycle} outside schedule of {total} cycles")]
    CycleOutOfRange { cycle: u32, total: u32 },
    #[error("empty trace has no schedule")]
    EmptyTrace,
}

/// Assigns issue cycles in program order: at most `issue_width` per cycle,
/// consumers issue strictly after producers (registers and flags), branches
/// close their issue group, and loads get optional seeded retire jitter.
pub fn schedule(program: &Program, trace: &Trace, cfg: &TimingConfig, seed: u64) -> TimedTrace {
    let n = trace.len();
    let mut entries = Vec::with_capacity(n);
    if n == 0 {
        return TimedTrace { entries, total_cycles: 0 };
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Last issue cycle that wrote each register; slot 16 is the flags.
    let mut last_write: [Option<u32>; 17] = [None; 17];
    let mut retire_prefix_max: Vec<u32> = Vec::with_capacity(n);
    let mut cycle = 0u32;
    let mut in_group = 0usize;
    let mut group_closed = false;
    let mut max_retire = 0u32;

    for (i, entry) in trace.iter().enumerate() {
        let insn = &program.instructions[entry.at];
        let mut min_cycle = cycle;
        for r in insn.reads() {
            if let Some(wc) = last_write[r.index()] {
                min_cycle = min_cycle.max(wc + 1);
            }
        }
        if insn.reads_flags() {
            if let Some(wc) = last_write[16] {
                min_cycle = min_cycle.max(wc + 1);
            }
        }
        if i > cfg.reorder_slack {
            // Instructions further back than the slack must have retired.
            min_cycle = min_cycle.max(retire_prefix_max[i - cfg.reorder_slack - 1] + 1);
        }
        if min_cycle > cycle {
            cycle = min_cycle;
            in_group = 0;
        } else if group_closed || in_group == cfg.issue_width {
            cycle += 1;
            in_group = 0;
        }
        in_group += 1;
        group_closed = insn.is_branch();

        let mut retire = cycle + cfg.window_depth - 1;
        if insn.op == Opcode::Ldr && cfg.load_jitter {
            retire = retire.wrapping_add(rng.gen_range(0..3u32).wrapping_sub(1));
        }
        entries.push(TimedEntry { issue: cycle, retire });
        max_retire = max_retire.max(retire);
        retire_prefix_max.push(max_retire);

        if let Some(w) = insn.write_reg() {
            last_write[w.index()] = Some(cycle);
        }
        if insn.writes_flags() {
            last_write[16] = Some(cycle);
        }
    }
    TimedTrace { entries, total_cycles: max_retire + 1 }
}

/// Dynamic indices in flight at `cycle` (issued, not yet retired), ascending.
pub fn inflight_at(tt: &TimedTrace, cycle: u32) -> Result<Vec<usize>, TimingError> {
    if tt.entries.is_empty() {
        return Err(TimingError::EmptyTrace);
    }
    if cycle >= tt.total_cycles {
        return Err(TimingError::CycleOutOfRange { cycle, total: tt.total_cycles });
    }
    Ok((0..tt.entries.len())
        .filter(|&i| tt.entries[i].issue <= cycle && cycle <= tt.entries[i].retire)
        .collect())
}

/// A register or immediate visible to a pulse through in-flight instructions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Operand {
    Reg(Reg),
    Imm(i32),
}

impl fmt::Display for Operand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Operand::Reg(r) => write!(f, "{r}"),
            Operand::Imm(i) => write!(f, "#{i}"),
        }
    }
}

/// Union of source registers, destination registers and immediates of the
/// given in-flight instructions. `nop` contributes nothing.
pub fn operand_pool(program: &Program, trace: &Trace, inflight: &[usize]) -> BTreeSet<Operand> {
    let mut pool = BTreeSet::new();
    for &i in inflight {
        let insn = &program.instructions[trace[i].at];
        for r in insn.reads() {
            pool.insert(Operand::Reg(r));
        }
        if let Some(d) = insn.write_reg() {
            pool.insert(Operand::Reg(d));
        }
        if let Some(imm) = insn.imm {
            pool.insert(Operand::Imm(imm));
        }
    }
    pool
}

/// Registers in the operand pool, ascending.
pub fn pool_regs(pool: &BTreeSet<Operand>) -> Vec<Reg> {
    pool.iter()
        .filter_map(|o| match o {
            Operand::Reg(r) => Some(*r),
            Operand::Imm(_) => None,
        })
        .collect()
}
