//! Basic-block recovery over an instruction list.
//!
//! Block entries are exactly: index 0, branch targets, and the fall-through
//! index after each branch. Successor edges come from the block's last
//! instruction (branch target, fall-through, or none after `halt`).

use super::{Instruction, Opcode};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

/// Maximal branch-free run of instructions, `entry..=exit`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BasicBlock {
    pub entry: usize,
    pub exit: usize,
    /// Successor block indices: branch target first, then fall-through.
    pub succs: Vec<usize>,
    /// True if some branch in the program targets this block's entry.
    pub is_branch_target: bool,
}

/// Partitions the instruction list into basic blocks with successor edges.
pub fn build_cfg(instructions: &[Instruction]) -> Vec<BasicBlock> {
    if instructions.is_empty() {
        return Vec::new();
    }
    let n = instructions.len();
    let mut entries: BTreeSet<usize> = BTreeSet::new();
    let mut branch_targets: BTreeSet<usize> = BTreeSet::new();
    entries.insert(0);
    for (i, insn) in instructions.iter().enumerate() {
        if insn.is_branch() {
            if let Some(t) = insn.target {
                if t < n {
                    entries.insert(t);
                    branch_targets.insert(t);
                }
            }
            if i + 1 < n {
                entries.insert(i + 1);
            }
        }
    }

    let starts: Vec<usize> = entries.into_iter().collect();
    let block_index = |idx: usize| -> usize {
        match starts.binary_search(&idx) {
            Ok(b) => b,
            Err(ins) => ins - 1,
        }
    };

    let mut blocks = Vec::with_capacity(starts.len());
    for (b, &entry) in starts.iter().enumerate() {
        let exit = if b + 1 < starts.len() { starts[b + 1] - 1 } else { n - 1 };
        let last = &instructions[exit];
        let mut succs = Vec::new();
        if last.is_branch() {
            if let Some(t) = last.target {
                if t < n {
                    succs.push(block_index(t));
                }
            }
            if last.is_cond_branch() && exit + 1 < n {
                succs.push(block_index(exit + 1));
            }
        } else if last.op != Opcode::Halt && exit + 1 < n {
            succs.push(block_index(exit + 1));
        }
        blocks.push(BasicBlock {
            entry,
            exit,
            succs,
            is_branch_target: branch_targets.contains(&entry),
        });
    }
    blocks
}
