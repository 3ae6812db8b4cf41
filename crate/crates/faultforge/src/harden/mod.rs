//! Countermeasure passes: loop exit-condition duplication, full duplication
//! with block-signature control-flow checking, their stack, and an
//! exhaustive single-fault detection verifier.

mod loopdup;
mod swift;
#[cfg(test)]
mod tests;
mod verify;

pub use loopdup::harden_loop;
pub use swift::harden_swift;
pub use verify::{
    judge_run, region_word, verify_detection, DetectionReport, FaultOutcome, SingleFamily,
    SiteScope,
};

use crate::isa::{Instruction, Reg};
use crate::workloads::Workload;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

/// Detection word written by every handler: region "ctrl", offset 0.
pub const DETECT_SENTINEL: u32 = 0xDEAD_0001;

/// Which countermeasure produced a hardened program.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    LoopDup,
    Swift,
    Stacked,
}

impl Scheme {
    pub fn suffix(self) -> &'static str {
        match self {
            Scheme::LoopDup => "-sec",
            Scheme::Swift => "-swift",
            Scheme::Stacked => "-swift-sec",
        }
    }

    pub fn from_name(name: &str) -> Option<Scheme> {
        match name {
            "loopdup" => Some(Scheme::LoopDup),
            "swift" => Some(Scheme::Swift),
            "stacked" => Some(Scheme::Stacked),
            _ => None,
        }
    }
}

/// Where a register's duplicate lives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shadow {
    /// A dedicated shadow register updated in lockstep.
    Reg(Reg),
    /// Recomputed on demand by reloading through a shadowed pointer.
    Reload { base: Reg, offset: i32 },
}

/// A hardened program plus the bookkeeping the verifier and reports need.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HardenedProgram {
    pub workload: Workload,
    pub scheme: Scheme,
    /// Name of the workload this was derived from.
    pub baseline: String,
    /// Static index of the first handler instruction.
    pub detect_entry: usize,
    /// Original register -> its duplicate.
    pub shadow_map: BTreeMap<Reg, Shadow>,
    /// Static signature per checked block entry index.
    pub signatures: BTreeMap<usize, u32>,
    /// Static indices of the exit-condition machinery (originals,
    /// duplicates, agreement checks and exit branches).
    pub exit_slice: BTreeSet<usize>,
    /// Registers the pre-dump restore block rewinds to their initial values.
    pub restored: BTreeSet<Reg>,
}

impl HardenedProgram {
    /// Instruction count of the hardened payload (handler included,
    /// epilogue excluded), the basis for size-ratio comparisons.
    pub fn payload_len(&self) -> usize {
        self.workload.meta.payload.len()
    }

    /// Static size ratio against a baseline workload.
    pub fn size_ratio(&self, baseline: &Workload) -> f64 {
        self.payload_len() as f64 / baseline.meta.payload.len() as f64
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum HardenError {
    #[error("workload {0} has no loop to protect")]
    NoLoop(String),
    #[error("register pressure: pass needs {needed} free registers, {available} available")]
    RegisterPressure { needed: usize, available: usize },
    #[error("unsupported workload shape: {0}")]
    Unsupported(String),
}

/// Applies the loop pass, then the duplication pass on its output.
pub fn harden_stacked(w: &Workload) -> Result<HardenedProgram, HardenError> {
    let first = harden_loop(w)?;
    let mut out = harden_swift(&first.workload)?;
    out.scheme = Scheme::Stacked;
    out.baseline = w.name.clone();
    out.workload.name = format!("{}{}", w.name, Scheme::Stacked.suffix());
    // The verifier scopes exit-slice checks to the inner pass's machinery;
    // indices moved, so the outer pass re-derives them (empty means "whole
    // payload" is never implied; scopes are explicit).
    Ok(out)
}

/// Applies the named scheme.
pub fn harden(w: &Workload, scheme: Scheme) -> Result<HardenedProgram, HardenError> {
    match scheme {
        Scheme::LoopDup => harden_loop(w),
        Scheme::Swift => harden_swift(w),
        Scheme::Stacked => harden_stacked(w),
    }
}

/// Small emission helper: instructions plus label bookkeeping.
pub(crate) struct Asm {
    pub insns: Vec<Instruction>,
    pub labels: BTreeMap<String, usize>,
}

impl Asm {
    pub fn new() -> Asm {
        Asm { insns: Vec::new(), labels: BTreeMap::new() }
    }

    pub fn here(&self) -> usize {
        self.insns.len()
    }

    pub fn label(&mut self, name: &str) {
        self.labels.insert(name.to_string(), self.insns.len());
    }

    pub fn push(&mut self, i: Instruction) -> usize {
        self.insns.push(i);
        self.insns.len() - 1
    }
}

/// Emits the shared detection handler: sentinel into ctrl[0], then halt.
/// Clobbers r13 and the scratch register, which is acceptable after a
/// detection fires.
pub(crate) fn emit_handler(a: &mut Asm, ctrl_base: u32) {
    use crate::isa::SCRATCH;
    a.label("detect");
    a.push(Instruction::movi(Reg(13), DETECT_SENTINEL as i32));
    a.push(Instruction::movi(SCRATCH, ctrl_base as i32));
    a.push(Instruction::store(Reg(13), SCRATCH, 0));
    a.push(Instruction::halt());
}

/// Emits the restore block rewinding every hardening register to its
/// standard initial value so the dumped buffer matches the baseline.
pub(crate) fn emit_restore(a: &mut Asm, regs: &BTreeSet<Reg>) {
    a.label("restore");
    for r in regs {
        a.push(Instruction::movi(*r, 1 << r.index()));
    }
}
