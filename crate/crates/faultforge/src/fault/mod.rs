//! Fault effects: parameterized, deterministic perturbations of a running
//! program, the profile that weights them, and the sampler/driver pair that
//! turns a pulse cycle into a concrete reproducible disturbance.

mod apply;
mod sample;
#[cfg(test)]
mod tests;

pub use apply::{apply_effects, apply_fault};
pub use sample::{sample_fault, sample_screened, Sampled};

use crate::isa::{Instruction, Opcode, Reg};
use crate::timing::Operand;
use serde::{Deserialize, Serialize};
use std::fmt;

/// How a corrupted register or load value relates to the healthy one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptKind {
    /// XOR with a mask: a few bits of the live value flip.
    Flip(u32),
    /// Absolute replacement, uncorrelated with the live value.
    Set(u32),
}

impl CorruptKind {
    pub fn apply(self, old: u32) -> u32 {
        match self {
            CorruptKind::Flip(mask) => old ^ mask,
            CorruptKind::Set(v) => v,
        }
    }
}

/// Which operand slot of an instruction a substitution rewrites.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperandSlot {
    Src1,
    Src2,
    Imm,
    Dest,
}

pub const ALL_SLOTS: [OperandSlot; 4] =
    [OperandSlot::Src1, OperandSlot::Src2, OperandSlot::Imm, OperandSlot::Dest];

/// One elementary perturbation, anchored to a dynamic step index (`site`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultEffect {
    /// The instruction at `site` executes as a nop: no write, no operation.
    Skip { site: usize },
    /// The instruction executed at step `replayed` runs once more right
    /// after `site`, without moving the program counter.
    Replay { site: usize, replayed: usize },
    /// `reg` is overwritten immediately before the instruction at `site`.
    RegisterCorruption { site: usize, reg: Reg, value: CorruptKind },
    /// The 16 most-significant bits of `reg` clear before `site`.
    MshwReset { site: usize, reg: Reg },
    /// One operand slot of the instruction at `site` is replaced.
    OperandSubstitution { site: usize, slot: OperandSlot, with: Operand },
    /// The value delivered by the load at `site` is wrong; memory is intact.
    LoadCorruption { site: usize, value: CorruptKind },
    /// At the end of the block containing `site`, control transfers to the
    /// entry instruction `target` of another block.
    MagicEdge { site: usize, target: usize },
}

impl FaultEffect {
    /// Dynamic step index the effect is anchored to.
    pub fn site(&self) -> usize {
        match *self {
            FaultEffect::Skip { site }
            | FaultEffect::Replay { site, .. }
            | FaultEffect::RegisterCorruption { site, .. }
            | FaultEffect::MshwReset { site, .. }
            | FaultEffect::OperandSubstitution { site, .. }
            | FaultEffect::LoadCorruption { site, .. }
            | FaultEffect::MagicEdge { site, .. } => site,
        }
    }
}

/// Same-family coupling patterns observed for multi-effect faults.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompositeKind {
    /// One instruction skipped plus an earlier in-flight one replayed.
    SkipReplay,
    /// Several registers corrupted with one shared flip mask.
    Correlated,
    /// The same elementary effect repeated across the window.
    Repeated(RepeatedFamily),
}

/// Families that occur in repeated form.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepeatedFamily {
    Skip,
    OperandSubstitution,
    MshwReset,
    LoadCorruption,
}

/// Top-level fault family of a sampled spec.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Skip,
    Replay,
    RegisterCorruption,
    MshwReset,
    OperandSubstitution,
    LoadCorruption,
    MagicEdge,
    Composite(CompositeKind),
    Mixed,
}

impl Family {
    /// Collapses composite kinds for share-of-label comparisons.
    pub fn label(&self) -> &'static str {
        match self {
            Family::Skip => "skip",
            Family::Replay => "replay",
            Family::RegisterCorruption => "register-corruption",
            Family::MshwReset => "mshw-reset",
            Family::OperandSubstitution => "operand-substitution",
            Family::LoadCorruption => "load-corruption",
            Family::MagicEdge => "magic-edge",
            Family::Composite(_) => "composite",
            Family::Mixed => "mixed",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// A complete, replayable description of one injected disturbance.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultSpec {
    /// Pulse cycle the spec was sampled for.
    pub cycle: u32,
    pub family: Family,
    /// Elementary effects, applied in site order by the driver.
    pub effects: Vec<FaultEffect>,
}

/// Weights for drawing a fault family plus the knobs shaping its payload.
/// Weights need not sum to one; they are normalized at draw time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffectProfile {
    pub name: String,
    pub skip: f64,
    pub replay: f64,
    pub register_corruption: f64,
    pub mshw_reset: f64,
    pub operand_substitution: f64,
    pub load_corruption: f64,
    pub magic_edge: f64,
    pub composite_skip_replay: f64,
    pub composite_correlated: f64,
    pub composite_substitution: f64,
    pub composite_mshw: f64,
    pub composite_load: f64,
    pub mixed: f64,
    /// Probability a corruption value is a small flip of the live value
    /// rather than an uncorrelated word.
    pub bitflip_share: f64,
    /// Per-extra-target probability that a composite burst grows beyond two.
    pub coupling: f64,
    /// Probability the device simply does not answer.
    pub mute: f64,
}

impl EffectProfile {
    /// The built-in default: per-family weights transcribed from the
    /// measured distribution on the register-rich copy loop, with coupling
    /// and mute rates calibrated against the same data set.
    pub fn paper_em_default() -> EffectProfile {
        EffectProfile {
            name: "paper-em-default".to_string(),
            skip: 26.5,
            replay: 0.0,
            register_corruption: 0.9,
            mshw_reset: 0.0,
            operand_substitution: 10.2,
            load_corruption: 18.0,
            magic_edge: 0.0,
            composite_skip_replay: 6.5,
            composite_correlated: 0.2,
            composite_substitution: 17.4,
            composite_mshw: 3.4,
            composite_load: 0.0,
            mixed: 20.0,
            bitflip_share: 0.5,
            coupling: 0.7,
            mute: 0.029,
        }
    }

    /// A degenerate profile giving all weight to one family; useful for
    /// exhaustive and calibration experiments.
    pub fn single(family: Family) -> EffectProfile {
        let mut p = EffectProfile {
            name: format!("single-{}", family.label()),
            skip: 0.0,
            replay: 0.0,
            register_corruption: 0.0,
            mshw_reset: 0.0,
            operand_substitution: 0.0,
            load_corruption: 0.0,
            magic_edge: 0.0,
            composite_skip_replay: 0.0,
            composite_correlated: 0.0,
            composite_substitution: 0.0,
            composite_mshw: 0.0,
            composite_load: 0.0,
            mixed: 0.0,
            bitflip_share: 0.5,
            coupling: 0.7,
            mute: 0.0,
        };
        match family {
            Family::Skip => p.skip = 1.0,
            Family::Replay => p.replay = 1.0,
            Family::RegisterCorruption => p.register_corruption = 1.0,
            Family::MshwReset => p.mshw_reset = 1.0,
            Family::OperandSubstitution => p.operand_substitution = 1.0,
            Family::LoadCorruption => p.load_corruption = 1.0,
            Family::MagicEdge => p.magic_edge = 1.0,
            Family::Composite(CompositeKind::SkipReplay) => p.composite_skip_replay = 1.0,
            Family::Composite(CompositeKind::Correlated) => p.composite_correlated = 1.0,
            Family::Composite(CompositeKind::Repeated(RepeatedFamily::Skip)) => {
                p.composite_skip_replay = 1.0
            }
            Family::Composite(CompositeKind::Repeated(RepeatedFamily::OperandSubstitution)) => {
                p.composite_substitution = 1.0
            }
            Family::Composite(CompositeKind::Repeated(RepeatedFamily::MshwReset)) => {
                p.composite_mshw = 1.0
            }
            Family::Composite(CompositeKind::Repeated(RepeatedFamily::LoadCorruption)) => {
                p.composite_load = 1.0
            }
            Family::Mixed => p.mixed = 1.0,
        }
        p
    }

    /// Built-in profiles addressable by name.
    pub fn by_name(name: &str) -> Option<EffectProfile> {
        match name {
            "paper-em-default" => Some(EffectProfile::paper_em_default()),
            _ => None,
        }
    }

    /// Family weights in fixed draw order.
    pub(crate) fn weights(&self) -> [f64; 13] {
        [
            self.skip,
            self.replay,
            self.register_corruption,
            self.mshw_reset,
            self.operand_substitution,
            self.load_corruption,
            self.magic_edge,
            self.composite_skip_replay,
            self.composite_correlated,
            self.composite_substitution,
            self.composite_mshw,
            self.composite_load,
            self.mixed,
        ]
    }

    pub fn total_weight(&self) -> f64 {
        self.weights().iter().sum()
    }

    /// Weight share of each top-level label, mute excluded.
    pub fn label_shares(&self) -> Vec<(&'static str, f64)> {
        let t = self.total_weight();
        let composite = self.composite_skip_replay
            + self.composite_correlated
            + self.composite_substitution
            + self.composite_mshw
            + self.composite_load;
        vec![
            ("skip", self.skip / t),
            ("replay", self.replay / t),
            ("register-corruption", self.register_corruption / t),
            ("mshw-reset", self.mshw_reset / t),
            ("operand-substitution", self.operand_substitution / t),
            ("load-corruption", self.load_corruption / t),
            ("magic-edge", self.magic_edge / t),
            ("composite", composite / t),
            ("mixed", self.mixed / t),
        ]
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.weights().iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err("family weights must be finite and non-negative".to_string());
        }
        if self.total_weight() <= 0.0 {
            return Err("at least one family weight must be positive".to_string());
        }
        for (label, v) in [
            ("bitflip_share", self.bitflip_share),
            ("coupling", self.coupling),
            ("mute", self.mute),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(format!("{label} must lie in [0, 1]"));
            }
        }
        Ok(())
    }
}

/// Slots of `insn` that exist and can be rewritten.
pub fn substitution_slots(insn: &Instruction) -> Vec<OperandSlot> {
    let mut slots = Vec::new();
    if insn.src1.is_some() {
        slots.push(OperandSlot::Src1);
    }
    if insn.src2.is_some() {
        slots.push(OperandSlot::Src2);
    }
    if insn.imm.is_some() {
        slots.push(OperandSlot::Imm);
    }
    if insn.write_reg().is_some() {
        slots.push(OperandSlot::Dest);
    }
    slots
}

/// Rewrites one operand slot of `insn`, switching between immediate and
/// register forms where a twin opcode exists (add/addi, sub/subi, cmp/cmpi,
/// mov with either source). Returns `None` when the combination has no
/// executable encoding.
pub fn substitute(insn: &Instruction, slot: OperandSlot, with: Operand) -> Option<Instruction> {
    use Opcode::*;
    let mut out = insn.clone();
    match (slot, with) {
        (OperandSlot::Src1, Operand::Reg(r)) => {
            insn.src1?;
            out.src1 = Some(r);
        }
        (OperandSlot::Src1, Operand::Imm(_)) => return None,
        (OperandSlot::Src2, Operand::Reg(r)) => {
            insn.src2?;
            out.src2 = Some(r);
        }
        (OperandSlot::Src2, Operand::Imm(v)) => {
            insn.src2?;
            out.op = match insn.op {
                Add => Addi,
                Sub => Subi,
                Cmp => Cmpi,
                _ => return None,
            };
            out.src2 = None;
            out.imm = Some(v);
        }
        (OperandSlot::Imm, Operand::Imm(v)) => {
            insn.imm?;
            out.imm = Some(v);
        }
        (OperandSlot::Imm, Operand::Reg(r)) => {
            insn.imm?;
            match insn.op {
                Addi => {
                    out.op = Add;
                    out.src2 = Some(r);
                }
                Subi => {
                    out.op = Sub;
                    out.src2 = Some(r);
                }
                Cmpi => {
                    out.op = Cmp;
                    out.src2 = Some(r);
                }
                Movi => {
                    out.op = Mov;
                    out.src1 = Some(r);
                }
                _ => return None,
            }
            out.imm = None;
        }
        (OperandSlot::Dest, Operand::Reg(r)) => {
            insn.write_reg()?;
            out.dest = Some(r);
        }
        (OperandSlot::Dest, Operand::Imm(_)) => return None,
    }
    Some(out)
}

/// The operand currently occupying a slot, if any.
pub fn slot_operand(insn: &Instruction, slot: OperandSlot) -> Option<Operand> {
    match slot {
        OperandSlot::Src1 => insn.src1.map(Operand::Reg),
        OperandSlot::Src2 => insn.src2.map(Operand::Reg),
        OperandSlot::Imm => insn.imm.map(Operand::Imm),
        OperandSlot::Dest => insn.write_reg().map(Operand::Reg),
    }
}
