//! Exhaustive single-fault sweeps against a hardened program: every
//! injection must end detected, masked, or fail-safe muted; anything that
//! silently changes the output buffer is reported as an escape.

use super::{HardenedProgram, DETECT_SENTINEL};
use crate::fault::{apply_fault, CorruptKind, FaultEffect, FaultSpec, Family};
use crate::isa::{run_with, OutputBuffer, Program, Reg, RunResult, Trace};
use crate::workloads::standard_regs;
use std::collections::BTreeSet;
use std::ops::Range;

/// Which elementary fault the sweep enumerates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SingleFamily {
    /// One instruction executes as a nop.
    Skip,
    /// One bit of one live register flips.
    BitFlip,
}

/// Which dynamic sites the sweep covers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SiteScope {
    /// Steps whose static instruction belongs to the exit-decision slice.
    ExitSlice,
    /// Every payload step.
    Payload,
}

/// How one injected fault ended.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FaultOutcome {
    /// The handler ran: the control word carries the sentinel.
    Detected,
    /// The run completed with a byte-identical output buffer.
    Masked,
    /// The run trapped or exhausted its budget instead of answering; a
    /// supervised device reads this as a reset, not a wrong answer.
    FailSafeMute,
    /// Wrong output buffer, no detection: the hardening was bypassed.
    Escaped,
}

/// Tally of an exhaustive sweep. `escaped` keeps the exact specs so a
/// bypass can be replayed.
#[derive(Clone, Debug, Default)]
pub struct DetectionReport {
    pub total: usize,
    pub detected: usize,
    pub masked: usize,
    pub fail_safe: usize,
    pub escaped: Vec<FaultSpec>,
}

impl DetectionReport {
    /// Detected over faults that mattered (detected plus escaped); masked
    /// and fail-safe runs never produce a wrong answer.
    pub fn detection_rate(&self) -> f64 {
        let denom = self.detected + self.escaped.len();
        if denom == 0 {
            1.0
        } else {
            self.detected as f64 / denom as f64
        }
    }

    pub fn all_covered(&self) -> bool {
        self.escaped.is_empty()
    }

    fn count(&mut self, outcome: FaultOutcome, spec: &FaultSpec) {
        self.total += 1;
        match outcome {
            FaultOutcome::Detected => self.detected += 1,
            FaultOutcome::Masked => self.masked += 1,
            FaultOutcome::FailSafeMute => self.fail_safe += 1,
            FaultOutcome::Escaped => self.escaped.push(spec.clone()),
        }
    }
}

/// First word of the named region inside a captured buffer.
pub fn region_word(program: &Program, buf: &OutputBuffer, name: &str) -> Option<u32> {
    let mut off = 0usize;
    for r in &program.regions {
        if r.name == name {
            return buf.mem.get(off).copied();
        }
        off += r.len as usize;
    }
    None
}

/// Classifies one faulted run against the fault-free reference.
pub fn judge_run(program: &Program, golden: &OutputBuffer, run: &RunResult) -> FaultOutcome {
    if region_word(program, &run.output, "ctrl") == Some(DETECT_SENTINEL) {
        FaultOutcome::Detected
    } else if !run.halted() {
        FaultOutcome::FailSafeMute
    } else if run.output == *golden {
        FaultOutcome::Masked
    } else {
        FaultOutcome::Escaped
    }
}

/// Registers whose value still matters right before each dynamic step:
/// read by a later payload instruction before being overwritten. The dump
/// epilogue kills but never generates, so registers that only feed the dump
/// do not count as live.
fn live_before(trace: &Trace, program: &Program, payload: &Range<usize>) -> Vec<BTreeSet<Reg>> {
    let mut live: BTreeSet<Reg> = BTreeSet::new();
    let mut out = vec![BTreeSet::new(); trace.len()];
    for k in (0..trace.len()).rev() {
        let at = trace[k].at;
        let insn = &program.instructions[at];
        if let Some(w) = insn.write_reg() {
            live.remove(&w);
        }
        if payload.contains(&at) {
            live.extend(insn.reads());
        }
        out[k] = live.clone();
    }
    out
}

/// Sweeps every fault of the given family over the given sites of the
/// fault-free trace and tallies how each injection ends.
pub fn verify_detection(
    hp: &HardenedProgram,
    family: SingleFamily,
    scope: SiteScope,
) -> DetectionReport {
    let program = &hp.workload.program;
    let golden = run_with(program, standard_regs(), 1_000_000);
    assert!(golden.halted(), "{}: fault-free run must halt", hp.workload.name);
    // Loose enough for detours into the handler, tight enough that a
    // corrupted loop bound shows up as a budget mute, not a long stall.
    let budget = golden.trace.len() * 10 + 256;

    let statics: BTreeSet<usize> = match scope {
        SiteScope::ExitSlice => hp.exit_slice.clone(),
        SiteScope::Payload => hp.workload.meta.payload.clone().collect(),
    };
    let sites: Vec<usize> = golden
        .trace
        .iter()
        .enumerate()
        .filter(|(_, e)| statics.contains(&e.at))
        .map(|(s, _)| s)
        .collect();

    let mut report = DetectionReport::default();
    let run_one = |spec: FaultSpec, report: &mut DetectionReport| {
        let run = apply_fault(program, standard_regs(), &spec, budget);
        report.count(judge_run(program, &golden.output, &run), &spec);
    };

    match family {
        SingleFamily::Skip => {
            for &site in &sites {
                let spec = FaultSpec {
                    cycle: site as u32,
                    family: Family::Skip,
                    effects: vec![FaultEffect::Skip { site }],
                };
                run_one(spec, &mut report);
            }
        }
        SingleFamily::BitFlip => {
            let live = live_before(&golden.trace, program, &hp.workload.meta.payload);
            for &site in &sites {
                for &reg in &live[site] {
                    for bit in 0..32 {
                        let spec = FaultSpec {
                            cycle: site as u32,
                            family: Family::RegisterCorruption,
                            effects: vec![FaultEffect::RegisterCorruption {
                                site,
                                reg,
                                value: CorruptKind::Flip(1 << bit),
                            }],
                        };
                        run_one(spec, &mut report);
                    }
                }
            }
        }
    }
    report
}
