//! Turns a pulse cycle into a concrete fault spec by drawing a family from
//! the profile and its targets from the in-flight window at that cycle.

use super::{
    apply_effects, substitute, substitution_slots, slot_operand, CompositeKind, CorruptKind,
    EffectProfile, Family, FaultEffect, FaultSpec, OperandSlot, RepeatedFamily,
};
use crate::isa::{Opcode, Program, RunResult, Trace};
use crate::timing::{inflight_at, operand_pool, pool_regs, Operand, TimedTrace};
use rand::Rng;

/// Outcome of sampling one pulse.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Sampled {
    Fault(FaultSpec),
    /// The device does not answer at all for this pulse.
    Mute,
    /// The drawn family found nothing to disturb at this cycle.
    NoEffect,
}

fn choose<T: Copy>(rng: &mut impl Rng, items: &[T]) -> T {
    items[rng.gen_range(0..items.len())]
}

/// `k` distinct elements, in their original relative order.
fn choose_k<T: Copy>(rng: &mut impl Rng, items: &[T], k: usize) -> Vec<T> {
    let mut remaining: Vec<usize> = (0..items.len()).collect();
    let mut picked = Vec::with_capacity(k);
    for _ in 0..k {
        picked.push(remaining.remove(rng.gen_range(0..remaining.len())));
    }
    picked.sort_unstable();
    picked.into_iter().map(|i| items[i]).collect()
}

/// A mask flipping one to four distinct bits.
fn flip_mask(rng: &mut impl Rng) -> u32 {
    let hw = rng.gen_range(1..=4usize);
    let bits: Vec<u32> = (0u32..32).collect();
    choose_k(rng, &bits, hw).into_iter().fold(0, |m, b| m | 1 << b)
}

fn corrupt_value(rng: &mut impl Rng, bitflip_share: f64) -> CorruptKind {
    if rng.gen::<f64>() < bitflip_share {
        CorruptKind::Flip(flip_mask(rng))
    } else {
        CorruptKind::Set(rng.gen::<u32>())
    }
}

/// Burst size for composite families: two targets plus one more per
/// successful coupling draw, capped by availability.
fn burst(rng: &mut impl Rng, available: usize, coupling: f64) -> usize {
    if available < 2 {
        return 0;
    }
    2 + (0..available - 2).filter(|_| rng.gen::<f64>() < coupling).count()
}

struct Window<'a> {
    program: &'a Program,
    trace: &'a Trace,
    inflight: Vec<usize>,
    regs: Vec<crate::isa::Reg>,
    pool: Vec<Operand>,
}

impl<'a> Window<'a> {
    fn instr(&self, dyn_idx: usize) -> &'a crate::isa::Instruction {
        &self.program.instructions[self.trace[dyn_idx].at]
    }

    /// (site, earlier) pairs where the earlier in-flight instruction can be
    /// meaningfully re-executed: only accumulating instructions (destination
    /// also a source, like `add r1, r1, #1`) change state when run twice, so
    /// replays of anything else would be invisible by construction.
    fn replay_pairs(&self) -> Vec<(usize, usize)> {
        let mut pairs = Vec::new();
        for &site in &self.inflight {
            for &earlier in self.inflight.iter().filter(|&&e| e < site) {
                let insn = self.instr(earlier);
                let accumulating =
                    insn.write_reg().is_some_and(|d| insn.reads().contains(&d));
                if accumulating && !insn.is_branch() && insn.op != Opcode::Halt {
                    pairs.push((site, earlier));
                }
            }
        }
        pairs
    }

    /// Whether a write to `reg` at `site` stays observable downstream: some
    /// later instruction reads it first, or it survives into the final dump.
    fn write_is_live(&self, site: usize, reg: crate::isa::Reg) -> bool {
        for later in site + 1..self.trace.len() {
            let insn = self.instr(later);
            if insn.reads().contains(&reg) {
                return true;
            }
            if insn.write_reg() == Some(reg) {
                return false;
            }
        }
        reg.index() < crate::isa::DUMPED_REGS
    }

    /// Value held by `reg` just before `site` executes, replayed from the
    /// fault-free trace.
    fn alive_value(&self, site: usize, reg: crate::isa::Reg) -> u32 {
        for earlier in (0..site).rev() {
            if let Some((r, v)) = self.trace[earlier].write {
                if r == reg {
                    return v;
                }
            }
        }
        crate::workloads::standard_regs()[reg.index()]
    }

    /// Pool registers whose upper half-word is populated at `site`, the only
    /// ones a most-significant-half-word reset can change.
    fn resettable_regs(&self, site: usize) -> Vec<crate::isa::Reg> {
        self.regs
            .iter()
            .copied()
            .filter(|&r| self.alive_value(site, r) & 0xFFFF_0000 != 0)
            .collect()
    }

    /// Valid replacements for one slot of one in-flight instruction. A
    /// destination may only be redirected to a register that is still read
    /// or dumped afterwards; clobbering a dead register is indistinguishable
    /// from skipping the instruction outright.
    fn slot_candidates(&self, dyn_idx: usize, slot: OperandSlot) -> Vec<Operand> {
        let insn = self.instr(dyn_idx);
        let current = slot_operand(insn, slot);
        self.pool
            .iter()
            .copied()
            .filter(|&op| Some(op) != current && substitute(insn, slot, op).is_some())
            .filter(|&op| {
                slot != OperandSlot::Dest
                    || matches!(op, Operand::Reg(r) if self.write_is_live(dyn_idx, r))
            })
            .collect()
    }

    /// All (site, slot) positions with at least one valid replacement.
    fn substitution_sites(&self) -> Vec<(usize, OperandSlot)> {
        let mut out = Vec::new();
        for &site in &self.inflight {
            for slot in substitution_slots(self.instr(site)) {
                if !self.slot_candidates(site, slot).is_empty() {
                    out.push((site, slot));
                }
            }
        }
        out
    }

    fn load_sites(&self) -> Vec<usize> {
        self.inflight.iter().copied().filter(|&i| self.instr(i).op == Opcode::Ldr).collect()
    }

    /// Entry indices of blocks reachable by some branch, the only landing
    /// pads ever observed for spurious edges.
    fn edge_targets(&self) -> Vec<usize> {
        self.program
            .blocks
            .iter()
            .filter(|b| b.is_branch_target)
            .map(|b| b.entry)
            .collect()
    }
}

fn window_at<'a>(
    program: &'a Program,
    trace: &'a Trace,
    tt: &TimedTrace,
    cycle: u32,
) -> Option<Window<'a>> {
    let inflight = match inflight_at(tt, cycle) {
        Ok(v) if !v.is_empty() => v,
        _ => return None,
    };
    let pool_set = operand_pool(program, trace, &inflight);
    Some(Window {
        program,
        trace,
        regs: pool_regs(&pool_set),
        pool: pool_set.into_iter().collect(),
        inflight,
    })
}

fn draw_family_idx(profile: &EffectProfile, rng: &mut impl Rng) -> usize {
    let weights = profile.weights();
    let total: f64 = weights.iter().sum();
    let mut x = rng.gen::<f64>() * total;
    for (i, wt) in weights.iter().enumerate() {
        if x < *wt {
            return i;
        }
        x -= wt;
    }
    weights.len() - 1
}

/// Samples one fault for a pulse at `cycle`, or reports silence.
/// Deterministic given the rng state; every target is drawn from the
/// in-flight window and its operand pool.
pub fn sample_fault(
    profile: &EffectProfile,
    program: &Program,
    trace: &Trace,
    tt: &TimedTrace,
    cycle: u32,
    rng: &mut impl Rng,
) -> Sampled {
    if profile.mute > 0.0 && rng.gen::<f64>() < profile.mute {
        return Sampled::Mute;
    }
    let Some(w) = window_at(program, trace, tt, cycle) else {
        return Sampled::NoEffect;
    };
    let family_idx = draw_family_idx(profile, rng);
    match sample_family(family_idx, profile, &w, rng) {
        Some((family, effects)) => Sampled::Fault(FaultSpec { cycle, family, effects }),
        None => Sampled::NoEffect,
    }
}

/// Whether a multi-effect spec is observationally degenerate: its joint
/// buffer equals the fault-free one or the buffer of one of its own
/// components alone.
fn collapses(
    program: &Program,
    init: [u32; 16],
    golden: &RunResult,
    effects: &[FaultEffect],
    budget: usize,
) -> bool {
    let joint = apply_effects(program, init, effects, budget);
    if !joint.halted() {
        // Crashes and runaways are legitimate composite outcomes.
        return false;
    }
    if joint.output == golden.output {
        return true;
    }
    let mut seen: Vec<&FaultEffect> = Vec::new();
    for e in effects {
        if seen.contains(&e) {
            continue;
        }
        seen.push(e);
        let solo = apply_effects(program, init, std::slice::from_ref(e), budget);
        if solo.halted() && solo.output == joint.output {
            return true;
        }
    }
    false
}

/// Samples like [`sample_fault`] but re-draws the targets of multi-effect
/// specs that would collapse onto a single component's buffer: a labelled
/// composite or mixed pulse must actually present as more than one fault.
/// The mute and family draws happen once, so their statistics are unchanged,
/// and single-effect draws consume the exact same rng stream as
/// [`sample_fault`].
pub fn sample_screened(
    profile: &EffectProfile,
    program: &Program,
    init: [u32; 16],
    golden: &RunResult,
    tt: &TimedTrace,
    cycle: u32,
    rng: &mut impl Rng,
) -> Sampled {
    if profile.mute > 0.0 && rng.gen::<f64>() < profile.mute {
        return Sampled::Mute;
    }
    let Some(w) = window_at(program, &golden.trace, tt, cycle) else {
        return Sampled::NoEffect;
    };
    let family_idx = draw_family_idx(profile, rng);
    let budget = (golden.trace.len() * 64).clamp(4096, 1_000_000);
    for _ in 0..8 {
        match sample_family(family_idx, profile, &w, rng) {
            None => return Sampled::NoEffect,
            Some((family, effects)) => {
                if effects.len() <= 1 || !collapses(program, init, golden, &effects, budget) {
                    return Sampled::Fault(FaultSpec { cycle, family, effects });
                }
            }
        }
    }
    Sampled::NoEffect
}

fn sample_family(
    family_idx: usize,
    profile: &EffectProfile,
    w: &Window<'_>,
    rng: &mut impl Rng,
) -> Option<(Family, Vec<FaultEffect>)> {
    match family_idx {
        0 => Some((
            Family::Skip,
            vec![FaultEffect::Skip { site: choose(rng, &w.inflight) }],
        )),
        1 => {
            let pairs = w.replay_pairs();
            if pairs.is_empty() {
                return None;
            }
            let (site, replayed) = choose(rng, &pairs);
            Some((Family::Replay, vec![FaultEffect::Replay { site, replayed }]))
        }
        2 => {
            if w.regs.is_empty() {
                return None;
            }
            let reg = choose(rng, &w.regs);
            let site = choose(rng, &w.inflight);
            let value = corrupt_value(rng, profile.bitflip_share);
            Some((
                Family::RegisterCorruption,
                vec![FaultEffect::RegisterCorruption { site, reg, value }],
            ))
        }
        3 => {
            let site = choose(rng, &w.inflight);
            let regs = w.resettable_regs(site);
            if regs.is_empty() {
                return None;
            }
            let reg = choose(rng, &regs);
            Some((Family::MshwReset, vec![FaultEffect::MshwReset { site, reg }]))
        }
        4 => {
            let sites = w.substitution_sites();
            if sites.is_empty() {
                return None;
            }
            let (site, slot) = choose(rng, &sites);
            let with = choose(rng, &w.slot_candidates(site, slot));
            Some((
                Family::OperandSubstitution,
                vec![FaultEffect::OperandSubstitution { site, slot, with }],
            ))
        }
        5 => {
            let sites = w.load_sites();
            if sites.is_empty() {
                return None;
            }
            let site = choose(rng, &sites);
            let value = corrupt_value(rng, profile.bitflip_share);
            Some((Family::LoadCorruption, vec![FaultEffect::LoadCorruption { site, value }]))
        }
        6 => {
            let targets = w.edge_targets();
            if targets.is_empty() {
                return None;
            }
            let site = choose(rng, &w.inflight);
            let target = choose(rng, &targets);
            Some((Family::MagicEdge, vec![FaultEffect::MagicEdge { site, target }]))
        }
        7 => {
            // Coupled skip+replay; falls back to a burst of plain skips
            // when no replayable earlier instruction shares the window.
            let pairs = w.replay_pairs();
            if !pairs.is_empty() {
                let (site, replayed) = choose(rng, &pairs);
                return Some((
                    Family::Composite(CompositeKind::SkipReplay),
                    vec![
                        FaultEffect::Skip { site },
                        FaultEffect::Replay { site, replayed },
                    ],
                ));
            }
            let k = burst(rng, w.inflight.len(), profile.coupling);
            if k < 2 {
                return None;
            }
            let sites = choose_k(rng, &w.inflight, k);
            Some((
                Family::Composite(CompositeKind::Repeated(RepeatedFamily::Skip)),
                sites.into_iter().map(|site| FaultEffect::Skip { site }).collect(),
            ))
        }
        8 => {
            let k = burst(rng, w.regs.len(), profile.coupling);
            if k < 2 {
                return None;
            }
            let regs = choose_k(rng, &w.regs, k);
            let site = choose(rng, &w.inflight);
            let mask = flip_mask(rng);
            Some((
                Family::Composite(CompositeKind::Correlated),
                regs.into_iter()
                    .map(|reg| FaultEffect::RegisterCorruption {
                        site,
                        reg,
                        value: CorruptKind::Flip(mask),
                    })
                    .collect(),
            ))
        }
        9 => {
            // One substitution per distinct site; several slots of the same
            // instruction would overwrite each other in the driver.
            let positions = w.substitution_sites();
            let mut sites: Vec<usize> = positions.iter().map(|&(s, _)| s).collect();
            sites.dedup();
            let k = burst(rng, sites.len(), profile.coupling);
            if k < 2 {
                return None;
            }
            let picked = choose_k(rng, &sites, k);
            let effects = picked
                .into_iter()
                .map(|site| {
                    let slots: Vec<OperandSlot> = positions
                        .iter()
                        .filter(|&&(s, _)| s == site)
                        .map(|&(_, slot)| slot)
                        .collect();
                    let slot = choose(rng, &slots);
                    FaultEffect::OperandSubstitution {
                        site,
                        slot,
                        with: choose(rng, &w.slot_candidates(site, slot)),
                    }
                })
                .collect();
            Some((
                Family::Composite(CompositeKind::Repeated(RepeatedFamily::OperandSubstitution)),
                effects,
            ))
        }
        10 => {
            let site = choose(rng, &w.inflight);
            let candidates = w.resettable_regs(site);
            let k = burst(rng, candidates.len(), profile.coupling);
            if k < 2 {
                return None;
            }
            let regs = choose_k(rng, &candidates, k);
            Some((
                Family::Composite(CompositeKind::Repeated(RepeatedFamily::MshwReset)),
                regs.into_iter().map(|reg| FaultEffect::MshwReset { site, reg }).collect(),
            ))
        }
        11 => {
            let sites = w.load_sites();
            let k = burst(rng, sites.len(), profile.coupling);
            if k < 2 {
                return None;
            }
            let picked = choose_k(rng, &sites, k);
            let value = corrupt_value(rng, profile.bitflip_share);
            Some((
                Family::Composite(CompositeKind::Repeated(RepeatedFamily::LoadCorruption)),
                picked.into_iter().map(|site| FaultEffect::LoadCorruption { site, value }).collect(),
            ))
        }
        _ => {
            // Two independent effects from distinct single families. When
            // the profile gives singles no weight, components are uniform.
            let mut singles = [
                (0usize, profile.skip),
                (1, profile.replay),
                (2, profile.register_corruption),
                (3, profile.mshw_reset),
                (4, profile.operand_substitution),
                (5, profile.load_corruption),
                (6, profile.magic_edge),
            ];
            if singles.iter().map(|(_, w)| w).sum::<f64>() <= 0.0 {
                for s in &mut singles {
                    s.1 = 1.0;
                }
            }
            let first = draw_weighted(&singles, rng)?;
            let rest: Vec<(usize, f64)> =
                singles.iter().copied().filter(|&(i, _)| i != first).collect();
            let second = draw_weighted(&rest, rng)?;
            let (_, mut a) = sample_family(first, profile, w, rng)?;
            let taken: Vec<usize> = a.iter().map(|e| e.site()).collect();
            // Independent sub-specs anchor at different instructions; a few
            // redraws avoid the same-site degenerate pair.
            let mut b = None;
            for _ in 0..8 {
                let (_, cand) = sample_family(second, profile, w, rng)?;
                if cand.iter().all(|e| !taken.contains(&e.site())) {
                    b = Some(cand);
                    break;
                }
            }
            a.extend(b?);
            Some((Family::Mixed, a))
        }
    }
}

fn draw_weighted(items: &[(usize, f64)], rng: &mut impl Rng) -> Option<usize> {
    let total: f64 = items.iter().map(|(_, w)| w).sum();
    if total <= 0.0 {
        return None;
    }
    let mut x = rng.gen::<f64>() * total;
    for &(i, wt) in items {
        if x < wt {
            return Some(i);
        }
        x -= wt;
    }
    items.last().map(|&(i, _)| i)
}
