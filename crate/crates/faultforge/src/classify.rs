//! After-the-fact diagnosis of corrupted answer buffers: searches candidate
//! fault specs family by family and returns the first one whose driven run
//! reproduces the recorded buffer byte for byte.

use crate::campaign::{CampaignResult, InjectionRecord, Outcome, RUN_BUDGET};
use crate::fault::{
    apply_effects, slot_operand, substitute, substitution_slots, CompositeKind, CorruptKind,
    Family, FaultEffect, FaultSpec, OperandSlot, RepeatedFamily,
};
use crate::harden::{harden, HardenError, Scheme};
use crate::isa::{run_with, Opcode, Program, Reg, RunResult, DUMPED_REGS};
use crate::timing::{
    inflight_at, operand_pool, pool_regs, schedule, Operand, TimedTrace, TimingConfig,
};
use crate::workloads::{build, standard_regs, Workload, WorkloadKind};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

/// Register-word buffer diffs probed when deriving corruption values.
const REG_DIFF_PROBES: usize = 4;
/// Memory-word buffer diffs probed when deriving corruption values; stored
/// words carry corrupted values more directly than leftover register state.
const MEM_DIFF_PROBES: usize = 8;
/// Partial explanations kept around for composite and mixed searches.
const MAX_PARTIALS: usize = 96;
/// Partial explanations considered when pairing mixed candidates.
const MIXED_POOL: usize = 14;

/// Why a campaign could not be rebuilt for classification.
#[derive(Debug, Error)]
pub enum ClassifyError {
    #[error("unknown workload `{0}`")]
    UnknownWorkload(String),
    #[error("unknown hardening scheme `{0}`")]
    UnknownScheme(String),
    #[error("cannot harden `{workload}` with `{scheme}`")]
    Harden {
        workload: String,
        scheme: String,
        #[source]
        source: HardenError,
    },
    #[error("fault-free run of `{0}` did not halt")]
    CleanRunDiverged(String),
}

/// Verdict for one record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Verdict {
    /// This spec, driven from the clean start state, reproduces the recorded
    /// buffer byte for byte.
    Explained { spec: FaultSpec },
    /// Nothing to explain: the record carries no buffer (mute) or the buffer
    /// equals the fault-free answer.
    NotApplicable,
    /// No candidate in the search space reproduces the buffer.
    Unexplained,
}

impl Verdict {
    /// Family label of the reproducing spec, if any.
    pub fn label(&self) -> Option<&'static str> {
        match self {
            Verdict::Explained { spec } => Some(spec.family.label()),
            _ => None,
        }
    }
}

/// Reusable context for explaining records of one campaign: the program, its
/// fault-free run, and the pipeline timing the pulses were drawn against.
pub struct Classifier<'a> {
    program: &'a Program,
    golden: &'a RunResult,
    tt: TimedTrace,
    golden_words: Vec<u32>,
    golden_bytes: Vec<u8>,
    /// Step budget for candidate runs: generous next to the clean step
    /// count, yet small enough that runaway candidates fail fast.
    budget: usize,
    /// Extra cycles searched on each side of the recorded pulse cycle.
    window: u32,
}

impl<'a> Classifier<'a> {
    /// Builds a classifier over one program and its fault-free run. `seed`
    /// must be the campaign seed so the rebuilt timing matches the sampler's.
    pub fn new(
        program: &'a Program,
        golden: &'a RunResult,
        timing: &TimingConfig,
        seed: u64,
        window: u32,
    ) -> Classifier<'a> {
        let tt = schedule(program, &golden.trace, timing, seed);
        let mut golden_words = golden.output.regs.clone();
        golden_words.extend_from_slice(&golden.output.mem);
        let golden_bytes = golden.output.to_bytes();
        let budget = (golden.trace.len() * 64).clamp(4096, RUN_BUDGET);
        Classifier { program, golden, tt, golden_words, golden_bytes, budget, window }
    }

    /// Dynamic instruction indices a pulse at `cycle` could have touched,
    /// widened by the configured search window.
    fn sites_for(&self, cycle: u32) -> Vec<usize> {
        if self.tt.total_cycles == 0 {
            return Vec::new();
        }
        let lo = cycle.saturating_sub(self.window);
        let hi = cycle.saturating_add(self.window).min(self.tt.total_cycles - 1);
        let mut set = BTreeSet::new();
        for c in lo..=hi {
            if let Ok(idxs) = inflight_at(&self.tt, c) {
                set.extend(idxs);
            }
        }
        set.into_iter().collect()
    }

    /// Explains one record, trying families in a fixed priority order and
    /// stopping at the first byte-exact reproduction.
    pub fn classify(&self, record: &InjectionRecord) -> Verdict {
        match self.search(record) {
            Some(mut s) => match s.explain() {
                Some((family, effects)) => Verdict::Explained {
                    spec: FaultSpec { cycle: record.cycle, family, effects },
                },
                None => Verdict::Unexplained,
            },
            None => Verdict::NotApplicable,
        }
    }

    /// First byte-exact witness per elementary family, searching all of them
    /// rather than stopping at the first. Used to judge whether a record
    /// pins down its family uniquely.
    pub fn single_family_witnesses(&self, record: &InjectionRecord) -> Vec<FaultSpec> {
        let Some(mut s) = self.search(record) else { return Vec::new() };
        let mut out = Vec::new();
        let witnesses = [
            s.try_skip(),
            s.try_substitution(),
            s.try_mshw(),
            s.try_register_corruption(None),
            s.try_load_corruption(),
            s.try_magic_edge(),
        ];
        for w in witnesses.into_iter().flatten() {
            out.push(FaultSpec { cycle: record.cycle, family: w.0, effects: w.1 });
        }
        out
    }

    /// Sets up the per-record search state, or `None` when the record has no
    /// corrupted buffer to explain.
    fn search(&self, record: &InjectionRecord) -> Option<Search<'_>> {
        let hex = record.buffer.as_deref()?;
        let bytes = decode_hex(hex)?;
        if bytes == self.golden_bytes {
            return None;
        }
        let words: Vec<u32> = bytes
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let diffs: Vec<(usize, u32, u32)> = words
            .iter()
            .zip(&self.golden_words)
            .enumerate()
            .filter(|(_, (o, g))| o != g)
            .map(|(i, (&o, &g))| (i, o, g))
            .collect();
        let diff_idx: BTreeSet<usize> = diffs.iter().map(|&(i, _, _)| i).collect();
        let sites = self.sites_for(record.cycle);
        if sites.is_empty() {
            return None;
        }
        let pool = operand_pool(self.program, &self.golden.trace, &sites);
        let regs = pool_regs(&pool);
        let states = self.site_states(&sites);
        Some(Search {
            c: self,
            sites,
            pool,
            regs,
            states,
            target_bytes: bytes,
            target_words: words,
            diffs,
            diff_idx,
            partials: Vec::new(),
        })
    }

    /// Register file, last-writer and load-taint tables just before each
    /// candidate site, replayed from the fault-free trace without re-executing.
    fn site_states(&self, sites: &[usize]) -> BTreeMap<usize, SiteState> {
        let site_set: BTreeSet<usize> = sites.iter().copied().collect();
        let mut out = BTreeMap::new();
        let mut regs = standard_regs();
        let mut load_taint = [false; 16];
        let mut want = site_set.clone();
        for (i, entry) in self.golden.trace.iter().enumerate() {
            if want.remove(&i) {
                out.insert(i, SiteState { regs, load_taint });
                if want.is_empty() {
                    break;
                }
            }
            if let Some((r, v)) = entry.write {
                let insn = &self.program.instructions[self.golden.trace[i].at];
                // Taint marks values an in-window load produced, tracked
                // through value-preserving arithmetic: corrupting such a
                // register is observationally a corrupted load.
                load_taint[r.index()] = match insn.op {
                    Opcode::Ldr => site_set.contains(&i),
                    Opcode::Mov | Opcode::Add | Opcode::Addi | Opcode::Sub | Opcode::Subi => {
                        insn.reads().iter().any(|s| load_taint[s.index()])
                    }
                    _ => false,
                };
                regs[r.index()] = v;
            }
        }
        out
    }
}

/// Architectural state snapshot ahead of one dynamic instruction.
#[derive(Clone, Copy)]
struct SiteState {
    regs: [u32; 16],
    /// Per register, whether its value derives from an in-window load.
    load_taint: [bool; 16],
}

/// A candidate whose run corrupts a subset of the words the record corrupts;
/// raw material for composite and mixed explanations.
struct Partial {
    family: Family,
    effects: Vec<FaultEffect>,
    covered: BTreeSet<usize>,
}

/// Which families feed the descent's per-site option sets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum OptionFamilies {
    /// Operand substitutions only: the effective space of the heaviest
    /// repeated family, searched first so its label stays honest.
    Substitutions,
    All,
}

/// What one candidate run looked like against the target buffer.
struct Probe {
    exact: bool,
    /// Corrupted word positions, when they are a non-empty subset of the
    /// target's.
    covered: Option<BTreeSet<usize>>,
}



struct Search<'a> {
    c: &'a Classifier<'a>,
    sites: Vec<usize>,
    pool: BTreeSet<Operand>,
    regs: Vec<Reg>,
    states: BTreeMap<usize, SiteState>,
    target_bytes: Vec<u8>,
    target_words: Vec<u32>,
    diffs: Vec<(usize, u32, u32)>,
    diff_idx: BTreeSet<usize>,
    partials: Vec<Partial>,
}

impl Search<'_> {
    fn instr(&self, dyn_idx: usize) -> &crate::isa::Instruction {
        &self.c.program.instructions[self.c.golden.trace[dyn_idx].at]
    }

    /// Drives a candidate set and reports its word distance to the target.
    fn run_dist(&self, effects: &[FaultEffect]) -> usize {
        let run = apply_effects(self.c.program, standard_regs(), effects, self.c.budget);
        run.output
            .regs
            .iter()
            .chain(&run.output.mem)
            .zip(&self.target_words)
            .filter(|(w, t)| w != t)
            .count()
    }

    /// Drives one candidate and scores it against the target buffer.
    fn probe(&mut self, effects: &[FaultEffect], family: Family) -> Probe {
        let run = apply_effects(self.c.program, standard_regs(), effects, self.c.budget);
        let bytes = run.output.to_bytes();
        if bytes == self.target_bytes {
            return Probe { exact: true, covered: None };
        }
        let mut covered = None;
        if run.halted() {
            let words = run.output.regs.iter().chain(&run.output.mem);
            let hit: BTreeSet<usize> = words
                .zip(&self.c.golden_words)
                .enumerate()
                .filter(|(_, (o, g))| o != g)
                .map(|(i, _)| i)
                .collect();
            if !hit.is_empty() && hit.is_subset(&self.diff_idx) {
                if self.partials.len() < MAX_PARTIALS {
                    self.partials.push(Partial {
                        family,
                        effects: effects.to_vec(),
                        covered: hit.clone(),
                    });
                }
                covered = Some(hit);
            }
        }
        Probe { exact: false, covered }
    }

    fn check(&mut self, effects: &[FaultEffect], family: Family) -> bool {
        self.probe(effects, family).exact
    }

    /// Buffer diffs worth probing: a few register words plus a deeper slice
    /// of memory words, which record corrupted values at the point of store.
    fn probe_diffs(&self) -> impl Iterator<Item = &(usize, u32, u32)> {
        let regs = self.diffs.iter().filter(|(i, _, _)| *i < DUMPED_REGS).take(REG_DIFF_PROBES);
        let mem = self.diffs.iter().filter(|(i, _, _)| *i >= DUMPED_REGS).take(MEM_DIFF_PROBES);
        regs.chain(mem)
    }

    /// Plausible corrupted values for a quantity whose clean value is `base`,
    /// derived from the observed buffer damage: the damaged word itself, and
    /// the xor or additive delta folded back onto `base`.
    fn derived_values(&self, base: u32) -> Vec<u32> {
        let mut vals = Vec::new();
        for &(_, obs, gold) in self.probe_diffs() {
            fold_damage(base, obs, gold, &mut vals);
        }
        vals
    }

    /// Index of the output-buffer word backing memory address `addr`.
    fn word_of_addr(&self, addr: u32) -> Option<usize> {
        let mut idx = DUMPED_REGS;
        for region in &self.c.program.regions {
            if region.contains(addr) {
                return Some(idx + (addr - region.base) as usize);
            }
            idx += region.len as usize;
        }
        None
    }

    /// Plausible corrupted values for the load at `site`, whose clean result
    /// is `loaded`. The damaged words its own iteration stored are probed
    /// first: they reflect the corrupted value exactly, even when damage from
    /// an unrelated effect pollutes the rest of the buffer.
    fn load_values(&self, site: usize, loaded: u32) -> Vec<u32> {
        let mut vals = Vec::new();
        let trace = &self.c.golden.trace;
        let mut stores = 0;
        for entry in trace.iter().skip(site + 1).take(16) {
            let Some((addr, _)) = entry.store else { continue };
            if let Some(w) = self.word_of_addr(addr) {
                if let Some(&(_, obs, gold)) = self.diffs.iter().find(|(i, _, _)| *i == w) {
                    fold_damage(loaded, obs, gold, &mut vals);
                }
            }
            stores += 1;
            if stores == 2 {
                break;
            }
        }
        for v in self.derived_values(loaded) {
            if !vals.contains(&v) {
                vals.push(v);
            }
        }
        vals
    }

    /// Flip masks suggested by the buffer damage, for correlated searches.
    fn diff_masks(&self) -> Vec<u32> {
        let mut masks = Vec::new();
        for &(_, obs, gold) in self.probe_diffs() {
            let m = obs ^ gold;
            if (1..=4).contains(&m.count_ones()) && !masks.contains(&m) {
                masks.push(m);
            }
        }
        masks.truncate(6);
        masks
    }

    /// Full priority search: elementary families, then composites, then a
    /// mixed pair assembled from partial explanations.
    fn explain(&mut self) -> Option<(Family, Vec<FaultEffect>)> {
        self.try_skip()
            .or_else(|| self.try_substitution())
            .or_else(|| self.try_mshw())
            .or_else(|| self.try_register_corruption(Some(false)))
            .or_else(|| self.try_load_corruption())
            .or_else(|| self.try_register_corruption(Some(true)))
            .or_else(|| self.try_magic_edge())
            .or_else(|| self.try_skip_replay())
            .or_else(|| self.try_correlated())
            .or_else(|| self.try_repeated_skip())
            .or_else(|| self.try_repeated_substitution())
            .or_else(|| self.try_repeated_mshw())
            .or_else(|| self.try_repeated_load())
            .or_else(|| self.try_mixed())
            .or_else(|| self.descend(OptionFamilies::Substitutions))
            .or_else(|| self.beam(OptionFamilies::Substitutions))
            .or_else(|| self.descend(OptionFamilies::All))
            .or_else(|| self.beam(OptionFamilies::All))
    }

    fn try_skip(&mut self) -> Option<(Family, Vec<FaultEffect>)> {
        let family = Family::Skip;
        for &site in &self.sites.clone() {
            let effects = vec![FaultEffect::Skip { site }];
            if self.check(&effects, family) {
                return Some((family, effects));
            }
        }
        None
    }

    /// Mirrors the sampler's rule: a destination is only redirected to a
    /// register that is read again or dumped before being overwritten, since
    /// a dead clobber is just a skip under another name.
    fn dest_is_live(&self, site: usize, reg: Reg) -> bool {
        for later in site + 1..self.c.golden.trace.len() {
            let insn = self.instr(later);
            if insn.reads().contains(&reg) {
                return true;
            }
            if insn.write_reg() == Some(reg) {
                return false;
            }
        }
        reg.index() < DUMPED_REGS
    }

    /// Valid substitution candidates for one slot, matching what the sampler
    /// could have drawn there.
    fn slot_options(&self, site: usize, slot: OperandSlot) -> Vec<Operand> {
        let insn = self.instr(site);
        let current = slot_operand(insn, slot);
        self.pool
            .iter()
            .copied()
            .filter(|&with| Some(with) != current && substitute(insn, slot, with).is_some())
            .filter(|&with| {
                slot != OperandSlot::Dest
                    || matches!(with, Operand::Reg(r) if self.dest_is_live(site, r))
            })
            .collect()
    }

    fn try_substitution(&mut self) -> Option<(Family, Vec<FaultEffect>)> {
        let family = Family::OperandSubstitution;
        for &site in &self.sites.clone() {
            let insn = self.instr(site).clone();
            for slot in substitution_slots(&insn) {
                for with in self.slot_options(site, slot) {
                    let effects = vec![FaultEffect::OperandSubstitution { site, slot, with }];
                    if self.check(&effects, family) {
                        return Some((family, effects));
                    }
                }
            }
        }
        None
    }

    fn try_mshw(&mut self) -> Option<(Family, Vec<FaultEffect>)> {
        let family = Family::MshwReset;
        for &site in &self.sites.clone() {
            for &reg in &self.regs.clone() {
                let effects = vec![FaultEffect::MshwReset { site, reg }];
                if self.check(&effects, family) {
                    return Some((family, effects));
                }
            }
        }
        None
    }

    /// Single-register corruption search. `taint` narrows the candidates to
    /// load-derived registers (`Some(true)`), everything else (`Some(false)`),
    /// or no restriction (`None`): corrupting a load-derived value is
    /// observationally a corrupted load, so those pairs are retried only
    /// after the load family had its chance.
    fn try_register_corruption(&mut self, taint: Option<bool>) -> Option<(Family, Vec<FaultEffect>)> {
        let family = Family::RegisterCorruption;
        for &site in &self.sites.clone() {
            let Some(state) = self.states.get(&site).copied() else { continue };
            for &reg in &self.regs.clone() {
                if taint.is_some_and(|t| state.load_taint[reg.index()] != t) {
                    continue;
                }
                let alive = state.regs[reg.index()];
                for v in self.derived_values(alive) {
                    let effects = vec![FaultEffect::RegisterCorruption {
                        site,
                        reg,
                        value: kindify(alive, v),
                    }];
                    if self.check(&effects, family) {
                        return Some((family, effects));
                    }
                }
            }
        }
        None
    }

    fn try_load_corruption(&mut self) -> Option<(Family, Vec<FaultEffect>)> {
        let family = Family::LoadCorruption;
        for &site in &self.load_sites() {
            let Some((_, loaded)) = self.c.golden.trace[site].write else { continue };
            for v in self.load_values(site, loaded) {
                let effects = vec![FaultEffect::LoadCorruption { site, value: kindify(loaded, v) }];
                if self.check(&effects, family) {
                    return Some((family, effects));
                }
            }
        }
        None
    }

    fn try_magic_edge(&mut self) -> Option<(Family, Vec<FaultEffect>)> {
        let family = Family::MagicEdge;
        let targets: Vec<usize> = self
            .c
            .program
            .blocks
            .iter()
            .filter(|b| b.is_branch_target)
            .map(|b| b.entry)
            .collect();
        for &site in &self.sites.clone() {
            for &target in &targets {
                let effects = vec![FaultEffect::MagicEdge { site, target }];
                if self.check(&effects, family) {
                    return Some((family, effects));
                }
            }
        }
        None
    }

    fn try_skip_replay(&mut self) -> Option<(Family, Vec<FaultEffect>)> {
        let family = Family::Composite(CompositeKind::SkipReplay);
        for &site in &self.sites.clone() {
            for &earlier in &self.sites.clone() {
                if earlier >= site {
                    continue;
                }
                let insn = self.instr(earlier);
                if insn.is_branch() || insn.op == Opcode::Halt {
                    continue;
                }
                let effects = vec![
                    FaultEffect::Skip { site },
                    FaultEffect::Replay { site, replayed: earlier },
                ];
                if self.check(&effects, family) {
                    return Some((family, effects));
                }
            }
        }
        None
    }

    fn try_correlated(&mut self) -> Option<(Family, Vec<FaultEffect>)> {
        let family = Family::Composite(CompositeKind::Correlated);
        let masks = self.diff_masks();
        for &site in &self.sites.clone() {
            for &mask in &masks {
                let mut members = Vec::new();
                for &reg in &self.regs.clone() {
                    let effects =
                        vec![FaultEffect::RegisterCorruption { site, reg, value: CorruptKind::Flip(mask) }];
                    let probe = self.probe(&effects, Family::RegisterCorruption);
                    if probe.exact {
                        return Some((Family::RegisterCorruption, effects));
                    }
                    if probe.covered.is_some() {
                        members.push(reg);
                    }
                }
                members.truncate(5);
                if members.len() >= 2 {
                    let combined = corrupt_all(site, &members, mask);
                    if self.check(&combined, family) {
                        return Some((family, combined));
                    }
                    for i in 0..members.len() {
                        for j in i + 1..members.len() {
                            let pair = corrupt_all(site, &[members[i], members[j]], mask);
                            if self.check(&pair, family) {
                                return Some((family, pair));
                            }
                        }
                    }
                }
            }
        }
        None
    }

    fn try_repeated_skip(&mut self) -> Option<(Family, Vec<FaultEffect>)> {
        let family = Family::Composite(CompositeKind::Repeated(RepeatedFamily::Skip));
        let sites = self.sites.clone();
        let mut partial_pairs = Vec::new();
        for i in 0..sites.len() {
            for j in i + 1..sites.len() {
                let effects =
                    vec![FaultEffect::Skip { site: sites[i] }, FaultEffect::Skip { site: sites[j] }];
                let probe = self.probe(&effects, family);
                if probe.exact {
                    return Some((family, effects));
                }
                if probe.covered.is_some() && partial_pairs.len() < 12 {
                    partial_pairs.push((sites[i], sites[j]));
                }
            }
        }
        let mut budget = 120usize;
        for (a, b) in partial_pairs {
            for &third in &sites {
                if third == a || third == b || budget == 0 {
                    continue;
                }
                budget -= 1;
                let mut at = [a, b, third];
                at.sort_unstable();
                let effects: Vec<FaultEffect> =
                    at.iter().map(|&site| FaultEffect::Skip { site }).collect();
                if self.check(&effects, family) {
                    return Some((family, effects));
                }
            }
        }
        None
    }

    fn try_repeated_substitution(&mut self) -> Option<(Family, Vec<FaultEffect>)> {
        let family = Family::Composite(CompositeKind::Repeated(RepeatedFamily::OperandSubstitution));
        let parts = self.top_partials(|f| {
            matches!(f, Family::OperandSubstitution)
        });
        if let Some(hit) = self.greedy_combine(&parts, family) {
            return Some((family, hit));
        }
        self.pair_combine(&parts, family).map(|e| (family, e))
    }

    fn try_repeated_mshw(&mut self) -> Option<(Family, Vec<FaultEffect>)> {
        let family = Family::Composite(CompositeKind::Repeated(RepeatedFamily::MshwReset));
        for &site in &self.sites.clone() {
            let mut members = Vec::new();
            for &reg in &self.regs.clone() {
                let effects = vec![FaultEffect::MshwReset { site, reg }];
                if self
                    .probe(&effects, Family::MshwReset)
                    .covered
                    .is_some()
                {
                    members.push(reg);
                }
            }
            members.truncate(5);
            if members.len() >= 2 {
                let combined: Vec<FaultEffect> = members
                    .iter()
                    .map(|&reg| FaultEffect::MshwReset { site, reg })
                    .collect();
                if self.check(&combined, family) {
                    return Some((family, combined));
                }
                for i in 0..members.len() {
                    for j in i + 1..members.len() {
                        let pair = vec![
                            FaultEffect::MshwReset { site, reg: members[i] },
                            FaultEffect::MshwReset { site, reg: members[j] },
                        ];
                        if self.check(&pair, family) {
                            return Some((family, pair));
                        }
                    }
                }
            }
        }
        None
    }

    fn try_repeated_load(&mut self) -> Option<(Family, Vec<FaultEffect>)> {
        let family = Family::Composite(CompositeKind::Repeated(RepeatedFamily::LoadCorruption));
        let loads = self.load_sites();
        if loads.len() < 2 {
            return None;
        }
        // The burst shares one corruption; collect kind candidates from every
        // load's own plausible values.
        let mut kinds: Vec<CorruptKind> = Vec::new();
        for &site in &loads {
            let Some((_, loaded)) = self.c.golden.trace[site].write else { continue };
            for v in self.load_values(site, loaded) {
                let k = kindify(loaded, v);
                if !kinds.contains(&k) {
                    kinds.push(k);
                }
            }
        }
        kinds.truncate(10);
        for kind in kinds {
            let mut members = Vec::new();
            for &site in &loads {
                let effects = vec![FaultEffect::LoadCorruption { site, value: kind }];
                if self
                    .probe(&effects, Family::LoadCorruption)
                    .covered
                    .is_some()
                {
                    members.push(site);
                }
            }
            if members.len() >= 2 {
                let combined: Vec<FaultEffect> = members
                    .iter()
                    .map(|&site| FaultEffect::LoadCorruption { site, value: kind })
                    .collect();
                if self.check(&combined, family) {
                    return Some((family, combined));
                }
            }
            for i in 0..loads.len() {
                for j in i + 1..loads.len() {
                    let pair = vec![
                        FaultEffect::LoadCorruption { site: loads[i], value: kind },
                        FaultEffect::LoadCorruption { site: loads[j], value: kind },
                    ];
                    if self.check(&pair, family) {
                        return Some((family, pair));
                    }
                }
            }
        }
        None
    }

    fn try_mixed(&mut self) -> Option<(Family, Vec<FaultEffect>)> {
        let family = Family::Mixed;
        let parts = self.top_partials(|f| !matches!(f, Family::Composite(_) | Family::Mixed));
        let mut budget = 120usize;
        for i in 0..parts.len() {
            for j in i + 1..parts.len() {
                if parts[i].0 == parts[j].0 || budget == 0 {
                    continue;
                }
                budget -= 1;
                let mut effects = parts[i].1.clone();
                effects.extend(parts[j].1.iter().cloned());
                effects.sort_by_key(|e| e.site());
                if self.check(&effects, family) {
                    return Some((family, effects));
                }
            }
        }
        None
    }

    /// Last-resort assembly for interacting bursts. The driver keeps at
    /// most one effective skip, substitution or load override per site, so
    /// large bursts reduce to "one choice per in-flight site"; coordinate
    /// descent sweeps the sites, re-driving the whole combination for every
    /// local option and keeping whatever brings the buffer closest to the
    /// target. Solo behavior never has to be meaningful for this to work.
    fn descend(&mut self, families: OptionFamilies) -> Option<(Family, Vec<FaultEffect>)> {
        let options = self.site_options(families);
        let sites: Vec<usize> = options.keys().copied().collect();
        let mut choice: BTreeMap<usize, Option<usize>> = sites.iter().map(|&s| (s, None)).collect();
        let assemble = |choice: &BTreeMap<usize, Option<usize>>| -> Vec<FaultEffect> {
            choice
                .iter()
                .filter_map(|(&site, &opt)| opt.map(|o| options[&site][o].clone()))
                .collect()
        };
        let mut dist = self.diff_idx.len();
        let debug = std::env::var("FAULTFORGE_TRACE_DESCENT").is_ok();
        // Per site, the strongest few options seen in the latest sweep; raw
        // material for two-site escapes out of local minima.
        let mut scored: BTreeMap<usize, Vec<(usize, Option<usize>)>> = BTreeMap::new();
        let mut escapes = 3u32;
        for sweep in 0..12 {
            let mut improved = false;
            for &site in &sites {
                let saved = choice[&site];
                let mut best = (dist, saved);
                let mut ranked: Vec<(usize, Option<usize>)> = vec![(dist, saved)];
                let n = options[&site].len();
                for opt in std::iter::once(None).chain((0..n).map(Some)) {
                    if opt == saved {
                        continue;
                    }
                    *choice.get_mut(&site).unwrap() = opt;
                    let d = self.run_dist(&assemble(&choice));
                    ranked.push((d, opt));
                    if d < best.0 {
                        best = (d, opt);
                    }
                }
                ranked.sort_by_key(|&(d, _)| d);
                ranked.truncate(4);
                scored.insert(site, ranked);
                *choice.get_mut(&site).unwrap() = best.1;
                if best.0 < dist {
                    dist = best.0;
                    improved = true;
                }
                if dist == 0 {
                    let mut effects = assemble(&choice);
                    effects.sort_by_key(|e| e.site());
                    let family = family_of_set(&effects);
                    return Some((family, effects));
                }
            }
            if debug {
                eprintln!("descent {families:?} sweep {sweep}: dist {dist}");
            }
            if !improved {
                // Compensating wrong choices at two sites block all single
                // moves; retry with coordinated changes at site pairs.
                if escapes == 0 || dist > 6 {
                    break;
                }
                escapes -= 1;
                'pairs: for i in 0..sites.len() {
                    for j in i + 1..sites.len() {
                        let (sa, sb) = (sites[i], sites[j]);
                        let (va, vb) = (choice[&sa], choice[&sb]);
                        for &(_, oa) in scored.get(&sa).into_iter().flatten() {
                            for &(_, ob) in scored.get(&sb).into_iter().flatten() {
                                if oa == va && ob == vb {
                                    continue;
                                }
                                *choice.get_mut(&sa).unwrap() = oa;
                                *choice.get_mut(&sb).unwrap() = ob;
                                let d = self.run_dist(&assemble(&choice));
                                if d < dist {
                                    dist = d;
                                    improved = true;
                                    break 'pairs;
                                }
                            }
                        }
                        *choice.get_mut(&sa).unwrap() = va;
                        *choice.get_mut(&sb).unwrap() = vb;
                    }
                }
                if !improved {
                    break;
                }
                if debug {
                    eprintln!("descent {families:?} escape: dist {dist}");
                }
                if dist == 0 {
                    let mut effects = assemble(&choice);
                    effects.sort_by_key(|e| e.site());
                    let family = family_of_set(&effects);
                    return Some((family, effects));
                }
            }
        }
        if debug {
            eprintln!("descent {families:?} stuck at {dist}: {:?}", assemble(&choice));
        }
        None
    }

    /// Fallback for dense multi-effect damage that defeats coordinate
    /// descent: extend partial assignments site by site in execution order,
    /// keeping the closest few at each step. Damage surfaces in the buffer at
    /// each iteration's store, so a prefix's distance ranks its candidates
    /// meaningfully even while later sites stay clean.
    fn beam(&mut self, families: OptionFamilies) -> Option<(Family, Vec<FaultEffect>)> {
        const WIDTH: usize = 12;
        let options = self.site_options(families);
        let sites: Vec<usize> = options.keys().copied().collect();
        let assemble = |choice: &BTreeMap<usize, Option<usize>>| -> Vec<FaultEffect> {
            choice
                .iter()
                .filter_map(|(&site, &opt)| opt.map(|o| options[&site][o].clone()))
                .collect()
        };
        let empty: BTreeMap<usize, Option<usize>> = sites.iter().map(|&s| (s, None)).collect();
        let mut beam = vec![(self.diff_idx.len(), empty)];
        let debug = std::env::var("FAULTFORGE_TRACE_DESCENT").is_ok();
        for &site in &sites {
            let mut next = Vec::new();
            for (kept, choice) in &beam {
                next.push((*kept, choice.clone()));
                for opt in 0..options[&site].len() {
                    let mut c = choice.clone();
                    *c.get_mut(&site).unwrap() = Some(opt);
                    let d = self.run_dist(&assemble(&c));
                    if d == 0 {
                        let mut effects = assemble(&c);
                        effects.sort_by_key(|e| e.site());
                        let family = family_of_set(&effects);
                        return Some((family, effects));
                    }
                    next.push((d, c));
                }
            }
            // Stable sort: on ties the sparser, earlier-ranked prefix wins.
            next.sort_by_key(|(d, _)| *d);
            next.truncate(WIDTH);
            beam = next;
        }
        if debug {
            if let Some((d, choice)) = beam.first() {
                eprintln!("beam {families:?} stuck at {d}: {:?}", assemble(choice));
            }
        }
        None
    }

    /// Per-site candidate effects for the descent: everything the sampler
    /// could have anchored at that site, with corruption values narrowed to
    /// the plausible ones.
    fn site_options(&self, families: OptionFamilies) -> BTreeMap<usize, Vec<FaultEffect>> {
        let subs_only = families == OptionFamilies::Substitutions;
        let mut out = BTreeMap::new();
        let masks = self.diff_masks();
        for &site in &self.sites {
            let mut opts = Vec::new();
            if !subs_only {
                opts.push(FaultEffect::Skip { site });
            }
            let insn = self.instr(site).clone();
            for slot in substitution_slots(&insn) {
                for with in self.slot_options(site, slot).into_iter().take(16) {
                    opts.push(FaultEffect::OperandSubstitution { site, slot, with });
                }
            }
            if insn.op == Opcode::Ldr && !subs_only {
                if let Some((_, loaded)) = self.c.golden.trace[site].write {
                    for v in self.load_values(site, loaded).into_iter().take(10) {
                        opts.push(FaultEffect::LoadCorruption { site, value: kindify(loaded, v) });
                    }
                }
            }
            if let Some(state) = self.states.get(&site).filter(|_| !subs_only) {
                for &reg in &self.regs {
                    let alive = state.regs[reg.index()];
                    // A reset of an already-small value changes nothing.
                    if alive & 0xFFFF_0000 != 0 {
                        opts.push(FaultEffect::MshwReset { site, reg });
                    }
                    if state.load_taint[reg.index()] {
                        continue;
                    }
                    let mut values: Vec<CorruptKind> = self
                        .derived_values(alive)
                        .into_iter()
                        .take(4)
                        .map(|v| kindify(alive, v))
                        .collect();
                    for &m in &masks {
                        let k = CorruptKind::Flip(m);
                        if !values.contains(&k) {
                            values.push(k);
                        }
                    }
                    for value in values {
                        opts.push(FaultEffect::RegisterCorruption { site, reg, value });
                    }
                }
            }
            out.insert(site, opts);
        }
        out
    }

    /// Strongest recorded partials matching `keep`, deduplicated by effect
    /// list and ordered by how much of the damage they cover.
    fn top_partials(&self, keep: fn(Family) -> bool) -> Vec<(Family, Vec<FaultEffect>, BTreeSet<usize>)> {
        let mut parts: Vec<(Family, Vec<FaultEffect>, BTreeSet<usize>)> = Vec::new();
        for p in &self.partials {
            if keep(p.family) && !parts.iter().any(|(_, e, _)| *e == p.effects) {
                parts.push((p.family, p.effects.clone(), p.covered.clone()));
            }
        }
        parts.sort_by_key(|(_, _, c)| std::cmp::Reverse(c.len()));
        parts.truncate(MIXED_POOL);
        parts
    }

    /// Adds partials largest-cover-first while they extend the covered set,
    /// verifying after each addition.
    fn greedy_combine(
        &mut self,
        parts: &[(Family, Vec<FaultEffect>, BTreeSet<usize>)],
        family: Family,
    ) -> Option<Vec<FaultEffect>> {
        if parts.len() < 2 {
            return None;
        }
        let mut effects: Vec<FaultEffect> = Vec::new();
        let mut covered = BTreeSet::new();
        for (_, e, c) in parts {
            if effects.len() >= 6 {
                break;
            }
            if !c.is_subset(&covered) {
                effects.extend(e.iter().cloned());
                covered.extend(c.iter().copied());
                if effects.len() >= 2 {
                    let mut sorted = effects.clone();
                    sorted.sort_by_key(|eff| eff.site());
                    if self.check(&sorted, family) {
                        return Some(sorted);
                    }
                }
            }
        }
        None
    }

    /// All pairs among the strongest partials, verified one by one.
    fn pair_combine(
        &mut self,
        parts: &[(Family, Vec<FaultEffect>, BTreeSet<usize>)],
        family: Family,
    ) -> Option<Vec<FaultEffect>> {
        for i in 0..parts.len() {
            for j in i + 1..parts.len() {
                let mut effects = parts[i].1.clone();
                effects.extend(parts[j].1.iter().cloned());
                effects.sort_by_key(|e| e.site());
                if self.check(&effects, family) {
                    return Some(effects);
                }
            }
        }
        None
    }

    fn load_sites(&self) -> Vec<usize> {
        self.sites.iter().copied().filter(|&s| self.instr(s).op == Opcode::Ldr).collect()
    }
}

/// Closest sampler family for an assembled effect set: repeated if all
/// effects share one elementary family, the known coupled pairs otherwise,
/// and mixed as the general case.
fn family_of_set(effects: &[FaultEffect]) -> Family {
    if effects.len() == 1 {
        return match effects[0] {
            FaultEffect::Skip { .. } => Family::Skip,
            FaultEffect::Replay { .. } => Family::Replay,
            FaultEffect::RegisterCorruption { .. } => Family::RegisterCorruption,
            FaultEffect::MshwReset { .. } => Family::MshwReset,
            FaultEffect::OperandSubstitution { .. } => Family::OperandSubstitution,
            FaultEffect::LoadCorruption { .. } => Family::LoadCorruption,
            FaultEffect::MagicEdge { .. } => Family::MagicEdge,
        };
    }
    let all = |f: fn(&FaultEffect) -> bool| effects.iter().all(f);
    if all(|e| matches!(e, FaultEffect::Skip { .. })) {
        return Family::Composite(CompositeKind::Repeated(RepeatedFamily::Skip));
    }
    if all(|e| matches!(e, FaultEffect::OperandSubstitution { .. })) {
        return Family::Composite(CompositeKind::Repeated(RepeatedFamily::OperandSubstitution));
    }
    if all(|e| matches!(e, FaultEffect::MshwReset { .. })) {
        return Family::Composite(CompositeKind::Repeated(RepeatedFamily::MshwReset));
    }
    if all(|e| matches!(e, FaultEffect::LoadCorruption { .. })) {
        return Family::Composite(CompositeKind::Repeated(RepeatedFamily::LoadCorruption));
    }
    if all(|e| matches!(e, FaultEffect::RegisterCorruption { .. })) {
        return Family::Composite(CompositeKind::Correlated);
    }
    if effects.len() == 2
        && matches!(effects[0], FaultEffect::Skip { .. })
        && matches!(effects[1], FaultEffect::Replay { .. })
    {
        return Family::Composite(CompositeKind::SkipReplay);
    }
    Family::Mixed
}

/// Folds one damaged word onto `base` three ways: the damaged word itself,
/// and the xor or additive delta applied to `base`.
fn fold_damage(base: u32, obs: u32, gold: u32, vals: &mut Vec<u32>) {
    for v in [obs, base ^ (obs ^ gold), base.wrapping_add(obs.wrapping_sub(gold))] {
        if v != base && !vals.contains(&v) {
            vals.push(v);
        }
    }
}

/// Flip when the damage is a narrow bit pattern, else a hard overwrite.
fn kindify(base: u32, v: u32) -> CorruptKind {
    let mask = base ^ v;
    if mask.count_ones() <= 4 {
        CorruptKind::Flip(mask)
    } else {
        CorruptKind::Set(v)
    }
}

fn corrupt_all(site: usize, regs: &[Reg], mask: u32) -> Vec<FaultEffect> {
    regs.iter()
        .map(|&reg| FaultEffect::RegisterCorruption { site, reg, value: CorruptKind::Flip(mask) })
        .collect()
}

pub(crate) fn decode_hex(s: &str) -> Option<Vec<u8>> {
    if s.len() % 2 != 0 {
        return None;
    }
    s.as_bytes()
        .chunks_exact(2)
        .map(|pair| {
            let hi = (pair[0] as char).to_digit(16)?;
            let lo = (pair[1] as char).to_digit(16)?;
            Some((hi * 16 + lo) as u8)
        })
        .collect()
}

/// One record's verdict next to what was actually injected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordVerdict {
    pub run: usize,
    pub cycle: u32,
    /// Family label of the injected fault, when one was sampled.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub injected: Option<String>,
    pub outcome: Outcome,
    pub verdict: Verdict,
}

/// A classified campaign: one verdict per record, in record order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifiedCampaign {
    pub workload: String,
    pub seed: u64,
    /// Cycles searched on each side of every recorded pulse cycle.
    pub window: u32,
    pub verdicts: Vec<RecordVerdict>,
}

impl ClassifiedCampaign {
    /// Label counts of the reproducing specs over records that carried a
    /// corrupted buffer; unexplainable ones count under "unexplained".
    pub fn distribution(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for v in self.applicable() {
            let label = v.verdict.label().unwrap_or("unexplained");
            *out.entry(label.to_string()).or_insert(0) += 1;
        }
        out
    }

    /// Label counts of the injected specs over the same records
    /// `distribution` covers.
    pub fn injected_distribution(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for v in self.applicable() {
            let label = v.injected.as_deref().unwrap_or("unknown");
            *out.entry(label.to_string()).or_insert(0) += 1;
        }
        out
    }

    /// Records the classifier had something to explain for.
    pub fn applicable(&self) -> impl Iterator<Item = &RecordVerdict> {
        self.verdicts.iter().filter(|v| v.verdict != Verdict::NotApplicable)
    }

    /// Share of applicable records that were explained byte-exactly.
    pub fn explained_rate(&self) -> f64 {
        let (mut total, mut explained) = (0usize, 0usize);
        for v in self.applicable() {
            total += 1;
            if matches!(v.verdict, Verdict::Explained { .. }) {
                explained += 1;
            }
        }
        if total == 0 {
            1.0
        } else {
            explained as f64 / total as f64
        }
    }

    /// Per-label counts of harmful versus merely wrong answers, judged by the
    /// classifier's label for each successful fault.
    pub fn harmful_breakdown(&self) -> BTreeMap<String, (usize, usize)> {
        let mut out: BTreeMap<String, (usize, usize)> = BTreeMap::new();
        for v in &self.verdicts {
            let Outcome::SuccessfulFault { harmful } = v.outcome else { continue };
            let label = v.verdict.label().unwrap_or("unexplained");
            let slot = out.entry(label.to_string()).or_insert((0, 0));
            if harmful {
                slot.0 += 1;
            } else {
                slot.1 += 1;
            }
        }
        out
    }
}

/// Rebuilds the program a campaign ran against.
pub fn rebuild_workload(result: &CampaignResult) -> Result<Workload, ClassifyError> {
    let scheme = match result.scheme.as_deref() {
        Some(name) => Some(
            Scheme::from_name(name)
                .ok_or_else(|| ClassifyError::UnknownScheme(name.to_string()))?,
        ),
        None => None,
    };
    let base_name = match scheme {
        Some(s) => result
            .workload
            .strip_suffix(s.suffix())
            .unwrap_or(result.workload.as_str()),
        None => result.workload.as_str(),
    };
    let kind = WorkloadKind::from_name(base_name)
        .ok_or_else(|| ClassifyError::UnknownWorkload(base_name.to_string()))?;
    let baseline = build(kind, &result.params);
    match scheme {
        Some(s) => harden(&baseline, s)
            .map(|h| h.workload)
            .map_err(|source| ClassifyError::Harden {
                workload: result.workload.clone(),
                scheme: s.suffix().to_string(),
                source,
            }),
        None => Ok(baseline),
    }
}

/// Rebuilds a campaign's program, replays the fault-free run, and explains
/// every record. Record order is preserved; work is spread across threads.
pub fn classify_campaign(
    result: &CampaignResult,
    window: u32,
) -> Result<ClassifiedCampaign, ClassifyError> {
    use rayon::prelude::*;

    let w = rebuild_workload(result)?;
    let golden = run_with(&w.program, standard_regs(), RUN_BUDGET);
    if !golden.halted() {
        return Err(ClassifyError::CleanRunDiverged(w.name.clone()));
    }
    let classifier = Classifier::new(&w.program, &golden, &result.timing, result.seed, window);
    let verdicts: Vec<RecordVerdict> = crate::campaign::thread_pool().install(|| {
        result
            .records
            .par_iter()
            .map(|r| RecordVerdict {
                run: r.run,
                cycle: r.cycle,
                injected: r.spec.as_ref().map(|s| s.family.label().to_string()),
                outcome: r.outcome,
                verdict: classifier.classify(r),
            })
            .collect()
    });
    Ok(ClassifiedCampaign {
        workload: result.workload.clone(),
        seed: result.seed,
        window,
        verdicts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::campaign::{buffer_hex, default_config, run_campaign, CampaignConfig};
    use crate::fault::{apply_fault, EffectProfile};
    use crate::workloads::WorkloadParams;

    fn canned(kind: WorkloadKind, len: usize, runs: usize, seed: u64) -> CampaignResult {
        let params = WorkloadParams { len, ..WorkloadParams::default() };
        let w = build(kind, &params);
        let cfg = default_config(runs, seed);
        run_campaign(&w, &cfg, None, &params)
    }

    #[test]
    fn hex_codec_round_trips() {
        assert_eq!(decode_hex("0aff10"), Some(vec![0x0a, 0xff, 0x10]));
        assert_eq!(decode_hex("abc"), None);
        assert_eq!(decode_hex("zz"), None);
    }

    #[test]
    fn mutes_and_clean_answers_need_no_explanation() {
        let result = canned(WorkloadKind::Loop1, 8, 80, 11);
        let classified = classify_campaign(&result, 0).unwrap();
        for (r, v) in result.records.iter().zip(&classified.verdicts) {
            let applicable =
                matches!(r.outcome, Outcome::DetectedFault | Outcome::SuccessfulFault { .. });
            assert_eq!(
                v.verdict != Verdict::NotApplicable,
                applicable,
                "run {}: outcome {:?} vs verdict {:?}",
                r.run,
                r.outcome,
                v.verdict
            );
        }
    }

    #[test]
    fn explained_specs_replay_to_the_recorded_buffer() {
        let result = canned(WorkloadKind::Loop1, 8, 150, 23);
        let w = rebuild_workload(&result).unwrap();
        let classified = classify_campaign(&result, 0).unwrap();
        let mut explained = 0;
        for (r, v) in result.records.iter().zip(&classified.verdicts) {
            if let Verdict::Explained { spec } = &v.verdict {
                let replay = apply_fault(&w.program, standard_regs(), spec, RUN_BUDGET);
                assert_eq!(
                    Some(buffer_hex(&replay.output)),
                    r.buffer,
                    "run {}: explanation does not replay",
                    r.run
                );
                explained += 1;
            }
        }
        assert!(explained > 10, "only {explained} records explained");
        assert!(
            classified.explained_rate() > 0.7,
            "explained rate {}",
            classified.explained_rate()
        );
    }

    #[test]
    fn determined_families_always_appear_among_witnesses() {
        // For families whose candidate space the search mirrors exactly, the
        // injected family must always offer a byte-exact witness. Spurious
        // edges need the two-exit compare loop: on the straight copy loop
        // they can only mimic the real back edge or run off the data.
        for (family, kind) in [
            (Family::Skip, WorkloadKind::Loop1),
            (Family::OperandSubstitution, WorkloadKind::Loop1),
            (Family::MshwReset, WorkloadKind::Loop1),
            (Family::LoadCorruption, WorkloadKind::Loop1),
            (Family::MagicEdge, WorkloadKind::Loop2),
        ] {
            let params = WorkloadParams { len: 8, ..WorkloadParams::default() };
            let w = build(kind, &params);
            let cfg = CampaignConfig {
                runs: 250,
                seed: 5,
                cycles: None,
                profile: EffectProfile::single(family),
                timing: Default::default(),
            };
            let result = run_campaign(&w, &cfg, None, &params);
            let golden = run_with(&w.program, standard_regs(), RUN_BUDGET);
            let cl = Classifier::new(&w.program, &golden, &result.timing, result.seed, 0);
            let mut seen = 0;
            for r in &result.records {
                if !matches!(r.outcome, Outcome::SuccessfulFault { .. }) {
                    continue;
                }
                let witnesses = cl.single_family_witnesses(r);
                assert!(
                    witnesses.iter().any(|s| s.family.label() == family.label()),
                    "{} injection in run {} has no same-family witness",
                    family.label(),
                    r.run
                );
                seen += 1;
            }
            assert!(seen > 5, "{}: only {seen} successful records", family.label());
        }
    }

    #[test]
    fn widened_windows_recover_displaced_pulses() {
        let params = WorkloadParams { len: 8, ..WorkloadParams::default() };
        let w = build(WorkloadKind::Loop1, &params);
        let golden = run_with(&w.program, standard_regs(), RUN_BUDGET);
        let timing = TimingConfig::default();
        let tt = schedule(&w.program, &golden.trace, &timing, 9);
        let site = (0..golden.trace.len())
            .find(|&i| w.program.instructions[golden.trace[i].at].op == Opcode::Add)
            .unwrap();
        let spec = FaultSpec {
            cycle: tt.entries[site].issue + 25,
            family: Family::Skip,
            effects: vec![FaultEffect::Skip { site }],
        };
        assert!(spec.cycle < tt.total_cycles, "displaced cycle fell off the trace");
        let run = apply_fault(&w.program, standard_regs(), &spec, RUN_BUDGET);
        assert!(run.halted());
        let record = InjectionRecord {
            run: 0,
            cycle: spec.cycle,
            spec: Some(spec),
            outcome: Outcome::SuccessfulFault { harmful: false },
            buffer: Some(buffer_hex(&run.output)),
        };
        let narrow = Classifier::new(&w.program, &golden, &timing, 9, 0);
        assert_eq!(narrow.classify(&record), Verdict::Unexplained);
        let wide = Classifier::new(&w.program, &golden, &timing, 9, 26);
        match wide.classify(&record) {
            Verdict::Explained { spec } => assert_eq!(spec.family.label(), "skip"),
            other => panic!("wide window failed: {other:?}"),
        }
    }

    #[test]
    fn distributions_cover_every_applicable_record() {
        let result = canned(WorkloadKind::Loop1, 8, 200, 31);
        let classified = classify_campaign(&result, 0).unwrap();
        let applicable = classified.applicable().count();
        assert!(applicable > 20, "only {applicable} applicable records");
        let classified_total: usize = classified.distribution().values().sum();
        let injected_total: usize = classified.injected_distribution().values().sum();
        assert_eq!(classified_total, applicable);
        assert_eq!(injected_total, applicable);
        let unexplained = classified.distribution().get("unexplained").copied().unwrap_or(0);
        assert!(
            (unexplained as f64) < 0.3 * applicable as f64,
            "{unexplained} of {applicable} records unexplained"
        );
    }

    #[test]
    fn hardened_campaigns_rebuild_and_classify() {
        let params = WorkloadParams { len: 6, ..WorkloadParams::default() };
        let base = build(WorkloadKind::Loop2, &params);
        let hardened = harden(&base, Scheme::LoopDup).unwrap();
        let cfg = default_config(150, 41);
        let result = run_campaign(&hardened.workload, &cfg, Some("loopdup"), &params);
        assert!(result.tally().detected > 0, "no detections to classify");
        let rebuilt = rebuild_workload(&result).unwrap();
        assert_eq!(rebuilt, hardened.workload);
        let classified = classify_campaign(&result, 0).unwrap();
        let detected_explained = result
            .records
            .iter()
            .zip(&classified.verdicts)
            .filter(|(r, v)| {
                r.outcome == Outcome::DetectedFault
                    && matches!(v.verdict, Verdict::Explained { .. })
            })
            .count();
        assert!(detected_explained > 0, "no detected record could be explained");
    }

    #[test]
    fn composite_bursts_keep_the_composite_label() {
        let params = WorkloadParams { len: 8, ..WorkloadParams::default() };
        let w = build(WorkloadKind::Loop1, &params);
        let cfg = CampaignConfig {
            runs: 400,
            seed: 77,
            cycles: None,
            profile: EffectProfile::single(Family::Composite(CompositeKind::Repeated(
                RepeatedFamily::OperandSubstitution,
            ))),
            timing: Default::default(),
        };
        let result = run_campaign(&w, &cfg, None, &params);
        let classified = classify_campaign(&result, 0).unwrap();
        let dist = classified.distribution();
        let composite = dist.get("composite").copied().unwrap_or(0);
        let total: usize = dist.values().sum();
        assert!(total > 10, "only {total} applicable records");
        // Bursts whose extra effects were masked legitimately fall back to a
        // single label; the bulk must still classify as composite.
        assert!(
            composite * 2 > total,
            "composite label underrepresented: {composite} of {total} ({dist:?})"
        );
    }
#[test]
fn debug_descent_trajectory() {
    use crate::campaign::*;
    use crate::fault::*;
    use crate::workloads::*;
    use crate::isa::run_with;
    let params = WorkloadParams::default();
    let w = build(WorkloadKind::Loop1, &params);
    let cfg = CampaignConfig {
        runs: 2000,
        seed: 4242,
        cycles: None,
        profile: EffectProfile::paper_em_default(),
        timing: Default::default(),
    };
    let result = run_campaign(&w, &cfg, None, &params);
    let classified = classify_campaign(&result, 2).unwrap();
    let inj = classified.injected_distribution();
    let got = classified.distribution();
    let total = classified.applicable().count() as f64;
    eprintln!("applicable {total}");
    let mut labels: std::collections::BTreeSet<&String> = inj.keys().collect();
    labels.extend(got.keys());
    for l in labels {
        let a = *inj.get(l).unwrap_or(&0) as f64 / total * 100.0;
        let b = *got.get(l).unwrap_or(&0) as f64 / total * 100.0;
        eprintln!("{l:>22}: injected {a:5.1}%  classified {b:5.1}%  gap {:+.1}", b - a);
    }
    let mut flows: std::collections::BTreeMap<(String, String), usize> = Default::default();
    let mut samples: std::collections::BTreeMap<(String, String), Vec<usize>> = Default::default();
    for (i, (v, r)) in classified.verdicts.iter().zip(&result.records).enumerate() {
        let injected = match &r.spec {
            Some(s) => s.family.label().to_string(),
            None => continue,
        };
        let classified_label = match &v.verdict {
            Verdict::Explained { spec } => spec.family.label().to_string(),
            Verdict::Unexplained => "unexplained".to_string(),
            Verdict::NotApplicable => continue,
        };
        let key = (injected, classified_label);
        samples.entry(key.clone()).or_default().push(i);
        *flows.entry(key).or_default() += 1;
    }
    let mut rows: Vec<_> = flows.iter().collect();
    rows.sort_by_key(|(_, &n)| std::cmp::Reverse(n));
    for ((from, to), n) in rows.iter().take(16) {
        eprintln!("flow {from:>22} -> {to:<22} {n}");
    }
    for key in [
        ("mixed", "unexplained"),
        ("composite", "unexplained"),
        ("mixed", "composite"),
    ] {
        let Some(idxs) = samples.get(&(key.0.to_string(), key.1.to_string())) else { continue };
        eprintln!("--- {} -> {} ({} records)", key.0, key.1, idxs.len());
        let mut kinds: std::collections::BTreeMap<String, usize> = Default::default();
        for &i in idxs {
            let spec = result.records[i].spec.as_ref().unwrap();
            let mut ops: Vec<String> = spec
                .effects
                .iter()
                .map(|e| {
                    format!("{e:?}").split([' ', '{']).next().unwrap_or("?").to_string()
                })
                .collect();
            ops.sort();
            ops.dedup();
            *kinds.entry(ops.join("+")).or_default() += 1;
        }
        eprintln!("    component shapes: {kinds:?}");
        let w2 = rebuild_workload(&result).unwrap();
        let golden = run_with(&w2.program, standard_regs(), RUN_BUDGET);
        let cl = Classifier::new(&w2.program, &golden, &result.timing, result.seed, 2);
        let mut missing: std::collections::BTreeMap<String, usize> = Default::default();
        let mut bad_dist = 0usize;
        for &i in idxs {
            let r = &result.records[i];
            let eff = r.spec.as_ref().unwrap().effects.clone();
            if let Some(mut s) = cl.search(r) {
                let d = s.run_dist(&eff);
                if d != 0 {
                    bad_dist += 1;
                    continue;
                }
                let options = s.site_options(OptionFamilies::All);
                for e in &eff {
                    let listed = options.get(&e.site()).is_some_and(|v| v.contains(e));
                    if !listed {
                        let kind =
                            format!("{e:?}").split([' ', '{']).next().unwrap_or("?").to_string();
                        *missing.entry(kind).or_default() += 1;
                    }
                }
            }
        }
        eprintln!("    truth-unreachable (budget/dist) {bad_dist}; missing option kinds {missing:?}");
    }
    panic!("debug only");
}
}
