//! Full duplication with control-flow signatures: computation is mirrored in
//! shadow registers (or reloaded through shadowed pointers under register
//! pressure), stores are cross-checked after executing, and a running
//! signature register must match each checked block's static signature, so
//! illegal landings at checked entries are caught.

use super::{emit_handler, emit_restore, Asm, HardenError, HardenedProgram, Scheme, Shadow};
use crate::isa::{Instruction, MemRegion, Opcode, Program, Reg, SCRATCH};
use crate::workloads::{emit_epilogue, ExitEdge, ExitKind, Workload, WorkloadMeta, CTRL_BASE};
use std::collections::{BTreeMap, BTreeSet};

/// Label of the re-entry trampoline taken by the loop back edge; it gives the
/// self-loop transition a non-zero signature step.
const REENTER: &str = "reenter";
const GUARD: &str = "guard";

/// Chooses pairwise-distant block signatures plus a poison word for the edge
/// register. Poison parks between legal arming windows: no signature xored
/// with it may come within one bit flip of another signature.
fn pick_signatures(entry: u32, n: usize) -> (Vec<u32>, u32) {
    let far = |a: u32, b: u32| (a ^ b).count_ones() >= 2;
    let mut sigs: Vec<u32> = Vec::new();
    let mut k = 1u32;
    while sigs.len() < n {
        let cand = (k.wrapping_mul(0x9E37_79B9) & 0x7FFF_FFFF) | 1;
        k += 1;
        if sigs.iter().all(|&s| far(s, cand)) && far(entry, cand) {
            sigs.push(cand);
        }
    }
    let mut poison = 2u32;
    loop {
        let sources = sigs.iter().copied().chain([entry]);
        if sources.clone().all(|a| sigs.iter().all(|&t| far(a ^ poison, t))) {
            return (sigs, poison);
        }
        poison += 2;
    }
}

struct Pass {
    found_range: Option<std::ops::Range<usize>>,
    head: Option<usize>,
    head_label: Option<String>,
    found_label: Option<String>,
    gsr: Reg,
    rts: Reg,
    shadows: BTreeMap<Reg, Shadow>,
    reg_map: BTreeMap<Reg, Reg>,
    sigs: BTreeMap<String, u32>,
    poison: u32,
    cur: u32,
    a: Asm,
    new_idx: BTreeMap<usize, usize>,
    flushed: bool,
}

impl Pass {
    fn sig(&self, label: &str) -> u32 {
        self.sigs[label]
    }

    fn in_found(&self, i: usize) -> bool {
        self.found_range.as_ref().is_some_and(|r| r.contains(&i))
    }

    fn arm(&mut self, to: &str) {
        let d = self.cur ^ self.sig(to);
        self.a.push(Instruction::movi(self.rts, d as i32));
    }

    /// Checked-block entry: fold the edge register into the signature
    /// register and compare. Poison lands right after the fold, so an edge
    /// diverted out of this very block cannot re-fold the consumed value
    /// into a predecessor's valid signature.
    fn entry_check(&mut self, label: &str) {
        self.a.push(Instruction::alu(Opcode::Eor, self.gsr, self.gsr, self.rts));
        self.a.push(Instruction::movi(self.rts, self.poison as i32));
        self.a.push(Instruction::cmpi(self.gsr, self.sig(label) as i32));
        self.a.push(Instruction::branch(Opcode::Bne, "detect"));
        self.cur = self.sig(label);
    }

    /// Original value against its duplicate; reload-backed duplicates go
    /// through the scratch register.
    fn value_check(&mut self, orig: Reg) {
        match self.shadows[&orig] {
            Shadow::Reg(s) => {
                self.a.push(Instruction::cmp(orig, s));
            }
            Shadow::Reload { base, offset } => {
                self.a.push(Instruction::ldr(SCRATCH, base, offset));
                self.a.push(Instruction::cmp(orig, SCRATCH));
            }
        }
        self.a.push(Instruction::branch(Opcode::Bne, "detect"));
    }

    /// Re-entry trampoline for the back edge, then a fresh handler. Placed
    /// behind an unconditional branch, never on a fall-through path.
    fn flush_deferred(&mut self) {
        if self.flushed {
            return;
        }
        self.flushed = true;
        if let Some(head_label) = self.head_label.clone() {
            self.a.label(REENTER);
            self.a.push(Instruction::alu(Opcode::Eor, self.gsr, self.gsr, self.rts));
            self.a.push(Instruction::movi(self.rts, self.poison as i32));
            self.a.push(Instruction::cmpi(self.gsr, self.sig(REENTER) as i32));
            self.a.push(Instruction::branch(Opcode::Bne, "detect"));
            let d = self.sig(REENTER) ^ self.sig(&head_label);
            self.a.push(Instruction::movi(self.rts, d as i32));
            self.a.push(Instruction::branch(Opcode::B, head_label));
        }
        emit_handler(&mut self.a, CTRL_BASE);
    }
}

/// Duplicates every computation and chains block signatures through the
/// control flow of a workload (or of an already loop-hardened workload,
/// stacking the two schemes).
pub fn harden_swift(w: &Workload) -> Result<HardenedProgram, HardenError> {
    let prog = &w.program;
    let dump = *prog
        .labels
        .get("dump")
        .ok_or_else(|| HardenError::Unsupported(format!("{}: no dump epilogue", w.name)))?;
    // An inner pass's handler and restore block are regenerated, not walked.
    let walk_end = ["detect", "restore"]
        .iter()
        .filter_map(|l| prog.labels.get(*l))
        .copied()
        .min()
        .unwrap_or(dump);
    let insns = &prog.instructions[..walk_end];
    let prior_restored: BTreeSet<Reg> = match prog.labels.get("restore") {
        Some(&r) => prog.instructions[r..dump].iter().filter_map(|i| i.dest).collect(),
        None => BTreeSet::new(),
    };

    // Loop structure from the metadata.
    let head = w.meta.loop_head;
    let backs: Vec<&ExitEdge> =
        w.meta.exit_edges.iter().filter(|e| e.kind == ExitKind::Fallthrough).collect();
    let takens: Vec<&ExitEdge> =
        w.meta.exit_edges.iter().filter(|e| e.kind == ExitKind::Taken).collect();
    if head.is_some() != (backs.len() == 1) || takens.len() > 1 {
        return Err(HardenError::Unsupported(format!(
            "{}: pass handles one loop with one fall-through exit",
            w.name
        )));
    }
    let head_label = head.map(|_| {
        insns[backs[0].from].label.clone().expect("back branch carries its label")
    });
    let found_label = takens.first().map(|e| {
        insns[e.from].label.clone().expect("taken exit carries its label")
    });
    let found_range = takens.first().map(|e| {
        let start = e.to;
        let end = (start..walk_end)
            .find(|&i| insns[i].op == Opcode::B)
            .map_or(walk_end, |i| i + 1);
        start..end
    });

    // Register analysis: regs whose only payload definitions are loads can
    // live as reload-backed duplicates when registers run out. Definitions
    // inside the exit-only early block do not count.
    let mut used: BTreeSet<Reg> = BTreeSet::new();
    let mut defs: BTreeMap<Reg, Vec<usize>> = BTreeMap::new();
    for (i, insn) in insns.iter().enumerate() {
        used.extend(insn.reads());
        if let Some(wr) = insn.write_reg() {
            used.insert(wr);
            if !found_range.as_ref().is_some_and(|r| r.contains(&i)) {
                defs.entry(wr).or_default().push(i);
            }
        }
    }
    for r in &used {
        if defs.get(r).is_none_or(|d| d.is_empty()) {
            return Err(HardenError::Unsupported(format!(
                "{}: {r} is read but never defined in the payload",
                w.name
            )));
        }
    }
    let load_only: BTreeSet<Reg> = used
        .iter()
        .copied()
        .filter(|r| defs[r].iter().all(|&i| insns[i].op == Opcode::Ldr))
        .collect();
    let non_load: Vec<Reg> = used.iter().copied().filter(|r| !load_only.contains(r)).collect();

    let free: Vec<Reg> = (0..=13).map(Reg).filter(|r| !used.contains(r)).collect();
    if free.len() < non_load.len() + 2 {
        return Err(HardenError::RegisterPressure {
            needed: non_load.len() + 2,
            available: free.len(),
        });
    }
    let gsr = free[0];
    let rts = free[1];
    let mut pool = free[2..].iter().copied();
    let mut shadows: BTreeMap<Reg, Shadow> = BTreeMap::new();
    for r in &non_load {
        shadows.insert(*r, Shadow::Reg(pool.next().unwrap()));
    }
    for r in &load_only {
        if let Some(s) = pool.next() {
            shadows.insert(*r, Shadow::Reg(s));
            continue;
        }
        let &[def] = defs[r].as_slice() else {
            return Err(HardenError::Unsupported(format!(
                "{}: {r} has several load definitions and no free duplicate",
                w.name
            )));
        };
        let base = insns[def].src1.expect("load has a base");
        let Some(Shadow::Reg(sb)) = shadows.get(&base).copied() else {
            return Err(HardenError::Unsupported(format!(
                "{}: {r} reloads through {base} which has no duplicate register",
                w.name
            )));
        };
        shadows.insert(*r, Shadow::Reload { base: sb, offset: insns[def].imm.unwrap_or(0) });
    }
    let reg_map: BTreeMap<Reg, Reg> = shadows
        .iter()
        .filter_map(|(o, s)| match s {
            Shadow::Reg(r) => Some((*o, *r)),
            Shadow::Reload { .. } => None,
        })
        .collect();

    // Signatures for the checked blocks, in a fixed order.
    let entry_sig = 1u32 << gsr.index();
    let mut checked: Vec<String> = Vec::new();
    checked.extend(head_label.clone());
    if head.is_some() {
        checked.push(REENTER.to_string());
    }
    checked.extend(found_label.clone());
    checked.push(GUARD.to_string());
    let (values, poison) = pick_signatures(entry_sig, checked.len());
    let sigs: BTreeMap<String, u32> = checked.into_iter().zip(values).collect();

    let mut names_at: BTreeMap<usize, Vec<&str>> = BTreeMap::new();
    for (name, &idx) in &prog.labels {
        if idx < walk_end && name != "dump" {
            names_at.entry(idx).or_default().push(name);
        }
    }

    let mut p = Pass {
        found_range,
        head,
        head_label: head_label.clone(),
        found_label: found_label.clone(),
        gsr,
        rts,
        shadows,
        reg_map,
        sigs,
        poison,
        cur: entry_sig,
        a: Asm::new(),
        new_idx: BTreeMap::new(),
        flushed: false,
    };

    let mut i = 0;
    while i < walk_end {
        // Block boundaries the pass instruments.
        if Some(i) == p.head {
            let label = p.head_label.clone().unwrap();
            p.arm(&label);
            p.a.label(&label);
            p.entry_check(&label);
        } else if p.found_label.is_some() && p.found_range.as_ref().unwrap().start == i {
            p.flush_deferred();
            let label = p.found_label.clone().unwrap();
            p.a.label(&label);
            p.entry_check(&label);
            // Landing legally still requires the duplicated condition to
            // agree, when duplicates exist to compare. A stacked input
            // carries its own agreement checks instead.
            let taken = takens[0];
            let setter = (0..taken.from).rev().find(|&s| insns[s].writes_flags()).unwrap();
            let ops: Vec<Reg> = insns[setter].reads();
            if let [x, y] = ops[..] {
                if let (Some(&sx), Some(&sy)) = (p.reg_map.get(&x), p.reg_map.get(&y)) {
                    p.a.push(Instruction::cmp(sx, sy));
                    p.a.push(Instruction::branch(
                        super::loopdup::negated(insns[taken.from].op),
                        "detect",
                    ));
                }
            }
        } else {
            for name in names_at.get(&i).into_iter().flatten() {
                p.a.label(name);
            }
        }

        let insn = &insns[i];
        let pair = insn.writes_flags()
            && i + 1 < walk_end
            && insns[i + 1].is_cond_branch();
        if pair && insns[i + 1].label.as_deref() == Some("detect") {
            // An inner pass's own check: keep it verbatim.
            let c = p.a.push(insn.clone());
            let b = p.a.push(insns[i + 1].clone());
            p.new_idx.insert(i, c);
            p.new_idx.insert(i + 1, b);
            i += 2;
            continue;
        }
        if pair {
            // Conditional exit or back edge. Decision operands with a
            // reload-backed duplicate are checked here, while the pointer
            // still addresses their element; the guard cannot revisit them.
            for r in insn.reads() {
                if matches!(p.shadows.get(&r), Some(Shadow::Reload { .. })) {
                    p.value_check(r);
                }
            }
            // Arm the edge register for the taken target between the
            // compare and the branch.
            let br = &insns[i + 1];
            let target = br.label.clone().expect("conditional branch carries its label");
            let c = p.a.push(insn.clone());
            let (arm_to, emit_target) = if Some(&target) == p.head_label.as_ref() {
                (REENTER.to_string(), REENTER.to_string())
            } else {
                (target.clone(), target)
            };
            p.arm(&arm_to);
            let b = p.a.push(Instruction::branch(br.op, emit_target));
            p.new_idx.insert(i, c);
            p.new_idx.insert(i + 1, b);
            i += 2;
            continue;
        }
        match insn.op {
            Opcode::B => {
                // Exits funnel through the checked guard block.
                let target = insn.label.as_deref().unwrap_or_default();
                if target != "dump" && target != "restore" {
                    return Err(HardenError::Unsupported(format!(
                        "{}: unconditional branch to {target}",
                        w.name
                    )));
                }
                let ni = p.a.here();
                p.arm(GUARD);
                if i + 1 < walk_end {
                    p.a.push(Instruction::branch(Opcode::B, GUARD));
                }
                p.new_idx.insert(i, ni);
            }
            Opcode::Str => {
                let v = insn.src1.expect("store has a value");
                let base = insn.src2.expect("store has a base");
                let ni = p.a.push(insn.clone());
                p.new_idx.insert(i, ni);
                p.value_check(v);
                let Some(Shadow::Reg(sb)) = p.shadows.get(&base).copied() else {
                    return Err(HardenError::Unsupported(format!(
                        "{}: store base {base} has no duplicate register",
                        w.name
                    )));
                };
                p.a.push(Instruction::cmp(base, sb));
                p.a.push(Instruction::branch(Opcode::Bne, "detect"));
            }
            _ => {
                let ni = p.a.push(insn.clone());
                p.new_idx.insert(i, ni);
                let dup = insn
                    .write_reg()
                    .filter(|_| !p.in_found(i))
                    .and_then(|wr| p.reg_map.get(&wr).copied());
                if dup.is_some() {
                    for r in insn.reads() {
                        if !p.reg_map.contains_key(&r) {
                            return Err(HardenError::Unsupported(format!(
                                "{}: duplicate of {} reads {r} which has no duplicate register",
                                w.name,
                                insn.op.mnemonic()
                            )));
                        }
                    }
                    p.a.push(super::loopdup::remap(insn, &p.reg_map));
                }
            }
        }
        i += 1;
    }

    if !p.flushed {
        p.arm(GUARD);
        p.a.push(Instruction::branch(Opcode::B, GUARD));
        p.flush_deferred();
    }

    // Guard: last checked block; every register-backed duplicate must agree
    // before the restore block rewinds the instrumentation state for the
    // dump. Reload-backed duplicates were checked at their decision and
    // store sites, where their pointer still addressed the right element.
    p.a.label(GUARD);
    p.entry_check(GUARD);
    let originals: Vec<Reg> = p
        .shadows
        .iter()
        .filter(|(_, s)| matches!(s, Shadow::Reg(_)))
        .map(|(r, _)| *r)
        .collect();
    for r in originals {
        p.value_check(r);
    }
    let mut restored: BTreeSet<Reg> = prior_restored;
    restored.insert(gsr);
    restored.insert(rts);
    restored.extend(p.reg_map.values().copied());
    emit_restore(&mut p.a, &restored);
    emit_epilogue(&mut p.a.insns, &mut p.a.labels);

    let new_dump = p.a.labels["dump"];
    let detect_entry = p.a.labels["detect"];
    let signatures: BTreeMap<usize, u32> =
        p.sigs.iter().map(|(l, &s)| (p.a.labels[l.as_str()], s)).collect();

    let mut regions = prog.regions.clone();
    if !regions.iter().any(|r| r.name == "ctrl") {
        regions.push(MemRegion::new("ctrl", CTRL_BASE, vec![0]));
    }

    let exit_edges = w
        .meta
        .exit_edges
        .iter()
        .map(|e| {
            let from = p.new_idx[&e.from];
            let to = match e.kind {
                ExitKind::Fallthrough => from + 1,
                ExitKind::Taken => p.a.labels[insns[e.from].label.as_deref().unwrap()],
            };
            ExitEdge { from, to, kind: e.kind }
        })
        .collect();
    let meta = WorkloadMeta {
        payload: 0..new_dump,
        loop_head: head.map(|h| p.new_idx[&h]),
        exit_edges,
    };
    let name = format!("{}{}", w.name, Scheme::Swift.suffix());
    let program = Program::from_parts(p.a.insns, p.a.labels, regions)
        .unwrap_or_else(|e| panic!("{name} failed to assemble: {e}"));

    Ok(HardenedProgram {
        workload: Workload { name: name.clone(), program, meta },
        scheme: Scheme::Swift,
        baseline: w.name.clone(),
        detect_entry,
        shadow_map: p.shadows,
        signatures,
        exit_slice: BTreeSet::new(),
        restored,
    })
}
