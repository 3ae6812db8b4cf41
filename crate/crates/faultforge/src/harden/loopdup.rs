//! Loop exit-condition duplication: every register feeding a loop exit is
//! recomputed in a shadow, compared after each update, and both exits are
//! re-validated on the duplicated state before the program may dump.

use super::{emit_handler, emit_restore, Asm, HardenError, HardenedProgram, Scheme, Shadow};
use crate::isa::{Instruction, MemRegion, Opcode, Program, Reg};
use crate::workloads::{emit_epilogue, ExitEdge, ExitKind, Workload, WorkloadMeta, CTRL_BASE};
use std::collections::{BTreeMap, BTreeSet};

/// Branch condition that fires when the original condition does not hold.
pub(crate) fn negated(op: Opcode) -> Opcode {
    match op {
        Opcode::Beq => Opcode::Bne,
        Opcode::Bne => Opcode::Beq,
        Opcode::Blt => Opcode::Bge,
        Opcode::Bge => Opcode::Blt,
        _ => unreachable!("negated() needs a conditional branch"),
    }
}

/// Clone with every register operand sent through the shadow map.
pub(crate) fn remap(insn: &Instruction, map: &BTreeMap<Reg, Reg>) -> Instruction {
    let m = |r: Option<Reg>| r.map(|r| *map.get(&r).unwrap_or(&r));
    let mut out = insn.clone();
    out.dest = m(out.dest);
    out.src1 = m(out.src1);
    out.src2 = m(out.src2);
    out
}

/// Nearest flags-writing instruction before `idx`.
fn flags_setter_before(insns: &[Instruction], idx: usize) -> Option<usize> {
    (0..idx).rev().find(|&i| insns[i].writes_flags())
}

/// Backward dependence closure of the exit conditions over the payload.
fn slice_regs(insns: &[Instruction], seeds: BTreeSet<Reg>) -> BTreeSet<Reg> {
    let mut set = seeds;
    loop {
        let mut grew = false;
        for insn in insns {
            if insn.write_reg().is_some_and(|w| set.contains(&w)) {
                for r in insn.reads() {
                    grew |= set.insert(r);
                }
            }
        }
        if !grew {
            return set;
        }
    }
}

/// Duplicates the exit-condition slice of a loop workload.
pub fn harden_loop(w: &Workload) -> Result<HardenedProgram, HardenError> {
    let head = w.meta.loop_head.ok_or_else(|| HardenError::NoLoop(w.name.clone()))?;
    let payload = &w.program.instructions[w.meta.payload.clone()];
    let backs: Vec<&ExitEdge> =
        w.meta.exit_edges.iter().filter(|e| e.kind == ExitKind::Fallthrough).collect();
    let [back] = backs[..] else {
        return Err(HardenError::Unsupported(format!(
            "{} needs exactly one fall-through loop exit",
            w.name
        )));
    };

    // Flags setter and operand seeds for every legal exit.
    let mut setters: BTreeMap<usize, usize> = BTreeMap::new();
    let mut seeds = BTreeSet::new();
    for e in &w.meta.exit_edges {
        let s = flags_setter_before(payload, e.from).ok_or_else(|| {
            HardenError::Unsupported(format!("{}: exit branch without a condition", w.name))
        })?;
        setters.insert(e.from, s);
        seeds.extend(payload[s].reads());
    }
    let slice = slice_regs(payload, seeds);

    // Shadows come from registers the payload never touches; r13 stays free
    // for the handler.
    let used: BTreeSet<Reg> =
        payload.iter().flat_map(|i| i.reads().into_iter().chain(i.write_reg())).collect();
    let free: Vec<Reg> = (0..13).map(Reg).filter(|r| !used.contains(r)).collect();
    if free.len() < slice.len() {
        return Err(HardenError::RegisterPressure {
            needed: slice.len(),
            available: free.len(),
        });
    }
    let map: BTreeMap<Reg, Reg> = slice.iter().copied().zip(free).collect();

    // Labels of the input program, re-emitted at their new positions.
    let mut names_at: BTreeMap<usize, Vec<&str>> = BTreeMap::new();
    for (name, &idx) in &w.program.labels {
        if name != "dump" && idx < payload.len() {
            names_at.entry(idx).or_default().push(name);
        }
    }
    // Early-exit landing points, keyed by target index.
    let guards: BTreeMap<usize, usize> = w
        .meta
        .exit_edges
        .iter()
        .filter(|e| e.kind == ExitKind::Taken)
        .map(|e| (e.to, e.from))
        .collect();

    let mut a = Asm::new();
    let mut new_idx: BTreeMap<usize, usize> = BTreeMap::new();
    let mut slice_marks: BTreeSet<usize> = BTreeSet::new();
    for (i, insn) in payload.iter().enumerate() {
        for name in names_at.get(&i).into_iter().flatten() {
            a.label(name);
        }
        // A taken exit may only land here if the duplicated condition agrees.
        if let Some(&from) = guards.get(&i) {
            let g1 = a.push(remap(&payload[setters[&from]], &map));
            let g2 = a.push(Instruction::branch(negated(payload[from].op), "detect"));
            slice_marks.extend([g1, g2]);
        }
        let ni = if insn.op == Opcode::B && insn.label.as_deref() == Some("dump") {
            // Route the normal exit through the restore block.
            a.push(Instruction::branch(Opcode::B, "restore"))
        } else {
            a.push(insn.clone())
        };
        new_idx.insert(i, ni);
        if insn.writes_flags() || setters.contains_key(&i) {
            slice_marks.insert(ni);
        }
        // Lockstep duplicate plus agreement check for every slice write.
        if let Some(wr) = insn.write_reg() {
            if slice.contains(&wr) {
                slice_marks.insert(ni);
                let d = a.push(remap(insn, &map));
                let c1 = a.push(Instruction::cmp(wr, map[&wr]));
                let c2 = a.push(Instruction::branch(Opcode::Bne, "detect"));
                slice_marks.extend([d, c1, c2]);
            }
        }
        // Past the loop: the duplicated condition must agree the loop ended,
        // otherwise an exit was forced early.
        if i == back.from {
            let p1 = a.push(remap(&payload[setters[&back.from]], &map));
            let p2 = a.push(Instruction::branch(insn.op, "detect"));
            slice_marks.extend([p1, p2]);
            if i + 1 == payload.len() {
                a.push(Instruction::branch(Opcode::B, "restore"));
            }
        }
    }

    emit_handler(&mut a, CTRL_BASE);
    let restored: BTreeSet<Reg> = map.values().copied().collect();
    emit_restore(&mut a, &restored);
    emit_epilogue(&mut a.insns, &mut a.labels);
    let dump = a.labels["dump"];
    let detect_entry = a.labels["detect"];

    let mut regions = w.program.regions.clone();
    assert!(regions.iter().all(|r| r.name != "ctrl"), "input is already hardened");
    regions.push(MemRegion::new("ctrl", CTRL_BASE, vec![0]));

    let exit_edges = w
        .meta
        .exit_edges
        .iter()
        .map(|e| {
            let from = new_idx[&e.from];
            let to = match e.kind {
                ExitKind::Fallthrough => from + 1,
                ExitKind::Taken => a.labels[payload[e.from].label.as_deref().unwrap()],
            };
            ExitEdge { from, to, kind: e.kind }
        })
        .collect();
    let meta = WorkloadMeta {
        payload: 0..dump,
        loop_head: Some(new_idx[&head]),
        exit_edges,
    };
    let name = format!("{}{}", w.name, Scheme::LoopDup.suffix());
    let program = Program::from_parts(a.insns, a.labels, regions)
        .unwrap_or_else(|e| panic!("{name} failed to assemble: {e}"));

    Ok(HardenedProgram {
        workload: Workload { name: name.clone(), program, meta },
        scheme: Scheme::LoopDup,
        baseline: w.name.clone(),
        detect_entry,
        shadow_map: map.into_iter().map(|(o, s)| (o, Shadow::Reg(s))).collect(),
        signatures: BTreeMap::new(),
        exit_slice: slice_marks,
        restored,
    })
}
