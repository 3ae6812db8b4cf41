//! Built-in victim programs: straight-line calibration sequences and two
//! array-copy loops, each with metadata describing the payload span, the
//! loop head and the legal loop exits, plus a judge that decides whether a
//! corrupted run broke control flow or only data.

use crate::isa::{Instruction, MemRegion, Opcode, Program, Reg, RunResult, SCRATCH};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::ops::Range;

/// Base of the result-dump region written by the shared epilogue.
pub const OUT_BASE: u32 = 0x400;
/// Base of the detection-handler control word added by hardening passes.
pub const CTRL_BASE: u32 = 0x500;
/// First data region base for loop workloads.
pub const DATA_BASE: u32 = 0x100;

/// Counter increments for the multi-counter workload, one prime per counter.
pub const COUNTER_STEPS: [i32; 10] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29];
/// Rounds of the multi-counter round-robin.
pub const COUNTER_ROUNDS: usize = 6;

/// Initial architectural state used by every experiment: register i holds
/// bit i, so single-bit corruptions are visible and attributable.
pub fn standard_regs() -> [u32; 16] {
    let mut regs = [0u32; 16];
    for (i, slot) in regs.iter_mut().enumerate().take(15) {
        *slot = 1u32 << i;
    }
    regs
}

/// Fill pattern for data region `j`: word `k` holds `0xA0000000 | j<<16 | k`,
/// so every word names its own home.
pub fn region_pattern(j: u32, len: usize) -> Vec<u32> {
    (0..len as u32).map(|k| 0xA000_0000 | (j << 16) | k).collect()
}

/// How control legally leaves the loop.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExitKind {
    /// Conditional branch not taken, falling out of the loop.
    Fallthrough,
    /// Conditional branch taken out of the loop.
    Taken,
}

/// A legal transition out of the loop: executing `from` then `to`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExitEdge {
    pub from: usize,
    pub to: usize,
    pub kind: ExitKind,
}

/// Structural facts about a workload the judge and campaign need.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkloadMeta {
    /// Instruction index range of the algorithm itself (epilogue excluded).
    pub payload: Range<usize>,
    /// First instruction of the loop body; its execution count is the
    /// iteration count. `None` for straight-line workloads.
    pub loop_head: Option<usize>,
    /// Legal loop exits, in program order.
    pub exit_edges: Vec<ExitEdge>,
}

/// A victim program plus the metadata needed to judge corrupted runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Workload {
    pub name: String,
    pub program: Program,
    pub meta: WorkloadMeta,
}

/// The available generators.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum WorkloadKind {
    NopSeq,
    SingleCounter,
    MultiCounter,
    Loop1,
    Loop2,
}

impl WorkloadKind {
    pub const ALL: [WorkloadKind; 5] = [
        WorkloadKind::NopSeq,
        WorkloadKind::SingleCounter,
        WorkloadKind::MultiCounter,
        WorkloadKind::Loop1,
        WorkloadKind::Loop2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            WorkloadKind::NopSeq => "nop-seq",
            WorkloadKind::SingleCounter => "single-counter",
            WorkloadKind::MultiCounter => "multi-counter",
            WorkloadKind::Loop1 => "loop1",
            WorkloadKind::Loop2 => "loop2",
        }
    }

    pub fn from_name(name: &str) -> Option<WorkloadKind> {
        WorkloadKind::ALL.into_iter().find(|k| k.name() == name)
    }

    pub fn describe(self) -> &'static str {
        match self {
            WorkloadKind::NopSeq => "straight-line run of nops, a silent baseline",
            WorkloadKind::SingleCounter => "one register incremented n times",
            WorkloadKind::MultiCounter => {
                "up to ten counters stepped round-robin by distinct primes"
            }
            WorkloadKind::Loop1 => "array copy, register-rich coding over nine registers",
            WorkloadKind::Loop2 => "array compare-and-copy, tight four-register coding",
        }
    }
}

/// Generator parameters; every field has a sensible default.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkloadParams {
    /// Element count for loops, instruction count for straight-line runs.
    pub len: usize,
    /// Counter register for the single-counter workload.
    pub reg: Reg,
    /// Number of counters for the multi-counter workload (at most ten).
    pub counters: usize,
    /// Nops inserted between counter increments.
    pub spacing: usize,
}

impl Default for WorkloadParams {
    fn default() -> Self {
        WorkloadParams { len: 16, reg: Reg(0), counters: 10, spacing: 0 }
    }
}

/// Builds the named workload.
pub fn build(kind: WorkloadKind, params: &WorkloadParams) -> Workload {
    match kind {
        WorkloadKind::NopSeq => gen_nop_seq(params.len),
        WorkloadKind::SingleCounter => gen_single_counter(params.reg, params.len),
        WorkloadKind::MultiCounter => gen_multi_counter(params.counters, params.spacing),
        WorkloadKind::Loop1 => gen_loop1(params.len),
        WorkloadKind::Loop2 => gen_loop2(params.len),
    }
}

/// Appends the result dump: the out-region base into the scratch register,
/// one store per architectural register r0..r13, then halt.
pub fn emit_epilogue(insns: &mut Vec<Instruction>, labels: &mut BTreeMap<String, usize>) {
    labels.insert("dump".to_string(), insns.len());
    insns.push(Instruction::movi(SCRATCH, OUT_BASE as i32));
    for i in 0..14 {
        insns.push(Instruction::store(Reg(i), SCRATCH, i as i32));
    }
    insns.push(Instruction::halt());
}

fn out_region() -> MemRegion {
    MemRegion::new("out", OUT_BASE, vec![0; 14])
}

fn finish(
    name: &str,
    insns: Vec<Instruction>,
    labels: BTreeMap<String, usize>,
    regions: Vec<MemRegion>,
    meta: WorkloadMeta,
) -> Workload {
    let program = Program::from_parts(insns, labels, regions)
        .unwrap_or_else(|e| panic!("workload {name} failed to build: {e}"));
    Workload { name: name.to_string(), program, meta }
}

/// `len` nops followed by the epilogue. Nothing to corrupt but timing.
pub fn gen_nop_seq(len: usize) -> Workload {
    let mut insns = vec![Instruction::nop(); len];
    let mut labels = BTreeMap::new();
    let payload = 0..insns.len();
    emit_epilogue(&mut insns, &mut labels);
    let meta = WorkloadMeta { payload, loop_head: None, exit_edges: Vec::new() };
    finish("nop-seq", insns, labels, vec![out_region()], meta)
}

/// `len` unit increments of one register in r0..r9.
pub fn gen_single_counter(reg: Reg, len: usize) -> Workload {
    assert!(reg.0 < 10, "counter register must be r0..r9, got {reg}");
    let mut insns = vec![Instruction::addi(reg, reg, 1); len];
    let mut labels = BTreeMap::new();
    let payload = 0..insns.len();
    emit_epilogue(&mut insns, &mut labels);
    let meta = WorkloadMeta { payload, loop_head: None, exit_edges: Vec::new() };
    finish("single-counter", insns, labels, vec![out_region()], meta)
}

/// Round-robin over `counters` registers, each stepped by its own prime,
/// with `spacing` nops between increments to thin the in-flight window.
pub fn gen_multi_counter(counters: usize, spacing: usize) -> Workload {
    assert!((1..=10).contains(&counters), "counters must be 1..=10, got {counters}");
    let mut insns = Vec::new();
    for _ in 0..COUNTER_ROUNDS {
        for (i, &step) in COUNTER_STEPS.iter().enumerate().take(counters) {
            insns.push(Instruction::addi(Reg(i as u8), Reg(i as u8), step));
            insns.extend(std::iter::repeat(Instruction::nop()).take(spacing));
        }
    }
    let mut labels = BTreeMap::new();
    let payload = 0..insns.len();
    emit_epilogue(&mut insns, &mut labels);
    let meta = WorkloadMeta { payload, loop_head: None, exit_edges: Vec::new() };
    finish("multi-counter", insns, labels, vec![out_region()], meta)
}

/// Array copy in a register-rich coding: index, two pointers and the bound
/// each live in their own register and every value moves through fresh
/// temporaries, so many registers matter at once.
///
/// r0 index, r1 src pointer, r2 dst pointer, r3 bound, r4..r8 temporaries.
pub fn gen_loop1(len: usize) -> Workload {
    assert!(len >= 1, "loop1 needs at least one element");
    let src_base = DATA_BASE;
    let dst_base = DATA_BASE + 0x80;
    assert!(len as u32 <= 0x80, "loop1 supports up to 128 elements");
    let mut insns = vec![
        Instruction::movi(Reg(0), 0),
        Instruction::movi(Reg(1), src_base as i32),
        Instruction::movi(Reg(2), dst_base as i32),
        Instruction::movi(Reg(3), len as i32),
    ];
    let mut labels = BTreeMap::new();
    labels.insert("loop".to_string(), insns.len());
    let head = insns.len();
    insns.extend([
        Instruction::ldr(Reg(4), Reg(1), 0),
        Instruction::mov(Reg(5), Reg(4)),
        Instruction::add(Reg(6), Reg(5), Reg(0)),
        Instruction::mov(Reg(7), Reg(6)),
        Instruction::store(Reg(7), Reg(2), 0),
        Instruction::addi(Reg(8), Reg(0), 1),
        Instruction::mov(Reg(0), Reg(8)),
        Instruction::addi(Reg(1), Reg(1), 1),
        Instruction::addi(Reg(2), Reg(2), 1),
        Instruction::cmp(Reg(0), Reg(3)),
        Instruction::branch(Opcode::Blt, "loop"),
    ]);
    let exit_from = insns.len() - 1;
    let payload = 0..insns.len();
    emit_epilogue(&mut insns, &mut labels);
    let meta = WorkloadMeta {
        payload,
        loop_head: Some(head),
        exit_edges: vec![ExitEdge { from: exit_from, to: exit_from + 1, kind: ExitKind::Fallthrough }],
    };
    let regions = vec![
        MemRegion::new("src", src_base, region_pattern(0, len)),
        MemRegion::new("dst", dst_base, vec![0; len]),
        out_region(),
    ];
    finish("loop1", insns, labels, regions, meta)
}

/// Array compare-and-copy in a tight four-register coding: one rolling
/// pointer reaches all three adjacent regions through fixed offsets, and an
/// early exit fires if the two sources ever agree (they never do in a clean
/// run, so the early block is a legal but normally dead exit target).
///
/// r0 index, r1 rolling pointer, r2 and r3 temporaries.
pub fn gen_loop2(len: usize) -> Workload {
    assert!(len >= 1, "loop2 needs at least one element");
    let n = len as i32;
    let base = DATA_BASE;
    let mut insns = vec![
        Instruction::movi(Reg(0), 0),
        Instruction::movi(Reg(1), base as i32),
    ];
    let mut labels = BTreeMap::new();
    labels.insert("loop".to_string(), insns.len());
    let head = insns.len();
    insns.extend([
        Instruction::ldr(Reg(2), Reg(1), 0),
        Instruction::ldr(Reg(3), Reg(1), n),
        Instruction::store(Reg(2), Reg(1), 2 * n),
        Instruction::cmp(Reg(2), Reg(3)),
        Instruction::branch(Opcode::Beq, "found"),
        Instruction::addi(Reg(1), Reg(1), 1),
        Instruction::addi(Reg(0), Reg(0), 1),
        Instruction::cmpi(Reg(0), n),
        Instruction::branch(Opcode::Blt, "loop"),
    ]);
    let early_from = head + 4;
    let exit_from = insns.len() - 1;
    insns.push(Instruction::branch(Opcode::B, "dump"));
    labels.insert("found".to_string(), insns.len());
    let found = insns.len();
    insns.push(Instruction::movi(Reg(3), 0xF00D));
    insns.push(Instruction::branch(Opcode::B, "dump"));
    let payload = 0..insns.len();
    emit_epilogue(&mut insns, &mut labels);
    let meta = WorkloadMeta {
        payload,
        loop_head: Some(head),
        exit_edges: vec![
            ExitEdge { from: early_from, to: found, kind: ExitKind::Taken },
            ExitEdge { from: exit_from, to: exit_from + 1, kind: ExitKind::Fallthrough },
        ],
    };
    let regions = vec![
        MemRegion::new("src1", base, region_pattern(0, len)),
        MemRegion::new("src2", base + len as u32, region_pattern(1, len)),
        MemRegion::new("dst", base + 2 * len as u32, vec![0; len]),
        out_region(),
    ];
    finish("loop2", insns, labels, regions, meta)
}

/// What the judge concluded about one corrupted run.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Judgement {
    /// Output buffer matches the clean run.
    pub reference_equal: bool,
    /// (expected, observed) loop iteration counts, for loop workloads.
    pub iterations: Option<(usize, usize)>,
    /// Loop left through the same legal exits as the clean run.
    pub exit_ok: Option<bool>,
    /// Control flow broke: wrong iteration count or wrong exit.
    pub harmful: bool,
}

fn exits_traversed(w: &Workload, run: &RunResult) -> Vec<usize> {
    run.trace
        .transitions()
        .filter_map(|(a, b)| {
            w.meta
                .exit_edges
                .iter()
                .position(|e| e.from == a && e.to == b)
        })
        .collect()
}

/// Compares a corrupted run against the clean one. For loop workloads a
/// fault is harmful when it changes the iteration count or the exit path;
/// straight-line workloads have no control flow to break.
pub fn judge(w: &Workload, golden: &RunResult, run: &RunResult) -> Judgement {
    let reference_equal = run.output == golden.output;
    match w.meta.loop_head {
        None => Judgement { reference_equal, iterations: None, exit_ok: None, harmful: false },
        Some(head) => {
            let expected = golden.trace.executions_of(head);
            let observed = run.trace.executions_of(head);
            let exit_ok = exits_traversed(w, run) == exits_traversed(w, golden);
            Judgement {
                reference_equal,
                iterations: Some((expected, observed)),
                exit_ok: Some(exit_ok),
                harmful: expected != observed || !exit_ok,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::{disassemble, run_with, Termination};

    fn run(w: &Workload) -> RunResult {
        let r = run_with(&w.program, standard_regs(), 1_000_000);
        assert_eq!(r.termination, Termination::Halted, "{} must halt", w.name);
        r
    }

    #[test]
    fn nop_seq_dumps_initial_registers() {
        let w = gen_nop_seq(20);
        let r = run(&w);
        let expect: Vec<u32> = (0..14).map(|i| 1 << i).collect();
        assert_eq!(r.output.regs, expect);
        assert_eq!(&r.output.mem[..14], &expect[..], "dump region mirrors the registers");
    }

    #[test]
    fn single_counter_totals() {
        let w = gen_single_counter(Reg(3), 25);
        let r = run(&w);
        assert_eq!(r.output.regs[3], (1 << 3) + 25);
        assert_eq!(r.output.regs[2], 1 << 2, "other registers untouched");
    }

    #[test]
    fn multi_counter_steps_by_primes() {
        let w = gen_multi_counter(10, 2);
        let r = run(&w);
        for (i, &step) in COUNTER_STEPS.iter().enumerate() {
            assert_eq!(
                r.output.regs[i],
                (1u32 << i).wrapping_add((COUNTER_ROUNDS as i32 * step) as u32),
                "counter r{i} stepped six rounds by {step}"
            );
        }
    }

    #[test]
    fn loop1_copies_with_index_offset() {
        let n = 16;
        let w = gen_loop1(n);
        let r = run(&w);
        // Memory buffer layout follows region declaration: src, dst, out.
        let dst = &r.output.mem[n..2 * n];
        for (k, &word) in dst.iter().enumerate() {
            assert_eq!(word, region_pattern(0, n)[k] + k as u32);
        }
        let j = judge(&w, &r, &r);
        assert_eq!(j.iterations, Some((n, n)));
        assert!(j.reference_equal && j.exit_ok == Some(true) && !j.harmful);
    }

    #[test]
    fn loop2_copies_and_never_finds() {
        let n = 16;
        let w = gen_loop2(n);
        let r = run(&w);
        // Memory buffer layout follows region declaration: src1, src2, dst, out.
        let dst = &r.output.mem[2 * n..3 * n];
        assert_eq!(dst, &region_pattern(0, n)[..]);
        assert_ne!(r.output.regs[3], 0xF00D, "early-exit marker stays clear");
        assert_eq!(r.trace.executions_of(w.meta.loop_head.unwrap()), n);
    }

    #[test]
    fn loop2_takes_early_exit_on_planted_match() {
        let n = 8;
        let mut w = gen_loop2(n);
        // Plant a match at element 3 and rebuild the program around it.
        let mut regions = w.program.regions.clone();
        regions[1].init[3] = regions[0].init[3];
        w.program = Program::from_parts(
            w.program.instructions.clone(),
            w.program.labels.clone(),
            regions,
        )
        .unwrap();
        let clean = run(&gen_loop2(n));
        let r = run(&w);
        assert_eq!(r.output.regs[3], 0xF00D, "marker set by the early block");
        let j = judge(&gen_loop2(n), &clean, &r);
        assert_eq!(j.iterations, Some((n, 4)), "match at index 3 stops the fourth pass");
        assert_eq!(j.exit_ok, Some(false));
        assert!(j.harmful, "wrong exit is a control-flow break");
    }

    #[test]
    fn judge_sees_data_corruption_as_harmless() {
        let n = 8;
        let w = gen_loop1(n);
        let clean = run(&w);
        let mut bent = clean.clone();
        bent.output.mem[20] ^= 0x40;
        let j = judge(&w, &clean, &bent);
        assert!(!j.reference_equal);
        assert!(!j.harmful, "same trace, different data: harmless corruption");
    }

    #[test]
    fn payload_excludes_epilogue_on_every_workload() {
        for kind in WorkloadKind::ALL {
            let w = build(kind, &WorkloadParams::default());
            let dump = w.program.labels["dump"];
            assert_eq!(w.meta.payload.end, dump, "{}", w.name);
            assert_eq!(w.meta.payload.start, 0);
            // Epilogue: region pointer load, fourteen stores, halt.
            assert_eq!(w.program.instructions.len(), dump + 16);
            assert_eq!(w.program.instructions.last().unwrap().op, Opcode::Halt);
        }
    }

    #[test]
    fn workloads_survive_disassembly() {
        for kind in WorkloadKind::ALL {
            let w = build(kind, &WorkloadParams::default());
            let text = disassemble(&w.program);
            let back = crate::isa::assemble(&text)
                .unwrap_or_else(|e| panic!("{} text form: {e}", w.name));
            assert_eq!(back, w.program, "{} round-trips through text", w.name);
        }
    }

    #[test]
    fn registry_names_are_stable() {
        for kind in WorkloadKind::ALL {
            assert_eq!(WorkloadKind::from_name(kind.name()), Some(kind));
            assert!(!kind.describe().is_empty());
        }
        assert_eq!(WorkloadKind::from_name("bogus"), None);
    }
}
