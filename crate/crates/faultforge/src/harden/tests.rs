//! Tests for the countermeasure passes and the detection verifier.

use super::*;
use crate::fault::{apply_fault, CorruptKind, FaultEffect, FaultSpec, Family};
use crate::isa::{assemble, disassemble, run_with, RunResult};
use crate::workloads::{build, judge, standard_regs, WorkloadKind, WorkloadParams};

fn params(len: usize) -> WorkloadParams {
    WorkloadParams { len, ..WorkloadParams::default() }
}

fn run(hp: &HardenedProgram) -> RunResult {
    run_with(&hp.workload.program, standard_regs(), 1_000_000)
}

#[test]
fn hardened_clean_runs_match_baseline_plus_clean_control_word() {
    let cases = [
        (WorkloadKind::Loop1, Scheme::LoopDup),
        (WorkloadKind::Loop2, Scheme::LoopDup),
        (WorkloadKind::Loop2, Scheme::Swift),
        (WorkloadKind::Loop2, Scheme::Stacked),
    ];
    for (kind, scheme) in cases {
        let w = build(kind, &params(6));
        let hp = harden(&w, scheme).unwrap();
        let base = run_with(&w.program, standard_regs(), 1_000_000);
        let hard = run(&hp);
        assert!(base.halted() && hard.halted(), "{}", hp.workload.name);
        assert_eq!(hard.output.regs, base.output.regs, "{}", hp.workload.name);
        assert_eq!(
            hard.output.mem[..base.output.mem.len()],
            base.output.mem[..],
            "{}",
            hp.workload.name
        );
        assert_eq!(hard.output.mem.len(), base.output.mem.len() + 1);
        assert_eq!(*hard.output.mem.last().unwrap(), 0, "clean control word");
    }
}

#[test]
fn hardening_is_deterministic() {
    let w = build(WorkloadKind::Loop2, &params(8));
    for scheme in [Scheme::LoopDup, Scheme::Swift, Scheme::Stacked] {
        assert_eq!(harden(&w, scheme).unwrap(), harden(&w, scheme).unwrap());
    }
}

#[test]
fn size_ratios_sit_in_their_bands() {
    let w1 = build(WorkloadKind::Loop1, &params(16));
    let w2 = build(WorkloadKind::Loop2, &params(16));
    let sec1 = harden(&w1, Scheme::LoopDup).unwrap().size_ratio(&w1);
    let sec2 = harden(&w2, Scheme::LoopDup).unwrap().size_ratio(&w2);
    let swift2 = harden(&w2, Scheme::Swift).unwrap().size_ratio(&w2);
    let stacked2 = harden(&w2, Scheme::Stacked).unwrap().size_ratio(&w2);
    for (name, ratio, lo, hi) in [
        ("loop1-sec", sec1, 2.0, 5.0),
        ("loop2-sec", sec2, 2.0, 5.0),
        ("loop2-swift", swift2, 2.0, 5.0),
        ("loop2-swift-sec", stacked2, 7.0, 16.0),
    ] {
        assert!((lo..=hi).contains(&ratio), "{name}: ratio {ratio:.2} outside [{lo}, {hi}]");
    }
}

#[test]
fn loop_pass_shadows_the_exit_condition_slice() {
    let hp = harden(&build(WorkloadKind::Loop2, &params(4)), Scheme::LoopDup).unwrap();
    let map: Vec<(Reg, Shadow)> = hp.shadow_map.iter().map(|(r, s)| (*r, *s)).collect();
    assert_eq!(
        map,
        vec![
            (Reg(0), Shadow::Reg(Reg(4))),
            (Reg(1), Shadow::Reg(Reg(5))),
            (Reg(2), Shadow::Reg(Reg(6))),
            (Reg(3), Shadow::Reg(Reg(7))),
        ]
    );
    assert!(!hp.exit_slice.is_empty());
    assert!(hp.exit_slice.iter().all(|i| hp.workload.meta.payload.contains(i)));
}

#[test]
fn every_exit_slice_skip_is_covered() {
    for kind in [WorkloadKind::Loop1, WorkloadKind::Loop2] {
        let hp = harden(&build(kind, &params(4)), Scheme::LoopDup).unwrap();
        let rep = verify_detection(&hp, SingleFamily::Skip, SiteScope::ExitSlice);
        assert!(rep.total > 0 && rep.detected > 0, "{}: {rep:?}", hp.workload.name);
        assert!(
            rep.all_covered(),
            "{}: {} escapes, first {:?}",
            hp.workload.name,
            rep.escaped.len(),
            rep.escaped.first()
        );
    }
}

#[test]
fn every_live_single_bit_flip_in_swift_is_covered() {
    let hp = harden(&build(WorkloadKind::Loop2, &params(4)), Scheme::Swift).unwrap();
    let rep = verify_detection(&hp, SingleFamily::BitFlip, SiteScope::Payload);
    assert!(rep.total > 0 && rep.detected > 0, "{rep:?}");
    assert!(
        rep.all_covered(),
        "{} escapes, first {:?}",
        rep.escaped.len(),
        rep.escaped.first()
    );
}

#[test]
fn corrupting_a_shadow_register_is_detected() {
    let w = build(WorkloadKind::Loop2, &params(4));
    let hp = harden(&w, Scheme::LoopDup).unwrap();
    let prog = &hp.workload.program;
    let golden = run(&hp);
    let Shadow::Reg(counter_shadow) = hp.shadow_map[&Reg(0)] else {
        panic!("loop pass uses register shadows")
    };
    // Flip the shadow of the loop counter early in the first iteration; the
    // next agreement check must fire.
    let site = golden
        .trace
        .iter()
        .position(|e| e.at == hp.workload.meta.loop_head.unwrap())
        .unwrap();
    let spec = FaultSpec {
        cycle: site as u32,
        family: Family::RegisterCorruption,
        effects: vec![FaultEffect::RegisterCorruption {
            site,
            reg: counter_shadow,
            value: CorruptKind::Flip(1 << 7),
        }],
    };
    let faulted = apply_fault(prog, standard_regs(), &spec, 1_000_000);
    assert_eq!(judge_run(prog, &golden.output, &faulted), FaultOutcome::Detected);
}

#[test]
fn loop_pass_misses_an_edge_into_the_restore_block() {
    let w = build(WorkloadKind::Loop2, &params(4));
    let hp = harden(&w, Scheme::LoopDup).unwrap();
    let prog = &hp.workload.program;
    let golden = run(&hp);
    let restore = prog.labels["restore"];
    let rb = prog.block_of(restore);
    assert!(prog.blocks[rb].is_branch_target && prog.blocks[rb].entry == restore);
    // Divert control from the middle of the second iteration straight into
    // the restore block: shadows are wound back, the dump runs, and no
    // check ever fires even though the loop was cut short.
    let head = hp.workload.meta.loop_head.unwrap();
    let site = golden
        .trace
        .iter()
        .enumerate()
        .filter(|(_, e)| e.at == head)
        .nth(1)
        .map(|(s, _)| s)
        .unwrap();
    let spec = FaultSpec {
        cycle: site as u32,
        family: Family::MagicEdge,
        effects: vec![FaultEffect::MagicEdge { site, target: restore }],
    };
    let run = apply_fault(prog, standard_regs(), &spec, 1_000_000);
    assert!(run.halted());
    assert_eq!(judge_run(prog, &golden.output, &run), FaultOutcome::Escaped);
    let j = judge(&hp.workload, &golden, &run);
    assert!(j.harmful && !j.reference_equal);
}

#[test]
fn swift_detects_every_illegal_checked_entry_landing() {
    let hp = harden(&build(WorkloadKind::Loop2, &params(4)), Scheme::Swift).unwrap();
    let prog = &hp.workload.program;
    let golden = run(&hp);
    let budget = golden.trace.len() * 10 + 256;
    let targets: Vec<usize> =
        prog.blocks.iter().filter(|b| b.is_branch_target).map(|b| b.entry).collect();
    assert!(targets.len() >= 4, "expected several branch-target entries");
    let payload = hp.workload.meta.payload.clone();
    let mut tried = 0;
    let mut detected = 0;
    for (site, entry) in golden.trace.iter().enumerate() {
        if !payload.contains(&entry.at) {
            continue;
        }
        let from = prog.block_of(entry.at);
        for &target in &targets {
            if prog.blocks[from].succs.contains(&prog.block_of(target)) {
                continue; // forcing a legal edge is outside this guarantee
            }
            let spec = FaultSpec {
                cycle: site as u32,
                family: Family::MagicEdge,
                effects: vec![FaultEffect::MagicEdge { site, target }],
            };
            let run = apply_fault(prog, standard_regs(), &spec, budget);
            // Masked is legitimate only when the edge never fired: the
            // final block ends in halt, which stops the run before an armed
            // override can take effect. Everything that fires must detect.
            match judge_run(prog, &golden.output, &run) {
                FaultOutcome::Detected => detected += 1,
                FaultOutcome::Masked => {}
                other => panic!(
                    "{other:?} edge from step {site} (instruction {}) to {target}",
                    entry.at
                ),
            }
            tried += 1;
        }
    }
    assert!(tried > 100, "swept only {tried} edges");
    assert!(detected * 10 > tried * 9, "only {detected} of {tried} edges detected");
}

#[test]
fn full_duplication_reports_register_pressure_on_wide_workloads() {
    for kind in [WorkloadKind::Loop1, WorkloadKind::MultiCounter] {
        let w = build(kind, &WorkloadParams::default());
        match harden(&w, Scheme::Swift) {
            Err(HardenError::RegisterPressure { needed, available }) => {
                assert!(needed > available, "{}: {needed} vs {available}", w.name)
            }
            other => panic!("{}: expected register pressure, got {other:?}", w.name),
        }
    }
}

#[test]
fn loop_pass_rejects_straight_line_workloads() {
    let w = build(WorkloadKind::NopSeq, &params(16));
    assert!(matches!(harden(&w, Scheme::LoopDup), Err(HardenError::NoLoop(_))));
}

#[test]
fn stacked_pass_composes_both_schemes() {
    let w = build(WorkloadKind::Loop2, &params(6));
    let hp = harden(&w, Scheme::Stacked).unwrap();
    assert_eq!(hp.scheme, Scheme::Stacked);
    assert_eq!(hp.baseline, "loop2");
    assert_eq!(hp.workload.name, "loop2-swift-sec");
    // The inner pass's reload-backed duplicates appear once registers run
    // out, and the signature chain is present.
    assert!(hp.shadow_map.values().any(|s| matches!(s, Shadow::Reload { .. })));
    assert!(hp.signatures.len() >= 4);
}

#[test]
fn block_signatures_are_odd_and_pairwise_distant() {
    for scheme in [Scheme::Swift, Scheme::Stacked] {
        let hp = harden(&build(WorkloadKind::Loop2, &params(6)), scheme).unwrap();
        let sigs: Vec<u32> = hp.signatures.values().copied().collect();
        assert_eq!(sigs.len(), 4);
        for (i, a) in sigs.iter().enumerate() {
            assert_eq!(a & 1, 1, "signature {a:#x} is even");
            for b in &sigs[i + 1..] {
                assert!((a ^ b).count_ones() >= 2, "{a:#x} and {b:#x} too close");
            }
        }
    }
}

#[test]
fn hardened_programs_survive_a_disassembly_round_trip() {
    let w = build(WorkloadKind::Loop2, &params(5));
    for scheme in [Scheme::LoopDup, Scheme::Swift, Scheme::Stacked] {
        let hp = harden(&w, scheme).unwrap();
        let text = disassemble(&hp.workload.program);
        let back = assemble(&text).unwrap();
        assert_eq!(back.instructions, hp.workload.program.instructions, "{}", hp.workload.name);
        assert_eq!(back.labels, hp.workload.program.labels);
        assert_eq!(back.regions, hp.workload.program.regions);
    }
}
