//! Unit tests for fault application and sampling, including the frozen
//! arithmetic oracles for skip, substitution and skip+replay signatures.

use super::*;
use crate::isa::{run_with, Instruction, Opcode, Program, Reg, RunResult, Termination};
use crate::timing::{inflight_at, operand_pool, pool_regs, schedule, Operand, TimedTrace, TimingConfig};
use crate::workloads::{
    gen_loop1, gen_loop2, gen_multi_counter, gen_nop_seq, gen_single_counter, judge, region_pattern,
    standard_regs, Workload, COUNTER_STEPS,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeSet;

const BUDGET: usize = 1_000_000;

fn prep(w: &Workload) -> (RunResult, TimedTrace) {
    let clean = run_with(&w.program, standard_regs(), BUDGET);
    assert_eq!(clean.termination, Termination::Halted);
    let tt = schedule(&w.program, &clean.trace, &TimingConfig::default(), 0);
    (clean, tt)
}

#[test]
fn skip_loses_one_increment() {
    let w = gen_single_counter(Reg(0), 20);
    let mut regs = [0u32; 16];
    regs[0] = 0;
    let spec = FaultSpec {
        cycle: 0,
        family: Family::Skip,
        effects: vec![FaultEffect::Skip { site: 4 }],
    };
    let r = apply_fault(&w.program, regs, &spec, BUDGET);
    assert_eq!(r.termination, Termination::Halted);
    assert_eq!(r.output.regs[0], 19, "one of twenty increments vanished");
}

#[test]
fn immediate_substitution_doubles_then_counts() {
    // Replacing the unit immediate with the counter register itself turns
    // the increment into a doubling. With k prior increments the counter
    // holds init+k, the faulted step doubles it, and n-1-k increments
    // remain: final = 2*(init+k) + (n-1-k). Verified at every site.
    let n = 20;
    let w = gen_single_counter(Reg(0), n);
    let init = standard_regs()[0];
    for k in 0..n {
        let spec = FaultSpec {
            cycle: 0,
            family: Family::OperandSubstitution,
            effects: vec![FaultEffect::OperandSubstitution {
                site: k,
                slot: OperandSlot::Imm,
                with: Operand::Reg(Reg(0)),
            }],
        };
        let r = apply_fault(&w.program, standard_regs(), &spec, BUDGET);
        let expect = 2 * (init + k as u32) + (n - 1 - k) as u32;
        assert_eq!(r.output.regs[0], expect, "site {k}");
    }
}

#[test]
fn skip_replay_pair_moves_one_step_between_counters() {
    let w = gen_multi_counter(10, 0);
    let clean = run_with(&w.program, standard_regs(), BUDGET);
    // Skip the eighth counter's first increment and replay the third's.
    let spec = FaultSpec {
        cycle: 0,
        family: Family::Composite(CompositeKind::SkipReplay),
        effects: vec![
            FaultEffect::Skip { site: 7 },
            FaultEffect::Replay { site: 7, replayed: 2 },
        ],
    };
    let r = apply_fault(&w.program, standard_regs(), &spec, BUDGET);
    assert_eq!(r.output.regs[7], clean.output.regs[7].wrapping_sub(COUNTER_STEPS[7] as u32));
    assert_eq!(r.output.regs[2], clean.output.regs[2].wrapping_add(COUNTER_STEPS[2] as u32));
    for i in (0..14).filter(|&i| i != 7 && i != 2) {
        assert_eq!(r.output.regs[i], clean.output.regs[i], "r{i} untouched");
    }
}

#[test]
fn mshw_reset_clears_high_half() {
    let p = Program::from_parts(
        vec![
            Instruction::movi(Reg(0), 0x1234_5678),
            Instruction::mov(Reg(1), Reg(0)),
            Instruction::halt(),
        ],
        Default::default(),
        Vec::new(),
    )
    .unwrap();
    let spec = FaultSpec {
        cycle: 0,
        family: Family::MshwReset,
        effects: vec![FaultEffect::MshwReset { site: 1, reg: Reg(0) }],
    };
    let r = apply_fault(&p, [0; 16], &spec, BUDGET);
    assert_eq!(r.output.regs[0], 0x5678);
    assert_eq!(r.output.regs[1], 0x5678, "the copy sees the reset value");
}

#[test]
fn load_corruption_leaves_memory_intact() {
    let n = 8;
    let w = gen_loop1(n);
    let clean = run_with(&w.program, standard_regs(), BUDGET);
    // Dynamic step 4 is the first load (after four setup moves).
    for value in [CorruptKind::Flip(0xFF), CorruptKind::Set(0xBEEF_0000)] {
        let spec = FaultSpec {
            cycle: 0,
            family: Family::LoadCorruption,
            effects: vec![FaultEffect::LoadCorruption { site: 4, value }],
        };
        let r = apply_fault(&w.program, standard_regs(), &spec, BUDGET);
        let delivered = value.apply(region_pattern(0, n)[0]);
        assert_eq!(r.output.mem[n], delivered, "first destination word built from bad load");
        assert_eq!(
            r.output.mem[..n],
            clean.output.mem[..n],
            "source region untouched"
        );
        let j = judge(&w, &clean, &r);
        assert!(!j.reference_equal && !j.harmful, "data-only corruption");
    }
}

#[test]
fn magic_edge_forces_early_exit_through_legal_entry() {
    let n = 8;
    let w = gen_loop2(n);
    let clean = run_with(&w.program, standard_regs(), BUDGET);
    let found_entry = w.program.labels["found"];
    // A pulse on the first load arms the edge; it fires at the block's
    // closing branch and lands on the early-exit block entry.
    let spec = FaultSpec {
        cycle: 0,
        family: Family::MagicEdge,
        effects: vec![FaultEffect::MagicEdge { site: 2, target: found_entry }],
    };
    let r = apply_fault(&w.program, standard_regs(), &spec, BUDGET);
    assert_eq!(r.output.regs[3], 0xF00D, "early-exit marker set");
    let j = judge(&w, &clean, &r);
    assert_eq!(j.iterations, Some((n, 1)));
    assert!(j.harmful, "loop cut short through a legal-looking edge");
}

#[test]
fn magic_edge_is_masked_by_a_closing_halt() {
    let n = 8;
    let w = gen_loop2(n);
    let clean = run_with(&w.program, standard_regs(), BUDGET);
    // Dynamic index of the first epilogue instruction: two setup moves,
    // eight nine-instruction iterations, one jump to the dump.
    let site = 2 + 9 * n + 1;
    assert_eq!(clean.trace[site].at, w.program.labels["dump"]);
    let spec = FaultSpec {
        cycle: 0,
        family: Family::MagicEdge,
        effects: vec![FaultEffect::MagicEdge { site, target: w.meta.loop_head.unwrap() }],
    };
    let r = apply_fault(&w.program, standard_regs(), &spec, BUDGET);
    assert_eq!(r.output, clean.output, "the dump block ends in halt, so the edge never fires");
    assert_eq!(r.termination, Termination::Halted);
}

#[test]
fn empty_effect_list_is_a_clean_run() {
    for w in [gen_loop1(8), gen_loop2(8), gen_multi_counter(10, 1)] {
        let clean = run_with(&w.program, standard_regs(), BUDGET);
        let r = apply_effects(&w.program, standard_regs(), &[], BUDGET);
        assert_eq!(r, clean);
    }
}

#[test]
fn sampled_singles_only_touch_window_operands() {
    let w = gen_multi_counter(10, 1);
    let (clean, tt) = prep(&w);
    let profile = EffectProfile::paper_em_default();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut checked = 0;
    for cycle in 0..tt.total_cycles {
        let s = sample_fault(&profile, &w.program, &clean.trace, &tt, cycle, &mut rng);
        let Sampled::Fault(spec) = s else { continue };
        if matches!(spec.family, Family::Mixed | Family::MagicEdge) {
            continue;
        }
        let inflight = inflight_at(&tt, cycle).unwrap();
        let pool = operand_pool(&w.program, &clean.trace, &inflight);
        let allowed: BTreeSet<usize> =
            pool_regs(&pool).into_iter().map(|r| r.index()).collect();
        let r = apply_fault(&w.program, standard_regs(), &spec, BUDGET);
        for idx in r.output.reg_diff(&clean.output) {
            assert!(
                allowed.contains(&idx),
                "cycle {cycle}: r{idx} corrupted but not in the window pool {allowed:?}"
            );
        }
        checked += 1;
    }
    assert!(checked > 20, "exercised {checked} sampled faults");
}

#[test]
fn mute_rate_matches_profile_weight() {
    let w = gen_multi_counter(10, 0);
    let (clean, tt) = prep(&w);
    let profile = EffectProfile::paper_em_default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let total = 10_000;
    let mutes = (0..total)
        .filter(|_| {
            matches!(
                sample_fault(&profile, &w.program, &clean.trace, &tt, 3, &mut rng),
                Sampled::Mute
            )
        })
        .count();
    let frac = mutes as f64 / total as f64;
    assert!((frac - 0.029).abs() < 0.005, "mute fraction {frac}");
}

#[test]
fn nop_window_offers_nothing_to_pool_families() {
    let w = gen_nop_seq(40);
    let (clean, tt) = prep(&w);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for family in [
        Family::RegisterCorruption,
        Family::OperandSubstitution,
        Family::LoadCorruption,
        Family::Composite(CompositeKind::Correlated),
    ] {
        let p = EffectProfile::single(family);
        for cycle in 0..10 {
            assert_eq!(
                sample_fault(&p, &w.program, &clean.trace, &tt, cycle, &mut rng),
                Sampled::NoEffect,
                "{family} over a nop-only window"
            );
        }
    }
    // A skip is always applicable, it just has nothing visible to undo.
    let p = EffectProfile::single(Family::Skip);
    let s = sample_fault(&p, &w.program, &clean.trace, &tt, 5, &mut rng);
    let Sampled::Fault(spec) = s else { panic!("skip must sample") };
    let r = apply_fault(&w.program, standard_regs(), &spec, BUDGET);
    assert_eq!(r.output, clean.output, "skipping a nop changes nothing");
}

#[test]
fn degenerate_profile_samples_only_its_family() {
    let w = gen_loop1(8);
    let (clean, tt) = prep(&w);
    let p = EffectProfile::single(Family::Skip);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for i in 0..100 {
        let cycle = i % tt.total_cycles;
        match sample_fault(&p, &w.program, &clean.trace, &tt, cycle, &mut rng) {
            Sampled::Fault(spec) => assert_eq!(spec.family, Family::Skip),
            other => panic!("expected a skip sample, got {other:?}"),
        }
    }
}

#[test]
fn correlated_burst_shares_one_mask() {
    let w = gen_multi_counter(10, 0);
    let (clean, tt) = prep(&w);
    let p = EffectProfile::single(Family::Composite(CompositeKind::Correlated));
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut seen = 0;
    for i in 0..50 {
        let cycle = i % tt.total_cycles;
        let Sampled::Fault(spec) =
            sample_fault(&p, &w.program, &clean.trace, &tt, cycle, &mut rng)
        else {
            continue;
        };
        let masks: BTreeSet<u32> = spec
            .effects
            .iter()
            .map(|e| match e {
                FaultEffect::RegisterCorruption { value: CorruptKind::Flip(m), .. } => *m,
                other => panic!("unexpected effect {other:?}"),
            })
            .collect();
        assert_eq!(masks.len(), 1, "burst driven by a single mask");
        assert!(spec.effects.len() >= 2);
        let mask = masks.into_iter().next().unwrap();
        assert!((1..=4).contains(&mask.count_ones()), "flip mask stays narrow");
        seen += 1;
    }
    assert!(seen > 10);
}

#[test]
fn magic_edge_samples_land_on_branch_target_entries() {
    let w = gen_loop2(8);
    let (clean, tt) = prep(&w);
    let entries: BTreeSet<usize> = w
        .program
        .blocks
        .iter()
        .filter(|b| b.is_branch_target)
        .map(|b| b.entry)
        .collect();
    assert!(entries.len() >= 3, "loop head, early exit and dump are all branch targets");
    let p = EffectProfile::single(Family::MagicEdge);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut hit: BTreeSet<usize> = BTreeSet::new();
    for i in 0..400 {
        let cycle = i % tt.total_cycles;
        let Sampled::Fault(spec) =
            sample_fault(&p, &w.program, &clean.trace, &tt, cycle, &mut rng)
        else {
            continue;
        };
        let FaultEffect::MagicEdge { target, .. } = spec.effects[0] else {
            panic!("wrong effect")
        };
        assert!(entries.contains(&target), "target {target} is not a block entry");
        hit.insert(target);
    }
    assert_eq!(hit, entries, "every legal landing pad eventually drawn");
}

#[test]
fn substitution_switches_between_twin_encodings() {
    let addi = Instruction::addi(Reg(0), Reg(0), 1);
    let as_add = substitute(&addi, OperandSlot::Imm, Operand::Reg(Reg(3))).unwrap();
    assert_eq!(as_add.op, Opcode::Add);
    assert_eq!(as_add.src2, Some(Reg(3)));
    assert_eq!(as_add.imm, None);

    let add = Instruction::add(Reg(1), Reg(2), Reg(3));
    let as_addi = substitute(&add, OperandSlot::Src2, Operand::Imm(7)).unwrap();
    assert_eq!(as_addi.op, Opcode::Addi);
    assert_eq!(as_addi.imm, Some(7));

    let cmpi = Instruction::cmpi(Reg(0), 8);
    let as_cmp = substitute(&cmpi, OperandSlot::Imm, Operand::Reg(Reg(4))).unwrap();
    assert_eq!(as_cmp.op, Opcode::Cmp);

    let movi = Instruction::movi(Reg(2), 5);
    let as_mov = substitute(&movi, OperandSlot::Imm, Operand::Reg(Reg(1))).unwrap();
    assert_eq!(as_mov.op, Opcode::Mov);
    assert_eq!(as_mov.src1, Some(Reg(1)));

    // Combinations with no executable encoding are rejected.
    let ldr = Instruction::ldr(Reg(0), Reg(1), 2);
    assert!(substitute(&ldr, OperandSlot::Imm, Operand::Reg(Reg(2))).is_none());
    let store = Instruction::store(Reg(0), Reg(1), 0);
    assert!(substitute(&store, OperandSlot::Dest, Operand::Reg(Reg(2))).is_none());
    assert!(substitute(&addi, OperandSlot::Src1, Operand::Imm(3)).is_none());
    // Destination substitution redirects the written register.
    let redirected = substitute(&addi, OperandSlot::Dest, Operand::Reg(Reg(9))).unwrap();
    assert_eq!(redirected.write_reg(), Some(Reg(9)));
    assert_eq!(redirected.src1, Some(Reg(0)));
}

#[test]
fn destination_substitution_corrupts_two_registers() {
    let w = gen_multi_counter(10, 0);
    let clean = run_with(&w.program, standard_regs(), BUDGET);
    // Round 0, counter 4: redirect its first increment into r9.
    let spec = FaultSpec {
        cycle: 0,
        family: Family::OperandSubstitution,
        effects: vec![FaultEffect::OperandSubstitution {
            site: 4,
            slot: OperandSlot::Dest,
            with: Operand::Reg(Reg(9)),
        }],
    };
    let r = apply_fault(&w.program, standard_regs(), &spec, BUDGET);
    let diff = r.output.reg_diff(&clean.output);
    assert_eq!(diff, vec![4, 9], "victim and accomplice both corrupted");
    assert_eq!(r.output.regs[4], clean.output.regs[4] - COUNTER_STEPS[4] as u32);
    // The accomplice is overwritten with the victim's computation, then
    // keeps stepping on its own: (init4 + step4) + six of its own steps.
    let expect9 = (1u32 << 4) + COUNTER_STEPS[4] as u32 + 6 * COUNTER_STEPS[9] as u32;
    assert_eq!(r.output.regs[9], expect9);
}

#[test]
fn sampler_and_spec_serialization_are_deterministic() {
    let w = gen_loop2(8);
    let (clean, tt) = prep(&w);
    let profile = EffectProfile::paper_em_default();
    let sample_all = |seed: u64| -> Vec<Sampled> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..tt.total_cycles)
            .map(|c| sample_fault(&profile, &w.program, &clean.trace, &tt, c, &mut rng))
            .collect()
    };
    let a = sample_all(9);
    let b = sample_all(9);
    assert_eq!(a, b);
    assert_ne!(a, sample_all(10), "a different seed draws a different campaign");
    for s in &a {
        if let Sampled::Fault(spec) = s {
            let json = serde_json::to_string(spec).unwrap();
            let back: FaultSpec = serde_json::from_str(&json).unwrap();
            assert_eq!(&back, spec);
        }
    }
}

#[test]
fn profile_validation_and_shares() {
    let p = EffectProfile::paper_em_default();
    p.validate().unwrap();
    assert!((p.total_weight() - 103.1).abs() < 1e-9);
    let shares: f64 = p.label_shares().iter().map(|(_, s)| s).sum();
    assert!((shares - 1.0).abs() < 1e-12);
    assert_eq!(EffectProfile::by_name("paper-em-default").unwrap(), p);
    assert!(EffectProfile::by_name("nope").is_none());

    let mut bad = p.clone();
    bad.coupling = 1.5;
    assert!(bad.validate().is_err());
    bad = p;
    bad.skip = -1.0;
    assert!(bad.validate().is_err());
}
