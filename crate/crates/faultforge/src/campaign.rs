//! Pulse campaigns: seeded batches of injections against one workload, each
//! run sampling a fault at a drawn cycle, driving the program through it,
//! and judging the answer against the fault-free run.

use crate::fault::{apply_fault, sample_screened, EffectProfile, FaultSpec, Sampled};
use crate::harden::{region_word, DETECT_SENTINEL};
use crate::isa::{run_with, OutputBuffer, Program, RunResult};
use crate::timing::{schedule, TimedTrace, TimingConfig};
use crate::workloads::{judge, standard_regs, Workload, WorkloadParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::ops::Range;

/// Current results-file schema.
pub const SCHEMA_VERSION: u32 = 1;

/// Instruction budget for every driven run.
pub const RUN_BUDGET: usize = 1_000_000;

/// What one injection did to the device's answer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Outcome {
    /// The device answered with the reference buffer.
    NoFault,
    /// No answer: the sampled pulse muted the device, or the faulted run
    /// trapped or ran away.
    Mute,
    /// A countermeasure raised the detection sentinel.
    DetectedFault,
    /// Wrong answer, no detection. `harmful` adds control-flow damage:
    /// wrong loop iteration count or wrong exit path.
    SuccessfulFault { harmful: bool },
}

impl Outcome {
    pub fn label(&self) -> &'static str {
        match self {
            Outcome::NoFault => "no-fault",
            Outcome::Mute => "mute",
            Outcome::DetectedFault => "detected-fault",
            Outcome::SuccessfulFault { .. } => "successful-fault",
        }
    }
}

/// One injection: what was thrown at the device and what came back.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InjectionRecord {
    pub run: usize,
    /// Pulse cycle, drawn from the campaign's cycle range.
    pub cycle: u32,
    /// The sampled fault; absent when the pulse muted the device outright.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub spec: Option<FaultSpec>,
    pub outcome: Outcome,
    /// Answer buffer as little-endian hex, registers then memory; absent
    /// for mutes.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub buffer: Option<String>,
}

/// Campaign-wide knobs. `cycles: None` targets the window in which payload
/// instructions issue, which is where the interesting behavior lives.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CampaignConfig {
    pub runs: usize,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub cycles: Option<Range<u32>>,
    pub profile: EffectProfile,
    pub timing: TimingConfig,
}

/// A full campaign: enough context to rebuild the program and replay any
/// record bit for bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CampaignResult {
    pub schema: u32,
    pub workload: String,
    /// Generator parameters of the baseline workload.
    pub params: WorkloadParams,
    /// Hardening scheme applied on top, if any.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub scheme: Option<String>,
    pub seed: u64,
    pub profile: String,
    pub timing: TimingConfig,
    /// Cycle range pulses were drawn from (half-open).
    pub cycle_range: (u32, u32),
    pub records: Vec<InjectionRecord>,
}

/// Outcome counts of a campaign.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub runs: usize,
    pub no_fault: usize,
    pub mute: usize,
    pub detected: usize,
    pub successful: usize,
    pub harmful: usize,
}

impl CampaignResult {
    pub fn tally(&self) -> Tally {
        let mut t = Tally { runs: self.records.len(), ..Tally::default() };
        for r in &self.records {
            match r.outcome {
                Outcome::NoFault => t.no_fault += 1,
                Outcome::Mute => t.mute += 1,
                Outcome::DetectedFault => t.detected += 1,
                Outcome::SuccessfulFault { harmful } => {
                    t.successful += 1;
                    t.harmful += usize::from(harmful);
                }
            }
        }
        t
    }
}

/// Hex encoding of an answer buffer, the byte-exact comparison key used by
/// records and the classifier.
pub fn buffer_hex(buf: &OutputBuffer) -> String {
    buf.to_bytes().iter().map(|b| format!("{b:02x}")).collect()
}

/// Per-record generator: every run derives its own stream from the campaign
/// seed, so record N is identical no matter how many threads ran before it.
fn record_rng(seed: u64, run: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&run.to_le_bytes());
    key[16..24].copy_from_slice(b"pulse-v1");
    ChaCha8Rng::from_seed(key)
}

/// Issue-cycle range of the payload instructions in the scheduled trace.
pub fn payload_issue_cycles(w: &Workload, golden: &RunResult, tt: &TimedTrace) -> Range<u32> {
    let payload = &w.meta.payload;
    let issues: Vec<u32> = golden
        .trace
        .iter()
        .zip(&tt.entries)
        .filter(|(e, _)| payload.contains(&e.at))
        .map(|(_, t)| t.issue)
        .collect();
    let lo = issues.iter().copied().min().unwrap_or(0);
    let hi = issues.iter().copied().max().unwrap_or(0) + 1;
    lo..hi
}

/// Everything the per-run closure needs, computed once.
struct Bench<'a> {
    workload: &'a Workload,
    program: &'a Program,
    golden: RunResult,
    golden_hex: String,
    tt: TimedTrace,
    cycles: Range<u32>,
}

fn inject(b: &Bench<'_>, cfg: &CampaignConfig, run: usize) -> InjectionRecord {
    let mut rng = record_rng(cfg.seed, run as u64);
    let cycle = rng.gen_range(b.cycles.clone());
    let sampled =
        sample_screened(&cfg.profile, b.program, standard_regs(), &b.golden, &b.tt, cycle, &mut rng);
    match sampled {
        Sampled::Mute => InjectionRecord {
            run,
            cycle,
            spec: None,
            outcome: Outcome::Mute,
            buffer: None,
        },
        Sampled::NoEffect => InjectionRecord {
            run,
            cycle,
            spec: None,
            outcome: Outcome::NoFault,
            buffer: Some(b.golden_hex.clone()),
        },
        Sampled::Fault(spec) => {
            let faulted = apply_fault(b.program, standard_regs(), &spec, RUN_BUDGET);
            let detected =
                region_word(b.program, &faulted.output, "ctrl") == Some(DETECT_SENTINEL);
            let (outcome, buffer) = if detected {
                (Outcome::DetectedFault, Some(buffer_hex(&faulted.output)))
            } else if !faulted.halted() {
                (Outcome::Mute, None)
            } else if faulted.output == b.golden.output {
                (Outcome::NoFault, Some(b.golden_hex.clone()))
            } else {
                let j = judge(b.workload, &b.golden, &faulted);
                (
                    Outcome::SuccessfulFault { harmful: j.harmful },
                    Some(buffer_hex(&faulted.output)),
                )
            };
            InjectionRecord { run, cycle, spec: Some(spec), outcome, buffer }
        }
    }
}

/// Worker threads for campaigns: the `FAULTFORGE_THREADS` variable wins,
/// otherwise rayon's default. Results are ordered by run index either way.
pub(crate) fn thread_pool() -> rayon::ThreadPool {
    let threads = std::env::var("FAULTFORGE_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .unwrap_or(0);
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .expect("thread pool")
}

/// Runs a seeded campaign against a workload. Byte-identical output for the
/// same inputs, independent of thread count.
pub fn run_campaign(
    w: &Workload,
    cfg: &CampaignConfig,
    scheme: Option<&str>,
    params: &WorkloadParams,
) -> CampaignResult {
    use rayon::prelude::*;

    let program = &w.program;
    let golden = run_with(program, standard_regs(), RUN_BUDGET);
    assert!(golden.halted(), "{}: fault-free run must halt", w.name);
    let tt = schedule(program, &golden.trace, &cfg.timing, cfg.seed);
    let cycles = cfg
        .cycles
        .clone()
        .unwrap_or_else(|| payload_issue_cycles(w, &golden, &tt));
    assert!(!cycles.is_empty(), "empty cycle range");
    let golden_hex = buffer_hex(&golden.output);
    let bench = Bench { workload: w, program, golden, golden_hex, tt, cycles: cycles.clone() };

    let records: Vec<InjectionRecord> = thread_pool().install(|| {
        (0..cfg.runs)
            .into_par_iter()
            .map(|run| inject(&bench, cfg, run))
            .collect()
    });

    CampaignResult {
        schema: SCHEMA_VERSION,
        workload: w.name.clone(),
        params: params.clone(),
        scheme: scheme.map(str::to_string),
        seed: cfg.seed,
        profile: cfg.profile.name.clone(),
        timing: cfg.timing.clone(),
        cycle_range: (cycles.start, cycles.end),
        records,
    }
}

/// Convenience: a default-timing campaign with the built-in profile.
pub fn default_config(runs: usize, seed: u64) -> CampaignConfig {
    CampaignConfig {
        runs,
        seed,
        cycles: None,
        profile: EffectProfile::paper_em_default(),
        timing: TimingConfig::default(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workloads::{build, WorkloadKind};

    fn quick(kind: WorkloadKind, runs: usize, seed: u64) -> CampaignResult {
        let params = WorkloadParams { len: 12, ..WorkloadParams::default() };
        let w = build(kind, &params);
        run_campaign(&w, &default_config(runs, seed), None, &params)
    }

    #[test]
    fn campaigns_are_reproducible_across_thread_counts() {
        let a = quick(WorkloadKind::Loop1, 120, 7);
        let b = quick(WorkloadKind::Loop1, 120, 7);
        assert_eq!(a, b);
        let json_a = serde_json::to_string_pretty(&a).unwrap();
        std::env::set_var("FAULTFORGE_THREADS", "1");
        let c = quick(WorkloadKind::Loop1, 120, 7);
        std::env::remove_var("FAULTFORGE_THREADS");
        assert_eq!(json_a, serde_json::to_string_pretty(&c).unwrap());
    }

    #[test]
    fn different_seeds_draw_different_campaigns() {
        let a = quick(WorkloadKind::Loop1, 60, 1);
        let b = quick(WorkloadKind::Loop1, 60, 2);
        assert_ne!(a.records, b.records);
    }

    #[test]
    fn tally_covers_every_record() {
        let r = quick(WorkloadKind::Loop1, 200, 11);
        let t = r.tally();
        assert_eq!(t.runs, 200);
        assert_eq!(t.no_fault + t.mute + t.detected + t.successful, 200);
        assert!(t.successful > 0, "a register-rich loop should corrupt sometimes");
        assert!(t.harmful <= t.successful);
    }

    #[test]
    fn unhardened_workloads_never_report_detections() {
        let r = quick(WorkloadKind::Loop2, 150, 3);
        assert_eq!(r.tally().detected, 0);
    }

    #[test]
    fn nop_payloads_produce_no_successful_faults() {
        let params = WorkloadParams { len: 200, ..WorkloadParams::default() };
        let w = build(WorkloadKind::NopSeq, &params);
        let r = run_campaign(&w, &default_config(400, 5), None, &params);
        let t = r.tally();
        assert_eq!(t.successful, 0);
        assert!(t.mute > 0, "sampled mutes should appear in 400 runs");
        assert_eq!(t.no_fault + t.mute, 400);
    }

    #[test]
    fn records_round_trip_through_json() {
        let r = quick(WorkloadKind::Loop1, 40, 9);
        let text = serde_json::to_string(&r).unwrap();
        let back: CampaignResult = serde_json::from_str(&text).unwrap();
        assert_eq!(r, back);
    }

    #[test]
    fn cycle_draws_stay_in_the_payload_issue_window() {
        let r = quick(WorkloadKind::Loop1, 80, 13);
        let (lo, hi) = r.cycle_range;
        assert!(r.records.iter().all(|rec| (lo..hi).contains(&rec.cycle)));
    }

    #[test]
    fn detections_surface_on_hardened_workloads() {
        use crate::harden::{harden, Scheme};
        let params = WorkloadParams { len: 12, ..WorkloadParams::default() };
        let w = build(WorkloadKind::Loop2, &params);
        let hp = harden(&w, Scheme::LoopDup).unwrap();
        let r = run_campaign(&hp.workload, &default_config(300, 21), Some("loopdup"), &params);
        assert!(r.tally().detected > 0, "loop hardening should catch some pulses");
    }
}
