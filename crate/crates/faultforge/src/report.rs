//! Tables and figure data distilled from campaign and classification JSON:
//! outcome summaries, model distributions, corrupted-register histograms and
//! code-size ratios, rendered as JSON, CSV or markdown.

use crate::campaign::{CampaignResult, InjectionRecord, Outcome, SCHEMA_VERSION, RUN_BUDGET};
use crate::classify::{decode_hex, rebuild_workload, ClassifiedCampaign, ClassifyError, Verdict};
use crate::fault::{CompositeKind, Family, RepeatedFamily};
use crate::harden::{harden, Scheme};
use crate::isa::{run_with, DUMPED_REGS};
use crate::workloads::{build, standard_regs, Workload, WorkloadKind, WorkloadParams};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;

/// Campaign outcome counts, one row of the run summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutcomeSummary {
    pub runs: usize,
    pub no_fault: usize,
    pub mute: usize,
    pub detected: usize,
    pub successful: usize,
}

/// Harmful versus harmless split over successful faults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HarmSplit {
    pub harmful: usize,
    pub harmless: usize,
}

/// Shares of corrupted-buffer records on a hardened workload.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HardenedSplit {
    pub harmless: usize,
    pub detected: usize,
    pub harmful: usize,
}

/// Corrupted-register-count histogram over successful faults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegHistogram {
    /// Count of successful records per number of corrupted registers.
    pub counts: BTreeMap<usize, usize>,
    pub mean: f64,
}

/// One model-distribution row: family label, multiplicity bucket, count and
/// share of all records that carried a corrupted buffer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelRow {
    pub label: String,
    pub multiplicity: String,
    pub count: usize,
    pub share: f64,
}

/// One harmful-fault-distribution row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HarmfulRow {
    pub bucket: String,
    pub count: usize,
    pub share: f64,
}

/// Code size of one workload variant relative to its baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeRow {
    pub name: String,
    pub instructions: usize,
    pub ratio: f64,
}

/// Mean corrupted-register count for one nop spacing of the multi-counter
/// workload.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpacingRow {
    pub spacing: usize,
    pub runs: usize,
    pub successful: usize,
    pub mean_corrupted_registers: f64,
}

/// Every table a classified campaign supports, ready for rendering.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportBundle {
    pub schema: u32,
    pub workload: String,
    pub outcomes: OutcomeSummary,
    pub successful_split: HarmSplit,
    /// Present when the campaign recorded detected faults.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub hardened_split: Option<HardenedSplit>,
    /// Present when the raw campaign records were supplied alongside.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub register_histogram: Option<RegHistogram>,
    pub model_distribution: Vec<ModelRow>,
    pub harmful_distribution: Vec<HarmfulRow>,
    /// Hardened-variant sizes of the campaign's baseline workload.
    pub sizes: Vec<SizeRow>,
}

/// Display row order of the model-distribution table: single families
/// first, then same-family composites, then mixed and unexplained.
const MODEL_ROWS: [(&str, &str); 14] = [
    ("skip", "single"),
    ("register-corruption", "single"),
    ("operand-substitution", "single"),
    ("mshw-reset", "single"),
    ("load-corruption", "single"),
    ("magic-edge", "single"),
    ("replay", "single"),
    ("skip", "composite"),
    ("register-corruption", "composite"),
    ("operand-substitution", "composite"),
    ("mshw-reset", "composite"),
    ("load-corruption", "composite"),
    ("mixed", "mixed"),
    ("unexplained", "unexplained"),
];

/// Table key of one explained family: label plus multiplicity bucket.
fn model_key(family: Family) -> (&'static str, &'static str) {
    match family {
        Family::Skip => ("skip", "single"),
        Family::Replay => ("replay", "single"),
        Family::RegisterCorruption => ("register-corruption", "single"),
        Family::MshwReset => ("mshw-reset", "single"),
        Family::OperandSubstitution => ("operand-substitution", "single"),
        Family::LoadCorruption => ("load-corruption", "single"),
        Family::MagicEdge => ("magic-edge", "single"),
        Family::Composite(kind) => {
            let label = match kind {
                CompositeKind::SkipReplay => "skip",
                CompositeKind::Correlated => "register-corruption",
                CompositeKind::Repeated(RepeatedFamily::Skip) => "skip",
                CompositeKind::Repeated(RepeatedFamily::OperandSubstitution) => {
                    "operand-substitution"
                }
                CompositeKind::Repeated(RepeatedFamily::MshwReset) => "mshw-reset",
                CompositeKind::Repeated(RepeatedFamily::LoadCorruption) => "load-corruption",
            };
            (label, "composite")
        }
        Family::Mixed => ("mixed", "mixed"),
    }
}

/// Harmful-distribution bucket of one verdict.
fn harmful_bucket(verdict: &Verdict) -> &'static str {
    match verdict {
        Verdict::Explained { spec } => match spec.family {
            Family::MagicEdge => "magic edge",
            Family::Mixed => "mixed",
            Family::Composite(_) => "other composite",
            _ => "other single",
        },
        _ => "unexplained",
    }
}

/// Counts distinct register words of `buffer` that differ from the
/// fault-free answer; `golden_regs` holds the reference register dump.
fn corrupted_regs(buffer: &str, golden_regs: &[u32]) -> Option<usize> {
    let bytes = decode_hex(buffer)?;
    let count = bytes
        .chunks_exact(4)
        .take(DUMPED_REGS)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .zip(golden_regs)
        .filter(|(w, g)| w != *g)
        .count();
    Some(count)
}

/// Histogram of corrupted-register counts over the campaign's successful
/// faults, measured against the workload's fault-free register dump.
pub fn corrupted_register_histogram(records: &[InjectionRecord], workload: &Workload) -> RegHistogram {
    let golden = run_with(&workload.program, standard_regs(), RUN_BUDGET);
    let mut counts = BTreeMap::new();
    let (mut total, mut n) = (0usize, 0usize);
    for r in records {
        if !matches!(r.outcome, Outcome::SuccessfulFault { .. }) {
            continue;
        }
        let Some(c) = r.buffer.as_deref().and_then(|b| corrupted_regs(b, &golden.output.regs))
        else {
            continue;
        };
        *counts.entry(c).or_insert(0) += 1;
        total += c;
        n += 1;
    }
    let mean = if n == 0 { 0.0 } else { total as f64 / n as f64 };
    RegHistogram { counts, mean }
}

/// Sizes of the baseline workload and every hardened variant that applies
/// to it, with ratios against the baseline.
pub fn size_table(kind: WorkloadKind, params: &WorkloadParams) -> Vec<SizeRow> {
    let base = build(kind, params);
    let base_len = base.program.instructions.len();
    let mut rows = vec![SizeRow {
        name: base.name.clone(),
        instructions: base_len,
        ratio: 1.0,
    }];
    for scheme in [Scheme::LoopDup, Scheme::Swift, Scheme::Stacked] {
        if let Ok(hp) = harden(&base, scheme) {
            rows.push(SizeRow {
                name: hp.workload.name.clone(),
                instructions: hp.workload.program.instructions.len(),
                ratio: hp.workload.program.instructions.len() as f64 / base_len as f64,
            });
        }
    }
    rows
}

impl ReportBundle {
    /// Builds every table a classified campaign supports. Raw campaign
    /// records, when given, must be the ones the classification came from;
    /// they contribute the corrupted-register histogram.
    pub fn build(
        classified: &ClassifiedCampaign,
        campaign: Option<&CampaignResult>,
    ) -> Result<ReportBundle, ClassifyError> {
        let mut outcomes = OutcomeSummary {
            runs: classified.verdicts.len(),
            no_fault: 0,
            mute: 0,
            detected: 0,
            successful: 0,
        };
        let mut split = HarmSplit { harmful: 0, harmless: 0 };
        for v in &classified.verdicts {
            match v.outcome {
                Outcome::NoFault => outcomes.no_fault += 1,
                Outcome::Mute => outcomes.mute += 1,
                Outcome::DetectedFault => outcomes.detected += 1,
                Outcome::SuccessfulFault { harmful } => {
                    outcomes.successful += 1;
                    if harmful {
                        split.harmful += 1;
                    } else {
                        split.harmless += 1;
                    }
                }
            }
        }
        let hardened_split = (outcomes.detected > 0).then_some(HardenedSplit {
            harmless: split.harmless,
            detected: outcomes.detected,
            harmful: split.harmful,
        });

        let mut model_counts: BTreeMap<(&str, &str), usize> = BTreeMap::new();
        let mut applicable = 0usize;
        for v in classified.applicable() {
            applicable += 1;
            let key = match &v.verdict {
                Verdict::Explained { spec } => model_key(spec.family),
                _ => ("unexplained", "unexplained"),
            };
            *model_counts.entry(key).or_insert(0) += 1;
        }
        let model_distribution = MODEL_ROWS
            .iter()
            .filter_map(|&(label, multiplicity)| {
                let count = model_counts.remove(&(label, multiplicity)).unwrap_or(0);
                // Zero-weight rows stay out of the table, matching how the
                // reference distributions omit unobserved models.
                (count > 0 || multiplicity == "single").then_some(ModelRow {
                    label: label.to_string(),
                    multiplicity: multiplicity.to_string(),
                    count,
                    share: percent(count, applicable),
                })
            })
            .filter(|r| !(r.label == "replay" && r.count == 0))
            .collect();

        let mut harmful_counts: BTreeMap<&str, usize> = BTreeMap::new();
        let mut harmful_total = 0usize;
        for v in &classified.verdicts {
            if matches!(v.outcome, Outcome::SuccessfulFault { harmful: true }) {
                *harmful_counts.entry(harmful_bucket(&v.verdict)).or_insert(0) += 1;
                harmful_total += 1;
            }
        }
        let harmful_distribution = ["magic edge", "other single", "mixed", "other composite", "unexplained"]
            .iter()
            .filter_map(|&bucket| {
                let count = harmful_counts.remove(bucket).unwrap_or(0);
                (count > 0 || bucket != "unexplained").then_some(HarmfulRow {
                    bucket: bucket.to_string(),
                    count,
                    share: percent(count, harmful_total),
                })
            })
            .collect();

        let register_histogram = match campaign {
            Some(result) => {
                let w = rebuild_workload(result)?;
                Some(corrupted_register_histogram(&result.records, &w))
            }
            None => None,
        };

        let sizes = base_kind(&classified.workload)
            .map(|(kind, params)| size_table(kind, &params))
            .unwrap_or_default();

        Ok(ReportBundle {
            schema: SCHEMA_VERSION,
            workload: classified.workload.clone(),
            outcomes,
            successful_split: split,
            hardened_split,
            register_histogram,
            model_distribution,
            harmful_distribution,
            sizes,
        })
    }

    /// Pretty JSON with a trailing newline.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// One flat CSV; the first column names the table each row belongs to.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("table,key,detail,count,share\n");
        let o = &self.outcomes;
        for (key, count) in [
            ("no_fault", o.no_fault),
            ("mute", o.mute),
            ("detected", o.detected),
            ("successful", o.successful),
        ] {
            let _ = writeln!(out, "outcomes,{key},,{count},{:.1}", percent(count, o.runs));
        }
        let s = &self.successful_split;
        for (key, count) in [("harmful", s.harmful), ("harmless", s.harmless)] {
            let _ = writeln!(
                out,
                "successful_split,{key},,{count},{:.1}",
                percent(count, s.harmful + s.harmless)
            );
        }
        if let Some(h) = &self.hardened_split {
            let total = h.harmless + h.detected + h.harmful;
            for (key, count) in [
                ("harmless", h.harmless),
                ("detected", h.detected),
                ("harmful", h.harmful),
            ] {
                let _ = writeln!(out, "hardened_split,{key},,{count},{:.1}", percent(count, total));
            }
        }
        if let Some(h) = &self.register_histogram {
            for (regs, count) in &h.counts {
                let _ = writeln!(out, "register_histogram,{regs},,{count},");
            }
            let _ = writeln!(out, "register_histogram,mean,,,{:.2}", h.mean);
        }
        for r in &self.model_distribution {
            let _ = writeln!(
                out,
                "model_distribution,{},{},{},{:.1}",
                r.label, r.multiplicity, r.count, r.share
            );
        }
        for r in &self.harmful_distribution {
            let _ = writeln!(out, "harmful_distribution,{},,{},{:.1}", r.bucket, r.count, r.share);
        }
        for r in &self.sizes {
            let _ = writeln!(out, "sizes,{},,{},{:.3}", r.name, r.instructions, r.ratio);
        }
        out
    }

    /// Human-readable markdown: one section per table.
    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# Campaign report: {}\n", self.workload);

        let o = &self.outcomes;
        let _ = writeln!(out, "## Outcomes ({} runs)\n", o.runs);
        let _ = writeln!(out, "| Outcome | Count | Share |");
        let _ = writeln!(out, "|---|---|---|");
        for (key, count) in [
            ("No fault", o.no_fault),
            ("Mute", o.mute),
            ("Detected fault", o.detected),
            ("Successful fault", o.successful),
        ] {
            let _ = writeln!(out, "| {key} | {count} | {:.1}% |", percent(count, o.runs));
        }

        let s = &self.successful_split;
        let _ = writeln!(out, "\n## Successful faults\n");
        let _ = writeln!(out, "| Class | Count | Share |");
        let _ = writeln!(out, "|---|---|---|");
        for (key, count) in [("Harmful", s.harmful), ("Harmless", s.harmless)] {
            let _ = writeln!(
                out,
                "| {key} | {count} | {:.1}% |",
                percent(count, s.harmful + s.harmless)
            );
        }

        if let Some(h) = &self.hardened_split {
            let total = h.harmless + h.detected + h.harmful;
            let _ = writeln!(out, "\n## Corrupted buffers on hardened code\n");
            let _ = writeln!(out, "| Class | Count | Share |");
            let _ = writeln!(out, "|---|---|---|");
            for (key, count) in [
                ("Harmless", h.harmless),
                ("Detected", h.detected),
                ("Harmful", h.harmful),
            ] {
                let _ = writeln!(out, "| {key} | {count} | {:.1}% |", percent(count, total));
            }
        }

        if let Some(h) = &self.register_histogram {
            let _ = writeln!(out, "\n## Corrupted registers per successful fault\n");
            let _ = writeln!(out, "| Registers | Count |");
            let _ = writeln!(out, "|---|---|");
            for (regs, count) in &h.counts {
                let _ = writeln!(out, "| {regs} | {count} |");
            }
            let _ = writeln!(out, "\nMean: {:.2}", h.mean);
        }

        let _ = writeln!(out, "\n## Model distribution\n");
        let _ = writeln!(out, "| Model | Multiplicity | Count | Share |");
        let _ = writeln!(out, "|---|---|---|---|");
        for r in &self.model_distribution {
            let _ = writeln!(
                out,
                "| {} | {} | {} | {:.1}% |",
                r.label, r.multiplicity, r.count, r.share
            );
        }

        if !self.harmful_distribution.is_empty() {
            let _ = writeln!(out, "\n## Harmful-fault distribution\n");
            let _ = writeln!(out, "| Effect | Count | Share |");
            let _ = writeln!(out, "|---|---|---|");
            for r in &self.harmful_distribution {
                let _ = writeln!(out, "| {} | {} | {:.1}% |", r.bucket, r.count, r.share);
            }
        }

        if !self.sizes.is_empty() {
            let _ = writeln!(out, "\n## Code size\n");
            let _ = writeln!(out, "| Variant | Instructions | Ratio |");
            let _ = writeln!(out, "|---|---|---|");
            for r in &self.sizes {
                let _ = writeln!(out, "| {} | {} | x{:.2} |", r.name, r.instructions, r.ratio);
            }
        }

        out
    }
}

/// Runs one multi-counter campaign per spacing and reports the mean
/// corrupted-register count of its successful faults. Wider spacing thins
/// the in-flight window, so the means fall as the spacing grows.
pub fn isolate_spacing(spacings: &[usize], runs: usize, seed: u64) -> Vec<SpacingRow> {
    use crate::campaign::{default_config, run_campaign};

    spacings
        .iter()
        .map(|&spacing| {
            let params = WorkloadParams { spacing, ..WorkloadParams::default() };
            let w = build(WorkloadKind::MultiCounter, &params);
            let result = run_campaign(&w, &params, None, &default_config(runs, seed));
            let hist = corrupted_register_histogram(&result.records, &w);
            SpacingRow {
                spacing,
                runs,
                successful: result.tally().successful,
                mean_corrupted_registers: hist.mean,
            }
        })
        .collect()
}

/// CSV rendering of a spacing sweep.
pub fn spacing_csv(rows: &[SpacingRow]) -> String {
    let mut out = String::from("spacing,runs,successful,mean_corrupted_registers\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{:.2}",
            r.spacing, r.runs, r.successful, r.mean_corrupted_registers
        );
    }
    out
}

fn percent(count: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        100.0 * count as f64 / total as f64
    }
}

/// Baseline workload kind behind a possibly hardened workload name.
fn base_kind(name: &str) -> Option<(WorkloadKind, WorkloadParams)> {
    // Longest suffix first so "-swift-sec" is not mistaken for "-sec".
    let base = [Scheme::Stacked, Scheme::Swift, Scheme::LoopDup]
        .iter()
        .find_map(|s| name.strip_suffix(s.suffix()))
        .unwrap_or(name);
    WorkloadKind::from_name(base).map(|k| (k, WorkloadParams::default()))
}
