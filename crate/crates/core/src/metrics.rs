//! Offline classification metrics and per-step training-dynamics metrics.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grpo::FilterStatus;
use crate::policy::{PolicyParams, SamplerConfig};
use crate::replay::ReplayEvent;
use crate::rules::{DerivationTable, Tier};
use crate::trajectory::Trajectory;
use crate::world::{policy_input, Instance};

/// Counts indexed `[gold][predicted]`; malformed predictions are kept apart,
/// per gold class.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; 4]; 4],
    pub malformed: [u64; 4],
}

impl ConfusionMatrix {
    pub fn add(&mut self, gold: Tier, predicted: Option<Tier>) {
        match predicted {
            Some(p) => self.counts[gold.index()][p.index()] += 1,
            None => self.malformed[gold.index()] += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum::<u64>() + self.malformed.iter().sum::<u64>()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub per_class_f1: [f64; 4],
    pub macro_f1: f64,
    pub good_f1: f64,
    pub accuracy: f64,
}

fn f1(tp: u64, fp: u64, fn_: u64) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        (2 * tp) as f64 / denom as f64
    }
}

/// Per-class F1, macro F1, F1 of the collapsed Good class (tiers 3 and 4)
/// and accuracy. A class with no gold and no predicted members scores 0.
pub fn classification_metrics(cm: &ConfusionMatrix) -> Result<ClassificationMetrics> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::EmptyInput("confusion matrix has no entries"));
    }
    let c = &cm.counts;
    let mut per_class_f1 = [0.0; 4];
    for (k, slot) in per_class_f1.iter_mut().enumerate() {
        let tp = c[k][k];
        let fp: u64 = (0..4).filter(|&g| g != k).map(|g| c[g][k]).sum();
        let fn_: u64 = (0..4).filter(|&p| p != k).map(|p| c[k][p]).sum::<u64>() + cm.malformed[k];
        *slot = f1(tp, fp, fn_);
    }
    let good = |i: usize| i >= Tier::Related.index();
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for g in 0..4 {
        for p in 0..4 {
            match (good(g), good(p)) {
                (true, true) => tp += c[g][p],
                (false, true) => fp += c[g][p],
                (true, false) => fn_ += c[g][p],
                (false, false) => {}
            }
        }
        if good(g) {
            fn_ += cm.malformed[g];
        }
    }
    let correct: u64 = (0..4).map(|k| c[k][k]).sum();
    Ok(ClassificationMetrics {
        per_class_f1,
        macro_f1: per_class_f1.iter().sum::<f64>() / 4.0,
        good_f1: f1(tp, fp, fn_),
        accuracy: correct as f64 / total as f64,
    })
}

/// Share of trajectories that are well-formed and whose derived label follows
/// the table from their own category and attribute conclusions.
pub fn rule_adherence_rate(trajectories: &[Trajectory], table: &DerivationTable) -> Result<f64> {
    if trajectories.is_empty() {
        return Err(Error::EmptyInput("no trajectories to audit"));
    }
    let ok = trajectories
        .iter()
        .filter(|t| table.check_rule_adherence(t).unwrap_or(false))
        .count();
    Ok(ok as f64 / trajectories.len() as f64)
}

/// Groups that carry gradient over all groups of a step; 0 for no groups.
pub fn gradient_contributing_ratio(statuses: &[FilterStatus]) -> f64 {
    if statuses.is_empty() {
        return 0.0;
    }
    let kept = statuses.iter().filter(|s| **s == FilterStatus::Kept).count();
    kept as f64 / statuses.len() as f64
}

/// Mean improvement of replayed groups over their unguided originals.
pub fn reward_delta(events: &[ReplayEvent]) -> f64 {
    if events.is_empty() {
        return 0.0;
    }
    events
        .iter()
        .map(|e| e.mean_reward_after - e.mean_reward_before)
        .sum::<f64>()
        / events.len() as f64
}

/// One row of the per-step training trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub variant: String,
    pub mean_reward_unguided: f64,
    pub mean_reward_replayed: f64,
    pub reward_delta: f64,
    pub kept_ratio: f64,
    pub entropy: f64,
    pub rar: f64,
    pub kl: f64,
    pub loss: f64,
}

pub const TRACE_COLUMNS: [&str; 10] = [
    "step",
    "variant",
    "mean_reward_unguided",
    "mean_reward_replayed",
    "reward_delta",
    "kept_ratio",
    "entropy",
    "rar",
    "kl",
    "loss",
];

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut out = TRACE_COLUMNS.join(",");
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.step,
            r.variant,
            r.mean_reward_unguided,
            r.mean_reward_replayed,
            r.reward_delta,
            r.kept_ratio,
            r.entropy,
            r.rar,
            r.kl,
            r.loss
        );
    }
    out
}

pub fn to_jsonl<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

/// Evaluation summary, the offline counterpart of a trace row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub per_class_f1: [f64; 4],
    pub macro_f1: f64,
    pub good_f1: f64,
    pub accuracy: f64,
    pub rar: f64,
    pub kept_ratio: f64,
    pub reward_delta: f64,
    pub entropy: f64,
    pub kl: f64,
    pub mean_reward_unguided: f64,
    pub mean_reward_replayed: f64,
}

impl MetricsRow {
    pub fn fields(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("f1_irrelevant", self.per_class_f1[0]),
            ("f1_mismatch", self.per_class_f1[1]),
            ("f1_related", self.per_class_f1[2]),
            ("f1_excellent", self.per_class_f1[3]),
            ("macro_f1", self.macro_f1),
            ("good_f1", self.good_f1),
            ("accuracy", self.accuracy),
            ("rar", self.rar),
            ("kept_ratio", self.kept_ratio),
            ("reward_delta", self.reward_delta),
            ("entropy", self.entropy),
            ("kl", self.kl),
            ("mean_reward_unguided", self.mean_reward_unguided),
            ("mean_reward_replayed", self.mean_reward_replayed),
        ]
    }

    /// Rates and F1 scores within [0, 1], everything finite.
    pub fn in_bounds(&self) -> bool {
        let unit = [
            self.per_class_f1[0],
            self.per_class_f1[1],
            self.per_class_f1[2],
            self.per_class_f1[3],
            self.macro_f1,
            self.good_f1,
            self.accuracy,
            self.rar,
            self.kept_ratio,
        ];
        unit.iter().all(|v| (0.0..=1.0).contains(v)) && self.fields().iter().all(|(_, v)| v.is_finite())
    }
}

/// Run-level aggregates of a trace.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub steps: usize,
    pub mean_kept_ratio: f64,
    pub cumulative_reward_delta: f64,
    /// Means over the final window.
    pub final_entropy: f64,
    pub final_kl: f64,
    pub final_rar: f64,
    pub final_kept_ratio: f64,
    pub final_reward_delta: f64,
    pub final_reward_unguided: f64,
    pub final_reward_replayed: f64,
}

pub const FINAL_WINDOW: usize = 100;

pub fn summarize_trace(trace: &[TraceRow], window: usize) -> TraceSummary {
    if trace.is_empty() {
        return TraceSummary::default();
    }
    let n = trace.len() as f64;
    let tail = &trace[trace.len().saturating_sub(window.max(1))..];
    let m = |f: fn(&TraceRow) -> f64| tail.iter().map(f).sum::<f64>() / tail.len() as f64;
    TraceSummary {
        steps: trace.len(),
        mean_kept_ratio: trace.iter().map(|r| r.kept_ratio).sum::<f64>() / n,
        cumulative_reward_delta: trace.iter().map(|r| r.reward_delta).sum(),
        final_entropy: m(|r| r.entropy),
        final_kl: m(|r| r.kl),
        final_rar: m(|r| r.rar),
        final_kept_ratio: m(|r| r.kept_ratio),
        final_reward_delta: m(|r| r.reward_delta),
        final_reward_unguided: m(|r| r.mean_reward_unguided),
        final_reward_replayed: m(|r| r.mean_reward_replayed),
    }
}

impl MetricsRow {
    /// Offline metrics from the evaluation, dynamics from the trace window.
    pub fn from_run(eval: &EvalReport, summary: &TraceSummary) -> Self {
        let m = &eval.metrics;
        MetricsRow {
            step: summary.steps,
            per_class_f1: m.per_class_f1,
            macro_f1: m.macro_f1,
            good_f1: m.good_f1,
            accuracy: m.accuracy,
            rar: eval.rar,
            kept_ratio: summary.final_kept_ratio,
            reward_delta: summary.final_reward_delta,
            entropy: summary.final_entropy,
            kl: summary.final_kl,
            mean_reward_unguided: summary.final_reward_unguided,
            mean_reward_replayed: summary.final_reward_replayed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub confusion: ConfusionMatrix,
    pub metrics: ClassificationMetrics,
    pub rar: f64,
    pub malformed_rate: f64,
    pub mean_entropy: f64,
}

/// Greedy, unguided decoding over held-out instances.
pub fn evaluate(params: &PolicyParams, instances: &[Instance], table: &DerivationTable) -> Result<EvalReport> {
    if instances.is_empty() {
        return Err(Error::EmptyInput("evaluation set is empty"));
    }
    let greedy = SamplerConfig {
        top_k: 1,
        ..SamplerConfig::default()
    };
    let outs: Vec<(Trajectory, f64)> = instances
        .par_iter()
        .map(|inst| {
            let x = policy_input(inst, None);
            Ok((params.sample(&x, &greedy)?, params.entropy(&x)?))
        })
        .collect::<Result<_>>()?;
    let mut confusion = ConfusionMatrix::default();
    for (inst, (t, _)) in instances.iter().zip(&outs) {
        confusion.add(inst.gold_relevance, t.initial_label());
    }
    let trajs: Vec<Trajectory> = outs.iter().map(|(t, _)| t.clone()).collect();
    let malformed = trajs.iter().filter(|t| !t.format_valid()).count();
    Ok(EvalReport {
        n: instances.len(),
        metrics: classification_metrics(&confusion)?,
        confusion,
        rar: rule_adherence_rate(&trajs, table)?,
        malformed_rate: malformed as f64 / instances.len() as f64,
        mean_entropy: outs.iter().map(|(_, h)| h).sum::<f64>() / instances.len() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::TierSlots;
    use proptest::prelude::*;
    use Tier::*;

    fn cm_from(pairs: &[(Tier, Option<Tier>)]) -> ConfusionMatrix {
        let mut cm = ConfusionMatrix::default();
        for &(g, p) in pairs {
            cm.add(g, p);
        }
        cm
    }

    #[test]
    fn perfect_predictions() {
        let cm = cm_from(&[(Irrelevant, Some(Irrelevant)), (Mismatch, Some(Mismatch)), (Related, Some(Related)), (Excellent, Some(Excellent))]);
        let m = classification_metrics(&cm).unwrap();
        assert_eq!(m.per_class_f1, [1.0; 4]);
        assert_eq!((m.macro_f1, m.good_f1, m.accuracy), (1.0, 1.0, 1.0));
    }

    #[test]
    fn good_collapse() {
        let cm = cm_from(&[(Related, Some(Excellent)); 5]);
        let m = classification_metrics(&cm).unwrap();
        assert_eq!(m.good_f1, 1.0);
        assert_eq!(m.per_class_f1[Related.index()], 0.0);
        assert_eq!(m.accuracy, 0.0);
    }

    #[test]
    fn malformed_counts_as_wrong() {
        let cm = cm_from(&[(Related, Some(Related)), (Related, None)]);
        let m = classification_metrics(&cm).unwrap();
        assert_eq!(m.accuracy, 0.5);
        // tp 1, fn 1
        assert!((m.per_class_f1[Related.index()] - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.good_f1 - 2.0 / 3.0).abs() < 1e-15);
        assert!(classification_metrics(&ConfusionMatrix::default()).is_err());
    }

    #[test]
    fn rar_denominator() {
        let ok = Trajectory::well_formed(TierSlots { initial: Related, category: Related, attribute: Excellent, derived: Related });
        let bad = Trajectory::well_formed(TierSlots { initial: Related, category: Related, attribute: Excellent, derived: Excellent });
        let malformed = Trajectory::from_tokens(&[0, 0, 0, 0, 1], vec![], false).unwrap();
        let table = DerivationTable::default();
        assert_eq!(rule_adherence_rate(&[ok.clone(), ok.clone()], &table).unwrap(), 1.0);
        assert!((rule_adherence_rate(&[ok, bad, malformed], &table).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!(rule_adherence_rate(&[], &table).is_err());
    }

    #[test]
    fn ratio_and_delta() {
        use FilterStatus::*;
        assert_eq!(gradient_contributing_ratio(&[Kept; 4]), 1.0);
        assert_eq!(gradient_contributing_ratio(&[DroppedTooEasy; 3]), 0.0);
        let mut s = vec![Kept; 3];
        s.extend([DroppedAllWrong, DroppedTooEasy, DegenerateZeroStd, DroppedAllWrong, DroppedAllWrong]);
        assert_eq!(gradient_contributing_ratio(&s), 0.375);

        let ev = |b: f64, a: f64| ReplayEvent { step: 1, instance_id: "x".into(), mean_reward_before: b, dims: vec![], mean_reward_after: a };
        assert_eq!(reward_delta(&[]), 0.0);
        assert!((reward_delta(&[ev(0.05, 0.45)]) - 0.40).abs() < 1e-15);
        assert!((reward_delta(&[ev(0.0, 0.4), ev(0.1, 0.3)]) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn csv_has_fixed_header() {
        let row = TraceRow { step: 1, variant: "AGRL".into(), mean_reward_unguided: 0.5, mean_reward_replayed: 0.0, reward_delta: 0.0, kept_ratio: 0.25, entropy: 6.0, rar: 0.5, kl: 0.0, loss: -0.1 };
        let csv = trace_csv(&[row]);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "step,variant,mean_reward_unguided,mean_reward_replayed,reward_delta,kept_ratio,entropy,rar,kl,loss");
        assert_eq!(lines.next().unwrap(), "1,AGRL,0.5,0,0,0.25,6,0.5,0,-0.1");
    }

    /// Second implementation: scan prediction lists instead of matrix algebra.
    fn brute_force(cm: &ConfusionMatrix) -> ClassificationMetrics {
        let mut pairs: Vec<(usize, Option<usize>)> = Vec::new();
        for g in 0..4 {
            for p in 0..4 {
                pairs.extend(std::iter::repeat_n((g, Some(p)), cm.counts[g][p] as usize));
            }
            pairs.extend(std::iter::repeat_n((g, None), cm.malformed[g] as usize));
        }
        let score = |is_pos: &dyn Fn(usize) -> bool| {
            let (mut tp, mut fp, mut fnn) = (0.0, 0.0, 0.0);
            for &(g, p) in &pairs {
                let pp = p.map(is_pos).unwrap_or(false);
                if is_pos(g) && pp {
                    tp += 1.0;
                } else if pp {
                    fp += 1.0;
                } else if is_pos(g) {
                    fnn += 1.0;
                }
            }
            let precision: f64 = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
            let recall: f64 = if tp + fnn > 0.0 { tp / (tp + fnn) } else { 0.0 };
            if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 }
        };
        let mut per = [0.0; 4];
        for (k, v) in per.iter_mut().enumerate() {
            *v = score(&|c| c == k);
        }
        let correct = pairs.iter().filter(|(g, p)| Some(*g) == *p).count();
        ClassificationMetrics {
            per_class_f1: per,
            macro_f1: (per[0] + per[1] + per[2] + per[3]) / 4.0,
            good_f1: score(&|c| c >= 2),
            accuracy: correct as f64 / pairs.len() as f64,
        }
    }

    fn arb_cm() -> impl Strategy<Value = ConfusionMatrix> {
        (prop::array::uniform4(prop::array::uniform4(0u64..20)), prop::array::uniform4(0u64..5)).prop_map(|(counts, malformed)| ConfusionMatrix { counts, malformed })
    }

    proptest! {
        #[test]
        fn matches_brute_force(cm in arb_cm()) {
            prop_assume!(cm.total() > 0);
            let a = classification_metrics(&cm).unwrap();
            let b = brute_force(&cm);
            for k in 0..4 {
                prop_assert!((a.per_class_f1[k] - b.per_class_f1[k]).abs() < 1e-12);
            }
            prop_assert!((a.macro_f1 - b.macro_f1).abs() < 1e-12);
            prop_assert!((a.good_f1 - b.good_f1).abs() < 1e-12);
            prop_assert!((a.accuracy - b.accuracy).abs() < 1e-12);
        }

        #[test]
        fn macro_is_mean(cm in arb_cm()) {
            prop_assume!(cm.total() > 0);
            let m = classification_metrics(&cm).unwrap();
            prop_assert!((m.macro_f1 - m.per_class_f1.iter().sum::<f64>() / 4.0).abs() < 1e-15);
            for v in m.per_class_f1.iter().chain([m.macro_f1, m.good_f1, m.accuracy].iter()) {
                prop_assert!((0.0..=1.0).contains(v));
            }
        }

        #[test]
        fn good_f1_ignores_relabeling_within_halves(cm in arb_cm()) {
            prop_assume!(cm.total() > 0);
            // swap predicted columns 1<->2 (tiers Irrelevant/Mismatch) and 3<->4
            let mut swapped = cm.clone();
            for g in 0..4 {
                swapped.counts[g] = [cm.counts[g][1], cm.counts[g][0], cm.counts[g][3], cm.counts[g][2]];
            }
            let a = classification_metrics(&cm).unwrap().good_f1;
            let b = classification_metrics(&swapped).unwrap().good_f1;
            prop_assert!((a - b).abs() < 1e-15);
        }
    }
}
