//! Three-stage data construction: schema ingestion with quarantine,
//! difficulty-aware sampling from offline probe rollouts, and class-balancing
//! undersampling.

use std::io::BufRead;
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{PolicyParams, SamplerConfig};
use crate::rng::{mix, rng_for, stable_hash};
use crate::rules::{DerivationTable, Tier};
use crate::world::{DatasetRecord, Instance, FEATURE_DIM, GUIDANCE_DIM};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: String,
    pub count_in: usize,
    pub count_out: usize,
    /// Relevance-class histograms, indexed by tier.
    pub classes_in: [usize; 4],
    pub classes_out: [usize; 4],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quarantined {
    /// 1-based source line, when the record came from a file.
    pub line: Option<usize>,
    pub id: Option<String>,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordAccuracy {
    pub id: String,
    pub accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SamplingReport {
    pub stages: Vec<StageReport>,
    pub accuracies: Vec<RecordAccuracy>,
    pub quarantine: Vec<Quarantined>,
}

impl SamplingReport {
    /// Appends another stage's report.
    pub fn extend(&mut self, other: SamplingReport) {
        self.stages.extend(other.stages);
        self.accuracies.extend(other.accuracies);
        self.quarantine.extend(other.quarantine);
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub fn class_histogram(records: &[DatasetRecord]) -> [usize; 4] {
    let mut h = [0; 4];
    for r in records {
        h[r.label_relevance.index()] += 1;
    }
    h
}

fn stage(name: &str, input: &[DatasetRecord], output: &[DatasetRecord]) -> StageReport {
    StageReport {
        stage: name.to_string(),
        count_in: input.len(),
        count_out: output.len(),
        classes_in: class_histogram(input),
        classes_out: class_histogram(output),
    }
}

fn record_key(r: &DatasetRecord, position: usize) -> String {
    r.id.clone().unwrap_or_else(|| format!("#{position}"))
}

/// Checks one parsed record; `Err` carries the quarantine reason.
fn check_record(r: &DatasetRecord, table: &DerivationTable) -> std::result::Result<(), String> {
    if r.query.trim().is_empty() || r.item.trim().is_empty() {
        return Err("schema: empty query or item".into());
    }
    if let Some(f) = &r.features {
        if f.iter().any(|v| !v.is_finite()) {
            return Err("schema: non-finite feature".into());
        }
    }
    let derived = table.derive(r.label_category, r.label_attribution);
    if derived != r.label_relevance {
        return Err(format!(
            "rule violation: category {} and attribute {} derive {}, labeled {}",
            r.label_category.name(),
            r.label_attribution.name(),
            derived.name(),
            r.label_relevance.name()
        ));
    }
    Ok(())
}

/// Parses JSONL records from a reader. Blank lines are skipped; malformed,
/// schema-violating and rule-inconsistent lines are quarantined.
pub fn ingest_reader<R: BufRead>(reader: R, table: &DerivationTable, source: &Path) -> Result<(Vec<DatasetRecord>, SamplingReport)> {
    let mut records = Vec::new();
    let mut quarantine = Vec::new();
    let mut seen = 0usize;
    let mut rejected_classes = [0usize; 4];
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(source, e))?;
        if line.trim().is_empty() {
            continue;
        }
        seen += 1;
        let parsed: std::result::Result<DatasetRecord, _> = serde_json::from_str(&line);
        let reject = |reason: String, id: Option<String>| Quarantined { line: Some(i + 1), id, reason };
        match parsed {
            Err(e) if e.is_data() => quarantine.push(reject(format!("schema: {e}"), None)),
            Err(e) => quarantine.push(reject(format!("malformed JSON: {e}"), None)),
            Ok(r) => match check_record(&r, table) {
                Ok(()) => records.push(r),
                Err(reason) => {
                    rejected_classes[r.label_relevance.index()] += 1;
                    quarantine.push(reject(reason, r.id));
                }
            },
        }
    }
    let out = class_histogram(&records);
    let mut classes_in = out;
    for (c, n) in classes_in.iter_mut().zip(rejected_classes) {
        *c += n;
    }
    let report = SamplingReport {
        stages: vec![StageReport {
            stage: "ingest".into(),
            count_in: seen,
            count_out: records.len(),
            classes_in,
            classes_out: out,
        }],
        accuracies: Vec::new(),
        quarantine,
    };
    Ok((records, report))
}

pub fn ingest(path: impl AsRef<Path>, table: &DerivationTable) -> Result<(Vec<DatasetRecord>, SamplingReport)> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    ingest_reader(std::io::BufReader::new(file), table, path)
}

/// Checks already-materialized records the way `ingest` checks file lines.
pub fn screen(records: Vec<DatasetRecord>, table: &DerivationTable) -> (Vec<DatasetRecord>, SamplingReport) {
    let input = records.clone();
    let mut kept = Vec::with_capacity(records.len());
    let mut quarantine = Vec::new();
    for (i, r) in records.into_iter().enumerate() {
        match check_record(&r, table) {
            Ok(()) => kept.push(r),
            Err(reason) => quarantine.push(Quarantined {
                line: None,
                id: Some(record_key(&r, i)),
                reason,
            }),
        }
    }
    let report = SamplingReport {
        stages: vec![stage("ingest", &input, &kept)],
        accuracies: Vec::new(),
        quarantine,
    };
    (kept, report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DifficultyConfig {
    /// Offline rollouts per record.
    pub rollouts: usize,
    /// Records are kept when their accuracy lies strictly inside this band.
    pub band_low: f64,
    pub band_high: f64,
    pub temperature: f64,
    pub top_k: usize,
    pub seed: u64,
}

impl Default for DifficultyConfig {
    fn default() -> Self {
        DifficultyConfig {
            rollouts: 16,
            band_low: 0.0,
            band_high: 1.0,
            temperature: 1.0,
            top_k: 100,
            seed: 0,
        }
    }
}

impl DifficultyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rollouts < 2 {
            return Err(Error::config("sampling.rollouts", "must be >= 2"));
        }
        if !(0.0..=1.0).contains(&self.band_low) || !(0.0..=1.0).contains(&self.band_high) || self.band_low >= self.band_high {
            return Err(Error::config("sampling.band", "need 0 <= low < high <= 1"));
        }
        self.sampler().validate()
    }

    fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            temperature: self.temperature,
            top_k: self.top_k,
            seed: self.seed,
        }
    }

    pub fn retains(&self, accuracy: f64) -> bool {
        accuracy > self.band_low && accuracy < self.band_high
    }
}

/// Fraction of `k` probe rollouts that are well-formed with the labeled
/// relevance.
pub fn probe_accuracy(probe: &PolicyParams, features: &[f64], gold: Tier, cfg: &DifficultyConfig, seed: u64) -> Result<f64> {
    let mut x = features.to_vec();
    x.extend(std::iter::repeat_n(0.0, GUIDANCE_DIM));
    let mut rng = rng_for(&[seed]);
    let sampler = cfg.sampler();
    let mut hits = 0usize;
    for _ in 0..cfg.rollouts {
        let t = probe.sample_with(&x, &sampler, false, &mut rng)?;
        if t.format_valid() && t.initial_label() == Some(gold) {
            hits += 1;
        }
    }
    Ok(hits as f64 / cfg.rollouts as f64)
}

/// Drops records the probe always or never gets right. Records without
/// usable features cannot be probed and are quarantined.
pub fn difficulty_sample(
    records: Vec<DatasetRecord>,
    probe: &PolicyParams,
    cfg: &DifficultyConfig,
) -> Result<(Vec<DatasetRecord>, SamplingReport)> {
    cfg.validate()?;
    let outcomes = records
        .par_iter()
        .enumerate()
        .map(|(i, r)| -> Result<std::result::Result<f64, String>> {
            let Some(f) = r.features.as_deref() else {
                return Ok(Err("no features to probe".into()));
            };
            if f.len() != FEATURE_DIM {
                return Ok(Err(format!("feature dimension {} (expected {FEATURE_DIM})", f.len())));
            }
            let seed = mix(&[cfg.seed, stable_hash(&record_key(r, i))]);
            probe_accuracy(probe, f, r.label_relevance, cfg, seed).map(Ok)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut report = SamplingReport::default();
    let mut kept = Vec::new();
    for (i, (r, outcome)) in records.iter().zip(outcomes).enumerate() {
        let key = record_key(r, i);
        match outcome {
            Ok(a) => {
                report.accuracies.push(RecordAccuracy { id: key, accuracy: a });
                if cfg.retains(a) {
                    kept.push(r.clone());
                }
            }
            Err(reason) => report.quarantine.push(Quarantined {
                line: None,
                id: Some(key),
                reason,
            }),
        }
    }
    report.stages.push(stage("difficulty", &records, &kept));
    Ok((kept, report))
}

/// Per-class keep counts: the largest total the scarcest class (relative to
/// its target) allows. Classes with nothing available drop out and the
/// remaining targets are renormalized.
pub fn balance_counts(available: [usize; 4], targets: [f64; 4]) -> Result<[usize; 4]> {
    if targets.iter().any(|t| !(t.is_finite() && *t >= 0.0)) || targets.iter().sum::<f64>() <= 0.0 {
        return Err(Error::config("balance.targets", "must be nonnegative with a positive sum"));
    }
    let live: Vec<usize> = (0..4).filter(|&c| targets[c] > 0.0 && available[c] > 0).collect();
    let mass: f64 = live.iter().map(|&c| targets[c]).sum();
    let mut out = [0usize; 4];
    if live.is_empty() {
        return Ok(out);
    }
    let total = live
        .iter()
        .map(|&c| available[c] as f64 / (targets[c] / mass))
        .fold(f64::INFINITY, f64::min);
    for &c in &live {
        let want = (targets[c] / mass * total + 1e-9).floor() as usize;
        out[c] = want.min(available[c]);
    }
    Ok(out)
}

/// Uniformly undersamples each class down to its balanced count. Survivors
/// keep their input order; nothing is duplicated.
pub fn undersample_balance(
    records: Vec<DatasetRecord>,
    targets: [f64; 4],
    seed: u64,
) -> Result<(Vec<DatasetRecord>, SamplingReport)> {
    if records.is_empty() {
        return Err(Error::EmptyInput("undersample_balance needs records"));
    }
    let available = class_histogram(&records);
    let quota = balance_counts(available, targets)?;
    let mut keep = vec![false; records.len()];
    for (c, &q) in quota.iter().enumerate() {
        let members: Vec<usize> = (0..records.len()).filter(|&i| records[i].label_relevance.index() == c).collect();
        let mut rng = rng_for(&[seed, c as u64]);
        for j in sample_indices(&mut rng, members.len(), q) {
            keep[members[j]] = true;
        }
    }
    let kept: Vec<DatasetRecord> = records.iter().zip(&keep).filter(|(_, k)| **k).map(|(r, _)| r.clone()).collect();
    let report = SamplingReport {
        stages: vec![stage("balance", &records, &kept)],
        ..SamplingReport::default()
    };
    Ok((kept, report))
}

/// Replaces the relevance label of a `rate` fraction of records with a
/// different tier, imitating annotation noise. Returns how many changed.
pub fn inject_label_noise(records: &mut [DatasetRecord], rate: f64, seed: u64) -> usize {
    let mut rng = rng_for(&[seed, 0x6e6f_6973_65]);
    let mut changed = 0;
    for r in records.iter_mut() {
        if rng.random::<f64>() < rate {
            let shift = rng.random_range(1..4);
            r.label_relevance = Tier::from_index((r.label_relevance.index() + shift) % 4).expect("index < 4");
            changed += 1;
        }
    }
    changed
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FunnelConfig {
    pub sampling: DifficultyConfig,
    /// Target relevance-class shares after balancing.
    pub targets: [f64; 4],
    /// Share of generated records whose relevance label is corrupted before
    /// screening; only used when records come from the synthetic world.
    pub annotation_noise: f64,
    /// Sharpness of the hand-set probe policy.
    pub probe_scale: f64,
    pub seed: u64,
}

impl Default for FunnelConfig {
    fn default() -> Self {
        FunnelConfig {
            sampling: DifficultyConfig::default(),
            targets: [0.25; 4],
            annotation_noise: 0.05,
            probe_scale: 1.0,
            seed: 0,
        }
    }
}

impl FunnelConfig {
    pub fn validate(&self) -> Result<()> {
        self.sampling.validate()?;
        balance_counts([1; 4], self.targets)?;
        if !(0.0..=1.0).contains(&self.annotation_noise) {
            return Err(Error::config("sampling.annotation_noise", "must be in [0, 1]"));
        }
        if !(self.probe_scale.is_finite() && self.probe_scale >= 0.0) {
            return Err(Error::config("sampling.probe_scale", "must be >= 0"));
        }
        Ok(())
    }
}

/// Records for generated instances with annotation noise applied.
pub fn synthetic_records(instances: &[Instance], cfg: &FunnelConfig) -> Vec<DatasetRecord> {
    let mut records: Vec<DatasetRecord> = instances.iter().map(DatasetRecord::from).collect();
    inject_label_noise(&mut records, cfg.annotation_noise, cfg.seed);
    records
}

/// Runs screening, difficulty sampling and balancing in sequence.
pub fn run_funnel(
    records: Vec<DatasetRecord>,
    table: &DerivationTable,
    probe: &PolicyParams,
    cfg: &FunnelConfig,
) -> Result<(Vec<DatasetRecord>, SamplingReport)> {
    cfg.validate()?;
    let (screened, mut report) = screen(records, table);
    let (sampled, r2) = difficulty_sample(screened, probe, &cfg.sampling)?;
    report.extend(r2);
    let (balanced, r3) = undersample_balance(sampled, cfg.targets, cfg.seed)?;
    report.extend(r3);
    Ok((balanced, report))
}

pub fn write_records(path: impl AsRef<Path>, records: &[DatasetRecord]) -> Result<()> {
    use std::io::Write;
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{generate, probe_policy, WorldConfig};
    use proptest::prelude::*;

    fn rec(c: Tier, a: Tier, r: Tier) -> DatasetRecord {
        DatasetRecord {
            id: None,
            query: "q".into(),
            item: "i".into(),
            label_category: c,
            label_attribution: a,
            label_relevance: r,
            features: None,
            query_class: None,
            difficulty: None,
            attribute_mode: None,
            evidence: None,
        }
    }

    fn of_class(t: Tier, n: usize) -> Vec<DatasetRecord> {
        (0..n)
            .map(|i| DatasetRecord {
                id: Some(format!("{}-{i}", t.name())),
                ..rec(t, Tier::Excellent, t)
            })
            .collect()
    }

    fn ingest_str(s: &str) -> (Vec<DatasetRecord>, SamplingReport) {
        ingest_reader(s.as_bytes(), &DerivationTable::default(), Path::new("<mem>")).unwrap()
    }

    #[test]
    fn three_valid_lines() {
        let line = r#"{"query":"wool coat","item":"cashmere coat","label_category":"Excellent","label_attribution":"Related","label_relevance":"Related"}"#;
        let (recs, rep) = ingest_str(&format!("{line}\n{line}\n\n{line}\n"));
        assert_eq!(recs.len(), 3);
        assert!(rep.quarantine.is_empty());
        assert_eq!(rep.stages[0].count_in, 3);
    }

    #[test]
    fn rule_violation_is_quarantined_with_its_line() {
        let bad = r#"{"query":"q","item":"i","label_category":"Irrelevant","label_attribution":"Excellent","label_relevance":"Excellent"}"#;
        let good = r#"{"query":"q","item":"i","label_category":"Irrelevant","label_attribution":"Excellent","label_relevance":"Irrelevant"}"#;
        let (recs, rep) = ingest_str(&format!("{good}\n{bad}\nnot json\n{{\"query\":\"q\"}}\n"));
        assert_eq!(recs.len(), 1);
        assert_eq!(rep.quarantine.len(), 3);
        assert_eq!(rep.quarantine[0].line, Some(2));
        assert!(rep.quarantine[0].reason.starts_with("rule violation"));
        assert!(rep.quarantine[1].reason.starts_with("malformed JSON"));
        assert!(rep.quarantine[2].reason.starts_with("schema"));
        assert_eq!(rep.stages[0].count_in, 4);
    }

    #[test]
    fn empty_file_yields_nothing() {
        let (recs, rep) = ingest_str("");
        assert!(recs.is_empty());
        assert_eq!(rep.stages[0].count_in, 0);
        assert_eq!(rep.stages[0].count_out, 0);
    }

    #[test]
    fn missing_file_is_an_error() {
        assert!(matches!(ingest("/nonexistent/x.jsonl", &DerivationTable::default()), Err(Error::Io { .. })));
    }

    #[test]
    fn band_edges() {
        let c = DifficultyConfig::default();
        assert!(!c.retains(1.0));
        assert!(!c.retains(0.0));
        assert!(c.retains(0.5));
        let bad = DifficultyConfig { rollouts: 1, ..c };
        assert!(difficulty_sample(vec![], &probe_policy(1.0), &bad).is_err());
    }

    #[test]
    fn difficulty_sample_drops_sure_and_hopeless_records() {
        let world = generate(&WorldConfig {
            n_instances: 300,
            noise_scale: 0.0,
            ..WorldConfig::default()
        })
        .unwrap();
        let recs: Vec<DatasetRecord> = world.iter().map(DatasetRecord::from).collect();
        // A peaked probe on clean data is always right: everything goes.
        let (kept, rep) = difficulty_sample(recs.clone(), &probe_policy(10.0), &DifficultyConfig::default()).unwrap();
        assert!(kept.is_empty());
        assert!(rep.accuracies.iter().all(|a| a.accuracy == 1.0));
        // Labels shifted off the truth are never hit by that probe.
        let mut wrong = recs.clone();
        for r in &mut wrong {
            r.label_relevance = Tier::from_index((r.label_relevance.index() + 1) % 4).unwrap();
        }
        let (kept, _) = difficulty_sample(wrong, &probe_policy(10.0), &DifficultyConfig::default()).unwrap();
        assert!(kept.is_empty());
        // The uniform policy lands strictly inside the band for most records.
        let (kept, rep) = difficulty_sample(recs, &probe_policy(0.0), &DifficultyConfig::default()).unwrap();
        assert!(kept.len() > 200);
        for a in &rep.accuracies {
            assert_eq!(kept.iter().any(|r| r.id.as_deref() == Some(&a.id)), a.accuracy > 0.0 && a.accuracy < 1.0);
        }
    }

    #[test]
    fn records_without_features_are_quarantined_by_the_probe_stage() {
        let recs = vec![rec(Tier::Excellent, Tier::Excellent, Tier::Excellent)];
        let (kept, rep) = difficulty_sample(recs, &probe_policy(1.0), &DifficultyConfig::default()).unwrap();
        assert!(kept.is_empty());
        assert_eq!(rep.quarantine.len(), 1);
    }

    #[test]
    fn skewed_input_is_balanced() {
        let mut recs = of_class(Tier::Excellent, 700);
        for t in [Tier::Irrelevant, Tier::Mismatch, Tier::Related] {
            recs.extend(of_class(t, 100));
        }
        let (out, rep) = undersample_balance(recs, [0.25; 4], 7).unwrap();
        let h = class_histogram(&out);
        // Counting oracle: the scarcest class caps the total at 4 * 100.
        assert_eq!(h, [100, 100, 100, 100]);
        assert_eq!(rep.stages[0].classes_in, [100, 100, 100, 700]);
    }

    #[test]
    fn balanced_input_is_unchanged() {
        let mut recs = Vec::new();
        for t in Tier::ALL {
            recs.extend(of_class(t, 25));
        }
        let (out, _) = undersample_balance(recs.clone(), [0.25; 4], 3).unwrap();
        assert_eq!(out, recs);
    }

    #[test]
    fn balance_is_seeded() {
        let mut recs = of_class(Tier::Excellent, 300);
        recs.extend(of_class(Tier::Mismatch, 50));
        let a = undersample_balance(recs.clone(), [0.0, 0.5, 0.0, 0.5], 11).unwrap().0;
        let b = undersample_balance(recs.clone(), [0.0, 0.5, 0.0, 0.5], 11).unwrap().0;
        let c = undersample_balance(recs, [0.0, 0.5, 0.0, 0.5], 12).unwrap().0;
        let ids = |v: &[DatasetRecord]| v.iter().map(|r| r.id.clone().unwrap()).collect::<Vec<_>>();
        assert_eq!(ids(&a), ids(&b));
        assert_ne!(ids(&a), ids(&c));
        assert_eq!(class_histogram(&a), [0, 50, 0, 50]);
        assert!(undersample_balance(vec![], [0.25; 4], 0).is_err());
    }

    #[test]
    fn label_noise_breaks_rule_consistency() {
        let mut recs = of_class(Tier::Related, 1000);
        let n = inject_label_noise(&mut recs, 0.1, 5);
        assert!((60..140).contains(&n));
        let (kept, rep) = screen(recs, &DerivationTable::default());
        assert_eq!(kept.len(), 1000 - n);
        assert_eq!(rep.quarantine.len(), n);
    }

    proptest! {
        #[test]
        fn balance_never_upsamples_and_hits_targets(
            counts in proptest::array::uniform4(1usize..400),
            raw in proptest::array::uniform4(0.05f64..1.0),
        ) {
            let s: f64 = raw.iter().sum();
            let targets = raw.map(|t| t / s);
            let q = balance_counts(counts, targets).unwrap();
            let total: usize = q.iter().sum();
            for c in 0..4 {
                prop_assert!(q[c] <= counts[c]);
                prop_assert!((q[c] as f64 / total as f64 - targets[c]).abs() <= 4.0 / total as f64 + 1e-9);
            }
        }
    }
}
