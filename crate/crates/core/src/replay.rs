//! Adaptive guided replay: when to replay a group, which dimensions to
//! reveal, and how the revealed tiers reach the policy input.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reward::{GoldLabels, RewardBreakdown};
use crate::rules::Tier;
use crate::world::GUIDANCE_DIM;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceDim {
    Category,
    Attribute,
    Relevance,
}

impl GuidanceDim {
    pub const ALL: [GuidanceDim; 3] = [GuidanceDim::Category, GuidanceDim::Attribute, GuidanceDim::Relevance];

    pub fn name(self) -> &'static str {
        match self {
            GuidanceDim::Category => "category",
            GuidanceDim::Attribute => "attribute",
            GuidanceDim::Relevance => "relevance",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        GuidanceDim::ALL.into_iter().find(|d| d.name() == s)
    }

    fn block(self) -> usize {
        self as usize
    }

    fn title(self) -> &'static str {
        match self {
            GuidanceDim::Category => "Category",
            GuidanceDim::Attribute => "Attribute",
            GuidanceDim::Relevance => "Relevance",
        }
    }

    fn gold(self, gold: &GoldLabels) -> Tier {
        match self {
            GuidanceDim::Category => gold.category,
            GuidanceDim::Attribute => gold.attribute,
            GuidanceDim::Relevance => gold.relevance,
        }
    }
}

/// Which per-trajectory signal the in-batch diagnosis averages.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiagnosisBasis {
    /// The raw component bits (category match, attribute match, label match).
    Raw,
    /// The components as the policy is paid for them: multiplied by the
    /// validity gate.
    Gated,
}

impl DiagnosisBasis {
    pub fn name(self) -> &'static str {
        match self {
            DiagnosisBasis::Raw => "raw",
            DiagnosisBasis::Gated => "gated",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "raw" => Some(DiagnosisBasis::Raw),
            "gated" => Some(DiagnosisBasis::Gated),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayConfig {
    pub enabled: bool,
    /// Group-level trigger threshold; falls back to the engine's tau.
    pub tau_trigger: Option<f64>,
    /// Per-dimension threshold; falls back to the engine's tau.
    pub tau_dim: Option<f64>,
    /// Bypass diagnosis and always reveal these dimensions.
    pub fixed_dims: Option<Vec<GuidanceDim>>,
    /// Replay every group regardless of its reward.
    pub force_trigger: bool,
    pub basis: DiagnosisBasis,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        ReplayConfig {
            enabled: true,
            tau_trigger: None,
            tau_dim: None,
            fixed_dims: None,
            force_trigger: false,
            basis: DiagnosisBasis::Gated,
        }
    }
}

impl ReplayConfig {
    pub fn disabled() -> Self {
        ReplayConfig {
            enabled: false,
            ..ReplayConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (field, v) in [("replay.tau_trigger", self.tau_trigger), ("replay.tau_dim", self.tau_dim)] {
            if let Some(t) = v {
                if !(0.0..=1.0).contains(&t) {
                    return Err(Error::config(field, "must be in [0, 1]"));
                }
            }
        }
        if matches!(&self.fixed_dims, Some(d) if d.is_empty()) {
            return Err(Error::config("replay.fixed_dims", "must name at least one dimension"));
        }
        Ok(())
    }

    pub fn trigger_tau(&self, tau: f64) -> f64 {
        self.tau_trigger.unwrap_or(tau)
    }

    pub fn dim_tau(&self, tau: f64) -> f64 {
        self.tau_dim.unwrap_or(tau)
    }

    /// Whether a group with these unguided rewards is replayed.
    pub fn triggers(&self, rewards: &[RewardBreakdown], tau: f64) -> bool {
        self.active(tau) && (self.force_trigger || should_replay(rewards, self.trigger_tau(tau)))
    }

    /// A zero trigger threshold switches replay off for the run, so that
    /// tau = 0 coincides with training without replay.
    pub fn active(&self, tau: f64) -> bool {
        self.enabled && (self.force_trigger || self.trigger_tau(tau) > 0.0)
    }
}

/// Mean total reward at or below tau.
pub fn should_replay(rewards: &[RewardBreakdown], tau: f64) -> bool {
    if rewards.is_empty() {
        return false;
    }
    let mean = rewards.iter().map(|r| r.total).sum::<f64>() / rewards.len() as f64;
    mean <= tau
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnosis {
    pub category: f64,
    pub attribute: f64,
    pub relevance: f64,
}

impl Diagnosis {
    pub fn get(&self, dim: GuidanceDim) -> f64 {
        match dim {
            GuidanceDim::Category => self.category,
            GuidanceDim::Attribute => self.attribute,
            GuidanceDim::Relevance => self.relevance,
        }
    }
}

/// In-batch accuracy of each dimension over every trajectory of every
/// unguided group passed in.
pub fn diagnose<'a, I>(groups: I, basis: DiagnosisBasis) -> Result<Diagnosis>
where
    I: IntoIterator<Item = &'a [RewardBreakdown]>,
{
    let mut sum = [0.0; 3];
    let mut n = 0usize;
    for rewards in groups {
        for r in rewards {
            let w = match basis {
                DiagnosisBasis::Raw => 1.0,
                DiagnosisBasis::Gated => r.gate,
            };
            sum[0] += w * r.r_cate;
            sum[1] += w * r.r_attr;
            sum[2] += w * r.r_rele;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptyInput("diagnosis needs at least one trajectory"));
    }
    let n = n as f64;
    Ok(Diagnosis {
        category: sum[0] / n,
        attribute: sum[1] / n,
        relevance: sum[2] / n,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidanceSpec {
    /// Revealed dimensions in canonical order, each with its gold tier.
    pub entries: Vec<(GuidanceDim, Tier)>,
    pub rendered_text: String,
    pub feature_encoding: Vec<f64>,
}

impl GuidanceSpec {
    pub fn new(gold: &GoldLabels, dims: &[GuidanceDim]) -> Self {
        let mut dims = dims.to_vec();
        dims.sort();
        dims.dedup();
        let entries: Vec<(GuidanceDim, Tier)> = dims.iter().map(|&d| (d, d.gold(gold))).collect();
        let mut feature_encoding = vec![0.0; GUIDANCE_DIM];
        for &(d, t) in &entries {
            feature_encoding[4 * d.block() + t.index()] = 1.0;
        }
        GuidanceSpec {
            rendered_text: render(&entries),
            entries,
            feature_encoding,
        }
    }

    pub fn dims(&self) -> Vec<GuidanceDim> {
        self.entries.iter().map(|(d, _)| *d).collect()
    }
}

/// Dimensions sharing a tier are grouped, e.g.
/// `Guidance: reason toward Attribute and Relevance = 2-Mismatch.`
fn render(entries: &[(GuidanceDim, Tier)]) -> String {
    let mut parts: Vec<String> = Vec::new();
    let mut i = 0;
    while i < entries.len() {
        let tier = entries[i].1;
        let names: Vec<&str> = entries[i..]
            .iter()
            .take_while(|(_, t)| *t == tier)
            .map(|(d, _)| d.title())
            .collect();
        i += names.len();
        parts.push(format!("{} = {}", names.join(" and "), tier.label()));
    }
    format!("Guidance: reason toward {}.", parts.join("; "))
}

/// Dimensions whose diagnosis falls below tau; relevance alone when none do.
pub fn select_dims(diagnosis: &Diagnosis, tau: f64) -> Vec<GuidanceDim> {
    let dims: Vec<GuidanceDim> = GuidanceDim::ALL
        .into_iter()
        .filter(|&d| diagnosis.get(d) < tau)
        .collect();
    if dims.is_empty() {
        vec![GuidanceDim::Relevance]
    } else {
        dims
    }
}

pub fn build_guidance(gold: &GoldLabels, diagnosis: &Diagnosis, tau: f64) -> GuidanceSpec {
    GuidanceSpec::new(gold, &select_dims(diagnosis, tau))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayDecision {
    pub trigger: bool,
    pub diagnosed_dims: Diagnosis,
    pub spec: Option<GuidanceSpec>,
}

/// Trigger and guidance for one group under the controller config.
pub fn decide(
    rewards: &[RewardBreakdown],
    gold: &GoldLabels,
    diagnosis: &Diagnosis,
    cfg: &ReplayConfig,
    tau: f64,
) -> ReplayDecision {
    let trigger = cfg.triggers(rewards, tau);
    let spec = trigger.then(|| match &cfg.fixed_dims {
        Some(dims) => GuidanceSpec::new(gold, dims),
        None => build_guidance(gold, diagnosis, cfg.dim_tau(tau)),
    });
    ReplayDecision {
        trigger,
        diagnosed_dims: *diagnosis,
        spec,
    }
}

/// One line of the replay log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayEvent {
    pub step: usize,
    pub instance_id: String,
    pub mean_reward_before: f64,
    pub dims: Vec<GuidanceDim>,
    pub mean_reward_after: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use Tier::*;

    fn rb(cate: f64, attr: f64, rele: f64, format: f64, total: f64) -> RewardBreakdown {
        RewardBreakdown {
            r_cate: cate,
            r_attr: attr,
            r_rele: rele,
            r_format: format,
            gate: if rele == 1.0 && format == 1.0 { 1.0 } else { 0.0 },
            total,
            ..RewardBreakdown::default()
        }
    }

    fn gold() -> GoldLabels {
        GoldLabels {
            category: Excellent,
            attribute: Mismatch,
            relevance: Mismatch,
        }
    }

    #[test]
    fn trigger_boundaries() {
        let low = [rb(0., 0., 0., 1., 0.05)];
        let high = [rb(0., 0., 0., 1., 0.5)];
        assert!(should_replay(&low, 0.1));
        assert!(!should_replay(&high, 0.1));
        assert!(!should_replay(&low, 0.0));
        assert!(should_replay(&[rb(0., 0., 0., 1., 0.0)], 0.0));
    }

    #[test]
    fn zero_tau_disables_the_controller() {
        let cfg = ReplayConfig::default();
        assert!(!cfg.active(0.0));
        assert!(cfg.active(0.1));
        let zero = [rb(0., 0., 0., 0., 0.0)];
        let d = decide(&zero, &gold(), &Diagnosis::default(), &cfg, 0.0);
        assert!(!d.trigger && d.spec.is_none());
        let forced = ReplayConfig { force_trigger: true, ..cfg };
        assert!(decide(&[rb(1., 1., 1., 1., 1.0)], &gold(), &Diagnosis::default(), &forced, 0.0).trigger);
    }

    #[test]
    fn diagnosis_means() {
        let g1 = vec![rb(1., 1., 1., 1., 1.), rb(1., 0., 0., 1., 0.)];
        let g2 = vec![rb(1., 1., 0., 0., 0.), rb(1., 0., 1., 1., 0.6)];
        let d = diagnose([&g1[..], &g2[..]], DiagnosisBasis::Raw).unwrap();
        // hand recomputation: cate 4/4, attr 2/4, rele 2/4
        assert_eq!((d.category, d.attribute, d.relevance), (1.0, 0.5, 0.5));
        // only rows 1 and 4 pass the gate: cate 2/4, attr 1/4, rele 2/4
        let g = diagnose([&g1[..], &g2[..]], DiagnosisBasis::Gated).unwrap();
        assert_eq!((g.category, g.attribute, g.relevance), (0.5, 0.25, 0.5));
        assert!(diagnose(std::iter::empty(), DiagnosisBasis::Raw).is_err());
    }

    #[test]
    fn dims_follow_threshold_with_fallback() {
        let d = Diagnosis {
            category: 0.05,
            attribute: 0.4,
            relevance: 0.05,
        };
        assert_eq!(select_dims(&d, 0.1), vec![GuidanceDim::Category, GuidanceDim::Relevance]);
        assert_eq!(select_dims(&Diagnosis::default(), 0.1), GuidanceDim::ALL.to_vec());
        let high = Diagnosis {
            category: 0.5,
            attribute: 0.5,
            relevance: 0.5,
        };
        assert_eq!(select_dims(&high, 0.1), vec![GuidanceDim::Relevance]);
    }

    #[test]
    fn rendered_text_names_both_mismatches() {
        let spec = GuidanceSpec::new(&gold(), &[GuidanceDim::Relevance, GuidanceDim::Attribute]);
        assert_eq!(spec.rendered_text, "Guidance: reason toward Attribute and Relevance = 2-Mismatch.");
        let all = GuidanceSpec::new(&gold(), &GuidanceDim::ALL);
        assert_eq!(
            all.rendered_text,
            "Guidance: reason toward Category = 4-Excellent; Attribute and Relevance = 2-Mismatch."
        );
    }

    #[test]
    fn encoding_is_minimal() {
        let spec = GuidanceSpec::new(&gold(), &[GuidanceDim::Relevance]);
        assert!(spec.feature_encoding[..8].iter().all(|&v| v == 0.0));
        assert_eq!(spec.feature_encoding[8 + Mismatch.index()], 1.0);
        assert_eq!(spec.feature_encoding.iter().sum::<f64>(), 1.0);
        let both = GuidanceSpec::new(&gold(), &[GuidanceDim::Category, GuidanceDim::Attribute]);
        assert_eq!(both.feature_encoding[Excellent.index()], 1.0);
        assert_eq!(both.feature_encoding[4 + Mismatch.index()], 1.0);
        assert!(both.feature_encoding[8..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fixed_dims_override_diagnosis() {
        let cfg = ReplayConfig {
            fixed_dims: Some(vec![GuidanceDim::Relevance]),
            ..ReplayConfig::default()
        };
        let d = decide(&[rb(0., 0., 0., 0., 0.)], &gold(), &Diagnosis::default(), &cfg, 0.1);
        assert_eq!(d.spec.unwrap().dims(), vec![GuidanceDim::Relevance]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn trigger_monotone_in_tau(totals in prop::collection::vec(0.0f64..=1.0, 1..20), a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
                let rewards: Vec<RewardBreakdown> = totals.iter().map(|&t| rb(0., 0., 0., 1., t)).collect();
                let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
                prop_assert!(!should_replay(&rewards, lo) || should_replay(&rewards, hi));
            }

            #[test]
            fn no_cleared_dimension_is_revealed(c in 0.0f64..=1.0, at in 0.0f64..=1.0, r in 0.0f64..=1.0, tau in 0.0f64..=1.0) {
                let d = Diagnosis { category: c, attribute: at, relevance: r };
                let dims = select_dims(&d, tau);
                prop_assert!(!dims.is_empty());
                let fallback = dims == vec![GuidanceDim::Relevance] && r >= tau;
                for dim in dims {
                    prop_assert!(d.get(dim) < tau || fallback);
                }
            }
        }
    }
}
