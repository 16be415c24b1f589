//! Gated composite reward, the soft-gating ablation, and the two baseline
//! rewards (outcome-only and the fixed weighted sum).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rules::{DerivationTable, Tier};
use crate::trajectory::Trajectory;

/// Gold tiers for one query-item pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GoldLabels {
    pub category: Tier,
    pub attribute: Tier,
    pub relevance: Tier,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RewardVariant {
    /// Gated, rule-aware composite reward.
    Agrl,
    /// `0.4 R_rele + 0.3 R_cate + 0.3 R_attr`.
    GrpoPr,
    /// 1 for a well-formed trajectory with the right label, else 0.
    OutcomeOnly,
}

impl RewardVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            RewardVariant::Agrl => "AGRL",
            RewardVariant::GrpoPr => "GRPO_PR",
            RewardVariant::OutcomeOnly => "OUTCOME_ONLY",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "AGRL" => Some(RewardVariant::Agrl),
            "GRPO_PR" => Some(RewardVariant::GrpoPr),
            "OUTCOME_ONLY" => Some(RewardVariant::OutcomeOnly),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    pub w_cate: f64,
    pub w_attr: f64,
    pub w_reason: f64,
    /// Reward multiplier when the gate is closed: 0 is a hard gate, 1 removes it.
    pub gating_lambda: f64,
    pub variant: RewardVariant,
    /// Weight of rule adherence against self-consistency inside the reasoning reward.
    pub reason_mix: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            w_cate: 0.4,
            w_attr: 0.4,
            w_reason: 0.2,
            gating_lambda: 0.0,
            variant: RewardVariant::Agrl,
            reason_mix: 0.5,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("reward.w_cate", self.w_cate),
            ("reward.w_attr", self.w_attr),
            ("reward.w_reason", self.w_reason),
        ] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::config(name, format!("weight must be finite and >= 0, got {w}")));
            }
        }
        if self.variant == RewardVariant::Agrl {
            let sum = self.w_cate + self.w_attr + self.w_reason;
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::config("reward.w_cate", format!("weights must sum to 1, got {sum}")));
            }
        }
        if !(0.0..=1.0).contains(&self.gating_lambda) {
            return Err(Error::config("reward.gating_lambda", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.reason_mix) {
            return Err(Error::config("reward.reason_mix", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Every reward component for one trajectory. Binary components are stored
/// as 0.0 / 1.0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_cate: f64,
    pub r_attr: f64,
    pub r_rele: f64,
    pub r_adherence: f64,
    pub r_consistency: f64,
    pub r_reason: f64,
    pub r_format: f64,
    pub gate: f64,
    pub total: f64,
}

impl RewardBreakdown {
    /// Well-formed with the right label: the success predicate shared by the
    /// gate, the difficulty filter and offline sampling.
    pub fn is_success(&self) -> bool {
        self.r_rele == 1.0 && self.r_format == 1.0
    }

    /// Weighted fine-grained sum before gating.
    pub fn ungated(&self, cfg: &RewardConfig) -> f64 {
        cfg.w_cate * self.r_cate + cfg.w_attr * self.r_attr + cfg.w_reason * self.r_reason
    }
}

fn bit(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

/// Scores one trajectory against its gold labels using the built-in
/// derivation table.
pub fn score(traj: &Trajectory, gold: &GoldLabels, cfg: &RewardConfig) -> Result<RewardBreakdown> {
    static TABLE: std::sync::OnceLock<DerivationTable> = std::sync::OnceLock::new();
    score_with_table(traj, gold, cfg, TABLE.get_or_init(DerivationTable::default))
}

pub fn score_with_table(
    traj: &Trajectory,
    gold: &GoldLabels,
    cfg: &RewardConfig,
    table: &DerivationTable,
) -> Result<RewardBreakdown> {
    cfg.validate()?;
    Ok(score_unchecked(traj, gold, cfg, table))
}

/// As [`score_with_table`] for a config the caller has already validated.
pub(crate) fn score_unchecked(
    traj: &Trajectory,
    gold: &GoldLabels,
    cfg: &RewardConfig,
    table: &DerivationTable,
) -> RewardBreakdown {
    let mut b = RewardBreakdown::default();
    // malformed output zeroes every component
    if let Some(t) = traj.tiers() {
        b.r_format = 1.0;
        b.r_cate = bit(t.category == gold.category);
        b.r_attr = bit(t.attribute == gold.attribute);
        b.r_rele = bit(t.initial == gold.relevance);
        b.r_adherence = bit(t.derived == table.derive(t.category, t.attribute));
        b.r_consistency = bit(t.initial == t.derived);
        b.r_reason = cfg.reason_mix * b.r_adherence + (1.0 - cfg.reason_mix) * b.r_consistency;
    }
    b.gate = if b.is_success() { 1.0 } else { cfg.gating_lambda };
    b.total = match cfg.variant {
        RewardVariant::Agrl => b.gate * b.ungated(cfg),
        RewardVariant::GrpoPr => pr_sum(&b),
        RewardVariant::OutcomeOnly => bit(b.is_success()),
    };
    b
}

fn pr_sum(b: &RewardBreakdown) -> f64 {
    0.4 * b.r_rele + 0.3 * b.r_cate + 0.3 * b.r_attr
}

pub fn score_grpo_pr(traj: &Trajectory, gold: &GoldLabels) -> f64 {
    let cfg = RewardConfig {
        variant: RewardVariant::GrpoPr,
        ..RewardConfig::default()
    };
    score_unchecked(traj, gold, &cfg, &DerivationTable::default()).total
}

pub fn score_outcome(traj: &Trajectory, gold: &GoldLabels) -> f64 {
    bit(traj.initial_label() == Some(gold.relevance))
}
