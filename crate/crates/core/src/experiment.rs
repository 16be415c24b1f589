//! Experiment variants and the resolution of an experiment config into a
//! training setup.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grpo::{train_with, GrpoConfig, Scorer, TrainSetup, TrainState};
use crate::metrics::{evaluate, EvalReport};
use crate::pipeline::FunnelConfig;
use crate::policy::PolicyParams;
use crate::replay::{DiagnosisBasis, GuidanceDim, ReplayConfig};
use crate::reward::{RewardConfig, RewardVariant};
use crate::rng::mix;
use crate::rules::DerivationTable;
use crate::world::{generate, Instance, WorldConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Variant {
    OutcomeGrpo,
    GrpoPr,
    GrpoRrs,
    AgrlFg,
    AgrlStatic,
    Agrl,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::OutcomeGrpo,
        Variant::GrpoPr,
        Variant::GrpoRrs,
        Variant::AgrlFg,
        Variant::AgrlStatic,
        Variant::Agrl,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::OutcomeGrpo => "OUTCOME_GRPO",
            Variant::GrpoPr => "GRPO_PR",
            Variant::GrpoRrs => "GRPO_RRS",
            Variant::AgrlFg => "AGRL_FG",
            Variant::AgrlStatic => "AGRL_STATIC",
            Variant::Agrl => "AGRL",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Variant::ALL.into_iter().find(|v| v.as_str() == s)
    }

    pub fn default_reward(self) -> RewardVariant {
        match self {
            Variant::OutcomeGrpo => RewardVariant::OutcomeOnly,
            Variant::GrpoPr => RewardVariant::GrpoPr,
            _ => RewardVariant::Agrl,
        }
    }

    pub fn uses_replay(self) -> bool {
        matches!(self, Variant::AgrlFg | Variant::AgrlStatic | Variant::Agrl)
    }
}

/// Replay knobs settable from config; unset fields take the variant's value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReplayOverrides {
    pub tau_trigger: Option<f64>,
    pub tau_dim: Option<f64>,
    pub fixed_dims: Option<Vec<GuidanceDim>>,
    pub force_trigger: Option<bool>,
    pub basis: Option<DiagnosisBasis>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub variant: Variant,
    pub world: WorldConfig,
    pub grpo: GrpoConfig,
    pub reward: RewardConfig,
    /// Set when the reward variant was given explicitly rather than implied.
    pub reward_variant_explicit: bool,
    pub replay: ReplayOverrides,
    pub sampling: FunnelConfig,
    /// Held-out instances for evaluation.
    pub eval_instances: usize,
    /// Save a checkpoint every this many steps; 0 saves only the final one.
    pub checkpoint_every: usize,
    pub output_dir: String,
    /// Optional derivation-table file replacing the built-in rules.
    pub rules_path: Option<String>,
    /// Optional JSONL training set replacing the generated world.
    pub data_path: Option<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            variant: Variant::Agrl,
            world: WorldConfig::default(),
            grpo: GrpoConfig::default(),
            reward: RewardConfig::default(),
            reward_variant_explicit: false,
            replay: ReplayOverrides::default(),
            sampling: FunnelConfig::default(),
            eval_instances: 1000,
            checkpoint_every: 0,
            output_dir: "runs/default".into(),
            rules_path: None,
            data_path: None,
        }
    }
}

impl ExperimentConfig {
    pub fn for_variant(variant: Variant) -> Self {
        let mut cfg = ExperimentConfig {
            variant,
            ..ExperimentConfig::default()
        };
        cfg.reward.variant = variant.default_reward();
        cfg
    }

    /// Applies the run seed to every seeded component.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.world.seed = seed;
        self.grpo.seed = seed;
        self.sampling.seed = seed;
        self.sampling.sampling.seed = seed;
        self
    }

    pub fn reward_config(&self) -> RewardConfig {
        let mut r = self.reward.clone();
        if !self.reward_variant_explicit {
            r.variant = self.variant.default_reward();
        }
        r
    }

    /// The replay controller implied by the variant and overrides. Overrides
    /// that contradict the variant are config errors.
    pub fn replay_config(&self) -> Result<ReplayConfig> {
        let o = &self.replay;
        let base = ReplayConfig {
            tau_trigger: o.tau_trigger,
            tau_dim: o.tau_dim,
            basis: o.basis.unwrap_or(DiagnosisBasis::Gated),
            ..ReplayConfig::default()
        };
        let v = self.variant.as_str();
        let cfg = match self.variant {
            Variant::OutcomeGrpo | Variant::GrpoPr | Variant::GrpoRrs => {
                if o.fixed_dims.is_some() || o.force_trigger == Some(true) {
                    return Err(Error::config("replay.fixed_dims", format!("{v} trains without replay")));
                }
                ReplayConfig::disabled()
            }
            Variant::AgrlFg => {
                if matches!(&o.fixed_dims, Some(d) if d[..] != [GuidanceDim::Relevance]) {
                    return Err(Error::config("replay.fixed_dims", "AGRL_FG reveals relevance only"));
                }
                ReplayConfig {
                    fixed_dims: Some(vec![GuidanceDim::Relevance]),
                    force_trigger: o.force_trigger.unwrap_or(false),
                    ..base
                }
            }
            Variant::AgrlStatic => {
                if o.force_trigger == Some(false) {
                    return Err(Error::config("replay.force_trigger", "AGRL_STATIC replays every group"));
                }
                ReplayConfig {
                    fixed_dims: o.fixed_dims.clone(),
                    force_trigger: true,
                    ..base
                }
            }
            Variant::Agrl => {
                if o.fixed_dims.is_some() {
                    return Err(Error::config("replay.fixed_dims", "AGRL chooses dimensions adaptively; use AGRL_FG"));
                }
                if o.force_trigger == Some(true) {
                    return Err(Error::config("replay.force_trigger", "AGRL triggers adaptively; use AGRL_STATIC"));
                }
                base
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn table(&self) -> Result<DerivationTable> {
        match &self.rules_path {
            Some(p) => DerivationTable::load(p),
            None => Ok(DerivationTable::default()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.grpo.validate()?;
        let reward = self.reward_config();
        reward.validate()?;
        if self.reward_variant_explicit
            && self.variant == Variant::OutcomeGrpo
            && reward.variant != RewardVariant::OutcomeOnly
        {
            return Err(Error::config("reward.variant", "OUTCOME_GRPO scores outcomes only"));
        }
        if self.eval_instances == 0 {
            return Err(Error::config("eval_instances", "must be >= 1"));
        }
        self.replay_config()?;
        self.sampling.validate()?;
        Ok(())
    }

    pub fn setup(&self) -> Result<TrainSetup> {
        self.validate()?;
        Ok(TrainSetup {
            grpo: self.grpo.clone(),
            scorer: Scorer::new(self.reward_config(), self.table()?)?,
            replay: self.replay_config()?,
            variant: self.variant.as_str().to_string(),
        })
    }

    /// Held-out world drawn from a seed derived from the training world's.
    pub fn eval_world(&self) -> WorldConfig {
        WorldConfig {
            seed: mix(&[self.world.seed, 0x4556_414c]),
            n_instances: self.eval_instances,
            ..self.world.clone()
        }
    }

    pub fn eval_set(&self) -> Result<Vec<Instance>> {
        generate(&self.eval_world())
    }
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub state: TrainState,
    pub eval: EvalReport,
}

/// Trains on `train_set` and evaluates the final policy on the held-out set.
pub fn run_on<F>(cfg: &ExperimentConfig, train_set: &[Instance], on_step: F) -> Result<RunResult>
where
    F: FnMut(usize, &PolicyParams) -> Result<()>,
{
    let setup = cfg.setup()?;
    let state = train_with(train_set, &setup, None, on_step)?;
    let eval = evaluate(&state.params, &cfg.eval_set()?, &setup.scorer.table)?;
    Ok(RunResult { state, eval })
}

/// Generates the world from the config, trains and evaluates.
pub fn run(cfg: &ExperimentConfig) -> Result<RunResult> {
    cfg.validate()?;
    let data = generate(&cfg.world)?;
    run_on(cfg, &data, |_, _| Ok(()))
}
