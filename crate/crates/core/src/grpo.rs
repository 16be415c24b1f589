//! Group-relative policy optimization: group rollouts, the difficulty filter,
//! normalized advantages, the clipped-ratio objective with a KL penalty,
//! gradient accumulation and the training loop with guided replay.

use rand::seq::index::sample as sample_indices;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{gradient_contributing_ratio, reward_delta, rule_adherence_rate, TraceRow};
use crate::policy::{categorical_kl, PolicyParams, SamplerConfig, LOGP_FLOOR};
use crate::replay::{decide, diagnose, GuidanceSpec, ReplayConfig, ReplayEvent};
use crate::reward::{score_unchecked, RewardBreakdown, RewardConfig};
use crate::rng::{mix, rng_for, stable_hash};
use crate::rules::DerivationTable;
use crate::trajectory::{Trajectory, SLOT_COUNT};
use crate::world::{policy_input, Instance};

/// Guard on the advantage denominator.
pub const EPS_NUM: f64 = 1e-8;

/// Below this a group's reward spread counts as zero.
const ZERO_STD: f64 = 1e-12;

const SALT_UNGUIDED: u64 = 0;
const SALT_REPLAY: u64 = 1;
const SALT_BATCH: u64 = 2;

/// Which input the importance ratios of guided trajectories are evaluated on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatioInput {
    /// The augmented input the trajectory was sampled from.
    Generation,
    /// The original input without guidance.
    Original,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub clip_eps: f64,
    pub kl_beta: f64,
    pub adv_clip: f64,
    pub band_low: f64,
    pub band_high: f64,
    pub replay_tau: f64,
    pub learning_rate: f64,
    pub grad_accum_steps: usize,
    pub batch_size: usize,
    pub max_steps: usize,
    /// Optimizer passes over each step's rollouts.
    pub ppo_epochs: usize,
    pub temperature: f64,
    pub top_k: usize,
    pub ratio_input: RatioInput,
    /// Carried for config fidelity; there is no value function to clip.
    pub value_clip: f64,
    pub seed: u64,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        GrpoConfig {
            group_size: 16,
            clip_eps: 0.2,
            kl_beta: 0.04,
            adv_clip: 2.0,
            band_low: 0.01,
            band_high: 0.9,
            replay_tau: 0.1,
            learning_rate: 1.0,
            grad_accum_steps: 16,
            batch_size: 64,
            max_steps: 500,
            ppo_epochs: 1,
            temperature: 0.99,
            top_k: 100,
            ratio_input: RatioInput::Generation,
            value_clip: 0.5,
            seed: 0,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: &str| Err(Error::config(format!("grpo.{field}"), reason));
        if self.group_size < 2 {
            return bad("group_size", "must be >= 2");
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return bad("clip_eps", "must be in (0, 1)");
        }
        if !(self.kl_beta >= 0.0 && self.kl_beta.is_finite()) {
            return bad("kl_beta", "must be >= 0");
        }
        if !(self.adv_clip > 0.0) {
            return bad("adv_clip", "must be > 0");
        }
        if !(0.0..=1.0).contains(&self.band_low) || !(0.0..=1.0).contains(&self.band_high) {
            return bad("band_low", "band endpoints must lie in [0, 1]");
        }
        if self.band_low >= self.band_high {
            return bad("band_high", "must exceed band_low");
        }
        if !(0.0..=1.0).contains(&self.replay_tau) {
            return bad("replay_tau", "must be in [0, 1]");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", "must be > 0");
        }
        if self.grad_accum_steps == 0 {
            return bad("grad_accum_steps", "must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be >= 1");
        }
        if self.ppo_epochs == 0 {
            return bad("ppo_epochs", "must be >= 1");
        }
        self.sampler(0).validate()
    }

    pub fn sampler(&self, seed: u64) -> SamplerConfig {
        SamplerConfig {
            temperature: self.temperature,
            top_k: self.top_k,
            seed,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterStatus {
    Kept,
    DroppedAllWrong,
    DroppedTooEasy,
    DegenerateZeroStd,
}

impl FilterStatus {
    pub fn name(self) -> &'static str {
        match self {
            FilterStatus::Kept => "kept",
            FilterStatus::DroppedAllWrong => "dropped_all_wrong",
            FilterStatus::DroppedTooEasy => "dropped_too_easy",
            FilterStatus::DegenerateZeroStd => "degenerate_zero_std",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Group {
    pub instance_id: String,
    /// Policy input the trajectories were sampled from.
    pub input: Vec<f64>,
    /// Policy input on which ratios and KL are evaluated.
    pub ratio_input: Vec<f64>,
    pub trajectories: Vec<Trajectory>,
    pub rewards: Vec<RewardBreakdown>,
    /// Empty unless the group is kept.
    pub advantages: Vec<f64>,
    pub guided: bool,
    pub guidance: Option<GuidanceSpec>,
    pub filter_status: FilterStatus,
}

impl Group {
    pub fn success_fraction(&self) -> f64 {
        success_fraction(&self.rewards)
    }

    pub fn mean_reward(&self) -> f64 {
        mean(self.rewards.iter().map(|r| r.total))
    }

    pub fn reward_std(&self) -> f64 {
        population_std(&self.rewards.iter().map(|r| r.total).collect::<Vec<_>>())
    }
}

fn mean(xs: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = xs.len();
    if n == 0 {
        return 0.0;
    }
    xs.sum::<f64>() / n as f64
}

fn population_std(xs: &[f64]) -> f64 {
    let m = mean(xs.iter().copied());
    mean(xs.iter().map(|x| (x - m) * (x - m))).sqrt()
}

pub fn success_fraction(rewards: &[RewardBreakdown]) -> f64 {
    if rewards.is_empty() {
        return 0.0;
    }
    rewards.iter().filter(|r| r.is_success()).count() as f64 / rewards.len() as f64
}

/// Band filter on the success fraction, then the zero-spread check.
pub fn filter_status(rewards: &[RewardBreakdown], cfg: &GrpoConfig) -> FilterStatus {
    let f = success_fraction(rewards);
    if f <= cfg.band_low {
        return FilterStatus::DroppedAllWrong;
    }
    if f >= cfg.band_high {
        return FilterStatus::DroppedTooEasy;
    }
    let totals: Vec<f64> = rewards.iter().map(|r| r.total).collect();
    if population_std(&totals) <= ZERO_STD {
        return FilterStatus::DegenerateZeroStd;
    }
    FilterStatus::Kept
}

pub fn filter_group(group: &Group, cfg: &GrpoConfig) -> FilterStatus {
    filter_status(&group.rewards, cfg)
}

/// `(r - mean) / std` with population statistics, clipped to `adv_clip`.
/// Returns `None` for a group without reward spread.
pub fn compute_advantages(rewards: &[f64], adv_clip: f64) -> Option<Vec<f64>> {
    let std = population_std(rewards);
    if std <= ZERO_STD {
        return None;
    }
    let m = mean(rewards.iter().copied());
    let denom = std.max(EPS_NUM);
    Some(
        rewards
            .iter()
            .map(|r| ((r - m) / denom).clamp(-adv_clip, adv_clip))
            .collect(),
    )
}

/// Everything needed to score a trajectory.
#[derive(Clone, Debug)]
pub struct Scorer {
    pub reward: RewardConfig,
    pub table: DerivationTable,
}

impl Scorer {
    pub fn new(reward: RewardConfig, table: DerivationTable) -> Result<Self> {
        reward.validate()?;
        Ok(Scorer { reward, table })
    }

    pub fn score(&self, traj: &Trajectory, instance: &Instance) -> RewardBreakdown {
        score_unchecked(traj, &instance.gold(), &self.reward, &self.table)
    }
}

/// Samples and scores `group_size` trajectories, then filters the group and
/// computes its advantages.
pub fn rollout_group(
    instance: &Instance,
    policy: &PolicyParams,
    cfg: &GrpoConfig,
    scorer: &Scorer,
    guidance: Option<&GuidanceSpec>,
    seed: u64,
) -> Result<Group> {
    let input = policy_input(instance, guidance.map(|g| &g.feature_encoding[..]));
    let sampler = cfg.sampler(seed);
    let mut rng = rng_for(&[seed]);
    let guided = guidance.is_some();
    let trajectories = (0..cfg.group_size)
        .map(|_| policy.sample_with(&input, &sampler, guided, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let rewards: Vec<RewardBreakdown> = trajectories.iter().map(|t| scorer.score(t, instance)).collect();
    let ratio_input = match (guided, cfg.ratio_input) {
        (true, RatioInput::Original) => policy_input(instance, None),
        _ => input.clone(),
    };
    let filter_status = filter_status(&rewards, cfg);
    let advantages = if filter_status == FilterStatus::Kept {
        let totals: Vec<f64> = rewards.iter().map(|r| r.total).collect();
        compute_advantages(&totals, cfg.adv_clip).unwrap_or_default()
    } else {
        Vec::new()
    };
    Ok(Group {
        instance_id: instance.id.clone(),
        input,
        ratio_input,
        trajectories,
        rewards,
        advantages,
        guided,
        guidance: guidance.cloned(),
        filter_status,
    })
}

/// Regenerates a group from the guidance-augmented input.
pub fn replay(
    instance: &Instance,
    spec: &GuidanceSpec,
    policy: &PolicyParams,
    cfg: &GrpoConfig,
    scorer: &Scorer,
    seed: u64,
) -> Result<Group> {
    rollout_group(instance, policy, cfg, scorer, Some(spec), seed)
}

/// Sums of the objective terms over a set of groups, before the batch mean.
#[derive(Clone, Debug)]
pub struct Accumulated {
    pub objective: f64,
    pub kl: f64,
    pub kept: usize,
    /// Gradient of the summed objective (ascent direction).
    pub grad: PolicyParams,
}

impl Accumulated {
    pub fn zeros(like: &PolicyParams) -> Self {
        Accumulated {
            objective: 0.0,
            kl: 0.0,
            kept: 0,
            grad: PolicyParams::zeros(like.layout()),
        }
    }

    pub fn merge(&mut self, other: &Accumulated) {
        self.objective += other.objective;
        self.kl += other.kl;
        self.kept += other.kept;
        self.grad.axpy(1.0, &other.grad);
    }

    /// Loss `-J` and its gradient, averaged over kept groups.
    pub fn finish(mut self) -> (f64, PolicyParams) {
        if self.kept == 0 {
            return (0.0, self.grad);
        }
        let n = self.kept as f64;
        self.grad.scale(-1.0 / n);
        (-self.objective / n, self.grad)
    }

    pub fn mean_kl(&self) -> f64 {
        if self.kept == 0 {
            0.0
        } else {
            self.kl / self.kept as f64
        }
    }
}

/// Objective of one kept group: the mean over trajectories of the token-mean
/// clipped surrogate minus `beta` times the token-mean KL to the reference.
fn group_objective(
    group: &Group,
    policy: &PolicyParams,
    old: &PolicyParams,
    reference: &PolicyParams,
    cfg: &GrpoConfig,
) -> Result<Accumulated> {
    let mut acc = Accumulated::zeros(policy);
    if group.filter_status != FilterStatus::Kept {
        return Ok(acc);
    }
    let g = group.trajectories.len() as f64;
    let per_token = 1.0 / SLOT_COUNT as f64;
    let x = &group.ratio_input;
    for (traj, &adv) in group.trajectories.iter().zip(&group.advantages) {
        let (lp_new, _) = policy.log_prob(x, traj)?;
        let (lp_old, _) = old.log_prob(x, traj)?;
        let mut coef = [0.0; SLOT_COUNT];
        let mut surrogate = 0.0;
        for t in 0..SLOT_COUNT {
            let rho = (lp_new[t].max(LOGP_FLOOR) - lp_old[t].max(LOGP_FLOOR)).exp();
            let clipped = rho.clamp(1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps);
            let unclipped_term = rho * adv;
            let clipped_term = clipped * adv;
            if unclipped_term <= clipped_term {
                surrogate += unclipped_term;
                // d(rho * A) = rho * A * dlogp; the clipped branch is constant
                coef[t] = per_token / g * rho * adv;
            } else {
                surrogate += clipped_term;
            }
        }
        let tokens = traj.tokens();
        let kl: f64 = (0..SLOT_COUNT)
            .map(|s| {
                categorical_kl(
                    &policy.logits(s, x, &tokens[..s]),
                    &reference.logits(s, x, &tokens[..s]),
                )
            })
            .sum();
        acc.objective += per_token / g * (surrogate - cfg.kl_beta * kl);
        acc.kl += per_token / g * kl;
        policy.accumulate_token_grads(x, traj, &coef, &mut acc.grad)?;
        if cfg.kl_beta > 0.0 {
            policy.accumulate_kl_grad(reference, x, traj, -cfg.kl_beta * per_token / g, &mut acc.grad)?;
        }
    }
    acc.kept = 1;
    Ok(acc)
}

/// Unnormalized sums over `groups`; non-kept groups contribute nothing.
pub fn accumulate(
    groups: &[Group],
    policy: &PolicyParams,
    old: &PolicyParams,
    reference: &PolicyParams,
    cfg: &GrpoConfig,
) -> Result<Accumulated> {
    let parts = groups
        .par_iter()
        .map(|g| group_objective(g, policy, old, reference, cfg))
        .collect::<Result<Vec<_>>>()?;
    let mut acc = Accumulated::zeros(policy);
    for p in &parts {
        acc.merge(p);
    }
    Ok(acc)
}

/// Loss `-J` averaged over kept groups and the gradient of that loss.
pub fn step_loss_and_grad(
    groups: &[Group],
    policy: &PolicyParams,
    old: &PolicyParams,
    reference: &PolicyParams,
    cfg: &GrpoConfig,
) -> Result<(f64, PolicyParams)> {
    Ok(accumulate(groups, policy, old, reference, cfg)?.finish())
}

/// Same as [`step_loss_and_grad`], computed in `cfg.grad_accum_steps`
/// micro-batches.
pub fn accumulated_loss_and_grad(
    groups: &[Group],
    policy: &PolicyParams,
    old: &PolicyParams,
    reference: &PolicyParams,
    cfg: &GrpoConfig,
) -> Result<(f64, PolicyParams, f64)> {
    let chunk = groups.len().div_ceil(cfg.grad_accum_steps).max(1);
    let mut total = Accumulated::zeros(policy);
    for micro in groups.chunks(chunk) {
        total.merge(&accumulate(micro, policy, old, reference, cfg)?);
    }
    let kl = total.mean_kl();
    let (loss, grad) = total.finish();
    Ok((loss, grad, kl))
}

/// Per-group audit record for one step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupRecord {
    pub step: usize,
    pub instance_id: String,
    pub guided: bool,
    pub success_fraction: f64,
    pub reward_mean: f64,
    pub reward_std: f64,
    pub status: FilterStatus,
    /// Whether the group's terms entered the update.
    pub contributed: bool,
}

#[derive(Clone, Debug)]
pub struct TrainSetup {
    pub grpo: GrpoConfig,
    pub scorer: Scorer,
    pub replay: ReplayConfig,
    pub variant: String,
}

impl TrainSetup {
    pub fn validate(&self) -> Result<()> {
        self.grpo.validate()?;
        self.scorer.reward.validate()?;
        self.replay.validate()
    }
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub params: PolicyParams,
    pub trace: Vec<TraceRow>,
    pub replay_log: Vec<ReplayEvent>,
    pub group_log: Vec<GroupRecord>,
}

/// Everything one step produced.
pub struct StepOutcome {
    pub row: TraceRow,
    pub events: Vec<ReplayEvent>,
    pub records: Vec<GroupRecord>,
    /// The groups that entered the update, replayed ones in place of their
    /// unguided originals.
    pub groups: Vec<Group>,
}

/// One outer step: rollouts, replay, filtering, and `ppo_epochs` updates.
pub fn train_step(
    step: usize,
    dataset: &[Instance],
    params: &mut PolicyParams,
    reference: &PolicyParams,
    setup: &TrainSetup,
) -> Result<StepOutcome> {
    let cfg = &setup.grpo;
    let old = params.snapshot();
    let mut batch_rng = rng_for(&[cfg.seed, step as u64, SALT_BATCH]);
    let picks = sample_indices(&mut batch_rng, dataset.len(), cfg.batch_size.min(dataset.len())).into_vec();
    let batch: Vec<&Instance> = picks.iter().map(|&i| &dataset[i]).collect();
    let group_seed = |inst: &Instance, salt: u64| mix(&[cfg.seed, step as u64, stable_hash(&inst.id), salt]);

    let unguided = batch
        .par_iter()
        .map(|inst| rollout_group(inst, &old, cfg, &setup.scorer, None, group_seed(inst, SALT_UNGUIDED)))
        .collect::<Result<Vec<_>>>()?;

    let tau = cfg.replay_tau;
    let mut groups = unguided.clone();
    let mut events = Vec::new();
    if setup.replay.active(tau) {
        let diagnosis = diagnose(unguided.iter().map(|g| &g.rewards[..]), setup.replay.basis)?;
        let specs: Vec<Option<GuidanceSpec>> = batch
            .iter()
            .zip(&unguided)
            .map(|(inst, g)| decide(&g.rewards, &inst.gold(), &diagnosis, &setup.replay, tau).spec)
            .collect();
        let replayed = batch
            .par_iter()
            .zip(&specs)
            .map(|(inst, spec)| {
                spec.as_ref()
                    .map(|s| replay(inst, s, &old, cfg, &setup.scorer, group_seed(inst, SALT_REPLAY)))
                    .transpose()
            })
            .collect::<Result<Vec<_>>>()?;
        for (slot, (r, spec)) in groups.iter_mut().zip(replayed.into_iter().zip(&specs)) {
            if let (Some(r), Some(spec)) = (r, spec) {
                events.push(ReplayEvent {
                    step,
                    instance_id: r.instance_id.clone(),
                    mean_reward_before: slot.mean_reward(),
                    dims: spec.dims(),
                    mean_reward_after: r.mean_reward(),
                });
                *slot = r;
            }
        }
    }

    let (mut loss, mut kl) = (0.0, 0.0);
    for epoch in 0..cfg.ppo_epochs {
        let (l, grad, k) = accumulated_loss_and_grad(&groups, params, &old, reference, cfg)?;
        if epoch == 0 {
            loss = l;
            kl = k;
        }
        params.axpy(-cfg.learning_rate, &grad);
    }
    if params.iter().any(|w| !w.is_finite()) {
        return Err(Error::config("grpo.learning_rate", "update produced non-finite weights"));
    }

    let entropies = groups
        .par_iter()
        .map(|g| old.entropy(&g.input))
        .collect::<Result<Vec<_>>>()?;
    let all_trajs: Vec<Trajectory> = groups.iter().flat_map(|g| g.trajectories.iter().cloned()).collect();
    let statuses: Vec<FilterStatus> = groups.iter().map(|g| g.filter_status).collect();
    let row = TraceRow {
        step,
        variant: setup.variant.clone(),
        mean_reward_unguided: mean(unguided.iter().map(Group::mean_reward)),
        mean_reward_replayed: mean(events.iter().map(|e| e.mean_reward_after)),
        reward_delta: reward_delta(&events),
        kept_ratio: gradient_contributing_ratio(&statuses),
        entropy: mean(entropies.into_iter()),
        rar: rule_adherence_rate(&all_trajs, &setup.scorer.table)?,
        kl,
        loss,
    };
    let records = groups
        .iter()
        .map(|g| GroupRecord {
            step,
            instance_id: g.instance_id.clone(),
            guided: g.guided,
            success_fraction: g.success_fraction(),
            reward_mean: g.mean_reward(),
            reward_std: g.reward_std(),
            status: g.filter_status,
            contributed: !g.advantages.is_empty(),
        })
        .collect();
    Ok(StepOutcome { row, events, records, groups })
}

/// Runs `max_steps` steps from `init` (zero weights when absent). `on_step`
/// sees the parameters after each step.
pub fn train_with<F>(
    dataset: &[Instance],
    setup: &TrainSetup,
    init: Option<PolicyParams>,
    mut on_step: F,
) -> Result<TrainState>
where
    F: FnMut(usize, &PolicyParams) -> Result<()>,
{
    setup.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyInput("training set is empty"));
    }
    let mut params = init.unwrap_or_else(|| PolicyParams::zeros(crate::world::POLICY_LAYOUT));
    let reference = params.snapshot();
    let mut state = TrainState {
        params: reference.clone(),
        trace: Vec::with_capacity(setup.grpo.max_steps),
        replay_log: Vec::new(),
        group_log: Vec::new(),
    };
    for step in 1..=setup.grpo.max_steps {
        let out = train_step(step, dataset, &mut params, &reference, setup)?;
        state.trace.push(out.row);
        state.replay_log.extend(out.events);
        state.group_log.extend(out.records);
        on_step(step, &params)?;
    }
    state.params = params;
    Ok(state)
}

pub fn train(dataset: &[Instance], setup: &TrainSetup) -> Result<TrainState> {
    train_with(dataset, setup, None, |_, _| Ok(()))
}
