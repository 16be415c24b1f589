//! Line-based `key = value` experiment configs.
//!
//! Keys are dotted with a section prefix (`world.`, `grpo.`, `reward.`,
//! `replay.`, `sampling.`) or bare for top-level fields. `#` starts a comment.
//! Lists are comma-separated. A bare `seed` reseeds every component, so it
//! is written first and per-section seeds after it.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::experiment::{ExperimentConfig, Variant};
use crate::grpo::RatioInput;
use crate::replay::{DiagnosisBasis, GuidanceDim};
use crate::reward::RewardVariant;

type Setter = std::result::Result<(), String>;

fn num<T: FromStr>(v: &str) -> std::result::Result<T, String>
where
    T::Err: Display,
{
    v.parse::<T>().map_err(|e| format!("cannot parse `{v}`: {e}"))
}

fn boolean(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expected true or false, got `{v}`")),
    }
}

fn quad(v: &str) -> std::result::Result<[f64; 4], String> {
    let parts: Vec<f64> = v.split(',').map(|p| num(p.trim())).collect::<std::result::Result<_, _>>()?;
    parts.try_into().map_err(|p: Vec<f64>| format!("expected 4 comma-separated numbers, got {}", p.len()))
}

fn show_quad(q: &[f64; 4]) -> String {
    q.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn dims(v: &str) -> std::result::Result<Vec<GuidanceDim>, String> {
    let out: Vec<GuidanceDim> = v
        .split(',')
        .map(|d| GuidanceDim::parse(d.trim()).ok_or_else(|| format!("unknown guidance dimension `{}`", d.trim())))
        .collect::<std::result::Result<_, _>>()?;
    if out.is_empty() {
        return Err("needs at least one dimension".into());
    }
    Ok(out)
}

fn opt<T>(v: &str, f: impl Fn(&str) -> std::result::Result<T, String>) -> std::result::Result<Option<T>, String> {
    if v.is_empty() {
        Ok(None)
    } else {
        f(v).map(Some)
    }
}

/// Sets one field from its textual value.
pub fn apply(cfg: &mut ExperimentConfig, key: &str, value: &str) -> Result<()> {
    set(cfg, key, value).map_err(|reason| Error::config(key, reason))
}

fn set(c: &mut ExperimentConfig, key: &str, v: &str) -> Setter {
    match key {
        "seed" => *c = c.clone().with_seed(num(v)?),
        "variant" => {
            c.variant = Variant::parse(v).ok_or_else(|| format!("unknown variant `{v}`"))?;
            if !c.reward_variant_explicit {
                c.reward.variant = c.variant.default_reward();
            }
        }
        "output_dir" => c.output_dir = v.to_string(),
        "eval_instances" => c.eval_instances = num(v)?,
        "checkpoint_every" => c.checkpoint_every = num(v)?,
        "rules_path" => c.rules_path = opt(v, |s| Ok(s.to_string()))?,
        "data_path" => c.data_path = opt(v, |s| Ok(s.to_string()))?,

        "world.seed" => c.world.seed = num(v)?,
        "world.n_instances" => c.world.n_instances = num(v)?,
        "world.class_mix" => c.world.class_mix = quad(v)?,
        "world.threshold_frac" => c.world.threshold_frac = num(v)?,
        "world.noise_scale" => c.world.noise_scale = num(v)?,
        "world.tier_targets" => c.world.tier_targets = quad(v)?,
        "world.cut_related" => c.world.cut_related = num(v)?,
        "world.cut_excellent" => c.world.cut_excellent = num(v)?,

        "grpo.group_size" => c.grpo.group_size = num(v)?,
        "grpo.clip_eps" => c.grpo.clip_eps = num(v)?,
        "grpo.kl_beta" => c.grpo.kl_beta = num(v)?,
        "grpo.adv_clip" => c.grpo.adv_clip = num(v)?,
        "grpo.band_low" => c.grpo.band_low = num(v)?,
        "grpo.band_high" => c.grpo.band_high = num(v)?,
        "grpo.replay_tau" => c.grpo.replay_tau = num(v)?,
        "grpo.learning_rate" => c.grpo.learning_rate = num(v)?,
        "grpo.grad_accum_steps" => c.grpo.grad_accum_steps = num(v)?,
        "grpo.batch_size" => c.grpo.batch_size = num(v)?,
        "grpo.max_steps" => c.grpo.max_steps = num(v)?,
        "grpo.ppo_epochs" => c.grpo.ppo_epochs = num(v)?,
        "grpo.temperature" => c.grpo.temperature = num(v)?,
        "grpo.top_k" => c.grpo.top_k = num(v)?,
        "grpo.ratio_input" => {
            c.grpo.ratio_input = match v {
                "generation" => RatioInput::Generation,
                "original" => RatioInput::Original,
                _ => return Err(format!("expected generation or original, got `{v}`")),
            }
        }
        "grpo.value_clip" => c.grpo.value_clip = num(v)?,
        "grpo.seed" => c.grpo.seed = num(v)?,

        "reward.w_cate" => c.reward.w_cate = num(v)?,
        "reward.w_attr" => c.reward.w_attr = num(v)?,
        "reward.w_reason" => c.reward.w_reason = num(v)?,
        "reward.gating_lambda" => c.reward.gating_lambda = num(v)?,
        "reward.reason_mix" => c.reward.reason_mix = num(v)?,
        "reward.variant" => {
            c.reward.variant = RewardVariant::parse(v).ok_or_else(|| format!("unknown reward variant `{v}`"))?;
            c.reward_variant_explicit = true;
        }

        "replay.tau_trigger" => c.replay.tau_trigger = opt(v, num)?,
        "replay.tau_dim" => c.replay.tau_dim = opt(v, num)?,
        "replay.fixed_dims" => c.replay.fixed_dims = opt(v, dims)?,
        "replay.force_trigger" => c.replay.force_trigger = opt(v, boolean)?,
        "replay.basis" => {
            c.replay.basis = opt(v, |s| DiagnosisBasis::parse(s).ok_or_else(|| format!("expected raw or gated, got `{s}`")))?
        }

        "sampling.rollouts" => c.sampling.sampling.rollouts = num(v)?,
        "sampling.band_low" => c.sampling.sampling.band_low = num(v)?,
        "sampling.band_high" => c.sampling.sampling.band_high = num(v)?,
        "sampling.temperature" => c.sampling.sampling.temperature = num(v)?,
        "sampling.top_k" => c.sampling.sampling.top_k = num(v)?,
        "sampling.probe_seed" => c.sampling.sampling.seed = num(v)?,
        "sampling.targets" => c.sampling.targets = quad(v)?,
        "sampling.annotation_noise" => c.sampling.annotation_noise = num(v)?,
        "sampling.probe_scale" => c.sampling.probe_scale = num(v)?,
        "sampling.seed" => c.sampling.seed = num(v)?,

        _ => return Err("unknown key".into()),
    }
    Ok(())
}

/// Every key with its current value, in the canonical order.
pub fn entries(c: &ExperimentConfig) -> Vec<(&'static str, String)> {
    let mut e: Vec<(&'static str, String)> = vec![
        ("seed", c.seed.to_string()),
        ("variant", c.variant.as_str().into()),
        ("output_dir", c.output_dir.clone()),
        ("eval_instances", c.eval_instances.to_string()),
        ("checkpoint_every", c.checkpoint_every.to_string()),
    ];
    if let Some(p) = &c.rules_path {
        e.push(("rules_path", p.clone()));
    }
    if let Some(p) = &c.data_path {
        e.push(("data_path", p.clone()));
    }
    let w = &c.world;
    e.extend([
        ("world.seed", w.seed.to_string()),
        ("world.n_instances", w.n_instances.to_string()),
        ("world.class_mix", show_quad(&w.class_mix)),
        ("world.threshold_frac", w.threshold_frac.to_string()),
        ("world.noise_scale", w.noise_scale.to_string()),
        ("world.tier_targets", show_quad(&w.tier_targets)),
        ("world.cut_related", w.cut_related.to_string()),
        ("world.cut_excellent", w.cut_excellent.to_string()),
    ]);
    let g = &c.grpo;
    e.extend([
        ("grpo.group_size", g.group_size.to_string()),
        ("grpo.clip_eps", g.clip_eps.to_string()),
        ("grpo.kl_beta", g.kl_beta.to_string()),
        ("grpo.adv_clip", g.adv_clip.to_string()),
        ("grpo.band_low", g.band_low.to_string()),
        ("grpo.band_high", g.band_high.to_string()),
        ("grpo.replay_tau", g.replay_tau.to_string()),
        ("grpo.learning_rate", g.learning_rate.to_string()),
        ("grpo.grad_accum_steps", g.grad_accum_steps.to_string()),
        ("grpo.batch_size", g.batch_size.to_string()),
        ("grpo.max_steps", g.max_steps.to_string()),
        ("grpo.ppo_epochs", g.ppo_epochs.to_string()),
        ("grpo.temperature", g.temperature.to_string()),
        ("grpo.top_k", g.top_k.to_string()),
        (
            "grpo.ratio_input",
            match g.ratio_input {
                RatioInput::Generation => "generation",
                RatioInput::Original => "original",
            }
            .into(),
        ),
        ("grpo.value_clip", g.value_clip.to_string()),
        ("grpo.seed", g.seed.to_string()),
    ]);
    let r = &c.reward;
    e.extend([
        ("reward.w_cate", r.w_cate.to_string()),
        ("reward.w_attr", r.w_attr.to_string()),
        ("reward.w_reason", r.w_reason.to_string()),
        ("reward.gating_lambda", r.gating_lambda.to_string()),
        ("reward.reason_mix", r.reason_mix.to_string()),
    ]);
    if c.reward_variant_explicit {
        e.push(("reward.variant", r.variant.as_str().into()));
    }
    let o = &c.replay;
    if let Some(t) = o.tau_trigger {
        e.push(("replay.tau_trigger", t.to_string()));
    }
    if let Some(t) = o.tau_dim {
        e.push(("replay.tau_dim", t.to_string()));
    }
    if let Some(d) = &o.fixed_dims {
        e.push(("replay.fixed_dims", d.iter().map(|d| d.name()).collect::<Vec<_>>().join(",")));
    }
    if let Some(f) = o.force_trigger {
        e.push(("replay.force_trigger", f.to_string()));
    }
    if let Some(b) = o.basis {
        e.push(("replay.basis", b.name().into()));
    }
    let s = &c.sampling;
    e.extend([
        ("sampling.rollouts", s.sampling.rollouts.to_string()),
        ("sampling.band_low", s.sampling.band_low.to_string()),
        ("sampling.band_high", s.sampling.band_high.to_string()),
        ("sampling.temperature", s.sampling.temperature.to_string()),
        ("sampling.top_k", s.sampling.top_k.to_string()),
        ("sampling.probe_seed", s.sampling.seed.to_string()),
        ("sampling.targets", show_quad(&s.targets)),
        ("sampling.annotation_noise", s.annotation_noise.to_string()),
        ("sampling.probe_scale", s.probe_scale.to_string()),
        ("sampling.seed", s.seed.to_string()),
    ]);
    e
}

pub fn to_text(c: &ExperimentConfig) -> String {
    entries(c).into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

/// Parses a config text over the defaults. Duplicate keys are rejected.
pub fn parse(text: &str) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    let mut seen = std::collections::HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let at = |field: &str, reason: String| Error::InvalidConfig {
            field: field.to_string(),
            line: Some(line_no),
            reason,
        };
        let Some((k, v)) = line.split_once('=') else {
            return Err(at(line, "expected `key = value`".into()));
        };
        let (k, v) = (k.trim(), v.trim());
        if !seen.insert(k.to_string()) {
            return Err(at(k, "duplicate key".into()));
        }
        set(&mut cfg, k, v).map_err(|reason| at(k, reason))?;
    }
    Ok(cfg)
}

pub fn load(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse(&text)
}
