//! The global TOML configuration.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::envkit::{EnvConfig, ScriptedPolicy, Tier};
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::il::IlConfig;
use crate::rl::RlConfig;
use crate::rollout::CostModel;
use crate::router::Architecture;

/// The bundled reference configuration (desk-scale benchmark).
pub const REFERENCE_TOML: &str = include_str!("../configs/reference.toml");

/// Keys that are valid but absent from the serialized defaults because
/// their default is unset.
const OPTIONAL_KEYS: &[&str] = &["env.critical_count", "env.phase_buckets"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed for every stochastic stage except evaluation.
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig { seed: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoliciesConfig {
    pub device: ScriptedPolicy,
    pub cloud: ScriptedPolicy,
}

impl Default for PoliciesConfig {
    fn default() -> Self {
        PoliciesConfig {
            device: ScriptedPolicy::device_default(),
            cloud: ScriptedPolicy::cloud_default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouterKind {
    Linear,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RouterConfig {
    pub kind: RouterKind,
    /// Hidden width (mlp only).
    pub hidden: usize,
    /// Output-layer multiplier (mlp only).
    pub output_scale: f64,
    pub init_seed: u64,
}

impl Default for RouterConfig {
    fn default() -> Self {
        RouterConfig {
            kind: RouterKind::Mlp,
            hidden: 32,
            output_scale: 6.0,
            init_seed: 7,
        }
    }
}

impl RouterConfig {
    pub fn architecture(&self, inputs: usize) -> Architecture {
        match self.kind {
            RouterKind::Linear => Architecture::Linear { inputs },
            RouterKind::Mlp => Architecture::Mlp {
                inputs,
                hidden: self.hidden,
                output_scale: self.output_scale,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub run: RunConfig,
    pub env: EnvConfig,
    pub policies: PoliciesConfig,
    pub router: RouterConfig,
    pub il: IlConfig,
    pub rl: RlConfig,
    pub cost_model: CostModel,
    pub eval: EvalConfig,
}

fn collect_unknown(user: &toml::Value, known: &toml::Value, prefix: &str, out: &mut Vec<String>) {
    let (Some(u), Some(k)) = (user.as_table(), known.as_table()) else {
        return;
    };
    for (key, v) in u {
        let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
        match k.get(key) {
            Some(kv) => collect_unknown(v, kv, &path, out),
            None if OPTIONAL_KEYS.contains(&path.as_str()) => {}
            None => out.push(path),
        }
    }
}

// Overlays `user` onto `base`, table by table, so partially specified nested
// sections keep the defaults of the section they sit in.
fn merge(base: &mut toml::Value, user: &toml::Value) {
    match (base.as_table_mut(), user.as_table()) {
        (Some(b), Some(u)) => {
            for (k, v) in u {
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        _ => *base = user.clone(),
    }
}

impl Config {
    pub fn reference() -> Config {
        Config::default()
    }

    pub fn from_toml_str(text: &str) -> Result<Config> {
        let user: toml::Value = toml::from_str(text)
            .map_err(|e| Error::Config(format!("config is not valid TOML: {e}")))?;
        let known = toml::Value::try_from(Config::default())
            .map_err(|e| Error::Config(format!("default config does not serialize: {e}")))?;
        let mut unknown = Vec::new();
        collect_unknown(&user, &known, "", &mut unknown);
        if !unknown.is_empty() {
            return Err(Error::Config(format!("unknown config keys: {}", unknown.join(", "))));
        }
        let mut merged = known;
        merge(&mut merged, &user);
        let mut cfg: Config = merged
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        // `critical_steps` defaults to a fixed set; a file that only names a
        // count asks for random critical sets instead.
        let env = user.get("env");
        if env.and_then(|e| e.get("critical_count")).is_some()
            && env.and_then(|e| e.get("critical_steps")).is_none()
        {
            cfg.env.critical_steps = None;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Config::from_toml_str(&text)
    }

    /// The effective configuration with every default materialized.
    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("config does not serialize: {e}")))
    }

    pub fn hash(&self) -> Result<[u8; 32]> {
        Ok(crate::store::config_hash(&self.to_toml_string()?))
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.policies.device.validate()?;
        self.policies.cloud.validate()?;
        if self.policies.device.tier != Tier::Device || self.policies.cloud.tier != Tier::Cloud {
            return Err(Error::Config("policies.device/cloud must carry tiers device/cloud".into()));
        }
        if self.policies.device.p_critical_correct >= self.policies.cloud.p_critical_correct {
            return Err(Error::Config(
                "device p_critical_correct must be below the cloud's".into(),
            ));
        }
        self.architecture().validate()?;
        self.il.validate()?;
        self.rl.validate()?;
        self.cost_model.validate()?;
        self.eval.validate()?;
        let m = self.env.routine_alternatives;
        for p in [&self.policies.device, &self.policies.cloud] {
            if p.preferred_alternative >= m && m > 1 {
                return Err(Error::Config(format!(
                    "{:?} preferred_alternative {} must be below env.routine_alternatives {m}",
                    p.tier, p.preferred_alternative
                )));
            }
        }
        // TOML integers are signed 64-bit.
        let all_seeds = [self.run.seed, self.router.init_seed, self.env.train_seed, self.env.eval_seed];
        if let Some(s) = all_seeds.iter().chain(&self.eval.seeds).find(|s| **s > i64::MAX as u64) {
            return Err(Error::Config(format!("seed {s} exceeds {}", i64::MAX)));
        }
        let seeds: BTreeSet<u64> = self.eval.seeds.iter().copied().collect();
        if seeds.len() != self.eval.seeds.len() {
            return Err(Error::Config("eval.seeds contains duplicates".into()));
        }
        Ok(())
    }

    pub fn architecture(&self) -> Architecture {
        self.router.architecture(self.env.feature_len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_reference_equals_defaults() {
        assert_eq!(Config::from_toml_str(REFERENCE_TOML).unwrap(), Config::default());
    }

    #[test]
    fn effective_config_round_trips() {
        let cfg = Config::from_toml_str("[run]\nseed = 9\n[rl]\ngamma = 2.0\n").unwrap();
        let text = cfg.to_toml_string().unwrap();
        let again = Config::from_toml_str(&text).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.to_toml_string().unwrap(), text);
        assert_eq!(cfg.rl.gamma, 2.0);
        assert_eq!(cfg.rl.group_size, 8);
    }

    #[test]
    fn paper_defaults() {
        let c = Config::default();
        assert_eq!(c.rl.group_size, 8);
        assert_eq!(c.il.delta, 0.5);
        assert_eq!(c.rl.gamma, 1.3);
        assert_eq!(c.rl.epsilon, 0.05);
        assert_eq!(c.rl.beta, 0.1);
        assert_eq!(c.il.opt.lr, 4e-5);
        assert_eq!(c.rl.opt.lr, 1e-5);
        assert_eq!(c.il.opt.batch_size, 64);
        assert_eq!(c.rl.opt.batch_size, 256);
        assert_eq!(c.cost_model.router_latency_per_step, 0.061);
    }

    #[test]
    fn unknown_keys_are_all_listed() {
        let err = Config::from_toml_str("[rl]\ngama = 1.0\n[env]\nhorizn = 3\n[typo]\nx = 1\n").unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Config(_)));
        for k in ["rl.gama", "env.horizn", "typo"] {
            assert!(msg.contains(k), "{msg} misses {k}");
        }
    }

    #[test]
    fn partial_nested_sections_keep_their_defaults() {
        let cfg = Config::from_toml_str("[il.opt]\nsteps = 10\n[rl.opt]\nsteps = 5\n").unwrap();
        assert_eq!(cfg.il.opt.steps, 10);
        assert_eq!(cfg.il.opt.lr, 4e-5);
        assert_eq!(cfg.rl.opt.steps, 5);
        assert_eq!(cfg.rl.opt.lr, 1e-5);
        assert_eq!(cfg.rl.opt.batch_size, 256);
    }

    #[test]
    fn seeds_must_fit_in_toml_integers() {
        let mut cfg = Config::default();
        cfg.run.seed = u64::MAX;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn critical_count_alone_switches_to_random_sets() {
        let cfg = Config::from_toml_str("[env]\ncritical_count = 2\n").unwrap();
        assert_eq!(cfg.env.critical_steps, None);
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(Config::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn invalid_values_are_config_errors() {
        assert!(matches!(
            Config::from_toml_str("[rl]\ngamma = 0.0\n"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            Config::from_toml_str("[env]\ncritical_steps = [13]\n"),
            Err(Error::Config(_))
        ));
    }
}
