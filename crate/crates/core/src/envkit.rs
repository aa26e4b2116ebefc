//! Synthetic long-horizon task families and scripted device/cloud policies.
//!
//! A task is a chain of `horizon` sub-goals. At each sub-goal the agent picks
//! one of `action_count` discrete actions; an acceptable action advances the
//! progress counter. A handful of sub-goals are *critical*: they admit a single
//! correct action and, in binary mode, a wrong choice there is an absorbing
//! failure. Routine sub-goals may admit several equally acceptable actions, so
//! two competent policies can disagree on a step without either being wrong.
//!
//! Everything here is a pure function of its inputs; randomness enters only
//! through explicit RNG arguments.

use std::collections::BTreeSet;
use std::fmt;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{self, mix64, unit};

const SALT_CORRECT: u64 = 0x636f_7272_6563_7421;
const SALT_MARKER: u64 = 0x6d61_726b_6572_2121;
const SALT_DESC_A: u64 = 0x6465_7363_2d61_2d31;
const SALT_DESC_B: u64 = 0x6465_7363_2d62_2d32;

/// Inclusive integer range used for the scripted reasoning-length draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LengthRange {
    pub min: u32,
    pub max: u32,
}

/// Per-step reasoning-length model: routine and critical steps draw from
/// different ranges.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LengthModel {
    pub routine: LengthRange,
    pub critical: LengthRange,
}

impl Default for LengthModel {
    fn default() -> Self {
        LengthModel {
            routine: LengthRange { min: 20, max: 60 },
            critical: LengthRange { min: 45, max: 110 },
        }
    }
}

/// Environment section of the global configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub horizon: usize,
    pub action_count: usize,
    /// Fixed critical sub-goal indices (1-based). Takes precedence over
    /// `critical_count`.
    pub critical_steps: Option<Vec<usize>>,
    /// Number of critical sub-goals drawn per task when `critical_steps` is unset.
    pub critical_count: Option<usize>,
    pub marker_observability: f64,
    pub partial_credit: bool,
    /// Number of equally acceptable actions at routine sub-goals.
    pub routine_alternatives: usize,
    /// Width of the phase encoding; `None` means one bucket per sub-goal.
    pub phase_buckets: Option<usize>,
    pub lengths: LengthModel,
    pub train_tasks: usize,
    pub eval_tasks: usize,
    pub train_seed: u64,
    pub eval_seed: u64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            horizon: 12,
            action_count: 5,
            critical_steps: Some(vec![3, 7, 10]),
            critical_count: None,
            marker_observability: 0.9,
            partial_credit: false,
            routine_alternatives: 2,
            phase_buckets: None,
            lengths: LengthModel::default(),
            train_tasks: 200,
            eval_tasks: 100,
            train_seed: 11,
            eval_seed: 23,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::Config("env.horizon must be at least 1".into()));
        }
        if self.action_count < 2 {
            return Err(Error::Config("env.action_count must be at least 2".into()));
        }
        if !(0.0..=1.0).contains(&self.marker_observability) {
            return Err(Error::Config(
                "env.marker_observability must lie in [0, 1]".into(),
            ));
        }
        if self.routine_alternatives == 0 || self.routine_alternatives >= self.action_count {
            return Err(Error::Config(format!(
                "env.routine_alternatives must lie in [1, {}]",
                self.action_count - 1
            )));
        }
        match (&self.critical_steps, self.critical_count) {
            (Some(steps), _) => {
                let set: BTreeSet<usize> = steps.iter().copied().collect();
                if set.len() != steps.len() {
                    return Err(Error::Config("env.critical_steps contains duplicates".into()));
                }
                if set.is_empty() || set.len() > self.horizon {
                    return Err(Error::Config(format!(
                        "env.critical_steps must hold between 1 and {} entries",
                        self.horizon
                    )));
                }
                if let Some(bad) = set.iter().find(|&&s| s == 0 || s > self.horizon) {
                    return Err(Error::Config(format!(
                        "env.critical_steps entry {bad} is outside [1, {}]",
                        self.horizon
                    )));
                }
            }
            (None, Some(k)) => {
                if k == 0 || k > self.horizon {
                    return Err(Error::Config(format!(
                        "env.critical_count {k} must lie in [1, {}]",
                        self.horizon
                    )));
                }
            }
            (None, None) => {
                return Err(Error::Config(
                    "env needs either critical_steps or critical_count".into(),
                ))
            }
        }
        if let Some(b) = self.phase_buckets {
            if b == 0 {
                return Err(Error::Config("env.phase_buckets must be at least 1".into()));
            }
        }
        for (name, r) in [
            ("routine", self.lengths.routine),
            ("critical", self.lengths.critical),
        ] {
            if r.min > r.max {
                return Err(Error::Config(format!(
                    "env.lengths.{name}: min exceeds max"
                )));
            }
        }
        if self.train_tasks == 0 || self.eval_tasks == 0 {
            return Err(Error::Config("env task counts must be at least 1".into()));
        }
        Ok(())
    }

    pub fn phase_buckets(&self) -> usize {
        self.phase_buckets.unwrap_or(self.horizon)
    }

    /// Length of the state feature vector under this configuration.
    pub fn feature_len(&self) -> usize {
        self.phase_buckets() + DESCRIPTOR_LEN
    }
}

/// marker, progress fraction, critical density, two task descriptors
const DESCRIPTOR_LEN: usize = 5;

/// Generative description of one task instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    pub horizon: usize,
    pub action_count: usize,
    pub critical_steps: BTreeSet<usize>,
    pub marker_observability: f64,
    pub partial_credit: bool,
    pub routine_alternatives: usize,
    pub phase_buckets: usize,
    pub lengths: LengthModel,
    pub seed: u64,
}

impl TaskSpec {
    pub fn is_critical(&self, stage: usize) -> bool {
        self.critical_steps.contains(&stage)
    }

    /// The canonical correct action at a 1-based sub-goal.
    pub fn correct_action(&self, stage: usize) -> usize {
        (mix64(self.seed ^ SALT_CORRECT ^ mix64(stage as u64)) % self.action_count as u64) as usize
    }

    /// Acceptable actions at a sub-goal, canonical action first.
    pub fn acceptable_actions(&self, stage: usize) -> Vec<usize> {
        let c = self.correct_action(stage);
        let m = if self.is_critical(stage) {
            1
        } else {
            self.routine_alternatives
        };
        (0..m).map(|j| (c + j) % self.action_count).collect()
    }

    /// Unacceptable actions in increasing offset from the canonical action.
    pub fn wrong_actions(&self, stage: usize) -> Vec<usize> {
        let c = self.correct_action(stage);
        let m = self.acceptable_actions(stage).len();
        (m..self.action_count)
            .map(|j| (c + j) % self.action_count)
            .collect()
    }

    /// Whether the critical marker is visible at this sub-goal. The noise is
    /// quenched per (task, sub-goal), so the same semantic state always
    /// yields the same features.
    pub fn marker_visible(&self, stage: usize) -> bool {
        self.is_critical(stage)
            && unit(mix64(self.seed ^ SALT_MARKER ^ mix64(stage as u64))) < self.marker_observability
    }

    fn descriptors(&self) -> [f64; 2] {
        [
            2.0 * unit(mix64(self.seed ^ SALT_DESC_A)) - 1.0,
            2.0 * unit(mix64(self.seed ^ SALT_DESC_B)) - 1.0,
        ]
    }

    pub fn feature_len(&self) -> usize {
        self.phase_buckets + DESCRIPTOR_LEN
    }

    /// Features of the state sitting at `progress`.
    pub fn features_at(&self, progress: usize) -> Vec<f64> {
        let mut f = vec![0.0; self.feature_len()];
        let stage = progress + 1;
        let phase = (progress.min(self.horizon - 1) * self.phase_buckets) / self.horizon;
        f[phase] = 1.0;
        let b = self.phase_buckets;
        f[b] = if self.marker_visible(stage) { 1.0 } else { 0.0 };
        f[b + 1] = progress as f64 / self.horizon as f64;
        f[b + 2] = self.critical_steps.len() as f64 / self.horizon as f64;
        let [d1, d2] = self.descriptors();
        f[b + 3] = d1;
        f[b + 4] = d2;
        f
    }

    pub fn key_at(&self, progress: usize) -> CanonicalKey {
        CanonicalKey(format!("{}|{}", self.task_id, progress))
    }

    /// Trajectory return for a terminal state.
    pub fn return_of(&self, state: &State) -> f64 {
        if self.partial_credit {
            state.progress as f64 / self.horizon as f64
        } else if state.progress == self.horizon {
            1.0
        } else {
            0.0
        }
    }
}

/// Identity of a semantic state: task id plus the environment observation,
/// independent of how many steps were spent reaching it.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CanonicalKey(pub String);

impl CanonicalKey {
    /// Recover `(task_id, progress)` from a key.
    pub fn decode(&self) -> Result<(&str, usize)> {
        let (task, progress) = self
            .0
            .rsplit_once('|')
            .ok_or_else(|| Error::Data(format!("malformed canonical key {:?}", self.0)))?;
        let progress = progress
            .parse()
            .map_err(|_| Error::Data(format!("malformed canonical key {:?}", self.0)))?;
        Ok((task, progress))
    }
}

impl fmt::Display for CanonicalKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct State {
    /// 1-based step counter; `horizon + 1` once the budget is spent.
    pub step_index: usize,
    pub progress: usize,
    pub failed: bool,
    pub features: Vec<f64>,
    pub key: CanonicalKey,
}

impl State {
    pub fn is_terminal(&self, task: &TaskSpec) -> bool {
        self.failed || self.progress >= task.horizon || self.step_index > task.horizon
    }

    /// 1-based sub-goal the agent is working on.
    pub fn stage(&self) -> usize {
        self.progress + 1
    }

    /// Rebuild a non-failed state from its key and step counter.
    pub fn from_key(task: &TaskSpec, key: &CanonicalKey, step_index: usize) -> Result<State> {
        let (task_id, progress) = key.decode()?;
        if task_id != task.task_id {
            return Err(Error::Data(format!(
                "state key {key} does not belong to task {}",
                task.task_id
            )));
        }
        if progress > task.horizon {
            return Err(Error::Data(format!("state key {key} exceeds the horizon")));
        }
        Ok(State {
            step_index,
            progress,
            failed: false,
            features: task.features_at(progress),
            key: key.clone(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    Device,
    Cloud,
}

/// A scripted stochastic policy with analytic per-step action distributions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptedPolicy {
    pub tier: Tier,
    /// Probability mass on acceptable actions at routine sub-goals.
    pub p_routine_correct: f64,
    /// Probability of the single correct action at critical sub-goals.
    pub p_critical_correct: f64,
    /// Geometric decay of the residual mass over wrong actions; 1 is uniform.
    pub spread: f64,
    /// Which acceptable alternative this policy favours at routine sub-goals.
    #[serde(default)]
    pub preferred_alternative: usize,
    /// Share of the acceptable mass placed on the favoured alternative.
    #[serde(default = "default_focus")]
    pub alternative_focus: f64,
}

fn default_focus() -> f64 {
    1.0
}

impl ScriptedPolicy {
    pub fn device_default() -> Self {
        ScriptedPolicy {
            tier: Tier::Device,
            p_routine_correct: 0.98,
            p_critical_correct: 0.2,
            spread: 0.5,
            preferred_alternative: 0,
            alternative_focus: 0.75,
        }
    }

    pub fn cloud_default() -> Self {
        ScriptedPolicy {
            tier: Tier::Cloud,
            p_routine_correct: 0.98,
            p_critical_correct: 0.98,
            spread: 0.5,
            preferred_alternative: 1,
            alternative_focus: 0.75,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("p_routine_correct", self.p_routine_correct),
            ("p_critical_correct", self.p_critical_correct),
            ("alternative_focus", self.alternative_focus),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!(
                    "{:?} policy: {name} must lie in [0, 1]",
                    self.tier
                )));
            }
        }
        if !(self.spread > 0.0 && self.spread.is_finite()) {
            return Err(Error::Config(format!(
                "{:?} policy: spread must be positive",
                self.tier
            )));
        }
        Ok(())
    }

    /// Weights over the acceptable alternatives (sum to 1).
    fn alternative_weights(&self, m: usize) -> Vec<f64> {
        if m == 1 {
            return vec![1.0];
        }
        let pref = self.preferred_alternative % m;
        let rest = (1.0 - self.alternative_focus) / (m - 1) as f64;
        (0..m)
            .map(|j| if j == pref { self.alternative_focus } else { rest })
            .collect()
    }

    /// Normalized geometric weights over `n` wrong actions.
    fn residual_weights(&self, n: usize) -> Vec<f64> {
        let raw: Vec<f64> = (0..n).map(|k| self.spread.powi(k as i32)).collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|w| w / total).collect()
    }
}

/// A probability distribution over the discrete action space.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionDist(Vec<f64>);

impl ActionDist {
    pub fn new(probabilities: Vec<f64>) -> Result<Self> {
        if probabilities.is_empty() {
            return Err(Error::Usage("empty action distribution".into()));
        }
        if probabilities.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
            return Err(Error::Usage("action distribution has a negative entry".into()));
        }
        let sum: f64 = probabilities.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Usage(format!(
                "action distribution sums to {sum}, not 1"
            )));
        }
        Ok(ActionDist(probabilities))
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Most likely action; ties go to the lowest index.
    pub fn greedy(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.0.iter().enumerate() {
            if p > self.0[best] {
                best = i;
            }
        }
        best
    }

    /// Inverse-CDF sample with a single uniform draw.
    pub fn sample(&self, rng: &mut seed::Rng) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, &p) in self.0.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        // u landed in the rounding slack above the final partial sum
        self.0.iter().rposition(|&p| p > 0.0).unwrap_or(0)
    }
}

/// Build `count` tasks deterministically from `seed`.
pub fn make_task_set(config: &EnvConfig, count: usize, seed: u64) -> Result<Vec<TaskSpec>> {
    if count == 0 {
        return Err(Error::Config("task set size must be at least 1".into()));
    }
    config.validate()?;
    (0..count)
        .map(|i| {
            let task_seed = seed::sub_seed(seed, &["task".into(), i.into()]);
            let critical_steps = match (&config.critical_steps, config.critical_count) {
                (Some(steps), _) => steps.iter().copied().collect(),
                (None, Some(k)) => {
                    let mut rng = seed::stream(task_seed, &["critical".into()]);
                    let mut stages: Vec<usize> = (1..=config.horizon).collect();
                    for j in 0..k {
                        let pick = rng.random_range(j..stages.len());
                        stages.swap(j, pick);
                    }
                    stages[..k].iter().copied().collect()
                }
                (None, None) => unreachable!("validated above"),
            };
            Ok(TaskSpec {
                task_id: format!("s{seed}-{i:05}"),
                horizon: config.horizon,
                action_count: config.action_count,
                critical_steps,
                marker_observability: config.marker_observability,
                partial_credit: config.partial_credit,
                routine_alternatives: config.routine_alternatives,
                phase_buckets: config.phase_buckets(),
                lengths: config.lengths,
                seed: task_seed,
            })
        })
        .collect()
}

pub fn initial_state(task: &TaskSpec) -> State {
    State {
        step_index: 1,
        progress: 0,
        failed: false,
        features: task.features_at(0),
        key: task.key_at(0),
    }
}

/// Analytic action distribution of `policy` at `state`.
pub fn policy_dist(policy: &ScriptedPolicy, state: &State, task: &TaskSpec) -> Result<ActionDist> {
    if state.is_terminal(task) {
        return Err(Error::Usage(format!(
            "policy queried at terminal state {}",
            state.key
        )));
    }
    let stage = state.stage();
    let critical = task.is_critical(stage);
    let acceptable = task.acceptable_actions(stage);
    let wrong = task.wrong_actions(stage);
    let p_ok = if critical {
        policy.p_critical_correct
    } else {
        policy.p_routine_correct
    };
    let mut probs = vec![0.0; task.action_count];
    for (a, w) in acceptable
        .iter()
        .zip(policy.alternative_weights(acceptable.len()))
    {
        probs[*a] = p_ok * w;
    }
    for (a, w) in wrong.iter().zip(policy.residual_weights(wrong.len())) {
        probs[*a] = (1.0 - p_ok) * w;
    }
    ActionDist::new(probs)
}

/// Advance the environment by one action. Reward is zero except on the
/// transition into a terminal state, where it equals the trajectory return.
pub fn step(state: &State, task: &TaskSpec, action: usize) -> Result<(State, f64)> {
    if state.is_terminal(task) {
        return Err(Error::Usage(format!("step called on terminal state {}", state.key)));
    }
    if action >= task.action_count {
        return Err(Error::Usage(format!(
            "action {action} outside [0, {})",
            task.action_count
        )));
    }
    let stage = state.stage();
    let ok = task.acceptable_actions(stage).contains(&action);
    let mut next = State {
        step_index: state.step_index + 1,
        progress: state.progress,
        failed: false,
        features: Vec::new(),
        key: state.key.clone(),
    };
    if ok {
        next.progress += 1;
    } else if task.is_critical(stage) && !task.partial_credit {
        next.failed = true;
    }
    next.features = task.features_at(next.progress.min(task.horizon));
    next.key = task.key_at(next.progress);
    let reward = if next.is_terminal(task) {
        task.return_of(&next)
    } else {
        0.0
    };
    Ok((next, reward))
}

/// Shannon entropy in nats with `0 log 0 = 0`.
pub fn entropy(dist: &ActionDist) -> f64 {
    -dist
        .probabilities()
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>()
}

/// Draw the scripted reasoning length for a step at `stage`.
pub fn reasoning_length(task: &TaskSpec, stage: usize, rng: &mut seed::Rng) -> u32 {
    let r = if task.is_critical(stage) {
        task.lengths.critical
    } else {
        task.lengths.routine
    };
    rng.random_range(r.min..=r.max)
}

#[cfg(test)]
mod tests {
    use super::*;

    macro_rules! assert_close {
        ($a:expr, $b:expr, $tol:expr) => {{
            let (a, b): (f64, f64) = ($a, $b);
            assert!((a - b).abs() <= $tol, "{a} != {b} (tol {})", $tol);
        }};
    }

    fn cfg(t: usize, crit: &[usize], a: usize) -> EnvConfig {
        EnvConfig {
            horizon: t,
            action_count: a,
            critical_steps: Some(crit.to_vec()),
            routine_alternatives: 1,
            ..EnvConfig::default()
        }
    }

    fn policy(p_routine: f64, p_crit: f64, spread: f64) -> ScriptedPolicy {
        ScriptedPolicy {
            tier: Tier::Device,
            p_routine_correct: p_routine,
            p_critical_correct: p_crit,
            spread,
            preferred_alternative: 0,
            alternative_focus: 1.0,
        }
    }

    #[test]
    fn task_set_echoes_config() {
        let tasks = make_task_set(&cfg(10, &[3, 7], 4), 2, 1).unwrap();
        assert_eq!(tasks.len(), 2);
        for t in &tasks {
            assert_eq!(t.horizon, 10);
            assert_eq!(t.action_count, 4);
            assert_eq!(t.critical_steps, BTreeSet::from([3, 7]));
        }
        assert_ne!(tasks[0].task_id, tasks[1].task_id);
        assert_eq!(tasks, make_task_set(&cfg(10, &[3, 7], 4), 2, 1).unwrap());
    }

    #[test]
    fn task_set_rejects_bad_config() {
        assert!(matches!(
            make_task_set(&cfg(10, &[3, 7], 4), 0, 1),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            make_task_set(&cfg(3, &[1, 2, 5], 4), 1, 1),
            Err(Error::Config(_))
        ));
        let mut c = cfg(3, &[1], 4);
        c.critical_steps = None;
        c.critical_count = Some(4);
        assert!(matches!(make_task_set(&c, 1, 1), Err(Error::Config(_))));
        assert!(matches!(
            make_task_set(&cfg(3, &[1], 1), 1, 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn random_critical_sets_have_requested_size() {
        let mut c = cfg(12, &[1], 5);
        c.critical_steps = None;
        c.critical_count = Some(4);
        for t in make_task_set(&c, 50, 9).unwrap() {
            assert_eq!(t.critical_steps.len(), 4);
            assert!(t.critical_steps.iter().all(|&s| (1..=12).contains(&s)));
        }
    }

    #[test]
    fn initial_state_is_stable() {
        let tasks = make_task_set(&cfg(10, &[3, 7], 4), 2, 1).unwrap();
        let s = initial_state(&tasks[0]);
        assert_eq!((s.step_index, s.progress, s.failed), (1, 0, false));
        assert_eq!(s.key, initial_state(&tasks[0]).key);
        let keys: BTreeSet<_> = tasks.iter().map(|t| initial_state(t).key).collect();
        assert_eq!(keys.len(), tasks.len());
    }

    #[test]
    fn routine_distribution_bookkeeping() {
        let task = &make_task_set(&cfg(10, &[3, 7], 4), 1, 1).unwrap()[0];
        let s = initial_state(task);
        let d = policy_dist(&policy(0.95, 0.2, 1.0), &s, task).unwrap();
        let c = task.correct_action(1);
        for (a, &p) in d.probabilities().iter().enumerate() {
            if a == c {
                assert_close!(p, 0.95, 1e-12);
            } else {
                assert_close!(p, 0.05 / 3.0, 1e-12);
            }
        }
    }

    #[test]
    fn one_hot_when_always_correct() {
        let task = &make_task_set(&cfg(10, &[3, 7], 4), 1, 1).unwrap()[0];
        let d = policy_dist(&policy(1.0, 1.0, 0.5), &initial_state(task), task).unwrap();
        assert_eq!(d.probabilities().iter().filter(|&&p| p == 1.0).count(), 1);
        assert_eq!(entropy(&d), 0.0);
    }

    #[test]
    fn critical_residual_follows_spread() {
        let task = &make_task_set(&cfg(6, &[1], 5), 1, 4).unwrap()[0];
        let pol = ScriptedPolicy {
            tier: Tier::Cloud,
            ..policy(0.9, 0.98, 0.5)
        };
        let d = policy_dist(&pol, &initial_state(task), task).unwrap();
        let sum: f64 = d.probabilities().iter().sum();
        assert_close!(sum, 1.0, 1e-12);
        // 0.02 split as 8:4:2:1 over the four wrong actions
        let expected = [8.0, 4.0, 2.0, 1.0].map(|w| 0.02 * w / 15.0);
        for (a, e) in task.wrong_actions(1).into_iter().zip(expected) {
            assert_close!(d.probabilities()[a], e, 1e-15);
        }
        assert_close!(d.probabilities()[task.correct_action(1)], 0.98, 1e-15);
    }

    #[test]
    fn terminal_state_rejects_queries() {
        let task = &make_task_set(&cfg(2, &[1], 3), 1, 1).unwrap()[0];
        let s = initial_state(task);
        let wrong = task.wrong_actions(1)[0];
        let (dead, r) = step(&s, task, wrong).unwrap();
        assert!(dead.failed);
        assert_eq!(r, 0.0);
        assert!(matches!(
            policy_dist(&policy(1.0, 1.0, 1.0), &dead, task),
            Err(Error::Usage(_))
        ));
        assert!(matches!(step(&dead, task, 0), Err(Error::Usage(_))));
    }

    #[test]
    fn step_transitions() {
        let task = &make_task_set(&cfg(10, &[3, 7], 4), 1, 1).unwrap()[0];
        let s = initial_state(task);
        let (n, r) = step(&s, task, task.correct_action(1)).unwrap();
        assert_eq!((n.step_index, n.progress, r), (2, 1, 0.0));
        // wasted routine step
        let (w, _) = step(&s, task, task.wrong_actions(1)[0]).unwrap();
        assert_eq!((w.step_index, w.progress, w.failed), (2, 0, false));
        assert_eq!(w.key, s.key);
        assert!(matches!(step(&s, task, 4), Err(Error::Usage(_))));
    }

    #[test]
    fn critical_mistake_in_partial_credit_mode_wastes_the_step() {
        let mut c = cfg(4, &[1], 3);
        c.partial_credit = true;
        let task = &make_task_set(&c, 1, 2).unwrap()[0];
        let s = initial_state(task);
        let (n, _) = step(&s, task, task.wrong_actions(1)[0]).unwrap();
        assert!(!n.failed);
        assert_eq!(n.progress, 0);
    }

    #[test]
    fn all_correct_run_reaches_full_progress() {
        let task = &make_task_set(&cfg(10, &[3, 7], 4), 1, 3).unwrap()[0];
        let oracle = policy(1.0, 1.0, 1.0);
        let mut s = initial_state(task);
        let mut total = 0.0;
        while !s.is_terminal(task) {
            let a = policy_dist(&oracle, &s, task).unwrap().greedy();
            let (n, r) = step(&s, task, a).unwrap();
            total += r;
            s = n;
        }
        assert_eq!(s.progress, 10);
        assert_eq!(total, 1.0);
    }

    #[test]
    fn entropy_examples() {
        let uniform = ActionDist::new(vec![0.25; 4]).unwrap();
        assert_close!(entropy(&uniform), 4f64.ln(), 1e-12);
        assert_close!(entropy(&uniform), 1.386294, 1e-6);
        let half = ActionDist::new(vec![0.5, 0.5, 0.0, 0.0]).unwrap();
        assert_close!(entropy(&half), 0.693147, 1e-6);
        let one_hot = ActionDist::new(vec![0.0, 1.0, 0.0]).unwrap();
        assert_eq!(entropy(&one_hot), 0.0);
    }

    #[test]
    fn key_round_trip() {
        let task = &make_task_set(&cfg(10, &[3, 7], 4), 1, 1).unwrap()[0];
        let s = State::from_key(task, &task.key_at(4), 6).unwrap();
        assert_eq!(s.progress, 4);
        assert_eq!(s.features, task.features_at(4));
        assert!(State::from_key(task, &CanonicalKey("other|1".into()), 1).is_err());
    }

    #[test]
    fn marker_observability_extremes() {
        let mut c = cfg(12, &[2, 5, 9], 5);
        c.marker_observability = 1.0;
        for t in make_task_set(&c, 20, 5).unwrap() {
            for stage in 1..=12 {
                assert_eq!(t.marker_visible(stage), t.is_critical(stage));
            }
        }
        c.marker_observability = 0.0;
        for t in make_task_set(&c, 20, 5).unwrap() {
            assert!((1..=12).all(|s| !t.marker_visible(s)));
        }
    }
}
