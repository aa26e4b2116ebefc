//! Episode execution under pure and mixed routing, cost accounting, and the
//! replay engine that feeds cloud-visited states to the device policy.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::envkit::{self, CanonicalKey, ScriptedPolicy, State, TaskSpec};
use crate::error::{Error, Result};
use crate::router::{self, RouterParams};
use crate::seed::{self, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub canonical_key: CanonicalKey,
    pub features: Vec<f64>,
    /// 0 = device, 1 = cloud.
    pub d: u8,
    pub route_prob: f64,
    pub action: usize,
    pub reward: f64,
    pub device_entropy: f64,
    pub reasoning_length: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalStatus {
    Success,
    Failure,
    HorizonExhausted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub task_id: String,
    /// Rollout index within the task's group.
    pub index: usize,
    pub steps: Vec<StepRecord>,
    #[serde(rename = "return")]
    pub ret: f64,
    pub cloud_calls: u32,
    pub terminal_status: TerminalStatus,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn decisions(&self) -> impl Iterator<Item = u8> + '_ {
        self.steps.iter().map(|s| s.d)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostModel {
    pub cloud_cost_per_call: f64,
    pub device_latency_per_step: f64,
    pub cloud_latency_per_step: f64,
    pub router_latency_per_step: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            cloud_cost_per_call: 1.0e-4,
            device_latency_per_step: 0.5,
            cloud_latency_per_step: 2.0,
            router_latency_per_step: 0.061,
        }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.cloud_cost_per_call,
            self.device_latency_per_step,
            self.cloud_latency_per_step,
            self.router_latency_per_step,
        ];
        if all.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::Config("cost_model entries must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// How a trained router turns its probability into a decision.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decision {
    Sample,
    Greedy { threshold: f64 },
}

#[derive(Debug, Clone, Copy)]
pub enum RouteMode<'a> {
    DeviceOnly,
    CloudOnly,
    Random(f64),
    Router {
        params: &'a RouterParams,
        gamma: f64,
        decision: Decision,
    },
    /// Cloud iff the device's predictive entropy exceeds the threshold.
    EntropyThreshold(f64),
}

impl RouteMode<'_> {
    fn validate(&self) -> Result<()> {
        match *self {
            RouteMode::Random(p) if !(0.0..=1.0).contains(&p) => {
                Err(Error::Usage(format!("random routing probability {p} outside [0, 1]")))
            }
            RouteMode::Router { gamma, decision, .. } => {
                router::route_prob(0.0, gamma)?;
                if let Decision::Greedy { threshold } = decision {
                    if !(threshold > 0.0 && threshold < 1.0) {
                        return Err(Error::Usage(format!(
                            "greedy threshold {threshold} outside (0, 1)"
                        )));
                    }
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

/// Independent random streams for one episode.
pub struct EpisodeRng {
    pub actions: Rng,
    pub routing: Rng,
    pub lengths: Rng,
}

impl EpisodeRng {
    /// Streams keyed by `(master, scope, task_id, index)`; the same key gives
    /// the same action draws regardless of routing mode.
    pub fn derive(master: u64, scope: &str, task_id: &str, index: usize) -> Self {
        let base = |kind: &'static str| {
            seed::stream(
                master,
                &[scope.into(), task_id.into(), index.into(), kind.into()],
            )
        };
        EpisodeRng {
            actions: base("actions"),
            routing: base("routing"),
            lengths: base("lengths"),
        }
    }
}

pub fn run_episode(
    task: &TaskSpec,
    device: &ScriptedPolicy,
    cloud: &ScriptedPolicy,
    mode: RouteMode<'_>,
    index: usize,
    rng: &mut EpisodeRng,
) -> Result<Trajectory> {
    mode.validate()?;
    let mut state = envkit::initial_state(task);
    let mut steps = Vec::with_capacity(task.horizon);
    let mut ret = 0.0;
    while !state.is_terminal(task) {
        let device_dist = envkit::policy_dist(device, &state, task)?;
        let device_entropy = envkit::entropy(&device_dist);
        let (d, route_prob) = match mode {
            RouteMode::DeviceOnly => (0, 0.0),
            RouteMode::CloudOnly => (1, 1.0),
            RouteMode::Random(p) => (router::sample_decision(p, &mut rng.routing), p),
            RouteMode::Router {
                params,
                gamma,
                decision,
            } => {
                let p = router::route_prob(router::logit(params, &state.features)?, gamma)?;
                let d = match decision {
                    Decision::Sample => router::sample_decision(p, &mut rng.routing),
                    Decision::Greedy { threshold } => router::decide_greedy(p, threshold),
                };
                (d, p)
            }
            RouteMode::EntropyThreshold(th) => {
                let d = u8::from(device_entropy > th);
                (d, f64::from(d))
            }
        };
        let action = if d == 1 {
            envkit::policy_dist(cloud, &state, task)?.sample(&mut rng.actions)
        } else {
            device_dist.sample(&mut rng.actions)
        };
        let reasoning_length = envkit::reasoning_length(task, state.stage(), &mut rng.lengths);
        let (next, reward) = envkit::step(&state, task, action)?;
        ret += reward;
        steps.push(StepRecord {
            t: state.step_index,
            canonical_key: state.key.clone(),
            features: state.features.clone(),
            d,
            route_prob,
            action,
            reward,
            device_entropy,
            reasoning_length,
        });
        state = next;
    }
    let terminal_status = if state.progress == task.horizon {
        TerminalStatus::Success
    } else if state.failed {
        TerminalStatus::Failure
    } else {
        TerminalStatus::HorizonExhausted
    };
    Ok(Trajectory {
        task_id: task.task_id.clone(),
        index,
        cloud_calls: steps.iter().map(|s| u32::from(s.d)).sum(),
        steps,
        ret,
        terminal_status,
    })
}

/// `n` rollouts of one task from the shared initial state, each on its own
/// stream derived from `(master, scope, task_id, index)`.
#[allow(clippy::too_many_arguments)]
pub fn collect_group(
    task: &TaskSpec,
    n: usize,
    device: &ScriptedPolicy,
    cloud: &ScriptedPolicy,
    mode: RouteMode<'_>,
    master: u64,
    scope: &str,
) -> Result<Vec<Trajectory>> {
    if n == 0 {
        return Err(Error::Usage("group size must be at least 1".into()));
    }
    (0..n)
        .map(|i| {
            let mut rng = EpisodeRng::derive(master, scope, &task.task_id, i);
            run_episode(task, device, cloud, mode, i, &mut rng)
        })
        .collect()
}

/// [`collect_group`] over a task set, parallel across tasks. Output order
/// follows the task order.
#[allow(clippy::too_many_arguments)]
pub fn collect_all(
    tasks: &[TaskSpec],
    n: usize,
    device: &ScriptedPolicy,
    cloud: &ScriptedPolicy,
    mode: RouteMode<'_>,
    master: u64,
    scope: &str,
) -> Result<Vec<Vec<Trajectory>>> {
    tasks
        .par_iter()
        .map(|task| collect_group(task, n, device, cloud, mode, master, scope))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplayMode {
    Sample,
    Greedy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayStep {
    pub state: State,
    pub device_action: usize,
    pub cloud_action: usize,
    pub matched: bool,
}

/// Replay a cloud-only trajectory on the device, one recorded state at a time.
pub fn replay_device_on(
    trajectory: &Trajectory,
    task: &TaskSpec,
    device: &ScriptedPolicy,
    mode: ReplayMode,
    rng: &mut Rng,
) -> Result<Vec<ReplayStep>> {
    if trajectory.task_id != task.task_id {
        return Err(Error::Usage(format!(
            "trajectory of {} replayed against task {}",
            trajectory.task_id, task.task_id
        )));
    }
    if trajectory.steps.iter().any(|s| s.d != 1) {
        return Err(Error::Usage(format!(
            "trajectory {}#{} is not cloud-only",
            trajectory.task_id, trajectory.index
        )));
    }
    trajectory
        .steps
        .iter()
        .map(|rec| {
            let state = State::from_key(task, &rec.canonical_key, rec.t)?;
            let dist = envkit::policy_dist(device, &state, task)?;
            let device_action = match mode {
                ReplayMode::Sample => dist.sample(rng),
                ReplayMode::Greedy => dist.greedy(),
            };
            Ok(ReplayStep {
                state,
                device_action,
                cloud_action: rec.action,
                matched: device_action == rec.action,
            })
        })
        .collect()
}

/// `(api_cost, latency)` of one trajectory under a cost model.
pub fn account(trajectory: &Trajectory, cost: &CostModel) -> (f64, f64) {
    let api = f64::from(trajectory.cloud_calls) * cost.cloud_cost_per_call;
    let latency = trajectory
        .steps
        .iter()
        .map(|s| {
            cost.router_latency_per_step
                + if s.d == 1 {
                    cost.cloud_latency_per_step
                } else {
                    cost.device_latency_per_step
                }
        })
        .sum();
    (api, latency)
}

/// Cloud decisions at 1-based step positions `>= t`.
pub fn future_cloud_count(trajectory: &Trajectory, t: usize) -> Result<u32> {
    if t == 0 || t > trajectory.len() {
        return Err(Error::Usage(format!(
            "position {t} outside [1, {}]",
            trajectory.len()
        )));
    }
    Ok(trajectory.steps[t - 1..].iter().map(|s| u32::from(s.d)).sum())
}

/// Remaining cloud calls for every position, computed in one backward pass.
pub fn future_cloud_counts(trajectory: &Trajectory) -> Vec<u32> {
    let mut out = vec![0; trajectory.len()];
    let mut acc = 0;
    for (i, s) in trajectory.steps.iter().enumerate().rev() {
        acc += u32::from(s.d);
        out[i] = acc;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envkit::{make_task_set, EnvConfig, Tier};
    use crate::router::Architecture;

    fn env() -> EnvConfig {
        EnvConfig {
            horizon: 10,
            critical_steps: Some(vec![3, 7]),
            ..EnvConfig::default()
        }
    }

    fn fixture(decisions: &[u8]) -> Trajectory {
        Trajectory {
            task_id: "x".into(),
            index: 0,
            steps: decisions
                .iter()
                .enumerate()
                .map(|(i, &d)| StepRecord {
                    t: i + 1,
                    canonical_key: CanonicalKey(format!("x|{i}")),
                    features: vec![],
                    d,
                    route_prob: f64::from(d),
                    action: 0,
                    reward: 0.0,
                    device_entropy: 0.0,
                    reasoning_length: 1,
                })
                .collect(),
            ret: 0.0,
            cloud_calls: decisions.iter().map(|&d| u32::from(d)).sum(),
            terminal_status: TerminalStatus::HorizonExhausted,
        }
    }

    #[test]
    fn pure_modes() {
        let tasks = make_task_set(&env(), 5, 3).unwrap();
        let (dev, cl) = (ScriptedPolicy::device_default(), ScriptedPolicy::cloud_default());
        for t in &tasks {
            let mut rng = EpisodeRng::derive(1, "test", &t.task_id, 0);
            let tr = run_episode(t, &dev, &cl, RouteMode::DeviceOnly, 0, &mut rng).unwrap();
            assert!(tr.decisions().all(|d| d == 0));
            assert_eq!(tr.cloud_calls, 0);
            let mut rng = EpisodeRng::derive(1, "test", &t.task_id, 0);
            let tr = run_episode(t, &dev, &cl, RouteMode::CloudOnly, 0, &mut rng).unwrap();
            assert!(tr.decisions().all(|d| d == 1));
            assert_eq!(tr.cloud_calls as usize, tr.len());
            assert!(tr.len() <= t.horizon);
        }
    }

    #[test]
    fn random_half_routes_half_the_steps() {
        let tasks = make_task_set(&env(), 100, 4).unwrap();
        let (dev, cl) = (ScriptedPolicy::device_default(), ScriptedPolicy::cloud_default());
        let groups = collect_all(&tasks, 100, &dev, &cl, RouteMode::Random(0.5), 5, "rand").unwrap();
        let (mut calls, mut steps) = (0u64, 0u64);
        for tr in groups.iter().flatten() {
            calls += u64::from(tr.cloud_calls);
            steps += tr.len() as u64;
        }
        let frac = calls as f64 / steps as f64;
        let se = (0.25 / steps as f64).sqrt();
        assert!((frac - 0.5).abs() < 3.0 * se, "{frac}");
    }

    #[test]
    fn group_shares_initial_state_and_is_reproducible() {
        let task = &make_task_set(&env(), 1, 4).unwrap()[0];
        let (dev, cl) = (ScriptedPolicy::device_default(), ScriptedPolicy::cloud_default());
        let g = collect_group(task, 8, &dev, &cl, RouteMode::Random(0.3), 9, "g").unwrap();
        assert_eq!(g.len(), 8);
        assert!(g.iter().all(|t| t.steps[0].canonical_key == g[0].steps[0].canonical_key));
        let again = collect_group(task, 8, &dev, &cl, RouteMode::Random(0.3), 9, "g").unwrap();
        assert_eq!(
            serde_json::to_string(&g).unwrap(),
            serde_json::to_string(&again).unwrap()
        );
        assert_eq!(collect_group(task, 1, &dev, &cl, RouteMode::Random(0.3), 9, "g").unwrap().len(), 1);
        assert!(collect_group(task, 0, &dev, &cl, RouteMode::Random(0.3), 9, "g").is_err());
    }

    #[test]
    fn saturated_router_reproduces_pure_modes() {
        let tasks = make_task_set(&env(), 20, 8).unwrap();
        let (dev, cl) = (ScriptedPolicy::device_default(), ScriptedPolicy::cloud_default());
        let arch = Architecture::Linear { inputs: tasks[0].feature_len() };
        let mut always = RouterParams::zeros(arch);
        *always.values.last_mut().unwrap() = 100.0;
        let mut never = RouterParams::zeros(arch);
        *never.values.last_mut().unwrap() = -100.0;
        for t in &tasks {
            for (params, pure) in [(&always, RouteMode::CloudOnly), (&never, RouteMode::DeviceOnly)] {
                let mode = RouteMode::Router {
                    params,
                    gamma: 1.3,
                    decision: Decision::Sample,
                };
                let a = run_episode(t, &dev, &cl, mode, 0, &mut EpisodeRng::derive(2, "s", &t.task_id, 0))
                    .unwrap();
                let b = run_episode(t, &dev, &cl, pure, 0, &mut EpisodeRng::derive(2, "s", &t.task_id, 0))
                    .unwrap();
                assert_eq!(a.ret, b.ret);
                assert_eq!(a.cloud_calls, b.cloud_calls);
                for (x, y) in a.steps.iter().zip(&b.steps) {
                    assert_eq!((x.d, x.action, &x.canonical_key), (y.d, y.action, &y.canonical_key));
                }
            }
        }
    }

    #[test]
    fn replay_identity_and_mismatch() {
        let task = &make_task_set(&env(), 1, 2).unwrap()[0];
        let cl = ScriptedPolicy::cloud_default();
        let mut rng = EpisodeRng::derive(3, "r", &task.task_id, 0);
        // a one-hot cloud keeps greedy replay of the same policy exact
        let sharp = ScriptedPolicy {
            p_routine_correct: 1.0,
            p_critical_correct: 1.0,
            alternative_focus: 1.0,
            ..cl.clone()
        };
        let tr = run_episode(task, &sharp, &sharp, RouteMode::CloudOnly, 0, &mut rng).unwrap();
        let mut r = seed::stream(0, &[]);
        let same = replay_device_on(&tr, task, &sharp, ReplayMode::Greedy, &mut r).unwrap();
        assert!(same.iter().all(|s| s.matched));

        let wrong = ScriptedPolicy {
            tier: Tier::Device,
            p_routine_correct: 0.0,
            p_critical_correct: 0.0,
            spread: 1e-3,
            preferred_alternative: 0,
            alternative_focus: 1.0,
        };
        let miss = replay_device_on(&tr, task, &wrong, ReplayMode::Greedy, &mut r).unwrap();
        assert!(miss.iter().all(|s| !s.matched));

        let mut mixed = tr.clone();
        mixed.steps[0].d = 0;
        assert!(matches!(
            replay_device_on(&mixed, task, &sharp, ReplayMode::Greedy, &mut r),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn accounting_examples() {
        let tr = fixture(&[1, 0, 1, 0, 0, 1, 0, 1, 0, 0]);
        let zero = CostModel {
            cloud_cost_per_call: 0.0,
            device_latency_per_step: 0.0,
            cloud_latency_per_step: 0.0,
            router_latency_per_step: 0.0,
        };
        assert_eq!(account(&tr, &zero), (0.0, 0.0));
        let cm = CostModel {
            cloud_cost_per_call: 1.0,
            device_latency_per_step: 0.5,
            cloud_latency_per_step: 2.0,
            router_latency_per_step: 0.061,
        };
        let (api, lat) = account(&tr, &cm);
        assert_eq!(api, 4.0);
        assert!((lat - 11.61).abs() < 1e-12);
    }

    #[test]
    fn future_cloud_examples() {
        let tr = fixture(&[1, 0, 1, 1]);
        assert_eq!(future_cloud_count(&tr, 1).unwrap(), 3);
        assert_eq!(future_cloud_count(&tr, 4).unwrap(), 1);
        let tail = fixture(&[1, 0, 0]);
        assert_eq!(future_cloud_count(&tail, 2).unwrap(), 0);
        assert!(future_cloud_count(&tr, 0).is_err());
        assert!(future_cloud_count(&tr, 5).is_err());
        assert_eq!(future_cloud_counts(&tr), vec![3, 2, 2, 1]);
    }
}
