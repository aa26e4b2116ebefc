//! Stage I: imitation-learning cold start.
//!
//! Tasks where the cloud clearly beats the device are selected, a reference
//! cloud trajectory of each is replayed on the device, and every step is
//! labelled 1 when the device's action disagrees with the cloud's. The router
//! is then fitted to those labels with plain BCE and frozen as the anchor for
//! stage II.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::envkit::{CanonicalKey, ScriptedPolicy, TaskSpec};
use crate::error::{Error, Result};
use crate::rollout::{self, ReplayMode, RouteMode, Trajectory};
use crate::router::{AnchorParams, OptimizerState, RouterParams};
use crate::seed;
use crate::training::{self, Minibatches, OptConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Il,
    Rl,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    /// Position `t` of trajectory `"<task_id>#<index>"`.
    Step { trajectory: String, t: usize },
    /// A grouped state in an RL iteration.
    Group { group_id: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledStep {
    pub task_id: String,
    pub canonical_key: CanonicalKey,
    pub features: Vec<f64>,
    pub label: u8,
    pub stage: Stage,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffTaskReport {
    pub task_id: String,
    pub r_device: f64,
    pub r_cloud: f64,
    pub selected: bool,
}

/// Stage I settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IlConfig {
    pub delta: f64,
    pub rollouts_per_task: usize,
    pub replay_mode: ReplayMode,
    pub holdout_fraction: f64,
    pub dedupe: bool,
    pub log_every: usize,
    pub opt: OptConfig,
}

impl Default for IlConfig {
    fn default() -> Self {
        IlConfig {
            delta: 0.5,
            rollouts_per_task: 4,
            replay_mode: ReplayMode::Sample,
            holdout_fraction: 0.1,
            dedupe: false,
            log_every: 100,
            opt: OptConfig {
                lr: 4e-5,
                batch_size: 64,
                steps: 20_000,
                weight_decay: 0.01,
                pos_weight: 1.0,
            },
        }
    }
}

impl IlConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta >= 0.0) {
            return Err(Error::Config("il.delta must be >= 0".into()));
        }
        if self.rollouts_per_task == 0 {
            return Err(Error::Config("il.rollouts_per_task must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::Config("il.holdout_fraction must lie in [0, 1)".into()));
        }
        if self.log_every == 0 {
            return Err(Error::Config("il.log_every must be at least 1".into()));
        }
        self.opt.validate("il.opt")
    }
}

fn mean_return(group: &[Trajectory]) -> f64 {
    group.iter().map(|t| t.ret).sum::<f64>() / group.len() as f64
}

/// Compare mean device and cloud returns per task; a task is selected iff
/// the cloud's mean exceeds the device's by strictly more than `delta`.
pub fn diff_reports<'a>(
    tasks: &[TaskSpec],
    device: &'a BTreeMap<String, Vec<Trajectory>>,
    cloud: &'a BTreeMap<String, Vec<Trajectory>>,
    delta: f64,
) -> Result<Vec<DiffTaskReport>> {
    if tasks.is_empty() {
        return Err(Error::Usage("empty task set".into()));
    }
    tasks
        .iter()
        .map(|task| {
            let fetch = |m: &'a BTreeMap<String, Vec<Trajectory>>, tier: &str| -> Result<&'a [Trajectory]> {
                m.get(&task.task_id)
                    .filter(|g| !g.is_empty())
                    .map(Vec::as_slice)
                    .ok_or_else(|| {
                        Error::Data(format!("no {tier} rollouts for task {}", task.task_id))
                    })
            };
            let r_device = mean_return(fetch(device, "device")?);
            let r_cloud = mean_return(fetch(cloud, "cloud")?);
            Ok(DiffTaskReport {
                task_id: task.task_id.clone(),
                r_device,
                r_cloud,
                selected: r_cloud - r_device > delta,
            })
        })
        .collect()
}

/// Roll out both pure policies and select difficulty-gap tasks.
pub struct DiffSelection {
    pub selected: Vec<String>,
    pub reports: Vec<DiffTaskReport>,
    pub device_rollouts: BTreeMap<String, Vec<Trajectory>>,
    pub cloud_rollouts: BTreeMap<String, Vec<Trajectory>>,
}

pub fn select_diff_tasks(
    tasks: &[TaskSpec],
    device: &ScriptedPolicy,
    cloud: &ScriptedPolicy,
    delta: f64,
    rollouts_per_task: usize,
    master: u64,
) -> Result<DiffSelection> {
    if tasks.is_empty() {
        return Err(Error::Usage("empty task set".into()));
    }
    if !(delta >= 0.0) || rollouts_per_task == 0 {
        return Err(Error::Usage("delta must be >= 0 and rollouts_per_task >= 1".into()));
    }
    let by_task = |groups: Vec<Vec<Trajectory>>| -> BTreeMap<String, Vec<Trajectory>> {
        tasks.iter().map(|t| t.task_id.clone()).zip(groups).collect()
    };
    let device_rollouts = by_task(rollout::collect_all(
        tasks,
        rollouts_per_task,
        device,
        cloud,
        RouteMode::DeviceOnly,
        master,
        "device",
    )?);
    let cloud_rollouts = by_task(rollout::collect_all(
        tasks,
        rollouts_per_task,
        device,
        cloud,
        RouteMode::CloudOnly,
        master,
        "cloud",
    )?);
    let reports = diff_reports(tasks, &device_rollouts, &cloud_rollouts, delta)?;
    Ok(DiffSelection {
        selected: reports
            .iter()
            .filter(|r| r.selected)
            .map(|r| r.task_id.clone())
            .collect(),
        reports,
        device_rollouts,
        cloud_rollouts,
    })
}

/// The cloud rollout used as the oracle reference: highest return, earliest
/// index among ties.
pub fn reference_trajectory(group: &[Trajectory]) -> Option<&Trajectory> {
    group
        .iter()
        .reduce(|best, t| if t.ret > best.ret { t } else { best })
}

/// 1 when the device disagrees with the cloud (route to cloud), else 0.
pub fn consistency_label(device_action: usize, cloud_action: usize) -> u8 {
    u8::from(device_action != cloud_action)
}

/// One labelled step per position of each selected task's reference cloud
/// trajectory.
pub fn build_il_dataset(
    selected: &[String],
    cloud: &BTreeMap<String, Vec<Trajectory>>,
    tasks: &[TaskSpec],
    device: &ScriptedPolicy,
    mode: ReplayMode,
    dedupe: bool,
    master: u64,
) -> Result<Vec<LabeledStep>> {
    let by_id: BTreeMap<&str, &TaskSpec> = tasks.iter().map(|t| (t.task_id.as_str(), t)).collect();
    let per_task: Vec<Vec<LabeledStep>> = selected
        .par_iter()
        .map(|task_id| {
            let task = by_id
                .get(task_id.as_str())
                .ok_or_else(|| Error::Data(format!("selected task {task_id} is not in the task set")))?;
            let traj = cloud
                .get(task_id)
                .and_then(|g| reference_trajectory(g))
                .ok_or_else(|| Error::Data(format!("no cloud trajectory stored for task {task_id}")))?;
            let mut rng = seed::stream(master, &["il-replay".into(), task_id.as_str().into()]);
            let replay = rollout::replay_device_on(traj, task, device, mode, &mut rng)?;
            Ok(replay
                .into_iter()
                .zip(&traj.steps)
                .map(|(r, rec)| LabeledStep {
                    task_id: task_id.clone(),
                    canonical_key: rec.canonical_key.clone(),
                    features: rec.features.clone(),
                    label: consistency_label(r.device_action, r.cloud_action),
                    stage: Stage::Il,
                    provenance: Provenance::Step {
                        trajectory: format!("{}#{}", traj.task_id, traj.index),
                        t: rec.t,
                    },
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    let mut out: Vec<LabeledStep> = per_task.into_iter().flatten().collect();
    if dedupe {
        let mut seen = BTreeSet::new();
        out.retain(|s| seen.insert(s.canonical_key.clone()));
    }
    Ok(out)
}

/// Split task ids into (train, holdout) at task granularity.
pub fn holdout_split(dataset: &[LabeledStep], fraction: f64, master: u64) -> (BTreeSet<String>, BTreeSet<String>) {
    let mut ids: Vec<String> = dataset
        .iter()
        .map(|s| s.task_id.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    ids.shuffle(&mut seed::stream(master, &["il-holdout".into()]));
    let mut k = (fraction * ids.len() as f64).round() as usize;
    if fraction > 0.0 && ids.len() >= 2 {
        k = k.clamp(1, ids.len() - 1);
    } else {
        k = 0;
    }
    let holdout = ids[..k].iter().cloned().collect();
    let train = ids[k..].iter().cloned().collect();
    (train, holdout)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IlMetric {
    pub iteration: usize,
    pub train_loss: f64,
    pub holdout_accuracy: Option<f64>,
}

pub struct IlOutcome {
    pub params: RouterParams,
    pub anchor: AnchorParams,
    pub optimizer: OptimizerState,
    pub history: Vec<IlMetric>,
    pub holdout_tasks: BTreeSet<String>,
}

/// Fit the router to the consistency labels and freeze the anchor.
pub fn train_il(
    dataset: &[LabeledStep],
    mut params: RouterParams,
    cfg: &IlConfig,
    master: u64,
) -> Result<IlOutcome> {
    if dataset.is_empty() {
        return Err(Error::Training(
            "imitation dataset is empty (no difficulty-gap tasks selected); lower il.delta or add tasks"
                .into(),
        ));
    }
    let (train_ids, holdout_ids) = holdout_split(dataset, cfg.holdout_fraction, master);
    let train: Vec<LabeledStep> = dataset
        .iter()
        .filter(|s| train_ids.contains(&s.task_id))
        .cloned()
        .collect();
    let holdout: Vec<&LabeledStep> = dataset
        .iter()
        .filter(|s| holdout_ids.contains(&s.task_id))
        .collect();
    let mut opt = OptimizerState::new(params.len(), cfg.opt.lr, cfg.opt.weight_decay);
    let mut batches = Minibatches::new(
        train.len(),
        cfg.opt.batch_size,
        seed::stream(master, &["il-batches".into()]),
    );
    let mut history = Vec::new();
    let mut acc_err = None;
    let steps = cfg.opt.steps;
    training::run(
        &train,
        &mut params,
        &mut opt,
        None,
        &cfg.opt,
        &mut batches,
        |step, loss, p| {
            if step % cfg.log_every == 0 || step == steps {
                let holdout_accuracy = if holdout.is_empty() {
                    None
                } else {
                    match training::accuracy(p, holdout.iter().copied()) {
                        Ok(a) => Some(a),
                        Err(e) => {
                            acc_err.get_or_insert(e);
                            None
                        }
                    }
                };
                history.push(IlMetric {
                    iteration: step,
                    train_loss: loss,
                    holdout_accuracy,
                });
            }
        },
    )?;
    if let Some(e) = acc_err {
        return Err(e);
    }
    Ok(IlOutcome {
        anchor: AnchorParams::freeze(&params),
        params,
        optimizer: opt,
        history,
        holdout_tasks: holdout_ids,
    })
}
