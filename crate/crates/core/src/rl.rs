//! Stage II: cost-aware refinement with state grouping.
//!
//! Each iteration rolls out the current router with temperature sampling,
//! pools every visit to the same state across a task's rollouts, compares
//! returns (and then remaining cloud calls) between the two decisions, and
//! fits the router to the resulting labels with an L2 pull toward the IL
//! anchor.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::envkit::{CanonicalKey, ScriptedPolicy, TaskSpec};
use crate::error::{Error, Result};
use crate::il::{LabeledStep, Provenance, Stage};
use crate::rollout::{self, Decision, RouteMode, TerminalStatus, Trajectory};
use crate::router::{AnchorParams, OptimizerState, RouterParams};
use crate::seed;
use crate::training::{self, Minibatches, OptConfig};

/// One visit to a grouped state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Occurrence {
    /// Trajectory index within the group.
    pub i: usize,
    /// 1-based step position.
    pub t: usize,
    pub d: u8,
    pub ret: f64,
    /// Cloud calls at positions >= t.
    pub future_cloud: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Group {
    pub features: Vec<f64>,
    pub occurrences: Vec<Occurrence>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupIndex {
    pub task_id: String,
    pub groups: BTreeMap<CanonicalKey, Group>,
}

impl GroupIndex {
    pub fn occurrence_count(&self) -> usize {
        self.groups.values().map(|g| g.occurrences.len()).sum()
    }
}

pub fn build_group_index(trajectories: &[Trajectory], task_id: &str) -> Result<GroupIndex> {
    let mut groups: BTreeMap<CanonicalKey, Group> = BTreeMap::new();
    for traj in trajectories {
        if traj.task_id != task_id {
            return Err(Error::Usage(format!(
                "trajectory of task {} in group for {task_id}",
                traj.task_id
            )));
        }
        let future = rollout::future_cloud_counts(traj);
        for (rec, c) in traj.steps.iter().zip(future) {
            groups
                .entry(rec.canonical_key.clone())
                .or_insert_with(|| Group {
                    features: rec.features.clone(),
                    occurrences: Vec::new(),
                })
                .occurrences
                .push(Occurrence {
                    i: traj.index,
                    t: rec.t,
                    d: rec.d,
                    ret: traj.ret,
                    future_cloud: c,
                });
        }
    }
    Ok(GroupIndex {
        task_id: task_id.to_string(),
        groups,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipReason {
    Arm0Undefined,
    Arm1Undefined,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum GroupLabel {
    Labeled(u8),
    Skipped(SkipReason),
}

/// Decision-conditioned estimates; index 0 is the device arm, 1 the cloud arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub n: [usize; 2],
    pub r_hat: [Option<f64>; 2],
    pub c_hat: [Option<f64>; 2],
}

/// Means accumulate in occurrence order.
pub fn group_estimates(occurrences: &[Occurrence]) -> GroupStats {
    let mut n = [0usize; 2];
    let mut r = [0.0f64; 2];
    let mut c = [0.0f64; 2];
    for o in occurrences {
        let d = usize::from(o.d);
        n[d] += 1;
        r[d] += o.ret;
        c[d] += f64::from(o.future_cloud);
    }
    let mean = |sum: f64, k: usize| (k > 0).then(|| sum / k as f64);
    GroupStats {
        n,
        r_hat: [mean(r[0], n[0]), mean(r[1], n[1])],
        c_hat: [mean(c[0], n[0]), mean(c[1], n[1])],
    }
}

/// Return margin first, then lower expected cloud usage; exact ties go to
/// the device.
pub fn preference_label(stats: &GroupStats, epsilon: f64) -> GroupLabel {
    let (Some(r0), Some(r1)) = (stats.r_hat[0], stats.r_hat[1]) else {
        return GroupLabel::Skipped(if stats.r_hat[0].is_none() {
            SkipReason::Arm0Undefined
        } else {
            SkipReason::Arm1Undefined
        });
    };
    if r1 - r0 > epsilon {
        return GroupLabel::Labeled(1);
    }
    if r0 - r1 > epsilon {
        return GroupLabel::Labeled(0);
    }
    // both arms defined, so both cost means are too
    let c0 = stats.c_hat[0].unwrap_or(0.0);
    let c1 = stats.c_hat[1].unwrap_or(0.0);
    GroupLabel::Labeled(u8::from(c1 < c0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRecord {
    pub task_id: String,
    pub canonical_key: CanonicalKey,
    pub stats: GroupStats,
    pub label: GroupLabel,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RlDataset {
    pub steps: Vec<LabeledStep>,
    pub groups: Vec<GroupRecord>,
}

impl RlDataset {
    pub fn skipped(&self) -> usize {
        self.groups
            .iter()
            .filter(|g| matches!(g.label, GroupLabel::Skipped(_)))
            .count()
    }
}

/// One labelled example per group with both arms observed. `tag` prefixes
/// the group ids written into provenance.
pub fn build_rl_dataset(groups_per_task: &[Vec<Trajectory>], epsilon: f64, tag: &str) -> Result<RlDataset> {
    if !(epsilon > 0.0) {
        return Err(Error::Usage("epsilon must be positive".into()));
    }
    let per_task: Vec<RlDataset> = groups_per_task
        .par_iter()
        .filter(|g| !g.is_empty())
        .map(|trajs| {
            let task_id = &trajs[0].task_id;
            let index = build_group_index(trajs, task_id)?;
            let mut out = RlDataset::default();
            for (key, group) in index.groups {
                let stats = group_estimates(&group.occurrences);
                let label = preference_label(&stats, epsilon);
                if let GroupLabel::Labeled(y) = label {
                    out.steps.push(LabeledStep {
                        task_id: task_id.clone(),
                        canonical_key: key.clone(),
                        features: group.features,
                        label: y,
                        stage: Stage::Rl,
                        provenance: Provenance::Group {
                            group_id: format!("{tag}/{}", key.0),
                        },
                    });
                }
                out.groups.push(GroupRecord {
                    task_id: task_id.clone(),
                    canonical_key: key,
                    stats,
                    label,
                });
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let mut all = RlDataset::default();
    for d in per_task {
        all.steps.extend(d.steps);
        all.groups.extend(d.groups);
    }
    if all.steps.is_empty() {
        return Err(Error::Training(format!(
            "no labelled groups ({} skipped: every state was visited under one decision only); \
             raise rl.gamma or rl.group_size",
            all.groups.len()
        )));
    }
    Ok(all)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RlTrainMetrics {
    pub mean_loss: f64,
    pub label_agreement: f64,
    pub param_distance: f64,
}

/// Minimise the anchored BCE on `dataset`.
pub fn train_rl(
    dataset: &[LabeledStep],
    params: &mut RouterParams,
    opt: &mut OptimizerState,
    anchor: &AnchorParams,
    beta: f64,
    cfg: &OptConfig,
    batches: &mut Minibatches,
) -> Result<RlTrainMetrics> {
    if !(beta >= 0.0) {
        return Err(Error::Usage("beta must be >= 0".into()));
    }
    if dataset.is_empty() {
        return Err(Error::Training("RL dataset is empty".into()));
    }
    let mut loss_sum = 0.0;
    training::run(dataset, params, opt, Some((anchor, beta)), cfg, batches, |_, l, _| {
        loss_sum += l;
    })?;
    Ok(RlTrainMetrics {
        mean_loss: if cfg.steps == 0 { f64::NAN } else { loss_sum / cfg.steps as f64 },
        label_agreement: training::accuracy(params, dataset)?,
        param_distance: params.distance(anchor.params())?,
    })
}

/// Stage II settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RlConfig {
    /// Rollouts per task per iteration.
    pub group_size: usize,
    pub gamma: f64,
    pub epsilon: f64,
    pub beta: f64,
    pub iterations: usize,
    pub opt: OptConfig,
}

impl Default for RlConfig {
    fn default() -> Self {
        RlConfig {
            group_size: 8,
            gamma: 1.3,
            epsilon: 0.05,
            beta: 0.1,
            iterations: 15,
            opt: OptConfig {
                lr: 1e-5,
                batch_size: 256,
                steps: 1000,
                weight_decay: 0.01,
                pos_weight: 1.0,
            },
        }
    }
}

impl RlConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size == 0 {
            return Err(Error::Config("rl.group_size must be at least 1".into()));
        }
        if !(self.gamma > 0.0) {
            return Err(Error::Config("rl.gamma must be positive".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("rl.epsilon must be positive".into()));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::Config("rl.beta must be >= 0".into()));
        }
        self.opt.validate("rl.opt")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iteration: usize,
    pub mean_success: f64,
    pub mean_cloud_calls: f64,
    pub labeled_groups: usize,
    pub skipped_groups: usize,
    pub train_loss: f64,
    pub label_agreement: f64,
    pub param_distance_to_anchor: f64,
}

/// Persistent state carried across iterations.
pub struct RlState {
    pub params: RouterParams,
    pub optimizer: OptimizerState,
    pub anchor: AnchorParams,
}

impl RlState {
    pub fn new(il_params: RouterParams, anchor: AnchorParams, cfg: &RlConfig) -> Self {
        RlState {
            optimizer: OptimizerState::new(il_params.len(), cfg.opt.lr, cfg.opt.weight_decay),
            params: il_params,
            anchor,
        }
    }
}

pub struct IterationOutput {
    pub report: IterationReport,
    pub rollouts: Vec<Vec<Trajectory>>,
    pub dataset: RlDataset,
}

/// One collect, group, label, train cycle.
#[allow(clippy::too_many_arguments)]
pub fn rl_iteration(
    tasks: &[TaskSpec],
    state: &mut RlState,
    device: &ScriptedPolicy,
    cloud: &ScriptedPolicy,
    cfg: &RlConfig,
    iteration: usize,
    master: u64,
) -> Result<IterationOutput> {
    if tasks.is_empty() {
        return Err(Error::Usage("empty task set".into()));
    }
    let scope = format!("rl-{iteration}");
    let rollouts = rollout::collect_all(
        tasks,
        cfg.group_size,
        device,
        cloud,
        RouteMode::Router {
            params: &state.params,
            gamma: cfg.gamma,
            decision: Decision::Sample,
        },
        master,
        &scope,
    )?;
    let n_traj: usize = rollouts.iter().map(Vec::len).sum();
    let all = || rollouts.iter().flatten();
    let mean_success = all()
        .filter(|t| t.terminal_status == TerminalStatus::Success)
        .count() as f64
        / n_traj as f64;
    let mean_cloud_calls = all().map(|t| f64::from(t.cloud_calls)).sum::<f64>() / n_traj as f64;
    let dataset = build_rl_dataset(&rollouts, cfg.epsilon, &scope)?;
    let mut batches = Minibatches::new(
        dataset.steps.len(),
        cfg.opt.batch_size,
        seed::stream(master, &["rl-batches".into(), iteration.into()]),
    );
    let m = train_rl(
        &dataset.steps,
        &mut state.params,
        &mut state.optimizer,
        &state.anchor,
        cfg.beta,
        &cfg.opt,
        &mut batches,
    )?;
    Ok(IterationOutput {
        report: IterationReport {
            iteration,
            mean_success,
            mean_cloud_calls,
            labeled_groups: dataset.steps.len(),
            skipped_groups: dataset.skipped(),
            train_loss: m.mean_loss,
            label_agreement: m.label_agreement,
            param_distance_to_anchor: m.param_distance,
        },
        rollouts,
        dataset,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rollout::StepRecord;

    fn occ(d: u8, ret: f64, c: u32) -> Occurrence {
        Occurrence {
            i: 0,
            t: 1,
            d,
            ret,
            future_cloud: c,
        }
    }

    fn stats(r0: Option<f64>, r1: Option<f64>, c0: f64, c1: f64) -> GroupStats {
        GroupStats {
            n: [r0.is_some() as usize, r1.is_some() as usize],
            r_hat: [r0, r1],
            c_hat: [r0.map(|_| c0), r1.map(|_| c1)],
        }
    }

    pub(crate) fn traj(task: &str, index: usize, keys: &[&str], ds: &[u8], ret: f64) -> Trajectory {
        Trajectory {
            task_id: task.into(),
            index,
            steps: keys
                .iter()
                .zip(ds)
                .enumerate()
                .map(|(k, (key, &d))| StepRecord {
                    t: k + 1,
                    canonical_key: CanonicalKey(format!("{task}|{key}")),
                    features: vec![k as f64],
                    d,
                    route_prob: 0.5,
                    action: 0,
                    reward: 0.0,
                    device_entropy: 0.0,
                    reasoning_length: 0,
                })
                .collect(),
            ret,
            cloud_calls: ds.iter().map(|&d| u32::from(d)).sum(),
            terminal_status: TerminalStatus::Success,
        }
    }

    #[test]
    fn estimate_examples() {
        let s = group_estimates(&[occ(1, 1.0, 3), occ(0, 0.0, 0)]);
        assert_eq!(s.r_hat, [Some(0.0), Some(1.0)]);
        assert_eq!(s.c_hat, [Some(0.0), Some(3.0)]);
        let s = group_estimates(&[occ(1, 1.0, 0), occ(1, 0.0, 0), occ(0, 1.0, 0)]);
        assert_eq!(s.r_hat, [Some(1.0), Some(0.5)]);
        let s = group_estimates(&[occ(1, 1.0, 2)]);
        assert_eq!(s.r_hat[0], None);
        assert_eq!(s.c_hat[0], None);
    }

    #[test]
    fn label_examples() {
        assert_eq!(preference_label(&stats(Some(0.7), Some(0.9), 0.0, 0.0), 0.05), GroupLabel::Labeled(1));
        assert_eq!(preference_label(&stats(Some(0.9), Some(0.7), 0.0, 0.0), 0.05), GroupLabel::Labeled(0));
        assert_eq!(preference_label(&stats(Some(1.0), Some(1.0), 2.0, 5.0), 0.05), GroupLabel::Labeled(0));
        assert_eq!(preference_label(&stats(Some(1.0), Some(1.0), 5.0, 2.0), 0.05), GroupLabel::Labeled(1));
        assert_eq!(preference_label(&stats(Some(1.0), Some(1.0), 3.0, 3.0), 0.05), GroupLabel::Labeled(0));
        // a gap of exactly epsilon is a tie
        assert_eq!(preference_label(&stats(Some(0.5), Some(0.75), 1.0, 2.0), 0.25), GroupLabel::Labeled(0));
        assert_eq!(
            preference_label(&stats(None, Some(1.0), 0.0, 1.0), 0.05),
            GroupLabel::Skipped(SkipReason::Arm0Undefined)
        );
        assert_eq!(
            preference_label(&stats(Some(1.0), None, 0.0, 1.0), 0.05),
            GroupLabel::Skipped(SkipReason::Arm1Undefined)
        );
    }

    #[test]
    fn index_examples() {
        let keys = ["0", "1", "2", "3", "4"];
        let a = traj("x", 0, &keys, &[0, 1, 0, 1, 0], 1.0);
        let mut b = a.clone();
        b.index = 1;
        let idx = build_group_index(&[a.clone(), b], "x").unwrap();
        assert_eq!(idx.groups.len(), 5);
        assert!(idx.groups.values().all(|g| g.occurrences.len() == 2));
        let idx = build_group_index(&[a.clone()], "x").unwrap();
        assert!(idx.groups.values().all(|g| g.occurrences.len() == 1));
        let other = traj("y", 0, &keys, &[0; 5], 0.0);
        assert!(matches!(build_group_index(&[a, other], "x"), Err(Error::Usage(_))));
    }

    #[test]
    fn revisits_add_occurrences_with_their_own_future_counts() {
        let t = traj("x", 0, &["0", "0", "1"], &[1, 0, 1], 1.0);
        let idx = build_group_index(&[t], "x").unwrap();
        let g = &idx.groups[&CanonicalKey("x|0".into())];
        assert_eq!(g.occurrences.len(), 2);
        assert_eq!(g.occurrences[0].future_cloud, 2);
        assert_eq!(g.occurrences[1].future_cloud, 1);
    }

    #[test]
    fn hand_built_fixture() {
        // key 0 seen under both decisions in all three rollouts
        let t0 = traj("x", 0, &["0", "1", "2"], &[1, 1, 0], 1.0);
        let t1 = traj("x", 1, &["0", "1", "2"], &[0, 0, 0], 0.0);
        let t2 = traj("x", 2, &["0", "1", "2"], &[0, 1, 1], 1.0);
        let ds = build_rl_dataset(&[vec![t0, t1, t2]], 0.05, "it").unwrap();
        // key0: d1 {R1}, d0 {R0, R1} -> R1=1 vs R0=0.5 -> 1
        // key1: d1 {R1, R1}, d0 {R0} -> 1
        // key2: d0 {R1, R0}, d1 {R1} -> R1=1 vs 0.5 -> 1
        let labels: Vec<(String, u8)> = ds.steps.iter().map(|s| (s.canonical_key.0.clone(), s.label)).collect();
        assert_eq!(
            labels,
            vec![("x|0".into(), 1), ("x|1".into(), 1), ("x|2".into(), 1)]
        );
        let t0 = traj("x", 0, &["0", "1"], &[1, 1], 1.0);
        let t1 = traj("x", 1, &["0", "1"], &[0, 1], 1.0);
        let ds = build_rl_dataset(&[vec![t0, t1]], 0.05, "it").unwrap();
        // key0 tie on return, C(1)=2 > C(0)=1 -> 0; key1 one-sided
        assert_eq!(ds.steps.len(), 1);
        assert_eq!(ds.steps[0].label, 0);
        assert_eq!(ds.skipped(), 1);
    }

    #[test]
    fn all_device_rollouts_are_skipped() {
        let t = traj("x", 0, &["0", "1"], &[0, 0], 1.0);
        let err = build_rl_dataset(&[vec![t]], 0.05, "it").unwrap_err();
        assert!(matches!(err, Error::Training(ref m) if m.contains("gamma")));
    }

    #[test]
    fn huge_epsilon_labels_by_cost() {
        let t0 = traj("x", 0, &["0", "1"], &[1, 0], 1.0);
        let t1 = traj("x", 1, &["0", "1"], &[0, 1], 0.0);
        let ds = build_rl_dataset(&[vec![t0, t1]], 10.0, "it").unwrap();
        for g in &ds.groups {
            if let GroupLabel::Labeled(y) = g.label {
                let c = g.stats.c_hat;
                let argmin = u8::from(c[1].unwrap() < c[0].unwrap());
                assert_eq!(y, argmin);
            }
        }
    }
}
