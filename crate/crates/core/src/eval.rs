//! Evaluation harness: per-method success/cost reports over seeds, Pareto
//! sweeps, replay step analyses, and their CSV/PNG renderings.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::envkit::{CanonicalKey, ScriptedPolicy, TaskSpec};
use crate::error::{Error, Result};
use crate::rollout::{self, CostModel, Decision, ReplayMode, RouteMode, Trajectory};
use crate::router::RouterParams;
use crate::seed::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub seeds: Vec<u64>,
    pub episodes_per_task: usize,
    /// A return at or above this counts as a success.
    pub success_threshold: f64,
    /// Greedy threshold for trained routers.
    pub router_threshold: f64,
    pub random_grid: Vec<f64>,
    pub threshold_grid: Vec<f64>,
    pub entropy_grid: Vec<f64>,
    pub replay_mode: ReplayMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            seeds: vec![1, 2, 3],
            episodes_per_task: 4,
            success_threshold: 1.0,
            router_threshold: 0.5,
            random_grid: (0..=10).map(|i| f64::from(i) / 10.0).collect(),
            threshold_grid: vec![0.1, 0.2, 0.3, 0.4, 0.45, 0.5, 0.55, 0.6, 0.7, 0.8, 0.9],
            entropy_grid: vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0, 1.2, 1.4, 1.7],
            replay_mode: ReplayMode::Sample,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("eval.seeds must list at least one seed".into()));
        }
        if self.episodes_per_task == 0 {
            return Err(Error::Config("eval.episodes_per_task must be at least 1".into()));
        }
        if !(self.success_threshold > 0.0 && self.success_threshold <= 1.0) {
            return Err(Error::Config("eval.success_threshold must lie in (0, 1]".into()));
        }
        let open_unit = |v: f64| v > 0.0 && v < 1.0;
        if !open_unit(self.router_threshold) || !self.threshold_grid.iter().all(|&v| open_unit(v)) {
            return Err(Error::Config("router thresholds must lie in (0, 1)".into()));
        }
        if !self.random_grid.iter().all(|p| (0.0..=1.0).contains(p)) {
            return Err(Error::Config("eval.random_grid entries must lie in [0, 1]".into()));
        }
        if !self.entropy_grid.iter().all(|&v| v >= 0.0) {
            return Err(Error::Config("eval.entropy_grid entries must be >= 0".into()));
        }
        Ok(())
    }
}

/// A named routing method.
#[derive(Debug, Clone, Copy)]
pub struct MethodSpec<'a> {
    pub name: &'a str,
    pub mode: RouteMode<'a>,
}

impl<'a> MethodSpec<'a> {
    pub fn router(name: &'a str, params: &'a RouterParams, threshold: f64) -> Self {
        MethodSpec {
            name,
            mode: RouteMode::Router {
                params,
                gamma: 1.0,
                decision: Decision::Greedy { threshold },
            },
        }
    }
}

/// Totals for one (seed, task) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRow {
    pub method: String,
    pub seed: u64,
    pub task_id: String,
    pub episodes: usize,
    pub successes: usize,
    pub total_return: f64,
    pub total_cloud_calls: u64,
    pub total_steps: u64,
    pub total_api_cost: f64,
    pub total_latency: f64,
}

/// Per-seed means over all episodes of that seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeedAggregate {
    pub seed: u64,
    pub success_rate: f64,
    pub mean_return: f64,
    pub mean_cloud_calls: f64,
    pub mean_steps: f64,
    pub mean_api_cost: f64,
    pub mean_latency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub n_tasks: usize,
    pub success_threshold: f64,
    pub success_rate: f64,
    pub success_std: f64,
    pub mean_return: f64,
    pub mean_cloud_calls: f64,
    pub mean_steps: f64,
    /// Cloud calls over all steps the method itself took.
    pub cloud_step_fraction: f64,
    /// Cloud calls over the step count of cloud-only runs on the same seeds;
    /// filled by [`EvalReport::set_cloud_only_reference`].
    pub cloud_fraction_of_cloud_only: Option<f64>,
    pub mean_api_cost: f64,
    pub mean_latency: f64,
    pub per_seed: Vec<SeedAggregate>,
    pub rows: Vec<TaskRow>,
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for x in xs {
        s += x;
        n += 1;
    }
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Sample standard deviation; 0 for fewer than two values.
fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs.iter().copied());
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

impl EvalReport {
    /// Rebuild every aggregate from the per-task rows.
    pub fn from_rows(method: &str, success_threshold: f64, rows: Vec<TaskRow>) -> Result<EvalReport> {
        if rows.is_empty() {
            return Err(Error::Usage("no evaluation rows".into()));
        }
        let mut by_seed: BTreeMap<u64, Vec<&TaskRow>> = BTreeMap::new();
        for r in &rows {
            by_seed.entry(r.seed).or_default().push(r);
        }
        let per_seed: Vec<SeedAggregate> = by_seed
            .iter()
            .map(|(&seed, rs)| {
                let n = rs.iter().map(|r| r.episodes).sum::<usize>() as f64;
                let sum = |f: fn(&TaskRow) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / n;
                SeedAggregate {
                    seed,
                    success_rate: sum(|r| r.successes as f64),
                    mean_return: sum(|r| r.total_return),
                    mean_cloud_calls: sum(|r| r.total_cloud_calls as f64),
                    mean_steps: sum(|r| r.total_steps as f64),
                    mean_api_cost: sum(|r| r.total_api_cost),
                    mean_latency: sum(|r| r.total_latency),
                }
            })
            .collect();
        let across = |f: fn(&SeedAggregate) -> f64| mean(per_seed.iter().map(f));
        let rates: Vec<f64> = per_seed.iter().map(|s| s.success_rate).collect();
        let n_tasks = by_seed.values().next().map_or(0, Vec::len);
        let mean_cloud_calls = across(|s| s.mean_cloud_calls);
        let mean_steps = across(|s| s.mean_steps);
        Ok(EvalReport {
            method: method.to_string(),
            n_tasks,
            success_threshold,
            success_rate: across(|s| s.success_rate),
            success_std: std_dev(&rates),
            mean_return: across(|s| s.mean_return),
            mean_cloud_calls,
            mean_steps,
            cloud_step_fraction: if mean_steps > 0.0 { mean_cloud_calls / mean_steps } else { 0.0 },
            cloud_fraction_of_cloud_only: None,
            mean_api_cost: across(|s| s.mean_api_cost),
            mean_latency: across(|s| s.mean_latency),
            per_seed,
            rows,
        })
    }

    pub fn set_cloud_only_reference(&mut self, cloud_only: &EvalReport) {
        self.cloud_fraction_of_cloud_only = (cloud_only.mean_steps > 0.0)
            .then(|| self.mean_cloud_calls / cloud_only.mean_steps);
    }
}

fn task_row(method: &str, seed: u64, group: &[Trajectory], cost: &CostModel, success_threshold: f64) -> TaskRow {
    let mut row = TaskRow {
        method: method.to_string(),
        seed,
        task_id: group[0].task_id.clone(),
        episodes: group.len(),
        successes: 0,
        total_return: 0.0,
        total_cloud_calls: 0,
        total_steps: 0,
        total_api_cost: 0.0,
        total_latency: 0.0,
    };
    for t in group {
        let (api, lat) = rollout::account(t, cost);
        row.successes += usize::from(t.ret >= success_threshold);
        row.total_return += t.ret;
        row.total_cloud_calls += u64::from(t.cloud_calls);
        row.total_steps += t.len() as u64;
        row.total_api_cost += api;
        row.total_latency += lat;
    }
    row
}

/// Run one method on every seed. Episode streams depend only on
/// `(seed, task, episode)`, so different methods see common random numbers.
pub fn evaluate(
    method: &MethodSpec<'_>,
    tasks: &[TaskSpec],
    device: &ScriptedPolicy,
    cloud: &ScriptedPolicy,
    cfg: &EvalConfig,
    cost: &CostModel,
) -> Result<EvalReport> {
    if tasks.is_empty() {
        return Err(Error::Usage("empty task set".into()));
    }
    if cfg.seeds.is_empty() {
        return Err(Error::Usage("at least one evaluation seed is required".into()));
    }
    let mut rows = Vec::with_capacity(tasks.len() * cfg.seeds.len());
    for &seed in &cfg.seeds {
        let groups = rollout::collect_all(
            tasks,
            cfg.episodes_per_task,
            device,
            cloud,
            method.mode,
            seed,
            "eval",
        )?;
        rows.extend(
            groups
                .iter()
                .map(|g| task_row(method.name, seed, g, cost, cfg.success_threshold)),
        );
    }
    EvalReport::from_rows(method.name, cfg.success_threshold, rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub method: String,
    pub knob: f64,
    pub mean_cloud_calls: f64,
    pub success_rate: f64,
    pub success_std: f64,
    pub per_seed: Vec<SeedAggregate>,
}

impl ParetoPoint {
    fn from_report(r: &EvalReport, knob: f64) -> Self {
        ParetoPoint {
            method: r.method.clone(),
            knob,
            mean_cloud_calls: r.mean_cloud_calls,
            success_rate: r.success_rate,
            success_std: r.success_std,
            per_seed: r.per_seed.clone(),
        }
    }
}

/// One curve of a Pareto sweep.
#[derive(Debug, Clone)]
pub enum Sweep<'a> {
    /// Knob: cloud probability.
    Random(Vec<f64>),
    /// Knob: greedy threshold.
    Router {
        name: &'a str,
        params: &'a RouterParams,
        thresholds: Vec<f64>,
    },
    /// Knob: entropy threshold.
    Entropy(Vec<f64>),
}

pub fn pareto_sweep(
    sweeps: &[Sweep<'_>],
    tasks: &[TaskSpec],
    device: &ScriptedPolicy,
    cloud: &ScriptedPolicy,
    cfg: &EvalConfig,
    cost: &CostModel,
) -> Result<Vec<ParetoPoint>> {
    let mut jobs: Vec<(MethodSpec<'_>, f64)> = Vec::new();
    for s in sweeps {
        match s {
            Sweep::Random(grid) => jobs.extend(grid.iter().map(|&p| {
                (MethodSpec { name: "random", mode: RouteMode::Random(p) }, p)
            })),
            Sweep::Router { name, params, thresholds } => jobs.extend(
                thresholds
                    .iter()
                    .map(|&th| (MethodSpec::router(name, params, th), th)),
            ),
            Sweep::Entropy(grid) => jobs.extend(grid.iter().map(|&h| {
                (MethodSpec { name: "entropy", mode: RouteMode::EntropyThreshold(h) }, h)
            })),
        }
    }
    if jobs.is_empty() {
        return Err(Error::Usage("empty sweep grid".into()));
    }
    jobs.par_iter()
        .map(|(m, knob)| Ok(ParetoPoint::from_report(&evaluate(m, tasks, device, cloud, cfg, cost)?, *knob)))
        .collect()
}

/// Piecewise-linear interpolation of `(calls, success)` pairs at `calls`.
/// Points are sorted by calls; `None` outside the covered range.
pub fn interpolate(points: &[(f64, f64)], calls: f64) -> Option<f64> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let first = pts.first()?;
    let last = pts.last()?;
    if calls < first.0 || calls > last.0 {
        return None;
    }
    for w in pts.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if calls >= x0 && calls <= x1 {
            if x1 == x0 {
                return Some(y0.max(y1));
            }
            if calls == x0 {
                return Some(y0);
            }
            if calls == x1 {
                return Some(y1);
            }
            return Some(y0 + (y1 - y0) * (calls - x0) / (x1 - x0));
        }
    }
    Some(last.1)
}

/// Entropy-threshold router evaluated at each threshold.
pub fn entropy_threshold_baseline(
    tasks: &[TaskSpec],
    device: &ScriptedPolicy,
    cloud: &ScriptedPolicy,
    thresholds: &[f64],
    cfg: &EvalConfig,
    cost: &CostModel,
) -> Result<Vec<EvalReport>> {
    thresholds
        .iter()
        .map(|&h| {
            if !(h >= 0.0) {
                return Err(Error::Usage(format!("entropy threshold {h} is negative")));
            }
            evaluate(
                &MethodSpec {
                    name: "entropy",
                    mode: RouteMode::EntropyThreshold(h),
                },
                tasks,
                device,
                cloud,
                cfg,
                cost,
            )
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub median: f64,
    pub max: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Summary> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let median = if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) };
        Some(Summary {
            n,
            mean: mean(v.iter().copied()),
            std: std_dev(&v),
            min: v[0],
            median,
            max: v[n - 1],
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchCount {
    /// 1-based position or sub-goal stage.
    pub index: usize,
    pub n: usize,
    pub matched: usize,
}

impl MatchCount {
    pub fn rate(&self) -> f64 {
        self.matched as f64 / self.n as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepAnalysis {
    pub steps: usize,
    pub matched: usize,
    pub match_rate_overall: f64,
    /// By step position within the trajectory.
    pub by_position: Vec<MatchCount>,
    /// By sub-goal stage (progress + 1).
    pub by_stage: Vec<MatchCount>,
    pub entropy_matched: Option<Summary>,
    pub entropy_mismatched: Option<Summary>,
    pub length_matched: Option<Summary>,
    pub length_mismatched: Option<Summary>,
    /// Empirical CDF of per-trajectory match rates: `(rate, fraction <= rate)`.
    pub cdf: Vec<(f64, f64)>,
}

fn counts(map: BTreeMap<usize, (usize, usize)>) -> Vec<MatchCount> {
    map.into_iter()
        .map(|(index, (n, matched))| MatchCount { index, n, matched })
        .collect()
}

/// Replay each cloud-only trajectory on the device and summarise where the
/// two agree.
pub fn analyze_steps(
    trajectories: &[Trajectory],
    tasks: &[TaskSpec],
    device: &ScriptedPolicy,
    mode: ReplayMode,
    rng: &mut Rng,
) -> Result<StepAnalysis> {
    let by_id: BTreeMap<&str, &TaskSpec> = tasks.iter().map(|t| (t.task_id.as_str(), t)).collect();
    let mut pos: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    let mut stage: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    let (mut ent_m, mut ent_x, mut len_m, mut len_x) = (vec![], vec![], vec![], vec![]);
    let mut per_traj = Vec::new();
    for traj in trajectories {
        let task = by_id
            .get(traj.task_id.as_str())
            .ok_or_else(|| Error::Data(format!("trajectory for unknown task {}", traj.task_id)))?;
        let replay = rollout::replay_device_on(traj, task, device, mode, rng)?;
        let mut hits = 0usize;
        for (r, rec) in replay.iter().zip(&traj.steps) {
            let m = usize::from(r.matched);
            hits += m;
            let e = pos.entry(rec.t).or_default();
            e.0 += 1;
            e.1 += m;
            let e = stage.entry(stage_of(&rec.canonical_key)?).or_default();
            e.0 += 1;
            e.1 += m;
            let (ent, len) = if r.matched { (&mut ent_m, &mut len_m) } else { (&mut ent_x, &mut len_x) };
            ent.push(rec.device_entropy);
            len.push(f64::from(rec.reasoning_length));
        }
        if !replay.is_empty() {
            per_traj.push(hits as f64 / replay.len() as f64);
        }
    }
    let steps = ent_m.len() + ent_x.len();
    if steps == 0 {
        return Err(Error::Usage("no steps to analyze".into()));
    }
    per_traj.sort_by(f64::total_cmp);
    let k = per_traj.len() as f64;
    let mut cdf: Vec<(f64, f64)> = Vec::new();
    for (i, &r) in per_traj.iter().enumerate() {
        let f = (i + 1) as f64 / k;
        match cdf.last_mut() {
            Some(last) if last.0 == r => last.1 = f,
            _ => cdf.push((r, f)),
        }
    }
    Ok(StepAnalysis {
        steps,
        matched: ent_m.len(),
        match_rate_overall: ent_m.len() as f64 / steps as f64,
        by_position: counts(pos),
        by_stage: counts(stage),
        entropy_matched: Summary::of(&ent_m),
        entropy_mismatched: Summary::of(&ent_x),
        length_matched: Summary::of(&len_m),
        length_mismatched: Summary::of(&len_x),
        cdf,
    })
}

fn stage_of(key: &CanonicalKey) -> Result<usize> {
    Ok(key.decode()?.1 + 1)
}

fn csv_bytes<F>(write: F) -> Result<Vec<u8>>
where
    F: FnOnce(&mut csv::Writer<Vec<u8>>) -> csv::Result<()>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    write(&mut w).map_err(|e| Error::Data(format!("csv encoding failed: {e}")))?;
    w.into_inner()
        .map_err(|e| Error::Data(format!("csv encoding failed: {e}")))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// `eval_report.csv`: one line per method.
pub fn report_csv(reports: &[EvalReport]) -> Result<Vec<u8>> {
    csv_bytes(|w| {
        w.write_record([
            "method",
            "n_tasks",
            "seeds",
            "success_threshold",
            "success_rate",
            "success_std",
            "mean_return",
            "mean_cloud_calls",
            "mean_steps",
            "cloud_step_fraction",
            "cloud_fraction_of_cloud_only",
            "mean_api_cost",
            "mean_latency",
        ])?;
        for r in reports {
            w.write_record([
                r.method.clone(),
                r.n_tasks.to_string(),
                r.per_seed.len().to_string(),
                r.success_threshold.to_string(),
                r.success_rate.to_string(),
                r.success_std.to_string(),
                r.mean_return.to_string(),
                r.mean_cloud_calls.to_string(),
                r.mean_steps.to_string(),
                r.cloud_step_fraction.to_string(),
                fmt_opt(r.cloud_fraction_of_cloud_only),
                r.mean_api_cost.to_string(),
                r.mean_latency.to_string(),
            ])?;
        }
        Ok(())
    })
}

/// `eval_rows.csv`: the per-(seed, task) rows every aggregate is built from.
pub fn rows_csv(reports: &[EvalReport]) -> Result<Vec<u8>> {
    csv_bytes(|w| {
        for r in reports {
            for row in &r.rows {
                w.serialize(row)?;
            }
        }
        Ok(())
    })
}

pub fn parse_rows_csv(bytes: &[u8]) -> Result<Vec<TaskRow>> {
    csv::Reader::from_reader(bytes)
        .deserialize()
        .enumerate()
        .map(|(i, r)| r.map_err(|e| Error::Data(format!("eval rows line {}: {e}", i + 2))))
        .collect()
}

/// `pareto.csv`: one line per (method, knob) and seed, plus the seed mean.
pub fn pareto_csv(points: &[ParetoPoint]) -> Result<Vec<u8>> {
    csv_bytes(|w| {
        w.write_record(["method", "knob", "seed", "mean_cloud_calls", "success_rate", "success_std"])?;
        for p in points {
            for s in &p.per_seed {
                w.write_record([
                    p.method.clone(),
                    p.knob.to_string(),
                    s.seed.to_string(),
                    s.mean_cloud_calls.to_string(),
                    s.success_rate.to_string(),
                    String::new(),
                ])?;
            }
            w.write_record([
                p.method.clone(),
                p.knob.to_string(),
                "mean".to_string(),
                p.mean_cloud_calls.to_string(),
                p.success_rate.to_string(),
                p.success_std.to_string(),
            ])?;
        }
        Ok(())
    })
}

/// `step_analysis.csv`: match counts by position and stage, then the
/// matched/mismatched summaries and the CDF.
pub fn step_analysis_csv(a: &StepAnalysis) -> Result<Vec<u8>> {
    csv_bytes(|w| {
        w.write_record(["section", "key", "n", "value"])?;
        w.write_record([
            "overall".into(),
            String::new(),
            a.steps.to_string(),
            a.match_rate_overall.to_string(),
        ])?;
        for (section, rows) in [("position", &a.by_position), ("stage", &a.by_stage)] {
            for c in rows {
                w.write_record([
                    section.to_string(),
                    c.index.to_string(),
                    c.n.to_string(),
                    c.rate().to_string(),
                ])?;
            }
        }
        let summaries = [
            ("entropy_matched", a.entropy_matched),
            ("entropy_mismatched", a.entropy_mismatched),
            ("length_matched", a.length_matched),
            ("length_mismatched", a.length_mismatched),
        ];
        for (section, s) in summaries {
            let Some(s) = s else { continue };
            for (key, v) in [
                ("mean", s.mean),
                ("std", s.std),
                ("min", s.min),
                ("median", s.median),
                ("max", s.max),
            ] {
                w.write_record([section.to_string(), key.to_string(), s.n.to_string(), v.to_string()])?;
            }
        }
        for (rate, f) in &a.cdf {
            w.write_record(["cdf".to_string(), rate.to_string(), String::new(), f.to_string()])?;
        }
        Ok(())
    })
}

pub fn iteration_csv(reports: &[crate::rl::IterationReport]) -> Result<Vec<u8>> {
    csv_bytes(|w| {
        for r in reports {
            w.serialize(r)?;
        }
        Ok(())
    })
}

pub fn il_history_csv(history: &[crate::il::IlMetric]) -> Result<Vec<u8>> {
    csv_bytes(|w| {
        w.write_record(["iteration", "train_loss", "holdout_accuracy"])?;
        for m in history {
            w.write_record([
                m.iteration.to_string(),
                m.train_loss.to_string(),
                fmt_opt(m.holdout_accuracy),
            ])?;
        }
        Ok(())
    })
}

const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [214, 39, 40],
    [44, 160, 44],
    [255, 127, 14],
    [148, 103, 189],
    [23, 190, 207],
];

/// Success vs cloud calls, one colored polyline per method, as PNG bytes.
pub fn pareto_png(points: &[ParetoPoint]) -> Result<Vec<u8>> {
    use image::{ImageFormat, Rgb, RgbImage};
    let (w, h, m) = (640u32, 480u32, 40i64);
    let mut img = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    let x_max = points
        .iter()
        .map(|p| p.mean_cloud_calls)
        .fold(1.0f64, f64::max);
    let to_px = |calls: f64, succ: f64| -> (i64, i64) {
        let x = m + ((calls / x_max) * (i64::from(w) - 2 * m) as f64).round() as i64;
        let y = i64::from(h) - m - (succ.clamp(0.0, 1.0) * (i64::from(h) - 2 * m) as f64).round() as i64;
        (x, y)
    };
    let put = |img: &mut RgbImage, x: i64, y: i64, c: [u8; 3]| {
        if x >= 0 && y >= 0 && x < i64::from(w) && y < i64::from(h) {
            img.put_pixel(x as u32, y as u32, Rgb(c));
        }
    };
    let line = |img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: [u8; 3]| {
        let n = (x1 - x0).abs().max((y1 - y0).abs()).max(1);
        for k in 0..=n {
            let x = x0 + (x1 - x0) * k / n;
            let y = y0 + (y1 - y0) * k / n;
            put(img, x, y, c);
        }
    };
    let black = [0, 0, 0];
    line(&mut img, to_px(0.0, 0.0), to_px(x_max, 0.0), black);
    line(&mut img, to_px(0.0, 0.0), to_px(0.0, 1.0), black);
    for i in 1..=4 {
        let f = f64::from(i) / 4.0;
        let (x, y) = to_px(0.0, f);
        line(&mut img, (x - 4, y), (x, y), black);
        let (x, y) = to_px(x_max * f, 0.0);
        line(&mut img, (x, y), (x, y + 4), black);
    }
    let mut methods: Vec<&str> = Vec::new();
    for p in points {
        if !methods.contains(&p.method.as_str()) {
            methods.push(&p.method);
        }
    }
    for (k, name) in methods.iter().enumerate() {
        let c = PALETTE[k % PALETTE.len()];
        let mut pts: Vec<(i64, i64)> = points
            .iter()
            .filter(|p| p.method == *name)
            .map(|p| to_px(p.mean_cloud_calls, p.success_rate))
            .collect();
        pts.sort();
        for win in pts.windows(2) {
            line(&mut img, win[0], win[1], c);
        }
        for &(x, y) in &pts {
            for dx in -2..=2 {
                for dy in -2..=2 {
                    put(&mut img, x + dx, y + dy, c);
                }
            }
        }
        // legend swatch
        let (lx, ly) = (i64::from(w) - 120, m + 14 * k as i64);
        for dx in 0..20 {
            for dy in 0..6 {
                put(&mut img, lx + dx, ly + dy, c);
            }
        }
    }
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)
        .map_err(|e| Error::Data(format!("png encoding failed: {e}")))?;
    Ok(out.into_inner())
}
