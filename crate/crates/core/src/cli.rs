//! Subcommand implementations. Each command validates its inputs before it
//! creates anything under the output directory, writes artifacts through
//! [`crate::store`], and finishes with a `manifest.json`.
//!
//! Run layout:
//!
//! ```text
//! <out>/manifest.json
//! <out>/config.toml
//! <out>/trajectories/*.jsonl
//! <out>/datasets/*.jsonl
//! <out>/checkpoints/*.ckpt
//! <out>/reports/*.csv, *.png
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::Config;
use crate::envkit::{make_task_set, TaskSpec};
use crate::error::{Error, Result};
use crate::eval::{self, EvalReport, MethodSpec, ParetoPoint, StepAnalysis, Sweep};
use crate::il::{self, IlMetric};
use crate::rl::{self, IterationReport, RlState};
use crate::rollout::{self, RouteMode, Trajectory};
use crate::router::{AnchorParams, RouterParams};
use crate::seed;
use crate::store::{self, Checkpoint, CheckpointStage, RunManifest};

/// Which pure or random policy `rollout` runs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RolloutKind {
    DeviceOnly,
    CloudOnly,
    Random(f64),
}

impl RolloutKind {
    fn file_stem(self) -> String {
        match self {
            RolloutKind::DeviceOnly => "device_only".into(),
            RolloutKind::CloudOnly => "cloud_only".into(),
            RolloutKind::Random(p) => format!("random_{p}"),
        }
    }

    fn mode(self) -> RouteMode<'static> {
        match self {
            RolloutKind::DeviceOnly => RouteMode::DeviceOnly,
            RolloutKind::CloudOnly => RouteMode::CloudOnly,
            RolloutKind::Random(p) => RouteMode::Random(p),
        }
    }

    // Same scopes as difficulty-gap selection, so stored rollouts and
    // in-process ones coincide.
    fn scope(self) -> String {
        match self {
            RolloutKind::DeviceOnly => "device".into(),
            RolloutKind::CloudOnly => "cloud".into(),
            RolloutKind::Random(p) => format!("random-{p}"),
        }
    }
}

/// Collects every artifact written by a command for the manifest.
struct Outputs {
    root: PathBuf,
    written: Vec<PathBuf>,
    inputs: Vec<PathBuf>,
    stages: Vec<String>,
    started: u64,
}

impl Outputs {
    fn create(root: &Path, cfg: &Config) -> Result<Outputs> {
        let mut o = Outputs {
            root: root.to_path_buf(),
            written: Vec::new(),
            inputs: Vec::new(),
            stages: Vec::new(),
            started: store::unix_now(),
        };
        o.write("config.toml", cfg.to_toml_string()?.as_bytes())?;
        Ok(o)
    }

    fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        store::write_atomic(&self.root.join(rel), bytes)?;
        self.written.push(PathBuf::from(rel));
        Ok(())
    }

    fn jsonl<T: Serialize>(&mut self, rel: &str, records: &[T]) -> Result<()> {
        self.write(rel, &store::encode_jsonl(records)?)
    }

    fn checkpoint(&mut self, rel: &str, c: &Checkpoint) -> Result<()> {
        self.write(rel, &store::encode_checkpoint(c)?)
    }

    fn finish(self, cfg: &Config) -> Result<RunManifest> {
        let outputs = store::hash_artifacts(&self.root, &self.written)?;
        let inputs = self
            .inputs
            .iter()
            .map(|p| {
                Ok(store::ArtifactEntry {
                    path: p.to_string_lossy().into_owned(),
                    sha256: store::file_hash(p)?,
                })
            })
            .collect::<Result<_>>()?;
        let manifest = RunManifest {
            schema_version: store::SCHEMA_VERSION,
            run_id: self
                .root
                .file_name()
                .map_or_else(|| "run".into(), |n| n.to_string_lossy().into_owned()),
            config_hash: store::sha256_hex(cfg.to_toml_string()?.as_bytes()),
            stages: self.stages,
            seed: cfg.run.seed,
            eval_seeds: cfg.eval.seeds.clone(),
            inputs,
            outputs,
            started_unix: self.started,
            finished_unix: store::unix_now(),
        };
        manifest.save(&self.root.join("manifest.json"))?;
        Ok(manifest)
    }
}

fn train_tasks(cfg: &Config) -> Result<Vec<TaskSpec>> {
    make_task_set(&cfg.env, cfg.env.train_tasks, cfg.env.train_seed)
}

fn eval_tasks(cfg: &Config) -> Result<Vec<TaskSpec>> {
    make_task_set(&cfg.env, cfg.env.eval_tasks, cfg.env.eval_seed)
}

fn by_task(trajs: Vec<Trajectory>) -> BTreeMap<String, Vec<Trajectory>> {
    let mut m: BTreeMap<String, Vec<Trajectory>> = BTreeMap::new();
    for t in trajs {
        m.entry(t.task_id.clone()).or_default().push(t);
    }
    m
}

fn flatten(groups: Vec<Vec<Trajectory>>) -> Vec<Trajectory> {
    groups.into_iter().flatten().collect()
}

fn run_rollouts(cfg: &Config, tasks: &[TaskSpec], kind: RolloutKind) -> Result<Vec<Trajectory>> {
    Ok(flatten(rollout::collect_all(
        tasks,
        cfg.il.rollouts_per_task,
        &cfg.policies.device,
        &cfg.policies.cloud,
        kind.mode(),
        cfg.run.seed,
        &kind.scope(),
    )?))
}

fn load_checkpoint_input(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::Data(format!("checkpoint {} does not exist", path.display())));
    }
    store::load_checkpoint(path)
}

fn check_arch(cfg: &Config, c: &Checkpoint, path: &Path) -> Result<()> {
    if c.params.arch != cfg.architecture() {
        return Err(Error::Data(format!(
            "checkpoint {} has architecture {:?}, config expects {:?}",
            path.display(),
            c.params.arch,
            cfg.architecture()
        )));
    }
    Ok(())
}

/// `rollout`: pure or random rollouts of the training tasks.
pub fn cmd_rollout(cfg: &Config, kind: RolloutKind, out: &Path) -> Result<RunManifest> {
    if let RolloutKind::Random(p) = kind {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Usage(format!("random probability {p} outside [0, 1]")));
        }
    }
    let tasks = train_tasks(cfg)?;
    let trajs = run_rollouts(cfg, &tasks, kind)?;
    let mut o = Outputs::create(out, cfg)?;
    o.stages.push("rollout".into());
    o.jsonl(&format!("trajectories/{}.jsonl", kind.file_stem()), &trajs)?;
    o.finish(cfg)
}

fn stage_il(
    cfg: &Config,
    tasks: &[TaskSpec],
    device: &BTreeMap<String, Vec<Trajectory>>,
    cloud: &BTreeMap<String, Vec<Trajectory>>,
    o: &mut Outputs,
) -> Result<(il::IlOutcome, Vec<IlMetric>)> {
    let reports = il::diff_reports(tasks, device, cloud, cfg.il.delta)?;
    let selected: Vec<String> = reports
        .iter()
        .filter(|r| r.selected)
        .map(|r| r.task_id.clone())
        .collect();
    o.write("reports/diff_tasks.csv", &csv_of(&reports)?)?;
    let dataset = il::build_il_dataset(
        &selected,
        cloud,
        tasks,
        &cfg.policies.device,
        cfg.il.replay_mode,
        cfg.il.dedupe,
        cfg.run.seed,
    )?;
    o.jsonl("datasets/il.jsonl", &dataset)?;
    let init = RouterParams::init(
        cfg.architecture(),
        &mut seed::stream(cfg.router.init_seed, &["router-init".into()]),
    );
    let outcome = il::train_il(&dataset, init, &cfg.il, cfg.run.seed)?;
    o.write("reports/il_history.csv", &eval::il_history_csv(&outcome.history)?)?;
    o.checkpoint(
        "checkpoints/il.ckpt",
        &Checkpoint {
            params: outcome.params.clone(),
            optimizer: Some(outcome.optimizer.clone()),
            anchor: Some(outcome.anchor.clone()),
            stage: CheckpointStage::Il,
            config_hash: cfg.hash()?,
        },
    )?;
    o.stages.push("il".into());
    let history = outcome.history.clone();
    Ok((outcome, history))
}

fn csv_of<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)
            .map_err(|e| Error::Data(format!("csv encoding failed: {e}")))?;
    }
    w.into_inner()
        .map_err(|e| Error::Data(format!("csv encoding failed: {e}")))
}

fn load_pure_rollouts(dir: &Path, stem: &str) -> Result<Vec<Trajectory>> {
    let p = dir.join(format!("{stem}.jsonl"));
    if !p.exists() {
        return Err(Error::Data(format!("{} does not exist", p.display())));
    }
    store::load_trajectories(&p)
}

/// `train-il`: difficulty-gap selection, replay labels, and IL training.
/// `trajectories` is a directory holding `device_only.jsonl` and
/// `cloud_only.jsonl`; without it both are rolled out first.
pub fn cmd_train_il(cfg: &Config, trajectories: Option<&Path>, out: &Path) -> Result<RunManifest> {
    let tasks = train_tasks(cfg)?;
    let loaded = match trajectories {
        Some(dir) => Some((
            load_pure_rollouts(dir, "device_only")?,
            load_pure_rollouts(dir, "cloud_only")?,
        )),
        None => None,
    };
    let mut o = Outputs::create(out, cfg)?;
    let (device, cloud) = match loaded {
        Some(pair) => {
            let dir = trajectories.expect("loaded implies a directory");
            o.inputs.push(dir.join("device_only.jsonl"));
            o.inputs.push(dir.join("cloud_only.jsonl"));
            pair
        }
        None => {
            let d = run_rollouts(cfg, &tasks, RolloutKind::DeviceOnly)?;
            let c = run_rollouts(cfg, &tasks, RolloutKind::CloudOnly)?;
            o.jsonl("trajectories/device_only.jsonl", &d)?;
            o.jsonl("trajectories/cloud_only.jsonl", &c)?;
            o.stages.push("rollout".into());
            (d, c)
        }
    };
    stage_il(cfg, &tasks, &by_task(device), &by_task(cloud), &mut o)?;
    o.finish(cfg)
}

fn stage_rl(
    cfg: &Config,
    tasks: &[TaskSpec],
    params: RouterParams,
    anchor: AnchorParams,
    o: &mut Outputs,
) -> Result<(RouterParams, Vec<IterationReport>)> {
    let mut state = RlState::new(params, anchor, &cfg.rl);
    let mut reports = Vec::with_capacity(cfg.rl.iterations);
    let mut last_rollouts = Vec::new();
    for it in 1..=cfg.rl.iterations {
        let out = rl::rl_iteration(
            tasks,
            &mut state,
            &cfg.policies.device,
            &cfg.policies.cloud,
            &cfg.rl,
            it,
            cfg.run.seed,
        )?;
        o.jsonl(&format!("datasets/rl_iter_{it:02}.jsonl"), &out.dataset.steps)?;
        reports.push(out.report);
        last_rollouts = out.rollouts;
    }
    o.write("reports/rl_iterations.csv", &eval::iteration_csv(&reports)?)?;
    if !last_rollouts.is_empty() {
        o.jsonl("trajectories/rl_last.jsonl", &flatten(last_rollouts))?;
    }
    o.checkpoint(
        "checkpoints/rl.ckpt",
        &Checkpoint {
            params: state.params.clone(),
            optimizer: Some(state.optimizer.clone()),
            anchor: Some(state.anchor.clone()),
            stage: CheckpointStage::Rl,
            config_hash: cfg.hash()?,
        },
    )?;
    o.stages.push("rl".into());
    Ok((state.params, reports))
}

/// `train-rl`: RL refinement starting from an IL checkpoint. A checkpoint
/// without an anchor is frozen as its own anchor.
pub fn cmd_train_rl(cfg: &Config, checkpoint: &Path, out: &Path) -> Result<RunManifest> {
    let c = load_checkpoint_input(checkpoint)?;
    check_arch(cfg, &c, checkpoint)?;
    let tasks = train_tasks(cfg)?;
    let anchor = c.anchor.clone().unwrap_or_else(|| AnchorParams::freeze(&c.params));
    let mut o = Outputs::create(out, cfg)?;
    o.inputs.push(checkpoint.to_path_buf());
    stage_rl(cfg, &tasks, c.params, anchor, &mut o)?;
    o.finish(cfg)
}

fn router_name(c: &Checkpoint, path: &Path, taken: &[String]) -> String {
    let base = match c.stage {
        CheckpointStage::Init => "router_init".to_string(),
        CheckpointStage::Il => "router_il".to_string(),
        CheckpointStage::Rl => "router_rl".to_string(),
    };
    if taken.contains(&base) {
        format!(
            "{base}_{}",
            path.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned())
        )
    } else {
        base
    }
}

fn stage_eval(cfg: &Config, routers: &[(String, RouterParams)], o: &mut Outputs) -> Result<Vec<EvalReport>> {
    let tasks = eval_tasks(cfg)?;
    let mut methods = vec![
        MethodSpec { name: "device_only", mode: RouteMode::DeviceOnly },
        MethodSpec { name: "cloud_only", mode: RouteMode::CloudOnly },
        MethodSpec { name: "random_0.5", mode: RouteMode::Random(0.5) },
    ];
    for (name, params) in routers {
        methods.push(MethodSpec::router(name, params, cfg.eval.router_threshold));
    }
    let mut reports = methods
        .iter()
        .map(|m| {
            eval::evaluate(
                m,
                &tasks,
                &cfg.policies.device,
                &cfg.policies.cloud,
                &cfg.eval,
                &cfg.cost_model,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let cloud = reports[1].clone();
    for r in &mut reports {
        r.set_cloud_only_reference(&cloud);
    }
    o.write("reports/eval_report.csv", &eval::report_csv(&reports)?)?;
    o.write("reports/eval_rows.csv", &eval::rows_csv(&reports)?)?;
    o.stages.push("eval".into());
    Ok(reports)
}

fn load_routers(cfg: &Config, checkpoints: &[PathBuf]) -> Result<Vec<(String, RouterParams)>> {
    let mut out: Vec<(String, RouterParams)> = Vec::new();
    for p in checkpoints {
        let c = load_checkpoint_input(p)?;
        check_arch(cfg, &c, p)?;
        let taken: Vec<String> = out.iter().map(|(n, _)| n.clone()).collect();
        out.push((router_name(&c, p, &taken), c.params));
    }
    Ok(out)
}

/// `eval`: baselines plus each checkpoint's greedy router on the eval tasks.
pub fn cmd_eval(cfg: &Config, checkpoints: &[PathBuf], out: &Path) -> Result<Vec<EvalReport>> {
    if checkpoints.is_empty() {
        return Err(Error::Usage("eval needs at least one --checkpoint".into()));
    }
    let routers = load_routers(cfg, checkpoints)?;
    let mut o = Outputs::create(out, cfg)?;
    o.inputs.extend(checkpoints.iter().cloned());
    let reports = stage_eval(cfg, &routers, &mut o)?;
    o.finish(cfg)?;
    Ok(reports)
}

fn stage_sweep(cfg: &Config, routers: &[(String, RouterParams)], o: &mut Outputs) -> Result<Vec<ParetoPoint>> {
    let tasks = eval_tasks(cfg)?;
    let mut sweeps = vec![
        Sweep::Random(cfg.eval.random_grid.clone()),
        Sweep::Entropy(cfg.eval.entropy_grid.clone()),
    ];
    for (name, params) in routers {
        sweeps.push(Sweep::Router {
            name,
            params,
            thresholds: cfg.eval.threshold_grid.clone(),
        });
    }
    let points = eval::pareto_sweep(
        &sweeps,
        &tasks,
        &cfg.policies.device,
        &cfg.policies.cloud,
        &cfg.eval,
        &cfg.cost_model,
    )?;
    o.write("reports/pareto.csv", &eval::pareto_csv(&points)?)?;
    o.write("reports/pareto.png", &eval::pareto_png(&points)?)?;
    o.stages.push("sweep".into());
    Ok(points)
}

/// `sweep`: Pareto curves for random and entropy baselines and for each
/// checkpoint's threshold grid.
pub fn cmd_sweep(cfg: &Config, checkpoints: &[PathBuf], out: &Path) -> Result<Vec<ParetoPoint>> {
    let routers = load_routers(cfg, checkpoints)?;
    let mut o = Outputs::create(out, cfg)?;
    o.inputs.extend(checkpoints.iter().cloned());
    let points = stage_sweep(cfg, &routers, &mut o)?;
    o.finish(cfg)?;
    Ok(points)
}

fn stage_analyze(cfg: &Config, cloud: &[Trajectory], o: &mut Outputs) -> Result<StepAnalysis> {
    let mut tasks = train_tasks(cfg)?;
    tasks.extend(eval_tasks(cfg)?);
    let a = eval::analyze_steps(
        cloud,
        &tasks,
        &cfg.policies.device,
        cfg.eval.replay_mode,
        &mut seed::stream(cfg.run.seed, &["analyze".into()]),
    )?;
    o.write("reports/step_analysis.csv", &eval::step_analysis_csv(&a)?)?;
    o.stages.push("analyze".into());
    Ok(a)
}

/// `analyze`: replay statistics of cloud-only trajectories. `trajectories`
/// is a JSONL file or a directory holding `cloud_only.jsonl`; without it the
/// cloud rollouts are generated.
pub fn cmd_analyze(cfg: &Config, trajectories: Option<&Path>, out: &Path) -> Result<StepAnalysis> {
    let loaded = match trajectories {
        Some(p) if p.is_dir() => Some((p.join("cloud_only.jsonl"), load_pure_rollouts(p, "cloud_only")?)),
        Some(p) => {
            if !p.exists() {
                return Err(Error::Data(format!("{} does not exist", p.display())));
            }
            Some((p.to_path_buf(), store::load_trajectories(p)?))
        }
        None => None,
    };
    let mut o = Outputs::create(out, cfg)?;
    let cloud = match loaded {
        Some((path, t)) => {
            o.inputs.push(path);
            t
        }
        None => {
            let t = run_rollouts(cfg, &train_tasks(cfg)?, RolloutKind::CloudOnly)?;
            o.jsonl("trajectories/cloud_only.jsonl", &t)?;
            t
        }
    };
    let a = stage_analyze(cfg, &cloud, &mut o)?;
    o.finish(cfg)?;
    Ok(a)
}

/// Everything `pipeline` computed, for callers that want the numbers
/// without re-reading the CSVs.
pub struct PipelineSummary {
    pub manifest: RunManifest,
    pub il_history: Vec<IlMetric>,
    pub rl_iterations: Vec<IterationReport>,
    pub reports: Vec<EvalReport>,
    pub pareto: Vec<ParetoPoint>,
    pub analysis: StepAnalysis,
    pub il_params: RouterParams,
    pub rl_params: RouterParams,
}

impl PipelineSummary {
    pub fn report(&self, method: &str) -> Option<&EvalReport> {
        self.reports.iter().find(|r| r.method == method)
    }
}

/// `pipeline`: rollout, IL, RL, eval, sweep, and analysis into one run
/// directory with one manifest.
pub fn cmd_pipeline(cfg: &Config, out: &Path) -> Result<PipelineSummary> {
    cfg.validate()?;
    let tasks = train_tasks(cfg)?;
    let mut o = Outputs::create(out, cfg)?;
    let device = run_rollouts(cfg, &tasks, RolloutKind::DeviceOnly)?;
    let cloud = run_rollouts(cfg, &tasks, RolloutKind::CloudOnly)?;
    o.jsonl("trajectories/device_only.jsonl", &device)?;
    o.jsonl("trajectories/cloud_only.jsonl", &cloud)?;
    o.stages.push("rollout".into());
    let analysis = stage_analyze(cfg, &cloud, &mut o)?;
    let (il_out, il_history) = stage_il(cfg, &tasks, &by_task(device), &by_task(cloud), &mut o)?;
    let il_params = il_out.params.clone();
    let (rl_params, rl_iterations) = stage_rl(cfg, &tasks, il_out.params, il_out.anchor, &mut o)?;
    let routers = vec![
        ("router_il".to_string(), il_params.clone()),
        ("router_rl".to_string(), rl_params.clone()),
    ];
    let reports = stage_eval(cfg, &routers, &mut o)?;
    let pareto = stage_sweep(cfg, &routers, &mut o)?;
    let manifest = o.finish(cfg)?;
    Ok(PipelineSummary {
        manifest,
        il_history,
        rl_iterations,
        reports,
        pareto,
        analysis,
        il_params,
        rl_params,
    })
}

/// Sizes the global worker pool. Call once, before any command runs.
pub fn set_jobs(jobs: usize) -> Result<()> {
    if jobs == 0 {
        return Err(Error::Usage("--jobs must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build_global()
        .map_err(|e| Error::Usage(format!("cannot size worker pool: {e}")))
}

/// Loads `path`, or the bundled reference config, then applies a seed
/// override.
pub fn resolve_config(path: Option<&Path>, seed: Option<u64>) -> Result<Config> {
    let mut cfg = match path {
        Some(p) => Config::load(p)?,
        None => Config::reference(),
    };
    if let Some(s) = seed {
        cfg.run.seed = s;
        cfg.validate()?;
    }
    Ok(cfg)
}
