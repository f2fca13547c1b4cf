//! End-to-end orchestration: suite → backbone → experts → gates → routers and
//! baselines → evaluation → analysis. Every stage draws from its own named
//! random stream, so the CLI's stage-by-stage path and [`run_seed`] agree.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, PretrainReport};
use crate::baselines::{
    activation_stats, arrow_router, build_avg_act_router, build_index, merge_experts, EmbeddingIndex, MergeMode,
    MergedExpert,
};
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::experts::{
    init_expert, load_expert, save_expert, train_expert, train_gate, train_joint, train_multitask_reference,
    LoraExpert, MultitaskReport, TrainReport,
};
use crate::harness::{
    analyze_routing, emit_report, evaluate_method, score_experts, Artifacts, EvalOptions, EvalReport, ExpertScores,
    Method, ReportFormat, RoutingAnalysis,
};
use crate::rng::Rng;
use crate::routing::{build_phatgoose_router, load_router, save_router, Router, RouterKind};
use crate::taskgen::{generate_suite, load_suite, save_suite, Example, Suite, TaskData};

pub const MULTITASK_ID: &str = "multitask";
/// Report name for learned-gate routing over jointly trained experts.
pub const JOINT_METHOD: &str = "phatgoose-joint";

fn stream(cfg: &PipelineConfig, phase: &str) -> Rng {
    Rng::new(cfg.seed).split(phase)
}

pub fn make_suite(cfg: &PipelineConfig) -> Result<Suite> {
    generate_suite(&cfg.resolved().suite)
}

pub fn pretrain_backbone(cfg: &PipelineConfig, suite: &Suite) -> Result<(Backbone, PretrainReport)> {
    let c = cfg.resolved();
    let mut bb = Backbone::build(c.backbone.clone())?;
    let report = bb.pretrain(
        &suite.pretrain,
        &suite.pretrain_heldout,
        c.pretrain_steps,
        c.pretrain_batch,
        &c.pretrain_optimizer,
        &mut stream(cfg, "pretrain"),
    )?;
    Ok((bb, report))
}

pub fn fresh_expert(cfg: &PipelineConfig, bb: &Backbone, id: &str) -> Result<LoraExpert> {
    init_expert(bb, id, id, cfg.rank, cfg.seed)
}

pub fn train_expert_for(cfg: &PipelineConfig, bb: &Backbone, task: &TaskData) -> Result<(LoraExpert, TrainReport)> {
    let id = &task.spec.task_id;
    let e = fresh_expert(cfg, bb, id)?;
    train_expert(bb, &e, task, &cfg.expert, &mut stream(cfg, "train-expert").split(id))
}

pub fn train_gate_for(cfg: &PipelineConfig, bb: &Backbone, expert: &LoraExpert, task: &TaskData) -> Result<(LoraExpert, TrainReport)> {
    train_gate(bb, expert, task, &cfg.gate, &mut stream(cfg, "train-gate").split(&task.spec.task_id))
}

pub fn train_joint_for(cfg: &PipelineConfig, bb: &Backbone, task: &TaskData) -> Result<(LoraExpert, TrainReport)> {
    let id = &task.spec.task_id;
    let e = fresh_expert(cfg, bb, id)?;
    train_joint(bb, &e, task, &cfg.joint, cfg.joint_gate_lr_scale, &mut stream(cfg, "train-joint").split(id))
}

pub fn train_multitask_for(cfg: &PipelineConfig, bb: &Backbone, suite: &Suite) -> Result<(LoraExpert, MultitaskReport)> {
    let e = fresh_expert(cfg, bb, MULTITASK_ID)?;
    let tasks: Vec<&TaskData> = suite.held_in().collect();
    train_multitask_reference(bb, &e, &tasks, &cfg.multitask, &mut stream(cfg, "train-multitask"))
}

fn training_sets<'a>(suite: &'a Suite, experts: &[&LoraExpert]) -> Result<Vec<&'a [Example]>> {
    experts
        .iter()
        .map(|e| {
            suite
                .task(&e.meta.task)
                .map(|t| t.train.examples.as_slice())
                .ok_or_else(|| Error::MissingArtifact(format!("training data of task {}", e.meta.task)))
        })
        .collect()
}

pub fn build_router_kind(cfg: &PipelineConfig, bb: &Backbone, kind: RouterKind, experts: &[&LoraExpert], suite: &Suite) -> Result<Router> {
    match kind {
        RouterKind::Phatgoose => build_phatgoose_router(bb, experts, cfg.k),
        RouterKind::Arrow => arrow_router(bb, experts, cfg.arrow_k, cfg.seed),
        RouterKind::AvgAct => {
            let sets = training_sets(suite, experts)?;
            let root = stream(cfg, "avg-act");
            let stats = experts
                .iter()
                .zip(sets)
                .map(|(e, set)| activation_stats(bb, e, set, cfg.avg_act_examples, &mut root.split(&e.expert_id)))
                .collect::<Result<Vec<_>>>()?;
            build_avg_act_router(bb, &stats, cfg.k)
        }
    }
}

pub fn build_index_for(cfg: &PipelineConfig, bb: &Backbone, experts: &[&LoraExpert], suite: &Suite) -> Result<EmbeddingIndex> {
    let sets = training_sets(suite, experts)?;
    let pool: Vec<(&str, &[Example])> = experts.iter().map(|e| e.expert_id.as_str()).zip(sets).collect();
    build_index(bb, &pool, cfg.index_per_expert, &mut stream(cfg, "index"))
}

pub fn eval_options(cfg: &PipelineConfig, k: usize) -> EvalOptions {
    EvalOptions {
        k,
        norm: cfg.normalization,
        seed: cfg.seed,
        config: serde_json::to_value(cfg.resolved()).expect("config serializes"),
    }
}

/// Everything one seed of the full pipeline produces.
pub struct SeedRun {
    pub config: PipelineConfig,
    pub suite: Suite,
    pub backbone: Backbone,
    pub pretrain: PretrainReport,
    /// Held-in experts with trained gates, in task order.
    pub experts: Vec<LoraExpert>,
    pub expert_reports: Vec<TrainReport>,
    pub gate_reports: Vec<TrainReport>,
    pub joint_experts: Vec<LoraExpert>,
    pub multitask: LoraExpert,
    pub multitask_report: MultitaskReport,
    pub phatgoose: Router,
    pub avg_act: Router,
    pub arrow: Router,
    pub joint_router: Router,
    pub index: EmbeddingIndex,
    pub merged: MergedExpert,
    pub merged_param_avg: MergedExpert,
    /// Every expert on every dataset (held-in and held-out).
    pub expert_scores: ExpertScores,
    /// All methods on the held-out datasets, in report order.
    pub heldout: Vec<EvalReport>,
    /// Learned-gate routing over jointly trained experts, held-out datasets.
    pub joint_heldout: EvalReport,
    /// Learned-gate routing and the oracle over every dataset.
    pub phatgoose_all: EvalReport,
    pub oracle_all: EvalReport,
    pub analysis: RoutingAnalysis,
}

impl SeedRun {
    pub fn report(&self, method: &str) -> Option<&EvalReport> {
        self.heldout.iter().find(|r| r.method == method)
    }

    pub fn artifacts(&self) -> Artifacts<'_> {
        Artifacts {
            experts: self.experts.iter().collect(),
            phatgoose: Some(&self.phatgoose),
            avg_act: Some(&self.avg_act),
            arrow: Some(&self.arrow),
            index: Some(&self.index),
            merged: Some(&self.merged),
            merged_param_avg: Some(&self.merged_param_avg),
            multitask: Some(&self.multitask),
            expert_scores: Some(&self.expert_scores),
        }
    }
}

/// Runs every stage for `cfg.seed` in memory. `progress` receives one line per stage.
pub fn run_seed(cfg: &PipelineConfig, progress: &mut dyn FnMut(&str)) -> Result<SeedRun> {
    cfg.validate()?;
    let suite = make_suite(cfg)?;
    progress("generated suite");
    let (backbone, pretrain) = pretrain_backbone(cfg, &suite)?;
    progress(&format!(
        "pretrained backbone: held-out loss {:.4} -> {:.4}",
        pretrain.initial_heldout_loss, pretrain.final_heldout_loss
    ));
    let bb = &backbone;
    let mut experts = Vec::new();
    let mut expert_reports = Vec::new();
    let mut gate_reports = Vec::new();
    for task in suite.held_in() {
        let (e, r) = train_expert_for(cfg, bb, task)?;
        let (e, gr) = train_gate_for(cfg, bb, &e, task)?;
        progress(&format!(
            "trained {} (checkpoint {}, validation loss {:.4})",
            e.expert_id, r.selected_step, r.final_validation_loss
        ));
        experts.push(e);
        expert_reports.push(r);
        gate_reports.push(gr);
    }
    let mut joint_experts = Vec::new();
    for task in suite.held_in() {
        joint_experts.push(train_joint_for(cfg, bb, task)?.0);
    }
    progress("trained joint experts");
    let (multitask, multitask_report) = train_multitask_for(cfg, bb, &suite)?;
    progress("trained multitask reference");

    let refs: Vec<&LoraExpert> = experts.iter().collect();
    let joint_refs: Vec<&LoraExpert> = joint_experts.iter().collect();
    let phatgoose = build_router_kind(cfg, bb, RouterKind::Phatgoose, &refs, &suite)?;
    let avg_act = build_router_kind(cfg, bb, RouterKind::AvgAct, &refs, &suite)?;
    let arrow = build_router_kind(cfg, bb, RouterKind::Arrow, &refs, &suite)?;
    let joint_router = build_router_kind(cfg, bb, RouterKind::Phatgoose, &joint_refs, &suite)?;
    let index = build_index_for(cfg, bb, &refs, &suite)?;
    let merged = merge_experts(&refs, MergeMode::ProductAverage)?;
    let merged_param_avg = merge_experts(&refs, MergeMode::ParamAverage)?;
    progress("built routers, index and merged experts");

    let all: Vec<&TaskData> = suite.tasks.iter().collect();
    let heldout: Vec<&TaskData> = suite.held_out().collect();
    let expert_scores = score_experts(bb, &refs, &all, cfg.normalization)?;
    progress("scored every expert on every dataset");

    let mut run = SeedRun {
        config: cfg.clone(),
        backbone: backbone.clone(),
        pretrain,
        experts: experts.clone(),
        expert_reports,
        gate_reports,
        joint_experts: joint_experts.clone(),
        multitask,
        multitask_report,
        phatgoose,
        avg_act,
        arrow,
        joint_router,
        index,
        merged,
        merged_param_avg,
        expert_scores,
        heldout: Vec::new(),
        joint_heldout: placeholder(),
        phatgoose_all: placeholder(),
        oracle_all: placeholder(),
        analysis: RoutingAnalysis {
            datasets: Vec::new(),
            kl: Vec::new(),
            accuracy: Vec::new(),
            pearson: None,
            note: None,
        },
        suite: suite.clone(),
    };
    let art = run.artifacts();
    let mut reports = Vec::new();
    for m in Method::ALL {
        let k = if m == Method::Arrow { cfg.arrow_k } else { cfg.k };
        reports.push(evaluate_method(m, bb, &art, &heldout, &eval_options(cfg, k))?);
        progress(&format!("evaluated {}", m.name()));
    }
    let joint_art = Artifacts {
        experts: joint_refs.clone(),
        phatgoose: Some(&run.joint_router),
        ..Default::default()
    };
    let mut joint = evaluate_method(Method::Phatgoose, bb, &joint_art, &heldout, &eval_options(cfg, cfg.k))?;
    joint.method = JOINT_METHOD.to_string();
    let phatgoose_all = evaluate_method(Method::Phatgoose, bb, &art, &all, &eval_options(cfg, cfg.k))?;
    let oracle_all = evaluate_method(Method::Oracle, bb, &art, &all, &eval_options(cfg, cfg.k))?;
    let analysis = analyze_routing(&phatgoose_all, &oracle_all)?;
    progress("evaluated joint ablation and routing analysis");
    drop(art);
    run.heldout = reports;
    run.joint_heldout = joint;
    run.phatgoose_all = phatgoose_all;
    run.oracle_all = oracle_all;
    run.analysis = analysis;
    Ok(run)
}

fn placeholder() -> EvalReport {
    EvalReport {
        method: String::new(),
        seed: 0,
        k: 0,
        datasets: Vec::new(),
        accuracy: Vec::new(),
        mean: 0.0,
        chosen: Vec::new(),
        routing: Vec::new(),
        runtime_secs: 0.0,
        config: serde_json::Value::Null,
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path, step: &str) -> Result<T> {
    if !path.exists() {
        return Err(Error::MissingArtifact(format!("{} (run `{step}` first)", path.display())));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// On-disk layout of a run directory.
#[derive(Clone, Debug)]
pub struct Workspace {
    pub root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Workspace { root: root.into() }
    }

    pub fn suite_dir(&self) -> PathBuf {
        self.root.join("suite")
    }
    pub fn backbone_dir(&self) -> PathBuf {
        self.root.join("backbone")
    }
    pub fn expert_dir(&self, id: &str) -> PathBuf {
        self.root.join("experts").join(id)
    }
    pub fn joint_dir(&self, id: &str) -> PathBuf {
        self.root.join("joint").join(id)
    }
    pub fn multitask_dir(&self) -> PathBuf {
        self.root.join(MULTITASK_ID)
    }
    pub fn router_dir(&self, name: &str) -> PathBuf {
        self.root.join("routers").join(name)
    }
    pub fn index_dir(&self) -> PathBuf {
        self.root.join("index")
    }
    pub fn merged_dir(&self, mode: MergeMode) -> PathBuf {
        self.root.join(match mode {
            MergeMode::ProductAverage => "merged",
            MergeMode::ParamAverage => "merged-param-avg",
        })
    }
    pub fn reports_dir(&self) -> PathBuf {
        self.root.join("reports")
    }
    pub fn report_path(&self, name: &str) -> PathBuf {
        self.reports_dir().join(format!("{name}.json"))
    }
    pub fn scores_path(&self) -> PathBuf {
        self.root.join("expert_scores.json")
    }
    pub fn analysis_path(&self) -> PathBuf {
        self.root.join("analysis.json")
    }

    pub fn load_suite(&self) -> Result<Suite> {
        let d = self.suite_dir();
        if !d.exists() {
            return Err(Error::MissingArtifact(format!("{} (run `gen-tasks` first)", d.display())));
        }
        load_suite(&d)
    }

    pub fn load_backbone(&self) -> Result<Backbone> {
        let d = self.backbone_dir();
        if !d.exists() {
            return Err(Error::MissingArtifact(format!("{} (run `pretrain` first)", d.display())));
        }
        Backbone::load(&d)
    }

    fn load_pool(&self, bb: &Backbone, suite: &Suite, joint: bool) -> Result<Vec<LoraExpert>> {
        suite
            .held_in()
            .map(|t| {
                let id = &t.spec.task_id;
                let d = if joint { self.joint_dir(id) } else { self.expert_dir(id) };
                if !d.exists() {
                    let step = if joint { "train-joint" } else { "train-expert" };
                    return Err(Error::MissingArtifact(format!("{} (run `{step}` first)", d.display())));
                }
                load_expert(&d, bb)
            })
            .collect()
    }

    pub fn load_experts(&self, bb: &Backbone, suite: &Suite) -> Result<Vec<LoraExpert>> {
        self.load_pool(bb, suite, false)
    }

    pub fn load_joint_experts(&self, bb: &Backbone, suite: &Suite) -> Result<Vec<LoraExpert>> {
        self.load_pool(bb, suite, true)
    }

    pub fn load_router(&self, name: &str, bb: &Backbone, step: &str) -> Result<Router> {
        let d = self.router_dir(name);
        if !d.exists() {
            return Err(Error::MissingArtifact(format!("{} (run `{step}` first)", d.display())));
        }
        load_router(&d, bb)
    }

    fn present(&self, dir: PathBuf) -> Option<PathBuf> {
        dir.exists().then_some(dir)
    }

    /// Loads whatever artifacts exist; methods report the ones they lack.
    pub fn load_available(&self, bb: &Backbone, suite: &Suite, joint: bool) -> Result<Loaded> {
        let experts = match suite.held_in().next() {
            Some(t) if joint && self.joint_dir(&t.spec.task_id).exists() => self.load_joint_experts(bb, suite)?,
            Some(t) if !joint && self.expert_dir(&t.spec.task_id).exists() => self.load_experts(bb, suite)?,
            _ => Vec::new(),
        };
        let router = |name: &str| -> Result<Option<Router>> {
            self.present(self.router_dir(name)).map(|d| load_router(&d, bb)).transpose()
        };
        let merged = |mode| -> Result<Option<MergedExpert>> {
            self.present(self.merged_dir(mode)).map(|d| MergedExpert::load(&d, bb)).transpose()
        };
        let scores = if self.scores_path().exists() {
            Some(read_json(&self.scores_path(), "evaluate --method oracle")?)
        } else {
            None
        };
        Ok(Loaded {
            experts,
            phatgoose: router(if joint { JOINT_METHOD } else { "phatgoose" })?,
            avg_act: router("avg-act")?,
            arrow: router("arrow")?,
            index: self.present(self.index_dir()).map(|d| EmbeddingIndex::load(&d, bb)).transpose()?,
            merged: merged(MergeMode::ProductAverage)?,
            merged_param_avg: merged(MergeMode::ParamAverage)?,
            multitask: self.present(self.multitask_dir()).map(|d| load_expert(&d, bb)).transpose()?,
            expert_scores: scores,
        })
    }

    pub fn save_reports(&self, reports: &[EvalReport]) -> Result<()> {
        for r in reports {
            write_json(&self.report_path(&r.method), r)?;
        }
        Ok(())
    }

    /// Every report in `reports/`, sorted by file name.
    pub fn load_reports(&self) -> Result<Vec<EvalReport>> {
        let dir = self.reports_dir();
        if !dir.exists() {
            return Err(Error::MissingArtifact(format!("{} (run `evaluate` first)", dir.display())));
        }
        let mut paths: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        paths.sort();
        paths.iter().map(|p| read_json(p, "evaluate")).collect()
    }
}

/// Owned counterpart of [`Artifacts`], as read from a [`Workspace`].
#[derive(Default)]
pub struct Loaded {
    pub experts: Vec<LoraExpert>,
    pub phatgoose: Option<Router>,
    pub avg_act: Option<Router>,
    pub arrow: Option<Router>,
    pub index: Option<EmbeddingIndex>,
    pub merged: Option<MergedExpert>,
    pub merged_param_avg: Option<MergedExpert>,
    pub multitask: Option<LoraExpert>,
    pub expert_scores: Option<ExpertScores>,
}

impl Loaded {
    pub fn artifacts(&self) -> Artifacts<'_> {
        Artifacts {
            experts: self.experts.iter().collect(),
            phatgoose: self.phatgoose.as_ref(),
            avg_act: self.avg_act.as_ref(),
            arrow: self.arrow.as_ref(),
            index: self.index.as_ref(),
            merged: self.merged.as_ref(),
            merged_param_avg: self.merged_param_avg.as_ref(),
            multitask: self.multitask.as_ref(),
            expert_scores: self.expert_scores.as_ref(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct TrainingSummary {
    pretrain: PretrainReport,
    experts: Vec<TrainReport>,
    gates: Vec<TrainReport>,
    multitask: MultitaskReport,
}

impl SeedRun {
    /// Writes every artifact and report in the layout the CLI reads.
    pub fn save(&self, ws: &Workspace) -> Result<()> {
        let fp = self.backbone.fingerprint();
        save_suite(&self.suite, &ws.suite_dir())?;
        self.backbone.save(&ws.backbone_dir())?;
        for e in &self.experts {
            save_expert(e, &fp, &ws.expert_dir(&e.expert_id))?;
        }
        for e in &self.joint_experts {
            save_expert(e, &fp, &ws.joint_dir(&e.expert_id))?;
        }
        save_expert(&self.multitask, &fp, &ws.multitask_dir())?;
        save_router(&self.phatgoose, &fp, &ws.router_dir("phatgoose"))?;
        save_router(&self.avg_act, &fp, &ws.router_dir("avg-act"))?;
        save_router(&self.arrow, &fp, &ws.router_dir("arrow"))?;
        save_router(&self.joint_router, &fp, &ws.router_dir(JOINT_METHOD))?;
        self.index.save(&fp, &ws.index_dir())?;
        self.merged.save(&fp, &ws.merged_dir(MergeMode::ProductAverage))?;
        self.merged_param_avg.save(&fp, &ws.merged_dir(MergeMode::ParamAverage))?;
        write_json(&ws.scores_path(), &self.expert_scores)?;
        write_json(
            &ws.root.join("training.json"),
            &TrainingSummary {
                pretrain: self.pretrain.clone(),
                experts: self.expert_reports.clone(),
                gates: self.gate_reports.clone(),
                multitask: self.multitask_report.clone(),
            },
        )?;
        let mut reports = self.heldout.clone();
        reports.push(self.joint_heldout.clone());
        ws.save_reports(&reports)?;
        write_json(&ws.analysis_path(), &self.analysis)?;
        fs::write(ws.root.join("config.txt"), self.config.to_kv()).map_err(|e| Error::io(&ws.root, e))?;
        emit_report(&reports, ReportFormat::Csv, &ws.root)?;
        emit_report(&reports, ReportFormat::Json, &ws.root)?;
        Ok(())
    }
}
