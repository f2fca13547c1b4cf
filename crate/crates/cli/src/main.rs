//! Command-line front end: one subcommand per pipeline stage, plus `run-all`.
//!
//! Configuration precedence: `--seed`/`--set` flags, then `--config` file,
//! then built-in defaults.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use lora_router::baselines::{merge_experts, MergeMode};
use lora_router::config::PipelineConfig;
use lora_router::experts::save_expert;
use lora_router::harness::{
    analyze_routing, emit_report, evaluate_method, score_experts, EvalReport, Method, ReportFormat,
};
use lora_router::pipeline::{
    build_index_for, build_router_kind, eval_options, make_suite, pretrain_backbone, run_seed,
    train_expert_for, train_gate_for, train_joint_for, train_multitask_for, write_json, Workspace, JOINT_METHOD,
};
use lora_router::routing::{save_router, RouterKind};
use lora_router::taskgen::{save_suite, Suite, TaskData};
use lora_router::{Backbone, Error, Result};

#[derive(Parser)]
#[command(name = "lora-router", version, about = "Post-hoc per-token routing among independently trained LoRA experts")]
struct Cli {
    /// Key-value config file (`key = value` per line, `#` comments).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory holding every artifact and report.
    #[arg(long, global = true, default_value = "run")]
    out_dir: PathBuf,
    /// Extra `key=value` override; repeatable, applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the task suite and pretraining corpus.
    GenTasks,
    /// Pretrain the backbone.
    Pretrain,
    /// Train LoRA experts (all held-in tasks unless --task is given).
    TrainExpert {
        #[arg(long)]
        task: Vec<String>,
    },
    /// Train gate vectors for already-trained experts.
    TrainGate {
        #[arg(long)]
        task: Vec<String>,
    },
    /// Train experts and gates together (ablation).
    TrainJoint {
        #[arg(long)]
        task: Vec<String>,
    },
    /// Train one expert on the union of held-in tasks.
    TrainMultitask,
    /// Assemble a per-site router over the expert pool.
    BuildRouter {
        #[arg(long, value_parser = parse_kind)]
        kind: RouterKind,
        /// Use the jointly trained experts (learned-gate router only).
        #[arg(long)]
        joint: bool,
    },
    /// Build the retrieval index of example embeddings.
    BuildIndex,
    /// Merge the expert pool into a single module.
    Merge {
        /// Average parameters instead of per-expert products.
        #[arg(long)]
        param_avg: bool,
    },
    /// Evaluate one method; writes reports/<method>.json.
    Evaluate {
        /// phatgoose, avg-act, arrow, retrieval, merged, merged-param-avg, oracle, best-individual, multitask or base
        #[arg(long, value_parser = parse_method)]
        method: Method,
        /// Route over the jointly trained experts (phatgoose only).
        #[arg(long)]
        joint: bool,
        #[arg(long, default_value = "held-out", value_parser = ["held-out", "held-in", "all"])]
        split: String,
    },
    /// KL between learned-gate routing and the oracle's choice, and its correlation with accuracy.
    AnalyzeRouting,
    /// Write the comparison table and routing matrices from saved reports.
    Report {
        #[arg(long, default_value = "csv", value_parser = parse_format)]
        format: ReportFormat,
    },
    /// Run every stage in order and write all artifacts and reports.
    RunAll,
}

fn parse_kind(s: &str) -> std::result::Result<RouterKind, String> {
    RouterKind::parse(s).map_err(|e| e.to_string())
}

fn parse_method(s: &str) -> std::result::Result<Method, String> {
    Method::parse(s).map_err(|e| e.to_string())
}

fn parse_format(s: &str) -> std::result::Result<ReportFormat, String> {
    ReportFormat::parse(s).map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut overrides = Vec::new();
    for raw in &cli.overrides {
        let (k, v) = raw
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{raw}`")))?;
        overrides.push((k.trim().to_string(), v.trim().to_string()));
    }
    if let Some(seed) = cli.seed {
        overrides.push(("seed".into(), seed.to_string()));
    }
    PipelineConfig::load(cli.config.as_deref(), &overrides)
}

fn select<'a>(suite: &'a Suite, ids: &[String]) -> Result<Vec<&'a TaskData>> {
    if ids.is_empty() {
        return Ok(suite.held_in().collect());
    }
    ids.iter()
        .map(|id| match suite.task(id) {
            Some(t) if t.spec.held_in => Ok(t),
            Some(_) => Err(Error::Config(format!("task {id} is held out and has no expert"))),
            None => Err(Error::Config(format!("unknown task {id}"))),
        })
        .collect()
}

fn split<'a>(suite: &'a Suite, which: &str) -> Vec<&'a TaskData> {
    match which {
        "held-in" => suite.held_in().collect(),
        "all" => suite.tasks.iter().collect(),
        _ => suite.held_out().collect(),
    }
}

fn stage(ws: &Workspace) -> Result<(Suite, Backbone)> {
    Ok((ws.load_suite()?, ws.load_backbone()?))
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    let ws = Workspace::new(&cli.out_dir);
    let log = |msg: &str| eprintln!("{msg}");
    match &cli.command {
        Command::GenTasks => {
            let suite = make_suite(&cfg)?;
            save_suite(&suite, &ws.suite_dir())?;
            log(&format!("wrote {} tasks to {}", suite.tasks.len(), ws.suite_dir().display()));
        }
        Command::Pretrain => {
            let suite = ws.load_suite()?;
            let (bb, report) = pretrain_backbone(&cfg, &suite)?;
            bb.save(&ws.backbone_dir())?;
            write_json(&ws.root.join("pretrain.json"), &report)?;
            log(&format!(
                "held-out loss {:.4} -> {:.4}",
                report.initial_heldout_loss, report.final_heldout_loss
            ));
        }
        Command::TrainExpert { task } => {
            let (suite, bb) = stage(&ws)?;
            for t in select(&suite, task)? {
                let (e, r) = train_expert_for(&cfg, &bb, t)?;
                save_expert(&e, &bb.fingerprint(), &ws.expert_dir(&e.expert_id))?;
                log(&format!("{}: validation loss {:.4} at step {}", e.expert_id, r.final_validation_loss, r.selected_step));
            }
        }
        Command::TrainGate { task } => {
            let (suite, bb) = stage(&ws)?;
            for t in select(&suite, task)? {
                let dir = ws.expert_dir(&t.spec.task_id);
                if !dir.exists() {
                    return Err(Error::MissingArtifact(format!("{} (run `train-expert` first)", dir.display())));
                }
                let e = lora_router::experts::load_expert(&dir, &bb)?;
                let (e, r) = train_gate_for(&cfg, &bb, &e, t)?;
                save_expert(&e, &bb.fingerprint(), &dir)?;
                log(&format!("{}: gate loss {:.4}", e.expert_id, r.losses.last().copied().unwrap_or(f64::NAN)));
            }
        }
        Command::TrainJoint { task } => {
            let (suite, bb) = stage(&ws)?;
            for t in select(&suite, task)? {
                let (e, r) = train_joint_for(&cfg, &bb, t)?;
                save_expert(&e, &bb.fingerprint(), &ws.joint_dir(&e.expert_id))?;
                log(&format!("{}: validation loss {:.4}", e.expert_id, r.final_validation_loss));
            }
        }
        Command::TrainMultitask => {
            let (suite, bb) = stage(&ws)?;
            let (e, r) = train_multitask_for(&cfg, &bb, &suite)?;
            save_expert(&e, &bb.fingerprint(), &ws.multitask_dir())?;
            write_json(&ws.multitask_dir().join("report.json"), &r)?;
            log(&format!("validation loss {:.4}", r.train.final_validation_loss));
        }
        Command::BuildRouter { kind, joint } => {
            let (suite, bb) = stage(&ws)?;
            if *joint && *kind != RouterKind::Phatgoose {
                return Err(Error::Config("--joint applies to the phatgoose router only".into()));
            }
            let pool = if *joint { ws.load_joint_experts(&bb, &suite)? } else { ws.load_experts(&bb, &suite)? };
            let refs: Vec<_> = pool.iter().collect();
            let router = build_router_kind(&cfg, &bb, *kind, &refs, &suite)?;
            let name = if *joint { JOINT_METHOD } else { kind.name() };
            save_router(&router, &bb.fingerprint(), &ws.router_dir(name))?;
            log(&format!("wrote {}", ws.router_dir(name).display()));
        }
        Command::BuildIndex => {
            let (suite, bb) = stage(&ws)?;
            let pool = ws.load_experts(&bb, &suite)?;
            let refs: Vec<_> = pool.iter().collect();
            let index = build_index_for(&cfg, &bb, &refs, &suite)?;
            index.save(&bb.fingerprint(), &ws.index_dir())?;
            log(&format!("indexed {} embeddings", index.entries.len()));
        }
        Command::Merge { param_avg } => {
            let (suite, bb) = stage(&ws)?;
            let pool = ws.load_experts(&bb, &suite)?;
            let refs: Vec<_> = pool.iter().collect();
            let mode = if *param_avg { MergeMode::ParamAverage } else { MergeMode::ProductAverage };
            merge_experts(&refs, mode)?.save(&bb.fingerprint(), &ws.merged_dir(mode))?;
            log(&format!("wrote {}", ws.merged_dir(mode).display()));
        }
        Command::Evaluate { method, joint, split: which } => {
            let (suite, bb) = stage(&ws)?;
            if *joint && *method != Method::Phatgoose {
                return Err(Error::Config("--joint applies to the phatgoose method only".into()));
            }
            let mut loaded = ws.load_available(&bb, &suite, *joint)?;
            let all: Vec<&TaskData> = suite.tasks.iter().collect();
            if matches!(method, Method::Oracle | Method::BestIndividual) && loaded.expert_scores.is_none() {
                let refs: Vec<_> = loaded.experts.iter().collect();
                if refs.is_empty() {
                    return Err(Error::MissingArtifact("expert pool (run `train-expert` first)".into()));
                }
                let scores = score_experts(&bb, &refs, &all, cfg.normalization)?;
                write_json(&ws.scores_path(), &scores)?;
                loaded.expert_scores = Some(scores);
            }
            let k = if *method == Method::Arrow { cfg.arrow_k } else { cfg.k };
            let datasets = split(&suite, which);
            let mut report = evaluate_method(*method, &bb, &loaded.artifacts(), &datasets, &eval_options(&cfg, k))?;
            if *joint {
                report.method = JOINT_METHOD.to_string();
            }
            write_json(&ws.report_path(&report.method), &report)?;
            print_report(&report);
        }
        Command::AnalyzeRouting => {
            let (suite, bb) = stage(&ws)?;
            let mut loaded = ws.load_available(&bb, &suite, false)?;
            let all: Vec<&TaskData> = suite.tasks.iter().collect();
            if loaded.expert_scores.is_none() {
                let refs: Vec<_> = loaded.experts.iter().collect();
                if refs.is_empty() {
                    return Err(Error::MissingArtifact("expert pool (run `train-expert` first)".into()));
                }
                let scores = score_experts(&bb, &refs, &all, cfg.normalization)?;
                write_json(&ws.scores_path(), &scores)?;
                loaded.expert_scores = Some(scores);
            }
            let art = loaded.artifacts();
            let opts = eval_options(&cfg, cfg.k);
            let routed = evaluate_method(Method::Phatgoose, &bb, &art, &all, &opts)?;
            let oracle = evaluate_method(Method::Oracle, &bb, &art, &all, &opts)?;
            let analysis = analyze_routing(&routed, &oracle)?;
            write_json(&ws.analysis_path(), &analysis)?;
            for ((d, kl), acc) in analysis.datasets.iter().zip(&analysis.kl).zip(&analysis.accuracy) {
                println!("{d}\tkl={kl:.6}\taccuracy={acc:.4}");
            }
            match (analysis.pearson, &analysis.note) {
                (Some(r), _) => println!("pearson r = {r:.4}"),
                (None, Some(note)) => println!("pearson r undefined: {note}"),
                (None, None) => println!("pearson r undefined"),
            }
        }
        Command::Report { format } => {
            let reports = ws.load_reports()?;
            for p in emit_report(&reports, *format, &ws.root)? {
                log(&format!("wrote {}", p.display()));
            }
        }
        Command::RunAll => {
            let run = run_seed(&cfg, &mut |m| log(m))?;
            run.save(&ws)?;
            for r in run.heldout.iter().chain([&run.joint_heldout]) {
                print_report(r);
            }
        }
    }
    Ok(())
}

fn print_report(r: &EvalReport) {
    let cells: Vec<String> = r.datasets.iter().zip(&r.accuracy).map(|(d, a)| format!("{d}={a:.4}")).collect();
    println!("{}\tmean={:.4}\t{}", r.method, r.mean, cells.join("\t"));
}

