//! Evaluation by rank classification, routing-distribution analysis and
//! comparison reports.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{log_sum_exp, Graph};
use crate::backbone::{Backbone, Batch, NoAdapter, SiteAdapter};
use crate::baselines::{best_individual, oracle_route, EmbeddingIndex, MergedExpert};
use crate::error::{Error, Result};
use crate::experts::{LoraAdapter, LoraExpert};
use crate::routing::{RoutedAdapter, Router, RoutingTrace};
use crate::taskgen::{Example, TaskData};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    /// Mean per-token log-likelihood.
    #[default]
    Mean,
    /// Total log-likelihood.
    Sum,
}

/// Examples per forward pass during evaluation.
const EVAL_CHUNK: usize = 16;

/// Log-likelihood score of every choice of every example.
pub fn choice_scores(
    backbone: &Backbone,
    adapter: &dyn SiteAdapter,
    examples: &[&Example],
    norm: Normalization,
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(EVAL_CHUNK) {
        let mut sources = Vec::with_capacity(chunk.len());
        let mut decodes = Vec::new();
        for (i, e) in chunk.iter().enumerate() {
            if e.choices.is_empty() || e.choices.iter().any(|c| c.is_empty()) {
                return Err(Error::Contract("rank classification needs non-empty choices".into()));
            }
            sources.push(e.input.as_slice());
            decodes.extend(e.choices.iter().map(|c| (i, c.as_slice())));
        }
        let batch = Batch::new(&sources, &decodes)?;
        let mut g = Graph::new();
        let fwd = backbone.forward(&mut g, &batch, adapter)?;
        let logits = g.value(fwd.logits);
        let mut scores = vec![0.0; batch.decodes];
        for (j, s) in scores.iter_mut().enumerate() {
            let mut total = 0.0;
            let mut count = 0.0;
            for p in 0..batch.tgt_len {
                let r = j * batch.tgt_len + p;
                if batch.tgt_valid[r] {
                    let row = logits.row(r);
                    total += row[batch.targets[r]] - log_sum_exp(row);
                    count += 1.0;
                }
            }
            *s = match norm {
                Normalization::Mean => total / count,
                Normalization::Sum => total,
            };
        }
        let mut it = scores.into_iter();
        for e in chunk {
            out.push(it.by_ref().take(e.choices.len()).collect());
        }
    }
    Ok(out)
}

/// Index of the highest score; ties go to the lowest index.
pub fn pick(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

pub fn rank_classify(
    backbone: &Backbone,
    adapter: &dyn SiteAdapter,
    input: &[usize],
    choices: &[Vec<usize>],
    norm: Normalization,
) -> Result<usize> {
    if choices.len() < 2 {
        return Err(Error::Contract("rank classification needs at least two choices".into()));
    }
    let e = Example {
        input: input.to_vec(),
        target: choices[0].clone(),
        choices: choices.to_vec(),
    };
    Ok(pick(&choice_scores(backbone, adapter, &[&e], norm)?[0]))
}

pub fn predictions(
    backbone: &Backbone,
    adapter: &dyn SiteAdapter,
    examples: &[&Example],
    norm: Normalization,
) -> Result<Vec<usize>> {
    Ok(choice_scores(backbone, adapter, examples, norm)?.iter().map(|s| pick(s)).collect())
}

fn fraction_correct(examples: &[&Example], preds: &[usize]) -> f64 {
    if examples.is_empty() {
        return 0.0;
    }
    let hits = examples.iter().zip(preds).filter(|(e, &p)| e.gold() == Some(p)).count();
    hits as f64 / examples.len() as f64
}

pub fn accuracy_with(backbone: &Backbone, adapter: &dyn SiteAdapter, examples: &[Example], norm: Normalization) -> Result<f64> {
    let refs: Vec<&Example> = examples.iter().collect();
    let preds = predictions(backbone, adapter, &refs, norm)?;
    Ok(fraction_correct(&refs, &preds))
}

/// Rank-classification accuracy with mean per-token normalization.
pub fn accuracy(backbone: &Backbone, adapter: &dyn SiteAdapter, examples: &[Example]) -> Result<f64> {
    accuracy_with(backbone, adapter, examples, Normalization::Mean)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Phatgoose,
    AvgAct,
    Arrow,
    Retrieval,
    Merged,
    MergedParamAvg,
    Oracle,
    BestIndividual,
    Multitask,
    Base,
}

impl Method {
    /// Fixed report order.
    pub const ALL: [Method; 10] = [
        Method::Phatgoose,
        Method::AvgAct,
        Method::Arrow,
        Method::Retrieval,
        Method::Merged,
        Method::MergedParamAvg,
        Method::Oracle,
        Method::BestIndividual,
        Method::Multitask,
        Method::Base,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Phatgoose => "phatgoose",
            Method::AvgAct => "avg-act",
            Method::Arrow => "arrow",
            Method::Retrieval => "retrieval",
            Method::Merged => "merged",
            Method::MergedParamAvg => "merged-param-avg",
            Method::Oracle => "oracle",
            Method::BestIndividual => "best-individual",
            Method::Multitask => "multitask",
            Method::Base => "base",
        }
    }

    pub fn parse(s: &str) -> Result<Method> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }

    pub fn rank(name: &str) -> usize {
        Method::ALL.iter().position(|m| m.name() == name).unwrap_or(Method::ALL.len())
    }
}

/// Accuracy of every expert's plain LoRA on every dataset; `acc[z][dataset]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertScores {
    pub experts: Vec<String>,
    pub datasets: Vec<String>,
    pub acc: Vec<Vec<f64>>,
}

impl ExpertScores {
    pub fn get(&self, expert: usize, dataset: &str) -> Option<f64> {
        let d = self.datasets.iter().position(|x| x == dataset)?;
        self.acc.get(expert)?.get(d).copied()
    }
}

pub fn score_experts(backbone: &Backbone, experts: &[&LoraExpert], datasets: &[&TaskData], norm: Normalization) -> Result<ExpertScores> {
    let acc = experts
        .iter()
        .map(|e| {
            datasets
                .iter()
                .map(|t| accuracy_with(backbone, &LoraAdapter { expert: e }, &t.test.examples, norm))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ExpertScores {
        experts: experts.iter().map(|e| e.expert_id.clone()).collect(),
        datasets: datasets.iter().map(|t| t.spec.task_id.clone()).collect(),
        acc,
    })
}

/// Everything the methods may need. Missing pieces only matter to the
/// methods that use them.
#[derive(Default)]
pub struct Artifacts<'a> {
    pub experts: Vec<&'a LoraExpert>,
    pub phatgoose: Option<&'a Router>,
    pub avg_act: Option<&'a Router>,
    pub arrow: Option<&'a Router>,
    pub index: Option<&'a EmbeddingIndex>,
    pub merged: Option<&'a MergedExpert>,
    pub merged_param_avg: Option<&'a MergedExpert>,
    pub multitask: Option<&'a LoraExpert>,
    pub expert_scores: Option<&'a ExpertScores>,
}

fn need<'b, T>(x: Option<&'b T>, what: &str, step: &str) -> Result<&'b T> {
    x.ok_or_else(|| Error::MissingArtifact(format!("{what} (run `{step}` first)")))
}

/// Token-mean routing probabilities per site and per layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingDistribution {
    pub experts: Vec<String>,
    pub site_ids: Vec<String>,
    pub per_site: Vec<Vec<f64>>,
    pub tokens: Vec<usize>,
    pub layers: Vec<String>,
    pub per_layer: Vec<Vec<f64>>,
    /// Fraction of tokens whose top-ranked expert was each expert, per site.
    pub top1: Vec<Vec<f64>>,
}

/// Layer label of a site id, e.g. `decoder.1` for `decoder.1.cross_attn.q`.
pub fn layer_of(site_id: &str) -> String {
    site_id.splitn(3, '.').take(2).collect::<Vec<_>>().join(".")
}

pub fn routing_distribution(trace: &RoutingTrace) -> Result<RoutingDistribution> {
    if trace.sites.is_empty() || trace.sites.iter().any(|s| s.tokens == 0) {
        return Err(Error::Contract("routing trace is empty".into()));
    }
    let per_site: Vec<Vec<f64>> = trace
        .sites
        .iter()
        .map(|s| s.prob_sum.iter().map(|p| p / s.tokens as f64).collect())
        .collect();
    let top1 = trace
        .sites
        .iter()
        .map(|s| s.top1.iter().map(|&c| c as f64 / s.tokens as f64).collect())
        .collect();
    let mut layers: Vec<String> = Vec::new();
    let mut members: Vec<Vec<usize>> = Vec::new();
    for (i, id) in trace.site_ids.iter().enumerate() {
        let l = layer_of(id);
        match layers.iter().position(|x| *x == l) {
            Some(j) => members[j].push(i),
            None => {
                layers.push(l);
                members.push(vec![i]);
            }
        }
    }
    let per_layer = members
        .iter()
        .map(|m| {
            let mut v = vec![0.0; trace.experts.len()];
            for &i in m {
                v.iter_mut().zip(&per_site[i]).for_each(|(a, b)| *a += b);
            }
            v.iter_mut().for_each(|a| *a /= m.len() as f64);
            v
        })
        .collect();
    Ok(RoutingDistribution {
        experts: trace.experts.clone(),
        site_ids: trace.site_ids.clone(),
        per_site,
        tokens: trace.sites.iter().map(|s| s.tokens).collect(),
        layers,
        per_layer,
        top1,
    })
}

pub const KL_EPS: f64 = 1e-9;

fn smooth(p: &[f64]) -> Vec<f64> {
    let z: f64 = p.iter().map(|x| x + KL_EPS).sum();
    p.iter().map(|x| (x + KL_EPS) / z).collect()
}

/// `Σ p ln(p/q)` after adding ε to every entry of both vectors and renormalizing.
pub fn kl(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() || p.is_empty() {
        return Err(Error::Dimension(format!("KL between lengths {} and {}", p.len(), q.len())));
    }
    let (ps, qs) = (smooth(p), smooth(q));
    Ok(ps.iter().zip(&qs).map(|(a, b)| a * (a / b).ln()).sum::<f64>().max(0.0))
}

/// Per-site KL and its mean over sites.
pub fn kl_divergence(p: &RoutingDistribution, q: &RoutingDistribution) -> Result<(Vec<f64>, f64)> {
    if p.experts != q.experts || p.site_ids != q.site_ids {
        return Err(Error::Contract("routing distributions use different expert or site order".into()));
    }
    let per: Vec<f64> = p.per_site.iter().zip(&q.per_site).map(|(a, b)| kl(a, b)).collect::<Result<_>>()?;
    let mean = per.iter().sum::<f64>() / per.len() as f64;
    Ok((per, mean))
}

/// Distribution that puts all mass on one expert at every site.
pub fn one_hot_distribution(like: &RoutingDistribution, expert: usize) -> RoutingDistribution {
    let z = like.experts.len();
    let hot: Vec<f64> = (0..z).map(|i| if i == expert { 1.0 } else { 0.0 }).collect();
    RoutingDistribution {
        experts: like.experts.clone(),
        site_ids: like.site_ids.clone(),
        per_site: vec![hot.clone(); like.site_ids.len()],
        tokens: like.tokens.clone(),
        layers: like.layers.clone(),
        per_layer: vec![hot.clone(); like.layers.len()],
        top1: vec![hot; like.site_ids.len()],
    }
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Dimension(format!("series of length {} and {}", x.len(), y.len())));
    }
    if x.len() < 3 {
        return Err(Error::Undefined("pearson", format!("{} points (need at least 3)", x.len())));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Undefined("pearson", "a series has zero variance".into()));
    }
    Ok(sxy / (sxx.sqrt() * syy.sqrt()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub seed: u64,
    pub k: usize,
    pub datasets: Vec<String>,
    pub accuracy: Vec<f64>,
    pub mean: f64,
    /// Expert applied to each whole dataset, for methods that pick one.
    pub chosen: Vec<Option<String>>,
    pub routing: Vec<Option<RoutingDistribution>>,
    pub runtime_secs: f64,
    pub config: serde_json::Value,
}

impl EvalReport {
    pub fn accuracy_of(&self, dataset: &str) -> Option<f64> {
        self.datasets.iter().position(|d| d == dataset).map(|i| self.accuracy[i])
    }

    /// The report with run-time measurements cleared, for reproducibility checks.
    pub fn without_timing(&self) -> EvalReport {
        EvalReport {
            runtime_secs: 0.0,
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub k: usize,
    pub norm: Normalization,
    pub seed: u64,
    pub config: serde_json::Value,
}

fn routed(
    router: &Router,
    experts: &[&LoraExpert],
    k: usize,
    datasets: &[&TaskData],
    backbone: &Backbone,
    norm: Normalization,
) -> Result<(Vec<f64>, Vec<Option<RoutingDistribution>>)> {
    let r = router.with_k(k)?;
    let adapter = RoutedAdapter::new(&r, experts)?.with_trace();
    let mut acc = Vec::new();
    let mut dist = Vec::new();
    for t in datasets {
        acc.push(accuracy_with(backbone, &adapter, &t.test.examples, norm)?);
        let trace = adapter.take_trace().expect("tracing enabled");
        dist.push(Some(routing_distribution(&trace)?));
    }
    Ok((acc, dist))
}

/// Test-split accuracy of `method` on each dataset.
pub fn evaluate_method(
    method: Method,
    backbone: &Backbone,
    art: &Artifacts<'_>,
    datasets: &[&TaskData],
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let started = Instant::now();
    let n = datasets.len();
    let norm = opts.norm;
    let plain = |adapter: &dyn SiteAdapter| -> Result<Vec<f64>> {
        datasets.iter().map(|t| accuracy_with(backbone, adapter, &t.test.examples, norm)).collect()
    };
    let pool = || -> Result<&[&LoraExpert]> {
        if art.experts.is_empty() {
            Err(Error::MissingArtifact("expert pool (run `train-expert` first)".into()))
        } else {
            Ok(&art.experts)
        }
    };
    let mut chosen = vec![None; n];
    let mut routing = vec![None; n];
    let accuracy = match method {
        Method::Base => plain(&NoAdapter)?,
        Method::Phatgoose => {
            let (a, r) = routed(need(art.phatgoose, "phatgoose router", "build-router --kind phatgoose")?, pool()?, opts.k, datasets, backbone, norm)?;
            routing = r;
            a
        }
        Method::AvgAct => {
            let (a, r) = routed(need(art.avg_act, "average-activation router", "build-router --kind avg-act")?, pool()?, opts.k, datasets, backbone, norm)?;
            routing = r;
            a
        }
        Method::Arrow => {
            let (a, r) = routed(need(art.arrow, "arrow router", "build-router --kind arrow")?, pool()?, opts.k, datasets, backbone, norm)?;
            routing = r;
            a
        }
        Method::Retrieval => {
            let index = need(art.index, "retrieval index", "build-index")?;
            let experts = pool()?;
            if index.experts.iter().ne(experts.iter().map(|e| &e.expert_id)) {
                return Err(Error::Contract("retrieval index and expert pool disagree".into()));
            }
            let mut acc = Vec::with_capacity(n);
            for t in datasets {
                let route = index.route_examples(backbone, &t.test.examples)?;
                let mut preds = vec![0; route.len()];
                for (z, e) in experts.iter().enumerate() {
                    let members: Vec<usize> = (0..route.len()).filter(|&i| route[i] == z).collect();
                    if members.is_empty() {
                        continue;
                    }
                    let refs: Vec<&Example> = members.iter().map(|&i| &t.test.examples[i]).collect();
                    let p = predictions(backbone, &LoraAdapter { expert: e }, &refs, norm)?;
                    for (&i, q) in members.iter().zip(p) {
                        preds[i] = q;
                    }
                }
                let refs: Vec<&Example> = t.test.examples.iter().collect();
                acc.push(fraction_correct(&refs, &preds));
            }
            acc
        }
        Method::Merged => plain(need(art.merged, "merged expert", "merge")?)?,
        Method::MergedParamAvg => plain(need(art.merged_param_avg, "parameter-averaged expert", "merge --param-avg")?)?,
        Method::Multitask => plain(&LoraAdapter {
            expert: need(art.multitask, "multitask expert", "train-multitask")?,
        })?,
        Method::Oracle | Method::BestIndividual => {
            let scores = need(art.expert_scores, "per-expert scores", "evaluate --method oracle")?;
            let cols = datasets
                .iter()
                .map(|t| {
                    scores
                        .datasets
                        .iter()
                        .position(|d| *d == t.spec.task_id)
                        .ok_or_else(|| Error::MissingArtifact(format!("expert scores for {}", t.spec.task_id)))
                })
                .collect::<Result<Vec<_>>>()?;
            let table: Vec<Vec<f64>> = scores.acc.iter().map(|row| cols.iter().map(|&c| row[c]).collect()).collect();
            if method == Method::Oracle {
                (0..n)
                    .map(|d| {
                        let col: Vec<f64> = table.iter().map(|r| r[d]).collect();
                        let z = oracle_route(&col)?;
                        chosen[d] = Some(scores.experts[z].clone());
                        Ok(col[z])
                    })
                    .collect::<Result<Vec<_>>>()?
            } else {
                let z = best_individual(&table)?;
                chosen = vec![Some(scores.experts[z].clone()); n];
                table[z].clone()
            }
        }
    };
    let mean = if n == 0 { 0.0 } else { accuracy.iter().sum::<f64>() / n as f64 };
    Ok(EvalReport {
        method: method.name().to_string(),
        seed: opts.seed,
        k: opts.k,
        datasets: datasets.iter().map(|t| t.spec.task_id.clone()).collect(),
        accuracy,
        mean,
        chosen,
        routing,
        runtime_secs: started.elapsed().as_secs_f64(),
        config: opts.config.clone(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingAnalysis {
    pub datasets: Vec<String>,
    /// Mean-over-sites KL from the routed distribution to the oracle's one-hot choice.
    pub kl: Vec<f64>,
    pub accuracy: Vec<f64>,
    /// `None` when undefined (fewer than 3 datasets or a constant series).
    pub pearson: Option<f64>,
    pub note: Option<String>,
}

/// Relates how far routing strays from the oracle's expert to accuracy, per dataset.
pub fn analyze_routing(routed: &EvalReport, oracle: &EvalReport) -> Result<RoutingAnalysis> {
    let mut kls = Vec::new();
    let mut accs = Vec::new();
    let mut names = Vec::new();
    for (i, d) in routed.datasets.iter().enumerate() {
        let dist = routed.routing[i]
            .as_ref()
            .ok_or_else(|| Error::MissingArtifact(format!("routing distribution for {d}")))?;
        let j = oracle
            .datasets
            .iter()
            .position(|x| x == d)
            .ok_or_else(|| Error::MissingArtifact(format!("oracle choice for {d}")))?;
        let expert = oracle.chosen[j].as_ref().ok_or_else(|| Error::MissingArtifact(format!("oracle choice for {d}")))?;
        let z = dist
            .experts
            .iter()
            .position(|e| e == expert)
            .ok_or_else(|| Error::Contract(format!("oracle expert {expert} is not in the pool")))?;
        kls.push(kl_divergence(dist, &one_hot_distribution(dist, z))?.1);
        accs.push(routed.accuracy[i]);
        names.push(d.clone());
    }
    let (pearson, note) = match pearson(&kls, &accs) {
        Ok(r) => (Some(r), None),
        Err(e) => (None, Some(e.to_string())),
    };
    Ok(RoutingAnalysis {
        datasets: names,
        kl: kls,
        accuracy: accs,
        pearson,
        note,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

impl ReportFormat {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(Error::Config(format!("unknown report format `{other}`"))),
        }
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Rows in fixed method order (unknown names last), then by name.
pub fn ordered(reports: &[EvalReport]) -> Vec<&EvalReport> {
    let mut v: Vec<&EvalReport> = reports.iter().collect();
    v.sort_by(|a, b| Method::rank(&a.method).cmp(&Method::rank(&b.method)).then(a.method.cmp(&b.method)));
    v
}

/// Comparison table as CSV: one row per method, one column per dataset, then the mean.
pub fn comparison_csv(reports: &[EvalReport]) -> Result<String> {
    let rows = ordered(reports);
    let first = *rows.first().ok_or_else(|| Error::Contract("no reports to emit".into()))?;
    let mut s = format!("method,{},mean\n", first.datasets.join(","));
    for r in rows {
        if r.datasets != first.datasets {
            return Err(Error::Contract(format!("{} was evaluated on different datasets", r.method)));
        }
        let cells: Vec<String> = r.accuracy.iter().map(|a| a.to_string()).collect();
        s.push_str(&format!("{},{},{}\n", r.method, cells.join(","), r.mean));
    }
    Ok(s)
}

/// Parses [`comparison_csv`] output back into `(method, accuracies, mean)`.
pub fn parse_comparison_csv(text: &str) -> Result<(Vec<String>, Vec<(String, Vec<f64>, f64)>)> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().ok_or_else(|| Error::Config("empty csv".into()))?.split(',').collect();
    if header.len() < 2 || header[0] != "method" || header[header.len() - 1] != "mean" {
        return Err(Error::Config("unexpected csv header".into()));
    }
    let datasets = header[1..header.len() - 1].iter().map(|s| s.to_string()).collect();
    let mut rows = Vec::new();
    for line in lines.filter(|l| !l.is_empty()) {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != header.len() {
            return Err(Error::Config(format!("ragged csv row `{line}`")));
        }
        let nums = cells[1..]
            .iter()
            .map(|c| c.parse::<f64>().map_err(|e| Error::Config(format!("bad number `{c}`: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        let (mean, acc) = nums.split_last().expect("non-empty row");
        rows.push((cells[0].to_string(), acc.to_vec(), *mean));
    }
    Ok((datasets, rows))
}

fn matrix_csv(row_names: &[String], cols: &[String], rows: &[Vec<f64>]) -> String {
    let mut s = format!("row,{}\n", cols.join(","));
    for (name, r) in row_names.iter().zip(rows) {
        let cells: Vec<String> = r.iter().map(|x| x.to_string()).collect();
        s.push_str(&format!("{name},{}\n", cells.join(",")));
    }
    s
}

/// Writes the comparison table plus, for routed methods, per-layer and
/// per-site routing matrices under `routing/<method>/<dataset>.*.csv`.
pub fn emit_report(reports: &[EvalReport], format: ReportFormat, out_dir: &Path) -> Result<Vec<PathBuf>> {
    if reports.is_empty() {
        return Err(Error::Contract("no reports to emit".into()));
    }
    let mut written = Vec::new();
    match format {
        ReportFormat::Csv => {
            let p = out_dir.join("comparison.csv");
            write_file(&p, &comparison_csv(reports)?)?;
            written.push(p);
            for r in ordered(reports) {
                for (d, dist) in r.datasets.iter().zip(&r.routing) {
                    let Some(dist) = dist else { continue };
                    let base = out_dir.join("routing").join(&r.method);
                    let p = base.join(format!("{d}.layers.csv"));
                    write_file(&p, &matrix_csv(&dist.layers, &dist.experts, &dist.per_layer))?;
                    written.push(p);
                    let p = base.join(format!("{d}.sites.csv"));
                    write_file(&p, &matrix_csv(&dist.site_ids, &dist.experts, &dist.per_site))?;
                    written.push(p);
                }
            }
        }
        ReportFormat::Json => {
            let rows: BTreeMap<usize, &EvalReport> = ordered(reports).into_iter().enumerate().collect();
            let p = out_dir.join("comparison.json");
            let mut json = serde_json::to_string_pretty(&rows.values().collect::<Vec<_>>())?;
            json.push('\n');
            write_file(&p, &json)?;
            written.push(p);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pick_prefers_lowest_on_ties() {
        assert_eq!(pick(&[-0.5, -0.5]), 0);
        assert_eq!(pick(&[-1.0 / 2.0, -0.8]), 0);
        assert_eq!(pick(&[-0.9, -0.2, -0.2]), 1);
    }

    #[test]
    fn kl_cases() {
        assert!((kl(&[1.0, 0.0], &[0.5, 0.5]).unwrap() - std::f64::consts::LN_2).abs() < 1e-6);
        assert_eq!(kl(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert!(kl(&[0.3], &[0.3, 0.7]).is_err());
    }

    #[test]
    fn pearson_cases() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        assert!(matches!(pearson(&[1.0, 2.0, 3.0], &[5.0, 5.0, 5.0]), Err(Error::Undefined(..))));
    }

    #[test]
    fn layer_labels() {
        assert_eq!(layer_of("decoder.1.cross_attn.q"), "decoder.1");
        assert_eq!(layer_of("encoder.0.ff.in"), "encoder.0");
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(Method::parse(m.name()).unwrap(), m);
        }
        assert!(Method::parse("nope").is_err());
    }
}
