//! Deterministic synthetic multi-task corpora.
//!
//! Vocabulary layout: ids `0..4` are reserved (PAD, BOS, two spares), the next
//! `template_pool` ids form prompt templates, and the rest is cut into one
//! disjoint content slice per held-in task. An input is a two-token template
//! followed by content drawn from the task's slice; the target is the task's
//! rule applied to that content.
//!
//! Held-out tasks come in two flavours: a held-in rule presented under a
//! template never seen in training, and composed tasks whose input is two
//! spans from two different held-in slices, each transformed by its own rule.
//! A single expert can only ever get one of the two spans right.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::Batch;
use crate::error::{Error, Result};
use crate::rng::Rng;

pub const RESERVED: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    TokenPermutation,
    AffixRule,
    CopySpan,
    Composed,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "type")]
pub enum Rule {
    /// `image[i]` is where `slice[i]` goes.
    Permutation { image: Vec<usize> },
    /// Content followed by a fixed suffix.
    Affix { suffix: Vec<usize> },
    /// `content[start..start + len]`.
    CopySpan { start: usize, len: usize },
    /// Component rules applied to consecutive spans of the given lengths.
    Composed { components: Vec<String>, spans: Vec<usize> },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    pub kind: TaskKind,
    pub held_in: bool,
    pub template_id: usize,
    pub template: Vec<usize>,
    /// Content tokens this task draws from.
    pub slice: Vec<usize>,
    pub content_len: usize,
    pub rule: Rule,
    /// Held-in task this one re-parameterizes, for unseen-template held-out tasks.
    pub source_task: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Example {
    pub input: Vec<usize>,
    pub target: Vec<usize>,
    pub choices: Vec<Vec<usize>>,
}

impl Example {
    pub fn gold(&self) -> Option<usize> {
        self.choices.iter().position(|c| *c == self.target)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleSet {
    pub split: Split,
    pub examples: Vec<Example>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskData {
    pub spec: TaskSpec,
    pub train: ExampleSet,
    pub validation: ExampleSet,
    pub test: ExampleSet,
}

impl TaskData {
    pub fn split(&self, split: Split) -> &ExampleSet {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub seed: u64,
    pub n_heldin: usize,
    /// Split evenly between unseen-template and composed tasks (composed gets the smaller half).
    pub n_heldout: usize,
    pub train_size: usize,
    pub validation_size: usize,
    pub test_size: usize,
    pub vocab_size: usize,
    pub template_pool: usize,
    pub slice_size: usize,
    pub content_len: usize,
    pub n_choices: usize,
    pub pretrain_size: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            seed: 0,
            n_heldin: 8,
            n_heldout: 4,
            train_size: 2000,
            validation_size: 200,
            test_size: 200,
            vocab_size: 64,
            template_pool: 8,
            slice_size: 6,
            content_len: 6,
            n_choices: 4,
            pretrain_size: 4000,
        }
    }
}

impl SuiteConfig {
    fn n_composed(&self) -> usize {
        self.n_heldout / 2
    }

    fn validate(&self) -> Result<()> {
        if self.n_heldin < 2 {
            return Err(Error::Config("at least two held-in tasks are required".into()));
        }
        let needed = RESERVED + self.template_pool + self.n_heldin * self.slice_size;
        if needed > self.vocab_size {
            return Err(Error::Config(format!(
                "vocabulary of {} is too small: {} reserved + {} template + {}x{} slice tokens",
                self.vocab_size, RESERVED, self.template_pool, self.n_heldin, self.slice_size
            )));
        }
        let pairs = self.template_pool * self.template_pool.saturating_sub(1);
        if pairs < self.n_heldin + self.n_heldout {
            return Err(Error::Config(format!(
                "template pool of {} yields only {pairs} distinct templates",
                self.template_pool
            )));
        }
        if self.slice_size < 2 || self.content_len < 4 || self.n_choices < 2 {
            return Err(Error::Config("slice_size >= 2, content_len >= 4 and n_choices >= 2 required".into()));
        }
        if self.n_choices > 4 {
            return Err(Error::Config("at most 4 answer choices are supported".into()));
        }
        Ok(())
    }

    fn content_range(&self) -> std::ops::Range<usize> {
        let start = RESERVED + self.template_pool;
        start..start + self.n_heldin * self.slice_size
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Suite {
    pub config: SuiteConfig,
    pub tasks: Vec<TaskData>,
    /// Task-agnostic pretraining corpus: copies and same-domain continuations.
    pub pretrain: Vec<Example>,
    pub pretrain_heldout: Vec<Example>,
}

impl Suite {
    pub fn task(&self, id: &str) -> Option<&TaskData> {
        self.tasks.iter().find(|t| t.spec.task_id == id)
    }

    pub fn held_in(&self) -> impl Iterator<Item = &TaskData> {
        self.tasks.iter().filter(|t| t.spec.held_in)
    }

    pub fn held_out(&self) -> impl Iterator<Item = &TaskData> {
        self.tasks.iter().filter(|t| !t.spec.held_in)
    }

    pub fn specs(&self) -> Vec<&TaskSpec> {
        self.tasks.iter().map(|t| &t.spec).collect()
    }
}

/// Applies `spec`'s rule to `content`, resolving composed components in `specs`.
pub fn apply_rule(spec: &TaskSpec, content: &[usize], specs: &[&TaskSpec]) -> Result<Vec<usize>> {
    match &spec.rule {
        Rule::Permutation { image } => content
            .iter()
            .map(|tok| {
                spec.slice
                    .iter()
                    .position(|s| s == tok)
                    .map(|i| image[i])
                    .ok_or_else(|| Error::Contract(format!("token {tok} outside slice of {}", spec.task_id)))
            })
            .collect(),
        Rule::Affix { suffix } => Ok(content.iter().chain(suffix).copied().collect()),
        Rule::CopySpan { start, len } => content
            .get(*start..start + len)
            .map(<[usize]>::to_vec)
            .ok_or_else(|| Error::Contract(format!("content too short for span of {}", spec.task_id))),
        Rule::Composed { components, spans } => {
            let mut out = Vec::new();
            let mut at = 0;
            for (cid, &len) in components.iter().zip(spans) {
                let comp = specs
                    .iter()
                    .find(|s| &s.task_id == cid)
                    .ok_or_else(|| Error::Contract(format!("unknown component task {cid}")))?;
                out.extend(apply_rule(comp, &content[at..at + len], specs)?);
                at += len;
            }
            Ok(out)
        }
    }
}

/// A wrong answer of the same shape as `spec`'s gold output.
fn distractor(spec: &TaskSpec, content: &[usize], specs: &[&TaskSpec], rng: &mut Rng) -> Result<Vec<usize>> {
    Ok(match &spec.rule {
        Rule::Permutation { .. } => {
            let p = rng.permutation(spec.slice.len());
            let image: Vec<usize> = p.iter().map(|&i| spec.slice[i]).collect();
            let alt = TaskSpec {
                rule: Rule::Permutation { image },
                ..spec.clone()
            };
            apply_rule(&alt, content, specs)?
        }
        Rule::Affix { suffix } => {
            let mut out = content.to_vec();
            out.extend((0..suffix.len()).map(|_| spec.slice[rng.below(spec.slice.len())]));
            out
        }
        Rule::CopySpan { len, .. } => {
            let starts = content.len() - len + 1;
            if starts > 1 && rng.below(4) != 0 {
                let s = 1 + rng.below(starts - 1);
                content[s..s + len].to_vec()
            } else {
                (0..*len).map(|_| spec.slice[rng.below(spec.slice.len())]).collect()
            }
        }
        Rule::Composed { components, spans } => {
            // corrupt a random non-empty subset of the component spans
            let mask = 1 + rng.below((1 << components.len()) - 1);
            let mut out = Vec::new();
            let mut at = 0;
            for (ci, (cid, &len)) in components.iter().zip(spans).enumerate() {
                let comp = specs.iter().find(|s| &s.task_id == cid).expect("validated component");
                let part = &content[at..at + len];
                if mask & (1 << ci) != 0 {
                    out.extend(distractor(comp, part, specs, rng)?);
                } else {
                    out.extend(apply_rule(comp, part, specs)?);
                }
                at += len;
            }
            out
        }
    })
}

fn choices_for(
    spec: &TaskSpec,
    content: &[usize],
    gold: &[usize],
    n_choices: usize,
    specs: &[&TaskSpec],
    rng: &mut Rng,
) -> Result<Vec<Vec<usize>>> {
    let mut seen: HashSet<Vec<usize>> = HashSet::from([gold.to_vec()]);
    let mut wrong = Vec::with_capacity(n_choices - 1);
    let mut attempts = 0;
    while wrong.len() < n_choices - 1 {
        attempts += 1;
        let d = if attempts > 200 {
            // content too degenerate for rule-shaped decoys
            gold.iter().map(|_| spec.slice[rng.below(spec.slice.len())]).collect()
        } else {
            distractor(spec, content, specs, rng)?
        };
        if seen.insert(d.clone()) {
            wrong.push(d);
        }
        if attempts > 10_000 {
            return Err(Error::Config(format!("cannot build {n_choices} distinct choices for {}", spec.task_id)));
        }
    }
    let gold_at = rng.below(n_choices);
    wrong.insert(gold_at, gold.to_vec());
    Ok(wrong)
}

fn sample_content(spec: &TaskSpec, specs: &[&TaskSpec], rng: &mut Rng) -> Vec<usize> {
    match &spec.rule {
        Rule::Composed { components, spans } => components
            .iter()
            .zip(spans)
            .flat_map(|(cid, &len)| {
                let comp = specs.iter().find(|s| &s.task_id == cid).expect("validated component");
                (0..len).map(|_| comp.slice[rng.below(comp.slice.len())]).collect::<Vec<_>>()
            })
            .collect(),
        _ => (0..spec.content_len).map(|_| spec.slice[rng.below(spec.slice.len())]).collect(),
    }
}

fn generate_examples(
    spec: &TaskSpec,
    specs: &[&TaskSpec],
    sizes: [usize; 3],
    n_choices: usize,
    rng: &mut Rng,
) -> Result<[Vec<Example>; 3]> {
    let total: usize = sizes.iter().sum();
    let mut seen = HashSet::new();
    let mut all = Vec::with_capacity(total);
    let mut attempts = 0;
    while all.len() < total {
        attempts += 1;
        if attempts > total * 50 + 1000 {
            return Err(Error::Config(format!(
                "task {} has too few distinct inputs for {total} examples",
                spec.task_id
            )));
        }
        let content = sample_content(spec, specs, rng);
        if !seen.insert(content.clone()) {
            continue;
        }
        let target = apply_rule(spec, &content, specs)?;
        let choices = choices_for(spec, &content, &target, n_choices, specs, rng)?;
        let input = spec.template.iter().chain(&content).copied().collect();
        all.push(Example { input, target, choices });
    }
    let test = all.split_off(sizes[0] + sizes[1]);
    let validation = all.split_off(sizes[0]);
    Ok([all, validation, test])
}

/// Builds the full suite: held-in tasks, held-out tasks and the pretraining corpus.
pub fn generate_suite(config: &SuiteConfig) -> Result<Suite> {
    config.validate()?;
    let root = Rng::new(config.seed).split("taskgen");
    let pool: Vec<usize> = (RESERVED..RESERVED + config.template_pool).collect();
    let mut pairs: Vec<Vec<usize>> = Vec::new();
    for &a in &pool {
        for &b in &pool {
            if a != b {
                pairs.push(vec![a, b]);
            }
        }
    }
    let mut trng = root.split("templates");
    trng.shuffle(&mut pairs);
    let content = config.content_range();
    let kinds = [TaskKind::TokenPermutation, TaskKind::TokenPermutation, TaskKind::AffixRule, TaskKind::CopySpan];
    let span_len = config.content_len / 2;

    let mut specs = Vec::new();
    for i in 0..config.n_heldin {
        let slice: Vec<usize> = (content.start + i * config.slice_size..content.start + (i + 1) * config.slice_size).collect();
        let mut r = root.split(&format!("rule-{i}"));
        let kind = kinds[i % kinds.len()];
        let rule = match kind {
            TaskKind::TokenPermutation => {
                // derangement-free is not required, but avoid the identity
                let mut p = r.permutation(slice.len());
                while p.iter().enumerate().all(|(a, &b)| a == b) {
                    p = r.permutation(slice.len());
                }
                Rule::Permutation {
                    image: p.iter().map(|&j| slice[j]).collect(),
                }
            }
            TaskKind::AffixRule => Rule::Affix {
                suffix: (0..2).map(|_| slice[r.below(slice.len())]).collect(),
            },
            TaskKind::CopySpan => Rule::CopySpan {
                start: 1 + r.below(config.content_len - span_len),
                len: span_len,
            },
            TaskKind::Composed => unreachable!(),
        };
        specs.push(TaskSpec {
            task_id: format!("heldin-{i}"),
            kind,
            held_in: true,
            template_id: i,
            template: pairs[i].clone(),
            slice,
            content_len: config.content_len,
            rule,
            source_task: None,
        });
    }

    let mut hrng = root.split("heldout");
    let n_composed = config.n_composed();
    let n_param = config.n_heldout - n_composed;
    let mut sources: Vec<usize> = (0..config.n_heldin).collect();
    hrng.shuffle(&mut sources);
    for j in 0..n_param {
        let src = specs[sources[j % sources.len()]].clone();
        let tid = config.n_heldin + j;
        specs.push(TaskSpec {
            task_id: format!("heldout-template-{j}"),
            held_in: false,
            template_id: tid,
            template: pairs[tid].clone(),
            source_task: Some(src.task_id.clone()),
            ..src
        });
    }
    let perm_tasks: Vec<usize> = (0..config.n_heldin)
        .filter(|&i| specs[i].kind == TaskKind::TokenPermutation)
        .collect();
    if n_composed > 0 && perm_tasks.len() < 2 {
        return Err(Error::Config("composed tasks need two permutation tasks".into()));
    }
    let mut used = HashSet::new();
    for j in 0..n_composed {
        let (a, b) = loop {
            let a = perm_tasks[hrng.below(perm_tasks.len())];
            let b = perm_tasks[hrng.below(perm_tasks.len())];
            if a != b && (used.len() >= perm_tasks.len() * (perm_tasks.len() - 1) || used.insert((a, b))) {
                break (a, b);
            }
        };
        let tid = config.n_heldin + n_param + j;
        let slice = specs[a].slice.iter().chain(&specs[b].slice).copied().collect();
        specs.push(TaskSpec {
            task_id: format!("heldout-composed-{j}"),
            kind: TaskKind::Composed,
            held_in: false,
            template_id: tid,
            template: pairs[tid].clone(),
            slice,
            content_len: 2 * span_len,
            rule: Rule::Composed {
                components: vec![specs[a].task_id.clone(), specs[b].task_id.clone()],
                spans: vec![span_len, config.content_len - span_len],
            },
            source_task: None,
        });
    }

    let spec_refs: Vec<&TaskSpec> = specs.iter().collect();
    let sizes = [config.train_size, config.validation_size, config.test_size];
    let mut tasks = Vec::with_capacity(specs.len());
    for spec in &specs {
        let mut erng = root.split(&format!("examples/{}", spec.task_id));
        let [train, validation, test] = generate_examples(spec, &spec_refs, sizes, config.n_choices, &mut erng)?;
        tasks.push(TaskData {
            spec: spec.clone(),
            train: ExampleSet { split: Split::Train, examples: train },
            validation: ExampleSet { split: Split::Validation, examples: validation },
            test: ExampleSet { split: Split::Test, examples: test },
        });
    }

    let mut prng = root.split("pretrain");
    let heldout_n = (config.pretrain_size / 20).max(1);
    let mut pretrain: Vec<Example> = (0..config.pretrain_size + heldout_n)
        .map(|_| {
            let template = &pairs[prng.below(pairs.len())];
            let len = 3 + prng.below(config.content_len + 3);
            // most sequences stay inside one domain (slice), the rest roam the whole content range
            let (lo, width) = if prng.below(4) < 3 {
                (content.start + prng.below(config.n_heldin) * config.slice_size, config.slice_size)
            } else {
                (content.start, content.len())
            };
            let draw = |n: usize, r: &mut Rng| -> Vec<usize> { (0..n).map(|_| lo + r.below(width)).collect() };
            let body = draw(len, &mut prng);
            let target = if prng.below(2) == 0 { body.clone() } else { draw(len, &mut prng) };
            Example {
                input: template.iter().chain(&body).copied().collect(),
                target: target.clone(),
                choices: vec![target],
            }
        })
        .collect();
    let pretrain_heldout = pretrain.split_off(config.pretrain_size);

    Ok(Suite {
        config: config.clone(),
        tasks,
        pretrain,
        pretrain_heldout,
    })
}

/// Uniformly samples `batch_size` examples (with replacement) into a padded batch.
pub fn sample_batch(set: &[Example], batch_size: usize, rng: &mut Rng) -> Result<Batch> {
    if set.is_empty() {
        return Err(Error::Contract("cannot sample from an empty example set".into()));
    }
    let picked: Vec<&Example> = (0..batch_size.max(1)).map(|_| &set[rng.below(set.len())]).collect();
    Batch::from_examples(&picked)
}

#[derive(Serialize, Deserialize)]
struct SuiteManifest {
    format_version: u32,
    config: SuiteConfig,
    specs: Vec<TaskSpec>,
    files: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct Line<'a> {
    input: std::borrow::Cow<'a, [usize]>,
    target: std::borrow::Cow<'a, [usize]>,
    choices: std::borrow::Cow<'a, [Vec<usize>]>,
}

fn write_jsonl(path: &Path, examples: &[Example]) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    for ex in examples {
        let line = Line {
            input: (&ex.input[..]).into(),
            target: (&ex.target[..]).into(),
            choices: (&ex.choices[..]).into(),
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_jsonl(path: &Path) -> Result<Vec<Example>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let l: Line = serde_json::from_str(&line)?;
        out.push(Example {
            input: l.input.into_owned(),
            target: l.target.into_owned(),
            choices: l.choices.into_owned(),
        });
    }
    Ok(out)
}

/// Writes `suite.json` plus one JSON-lines file per task split.
pub fn save_suite(suite: &Suite, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = BTreeMap::new();
    for t in &suite.tasks {
        for split in Split::ALL {
            let name = format!("{}.{}.jsonl", t.spec.task_id, split.name());
            write_jsonl(&dir.join(&name), &t.split(split).examples)?;
            files.insert(format!("{}/{}", t.spec.task_id, split.name()), name);
        }
    }
    write_jsonl(&dir.join("pretrain.train.jsonl"), &suite.pretrain)?;
    write_jsonl(&dir.join("pretrain.heldout.jsonl"), &suite.pretrain_heldout)?;
    let manifest = SuiteManifest {
        format_version: crate::container::FORMAT_VERSION,
        config: suite.config.clone(),
        specs: suite.tasks.iter().map(|t| t.spec.clone()).collect(),
        files,
    };
    let path = dir.join("suite.json");
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

pub fn load_suite(dir: &Path) -> Result<Suite> {
    let path = dir.join("suite.json");
    if !path.exists() {
        return Err(Error::MissingArtifact(format!(
            "{} (run `gen-tasks` first)",
            path.display()
        )));
    }
    let raw = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let m: SuiteManifest = serde_json::from_slice(&raw)?;
    if m.format_version != crate::container::FORMAT_VERSION {
        return Err(Error::Version {
            expected: crate::container::FORMAT_VERSION,
            found: m.format_version,
        });
    }
    let mut tasks = Vec::with_capacity(m.specs.len());
    for spec in m.specs {
        let load = |split: Split| -> Result<ExampleSet> {
            let key = format!("{}/{}", spec.task_id, split.name());
            let file = m.files.get(&key).ok_or_else(|| Error::Bundle {
                path: path.clone(),
                reason: format!("no file listed for {key}"),
            })?;
            Ok(ExampleSet {
                split,
                examples: read_jsonl(&dir.join(file))?,
            })
        };
        tasks.push(TaskData {
            train: load(Split::Train)?,
            validation: load(Split::Validation)?,
            test: load(Split::Test)?,
            spec,
        });
    }
    Ok(Suite {
        config: m.config,
        tasks,
        pretrain: read_jsonl(&dir.join("pretrain.train.jsonl"))?,
        pretrain_heldout: read_jsonl(&dir.join("pretrain.heldout.jsonl"))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SuiteConfig {
        SuiteConfig {
            train_size: 60,
            validation_size: 10,
            test_size: 10,
            pretrain_size: 40,
            ..Default::default()
        }
    }

    #[test]
    fn default_structure() {
        let s = generate_suite(&small()).unwrap();
        assert_eq!(s.held_in().count(), 8);
        assert_eq!(s.held_out().count(), 4);
        assert_eq!(s.held_out().filter(|t| t.spec.kind == TaskKind::Composed).count(), 2);
        let templates: HashSet<_> = s.tasks.iter().map(|t| t.spec.template.clone()).collect();
        assert_eq!(templates.len(), s.tasks.len());
        for t in s.held_in() {
            if let Rule::Permutation { image } = &t.spec.rule {
                let mut a = image.clone();
                a.sort();
                assert_eq!(a, t.spec.slice, "permutation must be a bijection on its slice");
            }
        }
    }

    #[test]
    fn gold_appears_exactly_once() {
        let s = generate_suite(&small()).unwrap();
        for t in &s.tasks {
            for split in Split::ALL {
                for ex in &t.split(split).examples {
                    assert_eq!(ex.choices.iter().filter(|c| **c == ex.target).count(), 1);
                    assert_eq!(ex.choices.len(), 4);
                }
            }
        }
    }

    #[test]
    fn too_small_vocab() {
        let c = SuiteConfig {
            vocab_size: 40,
            ..small()
        };
        assert!(matches!(generate_suite(&c), Err(Error::Config(_))));
        let c = SuiteConfig {
            n_heldin: 1,
            ..small()
        };
        assert!(generate_suite(&c).is_err());
    }

    #[test]
    fn sample_batch_sizes_and_masks() {
        let s = generate_suite(&small()).unwrap();
        let mut rng = Rng::new(1);
        let b = sample_batch(&s.tasks[0].train.examples, 1, &mut rng).unwrap();
        assert_eq!((b.sources, b.decodes), (1, 1));
        let b = sample_batch(&s.pretrain, 16, &mut rng).unwrap();
        for e in 0..b.decodes {
            let row = &b.tgt_valid[e * b.tgt_len..(e + 1) * b.tgt_len];
            // valid prefix followed by padded tail
            let n = row.iter().take_while(|v| **v).count();
            assert!(row[n..].iter().all(|v| !v));
            assert!(b.targets[e * b.tgt_len + n..(e + 1) * b.tgt_len].iter().all(|&t| t == crate::backbone::PAD));
        }
        assert!(sample_batch(&[], 4, &mut rng).is_err());
    }

    #[test]
    fn jsonl_roundtrip() {
        let s = generate_suite(&small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_suite(&s, dir.path()).unwrap();
        assert_eq!(load_suite(dir.path()).unwrap(), s);
    }
}
