//! LoRA experts and their training phases.
//!
//! Each expert carries, per module site, a low-rank update `B A` and a gate
//! vector `v`. A site output becomes `W u + B A u` while the expert is trained
//! and `W u + B A u · σ(vᵀu)` while its gate is trained. The phases touch
//! disjoint parameters: expert training never moves `v`, gate training never
//! moves `A` or `B`, and neither ever moves the backbone.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::backbone::{Backbone, SiteAdapter, SiteCall};
use crate::container::{self, Container};
use crate::error::{Error, Result};
use crate::harness;
use crate::optim::{AdamW, OptimizerConfig};
use crate::rng::Rng;
use crate::taskgen::{self, Example, TaskData};
use crate::tensor::Tensor;

/// One site's module: `A ∈ R^{r×n}`, `B ∈ R^{d×r}` and gate `v ∈ R^n`.
#[derive(Clone, Debug, PartialEq)]
pub struct SiteModule {
    pub a: Tensor,
    pub b: Tensor,
    pub gate: Tensor,
}

impl SiteModule {
    pub fn rank(&self) -> usize {
        self.a.shape()[0]
    }

    /// Dense `B A`, shape `[d, n]`.
    pub fn delta(&self) -> Tensor {
        self.b.matmul(&self.a).expect("B and A conform")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainingMode {
    PostHoc,
    Joint,
    Multitask,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertMeta {
    pub task: String,
    pub rank: usize,
    pub seed: u64,
    pub init_stream: String,
    pub mode: TrainingMode,
    pub expert_steps: usize,
    pub gate_steps: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub selected_step: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraExpert {
    pub expert_id: String,
    /// Site ids, aligned with `modules` and with the backbone's site order.
    pub site_ids: Vec<String>,
    pub modules: Vec<SiteModule>,
    pub meta: ExpertMeta,
}

impl LoraExpert {
    pub fn module(&self, site: usize) -> &SiteModule {
        &self.modules[site]
    }

    pub fn gates_are_zero(&self) -> bool {
        self.modules.iter().all(|m| m.gate.data().iter().all(|&x| x == 0.0))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    /// Validation loss is measured every `eval_every` steps for checkpoint selection.
    pub eval_every: usize,
    /// Cap on validation examples used per evaluation.
    pub eval_examples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 300,
            batch_size: 32,
            optimizer: OptimizerConfig::default(),
            eval_every: 50,
            eval_examples: 200,
        }
    }
}

impl TrainConfig {
    pub fn gate_default() -> Self {
        TrainConfig {
            steps: 100,
            ..Default::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    pub eval_steps: Vec<usize>,
    pub validation_losses: Vec<f64>,
    pub selected_step: usize,
    pub final_validation_loss: f64,
    pub wall_clock_secs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultitaskReport {
    pub train: TrainReport,
    /// `(task id, held-in test accuracy)`.
    pub per_task_accuracy: Vec<(String, f64)>,
}

/// Fresh expert: `A ~ N(0, 1/n)`, `B = 0`, `v = 0`, so its initial delta is exactly zero.
pub fn init_expert(backbone: &Backbone, expert_id: &str, task: &str, rank: usize, seed: u64) -> Result<LoraExpert> {
    if rank == 0 {
        return Err(Error::Config("LoRA rank must be at least 1".into()));
    }
    let rng = Rng::new(seed).split("expert").split(expert_id).split("init");
    let mut modules = Vec::with_capacity(backbone.sites().len());
    for site in backbone.sites() {
        if rank > site.n.min(site.d) {
            return Err(Error::Config(format!(
                "rank {rank} exceeds min(n, d) = {} at {}",
                site.n.min(site.d),
                site.site_id
            )));
        }
        let mut r = rng.split(&site.site_id);
        modules.push(SiteModule {
            a: Tensor::randn(&[rank, site.n], 1.0 / (site.n as f64).sqrt(), &mut r),
            b: Tensor::zeros(&[site.d, rank]),
            gate: Tensor::zeros(&[site.n]),
        });
    }
    Ok(LoraExpert {
        expert_id: expert_id.to_string(),
        site_ids: backbone.sites().iter().map(|s| s.site_id.clone()).collect(),
        modules,
        meta: ExpertMeta {
            task: task.to_string(),
            rank,
            seed,
            init_stream: rng.label().to_string(),
            mode: TrainingMode::PostHoc,
            expert_steps: 0,
            gate_steps: 0,
            batch_size: 0,
            optimizer: OptimizerConfig::default(),
            selected_step: None,
        },
    })
}

fn check_site(expert: &LoraExpert, call: &SiteCall<'_>) -> Result<()> {
    let m = expert.modules.get(call.site).ok_or_else(|| Error::UnknownSite(call.info.site_id.clone()))?;
    if m.a.shape()[1] != call.info.n || m.b.shape()[0] != call.info.d {
        return Err(Error::Dimension(format!(
            "expert {} does not fit site {}",
            expert.expert_id, call.info.site_id
        )));
    }
    Ok(())
}

/// `W u + B A u` at a single site.
pub struct LoraHook<'a> {
    module: &'a SiteModule,
}

impl<'a> LoraHook<'a> {
    pub fn new(expert: &'a LoraExpert, site: usize) -> Self {
        LoraHook {
            module: &expert.modules[site],
        }
    }
}

impl SiteAdapter for LoraHook<'_> {
    fn adapt(&self, g: &mut Graph, _: &SiteCall<'_>, u: Var, base: Var) -> Result<Var> {
        let a = g.constant(self.module.a.clone());
        let b = g.constant(self.module.b.clone());
        lora_delta(g, u, base, a, b, None)
    }
}

/// `W u + B A u · σ(vᵀu)` at a single site.
pub struct GatedHook<'a> {
    module: &'a SiteModule,
}

impl<'a> GatedHook<'a> {
    pub fn new(expert: &'a LoraExpert, site: usize) -> Self {
        GatedHook {
            module: &expert.modules[site],
        }
    }
}

impl SiteAdapter for GatedHook<'_> {
    fn adapt(&self, g: &mut Graph, _: &SiteCall<'_>, u: Var, base: Var) -> Result<Var> {
        let a = g.constant(self.module.a.clone());
        let b = g.constant(self.module.b.clone());
        let v = g.constant(self.module.gate.clone());
        lora_delta(g, u, base, a, b, Some(v))
    }
}

fn lora_delta(g: &mut Graph, u: Var, base: Var, a: Var, b: Var, gate: Option<Var>) -> Result<Var> {
    let au = g.matmul_t(u, a, false, true)?;
    let mut delta = g.matmul_t(au, b, false, true)?;
    if let Some(v) = gate {
        let n = g.shape(v)[0];
        let col = g.reshape(v, &[n, 1])?;
        let logit = g.matmul(u, col)?;
        let s = g.sigmoid(logit);
        delta = g.mul(delta, s)?;
    }
    g.add(base, delta)
}

/// Plain LoRA at every site.
pub struct LoraAdapter<'a> {
    pub expert: &'a LoraExpert,
}

impl SiteAdapter for LoraAdapter<'_> {
    fn adapt(&self, g: &mut Graph, call: &SiteCall<'_>, u: Var, base: Var) -> Result<Var> {
        check_site(self.expert, call)?;
        LoraHook::new(self.expert, call.site).adapt(g, call, u, base)
    }
}

/// Gated LoRA at every site.
pub struct GatedAdapter<'a> {
    pub expert: &'a LoraExpert,
}

impl SiteAdapter for GatedAdapter<'_> {
    fn adapt(&self, g: &mut Graph, call: &SiteCall<'_>, u: Var, base: Var) -> Result<Var> {
        check_site(self.expert, call)?;
        GatedHook::new(self.expert, call.site).adapt(g, call, u, base)
    }
}

/// An expert placed on a tape, with the chosen parameter groups trainable.
pub struct BoundExpert {
    pub a: Vec<Var>,
    pub b: Vec<Var>,
    pub v: Vec<Var>,
    gated: bool,
}

impl BoundExpert {
    pub fn bind(g: &mut Graph, expert: &LoraExpert, train_ab: bool, train_gate: bool, gated: bool) -> Self {
        let mut out = BoundExpert {
            a: Vec::new(),
            b: Vec::new(),
            v: Vec::new(),
            gated,
        };
        for m in &expert.modules {
            out.a.push(g.leaf(m.a.clone(), train_ab));
            out.b.push(g.leaf(m.b.clone(), train_ab));
            out.v.push(g.leaf(m.gate.clone(), train_gate));
        }
        out
    }
}

impl SiteAdapter for BoundExpert {
    fn adapt(&self, g: &mut Graph, call: &SiteCall<'_>, u: Var, base: Var) -> Result<Var> {
        let i = call.site;
        let gate = self.gated.then_some(self.v[i]);
        lora_delta(g, u, base, self.a[i], self.b[i], gate)
    }
}

#[derive(Clone, Copy)]
struct Phase {
    train_ab: bool,
    train_gate: bool,
    gated: bool,
    /// Learning rate of the gate group relative to `A`/`B` (joint training only).
    gate_lr_scale: f64,
    select_checkpoint: bool,
}

fn run_phase(
    backbone: &Backbone,
    expert: &mut LoraExpert,
    train: &[Example],
    validation: &[Example],
    cfg: &TrainConfig,
    phase: Phase,
    rng: &mut Rng,
) -> Result<TrainReport> {
    let started = Instant::now();
    let val = &validation[..validation.len().min(cfg.eval_examples)];
    let val_adapter_loss = |e: &LoraExpert| -> Result<f64> {
        if phase.gated {
            backbone.mean_loss(val, &GatedAdapter { expert: e }, 64)
        } else {
            backbone.mean_loss(val, &LoraAdapter { expert: e }, 64)
        }
    };
    let mut ab_opt = AdamW::new(
        cfg.optimizer.clone(),
        expert.modules.iter().flat_map(|m| [m.a.numel(), m.b.numel()]),
    );
    let mut gate_opt = AdamW::new(cfg.optimizer.clone(), expert.modules.iter().map(|m| m.gate.numel()));
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut eval_steps = Vec::new();
    let mut validation_losses = Vec::new();
    let mut best: Option<(f64, usize, Vec<SiteModule>)> = None;

    if cfg.steps == 0 && phase.select_checkpoint && !val.is_empty() {
        eval_steps.push(0);
        validation_losses.push(val_adapter_loss(expert)?);
    }
    for step in 0..cfg.steps {
        let batch = taskgen::sample_batch(train, cfg.batch_size, rng)?;
        let mut g = Graph::new();
        let bound = BoundExpert::bind(&mut g, expert, phase.train_ab, phase.train_gate, phase.gated);
        let out = backbone.forward(&mut g, &batch, &bound)?;
        let loss = g.cross_entropy(out.logits, &batch.targets, &batch.tgt_valid)?;
        let lv = g.value(loss).item();
        if !lv.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss {lv} at step {step} while training {}",
                expert.expert_id
            )));
        }
        losses.push(lv);
        g.backward(loss)?;
        let lr = cfg.optimizer.lr_at(step, cfg.steps);
        if phase.train_ab {
            let grads: Vec<Vec<f64>> = bound
                .a
                .iter()
                .zip(&bound.b)
                .flat_map(|(&a, &b)| [a, b])
                .map(|v| g.take_grad(v).unwrap_or_default())
                .collect();
            let refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
            let mut bufs: Vec<&mut [f64]> = expert
                .modules
                .iter_mut()
                .flat_map(|m| [m.a.data_mut() as *mut [f64], m.b.data_mut() as *mut [f64]])
                // SAFETY: a and b are distinct allocations of distinct modules.
                .map(|p| unsafe { &mut *p })
                .collect();
            ab_opt.step(&mut bufs, &refs, lr)?;
        }
        if phase.train_gate {
            let grads: Vec<Vec<f64>> = bound.v.iter().map(|&v| g.take_grad(v).unwrap_or_default()).collect();
            let refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
            let mut bufs: Vec<&mut [f64]> = expert.modules.iter_mut().map(|m| m.gate.data_mut()).collect();
            gate_opt.step(&mut bufs, &refs, lr * phase.gate_lr_scale)?;
        }
        let done = step + 1;
        if phase.select_checkpoint && !val.is_empty() && (done % cfg.eval_every.max(1) == 0 || done == cfg.steps) {
            let vl = val_adapter_loss(expert)?;
            eval_steps.push(done);
            validation_losses.push(vl);
            if best.as_ref().is_none_or(|(b, _, _)| vl < *b) {
                best = Some((vl, done, expert.modules.clone()));
            }
        }
    }
    let (final_loss, selected) = match best {
        Some((vl, step, modules)) => {
            expert.modules = modules;
            (vl, step)
        }
        None => {
            let vl = if val.is_empty() { f64::NAN } else { val_adapter_loss(expert)? };
            if eval_steps.is_empty() {
                eval_steps.push(cfg.steps);
                validation_losses.push(vl);
            }
            (vl, cfg.steps)
        }
    };
    Ok(TrainReport {
        losses,
        eval_steps,
        validation_losses,
        selected_step: selected,
        final_validation_loss: final_loss,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    })
}

/// Trains `A` and `B` on one task with plain LoRA hooks; keeps the checkpoint
/// with the lowest validation loss.
pub fn train_expert(
    backbone: &Backbone,
    expert: &LoraExpert,
    task: &TaskData,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<(LoraExpert, TrainReport)> {
    let mut e = expert.clone();
    let report = run_phase(
        backbone,
        &mut e,
        &task.train.examples,
        &task.validation.examples,
        cfg,
        Phase {
            train_ab: true,
            train_gate: false,
            gated: false,
            gate_lr_scale: 0.0,
            select_checkpoint: true,
        },
        rng,
    )?;
    e.meta.mode = TrainingMode::PostHoc;
    e.meta.expert_steps = cfg.steps;
    e.meta.batch_size = cfg.batch_size;
    e.meta.optimizer = cfg.optimizer.clone();
    e.meta.selected_step = Some(report.selected_step);
    Ok((e, report))
}

/// Trains only the gate vectors, with `W`, `A` and `B` frozen, on the same data
/// and objective as the expert. The final gate is kept.
pub fn train_gate(
    backbone: &Backbone,
    expert: &LoraExpert,
    task: &TaskData,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<(LoraExpert, TrainReport)> {
    let mut e = expert.clone();
    let report = run_phase(
        backbone,
        &mut e,
        &task.train.examples,
        &task.validation.examples,
        cfg,
        Phase {
            train_ab: false,
            train_gate: true,
            gated: true,
            gate_lr_scale: 1.0,
            select_checkpoint: false,
        },
        rng,
    )?;
    e.meta.gate_steps = cfg.steps;
    Ok((e, report))
}

/// Trains `A`, `B` and `v` together through the gated hook from a fresh expert.
/// `gate_lr_scale` multiplies the gate group's learning rate; at zero the gate
/// is never used and this reduces exactly to [`train_expert`].
pub fn train_joint(
    backbone: &Backbone,
    expert: &LoraExpert,
    task: &TaskData,
    cfg: &TrainConfig,
    gate_lr_scale: f64,
    rng: &mut Rng,
) -> Result<(LoraExpert, TrainReport)> {
    if gate_lr_scale == 0.0 {
        let (mut e, r) = train_expert(backbone, expert, task, cfg, rng)?;
        e.meta.mode = TrainingMode::Joint;
        return Ok((e, r));
    }
    let mut e = expert.clone();
    let report = run_phase(
        backbone,
        &mut e,
        &task.train.examples,
        &task.validation.examples,
        cfg,
        Phase {
            train_ab: true,
            train_gate: true,
            gated: true,
            gate_lr_scale,
            select_checkpoint: true,
        },
        rng,
    )?;
    e.meta.mode = TrainingMode::Joint;
    e.meta.expert_steps = cfg.steps;
    e.meta.gate_steps = cfg.steps;
    e.meta.batch_size = cfg.batch_size;
    e.meta.optimizer = cfg.optimizer.clone();
    e.meta.selected_step = Some(report.selected_step);
    Ok((e, report))
}

/// One LoRA trained on the pooled data of every task, sampled uniformly over
/// examples. Needs all datasets at once, so it only serves as a reference.
pub fn train_multitask_reference(
    backbone: &Backbone,
    expert: &LoraExpert,
    tasks: &[&TaskData],
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<(LoraExpert, MultitaskReport)> {
    if tasks.is_empty() {
        return Err(Error::Contract("multitask training needs at least one task".into()));
    }
    let train: Vec<Example> = tasks.iter().flat_map(|t| t.train.examples.iter().cloned()).collect();
    let validation: Vec<Example> = tasks.iter().flat_map(|t| t.validation.examples.iter().cloned()).collect();
    let mut e = expert.clone();
    let report = run_phase(
        backbone,
        &mut e,
        &train,
        &validation,
        cfg,
        Phase {
            train_ab: true,
            train_gate: false,
            gated: false,
            gate_lr_scale: 0.0,
            select_checkpoint: true,
        },
        rng,
    )?;
    e.meta.mode = TrainingMode::Multitask;
    e.meta.task = tasks.iter().map(|t| t.spec.task_id.as_str()).collect::<Vec<_>>().join("+");
    e.meta.expert_steps = cfg.steps;
    e.meta.batch_size = cfg.batch_size;
    e.meta.optimizer = cfg.optimizer.clone();
    e.meta.selected_step = Some(report.selected_step);
    let adapter = LoraAdapter { expert: &e };
    let per_task_accuracy = tasks
        .iter()
        .map(|t| Ok((t.spec.task_id.clone(), harness::accuracy(backbone, &adapter, &t.test.examples)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok((
        e,
        MultitaskReport {
            train: report,
            per_task_accuracy,
        },
    ))
}

#[derive(Serialize, Deserialize)]
struct BundleMeta {
    expert_id: String,
    rank: usize,
    sites: Vec<String>,
    meta: ExpertMeta,
}

/// Writes an expert bundle: manifest plus `A`, `B`, `v` per site. No data.
pub fn save_expert(expert: &LoraExpert, fingerprint: &str, dir: &Path) -> Result<()> {
    let meta = BundleMeta {
        expert_id: expert.expert_id.clone(),
        rank: expert.meta.rank,
        sites: expert.site_ids.clone(),
        meta: expert.meta.clone(),
    };
    let mut arrays = Vec::with_capacity(expert.modules.len() * 3);
    for (id, m) in expert.site_ids.iter().zip(&expert.modules) {
        arrays.push((format!("{id}/A"), &m.a));
        arrays.push((format!("{id}/B"), &m.b));
        arrays.push((format!("{id}/v"), &m.gate));
    }
    container::write(dir, "expert", Some(fingerprint), &meta, &arrays)
}

/// Loads an expert bundle and checks it against `backbone`.
pub fn load_expert(dir: &Path, backbone: &Backbone) -> Result<LoraExpert> {
    let c: Container<BundleMeta> = container::read(dir, "expert")?;
    c.check_fingerprint(&backbone.fingerprint())?;
    let bad = |reason: String| Error::Bundle {
        path: dir.to_path_buf(),
        reason,
    };
    let mut arrays = c.arrays.into_iter();
    let mut modules = Vec::with_capacity(backbone.sites().len());
    if c.meta.sites.len() != backbone.sites().len() {
        return Err(bad(format!(
            "bundle covers {} sites, backbone has {}",
            c.meta.sites.len(),
            backbone.sites().len()
        )));
    }
    for (id, site) in c.meta.sites.iter().zip(backbone.sites()) {
        if *id != site.site_id {
            return Err(bad(format!("site `{id}` where `{}` was expected", site.site_id)));
        }
        let mut next = |suffix: &str| -> Result<Tensor> {
            match arrays.next() {
                Some((name, t)) if name == format!("{id}/{suffix}") => Ok(t),
                _ => Err(bad(format!("missing array {id}/{suffix}"))),
            }
        };
        let (a, b, gate) = (next("A")?, next("B")?, next("v")?);
        let r = a.shape()[0];
        if a.shape() != [r, site.n] || b.shape() != [site.d, r] || gate.shape() != [site.n] || r == 0 || r > site.n.min(site.d) {
            return Err(bad(format!("shapes at {id} do not fit the site")));
        }
        modules.push(SiteModule { a, b, gate });
    }
    Ok(LoraExpert {
        expert_id: c.meta.expert_id,
        site_ids: c.meta.sites,
        modules,
        meta: c.meta.meta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{BackboneConfig, Batch, Hooks, NoAdapter};

    fn tiny() -> Backbone {
        Backbone::build(BackboneConfig {
            vocab_size: 16,
            d_model: 8,
            n_heads: 2,
            d_ff: 12,
            n_encoder_layers: 1,
            n_decoder_layers: 1,
            max_seq_len: 8,
            seed: 5,
        })
        .unwrap()
    }

    fn logits(bb: &Backbone, adapter: &dyn SiteAdapter) -> Vec<f64> {
        let batch = Batch::pairs(&[(&[2, 3, 4, 5], &[6, 7, 8])]).unwrap();
        let mut g = Graph::new();
        let out = bb.forward(&mut g, &batch, adapter).unwrap();
        g.value(out.logits).data().to_vec()
    }

    #[test]
    fn fresh_expert_is_transparent() {
        let bb = tiny();
        let e = init_expert(&bb, "e", "t", 2, 9).unwrap();
        assert!(e.gates_are_zero());
        assert!(e.modules.iter().all(|m| m.b.data().iter().all(|&x| x == 0.0)));
        assert_eq!(logits(&bb, &NoAdapter), logits(&bb, &LoraAdapter { expert: &e }));
        assert_eq!(init_expert(&bb, "e", "t", 2, 9).unwrap(), e);
        assert_ne!(init_expert(&bb, "e", "t", 2, 10).unwrap().modules[0].a, e.modules[0].a);
    }

    #[test]
    fn rank_bounds() {
        let bb = tiny();
        assert!(init_expert(&bb, "e", "t", 0, 1).is_err());
        assert!(init_expert(&bb, "e", "t", 9, 1).is_err());
        assert!(init_expert(&bb, "e", "t", 8, 1).is_ok());
    }

    #[test]
    fn rank_one_hook_adds_selected_coordinate() {
        // A = e_i^T, B = e_j: output gains u[i] in coordinate j
        let bb = tiny();
        let site = bb.site_by_id("encoder.0.attn.v").unwrap();
        let mut e = init_expert(&bb, "e", "t", 1, 1).unwrap();
        let (i, j) = (3, 5);
        let mut a = Tensor::zeros(&[1, 8]);
        a.data_mut()[i] = 1.0;
        let mut b = Tensor::zeros(&[8, 1]);
        b.data_mut()[j] = 1.0;
        e.modules[site].a = a;
        e.modules[site].b = b;

        let u = Tensor::matrix(2, 8, (0..16).map(|x| x as f64 * 0.5 - 3.0).collect()).unwrap();
        let w = bb.site_weight(site).clone();
        let mut g = Graph::new();
        let uv = g.constant(u.clone());
        let wv = g.constant(w.clone());
        let base = g.matmul_t(uv, wv, false, true).unwrap();
        let call = SiteCall {
            site,
            info: bb.site(site),
            valid: &[true, true],
        };
        let out = LoraHook::new(&e, site).adapt(&mut g, &call, uv, base).unwrap();
        let expect = u.matmul(&w.transpose().unwrap()).unwrap();
        for r in 0..2 {
            for c in 0..8 {
                let extra = if c == j { u.at2(r, i) } else { 0.0 };
                assert_eq!(g.value(out).at2(r, c), expect.at2(r, c) + extra);
            }
        }
    }

    #[test]
    fn gated_hook_halves_at_zero_gate_and_saturates() {
        let bb = tiny();
        let site = 0;
        let mut e = init_expert(&bb, "e", "t", 2, 1).unwrap();
        let mut r = Rng::new(4);
        e.modules[site].b = Tensor::randn(&[8, 2], 1.0, &mut r);
        let u = Tensor::randn(&[3, 8], 1.0, &mut r);
        let run = |e: &LoraExpert, gated: bool| {
            let mut g = Graph::new();
            let uv = g.constant(u.clone());
            let wv = g.constant(bb.site_weight(site).clone());
            let base = g.matmul_t(uv, wv, false, true).unwrap();
            let call = SiteCall {
                site,
                info: bb.site(site),
                valid: &[true; 3],
            };
            let out = if gated {
                GatedHook::new(e, site).adapt(&mut g, &call, uv, base).unwrap()
            } else {
                LoraHook::new(e, site).adapt(&mut g, &call, uv, base).unwrap()
            };
            (g.value(base).data().to_vec(), g.value(out).data().to_vec())
        };
        let (base, plain) = run(&e, false);
        let (_, half) = run(&e, true);
        for ((b, p), h) in base.iter().zip(&plain).zip(&half) {
            assert!((h - (b + 0.5 * (p - b))).abs() < 1e-12);
        }
        // gate aligned with each row's activations at large scale -> sigmoid ~ 1
        let mut big = e.clone();
        let col_sums: Vec<f64> = (0..8).map(|c| (0..3).map(|r| u.at2(r, c)).sum()).collect();
        big.modules[site].gate = Tensor::vector(col_sums.iter().map(|x| x * 1e4).collect());
        let (_, sat) = run(&big, true);
        let logits: Vec<f64> = (0..3).map(|r| (0..8).map(|c| u.at2(r, c) * col_sums[c] * 1e4).sum()).collect();
        for r in 0..3 {
            if logits[r] > 50.0 {
                for c in 0..8 {
                    assert!((sat[r * 8 + c] - plain[r * 8 + c]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn hooks_by_site_id() {
        let bb = tiny();
        let mut e = init_expert(&bb, "e", "t", 2, 1).unwrap();
        let mut r = Rng::new(2);
        for m in &mut e.modules {
            m.b = Tensor::randn(m.b.shape(), 0.5, &mut r);
        }
        let site = bb.site_by_id("decoder.0.ff.in").unwrap();
        let mut hooks = Hooks::new(&bb);
        hooks.insert("decoder.0.ff.in", LoraHook::new(&e, site)).unwrap();
        assert_ne!(logits(&bb, &hooks), logits(&bb, &NoAdapter));
    }
}
