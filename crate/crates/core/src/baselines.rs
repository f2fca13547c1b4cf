//! Comparison methods that reuse the same expert pool: average-activation
//! gates, Arrow, nearest-example retrieval, merged experts, oracle and best
//! single expert.

use std::cell::RefCell;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::backbone::{Backbone, Batch, SiteAdapter, SiteCall};
use crate::container::{self, Container};
use crate::error::{Error, Result};
use crate::experts::{LoraAdapter, LoraExpert};
use crate::rng::Rng;
use crate::routing::{Router, RouterKind, Scoring, SiteRouter};
use crate::taskgen::Example;
use crate::tensor::Tensor;

/// Per-site mean input activation of one expert on its own training data.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationStats {
    pub expert_id: String,
    /// `[site][n]`.
    pub means: Vec<Vec<f64>>,
    /// Examples that contributed.
    pub samples: usize,
    /// Token rows that contributed, per site.
    pub tokens: Vec<usize>,
}

struct Summing<A> {
    inner: A,
    sums: RefCell<(Vec<Vec<f64>>, Vec<usize>)>,
}

impl<A: SiteAdapter> SiteAdapter for Summing<A> {
    fn adapt(&self, g: &mut Graph, call: &SiteCall<'_>, u: Var, base: Var) -> Result<Var> {
        {
            let mut s = self.sums.borrow_mut();
            let uv = g.value(u);
            for (r, &ok) in call.valid.iter().enumerate() {
                if ok {
                    s.0[call.site].iter_mut().zip(uv.row(r)).for_each(|(a, b)| *a += b);
                    s.1[call.site] += 1;
                }
            }
        }
        self.inner.adapt(g, call, u, base)
    }
}

/// Mean site inputs over up to `cap` training examples (sampled without
/// replacement), with the expert's own LoRA active as during its training.
pub fn activation_stats(
    backbone: &Backbone,
    expert: &LoraExpert,
    train: &[Example],
    cap: usize,
    rng: &mut Rng,
) -> Result<ActivationStats> {
    if train.is_empty() || cap == 0 {
        return Err(Error::Contract(format!("no activations to average for {}", expert.expert_id)));
    }
    let mut order = rng.permutation(train.len());
    order.truncate(cap.min(train.len()));
    let sites = backbone.sites();
    let adapter = Summing {
        inner: LoraAdapter { expert },
        sums: RefCell::new((sites.iter().map(|s| vec![0.0; s.n]).collect(), vec![0; sites.len()])),
    };
    for chunk in order.chunks(64) {
        let refs: Vec<&Example> = chunk.iter().map(|&i| &train[i]).collect();
        let batch = Batch::from_examples(&refs)?;
        let mut g = Graph::new();
        backbone.forward(&mut g, &batch, &adapter)?;
    }
    let (sums, counts) = adapter.sums.into_inner();
    let means = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &c)| s.into_iter().map(|x| x / c.max(1) as f64).collect())
        .collect();
    Ok(ActivationStats {
        expert_id: expert.expert_id.clone(),
        means,
        samples: order.len(),
        tokens: counts,
    })
}

/// Same router type and inference path as the learned-gate router, with each
/// gate replaced by the expert's mean activation.
pub fn average_activation_router(stats: &[ActivationStats], site: usize, site_id: &str, k: usize) -> Result<SiteRouter> {
    if let Some(s) = stats.iter().find(|s| s.tokens.get(site).copied().unwrap_or(0) == 0) {
        return Err(Error::Contract(format!("empty activation trace for {} at {site_id}", s.expert_id)));
    }
    let rows: Vec<Vec<f64>> = stats.iter().map(|s| s.means[site].clone()).collect();
    SiteRouter::from_rows(
        site_id,
        stats.iter().map(|s| s.expert_id.clone()).collect(),
        &rows,
        k,
        Scoring::Standardized,
    )
}

pub fn build_avg_act_router(backbone: &Backbone, stats: &[ActivationStats], k: usize) -> Result<Router> {
    if stats.is_empty() {
        return Err(Error::Contract("cannot build a router over an empty expert pool".into()));
    }
    let sites = backbone
        .sites()
        .iter()
        .enumerate()
        .map(|(i, s)| average_activation_router(stats, i, &s.site_id, k))
        .collect::<Result<Vec<_>>>()?;
    Ok(Router {
        kind: RouterKind::AvgAct,
        sites,
    })
}

pub const POWER_TOL: f64 = 1e-10;
pub const POWER_MAX_ITERS: usize = 10_000;

/// Top right singular vector of `B A` (unit norm, sign fixed so the largest
/// magnitude entry is positive), by power iteration on `(BA)ᵀ(BA)`.
/// A zero update yields the zero vector.
pub fn top_right_singular_vector(a: &Tensor, b: &Tensor, start: &mut Rng) -> Result<Vec<f64>> {
    let (r, n) = a.dims2()?;
    let (d, rb) = b.dims2()?;
    if r != rb {
        return Err(Error::Dimension(format!("B is {d}x{rb} but A is {r}x{n}")));
    }
    // M x = Aᵀ (Bᵀ B) (A x)
    let btb: Vec<f64> = (0..r)
        .flat_map(|i| (0..r).map(move |j| (i, j)))
        .map(|(i, j)| (0..d).map(|t| b.at2(t, i) * b.at2(t, j)).sum())
        .collect();
    let apply = |x: &[f64]| -> Vec<f64> {
        let ax: Vec<f64> = (0..r).map(|i| a.row(i).iter().zip(x).map(|(p, q)| p * q).sum()).collect();
        let g: Vec<f64> = (0..r).map(|i| (0..r).map(|j| btb[i * r + j] * ax[j]).sum()).collect();
        (0..n).map(|c| (0..r).map(|i| a.at2(i, c) * g[i]).sum()).collect()
    };
    let norm = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut x: Vec<f64> = (0..n).map(|_| start.normal()).collect();
    let nx = norm(&x);
    x.iter_mut().for_each(|v| *v /= nx);
    let mut residual = f64::INFINITY;
    for _ in 0..POWER_MAX_ITERS {
        let mut y = apply(&x);
        let ny = norm(&y);
        if ny == 0.0 {
            return Ok(vec![0.0; n]);
        }
        y.iter_mut().for_each(|v| *v /= ny);
        residual = x.iter().zip(&y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
        x = y;
        if residual < POWER_TOL {
            let big = x.iter().cloned().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
            if big < 0.0 {
                x.iter_mut().for_each(|v| *v = -*v);
            }
            return Ok(x);
        }
    }
    Err(Error::NoConvergence {
        iterations: POWER_MAX_ITERS,
        residual,
    })
}

pub fn arrow_router(backbone: &Backbone, experts: &[&LoraExpert], k: usize, seed: u64) -> Result<Router> {
    if experts.is_empty() {
        return Err(Error::Contract("cannot build a router over an empty expert pool".into()));
    }
    let root = Rng::new(seed).split("arrow");
    let mut sites = Vec::with_capacity(backbone.sites().len());
    for (s, info) in backbone.sites().iter().enumerate() {
        let rows = experts
            .iter()
            .map(|e| {
                let m = e.module(s);
                top_right_singular_vector(&m.a, &m.b, &mut root.split(&e.expert_id).split(&info.site_id))
            })
            .collect::<Result<Vec<_>>>()?;
        sites.push(SiteRouter::from_rows(
            &info.site_id,
            experts.iter().map(|e| e.expert_id.clone()).collect(),
            &rows,
            k,
            Scoring::AbsoluteDot,
        )?);
    }
    Ok(Router {
        kind: RouterKind::Arrow,
        sites,
    })
}

/// Stored example embeddings, each tagged with its expert.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingIndex {
    pub experts: Vec<String>,
    /// `(expert index, embedding)`.
    pub entries: Vec<(usize, Vec<f64>)>,
}

pub const INDEX_PER_EXPERT: usize = 1000;

fn embed_all(backbone: &Backbone, examples: &[&Example]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(64) {
        let sources: Vec<&[usize]> = chunk.iter().map(|e| e.input.as_slice()).collect();
        let decodes: Vec<(usize, &[usize])> = vec![(0, &[crate::backbone::BOS][..])];
        out.extend(backbone.embed(&Batch::new(&sources, &decodes)?)?);
    }
    Ok(out)
}

/// Embeds `min(per_expert, |train|)` random training inputs for every expert.
pub fn build_index(
    backbone: &Backbone,
    pool: &[(&str, &[Example])],
    per_expert: usize,
    rng: &mut Rng,
) -> Result<EmbeddingIndex> {
    let mut entries = Vec::new();
    for (z, (id, train)) in pool.iter().enumerate() {
        let mut order = rng.split(id).permutation(train.len());
        order.truncate(per_expert.min(train.len()));
        let picked: Vec<&Example> = order.iter().map(|&i| &train[i]).collect();
        for e in embed_all(backbone, &picked)? {
            entries.push((z, e));
        }
    }
    if entries.is_empty() {
        return Err(Error::Contract("retrieval index would be empty".into()));
    }
    Ok(EmbeddingIndex {
        experts: pool.iter().map(|(id, _)| id.to_string()).collect(),
        entries,
    })
}

impl EmbeddingIndex {
    /// Expert of the stored example with the highest cosine similarity
    /// (first one on ties).
    pub fn nearest(&self, query: &[f64]) -> Result<usize> {
        let qn = query.iter().map(|x| x * x).sum::<f64>().sqrt();
        if qn == 0.0 {
            return Err(Error::Undefined("cosine similarity", "zero-norm query embedding".into()));
        }
        let mut best = (f64::NEG_INFINITY, 0);
        for (z, e) in &self.entries {
            let en = e.iter().map(|x| x * x).sum::<f64>().sqrt();
            if en == 0.0 {
                continue;
            }
            let cos = e.iter().zip(query).map(|(a, b)| a * b).sum::<f64>() / (en * qn);
            if cos > best.0 {
                best = (cos, *z);
            }
        }
        Ok(best.1)
    }

    /// Expert chosen for each example's input.
    pub fn route_examples(&self, backbone: &Backbone, examples: &[Example]) -> Result<Vec<usize>> {
        let refs: Vec<&Example> = examples.iter().collect();
        embed_all(backbone, &refs)?.iter().map(|q| self.nearest(q)).collect()
    }

    pub fn save(&self, fingerprint: &str, dir: &Path) -> Result<()> {
        let labels = Tensor::vector(self.entries.iter().map(|(z, _)| *z as f64).collect());
        let width = self.entries.first().map_or(0, |e| e.1.len());
        let emb = Tensor::new(
            vec![self.entries.len(), width],
            self.entries.iter().flat_map(|e| e.1.iter().copied()).collect(),
        )?;
        container::write(
            dir,
            "embedding-index",
            Some(fingerprint),
            &self.experts,
            &[("labels".into(), &labels), ("embeddings".into(), &emb)],
        )
    }

    pub fn load(dir: &Path, backbone: &Backbone) -> Result<Self> {
        let c: Container<Vec<String>> = container::read(dir, "embedding-index")?;
        c.check_fingerprint(&backbone.fingerprint())?;
        let bad = |reason: &str| Error::Bundle {
            path: dir.to_path_buf(),
            reason: reason.into(),
        };
        let [(_, labels), (_, emb)] = <[(String, Tensor); 2]>::try_from(c.arrays).map_err(|_| bad("expected labels and embeddings"))?;
        let (rows, _) = emb.dims2()?;
        if labels.numel() != rows {
            return Err(bad("label count differs from embedding count"));
        }
        let entries = labels
            .data()
            .iter()
            .enumerate()
            .map(|(i, &z)| (z as usize, emb.row(i).to_vec()))
            .collect::<Vec<_>>();
        if entries.iter().any(|(z, _)| *z >= c.meta.len()) {
            return Err(bad("label refers to an unknown expert"));
        }
        Ok(EmbeddingIndex {
            experts: c.meta,
            entries,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MergeMode {
    /// Mean of the dense products `B_z A_z`.
    ProductAverage,
    /// Mean `B` times mean `A`.
    ParamAverage,
}

/// Dense per-site delta applied without routing.
#[derive(Clone, Debug, PartialEq)]
pub struct MergedExpert {
    pub mode: MergeMode,
    pub experts: Vec<String>,
    pub site_ids: Vec<String>,
    /// `[d, n]` per site.
    pub deltas: Vec<Tensor>,
}

/// Folds `x` into the mean `acc` of `i` earlier items. Identical inputs leave
/// `acc` bit-for-bit unchanged.
fn running_mean(acc: &mut Tensor, x: &Tensor, i: usize) {
    let k = (i + 1) as f64;
    acc.data_mut().iter_mut().zip(x.data()).for_each(|(m, v)| *m += (v - *m) / k);
}

pub fn merge_experts(experts: &[&LoraExpert], mode: MergeMode) -> Result<MergedExpert> {
    let first = experts.first().ok_or_else(|| Error::Contract("nothing to merge".into()))?;
    if let Some(e) = experts.iter().find(|e| e.site_ids != first.site_ids) {
        return Err(Error::Contract(format!(
            "{} and {} cover different sites",
            first.expert_id, e.expert_id
        )));
    }
    let mut deltas = Vec::with_capacity(first.site_ids.len());
    for s in 0..first.site_ids.len() {
        let delta = match mode {
            MergeMode::ProductAverage => {
                let mut acc = first.module(s).delta();
                for (i, e) in experts.iter().enumerate().skip(1) {
                    let d = e.module(s).delta();
                    if d.shape() != acc.shape() {
                        return Err(Error::Dimension(format!("delta shapes differ at {}", first.site_ids[s])));
                    }
                    running_mean(&mut acc, &d, i);
                }
                acc
            }
            MergeMode::ParamAverage => {
                let mean = |get: &dyn Fn(&LoraExpert) -> &Tensor| -> Result<Tensor> {
                    let mut acc = get(first).clone();
                    for (i, e) in experts.iter().enumerate().skip(1) {
                        let t = get(e);
                        if t.shape() != acc.shape() {
                            return Err(Error::Dimension(format!(
                                "parameter averaging needs equal ranks at {}",
                                first.site_ids[s]
                            )));
                        }
                        running_mean(&mut acc, t, i);
                    }
                    Ok(acc)
                };
                let b = mean(&|e| &e.module(s).b)?;
                let a = mean(&|e| &e.module(s).a)?;
                b.matmul(&a)?
            }
        };
        deltas.push(delta);
    }
    Ok(MergedExpert {
        mode,
        experts: experts.iter().map(|e| e.expert_id.clone()).collect(),
        site_ids: first.site_ids.clone(),
        deltas,
    })
}

impl SiteAdapter for MergedExpert {
    fn adapt(&self, g: &mut Graph, call: &SiteCall<'_>, u: Var, base: Var) -> Result<Var> {
        let d = self
            .deltas
            .get(call.site)
            .ok_or_else(|| Error::UnknownSite(call.info.site_id.clone()))?;
        let dv = g.constant(d.clone());
        let du = g.matmul_t(u, dv, false, true)?;
        g.add(base, du)
    }
}

impl MergedExpert {
    pub fn save(&self, fingerprint: &str, dir: &Path) -> Result<()> {
        let arrays: Vec<(String, &Tensor)> = self.site_ids.iter().cloned().zip(&self.deltas).collect();
        container::write(dir, "merged", Some(fingerprint), &(self.mode, &self.experts), &arrays)
    }

    pub fn load(dir: &Path, backbone: &Backbone) -> Result<Self> {
        let c: Container<(MergeMode, Vec<String>)> = container::read(dir, "merged")?;
        c.check_fingerprint(&backbone.fingerprint())?;
        if c.arrays.len() != backbone.sites().len()
            || c.arrays.iter().zip(backbone.sites()).any(|((n, t), s)| *n != s.site_id || t.shape() != [s.d, s.n])
        {
            return Err(Error::Bundle {
                path: dir.to_path_buf(),
                reason: "merged deltas do not fit the backbone".into(),
            });
        }
        let (site_ids, deltas) = c.arrays.into_iter().unzip();
        Ok(MergedExpert {
            mode: c.meta.0,
            experts: c.meta.1,
            site_ids,
            deltas,
        })
    }
}

/// Index of the maximum; ties go to the lowest index.
fn argmax(xs: &[f64]) -> Result<usize> {
    if xs.is_empty() {
        return Err(Error::Contract("empty score table".into()));
    }
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Best expert on one dataset, given every expert's score there.
pub fn oracle_route(scores: &[f64]) -> Result<usize> {
    argmax(scores)
}

/// Best expert on average; `scores[z][dataset]`.
pub fn best_individual(scores: &[Vec<f64>]) -> Result<usize> {
    let means = scores
        .iter()
        .map(|s| {
            if s.is_empty() {
                Err(Error::Contract("expert without scores".into()))
            } else {
                Ok(s.iter().sum::<f64>() / s.len() as f64)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    argmax(&means)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_singular_vector() {
        let b = Tensor::matrix(2, 1, vec![1.0, 0.0]).unwrap();
        let a = Tensor::matrix(1, 2, vec![0.0, 2.0]).unwrap();
        let v = top_right_singular_vector(&a, &b, &mut Rng::new(1)).unwrap();
        assert!(v[0].abs() < 1e-12 && (v[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_update_gives_zero_gate() {
        let v = top_right_singular_vector(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[4, 2]), &mut Rng::new(1)).unwrap();
        assert_eq!(v, vec![0.0; 3]);
    }

    #[test]
    fn argmax_rules() {
        assert_eq!(oracle_route(&[0.9, 0.5]).unwrap(), 0);
        assert_eq!(oracle_route(&[0.5, 0.5]).unwrap(), 0);
        assert!(oracle_route(&[]).is_err());
        assert_eq!(best_individual(&[vec![0.2, 0.8], vec![0.6, 0.5]]).unwrap(), 1);
    }

    #[test]
    fn cosine_nearest() {
        let idx = EmbeddingIndex {
            experts: vec!["a".into(), "b".into()],
            entries: vec![(0, vec![1.0, 0.1]), (0, vec![1.0, -0.1]), (1, vec![0.1, 1.0])],
        };
        assert_eq!(idx.nearest(&[2.0, 0.3]).unwrap(), 0);
        assert_eq!(idx.nearest(&[0.0, 5.0]).unwrap(), 1);
        assert!(idx.nearest(&[0.0, 0.0]).is_err());
    }
}
