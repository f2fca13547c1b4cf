//! Per-site top-k routers built from expert gate vectors, and the routed
//! forward pass that mixes expert deltas token by token.

use std::cell::RefCell;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_in_place, Graph, Var};
use crate::backbone::{Backbone, SiteAdapter, SiteCall};
use crate::container::{self, Container};
use crate::error::{Error, Result};
use crate::experts::LoraExpert;
use crate::tensor::Tensor;

pub const STD_EPS: f64 = 1e-8;

/// `(x − mean) / max(std, ε)` with the population standard deviation.
/// A constant vector maps to zeros.
pub fn standardize(x: &[f64]) -> Result<Vec<f64>> {
    if x.len() < 2 {
        return Err(Error::Contract(format!("cannot standardize a vector of length {}", x.len())));
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt().max(STD_EPS);
    Ok(x.iter().map(|v| (v - mean) / std).collect())
}

/// How a router turns a gate row and an activation into a score.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scoring {
    /// Dot product of the standardized gate and the standardized activation.
    Standardized,
    /// `|vᵀu|` on the raw activation.
    AbsoluteDot,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SiteRouter {
    pub site_id: String,
    pub experts: Vec<String>,
    /// One row per expert, `[Z, n]`, already in scoring form.
    pub gates: Tensor,
    pub n: usize,
    pub k: usize,
    pub scoring: Scoring,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RouterDecision {
    pub affinities: Vec<f64>,
    /// Expert indices, highest score first.
    pub selected: Vec<usize>,
    /// Mixing weights aligned with `selected`.
    pub weights: Vec<f64>,
}

impl SiteRouter {
    /// Router over the given gate rows. `Standardized` routers standardize the
    /// rows here; `AbsoluteDot` rows are used as given.
    pub fn from_rows(site_id: &str, experts: Vec<String>, rows: &[Vec<f64>], k: usize, scoring: Scoring) -> Result<Self> {
        if rows.is_empty() || rows.len() != experts.len() {
            return Err(Error::Contract(format!(
                "router at {site_id} needs one gate row per expert ({} rows, {} experts)",
                rows.len(),
                experts.len()
            )));
        }
        if k == 0 || k > rows.len() {
            return Err(Error::Config(format!("k = {k} is outside 1..={}", rows.len())));
        }
        let n = rows[0].len();
        if let Some(r) = rows.iter().find(|r| r.len() != n) {
            return Err(Error::Dimension(format!("gate widths {n} and {} disagree at {site_id}", r.len())));
        }
        let mut data = Vec::with_capacity(rows.len() * n);
        for r in rows {
            match scoring {
                Scoring::Standardized => data.extend(standardize(r)?),
                Scoring::AbsoluteDot => data.extend_from_slice(r),
            }
        }
        Ok(SiteRouter {
            site_id: site_id.to_string(),
            experts,
            gates: Tensor::new(vec![rows.len(), n], data)?,
            n,
            k,
            scoring,
        })
    }

    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    /// Score of every expert for activation `u`.
    pub fn affinities(&self, u: &[f64]) -> Result<Vec<f64>> {
        if u.len() != self.n {
            return Err(Error::Dimension(format!(
                "activation width {} at {} expects {}",
                u.len(),
                self.site_id,
                self.n
            )));
        }
        let dot = |row: &[f64], x: &[f64]| row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        Ok(match self.scoring {
            Scoring::Standardized => {
                let ub = standardize(u)?;
                (0..self.n_experts()).map(|z| dot(self.gates.row(z), &ub)).collect()
            }
            Scoring::AbsoluteDot => (0..self.n_experts()).map(|z| dot(self.gates.row(z), u).abs()).collect(),
        })
    }

    pub fn route(&self, u: &[f64]) -> Result<RouterDecision> {
        let affinities = self.affinities(u)?;
        let selected = top_k(&affinities, self.k);
        let temp = (self.n as f64).sqrt();
        let mut weights: Vec<f64> = selected.iter().map(|&z| affinities[z] / temp).collect();
        softmax_in_place(&mut weights);
        Ok(RouterDecision {
            affinities,
            selected,
            weights,
        })
    }

    /// Softmax of `α/√n` over every expert. Analysis only; never used for mixing.
    pub fn full_probabilities(&self, u: &[f64]) -> Result<Vec<f64>> {
        let temp = (self.n as f64).sqrt();
        let mut p: Vec<f64> = self.affinities(u)?.into_iter().map(|a| a / temp).collect();
        softmax_in_place(&mut p);
        Ok(p)
    }
}

/// Indices of the `k` largest scores; ties go to the lower index.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

pub fn route_token(router: &SiteRouter, u: &[f64]) -> Result<RouterDecision> {
    router.route(u)
}

pub fn full_routing_probabilities(router: &SiteRouter, u: &[f64]) -> Result<Vec<f64>> {
    router.full_probabilities(u)
}

/// Router for one site from the experts' learned gates.
pub fn build_router(experts: &[&LoraExpert], site_id: &str, k: usize) -> Result<SiteRouter> {
    let mut rows = Vec::with_capacity(experts.len());
    for e in experts {
        let idx = e
            .site_ids
            .iter()
            .position(|s| s == site_id)
            .ok_or_else(|| Error::UnknownSite(format!("{site_id} (missing from expert {})", e.expert_id)))?;
        rows.push(e.modules[idx].gate.data().to_vec());
    }
    SiteRouter::from_rows(
        site_id,
        experts.iter().map(|e| e.expert_id.clone()).collect(),
        &rows,
        k,
        Scoring::Standardized,
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RouterKind {
    Phatgoose,
    AvgAct,
    Arrow,
}

impl RouterKind {
    pub fn name(self) -> &'static str {
        match self {
            RouterKind::Phatgoose => "phatgoose",
            RouterKind::AvgAct => "avg-act",
            RouterKind::Arrow => "arrow",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "phatgoose" => Ok(RouterKind::Phatgoose),
            "avg-act" => Ok(RouterKind::AvgAct),
            "arrow" => Ok(RouterKind::Arrow),
            other => Err(Error::Config(format!("unknown router kind `{other}`"))),
        }
    }
}

/// One router per backbone site, in site order.
#[derive(Clone, Debug, PartialEq)]
pub struct Router {
    pub kind: RouterKind,
    pub sites: Vec<SiteRouter>,
}

impl Router {
    pub fn experts(&self) -> &[String] {
        &self.sites[0].experts
    }

    pub fn k(&self) -> usize {
        self.sites[0].k
    }

    /// Same gates with a different `k`.
    pub fn with_k(&self, k: usize) -> Result<Router> {
        if k == 0 || k > self.experts().len() {
            return Err(Error::Config(format!("k = {k} is outside 1..={}", self.experts().len())));
        }
        let mut r = self.clone();
        r.sites.iter_mut().for_each(|s| s.k = k);
        Ok(r)
    }
}

pub fn build_phatgoose_router(backbone: &Backbone, experts: &[&LoraExpert], k: usize) -> Result<Router> {
    if experts.is_empty() {
        return Err(Error::Contract("cannot build a router over an empty expert pool".into()));
    }
    let sites = backbone
        .sites()
        .iter()
        .map(|s| build_router(experts, &s.site_id, k))
        .collect::<Result<Vec<_>>>()?;
    Ok(Router {
        kind: RouterKind::Phatgoose,
        sites,
    })
}

/// Token-mean routing statistics for one site.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SiteTrace {
    pub tokens: usize,
    /// Sum over tokens of the full routing probabilities.
    pub prob_sum: Vec<f64>,
    /// How often each expert was ranked first.
    pub top1: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RoutingTrace {
    pub experts: Vec<String>,
    pub site_ids: Vec<String>,
    pub sites: Vec<SiteTrace>,
}

impl RoutingTrace {
    pub fn new(router: &Router) -> Self {
        let z = router.experts().len();
        RoutingTrace {
            experts: router.experts().to_vec(),
            site_ids: router.sites.iter().map(|s| s.site_id.clone()).collect(),
            sites: vec![
                SiteTrace {
                    tokens: 0,
                    prob_sum: vec![0.0; z],
                    top1: vec![0; z],
                };
                router.sites.len()
            ],
        }
    }

    pub fn merge(&mut self, other: &RoutingTrace) {
        for (a, b) in self.sites.iter_mut().zip(&other.sites) {
            a.tokens += b.tokens;
            a.prob_sum.iter_mut().zip(&b.prob_sum).for_each(|(x, y)| *x += y);
            a.top1.iter_mut().zip(&b.top1).for_each(|(x, y)| *x += y);
        }
    }
}

/// `W u + Σ_{z∈E_t} w_{t,z} B_z A_z u` at every site, with `E_t`, `w_t` chosen per token.
pub struct RoutedAdapter<'a> {
    router: &'a Router,
    /// Per site: all experts' `A` stacked to `[Z·r, n]` and `B` side by side to `[d, Z·r]`.
    a_stack: Vec<Tensor>,
    b_stack: Vec<Tensor>,
    ranks: Vec<Vec<usize>>,
    trace: Option<RefCell<RoutingTrace>>,
}

impl<'a> RoutedAdapter<'a> {
    pub fn new(router: &'a Router, experts: &[&LoraExpert]) -> Result<Self> {
        if experts.iter().map(|e| &e.expert_id).ne(router.experts().iter()) {
            return Err(Error::Contract("expert pool does not match the router's expert order".into()));
        }
        let mut a_stack = Vec::new();
        let mut b_stack = Vec::new();
        let mut ranks = Vec::new();
        for (s, sr) in router.sites.iter().enumerate() {
            let mods: Vec<_> = experts
                .iter()
                .map(|e| {
                    if e.site_ids.get(s) != Some(&sr.site_id) {
                        return Err(Error::UnknownSite(format!("{} (expert {})", sr.site_id, e.expert_id)));
                    }
                    Ok(&e.modules[s])
                })
                .collect::<Result<_>>()?;
            let rs: Vec<usize> = mods.iter().map(|m| m.rank()).collect();
            let total: usize = rs.iter().sum();
            let n = mods[0].a.shape()[1];
            let d = mods[0].b.shape()[0];
            let mut a = Vec::with_capacity(total * n);
            for m in &mods {
                if m.a.shape()[1] != n || m.b.shape()[0] != d {
                    return Err(Error::Dimension(format!("expert widths disagree at {}", sr.site_id)));
                }
                a.extend_from_slice(m.a.data());
            }
            let mut b = vec![0.0; d * total];
            let mut off = 0;
            for m in &mods {
                let r = m.rank();
                for i in 0..d {
                    b[i * total + off..i * total + off + r].copy_from_slice(m.b.row(i));
                }
                off += r;
            }
            a_stack.push(Tensor::new(vec![total, n], a)?);
            b_stack.push(Tensor::new(vec![d, total], b)?);
            ranks.push(rs);
        }
        Ok(RoutedAdapter {
            router,
            a_stack,
            b_stack,
            ranks,
            trace: None,
        })
    }

    /// Also accumulate routing statistics over real tokens.
    pub fn with_trace(mut self) -> Self {
        self.trace = Some(RefCell::new(RoutingTrace::new(self.router)));
        self
    }

    pub fn take_trace(&self) -> Option<RoutingTrace> {
        self.trace.as_ref().map(|t| t.replace(RoutingTrace::new(self.router)))
    }
}

impl SiteAdapter for RoutedAdapter<'_> {
    fn adapt(&self, g: &mut Graph, call: &SiteCall<'_>, u: Var, base: Var) -> Result<Var> {
        let s = call.site;
        let sr = &self.router.sites[s];
        let ranks = &self.ranks[s];
        let total: usize = ranks.iter().sum();
        let uv = g.value(u).clone();
        let rows = uv.shape()[0];
        let mut mix = vec![0.0; rows * total];
        let mut trace = self.trace.as_ref().map(|t| t.borrow_mut());
        for t in 0..rows {
            let dec = sr.route(uv.row(t))?;
            let mut offs = 0;
            let starts: Vec<usize> = ranks
                .iter()
                .map(|r| {
                    let o = offs;
                    offs += r;
                    o
                })
                .collect();
            for (&z, &w) in dec.selected.iter().zip(&dec.weights) {
                mix[t * total + starts[z]..t * total + starts[z] + ranks[z]].fill(w);
            }
            if let Some(tr) = trace.as_mut() {
                if call.valid[t] {
                    let st = &mut tr.sites[s];
                    st.tokens += 1;
                    st.top1[dec.selected[0]] += 1;
                    let temp = (sr.n as f64).sqrt();
                    let mut p: Vec<f64> = dec.affinities.iter().map(|a| a / temp).collect();
                    softmax_in_place(&mut p);
                    st.prob_sum.iter_mut().zip(&p).for_each(|(a, b)| *a += b);
                }
            }
        }
        let a = g.constant(self.a_stack[s].clone());
        let b = g.constant(self.b_stack[s].clone());
        let m = g.constant(Tensor::new(vec![rows, total], mix)?);
        let au = g.matmul_t(u, a, false, true)?;
        let weighted = g.mul(au, m)?;
        let delta = g.matmul_t(weighted, b, false, true)?;
        g.add(base, delta)
    }
}

#[derive(Serialize, Deserialize)]
struct RouterMeta {
    kind: RouterKind,
    k: usize,
    experts: Vec<String>,
    sites: Vec<String>,
    scoring: Scoring,
}

/// Router bundle: expert order, k and the scoring-form gate matrix per site.
pub fn save_router(router: &Router, fingerprint: &str, dir: &Path) -> Result<()> {
    let meta = RouterMeta {
        kind: router.kind,
        k: router.k(),
        experts: router.experts().to_vec(),
        sites: router.sites.iter().map(|s| s.site_id.clone()).collect(),
        scoring: router.sites[0].scoring,
    };
    let arrays: Vec<(String, &Tensor)> = router.sites.iter().map(|s| (s.site_id.clone(), &s.gates)).collect();
    container::write(dir, "router", Some(fingerprint), &meta, &arrays)
}

pub fn load_router(dir: &Path, backbone: &Backbone) -> Result<Router> {
    let c: Container<RouterMeta> = container::read(dir, "router")?;
    c.check_fingerprint(&backbone.fingerprint())?;
    let m = c.meta;
    let bad = |reason: String| Error::Bundle {
        path: dir.to_path_buf(),
        reason,
    };
    if m.sites.len() != backbone.sites().len() || c.arrays.len() != m.sites.len() {
        return Err(bad("router does not cover every backbone site".into()));
    }
    let mut sites = Vec::with_capacity(m.sites.len());
    for ((name, gates), info) in c.arrays.into_iter().zip(backbone.sites()) {
        if name != info.site_id || gates.shape() != [m.experts.len(), info.n] {
            return Err(bad(format!("gate matrix `{name}` does not fit site {}", info.site_id)));
        }
        if m.k == 0 || m.k > m.experts.len() {
            return Err(bad(format!("k = {} outside 1..={}", m.k, m.experts.len())));
        }
        sites.push(SiteRouter {
            site_id: name,
            experts: m.experts.clone(),
            gates,
            n: info.n,
            k: m.k,
            scoring: m.scoring,
        });
    }
    Ok(Router { kind: m.kind, sites })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn router(rows: &[Vec<f64>], k: usize) -> SiteRouter {
        let ids = (0..rows.len()).map(|i| format!("e{i}")).collect();
        SiteRouter::from_rows("s", ids, rows, k, Scoring::Standardized).unwrap()
    }

    #[test]
    fn standardize_examples() {
        let s = standardize(&[1.0, 2.0, 3.0]).unwrap();
        assert!((s[0] + 1.2247).abs() < 1e-4 && s[1].abs() < 1e-12 && (s[2] - 1.2247).abs() < 1e-4);
        assert_eq!(standardize(&[5.0, 5.0, 5.0]).unwrap(), vec![0.0; 3]);
        assert!(standardize(&[1.0]).is_err());
    }

    #[test]
    fn two_dim_affinity() {
        let r = router(&[vec![0.0, 2.0]], 1);
        let d = r.route(&[0.0, 4.0]).unwrap();
        assert!((d.affinities[0] - 2.0).abs() < 1e-12);
        assert_eq!(d.weights, vec![1.0]);
    }

    #[test]
    fn top_k_order_and_ties() {
        assert_eq!(top_k(&[3.0, 1.0, 2.5], 2), vec![0, 2]);
        assert_eq!(top_k(&[1.0, 2.0, 2.0, 2.0], 2), vec![1, 2]);
    }

    #[test]
    fn weights_follow_temperature() {
        // n = 4 so logits are α / 2
        let mut w = vec![2.0 / 2.0, 0.0];
        softmax_in_place(&mut w);
        assert!((w[0] - 0.7311).abs() < 1e-4 && (w[1] - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn k_bounds() {
        let ids = vec!["a".to_string()];
        assert!(SiteRouter::from_rows("s", ids.clone(), &[vec![1.0, 2.0]], 2, Scoring::Standardized).is_err());
        assert!(SiteRouter::from_rows("s", ids, &[vec![1.0, 2.0]], 0, Scoring::Standardized).is_err());
    }
}
