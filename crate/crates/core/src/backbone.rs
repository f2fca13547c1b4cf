//! Small pre-layernorm encoder-decoder transformer.
//!
//! Every linear map inside a transformer block is a [`ModuleSite`]: attention
//! projections (q, k, v, o) and both feed-forward matrices of every encoder
//! and decoder block, plus the decoder's cross-attention projections.
//! Embeddings, layer norms and the output projection are not sites.
//!
//! A forward pass hands each site's input `u` and base output `W u` to a
//! [`SiteAdapter`], which may replace the output. That is how LoRA experts,
//! gates and routers attach to the frozen model.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, Var};
use crate::container::{self, Container};
use crate::error::{Error, Result};
use crate::optim::{AdamW, OptimizerConfig};
use crate::rng::Rng;
use crate::taskgen::{self, Example};
use crate::tensor::Tensor;

pub const PAD: usize = 0;
pub const BOS: usize = 1;

const LN_EPS: f64 = 1e-5;
const MASKED: f64 = -1e30;
const POSITION_STD: f64 = 0.3;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_encoder_layers: usize,
    pub n_decoder_layers: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            vocab_size: 64,
            d_model: 64,
            n_heads: 4,
            d_ff: 256,
            n_encoder_layers: 2,
            n_decoder_layers: 2,
            max_seq_len: 24,
            seed: 0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("n_encoder_layers", self.n_encoder_layers),
            ("n_decoder_layers", self.n_decoder_layers),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = extents.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size <= BOS {
            return Err(Error::Config("vocabulary must hold PAD and BOS".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stack {
    Encoder,
    Decoder,
}

/// One linear layer `W ∈ R^{d×n}` able to host expert modules.
#[derive(Clone, Debug, PartialEq)]
pub struct ModuleSite {
    pub site_id: String,
    /// Input width.
    pub n: usize,
    /// Output width.
    pub d: usize,
    pub stack: Stack,
    pub layer: usize,
    /// Token stream whose activations feed this site. Differs from `stack`
    /// only for cross-attention keys and values, which read encoder states.
    pub input_stream: Stack,
    param: usize,
}

/// Context passed to adapters for one site invocation.
pub struct SiteCall<'a> {
    pub site: usize,
    pub info: &'a ModuleSite,
    /// Which rows of `u` are real tokens (the rest is padding).
    pub valid: &'a [bool],
}

/// Intervention point at every module site.
pub trait SiteAdapter {
    /// `u` is `[rows, n]`, `base` is `W u` as `[rows, d]`; returns the site output.
    fn adapt(&self, g: &mut Graph, call: &SiteCall<'_>, u: Var, base: Var) -> Result<Var>;
}

/// Leaves every site untouched.
pub struct NoAdapter;

impl SiteAdapter for NoAdapter {
    fn adapt(&self, _: &mut Graph, _: &SiteCall<'_>, _: Var, base: Var) -> Result<Var> {
        Ok(base)
    }
}

impl<T: SiteAdapter + ?Sized> SiteAdapter for &T {
    fn adapt(&self, g: &mut Graph, call: &SiteCall<'_>, u: Var, base: Var) -> Result<Var> {
        (**self).adapt(g, call, u, base)
    }
}

/// Per-site hooks addressed by site id.
pub struct Hooks<'a> {
    ids: HashMap<String, usize>,
    by_site: Vec<Option<Box<dyn SiteAdapter + 'a>>>,
}

impl<'a> Hooks<'a> {
    pub fn new(backbone: &Backbone) -> Self {
        Hooks {
            ids: backbone.site_index.clone(),
            by_site: (0..backbone.sites.len()).map(|_| None).collect(),
        }
    }

    pub fn insert(&mut self, site_id: &str, hook: impl SiteAdapter + 'a) -> Result<()> {
        let idx = *self
            .ids
            .get(site_id)
            .ok_or_else(|| Error::UnknownSite(site_id.to_string()))?;
        self.by_site[idx] = Some(Box::new(hook));
        Ok(())
    }
}

impl SiteAdapter for Hooks<'_> {
    fn adapt(&self, g: &mut Graph, call: &SiteCall<'_>, u: Var, base: Var) -> Result<Var> {
        match &self.by_site[call.site] {
            Some(h) => h.adapt(g, call, u, base),
            None => Ok(base),
        }
    }
}

/// Input activations `u_t` captured per site, one row per real token.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ActivationTrace {
    pub sites: Vec<Vec<Vec<f64>>>,
}

impl ActivationTrace {
    pub fn site(&self, idx: usize) -> &[Vec<f64>] {
        &self.sites[idx]
    }
}

/// Wraps an adapter and records every site's incoming activations.
pub struct Tracing<A> {
    inner: A,
    trace: RefCell<ActivationTrace>,
}

impl<A: SiteAdapter> Tracing<A> {
    pub fn new(inner: A, n_sites: usize) -> Self {
        Tracing {
            inner,
            trace: RefCell::new(ActivationTrace {
                sites: vec![Vec::new(); n_sites],
            }),
        }
    }

    pub fn into_trace(self) -> ActivationTrace {
        self.trace.into_inner()
    }
}

impl<A: SiteAdapter> SiteAdapter for Tracing<A> {
    fn adapt(&self, g: &mut Graph, call: &SiteCall<'_>, u: Var, base: Var) -> Result<Var> {
        {
            let mut tr = self.trace.borrow_mut();
            let uv = g.value(u);
            for (r, &ok) in call.valid.iter().enumerate() {
                if ok {
                    tr.sites[call.site].push(uv.row(r).to_vec());
                }
            }
        }
        self.inner.adapt(g, call, u, base)
    }
}

/// Padded encoder inputs plus decoder sequences that each read one source.
///
/// Several decoder sequences may share a source (rank classification scores
/// every answer choice against one encoding).
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub sources: usize,
    pub src_len: usize,
    pub src_ids: Vec<usize>,
    pub src_valid: Vec<bool>,
    pub decodes: usize,
    pub tgt_len: usize,
    /// Teacher-forced decoder inputs: BOS followed by the target shifted right.
    pub dec_in: Vec<usize>,
    pub targets: Vec<usize>,
    pub tgt_valid: Vec<bool>,
    pub dec_src: Vec<usize>,
}

impl Batch {
    pub fn new(sources: &[&[usize]], decodes: &[(usize, &[usize])]) -> Result<Batch> {
        if sources.is_empty() || decodes.is_empty() {
            return Err(Error::Contract("batch needs at least one source and one target".into()));
        }
        if sources.iter().any(|s| s.is_empty()) || decodes.iter().any(|(_, t)| t.is_empty()) {
            return Err(Error::Contract("empty input or target sequence".into()));
        }
        if let Some((i, _)) = decodes.iter().find(|(i, _)| *i >= sources.len()) {
            return Err(Error::Contract(format!("decoder refers to missing source {i}")));
        }
        let src_len = sources.iter().map(|s| s.len()).max().unwrap_or(0);
        let tgt_len = decodes.iter().map(|(_, t)| t.len()).max().unwrap_or(0);
        let mut src_ids = Vec::with_capacity(sources.len() * src_len);
        let mut src_valid = Vec::with_capacity(sources.len() * src_len);
        for s in sources {
            for p in 0..src_len {
                src_ids.push(s.get(p).copied().unwrap_or(PAD));
                src_valid.push(p < s.len());
            }
        }
        let mut dec_in = Vec::with_capacity(decodes.len() * tgt_len);
        let mut targets = Vec::with_capacity(decodes.len() * tgt_len);
        let mut tgt_valid = Vec::with_capacity(decodes.len() * tgt_len);
        for (_, t) in decodes {
            for p in 0..tgt_len {
                dec_in.push(if p == 0 { BOS } else { t.get(p - 1).copied().unwrap_or(PAD) });
                targets.push(t.get(p).copied().unwrap_or(PAD));
                tgt_valid.push(p < t.len());
            }
        }
        Ok(Batch {
            sources: sources.len(),
            src_len,
            src_ids,
            src_valid,
            decodes: decodes.len(),
            tgt_len,
            dec_in,
            targets,
            tgt_valid,
            dec_src: decodes.iter().map(|(i, _)| *i).collect(),
        })
    }

    /// One decoder sequence per source.
    pub fn pairs(pairs: &[(&[usize], &[usize])]) -> Result<Batch> {
        let sources: Vec<&[usize]> = pairs.iter().map(|p| p.0).collect();
        let decodes: Vec<(usize, &[usize])> = pairs.iter().enumerate().map(|(i, p)| (i, p.1)).collect();
        Self::new(&sources, &decodes)
    }

    pub fn from_examples(examples: &[&Example]) -> Result<Batch> {
        let pairs: Vec<(&[usize], &[usize])> =
            examples.iter().map(|e| (e.input.as_slice(), e.target.as_slice())).collect();
        Self::pairs(&pairs)
    }

    fn max_token(&self) -> usize {
        self.src_ids.iter().chain(&self.dec_in).chain(&self.targets).copied().max().unwrap_or(0)
    }
}

#[derive(Clone, Debug)]
pub struct NamedParam {
    pub name: String,
    pub value: Arc<Tensor>,
}

/// Output of a forward pass.
pub struct Forward {
    /// `[decodes * tgt_len, vocab]`.
    pub logits: Var,
    /// Final encoder states `[sources * src_len, d_model]`.
    pub encoder_states: Var,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    config: BackboneConfig,
    params: Vec<NamedParam>,
    param_index: HashMap<String, usize>,
    sites: Vec<ModuleSite>,
    site_index: HashMap<String, usize>,
    init_streams: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    config: BackboneConfig,
    init_streams: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub steps: usize,
    pub losses: Vec<f64>,
    pub initial_heldout_loss: f64,
    pub final_heldout_loss: f64,
}

struct Layout {
    config: BackboneConfig,
    params: Vec<(String, Vec<usize>, f64)>,
    sites: Vec<ModuleSite>,
}

impl Layout {
    fn new(config: &BackboneConfig) -> Self {
        let mut l = Layout {
            config: config.clone(),
            params: Vec::new(),
            sites: Vec::new(),
        };
        let (v, d, f, t) = (config.vocab_size, config.d_model, config.d_ff, config.max_seq_len);
        l.param("embed.tokens", vec![v, d], 1.0);
        // positions start smaller than tokens so token identity dominates the first layer
        l.param("encoder.positions", vec![t, d], POSITION_STD);
        l.param("decoder.positions", vec![t, d], POSITION_STD);
        for i in 0..config.n_encoder_layers {
            let p = format!("encoder.{i}");
            l.norm(&format!("{p}.ln_attn"));
            for x in ["q", "k", "v", "o"] {
                l.site(&format!("{p}.attn.{x}"), d, d, Stack::Encoder, i, Stack::Encoder);
            }
            l.norm(&format!("{p}.ln_ff"));
            l.site(&format!("{p}.ff.in"), d, f, Stack::Encoder, i, Stack::Encoder);
            l.site(&format!("{p}.ff.out"), f, d, Stack::Encoder, i, Stack::Encoder);
        }
        l.norm("encoder.ln_final");
        for i in 0..config.n_decoder_layers {
            let p = format!("decoder.{i}");
            l.norm(&format!("{p}.ln_self"));
            for x in ["q", "k", "v", "o"] {
                l.site(&format!("{p}.self_attn.{x}"), d, d, Stack::Decoder, i, Stack::Decoder);
            }
            l.norm(&format!("{p}.ln_cross"));
            for x in ["q", "k", "v", "o"] {
                let stream = if x == "k" || x == "v" { Stack::Encoder } else { Stack::Decoder };
                l.site(&format!("{p}.cross_attn.{x}"), d, d, Stack::Decoder, i, stream);
            }
            l.norm(&format!("{p}.ln_ff"));
            l.site(&format!("{p}.ff.in"), d, f, Stack::Decoder, i, Stack::Decoder);
            l.site(&format!("{p}.ff.out"), f, d, Stack::Decoder, i, Stack::Decoder);
        }
        l.norm("decoder.ln_final");
        l.param("lm_head", vec![v, d], 1.0 / (d as f64).sqrt());
        l
    }

    fn param(&mut self, name: &str, shape: Vec<usize>, std: f64) -> usize {
        self.params.push((name.to_string(), shape, std));
        self.params.len() - 1
    }

    // gain is marked with a negative std so init fills ones
    fn norm(&mut self, name: &str) {
        let d = self.config.d_model;
        self.param(&format!("{name}.gain"), vec![d], -1.0);
        self.param(&format!("{name}.bias"), vec![d], 0.0);
    }

    fn site(&mut self, id: &str, n: usize, d: usize, stack: Stack, layer: usize, input_stream: Stack) {
        let param = self.param(id, vec![d, n], 1.0 / (n as f64).sqrt());
        self.sites.push(ModuleSite {
            site_id: id.to_string(),
            n,
            d,
            stack,
            layer,
            input_stream,
            param,
        });
    }
}

impl Backbone {
    /// Deterministically initializes a backbone from `config.seed`.
    pub fn build(config: BackboneConfig) -> Result<Backbone> {
        config.validate()?;
        let layout = Layout::new(&config);
        let root = Rng::new(config.seed).split("backbone").split("init");
        let mut init_streams = Vec::new();
        let params = layout
            .params
            .iter()
            .map(|(name, shape, std)| {
                let t = if *std < 0.0 {
                    Tensor::full(shape, 1.0)
                } else if *std == 0.0 {
                    Tensor::zeros(shape)
                } else {
                    let mut rng = root.split(name);
                    init_streams.push(rng.label().to_string());
                    Tensor::randn(shape, *std, &mut rng)
                };
                NamedParam {
                    name: name.clone(),
                    value: Arc::new(t),
                }
            })
            .collect();
        Ok(Self::assemble(config, layout, params, init_streams))
    }

    fn assemble(config: BackboneConfig, layout: Layout, params: Vec<NamedParam>, init_streams: Vec<String>) -> Self {
        let param_index = params.iter().enumerate().map(|(i, p)| (p.name.clone(), i)).collect();
        let site_index = layout.sites.iter().enumerate().map(|(i, s)| (s.site_id.clone(), i)).collect();
        Backbone {
            config,
            params,
            param_index,
            sites: layout.sites,
            site_index,
            init_streams,
        }
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn sites(&self) -> &[ModuleSite] {
        &self.sites
    }

    pub fn site(&self, idx: usize) -> &ModuleSite {
        &self.sites[idx]
    }

    pub fn site_by_id(&self, id: &str) -> Result<usize> {
        self.site_index
            .get(id)
            .copied()
            .ok_or_else(|| Error::UnknownSite(id.to_string()))
    }

    /// Frozen base weight `W` of a site, `[d, n]`.
    pub fn site_weight(&self, idx: usize) -> &Tensor {
        &self.params[self.sites[idx].param].value
    }

    pub fn params(&self) -> &[NamedParam] {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.param_index.get(name).map(|&i| &*self.params[i].value)
    }

    /// Labels of the random streams used for initialization.
    pub fn init_streams(&self) -> &[String] {
        &self.init_streams
    }

    /// Content hash of configuration and weights. Expert bundles record it so
    /// they are never applied to a different backbone.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serializes"));
        for p in &self.params {
            h.update(p.name.as_bytes());
            for x in p.value.data() {
                h.update(x.to_le_bytes());
            }
        }
        h.finalize()[..16].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Places all weights on the tape, trainable or frozen.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    g.param((*p.value).clone())
                } else {
                    g.constant_shared(p.value.clone())
                }
            })
            .collect()
    }

    /// Forward pass with frozen weights.
    pub fn forward(&self, g: &mut Graph, batch: &Batch, adapter: &dyn SiteAdapter) -> Result<Forward> {
        let vars = self.bind(g, false);
        self.forward_bound(g, &vars, batch, adapter)
    }

    pub fn forward_bound(
        &self,
        g: &mut Graph,
        vars: &[Var],
        batch: &Batch,
        adapter: &dyn SiteAdapter,
    ) -> Result<Forward> {
        let c = &self.config;
        if batch.src_len > c.max_seq_len || batch.tgt_len > c.max_seq_len {
            return Err(Error::Dimension(format!(
                "sequence lengths {}/{} exceed max_seq_len {}",
                batch.src_len, batch.tgt_len, c.max_seq_len
            )));
        }
        if batch.max_token() >= c.vocab_size {
            return Err(Error::Dimension(format!(
                "token id {} outside vocabulary of {}",
                batch.max_token(),
                c.vocab_size
            )));
        }
        let p = |name: &str| vars[self.param_index[name]];
        let (e, s) = (batch.sources, batch.src_len);
        let (m, t) = (batch.decodes, batch.tgt_len);

        // encoder
        let tok = g.gather_rows(p("embed.tokens"), &batch.src_ids)?;
        let pos_idx: Vec<usize> = (0..e).flat_map(|_| 0..s).collect();
        let pos = g.gather_rows(p("encoder.positions"), &pos_idx)?;
        let mut x = g.add(tok, pos)?;
        let enc_mask = g.constant(attention_mask(e, s, s, |b, _, k| batch.src_valid[b * s + k]));
        let sv = &batch.src_valid;
        let mut site_no = 0;
        for i in 0..c.n_encoder_layers {
            let pre = format!("encoder.{i}");
            let h = self.norm(g, vars, &format!("{pre}.ln_attn"), x)?;
            let q = self.linear(g, vars, site_no, h, sv, adapter)?;
            let k = self.linear(g, vars, site_no + 1, h, sv, adapter)?;
            let v = self.linear(g, vars, site_no + 2, h, sv, adapter)?;
            let a = self.attend(g, q, k, v, e, s, s, enc_mask)?;
            let o = self.linear(g, vars, site_no + 3, a, sv, adapter)?;
            x = g.add(x, o)?;
            let h = self.norm(g, vars, &format!("{pre}.ln_ff"), x)?;
            let f = self.linear(g, vars, site_no + 4, h, sv, adapter)?;
            let f = g.relu(f);
            let f = self.linear(g, vars, site_no + 5, f, sv, adapter)?;
            x = g.add(x, f)?;
            site_no += 6;
        }
        let enc = self.norm(g, vars, "encoder.ln_final", x)?;

        // decoder
        let tok = g.gather_rows(p("embed.tokens"), &batch.dec_in)?;
        let pos_idx: Vec<usize> = (0..m).flat_map(|_| 0..t).collect();
        let pos = g.gather_rows(p("decoder.positions"), &pos_idx)?;
        let mut y = g.add(tok, pos)?;
        let tv = &batch.tgt_valid;
        let self_mask = g.constant(attention_mask(m, t, t, |b, q, k| k <= q && tv[b * t + k]));
        let cross_mask = g.constant(attention_mask(m, t, s, |b, _, k| sv[batch.dec_src[b] * s + k]));
        let identity_map = e == m && batch.dec_src.iter().enumerate().all(|(i, &j)| i == j);
        let expand: Vec<usize> = batch
            .dec_src
            .iter()
            .flat_map(|&j| (j * s)..(j * s + s))
            .collect();
        for i in 0..c.n_decoder_layers {
            let pre = format!("decoder.{i}");
            let h = self.norm(g, vars, &format!("{pre}.ln_self"), y)?;
            let q = self.linear(g, vars, site_no, h, tv, adapter)?;
            let k = self.linear(g, vars, site_no + 1, h, tv, adapter)?;
            let v = self.linear(g, vars, site_no + 2, h, tv, adapter)?;
            let a = self.attend(g, q, k, v, m, t, t, self_mask)?;
            let o = self.linear(g, vars, site_no + 3, a, tv, adapter)?;
            y = g.add(y, o)?;

            let h = self.norm(g, vars, &format!("{pre}.ln_cross"), y)?;
            let q = self.linear(g, vars, site_no + 4, h, tv, adapter)?;
            let mut k = self.linear(g, vars, site_no + 5, enc, sv, adapter)?;
            let mut v = self.linear(g, vars, site_no + 6, enc, sv, adapter)?;
            if !identity_map {
                k = g.gather_rows(k, &expand)?;
                v = g.gather_rows(v, &expand)?;
            }
            let a = self.attend(g, q, k, v, m, t, s, cross_mask)?;
            let o = self.linear(g, vars, site_no + 7, a, tv, adapter)?;
            y = g.add(y, o)?;

            let h = self.norm(g, vars, &format!("{pre}.ln_ff"), y)?;
            let f = self.linear(g, vars, site_no + 8, h, tv, adapter)?;
            let f = g.relu(f);
            let f = self.linear(g, vars, site_no + 9, f, tv, adapter)?;
            y = g.add(y, f)?;
            site_no += 10;
        }
        let y = self.norm(g, vars, "decoder.ln_final", y)?;
        let logits = g.matmul_t(y, p("lm_head"), false, true)?;
        Ok(Forward {
            logits,
            encoder_states: enc,
        })
    }

    fn norm(&self, g: &mut Graph, vars: &[Var], name: &str, x: Var) -> Result<Var> {
        let gain = vars[self.param_index[&format!("{name}.gain")]];
        let bias = vars[self.param_index[&format!("{name}.bias")]];
        g.layer_norm(x, gain, bias, LN_EPS)
    }

    fn linear(
        &self,
        g: &mut Graph,
        vars: &[Var],
        site: usize,
        u: Var,
        valid: &[bool],
        adapter: &dyn SiteAdapter,
    ) -> Result<Var> {
        let info = &self.sites[site];
        let base = g.matmul_t(u, vars[info.param], false, true)?;
        adapter.adapt(g, &SiteCall { site, info, valid }, u, base)
    }

    #[allow(clippy::too_many_arguments)]
    fn attend(&self, g: &mut Graph, q: Var, k: Var, v: Var, b: usize, tq: usize, tk: usize, mask: Var) -> Result<Var> {
        let h = self.config.n_heads;
        let d = self.config.d_model;
        let dh = d / h;
        let split = |g: &mut Graph, x: Var, len: usize| -> Result<Var> {
            let x = g.reshape(x, &[b, len, h, dh])?;
            let x = g.permute(x, &[0, 2, 1, 3])?;
            g.reshape(x, &[b * h, len, dh])
        };
        let q = split(g, q, tq)?;
        let k = split(g, k, tk)?;
        let v = split(g, v, tk)?;
        let scores = g.bmm(q, k, false, true)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let scores = g.reshape(scores, &[b, h, tq, tk])?;
        let scores = g.add(scores, mask)?;
        let probs = g.softmax(scores, 3)?;
        let probs = g.reshape(probs, &[b * h, tq, tk])?;
        let o = g.bmm(probs, v, false, false)?;
        let o = g.reshape(o, &[b, h, tq, dh])?;
        let o = g.permute(o, &[0, 2, 1, 3])?;
        g.reshape(o, &[b * tq, d])
    }

    /// Mean of final encoder states over real tokens, one row per source.
    pub fn embed(&self, batch: &Batch) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, batch, &NoAdapter)?;
        let states = g.value(out.encoder_states);
        let (s, d) = (batch.src_len, self.config.d_model);
        let mut rows = Vec::with_capacity(batch.sources);
        for e in 0..batch.sources {
            let mut acc = vec![0.0; d];
            let mut n = 0.0;
            for p in 0..s {
                if batch.src_valid[e * s + p] {
                    for (a, x) in acc.iter_mut().zip(states.row(e * s + p)) {
                        *a += x;
                    }
                    n += 1.0;
                }
            }
            acc.iter_mut().for_each(|a| *a /= n);
            rows.push(acc);
        }
        Ok(rows)
    }

    /// Mean teacher-forced cross-entropy over `examples`.
    pub fn mean_loss(&self, examples: &[Example], adapter: &dyn SiteAdapter, chunk: usize) -> Result<f64> {
        let mut total = 0.0;
        let mut count = 0.0;
        for part in examples.chunks(chunk.max(1)) {
            let refs: Vec<&Example> = part.iter().collect();
            let batch = Batch::from_examples(&refs)?;
            let mut g = Graph::new();
            let out = self.forward(&mut g, &batch, adapter)?;
            let loss = g.cross_entropy(out.logits, &batch.targets, &batch.tgt_valid)?;
            let n = batch.tgt_valid.iter().filter(|&&v| v).count() as f64;
            total += g.value(loss).item() * n;
            count += n;
        }
        Ok(total / count.max(1.0))
    }

    /// Trains every weight on a sequence-to-sequence corpus. Afterwards the
    /// backbone is treated as frozen by all expert phases.
    pub fn pretrain(
        &mut self,
        train: &[Example],
        heldout: &[Example],
        steps: usize,
        batch_size: usize,
        opt: &OptimizerConfig,
        rng: &mut Rng,
    ) -> Result<PretrainReport> {
        for ex in train.iter().chain(heldout) {
            if let Some(&tok) = ex.input.iter().chain(&ex.target).find(|&&t| t >= self.config.vocab_size) {
                return Err(Error::Dimension(format!(
                    "corpus token {tok} outside vocabulary of {}",
                    self.config.vocab_size
                )));
            }
        }
        let initial = if heldout.is_empty() { f64::NAN } else { self.mean_loss(heldout, &NoAdapter, 64)? };
        let mut adam = AdamW::new(opt.clone(), self.params.iter().map(|p| p.value.numel()));
        let mut losses = Vec::with_capacity(steps);
        for step in 0..steps {
            let batch = taskgen::sample_batch(train, batch_size, rng)?;
            let mut g = Graph::new();
            let vars = self.bind(&mut g, true);
            let out = self.forward_bound(&mut g, &vars, &batch, &NoAdapter)?;
            let loss = g.cross_entropy(out.logits, &batch.targets, &batch.tgt_valid)?;
            let lv = g.value(loss).item();
            if !lv.is_finite() {
                return Err(Error::NonFinite(format!(
                    "pretraining loss {lv} at step {step}; last finite losses {:?}",
                    &losses[losses.len().saturating_sub(5)..]
                )));
            }
            losses.push(lv);
            g.backward(loss)?;
            let grads: Vec<Vec<f64>> = vars.iter().map(|&v| g.take_grad(v).unwrap_or_default()).collect();
            drop(g);
            let grad_refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
            let mut bufs: Vec<&mut [f64]> = self
                .params
                .iter_mut()
                .map(|p| Arc::make_mut(&mut p.value).data_mut())
                .collect();
            adam.step(&mut bufs, &grad_refs, opt.lr_at(step, steps))?;
        }
        let fin = if heldout.is_empty() { f64::NAN } else { self.mean_loss(heldout, &NoAdapter, 64)? };
        Ok(PretrainReport {
            steps,
            losses,
            initial_heldout_loss: initial,
            final_heldout_loss: fin,
        })
    }

    pub fn save(&self, dir: &std::path::Path) -> Result<()> {
        let meta = CheckpointMeta {
            config: self.config.clone(),
            init_streams: self.init_streams.clone(),
        };
        let arrays: Vec<(String, &Tensor)> = self.params.iter().map(|p| (p.name.clone(), &*p.value)).collect();
        container::write(dir, "backbone", Some(&self.fingerprint()), &meta, &arrays)
    }

    pub fn load(dir: &std::path::Path) -> Result<Backbone> {
        let c: Container<CheckpointMeta> = container::read(dir, "backbone")?;
        c.meta.config.validate()?;
        let layout = Layout::new(&c.meta.config);
        let mut arrays: HashMap<String, Tensor> = c.arrays.into_iter().collect();
        let mut params = Vec::with_capacity(layout.params.len());
        for (name, shape, _) in &layout.params {
            let t = arrays.remove(name).ok_or_else(|| Error::Bundle {
                path: dir.to_path_buf(),
                reason: format!("missing array `{name}`"),
            })?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Bundle {
                    path: dir.to_path_buf(),
                    reason: format!("array `{name}` has shape {:?}, expected {shape:?}", t.shape()),
                });
            }
            params.push(NamedParam {
                name: name.clone(),
                value: Arc::new(t),
            });
        }
        let b = Self::assemble(c.meta.config, layout, params, c.meta.init_streams);
        if let Some(fp) = c.fingerprint {
            if fp != b.fingerprint() {
                return Err(Error::Fingerprint {
                    expected: fp,
                    found: b.fingerprint(),
                });
            }
        }
        Ok(b)
    }
}

/// Additive mask `[b, 1, tq, tk]`: 0 where `keep(b, q, k)`, a large negative otherwise.
fn attention_mask(b: usize, tq: usize, tk: usize, keep: impl Fn(usize, usize, usize) -> bool) -> Tensor {
    let mut data = Vec::with_capacity(b * tq * tk);
    for bi in 0..b {
        for q in 0..tq {
            for k in 0..tk {
                data.push(if keep(bi, q, k) { 0.0 } else { MASKED });
            }
        }
    }
    Tensor::new(vec![b, 1, tq, tk], data).expect("mask shape")
}
