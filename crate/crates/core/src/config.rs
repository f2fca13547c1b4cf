//! Run configuration and its `key = value` text form.
//!
//! Keys are dotted paths into [`PipelineConfig`], e.g. `expert.steps = 300`
//! or `backbone.d_model = 64`. Later sources win: defaults, then the config
//! file, then command-line overrides.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::experts::TrainConfig;
use crate::harness::Normalization;
use crate::optim::OptimizerConfig;
use crate::taskgen::SuiteConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Root seed; the suite and backbone seeds follow it.
    pub seed: u64,
    pub backbone: BackboneConfig,
    pub suite: SuiteConfig,
    pub pretrain_steps: usize,
    pub pretrain_batch: usize,
    pub pretrain_optimizer: OptimizerConfig,
    pub rank: usize,
    pub expert: TrainConfig,
    pub gate: TrainConfig,
    pub joint: TrainConfig,
    /// Gate learning rate relative to `A`/`B` during joint training.
    pub joint_gate_lr_scale: f64,
    pub multitask: TrainConfig,
    pub k: usize,
    pub arrow_k: usize,
    pub index_per_expert: usize,
    /// Training examples per expert used for average activations.
    pub avg_act_examples: usize,
    pub normalization: Normalization,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            backbone: BackboneConfig::default(),
            suite: SuiteConfig::default(),
            pretrain_steps: 500,
            pretrain_batch: 32,
            pretrain_optimizer: OptimizerConfig::default(),
            rank: 4,
            expert: TrainConfig::default(),
            gate: TrainConfig::gate_default(),
            joint: TrainConfig::default(),
            joint_gate_lr_scale: 1.0,
            multitask: TrainConfig {
                steps: 600,
                ..TrainConfig::default()
            },
            k: 2,
            arrow_k: 2,
            index_per_expert: 1000,
            avg_act_examples: 200,
            normalization: Normalization::Mean,
        }
    }
}

impl PipelineConfig {
    /// Copies the root seed into the suite and backbone configs; the backbone
    /// vocabulary follows the suite's.
    pub fn resolved(&self) -> PipelineConfig {
        let mut c = self.clone();
        c.suite.seed = c.seed;
        c.backbone.seed = c.seed;
        c.backbone.vocab_size = c.suite.vocab_size;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.resolved().backbone.validate()?;
        if self.rank == 0 || self.k == 0 || self.arrow_k == 0 {
            return Err(Error::Config("rank, k and arrow_k must be at least 1".into()));
        }
        if self.k > self.suite.n_heldin || self.arrow_k > self.suite.n_heldin {
            return Err(Error::Config(format!(
                "k cannot exceed the number of experts ({})",
                self.suite.n_heldin
            )));
        }
        Ok(())
    }

    /// Every settable key with its current value, sorted by key.
    pub fn entries(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        flatten("", &serde_json::to_value(self).expect("config serializes"), &mut out);
        out
    }

    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let mut v = serde_json::to_value(&*self)?;
        let slot = key
            .split('.')
            .try_fold(&mut v, |node, part| node.get_mut(part))
            .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
        *slot = match slot {
            Value::Bool(_) => Value::Bool(
                raw.parse()
                    .map_err(|_| Error::Config(format!("`{key}` expects true or false, got `{raw}`")))?,
            ),
            Value::Number(n) if n.is_u64() => Value::from(
                raw.parse::<u64>()
                    .map_err(|_| Error::Config(format!("`{key}` expects a non-negative integer, got `{raw}`")))?,
            ),
            Value::Number(_) => {
                let x: f64 = raw.parse().map_err(|_| Error::Config(format!("`{key}` expects a number, got `{raw}`")))?;
                serde_json::Number::from_f64(x)
                    .map(Value::Number)
                    .ok_or_else(|| Error::Config(format!("`{key}` must be finite")))?
            }
            Value::String(_) => Value::String(raw.to_string()),
            _ => return Err(Error::Config(format!("`{key}` is a section, not a value"))),
        };
        *self = serde_json::from_value(v).map_err(|e| Error::Config(format!("`{key}` = `{raw}`: {e}")))?;
        Ok(())
    }

    /// Defaults, then `file`, then `overrides`.
    pub fn load(file: Option<&Path>, overrides: &[(String, String)]) -> Result<PipelineConfig> {
        let mut c = PipelineConfig::default();
        if let Some(path) = file {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            for (k, v) in parse_kv(&text)? {
                c.set(&k, &v)?;
            }
        }
        for (k, v) in overrides {
            c.set(k, v)?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn to_kv(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        Value::String(s) => out.push((prefix.to_string(), s.clone())),
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

/// `key = value` lines; `#` starts a comment; blank lines are ignored.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", i + 1)));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_entry_round_trips() {
        let c = PipelineConfig::default();
        let mut d = PipelineConfig::default();
        for (k, v) in c.entries() {
            d.set(&k, &v).unwrap();
        }
        assert_eq!(c, d);
        let parsed = parse_kv(&c.to_kv()).unwrap();
        assert_eq!(parsed, c.entries());
    }

    #[test]
    fn typed_errors() {
        let mut c = PipelineConfig::default();
        assert!(c.set("expert.steps", "-3").is_err());
        assert!(c.set("nope", "1").is_err());
        assert!(c.set("expert", "1").is_err());
        assert!(c.set("normalization", "median").is_err());
        c.set("normalization", "sum").unwrap();
        assert_eq!(c.normalization, Normalization::Sum);
        c.set("expert.optimizer.lr", "0.01").unwrap();
        assert_eq!(c.expert.optimizer.lr, 0.01);
    }

    #[test]
    fn comments_and_blanks() {
        let kv = parse_kv("# header\n\nseed = 3 # trailing\nk=1\n").unwrap();
        assert_eq!(kv, vec![("seed".into(), "3".into()), ("k".into(), "1".into())]);
        assert!(parse_kv("seed 3").is_err());
    }
}
