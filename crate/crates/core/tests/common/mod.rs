#![allow(dead_code)]

use std::path::Path;

use lora_router::config::PipelineConfig;
use lora_router::experts::{init_expert, LoraExpert};
use lora_router::pipeline::make_suite;
use lora_router::taskgen::Suite;
use lora_router::{Backbone, Rng, Tensor};

pub fn tiny_config() -> PipelineConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/tiny.conf");
    PipelineConfig::load(Some(&path), &[]).expect("tiny config loads")
}

/// Tiny suite and an untrained backbone built from it.
pub fn tiny_world() -> (PipelineConfig, Suite, Backbone) {
    let cfg = tiny_config();
    let suite = make_suite(&cfg).unwrap();
    let bb = Backbone::build(cfg.resolved().backbone).unwrap();
    (cfg, suite, bb)
}

/// An expert whose `A`, `B` and gates are all non-zero.
pub fn random_expert(bb: &Backbone, id: &str, rank: usize, rng: &mut Rng) -> LoraExpert {
    let mut e = init_expert(bb, id, id, rank, 0).unwrap();
    for m in &mut e.modules {
        m.b = Tensor::randn(m.b.shape(), 0.3, rng);
        m.gate = Tensor::randn(m.gate.shape(), 0.3, rng);
    }
    e
}
