//! Merged experts against dense reference deltas.

mod common;

use lora_router::autodiff::Graph;
use lora_router::baselines::{merge_experts, MergeMode};
use lora_router::experts::LoraExpert;
use lora_router::{Batch, Rng, Tensor};

fn pool(n: usize, seed: u64) -> (lora_router::Backbone, Vec<LoraExpert>) {
    let (_, _, bb) = common::tiny_world();
    let mut rng = Rng::new(seed);
    let experts = (0..n).map(|z| common::random_expert(&bb, &format!("e{z}"), 2 + z % 2, &mut rng)).collect();
    (bb, experts)
}

/// Elementwise mean of the dense products, summed in the given order.
fn reference(experts: &[&LoraExpert], site: usize) -> Vec<f64> {
    let ds: Vec<Tensor> = experts.iter().map(|e| e.modules[site].delta()).collect();
    (0..ds[0].numel())
        .map(|i| ds.iter().map(|d| d.data()[i]).sum::<f64>() / ds.len() as f64)
        .collect()
}

fn max_diff(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

#[test]
fn product_average_is_the_mean_dense_delta() {
    let (_, experts) = pool(5, 1);
    let refs: Vec<_> = experts.iter().collect();
    let merged = merge_experts(&refs, MergeMode::ProductAverage).unwrap();
    for s in 0..merged.deltas.len() {
        assert!(max_diff(merged.deltas[s].data(), &reference(&refs, s)) < 1e-12);
    }
}

#[test]
fn merging_is_permutation_invariant() {
    let (_, experts) = pool(5, 2);
    let refs: Vec<_> = experts.iter().collect();
    let base = merge_experts(&refs, MergeMode::ProductAverage).unwrap();
    let mut rng = Rng::new(9);
    for _ in 0..10 {
        let perm = rng.permutation(refs.len());
        let shuffled: Vec<_> = perm.iter().map(|&i| refs[i]).collect();
        let other = merge_experts(&shuffled, MergeMode::ProductAverage).unwrap();
        for (x, y) in base.deltas.iter().zip(&other.deltas) {
            assert!(max_diff(x.data(), y.data()) < 1e-12);
        }
    }
}

#[test]
fn identical_experts_are_a_fixed_point() {
    let (_, experts) = pool(1, 3);
    let copies = vec![&experts[0]; 7];
    for mode in [MergeMode::ProductAverage, MergeMode::ParamAverage] {
        let merged = merge_experts(&copies, mode).unwrap();
        for (s, d) in merged.deltas.iter().enumerate() {
            assert_eq!(d, &experts[0].modules[s].delta(), "{mode:?} site {s}");
        }
    }
}

#[test]
fn parameter_average_multiplies_mean_factors() {
    let (bb, _) = pool(1, 0);
    let mut rng = Rng::new(4);
    let experts: Vec<_> = (0..3).map(|z| common::random_expert(&bb, &format!("e{z}"), 2, &mut rng)).collect();
    let refs: Vec<_> = experts.iter().collect();
    let merged = merge_experts(&refs, MergeMode::ParamAverage).unwrap();
    let mean = |f: &dyn Fn(&LoraExpert) -> &Tensor| {
        let t0 = f(&experts[0]);
        let data = (0..t0.numel()).map(|i| experts.iter().map(|e| f(e).data()[i]).sum::<f64>() / 3.0).collect();
        Tensor::new(t0.shape().to_vec(), data).unwrap()
    };
    for s in 0..merged.deltas.len() {
        let want = mean(&|e| &e.modules[s].b).matmul(&mean(&|e| &e.modules[s].a)).unwrap();
        assert!(max_diff(merged.deltas[s].data(), want.data()) < 1e-12);
    }
    // Mixed ranks cannot be parameter-averaged.
    let (_, mixed) = pool(2, 5);
    let refs: Vec<_> = mixed.iter().collect();
    assert!(merge_experts(&refs, MergeMode::ParamAverage).is_err());
    assert!(merge_experts(&refs, MergeMode::ProductAverage).is_ok());
}

#[test]
fn merged_adapter_applies_the_dense_delta() {
    // One expert merged with itself behaves like that expert's plain LoRA.
    let (bb, experts) = pool(1, 6);
    let (_, suite, _) = common::tiny_world();
    let ex: Vec<_> = suite.held_in().next().unwrap().test.examples.iter().take(4).collect();
    let batch = Batch::from_examples(&ex).unwrap();
    let merged = merge_experts(&[&experts[0]], MergeMode::ProductAverage).unwrap();
    let run = |adapter: &dyn lora_router::SiteAdapter| {
        let mut g = Graph::new();
        let out = bb.forward(&mut g, &batch, adapter).unwrap();
        g.value(out.logits).data().to_vec()
    };
    let a = run(&merged);
    let b = run(&lora_router::experts::LoraAdapter { expert: &experts[0] });
    assert!(max_diff(&a, &b) < 1e-10);
}
