//! Analytic gradients against central finite differences.

mod common;

use lora_router::autodiff::Graph;
use lora_router::experts::{BoundExpert, LoraExpert};
use lora_router::taskgen::sample_batch;
use lora_router::{Batch, Result, Rng, Tensor, Var};

const STEP: f64 = 1e-6;
const TOL: f64 = 1e-4;
/// Below this magnitude both gradients are treated as zero and compared absolutely.
const FLOOR: f64 = 1e-6;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

/// Checks every coordinate of every input of a scalar function built on a graph.
fn check_op(inputs: &[Tensor], f: impl Fn(&mut Graph, &[Var]) -> Result<Var>) {
    let eval = |xs: &[Tensor]| {
        let mut g = Graph::new();
        let vs: Vec<Var> = xs.iter().map(|x| g.leaf(x.clone(), false)).collect();
        let out = f(&mut g, &vs).unwrap();
        g.value(out).item()
    };
    let mut g = Graph::new();
    let vs: Vec<Var> = inputs.iter().map(|x| g.param(x.clone())).collect();
    let out = f(&mut g, &vs).unwrap();
    g.backward(out).unwrap();
    for (i, v) in vs.iter().enumerate() {
        let analytic = g.take_grad(*v).unwrap();
        for j in 0..inputs[i].numel() {
            let mut xs = inputs.to_vec();
            xs[i].data_mut()[j] += STEP;
            let up = eval(&xs);
            xs[i].data_mut()[j] -= 2.0 * STEP;
            let down = eval(&xs);
            let numeric = (up - down) / (2.0 * STEP);
            let e = rel_err(analytic[j], numeric);
            assert!(e < TOL, "input {i} coord {j}: analytic {} numeric {numeric} rel {e}", analytic[j]);
        }
    }
}

fn rand(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

fn positive(shape: &[usize], rng: &mut Rng) -> Tensor {
    let mut t = rand(shape, rng);
    t.data_mut().iter_mut().for_each(|x| *x = 0.5 + x.abs());
    t
}

/// Weighted sum so that every output coordinate gets a distinct upstream gradient.
fn project(g: &mut Graph, x: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let w = Tensor::randn(&shape, 1.0, &mut Rng::new(seed).split("projection"));
    let w = g.constant(w);
    let p = g.mul(x, w)?;
    Ok(g.sum(p))
}

#[test]
fn matmul_variants() {
    let mut rng = Rng::new(1);
    let (a, b) = (rand(&[3, 4], &mut rng), rand(&[4, 2], &mut rng));
    check_op(&[a.clone(), b.clone()], |g, v| {
        let y = g.matmul(v[0], v[1])?;
        project(g, y, 1)
    });
    let (at, bt) = (a.transpose().unwrap(), b.transpose().unwrap());
    check_op(&[at, bt], |g, v| {
        let y = g.matmul_t(v[0], v[1], true, true)?;
        project(g, y, 2)
    });
    let x = rand(&[2, 3, 4], &mut rng);
    let y = rand(&[2, 5, 4], &mut rng);
    check_op(&[x, y], |g, v| {
        let z = g.bmm(v[0], v[1], false, true)?;
        project(g, z, 3)
    });
}

#[test]
fn elementwise_ops() {
    let mut rng = Rng::new(2);
    let (a, b) = (rand(&[3, 4], &mut rng), rand(&[3, 4], &mut rng));
    let row = rand(&[4], &mut rng);
    check_op(&[a.clone(), row], |g, v| {
        let y = g.add(v[0], v[1])?;
        project(g, y, 4)
    });
    check_op(&[a.clone(), b], |g, v| {
        let y = g.mul(v[0], v[1])?;
        project(g, y, 5)
    });
    check_op(&[a.clone()], |g, v| {
        let y = g.scale(v[0], -1.7);
        let y = g.sigmoid(y);
        project(g, y, 6)
    });
    check_op(&[a.clone()], |g, v| {
        let y = g.exp(v[0]);
        project(g, y, 7)
    });
    check_op(&[positive(&[3, 4], &mut rng)], |g, v| {
        let y = g.log(v[0])?;
        project(g, y, 8)
    });
    // Keep inputs away from the kink.
    let mut r = rand(&[3, 4], &mut rng);
    r.data_mut().iter_mut().for_each(|x| *x += x.signum() * 0.1);
    check_op(&[r], |g, v| {
        let y = g.relu(v[0]);
        project(g, y, 9)
    });
    check_op(&[a], |g, v| {
        let y = g.mean(v[0]);
        let s = g.sum(v[0]);
        let z = g.mul(y, s)?;
        Ok(z)
    });
}

#[test]
fn normalizing_ops() {
    let mut rng = Rng::new(3);
    let x = rand(&[3, 5], &mut rng);
    check_op(&[x.clone()], |g, v| {
        let y = g.softmax(v[0], 1)?;
        project(g, y, 10)
    });
    check_op(&[x.clone(), rand(&[5], &mut rng), rand(&[5], &mut rng)], |g, v| {
        let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
        project(g, y, 11)
    });
    check_op(&[x], |g, v| g.cross_entropy(v[0], &[1, 4, 0], &[true, false, true]));
}

#[test]
fn indexing_ops() {
    let mut rng = Rng::new(4);
    let table = rand(&[6, 3], &mut rng);
    check_op(&[table], |g, v| {
        let y = g.gather_rows(v[0], &[2, 0, 2, 5])?;
        project(g, y, 12)
    });
    let x = rand(&[2, 3, 4], &mut rng);
    check_op(&[x], |g, v| {
        let y = g.permute(v[0], &[1, 0, 2])?;
        let y = g.reshape(y, &[3, 8])?;
        project(g, y, 13)
    });
}

struct Probe<'a> {
    backbone: &'a lora_router::Backbone,
    batch: &'a Batch,
    gated: bool,
}

impl Probe<'_> {
    fn loss(&self, e: &LoraExpert) -> f64 {
        let mut g = Graph::new();
        let bound = BoundExpert::bind(&mut g, e, false, false, self.gated);
        let out = self.backbone.forward(&mut g, self.batch, &bound).unwrap();
        let l = g.cross_entropy(out.logits, &self.batch.targets, &self.batch.tgt_valid).unwrap();
        g.value(l).item()
    }

    /// Analytic `(A, B, v)` gradients for every site.
    fn grads(&self, e: &LoraExpert) -> Vec<[Vec<f64>; 3]> {
        let mut g = Graph::new();
        let bound = BoundExpert::bind(&mut g, e, true, self.gated, self.gated);
        let out = self.backbone.forward(&mut g, self.batch, &bound).unwrap();
        let l = g.cross_entropy(out.logits, &self.batch.targets, &self.batch.tgt_valid).unwrap();
        g.backward(l).unwrap();
        (0..e.modules.len())
            .map(|s| {
                let v = if self.gated { g.take_grad(bound.v[s]).unwrap() } else { Vec::new() };
                [g.take_grad(bound.a[s]).unwrap(), g.take_grad(bound.b[s]).unwrap(), v]
            })
            .collect()
    }
}

fn param(e: &mut LoraExpert, site: usize, which: usize) -> &mut Tensor {
    let m = &mut e.modules[site];
    match which {
        0 => &mut m.a,
        1 => &mut m.b,
        _ => &mut m.gate,
    }
}

/// 20 random micro-batches; on each, sampled coordinates of A, B (and v) at sampled sites.
fn check_expert(gated: bool) {
    let (_, suite, bb) = common::tiny_world();
    let mut rng = Rng::new(if gated { 11 } else { 10 });
    let task = suite.held_in().next().unwrap();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for round in 0..20 {
        let e = common::random_expert(&bb, "probe", 2, &mut rng.split(&format!("expert{round}")));
        let batch = sample_batch(&task.train.examples, 2 + round % 3, &mut rng).unwrap();
        let probe = Probe { backbone: &bb, batch: &batch, gated };
        let grads = probe.grads(&e);
        for _ in 0..4 {
            let site = rng.below(e.modules.len());
            for which in 0..if gated { 3 } else { 2 } {
                let n = param(&mut e.clone(), site, which).numel();
                let j = rng.below(n);
                let mut up = e.clone();
                param(&mut up, site, which).data_mut()[j] += STEP;
                let mut down = e.clone();
                param(&mut down, site, which).data_mut()[j] -= STEP;
                let numeric = (probe.loss(&up) - probe.loss(&down)) / (2.0 * STEP);
                let analytic = grads[site][which][j];
                let err = rel_err(analytic, numeric);
                assert!(
                    err < TOL,
                    "round {round} site {site} param {which} coord {j}: analytic {analytic} numeric {numeric} rel {err}"
                );
                worst = worst.max(err);
                checked += 1;
            }
        }
    }
    println!("gated={gated}: {checked} coordinates, worst relative error {worst:.2e}");
}

#[test]
fn lora_hook_gradients() {
    check_expert(false);
}

#[test]
fn gated_hook_gradients() {
    check_expert(true);
}
