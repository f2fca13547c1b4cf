//! Power-iteration gates against a dense SVD.

mod common;

use lora_router::baselines::{arrow_router, top_right_singular_vector};
use lora_router::routing::Scoring;
use lora_router::{Rng, Tensor};

/// Top right singular vector of `B·A` by one-sided Jacobi SVD: rotate column
/// pairs of `M` until all are orthogonal; the accumulated rotations are `V`
/// and the column norms are the singular values.
fn dense_top(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let m = b.matmul(a).unwrap();
    let (d, n) = m.dims2().unwrap();
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| (0..d).map(|i| m.at2(i, j)).collect()).collect();
    let mut v: Vec<Vec<f64>> = (0..n).map(|j| (0..n).map(|i| f64::from(u8::from(i == j))).collect()).collect();
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>();
    for _sweep in 0..100 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (alpha, beta, gamma) = (dot(&cols[p], &cols[p]), dot(&cols[q], &cols[q]), dot(&cols[p], &cols[q]));
                if gamma.abs() <= 1e-15 * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for mat in [&mut cols, &mut v] {
                    let (x, y) = (mat[p].clone(), mat[q].clone());
                    mat[p] = x.iter().zip(&y).map(|(a, b)| c * a - s * b).collect();
                    mat[q] = x.iter().zip(&y).map(|(a, b)| s * a + c * b).collect();
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let top = (0..n)
        .max_by(|&i, &j| dot(&cols[i], &cols[i]).total_cmp(&dot(&cols[j], &cols[j])))
        .unwrap();
    v[top].clone()
}

fn cosine(x: &[f64], y: &[f64]) -> f64 {
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    dot / (norm(x) * norm(y))
}

#[test]
fn power_iteration_matches_dense_svd_on_50_sites() {
    let mut rng = Rng::new(42);
    let mut worst: f64 = 1.0;
    for case in 0..50 {
        let n = 2 + rng.below(31);
        let d = 2 + rng.below(31);
        let r = 1 + rng.below(4.min(n).min(d));
        let a = Tensor::randn(&[r, n], 1.0, &mut rng);
        let b = Tensor::randn(&[d, r], 1.0, &mut rng);
        let v = top_right_singular_vector(&a, &b, &mut rng.split(&format!("start{case}"))).unwrap();
        let c = cosine(&v, &dense_top(&a, &b)).abs();
        assert!(c > 0.999, "case {case} (n={n}, d={d}, r={r}): |cos| = {c}");
        worst = worst.min(c);
    }
    println!("worst |cosine| over 50 sites: {worst:.12}");
}

#[test]
fn zero_update_gives_zero_gate() {
    let a = Tensor::randn(&[2, 5], 1.0, &mut Rng::new(1));
    let b = Tensor::zeros(&[4, 2]);
    let v = top_right_singular_vector(&a, &b, &mut Rng::new(2)).unwrap();
    assert!(v.iter().all(|&x| x == 0.0));
}

#[test]
fn router_rows_are_the_experts_top_directions() {
    let (_, _, bb) = common::tiny_world();
    let mut rng = Rng::new(7);
    let experts: Vec<_> = (0..3).map(|z| common::random_expert(&bb, &format!("e{z}"), 2, &mut rng)).collect();
    let refs: Vec<_> = experts.iter().collect();
    let router = arrow_router(&bb, &refs, 2, 0).unwrap();
    for (s, site) in router.sites.iter().enumerate() {
        assert_eq!(site.scoring, Scoring::AbsoluteDot);
        for (z, e) in experts.iter().enumerate() {
            let m = &e.modules[s];
            let c = cosine(site.gates.row(z), &dense_top(&m.a, &m.b)).abs();
            assert!(c > 0.999, "site {s} expert {z}: |cos| = {c}");
        }
    }
}
