//! Standardization, affinities, top-k selection and mixing weights.

use proptest::prelude::*;

use lora_router::routing::{standardize, top_k, Scoring, SiteRouter};

fn router(rows: &[Vec<f64>], k: usize) -> SiteRouter {
    let names = (0..rows.len()).map(|z| format!("e{z}")).collect();
    SiteRouter::from_rows("site", names, rows, k, Scoring::Standardized).unwrap()
}

fn vector(n: std::ops::Range<usize>) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-50.0f64..50.0, n)
}

fn spread(x: &[f64]) -> f64 {
    let m = x.iter().sum::<f64>() / x.len() as f64;
    (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / x.len() as f64).sqrt()
}

fn pool() -> impl Strategy<Value = (usize, Vec<Vec<f64>>, Vec<f64>)> {
    (2usize..24, 1usize..7).prop_flat_map(|(n, z)| {
        (Just(n), prop::collection::vec(prop::collection::vec(-3.0f64..3.0, n), z), prop::collection::vec(-3.0f64..3.0, n))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn standardized_moments(x in vector(2..40)) {
        prop_assume!(spread(&x) > 1e-6);
        let s = standardize(&x).unwrap();
        let n = s.len() as f64;
        let mean = s.iter().sum::<f64>() / n;
        let std = (s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        prop_assert!(mean.abs() < 1e-8);
        prop_assert!((std - 1.0).abs() < 1e-8);
    }

    #[test]
    fn standardize_is_idempotent(x in vector(2..40)) {
        prop_assume!(spread(&x) > 1e-6);
        let once = standardize(&x).unwrap();
        let twice = standardize(&once).unwrap();
        for (a, b) in once.iter().zip(&twice) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn affinity_is_bounded_by_width((n, rows, u) in pool()) {
        let r = router(&rows, 1);
        for a in r.affinities(&u).unwrap() {
            prop_assert!(a.abs() <= n as f64 + 1e-9);
        }
    }

    #[test]
    fn self_affinity_is_width(x in vector(2..40)) {
        prop_assume!(spread(&x) > 1e-6);
        let r = router(std::slice::from_ref(&x), 1);
        let a = r.affinities(&x).unwrap()[0];
        prop_assert!((a - x.len() as f64).abs() < 1e-8);
    }

    #[test]
    fn weights_sum_to_one_and_selection_has_k((_, rows, u) in pool(), k in 1usize..7) {
        let k = k.min(rows.len());
        let d = router(&rows, k).route(&u).unwrap();
        prop_assert_eq!(d.selected.len(), k.min(rows.len()));
        prop_assert!((d.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(d.weights.iter().all(|&w| w > 0.0));
        // Selected experts are the k largest, in descending order.
        let kth = d.affinities[*d.selected.last().unwrap()];
        for z in 0..rows.len() {
            if !d.selected.contains(&z) {
                prop_assert!(d.affinities[z] <= kth);
            }
        }
    }

    #[test]
    fn decisions_are_affine_invariant((_, rows, u) in pool(), a in 0.01f64..100.0, b in -100.0f64..100.0, k in 1usize..7) {
        prop_assume!(spread(&u) > 1e-3);
        let r = router(&rows, k.min(rows.len()));
        let base = r.route(&u).unwrap();
        let moved: Vec<f64> = u.iter().map(|x| a * x + b).collect();
        let other = r.route(&moved).unwrap();
        for (x, y) in base.affinities.iter().zip(&other.affinities) {
            prop_assert!((x - y).abs() < 1e-10, "affinity {} vs {}", x, y);
        }
        // Selections may differ only by swapping experts whose scores tie within tolerance.
        for (&p, &q) in base.selected.iter().zip(&other.selected) {
            prop_assert!(p == q || (base.affinities[p] - base.affinities[q]).abs() < 1e-10);
        }
        for (x, y) in base.weights.iter().zip(&other.weights) {
            prop_assert!((x - y).abs() < 1e-10, "weight {} vs {}", x, y);
        }
    }

    #[test]
    fn full_probabilities_agree_with_top1((_, rows, u) in pool()) {
        let r = router(&rows, 1);
        let p = r.full_probabilities(&u).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let top = r.route(&u).unwrap().selected[0];
        let best = p.iter().cloned().fold(f64::MIN, f64::max);
        prop_assert_eq!(p[top], best);
    }

    #[test]
    fn raising_a_score_keeps_it_selected(scores in prop::collection::vec(-5.0f64..5.0, 2..10), k in 1usize..10, bump in 0.0f64..5.0) {
        let k = k.min(scores.len());
        let chosen = top_k(&scores, k);
        for &z in &chosen {
            let mut s = scores.clone();
            s[z] += bump;
            prop_assert!(top_k(&s, k).contains(&z));
        }
    }
}

#[test]
fn standardize_hand_cases() {
    let s = standardize(&[1.0, 2.0, 3.0]).unwrap();
    for (a, b) in s.iter().zip([-1.2247, 0.0, 1.2247]) {
        assert!((a - b).abs() < 1e-4);
    }
    assert_eq!(standardize(&[5.0, 5.0, 5.0]).unwrap(), vec![0.0; 3]);
    assert!(standardize(&[1.0]).is_err());
    assert!(standardize(&[]).is_err());
}

#[test]
fn constant_gate_has_zero_affinity() {
    let r = router(&[vec![0.0; 4], vec![1.0, 2.0, 3.0, 4.0]], 1);
    let a = r.affinities(&[4.0, 3.0, 2.0, 1.0]).unwrap();
    assert_eq!(a[0], 0.0);
}

#[test]
fn hand_affinity() {
    // v = [0, 2] standardizes to [−1, 1]; so does u = [0, 4].
    let r = router(&[vec![0.0, 2.0]], 1);
    assert!((r.affinities(&[0.0, 4.0]).unwrap()[0] - 2.0).abs() < 1e-12);
}

#[test]
fn softmax_of_scaled_affinities() {
    // Rows are already standardized and orthogonal; u mixes row 0 with a third
    // orthogonal direction so that the affinities are exactly (2, 0) at n = 4.
    let rows = vec![vec![1.0, -1.0, 1.0, -1.0], vec![1.0, 1.0, -1.0, -1.0]];
    let r = router(&rows, 2);
    let h = 3f64.sqrt() / 2.0;
    let u = [0.5 + h, -0.5 - h, 0.5 - h, -0.5 + h];
    let d = r.route(&u).unwrap();
    let a = &d.affinities;
    assert!((a[0] - 2.0).abs() < 1e-9 && a[1].abs() < 1e-9, "{a:?}");
    assert_eq!(d.selected, vec![0, 1]);
    assert!((d.weights[0] - 0.7311).abs() < 1e-4 && (d.weights[1] - 0.2689).abs() < 1e-4);
}

#[test]
fn ordering_and_ties() {
    assert_eq!(top_k(&[3.0, 1.0, 2.5], 2), vec![0, 2]);
    assert_eq!(top_k(&[1.0, 1.0, 1.0], 2), vec![0, 1]);
    assert_eq!(top_k(&[0.0, 2.0, 2.0, 2.0], 2), vec![1, 2]);
    let same = vec![vec![1.0, 2.0, 0.0], vec![1.0, 2.0, 0.0]];
    let r = router(&same, 1);
    let d = r.route(&[3.0, -1.0, 0.5]).unwrap();
    assert_eq!(d.affinities[0], d.affinities[1]);
    assert_eq!(d.selected, vec![0]);
    let p = r.full_probabilities(&[3.0, -1.0, 0.5]).unwrap();
    assert_eq!(p, vec![0.5, 0.5]);
}

#[test]
fn k_bounds_and_width_are_checked() {
    let rows = vec![vec![1.0, 2.0], vec![2.0, 1.0]];
    let names = vec!["a".to_string(), "b".to_string()];
    assert!(SiteRouter::from_rows("s", names.clone(), &rows, 3, Scoring::Standardized).is_err());
    assert!(SiteRouter::from_rows("s", names, &rows, 0, Scoring::Standardized).is_err());
    assert!(router(&rows, 1).route(&[1.0, 2.0, 3.0]).is_err());
    let single = router(&[vec![0.3, -0.2, 0.9]], 1);
    let d = single.route(&[1.0, 5.0, -2.0]).unwrap();
    assert_eq!((d.selected, d.weights), (vec![0], vec![1.0]));
}
