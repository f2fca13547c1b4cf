//! Generated corpus against an independent rule interpreter and corpus invariants.

use std::collections::{HashMap, HashSet};

use lora_router::backbone::PAD;
use lora_router::taskgen::{
    generate_suite, sample_batch, save_suite, Example, Rule, Suite, SuiteConfig, TaskKind, TaskSpec,
};
use lora_router::Rng;

fn suite() -> Suite {
    generate_suite(&SuiteConfig::default()).unwrap()
}

/// Reference semantics, written without the generator's helpers.
fn interpret(spec: &TaskSpec, content: &[usize], all: &HashMap<&str, &TaskSpec>) -> Vec<usize> {
    match &spec.rule {
        Rule::Permutation { image } => {
            let table: HashMap<usize, usize> = spec.slice.iter().copied().zip(image.iter().copied()).collect();
            content.iter().map(|t| table[t]).collect()
        }
        Rule::Affix { suffix } => [content, suffix.as_slice()].concat(),
        Rule::CopySpan { start, len } => content[*start..*start + *len].to_vec(),
        Rule::Composed { components, spans } => {
            let mut out = Vec::new();
            let mut rest = content;
            for (id, &len) in components.iter().zip(spans) {
                let (head, tail) = rest.split_at(len);
                out.extend(interpret(all[id.as_str()], head, all));
                rest = tail;
            }
            assert!(rest.is_empty(), "spans cover the content");
            out
        }
    }
}

#[test]
fn interpreter_reproduces_every_gold_target() {
    let s = suite();
    let all: HashMap<&str, &TaskSpec> = s.tasks.iter().map(|t| (t.spec.task_id.as_str(), &t.spec)).collect();
    let mut checked = 0;
    for t in &s.tasks {
        for set in [&t.train, &t.validation, &t.test] {
            for e in &set.examples {
                assert_eq!(&e.input[..t.spec.template.len()], t.spec.template.as_slice());
                let content = &e.input[t.spec.template.len()..];
                assert_eq!(interpret(&t.spec, content, &all), e.target, "{}", t.spec.task_id);
                assert_eq!(e.choices.iter().filter(|c| **c == e.target).count(), 1);
                checked += 1;
            }
        }
    }
    assert_eq!(checked, 12 * 2400);
}

#[test]
fn suite_shape_and_task_structure() {
    let s = suite();
    let held_in: Vec<_> = s.held_in().collect();
    let held_out: Vec<_> = s.held_out().collect();
    assert_eq!((held_in.len(), held_out.len()), (8, 4));
    let composed: Vec<_> = held_out.iter().filter(|t| t.spec.kind == TaskKind::Composed).collect();
    assert_eq!(composed.len(), 2);
    // Held-in tasks are distinguishable from their inputs: distinct templates, disjoint slices.
    let templates: HashSet<_> = s.tasks.iter().map(|t| t.spec.template.clone()).collect();
    assert_eq!(templates.len(), s.tasks.len());
    for (i, a) in held_in.iter().enumerate() {
        for b in &held_in[i + 1..] {
            assert!(a.spec.slice.iter().all(|x| !b.spec.slice.contains(x)));
        }
        if let Rule::Permutation { image } = &a.spec.rule {
            let mut sorted = image.clone();
            sorted.sort();
            assert_eq!(sorted, a.spec.slice, "permutation is a bijection on its slice");
        }
    }
    for t in &composed {
        let Rule::Composed { components, spans } = &t.spec.rule else { panic!("composed rule") };
        assert!(components.len() >= 2);
        assert_ne!(components[0], components[1]);
        for c in components {
            assert!(s.task(c).unwrap().spec.held_in);
        }
        // Each span draws from its own component's vocabulary.
        for e in &t.test.examples {
            let content = &e.input[t.spec.template.len()..];
            let mut at = 0;
            for (c, &len) in components.iter().zip(spans) {
                let slice = &s.task(c).unwrap().spec.slice;
                assert!(content[at..at + len].iter().all(|x| slice.contains(x)));
                at += len;
            }
        }
    }
    for t in held_out.iter().filter(|t| t.spec.kind != TaskKind::Composed) {
        let src = s.task(t.spec.source_task.as_deref().unwrap()).unwrap();
        assert_eq!(t.spec.rule, src.spec.rule);
        assert_ne!(t.spec.template, src.spec.template);
    }
}

#[test]
fn splits_are_disjoint_and_held_out_does_not_leak() {
    let s = suite();
    for t in &s.tasks {
        let seqs = |set: &[Example]| set.iter().map(|e| e.input.clone()).collect::<HashSet<_>>();
        let (a, b, c) = (seqs(&t.train.examples), seqs(&t.validation.examples), seqs(&t.test.examples));
        assert!(a.is_disjoint(&b) && a.is_disjoint(&c) && b.is_disjoint(&c), "{}", t.spec.task_id);
    }
    let held_in: HashSet<Vec<usize>> = s
        .held_in()
        .flat_map(|t| [&t.train, &t.validation, &t.test])
        .flat_map(|set| set.examples.iter().map(|e| e.input.clone()))
        .collect();
    for t in s.held_out() {
        for set in [&t.train, &t.validation, &t.test] {
            assert!(set.examples.iter().all(|e| !held_in.contains(&e.input)), "{}", t.spec.task_id);
        }
    }
}

#[test]
fn same_seed_gives_byte_identical_corpora() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    save_suite(&suite(), a.path()).unwrap();
    save_suite(&suite(), b.path()).unwrap();
    let mut names: Vec<_> = std::fs::read_dir(a.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(names.len() > 10);
    for n in names {
        assert_eq!(std::fs::read(a.path().join(&n)).unwrap(), std::fs::read(b.path().join(&n)).unwrap());
    }
    let other = generate_suite(&SuiteConfig { seed: 1, ..SuiteConfig::default() }).unwrap();
    assert_ne!(other.tasks[0].train, suite().tasks[0].train);
}

#[test]
fn too_small_vocabulary_is_rejected() {
    let cfg = SuiteConfig { vocab_size: 30, ..SuiteConfig::default() };
    assert!(generate_suite(&cfg).is_err());
    assert!(generate_suite(&SuiteConfig { n_heldin: 1, ..SuiteConfig::default() }).is_err());
}

#[test]
fn sampling_is_uniform() {
    let s = suite();
    let set = &s.tasks[0].train.examples[..20];
    let n = 10_000;
    let batch = sample_batch(set, n, &mut Rng::new(3)).unwrap();
    let index: HashMap<&[usize], usize> = set.iter().enumerate().map(|(i, e)| (e.input.as_slice(), i)).collect();
    let mut counts = [0usize; 20];
    for row in batch.src_ids.chunks(batch.src_len) {
        counts[index[row]] += 1;
    }
    let expected = n as f64 / 20.0;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    // 99.9th percentile of χ² with 19 degrees of freedom.
    assert!(chi2 < 43.82, "chi2 = {chi2}, counts {counts:?}");
}

#[test]
fn batches_pad_and_mask_the_tail() {
    let s = suite();
    let set = &s.tasks[2].train.examples;
    let one = sample_batch(set, 1, &mut Rng::new(0)).unwrap();
    assert_eq!((one.sources, one.decodes), (1, 1));
    let b = sample_batch(set, 16, &mut Rng::new(1)).unwrap();
    for r in 0..b.decodes {
        let row = &b.tgt_valid[r * b.tgt_len..(r + 1) * b.tgt_len];
        let len = row.iter().filter(|&&v| v).count();
        assert!(row[..len].iter().all(|&v| v), "mask is a prefix");
        assert!(b.targets[r * b.tgt_len + len..(r + 1) * b.tgt_len].iter().all(|&t| t == PAD));
    }
    assert!(sample_batch(&[], 4, &mut Rng::new(0)).is_err());
}
