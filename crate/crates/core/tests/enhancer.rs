mod common;

use std::collections::BTreeSet;

use common::{clusters, random_group, tiny_backbone};
use fedet::enhancer::{assign_new_classes, cosine, enhancer_forward, mean_embedding, select_group};
use fedet::federation::{comm_cost, serialize_group, wire::payload_floats};
use fedet::{Activation, EnhancerGroup, EnhancerParams, EnhancerPool, SelectModule, Tensor};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn identity_init_passes_input_through(
        d in 2usize..10, seed in any::<u64>(),
        x in prop::collection::vec(-5.0f64..5.0, 10),
    ) {
        let b = d / 2;
        let e = EnhancerParams::identity_init(d, b.max(1).min(d - 1), Activation::Gelu, seed);
        let y = enhancer_forward(&x[..d], &e).unwrap();
        prop_assert_eq!(&y[..], &x[..d]);
    }

    #[test]
    fn counted_parameters_match_payload(
        depth in 1usize..4, d in 3usize..10, classes in 0usize..6, seed in any::<u64>(),
    ) {
        let b = d / 3 + 1;
        let enhancers = (0..depth).map(|i| EnhancerParams::random(d, b, Activation::Relu, seed ^ i as u64, 0.1)).collect();
        let domain: Vec<u32> = (0..classes as u32).collect();
        let g = EnhancerGroup::new(0, 0, enhancers, Tensor::zeros(&[d, classes]), domain).unwrap();
        let formula = comm_cost(depth as u64, d as u64, b as u64, classes as u64) as usize;
        prop_assert_eq!(g.parameter_count(), formula);
        prop_assert_eq!(payload_floats(&serialize_group(&g).unwrap()).unwrap(), formula);
    }
}

#[test]
fn widening_appends_zero_columns() {
    let bb = tiny_backbone();
    let mut g = random_group(0, &[0, 1], &bb, 2, 3);
    let before = g.head.clone();
    g.widen_head(&[5]).unwrap();
    assert_eq!(g.domain, vec![0, 1, 5]);
    for r in 0..bb.width() {
        assert_eq!(&g.head.row(r)[..2], before.row(r));
        assert_eq!(g.head.row(r)[2], 0.0);
    }
    assert!(g.widen_head(&[1]).is_err());
}

#[test]
fn pool_rejects_shared_classes() {
    let bb = tiny_backbone();
    let a = random_group(0, &[0, 1], &bb, 2, 3);
    let b = random_group(1, &[1, 2], &bb, 2, 4);
    assert!(EnhancerPool::from_groups(vec![a.clone(), b]).is_err());
    let c = random_group(1, &[2, 3], &bb, 2, 4);
    let pool = EnhancerPool::from_groups(vec![a, c]).unwrap();
    assert_eq!(pool.group_of(3), Some(1));
    assert_eq!(pool.all_classes(), BTreeSet::from([0, 1, 2, 3]));
}

/// Straight-line re-derivation of the assignment rule.
fn oracle(new: &[Vec<f64>], groups: &[Vec<Vec<f64>>]) -> usize {
    if let Some(i) = groups.iter().position(|g| g.is_empty()) {
        return i;
    }
    let mut best = (0, f64::NEG_INFINITY);
    for (i, protos) in groups.iter().enumerate() {
        let mut s = 0.0;
        for m in new {
            for p in protos {
                s += cosine(m, p);
            }
        }
        s /= (new.len() * protos.len()) as f64;
        if s > best.1 {
            best = (i, s);
        }
    }
    best.0
}

#[test]
fn assignment_matches_brute_force_scores() {
    let bb = tiny_backbone();
    for trial in 0..20u64 {
        let pool = EnhancerPool::new(3, bb.depth(), bb.width(), 2, Activation::Gelu, trial).unwrap();
        let mut selector = SelectModule::new();
        let mut protos: Vec<Vec<Vec<f64>>> = vec![vec![]; 3];
        let mut next = 0u32;
        for round in 0..5 {
            let classes: Vec<u32> = (next..next + 1 + (round % 2)).collect();
            next += classes.len() as u32;
            let data = clusters(&classes, 3, &bb, 1.0, trial * 10 + round as u64);
            let batches: Vec<(u32, Vec<&Tensor>)> = classes
                .iter()
                .map(|&c| (c, data.iter().filter(|s| s.label == c).map(|s| &s.sample).collect()))
                .collect();
            let means: Vec<Vec<f64>> = batches.iter().map(|(_, s)| mean_embedding(s, &bb).unwrap()).collect();
            let want = oracle(&means, &protos);
            let got = assign_new_classes(&batches, &pool, &mut selector, &bb).unwrap();
            assert_eq!(got as usize, want, "trial {trial} round {round}");
            protos[want].extend(means);
        }
    }
}

#[test]
fn assigning_a_known_class_fails() {
    let bb = tiny_backbone();
    let pool = EnhancerPool::new(2, bb.depth(), bb.width(), 2, Activation::Gelu, 0).unwrap();
    let mut selector = SelectModule::new();
    let data = clusters(&[4], 2, &bb, 1.0, 0);
    let batch = vec![(4, data.iter().map(|s| &s.sample).collect::<Vec<_>>())];
    assign_new_classes(&batch, &pool, &mut selector, &bb).unwrap();
    assert!(assign_new_classes(&batch, &pool, &mut selector, &bb).is_err());
    assert!(assign_new_classes(&[], &pool, &mut selector, &bb).is_err());
}

#[test]
fn selection_follows_nearest_prototype() {
    let bb = tiny_backbone();
    let pool = EnhancerPool::new(2, bb.depth(), bb.width(), 2, Activation::Gelu, 0).unwrap();
    let mut selector = SelectModule::new();
    selector.register(0, vec![1.0; bb.width()], 0);
    let mut other = vec![-1.0; bb.width()];
    other[0] = 3.0;
    selector.register(1, other, 1);
    let sample = clusters(&[0], 1, &bb, 1.0, 0).remove(0).sample;
    let emb = bb.embed_pooled(&sample).unwrap();
    let want = if cosine(&emb, selector.prototype(0).unwrap()) >= cosine(&emb, selector.prototype(1).unwrap()) { 0 } else { 1 };
    assert_eq!(select_group(&sample, &pool, &selector, &bb).unwrap(), want);
}
