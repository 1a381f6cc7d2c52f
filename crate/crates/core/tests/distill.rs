mod common;

use common::{clusters, random_group, tiny_backbone};
use fedet::distill::*;
use fedet::enhancer::group_forward;
use fedet::{Activation, EnhancerGroup, Tensor};
use proptest::prelude::*;

fn vec_in(len: std::ops::RangeInclusive<usize>) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-50.0f64..50.0, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn local_segments_are_centered(old in vec_in(1..=16), new in vec_in(1..=16)) {
        let t = center_targets_local(&old, &new).unwrap();
        prop_assert_eq!(t.len(), old.len() + new.len());
        prop_assert!(t[..old.len()].iter().sum::<f64>().abs() < 1e-9);
        prop_assert!(t[old.len()..].iter().sum::<f64>().abs() < 1e-9);
    }

    #[test]
    fn global_weights_sum_to_one_and_ignore_scale(
        (n, ups, hs) in (1usize..=8, 1usize..=6).prop_flat_map(|(n, q)| (
            Just(n),
            prop::collection::vec(prop::collection::vec(-20.0f64..20.0, n), q),
            prop::collection::vec(0.0f64..3.0, q),
        )),
        old in vec_in(0..=6),
        c in prop::sample::select(vec![0.5, 2.0, 10.0]),
    ) {
        let w = entropy_weights(&hs).unwrap();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let refs: Vec<&[f64]> = ups.iter().map(|u| u.as_slice()).collect();
        let base = center_targets_global(&old, &refs, &hs).unwrap();
        let scaled: Vec<f64> = hs.iter().map(|h| h * c).collect();
        let other = center_targets_global(&old, &refs, &scaled).unwrap();
        for (a, b) in base.iter().zip(&other) {
            prop_assert!((a - b).abs() < 1e-9);
        }
        prop_assert!(base[old.len()..].iter().sum::<f64>().abs() < 1e-9);
        prop_assert_eq!(base.len(), old.len() + n);
    }

    #[test]
    fn double_distill_loss_is_zero_only_at_target(a in vec_in(1..=12), shift in -3.0f64..3.0) {
        prop_assert_eq!(double_distill_loss(&a, &a).unwrap(), 0.0);
        let b: Vec<f64> = a.iter().map(|x| x + shift).collect();
        let l = double_distill_loss(&a, &b).unwrap();
        prop_assert!((l - shift * shift).abs() < 1e-9);
    }
}

#[test]
fn single_upload_needs_no_entropy() {
    let targets = center_targets_global(&[1.0, 3.0], &[&[4.0, 0.0, 2.0]], &[0.0]).unwrap();
    assert_eq!(targets, vec![-1.0, 1.0, 2.0, -2.0, 0.0]);
}

#[test]
fn invalid_entropies_are_rejected() {
    assert!(matches!(entropy_weights(&[1.0, -0.5]), Err(DistillError::InvalidEntropy(_))));
    assert!(matches!(entropy_weights(&[f64::NAN]), Err(DistillError::InvalidEntropy(_))));
    assert!(matches!(entropy_weights(&[]), Err(DistillError::NoUploads)));
}

fn spec(lr: f64, steps: usize, batch: usize) -> ConsolidationSpec {
    ConsolidationSpec {
        optimizer: OptimizerSettings {
            learning_rate: lr,
            max_steps: steps,
            batch_size: batch,
            ..OptimizerSettings::default()
        },
        require_full_coverage: true,
    }
}

#[derive(Default)]
struct Recorder {
    targets: Vec<Vec<Vec<f64>>>,
    params: Vec<Vec<f64>>,
    losses: Vec<f64>,
}

impl DistillObserver for Recorder {
    fn batch_targets(&mut self, _step: usize, targets: &[Vec<f64>]) {
        self.targets.push(targets.to_vec());
    }

    fn step(&mut self, _step: usize, loss: f64, student: &EnhancerGroup) {
        self.losses.push(loss);
        self.params.push(student.flat_params());
    }
}

/// A global teacher whose new-class logits are exactly those of `temp`.
fn as_upload(old: &EnhancerGroup, temp: &EnhancerGroup) -> EnhancerGroup {
    let d = temp.width();
    let (m, n) = (old.domain.len(), temp.domain.len());
    let mut head = vec![0.0; d * (m + n)];
    for r in 0..d {
        for j in 0..n {
            head[r * (m + n) + m + j] = temp.head.data()[r * n + j];
        }
    }
    let mut domain = old.domain.clone();
    domain.extend_from_slice(&temp.domain);
    EnhancerGroup::new(old.group_id, temp.task_id, temp.enhancers.clone(), Tensor::matrix(d, m + n, head).unwrap(), domain)
        .unwrap()
}

#[test]
fn one_upload_global_matches_local() {
    let bb = tiny_backbone();
    let old = random_group(0, &[0, 1], &bb, 2, 5);
    let temp = random_group(0, &[2, 3], &bb, 2, 9);
    let data = clusters(&[0, 1, 2, 3], 5, &bb, 1.0, 3);
    let s = spec(0.05, 50, 6);

    let mut local = Recorder::default();
    let l = consolidate_local_observed(&old, &temp, &data, &bb, &s, &mut local).unwrap();
    let upload = as_upload(&old, &temp);
    let mut global = Recorder::default();
    let mut source = CyclicBatches::new(&data, 6);
    let g = consolidate_global_observed(&old, &[(&upload, 0.7)], &mut source, &bb, &s, &mut global).unwrap();

    assert_eq!(local.targets.len(), 50);
    for (a, b) in local.targets.iter().flatten().zip(global.targets.iter().flatten()) {
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= 1e-12, "target {x} vs {y}");
        }
    }
    for (a, b) in local.params.iter().zip(&global.params) {
        let worst = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(worst <= 1e-10, "trajectory drift {worst}");
    }
    assert_eq!(l.group.domain, g.group.domain);
}

#[test]
fn two_upload_targets_match_brute_force() {
    let bb = tiny_backbone();
    let old = random_group(1, &[0, 1], &bb, 2, 21);
    let a = random_group(1, &[0, 1, 4, 5, 6], &bb, 2, 22);
    let b = random_group(1, &[0, 1, 4, 5, 6], &bb, 2, 23);
    let (ha, hb) = (0.4f64.ln() * -0.4 - 0.6 * 0.6f64.ln(), 1.0986);
    let data = clusters(&[0, 4, 5, 6], 2, &bb, 1.0, 4);
    let mut rec = Recorder::default();
    let mut source = CyclicBatches::new(&data, data.len());
    consolidate_global_observed(&old, &[(&a, ha), (&b, hb)], &mut source, &bb, &spec(0.0, 1, data.len()), &mut rec)
        .unwrap();

    for (s, got) in data.iter().zip(&rec.targets[0]) {
        let yo = group_forward(&s.sample, &old, &bb).unwrap();
        let ya = group_forward(&s.sample, &a, &bb).unwrap();
        let yb = group_forward(&s.sample, &b, &bb).unwrap();
        let mut want = Vec::new();
        let mo = (yo[0] + yo[1]) / 2.0;
        want.push(yo[0] - mo);
        want.push(yo[1] - mo);
        let mix: Vec<f64> = (2..5).map(|j| (ha * ya[j] + hb * yb[j]) / (ha + hb)).collect();
        let mm = (mix[0] + mix[1] + mix[2]) / 3.0;
        want.extend(mix.iter().map(|v| v - mm));
        for (x, y) in got.iter().zip(&want) {
            assert!((x - y).abs() <= 1e-12, "{x} vs {y}");
        }
    }
}

#[test]
fn temp_group_separates_clean_classes() {
    let bb = tiny_backbone();
    let data = clusters(&[3, 7], 20, &bb, 1.5, 8);
    let settings = OptimizerSettings {
        learning_rate: 0.2,
        max_steps: 200,
        batch_size: 8,
        ..OptimizerSettings::default()
    };
    let g = train_temp_group(&data, &[3, 7], &bb, 0, 2, Activation::Gelu, 4, &settings).unwrap();
    assert!(accuracy(&g, &bb, &data).unwrap() >= 0.95);
}

#[test]
fn zero_steps_keeps_initialization() {
    let bb = tiny_backbone();
    let data = clusters(&[0, 1], 4, &bb, 1.0, 8);
    let zero = OptimizerSettings {
        max_steps: 0,
        ..OptimizerSettings::default()
    };
    let a = train_temp_group(&data, &[0, 1], &bb, 0, 2, Activation::Gelu, 4, &zero).unwrap();
    let b = train_temp_group(&data, &[0, 1], &bb, 0, 2, Activation::Gelu, 4, &OptimizerSettings::default()).unwrap();
    let pristine = {
        let mut g = EnhancerGroup::empty(0, bb.depth(), bb.width(), 2, Activation::Gelu, 4).unwrap();
        g.widen_head(&[0, 1]).unwrap();
        g
    };
    for (x, y) in a.enhancers.iter().zip(&pristine.enhancers) {
        assert!(x.w_up.data().iter().all(|v| *v == 0.0));
        assert!(x.w_down.bitwise_eq(&y.w_down));
    }
    assert_ne!(a.flat_params(), b.flat_params());
}

#[test]
fn teachers_are_left_untouched() {
    let bb = tiny_backbone();
    let old = random_group(0, &[0, 1], &bb, 2, 5);
    let temp = random_group(0, &[2], &bb, 2, 6);
    let (old0, temp0) = (old.clone(), temp.clone());
    let data = clusters(&[0, 1, 2], 3, &bb, 1.0, 1);
    consolidate_local(&old, &temp, &data, &bb, &spec(0.1, 10, 4)).unwrap();
    assert_eq!(old, old0);
    assert_eq!(temp, temp0);
}

#[test]
fn local_consolidation_error_cases() {
    let bb = tiny_backbone();
    let old = random_group(0, &[0, 1], &bb, 2, 5);
    let overlap = random_group(0, &[1, 2], &bb, 2, 6);
    let temp = random_group(0, &[2], &bb, 2, 6);
    let data = clusters(&[0, 1, 2], 2, &bb, 1.0, 1);
    let s = spec(0.1, 2, 4);
    assert!(matches!(
        consolidate_local(&old, &overlap, &data, &bb, &s),
        Err(DistillError::OverlappingDomains(1))
    ));
    assert!(matches!(consolidate_local(&old, &temp, &[], &bb, &s), Err(DistillError::EmptyData)));
    let missing = clusters(&[0, 2], 2, &bb, 1.0, 1);
    assert!(matches!(
        consolidate_local(&old, &temp, &missing, &bb, &s),
        Err(DistillError::MissingClass(1))
    ));
    let lax = ConsolidationSpec {
        require_full_coverage: false,
        ..s.clone()
    };
    assert!(consolidate_local(&old, &temp, &missing, &bb, &lax).is_ok());
    let stray = clusters(&[0, 1, 2, 9], 1, &bb, 1.0, 1);
    assert!(matches!(
        consolidate_local(&old, &temp, &stray, &bb, &s),
        Err(DistillError::LabelOutsideDomain(9))
    ));
}

#[test]
fn empty_old_group_takes_temp() {
    let bb = tiny_backbone();
    let old = EnhancerGroup::empty(3, bb.depth(), bb.width(), 2, Activation::Gelu, 1).unwrap();
    let temp = random_group(0, &[4, 5], &bb, 2, 6);
    let out = consolidate_local(&old, &temp, &[], &bb, &spec(0.1, 5, 4)).unwrap();
    assert_eq!(out.group.group_id, 3);
    assert_eq!(out.group.flat_params(), temp.flat_params());
}

#[test]
fn consolidation_reaches_a_matching_teacher() {
    let bb = tiny_backbone();
    let old = random_group(0, &[0, 1], &bb, 2, 5);
    let mut temp = old.clone();
    temp.domain = vec![2, 3];
    let data = clusters(&[0, 1, 2, 3], 4, &bb, 1.0, 2);
    let out = consolidate_local(&old, &temp, &data, &bb, &spec(0.3, 3000, data.len())).unwrap();
    let targets = teacher_targets_local(&old, &temp, &data, &bb).unwrap();
    let mean = data
        .iter()
        .zip(&targets)
        .map(|(s, t)| double_distill_loss(&group_forward(&s.sample, &out.group, &bb).unwrap(), t).unwrap())
        .sum::<f64>()
        / data.len() as f64;
    assert!(mean < 1e-3, "L_dd after training {mean}");
}

#[test]
fn zero_learning_rate_leaves_widened_head() {
    let bb = tiny_backbone();
    let old = random_group(0, &[0, 1], &bb, 2, 5);
    let temp = random_group(0, &[2], &bb, 2, 6);
    let data = clusters(&[0, 1, 2], 1, &bb, 1.0, 1);
    let out = consolidate_local(&old, &temp, &data[..3], &bb, &ConsolidationSpec { require_full_coverage: false, ..spec(0.0, 1, 1) }).unwrap();
    let mut widened = old.clone();
    widened.widen_head(&[2]).unwrap();
    assert!(out.group.head.bitwise_eq(&widened.head));
    assert!(out.group.head.data().chunks(3).all(|row| row[2] == 0.0));
}

#[test]
fn observer_sees_old_teacher_centered() {
    let bb = tiny_backbone();
    let old = random_group(0, &[0, 1, 2], &bb, 2, 5);
    let temp = random_group(0, &[7], &bb, 2, 6);
    let data = clusters(&[0, 1, 2, 7], 2, &bb, 1.0, 1);
    let mut rec = Recorder::default();
    consolidate_local_observed(&old, &temp, &data, &bb, &spec(0.1, 3, 3), &mut rec).unwrap();
    for (step, batch) in rec.targets.iter().enumerate() {
        for (i, t) in batch.iter().enumerate() {
            let s = &data[(step * 3 + i) % data.len()];
            let y = group_forward(&s.sample, &old, &bb).unwrap();
            let mean = y.iter().sum::<f64>() / 3.0;
            for (a, b) in t[..3].iter().zip(&y) {
                assert!((a - (b - mean)).abs() < 1e-12);
            }
            assert!(t[3].abs() < 1e-12);
        }
    }
    assert_eq!(rec.losses.len(), 3);
}

#[test]
fn gradient_audit_is_tight() {
    let bb = tiny_backbone();
    let g = random_group(0, &[0, 1], &bb, 2, 5);
    let data = clusters(&[0, 1], 1, &bb, 1.0, 1);
    let targets = vec![vec![0.5, -0.5], vec![-0.2, 0.2]];
    assert!(gradient_audit(&g, &bb, &data, &targets, 1e-5).unwrap() < 1e-4);
    assert!(matches!(
        gradient_audit(&g, &bb, &data, &targets[..1], 1e-5),
        Err(DistillError::LengthMismatch { .. })
    ));
}

#[test]
fn argmax_prefers_lowest_index() {
    assert_eq!(argmax(&[1.0, 3.0, 3.0]), Some(1));
    assert_eq!(argmax(&[]), None);
}
