mod common;

use common::{small_base, small_corpus, small_stream};
use ifss_core::data::StreamMode;
use ifss_core::features::{feature_labels, FeatureCache};
use ifss_core::meta::{
    epoch_sequence, inner_adapt, meta_step, run_meta_training, MetaConfig, MetaLogRecord, MetaResume, ADAPTED,
};
use ifss_core::model::{expand_classifier, Group, Sgd};
use ifss_core::objective::{loss, Input, Regularizer, Sample};
use ifss_core::support::{build_classifier, prototypes_for};

fn cfg(seed: u64) -> MetaConfig {
    MetaConfig {
        tasks: 2,
        epochs: 2,
        test_per_class: 4,
        seed,
        ..Default::default()
    }
}

struct Fixture {
    corpus: Vec<ifss_core::data::Scene>,
    stream: ifss_core::data::SessionStream,
    base: ifss_core::meta::BaseOutcome,
    cache: FeatureCache,
}

fn fixture(seed: u64) -> Fixture {
    let (catalog, corpus) = small_corpus();
    let stream = small_stream(&catalog, &corpus, StreamMode::MultiStep, seed);
    let base = small_base(&corpus, &stream, seed);
    let mut cache = FeatureCache::new(&base.params);
    cache.ensure(&base.params, &corpus, &stream.sessions[0].train).unwrap();
    Fixture {
        corpus,
        stream,
        base,
        cache,
    }
}

/// First pseudo task of epoch 0, expanded into a fresh pseudo-base classifier.
fn first_task(
    f: &Fixture,
    c: &MetaConfig,
) -> (ifss_core::model::PrototypeClassifier, Vec<usize>, Vec<u32>) {
    let seq = epoch_sequence(&f.corpus, &f.stream.sessions[0], c, 0).unwrap();
    let classifier = build_classifier(&f.base.params, &f.corpus, &seq.sessions[0], 10, Some(&f.cache)).unwrap();
    let visible = seq.seen_classes(1);
    let new = prototypes_for(
        &f.base.params,
        &f.corpus,
        &seq.sessions[1].train,
        &seq.sessions[1].classes,
        &visible,
        usize::MAX,
        Some(&f.cache),
    )
    .unwrap();
    let classifier = expand_classifier(&classifier, &f.base.params, new).unwrap();
    (classifier, seq.sessions[1].train.clone(), visible)
}

fn samples<'a>(f: &'a Fixture, ids: &[usize], visible: &[u32]) -> Vec<Sample<'a>> {
    ids.iter()
        .map(|&i| Sample {
            input: Input::Cached(f.cache.get(i)),
            labels: feature_labels(&f.corpus[i], visible),
        })
        .collect()
}

#[test]
fn zero_inner_step_size_returns_identical_parameters() {
    let f = fixture(1);
    let (classifier, train, visible) = first_task(&f, &cfg(1));
    let task = samples(&f, &train, &visible);
    let (adapted, _) = inner_adapt(&f.base.params, &classifier, &task, 0.0, 3).unwrap();
    assert_eq!(adapted.values(), f.base.params.values());
}

#[test]
fn more_inner_steps_fit_the_task_better() {
    let f = fixture(2);
    let (classifier, train, visible) = first_task(&f, &cfg(2));
    let task = samples(&f, &train, &visible);
    let (_, one) = inner_adapt(&f.base.params, &classifier, &task, 0.05, 1).unwrap();
    let (_, five) = inner_adapt(&f.base.params, &classifier, &task, 0.05, 5).unwrap();
    assert_eq!(one.len(), 2);
    assert_eq!(five.len(), 6);
    assert_eq!(one[0], five[0]);
    assert!(five[5] < one[1], "{five:?} vs {one:?}");
}

#[test]
fn inner_adaptation_leaves_its_input_untouched() {
    let f = fixture(3);
    let (classifier, train, visible) = first_task(&f, &cfg(3));
    let task = samples(&f, &train, &visible);
    let before = f.base.params.hash();
    let (adapted, _) = inner_adapt(&f.base.params, &classifier, &task, 0.05, 3).unwrap();
    assert_eq!(f.base.params.hash(), before);
    assert_ne!(adapted.hash(), before);
    assert_eq!(adapted.hash_groups(&[Group::Extractor]), f.base.params.hash_groups(&[Group::Extractor]));
}

#[test]
fn inner_adaptation_rejects_an_empty_task() {
    let f = fixture(4);
    let (classifier, _, _) = first_task(&f, &cfg(4));
    assert!(inner_adapt(&f.base.params, &classifier, &[], 0.05, 3).is_err());
}

#[test]
fn zero_outer_step_size_keeps_parameters() {
    let f = fixture(5);
    let (classifier, train, visible) = first_task(&f, &cfg(5));
    let task = samples(&f, &train, &visible);
    let (adapted, _) = inner_adapt(&f.base.params, &classifier, &task, 0.05, 3).unwrap();
    let mut params = f.base.params.clone();
    let mut outer = Sgd::new(0.0, 0.9);
    let reg = Regularizer::None;
    meta_step(&mut params, &adapted, &classifier, &task, reg, &mut outer, 0).unwrap();
    assert_eq!(params.values(), f.base.params.values());
}

#[test]
fn meta_step_lowers_the_post_adaptation_loss() {
    let mut improved = 0;
    for seed in 0..20u64 {
        let f = fixture(100 + seed);
        let c = cfg(100 + seed);
        let (classifier, train, visible) = first_task(&f, &c);
        let task = samples(&f, &train, &visible);
        let seq = epoch_sequence(&f.corpus, &f.stream.sessions[0], &c, 0).unwrap();
        let meta = samples(&f, &seq.sessions[1].test, &visible);
        let post = |p: &ifss_core::model::ParamSet| {
            let (a, _) = inner_adapt(p, &classifier, &task, c.alpha, c.inner_steps).unwrap();
            loss(&a, &classifier, &meta, Regularizer::None).unwrap().total
        };
        let before = post(&f.base.params);
        let (adapted, _) = inner_adapt(&f.base.params, &classifier, &task, c.alpha, c.inner_steps).unwrap();
        let mut params = f.base.params.clone();
        let mut outer = Sgd::new(0.01, 0.0);
        meta_step(&mut params, &adapted, &classifier, &meta, Regularizer::None, &mut outer, 0).unwrap();
        if post(&params) < before {
            improved += 1;
        }
    }
    assert_eq!(improved, 20);
}

#[test]
fn one_task_one_epoch_logs_one_cycle() {
    let mut f = fixture(6);
    let c = MetaConfig {
        tasks: 1,
        epochs: 1,
        ..cfg(6)
    };
    let out = run_meta_training(&f.corpus, &f.stream.sessions[0], f.base.params.clone(), &mut f.cache, &c, None, None)
        .unwrap();
    assert_eq!(out.log.len(), 1);
    assert_eq!(out.log[0].inner_losses.len(), c.inner_steps + 1);
    assert!(out.log[0].pseudo_hm.is_some());
}

#[test]
fn meta_test_set_accumulates_task_test_scenes() {
    let mut f = fixture(7);
    let c = MetaConfig { epochs: 3, ..cfg(7) };
    let out = run_meta_training(&f.corpus, &f.stream.sessions[0], f.base.params.clone(), &mut f.cache, &c, None, None)
        .unwrap();
    assert_eq!(out.log.len(), c.epochs * c.tasks);
    for epoch in 0..c.epochs {
        let seq = epoch_sequence(&f.corpus, &f.stream.sessions[0], &c, epoch).unwrap();
        let mut expected = seq.sessions[0].test.len();
        for j in 1..=c.tasks {
            expected += seq.sessions[j].test.len();
            let rec = &out.log[epoch * c.tasks + j - 1];
            assert_eq!((rec.epoch, rec.task), (epoch, j));
            assert_eq!(rec.d_meta_size, expected);
            assert_eq!(rec.pseudo_hm.is_some(), j == c.tasks);
        }
    }
}

#[test]
fn literal_meta_test_set_holds_only_task_scenes() {
    let mut f = fixture(7);
    let c = MetaConfig {
        base_in_meta_test: false,
        ..cfg(7)
    };
    let out = run_meta_training(&f.corpus, &f.stream.sessions[0], f.base.params.clone(), &mut f.cache, &c, None, None)
        .unwrap();
    let seq = epoch_sequence(&f.corpus, &f.stream.sessions[0], &c, 0).unwrap();
    assert_eq!(out.log[0].d_meta_size, seq.sessions[1].test.len());
    assert_eq!(out.log[1].d_meta_size, seq.sessions[1].test.len() + seq.sessions[2].test.len());
}

#[test]
fn extractor_is_bit_identical_after_meta_training() {
    let mut f = fixture(8);
    let before = f.base.params.hash_groups(&[Group::Extractor]);
    let out = run_meta_training(&f.corpus, &f.stream.sessions[0], f.base.params.clone(), &mut f.cache, &cfg(8), None, None)
        .unwrap();
    assert_eq!(out.params.hash_groups(&[Group::Extractor]), before);
    assert_ne!(out.params.hash_groups(&ADAPTED), f.base.params.hash_groups(&ADAPTED));
}

#[test]
fn redistribution_share_is_zero_without_weight() {
    let mut f = fixture(9);
    let c = MetaConfig { lambda: 0.0, ..cfg(9) };
    let out = run_meta_training(&f.corpus, &f.stream.sessions[0], f.base.params.clone(), &mut f.cache, &c, None, None)
        .unwrap();
    assert!(out.log.iter().all(|r| r.reg_share == 0.0 && r.meta_loss == r.meta_ce));
    let c = MetaConfig { lambda: 0.3, ..cfg(9) };
    let out = run_meta_training(&f.corpus, &f.stream.sessions[0], f.base.params.clone(), &mut f.cache, &c, None, None)
        .unwrap();
    assert!(out.log.iter().all(|r| r.reg_share > 0.0));
}

#[test]
fn resumed_run_matches_an_uninterrupted_one() {
    let mut f = fixture(10);
    let c = MetaConfig {
        epochs: 4,
        checkpoint_every: 2,
        ..cfg(10)
    };
    let mut snapshots: Vec<(usize, MetaResume)> = Vec::new();
    let mut hook = |done: usize, p: &ifss_core::model::ParamSet, o: &Sgd, log: &[MetaLogRecord]| {
        snapshots.push((
            done,
            MetaResume {
                params: p.clone(),
                velocity: o.velocity().to_vec(),
                epochs_completed: done,
                log: log.to_vec(),
            },
        ));
        Ok(())
    };
    let full = run_meta_training(
        &f.corpus,
        &f.stream.sessions[0],
        f.base.params.clone(),
        &mut f.cache,
        &c,
        None,
        Some(&mut hook),
    )
    .unwrap();
    assert_eq!(snapshots.iter().map(|s| s.0).collect::<Vec<_>>(), vec![2, 4]);
    let resume = snapshots.remove(0).1;
    let resumed = run_meta_training(
        &f.corpus,
        &f.stream.sessions[0],
        f.base.params.clone(),
        &mut f.cache,
        &c,
        Some(resume),
        None,
    )
    .unwrap();
    assert_eq!(resumed.params.hash(), full.params.hash());
    assert_eq!(resumed.log, full.log);
}

#[test]
fn meta_training_is_deterministic() {
    let mut f = fixture(11);
    let run = |f: &mut Fixture| {
        run_meta_training(&f.corpus, &f.stream.sessions[0], f.base.params.clone(), &mut f.cache, &cfg(11), None, None)
            .unwrap()
    };
    let a = run(&mut f);
    let b = run(&mut f);
    assert_eq!(a.params.hash(), b.params.hash());
    assert_eq!(a.log, b.log);
}

#[test]
fn invalid_configurations_are_rejected() {
    let mut f = fixture(12);
    for bad in [
        MetaConfig { alpha: 0.0, ..cfg(12) },
        MetaConfig { beta: -1.0, ..cfg(12) },
        MetaConfig { inner_steps: 0, ..cfg(12) },
        MetaConfig { tasks: 0, ..cfg(12) },
        MetaConfig { tasks: 6, ..cfg(12) },
    ] {
        assert!(
            run_meta_training(&f.corpus, &f.stream.sessions[0], f.base.params.clone(), &mut f.cache, &bad, None, None)
                .is_err()
        );
    }
}
