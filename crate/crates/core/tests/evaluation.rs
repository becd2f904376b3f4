mod common;

use common::{small_base, small_corpus, small_stream};
use ifss_core::data::{guarded_fetch, AccessGuard, Split, StreamMode};
use ifss_core::eval::report::metrics_jsonl;
use ifss_core::eval::{baseline_finetune, baseline_wi, run_incremental, EvalConfig, EvalOutcome, Method};
use ifss_core::features::FeatureCache;
use ifss_core::meta::ADAPTED;
use ifss_core::model::{expand_classifier, extract, score_pixels, Group};
use ifss_core::support::prototypes_for;
use ifss_core::Error;

struct Fixture {
    corpus: Vec<ifss_core::data::Scene>,
    stream: ifss_core::data::SessionStream,
    base: ifss_core::meta::BaseOutcome,
    cache: FeatureCache,
}

fn fixture(mode: StreamMode, seed: u64) -> Fixture {
    let (catalog, corpus) = small_corpus();
    let stream = small_stream(&catalog, &corpus, mode, seed);
    let base = small_base(&corpus, &stream, seed);
    let cache = FeatureCache::new(&base.params);
    Fixture {
        corpus,
        stream,
        base,
        cache,
    }
}

fn run(f: &mut Fixture, cfg: &EvalConfig, guard: &mut AccessGuard) -> EvalOutcome {
    run_incremental(&f.base.params, &f.base.classifier, &f.corpus, &f.stream, cfg, guard, &mut f.cache, 1).unwrap()
}

fn eval_cfg(method: Method) -> EvalConfig {
    EvalConfig {
        method,
        steps: 5,
        ..Default::default()
    }
}

#[test]
fn every_method_respects_the_access_protocol() {
    let mut f = fixture(StreamMode::MultiStep, 1);
    for method in Method::ALL {
        for unfrozen in [false, true] {
            let mut guard = AccessGuard::new();
            let cfg = EvalConfig {
                update_extractor: unfrozen,
                ..eval_cfg(method)
            };
            let out = run(&mut f, &cfg, &mut guard);
            assert!(guard.is_clean(), "{method} unfrozen={unfrozen}");
            assert_eq!(out.records.len(), f.stream.len());
            assert_eq!(guard.current(), f.stream.len() - 1);
        }
    }
}

#[test]
fn frozen_arms_keep_the_extractor_hash() {
    let mut f = fixture(StreamMode::MultiStep, 2);
    let start = f.base.params.hash_groups(&[Group::Extractor]);
    for method in Method::ALL {
        let out = run(&mut f, &eval_cfg(method), &mut AccessGuard::new());
        assert!(out.extractor_hashes.iter().all(|h| *h == start), "{method}");
    }
    let cfg = EvalConfig {
        update_extractor: true,
        ..eval_cfg(Method::Finetune)
    };
    let out = run(&mut f, &cfg, &mut AccessGuard::new());
    assert_eq!(out.extractor_hashes[0], start);
    assert_ne!(out.extractor_hashes.last().unwrap(), &start);
}

#[test]
fn imprinting_never_changes_the_head_or_projector() {
    let mut f = fixture(StreamMode::MultiStep, 3);
    let start = f.base.params.hash_groups(&ADAPTED);
    let out = baseline_wi(
        &f.base.params,
        &f.base.classifier,
        &f.corpus,
        &f.stream,
        &EvalConfig::default(),
        &mut AccessGuard::new(),
        &mut f.cache,
        1,
    )
    .unwrap();
    assert!(out.adapted_hashes.iter().all(|h| *h == start));
    assert_eq!(out.classifier.len(), f.base.classifier.len() + f.stream.len() - 1);
}

#[test]
fn imprinting_preserves_the_ranking_among_old_classes() {
    let f = fixture(StreamMode::SingleStep, 4);
    let params = &f.base.params;
    let old = &f.base.classifier;
    let visible = f.stream.seen_classes(1);
    let new = prototypes_for(
        params,
        &f.corpus,
        &f.stream.sessions[1].train,
        &f.stream.sessions[1].classes,
        &visible,
        usize::MAX,
        None,
    )
    .unwrap();
    let expanded = expand_classifier(old, params, new).unwrap();
    let n_old = old.len();
    let tau = params.config().tau;
    let argmax = |s: &[f32]| {
        s.iter()
            .enumerate()
            .fold((0, f32::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b })
            .0
    };
    for &id in f.stream.sessions[0].test.iter().chain(&f.stream.sessions[1].test) {
        let feats = extract(params, &f.corpus[id].image_chw()).unwrap();
        let before = score_pixels(params, &feats, old, tau).unwrap();
        let after = score_pixels(params, &feats, &expanded, tau).unwrap();
        for (b, a) in before.data().chunks(n_old).zip(after.data().chunks(expanded.len())) {
            assert_eq!(argmax(b), argmax(&a[..n_old]));
        }
    }
}

#[test]
fn zero_step_finetune_equals_imprinting() {
    let mut f = fixture(StreamMode::MultiStep, 5);
    let cfg = EvalConfig {
        steps: 0,
        ..EvalConfig::default()
    };
    let args = (&f.base.params.clone(), &f.base.classifier.clone());
    let ft = baseline_finetune(args.0, args.1, &f.corpus, &f.stream, &cfg, &mut AccessGuard::new(), &mut f.cache, 1)
        .unwrap();
    let wi = baseline_wi(args.0, args.1, &f.corpus, &f.stream, &cfg, &mut AccessGuard::new(), &mut f.cache, 1).unwrap();
    for (a, b) in ft.records.iter().zip(&wi.records) {
        assert_eq!((a.miou_b, a.miou_n, a.hm), (b.miou_b, b.miou_n, b.hm));
    }
    assert_eq!(ft.records[0].method, "finetune");
    assert_eq!(wi.records[0].method, "wi");
}

#[test]
fn single_and_multi_step_agree_before_any_novel_class() {
    let mut a = fixture(StreamMode::SingleStep, 6);
    let mut b = fixture(StreamMode::MultiStep, 6);
    let ra = run(&mut a, &eval_cfg(Method::Ours), &mut AccessGuard::new());
    let rb = run(&mut b, &eval_cfg(Method::Ours), &mut AccessGuard::new());
    assert_eq!(ra.records.len(), 2);
    assert_eq!(rb.records.len(), 3);
    let (x, y) = (&ra.records[0], &rb.records[0]);
    assert_eq!((x.miou_b, x.miou_n, x.hm), (y.miou_b, y.miou_n, y.hm));
    assert_eq!(x.miou_n, 0.0);
    assert_eq!(x.hm, 0.0);
}

#[test]
fn records_are_on_the_percentage_scale() {
    let mut f = fixture(StreamMode::MultiStep, 7);
    let out = run(&mut f, &eval_cfg(Method::Ours), &mut AccessGuard::new());
    for (t, r) in out.records.iter().enumerate() {
        assert_eq!(r.session, t);
        assert_eq!(r.mode, "multi-step");
        assert_eq!(r.shots, 1);
        for v in [r.miou_b, r.miou_n, r.hm] {
            assert!((0.0..=100.0).contains(&v));
        }
        assert!(r.hm <= r.miou_b.max(r.miou_n) + 1e-9);
    }
    assert_eq!(out.classifier.session(), f.stream.len() - 1);
}

#[test]
fn metrics_files_are_byte_identical_across_runs() {
    let mut f = fixture(StreamMode::MultiStep, 8);
    let a = metrics_jsonl(&run(&mut f, &eval_cfg(Method::Ours), &mut AccessGuard::new()).records);
    let mut g = fixture(StreamMode::MultiStep, 8);
    let b = metrics_jsonl(&run(&mut g, &eval_cfg(Method::Ours), &mut AccessGuard::new()).records);
    assert_eq!(a, b);
}

#[test]
fn illegal_fetches_are_rejected_and_logged() {
    let f = fixture(StreamMode::MultiStep, 9);
    let mut guard = AccessGuard::new();
    guard.advance_to(2);
    match guarded_fetch(&mut guard, &f.stream, 1, Split::Train) {
        Err(Error::ProtocolViolation { requested, current }) => assert_eq!((requested, current), (1, 2)),
        other => panic!("expected a violation, got {other:?}"),
    }
    assert!(guarded_fetch(&mut guard, &f.stream, 0, Split::Train).is_err());
    assert!(guarded_fetch(&mut guard, &f.stream, 0, Split::Test).is_ok());
    assert!(guarded_fetch(&mut guard, &f.stream, 2, Split::Train).is_ok());
    assert_eq!(guard.violations().len(), 2);
    assert!(!guard.is_clean());
}
