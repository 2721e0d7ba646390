mod common;

use std::collections::HashMap;

use pbd_core::annotation::{Attribute, Difficulty, Point, Polarity, StackAxis};
use pbd_core::error::Error;
use pbd_core::harness::annotate::{dedup, dedup_distances, fuse_annotations, resolve_vote, AnnotationBundle, CountRule, FuseOutcome, VoteRequest};
use pbd_core::harness::train::{IterationLog, Sample};
use pbd_core::harness::{evaluate_model, evaluate_predictions, load_config, train, EvalSettings, PipelineConfig, TrainConfig};
use pbd_core::labels::{extract_points_from_mask, generate_point_mask, RadiusPolicy};
use pbd_core::metrics::{NormalizationMode, SplitWeighting};
use pbd_core::model::{Model, ModelConfig};
use pbd_core::synth::{generate, DatasetConfig};
use pbd_core::EndpointAnnotation;

use common::*;

fn ids(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

fn samples(seed: u64, train_n: usize, test_n: usize) -> (Vec<Sample>, Vec<Sample>) {
    let cfg = DatasetConfig {
        seed,
        train: train_n,
        test: test_n,
        ..DatasetConfig::default()
    };
    let (ds, images) = generate(&cfg).unwrap();
    let by_id: HashMap<String, image::GrayImage> = images.into_iter().collect();
    let wrap = |anns: Vec<EndpointAnnotation>| {
        anns.into_iter()
            .map(|a| Sample {
                image: by_id[&a.image_id].clone(),
                annotation: a,
            })
            .collect::<Vec<_>>()
    };
    (wrap(ds.train), wrap(ds.test))
}

fn integer_stack(id: &str, d: Difficulty) -> EndpointAnnotation {
    let mut a = annotation(
        id,
        60,
        40,
        vec![Point::new(10.0, 8.0), Point::new(26.0, 9.0), Point::new(42.0, 8.0)],
        vec![Point::new(18.0, 13.0), Point::new(34.0, 12.0)],
        StackAxis::X,
    );
    a.difficulty = d;
    a
}

#[test]
fn oracle_masks_through_extraction_score_perfectly() {
    let gts: Vec<_> = Difficulty::ALL.iter().enumerate().map(|(i, &d)| integer_stack(&format!("o{i}"), d)).collect();
    let preds: Vec<_> = gts
        .iter()
        .map(|g| {
            let mut p = g.clone();
            for pol in Polarity::BOTH {
                let m = generate_point_mask(g, RadiusPolicy::default(), pol).unwrap();
                *p.points_mut(pol) = extract_points_from_mask(&m.mask, g.stack_axis);
            }
            p
        })
        .collect();
    let rep = evaluate_predictions(&preds, &gts, None, &EvalSettings::default()).unwrap();
    let avg = rep.average.unwrap();
    assert_eq!(avg.pn_acc, 1.0);
    assert_eq!(avg.oh_mae, Some(0.0));
    assert_eq!(avg.al_mae, Some(0.0));
}

#[test]
fn empty_predictions_are_undefined() {
    let gts = vec![integer_stack("e", Difficulty::Regular)];
    let mut p = gts[0].clone();
    p.anode_points.clear();
    p.cathode_points.clear();
    let rep = evaluate_predictions(&[p], &gts, None, &EvalSettings::default()).unwrap();
    let r = &rep.per_split[&Difficulty::Regular];
    assert_eq!((r.an_acc, r.cn_acc), (0.0, 0.0));
    assert!(r.al_mae.is_none() && r.cl_mae.is_none() && r.oh_mae.is_none());
    let table = rep.table();
    assert!(table.lines().any(|l| l.starts_with("OH-MAE") && l.contains('—')));
}

#[test]
fn missing_splits_give_partial_report() {
    let gts = vec![integer_stack("a", Difficulty::Tough)];
    let rep = evaluate_predictions(&gts, &gts, None, &EvalSettings::default()).unwrap();
    assert!(rep.average.is_none());
    assert_eq!(rep.per_split.len(), 1);
    assert!(rep.flags.iter().any(|f| f.contains("regular")));
    assert!(rep.flags.iter().any(|f| f.contains("difficult")));
}

#[test]
fn paper_mode_divides_by_area() {
    let gt = annotation("p", 100, 100, vec![Point::new(13.0, 14.0)], vec![], StackAxis::X);
    let pred = annotation("p", 100, 100, vec![Point::new(10.0, 10.0)], vec![], StackAxis::X);
    for (mode, want) in [(NormalizationMode::Pixel, 5.0), (NormalizationMode::Paper, 5e-4)] {
        let settings = EvalSettings {
            mode,
            ..EvalSettings::default()
        };
        let rep = evaluate_predictions(&[pred.clone()], &[gt.clone()], None, &settings).unwrap();
        assert!((rep.overall.al_mae.unwrap() - want).abs() < 1e-12);
    }
}

#[test]
fn swapped_ground_truth_degrades_scores() {
    let gts: Vec<_> = (0..6)
        .map(|i| {
            let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(i);
            random_stack(&mut rng, &format!("m{i}"), 1 + (i as usize % 4), (4.0, 10.0), 5.0)
        })
        .collect();
    let right = evaluate_predictions(&gts, &gts, None, &EvalSettings::default()).unwrap();
    // same ids, annotations shifted by one image
    let shuffled: Vec<_> = (0..gts.len())
        .map(|i| EndpointAnnotation {
            image_id: gts[i].image_id.clone(),
            ..gts[(i + 1) % gts.len()].clone()
        })
        .collect();
    let wrong = evaluate_predictions(&gts, &shuffled, None, &EvalSettings::default()).unwrap();
    assert_eq!(right.overall.pn_acc, 1.0);
    assert!(wrong.overall.pn_acc < 1.0);
    assert!(wrong.overall.an_mae > 0.0);
}

#[test]
fn dedup_examples() {
    let d = vec![vec![0.0, 0.1, 0.6], vec![0.1, 0.0, 0.4], vec![0.6, 0.4, 0.0]];
    let r = dedup_distances(&ids(&["a", "b", "c"]), &d, 0.5).unwrap();
    assert_eq!(r.clusters, vec![vec![0, 1, 2]]);
    assert_eq!(r.representatives, vec![0]);

    let far = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]];
    let r = dedup(&ids(&["c", "b", "a"]), &far, 0.5).unwrap();
    assert_eq!(r.clusters.len(), 3);
    assert_eq!(r.representatives, vec![0, 1, 2]);

    let dup = vec![vec![0.3; 512], vec![0.3; 512], vec![0.9; 512]];
    let r = dedup(&ids(&["z", "y", "x"]), &dup, 1e-9).unwrap();
    assert_eq!(r.clusters, vec![vec![0, 1], vec![2]]);
    assert_eq!(r.representatives, vec![1, 2]);

    assert!(matches!(
        dedup(&ids(&["a", "b"]), &[vec![0.0; 512], vec![0.0; 511]], 0.5),
        Err(Error::ShapeMismatch { .. })
    ));
}

#[test]
fn fusion_examples() {
    let one = |x: f64| annotation("f", 40, 40, vec![Point::new(x, 10.0)], vec![], StackAxis::X);
    let b = AnnotationBundle::new(vec![one(10.0), one(12.0)]).unwrap();
    match fuse_annotations(&b, 5.0, CountRule::Unanimous).unwrap() {
        FuseOutcome::Fused(f) => assert_eq!(f.anode_points, vec![Point::new(11.0, 10.0)]),
        o => panic!("expected fusion, got {o:?}"),
    }

    let plates = |n: usize| {
        let pts = (0..n).map(|i| Point::new(4.0 + 6.0 * i as f64, 10.0)).collect();
        annotation("f", 40, 40, pts, vec![], StackAxis::X)
    };
    let b = AnnotationBundle::new(vec![plates(5), plates(6)]).unwrap();
    assert!(matches!(fuse_annotations(&b, 3.5, CountRule::Unanimous).unwrap(), FuseOutcome::Vote(_)));

    let b = AnnotationBundle::new(vec![one(10.0)]).unwrap();
    assert!(matches!(fuse_annotations(&b, 3.5, CountRule::Unanimous).unwrap(), FuseOutcome::Single { .. }));
}

#[test]
fn vote_picks_a_non_outlier() {
    let at = |x: f64, y: f64| annotation("v", 100, 100, vec![Point::new(x, y), Point::new(x + 10.0, y)], vec![Point::new(x + 5.0, y + 3.0)], StackAxis::X);
    let candidates = vec![at(80.0, 80.0), at(10.0, 10.0), at(11.0, 10.5)];
    let req = VoteRequest {
        image_id: "v".into(),
        candidates: candidates.clone(),
        reason: String::new(),
    };
    let w = resolve_vote(&req).unwrap();
    assert_ne!(w, candidates[0]);
}

#[test]
fn config_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pipeline.toml");
    let mut cfg = PipelineConfig::default();
    cfg.train.label_policy = "Const-3".parse().unwrap();
    cfg.evaluate.mode = NormalizationMode::Paper;
    std::fs::write(&path, cfg.to_toml()).unwrap();
    assert_eq!(load_config(&path).unwrap(), cfg);
    cfg.evaluate.mode = NormalizationMode::Reference { width: 512, height: 512 };
    std::fs::write(&path, cfg.to_toml()).unwrap();
    assert_eq!(load_config(&path).unwrap(), cfg);

    std::fs::write(&path, "schema_version = 1\n[evaluate]\nmode = \"paper\"\nweighting = \"byimages\"\n").unwrap();
    let hand = load_config(&path).unwrap();
    assert_eq!(hand.evaluate.mode, NormalizationMode::Paper);
    assert_eq!(hand.evaluate.weighting, SplitWeighting::ByImages);

    std::fs::write(&path, "schema_version = 1\n[train]\nbogus = 3\n").unwrap();
    assert!(matches!(load_config(&path), Err(Error::Parse { .. })));
}

#[test]
fn training_needs_a_pure_prompt() {
    let (mut train_set, _) = samples(3, 4, 1);
    for s in &mut train_set {
        s.annotation.attributes.remove(&Attribute::P);
    }
    let cfg = TrainConfig {
        max_iterations: Some(1),
        input_size: 32,
        ..TrainConfig::default()
    };
    assert!(matches!(train(&cfg, &ModelConfig::desk(), &train_set, |_| {}), Err(Error::NoPromptImage)));
}

#[test]
fn schedule_and_determinism() {
    let cfg = TrainConfig::default();
    assert!((cfg.lr_at(120) - 0.9e-4).abs() < 1e-18);
    assert_eq!(cfg.lr_at(119), 1e-4);

    let (train_set, _) = samples(4, 6, 1);
    let cfg = TrainConfig {
        max_iterations: Some(6),
        input_size: 32,
        learning_rate: 1e-3,
        ..TrainConfig::default()
    };
    let run = || {
        let mut log: Vec<IterationLog> = Vec::new();
        train(&cfg, &ModelConfig::desk(), &train_set, |l| log.push(l.clone())).unwrap();
        log
    };
    let (a, b) = (run(), run());
    assert_eq!(a.len(), 6);
    assert_eq!(a, b);
}

#[test]
fn trained_model_beats_untrained() {
    let (train_set, _) = samples(9, 12, 1);
    let cfg = TrainConfig {
        max_iterations: Some(150),
        epochs: 1000,
        input_size: 48,
        learning_rate: 2e-3,
        seed: 2,
        ..TrainConfig::default()
    };
    let out = train(&cfg, &ModelConfig::desk(), &train_set, |_| {}).unwrap();
    let mut untrained_cfg = ModelConfig::desk();
    untrained_cfg.input_size = 48;
    let untrained = Model::<f32>::new(untrained_cfg, 2).unwrap();
    let settings = EvalSettings::default();
    let t = evaluate_model(&out.model, &out.default_prompt, &train_set, &settings).unwrap().0.overall;
    let u = evaluate_model(&untrained, &out.default_prompt, &train_set, &settings).unwrap().0.overall;
    assert!(t.an_mae < u.an_mae && t.cn_mae < u.cn_mae, "{t:?} vs {u:?}");
    assert!(t.an_acc > u.an_acc && t.cn_acc > u.cn_acc && t.pn_acc > u.pn_acc, "{t:?} vs {u:?}");
    let better = |a: Option<f64>, b: Option<f64>| match (a, b) {
        (Some(x), Some(y)) => x < y,
        (Some(_), None) => true,
        _ => false,
    };
    assert!(better(t.al_mae, u.al_mae) && better(t.cl_mae, u.cl_mae) && better(t.oh_mae, u.oh_mae));
    let (ts, us) = (t.seg.unwrap(), u.seg.unwrap());
    assert!(ts.miou > us.miou && ts.mdice > us.mdice && ts.ber < us.ber && ts.mae < us.mae);
}
