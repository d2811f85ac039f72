mod common;

use common::check_dqs;
use ddq::geometry::iou;
use ddq::metrics::{recall_at_k, Detection, GroundTruths};
use ddq::selection::{distinct_query_selection, topk_per_level};
use ddq::simulator::toy::{train_toy, ToyScene};
use ddq::simulator::*;

fn small() -> SimConfig {
    let mut cfg = SimConfig::crowd_preset();
    cfg.scenes_per_seed = 1;
    cfg.training.steps = 20;
    cfg.training.grad_checks = 3;
    cfg
}

#[test]
fn dense_dqs_queries_meet_selection_postconditions() {
    let cfg = SimConfig::crowd_preset();
    for seed in 0..5 {
        let scene = generate_scene_at(&cfg.scene, seed, 0).unwrap();
        let dense = generate_dense_queries(&scene, &cfg.pyramid, &cfg.noise, 0).unwrap().set;
        let pool = topk_per_level(&dense, cfg.dqs.topk.unwrap());
        let kept = distinct_query_selection(&pool, cfg.dqs.thresh);
        check_dqs(&pool, &kept, cfg.dqs.thresh).unwrap();
        let dets = simulated_detections(&cfg, &scene, 0, 0, DetectorKind::DenseDqs).unwrap();
        assert_eq!(dets.len(), kept.len());
    }
}

#[test]
fn crowd_preset_hits_its_crowding_target() {
    let cfg = SceneConfig::crowd_preset();
    for seed in 0..100 {
        let s = generate_scene_at(&cfg, seed, 0).unwrap();
        let m = mean_neighbor_iou(&s.boxes);
        assert!((0.25..=0.35).contains(&m), "seed {seed}: {m}");
    }
}

fn duplicate_fraction(rho: f64, seed: u64) -> f64 {
    let cfg = SimConfig::crowd_preset();
    let noise = QueryNoiseModel {
        rho,
        ..cfg.noise.clone()
    };
    let scene = generate_scene_at(&cfg.scene, seed, 0).unwrap();
    let q = generate_dense_queries(&scene, &cfg.pyramid, &noise, 0).unwrap();
    // Pairs predicting the same object; other pairs are unaffected by rho.
    let (mut close, mut total) = (0usize, 0usize);
    for (i, (a, oa)) in q.set.iter().zip(&q.origins).enumerate() {
        for (b, ob) in q.set.queries()[i + 1..].iter().zip(&q.origins[i + 1..]) {
            if oa.gt.is_some() && oa.gt == ob.gt {
                total += 1;
                close += usize::from(iou(&a.bbox, &b.bbox) > 0.7);
            }
        }
    }
    close as f64 / total as f64
}

#[test]
fn duplicate_fraction_grows_with_rho() {
    let mean = |rho: f64| (0..20).map(|s| duplicate_fraction(rho, s)).sum::<f64>() / 20.0;
    let (f0, f5, f1) = (mean(0.0), mean(0.5), mean(1.0));
    assert!(f0 < f5 && f5 < f1, "{f0} {f5} {f1}");
}

#[test]
fn sparse_recall_is_below_dense_recall() {
    let cfg = SimConfig::crowd_preset();
    let (mut sparse, mut dense) = (0.0, 0.0);
    for seed in 0..20 {
        let scene = generate_scene_at(&cfg.scene, seed, 0).unwrap();
        let gts: GroundTruths = [(0, scene.boxes.clone())].into();
        for (kind, acc) in [(DetectorKind::Sparse, &mut sparse), (DetectorKind::Dense, &mut dense)] {
            let dets = simulated_detections(&cfg, &scene, 0, 0, kind).unwrap();
            *acc += recall_at_k(&dets, &gts, usize::MAX, 0.5);
        }
    }
    assert!(sparse < dense, "{sparse} vs {dense}");
}

#[test]
fn sparse_generator_edge_cases() {
    let cfg = SimConfig::crowd_preset();
    let scene = generate_scene_at(&cfg.scene, 3, 0).unwrap();
    let one = generate_sparse_queries(&scene, &cfg.scene, 1, &cfg.noise, 0).unwrap();
    assert_eq!(one.len(), 1);
    let a = generate_sparse_queries(&scene, &cfg.scene, 40, &cfg.noise, 0).unwrap();
    assert_eq!(
        a,
        generate_sparse_queries(&scene, &cfg.scene, 40, &cfg.noise, 0).unwrap()
    );
}

#[test]
fn gradient_demo_rows() {
    let r = run_gradient_demo(&[0.25, 0.5, 0.75]).unwrap();
    assert_eq!(r.to_csv().lines().next(), Some("p,alpha,fd_alpha,regime"));
    let alpha = r.column("alpha").unwrap();
    let fd = r.column("fd_alpha").unwrap();
    let regime = r.column("regime").unwrap();
    let expected = [(2.0 / 3.0, "suppressed"), (0.0, "zero"), (-2.0, "negative-training")];
    for (row, (a, name)) in r.rows.iter().zip(expected) {
        assert!((row[alpha].as_f64().unwrap() - a).abs() < 1e-12);
        assert!((row[fd].as_f64().unwrap() - a).abs() < 1e-5);
        assert_eq!(row[regime].as_str(), Some(name));
    }
}

#[test]
fn single_count_single_seed_gives_one_row() {
    let mut cfg = small();
    cfg.query_sweep.counts = vec![200];
    cfg.dqs_modes = vec![true];
    let r = run_query_sweep(&cfg, &[5]).unwrap();
    assert_eq!(r.rows.len(), 1);
    cfg.dqs_modes = vec![true, false];
    assert_eq!(run_query_sweep(&cfg, &[5]).unwrap().rows.len(), 2);
}

#[test]
fn threshold_sweep_row_count_follows_config() {
    let mut cfg = small();
    cfg.threshold_sweep.thresholds = vec![SweepThreshold::Iou(0.7)];
    assert_eq!(run_threshold_sweep(&cfg, &[1]).unwrap().rows.len(), 1);
    cfg.threshold_sweep.thresholds = ThresholdSweepConfig::default().thresholds;
    let r = run_threshold_sweep(&cfg, &[1]).unwrap();
    assert_eq!(r.rows.len(), cfg.threshold_sweep.thresholds.len());
    assert_eq!(r.rows.last().unwrap()[0].as_str(), Some("none"));
    cfg.threshold_sweep.thresholds.clear();
    assert!(run_threshold_sweep(&cfg, &[1]).is_err());
}

#[test]
fn zero_steps_reports_initial_metrics_only() {
    let mut cfg = small();
    cfg.training.steps = 0;
    let scene = generate_scene_at(&cfg.scene, 2, 0).unwrap();
    let q = generate_dense_queries(&scene, &cfg.pyramid, &cfg.noise, 0).unwrap();
    let mut scenes = vec![ToyScene::new(&scene, &q, &cfg.cost, 0).unwrap()];
    let run = train_toy(&mut scenes, &cfg.training, Some(&cfg.dqs), &cfg.cost, 2).unwrap();
    assert!(run.loss.is_empty());
    assert_eq!(run.curve.len(), 1);
    assert_eq!(run.grad_checks_run, 0);
    assert_eq!(run.weights, cfg.training.init_weights);
}

#[test]
fn toy_training_gradients_pass_finite_differences() {
    let cfg = small();
    let (_, runs) = run_toy_training(&cfg, &[0, 1]).unwrap();
    for (_, _, run) in runs {
        assert_eq!(run.grad_checks_run, 3);
        assert!(run.grad_check_max_rel_err <= toy::GRAD_CHECK_TOL);
        assert_eq!(run.loss.len(), cfg.training.steps);
    }
}

#[test]
fn experiments_are_deterministic() {
    let cfg = small();
    let a = run_recall_study(&cfg, &[3, 4]).unwrap().to_csv();
    assert_eq!(a, run_recall_study(&cfg, &[3, 4]).unwrap().to_csv());
    let (t1, _) = run_toy_training(&cfg, &[3]).unwrap();
    let (t2, _) = run_toy_training(&cfg, &[3]).unwrap();
    assert_eq!(t1.to_csv(), t2.to_csv());
}

#[test]
fn simulated_eval_pools_all_seeds() {
    let cfg = small();
    let r = run_simulated_eval(&cfg, &[0, 1]).unwrap();
    assert_eq!(r.rows.len(), 3);
    let tp = r.column("tp").unwrap();
    let fn_ = r.column("fn").unwrap();
    for row in &r.rows {
        let total = row[tp].as_f64().unwrap() + row[fn_].as_f64().unwrap();
        assert_eq!(total, 2.0 * cfg.scene.n_objects as f64);
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let mut cfg = small();
    cfg.dqs_modes.clear();
    assert!(run_toy_training(&cfg, &[0]).is_err());
    let cfg = small();
    assert!(run_recall_study(&cfg, &[]).is_err());
    let mut cfg = small();
    cfg.query_sweep.rho = 1.5;
    assert!(run_query_sweep(&cfg, &[0]).is_err());
    assert!(run_gradient_demo(&[0.0]).is_err());
}

#[test]
fn detections_carry_image_ids() {
    let cfg = small();
    let scene = generate_scene_at(&cfg.scene, 0, 0).unwrap();
    let dets: Vec<Detection> = simulated_detections(&cfg, &scene, 0, 9, DetectorKind::Sparse).unwrap();
    assert_eq!(dets.len(), cfg.recall.sparse_queries);
    assert!(dets.iter().all(|d| d.image_id == 9));
}
