//! Library-level regressions on the seeded synthetic task.

use embedhead::arcface::{arcface_logits, ArcFaceParams, MarginConfig};
use embedhead::dataio::{generate_synthetic, split, FeatureSet, SplitSpec};
use embedhead::model::{embed, Model};
use embedhead::numerics::{Matrix, Rng};
use embedhead::retrieval::{build_index, mean_precision_at_k, EvalSpec};
use embedhead::trainer::{init_model, run_stage, StageStart, TrainConfig};

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    d / (na * nb)
}

#[test]
fn identity_embedding_retrieves_perfectly() {
    let fs = generate_synthetic(16, 20, 64, 0.05, 1).unwrap();
    assert_eq!(fs.len(), 320);
    // leave-one-out brute force over all 320 points
    let rows: Vec<&[f64]> = (0..fs.len()).map(|i| fs.features().row(i)).collect();
    for (q, row) in rows.iter().enumerate() {
        let mut scored: Vec<(f64, usize)> = rows
            .iter()
            .enumerate()
            .filter(|&(id, _)| id != q)
            .map(|(id, r)| (cosine(row, r), id))
            .collect();
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        for &(_, id) in &scored[..5] {
            assert_eq!(fs.labels()[id], fs.labels()[q], "query {q}");
        }
    }

    let (index, queries, _) = split(
        &fs,
        &SplitSpec {
            query_fraction: 0.2,
            seed: 1,
        },
    )
    .unwrap();
    let idx = build_index(index.features(), index.labels()).unwrap();
    let rep = mean_precision_at_k(&idx, &queries, &EvalSpec::default()).unwrap();
    assert_eq!(rep.capped_score, 1.0);
    assert_eq!(rep.plain_score, 1.0);
}

#[test]
fn knn_matches_full_sort_scan() {
    let mut rng = Rng::new(31, 900);
    for _ in 0..20 {
        let points = rng.normal_matrix(200, 6, 1.0);
        let labels: Vec<u32> = (0..200).map(|i| i % 7).collect();
        let idx = build_index(&points, &labels).unwrap();
        for _ in 0..50 {
            let q: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
            let mut all: Vec<(f64, usize)> =
                (0..200).map(|i| (cosine(points.row(i), &q), i)).collect();
            all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let want: Vec<usize> = all[..5].iter().map(|p| p.1).collect();
            assert_eq!(idx.knn(&q, 5).unwrap(), want);
        }
    }
}

#[test]
fn larger_margin_lowers_target_logits() {
    let mut rng = Rng::new(32, 900);
    let cfg = |margin| MarginConfig {
        scale: 30.0,
        margin,
        subcenters: 3,
        easy_margin: false,
    };
    let mut checked = 0;
    for _ in 0..100 {
        let w = rng.normal_matrix(5 * 3, 6, 1.0);
        let emb = rng.normal_matrix(8, 6, 1.0);
        let labels: Vec<usize> = (0..8).map(|i| i % 5).collect();
        let lo = ArcFaceParams::new(w.clone(), 5, cfg(0.3)).unwrap();
        let hi = ArcFaceParams::new(w, 5, cfg(0.5)).unwrap();
        let (a, cache) = arcface_logits(&lo, &emb, &labels).unwrap();
        let (b, _) = arcface_logits(&hi, &emb, &labels).unwrap();
        for (i, &y) in labels.iter().enumerate() {
            let theta = cache.class_cosines().get(i, y).acos();
            if theta > 0.0 && theta < std::f64::consts::PI - 0.5 {
                assert!(b.get(i, y) < a.get(i, y), "theta {theta}");
                checked += 1;
            }
            for c in (0..5).filter(|&c| c != y) {
                assert_eq!(a.get(i, c), b.get(i, c));
            }
        }
    }
    assert!(checked > 500);
}

fn capped_score(model: &Model, index: &FeatureSet, queries: &FeatureSet) -> f64 {
    let ie = embed(model, index.features()).unwrap();
    let qe = embed(model, queries.features()).unwrap();
    let idx = build_index(&ie, index.labels()).unwrap();
    let q = FeatureSet::new(qe, queries.labels().to_vec(), queries.num_classes()).unwrap();
    mean_precision_at_k(&idx, &q, &EvalSpec::default())
        .unwrap()
        .capped_score
}

#[test]
fn stage_one_loss_drops_below_a_tenth() {
    let fs = generate_synthetic(16, 20, 64, 0.05, 1).unwrap();
    let (index, _, _) = split(
        &fs,
        &SplitSpec {
            query_fraction: 0.2,
            seed: 1,
        },
    )
    .unwrap();
    let out = run_stage(
        &TrainConfig::stage1().with_seed(1),
        &index,
        StageStart::Fresh,
    )
    .unwrap();
    let r = &out.report;
    assert!(
        r.final_eval_loss < 0.1 * r.initial_eval_loss,
        "{} -> {}",
        r.initial_eval_loss,
        r.final_eval_loss
    );
}

#[test]
fn training_beats_untrained_head_on_noisier_data() {
    // at noise 0.05 a random head already separates the classes; at 0.2 it
    // does not
    let fs = generate_synthetic(16, 20, 64, 0.2, 1).unwrap();
    let (index, queries, _) = split(
        &fs,
        &SplitSpec {
            query_fraction: 0.2,
            seed: 1,
        },
    )
    .unwrap();
    let cfg1 = TrainConfig::stage1().with_seed(1);
    let baseline = capped_score(&init_model(&cfg1, 64, 16).unwrap(), &index, &queries);
    let s1 = run_stage(&cfg1, &index, StageStart::Fresh).unwrap();
    let s2 = run_stage(
        &TrainConfig::stage2().with_seed(1),
        &index,
        StageStart::Checkpoint(Box::new(s1.checkpoint())),
    )
    .unwrap();
    let trained = capped_score(&s2.model, &index, &queries);
    assert!(
        trained >= baseline + 0.10,
        "trained {trained} vs baseline {baseline}"
    );
}

#[test]
fn single_class_has_zero_loss() {
    let fs = FeatureSet::new(
        Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]).unwrap(),
        vec![0, 0],
        1,
    )
    .unwrap();
    let mut cfg = TrainConfig::stage1();
    cfg.num_branches = 2;
    cfg.embed_dim = 3;
    cfg.epochs = 3;
    cfg.batch_size = 2;
    let out = run_stage(&cfg, &fs, StageStart::Fresh).unwrap();
    assert_eq!(out.report.initial_eval_loss, 0.0);
    assert_eq!(out.report.final_eval_loss, 0.0);
    assert!(out.report.step_max_abs_update.iter().all(|&u| u == 0.0));
}
