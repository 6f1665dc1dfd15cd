use std::collections::BTreeSet;

use multivul_core::augment::{augment_tokens, random_delete, random_swap};
use multivul_core::corpus::{
    build_vocab, encode_text, split_records, FunctionRecord, Modality, PAD_ID,
};
use multivul_core::diff::Tensor;
use multivul_core::evaluate::{compute_metrics, pca_project, threshold_label, Prediction};
use multivul_core::objective::{clip_loss, consistency_loss};
use multivul_core::rng;
use nalgebra::{DMatrix, SymmetricEigen};
use proptest::prelude::*;

fn records(labels: &[u8]) -> Vec<FunctionRecord> {
    labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            FunctionRecord::new(
                format!("r{i}"),
                format!("int f{i} ( ) {{ return {i} ; }}"),
                y,
            )
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn swap_permutes(tokens in prop::collection::vec(0u32..50, 1..60), alpha in 0.0f64..1.0, seed: u64) {
        let out = random_swap(&tokens, alpha, &mut rng::substream(seed, &[0]));
        let (mut a, mut b) = (tokens.clone(), out);
        a.sort_unstable();
        b.sort_unstable();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn delete_keeps_order(tokens in prop::collection::vec(0u32..50, 1..60), alpha in 0.0f64..1.0, seed: u64) {
        let out = random_delete(&tokens, alpha, &mut rng::substream(seed, &[1]));
        prop_assert!(!out.is_empty() && out.len() <= tokens.len());
        let mut it = tokens.iter();
        prop_assert!(out.iter().all(|t| it.any(|u| u == t)));
    }

    #[test]
    fn augmentation_is_seed_deterministic(tokens in prop::collection::vec(0u32..50, 1..40), seed: u64) {
        let a = augment_tokens(&tokens, 0.3, &mut rng::substream(seed, &[2]));
        let b = augment_tokens(&tokens, 0.3, &mut rng::substream(seed, &[2]));
        prop_assert_eq!(a, b);
    }

    #[test]
    fn clip_loss_is_non_negative(values in prop::collection::vec(-20.0f64..20.0, 16)) {
        let l = clip_loss(&Tensor::matrix(4, 4, values).unwrap()).unwrap();
        prop_assert!(l >= 0.0 && l.is_finite());
    }

    #[test]
    fn consistency_is_symmetric(a in prop::collection::vec(-1.0f64..1.0, 6), b in prop::collection::vec(-1.0f64..1.0, 6)) {
        let a = Tensor::matrix(2, 3, a).unwrap();
        let b = Tensor::matrix(2, 3, b).unwrap();
        let l1 = consistency_loss(&a, &b, &b, &a).unwrap();
        let l2 = consistency_loss(&b, &a, &a, &b).unwrap();
        prop_assert!((l1 - l2).abs() < 1e-12);
    }

    #[test]
    fn split_partitions_ids(labels in prop::collection::vec(0u8..2, 10..120), seed: u64) {
        let recs = records(&labels);
        let split = split_records(&recs, [0.8, 0.1, 0.1], seed).unwrap();
        let mut ids = BTreeSet::new();
        for r in split.train.iter().chain(&split.validation).chain(&split.test) {
            prop_assert!(ids.insert(r.id.clone()));
        }
        prop_assert_eq!(ids.len(), recs.len());
        let again = split_records(&recs, [0.8, 0.1, 0.1], seed).unwrap();
        prop_assert_eq!(split.test, again.test);
    }

    #[test]
    fn encoding_respects_length(code in "[a-z ();{}=+0-9]{0,200}", max_len in 1usize..64) {
        let rec = FunctionRecord::new("a", "int main ( ) { return 0 ; }", 0);
        let vocab = build_vocab(&[rec], Modality::Code, 100).unwrap();
        let seq = encode_text(&code, &vocab, max_len);
        prop_assert!(seq.tokens.len() <= max_len);
        prop_assert!(!seq.tokens.contains(&PAD_ID));
    }

    #[test]
    fn confusion_counts_cover_every_prediction(pairs in prop::collection::vec((0.0f64..1.0, 0u8..2), 0..80)) {
        let preds: Vec<Prediction> = pairs
            .iter()
            .enumerate()
            .map(|(i, &(p, y))| Prediction {
                id: i.to_string(),
                probability: p,
                predicted: threshold_label(p, 0.5),
                label: y,
                cwe: None,
            })
            .collect();
        let m = compute_metrics(&preds);
        prop_assert_eq!(m.total(), preds.len());
        for v in [m.accuracy, m.precision, m.recall, m.f1] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }
}

#[test]
fn pca_matches_dense_eigensolver() {
    for seed in 0..20u64 {
        let mut r = rng::substream(seed, &[77]);
        let scales = [2.5, 1.5, 1.0, 0.5];
        let rows: Vec<Vec<f64>> = (0..25)
            .map(|_| scales.iter().map(|s| s * rng::normal(&mut r)).collect())
            .collect();
        let pca = pca_project(&Tensor::from_rows(&rows).unwrap(), &[0; 25], seed).unwrap();

        let x = DMatrix::from_fn(25, 4, |i, j| rows[i][j]);
        let mean = x.row_mean();
        let c = DMatrix::from_fn(25, 4, |i, j| x[(i, j)] - mean[j]);
        let cov = c.transpose() * &c / 24.0;
        let eig = SymmetricEigen::new(cov.clone());
        let mut order: Vec<usize> = (0..4).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        for (k, &axis) in order.iter().take(2).enumerate() {
            let v = eig.eigenvectors.column(axis);
            let dot: f64 = v.iter().zip(&pca.components[k]).map(|(a, b)| a * b).sum();
            assert!(
                (dot.abs() - 1.0).abs() < 1e-6,
                "seed {seed} component {k}: |cos| {dot}"
            );
            let ratio = eig.eigenvalues[axis] / cov.trace();
            assert!((ratio - pca.explained_variance_ratio[k]).abs() < 1e-6);
        }
        // coordinates are centered projections
        for (i, coord) in pca.coordinates.iter().enumerate() {
            let p: f64 = (0..4).map(|j| c[(i, j)] * pca.components[0][j]).sum();
            assert!((p - coord[0]).abs() < 1e-9);
        }
    }
}
