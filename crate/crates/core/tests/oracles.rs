//! Properties checked against independent reference implementations.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use qexgan::checkpoint::{Checkpoint, CheckpointKind};
use qexgan::conditions::BallTree;
use qexgan::embeddings::EmbeddingTable;
use qexgan::metrics::{semantic_similarity, word_coverage};
use qexgan::tape::{Mat, ParamStore};

/// Cyclic Jacobi eigenvalues of a symmetric matrix.
fn jacobi_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
    let n = a.len();
    for _ in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        if off < 1e-24 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
    ev.sort_by(|x, y| y.total_cmp(x));
    ev
}

#[test]
fn pca_matches_jacobi_spectrum() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (n, d, target) = (60, 7, 3);
    // Anisotropic cloud so the spectrum is well separated.
    let scales = [3.0, 2.0, 1.5, 1.0, 0.5, 0.3, 0.1];
    let vectors: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            (0..d)
                .map(|j| scales[j] * rng.random_range(-1.0..1.0) + 0.2 * j as f64)
                .collect()
        })
        .collect();
    let tokens: Vec<String> = (0..n).map(|i| format!("w{i}")).collect();
    let table = EmbeddingTable::new(tokens.clone(), vectors.clone()).unwrap();
    let reduced = table.reduce_dimensions(target).unwrap();

    let mean: Vec<f64> = (0..d)
        .map(|j| vectors.iter().map(|v| v[j]).sum::<f64>() / n as f64)
        .collect();
    let centered: Vec<Vec<f64>> = vectors
        .iter()
        .map(|v| v.iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect();
    let cov: Vec<Vec<f64>> = (0..d)
        .map(|a| {
            (0..d)
                .map(|b| centered.iter().map(|r| r[a] * r[b]).sum::<f64>() / n as f64)
                .collect()
        })
        .collect();
    let eig = jacobi_eigenvalues(cov);

    // Variance along each kept axis is the matching eigenvalue.
    for k in 0..target {
        let var = tokens.iter().map(|t| reduced.lookup(t)[k].powi(2)).sum::<f64>() / n as f64;
        assert!((var - eig[k]).abs() < 1e-9, "axis {k}: {var} vs {}", eig[k]);
    }
    // Squared reconstruction error is n times the discarded spectrum.
    let total: f64 = centered.iter().flatten().map(|x| x * x).sum();
    let kept: f64 = tokens
        .iter()
        .map(|t| reduced.lookup(t).iter().map(|x| x * x).sum::<f64>())
        .sum();
    let discarded: f64 = eig[target..].iter().sum();
    assert!(((total - kept) - n as f64 * discarded).abs() < 1e-8);
}

fn words(ids: &[u8]) -> Vec<String> {
    ids.iter().map(|i| format!("w{i}")).collect()
}

proptest! {
    #[test]
    fn ball_tree_agrees_with_linear_scan(
        raw in prop::collection::vec(prop::collection::vec(-3i8..3, 3), 1..80),
        q in prop::collection::vec(-4i8..4, 3),
        k in 1usize..12,
        leaf in 1usize..10,
    ) {
        let points: Vec<Vec<f64>> = raw.iter().map(|p| p.iter().map(|&x| x as f64 * 0.5).collect()).collect();
        let q: Vec<f64> = q.iter().map(|&x| x as f64 * 0.5).collect();
        let tree = BallTree::build(&points, leaf).unwrap();
        let got = tree.nearest(&q, k).unwrap();
        let mut want: Vec<(usize, f64)> = points
            .iter()
            .enumerate()
            .map(|(i, p)| (i, p.iter().zip(&q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()))
            .collect();
        want.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        want.truncate(k);
        prop_assert_eq!(got.truncated, k > points.len());
        prop_assert_eq!(got.hits, want);
    }

    #[test]
    fn word_coverage_matches_set_ratio(
        expansions in prop::collection::vec(prop::collection::vec(0u8..30, 0..6), 1..6),
        docs in prop::collection::vec(prop::collection::vec(0u8..30, 1..6), 1..6),
    ) {
        let e: Vec<Vec<String>> = expansions.iter().map(|x| words(x)).collect();
        let d: Vec<Vec<String>> = docs.iter().map(|x| words(x)).collect();
        let es: std::collections::BTreeSet<_> = expansions.iter().flatten().collect();
        let ds: std::collections::BTreeSet<_> = docs.iter().flatten().collect();
        let wc = word_coverage(&e, &d).unwrap();
        prop_assert_eq!(wc, es.len() as f64 / ds.len() as f64);
        prop_assert_eq!(word_coverage(&d, &d).unwrap(), 1.0);
    }

    #[test]
    fn similarity_is_bounded_and_self_similar(
        vectors in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 4), 6),
        pairs in prop::collection::vec((prop::collection::vec(0u8..6, 1..4), prop::collection::vec(0u8..6, 1..4)), 1..8),
    ) {
        let tokens: Vec<String> = (0..6).map(|i| format!("w{i}")).collect();
        let table = EmbeddingTable::new(tokens, vectors).unwrap();
        let g: Vec<Vec<String>> = pairs.iter().map(|(a, _)| words(a)).collect();
        let r: Vec<Vec<String>> = pairs.iter().map(|(_, b)| words(b)).collect();
        if let Ok(s) = semantic_similarity(&g, &r, &table) {
            prop_assert!(s.mean >= -1.0 - 1e-12 && s.mean <= 1.0 + 1e-12);
            prop_assert!(s.std >= 0.0 && s.std <= 1.0 + 1e-12);
            prop_assert_eq!(s.pairs + s.skipped, pairs.len());
        }
        if let Ok(s) = semantic_similarity(&g, &g, &table) {
            prop_assert!((s.mean - 1.0).abs() < 1e-9);
            prop_assert!(s.std < 1e-6);
        }
    }

    #[test]
    fn checkpoint_bytes_round_trip(
        shapes in prop::collection::vec((1usize..5, 1usize..5), 1..5),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::default();
        for (i, (r, c)) in shapes.iter().enumerate() {
            params.add(format!("p{i}"), Mat::from_shape_fn((*r, *c), |_| rng.random_range(-10.0..10.0)));
        }
        let ckpt = Checkpoint::from_params(CheckpointKind::Generator, serde_json::json!({"x": 1}), "v", "e", &params);
        let bytes = ckpt.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back.header, &ckpt.header);
        for (a, b) in back.values.iter().zip(&ckpt.values) {
            prop_assert!(a.iter().zip(b).all(|(x, y)| *x == (*y as f32) as f64));
        }
        prop_assert_eq!(&back.to_bytes(), &bytes);
        prop_assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
