mod common;

use common::oracles::{brute_force_assignment, brute_force_auprc, brute_force_auroc};
use ppn_core::memory::{closest, kmeans_plus_plus, match_prototypes, minibatch_kmeans, KMeansConfig};
use ppn_core::metrics::{auprc, auroc};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[test]
fn assignment_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for case in 0..200 {
        let n = rng.random_range(2..=7);
        // every third matrix uses small integers so ties are common
        let cost: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                (0..n)
                    .map(|_| if case % 3 == 0 { f64::from(rng.random_range(0..4u8)) } else { rng.random_range(0.0..10.0) })
                    .collect()
            })
            .collect();
        let got = match_prototypes(&cost).unwrap();
        let mut seen = got.permutation.clone();
        seen.sort_unstable();
        assert_eq!(seen, (0..n).collect::<Vec<_>>());
        let direct: f64 = got.permutation.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
        assert_eq!(got.total_cost, direct);
        let best = brute_force_assignment(&cost);
        assert!((got.total_cost - best).abs() <= 1e-12 * best.abs().max(1.0), "case {case}: {} vs {best}", got.total_cost);
        if case % 3 == 0 {
            assert_eq!(got.total_cost, best, "integer costs must match exactly");
        }
    }
}

#[test]
fn metrics_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut done = 0;
    while done < 100 {
        let n = rng.random_range(2..=50);
        let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2u8)).collect();
        let scores: Vec<f64> = if done % 2 == 0 {
            (0..n).map(|_| f64::from(rng.random_range(0..5u8)) / 4.0).collect()
        } else {
            (0..n).map(|_| rng.random_range(0.0..1.0)).collect()
        };
        let pos = labels.iter().filter(|&&l| l == 1).count();
        if pos == 0 || pos == n {
            continue;
        }
        assert!((auroc(&labels, &scores).unwrap() - brute_force_auroc(&labels, &scores)).abs() <= 1e-9);
        assert!((auprc(&labels, &scores).unwrap() - brute_force_auprc(&labels, &scores)).abs() <= 1e-9);
        done += 1;
    }
}

#[test]
fn random_scores_give_prevalence() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let labels: Vec<u8> = (0..200).map(|i| (i % 2) as u8).collect();
    let trials: Vec<f64> = (0..1000)
        .map(|_| {
            let s: Vec<f64> = (0..200).map(|_| rng.random_range(0.0..1.0)).collect();
            auprc(&labels, &s).unwrap()
        })
        .collect();
    let mean = trials.iter().sum::<f64>() / 1000.0;
    let sd = (trials.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 999.0).sqrt();
    assert!((mean - 0.5).abs() <= 3.0 * sd, "mean {mean}, sd {sd}");
}

#[test]
fn kmeans_recovers_planted_clusters() {
    let noise = 0.5;
    let centers = [[0.0, 0.0], [10.0 * noise, 0.0]];
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut points = Vec::new();
        let mut truth = Vec::new();
        for _ in 0..1000 {
            for (c, center) in centers.iter().enumerate() {
                let e: [f64; 2] = [rng.sample(StandardNormal), rng.sample(StandardNormal)];
                points.push(vec![center[0] + noise * e[0], center[1] + noise * e[1]]);
                truth.push(c);
            }
        }
        let init = kmeans_plus_plus(&points, 2, seed).unwrap();
        let found = minibatch_kmeans(&points, init, &KMeansConfig::default(), seed).unwrap();
        for center in &centers {
            let j = closest(center, &found);
            let d = ((found[j][0] - center[0]).powi(2) + (found[j][1] - center[1]).powi(2)).sqrt();
            assert!(d < 0.1, "seed {seed}: centroid off by {d}");
        }
        let labels: Vec<usize> = points.iter().map(|p| closest(p, &found)).collect();
        let flip = labels[0] != truth[0];
        assert!(labels.iter().zip(&truth).all(|(&l, &t)| (l == t) != flip), "seed {seed}: impure");
    }
}
