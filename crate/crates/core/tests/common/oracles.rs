//! Brute-force reference implementations.

/// Minimum total cost over all permutations (Heap's algorithm).
pub fn brute_force_assignment(cost: &[Vec<f64>]) -> f64 {
    let n = cost.len();
    let mut perm: Vec<usize> = (0..n).collect();
    let eval = |p: &[usize]| p.iter().enumerate().map(|(i, &j)| cost[i][j]).sum::<f64>();
    let mut best = eval(&perm);
    let mut c = vec![0; n];
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            best = best.min(eval(&perm));
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    best
}

/// Pair counting over every positive/negative pair.
pub fn brute_force_auroc(labels: &[u8], scores: &[f64]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li == 1 && lj == 0 {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

/// Average precision by sweeping every distinct score as a threshold.
pub fn brute_force_auprc(labels: &[u8], scores: &[f64]) -> f64 {
    let pos = labels.iter().filter(|&&l| l == 1).count() as f64;
    let mut thresholds = scores.to_vec();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let (mut ap, mut prev_recall) = (0.0, 0.0);
    for t in thresholds {
        let called: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] >= t).collect();
        let tp = called.iter().filter(|&&i| labels[i] == 1).count() as f64;
        let recall = tp / pos;
        ap += (recall - prev_recall) * tp / called.len() as f64;
        prev_recall = recall;
    }
    ap
}

/// Logistic regression by full-batch gradient descent on standardized
/// features, with a small L2 penalty.
pub fn fit_logistic(x: &[Vec<f64>], y: &[u8], iters: usize, lr: f64) -> (Vec<f64>, f64) {
    let d = x[0].len();
    let n = x.len() as f64;
    let (mut w, mut b) = (vec![0.0; d], 0.0);
    for _ in 0..iters {
        let mut gw = vec![0.0; d];
        let mut gb = 0.0;
        for (xi, &yi) in x.iter().zip(y) {
            let z: f64 = xi.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>() + b;
            let e = 1.0 / (1.0 + (-z).exp()) - f64::from(yi);
            for (g, a) in gw.iter_mut().zip(xi) {
                *g += e * a;
            }
            gb += e;
        }
        for (wk, g) in w.iter_mut().zip(&gw) {
            *wk -= lr * (g / n + 1e-4 * *wk);
        }
        b -= lr * gb / n;
    }
    (w, b)
}
