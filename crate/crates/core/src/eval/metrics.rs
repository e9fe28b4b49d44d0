//! Clustering agreement and open-set scoring metrics.

use std::collections::BTreeMap;

use crate::error::{CdalError, Result};

fn check_pair(op: &str, a: &[usize], b: &[usize]) -> Result<()> {
    if a.is_empty() {
        return Err(CdalError::InvalidArgument(format!("{op}: empty input")));
    }
    if a.len() != b.len() {
        return Err(CdalError::InvalidArgument(format!(
            "{op}: length mismatch {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// Minimum-cost perfect assignment on a square matrix. Returns `row -> column`.
pub fn assignment(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    // potentials method, 1-indexed with a virtual column 0
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    row_to_col
}

/// Best one-to-one relabeling of `pred` onto `gt`. `mapping[p]` is the ground-truth
/// label assigned to predicted label `p`.
pub fn hungarian_match(pred: &[usize], gt: &[usize], k: usize) -> Result<(Vec<usize>, f64)> {
    check_pair("hungarian_match", pred, gt)?;
    if let Some(&bad) = pred.iter().chain(gt).find(|&&l| l >= k) {
        return Err(CdalError::InvalidArgument(format!("hungarian_match: label {bad} outside [0,{k})")));
    }
    let mut counts = vec![vec![0usize; k]; k];
    for (&p, &g) in pred.iter().zip(gt) {
        counts[p][g] += 1;
    }
    let cost: Vec<Vec<f64>> = counts.iter().map(|row| row.iter().map(|&c| -(c as f64)).collect()).collect();
    let mapping = assignment(&cost);
    let matched: usize = mapping.iter().enumerate().map(|(p, &g)| counts[p][g]).sum();
    Ok((mapping, matched as f64 / pred.len() as f64))
}

/// Compacts arbitrary labels to `0..n_distinct`, in order of first appearance.
fn compact(labels: &[usize]) -> (Vec<usize>, usize) {
    let mut ids = BTreeMap::new();
    let out = labels
        .iter()
        .map(|l| {
            let next = ids.len();
            *ids.entry(*l).or_insert(next)
        })
        .collect();
    (out, ids.len())
}

/// Aligned accuracy for partitions with arbitrary label values.
pub fn cluster_accuracy(pred: &[usize], gt: &[usize]) -> Result<f64> {
    check_pair("cluster_accuracy", pred, gt)?;
    let (p, kp) = compact(pred);
    let (g, kg) = compact(gt);
    Ok(hungarian_match(&p, &g, kp.max(kg))?.1)
}

struct Contingency {
    n: f64,
    table: Vec<Vec<f64>>,
    rows: Vec<f64>,
    cols: Vec<f64>,
}

fn contingency(a: &[usize], b: &[usize]) -> Contingency {
    let (a, ka) = compact(a);
    let (b, kb) = compact(b);
    let mut table = vec![vec![0.0; kb]; ka];
    for (&i, &j) in a.iter().zip(&b) {
        table[i][j] += 1.0;
    }
    let rows = table.iter().map(|r| r.iter().sum()).collect();
    let cols = (0..kb).map(|j| table.iter().map(|r| r[j]).sum()).collect();
    Contingency {
        n: a.len() as f64,
        table,
        rows,
        cols,
    }
}

fn entropy(counts: &[f64], n: f64) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0.0)
        .map(|&c| {
            let p = c / n;
            -p * p.ln()
        })
        .sum()
}

/// Mutual information normalized by the arithmetic mean of the two entropies.
pub fn nmi(a: &[usize], b: &[usize]) -> Result<f64> {
    check_pair("nmi", a, b)?;
    let t = contingency(a, b);
    let (ha, hb) = (entropy(&t.rows, t.n), entropy(&t.cols, t.n));
    if ha == 0.0 && hb == 0.0 {
        return Ok(1.0);
    }
    let mut mi = 0.0;
    for (i, row) in t.table.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            if c > 0.0 {
                mi += c / t.n * (c * t.n / (t.rows[i] * t.cols[j])).ln();
            }
        }
    }
    Ok((2.0 * mi / (ha + hb)).clamp(0.0, 1.0))
}

fn choose2(x: f64) -> f64 {
    x * (x - 1.0) / 2.0
}

/// Pair-counting adjusted Rand index.
pub fn ari(a: &[usize], b: &[usize]) -> Result<f64> {
    check_pair("ari", a, b)?;
    let t = contingency(a, b);
    let index: f64 = t.table.iter().flatten().map(|&c| choose2(c)).sum();
    let sa: f64 = t.rows.iter().map(|&c| choose2(c)).sum();
    let sb: f64 = t.cols.iter().map(|&c| choose2(c)).sum();
    let total = choose2(t.n);
    if total == 0.0 {
        return Ok(1.0);
    }
    let expected = sa * sb / total;
    let max = (sa + sb) / 2.0;
    if max == expected {
        // both partitions trivial (all-in-one or all-singletons) and necessarily equal
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

/// Fraction of samples belonging to the majority class of their cluster.
pub fn purity(pred: &[usize], gt: &[usize]) -> Result<f64> {
    check_pair("purity", pred, gt)?;
    let t = contingency(pred, gt);
    let hits: f64 = t.table.iter().map(|row| row.iter().cloned().fold(0.0, f64::max)).sum();
    Ok(hits / t.n)
}

/// Probability that a random known sample outscores a random unknown one, ties
/// counting half.
pub fn auc_known_unknown(scores: &[f64], is_known: &[bool]) -> Result<f64> {
    if scores.len() != is_known.len() {
        return Err(CdalError::InvalidArgument("auc: length mismatch".into()));
    }
    let n_known = is_known.iter().filter(|&&k| k).count();
    let n_unknown = scores.len() - n_known;
    if n_known == 0 || n_unknown == 0 {
        return Err(CdalError::InvalidArgument("auc: need both known and unknown samples".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(CdalError::Numeric("auc: NaN score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // midranks
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += order[i..=j].iter().filter(|&&o| is_known[o]).count() as f64 * mid;
        i = j + 1;
    }
    let (nk, nu) = (n_known as f64, n_unknown as f64);
    Ok((rank_sum - nk * (nk + 1.0) / 2.0) / (nk * nu))
}

/// Area under the correct-classification-rate vs false-positive-rate curve swept
/// over every observed score threshold.
pub fn oscr(known_scores: &[f64], known_correct: &[bool], unknown_scores: &[f64]) -> Result<f64> {
    let points = oscr_curve(known_scores, known_correct, unknown_scores)?;
    Ok(points.windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0).sum())
}

/// `(fpr, ccr)` points of the OSCR curve from `(0,0)`, sorted by fpr. With every
/// known sample marked correct this is the ROC curve.
pub fn oscr_curve(known_scores: &[f64], known_correct: &[bool], unknown_scores: &[f64]) -> Result<Vec<(f64, f64)>> {
    if known_scores.len() != known_correct.len() {
        return Err(CdalError::InvalidArgument("oscr: length mismatch".into()));
    }
    if known_scores.is_empty() || unknown_scores.is_empty() {
        return Err(CdalError::InvalidArgument("oscr: empty split".into()));
    }
    if known_scores.iter().chain(unknown_scores).any(|s| s.is_nan()) {
        return Err(CdalError::Numeric("oscr: NaN score".into()));
    }
    let mut thresholds: Vec<f64> = known_scores.iter().chain(unknown_scores).copied().collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let (nk, nu) = (known_scores.len() as f64, unknown_scores.len() as f64);
    let mut points = vec![(0.0, 0.0)];
    for &t in &thresholds {
        let ccr = known_scores
            .iter()
            .zip(known_correct)
            .filter(|&(&s, &c)| c && s >= t)
            .count() as f64
            / nk;
        let fpr = unknown_scores.iter().filter(|&&s| s >= t).count() as f64 / nu;
        points.push((fpr, ccr));
    }
    points.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    Ok(points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng as _;

    fn permutations(k: usize) -> Vec<Vec<usize>> {
        if k == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(k - 1) {
            for pos in 0..=p.len() {
                let mut q = p.clone();
                q.insert(pos, k - 1);
                out.push(q);
            }
        }
        out
    }

    fn brute_force_acc(pred: &[usize], gt: &[usize], k: usize) -> f64 {
        permutations(k)
            .iter()
            .map(|perm| pred.iter().zip(gt).filter(|&(&p, &g)| perm[p] == g).count())
            .max()
            .unwrap() as f64
            / pred.len() as f64
    }

    fn random_labels(r: &mut rng::Rng, n: usize, k: usize) -> Vec<usize> {
        (0..n).map(|_| r.random_range(0..k)).collect()
    }

    #[test]
    fn hungarian_identity_and_shift() {
        let gt = vec![0, 1, 2, 3, 0, 1, 2, 3, 1];
        let (map, acc) = hungarian_match(&gt, &gt, 4).unwrap();
        assert_eq!(acc, 1.0);
        assert_eq!(map, vec![0, 1, 2, 3]);
        let shifted: Vec<usize> = gt.iter().map(|g| (g + 1) % 4).collect();
        assert_eq!(hungarian_match(&shifted, &gt, 4).unwrap().1, 1.0);
    }

    #[test]
    fn hungarian_matches_brute_force_30_samples() {
        let mut r = rng::stream(1, "hung30");
        let pred = random_labels(&mut r, 30, 4);
        let gt = random_labels(&mut r, 30, 4);
        assert_eq!(hungarian_match(&pred, &gt, 4).unwrap().1, brute_force_acc(&pred, &gt, 4));
    }

    #[test]
    fn hungarian_errors() {
        assert!(hungarian_match(&[], &[], 2).is_err());
        assert!(hungarian_match(&[0, 1], &[0], 2).is_err());
        assert!(hungarian_match(&[0, 2], &[0, 1], 2).is_err());
    }

    #[test]
    fn nmi_cases() {
        let a = [0, 0, 1, 1, 2, 2];
        assert!((nmi(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(nmi(&a, &[5; 6]).unwrap(), 0.0);
        assert_eq!(nmi(&[3; 4], &[7; 4]).unwrap(), 1.0);
        // 10-sample plug-in computation
        let a = [0, 0, 0, 1, 1, 1, 2, 2, 2, 2];
        let b = [0, 0, 1, 1, 1, 2, 2, 2, 0, 0];
        let n = 10.0;
        let pa = [0.3, 0.3, 0.4];
        let pb = [0.4, 0.3, 0.3];
        let joint = [[2.0, 1.0, 0.0], [0.0, 2.0, 1.0], [2.0, 0.0, 2.0]];
        let h = |p: &[f64]| -> f64 { p.iter().map(|x| -x * x.ln()).sum() };
        let mut mi = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let pij: f64 = joint[i][j] / n;
                if pij > 0.0 {
                    mi += pij * (pij / (pa[i] * pb[j])).ln();
                }
            }
        }
        let want = mi / ((h(&pa) + h(&pb)) / 2.0);
        assert!((nmi(&a, &b).unwrap() - want).abs() < 1e-12);
    }

    fn ari_pairs(a: &[usize], b: &[usize]) -> f64 {
        // all-pairs enumeration of the Rand contingency counts
        let n = a.len();
        let (mut both, mut only_a, mut only_b, mut pairs) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..n {
            for j in i + 1..n {
                let sa = a[i] == a[j];
                let sb = b[i] == b[j];
                pairs += 1.0;
                if sa && sb {
                    both += 1.0;
                }
                if sa {
                    only_a += 1.0;
                }
                if sb {
                    only_b += 1.0;
                }
            }
        }
        let expected = only_a * only_b / pairs;
        let max = (only_a + only_b) / 2.0;
        if max == expected {
            return 1.0;
        }
        (both - expected) / (max - expected)
    }

    #[test]
    fn ari_cases() {
        let a = [0, 1, 1, 2, 2, 2];
        assert!((ari(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(ari(&a, &[4; 6]).unwrap(), 0.0);
        let a = [0, 0, 1, 1, 2, 2, 0, 1];
        let b = [0, 1, 1, 1, 2, 0, 0, 2];
        assert!((ari(&a, &b).unwrap() - ari_pairs(&a, &b)).abs() < 1e-12);
    }

    fn purity_direct(pred: &[usize], gt: &[usize]) -> f64 {
        let mut total = 0;
        let clusters: std::collections::BTreeSet<_> = pred.iter().collect();
        for c in clusters {
            let members: Vec<usize> = pred.iter().zip(gt).filter(|(p, _)| *p == c).map(|(_, g)| *g).collect();
            let best = members.iter().map(|g| members.iter().filter(|h| *h == g).count()).max().unwrap();
            total += best;
        }
        total as f64 / pred.len() as f64
    }

    #[test]
    fn purity_cases() {
        assert_eq!(purity(&[0, 0, 1, 1], &[3, 3, 5, 5]).unwrap(), 1.0);
        assert_eq!(purity(&[0, 0, 0, 0], &[1, 1, 2, 2]).unwrap(), 0.5);
        let mut r = rng::stream(2, "purity");
        let p = random_labels(&mut r, 25, 4);
        let g = random_labels(&mut r, 25, 3);
        assert!((purity(&p, &g).unwrap() - purity_direct(&p, &g)).abs() < 1e-12);
    }

    fn auc_pairs(scores: &[f64], known: &[bool]) -> f64 {
        let (mut acc, mut n) = (0.0, 0.0);
        for (i, &si) in scores.iter().enumerate() {
            for (j, &sj) in scores.iter().enumerate() {
                if known[i] && !known[j] {
                    n += 1.0;
                    acc += if si > sj {
                        1.0
                    } else if si == sj {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        acc / n
    }

    #[test]
    fn auc_cases() {
        let known = [true, true, false, false];
        assert_eq!(auc_known_unknown(&[0.9, 0.8, 0.1, 0.2], &known).unwrap(), 1.0);
        assert_eq!(auc_known_unknown(&[0.5; 4], &known).unwrap(), 0.5);
        let scores = [0.3, 0.7, 0.7, 0.1, 0.9, 0.4, 0.4, 0.6, 0.2, 0.7];
        let known = [true, false, true, false, true, true, false, true, false, false];
        assert!((auc_known_unknown(&scores, &known).unwrap() - auc_pairs(&scores, &known)).abs() < 1e-12);
        assert!(auc_known_unknown(&[0.1], &[true]).is_err());
    }

    fn oscr_sweep(ks: &[f64], kc: &[bool], us: &[f64]) -> f64 {
        // every threshold from +inf down through each observed score
        let mut ts: Vec<f64> = ks.iter().chain(us).copied().collect();
        ts.push(f64::INFINITY);
        ts.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let pt = |t: f64| {
            let ccr = ks.iter().zip(kc).filter(|(s, c)| **c && **s >= t).count() as f64 / ks.len() as f64;
            let fpr = us.iter().filter(|s| **s >= t).count() as f64 / us.len() as f64;
            (fpr, ccr)
        };
        let pts: Vec<(f64, f64)> = ts.iter().map(|&t| pt(t)).collect();
        pts.windows(2).map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0).sum()
    }

    #[test]
    fn oscr_cases() {
        assert_eq!(oscr(&[0.9, 0.8], &[true, true], &[0.1, 0.2]).unwrap(), 1.0);
        assert_eq!(oscr(&[0.9, 0.8], &[false, false], &[0.1, 0.2]).unwrap(), 0.0);
        let ks = [0.9, 0.4, 0.6];
        let kc = [true, false, true];
        let us = [0.5, 0.95, 0.3];
        // by hand: thresholds 0.95..0.3 give (fpr, ccr) = (1/3,0) (1/3,1/3) (1/3,2/3) (2/3,2/3) (2/3,2/3) (1,2/3)
        let hand = (1.0 / 3.0) * (2.0 / 3.0) + (1.0 / 3.0) * (2.0 / 3.0);
        let got = oscr(&ks, &kc, &us).unwrap();
        assert!((got - hand).abs() < 1e-12);
        assert!((got - oscr_sweep(&ks, &kc, &us)).abs() < 1e-12);
    }

    #[test]
    fn metric_oracles_on_random_instances() {
        let mut r = rng::stream(3, "oracles");
        for _ in 0..200 {
            let n = r.random_range(2..14);
            let a = random_labels(&mut r, n, 4);
            let b = random_labels(&mut r, n, 3);
            assert!((ari(&a, &b).unwrap() - ari_pairs(&a, &b)).abs() < 1e-9);
            assert!((purity(&a, &b).unwrap() - purity_direct(&a, &b)).abs() < 1e-9);
            let scores: Vec<f64> = (0..n).map(|_| (r.random_range(0..6) as f64) / 5.0).collect();
            let mut known: Vec<bool> = (0..n).map(|_| r.random()).collect();
            known[0] = true;
            known[1] = false;
            assert!((auc_known_unknown(&scores, &known).unwrap() - auc_pairs(&scores, &known)).abs() < 1e-9);
            let correct: Vec<bool> = (0..n).map(|_| r.random()).collect();
            let ks: Vec<f64> = scores.iter().zip(&known).filter(|p| *p.1).map(|p| *p.0).collect();
            let kc: Vec<bool> = correct.iter().zip(&known).filter(|p| *p.1).map(|p| *p.0).collect();
            let us: Vec<f64> = scores.iter().zip(&known).filter(|p| !*p.1).map(|p| *p.0).collect();
            assert!((oscr(&ks, &kc, &us).unwrap() - oscr_sweep(&ks, &kc, &us)).abs() < 1e-9);
        }
    }

    #[test]
    fn hungarian_equals_brute_force_500_instances() {
        let mut r = rng::stream(4, "hung500");
        for _ in 0..500 {
            let k = r.random_range(1..=5);
            let n = r.random_range(1..25);
            let pred = random_labels(&mut r, n, k);
            let gt = random_labels(&mut r, n, k);
            assert_eq!(hungarian_match(&pred, &gt, k).unwrap().1, brute_force_acc(&pred, &gt, k));
        }
    }

    fn relabel(labels: &[usize], perm: &[usize]) -> Vec<usize> {
        labels.iter().map(|&l| perm[l]).collect()
    }

    proptest! {
        #[test]
        fn metrics_invariant_under_relabeling(
            a in proptest::collection::vec(0usize..4, 2..30),
            seed in any::<u64>(),
        ) {
            let mut r = rng::stream(seed, "relabel");
            let b: Vec<usize> = a.iter().map(|&x| if r.random_bool(0.3) { r.random_range(0..4) } else { x }).collect();
            let mut perm: Vec<usize> = (0..4).collect();
            rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut r);
            let pa = relabel(&a, &perm);
            prop_assert!((nmi(&a, &b).unwrap() - nmi(&pa, &b).unwrap()).abs() < 1e-12);
            prop_assert!((ari(&a, &b).unwrap() - ari(&pa, &b).unwrap()).abs() < 1e-12);
            prop_assert!((purity(&a, &b).unwrap() - purity(&pa, &b).unwrap()).abs() < 1e-12);
            prop_assert_eq!(hungarian_match(&a, &b, 4).unwrap().1, hungarian_match(&pa, &b, 4).unwrap().1);
        }

        #[test]
        fn auc_flip_complements(scores in proptest::collection::hash_set(0u32..10_000, 4..40), seed in any::<u64>()) {
            let scores: Vec<f64> = scores.into_iter().map(|s| s as f64).collect();
            let mut r = rng::stream(seed, "flip");
            let mut known: Vec<bool> = scores.iter().map(|_| r.random()).collect();
            known[0] = true;
            known[1] = false;
            let flipped: Vec<bool> = known.iter().map(|k| !k).collect();
            let s = auc_known_unknown(&scores, &known).unwrap() + auc_known_unknown(&scores, &flipped).unwrap();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }

        #[test]
        fn oscr_bounded_by_known_accuracy(
            ks in proptest::collection::vec(0.0f64..1.0, 1..20),
            us in proptest::collection::vec(0.0f64..1.0, 1..20),
            seed in any::<u64>(),
        ) {
            let mut r = rng::stream(seed, "oscr");
            let kc: Vec<bool> = ks.iter().map(|_| r.random()).collect();
            let acc = kc.iter().filter(|&&c| c).count() as f64 / kc.len() as f64;
            let o = oscr(&ks, &kc, &us).unwrap();
            prop_assert!(o <= acc + 1e-12);
            prop_assert!(o >= 0.0);
        }
    }
}
