use colony_core::dq::{
    accuracy_variance, dq_report, kde_grid, kendall_tau_b, kendall_tau_stats, pairwise_disagreement, pooled_variance,
    row_entropy, silverman_bandwidth, system_entropy, trapezoid, AccuracyGrid, DqMode, DqReport, KdeConfig,
};
use colony_core::eval::{
    collective_decide, per_class_f1, roc_one_vs_rest, CollectiveMode, ConfusionMatrix, ScoreMatrix,
};
use proptest::prelude::*;

/// Mann-Whitney U / (P·N), ties counted one half.
fn mann_whitney(pos: &[f64], neg: &[f64]) -> f64 {
    let mut u = 0.0;
    for &p in pos {
        for &n in neg {
            u += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    u / (pos.len() * neg.len()) as f64
}

/// Tau-b from concordant/discordant counts and tie groups.
fn tau_b_by_pairs(x: &[f64], y: &[f64]) -> Option<f64> {
    let k = x.len() as i64;
    let (mut nc, mut nd) = (0i64, 0i64);
    for i in 0..x.len() {
        for j in i + 1..x.len() {
            let prod = (x[i] - x[j]) * (y[i] - y[j]);
            if prod > 0.0 {
                nc += 1;
            } else if prod < 0.0 {
                nd += 1;
            }
        }
    }
    let ties = |v: &[f64]| -> i64 {
        let mut sorted = v.to_vec();
        sorted.sort_by(f64::total_cmp);
        sorted
            .chunk_by(|a, b| a == b)
            .map(|g| (g.len() * (g.len() - 1) / 2) as i64)
            .sum()
    };
    let n0 = k * (k - 1) / 2;
    let (dx, dy) = (n0 - ties(x), n0 - ties(y));
    if dx == 0 || dy == 0 {
        return None;
    }
    Some((nc - nd) as f64 / ((dx * dy) as f64).sqrt())
}

fn level() -> impl Strategy<Value = f64> {
    // coarse levels so ties are common
    (0u32..=8).prop_map(|v| v as f64 / 8.0)
}

fn grid_strategy() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (2usize..6, 2usize..10).prop_flat_map(|(p, k)| prop::collection::vec(prop::collection::vec(level(), k), p))
}

fn positive_grid() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (2usize..6, 2usize..10).prop_flat_map(|(p, k)| {
        prop::collection::vec(prop::collection::vec((1u32..=20).prop_map(|v| v as f64 / 20.0), k), p)
    })
}

fn scores_of(r: &DqReport) -> [Option<f64>; 6] {
    [
        Some(r.pairwise_disagreement),
        Some(r.system_entropy),
        Some(r.accuracy_variance),
        Some(r.pooled_variance),
        r.mean_tau,
        r.std_tau,
    ]
}

fn close(a: [Option<f64>; 6], b: [Option<f64>; 6]) -> bool {
    a.iter().zip(&b).all(|(x, y)| match (x, y) {
        (Some(x), Some(y)) => (x - y).abs() < 1e-12,
        (None, None) => true,
        _ => false,
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(600))]

    #[test]
    fn auc_equals_mann_whitney(
        raw in prop::collection::vec(((0u32..25), (0usize..3)), 2..200),
        class in 0usize..3,
    ) {
        let labels: Vec<usize> = raw.iter().map(|r| r.1).collect();
        prop_assume!(labels.contains(&class) && labels.iter().any(|&l| l != class));
        let classes = 3;
        let mut flat = Vec::new();
        for (s, _) in &raw {
            let mut row = vec![0.0; classes];
            row[class] = *s as f64 / 24.0;
            flat.extend(row);
        }
        let m = ScoreMatrix::new(classes, flat, labels.clone()).unwrap();
        let curve = roc_one_vs_rest(&m, class).unwrap();
        let (mut pos, mut neg) = (Vec::new(), Vec::new());
        for (i, &l) in labels.iter().enumerate() {
            let s = m.row(i)[class];
            if l == class { pos.push(s) } else { neg.push(s) }
        }
        prop_assert!((curve.auc - mann_whitney(&pos, &neg)).abs() < 1e-9);
        prop_assert_eq!(curve.points.first(), Some(&(0.0, 0.0)));
        prop_assert_eq!(curve.points.last(), Some(&(1.0, 1.0)));
        for w in curve.points.windows(2) {
            prop_assert!(w[1].0 >= w[0].0 && w[1].1 >= w[0].1);
        }
    }

    #[test]
    fn tau_b_equals_pair_count(x in prop::collection::vec(level(), 2..=12), seed in any::<u64>()) {
        let y: Vec<f64> = x.iter().enumerate()
            .map(|(i, _)| ((seed >> (i % 60)) & 7) as f64 / 8.0)
            .collect();
        prop_assert_eq!(kendall_tau_b(&x, &y), tau_b_by_pairs(&x, &y));
        prop_assert_eq!(kendall_tau_b(&x, &x).is_some(), tau_b_by_pairs(&x, &x).is_some());
    }

    #[test]
    fn tau_stats_match_pairwise_oracle(rows in grid_strategy()) {
        let grid = AccuracyGrid::from_rows(rows.clone()).unwrap();
        let stats = kendall_tau_stats(&grid).unwrap();
        let mut taus = Vec::new();
        for i in 0..rows.len() {
            for j in i + 1..rows.len() {
                if let Some(t) = tau_b_by_pairs(&rows[i], &rows[j]) {
                    taus.push(t);
                }
            }
        }
        prop_assert_eq!(stats.pairs, taus.len());
        if taus.is_empty() {
            prop_assert!(stats.mean.is_none());
        } else {
            let mean = taus.iter().sum::<f64>() / taus.len() as f64;
            prop_assert!((stats.mean.unwrap() - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn scores_invariant_under_row_and_column_permutation(
        rows in positive_grid(),
        rot_r in 0usize..6,
        rot_c in 0usize..10,
    ) {
        let p = rows.len();
        let k = rows[0].len();
        let mut permuted = rows.clone();
        permuted.rotate_left(rot_r % p);
        permuted.swap(0, p - 1);
        for row in &mut permuted {
            row.rotate_left(rot_c % k);
            row.reverse();
        }
        let (a, b) = (AccuracyGrid::from_rows(rows).unwrap(), AccuracyGrid::from_rows(permuted).unwrap());
        let kde = KdeConfig::default();
        for mode in [DqMode::Plain, DqMode::Kde] {
            let (ra, rb) = (dq_report(&a, mode, &kde).unwrap(), dq_report(&b, mode, &kde).unwrap());
            prop_assert!(close(scores_of(&ra), scores_of(&rb)), "{:?} vs {:?}", ra, rb);
        }
    }

    #[test]
    fn zero_scores_exactly_when_rows_or_entries_agree(rows in grid_strategy()) {
        let grid = AccuracyGrid::from_rows(rows.clone()).unwrap();
        let identical = rows.iter().all(|r| r == &rows[0]);
        let constant = rows.iter().flatten().all(|&v| v == rows[0][0]);
        prop_assert_eq!(pairwise_disagreement(&grid).unwrap() == 0.0, identical);
        prop_assert_eq!(accuracy_variance(&grid).unwrap() == 0.0, identical);
        prop_assert_eq!(pooled_variance(&grid).unwrap() == 0.0, constant);
    }

    #[test]
    fn row_entropy_bounded_by_ln_k(row in prop::collection::vec((0u32..=10).prop_map(|v| v as f64 / 10.0), 2..12)) {
        prop_assume!(row.iter().any(|&v| v > 0.0));
        let h = row_entropy(&row).unwrap();
        let bound = (row.len() as f64).ln();
        prop_assert!(h <= bound + 1e-12);
        let uniform = row.iter().all(|&v| v == row[0]);
        prop_assert_eq!((h - bound).abs() < 1e-12, uniform);
    }

    #[test]
    fn kde_density_integrates_to_one(row in prop::collection::vec((0u32..=100).prop_map(|v| v as f64 / 100.0), 10)) {
        let h = silverman_bandwidth(&row);
        let (xs, ys, _) = kde_grid(&row, h);
        let integral = trapezoid(&ys, xs[1] - xs[0]);
        prop_assert!((integral - 1.0).abs() < 1e-6);
    }

    #[test]
    fn f1_bounded_and_macro_consistent(pairs in prop::collection::vec((0usize..4, 0usize..4), 1..80)) {
        let (truth, pred): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let cm = ConfusionMatrix::from_predictions(&truth, &pred, 4).unwrap();
        let row = per_class_f1(&cm).unwrap();
        prop_assert!(row.f1.iter().all(|v| (0.0..=1.0).contains(v)));
        let mean = row.f1.iter().sum::<f64>() / 4.0;
        prop_assert!((row.average - mean).abs() < 1e-12);
    }

    #[test]
    fn collective_invariances(
        members in prop::collection::vec(prop::collection::vec(0.01f64..1.0, 4), 1..5),
        weights in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 4), 5),
        factor in 0.1f64..10.0,
        copies in 1usize..4,
    ) {
        let scores: Vec<&[f64]> = members.iter().map(|m| m.as_slice()).collect();
        let w: Vec<&[f64]> = weights[..members.len()].iter().map(|m| m.as_slice()).collect();
        let scaled: Vec<Vec<f64>> = weights[..members.len()].iter()
            .map(|r| r.iter().map(|v| v * factor).collect()).collect();
        let ws: Vec<&[f64]> = scaled.iter().map(|m| m.as_slice()).collect();
        let soft = collective_decide(&scores, &w, CollectiveMode::F1WeightedSoft).unwrap();
        prop_assert_eq!(soft, collective_decide(&scores, &ws, CollectiveMode::F1WeightedSoft).unwrap());

        // a unanimous set keeps its label however often it is duplicated
        let unanimous: Vec<&[f64]> = vec![members[0].as_slice(); members.len()];
        let label = collective_decide(&unanimous, &w, CollectiveMode::Majority).unwrap();
        let dup: Vec<&[f64]> = unanimous.iter().cycle().take(unanimous.len() * copies).copied().collect();
        let dup_w: Vec<&[f64]> = w.iter().cycle().take(w.len() * copies).copied().collect();
        prop_assert_eq!(label, collective_decide(&dup, &dup_w, CollectiveMode::Majority).unwrap());
    }
}

#[test]
fn reference_grid_scores() {
    let grid = AccuracyGrid::reference();
    assert!((accuracy_variance(&grid).unwrap() - 0.007).abs() <= 0.001);
    assert!((system_entropy(&grid).unwrap() - 2.30).abs() <= 0.03);
}
