use bnseg::class_model::kmeans_centers;
use proptest::prelude::*;

// Optimal 1-D clusterings are contiguous in sorted order, so trying every
// placement of k-1 cut points finds the minimum SSE.
fn brute_force_sse(values: &[f64], k: usize) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let sse = |s: &[f64]| {
        let m = s.iter().sum::<f64>() / s.len() as f64;
        s.iter().map(|v| (v - m) * (v - m)).sum::<f64>()
    };
    let mut best = f64::INFINITY;
    let mut cuts = vec![0usize; k + 1];
    fn rec(
        depth: usize,
        k: usize,
        n: usize,
        cuts: &mut Vec<usize>,
        sorted: &[f64],
        sse: &dyn Fn(&[f64]) -> f64,
        best: &mut f64,
    ) {
        if depth == k {
            cuts[k] = n;
            let total: f64 = (0..k).map(|j| sse(&sorted[cuts[j]..cuts[j + 1]])).sum();
            *best = best.min(total);
            return;
        }
        for c in cuts[depth - 1] + 1..=n - (k - depth) {
            cuts[depth] = c;
            rec(depth + 1, k, n, cuts, sorted, sse, best);
        }
    }
    rec(1, k, n, &mut cuts, &sorted, &sse, &mut best);
    best
}

fn model_sse(values: &[f64], centers: &[f64]) -> f64 {
    values
        .iter()
        .map(|v| {
            centers
                .iter()
                .map(|c| (v - c) * (v - c))
                .fold(f64::INFINITY, f64::min)
        })
        .sum()
}

#[test]
fn brute_force_oracle_hand_case() {
    // {0,1} {10,11}: 0.25 * 4
    assert!((brute_force_sse(&[0.0, 1.0, 10.0, 11.0], 2) - 1.0).abs() < 1e-12);
    assert_eq!(brute_force_sse(&[3.0, 7.0, 9.0], 3), 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn kmeans_matches_brute_force_sse(
        values in prop::collection::vec(0u8..=255, 2..=12),
        k in 2usize..=3,
        seed in any::<u64>(),
    ) {
        let values: Vec<f64> = values.into_iter().map(f64::from).collect();
        let mut distinct = values.clone();
        distinct.sort_by(f64::total_cmp);
        distinct.dedup();
        prop_assume!(k <= distinct.len());
        let model = kmeans_centers(&values, k, seed).unwrap();
        let got = model_sse(&values, model.centers());
        let want = brute_force_sse(&values, k);
        prop_assert!((got - want).abs() <= 1e-9 * want.max(1.0), "got {got}, optimum {want}");
    }
}
