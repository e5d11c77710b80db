//! Small order-statistics helpers shared by fitting and validation.

/// Nearest-rank quantile on unsorted data. `q` in [0, 1].
pub fn quantile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    Some(quantile_sorted(&sorted, q))
}

pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let n = sorted.len();
    let rank = (q * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

pub fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

/// Two-sample Kolmogorov-Smirnov statistic: sup_x |F1(x) - F2(x)|.
pub fn ks_statistic(xs: &[f64], ys: &[f64]) -> f64 {
    if xs.is_empty() || ys.is_empty() {
        return 1.0;
    }
    let mut xs: Vec<f64> = xs.to_vec();
    let mut ys: Vec<f64> = ys.to_vec();
    xs.sort_by(|a, b| a.total_cmp(b));
    ys.sort_by(|a, b| a.total_cmp(b));
    let (n, m) = (xs.len(), ys.len());
    let (mut i, mut j) = (0usize, 0usize);
    let mut d: f64 = 0.0;
    while i < n && j < m {
        let v = xs[i].min(ys[j]);
        while i < n && xs[i] <= v {
            i += 1;
        }
        while j < m && ys[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn quantile_nearest_rank() {
        let v = vec![10.0, 20.0, 30.0, 40.0];
        assert_eq!(quantile(&v, 0.5), Some(20.0));
        assert_eq!(quantile(&v, 0.75), Some(30.0));
        assert_eq!(quantile(&v, 1.0), Some(40.0));
        assert_eq!(quantile(&v, 0.0), Some(10.0));
        assert_eq!(quantile(&[], 0.5), None);
    }

    #[test]
    fn ks_identical_samples_is_zero() {
        let v = vec![1.0, 2.0, 5.0, 9.0];
        assert_eq!(ks_statistic(&v, &v), 0.0);
    }

    #[test]
    fn ks_disjoint_supports_is_one() {
        let a = vec![1.0, 2.0, 3.0];
        let b = vec![10.0, 11.0];
        assert_eq!(ks_statistic(&a, &b), 1.0);
    }

    #[test]
    fn ks_matches_brute_force() {
        let a = vec![3.0, 1.0, 4.0, 1.0, 5.0, 9.0, 2.0, 6.0];
        let b = vec![2.0, 7.0, 1.0, 8.0, 2.0, 8.0];
        // Oracle: evaluate both empirical CDFs at every pooled point.
        let mut brute: f64 = 0.0;
        for v in a.iter().chain(&b) {
            let f1 = a.iter().filter(|x| *x <= v).count() as f64 / a.len() as f64;
            let f2 = b.iter().filter(|x| *x <= v).count() as f64 / b.len() as f64;
            brute = brute.max((f1 - f2).abs());
        }
        assert!((ks_statistic(&a, &b) - brute).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn ks_symmetric_bounded(
            a in proptest::collection::vec(-100.0f64..100.0, 1..60),
            b in proptest::collection::vec(-100.0f64..100.0, 1..60),
        ) {
            let d1 = ks_statistic(&a, &b);
            let d2 = ks_statistic(&b, &a);
            prop_assert!((d1 - d2).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&d1));
        }
    }
}
