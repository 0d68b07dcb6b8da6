//! Two-sided Mann-Whitney U test for ordinal rating samples.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

/// Combined sample size up to which tie-free inputs use the exact null distribution.
pub const EXACT_MAX_TOTAL: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PValueMethod {
    Exact,
    /// Normal approximation with tie and continuity correction.
    Asymptotic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MannWhitney {
    /// U statistic of the first sample.
    pub u: f64,
    pub p_value: f64,
    pub method: PValueMethod,
}

/// Average ranks (1-based) of `values`, plus the sizes of tie groups.
fn rank_with_ties(values: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < idx.len() {
        let mut j = i + 1;
        while j < idx.len() && values[idx[j]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j + 1) as f64 / 2.0;
        for &k in &idx[i..j] {
            ranks[k] = avg;
        }
        if j - i > 1 {
            ties.push(j - i);
        }
        i = j;
    }
    (ranks, ties)
}

/// Number of arrangements giving each U value, for sample sizes `m` and `n` (no ties).
fn u_frequencies(m: usize, n: usize) -> Vec<f64> {
    // freq[i][j][u]: arrangements of i x-values and j y-values with statistic u
    let max_u = m * n;
    let mut prev: Vec<Vec<f64>> = vec![vec![0.0; max_u + 1]; n + 1];
    for row in prev.iter_mut() {
        row[0] = 1.0;
    }
    for i in 1..=m {
        let mut cur: Vec<Vec<f64>> = vec![vec![0.0; max_u + 1]; n + 1];
        cur[0][0] = 1.0;
        for j in 1..=n {
            for u in 0..=i * j {
                // largest element is an x (beats all j y-values) or a y
                let from_x = if u >= j { prev[j][u - j] } else { 0.0 };
                let from_y = cur[j - 1][u];
                cur[j][u] = from_x + from_y;
            }
        }
        prev = cur;
    }
    prev[n].clone()
}

pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> MannWhitney {
    let (n1, n2) = (a.len(), b.len());
    let combined: Vec<f64> = a.iter().chain(b).copied().collect();
    let (ranks, ties) = rank_with_ties(&combined);
    let r1: f64 = ranks[..n1].iter().sum();
    let u1 = r1 - (n1 * (n1 + 1)) as f64 / 2.0;
    let (f1, f2) = (n1 as f64, n2 as f64);

    if ties.is_empty() && n1 + n2 <= EXACT_MAX_TOTAL {
        let freq = u_frequencies(n1, n2);
        let total: f64 = freq.iter().sum();
        let u = u1.round() as usize;
        let low: f64 = freq[..=u].iter().sum::<f64>() / total;
        let high: f64 = freq[u..].iter().sum::<f64>() / total;
        return MannWhitney {
            u: u1,
            p_value: (2.0 * low.min(high)).min(1.0),
            method: PValueMethod::Exact,
        };
    }

    let n = f1 + f2;
    let mu = f1 * f2 / 2.0;
    let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / (n * (n - 1.0));
    let var = f1 * f2 / 12.0 * ((n + 1.0) - tie_term);
    let p_value = if var <= 0.0 {
        1.0
    } else {
        let z = ((u1 - mu).abs() - 0.5).max(0.0) / var.sqrt();
        let normal = Normal::standard();
        (2.0 * normal.sf(z)).min(1.0)
    };
    MannWhitney {
        u: u1,
        p_value,
        method: PValueMethod::Asymptotic,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    /// Enumerates every split of the pooled sample: exact permutation p-value.
    fn brute_force_p(a: &[f64], b: &[f64]) -> f64 {
        let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
        let u_of = |xs: &[f64], ys: &[f64]| -> f64 {
            xs.iter()
                .map(|x| ys.iter().map(|y| if x > y { 1.0 } else if x == y { 0.5 } else { 0.0 }).sum::<f64>())
                .sum()
        };
        let observed = u_of(a, b);
        let n = pooled.len();
        let m = a.len();
        let mu = (m * (n - m)) as f64 / 2.0;
        let mut extreme = 0usize;
        let mut total = 0usize;
        for mask in 0u32..(1 << n) {
            if mask.count_ones() as usize != m {
                continue;
            }
            let xs: Vec<f64> = (0..n).filter(|i| mask & (1 << i) != 0).map(|i| pooled[i]).collect();
            let ys: Vec<f64> = (0..n).filter(|i| mask & (1 << i) == 0).map(|i| pooled[i]).collect();
            total += 1;
            if (u_of(&xs, &ys) - mu).abs() >= (observed - mu).abs() - 1e-9 {
                extreme += 1;
            }
        }
        extreme as f64 / total as f64
    }

    #[test]
    fn exact_matches_enumeration() {
        let cases: [(&[f64], &[f64]); 4] = [
            (&[1.0, 2.0, 3.0, 4.0, 5.0], &[6.0, 7.0, 8.0, 9.0, 10.0]),
            (&[1.0, 4.0, 6.0, 9.0], &[2.0, 3.0, 5.0, 7.0, 8.0]),
            (&[3.5, 0.2, 8.1], &[1.1, 2.2, 4.4, 5.5, 6.6, 7.7]),
            (&[10.0], &[1.0, 2.0, 3.0]),
        ];
        for (a, b) in cases {
            let r = mann_whitney_u(a, b);
            assert_eq!(r.method, PValueMethod::Exact);
            let oracle = brute_force_p(a, b);
            assert!(close(r.p_value, oracle, 1e-12), "{a:?} {b:?}: {} vs {oracle}", r.p_value);
        }
    }

    // reference values from scipy.stats.mannwhitneyu (two-sided)
    #[test]
    fn reference_values() {
        let r = mann_whitney_u(&[1.0, 2.0, 3.0, 4.0, 5.0], &[6.0, 7.0, 8.0, 9.0, 10.0]);
        assert_eq!(r.u, 0.0);
        assert!(close(r.p_value, 0.007936507936507936, 1e-12));

        let x = [1.5, 3.2, 4.8, 7.1, 9.9, 11.0, 12.5, 2.2, 6.6, 8.8, 13.1, 14.4];
        let y = [0.5, 2.9, 5.5, 6.0, 10.1, 0.9, 3.3, 4.1, 7.7];
        let r = mann_whitney_u(&x, &y);
        assert_eq!(r.u, 78.0);
        assert!(close(r.p_value, 0.09545129792807813, 1e-10));

        let r = mann_whitney_u(&[5.0; 10], &[1.0; 10]);
        assert_eq!(r.u, 100.0);
        assert_eq!(r.method, PValueMethod::Asymptotic);
        assert!(close(r.p_value, 1.5937911688066244e-05, 1e-10));

        let r = mann_whitney_u(&[3., 4., 4., 5., 5., 2., 3.], &[2., 2., 3., 1., 4., 3., 2., 1.]);
        assert_eq!(r.u, 46.5);
        assert!(close(r.p_value, 0.03290794724815595, 1e-10));

        let r = mann_whitney_u(&[4.0; 5], &[4.0; 6]);
        assert_eq!(r.u, 15.0);
        assert_eq!(r.p_value, 1.0);
    }

    #[test]
    fn ties_are_averaged() {
        let (ranks, ties) = rank_with_ties(&[1.0, 2.0, 2.0, 4.0]);
        assert_eq!(ranks, vec![1.0, 2.5, 2.5, 4.0]);
        assert_eq!(ties, vec![2]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn monotone_transform_invariance(
                a in proptest::collection::vec(1u8..=5, 2..30),
                b in proptest::collection::vec(1u8..=5, 2..30),
            ) {
                let fa: Vec<f64> = a.iter().map(|&v| v as f64).collect();
                let fb: Vec<f64> = b.iter().map(|&v| v as f64).collect();
                let ta: Vec<f64> = fa.iter().map(|v| (v * 0.7).exp() + 3.0).collect();
                let tb: Vec<f64> = fb.iter().map(|v| (v * 0.7).exp() + 3.0).collect();
                let r1 = mann_whitney_u(&fa, &fb);
                let r2 = mann_whitney_u(&ta, &tb);
                prop_assert_eq!(r1.u, r2.u);
                prop_assert!((r1.p_value - r2.p_value).abs() < 1e-12);
                prop_assert!((0.0..=1.0).contains(&r1.p_value));
            }
        }
    }
}
