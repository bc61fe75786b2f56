//! Pool-adjacent-violators projection onto monotone sequences.

/// Least-squares projection of `values` onto non-increasing sequences
/// (equal weights).
pub fn project_non_increasing(values: &[f64]) -> Vec<f64> {
    let negated: Vec<f64> = values.iter().map(|v| -v).collect();
    project_non_decreasing(&negated).into_iter().map(|v| -v).collect()
}

/// Least-squares projection of `values` onto non-decreasing sequences
/// (equal weights).
pub fn project_non_decreasing(values: &[f64]) -> Vec<f64> {
    // Blocks of (sum, count); each block's mean is its fitted value.
    let mut blocks: Vec<(f64, usize)> = Vec::with_capacity(values.len());
    for &v in values {
        blocks.push((v, 1));
        while blocks.len() >= 2 {
            let (s1, c1) = blocks[blocks.len() - 2];
            let (s2, c2) = blocks[blocks.len() - 1];
            if s1 / c1 as f64 > s2 / c2 as f64 {
                blocks.pop();
                let last = blocks.len() - 1;
                blocks[last] = (s1 + s2, c1 + c2);
            } else {
                break;
            }
        }
    }
    let mut out = Vec::with_capacity(values.len());
    for (sum, count) in blocks {
        out.extend(std::iter::repeat_n(sum / count as f64, count));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn already_monotone_is_unchanged() {
        let v = [4.0, 3.0, 3.0, 1.0];
        assert_eq!(project_non_increasing(&v), v.to_vec());
    }

    #[test]
    fn pools_violators() {
        assert_eq!(project_non_increasing(&[3.0, 1.0, 2.0]), vec![3.0, 1.5, 1.5]);
        assert_eq!(project_non_decreasing(&[1.0, 3.0, 2.0, 4.0]), vec![1.0, 2.5, 2.5, 4.0]);
        assert!(project_non_increasing(&[]).is_empty());
    }

    proptest! {
        #[test]
        fn output_is_monotone_and_mean_preserving(v in prop::collection::vec(-5.0f64..5.0, 1..40)) {
            let p = project_non_increasing(&v);
            prop_assert_eq!(p.len(), v.len());
            for w in p.windows(2) {
                prop_assert!(w[0] >= w[1] - 1e-12);
            }
            let s1: f64 = v.iter().sum();
            let s2: f64 = p.iter().sum();
            prop_assert!((s1 - s2).abs() < 1e-9);
        }
    }
}
