//! Weight-fragment sizing and overflow redistribution against storage limits.

use crate::error::{Error, Result};

fn rating_sum(ratings: &[f64]) -> Result<f64> {
    if ratings.iter().any(|r| !(*r >= 0.0 && r.is_finite())) {
        return Err(Error::Allocation(format!("ratings must be finite and non-negative: {ratings:?}")));
    }
    let total: f64 = ratings.iter().sum();
    if total <= 0.0 {
        return Err(Error::Allocation("ratings sum to zero".into()));
    }
    Ok(total)
}

/// Shares within this many units of an integer are taken to be that integer,
/// so a share pinned exactly at a limit never rounds past it.
const SNAP: f64 = 1e-6;

/// Splits `total` units (bytes, KB, ...) in proportion to `ratings`.
///
/// Each worker gets `floor(R_i·S_m / ΣR)`; the units left over go one each
/// to the largest fractional remainders (lowest index first on ties), so
/// the sizes sum to `total` exactly and no size exceeds its exact share
/// rounded up.
pub fn allocate_weight_sizes(ratings: &[f64], total: u64) -> Result<Vec<u64>> {
    let sum = rating_sum(ratings)?;
    let exact: Vec<f64> = ratings
        .iter()
        .map(|r| {
            let x = r * total as f64 / sum;
            if (x - x.round()).abs() < SNAP {
                x.round()
            } else {
                x
            }
        })
        .collect();
    let mut sizes: Vec<u64> = exact.iter().map(|x| x.floor() as u64).collect();
    let assigned: u64 = sizes.iter().sum();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    for &i in order.iter().cycle().take(total.saturating_sub(assigned) as usize) {
        sizes[i] += 1;
    }
    Ok(sizes)
}

/// Moves rating off workers whose share of `total` exceeds their limit.
///
/// Each round, every over-limit worker gives up `(S_i − L_i)·ΣR / S_m`, is
/// pinned at its limit, and the released rating is shared evenly among the
/// unpinned workers still below their limits. Each round pins at least one
/// worker, so at most `n` rounds run. `ΣR` is preserved.
pub fn redistribute_overflow(ratings: &[f64], limits: &[u64], total: u64) -> Result<Vec<f64>> {
    redistribute_overflow_counted(ratings, limits, total).map(|(r, _)| r)
}

/// [`redistribute_overflow`], also returning how many rounds moved rating.
pub fn redistribute_overflow_counted(ratings: &[f64], limits: &[u64], total: u64) -> Result<(Vec<f64>, usize)> {
    if ratings.len() != limits.len() {
        return Err(Error::Allocation(format!("{} ratings but {} limits", ratings.len(), limits.len())));
    }
    let capacity: u128 = limits.iter().map(|&l| l as u128).sum();
    if capacity < total as u128 {
        return Err(Error::InfeasibleCapacity {
            required_kb: total as f64 / 1024.0,
            available_kb: capacity as f64 / 1024.0,
            limits_kb: limits.iter().map(|&l| l as f64 / 1024.0).collect(),
        });
    }
    let sum = rating_sum(ratings)?;
    let s_m = total as f64;
    let mut r = ratings.to_vec();
    let mut pinned = vec![false; r.len()];
    for round in 0..=r.len() {
        let size = |r: &[f64], i: usize| r[i] * s_m / sum;
        let over: Vec<usize> = (0..r.len()).filter(|&i| size(&r, i) > limits[i] as f64 * (1.0 + 1e-12)).collect();
        if over.is_empty() {
            return Ok((r, round));
        }
        let mut released = 0.0;
        for &i in &over {
            let excess = (size(&r, i) - limits[i] as f64) * sum / s_m;
            r[i] -= excess;
            released += excess;
            pinned[i] = true;
        }
        let receivers: Vec<usize> =
            (0..r.len()).filter(|&j| !pinned[j] && size(&r, j) < limits[j] as f64).collect();
        if receivers.is_empty() {
            return Err(Error::Consistency("overflow has no receiver despite sufficient capacity".into()));
        }
        let share = released / receivers.len() as f64;
        for j in receivers {
            r[j] += share;
        }
    }
    Err(Error::Consistency("overflow redistribution did not converge".into()))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn sizing_examples() {
        assert_eq!(allocate_weight_sizes(&[1.0; 4], 100).unwrap(), vec![25; 4]);
        assert_eq!(allocate_weight_sizes(&[2.0, 1.0, 1.0], 100).unwrap(), vec![50, 25, 25]);
        assert_eq!(allocate_weight_sizes(&[3.7], 100).unwrap(), vec![100]);
        assert_eq!(allocate_weight_sizes(&[1.0; 3], 100).unwrap(), vec![34, 33, 33]);
        assert_eq!(allocate_weight_sizes(&[1.0, 2.0], 10).unwrap(), vec![3, 7]);
        assert!(matches!(allocate_weight_sizes(&[0.0, 0.0], 10), Err(Error::Allocation(_))));
    }

    #[test]
    fn hand_worked_redistribution() {
        let r = redistribute_overflow(&[2.0, 1.0, 1.0], &[40, u64::MAX / 4, u64::MAX / 4], 100).unwrap();
        for (got, want) in r.iter().zip([1.6, 1.2, 1.2]) {
            assert!((got - want).abs() < 1e-12);
        }
        assert_eq!(allocate_weight_sizes(&r, 100).unwrap(), vec![40, 30, 30]);
    }

    #[test]
    fn no_overflow_is_fixed_point() {
        assert_eq!(redistribute_overflow(&[2.0, 1.0, 1.0], &[60, 30, 30], 100).unwrap(), vec![2.0, 1.0, 1.0]);
    }

    #[test]
    fn insufficient_capacity_is_infeasible() {
        assert!(matches!(
            redistribute_overflow(&[1.0; 3], &[33, 33, 33], 100),
            Err(Error::InfeasibleCapacity { .. })
        ));
    }

    proptest! {
        #[test]
        fn redistribution_properties(
            ratings in prop::collection::vec(0.01f64..10.0, 1..12),
            seed_limits in prop::collection::vec(1u64..1000, 12),
            total in 1u64..5000,
        ) {
            let n = ratings.len();
            let mut limits = seed_limits[..n].to_vec();
            let cap: u64 = limits.iter().sum();
            if cap < total {
                // scale limits up so the instance is feasible
                let k = total.div_ceil(cap);
                limits.iter_mut().for_each(|l| *l *= k);
            }
            let (r, rounds) = redistribute_overflow_counted(&ratings, &limits, total).unwrap();
            prop_assert!(rounds <= n);
            let (before, after): (f64, f64) = (ratings.iter().sum(), r.iter().sum());
            prop_assert!((before - after).abs() <= 1e-9 * before.max(1.0));
            for i in 0..n {
                prop_assert!(r[i] >= -1e-12);
                prop_assert!(r[i] * total as f64 / after <= limits[i] as f64 * (1.0 + 1e-9));
            }
        }

        #[test]
        fn sizes_are_conserved(ratings in prop::collection::vec(0.0f64..10.0, 1..20), total in 0u64..1_000_000) {
            prop_assume!(ratings.iter().sum::<f64>() > 0.0);
            let s = allocate_weight_sizes(&ratings, total).unwrap();
            prop_assert_eq!(s.iter().sum::<u64>(), total);
        }
    }
}
