//! Significance and agreement statistics for pairwise preference judgments.

use crate::error::{Error, Result};

/// Slack when comparing outcome probabilities for equality.
const PMF_REL_TOL: f64 = 1e-7;

/// Exact two-sided binomial test of `successes` out of `trials` against
/// p = 0.5: the total probability of outcomes no more likely than the one
/// observed.
pub fn binomial_test_two_sided(successes: u64, trials: u64) -> Result<f64> {
    if trials == 0 || successes > trials {
        return Err(Error::invalid(format!("invalid binomial counts {successes}/{trials}")));
    }
    let n = trials as usize;
    let ln_half = 0.5f64.ln() * trials as f64;
    let mut ln_pmf = Vec::with_capacity(n + 1);
    let mut ln_choose = 0.0;
    for i in 0..=n {
        if i > 0 {
            ln_choose += ((n - i + 1) as f64).ln() - (i as f64).ln();
        }
        ln_pmf.push(ln_choose + ln_half);
    }
    let observed = ln_pmf[successes as usize];
    let cutoff = observed + PMF_REL_TOL.ln_1p();
    let p: f64 = ln_pmf.iter().filter(|&&l| l <= cutoff).map(|l| l.exp()).sum();
    Ok(p.min(1.0))
}

/// Fleiss' kappa for a tasks x categories matrix of rating counts. Every row
/// must sum to the same number of raters, at least two.
pub fn fleiss_kappa(ratings: &[Vec<u64>]) -> Result<f64> {
    let first = ratings.first().ok_or_else(|| Error::invalid("no rated tasks"))?;
    let categories = first.len();
    if categories < 2 {
        return Err(Error::invalid("need at least two categories"));
    }
    let raters: u64 = first.iter().sum();
    if raters < 2 {
        return Err(Error::invalid("need at least two raters per task"));
    }
    if let Some(i) = ratings
        .iter()
        .position(|r| r.len() != categories || r.iter().sum::<u64>() != raters)
    {
        return Err(Error::invalid(format!("row {i} is ragged")));
    }
    let n = raters as f64;
    let tasks = ratings.len() as f64;
    let p_bar = ratings
        .iter()
        .map(|r| (r.iter().map(|&c| (c * c) as f64).sum::<f64>() - n) / (n * (n - 1.0)))
        .sum::<f64>()
        / tasks;
    let p_e: f64 = (0..categories)
        .map(|j| {
            let pj = ratings.iter().map(|r| r[j] as f64).sum::<f64>() / (tasks * n);
            pj * pj
        })
        .sum();
    if (1.0 - p_e).abs() < f64::EPSILON {
        // every rating in one category
        return Ok(1.0);
    }
    Ok((p_bar - p_e) / (1.0 - p_e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn binomial_reference_points() {
        assert_eq!(binomial_test_two_sided(300, 600).unwrap(), 1.0);
        assert!(binomial_test_two_sided(347, 600).unwrap() < 0.05);
        assert!(binomial_test_two_sided(297, 600).unwrap() > 0.05);
        // 0 of 5: 2 * (1/32)
        assert!((binomial_test_two_sided(0, 5).unwrap() - 0.0625).abs() < 1e-15);
        assert!(binomial_test_two_sided(3, 2).is_err());
        assert!(binomial_test_two_sided(0, 0).is_err());
    }

    #[test]
    fn kappa_cases() {
        assert_eq!(fleiss_kappa(&[vec![3, 0], vec![0, 3], vec![3, 0]]).unwrap(), 1.0);
        assert_eq!(fleiss_kappa(&[vec![4, 0], vec![4, 0]]).unwrap(), 1.0);
        assert!((fleiss_kappa(&[vec![1, 1], vec![1, 1]]).unwrap() + 1.0).abs() < 1e-12);
        assert!(fleiss_kappa(&[vec![1, 1], vec![2, 1]]).is_err());
        assert!(fleiss_kappa(&[vec![1, 0]]).is_err());
        assert!(fleiss_kappa(&[vec![2]]).is_err());
        assert!(fleiss_kappa(&[]).is_err());
    }

    proptest! {
        #[test]
        fn binomial_symmetric(n in 1u64..400, frac in 0.0f64..=1.0) {
            let k = (frac * n as f64).round() as u64;
            let a = binomial_test_two_sided(k, n).unwrap();
            let b = binomial_test_two_sided(n - k, n).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&a));
        }

        #[test]
        fn kappa_one_iff_unanimous(rows in proptest::collection::vec(0u64..=4, 1..12)) {
            let ratings: Vec<Vec<u64>> = rows.iter().map(|&a| vec![a, 4 - a]).collect();
            let unanimous = ratings.iter().all(|r| r.contains(&4));
            let k = fleiss_kappa(&ratings).unwrap();
            prop_assert!(k <= 1.0 + 1e-12);
            prop_assert_eq!((k - 1.0).abs() < 1e-12, unanimous);
        }
    }
}
