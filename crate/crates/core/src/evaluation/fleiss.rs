//! Fleiss' kappa for many raters and categorical labels.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

use super::{votes_by_sample, AnnotationRecord};

/// κ from a subject × category matrix of rating counts. Every row must sum
/// to the same number of raters `n ≥ 2`. Perfect agreement gives exactly 1.
pub fn fleiss_kappa_counts<R: AsRef<[usize]>>(counts: &[R]) -> Result<f64> {
    let first = counts
        .first()
        .ok_or_else(|| Error::Evaluation("no rated subjects".into()))?
        .as_ref();
    let k = first.len();
    let n: usize = first.iter().sum();
    if n < 2 {
        return Err(Error::Evaluation(format!("need at least 2 raters per subject, got {n}")));
    }
    let subjects = counts.len() as f64;
    let mut p_cat = vec![0.0f64; k];
    let mut p_bar = 0.0;
    for (i, row) in counts.iter().enumerate() {
        let row = row.as_ref();
        if row.len() != k || row.iter().sum::<usize>() != n {
            return Err(Error::Evaluation(format!("subject {i} does not have {n} ratings over {k} categories")));
        }
        let agree: usize = row.iter().map(|&c| c * c).sum::<usize>() - n;
        p_bar += agree as f64 / (n * (n - 1)) as f64;
        for (p, &c) in p_cat.iter_mut().zip(row) {
            *p += c as f64;
        }
    }
    p_bar /= subjects;
    let total = subjects * n as f64;
    let p_e: f64 = p_cat.iter().map(|&c| (c / total).powi(2)).sum();
    if p_bar == 1.0 {
        return Ok(1.0);
    }
    Ok((p_bar - p_e) / (1.0 - p_e))
}

/// κ over annotation records. Samples whose rater count differs from the
/// most common one are dropped (ties favor the larger count).
pub fn fleiss_kappa(records: &[AnnotationRecord]) -> Result<f64> {
    let votes = votes_by_sample(records)?;
    let mut freq: BTreeMap<usize, usize> = BTreeMap::new();
    for v in votes.values() {
        *freq.entry(v.iter().sum()).or_default() += 1;
    }
    let modal = freq
        .iter()
        .max_by_key(|&(&raters, &count)| (count, raters))
        .map(|(&r, _)| r)
        .ok_or_else(|| Error::Evaluation("no annotation records".into()))?;
    let rows: Vec<[usize; 4]> = votes.into_values().filter(|v| v.iter().sum::<usize>() == modal).collect();
    fleiss_kappa_counts(&rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unanimous_is_one() {
        assert_eq!(fleiss_kappa_counts(&[[3, 0], [0, 3], [3, 0]]).unwrap(), 1.0);
        assert_eq!(fleiss_kappa_counts(&[[0, 4, 0]; 5]).unwrap(), 1.0);
    }

    #[test]
    fn relabeling_invariance() {
        let a = [[1, 2, 0], [0, 1, 2], [3, 0, 0], [1, 1, 1]];
        let b: Vec<[usize; 3]> = a.iter().map(|r| [r[2], r[0], r[1]]).collect();
        assert_eq!(fleiss_kappa_counts(&a).unwrap(), fleiss_kappa_counts(&b).unwrap());
    }

    #[test]
    fn errors() {
        assert!(fleiss_kappa_counts(&[[1, 0]]).is_err());
        assert!(fleiss_kappa_counts(&[[1, 1], [2, 1]]).is_err());
        assert!(fleiss_kappa_counts::<[usize; 2]>(&[]).is_err());
    }
}
