//! Stratified, seeded index/query partition.
//!
//! Each class contributes queries in proportion to its size; the leftover
//! quota (to hit `round(query_fraction * N)` overall) goes to classes with the
//! largest fractional share, ties broken by a seeded class order. A class
//! never gives up its last member, so singleton classes stay in the index.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{streams, Rng};

use super::FeatureSet;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub query_fraction: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub requested_queries: usize,
    /// Original row ids, ascending.
    pub index_rows: Vec<usize>,
    /// Original row ids, ascending.
    pub query_rows: Vec<usize>,
    /// Classes with a single member that were kept entirely in the index.
    pub singleton_classes: Vec<u32>,
}

pub fn split(fs: &FeatureSet, spec: &SplitSpec) -> Result<(FeatureSet, FeatureSet, SplitReport)> {
    let f = spec.query_fraction;
    if !(f > 0.0 && f < 1.0) {
        return Err(Error::invalid(format!(
            "query_fraction must lie in (0, 1), got {f}"
        )));
    }
    let n = fs.len();
    let requested = ((f * n as f64).round() as usize).max(1);

    let mut rng = Rng::new(spec.seed, streams::SPLIT);
    let num_classes = fs.num_classes() as usize;
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &l) in fs.labels().iter().enumerate() {
        members[l as usize].push(i);
    }
    for m in &mut members {
        rng.shuffle(m);
    }
    let tiebreak = rng.permutation(num_classes);

    let caps: Vec<usize> = members.iter().map(|m| m.len().saturating_sub(1)).collect();
    let shares: Vec<f64> = members.iter().map(|m| f * m.len() as f64).collect();
    let mut quota: Vec<usize> = shares
        .iter()
        .zip(&caps)
        .map(|(s, &cap)| (s.floor() as usize).min(cap))
        .collect();

    let mut order: Vec<usize> = (0..num_classes).collect();
    order.sort_by(|&a, &b| {
        let fa = shares[a] - shares[a].floor();
        let fb = shares[b] - shares[b].floor();
        fb.total_cmp(&fa).then(tiebreak[a].cmp(&tiebreak[b]))
    });
    let mut assigned: usize = quota.iter().sum();
    while assigned < requested {
        let mut progressed = false;
        for &c in &order {
            if assigned == requested {
                break;
            }
            if quota[c] < caps[c] {
                quota[c] += 1;
                assigned += 1;
                progressed = true;
            }
        }
        if !progressed {
            break;
        }
    }
    // floor shares can only overshoot when rounding `requested` went down
    while assigned > requested {
        let c = *order
            .iter()
            .rev()
            .find(|&&c| quota[c] > 0)
            .expect("assigned > 0 implies some quota");
        quota[c] -= 1;
        assigned -= 1;
    }

    let mut query_rows = Vec::with_capacity(assigned);
    let mut index_rows = Vec::with_capacity(n - assigned);
    for (c, m) in members.iter().enumerate() {
        query_rows.extend_from_slice(&m[..quota[c]]);
        index_rows.extend_from_slice(&m[quota[c]..]);
    }
    query_rows.sort_unstable();
    index_rows.sort_unstable();

    if query_rows.is_empty() || index_rows.is_empty() {
        return Err(Error::invalid(format!(
            "split would leave an empty partition ({} index, {} queries)",
            index_rows.len(),
            query_rows.len()
        )));
    }
    let singleton_classes = members
        .iter()
        .enumerate()
        .filter(|(_, m)| m.len() == 1)
        .map(|(c, _)| c as u32)
        .collect();

    let index = fs.subset(&index_rows)?;
    let queries = fs.subset(&query_rows)?;
    Ok((
        index,
        queries,
        SplitReport {
            requested_queries: requested,
            index_rows,
            query_rows,
            singleton_classes,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::generate_synthetic;
    use crate::numerics::Matrix;

    fn labelled(labels: Vec<u32>, classes: u32) -> FeatureSet {
        let n = labels.len();
        let data = (0..n * 2).map(|i| i as f64).collect();
        FeatureSet::new(Matrix::from_vec(n, 2, data).unwrap(), labels, classes).unwrap()
    }

    #[test]
    fn ten_rows_fifth_fraction() {
        let fs = labelled(vec![0, 0, 0, 0, 0, 1, 1, 1, 1, 1], 2);
        let (idx, q, rep) = split(
            &fs,
            &SplitSpec {
                query_fraction: 0.2,
                seed: 1,
            },
        )
        .unwrap();
        assert_eq!(q.len(), 2);
        assert_eq!(idx.len(), 8);
        let mut all: Vec<usize> = rep
            .index_rows
            .iter()
            .chain(&rep.query_rows)
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn tiny_fraction_rounds_up_to_one_query() {
        let fs = labelled(vec![0, 0, 0, 0, 0, 1, 1, 1, 1, 1], 2);
        let (idx, q, _) = split(
            &fs,
            &SplitSpec {
                query_fraction: 0.01,
                seed: 1,
            },
        )
        .unwrap();
        assert_eq!(q.len(), 1);
        assert_eq!(idx.len(), 9);
    }

    #[test]
    fn four_by_five_keeps_four_per_class() {
        let fs = generate_synthetic(4, 5, 3, 0.1, 2).unwrap();
        let spec = SplitSpec {
            query_fraction: 0.2,
            seed: 3,
        };
        let (idx, q, rep) = split(&fs, &spec).unwrap();
        assert_eq!(q.len(), 4);
        assert!(idx.class_counts().iter().all(|&c| c >= 4));
        let (_, _, rep2) = split(&fs, &spec).unwrap();
        assert_eq!(rep, rep2);
    }

    #[test]
    fn singleton_stays_in_index() {
        let fs = labelled(vec![0, 0, 0, 1, 2, 2], 3);
        let (idx, q, rep) = split(
            &fs,
            &SplitSpec {
                query_fraction: 0.5,
                seed: 9,
            },
        )
        .unwrap();
        assert_eq!(rep.singleton_classes, vec![1]);
        assert!(rep.index_rows.contains(&3));
        assert!(idx.class_counts().iter().all(|&c| c >= 1));
        assert_eq!(q.len(), 3);
    }

    #[test]
    fn all_singletons_is_an_error() {
        let fs = labelled(vec![0, 1, 2], 3);
        assert!(split(
            &fs,
            &SplitSpec {
                query_fraction: 0.5,
                seed: 0
            }
        )
        .is_err());
    }

    #[test]
    fn fraction_bounds() {
        let fs = labelled(vec![0, 0, 1, 1], 2);
        assert!(split(
            &fs,
            &SplitSpec {
                query_fraction: 0.0,
                seed: 0
            }
        )
        .is_err());
        assert!(split(
            &fs,
            &SplitSpec {
                query_fraction: 1.0,
                seed: 0
            }
        )
        .is_err());
    }
}
