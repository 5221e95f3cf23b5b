//! Label-stratified splits and per-class subsampling.

use crate::error::{Error, Result};
use crate::rng::Stream;
use std::collections::BTreeMap;

#[derive(Debug, Clone, PartialEq)]
pub enum SplitScheme {
    KFold(usize),
    /// Ratios must sum to 1 within 1e-9.
    TrainValTest(f64, f64, f64),
}

/// Disjoint id groups covering the input. For k-fold the groups are folds;
/// for a 3-way split they are train, val, test in that order.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitPlan {
    pub scheme: SplitScheme,
    pub seed: u64,
    pub groups: Vec<Vec<usize>>,
}

impl SplitPlan {
    /// Train/validation indexes for fold `f` of a k-fold plan: fold `f` is
    /// validation, the rest train.
    pub fn fold(&self, f: usize) -> (Vec<usize>, Vec<usize>) {
        let val = self.groups[f].clone();
        let train = self
            .groups
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != f)
            .flat_map(|(_, g)| g.iter().copied())
            .collect();
        (train, val)
    }
}

/// Per class: seeded shuffle, then round-robin (k-fold) or contiguous ratio
/// cut with largest-remainder rounding (3-way).
pub fn stratified_split(labels: &[i32], scheme: SplitScheme, seed: u64) -> Result<SplitPlan> {
    let mut by_class: BTreeMap<i32, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let n_groups = match scheme {
        SplitScheme::KFold(k) => {
            if k == 0 {
                return Err(Error::InvalidParameter("k must be positive".into()));
            }
            for (cls, ids) in &by_class {
                if ids.len() < k {
                    return Err(Error::ClassTooSmall {
                        class: cls.to_string(),
                        count: ids.len(),
                        needed: k,
                    });
                }
            }
            k
        }
        SplitScheme::TrainValTest(a, b, c) => {
            if !(a > 0.0 && b > 0.0 && c > 0.0 && (a + b + c - 1.0).abs() < 1e-9) {
                return Err(Error::InvalidParameter(format!(
                    "ratios ({a}, {b}, {c}) must be positive and sum to 1"
                )));
            }
            for (cls, ids) in &by_class {
                if ids.len() < 3 {
                    return Err(Error::ClassTooSmall {
                        class: cls.to_string(),
                        count: ids.len(),
                        needed: 3,
                    });
                }
            }
            3
        }
    };

    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); n_groups];
    for (cls, ids) in &by_class {
        let mut ids = ids.clone();
        let mut rng = Stream::tagged_path(seed, &[0x5F, *cls as u64]);
        rng.shuffle(&mut ids);
        match scheme {
            SplitScheme::KFold(k) => {
                for (i, id) in ids.into_iter().enumerate() {
                    groups[i % k].push(id);
                }
            }
            SplitScheme::TrainValTest(a, b, c) => {
                let sizes = largest_remainder(ids.len(), &[a, b, c]);
                let mut off = 0;
                for (g, &sz) in sizes.iter().enumerate() {
                    groups[g].extend_from_slice(&ids[off..off + sz]);
                    off += sz;
                }
            }
        }
    }
    for g in &mut groups {
        g.sort_unstable();
    }
    Ok(SplitPlan {
        scheme,
        seed,
        groups,
    })
}

/// Integer apportionment of `n` by `ratios` using largest remainders; ties
/// resolve toward earlier groups.
fn largest_remainder(n: usize, ratios: &[f64]) -> Vec<usize> {
    let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut sizes: Vec<usize> = exact.iter().map(|&e| e.floor() as usize).collect();
    let mut rest = n - sizes.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..ratios.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    let mut i = 0;
    while rest > 0 {
        sizes[order[i % order.len()]] += 1;
        rest -= 1;
        i += 1;
    }
    sizes
}

/// Per-class sample without replacement of `ceil(ratio * n_c)` items. With
/// `nested` set, smaller ratios are prefixes of larger ones under the same
/// seed.
pub fn subsample_ratio(
    ids: &[usize],
    labels: &[i32],
    ratio: f64,
    seed: u64,
    nested: bool,
) -> Result<Vec<usize>> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "ratio {ratio} outside (0, 1]"
        )));
    }
    if ratio == 1.0 {
        return Ok(ids.to_vec());
    }
    let mut by_class: BTreeMap<i32, Vec<usize>> = BTreeMap::new();
    for &id in ids {
        by_class.entry(labels[id]).or_default().push(id);
    }
    let mut out = Vec::new();
    for (cls, members) in &by_class {
        let take = ((ratio * members.len() as f64).ceil() as usize).min(members.len());
        let mut rng = Stream::tagged_path(seed, &[0x5A, *cls as u64]);
        if nested {
            // a seeded shuffle makes every ratio a prefix of the next
            let mut m = members.clone();
            rng.shuffle(&mut m);
            out.extend_from_slice(&m[..take]);
        } else {
            let chosen = rng.sample_indices(members.len(), take);
            out.extend(chosen.into_iter().map(|i| members[i]));
        }
    }
    out.sort_unstable();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels_of(counts: &[(i32, usize)]) -> Vec<i32> {
        counts
            .iter()
            .flat_map(|&(l, n)| std::iter::repeat_n(l, n))
            .collect()
    }

    #[test]
    fn kfold_counting_example() {
        // 10xA + 5xB, k=5 -> each fold has 2 A, 1 B
        let labels = labels_of(&[(0, 10), (1, 5)]);
        let plan = stratified_split(&labels, SplitScheme::KFold(5), 3).unwrap();
        for fold in &plan.groups {
            assert_eq!(fold.iter().filter(|&&i| labels[i] == 0).count(), 2);
            assert_eq!(fold.iter().filter(|&&i| labels[i] == 1).count(), 1);
        }
    }

    #[test]
    fn single_fold_is_everything() {
        let labels = labels_of(&[(0, 4), (1, 3)]);
        let plan = stratified_split(&labels, SplitScheme::KFold(1), 9).unwrap();
        assert_eq!(plan.groups.len(), 1);
        assert_eq!(plan.groups[0], (0..7).collect::<Vec<_>>());
    }

    #[test]
    fn same_seed_same_plan_different_seed_same_invariants() {
        let labels = labels_of(&[(0, 13), (1, 8), (2, 21)]);
        let a = stratified_split(&labels, SplitScheme::KFold(4), 5).unwrap();
        let b = stratified_split(&labels, SplitScheme::KFold(4), 5).unwrap();
        assert_eq!(a, b);
        let c = stratified_split(&labels, SplitScheme::KFold(4), 6).unwrap();
        assert_ne!(a.groups, c.groups);
        // count invariants persist
        for plan in [&a, &c] {
            let all: Vec<usize> = plan.groups.iter().flatten().copied().collect();
            assert_eq!(all.len(), labels.len());
        }
    }

    #[test]
    fn class_too_small_is_named() {
        let labels = labels_of(&[(7, 2), (1, 10)]);
        match stratified_split(&labels, SplitScheme::KFold(5), 0) {
            Err(Error::ClassTooSmall { class, count, needed }) => {
                assert_eq!(class, "7");
                assert_eq!(count, 2);
                assert_eq!(needed, 5);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn split_invariants_hold_over_many_instances() {
        let mut rng = Stream::new(808);
        for _ in 0..1000 {
            let k = 2 + rng.below(5) as usize;
            let n_classes = 2 + rng.below(4) as usize;
            let counts: Vec<(i32, usize)> = (0..n_classes)
                .map(|c| (c as i32, k + rng.below(30) as usize))
                .collect();
            let labels = labels_of(&counts);
            let plan =
                stratified_split(&labels, SplitScheme::KFold(k), rng.next_u64()).unwrap();
            // disjoint and covering
            let mut seen = vec![false; labels.len()];
            for g in &plan.groups {
                for &i in g {
                    assert!(!seen[i], "overlap");
                    seen[i] = true;
                }
            }
            assert!(seen.iter().all(|&s| s));
            // stratification within 1
            for (cls, _) in &counts {
                let per_fold: Vec<usize> = plan
                    .groups
                    .iter()
                    .map(|g| g.iter().filter(|&&i| labels[i] == *cls).count())
                    .collect();
                let (mn, mx) = (per_fold.iter().min().unwrap(), per_fold.iter().max().unwrap());
                assert!(mx - mn <= 1, "stratification violated: {per_fold:?}");
            }
        }
    }

    #[test]
    fn three_way_ratio_cut() {
        let labels = labels_of(&[(0, 10), (1, 20)]);
        let plan =
            stratified_split(&labels, SplitScheme::TrainValTest(0.5, 0.2, 0.3), 2).unwrap();
        assert_eq!(plan.groups.len(), 3);
        let count = |g: &Vec<usize>, cls: i32| g.iter().filter(|&&i| labels[i] == cls).count();
        assert_eq!(count(&plan.groups[0], 0), 5);
        assert_eq!(count(&plan.groups[1], 0), 2);
        assert_eq!(count(&plan.groups[2], 0), 3);
        assert_eq!(count(&plan.groups[0], 1), 10);
        assert_eq!(count(&plan.groups[1], 1), 4);
        assert_eq!(count(&plan.groups[2], 1), 6);
    }

    #[test]
    fn subsample_full_ratio_is_identity() {
        let labels = labels_of(&[(0, 5), (1, 5)]);
        let ids: Vec<usize> = (0..10).collect();
        assert_eq!(subsample_ratio(&ids, &labels, 1.0, 4, false).unwrap(), ids);
    }

    #[test]
    fn subsample_ceiling_counts() {
        let labels = labels_of(&[(0, 100), (1, 100)]);
        let ids: Vec<usize> = (0..200).collect();
        let s = subsample_ratio(&ids, &labels, 0.1, 4, false).unwrap();
        assert_eq!(s.iter().filter(|&&i| labels[i] == 0).count(), 10);
        assert_eq!(s.iter().filter(|&&i| labels[i] == 1).count(), 10);
    }

    #[test]
    fn nested_subsets_are_monotone() {
        let labels = labels_of(&[(0, 40), (1, 28)]);
        let ids: Vec<usize> = (0..68).collect();
        let small: std::collections::BTreeSet<usize> =
            subsample_ratio(&ids, &labels, 0.1, 11, true).unwrap().into_iter().collect();
        let big: std::collections::BTreeSet<usize> =
            subsample_ratio(&ids, &labels, 0.25, 11, true).unwrap().into_iter().collect();
        assert!(small.is_subset(&big));
    }
}
