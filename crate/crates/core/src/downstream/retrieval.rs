//! Cosine-similarity retrieval and its Recall@K / mAP@K metrics.

use super::features::FeatureMatrix;
use crate::error::{Error, Result};
use crate::tensor::kernels::gemm_nt;

/// Top-K gallery indices per query, by descending cosine similarity; ties
/// break toward the lexicographically smaller gallery id. When query and
/// gallery share ids, a query's own entry is excluded from its ranking.
pub fn retrieve(
    query: &FeatureMatrix,
    gallery: &FeatureMatrix,
    k: usize,
) -> Result<Vec<Vec<usize>>> {
    if k == 0 {
        return Err(Error::InvalidParameter("K must be >= 1".into()));
    }
    if gallery.is_empty() {
        return Err(Error::Contract("empty gallery".into()));
    }
    if query.dim() != gallery.dim() {
        return Err(Error::ShapeMismatch {
            op: "retrieve",
            lhs: vec![query.dim()],
            rhs: vec![gallery.dim()],
        });
    }
    let qn = normalized_rows(query)?;
    let gn = normalized_rows(gallery)?;
    let (nq, ng, c) = (query.len(), gallery.len(), query.dim());
    let mut sims = vec![0f32; nq * ng];
    gemm_nt(&qn, &gn, &mut sims, nq, c, ng);

    let mut out = Vec::with_capacity(nq);
    for qi in 0..nq {
        let row = &sims[qi * ng..(qi + 1) * ng];
        let mut order: Vec<usize> = (0..ng)
            .filter(|&gi| gallery.ids[gi] != query.ids[qi])
            .collect();
        order.sort_by(|&a, &b| {
            row[b]
                .partial_cmp(&row[a])
                .unwrap()
                .then_with(|| gallery.ids[a].cmp(&gallery.ids[b]))
        });
        order.truncate(k);
        out.push(order);
    }
    Ok(out)
}

fn normalized_rows(fm: &FeatureMatrix) -> Result<Vec<f32>> {
    let (n, c) = (fm.len(), fm.dim());
    let mut out = Vec::with_capacity(n * c);
    for i in 0..n {
        let row = fm.row(i);
        let norm = row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::ZeroNorm(fm.ids[i].clone()));
        }
        out.extend(row.iter().map(|&v| (v as f64 / norm) as f32));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalMetrics {
    /// Fraction of queries with at least one same-label item in the top K.
    pub recall_at_k: f64,
    /// Mean over queries of `sum_{hits at rank <= K} P@rank / R_q`. The
    /// divisor is the full relevant count, not `min(K, R_q)`: the truncated
    /// divisor makes AP@K non-monotone in K (a hit at rank 1 scores 1 at
    /// K=1 but 1/2 at K=2), and monotonicity in K is part of the metric
    /// contract here. The value stays in [0, 1].
    pub map_at_k: f64,
    /// Queries skipped for having no relevant gallery item.
    pub skipped_queries: usize,
}

/// Metrics at one K given per-query rankings (gallery indices). `rankings`
/// must come from [`retrieve`] with at least `k` entries per query.
pub fn retrieval_metrics(
    rankings: &[Vec<usize>],
    query_labels: &[i32],
    gallery_labels: &[i32],
    relevant_counts: &[usize],
    k: usize,
) -> RetrievalMetrics {
    let mut recall_hits = 0usize;
    let mut ap_sum = 0.0;
    let mut evaluated = 0usize;
    let mut skipped = 0usize;
    for (qi, ranking) in rankings.iter().enumerate() {
        let r_q = relevant_counts[qi];
        if r_q == 0 {
            skipped += 1;
            continue;
        }
        evaluated += 1;
        let top = &ranking[..k.min(ranking.len())];
        let mut hits = 0usize;
        let mut ap = 0.0;
        for (rank0, &gi) in top.iter().enumerate() {
            if gallery_labels[gi] == query_labels[qi] {
                hits += 1;
                ap += hits as f64 / (rank0 + 1) as f64;
            }
        }
        if hits > 0 {
            recall_hits += 1;
        }
        ap_sum += ap / r_q as f64;
    }
    RetrievalMetrics {
        recall_at_k: recall_hits as f64 / rankings.len().max(1) as f64,
        map_at_k: if evaluated > 0 {
            ap_sum / evaluated as f64
        } else {
            0.0
        },
        skipped_queries: skipped,
    }
}

/// Number of relevant gallery items per query (same label, excluding the
/// query's own id).
pub fn relevant_counts(query: &FeatureMatrix, gallery: &FeatureMatrix) -> Result<Vec<usize>> {
    let q_labels = query
        .labels
        .as_ref()
        .ok_or_else(|| Error::Contract("query labels required".into()))?;
    let g_labels = gallery
        .labels
        .as_ref()
        .ok_or_else(|| Error::Contract("gallery labels required".into()))?;
    Ok((0..query.len())
        .map(|qi| {
            (0..gallery.len())
                .filter(|&gi| gallery.ids[gi] != query.ids[qi] && g_labels[gi] == q_labels[qi])
                .count()
        })
        .collect())
}

/// Leave-one-out sweep over `k = 1..=k_max` within one labeled set.
pub fn leave_one_out_sweep(
    features: &FeatureMatrix,
    k_max: usize,
) -> Result<Vec<(usize, RetrievalMetrics)>> {
    let rankings = retrieve(features, features, k_max)?;
    let labels = features
        .labels
        .as_ref()
        .ok_or_else(|| Error::Contract("labels required for retrieval evaluation".into()))?;
    let counts = relevant_counts(features, features)?;
    Ok((1..=k_max)
        .map(|k| {
            (
                k,
                retrieval_metrics(&rankings, labels, labels, &counts, k),
            )
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;
    use crate::tensor::Tensor;

    fn fm(rows: &[(&str, Vec<f32>, i32)]) -> FeatureMatrix {
        let c = rows[0].1.len();
        let mut data = Vec::new();
        let mut ids = Vec::new();
        let mut labels = Vec::new();
        for (id, row, l) in rows {
            data.extend_from_slice(row);
            ids.push(id.to_string());
            labels.push(*l);
        }
        FeatureMatrix::new(
            ids,
            Tensor::new(&[rows.len(), c], data).unwrap(),
            Some(labels),
        )
        .unwrap()
    }

    #[test]
    fn exact_duplicate_ranks_first() {
        let gallery = fm(&[
            ("a", vec![0.1, 0.9], 0),
            ("dup", vec![1.0, 0.0], 1),
            ("c", vec![0.5, 0.5], 0),
        ]);
        let query = fm(&[("q", vec![2.0, 0.0], 1)]);
        let r = retrieve(&query, &gallery, 3).unwrap();
        assert_eq!(r[0][0], 1);
    }

    #[test]
    fn orthogonal_vectors_tie_break_by_id() {
        let gallery = fm(&[
            ("b", vec![0.0, 1.0], 0),
            ("a", vec![0.0, 2.0], 0),
        ]);
        let query = fm(&[("q", vec![1.0, 0.0], 0)]);
        let r = retrieve(&query, &gallery, 2).unwrap();
        // both similarities are 0; ascending id puts "a" first
        assert_eq!(r[0], vec![1, 0]);
    }

    #[test]
    fn zero_norm_vector_names_the_row() {
        let gallery = fm(&[("ok", vec![1.0, 0.0], 0), ("bad", vec![0.0, 0.0], 0)]);
        let query = fm(&[("q", vec![1.0, 0.0], 0)]);
        match retrieve(&query, &gallery, 1) {
            Err(Error::ZeroNorm(id)) => assert_eq!(id, "bad"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn five_point_handcrafted_matches_brute_force_sort() {
        let gallery = fm(&[
            ("g0", vec![1.0, 0.0], 0),
            ("g1", vec![0.9, 0.1], 0),
            ("g2", vec![0.0, 1.0], 1),
            ("g3", vec![-1.0, 0.0], 1),
            ("g4", vec![0.7, 0.7], 0),
        ]);
        let query = fm(&[("q", vec![1.0, 0.05], 0)]);
        let r = retrieve(&query, &gallery, 5).unwrap();
        // brute force: cosine sims computed directly
        let cos = |a: &[f32], b: &[f32]| {
            let dot: f32 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na: f32 = a.iter().map(|x| x * x).sum::<f32>().sqrt();
            let nb: f32 = b.iter().map(|x| x * x).sum::<f32>().sqrt();
            dot / (na * nb)
        };
        let q = query.row(0);
        let mut expect: Vec<usize> = (0..5).collect();
        expect.sort_by(|&a, &b| {
            cos(q, gallery.row(b))
                .partial_cmp(&cos(q, gallery.row(a)))
                .unwrap()
                .then(gallery.ids[a].cmp(&gallery.ids[b]))
        });
        assert_eq!(r[0], expect);
    }

    #[test]
    fn self_excluded_in_leave_one_out() {
        let set = fm(&[
            ("a", vec![1.0, 0.0], 0),
            ("b", vec![0.9, 0.1], 0),
            ("c", vec![0.0, 1.0], 1),
        ]);
        let r = retrieve(&set, &set, 3).unwrap();
        for (qi, ranking) in r.iter().enumerate() {
            assert!(!ranking.contains(&qi));
            assert_eq!(ranking.len(), 2);
        }
    }

    #[test]
    fn ap_hand_example() {
        // ranking [rel, non, rel], K=3, R_q=2 -> AP = (1/1 + 2/3)/2 = 5/6
        let m = retrieval_metrics(&[vec![0, 1, 2]], &[7], &[7, 8, 7], &[2], 3);
        assert!((m.map_at_k - 5.0 / 6.0).abs() < 1e-12);
        assert_eq!(m.recall_at_k, 1.0);
    }

    #[test]
    fn all_top1_hits_is_recall_one() {
        let m = retrieval_metrics(
            &[vec![0, 1], vec![1, 0]],
            &[0, 1],
            &[0, 1],
            &[1, 1],
            1,
        );
        assert_eq!(m.recall_at_k, 1.0);
    }

    /// Independent AP/recall recount straight from the definitions.
    fn brute_force(
        ranking: &[usize],
        q_label: i32,
        g_labels: &[i32],
        r_q: usize,
        k: usize,
    ) -> (bool, f64) {
        let top = &ranking[..k.min(ranking.len())];
        let hit = top.iter().any(|&g| g_labels[g] == q_label);
        let mut ap = 0.0;
        let mut rel_seen = 0;
        for rank in 1..=top.len() {
            if g_labels[top[rank - 1]] == q_label {
                rel_seen += 1;
                ap += rel_seen as f64 / rank as f64;
            }
        }
        (hit, ap / r_q.max(1) as f64)
    }

    #[test]
    fn metrics_match_brute_force_on_random_instances() {
        let mut rng = Stream::new(11);
        for _ in 0..2000 {
            let ng = 2 + rng.below(11) as usize;
            let g_labels: Vec<i32> = (0..ng).map(|_| rng.below(3) as i32).collect();
            let q_label = rng.below(3) as i32;
            let mut ranking: Vec<usize> = (0..ng).collect();
            rng.shuffle(&mut ranking);
            let r_q = g_labels.iter().filter(|&&l| l == q_label).count();
            for k in 1..=ng {
                let m = retrieval_metrics(&[ranking.clone()], &[q_label], &g_labels, &[r_q], k);
                let (hit, ap) = brute_force(&ranking, q_label, &g_labels, r_q, k);
                if r_q == 0 {
                    assert_eq!(m.skipped_queries, 1);
                } else {
                    assert_eq!(m.recall_at_k, if hit { 1.0 } else { 0.0 });
                    assert!((m.map_at_k - ap).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn ap_matches_over_all_permutations_of_six() {
        let g_labels = [0, 0, 1, 1, 0, 1];
        let r_q = 3;
        // iterate all 720 orderings
        let mut perm: Vec<usize> = (0..6).collect();
        let mut stack = vec![0usize; 6];
        let mut i = 0;
        loop {
            for k in 1..=6 {
                let m = retrieval_metrics(&[perm.clone()], &[0], &g_labels, &[r_q], k);
                let (_, ap) = brute_force(&perm, 0, &g_labels, r_q, k);
                assert!((m.map_at_k - ap).abs() < 1e-12);
            }
            // Heap's algorithm
            if i >= 6 {
                break;
            }
            if stack[i] < i {
                if i % 2 == 0 {
                    perm.swap(0, i);
                } else {
                    perm.swap(stack[i], i);
                }
                stack[i] += 1;
                i = 0;
            } else {
                stack[i] = 0;
                i += 1;
            }
        }
    }

    #[test]
    fn metrics_non_decreasing_in_k_and_scale_invariant() {
        let mut rng = Stream::new(303);
        for trial in 0..50 {
            let n = 6 + rng.below(10) as usize;
            let rows: Vec<(String, Vec<f32>, i32)> = (0..n)
                .map(|i| {
                    (
                        format!("v{i:02}"),
                        (0..4).map(|_| rng.uniform(-1.0, 1.0) as f32).collect(),
                        rng.below(2) as i32,
                    )
                })
                .collect();
            let refs: Vec<(&str, Vec<f32>, i32)> = rows
                .iter()
                .map(|(id, v, l)| (id.as_str(), v.clone(), *l))
                .collect();
            let set = fm(&refs);
            let sweep = leave_one_out_sweep(&set, n - 1).unwrap();
            for w in sweep.windows(2) {
                assert!(
                    w[1].1.recall_at_k >= w[0].1.recall_at_k - 1e-12,
                    "trial {trial}: recall decreased"
                );
                assert!(
                    w[1].1.map_at_k >= w[0].1.map_at_k - 1e-12,
                    "trial {trial}: mAP decreased"
                );
            }
            // positive rescaling leaves rankings unchanged
            let scaled_rows: Vec<(&str, Vec<f32>, i32)> = rows
                .iter()
                .enumerate()
                .map(|(i, (id, v, l))| {
                    let s = 0.1 + 3.0 * ((i % 5) as f32 + 1.0);
                    (id.as_str(), v.iter().map(|x| x * s).collect(), *l)
                })
                .collect();
            let scaled = fm(&scaled_rows);
            assert_eq!(
                retrieve(&set, &set, n - 1).unwrap(),
                retrieve(&scaled, &scaled, n - 1).unwrap()
            );
        }
    }
}
