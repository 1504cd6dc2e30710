//! Agglomerative clustering with Ward linkage.
//!
//! Distances between merged clusters follow the Lance–Williams recurrence on
//! squared Euclidean distances, which for Ward linkage keeps
//! `D2(A, B) = 2|A||B| / (|A| + |B|) * ||centroid_A - centroid_B||^2`
//! exact throughout. Recorded heights are the square roots of the merge
//! costs, so they are comparable to point distances.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;

/// One merge step. `left`/`right` are node ids: ids `0..leaf_count` are the
/// input points, and merge `i` creates node `leaf_count + i`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Merge {
    pub left: usize,
    pub right: usize,
    pub height: f64,
}

/// The full merge tree over `leaf_count` points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dendrogram {
    pub leaf_count: usize,
    pub merges: Vec<Merge>,
}

struct Active {
    node_id: usize,
    size: f64,
    /// Smallest leaf index contained in the cluster; merge candidates tie-break
    /// on this so the merge order does not depend on scan order.
    min_leaf: usize,
}

/// Runs Ward linkage over `points` (one row per observation, equal lengths).
/// Ties in the merge cost are broken towards the pair whose (smaller,
/// larger) minimum-leaf indices are lexicographically least, which keeps the
/// merge sequence unique and deterministic.
pub fn ward_linkage(points: &[Vec<f64>]) -> Result<Dendrogram> {
    let g = points.len();
    if g < 2 {
        return Err(Error::TooFewGroups(g));
    }
    let dim = points[0].len();
    for (i, p) in points.iter().enumerate() {
        if p.len() != dim {
            return Err(Error::LengthMismatch {
                expected: dim,
                got: p.len(),
            });
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("point {i}")));
        }
    }

    // Full symmetric matrix of squared distances between active clusters.
    let mut d2: Vec<Vec<f64>> = exec::map_range(g, |i| {
        (0..g)
            .map(|j| {
                points[i]
                    .iter()
                    .zip(&points[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum()
            })
            .collect()
    });

    let mut active: Vec<Active> = (0..g)
        .map(|i| Active {
            node_id: i,
            size: 1.0,
            min_leaf: i,
        })
        .collect();
    let mut merges = Vec::with_capacity(g - 1);

    while active.len() > 1 {
        // Smallest merge cost; ties toward the smallest (min_leaf, min_leaf) pair.
        let mut best: Option<(usize, usize)> = None;
        let mut best_key = (f64::INFINITY, usize::MAX, usize::MAX);
        for i in 0..active.len() {
            for j in (i + 1)..active.len() {
                let lo = active[i].min_leaf.min(active[j].min_leaf);
                let hi = active[i].min_leaf.max(active[j].min_leaf);
                let key = (d2[i][j], lo, hi);
                if key < best_key {
                    best_key = key;
                    best = Some((i, j));
                }
            }
        }
        let (i, j) = best.expect("at least one pair");
        let cost = d2[i][j];
        let (na, nb) = (active[i].size, active[j].size);
        let left = active[i].node_id.min(active[j].node_id);
        let right = active[i].node_id.max(active[j].node_id);
        merges.push(Merge {
            left,
            right,
            height: cost.max(0.0).sqrt(),
        });

        // Lance-Williams update for Ward linkage: distances from the merged
        // cluster (stored in slot i) to every other active cluster.
        for k in 0..active.len() {
            if k == i || k == j {
                continue;
            }
            let nk = active[k].size;
            let total = na + nb + nk;
            let updated =
                ((na + nk) * d2[i][k] + (nb + nk) * d2[j][k] - nk * cost) / total;
            d2[i][k] = updated;
            d2[k][i] = updated;
        }
        active[i] = Active {
            node_id: g + merges.len() - 1,
            size: na + nb,
            min_leaf: active[i].min_leaf.min(active[j].min_leaf),
        };
        // Drop slot j from the matrix and the active list.
        d2.swap_remove(j);
        for row in &mut d2 {
            row.swap_remove(j);
        }
        active.swap_remove(j);
    }

    Ok(Dendrogram {
        leaf_count: g,
        merges,
    })
}

/// Cuts the tree into `k` clusters by undoing the last `k - 1` merges.
/// Labels are `1..=k`, numbered by each cluster's smallest leaf index.
pub fn cut_tree(tree: &Dendrogram, k: usize) -> Result<Vec<u32>> {
    let g = tree.leaf_count;
    if k == 0 || k > g {
        return Err(Error::CutOutOfRange { k, leaves: g });
    }
    let applied = g - k;
    // Union-find over node ids 0..g+applied.
    let mut parent: Vec<usize> = (0..g + applied).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for (t, merge) in tree.merges.iter().take(applied).enumerate() {
        let new_id = g + t;
        let l = find(&mut parent, merge.left);
        let r = find(&mut parent, merge.right);
        parent[l] = new_id;
        parent[r] = new_id;
    }

    // Clusters ordered by smallest contained leaf get labels 1..=k.
    let roots: Vec<usize> = (0..g).map(|leaf| find(&mut parent, leaf)).collect();
    let mut label_of_root: Vec<Option<u32>> = vec![None; g + applied];
    let mut next = 0u32;
    let mut labels = vec![0u32; g];
    for leaf in 0..g {
        let root = roots[leaf];
        let label = *label_of_root[root].get_or_insert_with(|| {
            next += 1;
            next
        });
        labels[leaf] = label;
    }
    debug_assert_eq!(next as usize, k);
    Ok(labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn pts(raw: &[[f64; 2]]) -> Vec<Vec<f64>> {
        raw.iter().map(|p| p.to_vec()).collect()
    }

    #[test]
    fn two_points_merge_at_their_distance() {
        let tree = ward_linkage(&pts(&[[0.0, 0.0], [3.0, 4.0]])).unwrap();
        assert_eq!(tree.merges.len(), 1);
        let m = tree.merges[0];
        assert_eq!((m.left, m.right), (0, 1));
        // Ward cost for singletons is d^2, height = d = 5.
        assert_relative_eq!(m.height, 5.0, max_relative = 1e-12);
    }

    #[test]
    fn three_collinear_points_merge_near_pair_first() {
        // Points at 0, 1, 10 on a line.
        let tree = ward_linkage(&pts(&[[0.0, 0.0], [1.0, 0.0], [10.0, 0.0]])).unwrap();
        assert_eq!(tree.merges[0].left, 0);
        assert_eq!(tree.merges[0].right, 1);
        assert_relative_eq!(tree.merges[0].height, 1.0, max_relative = 1e-12);
        // Second merge joins {0,1} (node 3) with leaf 2; centroid 0.5 vs 10,
        // cost = 2*2*1/3 * 9.5^2.
        assert_eq!(tree.merges[1].left, 2);
        assert_eq!(tree.merges[1].right, 3);
        let expected = (4.0 / 3.0 * 9.5 * 9.5_f64).sqrt();
        assert_relative_eq!(tree.merges[1].height, expected, max_relative = 1e-12);
    }

    #[test]
    fn tie_break_prefers_smallest_leaf_pair() {
        // A unit square: all four nearest-neighbour distances are 1.
        let tree = ward_linkage(&pts(&[
            [0.0, 0.0],
            [1.0, 0.0],
            [0.0, 1.0],
            [1.0, 1.0],
        ]))
        .unwrap();
        // The (0,1) pair must merge first.
        assert_eq!((tree.merges[0].left, tree.merges[0].right), (0, 1));
        // Then the (2,3) pair, also at cost 1 and lexicographically least.
        assert_eq!((tree.merges[1].left, tree.merges[1].right), (2, 3));
    }

    #[test]
    fn heights_nondecreasing() {
        // Deterministic pseudo-random layout.
        let mut points = Vec::new();
        let mut state = 0x9e3779b97f4a7c15u64;
        for _ in 0..40 {
            let mut next = || {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (state >> 11) as f64 / (1u64 << 53) as f64
            };
            points.push(vec![next() * 10.0, next() * 10.0]);
        }
        let tree = ward_linkage(&points).unwrap();
        for w in tree.merges.windows(2) {
            assert!(
                w[1].height >= w[0].height - 1e-9,
                "heights must be nondecreasing: {} then {}",
                w[0].height,
                w[1].height
            );
        }
    }

    #[test]
    fn cut_tree_labels_by_smallest_leaf() {
        // Two tight pairs far apart: leaves 0,1 near origin, 2,3 near (10,10).
        let tree = ward_linkage(&pts(&[
            [0.0, 0.0],
            [0.1, 0.0],
            [10.0, 10.0],
            [10.1, 10.0],
        ]))
        .unwrap();
        let labels = cut_tree(&tree, 2).unwrap();
        assert_eq!(labels, vec![1, 1, 2, 2]);
        let all = cut_tree(&tree, 1).unwrap();
        assert_eq!(all, vec![1, 1, 1, 1]);
        let singletons = cut_tree(&tree, 4).unwrap();
        assert_eq!(singletons, vec![1, 2, 3, 4]);
    }

    #[test]
    fn cut_tree_range_checked() {
        let tree = ward_linkage(&pts(&[[0.0, 0.0], [1.0, 1.0]])).unwrap();
        assert!(matches!(
            cut_tree(&tree, 0),
            Err(Error::CutOutOfRange { .. })
        ));
        assert!(matches!(
            cut_tree(&tree, 3),
            Err(Error::CutOutOfRange { .. })
        ));
    }

    #[test]
    fn rejects_degenerate_inputs() {
        assert!(ward_linkage(&pts(&[[0.0, 0.0]])).is_err());
        assert!(ward_linkage(&[vec![0.0, 0.0], vec![1.0]]).is_err());
        assert!(ward_linkage(&[vec![0.0], vec![f64::NAN]]).is_err());
    }
}
