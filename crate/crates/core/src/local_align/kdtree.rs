//! Static 2-D KD-tree over integer pixel coordinates.
//!
//! Neighbors are ordered by squared Euclidean distance, then by `(v, u)`.
//! With distinct points this order is total, so results are exactly those of
//! a full sort.

use std::collections::BinaryHeap;

const LEAF_SIZE: usize = 8;

/// Total order used for neighbor ranking: `(dist², v, u)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
struct Rank {
    dist2: i64,
    v: i64,
    u: i64,
    index: usize,
}

#[derive(Clone, Debug)]
enum Node {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        axis: usize,
        value: i64,
        left: usize,
        right: usize,
    },
}

#[derive(Clone, Debug)]
pub struct KdTree {
    points: Vec<[i64; 2]>,
    /// Point indices permuted so that every leaf owns a contiguous run.
    order: Vec<usize>,
    nodes: Vec<Node>,
}

impl KdTree {
    /// Builds over points given as `(u, v)`.
    pub fn build(points: &[[i64; 2]]) -> Self {
        let mut tree = Self {
            points: points.to_vec(),
            order: (0..points.len()).collect(),
            nodes: Vec::new(),
        };
        if !points.is_empty() {
            tree.build_range(0, points.len());
        }
        tree
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn build_range(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let slice = &mut self.order[start..end];
        let spread = |axis: usize| {
            let (lo, hi) = slice.iter().fold((i64::MAX, i64::MIN), |(lo, hi), &i| {
                let c = self.points[i][axis];
                (lo.min(c), hi.max(c))
            });
            hi - lo
        };
        let axis = if spread(0) >= spread(1) { 0 } else { 1 };
        let mid = slice.len() / 2;
        let points = &self.points;
        slice.select_nth_unstable_by_key(mid, |&i| (points[i][axis], i));
        let value = points[slice[mid]][axis];
        // placeholder, patched once children exist
        self.nodes.push(Node::Leaf { start: 0, end: 0 });
        let left = self.build_range(start, start + mid);
        let right = self.build_range(start + mid, end);
        self.nodes[id] = Node::Split {
            axis,
            value,
            left,
            right,
        };
        id
    }

    /// The `k` points nearest to `query`, skipping the point with index `exclude`.
    pub fn nearest(&self, query: [i64; 2], k: usize, exclude: Option<usize>) -> Vec<usize> {
        if k == 0 || self.points.is_empty() {
            return Vec::new();
        }
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.search(0, query, k, exclude, &mut heap);
        let mut found = heap.into_vec();
        found.sort_unstable();
        found.into_iter().map(|r| r.index).collect()
    }

    fn search(&self, node: usize, q: [i64; 2], k: usize, exclude: Option<usize>, heap: &mut BinaryHeap<Rank>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    if Some(i) == exclude {
                        continue;
                    }
                    let p = self.points[i];
                    let (du, dv) = (p[0] - q[0], p[1] - q[1]);
                    let rank = Rank {
                        dist2: du * du + dv * dv,
                        v: p[1],
                        u: p[0],
                        index: i,
                    };
                    if heap.len() < k {
                        heap.push(rank);
                    } else if rank < *heap.peek().expect("heap holds k items") {
                        heap.pop();
                        heap.push(rank);
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                // left holds coordinates <= value, right holds >= value
                let diff = q[axis] - value;
                let (near, far) = if diff < 0 { (left, right) } else { (right, left) };
                self.search(near, q, k, exclude, heap);
                let plane2 = diff * diff;
                // equal distances can still win on the (v, u) tie rule
                if heap.len() < k || plane2 <= heap.peek().expect("heap holds k items").dist2 {
                    self.search(far, q, k, exclude, heap);
                }
            }
        }
    }
}

/// Linear-scan reference with the same ranking as [`KdTree::nearest`].
pub fn nearest_brute_force(points: &[[i64; 2]], query: [i64; 2], k: usize, exclude: Option<usize>) -> Vec<usize> {
    let mut ranks: Vec<Rank> = points
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != exclude)
        .map(|(i, p)| {
            let (du, dv) = (p[0] - query[0], p[1] - query[1]);
            Rank {
                dist2: du * du + dv * dv,
                v: p[1],
                u: p[0],
                index: i,
            }
        })
        .collect();
    let k = k.min(ranks.len());
    if k == 0 {
        return Vec::new();
    }
    ranks.select_nth_unstable(k - 1);
    ranks.truncate(k);
    ranks.sort_unstable();
    ranks.into_iter().map(|r| r.index).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_line_example() {
        let pts = [[0, 0], [1, 0], [3, 0], [10, 0]];
        let tree = KdTree::build(&pts);
        assert_eq!(tree.nearest([0, 0], 2, Some(0)), vec![1, 2]);
    }

    #[test]
    fn ties_break_by_row_then_column() {
        // four points at distance 1 around the origin
        let pts = [[0, 0], [1, 0], [-1, 0], [0, 1], [0, -1]];
        let tree = KdTree::build(&pts);
        // (v, u) order: (-1, 0), (0, -1), (0, 1), (1, 0)
        assert_eq!(tree.nearest([0, 0], 4, Some(0)), vec![4, 2, 1, 3]);
    }

    #[test]
    fn duplicate_axis_values_split_correctly() {
        let pts: Vec<[i64; 2]> = (0..50).map(|i| [5, i]).chain((0..50).map(|i| [i % 7, 3])).collect();
        let tree = KdTree::build(&pts);
        for (i, p) in pts.iter().enumerate() {
            assert_eq!(tree.nearest(*p, 6, Some(i)), nearest_brute_force(&pts, *p, 6, Some(i)));
        }
    }

    #[test]
    fn empty_and_oversized_k() {
        assert!(KdTree::build(&[]).nearest([0, 0], 3, None).is_empty());
        let tree = KdTree::build(&[[0, 0], [2, 2]]);
        assert_eq!(tree.nearest([0, 0], 5, Some(0)), vec![1]);
    }
}
