//! Static 3-d tree for k-nearest-neighbour queries.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

const LEAF_SIZE: usize = 16;

#[derive(Debug)]
enum Node {
    Leaf { start: usize, end: usize },
    Split { dim: usize, value: f64, left: Box<Node>, right: Box<Node> },
}

/// Owns a permutation of point indices; the points themselves are borrowed
/// on every query so one tree can serve several views of the same data.
#[derive(Debug)]
pub struct KdTree {
    order: Vec<usize>,
    root: Node,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Candidate {
    dist2: f64,
    index: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist2
            .total_cmp(&other.dist2)
            .then(self.index.cmp(&other.index))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let d0 = a[0] - b[0];
    let d1 = a[1] - b[1];
    let d2 = a[2] - b[2];
    d0 * d0 + d1 * d1 + d2 * d2
}

impl KdTree {
    pub fn build(points: &[[f64; 3]]) -> Self {
        let mut order: Vec<usize> = (0..points.len()).collect();
        let root = Self::build_node(points, &mut order, 0, points.len());
        Self { order, root }
    }

    fn build_node(points: &[[f64; 3]], order: &mut [usize], start: usize, end: usize) -> Node {
        if end - start <= LEAF_SIZE {
            return Node::Leaf { start, end };
        }
        let slice = &mut order[start..end];
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &i in slice.iter() {
            for d in 0..3 {
                lo[d] = lo[d].min(points[i][d]);
                hi[d] = hi[d].max(points[i][d]);
            }
        }
        let dim = (0..3)
            .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
            .unwrap_or(0);
        let mid = slice.len() / 2;
        slice.select_nth_unstable_by(mid, |&a, &b| {
            points[a][dim].total_cmp(&points[b][dim]).then(a.cmp(&b))
        });
        let value = points[slice[mid]][dim];
        let left = Box::new(Self::build_node(points, order, start, start + mid));
        let right = Box::new(Self::build_node(points, order, start + mid, end));
        Node::Split { dim, value, left, right }
    }

    /// Indices of the `k` nearest points to `query`, closest first; ties are
    /// broken by index.
    pub fn nearest(&self, points: &[[f64; 3]], query: &[f64; 3], k: usize) -> Vec<(usize, f64)> {
        let mut heap = BinaryHeap::with_capacity(k + 1);
        if k > 0 {
            self.search(&self.root, points, query, k, &mut heap);
        }
        let mut out: Vec<Candidate> = heap.into_vec();
        out.sort();
        out.into_iter().map(|c| (c.index, c.dist2)).collect()
    }

    /// Like [`KdTree::nearest`], but at most `cap` of the returned points may
    /// share the same `groups` label.
    pub fn nearest_capped(
        &self,
        points: &[[f64; 3]],
        groups: &[usize],
        query: &[f64; 3],
        k: usize,
        cap: usize,
    ) -> Vec<(usize, f64)> {
        let mut state = Capped { heap: BinaryHeap::with_capacity(k + 1), counts: Vec::new(), k, cap };
        if k > 0 && cap > 0 {
            self.search_capped(&self.root, points, groups, query, &mut state);
        }
        let mut out: Vec<Candidate> = state.heap.into_vec();
        out.sort();
        out.into_iter().map(|c| (c.index, c.dist2)).collect()
    }

    fn search_capped(
        &self,
        node: &Node,
        points: &[[f64; 3]],
        groups: &[usize],
        query: &[f64; 3],
        state: &mut Capped,
    ) {
        match node {
            Node::Leaf { start, end } => {
                for &i in &self.order[*start..*end] {
                    let c = Candidate { dist2: dist2(&points[i], query), index: i };
                    state.offer(c, groups);
                }
            }
            Node::Split { dim, value, left, right } => {
                let diff = query[*dim] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search_capped(near, points, groups, query, state);
                if state.heap.len() < state.k
                    || diff * diff <= state.heap.peek().map_or(f64::INFINITY, |c| c.dist2)
                {
                    self.search_capped(far, points, groups, query, state);
                }
            }
        }
    }

    fn search(
        &self,
        node: &Node,
        points: &[[f64; 3]],
        query: &[f64; 3],
        k: usize,
        heap: &mut BinaryHeap<Candidate>,
    ) {
        match node {
            Node::Leaf { start, end } => {
                for &i in &self.order[*start..*end] {
                    let c = Candidate { dist2: dist2(&points[i], query), index: i };
                    if heap.len() < k {
                        heap.push(c);
                    } else if c < *heap.peek().expect("heap is full") {
                        heap.pop();
                        heap.push(c);
                    }
                }
            }
            Node::Split { dim, value, left, right } => {
                let diff = query[*dim] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near, points, query, k, heap);
                if heap.len() < k || diff * diff <= heap.peek().map_or(f64::INFINITY, |c| c.dist2) {
                    self.search(far, points, query, k, heap);
                }
            }
        }
    }
}

struct Capped {
    heap: BinaryHeap<Candidate>,
    counts: Vec<(usize, usize)>,
    k: usize,
    cap: usize,
}

impl Capped {
    fn count_mut(&mut self, group: usize) -> &mut usize {
        let pos = match self.counts.iter().position(|(g, _)| *g == group) {
            Some(p) => p,
            None => {
                self.counts.push((group, 0));
                self.counts.len() - 1
            }
        };
        &mut self.counts[pos].1
    }

    fn offer(&mut self, c: Candidate, groups: &[usize]) {
        let g = groups[c.index];
        if *self.count_mut(g) < self.cap {
            if self.heap.len() < self.k {
                self.heap.push(c);
                *self.count_mut(g) += 1;
            } else if c < *self.heap.peek().expect("heap is full") {
                let evicted = self.heap.pop().expect("heap is full");
                *self.count_mut(groups[evicted.index]) -= 1;
                self.heap.push(c);
                *self.count_mut(g) += 1;
            }
            return;
        }
        // The group is at its cap: the candidate can only displace that
        // group's worst member.
        let mut items = std::mem::take(&mut self.heap).into_vec();
        let worst = items
            .iter()
            .enumerate()
            .filter(|(_, x)| groups[x.index] == g)
            .max_by(|a, b| a.1.cmp(b.1))
            .map(|(p, _)| p);
        if let Some(p) = worst {
            if c < items[p] {
                items[p] = c;
            }
        }
        self.heap = BinaryHeap::from(items);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pts: Vec<[f64; 3]> = (0..2000)
            .map(|_| [rng.gen(), rng.gen::<f64>() * 0.1, rng.gen::<f64>() * 3.0])
            .collect();
        let tree = KdTree::build(&pts);
        for _ in 0..50 {
            let q = [rng.gen(), rng.gen(), rng.gen()];
            let got = tree.nearest(&pts, &q, 12);
            let mut brute: Vec<(usize, f64)> =
                pts.iter().enumerate().map(|(i, p)| (i, dist2(p, &q))).collect();
            brute.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            assert_eq!(got, brute[..12].to_vec());
        }
    }

    #[test]
    fn capped_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        // Dense lines: each group is a fine 1-d sampling along the third axis.
        let mut pts = Vec::new();
        let mut groups = Vec::new();
        for g in 0..30 {
            let (x, y) = (rng.gen::<f64>(), rng.gen::<f64>());
            for s in 0..200 {
                pts.push([x, y, s as f64 * 1e-3]);
                groups.push(g);
            }
        }
        let tree = KdTree::build(&pts);
        for _ in 0..30 {
            let q = [rng.gen(), rng.gen(), rng.gen::<f64>() * 0.2];
            let got = tree.nearest_capped(&pts, &groups, &q, 20, 4);
            let mut brute: Vec<(usize, f64)> =
                pts.iter().enumerate().map(|(i, p)| (i, dist2(p, &q))).collect();
            brute.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            let mut used = [0; 30];
            let expected: Vec<(usize, f64)> = brute
                .into_iter()
                .filter(|(i, _)| {
                    used[groups[*i]] += 1;
                    used[groups[*i]] <= 4
                })
                .take(20)
                .collect();
            assert_eq!(got, expected);
        }
    }

    #[test]
    fn small_and_degenerate_inputs() {
        let pts = vec![[0.0; 3]; 5];
        let tree = KdTree::build(&pts);
        let got = tree.nearest(&pts, &[1.0, 0.0, 0.0], 10);
        assert_eq!(got.iter().map(|g| g.0).collect::<Vec<_>>(), vec![0, 1, 2, 3, 4]);
        assert!(tree.nearest(&pts, &[0.0; 3], 0).is_empty());
        let empty: Vec<[f64; 3]> = vec![];
        assert!(KdTree::build(&empty).nearest(&empty, &[0.0; 3], 3).is_empty());
    }
}
