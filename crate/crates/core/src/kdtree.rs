//! Exact k-d tree over row-major descriptor rows.
//!
//! Branches are pruned only when their lower bound is strictly worse than
//! the current k-th candidate, so results (ties included) coincide with an
//! exhaustive scan ordered by `(distance, index)`.

use crate::dictionary::{Neighbor, TopK};

const LEAF_SIZE: usize = 8;

#[derive(Debug)]
enum Node {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        dim: usize,
        value: f64,
        left: Box<Node>,
        right: Box<Node>,
    },
}

#[derive(Debug)]
pub struct KdIndex {
    dim: usize,
    data: Vec<f64>,
    order: Vec<usize>,
    root: Node,
}

impl KdIndex {
    pub fn build(data: Vec<f64>, dim: usize) -> Self {
        assert!(dim > 0 && data.len().is_multiple_of(dim));
        let n = data.len() / dim;
        let mut order: Vec<usize> = (0..n).collect();
        let root = build_node(&data, dim, &mut order, 0, n);
        Self {
            dim,
            data,
            order,
            root,
        }
    }

    /// The stored descriptor of item `index`.
    pub fn row(&self, index: usize) -> &[f64] {
        &self.data[index * self.dim..(index + 1) * self.dim]
    }

    pub fn query(&self, probe: &[f64], k: usize) -> Vec<Neighbor> {
        assert_eq!(probe.len(), self.dim);
        let mut top = TopK::new(k);
        let mut offsets = vec![0.0; self.dim];
        self.search(&self.root, probe, &mut top, &mut offsets, 0.0);
        top.into_sorted()
    }

    fn search(&self, node: &Node, probe: &[f64], top: &mut TopK, offsets: &mut [f64], bound: f64) {
        if !top.admits(bound) {
            return;
        }
        match node {
            Node::Leaf { start, end } => {
                for &idx in &self.order[*start..*end] {
                    let row = self.row(idx);
                    let d: f64 = row.iter().zip(probe).map(|(a, b)| (a - b) * (a - b)).sum();
                    top.push(d, idx);
                }
            }
            Node::Split {
                dim,
                value,
                left,
                right,
            } => {
                let diff = probe[*dim] - value;
                let (near, far) = if diff <= 0.0 { (left, right) } else { (right, left) };
                self.search(near, probe, top, offsets, bound);
                // incremental lower bound on the far side
                let old = offsets[*dim];
                let far_bound = bound - old * old + diff * diff;
                offsets[*dim] = diff;
                self.search(far, probe, top, offsets, far_bound);
                offsets[*dim] = old;
            }
        }
    }
}

fn build_node(data: &[f64], dim: usize, order: &mut [usize], start: usize, end: usize) -> Node {
    if end - start <= LEAF_SIZE {
        return Node::Leaf { start, end };
    }
    let slice = &mut order[start..end];
    // split on the dimension with the widest spread
    let mut best = (0usize, -1.0f64);
    for d in 0..dim {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for &i in slice.iter() {
            let v = data[i * dim + d];
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if hi - lo > best.1 {
            best = (d, hi - lo);
        }
    }
    let split_dim = best.0;
    if best.1 <= 0.0 {
        return Node::Leaf { start, end };
    }
    let mid = slice.len() / 2;
    slice.select_nth_unstable_by(mid, |&a, &b| {
        data[a * dim + split_dim].total_cmp(&data[b * dim + split_dim])
    });
    let value = data[slice[mid] * dim + split_dim];
    // left: <= value, right: >= value; items equal to the pivot may sit on
    // either side, which is fine because bounds use the same value.
    let left = build_node(data, dim, order, start, start + mid);
    let right = build_node(data, dim, order, start + mid, end);
    Node::Split {
        dim: split_dim,
        value,
        left: Box::new(left),
        right: Box::new(right),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute(data: &[f64], dim: usize, probe: &[f64], k: usize) -> Vec<(f64, usize)> {
        let mut all: Vec<(f64, usize)> = data
            .chunks(dim)
            .enumerate()
            .map(|(i, r)| (r.iter().zip(probe).map(|(a, b)| (a - b) * (a - b)).sum(), i))
            .collect();
        all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        all.truncate(k);
        all
    }

    #[test]
    fn matches_brute_force_with_duplicates() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dim = 5;
        // quantized values force many exact ties
        let data: Vec<f64> = (0..300 * dim).map(|_| f64::from(rng.random_range(0..4u8))).collect();
        let index = KdIndex::build(data.clone(), dim);
        for _ in 0..50 {
            let probe: Vec<f64> = (0..dim).map(|_| f64::from(rng.random_range(0..4u8))).collect();
            let got: Vec<(f64, usize)> = index.query(&probe, 10).iter().map(|n| (n.distance, n.index)).collect();
            assert_eq!(got, brute(&data, dim, &probe, 10));
        }
    }
}
