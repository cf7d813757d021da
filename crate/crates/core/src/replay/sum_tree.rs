//! Binary sum tree over nonnegative leaf weights.
//!
//! The tree is stored as a 1-based heap with the leaf level padded to a power
//! of two. Every internal node is recomputed as the sum of its two children on
//! each write, so the tree never accumulates drift from incremental deltas.

use std::cell::Cell;

use crate::error::{ensure_weight, Error, Result};

#[derive(Debug, Clone)]
pub struct SumTree {
    leaf_count: usize,
    padded: usize,
    nodes: Vec<f64>,
    visits: Cell<u64>,
}

impl SumTree {
    pub fn new(leaf_count: usize) -> Self {
        let padded = leaf_count.max(1).next_power_of_two();
        Self {
            leaf_count,
            padded,
            nodes: vec![0.0; 2 * padded],
            visits: Cell::new(0),
        }
    }

    pub fn leaf_count(&self) -> usize {
        self.leaf_count
    }

    /// Number of levels from root to leaf, i.e. nodes on any root-leaf path.
    pub fn depth(&self) -> u32 {
        self.padded.trailing_zeros() + 1
    }

    pub fn total(&self) -> f64 {
        self.nodes[1]
    }

    pub fn leaf(&self, leaf: usize) -> f64 {
        self.nodes[self.padded + leaf]
    }

    pub fn leaves(&self) -> &[f64] {
        &self.nodes[self.padded..self.padded + self.leaf_count]
    }

    /// Total node visits since construction (or the last [`reset_visits`](Self::reset_visits)).
    pub fn node_visits(&self) -> u64 {
        self.visits.get()
    }

    pub fn reset_visits(&self) {
        self.visits.set(0);
    }

    fn visit(&self) {
        self.visits.set(self.visits.get() + 1);
    }

    pub fn set(&mut self, leaf: usize, weight: f64) -> Result<()> {
        if leaf >= self.leaf_count {
            return Err(Error::Index {
                index: leaf,
                len: self.leaf_count,
            });
        }
        ensure_weight(weight)?;
        let mut idx = self.padded + leaf;
        self.nodes[idx] = weight;
        self.visit();
        while idx > 1 {
            idx /= 2;
            self.nodes[idx] = self.nodes[2 * idx] + self.nodes[2 * idx + 1];
            self.visit();
        }
        Ok(())
    }

    /// Inverse-CDF lookup: the leaf whose cumulative interval contains `u`.
    ///
    /// Never descends into a zero-mass subtree, so zero-weight leaves are
    /// unreachable even when rounding pushes `u` to a subtree boundary.
    pub fn find_prefix(&self, u: f64) -> Result<usize> {
        let total = self.total();
        if !(total > 0.0) {
            return Err(Error::Validation("find_prefix on an empty tree".into()));
        }
        if !(0.0..total).contains(&u) {
            return Err(Error::Validation(format!(
                "prefix {u} outside [0, {total})"
            )));
        }
        let mut u = u;
        let mut idx = 1;
        self.visit();
        while idx < self.padded {
            let left = self.nodes[2 * idx];
            let right = self.nodes[2 * idx + 1];
            if u < left || right <= 0.0 {
                idx *= 2;
            } else {
                u -= left;
                idx = 2 * idx + 1;
            }
            self.visit();
        }
        Ok(idx - self.padded)
    }

    /// Largest relative gap between an internal node and the sum of its children.
    pub fn max_consistency_error(&self) -> f64 {
        (1..self.padded)
            .map(|i| {
                let sum = self.nodes[2 * i] + self.nodes[2 * i + 1];
                let scale = sum.abs().max(self.nodes[i].abs()).max(f64::MIN_POSITIVE);
                (self.nodes[i] - sum).abs() / scale
            })
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tree(weights: &[f64]) -> SumTree {
        let mut t = SumTree::new(weights.len());
        for (i, &w) in weights.iter().enumerate() {
            t.set(i, w).unwrap();
        }
        t
    }

    /// Cumulative-sum oracle, independent of the tree walk.
    fn linear_find(weights: &[f64], u: f64) -> usize {
        let mut acc = 0.0;
        for (i, &w) in weights.iter().enumerate() {
            if u < acc + w {
                return i;
            }
            acc += w;
        }
        unreachable!()
    }

    #[test]
    fn set_to_zero_updates_total() {
        let mut t = tree(&[1.0, 2.0, 3.0, 4.0]);
        t.set(2, 0.0).unwrap();
        assert_eq!(t.leaves(), &[1.0, 2.0, 0.0, 4.0]);
        assert_eq!(t.total(), 7.0);
    }

    #[test]
    fn set_same_value_keeps_total() {
        let mut t = tree(&[1.0, 2.0, 3.0, 4.0]);
        t.set(1, 2.0).unwrap();
        assert_eq!(t.total(), 10.0);
    }

    #[test]
    fn set_touches_depth_nodes() {
        let mut t = SumTree::new(1024);
        t.reset_visits();
        t.set(517, 1.5).unwrap();
        assert_eq!(t.node_visits(), 11);
    }

    #[test]
    fn find_prefix_matches_cumsum_oracle() {
        let w = [1.0, 2.0, 3.0, 4.0];
        let t = tree(&w);
        assert_eq!(t.find_prefix(0.5).unwrap(), 0);
        assert_eq!(t.find_prefix(2.9).unwrap(), 1);
        assert_eq!(t.find_prefix(6.0).unwrap(), 3);
        for k in 0..1000 {
            let u = k as f64 * 0.01;
            assert_eq!(t.find_prefix(u).unwrap(), linear_find(&w, u), "u={u}");
        }
    }

    #[test]
    fn zero_leaf_is_unreachable() {
        let t = tree(&[0.0, 5.0]);
        for k in 0..500 {
            assert_eq!(t.find_prefix(k as f64 * 0.01).unwrap(), 1);
        }
        // the last representable value below the total
        let u = 5.0f64.next_down();
        assert_eq!(t.find_prefix(u).unwrap(), 1);
    }

    #[test]
    fn padded_leaves_never_returned() {
        let t = tree(&[1.0, 1.0, 1.0]);
        assert_eq!(t.find_prefix(3.0f64.next_down()).unwrap(), 2);
    }

    #[test]
    fn errors() {
        let mut t = SumTree::new(4);
        assert!(matches!(t.set(4, 1.0), Err(Error::Index { .. })));
        assert!(matches!(t.set(0, -1.0), Err(Error::Validation(_))));
        assert!(matches!(t.set(0, f64::NAN), Err(Error::Validation(_))));
        assert!(t.find_prefix(0.0).is_err());
        t.set(0, 1.0).unwrap();
        assert!(t.find_prefix(1.0).is_err());
        assert!(t.find_prefix(-0.1).is_err());
    }

    #[test]
    fn uniform_leaves_give_uniform_frequencies() {
        use rand::Rng;
        let n = 8;
        let t = tree(&vec![1.0; n]);
        let mut rng = crate::rng::seeded(11);
        let draws = 1_000_000;
        let mut counts = vec![0usize; n];
        for _ in 0..draws {
            let u = rng.random_range(0.0..t.total());
            counts[t.find_prefix(u).unwrap()] += 1;
        }
        for c in counts {
            let freq = c as f64 / draws as f64;
            assert!((freq - 1.0 / n as f64).abs() < 0.01, "{freq}");
        }
    }
}
