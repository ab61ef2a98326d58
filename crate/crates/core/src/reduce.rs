//! Fixed-shape reductions. Parallel stages collect per-item results in index
//! order and reduce them here, so the floating-point result does not depend on
//! how work was scheduled.

use crate::scalar::Scalar;

/// Pairwise (binary tree) sum over a slice in index order.
pub fn pairwise_sum<T: Scalar>(values: &[T]) -> T {
    match values.len() {
        0 => T::zero(),
        1 => values[0],
        n => {
            let mid = n / 2;
            pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
        }
    }
}

pub fn mean<T: Scalar>(values: &[T]) -> Option<T> {
    if values.is_empty() {
        return None;
    }
    Some(pairwise_sum(values) / T::from_usize(values.len())?)
}

/// Tree reduction of owned items with a binary combiner.
pub fn tree_reduce<G>(mut items: Vec<G>, combine: impl Fn(G, G) -> G + Copy) -> Option<G> {
    while items.len() > 1 {
        let mut next = Vec::with_capacity(items.len().div_ceil(2));
        let mut it = items.into_iter();
        while let Some(a) = it.next() {
            match it.next() {
                Some(b) => next.push(combine(a, b)),
                None => next.push(a),
            }
        }
        items = next;
    }
    items.pop()
}
