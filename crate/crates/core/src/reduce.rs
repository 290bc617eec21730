//! Fixed-order reductions.
//!
//! Partial results are combined along a balanced binary tree over their index
//! order, so the floating-point result is independent of how the partials were
//! scheduled across worker threads.

use crate::scalar::Scalar;

/// Pairwise sum of scalars in index order.
pub fn tree_sum<T: Scalar>(values: &[T]) -> T {
    match values.len() {
        0 => T::zero(),
        1 => values[0],
        n => {
            let mid = n / 2;
            tree_sum(&values[..mid]) + tree_sum(&values[mid..])
        }
    }
}

/// Pairwise elementwise sum of equally sized vectors in index order.
///
/// Returns `None` for an empty input.
pub fn tree_sum_vectors<T: Scalar>(mut parts: Vec<Vec<T>>) -> Option<Vec<T>> {
    if parts.is_empty() {
        return None;
    }
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        let mut it = parts.into_iter();
        while let Some(mut left) = it.next() {
            if let Some(right) = it.next() {
                for (l, r) in left.iter_mut().zip(&right) {
                    *l = *l + *r;
                }
            }
            next.push(left);
        }
        parts = next;
    }
    parts.pop()
}
