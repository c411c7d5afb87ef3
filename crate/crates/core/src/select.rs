//! Deterministic top-k / bottom-k selection. Ties always go to the lower index.

use std::cmp::Ordering;

fn by_value_desc<T: PartialOrd>(values: &[T]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| {
        values[b]
            .partial_cmp(&values[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    }
}

fn by_value_asc<T: PartialOrd>(values: &[T]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| {
        values[a]
            .partial_cmp(&values[b])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    }
}

fn select<F>(n: usize, k: usize, cmp: F) -> Vec<usize>
where
    F: Fn(&usize, &usize) -> Ordering,
{
    let k = k.min(n);
    let mut idx: Vec<usize> = (0..n).collect();
    if k == 0 {
        return Vec::new();
    }
    if k < n {
        idx.select_nth_unstable_by(k - 1, &cmp);
        idx.truncate(k);
    }
    idx.sort_unstable_by(&cmp);
    idx
}

/// Indices of the `k` largest values in rank order (largest first).
pub fn top_k<T: PartialOrd>(values: &[T], k: usize) -> Vec<usize> {
    select(values.len(), k, by_value_desc(values))
}

/// Indices of the `k` smallest values in rank order (smallest first).
pub fn bottom_k<T: PartialOrd>(values: &[T], k: usize) -> Vec<usize> {
    select(values.len(), k, by_value_asc(values))
}
