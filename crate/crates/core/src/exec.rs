//! Batch execution helpers.
//!
//! With the `parallel` feature (default) batches are spread over the rayon
//! pool; without it, or inside [`sequential`], they run in index order on the
//! calling thread. Results are always returned in index order and every
//! reduction here has a fixed association order, so outputs do not depend on
//! the thread count.

use std::cell::Cell;

thread_local! {
    static FORCE_SEQUENTIAL: Cell<bool> = const { Cell::new(false) };
}

/// Run `f` with batch helpers forced onto the calling thread.
pub fn sequential<R>(f: impl FnOnce() -> R) -> R {
    FORCE_SEQUENTIAL.with(|flag| {
        let prev = flag.replace(true);
        let out = f();
        flag.set(prev);
        out
    })
}

/// True when batch helpers will use the thread pool on this thread.
pub fn is_parallel() -> bool {
    cfg!(feature = "parallel") && !FORCE_SEQUENTIAL.with(Cell::get)
}

/// Evaluate `f(0..n)` and collect the results in index order.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if is_parallel() {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    (0..n).map(f).collect()
}

/// Fallible variant of [`map_indexed`]; returns the lowest-index error.
pub fn try_map_indexed<T, E, F>(n: usize, f: F) -> Result<Vec<T>, E>
where
    T: Send,
    E: Send,
    F: Fn(usize) -> Result<T, E> + Sync + Send,
{
    map_indexed(n, f).into_iter().collect()
}

/// Pairwise (tree) summation with a fixed association order.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const LEAF: usize = 16;
    if values.len() <= LEAF {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

/// Element-wise pairwise summation of equally sized vectors.
pub fn pairwise_sum_vecs(vectors: &[Vec<f64>], len: usize) -> Vec<f64> {
    match vectors.len() {
        0 => vec![0.0; len],
        1 => vectors[0].clone(),
        n => {
            let mid = n / 2;
            let mut left = pairwise_sum_vecs(&vectors[..mid], len);
            let right = pairwise_sum_vecs(&vectors[mid..], len);
            for (l, r) in left.iter_mut().zip(&right) {
                *l += r;
            }
            left
        }
    }
}
