//! Data-parallel map helper. With the `parallel` feature (default) work is
//! spread over a rayon pool sized by `jobs`; without it, or with `jobs == 1`,
//! items run sequentially. Output order always matches input order, so
//! results are identical regardless of scheduling.

/// `jobs` semantics: 0 = rayon default thread count, 1 = forced sequential,
/// n = pool of n threads.
#[cfg(feature = "parallel")]
pub fn map_indexed<T, R, F>(items: &[T], jobs: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync,
{
    use rayon::prelude::*;
    if jobs == 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let run = || items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect();
    if jobs == 0 {
        run()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .expect("rayon pool");
        pool.install(run)
    }
}

#[cfg(not(feature = "parallel"))]
pub fn map_indexed<T, R, F>(items: &[T], _jobs: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync,
{
    items.iter().enumerate().map(|(i, t)| f(i, t)).collect()
}
