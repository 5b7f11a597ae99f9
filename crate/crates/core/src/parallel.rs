//! Data-parallel maps over independent work items.
//!
//! With the `parallel` feature the work is spread over a rayon pool;
//! without it (or with [`Parallelism::Sequential`]) items run in order on
//! the calling thread. Results always come back in input order, so
//! reductions over them are deterministic either way.

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Parallelism {
    Sequential,
    #[default]
    Auto,
}

impl Parallelism {
    /// Whether this build can run work on multiple threads.
    pub fn available() -> bool {
        cfg!(feature = "parallel")
    }
}

/// `f(i)` for `i in 0..n`, in order.
pub fn map_indexed<T, F>(n: usize, mode: Parallelism, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match mode {
        Parallelism::Sequential => (0..n).map(f).collect(),
        Parallelism::Auto => par_map(n, f),
    }
}

#[cfg(feature = "parallel")]
fn par_map<T: Send, F: Fn(usize) -> T + Sync + Send>(n: usize, f: F) -> Vec<T> {
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn par_map<T: Send, F: Fn(usize) -> T + Sync + Send>(n: usize, f: F) -> Vec<T> {
    (0..n).map(f).collect()
}

/// Caps the global worker pool at `threads`. Only the first call has an
/// effect; later calls (or calls after the pool started) are ignored.
pub fn init_threads(threads: usize) {
    #[cfg(feature = "parallel")]
    {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads.max(1))
            .build_global();
    }
    #[cfg(not(feature = "parallel"))]
    let _ = threads;
}

/// Reads the worker cap from `TLODE_THREADS`, if set.
pub fn init_from_env() -> Option<usize> {
    let n = std::env::var("TLODE_THREADS").ok()?.parse::<usize>().ok()?;
    init_threads(n);
    Some(n)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_agree_and_keep_order() {
        let f = |i: usize| (i as f64).sqrt().sin();
        let a = map_indexed(1000, Parallelism::Sequential, f);
        let b = map_indexed(1000, Parallelism::Auto, f);
        assert_eq!(a, b);
    }
}
