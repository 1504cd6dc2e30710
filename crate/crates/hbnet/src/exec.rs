//! Execution helpers: data-parallel maps with a sequential fallback.
//!
//! Every hot loop in the crate goes through [`map_slice`] or [`map_range`].
//! With the `parallel` feature enabled (the default) these fan out over
//! rayon; without it, or inside [`run_sequential`], they run in order on the
//! current thread. Results are collected in input order either way, so
//! outputs are identical no matter how work is scheduled.

use std::cell::Cell;

thread_local! {
    static FORCE_SEQUENTIAL: Cell<bool> = const { Cell::new(false) };
}

/// True while the current thread is inside [`run_sequential`].
pub fn sequential_forced() -> bool {
    FORCE_SEQUENTIAL.with(Cell::get)
}

/// Runs `f` with the parallel maps downgraded to plain sequential loops.
pub fn run_sequential<R>(f: impl FnOnce() -> R) -> R {
    FORCE_SEQUENTIAL.with(|flag| {
        let previous = flag.replace(true);
        let out = f();
        flag.set(previous);
        out
    })
}

/// Runs `f` on a dedicated pool of `threads` workers; `threads <= 1` means
/// strictly sequential execution.
#[cfg(feature = "parallel")]
pub fn run_with_threads<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> R {
    if threads <= 1 {
        run_sequential(f)
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .expect("failed to build worker pool")
            .install(f)
    }
}

#[cfg(not(feature = "parallel"))]
pub fn run_with_threads<R: Send>(_threads: usize, f: impl FnOnce() -> R + Send) -> R {
    run_sequential(f)
}

/// Maps `f` over `items`, preserving input order in the output.
pub fn map_slice<T: Sync, U: Send>(items: &[T], f: impl Fn(&T) -> U + Sync + Send) -> Vec<U> {
    #[cfg(feature = "parallel")]
    if !sequential_forced() {
        use rayon::prelude::*;
        return items.par_iter().map(&f).collect();
    }
    items.iter().map(f).collect()
}

/// Maps `f` over `0..n`, preserving index order in the output.
pub fn map_range<U: Send>(n: usize, f: impl Fn(usize) -> U + Sync + Send) -> Vec<U> {
    #[cfg(feature = "parallel")]
    if !sequential_forced() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(&f).collect();
    }
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_slice_preserves_order() {
        let items: Vec<u64> = (0..1000).collect();
        let doubled = map_slice(&items, |x| x * 2);
        assert_eq!(doubled, items.iter().map(|x| x * 2).collect::<Vec<_>>());
    }

    #[test]
    fn map_range_matches_sequential() {
        let par = map_range(777, |i| i * i + 1);
        let seq = run_sequential(|| map_range(777, |i| i * i + 1));
        assert_eq!(par, seq);
    }

    #[test]
    fn sequential_flag_restores_on_exit() {
        assert!(!sequential_forced());
        run_sequential(|| {
            assert!(sequential_forced());
            run_sequential(|| assert!(sequential_forced()));
            assert!(sequential_forced());
        });
        assert!(!sequential_forced());
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn run_with_threads_same_answer_any_width() {
        let work = || map_range(500, |i| (i as f64).sqrt().sin());
        let one = run_with_threads(1, work);
        let four = run_with_threads(4, work);
        assert_eq!(one, four);
    }
}
