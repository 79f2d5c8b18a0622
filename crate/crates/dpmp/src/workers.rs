//! Bounded worker fan-out for independent per-item jobs.
//!
//! The `DPMP_THREADS` environment variable caps worker parallelism for
//! every command; results always come back in item order, so thread count
//! never changes any output.

use std::sync::atomic::{AtomicUsize, Ordering};

/// Worker cap: `DPMP_THREADS` if set and valid, otherwise the machine's
/// available parallelism.
pub fn worker_count() -> usize {
    if let Ok(raw) = std::env::var("DPMP_THREADS") {
        if let Ok(n) = raw.trim().parse::<usize>() {
            if n >= 1 {
                return n;
            }
        }
    }
    std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
}

/// Run `f(0..n)` across up to [`worker_count`] threads and collect results
/// in index order. Jobs must be independent; each result lands in its own
/// slot, so scheduling cannot reorder anything.
pub fn run_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    let threads = worker_count().min(n.max(1));
    if threads <= 1 || n <= 1 {
        return (0..n).map(f).collect();
    }
    let mut slots: Vec<Option<T>> = (0..n).map(|_| None).collect();
    let next = AtomicUsize::new(0);
    let slots_ptr = SendSlots(slots.as_mut_ptr());
    std::thread::scope(|scope| {
        for _ in 0..threads {
            let f = &f;
            let next = &next;
            let slots_ptr = &slots_ptr;
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let value = f(i);
                // Each index is claimed exactly once, so this write is the
                // only access to slot i.
                unsafe {
                    *slots_ptr.0.add(i) = Some(value);
                }
            });
        }
    });
    slots.into_iter().map(|v| v.expect("worker filled slot")).collect()
}

struct SendSlots<T>(*mut Option<T>);
unsafe impl<T: Send> Sync for SendSlots<T> {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn results_are_in_order() {
        let out = run_indexed(100, |i| i * i);
        assert_eq!(out, (0..100).map(|i| i * i).collect::<Vec<_>>());
    }

    #[test]
    fn empty_and_single() {
        assert_eq!(run_indexed(0, |i| i), Vec::<usize>::new());
        assert_eq!(run_indexed(1, |i| i + 1), vec![1]);
    }
}
