//! Fixed-order fan-out over worker threads.

/// Evaluates `f(0..n)` on up to `workers` threads and returns the results in
/// index order, so callers that reduce sequentially get the same answer for
/// any worker count.
pub fn map_indexed<T, F>(n: usize, workers: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    let workers = workers.max(1).min(n.max(1));
    if workers == 1 {
        return (0..n).map(f).collect();
    }
    let mut slots: Vec<Option<T>> = (0..n).map(|_| None).collect();
    std::thread::scope(|s| {
        let f = &f;
        let handles: Vec<_> = (0..workers)
            .map(|w| s.spawn(move || (w..n).step_by(workers).map(|i| (i, f(i))).collect::<Vec<_>>()))
            .collect();
        for h in handles {
            for (i, v) in h.join().expect("worker panicked") {
                slots[i] = Some(v);
            }
        }
    });
    slots.into_iter().map(|v| v.expect("every index produced")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_independent_of_workers() {
        let one = map_indexed(37, 1, |i| i * i);
        for w in [2, 3, 8, 64] {
            assert_eq!(map_indexed(37, w, |i| i * i), one);
        }
        assert!(map_indexed(0, 4, |i| i).is_empty());
    }
}
