//! In-process latency measurement.

use std::time::Instant;

use twotower_core::eval::LatencyStats;

/// Runs `queries` calls of `run(i)` spread over `threads` threads and
/// summarises per-call latency. Call `i` goes to thread `i % threads`.
pub fn measure(threads: usize, queries: usize, run: impl Fn(usize) + Sync) -> Option<LatencyStats> {
    let threads = threads.max(1);
    let started = Instant::now();
    let samples: Vec<f64> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                let run = &run;
                scope.spawn(move || {
                    let mut local = Vec::with_capacity(queries / threads + 1);
                    for i in (t..queries).step_by(threads) {
                        let s = Instant::now();
                        run(i);
                        local.push(s.elapsed().as_secs_f64() * 1e3);
                    }
                    local
                })
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("benchmark thread panicked")).collect()
    });
    LatencyStats::from_samples(samples, threads, started.elapsed().as_secs_f64())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    #[test]
    fn every_query_runs_once() {
        let seen: Vec<AtomicUsize> = (0..101).map(|_| AtomicUsize::new(0)).collect();
        let stats = measure(4, 101, |i| {
            seen[i].fetch_add(1, Ordering::Relaxed);
        })
        .unwrap();
        assert_eq!(stats.count, 101);
        assert_eq!(stats.threads, 4);
        assert!(seen.iter().all(|c| c.load(Ordering::Relaxed) == 1));
        assert!(stats.p50_ms <= stats.p95_ms && stats.p95_ms <= stats.p99_ms);
        assert!(measure(1, 0, |_| {}).is_none());
    }
}
