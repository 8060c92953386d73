use std::thread;

pub const THREADS_ENV: &str = "CHATPAINTER_THREADS";

/// Worker count: `CHATPAINTER_THREADS` if set to a positive integer,
/// otherwise the available parallelism.
pub fn worker_threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Applies `f` to consecutive chunks of `items` on up to `worker_threads()`
/// threads and concatenates the results in input order.
pub fn map_chunks<I, O, F>(items: &[I], chunk: usize, f: F) -> Vec<O>
where
    I: Sync,
    O: Send,
    F: Fn(&[I]) -> Vec<O> + Sync,
{
    let chunks: Vec<&[I]> = items.chunks(chunk.max(1)).collect();
    let workers = worker_threads().min(chunks.len()).max(1);
    if workers == 1 {
        return chunks.into_iter().flat_map(&f).collect();
    }
    let mut results: Vec<Vec<O>> = Vec::with_capacity(chunks.len());
    for group in chunks.chunks(workers) {
        let outs: Vec<Vec<O>> = thread::scope(|scope| {
            let handles: Vec<_> = group.iter().map(|c| scope.spawn(|| f(c))).collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("worker panicked"))
                .collect()
        });
        results.extend(outs);
    }
    results.into_iter().flatten().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preserves_order() {
        let items: Vec<u32> = (0..103).collect();
        let out = map_chunks(&items, 10, |c| c.iter().map(|v| v * 2).collect());
        assert_eq!(out, items.iter().map(|v| v * 2).collect::<Vec<_>>());
    }
}
