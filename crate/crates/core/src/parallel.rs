//! Order-preserving chunked map, threaded when the `parallel` feature is on.
//!
//! Work is split into fixed-size chunks and results come back in input
//! order, so any reduction the caller does over them is the same sequence of
//! floating-point operations whether or not threads were used.

/// `f` applied to consecutive `chunk`-sized slices of `items`.
pub fn map_chunks<I, R, F>(items: &[I], chunk: usize, parallel: bool, f: F) -> Vec<R>
where
    I: Sync,
    R: Send,
    F: Fn(&[I]) -> R + Sync + Send,
{
    let chunk = chunk.max(1);
    #[cfg(feature = "parallel")]
    if parallel {
        use rayon::prelude::*;
        return items.par_chunks(chunk).map(&f).collect();
    }
    let _ = parallel;
    items.chunks(chunk).map(f).collect()
}

/// Whether this build can use worker threads at all.
pub const fn available() -> bool {
    cfg!(feature = "parallel")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn serial_and_parallel_agree_in_order() {
        let items: Vec<u32> = (0..103).collect();
        let f = |c: &[u32]| c.iter().map(|&x| x as f64 * 0.1).sum::<f64>();
        let a = map_chunks(&items, 4, false, f);
        let b = map_chunks(&items, 4, true, f);
        assert_eq!(a, b);
        assert_eq!(a.len(), 26);
    }

    #[test]
    fn empty_input_gives_no_chunks() {
        assert!(map_chunks::<u8, u8, _>(&[], 3, true, |_| 0).is_empty());
    }
}
