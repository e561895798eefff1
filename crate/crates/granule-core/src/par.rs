//! Data-parallel loop helpers.
//!
//! With the `parallel` feature (default) these fan out over rayon's thread
//! pool; without it they degrade to plain sequential loops. Every call site
//! writes disjoint output regions and keeps each element's reduction order
//! fixed, so the two builds — and repeated runs of either — produce
//! bit-identical floats.

/// Apply `f` to consecutive `chunk`-sized pieces of `data`, passing the
/// chunk index. The final chunk may be shorter.
pub fn for_each_chunk_mut<E, F>(data: &mut [E], chunk: usize, f: F)
where
    E: Send,
    F: Fn(usize, &mut [E]) + Sync + Send,
{
    debug_assert!(chunk > 0);
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(index, slice)| f(index, slice));
    }
    #[cfg(not(feature = "parallel"))]
    {
        for (index, slice) in data.chunks_mut(chunk).enumerate() {
            f(index, slice);
        }
    }
}

/// Map `f` over `items`, preserving order.
pub fn map_items<I, O, F>(items: &[I], f: F) -> Vec<O>
where
    I: Sync,
    O: Send,
    F: Fn(&I) -> O + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

/// Map `f` over `0..n`, preserving order.
pub fn map_range<O, F>(n: usize, f: F) -> Vec<O>
where
    O: Send,
    F: Fn(usize) -> O + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunk_indices_line_up() {
        let mut data = vec![0usize; 10];
        for_each_chunk_mut(&mut data, 4, |index, slice| {
            for value in slice.iter_mut() {
                *value = index;
            }
        });
        assert_eq!(data, vec![0, 0, 0, 0, 1, 1, 1, 1, 2, 2]);
    }

    #[test]
    fn map_preserves_order() {
        let doubled = map_items(&[1, 2, 3], |x| x * 2);
        assert_eq!(doubled, vec![2, 4, 6]);
        assert_eq!(map_range(4, |i| i * i), vec![0, 1, 4, 9]);
    }
}
