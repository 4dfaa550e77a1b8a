//! Per-image job execution: a rayon pool when the `parallel` feature is on,
//! a plain loop otherwise. Output order always matches input order.

use std::num::NonZeroUsize;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    /// Rayon's global pool.
    #[default]
    Parallel,
    /// A dedicated pool with a fixed worker count.
    Workers(NonZeroUsize),
}

impl Execution {
    /// `0` means all cores, `1` means sequential.
    pub fn from_workers(workers: usize) -> Self {
        match workers {
            0 => Execution::Parallel,
            1 => Execution::Sequential,
            n => Execution::Workers(NonZeroUsize::new(n).unwrap()),
        }
    }

    pub fn map<T, U, F>(self, items: &[T], f: F) -> Vec<U>
    where
        T: Sync,
        U: Send,
        F: Fn(&T) -> U + Sync + Send,
    {
        match self {
            Execution::Sequential => items.iter().map(f).collect(),
            #[cfg(feature = "parallel")]
            Execution::Parallel => {
                use rayon::prelude::*;
                items.par_iter().map(f).collect()
            }
            #[cfg(feature = "parallel")]
            Execution::Workers(n) => {
                use rayon::prelude::*;
                match rayon::ThreadPoolBuilder::new().num_threads(n.get()).build() {
                    Ok(pool) => pool.install(|| items.par_iter().map(f).collect()),
                    Err(_) => items.iter().map(f).collect(),
                }
            }
            #[cfg(not(feature = "parallel"))]
            _ => items.iter().map(f).collect(),
        }
    }

    pub fn map_indices<U, F>(self, count: usize, f: F) -> Vec<U>
    where
        U: Send,
        F: Fn(usize) -> U + Sync + Send,
    {
        let idx: Vec<usize> = (0..count).collect();
        self.map(&idx, |&i| f(i))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_agree_and_keep_order() {
        let items: Vec<u64> = (0..257).collect();
        let f = |x: &u64| x * x + 1;
        let seq = Execution::Sequential.map(&items, f);
        assert_eq!(seq, Execution::Parallel.map(&items, f));
        assert_eq!(seq, Execution::from_workers(3).map(&items, f));
        assert_eq!(seq[10], 101);
    }

    #[test]
    fn worker_count_mapping() {
        assert_eq!(Execution::from_workers(0), Execution::Parallel);
        assert_eq!(Execution::from_workers(1), Execution::Sequential);
        assert!(matches!(Execution::from_workers(4), Execution::Workers(n) if n.get() == 4));
    }
}
