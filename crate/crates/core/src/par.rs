//! Row-parallel dispatch.
//!
//! Every parallel loop in the crate partitions its *output* into disjoint
//! rows and computes each row with a fixed sequential reduction order, so the
//! parallel and sequential paths are bit-identical.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Execution mode for the row-parallel kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    /// Falls back to [`Exec::Sequential`] when the `parallel` feature is off.
    Parallel,
}

impl Default for Exec {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }
}

/// Below this many output elements the rayon split costs more than it saves.
#[cfg(feature = "parallel")]
const MIN_PAR_ELEMS: usize = 4096;

/// Calls `f(row_index, row)` for each `row_len`-sized chunk of `out`.
pub fn rows_mut<F>(exec: Exec, out: &mut [f32], row_len: usize, f: F)
where
    F: Fn(usize, &mut [f32]) + Send + Sync,
{
    if row_len == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    if exec == Exec::Parallel && out.len() >= MIN_PAR_ELEMS {
        out.par_chunks_mut(row_len)
            .enumerate()
            .for_each(|(i, r)| f(i, r));
        return;
    }
    let _ = exec;
    out.chunks_mut(row_len).enumerate().for_each(|(i, r)| f(i, r));
}

/// Like [`rows_mut`] over three outputs chunked in lockstep.
pub fn rows_mut3<F>(
    exec: Exec,
    a: &mut [f32],
    b: &mut [f32],
    c: &mut [f32],
    row_len: usize,
    f: F,
) where
    F: Fn(usize, &mut [f32], &mut [f32], &mut [f32]) + Send + Sync,
{
    if row_len == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    if exec == Exec::Parallel && a.len() >= MIN_PAR_ELEMS {
        a.par_chunks_mut(row_len)
            .zip(b.par_chunks_mut(row_len))
            .zip(c.par_chunks_mut(row_len))
            .enumerate()
            .for_each(|(i, ((x, y), z))| f(i, x, y, z));
        return;
    }
    let _ = exec;
    a.chunks_mut(row_len)
        .zip(b.chunks_mut(row_len))
        .zip(c.chunks_mut(row_len))
        .enumerate()
        .for_each(|(i, ((x, y), z))| f(i, x, y, z));
}

/// Maps independent jobs, preserving input order in the output.
pub fn map_jobs<T, R, F>(exec: Exec, jobs: Vec<T>, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Send + Sync,
{
    #[cfg(feature = "parallel")]
    if exec == Exec::Parallel {
        return jobs.into_par_iter().map(f).collect();
    }
    let _ = exec;
    jobs.into_iter().map(f).collect()
}

/// Runs `f` with at most `threads` rayon workers (0 keeps the global pool).
pub fn with_threads<R, F>(threads: usize, f: F) -> R
where
    R: Send,
    F: FnOnce() -> R + Send,
{
    #[cfg(feature = "parallel")]
    if threads > 0 {
        if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
            return pool.install(f);
        }
    }
    let _ = threads;
    f()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_agree() {
        let mut a = vec![0.0f32; 10_000];
        let mut b = a.clone();
        let fill = |i: usize, r: &mut [f32]| {
            for (j, x) in r.iter_mut().enumerate() {
                *x = (i * 31 + j) as f32 * 0.5;
            }
        };
        rows_mut(Exec::Sequential, &mut a, 100, fill);
        rows_mut(Exec::Parallel, &mut b, 100, fill);
        assert_eq!(a, b);
    }

    #[test]
    fn map_jobs_keeps_order() {
        let out = map_jobs(Exec::Parallel, (0..50).collect(), |x: i32| x * x);
        assert_eq!(out, (0..50).map(|x| x * x).collect::<Vec<_>>());
    }
}
