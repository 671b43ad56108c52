//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature the helpers fan work out on rayon's global
//! pool; without it (or after [`set_execution`]`(Execution::Sequential)`)
//! they run the same work items in index order on the calling thread. Work
//! is always partitioned by problem shape, never by thread count, and every
//! floating-point reduction stays inside a single work item, so both modes
//! produce bit-identical results.

use std::sync::atomic::{AtomicBool, Ordering};

use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    Parallel,
}

static FORCE_SEQUENTIAL: AtomicBool = AtomicBool::new(false);

/// Selects the execution mode for all subsequent kernel calls in this
/// process. `Parallel` is a no-op request when the crate was built without
/// the `parallel` feature.
pub fn set_execution(mode: Execution) {
    FORCE_SEQUENTIAL.store(mode == Execution::Sequential, Ordering::SeqCst);
}

pub fn execution() -> Execution {
    if cfg!(feature = "parallel") && !FORCE_SEQUENTIAL.load(Ordering::SeqCst) {
        Execution::Parallel
    } else {
        Execution::Sequential
    }
}

/// `(0..n).map(f).collect()`, possibly in parallel.
pub fn map_indices<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if execution() == Execution::Parallel {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Calls `f(chunk_index, chunk)` for each `chunk_len`-sized piece of `data`.
pub fn for_each_chunk<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    assert!(chunk_len > 0, "chunk length must be positive");
    #[cfg(feature = "parallel")]
    if execution() == Execution::Parallel {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    data.chunks_mut(chunk_len)
        .enumerate()
        .for_each(|(i, c)| f(i, c));
}

/// Read-only strided view of a row-major-addressable matrix.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a, T> MatRef<'a, T> {
    pub fn row_major(data: &'a [T], rows: usize, cols: usize) -> Self {
        MatRef { data, rows, cols, row_stride: cols, col_stride: 1 }
    }

    /// The transpose of a row-major `rows x cols` buffer.
    pub fn transposed(data: &'a [T], rows: usize, cols: usize) -> Self {
        MatRef { data, rows: cols, cols: rows, row_stride: 1, col_stride: cols }
    }

    fn extent(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            0
        } else {
            (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride + 1
        }
    }
}

struct SyncPtr<T>(*mut T);
unsafe impl<T: Send> Send for SyncPtr<T> {}
unsafe impl<T: Send> Sync for SyncPtr<T> {}

const GEMM_BLOCK_COLS: usize = 512;
const GEMM_BLOCK_ROWS: usize = 64;

/// `c = a * b + beta * c` with `c` a dense row-major `a.rows x b.cols`
/// buffer. The output is tiled along its longer dimension and each tile is
/// one independent GEMM over the full inner dimension.
pub(crate) fn gemm<T: Real>(a: MatRef<'_, T>, b: MatRef<'_, T>, beta: T, c: &mut [T]) {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert_eq!(k, b.rows, "gemm inner dimension mismatch");
    assert!(a.extent() <= a.data.len() && b.extent() <= b.data.len());
    assert_eq!(c.len(), m * n, "gemm output buffer has wrong length");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }

    let split_cols = n >= m;
    let (extent, block) = if split_cols { (n, GEMM_BLOCK_COLS) } else { (m, GEMM_BLOCK_ROWS) };
    let tiles = extent.div_ceil(block);
    let cptr = SyncPtr(c.as_mut_ptr());
    let run_tile = |t: usize| {
        let start = t * block;
        let len = block.min(extent - start);
        let cp = &cptr;
        // SAFETY: bounds were checked above; tiles write disjoint regions of `c`.
        unsafe {
            if split_cols {
                T::gemm_raw(
                    m, k, len,
                    a.data.as_ptr(), a.row_stride as isize, a.col_stride as isize,
                    b.data.as_ptr().add(start * b.col_stride), b.row_stride as isize, b.col_stride as isize,
                    beta,
                    cp.0.add(start), n as isize, 1,
                );
            } else {
                T::gemm_raw(
                    len, k, n,
                    a.data.as_ptr().add(start * a.row_stride), a.row_stride as isize, a.col_stride as isize,
                    b.data.as_ptr(), b.row_stride as isize, b.col_stride as isize,
                    beta,
                    cp.0.add(start * n), n as isize, 1,
                );
            }
        }
    };

    #[cfg(feature = "parallel")]
    if execution() == Execution::Parallel && tiles > 1 {
        use rayon::prelude::*;
        (0..tiles).into_par_iter().for_each(run_tile);
        return;
    }
    (0..tiles).for_each(run_tile);
}
