//! Worker execution. The core crate owns no threads; callers supply an
//! implementation of [`Parallel`].

/// Runs `job(worker)` once for every `worker` in `0..workers`, possibly
/// concurrently, and returns when all calls have finished.
pub trait Parallel: Sync {
    fn run(&self, workers: usize, job: &(dyn Fn(usize) + Sync));
}

/// Runs every worker on the calling thread, in order.
#[derive(Debug, Clone, Copy, Default)]
pub struct Sequential;

impl Parallel for Sequential {
    fn run(&self, workers: usize, job: &(dyn Fn(usize) + Sync)) {
        (0..workers).for_each(job);
    }
}

/// Raw view of a mutable buffer shared between workers that write
/// disjoint regions.
#[derive(Debug, Clone, Copy)]
pub(crate) struct SharedMut<T> {
    ptr: *mut T,
    len: usize,
}

// SAFETY: callers guarantee that concurrent accesses are to disjoint ranges.
unsafe impl<T: Send> Send for SharedMut<T> {}
unsafe impl<T: Send> Sync for SharedMut<T> {}

impl<T> SharedMut<T> {
    pub(crate) fn new(slice: &mut [T]) -> Self {
        Self { ptr: slice.as_mut_ptr(), len: slice.len() }
    }

    pub(crate) fn len(&self) -> usize {
        self.len
    }

    pub(crate) fn ptr(&self) -> *mut T {
        self.ptr
    }

    /// # Safety
    /// No other live reference may overlap `start..start + len`.
    #[allow(clippy::mut_from_ref)]
    pub(crate) unsafe fn slice_mut(&self, start: usize, len: usize) -> &mut [T] {
        assert!(start + len <= self.len, "shared range out of bounds");
        core::slice::from_raw_parts_mut(self.ptr.add(start), len)
    }
}
