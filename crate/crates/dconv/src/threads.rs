//! OS-thread executor for the core crate's worker model.

use dconv_core::Parallel;

/// Runs each logical worker on its own scoped OS thread; worker 0 runs on
/// the calling thread.
#[derive(Debug, Clone, Copy, Default)]
pub struct ScopedThreads;

impl Parallel for ScopedThreads {
    fn run(&self, workers: usize, job: &(dyn Fn(usize) + Sync)) {
        if workers <= 1 {
            (0..workers).for_each(job);
            return;
        }
        std::thread::scope(|scope| {
            for worker in 1..workers {
                scope.spawn(move || job(worker));
            }
            job(0);
        });
    }
}
