//! Library surface of the pipeline driver, shared by the binary and the
//! acceptance tests.

pub mod config;
pub mod manifest;
pub mod stages;

/// Configure the global worker pool; 0 keeps the rayon default.
pub fn init_workers(workers: usize) {
    if workers > 0 {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global();
    }
}
