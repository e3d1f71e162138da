//! Spiking salient-object detection on spike-camera streams.

pub mod cli;
pub mod data;
pub mod grad;
pub mod metrics;
pub mod neuro;
pub mod objective;
pub mod rst;
pub mod simcam;
pub mod spikeio;
pub mod train;

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "SPIKESAL_THREADS";

/// Rayon pool sized by `SPIKESAL_THREADS` (rayon's default when unset or 0).
pub fn worker_pool() -> rayon::ThreadPool {
    let n = std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse::<usize>().ok()).unwrap_or(0);
    rayon::ThreadPoolBuilder::new().num_threads(n).build().expect("thread pool")
}
