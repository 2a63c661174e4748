//! Prototype-distance classification with label-wise attention for
//! extreme multi-label text.
//!
//! A document is encoded into contextual token vectors, pooled once per
//! label by a learned attention vector, and scored by its Euclidean
//! distance to a learned per-label prototype. The crate also carries the
//! pieces needed around that model: corpus handling, ranking metrics,
//! exemplar retrieval and saliency faithfulness evaluation.

pub mod corpus;
pub mod encoder;
pub mod error;
pub mod explain;
pub mod metrics;
pub mod params;
pub mod presets;
pub mod protonet;
mod real;

pub use error::{Error, Result};
pub use real::Real;

/// Environment variable capping worker parallelism.
pub const THREADS_ENV: &str = "PROTODX_THREADS";

/// Builds a rayon pool honouring `PROTODX_THREADS`.
///
/// Gradient and metric reductions are always performed in document order,
/// so results do not depend on the thread count.
pub fn thread_pool() -> rayon::ThreadPool {
    let threads = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(0);
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .expect("thread pool")
}
