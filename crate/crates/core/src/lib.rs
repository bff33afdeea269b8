pub mod boxgeom;
pub mod config;
pub mod diffcore;
mod error;
pub mod evalkit;
pub mod gradsuite;
pub mod minidet;
pub mod pipeline;
pub mod rotsup;
pub mod scenes;
pub mod seeding;

pub use error::{Error, Result};

pub use rayon::ThreadPool;

/// A worker pool of exactly `jobs` threads.
pub fn thread_pool(jobs: usize) -> Result<ThreadPool> {
    if jobs == 0 {
        return Err(Error::Config("jobs must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {jobs} worker threads: {e}")))
}

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/tensors.md")]
    mod tensors {}
    #[doc = include_str!("../../../book/src/geometry.md")]
    mod geometry {}
    #[doc = include_str!("../../../book/src/scenes.md")]
    mod scenes {}
    #[doc = include_str!("../../../book/src/detector.md")]
    mod detector {}
    #[doc = include_str!("../../../book/src/adaptation.md")]
    mod adaptation {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
