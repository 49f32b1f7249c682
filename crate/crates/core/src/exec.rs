//! Data-parallel map over independent work items.
//!
//! With the `parallel` feature the work is spread over the rayon pool;
//! without it, or with [`ExecMode::Sequential`], it runs in index order.
//! Results are always returned in index order, so the reduction that follows
//! is identical in both modes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExecMode {
    #[default]
    Parallel,
    Sequential,
}

pub fn map_indexed<T, F>(n: usize, mode: ExecMode, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match mode {
        ExecMode::Parallel => par_map(n, f),
        ExecMode::Sequential => (0..n).map(f).collect(),
    }
}

#[cfg(feature = "parallel")]
fn par_map<T: Send, F: Fn(usize) -> T + Sync + Send>(n: usize, f: F) -> Vec<T> {
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn par_map<T: Send, F: Fn(usize) -> T + Sync + Send>(n: usize, f: F) -> Vec<T> {
    (0..n).map(f).collect()
}

pub fn parallel_available() -> bool {
    cfg!(feature = "parallel")
}

/// Caps the global worker pool. Only the first call has an effect.
pub fn set_threads(threads: usize) -> Result<()> {
    if threads == 0 {
        return Err(Error::InvalidArgument("thread count must be positive".into()));
    }
    #[cfg(feature = "parallel")]
    {
        if rayon::ThreadPoolBuilder::new().num_threads(threads).build_global().is_err() {
            log::debug!("worker pool already initialised; --threads ignored");
        }
    }
    Ok(())
}
