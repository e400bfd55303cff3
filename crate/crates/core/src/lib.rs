pub mod attention;
pub mod autodiff;
pub mod cli;
pub mod decoder;
pub mod error;
pub mod inference;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod networks;
pub mod nn;
pub mod optim;
pub mod patches;
pub mod tensor;

pub use autodiff::{Graph, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;

/// Runs `f` on a dedicated pool of `threads` workers. Results do not depend
/// on the thread count.
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}
