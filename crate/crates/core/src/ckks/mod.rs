//! Leveled RLWE backend with approximate (CKKS-style) slot encoding.

pub mod arith;
pub mod encoding;
pub mod context;
pub mod backend;
pub mod serial;

pub use backend::{CkksBackend, CkksCiphertext, CkksSecretKey};
pub use context::{CkksParams, Context};
