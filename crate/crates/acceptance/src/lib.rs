// Re-exported so the acceptance tests build against the double-precision feature set.
pub use aggnet::*;
