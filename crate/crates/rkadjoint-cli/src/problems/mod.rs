//! Benchmark problem families.

pub mod glv;
pub mod heat;
pub mod vanderpol;
