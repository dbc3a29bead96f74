//! Problem definitions, experiment runners, and CSV output behind the
//! `rkadjoint` benchmark binary. Split out as a library so the integration
//! and acceptance tests can drive the same code paths the binary uses.

pub mod csvout;
pub mod problems;
pub mod randtape;
pub mod runners;
