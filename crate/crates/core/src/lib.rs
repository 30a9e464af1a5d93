pub mod capture;
pub mod features;
pub mod localize;
pub mod macclust;
pub mod simulate;
pub mod tracing;
