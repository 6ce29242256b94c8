//! Selective state-space layers: discretization, sequential and associative
//! scans, and the gated Mamba-style residual block.

mod block;
pub mod scan;

pub use block::{MambaBlock, SsmConfig};
pub use scan::{discretize, selective_scan_parallel, selective_scan_sequential, ScanDims, ScanInputs};
