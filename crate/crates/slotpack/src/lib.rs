//! Simulated RNS-CKKS inference engine for convolutional networks.
//!
//! Ciphertexts are exact slot vectors with multiplicative-level bookkeeping
//! and a per-context operation ledger. On top of the slot engine sit the
//! scalable N x N block packing, traditional and depthwise-separable
//! ciphertext convolutions, pointwise/BN fusion, Legendre polynomial
//! activations, and a network planner that places bootstraps and reports
//! estimated costs.

pub mod act;
pub mod conv;
pub mod convbn;
pub mod engine;
pub mod io;
pub mod model;
pub mod netplan;
pub mod oracle;
pub mod packing;
