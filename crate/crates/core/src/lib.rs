//! Quantum-key-secured networked control: key generation, ciphers, security
//! metrics, a closed-loop plant simulation and attack detection.

pub mod adversary;
pub mod bits;
pub mod cipherset;
pub mod config;
pub mod controlplant;
pub mod keysource;
pub mod loopsim;
pub mod metrics;
