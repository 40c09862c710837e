//! Blockchain-tree ledger for patient health records and access audit logs.
//!
//! A main chain of identity blocks anchors, per patient, a medical-record
//! subchain and an access-log subchain whose blocks cross-hash all three
//! chains. A deterministic simulated network of approved nodes confirms new
//! blocks by quorum and repairs tampered replicas by majority.

pub mod blocks;
pub mod ledger;
pub mod merkle;
pub mod net;
pub mod store;

pub use merkle::Digest;
