pub mod auth;
pub mod clock;
pub mod curve;
pub mod field;
pub mod meter;
pub mod network;
pub mod storage;
pub mod hd;
pub mod error;
pub mod kms;
pub mod wire;
