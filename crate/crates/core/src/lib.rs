//! Deterministic simulation of a secure UWB mesh data network.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod engine;
pub mod phy;
pub mod rng;
pub mod mac;
pub mod ranging;
pub mod adaptation;
pub mod security;
pub mod secrecy;
pub mod mesh;
pub mod network;
pub mod cli;
