//! Environments, sessions and persistence for running reinforcement-learning
//! environments with people in the loop.
//!
//! The server answers each frame with the successor for every action, so the
//! client can render the next observation without waiting for the network.
//! [`speculation`] holds that mechanism, [`hub`] drives sessions over it, and
//! [`persistence`] records and restores them.

pub mod assistant;
pub mod codec;
pub mod env;
pub mod hub;
pub mod latency;
pub mod persistence;
pub mod protocol;
pub mod rng;
pub mod sim;
pub mod speculation;
pub mod stage;

#[cfg(doctest)]
mod guide {
    #[doc = include_str!("../../../book/src/environments.md")]
    mod environments {}
    #[doc = include_str!("../../../book/src/state-codec.md")]
    mod state_codec {}
    #[doc = include_str!("../../../book/src/speculation.md")]
    mod speculation {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
    #[doc = include_str!("../../../book/src/persistence.md")]
    mod persistence {}
    #[doc = include_str!("../../../book/src/wire-protocol.md")]
    mod wire_protocol {}
    #[doc = include_str!("../../../book/src/assistant.md")]
    mod assistant {}
    #[doc = include_str!("../../../book/src/latency.md")]
    mod latency {}
}
