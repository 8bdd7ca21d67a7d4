//! Differentiable OFDM link testbench.
//!
//! The library wires a differentiable 5G-NR-like uplink simulator into two
//! receivers — a classical LS/LMMSE/max-log chain and a trainable
//! convolutional neural receiver — and searches the scenario space
//! (terminal speed, channel delay spread, noise power) by gradient descent
//! for configurations where the neural receiver underperforms the classical
//! one. A grid-search baseline, offline validation, and cost models round
//! out the test bench.
//!
//! Module map:
//! - [`tensor`]: reverse-mode autodiff over dense f64 tensors + Adam
//! - [`sim`]: signal generation and the reparameterized fading channel
//! - [`rx`]: classical receiver chain and BER surrogates
//! - [`nn`]: the neural receiver, its presets, training, persistence
//! - [`search`]: episode loop, failure trigger, scenario-space descent
//! - [`eval`]: grid baseline, validation, confusion metrics, cost model
//! - [`records`]: campaign files (line-delimited records + header)

pub mod eval;
pub mod nn;
pub mod records;
pub mod rx;
pub mod search;
pub mod seed;
pub mod sim;
pub mod tensor;
