//! Optimal data-broker mechanisms in a Hotelling retail market.
//!
//! A broker matches consumers on the unit interval with two sellers that can
//! each charge a high or a low price. The broker designs a signal scheme
//! (private price recommendations) plus participation fees, subject to
//! consumer truth-telling, participation, and seller obedience constraints.
//!
//! The crate provides:
//! - [`model`]: market primitives, purchase best responses, utilities,
//!   seller revenues and obedience slacks;
//! - [`analytic`]: closed-form optimal mechanisms for the characterized
//!   scenarios, envelope payments, and structure checkers;
//! - [`simplex`]: a self-contained dense LP engine;
//! - [`lp_oracle`]: the broker's revenue-maximization program for any finite
//!   scenario, used as the ground-truth verifier for the analytic results;
//! - [`welfare`]: welfare accounting and cross-scenario comparisons.

pub mod lp_oracle;
pub mod model;
pub mod simplex;
