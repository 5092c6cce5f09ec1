//! Desk-scale RL framework for tool-use policies: tree rollouts over a
//! synthetic tool environment, adaptive step-wise rewards, fork- and
//! trajectory-relative advantages with derived coefficients, and a clipped
//! policy-gradient optimizer, plus group-relative baselines and an
//! experiment harness.

pub mod advantage;
pub mod harness;
pub mod optimizer;
pub mod policy;
pub mod reward;
pub mod rollout;
pub mod toolenv;
pub mod vocab;
