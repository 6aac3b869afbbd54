//! Entropy-regularised exploratory portfolio selection: closed-form solutions,
//! policy improvement and a martingale-based actor-critic learner.

pub mod closedform_log;
pub mod closedform_quad;
pub mod error;
pub mod factor;
pub mod fmt;
pub mod improve;
pub mod learner;
pub mod market;
pub mod par;
pub mod quad;
pub mod stats;

pub use error::{Error, Result};
pub use market::MarketParams;
