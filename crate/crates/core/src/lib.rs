pub mod course;
pub mod dynamics;
pub mod error;
pub mod riskmodel;
pub mod policy;
pub mod mle;
pub mod data;
pub mod eval;
