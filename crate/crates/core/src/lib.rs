//! Detection and anonymization of third-party analytics traffic.
//!
//! The crate is organised as a pipeline:
//!
//! ```text
//! request ─► detector ─► codec::decode ─► generalizer ─► dp ─► codec::encode ─► upstream
//!               │                                                  ▲
//!               └──────────── non-analytics: forwarded as is ──────┘
//! ```
//!
//! [`pipeline::Pipeline`] wires the stages together and is shared by the
//! live proxy and the offline replay harness.

pub mod codec;
pub mod config;
pub mod corpus;
pub mod detector;
pub mod dp;
pub mod error;
pub mod evaluator;
pub mod generalizer;
pub mod model;
pub mod pipeline;
pub mod replay;
pub mod request;

pub use error::{Error, Result};
pub use request::{ParsedRequest, RequestUrl};
pub use model::{
    AnalyticsEvent, AnonymizationAction, AppHostKey, AttributeClass, Attributes, PrivacyLevel,
    Value,
};
