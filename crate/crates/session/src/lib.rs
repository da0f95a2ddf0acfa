//! HTTP session service: runs agent episodes as pausable sessions, streams
//! their steps, and lets a human rewrite a thought and continue from it.
//!
//! Edits never mutate history. Each edit forks a new branch from the
//! edited prefix and the old branch stays readable.

pub mod http;
pub mod model;
pub mod service;

pub use http::{router, serve};
pub use model::*;
pub use service::{ServiceConfig, Session, SessionError, Store};
