//! Forward HTTP(S) proxy that anonymizes analytics requests in flight.
//!
//! Plain HTTP requests are handled directly. `CONNECT` tunnels are either
//! intercepted with a locally generated CA or relayed blindly, depending on
//! [`ProxySettings::intercept_tls`].

mod server;
pub mod tls;
pub mod upstream;

pub use server::{is_success, serve, ProxyHandle, ProxySettings, APP_HEADER, DEFAULT_APP};

#[derive(Debug, thiserror::Error)]
pub enum ProxyError {
    #[error("cannot listen on {0}")]
    Bind(String),
    #[error("tls: {0}")]
    Tls(String),
    #[error("io: {0}")]
    Io(String),
    #[error("upstream: {0}")]
    Upstream(String),
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] anonproxy_core::Error),
}
