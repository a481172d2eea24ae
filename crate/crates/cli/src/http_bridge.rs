//! Bridge transport over HTTP: each request line is POSTed to the adapter's
//! URL and the response body is the reply line.

use std::io::{BufRead, BufReader};

use alforge_core::detector::bridge::{BridgeError, StdioTransport, Transport};

pub struct HttpTransport {
    agent: ureq::Agent,
    url: String,
}

impl HttpTransport {
    pub fn new(url: impl Into<String>) -> Self {
        Self {
            agent: ureq::Agent::new_with_defaults(),
            url: url.into(),
        }
    }
}

impl Transport for HttpTransport {
    fn exchange(&mut self, request: &str) -> Result<String, BridgeError> {
        let mut resp = self
            .agent
            .post(&self.url)
            .header("content-type", "application/x-ndjson")
            .send(request)
            .map_err(|e| BridgeError::Transport(e.to_string()))?;
        let body = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| BridgeError::Transport(e.to_string()))?;
        if body.trim().is_empty() {
            return Err(BridgeError::Closed);
        }
        Ok(body)
    }
}

/// Either transport, chosen from the adapter spec: URLs go over HTTP,
/// anything else is a shell command spoken to over stdio.
pub enum AnyTransport {
    Stdio(StdioTransport),
    Http(HttpTransport),
}

impl AnyTransport {
    pub fn open(adapter: &str) -> Result<Self, BridgeError> {
        if adapter.starts_with("http://") || adapter.starts_with("https://") {
            Ok(Self::Http(HttpTransport::new(adapter)))
        } else {
            Ok(Self::Stdio(StdioTransport::spawn(adapter)?))
        }
    }
}

impl Transport for AnyTransport {
    fn exchange(&mut self, request: &str) -> Result<String, BridgeError> {
        match self {
            Self::Stdio(t) => t.exchange(request),
            Self::Http(t) => t.exchange(request),
        }
    }
}

/// Read the `listening on ADDR` line a freshly started HTTP adapter prints.
pub fn read_listen_line(out: impl std::io::Read) -> std::io::Result<String> {
    let mut line = String::new();
    BufReader::new(out).read_line(&mut line)?;
    line.trim()
        .strip_prefix("listening on ")
        .map(|a| format!("http://{a}/"))
        .ok_or_else(|| std::io::Error::other(format!("unexpected adapter banner {line:?}")))
}
