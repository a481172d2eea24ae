#![allow(dead_code)]

use std::net::TcpListener;
use std::sync::Arc;

use alforge_cli::service::{self, ServiceHandle, ServiceState};
use alforge_core::corpus::World;
use alforge_core::oracle::JobStore;
use serde_json::Value;

pub fn agent() -> ureq::Agent {
    ureq::Agent::config_builder().http_status_as_error(false).build().into()
}

pub fn start(store: Arc<JobStore>, world: World) -> ServiceHandle {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    service::spawn(
        listener,
        ServiceState {
            store,
            world: Arc::new(world),
        },
    )
    .unwrap()
}

fn parse(status: u16, text: String) -> (u16, Value) {
    let v = if text.trim().is_empty() {
        Value::Null
    } else {
        serde_json::from_str(&text).unwrap_or(Value::String(text))
    };
    (status, v)
}

pub fn get(agent: &ureq::Agent, url: &str) -> (u16, Value) {
    let mut r = agent.get(url).call().unwrap();
    let status = r.status().as_u16();
    parse(status, r.body_mut().read_to_string().unwrap())
}

pub fn post(agent: &ureq::Agent, url: &str, body: &str) -> (u16, Value) {
    let mut r = agent
        .post(url)
        .header("content-type", "application/json")
        .send(body)
        .unwrap();
    let status = r.status().as_u16();
    parse(status, r.body_mut().read_to_string().unwrap())
}

/// Like [`get`], but `None` once the server has gone away.
pub fn try_get(agent: &ureq::Agent, url: &str) -> Option<(u16, Value)> {
    let mut r = agent.get(url).call().ok()?;
    let status = r.status().as_u16();
    Some(parse(status, r.body_mut().read_to_string().ok()?))
}
