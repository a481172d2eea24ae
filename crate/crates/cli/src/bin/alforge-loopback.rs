//! Reference bridge adapter wrapping the simulator. Speaks over stdio by
//! default, or over HTTP with `--listen ADDR`. `--fault` corrupts replies so
//! the engine's error paths can be exercised.

use std::io::{self, BufRead, Write};
use std::net::TcpListener;
use std::process::ExitCode;
use std::sync::{Arc, Mutex};

use alforge_core::detector::bridge::{handle_line, LoopbackAdapter};
use alforge_core::detector::SimParams;
use axum::routing::post;
use axum::Router;
use clap::{Parser, ValueEnum};
use serde_json::Value;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Fault {
    /// Reply with a different protocol version.
    Version,
    /// Reply with an unknown message kind.
    Kind,
    /// Drop required payload fields.
    Schema,
    /// Report detection confidences above 1.
    Confidence,
}

#[derive(Debug, Parser)]
#[command(name = "alforge-loopback", about = "Bridge adapter backed by the built-in simulator")]
struct Args {
    /// Serve HTTP on this address instead of stdio; prints `listening on ADDR`.
    #[arg(long)]
    listen: Option<String>,
    #[arg(long, value_enum)]
    fault: Option<Fault>,
}

fn corrupt(line: String, fault: Option<Fault>) -> String {
    let Some(fault) = fault else { return line };
    let mut v: Value = serde_json::from_str(&line).expect("adapter replies are JSON");
    match fault {
        Fault::Version => v["version"] = Value::from("alforge-bridge/0"),
        Fault::Kind => v["kind"] = Value::from("bogus"),
        Fault::Schema => v["payload"] = Value::Object(Default::default()),
        Fault::Confidence => {
            if let Some(dets) = v.pointer_mut("/payload/detections").and_then(Value::as_array_mut) {
                for d in dets {
                    d["confidence"] = Value::from(1.5);
                }
            }
        }
    }
    v.to_string()
}

fn reply(adapter: &mut LoopbackAdapter, line: &str, fault: Option<Fault>) -> String {
    corrupt(handle_line(adapter, line).to_line(), fault)
}

fn serve_stdio(fault: Option<Fault>) -> io::Result<()> {
    let mut adapter = LoopbackAdapter::new(SimParams::default());
    let stdin = io::stdin();
    let mut out = io::stdout().lock();
    for line in stdin.lock().lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        writeln!(out, "{}", reply(&mut adapter, &line, fault))?;
        out.flush()?;
    }
    Ok(())
}

fn serve_http(addr: &str, fault: Option<Fault>) -> io::Result<()> {
    let listener = TcpListener::bind(addr)?;
    listener.set_nonblocking(true)?;
    println!("listening on {}", listener.local_addr()?);
    io::stdout().flush()?;
    let adapter = Arc::new(Mutex::new(LoopbackAdapter::new(SimParams::default())));
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        let app = Router::new().route(
            "/",
            post(move |body: String| {
                let adapter = adapter.clone();
                async move {
                    tokio::task::spawn_blocking(move || {
                        let mut a = adapter.lock().unwrap_or_else(|p| p.into_inner());
                        let mut out = String::new();
                        for line in body.lines().filter(|l| !l.trim().is_empty()) {
                            out.push_str(&reply(&mut a, line, fault));
                            out.push('\n');
                        }
                        out
                    })
                    .await
                    .unwrap_or_default()
                }
            }),
        );
        axum::serve(tokio::net::TcpListener::from_std(listener)?, app).await
    })
}

fn main() -> ExitCode {
    let args = Args::parse();
    let result = match &args.listen {
        Some(addr) => serve_http(addr, args.fault),
        None => serve_stdio(args.fault),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
