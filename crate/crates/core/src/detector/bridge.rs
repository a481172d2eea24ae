//! `alforge-bridge/1`: a strict request/response protocol letting an external
//! process (a real detector trainer, say) stand in for the simulator.
//!
//! Every message is one JSON object on one line:
//!
//! ```text
//! {"version":"alforge-bridge/1","kind":"predict_request","payload":{"image_ids":[4,9],"iteration":2}}
//! ```
//!
//! The engine sends `handshake`, `fit_request` and `predict_request`; the
//! adapter answers with `handshake`, `fit_done` and `predict_response`
//! respectively, or with `error`. Fit requests name a world manifest whose
//! `train` records form the full cumulative training set. Detections are in
//! tile-frame pixels.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use super::{Detector, DetectorError, FitSummary, SimParams, SimulatedDetector};
use crate::corpus::{generate_world, load_world, persist_world, ManifestError, World, WorldConfig};
use crate::geometry::{Detection, ImageId};

pub const BRIDGE_VERSION: &str = "alforge-bridge/1";

#[derive(Debug, Error)]
pub enum BridgeError {
    #[error("version mismatch: expected {expected:?}, got {got:?}")]
    VersionMismatch { expected: String, got: String },
    #[error("bad kind {0:?}")]
    BadKind(String),
    #[error("unexpected reply kind: expected {expected}, got {got}")]
    UnexpectedKind { expected: &'static str, got: &'static str },
    #[error("schema violation: {0}")]
    Schema(String),
    #[error("adapter reported error: {0}")]
    Adapter(String),
    #[error("adapter closed the stream")]
    Closed,
    #[error("bridge io: {0}")]
    Io(#[from] io::Error),
    #[error("bridge transport: {0}")]
    Transport(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Handshake {
    /// `engine` or `adapter`.
    pub role: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    /// Run seed, sent by the engine so seeded adapters can reproduce runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitRequest {
    pub manifest: PathBuf,
    pub iteration: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitDone {
    pub images: usize,
    pub annotations: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictRequest {
    pub image_ids: Vec<ImageId>,
    pub iteration: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictResponse {
    pub detections: Vec<Detection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErrorPayload {
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum BridgeBody {
    Handshake(Handshake),
    FitRequest(FitRequest),
    FitDone(FitDone),
    PredictRequest(PredictRequest),
    PredictResponse(PredictResponse),
    Error(ErrorPayload),
}

impl BridgeBody {
    pub fn kind(&self) -> &'static str {
        match self {
            BridgeBody::Handshake(_) => "handshake",
            BridgeBody::FitRequest(_) => "fit_request",
            BridgeBody::FitDone(_) => "fit_done",
            BridgeBody::PredictRequest(_) => "predict_request",
            BridgeBody::PredictResponse(_) => "predict_response",
            BridgeBody::Error(_) => "error",
        }
    }
}

const KINDS: [&str; 6] = [
    "handshake",
    "fit_request",
    "fit_done",
    "predict_request",
    "predict_response",
    "error",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BridgeMessage {
    pub version: String,
    #[serde(flatten)]
    pub body: BridgeBody,
}

impl BridgeMessage {
    pub fn new(body: BridgeBody) -> Self {
        Self {
            version: BRIDGE_VERSION.to_string(),
            body,
        }
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("bridge messages serialize")
    }

    /// Parse one line, checking version, then kind, then payload shape.
    pub fn parse(line: &str) -> Result<Self, BridgeError> {
        let value: Value =
            serde_json::from_str(line.trim()).map_err(|e| BridgeError::Schema(format!("not JSON: {e}")))?;
        let obj = value
            .as_object()
            .ok_or_else(|| BridgeError::Schema("message is not an object".into()))?;
        match obj.get("version") {
            None => return Err(BridgeError::Schema("missing version field".into())),
            Some(Value::String(v)) if v == BRIDGE_VERSION => {}
            Some(other) => {
                return Err(BridgeError::VersionMismatch {
                    expected: BRIDGE_VERSION.into(),
                    got: other.as_str().map(String::from).unwrap_or_else(|| other.to_string()),
                })
            }
        }
        match obj.get("kind").and_then(Value::as_str) {
            Some(k) if KINDS.contains(&k) => {}
            Some(k) => return Err(BridgeError::BadKind(k.to_string())),
            None => return Err(BridgeError::Schema("missing kind field".into())),
        }
        let msg: BridgeMessage = serde_json::from_value(value).map_err(|e| BridgeError::Schema(e.to_string()))?;
        msg.validate()?;
        Ok(msg)
    }

    fn validate(&self) -> Result<(), BridgeError> {
        if let BridgeBody::PredictResponse(r) = &self.body {
            if let Some(d) = r.detections.iter().find(|d| !(0.0..=1.0).contains(&d.confidence)) {
                return Err(BridgeError::Schema(format!(
                    "detection on image {} has confidence {} outside [0, 1]",
                    d.image_id, d.confidence
                )));
            }
        }
        Ok(())
    }
}

/// One request line out, one reply line back.
pub trait Transport {
    fn exchange(&mut self, request: &str) -> Result<String, BridgeError>;
}

/// Talks to a child process over its standard streams.
pub struct StdioTransport {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

impl StdioTransport {
    /// Spawn `command` through `sh -c`.
    pub fn spawn(command: &str) -> Result<Self, BridgeError> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(Self { child, stdin, stdout })
    }
}

impl Transport for StdioTransport {
    fn exchange(&mut self, request: &str) -> Result<String, BridgeError> {
        self.stdin.write_all(request.as_bytes())?;
        self.stdin.write_all(b"\n")?;
        self.stdin.flush()?;
        let mut line = String::new();
        if self.stdout.read_line(&mut line)? == 0 {
            return Err(BridgeError::Closed);
        }
        Ok(line)
    }
}

impl Drop for StdioTransport {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Engine side of the protocol.
pub struct BridgeClient<T> {
    transport: T,
}

impl<T: Transport> BridgeClient<T> {
    pub fn new(transport: T) -> Self {
        Self { transport }
    }

    fn call(&mut self, body: BridgeBody) -> Result<BridgeBody, BridgeError> {
        let reply = self.transport.exchange(&BridgeMessage::new(body).to_line())?;
        let msg = BridgeMessage::parse(&reply)?;
        if let BridgeBody::Error(e) = msg.body {
            return Err(BridgeError::Adapter(e.message));
        }
        Ok(msg.body)
    }

    /// Returns the adapter's name.
    pub fn handshake(&mut self, seed: u64) -> Result<String, BridgeError> {
        match self.call(BridgeBody::Handshake(Handshake {
            role: "engine".into(),
            name: None,
            seed: Some(seed),
        }))? {
            BridgeBody::Handshake(h) if h.role == "adapter" => Ok(h.name.unwrap_or_else(|| "adapter".into())),
            BridgeBody::Handshake(h) => Err(BridgeError::Schema(format!(
                "handshake role {:?}, expected \"adapter\"",
                h.role
            ))),
            other => Err(BridgeError::UnexpectedKind {
                expected: "handshake",
                got: other.kind(),
            }),
        }
    }

    pub fn fit(&mut self, manifest: &Path, iteration: u32) -> Result<FitDone, BridgeError> {
        match self.call(BridgeBody::FitRequest(FitRequest {
            manifest: manifest.to_path_buf(),
            iteration,
        }))? {
            BridgeBody::FitDone(d) => Ok(d),
            other => Err(BridgeError::UnexpectedKind {
                expected: "fit_done",
                got: other.kind(),
            }),
        }
    }

    /// Detections grouped by image; every requested id gets an entry and
    /// detections for unrequested ids are a schema violation.
    pub fn predict(
        &mut self,
        ids: &[ImageId],
        iteration: u32,
    ) -> Result<BTreeMap<ImageId, Vec<Detection>>, BridgeError> {
        let dets = match self.call(BridgeBody::PredictRequest(PredictRequest {
            image_ids: ids.to_vec(),
            iteration,
        }))? {
            BridgeBody::PredictResponse(r) => r.detections,
            other => {
                return Err(BridgeError::UnexpectedKind {
                    expected: "predict_response",
                    got: other.kind(),
                })
            }
        };
        let mut out: BTreeMap<ImageId, Vec<Detection>> = ids.iter().map(|&id| (id, Vec::new())).collect();
        for d in dets {
            out.get_mut(&d.image_id)
                .ok_or_else(|| BridgeError::Schema(format!("detection for unrequested image {}", d.image_id)))?
                .push(d);
        }
        Ok(out)
    }
}

/// Adapter side: what an external detector implements.
pub trait AdapterHandler {
    fn name(&self) -> String;
    fn handshake(&mut self, hello: &Handshake) -> Result<(), String>;
    fn fit(&mut self, req: &FitRequest) -> Result<FitDone, String>;
    fn predict(&mut self, req: &PredictRequest) -> Result<Vec<Detection>, String>;
}

/// Produce the reply to one request line. Protocol errors become `error`
/// messages; the adapter keeps serving.
pub fn handle_line(handler: &mut impl AdapterHandler, line: &str) -> BridgeMessage {
    let reply = match BridgeMessage::parse(line) {
        Err(e) => BridgeBody::Error(ErrorPayload { message: e.to_string() }),
        Ok(msg) => match msg.body {
            BridgeBody::Handshake(h) => match handler.handshake(&h) {
                Ok(()) => BridgeBody::Handshake(Handshake {
                    role: "adapter".into(),
                    name: Some(handler.name()),
                    seed: None,
                }),
                Err(message) => BridgeBody::Error(ErrorPayload { message }),
            },
            BridgeBody::FitRequest(r) => match handler.fit(&r) {
                Ok(done) => BridgeBody::FitDone(done),
                Err(message) => BridgeBody::Error(ErrorPayload { message }),
            },
            BridgeBody::PredictRequest(r) => match handler.predict(&r) {
                Ok(detections) => BridgeBody::PredictResponse(PredictResponse { detections }),
                Err(message) => BridgeBody::Error(ErrorPayload { message }),
            },
            other => BridgeBody::Error(ErrorPayload {
                message: format!("adapter does not accept {}", other.kind()),
            }),
        },
    };
    BridgeMessage::new(reply)
}

/// Serve requests from `input` until end of stream.
pub fn serve_adapter(handler: &mut impl AdapterHandler, input: impl BufRead, mut output: impl Write) -> io::Result<()> {
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        writeln!(output, "{}", handle_line(handler, &line).to_line())?;
        output.flush()?;
    }
    Ok(())
}

/// Reference adapter wrapping the simulator. Given the same seed it
/// reproduces an in-process run exactly.
#[derive(Debug, Default)]
pub struct LoopbackAdapter {
    params: SimParams,
    detector: Option<SimulatedDetector>,
    seed: u64,
    world: Option<World>,
}

impl LoopbackAdapter {
    pub fn new(params: SimParams) -> Self {
        Self {
            params,
            ..Default::default()
        }
    }
}

impl AdapterHandler for LoopbackAdapter {
    fn name(&self) -> String {
        "alforge-loopback".into()
    }

    fn handshake(&mut self, hello: &Handshake) -> Result<(), String> {
        if hello.role != "engine" {
            return Err(format!("handshake role {:?}, expected \"engine\"", hello.role));
        }
        self.seed = hello.seed.unwrap_or(0);
        self.detector = Some(SimulatedDetector::new(self.params, self.seed));
        Ok(())
    }

    fn fit(&mut self, req: &FitRequest) -> Result<FitDone, String> {
        let detector = self.detector.as_mut().ok_or("fit before handshake")?;
        let world = load_world(&req.manifest).map_err(|e| e.to_string())?;
        let summary = detector.fit(&world, req.iteration).map_err(|e| e.to_string())?;
        self.world = Some(world);
        Ok(FitDone {
            images: summary.images,
            annotations: summary.annotations,
            loss: summary.loss,
        })
    }

    fn predict(&mut self, req: &PredictRequest) -> Result<Vec<Detection>, String> {
        let detector = self.detector.as_mut().ok_or("predict before handshake")?;
        let world = self.world.as_ref().ok_or("predict before fit")?;
        let by_image = detector
            .predict(world, &req.image_ids, req.iteration)
            .map_err(|e| e.to_string())?;
        Ok(req
            .image_ids
            .iter()
            .flat_map(|id| by_image.get(id).cloned().unwrap_or_default())
            .collect())
    }
}

/// [`Detector`] backed by an external adapter. Each fit writes the current
/// world to `manifest_path` and sends the path.
pub struct BridgeDetector<T> {
    client: BridgeClient<T>,
    name: String,
    manifest_path: PathBuf,
    chunk: usize,
}

impl<T: Transport> BridgeDetector<T> {
    pub fn connect(transport: T, seed: u64, manifest_path: PathBuf) -> Result<Self, BridgeError> {
        let mut client = BridgeClient::new(transport);
        let name = client.handshake(seed)?;
        Ok(Self {
            client,
            name,
            manifest_path,
            chunk: 4096,
        })
    }
}

impl<T: Transport> Detector for BridgeDetector<T> {
    fn name(&self) -> &str {
        &self.name
    }

    fn fit(&mut self, world: &World, iteration: u32) -> Result<FitSummary, DetectorError> {
        persist_world(world, &self.manifest_path).map_err(|e| BridgeError::Transport(e.to_string()))?;
        let done = self.client.fit(&self.manifest_path, iteration)?;
        Ok(FitSummary {
            images: done.images,
            annotations: done.annotations,
            loss: done.loss,
        })
    }

    fn predict(
        &mut self,
        _world: &World,
        ids: &[ImageId],
        iteration: u32,
    ) -> Result<BTreeMap<ImageId, Vec<Detection>>, DetectorError> {
        let mut out = BTreeMap::new();
        for chunk in ids.chunks(self.chunk) {
            out.extend(self.client.predict(chunk, iteration)?);
        }
        Ok(out)
    }
}

/// Outcome of a conformance check: the steps that passed, in order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConformanceReport {
    pub adapter: String,
    pub steps: Vec<String>,
}

/// Five-tile world with three boxed training tiles and two unlabeled ones.
fn conformance_world() -> Result<World, ManifestError> {
    let cfg = WorldConfig {
        n_panoramas: 1,
        panorama_width: 5 * 1050,
        panorama_height: 1050,
        sign_prevalence: 1.0,
        distractor_rate: 2.0,
        seed: 17,
        ..Default::default()
    };
    let mut world = generate_world(&cfg).expect("fixed conformance config is valid");
    let train: Vec<ImageId> = (0..3).map(ImageId).collect();
    for &id in &train {
        let rec = world.image_mut(id).expect("tile exists");
        rec.mark_reviewed(true).expect("fresh tile");
        let boxes = rec.gt.iter().map(|g| g.bbox).collect();
        rec.mark_boxed(boxes).expect("reviewed positive");
    }
    world.pool.add_to_train(&train).expect("tiles are unlabeled");
    Ok(world)
}

/// Drive an adapter through handshake, fit on a three-image manifest and
/// prediction on two ids, validating every reply.
pub fn check_adapter<T: Transport>(transport: T, workdir: &Path) -> Result<ConformanceReport, BridgeError> {
    let mut steps = Vec::new();
    let mut client = BridgeClient::new(transport);
    let adapter = client.handshake(0)?;
    steps.push(format!("handshake: adapter {adapter:?}"));

    let world = conformance_world().map_err(|e| BridgeError::Transport(e.to_string()))?;
    let manifest = workdir.join("conformance_manifest.jsonl");
    persist_world(&world, &manifest).map_err(|e| BridgeError::Transport(e.to_string()))?;
    let done = client.fit(&manifest, 1)?;
    if done.images != 3 {
        return Err(BridgeError::Schema(format!(
            "fit_done reports {} images, expected 3",
            done.images
        )));
    }
    steps.push(format!("fit: {} images, {} annotations", done.images, done.annotations));

    let ids = [ImageId(3), ImageId(4)];
    let preds = client.predict(&ids, 1)?;
    let requested: BTreeSet<ImageId> = ids.into_iter().collect();
    if preds.keys().copied().collect::<BTreeSet<_>>() != requested {
        return Err(BridgeError::Schema(
            "predict_response does not cover the requested ids".into(),
        ));
    }
    let n: usize = preds.values().map(Vec::len).sum();
    steps.push(format!("predict: {n} detections on 2 images"));
    Ok(ConformanceReport { adapter, steps })
}
