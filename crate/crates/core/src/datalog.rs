//! Frame log: JSONL with a provenance header and fixed six-digit floats.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::dynamics::ControlCommand;
use crate::error::{Error, Result};
use crate::localization::GaussianEstimate;
use crate::map::LaneId;
use crate::perception::{Detection, HitRecord};
use crate::platoon::FsmState;
use crate::v2x::Message;
use crate::world::{AgentId, VehicleState};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimateRecord {
    pub mean: [f64; 4],
    /// Diagonal of the covariance.
    pub variance: [f64; 4],
}

impl From<&GaussianEstimate> for EstimateRecord {
    fn from(e: &GaussianEstimate) -> Self {
        let c = &e.covariance;
        Self {
            mean: [e.mean[0], e.mean[1], e.mean[2], e.mean[3]],
            variance: [c[(0, 0)], c[(1, 1)], c[(2, 2)], c[(3, 3)]],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentFrame {
    pub state: VehicleState,
    #[serde(default)]
    pub estimate: Option<EstimateRecord>,
    #[serde(default)]
    pub fsm: Option<FsmState>,
    pub command: ControlCommand,
    /// Lane whose centerline is nearest to the true position.
    #[serde(default)]
    pub lane: Option<LaneId>,
    #[serde(default)]
    pub s: f64,
    #[serde(default)]
    pub d: f64,
    #[serde(default)]
    pub detections: Vec<Detection>,
    #[serde(default)]
    pub hits: HitRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub step: u64,
    pub time: f64,
    pub agents: BTreeMap<AgentId, AgentFrame>,
    /// Platoon order as held by the leader, leader first.
    #[serde(default)]
    pub platoon: Vec<AgentId>,
    #[serde(default)]
    pub messages: Vec<Message>,
}

impl FrameRecord {
    pub fn empty(step: u64, time: f64) -> Self {
        Self {
            step,
            time,
            agents: BTreeMap::new(),
            platoon: Vec::new(),
            messages: Vec::new(),
        }
    }
}

/// Serializes a JSON value with floats printed as `{:.6}`.
pub fn to_fixed_json(value: &Value) -> String {
    let mut out = String::new();
    emit(value, &mut out);
    out
}

fn emit(value: &Value, out: &mut String) {
    match value {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => {
            if n.is_f64() {
                let f = n.as_f64().expect("f64 number");
                write!(out, "{f:.6}").unwrap();
            } else {
                write!(out, "{n}").unwrap();
            }
        }
        Value::String(s) => out.push_str(&serde_json::to_string(s).expect("string serializes")),
        Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                emit(item, out);
            }
            out.push(']');
        }
        Value::Object(map) => {
            out.push('{');
            for (i, (k, v)) in map.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&serde_json::to_string(k).expect("key serializes"));
                out.push(':');
                emit(v, out);
            }
            out.push('}');
        }
    }
}

pub fn encode_line<T: Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value).map_err(|e| Error::domain(format!("unserializable record: {e}")))?;
    Ok(to_fixed_json(&v))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogHeader {
    pub schema: u32,
    pub config: Value,
    #[serde(default)]
    pub map: Option<Value>,
}

/// Appends one record as a single line.
pub fn save_frame<W: Write>(sink: &mut W, record: &FrameRecord, path: &Path) -> Result<()> {
    let line = encode_line(record)?;
    writeln!(sink, "{line}").map_err(|e| Error::io(path, e))
}

pub fn save_header<W: Write>(sink: &mut W, header: &LogHeader, path: &Path) -> Result<()> {
    let line = encode_line(header)?;
    writeln!(sink, "{line}").map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Replay {
    pub header: Option<LogHeader>,
    pub frames: Vec<FrameRecord>,
}

/// Parses log text; line numbers in errors are 1-based.
pub fn parse_replay(text: &str) -> Result<Replay> {
    let mut header = None;
    let mut frames: Vec<FrameRecord> = Vec::new();
    for (idx, line) in text.split_inclusive('\n').enumerate() {
        let lineno = idx + 1;
        let complete = line.ends_with('\n');
        let body = line.trim_end_matches(['\n', '\r']);
        if body.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(body).map_err(|e| Error::Parse {
            line: lineno,
            message: if complete { e.to_string() } else { format!("truncated line: {e}") },
        })?;
        if idx == 0 && value.get("schema").is_some() {
            let h: LogHeader = serde_json::from_value(value).map_err(|e| Error::Parse { line: lineno, message: e.to_string() })?;
            if h.schema != SCHEMA_VERSION {
                return Err(Error::Integrity {
                    line: lineno,
                    message: format!("unsupported schema {}", h.schema),
                });
            }
            header = Some(h);
            continue;
        }
        let frame: FrameRecord = serde_json::from_value(value).map_err(|e| Error::Parse { line: lineno, message: e.to_string() })?;
        let expected = frames.len() as u64;
        if frame.step != expected {
            return Err(Error::Integrity {
                line: lineno,
                message: format!("expected step {expected}, found {}", frame.step),
            });
        }
        if let Some(first) = frames.first() {
            if !first.agents.keys().eq(frame.agents.keys()) {
                return Err(Error::Integrity {
                    line: lineno,
                    message: "agent set changed within the run".into(),
                });
            }
        }
        frames.push(frame);
    }
    Ok(Replay { header, frames })
}

pub fn load_replay(path: &Path) -> Result<Replay> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_replay(&text)
}
