//! Where published snapshots go.

use std::fs::OpenOptions;
use std::io::{self, BufWriter, Write};
use std::net::TcpStream;
use std::path::Path;
use std::sync::{Arc, Mutex};

use serde::Serialize;

use super::state::{ContextValue, Snapshot};
use crate::taxonomy::ContextId;

pub trait Sink: Send {
    fn publish(&mut self, snapshot: &Snapshot) -> io::Result<()>;
}

/// One line of sink output, one per kind per published snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct SinkRecord {
    pub seq: u64,
    /// Milliseconds on the runner's clock.
    pub timestamp: f64,
    pub kind: ContextId,
    pub value: ContextValue,
    pub confidence: f64,
    pub stale: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub updated_at: Option<f64>,
}

pub fn sink_records(snapshot: &Snapshot) -> Vec<SinkRecord> {
    let ms = |ns: u64| ns as f64 / 1e6;
    snapshot
        .entries
        .iter()
        .map(|e| SinkRecord {
            seq: snapshot.seq,
            timestamp: ms(snapshot.timestamp_ns),
            kind: e.kind,
            value: e.value,
            confidence: e.confidence,
            stale: e.stale,
            updated_at: e.updated_at_ns.map(ms),
        })
        .collect()
}

/// Newline-delimited JSON, flushed after every snapshot.
pub struct NdjsonSink<W: Write + Send> {
    out: W,
}

impl<W: Write + Send> NdjsonSink<W> {
    pub fn new(out: W) -> Self {
        NdjsonSink { out }
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

impl<W: Write + Send> Sink for NdjsonSink<W> {
    fn publish(&mut self, snapshot: &Snapshot) -> io::Result<()> {
        for record in sink_records(snapshot) {
            serde_json::to_writer(&mut self.out, &record)?;
            self.out.write_all(b"\n")?;
        }
        self.out.flush()
    }
}

/// Keeps every snapshot in memory; clones share the same buffer.
#[derive(Debug, Clone, Default)]
pub struct MemorySink {
    snapshots: Arc<Mutex<Vec<Snapshot>>>,
}

impl MemorySink {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn snapshots(&self) -> Vec<Snapshot> {
        self.snapshots.lock().unwrap().clone()
    }
}

impl Sink for MemorySink {
    fn publish(&mut self, snapshot: &Snapshot) -> io::Result<()> {
        self.snapshots.lock().unwrap().push(snapshot.clone());
        Ok(())
    }
}

impl Sink for Box<dyn Sink> {
    fn publish(&mut self, snapshot: &Snapshot) -> io::Result<()> {
        (**self).publish(snapshot)
    }
}

/// Opens a sink target: `-` for stdout, `tcp://host:port` for a socket,
/// anything else is a file path appended to.
pub fn open_sink(target: &str) -> io::Result<Box<dyn Sink>> {
    if target == "-" {
        return Ok(Box::new(NdjsonSink::new(io::stdout())));
    }
    if let Some(addr) = target.strip_prefix("tcp://") {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        return Ok(Box::new(NdjsonSink::new(BufWriter::new(stream))));
    }
    let file = OpenOptions::new().create(true).append(true).open(Path::new(target))?;
    Ok(Box::new(NdjsonSink::new(BufWriter::new(file))))
}
