//! Frame sources. Every source hands out only its newest frame: older
//! frames are dropped, never queued, so memory stays bounded by one frame.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::clock::{as_millis, millis};
use crate::protocol::framing::read_frame;
use crate::protocol::{GroundTruth, ImagePayload, ImageTruth};
use crate::taxonomy::ContextId;

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    /// Increases by one for every frame the source produced, delivered or not.
    pub seq: u64,
    pub timestamp: Duration,
    pub image: ImagePayload,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FramePoll {
    /// The newest frame available at the time of the poll.
    Frame(Frame),
    /// Nothing has arrived yet.
    Pending,
    /// The source is exhausted.
    Ended,
}

pub trait FrameSource: Send {
    fn poll_latest(&mut self, now: Duration) -> FramePoll;

    /// Frames superseded before anyone polled them.
    fn dropped(&self) -> u64 {
        0
    }
}

/// One line of a trace file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceFrame {
    pub timestamp_ms: f64,
    pub image_ref: String,
}

/// Replays timestamped locators against the runner's clock.
#[derive(Debug, Clone)]
pub struct SimFrameSource {
    frames: Vec<(Duration, String)>,
    end: Duration,
    current: Option<usize>,
    dropped: u64,
}

impl SimFrameSource {
    /// `end` is when the source reports exhaustion.
    pub fn new(frames: &[TraceFrame], end: Duration) -> Self {
        let mut frames: Vec<(Duration, String)> =
            frames.iter().map(|f| (millis(f.timestamp_ms), f.image_ref.clone())).collect();
        frames.sort_by_key(|f| f.0);
        SimFrameSource { frames, end, current: None, dropped: 0 }
    }

    /// Reads a JSON-lines trace. The source ends one frame gap after the
    /// last frame.
    pub fn load(path: &Path) -> io::Result<Self> {
        let frames = read_trace(path)?;
        let end = match frames.as_slice() {
            [] => Duration::ZERO,
            [.., a, b] => millis(2.0 * b.timestamp_ms - a.timestamp_ms),
            [only] => millis(only.timestamp_ms + 1.0),
        };
        Ok(SimFrameSource::new(&frames, end))
    }
}

pub fn read_trace(path: &Path) -> io::Result<Vec<TraceFrame>> {
    let file = fs::File::open(path)?;
    let mut frames = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let frame: TraceFrame = serde_json::from_str(&line)
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, format!("{}:{}: {e}", path.display(), n + 1)))?;
        frames.push(frame);
    }
    Ok(frames)
}

pub fn write_trace(path: &Path, frames: &[TraceFrame]) -> io::Result<()> {
    let mut out = Vec::new();
    for f in frames {
        serde_json::to_writer(&mut out, f)?;
        out.push(b'\n');
    }
    fs::File::create(path)?.write_all(&out)
}

impl FrameSource for SimFrameSource {
    fn poll_latest(&mut self, now: Duration) -> FramePoll {
        if now >= self.end {
            return FramePoll::Ended;
        }
        let newest = self.frames.partition_point(|f| f.0 <= now);
        if newest == 0 {
            return FramePoll::Pending;
        }
        let idx = newest - 1;
        let skipped = match self.current {
            Some(c) if idx > c => idx - c - 1,
            None => idx,
            _ => 0,
        };
        self.dropped += skipped as u64;
        self.current = Some(idx);
        let (timestamp, image_ref) = &self.frames[idx];
        FramePoll::Frame(Frame { seq: idx as u64, timestamp: *timestamp, image: ImagePayload::locator(image_ref) })
    }

    fn dropped(&self) -> u64 {
        self.dropped
    }
}

/// A drive whose ground truth changes at given times: one image per frame,
/// each with its own 24-context truth.
#[derive(Debug, Clone)]
pub struct SimTrace {
    pub duration: Duration,
    pub frame_period: Duration,
    pub initial: BTreeMap<ContextId, bool>,
    /// `(time, kind, value)`: from `time` on, `kind` is `value`.
    pub toggles: Vec<(Duration, ContextId, bool)>,
    pub prefix: String,
}

impl SimTrace {
    pub fn new(duration: Duration, frame_period: Duration, initial: BTreeMap<ContextId, bool>) -> Self {
        SimTrace { duration, frame_period, initial, toggles: Vec::new(), prefix: "trace".into() }
    }

    pub fn with_toggle(mut self, at: Duration, kind: ContextId, value: bool) -> Self {
        self.toggles.push((at, kind, value));
        self.toggles.sort_by_key(|t| t.0);
        self
    }

    pub fn truth_at(&self, t: Duration) -> BTreeMap<ContextId, bool> {
        let mut truth = self.initial.clone();
        for &(at, kind, value) in &self.toggles {
            if at <= t {
                truth.insert(kind, value);
            }
        }
        truth
    }

    pub fn frames(&self) -> Vec<TraceFrame> {
        let mut frames = Vec::new();
        let mut t = Duration::ZERO;
        let mut i = 0u64;
        while t < self.duration {
            frames.push(TraceFrame { timestamp_ms: as_millis(t), image_ref: format!("{}/{i:06}", self.prefix) });
            i += 1;
            t = self.frame_period * i as u32;
        }
        frames
    }

    pub fn ground_truth(&self) -> GroundTruth {
        let mut truth = GroundTruth::new();
        for f in self.frames() {
            truth.insert_image(ImageTruth { image_ref: f.image_ref, contexts: self.truth_at(millis(f.timestamp_ms)) });
        }
        truth
    }

    pub fn source(&self) -> SimFrameSource {
        SimFrameSource::new(&self.frames(), self.duration)
    }
}

/// Watches a directory that a camera drops image files into. The newest
/// file by name is the current frame; timestamps are when it was first seen.
#[derive(Debug)]
pub struct DirFrameSource {
    dir: PathBuf,
    inline: bool,
    idle_timeout: Option<Duration>,
    current: Option<(String, Frame)>,
    last_change: Option<Duration>,
    produced: u64,
    dropped: u64,
}

impl DirFrameSource {
    /// With `inline`, frames carry the file bytes instead of the path.
    pub fn new(dir: &Path, inline: bool) -> Self {
        DirFrameSource {
            dir: dir.to_path_buf(),
            inline,
            idle_timeout: None,
            current: None,
            last_change: None,
            produced: 0,
            dropped: 0,
        }
    }

    /// Ends the stream once no new file has appeared for `timeout`.
    pub fn with_idle_timeout(mut self, timeout: Duration) -> Self {
        self.idle_timeout = Some(timeout);
        self
    }

    fn listing(&self) -> io::Result<Vec<String>> {
        let mut names = Vec::new();
        for entry in fs::read_dir(&self.dir)? {
            let entry = entry?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if !name.starts_with('.') && entry.file_type()?.is_file() {
                names.push(name);
            }
        }
        names.sort();
        Ok(names)
    }
}

impl FrameSource for DirFrameSource {
    fn poll_latest(&mut self, now: Duration) -> FramePoll {
        let names = self.listing().unwrap_or_default();
        let current_name = self.current.as_ref().map(|(n, _)| n.as_str());
        let newer: Vec<&String> = names.iter().filter(|n| current_name.is_none_or(|c| n.as_str() > c)).collect();
        if let Some(newest) = newer.last() {
            let path = self.dir.join(newest);
            let image = if self.inline {
                match fs::read(&path) {
                    Ok(bytes) => ImagePayload::inline(&bytes),
                    // Still being written; try again next poll.
                    Err(_) => return self.current.as_ref().map_or(FramePoll::Pending, |(_, f)| FramePoll::Frame(f.clone())),
                }
            } else {
                ImagePayload::locator(path.to_string_lossy())
            };
            self.dropped += newer.len() as u64 - 1;
            self.produced += newer.len() as u64;
            let frame = Frame { seq: self.produced - 1, timestamp: now, image };
            self.current = Some(((*newest).clone(), frame));
            self.last_change = Some(now);
        }
        let idle_since = self.last_change.unwrap_or_default();
        if self.idle_timeout.is_some_and(|t| now.saturating_sub(idle_since) >= t) {
            return FramePoll::Ended;
        }
        match &self.current {
            Some((_, frame)) => FramePoll::Frame(frame.clone()),
            None => FramePoll::Pending,
        }
    }

    fn dropped(&self) -> u64 {
        self.dropped
    }
}

/// Frame body on the socket source, framed like backend messages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMessage {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp_ms: Option<f64>,
    pub image: ImagePayload,
}

#[derive(Debug, Default)]
struct Slot {
    latest: Option<Frame>,
    produced: u64,
    closed: bool,
}

/// Accepts one producer connection and keeps only its newest frame.
#[derive(Debug)]
pub struct SocketFrameSource {
    slot: Arc<Mutex<Slot>>,
    local_addr: SocketAddr,
    delivered: Option<u64>,
    dropped: u64,
}

impl SocketFrameSource {
    pub fn bind(addr: &str) -> io::Result<Self> {
        let listener = TcpListener::bind(addr)?;
        let local_addr = listener.local_addr()?;
        let slot = Arc::new(Mutex::new(Slot::default()));
        let writer = slot.clone();
        thread::spawn(move || {
            let result = listener.accept().map(|(stream, _)| {
                let mut reader = BufReader::new(stream);
                while let Ok(Some(body)) = read_frame(&mut reader) {
                    let Ok(msg) = serde_json::from_slice::<FrameMessage>(&body) else {
                        log_bad_frame();
                        continue;
                    };
                    let mut slot = writer.lock().unwrap();
                    let seq = slot.produced;
                    slot.produced += 1;
                    slot.latest = Some(Frame {
                        seq,
                        timestamp: msg.timestamp_ms.map(millis).unwrap_or_default(),
                        image: msg.image,
                    });
                }
            });
            let _ = result;
            writer.lock().unwrap().closed = true;
        });
        Ok(SocketFrameSource { slot, local_addr, delivered: None, dropped: 0 })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }
}

fn log_bad_frame() {
    // Bad frames are skipped; the producer keeps its connection.
}

impl FrameSource for SocketFrameSource {
    fn poll_latest(&mut self, _now: Duration) -> FramePoll {
        let slot = self.slot.lock().unwrap();
        match &slot.latest {
            Some(frame) => {
                let fresh = self.delivered.is_none_or(|d| frame.seq > d);
                if !fresh && slot.closed {
                    return FramePoll::Ended;
                }
                if fresh {
                    self.dropped += frame.seq - self.delivered.map_or(0, |d| d + 1);
                    self.delivered = Some(frame.seq);
                }
                FramePoll::Frame(frame.clone())
            }
            None if slot.closed => FramePoll::Ended,
            None => FramePoll::Pending,
        }
    }

    fn dropped(&self) -> u64 {
        self.dropped
    }
}
