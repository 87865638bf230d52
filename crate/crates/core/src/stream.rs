//! Causal per-frame inference over a ring buffer of the last `ω` samples.
//!
//! A sample at time `t` carries the channel row that ends at source frame
//! `t` (row `i` of the offline channel matrix has `t = i + 1`) and, for
//! vision models, the frame at `t`. Predictions carry the same `t` as the
//! offline window end frame.

use std::collections::VecDeque;
use std::io::{BufRead, Write};
use std::net::TcpListener;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{normalize_frame, NormalizationStats};
use crate::ingest::OSATS_DIMS;
use crate::models::{Model, ModelError, VisionView, WindowView};
use crate::trainer::Checkpoint;

#[derive(Debug, Error)]
pub enum StreamError {
    #[error("sample at t={0} is not after the previous one")]
    OutOfOrder(u64),
    #[error("sample at t={t} is missing its {modality} part")]
    ModalityMissing { t: u64, modality: &'static str },
    #[error("session has not been reset for a trial")]
    NotInitialized,
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("{what}: expected {expected} values, found {found}")]
    Shape {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("unexpected {0} message from client")]
    Unexpected(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("io: {0}")]
    Io(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawFrame {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// `H × W × C` intensities in [0, 1].
    pub pixels: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum StreamMessage {
    Kin {
        t: u64,
        /// Un-normalized channel values.
        values: Vec<f64>,
    },
    Frame {
        t: u64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        embedding: Option<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        raw: Option<RawFrame>,
    },
    Reset {
        trial_id: String,
    },
    Pred {
        t: u64,
        scores: [f64; OSATS_DIMS],
        latency_us: u64,
    },
}

/// One message per line, no trailing newline.
pub fn encode(msg: &StreamMessage) -> String {
    serde_json::to_string(msg).expect("message serializes")
}

/// `line` is the 1-based line number used in errors.
pub fn decode(text: &str, line: usize) -> Result<StreamMessage, StreamError> {
    serde_json::from_str(text).map_err(|e| StreamError::Parse {
        line,
        message: e.to_string(),
    })
}

/// Decodes every non-blank line.
pub fn decode_all(text: &str) -> Result<Vec<StreamMessage>, StreamError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| decode(l, i + 1))
        .collect()
}

#[derive(Default)]
struct Pending {
    t: u64,
    kin: Option<Vec<f64>>,
    vis: Option<Vec<f64>>,
}

/// Streaming state for one client.
pub struct Session {
    model: Model,
    stats: NormalizationStats,
    omega: usize,
    stride: usize,
    trial: Option<String>,
    kin: VecDeque<Vec<f64>>,
    vis: VecDeque<Vec<f64>>,
    pending: Option<Pending>,
    last_t: Option<u64>,
    first_full_t: Option<u64>,
    memory: Option<Vec<f64>>,
}

impl Session {
    pub fn new(ckpt: &Checkpoint) -> Self {
        Self {
            model: ckpt.model.clone(),
            stats: ckpt.stats.clone(),
            omega: ckpt.experiment.window,
            stride: ckpt.experiment.stride,
            trial: None,
            kin: VecDeque::new(),
            vis: VecDeque::new(),
            pending: None,
            last_t: None,
            first_full_t: None,
            memory: None,
        }
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn trial(&self) -> Option<&str> {
        self.trial.as_deref()
    }

    /// Samples currently held; never more than `ω`.
    pub fn buffered(&self) -> usize {
        self.kin.len().max(self.vis.len())
    }

    pub fn reset(&mut self, trial_id: &str) {
        self.trial = Some(trial_id.to_string());
        self.kin.clear();
        self.vis.clear();
        self.pending = None;
        self.last_t = None;
        self.first_full_t = None;
        self.memory = None;
    }

    fn needs_kin(&self) -> bool {
        self.model.variant().uses_kinematics()
    }

    fn needs_vis(&self) -> bool {
        self.model.variant().uses_vision()
    }

    fn slot(&mut self, t: u64) -> Result<&mut Pending, StreamError> {
        if self.trial.is_none() {
            return Err(StreamError::NotInitialized);
        }
        if self.last_t.is_some_and(|last| t <= last) {
            return Err(StreamError::OutOfOrder(t));
        }
        if let Some(p) = &self.pending {
            if t < p.t {
                return Err(StreamError::OutOfOrder(t));
            }
            if t > p.t {
                let modality = if self.needs_kin() && p.kin.is_none() {
                    "kin"
                } else {
                    "frame"
                };
                return Err(StreamError::ModalityMissing { t: p.t, modality });
            }
        }
        Ok(self.pending.get_or_insert_with(|| Pending {
            t,
            ..Pending::default()
        }))
    }

    fn embedding(
        &self,
        embedding: Option<Vec<f64>>,
        raw: Option<RawFrame>,
    ) -> Result<Vec<f64>, StreamError> {
        let d = self.model.config.embed_dim;
        if let Some(e) = embedding {
            if e.len() != d {
                return Err(StreamError::Shape {
                    what: "embedding",
                    expected: d,
                    found: e.len(),
                });
            }
            return Ok(e);
        }
        let raw = raw.ok_or(StreamError::Shape {
            what: "frame",
            expected: d,
            found: 0,
        })?;
        let n = raw.height * raw.width * raw.channels;
        if raw.pixels.len() != n || n == 0 {
            return Err(StreamError::Shape {
                what: "raw frame",
                expected: n,
                found: raw.pixels.len(),
            });
        }
        let pixels: Vec<f32> = raw.pixels.iter().map(|&v| v as f32).collect();
        let frame = normalize_frame(&pixels, raw.height, raw.width, raw.channels);
        Ok(self
            .model
            .embed_frame(&frame, raw.channels, raw.height, raw.width)?)
    }

    /// Modalities the model does not use are accepted and dropped.
    fn ignore(&self) -> Result<Option<StreamMessage>, StreamError> {
        match self.trial {
            Some(_) => Ok(None),
            None => Err(StreamError::NotInitialized),
        }
    }

    /// Feeds one message; returns a `Pred` message when a window completes.
    pub fn push(&mut self, msg: StreamMessage) -> Result<Option<StreamMessage>, StreamError> {
        let started = Instant::now();
        let t = match msg {
            StreamMessage::Reset { trial_id } => {
                self.reset(&trial_id);
                return Ok(None);
            }
            StreamMessage::Pred { .. } => return Err(StreamError::Unexpected("pred")),
            StreamMessage::Kin { .. } if !self.needs_kin() => return self.ignore(),
            StreamMessage::Frame { .. } if !self.needs_vis() => return self.ignore(),
            StreamMessage::Kin { t, values } => {
                let expected = self.stats.channels();
                if values.len() != expected {
                    return Err(StreamError::Shape {
                        what: "kin",
                        expected,
                        found: values.len(),
                    });
                }
                let slot = self.slot(t)?;
                if slot.kin.is_some() {
                    return Err(StreamError::OutOfOrder(t));
                }
                slot.kin = Some(values);
                t
            }
            StreamMessage::Frame { t, embedding, raw } => {
                let e = self.embedding(embedding, raw)?;
                let slot = self.slot(t)?;
                if slot.vis.is_some() {
                    return Err(StreamError::OutOfOrder(t));
                }
                slot.vis = Some(e);
                t
            }
        };
        let p = self.pending.as_ref().expect("slot exists");
        let complete =
            (!self.needs_kin() || p.kin.is_some()) && (!self.needs_vis() || p.vis.is_some());
        if !complete {
            return Ok(None);
        }
        let p = self.pending.take().expect("slot exists");
        self.last_t = Some(t);
        if self.needs_kin() {
            let mut row = p.kin.expect("kin present");
            self.stats.apply_row(&mut row);
            self.kin.push_back(row);
            if self.kin.len() > self.omega {
                self.kin.pop_front();
            }
        }
        if self.needs_vis() {
            self.vis.push_back(p.vis.expect("frame present"));
            if self.vis.len() > self.omega {
                self.vis.pop_front();
            }
        }
        if self.buffered() < self.omega {
            return Ok(None);
        }
        let first = *self.first_full_t.get_or_insert(t);
        if !(t - first).is_multiple_of(self.stride as u64) {
            return Ok(None);
        }
        let kin: Vec<f64> = self.kin.iter().flatten().copied().collect();
        let vis: Vec<f64> = self.vis.iter().flatten().copied().collect();
        let view = WindowView {
            kin: self.needs_kin().then_some(kin.as_slice()),
            vis: self.needs_vis().then_some(VisionView::Embeddings(&vis)),
        };
        let pred = self.model.predict(&view, self.memory.as_deref())?;
        self.memory = pred.memory;
        Ok(Some(StreamMessage::Pred {
            t,
            scores: pred.scores,
            latency_us: started.elapsed().as_micros() as u64,
        }))
    }
}

/// Reads NDJSON messages from `input` and writes each prediction as a line.
/// Returns the number of predictions written.
pub fn serve<R: BufRead, W: Write>(
    session: &mut Session,
    input: R,
    mut output: W,
) -> Result<usize, StreamError> {
    let mut emitted = 0;
    for (i, line) in input.lines().enumerate() {
        let line = line.map_err(|e| StreamError::Io(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        if let Some(pred) = session.push(decode(&line, i + 1)?)? {
            writeln!(output, "{}", encode(&pred)).map_err(|e| StreamError::Io(e.to_string()))?;
            output.flush().map_err(|e| StreamError::Io(e.to_string()))?;
            emitted += 1;
        }
    }
    Ok(emitted)
}

/// Serves one session per accepted connection, each on its own thread.
/// Stops after `max_connections` connections when given.
pub fn serve_tcp(
    listener: TcpListener,
    ckpt: &Checkpoint,
    max_connections: Option<usize>,
) -> Result<(), StreamError> {
    let mut handles = Vec::new();
    for (n, conn) in listener.incoming().enumerate() {
        let conn = conn.map_err(|e| StreamError::Io(e.to_string()))?;
        let mut session = Session::new(ckpt);
        handles.push(std::thread::spawn(move || {
            let reader = match conn.try_clone() {
                Ok(c) => std::io::BufReader::new(c),
                Err(e) => return log::warn!("connection: {e}"),
            };
            if let Err(e) = serve(&mut session, reader, &conn) {
                log::warn!("session ended: {e}");
            }
        }));
        if max_connections.is_some_and(|m| n + 1 >= m) {
            break;
        }
    }
    for h in handles {
        let _ = h.join();
    }
    Ok(())
}
