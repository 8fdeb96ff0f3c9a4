//! Progress records emitted once per coordinate-ascent round.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProgressEvent {
    /// Elicitation segment the round belongs to (0 before any query).
    pub segment: usize,
    pub restart: usize,
    pub round: usize,
    /// Mean acyclicity penalty of the soft graphs, per component.
    pub mean_h: Vec<f64>,
    /// Mean entropy (nats) of the responsibility rows.
    pub responsibilities_entropy: f64,
    pub alpha: Vec<f64>,
}

pub trait EventSink: Send {
    fn emit(&mut self, event: &ProgressEvent) -> Result<()>;
}

/// Discards every event.
pub struct NullSink;

impl EventSink for NullSink {
    fn emit(&mut self, _: &ProgressEvent) -> Result<()> {
        Ok(())
    }
}

#[derive(Default)]
pub struct VecSink {
    pub events: Vec<ProgressEvent>,
}

impl EventSink for VecSink {
    fn emit(&mut self, event: &ProgressEvent) -> Result<()> {
        self.events.push(event.clone());
        Ok(())
    }
}

/// Writes one JSON object per line.
pub struct NdjsonSink<W: Write + Send> {
    writer: W,
}

impl<W: Write + Send> NdjsonSink<W> {
    pub fn new(writer: W) -> Self {
        Self { writer }
    }

    pub fn into_inner(self) -> W {
        self.writer
    }
}

impl<W: Write + Send> EventSink for NdjsonSink<W> {
    fn emit(&mut self, event: &ProgressEvent) -> Result<()> {
        serde_json::to_writer(&mut self.writer, event)?;
        self.writer.write_all(b"\n")?;
        Ok(())
    }
}
