//! One live session: the resumable elicitation state plus its append-only
//! command log. Replaying the log rebuilds the session exactly, because
//! inference is deterministic given the seed and the response sequence.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use causalmix::elicit_loop::{ElicitationSession, Phase};
use causalmix::elicitation::{ElicitationRecord, Edge};
use causalmix::events::{ProgressEvent, VecSink};
use causalmix::experiment::{prepare_data, ExperimentConfig, SCHEMA_VERSION};
use causalmix::likelihood::Dataset;
use serde::{Deserialize, Serialize};

use crate::error::{ServiceError, ServiceResult};

/// An expert answer as posted by a client.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResponseIn {
    pub component: usize,
    pub edge: Edge,
    pub psi_star: f64,
    /// Client-side receipt time; stored as given.
    #[serde(default)]
    pub timestamp_ms: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LogEntry {
    Created {
        schema_version: u32,
        id: String,
        config: ExperimentConfig,
        seed: u64,
    },
    Responses {
        responses: Vec<ResponseIn>,
    },
    Advance,
    Progress {
        event: ProgressEvent,
    },
    SegmentDone {
        segment: usize,
        digest: String,
    },
    SegmentFailed {
        error: String,
    },
}

pub struct LiveSession {
    pub id: String,
    pub config: ExperimentConfig,
    pub seed: u64,
    pub data: Dataset,
    pub session: ElicitationSession,
    /// Set while an inference segment runs on a worker thread.
    pub running: bool,
    pub error: Option<String>,
    pub log: Vec<LogEntry>,
    file: Option<File>,
}

impl LiveSession {
    pub fn create(id: String, config: ExperimentConfig, seed: u64, log_file: Option<&Path>) -> ServiceResult<Self> {
        config.validate_live()?;
        let data = prepare_data(&config, seed)?.data;
        let session = ElicitationSession::new(
            &data,
            config.inference.clone(),
            config.elicitation.clone(),
            None,
            seed,
        )?;
        let file = match log_file {
            Some(p) => Some(OpenOptions::new().create(true).append(true).open(p)?),
            None => None,
        };
        let mut live = Self {
            id: id.clone(),
            config: config.clone(),
            seed,
            data,
            session,
            running: false,
            error: None,
            log: Vec::new(),
            file,
        };
        live.append(LogEntry::Created {
            schema_version: SCHEMA_VERSION,
            id,
            config,
            seed,
        })?;
        Ok(live)
    }

    fn append(&mut self, entry: LogEntry) -> ServiceResult<()> {
        if let Some(f) = &mut self.file {
            serde_json::to_writer(&mut *f, &entry)?;
            f.write_all(b"\n")?;
            f.flush()?;
        }
        self.log.push(entry);
        Ok(())
    }

    pub fn phase(&self) -> Phase {
        self.session.phase
    }

    /// Registers a batch of answers. The batch is applied to a copy first,
    /// so a rejected answer leaves the session untouched.
    pub fn submit(&mut self, responses: Vec<ResponseIn>) -> ServiceResult<Vec<ElicitationRecord>> {
        if self.running || self.session.phase != Phase::AwaitingResponses {
            return Err(ServiceError::Conflict(format!(
                "responses are only accepted while awaiting responses (phase {:?})",
                self.session.phase
            )));
        }
        let mut next = self.session.clone();
        let records = responses
            .iter()
            .map(|r| next.submit_response(r.component, r.edge, r.psi_star, r.timestamp_ms))
            .collect::<causalmix::Result<Vec<_>>>()?;
        self.session = next;
        self.append(LogEntry::Responses { responses })?;
        Ok(records)
    }

    /// Closes the query round; the caller must then run the next segment.
    pub fn advance(&mut self) -> ServiceResult<()> {
        if self.running {
            return Err(ServiceError::Conflict("an inference segment is already running".into()));
        }
        self.session.advance(&self.data)?;
        self.append(LogEntry::Advance)
    }

    /// Takes what a worker needs to run the next segment and marks the
    /// session busy.
    pub fn begin_segment(&mut self) -> (ElicitationSession, Dataset) {
        self.running = true;
        self.error = None;
        (self.session.clone(), self.data.clone())
    }

    pub fn finish_segment(&mut self, outcome: SegmentOutcome) -> ServiceResult<()> {
        self.running = false;
        match outcome {
            Ok((session, events)) => {
                self.session = session;
                for event in events {
                    self.append(LogEntry::Progress { event })?;
                }
                let entry = LogEntry::SegmentDone {
                    segment: self.session.state.segment,
                    digest: self.session.state.digest(),
                };
                self.append(entry)
            }
            Err(error) => {
                self.error = Some(error.clone());
                self.append(LogEntry::SegmentFailed { error })
            }
        }
    }

    /// Rebuilds a session from its log, rerunning every inference segment.
    /// A log that ends mid-segment resumes by running that segment.
    pub fn replay(entries: &[LogEntry], log_file: Option<&Path>) -> ServiceResult<Self> {
        let (id, config, seed) = match entries.first() {
            Some(LogEntry::Created { id, config, seed, .. }) => (id.clone(), config.clone(), *seed),
            _ => return Err(ServiceError::Invalid("log must start with a created entry".into())),
        };
        let mut live = Self::create(id, config, seed, None)?;
        live.run_blocking()?;
        for entry in &entries[1..] {
            match entry {
                LogEntry::Responses { responses } => {
                    live.submit(responses.clone())?;
                }
                LogEntry::Advance => {
                    live.advance()?;
                    live.run_blocking()?;
                }
                LogEntry::SegmentDone { segment, digest } => {
                    if *segment == live.session.state.segment && *digest != live.session.state.digest() {
                        return Err(ServiceError::Invalid(format!("replay diverged at segment {segment}")));
                    }
                }
                LogEntry::Created { .. } => {
                    return Err(ServiceError::Invalid("log contains a second created entry".into()))
                }
                LogEntry::Progress { .. } | LogEntry::SegmentFailed { .. } => {}
            }
        }
        // The rebuilt log is regenerated; keep the original on disk.
        live.log = entries.to_vec();
        if let Some(p) = log_file {
            live.file = Some(OpenOptions::new().append(true).open(p)?);
        }
        Ok(live)
    }

    /// Runs the next segment on the calling thread.
    pub fn run_blocking(&mut self) -> ServiceResult<()> {
        let (session, data) = self.begin_segment();
        let outcome = run_segment(session, &data);
        let failed = outcome.as_ref().err().cloned();
        self.finish_segment(outcome)?;
        match failed {
            Some(e) => Err(ServiceError::Invalid(e)),
            None => Ok(()),
        }
    }
}

pub type SegmentOutcome = Result<(ElicitationSession, Vec<ProgressEvent>), String>;

pub fn run_segment(mut session: ElicitationSession, data: &Dataset) -> SegmentOutcome {
    let mut sink = VecSink::default();
    session.run_segment(data, &mut sink).map_err(|e| e.to_string())?;
    Ok((session, sink.events))
}

pub fn read_log(path: &Path) -> ServiceResult<Vec<LogEntry>> {
    let reader = BufReader::new(File::open(path)?);
    let mut entries = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        entries.push(serde_json::from_str(&line)?);
    }
    Ok(entries)
}
