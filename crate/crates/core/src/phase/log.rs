//! Append-only event log: each record is a little-endian `u32` byte length
//! followed by the record as JSON. A torn record at the tail (a crash while
//! appending) is ignored on read.

use std::fs::{File, OpenOptions};
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::{Mutex, MutexGuard};

use thiserror::Error;

use crate::domain::Timestamp;

use super::engine::Challenge;
use super::events::EventRecord;
use super::{ChallengeConfig, PhaseError};

#[derive(Debug, Error)]
pub enum LogError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("record at byte {offset}: {source}")]
    Json {
        offset: u64,
        #[source]
        source: serde_json::Error,
    },
}

pub struct EventLogWriter {
    out: BufWriter<File>,
}

impl EventLogWriter {
    pub fn open(path: &Path) -> io::Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            out: BufWriter::new(file),
        })
    }

    /// Appends and syncs to disk before returning.
    pub fn append(&mut self, records: &[EventRecord]) -> io::Result<()> {
        for record in records {
            let bytes = serde_json::to_vec(record).map_err(io::Error::other)?;
            let len = u32::try_from(bytes.len())
                .map_err(|_| io::Error::other("event record too large"))?;
            self.out.write_all(&len.to_le_bytes())?;
            self.out.write_all(&bytes)?;
        }
        self.out.flush()?;
        self.out.get_ref().sync_data()
    }
}

pub fn read_event_log(path: &Path) -> Result<Vec<EventRecord>, LogError> {
    let mut input = BufReader::new(File::open(path)?);
    let mut records = Vec::new();
    let mut offset = 0u64;
    loop {
        let mut len = [0u8; 4];
        match read_full(&mut input, &mut len)? {
            0 => break,
            4 => {}
            _ => break,
        }
        let len = u32::from_le_bytes(len) as usize;
        let mut buf = vec![0u8; len];
        if read_full(&mut input, &mut buf)? < len {
            break;
        }
        let record =
            serde_json::from_slice(&buf).map_err(|source| LogError::Json { offset, source })?;
        records.push(record);
        offset += 4 + len as u64;
    }
    Ok(records)
}

fn read_full(input: &mut impl Read, buf: &mut [u8]) -> io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match input.read(&mut buf[filled..])? {
            0 => break,
            n => filled += n,
        }
    }
    Ok(filled)
}

/// One JSON object per line, for export and inspection.
pub fn write_jsonl(records: &[EventRecord], mut out: impl Write) -> io::Result<()> {
    for record in records {
        serde_json::to_writer(&mut out, record).map_err(io::Error::other)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

struct Inner {
    challenge: Challenge,
    writer: Option<EventLogWriter>,
    flushed: usize,
}

/// Single-writer access to a challenge. Every mutation runs under one lock,
/// and the events it produced reach the log before the lock is released.
pub struct ChallengeHandle {
    inner: Mutex<Inner>,
}

impl ChallengeHandle {
    pub fn in_memory(challenge: Challenge) -> Self {
        let flushed = challenge.log().len();
        Self {
            inner: Mutex::new(Inner {
                challenge,
                writer: None,
                flushed,
            }),
        }
    }

    /// Creates a challenge whose log lives at `path`, which must not exist.
    pub fn create(
        config: ChallengeConfig,
        now: Timestamp,
        path: &Path,
    ) -> Result<Self, PhaseError> {
        if path.exists() {
            return Err(PhaseError::Store(format!(
                "{} already exists",
                path.display()
            )));
        }
        let challenge = Challenge::new(config, now)?;
        let mut writer = EventLogWriter::open(path).map_err(store_error)?;
        writer.append(challenge.log()).map_err(store_error)?;
        let flushed = challenge.log().len();
        Ok(Self {
            inner: Mutex::new(Inner {
                challenge,
                writer: Some(writer),
                flushed,
            }),
        })
    }

    /// Replays the log at `path` and appends further events to it.
    pub fn open(path: &Path) -> Result<Self, PhaseError> {
        let records = read_event_log(path).map_err(|e| PhaseError::Store(e.to_string()))?;
        let challenge = Challenge::replay(records)?;
        let writer = EventLogWriter::open(path).map_err(store_error)?;
        let flushed = challenge.log().len();
        Ok(Self {
            inner: Mutex::new(Inner {
                challenge,
                writer: Some(writer),
                flushed,
            }),
        })
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner
            .lock()
            .unwrap_or_else(|poisoned| poisoned.into_inner())
    }

    /// Runs a command. Events it emitted are persisted even when it returns
    /// an error, since refusals such as a second A2 attempt are recorded.
    pub fn write<R>(
        &self,
        f: impl FnOnce(&mut Challenge) -> Result<R, PhaseError>,
    ) -> Result<R, PhaseError> {
        let mut inner = self.lock();
        let result = f(&mut inner.challenge);
        let Inner {
            challenge,
            writer,
            flushed,
        } = &mut *inner;
        if let Some(writer) = writer {
            writer
                .append(&challenge.log()[*flushed..])
                .map_err(store_error)?;
        }
        *flushed = challenge.log().len();
        result
    }

    pub fn read<R>(&self, f: impl FnOnce(&Challenge) -> R) -> R {
        f(&self.lock().challenge)
    }
}

fn store_error(e: io::Error) -> PhaseError {
    PhaseError::Store(e.to_string())
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;
    use std::sync::Arc;

    use super::*;
    use crate::domain::{ParticipantId, SubmissionKind, Team, TeamId};
    use crate::phase::{Event, SINGLE_A2_REASON};

    fn team(id: &str) -> Team {
        Team {
            team_id: id.into(),
            member_ids: BTreeSet::from([ParticipantId::new(format!("{id}-m"))]),
            display_name: id.into(),
        }
    }

    #[test]
    fn persisted_log_replays_to_same_state() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.log");
        let handle = ChallengeHandle::create(ChallengeConfig::default(), 0, &path).unwrap();
        handle.write(|c| c.register_team(team("a"), 1)).unwrap();
        handle
            .write(|c| {
                c.submit_rolling(
                    &TeamId::new("a"),
                    SubmissionKind::InferenceAlgorithm,
                    "noise",
                    2,
                )
            })
            .unwrap();
        let err = handle
            .write(|c| {
                c.submit_a2(
                    &TeamId::new("a"),
                    SubmissionKind::InferenceAlgorithm,
                    "noise",
                    3,
                )?;
                c.submit_a2(
                    &TeamId::new("a"),
                    SubmissionKind::InferenceAlgorithm,
                    "noise",
                    4,
                )
            })
            .unwrap_err();
        assert_eq!(err, PhaseError::SingleSubmission(SINGLE_A2_REASON.into()));
        let live = handle.read(|c| c.state().clone());
        drop(handle);

        let reopened = ChallengeHandle::open(&path).unwrap();
        assert_eq!(reopened.read(|c| c.state().clone()), live);
        assert!(
            reopened.read(|c| matches!(c.log().last().unwrap().event, Event::A2Rejected { .. }))
        );

        let mut jsonl = Vec::new();
        reopened.read(|c| write_jsonl(c.log(), &mut jsonl)).unwrap();
        assert_eq!(
            String::from_utf8(jsonl).unwrap().lines().count(),
            reopened.read(|c| c.log().len())
        );
    }

    #[test]
    fn torn_tail_is_ignored() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.log");
        let handle = ChallengeHandle::create(ChallengeConfig::default(), 0, &path).unwrap();
        handle.write(|c| c.register_team(team("a"), 1)).unwrap();
        drop(handle);
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(&[200, 0, 0, 0, b'{']).unwrap();
        assert_eq!(read_event_log(&path).unwrap().len(), 2);
        assert!(ChallengeHandle::create(ChallengeConfig::default(), 0, &path).is_err());
    }

    #[test]
    fn concurrent_a2_attempts_accept_exactly_one() {
        let handle = Arc::new(ChallengeHandle::in_memory(
            Challenge::new(ChallengeConfig::default(), 0).unwrap(),
        ));
        handle.write(|c| c.register_team(team("a"), 0)).unwrap();
        let threads: Vec<_> = (0..16)
            .map(|i| {
                let handle = Arc::clone(&handle);
                std::thread::spawn(move || {
                    handle
                        .write(|c| {
                            c.submit_a2(
                                &TeamId::new("a"),
                                SubmissionKind::InferenceAlgorithm,
                                "noise",
                                i,
                            )
                        })
                        .is_ok()
                })
            })
            .collect();
        let accepted = threads
            .into_iter()
            .map(|t| t.join().unwrap())
            .filter(|ok| *ok)
            .count();
        assert_eq!(accepted, 1);
    }
}
