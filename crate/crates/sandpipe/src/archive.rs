//! Raw-message archive and replay engine.
//!
//! The archiver consumes the `osg.ps.archive` queue and appends each
//! message as one file in a daily tar. At midnight UTC the open tar is
//! closed, gzip-compressed, and queued for upload; an uploader moves
//! closed segments to the archive destination with a checksum verify.
//! Replay reads closed segments and re-publishes every entry through the
//! `osg.ps.replay` exchange, which is bound past the archive queue so
//! replayed data is not written to tape again.
//!
//! Entry paths are `<topic key>/<epoch_micros>_<sha256 prefix>`, so the
//! topic key survives the round trip and bodies stay byte-identical to
//! the bus payloads.

use chrono::{DateTime, Duration as ChronoDuration, NaiveDate};
use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Duration;
use thiserror::Error;

use crate::bus::{Broker, Credential, Message, TopicKey};
use crate::clock::Clock;

pub const ARCHIVE_QUEUE: &str = "osg.ps.archive";
pub const REPLAY_EXCHANGE: &str = "osg.ps.replay";

#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error("archive io: {0}")]
    Io(#[from] std::io::Error),
    #[error("segment meta: {0}")]
    Meta(String),
    #[error("bus: {0}")]
    Bus(#[from] crate::bus::BusError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SegmentState {
    Open,
    Closed,
    Uploaded,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArchiveSegment {
    pub date: NaiveDate,
    pub path: PathBuf,
    pub entry_count: u64,
    pub state: SegmentState,
}

fn date_of(epoch_secs: f64) -> NaiveDate {
    DateTime::from_timestamp(epoch_secs as i64, 0)
        .expect("epoch in range")
        .date_naive()
}

fn meta_path(spool: &Path, date: NaiveDate) -> PathBuf {
    spool.join(format!("{date}.meta.json"))
}

fn write_meta(spool: &Path, seg: &ArchiveSegment) -> Result<(), ArchiveError> {
    let tmp = meta_path(spool, seg.date).with_extension("json.tmp");
    std::fs::write(&tmp, serde_json::to_string_pretty(seg).unwrap())?;
    std::fs::rename(&tmp, meta_path(spool, seg.date))?;
    Ok(())
}

struct OpenSegment {
    date: NaiveDate,
    builder: tar::Builder<File>,
    tar_path: PathBuf,
    entry_count: u64,
    last_micros: u64,
}

/// Owns the single open segment; appends, rotates, closes.
pub struct Archiver {
    spool: PathBuf,
    clock: Clock,
    open: OpenSegment,
}

impl Archiver {
    pub fn new(spool: impl Into<PathBuf>, clock: Clock) -> Result<Archiver, ArchiveError> {
        let spool = spool.into();
        std::fs::create_dir_all(&spool)?;
        let date = date_of(clock.now());
        let open = Self::open_segment(&spool, date)?;
        Ok(Archiver { spool, clock, open })
    }

    fn open_segment(spool: &Path, date: NaiveDate) -> Result<OpenSegment, ArchiveError> {
        let tar_path = spool.join(format!("{date}.tar"));
        let mut entries: Vec<(PathBuf, Vec<u8>, u64)> = Vec::new();
        if tar_path.exists() {
            // crash leftover: recover whatever is readable and rewrite
            let mut archive = tar::Archive::new(File::open(&tar_path)?);
            if let Ok(iter) = archive.entries() {
                for entry in iter.flatten() {
                    let path = entry.path().map(|p| p.into_owned()).unwrap_or_default();
                    let mtime = entry.header().mtime().unwrap_or(0);
                    let mut body = Vec::new();
                    let mut entry = entry;
                    if entry.read_to_end(&mut body).is_ok() {
                        entries.push((path, body, mtime));
                    }
                }
            }
        }
        let file = File::create(&tar_path)?;
        let mut builder = tar::Builder::new(file);
        let mut count = 0u64;
        for (path, body, mtime) in &entries {
            let mut header = tar::Header::new_gnu();
            header.set_size(body.len() as u64);
            header.set_mode(0o644);
            header.set_mtime(*mtime);
            builder.append_data(&mut header, path, body.as_slice())?;
            count += 1;
        }
        let seg = OpenSegment {
            date,
            builder,
            tar_path,
            entry_count: count,
            last_micros: 0,
        };
        write_meta(
            spool,
            &ArchiveSegment {
                date,
                path: seg.tar_path.clone(),
                entry_count: count,
                state: SegmentState::Open,
            },
        )?;
        Ok(seg)
    }

    pub fn open_date(&self) -> NaiveDate {
        self.open.date
    }

    pub fn open_entry_count(&self) -> u64 {
        self.open.entry_count
    }

    /// Append one message to the open segment and make it durable.
    pub fn append(&mut self, msg: &Message) -> Result<String, ArchiveError> {
        let now_micros = (self.clock.now() * 1e6) as u64;
        // monotonic so entry names stay unique within the segment
        let micros = now_micros.max(self.open.last_micros + 1);
        self.open.last_micros = micros;
        let digest = hex::encode(&Sha256::digest(msg.payload.as_slice())[..6]);
        let name = format!("{micros}_{digest}");
        let path = format!("{}/{}", msg.topic.as_str(), name);
        let mut header = tar::Header::new_gnu();
        header.set_size(msg.payload.len() as u64);
        header.set_mode(0o644);
        header.set_mtime(msg.published_at as u64);
        self.open
            .builder
            .append_data(&mut header, &path, msg.payload.as_slice())?;
        self.open.builder.get_mut().sync_data()?;
        self.open.entry_count += 1;
        write_meta(
            &self.spool,
            &ArchiveSegment {
                date: self.open.date,
                path: self.open.tar_path.clone(),
                entry_count: self.open.entry_count,
                state: SegmentState::Open,
            },
        )?;
        Ok(name)
    }

    /// Rotate if the clock has crossed one or more midnights. Skipped
    /// days still produce (empty) segments so the date sequence has no
    /// gaps. Returns the segments closed by this call.
    pub fn maybe_rotate(&mut self) -> Result<Vec<ArchiveSegment>, ArchiveError> {
        let today = date_of(self.clock.now());
        let mut closed = Vec::new();
        while self.open.date < today {
            let next = self.open.date + ChronoDuration::days(1);
            let seg = self.close_open(next)?;
            closed.push(seg);
        }
        Ok(closed)
    }

    fn close_open(&mut self, next_date: NaiveDate) -> Result<ArchiveSegment, ArchiveError> {
        let replacement = Self::open_segment(&self.spool, next_date)?;
        let finished = std::mem::replace(&mut self.open, replacement);
        let date = finished.date;
        let entry_count = finished.entry_count;
        let tar_path = finished.tar_path.clone();
        let inner = finished.builder.into_inner()?;
        inner.sync_all()?;
        drop(inner);

        // compress the whole tar, then drop the raw file
        let gz_path = tar_path.with_extension("tar.gz");
        let mut input = File::open(&tar_path)?;
        let mut encoder = GzEncoder::new(File::create(&gz_path)?, flate2::Compression::default());
        std::io::copy(&mut input, &mut encoder)?;
        encoder.finish()?.sync_all()?;
        std::fs::remove_file(&tar_path)?;

        let seg = ArchiveSegment {
            date,
            path: gz_path,
            entry_count,
            state: SegmentState::Closed,
        };
        write_meta(&self.spool, &seg)?;
        Ok(seg)
    }
}

/// All segments known to a spool directory, sorted by date.
pub fn list_segments(spool: &Path) -> Result<Vec<ArchiveSegment>, ArchiveError> {
    let mut out = Vec::new();
    if !spool.exists() {
        return Ok(out);
    }
    for entry in std::fs::read_dir(spool)? {
        let entry = entry?;
        let name = entry.file_name();
        let name = name.to_string_lossy();
        if name.ends_with(".meta.json") {
            let text = std::fs::read_to_string(entry.path())?;
            let seg: ArchiveSegment =
                serde_json::from_str(&text).map_err(|e| ArchiveError::Meta(e.to_string()))?;
            out.push(seg);
        }
    }
    out.sort_by_key(|s| s.date);
    Ok(out)
}

/// Move closed segments to the destination directory with a checksum
/// verify. Already-uploaded segments are untouched; an unavailable
/// destination leaves segments closed for the next period.
pub fn upload_closed(spool: &Path, dest: &Path) -> Result<Vec<ArchiveSegment>, ArchiveError> {
    let mut uploaded = Vec::new();
    for seg in list_segments(spool)? {
        if seg.state != SegmentState::Closed {
            continue;
        }
        if !dest.exists() {
            // destination offline; retry next period
            continue;
        }
        let target = dest.join(seg.path.file_name().unwrap());
        std::fs::copy(&seg.path, &target)?;
        let src_sum = Sha256::digest(std::fs::read(&seg.path)?);
        let dst_sum = Sha256::digest(std::fs::read(&target)?);
        if src_sum != dst_sum {
            std::fs::remove_file(&target)?;
            return Err(ArchiveError::Meta(format!(
                "checksum mismatch uploading {}",
                seg.path.display()
            )));
        }
        std::fs::remove_file(&seg.path)?;
        let seg = ArchiveSegment {
            path: target,
            state: SegmentState::Uploaded,
            ..seg
        };
        write_meta(spool, &seg)?;
        uploaded.push(seg);
    }
    Ok(uploaded)
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ReplayReport {
    pub records: u64,
    pub corrupt_skipped: u64,
    pub duration_secs: f64,
    pub records_per_sec: f64,
}

/// Raw entries of one compressed segment.
pub fn read_segment(seg: &ArchiveSegment) -> Result<Vec<(TopicKey, Vec<u8>)>, ArchiveError> {
    let mut out = Vec::new();
    let mut archive = tar::Archive::new(GzDecoder::new(File::open(&seg.path)?));
    for entry in archive.entries()? {
        let mut entry = entry?;
        let path = entry.path()?.into_owned();
        let topic = path
            .components()
            .next()
            .and_then(|c| c.as_os_str().to_str())
            .and_then(|s| TopicKey::new(s).ok());
        let mut body = Vec::new();
        entry.read_to_end(&mut body)?;
        match topic {
            Some(topic) => out.push((topic, body)),
            None => out.push((TopicKey::new("replay.corrupt").unwrap(), Vec::new())),
        }
    }
    Ok(out)
}

/// Publish every entry of the given segments to the replay exchange.
/// Corrupt entries are counted and skipped; live traffic keeps flowing
/// through the production path concurrently.
pub fn replay(
    segments: &[ArchiveSegment],
    broker: &Broker,
    vhost: &str,
    rate_limit: Option<f64>,
) -> Result<ReplayReport, ArchiveError> {
    let start = std::time::Instant::now();
    let mut report = ReplayReport::default();
    for seg in segments {
        let mut archive = tar::Archive::new(GzDecoder::new(File::open(&seg.path)?));
        for entry in archive.entries()? {
            let mut entry = match entry {
                Ok(e) => e,
                Err(e) => {
                    log::warn!("corrupt archive entry in {}: {e}", seg.path.display());
                    report.corrupt_skipped += 1;
                    continue;
                }
            };
            let topic = entry
                .path()
                .ok()
                .and_then(|p| {
                    p.components()
                        .next()
                        .and_then(|c| c.as_os_str().to_str().map(String::from))
                })
                .and_then(|s| TopicKey::new(s).ok());
            let Some(topic) = topic else {
                report.corrupt_skipped += 1;
                continue;
            };
            let mut body = Vec::new();
            if entry.read_to_end(&mut body).is_err() {
                report.corrupt_skipped += 1;
                continue;
            }
            broker.publish(vhost, REPLAY_EXCHANGE, topic, body, "replay", Credential::Internal)?;
            report.records += 1;
            if let Some(rate) = rate_limit {
                let target = report.records as f64 / rate;
                let elapsed = start.elapsed().as_secs_f64();
                if target > elapsed {
                    std::thread::sleep(Duration::from_secs_f64(target - elapsed));
                }
            }
        }
    }
    report.duration_secs = start.elapsed().as_secs_f64();
    report.records_per_sec = if report.duration_secs > 0.0 {
        report.records as f64 / report.duration_secs
    } else {
        report.records as f64
    };
    Ok(report)
}

/// Consumer loop: archive every message on the archive queue, rotating at
/// (virtual) midnight even when idle. Acks only after the durable write.
pub fn run_archiver(
    broker: &Broker,
    mut archiver: Archiver,
    stop: &AtomicBool,
) -> Result<Archiver, ArchiveError> {
    let consumer = broker.consume(ARCHIVE_QUEUE, "archiver")?;
    loop {
        archiver.maybe_rotate()?;
        match consumer.recv(Duration::from_millis(20)) {
            Some(delivery) => {
                archiver.maybe_rotate()?;
                match archiver.append(&delivery.message) {
                    Ok(_) => consumer.ack(&delivery),
                    Err(e) => {
                        // leave unacked: message stays on the queue
                        log::error!("archive append failed: {e}");
                        consumer.requeue(&delivery);
                        return Err(e);
                    }
                }
            }
            None => {
                if stop.load(Ordering::Relaxed) && broker.queue_depth(ARCHIVE_QUEUE)? == 0 {
                    return Ok(archiver);
                }
            }
        }
    }
}
