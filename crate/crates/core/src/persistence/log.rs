//! Append-only record log.
//!
//! Each frame is `[u32 len][u32 crc][u8 version][payload]`, little-endian.
//! `len` counts payload bytes; `crc` is CRC-32 (IEEE) over the version byte
//! followed by the payload.

use std::fs::{File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use super::record::Record;

pub const LOG_VERSION: u8 = 1;
pub const FRAME_HEADER: usize = 9;

pub fn encode_frame(record: &Record) -> Vec<u8> {
    let payload = record.encode();
    let mut out = Vec::with_capacity(FRAME_HEADER + payload.len());
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.extend_from_slice(&frame_crc(LOG_VERSION, &payload).to_le_bytes());
    out.push(LOG_VERSION);
    out.extend_from_slice(&payload);
    out
}

fn frame_crc(version: u8, payload: &[u8]) -> u32 {
    let mut h = crc32fast::Hasher::new();
    h.update(&[version]);
    h.update(payload);
    h.finalize()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corruption {
    /// Byte offset of the first frame that could not be read.
    pub offset: u64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogScan {
    pub records: Vec<Record>,
    /// Length of the readable prefix.
    pub valid_len: u64,
    pub corruption: Option<Corruption>,
}

/// Reads frames until the end of input or the first unreadable frame.
pub fn scan(bytes: &[u8]) -> LogScan {
    let mut records = Vec::new();
    let mut at = 0usize;
    let corruption = loop {
        if at == bytes.len() {
            break None;
        }
        let fail = |reason: String| {
            Some(Corruption {
                offset: at as u64,
                reason,
            })
        };
        if bytes.len() - at < FRAME_HEADER {
            break fail(format!("truncated header ({} bytes)", bytes.len() - at));
        }
        let len = u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
        let crc = u32::from_le_bytes(bytes[at + 4..at + 8].try_into().unwrap());
        let version = bytes[at + 8];
        let start = at + FRAME_HEADER;
        if bytes.len() - start < len {
            break fail(format!(
                "truncated payload: need {len}, have {}",
                bytes.len() - start
            ));
        }
        let payload = &bytes[start..start + len];
        if frame_crc(version, payload) != crc {
            break fail("checksum mismatch".into());
        }
        if version != LOG_VERSION {
            break fail(format!("unsupported schema version {version}"));
        }
        match Record::decode_at(payload, start) {
            Ok(r) => records.push(r),
            Err(e) => break fail(format!("undecodable payload: {e}")),
        }
        at = start + len;
    };
    LogScan {
        records,
        valid_len: corruption.as_ref().map_or(bytes.len() as u64, |c| c.offset),
        corruption,
    }
}

/// Writable handle on a log file.
#[derive(Debug)]
pub struct LogFile {
    path: PathBuf,
    file: File,
    len: u64,
    fsync: bool,
}

impl LogFile {
    /// Opens or creates the log. An unreadable tail is moved to
    /// `<path>.corrupt-<offset>` and cut off so appends continue from the
    /// last good frame.
    pub fn open(path: impl AsRef<Path>, fsync: bool) -> io::Result<(LogFile, LogScan)> {
        let path = path.as_ref().to_path_buf();
        let bytes = match std::fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(e),
        };
        let scan = scan(&bytes);
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        if let Some(c) = &scan.corruption {
            let aside = corrupt_path(&path, c.offset);
            std::fs::write(&aside, &bytes[c.offset as usize..])?;
            file.set_len(c.offset)?;
            tracing::warn!(path = %path.display(), offset = c.offset, reason = %c.reason, aside = %aside.display(), "log tail set aside");
        }
        let log = LogFile {
            path,
            file,
            len: scan.valid_len,
            fsync,
        };
        Ok((log, scan))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn len(&self) -> u64 {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Appends one frame. A failed write is rolled back to the previous end.
    pub fn append(&mut self, record: &Record) -> io::Result<()> {
        let frame = encode_frame(record);
        let res = self.file.write_all(&frame).and_then(|_| {
            if self.fsync {
                self.file.sync_data()
            } else {
                Ok(())
            }
        });
        match res {
            Ok(()) => {
                self.len += frame.len() as u64;
                Ok(())
            }
            Err(e) => {
                let _ = self.file.set_len(self.len);
                Err(e)
            }
        }
    }

    pub fn sync(&mut self) -> io::Result<()> {
        self.file.sync_data()
    }
}

pub fn corrupt_path(path: &Path, offset: u64) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(format!(".corrupt-{offset}"));
    PathBuf::from(s)
}

/// Reads a whole log without modifying it.
pub fn read_log(path: impl AsRef<Path>) -> io::Result<LogScan> {
    Ok(scan(&std::fs::read(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::persistence::record::SessionId;

    fn idle(n: u128) -> Record {
        Record::Idle {
            session: SessionId(n),
            server_ms: n as f64,
        }
    }

    #[test]
    fn frame_layout() {
        let rec = idle(1);
        let f = encode_frame(&rec);
        let payload = rec.encode();
        assert_eq!(&f[0..4], &(payload.len() as u32).to_le_bytes());
        assert_eq!(f[8], LOG_VERSION);
        assert_eq!(&f[9..], &payload[..]);
        let crc = crc32fast::hash(&f[8..]);
        assert_eq!(&f[4..8], &crc.to_le_bytes());
    }

    #[test]
    fn scan_stops_at_flipped_bit() {
        let mut bytes = Vec::new();
        for i in 0..3 {
            bytes.extend(encode_frame(&idle(i)));
        }
        let second = encode_frame(&idle(0)).len();
        bytes[second + 12] ^= 0x40;
        let s = scan(&bytes);
        assert_eq!(s.records.len(), 1);
        let c = s.corruption.unwrap();
        assert_eq!(c.offset, second as u64);
        assert!(c.reason.contains("checksum"));
    }

    #[test]
    fn torn_tail_is_set_aside_and_appends_resume() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.log");
        {
            let (mut log, scan) = LogFile::open(&path, false).unwrap();
            assert!(scan.records.is_empty());
            log.append(&idle(1)).unwrap();
            log.append(&idle(2)).unwrap();
        }
        let full = std::fs::read(&path).unwrap();
        let cut = full.len() - 3;
        std::fs::write(&path, &full[..cut]).unwrap();
        let (mut log, scan) = LogFile::open(&path, false).unwrap();
        assert_eq!(scan.records, vec![idle(1)]);
        let off = scan.corruption.unwrap().offset;
        assert!(corrupt_path(&path, off).exists());
        log.append(&idle(3)).unwrap();
        drop(log);
        let again = read_log(&path).unwrap();
        assert_eq!(again.records, vec![idle(1), idle(3)]);
        assert!(again.corruption.is_none());
    }
}
