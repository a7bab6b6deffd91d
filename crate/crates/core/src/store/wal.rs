//! Write-ahead log for the demand store.
//!
//! The log is an append-only text file holding one canonical
//! [`TransactionRecord`] per line. Replay tolerates a torn final line (a
//! crash mid-append) by dropping it; any other unparsable line is reported
//! as corruption.

use std::fs::{File, OpenOptions};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Lease, StoreError};
use crate::demand::{to_canonical_string, Demand, DemandResult, SignatureKey};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum WalOp {
    DepositDemand,
    GrantLease,
    DepositResult,
    Cancel,
    Expire,
}

/// One logged state change. `object_name` is the signature digest the change
/// applies to; `value` is the canonical encoding required by `op` (a demand,
/// a lease, a result, or empty for cancel/expire).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransactionRecord {
    pub txn_id: u64,
    pub object_name: String,
    pub op: WalOp,
    pub value: String,
    pub timestamp: u64,
}

/// Decoded payload of a record.
#[derive(Debug, Clone, PartialEq)]
pub enum RecordBody {
    DepositDemand(Demand),
    GrantLease(Lease),
    DepositResult(DemandResult),
    Cancel,
    Expire,
}

impl TransactionRecord {
    pub fn new(txn_id: u64, sig: &SignatureKey, body: &RecordBody, timestamp: u64) -> Result<Self, StoreError> {
        let (op, value) = match body {
            RecordBody::DepositDemand(d) => (
                WalOp::DepositDemand,
                String::from_utf8(d.encode()?).expect("canonical encoding is utf-8"),
            ),
            RecordBody::GrantLease(l) => (WalOp::GrantLease, to_canonical_string(l)?),
            RecordBody::DepositResult(r) => (WalOp::DepositResult, to_canonical_string(r)?),
            RecordBody::Cancel => (WalOp::Cancel, String::new()),
            RecordBody::Expire => (WalOp::Expire, String::new()),
        };
        Ok(Self {
            txn_id,
            object_name: sig.as_str().to_string(),
            op,
            value,
            timestamp,
        })
    }

    pub fn signature(&self) -> Result<SignatureKey, StoreError> {
        SignatureKey::parse(&self.object_name).map_err(|e| StoreError::InvalidRecord(e.to_string()))
    }

    /// Decodes `value` under the schema of `op`.
    pub fn body(&self) -> Result<RecordBody, StoreError> {
        let bad = |e: String| StoreError::InvalidRecord(format!("txn {}: {e}", self.txn_id));
        let sig = self.signature()?;
        match self.op {
            WalOp::DepositDemand => {
                let d = Demand::decode(self.value.as_bytes()).map_err(|e| bad(e.to_string()))?;
                if d.signature().map_err(|e| bad(e.to_string()))? != sig {
                    return Err(bad("demand does not match object name".into()));
                }
                Ok(RecordBody::DepositDemand(d))
            }
            WalOp::GrantLease => {
                let lease: Lease = serde_json::from_str(&self.value).map_err(|e| bad(e.to_string()))?;
                if lease.expires_at <= lease.granted_at {
                    return Err(bad("lease expires before it is granted".into()));
                }
                Ok(RecordBody::GrantLease(lease))
            }
            WalOp::DepositResult => {
                let r: DemandResult = serde_json::from_str(&self.value).map_err(|e| bad(e.to_string()))?;
                if r.signature != sig {
                    return Err(bad("result does not match object name".into()));
                }
                Ok(RecordBody::DepositResult(r))
            }
            WalOp::Cancel | WalOp::Expire if !self.value.is_empty() => Err(bad("unexpected value".into())),
            WalOp::Cancel => Ok(RecordBody::Cancel),
            WalOp::Expire => Ok(RecordBody::Expire),
        }
    }

    fn to_line(&self) -> Result<String, StoreError> {
        let mut line = to_canonical_string(self)?;
        line.push('\n');
        Ok(line)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FlushPolicy {
    /// `fsync` after every append.
    #[default]
    EveryAppend,
    /// `fsync` once every `n` appends. Writes still reach the OS before the
    /// append returns, so they survive a process kill but not a power loss.
    Batched(usize),
}

#[derive(Debug)]
pub struct Wal {
    file: File,
    path: PathBuf,
    next_offset: u64,
    last_txn: Option<u64>,
    flush: FlushPolicy,
    unsynced: usize,
}

/// Records recovered from a log plus whether a torn tail was dropped.
#[derive(Debug, Default)]
pub struct LogContents {
    pub records: Vec<TransactionRecord>,
    /// Byte length of the intact prefix.
    pub valid_len: u64,
    pub torn_tail: bool,
}

/// Reads every intact record from `path`. A missing file reads as empty.
pub fn read_log(path: &Path) -> Result<LogContents, StoreError> {
    let mut raw = Vec::new();
    match File::open(path) {
        Ok(mut f) => {
            f.read_to_end(&mut raw).map_err(StoreError::io)?;
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(LogContents::default()),
        Err(e) => return Err(StoreError::io(e)),
    }

    let mut out = LogContents::default();
    let mut start = 0usize;
    let mut line_no = 0usize;
    let mut last_txn: Option<u64> = None;
    while start < raw.len() {
        line_no += 1;
        let Some(rel) = raw[start..].iter().position(|&b| b == b'\n') else {
            log::warn!(
                "{}: dropping torn final record ({} bytes)",
                path.display(),
                raw.len() - start
            );
            out.torn_tail = true;
            break;
        };
        let line = &raw[start..start + rel];
        let record: TransactionRecord = serde_json::from_slice(line).map_err(|e| StoreError::CorruptLog {
            line: line_no,
            reason: e.to_string(),
        })?;
        record.body().map_err(|e| StoreError::CorruptLog {
            line: line_no,
            reason: e.to_string(),
        })?;
        if last_txn.is_some_and(|t| record.txn_id <= t) {
            return Err(StoreError::CorruptLog {
                line: line_no,
                reason: format!("txn_id {} is not increasing", record.txn_id),
            });
        }
        last_txn = Some(record.txn_id);
        out.records.push(record);
        start += rel + 1;
        out.valid_len = start as u64;
    }
    Ok(out)
}

impl Wal {
    /// Opens (or creates) the log at `path`, cutting off a torn tail so new
    /// appends start on a clean line. Returns the intact records.
    pub fn open(path: impl AsRef<Path>, flush: FlushPolicy) -> Result<(Wal, Vec<TransactionRecord>), StoreError> {
        let path = path.as_ref().to_path_buf();
        let contents = read_log(&path)?;
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(StoreError::io)?;
        if contents.torn_tail {
            file.set_len(contents.valid_len).map_err(StoreError::io)?;
            file.sync_all().map_err(StoreError::io)?;
        }
        let wal = Wal {
            file,
            path,
            next_offset: contents.records.len() as u64,
            last_txn: contents.records.last().map(|r| r.txn_id),
            flush,
            unsynced: 0,
        };
        Ok((wal, contents.records))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn last_txn_id(&self) -> Option<u64> {
        self.last_txn
    }

    /// Appends one record and returns its offset (record index in the log).
    pub fn append(&mut self, record: &TransactionRecord) -> Result<u64, StoreError> {
        if self.last_txn.is_some_and(|t| record.txn_id <= t) {
            return Err(StoreError::InvalidRecord(format!(
                "txn_id {} not greater than {}",
                record.txn_id,
                self.last_txn.unwrap_or_default()
            )));
        }
        record.body()?;
        let line = record.to_line()?;
        self.file.write_all(line.as_bytes()).map_err(StoreError::io)?;
        self.unsynced += 1;
        let sync = match self.flush {
            FlushPolicy::EveryAppend => true,
            FlushPolicy::Batched(n) => self.unsynced >= n.max(1),
        };
        if sync {
            self.file.sync_data().map_err(StoreError::io)?;
            self.unsynced = 0;
        }
        self.last_txn = Some(record.txn_id);
        let offset = self.next_offset;
        self.next_offset += 1;
        Ok(offset)
    }

    pub fn sync(&mut self) -> Result<(), StoreError> {
        self.file.sync_data().map_err(StoreError::io)?;
        self.unsynced = 0;
        Ok(())
    }

    #[cfg(test)]
    pub(crate) fn replace_file_for_test(&mut self, file: File) {
        self.file = file;
    }
}
