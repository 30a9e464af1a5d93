//! Append-only log of AES-256-GCM blobs.
//!
//! ```text
//! "TWB1" | flags u8 | kind u8 | job u64 | bucket u64 | nonce [12] | ct_len u32 | ciphertext+tag
//! ```
//! Integers are little-endian. The 38-byte header is the AEAD associated
//! data, so a blob cannot be moved to another bucket or kind undetected.
//! Every job ends with a `Commit` blob carrying the job's blob count; an
//! uncommitted or torn tail is cut off when the log is opened.
//!
//! Erasure overwrites nonce and ciphertext with fresh random bytes and sets
//! `FLAG_ERASED`. The header stays so the log can still be walked.

use std::fs::{File, OpenOptions};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};

use aes_gcm::aead::{Aead, KeyInit, Payload};
use aes_gcm::{Aes256Gcm, Nonce};
use rand::RngCore;

pub const BLOB_MAGIC: &[u8; 4] = b"TWB1";
pub const HEADER_LEN: usize = 38;
pub const NONCE_LEN: usize = 12;
pub const TAG_LEN: usize = 16;
pub const FLAG_ERASED: u8 = 1;
/// Bucket field of blobs that belong to no device.
pub const NO_BUCKET: u64 = u64::MAX;
const MAX_BLOB: usize = 1 << 30;

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("storage io: {0}")]
    Io(#[from] std::io::Error),
    #[error("storage key must be 64 hex characters")]
    BadKey,
    #[error("blob at offset {0} failed authentication")]
    Auth(u64),
    #[error("blob at offset {0} is erased")]
    Erased(u64),
    #[error("blob of {0} bytes is too large")]
    TooLarge(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BlobKind {
    Job = 1,
    Device = 2,
    Records = 3,
    Frames = 4,
    Path = 5,
    Commit = 6,
}

impl BlobKind {
    fn from_u8(b: u8) -> Option<BlobKind> {
        Some(match b {
            1 => BlobKind::Job,
            2 => BlobKind::Device,
            3 => BlobKind::Records,
            4 => BlobKind::Frames,
            5 => BlobKind::Path,
            6 => BlobKind::Commit,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlobHeader {
    pub flags: u8,
    pub kind: BlobKind,
    pub job: u64,
    pub bucket: u64,
    pub nonce: [u8; NONCE_LEN],
    pub ct_len: u32,
}

impl BlobHeader {
    pub fn encode(&self) -> [u8; HEADER_LEN] {
        let mut h = [0u8; HEADER_LEN];
        h[..4].copy_from_slice(BLOB_MAGIC);
        h[4] = self.flags;
        h[5] = self.kind as u8;
        h[6..14].copy_from_slice(&self.job.to_le_bytes());
        h[14..22].copy_from_slice(&self.bucket.to_le_bytes());
        h[22..34].copy_from_slice(&self.nonce);
        h[34..38].copy_from_slice(&self.ct_len.to_le_bytes());
        h
    }

    pub fn decode(b: &[u8]) -> Option<BlobHeader> {
        if b.len() < HEADER_LEN || &b[..4] != BLOB_MAGIC {
            return None;
        }
        let u64_at = |i: usize| u64::from_le_bytes(b[i..i + 8].try_into().expect("8 bytes"));
        let ct_len = u32::from_le_bytes(b[34..38].try_into().expect("4 bytes"));
        if (ct_len as usize) < TAG_LEN {
            return None;
        }
        Some(BlobHeader {
            flags: b[4],
            kind: BlobKind::from_u8(b[5])?,
            job: u64_at(6),
            bucket: u64_at(14),
            nonce: b[22..34].try_into().expect("12 bytes"),
            ct_len,
        })
    }

    fn aad(&self) -> [u8; HEADER_LEN] {
        // Authenticated as written, before any erase flag.
        BlobHeader { flags: 0, ..*self }.encode()
    }
}

/// Location of one blob in the log.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlobRef {
    pub offset: u64,
    pub header: BlobHeader,
}

impl BlobRef {
    pub fn kind(&self) -> BlobKind {
        self.header.kind
    }

    pub fn bucket(&self) -> u64 {
        self.header.bucket
    }

    /// Byte ranges an erase overwrites: the nonce and the ciphertext.
    pub fn secret_spans(&self) -> [(u64, usize); 2] {
        [
            (self.offset + 22, NONCE_LEN),
            (self.offset + HEADER_LEN as u64, self.header.ct_len as usize),
        ]
    }

    fn end(&self) -> u64 {
        self.offset + HEADER_LEN as u64 + self.header.ct_len as u64
    }
}

/// One blob overwritten by an erase, for the receipt.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Overwrite {
    pub blob_offset: u64,
    /// `(offset, length)` of the nonce and of the ciphertext.
    pub spans: [(u64, usize); 2],
}

impl Overwrite {
    pub fn bytes(&self) -> usize {
        self.spans.iter().map(|s| s.1).sum()
    }
}

pub fn key_from_hex(s: &str) -> Result<[u8; 32], StoreError> {
    let bytes = hex::decode(s.trim()).map_err(|_| StoreError::BadKey)?;
    bytes.try_into().map_err(|_| StoreError::BadKey)
}

/// A blob to append: kind, bucket and plaintext.
pub type PlannedBlob = (BlobKind, u64, Vec<u8>);

pub struct Store {
    path: PathBuf,
    file: File,
    cipher: Aes256Gcm,
    blobs: Vec<BlobRef>,
    end: u64,
    next_job: u64,
}

impl std::fmt::Debug for Store {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Store")
            .field("path", &self.path)
            .field("blobs", &self.blobs.len())
            .finish()
    }
}

impl Store {
    /// Opens or creates the log. A torn tail after the last commit is cut
    /// off; a commit that does not authenticate is an error.
    pub fn open(path: impl AsRef<Path>, key: &[u8; 32]) -> Result<Store, StoreError> {
        let path = path.as_ref().to_path_buf();
        let file = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(false)
            .open(&path)?;
        let mut store = Store {
            path,
            file,
            cipher: Aes256Gcm::new(key.into()),
            blobs: Vec::new(),
            end: 0,
            next_job: 1,
        };
        store.replay()?;
        Ok(store)
    }

    fn replay(&mut self) -> Result<(), StoreError> {
        let len = self.file.metadata()?.len();
        let mut pos = 0u64;
        let mut pending = Vec::new();
        let mut header = [0u8; HEADER_LEN];
        while pos + HEADER_LEN as u64 <= len {
            self.file.read_exact_at(&mut header, pos)?;
            let Some(h) = BlobHeader::decode(&header) else { break };
            let b = BlobRef { offset: pos, header: h };
            if b.end() > len {
                break;
            }
            if h.kind == BlobKind::Commit {
                // A commit that fails authentication means a wrong key or
                // tampering, not a torn write: refuse rather than truncate.
                let count = self.decrypt(&b)?;
                let ok = <[u8; 4]>::try_from(count.as_slice())
                    .map(u32::from_le_bytes)
                    .is_ok_and(|n| n as usize == pending.len())
                    && pending.iter().all(|p: &BlobRef| p.header.job == h.job);
                if !ok {
                    return Err(StoreError::Auth(b.offset));
                }
                self.blobs.append(&mut pending);
                self.blobs.push(b);
                self.end = b.end();
                self.next_job = self.next_job.max(h.job + 1);
            } else {
                pending.push(b);
            }
            pos = b.end();
        }
        if self.end < len {
            log::warn!(
                "dropping {} uncommitted bytes from {}",
                len - self.end,
                self.path.display()
            );
            self.file.set_len(self.end)?;
            self.file.sync_all()?;
        }
        Ok(())
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Committed blobs that are not erased, in log order, commits excluded.
    pub fn live(&self) -> impl Iterator<Item = &BlobRef> {
        self.blobs
            .iter()
            .filter(|b| b.header.flags & FLAG_ERASED == 0 && b.header.kind != BlobKind::Commit)
    }

    /// Largest bucket id ever written, erased blobs included, so ids are never reused.
    pub fn max_bucket(&self) -> Option<u64> {
        self.blobs
            .iter()
            .map(|b| b.header.bucket)
            .filter(|&b| b != NO_BUCKET)
            .max()
    }

    pub fn next_job(&self) -> u64 {
        self.next_job
    }

    fn decrypt(&self, b: &BlobRef) -> Result<Vec<u8>, StoreError> {
        let mut ct = vec![0u8; b.header.ct_len as usize];
        self.file.read_exact_at(&mut ct, b.offset + HEADER_LEN as u64)?;
        self.cipher
            .decrypt(
                Nonce::from_slice(&b.header.nonce),
                Payload {
                    msg: &ct,
                    aad: &b.header.aad(),
                },
            )
            .map_err(|_| StoreError::Auth(b.offset))
    }

    /// Reads a blob back, re-checking the on-disk header.
    pub fn read(&self, b: &BlobRef) -> Result<Vec<u8>, StoreError> {
        let mut header = [0u8; HEADER_LEN];
        self.file.read_exact_at(&mut header, b.offset)?;
        let on_disk = BlobHeader::decode(&header).ok_or(StoreError::Auth(b.offset))?;
        if on_disk.flags & FLAG_ERASED != 0 {
            return Err(StoreError::Erased(b.offset));
        }
        self.decrypt(&BlobRef {
            offset: b.offset,
            header: on_disk,
        })
    }

    /// Appends one job's blobs and its commit in a single write. On failure
    /// the log is cut back to where it was.
    pub fn append_job(&mut self, blobs: &[PlannedBlob]) -> Result<(u64, Vec<BlobRef>), StoreError> {
        let job = self.next_job;
        let mut buf = Vec::new();
        let mut refs = Vec::with_capacity(blobs.len() + 1);
        let count = (blobs.len() as u32).to_le_bytes();
        let all = blobs
            .iter()
            .map(|(k, bucket, p)| (*k, *bucket, p.as_slice()))
            .chain(std::iter::once((BlobKind::Commit, NO_BUCKET, &count[..])));
        for (kind, bucket, plain) in all {
            if plain.len() > MAX_BLOB {
                return Err(StoreError::TooLarge(plain.len()));
            }
            let mut nonce = [0u8; NONCE_LEN];
            rand::rng().fill_bytes(&mut nonce);
            let header = BlobHeader {
                flags: 0,
                kind,
                job,
                bucket,
                nonce,
                ct_len: (plain.len() + TAG_LEN) as u32,
            };
            let ct = self
                .cipher
                .encrypt(
                    Nonce::from_slice(&nonce),
                    Payload {
                        msg: plain,
                        aad: &header.aad(),
                    },
                )
                .expect("AES-GCM encryption of a bounded buffer");
            refs.push(BlobRef {
                offset: self.end + buf.len() as u64,
                header,
            });
            buf.extend_from_slice(&header.encode());
            buf.extend_from_slice(&ct);
        }
        let write = (|| {
            self.file.write_all_at(&buf, self.end)?;
            self.file.sync_data()
        })();
        if let Err(e) = write {
            let _ = self.file.set_len(self.end);
            return Err(e.into());
        }
        self.end += buf.len() as u64;
        self.next_job += 1;
        self.blobs.extend_from_slice(&refs);
        refs.pop();
        Ok((job, refs))
    }

    /// Overwrites nonce and ciphertext of every live blob of `bucket` with
    /// random bytes and flags them erased.
    pub fn erase_bucket(&mut self, bucket: u64) -> Result<Vec<Overwrite>, StoreError> {
        let mut out = Vec::new();
        let mut rng = rand::rng();
        for b in self.blobs.iter_mut() {
            if b.header.bucket != bucket || b.header.flags & FLAG_ERASED != 0 {
                continue;
            }
            let spans = b.secret_spans();
            for (off, len) in spans {
                let mut noise = vec![0u8; len];
                rng.fill_bytes(&mut noise);
                self.file.write_all_at(&noise, off)?;
            }
            b.header.flags |= FLAG_ERASED;
            self.file.write_all_at(&[b.header.flags], b.offset + 4)?;
            out.push(Overwrite {
                blob_offset: b.offset,
                spans,
            });
        }
        self.file.sync_data()?;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const KEY: [u8; 32] = [7; 32];

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn header_round_trip() {
        let h = BlobHeader {
            flags: 0,
            kind: BlobKind::Path,
            job: 3,
            bucket: 9,
            nonce: [1; 12],
            ct_len: 40,
        };
        assert_eq!(BlobHeader::decode(&h.encode()), Some(h));
        let mut bad = h.encode();
        bad[5] = 99;
        assert_eq!(BlobHeader::decode(&bad), None);
    }

    #[test]
    fn jobs_survive_reopen() {
        let dir = tmp();
        let path = dir.path().join("log");
        {
            let mut s = Store::open(&path, &KEY).unwrap();
            s.append_job(&[
                (BlobKind::Device, 1, b"one".to_vec()),
                (BlobKind::Path, 1, b"two".to_vec()),
            ])
            .unwrap();
            s.append_job(&[(BlobKind::Job, NO_BUCKET, b"three".to_vec())]).unwrap();
        }
        let s = Store::open(&path, &KEY).unwrap();
        let got: Vec<Vec<u8>> = s.live().map(|b| s.read(b).unwrap()).collect();
        assert_eq!(got, vec![b"one".to_vec(), b"two".to_vec(), b"three".to_vec()]);
        assert_eq!(s.next_job(), 3);
    }

    #[test]
    fn torn_tail_is_dropped() {
        let dir = tmp();
        let path = dir.path().join("log");
        let keep;
        {
            let mut s = Store::open(&path, &KEY).unwrap();
            s.append_job(&[(BlobKind::Device, 1, b"kept".to_vec())]).unwrap();
            keep = std::fs::metadata(&path).unwrap().len();
            s.append_job(&[(BlobKind::Device, 2, b"torn".to_vec())]).unwrap();
        }
        let full = std::fs::metadata(&path).unwrap().len();
        let f = OpenOptions::new().write(true).open(&path).unwrap();
        f.set_len(full - 5).unwrap();
        let s = Store::open(&path, &KEY).unwrap();
        assert_eq!(s.live().count(), 1);
        assert_eq!(std::fs::metadata(&path).unwrap().len(), keep);
    }

    #[test]
    fn tampering_and_wrong_key_fail_closed() {
        let dir = tmp();
        let path = dir.path().join("log");
        let mut s = Store::open(&path, &KEY).unwrap();
        let (_, refs) = s.append_job(&[(BlobKind::Device, 1, b"secret".to_vec())]).unwrap();
        let b = refs[0];
        // Flip one ciphertext byte.
        let mut byte = [0u8];
        s.file.read_exact_at(&mut byte, b.offset + HEADER_LEN as u64).unwrap();
        s.file
            .write_all_at(&[byte[0] ^ 1], b.offset + HEADER_LEN as u64)
            .unwrap();
        assert!(matches!(s.read(&b), Err(StoreError::Auth(_))));

        let len = std::fs::metadata(dir.path().join("log")).unwrap().len();
        assert!(matches!(
            Store::open(dir.path().join("log"), &[8; 32]),
            Err(StoreError::Auth(_))
        ));
        assert_eq!(std::fs::metadata(dir.path().join("log")).unwrap().len(), len);
    }

    #[test]
    fn header_is_authenticated() {
        let dir = tmp();
        let mut s = Store::open(dir.path().join("log"), &KEY).unwrap();
        let (_, refs) = s.append_job(&[(BlobKind::Device, 1, b"secret".to_vec())]).unwrap();
        let b = refs[0];
        s.file.write_all_at(&2u64.to_le_bytes(), b.offset + 14).unwrap();
        assert!(s.read(&b).is_err());
    }

    #[test]
    fn erase_overwrites_only_the_bucket() {
        let dir = tmp();
        let path = dir.path().join("log");
        let mut s = Store::open(&path, &KEY).unwrap();
        s.append_job(&[(BlobKind::Device, 1, vec![0; 64]), (BlobKind::Device, 2, vec![0; 64])])
            .unwrap();
        let before = std::fs::read(&path).unwrap();
        let receipt = s.erase_bucket(1).unwrap();
        assert_eq!(receipt.len(), 1);
        let after = std::fs::read(&path).unwrap();
        assert_eq!(receipt[0].bytes(), NONCE_LEN + 64 + TAG_LEN);
        let mut touched = vec![false; before.len()];
        touched[receipt[0].blob_offset as usize + 4] = true;
        for (off, len) in receipt[0].spans {
            let span = off as usize..off as usize + len;
            assert_ne!(before[span.clone()], after[span.clone()]);
            assert!(after[span.clone()].iter().any(|&b| b != 0));
            touched[span].fill(true);
        }
        for (i, t) in touched.iter().enumerate() {
            if !t {
                assert_eq!(before[i], after[i], "byte {i} changed");
            }
        }
        assert_eq!(s.live().map(|b| b.bucket()).collect::<Vec<_>>(), vec![2]);

        drop(s);
        let s = Store::open(&path, &KEY).unwrap();
        assert_eq!(s.live().map(|b| b.bucket()).collect::<Vec<_>>(), vec![2]);
    }

    #[test]
    fn key_parsing() {
        assert_eq!(key_from_hex(&"ab".repeat(32)).unwrap(), [0xab; 32]);
        assert!(key_from_hex("abcd").is_err());
        assert!(key_from_hex(&"zz".repeat(32)).is_err());
    }
}
