//! MAC de-randomization.
//!
//! Probe requests carry model-specific information elements that stay fixed
//! while the link-layer address rotates. Each MAC's elements are hashed into
//! a fixed-width binary fingerprint; MACs whose fingerprints are at Hamming
//! distance zero are grouped into one bucket through a ball-tree range query.

mod balltree;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use thiserror::Error;

use crate::capture::{FrameKind, MacAddr, PacketRecord};

pub use balltree::{BallTree, DEFAULT_LEAF_SIZE};

/// Fingerprint width in bits.
pub const FINGERPRINT_BITS: usize = 256;

pub const BUCKET_REPORT_HEADER: &str = "bucket_id,macs";

#[derive(Debug, Error, PartialEq)]
pub enum ClusterError {
    #[error("MAC {0} has no probe-request model information")]
    Unfingerprintable(MacAddr),
    #[error("fingerprint width mismatch: expected {expected}, got {got} for {mac}")]
    Dimension { mac: MacAddr, expected: usize, got: usize },
    #[error("bucket report line {line}: {msg}")]
    Report { line: usize, msg: String },
}

/// Fixed-width bit vector.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FingerprintVector {
    width: usize,
    words: Vec<u64>,
}

impl FingerprintVector {
    pub fn zeros(width: usize) -> Self {
        FingerprintVector {
            width,
            words: vec![0; width.div_ceil(64)],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn set(&mut self, bit: usize) {
        assert!(bit < self.width, "bit {bit} out of range");
        self.words[bit / 64] |= 1 << (bit % 64);
    }

    pub fn get(&self, bit: usize) -> bool {
        bit < self.width && self.words[bit / 64] >> (bit % 64) & 1 == 1
    }

    pub fn count_ones(&self) -> u32 {
        self.words.iter().map(|w| w.count_ones()).sum()
    }

    /// Hamming distance; vectors of different width are compared over
    /// their common words.
    pub fn hamming(&self, other: &FingerprintVector) -> u32 {
        self.words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a ^ b).count_ones())
            .sum()
    }

    /// True when every bit set in `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &FingerprintVector) -> bool {
        self.width == other.width && self.words.iter().zip(&other.words).all(|(a, b)| a & !b == 0)
    }

    /// Lower-case hex, most significant word first.
    pub fn to_hex(&self) -> String {
        self.words.iter().rev().map(|w| format!("{w:016x}")).collect()
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        if s.is_empty() || !s.len().is_multiple_of(16) {
            return None;
        }
        let mut words = Vec::with_capacity(s.len() / 16);
        for chunk in s.as_bytes().rchunks(16) {
            let chunk = std::str::from_utf8(chunk).ok()?;
            words.push(u64::from_str_radix(chunk, 16).ok()?);
        }
        Some(FingerprintVector {
            width: words.len() * 64,
            words,
        })
    }
}

impl fmt::Debug for FingerprintVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Fingerprint({})", self.to_hex())
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

/// Bit index for one information element: FNV-1a over the tag byte followed
/// by the value bytes, reduced mod the width.
pub fn element_bit(tag: u8, value: &[u8], width: usize) -> usize {
    let mut buf = Vec::with_capacity(value.len() + 1);
    buf.push(tag);
    buf.extend_from_slice(value);
    (fnv1a64(&buf) % width as u64) as usize
}

/// Fingerprint of a set of `(tag, value)` elements. Duplicates are dropped
/// and pairs sorted first, so element order in the frames never matters.
pub fn fingerprint_elements(elements: &[(u8, Vec<u8>)]) -> FingerprintVector {
    let unique: BTreeSet<&(u8, Vec<u8>)> = elements.iter().collect();
    let mut fp = FingerprintVector::zeros(FINGERPRINT_BITS);
    for (tag, value) in unique {
        fp.set(element_bit(*tag, value, FINGERPRINT_BITS));
    }
    fp
}

/// Fingerprint of one MAC from its probe requests.
pub fn extract_fingerprint(records: &[PacketRecord]) -> Result<FingerprintVector, ClusterError> {
    let mac = records.first().map(|r| r.src_mac).unwrap_or_default();
    let elements: Vec<(u8, Vec<u8>)> = records
        .iter()
        .filter(|r| r.frame_kind == FrameKind::ProbeReq)
        .filter_map(|r| r.model_info.as_ref())
        .flatten()
        .cloned()
        .collect();
    if elements.is_empty() {
        return Err(ClusterError::Unfingerprintable(mac));
    }
    Ok(fingerprint_elements(&elements))
}

/// Groups records by source MAC and fingerprints each. MACs without probe
/// model information are returned separately and stay unclustered.
pub fn fingerprints_by_mac(records: &[PacketRecord]) -> (BTreeMap<MacAddr, FingerprintVector>, BTreeSet<MacAddr>) {
    let mut per_mac: BTreeMap<MacAddr, Vec<PacketRecord>> = BTreeMap::new();
    for r in records {
        per_mac.entry(r.src_mac).or_default().push(r.clone());
    }
    let mut prints = BTreeMap::new();
    let mut unprintable = BTreeSet::new();
    for (mac, recs) in per_mac {
        match extract_fingerprint(&recs) {
            Ok(fp) => {
                prints.insert(mac, fp);
            }
            Err(_) => {
                unprintable.insert(mac);
            }
        }
    }
    (prints, unprintable)
}

/// Cluster of MACs sharing one fingerprint.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MacBucket {
    pub fingerprint: Option<FingerprintVector>,
    pub macs: BTreeSet<MacAddr>,
}

impl MacBucket {
    pub fn singleton(mac: MacAddr) -> Self {
        MacBucket {
            fingerprint: None,
            macs: BTreeSet::from([mac]),
        }
    }

    pub fn contains(&self, mac: &MacAddr) -> bool {
        self.macs.contains(mac)
    }
}

/// Groups MACs whose fingerprints are bit-identical. Buckets are returned in
/// ascending order of their smallest MAC, which makes the result independent
/// of input order.
pub fn cluster(fingerprints: &BTreeMap<MacAddr, FingerprintVector>) -> Result<Vec<MacBucket>, ClusterError> {
    let macs: Vec<MacAddr> = fingerprints.keys().copied().collect();
    let points: Vec<FingerprintVector> = fingerprints.values().cloned().collect();
    if let Some(first) = points.first() {
        let expected = first.width();
        for (mac, p) in macs.iter().zip(&points) {
            if p.width() != expected {
                return Err(ClusterError::Dimension {
                    mac: *mac,
                    expected,
                    got: p.width(),
                });
            }
        }
    }
    let tree = BallTree::build(&points, DEFAULT_LEAF_SIZE);
    let mut assigned = vec![false; points.len()];
    let mut buckets = Vec::new();
    // `macs` is sorted, so the first unassigned index is each bucket's
    // smallest member.
    for i in 0..points.len() {
        if assigned[i] {
            continue;
        }
        let neighbours = tree.query_radius(&points[i], 0);
        let mut bucket = MacBucket {
            fingerprint: Some(points[i].clone()),
            macs: BTreeSet::new(),
        };
        for j in neighbours {
            assigned[j] = true;
            bucket.macs.insert(macs[j]);
        }
        buckets.push(bucket);
    }
    Ok(buckets)
}

/// Bucket report rows with dense ids from 0; MACs `|`-separated, sorted.
pub fn bucket_report(buckets: &[MacBucket]) -> String {
    let mut out = String::from(BUCKET_REPORT_HEADER);
    out.push('\n');
    for (id, b) in buckets.iter().enumerate() {
        let macs: Vec<String> = b.macs.iter().map(|m| m.to_string()).collect();
        out.push_str(&format!("{id},{}\n", macs.join("|")));
    }
    out
}

/// Parses a bucket report back into `(bucket_id, macs)` rows.
pub fn parse_bucket_report(text: &str) -> Result<Vec<(u64, BTreeSet<MacAddr>)>, ClusterError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        None => return Ok(Vec::new()),
        Some((_, h)) if h.trim_end_matches('\r') == BUCKET_REPORT_HEADER => {}
        Some(_) => {
            return Err(ClusterError::Report {
                line: 1,
                msg: "missing header".into(),
            })
        }
    }
    let mut rows = Vec::new();
    for (idx, raw) in lines {
        let line = idx + 1;
        let raw = raw.trim_end_matches('\r');
        if raw.is_empty() {
            continue;
        }
        let err = |msg: String| ClusterError::Report { line, msg };
        let (id, macs) = raw.split_once(',').ok_or_else(|| err("expected 2 fields".into()))?;
        let id: u64 = id.parse().map_err(|_| err(format!("bad bucket id `{id}`")))?;
        let macs = macs
            .split('|')
            .map(|m| m.parse::<MacAddr>().map_err(|e| err(e.to_string())))
            .collect::<Result<BTreeSet<_>, _>>()?;
        rows.push((id, macs));
    }
    Ok(rows)
}
