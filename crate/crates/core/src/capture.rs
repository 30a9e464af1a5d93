//! Canonical capture format, chronological ordering and transmitter
//! classification.
//!
//! A capture is a UTF-8 CSV file with a fixed header (see [`CAPTURE_HEADER`]).
//! Empty fields mean "absent". `model_info` is encoded as `tag:hex;tag:hex`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

/// Header row of the capture format, bit-exact.
pub const CAPTURE_HEADER: &str = "timestamp_ns,router_id,link,frame_kind,to_ds,from_ds,src_mac,bssid,rssi_dbm,sqi,ble_tx_power_dbm,ftm_t1_ns,ftm_t2_ns,ftm_t3_ns,ftm_t4_ns,model_info,truth_x_m,truth_y_m";

const N_FIELDS: usize = 18;
/// Fields up to and including `rssi_dbm` are mandatory; trailing optional
/// fields may be omitted entirely.
const N_REQUIRED: usize = 9;

/// Lowest RSSI accepted; doubles as the padding constant downstream.
pub const RSSI_FLOOR_DBM: i32 = -101;

#[derive(Debug, Error)]
pub enum CaptureError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: unknown {what} token `{token}`")]
    UnknownToken {
        line: usize,
        what: &'static str,
        token: String,
    },
    #[error("invalid record: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// 48-bit IEEE 802 address.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct MacAddr(pub [u8; 6]);

impl MacAddr {
    /// Locally administered bit, set on randomized addresses.
    pub fn is_local(&self) -> bool {
        self.0[0] & 0x02 != 0
    }
}

impl fmt::Display for MacAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let b = &self.0;
        write!(
            f,
            "{:02X}:{:02X}:{:02X}:{:02X}:{:02X}:{:02X}",
            b[0], b[1], b[2], b[3], b[4], b[5]
        )
    }
}

impl fmt::Debug for MacAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("malformed MAC address `{0}`")]
pub struct MacParseError(pub String);

impl FromStr for MacAddr {
    type Err = MacParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut out = [0u8; 6];
        let mut parts = s.split(':');
        for byte in out.iter_mut() {
            let part = parts.next().ok_or_else(|| MacParseError(s.to_string()))?;
            if part.len() != 2 {
                return Err(MacParseError(s.to_string()));
            }
            *byte = u8::from_str_radix(part, 16).map_err(|_| MacParseError(s.to_string()))?;
        }
        if parts.next().is_some() {
            return Err(MacParseError(s.to_string()));
        }
        Ok(MacAddr(out))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Link {
    Wifi,
    Ble,
}

impl Link {
    pub fn as_str(self) -> &'static str {
        match self {
            Link::Wifi => "WIFI",
            Link::Ble => "BLE",
        }
    }
}

impl FromStr for Link {
    type Err = ();
    fn from_str(s: &str) -> Result<Self, ()> {
        match s {
            "WIFI" => Ok(Link::Wifi),
            "BLE" => Ok(Link::Ble),
            _ => Err(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FrameKind {
    Beacon,
    ProbeReq,
    Cts,
    Ack,
    Data,
    Ftm,
    BleAdv,
    BleScanRsp,
}

impl FrameKind {
    pub const ALL: [FrameKind; 8] = [
        FrameKind::Beacon,
        FrameKind::ProbeReq,
        FrameKind::Cts,
        FrameKind::Ack,
        FrameKind::Data,
        FrameKind::Ftm,
        FrameKind::BleAdv,
        FrameKind::BleScanRsp,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FrameKind::Beacon => "BEACON",
            FrameKind::ProbeReq => "PROBE_REQ",
            FrameKind::Cts => "CTS",
            FrameKind::Ack => "ACK",
            FrameKind::Data => "DATA",
            FrameKind::Ftm => "FTM",
            FrameKind::BleAdv => "BLE_ADV",
            FrameKind::BleScanRsp => "BLE_SCAN_RSP",
        }
    }
}

impl FromStr for FrameKind {
    type Err = ();
    fn from_str(s: &str) -> Result<Self, ()> {
        FrameKind::ALL.iter().copied().find(|k| k.as_str() == s).ok_or(())
    }
}

/// FTM exchange timestamps: t1 FTM departure (router), t2 FTM arrival
/// (device), t3 ACK departure (device), t4 ACK arrival (router).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FtmTimes {
    pub t1: i64,
    pub t2: i64,
    pub t3: i64,
    pub t4: i64,
}

/// One captured frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PacketRecord {
    pub timestamp_ns: i64,
    pub router_id: String,
    pub link: Link,
    pub frame_kind: FrameKind,
    pub to_ds: bool,
    pub from_ds: bool,
    pub src_mac: MacAddr,
    pub bssid: Option<MacAddr>,
    pub rssi_dbm: i32,
    pub sqi: Option<u8>,
    pub ble_tx_power_dbm: Option<i32>,
    pub ftm_times_ns: Option<FtmTimes>,
    pub model_info: Option<Vec<(u8, Vec<u8>)>>,
    pub truth_pos_m: Option<(f64, f64)>,
}

impl PacketRecord {
    /// Minimal record with every optional field absent.
    pub fn new(
        timestamp_ns: i64,
        router_id: impl Into<String>,
        link: Link,
        frame_kind: FrameKind,
        src_mac: MacAddr,
        rssi_dbm: i32,
    ) -> Self {
        PacketRecord {
            timestamp_ns,
            router_id: router_id.into(),
            link,
            frame_kind,
            to_ds: false,
            from_ds: false,
            src_mac,
            bssid: None,
            rssi_dbm,
            sqi: None,
            ble_tx_power_dbm: None,
            ftm_times_ns: None,
            model_info: None,
            truth_pos_m: None,
        }
    }

    /// Checks the record-level invariants.
    pub fn validate(&self) -> Result<(), String> {
        if !(RSSI_FLOOR_DBM..=0).contains(&self.rssi_dbm) {
            return Err(format!("rssi {} outside [-101, 0]", self.rssi_dbm));
        }
        if let Some(sqi) = self.sqi {
            if sqi > 100 {
                return Err(format!("sqi {sqi} outside [0, 100]"));
            }
        }
        if self.ftm_times_ns.is_some() && self.frame_kind != FrameKind::Ftm {
            return Err("FTM timestamps on a non-FTM frame".into());
        }
        if self.link == Link::Ble && (self.to_ds || self.from_ds) {
            return Err("BLE record with DS bits set".into());
        }
        if self.router_id.is_empty() || self.router_id.contains([',', '\n', '\r']) {
            return Err(format!("bad router id `{}`", self.router_id));
        }
        if let Some((x, y)) = self.truth_pos_m {
            if !x.is_finite() || !y.is_finite() {
                return Err("non-finite truth position".into());
            }
        }
        Ok(())
    }
}

/// Transmitter class inferred from addressing behaviour.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DeviceClass {
    AccessPoint,
    Wds,
    Bridged,
    Mobile,
}

fn opt<T: FromStr>(field: &str, line: usize, name: &str) -> Result<Option<T>, CaptureError> {
    if field.is_empty() {
        return Ok(None);
    }
    field.parse().map(Some).map_err(|_| CaptureError::Parse {
        line,
        msg: format!("bad {name} `{field}`"),
    })
}

fn req<T: FromStr>(field: &str, line: usize, name: &str) -> Result<T, CaptureError> {
    opt(field, line, name)?.ok_or_else(|| CaptureError::Parse {
        line,
        msg: format!("missing {name}"),
    })
}

fn parse_bit(field: &str, line: usize, name: &str) -> Result<bool, CaptureError> {
    match field {
        "0" => Ok(false),
        "1" => Ok(true),
        _ => Err(CaptureError::Parse {
            line,
            msg: format!("{name} must be 0 or 1, got `{field}`"),
        }),
    }
}

/// Parses `tag:hex;tag:hex`.
pub fn parse_model_info(field: &str) -> Result<Vec<(u8, Vec<u8>)>, String> {
    field
        .split(';')
        .map(|pair| {
            let (tag, value) = pair
                .split_once(':')
                .ok_or_else(|| format!("model_info entry `{pair}` lacks `:`"))?;
            let tag: u8 = tag.parse().map_err(|_| format!("bad tag `{tag}`"))?;
            let value = hex::decode(value).map_err(|e| format!("bad hex `{value}`: {e}"))?;
            Ok((tag, value))
        })
        .collect()
}

pub fn format_model_info(info: &[(u8, Vec<u8>)]) -> String {
    info.iter()
        .map(|(tag, value)| format!("{tag}:{}", hex::encode_upper(value)))
        .collect::<Vec<_>>()
        .join(";")
}

fn parse_line(raw: &str, line: usize) -> Result<PacketRecord, CaptureError> {
    let mut f: Vec<&str> = raw.split(',').collect();
    if !(N_REQUIRED..=N_FIELDS).contains(&f.len()) {
        return Err(CaptureError::Parse {
            line,
            msg: format!("expected {N_FIELDS} fields, found {}", f.len()),
        });
    }
    f.resize(N_FIELDS, "");
    let link = f[2].parse().map_err(|_| CaptureError::UnknownToken {
        line,
        what: "link",
        token: f[2].to_string(),
    })?;
    let frame_kind = f[3].parse().map_err(|_| CaptureError::UnknownToken {
        line,
        what: "frame_kind",
        token: f[3].to_string(),
    })?;
    let ftm: [Option<i64>; 4] = [
        opt(f[11], line, "ftm_t1_ns")?,
        opt(f[12], line, "ftm_t2_ns")?,
        opt(f[13], line, "ftm_t3_ns")?,
        opt(f[14], line, "ftm_t4_ns")?,
    ];
    let ftm_times_ns = match ftm {
        [None, None, None, None] => None,
        [Some(t1), Some(t2), Some(t3), Some(t4)] => Some(FtmTimes { t1, t2, t3, t4 }),
        _ => {
            return Err(CaptureError::Parse {
                line,
                msg: "partial FTM quadruple".into(),
            })
        }
    };
    let model_info = if f[15].is_empty() {
        None
    } else {
        Some(parse_model_info(f[15]).map_err(|msg| CaptureError::Parse { line, msg })?)
    };
    let truth_pos_m = match (
        opt::<f64>(f[16], line, "truth_x_m")?,
        opt::<f64>(f[17], line, "truth_y_m")?,
    ) {
        (None, None) => None,
        (Some(x), Some(y)) => Some((x, y)),
        _ => {
            return Err(CaptureError::Parse {
                line,
                msg: "truth position needs both x and y".into(),
            })
        }
    };
    let record = PacketRecord {
        timestamp_ns: req(f[0], line, "timestamp_ns")?,
        router_id: f[1].to_string(),
        link,
        frame_kind,
        to_ds: parse_bit(f[4], line, "to_ds")?,
        from_ds: parse_bit(f[5], line, "from_ds")?,
        src_mac: req(f[6], line, "src_mac")?,
        bssid: opt(f[7], line, "bssid")?,
        rssi_dbm: req(f[8], line, "rssi_dbm")?,
        sqi: opt(f[9], line, "sqi")?,
        ble_tx_power_dbm: opt(f[10], line, "ble_tx_power_dbm")?,
        ftm_times_ns,
        model_info,
        truth_pos_m,
    };
    record.validate().map_err(|msg| CaptureError::Parse { line, msg })?;
    Ok(record)
}

/// Parses capture text. Accepts an empty input, or a header followed by
/// zero or more records. A header-less first line is parsed as a record.
pub fn parse_capture_str(text: &str) -> Result<Vec<PacketRecord>, CaptureError> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let raw = raw.strip_suffix('\r').unwrap_or(raw);
        if idx == 0 && raw == CAPTURE_HEADER {
            continue;
        }
        if raw.is_empty() {
            continue;
        }
        out.push(parse_line(raw, line)?);
    }
    Ok(out)
}

pub fn parse_capture(path: impl AsRef<Path>) -> Result<Vec<PacketRecord>, CaptureError> {
    let text = std::fs::read_to_string(path)?;
    parse_capture_str(&text)
}

fn fmt_opt<T: fmt::Display>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

pub fn format_record(r: &PacketRecord) -> String {
    let (t1, t2, t3, t4) = match r.ftm_times_ns {
        Some(q) => (Some(q.t1), Some(q.t2), Some(q.t3), Some(q.t4)),
        None => (None, None, None, None),
    };
    let (x, y) = match r.truth_pos_m {
        Some((x, y)) => (Some(x), Some(y)),
        None => (None, None),
    };
    format!(
        "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
        r.timestamp_ns,
        r.router_id,
        r.link.as_str(),
        r.frame_kind.as_str(),
        r.to_ds as u8,
        r.from_ds as u8,
        r.src_mac,
        fmt_opt(r.bssid),
        r.rssi_dbm,
        fmt_opt(r.sqi),
        fmt_opt(r.ble_tx_power_dbm),
        fmt_opt(t1),
        fmt_opt(t2),
        fmt_opt(t3),
        fmt_opt(t4),
        r.model_info.as_deref().map(format_model_info).unwrap_or_default(),
        fmt_opt(x),
        fmt_opt(y),
    )
}

/// Serializes records to the capture format, header included.
pub fn serialize_capture(records: &[PacketRecord]) -> String {
    let mut out = String::with_capacity(64 * (records.len() + 1));
    out.push_str(CAPTURE_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format_record(r));
        out.push('\n');
    }
    out
}

/// Stable ascending sort on `timestamp_ns`.
pub fn sort_chronological(mut records: Vec<PacketRecord>) -> Vec<PacketRecord> {
    records.sort_by_key(|r| r.timestamp_ns);
    records
}

/// Assigns each source MAC one class with precedence AP > WDS > bridged > mobile.
pub fn classify_devices(records: &[PacketRecord]) -> BTreeMap<MacAddr, DeviceClass> {
    #[derive(Default)]
    struct Seen {
        beacon: bool,
        wds: bool,
        bridged: bool,
    }
    let mut seen: BTreeMap<MacAddr, Seen> = BTreeMap::new();
    for r in records {
        let s = seen.entry(r.src_mac).or_default();
        s.beacon |= r.frame_kind == FrameKind::Beacon;
        s.wds |= r.to_ds && r.from_ds;
        s.bridged |= r.from_ds && r.bssid != Some(r.src_mac);
    }
    seen.into_iter()
        .map(|(mac, s)| {
            let class = if s.beacon {
                DeviceClass::AccessPoint
            } else if s.wds {
                DeviceClass::Wds
            } else if s.bridged {
                DeviceClass::Bridged
            } else {
                DeviceClass::Mobile
            };
            (mac, class)
        })
        .collect()
}

/// Keeps only records whose source is classified as mobile.
pub fn filter_mobile(records: &[PacketRecord], classes: &BTreeMap<MacAddr, DeviceClass>) -> Vec<PacketRecord> {
    records
        .iter()
        .filter(|r| classes.get(&r.src_mac) == Some(&DeviceClass::Mobile))
        .cloned()
        .collect()
}

/// Distinct mobile MACs, for reporting.
pub fn mobile_macs(classes: &BTreeMap<MacAddr, DeviceClass>) -> BTreeSet<MacAddr> {
    classes
        .iter()
        .filter(|(_, c)| **c == DeviceClass::Mobile)
        .map(|(m, _)| *m)
        .collect()
}
