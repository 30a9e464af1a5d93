//! Localization features: path loss, inferred Wi-Fi TX power, FTM time of
//! flight, and the synchronized per-timestep feature frame.
//!
//! Timestamps are snapped to a 100 µs grid (nearest, ties up). Each
//! `(router, kind)` series is averaged within a slot, linearly interpolated
//! across interior gaps and padded outside its measured span: RSSI-family
//! kinds with -101 dBm and time of flight with 200 ns.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::capture::{FrameKind, FtmTimes, Link, PacketRecord};
use crate::simulate::RouterSpec;

/// Grid spacing in nanoseconds.
pub const SLOT_NS: i64 = 100_000;
/// Padding for RSSI, SQI and TX-power series.
pub const RSSI_PAD: f64 = -101.0;
/// Padding for time of flight, also the largest admissible value.
pub const TOF_PAD_NS: f64 = 200.0;

#[derive(Debug, Error, PartialEq)]
pub enum FeatureError {
    #[error("non-monotone FTM quadruple {0:?}")]
    Ftm(FtmTimes),
    #[error("no co-located BLE/Wi-Fi slots to estimate TX power")]
    NoEstimate,
    #[error("unknown feature column `{0}`")]
    Column(String),
    #[error("frame export line {line}: {msg}")]
    Export { line: usize, msg: String },
}

/// Path loss as transmit minus receive.
pub fn ble_path_loss(p_tx_dbm: f64, p_rx_dbm: f64) -> f64 {
    p_tx_dbm - p_rx_dbm
}

/// Wi-Fi TX power assuming the BLE and Wi-Fi losses at one position agree.
pub fn infer_wifi_tx_power(ble_loss_db: f64, p_wifi_rx_dbm: f64) -> f64 {
    ble_loss_db + p_wifi_rx_dbm
}

pub fn wifi_path_loss(p_wifi_tx_dbm: f64, p_wifi_rx_dbm: f64) -> f64 {
    p_wifi_tx_dbm - p_wifi_rx_dbm
}

/// One-way time of flight from an FTM exchange: half the round trip with
/// the responder turnaround removed.
pub fn tof_from_ftm(q: FtmTimes) -> Result<f64, FeatureError> {
    if q.t4 <= q.t1 || q.t3 < q.t2 {
        return Err(FeatureError::Ftm(q));
    }
    let rtt = (q.t4 - q.t1) - (q.t3 - q.t2);
    if rtt <= 0 {
        return Err(FeatureError::Ftm(q));
    }
    Ok(rtt as f64 / 2.0)
}

/// Rounds to the nearest 100 µs slot, ties going up.
pub fn round_to_slot(t_ns: i64) -> i64 {
    (t_ns + SLOT_NS / 2).div_euclid(SLOT_NS) * SLOT_NS
}

/// Median of a non-empty sample; mean of the middle pair for even counts.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TxPowerEstimate {
    pub device_key: String,
    pub p_wifi_tx_dbm: f64,
    pub n_samples: usize,
}

/// Per-device Wi-Fi TX power: median of `L_ble + rx_wifi` over every
/// `(router, slot)` where both a BLE loss and a Wi-Fi RSSI were captured.
pub fn estimate_wifi_tx_power(device_key: &str, records: &[PacketRecord]) -> Result<TxPowerEstimate, FeatureError> {
    let mut ble: BTreeMap<(&str, i64), (f64, usize)> = BTreeMap::new();
    let mut wifi: BTreeMap<(&str, i64), (f64, usize)> = BTreeMap::new();
    for r in records {
        let key = (r.router_id.as_str(), round_to_slot(r.timestamp_ns));
        match (r.link, r.ble_tx_power_dbm) {
            (Link::Ble, Some(tx)) => {
                let e = ble.entry(key).or_default();
                e.0 += ble_path_loss(tx as f64, r.rssi_dbm as f64);
                e.1 += 1;
            }
            (Link::Wifi, _) => {
                let e = wifi.entry(key).or_default();
                e.0 += r.rssi_dbm as f64;
                e.1 += 1;
            }
            _ => {}
        }
    }
    let samples: Vec<f64> = ble
        .iter()
        .filter_map(|(key, (loss, n))| {
            wifi.get(key)
                .map(|(rx, m)| infer_wifi_tx_power(loss / *n as f64, rx / *m as f64))
        })
        .collect();
    let p = median(&samples).ok_or(FeatureError::NoEstimate)?;
    Ok(TxPowerEstimate {
        device_key: device_key.to_string(),
        p_wifi_tx_dbm: p,
        n_samples: samples.len(),
    })
}

/// Path-loss sample derived from one frame entry.
#[derive(Debug, Clone, PartialEq)]
pub struct PathLossSample {
    pub t_ns: i64,
    pub router_id: String,
    pub loss_db: f64,
    pub link: Link,
    /// The receive value behind this loss was padding.
    pub padded: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TofSample {
    pub t_ns: i64,
    pub tof_ns: f64,
}

/// Feature kinds. Declaration order equals lexicographic order of the
/// column names so that derived `Ord` sorts columns as exported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FeatureKind {
    BleLoss,
    BleRssi,
    BleTx,
    Sqi,
    Tof,
    WifiLoss,
    WifiRssi,
}

impl FeatureKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FeatureKind::BleLoss => "ble_loss",
            FeatureKind::BleRssi => "ble_rssi",
            FeatureKind::BleTx => "ble_tx",
            FeatureKind::Sqi => "sqi",
            FeatureKind::Tof => "tof",
            FeatureKind::WifiLoss => "wifi_loss",
            FeatureKind::WifiRssi => "wifi_rssi",
        }
    }

    /// Value written for a missing measurement. Loss kinds have no constant
    /// padding; they are derived from padded receive values.
    pub fn padding(self) -> Option<f64> {
        match self {
            FeatureKind::BleRssi | FeatureKind::BleTx | FeatureKind::Sqi | FeatureKind::WifiRssi => Some(RSSI_PAD),
            FeatureKind::Tof => Some(TOF_PAD_NS),
            FeatureKind::BleLoss | FeatureKind::WifiLoss => None,
        }
    }
}

impl FromStr for FeatureKind {
    type Err = FeatureError;
    fn from_str(s: &str) -> Result<Self, FeatureError> {
        [
            FeatureKind::BleLoss,
            FeatureKind::BleRssi,
            FeatureKind::BleTx,
            FeatureKind::Sqi,
            FeatureKind::Tof,
            FeatureKind::WifiLoss,
            FeatureKind::WifiRssi,
        ]
        .into_iter()
        .find(|k| k.as_str() == s)
        .ok_or_else(|| FeatureError::Column(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Column {
    pub router_id: String,
    pub kind: FeatureKind,
}

impl fmt::Display for Column {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.router_id, self.kind.as_str())
    }
}

impl FromStr for Column {
    type Err = FeatureError;
    fn from_str(s: &str) -> Result<Self, FeatureError> {
        let (router, kind) = s.rsplit_once(':').ok_or_else(|| FeatureError::Column(s.to_string()))?;
        if router.is_empty() {
            return Err(FeatureError::Column(s.to_string()));
        }
        Ok(Column {
            router_id: router.to_string(),
            kind: kind.parse()?,
        })
    }
}

/// Which feature families a deployment feeds the localizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureSet {
    pub wifi_rssi: bool,
    pub sqi: bool,
    pub ble: bool,
    pub tof: bool,
}

impl Default for FeatureSet {
    fn default() -> Self {
        FeatureSet {
            wifi_rssi: true,
            sqi: true,
            ble: true,
            tof: true,
        }
    }
}

/// Ordered feature columns of one deployment; `F_input` is its length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureLayout {
    columns: Vec<Column>,
}

impl FeatureLayout {
    /// Columns are sorted and deduplicated.
    pub fn new(mut columns: Vec<Column>) -> Self {
        columns.sort();
        columns.dedup();
        FeatureLayout { columns }
    }

    pub fn for_routers(routers: &[RouterSpec], set: FeatureSet) -> Self {
        let mut cols = Vec::new();
        for r in routers {
            let mut push = |kind| {
                cols.push(Column {
                    router_id: r.router_id.clone(),
                    kind,
                })
            };
            if set.wifi_rssi {
                push(FeatureKind::WifiRssi);
            }
            if set.sqi {
                push(FeatureKind::Sqi);
            }
            if set.ble && r.supports_ble {
                push(FeatureKind::BleRssi);
                push(FeatureKind::BleTx);
            }
            if set.tof && r.supports_ftm {
                push(FeatureKind::Tof);
            }
        }
        FeatureLayout::new(cols)
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn index_of(&self, router_id: &str, kind: FeatureKind) -> Option<usize> {
        self.columns
            .binary_search_by(|c| (c.router_id.as_str(), c.kind).cmp(&(router_id, kind)))
            .ok()
    }

    /// Layout after `apply_path_loss`: RSSI columns renamed to loss columns.
    pub fn path_loss_variant(&self) -> Self {
        FeatureLayout::new(
            self.columns
                .iter()
                .map(|c| Column {
                    router_id: c.router_id.clone(),
                    kind: match c.kind {
                        FeatureKind::BleRssi => FeatureKind::BleLoss,
                        FeatureKind::WifiRssi => FeatureKind::WifiLoss,
                        k => k,
                    },
                })
                .collect(),
        )
    }
}

/// Synchronized feature vector at one grid instant.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFrame {
    pub t_ns: i64,
    pub values: Vec<f64>,
    /// `true` = measured (or interpolated), `false` = padded.
    pub mask: Vec<bool>,
}

impl FeatureFrame {
    pub fn padded(t_ns: i64, layout: &FeatureLayout) -> Self {
        FeatureFrame {
            t_ns,
            values: layout
                .columns()
                .iter()
                .map(|c| c.kind.padding().unwrap_or(0.0))
                .collect(),
            mask: vec![false; layout.len()],
        }
    }
}

type Series = BTreeMap<i64, (f64, usize)>;

fn add(series: &mut [Series], idx: Option<usize>, slot: i64, value: f64) {
    if let Some(i) = idx {
        let e = series[i].entry(slot).or_default();
        e.0 += value;
        e.1 += 1;
    }
}

/// Builds feature frames for one device's mobile records.
///
/// Frames are emitted on the union of occupied slots across all columns.
/// Records from routers outside the layout are ignored.
pub fn synchronize(records: &[PacketRecord], layout: &FeatureLayout) -> Vec<FeatureFrame> {
    let mut series: Vec<Series> = vec![Series::new(); layout.len()];
    for r in records {
        let slot = round_to_slot(r.timestamp_ns);
        let router = r.router_id.as_str();
        match r.link {
            Link::Wifi => {
                add(
                    &mut series,
                    layout.index_of(router, FeatureKind::WifiRssi),
                    slot,
                    r.rssi_dbm as f64,
                );
                if let Some(sqi) = r.sqi {
                    add(&mut series, layout.index_of(router, FeatureKind::Sqi), slot, sqi as f64);
                }
                if r.frame_kind == FrameKind::Ftm {
                    if let Some(tof) = r.ftm_times_ns.and_then(|q| tof_from_ftm(q).ok()) {
                        add(
                            &mut series,
                            layout.index_of(router, FeatureKind::Tof),
                            slot,
                            tof.min(TOF_PAD_NS),
                        );
                    }
                }
            }
            Link::Ble => {
                add(
                    &mut series,
                    layout.index_of(router, FeatureKind::BleRssi),
                    slot,
                    r.rssi_dbm as f64,
                );
                if let Some(tx) = r.ble_tx_power_dbm {
                    add(
                        &mut series,
                        layout.index_of(router, FeatureKind::BleTx),
                        slot,
                        tx as f64,
                    );
                }
            }
        }
    }

    let grid: BTreeSet<i64> = series.iter().flat_map(|s| s.keys().copied()).collect();
    let mut frames: Vec<FeatureFrame> = grid.iter().map(|&t| FeatureFrame::padded(t, layout)).collect();

    for (col, s) in series.iter().enumerate() {
        let points: Vec<(i64, f64)> = s.iter().map(|(&t, &(sum, n))| (t, sum / n as f64)).collect();
        let (Some(&(first, _)), Some(&(last, _))) = (points.first(), points.last()) else {
            continue;
        };
        let mut seg = 0;
        for frame in frames.iter_mut() {
            let t = frame.t_ns;
            if t < first || t > last {
                continue;
            }
            while points[seg + 1..].first().is_some_and(|&(tb, _)| tb <= t) {
                seg += 1;
            }
            let (ta, va) = points[seg];
            let value = if ta == t {
                va
            } else {
                let (tb, vb) = points[seg + 1];
                va + (vb - va) * (t - ta) as f64 / (tb - ta) as f64
            };
            frame.values[col] = value;
            frame.mask[col] = true;
        }
    }
    frames
}

/// Mean truth position per slot, for simulator captures.
pub fn slot_positions(records: &[PacketRecord]) -> BTreeMap<i64, (f64, f64)> {
    let mut acc: BTreeMap<i64, (f64, f64, usize)> = BTreeMap::new();
    for r in records {
        if let Some((x, y)) = r.truth_pos_m {
            let e = acc.entry(round_to_slot(r.timestamp_ns)).or_default();
            e.0 += x;
            e.1 += y;
            e.2 += 1;
        }
    }
    acc.into_iter()
        .map(|(t, (x, y, n))| (t, (x / n as f64, y / n as f64)))
        .collect()
}

/// Converts RSSI columns to path loss. BLE loss uses the same router's
/// BLE TX-power column; Wi-Fi loss uses the device's inferred TX power, or
/// 0 dBm when none could be inferred (plain negated RSSI). Masks carry over;
/// losses built on a padded receive value stay masked out.
pub fn apply_path_loss(
    frames: &[FeatureFrame],
    layout: &FeatureLayout,
    wifi_tx: Option<&TxPowerEstimate>,
) -> (FeatureLayout, Vec<FeatureFrame>) {
    let out_layout = layout.path_loss_variant();
    let p_wifi_tx = wifi_tx.map(|e| e.p_wifi_tx_dbm).unwrap_or(0.0);
    let out = frames
        .iter()
        .map(|f| {
            let mut values = vec![0.0; out_layout.len()];
            let mut mask = vec![false; out_layout.len()];
            for (i, c) in layout.columns().iter().enumerate() {
                let (kind, value, measured) = match c.kind {
                    FeatureKind::WifiRssi => (FeatureKind::WifiLoss, wifi_path_loss(p_wifi_tx, f.values[i]), f.mask[i]),
                    FeatureKind::BleRssi => {
                        let tx = layout.index_of(&c.router_id, FeatureKind::BleTx);
                        let (tx_val, tx_ok) = tx.map(|j| (f.values[j], f.mask[j])).unwrap_or((RSSI_PAD, false));
                        (
                            FeatureKind::BleLoss,
                            ble_path_loss(tx_val, f.values[i]),
                            f.mask[i] && tx_ok,
                        )
                    }
                    k => (k, f.values[i], f.mask[i]),
                };
                let j = out_layout.index_of(&c.router_id, kind).expect("renamed column present");
                values[j] = value;
                mask[j] = measured;
            }
            FeatureFrame {
                t_ns: f.t_ns,
                values,
                mask,
            }
        })
        .collect();
    (out_layout, out)
}

/// Per-entry path-loss samples from a frame sequence.
pub fn path_loss_samples(frames: &[FeatureFrame], layout: &FeatureLayout) -> Vec<PathLossSample> {
    let mut out = Vec::new();
    for f in frames {
        for (i, c) in layout.columns().iter().enumerate() {
            let link = match c.kind {
                FeatureKind::WifiLoss => Link::Wifi,
                FeatureKind::BleLoss => Link::Ble,
                _ => continue,
            };
            out.push(PathLossSample {
                t_ns: f.t_ns,
                router_id: c.router_id.clone(),
                loss_db: f.values[i],
                link,
                padded: !f.mask[i],
            });
        }
    }
    out
}

/// Time-of-flight samples for one router, one per slot, bursts averaged.
pub fn tof_samples(records: &[PacketRecord], router_id: &str) -> Vec<TofSample> {
    let mut acc: BTreeMap<i64, (f64, usize)> = BTreeMap::new();
    for r in records.iter().filter(|r| r.router_id == router_id) {
        if let Some(tof) = r.ftm_times_ns.and_then(|q| tof_from_ftm(q).ok()) {
            let e = acc.entry(round_to_slot(r.timestamp_ns)).or_default();
            e.0 += tof;
            e.1 += 1;
        }
    }
    acc.into_iter()
        .map(|(t_ns, (sum, n))| TofSample {
            t_ns,
            tof_ns: (sum / n as f64).min(TOF_PAD_NS),
        })
        .collect()
}

/// Mask as hex: byte `j` bit `k` (LSB first) is column `8j + k`.
pub fn mask_to_hex(mask: &[bool]) -> String {
    mask.chunks(8)
        .map(|chunk| {
            let byte = chunk.iter().enumerate().fold(0u8, |b, (k, &m)| b | ((m as u8) << k));
            format!("{byte:02x}")
        })
        .collect()
}

pub fn mask_from_hex(s: &str, len: usize) -> Option<Vec<bool>> {
    let bytes = hex::decode(s).ok()?;
    if bytes.len() != len.div_ceil(8) {
        return None;
    }
    Some((0..len).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect())
}

/// Frame export CSV: `t_ns,<router:kind>...,mask_hex`.
pub fn export_frames(frames: &[FeatureFrame], layout: &FeatureLayout) -> String {
    let mut out = String::from("t_ns");
    for c in layout.columns() {
        out.push(',');
        out.push_str(&c.to_string());
    }
    out.push_str(",mask_hex\n");
    for f in frames {
        out.push_str(&f.t_ns.to_string());
        for v in &f.values {
            out.push(',');
            out.push_str(&v.to_string());
        }
        out.push(',');
        out.push_str(&mask_to_hex(&f.mask));
        out.push('\n');
    }
    out
}

pub fn parse_frames(text: &str) -> Result<(FeatureLayout, Vec<FeatureFrame>), FeatureError> {
    let mut lines = text.lines();
    let header = lines.next().ok_or(FeatureError::Export {
        line: 1,
        msg: "empty input".into(),
    })?;
    let names: Vec<&str> = header.split(',').collect();
    if names.len() < 2 || names[0] != "t_ns" || names[names.len() - 1] != "mask_hex" {
        return Err(FeatureError::Export {
            line: 1,
            msg: "bad header".into(),
        });
    }
    let columns = names[1..names.len() - 1]
        .iter()
        .map(|n| n.parse::<Column>())
        .collect::<Result<Vec<_>, _>>()?;
    let layout = FeatureLayout::new(columns.clone());
    if layout.columns() != columns.as_slice() {
        return Err(FeatureError::Export {
            line: 1,
            msg: "columns not in canonical order".into(),
        });
    }
    let n = layout.len();
    let mut frames = Vec::new();
    for (idx, raw) in lines.enumerate() {
        let line = idx + 2;
        if raw.is_empty() {
            continue;
        }
        let err = |msg: &str| FeatureError::Export {
            line,
            msg: msg.to_string(),
        };
        let f: Vec<&str> = raw.split(',').collect();
        if f.len() != n + 2 {
            return Err(err("wrong field count"));
        }
        let t_ns = f[0].parse().map_err(|_| err("bad t_ns"))?;
        let values = f[1..=n]
            .iter()
            .map(|v| v.parse::<f64>().map_err(|_| err("bad value")))
            .collect::<Result<Vec<_>, _>>()?;
        let mask = mask_from_hex(f[n + 1], n).ok_or_else(|| err("bad mask"))?;
        frames.push(FeatureFrame { t_ns, values, mask });
    }
    Ok((layout, frames))
}
