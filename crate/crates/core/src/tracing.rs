//! Contact histories between located devices and suspect graphs.
//!
//! Traces are `(key, site, time, cell)` samples. Two devices are in contact
//! when samples of the same site lie within `time_resolution / 2` of each
//! other (closed window) and at most `max_distance` cells apart.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use thiserror::Error;

pub const DEFAULT_MAX_DISTANCE: f64 = 15.0;
pub const DEFAULT_TIME_RESOLUTION_S: f64 = 30.0;
/// Lower edges of the distance bands, in cells. The last band is closed
/// and absorbs anything beyond its nominal upper edge of 15.
pub const BAND_EDGES: [f64; 3] = [0.0, 5.0, 10.0];
pub const TRACES_HEADER: &str = "key,site_id,time_s,i,j";
pub const CONTACTS_HEADER: &str =
    "first_key,second_key,site_id,contact_duration,last_contact_time,avg_distance,min_distance,band_0_5,band_5_10,band_10_15";

#[derive(Debug, Error, PartialEq)]
pub enum TraceError {
    #[error("trace line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    /// Device key, normally a bucket id.
    pub key: String,
    pub site_id: String,
    pub time_s: f64,
    pub cell: (u32, u32),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContactHistory {
    pub first_key: String,
    pub second_key: String,
    pub site_id: String,
    pub contact_duration: u64,
    pub last_contact_time_s: f64,
    pub avg_distance_cells: f64,
    pub min_distance_cells: f64,
    pub bands: [u64; 3],
    /// Summed decay weight, set only by [`indirect_contacts`].
    pub exposure: Option<f64>,
}

/// Euclidean cell distances up to a cutoff, tabulated once.
#[derive(Debug, Clone)]
pub struct DistanceMap {
    max: f64,
    span: usize,
    table: Vec<f64>,
}

impl DistanceMap {
    pub fn new(max_distance: f64) -> Self {
        let span = if max_distance.is_finite() && max_distance >= 0.0 {
            max_distance.floor() as usize
        } else {
            0
        };
        let mut table = Vec::with_capacity((span + 1) * (span + 1));
        for dy in 0..=span {
            for dx in 0..=span {
                table.push(((dx * dx + dy * dy) as f64).sqrt());
            }
        }
        DistanceMap {
            max: max_distance,
            span,
            table,
        }
    }

    /// Distance between two cells if it is within the cutoff.
    pub fn within(&self, a: (u32, u32), b: (u32, u32)) -> Option<f64> {
        let dx = a.0.abs_diff(b.0) as usize;
        let dy = a.1.abs_diff(b.1) as usize;
        if dx > self.span || dy > self.span {
            return None;
        }
        let d = self.table[dy * (self.span + 1) + dx];
        (d <= self.max).then_some(d)
    }
}

fn band(d: f64) -> usize {
    BAND_EDGES.iter().rposition(|&e| d >= e).unwrap_or(0)
}

#[derive(Default)]
struct Acc {
    count: u64,
    last: f64,
    sum: f64,
    min: f64,
    bands: [u64; 3],
    weight: f64,
}

impl Acc {
    fn add(&mut self, t: f64, d: f64, w: f64) {
        if self.count == 0 {
            self.last = t;
            self.min = d;
        } else {
            self.last = self.last.max(t);
            self.min = self.min.min(d);
        }
        self.count += 1;
        self.sum += d;
        self.bands[band(d)] += 1;
        self.weight += w;
    }
}

fn finish(acc: BTreeMap<(String, String, String), Acc>, with_exposure: bool) -> Vec<ContactHistory> {
    acc.into_iter()
        .map(|((first_key, second_key, site_id), a)| ContactHistory {
            first_key,
            second_key,
            site_id,
            contact_duration: a.count,
            last_contact_time_s: a.last,
            avg_distance_cells: a.sum / a.count as f64,
            min_distance_cells: a.min,
            bands: a.bands,
            exposure: with_exposure.then_some(a.weight),
        })
        .collect()
}

/// Index range of `others` (sorted by time) with `lo ≤ time ≤ hi`.
fn window(others: &[TraceRecord], lo: f64, hi: f64) -> std::ops::Range<usize> {
    let a = others.partition_point(|o| o.time_s < lo);
    let b = others.partition_point(|o| o.time_s <= hi);
    a..b.max(a)
}

fn scan(
    target: &[TraceRecord],
    others: &[TraceRecord],
    dist: &DistanceMap,
    bounds: impl Fn(f64) -> (f64, f64),
    weight: impl Fn(f64) -> f64,
) -> BTreeMap<(String, String, String), Acc> {
    let mut acc: BTreeMap<(String, String, String), Acc> = BTreeMap::new();
    for t in target {
        let (lo, hi) = bounds(t.time_s);
        for o in &others[window(others, lo, hi)] {
            if o.key == t.key || o.site_id != t.site_id {
                continue;
            }
            let Some(d) = dist.within(t.cell, o.cell) else {
                continue;
            };
            acc.entry((t.key.clone(), o.key.clone(), t.site_id.clone()))
                .or_default()
                .add(t.time_s, d, weight(o.time_s - t.time_s));
        }
    }
    acc
}

/// Contact histories of every `(target, other, site)` pair. Both lists
/// must be sorted by time; output is ordered by `(first, second, site)`.
pub fn generate_contact_history(
    target: &[TraceRecord],
    others: &[TraceRecord],
    max_distance: f64,
    time_resolution_s: f64,
) -> Vec<ContactHistory> {
    let dist = DistanceMap::new(max_distance);
    let half = 0.5 * time_resolution_s;
    finish(scan(target, others, &dist, |t| (t - half, t + half), |_| 1.0), false)
}

/// Exposure to places a target occupied: other samples from `t` up to
/// `t + horizon_s`, each weighted `2^(-Δt / half_life_s)`.
pub fn indirect_contacts(
    target: &[TraceRecord],
    others: &[TraceRecord],
    half_life_s: f64,
    max_distance: f64,
    horizon_s: Option<f64>,
) -> Vec<ContactHistory> {
    let horizon = horizon_s.unwrap_or(4.0 * half_life_s);
    let dist = DistanceMap::new(max_distance);
    finish(
        scan(
            target,
            others,
            &dist,
            |t| (t, t + horizon),
            |dt| decay_weight(dt, half_life_s),
        ),
        true,
    )
}

pub fn decay_weight(dt_s: f64, half_life_s: f64) -> f64 {
    (-dt_s / half_life_s).exp2()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContactEdge {
    pub from: String,
    pub to: String,
    pub history: ContactHistory,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ContactGraph {
    pub nodes: BTreeSet<String>,
    pub edges: Vec<ContactEdge>,
}

/// Suspect graph grown breadth-first from the confirmed cases. Round `r`
/// links every node first reached in round `r − 1` to its contacts; an edge
/// is skipped when the same pair and site is already linked in either
/// direction.
pub fn build_contact_graph(confirmed: &BTreeSet<String>, histories: &[ContactHistory], depth: usize) -> ContactGraph {
    let mut nodes: BTreeSet<String> = confirmed.clone();
    for h in histories {
        nodes.insert(h.first_key.clone());
        nodes.insert(h.second_key.clone());
    }
    let mut edges = Vec::new();
    let mut linked: BTreeSet<(String, String, String)> = BTreeSet::new();
    let mut reached: BTreeSet<String> = confirmed.clone();
    let mut frontier: BTreeSet<String> = confirmed.clone();
    for _ in 0..depth {
        let mut next = BTreeSet::new();
        for x in &frontier {
            for h in histories {
                let y = if &h.first_key == x {
                    &h.second_key
                } else if &h.second_key == x {
                    &h.first_key
                } else {
                    continue;
                };
                let key = |a: &str, b: &str| (a.to_string(), b.to_string(), h.site_id.clone());
                if linked.contains(&key(x, y)) || linked.contains(&key(y, x)) {
                    continue;
                }
                linked.insert(key(x, y));
                edges.push(ContactEdge {
                    from: x.clone(),
                    to: y.clone(),
                    history: h.clone(),
                });
                if reached.insert(y.clone()) {
                    next.insert(y.clone());
                }
            }
        }
        if next.is_empty() {
            break;
        }
        frontier = next;
    }
    ContactGraph { nodes, edges }
}

pub fn parse_traces(text: &str) -> Result<Vec<TraceRecord>, TraceError> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let raw = raw.trim_end_matches('\r');
        if idx == 0 && raw == TRACES_HEADER {
            continue;
        }
        if raw.is_empty() {
            continue;
        }
        let err = |msg: String| TraceError::Parse { line, msg };
        let f: Vec<&str> = raw.split(',').collect();
        if f.len() != 5 {
            return Err(err(format!("expected 5 fields, found {}", f.len())));
        }
        if f[0].is_empty() || f[1].is_empty() {
            return Err(err("empty key or site".into()));
        }
        let time_s: f64 = f[2]
            .parse()
            .ok()
            .filter(|t: &f64| t.is_finite())
            .ok_or_else(|| err(format!("bad time `{}`", f[2])))?;
        let cell = |s: &str| s.parse::<u32>().map_err(|_| err(format!("bad cell index `{s}`")));
        out.push(TraceRecord {
            key: f[0].to_string(),
            site_id: f[1].to_string(),
            time_s,
            cell: (cell(f[3])?, cell(f[4])?),
        });
    }
    Ok(out)
}

pub fn format_traces(traces: &[TraceRecord]) -> String {
    let mut out = format!("{TRACES_HEADER}\n");
    for t in traces {
        let _ = writeln!(out, "{},{},{},{},{}", t.key, t.site_id, t.time_s, t.cell.0, t.cell.1);
    }
    out
}

/// Contact report; exposure, when present, is not part of the report.
pub fn contact_report(histories: &[ContactHistory]) -> String {
    let mut out = format!("{CONTACTS_HEADER}\n");
    for h in histories {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{:.3},{:.3},{},{},{}",
            h.first_key,
            h.second_key,
            h.site_id,
            h.contact_duration,
            h.last_contact_time_s,
            h.avg_distance_cells,
            h.min_distance_cells,
            h.bands[0],
            h.bands[1],
            h.bands[2]
        );
    }
    out
}

/// Splits traces into the target key's samples and everybody else's,
/// both sorted by time.
pub fn split_target(traces: &[TraceRecord], key: &str) -> (Vec<TraceRecord>, Vec<TraceRecord>) {
    let (mut target, mut others): (Vec<_>, Vec<_>) = traces.iter().cloned().partition(|t| t.key == key);
    target.sort_by(|a, b| a.time_s.total_cmp(&b.time_s));
    others.sort_by(|a, b| a.time_s.total_cmp(&b.time_s));
    (target, others)
}
