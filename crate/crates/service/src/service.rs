//! Ingest pipeline and queries over the encrypted store.
//!
//! Writers (ingest, erase) serialize on one mutex and publish under a short
//! write lock; queries take the read lock for their whole duration, so they
//! see a store either before or after a mutation.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tracewave_core::capture::{
    classify_devices, filter_mobile, parse_capture_str, serialize_capture, sort_chronological, MacAddr, PacketRecord,
};
use tracewave_core::features::{export_frames, slot_positions, synchronize, FeatureFrame, FeatureLayout, FeatureSet};
use tracewave_core::localize::{knn_predict, survey_points, Localizer, TrajectoryPoint};
use tracewave_core::macclust::{cluster, fingerprint_elements, fingerprints_by_mac, FingerprintVector, MacBucket};
use tracewave_core::simulate::{
    bundled_site, load_site_map, parse_routers, reference_profiles, RouterSpec, SiteMap, BUNDLED_SITES,
};
use tracewave_core::tracing::{generate_contact_history, split_target, ContactHistory, TraceRecord};

use crate::config::Config;
use crate::store::{BlobKind, BlobRef, Overwrite, PlannedBlob, Store, StoreError, NO_BUCKET};

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("capture rejected: {0}")]
    Rejected(String),
    #[error("{0} not found")]
    NotFound(String),
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("stored blob does not decode: {0}")]
    Corrupt(String),
    #[error("setup: {0}")]
    Setup(String),
}

pub struct Site {
    pub map: SiteMap,
    pub routers: Vec<RouterSpec>,
    /// Layout used for stored frames and the k-NN fallback.
    pub layout: FeatureLayout,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum PathSource {
    Bilstm,
    Knn,
    Truth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredDevice {
    pub bucket_id: u64,
    /// Hex fingerprint; absent for MACs that never sent model information.
    pub fingerprint: Option<String>,
    pub mac_list: Vec<String>,
    pub model_label: Option<String>,
    /// Timestamp of the first record seen from the device, ns.
    pub created_at: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredPathPoint {
    pub bucket_id: u64,
    pub site_id: String,
    pub t_ns: i64,
    pub time_s: f64,
    pub x_m: f64,
    pub y_m: f64,
    pub source: PathSource,
    /// Index of the path this point belongs to; a silence longer than
    /// `path_gap_s` starts a new one.
    pub path: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PathBlob {
    site_id: String,
    source: PathSource,
    points: Vec<(i64, f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DevicePaths {
    pub bucket_id: u64,
    pub site_id: String,
    pub source: PathSource,
    pub paths: usize,
    pub points: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobSummary {
    pub job_id: u64,
    pub digest: String,
    pub records: usize,
    pub mobile_records: usize,
    /// Mobile records heard by routers outside every configured site.
    pub unplaced_records: usize,
    pub devices: usize,
    pub frames: usize,
    pub path_points: usize,
    pub device_paths: Vec<DevicePaths>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContactRow {
    pub first_key: String,
    pub second_key: String,
    pub site_id: String,
    pub contact_duration: u64,
    pub last_contact_time_s: f64,
    pub avg_distance_cells: f64,
    pub min_distance_cells: f64,
    pub bands: [u64; 3],
}

impl From<&ContactHistory> for ContactRow {
    fn from(h: &ContactHistory) -> Self {
        ContactRow {
            first_key: h.first_key.clone(),
            second_key: h.second_key.clone(),
            site_id: h.site_id.clone(),
            contact_duration: h.contact_duration,
            last_contact_time_s: h.last_contact_time_s,
            avg_distance_cells: h.avg_distance_cells,
            min_distance_cells: h.min_distance_cells,
            bands: h.bands,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErasureReceipt {
    pub bucket_id: u64,
    pub blobs: usize,
    pub bytes_overwritten: usize,
    pub overwrites: Vec<Overwrite>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterView {
    pub router_id: String,
    pub x_m: f64,
    pub y_m: f64,
    pub supports_ftm: bool,
    pub supports_ble: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteMapView {
    pub site_id: String,
    pub width: usize,
    pub height: usize,
    pub resolution_m: f64,
    /// `rows[j]` holds cells `(0..width, j)`; `#` occupied, `.` free, `?` unknown.
    pub rows: Vec<String>,
    pub routers: Vec<RouterView>,
}

/// Inclusive time window in seconds; `None` is unbounded.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Window {
    pub start_s: Option<f64>,
    pub end_s: Option<f64>,
}

impl Window {
    pub fn contains(&self, t_s: f64) -> bool {
        self.start_s.is_none_or(|s| t_s >= s) && self.end_s.is_none_or(|e| t_s <= e)
    }
}

pub fn ns_to_s(t_ns: i64) -> f64 {
    t_ns as f64 / 1e9
}

/// Contact histories of `key` against every other key, last contact first.
/// Shared by the service and the offline `trace` command.
pub fn contacts_from_traces(
    traces: &[TraceRecord],
    key: &str,
    window: Window,
    max_distance: f64,
    time_resolution_s: f64,
) -> Vec<ContactHistory> {
    let inside: Vec<TraceRecord> = traces.iter().filter(|t| window.contains(t.time_s)).cloned().collect();
    let (target, others) = split_target(&inside, key);
    let mut rows = generate_contact_history(&target, &others, max_distance, time_resolution_s);
    rows.sort_by(|a, b| {
        b.last_contact_time_s
            .total_cmp(&a.last_contact_time_s)
            .then_with(|| a.second_key.cmp(&b.second_key))
            .then_with(|| a.site_id.cmp(&b.site_id))
    });
    rows
}

#[derive(Default)]
struct Index {
    jobs: BTreeMap<String, BlobRef>,
    buckets: BTreeMap<u64, Vec<BlobRef>>,
    next_bucket: u64,
}

struct State {
    store: Store,
    index: Index,
}

pub struct Service {
    cfg: Config,
    sites: BTreeMap<String, Site>,
    router_site: HashMap<String, String>,
    localizers: BTreeMap<String, Localizer>,
    surveys: BTreeMap<String, Vec<TrajectoryPoint>>,
    known_models: Vec<(String, FingerprintVector)>,
    writer: Mutex<()>,
    state: RwLock<State>,
}

fn decode<T: for<'de> Deserialize<'de>>(bytes: &[u8]) -> Result<T, ServiceError> {
    serde_json::from_slice(bytes).map_err(|e| ServiceError::Corrupt(e.to_string()))
}

fn encode<T: Serialize>(v: &T) -> Vec<u8> {
    serde_json::to_vec(v).expect("plain data serializes")
}

fn setup(e: impl std::fmt::Display) -> ServiceError {
    ServiceError::Setup(e.to_string())
}

fn load_sites(cfg: &Config) -> Result<BTreeMap<String, Site>, ServiceError> {
    let mut pairs: Vec<(SiteMap, Vec<RouterSpec>)> = BUNDLED_SITES.iter().filter_map(|s| bundled_site(s)).collect();
    for (map_path, routers_path) in &cfg.sites {
        let map = load_site_map(map_path).map_err(setup)?;
        let text =
            std::fs::read_to_string(routers_path).map_err(|e| setup(format!("{}: {e}", routers_path.display())))?;
        let routers = parse_routers(&text, Some(&map)).map_err(setup)?;
        pairs.retain(|(m, _)| m.site_id != map.site_id);
        pairs.push((map, routers));
    }
    Ok(pairs
        .into_iter()
        .map(|(map, routers)| {
            let layout = FeatureLayout::for_routers(&routers, FeatureSet::default());
            (map.site_id.clone(), Site { map, routers, layout })
        })
        .collect())
}

fn split_by_gap(times: &[i64], gap_ns: i64) -> Vec<usize> {
    let mut path = 0;
    times
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            if i > 0 && t - times[i - 1] > gap_ns {
                path += 1;
            }
            path
        })
        .collect()
}

impl Service {
    pub fn open(cfg: Config, key: &[u8; 32]) -> Result<Service, ServiceError> {
        let sites = load_sites(&cfg)?;
        let mut router_site = HashMap::new();
        for (id, s) in &sites {
            for r in &s.routers {
                if let Some(prev) = router_site.insert(r.router_id.clone(), id.clone()) {
                    return Err(setup(format!("router {} is in both {prev} and {id}", r.router_id)));
                }
            }
        }

        let mut localizers = BTreeMap::new();
        for p in &cfg.model_checkpoints {
            let bytes = std::fs::read(p).map_err(|e| setup(format!("{}: {e}", p.display())))?;
            let loc = Localizer::from_bytes(&bytes).map_err(setup)?;
            let site = sites.get(&loc.site_id).ok_or_else(|| {
                setup(format!(
                    "checkpoint {} is for unknown site {}",
                    p.display(),
                    loc.site_id
                ))
            })?;
            if let Some(c) = loc
                .layout
                .columns()
                .iter()
                .find(|c| !site.routers.iter().any(|r| r.router_id == c.router_id))
            {
                return Err(setup(format!(
                    "checkpoint column {c} names a router outside {}",
                    loc.site_id
                )));
            }
            localizers.insert(loc.site_id.clone(), loc);
        }

        let mut surveys: BTreeMap<String, Vec<TrajectoryPoint>> = BTreeMap::new();
        for p in &cfg.survey_captures {
            let text = std::fs::read_to_string(p).map_err(|e| setup(format!("{}: {e}", p.display())))?;
            let records = sort_chronological(parse_capture_str(&text).map_err(setup)?);
            let mobile = filter_mobile(&records, &classify_devices(&records));
            for (site_id, recs) in group_by_site(&mobile, &router_site).0 {
                let pts = survey_points(&recs, &sites[&site_id].layout);
                surveys.entry(site_id).or_default().extend(pts);
            }
        }

        let known_models = reference_profiles()
            .into_iter()
            .map(|p| (p.name.to_string(), fingerprint_elements(&p.model_info)))
            .collect();

        let store = Store::open(&cfg.store, key)?;
        let mut index = Index::default();
        for b in store.live() {
            match b.kind() {
                BlobKind::Job => {
                    let s: JobSummary = decode(&store.read(b)?)?;
                    index.jobs.insert(s.digest, *b);
                }
                _ if b.bucket() != NO_BUCKET => index.buckets.entry(b.bucket()).or_default().push(*b),
                _ => {}
            }
        }
        index.next_bucket = store.max_bucket().map_or(1, |b| b + 1);

        Ok(Service {
            cfg,
            sites,
            router_site,
            localizers,
            surveys,
            known_models,
            writer: Mutex::new(()),
            state: RwLock::new(State { store, index }),
        })
    }

    /// Opens with the key from `TRACEWAVE_KEY`.
    pub fn open_env(cfg: Config) -> Result<Service, ServiceError> {
        let hex = std::env::var("TRACEWAVE_KEY").map_err(|_| setup("TRACEWAVE_KEY is not set"))?;
        let key = crate::store::key_from_hex(&hex)?;
        Service::open(cfg, &key)
    }

    pub fn config(&self) -> &Config {
        &self.cfg
    }

    pub fn site_ids(&self) -> Vec<String> {
        self.sites.keys().cloned().collect()
    }

    pub fn store_path(&self) -> std::path::PathBuf {
        self.state.read().store.path().to_path_buf()
    }

    fn devices(state: &State) -> Result<BTreeMap<u64, StoredDevice>, ServiceError> {
        let mut out = BTreeMap::new();
        for (&bucket, blobs) in &state.index.buckets {
            // Later versions of the device record supersede earlier ones.
            if let Some(b) = blobs.iter().rev().find(|b| b.kind() == BlobKind::Device) {
                out.insert(bucket, decode(&state.store.read(b)?)?);
            }
        }
        Ok(out)
    }

    fn label_for(&self, fp: &FingerprintVector) -> Option<String> {
        self.known_models.iter().find(|(_, k)| k == fp).map(|(n, _)| n.clone())
    }

    /// Runs capture → clustering → features → localization and stores
    /// every stage in one committed job. Returns the summary and whether
    /// anything new was written.
    pub fn ingest(&self, bytes: &[u8]) -> Result<(JobSummary, bool), ServiceError> {
        let digest = hex::encode(Sha256::digest(bytes));
        let text = std::str::from_utf8(bytes).map_err(|_| ServiceError::Rejected("capture is not UTF-8".into()))?;
        let _writer = self.writer.lock();
        {
            let state = self.state.read();
            if let Some(b) = state.index.jobs.get(&digest) {
                return Ok((decode(&state.store.read(b)?)?, false));
            }
        }
        let records = sort_chronological(parse_capture_str(text).map_err(|e| ServiceError::Rejected(e.to_string()))?);
        let (blobs, summary) = {
            let state = self.state.read();
            self.plan_job(&state, &records, digest)?
        };
        let mut state = self.state.write();
        let (job, refs) = state.store.append_job(&blobs)?;
        debug_assert_eq!(job, summary.job_id);
        for r in refs {
            match r.kind() {
                BlobKind::Job => {
                    state.index.jobs.insert(summary.digest.clone(), r);
                }
                _ => {
                    state.index.next_bucket = state.index.next_bucket.max(r.bucket() + 1);
                    state.index.buckets.entry(r.bucket()).or_default().push(r);
                }
            }
        }
        Ok((summary, true))
    }

    fn plan_job(
        &self,
        state: &State,
        records: &[PacketRecord],
        digest: String,
    ) -> Result<(Vec<PlannedBlob>, JobSummary), ServiceError> {
        let mobile = filter_mobile(records, &classify_devices(records));
        let (prints, unprintable) = fingerprints_by_mac(&mobile);
        let mut buckets = cluster(&prints).map_err(|e| ServiceError::Rejected(e.to_string()))?;
        buckets.extend(unprintable.into_iter().map(MacBucket::singleton));

        // Resolve against stored devices: a shared MAC or an identical
        // fingerprint means the same device.
        let existing = Self::devices(state)?;
        let mut by_mac: HashMap<String, u64> = HashMap::new();
        let mut by_fp: HashMap<String, u64> = HashMap::new();
        for d in existing.values() {
            for m in &d.mac_list {
                by_mac.insert(m.clone(), d.bucket_id);
            }
            if let Some(fp) = &d.fingerprint {
                by_fp.insert(fp.clone(), d.bucket_id);
            }
        }
        let mut next = state.index.next_bucket;
        let mut resolved: BTreeMap<u64, (BTreeSet<MacAddr>, Option<FingerprintVector>)> = BTreeMap::new();
        for b in buckets {
            let hit = b
                .macs
                .iter()
                .filter_map(|m| by_mac.get(&m.to_string()))
                .chain(b.fingerprint.as_ref().and_then(|f| by_fp.get(&f.to_hex())))
                .min()
                .copied();
            let id = hit.unwrap_or_else(|| {
                next += 1;
                next - 1
            });
            let e = resolved.entry(id).or_default();
            e.0.extend(b.macs);
            if e.1.is_none() {
                e.1 = b.fingerprint;
            }
        }

        let (by_site, unplaced) = group_by_site(&mobile, &self.router_site);
        let job_id = state.store.next_job();
        let mut blobs = Vec::new();
        let mut summary = JobSummary {
            job_id,
            digest,
            records: records.len(),
            mobile_records: mobile.len(),
            unplaced_records: unplaced,
            devices: resolved.len(),
            frames: 0,
            path_points: 0,
            device_paths: Vec::new(),
        };
        let gap_ns = (self.cfg.path_gap_s * 1e9) as i64;
        for (&bucket, (macs, fp)) in &resolved {
            let own: Vec<PacketRecord> = mobile.iter().filter(|r| macs.contains(&r.src_mac)).cloned().collect();
            let first_seen = own.first().map_or(0, |r| r.timestamp_ns);
            let prior = existing.get(&bucket);
            let mut mac_list: BTreeSet<String> = macs.iter().map(|m| m.to_string()).collect();
            if let Some(p) = prior {
                mac_list.extend(p.mac_list.iter().cloned());
            }
            let fingerprint = prior
                .and_then(|p| p.fingerprint.clone())
                .or_else(|| fp.as_ref().map(|f| f.to_hex()));
            let device = StoredDevice {
                bucket_id: bucket,
                model_label: prior
                    .and_then(|p| p.model_label.clone())
                    .or_else(|| fp.as_ref().and_then(|f| self.label_for(f))),
                fingerprint,
                mac_list: mac_list.into_iter().collect(),
                created_at: prior.map_or(first_seen, |p| p.created_at.min(first_seen)),
            };
            if prior != Some(&device) {
                blobs.push((BlobKind::Device, bucket, encode(&device)));
            }
            blobs.push((BlobKind::Records, bucket, serialize_capture(&own).into_bytes()));

            for (site_id, site_records) in &by_site {
                let recs: Vec<PacketRecord> = site_records
                    .iter()
                    .filter(|r| macs.contains(&r.src_mac))
                    .cloned()
                    .collect();
                if recs.is_empty() {
                    continue;
                }
                let (layout, frames, placed) = self.localize_device(site_id, &recs, gap_ns)?;
                summary.frames += frames.len();
                blobs.push((BlobKind::Frames, bucket, export_frames(&frames, layout).into_bytes()));
                let Some((source, points)) = placed else { continue };
                if points.is_empty() {
                    continue;
                }
                let times: Vec<i64> = points.iter().map(|p| p.0).collect();
                summary.path_points += points.len();
                summary.device_paths.push(DevicePaths {
                    bucket_id: bucket,
                    site_id: site_id.clone(),
                    source,
                    paths: split_by_gap(&times, gap_ns).last().map_or(0, |p| p + 1),
                    points: points.len(),
                });
                let blob = PathBlob {
                    site_id: site_id.clone(),
                    source,
                    points,
                };
                blobs.push((BlobKind::Path, bucket, encode(&blob)));
            }
        }
        blobs.push((BlobKind::Job, NO_BUCKET, encode(&summary)));
        Ok((blobs, summary))
    }

    /// Frames of one device at one site and, when some source can place
    /// it, its positions. BiLSTM beats k-NN beats simulator truth.
    #[allow(clippy::type_complexity)]
    fn localize_device<'a>(
        &'a self,
        site_id: &str,
        recs: &[PacketRecord],
        gap_ns: i64,
    ) -> Result<
        (
            &'a FeatureLayout,
            Vec<FeatureFrame>,
            Option<(PathSource, Vec<(i64, f64, f64)>)>,
        ),
        ServiceError,
    > {
        let site = &self.sites[site_id];
        let join = |frames: &[FeatureFrame], pos: Vec<(f64, f64)>| {
            frames
                .iter()
                .zip(pos)
                .map(|(f, (x, y))| (f.t_ns, x, y))
                .collect::<Vec<_>>()
        };
        if let Some(loc) = self.localizers.get(site_id) {
            let frames = synchronize(recs, &loc.layout);
            let times: Vec<i64> = frames.iter().map(|f| f.t_ns).collect();
            let paths = split_by_gap(&times, gap_ns);
            let mut pos = Vec::with_capacity(frames.len());
            let mut start = 0;
            while start < frames.len() {
                let end = start + paths[start..].iter().take_while(|&&p| p == paths[start]).count();
                pos.extend(
                    loc.predict(&frames[start..end], self.cfg.window)
                        .map_err(|e| ServiceError::Rejected(e.to_string()))?,
                );
                start = end;
            }
            let pts = join(&frames, pos);
            return Ok((&loc.layout, frames, Some((PathSource::Bilstm, pts))));
        }
        let frames = synchronize(recs, &site.layout);
        if let Some(survey) = self.surveys.get(site_id).filter(|s| !s.is_empty()) {
            let pos = knn_predict(survey, &site.layout, &frames, self.cfg.knn_k)
                .map_err(|e| ServiceError::Rejected(e.to_string()))?;
            let pts = join(&frames, pos);
            return Ok((&site.layout, frames, Some((PathSource::Knn, pts))));
        }
        let truth = slot_positions(recs);
        if truth.is_empty() {
            return Ok((&site.layout, frames, None));
        }
        let pts = frames
            .iter()
            .filter_map(|f| truth.get(&f.t_ns).map(|&(x, y)| (f.t_ns, x, y)))
            .collect();
        Ok((&site.layout, frames, Some((PathSource::Truth, pts))))
    }

    /// Devices matching a MAC (through bucket membership), a hex fingerprint
    /// fragment (bit subset of the fingerprint, read as its leading digits),
    /// or otherwise a model label substring.
    pub fn search(&self, query: &str) -> Result<Vec<StoredDevice>, ServiceError> {
        let q = query.trim();
        if q.is_empty() {
            return Ok(Vec::new());
        }
        let state = self.state.read();
        let devices = Self::devices(&state)?.into_values();
        if let Ok(mac) = q.parse::<MacAddr>() {
            let mac = mac.to_string();
            return Ok(devices.filter(|d| d.mac_list.contains(&mac)).collect());
        }
        if q.len() <= 64 && q.bytes().all(|b| b.is_ascii_hexdigit()) {
            let padded = format!("{:0<64}", q.to_ascii_lowercase());
            let frag = FingerprintVector::from_hex(&padded).expect("64 hex digits");
            return Ok(devices
                .filter(|d| {
                    d.fingerprint
                        .as_deref()
                        .and_then(FingerprintVector::from_hex)
                        .is_some_and(|fp| fp.width() == frag.width() && frag.is_subset_of(&fp))
                })
                .collect());
        }
        let needle = q.to_lowercase();
        Ok(devices
            .filter(|d| {
                d.model_label
                    .as_ref()
                    .is_some_and(|l| l.to_lowercase().contains(&needle))
            })
            .collect())
    }

    fn path_points(&self, state: &State, bucket: u64) -> Result<Vec<StoredPathPoint>, ServiceError> {
        let blobs = state
            .index
            .buckets
            .get(&bucket)
            .ok_or_else(|| ServiceError::NotFound(format!("device {bucket}")))?;
        let mut per_site: BTreeMap<String, Vec<(i64, f64, f64, PathSource)>> = BTreeMap::new();
        for b in blobs.iter().filter(|b| b.kind() == BlobKind::Path) {
            let p: PathBlob = decode(&state.store.read(b)?)?;
            per_site
                .entry(p.site_id)
                .or_default()
                .extend(p.points.into_iter().map(|(t, x, y)| (t, x, y, p.source)));
        }
        let gap_ns = (self.cfg.path_gap_s * 1e9) as i64;
        let mut out = Vec::new();
        for (site_id, mut pts) in per_site {
            pts.sort_by_key(|p| p.0);
            let times: Vec<i64> = pts.iter().map(|p| p.0).collect();
            for ((t_ns, x_m, y_m, source), path) in pts.into_iter().zip(split_by_gap(&times, gap_ns)) {
                out.push(StoredPathPoint {
                    bucket_id: bucket,
                    site_id: site_id.clone(),
                    t_ns,
                    time_s: ns_to_s(t_ns),
                    x_m,
                    y_m,
                    source,
                    path,
                });
            }
        }
        Ok(out)
    }

    /// Time-ordered points of one device at one site inside `window`.
    pub fn get_path(&self, bucket: u64, site_id: &str, window: Window) -> Result<Vec<StoredPathPoint>, ServiceError> {
        if !self.sites.contains_key(site_id) {
            return Err(ServiceError::NotFound(format!("site {site_id}")));
        }
        let state = self.state.read();
        let mut pts = self.path_points(&state, bucket)?;
        pts.retain(|p| p.site_id == site_id && window.contains(p.time_s));
        Ok(pts)
    }

    fn to_trace(&self, p: &StoredPathPoint) -> TraceRecord {
        let res = self.sites[&p.site_id].map.resolution_m;
        let idx = |v: f64| (v / res).floor().clamp(0.0, u32::MAX as f64) as u32;
        TraceRecord {
            key: p.bucket_id.to_string(),
            site_id: p.site_id.clone(),
            time_s: p.time_s,
            cell: (idx(p.x_m), idx(p.y_m)),
        }
    }

    fn traces_locked(&self, state: &State, window: Window) -> Result<Vec<TraceRecord>, ServiceError> {
        let mut out = Vec::new();
        for &bucket in state.index.buckets.keys() {
            for p in self.path_points(state, bucket)? {
                if window.contains(p.time_s) {
                    out.push(self.to_trace(&p));
                }
            }
        }
        Ok(out)
    }

    /// Every stored path sample as a grid trace, for offline tracing.
    pub fn export_traces(&self, window: Window) -> Result<Vec<TraceRecord>, ServiceError> {
        let state = self.state.read();
        self.traces_locked(&state, window)
    }

    /// Contact histories of a device inside `window`, last contact first.
    pub fn get_contacts(
        &self,
        bucket: u64,
        window: Window,
        max_distance: Option<f64>,
    ) -> Result<Vec<ContactHistory>, ServiceError> {
        let max_distance = max_distance.unwrap_or(self.cfg.max_distance);
        if !(max_distance.is_finite() && max_distance >= 0.0) {
            return Err(ServiceError::BadRequest(
                "max_distance must be a non-negative number".into(),
            ));
        }
        let state = self.state.read();
        if !state.index.buckets.contains_key(&bucket) {
            return Err(ServiceError::NotFound(format!("device {bucket}")));
        }
        let traces = self.traces_locked(&state, window)?;
        Ok(contacts_from_traces(
            &traces,
            &bucket.to_string(),
            window,
            max_distance,
            self.cfg.time_resolution_s,
        ))
    }

    /// Overwrites every blob of the device with random bytes, then drops it
    /// from the index.
    pub fn erase_device(&self, bucket: u64) -> Result<ErasureReceipt, ServiceError> {
        let _writer = self.writer.lock();
        let mut state = self.state.write();
        if !state.index.buckets.contains_key(&bucket) {
            return Err(ServiceError::NotFound(format!("device {bucket}")));
        }
        let overwrites = state.store.erase_bucket(bucket)?;
        state.index.buckets.remove(&bucket);
        Ok(ErasureReceipt {
            bucket_id: bucket,
            blobs: overwrites.len(),
            bytes_overwritten: overwrites.iter().map(Overwrite::bytes).sum(),
            overwrites,
        })
    }

    pub fn site_map(&self, site_id: &str) -> Result<SiteMapView, ServiceError> {
        let site = self
            .sites
            .get(site_id)
            .ok_or_else(|| ServiceError::NotFound(format!("site {site_id}")))?;
        let m = &site.map;
        Ok(SiteMapView {
            site_id: m.site_id.clone(),
            width: m.width,
            height: m.height,
            resolution_m: m.resolution_m,
            rows: m.to_string().lines().skip(1).map(str::to_string).collect(),
            routers: site
                .routers
                .iter()
                .map(|r| RouterView {
                    router_id: r.router_id.clone(),
                    x_m: r.pos_m.x,
                    y_m: r.pos_m.y,
                    supports_ftm: r.supports_ftm,
                    supports_ble: r.supports_ble,
                })
                .collect(),
        })
    }

    /// Stored frames export of a device, one text per stored blob.
    pub fn frames(&self, bucket: u64) -> Result<Vec<String>, ServiceError> {
        let state = self.state.read();
        let blobs = state
            .index
            .buckets
            .get(&bucket)
            .ok_or_else(|| ServiceError::NotFound(format!("device {bucket}")))?;
        blobs
            .iter()
            .filter(|b| b.kind() == BlobKind::Frames)
            .map(|b| String::from_utf8(state.store.read(b)?).map_err(|e| ServiceError::Corrupt(e.to_string())))
            .collect()
    }
}

/// Splits records by the site of the router that heard them; also returns
/// how many came from unknown routers.
fn group_by_site(
    records: &[PacketRecord],
    router_site: &HashMap<String, String>,
) -> (BTreeMap<String, Vec<PacketRecord>>, usize) {
    let mut out: BTreeMap<String, Vec<PacketRecord>> = BTreeMap::new();
    let mut unplaced = 0;
    for r in records {
        match router_site.get(&r.router_id) {
            Some(s) => out.entry(s.clone()).or_default().push(r.clone()),
            None => unplaced += 1,
        }
    }
    (out, unplaced)
}

/// Loads the config file when given, defaults otherwise.
pub fn load_config(path: Option<&Path>) -> anyhow::Result<Config> {
    Ok(match path {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    })
}
