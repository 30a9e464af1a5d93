//! Survey execution: moving along planned paths and emitting captures.
//!
//! Every reached waypoint produces one Wi-Fi record per router (an FTM frame
//! when both ends support FTM, a probe request otherwise), plus a BLE
//! advertisement per BLE router when the handset advertises. All records of
//! one waypoint share a 100 µs slot. Shadowing is drawn once per
//! `(waypoint, router)` and shared by every link, as both radios sit in the
//! same handset and see the same obstruction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::planner::{plan_next_path, segment_clear, PlannerParams, VisitIndex};
use super::profiles::DeviceProfile;
use super::{ChannelModel, Point, RouterSpec, SimError, SiteMap, SPEED_OF_LIGHT};
use crate::capture::{serialize_capture, FrameKind, FtmTimes, Link, MacAddr, PacketRecord};
use crate::features::SLOT_NS;
use crate::macclust::fnv1a64;

/// Time between consecutive waypoints.
pub const WAYPOINT_INTERVAL_NS: i64 = 1_000_000_000;
/// FTM responder turnaround between FTM arrival and ACK departure.
pub const FTM_TURNAROUND_NS: i64 = 10_000;
/// Router clock offsets are drawn from `[-MAX, MAX]`; under half a slot so
/// one waypoint's records stay in one slot.
const MAX_CLOCK_OFFSET_NS: i64 = 40_000;
const DAY_NS: i64 = 86_400 * 1_000_000_000;

pub const TRUTH_HEADER: &str = "t_ns,x_m,y_m";

#[derive(Debug, Clone)]
pub struct SurveyConfig {
    pub channel: ChannelModel,
    pub planner: PlannerParams,
    pub profile: DeviceProfile,
    pub seed: u64,
    pub n_trajectories: usize,
    pub start_ns: i64,
    /// Coverage target: every free cell within this distance of a visited position.
    pub cover_radius_m: f64,
    /// Extra planning attempts after the planner reports completion while
    /// coverage is still incomplete.
    pub max_idle_replans: usize,
    /// Emit router beacons heard by the other routers.
    pub background: bool,
}

impl Default for SurveyConfig {
    fn default() -> Self {
        let profile = super::reference_profiles()
            .into_iter()
            .find(|p| p.supports_ftm && p.ble_tx_dbm.is_some())
            .expect("an FTM+BLE handset exists");
        SurveyConfig {
            channel: ChannelModel::default(),
            planner: PlannerParams::default(),
            profile,
            seed: 0,
            n_trajectories: 3,
            start_ns: 1_600_000_000_000_000_000,
            cover_radius_m: 0.5,
            max_idle_replans: 50,
            background: false,
        }
    }
}

/// Robot state during one survey trajectory.
#[derive(Debug, Clone)]
pub struct SurveyState {
    pub pos_m: Point,
    pub visited: Vec<Point>,
    pub rng_seed: u64,
    pub time_ns: i64,
    rng: ChaCha8Rng,
    index: VisitIndex,
    path: Vec<Point>,
    next: usize,
}

impl SurveyState {
    pub fn new(map: &SiteMap, pos_m: Point, rng_seed: u64, start_ns: i64) -> Self {
        Self::with_params(map, pos_m, rng_seed, start_ns, &PlannerParams::default(), 0.5)
    }

    pub fn with_params(
        map: &SiteMap,
        pos_m: Point,
        rng_seed: u64,
        start_ns: i64,
        params: &PlannerParams,
        cover_radius_m: f64,
    ) -> Self {
        SurveyState {
            pos_m,
            visited: Vec::new(),
            rng_seed,
            time_ns: start_ns.div_euclid(SLOT_NS) * SLOT_NS,
            rng: ChaCha8Rng::seed_from_u64(rng_seed),
            index: VisitIndex::new(map, params.visit_radius_m, cover_radius_m),
            path: Vec::new(),
            next: 0,
        }
    }

    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn index(&self) -> &VisitIndex {
        &self.index
    }

    /// Records a visit; positions within the revisit radius of an earlier
    /// visit are not appended again.
    pub fn mark_visited(&mut self, map: &SiteMap, p: Point) {
        if !self.index.is_penalized(map, p) {
            self.visited.push(p);
        }
        self.index.mark(map, p);
    }

    pub fn set_path(&mut self, path: Vec<Point>) {
        self.path = path;
        self.next = 0;
    }

    pub fn pending_waypoints(&self) -> &[Point] {
        &self.path[self.next..]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum StepOutcome {
    /// Advanced to the next waypoint and emitted these records.
    Reached(Vec<PacketRecord>),
    /// Segment to the next waypoint was blocked; the robot went back to the
    /// path start without emitting and dropped the rest of the path.
    Retraced,
    /// No pending waypoint.
    Idle,
}

fn router_mac(router_id: &str) -> MacAddr {
    let h = fnv1a64(router_id.as_bytes()).to_be_bytes();
    // Globally administered unicast: clear the two low bits of the first octet.
    MacAddr([h[0] & 0xfc, h[1], h[2], h[3], h[4], h[5]])
}

fn clock_offset_ns(router_id: &str, seed: u64) -> i64 {
    let h = fnv1a64(router_id.as_bytes()) ^ seed;
    (h % (2 * MAX_CLOCK_OFFSET_NS as u64 + 1)) as i64 - MAX_CLOCK_OFFSET_NS
}

fn sqi_from_rssi(rssi: i32) -> u8 {
    (((rssi + 96) as f64 * 100.0 / 60.0).round()).clamp(0.0, 100.0) as u8
}

fn gaussian<R: Rng>(rng: &mut R, sigma: f64) -> f64 {
    if sigma == 0.0 {
        return 0.0;
    }
    Normal::new(0.0, sigma)
        .expect("sigma is finite and non-negative")
        .sample(rng)
}

/// One-way flight time in whole nanoseconds; never negative.
fn one_way_ns<R: Rng>(rng: &mut R, tof_ns: f64, jitter: f64) -> i64 {
    (tof_ns + gaussian(rng, jitter)).round().max(0.0) as i64
}

/// Advances the robot by one waypoint of its current path.
pub fn step_and_emit(
    state: &mut SurveyState,
    map: &SiteMap,
    routers: &[RouterSpec],
    channel: &ChannelModel,
    profile: &DeviceProfile,
    mac: MacAddr,
) -> Result<StepOutcome, SimError> {
    let Some(&target) = state.path.get(state.next) else {
        return Ok(StepOutcome::Idle);
    };
    if !map.is_free(target) {
        return Err(SimError::OffMap {
            x: target.x,
            y: target.y,
        });
    }
    if !segment_clear(map, state.pos_m, target) {
        if let Some(&start) = state.path.first() {
            state.pos_m = start;
        }
        state.set_path(Vec::new());
        return Ok(StepOutcome::Retraced);
    }
    state.pos_m = target;
    state.next += 1;
    state.time_ns += WAYPOINT_INTERVAL_NS;
    state.mark_visited(map, target);

    let truth = Some((target.x, target.y));
    let base = state.time_ns;
    let seed = state.rng_seed;
    let rng = &mut state.rng;
    let mut out = Vec::new();
    for router in routers {
        let d = router.pos_m.dist(target);
        let shadow = gaussian(rng, channel.shadow_sigma_db);
        let t = base + clock_offset_ns(&router.router_id, seed);

        if rng.random::<f64>() < channel.response_rate {
            let rssi = channel.rssi_dbm(profile.wifi_tx_dbm, d, shadow);
            let ftm = router.supports_ftm && profile.supports_ftm;
            let kind = if ftm { FrameKind::Ftm } else { FrameKind::ProbeReq };
            let mut r = PacketRecord::new(t, router.router_id.clone(), Link::Wifi, kind, mac, rssi);
            r.to_ds = true;
            r.sqi = Some(sqi_from_rssi(rssi));
            r.truth_pos_m = truth;
            if ftm {
                let tof = d / SPEED_OF_LIGHT * 1e9;
                // Handset clock offset relative to the router, arbitrary.
                let dev_offset = rng.random_range(-1_000_000i64..=1_000_000);
                let t1 = t;
                let t2 = t1 + one_way_ns(rng, tof, channel.ftm_jitter_sigma_ns) + dev_offset;
                let t3 = t2 + FTM_TURNAROUND_NS;
                let t4 = t3 - dev_offset + one_way_ns(rng, tof, channel.ftm_jitter_sigma_ns);
                r.ftm_times_ns = Some(FtmTimes { t1, t2, t3, t4 });
            } else {
                r.model_info = Some(profile.model_info.clone());
            }
            out.push(r);
        }

        if let (true, Some(ble_tx)) = (router.supports_ble, profile.ble_tx_dbm) {
            if rng.random::<f64>() < channel.response_rate {
                let rssi = channel.rssi_dbm(ble_tx, d, shadow);
                let mut r = PacketRecord::new(
                    t + 1_000,
                    router.router_id.clone(),
                    Link::Ble,
                    FrameKind::BleAdv,
                    mac,
                    rssi,
                );
                r.ble_tx_power_dbm = Some(ble_tx.round() as i32);
                r.truth_pos_m = truth;
                out.push(r);
            }
        }
    }
    Ok(StepOutcome::Reached(out))
}

/// Beacons from every router as heard by every other router.
fn background_frames(
    routers: &[RouterSpec],
    channel: &ChannelModel,
    base: i64,
    seed: u64,
    rng: &mut ChaCha8Rng,
) -> Vec<PacketRecord> {
    let mut out = Vec::new();
    for tx in routers {
        let ap = router_mac(&tx.router_id);
        for rx in routers.iter().filter(|r| r.router_id != tx.router_id) {
            let d = tx.pos_m.dist(rx.pos_m);
            let rssi = channel.rssi_dbm(tx.p_tx_wifi_dbm, d, gaussian(rng, channel.shadow_sigma_db));
            let t = base + 2_000 + clock_offset_ns(&rx.router_id, seed);
            let mut r = PacketRecord::new(t, rx.router_id.clone(), Link::Wifi, FrameKind::Beacon, ap, rssi);
            r.from_ds = true;
            r.bssid = Some(ap);
            r.sqi = Some(sqi_from_rssi(rssi));
            out.push(r);
        }
    }
    out
}

/// One completed survey trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct SurveyTrajectory {
    pub index: usize,
    pub seed: u64,
    pub mac: MacAddr,
    pub start_m: Point,
    pub records: Vec<PacketRecord>,
    /// Reached waypoints with their emission times.
    pub waypoints: Vec<(i64, Point)>,
    /// Distinct visited positions.
    pub visited: Vec<Point>,
    pub retraces: usize,
    pub coverage_complete: bool,
}

impl SurveyTrajectory {
    pub fn capture_csv(&self) -> String {
        serialize_capture(&self.records)
    }

    pub fn truth_csv(&self) -> String {
        let mut out = format!("{TRUTH_HEADER}\n");
        for (t, p) in &self.waypoints {
            out.push_str(&format!("{t},{},{}\n", p.x, p.y));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaptureSet {
    pub site_id: String,
    pub trajectories: Vec<SurveyTrajectory>,
}

impl CaptureSet {
    pub fn all_records(&self) -> impl Iterator<Item = &PacketRecord> {
        self.trajectories.iter().flat_map(|t| t.records.iter())
    }
}

fn trajectory_seed(seed: u64, i: usize) -> u64 {
    seed ^ (i as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

fn run_trajectory(
    map: &SiteMap,
    routers: &[RouterSpec],
    cfg: &SurveyConfig,
    i: usize,
) -> Result<SurveyTrajectory, SimError> {
    let seed = trajectory_seed(cfg.seed, i);
    let start_ns = cfg.start_ns + i as i64 * DAY_NS;
    let free: Vec<Point> = map.cells_of(super::Cell::Free).map(|(i, j)| map.center(i, j)).collect();
    let mut pick = ChaCha8Rng::seed_from_u64(seed.rotate_left(17));
    let start = free[pick.random_range(0..free.len())];
    let mut state = SurveyState::with_params(map, start, seed, start_ns, &cfg.planner, cfg.cover_radius_m);
    let mac = cfg.profile.mac_for_trajectory(i);
    let mut traj = SurveyTrajectory {
        index: i,
        seed,
        mac,
        start_m: start,
        records: Vec::new(),
        waypoints: Vec::new(),
        visited: Vec::new(),
        retraces: 0,
        coverage_complete: false,
    };
    let mut idle = 0;
    // Each successful plan reaches at least one unvisited cell.
    let max_plans = 4 * map.free_count() + cfg.max_idle_replans;
    for _ in 0..max_plans {
        if state.index().coverage_complete() {
            break;
        }
        match plan_next_path(&mut state, map, &cfg.planner) {
            Ok(path) => state.set_path(path),
            Err(SimError::SurveyComplete) => {
                idle += 1;
                if idle > cfg.max_idle_replans {
                    break;
                }
                continue;
            }
            Err(e) => return Err(e),
        }
        loop {
            match step_and_emit(&mut state, map, routers, &cfg.channel, &cfg.profile, mac)? {
                StepOutcome::Reached(mut recs) => {
                    traj.waypoints.push((state.time_ns, state.pos_m));
                    if cfg.background {
                        let seed = state.rng_seed;
                        recs.extend(background_frames(
                            routers,
                            &cfg.channel,
                            state.time_ns,
                            seed,
                            state.rng_mut(),
                        ));
                    }
                    traj.records.extend(recs);
                }
                StepOutcome::Retraced => traj.retraces += 1,
                StepOutcome::Idle => break,
            }
        }
    }
    traj.coverage_complete = state.index().coverage_complete();
    traj.visited = state.visited;
    traj.records.sort_by_key(|r| r.timestamp_ns);
    Ok(traj)
}

/// Runs `cfg.n_trajectories` independent surveys over the map.
pub fn run_survey(map: &SiteMap, routers: &[RouterSpec], cfg: &SurveyConfig) -> Result<CaptureSet, SimError> {
    cfg.channel.validate()?;
    let trajectories = (0..cfg.n_trajectories)
        .map(|i| run_trajectory(map, routers, cfg, i))
        .collect::<Result<_, _>>()?;
    Ok(CaptureSet {
        site_id: map.site_id.clone(),
        trajectories,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{round_to_slot, tof_from_ftm};
    use crate::simulate::{parse_routers, ROUTERS_HEADER};

    fn quiet() -> ChannelModel {
        ChannelModel {
            shadow_sigma_db: 0.0,
            ftm_jitter_sigma_ns: 0.0,
            ..ChannelModel::default()
        }
    }

    fn small_setup() -> (SiteMap, Vec<RouterSpec>) {
        let map = SiteMap::open_room(6.0, 4.0, 0.5, "room");
        let routers = parse_routers(
            &format!("{ROUTERS_HEADER}\nA,0.75,0.75,1,1,15,0\nB,5.25,0.75,0,1,15,0\nC,0.75,3.25,1,0,15,0\nD,5.25,3.25,0,0,15,0\n"),
            Some(&map),
        )
        .unwrap();
        (map, routers)
    }

    fn reach(
        state: &mut SurveyState,
        map: &SiteMap,
        routers: &[RouterSpec],
        ch: &ChannelModel,
        profile: &DeviceProfile,
        p: Point,
    ) -> Vec<PacketRecord> {
        state.set_path(vec![p]);
        match step_and_emit(state, map, routers, ch, profile, profile.macs[0]).unwrap() {
            StepOutcome::Reached(r) => r,
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn one_wifi_record_per_router_at_full_response() {
        let (map, routers) = small_setup();
        let profile = SurveyConfig::default().profile;
        let mut state = SurveyState::new(&map, map.center(3, 3), 1, 0);
        let recs = reach(&mut state, &map, &routers, &quiet(), &profile, map.center(4, 3));
        assert_eq!(recs.iter().filter(|r| r.link == Link::Wifi).count(), 4);
        assert_eq!(recs.iter().filter(|r| r.link == Link::Ble).count(), 2);
        let slot = round_to_slot(recs[0].timestamp_ns);
        assert!(recs.iter().all(|r| round_to_slot(r.timestamp_ns) == slot));
        assert!(recs.iter().all(|r| r.validate().is_ok()));
    }

    #[test]
    fn ftm_at_three_metres_decodes_to_ten_ns() {
        let map = SiteMap::open_room(6.0, 4.0, 0.5, "room");
        let routers = parse_routers(&format!("{ROUTERS_HEADER}\nA,0.75,1.25,1,0,15,0\n"), Some(&map)).unwrap();
        let profile = SurveyConfig::default().profile;
        let mut state = SurveyState::new(&map, map.center(2, 2), 9, 0);
        let recs = reach(&mut state, &map, &routers, &quiet(), &profile, Point::new(3.75, 1.25));
        let q = recs[0].ftm_times_ns.unwrap();
        assert_eq!(q.t3 - q.t2, FTM_TURNAROUND_NS);
        assert_eq!(tof_from_ftm(q).unwrap(), 10.0);
    }

    #[test]
    fn reference_distance_rssi_and_monotone_decay() {
        let map = SiteMap::open_room(12.0, 3.0, 0.5, "c");
        let routers = parse_routers(&format!("{ROUTERS_HEADER}\nA,0.75,1.25,0,0,15,0\n"), Some(&map)).unwrap();
        let profile = SurveyConfig::default().profile;
        let mut state = SurveyState::new(&map, map.center(1, 2), 2, 0);
        let at_d0 = reach(&mut state, &map, &routers, &quiet(), &profile, Point::new(1.75, 1.25));
        assert_eq!(at_d0[0].rssi_dbm, (profile.wifi_tx_dbm - 40.0) as i32);
        let mut last = 0;
        for i in 1..23 {
            let r = reach(&mut state, &map, &routers, &quiet(), &profile, map.center(i, 2));
            assert!(r[0].rssi_dbm <= last || i == 1);
            last = r[0].rssi_dbm;
        }
    }

    #[test]
    fn blocked_segment_retraces_without_emitting() {
        let map = crate::simulate::parse_site_map("5 5 1 s\n#####\n#...#\n#.#.#\n#...#\n#####\n").unwrap();
        let profile = SurveyConfig::default().profile;
        let mut state = SurveyState::new(&map, map.center(1, 1), 0, 0);
        state.set_path(vec![map.center(1, 2), map.center(3, 2)]);
        let ch = quiet();
        assert!(matches!(
            step_and_emit(&mut state, &map, &[], &ch, &profile, profile.macs[0]),
            Ok(StepOutcome::Reached(_))
        ));
        assert_eq!(
            step_and_emit(&mut state, &map, &[], &ch, &profile, profile.macs[0]),
            Ok(StepOutcome::Retraced)
        );
        assert_eq!(state.pos_m, map.center(1, 2));
        assert_eq!(
            step_and_emit(&mut state, &map, &[], &ch, &profile, profile.macs[0]),
            Ok(StepOutcome::Idle)
        );
        state.set_path(vec![Point::new(2.5, 2.5)]);
        assert!(matches!(
            step_and_emit(&mut state, &map, &[], &ch, &profile, profile.macs[0]),
            Err(SimError::OffMap { .. })
        ));
    }

    #[test]
    fn survey_is_deterministic_and_covers() {
        let (map, routers) = small_setup();
        let cfg = SurveyConfig {
            seed: 11,
            background: true,
            ..SurveyConfig::default()
        };
        let a = run_survey(&map, &routers, &cfg).unwrap();
        let b = run_survey(&map, &routers, &cfg).unwrap();
        assert_eq!(a.trajectories.len(), 3);
        for (x, y) in a.trajectories.iter().zip(&b.trajectories) {
            assert_eq!(x.capture_csv(), y.capture_csv());
            assert!(x.coverage_complete);
            assert_eq!(x.retraces, 0);
        }
        let seeds: std::collections::BTreeSet<u64> = a.trajectories.iter().map(|t| t.seed).collect();
        assert_eq!(seeds.len(), 3);
        assert_ne!(a.trajectories[0].capture_csv(), a.trajectories[1].capture_csv());
    }
}
