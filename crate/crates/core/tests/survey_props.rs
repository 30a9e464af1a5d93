use tracewave_core::simulate::*;

/// Independent ray march at a quarter cell.
fn segment_free(map: &SiteMap, a: Point, b: Point) -> bool {
    let n = ((a.dist(b) / (map.resolution_m / 4.0)).ceil() as usize).max(1);
    (0..=n).all(|k| map.is_free(a.lerp(b, k as f64 / n as f64)))
}

fn check_site(name: &str, seed: u64, n: usize) -> CaptureSet {
    let (map, routers) = bundled_site(name).unwrap();
    let cfg = SurveyConfig {
        seed,
        n_trajectories: n,
        ..SurveyConfig::default()
    };
    let set = run_survey(&map, &routers, &cfg).unwrap();
    for tr in &set.trajectories {
        let mut prev = tr.start_m;
        for &(_, p) in &tr.waypoints {
            assert!(segment_free(&map, prev, p), "{name}: collision {prev:?} -> {p:?}");
            prev = p;
        }
        for (i, j) in map.cells_of(Cell::Free) {
            let c = map.center(i, j);
            assert!(
                tr.visited.iter().any(|v| v.dist(c) <= 0.5 + 1e-9),
                "{name}: cell ({i}, {j}) uncovered"
            );
        }
        assert!(tr.coverage_complete);
        assert_eq!(tr.retraces, 0);
        for (k, v) in tr.visited.iter().enumerate() {
            assert!(tr.visited[..k].iter().all(|u| u.dist(*v) >= 0.25));
        }
    }
    set
}

#[test]
fn corridor_survey_covers_and_is_deterministic() {
    let a = check_site("corridor", 4, 3);
    let (map, routers) = bundled_site("corridor").unwrap();
    assert_eq!(map.free_count(), 60 * 8);
    assert_eq!(routers.len(), 8);
    let cfg = SurveyConfig {
        seed: 4,
        ..SurveyConfig::default()
    };
    let b = run_survey(&map, &routers, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.trajectories.len(), 3);
}

#[test]
fn room_survey_covers() {
    let set = check_site("room", 9, 1);
    assert_eq!(set.site_id, "room");
}

#[test]
fn rssi_never_increases_with_distance_without_shadowing() {
    let ch = ChannelModel {
        shadow_sigma_db: 0.0,
        ..ChannelModel::default()
    };
    let mut last = i32::MAX;
    for k in 0..400 {
        let r = ch.rssi_dbm(15.0, k as f64 * 0.1, 0.0);
        assert!(r <= last);
        last = r;
    }
}
