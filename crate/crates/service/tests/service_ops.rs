mod common;

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, OnceLock};

use common::{capture, config, open, ALL_HANDSETS, KEY};
use tracewave::service::{PathSource, ServiceError, Window};
use tracewave::Service;
use tracewave_core::capture::{parse_capture_str, serialize_capture, FrameKind};
use tracewave_core::features::{FeatureLayout, FeatureSet};
use tracewave_core::localize::{Localizer, PositionNorm};
use tracewave_core::simulate::{bundled_site, reference_profiles};

fn all_devices() -> &'static str {
    static CAP: OnceLock<String> = OnceLock::new();
    CAP.get_or_init(|| capture(&ALL_HANDSETS, 3, 11, false))
}

#[test]
fn three_trajectories_give_three_paths_per_device() {
    let dir = tempfile::tempdir().unwrap();
    let svc = open(dir.path());
    let cap = capture(&["Galaxy A11"], 3, 5, false);
    let (summary, fresh) = svc.ingest(cap.as_bytes()).unwrap();
    assert!(fresh);
    // Three MACs, one per trajectory, merged into one device.
    assert_eq!(summary.devices, 1);
    assert_eq!(summary.device_paths.len(), 1);
    let dp = &summary.device_paths[0];
    assert_eq!((dp.paths, dp.source), (3, PathSource::Truth));

    let pts = svc.get_path(dp.bucket_id, "corridor", Window::default()).unwrap();
    assert_eq!(pts.len(), dp.points);
    let paths: BTreeSet<usize> = pts.iter().map(|p| p.path).collect();
    assert_eq!(paths, BTreeSet::from([0, 1, 2]));
    assert!(pts.windows(2).all(|w| w[0].t_ns <= w[1].t_ns));
}

#[test]
fn reingest_is_a_no_op() {
    let dir = tempfile::tempdir().unwrap();
    let svc = open(dir.path());
    let cap = capture(&["Galaxy S6", "PinePhone"], 1, 2, false);
    let (first, _) = svc.ingest(cap.as_bytes()).unwrap();
    let len = std::fs::metadata(svc.store_path()).unwrap().len();
    let (again, fresh) = svc.ingest(cap.as_bytes()).unwrap();
    assert!(!fresh);
    assert_eq!(first, again);
    assert_eq!(std::fs::metadata(svc.store_path()).unwrap().len(), len);
    drop(svc);

    // Still a no-op after a restart.
    let svc = open(dir.path());
    let (after, fresh) = svc.ingest(cap.as_bytes()).unwrap();
    assert!(!fresh);
    assert_eq!(first, after);
    assert_eq!(svc.search("PinePhone").unwrap().len(), 1);
}

#[test]
fn bad_capture_persists_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let svc = open(dir.path());
    let mut cap = capture(&["Galaxy S4"], 1, 3, false);
    cap.push_str("not,a,capture,line\n");
    assert!(matches!(svc.ingest(cap.as_bytes()), Err(ServiceError::Rejected(_))));
    assert_eq!(std::fs::metadata(svc.store_path()).unwrap().len(), 0);
}

#[test]
fn access_point_traffic_stores_no_devices() {
    let dir = tempfile::tempdir().unwrap();
    let svc = open(dir.path());
    let full = parse_capture_str(&capture(&["Galaxy S4"], 1, 4, true)).unwrap();
    let beacons: Vec<_> = full.into_iter().filter(|r| r.frame_kind == FrameKind::Beacon).collect();
    assert!(!beacons.is_empty());
    let (summary, _) = svc.ingest(serialize_capture(&beacons).as_bytes()).unwrap();
    assert_eq!((summary.devices, summary.mobile_records), (0, 0));
    for r in &beacons {
        assert!(svc.search(&r.src_mac.to_string()).unwrap().is_empty());
    }
}

#[test]
fn search_resolves_reference_macs() {
    let dir = tempfile::tempdir().unwrap();
    let svc = open(dir.path());
    let (summary, _) = svc.ingest(all_devices().as_bytes()).unwrap();
    assert_eq!(summary.devices, 7);

    let s4 = svc.search("D0:22:BE:F5:7C:B4").unwrap();
    assert_eq!(s4.len(), 1);
    assert_eq!(s4[0].model_label.as_deref(), Some("Galaxy S4"));
    assert_eq!(s4[0].mac_list, vec!["D0:22:BE:F5:7C:B4".to_string()]);

    for p in reference_profiles() {
        // Only the MACs the three trajectories used appear in the capture.
        let used: Vec<String> = (0..3).map(|i| p.mac_for_trajectory(i).to_string()).collect();
        let buckets: BTreeSet<u64> = used
            .iter()
            .flat_map(|m| svc.search(m).unwrap())
            .map(|d| d.bucket_id)
            .collect();
        assert_eq!(buckets.len(), 1, "{}", p.name);
        let dev = &svc.search(&used[0]).unwrap()[0];
        assert_eq!(dev.model_label.as_deref(), Some(p.name.as_str()));
        let mut want = used.clone();
        want.sort();
        want.dedup();
        assert_eq!(dev.mac_list, want);
    }
    assert!(svc.search("02:00:00:00:00:01").unwrap().is_empty());
    assert!(svc.search("").unwrap().is_empty());

    // A fingerprint prefix matches its own device by bit subset.
    let s6 = &svc.search("galaxy s6").unwrap()[0];
    let fp = s6.fingerprint.clone().unwrap();
    let hits = svc.search(&fp).unwrap();
    assert_eq!(hits.iter().map(|d| d.bucket_id).collect::<Vec<_>>(), vec![s6.bucket_id]);
    assert!(svc
        .search(&fp[..16])
        .unwrap()
        .iter()
        .any(|d| d.bucket_id == s6.bucket_id));
}

#[test]
fn devices_merge_across_captures() {
    let dir = tempfile::tempdir().unwrap();
    let svc = open(dir.path());
    let day1 = capture(&["iPhone X"], 1, 1, false);
    let day2 = capture(&["iPhone X"], 2, 9, false);
    svc.ingest(day1.as_bytes()).unwrap();
    svc.ingest(day2.as_bytes()).unwrap();
    let found = svc.search("iPhone X").unwrap();
    assert_eq!(found.len(), 1);
    let p = reference_profiles().into_iter().find(|p| p.name == "iPhone X").unwrap();
    assert_eq!(found[0].mac_list.len(), 2);
    assert!(found[0].mac_list.contains(&p.mac_for_trajectory(1).to_string()));
}

#[test]
fn path_windows() {
    let dir = tempfile::tempdir().unwrap();
    let svc = open(dir.path());
    let (summary, _) = svc.ingest(capture(&["Galaxy A11"], 1, 8, false).as_bytes()).unwrap();
    let bucket = summary.device_paths[0].bucket_id;
    let all = svc.get_path(bucket, "corridor", Window::default()).unwrap();
    assert_eq!(all.len(), summary.path_points);
    let t = all[all.len() / 2].time_s;
    let at = svc
        .get_path(
            bucket,
            "corridor",
            Window {
                start_s: Some(t),
                end_s: Some(t),
            },
        )
        .unwrap();
    assert!(!at.is_empty());
    assert!(at.iter().all(|p| p.time_s == t));
    assert_eq!(at.len(), all.iter().filter(|p| p.time_s == t).count());

    assert!(svc.get_path(bucket, "room", Window::default()).unwrap().is_empty());
    assert!(matches!(
        svc.get_path(bucket, "atrium", Window::default()),
        Err(ServiceError::NotFound(_))
    ));
    assert!(matches!(
        svc.get_path(999, "corridor", Window::default()),
        Err(ServiceError::NotFound(_))
    ));
}

#[test]
fn contact_reports() {
    let dir = tempfile::tempdir().unwrap();
    let svc = open(dir.path());
    svc.ingest(all_devices().as_bytes()).unwrap();
    let target = svc.search("D0:22:BE:F5:7C:B4").unwrap()[0].bucket_id;
    let rows = svc.get_contacts(target, Window::default(), None).unwrap();
    assert!(!rows.is_empty());
    assert!(rows
        .windows(2)
        .all(|w| w[0].last_contact_time_s >= w[1].last_contact_time_s));
    assert!(rows
        .iter()
        .all(|r| r.first_key == target.to_string() && r.second_key != r.first_key));
    for r in &rows {
        assert_eq!(r.bands.iter().sum::<u64>(), r.contact_duration);
    }

    let before = Window {
        start_s: Some(0.0),
        end_s: Some(1.0),
    };
    assert!(svc.get_contacts(target, before, None).unwrap().is_empty());

    // Widening the window never loses a pair.
    let pts = svc.get_path(target, "corridor", Window::default()).unwrap();
    let mid = pts[pts.len() / 2].time_s;
    let mut prev: BTreeSet<String> = BTreeSet::new();
    for half in [10.0, 100.0, 1_000.0, 1e6] {
        let w = Window {
            start_s: Some(mid - half),
            end_s: Some(mid + half),
        };
        let keys: BTreeSet<String> = svc
            .get_contacts(target, w, None)
            .unwrap()
            .into_iter()
            .map(|r| r.second_key)
            .collect();
        assert!(prev.is_subset(&keys));
        prev = keys;
    }
    assert!(matches!(
        svc.get_contacts(12345, Window::default(), None),
        Err(ServiceError::NotFound(_))
    ));
    assert!(matches!(
        svc.get_contacts(target, Window::default(), Some(f64::NAN)),
        Err(ServiceError::BadRequest(_))
    ));
}

#[test]
fn erasure_overwrites_blobs_and_hides_the_device() {
    let dir = tempfile::tempdir().unwrap();
    let svc = open(dir.path());
    svc.ingest(all_devices().as_bytes()).unwrap();
    let victim = svc.search("D0:22:BE:F5:7C:B4").unwrap()[0].bucket_id;
    let bystander = svc.search("PinePhone").unwrap()[0].bucket_id;
    let bystander_path = svc.get_path(bystander, "corridor", Window::default()).unwrap();

    let before = std::fs::read(svc.store_path()).unwrap();
    let receipt = svc.erase_device(victim).unwrap();
    let after = std::fs::read(svc.store_path()).unwrap();
    assert_eq!(before.len(), after.len());
    assert!(receipt.blobs >= 3);
    assert_eq!(
        receipt.bytes_overwritten,
        receipt.overwrites.iter().map(|o| o.bytes()).sum::<usize>()
    );
    for o in &receipt.overwrites {
        for (off, len) in o.spans {
            let span = off as usize..off as usize + len;
            assert_ne!(before[span.clone()], after[span.clone()]);
            assert!(after[span].iter().any(|&b| b != 0));
        }
    }

    assert!(svc.search("D0:22:BE:F5:7C:B4").unwrap().is_empty());
    assert!(svc.search("Galaxy S4").unwrap().is_empty());
    assert!(matches!(
        svc.get_path(victim, "corridor", Window::default()),
        Err(ServiceError::NotFound(_))
    ));
    assert!(matches!(
        svc.get_contacts(victim, Window::default(), None),
        Err(ServiceError::NotFound(_))
    ));
    assert!(matches!(svc.erase_device(victim), Err(ServiceError::NotFound(_))));
    assert!(matches!(svc.frames(victim), Err(ServiceError::NotFound(_))));
    let victim_key = victim.to_string();
    assert!(svc
        .export_traces(Window::default())
        .unwrap()
        .iter()
        .all(|t| t.key != victim_key));
    for row in svc.get_contacts(bystander, Window::default(), None).unwrap() {
        assert_ne!(row.second_key, victim_key);
    }
    assert_eq!(
        svc.get_path(bystander, "corridor", Window::default()).unwrap(),
        bystander_path
    );

    // Re-ingesting the same file does not resurrect the device, nor does a restart.
    svc.ingest(all_devices().as_bytes()).unwrap();
    drop(svc);
    let svc = open(dir.path());
    assert!(svc.search("D0:22:BE:F5:7C:B4").unwrap().is_empty());
    assert!(matches!(
        svc.get_path(victim, "corridor", Window::default()),
        Err(ServiceError::NotFound(_))
    ));
    assert_eq!(
        svc.get_path(bystander, "corridor", Window::default()).unwrap(),
        bystander_path
    );
}

#[test]
fn tampered_blob_fails_closed() {
    let dir = tempfile::tempdir().unwrap();
    let svc = open(dir.path());
    svc.ingest(capture(&["Galaxy S4"], 1, 6, false).as_bytes()).unwrap();
    let path = svc.store_path();
    drop(svc);
    let mut bytes = std::fs::read(&path).unwrap();
    // First blob is the device record; flip a ciphertext byte.
    bytes[40] ^= 0x80;
    std::fs::write(&path, &bytes).unwrap();
    let svc = open(dir.path());
    assert!(svc.search("D0:22:BE:F5:7C:B4").is_err());
    assert!(Service::open(config(dir.path()), &[1; 32]).is_err());
}

#[test]
fn model_and_survey_sources() {
    let dir = tempfile::tempdir().unwrap();
    let (_, routers) = bundled_site("corridor").unwrap();
    let layout = FeatureLayout::for_routers(
        &routers,
        FeatureSet {
            wifi_rssi: true,
            sqi: false,
            ble: false,
            tof: true,
        },
    );
    let loc = Localizer::new(
        "corridor",
        layout,
        PositionNorm {
            mean: (15.0, 2.0),
            scale: 8.0,
        },
        1,
    );
    let ckpt = dir.path().join("corridor.twv");
    std::fs::write(&ckpt, loc.to_bytes()).unwrap();
    let cap = capture(&["Galaxy A11"], 1, 12, false);

    let cfg = tracewave::Config {
        model_checkpoints: vec![ckpt],
        ..config(dir.path())
    };
    let svc = Service::open(cfg, &KEY).unwrap();
    let (s, _) = svc.ingest(cap.as_bytes()).unwrap();
    assert_eq!(s.device_paths[0].source, PathSource::Bilstm);
    assert_eq!(s.path_points, s.frames);

    let survey = dir.path().join("survey.csv");
    std::fs::write(&survey, capture(&["Galaxy A11"], 2, 13, false)).unwrap();
    let cfg = tracewave::Config {
        store: dir.path().join("knn.log"),
        survey_captures: vec![survey],
        ..tracewave::Config::default()
    };
    let svc = Service::open(cfg, &KEY).unwrap();
    let (s, _) = svc.ingest(cap.as_bytes()).unwrap();
    assert_eq!(s.device_paths[0].source, PathSource::Knn);
    let pts = svc
        .get_path(s.device_paths[0].bucket_id, "corridor", Window::default())
        .unwrap();
    assert!(pts
        .iter()
        .all(|p| (0.0..=31.0).contains(&p.x_m) && (0.0..=5.0).contains(&p.y_m)));
}

#[test]
fn readers_never_see_a_partial_ingest() {
    let dir = tempfile::tempdir().unwrap();
    let svc = Arc::new(open(dir.path()));
    let done = Arc::new(AtomicBool::new(false));
    let readers: Vec<_> = (0..2)
        .map(|_| {
            let (svc, done) = (svc.clone(), done.clone());
            std::thread::spawn(move || {
                let mut seen = BTreeSet::new();
                while !done.load(Ordering::Relaxed) {
                    // Two calls, two snapshots: each must be whole on its own.
                    seen.insert((
                        svc.search("Galaxy").unwrap().len(),
                        svc.export_traces(Window::default()).unwrap().len(),
                    ));
                }
                seen
            })
        })
        .collect();
    let (s, _) = svc.ingest(all_devices().as_bytes()).unwrap();
    done.store(true, Ordering::Relaxed);
    let galaxies = svc.search("Galaxy").unwrap().len();
    let traces = svc.export_traces(Window::default()).unwrap().len();
    assert_eq!(galaxies, 3);
    assert_eq!(s.devices, 7);
    for r in readers {
        for (n, t) in r.join().unwrap() {
            assert!(n == 0 || n == galaxies, "saw {n} devices");
            assert!(t == 0 || t == traces, "saw {t} of {traces} traces");
        }
    }
}

#[test]
fn site_maps() {
    let dir = tempfile::tempdir().unwrap();
    let svc = open(dir.path());
    let m = svc.site_map("room").unwrap();
    assert_eq!(m.rows.len(), m.height);
    assert!(m.rows.iter().all(|r| r.len() == m.width));
    assert_eq!(m.routers.len(), 9);
    assert!(matches!(svc.site_map("atrium"), Err(ServiceError::NotFound(_))));
}
