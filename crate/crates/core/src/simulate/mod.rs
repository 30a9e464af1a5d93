//! Site-survey simulator.
//!
//! A robot carrying a phone plans coverage paths over an occupancy grid and,
//! at each waypoint, the phone's probe requests, BLE advertisements and FTM
//! responses are "captured" by the deployed routers through a log-distance
//! channel with Gaussian shadowing.

mod planner;
mod profiles;
mod survey;

use std::fmt;
use std::path::Path;

use thiserror::Error;

pub use planner::{
    candidate_path, candidate_starts, plan_next_path, score_path, segment_clear, PlannerParams, VisitIndex,
};
pub use profiles::{reference_profiles, DeviceProfile};
pub use survey::{run_survey, step_and_emit, CaptureSet, StepOutcome, SurveyConfig, SurveyState, SurveyTrajectory};

/// Speed of light in vacuum, m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("site map line {line}: {msg}")]
    Map { line: usize, msg: String },
    #[error("router file line {line}: {msg}")]
    Routers { line: usize, msg: String },
    #[error("invalid channel model: {0}")]
    Channel(String),
    #[error("survey complete: no unobstructed candidate path")]
    SurveyComplete,
    #[error("waypoint ({x:.3}, {y:.3}) is off the map or not free")]
    OffMap { x: f64, y: f64 },
    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for SimError {
    fn from(e: std::io::Error) -> Self {
        SimError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn dist(self, o: Point) -> f64 {
        (self.x - o.x).hypot(self.y - o.y)
    }

    pub fn lerp(self, o: Point, t: f64) -> Point {
        Point::new(self.x + (o.x - self.x) * t, self.y + (o.y - self.y) * t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cell {
    Occupied,
    Free,
    Unknown,
}

/// 2-D occupancy grid. Cell `(i, j)` covers
/// `[i·res, (i+1)·res) × [j·res, (j+1)·res)`; row `j` is the `j`-th grid
/// line after the header in the map file.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteMap {
    pub width: usize,
    pub height: usize,
    pub resolution_m: f64,
    pub site_id: String,
    cells: Vec<Cell>,
}

impl SiteMap {
    pub fn new(
        width: usize,
        height: usize,
        resolution_m: f64,
        site_id: impl Into<String>,
        cells: Vec<Cell>,
    ) -> Result<Self, SimError> {
        let map = SiteMap {
            width,
            height,
            resolution_m,
            site_id: site_id.into(),
            cells,
        };
        map.validate()?;
        Ok(map)
    }

    fn validate(&self) -> Result<(), SimError> {
        let err = |msg: String| Err(SimError::Map { line: 1, msg });
        if self.width == 0 || self.height == 0 {
            return err("empty grid".into());
        }
        if !(self.resolution_m.is_finite() && self.resolution_m > 0.0) {
            return err(format!("bad resolution {}", self.resolution_m));
        }
        if self.site_id.is_empty() || self.site_id.contains(char::is_whitespace) {
            return err("bad site id".into());
        }
        if self.cells.len() != self.width * self.height {
            return err("cell count does not match dimensions".into());
        }
        if !self.cells.contains(&Cell::Free) {
            return err("no free cell".into());
        }
        for j in 0..self.height {
            for i in 0..self.width {
                let border = i == 0 || j == 0 || i + 1 == self.width || j + 1 == self.height;
                if border && self.cell(i, j) != Cell::Occupied {
                    return Err(SimError::Map {
                        line: j + 2,
                        msg: format!("border cell ({i}, {j}) is not occupied"),
                    });
                }
            }
        }
        Ok(())
    }

    /// Rectangular room of `w_m × h_m` free space surrounded by a wall.
    pub fn open_room(w_m: f64, h_m: f64, resolution_m: f64, site_id: &str) -> Self {
        let fw = (w_m / resolution_m).round() as usize;
        let fh = (h_m / resolution_m).round() as usize;
        let (width, height) = (fw + 2, fh + 2);
        let mut cells = vec![Cell::Free; width * height];
        for j in 0..height {
            for i in 0..width {
                if i == 0 || j == 0 || i + 1 == width || j + 1 == height {
                    cells[j * width + i] = Cell::Occupied;
                }
            }
        }
        SiteMap::new(width, height, resolution_m, site_id, cells).expect("valid room")
    }

    pub fn cell(&self, i: usize, j: usize) -> Cell {
        self.cells[j * self.width + i]
    }

    pub fn set_cell(&mut self, i: usize, j: usize, c: Cell) {
        self.cells[j * self.width + i] = c;
    }

    /// Cell containing a world point, if on the map.
    pub fn cell_of(&self, p: Point) -> Option<(usize, usize)> {
        let i = (p.x / self.resolution_m).floor();
        let j = (p.y / self.resolution_m).floor();
        if i < 0.0 || j < 0.0 || i >= self.width as f64 || j >= self.height as f64 {
            return None;
        }
        Some((i as usize, j as usize))
    }

    pub fn center(&self, i: usize, j: usize) -> Point {
        Point::new(
            (i as f64 + 0.5) * self.resolution_m,
            (j as f64 + 0.5) * self.resolution_m,
        )
    }

    pub fn is_free(&self, p: Point) -> bool {
        self.cell_of(p).is_some_and(|(i, j)| self.cell(i, j) == Cell::Free)
    }

    /// Snaps a point to the centre of its cell.
    pub fn snap(&self, p: Point) -> Option<Point> {
        self.cell_of(p).map(|(i, j)| self.center(i, j))
    }

    pub fn cells_of(&self, kind: Cell) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.height)
            .flat_map(move |j| (0..self.width).map(move |i| (i, j)))
            .filter(move |&(i, j)| self.cell(i, j) == kind)
    }

    pub fn free_count(&self) -> usize {
        self.cells.iter().filter(|c| **c == Cell::Free).count()
    }
}

impl fmt::Display for SiteMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{} {} {} {}",
            self.width, self.height, self.resolution_m, self.site_id
        )?;
        for j in 0..self.height {
            let row: String = (0..self.width)
                .map(|i| match self.cell(i, j) {
                    Cell::Occupied => '#',
                    Cell::Free => '.',
                    Cell::Unknown => '?',
                })
                .collect();
            writeln!(f, "{row}")?;
        }
        Ok(())
    }
}

pub fn parse_site_map(text: &str) -> Result<SiteMap, SimError> {
    let mut lines = text.lines().map(|l| l.trim_end_matches('\r'));
    let header = lines.next().ok_or(SimError::Map {
        line: 1,
        msg: "empty file".into(),
    })?;
    let h: Vec<&str> = header.split_whitespace().collect();
    let herr = |msg: &str| SimError::Map {
        line: 1,
        msg: msg.to_string(),
    };
    if h.len() != 4 {
        return Err(herr("header must be `width height resolution_m site_id`"));
    }
    let width: usize = h[0].parse().map_err(|_| herr("bad width"))?;
    let height: usize = h[1].parse().map_err(|_| herr("bad height"))?;
    let resolution_m: f64 = h[2].parse().map_err(|_| herr("bad resolution"))?;
    if width == 0 || height == 0 || width.saturating_mul(height) > 1 << 24 {
        return Err(herr("grid dimensions out of range"));
    }
    let mut cells = Vec::with_capacity(width * height);
    for j in 0..height {
        let line = j + 2;
        let row = lines.next().ok_or(SimError::Map {
            line,
            msg: "missing row".into(),
        })?;
        if row.chars().count() != width {
            return Err(SimError::Map {
                line,
                msg: format!("row has {} cells, expected {width}", row.chars().count()),
            });
        }
        for ch in row.chars() {
            cells.push(match ch {
                '#' => Cell::Occupied,
                '.' => Cell::Free,
                '?' => Cell::Unknown,
                other => {
                    return Err(SimError::Map {
                        line,
                        msg: format!("unexpected cell `{other}`"),
                    })
                }
            });
        }
    }
    if let Some((k, _)) = lines.enumerate().find(|(_, l)| !l.is_empty()) {
        return Err(SimError::Map {
            line: height + 2 + k,
            msg: "trailing data after grid".into(),
        });
    }
    SiteMap::new(width, height, resolution_m, h[3], cells)
}

pub fn load_site_map(path: impl AsRef<Path>) -> Result<SiteMap, SimError> {
    parse_site_map(&std::fs::read_to_string(path)?)
}

pub const ROUTERS_HEADER: &str = "router_id,x_m,y_m,supports_ftm,supports_ble,p_tx_wifi_dbm,p_tx_ble_dbm";

/// Deployed sniffer/responder.
#[derive(Debug, Clone, PartialEq)]
pub struct RouterSpec {
    pub router_id: String,
    pub pos_m: Point,
    pub supports_ftm: bool,
    pub supports_ble: bool,
    pub p_tx_wifi_dbm: f64,
    pub p_tx_ble_dbm: f64,
}

/// Parses the router CSV; positions must fall on free cells when a map is given.
pub fn parse_routers(text: &str, map: Option<&SiteMap>) -> Result<Vec<RouterSpec>, SimError> {
    let mut out: Vec<RouterSpec> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let raw = raw.trim_end_matches('\r');
        if idx == 0 {
            if raw != ROUTERS_HEADER {
                return Err(SimError::Routers {
                    line,
                    msg: "missing header".into(),
                });
            }
            continue;
        }
        if raw.is_empty() {
            continue;
        }
        let err = |msg: String| SimError::Routers { line, msg };
        let f: Vec<&str> = raw.split(',').collect();
        if f.len() != 7 {
            return Err(err(format!("expected 7 fields, found {}", f.len())));
        }
        let num = |s: &str, name: &str| -> Result<f64, SimError> {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| err(format!("bad {name} `{s}`")))
        };
        let bit = |s: &str, name: &str| match s {
            "0" => Ok(false),
            "1" => Ok(true),
            _ => Err(err(format!("{name} must be 0 or 1"))),
        };
        if f[0].is_empty() || f[0].contains(':') {
            return Err(err(format!("bad router id `{}`", f[0])));
        }
        if out.iter().any(|r| r.router_id == f[0]) {
            return Err(err(format!("duplicate router id `{}`", f[0])));
        }
        let r = RouterSpec {
            router_id: f[0].to_string(),
            pos_m: Point::new(num(f[1], "x_m")?, num(f[2], "y_m")?),
            supports_ftm: bit(f[3], "supports_ftm")?,
            supports_ble: bit(f[4], "supports_ble")?,
            p_tx_wifi_dbm: num(f[5], "p_tx_wifi_dbm")?,
            p_tx_ble_dbm: num(f[6], "p_tx_ble_dbm")?,
        };
        if let Some(map) = map {
            if !map.is_free(r.pos_m) {
                return Err(err(format!("router {} is not on a free cell", r.router_id)));
            }
        }
        out.push(r);
    }
    Ok(out)
}

pub fn format_routers(routers: &[RouterSpec]) -> String {
    let mut out = format!("{ROUTERS_HEADER}\n");
    for r in routers {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.router_id,
            r.pos_m.x,
            r.pos_m.y,
            r.supports_ftm as u8,
            r.supports_ble as u8,
            r.p_tx_wifi_dbm,
            r.p_tx_ble_dbm
        ));
    }
    out
}

/// Bundled survey sites: `corridor` (30×4 m) and `room` (20×20 m).
pub const BUNDLED_SITES: [&str; 2] = ["corridor", "room"];

/// Map and router deployment of a bundled site.
pub fn bundled_site(name: &str) -> Option<(SiteMap, Vec<RouterSpec>)> {
    let (map, routers) = match name {
        "corridor" => (
            include_str!("../../data/corridor.map"),
            include_str!("../../data/corridor_routers.csv"),
        ),
        "room" => (
            include_str!("../../data/room.map"),
            include_str!("../../data/room_routers.csv"),
        ),
        _ => return None,
    };
    let map = parse_site_map(map).expect("bundled map parses");
    let routers = parse_routers(routers, Some(&map)).expect("bundled routers parse");
    Some((map, routers))
}

/// Log-distance path loss with Gaussian shadowing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelModel {
    pub l0_db: f64,
    pub d0_m: f64,
    pub exponent_n: f64,
    pub shadow_sigma_db: f64,
    pub ftm_jitter_sigma_ns: f64,
    /// Probability that a stimulus elicits a captured packet.
    pub response_rate: f64,
}

impl Default for ChannelModel {
    fn default() -> Self {
        ChannelModel {
            l0_db: 40.0,
            d0_m: 1.0,
            exponent_n: 3.0,
            shadow_sigma_db: 4.0,
            ftm_jitter_sigma_ns: 1.0,
            response_rate: 1.0,
        }
    }
}

impl ChannelModel {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::Channel(m.to_string()));
        if !(1.5..=6.0).contains(&self.exponent_n) {
            return bad("exponent_n outside [1.5, 6]");
        }
        if !(self.shadow_sigma_db >= 0.0 && self.ftm_jitter_sigma_ns >= 0.0) {
            return bad("negative sigma");
        }
        if !(self.response_rate > 0.0 && self.response_rate <= 1.0) {
            return bad("response_rate outside (0, 1]");
        }
        if !(self.d0_m > 0.0 && self.l0_db.is_finite()) {
            return bad("bad reference distance or loss");
        }
        Ok(())
    }

    /// Mean path loss at distance `d_m`; distances below 10 cm are clamped.
    pub fn path_loss_db(&self, d_m: f64) -> f64 {
        self.l0_db + 10.0 * self.exponent_n * (d_m.max(0.1) / self.d0_m).log10()
    }

    /// Received power, rounded to whole dBm and clamped to `[-101, 0]`.
    pub fn rssi_dbm(&self, p_tx_dbm: f64, d_m: f64, shadow_db: f64) -> i32 {
        (p_tx_dbm - self.path_loss_db(d_m) - shadow_db)
            .round()
            .clamp(crate::capture::RSSI_FLOOR_DBM as f64, 0.0) as i32
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const CORRIDOR: &str = "6 4 0.5 lab\n######\n#..?.#\n#....#\n######\n";

    #[test]
    fn map_round_trip() {
        let map = parse_site_map(CORRIDOR).unwrap();
        assert_eq!((map.width, map.height), (6, 4));
        assert_eq!(map.cell(3, 1), Cell::Unknown);
        assert_eq!(map.free_count(), 7);
        assert_eq!(map.to_string(), CORRIDOR);
        assert_eq!(map.center(1, 1), Point::new(0.75, 0.75));
        assert_eq!(map.cell_of(Point::new(0.75, 0.9)), Some((1, 1)));
        assert_eq!(map.cell_of(Point::new(-0.1, 0.9)), None);
    }

    #[test]
    fn map_errors_carry_line() {
        assert!(matches!(
            parse_site_map("3 3 0.5 s\n###\n#.#\n#.#\n"),
            Err(SimError::Map { line: 4, .. })
        ));
        assert!(matches!(
            parse_site_map("3 3 0.5 s\n###\n#x#\n###\n"),
            Err(SimError::Map { line: 3, .. })
        ));
        assert!(parse_site_map("3 3 0.5 s\n###\n###\n###\n").is_err());
        assert!(parse_site_map("3 3 nan s\n###\n#.#\n###\n").is_err());
        assert!(parse_site_map("").is_err());
    }

    #[test]
    fn routers_parse_and_check_free_cells() {
        let map = parse_site_map(CORRIDOR).unwrap();
        let text = format!("{ROUTERS_HEADER}\nR1,0.75,0.75,1,0,15,0\nR2,2.25,1.25,0,1,15,4\n");
        let routers = parse_routers(&text, Some(&map)).unwrap();
        assert_eq!(routers.len(), 2);
        assert!(routers[0].supports_ftm && !routers[0].supports_ble);
        assert_eq!(format_routers(&routers), text);
        let wall = format!("{ROUTERS_HEADER}\nR1,0.1,0.1,1,0,15,0\n");
        assert!(matches!(
            parse_routers(&wall, Some(&map)),
            Err(SimError::Routers { line: 2, .. })
        ));
        let dup = format!("{ROUTERS_HEADER}\nR1,0.75,0.75,1,0,15,0\nR1,0.75,0.75,1,0,15,0\n");
        assert!(parse_routers(&dup, None).is_err());
    }

    #[test]
    fn reference_distance_gives_tx_minus_l0() {
        let ch = ChannelModel {
            shadow_sigma_db: 0.0,
            ..ChannelModel::default()
        };
        assert_eq!(ch.rssi_dbm(15.0, ch.d0_m, 0.0), -25);
        assert_eq!(ch.path_loss_db(10.0), 70.0);
        assert_eq!(ch.rssi_dbm(0.0, 1e6, 0.0), -101);
    }

    #[test]
    fn channel_validation() {
        assert!(ChannelModel::default().validate().is_ok());
        let bad = ChannelModel {
            exponent_n: 7.0,
            ..ChannelModel::default()
        };
        assert!(bad.validate().is_err());
        let bad = ChannelModel {
            response_rate: 0.0,
            ..ChannelModel::default()
        };
        assert!(bad.validate().is_err());
    }
}
