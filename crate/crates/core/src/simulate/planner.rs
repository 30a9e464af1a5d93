//! Ray-cast coverage planner.
//!
//! Start positions are drawn one per ray cast from the robot towards every
//! occupied cell (truncated at the first obstacle). Candidate paths run from
//! each start to each free cell, sampled at most `spacing_m` apart and
//! snapped to cell centres. A path scores `alpha · n − beta · revisits`
//! where `n` is its waypoint count and `revisits` counts waypoints closer
//! than `visit_radius_m` to an already visited position.

use rand::Rng;

use super::{Cell, Point, SimError, SiteMap, SurveyState};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlannerParams {
    pub alpha: f64,
    pub beta: f64,
    pub visit_radius_m: f64,
    pub spacing_m: f64,
}

impl Default for PlannerParams {
    fn default() -> Self {
        PlannerParams {
            alpha: 1.0,
            beta: 2.0,
            visit_radius_m: 0.25,
            spacing_m: 0.5,
        }
    }
}

/// Per-cell visit bookkeeping: which cell centres lie within the revisit
/// radius of a visited position, and which lie within the coverage radius.
#[derive(Debug, Clone)]
pub struct VisitIndex {
    width: usize,
    penalized: Vec<bool>,
    covered: Vec<bool>,
    uncovered_free: usize,
    visit_radius_m: f64,
    cover_radius_m: f64,
}

impl VisitIndex {
    pub fn new(map: &SiteMap, visit_radius_m: f64, cover_radius_m: f64) -> Self {
        VisitIndex {
            width: map.width,
            penalized: vec![false; map.width * map.height],
            covered: vec![false; map.width * map.height],
            uncovered_free: map.free_count(),
            visit_radius_m,
            cover_radius_m,
        }
    }

    pub fn mark(&mut self, map: &SiteMap, p: Point) {
        let reach = self.visit_radius_m.max(self.cover_radius_m);
        let span = (reach / map.resolution_m).ceil() as isize + 1;
        let Some((ci, cj)) = map.cell_of(p) else {
            return;
        };
        for dj in -span..=span {
            for di in -span..=span {
                let (i, j) = (ci as isize + di, cj as isize + dj);
                if i < 0 || j < 0 || i >= map.width as isize || j >= map.height as isize {
                    continue;
                }
                let (i, j) = (i as usize, j as usize);
                let d = map.center(i, j).dist(p);
                let k = j * self.width + i;
                if d < self.visit_radius_m {
                    self.penalized[k] = true;
                }
                if d <= self.cover_radius_m + 1e-9 && !self.covered[k] {
                    self.covered[k] = true;
                    if map.cell(i, j) == Cell::Free {
                        self.uncovered_free -= 1;
                    }
                }
            }
        }
    }

    /// Exact for cell-centre points, which is all the planner produces.
    pub fn is_penalized(&self, map: &SiteMap, p: Point) -> bool {
        map.cell_of(p).is_some_and(|(i, j)| self.penalized[j * self.width + i])
    }

    pub fn coverage_complete(&self) -> bool {
        self.uncovered_free == 0
    }

    pub fn uncovered_free(&self) -> usize {
        self.uncovered_free
    }
}

/// True when every sample of the segment, taken at a quarter of the grid
/// resolution, falls on a free cell.
pub fn segment_clear(map: &SiteMap, a: Point, b: Point) -> bool {
    let step = map.resolution_m / 4.0;
    let n = (a.dist(b) / step).ceil().max(1.0) as usize;
    (0..=n).all(|k| map.is_free(a.lerp(b, k as f64 / n as f64)))
}

/// One random start per ray from `pos` to each occupied cell, snapped to a
/// cell centre and deduplicated. Consumes one draw per ray with free extent.
pub fn candidate_starts<R: Rng>(pos: Point, map: &SiteMap, rng: &mut R) -> Vec<Point> {
    let step = map.resolution_m / 4.0;
    let mut seen = vec![false; map.width * map.height];
    let mut starts = Vec::new();
    for (i, j) in map.cells_of(Cell::Occupied) {
        let target = map.center(i, j);
        let len = pos.dist(target);
        if len == 0.0 {
            continue;
        }
        let n = (len / step).ceil() as usize;
        let mut free_len = 0.0;
        for k in 1..=n {
            let t = (k as f64 * step).min(len);
            if !map.is_free(pos.lerp(target, t / len)) {
                break;
            }
            free_len = t;
        }
        if free_len <= 0.0 {
            continue;
        }
        let t = rng.random_range(0.0..=free_len);
        let Some(start) = map.snap(pos.lerp(target, t / len)) else {
            continue;
        };
        let Some((si, sj)) = map.cell_of(start) else {
            continue;
        };
        if seen[sj * map.width + si] || !map.is_free(start) || !segment_clear(map, pos, start) {
            continue;
        }
        seen[sj * map.width + si] = true;
        starts.push(start);
    }
    starts
}

/// Waypoints from `start` to `end`, evenly spaced at most `spacing_m`
/// apart, snapped to cell centres, consecutive duplicates removed.
pub fn candidate_path(map: &SiteMap, start: Point, end: Point, spacing_m: f64) -> Vec<Point> {
    let mut out = Vec::new();
    fill_path(map, start, end, spacing_m, &mut out);
    out
}

fn fill_path(map: &SiteMap, start: Point, end: Point, spacing_m: f64, out: &mut Vec<Point>) {
    out.clear();
    let segs = (start.dist(end) / spacing_m).ceil() as usize;
    for k in 0..=segs {
        let t = if segs == 0 { 0.0 } else { k as f64 / segs as f64 };
        if let Some(p) = map.snap(start.lerp(end, t)) {
            if out.last() != Some(&p) {
                out.push(p);
            }
        }
    }
}

pub fn score_path(path: &[Point], map: &SiteMap, index: &VisitIndex, params: &PlannerParams) -> f64 {
    let revisits = path.iter().filter(|&&p| index.is_penalized(map, p)).count();
    params.alpha * path.len() as f64 - params.beta * revisits as f64
}

fn path_clear(map: &SiteMap, path: &[Point]) -> bool {
    path.iter().all(|&p| map.is_free(p)) && path.windows(2).all(|w| segment_clear(map, w[0], w[1]))
}

/// Orders candidates: higher score first, then lowest endpoint (y, x), then
/// lowest start (y, x).
fn better(score: f64, end: Point, start: Point, best: &Option<(f64, Point, Point, Vec<Point>)>) -> bool {
    match best {
        None => true,
        Some((bs, be, bst, _)) => {
            if score != *bs {
                return score > *bs;
            }
            let key = |p: &Point| (p.y, p.x);
            match key(&end).partial_cmp(&key(be)) {
                Some(std::cmp::Ordering::Less) => true,
                Some(std::cmp::Ordering::Greater) => false,
                _ => key(&start) < key(bst),
            }
        }
    }
}

/// Highest-scoring collision-free path among `starts × free cells`, if any
/// scores above zero.
pub fn best_path_from_starts(
    starts: &[Point],
    map: &SiteMap,
    index: &VisitIndex,
    params: &PlannerParams,
) -> Option<Vec<Point>> {
    let ends: Vec<Point> = map.cells_of(Cell::Free).map(|(i, j)| map.center(i, j)).collect();
    let mut best: Option<(f64, Point, Point, Vec<Point>)> = None;
    let mut buf = Vec::new();
    for &end in &ends {
        for &start in starts {
            let max_points = (start.dist(end) / params.spacing_m).ceil() + 1.0;
            if let Some((bs, ..)) = &best {
                if params.alpha * max_points < *bs {
                    continue;
                }
            }
            fill_path(map, start, end, params.spacing_m, &mut buf);
            let score = score_path(&buf, map, index, params);
            if score <= 0.0 || !better(score, end, start, &best) {
                continue;
            }
            if path_clear(map, &buf) {
                best = Some((score, end, start, buf.clone()));
            }
        }
    }
    best.map(|(.., path)| path)
}

/// Plans the next coverage path from the robot's current position.
pub fn plan_next_path(state: &mut SurveyState, map: &SiteMap, params: &PlannerParams) -> Result<Vec<Point>, SimError> {
    let starts = candidate_starts(state.pos_m, map, state.rng_mut());
    best_path_from_starts(&starts, map, state.index(), params).ok_or(SimError::SurveyComplete)
}
