//! Applications of a scene map: moving trajectories and objects from the
//! target scene into the reference scene.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use nalgebra::Matrix3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{bounds, centroid, Vec3};
use crate::map_estimation::SceneMap;
use crate::scene::{Cell, ObjectInstance, OccupancyGrid};

/// Isometry sample points used to score map combinations.
pub const DEFAULT_ISOMETRY_POINTS: usize = 256;
pub const DEFAULT_ALIGN_SWEEPS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub r: Matrix3<f64>,
    pub t: Vec3,
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform {
            r: Matrix3::identity(),
            t: Vec3::zeros(),
        }
    }

    pub fn apply(&self, x: &Vec3) -> Vec3 {
        self.r * x + self.t
    }

    pub fn is_rotation(&self, tol: f64) -> bool {
        (self.r.transpose() * self.r - Matrix3::identity()).norm() <= tol && (self.r.determinant() - 1.0).abs() <= tol
    }
}

/// Least-squares rotation and translation taking `src` onto `dst`, with the
/// reflection case corrected.
pub fn umeyama_fit(src: &[Vec3], dst: &[Vec3]) -> Result<RigidTransform> {
    if src.len() != dst.len() {
        return Err(Error::invalid(format!("{} source points for {} targets", src.len(), dst.len())));
    }
    if src.len() < 3 {
        return Err(Error::invalid("rigid fit needs at least three point pairs"));
    }
    let (cs, cd) = (centroid(src), centroid(dst));
    let mut h = Matrix3::zeros();
    let mut spread = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        let (a, b) = (s - cs, d - cd);
        h += b * a.transpose();
        spread += a * a.transpose();
    }
    let sv = spread.symmetric_eigenvalues();
    let mut ev: Vec<f64> = sv.iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    if ev[0] <= 0.0 || ev[1] <= 1e-12 * ev[0] {
        return Err(Error::Degenerate("source points are collinear".into()));
    }
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    let sign = (u * v_t).determinant().signum();
    let s = Matrix3::from_diagonal(&Vec3::new(1.0, 1.0, if sign < 0.0 { -1.0 } else { 1.0 }));
    let r = u * s * v_t;
    Ok(RigidTransform { r, t: cd - r * cs })
}

/// Per-step samples of a trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum TrajectorySamples {
    Points(Vec<Vec3>),
    /// Eight corners of a body's bounding box per step.
    Boxes(Vec<[Vec3; 8]>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TrajectoryParts", into = "TrajectoryParts")]
pub struct Trajectory {
    timestamps: Vec<f64>,
    samples: TrajectorySamples,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrajectoryParts {
    pub timestamps: Vec<f64>,
    pub samples: TrajectorySamples,
}

impl TryFrom<TrajectoryParts> for Trajectory {
    type Error = Error;

    fn try_from(p: TrajectoryParts) -> Result<Self> {
        Trajectory::new(p.timestamps, p.samples)
    }
}

impl From<Trajectory> for TrajectoryParts {
    fn from(t: Trajectory) -> Self {
        TrajectoryParts {
            timestamps: t.timestamps,
            samples: t.samples,
        }
    }
}

fn corner_distances(b: &[Vec3; 8]) -> Vec<f64> {
    let mut d = Vec::with_capacity(28);
    for i in 0..8 {
        for j in 0..i {
            d.push((b[i] - b[j]).norm());
        }
    }
    d
}

pub const RIGIDITY_TOLERANCE: f64 = 1e-6;

impl Trajectory {
    pub fn new(timestamps: Vec<f64>, samples: TrajectorySamples) -> Result<Self> {
        let n = match &samples {
            TrajectorySamples::Points(p) => p.len(),
            TrajectorySamples::Boxes(b) => b.len(),
        };
        if n != timestamps.len() {
            return Err(Error::invalid(format!("{} timestamps for {n} steps", timestamps.len())));
        }
        if timestamps.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::invalid("timestamps must be strictly increasing"));
        }
        if let TrajectorySamples::Boxes(boxes) = &samples {
            if let Some(first) = boxes.first() {
                let reference = corner_distances(first);
                for (k, b) in boxes.iter().enumerate().skip(1) {
                    let d = corner_distances(b);
                    if d.iter().zip(&reference).any(|(x, y)| (x - y).abs() > RIGIDITY_TOLERANCE) {
                        return Err(Error::invalid(format!("box at step {k} is not a rigid copy of the first")));
                    }
                }
            }
        }
        Ok(Trajectory { timestamps, samples })
    }

    pub fn timestamps(&self) -> &[f64] {
        &self.timestamps
    }

    pub fn samples(&self) -> &TrajectorySamples {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }
}

/// Corners of the axis-aligned bounding box of `points`.
pub fn box_corners(points: &[Vec3]) -> Option<[Vec3; 8]> {
    let (lo, hi) = bounds(points)?;
    let mut c = [Vec3::zeros(); 8];
    for (i, corner) in c.iter_mut().enumerate() {
        *corner = Vec3::new(
            if i & 1 == 0 { lo.x } else { hi.x },
            if i & 2 == 0 { lo.y } else { hi.y },
            if i & 4 == 0 { lo.z } else { hi.z },
        );
    }
    Some(c)
}

/// Rigid motion best matching how `map` moves `corners`.
fn rigidified(map: &SceneMap, corners: &[Vec3]) -> Result<RigidTransform> {
    let warped = map.apply_all(corners);
    umeyama_fit(corners, &warped)
}

/// Warps bare points directly; moves each box by the rigid fit of its
/// warped corners, so boxes stay rigid.
pub fn short_trajectory_transfer(map: &SceneMap, traj: &Trajectory) -> Result<Trajectory> {
    let samples = match traj.samples() {
        TrajectorySamples::Points(p) => TrajectorySamples::Points(map.apply_all(p)),
        TrajectorySamples::Boxes(boxes) => TrajectorySamples::Boxes(
            boxes
                .iter()
                .map(|b| {
                    let fit = rigidified(map, b)?;
                    Ok(b.map(|c| fit.apply(&c)))
                })
                .collect::<Result<_>>()?,
        ),
    };
    Trajectory::new(traj.timestamps().to_vec(), samples)
}

/// Items rigidly moved by the fit of their warped bounding-box corners.
pub fn object_placement_transfer(map: &SceneMap, items: &[ObjectInstance]) -> Result<Vec<ObjectInstance>> {
    items
        .iter()
        .map(|item| {
            let corners = box_corners(item.points()).expect("objects have points");
            let fit = rigidified(map, &corners)?;
            Ok(item.map_points(|p| fit.apply(&p)))
        })
        .collect()
}

/// A collision-free cell path and its metric length.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPath {
    pub cells: Vec<Cell>,
    pub cost: f64,
}

pub(crate) fn neighbors(grid: &OccupancyGrid, c: Cell) -> impl Iterator<Item = (Cell, f64)> + '_ {
    let h = grid.cell_size();
    (0..27).filter(|&k| k != 13).filter_map(move |k| {
        let d = [k / 9 - 1, (k / 3) % 3 - 1, k % 3 - 1];
        let n = [c[0] as i64 + d[0], c[1] as i64 + d[1], c[2] as i64 + d[2]];
        if !grid.in_bounds(n) {
            return None;
        }
        let cell = [n[0] as usize, n[1] as usize, n[2] as usize];
        if grid.is_occupied(cell) {
            return None;
        }
        Some((cell, h * ((d[0] * d[0] + d[1] * d[1] + d[2] * d[2]) as f64).sqrt()))
    })
}

fn cell_distance(grid: &OccupancyGrid, a: Cell, b: Cell) -> f64 {
    let d: f64 = (0..3).map(|i| (a[i] as f64 - b[i] as f64).powi(2)).sum();
    grid.cell_size() * d.sqrt()
}

#[derive(PartialEq)]
struct Open {
    f: f64,
    g: f64,
    index: usize,
}

impl Eq for Open {}

impl Ord for Open {
    fn cmp(&self, other: &Self) -> Ordering {
        // Min-heap on f, then prefer deeper nodes, then lower index.
        other
            .f
            .total_cmp(&self.f)
            .then(self.g.total_cmp(&other.g))
            .then(other.index.cmp(&self.index))
    }
}

impl PartialOrd for Open {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn check_endpoint(grid: &OccupancyGrid, c: Cell, what: &str) -> Result<()> {
    if !grid.in_bounds([c[0] as i64, c[1] as i64, c[2] as i64]) {
        return Err(Error::invalid(format!("{what} cell {c:?} is outside the grid")));
    }
    if grid.is_occupied(c) {
        return Err(Error::invalid(format!("{what} cell {c:?} is occupied")));
    }
    Ok(())
}

/// Shortest 26-connected free path with Euclidean step costs; `None` when
/// the goal is unreachable.
pub fn astar(grid: &OccupancyGrid, start: Cell, goal: Cell) -> Result<Option<GridPath>> {
    check_endpoint(grid, start, "start")?;
    check_endpoint(grid, goal, "goal")?;
    let n = grid.len();
    let mut g = vec![f64::INFINITY; n];
    let mut parent = vec![usize::MAX; n];
    let mut closed = vec![false; n];
    let si = grid.index(start);
    let gi = grid.index(goal);
    g[si] = 0.0;
    let mut open = BinaryHeap::new();
    open.push(Open {
        f: cell_distance(grid, start, goal),
        g: 0.0,
        index: si,
    });
    let dims = grid.dims();
    let cell_of = |i: usize| [i / (dims[1] * dims[2]), (i / dims[2]) % dims[1], i % dims[2]];
    while let Some(Open { index, g: gc, .. }) = open.pop() {
        if closed[index] || gc > g[index] {
            continue;
        }
        closed[index] = true;
        if index == gi {
            let mut cells = vec![goal];
            let mut cur = gi;
            while cur != si {
                cur = parent[cur];
                cells.push(cell_of(cur));
            }
            cells.reverse();
            return Ok(Some(GridPath { cells, cost: g[gi] }));
        }
        for (nb, step) in neighbors(grid, cell_of(index)) {
            let ni = grid.index(nb);
            if closed[ni] {
                continue;
            }
            let cand = g[index] + step;
            if cand < g[ni] {
                g[ni] = cand;
                parent[ni] = index;
                open.push(Open {
                    f: cand + cell_distance(grid, nb, goal),
                    g: cand,
                    index: ni,
                });
            }
        }
    }
    Ok(None)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SegmentStatus {
    Planned,
    /// The planner failed and the warped original segment was used.
    Fallback,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub status: SegmentStatus,
    pub points: Vec<Vec3>,
    /// Planned path cells; empty for fallbacks.
    pub cells: Vec<Cell>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LongTransfer {
    pub waypoints: Vec<Vec3>,
    pub segments: Vec<Segment>,
}

impl LongTransfer {
    /// All segment points in order, shared endpoints kept once.
    pub fn points(&self) -> Vec<Vec3> {
        let mut out: Vec<Vec3> = Vec::new();
        for s in &self.segments {
            for p in &s.points {
                if out.last() != Some(p) {
                    out.push(*p);
                }
            }
        }
        out
    }
}

/// Index of the RoI holding the point nearest to `p`.
pub fn assign_waypoint(p: &Vec3, rois: &[&[Vec3]]) -> Option<usize> {
    rois.iter()
        .enumerate()
        .filter_map(|(i, pts)| {
            pts.iter()
                .map(|q| (q - p).norm_squared())
                .min_by(f64::total_cmp)
                .map(|d| (d, i))
        })
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
        .map(|(_, i)| i)
}

fn free_cell(grid: &OccupancyGrid, p: &Vec3) -> Option<Cell> {
    grid.try_cell_of(p).filter(|c| !grid.is_occupied(*c))
}

/// Warps each waypoint with the map of its RoI and joins consecutive ones
/// with planned paths in `grid`. Segments the planner cannot connect are
/// densely sampled in the target and warped instead.
pub fn long_trajectory_transfer(
    maps: &[SceneMap],
    waypoints: &[(usize, Vec3)],
    grid: &OccupancyGrid,
) -> Result<LongTransfer> {
    if let Some((i, _)) = waypoints.iter().find(|(i, _)| *i >= maps.len()) {
        return Err(Error::invalid(format!("waypoint assigned to RoI {i} of {}", maps.len())));
    }
    let warped: Vec<Vec3> = waypoints.iter().map(|(i, p)| maps[*i].apply(p)).collect();
    let mut segments = Vec::with_capacity(waypoints.len().saturating_sub(1));
    for k in 1..waypoints.len() {
        let (a, b) = (warped[k - 1], warped[k]);
        let planned = match (free_cell(grid, &a), free_cell(grid, &b)) {
            (Some(ca), Some(cb)) => astar(grid, ca, cb)?,
            _ => None,
        };
        segments.push(match planned {
            Some(path) => {
                let mut points = vec![a];
                let inner = path.cells.len().saturating_sub(2);
                points.extend(path.cells.iter().skip(1).take(inner).map(|c| grid.center(*c)));
                points.push(b);
                Segment {
                    status: SegmentStatus::Planned,
                    points,
                    cells: path.cells,
                }
            }
            None => {
                let ((ia, pa), (ib, pb)) = (waypoints[k - 1], waypoints[k]);
                let steps = ((pb - pa).norm() / grid.cell_size()).ceil().max(1.0) as usize;
                let points = (0..=steps)
                    .map(|s| {
                        let u = s as f64 / steps as f64;
                        let p = pa + (pb - pa) * u;
                        let m = if u < 0.5 { &maps[ia] } else { &maps[ib] };
                        match s {
                            0 => a,
                            _ if s == steps => b,
                            _ => m.apply(&p),
                        }
                    })
                    .collect();
                Segment {
                    status: SegmentStatus::Fallback,
                    points,
                    cells: Vec::new(),
                }
            }
        });
    }
    Ok(LongTransfer {
        waypoints: warped,
        segments,
    })
}

/// `|D_rand - D_transform|_F` over the union of per-RoI sample points.
pub fn isometry_cost(original: &[Vec3], transformed: &[Vec3]) -> f64 {
    let mut total = 0.0;
    for i in 0..original.len() {
        for j in 0..i {
            let d = (original[i] - original[j]).norm() - (transformed[i] - transformed[j]).norm();
            total += 2.0 * d * d;
        }
    }
    total.sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    /// Chosen candidate index per RoI.
    pub choice: Vec<usize>,
    pub cost: f64,
    pub initial_cost: f64,
}

/// Picks one candidate map per RoI by greedy coordinate descent on the
/// isometry cost, from a random starting combination.
pub fn multi_roi_align(
    candidates: &[Vec<SceneMap>],
    samples: &[Vec<Vec3>],
    sweeps: usize,
    rng: &mut impl Rng,
) -> Result<Alignment> {
    if candidates.len() != samples.len() {
        return Err(Error::invalid(format!("{} candidate lists for {} sample sets", candidates.len(), samples.len())));
    }
    if candidates.is_empty() || candidates.iter().any(Vec::is_empty) {
        return Err(Error::invalid("every RoI needs at least one candidate map"));
    }
    let original: Vec<Vec3> = samples.iter().flatten().copied().collect();
    // Warped samples of every RoI under every candidate.
    let warped: Vec<Vec<Vec<Vec3>>> = candidates
        .iter()
        .zip(samples)
        .map(|(maps, pts)| maps.iter().map(|m| m.apply_all(pts)).collect())
        .collect();
    let cost_of = |choice: &[usize]| {
        let t: Vec<Vec3> = choice
            .iter()
            .enumerate()
            .flat_map(|(r, &c)| warped[r][c].iter().copied())
            .collect();
        isometry_cost(&original, &t)
    };
    let mut choice: Vec<usize> = candidates.iter().map(|c| rng.gen_range(0..c.len())).collect();
    let initial_cost = cost_of(&choice);
    let mut cost = initial_cost;
    for _ in 0..sweeps {
        let before = cost;
        for r in 0..candidates.len() {
            for c in 0..candidates[r].len() {
                let mut trial = choice.clone();
                trial[r] = c;
                let v = cost_of(&trial);
                if v < cost {
                    cost = v;
                    choice = trial;
                }
            }
        }
        if cost >= before {
            break;
        }
    }
    Ok(Alignment {
        choice,
        cost,
        initial_cost,
    })
}
