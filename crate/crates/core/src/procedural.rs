//! Procedural toy rooms: labeled box and cylinder surface point clouds on a
//! floor plane, placed in furniture groups without overlap.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{rot_z, Vec3};
use crate::scene::{ObjectInstance, OccupancyGrid, Scene, SemanticLabel};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Shape {
    Box,
    Cylinder,
}

struct ClassSpec {
    name: &'static str,
    shape: Shape,
    /// Ranges for x, y, z extents; for cylinders x is the diameter and y is
    /// ignored.
    size: [(f64, f64); 3],
}

const CLASSES: [ClassSpec; 8] = [
    ClassSpec { name: "table", shape: Shape::Box, size: [(0.8, 1.4), (0.6, 0.9), (0.7, 0.78)] },
    ClassSpec { name: "chair", shape: Shape::Box, size: [(0.4, 0.5), (0.4, 0.5), (0.8, 1.0)] },
    ClassSpec { name: "sofa", shape: Shape::Box, size: [(1.6, 2.2), (0.8, 0.95), (0.7, 0.9)] },
    ClassSpec { name: "bed", shape: Shape::Box, size: [(1.4, 2.0), (1.9, 2.1), (0.45, 0.6)] },
    ClassSpec { name: "nightstand", shape: Shape::Box, size: [(0.4, 0.55), (0.35, 0.45), (0.5, 0.6)] },
    ClassSpec { name: "cabinet", shape: Shape::Box, size: [(0.8, 1.2), (0.4, 0.6), (1.6, 2.0)] },
    ClassSpec { name: "lamp", shape: Shape::Cylinder, size: [(0.3, 0.5), (0.0, 0.0), (1.4, 1.7)] },
    ClassSpec { name: "plant", shape: Shape::Cylinder, size: [(0.4, 0.6), (0.0, 0.0), (0.5, 0.9)] },
];

/// Number of object classes the generator knows.
pub const NUM_CLASSES: u16 = CLASSES.len() as u16;

const TABLE: u16 = 1;
const CHAIR: u16 = 2;
const SOFA: u16 = 3;
const BED: u16 = 4;
const NIGHTSTAND: u16 = 5;

pub fn class_name(label: SemanticLabel) -> &'static str {
    if label.is_corner() {
        return "corner";
    }
    CLASSES.get(label.id() as usize - 1).map_or("unknown", |c| c.name)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub min_objects: usize,
    pub max_objects: usize,
    pub points_per_object: usize,
    /// Room side lengths are drawn from this range.
    pub room_size: (f64, f64),
    pub room_height: f64,
    /// Occupancy cell size for the non-overlap check.
    pub cell_size: f64,
    /// Restricts objects to these labels when set.
    pub labels: Option<Vec<u16>>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            min_objects: 3,
            max_objects: 8,
            points_per_object: 500,
            room_size: (4.0, 5.5),
            room_height: 2.5,
            cell_size: 0.1,
            labels: None,
        }
    }
}

impl GeneratorConfig {
    fn allows(&self, label: u16) -> bool {
        self.labels.as_ref().map_or(true, |l| l.contains(&label))
    }
}

/// Object dimensions drawn for `label`.
fn draw_size(label: u16, rng: &mut impl Rng) -> Vec3 {
    let spec = &CLASSES[label as usize - 1];
    let mut s = [0.0; 3];
    for a in 0..3 {
        let (lo, hi) = spec.size[a];
        s[a] = if hi > lo { rng.gen_range(lo..hi) } else { lo };
    }
    if spec.shape == Shape::Cylinder {
        s[1] = s[0];
    }
    Vec3::from(s)
}

/// Surface points of an object of `label` and `size`, footprint centered on
/// the origin and resting on `z = 0`.
pub fn sample_surface(label: SemanticLabel, size: Vec3, n: usize, rng: &mut impl Rng) -> Vec<Vec3> {
    let shape = CLASSES[label.id() as usize - 1].shape;
    let (hx, hy, h) = (size.x / 2.0, size.y / 2.0, size.z);
    match shape {
        Shape::Box => {
            // Faces weighted by area: top, bottom, +-x, +-y.
            let areas = [
                size.x * size.y,
                size.x * size.y,
                size.y * h,
                size.y * h,
                size.x * h,
                size.x * h,
            ];
            let total: f64 = areas.iter().sum();
            (0..n)
                .map(|_| {
                    let mut t = rng.gen_range(0.0..total);
                    let mut face = 0;
                    while face < 5 && t >= areas[face] {
                        t -= areas[face];
                        face += 1;
                    }
                    let u = rng.gen_range(-1.0..1.0);
                    let v = rng.gen_range(-1.0..1.0);
                    let w = rng.gen_range(0.0..1.0);
                    match face {
                        0 => Vec3::new(u * hx, v * hy, h),
                        1 => Vec3::new(u * hx, v * hy, 0.0),
                        2 => Vec3::new(hx, u * hy, w * h),
                        3 => Vec3::new(-hx, u * hy, w * h),
                        4 => Vec3::new(u * hx, hy, w * h),
                        _ => Vec3::new(u * hx, -hy, w * h),
                    }
                })
                .collect()
        }
        Shape::Cylinder => {
            let r = hx;
            let side = 2.0 * std::f64::consts::PI * r * h;
            let top = std::f64::consts::PI * r * r;
            (0..n)
                .map(|_| {
                    let theta = rng.gen_range(0.0..std::f64::consts::TAU);
                    if rng.gen_range(0.0..side + top) < side {
                        Vec3::new(r * theta.cos(), r * theta.sin(), rng.gen_range(0.0..h))
                    } else {
                        let rho = r * rng.gen_range(0.0f64..1.0).sqrt();
                        Vec3::new(rho * theta.cos(), rho * theta.sin(), h)
                    }
                })
                .collect()
        }
    }
}

/// An object in a group layout: label, size, offset and yaw in group frame.
struct Placed {
    label: u16,
    size: Vec3,
    offset: Vec3,
    yaw: f64,
}

fn group_layout(rng: &mut impl Rng, cfg: &GeneratorConfig) -> Vec<Placed> {
    use std::f64::consts::{FRAC_PI_2, PI};
    let mut templates: Vec<u8> = vec![];
    if cfg.allows(TABLE) && cfg.allows(CHAIR) {
        templates.push(0);
    }
    if cfg.allows(BED) && cfg.allows(NIGHTSTAND) {
        templates.push(1);
    }
    if cfg.allows(SOFA) && cfg.allows(TABLE) {
        templates.push(2);
    }
    let singles: Vec<u16> = (1..=NUM_CLASSES).filter(|&l| cfg.allows(l)).collect();
    if templates.is_empty() || rng.gen_bool(0.35) {
        let label = *singles.choose(rng).expect("at least one label allowed");
        return vec![Placed {
            label,
            size: draw_size(label, rng),
            offset: Vec3::zeros(),
            yaw: 0.0,
        }];
    }
    let gap = 0.08;
    match templates.choose(rng).copied().unwrap() {
        0 => {
            let table = draw_size(TABLE, rng);
            let mut out = vec![Placed { label: TABLE, size: table, offset: Vec3::zeros(), yaw: 0.0 }];
            let mut sides = vec![0usize, 1, 2, 3];
            sides.shuffle(rng);
            let count = rng.gen_range(2..=4);
            for &side in sides.iter().take(count) {
                let chair = draw_size(CHAIR, rng);
                let (offset, yaw) = match side {
                    0 => (Vec3::new(table.x / 2.0 + chair.x / 2.0 + gap, 0.0, 0.0), PI),
                    1 => (Vec3::new(-table.x / 2.0 - chair.x / 2.0 - gap, 0.0, 0.0), 0.0),
                    2 => (Vec3::new(0.0, table.y / 2.0 + chair.x / 2.0 + gap, 0.0), -FRAC_PI_2),
                    _ => (Vec3::new(0.0, -table.y / 2.0 - chair.x / 2.0 - gap, 0.0), FRAC_PI_2),
                };
                out.push(Placed { label: CHAIR, size: chair, offset, yaw });
            }
            out
        }
        1 => {
            let bed = draw_size(BED, rng);
            let mut out = vec![Placed { label: BED, size: bed, offset: Vec3::zeros(), yaw: 0.0 }];
            let count = rng.gen_range(1..=2);
            let mut sides = [1.0, -1.0];
            sides.shuffle(rng);
            for &s in sides.iter().take(count) {
                let ns = draw_size(NIGHTSTAND, rng);
                let offset = Vec3::new(s * (bed.x / 2.0 + ns.x / 2.0 + gap), (bed.y - ns.y) / 2.0, 0.0);
                out.push(Placed { label: NIGHTSTAND, size: ns, offset, yaw: 0.0 });
            }
            out
        }
        _ => {
            let sofa = draw_size(SOFA, rng);
            let mut table = draw_size(TABLE, rng);
            table.z *= 0.6;
            let offset = Vec3::new(0.0, sofa.y / 2.0 + table.y / 2.0 + 0.3, 0.0);
            vec![
                Placed { label: SOFA, size: sofa, offset: Vec3::zeros(), yaw: 0.0 },
                Placed { label: TABLE, size: table, offset, yaw: 0.0 },
            ]
        }
    }
}

/// Lattice points filling the axis-aligned footprint box of `points`.
fn solid_fill(points: &[Vec3], spacing: f64) -> Vec<Vec3> {
    let (lo, hi) = crate::geometry::bounds(points).expect("non-empty");
    let steps = |a: usize| ((hi[a] - lo[a]) / spacing).ceil() as usize + 1;
    let (nx, ny, nz) = (steps(0), steps(1), steps(2));
    let mut out = Vec::with_capacity(nx * ny * nz);
    for i in 0..nx {
        for j in 0..ny {
            for k in 0..nz {
                out.push(Vec3::new(
                    (lo.x + i as f64 * spacing).min(hi.x),
                    (lo.y + j as f64 * spacing).min(hi.y),
                    (lo.z + k as f64 * spacing).min(hi.z),
                ));
            }
        }
    }
    out
}

/// Scene builder that keeps an occupancy grid of the solid footprints placed
/// so far.
pub struct Placer {
    grid: OccupancyGrid,
    lo: Vec3,
    hi: Vec3,
}

impl Placer {
    pub fn new(corners: &[Vec3], cell_size: f64) -> Result<Self> {
        let (lo, hi) = crate::geometry::bounds(corners).ok_or_else(|| Error::invalid("no corners"))?;
        Ok(Placer {
            grid: OccupancyGrid::new(lo, hi, cell_size)?,
            lo,
            hi,
        })
    }

    /// Marks existing objects as occupied.
    pub fn add_existing(&mut self, objects: &[ObjectInstance]) {
        for o in objects {
            let fill = solid_fill(o.points(), self.grid.cell_size() * 0.5);
            self.grid.mark_points(&fill);
        }
    }

    /// Places the objects if they lie inside the room and do not touch any
    /// occupied cell; returns whether they were placed.
    pub fn try_place(&mut self, objects: &[ObjectInstance]) -> bool {
        let margin = 0.02;
        let mut fills = Vec::with_capacity(objects.len());
        for o in objects {
            let (lo, hi) = o.bounds();
            if (0..2).any(|a| lo[a] < self.lo[a] + margin || hi[a] > self.hi[a] - margin) {
                return false;
            }
            let fill = solid_fill(o.points(), self.grid.cell_size() * 0.5);
            if !self.grid.is_free_for(&fill) {
                return false;
            }
            fills.push(fill);
        }
        // Group members are laid out apart by construction and may share
        // border cells, so only the grid as it was before is checked.
        for fill in &fills {
            self.grid.mark_points(fill);
        }
        true
    }

    pub fn room_bounds(&self) -> (Vec3, Vec3) {
        (self.lo, self.hi)
    }
}

fn room_corners(w: f64, d: f64, h: f64) -> Vec<Vec3> {
    let mut c = Vec::with_capacity(8);
    for z in [0.0, h] {
        for (x, y) in [(0.0, 0.0), (w, 0.0), (w, d), (0.0, d)] {
            c.push(Vec3::new(x, y, z));
        }
    }
    c
}

/// Builds an object of `label` with `size` resting on the floor at `center`
/// (xy) and rotated by `yaw`.
pub fn make_object(
    id: u32,
    label: SemanticLabel,
    size: Vec3,
    center: Vec3,
    yaw: f64,
    n: usize,
    rng: &mut impl Rng,
) -> Result<ObjectInstance> {
    let r = rot_z(yaw);
    let base = Vec3::new(center.x, center.y, 0.0);
    let points = sample_surface(label, size, n, rng).into_iter().map(|p| r * p + base).collect();
    ObjectInstance::new(id, label, points)
}

/// Draws one object of a random allowed class, for adding to an existing
/// scene.
pub fn random_object(id: u32, cfg: &GeneratorConfig, rng: &mut impl Rng) -> Result<ObjectInstance> {
    let labels: Vec<u16> = (1..=NUM_CLASSES).filter(|&l| cfg.allows(l)).collect();
    let label = *labels.choose(rng).ok_or_else(|| Error::invalid("no labels allowed"))?;
    let size = draw_size(label, rng);
    make_object(id, SemanticLabel::new(label)?, size, Vec3::zeros(), 0.0, cfg.points_per_object, rng)
}

pub fn generate_scene(cfg: &GeneratorConfig, rng: &mut impl Rng) -> Result<Scene> {
    if cfg.min_objects == 0 || cfg.min_objects > cfg.max_objects {
        return Err(Error::invalid("generator needs 1 <= min_objects <= max_objects"));
    }
    use std::f64::consts::FRAC_PI_2;
    let w = rng.gen_range(cfg.room_size.0..=cfg.room_size.1);
    let d = rng.gen_range(cfg.room_size.0..=cfg.room_size.1);
    let corners = room_corners(w, d, cfg.room_height);
    let target = rng.gen_range(cfg.min_objects..=cfg.max_objects);
    for _attempt in 0..20 {
        let mut placer = Placer::new(&corners, cfg.cell_size)?;
        let mut objects: Vec<ObjectInstance> = Vec::new();
        let mut failures = 0;
        while objects.len() < target && failures < 40 {
            let mut layout = group_layout(rng, cfg);
            layout.truncate(target - objects.len());
            let yaw = FRAC_PI_2 * rng.gen_range(0..4) as f64;
            let center = Vec3::new(rng.gen_range(0.0..w), rng.gen_range(0.0..d), 0.0);
            let r = rot_z(yaw);
            let mut group = Vec::with_capacity(layout.len());
            for (k, p) in layout.iter().enumerate() {
                let obj = make_object(
                    (objects.len() + k) as u32,
                    SemanticLabel::new(p.label)?,
                    p.size,
                    center + r * p.offset,
                    yaw + p.yaw,
                    cfg.points_per_object,
                    rng,
                )?;
                group.push(obj);
            }
            if placer.try_place(&group) {
                objects.extend(group);
            } else {
                failures += 1;
            }
        }
        if objects.len() >= cfg.min_objects {
            return Scene::new(objects, corners);
        }
    }
    Err(Error::invalid("could not place enough objects; room too small for the requested count"))
}

pub fn generate_scenes(cfg: &GeneratorConfig, count: usize, rng: &mut impl Rng) -> Result<Vec<Scene>> {
    (0..count).map(|_| generate_scene(cfg, rng)).collect()
}
