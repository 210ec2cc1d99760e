use serde::{Deserialize, Serialize};

use super::Scene;
use crate::error::{Error, Result};
use crate::geometry::{bounds, Vec3};

/// Integer cell coordinates `(i, j, k)`.
pub type Cell = [usize; 3];

/// Axis-aligned voxel grid marking cells that contain object geometry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OccupancyGrid {
    origin: [f64; 3],
    cell_size: f64,
    dims: [usize; 3],
    occupied: Vec<bool>,
}

impl OccupancyGrid {
    /// Empty grid covering the box `[lo, hi]`.
    pub fn new(lo: Vec3, hi: Vec3, cell_size: f64) -> Result<Self> {
        if !(cell_size > 0.0) || !cell_size.is_finite() {
            return Err(Error::invalid(format!("cell size must be positive, got {cell_size}")));
        }
        let ext = hi - lo;
        if ext.iter().any(|e| !e.is_finite() || *e < 0.0) {
            return Err(Error::Degenerate("occupancy grid bounds are not a box".into()));
        }
        let mut dims = [0usize; 3];
        for a in 0..3 {
            dims[a] = ((ext[a] / cell_size).ceil() as usize).max(1);
        }
        let total = dims[0]
            .checked_mul(dims[1])
            .and_then(|v| v.checked_mul(dims[2]))
            .filter(|&v| v <= 50_000_000)
            .ok_or_else(|| Error::invalid("occupancy grid too large for the chosen cell size"))?;
        Ok(OccupancyGrid {
            origin: [lo.x, lo.y, lo.z],
            cell_size,
            dims,
            occupied: vec![false; total],
        })
    }

    pub fn from_parts(origin: [f64; 3], cell_size: f64, dims: [usize; 3], occupied: Vec<bool>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) || !(cell_size > 0.0) {
            return Err(Error::invalid("grid dims and cell size must be positive"));
        }
        if occupied.len() != dims[0] * dims[1] * dims[2] {
            return Err(Error::invalid("occupancy vector does not match dims"));
        }
        Ok(OccupancyGrid {
            origin,
            cell_size,
            dims,
            occupied,
        })
    }

    pub fn origin(&self) -> Vec3 {
        Vec3::from(self.origin)
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.occupied.len()
    }

    pub fn is_empty(&self) -> bool {
        self.occupied.is_empty()
    }

    pub fn occupied_count(&self) -> usize {
        self.occupied.iter().filter(|&&o| o).count()
    }

    pub fn index(&self, c: Cell) -> usize {
        (c[0] * self.dims[1] + c[1]) * self.dims[2] + c[2]
    }

    pub fn in_bounds(&self, c: [i64; 3]) -> bool {
        (0..3).all(|a| c[a] >= 0 && (c[a] as usize) < self.dims[a])
    }

    pub fn is_occupied(&self, c: Cell) -> bool {
        self.occupied[self.index(c)]
    }

    pub fn set(&mut self, c: Cell, value: bool) {
        let i = self.index(c);
        self.occupied[i] = value;
    }

    /// Cell containing `p`, clamped onto the grid. Points on the far boundary
    /// fall into the last cell.
    pub fn cell_of(&self, p: &Vec3) -> Cell {
        let mut c = [0usize; 3];
        for a in 0..3 {
            let f = ((p[a] - self.origin[a]) / self.cell_size).floor();
            c[a] = f.clamp(0.0, (self.dims[a] - 1) as f64) as usize;
        }
        c
    }

    /// Cell containing `p`, or `None` if `p` is off the grid.
    pub fn try_cell_of(&self, p: &Vec3) -> Option<Cell> {
        let mut c = [0usize; 3];
        for a in 0..3 {
            let f = ((p[a] - self.origin[a]) / self.cell_size).floor();
            let last = (self.dims[a] - 1) as f64;
            let f = if f == last + 1.0 && p[a] <= self.origin[a] + self.dims[a] as f64 * self.cell_size {
                last
            } else {
                f
            };
            if f < 0.0 || f > last {
                return None;
            }
            c[a] = f as usize;
        }
        Some(c)
    }

    pub fn center(&self, c: Cell) -> Vec3 {
        Vec3::new(
            self.origin[0] + (c[0] as f64 + 0.5) * self.cell_size,
            self.origin[1] + (c[1] as f64 + 0.5) * self.cell_size,
            self.origin[2] + (c[2] as f64 + 0.5) * self.cell_size,
        )
    }

    /// Marks the cell under every point. Off-grid points are clamped so that
    /// geometry slightly outside the bounds still blocks the border cells.
    pub fn mark_points(&mut self, points: &[Vec3]) {
        for p in points {
            let c = self.cell_of(p);
            self.set(c, true);
        }
    }

    /// True when none of the cells touched by `points` is occupied.
    pub fn is_free_for(&self, points: &[Vec3]) -> bool {
        points
            .iter()
            .all(|p| self.try_cell_of(p).is_some_and(|c| !self.is_occupied(c)))
    }

    pub fn cells(&self) -> impl Iterator<Item = Cell> + '_ {
        let [_, ny, nz] = self.dims;
        (0..self.occupied.len()).map(move |i| [i / (ny * nz), (i / nz) % ny, i % nz])
    }
}

/// Voxelizes every object point of `scene` on a grid covering the corners'
/// bounding box.
pub fn build_occupancy_grid(scene: &Scene, cell_size: f64) -> Result<OccupancyGrid> {
    let (lo, hi) = bounds(scene.corners()).ok_or_else(|| Error::Degenerate("scene has no corners".into()))?;
    let ext = hi - lo;
    if ext.x <= 0.0 || ext.y <= 0.0 {
        return Err(Error::Degenerate("corner bounding box has zero floor area".into()));
    }
    let mut grid = OccupancyGrid::new(lo, hi, cell_size)?;
    for o in scene.objects() {
        grid.mark_points(o.points());
    }
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{ObjectInstance, SemanticLabel};
    use std::collections::BTreeSet;

    fn corners(size: f64) -> Vec<Vec3> {
        let mut c = Vec::new();
        for z in [0.0, size] {
            for (x, y) in [(0.0, 0.0), (size, 0.0), (size, size), (0.0, size)] {
                c.push(Vec3::new(x, y, z));
            }
        }
        c
    }

    #[test]
    fn empty_scene_is_free() {
        let s = Scene::new(vec![], corners(3.0)).unwrap();
        let g = build_occupancy_grid(&s, 0.5).unwrap();
        assert_eq!(g.dims(), [6, 6, 6]);
        assert_eq!(g.occupied_count(), 0);
    }

    #[test]
    fn single_point_single_cell() {
        let mut c = corners(2.0);
        for p in &mut c {
            *p -= Vec3::new(1.0, 1.0, 1.0);
        }
        let obj = ObjectInstance::new(1, SemanticLabel::new(1).unwrap(), vec![Vec3::zeros()]).unwrap();
        let s = Scene::new(vec![obj], c).unwrap();
        let g = build_occupancy_grid(&s, 1.0).unwrap();
        assert_eq!(g.occupied_count(), 1);
        assert!(g.is_occupied([1, 1, 1]));
    }

    #[test]
    fn matches_direct_rasterization() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let objects: Vec<ObjectInstance> = (0..5)
            .map(|i| {
                let pts = (0..80)
                    .map(|_| Vec3::new(rng.gen_range(0.0..4.0), rng.gen_range(0.0..4.0), rng.gen_range(0.0..1.0)))
                    .collect();
                ObjectInstance::new(i, SemanticLabel::new(1).unwrap(), pts).unwrap()
            })
            .collect();
        let s = Scene::new(objects, corners(4.0)).unwrap();
        let cs = 0.3;
        let g = build_occupancy_grid(&s, cs).unwrap();
        let mut expected = BTreeSet::new();
        for o in s.objects() {
            for p in o.points() {
                let c = [
                    ((p.x / cs).floor() as usize).min(g.dims()[0] - 1),
                    ((p.y / cs).floor() as usize).min(g.dims()[1] - 1),
                    ((p.z / cs).floor() as usize).min(g.dims()[2] - 1),
                ];
                expected.insert(c);
            }
        }
        let got: BTreeSet<Cell> = g.cells().filter(|c| g.is_occupied(*c)).collect();
        assert_eq!(got, expected);
    }

    #[test]
    fn rejects_bad_inputs() {
        let s = Scene::new(vec![], corners(1.0)).unwrap();
        assert!(build_occupancy_grid(&s, 0.0).is_err());
        let flat = vec![Vec3::zeros(), Vec3::new(1.0, 0.0, 0.0), Vec3::new(2.0, 0.0, 0.0)];
        let s = Scene::new(vec![], flat).unwrap();
        assert!(build_occupancy_grid(&s, 0.5).is_err());
    }
}
