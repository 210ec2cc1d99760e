//! Scenes, objects, regions of interest, keypoints and occupancy grids.

mod hull;
mod occupancy;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

pub use hull::{convex_hull_corners, ConvexHull};
pub use occupancy::{build_occupancy_grid, Cell, OccupancyGrid};

use crate::error::{Error, Result};
use crate::geometry::{centroid, Vec3};

/// Keypoints sampled per object for the field's scene representation.
pub const DEFAULT_KEYPOINTS_PER_OBJECT: usize = 50;
/// Points sampled per object when building a region of interest.
pub const DEFAULT_ROI_POINTS_PER_OBJECT: usize = 400;
/// Slack allowed between object points and the corner hull.
pub const DEFAULT_CONTAINMENT_MARGIN: f64 = 0.25;

/// Object class id. Objects use `1..=L`; [`SemanticLabel::CORNER`] (0) is
/// reserved for scene corner points.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SemanticLabel(u16);

impl SemanticLabel {
    pub const CORNER: SemanticLabel = SemanticLabel(0);

    pub fn new(id: u16) -> Result<Self> {
        if id == 0 {
            return Err(Error::invalid("object labels start at 1; 0 is the corner label"));
        }
        Ok(SemanticLabel(id))
    }

    pub fn id(self) -> u16 {
        self.0
    }

    pub fn is_corner(self) -> bool {
        self.0 == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectInstance {
    id: u32,
    label: SemanticLabel,
    points: Vec<Vec3>,
    centroid: Vec3,
}

impl ObjectInstance {
    pub fn new(id: u32, label: SemanticLabel, points: Vec<Vec3>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid(format!("object {id} has no points")));
        }
        if label.is_corner() {
            return Err(Error::invalid(format!("object {id} uses the corner label")));
        }
        let centroid = centroid(&points);
        Ok(ObjectInstance {
            id,
            label,
            points,
            centroid,
        })
    }

    pub fn id(&self) -> u32 {
        self.id
    }

    pub fn label(&self) -> SemanticLabel {
        self.label
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn centroid(&self) -> Vec3 {
        self.centroid
    }

    pub fn with_id(mut self, id: u32) -> Self {
        self.id = id;
        self
    }

    /// Same object with every point mapped through `f`.
    pub fn map_points(&self, f: impl Fn(&Vec3) -> Vec3) -> Self {
        let points: Vec<Vec3> = self.points.iter().map(f).collect();
        let centroid = centroid(&points);
        ObjectInstance {
            id: self.id,
            label: self.label,
            points,
            centroid,
        }
    }

    /// Axis-aligned extents of the object.
    pub fn extents(&self) -> Vec3 {
        let (lo, hi) = crate::geometry::bounds(&self.points).unwrap();
        hi - lo
    }

    pub fn bounds(&self) -> (Vec3, Vec3) {
        crate::geometry::bounds(&self.points).unwrap()
    }
}

/// A scene: labeled objects plus corner points bounding the space.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    objects: Vec<ObjectInstance>,
    corners: Vec<Vec3>,
}

impl Scene {
    /// Checks id uniqueness and the corner count. Hull containment is checked
    /// separately by [`Scene::validate_containment`].
    pub fn new(objects: Vec<ObjectInstance>, corners: Vec<Vec3>) -> Result<Self> {
        if corners.len() < 3 {
            return Err(Error::invalid(format!(
                "a scene needs at least 3 corner points, got {}",
                corners.len()
            )));
        }
        let mut seen = BTreeSet::new();
        for o in &objects {
            if !seen.insert(o.id) {
                return Err(Error::invalid(format!("duplicate object id {}", o.id)));
            }
        }
        Ok(Scene { objects, corners })
    }

    pub fn objects(&self) -> &[ObjectInstance] {
        &self.objects
    }

    pub fn corners(&self) -> &[Vec3] {
        &self.corners
    }

    pub fn object(&self, id: u32) -> Option<&ObjectInstance> {
        self.objects.iter().find(|o| o.id == id)
    }

    pub fn object_ids(&self) -> Vec<u32> {
        self.objects.iter().map(|o| o.id).collect()
    }

    pub fn hull(&self) -> Result<ConvexHull> {
        ConvexHull::new(&self.corners)
    }

    /// Fails if any object point lies farther than `margin` outside the
    /// corners' convex hull.
    pub fn validate_containment(&self, margin: f64) -> Result<()> {
        let hull = self.hull()?;
        for o in &self.objects {
            if let Some(p) = o.points.iter().find(|p| !hull.contains(p, margin)) {
                return Err(Error::invalid(format!(
                    "object {} point ({:.3}, {:.3}, {:.3}) is outside the scene hull",
                    o.id, p.x, p.y, p.z
                )));
            }
        }
        Ok(())
    }

    /// Fails if any object label exceeds `num_classes`.
    pub fn validate_labels(&self, num_classes: u16) -> Result<()> {
        for o in &self.objects {
            if o.label.id() > num_classes {
                return Err(Error::invalid(format!(
                    "object {} has label {} but only {} classes are configured",
                    o.id,
                    o.label.id(),
                    num_classes
                )));
            }
        }
        Ok(())
    }

    /// Scene with every object and corner mapped through `f`.
    pub fn map_points(&self, f: impl Fn(&Vec3) -> Vec3) -> Scene {
        Scene {
            objects: self.objects.iter().map(|o| o.map_points(&f)).collect(),
            corners: self.corners.iter().map(&f).collect(),
        }
    }

    pub fn with_objects(&self, objects: Vec<ObjectInstance>) -> Result<Scene> {
        Scene::new(objects, self.corners.clone())
    }

    /// Count of objects per label, indexed by label id (`0..=num_classes`).
    pub fn label_histogram(&self, num_classes: u16) -> Vec<usize> {
        let mut h = vec![0; num_classes as usize + 1];
        for o in &self.objects {
            if let Some(slot) = h.get_mut(o.label.id() as usize) {
                *slot += 1;
            }
        }
        h
    }

    /// The sparse keypoint representation the descriptor field reads:
    /// `per_object` farthest-point samples of each object plus every corner.
    pub fn keypoints(&self, per_object: usize) -> KeypointSet {
        let mut positions = Vec::new();
        let mut labels = Vec::new();
        for o in &self.objects {
            let k = per_object.min(o.points.len()).max(1);
            let idx = farthest_point_indices(&o.points, k, 0).expect("k within range");
            positions.extend(idx.iter().map(|&i| o.points[i]));
            labels.extend(std::iter::repeat(o.label).take(idx.len()));
        }
        positions.extend(self.corners.iter().copied());
        labels.extend(std::iter::repeat(SemanticLabel::CORNER).take(self.corners.len()));
        KeypointSet { positions, labels }
    }
}

/// Labeled keypoints of a scene.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct KeypointSet {
    pub positions: Vec<Vec3>,
    pub labels: Vec<SemanticLabel>,
}

impl KeypointSet {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Indices of keypoints within `r` of `q`, in storage order.
    pub fn neighbors(&self, q: &Vec3, r: f64) -> Vec<usize> {
        let r2 = r * r;
        self.positions
            .iter()
            .enumerate()
            .filter(|(_, p)| (*p - q).norm_squared() <= r2)
            .map(|(i, _)| i)
            .collect()
    }

    /// Smallest `| |q - p| - r |` over all keypoints: how close `q` is to a
    /// change in neighborhood membership.
    pub fn membership_margin(&self, q: &Vec3, r: f64) -> f64 {
        self.positions
            .iter()
            .map(|p| ((p - q).norm() - r).abs())
            .fold(f64::INFINITY, f64::min)
    }
}

/// Keypoints within distance `r` of `q`, with their labels.
pub fn gather_neighborhood(q: &Vec3, keypoints: &KeypointSet, r: f64) -> Vec<(Vec3, SemanticLabel)> {
    keypoints
        .neighbors(q, r)
        .into_iter()
        .map(|i| (keypoints.positions[i], keypoints.labels[i]))
        .collect()
}

/// Indices chosen by farthest point sampling, starting at `start_index`.
/// Ties go to the lowest index.
pub fn farthest_point_indices(points: &[Vec3], k: usize, start_index: usize) -> Result<Vec<usize>> {
    if k == 0 || k > points.len() {
        return Err(Error::invalid(format!(
            "farthest point sampling of {k} from {} points",
            points.len()
        )));
    }
    if start_index >= points.len() {
        return Err(Error::invalid(format!(
            "start index {start_index} out of range for {} points",
            points.len()
        )));
    }
    let mut chosen = Vec::with_capacity(k);
    let mut min_d2 = vec![f64::INFINITY; points.len()];
    let mut current = start_index;
    for _ in 0..k {
        chosen.push(current);
        min_d2[current] = f64::NEG_INFINITY;
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for (i, p) in points.iter().enumerate() {
            if min_d2[i] == f64::NEG_INFINITY {
                continue;
            }
            let d = (p - points[current]).norm_squared();
            if d < min_d2[i] {
                min_d2[i] = d;
            }
            if min_d2[i] > best_d {
                best_d = min_d2[i];
                best = i;
            }
        }
        if best == usize::MAX {
            break;
        }
        current = best;
    }
    Ok(chosen)
}

pub fn farthest_point_sample(points: &[Vec3], k: usize, start_index: usize) -> Result<Vec<Vec3>> {
    Ok(farthest_point_indices(points, k, start_index)?
        .into_iter()
        .map(|i| points[i])
        .collect())
}

/// Points sampled from the surfaces of a chosen object group.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionOfInterest {
    object_ids: Vec<u32>,
    points: Vec<Vec3>,
    point_objects: Vec<u32>,
}

impl RegionOfInterest {
    /// `point_objects[i]` names the object `points[i]` came from.
    pub fn new(object_ids: Vec<u32>, points: Vec<Vec3>, point_objects: Vec<u32>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("region of interest has no points"));
        }
        if points.len() != point_objects.len() {
            return Err(Error::invalid("every RoI point needs a source object"));
        }
        if let Some(bad) = point_objects.iter().find(|id| !object_ids.contains(id)) {
            return Err(Error::invalid(format!(
                "RoI point attributed to unlisted object {bad}"
            )));
        }
        Ok(RegionOfInterest {
            object_ids,
            points,
            point_objects,
        })
    }

    pub fn object_ids(&self) -> &[u32] {
        &self.object_ids
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn point_objects(&self) -> &[u32] {
        &self.point_objects
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Sub-region keeping only points of the listed objects.
    pub fn restrict(&self, keep: &[u32]) -> Option<RegionOfInterest> {
        let ids: Vec<u32> = self
            .object_ids
            .iter()
            .copied()
            .filter(|id| keep.contains(id))
            .collect();
        let (points, owners): (Vec<Vec3>, Vec<u32>) = self
            .points
            .iter()
            .zip(&self.point_objects)
            .filter(|(_, o)| keep.contains(o))
            .map(|(p, o)| (*p, *o))
            .unzip();
        RegionOfInterest::new(ids, points, owners).ok()
    }
}

/// Farthest-point samples `points_per_object` points (all of them for
/// smaller objects) from each listed object and returns their union.
pub fn sample_roi(scene: &Scene, object_ids: &[u32], points_per_object: usize) -> Result<RegionOfInterest> {
    let mut ids: Vec<u32> = object_ids.to_vec();
    ids.sort_unstable();
    ids.dedup();
    if ids.is_empty() {
        return Err(Error::invalid("region of interest needs at least one object"));
    }
    let mut points = Vec::new();
    let mut owners = Vec::new();
    for &id in &ids {
        let obj = scene.object(id).ok_or(Error::UnknownObject(id))?;
        let sampled = farthest_point_sample(obj.points(), points_per_object.min(obj.points().len()), 0)?;
        owners.extend(std::iter::repeat(id).take(sampled.len()));
        points.extend(sampled);
    }
    RegionOfInterest::new(ids, points, owners)
}
