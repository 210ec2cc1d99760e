//! Shared 3D point type and small helpers.

use nalgebra::{Matrix3, Vector3};

pub type Vec3 = Vector3<f64>;

pub fn centroid(points: &[Vec3]) -> Vec3 {
    let sum = points.iter().fold(Vec3::zeros(), |acc, p| acc + p);
    sum / points.len().max(1) as f64
}

/// Axis-aligned bounds `(min, max)`; `None` for an empty slice.
pub fn bounds(points: &[Vec3]) -> Option<(Vec3, Vec3)> {
    let first = *points.first()?;
    Some(points.iter().fold((first, first), |(lo, hi), p| {
        (lo.inf(p), hi.sup(p))
    }))
}

/// Rotation about +z by `angle` radians.
pub fn rot_z(angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

pub fn to_array(p: &Vec3) -> [f64; 3] {
    [p.x, p.y, p.z]
}

pub fn from_array(a: [f64; 3]) -> Vec3 {
    Vec3::new(a[0], a[1], a[2])
}

/// Sorted multiset of all pairwise distances, used to compare shapes up to
/// rigid motion.
pub fn pairwise_distances_sorted(points: &[Vec3]) -> Vec<f64> {
    let mut d = Vec::with_capacity(points.len() * points.len().saturating_sub(1) / 2);
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            d.push((points[i] - points[j]).norm());
        }
    }
    d.sort_by(f64::total_cmp);
    d
}
