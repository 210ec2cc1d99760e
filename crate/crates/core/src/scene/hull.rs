//! Convex hulls of scene point sets.

use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::geometry::{bounds, Vec3};

/// Hull as an intersection of half-spaces `n . x <= offset` (unit normals),
/// plus the vertex list.
#[derive(Clone, Debug)]
pub struct ConvexHull {
    vertices: Vec<Vec3>,
    planes: Vec<(Vec3, f64)>,
}

impl ConvexHull {
    /// Builds the hull of `points`. Coplanar input falls back to the 2D hull
    /// of the xy-projection lifted to the min and max z.
    pub fn new(points: &[Vec3]) -> Result<Self> {
        if points.len() < 3 {
            return Err(Error::Degenerate(format!(
                "convex hull needs at least 3 points, got {}",
                points.len()
            )));
        }
        match hull_3d(points) {
            Some(h) => Ok(h),
            None => hull_planar(points),
        }
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    /// Largest signed distance of `p` outside any supporting plane.
    pub fn outside_distance(&self, p: &Vec3) -> f64 {
        self.planes
            .iter()
            .map(|(n, o)| n.dot(p) - o)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn contains(&self, p: &Vec3, margin: f64) -> bool {
        self.outside_distance(p) <= margin
    }
}

/// Vertices of the convex hull of `points`.
pub fn convex_hull_corners(points: &[Vec3]) -> Result<Vec<Vec3>> {
    Ok(ConvexHull::new(points)?.vertices)
}

fn scale_of(points: &[Vec3]) -> f64 {
    let (lo, hi) = bounds(points).expect("non-empty");
    (hi - lo).norm().max(1e-12)
}

#[derive(Clone, Copy)]
struct Face {
    v: [usize; 3],
    normal: Vec3,
    offset: f64,
}

fn make_face(points: &[Vec3], a: usize, b: usize, c: usize, interior: &Vec3) -> Face {
    let n = (points[b] - points[a]).cross(&(points[c] - points[a]));
    let n = n / n.norm();
    let offset = n.dot(&points[a]);
    if n.dot(interior) - offset > 0.0 {
        Face {
            v: [a, c, b],
            normal: -n,
            offset: -offset,
        }
    } else {
        Face {
            v: [a, b, c],
            normal: n,
            offset,
        }
    }
}

fn hull_3d(points: &[Vec3]) -> Option<ConvexHull> {
    let scale = scale_of(points);
    let eps = 1e-9 * scale;

    let i0 = (0..points.len())
        .min_by(|&a, &b| points[a].x.total_cmp(&points[b].x))
        .unwrap();
    let i1 = (0..points.len())
        .max_by(|&a, &b| {
            (points[a] - points[i0])
                .norm()
                .total_cmp(&(points[b] - points[i0]).norm())
        })
        .unwrap();
    let dir = (points[i1] - points[i0]).normalize();
    let line_dist = |p: &Vec3| {
        let d = p - points[i0];
        (d - dir * d.dot(&dir)).norm()
    };
    let i2 = (0..points.len())
        .max_by(|&a, &b| line_dist(&points[a]).total_cmp(&line_dist(&points[b])))
        .unwrap();
    if line_dist(&points[i2]) <= eps {
        return None;
    }
    let n = (points[i1] - points[i0])
        .cross(&(points[i2] - points[i0]))
        .normalize();
    let plane_dist = |p: &Vec3| (p - points[i0]).dot(&n).abs();
    let i3 = (0..points.len())
        .max_by(|&a, &b| plane_dist(&points[a]).total_cmp(&plane_dist(&points[b])))
        .unwrap();
    if plane_dist(&points[i3]) <= eps * 10.0 {
        return None;
    }

    let interior = (points[i0] + points[i1] + points[i2] + points[i3]) / 4.0;
    let mut faces = vec![
        make_face(points, i0, i1, i2, &interior),
        make_face(points, i0, i1, i3, &interior),
        make_face(points, i0, i2, i3, &interior),
        make_face(points, i1, i2, i3, &interior),
    ];

    for (pi, p) in points.iter().enumerate() {
        if [i0, i1, i2, i3].contains(&pi) {
            continue;
        }
        let visible: Vec<bool> = faces
            .iter()
            .map(|f| f.normal.dot(p) - f.offset > eps)
            .collect();
        if !visible.iter().any(|&v| v) {
            continue;
        }
        let mut edges = HashSet::new();
        for (f, _) in faces.iter().zip(&visible).filter(|(_, &v)| v) {
            for k in 0..3 {
                edges.insert((f.v[k], f.v[(k + 1) % 3]));
            }
        }
        let mut kept: Vec<Face> = faces
            .iter()
            .zip(&visible)
            .filter(|(_, &v)| !v)
            .map(|(f, _)| *f)
            .collect();
        let mut horizon: Vec<(usize, usize)> = edges
            .iter()
            .filter(|(a, b)| !edges.contains(&(*b, *a)))
            .copied()
            .collect();
        horizon.sort_unstable();
        for (a, b) in horizon {
            kept.push(make_face(points, a, b, pi, &interior));
        }
        faces = kept;
    }

    let mut used: Vec<usize> = faces.iter().flat_map(|f| f.v).collect();
    used.sort_unstable();
    used.dedup();
    Some(ConvexHull {
        vertices: used.into_iter().map(|i| points[i]).collect(),
        planes: faces.iter().map(|f| (f.normal, f.offset)).collect(),
    })
}

fn cross2(o: &Vec3, a: &Vec3, b: &Vec3) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

fn hull_planar(points: &[Vec3]) -> Result<ConvexHull> {
    let scale = scale_of(points);
    let eps = 1e-12 * scale * scale;
    let mut pts: Vec<Vec3> = points.to_vec();
    pts.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    pts.dedup_by(|a, b| (a.x - b.x).abs() <= 1e-12 && (a.y - b.y).abs() <= 1e-12);

    // Monotone chain, counter-clockwise, collinear points dropped.
    let mut lower: Vec<Vec3> = Vec::new();
    for p in &pts {
        while lower.len() >= 2 && cross2(&lower[lower.len() - 2], &lower[lower.len() - 1], p) <= eps
        {
            lower.pop();
        }
        lower.push(*p);
    }
    let mut upper: Vec<Vec3> = Vec::new();
    for p in pts.iter().rev() {
        while upper.len() >= 2 && cross2(&upper[upper.len() - 2], &upper[upper.len() - 1], p) <= eps
        {
            upper.pop();
        }
        upper.push(*p);
    }
    lower.pop();
    upper.pop();
    let ring: Vec<Vec3> = lower.into_iter().chain(upper).collect();
    if ring.len() < 3 {
        return Err(Error::Degenerate(
            "points are collinear in the ground plane".into(),
        ));
    }

    let (lo, hi) = bounds(points).unwrap();
    let mut planes = Vec::with_capacity(ring.len() + 2);
    for i in 0..ring.len() {
        let a = ring[i];
        let b = ring[(i + 1) % ring.len()];
        // Outward normal of a counter-clockwise edge.
        let n = Vec3::new(b.y - a.y, a.x - b.x, 0.0).normalize();
        planes.push((n, n.dot(&a)));
    }
    planes.push((Vec3::z(), hi.z));
    planes.push((-Vec3::z(), -lo.z));

    let mut vertices: Vec<Vec3> = ring.iter().map(|p| Vec3::new(p.x, p.y, lo.z)).collect();
    if hi.z > lo.z {
        vertices.extend(ring.iter().map(|p| Vec3::new(p.x, p.y, hi.z)));
    }
    Ok(ConvexHull { vertices, planes })
}
