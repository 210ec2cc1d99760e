use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::pool::{generate_positive, ObjectPool};
use crate::assignment::match_point_sets;
use crate::error::Result;
use crate::geometry::{rot_z, Vec3};
use crate::scene::{ObjectInstance, Scene};

/// Planar pose noise for negative scenes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseNoise {
    /// Half-width of the uniform x and y offsets, meters.
    pub translation: f64,
    /// Half-width of the uniform z-rotation, degrees.
    pub rotation_deg: f64,
}

impl PoseNoise {
    pub const NEGATIVE: PoseNoise = PoseNoise {
        translation: 0.5,
        rotation_deg: 90.0,
    };

    pub const NONE: PoseNoise = PoseNoise {
        translation: 0.0,
        rotation_deg: 0.0,
    };

    fn draw(&self, rng: &mut impl Rng) -> (Vec3, f64) {
        let u = |rng: &mut dyn rand::RngCore, h: f64| if h > 0.0 { rng.gen_range(-h..=h) } else { 0.0 };
        let tx = u(rng, self.translation);
        let ty = u(rng, self.translation);
        let theta = u(rng, self.rotation_deg).to_radians();
        (Vec3::new(tx, ty, 0.0), theta)
    }
}

/// `object` rotated about its centroid's vertical axis by `theta` and
/// shifted by `t`.
pub fn perturb_object(object: &ObjectInstance, t: Vec3, theta: f64) -> ObjectInstance {
    if theta == 0.0 && t == Vec3::zeros() {
        return object.clone();
    }
    let r = rot_z(theta);
    let c = object.centroid();
    object.map_points(|p| r * (p - c) + c + t)
}

/// Every object moved by an independent planar rigid perturbation.
pub fn generate_negative(scene: &Scene, noise: PoseNoise, rng: &mut impl Rng) -> Scene {
    let objects = scene
        .objects()
        .iter()
        .map(|o| {
            let (t, theta) = noise.draw(rng);
            perturb_object(o, t, theta)
        })
        .collect();
    scene.with_objects(objects).expect("ids unchanged")
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuerySampling {
    /// Lattice points per bounding-box axis.
    pub grid_n: usize,
    /// Jitter of near-surface samples, meters.
    pub surface_sigma: f64,
}

impl Default for QuerySampling {
    fn default() -> Self {
        QuerySampling {
            grid_n: 20,
            surface_sigma: 0.02,
        }
    }
}

fn lattice(object: &ObjectInstance, n: usize) -> Vec<Vec3> {
    let (lo, hi) = object.bounds();
    let ext = hi - lo;
    let mut out = Vec::with_capacity(n * n * n);
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                let f = Vec3::new(i as f64 + 0.5, j as f64 + 0.5, k as f64 + 0.5) / n as f64;
                out.push(lo + ext.component_mul(&f));
            }
        }
    }
    out
}

/// Corresponding query points for an object and its replacement: bounding
/// box lattice points paired with their nearest lattice point in normalized
/// box coordinates (the same lattice index), plus as many jittered surface
/// samples paired by minimum-cost matching.
pub fn sample_query_pairs(
    obj: &ObjectInstance,
    obj_plus: &ObjectInstance,
    sampling: QuerySampling,
    rng: &mut impl Rng,
) -> Result<Vec<(Vec3, Vec3)>> {
    let n = sampling.grid_n;
    let mut pairs: Vec<(Vec3, Vec3)> = lattice(obj, n).into_iter().zip(lattice(obj_plus, n)).collect();
    let count = n * n * n;
    let normal = Normal::new(0.0, sampling.surface_sigma.max(0.0)).expect("finite sigma");
    let jittered = |o: &ObjectInstance, rng: &mut dyn rand::RngCore| -> Vec<Vec3> {
        (0..count)
            .map(|_| {
                let p = o.points()[rng.gen_range(0..o.points().len())];
                p + Vec3::new(normal.sample(rng), normal.sample(rng), normal.sample(rng))
            })
            .collect()
    };
    let a = jittered(obj, rng);
    let b = jittered(obj_plus, rng);
    let assignment = match_point_sets(&a, &b)?;
    pairs.extend(a.iter().zip(&assignment).map(|(p, &j)| (*p, b[j])));
    Ok(pairs)
}

/// A source scene with its positive and negative versions and the query
/// pairs of every object slot.
#[derive(Clone, Debug, PartialEq)]
pub struct TripletRecord {
    pub source: Scene,
    pub positive: Scene,
    pub negative: Scene,
    pub query_pairs: Vec<Vec<(Vec3, Vec3)>>,
}

impl TripletRecord {
    pub fn num_pairs(&self) -> usize {
        self.query_pairs.iter().map(Vec::len).sum()
    }
}

/// Builds a triplet from `scenes[index]`, excluding that scene's own objects
/// from the replacement candidates when possible. Negative queries are the
/// positive query points evaluated in the negative scene.
pub fn generate_triplet(
    scenes: &[Scene],
    index: usize,
    pool: &ObjectPool,
    top_k: usize,
    noise: PoseNoise,
    sampling: QuerySampling,
    rng: &mut impl Rng,
) -> Result<TripletRecord> {
    let source = scenes[index].clone();
    let positive = generate_positive(&source, pool, top_k, Some(index), rng)?;
    let negative = generate_negative(&source, noise, rng);
    let query_pairs = source
        .objects()
        .iter()
        .zip(positive.objects())
        .map(|(o, op)| sample_query_pairs(o, op, sampling, rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(TripletRecord {
        source,
        positive,
        negative,
        query_pairs,
    })
}
