use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::scene::{ObjectInstance, Scene, SemanticLabel};

/// Number of closest-aspect candidates a replacement is drawn from.
pub const DEFAULT_TOP_K: usize = 100;

/// Log extents normalized to zero mean: a scale-free bounding-box shape.
pub fn aspect_signature(extents: &Vec3) -> [f64; 3] {
    let l = [
        extents.x.max(1e-6).ln(),
        extents.y.max(1e-6).ln(),
        extents.z.max(1e-6).ln(),
    ];
    let mean = (l[0] + l[1] + l[2]) / 3.0;
    [l[0] - mean, l[1] - mean, l[2] - mean]
}

/// L1 distance between aspect signatures.
pub fn aspect_distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (a[0] - b[0]).abs() + (a[1] - b[1]).abs() + (a[2] - b[2]).abs()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoolEntry {
    pub object: ObjectInstance,
    /// Index of the scene the object came from.
    pub source: usize,
    pub aspect: [f64; 3],
}

/// Objects of a scene collection bucketed by label.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ObjectPool {
    buckets: BTreeMap<SemanticLabel, Vec<PoolEntry>>,
}

impl ObjectPool {
    pub fn from_scenes(scenes: &[Scene]) -> Self {
        let mut pool = ObjectPool::default();
        for (i, s) in scenes.iter().enumerate() {
            for o in s.objects() {
                pool.insert(o.clone(), i);
            }
        }
        pool
    }

    pub fn insert(&mut self, object: ObjectInstance, source: usize) {
        let aspect = aspect_signature(&object.extents());
        self.buckets.entry(object.label()).or_default().push(PoolEntry {
            object,
            source,
            aspect,
        });
    }

    pub fn bucket(&self, label: SemanticLabel) -> &[PoolEntry] {
        self.buckets.get(&label).map_or(&[], Vec::as_slice)
    }

    pub fn labels(&self) -> Vec<SemanticLabel> {
        self.buckets.keys().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.buckets.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The `k` entries of `label` with the closest aspect signature, ties
    /// broken by insertion order. Entries from scene `exclude` are skipped
    /// unless nothing else carries the label.
    pub fn nearest_by_aspect(
        &self,
        label: SemanticLabel,
        aspect: &[f64; 3],
        k: usize,
        exclude: Option<usize>,
    ) -> Vec<&PoolEntry> {
        let bucket = self.bucket(label);
        let mut eligible: Vec<(usize, &PoolEntry)> = bucket
            .iter()
            .enumerate()
            .filter(|(_, e)| Some(e.source) != exclude)
            .collect();
        if eligible.is_empty() {
            eligible = bucket.iter().enumerate().collect();
        }
        eligible.sort_by(|(ia, a), (ib, b)| {
            aspect_distance(&a.aspect, aspect)
                .total_cmp(&aspect_distance(&b.aspect, aspect))
                .then(ia.cmp(ib))
        });
        eligible.into_iter().take(k).map(|(_, e)| e).collect()
    }
}

/// `candidate` moved onto `original`: centroid aligned and scaled to the
/// original's bounding-box diagonal. Keeps the original's id and label.
pub fn repose(candidate: &ObjectInstance, original: &ObjectInstance) -> ObjectInstance {
    let scale = original.extents().norm() / candidate.extents().norm().max(1e-12);
    let (cc, co) = (candidate.centroid(), original.centroid());
    let moved = candidate.map_points(|p| co + (p - cc) * scale);
    ObjectInstance::new(original.id(), original.label(), moved.points().to_vec()).expect("non-empty")
}

/// Replaces every object with a same-label pool object of similar aspect
/// ratio, re-posed onto the original.
pub fn generate_positive(
    scene: &Scene,
    pool: &ObjectPool,
    top_k: usize,
    exclude_source: Option<usize>,
    rng: &mut impl Rng,
) -> Result<Scene> {
    let mut objects = Vec::with_capacity(scene.objects().len());
    for o in scene.objects() {
        let aspect = aspect_signature(&o.extents());
        let cands = pool.nearest_by_aspect(o.label(), &aspect, top_k, exclude_source);
        let pick = cands.choose(rng).ok_or_else(|| {
            Error::invalid(format!("object pool has no entries with label {}", o.label().id()))
        })?;
        objects.push(repose(&pick.object, o));
    }
    scene.with_objects(objects)
}
