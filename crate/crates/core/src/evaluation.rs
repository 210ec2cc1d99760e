//! Evaluation pairs with pseudo ground truth, and the point, bijectivity and
//! Chamfer metrics.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assignment::hungarian;
use crate::error::{Error, Result};
use crate::field::DescriptorField;
use crate::geometry::{rot_z, Vec3};
use crate::map_estimation::{estimate_inverse, estimate_map, fit_tps, AffineMap, MapConfig, MapResult, SceneMap, StageCosts};
use crate::procedural::Placer;
use crate::scene::{farthest_point_sample, sample_roi, ObjectInstance, RegionOfInterest, Scene, DEFAULT_ROI_POINTS_PER_OBJECT};
use crate::training::{perturb_object, repose, ObjectPool, PoseNoise, DEFAULT_TOP_K};

pub const PCP_THRESHOLDS: [f64; 2] = [0.25, 0.50];
pub const CHAMFER_THRESHOLDS: [f64; 2] = [0.15, 0.20];

/// A target scene, the reference it should be mapped into, and the ground
/// truth position of every RoI point when the pair is matchable.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalPair {
    pub target: Scene,
    pub reference: Scene,
    pub roi: RegionOfInterest,
    pub gt_points: Option<Vec<Vec3>>,
}

impl EvalPair {
    pub fn new(target: Scene, reference: Scene, roi: RegionOfInterest, gt_points: Option<Vec<Vec3>>) -> Result<Self> {
        if let Some(gt) = &gt_points {
            if gt.len() != roi.len() {
                return Err(Error::invalid(format!(
                    "{} ground-truth points for {} RoI points",
                    gt.len(),
                    roi.len()
                )));
            }
        }
        for id in roi.object_ids() {
            target.object(*id).ok_or(Error::UnknownObject(*id))?;
        }
        Ok(EvalPair {
            target,
            reference,
            roi,
            gt_points,
        })
    }

    pub fn matchable(&self) -> bool {
        self.gt_points.is_some()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairConfig {
    /// Inclusive range of neighbors joined to the seed object.
    pub neighbors: (usize, usize),
    pub removal_prob: f64,
    pub noise: PoseNoise,
    /// Inclusive range of objects added from the closest dataset scene.
    pub additions: (usize, usize),
    /// Swap surviving objects for same-label dataset objects.
    pub replace: bool,
    pub top_k: usize,
    pub roi_points_per_object: usize,
    pub cell_size: f64,
    /// Random placements tried per added object before giving up.
    pub placement_attempts: usize,
    /// Also rotate the whole reference by a random quarter turn about the
    /// room center and shift it by up to this much in x and y. Off when
    /// `None`.
    pub global_shift: Option<f64>,
}

impl Default for PairConfig {
    fn default() -> Self {
        PairConfig {
            neighbors: (2, 4),
            removal_prob: 0.5,
            noise: PoseNoise {
                translation: 0.05,
                rotation_deg: 10.0,
            },
            additions: (2, 5),
            replace: true,
            top_k: DEFAULT_TOP_K,
            roi_points_per_object: DEFAULT_ROI_POINTS_PER_OBJECT,
            cell_size: 0.1,
            placement_attempts: 50,
            global_shift: None,
        }
    }
}

impl PairConfig {
    /// Nothing removed, perturbed, added or replaced.
    pub fn unperturbed() -> Self {
        PairConfig {
            removal_prob: 0.0,
            noise: PoseNoise::NONE,
            additions: (0, 0),
            replace: false,
            ..PairConfig::default()
        }
    }
}

/// The object at `seed` and its `k` nearest neighbors by centroid distance.
pub fn object_group(scene: &Scene, seed: usize, k: usize) -> Vec<u32> {
    let objects = scene.objects();
    let c = objects[seed].centroid();
    let mut order: Vec<usize> = (0..objects.len()).filter(|&i| i != seed).collect();
    order.sort_by(|&a, &b| {
        (objects[a].centroid() - c)
            .norm()
            .total_cmp(&(objects[b].centroid() - c).norm())
            .then(a.cmp(&b))
    });
    let mut ids: Vec<u32> = std::iter::once(seed)
        .chain(order.into_iter().take(k))
        .map(|i| objects[i].id())
        .collect();
    ids.sort_unstable();
    ids
}

/// Dataset scene with the closest label histogram, skipping copies of
/// `scene` itself.
fn closest_by_histogram<'a>(scene: &Scene, dataset: &'a [Scene], num_labels: u16) -> Option<&'a Scene> {
    let h = scene.label_histogram(num_labels);
    dataset
        .iter()
        .filter(|d| *d != scene)
        .min_by_key(|d| {
            d.label_histogram(num_labels)
                .iter()
                .zip(&h)
                .map(|(a, b)| a.abs_diff(*b))
                .sum::<usize>()
        })
}

fn max_label(scenes: &[&Scene]) -> u16 {
    scenes
        .iter()
        .flat_map(|s| s.objects().iter().map(|o| o.label().id()))
        .max()
        .unwrap_or(1)
}

/// Places copies of `candidates` at random free floor positions.
fn add_objects(
    objects: &mut Vec<ObjectInstance>,
    corners: &[Vec3],
    candidates: &[&ObjectInstance],
    cfg: &PairConfig,
    rng: &mut impl Rng,
) -> Result<()> {
    let mut next_id = objects.iter().map(|o| o.id()).max().map_or(0, |m| m + 1);
    for cand in candidates {
        let mut placed = false;
        for cell in [cfg.cell_size, cfg.cell_size * 0.5] {
            let mut placer = Placer::new(corners, cell)?;
            placer.add_existing(objects);
            let (lo, hi) = placer.room_bounds();
            for _ in 0..cfg.placement_attempts {
                let target = Vec3::new(rng.gen_range(lo.x..hi.x), rng.gen_range(lo.y..hi.y), 0.0);
                let c = cand.centroid();
                let shift = Vec3::new(target.x - c.x, target.y - c.y, 0.0);
                let moved = cand.map_points(|p| p + shift).with_id(next_id);
                if placer.try_place(std::slice::from_ref(&moved)) {
                    objects.push(moved);
                    placed = true;
                    break;
                }
            }
            if placed {
                break;
            }
        }
        if placed {
            next_id += 1;
        }
    }
    Ok(())
}

/// Builds the reference scene from `scene` and pseudo ground truth for a
/// randomly chosen object group.
pub fn generate_eval_pair(scene: &Scene, dataset: &[Scene], cfg: &PairConfig, rng: &mut impl Rng) -> Result<EvalPair> {
    if dataset.is_empty() {
        return Err(Error::invalid("evaluation dataset is empty"));
    }
    if scene.objects().is_empty() {
        return Err(Error::invalid("scene has no objects"));
    }
    let seed = rng.gen_range(0..scene.objects().len());
    let k = rng.gen_range(cfg.neighbors.0..=cfg.neighbors.1);
    let group = object_group(scene, seed, k);
    generate_eval_pair_for_group(scene, dataset, &group, cfg, rng)
}

pub fn generate_eval_pair_for_group(
    scene: &Scene,
    dataset: &[Scene],
    group: &[u32],
    cfg: &PairConfig,
    rng: &mut impl Rng,
) -> Result<EvalPair> {
    let roi = sample_roi(scene, group, cfg.roi_points_per_object)?;
    let mut kept: Vec<ObjectInstance> = Vec::new();
    for o in scene.objects() {
        if group.contains(&o.id()) {
            kept.push(o.clone());
        } else if !rng.gen_bool(cfg.removal_prob.clamp(0.0, 1.0)) {
            let t = Vec3::new(
                uniform(rng, cfg.noise.translation),
                uniform(rng, cfg.noise.translation),
                0.0,
            );
            let theta = uniform(rng, cfg.noise.rotation_deg).to_radians();
            kept.push(perturb_object(o, t, theta));
        }
    }

    let labels = max_label(&dataset.iter().chain(std::iter::once(scene)).collect::<Vec<_>>());
    if cfg.replace {
        let pool = ObjectPool::from_scenes(dataset);
        kept = kept
            .into_iter()
            .map(|o| {
                let aspect = crate::training::aspect_signature(&o.extents());
                let cands: Vec<_> = pool
                    .nearest_by_aspect(o.label(), &aspect, cfg.top_k, None)
                    .into_iter()
                    .filter(|e| e.object.points() != o.points())
                    .collect();
                match cands.choose(rng) {
                    Some(e) => repose(&e.object, &o),
                    None => o,
                }
            })
            .collect();
    }

    let n_add = rng.gen_range(cfg.additions.0..=cfg.additions.1);
    if n_add > 0 {
        if let Some(donor) = closest_by_histogram(scene, dataset, labels) {
            let mut cands: Vec<&ObjectInstance> = donor.objects().iter().collect();
            cands.shuffle(rng);
            cands.truncate(n_add);
            add_objects(&mut kept, scene.corners(), &cands, cfg, rng)?;
        }
    }

    let mut reference = Scene::new(kept, scene.corners().to_vec())?;
    if let Some(shift) = cfg.global_shift {
        let (lo, hi) = crate::geometry::bounds(scene.corners()).expect("corners present");
        let center = Vec3::new((lo.x + hi.x) / 2.0, (lo.y + hi.y) / 2.0, 0.0);
        let r = rot_z(std::f64::consts::FRAC_PI_2 * rng.gen_range(0..4) as f64);
        let t = Vec3::new(uniform(rng, shift), uniform(rng, shift), 0.0);
        reference = reference.map_points(|p| r * (p - center) + center + t);
    }

    let gt = ground_truth(&roi, &reference, cfg.roi_points_per_object)?;
    EvalPair::new(scene.clone(), reference, roi, Some(gt))
}

fn uniform(rng: &mut impl Rng, h: f64) -> f64 {
    if h > 0.0 {
        rng.gen_range(-h..=h)
    } else {
        0.0
    }
}

/// Per-object minimum-cost matching of RoI points onto points sampled the
/// same way on the corresponding reference objects.
fn ground_truth(roi: &RegionOfInterest, reference: &Scene, per_object: usize) -> Result<Vec<Vec3>> {
    let mut gt = vec![Vec3::zeros(); roi.len()];
    for id in roi.object_ids() {
        let obj = reference.object(*id).ok_or(Error::UnknownObject(*id))?;
        let idx: Vec<usize> = (0..roi.len()).filter(|&i| roi.point_objects()[i] == *id).collect();
        let k = per_object.max(idx.len()).min(obj.points().len());
        let mut samples = farthest_point_sample(obj.points(), k, 0)?;
        while samples.len() < idx.len() {
            samples.push(samples[samples.len() % obj.points().len()]);
        }
        let cost: Vec<Vec<f64>> = idx
            .iter()
            .map(|&i| samples.iter().map(|q| (roi.points()[i] - q).norm()).collect())
            .collect();
        let assignment = hungarian(&cost)?;
        for (row, &i) in idx.iter().enumerate() {
            gt[i] = samples[assignment.cols[row]];
        }
    }
    Ok(gt)
}

/// A pair whose reference shares no label with the RoI: a dataset scene
/// with every RoI-labelled object dropped.
pub fn generate_unmatchable_pair(scene: &Scene, dataset: &[Scene], cfg: &PairConfig, rng: &mut impl Rng) -> Result<EvalPair> {
    if scene.objects().is_empty() {
        return Err(Error::invalid("scene has no objects"));
    }
    let seed = rng.gen_range(0..scene.objects().len());
    let k = rng.gen_range(cfg.neighbors.0..=cfg.neighbors.1);
    let group = object_group(scene, seed, k);
    let roi = sample_roi(scene, &group, cfg.roi_points_per_object)?;
    let labels: Vec<_> = group.iter().map(|id| scene.object(*id).expect("group member").label()).collect();
    let mut order: Vec<&Scene> = dataset.iter().filter(|d| *d != scene).collect();
    order.shuffle(rng);
    for d in order {
        let rest: Vec<ObjectInstance> = d.objects().iter().filter(|o| !labels.contains(&o.label())).cloned().collect();
        if !rest.is_empty() {
            let reference = Scene::new(rest, d.corners().to_vec())?;
            return EvalPair::new(scene.clone(), reference, roi, None);
        }
    }
    Err(Error::invalid("no dataset scene keeps objects outside the RoI labels"))
}

/// Fraction of points mapped within `alpha` of their ground truth.
pub fn pcp_points(mapped: &[Vec3], gt: &[Vec3], alpha: f64) -> Result<f64> {
    if mapped.len() != gt.len() || mapped.is_empty() {
        return Err(Error::invalid(format!("{} mapped points for {} ground-truth points", mapped.len(), gt.len())));
    }
    let hits = mapped.iter().zip(gt).filter(|(a, b)| (*a - *b).norm() <= alpha).count();
    Ok(hits as f64 / mapped.len() as f64)
}

pub fn pcp(map: &SceneMap, pair: &EvalPair, alpha: f64) -> Result<f64> {
    let gt = pair
        .gt_points
        .as_ref()
        .ok_or_else(|| Error::invalid("PCP of an unmatchable pair"))?;
    pcp_points(&map.apply_all(pair.roi.points()), gt, alpha)
}

/// PCP against the ground truth and its mirror images across the vertical
/// planes through its centroid; the extremes over the three.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LenientPcp {
    pub min: f64,
    pub max: f64,
}

pub fn lenient_pcp(map: &SceneMap, pair: &EvalPair, alpha: f64) -> Result<LenientPcp> {
    let gt = pair
        .gt_points
        .as_ref()
        .ok_or_else(|| Error::invalid("PCP of an unmatchable pair"))?;
    let c = crate::geometry::centroid(gt);
    let mapped = map.apply_all(pair.roi.points());
    let mut values = vec![pcp_points(&mapped, gt, alpha)?];
    for axis in 0..2 {
        let mirrored: Vec<Vec3> = gt
            .iter()
            .map(|p| {
                let mut q = *p;
                q[axis] = 2.0 * c[axis] - q[axis];
                q
            })
            .collect();
        values.push(pcp_points(&mapped, &mirrored, alpha)?);
    }
    Ok(LenientPcp {
        min: values.iter().copied().fold(f64::INFINITY, f64::min),
        max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    })
}

/// Fraction of points returned within `alpha` of themselves by the forward
/// map followed by the inverse; zero everywhere without an inverse.
pub fn bijectivity_pcp(forward: &SceneMap, inverse: Option<&SceneMap>, points: &[Vec3], alpha: f64) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::invalid("bijectivity PCP over no points"));
    }
    let Some(inverse) = inverse else {
        return Ok(0.0);
    };
    let hits = points
        .iter()
        .filter(|p| (inverse.apply(&forward.apply(p)) - *p).norm() <= alpha)
        .count();
    Ok(hits as f64 / points.len() as f64)
}

fn mean_nearest(from: &[Vec3], to: &[Vec3]) -> f64 {
    from.par_iter()
        .map(|x| to.iter().map(|y| (x - y).norm_squared()).fold(f64::INFINITY, f64::min).sqrt())
        .sum::<f64>()
        / from.len() as f64
}

/// Mean nearest-neighbor distance from `x` to `y` plus from `y` to `x`.
pub fn chamfer_distance(x: &[Vec3], y: &[Vec3]) -> Result<f64> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::invalid("Chamfer distance of an empty set"));
    }
    Ok(mean_nearest(x, y) + mean_nearest(y, x))
}

/// Mean per-object Chamfer distance between the warped RoI objects and the
/// reference objects nearest their warped centroids.
pub fn group_chamfer(map: &SceneMap, pair: &EvalPair) -> Result<f64> {
    let refs = pair.reference.objects();
    if refs.is_empty() {
        return Err(Error::invalid("reference scene has no objects"));
    }
    let mut total = 0.0;
    for id in pair.roi.object_ids() {
        let warped: Vec<Vec3> = pair
            .roi
            .points()
            .iter()
            .zip(pair.roi.point_objects())
            .filter(|(_, o)| *o == id)
            .map(|(p, _)| map.apply(p))
            .collect();
        let c = crate::geometry::centroid(&warped);
        let nearest = refs
            .iter()
            .min_by(|a, b| (a.centroid() - c).norm().total_cmp(&(b.centroid() - c).norm()))
            .expect("non-empty");
        total += chamfer_distance(&warped, nearest.points())?;
    }
    Ok(total / pair.roi.object_ids().len() as f64)
}

/// 1 when the result is right at threshold `alpha`: a close group-level fit
/// on matchable pairs, an Unmappable verdict otherwise.
pub fn chamfer_accuracy(result: &MapResult, pair: &EvalPair, alpha: f64) -> Result<f64> {
    Ok(match (pair.matchable(), result) {
        (false, MapResult::Unmappable(_)) => 1.0,
        (false, MapResult::Mapped(_)) | (true, MapResult::Unmappable(_)) => 0.0,
        (true, MapResult::Mapped(m)) => (group_chamfer(m, pair)? <= alpha) as u8 as f64,
    })
}

/// The thin-plate interpolant through the ground truth of a matchable pair.
pub fn gt_interpolant(pair: &EvalPair) -> Result<SceneMap> {
    let gt = pair
        .gt_points
        .as_ref()
        .ok_or_else(|| Error::invalid("unmatchable pair has no ground truth"))?;
    let deltas: Vec<Vec3> = pair.roi.points().iter().zip(gt).map(|(p, g)| g - p).collect();
    let displacement = fit_tps(pair.roi.points(), &deltas, 0.0)?;
    Ok(SceneMap {
        affine: AffineMap::identity(),
        displacement,
        cost: 0.0,
        inlier_object_ids: pair.roi.object_ids().to_vec(),
        stages: StageCosts {
            coarse: 0.0,
            affine: 0.0,
            displacement: 0.0,
        },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub pcp: Vec<f64>,
    pub chamfer: Vec<f64>,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            pcp: PCP_THRESHOLDS.to_vec(),
            chamfer: CHAMFER_THRESHOLDS.to_vec(),
        }
    }
}

/// Metrics of one pair. Point metrics are absent on unmatchable pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub matchable: bool,
    pub mapped: bool,
    pub cost: Option<f64>,
    pub pcp: Option<Vec<f64>>,
    pub lenient_pcp: Option<Vec<LenientPcp>>,
    pub bi_pcp: Option<Vec<f64>>,
    pub chamfer_acc: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub thresholds: Thresholds,
    /// Means over matchable pairs.
    pub pcp: Vec<f64>,
    pub bi_pcp: Vec<f64>,
    /// Means over all pairs.
    pub chamfer_acc: Vec<f64>,
    pub pairs: Vec<PairMetrics>,
}

/// Scores a forward result and optional inverse on one pair. An
/// Unmappable result on a matchable pair scores zero.
pub fn score_pair(
    pair: &EvalPair,
    forward: &MapResult,
    inverse: Option<&MapResult>,
    thresholds: &Thresholds,
) -> Result<PairMetrics> {
    let chamfer_acc = thresholds
        .chamfer
        .iter()
        .map(|&a| chamfer_accuracy(forward, pair, a))
        .collect::<Result<_>>()?;
    let (mut pcp_v, mut lenient, mut bi) = (None, None, None);
    if pair.matchable() {
        let n = thresholds.pcp.len();
        match forward.map() {
            None => {
                pcp_v = Some(vec![0.0; n]);
                lenient = Some(vec![LenientPcp { min: 0.0, max: 0.0 }; n]);
                bi = Some(vec![0.0; n]);
            }
            Some(m) => {
                pcp_v = Some(thresholds.pcp.iter().map(|&a| pcp(m, pair, a)).collect::<Result<_>>()?);
                lenient = Some(thresholds.pcp.iter().map(|&a| lenient_pcp(m, pair, a)).collect::<Result<_>>()?);
                let inv = inverse.and_then(MapResult::map);
                bi = Some(
                    thresholds
                        .pcp
                        .iter()
                        .map(|&a| bijectivity_pcp(m, inv, pair.roi.points(), a))
                        .collect::<Result<_>>()?,
                );
            }
        }
    }
    Ok(PairMetrics {
        matchable: pair.matchable(),
        mapped: forward.map().is_some(),
        cost: forward.map().map(|m| m.cost),
        pcp: pcp_v,
        lenient_pcp: lenient,
        bi_pcp: bi,
        chamfer_acc,
    })
}

fn column_means(rows: &[&Vec<f64>], width: usize) -> Vec<f64> {
    if rows.is_empty() {
        return vec![0.0; width];
    }
    (0..width)
        .map(|k| rows.iter().map(|r| r[k]).sum::<f64>() / rows.len() as f64)
        .collect()
}

impl MetricReport {
    /// Aggregates are plain means of the per-pair rows.
    pub fn from_rows(thresholds: Thresholds, pairs: Vec<PairMetrics>) -> Self {
        let np = thresholds.pcp.len();
        let pcp_rows: Vec<&Vec<f64>> = pairs.iter().filter_map(|p| p.pcp.as_ref()).collect();
        let bi_rows: Vec<&Vec<f64>> = pairs.iter().filter_map(|p| p.bi_pcp.as_ref()).collect();
        let ca_rows: Vec<&Vec<f64>> = pairs.iter().map(|p| &p.chamfer_acc).collect();
        MetricReport {
            pcp: column_means(&pcp_rows, np),
            bi_pcp: column_means(&bi_rows, np),
            chamfer_acc: column_means(&ca_rows, thresholds.chamfer.len()),
            thresholds,
            pairs,
        }
    }
}

/// Runs the forward map and, when it succeeds, the inverse from the warped
/// RoI points.
pub fn run_pair(pair: &EvalPair, field: &DescriptorField, cfg: &MapConfig) -> Result<(MapResult, Option<MapResult>)> {
    let forward = estimate_map(&pair.target, &pair.reference, &pair.roi, field, cfg)?;
    let inverse = match forward.map() {
        Some(m) => Some(estimate_inverse(
            &pair.reference,
            &pair.target,
            &m.apply_all(pair.roi.points()),
            field,
            cfg,
        )?),
        None => None,
    };
    Ok((forward, inverse))
}

pub fn evaluate_pairs(
    pairs: &[EvalPair],
    field: &DescriptorField,
    cfg: &MapConfig,
    thresholds: &Thresholds,
) -> Result<MetricReport> {
    let rows = pairs
        .iter()
        .map(|p| {
            let (f, i) = run_pair(p, field, cfg)?;
            score_pair(p, &f, i.as_ref(), thresholds)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport::from_rows(thresholds.clone(), rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::procedural::{generate_scenes, GeneratorConfig};
    use crate::map_estimation::DisplacementMap;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dataset(n: usize, seed: u64) -> Vec<Scene> {
        let gen = GeneratorConfig {
            min_objects: 5,
            points_per_object: 120,
            ..GeneratorConfig::default()
        };
        generate_scenes(&gen, n, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn small_pairs() -> PairConfig {
        PairConfig {
            roi_points_per_object: 40,
            ..PairConfig::default()
        }
    }

    #[test]
    fn unperturbed_pair_has_identity_ground_truth() {
        let d = dataset(4, 1);
        let cfg = PairConfig {
            roi_points_per_object: 40,
            ..PairConfig::unperturbed()
        };
        let pair = generate_eval_pair(&d[0], &d, &cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(pair.reference, pair.target);
        let gt = pair.gt_points.as_ref().unwrap();
        for (p, g) in pair.roi.points().iter().zip(gt) {
            assert_eq!(p, g);
        }
        let id = SceneMap::identity(vec![]);
        assert_eq!(pcp(&id, &pair, 1e-9).unwrap(), 1.0);
    }

    #[test]
    fn roi_group_sizes_follow_neighbor_range() {
        let d = dataset(6, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for s in &d {
            for _ in 0..3 {
                let pair = generate_eval_pair(s, &d, &small_pairs(), &mut rng).unwrap();
                let n = pair.roi.object_ids().len();
                assert!((3..=5).contains(&n), "{n}");
                assert_eq!(pair.gt_points.as_ref().unwrap().len(), pair.roi.len());
                for id in pair.roi.object_ids() {
                    assert_eq!(
                        pair.reference.object(*id).unwrap().label(),
                        pair.target.object(*id).unwrap().label()
                    );
                }
            }
        }
    }

    #[test]
    fn ground_truth_is_optimal_on_small_instance() {
        let d = dataset(3, 5);
        let cfg = PairConfig {
            roi_points_per_object: 5,
            ..PairConfig::default()
        };
        let pair = generate_eval_pair_for_group(&d[0], &d, &[d[0].objects()[0].id()], &cfg, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        let id = pair.roi.object_ids()[0];
        let samples = farthest_point_sample(pair.reference.object(id).unwrap().points(), 5, 0).unwrap();
        let gt = pair.gt_points.as_ref().unwrap();
        let got: f64 = pair.roi.points().iter().zip(gt).map(|(p, g)| (p - g).norm()).sum();
        let mut best = f64::INFINITY;
        let mut perm: Vec<usize> = (0..5).collect();
        heap_permutations(&mut perm, 5, &mut |p| {
            let c: f64 = (0..5).map(|i| (pair.roi.points()[i] - samples[p[i]]).norm()).sum();
            best = best.min(c);
        });
        assert!((got - best).abs() < 1e-12);
    }

    fn heap_permutations(p: &mut Vec<usize>, k: usize, f: &mut impl FnMut(&[usize])) {
        if k == 1 {
            f(p);
            return;
        }
        for i in 0..k {
            heap_permutations(p, k - 1, f);
            if k % 2 == 0 {
                p.swap(i, k - 1);
            } else {
                p.swap(0, k - 1);
            }
        }
    }

    #[test]
    fn unmatchable_pairs_share_no_roi_label() {
        let d = dataset(6, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pair = generate_unmatchable_pair(&d[0], &d, &small_pairs(), &mut rng).unwrap();
        assert!(!pair.matchable());
        for id in pair.roi.object_ids() {
            let l = pair.target.object(*id).unwrap().label();
            assert!(pair.reference.objects().iter().all(|o| o.label() != l));
        }
        let verdict = MapResult::Unmappable(crate::map_estimation::Unmappable {
            reason: crate::map_estimation::UnmappableReason::NoInliers,
            best_cost: None,
        });
        assert_eq!(chamfer_accuracy(&verdict, &pair, 0.15).unwrap(), 1.0);
        assert_eq!(chamfer_accuracy(&MapResult::Mapped(SceneMap::identity(vec![])), &pair, 0.15).unwrap(), 0.0);
    }

    fn translation(t: Vec3) -> SceneMap {
        let mut m = SceneMap::identity(vec![]);
        m.affine.b = t;
        m
    }

    #[test]
    fn pcp_of_offsets_and_interpolant() {
        let d = dataset(4, 9);
        let pair = generate_eval_pair(&d[1], &d, &small_pairs(), &mut ChaCha8Rng::seed_from_u64(10)).unwrap();
        let gt_map = gt_interpolant(&pair).unwrap();
        assert_eq!(pcp(&gt_map, &pair, 1e-6).unwrap(), 1.0);
        let gt = pair.gt_points.clone().unwrap();
        let shifted: Vec<Vec3> = gt.iter().map(|g| g - Vec3::new(0.3, 0.0, 0.0)).collect();
        assert_eq!(pcp_points(&shifted, &gt, 0.25).unwrap(), 0.0);
        assert_eq!(pcp_points(&shifted, &gt, 0.5).unwrap(), 1.0);
        let a = pcp(&translation(Vec3::new(0.1, 0.2, 0.0)), &pair, 0.25).unwrap();
        let b = pcp(&translation(Vec3::new(0.1, 0.2, 0.0)), &pair, 0.5).unwrap();
        assert!(a <= b);
        let l = lenient_pcp(&gt_map, &pair, 1e-6).unwrap();
        assert_eq!(l.max, 1.0);
        assert!(l.min <= l.max);
        assert!(pcp(&gt_map, &EvalPair { gt_points: None, ..pair }, 0.25).is_err());
    }

    #[test]
    fn bijectivity_of_translations() {
        let pts: Vec<Vec3> = (0..10).map(|i| Vec3::new(i as f64, 0.5, 0.0)).collect();
        let t = Vec3::new(1.0, -2.0, 0.3);
        let id = SceneMap::identity(vec![]);
        assert_eq!(bijectivity_pcp(&id, Some(&id), &pts, 0.01).unwrap(), 1.0);
        assert_eq!(bijectivity_pcp(&translation(t), Some(&translation(-t)), &pts, 1e-9).unwrap(), 1.0);
        assert_eq!(bijectivity_pcp(&translation(t), None, &pts, 10.0).unwrap(), 0.0);
        // A smooth warp against a first-order inverse, recomputed point by
        // point.
        let cps: Vec<Vec3> = pts.iter().step_by(3).copied().collect();
        let w = vec![Vec3::new(0.01, 0.0, 0.0); cps.len()];
        let mut f = SceneMap::identity(vec![]);
        f.displacement = DisplacementMap::new(cps.clone(), w.clone()).unwrap();
        let mut g = SceneMap::identity(vec![]);
        g.displacement = DisplacementMap::new(cps, w.iter().map(|v| -v).collect()).unwrap();
        for alpha in [0.01, 0.05, 0.2] {
            let expect = pts.iter().filter(|p| (g.apply(&f.apply(p)) - *p).norm() <= alpha).count() as f64 / 10.0;
            assert_eq!(bijectivity_pcp(&f, Some(&g), &pts, alpha).unwrap(), expect);
        }
    }

    #[test]
    fn chamfer_conventions() {
        let x = [Vec3::zeros()];
        let y = [Vec3::new(1.0, 0.0, 0.0)];
        assert_eq!(chamfer_distance(&x, &y).unwrap(), 2.0);
        let a: Vec<Vec3> = (0..7).map(|i| Vec3::new(i as f64 * 0.3, 1.0, 0.0)).collect();
        let b: Vec<Vec3> = (0..4).map(|i| Vec3::new(0.1, i as f64, 0.5)).collect();
        assert_eq!(chamfer_distance(&a, &a).unwrap(), 0.0);
        assert!((chamfer_distance(&a, &b).unwrap() - chamfer_distance(&b, &a).unwrap()).abs() < 1e-12);
        assert!(chamfer_distance(&a, &[]).is_err());
    }

    #[test]
    fn identity_on_identical_scenes_scores_full_chamfer_accuracy() {
        let d = dataset(3, 11);
        let cfg = PairConfig {
            roi_points_per_object: 40,
            ..PairConfig::unperturbed()
        };
        let pair = generate_eval_pair(&d[2], &d, &cfg, &mut ChaCha8Rng::seed_from_u64(12)).unwrap();
        let r = MapResult::Mapped(SceneMap::identity(vec![]));
        assert_eq!(chamfer_accuracy(&r, &pair, 0.15).unwrap(), 1.0);
    }

    #[test]
    fn report_aggregates_are_row_means() {
        let d = dataset(4, 13);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let th = Thresholds::default();
        let mut rows = Vec::new();
        for s in &d[..3] {
            let pair = generate_eval_pair(s, &d, &small_pairs(), &mut rng).unwrap();
            let m = MapResult::Mapped(gt_interpolant(&pair).unwrap());
            rows.push(score_pair(&pair, &m, Some(&MapResult::Mapped(SceneMap::identity(vec![]))), &th).unwrap());
        }
        let u = generate_unmatchable_pair(&d[3], &d, &small_pairs(), &mut rng).unwrap();
        rows.push(score_pair(&u, &MapResult::Mapped(SceneMap::identity(vec![])), None, &th).unwrap());
        let report = MetricReport::from_rows(th, rows.clone());
        assert_eq!(report.pcp, vec![1.0, 1.0]);
        let mean_ca: f64 = rows.iter().map(|r| r.chamfer_acc[0]).sum::<f64>() / 4.0;
        assert!((report.chamfer_acc[0] - mean_ca).abs() < 1e-12);
        assert!(report.pcp.iter().chain(&report.bi_pcp).chain(&report.chamfer_acc).all(|v| (0.0..=1.0).contains(v)));
    }
}
