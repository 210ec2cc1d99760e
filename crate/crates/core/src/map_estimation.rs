//! Coarse-to-fine scene maps: a pool of planar affine candidates ranked by
//! descriptor agreement, outlier rejection on object centroids, gradient
//! refinement of the affine part, then thin-plate-spline displacements.

use nalgebra::{DMatrix, Matrix3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assignment::hungarian;
use crate::error::{Error, Result};
use crate::field::{Descriptor, DescriptorField, SceneContext};
use crate::geometry::Vec3;
use crate::numeric::{AdamState, Tensor};
use crate::scene::{farthest_point_sample, ObjectInstance, RegionOfInterest, Scene};

pub const N_ORTHO: usize = 16;
pub const K_COARSE: usize = 5;
pub const RHO_VALID: f64 = 1.5;
pub const OUTLIER_THRESHOLD: f64 = 2.0;
pub const TPS_LAMBDA: f64 = 0.5;
pub const MAP_LR: f64 = 1e-3;
pub const AFFINE_STEPS: usize = 200;
pub const DISPLACEMENT_STEPS: usize = 300;
/// Control points closer than this are merged before the spline fit.
pub const DUPLICATE_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineMap {
    pub a: Matrix3<f64>,
    pub b: Vec3,
}

impl AffineMap {
    pub fn identity() -> Self {
        AffineMap {
            a: Matrix3::identity(),
            b: Vec3::zeros(),
        }
    }

    pub fn apply(&self, x: &Vec3) -> Vec3 {
        self.a * x + self.b
    }

    pub fn is_finite(&self) -> bool {
        self.a.iter().chain(self.b.iter()).all(|v| v.is_finite())
    }
}

/// `r^2 ln r` with the removable singularity at zero filled in.
pub fn tps_kernel(r: f64) -> f64 {
    if r <= 0.0 {
        0.0
    } else {
        r * r * r.ln()
    }
}

/// Radial-basis displacement field `sum_k w_k phi(|x - p_k|)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisplacementMap {
    control_points: Vec<Vec3>,
    weights: Vec<Vec3>,
}

impl DisplacementMap {
    pub fn new(control_points: Vec<Vec3>, weights: Vec<Vec3>) -> Result<Self> {
        if control_points.len() != weights.len() {
            return Err(Error::invalid(format!(
                "{} control points with {} weights",
                control_points.len(),
                weights.len()
            )));
        }
        Ok(DisplacementMap {
            control_points,
            weights,
        })
    }

    pub fn zero(control_points: Vec<Vec3>) -> Self {
        let weights = vec![Vec3::zeros(); control_points.len()];
        DisplacementMap {
            control_points,
            weights,
        }
    }

    pub fn control_points(&self) -> &[Vec3] {
        &self.control_points
    }

    pub fn weights(&self) -> &[Vec3] {
        &self.weights
    }

    pub fn eval(&self, x: &Vec3) -> Vec3 {
        self.control_points
            .iter()
            .zip(&self.weights)
            .fold(Vec3::zeros(), |acc, (p, w)| acc + w * tps_kernel((x - p).norm()))
    }
}

/// Costs of the chosen candidate at each stage, all measured on the map's
/// control points.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageCosts {
    pub coarse: f64,
    pub affine: f64,
    pub displacement: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneMap {
    pub affine: AffineMap,
    pub displacement: DisplacementMap,
    /// Mean descriptor distance over the control points.
    pub cost: f64,
    pub inlier_object_ids: Vec<u32>,
    pub stages: StageCosts,
}

impl SceneMap {
    pub fn identity(control_points: Vec<Vec3>) -> Self {
        SceneMap {
            affine: AffineMap::identity(),
            displacement: DisplacementMap::zero(control_points),
            cost: 0.0,
            inlier_object_ids: Vec::new(),
            stages: StageCosts {
                coarse: 0.0,
                affine: 0.0,
                displacement: 0.0,
            },
        }
    }

    pub fn apply(&self, x: &Vec3) -> Vec3 {
        apply_map(self, x)
    }

    pub fn apply_all(&self, xs: &[Vec3]) -> Vec<Vec3> {
        xs.iter().map(|x| apply_map(self, x)).collect()
    }
}

/// `A x + b + sum_k w_k phi(|x - p_k|)`.
pub fn apply_map(map: &SceneMap, x: &Vec3) -> Vec3 {
    map.affine.apply(x) + map.displacement.eval(x)
}

/// The planar orthogonal transforms: four quarter turns about z, each
/// composed with no flip, an x flip, a y flip, and both. A half turn equals
/// the double flip, so the sixteen entries hold each of the eight distinct
/// transforms twice.
pub fn planar_orthogonal_transforms() -> Vec<Matrix3<f64>> {
    let flips = [(1.0, 1.0), (-1.0, 1.0), (1.0, -1.0), (-1.0, -1.0)];
    let mut out = Vec::with_capacity(N_ORTHO);
    for k in 0..4 {
        let (c, s) = match k {
            0 => (1.0, 0.0),
            1 => (0.0, 1.0),
            2 => (-1.0, 0.0),
            _ => (0.0, -1.0),
        };
        let rot = Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0);
        for (fx, fy) in flips {
            out.push(rot * Matrix3::from_diagonal(&Vec3::new(fx, fy, 1.0)));
        }
    }
    out
}

/// Every transform paired with every centroid correspondence, sending the
/// target centroid onto the reference centroid. Ordered by target, then
/// reference, then transform.
pub fn affine_pool_from_centroids(target: &[Vec3], reference: &[Vec3]) -> Result<Vec<AffineMap>> {
    if target.is_empty() || reference.is_empty() {
        return Err(Error::invalid("affine pool needs objects on both sides"));
    }
    let ts = planar_orthogonal_transforms();
    let mut pool = Vec::with_capacity(target.len() * reference.len() * ts.len());
    for ct in target {
        for cr in reference {
            for t in &ts {
                pool.push(AffineMap { a: *t, b: cr - t * ct });
            }
        }
    }
    Ok(pool)
}

pub fn affine_pool(target: &Scene, reference: &Scene) -> Result<Vec<AffineMap>> {
    let ct: Vec<Vec3> = target.objects().iter().map(ObjectInstance::centroid).collect();
    let cr: Vec<Vec3> = reference.objects().iter().map(ObjectInstance::centroid).collect();
    affine_pool_from_centroids(&ct, &cr)
}

/// One field read in the contexts of both scenes.
pub struct MapFields<'a> {
    pub field: &'a DescriptorField,
    pub target: SceneContext,
    pub reference: SceneContext,
}

impl<'a> MapFields<'a> {
    pub fn new(field: &'a DescriptorField, target: &Scene, reference: &Scene) -> Self {
        MapFields {
            field,
            target: field.context(target),
            reference: field.context(reference),
        }
    }

    pub fn target_descriptors(&self, points: &[Vec3]) -> Result<Vec<Descriptor>> {
        self.field.eval_many(points, &self.target)
    }

    /// Mean of `|D_tgt(p_i) - D_ref(y_i)|`.
    pub fn cost(&self, targets: &[Descriptor], mapped: &[Vec3]) -> Result<f64> {
        check_lengths(targets.len(), mapped.len())?;
        let d = self.field.eval_many(mapped, &self.reference)?;
        let total: f64 = targets.iter().zip(&d).map(|(t, r)| t.distance(r)).sum();
        finite_cost(total / targets.len() as f64)
    }

    /// The cost and its gradient with respect to each mapped point.
    pub fn cost_and_grad(&self, targets: &[Descriptor], mapped: &[Vec3]) -> Result<(f64, Vec<Vec3>)> {
        check_lengths(targets.len(), mapped.len())?;
        let n = targets.len() as f64;
        let pulled = self.field.eval_with_query_vjp(mapped, &self.reference, |i, d| {
            let diff: Vec<f64> = targets[i].values().iter().zip(d.values()).map(|(a, b)| a - b).collect();
            let dist = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
            if dist == 0.0 {
                return vec![0.0; diff.len()];
            }
            diff.iter().map(|v| -v / (dist * n)).collect()
        })?;
        let rows: Vec<(f64, Vec3)> = pulled
            .into_iter()
            .zip(targets)
            .map(|((d, g), t)| (t.distance(&d), g))
            .collect();
        let cost = finite_cost(rows.iter().map(|r| r.0).sum::<f64>() / n)?;
        Ok((cost, rows.into_iter().map(|r| r.1).collect()))
    }
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::invalid(format!("{a} target descriptors for {b} mapped points")));
    }
    if a == 0 {
        return Err(Error::invalid("map cost over no points"));
    }
    Ok(())
}

fn finite_cost(c: f64) -> Result<f64> {
    if c.is_finite() {
        Ok(c)
    } else {
        Err(Error::NonFinite("map cost".into()))
    }
}

/// Mean descriptor distance between `p` in the target and `A p + b` in the
/// reference.
pub fn coarse_cost(map: &AffineMap, points: &[Vec3], fields: &MapFields) -> Result<f64> {
    let targets = fields.target_descriptors(points)?;
    let mapped: Vec<Vec3> = points.iter().map(|p| map.apply(p)).collect();
    fields.cost(&targets, &mapped)
}

/// Coarse cost and its gradient in `A` and `b`.
pub fn affine_cost_and_grad(
    map: &AffineMap,
    points: &[Vec3],
    targets: &[Descriptor],
    fields: &MapFields,
) -> Result<(f64, Matrix3<f64>, Vec3)> {
    let mapped: Vec<Vec3> = points.iter().map(|p| map.apply(p)).collect();
    let (cost, g) = fields.cost_and_grad(targets, &mapped)?;
    let mut ga = Matrix3::zeros();
    let mut gb = Vec3::zeros();
    for (gi, p) in g.iter().zip(points) {
        ga += gi * p.transpose();
        gb += gi;
    }
    Ok((cost, ga, gb))
}

/// Displacement cost `mean |D_tgt(p) - D_ref(A p + b + delta_p)|` and its
/// gradient in each `delta_p`.
pub fn displacement_cost_and_grad(
    affine: &AffineMap,
    points: &[Vec3],
    targets: &[Descriptor],
    deltas: &[Vec3],
    fields: &MapFields,
) -> Result<(f64, Vec<Vec3>)> {
    check_lengths(points.len(), deltas.len())?;
    let mapped: Vec<Vec3> = points.iter().zip(deltas).map(|(p, d)| affine.apply(p) + d).collect();
    fields.cost_and_grad(targets, &mapped)
}

/// Ids of RoI objects that have a same-label reference partner within
/// `threshold` of their mapped centroid under a minimum-cost one-to-one
/// matching. Sorted ascending.
pub fn reject_outliers(
    map: &AffineMap,
    roi_objects: &[&ObjectInstance],
    reference: &Scene,
    threshold: f64,
) -> Result<Vec<u32>> {
    if roi_objects.is_empty() {
        return Ok(Vec::new());
    }
    // Forbidden pairs get a finite penalty so every row stays assignable;
    // a penalty match counts as unmatched.
    let refs = reference.objects();
    let forbidden = 1e9;
    let n = roi_objects.len();
    let width = refs.len().max(n);
    let cost: Vec<Vec<f64>> = roi_objects
        .iter()
        .map(|o| {
            let c = map.apply(&o.centroid());
            (0..width)
                .map(|j| match refs.get(j) {
                    Some(r) if r.label() == o.label() => (c - r.centroid()).norm(),
                    _ => forbidden,
                })
                .collect()
        })
        .collect();
    let assignment = hungarian(&cost)?;
    let mut inliers: Vec<u32> = roi_objects
        .iter()
        .zip(&assignment.cols)
        .enumerate()
        .filter(|(i, (_, &j))| cost[*i][j] <= threshold)
        .map(|(_, (o, _))| o.id())
        .collect();
    inliers.sort_unstable();
    Ok(inliers)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizeConfig {
    pub steps: usize,
    pub lr: f64,
    /// Stop once this many steps pass without improving the best cost by
    /// more than `tol`.
    pub patience: Option<usize>,
    pub tol: f64,
}

impl OptimizeConfig {
    pub fn new(steps: usize) -> Self {
        OptimizeConfig {
            steps,
            lr: MAP_LR,
            patience: None,
            tol: 0.0,
        }
    }
}

struct Best<T> {
    value: T,
    cost: f64,
    since: usize,
}

impl<T: Clone> Best<T> {
    fn offer(&mut self, value: &T, cost: f64, tol: f64) {
        if cost < self.cost {
            if cost < self.cost - tol {
                self.since = 0;
            } else {
                self.since += 1;
            }
            self.value = value.clone();
            self.cost = cost;
        } else {
            self.since += 1;
        }
    }

    fn stalled(&self, cfg: &OptimizeConfig) -> bool {
        self.cost == 0.0 || cfg.patience.is_some_and(|p| self.since >= p)
    }
}

/// Adam on the twelve entries of `(A, b)`; returns the lowest-cost iterate
/// and its cost.
pub fn optimize_affine(
    map: &AffineMap,
    points: &[Vec3],
    targets: &[Descriptor],
    fields: &MapFields,
    cfg: &OptimizeConfig,
) -> Result<(AffineMap, f64)> {
    let mut current = *map;
    let mut best: Option<Best<AffineMap>> = None;
    let mut params = [
        Tensor::matrix(3, 3, current.a.transpose().as_slice().to_vec())?,
        Tensor::row(current.b.as_slice()),
    ];
    let mut adam = AdamState::new(&params, cfg.lr);
    for step in 0..=cfg.steps {
        let (cost, ga, gb) = affine_cost_and_grad(&current, points, targets, fields)?;
        match &mut best {
            None => {
                best = Some(Best {
                    value: current,
                    cost,
                    since: 0,
                })
            }
            Some(b) => b.offer(&current, cost, cfg.tol),
        }
        let b = best.as_ref().expect("set above");
        if step == cfg.steps || b.stalled(cfg) {
            break;
        }
        let grads = [
            Tensor::matrix(3, 3, ga.transpose().as_slice().to_vec())?,
            Tensor::row(gb.as_slice()),
        ];
        adam.step(&mut params, &grads)?;
        current = AffineMap {
            a: Matrix3::from_row_slice(params[0].data()),
            b: Vec3::from_row_slice(params[1].data()),
        };
        if !current.is_finite() {
            return Err(Error::NonFinite("affine parameters".into()));
        }
    }
    let b = best.expect("at least one evaluation");
    Ok((b.value, b.cost))
}

/// Adam on independent per-point displacements starting from zero; returns
/// the lowest-cost iterate and its cost.
pub fn optimize_displacements(
    affine: &AffineMap,
    points: &[Vec3],
    targets: &[Descriptor],
    fields: &MapFields,
    cfg: &OptimizeConfig,
) -> Result<(Vec<Vec3>, f64)> {
    let n = points.len();
    let mut deltas = vec![Vec3::zeros(); n];
    let mut params = [Tensor::zeros(&[n, 3])];
    let mut adam = AdamState::new(&params, cfg.lr);
    let mut best: Option<Best<Vec<Vec3>>> = None;
    for step in 0..=cfg.steps {
        let (cost, g) = displacement_cost_and_grad(affine, points, targets, &deltas, fields)?;
        match &mut best {
            None => {
                best = Some(Best {
                    value: deltas.clone(),
                    cost,
                    since: 0,
                })
            }
            Some(b) => b.offer(&deltas, cost, cfg.tol),
        }
        let b = best.as_ref().expect("set above");
        if step == cfg.steps || b.stalled(cfg) {
            break;
        }
        let flat: Vec<f64> = g.iter().flat_map(|v| [v.x, v.y, v.z]).collect();
        adam.step(&mut params, &[Tensor::matrix(n, 3, flat)?])?;
        let d = params[0].data();
        if d.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("displacements".into()));
        }
        deltas = (0..n).map(|i| Vec3::new(d[3 * i], d[3 * i + 1], d[3 * i + 2])).collect();
    }
    let b = best.expect("at least one evaluation");
    Ok((b.value, b.cost))
}

/// Merges points within [`DUPLICATE_TOLERANCE`] of an earlier kept point,
/// averaging their values.
fn dedupe(points: &[Vec3], values: &[Vec3]) -> (Vec<Vec3>, Vec<Vec3>) {
    let mut kept: Vec<Vec3> = Vec::new();
    let mut sums: Vec<(Vec3, usize)> = Vec::new();
    for (p, v) in points.iter().zip(values) {
        match kept.iter().position(|k| (k - p).norm() <= DUPLICATE_TOLERANCE) {
            Some(i) => {
                sums[i].0 += v;
                sums[i].1 += 1;
            }
            None => {
                kept.push(*p);
                sums.push((*v, 1));
            }
        }
    }
    let avg = sums.into_iter().map(|(s, c)| s / c as f64).collect();
    (kept, avg)
}

/// Thin-plate weights solving `(K + lambda I) W = Delta` with
/// `K_ij = phi(|p_i - p_j|)`.
pub fn fit_tps(control_points: &[Vec3], deltas: &[Vec3], lambda: f64) -> Result<DisplacementMap> {
    if control_points.len() != deltas.len() {
        return Err(Error::invalid(format!(
            "{} control points with {} displacements",
            control_points.len(),
            deltas.len()
        )));
    }
    if !(lambda >= 0.0) {
        return Err(Error::invalid("spline regularization must be non-negative"));
    }
    let (points, values) = dedupe(control_points, deltas);
    let n = points.len();
    if n == 0 {
        return Ok(DisplacementMap::zero(points));
    }
    if values.iter().all(|v| *v == Vec3::zeros()) {
        return Ok(DisplacementMap::zero(points));
    }
    let k = DMatrix::from_fn(n, n, |i, j| {
        tps_kernel((points[i] - points[j]).norm()) + if i == j { lambda } else { 0.0 }
    });
    let rhs = DMatrix::from_fn(n, 3, |i, c| values[i][c]);
    let w = k
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Singular("thin-plate system".into()))?;
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular("thin-plate system".into()));
    }
    let weights = (0..n).map(|i| Vec3::new(w[(i, 0)], w[(i, 1)], w[(i, 2)])).collect();
    DisplacementMap::new(points, weights)
}

/// Mean descriptor distance of `map` over its own control points.
pub fn map_cost(map: &SceneMap, fields: &MapFields) -> Result<f64> {
    let points = map.displacement.control_points();
    let targets = fields.target_descriptors(points)?;
    fields.cost(&targets, &map.apply_all(points))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapConfig {
    pub k_coarse: usize,
    pub rho_valid: f64,
    pub outlier_threshold: f64,
    pub lambda: f64,
    pub affine: OptimizeConfig,
    pub displacement: OptimizeConfig,
    /// Run the displacement stage; without it maps are affine only.
    pub use_displacement: bool,
    /// Farthest-point subset of the RoI used to rank candidates; all points
    /// when unset.
    pub coarse_points: Option<usize>,
    /// Farthest-point subset of the inlier RoI used for refinement and as
    /// spline control points; all points when unset.
    pub refine_points: Option<usize>,
}

impl Default for MapConfig {
    fn default() -> Self {
        MapConfig {
            k_coarse: K_COARSE,
            rho_valid: RHO_VALID,
            outlier_threshold: OUTLIER_THRESHOLD,
            lambda: TPS_LAMBDA,
            affine: OptimizeConfig::new(AFFINE_STEPS),
            displacement: OptimizeConfig::new(DISPLACEMENT_STEPS),
            use_displacement: true,
            coarse_points: None,
            refine_points: None,
        }
    }
}

impl MapConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.rho_valid, self.outlier_threshold, self.affine.lr, self.displacement.lr];
        if self.k_coarse == 0 || positive.iter().any(|v| !(*v > 0.0)) || !(self.lambda >= 0.0) {
            return Err(Error::invalid("map config constants must be positive"));
        }
        if self.coarse_points == Some(0) || self.refine_points == Some(0) {
            return Err(Error::invalid("working-set sizes must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum UnmappableReason {
    /// No candidate left any RoI object with a reference partner.
    NoInliers,
    /// The best refined cost reached the validity threshold.
    CostAboveThreshold,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Unmappable {
    pub reason: UnmappableReason,
    pub best_cost: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum MapResult {
    Mapped(SceneMap),
    Unmappable(Unmappable),
}

impl MapResult {
    pub fn map(&self) -> Option<&SceneMap> {
        match self {
            MapResult::Mapped(m) => Some(m),
            MapResult::Unmappable(_) => None,
        }
    }

    pub fn is_unmappable(&self) -> bool {
        matches!(self, MapResult::Unmappable(_))
    }
}

fn working_set(points: &[Vec3], cap: Option<usize>) -> Result<Vec<Vec3>> {
    match cap {
        Some(k) if k < points.len() => farthest_point_sample(points, k, 0),
        _ => Ok(points.to_vec()),
    }
}

fn refine_candidate(
    candidate: &AffineMap,
    inliers: Vec<u32>,
    roi: &RegionOfInterest,
    fields: &MapFields,
    cfg: &MapConfig,
) -> Result<SceneMap> {
    let sub = roi
        .restrict(&inliers)
        .ok_or_else(|| Error::Degenerate("inlier RoI has no points".into()))?;
    let points = working_set(sub.points(), cfg.refine_points)?;
    let targets = fields.target_descriptors(&points)?;
    let (affine, affine_cost) = optimize_affine(candidate, &points, &targets, fields, &cfg.affine)?;
    let coarse = if cfg.affine.steps == 0 {
        affine_cost
    } else {
        let mapped: Vec<Vec3> = points.iter().map(|p| candidate.apply(p)).collect();
        fields.cost(&targets, &mapped)?
    };
    let mut map = SceneMap {
        affine,
        displacement: DisplacementMap::zero(points.clone()),
        cost: affine_cost,
        inlier_object_ids: inliers,
        stages: StageCosts {
            coarse,
            affine: affine_cost,
            displacement: affine_cost,
        },
    };
    if cfg.use_displacement && cfg.displacement.steps > 0 {
        let (deltas, _) = optimize_displacements(&affine, &points, &targets, fields, &cfg.displacement)?;
        let spline = fit_tps(&points, &deltas, cfg.lambda)?;
        let candidate_map = SceneMap {
            displacement: spline,
            ..map.clone()
        };
        let mapped = candidate_map.apply_all(candidate_map.displacement.control_points());
        let tps_targets = if candidate_map.displacement.control_points().len() == points.len() {
            targets
        } else {
            fields.target_descriptors(candidate_map.displacement.control_points())?
        };
        let cost = fields.cost(&tps_targets, &mapped)?;
        // The smoothed spline can undo part of the optimized displacement;
        // keep the affine map then so stage costs never increase.
        if cost <= affine_cost {
            map = SceneMap {
                cost,
                stages: StageCosts {
                    displacement: cost,
                    ..map.stages
                },
                ..candidate_map
            };
        }
    }
    Ok(map)
}

/// Refined maps of the surviving coarse candidates sorted by cost, or why
/// none survived outlier rejection.
fn refined_maps(
    target: &Scene,
    reference: &Scene,
    roi: &RegionOfInterest,
    fields: &MapFields,
    cfg: &MapConfig,
) -> Result<std::result::Result<Vec<SceneMap>, Unmappable>> {
    cfg.validate()?;
    let roi_objects: Vec<&ObjectInstance> = roi
        .object_ids()
        .iter()
        .map(|&id| target.object(id).ok_or(Error::UnknownObject(id)))
        .collect::<Result<_>>()?;
    if reference.objects().is_empty() {
        return Err(Error::invalid("reference scene has no objects"));
    }
    let centroids: Vec<Vec3> = roi_objects.iter().map(|o| o.centroid()).collect();
    let ref_centroids: Vec<Vec3> = reference.objects().iter().map(ObjectInstance::centroid).collect();
    // The orthogonal set repeats matrices, so equal candidates are scored once.
    let mut pool: Vec<AffineMap> = Vec::new();
    for m in affine_pool_from_centroids(&centroids, &ref_centroids)? {
        if !pool.contains(&m) {
            pool.push(m);
        }
    }

    let coarse_points = working_set(roi.points(), cfg.coarse_points)?;
    let targets = fields.target_descriptors(&coarse_points)?;
    let costs: Vec<f64> = pool
        .par_iter()
        .map(|m| {
            let mapped: Vec<Vec3> = coarse_points.iter().map(|p| m.apply(p)).collect();
            fields.cost(&targets, &mapped)
        })
        .collect::<Result<_>>()?;
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.sort_by(|&i, &j| costs[i].total_cmp(&costs[j]).then(i.cmp(&j)));
    order.truncate(cfg.k_coarse);

    let inliers: Vec<Vec<u32>> = order
        .iter()
        .map(|&i| reject_outliers(&pool[i], &roi_objects, reference, cfg.outlier_threshold))
        .collect::<Result<_>>()?;
    let most = inliers.iter().map(Vec::len).max().unwrap_or(0);
    if most == 0 {
        return Ok(Err(Unmappable {
            reason: UnmappableReason::NoInliers,
            best_cost: None,
        }));
    }
    let kept: Vec<(usize, Vec<u32>)> = order
        .into_iter()
        .zip(inliers)
        .filter(|(_, ids)| ids.len() == most)
        .collect();
    let mut maps: Vec<SceneMap> = kept
        .into_par_iter()
        .map(|(i, ids)| refine_candidate(&pool[i], ids, roi, fields, cfg))
        .collect::<Result<_>>()?;
    maps.sort_by(|a, b| a.cost.total_cmp(&b.cost));
    Ok(Ok(maps))
}

/// The lowest-cost refined map of `roi` into `reference`, or
/// [`MapResult::Unmappable`] when it is not below `rho_valid`.
pub fn estimate_map(
    target: &Scene,
    reference: &Scene,
    roi: &RegionOfInterest,
    field: &DescriptorField,
    cfg: &MapConfig,
) -> Result<MapResult> {
    let fields = MapFields::new(field, target, reference);
    estimate_map_with(target, reference, roi, &fields, cfg)
}

pub fn estimate_map_with(
    target: &Scene,
    reference: &Scene,
    roi: &RegionOfInterest,
    fields: &MapFields,
    cfg: &MapConfig,
) -> Result<MapResult> {
    match refined_maps(target, reference, roi, fields, cfg)? {
        Err(u) => Ok(MapResult::Unmappable(u)),
        Ok(maps) => {
            let best = maps.into_iter().next().expect("at least one kept candidate");
            if best.cost < cfg.rho_valid {
                Ok(MapResult::Mapped(best))
            } else {
                Ok(MapResult::Unmappable(Unmappable {
                    reason: UnmappableReason::CostAboveThreshold,
                    best_cost: Some(best.cost),
                }))
            }
        }
    }
}

/// Up to `k` valid maps sorted by cost.
pub fn top_k_maps(
    target: &Scene,
    reference: &Scene,
    roi: &RegionOfInterest,
    field: &DescriptorField,
    cfg: &MapConfig,
    k: usize,
) -> Result<Vec<SceneMap>> {
    let fields = MapFields::new(field, target, reference);
    Ok(match refined_maps(target, reference, roi, &fields, cfg)? {
        Err(_) => Vec::new(),
        Ok(maps) => maps.into_iter().filter(|m| m.cost < cfg.rho_valid).take(k).collect(),
    })
}

/// Maps the warped points back: `mapped_points` become the RoI of
/// `reference`, each attributed to the reference object with the nearest
/// surface point.
pub fn estimate_inverse(
    reference: &Scene,
    target: &Scene,
    mapped_points: &[Vec3],
    field: &DescriptorField,
    cfg: &MapConfig,
) -> Result<MapResult> {
    let roi = roi_from_points(reference, mapped_points)?;
    estimate_map(reference, target, &roi, field, cfg)
}

/// RoI over arbitrary points, each owned by the closest object of `scene`.
pub fn roi_from_points(scene: &Scene, points: &[Vec3]) -> Result<RegionOfInterest> {
    if scene.objects().is_empty() {
        return Err(Error::invalid("scene has no objects"));
    }
    let owners: Vec<u32> = points
        .par_iter()
        .map(|p| {
            scene
                .objects()
                .iter()
                .map(|o| {
                    let d = o.points().iter().map(|q| (q - p).norm_squared()).fold(f64::INFINITY, f64::min);
                    (d, o.id())
                })
                .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
                .expect("non-empty")
                .1
        })
        .collect();
    let mut ids = owners.clone();
    ids.sort_unstable();
    ids.dedup();
    RegionOfInterest::new(ids, points.to_vec(), owners)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::FieldConfig;
    use crate::procedural::{generate_scenes, GeneratorConfig, NUM_CLASSES};
    use crate::scene::{sample_roi, SemanticLabel};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_vec(rng: &mut impl Rng, s: f64) -> Vec3 {
        Vec3::new(rng.gen_range(-s..s), rng.gen_range(-s..s), rng.gen_range(-s..s))
    }

    fn small_field(seed: u64) -> DescriptorField {
        let cfg = FieldConfig {
            d: 8,
            emb_dim: 4,
            model_dim: 8,
            layers: 1,
            heads: 2,
            ff_dim: 8,
            dist_hidden: 8,
            keypoints_per_object: 8,
            ..FieldConfig::paper(NUM_CLASSES)
        };
        DescriptorField::init(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn scene(seed: u64) -> Scene {
        let gen = GeneratorConfig {
            points_per_object: 100,
            ..GeneratorConfig::default()
        };
        generate_scenes(&gen, 1, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap().remove(0)
    }

    #[test]
    fn apply_map_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cps: Vec<Vec3> = (0..7).map(|_| random_vec(&mut rng, 2.0)).collect();
        let ws: Vec<Vec3> = (0..7).map(|_| random_vec(&mut rng, 0.1)).collect();
        let mut map = SceneMap::identity(cps.clone());
        map.affine.a = Matrix3::from_fn(|_, _| rng.gen_range(-1.0..1.0));
        map.affine.b = random_vec(&mut rng, 1.0);
        map.displacement = DisplacementMap::new(cps.clone(), ws.clone()).unwrap();
        for _ in 0..20 {
            let x = random_vec(&mut rng, 2.0);
            let mut y = [0.0; 3];
            for r in 0..3 {
                y[r] = map.affine.b[r];
                for c in 0..3 {
                    y[r] += map.affine.a[(r, c)] * x[c];
                }
                for k in 0..7 {
                    let d = ((x[0] - cps[k][0]).powi(2) + (x[1] - cps[k][1]).powi(2) + (x[2] - cps[k][2]).powi(2)).sqrt();
                    y[r] += ws[k][r] * d * d * d.ln();
                }
            }
            let got = apply_map(&map, &x);
            for r in 0..3 {
                assert!((got[r] - y[r]).abs() < 1e-12);
            }
        }
        let id = SceneMap::identity(cps.clone());
        assert_eq!(apply_map(&id, &cps[0]), cps[0]);
        // At a control point its own kernel term vanishes.
        let at = apply_map(&map, &cps[2]);
        let mut expect = map.affine.apply(&cps[2]);
        for k in (0..7).filter(|&k| k != 2) {
            expect += ws[k] * tps_kernel((cps[2] - cps[k]).norm());
        }
        assert!((at - expect).norm() < 1e-12);
    }

    #[test]
    fn pool_cardinality_and_centroid_pinning() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t: Vec<Vec3> = (0..2).map(|_| random_vec(&mut rng, 3.0)).collect();
        let r: Vec<Vec3> = (0..3).map(|_| random_vec(&mut rng, 3.0)).collect();
        let pool = affine_pool_from_centroids(&t, &r).unwrap();
        assert_eq!(pool.len(), 96);
        for (idx, m) in pool.iter().enumerate() {
            let (i, j) = (idx / 48, (idx / 16) % 3);
            assert!((m.apply(&t[i]) - r[j]).norm() < 1e-12);
            assert!((m.a.transpose() * m.a - Matrix3::identity()).norm() < 1e-12);
            assert_eq!(m.a.row(2), nalgebra::RowVector3::new(0.0, 0.0, 1.0));
            assert!((m.b.z - (r[j].z - t[i].z)).abs() < 1e-12);
        }
        let ts = planar_orthogonal_transforms();
        for t in &ts {
            let copies = ts.iter().filter(|u| (*u - t).norm() < 1e-12).count();
            assert_eq!(copies, 2);
        }
        let s = scene(3);
        let pool = affine_pool(&s, &s).unwrap();
        assert!(pool.iter().any(|m| *m == AffineMap::identity() || (m.a == Matrix3::identity() && m.b.norm() < 1e-12)));
        assert!(affine_pool_from_centroids(&[], &r).is_err());
    }

    #[test]
    fn coarse_cost_identity_and_bounds() {
        let field = small_field(4);
        let s = scene(5);
        let fields = MapFields::new(&field, &s, &s);
        let roi = sample_roi(&s, &[s.objects()[0].id()], 20).unwrap();
        assert!(coarse_cost(&AffineMap::identity(), roi.points(), &fields).unwrap() < 1e-9);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let pool = affine_pool(&s, &s).unwrap();
        for _ in 0..5 {
            let m = pool[rng.gen_range(0..pool.len())];
            let c = coarse_cost(&m, roi.points(), &fields).unwrap();
            let by_point: f64 = roi
                .points()
                .iter()
                .map(|p| {
                    let a = field.eval(p, &fields.target).unwrap();
                    let b = field.eval(&m.apply(p), &fields.reference).unwrap();
                    a.distance(&b)
                })
                .sum::<f64>()
                / roi.len() as f64;
            assert!((c - by_point).abs() < 1e-12);
            assert!((0.0..=2.0).contains(&c));
        }
    }

    #[test]
    fn cost_gradients_match_finite_differences() {
        let field = small_field(7);
        let s = scene(8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let other = scene(10);
        let fields = MapFields::new(&field, &s, &other);
        let roi = sample_roi(&s, &[s.objects()[0].id()], 6).unwrap();
        let pts = roi.points();
        let targets = fields.target_descriptors(pts).unwrap();
        let mut map = affine_pool(&s, &other).unwrap()[3];
        map.a += Matrix3::from_fn(|_, _| rng.gen_range(-0.05..0.05));
        let (_, ga, gb) = affine_cost_and_grad(&map, pts, &targets, &fields).unwrap();
        let h = 1e-5;
        let f = |m: &AffineMap| {
            let mapped: Vec<Vec3> = pts.iter().map(|p| m.apply(p)).collect();
            fields.cost(&targets, &mapped).unwrap()
        };
        for r in 0..3 {
            for c in 0..3 {
                let (mut p, mut m) = (map, map);
                p.a[(r, c)] += h;
                m.a[(r, c)] -= h;
                let num = (f(&p) - f(&m)) / (2.0 * h);
                assert!((ga[(r, c)] - num).abs() <= 1e-4 * num.abs().max(1e-3), "A[{r},{c}] {} vs {num}", ga[(r, c)]);
            }
            let (mut p, mut m) = (map, map);
            p.b[r] += h;
            m.b[r] -= h;
            let num = (f(&p) - f(&m)) / (2.0 * h);
            assert!((gb[r] - num).abs() <= 1e-4 * num.abs().max(1e-3));
        }
        let deltas: Vec<Vec3> = pts.iter().map(|_| random_vec(&mut rng, 0.05)).collect();
        let (_, gd) = displacement_cost_and_grad(&map, pts, &targets, &deltas, &fields).unwrap();
        for i in 0..pts.len() {
            for c in 0..3 {
                let (mut p, mut m) = (deltas.clone(), deltas.clone());
                p[i][c] += h;
                m[i][c] -= h;
                let fp = displacement_cost_and_grad(&map, pts, &targets, &p, &fields).unwrap().0;
                let fm = displacement_cost_and_grad(&map, pts, &targets, &m, &fields).unwrap().0;
                let num = (fp - fm) / (2.0 * h);
                assert!((gd[i][c] - num).abs() <= 1e-4 * num.abs().max(1e-3));
            }
        }
    }

    #[test]
    fn optimizers_never_return_worse_iterates() {
        let field = small_field(11);
        let (s, o) = (scene(12), scene(13));
        let fields = MapFields::new(&field, &s, &o);
        let roi = sample_roi(&s, &[s.objects()[0].id()], 10).unwrap();
        let targets = fields.target_descriptors(roi.points()).unwrap();
        let start = affine_pool(&s, &o).unwrap()[0];
        let init = coarse_cost(&start, roi.points(), &fields).unwrap();
        let (same, c0) = optimize_affine(&start, roi.points(), &targets, &fields, &OptimizeConfig::new(0)).unwrap();
        assert_eq!(same, start);
        assert_eq!(c0, init);
        let cfg = OptimizeConfig { lr: 1e-2, ..OptimizeConfig::new(15) };
        let (_, c) = optimize_affine(&start, roi.points(), &targets, &fields, &cfg).unwrap();
        assert!(c <= init);
        let (d, c) = optimize_displacements(&start, roi.points(), &targets, &fields, &cfg).unwrap();
        assert!(c <= init);
        assert_eq!(d.len(), roi.len());
    }

    #[test]
    fn self_displacements_stay_at_zero() {
        let field = small_field(14);
        let s = scene(15);
        let fields = MapFields::new(&field, &s, &s);
        let roi = sample_roi(&s, &[s.objects()[0].id()], 10).unwrap();
        let targets = fields.target_descriptors(roi.points()).unwrap();
        let (d, c) =
            optimize_displacements(&AffineMap::identity(), roi.points(), &targets, &fields, &OptimizeConfig::new(30)).unwrap();
        assert!(c < 1e-9);
        assert!(d.iter().all(|v| v.norm() < 1e-2));
    }

    #[test]
    fn tps_interpolates_and_satisfies_damped_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let pts: Vec<Vec3> = (0..60).map(|_| random_vec(&mut rng, 1.5)).collect();
        let deltas: Vec<Vec3> = (0..60).map(|_| random_vec(&mut rng, 0.2)).collect();
        let exact = fit_tps(&pts, &deltas, 0.0).unwrap();
        for (p, d) in pts.iter().zip(&deltas) {
            assert!((exact.eval(p) - d).norm() < 1e-8);
        }
        let damped = fit_tps(&pts, &deltas, 0.5).unwrap();
        for (k, p) in pts.iter().enumerate() {
            let kw = damped.eval(p);
            assert!((deltas[k] - kw - 0.5 * damped.weights()[k]).norm() < 1e-8);
        }
        let zero = fit_tps(&pts, &vec![Vec3::zeros(); 60], 0.5).unwrap();
        assert!(zero.weights().iter().all(|w| *w == Vec3::zeros()));
        let mut dup = pts[..5].to_vec();
        dup.push(pts[0] + Vec3::new(1e-8, 0.0, 0.0));
        let mut dd = deltas[..5].to_vec();
        dd.push(deltas[0] + Vec3::new(0.1, 0.0, 0.0));
        let merged = fit_tps(&dup, &dd, 0.0).unwrap();
        assert_eq!(merged.control_points().len(), 5);
        assert!((merged.eval(&pts[0]) - (deltas[0] + Vec3::new(0.05, 0.0, 0.0))).norm() < 1e-8);
    }

    fn obj(id: u32, label: u16, at: Vec3) -> ObjectInstance {
        let pts = (0..4).map(|k| at + Vec3::new(0.01 * k as f64, 0.0, 0.0)).collect();
        ObjectInstance::new(id, SemanticLabel::new(label).unwrap(), pts).unwrap()
    }

    fn room(objects: Vec<ObjectInstance>) -> Scene {
        let corners = vec![
            Vec3::new(-10.0, -10.0, 0.0),
            Vec3::new(10.0, -10.0, 0.0),
            Vec3::new(0.0, 10.0, 0.0),
            Vec3::new(0.0, 0.0, 3.0),
        ];
        Scene::new(objects, corners).unwrap()
    }

    #[test]
    fn outlier_rejection_rules() {
        let s = room(vec![obj(0, 1, Vec3::new(0.0, 0.0, 0.0)), obj(1, 2, Vec3::new(1.0, 0.0, 0.0)), obj(2, 3, Vec3::new(5.0, 0.0, 0.0))]);
        let ids: Vec<&ObjectInstance> = s.objects().iter().collect();
        assert_eq!(reject_outliers(&AffineMap::identity(), &ids, &s, 2.0).unwrap(), vec![0, 1, 2]);
        let r = room(vec![obj(7, 1, Vec3::new(0.5, 0.0, 0.0)), obj(8, 2, Vec3::new(4.0, 0.0, 0.0))]);
        // Label 3 is absent and object 1 is 3 m from its only partner.
        assert_eq!(reject_outliers(&AffineMap::identity(), &ids, &r, 2.0).unwrap(), vec![0]);
        let mut rev = ids.clone();
        rev.reverse();
        assert_eq!(reject_outliers(&AffineMap::identity(), &rev, &r, 2.0).unwrap(), vec![0]);
    }

    #[test]
    fn outlier_assignment_is_brute_force_optimal() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let t: Vec<ObjectInstance> = (0..4).map(|i| obj(i, 1, random_vec(&mut rng, 3.0))).collect();
            let r: Vec<ObjectInstance> = (0..5).map(|i| obj(10 + i, 1, random_vec(&mut rng, 3.0))).collect();
            let cost: Vec<Vec<f64>> = t.iter().map(|a| r.iter().map(|b| (a.centroid() - b.centroid()).norm()).collect()).collect();
            let mut best = (f64::INFINITY, vec![]);
            for a in 0..5 {
                for b in (0..5).filter(|&b| b != a) {
                    for c in (0..5).filter(|&c| c != a && c != b) {
                        for d in (0..5).filter(|&d| d != a && d != b && d != c) {
                            let total = cost[0][a] + cost[1][b] + cost[2][c] + cost[3][d];
                            if total < best.0 {
                                best = (total, vec![a, b, c, d]);
                            }
                        }
                    }
                }
            }
            let expect: Vec<u32> = (0..4).filter(|&i| cost[i][best.1[i]] <= 2.0).map(|i| i as u32).collect();
            let ids: Vec<&ObjectInstance> = t.iter().collect();
            let scene_r = room(r);
            assert_eq!(reject_outliers(&AffineMap::identity(), &ids, &scene_r, 2.0).unwrap(), expect);
            assert!((hungarian(&cost).unwrap().total - best.0).abs() < 1e-12);
        }
    }

    fn quick_cfg() -> MapConfig {
        MapConfig {
            affine: OptimizeConfig::new(5),
            displacement: OptimizeConfig::new(5),
            coarse_points: Some(8),
            refine_points: Some(12),
            ..MapConfig::default()
        }
    }

    #[test]
    fn self_map_is_identity_with_monotone_stages() {
        let field = small_field(18);
        let s = scene(19);
        let roi = sample_roi(&s, &[s.objects()[0].id()], 30).unwrap();
        let result = estimate_map(&s, &s, &roi, &field, &quick_cfg()).unwrap();
        let map = result.map().expect("self map is valid");
        assert!(map.cost < 1e-9);
        let st = map.stages;
        assert!(st.displacement <= st.affine && st.affine <= st.coarse);
        for p in roi.points() {
            assert!((map.apply(p) - p).norm() < 1e-6);
        }
        let fields = MapFields::new(&field, &s, &s);
        assert!((map_cost(map, &fields).unwrap() - map.cost).abs() < 1e-12);
        let top = top_k_maps(&s, &s, &roi, &field, &quick_cfg(), 1).unwrap();
        assert_eq!(top.len(), 1);
        assert_eq!(&top[0], map);
        let inv = estimate_inverse(&s, &s, &map.apply_all(roi.points()), &field, &quick_cfg()).unwrap();
        let inv = inv.map().expect("inverse of identity");
        for p in roi.points() {
            assert!((inv.apply(&map.apply(p)) - p).norm() < 0.25);
        }
    }

    #[test]
    fn top_k_is_sorted_and_valid() {
        let field = small_field(20);
        let (s, o) = (scene(21), scene(22));
        let roi = sample_roi(&s, &[s.objects()[0].id()], 20).unwrap();
        let cfg = MapConfig { rho_valid: 10.0, ..quick_cfg() };
        let maps = top_k_maps(&s, &o, &roi, &field, &cfg, 5).unwrap();
        assert!(maps.windows(2).all(|w| w[0].cost <= w[1].cost));
        assert!(maps.iter().all(|m| m.cost < cfg.rho_valid));
        for m in &maps {
            assert!(m.stages.displacement <= m.stages.affine && m.stages.affine <= m.stages.coarse);
        }
    }

    #[test]
    fn label_disjoint_reference_is_unmappable() {
        let field = small_field(23);
        let s = room(vec![obj(0, 1, Vec3::new(0.0, 0.0, 0.0)), obj(1, 2, Vec3::new(1.0, 0.0, 0.0))]);
        let r = room(vec![obj(0, 3, Vec3::new(0.0, 0.0, 0.0)), obj(1, 4, Vec3::new(1.0, 0.0, 0.0))]);
        let roi = sample_roi(&s, &[0, 1], 4).unwrap();
        let out = estimate_map(&s, &r, &roi, &field, &quick_cfg()).unwrap();
        assert_eq!(
            out,
            MapResult::Unmappable(Unmappable {
                reason: UnmappableReason::NoInliers,
                best_cost: None
            })
        );
    }
}
