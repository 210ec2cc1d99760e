//! The contextual descriptor field.
//!
//! A query position `q` is described by the keypoints of a scene that lie
//! within radius `r`. Each neighbor becomes a token made of a learned
//! embedding of its distance to `q` and a learned embedding of its label.
//! A transformer encoder reads `[CLS] + tokens` without positional encoding
//! and the CLS output, projected and L2-normalized, is the descriptor. Only
//! distances enter the tokens, so descriptors are invariant to rigid motions
//! of the scene and query together and to keypoint order.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{bounds, Vec3};
use crate::numeric::{forward, vjp, InputSource, NodeId, Tape, Tensor, Values};
use crate::scene::{gather_neighborhood, KeypointSet, Scene, SemanticLabel};

mod kernel;

use kernel::Kernel;

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldConfig {
    /// Neighborhood radius in meters.
    pub r: f64,
    /// Descriptor dimension.
    pub d: usize,
    /// Width of each of the two token embeddings.
    pub emb_dim: usize,
    /// Encoder width, always `2 * emb_dim`.
    pub model_dim: usize,
    pub layers: usize,
    pub heads: usize,
    /// Hidden width of the encoder feed-forward blocks.
    pub ff_dim: usize,
    /// Hidden width of the distance embedding MLP.
    pub dist_hidden: usize,
    /// Number of object classes; labels run `1..=num_classes`, 0 is corners.
    pub num_classes: u16,
    pub keypoints_per_object: usize,
    pub use_semantic: bool,
    pub use_distance: bool,
}

impl FieldConfig {
    /// The published architecture.
    pub fn paper(num_classes: u16) -> Self {
        FieldConfig {
            r: 0.75,
            d: 256,
            emb_dim: 32,
            model_dim: 64,
            layers: 6,
            heads: 8,
            ff_dim: 256,
            dist_hidden: 32,
            num_classes,
            keypoints_per_object: crate::scene::DEFAULT_KEYPOINTS_PER_OBJECT,
            use_semantic: true,
            use_distance: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d", self.d),
            ("emb_dim", self.emb_dim),
            ("layers", self.layers),
            ("heads", self.heads),
            ("ff_dim", self.ff_dim),
            ("dist_hidden", self.dist_hidden),
            ("keypoints_per_object", self.keypoints_per_object),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("field config: {name} must be positive")));
        }
        if !(self.r > 0.0) || !self.r.is_finite() {
            return Err(Error::invalid("field config: r must be positive"));
        }
        if self.model_dim != 2 * self.emb_dim {
            return Err(Error::invalid(format!(
                "field config: model_dim {} must equal 2 * emb_dim {}",
                self.model_dim, self.emb_dim
            )));
        }
        if self.model_dim % self.heads != 0 {
            return Err(Error::invalid(format!(
                "field config: {} heads do not divide model_dim {}",
                self.heads, self.model_dim
            )));
        }
        if self.num_classes == 0 {
            return Err(Error::invalid("field config: need at least one class"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    /// Parameter names and shapes, in a fixed order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (m, e, h) = (self.model_dim, self.emb_dim, self.dist_hidden);
        let mut s = vec![
            ("semantic_table".to_string(), vec![self.num_classes as usize + 1, e]),
            ("dist.w1".to_string(), vec![1, h]),
            ("dist.b1".to_string(), vec![1, h]),
            ("dist.w2".to_string(), vec![h, e]),
            ("dist.b2".to_string(), vec![1, e]),
            ("cls".to_string(), vec![1, m]),
        ];
        for l in 0..self.layers {
            let p = |n: &str| format!("enc{l}.{n}");
            s.extend([
                (p("ln1.g"), vec![1, m]),
                (p("ln1.b"), vec![1, m]),
                (p("wqkv"), vec![m, 3 * m]),
                (p("bqkv"), vec![1, 3 * m]),
                (p("wo"), vec![m, m]),
                (p("bo"), vec![1, m]),
                (p("ln2.g"), vec![1, m]),
                (p("ln2.b"), vec![1, m]),
                (p("w1"), vec![m, self.ff_dim]),
                (p("b1"), vec![1, self.ff_dim]),
                (p("w2"), vec![self.ff_dim, m]),
                (p("b2"), vec![1, m]),
            ]);
        }
        s.extend([
            ("final_ln.g".to_string(), vec![1, m]),
            ("final_ln.b".to_string(), vec![1, m]),
            ("out.w".to_string(), vec![m, self.d]),
            ("out.b".to_string(), vec![1, self.d]),
        ]);
        s
    }
}

impl Default for FieldConfig {
    fn default() -> Self {
        FieldConfig::paper(8)
    }
}

/// Learned weights of the field, keyed by parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorFieldParams {
    tensors: BTreeMap<String, Tensor>,
}

impl DescriptorFieldParams {
    /// Random initialization. Weight matrices use `N(0, 1/fan_in)`, layer
    /// norms start at identity, embeddings at `N(0, 1)`.
    pub fn init(cfg: &FieldConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut tensors = BTreeMap::new();
        for (name, shape) in cfg.param_shapes() {
            let n: usize = shape.iter().product();
            let std = if name == "semantic_table" || name == "cls" {
                Some(1.0)
            } else if name == "dist.w1" {
                Some(3.0)
            } else if name == "dist.b1" {
                Some(1.0)
            } else if name.ends_with(".g") {
                None
            } else if name.contains(".b") || name == "out.b" {
                Some(0.0)
            } else {
                Some((1.0 / shape[0] as f64).sqrt())
            };
            let data: Vec<f64> = match std {
                None => vec![1.0; n],
                Some(s) if s == 0.0 => vec![0.0; n],
                Some(s) => {
                    let normal = Normal::new(0.0, s).expect("positive std");
                    (0..n).map(|_| normal.sample(rng)).collect()
                }
            };
            tensors.insert(name, Tensor::new(shape, data)?);
        }
        Ok(DescriptorFieldParams { tensors })
    }

    /// Builds params from named tensors, checking them against `cfg`.
    pub fn from_tensors(cfg: &FieldConfig, tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        let p = DescriptorFieldParams { tensors };
        p.validate(cfg)?;
        Ok(p)
    }

    pub fn validate(&self, cfg: &FieldConfig) -> Result<()> {
        cfg.validate()?;
        let expected = cfg.param_shapes();
        if expected.len() != self.tensors.len() {
            return Err(Error::invalid(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                self.tensors.len()
            )));
        }
        for (name, shape) in expected {
            let t = self
                .tensors
                .get(&name)
                .ok_or_else(|| Error::invalid(format!("missing parameter `{name}`")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::shape(
                    "params",
                    format!("`{name}` has shape {:?}, config wants {:?}", t.shape(), shape),
                ));
            }
            if !t.is_finite() {
                return Err(Error::NonFinite(format!("parameter `{name}`")));
            }
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn names(&self) -> Vec<String> {
        self.tensors.keys().cloned().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    /// Tensors in name order.
    pub fn to_vec(&self) -> Vec<Tensor> {
        self.tensors.values().cloned().collect()
    }

    /// Replaces the tensors in name order; shapes must match.
    pub fn set_from_vec(&mut self, values: Vec<Tensor>) -> Result<()> {
        if values.len() != self.tensors.len() {
            return Err(Error::invalid("parameter count mismatch"));
        }
        for (slot, v) in self.tensors.values_mut().zip(values) {
            if !slot.same_shape(&v) {
                return Err(Error::shape("params", format!("{:?} vs {:?}", slot.shape(), v.shape())));
            }
            *slot = v;
        }
        Ok(())
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }
}

impl InputSource for DescriptorFieldParams {
    fn input(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }
}

/// Unit-norm field output.
#[derive(Clone, Debug, PartialEq)]
pub struct Descriptor {
    values: Vec<f64>,
}

impl Descriptor {
    /// Wraps `values` unchanged. Field evaluations always have unit norm;
    /// this is for descriptors built elsewhere.
    pub fn from_values(values: Vec<f64>) -> Self {
        Descriptor { values }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dot(&self, other: &Descriptor) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum()
    }

    pub fn distance(&self, other: &Descriptor) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// The scene representation the field reads: its labeled keypoints.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneContext {
    keypoints: KeypointSet,
}

impl SceneContext {
    pub fn new(scene: &Scene, cfg: &FieldConfig) -> Self {
        SceneContext {
            keypoints: scene.keypoints(cfg.keypoints_per_object),
        }
    }

    pub fn from_keypoints(keypoints: KeypointSet) -> Self {
        SceneContext { keypoints }
    }

    pub fn keypoints(&self) -> &KeypointSet {
        &self.keypoints
    }
}

/// A recorded field evaluation that can pull cotangents back to the query
/// position or to the parameters.
pub struct Trace<'a> {
    params: &'a DescriptorFieldParams,
    tape: Tape,
    values: Values,
    out: NodeId,
    descriptor: Descriptor,
}

impl Trace<'_> {
    pub fn descriptor(&self) -> &Descriptor {
        &self.descriptor
    }

    fn check_cotangent(&self, cotangent: &[f64]) -> Result<Tensor> {
        if cotangent.len() != self.descriptor.values.len() {
            return Err(Error::shape(
                "field vjp",
                format!("cotangent of length {} for d = {}", cotangent.len(), self.descriptor.values.len()),
            ));
        }
        Ok(Tensor::row(cotangent))
    }

    /// `J^T c` where `J` is the d x 3 Jacobian of the descriptor in `q`.
    pub fn query_vjp(&self, cotangent: &[f64]) -> Result<Vec3> {
        let seed = self.check_cotangent(cotangent)?;
        let g = vjp(&self.tape, &self.values, self.out, &seed, &["q"])?;
        let d = g.get("q").map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; 3]);
        Ok(Vec3::new(d[0], d[1], d[2]))
    }

    /// Cotangent pulled back to every parameter tensor, keyed by name.
    pub fn param_vjp(&self, cotangent: &[f64]) -> Result<BTreeMap<String, Tensor>> {
        let seed = self.check_cotangent(cotangent)?;
        let names = self.params.names();
        let refs: Vec<&str> = names
            .iter()
            .map(String::as_str)
            .filter(|n| self.tape.has_input(n))
            .collect();
        let g = vjp(&self.tape, &self.values, self.out, &seed, &refs)?;
        let mut out = g.into_map();
        for (name, t) in self.params.iter() {
            out.entry(name.clone()).or_insert_with(|| Tensor::zeros(t.shape()));
        }
        Ok(out)
    }
}

/// Field configuration plus weights.
#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorField {
    config: FieldConfig,
    params: DescriptorFieldParams,
}

impl DescriptorField {
    pub fn new(config: FieldConfig, params: DescriptorFieldParams) -> Result<Self> {
        params.validate(&config)?;
        Ok(DescriptorField { config, params })
    }

    pub fn init(config: FieldConfig, rng: &mut impl Rng) -> Result<Self> {
        let params = DescriptorFieldParams::init(&config, rng)?;
        Ok(DescriptorField { config, params })
    }

    pub fn config(&self) -> &FieldConfig {
        &self.config
    }

    pub fn params(&self) -> &DescriptorFieldParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut DescriptorFieldParams {
        &mut self.params
    }

    pub fn into_parts(self) -> (FieldConfig, DescriptorFieldParams) {
        (self.config, self.params)
    }

    pub fn context(&self, scene: &Scene) -> SceneContext {
        SceneContext::new(scene, &self.config)
    }

    /// Token sequence for `q`: the CLS token followed by one token per
    /// neighbor, `(n + 1) x model_dim`.
    pub fn tokenize(&self, q: &Vec3, ctx: &SceneContext) -> Result<Tensor> {
        let neighbors = gather_neighborhood(q, &ctx.keypoints, self.config.r);
        let (tape, tokens) = self.token_graph(&neighbors);
        let inputs = [("q", Tensor::row(&[q.x, q.y, q.z]))];
        let values = forward(&tape, &(&inputs, &self.params))?;
        Ok(values.get(tokens).clone())
    }

    pub fn eval(&self, q: &Vec3, ctx: &SceneContext) -> Result<Descriptor> {
        let kernel = Kernel::new(&self.config, &self.params);
        self.eval_with(&kernel, q, ctx)
    }

    fn eval_with(&self, kernel: &Kernel, q: &Vec3, ctx: &SceneContext) -> Result<Descriptor> {
        let neighbors = gather_neighborhood(q, &ctx.keypoints, self.config.r);
        let cache = kernel.forward(q, &neighbors);
        finite_descriptor(cache.out)
    }

    /// Evaluates many queries; parallel over queries, order preserved.
    pub fn eval_many(&self, queries: &[Vec3], ctx: &SceneContext) -> Result<Vec<Descriptor>> {
        let kernel = Kernel::new(&self.config, &self.params);
        queries.par_iter().map(|q| self.eval_with(&kernel, q, ctx)).collect()
    }

    /// Descriptors of `queries` together with `J^T c` for each, where the
    /// cotangent `c` is computed from the descriptor by `cotangent`. The
    /// neighborhood is held fixed at its membership for each query.
    pub fn eval_with_query_vjp<F>(
        &self,
        queries: &[Vec3],
        ctx: &SceneContext,
        cotangent: F,
    ) -> Result<Vec<(Descriptor, Vec3)>>
    where
        F: Fn(usize, &Descriptor) -> Vec<f64> + Sync,
    {
        let kernel = Kernel::new(&self.config, &self.params);
        queries
            .par_iter()
            .enumerate()
            .map(|(i, q)| {
                let neighbors = gather_neighborhood(q, &ctx.keypoints, self.config.r);
                let cache = kernel.forward(q, &neighbors);
                let descriptor = finite_descriptor(cache.out.clone())?;
                let c = cotangent(i, &descriptor);
                if c.len() != self.config.d {
                    return Err(Error::shape(
                        "field vjp",
                        format!("cotangent of length {} for d = {}", c.len(), self.config.d),
                    ));
                }
                let g = kernel.query_vjp(&cache, &c);
                Ok((descriptor, g))
            })
            .collect()
    }

    /// Tape-recorded evaluation, for parameter gradients.
    pub fn trace(&self, q: &Vec3, ctx: &SceneContext) -> Result<Trace<'_>> {
        let neighbors = gather_neighborhood(q, &ctx.keypoints, self.config.r);
        let (tape, out) = self.graph(&neighbors);
        let query = [("q", Tensor::row(&[q.x, q.y, q.z]))];
        let values = forward(&tape, &(&query, &self.params))?;
        let descriptor = Descriptor {
            values: values.get(out).data().to_vec(),
        };
        Ok(Trace {
            params: &self.params,
            tape,
            values,
            out,
            descriptor,
        })
    }

    /// The d x 3 Jacobian of the descriptor in `q`, with the neighborhood
    /// held fixed at its membership for `q`.
    pub fn query_jacobian(&self, q: &Vec3, ctx: &SceneContext) -> Result<DMatrix<f64>> {
        let trace = self.trace(q, ctx)?;
        let d = self.config.d;
        let mut jac = DMatrix::zeros(d, 3);
        let mut e = vec![0.0; d];
        for i in 0..d {
            e[i] = 1.0;
            let row = trace.query_vjp(&e)?;
            e[i] = 0.0;
            for c in 0..3 {
                jac[(i, c)] = row[c];
            }
        }
        Ok(jac)
    }

    fn token_graph(&self, neighbors: &[(Vec3, SemanticLabel)]) -> (Tape, NodeId) {
        let mut t = Tape::new();
        let x = self.tokens(&mut t, neighbors);
        (t, x)
    }

    fn tokens(&self, t: &mut Tape, neighbors: &[(Vec3, SemanticLabel)]) -> NodeId {
        let cfg = &self.config;
        let q = t.input("q");
        let cls = t.input("cls");
        if neighbors.is_empty() {
            return cls;
        }
        let n = neighbors.len();
        let e = cfg.emb_dim;
        let dist_emb = if cfg.use_distance {
            let pos: Vec<f64> = neighbors.iter().flat_map(|(p, _)| [p.x, p.y, p.z]).collect();
            let pos = t.constant(Tensor::from_parts(vec![n, 3], pos));
            let diff = t.sub_row(pos, q);
            let dist = t.row_norms(diff);
            // Distances enter scaled by 1/r so the MLP sees [0, 1].
            let dist = t.scale(dist, 1.0 / cfg.r);
            let w1 = t.input("dist.w1");
            let b1 = t.input("dist.b1");
            let w2 = t.input("dist.w2");
            let b2 = t.input("dist.b2");
            let h = t.matmul(dist, w1);
            let h = t.add_row(h, b1);
            let h = t.gelu(h);
            let h = t.matmul(h, w2);
            t.add_row(h, b2)
        } else {
            t.constant(Tensor::zeros(&[n, e]))
        };
        let sem_emb = if cfg.use_semantic {
            let table = t.input("semantic_table");
            t.gather(table, neighbors.iter().map(|(_, l)| l.id() as usize).collect())
        } else {
            t.constant(Tensor::zeros(&[n, e]))
        };
        let tokens = t.concat(&[dist_emb, sem_emb], 1);
        t.concat(&[cls, tokens], 0)
    }

    fn norm_affine(t: &mut Tape, x: NodeId, prefix: &str) -> NodeId {
        let g = t.input(&format!("{prefix}.g"));
        let b = t.input(&format!("{prefix}.b"));
        let h = t.layer_norm_rows(x, LN_EPS);
        let h = t.mul_row(h, g);
        t.add_row(h, b)
    }

    fn graph(&self, neighbors: &[(Vec3, SemanticLabel)]) -> (Tape, NodeId) {
        let cfg = &self.config;
        let (m, dh) = (cfg.model_dim, cfg.head_dim());
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        let mut t = Tape::new();
        let mut x = self.tokens(&mut t, neighbors);
        for l in 0..cfg.layers {
            // The last layer only needs the CLS row.
            let last = l + 1 == cfg.layers;
            let p = |n: &str| format!("enc{l}.{n}");
            let h = Self::norm_affine(&mut t, x, &p("ln1"));
            let wqkv = t.input(&p("wqkv"));
            let bqkv = t.input(&p("bqkv"));
            let qkv = t.matmul(h, wqkv);
            let qkv = t.add_row(qkv, bqkv);
            let queries = if last { t.slice(qkv, 0, 0, 1) } else { qkv };
            let mut heads = Vec::with_capacity(cfg.heads);
            for hd in 0..cfg.heads {
                let qh = t.slice(queries, 1, hd * dh, dh);
                let kh = t.slice(qkv, 1, m + hd * dh, dh);
                let vh = t.slice(qkv, 1, 2 * m + hd * dh, dh);
                let kt = t.transpose(kh);
                let s = t.matmul(qh, kt);
                let s = t.scale(s, inv_sqrt);
                let a = t.softmax_rows(s);
                heads.push(t.matmul(a, vh));
            }
            let att = if heads.len() == 1 { heads[0] } else { t.concat(&heads, 1) };
            let wo = t.input(&p("wo"));
            let bo = t.input(&p("bo"));
            let att = t.matmul(att, wo);
            let att = t.add_row(att, bo);
            let resid = if last { t.slice(x, 0, 0, 1) } else { x };
            x = t.add(resid, att);

            let h = Self::norm_affine(&mut t, x, &p("ln2"));
            let w1 = t.input(&p("w1"));
            let b1 = t.input(&p("b1"));
            let w2 = t.input(&p("w2"));
            let b2 = t.input(&p("b2"));
            let h = t.matmul(h, w1);
            let h = t.add_row(h, b1);
            let h = t.gelu(h);
            let h = t.matmul(h, w2);
            let h = t.add_row(h, b2);
            x = t.add(x, h);
        }
        if cfg.layers == 0 {
            x = t.slice(x, 0, 0, 1);
        }
        let y = Self::norm_affine(&mut t, x, "final_ln");
        let w = t.input("out.w");
        let b = t.input("out.b");
        let z = t.matmul(y, w);
        let z = t.add_row(z, b);
        let norm = t.row_norms(z);
        let out = t.div_scalar(z, norm);
        (t, out)
    }
}

fn finite_descriptor(values: Vec<f64>) -> Result<Descriptor> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(Descriptor { values })
    } else {
        Err(Error::NonFinite("field output".into()))
    }
}

/// Field distances from one target query to a grid over the reference scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceGrid {
    pub query: [f64; 3],
    pub resolution: f64,
    pub points: Vec<[f64; 3]>,
    pub values: Vec<f64>,
}

/// `|D(q; S_tgt) - D(x; S_ref)|` for grid points `x` with the given spacing
/// that lie inside the reference scene's corner hull.
pub fn field_distance_grid(
    field: &DescriptorField,
    ctx_tgt: &SceneContext,
    q: &Vec3,
    scene_ref: &Scene,
    ctx_ref: &SceneContext,
    resolution: f64,
) -> Result<DistanceGrid> {
    if !(resolution > 0.0) {
        return Err(Error::invalid("grid resolution must be positive"));
    }
    let hull = scene_ref.hull()?;
    let (lo, hi) = bounds(scene_ref.corners()).expect("scene has corners");
    let steps: Vec<usize> = (0..3)
        .map(|a| ((hi[a] - lo[a]) / resolution).floor() as usize + 1)
        .collect();
    if steps.iter().product::<usize>() > 2_000_000 {
        return Err(Error::invalid("distance grid too fine"));
    }
    let mut points = Vec::new();
    for i in 0..steps[0] {
        for j in 0..steps[1] {
            for k in 0..steps[2] {
                let p = lo + Vec3::new(i as f64, j as f64, k as f64) * resolution;
                if hull.contains(&p, 1e-9) {
                    points.push(p);
                }
            }
        }
    }
    let target = field.eval(q, ctx_tgt)?;
    let descriptors = field.eval_many(&points, ctx_ref)?;
    Ok(DistanceGrid {
        query: [q.x, q.y, q.z],
        resolution,
        points: points.iter().map(crate::geometry::to_array).collect(),
        values: descriptors.iter().map(|d| target.distance(d)).collect(),
    })
}
