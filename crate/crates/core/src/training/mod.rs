//! Contrastive training of the descriptor field on procedurally built scene
//! triplets.

mod pool;
mod triplet;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use pool::{aspect_distance, aspect_signature, generate_positive, repose, ObjectPool, PoolEntry, DEFAULT_TOP_K};
pub use triplet::{
    generate_negative, generate_triplet, perturb_object, sample_query_pairs, PoseNoise, QuerySampling, TripletRecord,
};

use crate::error::{Error, Result};
use crate::field::{Descriptor, DescriptorField, DescriptorFieldParams, SceneContext};
use crate::geometry::Vec3;
use crate::numeric::{AdamState, Tensor};
use crate::rng::stream;
use crate::scene::Scene;

pub const DEFAULT_TAU: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub tau: f64,
    /// Query pairs per optimizer step.
    pub batch_size: usize,
    pub steps: u64,
    /// Triplets generated up front and sampled from during training.
    pub triplets: usize,
    pub top_k: usize,
    pub noise: PoseNoise,
    pub sampling: QuerySampling,
    /// Steps between validation-loss evaluations.
    pub validation_every: u64,
    pub validation_pairs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            tau: DEFAULT_TAU,
            batch_size: 4,
            steps: 10_000,
            triplets: 100,
            top_k: DEFAULT_TOP_K,
            noise: PoseNoise::NEGATIVE,
            sampling: QuerySampling::default(),
            validation_every: 100,
            validation_pairs: 64,
        }
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Mean over pairs of `-log(e^{a.p/t} / (e^{a.p/t} + e^{a.n/t}))`.
pub fn infonce_loss(anchor: &[Descriptor], positive: &[Descriptor], negative: &[Descriptor], tau: f64) -> Result<f64> {
    Ok(infonce_with_grad(anchor, positive, negative, tau)?.0)
}

/// Gradients of [`infonce_loss`] with respect to each anchor, positive and
/// negative descriptor.
#[derive(Clone, Debug, PartialEq)]
pub struct InfoNceGrad {
    pub anchor: Vec<Vec<f64>>,
    pub positive: Vec<Vec<f64>>,
    pub negative: Vec<Vec<f64>>,
}

pub fn infonce_with_grad(
    anchor: &[Descriptor],
    positive: &[Descriptor],
    negative: &[Descriptor],
    tau: f64,
) -> Result<(f64, InfoNceGrad)> {
    if anchor.len() != positive.len() || anchor.len() != negative.len() {
        return Err(Error::invalid(format!(
            "infonce needs equal lengths, got {}/{}/{}",
            anchor.len(),
            positive.len(),
            negative.len()
        )));
    }
    if anchor.is_empty() {
        return Err(Error::invalid("infonce of an empty batch"));
    }
    if !(tau > 0.0) {
        return Err(Error::invalid("temperature must be positive"));
    }
    let m = anchor.len() as f64;
    let mut loss = 0.0;
    let mut g = InfoNceGrad {
        anchor: Vec::with_capacity(anchor.len()),
        positive: Vec::with_capacity(anchor.len()),
        negative: Vec::with_capacity(anchor.len()),
    };
    for ((a, p), n) in anchor.iter().zip(positive).zip(negative) {
        let (a, p, n) = (a.values(), p.values(), n.values());
        let sp = dot(a, p) / tau;
        let sn = dot(a, n) / tau;
        loss += softplus(sn - sp);
        // Weight of the negative term in the two-way softmax.
        let w = 1.0 / (1.0 + (sp - sn).exp());
        let (cp, cn) = (-w / (tau * m), w / (tau * m));
        g.anchor.push(p.iter().zip(n).map(|(pi, ni)| cp * pi + cn * ni).collect());
        g.positive.push(a.iter().map(|ai| cp * ai).collect());
        g.negative.push(a.iter().map(|ai| cn * ai).collect());
    }
    Ok((loss / m, g))
}

/// A triplet with the scene contexts the field reads and its query pairs
/// flattened across object slots.
pub struct PreparedTriplet {
    pub record: TripletRecord,
    pub source: SceneContext,
    pub positive: SceneContext,
    pub negative: SceneContext,
    pub pairs: Vec<(Vec3, Vec3)>,
}

impl PreparedTriplet {
    pub fn new(record: TripletRecord, field: &DescriptorField) -> Self {
        let source = field.context(&record.source);
        let positive = field.context(&record.positive);
        let negative = field.context(&record.negative);
        let pairs = record.query_pairs.iter().flatten().copied().collect();
        PreparedTriplet {
            record,
            source,
            positive,
            negative,
            pairs,
        }
    }

    /// Anchor, positive and negative descriptors of the given pairs.
    pub fn descriptors(
        &self,
        field: &DescriptorField,
        pairs: &[(Vec3, Vec3)],
    ) -> Result<(Vec<Descriptor>, Vec<Descriptor>, Vec<Descriptor>)> {
        let rows: Vec<(Descriptor, Descriptor, Descriptor)> = pairs
            .par_iter()
            .map(|(q, qp)| {
                Ok((
                    field.eval(q, &self.source)?,
                    field.eval(qp, &self.positive)?,
                    field.eval(qp, &self.negative)?,
                ))
            })
            .collect::<Result<_>>()?;
        let mut a = Vec::with_capacity(rows.len());
        let mut p = Vec::with_capacity(rows.len());
        let mut n = Vec::with_capacity(rows.len());
        for (x, y, z) in rows {
            a.push(x);
            p.push(y);
            n.push(z);
        }
        Ok((a, p, n))
    }

    pub fn loss(&self, field: &DescriptorField, pairs: &[(Vec3, Vec3)], tau: f64) -> Result<f64> {
        let (a, p, n) = self.descriptors(field, pairs)?;
        infonce_loss(&a, &p, &n, tau)
    }
}

fn add_into(acc: &mut [Tensor], names: &[String], grads: &std::collections::BTreeMap<String, Tensor>) {
    for (slot, name) in acc.iter_mut().zip(names) {
        if let Some(g) = grads.get(name) {
            for (x, y) in slot.data_mut().iter_mut().zip(g.data()) {
                *x += y;
            }
        }
    }
}

/// Loss of a batch and its gradient for every parameter tensor, in name
/// order.
pub fn batch_loss_and_grad(
    field: &DescriptorField,
    triplet: &PreparedTriplet,
    batch: &[(Vec3, Vec3)],
    tau: f64,
) -> Result<(f64, Vec<Tensor>)> {
    let traces: Vec<_> = batch
        .par_iter()
        .map(|(q, qp)| {
            Ok((
                field.trace(q, &triplet.source)?,
                field.trace(qp, &triplet.positive)?,
                field.trace(qp, &triplet.negative)?,
            ))
        })
        .collect::<Result<_>>()?;
    let a: Vec<Descriptor> = traces.iter().map(|t| t.0.descriptor().clone()).collect();
    let p: Vec<Descriptor> = traces.iter().map(|t| t.1.descriptor().clone()).collect();
    let n: Vec<Descriptor> = traces.iter().map(|t| t.2.descriptor().clone()).collect();
    let (loss, g) = infonce_with_grad(&a, &p, &n, tau)?;
    let per_item: Vec<[std::collections::BTreeMap<String, Tensor>; 3]> = traces
        .par_iter()
        .enumerate()
        .map(|(i, (ta, tp, tn))| {
            Ok([
                ta.param_vjp(&g.anchor[i])?,
                tp.param_vjp(&g.positive[i])?,
                tn.param_vjp(&g.negative[i])?,
            ])
        })
        .collect::<Result<_>>()?;
    let names = field.params().names();
    let mut acc: Vec<Tensor> = field.params().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
    for item in &per_item {
        for g in item {
            add_into(&mut acc, &names, g);
        }
    }
    Ok((loss, acc))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    pub train_loss: Option<f64>,
    pub val_loss: Option<f64>,
    pub best_val: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("step\ttrain_loss\tval_loss\tbest_val\n");
        let f = |v: Option<f64>| v.map_or(String::from("-"), |x| format!("{x:.6}"));
        for r in &self.rows {
            s.push_str(&format!("{}\t{}\t{}\t{:.6}\n", r.step, f(r.train_loss), f(r.val_loss), r.best_val));
        }
        s
    }
}

/// Resumable optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub current: DescriptorFieldParams,
    pub adam: AdamState,
    pub best_val: f64,
    pub log: TrainLog,
}

/// Drives training: a fixed triplet set and validation triplet derived from
/// the seed, Adam on the batch InfoNCE gradient, and best-validation model
/// selection.
pub struct Trainer {
    cfg: TrainConfig,
    seed: u64,
    field: DescriptorField,
    best: DescriptorFieldParams,
    state: TrainState,
    triplets: Vec<PreparedTriplet>,
    validation: PreparedTriplet,
    validation_pairs: Vec<(Vec3, Vec3)>,
}

impl Trainer {
    pub fn new(field: DescriptorField, sources: &[Scene], cfg: TrainConfig, seed: u64) -> Result<Self> {
        let adam = AdamState::new(&field.params().to_vec(), cfg.lr);
        let state = TrainState {
            step: 0,
            current: field.params().clone(),
            adam,
            best_val: f64::INFINITY,
            log: TrainLog::default(),
        };
        let best = field.params().clone();
        Self::with_state(field, best, state, sources, cfg, seed)
    }

    /// Continues from a saved state; `best` is the best model seen so far.
    pub fn with_state(
        field: DescriptorField,
        best: DescriptorFieldParams,
        state: TrainState,
        sources: &[Scene],
        cfg: TrainConfig,
        seed: u64,
    ) -> Result<Self> {
        if sources.is_empty() {
            return Err(Error::invalid("training needs at least one source scene"));
        }
        if cfg.batch_size == 0 || cfg.triplets == 0 || cfg.validation_pairs == 0 {
            return Err(Error::invalid("batch size, triplet count and validation pairs must be positive"));
        }
        state.current.validate(field.config())?;
        best.validate(field.config())?;
        for s in sources {
            s.validate_labels(field.config().num_classes)?;
        }
        let pool = ObjectPool::from_scenes(sources);
        let triplets = (0..cfg.triplets as u64)
            .into_par_iter()
            .map(|i| Ok(PreparedTriplet::new(training_triplet(sources, &pool, &cfg, seed, i)?, &field)))
            .collect::<Result<Vec<_>>>()?;
        let mut rng = stream(seed, "validation", 0);
        let record = generate_triplet(sources, 0, &pool, cfg.top_k, cfg.noise, cfg.sampling, &mut rng)?;
        let validation = PreparedTriplet::new(record, &field);
        let mut rng = stream(seed, "validation-pairs", 0);
        let validation_pairs = (0..cfg.validation_pairs)
            .map(|_| validation.pairs[rng.gen_range(0..validation.pairs.len())])
            .collect();
        let mut field = field;
        *field.params_mut() = state.current.clone();
        Ok(Trainer {
            cfg,
            seed,
            field,
            best,
            state,
            triplets,
            validation,
            validation_pairs,
        })
    }

    pub fn validation_loss(&self, params: &DescriptorFieldParams) -> Result<f64> {
        let f = DescriptorField::new(self.field.config().clone(), params.clone())?;
        self.validation.loss(&f, &self.validation_pairs, self.cfg.tau)
    }

    fn validate_now(&mut self, train_loss: Option<f64>) -> Result<()> {
        let v = self.validation.loss(&self.field, &self.validation_pairs, self.cfg.tau)?;
        if v < self.state.best_val {
            self.state.best_val = v;
            self.best = self.field.params().clone();
        }
        self.state.log.rows.push(LogRow {
            step: self.state.step,
            train_loss,
            val_loss: Some(v),
            best_val: self.state.best_val,
        });
        Ok(())
    }

    /// One optimizer step; returns the batch loss.
    pub fn step(&mut self) -> Result<f64> {
        if self.state.step == 0 && self.state.log.rows.is_empty() {
            self.validate_now(None)?;
        }
        let mut rng = stream(self.seed, "step", self.state.step);
        let t = &self.triplets[rng.gen_range(0..self.triplets.len())];
        let batch: Vec<(Vec3, Vec3)> = (0..self.cfg.batch_size)
            .map(|_| t.pairs[rng.gen_range(0..t.pairs.len())])
            .collect();
        let (loss, grads) = batch_loss_and_grad(&self.field, t, &batch, self.cfg.tau)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss at step {}", self.state.step)));
        }
        let mut params = self.field.params().to_vec();
        self.state.adam.step(&mut params, &grads)?;
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite(format!("parameters after step {}", self.state.step)));
        }
        self.field.params_mut().set_from_vec(params)?;
        self.state.current = self.field.params().clone();
        self.state.step += 1;
        if self.state.step % self.cfg.validation_every.max(1) == 0 || self.state.step == self.cfg.steps {
            self.validate_now(Some(loss))?;
        }
        Ok(loss)
    }

    /// Runs until `cfg.steps` steps have been taken.
    pub fn run(&mut self) -> Result<()> {
        while self.state.step < self.cfg.steps {
            self.step()?;
        }
        Ok(())
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn best(&self) -> &DescriptorFieldParams {
        &self.best
    }

    pub fn triplets(&self) -> &[PreparedTriplet] {
        &self.triplets
    }

    /// The best-validation field and the resumable state.
    pub fn finish(self) -> Result<(DescriptorField, TrainState)> {
        let field = DescriptorField::new(self.field.config().clone(), self.best)?;
        Ok((field, self.state))
    }
}

/// The `index`-th training triplet of a run seeded with `seed`; the trainer
/// builds exactly these.
pub fn training_triplet(
    sources: &[Scene],
    pool: &ObjectPool,
    cfg: &TrainConfig,
    seed: u64,
    index: u64,
) -> Result<TripletRecord> {
    let mut rng = stream(seed, "triplet", index);
    let source = index as usize % sources.len();
    generate_triplet(sources, source, pool, cfg.top_k, cfg.noise, cfg.sampling, &mut rng)
}

/// Trains `field` on triplets built from `sources` and returns the
/// parameters with the lowest validation loss seen, the initialization
/// included.
pub fn train_field(
    field: DescriptorField,
    sources: &[Scene],
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<(DescriptorField, TrainState)> {
    if cfg.steps == 0 {
        let adam = AdamState::new(&field.params().to_vec(), cfg.lr);
        let state = TrainState {
            step: 0,
            current: field.params().clone(),
            adam,
            best_val: f64::INFINITY,
            log: TrainLog::default(),
        };
        return Ok((field, state));
    }
    let seed: u64 = rng.gen();
    let mut trainer = Trainer::new(field, sources, cfg.clone(), seed)?;
    trainer.run()?;
    trainer.finish()
}

/// Fraction of query pairs where the anchor is more similar to the positive
/// than to the negative descriptor, and the mean similarities.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Discrimination {
    pub fraction: f64,
    pub mean_positive: f64,
    pub mean_negative: f64,
    pub count: usize,
}

pub fn discrimination(field: &DescriptorField, triplets: &[(PreparedTriplet, Vec<(Vec3, Vec3)>)]) -> Result<Discrimination> {
    let (mut wins, mut count, mut sp, mut sn) = (0usize, 0usize, 0.0, 0.0);
    for (t, pairs) in triplets {
        let (a, p, n) = t.descriptors(field, pairs)?;
        for i in 0..a.len() {
            let (dp, dn) = (a[i].dot(&p[i]), a[i].dot(&n[i]));
            sp += dp;
            sn += dn;
            wins += (dp > dn) as usize;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::invalid("no query pairs to measure"));
    }
    Ok(Discrimination {
        fraction: wins as f64 / count as f64,
        mean_positive: sp / count as f64,
        mean_negative: sn / count as f64,
        count,
    })
}
