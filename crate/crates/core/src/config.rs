//! Run configuration: every constant a command uses, loadable from TOML on
//! top of a named profile.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{PairConfig, Thresholds};
use crate::field::FieldConfig;
use crate::map_estimation::{MapConfig, N_ORTHO};
use crate::procedural::{GeneratorConfig, NUM_CLASSES};
use crate::training::{QuerySampling, TrainConfig};
use crate::transfer::{DEFAULT_ALIGN_SWEEPS, DEFAULT_ISOMETRY_POINTS};

/// Sizes of the generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub train_scenes: usize,
    pub eval_scenes: usize,
    pub eval_pairs: usize,
    pub unmatchable_pairs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferConfig {
    pub isometry_points: usize,
    pub align_sweeps: usize,
    /// Occupancy cell size of the reference planning grid, meters.
    pub cell_size: f64,
    /// Candidate maps kept per RoI for multi-RoI alignment.
    pub candidates: usize,
}

impl Default for TransferConfig {
    fn default() -> Self {
        TransferConfig {
            isometry_points: DEFAULT_ISOMETRY_POINTS,
            align_sweeps: DEFAULT_ALIGN_SWEEPS,
            cell_size: 0.1,
            candidates: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    /// Orthogonal transforms tried per coarse centroid pairing. Fixed by the
    /// planar pool construction; recorded so runs document it.
    pub n_ortho: usize,
    pub field: FieldConfig,
    pub generator: GeneratorConfig,
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    pub map: MapConfig,
    pub pairs: PairConfig,
    pub thresholds: Thresholds,
    pub transfer: TransferConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ablation {
    Semantic,
    Distance,
    Displacement,
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "semantic" => Ok(Ablation::Semantic),
            "distance" => Ok(Ablation::Distance),
            "displacement" => Ok(Ablation::Displacement),
            other => Err(Error::invalid(format!("unknown ablation `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    Paper,
    Toy,
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Profile::Paper),
            "toy" => Ok(Profile::Toy),
            other => Err(Error::invalid(format!("unknown profile `{other}`"))),
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::paper()
    }
}

impl RunConfig {
    /// Published constants and architecture.
    pub fn paper() -> Self {
        RunConfig {
            seed: 0,
            n_ortho: N_ORTHO,
            field: FieldConfig::paper(NUM_CLASSES),
            generator: GeneratorConfig::default(),
            dataset: DatasetConfig {
                train_scenes: 1000,
                eval_scenes: 200,
                eval_pairs: 200,
                unmatchable_pairs: 20,
            },
            train: TrainConfig::default(),
            map: MapConfig::default(),
            pairs: PairConfig::default(),
            thresholds: Thresholds::default(),
            transfer: TransferConfig::default(),
        }
    }

    /// Small field and budgets that train and evaluate on one core in
    /// minutes. Map constants stay at their published values except for the
    /// working-set caps and early stopping.
    pub fn toy() -> Self {
        let mut c = RunConfig::paper();
        c.field = FieldConfig {
            d: 16,
            emb_dim: 8,
            model_dim: 16,
            layers: 2,
            heads: 2,
            ff_dim: 32,
            dist_hidden: 16,
            // Fewer keypoints keep each field query cheap enough for the
            // single-core map estimation budget.
            keypoints_per_object: 20,
            ..FieldConfig::paper(NUM_CLASSES)
        };
        c.generator.points_per_object = 400;
        c.dataset = DatasetConfig {
            train_scenes: 30,
            eval_scenes: 50,
            eval_pairs: 20,
            unmatchable_pairs: 20,
        };
        c.train = TrainConfig {
            lr: 3e-3,
            batch_size: 16,
            steps: 1500,
            triplets: 60,
            sampling: QuerySampling {
                grid_n: 5,
                surface_sigma: 0.02,
            },
            validation_every: 100,
            validation_pairs: 128,
            ..TrainConfig::default()
        };
        c.map.coarse_points = Some(48);
        c.map.refine_points = Some(64);
        c.map.affine.steps = 100;
        c.map.affine.lr = 2e-3;
        c.map.affine.patience = Some(15);
        c.map.displacement.steps = 100;
        c.map.displacement.lr = 3e-3;
        c.map.displacement.patience = Some(15);
        c.map.affine.tol = 1e-6;
        c.map.displacement.tol = 1e-6;
        c.pairs.global_shift = Some(0.5);
        c
    }

    pub fn profile(p: Profile) -> Self {
        match p {
            Profile::Paper => RunConfig::paper(),
            Profile::Toy => RunConfig::toy(),
        }
    }

    /// `text` as TOML overriding any subset of `base`.
    pub fn overlay_toml(base: &RunConfig, text: &str) -> Result<Self> {
        let user: toml::Table = toml::from_str(text).map_err(|e| Error::invalid(format!("config: {e}")))?;
        let mut merged = toml::Table::try_from(base).map_err(|e| Error::invalid(format!("config: {e}")))?;
        merge(&mut merged, user);
        let cfg: RunConfig = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| Error::invalid(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn apply(&mut self, ablation: Ablation) {
        match ablation {
            Ablation::Semantic => self.field.use_semantic = false,
            Ablation::Distance => self.field.use_distance = false,
            Ablation::Displacement => self.map.use_displacement = false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        // TOML integers are signed 64-bit.
        if self.seed > i64::MAX as u64 {
            return Err(Error::invalid(format!("seed must be at most {}", i64::MAX)));
        }
        self.field.validate()?;
        self.map.validate()?;
        if self.n_ortho != N_ORTHO {
            return Err(Error::invalid(format!("n_ortho is fixed at {N_ORTHO}")));
        }
        let t = &self.train;
        if !(t.lr > 0.0) || !(t.tau > 0.0) || t.batch_size == 0 || t.triplets == 0 || t.top_k == 0 {
            return Err(Error::invalid("training constants must be positive"));
        }
        if t.validation_every == 0 || t.validation_pairs == 0 || t.sampling.grid_n == 0 {
            return Err(Error::invalid("validation and sampling sizes must be positive"));
        }
        let g = &self.generator;
        if g.min_objects == 0 || g.min_objects > g.max_objects || g.points_per_object == 0 {
            return Err(Error::invalid("generator object counts must be positive and ordered"));
        }
        if self.dataset.train_scenes == 0 || self.dataset.eval_scenes == 0 {
            return Err(Error::invalid("dataset needs training and evaluation scenes"));
        }
        if self.pairs.roi_points_per_object == 0 || !(self.pairs.cell_size > 0.0) {
            return Err(Error::invalid("pair constants must be positive"));
        }
        let th = self.thresholds.pcp.iter().chain(&self.thresholds.chamfer);
        if th.clone().any(|a| !(*a > 0.0)) {
            return Err(Error::invalid("metric thresholds must be positive"));
        }
        let x = &self.transfer;
        if x.isometry_points == 0 || x.candidates == 0 || !(x.cell_size > 0.0) {
            return Err(Error::invalid("transfer constants must be positive"));
        }
        Ok(())
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
