//! Command-line front end. Every command is a deterministic function of its
//! configuration, seed and input files.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::seq::SliceRandom;

use crate::config::{Ablation, Profile, RunConfig};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_pairs, generate_eval_pair, generate_unmatchable_pair, EvalPair};
use crate::field::{field_distance_grid, DescriptorField};
use crate::geometry::Vec3;
use crate::io::{
    read_eval_pair, read_json, read_objects, read_scene, write_eval_pair, write_json, write_objects, write_scene,
    Checkpoint, Manifest, MapFile, TrainingProgress, TripletFile,
};
use crate::map_estimation::{estimate_map, top_k_maps, MapResult, SceneMap};
use crate::procedural::generate_scene;
use crate::rng::stream;
use crate::scene::{build_occupancy_grid, sample_roi, RegionOfInterest, Scene};
use crate::training::{training_triplet, ObjectPool, Trainer};
use crate::transfer::{
    assign_waypoint, long_trajectory_transfer, multi_roi_align, object_placement_transfer, short_trajectory_transfer,
    Alignment, LongTransfer, Trajectory, TrajectorySamples,
};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Parser)]
#[command(name = "scene-analogy", version, about = "Dense maps between analogous regions of 3D scenes")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Overrides the configuration's seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// TOML file overriding the profile's values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Base configuration.
    #[arg(long, global = true, default_value = "paper")]
    pub profile: String,
    /// Worker threads; defaults to rayon's choice.
    #[arg(long, global = true, env = "SCENE_ANALOGY_THREADS")]
    pub threads: Option<usize>,
    /// Disable a pipeline component. Repeatable.
    #[arg(long, global = true, value_name = "semantic|distance|displacement")]
    pub ablate: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TransferMode {
    ShortTraj,
    LongTraj,
    Placement,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate training scenes, triplets and evaluation pairs.
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a descriptor field on a generated dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Write the loss log as TSV.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Estimate the map from a target RoI into a reference scene.
    Estimate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        /// Comma-separated target object ids; all objects when omitted.
        #[arg(long)]
        roi: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score every evaluation pair of a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory holding a manifest.
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Move a trajectory or objects from the target into the reference.
    Transfer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long, value_enum)]
        mode: TransferMode,
        /// Trajectory file, or an object list for placement.
        #[arg(long)]
        input: PathBuf,
        /// Comma-separated object ids of one RoI. Repeat for several RoIs.
        #[arg(long)]
        roi: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        /// Also export field distances from this target point, as `x,y,z`.
        #[arg(long)]
        heatmap_query: Option<String>,
        #[arg(long, default_value_t = 0.25)]
        heatmap_resolution: f64,
        #[arg(long)]
        heatmap_out: Option<PathBuf>,
    },
}

/// Profile, TOML overrides, seed and ablations resolved into one config.
pub fn resolve_config(common: &Common) -> Result<RunConfig> {
    let base = RunConfig::profile(common.profile.parse::<Profile>()?);
    let mut cfg = match &common.config {
        Some(p) => RunConfig::overlay_toml(&base, &fs::read_to_string(p)?)?,
        None => base,
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    for a in &common.ablate {
        cfg.apply(a.parse::<Ablation>()?);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_ids(s: &str) -> Result<Vec<u32>> {
    s.split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|t| t.trim().parse().map_err(|_| Error::invalid(format!("bad object id `{t}`"))))
        .collect()
}

fn parse_point(s: &str) -> Result<Vec3> {
    let v: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse().map_err(|_| Error::invalid(format!("bad coordinate `{t}`"))))
        .collect::<Result<_>>()?;
    match v.as_slice() {
        [x, y, z] => Ok(Vec3::new(*x, *y, *z)),
        _ => Err(Error::invalid(format!("expected x,y,z, got `{s}`"))),
    }
}

fn roi_for(scene: &Scene, spec: Option<&str>, cfg: &RunConfig) -> Result<RegionOfInterest> {
    let ids = match spec {
        Some(s) => parse_ids(s)?,
        None => scene.object_ids(),
    };
    if ids.is_empty() {
        return Err(Error::invalid("RoI names no objects"));
    }
    sample_roi(scene, &ids, cfg.pairs.roi_points_per_object)
}

fn load_field(path: &Path, cfg: &RunConfig) -> Result<DescriptorField> {
    Ok(Checkpoint::load(path, Some(&cfg.field))?.field)
}

/// Paths written so far, relative to the output root.
struct Written {
    root: PathBuf,
    files: Vec<PathBuf>,
}

impl Written {
    fn path(&mut self, rel: String) -> PathBuf {
        let rel = PathBuf::from(rel);
        let abs = self.root.join(&rel);
        self.files.push(rel);
        abs
    }
}

pub const TRAIN_SPLIT: &str = "train-scene";
pub const EVAL_SPLIT: &str = "eval-scene";

/// The first `n` scenes of a dataset split, each from its own stream.
pub fn dataset_scenes(cfg: &RunConfig, split: &str, n: usize) -> Result<Vec<Scene>> {
    (0..n as u64).map(|i| generate_scene(&cfg.generator, &mut stream(cfg.seed, split, i))).collect()
}

pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<Manifest> {
    fs::create_dir_all(out)?;
    let mut w = Written {
        root: out.to_path_buf(),
        files: Vec::new(),
    };
    let fs_cfg = cfg.to_toml();
    fs::write(w.path("config.toml".into()), fs_cfg)?;
    let train = dataset_scenes(cfg, TRAIN_SPLIT, cfg.dataset.train_scenes)?;
    let eval = dataset_scenes(cfg, EVAL_SPLIT, cfg.dataset.eval_scenes)?;
    for (i, s) in train.iter().enumerate() {
        write_scene(&w.path(format!("scenes/train/{i:05}.json")), s)?;
    }
    for (i, s) in eval.iter().enumerate() {
        write_scene(&w.path(format!("scenes/eval/{i:05}.json")), s)?;
    }
    let pool = ObjectPool::from_scenes(&train);
    for i in 0..cfg.train.triplets {
        let t = training_triplet(&train, &pool, &cfg.train, cfg.seed, i as u64)?;
        write_json(&w.path(format!("triplets/{i:05}.json")), &TripletFile::from(&t))?;
    }
    for i in 0..cfg.dataset.eval_pairs {
        let scene = &eval[i % eval.len()];
        let p = generate_eval_pair(scene, &eval, &cfg.pairs, &mut stream(cfg.seed, "eval-pair", i as u64))?;
        write_eval_pair(&w.path(format!("pairs/matchable_{i:05}.json")), &p)?;
    }
    for i in 0..cfg.dataset.unmatchable_pairs {
        let scene = &eval[i % eval.len()];
        let p = generate_unmatchable_pair(scene, &eval, &cfg.pairs, &mut stream(cfg.seed, "unmatchable-pair", i as u64))?;
        write_eval_pair(&w.path(format!("pairs/unmatchable_{i:05}.json")), &p)?;
    }
    let manifest = Manifest::build(out, &w.files)?;
    write_json(&out.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

fn dataset_files(dir: &Path, prefix: &str) -> Result<Vec<PathBuf>> {
    let manifest: Manifest = read_json(&dir.join(MANIFEST))?;
    let bad = manifest.verify(dir)?;
    if !bad.is_empty() {
        return Err(Error::invalid(format!("dataset files changed since generation: {}", bad.join(", "))));
    }
    Ok(manifest.with_prefix(prefix).map(|e| dir.join(&e.path)).collect())
}

pub fn train(cfg: &RunConfig, data: &Path, out: &Path, resume: Option<&Path>) -> Result<Checkpoint> {
    let sources = dataset_files(data, "scenes/train/")?
        .iter()
        .map(|p| read_scene(p))
        .collect::<Result<Vec<_>>>()?;
    let mut trainer = match resume {
        None => {
            let field = DescriptorField::init(cfg.field.clone(), &mut stream(cfg.seed, "field-init", 0))?;
            Trainer::new(field, &sources, cfg.train.clone(), cfg.seed)?
        }
        Some(p) => {
            let ck = Checkpoint::load(p, Some(&cfg.field))?;
            let progress = ck
                .training
                .ok_or_else(|| Error::Checkpoint("checkpoint holds no training state".into()))?;
            if progress.seed != cfg.seed {
                return Err(Error::Checkpoint(format!("checkpoint seed {} differs from run seed {}", progress.seed, cfg.seed)));
            }
            let best = ck.field.params().clone();
            Trainer::with_state(ck.field, best, progress.state, &sources, cfg.train.clone(), cfg.seed)?
        }
    };
    while trainer.state().step < cfg.train.steps {
        let loss = trainer.step()?;
        let step = trainer.state().step;
        if step % cfg.train.validation_every == 0 {
            log::info!("step {step}: batch loss {loss:.5}, best validation {:.5}", trainer.state().best_val);
        }
    }
    let (field, state) = trainer.finish()?;
    let ck = Checkpoint {
        field,
        training: Some(TrainingProgress {
            seed: cfg.seed,
            config: cfg.train.clone(),
            state,
        }),
    };
    ck.save(out)?;
    Ok(ck)
}

pub fn estimate(cfg: &RunConfig, checkpoint: &Path, target: &Path, reference: &Path, roi: Option<&str>, out: &Path) -> Result<MapFile> {
    let field = load_field(checkpoint, cfg)?;
    let (t, r) = (read_scene(target)?, read_scene(reference)?);
    let roi = roi_for(&t, roi, cfg)?;
    let result = estimate_map(&t, &r, &roi, &field, &cfg.map)?;
    let file = MapFile::new(result, cfg.map.clone(), &roi);
    write_json(out, &file)?;
    Ok(file)
}

pub fn read_pairs(dir: &Path) -> Result<Vec<EvalPair>> {
    dataset_files(dir, "pairs/")?.iter().map(|p| read_eval_pair(p)).collect()
}

pub fn eval(cfg: &RunConfig, checkpoint: &Path, pairs: &Path, out: &Path) -> Result<crate::evaluation::MetricReport> {
    let field = load_field(checkpoint, cfg)?;
    let pairs = read_pairs(pairs)?;
    let report = evaluate_pairs(&pairs, &field, &cfg.map, &cfg.thresholds)?;
    write_json(out, &report)?;
    Ok(report)
}

fn require_map(result: MapResult) -> Result<SceneMap> {
    match result {
        MapResult::Mapped(m) => Ok(m),
        MapResult::Unmappable(u) => Err(Error::invalid(format!(
            "target RoI has no analogy in the reference ({:?}, best cost {:?})",
            u.reason, u.best_cost
        ))),
    }
}

/// Long-trajectory output with the chosen per-RoI maps.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LongTransferFile {
    pub alignment: Alignment,
    pub maps: Vec<SceneMap>,
    pub transfer: LongTransfer,
}

#[allow(clippy::too_many_arguments)]
pub fn transfer(
    cfg: &RunConfig,
    checkpoint: &Path,
    target: &Path,
    reference: &Path,
    mode: TransferMode,
    input: &Path,
    rois: &[String],
    out: &Path,
) -> Result<()> {
    let field = load_field(checkpoint, cfg)?;
    let (t, r) = (read_scene(target)?, read_scene(reference)?);
    match mode {
        TransferMode::ShortTraj | TransferMode::Placement => {
            if rois.len() > 1 {
                return Err(Error::invalid("this mode takes a single RoI"));
            }
            let roi = roi_for(&t, rois.first().map(String::as_str), cfg)?;
            let map = require_map(estimate_map(&t, &r, &roi, &field, &cfg.map)?)?;
            if mode == TransferMode::ShortTraj {
                let traj: Trajectory = read_json(input)?;
                write_json(out, &short_trajectory_transfer(&map, &traj)?)
            } else {
                let items = read_objects(input)?;
                write_objects(out, &object_placement_transfer(&map, &items)?)
            }
        }
        TransferMode::LongTraj => {
            let traj: Trajectory = read_json(input)?;
            let TrajectorySamples::Points(points) = traj.samples() else {
                return Err(Error::invalid("long trajectories are point sequences"));
            };
            let specs: Vec<Option<&str>> = if rois.is_empty() { vec![None] } else { rois.iter().map(|s| Some(s.as_str())).collect() };
            let rois = specs.iter().map(|s| roi_for(&t, *s, cfg)).collect::<Result<Vec<_>>>()?;
            let candidates = rois
                .iter()
                .map(|roi| top_k_maps(&t, &r, roi, &field, &cfg.map, cfg.transfer.candidates))
                .collect::<Result<Vec<_>>>()?;
            if let Some(i) = candidates.iter().position(Vec::is_empty) {
                return Err(Error::invalid(format!("RoI {i} has no analogy in the reference")));
            }
            let mut rng = stream(cfg.seed, "isometry", 0);
            let mut owners: Vec<(usize, Vec3)> = rois
                .iter()
                .enumerate()
                .flat_map(|(i, roi)| roi.points().iter().map(move |p| (i, *p)))
                .collect();
            owners.shuffle(&mut rng);
            owners.truncate(cfg.transfer.isometry_points);
            let mut samples = vec![Vec::new(); rois.len()];
            for (i, p) in owners {
                samples[i].push(p);
            }
            let alignment = multi_roi_align(&candidates, &samples, cfg.transfer.align_sweeps, &mut rng)?;
            let maps: Vec<SceneMap> = alignment.choice.iter().zip(&candidates).map(|(&c, m)| m[c].clone()).collect();
            let roi_points: Vec<&[Vec3]> = rois.iter().map(|r| r.points()).collect();
            let waypoints: Vec<(usize, Vec3)> = points
                .iter()
                .map(|p| (assign_waypoint(p, &roi_points).expect("non-empty RoIs"), *p))
                .collect();
            let grid = build_occupancy_grid(&r, cfg.transfer.cell_size)?;
            let transfer = long_trajectory_transfer(&maps, &waypoints, &grid)?;
            write_json(out, &LongTransferFile { alignment, maps, transfer })
        }
    }
}

pub fn heatmap(cfg: &RunConfig, checkpoint: &Path, target: &Path, reference: &Path, query: &str, resolution: f64, out: &Path) -> Result<()> {
    let field = load_field(checkpoint, cfg)?;
    let (t, r) = (read_scene(target)?, read_scene(reference)?);
    let (ct, cr) = (field.context(&t), field.context(&r));
    let grid = field_distance_grid(&field, &ct, &parse_point(query)?, &r, &cr, resolution)?;
    write_json(out, &grid)
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = resolve_config(&cli.common)?;
    if let Some(n) = cli.common.threads {
        // A pool may already exist when called twice in one process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match cli.command {
        Command::GenData { out } => {
            let m = gen_data(&cfg, &out)?;
            log::info!("wrote {} files", m.entries.len());
        }
        Command::Train { data, out, resume, log } => {
            let ck = train(&cfg, &data, &out, resume.as_deref())?;
            if let (Some(path), Some(p)) = (log, &ck.training) {
                fs::write(path, p.state.log.to_tsv())?;
            }
        }
        Command::Estimate {
            checkpoint,
            target,
            reference,
            roi,
            out,
        } => {
            let f = estimate(&cfg, &checkpoint, &target, &reference, roi.as_deref(), &out)?;
            match &f.result {
                MapResult::Mapped(m) => log::info!("mapped with cost {:.4}", m.cost),
                MapResult::Unmappable(u) => log::info!("unmappable: {:?}", u.reason),
            }
        }
        Command::Eval { checkpoint, pairs, out } => {
            let r = eval(&cfg, &checkpoint, &pairs, &out)?;
            log::info!("PCP {:?}, Bi-PCP {:?}, chamfer accuracy {:?}", r.pcp, r.bi_pcp, r.chamfer_acc);
        }
        Command::Transfer {
            checkpoint,
            target,
            reference,
            mode,
            input,
            roi,
            out,
            heatmap_query,
            heatmap_resolution,
            heatmap_out,
        } => {
            transfer(&cfg, &checkpoint, &target, &reference, mode, &input, &roi, &out)?;
            match (heatmap_query, heatmap_out) {
                (Some(q), Some(o)) => heatmap(&cfg, &checkpoint, &target, &reference, &q, heatmap_resolution, &o)?,
                (None, None) => {}
                _ => return Err(Error::invalid("--heatmap-query and --heatmap-out go together")),
            }
        }
    }
    Ok(())
}

/// Parses `args` and runs; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
