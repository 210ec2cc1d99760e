//! File formats. Structured files are JSON with shortest round-trip float
//! formatting, so write, read, write is byte-identical. Checkpoints are a
//! JSON header followed by a little-endian f64 weight blob.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::evaluation::EvalPair;
use crate::field::{DescriptorField, DescriptorFieldParams, FieldConfig};
use crate::geometry::{from_array, to_array, Vec3};
use crate::map_estimation::{MapConfig, MapResult};
use crate::numeric::{AdamState, Tensor};
use crate::scene::{ObjectInstance, RegionOfInterest, Scene, SemanticLabel};
use crate::training::{TrainConfig, TrainLog, TrainState, TripletRecord};

fn format_err(path: &Path, detail: impl std::fmt::Display) -> Error {
    Error::Format {
        path: path.display().to_string(),
        detail: detail.to_string(),
    }
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string(value).expect("serializable");
    s.push('\n');
    s
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, to_json(value))?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| format_err(path, e))
}

fn points_to_arrays(p: &[Vec3]) -> Vec<[f64; 3]> {
    p.iter().map(to_array).collect()
}

fn arrays_to_points(a: &[[f64; 3]]) -> Vec<Vec3> {
    a.iter().copied().map(from_array).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectFile {
    pub id: u32,
    pub label: u16,
    pub points: Vec<[f64; 3]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneFile {
    pub objects: Vec<ObjectFile>,
    pub corners: Vec<[f64; 3]>,
}

impl From<&ObjectInstance> for ObjectFile {
    fn from(o: &ObjectInstance) -> Self {
        ObjectFile {
            id: o.id(),
            label: o.label().id(),
            points: points_to_arrays(o.points()),
        }
    }
}

impl ObjectFile {
    pub fn to_object(&self) -> Result<ObjectInstance> {
        ObjectInstance::new(self.id, SemanticLabel::new(self.label)?, arrays_to_points(&self.points))
    }
}

impl From<&Scene> for SceneFile {
    fn from(s: &Scene) -> Self {
        SceneFile {
            objects: s.objects().iter().map(ObjectFile::from).collect(),
            corners: points_to_arrays(s.corners()),
        }
    }
}

impl SceneFile {
    pub fn to_scene(&self) -> Result<Scene> {
        let objects = self.objects.iter().map(ObjectFile::to_object).collect::<Result<_>>()?;
        Scene::new(objects, arrays_to_points(&self.corners))
    }
}

pub fn write_scene(path: &Path, scene: &Scene) -> Result<()> {
    write_json(path, &SceneFile::from(scene))
}

pub fn read_scene(path: &Path) -> Result<Scene> {
    read_json::<SceneFile>(path)?.to_scene().map_err(|e| format_err(path, e))
}

pub fn write_objects(path: &Path, objects: &[ObjectInstance]) -> Result<()> {
    write_json(path, &objects.iter().map(ObjectFile::from).collect::<Vec<_>>())
}

pub fn read_objects(path: &Path) -> Result<Vec<ObjectInstance>> {
    read_json::<Vec<ObjectFile>>(path)?
        .iter()
        .map(ObjectFile::to_object)
        .collect::<Result<_>>()
        .map_err(|e| format_err(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoiFile {
    pub object_ids: Vec<u32>,
    pub points: Vec<[f64; 3]>,
    pub point_objects: Vec<u32>,
}

impl From<&RegionOfInterest> for RoiFile {
    fn from(r: &RegionOfInterest) -> Self {
        RoiFile {
            object_ids: r.object_ids().to_vec(),
            points: points_to_arrays(r.points()),
            point_objects: r.point_objects().to_vec(),
        }
    }
}

impl RoiFile {
    pub fn to_roi(&self) -> Result<RegionOfInterest> {
        RegionOfInterest::new(self.object_ids.clone(), arrays_to_points(&self.points), self.point_objects.clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPairFile {
    pub target: SceneFile,
    pub reference: SceneFile,
    pub roi: RoiFile,
    pub gt_points: Option<Vec<[f64; 3]>>,
}

impl From<&EvalPair> for EvalPairFile {
    fn from(p: &EvalPair) -> Self {
        EvalPairFile {
            target: SceneFile::from(&p.target),
            reference: SceneFile::from(&p.reference),
            roi: RoiFile::from(&p.roi),
            gt_points: p.gt_points.as_deref().map(points_to_arrays),
        }
    }
}

impl EvalPairFile {
    pub fn to_pair(&self) -> Result<EvalPair> {
        EvalPair::new(
            self.target.to_scene()?,
            self.reference.to_scene()?,
            self.roi.to_roi()?,
            self.gt_points.as_deref().map(arrays_to_points),
        )
    }
}

pub fn write_eval_pair(path: &Path, pair: &EvalPair) -> Result<()> {
    write_json(path, &EvalPairFile::from(pair))
}

pub fn read_eval_pair(path: &Path) -> Result<EvalPair> {
    read_json::<EvalPairFile>(path)?.to_pair().map_err(|e| format_err(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TripletFile {
    pub source: SceneFile,
    pub positive: SceneFile,
    pub negative: SceneFile,
    pub query_pairs: Vec<Vec<[[f64; 3]; 2]>>,
}

impl From<&TripletRecord> for TripletFile {
    fn from(t: &TripletRecord) -> Self {
        TripletFile {
            source: SceneFile::from(&t.source),
            positive: SceneFile::from(&t.positive),
            negative: SceneFile::from(&t.negative),
            query_pairs: t
                .query_pairs
                .iter()
                .map(|v| v.iter().map(|(a, b)| [to_array(a), to_array(b)]).collect())
                .collect(),
        }
    }
}

impl TripletFile {
    pub fn to_record(&self) -> Result<TripletRecord> {
        Ok(TripletRecord {
            source: self.source.to_scene()?,
            positive: self.positive.to_scene()?,
            negative: self.negative.to_scene()?,
            query_pairs: self
                .query_pairs
                .iter()
                .map(|v| v.iter().map(|[a, b]| (from_array(*a), from_array(*b))).collect())
                .collect(),
        })
    }
}

/// Result of a map estimation together with everything needed to check it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapFile {
    pub result: MapResult,
    pub constants: MapConfig,
    pub roi: RoiFile,
    /// RoI points under the map; empty when unmappable.
    pub warped_points: Vec<[f64; 3]>,
}

impl MapFile {
    pub fn new(result: MapResult, constants: MapConfig, roi: &RegionOfInterest) -> Self {
        let warped_points = result
            .map()
            .map(|m| points_to_arrays(&m.apply_all(roi.points())))
            .unwrap_or_default();
        MapFile {
            result,
            constants,
            roi: RoiFile::from(roi),
            warped_points,
        }
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"SCANCKPT";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TrainingHeader {
    seed: u64,
    config: TrainConfig,
    step: u64,
    best_val: Option<f64>,
    log: TrainLog,
    adam_step: u64,
    adam_lr: f64,
    adam_beta1: f64,
    adam_beta2: f64,
    adam_eps: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    field: FieldConfig,
    tensors: Vec<TensorEntry>,
    training: Option<TrainingHeader>,
}

/// Optimizer progress saved alongside the weights.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingProgress {
    pub seed: u64,
    pub config: TrainConfig,
    pub state: TrainState,
}

/// Best weights of a field and, for unfinished runs, the state to resume
/// from. The blob holds the best tensors in name order, then for resumable
/// checkpoints the current tensors and both Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub field: DescriptorField,
    pub training: Option<TrainingProgress>,
}

fn push_tensors(blob: &mut Vec<u8>, tensors: &[Tensor]) {
    for t in tensors {
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct BlobReader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl BlobReader<'_> {
    fn tensors(&mut self, entries: &[TensorEntry]) -> Result<Vec<Tensor>> {
        entries
            .iter()
            .map(|e| {
                let n: usize = e.shape.iter().product();
                let end = self.at + 8 * n;
                let chunk = self
                    .bytes
                    .get(self.at..end)
                    .ok_or_else(|| Error::Checkpoint(format!("weight blob ends inside `{}`", e.name)))?;
                self.at = end;
                let data = chunk
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect();
                Tensor::new(e.shape.clone(), data)
            })
            .collect()
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let cfg = self.field.config().clone();
        let tensors: Vec<TensorEntry> = self
            .field
            .params()
            .iter()
            .map(|(n, t)| TensorEntry {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect();
        let training = self.training.as_ref().map(|p| TrainingHeader {
            seed: p.seed,
            config: p.config.clone(),
            step: p.state.step,
            best_val: p.state.best_val.is_finite().then_some(p.state.best_val),
            log: p.state.log.clone(),
            adam_step: p.state.adam.step,
            adam_lr: p.state.adam.lr,
            adam_beta1: p.state.adam.beta1,
            adam_beta2: p.state.adam.beta2,
            adam_eps: p.state.adam.eps,
        });
        let header = CheckpointHeader {
            version: CHECKPOINT_VERSION,
            field: cfg,
            tensors,
            training,
        };
        let head = serde_json::to_vec(&header).expect("serializable");
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(head.len() as u32).to_le_bytes());
        out.extend_from_slice(&head);
        push_tensors(&mut out, &self.field.params().to_vec());
        if let Some(p) = &self.training {
            push_tensors(&mut out, &p.state.current.to_vec());
            let n = p.state.adam.num_slots();
            push_tensors(&mut out, &(0..n).map(|i| p.state.adam.first_moment(i)).collect::<Vec<_>>());
            push_tensors(&mut out, &(0..n).map(|i| p.state.adam.second_moment(i)).collect::<Vec<_>>());
        }
        out
    }

    /// Parses a checkpoint; when `expected` is given its field config must
    /// match the stored one exactly.
    pub fn from_bytes(bytes: &[u8], expected: Option<&FieldConfig>) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let head = bytes
            .get(12..12 + len)
            .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
        let header: CheckpointHeader =
            serde_json::from_slice(head).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        if header.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", header.version)));
        }
        if let Some(cfg) = expected {
            if *cfg != header.field {
                return Err(Error::Checkpoint(format!(
                    "field config mismatch: checkpoint {:?}, run {:?}",
                    header.field, cfg
                )));
            }
        }
        let mut blob = BlobReader {
            bytes: &bytes[12 + len..],
            at: 0,
        };
        let named = |ts: Vec<Tensor>| -> Result<DescriptorFieldParams> {
            let map: BTreeMap<String, Tensor> = header.tensors.iter().map(|e| e.name.clone()).zip(ts).collect();
            DescriptorFieldParams::from_tensors(&header.field, map).map_err(|e| Error::Checkpoint(e.to_string()))
        };
        let best = named(blob.tensors(&header.tensors)?)?;
        let field = DescriptorField::new(header.field.clone(), best)?;
        let training = match &header.training {
            None => None,
            Some(h) => {
                let current = named(blob.tensors(&header.tensors)?)?;
                let first = blob.tensors(&header.tensors)?;
                let second = blob.tensors(&header.tensors)?;
                let mut template = AdamState::new(&current.to_vec(), h.adam_lr);
                template.step = h.adam_step;
                template.beta1 = h.adam_beta1;
                template.beta2 = h.adam_beta2;
                template.eps = h.adam_eps;
                Some(TrainingProgress {
                    seed: h.seed,
                    config: h.config.clone(),
                    state: TrainState {
                        step: h.step,
                        current,
                        adam: AdamState::restore(template, first, second)?,
                        best_val: h.best_val.unwrap_or(f64::INFINITY),
                        log: h.log.clone(),
                    },
                })
            }
        };
        if blob.at != blob.bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", blob.bytes.len() - blob.at)));
        }
        Ok(Checkpoint { field, training })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path, expected: Option<&FieldConfig>) -> Result<Self> {
        Checkpoint::from_bytes(&fs::read(path)?, expected)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Path relative to the manifest's directory, `/`-separated.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    /// Entries for `files` under `root`, sorted by path.
    pub fn build(root: &Path, files: &[PathBuf]) -> Result<Self> {
        let mut entries = files
            .iter()
            .map(|f| {
                let bytes = fs::read(root.join(f))?;
                Ok(ManifestEntry {
                    path: f.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/"),
                    sha256: sha256_hex(&bytes),
                    bytes: bytes.len() as u64,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        entries.sort_by(|a, b| a.path.cmp(&b.path));
        Ok(Manifest { entries })
    }

    /// Paths whose content no longer matches the recorded hash.
    pub fn verify(&self, root: &Path) -> Result<Vec<String>> {
        let mut bad = Vec::new();
        for e in &self.entries {
            match fs::read(root.join(&e.path)) {
                Ok(b) if sha256_hex(&b) == e.sha256 => {}
                _ => bad.push(e.path.clone()),
            }
        }
        Ok(bad)
    }

    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a ManifestEntry> + 'a {
        self.entries.iter().filter(move |e| e.path.starts_with(prefix))
    }
}
