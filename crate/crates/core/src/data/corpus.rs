//! Corpus layout on disk, manifest records and phase batches.
//!
//! Layout under the corpus root:
//!
//! ```text
//! corpus.json          build configuration and image size
//! basis.json           morphable basis used for every render
//! manifest.jsonl       one SampleRecord per line
//! <identity>/<pose>/{hq,lq,frontal}.png
//! ```

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use mdfr_autograd::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::render::{render_face, ToyIdentity};
use super::derive_seed;
use crate::degradation::{degrade, sample_spec_with, DegradationOverrides, DegradationSpec};
use crate::error::{invalid, Error, Result};
use crate::generator::heatmap_tensor;
use crate::geometry::{
    assemble_shape, encode_heatmaps, normalize_frontal, project, sample_keypoints, HeatmapStack, LandmarkSet,
    MorphableBasis, RigidParams, NUM_KEYPOINTS,
};
use crate::image::FaceImage;

/// Yaw angles (degrees) of the default corpus.
pub const DEFAULT_POSES: [f64; 7] = [-90.0, -60.0, -30.0, 0.0, 30.0, 60.0, 90.0];

/// Face scale as a fraction of the image side.
const FACE_SCALE: f64 = 0.3;
const ILLUM_RANGE: (f64, f64) = (0.85, 1.15);
const PITCH_ROLL_JITTER_DEG: f64 = 5.0;
const SCALE_JITTER: f64 = 0.03;
/// Translation jitter in pixels at 128×128, scaled with the image size.
const SHIFT_JITTER: f64 = 2.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub n_identities: usize,
    /// Yaw angles in degrees.
    pub poses: Vec<f64>,
    pub seed: u64,
    pub image_size: usize,
    pub basis_seed: u64,
    pub heatmap_sigma: f64,
    #[serde(default)]
    pub degradation: DegradationOverrides,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_identities: 32,
            poses: DEFAULT_POSES.to_vec(),
            seed: 0,
            image_size: 128,
            basis_seed: 0,
            heatmap_sigma: 2.0,
            degradation: DegradationOverrides::default(),
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_identities == 0 {
            return Err(invalid("corpus needs at least one identity"));
        }
        if self.poses.is_empty() {
            return Err(invalid("corpus needs at least one pose"));
        }
        if self.poses.iter().any(|p| !p.is_finite() || p.abs() > 90.0) {
            return Err(invalid(format!("poses must be yaw angles within ±90°, got {:?}", self.poses)));
        }
        let mut names: Vec<String> = self.poses.iter().map(|&p| pose_dir(p)).collect();
        names.sort();
        names.dedup();
        if names.len() != self.poses.len() {
            return Err(invalid("duplicate poses"));
        }
        if self.image_size < 32 || !self.image_size.is_multiple_of(32) {
            return Err(invalid(format!("image size must be a positive multiple of 32, got {}", self.image_size)));
        }
        if !(self.heatmap_sigma > 0.0) {
            return Err(invalid(format!("heatmap sigma must be positive, got {}", self.heatmap_sigma)));
        }
        if let Some(s) = self.degradation.blur_sigma {
            if !(s > 0.0 && s.is_finite()) {
                return Err(invalid(format!("blur sigma override must be positive, got {s}")));
            }
        }
        Ok(())
    }
}

/// Contents of `corpus.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusMeta {
    pub config: CorpusConfig,
    pub n_records: usize,
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub index: usize,
    pub identity: usize,
    pub identity_seed: u64,
    pub yaw: f64,
    pub rigid: RigidParams,
    pub illum: f64,
    pub hq: String,
    pub lq: String,
    pub frontal: String,
    pub landmarks_profile: LandmarkSet,
    pub landmarks_frontal: LandmarkSet,
    /// Flat key=value block of the degradation applied to `hq`.
    pub degradation: String,
}

impl SampleRecord {
    pub fn degradation_spec(&self) -> Result<DegradationSpec> {
        DegradationSpec::from_kv(&self.degradation)
    }
}

fn pose_dir(yaw: f64) -> String {
    format!("yaw{:+}", yaw + 0.0)
}

fn identity_dir(id: usize) -> String {
    format!("id{id:03}")
}

/// Frontal landmarks from the pose normalization of a record's shape and camera,
/// re-centred in the frame.
pub(crate) fn frontal_landmarks(
    basis: &MorphableBasis,
    identity: &ToyIdentity,
    rigid: &RigidParams,
    size: usize,
) -> Result<LandmarkSet> {
    let shape = assemble_shape(basis, &identity.coeffs);
    let c = size as f64 / 2.0;
    Ok(sample_keypoints(&normalize_frontal(&shape, rigid), basis)?.translated(c, c))
}

fn draw_rigid(rng: &mut ChaCha8Rng, yaw: f64, size: usize) -> Result<RigidParams> {
    let unit = size as f64 / 128.0;
    let scale = FACE_SCALE * size as f64 * (1.0 + rng.random_range(-SCALE_JITTER..=SCALE_JITTER));
    let pitch = rng.random_range(-PITCH_ROLL_JITTER_DEG..=PITCH_ROLL_JITTER_DEG);
    let roll = rng.random_range(-PITCH_ROLL_JITTER_DEG..=PITCH_ROLL_JITTER_DEG);
    let c = size as f64 / 2.0;
    let tx = c + unit * rng.random_range(-SHIFT_JITTER..=SHIFT_JITTER);
    let ty = c + unit * rng.random_range(-SHIFT_JITTER..=SHIFT_JITTER);
    RigidParams::from_angles(scale, yaw, pitch, roll, [tx, ty])
}

/// Renders, degrades and writes every identity × pose sample; returns the opened corpus.
pub fn build_corpus(config: &CorpusConfig, out_dir: impl AsRef<Path>) -> Result<Corpus> {
    config.validate()?;
    let root = out_dir.as_ref();
    fs::create_dir_all(root)?;
    let basis = MorphableBasis::toy(config.basis_seed);
    basis.save(root.join("basis.json"))?;
    let size = config.image_size;
    let mut manifest = Vec::new();
    let mut records = Vec::new();
    for id in 0..config.n_identities {
        let identity_seed = derive_seed(config.seed, id as u64);
        let identity = ToyIdentity::from_seed(identity_seed);
        for (p, &yaw) in config.poses.iter().enumerate() {
            let index = records.len();
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(identity_seed, 1 + p as u64));
            let rigid = draw_rigid(&mut rng, yaw, size)?;
            let illum = rng.random_range(ILLUM_RANGE.0..=ILLUM_RANGE.1);
            let spec_seed: u64 = rng.random();

            let (hq, landmarks_profile) = render_face(&basis, &identity, &rigid, illum, size)?;
            let front_rigid = RigidParams::from_angles(rigid.scale(), 0.0, 0.0, 0.0, [size as f64 / 2.0; 2])?;
            let (frontal, landmarks_frontal) = render_face(&basis, &identity, &front_rigid, illum, size)?;
            let hq = hq.quantized();
            let spec = sample_spec_with(spec_seed, &config.degradation);
            let lq = degrade(&hq, &spec)?.quantized();

            let rel = PathBuf::from(identity_dir(id)).join(pose_dir(yaw));
            fs::create_dir_all(root.join(&rel))?;
            let rel_str = |name: &str| rel.join(name).to_string_lossy().replace('\\', "/");
            let record = SampleRecord {
                index,
                identity: id,
                identity_seed,
                yaw,
                rigid,
                illum,
                hq: rel_str("hq.png"),
                lq: rel_str("lq.png"),
                frontal: rel_str("frontal.png"),
                landmarks_profile,
                landmarks_frontal,
                degradation: spec.to_kv(),
            };
            hq.save_png(root.join(&record.hq))?;
            lq.save_png(root.join(&record.lq))?;
            frontal.save_png(root.join(&record.frontal))?;
            serde_json::to_writer(&mut manifest, &record)?;
            manifest.push(b'\n');
            records.push(record);
        }
    }
    fs::write(root.join("manifest.jsonl"), &manifest)?;
    let meta = CorpusMeta { config: config.clone(), n_records: records.len() };
    fs::write(root.join("corpus.json"), serde_json::to_vec_pretty(&meta)?)?;
    Ok(Corpus { root: root.to_path_buf(), meta, basis, records })
}

/// Images of one record.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub record: usize,
    pub hq: FaceImage,
    pub lq: FaceImage,
    pub frontal: FaceImage,
}

/// An opened corpus directory.
#[derive(Clone, Debug)]
pub struct Corpus {
    root: PathBuf,
    meta: CorpusMeta,
    basis: MorphableBasis,
    records: Vec<SampleRecord>,
}

impl Corpus {
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let meta: CorpusMeta = serde_json::from_slice(&fs::read(root.join("corpus.json"))?)?;
        meta.config.validate()?;
        let basis = MorphableBasis::load(root.join("basis.json"))?;
        if basis.seed() != Some(meta.config.basis_seed) {
            return Err(Error::Data("basis.json does not match the corpus basis seed".into()));
        }
        let file = fs::File::open(root.join("manifest.jsonl"))?;
        let mut records = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: SampleRecord = serde_json::from_str(&line)
                .map_err(|e| Error::Data(format!("manifest line {}: {e}", n + 1)))?;
            if rec.index != records.len() {
                return Err(Error::Data(format!("manifest line {}: index {} out of order", n + 1, rec.index)));
            }
            records.push(rec);
        }
        if records.len() != meta.n_records {
            return Err(Error::Data(format!("manifest has {} records, expected {}", records.len(), meta.n_records)));
        }
        Ok(Self { root, meta, basis, records })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn meta(&self) -> &CorpusMeta {
        &self.meta
    }

    pub fn config(&self) -> &CorpusConfig {
        &self.meta.config
    }

    pub fn basis(&self) -> &MorphableBasis {
        &self.basis
    }

    pub fn records(&self) -> &[SampleRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.meta.config.image_size
    }

    pub fn num_identities(&self) -> usize {
        self.meta.config.n_identities
    }

    fn record(&self, i: usize) -> Result<&SampleRecord> {
        self.records.get(i).ok_or_else(|| Error::Data(format!("record {i} out of range ({})", self.records.len())))
    }

    pub fn identity(&self, i: usize) -> Result<ToyIdentity> {
        Ok(ToyIdentity::from_seed(self.record(i)?.identity_seed))
    }

    pub fn load_sample(&self, i: usize) -> Result<Sample> {
        let rec = self.record(i)?;
        let size = self.image_size();
        let load = |rel: &str| -> Result<FaceImage> {
            let img = FaceImage::load_png(self.root.join(rel))?;
            img.check_shape(size, size)?;
            Ok(img)
        };
        Ok(Sample { record: i, hq: load(&rec.hq)?, lq: load(&rec.lq)?, frontal: load(&rec.frontal)? })
    }

    pub fn load_all(&self) -> Result<Vec<Sample>> {
        (0..self.len()).map(|i| self.load_sample(i)).collect()
    }

    /// Target frontal landmarks of record `i`, recomputed through pose normalization.
    pub fn frontal_landmarks(&self, i: usize) -> Result<LandmarkSet> {
        let rec = self.record(i)?;
        frontal_landmarks(&self.basis, &self.identity(i)?, &rec.rigid, self.image_size())
    }

    /// Re-derives every record's landmarks from its identity and camera.
    pub fn validate(&self) -> Result<()> {
        const TOL: f64 = 1e-6;
        for (i, rec) in self.records.iter().enumerate() {
            let identity = self.identity(i)?;
            let shape = assemble_shape(&self.basis, &identity.coeffs);
            let profile = sample_keypoints(&project(&shape, &rec.rigid), &self.basis)?;
            let err = profile.max_abs_diff(&rec.landmarks_profile);
            if err > TOL {
                return Err(Error::Data(format!("record {i}: profile landmarks off by {err}")));
            }
            let err = self.frontal_landmarks(i)?.max_abs_diff(&rec.landmarks_frontal);
            if err > TOL {
                return Err(Error::Data(format!("record {i}: frontal landmarks off by {err}")));
            }
            rec.degradation_spec()?;
        }
        Ok(())
    }

    fn heatmaps(&self, landmarks: &LandmarkSet) -> Result<HeatmapStack> {
        let size = self.image_size();
        encode_heatmaps(landmarks, size, size, self.meta.config.heatmap_sigma)
    }
}

/// Which training or evaluation step a batch feeds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// `hq` and identity labels.
    Embedder,
    /// `lq` and `hq`.
    FrnS,
    /// `hq`, `frontal` and both heatmap stacks.
    FfnS,
    /// `lq`, `hq`, profile heatmaps and pose-normalized frontal heatmaps.
    FrnTi,
}

/// Aligned `[N, C, H, W]` tensors; fields the phase does not use are `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub labels: Vec<usize>,
    pub lq: Option<Tensor<f32>>,
    pub hq: Option<Tensor<f32>>,
    pub frontal: Option<Tensor<f32>>,
    pub heat_profile: Option<Tensor<f32>>,
    pub heat_frontal: Option<Tensor<f32>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Assembles a batch from already loaded samples.
    pub fn from_samples(corpus: &Corpus, samples: &[&Sample], phase: Phase) -> Result<Self> {
        let size = corpus.image_size();
        let images = |pick: fn(&Sample) -> &FaceImage| -> Result<Tensor<f32>> {
            if samples.is_empty() {
                return Ok(Tensor::zeros(&[0, 3, size, size]));
            }
            FaceImage::batch(&samples.iter().map(|s| pick(s)).collect::<Vec<_>>())
        };
        let heat = |stacks: Vec<HeatmapStack>| -> Result<Tensor<f32>> {
            if stacks.is_empty() {
                return Ok(Tensor::zeros(&[0, NUM_KEYPOINTS, size, size]));
            }
            heatmap_tensor(&stacks.iter().collect::<Vec<_>>())
        };
        let mut labels = Vec::with_capacity(samples.len());
        for s in samples {
            labels.push(corpus.record(s.record)?.identity);
        }
        let mut batch = Batch {
            indices: samples.iter().map(|s| s.record).collect(),
            labels,
            lq: None,
            hq: None,
            frontal: None,
            heat_profile: None,
            heat_frontal: None,
        };
        let profile_maps = || -> Result<Vec<HeatmapStack>> {
            samples.iter().map(|s| corpus.heatmaps(&corpus.records[s.record].landmarks_profile)).collect()
        };
        match phase {
            Phase::Embedder => batch.hq = Some(images(|s| &s.hq)?),
            Phase::FrnS => {
                batch.lq = Some(images(|s| &s.lq)?);
                batch.hq = Some(images(|s| &s.hq)?);
            }
            Phase::FfnS => {
                batch.hq = Some(images(|s| &s.hq)?);
                batch.frontal = Some(images(|s| &s.frontal)?);
                batch.heat_profile = Some(heat(profile_maps()?)?);
                let front = samples
                    .iter()
                    .map(|s| corpus.heatmaps(&corpus.records[s.record].landmarks_frontal))
                    .collect::<Result<Vec<_>>>()?;
                batch.heat_frontal = Some(heat(front)?);
            }
            Phase::FrnTi => {
                batch.lq = Some(images(|s| &s.lq)?);
                batch.hq = Some(images(|s| &s.hq)?);
                batch.heat_profile = Some(heat(profile_maps()?)?);
                let front = samples
                    .iter()
                    .map(|s| corpus.heatmaps(&corpus.frontal_landmarks(s.record)?))
                    .collect::<Result<Vec<_>>>()?;
                batch.heat_frontal = Some(heat(front)?);
            }
        }
        Ok(batch)
    }
}

/// Reads the listed records from disk and assembles a phase batch.
pub fn load_batch(corpus: &Corpus, indices: &[usize], phase: Phase) -> Result<Batch> {
    let samples = indices.iter().map(|&i| corpus.load_sample(i)).collect::<Result<Vec<_>>>()?;
    Batch::from_samples(corpus, &samples.iter().collect::<Vec<_>>(), phase)
}
