//! Video records, the synthetic benchmark generator, feature files and
//! dataset manifests.
//!
//! Feature file layout (little-endian):
//!
//! ```text
//! "FTCLFEAT"   8 bytes
//! version      u32 (= 1)
//! T            u32
//! D            u32
//! payload      T·D f32, row-major
//! ```
//!
//! A manifest is a JSON document `{"n_classes": C, "videos": [...]}` whose
//! entries carry `video_id`, `feature_path` (relative to the manifest),
//! multi-hot `labels`, optional `segments` and `fps`.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const FEATURE_MAGIC: &[u8; 8] = b"FTCLFEAT";
pub const FEATURE_VERSION: u32 = 1;
pub const FEATURE_HEADER_LEN: usize = 8 + 4 + 4 + 4;

/// Ground-truth action instance in snippet units, `[start, end)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
    pub class: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoRecord {
    pub video_id: String,
    /// `T × D` snippet features.
    pub features: Matrix,
    /// Multi-hot class labels, length `C`.
    pub labels: Vec<u8>,
    pub segments: Option<Vec<Segment>>,
    pub fps: f64,
}

impl VideoRecord {
    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    pub fn label_vector(&self) -> Vec<f64> {
        self.labels.iter().map(|&y| y as f64).collect()
    }

    pub fn classes(&self) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &y)| y != 0)
            .map(|(c, _)| c)
            .collect()
    }

    pub fn is_labeled(&self) -> bool {
        self.labels.iter().any(|&y| y != 0)
    }

    /// Lowest class index present in both videos.
    pub fn shared_class(&self, other: &VideoRecord) -> Option<usize> {
        self.labels
            .iter()
            .zip(&other.labels)
            .position(|(&a, &b)| a != 0 && b != 0)
    }

    /// Labels agree with the recorded segments.
    pub fn labels_consistent(&self) -> bool {
        match &self.segments {
            None => true,
            Some(segs) => {
                let mut from_segs = vec![0u8; self.labels.len()];
                for s in segs {
                    match from_segs.get_mut(s.class) {
                        Some(y) => *y = 1,
                        None => return false,
                    }
                }
                from_segs == self.labels
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub n_classes: usize,
    pub videos: Vec<VideoRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub subactions_per_class: usize,
    pub feat_dim: usize,
    pub snippets_per_video: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    /// Inclusive range of snippets each sub-action lasts.
    pub min_subaction_len: usize,
    pub max_subaction_len: usize,
    pub noise_sigma: f64,
    pub n_background_prototypes: usize,
    /// Inclusive range of snippets a background prototype persists.
    pub min_background_run: usize,
    pub max_background_run: usize,
    /// Chance that a later instance in a video belongs to a second class.
    pub second_class_prob: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub fps: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_classes: 5,
            subactions_per_class: 3,
            feat_dim: 32,
            snippets_per_video: 60,
            min_instances: 1,
            max_instances: 3,
            min_subaction_len: 2,
            max_subaction_len: 5,
            noise_sigma: 0.3,
            n_background_prototypes: 8,
            min_background_run: 2,
            max_background_run: 6,
            second_class_prob: 0.2,
            n_train: 200,
            n_test: 100,
            fps: 25.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_classes", self.n_classes),
            ("subactions_per_class", self.subactions_per_class),
            ("feat_dim", self.feat_dim),
            ("snippets_per_video", self.snippets_per_video),
            ("min_instances", self.min_instances),
            ("min_subaction_len", self.min_subaction_len),
            ("n_background_prototypes", self.n_background_prototypes),
            ("min_background_run", self.min_background_run),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("{name} must be positive")));
        }
        if self.max_instances < self.min_instances
            || self.max_subaction_len < self.min_subaction_len
            || self.max_background_run < self.min_background_run
        {
            return Err(Error::InvalidConfig("empty range in synthetic spec".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::InvalidConfig("noise_sigma must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.second_class_prob) {
            return Err(Error::InvalidConfig("second_class_prob must lie in [0, 1]".into()));
        }
        if !(self.fps > 0.0) {
            return Err(Error::InvalidConfig("fps must be positive".into()));
        }
        let needed = self.max_instances * self.subactions_per_class * self.max_subaction_len + self.max_instances - 1;
        if needed > self.snippets_per_video {
            return Err(Error::VideoTooShort {
                t: self.snippets_per_video,
                needed,
            });
        }
        Ok(())
    }
}

/// Generated benchmark: class sub-action prototypes, background prototypes
/// and the two splits.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub spec: SyntheticSpec,
    /// `prototypes[c][k]` is sub-action `k` of class `c`.
    pub prototypes: Vec<Vec<Vec<f64>>>,
    pub background: Vec<Vec<f64>>,
    pub train: Dataset,
    pub test: Dataset,
}

fn unit_vector(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let n = crate::tensor::norm(&v);
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Splits `total` units into `parts` non-negative counts.
fn random_composition(rng: &mut impl Rng, total: usize, parts: usize) -> Vec<usize> {
    let mut out = vec![0; parts];
    for _ in 0..total {
        out[rng.random_range(0..parts)] += 1;
    }
    out
}

struct Generator<'a> {
    spec: &'a SyntheticSpec,
    prototypes: &'a [Vec<Vec<f64>>],
    background: &'a [Vec<f64>],
}

impl<'a> Generator<'a> {
    fn video(&self, rng: &mut ChaCha8Rng, video_id: String) -> Result<VideoRecord> {
        let s = self.spec;
        let (t_len, d) = (s.snippets_per_video, s.feat_dim);
        let n_inst = rng.random_range(s.min_instances..=s.max_instances);
        let primary = rng.random_range(0..s.n_classes);
        let mut inst_classes = Vec::with_capacity(n_inst);
        for k in 0..n_inst {
            let c = if k > 0 && s.n_classes > 1 && rng.random_bool(s.second_class_prob) {
                (primary + rng.random_range(1..s.n_classes)) % s.n_classes
            } else {
                primary
            };
            inst_classes.push(c);
        }
        let durations: Vec<Vec<usize>> = (0..n_inst)
            .map(|_| {
                (0..s.subactions_per_class)
                    .map(|_| rng.random_range(s.min_subaction_len..=s.max_subaction_len))
                    .collect()
            })
            .collect();
        let action_total: usize = durations.iter().flatten().sum();
        let separators = n_inst - 1;
        let spare = t_len
            .checked_sub(action_total + separators)
            .ok_or(Error::VideoTooShort {
                t: t_len,
                needed: action_total + separators,
            })?;
        let mut gaps = random_composition(rng, spare, n_inst + 1);
        for g in gaps.iter_mut().take(n_inst).skip(1) {
            *g += 1;
        }

        // sequence of prototype references, snippet by snippet
        let (background, prototypes): (&'a [Vec<f64>], &'a [Vec<Vec<f64>>]) = (self.background, self.prototypes);
        let mut protos: Vec<&'a [f64]> = Vec::with_capacity(t_len);
        let mut segments = Vec::with_capacity(n_inst);
        let push_background = |protos: &mut Vec<&'a [f64]>, rng: &mut ChaCha8Rng, len: usize| {
            let mut left = len;
            while left > 0 {
                let run = rng.random_range(s.min_background_run..=s.max_background_run).min(left);
                let b = &background[rng.random_range(0..background.len())];
                protos.extend(std::iter::repeat_n(b.as_slice(), run));
                left -= run;
            }
        };
        for k in 0..n_inst {
            push_background(&mut protos, rng, gaps[k]);
            let start = protos.len();
            let c = inst_classes[k];
            for (sub, &dur) in durations[k].iter().enumerate() {
                protos.extend(std::iter::repeat_n(prototypes[c][sub].as_slice(), dur));
            }
            segments.push(Segment {
                start,
                end: protos.len(),
                class: c,
            });
        }
        push_background(&mut protos, rng, gaps[n_inst]);
        debug_assert_eq!(protos.len(), t_len);

        let noise = Normal::new(0.0, s.noise_sigma).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        let mut features = Matrix::zeros(t_len, d);
        for (t, p) in protos.iter().enumerate() {
            for (x, &base) in features.row_mut(t).iter_mut().zip(p.iter()) {
                *x = base + if s.noise_sigma > 0.0 { noise.sample(rng) } else { 0.0 };
            }
        }
        let mut labels = vec![0u8; s.n_classes];
        for c in &inst_classes {
            labels[*c] = 1;
        }
        Ok(VideoRecord {
            video_id,
            features,
            labels,
            segments: Some(segments),
            fps: s.fps,
        })
    }
}

/// Draws prototypes and both splits. Train and test videos use separate
/// random streams derived from the seed.
pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut proto_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let prototypes: Vec<Vec<Vec<f64>>> = (0..spec.n_classes)
        .map(|_| {
            (0..spec.subactions_per_class)
                .map(|_| unit_vector(&mut proto_rng, spec.feat_dim))
                .collect()
        })
        .collect();
    let background: Vec<Vec<f64>> = (0..spec.n_background_prototypes)
        .map(|_| unit_vector(&mut proto_rng, spec.feat_dim))
        .collect();
    let gen = Generator {
        spec,
        prototypes: &prototypes,
        background: &background,
    };
    let split = |stream: u64, prefix: &str, count: usize| -> Result<Dataset> {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(stream);
        let videos = (0..count)
            .map(|i| gen.video(&mut rng, format!("{prefix}_{i:04}")))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            n_classes: spec.n_classes,
            videos,
        })
    };
    let train = split(1, "train", spec.n_train)?;
    let test = split(2, "test", spec.n_test)?;
    Ok(SyntheticData {
        spec: spec.clone(),
        prototypes,
        background,
        train,
        test,
    })
}

pub fn encode_features(features: &Matrix) -> Result<Vec<u8>> {
    let (t, d) = features.shape();
    let t32 = u32::try_from(t).map_err(|_| Error::dims("T exceeds u32"))?;
    let d32 = u32::try_from(d).map_err(|_| Error::dims("D exceeds u32"))?;
    let mut out = Vec::with_capacity(FEATURE_HEADER_LEN + 4 * t * d);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&t32.to_le_bytes());
    out.extend_from_slice(&d32.to_le_bytes());
    for &x in features.as_slice() {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_features(bytes: &[u8]) -> Result<Matrix> {
    if bytes.len() < 8 || &bytes[..8] != FEATURE_MAGIC {
        return Err(Error::NotAFeatureFile);
    }
    if bytes.len() < FEATURE_HEADER_LEN {
        return Err(Error::TruncatedPayload);
    }
    let word = |k: usize| u32::from_le_bytes(bytes[8 + 4 * k..12 + 4 * k].try_into().unwrap());
    let version = word(0);
    if version != FEATURE_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let (t, d) = (word(1) as usize, word(2) as usize);
    let expected = t
        .checked_mul(d)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(FEATURE_HEADER_LEN))
        .ok_or(Error::TruncatedPayload)?;
    if bytes.len() != expected {
        return Err(Error::TruncatedPayload);
    }
    let data = bytes[FEATURE_HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Matrix::from_vec(t, d, data)
}

pub fn write_features(path: impl AsRef<Path>, features: &Matrix) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_features(features)?).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: impl AsRef<Path>) -> Result<Matrix> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub video_id: String,
    pub feature_path: PathBuf,
    pub labels: Vec<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segments: Option<Vec<Segment>>,
    pub fps: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub n_classes: usize,
    pub videos: Vec<ManifestEntry>,
}

/// Writes one feature file per video under `dir/features/` and the manifest
/// at `dir/{name}.json`. Returns the manifest path.
pub fn save_dataset(dir: impl AsRef<Path>, name: &str, data: &Dataset) -> Result<PathBuf> {
    let dir = dir.as_ref();
    let feat_dir = dir.join("features");
    std::fs::create_dir_all(&feat_dir).map_err(|e| Error::io(&feat_dir, e))?;
    let mut videos = Vec::with_capacity(data.videos.len());
    for v in &data.videos {
        let rel = PathBuf::from("features").join(format!("{}.feat", v.video_id));
        write_features(dir.join(&rel), &v.features)?;
        videos.push(ManifestEntry {
            video_id: v.video_id.clone(),
            feature_path: rel,
            labels: v.labels.clone(),
            segments: v.segments.clone(),
            fps: v.fps,
        });
    }
    let manifest = Manifest {
        n_classes: data.n_classes,
        videos,
    };
    let path = dir.join(format!("{name}.json"));
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    for v in &manifest.videos {
        if v.labels.len() != manifest.n_classes {
            return Err(Error::Data(format!(
                "video {} has {} labels, manifest declares {} classes",
                v.video_id,
                v.labels.len(),
                manifest.n_classes
            )));
        }
    }
    Ok(manifest)
}

/// Reads a manifest and every feature file it references.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let manifest = read_manifest(path)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let videos = manifest
        .videos
        .into_iter()
        .map(|e| {
            let features = read_features(base.join(&e.feature_path))?;
            Ok(VideoRecord {
                video_id: e.video_id,
                features,
                labels: e.labels,
                segments: e.segments,
                fps: e.fps,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        n_classes: manifest.n_classes,
        videos,
    })
}
