//! Dataset manifest, ingest cache, clip windows and type-balanced
//! oversampling.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use tptn_autodiff::{lit, Archive, Real, Tensor};

use crate::bvh::{parse_bvh, Pose, RawClip};
use crate::error::{CoreError, Result};
use crate::features::{
    one_hot, split_parts, ContactThresholds, ControlLayout, Layout, MotionSequence, NormStats,
    PartitionScheme, CONTACT_DIM, FEATURE_DIM, NUM_JOINTS, ROOT_DIM, TRAJ_DIM,
};
use crate::losses::Targets;
use crate::model::SequenceInput;
use crate::rot::{Quat, Vec3};
use crate::skeleton::{Skeleton, CANONICAL_JOINTS};

/// Frames per training clip.
pub const CLIP_LEN: usize = 300;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelSpan {
    /// First source frame, inclusive.
    pub start: usize,
    /// Last source frame, exclusive.
    pub end: usize,
    #[serde(rename = "type")]
    pub type_id: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    /// Relative paths resolve against the manifest's directory.
    pub path: PathBuf,
    #[serde(default)]
    pub performer: String,
    #[serde(default)]
    pub labels: Vec<LabelSpan>,
    /// Type for frames no label covers; unlabeled frames are an error without it.
    #[serde(default)]
    pub default_type: Option<usize>,
    /// Also ingest the left/right reflection.
    #[serde(default)]
    pub mirror: bool,
    /// Optional sidecar with explicit mirror pairs.
    #[serde(default)]
    pub mirror_map: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub type_names: Vec<String>,
    pub sequences: Vec<ManifestEntry>,
    #[serde(default = "default_fps")]
    pub target_fps: f64,
    #[serde(default)]
    pub contact_thresholds: ContactThresholds,
}

fn default_fps() -> f64 {
    60.0
}

impl Manifest {
    pub fn load(path: &Path) -> Result<(Self, PathBuf)> {
        let text = std::fs::read_to_string(path)?;
        let m: Manifest = serde_json::from_str(&text)?;
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((m, dir))
    }

    pub fn validate(&self) -> Result<()> {
        if self.type_names.is_empty() {
            return Err(CoreError::Config(
                "manifest needs at least one type name".into(),
            ));
        }
        let k = self.type_names.len();
        for e in &self.sequences {
            let bad = e.labels.iter().any(|l| l.type_id >= k || l.start >= l.end)
                || e.default_type.is_some_and(|t| t >= k);
            if bad {
                return Err(CoreError::Config(format!(
                    "{}: label outside 0..{k} or empty span",
                    e.path.display()
                )));
            }
        }
        Ok(())
    }
}

/// One-hot type rows for every source frame of an entry.
pub fn frame_types(entry: &ManifestEntry, frames: usize, n_types: usize) -> Result<Vec<Vec<f64>>> {
    let mut ids = vec![entry.default_type; frames];
    for l in &entry.labels {
        for id in ids.iter_mut().take(l.end.min(frames)).skip(l.start) {
            *id = Some(l.type_id);
        }
    }
    ids.iter()
        .enumerate()
        .map(|(n, id)| {
            id.map(|k| one_hot(k, n_types)).ok_or_else(|| {
                CoreError::Invalid(format!(
                    "{}: frame {n} has no type label",
                    entry.path.display()
                ))
            })
        })
        .collect()
}

/// An ingested sequence with the skeleton it was recorded on.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub performer: String,
    pub skeleton: Skeleton,
    pub motion: MotionSequence,
}

/// Feature-extracted corpus plus its normalization statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub type_names: Vec<String>,
    pub fps: f64,
    pub stats: NormStats,
    pub sequences: Vec<Sequence>,
}

#[derive(Serialize, Deserialize)]
struct CacheMeta {
    type_names: Vec<String>,
    fps: f64,
    stats: NormStats,
    sequences: Vec<SequenceMeta>,
}

#[derive(Serialize, Deserialize)]
struct SequenceMeta {
    name: String,
    performer: String,
    skeleton: Skeleton,
}

fn check_canonical(skel: &Skeleton, what: &str) -> Result<()> {
    if skel.joint_names.len() != NUM_JOINTS
        || skel
            .joint_names
            .iter()
            .zip(CANONICAL_JOINTS)
            .any(|(a, b)| a != b)
    {
        return Err(CoreError::Skeleton(format!(
            "{what}: expected the {NUM_JOINTS}-joint canonical layout, got [{}]",
            skel.joint_names.join(", ")
        )));
    }
    Ok(())
}

fn pose_row(p: &Pose) -> Vec<f64> {
    let mut r = vec![p.root_position.x, p.root_position.y, p.root_position.z];
    for q in &p.rotations {
        let c = q.quaternion();
        r.extend_from_slice(&[c.w, c.i, c.j, c.k]);
    }
    r
}

fn row_pose(r: &[f64]) -> Pose {
    Pose {
        root_position: Vec3::new(r[0], r[1], r[2]),
        rotations: r[3..]
            .chunks(4)
            .map(|c| Quat::new_normalize(nalgebra::Quaternion::new(c[0], c[1], c[2], c[3])))
            .collect(),
    }
}

fn matrix(rows: &[Vec<f64>], cols: usize) -> Result<Tensor<f64>> {
    Ok(Tensor::from_vec(vec![rows.len(), cols], rows.concat())?)
}

fn unmatrix(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row_slice(r).to_vec()).collect()
}

impl Dataset {
    /// Assemble from already-converted sequences, fitting fresh statistics.
    pub fn from_sequences(
        type_names: Vec<String>,
        fps: f64,
        sequences: Vec<Sequence>,
    ) -> Result<Self> {
        let layout = ControlLayout::new(type_names.len());
        let stats = NormStats::fit(
            sequences
                .iter()
                .flat_map(|s| s.motion.features.iter().map(Vec::as_slice)),
            sequences
                .iter()
                .flat_map(|s| s.motion.controls.iter().map(Vec::as_slice)),
            layout,
        )?;
        Ok(Self {
            type_names,
            fps,
            stats,
            sequences,
        })
    }

    /// Read every BVH named by the manifest, resample, mirror if requested,
    /// and extract features, contacts and controls.
    pub fn ingest(manifest: &Manifest, root: &Path) -> Result<Self> {
        manifest.validate()?;
        let k = manifest.type_names.len();
        let mut sequences = Vec::new();
        for entry in &manifest.sequences {
            let path = root.join(&entry.path);
            let text = std::fs::read_to_string(&path)
                .map_err(|e| CoreError::Invalid(format!("{}: {e}", path.display())))?;
            let mut clip = parse_bvh(&text)?;
            if let Some(map) = &entry.mirror_map {
                let pairs = Skeleton::parse_mirror_map(&std::fs::read_to_string(root.join(map))?)?;
                clip.skeleton = clip.skeleton.with_mirror_map(&pairs)?;
            }
            check_canonical(&clip.skeleton, &path.display().to_string())?;
            let types = frame_types(entry, clip.len(), k)?;
            let step = (clip.fps() / manifest.target_fps).round().max(1.0) as usize;
            let clip = clip.resample(manifest.target_fps)?;
            let types: Vec<Vec<f64>> = types.into_iter().step_by(step).collect();
            let name = entry.path.display().to_string();
            let mut variants = vec![(name.clone(), clip)];
            if entry.mirror {
                let m = variants[0].1.mirror()?;
                variants.push((format!("{name}#mirror"), m));
            }
            for (name, clip) in variants {
                sequences.push(Self::convert(
                    name,
                    &entry.performer,
                    &clip,
                    &types,
                    &manifest.contact_thresholds,
                )?);
            }
        }
        if sequences.is_empty() {
            return Err(CoreError::Invalid("manifest lists no sequences".into()));
        }
        Self::from_sequences(manifest.type_names.clone(), manifest.target_fps, sequences)
    }

    pub fn convert(
        name: String,
        performer: &str,
        clip: &RawClip,
        types: &[Vec<f64>],
        th: &ContactThresholds,
    ) -> Result<Sequence> {
        check_canonical(&clip.skeleton, &name)?;
        Ok(Sequence {
            performer: performer.to_string(),
            skeleton: clip.skeleton.clone(),
            motion: MotionSequence::from_clip(name, clip, types, th)?,
        })
    }

    pub fn n_types(&self) -> usize {
        self.type_names.len()
    }

    pub fn total_frames(&self) -> usize {
        self.sequences.iter().map(|s| s.motion.len()).sum()
    }

    /// Frames per type over all rows.
    pub fn type_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.n_types()];
        for s in &self.sequences {
            for &t in &s.motion.types {
                c[t] += 1;
            }
        }
        c
    }

    pub fn to_archive(&self) -> Result<Archive<f64>> {
        let meta = CacheMeta {
            type_names: self.type_names.clone(),
            fps: self.fps,
            stats: self.stats.clone(),
            sequences: self
                .sequences
                .iter()
                .map(|s| SequenceMeta {
                    name: s.motion.name.clone(),
                    performer: s.performer.clone(),
                    skeleton: s.skeleton.clone(),
                })
                .collect(),
        };
        let mut a = Archive::new(serde_json::to_string(&meta)?);
        let cdim = self.stats.layout.dim();
        for (i, s) in self.sequences.iter().enumerate() {
            let m = &s.motion;
            a.push(format!("{i}.features"), matrix(&m.features, FEATURE_DIM)?);
            let contacts: Vec<Vec<f64>> = m.contacts.iter().map(|c| c.to_vec()).collect();
            a.push(format!("{i}.contacts"), matrix(&contacts, CONTACT_DIM)?);
            a.push(format!("{i}.controls"), matrix(&m.controls, cdim)?);
            let types: Vec<Vec<f64>> = m.types.iter().map(|&t| vec![t as f64]).collect();
            a.push(format!("{i}.types"), matrix(&types, 1)?);
            let poses: Vec<Vec<f64>> = m.poses.iter().map(pose_row).collect();
            a.push(format!("{i}.poses"), matrix(&poses, 3 + 4 * NUM_JOINTS)?);
        }
        Ok(a)
    }

    pub fn from_archive(a: &Archive<f64>) -> Result<Self> {
        let meta: CacheMeta = serde_json::from_str(&a.metadata)?;
        let get = |name: String| {
            a.get(&name).ok_or_else(|| {
                CoreError::Invalid(format!("dataset cache is missing tensor {name}"))
            })
        };
        let mut sequences = Vec::with_capacity(meta.sequences.len());
        for (i, s) in meta.sequences.into_iter().enumerate() {
            let contacts = unmatrix(get(format!("{i}.contacts"))?)
                .into_iter()
                .map(|r| [r[0], r[1], r[2], r[3]])
                .collect();
            let motion = MotionSequence {
                name: s.name,
                features: unmatrix(get(format!("{i}.features"))?),
                contacts,
                controls: unmatrix(get(format!("{i}.controls"))?),
                types: get(format!("{i}.types"))?
                    .data()
                    .iter()
                    .map(|&t| t as usize)
                    .collect(),
                poses: unmatrix(get(format!("{i}.poses"))?)
                    .iter()
                    .map(|r| row_pose(r))
                    .collect(),
            };
            sequences.push(Sequence {
                performer: s.performer,
                skeleton: s.skeleton,
                motion,
            });
        }
        Ok(Self {
            type_names: meta.type_names,
            fps: meta.fps,
            stats: meta.stats,
            sequences,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(self.to_archive()?.save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }
}

/// Per-type window stride: `max(1, round(r_r / r_e · mv_b))` with `r_e` one
/// over the number of types present.
pub fn oversample_strides(type_counts: &[usize], base_stride: usize) -> Result<Vec<usize>> {
    let total: usize = type_counts.iter().sum();
    if total == 0 || base_stride == 0 {
        return Err(CoreError::Invalid(
            "oversampling needs frames and a positive base stride".into(),
        ));
    }
    let present = type_counts.iter().filter(|&&c| c > 0).count() as f64;
    let r_e = 1.0 / present;
    Ok(type_counts
        .iter()
        .map(|&c| {
            let r_r = c as f64 / total as f64;
            ((r_r / r_e * base_stride as f64).round() as usize).max(1)
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipRef {
    pub sequence: usize,
    pub start: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipIndex {
    pub clips: Vec<ClipRef>,
    pub strides: Vec<usize>,
    pub clip_len: usize,
    /// Sequences shorter than one clip.
    pub skipped: Vec<usize>,
}

impl ClipIndex {
    /// Windows start at 0 and advance by the stride of the type at the
    /// current start frame while `start + clip_len ≤ len`.
    pub fn build(type_rows: &[&[usize]], strides: &[usize], clip_len: usize) -> Result<Self> {
        if clip_len < 3 || strides.contains(&0) {
            return Err(CoreError::Invalid(
                "clip length must be ≥ 3 and strides ≥ 1".into(),
            ));
        }
        let mut clips = Vec::new();
        let mut skipped = Vec::new();
        for (i, types) in type_rows.iter().enumerate() {
            if types.len() < clip_len {
                log::warn!(
                    "sequence {i} has {} frames, shorter than a {clip_len}-frame clip; skipped",
                    types.len()
                );
                skipped.push(i);
                continue;
            }
            let mut start = 0;
            while start + clip_len <= types.len() {
                clips.push(ClipRef { sequence: i, start });
                let t = types[start];
                start += *strides
                    .get(t)
                    .ok_or_else(|| CoreError::Invalid(format!("type {t} has no stride")))?;
            }
        }
        Ok(Self {
            clips,
            strides: strides.to_vec(),
            clip_len,
            skipped,
        })
    }

    pub fn for_dataset(ds: &Dataset, base_stride: usize, clip_len: usize) -> Result<Self> {
        let strides = oversample_strides(&ds.type_counts(), base_stride)?;
        let rows: Vec<&[usize]> = ds
            .sequences
            .iter()
            .map(|s| s.motion.types.as_slice())
            .collect();
        Self::build(&rows, &strides, clip_len)
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    /// Fraction of clips per type of their start frame.
    pub fn type_shares(&self, type_rows: &[&[usize]], n_types: usize) -> Vec<f64> {
        let mut c = vec![0.0; n_types];
        for clip in &self.clips {
            c[type_rows[clip.sequence][clip.start]] += 1.0;
        }
        let n = self.clips.len().max(1) as f64;
        c.iter().map(|v| v / n).collect()
    }
}

/// Add i.i.d. N(0, std²) noise to every entry of every row.
pub fn add_noise<R: Rng + ?Sized>(rows: &mut [Vec<f64>], std: f64, rng: &mut R) -> Result<()> {
    if std == 0.0 {
        return Ok(());
    }
    let normal =
        Normal::new(0.0, std).map_err(|e| CoreError::Invalid(format!("noise std {std}: {e}")))?;
    for r in rows {
        for v in r.iter_mut() {
            *v += normal.sample(rng);
        }
    }
    Ok(())
}

/// Model input and ground truth for one clip.
#[derive(Debug, Clone)]
pub struct ClipBatch<T: Real> {
    pub input: SequenceInput<T>,
    pub targets: Targets<T>,
}

pub(crate) fn to_tensor<T: Real>(rows: &[Vec<f64>]) -> Result<Tensor<T>> {
    let cols = rows.first().map_or(0, Vec::len);
    Ok(Tensor::from_vec(
        vec![rows.len(), cols],
        rows.iter().flatten().map(|&v| lit(v)).collect(),
    )?)
}

/// Build the teacher-forced pair for rows `start .. start + len`: inputs are
/// the first `len − 1` rows, targets the following ones. Gaussian noise of
/// `noise_std` is added to the normalized motion features of the inputs only.
pub fn make_clip<T: Real, R: Rng + ?Sized>(
    seq: &Sequence,
    stats: &NormStats,
    scheme: &PartitionScheme,
    start: usize,
    len: usize,
    noise_std: f64,
    rng: &mut R,
) -> Result<ClipBatch<T>> {
    let m = &seq.motion;
    if len < 3 || start + len > m.len() {
        return Err(CoreError::Invalid(format!(
            "clip {start}..{} outside a {}-row sequence",
            start + len,
            m.len()
        )));
    }
    let inputs = start..start + len - 1;
    let outputs = start + 1..start + len;
    let clean: Vec<Vec<f64>> = inputs
        .clone()
        .map(|r| stats.normalize_features(&m.features[r]))
        .collect();
    let mut noisy = clean.clone();
    add_noise(&mut noisy, noise_std, rng)?;
    let (mut upper, mut lower) = (Vec::with_capacity(len), Vec::with_capacity(len));
    for (f, r) in noisy.iter().zip(inputs.clone()) {
        let (u, l) = split_parts(f, &m.contacts[r], scheme);
        upper.push(u);
        lower.push(l);
    }
    let controls: Vec<Vec<f64>> = inputs
        .map(|r| stats.normalize_controls(&m.controls[r]))
        .collect();
    let traj0 = stats.layout.traj_start();
    let lay = Layout::CANONICAL;
    let feet = seq
        .skeleton
        .feet
        .ok_or_else(|| CoreError::Skeleton("foot joints not found".into()))?
        .as_array();
    let mut features = Vec::with_capacity(len);
    let mut contacts = Vec::with_capacity(len);
    let mut trajectory = Vec::with_capacity(len);
    let mut foot = Vec::with_capacity(len);
    for r in outputs {
        features.push(stats.normalize_features(&m.features[r]));
        contacts.push(m.contacts[r].to_vec());
        trajectory.push(stats.normalize_controls(&m.controls[r])[traj0..traj0 + TRAJ_DIM].to_vec());
        foot.push(
            feet.iter()
                .flat_map(|&j| m.features[r][lay.pos(j)..lay.pos(j) + 3].to_vec())
                .collect(),
        );
    }
    let input_root: Vec<Vec<f64>> = clean.iter().map(|f| f[..ROOT_DIM].to_vec()).collect();
    Ok(ClipBatch {
        input: SequenceInput {
            upper: to_tensor(&upper)?,
            lower: to_tensor(&lower)?,
            controls: to_tensor(&controls)?,
            position_offset: 0,
        },
        targets: Targets {
            features: to_tensor(&features)?,
            contacts: to_tensor(&contacts)?,
            trajectory: to_tensor(&trajectory)?,
            feet: to_tensor(&foot)?,
            input_root: to_tensor(&input_root)?,
        },
    })
}
