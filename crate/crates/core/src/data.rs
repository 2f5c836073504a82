//! Dataset plumbing: manifest loading, the binary feature format, video
//! segmentation into fixed-length sequences, batching, and the synthetic
//! latent-factor generator used for desk-scale experiments.

use crate::audio::{self, MfccConfig};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Visual frames kept per video when segmenting for training.
pub const TRAIN_FRAME_BUDGET: usize = 300;
/// Visual frames kept per video for validation and testing.
pub const EVAL_FRAME_BUDGET: usize = 180;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("manifest row {row}: {msg}")]
    ManifestRow { row: usize, msg: String },
    #[error("manifest row {row}: feature dimension mismatch, expected {expected}, got {got}")]
    DimensionMismatch {
        row: usize,
        expected: usize,
        got: usize,
    },
    #[error("feature file {path} is malformed: {msg}")]
    BadFeatureFile { path: String, msg: String },
    #[error("video {video_id} has too few frames for one window of {needed}")]
    TooFewFrames { video_id: String, needed: usize },
    #[error("no records to batch")]
    EmptyRecords,
    #[error("sequences have inconsistent lengths: {0}")]
    InconsistentSequences(String),
    #[error("invalid synthetic config: {0}")]
    BadSynthConfig(String),
    #[error(transparent)]
    Audio(#[from] audio::AudioError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// One video's precomputed per-frame features for both modalities.
#[derive(Debug, Clone)]
pub struct VideoRecord {
    pub video_id: String,
    /// 0 = real, 1 = fake.
    pub label: u8,
    /// `[frames x d_a]`.
    pub audio_features: Tensor,
    /// `[frames x d_v]`.
    pub visual_features: Tensor,
    pub split: Split,
}

/// One aligned audio/visual window cut from a video.
#[derive(Debug, Clone)]
pub struct Sequence {
    pub video_id: String,
    pub label: u8,
    /// `[len_audio x d_a]`.
    pub audio: Tensor,
    /// `[len_visual x d_v]`.
    pub visual: Tensor,
}

/// A batch of sequences with shared lengths, shaped for the encoders.
#[derive(Debug, Clone)]
pub struct SequenceBatch {
    /// `[batch x len_audio x d_a]`.
    pub x_audio: Tensor,
    /// `[batch x len_visual x d_v]`.
    pub x_visual: Tensor,
    pub labels: Vec<f64>,
    pub video_ids: Vec<String>,
}

impl SequenceBatch {
    pub fn batch_size(&self) -> usize {
        self.labels.len()
    }

    /// Time step `t` of one modality as a `[batch x d]` matrix.
    pub fn step_matrix(x: &Tensor, t: usize) -> Tensor {
        let (b, l, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        debug_assert!(t < l);
        let mut data = Vec::with_capacity(b * d);
        for i in 0..b {
            let at = i * l * d + t * d;
            data.extend_from_slice(&x.data()[at..at + d]);
        }
        Tensor::new(vec![b, d], data).expect("dims positive")
    }
}

// ── Binary feature files ────────────────────────────────────────────────

/// Write a `[rows x cols]` matrix as the flat binary feature format: two
/// little-endian u32 (rows, cols) then row-major f32 values.
pub fn write_feature_file(path: &Path, features: &Tensor) -> Result<(), DataError> {
    let io_err = |source| DataError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut buf = Vec::with_capacity(8 + features.numel() * 4);
    buf.extend_from_slice(&(features.rows() as u32).to_le_bytes());
    buf.extend_from_slice(&(features.cols() as u32).to_le_bytes());
    for &v in features.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(io_err)?;
    f.write_all(&buf).map_err(io_err)
}

pub fn read_feature_file(path: &Path) -> Result<Tensor, DataError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
    if bytes.len() < 8 {
        return Err(DataError::BadFeatureFile {
            path: path.display().to_string(),
            msg: "shorter than the 8-byte header".into(),
        });
    }
    let rows = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let expected = 8 + rows * cols * 4;
    if bytes.len() != expected || rows == 0 || cols == 0 {
        return Err(DataError::BadFeatureFile {
            path: path.display().to_string(),
            msg: format!(
                "header says {rows}x{cols} ({expected} bytes), file has {}",
                bytes.len()
            ),
        });
    }
    let data: Vec<f64> = bytes[8..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok(Tensor::new(vec![rows, cols], data).expect("dims checked"))
}

// ── Manifest ────────────────────────────────────────────────────────────

/// Load a manifest CSV (`video_id,label,split,audio_path,visual_path` after
/// one header line). Paths are resolved relative to the manifest. Audio
/// paths ending in `.wav` are converted to MFCC features on the fly.
pub fn load_manifest(path: &Path) -> Result<Vec<VideoRecord>, DataError> {
    load_manifest_with(path, &MfccConfig::default())
}

pub fn load_manifest_with(
    path: &Path,
    mfcc_cfg: &MfccConfig,
) -> Result<Vec<VideoRecord>, DataError> {
    let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut records = Vec::new();
    let mut expected_dims: Option<(usize, usize)> = None;
    for (i, line) in text.lines().enumerate().skip(1) {
        let row = i; // 1-based data row number (header is line 0)
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 5 {
            return Err(DataError::ManifestRow {
                row,
                msg: format!("expected 5 comma-separated fields, got {}", fields.len()),
            });
        }
        let video_id = fields[0].to_string();
        let label = match fields[1] {
            "real" | "0" => 0u8,
            "fake" | "1" => 1u8,
            other => {
                return Err(DataError::ManifestRow {
                    row,
                    msg: format!("unknown label {other:?} (expected real/fake)"),
                })
            }
        };
        let split = match fields[2] {
            "train" => Split::Train,
            "val" => Split::Val,
            "test" => Split::Test,
            other => {
                return Err(DataError::ManifestRow {
                    row,
                    msg: format!("unknown split {other:?} (expected train/val/test)"),
                })
            }
        };
        let audio_path = resolve(base, fields[3]);
        let visual_path = resolve(base, fields[4]);
        let audio_features = if audio_path.extension().is_some_and(|e| e == "wav") {
            let clip = audio::read_wav(&audio_path)?;
            audio::mfcc(&clip, mfcc_cfg)?.frames
        } else {
            read_feature_file(&audio_path)?
        };
        let visual_features = read_feature_file(&visual_path)?;
        match expected_dims {
            None => expected_dims = Some((audio_features.cols(), visual_features.cols())),
            Some((da, dv)) => {
                if audio_features.cols() != da {
                    return Err(DataError::DimensionMismatch {
                        row,
                        expected: da,
                        got: audio_features.cols(),
                    });
                }
                if visual_features.cols() != dv {
                    return Err(DataError::DimensionMismatch {
                        row,
                        expected: dv,
                        got: visual_features.cols(),
                    });
                }
            }
        }
        records.push(VideoRecord {
            video_id,
            label,
            audio_features,
            visual_features,
            split,
        });
    }
    Ok(records)
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let pb = PathBuf::from(p);
    if pb.is_absolute() {
        pb
    } else {
        base.join(pb)
    }
}

pub fn write_manifest(path: &Path, rows: &[(String, u8, Split, String, String)]) -> Result<(), DataError> {
    let mut out = String::from("video_id,label,split,audio_path,visual_path\n");
    for (id, label, split, ap, vp) in rows {
        let label = if *label == 1 { "fake" } else { "real" };
        out.push_str(&format!("{id},{label},{},{ap},{vp}\n", split.as_str()));
    }
    std::fs::write(path, out).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

// ── Segmentation ────────────────────────────────────────────────────────

/// Cut one video into aligned non-overlapping windows.
///
/// Visual frames are truncated to the 300 (train) / 180 (eval) budget and
/// split into windows of `seq_len_visual`; the audio window length follows
/// the full-record frame-rate ratio, rounded. Trailing partial windows are
/// dropped in both modalities.
pub fn segment_video(
    record: &VideoRecord,
    seq_len_visual: usize,
    train_mode: bool,
) -> Result<Vec<Sequence>, DataError> {
    assert!(seq_len_visual >= 1);
    let budget = if train_mode {
        TRAIN_FRAME_BUDGET
    } else {
        EVAL_FRAME_BUDGET
    };
    let v_total = record.visual_features.rows();
    let a_total = record.audio_features.rows();
    let v_avail = v_total.min(budget);
    let ratio = a_total as f64 / v_total as f64;
    let seq_len_audio = ((seq_len_visual as f64 * ratio).round() as usize).max(1);
    let n_seq = (v_avail / seq_len_visual).min(a_total / seq_len_audio);
    if n_seq == 0 {
        return Err(DataError::TooFewFrames {
            video_id: record.video_id.clone(),
            needed: seq_len_visual,
        });
    }
    let (d_v, d_a) = (record.visual_features.cols(), record.audio_features.cols());
    let mut out = Vec::with_capacity(n_seq);
    for s in 0..n_seq {
        let v_at = s * seq_len_visual * d_v;
        let a_at = s * seq_len_audio * d_a;
        out.push(Sequence {
            video_id: record.video_id.clone(),
            label: record.label,
            audio: Tensor::new(
                vec![seq_len_audio, d_a],
                record.audio_features.data()[a_at..a_at + seq_len_audio * d_a].to_vec(),
            )
            .expect("dims positive"),
            visual: Tensor::new(
                vec![seq_len_visual, d_v],
                record.visual_features.data()[v_at..v_at + seq_len_visual * d_v].to_vec(),
            )
            .expect("dims positive"),
        });
    }
    Ok(out)
}

/// Segment every record of one split.
pub fn segment_records(
    records: &[VideoRecord],
    split: Split,
    seq_len_visual: usize,
) -> Result<Vec<Sequence>, DataError> {
    let mut out = Vec::new();
    for r in records.iter().filter(|r| r.split == split) {
        out.extend(segment_video(r, seq_len_visual, split == Split::Train)?);
    }
    Ok(out)
}

// ── Batching ────────────────────────────────────────────────────────────

/// Group sequences into batches of `batch_size` (final short batch kept).
/// With `shuffle` the order is a seed-deterministic permutation.
pub fn batches(
    sequences: &[Sequence],
    batch_size: usize,
    seed: u64,
    shuffle: bool,
) -> Result<Vec<SequenceBatch>, DataError> {
    assert!(batch_size >= 1);
    if sequences.is_empty() {
        return Err(DataError::EmptyRecords);
    }
    let (la, da) = (sequences[0].audio.rows(), sequences[0].audio.cols());
    let (lv, dv) = (sequences[0].visual.rows(), sequences[0].visual.cols());
    for s in sequences {
        if s.audio.rows() != la || s.audio.cols() != da || s.visual.rows() != lv || s.visual.cols() != dv
        {
            return Err(DataError::InconsistentSequences(format!(
                "{}: [{}x{}]/[{}x{}] vs expected [{la}x{da}]/[{lv}x{dv}]",
                s.video_id,
                s.audio.rows(),
                s.audio.cols(),
                s.visual.rows(),
                s.visual.cols()
            )));
        }
    }
    let mut order: Vec<usize> = (0..sequences.len()).collect();
    if shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        order.shuffle(&mut rng);
    }
    let mut out = Vec::new();
    for chunk in order.chunks(batch_size) {
        let b = chunk.len();
        let mut xa = Vec::with_capacity(b * la * da);
        let mut xv = Vec::with_capacity(b * lv * dv);
        let mut labels = Vec::with_capacity(b);
        let mut ids = Vec::with_capacity(b);
        for &i in chunk {
            xa.extend_from_slice(sequences[i].audio.data());
            xv.extend_from_slice(sequences[i].visual.data());
            labels.push(sequences[i].label as f64);
            ids.push(sequences[i].video_id.clone());
        }
        out.push(SequenceBatch {
            x_audio: Tensor::new(vec![b, la, da], xa).expect("dims positive"),
            x_visual: Tensor::new(vec![b, lv, dv], xv).expect("dims positive"),
            labels,
            video_ids: ids,
        });
    }
    Ok(out)
}

// ── Synthetic generator ─────────────────────────────────────────────────

/// Latent-factor generator configuration. Each frame draws a shared latent
/// `z`; modality features are fixed random linear maps of `z` plus Gaussian
/// noise, and fake videos get an extra shift along a fixed direction in one
/// or both modalities.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_videos: usize,
    pub d_a: usize,
    pub d_v: usize,
    pub shared_dim: usize,
    pub fake_shift: f64,
    pub noise_sigma: f64,
    pub seed: u64,
    pub frames_visual: usize,
    pub frames_audio: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_videos: 200,
            d_a: 13,
            d_v: 24,
            shared_dim: 8,
            fake_shift: 5.0,
            noise_sigma: 1.0,
            seed: 17,
            frames_visual: 60,
            frames_audio: 120,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.num_videos == 0 || self.num_videos % 2 != 0 {
            return Err(DataError::BadSynthConfig(format!(
                "num_videos must be a positive even number for a 50/50 class balance, got {}",
                self.num_videos
            )));
        }
        if self.fake_shift < 0.0 {
            return Err(DataError::BadSynthConfig("fake_shift must be >= 0".into()));
        }
        if self.noise_sigma <= 0.0 {
            return Err(DataError::BadSynthConfig("noise_sigma must be > 0".into()));
        }
        if self.d_a == 0 || self.d_v == 0 || self.shared_dim == 0 {
            return Err(DataError::BadSynthConfig("dimensions must be positive".into()));
        }
        if self.frames_visual == 0 || self.frames_audio == 0 {
            return Err(DataError::BadSynthConfig("frame counts must be positive".into()));
        }
        Ok(())
    }
}

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

/// Fixed manipulation direction inside the latent image of one modality's
/// mixing map: a fake then looks like a plausible latent offset in that
/// modality alone, so the detectable evidence is mostly the inconsistency
/// with the other modality rather than a strong marginal artifact.
fn in_subspace_direction(rng: &mut ChaCha8Rng, map: &[f64], shared_dim: usize, d_m: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("valid params");
    let w: Vec<f64> = (0..shared_dim).map(|_| normal.sample(rng)).collect();
    let mut v = vec![0.0; d_m];
    for (k, &wk) in w.iter().enumerate() {
        for j in 0..d_m {
            v[j] += wk * map[k * d_m + j];
        }
    }
    normalize(v)
}

/// Fixed manipulation direction orthogonal to the latent image: a purely
/// modality-private artifact invisible to cross-modal comparison.
fn private_direction(rng: &mut ChaCha8Rng, map: &[f64], shared_dim: usize, d_m: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("valid params");
    // Orthonormal basis of the latent image (modified Gram-Schmidt over the
    // mixing-map rows), then remove that span from a random draw.
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(shared_dim);
    for k in 0..shared_dim {
        let mut row = map[k * d_m..(k + 1) * d_m].to_vec();
        for b in &basis {
            let dot: f64 = row.iter().zip(b).map(|(a, c)| a * c).sum();
            for (ri, &bi) in row.iter_mut().zip(b) {
                *ri -= dot * bi;
            }
        }
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            row.iter_mut().for_each(|x| *x /= norm);
            basis.push(row);
        }
    }
    let mut v: Vec<f64> = (0..d_m).map(|_| normal.sample(rng)).collect();
    for b in &basis {
        let dot: f64 = v.iter().zip(b).map(|(a, c)| a * c).sum();
        for (vi, &bi) in v.iter_mut().zip(b) {
            *vi -= dot * bi;
        }
    }
    normalize(v)
}

/// Deterministically generate a balanced synthetic dataset with a 70/15/15
/// train/val/test split and alternating real/fake labels.
pub fn synth_generate(cfg: &SynthConfig) -> Result<Vec<VideoRecord>, DataError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, 1.0).expect("valid params");
    let noise = Normal::new(0.0, cfg.noise_sigma).expect("sigma > 0");

    // Fixed per-dataset structure: mixing maps and manipulation directions.
    // The visual map runs at a larger scale than the audio map, giving the
    // two modalities genuinely heterogeneous feature distributions.
    let scale_a = 1.0 / (cfg.shared_dim as f64).sqrt();
    let scale_v = 3.0 / (cfg.shared_dim as f64).sqrt();
    let map_a: Vec<f64> = (0..cfg.shared_dim * cfg.d_a)
        .map(|_| normal.sample(&mut rng) * scale_a)
        .collect();
    let map_v: Vec<f64> = (0..cfg.shared_dim * cfg.d_v)
        .map(|_| normal.sample(&mut rng) * scale_v)
        .collect();
    // Audio manipulations leave a modality-private artifact; visual
    // manipulations mimic a plausible latent offset whose evidence is the
    // inconsistency with the unchanged audio stream.
    let dir_a = private_direction(&mut rng, &map_a, cfg.shared_dim, cfg.d_a);
    let dir_v = in_subspace_direction(&mut rng, &map_v, cfg.shared_dim, cfg.d_v);

    let n_train = (cfg.num_videos as f64 * 0.70).round() as usize;
    let n_val = (cfg.num_videos as f64 * 0.15).round() as usize;

    let mut records = Vec::with_capacity(cfg.num_videos);
    for idx in 0..cfg.num_videos {
        let label = (idx % 2) as u8;
        let split = if idx < n_train {
            Split::Train
        } else if idx < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
        // Fake manipulation target: audio only, visual only, or both.
        let manip = if label == 1 { rng.random_range(0..5u8) } else { 0 };
        let (shift_audio, shift_visual) = match (label, manip) {
            (1, 0) => (true, false),
            (1, 1 | 2) => (false, true),
            (1, _) => (true, true),
            _ => (false, false),
        };

        let frames = cfg.frames_visual.max(cfg.frames_audio);
        // One latent per underlying time step; each modality samples its own
        // frame count from the front of the latent sequence.
        let latents: Vec<Vec<f64>> = (0..frames)
            .map(|_| (0..cfg.shared_dim).map(|_| normal.sample(&mut rng)).collect())
            .collect();

        let gen_modality = |frames_m: usize, d_m: usize, map: &[f64], dir: &[f64], shifted: bool, rng: &mut ChaCha8Rng| {
            let mut data = Vec::with_capacity(frames_m * d_m);
            for t in 0..frames_m {
                // Map this modality's frame index onto the shared latent
                // timeline (both modalities span the same clip duration).
                let z = &latents[(t * frames / frames_m).min(frames - 1)];
                for j in 0..d_m {
                    let mut v = 0.0;
                    for (k, &zk) in z.iter().enumerate() {
                        v += zk * map[k * d_m + j];
                    }
                    v += noise.sample(rng);
                    if shifted {
                        v += cfg.fake_shift * dir[j];
                    }
                    data.push(v);
                }
            }
            Tensor::new(vec![frames_m, d_m], data).expect("dims positive")
        };

        let audio_features = gen_modality(cfg.frames_audio, cfg.d_a, &map_a, &dir_a, shift_audio, &mut rng);
        let visual_features = gen_modality(cfg.frames_visual, cfg.d_v, &map_v, &dir_v, shift_visual, &mut rng);

        records.push(VideoRecord {
            video_id: format!("v{idx:05}"),
            label,
            audio_features,
            visual_features,
            split,
        });
    }
    Ok(records)
}
