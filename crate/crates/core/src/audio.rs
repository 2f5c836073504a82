//! MFCC extraction from raw mono audio: 25 ms Hamming windows with a 10 ms
//! hop, power spectrum, triangular mel filterbank on the HTK scale, log with
//! floor, and a type-II DCT.

use crate::tensor::Tensor;
use std::io::Read;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("not a RIFF/WAVE file: {0}")]
    BadHeader(String),
    #[error("only single-channel audio is supported, file has {channels} channels")]
    Multichannel { channels: u16 },
    #[error("unsupported WAV encoding: format {format}, {bits} bits per sample")]
    UnsupportedFormat { format: u16, bits: u16 },
    #[error("clip of {samples} samples is shorter than one {window}-sample window")]
    ClipTooShort { samples: usize, window: usize },
    #[error("invalid MFCC configuration: {0}")]
    BadConfig(String),
}

/// Single-channel audio in [-1, 1].
#[derive(Debug, Clone)]
pub struct AudioClip {
    pub sample_rate: u32,
    pub samples: Vec<f64>,
}

/// MFCC extraction settings. The window/hop pair is fixed at 25 ms / 10 ms;
/// everything else is overridable.
#[derive(Debug, Clone)]
pub struct MfccConfig {
    pub num_mels: usize,
    pub num_coeffs: usize,
    pub fft_size: usize,
    /// Upper edge of the filterbank in Hz; capped at Nyquist.
    pub fmax: f64,
}

impl Default for MfccConfig {
    fn default() -> Self {
        MfccConfig {
            num_mels: 26,
            num_coeffs: 13,
            fft_size: 512,
            fmax: 8000.0,
        }
    }
}

pub const FRAME_LEN_SECONDS: f64 = 0.025;
pub const FRAME_HOP_SECONDS: f64 = 0.010;
/// Power-spectrum floor applied before the log.
pub const LOG_FLOOR: f64 = 1e-10;

/// Per-frame MFCC vectors for one clip.
#[derive(Debug, Clone)]
pub struct MfccFrameSeries {
    /// `[num_frames x num_coefficients]`.
    pub frames: Tensor,
    pub frame_len_seconds: f64,
    pub frame_hop_seconds: f64,
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular mel filterbank over FFT power bins.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    /// Dense weights, `num_mels` rows of `fft_size / 2 + 1` bins.
    pub weights: Vec<Vec<f64>>,
    pub centers_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(sample_rate: u32, cfg: &MfccConfig) -> Result<Self, AudioError> {
        let nyquist = sample_rate as f64 / 2.0;
        let fmax = cfg.fmax.min(nyquist);
        let n_bins = cfg.fft_size / 2 + 1;
        let mel_lo = hz_to_mel(0.0);
        let mel_hi = hz_to_mel(fmax);
        let edges: Vec<f64> = (0..cfg.num_mels + 2)
            .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (cfg.num_mels + 1) as f64))
            .collect();
        let bin_hz = sample_rate as f64 / cfg.fft_size as f64;
        let mut weights = Vec::with_capacity(cfg.num_mels);
        for m in 0..cfg.num_mels {
            let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            let mut row = vec![0.0; n_bins];
            let mut sum = 0.0;
            for (k, w) in row.iter_mut().enumerate() {
                let f = k as f64 * bin_hz;
                let v = if f > lo && f < center {
                    (f - lo) / (center - lo)
                } else if f >= center && f < hi {
                    (hi - f) / (hi - center)
                } else {
                    0.0
                };
                *w = v;
                sum += v;
            }
            if sum == 0.0 {
                return Err(AudioError::BadConfig(format!(
                    "mel filter {m} ({lo:.1}-{hi:.1} Hz) covers no FFT bin; \
                     increase fft_size or reduce num_mels"
                )));
            }
            weights.push(row);
        }
        Ok(MelFilterbank {
            weights,
            centers_hz: edges[1..=cfg.num_mels].to_vec(),
        })
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.weights.iter().map(|r| r.iter().sum()).collect()
    }
}

/// Slice a clip into Hamming-windowed frames of 25 ms every 10 ms.
///
/// Returns a `[num_frames x window_len]` matrix with
/// `num_frames = floor((n - window) / hop) + 1`.
pub fn frame_and_window(clip: &AudioClip) -> Result<Tensor, AudioError> {
    let window = (FRAME_LEN_SECONDS * clip.sample_rate as f64).round() as usize;
    let hop = (FRAME_HOP_SECONDS * clip.sample_rate as f64).round() as usize;
    if clip.samples.len() < window {
        return Err(AudioError::ClipTooShort {
            samples: clip.samples.len(),
            window,
        });
    }
    let num_frames = (clip.samples.len() - window) / hop + 1;
    let hamming: Vec<f64> = (0..window)
        .map(|i| {
            0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / (window - 1) as f64).cos()
        })
        .collect();
    let mut data = Vec::with_capacity(num_frames * window);
    for f in 0..num_frames {
        let at = f * hop;
        for i in 0..window {
            data.push(clip.samples[at + i] * hamming[i]);
        }
    }
    Ok(Tensor::new(vec![num_frames, window], data).expect("frame dims positive"))
}

/// Log mel filterbank energies per frame, `[num_frames x num_mels]`.
///
/// Power-spectrum bins are floored at [`LOG_FLOOR`] before filtering, which
/// keeps silence finite: an all-zero frame yields exactly
/// `ln(LOG_FLOOR * row_sum)` per filter.
pub fn log_mel_energies(clip: &AudioClip, cfg: &MfccConfig) -> Result<Tensor, AudioError> {
    if clip.sample_rate < 8000 {
        return Err(AudioError::BadConfig(format!(
            "sample rate {} below the 8 kHz minimum",
            clip.sample_rate
        )));
    }
    if cfg.num_coeffs == 0 || cfg.num_coeffs > cfg.num_mels {
        return Err(AudioError::BadConfig(format!(
            "need 1 <= num_coeffs <= num_mels, got {} / {}",
            cfg.num_coeffs, cfg.num_mels
        )));
    }
    if !cfg.fft_size.is_power_of_two() {
        return Err(AudioError::BadConfig(format!(
            "fft_size {} is not a power of two",
            cfg.fft_size
        )));
    }
    let frames = frame_and_window(clip)?;
    let window = frames.cols();
    if cfg.fft_size < window {
        return Err(AudioError::BadConfig(format!(
            "fft_size {} smaller than the {window}-sample window",
            cfg.fft_size
        )));
    }
    let bank = MelFilterbank::new(clip.sample_rate, cfg)?;
    let n_bins = cfg.fft_size / 2 + 1;
    let num_frames = frames.rows();
    let mut out = Vec::with_capacity(num_frames * cfg.num_mels);
    let mut re = vec![0.0; cfg.fft_size];
    let mut im = vec![0.0; cfg.fft_size];
    for f in 0..num_frames {
        re[..window].copy_from_slice(&frames.data()[f * window..(f + 1) * window]);
        re[window..].fill(0.0);
        im.fill(0.0);
        fft_in_place(&mut re, &mut im);
        let power: Vec<f64> = (0..n_bins)
            .map(|k| (re[k] * re[k] + im[k] * im[k]).max(LOG_FLOOR))
            .collect();
        for row in &bank.weights {
            let energy: f64 = row.iter().zip(&power).map(|(&w, &p)| w * p).sum();
            out.push(energy.ln());
        }
    }
    Ok(Tensor::new(vec![num_frames, cfg.num_mels], out).expect("dims positive"))
}

/// Full MFCC pipeline: log mel energies decorrelated by a type-II DCT, first
/// `num_coeffs` coefficients kept.
pub fn mfcc(clip: &AudioClip, cfg: &MfccConfig) -> Result<MfccFrameSeries, AudioError> {
    let log_mels = log_mel_energies(clip, cfg)?;
    let (num_frames, n_mels) = (log_mels.rows(), log_mels.cols());
    let mut data = Vec::with_capacity(num_frames * cfg.num_coeffs);
    for f in 0..num_frames {
        let row = &log_mels.data()[f * n_mels..(f + 1) * n_mels];
        for k in 0..cfg.num_coeffs {
            data.push(dct2_coefficient(row, k));
        }
    }
    Ok(MfccFrameSeries {
        frames: Tensor::new(vec![num_frames, cfg.num_coeffs], data).expect("dims positive"),
        frame_len_seconds: FRAME_LEN_SECONDS,
        frame_hop_seconds: FRAME_HOP_SECONDS,
    })
}

/// k-th type-II DCT coefficient of `x`.
pub fn dct2_coefficient(x: &[f64], k: usize) -> f64 {
    let m = x.len() as f64;
    x.iter()
        .enumerate()
        .map(|(n, &v)| v * (std::f64::consts::PI * k as f64 * (n as f64 + 0.5) / m).cos())
        .sum()
}

/// Iterative radix-2 FFT, in place over split real/imaginary buffers.
fn fft_in_place(re: &mut [f64], im: &mut [f64]) {
    let n = re.len();
    debug_assert!(n.is_power_of_two());
    // Bit-reversal permutation.
    let mut j = 0usize;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
        if i < j {
            re.swap(i, j);
            im.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let ang = -2.0 * std::f64::consts::PI / len as f64;
        let (wr, wi) = (ang.cos(), ang.sin());
        let mut i = 0;
        while i < n {
            let (mut cr, mut ci) = (1.0f64, 0.0f64);
            for k in 0..len / 2 {
                let (ur, ui) = (re[i + k], im[i + k]);
                let (vr, vi) = (
                    re[i + k + len / 2] * cr - im[i + k + len / 2] * ci,
                    re[i + k + len / 2] * ci + im[i + k + len / 2] * cr,
                );
                re[i + k] = ur + vr;
                im[i + k] = ui + vi;
                re[i + k + len / 2] = ur - vr;
                im[i + k + len / 2] = ui - vi;
                let ncr = cr * wr - ci * wi;
                ci = cr * wi + ci * wr;
                cr = ncr;
            }
            i += len;
        }
        len <<= 1;
    }
}

// ── WAV input ───────────────────────────────────────────────────────────

/// Read a single-channel PCM WAV file (16-bit integer or 32-bit float).
pub fn read_wav(path: &Path) -> Result<AudioClip, AudioError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|source| AudioError::Io {
            path: path.display().to_string(),
            source,
        })?;
    parse_wav(&bytes)
}

pub fn parse_wav(bytes: &[u8]) -> Result<AudioClip, AudioError> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(AudioError::BadHeader("missing RIFF/WAVE magic".into()));
    }
    let mut fmt: Option<(u16, u16, u32, u16)> = None; // format, channels, rate, bits
    let mut data: Option<&[u8]> = None;
    let mut at = 12;
    while at + 8 <= bytes.len() {
        let id = &bytes[at..at + 4];
        let size = u32::from_le_bytes(bytes[at + 4..at + 8].try_into().unwrap()) as usize;
        let body_end = (at + 8 + size).min(bytes.len());
        let body = &bytes[at + 8..body_end];
        match id {
            b"fmt " => {
                if body.len() < 16 {
                    return Err(AudioError::BadHeader("fmt chunk too short".into()));
                }
                fmt = Some((
                    u16::from_le_bytes(body[0..2].try_into().unwrap()),
                    u16::from_le_bytes(body[2..4].try_into().unwrap()),
                    u32::from_le_bytes(body[4..8].try_into().unwrap()),
                    u16::from_le_bytes(body[14..16].try_into().unwrap()),
                ));
            }
            b"data" => data = Some(body),
            _ => {}
        }
        // Chunks are word-aligned.
        at += 8 + size + (size & 1);
    }
    let (format, channels, rate, bits) =
        fmt.ok_or_else(|| AudioError::BadHeader("no fmt chunk".into()))?;
    let body = data.ok_or_else(|| AudioError::BadHeader("no data chunk".into()))?;
    if channels != 1 {
        return Err(AudioError::Multichannel { channels });
    }
    let samples = match (format, bits) {
        (1, 16) => body
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / 32768.0)
            .collect(),
        (3, 32) => body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect(),
        _ => return Err(AudioError::UnsupportedFormat { format, bits }),
    };
    Ok(AudioClip {
        sample_rate: rate,
        samples,
    })
}
