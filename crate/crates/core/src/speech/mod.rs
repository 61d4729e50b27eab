//! Per-word prosodic and raw acoustic feature extraction from aligned
//! mono audio, plus feature fusion and standardization.

pub mod dsp;
mod wav;

pub use wav::{read_wav_mono, write_wav_mono_16k};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use dsp::{
    estimate_f0, frame_log_energy, frame_signal, frame_signal_raw, mfcc, FRAME_MS, HOP_MS, N_MFCC,
};

#[derive(Debug, Error)]
pub enum SpeechError {
    #[error("clip too short: {samples} samples, need at least {needed}")]
    ClipTooShort { samples: usize, needed: usize },
    #[error("invalid audio clip: {0}")]
    InvalidClip(String),
    #[error("alignment out of range: word '{word}' [{t_start}, {t_end}] vs clip length {clip_s} s")]
    AlignmentRange {
        word: String,
        t_start: f64,
        t_end: f64,
        clip_s: f64,
    },
    #[error("invalid alignment: {0}")]
    InvalidAlignment(String),
    #[error("feature configuration error: {0}")]
    Configuration(String),
    #[error("audio io: {0}")]
    Io(String),
}

/// Mono audio, samples in [-1, 1].
#[derive(Clone, Debug)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self, SpeechError> {
        if sample_rate < 8000 {
            return Err(SpeechError::InvalidClip(format!(
                "sample rate {sample_rate} < 8000"
            )));
        }
        if samples.is_empty() {
            return Err(SpeechError::InvalidClip("empty clip".into()));
        }
        Ok(AudioClip {
            samples,
            sample_rate,
        })
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// One word with its time boundaries, as produced by forced alignment.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct WordAlignment {
    pub word: String,
    pub t_start: f64,
    pub t_end: f64,
}

pub const PROSODY_DIM: usize = 16;
pub const RAW_DIM: usize = 2 * N_MFCC;

/// 16 per-word prosodic statistics.
#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct ProsodyVector {
    pub f0_mean: f64,
    pub f0_std: f64,
    pub f0_min: f64,
    pub f0_max: f64,
    /// Hz/s, least squares over voiced frames; 0 with fewer than two.
    pub f0_slope: f64,
    pub voiced_fraction: f64,
    pub energy_mean: f64,
    pub energy_std: f64,
    pub energy_max: f64,
    pub energy_range: f64,
    pub duration_s: f64,
    pub pause_before_s: f64,
    pub pause_after_s: f64,
    /// word index / (T-1); 0 for single-word utterances.
    pub rel_position: f64,
    /// word f0_mean / utterance f0_mean; 1.0 when either is unvoiced.
    pub f0_mean_utt_norm: f64,
    pub energy_mean_utt_norm: f64,
}

impl ProsodyVector {
    pub fn to_vec(&self) -> Vec<f64> {
        vec![
            self.f0_mean,
            self.f0_std,
            self.f0_min,
            self.f0_max,
            self.f0_slope,
            self.voiced_fraction,
            self.energy_mean,
            self.energy_std,
            self.energy_max,
            self.energy_range,
            self.duration_s,
            self.pause_before_s,
            self.pause_after_s,
            self.rel_position,
            self.f0_mean_utt_norm,
            self.energy_mean_utt_norm,
        ]
    }

    pub fn from_vec(v: &[f64]) -> Result<Self, SpeechError> {
        if v.len() != PROSODY_DIM {
            return Err(SpeechError::Configuration(format!(
                "prosody vector length {} != {PROSODY_DIM}",
                v.len()
            )));
        }
        Ok(ProsodyVector {
            f0_mean: v[0],
            f0_std: v[1],
            f0_min: v[2],
            f0_max: v[3],
            f0_slope: v[4],
            voiced_fraction: v[5],
            energy_mean: v[6],
            energy_std: v[7],
            energy_max: v[8],
            energy_range: v[9],
            duration_s: v[10],
            pause_before_s: v[11],
            pause_after_s: v[12],
            rel_position: v[13],
            f0_mean_utt_norm: v[14],
            energy_mean_utt_norm: v[15],
        })
    }
}

/// Means and standard deviations of 13 MFCC-style coefficients per word.
pub type RawVector = Vec<f64>;

fn validate_alignment(clip: &AudioClip, alignment: &[WordAlignment]) -> Result<(), SpeechError> {
    let clip_s = clip.duration_s();
    let mut prev_end = 0.0;
    for w in alignment {
        if !(w.t_start >= 0.0 && w.t_start < w.t_end) {
            return Err(SpeechError::InvalidAlignment(format!(
                "word '{}' has t_start {} >= t_end {}",
                w.word, w.t_start, w.t_end
            )));
        }
        if w.t_start + 1e-9 < prev_end {
            return Err(SpeechError::InvalidAlignment(format!(
                "word '{}' overlaps previous word",
                w.word
            )));
        }
        if w.t_end > clip_s + 1e-9 {
            return Err(SpeechError::AlignmentRange {
                word: w.word.clone(),
                t_start: w.t_start,
                t_end: w.t_end,
                clip_s,
            });
        }
        prev_end = w.t_end;
    }
    Ok(())
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64;
    (m, v.sqrt())
}

/// Pitch analysis window: long enough to hold two periods at 60 Hz.
const PITCH_FRAME_MS: f64 = 40.0;

/// Per-word prosodic statistics over frames whose centers fall inside the
/// word's half-open interval [t_start, t_end).
pub fn extract_prosody(
    clip: &AudioClip,
    alignment: &[WordAlignment],
) -> Result<Vec<ProsodyVector>, SpeechError> {
    validate_alignment(clip, alignment)?;
    if alignment.is_empty() {
        return Ok(Vec::new());
    }
    let energy_frames = frame_signal_raw(&clip.samples, clip.sample_rate, FRAME_MS, HOP_MS)?;
    let pitch_frames = frame_signal_raw(&clip.samples, clip.sample_rate, PITCH_FRAME_MS, HOP_MS)?;
    let log_energies: Vec<(f64, f64)> = energy_frames
        .iter()
        .map(|f| (f.center_s, frame_log_energy(&f.samples)))
        .collect();
    let pitches: Vec<(f64, Option<f64>)> = pitch_frames
        .iter()
        .map(|f| (f.center_s, estimate_f0(&f.samples, clip.sample_rate).f0))
        .collect();

    let t = alignment.len();
    let clip_s = clip.duration_s();
    let mut out = Vec::with_capacity(t);
    let mut word_f0_means = Vec::with_capacity(t);
    let mut word_energy_means = Vec::with_capacity(t);
    for (i, w) in alignment.iter().enumerate() {
        let in_word = |c: f64| c >= w.t_start && c < w.t_end;
        let energies: Vec<f64> = log_energies
            .iter()
            .filter(|(c, _)| in_word(*c))
            .map(|(_, e)| *e)
            .collect();
        let word_pitch: Vec<(f64, Option<f64>)> = pitches
            .iter()
            .filter(|(c, _)| in_word(*c))
            .cloned()
            .collect();
        let voiced: Vec<(f64, f64)> = word_pitch
            .iter()
            .filter_map(|(c, f)| f.map(|f| (*c, f)))
            .collect();

        let (f0_mean, f0_std) = mean_std(&voiced.iter().map(|(_, f)| *f).collect::<Vec<_>>());
        let f0_min = voiced.iter().map(|(_, f)| *f).fold(f64::INFINITY, f64::min);
        let f0_max = voiced
            .iter()
            .map(|(_, f)| *f)
            .fold(f64::NEG_INFINITY, f64::max);
        let f0_slope = if voiced.len() >= 2 {
            let (tm, _) = mean_std(&voiced.iter().map(|(c, _)| *c).collect::<Vec<_>>());
            let (fm, _) = mean_std(&voiced.iter().map(|(_, f)| *f).collect::<Vec<_>>());
            let num: f64 = voiced.iter().map(|(c, f)| (c - tm) * (f - fm)).sum();
            let den: f64 = voiced.iter().map(|(c, _)| (c - tm).powi(2)).sum();
            if den > 1e-12 {
                num / den
            } else {
                0.0
            }
        } else {
            0.0
        };
        let voiced_fraction = if word_pitch.is_empty() {
            0.0
        } else {
            voiced.len() as f64 / word_pitch.len() as f64
        };
        let (energy_mean, energy_std) = mean_std(&energies);
        let energy_max = energies.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let energy_min = energies.iter().cloned().fold(f64::INFINITY, f64::min);

        let pause_before_s = if i == 0 {
            w.t_start
        } else {
            (w.t_start - alignment[i - 1].t_end).max(0.0)
        };
        let pause_after_s = if i + 1 == t {
            (clip_s - w.t_end).max(0.0)
        } else {
            (alignment[i + 1].t_start - w.t_end).max(0.0)
        };

        word_f0_means.push(if voiced.is_empty() { None } else { Some(f0_mean) });
        word_energy_means.push(if energies.is_empty() {
            None
        } else {
            Some(energy_mean)
        });
        out.push(ProsodyVector {
            f0_mean: if voiced.is_empty() { 0.0 } else { f0_mean },
            f0_std: if voiced.is_empty() { 0.0 } else { f0_std },
            f0_min: if voiced.is_empty() { 0.0 } else { f0_min },
            f0_max: if voiced.is_empty() { 0.0 } else { f0_max },
            f0_slope,
            voiced_fraction,
            energy_mean: if energies.is_empty() { 0.0 } else { energy_mean },
            energy_std: if energies.is_empty() { 0.0 } else { energy_std },
            energy_max: if energies.is_empty() { 0.0 } else { energy_max },
            energy_range: if energies.is_empty() {
                0.0
            } else {
                energy_max - energy_min
            },
            duration_s: w.t_end - w.t_start,
            pause_before_s,
            pause_after_s,
            rel_position: if t == 1 {
                0.0
            } else {
                i as f64 / (t - 1) as f64
            },
            f0_mean_utt_norm: 1.0,
            energy_mean_utt_norm: 1.0,
        });
    }

    let utt_f0: Vec<f64> = word_f0_means.iter().filter_map(|x| *x).collect();
    let utt_f0_mean = if utt_f0.is_empty() {
        0.0
    } else {
        utt_f0.iter().sum::<f64>() / utt_f0.len() as f64
    };
    let utt_energy: Vec<f64> = word_energy_means.iter().filter_map(|x| *x).collect();
    let utt_energy_mean = if utt_energy.is_empty() {
        0.0
    } else {
        utt_energy.iter().sum::<f64>() / utt_energy.len() as f64
    };
    for (i, pv) in out.iter_mut().enumerate() {
        pv.f0_mean_utt_norm = match (word_f0_means[i], utt_f0_mean.abs() > 1e-9) {
            (Some(f), true) => f / utt_f0_mean,
            _ => 1.0,
        };
        pv.energy_mean_utt_norm = match (word_energy_means[i], utt_energy_mean.abs() > 1e-9) {
            (Some(e), true) => e / utt_energy_mean,
            _ => 1.0,
        };
    }
    Ok(out)
}

/// Per-word mean and std of 13 MFCC-style coefficients.
pub fn extract_raw(
    clip: &AudioClip,
    alignment: &[WordAlignment],
) -> Result<Vec<RawVector>, SpeechError> {
    validate_alignment(clip, alignment)?;
    let frames = frame_signal(&clip.samples, clip.sample_rate, FRAME_MS, HOP_MS)?;
    let coeffs: Vec<(f64, Vec<f64>)> = frames
        .iter()
        .map(|f| (f.center_s, mfcc(&f.samples, clip.sample_rate)))
        .collect();
    let mut out = Vec::with_capacity(alignment.len());
    for w in alignment {
        let rows: Vec<&Vec<f64>> = coeffs
            .iter()
            .filter(|(c, _)| *c >= w.t_start && *c < w.t_end)
            .map(|(_, v)| v)
            .collect();
        let mut vec = vec![0.0; RAW_DIM];
        if !rows.is_empty() {
            for c in 0..N_MFCC {
                let col: Vec<f64> = rows.iter().map(|r| r[c]).collect();
                let (m, s) = mean_std(&col);
                vec[c] = m;
                vec[N_MFCC + c] = s;
            }
        }
        out.push(vec);
    }
    Ok(out)
}

/// Which acoustic features feed the model, alongside the text embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    Prosody,
    Raw,
    ProsodyRaw,
    /// Text embeddings only; the ablation baseline with no acoustic input.
    EmbedOnly,
}

impl FeatureMode {
    pub fn acoustic_dim(&self) -> usize {
        match self {
            FeatureMode::Prosody => PROSODY_DIM,
            FeatureMode::Raw => RAW_DIM,
            FeatureMode::ProsodyRaw => PROSODY_DIM + RAW_DIM,
            FeatureMode::EmbedOnly => 0,
        }
    }

    pub fn feature_dim(&self, d_embed: usize) -> usize {
        self.acoustic_dim() + d_embed
    }

    pub fn parse(s: &str) -> Result<Self, SpeechError> {
        match s {
            "prosody" => Ok(FeatureMode::Prosody),
            "raw" => Ok(FeatureMode::Raw),
            "prosody+raw" => Ok(FeatureMode::ProsodyRaw),
            "none" | "embed-only" => Ok(FeatureMode::EmbedOnly),
            other => Err(SpeechError::Configuration(format!(
                "unknown feature mode '{other}' (expected prosody|raw|prosody+raw|none)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            FeatureMode::Prosody => "prosody",
            FeatureMode::Raw => "raw",
            FeatureMode::ProsodyRaw => "prosody+raw",
            FeatureMode::EmbedOnly => "none",
        }
    }
}

/// Concatenate [prosody | raw | embed] in fixed order according to `mode`.
pub fn fuse(
    prosody: Option<&[f64]>,
    raw: Option<&[f64]>,
    embed: &[f64],
    mode: FeatureMode,
) -> Result<Vec<f64>, SpeechError> {
    let need_prosody = matches!(mode, FeatureMode::Prosody | FeatureMode::ProsodyRaw);
    let need_raw = matches!(mode, FeatureMode::Raw | FeatureMode::ProsodyRaw);
    let mut out = Vec::with_capacity(mode.feature_dim(embed.len()));
    if need_prosody {
        let p = prosody.ok_or_else(|| {
            SpeechError::Configuration(format!("mode {} requires prosody features", mode.name()))
        })?;
        if p.len() != PROSODY_DIM {
            return Err(SpeechError::Configuration(format!(
                "prosody length {} != {PROSODY_DIM}",
                p.len()
            )));
        }
        out.extend_from_slice(p);
    }
    if need_raw {
        let r = raw.ok_or_else(|| {
            SpeechError::Configuration(format!("mode {} requires raw features", mode.name()))
        })?;
        if r.len() != RAW_DIM {
            return Err(SpeechError::Configuration(format!(
                "raw length {} != {RAW_DIM}",
                r.len()
            )));
        }
        out.extend_from_slice(r);
    }
    out.extend_from_slice(embed);
    Ok(out)
}

/// Per-dimension standardization fitted on the training split.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub const STD_FLOOR: f64 = 1e-6;

impl Normalizer {
    pub fn fit(vectors: &[Vec<f64>]) -> Result<Self, SpeechError> {
        let d = vectors
            .first()
            .ok_or_else(|| SpeechError::Configuration("cannot fit normalizer on empty set".into()))?
            .len();
        let n = vectors.len() as f64;
        let mut mean = vec![0.0; d];
        for v in vectors {
            if v.len() != d {
                return Err(SpeechError::Configuration("inconsistent dimensions".into()));
            }
            for (m, x) in mean.iter_mut().zip(v) {
                *m += x;
            }
        }
        for m in &mut mean {
            *m /= n;
        }
        let mut std = vec![0.0; d];
        for v in vectors {
            for ((s, x), m) in std.iter_mut().zip(v).zip(&mean) {
                *s += (x - m).powi(2);
            }
        }
        for s in &mut std {
            *s = (*s / n).sqrt().max(STD_FLOOR);
        }
        Ok(Normalizer { mean, std })
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        v.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((x, m), s)| (x - m) / s)
            .collect()
    }

    pub fn identity(d: usize) -> Self {
        Normalizer {
            mean: vec![0.0; d],
            std: vec![1.0; d],
        }
    }
}
