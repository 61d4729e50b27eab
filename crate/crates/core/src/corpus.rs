//! Synthetic ambiguous-instruction corpus: every instruction has two
//! interpretations that share a token sequence but differ in which
//! referents are GOAL vs DETAIL; prosodic emphasis carries the
//! disambiguating signal. Samples render either directly to prosody
//! features or to synthesized WAV audio plus alignments.

use std::collections::BTreeSet;
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::embed::{embed_utterance, EmbedError, EmbeddingSource};
use crate::speech::{
    extract_prosody, extract_raw, fuse, write_wav_mono_16k, AudioClip, FeatureMode, Normalizer,
    ProsodyVector, SpeechError, WordAlignment, RAW_DIM,
};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("vocabulary exhausted: cannot build {requested} distinct instructions (max {max})")]
    Capacity { requested: usize, max: usize },
    #[error("invalid split: {0}")]
    Split(String),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("io: {0}")]
    Io(String),
    #[error(transparent)]
    Speech(#[from] SpeechError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

/// Token-level intent label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Hash)]
pub enum Label {
    O,
    GOAL,
    DETAIL,
}

impl Label {
    pub fn index(self) -> usize {
        match self {
            Label::O => 0,
            Label::GOAL => 1,
            Label::DETAIL => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Label> {
        match i {
            0 => Some(Label::O),
            1 => Some(Label::GOAL),
            2 => Some(Label::DETAIL),
            _ => None,
        }
    }

    pub const COUNT: usize = 3;
}

/// Decoder-side start-of-sequence symbol (index into a 4-row embedding).
pub const SOS_INDEX: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Hash)]
pub enum Interpretation {
    A,
    B,
}

/// One spoken instruction sample.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct UtteranceSample {
    pub id: String,
    pub instruction_id: u32,
    pub interpretation: Interpretation,
    pub speaker_id: u32,
    pub words: Vec<WordAlignment>,
    pub labels: Vec<Label>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub prosody: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub raw: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub audio_path: Option<String>,
}

/// The referent slots of the fixed instruction template
/// "(verb) the (x) (rel) the (y) (rel2) the (z)".
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InstructionParts {
    pub verb: String,
    pub x: String,
    pub rel: String,
    pub y: String,
    pub rel2: String,
    pub z: String,
}

pub const TEMPLATE_LEN: usize = 9;
const SLOT_X: usize = 2;
const SLOT_Y: usize = 5;
const SLOT_Z: usize = 8;

impl UtteranceSample {
    pub fn tokens(&self) -> Vec<String> {
        self.words.iter().map(|w| w.word.clone()).collect()
    }

    pub fn parts(&self) -> Option<InstructionParts> {
        if self.words.len() != TEMPLATE_LEN {
            return None;
        }
        let w = |i: usize| self.words[i].word.clone();
        Some(InstructionParts {
            verb: w(0),
            x: w(SLOT_X),
            rel: w(3),
            y: w(SLOT_Y),
            rel2: w(6),
            z: w(SLOT_Z),
        })
    }
}

const VERBS: &[&str] = &[
    "place", "put", "move", "set", "bring", "shift", "carry", "drop", "position", "rest",
];
const RELATIONS: &[&str] = &["beside", "on", "near", "under"];
const OBJECTS: &[&str] = &[
    "coke", "pringles", "counter", "mug", "plate", "bowl", "spoon", "fork", "knife", "towel",
    "sponge", "jar", "bottle", "cup", "tray", "napkin", "apple", "banana", "orange", "lemon",
    "box", "book", "lamp", "phone", "remote", "keys", "wallet", "glass", "pitcher", "kettle",
    "pan", "pot", "lid", "cloth", "brush", "soap", "basket", "bin", "shelf", "table", "stool",
    "chair", "cushion", "pillow", "vase", "plant", "candle", "clock", "radio", "speaker",
    "charger", "cable", "marker", "pen", "pencil", "notebook", "folder", "stapler", "ruler",
    "scissors",
];

/// How generated samples are materialized.
#[derive(Clone, Debug)]
pub enum RenderMode {
    /// Emit prosody/raw feature vectors directly.
    Features,
    /// Synthesize WAV audio + alignment JSON into `dir`, then extract
    /// features through the speech pipeline.
    Audio { dir: PathBuf },
}

/// One word of a planned spoken realization, before rendering.
#[derive(Clone, Debug)]
struct SpokenWord {
    token: String,
    content: bool,
    f0: f64,
    duration: f64,
    pre_pause: f64,
    log_energy: f64,
}

fn labels_for(interp: Interpretation) -> Vec<Label> {
    let mut labels = vec![Label::O; TEMPLATE_LEN];
    labels[SLOT_X] = Label::GOAL;
    match interp {
        Interpretation::A => {
            labels[SLOT_Y] = Label::GOAL;
            labels[SLOT_Z] = Label::DETAIL;
        }
        Interpretation::B => {
            labels[SLOT_Y] = Label::DETAIL;
            labels[SLOT_Z] = Label::GOAL;
        }
    }
    labels
}

struct SpeakerProfile {
    base_f0: f64,
    rate: f64,
    energy_offset: f64,
}

fn normal(rng: &mut ChaCha8Rng, mean: f64, std: f64) -> f64 {
    Normal::new(mean, std).unwrap().sample(rng)
}

/// Multiplicative field noise, 3 percent.
fn jitter(rng: &mut ChaCha8Rng, v: f64) -> f64 {
    v * (1.0 + normal(rng, 0.0, 0.03))
}

/// Generate the corpus: `2 * n_instructions * n_speakers` samples.
pub fn generate_corpus(
    n_instructions: usize,
    n_speakers: usize,
    seed: u64,
    render: &RenderMode,
) -> Result<Vec<UtteranceSample>, CorpusError> {
    assert!(n_instructions >= 1 && n_speakers >= 1);
    let max = VERBS.len() * RELATIONS.len() * RELATIONS.len() * OBJECTS.len();
    if n_instructions > max {
        return Err(CorpusError::Capacity {
            requested: n_instructions,
            max,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Distinct instruction tuples.
    let mut seen = BTreeSet::new();
    let mut instructions = Vec::with_capacity(n_instructions);
    let mut attempts = 0usize;
    while instructions.len() < n_instructions {
        attempts += 1;
        if attempts > 1000 * n_instructions + 10_000 {
            return Err(CorpusError::Capacity {
                requested: n_instructions,
                max,
            });
        }
        let verb = VERBS[rng.gen_range(0..VERBS.len())].to_string();
        let rel = RELATIONS[rng.gen_range(0..RELATIONS.len())].to_string();
        let rel2 = RELATIONS[rng.gen_range(0..RELATIONS.len())].to_string();
        let mut objs: Vec<&str> = OBJECTS.to_vec();
        objs.shuffle(&mut rng);
        let (x, y, z) = (objs[0].to_string(), objs[1].to_string(), objs[2].to_string());
        let key = (verb.clone(), x.clone(), rel.clone(), y.clone(), rel2.clone(), z.clone());
        if seen.insert(key) {
            instructions.push(InstructionParts { verb, x, rel, y, rel2, z });
        }
    }

    let speakers: Vec<SpeakerProfile> = (0..n_speakers)
        .map(|_| SpeakerProfile {
            base_f0: rng.gen_range(110.0..250.0),
            rate: rng.gen_range(0.9..1.15),
            energy_offset: normal(&mut rng, 0.0, 0.2),
        })
        .collect();

    let mut samples = Vec::with_capacity(2 * n_instructions * n_speakers);
    for (ii, parts) in instructions.iter().enumerate() {
        let tokens = [
            parts.verb.as_str(),
            "the",
            parts.x.as_str(),
            parts.rel.as_str(),
            "the",
            parts.y.as_str(),
            parts.rel2.as_str(),
            "the",
            parts.z.as_str(),
        ];
        for (si, speaker) in speakers.iter().enumerate() {
            for interp in [Interpretation::A, Interpretation::B] {
                let labels = labels_for(interp);
                let spoken: Vec<SpokenWord> = tokens
                    .iter()
                    .zip(&labels)
                    .enumerate()
                    .map(|(wi, (tok, label))| {
                        let content = matches!(wi, SLOT_X | SLOT_Y | SLOT_Z);
                        let mut f0 = speaker.base_f0 * rng.gen_range(0.9..1.1);
                        let mut duration = if content {
                            rng.gen_range(0.28..0.40)
                        } else {
                            rng.gen_range(0.12..0.20)
                        } * speaker.rate;
                        let mut pre_pause = if wi == 0 {
                            rng.gen_range(0.02..0.08)
                        } else {
                            rng.gen_range(0.01..0.04)
                        };
                        let log_energy = normal(&mut rng, -2.5, 0.3) + speaker.energy_offset;
                        match label {
                            Label::GOAL => {
                                f0 *= normal(&mut rng, 1.25, 0.05);
                                duration *= normal(&mut rng, 1.30, 0.05);
                                pre_pause += rng.gen_range(0.12..0.20);
                            }
                            Label::DETAIL => {
                                f0 *= normal(&mut rng, 0.95, 0.05);
                            }
                            Label::O => {}
                        }
                        f0 = jitter(&mut rng, f0).clamp(80.0, 380.0);
                        duration = jitter(&mut rng, duration).max(0.05);
                        pre_pause = jitter(&mut rng, pre_pause).max(0.0);
                        SpokenWord {
                            token: tok.to_string(),
                            content,
                            f0,
                            duration,
                            pre_pause,
                            log_energy: jitter(&mut rng, log_energy),
                        }
                    })
                    .collect();
                let trailing_silence = rng.gen_range(0.05..0.10);
                let voiced_fracs: Vec<f64> = spoken
                    .iter()
                    .map(|w| {
                        let base = if w.content { 0.90 } else { 0.75 };
                        (base + normal(&mut rng, 0.0, 0.05)).clamp(0.0, 1.0)
                    })
                    .collect();
                // All remaining randomness is drawn here, in a fixed order,
                // so the stream is identical across render modes.
                let f0_slopes: Vec<f64> =
                    spoken.iter().map(|_| normal(&mut rng, 0.0, 15.0)).collect();
                let synth_raw: Vec<Vec<f64>> = spoken
                    .iter()
                    .map(|w| {
                        let base = crate::embed::pseudo_embed(&w.token, RAW_DIM, 0x5261_7746)
                            .expect("non-empty token");
                        base.values()
                            .iter()
                            .enumerate()
                            .map(|(i, v)| {
                                let scale = if i == 0 { 10.0 } else { 3.0 };
                                let offset = if i == 0 { -20.0 } else { 0.0 };
                                offset
                                    + scale * v * (RAW_DIM as f64).sqrt()
                                    + normal(&mut rng, 0.0, 0.3)
                            })
                            .collect()
                    })
                    .collect();

                let interp_tag = match interp {
                    Interpretation::A => "A",
                    Interpretation::B => "B",
                };
                let id = format!("i{ii:03}_{interp_tag}_s{si:02}");
                let sample = render_sample(
                    &id,
                    ii as u32,
                    interp,
                    si as u32,
                    &spoken,
                    &labels,
                    &voiced_fracs,
                    &f0_slopes,
                    synth_raw,
                    trailing_silence,
                    render,
                )?;
                samples.push(sample);
            }
        }
    }
    Ok(samples)
}

#[allow(clippy::too_many_arguments)]
fn render_sample(
    id: &str,
    instruction_id: u32,
    interpretation: Interpretation,
    speaker_id: u32,
    spoken: &[SpokenWord],
    labels: &[Label],
    voiced_fracs: &[f64],
    f0_slopes: &[f64],
    synth_raw: Vec<Vec<f64>>,
    trailing_silence: f64,
    render: &RenderMode,
) -> Result<UtteranceSample, CorpusError> {
    // Word timeline.
    let mut words = Vec::with_capacity(spoken.len());
    let mut t = 0.0;
    for w in spoken {
        let t_start = t + w.pre_pause;
        let t_end = t_start + w.duration;
        words.push(WordAlignment {
            word: w.token.clone(),
            t_start,
            t_end,
        });
        t = t_end;
    }
    let clip_end = t + trailing_silence;

    match render {
        RenderMode::Features => {
            let t_count = spoken.len();
            let utt_f0 = spoken.iter().map(|w| w.f0).sum::<f64>() / t_count as f64;
            let utt_energy = spoken.iter().map(|w| w.log_energy).sum::<f64>() / t_count as f64;
            let prosody: Vec<Vec<f64>> = spoken
                .iter()
                .enumerate()
                .map(|(i, w)| {
                    let f0_std = 0.02 * w.f0;
                    let energy_std = 0.25;
                    ProsodyVector {
                        f0_mean: w.f0,
                        f0_std,
                        f0_min: w.f0 - 1.5 * f0_std,
                        f0_max: w.f0 + 1.5 * f0_std,
                        f0_slope: f0_slopes[i],
                        voiced_fraction: voiced_fracs[i],
                        energy_mean: w.log_energy,
                        energy_std,
                        energy_max: w.log_energy + 1.5 * energy_std,
                        energy_range: 3.0 * energy_std,
                        duration_s: w.duration,
                        pause_before_s: if i == 0 {
                            words[0].t_start
                        } else {
                            words[i].t_start - words[i - 1].t_end
                        },
                        pause_after_s: if i + 1 == t_count {
                            clip_end - words[i].t_end
                        } else {
                            words[i + 1].t_start - words[i].t_end
                        },
                        rel_position: i as f64 / (t_count - 1) as f64,
                        f0_mean_utt_norm: w.f0 / utt_f0,
                        energy_mean_utt_norm: w.log_energy / utt_energy,
                    }
                    .to_vec()
                })
                .collect();
            Ok(UtteranceSample {
                id: id.to_string(),
                instruction_id,
                interpretation,
                speaker_id,
                words,
                labels: labels.to_vec(),
                prosody: Some(prosody),
                raw: Some(synth_raw),
                audio_path: None,
            })
        }
        RenderMode::Audio { dir } => {
            let sr = 16000u32;
            let n = (clip_end * sr as f64).ceil() as usize;
            let mut samples_audio = vec![0.0f64; n];
            for (w, al) in spoken.iter().zip(&words) {
                let amp = (2.0 * w.log_energy.exp()).sqrt().clamp(0.05, 0.9);
                let start = (al.t_start * sr as f64).round() as usize;
                let end = ((al.t_end * sr as f64).round() as usize).min(n);
                let len = end.saturating_sub(start);
                for k in 0..len {
                    // Short cosine fade at the edges keeps clicks out of
                    // the energy statistics.
                    let fade_len = (0.005 * sr as f64) as usize;
                    let fade = if k < fade_len {
                        k as f64 / fade_len as f64
                    } else if len - 1 - k < fade_len {
                        (len - 1 - k) as f64 / fade_len as f64
                    } else {
                        1.0
                    };
                    samples_audio[start + k] = fade
                        * amp
                        * (2.0 * std::f64::consts::PI * w.f0 * k as f64 / sr as f64).sin();
                }
            }
            std::fs::create_dir_all(dir).map_err(|e| CorpusError::Io(e.to_string()))?;
            let wav_path = dir.join(format!("{id}.wav"));
            write_wav_mono_16k(&wav_path, &samples_audio)?;
            let align_path = dir.join(format!("{id}.align.json"));
            let align_json = serde_json::to_string_pretty(&words)
                .map_err(|e| CorpusError::Io(e.to_string()))?;
            std::fs::write(&align_path, align_json).map_err(|e| CorpusError::Io(e.to_string()))?;

            let clip = AudioClip::new(samples_audio, sr)?;
            let prosody = extract_prosody(&clip, &words)?
                .iter()
                .map(|p| p.to_vec())
                .collect();
            let raw = extract_raw(&clip, &words)?;
            Ok(UtteranceSample {
                id: id.to_string(),
                instruction_id,
                interpretation,
                speaker_id,
                words,
                labels: labels.to_vec(),
                prosody: Some(prosody),
                raw: Some(raw),
                audio_path: Some(wav_path.to_string_lossy().into_owned()),
            })
        }
    }
}

/// Train/val/test fractions over instruction ids.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(train: f64, val: f64, test: f64, seed: u64) -> Result<Self, CorpusError> {
        if !(train > 0.0 && val > 0.0 && test > 0.0) || (train + val + test - 1.0).abs() > 1e-9 {
            return Err(CorpusError::Split(format!(
                "fractions {train}/{val}/{test} must be positive and sum to 1"
            )));
        }
        Ok(SplitSpec {
            train,
            val,
            test,
            seed,
        })
    }
}

/// Instruction-held-out split: an instruction id lands in exactly one
/// split, both interpretations and all speakers together.
pub fn split_by_instruction(
    samples: &[UtteranceSample],
    spec: &SplitSpec,
) -> Result<(Vec<UtteranceSample>, Vec<UtteranceSample>, Vec<UtteranceSample>), CorpusError> {
    let mut ids: Vec<u32> = samples
        .iter()
        .map(|s| s.instruction_id)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let n = ids.len();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    ids.shuffle(&mut rng);

    // Largest-remainder apportionment of instruction ids.
    let fracs = [spec.train, spec.val, spec.test];
    let mut counts: Vec<usize> = fracs.iter().map(|f| (f * n as f64).floor() as usize).collect();
    let mut rem: Vec<(usize, f64)> = fracs
        .iter()
        .enumerate()
        .map(|(i, f)| (i, f * n as f64 - counts[i] as f64))
        .collect();
    rem.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    let mut leftover = n - counts.iter().sum::<usize>();
    for (i, _) in rem {
        if leftover == 0 {
            break;
        }
        counts[i] += 1;
        leftover -= 1;
    }
    if counts.iter().any(|&c| c == 0) {
        return Err(CorpusError::Split(format!(
            "split of {n} instructions at {fracs:?} leaves an empty split"
        )));
    }
    let train_ids: BTreeSet<u32> = ids[..counts[0]].iter().cloned().collect();
    let val_ids: BTreeSet<u32> = ids[counts[0]..counts[0] + counts[1]].iter().cloned().collect();
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut test = Vec::new();
    for s in samples {
        if train_ids.contains(&s.instruction_id) {
            train.push(s.clone());
        } else if val_ids.contains(&s.instruction_id) {
            val.push(s.clone());
        } else {
            test.push(s.clone());
        }
    }
    Ok((train, val, test))
}

/// Padded minibatch with validity mask.
#[derive(Clone, Debug)]
pub struct Batch {
    /// B x T_max x d, zero right-padded.
    pub features: Tensor,
    /// B x T_max label indices; 0 at padded positions.
    pub targets: Vec<Vec<usize>>,
    /// B x T_max; true exactly at real positions.
    pub mask: Vec<Vec<bool>>,
}

/// Right-pad a set of feature sequences with zeros.
pub fn pad_batch(
    sequences: &[(Vec<Vec<f64>>, Vec<usize>)],
    d: usize,
) -> Result<Batch, CorpusError> {
    let b = sequences.len();
    let t_max = sequences.iter().map(|(f, _)| f.len()).max().unwrap_or(0);
    let mut data = vec![0.0; b * t_max * d];
    let mut targets = vec![vec![0usize; t_max]; b];
    let mut mask = vec![vec![false; t_max]; b];
    for (bi, (feats, labs)) in sequences.iter().enumerate() {
        if feats.len() != labs.len() {
            return Err(CorpusError::Dimension(format!(
                "sample {bi}: {} features vs {} labels",
                feats.len(),
                labs.len()
            )));
        }
        for (ti, f) in feats.iter().enumerate() {
            if f.len() != d {
                return Err(CorpusError::Dimension(format!(
                    "sample {bi} word {ti}: feature length {} != {d}",
                    f.len()
                )));
            }
            data[(bi * t_max + ti) * d..(bi * t_max + ti + 1) * d].copy_from_slice(f);
            targets[bi][ti] = labs[ti];
            mask[bi][ti] = true;
        }
    }
    let features = Tensor::new(vec![b, t_max.max(1), d], if t_max == 0 { vec![0.0; b * d] } else { data })
        .map_err(|e| CorpusError::Dimension(e.to_string()))?;
    Ok(Batch {
        features,
        targets,
        mask,
    })
}

/// Fused, optionally standardized feature sequence for one sample.
pub fn featurize(
    sample: &UtteranceSample,
    mode: FeatureMode,
    source: &EmbeddingSource,
    normalizer: Option<&Normalizer>,
) -> Result<Vec<Vec<f64>>, CorpusError> {
    let tokens = sample.tokens();
    let (embeds, _misses) = embed_utterance(&tokens, source)?;
    let mut out = Vec::with_capacity(tokens.len());
    for (i, e) in embeds.iter().enumerate() {
        let prosody = sample.prosody.as_ref().map(|p| p[i].as_slice());
        let raw = sample.raw.as_ref().map(|r| r[i].as_slice());
        let mut v = fuse(prosody, raw, e.values(), mode)?;
        if let Some(n) = normalizer {
            v = n.apply(&v);
        }
        out.push(v);
    }
    Ok(out)
}

/// Fit the standardizer on the training split's fused vectors.
pub fn fit_normalizer(
    train: &[UtteranceSample],
    mode: FeatureMode,
    source: &EmbeddingSource,
) -> Result<Normalizer, CorpusError> {
    let mut all = Vec::new();
    for s in train {
        all.extend(featurize(s, mode, source, None)?);
    }
    Ok(Normalizer::fit(&all)?)
}

pub fn serialize(samples: &[UtteranceSample], path: &Path) -> Result<(), CorpusError> {
    let file = std::fs::File::create(path).map_err(|e| CorpusError::Io(e.to_string()))?;
    let mut w = BufWriter::new(file);
    for s in samples {
        let line = serde_json::to_string(s).map_err(|e| CorpusError::Io(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| CorpusError::Io(e.to_string()))?;
    }
    Ok(())
}

pub fn deserialize(path: &Path) -> Result<Vec<UtteranceSample>, CorpusError> {
    let file = std::fs::File::open(path).map_err(|e| CorpusError::Io(e.to_string()))?;
    let reader = std::io::BufReader::new(file);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| CorpusError::Io(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: UtteranceSample = serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(sample);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_corpus() -> Vec<UtteranceSample> {
        generate_corpus(6, 3, 42, &RenderMode::Features).unwrap()
    }

    #[test]
    fn sample_count_formula() {
        assert_eq!(small_corpus().len(), 2 * 6 * 3);
    }

    #[test]
    fn paper_scale_count() {
        let samples = generate_corpus(35, 22, 7, &RenderMode::Features).unwrap();
        assert_eq!(samples.len(), 1540);
    }

    #[test]
    fn interpretations_share_tokens_not_labels() {
        let samples = small_corpus();
        let a = samples
            .iter()
            .find(|s| s.instruction_id == 0 && s.interpretation == Interpretation::A)
            .unwrap();
        let b = samples
            .iter()
            .find(|s| {
                s.instruction_id == 0
                    && s.interpretation == Interpretation::B
                    && s.speaker_id == a.speaker_id
            })
            .unwrap();
        assert_eq!(a.tokens(), b.tokens());
        assert_ne!(a.labels, b.labels);
    }

    #[test]
    fn label_counts_invariant() {
        for s in small_corpus() {
            let goals = s.labels.iter().filter(|l| **l == Label::GOAL).count();
            let details = s.labels.iter().filter(|l| **l == Label::DETAIL).count();
            assert!(goals >= 1 && details >= 1);
            assert!(goals + details <= s.words.len());
        }
    }

    #[test]
    fn corpus_is_balanced() {
        let samples = small_corpus();
        let a = samples
            .iter()
            .filter(|s| s.interpretation == Interpretation::A)
            .count();
        assert_eq!(a * 2, samples.len());
    }

    #[test]
    fn goal_words_get_extra_pause() {
        let samples = generate_corpus(20, 13, 3, &RenderMode::Features).unwrap();
        let mut goal_pause = (0.0, 0);
        let mut o_pause = (0.0, 0);
        for s in &samples {
            let p = s.prosody.as_ref().unwrap();
            for (i, l) in s.labels.iter().enumerate() {
                if i == 0 {
                    continue;
                }
                let pause = p[i][11];
                match l {
                    Label::GOAL => {
                        goal_pause.0 += pause;
                        goal_pause.1 += 1;
                    }
                    Label::O => {
                        o_pause.0 += pause;
                        o_pause.1 += 1;
                    }
                    _ => {}
                }
            }
        }
        let diff = goal_pause.0 / goal_pause.1 as f64 - o_pause.0 / o_pause.1 as f64;
        assert!(diff >= 0.10, "pause gap {diff}");
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_corpus(4, 2, 9, &RenderMode::Features).unwrap();
        let b = generate_corpus(4, 2, 9, &RenderMode::Features).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn split_rules() {
        let samples = small_corpus();
        let spec = SplitSpec::new(4.0 / 6.0, 1.0 / 6.0, 1.0 / 6.0, 1).unwrap();
        let (train, val, test) = split_by_instruction(&samples, &spec).unwrap();
        assert_eq!(train.len() + val.len() + test.len(), samples.len());
        let train_ids: BTreeSet<u32> = train.iter().map(|s| s.instruction_id).collect();
        let test_ids: BTreeSet<u32> = test.iter().map(|s| s.instruction_id).collect();
        assert!(train_ids.is_disjoint(&test_ids));
        let (t2, v2, e2) = split_by_instruction(&samples, &spec).unwrap();
        assert_eq!(train, t2);
        assert_eq!(val, v2);
        assert_eq!(test, e2);
    }

    #[test]
    fn paper_split_sizes() {
        let samples = generate_corpus(35, 22, 7, &RenderMode::Features).unwrap();
        let spec = SplitSpec::new(24.0 / 35.0, 6.0 / 35.0, 5.0 / 35.0, 1).unwrap();
        let (train, val, test) = split_by_instruction(&samples, &spec).unwrap();
        assert_eq!(train.len(), 1056);
        assert_eq!(val.len(), 264);
        assert_eq!(test.len(), 220);
    }

    #[test]
    fn pad_batch_masks() {
        let seqs = vec![
            (vec![vec![1.0, 2.0]; 3], vec![0usize; 3]),
            (vec![vec![3.0, 4.0]; 5], vec![1usize; 5]),
        ];
        let batch = pad_batch(&seqs, 2).unwrap();
        assert_eq!(batch.features.shape(), &[2, 5, 2]);
        assert_eq!(batch.mask[0], vec![true, true, true, false, false]);
        assert_eq!(batch.mask[1], vec![true; 5]);
        assert_eq!(batch.targets[0][3], 0);

        let single = pad_batch(&seqs[..1], 2).unwrap();
        assert!(single.mask[0].iter().all(|&m| m));
    }

    #[test]
    fn jsonl_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        let samples = small_corpus();
        serialize(&samples, &path).unwrap();
        let back = deserialize(&path).unwrap();
        assert_eq!(samples, back);

        let text = std::fs::read_to_string(&path).unwrap();
        let mut truncated: Vec<&str> = text.lines().collect();
        let bad = truncated[2];
        let cut = &bad[..bad.len() / 2];
        truncated[2] = cut;
        let bad_path = dir.path().join("bad.jsonl");
        std::fs::write(&bad_path, truncated.join("\n")).unwrap();
        match deserialize(&bad_path) {
            Err(CorpusError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }

        let empty = dir.path().join("empty.jsonl");
        std::fs::write(&empty, "").unwrap();
        assert!(deserialize(&empty).unwrap().is_empty());
    }

    #[test]
    fn audio_and_feature_modes_agree_on_f0_and_duration() {
        let dir = tempfile::tempdir().unwrap();
        let feat = generate_corpus(2, 1, 5, &RenderMode::Features).unwrap();
        let audio = generate_corpus(
            2,
            1,
            5,
            &RenderMode::Audio {
                dir: dir.path().to_path_buf(),
            },
        )
        .unwrap();
        assert_eq!(feat.len(), audio.len());
        for (f, a) in feat.iter().zip(&audio) {
            assert_eq!(f.id, a.id);
            let fp = f.prosody.as_ref().unwrap();
            let ap = a.prosody.as_ref().unwrap();
            for (i, (fv, av)) in fp.iter().zip(ap).enumerate() {
                assert!(
                    (fv[0] - av[0]).abs() < 5.0,
                    "{} word {i}: f0 {} vs {}",
                    f.id,
                    fv[0],
                    av[0]
                );
                assert!(
                    (fv[10] - av[10]).abs() < 0.010 + 1e-9,
                    "{} word {i}: duration {} vs {}",
                    f.id,
                    fv[10],
                    av[10]
                );
            }
            assert!(a.audio_path.is_some());
            assert!(dir.path().join(format!("{}.align.json", a.id)).exists());
        }
    }
}
