use rustfft::{num_complex::Complex, FftPlanner};

use super::SpeechError;

pub const FRAME_MS: f64 = 25.0;
pub const HOP_MS: f64 = 10.0;
pub const VOICING_THRESHOLD: f64 = 0.30;
pub const F0_MIN_HZ: f64 = 60.0;
pub const F0_MAX_HZ: f64 = 400.0;
pub const ENERGY_FLOOR: f64 = 1e-10;

/// One analysis frame: raw samples plus the center time in seconds.
#[derive(Clone, Debug)]
pub struct Frame {
    pub samples: Vec<f64>,
    pub center_s: f64,
}

/// Slice a signal into Hann-windowed frames of `frame_ms` every `hop_ms`.
pub fn frame_signal(
    samples: &[f64],
    sample_rate: u32,
    frame_ms: f64,
    hop_ms: f64,
) -> Result<Vec<Frame>, SpeechError> {
    let len = (sample_rate as f64 * frame_ms / 1000.0).round() as usize;
    let hop = (sample_rate as f64 * hop_ms / 1000.0).round() as usize;
    if samples.len() < len {
        return Err(SpeechError::ClipTooShort {
            samples: samples.len(),
            needed: len,
        });
    }
    let count = (samples.len() - len) / hop + 1;
    let window = hann(len);
    let mut frames = Vec::with_capacity(count);
    for k in 0..count {
        let start = k * hop;
        let fr: Vec<f64> = samples[start..start + len]
            .iter()
            .zip(&window)
            .map(|(s, w)| s * w)
            .collect();
        frames.push(Frame {
            samples: fr,
            center_s: (start as f64 + len as f64 / 2.0) / sample_rate as f64,
        });
    }
    Ok(frames)
}

/// Unwindowed frames, same grid. Pitch estimation wants the raw waveform.
pub fn frame_signal_raw(
    samples: &[f64],
    sample_rate: u32,
    frame_ms: f64,
    hop_ms: f64,
) -> Result<Vec<Frame>, SpeechError> {
    let len = (sample_rate as f64 * frame_ms / 1000.0).round() as usize;
    let hop = (sample_rate as f64 * hop_ms / 1000.0).round() as usize;
    if samples.len() < len {
        return Err(SpeechError::ClipTooShort {
            samples: samples.len(),
            needed: len,
        });
    }
    let count = (samples.len() - len) / hop + 1;
    let mut frames = Vec::with_capacity(count);
    for k in 0..count {
        let start = k * hop;
        frames.push(Frame {
            samples: samples[start..start + len].to_vec(),
            center_s: (start as f64 + len as f64 / 2.0) / sample_rate as f64,
        });
    }
    Ok(frames)
}

fn hann(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / len as f64).cos())
        .collect()
}

/// Result of pitch analysis on one frame.
#[derive(Clone, Copy, Debug)]
pub struct PitchEstimate {
    /// Fundamental frequency in Hz; `None` when the frame is unvoiced.
    pub f0: Option<f64>,
    pub voicing_strength: f64,
}

/// Autocorrelation pitch: search normalized autocorrelation peaks over lags
/// covering 60-400 Hz, refine with parabolic interpolation, and call the
/// frame voiced when the peak exceeds 0.30.
pub fn estimate_f0(frame: &[f64], sample_rate: u32) -> PitchEstimate {
    let sr = sample_rate as f64;
    let min_lag = (sr / F0_MAX_HZ).floor() as usize;
    let max_lag = ((sr / F0_MIN_HZ).ceil() as usize).min(frame.len().saturating_sub(1));
    let mean = frame.iter().sum::<f64>() / frame.len() as f64;
    let x: Vec<f64> = frame.iter().map(|v| v - mean).collect();
    let energy: f64 = x.iter().map(|v| v * v).sum();
    if energy < 1e-12 || min_lag >= max_lag {
        return PitchEstimate {
            f0: None,
            voicing_strength: 0.0,
        };
    }
    let corr = |lag: usize| -> f64 {
        let n = x.len() - lag;
        let mut num = 0.0;
        let mut e0 = 0.0;
        let mut e1 = 0.0;
        for i in 0..n {
            num += x[i] * x[i + lag];
            e0 += x[i] * x[i];
            e1 += x[i + lag] * x[i + lag];
        }
        if e0 <= 0.0 || e1 <= 0.0 {
            0.0
        } else {
            num / (e0 * e1).sqrt()
        }
    };
    let values: Vec<f64> = (min_lag..=max_lag).map(corr).collect();
    let (best_i, best) = values
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| {
            if v > acc.1 {
                (i, v)
            } else {
                acc
            }
        });
    if best <= VOICING_THRESHOLD {
        return PitchEstimate {
            f0: None,
            voicing_strength: best.max(0.0),
        };
    }
    // Prefer the smallest submultiple of the winning lag that correlates
    // nearly as well; this rejects subharmonics of periodic signals.
    let mut lag = min_lag + best_i;
    for k in (2..=4).rev() {
        let cand = ((min_lag + best_i) as f64 / k as f64).round() as usize;
        if cand >= min_lag && cand <= max_lag && corr(cand) >= 0.9 * best {
            lag = cand;
            break;
        }
    }
    let best_i = lag - min_lag;
    // Parabolic refinement around the peak.
    let refined = if best_i > 0 && best_i + 1 < values.len() {
        let (a, b, c) = (values[best_i - 1], values[best_i], values[best_i + 1]);
        let denom = a - 2.0 * b + c;
        if denom.abs() > 1e-12 {
            lag as f64 + 0.5 * (a - c) / denom
        } else {
            lag as f64
        }
    } else {
        lag as f64
    };
    PitchEstimate {
        f0: Some(sr / refined),
        voicing_strength: best,
    }
}

/// ln(mean(sample^2) + 1e-10).
pub fn frame_log_energy(frame: &[f64]) -> f64 {
    let ms = frame.iter().map(|v| v * v).sum::<f64>() / frame.len().max(1) as f64;
    (ms + ENERGY_FLOOR).ln()
}

pub const N_MEL_FILTERS: usize = 26;
pub const N_MFCC: usize = 13;

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// 13 MFCC-style coefficients from one windowed frame: power spectrum via
/// DFT, 26 triangular mel filters over 0..sr/2, log, DCT-II (coefficient 0
/// halved), keep 0-12.
pub fn mfcc(frame: &[f64], sample_rate: u32) -> Vec<f64> {
    let n = frame.len();
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(n);
    let mut buf: Vec<Complex<f64>> = frame.iter().map(|&v| Complex::new(v, 0.0)).collect();
    fft.process(&mut buf);
    let n_bins = n / 2 + 1;
    let power: Vec<f64> = buf[..n_bins].iter().map(|c| c.norm_sqr() / n as f64).collect();

    let sr = sample_rate as f64;
    let mel_lo = hz_to_mel(0.0);
    let mel_hi = hz_to_mel(sr / 2.0);
    let points: Vec<f64> = (0..N_MEL_FILTERS + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (N_MEL_FILTERS + 1) as f64))
        .collect();
    let bin_hz = sr / n as f64;
    let mut log_mel = vec![0.0; N_MEL_FILTERS];
    for (m, lm) in log_mel.iter_mut().enumerate() {
        let (lo, mid, hi) = (points[m], points[m + 1], points[m + 2]);
        let mut acc = 0.0;
        for (b, p) in power.iter().enumerate() {
            let f = b as f64 * bin_hz;
            let w = if f >= lo && f <= mid && mid > lo {
                (f - lo) / (mid - lo)
            } else if f > mid && f <= hi && hi > mid {
                (hi - f) / (hi - mid)
            } else {
                0.0
            };
            acc += w * p;
        }
        *lm = (acc + ENERGY_FLOOR).ln();
    }
    let mut out = vec![0.0; N_MFCC];
    for (c, o) in out.iter_mut().enumerate() {
        let mut s = 0.0;
        for (k, lm) in log_mel.iter().enumerate() {
            s += lm
                * (std::f64::consts::PI * c as f64 * (k as f64 + 0.5) / N_MEL_FILTERS as f64).cos();
        }
        *o = if c == 0 { 0.5 * s } else { s };
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, amp: f64, secs: f64, sr: u32) -> Vec<f64> {
        (0..(secs * sr as f64) as usize)
            .map(|n| amp * (2.0 * std::f64::consts::PI * freq * n as f64 / sr as f64).sin())
            .collect()
    }

    #[test]
    fn frame_counts() {
        let s = vec![0.0; 16000];
        assert_eq!(frame_signal(&s, 16000, 25.0, 10.0).unwrap().len(), 98);
        let s = vec![0.0; 400];
        assert_eq!(frame_signal(&s, 16000, 25.0, 10.0).unwrap().len(), 1);
        let s = vec![0.0; 399];
        assert!(matches!(
            frame_signal(&s, 16000, 25.0, 10.0),
            Err(SpeechError::ClipTooShort { .. })
        ));
    }

    #[test]
    fn f0_of_pure_sine() {
        let s = sine(220.0, 0.5, 0.04, 16000);
        let est = estimate_f0(&s, 16000);
        let f0 = est.f0.expect("voiced");
        assert!((f0 - 220.0).abs() < 3.0, "f0 {f0}");
    }

    #[test]
    fn silence_is_unvoiced() {
        let s = vec![0.0; 640];
        assert!(estimate_f0(&s, 16000).f0.is_none());
    }

    #[test]
    fn white_noise_mostly_unvoiced() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut unvoiced = 0;
        let trials = 100;
        for _ in 0..trials {
            let s: Vec<f64> = (0..640).map(|_| rng.gen_range(-0.1..0.1)).collect();
            if estimate_f0(&s, 16000).voicing_strength <= VOICING_THRESHOLD {
                unvoiced += 1;
            }
        }
        assert!(unvoiced >= 90, "only {unvoiced}/{trials} unvoiced");
    }

    #[test]
    fn log_energy_values() {
        let zeros = vec![0.0; 400];
        assert!((frame_log_energy(&zeros) - 1e-10f64.ln()).abs() < 1e-9);
        let ones = vec![1.0; 400];
        assert!(frame_log_energy(&ones).abs() < 1e-9);
        let s = sine(100.0, 1.0, 0.1, 16000);
        assert!((frame_log_energy(&s) - 0.5f64.ln()).abs() < 0.01);
    }

    #[test]
    fn mfcc_silence_floor() {
        let zeros = vec![0.0; 400];
        let c = mfcc(&zeros, 16000);
        assert!((c[0] - 13.0 * ENERGY_FLOOR.ln()).abs() < 1e-6);
        for v in &c[1..] {
            assert!(v.abs() < 1e-6);
        }
    }

    #[test]
    fn mfcc_distinguishes_pitch() {
        let w = hann_window_applied(sine(220.0, 0.5, 0.025, 16000));
        let a = mfcc(&w, 16000);
        let w = hann_window_applied(sine(880.0, 0.5, 0.025, 16000));
        let b = mfcc(&w, 16000);
        let dist: f64 = a
            .iter()
            .zip(&b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        assert!(dist > 1.0, "L2 distance {dist}");
    }

    fn hann_window_applied(s: Vec<f64>) -> Vec<f64> {
        let w = hann(s.len());
        s.iter().zip(&w).map(|(a, b)| a * b).collect()
    }
}
