//! Acoustic front end: WAV PCM decoding, 39-dimensional cepstral features,
//! per-utterance normalization, and the windowed/concatenated inputs fed to
//! the multi-target network.
//!
//! The cepstral recipe is pinned so an independent reference implementation
//! can reproduce it exactly: 25 ms windows with a 10 ms shift, pre-emphasis
//! 0.97 over the whole signal, Hamming window, log frame energy, power
//! spectrum on a next-power-of-two FFT, 26 triangular mel filters spanning
//! 0..Nyquist evaluated at bin center frequencies, log floored at 1e-10,
//! orthonormal DCT-II keeping cepstra 1..=12, and +/-2 regression deltas with
//! edge clamping. Output order per frame: 12 cepstra, log energy, deltas,
//! double deltas.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use ndarray::{s, Array2};
use rustfft::{num_complex::Complex, FftPlanner};

use crate::error::{Error, Result};
use crate::types::FeatureSequence;

pub const PRE_EMPHASIS: f64 = 0.97;
pub const WINDOW_SECS: f64 = 0.025;
pub const SHIFT_SECS: f64 = 0.010;
pub const MEL_FILTERS: usize = 26;
pub const NUM_CEPSTRA: usize = 12;
pub const DELTA_WINDOW: usize = 2;
pub const LOG_FLOOR: f64 = 1e-10;
pub const CMVN_VAR_FLOOR: f64 = 1e-8;

/// Frame vectors widened for network input: each row is the concatenation of
/// a context window of feature frames plus an optional utterance-level
/// auxiliary vector.
#[derive(Clone, PartialEq, Debug)]
pub struct StackedSequence {
    pub utt: String,
    pub data: Array2<f64>,
}

impl StackedSequence {
    pub fn len(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }
}

/// Reads a 16-bit mono PCM WAV file. Returns samples and the sample rate.
pub fn read_wav_mono16(path: impl AsRef<Path>) -> Result<(Vec<i16>, u32)> {
    let path = path.as_ref();
    let mut file = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(Error::format(path, "not a RIFF/WAVE file"));
    }
    let mut pos = 12;
    let mut sample_rate = None;
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body_end = pos + 8 + size;
        if body_end > bytes.len() {
            return Err(Error::format(path, "truncated chunk"));
        }
        let body = &bytes[pos + 8..body_end];
        match id {
            b"fmt " => {
                if body.len() < 16 {
                    return Err(Error::format(path, "short fmt chunk"));
                }
                let audio_format = u16::from_le_bytes([body[0], body[1]]);
                let channels = u16::from_le_bytes([body[2], body[3]]);
                let rate = u32::from_le_bytes(body[4..8].try_into().unwrap());
                let bits = u16::from_le_bytes([body[14], body[15]]);
                if audio_format != 1 || bits != 16 {
                    return Err(Error::format(path, "only 16-bit PCM is supported"));
                }
                if channels != 1 {
                    return Err(Error::format(path, "only mono audio is supported"));
                }
                sample_rate = Some(rate);
            }
            b"data" => data = Some(body),
            _ => {}
        }
        // Chunks are word-aligned.
        pos = body_end + (size & 1);
    }
    let rate = sample_rate.ok_or_else(|| Error::format(path, "missing fmt chunk"))?;
    let body = data.ok_or_else(|| Error::format(path, "missing data chunk"))?;
    let samples: Vec<i16> = body
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]))
        .collect();
    Ok((samples, rate))
}

/// Writes a 16-bit mono PCM WAV file.
pub fn write_wav_mono16(samples: &[i16], sample_rate: u32, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let data_len = (samples.len() * 2) as u32;
    let mut bytes = Vec::with_capacity(44 + samples.len() * 2);
    bytes.extend_from_slice(b"RIFF");
    bytes.extend_from_slice(&(36 + data_len).to_le_bytes());
    bytes.extend_from_slice(b"WAVEfmt ");
    bytes.extend_from_slice(&16u32.to_le_bytes());
    bytes.extend_from_slice(&1u16.to_le_bytes()); // PCM
    bytes.extend_from_slice(&1u16.to_le_bytes()); // mono
    bytes.extend_from_slice(&sample_rate.to_le_bytes());
    bytes.extend_from_slice(&(sample_rate * 2).to_le_bytes()); // byte rate
    bytes.extend_from_slice(&2u16.to_le_bytes()); // block align
    bytes.extend_from_slice(&16u16.to_le_bytes()); // bits
    bytes.extend_from_slice(b"data");
    bytes.extend_from_slice(&data_len.to_le_bytes());
    for s in samples {
        bytes.extend_from_slice(&s.to_le_bytes());
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn window_and_shift(sample_rate: u32) -> (usize, usize) {
    let window = (WINDOW_SECS * sample_rate as f64).round() as usize;
    let shift = (SHIFT_SECS * sample_rate as f64).round() as usize;
    (window, shift)
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular mel filterbank: `MEL_FILTERS` rows of weights over the
/// `nfft/2 + 1` power spectrum bins, spanning 0..Nyquist.
pub fn mel_filterbank(nfft: usize, sample_rate: u32) -> Array2<f64> {
    let bins = nfft / 2 + 1;
    let nyquist = sample_rate as f64 / 2.0;
    let mel_hi = hz_to_mel(nyquist);
    let edges: Vec<f64> = (0..MEL_FILTERS + 2)
        .map(|j| mel_to_hz(mel_hi * j as f64 / (MEL_FILTERS + 1) as f64))
        .collect();
    let mut fb = Array2::zeros((MEL_FILTERS, bins));
    for i in 0..MEL_FILTERS {
        let (lo, center, hi) = (edges[i], edges[i + 1], edges[i + 2]);
        for k in 0..bins {
            let f = k as f64 * sample_rate as f64 / nfft as f64;
            let w = if f >= lo && f <= center {
                (f - lo) / (center - lo)
            } else if f > center && f <= hi {
                (hi - f) / (hi - center)
            } else {
                0.0
            };
            fb[[i, k]] = w.max(0.0);
        }
    }
    fb
}

/// Regression delta over a +/-`DELTA_WINDOW` context with edge clamping.
pub fn delta(features: &Array2<f64>) -> Array2<f64> {
    let (t_len, dim) = features.dim();
    let denom: f64 = 2.0 * (1..=DELTA_WINDOW).map(|u| (u * u) as f64).sum::<f64>();
    let mut out = Array2::zeros((t_len, dim));
    for t in 0..t_len {
        for u in 1..=DELTA_WINDOW {
            let fwd = (t + u).min(t_len - 1);
            let bwd = t.saturating_sub(u);
            for d in 0..dim {
                out[[t, d]] += u as f64 * (features[[fwd, d]] - features[[bwd, d]]);
            }
        }
    }
    out / denom
}

/// 39-dimensional cepstral features (12 cepstra + log energy, with deltas
/// and double deltas) from 16-bit PCM samples.
pub fn mfcc39(samples: &[i16], sample_rate: u32, utt: &str) -> Result<FeatureSequence> {
    if sample_rate < 8000 {
        return Err(Error::invalid(format!(
            "sample rate {sample_rate} Hz below the 8 kHz minimum"
        )));
    }
    let (window, shift) = window_and_shift(sample_rate);
    if samples.len() < window {
        return Err(Error::invalid(format!(
            "clip of {} samples is shorter than one {window}-sample analysis window",
            samples.len()
        )));
    }
    let signal: Vec<f64> = samples.iter().map(|&s| s as f64 / 32768.0).collect();
    let mut emphasized = Vec::with_capacity(signal.len());
    emphasized.push(signal[0]);
    for t in 1..signal.len() {
        emphasized.push(signal[t] - PRE_EMPHASIS * signal[t - 1]);
    }

    let n_frames = (signal.len() - window) / shift + 1;
    let nfft = window.next_power_of_two();
    let bins = nfft / 2 + 1;
    let hamming: Vec<f64> = (0..window)
        .map(|i| {
            if window == 1 {
                1.0
            } else {
                0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / (window - 1) as f64).cos()
            }
        })
        .collect();
    let fb = mel_filterbank(nfft, sample_rate);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(nfft);

    let mut statics = Array2::zeros((n_frames, NUM_CEPSTRA + 1));
    let mut buf = vec![Complex::new(0.0, 0.0); nfft];
    for t in 0..n_frames {
        let frame = &emphasized[t * shift..t * shift + window];
        let mut energy = 0.0;
        for (i, slot) in buf.iter_mut().enumerate() {
            let v = if i < window { frame[i] * hamming[i] } else { 0.0 };
            energy += v * v;
            *slot = Complex::new(v, 0.0);
        }
        fft.process(&mut buf);
        let mut mel_energies = vec![0.0f64; MEL_FILTERS];
        for k in 0..bins {
            let p = buf[k].norm_sqr();
            for (i, row) in fb.rows().into_iter().enumerate() {
                mel_energies[i] += row[k] * p;
            }
        }
        for q in 1..=NUM_CEPSTRA {
            let mut c = 0.0;
            for (j, &e) in mel_energies.iter().enumerate() {
                let loge = e.max(LOG_FLOOR).ln();
                c += loge
                    * (std::f64::consts::PI * q as f64 * (j as f64 + 0.5) / MEL_FILTERS as f64)
                        .cos();
            }
            statics[[t, q - 1]] = c * (2.0 / MEL_FILTERS as f64).sqrt();
        }
        statics[[t, NUM_CEPSTRA]] = energy.max(LOG_FLOOR).ln();
    }

    let d1 = delta(&statics);
    let d2 = delta(&d1);
    let width = 3 * (NUM_CEPSTRA + 1);
    let mut out = Array2::zeros((n_frames, width));
    out.slice_mut(s![.., 0..NUM_CEPSTRA + 1]).assign(&statics);
    out.slice_mut(s![.., NUM_CEPSTRA + 1..2 * (NUM_CEPSTRA + 1)])
        .assign(&d1);
    out.slice_mut(s![.., 2 * (NUM_CEPSTRA + 1)..]).assign(&d2);
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "cepstral features for `{utt}` are not finite"
        )));
    }
    Ok(FeatureSequence::new(
        utt,
        (SHIFT_SECS * 1000.0).round() as u32,
        out.mapv(|v| v as f32),
    ))
}

/// Per-utterance, per-dimension mean/variance normalization. Variance is
/// floored so constant dimensions map to zero.
pub fn cmvn(seq: &FeatureSequence) -> Result<FeatureSequence> {
    if seq.len() < 2 {
        return Err(Error::invalid(format!(
            "cmvn needs at least 2 frames, `{}` has {}",
            seq.utt,
            seq.len()
        )));
    }
    let t_len = seq.len() as f64;
    let x = seq.to_f64();
    let mut out = Array2::zeros(x.raw_dim());
    for (d, col) in x.columns().into_iter().enumerate() {
        let mean = col.sum() / t_len;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / t_len;
        let scale = 1.0 / var.max(CMVN_VAR_FLOOR).sqrt();
        for (t, v) in col.iter().enumerate() {
            out[[t, d]] = (v - mean) * scale;
        }
    }
    Ok(FeatureSequence::new(
        seq.utt.clone(),
        seq.period_ms,
        out.mapv(|v| v as f32),
    ))
}

/// Stacks a context window of `context` frames per side around every frame
/// (edge-clamped) and appends the utterance-level auxiliary vector, if any.
pub fn stack(seq: &FeatureSequence, context: usize, aux: Option<&[f32]>) -> StackedSequence {
    let t_len = seq.len();
    let d = seq.dim();
    let aux_dim = aux.map_or(0, <[f32]>::len);
    let width = d * (2 * context + 1) + aux_dim;
    let mut data = Array2::zeros((t_len, width));
    for t in 0..t_len {
        let mut col = 0;
        for offset in -(context as isize)..=(context as isize) {
            let src = (t as isize + offset).clamp(0, t_len as isize - 1) as usize;
            for j in 0..d {
                data[[t, col + j]] = seq.data[[src, j]] as f64;
            }
            col += d;
        }
        if let Some(a) = aux {
            for (j, &v) in a.iter().enumerate() {
                data[[t, col + j]] = v as f64;
            }
        }
    }
    StackedSequence {
        utt: seq.utt.clone(),
        data,
    }
}

/// Concatenates two feature sequences frame-wise. Widths add; the second
/// sequence may be empty-width but frame counts and periods must agree.
pub fn concat_features(a: &FeatureSequence, b: &FeatureSequence) -> Result<FeatureSequence> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "frame count mismatch concatenating `{}` ({}) with `{}` ({})",
            a.utt,
            a.len(),
            b.utt,
            b.len()
        )));
    }
    if a.period_ms != b.period_ms {
        return Err(Error::invalid(format!(
            "frame period mismatch concatenating `{}` with `{}`",
            a.utt, b.utt
        )));
    }
    let mut data = Array2::zeros((a.len(), a.dim() + b.dim()));
    data.slice_mut(s![.., 0..a.dim()]).assign(&a.data);
    data.slice_mut(s![.., a.dim()..]).assign(&b.data);
    Ok(FeatureSequence::new(a.utt.clone(), a.period_ms, data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn tone(freq: f64, secs: f64, rate: u32, amp: f64) -> Vec<i16> {
        (0..(secs * rate as f64) as usize)
            .map(|i| {
                (amp * (2.0 * std::f64::consts::PI * freq * i as f64 / rate as f64).sin()) as i16
            })
            .collect()
    }

    #[test]
    fn wav_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.wav");
        let samples = tone(440.0, 0.1, 16000, 12000.0);
        write_wav_mono16(&samples, 16000, &path).unwrap();
        let (back, rate) = read_wav_mono16(&path).unwrap();
        assert_eq!(rate, 16000);
        assert_eq!(back, samples);
    }

    #[test]
    fn wav_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.wav");
        std::fs::write(&path, b"not a wav at all").unwrap();
        assert!(read_wav_mono16(&path).is_err());
    }

    #[test]
    fn silence_gives_98_frames_and_flat_energy() {
        // 1 s at 16 kHz with +/-1 LSB dither.
        let samples: Vec<i16> = (0..16000).map(|i| if i % 2 == 0 { 1 } else { -1 }).collect();
        let f = mfcc39(&samples, 16000, "sil").unwrap();
        assert_eq!(f.len(), 98);
        assert_eq!(f.dim(), 39);
        let energy: Vec<f32> = f.data.column(NUM_CEPSTRA).iter().copied().collect();
        let min = energy.iter().cloned().fold(f32::INFINITY, f32::min);
        let max = energy.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        assert!(max - min < 1e-3, "energy not near-constant: {min}..{max}");
        assert!(max < -5.0, "dithered silence should have very low energy");
    }

    #[test]
    fn frame_count_is_floor_arithmetic() {
        let rate = 16000;
        let samples = tone(500.0, 0.5, rate, 8000.0);
        let f = mfcc39(&samples, rate, "t").unwrap();
        let (window, shift) = window_and_shift(rate);
        assert_eq!(f.len(), (samples.len() - window) / shift + 1);
    }

    #[test]
    fn doubling_duration_doubles_frames() {
        // 2x duration at the same phase: frame count is exactly 2T when
        // T = samples/shift arithmetic lines up (1 s vs 2 s at 16 kHz).
        let one = mfcc39(&tone(1000.0, 1.0, 16000, 8000.0), 16000, "a").unwrap();
        let two = mfcc39(&tone(1000.0, 2.0, 16000, 8000.0), 16000, "b").unwrap();
        assert_eq!(two.len(), 2 * one.len() + 2); // extra windows straddle the midpoint
        // Frame arithmetic, not content, is the contract here: check exact counts.
        assert_eq!(one.len(), 98);
        assert_eq!(two.len(), 198);
    }

    #[test]
    fn too_short_clip_errors() {
        assert!(mfcc39(&[0i16; 100], 16000, "x").is_err());
        assert!(mfcc39(&[0i16; 100], 4000, "x").is_err());
    }

    #[test]
    fn cmvn_standardizes_and_zeroes_constant_columns() {
        let seq = FeatureSequence::new("u", 10, array![[1.0f32, 7.0], [3.0, 7.0]]);
        let out = cmvn(&seq).unwrap();
        assert_abs_diff_eq!(out.data[[0, 0]], -1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(out.data[[1, 0]], 1.0, epsilon = 1e-6);
        assert_eq!(out.data[[0, 1]], 0.0);
        assert_eq!(out.data[[1, 1]], 0.0);
    }

    #[test]
    fn cmvn_is_idempotent() {
        let data = array![
            [0.3f32, -1.0, 5.0],
            [2.0, 0.5, -3.0],
            [-1.0, 2.0, 0.0],
            [4.0, -2.5, 1.0]
        ];
        let seq = FeatureSequence::new("u", 10, data);
        let once = cmvn(&seq).unwrap();
        let twice = cmvn(&once).unwrap();
        for (a, b) in once.data.iter().zip(twice.data.iter()) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-6);
        }
    }

    #[test]
    fn stack_identity_and_clamping() {
        let seq = FeatureSequence::new("u", 10, array![[1.0f32, 2.0], [3.0, 4.0]]);
        let id = stack(&seq, 0, None);
        assert_eq!(id.dim(), 2);
        assert_eq!(id.data[[1, 0]], 3.0);

        let single = FeatureSequence::new("u", 10, array![[5.0f32, 6.0]]);
        let stacked = stack(&single, 4, None);
        assert_eq!(stacked.dim(), 2 * 9);
        for k in 0..9 {
            assert_eq!(stacked.data[[0, 2 * k]], 5.0);
            assert_eq!(stacked.data[[0, 2 * k + 1]], 6.0);
        }
    }

    #[test]
    fn stack_width_matches_default_topology() {
        // 39-dim features, 4 frames each side, 400-dim auxiliary vector.
        let seq = FeatureSequence::new("u", 10, Array2::<f32>::zeros((5, 39)));
        let aux = vec![0.0f32; 400];
        let stacked = stack(&seq, 4, Some(&aux));
        assert_eq!(stacked.dim(), 751);
    }

    #[test]
    fn stack_edges_clamp_to_first_frame() {
        let seq = FeatureSequence::new("u", 10, array![[1.0f32], [2.0], [3.0], [4.0], [5.0]]);
        let stacked = stack(&seq, 2, None);
        // Row 0 left context is all frame 0.
        assert_eq!(stacked.data[[0, 0]], 1.0);
        assert_eq!(stacked.data[[0, 1]], 1.0);
        assert_eq!(stacked.data[[0, 2]], 1.0);
        assert_eq!(stacked.data[[0, 3]], 2.0);
        // Last row right context is all the last frame.
        assert_eq!(stacked.data[[4, 3]], 5.0);
        assert_eq!(stacked.data[[4, 4]], 5.0);
    }

    #[test]
    fn concat_widths_add_and_mismatches_error() {
        let a = FeatureSequence::new("u", 10, Array2::<f32>::zeros((4, 39)));
        let b = FeatureSequence::new("u", 10, Array2::<f32>::ones((4, 39)));
        let c = concat_features(&a, &b).unwrap();
        assert_eq!(c.dim(), 78);
        assert_eq!(c.data[[0, 0]], 0.0);
        assert_eq!(c.data[[0, 39]], 1.0);

        let short = FeatureSequence::new("u", 10, Array2::<f32>::zeros((3, 39)));
        assert!(concat_features(&a, &short).is_err());
    }

    #[test]
    fn concat_stacks_reach_tandem_width() {
        // Three 351-wide stacks plus a 400-dim auxiliary block: 1453.
        let mk = |v: f32| FeatureSequence::new("u", 10, Array2::<f32>::from_elem((3, 351), v));
        let ab = concat_features(&mk(0.0), &mk(1.0)).unwrap();
        let abc = concat_features(&ab, &mk(2.0)).unwrap();
        let aux = FeatureSequence::new("u", 10, Array2::<f32>::zeros((3, 400)));
        let full = concat_features(&abc, &aux).unwrap();
        assert_eq!(full.dim(), 1453);
    }

    #[test]
    fn concat_with_zero_width_is_identity() {
        let a = FeatureSequence::new("u", 10, array![[1.0f32, 2.0], [3.0, 4.0]]);
        let empty = FeatureSequence::new("u", 10, Array2::<f32>::zeros((2, 0)));
        let c = concat_features(&a, &empty).unwrap();
        assert_eq!(c.data, a.data);
    }
}
