//! Combined frequency and periodicity features on a log-frequency grid.
//!
//! Three channels per frame: a power-scaled spectrogram, a generalized
//! cepstrum (GC, time-lag domain) and a generalized cepstrum of spectrum
//! (GCoS). Each stage applies a power-law rectification
//! `rect_gamma(x) = max(x, 0)^gamma` and a high-pass cut, then maps onto a
//! 320-bin grid with 60 bins per octave starting at 31 Hz.
//!
//! Frames are analyzed through zero-padded transforms (`pad_factor` times
//! the window) so that spectral peaks can be located to a fraction of a
//! native STFT bin; the 60-bins-per-octave grid is much finer than the
//! native 21.5 Hz bin spacing, and without the padding the mapped peak of a
//! pure tone would land bins away from its true grid position.

use std::io::Write;
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::AudioBuffer;
use crate::tensor::Tensor;

/// Sample rate every clip is brought to before analysis.
pub const SAMPLE_RATE: u32 = 44100;
/// STFT window size in samples.
pub const WINDOW: usize = 2048;
/// STFT hop size in samples.
pub const HOP: usize = 256;
/// Linear-frequency bin count of the native STFT (window/2 + 1).
pub const N_LINEAR_BINS: usize = WINDOW / 2 + 1;

#[derive(Debug, Error)]
pub enum CfpError {
    #[error("expected sample rate {expected} Hz, got {got} Hz (resample first)")]
    WrongSampleRate { expected: u32, got: u32 },
    #[error("empty audio")]
    EmptyAudio,
    #[error("nonpositive frequency {0}")]
    NonpositiveFrequency(f64),
    #[error("bin index {0} out of range")]
    BinOutOfRange(usize),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt CFP file: {0}")]
    Corrupt(String),
}

/// Log-frequency analysis grid: `center(b) = f_min * 2^(b / bins_per_octave)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogFreqGrid {
    pub n_bins: usize,
    pub bins_per_octave: usize,
    pub f_min: f64,
    pub f_max: f64,
}

impl Default for LogFreqGrid {
    fn default() -> Self {
        Self {
            n_bins: 320,
            bins_per_octave: 60,
            f_min: 31.0,
            f_max: 1250.0,
        }
    }
}

impl LogFreqGrid {
    /// Center frequency of bin `b` (accepts -1 and n_bins for edge triangles).
    pub fn center(&self, b: isize) -> f64 {
        self.f_min * 2f64.powf(b as f64 / self.bins_per_octave as f64)
    }
}

/// Nearest grid bin for a frequency, clipped to the grid range.
pub fn hz_to_bin(f: f64, grid: &LogFreqGrid) -> Result<usize, CfpError> {
    if f <= 0.0 {
        return Err(CfpError::NonpositiveFrequency(f));
    }
    let b = (grid.bins_per_octave as f64 * (f / grid.f_min).log2()).round();
    Ok(b.clamp(0.0, (grid.n_bins - 1) as f64) as usize)
}

/// Center frequency of a grid bin.
pub fn bin_to_hz(b: usize, grid: &LogFreqGrid) -> Result<f64, CfpError> {
    if b >= grid.n_bins {
        return Err(CfpError::BinOutOfRange(b));
    }
    Ok(grid.center(b as isize))
}

/// Tunable CFP parameters with documented defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CfpParams {
    /// Rectification exponents for (power spectrogram, GC, GCoS).
    pub gammas: [f64; 3],
    /// High-pass cut in the frequency domain (Hz).
    pub freq_hp_hz: f64,
    /// High-pass cut in the quefrency domain (seconds).
    pub quef_hp_s: f64,
    /// Zero-padding factor of the analysis transforms.
    pub pad_factor: usize,
}

impl Default for CfpParams {
    fn default() -> Self {
        Self {
            gammas: [0.24, 0.6, 1.0],
            freq_hp_hz: 31.0,
            quef_hp_s: 1.0 / 1250.0,
            pad_factor: 16,
        }
    }
}

/// Linear-frequency STFT magnitudes.
#[derive(Debug, Clone)]
pub struct Spectrogram {
    /// `mags[frame][bin]`, frames of length [`N_LINEAR_BINS`].
    pub mags: Vec<Vec<f32>>,
    /// Frequency of each linear bin in Hz.
    pub bin_hz: Vec<f64>,
    /// Frame centers in seconds, `t_i = i * hop / sample_rate`.
    pub frame_times: Vec<f64>,
}

/// The model input: [F, T, 3] stack of (power spectrogram, GC, GCoS).
#[derive(Debug, Clone)]
pub struct CfpTensor {
    /// [F, T, C] with F = grid.n_bins, C = 3, all values in [0, 1].
    pub data: Tensor<f32>,
    pub grid: LogFreqGrid,
    pub frame_times: Vec<f64>,
}

impl CfpTensor {
    pub fn n_frames(&self) -> usize {
        self.data.dims()[1]
    }
}

fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Number of frames for a signal length: floor(len / hop) + 1 (centered).
fn frame_count(len: usize) -> usize {
    len / HOP + 1
}

/// Centered, Hann-windowed frame `i` as f64, length [`WINDOW`].
fn windowed_frame(samples: &[f32], i: usize, window: &[f64], out: &mut [f64]) {
    let center = (i * HOP) as isize;
    let start = center - (WINDOW / 2) as isize;
    for (j, o) in out.iter_mut().enumerate() {
        let idx = start + j as isize;
        *o = if idx >= 0 && (idx as usize) < samples.len() {
            samples[idx as usize] as f64 * window[j]
        } else {
            0.0
        };
    }
}

/// Short-time Fourier transform magnitudes (2048-sample Hann window,
/// 256-sample hop, centered frames).
pub fn stft(buf: &AudioBuffer) -> Result<Spectrogram, CfpError> {
    if buf.sample_rate != SAMPLE_RATE {
        return Err(CfpError::WrongSampleRate {
            expected: SAMPLE_RATE,
            got: buf.sample_rate,
        });
    }
    if buf.samples.is_empty() {
        return Err(CfpError::EmptyAudio);
    }
    let window = hann(WINDOW);
    let n_frames = frame_count(buf.samples.len());
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(WINDOW);
    let mut frame = vec![0.0f64; WINDOW];
    let mut spec = vec![Complex::new(0.0, 0.0); WINDOW];
    let mut mags = Vec::with_capacity(n_frames);
    for i in 0..n_frames {
        windowed_frame(&buf.samples, i, &window, &mut frame);
        for (s, &f) in spec.iter_mut().zip(&frame) {
            *s = Complex::new(f, 0.0);
        }
        fft.process(&mut spec);
        mags.push(spec[..N_LINEAR_BINS].iter().map(|c| c.norm() as f32).collect());
    }
    let fs = SAMPLE_RATE as f64;
    Ok(Spectrogram {
        mags,
        bin_hz: (0..N_LINEAR_BINS).map(|k| k as f64 * fs / WINDOW as f64).collect(),
        frame_times: (0..n_frames).map(|i| i as f64 * HOP as f64 / fs).collect(),
    })
}

/// Triangular filterbank from a uniform frequency axis onto the log grid.
/// Triangles span the neighboring grid centers but never get narrower than
/// one source bin, and each is normalized to unit weight sum.
struct FilterBank {
    /// per grid bin: (source bin index, weight) pairs
    taps: Vec<Vec<(usize, f64)>>,
}

impl FilterBank {
    fn new(grid: &LogFreqGrid, df: f64, n_src_bins: usize) -> Self {
        let mut taps = Vec::with_capacity(grid.n_bins);
        for b in 0..grid.n_bins as isize {
            let c = grid.center(b);
            let left = c - (c - grid.center(b - 1)).max(df);
            let right = c + (grid.center(b + 1) - c).max(df);
            let j_lo = (left / df).ceil().max(0.0) as usize;
            let j_hi = ((right / df).floor() as usize).min(n_src_bins - 1);
            let mut v = Vec::new();
            let mut sum = 0.0;
            for j in j_lo..=j_hi {
                let f = j as f64 * df;
                let w = if f <= c {
                    (f - left) / (c - left)
                } else {
                    (right - f) / (right - c)
                };
                if w > 0.0 {
                    v.push((j, w));
                    sum += w;
                }
            }
            for t in &mut v {
                t.1 /= sum;
            }
            taps.push(v);
        }
        Self { taps }
    }

    fn apply(&self, src: &[f64], dst: &mut [f64]) {
        for (b, taps) in self.taps.iter().enumerate() {
            let mut acc = 0.0;
            for &(j, w) in taps {
                acc += w * src[j];
            }
            dst[b] = acc;
        }
    }
}

/// Compute the three-channel CFP tensor.
pub fn compute_cfp(
    buf: &AudioBuffer,
    grid: &LogFreqGrid,
    params: &CfpParams,
) -> Result<CfpTensor, CfpError> {
    if buf.sample_rate != SAMPLE_RATE {
        return Err(CfpError::WrongSampleRate {
            expected: SAMPLE_RATE,
            got: buf.sample_rate,
        });
    }
    if buf.samples.is_empty() {
        return Err(CfpError::EmptyAudio);
    }
    let fs = SAMPLE_RATE as f64;
    let n = WINDOW * params.pad_factor.max(1);
    let half = n / 2;
    let df = fs / n as f64;
    let window = hann(WINDOW);
    let n_frames = frame_count(buf.samples.len());
    let f = grid.n_bins;

    let bank = FilterBank::new(grid, df, half + 1);
    // lag -> grid bin lookup for the GC channel, with per-bin tap counts for
    // mean accumulation (summing would overweight low pitches, where many
    // lags share one bin, and push the argmax toward sub-octaves)
    let q_min = (params.quef_hp_s * fs).ceil().max(1.0) as usize;
    let q_max = WINDOW / 2;
    let mut lag_bin = vec![usize::MAX; q_max + 1];
    let mut lag_count = vec![0usize; f];
    for (q, lb) in lag_bin.iter_mut().enumerate().take(q_max + 1).skip(q_min) {
        let pitch = fs / q as f64;
        if pitch >= grid.f_min && pitch <= grid.f_max {
            let b = hz_to_bin(pitch, grid)?;
            *lb = b;
            lag_count[b] += 1;
        }
    }
    let hp_bin = (params.freq_hp_hz / df).ceil() as usize;

    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(n);
    let ifft = planner.plan_fft_inverse(n);

    let mut frame = vec![0.0f64; WINDOW];
    let mut spec = vec![Complex::new(0.0, 0.0); n];
    let mut z0 = vec![0.0f64; half + 1];
    let mut z2 = vec![0.0f64; half + 1];
    let mut col = vec![0.0f64; f];
    // [F, T, C] layout
    let mut data = vec![0.0f32; f * n_frames * 3];
    let put = |data: &mut [f32], b: usize, t: usize, c: usize, v: f64| {
        data[(b * n_frames + t) * 3 + c] = v as f32;
    };

    for t in 0..n_frames {
        windowed_frame(&buf.samples, t, &window, &mut frame);
        for s in spec.iter_mut() {
            *s = Complex::new(0.0, 0.0);
        }
        for (s, &fv) in spec.iter_mut().zip(&frame) {
            *s = Complex::new(fv, 0.0);
        }
        fft.process(&mut spec);

        // Z0: rectified power spectrum, high-passed
        for k in 0..=half {
            let p = spec[k].norm_sqr();
            z0[k] = if k < hp_bin { 0.0 } else { p.powf(params.gammas[0]) };
        }
        bank.apply(&z0, &mut col);
        for b in 0..f {
            put(&mut data, b, t, 0, col[b]);
        }

        // Z1 (GC): rectified inverse transform of Z0 in the lag domain
        for s in spec.iter_mut() {
            *s = Complex::new(0.0, 0.0);
        }
        for k in 0..=half {
            spec[k] = Complex::new(z0[k], 0.0);
            if k > 0 && k < half {
                spec[n - k] = Complex::new(z0[k], 0.0);
            }
        }
        ifft.process(&mut spec);
        let scale = 1.0 / n as f64;
        col.iter_mut().for_each(|v| *v = 0.0);
        let mut z1 = vec![0.0f64; q_max + 1];
        for q in q_min..=q_max {
            let v = (spec[q].re * scale).max(0.0).powf(params.gammas[1]);
            z1[q] = v;
            let b = lag_bin[q];
            if b != usize::MAX {
                col[b] += v;
            }
        }
        for b in 0..f {
            let v = if lag_count[b] > 0 { col[b] / lag_count[b] as f64 } else { 0.0 };
            put(&mut data, b, t, 1, v);
        }

        // Z2 (GCoS): rectified transform of the high-passed GC
        for s in spec.iter_mut() {
            *s = Complex::new(0.0, 0.0);
        }
        for q in q_min..=q_max {
            spec[q] = Complex::new(z1[q], 0.0);
            spec[n - q] = Complex::new(z1[q], 0.0);
        }
        fft.process(&mut spec);
        for k in 0..=half {
            z2[k] = if k < hp_bin {
                0.0
            } else {
                spec[k].re.max(0.0).powf(params.gammas[2])
            };
        }
        bank.apply(&z2, &mut col);
        for b in 0..f {
            put(&mut data, b, t, 2, col[b]);
        }
    }

    // per-channel max normalization over the whole clip
    for c in 0..3 {
        let mut max = 0.0f32;
        for b in 0..f {
            for t in 0..n_frames {
                max = max.max(data[(b * n_frames + t) * 3 + c]);
            }
        }
        if max > 0.0 {
            for b in 0..f {
                for t in 0..n_frames {
                    data[(b * n_frames + t) * 3 + c] /= max;
                }
            }
        }
    }

    Ok(CfpTensor {
        data: Tensor::new(vec![f, n_frames, 3], data),
        grid: grid.clone(),
        frame_times: (0..n_frames).map(|i| i as f64 * HOP as f64 / fs).collect(),
    })
}

const CFP_MAGIC: &[u8; 4] = b"CFP1";

/// Binary dump: magic "CFP1", u32 F, u32 T, u32 C, f64 sample_rate, u32 hop,
/// then F*T*C little-endian f32 values in (channel, frequency, time) order.
pub fn save_cfp(cfp: &CfpTensor, path: impl AsRef<Path>) -> Result<(), CfpError> {
    let dims = cfp.data.dims();
    let (f, t, c) = (dims[0], dims[1], dims[2]);
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(CFP_MAGIC)?;
    w.write_all(&(f as u32).to_le_bytes())?;
    w.write_all(&(t as u32).to_le_bytes())?;
    w.write_all(&(c as u32).to_le_bytes())?;
    w.write_all(&(SAMPLE_RATE as f64).to_le_bytes())?;
    w.write_all(&(HOP as u32).to_le_bytes())?;
    for ci in 0..c {
        for b in 0..f {
            for ti in 0..t {
                w.write_all(&cfp.data.at(&[b, ti, ci]).to_le_bytes())?;
            }
        }
    }
    Ok(())
}

/// Load a "CFP1" dump written by [`save_cfp`].
pub fn load_cfp(path: impl AsRef<Path>, grid: &LogFreqGrid) -> Result<CfpTensor, CfpError> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 24 || &bytes[..4] != CFP_MAGIC {
        return Err(CfpError::Corrupt("bad magic".into()));
    }
    let rd_u32 = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let f = rd_u32(4);
    let t = rd_u32(8);
    let c = rd_u32(12);
    let sample_rate = f64::from_le_bytes(bytes[16..24].try_into().unwrap());
    let hop = rd_u32(24);
    let header = 28;
    let expect = header + f * t * c * 4;
    if bytes.len() != expect {
        return Err(CfpError::Corrupt(format!(
            "expected {expect} bytes, found {}",
            bytes.len()
        )));
    }
    let mut data = vec![0.0f32; f * t * c];
    let mut off = header;
    for ci in 0..c {
        for b in 0..f {
            for ti in 0..t {
                data[(b * t + ti) * c + ci] =
                    f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
                off += 4;
            }
        }
    }
    Ok(CfpTensor {
        data: Tensor::new(vec![f, t, c], data),
        grid: grid.clone(),
        frame_times: (0..t).map(|i| i as f64 * hop as f64 / sample_rate).collect(),
    })
}
