//! WAV decoding, band-limited resampling and sample normalization.

use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("unreadable file: {0}")]
    Unreadable(String),
    #[error("unsupported encoding: {0}")]
    UnsupportedFormat(String),
    #[error("zero-length audio")]
    EmptyAudio,
    #[error("invalid sample rate {0}")]
    BadSampleRate(u32),
}

/// Mono audio at a fixed sample rate, samples normalized to [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self, AudioError> {
        if sample_rate == 0 {
            return Err(AudioError::BadSampleRate(sample_rate));
        }
        if samples.is_empty() {
            return Err(AudioError::EmptyAudio);
        }
        if !samples.iter().all(|s| s.is_finite()) {
            return Err(AudioError::UnsupportedFormat("non-finite samples".into()));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Load a RIFF/WAVE file (16-bit PCM or 32-bit IEEE float, 1 or 2 channels).
/// Stereo is mixed down by the arithmetic mean of the channels.
pub fn load_wav(path: impl AsRef<Path>) -> Result<AudioBuffer, AudioError> {
    let reader = hound::WavReader::open(path.as_ref())
        .map_err(|e| AudioError::Unreadable(e.to_string()))?;
    let spec = reader.spec();
    if spec.channels == 0 || spec.channels > 2 {
        return Err(AudioError::UnsupportedFormat(format!(
            "{} channels (only mono/stereo supported)",
            spec.channels
        )));
    }
    let mono: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => {
            let samples: Result<Vec<i16>, _> = reader.into_samples().collect();
            let samples = samples.map_err(|e| AudioError::Unreadable(e.to_string()))?;
            mixdown(&samples, spec.channels, |s| s as f32 / 32768.0)
        }
        (hound::SampleFormat::Float, 32) => {
            let samples: Result<Vec<f32>, _> = reader.into_samples().collect();
            let samples = samples.map_err(|e| AudioError::Unreadable(e.to_string()))?;
            mixdown(&samples, spec.channels, |s| s)
        }
        (fmt, bits) => {
            return Err(AudioError::UnsupportedFormat(format!(
                "{bits}-bit {fmt:?} (only 16-bit PCM and 32-bit float supported)"
            )))
        }
    };
    if mono.is_empty() {
        return Err(AudioError::EmptyAudio);
    }
    AudioBuffer::new(mono, spec.sample_rate)
}

fn mixdown<S: Copy>(samples: &[S], channels: u16, conv: impl Fn(S) -> f32) -> Vec<f32> {
    if channels == 1 {
        samples.iter().map(|&s| conv(s)).collect()
    } else {
        samples
            .chunks_exact(2)
            .map(|c| (conv(c[0]) + conv(c[1])) / 2.0)
            .collect()
    }
}

/// Write 16-bit PCM little-endian mono WAV.
pub fn write_wav(path: impl AsRef<Path>, buf: &AudioBuffer) -> Result<(), AudioError> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: buf.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path.as_ref(), spec)
        .map_err(|e| AudioError::Unreadable(e.to_string()))?;
    for &s in &buf.samples {
        let v = (s.clamp(-1.0, 1.0) as f64 * 32768.0).round() as i32;
        w.write_sample(v.clamp(-32768, 32767) as i16)
            .map_err(|e| AudioError::Unreadable(e.to_string()))?;
    }
    w.finalize().map_err(|e| AudioError::Unreadable(e.to_string()))?;
    Ok(())
}

/// Kaiser window shape parameter and zero crossings per side of the sinc.
const KAISER_BETA: f64 = 8.0;
const SINC_ZEROS: usize = 16;

/// Band-limited resampling with a Kaiser-windowed sinc kernel
/// (16 zero crossings per side). Identity when the rates already match.
pub fn resample(buf: &AudioBuffer, target_rate: u32) -> Result<AudioBuffer, AudioError> {
    if target_rate == 0 {
        return Err(AudioError::BadSampleRate(target_rate));
    }
    if target_rate == buf.sample_rate {
        return Ok(buf.clone());
    }
    let src = &buf.samples;
    let ratio = target_rate as f64 / buf.sample_rate as f64;
    let out_len = ((src.len() as f64) * ratio).round() as usize;
    // cutoff relative to the source Nyquist; widen the kernel when
    // downsampling so the transition stays below the target Nyquist
    let cutoff = ratio.min(1.0);
    let half_width = SINC_ZEROS as f64 / cutoff;
    let denom = bessel_i0(KAISER_BETA);
    let mut out = Vec::with_capacity(out_len);
    for n in 0..out_len {
        let t = n as f64 / ratio; // position in source samples
        let lo = (t - half_width).ceil() as isize;
        let hi = (t + half_width).floor() as isize;
        let mut acc = 0.0f64;
        let mut wsum = 0.0f64;
        for k in lo..=hi {
            let u = t - k as f64;
            let w = cutoff * sinc(cutoff * u) * kaiser(u / half_width, denom);
            wsum += w;
            if k >= 0 && (k as usize) < src.len() {
                acc += w * src[k as usize] as f64;
            }
        }
        // normalizing by the full kernel sum keeps DC exact
        out.push(if wsum.abs() > 1e-12 { (acc / wsum) as f32 } else { 0.0 });
    }
    AudioBuffer::new(out, target_rate)
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

fn kaiser(frac: f64, denom: f64) -> f64 {
    if frac.abs() >= 1.0 {
        return 0.0;
    }
    bessel_i0(KAISER_BETA * (1.0 - frac * frac).sqrt()) / denom
}

/// Modified Bessel function of the first kind, order zero (series expansion).
fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let half_x = x / 2.0;
    for k in 1..32 {
        term *= (half_x / k as f64) * (half_x / k as f64);
        sum += term;
        if term < 1e-16 * sum {
            break;
        }
    }
    sum
}
