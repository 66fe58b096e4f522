//! Synthetic singing-voice clips with ground-truth annotations.
//!
//! Each clip is a sum of harmonics tracking a piecewise-constant note
//! sequence with optional vibrato, interrupted by silent gaps, plus white
//! noise. The matching annotation samples f0 on the analysis hop so
//! generated data plugs straight into training and evaluation.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{write_wav, AudioBuffer, AudioError};
use crate::cfp::{HOP, SAMPLE_RATE};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid spec: {0}")]
    BadSpec(String),
    #[error("audio error: {0}")]
    Audio(#[from] AudioError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Generator parameters for one batch of clips.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub seed: u64,
    pub n_clips: usize,
    pub duration_s: f64,
    /// Pitch range the random notes are drawn from (Hz).
    pub f0_min: f64,
    pub f0_max: f64,
    /// Mean note length in seconds.
    pub note_len_s: f64,
    /// Peak vibrato excursion in cents (0 disables vibrato).
    pub vibrato_cents: f64,
    /// Vibrato rate in Hz.
    pub vibrato_hz: f64,
    pub n_harmonics: usize,
    /// Amplitude falloff per harmonic: a_k = rolloff^(k-1).
    pub harmonic_rolloff: f64,
    /// White noise level relative to full scale in dB; NEG_INFINITY mutes it.
    pub noise_db: f64,
    /// Fraction of the clip spent in silent (unvoiced) gaps.
    pub gap_fraction: f64,
    /// Training repeat count written to the manifest for every clip.
    pub repeat: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_clips: 4,
            duration_s: 5.0,
            f0_min: 110.0,
            f0_max: 660.0,
            note_len_s: 0.5,
            vibrato_cents: 20.0,
            vibrato_hz: 5.0,
            n_harmonics: 3,
            harmonic_rolloff: 0.5,
            noise_db: -40.0,
            gap_fraction: 0.2,
            repeat: 1,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.n_clips == 0 || self.duration_s <= 0.0 {
            return Err(SynthError::BadSpec("need n_clips >= 1 and positive duration".into()));
        }
        if !(31.0..=1250.0).contains(&self.f0_min) || !(31.0..=1250.0).contains(&self.f0_max) || self.f0_min > self.f0_max {
            return Err(SynthError::BadSpec(format!(
                "f0 range [{}, {}] must lie within [31, 1250] Hz",
                self.f0_min, self.f0_max
            )));
        }
        // keep every harmonic's vibrato peak inside Nyquist
        let top = self.f0_max * 2f64.powf(self.vibrato_cents / 1200.0) * self.n_harmonics.max(1) as f64;
        if top >= SAMPLE_RATE as f64 / 2.0 {
            return Err(SynthError::BadSpec(format!(
                "harmonic {} of {} Hz exceeds Nyquist",
                self.n_harmonics, self.f0_max
            )));
        }
        if !(0.0..1.0).contains(&self.gap_fraction) {
            return Err(SynthError::BadSpec("gap_fraction must be in [0, 1)".into()));
        }
        if self.note_len_s <= 0.0 || self.repeat == 0 {
            return Err(SynthError::BadSpec("need positive note_len_s and repeat >= 1".into()));
        }
        Ok(())
    }
}

/// One generated clip before it is written to disk.
pub struct SynthClip {
    pub audio: AudioBuffer,
    /// f0 per annotation frame (hop 256/44100 s), 0 in gaps.
    pub f0: Vec<f64>,
    pub frame_times: Vec<f64>,
}

/// Files written by [`synth_dataset`].
pub struct SynthOutput {
    pub wav_paths: Vec<PathBuf>,
    pub annotation_paths: Vec<PathBuf>,
    pub manifest_path: PathBuf,
}

/// Render one clip. The f0 trajectory is a sequence of notes with
/// vibrato; gaps silence whole notes until the requested fraction is
/// reached. Phase accumulates per sample so pitch changes stay click-free.
pub fn synth_clip(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> SynthClip {
    let fs = SAMPLE_RATE as f64;
    let n_samples = (spec.duration_s * fs).round() as usize;

    // note schedule: (start sample, f0, voiced)
    let mut notes: Vec<(usize, f64, bool)> = Vec::new();
    let mut pos = 0usize;
    while pos < n_samples {
        let len = ((spec.note_len_s * rng.gen_range(0.6..1.4)) * fs) as usize;
        let f0 = rng.gen_range(spec.f0_min..=spec.f0_max);
        let voiced = rng.gen_range(0.0..1.0) >= spec.gap_fraction;
        notes.push((pos, f0, voiced));
        pos += len.max(1);
    }

    let note_at = |s: usize| {
        let i = notes.partition_point(|&(start, _, _)| start <= s) - 1;
        (notes[i].1, notes[i].2)
    };

    let noise_amp = if spec.noise_db.is_finite() {
        10f64.powf(spec.noise_db / 20.0)
    } else {
        0.0
    };
    // headroom so harmonics plus noise never clip
    let mut norm: f64 = (0..spec.n_harmonics)
        .map(|k| spec.harmonic_rolloff.powi(k as i32))
        .sum();
    norm = 0.7 / norm.max(1e-9);

    let mut samples = Vec::with_capacity(n_samples);
    let mut phase = 0.0f64;
    for s in 0..n_samples {
        let t = s as f64 / fs;
        let (f0, voiced) = note_at(s);
        let vib = if spec.vibrato_cents > 0.0 {
            2f64.powf(
                spec.vibrato_cents * (2.0 * std::f64::consts::PI * spec.vibrato_hz * t).sin()
                    / 1200.0,
            )
        } else {
            1.0
        };
        let f = f0 * vib;
        phase += 2.0 * std::f64::consts::PI * f / fs;
        let mut v = 0.0;
        if voiced {
            for k in 0..spec.n_harmonics {
                v += spec.harmonic_rolloff.powi(k as i32) * ((k + 1) as f64 * phase).sin();
            }
            v *= norm;
        }
        v += noise_amp * rng.gen_range(-1.0..1.0);
        samples.push(v as f32);
    }

    // annotation on the analysis hop, at frame centers
    let n_frames = n_samples / HOP + 1;
    let mut f0_track = Vec::with_capacity(n_frames);
    let mut frame_times = Vec::with_capacity(n_frames);
    for i in 0..n_frames {
        let s = (i * HOP).min(n_samples - 1);
        let t = s as f64 / fs;
        let (f0, voiced) = note_at(s);
        let vib = if spec.vibrato_cents > 0.0 {
            2f64.powf(
                spec.vibrato_cents * (2.0 * std::f64::consts::PI * spec.vibrato_hz * t).sin()
                    / 1200.0,
            )
        } else {
            1.0
        };
        f0_track.push(if voiced { f0 * vib } else { 0.0 });
        frame_times.push(i as f64 * HOP as f64 / fs);
    }

    SynthClip {
        audio: AudioBuffer::new(samples, SAMPLE_RATE).expect("nonempty synthetic clip"),
        f0: f0_track,
        frame_times,
    }
}

/// Generate `spec.n_clips` WAV + annotation pairs plus a manifest of
/// "wav<TAB>annotation<TAB>repeat" lines. Deterministic per seed.
pub fn synth_dataset(spec: &SynthSpec, out_dir: &Path) -> Result<SynthOutput, SynthError> {
    spec.validate()?;
    fs::create_dir_all(out_dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut wav_paths = Vec::new();
    let mut annotation_paths = Vec::new();
    let mut manifest = String::new();
    for i in 0..spec.n_clips {
        let clip = synth_clip(spec, &mut rng);
        let wav = out_dir.join(format!("clip{i:03}.wav"));
        let ann = out_dir.join(format!("clip{i:03}.f0.txt"));
        write_wav(&wav, &clip.audio)?;
        let mut text = String::new();
        for (t, f) in clip.frame_times.iter().zip(&clip.f0) {
            writeln!(text, "{t:.6}\t{f:.6}").expect("string write");
        }
        fs::write(&ann, text)?;
        writeln!(
            manifest,
            "{}\t{}\t{}",
            wav.file_name().unwrap().to_string_lossy(),
            ann.file_name().unwrap().to_string_lossy(),
            spec.repeat
        )
        .expect("string write");
        wav_paths.push(wav);
        annotation_paths.push(ann);
    }
    let manifest_path = out_dir.join("manifest.tsv");
    fs::write(&manifest_path, manifest)?;
    Ok(SynthOutput {
        wav_paths,
        annotation_paths,
        manifest_path,
    })
}
