//! Melody contour decoding and the standard five evaluation metrics.
//!
//! Contours use the MIREX sign convention: positive frequency = voiced,
//! negative = unvoiced but carrying a shadow pitch estimate, zero =
//! unvoiced with no estimate. Shadow pitches let the pitch-accuracy
//! metrics credit a correct frequency under a wrong voicing decision.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cfp::{bin_to_hz, LogFreqGrid};
use crate::model::{SalienceMap, NON_MELODY_ROW};

/// Pitch tolerance of RPA/RCA/OA, inclusive.
pub const TOLERANCE_CENTS: f64 = 50.0;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("expected {expected} salience rows, got {got}")]
    WrongRowCount { expected: usize, got: usize },
    #[error("empty contour")]
    EmptyContour,
    #[error("contour grids differ: {0} vs {1} frames")]
    GridMismatch(usize, usize),
    #[error("contour file line {line}: {msg}")]
    BadContourLine { line: usize, msg: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// A melody trajectory on a uniform time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct MelodyContour {
    /// Frame times in seconds, strictly increasing, uniform hop.
    pub times: Vec<f64>,
    /// Signed frequencies in Hz (MIREX convention).
    pub freqs: Vec<f64>,
}

impl MelodyContour {
    pub fn new(times: Vec<f64>, freqs: Vec<f64>) -> Self {
        assert_eq!(times.len(), freqs.len(), "times/freqs length mismatch");
        Self { times, freqs }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Frame spacing; zero for contours shorter than two frames.
    pub fn hop(&self) -> f64 {
        if self.times.len() < 2 {
            0.0
        } else {
            self.times[1] - self.times[0]
        }
    }

    pub fn voiced(&self, i: usize) -> bool {
        self.freqs[i] > 0.0
    }
}

/// The five melody metrics plus the frame counts behind them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub oa: f64,
    pub rpa: f64,
    pub rca: f64,
    pub vr: f64,
    pub vfa: f64,
    pub n_frames: usize,
    pub n_ref_voiced: usize,
    pub n_ref_unvoiced: usize,
}

/// Per-frame argmax decode of a salience map. A frame whose winner is the
/// non-melody row becomes unvoiced with a negative shadow pitch (best
/// pitch row); ties break toward the lower row index.
pub fn decode_salience(sal: &SalienceMap, grid: &LogFreqGrid) -> Result<MelodyContour, EvalError> {
    let dims = sal.values.dims();
    if dims.len() != 2 || dims[0] != grid.n_bins + 1 {
        return Err(EvalError::WrongRowCount {
            expected: grid.n_bins + 1,
            got: if dims.is_empty() { 0 } else { dims[0] },
        });
    }
    let t = dims[1];
    let mut freqs = Vec::with_capacity(t);
    for ti in 0..t {
        let mut best_row = 0;
        let mut best = f32::MIN;
        let mut best_pitch_row = 0;
        let mut best_pitch = f32::MIN;
        for r in 0..=NON_MELODY_ROW {
            let v = sal.values.at(&[r, ti]);
            if v > best {
                best = v;
                best_row = r;
            }
            if r < NON_MELODY_ROW && v > best_pitch {
                best_pitch = v;
                best_pitch_row = r;
            }
        }
        let f = if best_row == NON_MELODY_ROW {
            -bin_to_hz(best_pitch_row, grid).expect("pitch row in range")
        } else {
            bin_to_hz(best_row, grid).expect("pitch row in range")
        };
        freqs.push(f);
    }
    Ok(MelodyContour::new(sal.frame_times.clone(), freqs))
}

/// Nearest-neighbor resampling of `reference` onto `est_times`. Times more
/// than half a reference hop beyond coverage become unvoiced; exact
/// midpoints take the earlier frame.
pub fn resample_contour(
    reference: &MelodyContour,
    est_times: &[f64],
) -> Result<MelodyContour, EvalError> {
    if reference.is_empty() {
        return Err(EvalError::EmptyContour);
    }
    let half_hop = reference.hop() / 2.0;
    let n = reference.len();
    let freqs = est_times
        .iter()
        .map(|&t| {
            if t < reference.times[0] - half_hop || t > reference.times[n - 1] + half_hop {
                return 0.0;
            }
            // first index whose time is >= t
            let hi = reference.times.partition_point(|&rt| rt < t);
            let i = if hi == 0 {
                0
            } else if hi == n {
                n - 1
            } else {
                let (lo, hi_t) = (reference.times[hi - 1], reference.times[hi]);
                if t - lo <= hi_t - t {
                    hi - 1
                } else {
                    hi
                }
            };
            reference.freqs[i]
        })
        .collect();
    Ok(MelodyContour::new(est_times.to_vec(), freqs))
}

fn cent_diff(est: f64, reference: f64) -> f64 {
    1200.0 * (est.abs() / reference.abs()).log2()
}

fn chroma_fold(cents: f64) -> f64 {
    (cents + 600.0).rem_euclid(1200.0) - 600.0
}

/// Compute OA, RPA, RCA, VR, VFA over two contours on the same time grid.
/// Empty denominators yield 0.
pub fn evaluate(
    reference: &MelodyContour,
    est: &MelodyContour,
    tolerance_cents: f64,
) -> Result<EvalReport, EvalError> {
    if reference.len() != est.len() {
        return Err(EvalError::GridMismatch(reference.len(), est.len()));
    }
    if reference.is_empty() {
        return Err(EvalError::EmptyContour);
    }
    let n = reference.len();
    let mut n_ref_voiced = 0usize;
    let mut n_ref_unvoiced = 0usize;
    let mut pitch_hits = 0usize;
    let mut chroma_hits = 0usize;
    let mut voicing_hits = 0usize;
    let mut false_alarms = 0usize;
    let mut oa_hits = 0usize;
    for i in 0..n {
        let rv = reference.voiced(i);
        let ev = est.voiced(i);
        if rv {
            n_ref_voiced += 1;
            if ev {
                voicing_hits += 1;
            }
            // shadow pitches participate regardless of estimated voicing
            if est.freqs[i] != 0.0 {
                let d = cent_diff(est.freqs[i], reference.freqs[i]);
                if d.abs() <= tolerance_cents {
                    pitch_hits += 1;
                    if ev {
                        oa_hits += 1;
                    }
                }
                if chroma_fold(d).abs() <= tolerance_cents {
                    chroma_hits += 1;
                }
            }
        } else {
            n_ref_unvoiced += 1;
            if ev {
                false_alarms += 1;
            } else {
                oa_hits += 1;
            }
        }
    }
    let rate = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    Ok(EvalReport {
        oa: rate(oa_hits, n),
        rpa: rate(pitch_hits, n_ref_voiced),
        rca: rate(chroma_hits, n_ref_voiced),
        vr: rate(voicing_hits, n_ref_voiced),
        vfa: rate(false_alarms, n_ref_unvoiced),
        n_frames: n,
        n_ref_voiced,
        n_ref_unvoiced,
    })
}

/// Read a two-column (time, frequency) contour file.
pub fn read_contour(path: &Path) -> Result<MelodyContour, EvalError> {
    let text = fs::read_to_string(path)?;
    let mut times = Vec::new();
    let mut freqs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split_whitespace();
        let mut field = |what: &str| {
            fields
                .next()
                .ok_or_else(|| EvalError::BadContourLine {
                    line: i + 1,
                    msg: format!("missing {what}"),
                })?
                .parse::<f64>()
                .map_err(|_| EvalError::BadContourLine {
                    line: i + 1,
                    msg: format!("non-numeric {what}"),
                })
        };
        let t = field("time")?;
        let f = field("frequency")?;
        if let Some(&prev) = times.last() {
            if t <= prev {
                return Err(EvalError::BadContourLine {
                    line: i + 1,
                    msg: format!("non-increasing time {t} after {prev}"),
                });
            }
        }
        times.push(t);
        freqs.push(f);
    }
    if times.is_empty() {
        return Err(EvalError::EmptyContour);
    }
    Ok(MelodyContour::new(times, freqs))
}

/// Write a contour as two-column text.
pub fn write_contour(contour: &MelodyContour, path: &Path) -> Result<(), EvalError> {
    let mut out = String::new();
    for (t, f) in contour.times.iter().zip(&contour.freqs) {
        writeln!(out, "{t:.6}\t{f:.6}").expect("string write");
    }
    fs::write(path, out)?;
    Ok(())
}
