//! Singing melody extraction with a frequency-temporal attention network.
//!
//! The pipeline: WAV audio is decoded and resampled to 44.1 kHz
//! ([`audio`]), turned into a three-channel combined frequency and
//! periodicity representation on a 320-bin log-frequency grid ([`cfp`]),
//! fed through the attention network ([`model`]) built on a small autodiff
//! engine ([`tensor`]), and decoded into a melody contour that can be
//! scored with the standard five melody metrics ([`eval`]). Training and
//! synthetic dataset generation live in [`train`] and [`synth`].

pub mod audio;
pub mod cfp;
pub mod eval;
pub mod model;
pub mod synth;
pub mod tensor;
pub mod train;
