//! Training loop: segmentation into fixed 128-frame windows, one-hot label
//! encoding, and batched BCE/Adam optimization.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::audio::{load_wav, resample, AudioError};
use crate::cfp::{compute_cfp, CfpError, CfpParams, CfpTensor, LogFreqGrid, SAMPLE_RATE};
use crate::eval::{read_contour, EvalError, MelodyContour};
use crate::model::{
    build_forward, collect_grads, init_params, register_vars, LayerCfg, ModelError, NON_MELODY_ROW,
};
use crate::tensor::{adam_step, AdamConfig, AdamState, GradMap, Graph, ModelParams, Tensor};

/// Frames per training segment.
pub const SEGMENT_FRAMES: usize = 128;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("empty dataset")]
    EmptyDataset,
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("annotation timestamps are not strictly increasing at index {0}")]
    NonMonotonicTimestamps(usize),
    #[error("manifest line {line}: {msg}")]
    BadManifestLine { line: usize, msg: String },
    #[error("audio error: {0}")]
    Audio(#[from] AudioError),
    #[error("cfp error: {0}")]
    Cfp(#[from] CfpError),
    #[error("model error: {0}")]
    Model(#[from] ModelError),
    #[error("contour error: {0}")]
    Eval(#[from] EvalError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// One 128-frame training example.
#[derive(Debug, Clone)]
pub struct TrainSegment {
    /// [320, 128, 3] CFP window.
    pub input: Tensor<f32>,
    /// [321, 128] one-hot-per-column target.
    pub target: Tensor<f32>,
    pub source_clip: String,
    /// Frame offset of this window within the clip.
    pub offset: usize,
}

/// Optimization settings. `epochs` full passes over the shuffled segment
/// list; the step count is `epochs * ceil(n_segments / batch)`.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f32,
    pub batch: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            lr: 1e-4,
            batch: 8,
            seed: 0,
        }
    }
}

/// Trained parameters plus the loss trace.
pub struct TrainResult {
    pub params: ModelParams,
    /// Mean batch loss per epoch.
    pub epoch_loss: Vec<f32>,
    /// Loss of every optimization step in order.
    pub step_loss: Vec<f32>,
}

/// One-hot [321, T] targets for a clip: each frame takes the
/// nearest-in-time annotation (within half the annotation hop beyond the
/// ends; farther out means unvoiced). Voiced rows come from `hz_to_bin`,
/// unvoiced frames light the non-melody row.
pub fn encode_labels(
    contour: &MelodyContour,
    frame_times: &[f64],
    grid: &LogFreqGrid,
) -> Result<Tensor<f32>, TrainError> {
    for i in 1..contour.times.len() {
        if contour.times[i] <= contour.times[i - 1] {
            return Err(TrainError::NonMonotonicTimestamps(i));
        }
    }
    if contour.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let n = contour.len();
    let half_hop = contour.hop() / 2.0;
    let mut target = Tensor::zeros(&[grid.n_bins + 1, frame_times.len()]);
    for (ti, &t) in frame_times.iter().enumerate() {
        let row = if t < contour.times[0] - half_hop || t > contour.times[n - 1] + half_hop {
            NON_MELODY_ROW
        } else {
            let hi = contour.times.partition_point(|&ct| ct < t);
            let i = if hi == 0 {
                0
            } else if hi == n {
                n - 1
            } else if t - contour.times[hi - 1] <= contour.times[hi] - t {
                hi - 1
            } else {
                hi
            };
            let f = contour.freqs[i];
            if f > 0.0 {
                crate::cfp::hz_to_bin(f, grid)?
            } else {
                NON_MELODY_ROW
            }
        };
        target.set(&[row, ti], 1.0);
    }
    Ok(target)
}

/// Cut a clip into non-overlapping 128-frame windows. The last partial
/// window is zero-padded on the input and non-melody-padded on the target.
pub fn segment_clip(cfp: &CfpTensor, target: &Tensor<f32>, clip_id: &str) -> Vec<TrainSegment> {
    let dims = cfp.data.dims();
    let (f, t, c) = (dims[0], dims[1], dims[2]);
    assert_eq!(target.dims(), &[f + 1, t], "target does not match clip");
    let n_segments = t.div_ceil(SEGMENT_FRAMES);
    let mut out = Vec::with_capacity(n_segments);
    for s in 0..n_segments {
        let offset = s * SEGMENT_FRAMES;
        let real = SEGMENT_FRAMES.min(t - offset);
        let mut input = Tensor::zeros(&[f, SEGMENT_FRAMES, c]);
        for fi in 0..f {
            for ti in 0..real {
                for ci in 0..c {
                    input.set(&[fi, ti, ci], cfp.data.at(&[fi, offset + ti, ci]));
                }
            }
        }
        let mut seg_target = Tensor::zeros(&[f + 1, SEGMENT_FRAMES]);
        for ti in 0..SEGMENT_FRAMES {
            if ti < real {
                for r in 0..=f {
                    seg_target.set(&[r, ti], target.at(&[r, offset + ti]));
                }
            } else {
                seg_target.set(&[NON_MELODY_ROW, ti], 1.0);
            }
        }
        out.push(TrainSegment {
            input,
            target: seg_target,
            source_clip: clip_id.to_string(),
            offset,
        });
    }
    out
}

/// Mean BCE loss and parameter gradients of one batch.
fn batch_grads(
    params: &ModelParams,
    cfg: &LayerCfg,
    batch: &[&TrainSegment],
) -> (f32, GradMap) {
    let mut total = 0.0f32;
    let mut acc: Option<GradMap> = None;
    for seg in batch {
        let mut g = Graph::<f32>::new();
        let vars = register_vars(&mut g, params);
        let input = g.constant(seg.input.clone());
        let sal = build_forward(&mut g, input, &vars, cfg);
        let tgt = g.constant(seg.target.clone());
        let loss = g.bce_loss(sal, tgt);
        g.backward(loss);
        total += g.value(loss).item();
        let grads = collect_grads(&g, &vars);
        match &mut acc {
            None => acc = Some(grads),
            Some(a) => {
                for (name, grad) in grads {
                    let dst = a.get_mut(&name).expect("same parameter set");
                    for (d, s) in dst.data_mut().iter_mut().zip(grad.data()) {
                        *d += s;
                    }
                }
            }
        }
    }
    let n = batch.len() as f32;
    let mut grads = acc.expect("non-empty batch");
    for t in grads.values_mut() {
        for v in t.data_mut() {
            *v /= n;
        }
    }
    (total / n, grads)
}

/// Train a fresh model on the segments. Deterministic given
/// (seed, segments, layer config): the shuffle, init, and accumulation
/// order are all fixed.
pub fn train(
    segments: &[TrainSegment],
    layer_cfg: &LayerCfg,
    cfg: &TrainConfig,
) -> Result<TrainResult, TrainError> {
    if segments.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut params = init_params(layer_cfg, cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_5eed);
    let mut adam = AdamState::new();
    let adam_cfg = AdamConfig::with_lr(cfg.lr);
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    let mut step_loss = Vec::new();
    let mut order: Vec<usize> = (0..segments.len()).collect();
    let batch = cfg.batch.max(1);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_total = 0.0f32;
        let mut n_batches = 0;
        for chunk in order.chunks(batch) {
            let refs: Vec<&TrainSegment> = chunk.iter().map(|&i| &segments[i]).collect();
            let (loss, grads) = batch_grads(&params, layer_cfg, &refs);
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    step: step_loss.len(),
                });
            }
            adam_step(&mut params, &grads, &mut adam, &adam_cfg);
            step_loss.push(loss);
            epoch_total += loss;
            n_batches += 1;
        }
        epoch_loss.push(epoch_total / n_batches as f32);
    }
    Ok(TrainResult {
        params,
        epoch_loss,
        step_loss,
    })
}

/// One row of a dataset manifest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub wav: PathBuf,
    pub annotation: PathBuf,
    /// Duplication count for augmentation-by-copying.
    pub repeat: usize,
}

/// Parse a "wav<TAB>annotation<TAB>repeat" manifest. Relative paths are
/// resolved against the manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>, TrainError> {
    let text = std::fs::read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(TrainError::BadManifestLine {
                line: i + 1,
                msg: format!("expected 3 tab-separated fields, got {}", fields.len()),
            });
        }
        let repeat: usize = fields[2].parse().map_err(|_| TrainError::BadManifestLine {
            line: i + 1,
            msg: format!("bad repeat count {:?}", fields[2]),
        })?;
        if repeat == 0 {
            return Err(TrainError::BadManifestLine {
                line: i + 1,
                msg: "repeat count must be >= 1".into(),
            });
        }
        let resolve = |p: &str| {
            let pb = PathBuf::from(p);
            if pb.is_absolute() {
                pb
            } else {
                base.join(pb)
            }
        };
        entries.push(ManifestEntry {
            wav: resolve(fields[0]),
            annotation: resolve(fields[1]),
            repeat,
        });
    }
    if entries.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    Ok(entries)
}

/// Load every manifest clip into training segments: decode and resample
/// the audio, compute CFP features, encode labels on the CFP frame grid,
/// segment, and apply the repeat counts.
pub fn load_training_segments(
    manifest: &Path,
    grid: &LogFreqGrid,
    cfp_params: &CfpParams,
) -> Result<Vec<TrainSegment>, TrainError> {
    let entries = read_manifest(manifest)?;
    let mut segments = Vec::new();
    for entry in &entries {
        let audio = load_wav(&entry.wav)?;
        let audio = if audio.sample_rate == SAMPLE_RATE {
            audio
        } else {
            resample(&audio, SAMPLE_RATE)?
        };
        let cfp = compute_cfp(&audio, grid, cfp_params)?;
        let contour = read_contour(&entry.annotation)?;
        let target = encode_labels(&contour, &cfp.frame_times, grid)?;
        let clip_id = entry.wav.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        let clip_segments = segment_clip(&cfp, &target, &clip_id);
        for _ in 0..entry.repeat {
            segments.extend(clip_segments.iter().cloned());
        }
    }
    Ok(segments)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn contour_10ms(freqs: &[f64]) -> MelodyContour {
        let times = (0..freqs.len()).map(|i| i as f64 * 0.01).collect();
        MelodyContour::new(times, freqs.to_vec())
    }

    #[test]
    fn encode_voiced_frame_hits_expected_row() {
        let grid = LogFreqGrid::default();
        let c = contour_10ms(&[440.0, 440.0]);
        let t = encode_labels(&c, &[0.0, 0.01], &grid).unwrap();
        assert_eq!(t.at(&[230, 0]), 1.0);
        assert_eq!(t.at(&[230, 1]), 1.0);
        for ti in 0..2 {
            let sum: f32 = (0..321).map(|r| t.at(&[r, ti])).sum();
            assert_eq!(sum, 1.0);
        }
    }

    #[test]
    fn encode_unvoiced_frame_hits_non_melody_row() {
        let grid = LogFreqGrid::default();
        let c = contour_10ms(&[0.0, 440.0]);
        let t = encode_labels(&c, &[0.0], &grid).unwrap();
        assert_eq!(t.at(&[320, 0]), 1.0);
    }

    #[test]
    fn encode_picks_nearest_annotation() {
        let grid = LogFreqGrid::default();
        // 5.8 ms sits between the 0 ms and 10 ms annotations; 10 ms is nearer
        let c = contour_10ms(&[220.0, 440.0]);
        let t = encode_labels(&c, &[0.0058], &grid).unwrap();
        assert_eq!(t.at(&[230, 0]), 1.0);
        // 4.2 ms flips to the 0 ms label
        let t = encode_labels(&c, &[0.0042], &grid).unwrap();
        assert_eq!(t.at(&[170, 0]), 1.0);
    }

    #[test]
    fn encode_beyond_coverage_is_unvoiced() {
        let grid = LogFreqGrid::default();
        let c = contour_10ms(&[440.0, 440.0]);
        let t = encode_labels(&c, &[0.5], &grid).unwrap();
        assert_eq!(t.at(&[320, 0]), 1.0);
    }

    #[test]
    fn encode_rejects_non_monotonic_timestamps() {
        let grid = LogFreqGrid::default();
        let c = MelodyContour {
            times: vec![0.0, 0.02, 0.01],
            freqs: vec![440.0, 440.0, 440.0],
        };
        assert!(matches!(
            encode_labels(&c, &[0.0], &grid),
            Err(TrainError::NonMonotonicTimestamps(2))
        ));
    }

    #[test]
    fn encode_decode_round_trip_quantizes_within_half_bin() {
        let grid = LogFreqGrid::default();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let freqs: Vec<f64> = (0..50)
            .map(|_| {
                if rng.gen_bool(0.3) {
                    0.0
                } else {
                    rng.gen_range(40.0..1200.0)
                }
            })
            .collect();
        let c = contour_10ms(&freqs);
        let times = c.times.clone();
        let t = encode_labels(&c, &times, &grid).unwrap();
        for (ti, &f) in freqs.iter().enumerate() {
            let row = (0..321).find(|&r| t.at(&[r, ti]) == 1.0).unwrap();
            if f == 0.0 {
                assert_eq!(row, 320);
            } else {
                let back = crate::cfp::bin_to_hz(row, &grid).unwrap();
                let cents = 1200.0 * (back / f).log2();
                assert!(cents.abs() <= 10.0 + 1e-9, "{f} Hz -> {back} Hz");
            }
        }
    }

    fn toy_cfp(t: usize) -> CfpTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data: Vec<f32> = (0..320 * t * 3).map(|_| rng.gen_range(0.0..1.0)).collect();
        CfpTensor {
            data: Tensor::new(vec![320, t, 3], data),
            grid: LogFreqGrid::default(),
            frame_times: (0..t).map(|i| i as f64 * 256.0 / 44100.0).collect(),
        }
    }

    fn uniform_target(t: usize) -> Tensor<f32> {
        let mut target = Tensor::zeros(&[321, t]);
        for ti in 0..t {
            target.set(&[ti % 321, ti], 1.0);
        }
        target
    }

    #[test]
    fn segment_counts_and_offsets() {
        let cfp = toy_cfp(256);
        let segs = segment_clip(&cfp, &uniform_target(256), "clip");
        assert_eq!(segs.len(), 2);
        assert_eq!(segs[0].offset, 0);
        assert_eq!(segs[1].offset, 128);

        let cfp = toy_cfp(300);
        let segs = segment_clip(&cfp, &uniform_target(300), "clip");
        assert_eq!(segs.len(), 3);
        // final window: 44 real frames, 84 padded
        let last = &segs[2];
        for ti in 44..128 {
            assert_eq!(last.target.at(&[320, ti]), 1.0, "padded frame {ti}");
            for ci in 0..3 {
                assert_eq!(last.input.at(&[100, ti, ci]), 0.0);
            }
        }

        let cfp = toy_cfp(128);
        let segs = segment_clip(&cfp, &uniform_target(128), "clip");
        assert_eq!(segs.len(), 1);
    }

    #[test]
    fn segment_targets_stay_one_hot() {
        let cfp = toy_cfp(300);
        for seg in segment_clip(&cfp, &uniform_target(300), "clip") {
            for ti in 0..SEGMENT_FRAMES {
                let ones = (0..321).filter(|&r| seg.target.at(&[r, ti]) == 1.0).count();
                let sum: f32 = (0..321).map(|r| seg.target.at(&[r, ti])).sum();
                assert_eq!(ones, 1);
                assert_eq!(sum, 1.0);
            }
        }
    }

    fn tiny_segments(n: usize) -> Vec<TrainSegment> {
        let cfp = toy_cfp(SEGMENT_FRAMES * n);
        segment_clip(&cfp, &uniform_target(SEGMENT_FRAMES * n), "toy")
    }

    #[test]
    fn zero_lr_leaves_params_unchanged() {
        let segs = tiny_segments(1);
        let layer_cfg = LayerCfg::tiny(2);
        let cfg = TrainConfig {
            epochs: 3,
            lr: 0.0,
            batch: 1,
            seed: 5,
        };
        let result = train(&segs, &layer_cfg, &cfg).unwrap();
        let fresh = init_params(&layer_cfg, cfg.seed);
        for ((na, ta), (nb, tb)) in result.params.iter().zip(fresh.iter()) {
            assert_eq!(na, nb);
            for (a, b) in ta.data().iter().zip(tb.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn same_seed_gives_identical_loss_history() {
        let segs = tiny_segments(2);
        let layer_cfg = LayerCfg::tiny(2);
        let cfg = TrainConfig {
            epochs: 2,
            lr: 1e-3,
            batch: 2,
            seed: 9,
        };
        let a = train(&segs, &layer_cfg, &cfg).unwrap();
        let b = train(&segs, &layer_cfg, &cfg).unwrap();
        assert_eq!(a.step_loss.len(), b.step_loss.len());
        for (x, y) in a.step_loss.iter().zip(&b.step_loss) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let layer_cfg = LayerCfg::tiny(2);
        assert!(matches!(
            train(&[], &layer_cfg, &TrainConfig::default()),
            Err(TrainError::EmptyDataset)
        ));
    }

    #[test]
    fn manifest_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.tsv");
        std::fs::write(&path, "a.wav\ta.f0.txt\t2\n/abs/b.wav\t/abs/b.f0.txt\t1\n").unwrap();
        let entries = read_manifest(&path).unwrap();
        assert_eq!(entries.len(), 2);
        assert_eq!(entries[0].wav, dir.path().join("a.wav"));
        assert_eq!(entries[0].repeat, 2);
        assert_eq!(entries[1].wav, PathBuf::from("/abs/b.wav"));

        std::fs::write(&path, "a.wav\ta.f0.txt\n").unwrap();
        assert!(matches!(
            read_manifest(&path),
            Err(TrainError::BadManifestLine { line: 1, .. })
        ));
        std::fs::write(&path, "").unwrap();
        assert!(matches!(read_manifest(&path), Err(TrainError::EmptyDataset)));
    }
}
