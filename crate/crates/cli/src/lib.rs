//! Command implementations behind the `ftanet` binary.
//!
//! Each `cmd_*` function wraps one pipeline stage from `ftanet-core`:
//! melody extraction, training, evaluation, synthetic dataset generation
//! and feature dumping. Errors carry an exit-code classification so the
//! binary can honor the 0 / 1 / 2 (success / internal / bad input)
//! contract that scripts rely on.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ftanet_core::audio::{load_wav, resample};
use ftanet_core::cfp::{compute_cfp, save_cfp, CfpParams, CfpTensor, LogFreqGrid, HOP, SAMPLE_RATE};
use ftanet_core::eval::{
    decode_salience, evaluate, read_contour, resample_contour, write_contour, EvalReport,
    TOLERANCE_CENTS,
};
use ftanet_core::model::{
    forward, load_model, save_model, LayerCfg, SalienceMap, IN_CHANNELS, N_BINS,
};
use ftanet_core::synth::{synth_dataset, SynthSpec};
use ftanet_core::tensor::{ModelParams, Tensor};
use ftanet_core::train::{load_training_segments, train, TrainConfig, TrainError, SEGMENT_FRAMES};
use image::GrayImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INTERNAL: i32 = 1;
pub const EXIT_BAD_INPUT: i32 = 2;

/// Command failure tagged with the exit-code class it maps to.
#[derive(Debug, Error)]
pub enum CliError {
    /// The user supplied a missing, malformed or out-of-range input.
    #[error("{0}")]
    BadInput(String),
    /// The pipeline itself failed on valid input.
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::BadInput(_) => EXIT_BAD_INPUT,
            CliError::Internal(_) => EXIT_INTERNAL,
        }
    }
}

fn bad(e: impl std::fmt::Display) -> CliError {
    CliError::BadInput(e.to_string())
}

fn internal(e: impl std::fmt::Display) -> CliError {
    CliError::Internal(e.to_string())
}

/// Run-wide settings, loadable from a JSON file. Unknown keys are
/// rejected; every field defaults to the pipeline's standard value.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub sample_rate: u32,
    pub hop: usize,
    pub grid: LogFreqGrid,
    pub gammas: [f64; 3],
    pub layer_cfg: LayerCfg,
    pub lr: f32,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let cfp = CfpParams::default();
        let tc = TrainConfig::default();
        Self {
            sample_rate: SAMPLE_RATE,
            hop: HOP,
            grid: LogFreqGrid::default(),
            gammas: cfp.gammas,
            layer_cfg: LayerCfg::default(),
            lr: tc.lr,
            epochs: tc.epochs,
            batch: tc.batch,
            seed: tc.seed,
        }
    }
}

impl RunConfig {
    /// Load from an optional JSON file, then apply the seed override.
    pub fn load(path: Option<&Path>, seed: Option<u64>) -> Result<Self, CliError> {
        let mut cfg = match path {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| CliError::BadInput(format!("config {}: {e}", p.display())))?;
                serde_json::from_str(&text)
                    .map_err(|e| CliError::BadInput(format!("config {}: {e}", p.display())))?
            }
            None => Self::default(),
        };
        if let Some(s) = seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.sample_rate != SAMPLE_RATE {
            return Err(CliError::BadInput(format!(
                "sample_rate {} is not supported; the pipeline runs at {SAMPLE_RATE}",
                self.sample_rate
            )));
        }
        if self.hop != HOP {
            return Err(CliError::BadInput(format!(
                "hop {} is not supported; the pipeline uses {HOP}",
                self.hop
            )));
        }
        if self.grid.n_bins != N_BINS {
            return Err(CliError::BadInput(format!(
                "grid.n_bins {} does not match the model's {N_BINS} input rows",
                self.grid.n_bins
            )));
        }
        if self.grid.f_min <= 0.0 || self.grid.f_max <= self.grid.f_min
            || self.grid.bins_per_octave == 0
        {
            return Err(CliError::BadInput(format!("invalid grid {:?}", self.grid)));
        }
        if self.gammas.iter().any(|&g| !g.is_finite() || g <= 0.0) {
            return Err(CliError::BadInput(format!("invalid gammas {:?}", self.gammas)));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(CliError::BadInput(format!("invalid lr {}", self.lr)));
        }
        if self.epochs == 0 || self.batch == 0 {
            return Err(CliError::BadInput(
                "epochs and batch must be at least 1".into(),
            ));
        }
        self.layer_cfg.validate().map_err(bad)?;
        Ok(())
    }

    pub fn cfp_params(&self) -> CfpParams {
        CfpParams {
            gammas: self.gammas,
            ..CfpParams::default()
        }
    }
}

fn load_cfp_input(wav: &Path, cfg: &RunConfig) -> Result<CfpTensor, CliError> {
    let audio = load_wav(wav).map_err(|e| CliError::BadInput(format!("{}: {e}", wav.display())))?;
    let audio = if audio.sample_rate == SAMPLE_RATE {
        audio
    } else {
        resample(&audio, SAMPLE_RATE).map_err(internal)?
    };
    compute_cfp(&audio, &cfg.grid, &cfg.cfp_params())
        .map_err(|e| CliError::BadInput(format!("{}: {e}", wav.display())))
}

/// Extract a melody contour (and optionally a salience heatmap) from a WAV.
pub fn cmd_extract(
    wav: &Path,
    model_path: &Path,
    out_contour: &Path,
    out_salience: Option<&Path>,
    cfg: &RunConfig,
) -> Result<(), CliError> {
    if !model_path.exists() {
        return Err(CliError::BadInput(format!(
            "model not found: {}",
            model_path.display()
        )));
    }
    let (params, layer_cfg) = load_model(model_path).map_err(bad)?;
    let cfp = load_cfp_input(wav, cfg)?;
    let sal = forward_windowed(&cfp, &params, &layer_cfg)?;
    let contour = decode_salience(&sal, &cfg.grid).map_err(internal)?;
    write_contour(&contour, out_contour)
        .map_err(|e| CliError::BadInput(format!("{}: {e}", out_contour.display())))?;
    if let Some(png) = out_salience {
        render_salience(&sal)
            .save(png)
            .map_err(|e| CliError::BadInput(format!("{}: {e}", png.display())))?;
    }
    Ok(())
}

/// Run the network over fixed-length windows matching the training
/// segmentation and stitch the salience columns back together.
///
/// The temporal attention softmax and the fusion module's average pool
/// both normalize over the frame axis, so inference must see the same
/// window length the model was trained on; the final short window is
/// zero-padded like a training segment and its padding columns dropped.
fn forward_windowed(
    cfp: &CfpTensor,
    params: &ModelParams,
    layer_cfg: &LayerCfg,
) -> Result<SalienceMap, CliError> {
    let t = cfp.n_frames();
    let mut values = Tensor::zeros(&[N_BINS + 1, t]);
    for start in (0..t).step_by(SEGMENT_FRAMES) {
        let real = SEGMENT_FRAMES.min(t - start);
        let mut window = Tensor::zeros(&[N_BINS, SEGMENT_FRAMES, IN_CHANNELS]);
        for f in 0..N_BINS {
            for ti in 0..real {
                for ch in 0..IN_CHANNELS {
                    window.set(&[f, ti, ch], cfp.data.at(&[f, start + ti, ch]));
                }
            }
        }
        let chunk = CfpTensor {
            data: window,
            grid: cfp.grid.clone(),
            frame_times: (0..SEGMENT_FRAMES)
                .map(|i| (start + i) as f64 * HOP as f64 / f64::from(SAMPLE_RATE))
                .collect(),
        };
        let sal = forward(&chunk, params, layer_cfg).map_err(internal)?;
        for r in 0..=N_BINS {
            for ti in 0..real {
                values.set(&[r, start + ti], sal.values.at(&[r, ti]));
            }
        }
    }
    Ok(SalienceMap {
        values,
        frame_times: cfp.frame_times.clone(),
    })
}

/// Height in pixels of the non-melody strip at the bottom of the heatmap.
const VOICING_STRIP: u32 = 6;

/// Grayscale heatmap of a salience map: time on x, frequency on y (high
/// bins at the top), log-compressed magnitudes, with the non-melody row
/// rendered as a separate strip under a white divider.
pub fn render_salience(sal: &SalienceMap) -> GrayImage {
    let t = sal.n_frames() as u32;
    let f = N_BINS as u32;
    let shade = |v: f32| {
        // log colormap over [1e-6, 1]; column-stochastic values are tiny
        let lo = 1e-6f32.ln();
        let s = ((v.max(0.0) + 1e-6).ln() - lo) / -lo;
        (s.clamp(0.0, 1.0) * 255.0) as u8
    };
    let mut img = GrayImage::new(t.max(1), f + 2 + VOICING_STRIP);
    for x in 0..t {
        for y in 0..f {
            let bin = (f - 1 - y) as usize;
            img.put_pixel(x, y, image::Luma([shade(sal.values.at(&[bin, x as usize]))]));
        }
        for y in f..f + 2 {
            img.put_pixel(x, y, image::Luma([255]));
        }
        let nm = shade(sal.values.at(&[N_BINS, x as usize]));
        for y in f + 2..f + 2 + VOICING_STRIP {
            img.put_pixel(x, y, image::Luma([nm]));
        }
    }
    img
}

/// Train a model from a manifest and write it plus a loss-history CSV.
pub fn cmd_train(
    manifest: &Path,
    cfg: &RunConfig,
    out_model: &Path,
    loss_csv: Option<&Path>,
) -> Result<(), CliError> {
    let segments = load_training_segments(manifest, &cfg.grid, &cfg.cfp_params())
        .map_err(bad)?;
    let tc = TrainConfig {
        epochs: cfg.epochs,
        lr: cfg.lr,
        batch: cfg.batch,
        seed: cfg.seed,
    };
    let result = train(&segments, &cfg.layer_cfg, &tc).map_err(|e| match e {
        TrainError::EmptyDataset => bad(e),
        other => internal(other),
    })?;
    save_model(&result.params, &cfg.layer_cfg, out_model)
        .map_err(|e| CliError::BadInput(format!("{}: {e}", out_model.display())))?;
    let csv_path = match loss_csv {
        Some(p) => p.to_path_buf(),
        None => default_loss_csv(out_model),
    };
    let mut csv = String::from("step,loss\n");
    for (i, loss) in result.step_loss.iter().enumerate() {
        csv.push_str(&format!("{i},{loss}\n"));
    }
    fs::write(&csv_path, csv)
        .map_err(|e| CliError::BadInput(format!("{}: {e}", csv_path.display())))?;
    Ok(())
}

/// Loss-history path used when none is given: the model path + ".loss.csv".
pub fn default_loss_csv(out_model: &Path) -> PathBuf {
    let mut name = out_model.as_os_str().to_os_string();
    name.push(".loss.csv");
    PathBuf::from(name)
}

/// Score an estimated contour against a reference and print the metrics.
pub fn cmd_evaluate(
    ref_file: &Path,
    est_file: &Path,
    out_json: Option<&Path>,
) -> Result<EvalReport, CliError> {
    let read = |p: &Path| {
        read_contour(p).map_err(|e| CliError::BadInput(format!("{}: {e}", p.display())))
    };
    let reference = read(ref_file)?;
    let est = read(est_file)?;
    let reference = resample_contour(&reference, &est.times).map_err(internal)?;
    let report = evaluate(&reference, &est, TOLERANCE_CENTS).map_err(internal)?;
    println!("{}", format_report(&report));
    if let Some(p) = out_json {
        let json = serde_json::to_string_pretty(&report).map_err(internal)?;
        fs::write(p, json).map_err(|e| CliError::BadInput(format!("{}: {e}", p.display())))?;
    }
    Ok(report)
}

/// The five rates as percentages with one decimal.
pub fn format_report(r: &EvalReport) -> String {
    format!(
        "OA {:.1} RPA {:.1} RCA {:.1} VR {:.1} VFA {:.1}",
        100.0 * r.oa,
        100.0 * r.rpa,
        100.0 * r.rca,
        100.0 * r.vr,
        100.0 * r.vfa
    )
}

/// Generate a synthetic dataset (WAVs, annotations, manifest) from a spec.
pub fn cmd_synth(spec_json: &Path, out_dir: &Path) -> Result<(), CliError> {
    let text = fs::read_to_string(spec_json)
        .map_err(|e| CliError::BadInput(format!("{}: {e}", spec_json.display())))?;
    let spec: SynthSpec = serde_json::from_str(&text)
        .map_err(|e| CliError::BadInput(format!("{}: {e}", spec_json.display())))?;
    spec.validate().map_err(bad)?;
    synth_dataset(&spec, out_dir)
        .map_err(|e| CliError::BadInput(format!("{}: {e}", out_dir.display())))?;
    Ok(())
}

/// Compute CFP features for a WAV and dump them to a binary file.
pub fn cmd_cfp(wav: &Path, out: &Path, cfg: &RunConfig) -> Result<(), CliError> {
    let cfp = load_cfp_input(wav, cfg)?;
    save_cfp(&cfp, out).map_err(|e| CliError::BadInput(format!("{}: {e}", out.display())))?;
    let _ = std::io::stdout().write_all(
        format!("{} frames x {} bins x 3 channels\n", cfp.n_frames(), N_BINS).as_bytes(),
    );
    Ok(())
}
