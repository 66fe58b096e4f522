//! The melody extraction network: stacked frequency-temporal attention
//! blocks with selective fusion, a melody detection branch, and a
//! column-stochastic (F+1)xT output head.
//!
//! Every building block is written against [`Graph`] so the same code path
//! serves inference, training, and gradient checking (the graph is generic
//! over the element type). Parameters live in a flat [`ModelParams`] map
//! keyed by dotted names; [`register_vars`] turns them into graph leaves.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cfp::CfpTensor;
use crate::tensor::{Graph, ModelParams, Padding, ParamsError, Scalar, Tensor, VarId};

/// Frequency bins of the model input.
pub const N_BINS: usize = 320;
/// Input channel count (the three CFP channels).
pub const IN_CHANNELS: usize = 3;
/// Row index of the non-melody logit in the output map.
pub const NON_MELODY_ROW: usize = N_BINS;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("expected input shape [320, T, 3], got {0:?}")]
    BadInputShape(Vec<usize>),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parameter file error: {0}")]
    Params(#[from] ParamsError),
    #[error("bad layer config sidecar: {0}")]
    BadConfig(String),
}

/// Architecture hyperparameters. The network is `n_blocks` stages of
/// [3x3 lift conv -> attention module -> selective fusion] at channel
/// widths `widths`, plus the fixed-geometry melody detection branch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerCfg {
    pub n_blocks: usize,
    /// Channel width of each block; length must equal `n_blocks`.
    pub widths: Vec<usize>,
    /// Channel reduction ratio of the fusion module's shared FC.
    pub reduction: usize,
    /// Kernel size of the 1-D attention-path convolutions.
    pub attn_kernel: usize,
    /// Channel widths of the four detection-branch convolutions.
    pub mdb_widths: [usize; 4],
}

impl Default for LayerCfg {
    fn default() -> Self {
        Self {
            n_blocks: 3,
            widths: vec![32, 64, 128],
            reduction: 4,
            attn_kernel: 5,
            mdb_widths: [32, 64, 128, 1],
        }
    }
}

impl LayerCfg {
    /// Tiny configuration for overfit experiments and gradient checks.
    pub fn tiny(width: usize) -> Self {
        Self {
            n_blocks: 1,
            widths: vec![width],
            reduction: width.min(4),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.n_blocks == 0 || self.widths.len() != self.n_blocks {
            return Err(ModelError::BadConfig(format!(
                "widths {:?} do not match n_blocks {}",
                self.widths, self.n_blocks
            )));
        }
        if self.reduction == 0 || self.attn_kernel % 2 == 0 {
            return Err(ModelError::BadConfig(
                "reduction must be >= 1 and attn_kernel odd".into(),
            ));
        }
        if self.mdb_widths[3] != 1 {
            return Err(ModelError::BadConfig("final MDB width must be 1".into()));
        }
        Ok(())
    }

    /// FC bottleneck width of the fusion module for channel count `c`.
    fn reduced(&self, c: usize) -> usize {
        (c / self.reduction).max(1)
    }
}

/// Normalized salience: rows 0..320 are pitch bins, row 320 is the
/// non-melody row, every column sums to 1.
#[derive(Debug, Clone)]
pub struct SalienceMap {
    /// [321, T] column-stochastic matrix.
    pub values: Tensor<f32>,
    /// Frame centers in seconds.
    pub frame_times: Vec<f64>,
}

impl SalienceMap {
    pub fn n_frames(&self) -> usize {
        self.values.dims()[1]
    }
}

/// Attention module outputs (graph nodes).
pub struct FtaOutput {
    /// [F, T, C] frequency-attended features.
    pub e_f: VarId,
    /// [F, T, C] temporally attended features.
    pub e_t: VarId,
    /// [F, C] frequency attention, softmax over F per channel.
    pub a_f: VarId,
    /// [T, C] temporal attention, softmax over T per channel.
    pub a_t: VarId,
}

/// Parameter nodes of one attention module.
pub struct FtaParams {
    pub fconv1_k: VarId,
    pub fconv1_b: VarId,
    pub fconv2_k: VarId,
    pub fconv2_b: VarId,
    pub tconv1_k: VarId,
    pub tconv1_b: VarId,
    pub tconv2_k: VarId,
    pub tconv2_b: VarId,
    /// 3x3 conv producing S_f.
    pub sf_k: VarId,
    pub sf_b: VarId,
    /// 5x5 conv producing S_t.
    pub st_k: VarId,
    pub st_b: VarId,
}

/// Parameter nodes of one selective fusion module.
pub struct SfmParams {
    /// 1x1 conv producing S' from the block features.
    pub proj_k: VarId,
    pub proj_b: VarId,
    pub fc_w: VarId,
    pub fc_b: VarId,
    pub head_s_w: VarId,
    pub head_s_b: VarId,
    pub head_f_w: VarId,
    pub head_f_b: VarId,
    pub head_t_w: VarId,
    pub head_t_b: VarId,
}

/// Frequency-temporal attention on a feature map `s` of shape [F, T, C].
///
/// Frequency path: time-mean pool to [F, C], two 1-D convs along F with a
/// relu between, softmax over F. Temporal path mirrors it along T. The
/// attended maps are 3x3 / 5x5 convolutions of `s` scaled elementwise by
/// the broadcast attention vectors.
pub fn fta_module<T: Scalar>(g: &mut Graph<T>, s: VarId, p: &FtaParams) -> FtaOutput {
    let dims = g.value(s).dims().to_vec();
    assert_eq!(dims.len(), 3, "fta_module expects [F, T, C], got {dims:?}");
    let (f, c) = (dims[0], dims[2]);

    let zf = g.row_avg_pool(s);
    let h = g.conv1d(zf, p.fconv1_k, Some(p.fconv1_b));
    let h = g.relu(h);
    let h = g.conv1d(h, p.fconv2_k, Some(p.fconv2_b));
    let a_f = g.softmax(h, 0);

    let zt = g.col_avg_pool(s);
    let h = g.conv1d(zt, p.tconv1_k, Some(p.tconv1_b));
    let h = g.relu(h);
    let h = g.conv1d(h, p.tconv2_k, Some(p.tconv2_b));
    let a_t = g.softmax(h, 0);

    let s_f = g.conv2d(s, p.sf_k, Some(p.sf_b), (1, 1), Padding::Same);
    let s_t = g.conv2d(s, p.st_k, Some(p.st_b), (1, 1), Padding::Same);

    // A_f broadcasts over time, A_t over frequency.
    let a_f_col = g.reshape(a_f, &[f, 1, c]);
    let e_f = g.mul(s_f, a_f_col);
    let e_t = g.mul(s_t, a_t);
    FtaOutput { e_f, e_t, a_f, a_t }
}

/// Selective fusion of the block features with both attended maps.
///
/// S' comes from a 1x1 conv on `s`. The channel descriptor of
/// Gamma = S' + E_f + E_t passes through a shared bottleneck FC and three
/// per-branch heads; a softmax across the three branches yields channel
/// weights for the final weighted sum. Returns (fused [F, T, C] map,
/// branch weights [3, C]).
pub fn selective_fusion<T: Scalar>(
    g: &mut Graph<T>,
    s: VarId,
    e_f: VarId,
    e_t: VarId,
    p: &SfmParams,
) -> (VarId, VarId) {
    let dims = g.value(s).dims().to_vec();
    assert_eq!(dims.len(), 3, "selective_fusion expects [F, T, C]");
    let c = dims[2];

    let s_p = g.conv2d(s, p.proj_k, Some(p.proj_b), (1, 1), Padding::Same);
    let gamma = g.add(s_p, e_f);
    let gamma = g.add(gamma, e_t);
    let desc = g.global_avg_pool(gamma);
    let h = g.linear(desc, p.fc_w, p.fc_b);
    let h = g.relu(h);
    let z_s = g.linear(h, p.head_s_w, p.head_s_b);
    let z_f = g.linear(h, p.head_f_w, p.head_f_b);
    let z_t = g.linear(h, p.head_t_w, p.head_t_b);
    let z_s = g.reshape(z_s, &[1, c]);
    let z_f = g.reshape(z_f, &[1, c]);
    let z_t = g.reshape(z_t, &[1, c]);
    let logits = g.concat(&[z_s, z_f, z_t], 0);
    let w = g.softmax(logits, 0);

    let w_s = g.narrow(w, 0, 0, 1);
    let w_f = g.narrow(w, 0, 1, 1);
    let w_t = g.narrow(w, 0, 2, 1);
    let a = g.mul(s_p, w_s);
    let b = g.mul(e_f, w_f);
    let cpart = g.mul(e_t, w_t);
    let out = g.add(a, b);
    let out = g.add(out, cpart);
    (out, w)
}

/// Melody detection branch: four valid convolutions along frequency only
/// (kernel/stride (4,1) three times, then kernel (5,1)), collapsing
/// 320 -> 80 -> 20 -> 5 -> 1 while preserving T. Returns raw logits [1, T].
pub fn melody_detection_branch<T: Scalar>(
    g: &mut Graph<T>,
    x: VarId,
    layers: &[(VarId, VarId)],
) -> VarId {
    let dims = g.value(x).dims().to_vec();
    assert_eq!(
        dims.first(),
        Some(&N_BINS),
        "melody detection branch needs F = {N_BINS}, got {dims:?}"
    );
    assert_eq!(layers.len(), 4, "melody detection branch has 4 layers");
    let t = dims[1];
    let mut h = x;
    for (i, &(k, b)) in layers.iter().enumerate() {
        let kh = g.value(k).dims()[0];
        h = g.conv2d(h, k, Some(b), (kh, 1), Padding::Valid);
        if i + 1 < layers.len() {
            h = g.relu(h);
        }
    }
    let hd = g.value(h).dims().to_vec();
    assert_eq!(hd, vec![1, t, 1], "detection branch should end at [1, T, 1]");
    g.reshape(h, &[1, t])
}

/// Full network: lifted attention blocks -> 1x1 head for the pitch rows,
/// detection branch for the non-melody row, column softmax over all 321.
/// Returns the [321, T] salience node.
pub fn build_forward<T: Scalar>(
    g: &mut Graph<T>,
    input: VarId,
    vars: &IndexMap<String, VarId>,
    cfg: &LayerCfg,
) -> VarId {
    let dims = g.value(input).dims().to_vec();
    assert_eq!(
        dims.len(),
        3,
        "model input must be [F, T, C], got {dims:?}"
    );
    assert_eq!(dims[0], N_BINS, "model input must have {N_BINS} bins");
    assert_eq!(dims[2], IN_CHANNELS, "model input must have {IN_CHANNELS} channels");
    let t = dims[1];
    let v = |name: &str| {
        *vars
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    };

    let mut h = input;
    for i in 0..cfg.n_blocks {
        let pfx = format!("block{i}");
        let lifted = g.conv2d(
            h,
            v(&format!("{pfx}.lift.k")),
            Some(v(&format!("{pfx}.lift.b"))),
            (1, 1),
            Padding::Same,
        );
        let s = g.relu(lifted);
        let fta = fta_module(g, s, &fta_params(vars, &pfx));
        let (fused, _w) = selective_fusion(g, s, fta.e_f, fta.e_t, &sfm_params(vars, &pfx));
        h = fused;
    }
    let pitch = g.conv2d(h, v("head.k"), Some(v("head.b")), (1, 1), Padding::Same);
    let pitch = g.reshape(pitch, &[N_BINS, t]);

    let mdb_layers: Vec<(VarId, VarId)> = (0..4)
        .map(|j| (v(&format!("mdb.conv{j}.k")), v(&format!("mdb.conv{j}.b"))))
        .collect();
    let non_melody = melody_detection_branch(g, input, &mdb_layers);

    let stacked = g.concat(&[pitch, non_melody], 0);
    g.softmax(stacked, 0)
}

/// Look up the attention-module parameters of block `prefix`.
pub fn fta_params(vars: &IndexMap<String, VarId>, prefix: &str) -> FtaParams {
    let v = |suffix: &str| {
        *vars
            .get(&format!("{prefix}.fta.{suffix}"))
            .unwrap_or_else(|| panic!("missing parameter {prefix}.fta.{suffix}"))
    };
    FtaParams {
        fconv1_k: v("fconv1.k"),
        fconv1_b: v("fconv1.b"),
        fconv2_k: v("fconv2.k"),
        fconv2_b: v("fconv2.b"),
        tconv1_k: v("tconv1.k"),
        tconv1_b: v("tconv1.b"),
        tconv2_k: v("tconv2.k"),
        tconv2_b: v("tconv2.b"),
        sf_k: v("sf.k"),
        sf_b: v("sf.b"),
        st_k: v("st.k"),
        st_b: v("st.b"),
    }
}

/// Look up the fusion-module parameters of block `prefix`.
pub fn sfm_params(vars: &IndexMap<String, VarId>, prefix: &str) -> SfmParams {
    let v = |suffix: &str| {
        *vars
            .get(&format!("{prefix}.sfm.{suffix}"))
            .unwrap_or_else(|| panic!("missing parameter {prefix}.sfm.{suffix}"))
    };
    SfmParams {
        proj_k: v("proj.k"),
        proj_b: v("proj.b"),
        fc_w: v("fc.w"),
        fc_b: v("fc.b"),
        head_s_w: v("head_s.w"),
        head_s_b: v("head_s.b"),
        head_f_w: v("head_f.w"),
        head_f_b: v("head_f.b"),
        head_t_w: v("head_t.w"),
        head_t_b: v("head_t.b"),
    }
}

/// Register every parameter as a tracked graph leaf (cast to the graph's
/// element type), keyed by name.
pub fn register_vars<T: Scalar>(
    g: &mut Graph<T>,
    params: &ModelParams,
) -> IndexMap<String, VarId> {
    params
        .iter()
        .map(|(name, t)| (name.clone(), g.leaf(t.cast::<T>())))
        .collect()
}

/// Collect gradients of every registered parameter after `backward`.
pub fn collect_grads<T: Scalar>(
    g: &Graph<T>,
    vars: &IndexMap<String, VarId>,
) -> IndexMap<String, Tensor<T>> {
    vars.iter()
        .map(|(name, &id)| {
            let grad = g
                .grad(id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(g.value(id).dims()));
            (name.clone(), grad)
        })
        .collect()
}

/// Fresh parameters: Xavier-uniform kernels and weights, zero biases,
/// deterministic per seed.
pub fn init_params(cfg: &LayerCfg, seed: u64) -> ModelParams {
    cfg.validate().expect("invalid layer config");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::new();

    macro_rules! conv {
        ($name:expr, $kh:expr, $kw:expr, $cin:expr, $cout:expr) => {{
            let fan_in = ($kh * $kw * $cin) as f64;
            let fan_out = ($kh * $kw * $cout) as f64;
            let limit = (6.0 / (fan_in + fan_out)).sqrt();
            let data: Vec<f32> = (0..$kh * $kw * $cin * $cout)
                .map(|_| rng.gen_range(-limit..limit) as f32)
                .collect();
            params.insert(format!("{}.k", $name), Tensor::new(vec![$kh, $kw, $cin, $cout], data));
            params.insert(format!("{}.b", $name), Tensor::zeros(&[$cout]));
        }};
    }
    // 1-D kernels reuse the conv fan-in/out rule with kw = 1.
    macro_rules! conv1d {
        ($name:expr, $k:expr, $cin:expr, $cout:expr) => {{
            let fan_in = ($k * $cin) as f64;
            let fan_out = ($k * $cout) as f64;
            let limit = (6.0 / (fan_in + fan_out)).sqrt();
            let data: Vec<f32> = (0..$k * $cin * $cout)
                .map(|_| rng.gen_range(-limit..limit) as f32)
                .collect();
            params.insert(format!("{}.k", $name), Tensor::new(vec![$k, $cin, $cout], data));
            params.insert(format!("{}.b", $name), Tensor::zeros(&[$cout]));
        }};
    }
    macro_rules! fc {
        ($name:expr, $cin:expr, $cout:expr) => {{
            let limit = (6.0 / ($cin + $cout) as f64).sqrt();
            let data: Vec<f32> = (0..$cin * $cout)
                .map(|_| rng.gen_range(-limit..limit) as f32)
                .collect();
            params.insert(format!("{}.w", $name), Tensor::new(vec![$cin, $cout], data));
            params.insert(format!("{}.b", $name), Tensor::zeros(&[$cout]));
        }};
    }

    let mut cin = IN_CHANNELS;
    for (i, &c) in cfg.widths.iter().enumerate() {
        let pfx = format!("block{i}");
        conv!(format!("{pfx}.lift"), 3, 3, cin, c);
        let k = cfg.attn_kernel;
        conv1d!(format!("{pfx}.fta.fconv1"), k, c, c);
        conv1d!(format!("{pfx}.fta.fconv2"), k, c, c);
        conv1d!(format!("{pfx}.fta.tconv1"), k, c, c);
        conv1d!(format!("{pfx}.fta.tconv2"), k, c, c);
        conv!(format!("{pfx}.fta.sf"), 3, 3, c, c);
        conv!(format!("{pfx}.fta.st"), 5, 5, c, c);
        conv!(format!("{pfx}.sfm.proj"), 1, 1, c, c);
        let cr = cfg.reduced(c);
        fc!(format!("{pfx}.sfm.fc"), c, cr);
        fc!(format!("{pfx}.sfm.head_s"), cr, c);
        fc!(format!("{pfx}.sfm.head_f"), cr, c);
        fc!(format!("{pfx}.sfm.head_t"), cr, c);
        cin = c;
    }
    conv!("head", 1, 1, cin, 1);

    let mut mdb_in = IN_CHANNELS;
    for (j, &w) in cfg.mdb_widths.iter().enumerate() {
        let kh = if j < 3 { 4 } else { 5 };
        conv!(format!("mdb.conv{j}"), kh, 1, mdb_in, w);
        mdb_in = w;
    }
    params
}

/// Inference: run the network on a CFP tensor without tracking gradients.
pub fn forward(
    cfp: &CfpTensor,
    params: &ModelParams,
    cfg: &LayerCfg,
) -> Result<SalienceMap, ModelError> {
    let dims = cfp.data.dims();
    if dims.len() != 3 || dims[0] != N_BINS || dims[2] != IN_CHANNELS {
        return Err(ModelError::BadInputShape(dims.to_vec()));
    }
    let mut g = Graph::<f32>::new();
    let vars: IndexMap<String, VarId> = params
        .iter()
        .map(|(name, t)| (name.clone(), g.constant(t.clone())))
        .collect();
    let input = g.constant(cfp.data.clone());
    let sal = build_forward(&mut g, input, &vars, cfg);
    Ok(SalienceMap {
        values: g.value(sal).clone(),
        frame_times: cfp.frame_times.clone(),
    })
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

/// Save parameters plus a JSON sidecar describing the architecture, so a
/// loaded model is self-describing.
pub fn save_model(params: &ModelParams, cfg: &LayerCfg, path: &Path) -> Result<(), ModelError> {
    params.save(path)?;
    let json = serde_json::to_string_pretty(cfg).expect("layer config serializes");
    fs::write(sidecar_path(path), json)?;
    Ok(())
}

/// Load parameters and the architecture sidecar written by [`save_model`].
pub fn load_model(path: &Path) -> Result<(ModelParams, LayerCfg), ModelError> {
    let params = ModelParams::load(path)?;
    let sidecar = sidecar_path(path);
    let json = fs::read_to_string(&sidecar).map_err(|e| {
        ModelError::BadConfig(format!("cannot read {}: {e}", sidecar.display()))
    })?;
    let cfg: LayerCfg =
        serde_json::from_str(&json).map_err(|e| ModelError::BadConfig(e.to_string()))?;
    cfg.validate()?;
    Ok((params, cfg))
}
