//! The MIL base model: temporal-conv embedding, CAS / attention /
//! uncertainty heads, top-k video-level aggregation and the three
//! video-level losses, plus the full forward pass that threads the
//! segment-modeling modules in between.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;
use crate::optim::ParameterStore;
use crate::segment::{
    build_sampling_plan, intra_segment_attention, inter_segment_attention, resample_features,
    ActionProposal, AttentionMask, AttentionParams, NormParams,
};
use crate::tape::{Tape, Value};
use crate::tensor::Tensor;

pub const CROSS_ENTROPY_EPS: f64 = 1e-12;

/// Model hyper-parameters. Field names follow the conventional
/// hyper-parameter symbols (lambda_fg, beta, gamma, H, delta, alpha).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Number of action classes C (background is handled separately).
    pub num_classes: usize,
    /// Input feature dimensionality D.
    pub feature_dim: usize,
    /// Embedding width after the temporal convolution.
    pub embed_dim: usize,
    /// Temporal convolution kernel width (odd).
    pub kernel_width: usize,
    /// Top-k divisor r; k = max(1, ceil(T / r)).
    pub topk_divisor: usize,
    /// Attention heads.
    #[serde(rename = "H")]
    pub heads: usize,
    /// Number of (intra, inter) attention layer pairs.
    pub attention_depth: usize,
    pub lambda_fg: f64,
    pub lambda_bg: f64,
    pub lambda_abg: f64,
    /// Weight on the pseudo-instance loss during refinement.
    pub lambda_ins: f64,
    /// Uncertainty weight-decay coefficient.
    pub beta: f64,
    /// Dynamic-segment-sampling duration threshold, in snippets.
    pub gamma: f64,
    /// Proposal extension fraction.
    pub delta: f64,
    /// Proposal selection ratio.
    pub alpha: f64,
    /// Whether dynamic segment sampling is active during training.
    pub dss_enabled: bool,
}

impl ModelConfig {
    /// Defaults mirroring the THUMOS-style hyper-parameters, sized for the
    /// given class count and feature dim.
    pub fn new(num_classes: usize, feature_dim: usize) -> Self {
        ModelConfig {
            num_classes,
            feature_dim,
            embed_dim: feature_dim,
            kernel_width: 3,
            topk_divisor: 8,
            heads: 8,
            attention_depth: 1,
            lambda_fg: 1.0,
            lambda_bg: 0.5,
            lambda_abg: 0.5,
            lambda_ins: 0.1,
            beta: 0.2,
            gamma: 6.0,
            delta: 0.5,
            alpha: 0.7,
            dss_enabled: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        if self.feature_dim == 0 || self.embed_dim == 0 {
            return Err(Error::Config("feature_dim and embed_dim must be positive".into()));
        }
        if self.kernel_width % 2 == 0 {
            return Err(Error::Config(format!(
                "kernel_width {} must be odd",
                self.kernel_width
            )));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "H={} must divide embed_dim={}",
                self.heads, self.embed_dim
            )));
        }
        if self.topk_divisor < 1 {
            return Err(Error::Config("topk_divisor must be >= 1".into()));
        }
        if self.lambda_fg < 0.0
            || self.lambda_bg < 0.0
            || self.lambda_abg < 0.0
            || self.lambda_ins < 0.0
        {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.gamma < 1.0 {
            return Err(Error::Config("gamma must be >= 1 snippet".into()));
        }
        if !(0.0 < self.alpha && self.alpha <= 1.0) {
            return Err(Error::Config("alpha must be in (0, 1]".into()));
        }
        if self.delta < 0.0 {
            return Err(Error::Config("delta must be non-negative".into()));
        }
        if self.attention_depth == 0 {
            return Err(Error::Config("attention_depth must be >= 1".into()));
        }
        Ok(())
    }

    /// k for the top-k mean aggregation of a T-snippet video.
    pub fn topk(&self, t: usize) -> usize {
        let k = (t + self.topk_divisor - 1) / self.topk_divisor;
        k.max(1).min(t)
    }

    /// Names of the base-model parameters.
    pub fn base_param_names(&self) -> Vec<String> {
        vec![
            "embed.kernel".into(),
            "embed.bias".into(),
            "head.cas.weight".into(),
            "head.cas.bias".into(),
            "head.attn.weight".into(),
            "head.attn.bias".into(),
            "head.unc.weight".into(),
            "head.unc.bias".into(),
        ]
    }

    /// Names of the segment-modeling parameters.
    pub fn segment_param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for l in 0..self.attention_depth {
            for m in ["wq", "wk", "wv", "wo"] {
                names.push(format!("intra{l}.{m}"));
            }
            names.push(format!("intra{l}.norm_scale"));
            names.push(format!("intra{l}.norm_shift"));
            for m in ["wq", "wk", "wv", "wo"] {
                names.push(format!("inter{l}.{m}"));
            }
        }
        names
    }

    pub fn all_param_names(&self) -> Vec<String> {
        let mut names = self.base_param_names();
        names.extend(self.segment_param_names());
        names
    }
}

fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, shape: Vec<usize>) -> Tensor {
    let bound = math::sqrt(6.0 / (fan_in + fan_out) as f64);
    let numel: usize = shape.iter().product();
    let data = (0..numel)
        .map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * bound)
        .collect();
    Tensor::new(shape, data).expect("xavier shape")
}

/// Seeded parameter initialization for the full model (base + segment
/// modules).
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParameterStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, d, e) = (cfg.num_classes, cfg.feature_dim, cfg.embed_dim);
    let w = cfg.kernel_width;
    let mut store = ParameterStore::new();

    store.insert(
        "embed.kernel",
        xavier(&mut rng, w * d, e, vec![w, d, e]),
    );
    store.insert("embed.bias", Tensor::zeros(vec![e]));
    store.insert("head.cas.weight", xavier(&mut rng, e, c + 1, vec![e, c + 1]));
    store.insert("head.cas.bias", Tensor::zeros(vec![c + 1]));
    store.insert("head.attn.weight", xavier(&mut rng, e, 2, vec![e, 2]));
    store.insert("head.attn.bias", Tensor::zeros(vec![2]));
    // Zero init keeps the uncertainty near 0 when instance supervision
    // starts, so the exp(-U) weighting begins at 1.
    store.insert("head.unc.weight", Tensor::zeros(vec![e, 1]));
    store.insert("head.unc.bias", Tensor::zeros(vec![1]));

    for l in 0..cfg.attention_depth {
        // Zero output projections make every residual block start as the
        // identity, so enabling the modules preserves the warmed-up model.
        for m in ["wq", "wk", "wv"] {
            store.insert(&format!("intra{l}.{m}"), xavier(&mut rng, e, e, vec![e, e]));
        }
        store.insert(&format!("intra{l}.wo"), Tensor::zeros(vec![e, e]));
        store.insert(&format!("intra{l}.norm_scale"), Tensor::full(vec![e], 1.0));
        store.insert(&format!("intra{l}.norm_shift"), Tensor::zeros(vec![e]));
        for m in ["wq", "wk", "wv"] {
            store.insert(&format!("inter{l}.{m}"), xavier(&mut rng, e, e, vec![e, e]));
        }
        store.insert(&format!("inter{l}.wo"), Tensor::zeros(vec![e, e]));
    }
    Ok(store)
}

/// Rebuild a parameter store from exported (name, tensor) pairs; the set
/// of names and every shape must match the configuration.
pub fn restore_params(cfg: &ModelConfig, params: &[(String, Tensor)]) -> Result<ParameterStore> {
    let mut store = init_params(cfg, 0)?;
    if params.len() != store.len() {
        return Err(Error::Contract(format!(
            "snapshot holds {} of {} parameters",
            params.len(),
            store.len()
        )));
    }
    for (name, tensor) in params {
        store.set_value(name, tensor.clone())?;
    }
    Ok(store)
}

/// Parameters bound onto one tape for one forward pass.
pub struct BoundParams {
    bindings: Vec<(String, Value)>,
}

impl BoundParams {
    pub fn bind(store: &ParameterStore, tape: &mut Tape, names: &[String]) -> Result<Self> {
        let mut bindings = Vec::with_capacity(names.len());
        for name in names {
            let v = store.bind(tape, name)?;
            bindings.push((name.clone(), v));
        }
        Ok(BoundParams { bindings })
    }

    pub fn get(&self, name: &str) -> Result<Value> {
        self.bindings
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::Contract(format!("parameter '{name}' not bound")))
    }

    pub fn bindings(&self) -> &[(String, Value)] {
        &self.bindings
    }
}

/// Per-snippet model outputs on the tape.
pub struct ModelOutputs {
    /// Embedded features after segment modeling, T×embed.
    pub embedded: Value,
    /// CAS logits, T×(C+1).
    pub cas: Value,
    /// Foreground/background attention, T×2, rows softmax-normalized.
    pub attention: Value,
    /// Uncertainty scores, length T.
    pub uncertainty: Value,
    /// Proposals in the coordinates of `cas` (resampled when DSS ran).
    pub effective_proposals: Vec<ActionProposal>,
    /// Number of snippets of the (possibly resampled) timeline.
    pub num_snippets: usize,
}

/// Which parts of the pipeline a forward pass exercises.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOptions {
    pub use_dss: bool,
    pub use_attention_modules: bool,
}

impl ForwardOptions {
    pub fn base_only() -> Self {
        ForwardOptions {
            use_dss: false,
            use_attention_modules: false,
        }
    }

    pub fn full(cfg: &ModelConfig) -> Self {
        ForwardOptions {
            use_dss: cfg.dss_enabled,
            use_attention_modules: true,
        }
    }
}

/// Feature embedding: `X = ReLU(conv(F))`; output length equals input
/// length under same-padding.
pub fn embed(tape: &mut Tape, features: Value, params: &BoundParams) -> Result<Value> {
    let kernel = params.get("embed.kernel")?;
    let bias = params.get("embed.bias")?;
    let conv = tape.conv1d(features, kernel, bias)?;
    tape.relu(conv)
}

/// CAS / attention / uncertainty heads on the embedded features.
pub fn heads(
    tape: &mut Tape,
    x: Value,
    params: &BoundParams,
) -> Result<(Value, Value, Value)> {
    let t = tape.value(x).rows();
    let cas_w = params.get("head.cas.weight")?;
    let cas_b = params.get("head.cas.bias")?;
    let cas_lin = tape.matmul(x, cas_w)?;
    let cas = tape.add_bias_row(cas_lin, cas_b)?;

    let attn_w = params.get("head.attn.weight")?;
    let attn_b = params.get("head.attn.bias")?;
    let attn_lin = tape.matmul(x, attn_w)?;
    let attn_logits = tape.add_bias_row(attn_lin, attn_b)?;
    let attention = tape.softmax(attn_logits, 1)?;

    let unc_w = params.get("head.unc.weight")?;
    let unc_b = params.get("head.unc.bias")?;
    let unc_lin = tape.matmul(x, unc_w)?;
    let unc_mat = tape.add_bias_row(unc_lin, unc_b)?;
    let uncertainty = tape.reshape(unc_mat, vec![t])?;

    Ok((cas, attention, uncertainty))
}

/// Foreground- and background-attention weighted CAS.
pub fn attention_weighted_cas(
    tape: &mut Tape,
    cas: Value,
    attention: Value,
) -> Result<(Value, Value)> {
    let t = tape.value(cas).rows();
    let fg_col = tape.slice_cols(attention, 0, 1)?;
    let fg = tape.reshape(fg_col, vec![t])?;
    let bg_col = tape.slice_cols(attention, 1, 2)?;
    let bg = tape.reshape(bg_col, vec![t])?;
    let p_fg = tape.mul_column(cas, fg)?;
    let p_bg = tape.mul_column(cas, bg)?;
    Ok((p_fg, p_bg))
}

/// Video-level class probabilities: per-class mean of the k largest
/// temporal values, then softmax across the C+1 classes.
pub fn topk_video_probs(tape: &mut Tape, p_hat: Value, k: usize) -> Result<Value> {
    let pooled = tape.topk_mean_cols(p_hat, k)?;
    tape.softmax(pooled, 0)
}

/// The three video-level losses and their weighted combination.
pub struct VideoLosses {
    pub fg: Value,
    pub bg: Value,
    pub abg: Value,
    pub total: Value,
}

fn check_normalized(tape: &Tape, p: Value, what: &str) -> Result<()> {
    let sum: f64 = tape.value(p).data().iter().sum();
    if math::abs(sum - 1.0) > 1e-6 {
        return Err(Error::Contract(format!(
            "{what} is not a probability vector (sum {sum})"
        )));
    }
    Ok(())
}

/// Cross-entropy `-sum(y * log(p + eps))` against a constant target.
fn cross_entropy(tape: &mut Tape, p: Value, target: &[f64]) -> Result<Value> {
    if tape.value(p).numel() != target.len() {
        return Err(Error::Dimension(format!(
            "target of {} entries against {} probabilities",
            target.len(),
            tape.value(p).numel()
        )));
    }
    let y = tape.leaf(Tensor::vector(target.to_vec()));
    let shifted = tape.add_scalar(p, CROSS_ENTROPY_EPS)?;
    let logp = tape.log(shifted)?;
    let weighted = tape.mul(y, logp)?;
    let s = tape.sum_all(weighted)?;
    tape.scale(s, -1.0)
}

pub fn video_losses(
    tape: &mut Tape,
    p_fg: Value,
    p_bg: Value,
    y_fg: &[f64],
    y_bg: &[f64],
    cfg: &ModelConfig,
) -> Result<VideoLosses> {
    check_normalized(tape, p_fg, "p_fg")?;
    check_normalized(tape, p_bg, "p_bg")?;
    let fg = cross_entropy(tape, p_fg, y_fg)?;
    let bg = cross_entropy(tape, p_bg, y_bg)?;
    let abg = cross_entropy(tape, p_bg, y_fg)?;
    let wfg = tape.scale(fg, cfg.lambda_fg)?;
    let wbg = tape.scale(bg, cfg.lambda_bg)?;
    let wabg = tape.scale(abg, cfg.lambda_abg)?;
    let partial = tape.add(wfg, wbg)?;
    let total = tape.add(partial, wabg)?;
    Ok(VideoLosses { fg, bg, abg, total })
}

/// Full forward pass: optional DSS, embedding, optional intra/inter
/// attention stack, then the three heads.
pub fn forward(
    tape: &mut Tape,
    store: &ParameterStore,
    cfg: &ModelConfig,
    features: &Tensor,
    proposals: &[ActionProposal],
    opts: ForwardOptions,
) -> Result<(ModelOutputs, BoundParams)> {
    cfg.validate()?;
    let (t, d) = features.expect_matrix()?;
    if d != cfg.feature_dim {
        return Err(Error::Config(format!(
            "features of dim {d}, model expects {}",
            cfg.feature_dim
        )));
    }
    let use_modules = opts.use_attention_modules && !proposals.is_empty();
    let names = if use_modules {
        cfg.all_param_names()
    } else {
        cfg.base_param_names()
    };
    let params = BoundParams::bind(store, tape, &names)?;

    let mut f = tape.leaf(features.clone());
    let mut effective = proposals.to_vec();
    if opts.use_dss && !proposals.is_empty() {
        let plan = build_sampling_plan(proposals, t, cfg.gamma)?;
        f = resample_features(tape, f, &plan)?;
        effective = plan.remapped;
    }

    let mut x = embed(tape, f, &params)?;

    if use_modules {
        for l in 0..cfg.attention_depth {
            let mask = AttentionMask::from_proposals(&effective, t)?;
            let intra = AttentionParams {
                wq: params.get(&format!("intra{l}.wq"))?,
                wk: params.get(&format!("intra{l}.wk"))?,
                wv: params.get(&format!("intra{l}.wv"))?,
                wo: params.get(&format!("intra{l}.wo"))?,
            };
            let norm = NormParams {
                scale: params.get(&format!("intra{l}.norm_scale"))?,
                shift: params.get(&format!("intra{l}.norm_shift"))?,
            };
            x = intra_segment_attention(tape, x, &mask, cfg.heads, &intra, &norm)?;
            let inter = AttentionParams {
                wq: params.get(&format!("inter{l}.wq"))?,
                wk: params.get(&format!("inter{l}.wk"))?,
                wv: params.get(&format!("inter{l}.wv"))?,
                wo: params.get(&format!("inter{l}.wo"))?,
            };
            x = inter_segment_attention(tape, x, &effective, cfg.heads, &inter)?;
        }
    }

    let (cas, attention, uncertainty) = heads(tape, x, &params)?;
    Ok((
        ModelOutputs {
            embedded: x,
            cas,
            attention,
            uncertainty,
            effective_proposals: effective,
            num_snippets: t,
        },
        params,
    ))
}

/// Plain (non-tape) per-row softmax of CAS logits, used at extraction and
/// evaluation time.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let (m, n) = (logits.rows(), logits.cols());
    let mut out = logits.clone();
    for i in 0..m {
        let row = &mut out.data_mut()[i * n..(i + 1) * n];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for v in row.iter_mut() {
            *v = math::exp(*v - mx);
            denom += *v;
        }
        for v in row.iter_mut() {
            *v /= denom;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> ModelConfig {
        let mut cfg = ModelConfig::new(3, 4);
        cfg.embed_dim = 4;
        cfg.heads = 2;
        cfg
    }

    #[test]
    fn config_validation_catches_bad_values() {
        let mut cfg = tiny_cfg();
        cfg.kernel_width = 2;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = tiny_cfg();
        cfg.heads = 3; // does not divide 4
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn topk_rule() {
        let cfg = tiny_cfg();
        assert_eq!(cfg.topk(1), 1);
        assert_eq!(cfg.topk(8), 1);
        assert_eq!(cfg.topk(9), 2);
        assert_eq!(cfg.topk(750), 94);
    }

    #[test]
    fn embed_zero_input_zero_bias_gives_zero() {
        let cfg = tiny_cfg();
        let store = init_params(&cfg, 1).unwrap();
        let mut tape = Tape::new();
        let params =
            BoundParams::bind(&store, &mut tape, &cfg.base_param_names()).unwrap();
        let f = tape.leaf(Tensor::zeros(vec![5, 4]));
        let x = embed(&mut tape, f, &params).unwrap();
        assert!(tape.value(x).data().iter().all(|&v| v == 0.0));
        assert_eq!(tape.value(x).rows(), 5);
    }

    #[test]
    fn embed_output_is_non_negative() {
        let cfg = tiny_cfg();
        let store = init_params(&cfg, 2).unwrap();
        let mut tape = Tape::new();
        let params =
            BoundParams::bind(&store, &mut tape, &cfg.base_param_names()).unwrap();
        let data: Vec<f64> = (0..24).map(|i| (i as f64) * 0.7 - 8.0).collect();
        let f = tape.leaf(Tensor::matrix(6, 4, data).unwrap());
        let x = embed(&mut tape, f, &params).unwrap();
        assert!(tape.value(x).data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn heads_shapes_and_attention_rows() {
        let cfg = tiny_cfg();
        let store = init_params(&cfg, 3).unwrap();
        let mut tape = Tape::new();
        let (outputs, _) = forward(
            &mut tape,
            &store,
            &cfg,
            &Tensor::matrix(7, 4, (0..28).map(|v| v as f64 * 0.1).collect()).unwrap(),
            &[],
            ForwardOptions::base_only(),
        )
        .unwrap();
        let cas = tape.value(outputs.cas);
        assert_eq!(cas.shape(), &[7, 4]); // T x (C+1)
        let a = tape.value(outputs.attention);
        for i in 0..7 {
            let row_sum: f64 = a.row(i).iter().sum();
            assert!((row_sum - 1.0).abs() < 1e-9);
            assert!(a.row(i).iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        assert_eq!(tape.value(outputs.uncertainty).shape(), &[7]);
    }

    #[test]
    fn attention_weighted_cas_spot_checks() {
        let mut tape = Tape::new();
        let cas = tape.leaf(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        // fg column all ones -> p_hat_fg = cas; bg all zeros -> 0
        let attn = tape.leaf(Tensor::matrix(2, 2, vec![1.0, 0.0, 1.0, 0.0]).unwrap());
        let (p_fg, p_bg) = attention_weighted_cas(&mut tape, cas, attn).unwrap();
        assert_eq!(tape.value(p_fg).data(), tape.value(cas).data());
        assert!(tape.value(p_bg).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn topk_video_probs_degenerate_k() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::matrix(3, 2, vec![1.0, 0.0, 2.0, 0.0, 3.0, 6.0]).unwrap());
        // k = T: per-class temporal mean then softmax
        let probs = tape.topk_mean_cols(p, 3).unwrap();
        assert_eq!(tape.value(probs).data(), &[2.0, 2.0]);
        let probs = topk_video_probs(&mut tape, p, 3).unwrap();
        let out = tape.value(probs).data();
        assert!((out[0] - 0.5).abs() < 1e-12);
        // k = 1: per-class max
        let mx = tape.topk_mean_cols(p, 1).unwrap();
        assert_eq!(tape.value(mx).data(), &[3.0, 6.0]);
    }

    #[test]
    fn video_losses_analytic_values() {
        let cfg = ModelConfig::new(20, 4);
        let mut tape = Tape::new();
        let c1 = cfg.num_classes + 1; // 21
        // uniform prediction over 21 slots against a one-hot target: ln 21
        let uniform = tape.leaf(Tensor::vector(vec![1.0 / c1 as f64; c1]));
        let mut y_fg = vec![0.0; c1];
        y_fg[0] = 1.0;
        let mut y_bg = vec![0.0; c1];
        y_bg[c1 - 1] = 1.0;
        let losses = video_losses(&mut tape, uniform, uniform, &y_fg, &y_bg, &cfg).unwrap();
        let ln21 = math::ln(21.0);
        assert!((tape.value(losses.fg).item().unwrap() - ln21).abs() < 1e-9);
        assert!((tape.value(losses.bg).item().unwrap() - ln21).abs() < 1e-9);
        // weighted combination with defaults 1, 0.5, 0.5
        let total = tape.value(losses.total).item().unwrap();
        assert!((total - 2.0 * ln21).abs() < 1e-9);
    }

    #[test]
    fn exact_one_hot_prediction_gives_near_zero_loss() {
        let cfg = ModelConfig::new(2, 4);
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::vector(vec![1.0, 0.0, 0.0]));
        let y = vec![1.0, 0.0, 0.0];
        let y_bg = vec![0.0, 0.0, 1.0];
        let losses = video_losses(&mut tape, p, p, &y, &y_bg, &cfg).unwrap();
        assert!(tape.value(losses.fg).item().unwrap().abs() < 1e-9);
    }

    #[test]
    fn non_normalized_probs_are_rejected() {
        let cfg = ModelConfig::new(2, 4);
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::vector(vec![0.5, 0.5, 0.5]));
        let y = vec![1.0, 0.0, 0.0];
        let y_bg = vec![0.0, 0.0, 1.0];
        assert!(matches!(
            video_losses(&mut tape, p, p, &y, &y_bg, &cfg),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn losses_are_non_negative_for_random_probs() {
        let cfg = ModelConfig::new(4, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let mut p: Vec<f64> = (0..5).map(|_| rng.gen::<f64>() + 1e-3).collect();
            let s: f64 = p.iter().sum();
            for v in &mut p {
                *v /= s;
            }
            let mut tape = Tape::new();
            let pv = tape.leaf(Tensor::vector(p));
            let (y_fg, y_bg) = crate::data::encode_labels(&[1, 3], 4).unwrap();
            let losses = video_losses(&mut tape, pv, pv, &y_fg, &y_bg, &cfg).unwrap();
            assert!(tape.value(losses.fg).item().unwrap() >= 0.0);
            assert!(tape.value(losses.bg).item().unwrap() >= 0.0);
            assert!(tape.value(losses.abg).item().unwrap() >= 0.0);
        }
    }
}
