//! Action-aware segment modeling: dynamic segment sampling, masked
//! intra-segment attention, and pooled inter-segment attention.
//!
//! All intervals are half-open `[start, end)` in snippet coordinates, so a
//! proposal's duration is exactly `end - start`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;
use crate::tape::{Tape, Value};

/// A pseudo action segment driving sampling, masking and pooling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionProposal {
    /// Inclusive start snippet.
    pub start: usize,
    /// Exclusive end snippet.
    pub end: usize,
    /// Class id in [1, C].
    pub class: usize,
}

impl ActionProposal {
    pub fn duration(&self) -> usize {
        self.end - self.start
    }

    pub fn validate(&self, t: usize) -> Result<()> {
        if self.start >= self.end || self.end > t {
            return Err(Error::Contract(format!(
                "proposal [{}, {}) out of bounds for T={t}",
                self.start, self.end
            )));
        }
        Ok(())
    }
}

/// Inverse-transform-sampling plan for one video.
#[derive(Debug, Clone)]
pub struct SamplingPlan {
    /// Per-snippet sampling weight; 1 outside short proposals.
    pub weights: Vec<f64>,
    /// Real row positions to interpolate at; non-decreasing, length T.
    pub positions: Vec<f64>,
    /// Proposals expressed in resampled coordinates.
    pub remapped: Vec<ActionProposal>,
}

/// Build the dynamic segment sampling plan.
///
/// Short proposals (duration <= gamma) get weight gamma / duration over
/// their interval; overlaps take the elementwise max. T sample positions
/// are the inverse CDF of the weights at midpoint quantiles, and proposal
/// boundaries are remapped through the same monotone map.
pub fn build_sampling_plan(
    proposals: &[ActionProposal],
    t: usize,
    gamma: f64,
) -> Result<SamplingPlan> {
    if t == 0 {
        return Err(Error::Contract("empty video (T=0)".into()));
    }
    if gamma < 1.0 {
        return Err(Error::Config(format!("gamma={gamma} must be >= 1")));
    }
    for p in proposals {
        p.validate(t)?;
    }

    let mut weights = vec![1.0f64; t];
    for p in proposals {
        let d = p.duration() as f64;
        if d <= gamma {
            let w = gamma / d;
            for entry in &mut weights[p.start..p.end] {
                *entry = entry.max(w);
            }
        }
    }

    // Edge CDF: cdf[j] = sum of weights over [0, j), so cdf[t] is the total.
    let mut cdf = vec![0.0f64; t + 1];
    for i in 0..t {
        cdf[i + 1] = cdf[i] + weights[i];
    }
    let total = cdf[t];

    // Invert at midpoint quantiles; snippet i occupies [i, i+1) with its
    // center at i + 0.5, so the identity plan yields positions 0..T-1.
    let mut positions = Vec::with_capacity(t);
    let mut seg = 0usize;
    for i in 0..t {
        let u = (i as f64 + 0.5) * total / t as f64;
        while seg + 1 < t && cdf[seg + 1] <= u {
            seg += 1;
        }
        let edge = seg as f64 + (u - cdf[seg]) / weights[seg];
        let center = (edge - 0.5).clamp(0.0, (t - 1) as f64);
        positions.push(center);
    }

    // Remap proposal boundaries through the forward map
    // phi(tau) = cdf(tau) * T / total, rounding to the nearest snippet.
    let scale = t as f64 / total;
    let remapped = proposals
        .iter()
        .map(|p| {
            let s = math::round(cdf[p.start] * scale) as usize;
            let e = math::round(cdf[p.end] * scale) as usize;
            let s = s.min(t - 1);
            let e = e.clamp(s + 1, t);
            ActionProposal {
                start: s,
                end: e,
                class: p.class,
            }
        })
        .collect();

    Ok(SamplingPlan {
        weights,
        positions,
        remapped,
    })
}

/// Resample features through a sampling plan by linear row interpolation.
/// Output row count equals the input row count.
pub fn resample_features(tape: &mut Tape, x: Value, plan: &SamplingPlan) -> Result<Value> {
    tape.interp_rows(x, &plan.positions)
}

/// T×T binary intra-segment attention mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    t: usize,
    entries: Vec<bool>,
}

impl AttentionMask {
    /// Mark `[s, e) x [s, e)` for every proposal.
    pub fn from_proposals(proposals: &[ActionProposal], t: usize) -> Result<Self> {
        let mut entries = vec![false; t * t];
        for p in proposals {
            p.validate(t)?;
            for i in p.start..p.end {
                for j in p.start..p.end {
                    entries[i * t + j] = true;
                }
            }
        }
        Ok(AttentionMask { t, entries })
    }

    pub fn len(&self) -> usize {
        self.t
    }

    pub fn is_empty(&self) -> bool {
        self.t == 0
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.entries[i * self.t + j]
    }

    pub fn entries(&self) -> &[bool] {
        &self.entries
    }
}

/// Tape handles for one attention layer's projection matrices.
#[derive(Debug, Clone, Copy)]
pub struct AttentionParams {
    pub wq: Value,
    pub wk: Value,
    pub wv: Value,
    pub wo: Value,
}

/// Learnable affine of the per-channel temporal standardization.
#[derive(Debug, Clone, Copy)]
pub struct NormParams {
    pub scale: Value,
    pub shift: Value,
}

const NORM_EPS: f64 = 1e-5;

/// Standardize each channel over the temporal axis, then apply the
/// learnable affine.
fn temporal_norm(tape: &mut Tape, x: Value, norm: &NormParams) -> Result<Value> {
    let rows = tape.value(x).rows();
    let mean = tape.mean_axis0(x)?;
    let mean_b = tape.broadcast_rows(mean, rows)?;
    let centered = tape.sub(x, mean_b)?;
    let sq = tape.mul(centered, centered)?;
    let var = tape.mean_axis0(sq)?;
    let var_eps = tape.add_scalar(var, NORM_EPS)?;
    let std = tape.sqrt(var_eps)?;
    let std_b = tape.broadcast_rows(std, rows)?;
    let standardized = tape.div(centered, std_b)?;
    let scale_b = tape.broadcast_rows(norm.scale, rows)?;
    let shift_b = tape.broadcast_rows(norm.shift, rows)?;
    let scaled = tape.mul(standardized, scale_b)?;
    tape.add(scaled, shift_b)
}

/// Multi-head scaled dot-product attention; returns `concat(heads) * W_O`.
/// With a mask, rows whose mask is empty produce zero attention output.
fn multi_head_attention(
    tape: &mut Tape,
    x: Value,
    heads: usize,
    params: &AttentionParams,
    mask: Option<&[bool]>,
) -> Result<Value> {
    let (_, d) = tape.value(x).expect_matrix()?;
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!(
            "H={heads} must divide the feature dim {d}"
        )));
    }
    let dh = d / heads;
    let scale = 1.0 / math::sqrt(dh as f64);

    let q = tape.matmul(x, params.wq)?;
    let k = tape.matmul(x, params.wk)?;
    let v = tape.matmul(x, params.wv)?;

    let mut head_outputs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = tape.slice_cols(q, lo, hi)?;
        let kh = tape.slice_cols(k, lo, hi)?;
        let vh = tape.slice_cols(v, lo, hi)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scaled = tape.scale(scores, scale)?;
        let attn = match mask {
            Some(m) => tape.masked_softmax_rows(scaled, m)?,
            None => tape.softmax(scaled, 1)?,
        };
        head_outputs.push(tape.matmul(attn, vh)?);
    }
    let concat = tape.concat_cols(&head_outputs)?;
    tape.matmul(concat, params.wo)
}

/// Masked self-attention within action proposals:
/// `Z = X + norm(MaskedAttention(X) W_O)`. Snippets outside every proposal
/// attend to nothing and receive only the residual.
pub fn intra_segment_attention(
    tape: &mut Tape,
    x: Value,
    mask: &AttentionMask,
    heads: usize,
    params: &AttentionParams,
    norm: &NormParams,
) -> Result<Value> {
    let (t, _) = tape.value(x).expect_matrix()?;
    if mask.len() != t {
        return Err(Error::Dimension(format!(
            "mask for {} snippets against T={t}",
            mask.len()
        )));
    }
    let attended = multi_head_attention(tape, x, heads, params, Some(mask.entries()))?;
    let normed = temporal_norm(tape, attended, norm)?;
    tape.add(x, normed)
}

/// Self-attention across proposals: mean-pool each proposal to one token,
/// attend over the tokens, broadcast back over the intervals and add
/// residually. With no proposals the input is returned unchanged.
pub fn inter_segment_attention(
    tape: &mut Tape,
    x: Value,
    proposals: &[ActionProposal],
    heads: usize,
    params: &AttentionParams,
) -> Result<Value> {
    let (t, _) = tape.value(x).expect_matrix()?;
    if proposals.is_empty() {
        return Ok(x);
    }
    let ranges: Vec<(usize, usize)> = proposals.iter().map(|p| (p.start, p.end)).collect();
    for p in proposals {
        p.validate(t)?;
    }
    let pooled = tape.segment_pool(x, &ranges)?;
    let attended = multi_head_attention(tape, pooled, heads, params, None)?;
    let spread = tape.segment_broadcast(attended, &ranges, t)?;
    tape.add(x, spread)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn prop(start: usize, end: usize) -> ActionProposal {
        ActionProposal {
            start,
            end,
            class: 1,
        }
    }

    #[test]
    fn no_proposals_is_identity_sampling() {
        let plan = build_sampling_plan(&[], 6, 6.0).unwrap();
        assert_eq!(plan.weights, vec![1.0; 6]);
        for (i, &p) in plan.positions.iter().enumerate() {
            assert!((p - i as f64).abs() < 1e-12, "position {i} = {p}");
        }
    }

    #[test]
    fn short_proposal_weights_and_concentration() {
        // T=6, one proposal [2,5), gamma=6: W = [1,1,2,2,2,1]
        let plan = build_sampling_plan(&[prop(2, 5)], 6, 6.0).unwrap();
        assert_eq!(plan.weights, vec![1.0, 1.0, 2.0, 2.0, 2.0, 1.0]);
        // 4 of the 6 samples fall inside [2, 5)
        let inside = plan
            .positions
            .iter()
            .filter(|&&p| (2.0..5.0).contains(&p))
            .count();
        assert_eq!(inside, 4, "positions {:?}", plan.positions);
    }

    #[test]
    fn hand_evaluated_inverse_cdf() {
        // cdf edges [0,1,2,4,6,8,9], total 9, quantiles (i+0.5)*1.5
        let plan = build_sampling_plan(&[prop(2, 5)], 6, 6.0).unwrap();
        let expected_edges = [0.75, 2.125, 2.875, 3.625, 4.375, 5.25];
        for (p, e) in plan.positions.iter().zip(expected_edges) {
            assert!((p - (e - 0.5)).abs() < 1e-12, "{p} vs {}", e - 0.5);
        }
    }

    #[test]
    fn long_proposals_leave_weights_untouched() {
        let plan = build_sampling_plan(&[prop(0, 10)], 12, 6.0).unwrap();
        assert_eq!(plan.weights, vec![1.0; 12]);
    }

    #[test]
    fn overlapping_short_proposals_take_max_weight() {
        let plan =
            build_sampling_plan(&[prop(0, 2), prop(1, 5)], 10, 6.0).unwrap();
        // [0,2) -> 3.0, [1,5) -> 1.5; overlap keeps the max
        assert_eq!(plan.weights[0], 3.0);
        assert_eq!(plan.weights[1], 3.0);
        assert_eq!(plan.weights[2], 1.5);
    }

    #[test]
    fn shorter_proposals_get_larger_weights() {
        let short = build_sampling_plan(&[prop(0, 2)], 20, 6.0).unwrap();
        let longer = build_sampling_plan(&[prop(0, 4)], 20, 6.0).unwrap();
        assert!(short.weights[0] > longer.weights[0]);
    }

    #[test]
    fn positions_are_monotone_non_decreasing() {
        let plan =
            build_sampling_plan(&[prop(1, 3), prop(8, 10)], 16, 6.0).unwrap();
        for w in plan.positions.windows(2) {
            assert!(w[0] <= w[1]);
        }
    }

    #[test]
    fn remapped_short_proposal_scales_toward_gamma() {
        // Long video, short proposal: the correction factor T/total ~ 1 so
        // the resampled duration lands near gamma.
        let plan = build_sampling_plan(&[prop(50, 53)], 200, 6.0).unwrap();
        let d = plan.remapped[0].duration();
        assert!((5..=7).contains(&d), "remapped duration {d}");
    }

    #[test]
    fn empty_video_is_contract_error() {
        assert!(matches!(
            build_sampling_plan(&[], 0, 6.0),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn resample_identity_plan_is_exact() {
        let plan = build_sampling_plan(&[], 4, 6.0).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(
            Tensor::matrix(4, 2, (0..8).map(|v| v as f64).collect()).unwrap(),
        );
        let z = resample_features(&mut tape, x, &plan).unwrap();
        assert_eq!(tape.value(z).data(), tape.value(x).data());
    }

    #[test]
    fn resample_preserves_constant_features() {
        let plan = build_sampling_plan(&[prop(0, 2)], 8, 6.0).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(alloc::vec![8, 3], 2.5));
        let z = resample_features(&mut tape, x, &plan).unwrap();
        assert!(tape.value(z).data().iter().all(|&v| (v - 2.5).abs() < 1e-12));
        assert_eq!(tape.value(z).rows(), 8);
    }

    #[test]
    fn mask_blocks_match_proposals() {
        let mask = AttentionMask::from_proposals(&[prop(1, 3), prop(4, 6)], 6).unwrap();
        assert!(mask.get(1, 2));
        assert!(mask.get(4, 5));
        assert!(!mask.get(1, 4)); // cross-block
        assert!(!mask.get(0, 0)); // background
        // symmetry
        for i in 0..6 {
            for j in 0..6 {
                assert_eq!(mask.get(i, j), mask.get(j, i));
            }
        }
    }
}
