//! Segment extraction from attention, proposal selection, and the
//! pseudo-label instance loss that supervises snippets inside proposals.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{softmax_rows, CROSS_ENTROPY_EPS};
use crate::segment::ActionProposal;
use crate::tape::{Tape, Value};
use crate::tensor::Tensor;

/// A candidate segment with its confidence score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredSegment {
    pub start: usize,
    pub end: usize,
    /// Class id in [1, C].
    pub class: usize,
    pub score: f64,
}

/// Deterministic segment order: score descending, then start and end
/// ascending.
pub fn rank_segments(segments: &mut [ScoredSegment]) {
    segments.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.start.cmp(&b.start))
            .then(a.end.cmp(&b.end))
    });
}

/// Threshold the foreground attention and score the resulting runs.
///
/// For every threshold, maximal runs of snippets with `A_fg >= theta`
/// become candidate segments. Each is scored per class by outer-inner
/// contrast on the fused signal `softmax(cas)[t, class] * A_fg[t]`: the
/// mean inside the run minus the mean over a margin of a quarter of the
/// run length on both sides. Peaky sub-runs inside a longer action score
/// below the complete run this way. Runs with no contrast are dropped.
pub fn extract_segments(
    cas: &Tensor,
    attention: &Tensor,
    classes: &[usize],
    thresholds: &[f64],
) -> Result<Vec<ScoredSegment>> {
    if thresholds.is_empty() {
        return Err(Error::Contract("empty threshold sweep".into()));
    }
    let (t, c1) = cas.expect_matrix()?;
    let (ta, two) = attention.expect_matrix()?;
    if ta != t || two != 2 {
        return Err(Error::Dimension(format!(
            "attention of shape {:?} against {t}x{c1} scores",
            attention.shape()
        )));
    }
    for &c in classes {
        if c < 1 || c >= c1 {
            return Err(Error::Contract(format!("class id {c} outside [1, {}]", c1 - 1)));
        }
    }
    let probs = softmax_rows(cas);
    let fg: Vec<f64> = (0..t).map(|i| attention.at(i, 0)).collect();

    let mut out = Vec::new();
    for &theta in thresholds {
        let mut start = None;
        for i in 0..=t {
            let active = i < t && fg[i] >= theta;
            match (start, active) {
                (None, true) => start = Some(i),
                (Some(s), false) => {
                    let len = i - s;
                    let margin = ((len as f64 * 0.25) + 0.5) as usize;
                    let margin = margin.max(1);
                    let lo = s.saturating_sub(margin);
                    let hi = (i + margin).min(t);
                    for &c in classes {
                        let fused = |ti: usize| probs.at(ti, c - 1) * fg[ti];
                        let inner = (s..i).map(fused).sum::<f64>() / len as f64;
                        let outer_n = (s - lo) + (hi - i);
                        let outer = if outer_n == 0 {
                            // a run spanning the whole video has no margin;
                            // contrast against the global mean instead so it
                            // cannot outrank every interior run for free
                            (0..t).map(fused).sum::<f64>() / t as f64
                        } else {
                            ((lo..s).map(fused).sum::<f64>()
                                + (i..hi).map(fused).sum::<f64>())
                                / outer_n as f64
                        };
                        let score = inner - outer;
                        if score > 0.0 {
                            out.push(ScoredSegment {
                                start: s,
                                end: i,
                                class: c,
                                score,
                            });
                        }
                    }
                    start = None;
                }
                _ => {}
            }
        }
    }
    Ok(out)
}

/// Select high-confidence proposals per class and extend their boundaries.
///
/// Per class: rank segments by score, keep the largest prefix whose score
/// sum stays within `alpha` of the class total (at least one), then widen
/// each kept segment by `delta` of its duration on both sides, rounding
/// outward and clipping to `[0, t]`.
pub fn generate_proposals(
    segments: &[ScoredSegment],
    classes: &[usize],
    alpha: f64,
    delta: f64,
    t: usize,
) -> Result<Vec<ActionProposal>> {
    if !(0.0 < alpha && alpha <= 1.0) {
        return Err(Error::Config(format!("alpha={alpha} must be in (0, 1]")));
    }
    if delta < 0.0 {
        return Err(Error::Config(format!("delta={delta} must be non-negative")));
    }
    let mut proposals = Vec::new();
    for &c in classes {
        let mut class_segs: Vec<ScoredSegment> =
            segments.iter().copied().filter(|s| s.class == c).collect();
        if class_segs.is_empty() {
            continue;
        }
        rank_segments(&mut class_segs);
        let total: f64 = class_segs.iter().map(|s| s.score).sum();
        let budget = alpha * total;
        let mut cum = 0.0;
        let mut kept = 0;
        for s in &class_segs {
            if kept > 0 && cum + s.score > budget {
                break;
            }
            cum += s.score;
            kept += 1;
        }
        for s in &class_segs[..kept] {
            let d = (s.end - s.start) as f64;
            let ext = delta * d;
            let start = crate::math::floor(s.start as f64 - ext).max(0.0) as usize;
            let end = (crate::math::ceil(s.end as f64 + ext) as usize).min(t);
            proposals.push(ActionProposal {
                start,
                end: end.max(start + 1),
                class: c,
            });
        }
    }
    proposals.sort_by(|a, b| {
        a.class
            .cmp(&b.class)
            .then(a.start.cmp(&b.start))
            .then(a.end.cmp(&b.end))
    });
    proposals.dedup();
    Ok(proposals)
}

/// Snippet-level pseudo labels over C+1 slots: proposal classes inside
/// proposals (split evenly on overlap), one-hot background elsewhere.
pub fn build_pseudo_labels(
    proposals: &[ActionProposal],
    t: usize,
    num_classes: usize,
) -> Result<Tensor> {
    let c1 = num_classes + 1;
    let mut q = Tensor::zeros(vec![t, c1]);
    for p in proposals {
        p.validate(t)?;
        if p.class < 1 || p.class > num_classes {
            return Err(Error::Contract(format!(
                "proposal class {} outside [1, {num_classes}]",
                p.class
            )));
        }
        for ti in p.start..p.end {
            *q.at_mut(ti, p.class - 1) += 1.0;
        }
    }
    for ti in 0..t {
        let row_sum: f64 = q.row(ti).iter().sum();
        if row_sum == 0.0 {
            *q.at_mut(ti, c1 - 1) = 1.0;
        } else {
            for j in 0..c1 {
                *q.at_mut(ti, j) /= row_sum;
            }
        }
    }
    Ok(q)
}

/// Uncertainty-weighted snippet cross-entropy:
/// `mean_t [ exp(-u_t) * CE_t + beta * u_t ]` where `CE_t` is the
/// cross-entropy of row t of `softmax(cas)` against the pseudo label.
pub fn pseudo_instance_loss(
    tape: &mut Tape,
    cas: Value,
    pseudo: &Tensor,
    uncertainty: Value,
    beta: f64,
) -> Result<Value> {
    let (t, c1) = tape.value(cas).expect_matrix()?;
    if pseudo.shape() != [t, c1] {
        return Err(Error::Dimension(format!(
            "pseudo labels of shape {:?} against {t}x{c1} scores",
            pseudo.shape()
        )));
    }
    if tape.value(uncertainty).shape() != [t] {
        return Err(Error::Dimension(format!(
            "uncertainty of shape {:?} for T={t}",
            tape.value(uncertainty).shape()
        )));
    }
    for ti in 0..t {
        let s: f64 = pseudo.row(ti).iter().sum();
        if crate::math::abs(s - 1.0) > 1e-6 {
            return Err(Error::Contract(format!(
                "pseudo label row {ti} sums to {s}, expected 1"
            )));
        }
    }
    let probs = tape.softmax(cas, 1)?;
    let shifted = tape.add_scalar(probs, CROSS_ENTROPY_EPS)?;
    let logp = tape.log(shifted)?;
    let target = tape.leaf(pseudo.clone());
    let weighted = tape.mul(target, logp)?;
    let row_ll = tape.sum_axis1(weighted)?;
    let ce = tape.scale(row_ll, -1.0)?;
    let neg_u = tape.scale(uncertainty, -1.0)?;
    let conf = tape.exp(neg_u)?;
    let weighted_ce = tape.mul(conf, ce)?;
    let penalty = tape.scale(uncertainty, beta)?;
    let per_snippet = tape.add(weighted_ce, penalty)?;
    tape.mean_all(per_snippet)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math;

    fn seg(start: usize, end: usize, class: usize, score: f64) -> ScoredSegment {
        ScoredSegment {
            start,
            end,
            class,
            score,
        }
    }

    #[test]
    fn extraction_finds_thresholded_runs() {
        // fg attention: [0.9, 0.8, 0.1, 0.7, 0.6]; theta = 0.5 gives runs
        // [0,2) and [3,5).
        let t = 5;
        let cas = Tensor::matrix(t, 3, vec![0.0; 15]).unwrap();
        let attn_data: Vec<f64> = [0.9, 0.8, 0.1, 0.7, 0.6]
            .iter()
            .flat_map(|&f| [f, 1.0 - f])
            .collect();
        let attention = Tensor::matrix(t, 2, attn_data).unwrap();
        let segs = extract_segments(&cas, &attention, &[1], &[0.5]).unwrap();
        assert_eq!(segs.len(), 2);
        assert_eq!((segs[0].start, segs[0].end), (0, 2));
        assert_eq!((segs[1].start, segs[1].end), (3, 5));
        // uniform CAS -> class prob 1/3; fused signal is fg/3. Run [0,2)
        // has a one-snippet margin on the right only (t=2, fg 0.1):
        // score = mean(0.9, 0.8)/3 - 0.1/3.
        let expected = (0.9 + 0.8) / 2.0 / 3.0 - 0.1 / 3.0;
        assert!((segs[0].score - expected).abs() < 1e-12);
        // run [3,5): left margin is t=2, right margin clipped away
        let expected = (0.7 + 0.6) / 2.0 / 3.0 - 0.1 / 3.0;
        assert!((segs[1].score - expected).abs() < 1e-12);
    }

    #[test]
    fn peaky_fragment_scores_below_the_complete_run() {
        // One class, constant attention, CAS forming a plateau on [4, 12).
        let t = 16;
        let mut cas_data = vec![0.0; t * 2];
        for ti in 4..12 {
            cas_data[ti * 2] = 4.0;
        }
        cas_data[8 * 2] = 5.0; // peak inside the plateau
        let cas = Tensor::matrix(t, 2, cas_data).unwrap();
        let attention =
            Tensor::matrix(t, 2, vec![0.6, 0.4].repeat(t)).unwrap();
        let score_of = |s: usize, e: usize| {
            let probs = softmax_rows(&cas);
            let len = e - s;
            let margin = (((len as f64) * 0.25) + 0.5).max(1.0) as usize;
            let lo = s.saturating_sub(margin);
            let hi = (e + margin).min(t);
            let fused = |ti: usize| probs.at(ti, 0) * 0.6;
            let inner = (s..e).map(fused).sum::<f64>() / len as f64;
            let outer = ((lo..s).map(fused).sum::<f64>()
                + (e..hi).map(fused).sum::<f64>())
                / ((s - lo) + (hi - e)) as f64;
            inner - outer
        };
        assert!(
            score_of(4, 12) > score_of(8, 9),
            "complete run must outrank the peak fragment"
        );
    }

    #[test]
    fn extraction_rejects_empty_sweep() {
        let cas = Tensor::zeros(alloc::vec![3, 2]);
        let attention = Tensor::zeros(alloc::vec![3, 2]);
        assert!(matches!(
            extract_segments(&cas, &attention, &[1], &[]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn selection_respects_alpha_budget() {
        // scores 0.5, 0.3, 0.2 with alpha = 0.7: 0.5 fits (<= 0.7), adding
        // 0.3 would exceed, so exactly one segment survives.
        let segs = [
            seg(0, 4, 1, 0.5),
            seg(10, 14, 1, 0.3),
            seg(20, 24, 1, 0.2),
        ];
        let out = generate_proposals(&segs, &[1], 0.7, 0.0, 30).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!((out[0].start, out[0].end), (0, 4));
    }

    #[test]
    fn at_least_one_proposal_per_present_class() {
        // alpha so small that even the best segment exceeds the budget
        let segs = [seg(0, 4, 1, 0.9), seg(8, 12, 1, 0.8)];
        let out = generate_proposals(&segs, &[1], 0.01, 0.0, 20).unwrap();
        assert_eq!(out.len(), 1);
    }

    #[test]
    fn extension_widens_by_delta_of_duration() {
        // [10, 20) with delta = 0.5 extends by 5 on each side
        let segs = [seg(10, 20, 2, 1.0)];
        let out = generate_proposals(&segs, &[2], 1.0, 0.5, 100).unwrap();
        assert_eq!((out[0].start, out[0].end), (5, 25));
    }

    #[test]
    fn extension_clips_to_video_bounds() {
        let segs = [seg(1, 5, 1, 1.0)];
        let out = generate_proposals(&segs, &[1], 1.0, 1.0, 7).unwrap();
        assert_eq!((out[0].start, out[0].end), (0, 7));
    }

    #[test]
    fn classes_are_selected_independently() {
        let segs = [
            seg(0, 4, 1, 0.9),
            seg(6, 10, 1, 0.05),
            seg(12, 16, 2, 0.4),
        ];
        let out = generate_proposals(&segs, &[1, 2], 0.7, 0.0, 20).unwrap();
        let class1: Vec<_> = out.iter().filter(|p| p.class == 1).collect();
        let class2: Vec<_> = out.iter().filter(|p| p.class == 2).collect();
        assert_eq!(class1.len(), 1);
        assert_eq!(class2.len(), 1);
    }

    #[test]
    fn generation_is_deterministic_under_ties() {
        let segs = [
            seg(8, 12, 1, 0.5),
            seg(0, 4, 1, 0.5),
            seg(4, 8, 1, 0.5),
        ];
        let a = generate_proposals(&segs, &[1], 1.0, 0.0, 20).unwrap();
        let mut shuffled = segs;
        shuffled.reverse();
        let b = generate_proposals(&shuffled, &[1], 1.0, 0.0, 20).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pseudo_labels_background_and_overlap() {
        let props = [
            ActionProposal { start: 0, end: 2, class: 1 },
            ActionProposal { start: 1, end: 3, class: 2 },
        ];
        let q = build_pseudo_labels(&props, 4, 2).unwrap();
        assert_eq!(q.row(0), &[1.0, 0.0, 0.0]);
        assert_eq!(q.row(1), &[0.5, 0.5, 0.0]); // overlap splits evenly
        assert_eq!(q.row(2), &[0.0, 1.0, 0.0]);
        assert_eq!(q.row(3), &[0.0, 0.0, 1.0]); // background one-hot
    }

    #[test]
    fn pseudo_label_rows_are_normalized() {
        let props = [
            ActionProposal { start: 0, end: 5, class: 1 },
            ActionProposal { start: 0, end: 5, class: 3 },
            ActionProposal { start: 2, end: 4, class: 2 },
        ];
        let q = build_pseudo_labels(&props, 6, 3).unwrap();
        for ti in 0..6 {
            let s: f64 = q.row(ti).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn instance_loss_closed_form_at_zero_uncertainty() {
        // One snippet, uniform logits over 3 slots, one-hot target, u = 0:
        // loss = CE = ln 3.
        let mut tape = Tape::new();
        let cas = tape.leaf(Tensor::matrix(1, 3, vec![0.0, 0.0, 0.0]).unwrap());
        let pseudo = Tensor::matrix(1, 3, vec![1.0, 0.0, 0.0]).unwrap();
        let u = tape.leaf(Tensor::vector(vec![0.0]));
        let loss = pseudo_instance_loss(&mut tape, cas, &pseudo, u, 0.2).unwrap();
        let got = tape.value(loss).item().unwrap();
        assert!((got - math::ln(3.0)).abs() < 1e-9, "loss {got}");
    }

    #[test]
    fn instance_loss_uncertainty_gradient_matches_closed_form() {
        // dL/du_t = (1/T)(-exp(-u_t) * CE_t + beta)
        let beta = 0.2;
        let mut tape = Tape::new();
        let cas = tape.leaf(
            Tensor::matrix(2, 3, vec![1.0, 0.0, -1.0, 0.5, 0.5, 0.0]).unwrap(),
        );
        let pseudo = Tensor::matrix(2, 3, vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let u = tape.leaf_grad(Tensor::vector(vec![0.3, -0.1]));
        let loss = pseudo_instance_loss(&mut tape, cas, &pseudo, u, beta).unwrap();
        tape.backward(loss).unwrap();
        let probs = softmax_rows(tape.value(cas));
        let grad = tape.grad(u).unwrap();
        for ti in 0..2 {
            let ce = -math::ln(
                probs.at(ti, if ti == 0 { 0 } else { 2 }) + CROSS_ENTROPY_EPS,
            );
            let uv = [0.3, -0.1][ti];
            let expected = (-math::exp(-uv) * ce + beta) / 2.0;
            assert!(
                (grad.data()[ti] - expected).abs() < 1e-9,
                "du[{ti}] = {} vs {expected}",
                grad.data()[ti]
            );
        }
    }

    #[test]
    fn higher_uncertainty_downweights_a_large_error() {
        // A badly wrong snippet contributes less when its uncertainty rises
        // (below the beta turnover).
        let pseudo = Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap();
        let eval = |uv: f64| {
            let mut tape = Tape::new();
            let cas = tape.leaf(Tensor::matrix(1, 2, vec![-5.0, 5.0]).unwrap());
            let u = tape.leaf(Tensor::vector(vec![uv]));
            let l = pseudo_instance_loss(&mut tape, cas, &pseudo, u, 0.2).unwrap();
            tape.value(l).item().unwrap()
        };
        assert!(eval(1.0) < eval(0.0));
    }

    #[test]
    fn non_normalized_pseudo_labels_are_rejected() {
        let mut tape = Tape::new();
        let cas = tape.leaf(Tensor::zeros(alloc::vec![1, 2]));
        let u = tape.leaf(Tensor::vector(vec![0.0]));
        let bad = Tensor::matrix(1, 2, vec![0.7, 0.7]).unwrap();
        assert!(matches!(
            pseudo_instance_loss(&mut tape, cas, &bad, u, 0.2),
            Err(Error::Contract(_))
        ));
    }
}
