//! Temporal localization metrics and inference: IoU, class-wise NMS,
//! non-interpolated average precision, and the two-pass detection pipeline
//! (video-level classification, then attention-refined localization).

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::{duration_bucket, VideoRecord, BUCKET_NAMES};
use crate::error::{Error, Result};
use crate::model::{
    attention_weighted_cas, forward, topk_video_probs, ForwardOptions, ModelConfig,
};
use crate::optim::ParameterStore;
use crate::proposals::{extract_segments, generate_proposals, ScoredSegment};
use crate::segment::ActionProposal;
use crate::tape::Tape;

/// A localized detection in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub start: f64,
    pub end: f64,
    /// Class id in [1, C].
    pub class: usize,
    pub score: f64,
}

/// Intersection over union of two half-open intervals in seconds.
pub fn temporal_iou(a: (f64, f64), b: (f64, f64)) -> Result<f64> {
    if a.0 >= a.1 || b.0 >= b.1 {
        return Err(Error::Contract(format!(
            "degenerate interval in IoU: [{}, {}) vs [{}, {})",
            a.0, a.1, b.0, b.1
        )));
    }
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    Ok(inter / union)
}

fn detection_order(a: &Detection, b: &Detection) -> core::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.start.total_cmp(&b.start))
        .then(a.end.total_cmp(&b.end))
}

/// Class-wise greedy non-maximum suppression within one video. A detection
/// survives unless a higher-ranked survivor of the same class overlaps it
/// beyond `iou_threshold`.
pub fn nms(detections: &[Detection], iou_threshold: f64) -> Result<Vec<Detection>> {
    let mut sorted = detections.to_vec();
    sorted.sort_by(detection_order);
    let mut kept: Vec<Detection> = Vec::new();
    for d in sorted {
        let mut suppressed = false;
        for k in &kept {
            if k.class == d.class
                && temporal_iou((k.start, k.end), (d.start, d.end))? > iou_threshold
            {
                suppressed = true;
                break;
            }
        }
        if !suppressed {
            kept.push(d);
        }
    }
    Ok(kept)
}

/// NMS over segments in snippet coordinates. Proposal generation consumes
/// the surviving action instances rather than every raw threshold run.
pub fn suppress_segments(
    segments: &[ScoredSegment],
    iou_threshold: f64,
) -> Result<Vec<ScoredSegment>> {
    let raw: Vec<Detection> = segments
        .iter()
        .map(|s| Detection {
            start: s.start as f64,
            end: s.end as f64,
            class: s.class,
            score: s.score,
        })
        .collect();
    Ok(nms(&raw, iou_threshold)?
        .into_iter()
        .map(|d| ScoredSegment {
            start: d.start as usize,
            end: d.end as usize,
            class: d.class,
            score: d.score,
        })
        .collect())
}

/// One ground-truth instance for AP: (video index, start, end, counted).
/// Uncounted instances can still absorb a match but contribute neither a
/// true positive nor to the ground-truth total (duration-bucket scoring).
pub type ApGroundTruth = (usize, f64, f64, bool);

/// One prediction for AP: (video index, start, end, score).
pub type ApPrediction = (usize, f64, f64, f64);

/// Non-interpolated average precision for one class.
///
/// Predictions are ranked by score; each greedily matches the unmatched
/// ground truth of its video with the highest IoU at or above the
/// threshold. `AP = sum over true-positive ranks of precision / #GT`.
pub fn average_precision(
    predictions: &[ApPrediction],
    ground_truth: &[ApGroundTruth],
    iou_threshold: f64,
) -> Result<f64> {
    let num_gt = ground_truth.iter().filter(|g| g.3).count();
    if num_gt == 0 {
        return Err(Error::Contract("average precision with no ground truth".into()));
    }
    let mut ranked = predictions.to_vec();
    ranked.sort_by(|a, b| {
        b.3.total_cmp(&a.3)
            .then(a.0.cmp(&b.0))
            .then(a.1.total_cmp(&b.1))
            .then(a.2.total_cmp(&b.2))
    });

    let mut matched = vec![false; ground_truth.len()];
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut ap = 0.0;
    for &(vid, s, e, _) in &ranked {
        let mut best: Option<(usize, f64)> = None;
        for (gi, &(gvid, gs, ge, _)) in ground_truth.iter().enumerate() {
            if gvid != vid || matched[gi] {
                continue;
            }
            let iou = temporal_iou((gs, ge), (s, e))?;
            if iou >= iou_threshold && best.map_or(true, |(_, b)| iou > b) {
                best = Some((gi, iou));
            }
        }
        match best {
            Some((gi, _)) => {
                matched[gi] = true;
                if ground_truth[gi].3 {
                    tp += 1;
                    ap += tp as f64 / (tp + fp) as f64;
                }
                // match to an uncounted instance: neither TP nor FP
            }
            None => fp += 1,
        }
    }
    Ok(ap / num_gt as f64)
}

/// Evaluation and inference settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Video-level probability needed to predict a class.
    pub class_threshold: f64,
    /// Foreground-attention thresholds swept during segment extraction.
    pub attention_thresholds: Vec<f64>,
    /// NMS suppression t-IoU.
    pub nms_iou: f64,
    /// IoU thresholds the mAP is reported at.
    pub iou_grid: Vec<f64>,
    /// IoU threshold used for per-class and per-bucket reporting.
    pub report_iou: f64,
    /// Whether inference re-scores with the attention modules in a second
    /// pass; disable to evaluate the base model on its own.
    #[serde(default = "default_two_pass")]
    pub two_pass: bool,
}

fn default_two_pass() -> bool {
    true
}

fn sweep(start: f64, step: f64, end: f64) -> Vec<f64> {
    let mut out = Vec::new();
    let mut v = start;
    while v <= end + 1e-9 {
        out.push(v);
        v += step;
    }
    out
}

impl EvalConfig {
    /// Dense threshold sweep and mid-range NMS, for short-action corpora.
    pub fn thumos() -> Self {
        EvalConfig {
            class_threshold: 0.1,
            attention_thresholds: sweep(0.1, 0.025, 0.9),
            nms_iou: 0.45,
            iou_grid: sweep(0.1, 0.1, 0.7),
            report_iou: 0.5,
            two_pass: true,
        }
    }

    /// Sparse low sweep and permissive NMS, for long-action corpora.
    pub fn activitynet() -> Self {
        EvalConfig {
            class_threshold: 0.1,
            attention_thresholds: sweep(0.005, 0.005, 0.02),
            nms_iou: 0.9,
            iou_grid: sweep(0.5, 0.05, 0.95),
            report_iou: 0.5,
            two_pass: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.attention_thresholds.is_empty() {
            return Err(Error::Config("empty attention threshold sweep".into()));
        }
        if self.iou_grid.is_empty() {
            return Err(Error::Config("empty IoU grid".into()));
        }
        if !(0.0..=1.0).contains(&self.nms_iou) {
            return Err(Error::Config(format!("nms_iou {} outside [0, 1]", self.nms_iou)));
        }
        if !(0.0..1.0).contains(&self.class_threshold) {
            return Err(Error::Config(format!(
                "class_threshold {} outside [0, 1)",
                self.class_threshold
            )));
        }
        Ok(())
    }
}

/// Inference products for one video, in snippet coordinates.
#[derive(Debug, Clone)]
pub struct VideoInference {
    /// Predicted video-level classes, ids in [1, C].
    pub classes: Vec<usize>,
    /// Video-level probability per class slot (length C+1).
    pub class_probs: Vec<f64>,
    /// Test-time proposals feeding the attention modules.
    pub proposals: Vec<ActionProposal>,
    /// Post-NMS detections, still in snippet coordinates.
    pub detections: Vec<ScoredSegment>,
}

/// Two-pass inference for one video. The first (base) pass predicts
/// video-level classes and seeds proposals; the second pass re-scores with
/// the attention modules. Sampling is never applied at inference time.
pub fn infer_video(
    video: &VideoRecord,
    store: &ParameterStore,
    cfg: &ModelConfig,
    eval_cfg: &EvalConfig,
) -> Result<VideoInference> {
    eval_cfg.validate()?;
    let t = video.num_snippets();
    let k = cfg.topk(t);

    // Pass 1: base model only.
    let mut tape = Tape::new();
    let (out, _) = forward(
        &mut tape,
        store,
        cfg,
        &video.features,
        &[],
        ForwardOptions::base_only(),
    )?;
    let (p_fg, _) = attention_weighted_cas(&mut tape, out.cas, out.attention)?;
    let probs_v = topk_video_probs(&mut tape, p_fg, k)?;
    let class_probs = tape.value(probs_v).data().to_vec();

    let mut classes: Vec<usize> = (1..=cfg.num_classes)
        .filter(|&c| class_probs[c - 1] >= eval_cfg.class_threshold)
        .collect();
    if classes.is_empty() {
        let best = (1..=cfg.num_classes)
            .max_by(|&a, &b| class_probs[a - 1].total_cmp(&class_probs[b - 1]))
            .unwrap();
        classes.push(best);
    }

    let cas1 = tape.value(out.cas).clone();
    let attn1 = tape.value(out.attention).clone();
    let segs = extract_segments(&cas1, &attn1, &classes, &eval_cfg.attention_thresholds)?;

    let (proposals, mut candidates) = if eval_cfg.two_pass {
        let kept = suppress_segments(&segs, eval_cfg.nms_iou)?;
        let proposals = generate_proposals(&kept, &classes, cfg.alpha, cfg.delta, t)?;
        // Pass 2: attention modules over the seeded proposals.
        let mut tape2 = Tape::new();
        let (out2, _) = forward(
            &mut tape2,
            store,
            cfg,
            &video.features,
            &proposals,
            ForwardOptions {
                use_dss: false,
                use_attention_modules: true,
            },
        )?;
        let cas2 = tape2.value(out2.cas).clone();
        let attn2 = tape2.value(out2.attention).clone();
        let mut candidates =
            extract_segments(&cas2, &attn2, &classes, &eval_cfg.attention_thresholds)?;
        // keep the first-pass candidates in the pool: the modulated pass
        // sharpens scores inside the proposals but can fragment runs
        // elsewhere, and NMS picks the better-scored variant of each site
        candidates.extend(segs);
        (proposals, candidates)
    } else {
        (Vec::new(), segs)
    };
    // Fuse the segment confidence with the video-level class probability so
    // detections rank consistently across videos.
    for s in &mut candidates {
        s.score *= class_probs[s.class - 1];
    }

    let raw: Vec<Detection> = candidates
        .iter()
        .map(|s| Detection {
            start: s.start as f64,
            end: s.end as f64,
            class: s.class,
            score: s.score,
        })
        .collect();
    let kept = nms(&raw, eval_cfg.nms_iou)?;
    let detections = kept
        .iter()
        .map(|d| ScoredSegment {
            start: d.start as usize,
            end: d.end as usize,
            class: d.class,
            score: d.score,
        })
        .collect();

    Ok(VideoInference {
        classes,
        class_probs,
        proposals,
        detections,
    })
}

/// Corpus-level evaluation results.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    /// (IoU threshold, mAP) pairs over the configured grid.
    pub map_per_iou: Vec<(f64, f64)>,
    /// Mean of the mAP column.
    pub average_map: f64,
    /// (class id, AP at the reporting IoU).
    pub per_class_ap: Vec<(usize, f64)>,
    /// (bucket name, mAP at the reporting IoU) over duration buckets.
    pub bucket_map: Vec<(String, f64)>,
    /// Total detections after NMS.
    pub num_detections: usize,
}

/// Evaluate a trained model over a corpus with ground-truth segments.
/// `snippet_seconds` converts snippet coordinates to seconds for bucketing.
pub fn evaluate(
    videos: &[VideoRecord],
    store: &ParameterStore,
    cfg: &ModelConfig,
    eval_cfg: &EvalConfig,
    snippet_seconds: f64,
) -> Result<EvalReport> {
    if videos.is_empty() {
        return Err(Error::Contract("evaluation over an empty corpus".into()));
    }
    if snippet_seconds <= 0.0 {
        return Err(Error::Config("snippet duration must be positive".into()));
    }

    let mut preds_by_class: Vec<Vec<ApPrediction>> = vec![Vec::new(); cfg.num_classes + 1];
    let mut gt_by_class: Vec<Vec<ApGroundTruth>> = vec![Vec::new(); cfg.num_classes + 1];
    let mut num_detections = 0;

    for (vi, video) in videos.iter().enumerate() {
        for g in &video.gt_segments {
            gt_by_class[g.class].push((
                vi,
                g.start as f64 * snippet_seconds,
                g.end as f64 * snippet_seconds,
                true,
            ));
        }
        let inference = infer_video(video, store, cfg, eval_cfg)?;
        num_detections += inference.detections.len();
        for d in &inference.detections {
            preds_by_class[d.class].push((
                vi,
                d.start as f64 * snippet_seconds,
                d.end as f64 * snippet_seconds,
                d.score,
            ));
        }
    }

    let scored_classes: Vec<usize> = (1..=cfg.num_classes)
        .filter(|&c| !gt_by_class[c].is_empty())
        .collect();
    if scored_classes.is_empty() {
        return Err(Error::Contract("no ground-truth segments in the corpus".into()));
    }

    let mut map_per_iou = Vec::with_capacity(eval_cfg.iou_grid.len());
    for &iou in &eval_cfg.iou_grid {
        let mut total = 0.0;
        for &c in &scored_classes {
            total += average_precision(&preds_by_class[c], &gt_by_class[c], iou)?;
        }
        map_per_iou.push((iou, total / scored_classes.len() as f64));
    }
    let average_map =
        map_per_iou.iter().map(|&(_, m)| m).sum::<f64>() / map_per_iou.len() as f64;

    let mut per_class_ap = Vec::with_capacity(scored_classes.len());
    for &c in &scored_classes {
        let ap = average_precision(&preds_by_class[c], &gt_by_class[c], eval_cfg.report_iou)?;
        per_class_ap.push((c, ap));
    }

    let mut bucket_map = Vec::with_capacity(BUCKET_NAMES.len());
    for (bi, name) in BUCKET_NAMES.iter().enumerate() {
        let mut total = 0.0;
        let mut counted_classes = 0usize;
        for &c in &scored_classes {
            let bucket_gt: Vec<ApGroundTruth> = gt_by_class[c]
                .iter()
                .map(|&(vid, s, e, _)| (vid, s, e, duration_bucket(e - s) == bi))
                .collect();
            if bucket_gt.iter().any(|g| g.3) {
                total +=
                    average_precision(&preds_by_class[c], &bucket_gt, eval_cfg.report_iou)?;
                counted_classes += 1;
            }
        }
        let value = if counted_classes > 0 {
            total / counted_classes as f64
        } else {
            f64::NAN
        };
        bucket_map.push((name.to_string(), value));
    }

    Ok(EvalReport {
        map_per_iou,
        average_map,
        per_class_ap,
        bucket_map,
        num_detections,
    })
}
