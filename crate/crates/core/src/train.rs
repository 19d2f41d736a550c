//! Multi-step refinement training: a base warm-up stage, a fixed number of
//! proposal-refinement steps, then training to convergence. Proposals are
//! regenerated from the current model between stages and drive sampling,
//! attention masking and pseudo labels in the next one.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{encode_labels, VideoRecord};
use crate::error::{Error, Result};
use crate::eval::{suppress_segments, temporal_iou};
use crate::model::{
    attention_weighted_cas, forward, topk_video_probs, video_losses, BoundParams,
    ForwardOptions, ModelConfig,
};
use crate::optim::{AdamConfig, ParameterStore};
use crate::proposals::{build_pseudo_labels, extract_segments, generate_proposals, pseudo_instance_loss};
use crate::segment::ActionProposal;
use crate::tape::{Tape, Value};

/// Stage lengths of the refinement loop.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RefinementSchedule {
    /// Warm-up epochs with the base model only.
    pub base_epochs: usize,
    /// Number of refinement steps after the warm-up.
    pub refinement_steps: usize,
    /// Epochs per refinement step.
    pub epochs_per_step: usize,
    /// Epoch cap for the final convergence stage (0 skips it).
    pub final_max_epochs: usize,
    /// Consecutive epochs without improvement that end the final stage.
    pub final_patience: usize,
    /// Smallest mean-loss drop that counts as improvement.
    pub min_loss_delta: f64,
    /// Videos per optimizer step.
    pub batch_size: usize,
    /// Seed of the per-epoch shuffle.
    pub shuffle_seed: u64,
}

impl Default for RefinementSchedule {
    fn default() -> Self {
        RefinementSchedule {
            base_epochs: 100,
            refinement_steps: 3,
            epochs_per_step: 50,
            final_max_epochs: 200,
            final_patience: 10,
            min_loss_delta: 1e-4,
            batch_size: 8,
            shuffle_seed: 0,
        }
    }
}

impl RefinementSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.base_epochs == 0 {
            return Err(Error::Config("base_epochs must be positive".into()));
        }
        if self.refinement_steps > 0 && self.epochs_per_step == 0 {
            return Err(Error::Config(
                "epochs_per_step must be positive when refinement steps exist".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.final_max_epochs > 0 && self.final_patience == 0 {
            return Err(Error::Config(
                "final_patience must be positive when the final stage runs".into(),
            ));
        }
        if self.min_loss_delta < 0.0 {
            return Err(Error::Config("min_loss_delta must be non-negative".into()));
        }
        Ok(())
    }
}

/// Metrics of one completed training stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: String,
    pub epochs: usize,
    /// Mean per-video loss of the last epoch.
    pub final_loss: f64,
    /// Proposals generated after this stage.
    pub num_proposals: usize,
    /// Mean best-IoU of those proposals against same-class ground truth
    /// (NaN when no ground truth exists).
    pub mean_proposal_iou: f64,
}

/// Products of a full refinement run.
pub struct TrainReport {
    pub store: ParameterStore,
    pub stages: Vec<StageReport>,
    /// Per-stage proposals, parallel to `stages`; each entry is keyed by
    /// video id.
    pub stage_proposals: Vec<Vec<(String, Vec<ActionProposal>)>>,
    /// Parameter snapshots taken at the end of each stage, parallel to
    /// `stages` (see [`crate::model::restore_params`]).
    pub stage_params: Vec<Vec<(String, crate::tensor::Tensor)>>,
    /// Final per-video proposals, keyed by video id.
    pub proposals: Vec<(String, Vec<ActionProposal>)>,
}

/// Record the full training loss of one video on the tape. Returns the
/// scalar loss and the parameter bindings for gradient accumulation.
pub fn training_loss(
    tape: &mut Tape,
    store: &ParameterStore,
    cfg: &ModelConfig,
    video: &VideoRecord,
    proposals: &[ActionProposal],
    opts: ForwardOptions,
    with_instance_loss: bool,
) -> Result<(Value, BoundParams)> {
    let (out, params) = forward(tape, store, cfg, &video.features, proposals, opts)?;
    let k = cfg.topk(out.num_snippets);
    let (pfg_cas, pbg_cas) = attention_weighted_cas(tape, out.cas, out.attention)?;
    let p_fg = topk_video_probs(tape, pfg_cas, k)?;
    let p_bg = topk_video_probs(tape, pbg_cas, k)?;
    let (y_fg, y_bg) = encode_labels(&video.label_classes(), cfg.num_classes)?;
    let vl = video_losses(tape, p_fg, p_bg, &y_fg, &y_bg, cfg)?;
    let mut total = vl.total;
    // segment-level supervision only exists once proposals do; a video
    // without proposals would otherwise be pushed entirely to background
    if with_instance_loss && !out.effective_proposals.is_empty() {
        let pseudo = build_pseudo_labels(
            &out.effective_proposals,
            out.num_snippets,
            cfg.num_classes,
        )?;
        let ins = pseudo_instance_loss(tape, out.cas, &pseudo, out.uncertainty, cfg.beta)?;
        let ins = tape.scale(ins, cfg.lambda_ins)?;
        total = tape.add(total, ins)?;
    }
    Ok((total, params))
}

fn shuffled_order(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = (rng.gen::<u64>() % (i as u64 + 1)) as usize;
        order.swap(i, j);
    }
    order
}

/// One epoch of batched gradient accumulation. Returns the mean per-video
/// loss.
fn run_epoch(
    videos: &[VideoRecord],
    proposals: &[Vec<ActionProposal>],
    store: &mut ParameterStore,
    cfg: &ModelConfig,
    adam: &AdamConfig,
    opts: ForwardOptions,
    with_instance_loss: bool,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let order = shuffled_order(videos.len(), rng);
    let mut loss_sum = 0.0;
    let mut in_batch = 0usize;
    for &vi in &order {
        let mut tape = Tape::new();
        let (loss, params) = training_loss(
            &mut tape,
            store,
            cfg,
            &videos[vi],
            &proposals[vi],
            opts,
            with_instance_loss,
        )?;
        loss_sum += tape.value(loss).item()?;
        tape.backward(loss)?;
        store.accumulate_from(&tape, params.bindings())?;
        in_batch += 1;
        if in_batch == batch_size {
            store.adam_step(adam)?;
            in_batch = 0;
        }
    }
    if in_batch > 0 {
        store.adam_step(adam)?;
    }
    Ok(loss_sum / videos.len() as f64)
}

/// Regenerate per-video proposals from the current model. The attention
/// modules run only when a video already has proposals to condition on;
/// sampling never runs here.
fn regenerate_proposals(
    videos: &[VideoRecord],
    previous: &[Vec<ActionProposal>],
    store: &ParameterStore,
    cfg: &ModelConfig,
    thresholds: &[f64],
    nms_iou: f64,
) -> Result<Vec<Vec<ActionProposal>>> {
    let mut out = Vec::with_capacity(videos.len());
    for (vi, video) in videos.iter().enumerate() {
        let mut tape = Tape::new();
        let opts = ForwardOptions {
            use_dss: false,
            use_attention_modules: !previous[vi].is_empty(),
        };
        let (fwd, _) = forward(&mut tape, store, cfg, &video.features, &previous[vi], opts)?;
        let cas = tape.value(fwd.cas).clone();
        let attention = tape.value(fwd.attention).clone();
        let classes = video.label_classes();
        let segments = extract_segments(&cas, &attention, &classes, thresholds)?;
        // proposals come from the surviving action instances, not from
        // every raw threshold run
        let segments = suppress_segments(&segments, nms_iou)?;
        out.push(generate_proposals(
            &segments,
            &classes,
            cfg.alpha,
            cfg.delta,
            video.num_snippets(),
        )?);
    }
    Ok(out)
}

/// Mean over proposals of the best IoU against a same-class ground-truth
/// segment; NaN without proposals or ground truth.
pub fn mean_proposal_iou(videos: &[VideoRecord], proposals: &[Vec<ActionProposal>]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for (video, props) in videos.iter().zip(proposals) {
        for p in props {
            let mut best = 0.0f64;
            let mut any = false;
            for g in &video.gt_segments {
                if g.class != p.class {
                    continue;
                }
                any = true;
                let iou = temporal_iou(
                    (p.start as f64, p.end as f64),
                    (g.start as f64, g.end as f64),
                )
                .unwrap_or(0.0);
                best = best.max(iou);
            }
            if any {
                total += best;
                count += 1;
            }
        }
    }
    if count == 0 {
        f64::NAN
    } else {
        total / count as f64
    }
}

/// Run the full refinement loop over a corpus.
pub fn refine(
    videos: &[VideoRecord],
    cfg: &ModelConfig,
    adam: &AdamConfig,
    schedule: &RefinementSchedule,
    thresholds: &[f64],
    nms_iou: f64,
    seed: u64,
) -> Result<TrainReport> {
    cfg.validate()?;
    schedule.validate()?;
    if videos.is_empty() {
        return Err(Error::Contract("training on an empty corpus".into()));
    }
    if thresholds.is_empty() {
        return Err(Error::Contract("empty extraction threshold sweep".into()));
    }

    let mut store = crate::model::init_params(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.shuffle_seed);
    let mut stages = Vec::new();
    let mut stage_proposals: Vec<Vec<(String, Vec<ActionProposal>)>> = Vec::new();
    let mut stage_params: Vec<Vec<(String, crate::tensor::Tensor)>> = Vec::new();
    let keyed = |props: &[Vec<ActionProposal>]| {
        videos
            .iter()
            .zip(props)
            .map(|(v, p)| (v.id.clone(), p.clone()))
            .collect::<Vec<_>>()
    };
    let empty: Vec<Vec<ActionProposal>> = videos.iter().map(|_| Vec::new()).collect();

    // Warm-up: base model, video-level losses only.
    let mut last_loss = 0.0;
    for _ in 0..schedule.base_epochs {
        last_loss = run_epoch(
            videos,
            &empty,
            &mut store,
            cfg,
            adam,
            ForwardOptions::base_only(),
            false,
            schedule.batch_size,
            &mut rng,
        )?;
    }
    let mut proposals = regenerate_proposals(videos, &empty, &store, cfg, thresholds, nms_iou)?;
    stages.push(StageReport {
        stage: "base".into(),
        epochs: schedule.base_epochs,
        final_loss: last_loss,
        num_proposals: proposals.iter().map(Vec::len).sum(),
        mean_proposal_iou: mean_proposal_iou(videos, &proposals),
    });
    stage_proposals.push(keyed(&proposals));
    stage_params.push(store.export());

    // Refinement steps: full model with sampling, attention and pseudo
    // labels, regenerating proposals after each step.
    for step in 1..=schedule.refinement_steps {
        let mut loss = 0.0;
        for _ in 0..schedule.epochs_per_step {
            loss = run_epoch(
                videos,
                &proposals,
                &mut store,
                cfg,
                adam,
                ForwardOptions::full(cfg),
                true,
                schedule.batch_size,
                &mut rng,
            )?;
        }
        proposals = regenerate_proposals(videos, &proposals, &store, cfg, thresholds, nms_iou)?;
        stages.push(StageReport {
            stage: format!("refine-{step}"),
            epochs: schedule.epochs_per_step,
            final_loss: loss,
            num_proposals: proposals.iter().map(Vec::len).sum(),
            mean_proposal_iou: mean_proposal_iou(videos, &proposals),
        });
        stage_proposals.push(keyed(&proposals));
        stage_params.push(store.export());
    }

    // Final stage: train on the last proposals until the loss plateaus.
    if schedule.final_max_epochs > 0 {
        let mut best = f64::INFINITY;
        let mut stale = 0usize;
        let mut epochs = 0usize;
        let mut loss = 0.0;
        for _ in 0..schedule.final_max_epochs {
            loss = run_epoch(
                videos,
                &proposals,
                &mut store,
                cfg,
                adam,
                ForwardOptions::full(cfg),
                true,
                schedule.batch_size,
                &mut rng,
            )?;
            epochs += 1;
            if loss < best - schedule.min_loss_delta {
                best = loss;
                stale = 0;
            } else {
                stale += 1;
                if stale >= schedule.final_patience {
                    break;
                }
            }
        }
        proposals = regenerate_proposals(videos, &proposals, &store, cfg, thresholds, nms_iou)?;
        stages.push(StageReport {
            stage: "final".into(),
            epochs,
            final_loss: loss,
            num_proposals: proposals.iter().map(Vec::len).sum(),
            mean_proposal_iou: mean_proposal_iou(videos, &proposals),
        });
        stage_proposals.push(keyed(&proposals));
        stage_params.push(store.export());
    }

    let proposals = keyed(&proposals);
    Ok(TrainReport {
        store,
        stages,
        stage_proposals,
        stage_params,
        proposals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticConfig};

    fn tiny_corpus() -> Vec<VideoRecord> {
        let cfg = SyntheticConfig {
            num_classes: 2,
            feature_dim: 6,
            num_videos: 4,
            snippets_range: (16, 24),
            segments_range: (1, 2),
            class_separation: 5.0,
            noise_scale: 0.5,
            seed: 21,
            ..SyntheticConfig::default()
        };
        generate_synthetic(&cfg).unwrap().0
    }

    fn tiny_model() -> ModelConfig {
        let mut cfg = ModelConfig::new(2, 6);
        cfg.embed_dim = 6;
        cfg.heads = 2;
        cfg
    }

    fn tiny_schedule() -> RefinementSchedule {
        RefinementSchedule {
            base_epochs: 4,
            refinement_steps: 1,
            epochs_per_step: 2,
            final_max_epochs: 2,
            final_patience: 1,
            batch_size: 2,
            ..RefinementSchedule::default()
        }
    }

    #[test]
    fn schedule_validation() {
        let mut s = tiny_schedule();
        s.base_epochs = 0;
        assert!(s.validate().is_err());
        let mut s = tiny_schedule();
        s.batch_size = 0;
        assert!(s.validate().is_err());
        assert!(tiny_schedule().validate().is_ok());
    }

    #[test]
    fn base_training_reduces_the_loss() {
        let videos = tiny_corpus();
        let cfg = tiny_model();
        let adam = AdamConfig {
            learning_rate: 5e-3,
            ..AdamConfig::default()
        };
        let mut store = crate::model::init_params(&cfg, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let empty: Vec<Vec<ActionProposal>> = videos.iter().map(|_| Vec::new()).collect();
        let first = run_epoch(
            &videos,
            &empty,
            &mut store,
            &cfg,
            &adam,
            ForwardOptions::base_only(),
            false,
            2,
            &mut rng,
        )
        .unwrap();
        let mut last = first;
        for _ in 0..15 {
            last = run_epoch(
                &videos,
                &empty,
                &mut store,
                &cfg,
                &adam,
                ForwardOptions::base_only(),
                false,
                2,
                &mut rng,
            )
            .unwrap();
        }
        assert!(last < first, "loss {first} -> {last}");
    }

    #[test]
    fn refinement_is_deterministic() {
        let videos = tiny_corpus();
        let cfg = tiny_model();
        let schedule = tiny_schedule();
        let thresholds = [0.3, 0.5, 0.7];
        let a = refine(&videos, &cfg, &AdamConfig::default(), &schedule, &thresholds, 0.45, 5).unwrap();
        let b = refine(&videos, &cfg, &AdamConfig::default(), &schedule, &thresholds, 0.45, 5).unwrap();
        for ((na, ta), (nb, tb)) in a.store.export().iter().zip(b.store.export().iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.data(), tb.data(), "parameter {na} diverged");
        }
        assert_eq!(a.proposals, b.proposals);
    }

    #[test]
    fn refinement_reports_every_stage() {
        let videos = tiny_corpus();
        let cfg = tiny_model();
        let schedule = tiny_schedule();
        let report = refine(
            &videos,
            &cfg,
            &AdamConfig::default(),
            &schedule,
            &[0.4, 0.6],
            0.45,
            3,
        )
        .unwrap();
        // base + 1 refinement step + final
        assert_eq!(report.stages.len(), 3);
        assert_eq!(report.stages[0].stage, "base");
        assert_eq!(report.stages[1].stage, "refine-1");
        assert_eq!(report.stages[2].stage, "final");
        assert_eq!(report.proposals.len(), videos.len());
        assert_eq!(report.stage_proposals.len(), report.stages.len());
        assert_eq!(report.stage_proposals.last().unwrap(), &report.proposals);
        for s in &report.stages {
            assert!(s.final_loss.is_finite());
        }
    }

    #[test]
    fn proposal_iou_monitor_bounds() {
        let videos = tiny_corpus();
        let props: Vec<Vec<ActionProposal>> = videos
            .iter()
            .map(|v| {
                v.gt_segments
                    .iter()
                    .map(|g| ActionProposal {
                        start: g.start,
                        end: g.end,
                        class: g.class,
                    })
                    .collect()
            })
            .collect();
        // proposals equal to GT give a perfect score
        let m = mean_proposal_iou(&videos, &props);
        assert!((m - 1.0).abs() < 1e-12);
        let empty: Vec<Vec<ActionProposal>> = videos.iter().map(|_| Vec::new()).collect();
        assert!(mean_proposal_iou(&videos, &empty).is_nan());
    }
}
