//! Subcommand implementations.

use std::fs;
use std::path::Path;

use asmloc_core::data::generate_synthetic;
use asmloc_core::eval::{evaluate, infer_video};
use asmloc_core::gradcheck::finite_difference_report;
use asmloc_core::model::{init_params, ForwardOptions};
use asmloc_core::optim::ParameterStore;
use asmloc_core::segment::ActionProposal;
use asmloc_core::train::{refine, training_loss};
use asmloc_core::tape::Tape;
use serde_json::json;

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::formats::{load_checkpoint, save_checkpoint, write_features};
use crate::manifest::{
    load_videos, read_manifest, write_manifest, Manifest, SegmentEntry, VideoEntry,
};

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::format(path, e.to_string()))?;
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn proposals_json(entries: &[(String, Vec<ActionProposal>)]) -> serde_json::Value {
    let map: serde_json::Map<String, serde_json::Value> = entries
        .iter()
        .map(|(id, props)| {
            let arr: Vec<serde_json::Value> = props
                .iter()
                .map(|p| json!([p.start, p.end, p.class]))
                .collect();
            (id.clone(), serde_json::Value::Array(arr))
        })
        .collect();
    serde_json::Value::Object(map)
}

/// Generate a synthetic corpus: feature files, a manifest with ground
/// truth in seconds, and a generation report.
pub fn generate(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    let (videos, report) = generate_synthetic(&cfg.synthetic)?;
    let feature_dir = out_dir.join("features");
    fs::create_dir_all(&feature_dir).map_err(|e| CliError::io(&feature_dir, e))?;

    let snip = cfg.synthetic.snippet_seconds;
    let mut entries = Vec::with_capacity(videos.len());
    for video in &videos {
        let rel = format!("features/{}.asml", video.id);
        write_features(&out_dir.join(&rel), &video.features)?;
        entries.push(VideoEntry {
            id: video.id.clone(),
            features: rel,
            labels: video.label_classes(),
            segments: video
                .gt_segments
                .iter()
                .map(|g| SegmentEntry {
                    start: g.start as f64 * snip,
                    end: g.end as f64 * snip,
                    class: g.class,
                })
                .collect(),
        });
    }
    write_manifest(
        out_dir,
        &Manifest {
            num_classes: cfg.synthetic.num_classes,
            feature_dim: cfg.synthetic.feature_dim,
            snippet_seconds: snip,
            videos: entries,
        },
    )?;
    write_json(
        &out_dir.join("generation_report.json"),
        &json!({
            "num_videos": videos.len(),
            "bucket_counts": report.bucket_counts,
            "chi_square": report.chi_square,
        }),
    )?;
    println!(
        "generated {} videos into {} (bucket counts {:?})",
        videos.len(),
        out_dir.display(),
        report.bucket_counts
    );
    Ok(())
}

/// Train with multi-step refinement and persist checkpoint, stage metrics
/// and per-stage proposals.
pub fn train(
    cfg: &RunConfig,
    data_dir: &Path,
    out_dir: &Path,
    fixed_snippets: Option<usize>,
) -> Result<()> {
    let manifest = read_manifest(data_dir)?;
    if manifest.num_classes != cfg.model.num_classes
        || manifest.feature_dim != cfg.model.feature_dim
    {
        return Err(CliError::Config(format!(
            "model expects C={}, D={} but the dataset has C={}, D={}",
            cfg.model.num_classes,
            cfg.model.feature_dim,
            manifest.num_classes,
            manifest.feature_dim
        )));
    }
    let videos = load_videos(data_dir, &manifest, fixed_snippets)?;
    let report = refine(
        &videos,
        &cfg.model,
        &cfg.adam,
        &cfg.schedule,
        &cfg.eval.attention_thresholds,
        cfg.eval.nms_iou,
        cfg.seed,
    )?;

    fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;
    save_checkpoint(out_dir, &cfg.model, &report.store)?;
    write_json(
        &out_dir.join("metrics.json"),
        &serde_json::to_value(&report.stages)
            .map_err(|e| CliError::format(out_dir.join("metrics.json"), e.to_string()))?,
    )?;
    for (stage, props) in report.stages.iter().zip(&report.stage_proposals) {
        write_json(
            &out_dir.join(format!("proposals_{}.json", stage.stage)),
            &proposals_json(props),
        )?;
    }
    write_json(&out_dir.join("proposals.json"), &proposals_json(&report.proposals))?;

    for stage in &report.stages {
        println!(
            "{:<10} epochs={:<4} loss={:.4} proposals={} mean_iou={:.3}",
            stage.stage,
            stage.epochs,
            stage.final_loss,
            stage.num_proposals,
            stage.mean_proposal_iou
        );
    }
    println!("checkpoint written to {}", out_dir.display());
    Ok(())
}

/// Evaluate a checkpoint over a corpus with ground truth; writes
/// `metrics.json` and `metrics.csv`.
pub fn eval(cfg: &RunConfig, data_dir: &Path, checkpoint_dir: &Path, out_dir: &Path) -> Result<()> {
    let manifest = read_manifest(data_dir)?;
    let videos = load_videos(data_dir, &manifest, None)?;
    let (model_cfg, store) = load_checkpoint(checkpoint_dir)?;
    if manifest.num_classes != model_cfg.num_classes
        || manifest.feature_dim != model_cfg.feature_dim
    {
        return Err(CliError::Config(format!(
            "checkpoint expects C={}, D={} but the dataset has C={}, D={}",
            model_cfg.num_classes,
            model_cfg.feature_dim,
            manifest.num_classes,
            manifest.feature_dim
        )));
    }
    let report = evaluate(&videos, &store, &model_cfg, &cfg.eval, manifest.snippet_seconds)?;

    fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;
    write_json(
        &out_dir.join("metrics.json"),
        &serde_json::to_value(&report)
            .map_err(|e| CliError::format(out_dir.join("metrics.json"), e.to_string()))?,
    )?;

    let mut csv = String::from("metric,key,value\n");
    for &(iou, map) in &report.map_per_iou {
        csv.push_str(&format!("map_at_iou,{iou},{map}\n"));
    }
    csv.push_str(&format!("average_map,,{}\n", report.average_map));
    for (class, ap) in &report.per_class_ap {
        csv.push_str(&format!("class_ap,{class},{ap}\n"));
    }
    for (bucket, map) in &report.bucket_map {
        csv.push_str(&format!("bucket_map,{bucket},{map}\n"));
    }
    let csv_path = out_dir.join("metrics.csv");
    fs::write(&csv_path, csv).map_err(|e| CliError::io(&csv_path, e))?;

    for &(iou, map) in &report.map_per_iou {
        println!("mAP@{iou:.2} = {map:.4}");
    }
    println!("average mAP = {:.4}", report.average_map);
    for (bucket, map) in &report.bucket_map {
        println!("bucket {bucket}: mAP = {map:.4}");
    }
    Ok(())
}

/// Finite-difference verification of the analytic gradients on small
/// random inputs, over both the base and the full forward path.
pub fn gradcheck(cfg: &RunConfig, tolerance: f64) -> Result<()> {
    let mut model = cfg.model.clone();
    // keep the probe small regardless of the configured model size
    model.feature_dim = 4;
    model.embed_dim = 4;
    model.heads = 2;
    model.num_classes = 3;
    model.gamma = 4.0;
    model.validate()?;

    let synth = asmloc_core::data::SyntheticConfig {
        num_classes: 3,
        feature_dim: 4,
        num_videos: 1,
        snippets_range: (12, 12),
        segments_range: (2, 2),
        bucket_weights: [1.0, 1.0, 0.0, 0.0, 0.0],
        seed: cfg.seed,
        ..asmloc_core::data::SyntheticConfig::default()
    };
    let video = generate_synthetic(&synth)?.0.remove(0);
    let proposals = [
        ActionProposal { start: 1, end: 4, class: 1 },
        ActionProposal { start: 7, end: 10, class: 2 },
    ];

    let mut worst: f64 = 0.0;
    for (label, props, opts, with_instance) in [
        ("base", &[][..], ForwardOptions::base_only(), false),
        (
            "full",
            &proposals[..],
            ForwardOptions {
                use_dss: true,
                use_attention_modules: true,
            },
            true,
        ),
    ] {
        let mut store = init_params(&model, cfg.seed)?;
        // nudge the zero-initialized layers so every gradient path is live
        let mut lcg = 0u64;
        for (name, tensor) in store.export() {
            let mut t = tensor;
            for v in t.data_mut() {
                lcg = lcg
                    .wrapping_mul(6364136223846793005)
                    .wrapping_add(1442695040888963407);
                *v += 0.08 * (((lcg >> 33) as f64 / (1u64 << 31) as f64) - 0.5);
            }
            store.set_value(&name, t)?;
        }
        let mut tape = Tape::new();
        let (loss, params) =
            training_loss(&mut tape, &store, &model, &video, props, opts, with_instance)?;
        tape.backward(loss)?;
        store.accumulate_from(&tape, params.bindings())?;
        let mut loss_fn = |s: &ParameterStore| {
            let mut t = Tape::new();
            let (l, _) = training_loss(&mut t, s, &model, &video, props, opts, with_instance)?;
            t.value(l).item()
        };
        let report = finite_difference_report(&mut store, &mut loss_fn, 1e-5)?;
        println!("{label} path: max relative error {:.3e}", report.max_rel_err);
        for group in &report.groups {
            println!(
                "  {:<20} rel_err={:.3e} abs_diff={:.3e} ({} elements)",
                group.name, group.max_rel_err, group.max_abs_diff, group.elements
            );
        }
        worst = worst.max(report.max_rel_err);
    }
    if worst >= tolerance {
        return Err(CliError::GradCheck(worst));
    }
    println!("gradient check passed (tolerance {tolerance:.1e})");
    Ok(())
}

/// Run inference on a corpus and print per-video classes, proposals and
/// detections as JSON.
pub fn inspect_proposals(
    cfg: &RunConfig,
    data_dir: &Path,
    checkpoint_dir: &Path,
    video_id: Option<&str>,
) -> Result<()> {
    let manifest = read_manifest(data_dir)?;
    let videos = load_videos(data_dir, &manifest, None)?;
    let (model_cfg, store) = load_checkpoint(checkpoint_dir)?;
    let mut found = false;
    for video in &videos {
        if video_id.is_some_and(|id| id != video.id) {
            continue;
        }
        found = true;
        let inference = infer_video(video, &store, &model_cfg, &cfg.eval)?;
        let doc = json!({
            "id": video.id,
            "classes": inference.classes,
            "class_probs": inference.class_probs,
            "proposals": inference.proposals.iter()
                .map(|p| json!([p.start, p.end, p.class]))
                .collect::<Vec<_>>(),
            "detections": inference.detections.iter()
                .map(|d| json!({
                    "start": d.start, "end": d.end,
                    "class": d.class, "score": d.score,
                }))
                .collect::<Vec<_>>(),
        });
        println!("{}", serde_json::to_string(&doc).expect("inference serializes"));
    }
    if !found {
        return Err(CliError::Config(match video_id {
            Some(id) => format!("video '{id}' not found in the manifest"),
            None => "manifest lists no videos".into(),
        }));
    }
    Ok(())
}
