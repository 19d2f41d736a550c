//! Dataset manifest: a JSON index of feature files, video-level labels and
//! ground-truth segments in seconds.

use std::fs;
use std::path::Path;

use asmloc_core::data::{GtSegment, VideoRecord};
use asmloc_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::formats::read_features;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegmentEntry {
    /// Seconds.
    pub start: f64,
    /// Seconds.
    pub end: f64,
    /// Class id in [1, C].
    pub class: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VideoEntry {
    pub id: String,
    /// Feature file path, relative to the manifest.
    pub features: String,
    /// Video-level class ids in [1, C].
    pub labels: Vec<usize>,
    /// Ground-truth segments (evaluation only; may be empty).
    #[serde(default)]
    pub segments: Vec<SegmentEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub num_classes: usize,
    pub feature_dim: usize,
    /// Seconds per snippet row.
    pub snippet_seconds: f64,
    pub videos: Vec<VideoEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<()> {
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(manifest)
        .map_err(|e| CliError::format(&path, e.to_string()))?;
    fs::write(&path, text).map_err(|e| CliError::io(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| CliError::format(&path, format!("invalid JSON: {e}")))?;
    if manifest.num_classes == 0 || manifest.feature_dim == 0 {
        return Err(CliError::format(&path, "num_classes and feature_dim must be positive"));
    }
    if manifest.snippet_seconds <= 0.0 {
        return Err(CliError::format(&path, "snippet_seconds must be positive"));
    }
    Ok(manifest)
}

/// Linearly resample a feature matrix to a fixed number of rows.
pub fn resample_rows(features: &Tensor, target: usize) -> Result<Tensor> {
    let (t, d) = features.expect_matrix().map_err(CliError::Core)?;
    if target == 0 {
        return Err(CliError::Config("fixed snippet count must be positive".into()));
    }
    let mut data = Vec::with_capacity(target * d);
    for i in 0..target {
        let pos = if target == 1 {
            0.0
        } else {
            i as f64 * (t - 1) as f64 / (target - 1) as f64
        };
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(t - 1);
        let frac = pos - lo as f64;
        for j in 0..d {
            data.push((1.0 - frac) * features.at(lo, j) + frac * features.at(hi, j));
        }
    }
    Tensor::new(vec![target, d], data).map_err(CliError::Core)
}

/// Load every video of a manifest. Segment boundaries convert from seconds
/// to snippets with the start floored and the end ceiled, so a segment
/// covers every snippet it touches. With `fixed_snippets`, features are
/// linearly resampled to that row count and ground truth is dropped (the
/// time axis is no longer uniform across videos).
pub fn load_videos(
    dir: &Path,
    manifest: &Manifest,
    fixed_snippets: Option<usize>,
) -> Result<Vec<VideoRecord>> {
    let mut videos = Vec::with_capacity(manifest.videos.len());
    for entry in &manifest.videos {
        let path = dir.join(&entry.features);
        let features = read_features(&path)?;
        let (t, d) = features.expect_matrix().map_err(CliError::Core)?;
        if d != manifest.feature_dim {
            return Err(CliError::format(
                &path,
                format!("feature dim {d}, manifest declares {}", manifest.feature_dim),
            ));
        }
        if entry.labels.is_empty() {
            return Err(CliError::format(
                dir.join(MANIFEST_FILE),
                format!("video '{}' has no labels", entry.id),
            ));
        }
        let (features, gt_segments) = match fixed_snippets {
            Some(n) => (resample_rows(&features, n)?, Vec::new()),
            None => {
                let mut gt = Vec::with_capacity(entry.segments.len());
                for s in &entry.segments {
                    if s.end <= s.start {
                        return Err(CliError::format(
                            dir.join(MANIFEST_FILE),
                            format!(
                                "video '{}': segment [{}, {}) is empty",
                                entry.id, s.start, s.end
                            ),
                        ));
                    }
                    let start = (s.start / manifest.snippet_seconds).floor() as usize;
                    let end = ((s.end / manifest.snippet_seconds).ceil() as usize).min(t);
                    let start = start.min(end.saturating_sub(1));
                    gt.push(GtSegment {
                        start,
                        end: end.max(start + 1),
                        class: s.class,
                    });
                }
                (features, gt)
            }
        };
        let (video_label, _) =
            asmloc_core::data::encode_labels(&entry.labels, manifest.num_classes)
                .map_err(CliError::Core)?;
        videos.push(VideoRecord {
            id: entry.id.clone(),
            features,
            video_label,
            gt_segments,
        });
    }
    Ok(videos)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::formats::write_features;

    fn write_dataset(dir: &Path) -> Manifest {
        let features = Tensor::matrix(10, 3, (0..30).map(|v| v as f64).collect()).unwrap();
        write_features(&dir.join("v0.asml"), &features).unwrap();
        let manifest = Manifest {
            num_classes: 2,
            feature_dim: 3,
            snippet_seconds: 0.5,
            videos: vec![VideoEntry {
                id: "v0".into(),
                features: "v0.asml".into(),
                labels: vec![1],
                segments: vec![SegmentEntry {
                    start: 0.6,
                    end: 2.1,
                    class: 1,
                }],
            }],
        };
        write_manifest(dir, &manifest).unwrap();
        manifest
    }

    #[test]
    fn roundtrip_and_second_to_snippet_conversion() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path());
        let manifest = read_manifest(dir.path()).unwrap();
        let videos = load_videos(dir.path(), &manifest, None).unwrap();
        assert_eq!(videos.len(), 1);
        // 0.6 s / 0.5 s floors to snippet 1; 2.1 s ceils to snippet 5
        assert_eq!(videos[0].gt_segments[0].start, 1);
        assert_eq!(videos[0].gt_segments[0].end, 5);
        assert_eq!(videos[0].video_label, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn fixed_snippets_resamples_and_drops_gt() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path());
        let manifest = read_manifest(dir.path()).unwrap();
        let videos = load_videos(dir.path(), &manifest, Some(4)).unwrap();
        assert_eq!(videos[0].features.rows(), 4);
        assert!(videos[0].gt_segments.is_empty());
        // endpoints are preserved exactly by the linear resampling
        assert_eq!(videos[0].features.row(0), &[0.0, 1.0, 2.0]);
        assert_eq!(videos[0].features.row(3), &[27.0, 28.0, 29.0]);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let mut manifest = write_dataset(dir.path());
        manifest.feature_dim = 5;
        let err = load_videos(dir.path(), &manifest, None).unwrap_err();
        assert!(err.to_string().contains("feature dim"), "{err}");
    }

    #[test]
    fn empty_segment_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut manifest = write_dataset(dir.path());
        manifest.videos[0].segments[0].end = manifest.videos[0].segments[0].start;
        let err = load_videos(dir.path(), &manifest, None).unwrap_err();
        assert!(err.to_string().contains("is empty"), "{err}");
    }
}
