//! Synthetic untrimmed-video generation and label encoding.
//!
//! Snippet features for one video form a T×D matrix. Videos carry an
//! l1-normalized multi-hot video-level label over C action classes plus a
//! background class, and (for evaluation only) ground-truth segments in
//! half-open snippet coordinates.
//!
//! Class slot convention throughout the crate: class id `c ∈ [1, C]` lives
//! at vector index `c - 1`; the background class lives at index `C`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::Tensor;

/// Seconds per snippet for 16-frame snippets at 25 fps.
pub const DEFAULT_SNIPPET_SECONDS: f64 = 0.64;

/// Duration-bucket boundaries in seconds: XS (0,1], S (1,2], M (2,4],
/// L (4,6], XL (6, inf).
pub const DURATION_BUCKETS: [(f64, f64); 5] = [
    (0.0, 1.0),
    (1.0, 2.0),
    (2.0, 4.0),
    (4.0, 6.0),
    (6.0, f64::INFINITY),
];

pub const BUCKET_NAMES: [&str; 5] = ["XS", "S", "M", "L", "XL"];

/// Bucket index for a duration in seconds.
pub fn duration_bucket(seconds: f64) -> usize {
    for (i, &(lo, hi)) in DURATION_BUCKETS.iter().enumerate() {
        if seconds > lo && seconds <= hi {
            return i;
        }
    }
    DURATION_BUCKETS.len() - 1
}

/// Ground-truth segment in half-open snippet coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GtSegment {
    pub start: usize,
    pub end: usize,
    /// Class id in [1, C].
    pub class: usize,
}

/// One untrimmed video: features, training label, and optional GT.
#[derive(Debug, Clone)]
pub struct VideoRecord {
    pub id: String,
    /// T×D snippet features.
    pub features: Tensor,
    /// Length C+1, l1-normalized, background slot 0 for training labels.
    pub video_label: Vec<f64>,
    pub gt_segments: Vec<GtSegment>,
}

impl VideoRecord {
    pub fn num_snippets(&self) -> usize {
        self.features.rows()
    }

    /// Distinct class ids present in the video-level label.
    pub fn label_classes(&self) -> Vec<usize> {
        let c = self.video_label.len() - 1;
        (0..c)
            .filter(|&i| self.video_label[i] > 0.0)
            .map(|i| i + 1)
            .collect()
    }
}

/// Encode a non-empty class set into (y_fg, y_bg) vectors of length C+1.
pub fn encode_labels(classes: &[usize], num_classes: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if classes.is_empty() {
        return Err(Error::Contract("empty class set".into()));
    }
    let mut distinct = classes.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    for &c in &distinct {
        if c < 1 || c > num_classes {
            return Err(Error::Contract(format!(
                "class id {c} outside [1, {num_classes}]"
            )));
        }
    }
    let mut y_fg = vec![0.0; num_classes + 1];
    let w = 1.0 / distinct.len() as f64;
    for &c in &distinct {
        y_fg[c - 1] = w;
    }
    let mut y_bg = vec![0.0; num_classes + 1];
    y_bg[num_classes] = 1.0;
    Ok((y_fg, y_bg))
}

/// Synthetic benchmark configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub num_videos: usize,
    /// Inclusive snippet-count range per video.
    pub snippets_range: (usize, usize),
    /// Inclusive segment-count range per video.
    pub segments_range: (usize, usize),
    /// Relative sampling weight per duration bucket (XS, S, M, L, XL).
    pub bucket_weights: [f64; 5],
    /// Distance between class mean directions and the origin.
    pub class_separation: f64,
    /// Standard deviation of the Gaussian noise (also the background std).
    pub noise_scale: f64,
    /// Moving-average window applied to the noise along time, mimicking the
    /// temporal correlation of real snippet features. The smoothed noise is
    /// rescaled back to `noise_scale` std; 1 means independent snippets.
    pub noise_window: usize,
    pub snippet_seconds: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_classes: 5,
            feature_dim: 12,
            num_videos: 50,
            snippets_range: (40, 120),
            segments_range: (1, 4),
            bucket_weights: [1.0, 1.0, 1.0, 1.0, 1.0],
            class_separation: 4.0,
            noise_scale: 1.0,
            noise_window: 5,
            snippet_seconds: DEFAULT_SNIPPET_SECONDS,
            seed: 7,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.feature_dim == 0 || self.num_videos == 0 {
            return Err(Error::Config("num_classes, feature_dim and num_videos must be positive".into()));
        }
        if self.snippets_range.0 == 0 || self.snippets_range.0 > self.snippets_range.1 {
            return Err(Error::Config("empty snippet range".into()));
        }
        if self.segments_range.0 == 0 || self.segments_range.0 > self.segments_range.1 {
            return Err(Error::Config("empty segment range".into()));
        }
        if self.noise_scale < 0.0 {
            return Err(Error::Config("negative noise scale".into()));
        }
        if self.noise_window == 0 {
            return Err(Error::Config("noise window must be at least 1".into()));
        }
        if self.bucket_weights.iter().any(|&w| w < 0.0)
            || self.bucket_weights.iter().sum::<f64>() <= 0.0
        {
            return Err(Error::Config("bucket weights must be non-negative and not all zero".into()));
        }
        if self.snippet_seconds <= 0.0 {
            return Err(Error::Config("snippet duration must be positive".into()));
        }
        Ok(())
    }
}

/// Summary statistics recorded while generating a dataset.
#[derive(Debug, Clone)]
pub struct GenerationReport {
    pub bucket_counts: [usize; 5],
    /// Chi-square statistic of the realized bucket counts against the
    /// configured distribution (4 degrees of freedom when all buckets have
    /// positive weight).
    pub chi_square: f64,
}

/// Standard normal draw via Box-Muller.
fn sample_gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>(); // (0, 1]
    let u2: f64 = rng.gen();
    math::sqrt(-2.0 * math::ln(u1)) * math::cos(2.0 * core::f64::consts::PI * u2)
}

fn sample_range(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    if lo == hi {
        lo
    } else {
        lo + (rng.gen::<u64>() % (hi - lo + 1) as u64) as usize
    }
}

fn sample_bucket(rng: &mut ChaCha8Rng, weights: &[f64; 5]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    4
}

/// Duration in seconds drawn uniformly from a bucket; the open-ended XL
/// bucket is capped at 10 s.
fn sample_duration_seconds(rng: &mut ChaCha8Rng, bucket: usize) -> f64 {
    let (lo, hi) = DURATION_BUCKETS[bucket];
    let hi = if hi.is_infinite() { 10.0 } else { hi };
    lo + rng.gen::<f64>() * (hi - lo)
}

/// Temporally correlated noise: centered moving average over `window`
/// snippets, rescaled so every position keeps standard deviation `scale`.
fn correlated_noise(white: &Tensor, window: usize, scale: f64) -> Tensor {
    let (t, d) = (white.rows(), white.cols());
    if window <= 1 {
        let mut out = white.clone();
        for v in out.data_mut() {
            *v *= scale;
        }
        return out;
    }
    let half = window / 2;
    let mut out = Tensor::zeros(vec![t, d]);
    for ti in 0..t {
        let lo = ti.saturating_sub(half);
        let hi = (ti + half + 1).min(t);
        let n = (hi - lo) as f64;
        // mean of n unit Gaussians has std 1/sqrt(n)
        let gain = scale * math::sqrt(n) / n;
        for j in 0..d {
            let mut acc = 0.0;
            for s in lo..hi {
                acc += white.at(s, j);
            }
            *out.at_mut(ti, j) = gain * acc;
        }
    }
    out
}

/// Generate a synthetic dataset of untrimmed videos.
///
/// Background snippets are zero-mean Gaussian; planted segments add a
/// class-specific mean direction. Segments never overlap and are separated
/// by at least one background snippet.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<(Vec<VideoRecord>, GenerationReport)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // Class mean directions: random Gaussian directions, orthogonalized
    // against each other when the feature dimension allows it so that class
    // difficulty does not swing with the seed, then scaled to the
    // configured separation.
    let mut class_means: Vec<Vec<f64>> = Vec::with_capacity(cfg.num_classes);
    for _ in 0..cfg.num_classes {
        let mut dir: Vec<f64> = (0..cfg.feature_dim).map(|_| sample_gaussian(&mut rng)).collect();
        for prev in &class_means {
            let prev_sq: f64 = prev.iter().map(|v| v * v).sum();
            if prev_sq > 1e-24 {
                let dot: f64 = dir.iter().zip(prev).map(|(a, b)| a * b).sum();
                for (v, p) in dir.iter_mut().zip(prev) {
                    *v -= dot / prev_sq * p;
                }
            }
        }
        let norm = math::sqrt(dir.iter().map(|v| v * v).sum::<f64>()).max(1e-12);
        for v in &mut dir {
            *v *= cfg.class_separation / norm;
        }
        class_means.push(dir);
    }

    let mut videos = Vec::with_capacity(cfg.num_videos);
    let mut bucket_counts = [0usize; 5];

    for vid in 0..cfg.num_videos {
        let t = sample_range(&mut rng, cfg.snippets_range.0, cfg.snippets_range.1);
        let n_seg = sample_range(&mut rng, cfg.segments_range.0, cfg.segments_range.1);

        // Durations in snippets (ceiling of the second-based draw).
        let mut durations = Vec::with_capacity(n_seg);
        let mut buckets = Vec::with_capacity(n_seg);
        for _ in 0..n_seg {
            let b = sample_bucket(&mut rng, &cfg.bucket_weights);
            let secs = sample_duration_seconds(&mut rng, b);
            let snippets = (math::ceil(secs / cfg.snippet_seconds) as usize).max(1);
            durations.push(snippets);
            buckets.push(b);
        }
        // Drop the longest segments until the draw fits the timeline, so
        // short videos with several long-bucket draws stay generable.
        let mut occupied = durations.iter().sum::<usize>() + n_seg.saturating_sub(1);
        while occupied > t && durations.len() > 1 {
            let longest = durations
                .iter()
                .enumerate()
                .max_by_key(|(_, &d)| d)
                .map(|(i, _)| i)
                .expect("durations is non-empty");
            durations.remove(longest);
            buckets.remove(longest);
            occupied = durations.iter().sum::<usize>() + durations.len() - 1;
        }
        if occupied > t {
            durations[0] = t;
            occupied = t;
        }
        let n_seg = durations.len();

        // Distribute the free space over the n_seg+1 gaps.
        let mut free = t - occupied;
        let mut gaps = vec![0usize; n_seg + 1];
        for gap in gaps.iter_mut().take(n_seg) {
            let take = (rng.gen::<u64>() % (free + 1) as u64) as usize;
            *gap = take;
            free -= take;
        }
        gaps[n_seg] = free;

        let mut white = Tensor::zeros(vec![t, cfg.feature_dim]);
        for v in white.data_mut() {
            *v = sample_gaussian(&mut rng);
        }
        let mut features = correlated_noise(&white, cfg.noise_window, cfg.noise_scale);

        let mut gt = Vec::with_capacity(n_seg);
        let mut cursor = 0usize;
        for i in 0..n_seg {
            cursor += gaps[i];
            if i > 0 {
                cursor += 1; // at least one background snippet between segments
            }
            let class = sample_range(&mut rng, 1, cfg.num_classes);
            let (start, end) = (cursor, cursor + durations[i]);
            for ti in start..end {
                for j in 0..cfg.feature_dim {
                    features.data_mut()[ti * cfg.feature_dim + j] += class_means[class - 1][j];
                }
            }
            bucket_counts[buckets[i]] += 1;
            gt.push(GtSegment { start, end, class });
            cursor = end;
        }

        let classes: Vec<usize> = gt.iter().map(|g| g.class).collect();
        let (video_label, _) = encode_labels(&classes, cfg.num_classes)?;
        videos.push(VideoRecord {
            id: format!("synthetic-{:04}", vid),
            features,
            video_label,
            gt_segments: gt,
        });
    }

    let total: usize = bucket_counts.iter().sum();
    let wsum: f64 = cfg.bucket_weights.iter().sum();
    let mut chi_square = 0.0;
    for i in 0..5 {
        let expected = total as f64 * cfg.bucket_weights[i] / wsum;
        if expected > 0.0 {
            let diff = bucket_counts[i] as f64 - expected;
            chi_square += diff * diff / expected;
        }
    }

    Ok((videos, GenerationReport { bucket_counts, chi_square }))
}
