//! Motion-differential clip scoring and median-threshold selection.
//!
//! A clip scores high when the foreground-weighted, colour-wheel rendering of
//! its flow changes a lot from one flow frame to the next.

use crate::error::{Error, Result};
use crate::flow_ops::{
    clip_max_magnitude, default_block_size, flow_to_rgb_unchecked, weight_map, FlowField,
    WeightMap,
};
use crate::synth::{valid_starts, SyntheticVideo};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClipScore {
    pub start: usize,
    pub score: f64,
}

/// Sum over pixels of the per-pixel Euclidean RGB distance between two
/// weighted visualisations.
///
/// `rgb_*` are H×W×3 and `w_*` are H×W; each weight is broadcast over the
/// three colour channels of its own image.
pub fn differential_from_parts(
    rgb_a: &[f64],
    w_a: &[f64],
    rgb_b: &[f64],
    w_b: &[f64],
) -> Result<f64> {
    let pixels = w_a.len();
    if w_b.len() != pixels || rgb_a.len() != 3 * pixels || rgb_b.len() != 3 * pixels {
        return Err(Error::shape(
            "motion_differential",
            format!(
                "rgb {} / {} and weights {} / {} disagree",
                rgb_a.len(),
                rgb_b.len(),
                w_a.len(),
                w_b.len()
            ),
        ));
    }
    let mut z = 0.0;
    for p in 0..pixels {
        let mut d2 = 0.0;
        for c in 0..3 {
            let d = rgb_a[3 * p + c] * w_a[p] - rgb_b[3 * p + c] * w_b[p];
            d2 += d * d;
        }
        z += d2.sqrt();
    }
    Ok(z)
}

/// Foreground motion differential between two flow frames.
///
/// `radius` is the colour-wheel saturation radius (the clip's maximum flow
/// magnitude) and `block` the weight-map coarsening stride.
pub fn motion_differential(
    current: &FlowField,
    next: &FlowField,
    radius: f64,
    block: usize,
) -> Result<f64> {
    if current.height() != next.height() || current.width() != next.width() {
        return Err(Error::shape(
            "motion_differential",
            format!(
                "{}×{} vs {}×{}",
                current.height(),
                current.width(),
                next.height(),
                next.width()
            ),
        ));
    }
    let wa = weight_map(current, block)?;
    let wb = weight_map(next, block)?;
    differential_from_parts(
        &flow_to_rgb_unchecked(current, radius),
        wa.values(),
        &flow_to_rgb_unchecked(next, radius),
        wb.values(),
    )
}

/// Frame indices (into the video's flow array) covered by the window at `start`.
pub fn window_indices(start: usize, clip_len: usize, stride: usize) -> impl Iterator<Item = usize> {
    (0..clip_len).map(move |j| start + j * stride)
}

/// Scores every valid window: the mean differential over its consecutive flow pairs.
pub fn score_clips(
    flows: &[FlowField],
    clip_len: usize,
    stride: usize,
    block: usize,
) -> Result<Vec<ClipScore>> {
    let starts = valid_starts(flows.len(), clip_len, stride)?;
    // Weight maps depend only on the frame itself, so compute each once.
    let weights: Vec<WeightMap> = flows
        .iter()
        .map(|f| weight_map(f, block))
        .collect::<Result<_>>()?;
    let mut scores = Vec::with_capacity(starts.clone().count());
    for start in starts {
        let idx: Vec<usize> = window_indices(start, clip_len, stride).collect();
        let window: Vec<FlowField> = idx.iter().map(|&i| flows[i].clone()).collect();
        let radius = clip_max_magnitude(&window);
        let rgb: Vec<Vec<f64>> = window
            .iter()
            .map(|f| flow_to_rgb_unchecked(f, radius))
            .collect();
        let pairs = clip_len.saturating_sub(1);
        let mut total = 0.0;
        for j in 0..pairs {
            total += differential_from_parts(
                &rgb[j],
                weights[idx[j]].values(),
                &rgb[j + 1],
                weights[idx[j + 1]].values(),
            )?;
        }
        let score = if pairs == 0 { 0.0 } else { total / pairs as f64 };
        scores.push(ClipScore { start, score });
    }
    Ok(scores)
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// Scores this close to the median (relative) count as ties, so summation
/// rounding on uniform motion cannot split equal windows.
pub const TIE_TOLERANCE: f64 = 1e-9;

/// Starts whose score is strictly above the median of all candidates; every
/// candidate when that leaves nothing (e.g. a static video).
pub fn mds_select(scores: &[ClipScore]) -> Vec<usize> {
    let values: Vec<f64> = scores.iter().map(|s| s.score).collect();
    let Some(median) = median(&values) else {
        return Vec::new();
    };
    let threshold = median + TIE_TOLERANCE * median.abs();
    let picked: Vec<usize> = scores
        .iter()
        .filter(|s| s.score > threshold)
        .map(|s| s.start)
        .collect();
    if picked.is_empty() {
        scores.iter().map(|s| s.start).collect()
    } else {
        picked
    }
}

/// Scores and selects the candidate windows of one video.
pub fn mds_candidates(video: &SyntheticVideo, clip_len: usize, stride: usize) -> Result<Vec<usize>> {
    let flows = video.flow_fields();
    let scores = score_clips(&flows, clip_len, stride, default_block_size(video.height))?;
    Ok(mds_select(&scores))
}
