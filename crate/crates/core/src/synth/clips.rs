use std::ops::RangeInclusive;

use rand::seq::SliceRandom;
use rand::Rng;

use super::video::SyntheticVideo;
use crate::error::{Error, Result};
use crate::flow_ops::FlowField;
use crate::motion_sampling::mds_candidates;

/// Clip start indices whose every frame has a forward flow inside the video:
/// `0 ..= F − (T+1)·s`.
pub fn valid_starts(num_frames: usize, clip_len: usize, stride: usize) -> Result<RangeInclusive<usize>> {
    if clip_len == 0 || stride == 0 {
        return Err(Error::invalid("clip length and stride must be positive"));
    }
    let needed = (clip_len + 1) * stride;
    if num_frames < needed {
        return Err(Error::invalid(format!(
            "video of {} frames is too short for {} frames at stride {} (needs {})",
            num_frames, clip_len, stride, needed
        )));
    }
    Ok(0..=num_frames - needed)
}

/// T frames (channel-last, `f64`) and their forward flows.
#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    pub start: usize,
    pub height: usize,
    pub width: usize,
    /// T×H×W×3.
    pub frames: Vec<f64>,
    pub flows: Vec<FlowField>,
}

impl Clip {
    pub fn len(&self) -> usize {
        self.flows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flows.is_empty()
    }

    /// Mirrors both modalities left-right; horizontal flow changes sign.
    pub fn flip_horizontal(&mut self) {
        let (h, w) = (self.height, self.width);
        for t in 0..self.len() {
            let base = t * h * w * 3;
            for y in 0..h {
                for x in 0..w / 2 {
                    let a = base + (y * w + x) * 3;
                    let b = base + (y * w + (w - 1 - x)) * 3;
                    for c in 0..3 {
                        self.frames.swap(a + c, b + c);
                    }
                }
            }
        }
        for f in &mut self.flows {
            *f = f.flipped_horizontal();
        }
    }
}

pub fn extract_clip(video: &SyntheticVideo, start: usize, clip_len: usize, stride: usize) -> Result<Clip> {
    let starts = valid_starts(video.num_frames, clip_len, stride)?;
    if !starts.contains(&start) {
        return Err(Error::invalid(format!(
            "clip start {} outside valid range {:?}",
            start, starts
        )));
    }
    let mut frames = Vec::with_capacity(clip_len * video.height * video.width * 3);
    let mut flows = Vec::with_capacity(clip_len);
    for j in 0..clip_len {
        let t = start + j * stride;
        frames.extend(video.frame(t).iter().map(|&v| v as f64));
        flows.push(video.flow_field(t));
    }
    Ok(Clip {
        start,
        height: video.height,
        width: video.width,
        frames,
        flows,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClipSelector {
    Uniform,
    /// Motion-differential sampling: draw from windows scoring above the video's median.
    Mds,
}

/// Query and key clips from two independently drawn windows of `video`.
pub fn sample_clip_pair(
    video: &SyntheticVideo,
    clip_len: usize,
    stride: usize,
    selector: ClipSelector,
    rng: &mut impl Rng,
) -> Result<(Clip, Clip)> {
    let candidates: Vec<usize> = match selector {
        ClipSelector::Uniform => valid_starts(video.num_frames, clip_len, stride)?.collect(),
        ClipSelector::Mds => mds_candidates(video, clip_len, stride)?,
    };
    sample_clip_pair_from(video, clip_len, stride, &candidates, rng)
}

/// As [`sample_clip_pair`] with a precomputed candidate pool.
pub fn sample_clip_pair_from(
    video: &SyntheticVideo,
    clip_len: usize,
    stride: usize,
    candidates: &[usize],
    rng: &mut impl Rng,
) -> Result<(Clip, Clip)> {
    let q = *candidates
        .choose(rng)
        .ok_or_else(|| Error::invalid("no candidate clip windows"))?;
    let k = *candidates.choose(rng).expect("non-empty");
    Ok((
        extract_clip(video, q, clip_len, stride)?,
        extract_clip(video, k, clip_len, stride)?,
    ))
}
