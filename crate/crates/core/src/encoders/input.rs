//! Packing clips into encoder input tensors.
//!
//! Both modalities are shifted by −0.5 so that inputs in [0, 1] centre on zero.

use crate::error::{Error, Result};
use crate::flow_ops::{clip_max_magnitude, flow_to_rgb_unchecked, FlowField};
use crate::synth::Clip;
use crate::tensor::Tensor;

const CENTRE: f64 = 0.5;

/// B×3×T×H×W from channel-last clips.
pub fn rgb_batch(clips: &[&Clip]) -> Result<Tensor> {
    let first = clips
        .first()
        .ok_or_else(|| Error::invalid("empty clip batch"))?;
    let (t, h, w) = (first.len(), first.height, first.width);
    let mut data = vec![0.0; clips.len() * 3 * t * h * w];
    for (bi, c) in clips.iter().enumerate() {
        if (c.len(), c.height, c.width) != (t, h, w) {
            return Err(Error::shape(
                "rgb_batch",
                format!("clip {} is {}×{}×{}, expected {}×{}×{}", bi, c.len(), c.height, c.width, t, h, w),
            ));
        }
        for ti in 0..t {
            for p in 0..h * w {
                for ch in 0..3 {
                    let src = ((ti * h * w) + p) * 3 + ch;
                    let dst = (((bi * 3 + ch) * t + ti) * h * w) + p;
                    data[dst] = c.frames[src] - CENTRE;
                }
            }
        }
    }
    Tensor::new(vec![clips.len(), 3, t, h, w], data)
}

/// B×T×3×H×W colour-wheel renderings; each clip saturates at its own peak magnitude.
pub fn flow_batch(flows: &[&[FlowField]]) -> Result<Tensor> {
    let first = flows
        .first()
        .and_then(|f| f.first())
        .ok_or_else(|| Error::invalid("empty flow batch"))?;
    let t = flows[0].len();
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(flows.len() * t * 3 * h * w);
    for (bi, clip) in flows.iter().enumerate() {
        if clip.len() != t || clip.iter().any(|f| f.height() != h || f.width() != w) {
            return Err(Error::shape(
                "flow_batch",
                format!("clip {} does not match {} frames of {}×{}", bi, t, h, w),
            ));
        }
        let radius = clip_max_magnitude(clip);
        for f in clip.iter() {
            let rgb = flow_to_rgb_unchecked(f, radius);
            for ch in 0..3 {
                data.extend((0..h * w).map(|p| rgb[p * 3 + ch] - CENTRE));
            }
        }
    }
    Tensor::new(vec![flows.len(), t, 3, h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clip(t: usize, h: usize, w: usize) -> Clip {
        let frames = (0..t * h * w * 3).map(|i| (i % 97) as f64 / 97.0).collect();
        Clip {
            start: 0,
            height: h,
            width: w,
            frames,
            flows: vec![FlowField::zeros(h, w); t],
        }
    }

    #[test]
    fn rgb_layout_matches_loops() {
        let c = clip(2, 3, 4);
        let x = rgb_batch(&[&c, &c]).unwrap();
        assert_eq!(x.shape(), &[2, 3, 2, 3, 4]);
        for ch in 0..3 {
            for t in 0..2 {
                for y in 0..3 {
                    for xx in 0..4 {
                        let want = c.frames[((t * 3 + y) * 4 + xx) * 3 + ch] - 0.5;
                        assert_eq!(x.get(&[1, ch, t, y, xx]), want);
                    }
                }
            }
        }
    }

    #[test]
    fn zero_flow_renders_white() {
        let c = clip(2, 8, 8);
        let x = flow_batch(&[&c.flows]).unwrap();
        assert_eq!(x.shape(), &[1, 2, 3, 8, 8]);
        assert!(x.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn mismatched_clips_rejected() {
        let a = clip(2, 8, 8);
        let b = clip(3, 8, 8);
        assert!(rgb_batch(&[&a, &b]).is_err());
        assert!(flow_batch(&[&a.flows, &b.flows]).is_err());
        assert!(rgb_batch(&[]).is_err());
    }
}
