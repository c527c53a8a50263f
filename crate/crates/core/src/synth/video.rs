use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::motion::MotionClass;
use crate::error::{Error, Result};
use crate::flow_ops::FlowField;

/// One rendered clip source: RGB frames and forward flow, both stored as `f32`
/// exactly as they are written to disk.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticVideo {
    pub num_frames: usize,
    pub height: usize,
    pub width: usize,
    pub stride: usize,
    pub label: u32,
    pub seed: u64,
    /// F×H×W×3, values in [0, 1].
    pub frames: Vec<f32>,
    /// F×H×W×2; index t holds the displacement from frame t to frame t+stride.
    pub flows: Vec<f32>,
    /// Analytic centre per frame (F + stride entries); absent for videos read from disk.
    pub centers: Option<Vec<[f64; 2]>>,
}

impl SyntheticVideo {
    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.height * self.width * 3;
        &self.frames[t * n..(t + 1) * n]
    }

    pub fn flow(&self, t: usize) -> &[f32] {
        let n = self.height * self.width * 2;
        &self.flows[t * n..(t + 1) * n]
    }

    pub fn flow_field(&self, t: usize) -> FlowField {
        FlowField::new(
            self.height,
            self.width,
            self.flow(t).iter().map(|&v| v as f64).collect(),
        )
        .expect("stored flow has H×W×2 entries")
    }

    pub fn flow_fields(&self) -> Vec<FlowField> {
        (0..self.num_frames).map(|t| self.flow_field(t)).collect()
    }

    /// Stored flow at the pixel nearest the analytic centre of frame `t`.
    pub fn flow_at_center(&self, t: usize) -> Option<[f64; 2]> {
        let c = self.centers.as_ref()?[t];
        let x = c[0].round().clamp(0.0, (self.width - 1) as f64) as usize;
        let y = c[1].round().clamp(0.0, (self.height - 1) as f64) as usize;
        let f = self.flow(t);
        let i = (y * self.width + x) * 2;
        Some([f[i] as f64, f[i + 1] as f64])
    }
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Disk,
    Square,
}

impl Shape {
    fn contains(self, dx: f64, dy: f64, half: f64) -> bool {
        match self {
            Shape::Disk => dx * dx + dy * dy <= half * half,
            Shape::Square => dx.abs() <= half && dy.abs() <= half,
        }
    }

    /// Fraction of the unit pixel around `(dx, dy)` covered by the shape, on a
    /// `SUPERSAMPLE`² grid.
    fn coverage(self, dx: f64, dy: f64, half: f64) -> f64 {
        let n = SUPERSAMPLE;
        let mut hits = 0;
        for i in 0..n {
            for j in 0..n {
                let oy = (i as f64 + 0.5) / n as f64 - 0.5;
                let ox = (j as f64 + 0.5) / n as f64 - 0.5;
                hits += self.contains(dx + ox, dy + oy, half) as usize;
            }
        }
        hits as f64 / (n * n) as f64
    }
}

/// Sub-pixel grid used to anti-alias shape edges, so that sub-pixel motion
/// still changes the rendered frames.
const SUPERSAMPLE: usize = 4;

/// Renders one video of `class` with randomised appearance.
/// Smallest frame side that still leaves the shape a few pixels across.
pub const MIN_EXTENT: usize = 8;

pub fn generate_video(
    class: &MotionClass,
    num_frames: usize,
    height: usize,
    width: usize,
    stride: usize,
    seed: u64,
) -> Result<SyntheticVideo> {
    if num_frames < 2 {
        return Err(Error::invalid(format!(
            "a video needs at least 2 frames, got {}",
            num_frames
        )));
    }
    if stride == 0 {
        return Err(Error::invalid("flow stride must be positive"));
    }
    if height.min(width) < MIN_EXTENT {
        return Err(Error::invalid(format!(
            "frames must be at least {0}×{0}, got {1}×{2}",
            MIN_EXTENT, height, width
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = height.min(width) as f64 / 32.0;
    let half = rng.gen_range(3.0..4.5) * scale;
    let margin = half + 0.5;
    if 2.0 * margin > (height.min(width) as f64 - 1.0) {
        return Err(Error::invalid(format!(
            "shape of half-size {:.2} does not fit a {}×{} frame",
            half, height, width
        )));
    }
    let shape = if rng.gen_bool(0.5) {
        Shape::Disk
    } else {
        Shape::Square
    };
    let background: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
    let foreground = loop {
        let c: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
        let d: f64 = c
            .iter()
            .zip(&background)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        if d > 0.35 {
            break c;
        }
    };
    let texture_k = [rng.gen_range(0.1..0.6), rng.gen_range(0.1..0.6)];
    let texture_phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let phase = if class.program.uses_phase() {
        rng.gen_range(0.0..std::f64::consts::TAU)
    } else {
        0.0
    };

    // Positions for every frame plus the trailing `stride` frames needed by the last flows.
    let span = num_frames + stride;
    let offsets: Vec<[f64; 2]> = (0..span)
        .map(|t| class.program.offset(t as f64, phase))
        .collect();
    let extents = [width as f64, height as f64];
    let mut anchor = [0.0; 2];
    let mut fold = [false; 2];
    for d in 0..2 {
        let lo_off = offsets.iter().map(|o| o[d]).fold(f64::INFINITY, f64::min);
        let hi_off = offsets.iter().map(|o| o[d]).fold(f64::NEG_INFINITY, f64::max);
        let lo = margin - lo_off;
        let hi = extents[d] - 1.0 - margin - hi_off;
        if lo <= hi {
            anchor[d] = rng.gen_range(lo..=hi);
        } else {
            anchor[d] = extents[d] / 2.0 - (lo_off + hi_off) / 2.0;
            fold[d] = true;
        }
    }
    let centers: Vec<[f64; 2]> = offsets
        .iter()
        .map(|o| {
            let mut c = [anchor[0] + o[0], anchor[1] + o[1]];
            for d in 0..2 {
                if fold[d] {
                    c[d] = reflect_into(c[d], margin, extents[d] - 1.0 - margin);
                }
            }
            c
        })
        .collect();

    let plane = height * width;
    let mut frames = vec![0f32; num_frames * plane * 3];
    let mut flows = vec![0f32; num_frames * plane * 2];
    for t in 0..num_frames {
        let c = centers[t];
        let next = centers[t + stride];
        let disp = [next[0] - c[0], next[1] - c[1]];
        for y in 0..height {
            for x in 0..width {
                let p = y * width + x;
                let (dx, dy) = (x as f64 - c[0], y as f64 - c[1]);
                let inside = shape.contains(dx, dy, half);
                let cover = shape.coverage(dx, dy, half);
                let tex = 0.08
                    * (texture_k[0] * x as f64 + texture_k[1] * y as f64 + texture_phase).sin();
                let fi = (t * plane + p) * 3;
                for k in 0..3 {
                    let back = (background[k] + tex).clamp(0.0, 1.0);
                    frames[fi + k] = (cover * foreground[k] + (1.0 - cover) * back) as f32;
                }
                if inside {
                    let oi = (t * plane + p) * 2;
                    flows[oi] = disp[0] as f32;
                    flows[oi + 1] = disp[1] as f32;
                }
            }
        }
    }

    Ok(SyntheticVideo {
        num_frames,
        height,
        width,
        stride,
        label: class.id,
        seed,
        frames,
        flows,
        centers: Some(centers),
    })
}

/// Triangle-wave fold of `v` into `[lo, hi]`.
fn reflect_into(v: f64, lo: f64, hi: f64) -> f64 {
    let len = hi - lo;
    if len <= 0.0 {
        return lo;
    }
    let m = (v - lo).rem_euclid(2.0 * len);
    if m <= len {
        lo + m
    } else {
        hi - (m - len)
    }
}
