//! Per-frame operators on dense flow fields: motion boundaries, coarsening,
//! foreground weighting, colour-wheel visualisation and flow rotation.

use std::f64::consts::{PI, TAU};
use std::io::Write;
use std::path::Path;
use std::sync::OnceLock;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// H×W grid of (u, v) displacements in pixels, interleaved.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl FlowField {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * 2 {
            return Err(Error::shape(
                "flow_field",
                format!("{}×{}×2 needs {} values, got {}", height, width, height * width * 2, data.len()),
            ));
        }
        Ok(FlowField {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        FlowField {
            height,
            width,
            data: vec![0.0; height * width * 2],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f64; 2]) -> Self {
        let mut data = Vec::with_capacity(height * width * 2);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(y, x));
            }
        }
        FlowField {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn at(&self, y: usize, x: usize) -> [f64; 2] {
        let i = (y * self.width + x) * 2;
        [self.data[i], self.data[i + 1]]
    }

    pub fn magnitude(&self, y: usize, x: usize) -> f64 {
        let [u, v] = self.at(y, x);
        u.hypot(v)
    }

    pub fn max_magnitude(&self) -> f64 {
        self.data
            .chunks(2)
            .map(|p| p[0].hypot(p[1]))
            .fold(0.0, f64::max)
    }

    pub fn scaled(&self, factor: f64) -> FlowField {
        FlowField {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    /// Mirror left-right. The horizontal component changes sign with the scene.
    pub fn flipped_horizontal(&self) -> FlowField {
        FlowField::from_fn(self.height, self.width, |y, x| {
            let [u, v] = self.at(y, self.width - 1 - x);
            [-u, v]
        })
    }

    fn channel(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(y * self.width + x) * 2 + c]
    }
}

/// Largest vector length over a set of flow frames; the saturation radius of a clip.
pub fn clip_max_magnitude(flows: &[FlowField]) -> f64 {
    flows.iter().map(FlowField::max_magnitude).fold(0.0, f64::max)
}

/// Single-channel H×W map.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl ScalarMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::shape(
                "scalar_map",
                format!("{}×{} needs {} values, got {}", height, width, height * width, values.len()),
            ));
        }
        Ok(ScalarMap {
            height,
            width,
            values,
        })
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }
}

/// Foreground weighting over pixels: non-negative, sums to one.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightMap(ScalarMap);

impl WeightMap {
    pub fn map(&self) -> &ScalarMap {
        &self.0
    }

    pub fn values(&self) -> &[f64] {
        &self.0.values
    }
}

/// Motion boundary strength: per-channel Sobel gradient magnitude, summed over
/// the u and v channels. Borders replicate the edge pixel.
pub fn sobel_boundary(flow: &FlowField) -> Result<ScalarMap> {
    let (h, w) = (flow.height, flow.width);
    if h < 3 || w < 3 {
        return Err(Error::invalid(format!(
            "Sobel needs at least 3×3, got {}×{}",
            h, w
        )));
    }
    let clampy = |y: isize| y.clamp(0, h as isize - 1) as usize;
    let clampx = |x: isize| x.clamp(0, w as isize - 1) as usize;
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut total = 0.0;
            for c in 0..2 {
                let p = |dy: isize, dx: isize| {
                    flow.channel(c, clampy(y as isize + dy), clampx(x as isize + dx))
                };
                let gx = (p(-1, 1) + 2.0 * p(0, 1) + p(1, 1)) - (p(-1, -1) + 2.0 * p(0, -1) + p(1, -1));
                let gy = (p(1, -1) + 2.0 * p(1, 0) + p(1, 1)) - (p(-1, -1) + 2.0 * p(-1, 0) + p(-1, 1));
                total += gx.hypot(gy);
            }
            out[y * w + x] = total;
        }
    }
    ScalarMap::new(h, w, out)
}

/// Average-pool with an r×r window and stride r (partial blocks at the
/// bottom/right edges are averaged over their actual size), then
/// nearest-neighbour upsample back to H×W.
pub fn coarsen(map: &ScalarMap, block: usize) -> Result<ScalarMap> {
    if block == 0 {
        return Err(Error::invalid("coarsening block size must be ≥ 1"));
    }
    let (h, w) = (map.height, map.width);
    let bh = h.div_ceil(block);
    let bw = w.div_ceil(block);
    let mut means = vec![0.0; bh * bw];
    for by in 0..bh {
        for bx in 0..bw {
            let ys = by * block..((by + 1) * block).min(h);
            let xs = bx * block..((bx + 1) * block).min(w);
            let count = ys.len() * xs.len();
            let mut s = 0.0;
            for y in ys {
                for x in xs.clone() {
                    s += map.at(y, x);
                }
            }
            means[by * bw + bx] = s / count as f64;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = means[(y / block) * bw + x / block];
        }
    }
    ScalarMap::new(h, w, out)
}

/// Softmax over all pixels of the coarsened motion-boundary map.
pub fn weight_map(flow: &FlowField, block: usize) -> Result<WeightMap> {
    let coarse = coarsen(&sobel_boundary(flow)?, block)?;
    let soft = Tensor::from_vec(coarse.values).softmax(0)?;
    Ok(WeightMap(ScalarMap::new(
        flow.height,
        flow.width,
        soft.into_data(),
    )?))
}

/// Coarsening block scaled from 28 px at 112 px input resolution.
pub fn default_block_size(height: usize) -> usize {
    ((28.0 * height as f64 / 112.0).round() as usize).max(1)
}

fn color_wheel() -> &'static [[f64; 3]] {
    static WHEEL: OnceLock<Vec<[f64; 3]>> = OnceLock::new();
    WHEEL.get_or_init(|| {
        // Segment lengths of the Middlebury wheel: RY, YG, GC, CB, BM, MR.
        let (ry, yg, gc, cb, bm, mr) = (15usize, 6usize, 4usize, 11usize, 13usize, 6usize);
        let mut wheel = Vec::with_capacity(ry + yg + gc + cb + bm + mr);
        let ramp = |i: usize, n: usize| (255.0 * i as f64 / n as f64).floor();
        for i in 0..ry {
            wheel.push([255.0, ramp(i, ry), 0.0]);
        }
        for i in 0..yg {
            wheel.push([255.0 - ramp(i, yg), 255.0, 0.0]);
        }
        for i in 0..gc {
            wheel.push([0.0, 255.0, ramp(i, gc)]);
        }
        for i in 0..cb {
            wheel.push([0.0, 255.0 - ramp(i, cb), 255.0]);
        }
        for i in 0..bm {
            wheel.push([ramp(i, bm), 0.0, 255.0]);
        }
        for i in 0..mr {
            wheel.push([255.0, 0.0, 255.0 - ramp(i, mr)]);
        }
        wheel
            .into_iter()
            .map(|c| [c[0] / 255.0, c[1] / 255.0, c[2] / 255.0])
            .collect()
    })
}

/// Colour of one flow vector on the Middlebury wheel with saturation radius `radius`.
/// A non-positive radius renders every vector white.
pub fn flow_color(u: f64, v: f64, radius: f64) -> [f64; 3] {
    let wheel = color_wheel();
    let n = wheel.len();
    let rad = if radius > 0.0 {
        (u.hypot(v) / radius).min(1.0)
    } else {
        0.0
    };
    let a = (-v).atan2(-u) / PI;
    let fk = (a + 1.0) / 2.0 * (n - 1) as f64;
    let k0 = (fk.floor() as usize).min(n - 1);
    let k1 = if k0 + 1 == n { 0 } else { k0 + 1 };
    let f = fk - k0 as f64;
    let mut out = [0.0; 3];
    for c in 0..3 {
        let col = (1.0 - f) * wheel[k0][c] + f * wheel[k1][c];
        out[c] = 1.0 - rad * (1.0 - col);
    }
    out
}

/// H×W×3 visualisation in [0, 1]; zero flow is white.
pub fn flow_to_rgb(flow: &FlowField, radius: f64) -> Result<Vec<f64>> {
    if !(radius > 0.0) {
        return Err(Error::invalid(format!(
            "saturation radius must be positive, got {}",
            radius
        )));
    }
    Ok(flow_to_rgb_unchecked(flow, radius))
}

/// As [`flow_to_rgb`], but a zero radius (an all-static clip) renders white.
pub(crate) fn flow_to_rgb_unchecked(flow: &FlowField, radius: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(flow.height * flow.width * 3);
    for p in flow.data.chunks(2) {
        out.extend_from_slice(&flow_color(p[0], p[1], radius));
    }
    out
}

/// Angle for flow rotation, in `[0, 2π)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RotationAngle(f64);

impl RotationAngle {
    pub fn new(radians: f64) -> Self {
        RotationAngle(radians.rem_euclid(TAU))
    }

    pub fn radians(self) -> f64 {
        self.0
    }

    pub fn compose(self, other: RotationAngle) -> RotationAngle {
        RotationAngle::new(self.0 + other.0)
    }
}

/// Rotates every motion vector by `angle`; pixel positions are unchanged.
pub fn rotate_flow(flow: &FlowField, angle: RotationAngle) -> FlowField {
    let (s, c) = angle.0.sin_cos();
    let data = flow
        .data
        .chunks(2)
        .flat_map(|p| [c * p[0] - s * p[1], s * p[0] + c * p[1]])
        .collect();
    FlowField {
        height: flow.height,
        width: flow.width,
        data,
    }
}

/// Uniform draw from `[alpha, 2π − alpha]`.
pub fn sample_angle(alpha: f64, rng: &mut impl Rng) -> Result<RotationAngle> {
    if !(alpha > 0.0 && alpha < PI) {
        return Err(Error::invalid(format!(
            "rotation margin must lie in (0, π), got {}",
            alpha
        )));
    }
    let lo = alpha;
    let hi = TAU - alpha;
    let u: f64 = rng.gen();
    Ok(RotationAngle(lo + (hi - lo) * u))
}

/// Binary PPM (P6) of an H×W×3 image in [0, 1].
pub fn write_ppm(path: &Path, height: usize, width: usize, rgb: &[f64]) -> Result<()> {
    if rgb.len() != height * width * 3 {
        return Err(Error::shape("write_ppm", "image buffer does not match extents"));
    }
    let mut bytes = format!("P6\n{} {}\n255\n", width, height).into_bytes();
    bytes.extend(rgb.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_flow(h: usize, w: usize, rng: &mut impl Rng) -> FlowField {
        FlowField::from_fn(h, w, |_, _| [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)])
    }

    /// HSV saturation of an RGB triple.
    fn saturation(c: [f64; 3]) -> f64 {
        let max = c.iter().cloned().fold(f64::MIN, f64::max);
        let min = c.iter().cloned().fold(f64::MAX, f64::min);
        if max == 0.0 {
            0.0
        } else {
            (max - min) / max
        }
    }

    fn hue_degrees(c: [f64; 3]) -> f64 {
        let max = c.iter().cloned().fold(f64::MIN, f64::max);
        let min = c.iter().cloned().fold(f64::MAX, f64::min);
        let d = max - min;
        let h = if max == c[0] {
            ((c[1] - c[2]) / d).rem_euclid(6.0)
        } else if max == c[1] {
            (c[2] - c[0]) / d + 2.0
        } else {
            (c[0] - c[1]) / d + 4.0
        };
        h * 60.0
    }

    #[test]
    fn sobel_constant_flow_is_zero() {
        let f = FlowField::from_fn(6, 7, |_, _| [1.5, -2.0]);
        let s = sobel_boundary(&f).unwrap();
        assert!(s.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn sobel_unit_ramp_interior_is_eight() {
        let f = FlowField::from_fn(6, 6, |_, x| [x as f64, 0.0]);
        let s = sobel_boundary(&f).unwrap();
        for y in 1..5 {
            for x in 1..5 {
                assert_eq!(s.at(y, x), 8.0);
            }
        }
    }

    #[test]
    fn sobel_step_edge_peaks_beside_edge() {
        // u jumps from 0 to 1 between columns 3 and 4.
        let f = FlowField::from_fn(8, 8, |_, x| [if x >= 4 { 1.0 } else { 0.0 }, 0.0]);
        let s = sobel_boundary(&f).unwrap();
        // Brute force: each column's response from the kernel taps.
        for y in 0..8 {
            for x in 0..8 {
                let expected = if x == 3 || x == 4 { 4.0 } else { 0.0 };
                assert_eq!(s.at(y, x), expected, "({}, {})", y, x);
            }
        }
    }

    #[test]
    fn sobel_rejects_tiny_fields() {
        assert!(sobel_boundary(&FlowField::zeros(2, 5)).is_err());
    }

    #[test]
    fn coarsen_identity_and_block_constant() {
        let m = ScalarMap::new(3, 3, (0..9).map(|v| v as f64).collect()).unwrap();
        assert_eq!(coarsen(&m, 1).unwrap(), m);
        let blocks = [1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.];
        let b = ScalarMap::new(4, 4, blocks.to_vec()).unwrap();
        assert_eq!(coarsen(&b, 2).unwrap(), b);
        assert!(coarsen(&b, 0).is_err());
    }

    #[test]
    fn coarsen_block_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = ScalarMap::new(6, 6, (0..36).map(|_| rng.gen()).collect()).unwrap();
        let c = coarsen(&m, 3).unwrap();
        for by in 0..2 {
            for bx in 0..2 {
                let mut s = 0.0;
                for y in 0..3 {
                    for x in 0..3 {
                        s += m.at(by * 3 + y, bx * 3 + x);
                    }
                }
                for y in 0..3 {
                    for x in 0..3 {
                        assert!((c.at(by * 3 + y, bx * 3 + x) - s / 9.0).abs() < 1e-15);
                    }
                }
            }
        }
    }

    #[test]
    fn coarsen_partial_blocks() {
        let m = ScalarMap::new(1, 5, vec![1., 2., 3., 4., 10.]).unwrap();
        let c = coarsen(&m, 2).unwrap();
        assert_eq!(c.values, vec![1.5, 1.5, 3.5, 3.5, 10.0]);
    }

    #[test]
    fn weight_map_constant_flow_is_uniform() {
        let f = FlowField::from_fn(8, 8, |_, _| [0.3, 0.1]);
        let w = weight_map(&f, 2).unwrap();
        for v in w.values() {
            assert!((v - 1.0 / 64.0).abs() < 1e-15);
        }
    }

    #[test]
    fn weight_map_peaks_on_boundary_block() {
        // Only the top-left 4×4 block contains a moving square edge.
        let f = FlowField::from_fn(8, 8, |y, x| if (1..3).contains(&y) && (1..3).contains(&x) { [2.0, 0.0] } else { [0.0, 0.0] });
        let w = weight_map(&f, 4).unwrap();
        let coarse = coarsen(&sobel_boundary(&f).unwrap(), 4).unwrap();
        let max = coarse.values.iter().cloned().fold(f64::MIN, f64::max);
        let z: f64 = coarse.values.iter().map(|v| (v - max).exp()).sum();
        for (wv, cv) in w.values().iter().zip(&coarse.values) {
            assert!((wv - (cv - max).exp() / z).abs() < 1e-15);
        }
        let top = w.map().at(0, 0);
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(w.map().at(y, x), top);
            }
        }
        assert!(w.values().iter().all(|v| *v <= top));
        assert!(w.map().at(7, 7) < top);
    }

    #[test]
    fn weight_map_sums_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let f = random_flow(12, 10, &mut rng);
            let w = weight_map(&f, 3).unwrap();
            let s: f64 = w.values().iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
            assert!(w.values().iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn weight_map_invariant_to_boundary_shift() {
        // Adding a constant to the boundary map must not change the softmax.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = random_flow(8, 8, &mut rng);
        let coarse = coarsen(&sobel_boundary(&f).unwrap(), 2).unwrap();
        let shifted: Vec<f64> = coarse.values.iter().map(|v| v + 17.5).collect();
        let a = Tensor::from_vec(coarse.values.clone()).softmax(0).unwrap();
        let b = Tensor::from_vec(shifted).softmax(0).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-15);
        assert!(a.max_abs_diff(&Tensor::from_vec(weight_map(&f, 2).unwrap().values().to_vec())) == 0.0);
    }

    #[test]
    fn default_block_scales_with_resolution() {
        assert_eq!(default_block_size(112), 28);
        assert_eq!(default_block_size(224), 56);
        assert_eq!(default_block_size(32), 8);
        assert_eq!(default_block_size(2), 1);
    }

    #[test]
    fn zero_flow_is_white() {
        assert_eq!(flow_color(0.0, 0.0, 1.0), [1.0, 1.0, 1.0]);
        let img = flow_to_rgb(&FlowField::zeros(2, 2), 3.0).unwrap();
        assert!(img.iter().all(|v| *v == 1.0));
        assert!(flow_to_rgb(&FlowField::zeros(2, 2), 0.0).is_err());
    }

    #[test]
    fn opposite_vectors_get_opposite_hues_and_equal_saturation() {
        let c = 1.3;
        let a = flow_color(c, 0.0, 2.0);
        let b = flow_color(-c, 0.0, 2.0);
        assert!((saturation(a) - saturation(b)).abs() < 1e-12);
        // The Middlebury wheel is not hue-uniform, so opposite angles land on
        // the far side of the hue circle rather than at exactly 180°.
        let d = (hue_degrees(a) - hue_degrees(b)).abs();
        let d = d.min(360.0 - d);
        assert!(d > 150.0, "hue separation {}", d);
    }

    #[test]
    fn saturation_is_proportional_to_magnitude() {
        for angle in [0.1f64, 1.0, 2.5, 4.0, 5.9] {
            let r = 4.0;
            let full = flow_color(r * angle.cos(), r * angle.sin(), r);
            let half = flow_color(0.5 * r * angle.cos(), 0.5 * r * angle.sin(), r);
            assert!((saturation(half) - 0.5 * saturation(full)).abs() < 1e-12);
            assert!((saturation(full) - 1.0).abs() < 1e-12);
        }
        // Beyond the radius saturation is clipped.
        assert!((saturation(flow_color(10.0, 0.0, 1.0)) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rotation_identity_quarter_turn_and_isometry() {
        let f = FlowField::from_fn(1, 1, |_, _| [1.0, 0.0]);
        let r = rotate_flow(&f, RotationAngle::new(PI / 2.0));
        assert!(r.at(0, 0)[0].abs() < 1e-15 && (r.at(0, 0)[1] - 1.0).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = random_flow(5, 6, &mut rng);
        assert_eq!(rotate_flow(&g, RotationAngle::new(0.0)), g);
        let theta = RotationAngle::new(rng.gen_range(0.0..TAU));
        let rg = rotate_flow(&g, theta);
        for y in 0..5 {
            for x in 0..6 {
                assert!((rg.magnitude(y, x) - g.magnitude(y, x)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn flip_negates_horizontal_motion() {
        let f = FlowField::from_fn(2, 3, |y, x| [x as f64 + 1.0, y as f64]);
        let g = f.flipped_horizontal();
        assert_eq!(g.at(0, 0), [-3.0, 0.0]);
        assert_eq!(g.at(1, 2), [-1.0, 1.0]);
        assert_eq!(g.flipped_horizontal(), f);
    }

    #[test]
    fn sampled_angles_stay_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let alpha = PI / 3.0;
        let n = 100_000;
        let mut sum = 0.0;
        for _ in 0..n {
            let a = sample_angle(alpha, &mut rng).unwrap().radians();
            assert!((alpha..=TAU - alpha).contains(&a));
            sum += a;
        }
        // Uniform on an interval of width 4π/3: σ = width/√12.
        let sigma = (4.0 * PI / 3.0) / 12f64.sqrt() / (n as f64).sqrt();
        assert!((sum / n as f64 - PI).abs() < 3.0 * sigma);
    }

    #[test]
    fn degenerate_margin_collapses_to_pi() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = sample_angle(PI - 1e-9, &mut rng).unwrap().radians();
        assert!((a - PI).abs() < 1e-8);
        assert!(sample_angle(0.0, &mut rng).is_err());
        assert!(sample_angle(PI, &mut rng).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn flow_strategy() -> impl Strategy<Value = FlowField> {
            prop::collection::vec(-5.0f64..5.0, 2 * 4 * 5)
                .prop_map(|d| FlowField::new(4, 5, d).unwrap())
        }

        proptest! {
            #[test]
            fn rotation_composes(f in flow_strategy(), a in 0.0f64..TAU, b in 0.0f64..TAU) {
                let ra = RotationAngle::new(a);
                let rb = RotationAngle::new(b);
                let two = rotate_flow(&rotate_flow(&f, ra), rb);
                let one = rotate_flow(&f, ra.compose(rb));
                for (x, y) in two.data().iter().zip(one.data()) {
                    prop_assert!((x - y).abs() < 1e-9);
                }
            }

            #[test]
            fn rotation_changes_hue_only(f in flow_strategy(), a in 0.0f64..TAU) {
                let radius = f.max_magnitude().max(1e-3);
                let rotated = rotate_flow(&f, RotationAngle::new(a));
                let before = flow_to_rgb(&f, radius).unwrap();
                let after = flow_to_rgb(&rotated, radius).unwrap();
                for (p, q) in before.chunks(3).zip(after.chunks(3)) {
                    let sp = saturation([p[0], p[1], p[2]]);
                    let sq = saturation([q[0], q[1], q[2]]);
                    prop_assert!((sp - sq).abs() < 1e-9);
                }
            }
        }
    }
}
