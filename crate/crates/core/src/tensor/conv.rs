//! Volumetric cross-correlation kernels (im2col + GEMM per batch element).
//!
//! 2D convolution is routed through the same code with a unit temporal axis.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum PadMode {
    #[default]
    Zero,
    /// Mirror without repeating the edge sample: index -1 reads index 1.
    Reflect,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3dSpec {
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub pad_mode: PadMode,
}

impl Conv3dSpec {
    pub fn new(stride: [usize; 3], padding: [usize; 3]) -> Self {
        Conv3dSpec {
            stride,
            padding,
            pad_mode: PadMode::Zero,
        }
    }

    pub fn with_pad_mode(mut self, mode: PadMode) -> Self {
        self.pad_mode = mode;
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: [usize; 2],
    pub padding: [usize; 2],
    pub pad_mode: PadMode,
}

impl Conv2dSpec {
    pub fn new(stride: [usize; 2], padding: [usize; 2]) -> Self {
        Conv2dSpec {
            stride,
            padding,
            pad_mode: PadMode::Zero,
        }
    }

    pub fn with_pad_mode(mut self, mode: PadMode) -> Self {
        self.pad_mode = mode;
        self
    }

    pub(crate) fn lift(self) -> Conv3dSpec {
        Conv3dSpec {
            stride: [1, self.stride[0], self.stride[1]],
            padding: [0, self.padding[0], self.padding[1]],
            pad_mode: self.pad_mode,
        }
    }
}

/// Resolved extents of one convolution call.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub output: [usize; 3],
    pub spec: Conv3dSpec,
}

impl ConvGeometry {
    pub fn resolve(x_shape: &[usize], w_shape: &[usize], spec: Conv3dSpec) -> Result<Self> {
        if x_shape.len() != 5 || w_shape.len() != 5 {
            return Err(Error::shape(
                "conv3d",
                format!(
                    "expected N×C×T×H×W input and C'×C×kt×kh×kw kernel, got {:?} and {:?}",
                    x_shape, w_shape
                ),
            ));
        }
        if x_shape[1] != w_shape[1] {
            return Err(Error::shape(
                "conv3d",
                format!(
                    "input has {} channels but kernel expects {} (input {:?}, kernel {:?})",
                    x_shape[1], w_shape[1], x_shape, w_shape
                ),
            ));
        }
        let names = ["temporal", "height", "width"];
        let mut output = [0; 3];
        for d in 0..3 {
            let e = x_shape[2 + d];
            let k = w_shape[2 + d];
            let p = spec.padding[d];
            let s = spec.stride[d];
            if s == 0 || k == 0 {
                return Err(Error::shape(
                    "conv3d",
                    format!("{} stride and kernel must be positive", names[d]),
                ));
            }
            if spec.pad_mode == PadMode::Reflect && p >= e.max(1) {
                return Err(Error::shape(
                    "conv3d",
                    format!("{} reflect padding {} needs extent > {}, got {}", names[d], p, p, e),
                ));
            }
            if e + 2 * p < k {
                return Err(Error::shape(
                    "conv3d",
                    format!(
                        "{} extent {} with padding {} is smaller than kernel {}",
                        names[d], e, p, k
                    ),
                ));
            }
            output[d] = (e + 2 * p - k) / s + 1;
        }
        Ok(ConvGeometry {
            batch: x_shape[0],
            c_in: x_shape[1],
            c_out: w_shape[0],
            input: [x_shape[2], x_shape[3], x_shape[4]],
            kernel: [w_shape[2], w_shape[3], w_shape[4]],
            output,
            spec,
        })
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![
            self.batch,
            self.c_out,
            self.output[0],
            self.output[1],
            self.output[2],
        ]
    }

    fn in_volume(&self) -> usize {
        self.input.iter().product()
    }

    fn out_volume(&self) -> usize {
        self.output.iter().product()
    }

    fn col_rows(&self) -> usize {
        self.c_in * self.kernel.iter().product::<usize>()
    }

    /// Maps an output coordinate plus kernel offset to an input index on axis `d`.
    #[inline]
    fn source(&self, d: usize, out_idx: usize, k: usize) -> Option<usize> {
        let pos = (out_idx * self.spec.stride[d] + k) as isize - self.spec.padding[d] as isize;
        let extent = self.input[d] as isize;
        if pos >= 0 && pos < extent {
            return Some(pos as usize);
        }
        match self.spec.pad_mode {
            PadMode::Zero => None,
            PadMode::Reflect => {
                let r = if pos < 0 { -pos } else { 2 * (extent - 1) - pos };
                Some(r as usize)
            }
        }
    }

    /// Fills `col` (rows = C·kt·kh·kw, cols = T'·H'·W') from one batch element.
    fn im2col(&self, x: &[f64], col: &mut [f64]) {
        let [kt, kh, kw] = self.kernel;
        let [ot, oh, ow] = self.output;
        let [_, ih, iw] = self.input;
        let in_vol = self.in_volume();
        let out_vol = self.out_volume();
        let mut row = 0;
        for ci in 0..self.c_in {
            let xc = &x[ci * in_vol..(ci + 1) * in_vol];
            for a in 0..kt {
                for b in 0..kh {
                    for c in 0..kw {
                        let dst = &mut col[row * out_vol..(row + 1) * out_vol];
                        for t in 0..ot {
                            let st = self.source(0, t, a);
                            for h in 0..oh {
                                let seg = &mut dst[(t * oh + h) * ow..(t * oh + h + 1) * ow];
                                let sh = self.source(1, h, b);
                                match (st, sh) {
                                    (Some(st), Some(sh)) => {
                                        let base = (st * ih + sh) * iw;
                                        for (w, v) in seg.iter_mut().enumerate() {
                                            *v = match self.source(2, w, c) {
                                                Some(sw) => xc[base + sw],
                                                None => 0.0,
                                            };
                                        }
                                    }
                                    _ => seg.fill(0.0),
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }

    /// Scatter-adds `col` back onto one batch element of the input gradient.
    fn col2im(&self, col: &[f64], dx: &mut [f64]) {
        let [kt, kh, kw] = self.kernel;
        let [ot, oh, ow] = self.output;
        let [_, ih, iw] = self.input;
        let in_vol = self.in_volume();
        let out_vol = self.out_volume();
        let mut row = 0;
        for ci in 0..self.c_in {
            let dxc = &mut dx[ci * in_vol..(ci + 1) * in_vol];
            for a in 0..kt {
                for b in 0..kh {
                    for c in 0..kw {
                        let src = &col[row * out_vol..(row + 1) * out_vol];
                        for t in 0..ot {
                            let Some(st) = self.source(0, t, a) else { continue };
                            for h in 0..oh {
                                let Some(sh) = self.source(1, h, b) else { continue };
                                let base = (st * ih + sh) * iw;
                                let seg = &src[(t * oh + h) * ow..(t * oh + h + 1) * ow];
                                for (w, v) in seg.iter().enumerate() {
                                    if let Some(sw) = self.source(2, w, c) {
                                        dxc[base + sw] += v;
                                    }
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }
}

pub(crate) fn conv_forward(g: &ConvGeometry, x: &[f64], w: &[f64]) -> Vec<f64> {
    let rows = g.col_rows();
    let in_vol = g.in_volume();
    let out_vol = g.out_volume();
    let mut out = vec![0.0; g.batch * g.c_out * out_vol];
    let mut col = vec![0.0; rows * out_vol];
    for n in 0..g.batch {
        g.im2col(&x[n * g.c_in * in_vol..(n + 1) * g.c_in * in_vol], &mut col);
        let y = &mut out[n * g.c_out * out_vol..(n + 1) * g.c_out * out_vol];
        for co in 0..g.c_out {
            let yrow = &mut y[co * out_vol..(co + 1) * out_vol];
            let wrow = &w[co * rows..(co + 1) * rows];
            for (r, &wv) in wrow.iter().enumerate() {
                if wv == 0.0 {
                    continue;
                }
                let crow = &col[r * out_vol..(r + 1) * out_vol];
                for (o, c) in yrow.iter_mut().zip(crow) {
                    *o += wv * c;
                }
            }
        }
    }
    out
}

/// Returns (input gradient, kernel gradient); either may be skipped.
pub(crate) fn conv_backward(
    g: &ConvGeometry,
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let rows = g.col_rows();
    let in_vol = g.in_volume();
    let out_vol = g.out_volume();
    let mut dx = need_dx.then(|| vec![0.0; x.len()]);
    let mut dw = need_dw.then(|| vec![0.0; w.len()]);
    let mut col = vec![0.0; rows * out_vol];
    let mut dcol = vec![0.0; rows * out_vol];
    for n in 0..g.batch {
        let dyn_ = &dy[n * g.c_out * out_vol..(n + 1) * g.c_out * out_vol];
        if let Some(dw) = dw.as_mut() {
            g.im2col(&x[n * g.c_in * in_vol..(n + 1) * g.c_in * in_vol], &mut col);
            for co in 0..g.c_out {
                let dyrow = &dyn_[co * out_vol..(co + 1) * out_vol];
                let dwrow = &mut dw[co * rows..(co + 1) * rows];
                for (r, d) in dwrow.iter_mut().enumerate() {
                    let crow = &col[r * out_vol..(r + 1) * out_vol];
                    *d += dot(dyrow, crow);
                }
            }
        }
        if let Some(dx) = dx.as_mut() {
            dcol.fill(0.0);
            for co in 0..g.c_out {
                let dyrow = &dyn_[co * out_vol..(co + 1) * out_vol];
                let wrow = &w[co * rows..(co + 1) * rows];
                for (r, &wv) in wrow.iter().enumerate() {
                    if wv == 0.0 {
                        continue;
                    }
                    let drow = &mut dcol[r * out_vol..(r + 1) * out_vol];
                    for (d, g) in drow.iter_mut().zip(dyrow) {
                        *d += wv * g;
                    }
                }
            }
            g.col2im(&dcol, &mut dx[n * g.c_in * in_vol..(n + 1) * g.c_in * in_vol]);
        }
    }
    (dx, dw)
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four accumulators keep the loop vectorizable while staying deterministic.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        for l in 0..4 {
            acc[l] += a[4 * i + l] * b[4 * i + l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}
