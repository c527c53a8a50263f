use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::{he_uniform, Bound, ParamSet};
use crate::error::{Error, Result};
use crate::tensor::{Conv2dSpec, Conv3dSpec, PadMode, Tape, Tensor, Var};

/// How flow frames are encoded.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlowEncoderKind {
    /// Each frame on its own with 2D convolutions.
    PerFrame2d,
    /// 3D convolutions over the flow clip; mixes neighbouring timestamps.
    Conv3d(PadMode),
}

impl FlowEncoderKind {
    pub fn name(self) -> &'static str {
        match self {
            FlowEncoderKind::PerFrame2d => "2d",
            FlowEncoderKind::Conv3d(PadMode::Zero) => "3d-zero",
            FlowEncoderKind::Conv3d(PadMode::Reflect) => "3d-reflect",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "2d" => Ok(FlowEncoderKind::PerFrame2d),
            "3d-zero" => Ok(FlowEncoderKind::Conv3d(PadMode::Zero)),
            "3d-reflect" => Ok(FlowEncoderKind::Conv3d(PadMode::Reflect)),
            other => Err(Error::Config(format!(
                "unknown flow encoder '{}' (expected 2d, 3d-zero or 3d-reflect)",
                other
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    /// RGB stage widths are `channels`, `2·channels`, `4·channels`.
    pub channels: usize,
    /// Embedding width D shared by the TPN output and both projection heads.
    pub embed: usize,
    /// Flow stage widths are the RGB widths divided by this.
    pub flow_divisor: usize,
    pub flow_kind: FlowEncoderKind,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            channels: 8,
            embed: 32,
            flow_divisor: 8,
            flow_kind: FlowEncoderKind::PerFrame2d,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.embed == 0 || self.flow_divisor == 0 {
            return Err(Error::Config("encoder widths must be positive".into()));
        }
        if self.channels % self.flow_divisor != 0 {
            return Err(Error::Config(format!(
                "channels {} not divisible by flow divisor {}",
                self.channels, self.flow_divisor
            )));
        }
        Ok(())
    }

    pub fn rgb_widths(&self) -> [usize; 3] {
        [self.channels, 2 * self.channels, 4 * self.channels]
    }

    pub fn flow_widths(&self) -> [usize; 3] {
        self.rgb_widths().map(|w| w / self.flow_divisor)
    }
}

/// RGB stage outputs, each N×C×T×H×W.
#[derive(Clone, Copy, Debug)]
pub struct RgbStages {
    pub v3: Var,
    pub v4: Var,
    pub v5: Var,
}

/// Global (B×D) and local (B×T×D) embeddings of both pathways.
#[derive(Clone, Copy, Debug)]
pub struct Features {
    pub rgb_glb: Var,
    pub rgb_lc: Var,
    pub flow_glb: Var,
    pub flow_lc: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct FlowOutput {
    pub glb: Var,
    pub lc: Var,
}

const RGB_STAGE_SPEC: ([usize; 3], [usize; 3]) = ([1, 2, 2], [1, 1, 1]);
/// Negative-side slope of every hidden activation; the 1/8-width flow stages die easily under a plain ReLU.
pub const LEAKY_SLOPE: f64 = 0.1;

/// Dual-pathway encoder: parameters plus the layout that reads them.
#[derive(Clone, Debug, PartialEq)]
pub struct DualEncoder {
    pub config: EncoderConfig,
    pub params: ParamSet,
}

impl DualEncoder {
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        let [c3, c4, c5] = config.rgb_widths();
        let d = config.embed;
        let mut conv = |p: &mut ParamSet, name: &str, shape: &[usize]| -> Result<()> {
            let fan_in: usize = shape[1..].iter().product();
            p.insert(format!("{}.w", name), he_uniform(shape, fan_in, &mut rng))?;
            p.insert(format!("{}.b", name), Tensor::zeros(&[shape[0]]))
        };
        conv(&mut p, "rgb.conv1", &[c3, 3, 3, 3, 3])?;
        conv(&mut p, "rgb.conv2", &[c4, c3, 3, 3, 3])?;
        conv(&mut p, "rgb.conv3", &[c5, c4, 3, 3, 3])?;
        conv(&mut p, "rgb.lat3", &[d, c3, 1, 1, 1])?;
        conv(&mut p, "rgb.lat4", &[d, c4, 1, 1, 1])?;
        conv(&mut p, "rgb.lat5", &[d, c5, 1, 1, 1])?;
        let [f3, f4, f5] = config.flow_widths();
        match config.flow_kind {
            FlowEncoderKind::PerFrame2d => {
                conv(&mut p, "flow.conv1", &[f3, 3, 3, 3])?;
                conv(&mut p, "flow.conv2", &[f4, f3, 3, 3])?;
                conv(&mut p, "flow.conv3", &[f5, f4, 3, 3])?;
            }
            FlowEncoderKind::Conv3d(_) => {
                conv(&mut p, "flow.conv1", &[f3, 3, 3, 3, 3])?;
                conv(&mut p, "flow.conv2", &[f4, f3, 3, 3, 3])?;
                conv(&mut p, "flow.conv3", &[f5, f4, 3, 3, 3])?;
            }
        }
        // Linear layers store W as in×out and compute x·W + b.
        let mut linear = |p: &mut ParamSet, name: &str, i: usize, o: usize| -> Result<()> {
            p.insert(format!("{}.w", name), he_uniform(&[i, o], i, &mut rng))?;
            p.insert(format!("{}.b", name), Tensor::zeros(&[o]))
        };
        linear(&mut p, "rgb.mlp1", c5, d)?;
        linear(&mut p, "rgb.mlp2", d, d)?;
        linear(&mut p, "flow.local", f5, d)?;
        linear(&mut p, "flow.mlp1", f5, d)?;
        linear(&mut p, "flow.mlp2", d, d)?;
        Ok(DualEncoder { config, params: p })
    }

    fn conv3d_act(&self, tape: &mut Tape, b: &Bound<'_>, x: Var, name: &str, spec: Conv3dSpec) -> Result<Var> {
        let y = tape.conv3d(x, b.var(&format!("{}.w", name))?, spec)?;
        let y = tape.add_bias(y, b.var(&format!("{}.b", name))?, 1)?;
        Ok(tape.leaky_relu(y, LEAKY_SLOPE))
    }

    fn linear(&self, tape: &mut Tape, b: &Bound<'_>, x: Var, name: &str) -> Result<Var> {
        let y = tape.matmul(x, b.var(&format!("{}.w", name))?)?;
        tape.add_bias(y, b.var(&format!("{}.b", name))?, 1)
    }

    fn mlp(&self, tape: &mut Tape, b: &Bound<'_>, x: Var, name: &str) -> Result<Var> {
        let h = self.linear(tape, b, x, &format!("{}1", name))?;
        let h = tape.leaky_relu(h, LEAKY_SLOPE);
        self.linear(tape, b, h, &format!("{}2", name))
    }

    /// Three stride-(1,2,2) stages on a B×3×T×H×W clip.
    pub fn rgb_stages(&self, tape: &mut Tape, b: &Bound<'_>, clip: Var) -> Result<RgbStages> {
        let s = tape.shape(clip).to_vec();
        if s.len() != 5 || s[1] != 3 || s[3] % 8 != 0 || s[4] % 8 != 0 {
            return Err(Error::shape(
                "rgb_forward",
                format!("expected B×3×T×H×W with H, W divisible by 8, got {:?}", s),
            ));
        }
        let spec = Conv3dSpec::new(RGB_STAGE_SPEC.0, RGB_STAGE_SPEC.1);
        let v3 = self.conv3d_act(tape, b, clip, "rgb.conv1", spec)?;
        let v4 = self.conv3d_act(tape, b, v3, "rgb.conv2", spec)?;
        let v5 = self.conv3d_act(tape, b, v4, "rgb.conv3", spec)?;
        Ok(RgbStages { v3, v4, v5 })
    }

    fn lateral(&self, tape: &mut Tape, b: &Bound<'_>, x: Var, name: &str) -> Result<Var> {
        let y = tape.conv3d(x, b.var(&format!("{}.w", name))?, Conv3dSpec::new([1; 3], [0; 3]))?;
        tape.add_bias(y, b.var(&format!("{}.b", name))?, 1)
    }

    /// Lateral projections to D with a top-down nearest ×2 upsample-add; returns the finest level.
    pub fn tpn(&self, tape: &mut Tape, b: &Bound<'_>, stages: RgbStages) -> Result<Var> {
        let (s3, s4, s5) = (tape.shape(stages.v3), tape.shape(stages.v4), tape.shape(stages.v5));
        let fits = |fine: &[usize], coarse: &[usize]| {
            fine.len() == 5
                && coarse.len() == 5
                && fine[0] == coarse[0]
                && fine[2] == coarse[2]
                && fine[3] == 2 * coarse[3]
                && fine[4] == 2 * coarse[4]
        };
        if !fits(s3, s4) || !fits(s4, s5) {
            return Err(Error::shape(
                "tpn_merge",
                format!("stage shapes {:?}, {:?}, {:?} do not nest", s3, s4, s5),
            ));
        }
        let p5 = self.lateral(tape, b, stages.v5, "rgb.lat5")?;
        let l4 = self.lateral(tape, b, stages.v4, "rgb.lat4")?;
        let up = tape.upsample_nearest(p5, &[1, 1, 1, 2, 2])?;
        let p4 = tape.add(l4, up)?;
        let l3 = self.lateral(tape, b, stages.v3, "rgb.lat3")?;
        let up = tape.upsample_nearest(p4, &[1, 1, 1, 2, 2])?;
        tape.add(l3, up)
    }

    /// `(ν_glb: B×D, ν_lc: B×T×D)`.
    pub fn rgb_heads(&self, tape: &mut Tape, b: &Bound<'_>, merged: Var, v5: Var) -> Result<(Var, Var)> {
        let pooled = tape.mean_trailing(v5, 3)?;
        let glb = self.mlp(tape, b, pooled, "rgb.mlp")?;
        let lc = tape.mean_trailing(merged, 2)?;
        let lc = tape.permute(lc, &[0, 2, 1])?;
        Ok((glb, lc))
    }

    pub fn rgb_forward(&self, tape: &mut Tape, b: &Bound<'_>, clip: Var) -> Result<(Var, Var)> {
        let stages = self.rgb_stages(tape, b, clip)?;
        let merged = self.tpn(tape, b, stages)?;
        self.rgb_heads(tape, b, merged, stages.v5)
    }

    /// Pooled last-stage RGB features (B×4C), the frozen-backbone representation.
    pub fn rgb_backbone(&self, tape: &mut Tape, b: &Bound<'_>, clip: Var) -> Result<Var> {
        let stages = self.rgb_stages(tape, b, clip)?;
        tape.mean_trailing(stages.v5, 3)
    }

    /// Last-stage flow maps with one row per `(b, t)` pair, shaped (B·T)×C×h×w.
    ///
    /// `flows` is B×T×3×H×W (rendered flow images).
    pub fn flow_stages(&self, tape: &mut Tape, b: &Bound<'_>, flows: Var) -> Result<Var> {
        let s = tape.shape(flows).to_vec();
        if s.len() != 5 || s[2] != 3 || s[3] % 8 != 0 || s[4] % 8 != 0 {
            return Err(Error::shape(
                "flow_forward",
                format!("expected B×T×3×H×W with H, W divisible by 8, got {:?}", s),
            ));
        }
        let (bs, t, h, w) = (s[0], s[1], s[3], s[4]);
        match self.config.flow_kind {
            FlowEncoderKind::PerFrame2d => {
                let mut x = tape.reshape(flows, &[bs * t, 3, h, w])?;
                for name in ["flow.conv1", "flow.conv2", "flow.conv3"] {
                    let y = tape.conv2d(x, b.var(&format!("{}.w", name))?, Conv2dSpec::new([2, 2], [1, 1]))?;
                    let y = tape.add_bias(y, b.var(&format!("{}.b", name))?, 1)?;
                    x = tape.leaky_relu(y, LEAKY_SLOPE);
                }
                Ok(x)
            }
            FlowEncoderKind::Conv3d(mode) => {
                let spec = Conv3dSpec::new(RGB_STAGE_SPEC.0, RGB_STAGE_SPEC.1).with_pad_mode(mode);
                let mut x = tape.permute(flows, &[0, 2, 1, 3, 4])?;
                for name in ["flow.conv1", "flow.conv2", "flow.conv3"] {
                    x = self.conv3d_act(tape, b, x, name, spec)?;
                }
                let m = tape.permute(x, &[0, 2, 1, 3, 4])?;
                let ms = tape.shape(m).to_vec();
                tape.reshape(m, &[bs * t, ms[2], ms[3], ms[4]])
            }
        }
    }

    /// `(m_glb: B×D, m_lc: B×T×D)`.
    pub fn flow_forward(&self, tape: &mut Tape, b: &Bound<'_>, flows: Var) -> Result<FlowOutput> {
        let s = tape.shape(flows).to_vec();
        let m5 = self.flow_stages(tape, b, flows)?;
        let pooled = tape.mean_trailing(m5, 2)?;
        let lc = self.linear(tape, b, pooled, "flow.local")?;
        let lc = tape.reshape(lc, &[s[0], s[1], self.config.embed])?;
        let width = tape.shape(pooled)[1];
        let per_clip = tape.reshape(pooled, &[s[0], s[1], width])?;
        let per_clip = tape.mean_axis(per_clip, 1)?;
        let glb = self.mlp(tape, b, per_clip, "flow.mlp")?;
        Ok(FlowOutput { glb, lc })
    }

    pub fn forward(&self, tape: &mut Tape, b: &Bound<'_>, rgb: Var, flows: Var) -> Result<Features> {
        let (rgb_glb, rgb_lc) = self.rgb_forward(tape, b, rgb)?;
        let f = self.flow_forward(tape, b, flows)?;
        Ok(Features {
            rgb_glb,
            rgb_lc,
            flow_glb: f.glb,
            flow_lc: f.lc,
        })
    }

    /// Frozen backbone features for a batch, without recording gradients.
    pub fn embed_rgb(&self, rgb: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape, false);
        let x = tape.constant(rgb.clone());
        let f = self.rgb_backbone(&mut tape, &b, x)?;
        Ok(tape.value(f).clone())
    }
}
