//! Flat `key = value` training configuration.

use std::f64::consts::PI;
use std::fmt::Write as _;

use crate::encoders::{EncoderConfig, FlowEncoderKind};
use crate::error::{Error, Result};
use crate::synth::ClipSelector;

/// How frame-level negatives are formed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LocalNegatives {
    /// Other timestamps of the same flow clip, plus rotated frames when FRA is on.
    Frames,
    /// Only same-timestamp features of independently rotated flows.
    AugmentedOnly,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub tau: f64,
    /// Rotation half-range for flow rotation augmentation.
    pub alpha: f64,
    pub lambda: f64,
    pub bank_size: usize,
    pub ema_momentum: f64,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub clip_len: usize,
    pub stride: usize,
    pub seed: u64,
    pub sampler: ClipSelector,
    pub fra: bool,
    pub l_rf: bool,
    pub l_lmc: bool,
    pub flip: bool,
    pub local_negatives: LocalNegatives,
    pub num_aug: usize,
    pub channels: usize,
    pub embed: usize,
    pub flow_divisor: usize,
    pub flow_encoder: FlowEncoderKind,
    /// Stop after this many steps (0 runs the full schedule); the learning-rate schedule is unaffected.
    pub max_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            tau: 0.07,
            alpha: PI / 3.0,
            lambda: 1.0,
            bank_size: 512,
            ema_momentum: 0.999,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 30,
            batch_size: 16,
            clip_len: 8,
            stride: 1,
            seed: 0,
            sampler: ClipSelector::Mds,
            fra: true,
            l_rf: true,
            l_lmc: true,
            flip: true,
            local_negatives: LocalNegatives::Frames,
            num_aug: 3,
            channels: 8,
            embed: 32,
            flow_divisor: 8,
            flow_encoder: FlowEncoderKind::PerFrame2d,
            max_steps: 0,
        }
    }
}

/// Toggle rows of the component ablation, in table order.
pub const ABLATION_ROWS: [&str; 8] = [
    "baseline",
    "rf",
    "rf-3d",
    "lmc",
    "rf-lmc",
    "rf-lmc-fra",
    "rf-lmc-mds",
    "rf-lmc-fra-mds",
];

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "on" | "true" | "1" | "yes" => Ok(true),
        "off" | "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{}: expected on/off, got '{}'", key, v))),
    }
}

fn on_off(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{}: cannot parse '{}'", key, v)))
}

/// Accepts plain numbers and `pi/N` / `pi*N` for angles.
fn parse_angle(key: &str, v: &str) -> Result<f64> {
    if let Some(d) = v.strip_prefix("pi/") {
        return Ok(PI / parse_num::<f64>(key, d)?);
    }
    if let Some(m) = v.strip_prefix("pi*") {
        return Ok(PI * parse_num::<f64>(key, m)?);
    }
    if v == "pi" {
        return Ok(PI);
    }
    parse_num(key, v)
}

impl TrainConfig {
    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            channels: self.channels,
            embed: self.embed,
            flow_divisor: self.flow_divisor,
            flow_kind: self.flow_encoder,
        }
    }

    /// Loss weights after applying the on/off toggles.
    pub fn loss_weights(&self) -> crate::contrastive::LossWeights {
        crate::contrastive::LossWeights {
            rf: if self.l_rf { 1.0 } else { 0.0 },
            lambda: if self.l_lmc { self.lambda } else { 0.0 },
        }
    }

    /// Preset for one toggle row of the ablation table.
    pub fn ablation_row(name: &str) -> Result<Self> {
        let base = TrainConfig {
            l_rf: false,
            l_lmc: false,
            fra: false,
            sampler: ClipSelector::Uniform,
            ..TrainConfig::default()
        };
        let mut c = base;
        match name {
            "baseline" => {}
            "rf" => c.l_rf = true,
            "rf-3d" => {
                c.l_rf = true;
                c.flow_encoder = FlowEncoderKind::Conv3d(crate::tensor::PadMode::Zero);
            }
            "lmc" => c.l_lmc = true,
            "rf-lmc" => {
                c.l_rf = true;
                c.l_lmc = true;
            }
            "rf-lmc-fra" => {
                c.l_rf = true;
                c.l_lmc = true;
                c.fra = true;
            }
            "rf-lmc-mds" => {
                c.l_rf = true;
                c.l_lmc = true;
                c.sampler = ClipSelector::Mds;
            }
            "rf-lmc-fra-mds" => {
                c.l_rf = true;
                c.l_lmc = true;
                c.fra = true;
                c.sampler = ClipSelector::Mds;
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown ablation row '{}' (expected one of {})",
                    other,
                    ABLATION_ROWS.join(", ")
                )))
            }
        }
        Ok(c)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "tau" => self.tau = parse_num(key, v)?,
            "alpha" => self.alpha = parse_angle(key, v)?,
            "lambda" => self.lambda = parse_num(key, v)?,
            "bank_size" => self.bank_size = parse_num(key, v)?,
            "ema_momentum" => self.ema_momentum = parse_num(key, v)?,
            "lr" => self.lr = parse_num(key, v)?,
            "momentum" => self.momentum = parse_num(key, v)?,
            "weight_decay" => self.weight_decay = parse_num(key, v)?,
            "epochs" => self.epochs = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "clip_len" => self.clip_len = parse_num(key, v)?,
            "stride" => self.stride = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "sampler" => {
                self.sampler = match v {
                    "uniform" => ClipSelector::Uniform,
                    "mds" => ClipSelector::Mds,
                    _ => return Err(Error::Config(format!("sampler: expected uniform or mds, got '{}'", v))),
                }
            }
            "fra" => self.fra = parse_bool(key, v)?,
            "l_rf" => self.l_rf = parse_bool(key, v)?,
            "l_lmc" => self.l_lmc = parse_bool(key, v)?,
            "flip" => self.flip = parse_bool(key, v)?,
            "local_negatives" => {
                self.local_negatives = match v {
                    "frames" => LocalNegatives::Frames,
                    "augmented" => LocalNegatives::AugmentedOnly,
                    _ => {
                        return Err(Error::Config(format!(
                            "local_negatives: expected frames or augmented, got '{}'",
                            v
                        )))
                    }
                }
            }
            "num_aug" => self.num_aug = parse_num(key, v)?,
            "channels" => self.channels = parse_num(key, v)?,
            "embed" => self.embed = parse_num(key, v)?,
            "flow_divisor" => self.flow_divisor = parse_num(key, v)?,
            "flow_encoder" => self.flow_encoder = FlowEncoderKind::parse(v)?,
            "max_steps" => self.max_steps = parse_num(key, v)?,
            "row" => *self = TrainConfig::ablation_row(v)?,
            other => return Err(Error::Config(format!("unknown config key '{}'", other))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`; `#` starts a comment.
    ///
    /// A `row = NAME` line resets every field to that preset, so it belongs first.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            self.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {}", i + 1, e)))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = TrainConfig::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    /// Every field as `key = value`, parseable by [`TrainConfig::from_text`].
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let sampler = match self.sampler {
            ClipSelector::Uniform => "uniform",
            ClipSelector::Mds => "mds",
        };
        let negatives = match self.local_negatives {
            LocalNegatives::Frames => "frames",
            LocalNegatives::AugmentedOnly => "augmented",
        };
        let pairs: [(&str, String); 25] = [
            ("tau", format!("{:?}", self.tau)),
            ("alpha", format!("{:?}", self.alpha)),
            ("lambda", format!("{:?}", self.lambda)),
            ("bank_size", self.bank_size.to_string()),
            ("ema_momentum", format!("{:?}", self.ema_momentum)),
            ("lr", format!("{:?}", self.lr)),
            ("momentum", format!("{:?}", self.momentum)),
            ("weight_decay", format!("{:?}", self.weight_decay)),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("clip_len", self.clip_len.to_string()),
            ("stride", self.stride.to_string()),
            ("seed", self.seed.to_string()),
            ("sampler", sampler.to_string()),
            ("fra", on_off(self.fra).to_string()),
            ("l_rf", on_off(self.l_rf).to_string()),
            ("l_lmc", on_off(self.l_lmc).to_string()),
            ("flip", on_off(self.flip).to_string()),
            ("local_negatives", negatives.to_string()),
            ("num_aug", self.num_aug.to_string()),
            ("channels", self.channels.to_string()),
            ("embed", self.embed.to_string()),
            ("flow_divisor", self.flow_divisor.to_string()),
            ("flow_encoder", self.flow_encoder.name().to_string()),
            ("max_steps", self.max_steps.to_string()),
        ];
        for (k, v) in pairs {
            let _ = writeln!(s, "{} = {}", k, v);
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("tau", self.tau),
            ("alpha", self.alpha),
            ("lr", self.lr),
        ];
        for (k, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{} must be positive, got {}", k, v)));
            }
        }
        if self.alpha >= PI {
            return Err(Error::Config(format!("alpha must be below pi, got {}", self.alpha)));
        }
        for (k, v) in [("momentum", self.momentum), ("ema_momentum", self.ema_momentum)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{} must lie in [0, 1], got {}", k, v)));
            }
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("lambda and weight_decay must be non-negative".into()));
        }
        for (k, v) in [
            ("bank_size", self.bank_size),
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("clip_len", self.clip_len),
            ("stride", self.stride),
            ("num_aug", self.num_aug),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{} must be positive", k)));
            }
        }
        if self.batch_size > self.bank_size {
            return Err(Error::Config(format!(
                "batch_size {} exceeds bank_size {}",
                self.batch_size, self.bank_size
            )));
        }
        self.encoder_config().validate()
    }
}
