use std::f64::consts::PI;

/// Parametric trajectory of the foreground centre, relative to an anchor.
#[derive(Clone, Debug, PartialEq)]
pub enum MotionProgram {
    Still,
    /// Constant velocity `speed` px/frame along `angle` (radians, image axes: x right, y down).
    Linear { angle: f64, speed: f64 },
    /// Orbit of `radius` px at `angular_rate` rad/frame; phase is drawn per video.
    Circular { radius: f64, angular_rate: f64 },
    /// Sinusoidal back-and-forth along `angle`; phase is drawn per video.
    Oscillation {
        angle: f64,
        amplitude: f64,
        period: f64,
    },
    /// Speed grows linearly from `initial_speed` by `acceleration` px/frame².
    Accelerating {
        angle: f64,
        initial_speed: f64,
        acceleration: f64,
    },
    /// Stays at rest for `frames` frames, then runs `then` from its own time zero.
    Hold {
        frames: usize,
        then: Box<MotionProgram>,
    },
}

impl MotionProgram {
    /// Offset of the centre at (possibly fractional) time `t`.
    pub fn offset(&self, t: f64, phase: f64) -> [f64; 2] {
        match self {
            MotionProgram::Still => [0.0, 0.0],
            MotionProgram::Linear { angle, speed } => {
                [speed * t * angle.cos(), speed * t * angle.sin()]
            }
            MotionProgram::Circular {
                radius,
                angular_rate,
            } => {
                let a = angular_rate * t + phase;
                [radius * a.cos(), radius * a.sin()]
            }
            MotionProgram::Oscillation {
                angle,
                amplitude,
                period,
            } => {
                let d = amplitude * (2.0 * PI * t / period + phase).sin();
                [d * angle.cos(), d * angle.sin()]
            }
            MotionProgram::Accelerating {
                angle,
                initial_speed,
                acceleration,
            } => {
                let d = initial_speed * t + 0.5 * acceleration * t * t;
                [d * angle.cos(), d * angle.sin()]
            }
            MotionProgram::Hold { frames, then } => {
                let local = (t - *frames as f64).max(0.0);
                then.offset(local, phase)
            }
        }
    }

    /// Representative speed in px/frame.
    pub fn nominal_speed(&self) -> f64 {
        match self {
            MotionProgram::Still => 0.0,
            MotionProgram::Linear { speed, .. } => *speed,
            MotionProgram::Circular {
                radius,
                angular_rate,
            } => radius * angular_rate.abs(),
            MotionProgram::Oscillation {
                amplitude, period, ..
            } => 4.0 * amplitude / period,
            MotionProgram::Accelerating {
                initial_speed,
                acceleration,
                ..
            } => initial_speed + acceleration * 8.0,
            MotionProgram::Hold { then, .. } => then.nominal_speed(),
        }
    }

    pub(crate) fn uses_phase(&self) -> bool {
        match self {
            MotionProgram::Circular { .. } | MotionProgram::Oscillation { .. } => true,
            MotionProgram::Hold { then, .. } => then.uses_phase(),
            _ => false,
        }
    }
}

/// A labelled motion program. Appearance is randomised independently of the class.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionClass {
    pub id: u32,
    pub name: String,
    pub program: MotionProgram,
}

impl MotionClass {
    pub fn new(id: u32, name: impl Into<String>, program: MotionProgram) -> Self {
        MotionClass {
            id,
            name: name.into(),
            program,
        }
    }

    pub fn nominal_speed(&self) -> f64 {
        self.program.nominal_speed()
    }
}

/// The default catalogue: four motion families first, then extra directions.
///
/// Every family changes its flow over time differently, so the classes are told
/// apart by how motion evolves rather than by appearance.
pub fn default_classes(count: usize) -> Vec<MotionClass> {
    let catalogue = [
        (
            "linear-right",
            MotionProgram::Linear {
                angle: 0.0,
                speed: 0.8,
            },
        ),
        (
            "orbit",
            MotionProgram::Circular {
                radius: 6.0,
                angular_rate: 0.25,
            },
        ),
        (
            "oscillate-vertical",
            MotionProgram::Oscillation {
                angle: PI / 2.0,
                amplitude: 5.0,
                period: 12.0,
            },
        ),
        (
            "accelerate-diagonal",
            MotionProgram::Accelerating {
                angle: PI / 4.0,
                initial_speed: 0.0,
                acceleration: 0.06,
            },
        ),
        (
            "linear-down",
            MotionProgram::Linear {
                angle: PI / 2.0,
                speed: 0.8,
            },
        ),
        (
            "oscillate-horizontal",
            MotionProgram::Oscillation {
                angle: 0.0,
                amplitude: 5.0,
                period: 12.0,
            },
        ),
        (
            "orbit-reverse",
            MotionProgram::Circular {
                radius: 6.0,
                angular_rate: -0.25,
            },
        ),
        ("still", MotionProgram::Still),
    ];
    catalogue
        .into_iter()
        .take(count)
        .enumerate()
        .map(|(i, (name, p))| MotionClass::new(i as u32, name, p))
        .collect()
}

/// Four constant-velocity classes along the compass directions.
pub fn linear_direction_classes(speed: f64) -> Vec<MotionClass> {
    (0..4)
        .map(|i| {
            let angle = i as f64 * PI / 2.0;
            MotionClass::new(
                i as u32,
                format!("linear-{}", i * 90),
                MotionProgram::Linear { angle, speed },
            )
        })
        .collect()
}
