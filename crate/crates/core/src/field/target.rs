//! Synthetic target fields on the unit cube.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SHELL_RADIUS: f64 = 0.3;
pub const SHELL_HALF_WIDTH: f64 = 0.03;
/// Width of the linear falloff on each side of the shell.
pub const SHELL_RAMP: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FieldKind {
    SphereShell,
    GaussianBlobs,
    MengerLike,
    CheckerDensity,
}

impl FieldKind {
    pub fn name(self) -> &'static str {
        match self {
            FieldKind::SphereShell => "sphere-shell",
            FieldKind::GaussianBlobs => "gaussian-blobs",
            FieldKind::MengerLike => "menger-like",
            FieldKind::CheckerDensity => "checker-density",
        }
    }

    fn code(self) -> u8 {
        match self {
            FieldKind::SphereShell => 0,
            FieldKind::GaussianBlobs => 1,
            FieldKind::MengerLike => 2,
            FieldKind::CheckerDensity => 3,
        }
    }
}

impl FromStr for FieldKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "sphere-shell" => FieldKind::SphereShell,
            "gaussian-blobs" => FieldKind::GaussianBlobs,
            "menger-like" => FieldKind::MengerLike,
            "checker-density" => FieldKind::CheckerDensity,
            _ => {
                return Err(Error::Unknown {
                    what: "field kind",
                    name: s.into(),
                })
            }
        })
    }
}

impl fmt::Display for FieldKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Deterministic map from the unit cube to `channels` values in `[0, 1]`.
/// One channel is a density; three channels tint the density with a
/// position-dependent color.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetField {
    pub kind: FieldKind,
    pub seed: u64,
    pub channels: usize,
    blobs: Vec<([f64; 3], f64)>,
}

pub fn synth_field(kind: FieldKind, seed: u64, channels: usize) -> Result<TargetField> {
    if channels != 1 && channels != 3 {
        return Err(Error::Config(format!("channels must be 1 or 3, got {channels}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((kind.code() as u64) << 56));
    let blobs = match kind {
        FieldKind::GaussianBlobs => (0..6)
            .map(|_| {
                let c = [
                    rng.gen_range(0.25..0.75),
                    rng.gen_range(0.25..0.75),
                    rng.gen_range(0.25..0.75),
                ];
                (c, rng.gen_range(0.04..0.09))
            })
            .collect(),
        _ => Vec::new(),
    };
    Ok(TargetField {
        kind,
        seed,
        channels,
        blobs,
    })
}

fn shell(p: &[f64; 3]) -> f64 {
    let r = ((p[0] - 0.5).powi(2) + (p[1] - 0.5).powi(2) + (p[2] - 0.5).powi(2)).sqrt();
    let d = (r - SHELL_RADIUS).abs();
    if d <= SHELL_HALF_WIDTH {
        1.0
    } else {
        (1.0 - (d - SHELL_HALF_WIDTH) / SHELL_RAMP).max(0.0)
    }
}

fn menger(p: &[f64; 3]) -> f64 {
    // two-level sponge inside [0.2, 0.8]^3
    let mut q = [0.0; 3];
    for a in 0..3 {
        let t = (p[a] - 0.2) / 0.6;
        if !(0.0..1.0).contains(&t) {
            return 0.0;
        }
        q[a] = t;
    }
    for _ in 0..2 {
        let mut middle = 0;
        for v in &mut q {
            let s = *v * 3.0;
            let digit = s.floor();
            if digit == 1.0 {
                middle += 1;
            }
            *v = s - digit;
        }
        if middle >= 2 {
            return 0.0;
        }
    }
    1.0
}

fn checker(p: &[f64; 3]) -> f64 {
    let r = ((p[0] - 0.5).powi(2) + (p[1] - 0.5).powi(2) + (p[2] - 0.5).powi(2)).sqrt();
    if r > 0.4 {
        return 0.0;
    }
    let cell = |x: f64| (x * 6.0).floor() as i64;
    if (cell(p[0]) + cell(p[1]) + cell(p[2])).rem_euclid(2) == 0 {
        1.0
    } else {
        0.25
    }
}

impl TargetField {
    pub fn density(&self, p: &[f64; 3]) -> f64 {
        match self.kind {
            FieldKind::SphereShell => shell(p),
            FieldKind::GaussianBlobs => {
                let v: f64 = self
                    .blobs
                    .iter()
                    .map(|(c, s)| {
                        let d2 = (0..3).map(|a| (p[a] - c[a]).powi(2)).sum::<f64>();
                        (-d2 / (2.0 * s * s)).exp()
                    })
                    .sum();
                v.min(1.0)
            }
            FieldKind::MengerLike => menger(p),
            FieldKind::CheckerDensity => checker(p),
        }
    }

    pub fn eval(&self, p: &[f64; 3], out: &mut [f32]) {
        let d = self.density(p);
        if self.channels == 1 {
            out[0] = d as f32;
        } else {
            for a in 0..3 {
                out[a] = (d * (0.25 + 0.75 * p[a])) as f32;
            }
        }
    }

    /// Largest absolute channel value, for occupancy derivation.
    pub fn magnitude(&self, p: &[f64; 3]) -> f64 {
        self.density(p)
    }
}
