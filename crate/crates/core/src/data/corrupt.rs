//! Image corruptions with five severity levels, tuned for small images.

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::{normal_vec, Rng};
use crate::tensor::Scalar;

/// Additive noise σ per severity.
pub const NOISE_SIGMA: [f64; 5] = [0.04, 0.08, 0.12, 0.18, 0.26];
/// Contrast factor toward the image mean.
pub const CONTRAST_FACTOR: [f64; 5] = [0.75, 0.5, 0.4, 0.3, 0.15];
/// Pixelation block size in pixels.
pub const PIXELATE_BLOCK: [usize; 5] = [2, 3, 4, 6, 8];
/// Fog strength (weight of the additive gradient field).
pub const FOG_STRENGTH: [f64; 5] = [0.15, 0.25, 0.35, 0.5, 0.7];
/// Fraction of pixels covered by snow flakes.
pub const SNOW_FRACTION: [f64; 5] = [0.03, 0.06, 0.1, 0.15, 0.22];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CorruptionKind {
    GaussianNoise,
    Contrast,
    Pixelate,
    Fog,
    Snow,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 5] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::Contrast,
        CorruptionKind::Pixelate,
        CorruptionKind::Fog,
        CorruptionKind::Snow,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::Pixelate => "pixelate",
            CorruptionKind::Fog => "fog",
            CorruptionKind::Snow => "snow",
        }
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CorruptionKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::contract(format!("unknown corruption {s}")))
    }
}

/// A corruption family at severity `0..=5`; severity 0 is the identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Corruption {
    pub kind: CorruptionKind,
    pub severity: u8,
}

impl Corruption {
    pub fn new(kind: CorruptionKind, severity: u8) -> Result<Self> {
        if severity > 5 {
            return Err(Error::contract(format!("severity {severity} outside 0..=5")));
        }
        Ok(Corruption { kind, severity })
    }
}

impl fmt::Display for Corruption {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.kind, self.severity)
    }
}

/// Applies `c` to a `side × side` image in `[0, 1]`; output is clipped to `[0, 1]`.
pub fn corrupt<F: Scalar>(image: &[F], side: usize, c: Corruption, rng: &mut Rng) -> Result<Vec<F>> {
    if image.len() != side * side {
        return Err(Error::shape(
            "corrupt",
            format!("{} pixels for side {side}", image.len()),
        ));
    }
    if c.severity == 0 {
        return Ok(image.to_vec());
    }
    let s = (c.severity - 1) as usize;
    let x: Vec<f64> = image.iter().map(|v| v.as_f64()).collect();
    let out: Vec<f64> = match c.kind {
        CorruptionKind::GaussianNoise => {
            let noise: Vec<f64> = normal_vec(rng, x.len());
            x.iter().zip(noise).map(|(v, n)| v + NOISE_SIGMA[s] * n).collect()
        }
        CorruptionKind::Contrast => {
            let mean = x.iter().sum::<f64>() / x.len() as f64;
            x.iter().map(|v| (v - mean) * CONTRAST_FACTOR[s] + mean).collect()
        }
        CorruptionKind::Pixelate => {
            let b = PIXELATE_BLOCK[s];
            let mut out = x.clone();
            for by in (0..side).step_by(b) {
                for bx in (0..side).step_by(b) {
                    let (ye, xe) = ((by + b).min(side), (bx + b).min(side));
                    let n = ((ye - by) * (xe - bx)) as f64;
                    let mean: f64 = (by..ye)
                        .flat_map(|r| (bx..xe).map(move |q| r * side + q))
                        .map(|i| x[i])
                        .sum::<f64>()
                        / n;
                    for r in by..ye {
                        for q in bx..xe {
                            out[r * side + q] = mean;
                        }
                    }
                }
            }
            out
        }
        CorruptionKind::Fog => {
            let a = FOG_STRENGTH[s];
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            let (dx, dy) = (angle.cos(), angle.sin());
            let half = (side as f64 - 1.0) / 2.0;
            let scale = half * std::f64::consts::SQRT_2;
            x.iter()
                .enumerate()
                .map(|(i, v)| {
                    let (r, q) = ((i / side) as f64 - half, (i % side) as f64 - half);
                    let field = 0.5 + 0.5 * (q * dx + r * dy) / scale;
                    (v + a * field) / (1.0 + a)
                })
                .collect()
        }
        CorruptionKind::Snow => {
            let p = SNOW_FRACTION[s];
            x.iter()
                .map(|&v| if rng.random_bool(p) { 1.0 } else { v })
                .collect()
        }
    };
    Ok(out.into_iter().map(|v| F::of(v.clamp(0.0, 1.0))).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::{generate, SyntheticSpec};
    use crate::rng::seeded;

    fn images() -> (Vec<f32>, usize) {
        let spec = SyntheticSpec {
            train_count: 0,
            test_count: 1000,
            ..SyntheticSpec::default()
        };
        (generate::<f32>(&spec).unwrap().test.images, 16)
    }

    #[test]
    fn severity_zero_is_bitwise_identity() {
        let (imgs, side) = images();
        let img = &imgs[..side * side];
        for kind in CorruptionKind::ALL {
            let out = corrupt(img, side, Corruption::new(kind, 0).unwrap(), &mut seeded(1)).unwrap();
            assert_eq!(
                out.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                img.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn outputs_stay_in_unit_range() {
        let (imgs, side) = images();
        for kind in CorruptionKind::ALL {
            for sev in 1..=5 {
                let c = Corruption::new(kind, sev).unwrap();
                let out = corrupt(&imgs[..side * side], side, c, &mut seeded(sev as u64)).unwrap();
                assert!(out.iter().all(|v| (0.0..=1.0).contains(v)), "{c}");
            }
        }
    }

    #[test]
    fn contrast_variance_non_increasing_in_severity() {
        let (imgs, side) = images();
        let mut prev = f64::INFINITY;
        for sev in 0..=5 {
            let c = Corruption::new(CorruptionKind::Contrast, sev).unwrap();
            let mut total = 0.0;
            for img in imgs.chunks(side * side) {
                let out = corrupt(img, side, c, &mut seeded(0)).unwrap();
                let m = out.iter().map(|&v| v as f64).sum::<f64>() / out.len() as f64;
                total += out.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / out.len() as f64;
            }
            let var = total / (imgs.len() / (side * side)) as f64;
            assert!(var <= prev + 1e-12, "severity {sev}: {var} > {prev}");
            prev = var;
        }
    }

    #[test]
    fn deterministic_given_rng() {
        let (imgs, side) = images();
        let c = Corruption::new(CorruptionKind::Snow, 4).unwrap();
        let a = corrupt(&imgs[..256], side, c, &mut seeded(9)).unwrap();
        let b = corrupt(&imgs[..256], side, c, &mut seeded(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_severity_rejected() {
        assert!(Corruption::new(CorruptionKind::Fog, 6).is_err());
        assert!("blur".parse::<CorruptionKind>().is_err());
    }
}
