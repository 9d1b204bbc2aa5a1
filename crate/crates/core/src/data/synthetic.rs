//! Procedural image-classification data: each class is one setting of a
//! parametric pattern family (oriented bar, Gaussian blob, checkerboard
//! phase, ring radius), rendered with per-sample jitter.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::nn::checkpoint::{decode, encode, Record, RecordData};
use crate::rng::{derive, normal_vec, seeded, Rng};
use crate::tensor::{Scalar, Tensor};

const FAMILIES: usize = 4;
/// Peak-to-background intensity range of a rendered pattern.
const CONTRAST: f64 = 0.65;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub side: usize,
    pub classes: usize,
    pub jitter: f64,
    pub train_count: usize,
    pub test_count: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            side: 16,
            classes: 8,
            jitter: 1.0,
            train_count: 4000,
            test_count: 1000,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn dim(&self) -> usize {
        self.side * self.side
    }

    fn validate(&self) -> Result<()> {
        if self.side < 4 || self.classes == 0 || self.jitter.is_nan() || self.jitter < 0.0 {
            return Err(Error::contract(format!(
                "invalid synthetic spec: side {}, classes {}, jitter {}",
                self.side, self.classes, self.jitter
            )));
        }
        Ok(())
    }
}

/// Flattened row-major images in `[0, 1]` with integer labels in `[0, L)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<F> {
    pub side: usize,
    pub classes: usize,
    pub images: Vec<F>,
    pub labels: Vec<usize>,
}

impl<F: Scalar> Dataset<F> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.side * self.side
    }

    pub fn image(&self, i: usize) -> &[F] {
        let d = self.dim();
        &self.images[i * d..(i + 1) * d]
    }

    pub fn take(&self, n: usize) -> Dataset<F> {
        let n = n.min(self.len());
        Dataset {
            side: self.side,
            classes: self.classes,
            images: self.images[..n * self.dim()].to_vec(),
            labels: self.labels[..n].to_vec(),
        }
    }

    /// Serialises into the checkpoint container as an `images`/`labels` pair.
    pub fn to_bytes(&self) -> Vec<u8> {
        let images = Tensor::new(vec![self.len(), self.dim()], self.images.clone())
            .expect("dataset is well-formed");
        encode(&[
            Record::from_tensor("images", &images),
            Record {
                path: "labels".into(),
                shape: vec![self.len()],
                data: RecordData::U32(self.labels.iter().map(|&l| l as u32).collect()),
            },
        ])
    }

    pub fn from_bytes(bytes: &[u8], side: usize, classes: usize) -> Result<Self> {
        let records = decode(bytes)?;
        let find = |name: &str| {
            records
                .iter()
                .find(|r| r.path == name)
                .ok_or_else(|| Error::Format {
                    offset: 0,
                    reason: format!("missing {name} record"),
                })
        };
        let images = find("images")?.to_tensor::<F>()?;
        let labels = match &find("labels")?.data {
            RecordData::U32(v) => v.iter().map(|&l| l as usize).collect::<Vec<_>>(),
            _ => {
                return Err(Error::Format {
                    offset: 0,
                    reason: "labels must be u32".into(),
                })
            }
        };
        if images.numel() != labels.len() * side * side {
            return Err(Error::shape("dataset", "images and labels disagree"));
        }
        Ok(Dataset {
            side,
            classes,
            images: images.into_data(),
            labels,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData<F> {
    pub train: Dataset<F>,
    pub test: Dataset<F>,
}

#[derive(Debug, Clone, Copy)]
struct Jitter {
    dx: f64,
    dy: f64,
    rotation: f64,
    amplitude: f64,
    background: f64,
}

impl Jitter {
    fn none() -> Self {
        Jitter {
            dx: 0.0,
            dy: 0.0,
            rotation: 0.0,
            amplitude: 1.0,
            background: 0.0,
        }
    }

    fn draw(rng: &mut Rng, scale: f64) -> Self {
        let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);
        Jitter {
            dx: u(-1.5, 1.5) * scale,
            dy: u(-1.5, 1.5) * scale,
            rotation: u(-0.2, 0.2) * scale,
            amplitude: 1.0 - u(0.0, 0.75) * scale.min(1.0),
            background: u(0.0, 0.35) * scale.min(1.0),
        }
    }
}

/// Noise-free rendering of class `class` out of `classes`.
fn pattern(side: usize, class: usize, classes: usize, j: &Jitter) -> Vec<f64> {
    let family = class % FAMILIES;
    let k = class / FAMILIES;
    let members = (classes + FAMILIES - 1 - family) / FAMILIES;
    let frac = k as f64 / members.max(1) as f64;
    let s = side as f64;
    let (cx, cy) = ((s - 1.0) / 2.0 + j.dx, (s - 1.0) / 2.0 + j.dy);
    let mut out = Vec::with_capacity(side * side);
    for row in 0..side {
        for col in 0..side {
            let (x, y) = (col as f64 - cx, row as f64 - cy);
            let v = match family {
                0 => {
                    let angle = PI * frac + j.rotation;
                    let d = -x * angle.sin() + y * angle.cos();
                    (-d * d / 2.0).exp()
                }
                1 => {
                    let phi = 2.0 * PI * frac + PI / 4.0 + j.rotation;
                    let r = s / 4.0;
                    let (bx, by) = (x - r * phi.cos(), y - r * phi.sin());
                    let sigma = s / 8.0;
                    (-(bx * bx + by * by) / (2.0 * sigma * sigma)).exp()
                }
                2 => {
                    let period = s / 2.0;
                    let phase = PI * frac;
                    let w = 2.0 * PI / period;
                    0.5 + 0.5 * (w * x + phase).sin() * (w * y + phase).sin()
                }
                _ => {
                    let radius = s * (0.15 + 0.25 * (k as f64 + 0.5) / members.max(1) as f64);
                    let d = (x * x + y * y).sqrt() - radius;
                    (-d * d / 2.0).exp()
                }
            };
            out.push(CONTRAST * (j.background + (j.amplitude - j.background) * v));
        }
    }
    out
}

fn split<F: Scalar>(spec: &SyntheticSpec, count: usize, stream: u64) -> Dataset<F> {
    let mut rng = seeded(derive(spec.seed, stream));
    let mut labels: Vec<usize> = (0..count).map(|i| i % spec.classes).collect();
    labels.shuffle(&mut rng);
    let mut images = Vec::with_capacity(count * spec.dim());
    for &label in &labels {
        let jitter = if spec.jitter > 0.0 {
            Jitter::draw(&mut rng, spec.jitter)
        } else {
            Jitter::none()
        };
        let img = pattern(spec.side, label, spec.classes, &jitter);
        let noise: Vec<f64> = if spec.jitter > 0.0 {
            normal_vec(&mut rng, img.len())
        } else {
            vec![0.0; img.len()]
        };
        images.extend(
            img.iter()
                .zip(&noise)
                .map(|(&v, &n)| F::of((v + 0.02 * spec.jitter * n).clamp(0.0, 1.0))),
        );
    }
    Dataset {
        side: spec.side,
        classes: spec.classes,
        images,
        labels,
    }
}

/// Generates the train and test splits of `spec`.
pub fn generate<F: Scalar>(spec: &SyntheticSpec) -> Result<SyntheticData<F>> {
    spec.validate()?;
    Ok(SyntheticData {
        train: split(spec, spec.train_count, 0),
        test: split(spec, spec.test_count, 1),
    })
}

/// An extra held-out split, independent of the train/test splits for
/// every distinct `stream >= 2`.
pub fn generate_split<F: Scalar>(spec: &SyntheticSpec, count: usize, stream: u64) -> Result<Dataset<F>> {
    spec.validate()?;
    Ok(split(spec, count, stream))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64, jitter: f64) -> SyntheticSpec {
        SyntheticSpec {
            train_count: 64,
            test_count: 16,
            seed,
            jitter,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn zero_jitter_gives_identical_class_members() {
        let d = generate::<f32>(&small(1, 0.0)).unwrap().train;
        for class in 0..8 {
            let members: Vec<usize> = (0..d.len()).filter(|&i| d.labels[i] == class).collect();
            assert!(members.len() > 1);
            assert!(members.iter().all(|&i| d.image(i) == d.image(members[0])));
        }
    }

    #[test]
    fn labels_exactly_uniform() {
        let d = generate::<f32>(&small(2, 1.0)).unwrap().train;
        let mut hist = [0usize; 8];
        d.labels.iter().for_each(|&l| hist[l] += 1);
        assert!(hist.iter().all(|&h| h == 8));
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let a = generate::<f32>(&small(3, 1.0)).unwrap();
        let b = generate::<f32>(&small(3, 1.0)).unwrap();
        let c = generate::<f32>(&small(4, 1.0)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.train.images, c.train.images);
    }

    #[test]
    fn pixels_in_unit_range_and_classes_distinct() {
        let d = generate::<f64>(&small(5, 0.0)).unwrap().train;
        assert!(d.images.iter().all(|v| (0.0..=1.0).contains(v)));
        let protos: Vec<&[f64]> = (0..8)
            .map(|c| d.image(d.labels.iter().position(|&l| l == c).unwrap()))
            .collect();
        for i in 0..8 {
            for j in i + 1..8 {
                let dist: f64 = protos[i].iter().zip(protos[j]).map(|(a, b)| (a - b).powi(2)).sum();
                assert!(dist > 1.0, "classes {i} and {j} too close: {dist}");
            }
        }
    }

    #[test]
    fn dataset_bytes_round_trip() {
        let d = generate::<f32>(&small(6, 1.0)).unwrap().test;
        let back = Dataset::<f32>::from_bytes(&d.to_bytes(), 16, 8).unwrap();
        assert_eq!(back, d);
        assert!(Dataset::<f64>::from_bytes(&d.to_bytes(), 16, 8).is_err());
    }
}
