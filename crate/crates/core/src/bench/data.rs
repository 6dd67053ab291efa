//! Synthetic labeled datasets: Gaussian blobs, two moons, and spirals, with
//! a label-preserving shift transform (rotation about the centroid plus
//! translation and extra noise) for out-of-distribution evaluation.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::streams::{stream, StreamId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    Blobs,
    Moons,
    Spiral,
}

/// Label-preserving test-set transform.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ShiftSpec {
    /// Rotation angle about the test-set centroid, radians.
    pub rotation_radians: f64,
    pub translation: Vec<f64>,
    /// Std-dev of additional isotropic Gaussian noise.
    pub extra_noise: f64,
}

impl Default for ShiftSpec {
    fn default() -> Self {
        // 30° rotation: a controllable analog of domain shift.
        ShiftSpec {
            rotation_radians: std::f64::consts::PI / 6.0,
            translation: vec![0.0, 0.0],
            extra_noise: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub generator: Generator,
    pub n_points: usize,
    pub n_features: usize,
    pub classes: usize,
    pub sigma_data: f64,
    pub seed: u64,
    pub shift: ShiftSpec,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            generator: Generator::Blobs,
            n_points: 400,
            n_features: 2,
            classes: 2,
            sigma_data: 0.5,
            seed: 1,
            shift: ShiftSpec::default(),
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least 2 classes, got {}",
                self.classes
            )));
        }
        if self.n_points < self.classes * 10 {
            return Err(Error::InvalidArgument(format!(
                "need at least {} points for {} classes, got {}",
                self.classes * 10,
                self.classes,
                self.n_points
            )));
        }
        if !self.sigma_data.is_finite() || self.sigma_data < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "sigma_data must be ≥ 0, got {}",
                self.sigma_data
            )));
        }
        match self.generator {
            Generator::Blobs => {
                if self.n_features < 2 {
                    return Err(Error::InvalidArgument(
                        "blobs need at least 2 features (centers live in the first two)".into(),
                    ));
                }
            }
            Generator::Moons => {
                if self.n_features != 2 || self.classes != 2 {
                    return Err(Error::InvalidArgument(
                        "moons are a 2-feature, 2-class generator".into(),
                    ));
                }
            }
            Generator::Spiral => {
                if self.n_features != 2 {
                    return Err(Error::InvalidArgument(
                        "spirals are a 2-feature generator".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

pub type Example = (Vec<f64>, usize);

#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<Example>,
    pub test: Vec<Example>,
}

impl Dataset {
    pub fn all(&self) -> impl Iterator<Item = &Example> {
        self.train.iter().chain(self.test.iter())
    }
}

/// Generate a labeled dataset with an 80/20 train/test split. Labels are
/// assigned round-robin, so class balance is exact up to one point; the
/// split order is a seeded shuffle, deterministic per spec.
pub fn generate(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = stream(spec.seed, StreamId::DatasetGen);
    let mut points: Vec<Example> = (0..spec.n_points)
        .map(|i| {
            let class = i % spec.classes;
            let x = match spec.generator {
                Generator::Blobs => blob_point(spec, class, &mut rng),
                Generator::Moons => moon_point(spec, class, &mut rng),
                Generator::Spiral => spiral_point(spec, class, &mut rng),
            };
            (x, class)
        })
        .collect();
    for i in (1..points.len()).rev() {
        let j = rng.random_range(0..=i);
        points.swap(i, j);
    }
    let n_train = spec.n_points * 8 / 10;
    let test = points.split_off(n_train);
    Ok(Dataset {
        train: points,
        test,
    })
}

/// Class centers for the blob generator: evenly spaced on the unit circle,
/// so two classes sit at (±1, 0).
pub fn blob_centers(classes: usize) -> Vec<[f64; 2]> {
    (0..classes)
        .map(|k| {
            let angle = std::f64::consts::TAU * k as f64 / classes as f64;
            [angle.cos(), angle.sin()]
        })
        .collect()
}

fn blob_point(spec: &DatasetSpec, class: usize, rng: &mut impl Rng) -> Vec<f64> {
    let center = blob_centers(spec.classes)[class];
    (0..spec.n_features)
        .map(|d| {
            let mean = if d < 2 { center[d] } else { 0.0 };
            mean + spec.sigma_data * rng.sample::<f64, _>(StandardNormal)
        })
        .collect()
}

fn moon_point(spec: &DatasetSpec, class: usize, rng: &mut impl Rng) -> Vec<f64> {
    let t = rng.random_range(0.0..std::f64::consts::PI);
    let (cx, cy) = if class == 0 {
        (t.cos(), t.sin())
    } else {
        (1.0 - t.cos(), 0.5 - t.sin())
    };
    vec![
        cx + spec.sigma_data * rng.sample::<f64, _>(StandardNormal),
        cy + spec.sigma_data * rng.sample::<f64, _>(StandardNormal),
    ]
}

fn spiral_point(spec: &DatasetSpec, class: usize, rng: &mut impl Rng) -> Vec<f64> {
    let t: f64 = rng.random_range(0.05..1.0);
    let angle =
        t * 3.0 * std::f64::consts::PI + std::f64::consts::TAU * class as f64 / spec.classes as f64;
    vec![
        t * angle.cos() + spec.sigma_data * rng.sample::<f64, _>(StandardNormal),
        t * angle.sin() + spec.sigma_data * rng.sample::<f64, _>(StandardNormal),
    ]
}

/// Apply the shift transform to one point: rotate about `centroid`, then
/// translate; the caller adds any extra noise.
pub fn shift_point(x: &[f64], shift: &ShiftSpec, centroid: &[f64]) -> Vec<f64> {
    let mut out = x.to_vec();
    if x.len() >= 2 {
        let (s, c) = shift.rotation_radians.sin_cos();
        let dx = x[0] - centroid[0];
        let dy = x[1] - centroid[1];
        out[0] = centroid[0] + c * dx - s * dy;
        out[1] = centroid[1] + s * dx + c * dy;
    }
    for (o, t) in out.iter_mut().zip(shift.translation.iter()) {
        *o += t;
    }
    out
}

pub fn centroid(points: &[Example]) -> Vec<f64> {
    let dim = points.first().map(|(x, _)| x.len()).unwrap_or(0);
    let mut c = vec![0.0; dim];
    for (x, _) in points {
        for (ci, xi) in c.iter_mut().zip(x.iter()) {
            *ci += xi;
        }
    }
    for ci in &mut c {
        *ci /= points.len() as f64;
    }
    c
}
