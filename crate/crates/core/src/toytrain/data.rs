//! Synthetic Gaussian-blob image classification data.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::FeatureMap;

/// Seed for the class-mean images. Fixed so the classes do not depend on
/// the run seed.
pub const CLASS_MEAN_SEED: u64 = 0x5eed_c1a5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub classes: usize,
    pub samples_per_class: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Per-pixel noise standard deviation around the class mean.
    pub sigma: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            classes: 10,
            samples_per_class: 200,
            height: 8,
            width: 8,
            channels: 1,
            sigma: 0.5,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::InvalidSpec("dataset needs at least 2 classes".into()));
        }
        if self.samples_per_class < 5 {
            return Err(Error::InvalidSpec(
                "dataset needs at least 5 samples per class for an 80/20 split".into(),
            ));
        }
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return Err(Error::InvalidSpec("image dims must be at least 1".into()));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidSpec(format!("sigma {} must be >= 0", self.sigma)));
        }
        Ok(())
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn total(&self) -> usize {
        self.classes * self.samples_per_class
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub train_x: Vec<FeatureMap<f64>>,
    pub train_y: Vec<usize>,
    pub eval_x: Vec<FeatureMap<f64>>,
    pub eval_y: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.train_x.len() + self.eval_x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Class-mean images, uniform in `[0.1, 0.9]` per pixel.
pub fn class_means(spec: &DatasetSpec) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(CLASS_MEAN_SEED);
    (0..spec.classes)
        .map(|_| (0..spec.pixels()).map(|_| rng.random_range(0.1..0.9)).collect())
        .collect()
}

/// Draws `samples_per_class` noisy copies of each class mean and splits
/// every class 80/20 into train and eval, shuffled by `seed`.
pub fn make_dataset(spec: &DatasetSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let means = class_means(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let n_train = spec.samples_per_class * 4 / 5;

    let mut train = Vec::with_capacity(spec.classes * n_train);
    let mut eval = Vec::with_capacity(spec.total() - spec.classes * n_train);
    for (label, mean) in means.iter().enumerate() {
        for i in 0..spec.samples_per_class {
            let pixels: Vec<f64> = mean
                .iter()
                .map(|&m| m + spec.sigma * noise.sample(&mut rng))
                .collect();
            let img = FeatureMap::from_vec(spec.height, spec.width, spec.channels, pixels)?;
            if i < n_train {
                train.push((img, label));
            } else {
                eval.push((img, label));
            }
        }
    }
    train.shuffle(&mut rng);
    eval.shuffle(&mut rng);
    let (train_x, train_y) = train.into_iter().unzip();
    let (eval_x, eval_y) = eval.into_iter().unzip();
    Ok(Dataset {
        spec: *spec,
        train_x,
        train_y,
        eval_x,
        eval_y,
    })
}
