//! Desk-scale training harness for the low-precision schemes: plain
//! reduced-precision training, widened reduced-precision networks, and
//! teacher-student distillation with a frozen full-precision teacher.

pub mod checkpoint;
pub mod data;
pub mod loss;
pub mod net;

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{FeatureMap, Matrix};
use crate::netspec::{self, Layer, NetworkSpec, PoolKind};
use crate::quant::QuantSpec;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use data::{make_dataset, Dataset, DatasetSpec};
pub use loss::{cross_entropy, distill_loss, softmax};
pub use net::{ForwardCache, Gradients, ToyNet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Full precision, width 1.
    Baseline,
    /// Reduced precision, width 1.
    LowPrecision,
    /// Reduced precision on a widened network.
    Wrpn,
    /// Reduced precision distilled from a full-precision teacher.
    Apprentice,
    /// Widened, reduced precision, distilled.
    WrpnApprentice,
}

impl Scheme {
    pub const ALL: [Scheme; 5] = [
        Scheme::Baseline,
        Scheme::LowPrecision,
        Scheme::Wrpn,
        Scheme::Apprentice,
        Scheme::WrpnApprentice,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::Baseline => "baseline",
            Scheme::LowPrecision => "low_precision",
            Scheme::Wrpn => "wrpn",
            Scheme::Apprentice => "apprentice",
            Scheme::WrpnApprentice => "wrpn_apprentice",
        }
    }

    pub fn needs_teacher(self) -> bool {
        matches!(self, Scheme::Apprentice | Scheme::WrpnApprentice)
    }

    pub fn widened(self) -> bool {
        matches!(self, Scheme::Wrpn | Scheme::WrpnApprentice)
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scheme::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::InvalidSpec(format!("unknown scheme `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Epoch after which the learning rate is multiplied by `lr_decay`.
    pub lr_step_epoch: usize,
    pub lr_decay: f64,
    pub seed: u64,
    pub dataset: DatasetSpec,
    /// Hard-label weight of the distillation objective.
    pub alpha: f64,
    /// Soft-label weight of the distillation objective.
    pub beta: f64,
    pub temperature: f64,
    /// Precision used by the reduced-precision schemes.
    pub low_precision: QuantSpec,
    pub widen_factor: f64,
    pub widen_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 15,
            batch_size: 32,
            learning_rate: 0.1,
            momentum: 0.9,
            lr_step_epoch: 10,
            lr_decay: 0.1,
            seed: 1,
            dataset: DatasetSpec {
                classes: 4,
                sigma: 0.3,
                ..DatasetSpec::default()
            },
            alpha: 1.0,
            beta: 0.5,
            temperature: 1.0,
            low_precision: QuantSpec::new(2, 8).expect("valid precision"),
            widen_factor: 2.0,
            widen_fraction: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidSpec("epochs and batch size must be positive".into()));
        }
        let positive = [
            ("learning_rate", self.learning_rate),
            ("temperature", self.temperature),
            ("lr_decay", self.lr_decay),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidSpec(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidSpec(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if self.alpha < 0.0 || self.beta < 0.0 {
            return Err(Error::InvalidSpec("loss weights must be non-negative".into()));
        }
        Ok(())
    }

    fn lr_at(&self, epoch: usize) -> f64 {
        if epoch >= self.lr_step_epoch {
            self.learning_rate * self.lr_decay
        } else {
            self.learning_rate
        }
    }
}

/// The fixed toy CNN for a dataset: two 3x3 conv blocks with 2x2 max
/// pooling, then a linear classifier.
pub fn toy_topology(spec: &DatasetSpec) -> Result<NetworkSpec> {
    let mut layers = vec![
        Layer::Input {
            height: spec.height,
            width: spec.width,
            channels: spec.channels,
        },
        Layer::conv("c1", 8, 3, 1, 1),
        Layer::Relu,
    ];
    if spec.height >= 4 && spec.width >= 4 {
        layers.push(Layer::Pool {
            pool: PoolKind::Max,
            k: 2,
            stride: 2,
        });
    }
    layers.extend([
        Layer::conv("c2", 16, 3, 1, 1),
        Layer::Relu,
    ]);
    if spec.height >= 8 && spec.width >= 8 {
        layers.push(Layer::Pool {
            pool: PoolKind::Max,
            k: 2,
            stride: 2,
        });
    }
    layers.push(Layer::fc("fc", spec.classes));
    NetworkSpec::new("toynet", layers)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub scheme: Scheme,
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn final_accuracy(&self) -> f64 {
        self.epochs.last().map_or(0.0, |e| e.eval_accuracy)
    }

    /// First (1-based) epoch whose eval accuracy reaches `threshold`.
    pub fn epochs_to_threshold(&self, threshold: f64) -> Option<usize> {
        self.epochs
            .iter()
            .find(|e| e.eval_accuracy >= threshold)
            .map(|e| e.epoch)
    }

    /// One JSON object per epoch, newline-terminated.
    pub fn to_json_lines(&self) -> String {
        self.epochs
            .iter()
            .map(|e| serde_json::to_string(e).expect("plain record serializes") + "\n")
            .collect()
    }

    pub fn from_json_lines(scheme: Scheme, seed: u64, text: &str) -> Result<Self> {
        let epochs = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| Error::Syntax {
                    line: i + 1,
                    message: e.to_string(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(TrainHistory {
            scheme,
            seed,
            epochs,
        })
    }
}

/// Fraction of rows whose arg-max matches the label.
pub fn accuracy(logits: &Matrix<f64>, labels: &[usize]) -> f64 {
    let correct = (0..logits.rows())
        .filter(|&i| {
            let row = logits.row(i);
            let best = row
                .iter()
                .enumerate()
                .fold(0, |b, (j, &v)| if v > row[b] { j } else { b });
            best == labels[i]
        })
        .count();
    correct as f64 / logits.rows().max(1) as f64
}

pub fn evaluate(net: &ToyNet, x: &[FeatureMap<f64>], y: &[usize]) -> Result<f64> {
    Ok(accuracy(&net.predict(x)?, y))
}

const INIT_STREAM: u64 = 0x0001_0000_0000;
const SHUFFLE_STREAM: u64 = 0x0002_0000_0000;

fn run(
    config: &TrainConfig,
    scheme: Scheme,
    topology: NetworkSpec,
    quant: QuantSpec,
    width_factor: f64,
    teacher: Option<&ToyNet>,
) -> Result<(ToyNet, TrainHistory)> {
    config.validate()?;
    let data = make_dataset(&config.dataset, config.seed)?;
    let mut net = ToyNet::new(topology, quant, width_factor, config.seed ^ INIT_STREAM)?;

    let teacher_logits = match teacher {
        Some(t) => {
            if t.input_shape() != net.input_shape() || t.classes() != net.classes() {
                return Err(Error::ShapeMismatch(
                    "teacher input or class count differs from student".into(),
                ));
            }
            Some(t.predict(&data.train_x)?)
        }
        None => None,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ SHUFFLE_STREAM);
    let mut velocity: Vec<Vec<f64>> = net.params().iter().map(|p| vec![0.0; p.len()]).collect();
    let mut order: Vec<usize> = (0..data.train_x.len()).collect();
    let classes = net.classes();
    let mut history = TrainHistory {
        scheme,
        seed: config.seed,
        epochs: Vec::with_capacity(config.epochs),
    };

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let lr = config.lr_at(epoch);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let xb: Vec<FeatureMap<f64>> = chunk.iter().map(|&i| data.train_x[i].clone()).collect();
            let yb: Vec<usize> = chunk.iter().map(|&i| data.train_y[i]).collect();
            let (logits, cache) = net.forward(&xb)?;
            let (loss, dlogits) = match &teacher_logits {
                Some(t) => {
                    let rows: Vec<f64> = chunk.iter().flat_map(|&i| t.row(i).to_vec()).collect();
                    let tb = Matrix::from_vec(chunk.len(), classes, rows)?;
                    distill_loss(&logits, Some(&tb), &yb, config.alpha, config.beta, config.temperature)?
                }
                None => cross_entropy(&logits, &yb)?,
            };
            loss_sum += loss * chunk.len() as f64;
            let grads = net.backward(&cache, &dlogits)?;
            for ((p, v), g) in net.params_mut().iter_mut().zip(&mut velocity).zip(&grads) {
                for ((w, vi), gi) in p.iter_mut().zip(v.iter_mut()).zip(g) {
                    *vi = config.momentum * *vi + gi;
                    *w -= lr * *vi;
                }
            }
        }
        let train_loss = loss_sum / order.len() as f64;
        if !train_loss.is_finite() {
            return Err(Error::Invariant(format!("training loss diverged at epoch {}", epoch + 1)));
        }
        history.epochs.push(EpochRecord {
            epoch: epoch + 1,
            train_loss,
            eval_accuracy: evaluate(&net, &data.eval_x, &data.eval_y)?,
        });
    }
    Ok((net, history))
}

/// Trains one scheme on the configured synthetic dataset.
///
/// Distillation schemes need a full-precision `teacher` whose input and
/// class count match; it is never updated.
pub fn train(config: &TrainConfig, scheme: Scheme, teacher: Option<&ToyNet>) -> Result<(ToyNet, TrainHistory)> {
    let base = toy_topology(&config.dataset)?;
    if scheme.needs_teacher() {
        match teacher {
            None => return Err(Error::MissingTeacher(scheme.to_string())),
            Some(t) if !t.quant().is_full_precision() => {
                return Err(Error::InvalidSpec("teacher must be full precision".into()))
            }
            _ => {}
        }
    }
    let (topology, width) = if scheme.widened() {
        (
            netspec::widen(&base, config.widen_factor, config.widen_fraction)?,
            config.widen_factor,
        )
    } else {
        (base, 1.0)
    };
    let quant = match scheme {
        Scheme::Baseline => QuantSpec::FULL_PRECISION,
        _ => config.low_precision,
    };
    let teacher = if scheme.needs_teacher() { teacher } else { None };
    run(config, scheme, topology, quant, width, teacher)
}

/// Trains the distillation teacher: the toy topology widened 2x over every
/// conv layer, at full precision.
pub fn train_teacher(config: &TrainConfig) -> Result<(ToyNet, TrainHistory)> {
    let topology = netspec::widen(&toy_topology(&config.dataset)?, 2.0, 1.0)?;
    run(config, Scheme::Baseline, topology, QuantSpec::FULL_PRECISION, 2.0, None)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> TrainConfig {
        TrainConfig {
            epochs: 3,
            dataset: DatasetSpec {
                classes: 3,
                samples_per_class: 40,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn scheme_names_round_trip() {
        for s in Scheme::ALL {
            assert_eq!(s.as_str().parse::<Scheme>().unwrap(), s);
        }
        assert!("nope".parse::<Scheme>().is_err());
    }

    #[test]
    fn apprentice_requires_teacher() {
        for s in [Scheme::Apprentice, Scheme::WrpnApprentice] {
            assert_eq!(train(&quick(), s, None).unwrap_err(), Error::MissingTeacher(s.to_string()));
        }
        let (student, _) = train(&quick(), Scheme::LowPrecision, None).unwrap();
        assert!(matches!(
            train(&quick(), Scheme::Apprentice, Some(&student)),
            Err(Error::InvalidSpec(_))
        ));
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = quick();
        let (t, _) = train_teacher(&cfg).unwrap();
        for s in Scheme::ALL {
            let (n1, h1) = train(&cfg, s, Some(&t)).unwrap();
            let (n2, h2) = train(&cfg, s, Some(&t)).unwrap();
            assert_eq!(h1, h2);
            assert_eq!(n1.params(), n2.params());
            assert_eq!(h1.epochs.len(), cfg.epochs);
            assert!(h1.epochs.iter().all(|e| (0.0..=1.0).contains(&e.eval_accuracy)));
        }
    }

    #[test]
    fn wrpn_widens_the_student() {
        let (n, _) = train(&quick(), Scheme::Wrpn, None).unwrap();
        assert_eq!(n.width_factor(), 2.0);
        assert_eq!(n.param_dims()[0], vec![3, 3, 1, 16]);
        assert_eq!(n.quant(), QuantSpec::new(2, 8).unwrap());
    }

    #[test]
    fn noiseless_data_is_learned_perfectly() {
        let cfg = TrainConfig {
            epochs: 10,
            dataset: DatasetSpec {
                classes: 4,
                samples_per_class: 50,
                sigma: 0.0,
                ..Default::default()
            },
            ..Default::default()
        };
        let (_, h) = train(&cfg, Scheme::Baseline, None).unwrap();
        assert_eq!(h.final_accuracy(), 1.0);
    }

    #[test]
    fn history_helpers() {
        let h = TrainHistory {
            scheme: Scheme::Baseline,
            seed: 0,
            epochs: vec![
                EpochRecord { epoch: 1, train_loss: 1.0, eval_accuracy: 0.5 },
                EpochRecord { epoch: 2, train_loss: 0.5, eval_accuracy: 0.92 },
                EpochRecord { epoch: 3, train_loss: 0.4, eval_accuracy: 0.91 },
            ],
        };
        assert_eq!(h.epochs_to_threshold(0.9), Some(2));
        assert_eq!(h.epochs_to_threshold(0.95), None);
        let text = h.to_json_lines();
        assert_eq!(text.lines().count(), 3);
        assert_eq!(TrainHistory::from_json_lines(Scheme::Baseline, 0, &text).unwrap(), h);
    }
}
