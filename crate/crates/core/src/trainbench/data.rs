//! Seeded synthetic datasets.

use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

// ChaCha stream ids; one per independent use of the run seed.
const STREAM_FEATURE_SCALES: u64 = 1;
const STREAM_TRAIN: u64 = 2;
const STREAM_TEST: u64 = 3;
const STREAM_TRUTH: u64 = 4;
pub(crate) const STREAM_INIT: u64 = 5;
pub(crate) const STREAM_BATCHES: u64 = 6;

pub(crate) fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    /// Two interleaved noisy half-circles, optionally padded with distractor
    /// features. Not linearly separable.
    TwoMoons,
    /// `y = w . x + b + noise`; the optimal mean squared error is `noise^2`.
    LinearRegression,
}

impl DatasetKind {
    pub fn classes(self) -> usize {
        match self {
            Self::TwoMoons => 2,
            Self::LinearRegression => 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub n_samples: usize,
    pub n_test: usize,
    pub n_features: usize,
    /// Gaussian noise: on the moon coordinates, or on the regression target.
    pub noise: f32,
    /// Standard deviation of the log of each feature's scale. Zero keeps all
    /// features at unit scale; larger values give heavy-tailed gradients.
    pub feature_scale_spread: f32,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            kind: DatasetKind::TwoMoons,
            n_samples: 2048,
            n_test: 1024,
            n_features: 16,
            noise: 0.2,
            feature_scale_spread: 0.0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::InvalidConfig("n_samples must be positive".into()));
        }
        if self.n_features == 0 {
            return Err(Error::InvalidConfig("n_features must be positive".into()));
        }
        if self.kind == DatasetKind::TwoMoons && self.n_features < 2 {
            return Err(Error::InvalidConfig(
                "two-moons needs at least 2 features".into(),
            ));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::InvalidConfig("noise must be finite and >= 0".into()));
        }
        if !(self.feature_scale_spread >= 0.0 && self.feature_scale_spread.is_finite()) {
            return Err(Error::InvalidConfig(
                "feature_scale_spread must be finite and >= 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Classes(Vec<u32>),
    Values(Vec<f32>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Self::Classes(c) => c.len(),
            Self::Values(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Row-major `[n × features]` inputs with their targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Samples {
    pub inputs: Vec<f32>,
    pub targets: Targets,
    pub n_features: usize,
}

impl Samples {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.inputs[i * self.n_features..(i + 1) * self.n_features]
    }

    /// Copies the rows listed in `idx` into a new sample set.
    pub fn gather(&self, idx: &[usize]) -> Samples {
        let mut inputs = Vec::with_capacity(idx.len() * self.n_features);
        for &i in idx {
            inputs.extend_from_slice(self.row(i));
        }
        let targets = match &self.targets {
            Targets::Classes(c) => Targets::Classes(idx.iter().map(|&i| c[i]).collect()),
            Targets::Values(v) => Targets::Values(idx.iter().map(|&i| v[i]).collect()),
        };
        Samples {
            inputs,
            targets,
            n_features: self.n_features,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub seed: u64,
    pub train: Samples,
    pub test: Samples,
    /// Regression ground truth `(weights, bias)`.
    pub truth: Option<(Vec<f32>, f32)>,
}

fn normal(rng: &mut ChaCha8Rng) -> f32 {
    StandardNormal.sample(rng)
}

fn feature_scales(seed: u64, spec: &DatasetSpec) -> Vec<f32> {
    let mut rng = rng_for(seed, STREAM_FEATURE_SCALES);
    (0..spec.n_features)
        .map(|_| (spec.feature_scale_spread * normal(&mut rng)).exp())
        .collect()
}

fn moons(rng: &mut ChaCha8Rng, n: usize, spec: &DatasetSpec, scales: &[f32]) -> Samples {
    let d = spec.n_features;
    let mut inputs = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = (i % 2) as u32;
        let t: f32 = rng.random_range(0.0..std::f32::consts::PI);
        let (x, y) = if label == 0 {
            (t.cos(), t.sin())
        } else {
            (1.0 - t.cos(), 0.5 - t.sin())
        };
        let x = x - 0.5 + spec.noise * normal(rng);
        let y = y - 0.25 + spec.noise * normal(rng);
        inputs.push(x * scales[0]);
        inputs.push(y * scales[1]);
        for s in &scales[2..] {
            inputs.push(normal(rng) * s);
        }
        labels.push(label);
    }
    Samples {
        inputs,
        targets: Targets::Classes(labels),
        n_features: d,
    }
}

fn regression(
    rng: &mut ChaCha8Rng,
    n: usize,
    spec: &DatasetSpec,
    scales: &[f32],
    truth: &(Vec<f32>, f32),
) -> Samples {
    let d = spec.n_features;
    let mut inputs = Vec::with_capacity(n * d);
    let mut values = Vec::with_capacity(n);
    for _ in 0..n {
        let mut y = truth.1;
        for (j, s) in scales.iter().enumerate() {
            let x = normal(rng) * s;
            inputs.push(x);
            y += truth.0[j] * x;
        }
        values.push(y + spec.noise * normal(rng));
    }
    Samples {
        inputs,
        targets: Targets::Values(values),
        n_features: d,
    }
}

/// Generates the train and test sets. The result is a pure function of
/// `(seed, spec)`.
pub fn gen_dataset(seed: u64, spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let scales = feature_scales(seed, spec);
    let mut train_rng = rng_for(seed, STREAM_TRAIN);
    let mut test_rng = rng_for(seed, STREAM_TEST);
    let (train, test, truth) = match spec.kind {
        DatasetKind::TwoMoons => (
            moons(&mut train_rng, spec.n_samples, spec, &scales),
            moons(&mut test_rng, spec.n_test, spec, &scales),
            None,
        ),
        DatasetKind::LinearRegression => {
            let mut rng = rng_for(seed, STREAM_TRUTH);
            let norm = (spec.n_features as f32).sqrt();
            // Unit-variance target signal regardless of feature scales.
            let w: Vec<f32> = scales.iter().map(|s| normal(&mut rng) / (norm * s)).collect();
            let truth = (w, 0.5);
            (
                regression(&mut train_rng, spec.n_samples, spec, &scales, &truth),
                regression(&mut test_rng, spec.n_test, spec, &scales, &truth),
                Some(truth),
            )
        }
    };
    Ok(Dataset {
        spec: spec.clone(),
        seed,
        train,
        test,
        truth,
    })
}

/// Sequential minibatches over a seeded permutation, reshuffled each epoch.
pub struct BatchSampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl BatchSampler {
    pub fn new(seed: u64, n: usize) -> Self {
        let mut rng = rng_for(seed, STREAM_BATCHES);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Self {
            rng,
            order,
            cursor: 0,
        }
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}
