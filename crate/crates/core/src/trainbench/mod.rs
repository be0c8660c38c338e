//! Small-scale training harness: synthetic data, an MLP with manual
//! backprop, and per-tensor optimizer states in reference or flash mode.
//!
//! In flash mode the forward and backward passes run in FP32 on the
//! low-precision weight component, so every weight the model sees is exactly
//! representable in the storage format.

pub mod data;
pub mod memory;
pub mod mlp;

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optimizers::{
    AdamHyperParams, HyperParams, LionHyperParams, Mode, OptimizerKind, OptimizerState,
    SgdHyperParams, VarianceScheme,
};

pub use data::{gen_dataset, BatchSampler, Dataset, DatasetKind, DatasetSpec, Samples, Targets};
pub use memory::{memory_report, MemoryReport};
pub use mlp::{Activation, LossKind, MlpSpec};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LrSchedule {
    Constant,
    /// Linear warmup from 0, then cosine decay to `min_ratio * lr`.
    WarmupCosine { warmup_steps: u64, min_ratio: f32 },
}

impl LrSchedule {
    /// Learning rate for 0-based `step` of `total`.
    pub fn at(&self, base: f32, step: u64, total: u64) -> f32 {
        match *self {
            Self::Constant => base,
            Self::WarmupCosine {
                warmup_steps,
                min_ratio,
            } => {
                if step < warmup_steps {
                    return base * (step + 1) as f32 / warmup_steps as f32;
                }
                let span = total.saturating_sub(warmup_steps).max(1) as f64;
                let progress = ((step - warmup_steps) as f64 / span).min(1.0);
                let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
                (base as f64 * (min_ratio as f64 + (1.0 - min_ratio as f64) * cos)) as f32
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub hyper: HyperParams,
    pub mode: Mode,
    /// Only consulted for flash AdamW.
    #[serde(default)]
    pub variance_scheme: VarianceScheme,
    #[serde(default)]
    pub gradient_release: bool,
    /// Micro-batches summed into one optimizer step.
    #[serde(default = "one")]
    pub accumulation: usize,
    pub steps: u64,
    pub batch_size: usize,
    #[serde(default = "constant")]
    pub schedule: LrSchedule,
    pub seed: u64,
    #[serde(default)]
    pub dataset: DatasetSpec,
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

fn one() -> usize {
    1
}

fn constant() -> LrSchedule {
    LrSchedule::Constant
}

impl TrainConfig {
    pub fn optimizer(&self) -> OptimizerKind {
        self.hyper.kind()
    }

    pub fn model_spec(&self) -> MlpSpec {
        let mut dims = Vec::with_capacity(self.hidden.len() + 2);
        dims.push(self.dataset.n_features);
        dims.extend_from_slice(&self.hidden);
        let (out, loss) = match self.dataset.kind {
            DatasetKind::TwoMoons => (self.dataset.kind.classes(), LossKind::CrossEntropy),
            DatasetKind::LinearRegression => (1, LossKind::MeanSquared),
        };
        dims.push(out);
        MlpSpec {
            dims,
            activation: self.activation,
            loss,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        self.dataset.validate()?;
        self.model_spec().validate()?;
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if self.accumulation == 0 {
            return Err(Error::InvalidConfig("accumulation must be at least 1".into()));
        }
        if self.gradient_release && self.accumulation != 1 {
            return Err(Error::InvalidConfig(
                "gradient release requires accumulation = 1".into(),
            ));
        }
        if let LrSchedule::WarmupCosine { min_ratio, .. } = self.schedule {
            if !(0.0..=1.0).contains(&min_ratio) {
                return Err(Error::InvalidConfig(
                    "warmup-cosine min_ratio must lie in [0, 1]".into(),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum RunStatus {
    Completed,
    /// `step` is the 0-based step whose loss or update went non-finite.
    Diverged { step: u64, reason: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: TrainConfig,
    #[serde(flatten)]
    pub status: RunStatus,
    pub param_count: usize,
    /// Minibatch loss of every completed step.
    pub losses: Vec<f32>,
    /// Loss over the full training set at the final forward weights.
    pub final_loss: Option<f32>,
    pub test_loss: Option<f32>,
    /// Test accuracy in `[0, 1]` for classification runs.
    pub test_accuracy: Option<f32>,
    pub memory: MemoryReport,
    /// Wall time per step. Not serialized so that reports are reproducible.
    #[serde(skip)]
    pub step_seconds: Vec<f64>,
}

impl RunReport {
    pub fn diverged(&self) -> bool {
        matches!(self.status, RunStatus::Diverged { .. })
    }

    /// `step,loss` lines with a header.
    pub fn losses_csv(&self) -> String {
        let mut out = String::from("step,loss\n");
        for (i, l) in self.losses.iter().enumerate() {
            let _ = writeln!(out, "{i},{l}");
        }
        out
    }

    pub fn mean_step_seconds(&self) -> Option<f64> {
        (!self.step_seconds.is_empty())
            .then(|| self.step_seconds.iter().sum::<f64>() / self.step_seconds.len() as f64)
    }
}

/// Optimizer-state buffers of every tensor at one step, concatenated in
/// parameter order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub step: u64,
    pub momentum: Vec<f32>,
    pub variance: Option<Vec<f32>>,
}

/// Recorded state history of one run, consumed by the quantization
/// benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub optimizer: OptimizerKind,
    pub tensor_lens: Vec<usize>,
    pub snapshots: Vec<Snapshot>,
}

pub enum StepOutcome {
    Ok(f32),
    Diverged(String),
}

/// Owns the model, data and optimizer states of one run.
pub struct Trainer {
    config: TrainConfig,
    spec: MlpSpec,
    data: Dataset,
    states: Vec<OptimizerState>,
    weights: Vec<Vec<f32>>,
    sampler: BatchSampler,
    step: u64,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let spec = config.model_spec();
        let data = gen_dataset(config.seed, &config.dataset)?;
        let theta0 = spec.init(config.seed);
        let states = theta0
            .iter()
            .map(|t| OptimizerState::new(t, config.optimizer(), config.mode, config.variance_scheme))
            .collect::<Result<Vec<_>>>()?;
        let sampler = BatchSampler::new(config.seed, data.train.len());
        let mut trainer = Self {
            config,
            spec,
            data,
            states,
            weights: theta0,
            sampler,
            step: 0,
        };
        trainer.refresh_weights();
        Ok(trainer)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn dataset(&self) -> &Dataset {
        &self.data
    }

    pub fn states(&self) -> &[OptimizerState] {
        &self.states
    }

    /// The weights the next forward pass will use.
    pub fn forward_weights(&self) -> &[Vec<f32>] {
        &self.weights
    }

    pub fn master_weights(&self) -> Vec<Vec<f32>> {
        self.states.iter().map(OptimizerState::master_weights).collect()
    }

    pub fn steps_done(&self) -> u64 {
        self.step
    }

    pub fn snapshot(&self) -> Snapshot {
        let mut momentum = Vec::new();
        let mut variance = self.config.optimizer().has_variance().then(Vec::new);
        for s in &self.states {
            momentum.extend(s.momentum());
            if let (Some(v), Some(sv)) = (variance.as_mut(), s.variance()) {
                v.extend(sv);
            }
        }
        Snapshot {
            step: self.step,
            momentum,
            variance,
        }
    }

    fn refresh_weights(&mut self) {
        for (s, w) in self.states.iter().zip(self.weights.iter_mut()) {
            s.forward_weights_into(w);
        }
    }

    /// One optimizer step. Divergence leaves the trainer in an unspecified
    /// state; callers should stop.
    pub fn step(&mut self) -> StepOutcome {
        let hp = self.config.hyper.with_lr(self.config.schedule.at(
            self.config.hyper.lr(),
            self.step,
            self.config.steps,
        ));
        let batch = self.config.batch_size;
        let mut failure: Option<String> = None;

        let loss = if self.config.gradient_release {
            let samples = self.data.train.gather(&self.sampler.next_batch(batch));
            let cache = mlp::forward(&self.spec, &self.weights, &samples.inputs, batch);
            let (loss, dout) = mlp::loss_and_output_grad(&self.spec, &cache.output, &samples.targets);
            if !loss.is_finite() {
                return StepOutcome::Diverged(format!("non-finite loss {loss}"));
            }
            let states = &mut self.states;
            mlp::backward(&self.spec, &self.weights, &cache, dout, |i, g| {
                if failure.is_none() {
                    if let Err(e) = states[i].step(&g, &hp) {
                        failure = Some(e.to_string());
                    }
                }
            });
            loss
        } else {
            let mut total = 0.0_f32;
            let mut grads: Option<Vec<Vec<f32>>> = None;
            for _ in 0..self.config.accumulation {
                let samples = self.data.train.gather(&self.sampler.next_batch(batch));
                let (loss, g) = mlp::loss_and_grads(&self.spec, &self.weights, &samples);
                total += loss;
                match grads.as_mut() {
                    None => grads = Some(g),
                    Some(acc) => {
                        for (a, gi) in acc.iter_mut().zip(g) {
                            a.iter_mut().zip(gi).for_each(|(a, b)| *a += b);
                        }
                    }
                }
            }
            let mut grads = grads.expect("accumulation >= 1");
            let k = self.config.accumulation;
            if k > 1 {
                let inv = 1.0 / k as f32;
                grads.iter_mut().flatten().for_each(|g| *g *= inv);
                total *= inv;
            }
            if !total.is_finite() {
                return StepOutcome::Diverged(format!("non-finite loss {total}"));
            }
            for i in (0..self.states.len()).rev() {
                if let Err(e) = self.states[i].step(&grads[i], &hp) {
                    failure = Some(e.to_string());
                    break;
                }
            }
            total
        };

        if let Some(reason) = failure {
            return StepOutcome::Diverged(reason);
        }
        self.refresh_weights();
        self.step += 1;
        StepOutcome::Ok(loss)
    }

    /// Runs the remaining steps and evaluates. With `snapshot_every = Some(k)`
    /// the optimizer state is also recorded after every k-th step.
    pub fn run(&mut self, snapshot_every: Option<u64>) -> Result<(RunReport, Option<Trajectory>)> {
        if snapshot_every == Some(0) {
            return Err(Error::InvalidConfig("snapshot interval must be positive".into()));
        }
        let memory = memory_report(&self.states, self.config.gradient_release)?;
        let mut losses = Vec::with_capacity(self.config.steps as usize);
        let mut step_seconds = Vec::with_capacity(self.config.steps as usize);
        let mut snapshots = Vec::new();
        let mut status = RunStatus::Completed;

        while self.step < self.config.steps {
            let t0 = Instant::now();
            match self.step() {
                StepOutcome::Ok(loss) => losses.push(loss),
                StepOutcome::Diverged(reason) => {
                    status = RunStatus::Diverged {
                        step: self.step,
                        reason,
                    };
                    break;
                }
            }
            step_seconds.push(t0.elapsed().as_secs_f64());
            if snapshot_every.is_some_and(|k| self.step.is_multiple_of(k)) {
                snapshots.push(self.snapshot());
            }
        }

        let (final_loss, test_loss, test_accuracy) = if matches!(status, RunStatus::Completed) {
            let (train_loss, _) = mlp::evaluate(&self.spec, &self.weights, &self.data.train);
            let (test_loss, acc) = mlp::evaluate(&self.spec, &self.weights, &self.data.test);
            let finite = |x: f32| x.is_finite().then_some(x);
            (finite(train_loss), finite(test_loss), acc)
        } else {
            (None, None, None)
        };
        if status == RunStatus::Completed && final_loss.is_none() {
            status = RunStatus::Diverged {
                step: self.step,
                reason: "non-finite final loss".into(),
            };
        }

        let trajectory = snapshot_every.map(|_| Trajectory {
            optimizer: self.config.optimizer(),
            tensor_lens: self.states.iter().map(OptimizerState::len).collect(),
            snapshots,
        });
        let report = RunReport {
            param_count: self.spec.param_count(),
            config: self.config.clone(),
            status,
            losses,
            final_loss,
            test_loss,
            test_accuracy,
            memory,
            step_seconds,
        };
        Ok((report, trajectory))
    }
}

/// Runs `config` to completion.
pub fn train(config: TrainConfig) -> Result<RunReport> {
    Ok(Trainer::new(config)?.run(None)?.0)
}

/// Runs `config` and records optimizer state every `every` steps.
pub fn train_recording(config: TrainConfig, every: u64) -> Result<(RunReport, Trajectory)> {
    let (report, trajectory) = Trainer::new(config)?.run(Some(every))?;
    Ok((report, trajectory.expect("recording requested")))
}

/// Named configurations used by the test suites and the command line.
pub mod presets {
    use super::*;

    /// Data-rich settings: enough samples that the final loss sits near the
    /// noise floor instead of measuring how far memorization got.
    fn dataset(kind: DatasetKind) -> DatasetSpec {
        let base = DatasetSpec {
            n_samples: 8192,
            n_features: 4,
            ..DatasetSpec::default()
        };
        match kind {
            DatasetKind::TwoMoons => DatasetSpec { noise: 0.3, ..base },
            DatasetKind::LinearRegression => DatasetSpec {
                kind,
                noise: 0.1,
                ..base
            },
        }
    }

    pub fn hyper(kind: OptimizerKind) -> HyperParams {
        match kind {
            OptimizerKind::Sgd => HyperParams::Sgd(SgdHyperParams {
                lr: 0.02,
                momentum: 0.9,
                weight_decay: 0.0,
            }),
            OptimizerKind::AdamW => HyperParams::AdamW(AdamHyperParams {
                lr: 2e-3,
                beta2: 0.95,
                weight_decay: 1e-2,
                ..AdamHyperParams::default()
            }),
            OptimizerKind::Lion => HyperParams::Lion(LionHyperParams {
                lr: 1e-3,
                weight_decay: 1e-2,
                ..LionHyperParams::default()
            }),
        }
    }

    /// The paired-run configuration: 2000 steps, two hidden layers.
    pub fn parity(kind: OptimizerKind, data: DatasetKind, mode: Mode, seed: u64) -> TrainConfig {
        TrainConfig {
            hyper: hyper(kind),
            mode,
            variance_scheme: VarianceScheme::Companded,
            gradient_release: false,
            accumulation: 1,
            steps: 2000,
            batch_size: 64,
            schedule: LrSchedule::WarmupCosine {
                warmup_steps: 100,
                min_ratio: 0.0,
            },
            seed,
            dataset: dataset(data),
            hidden: vec![64, 64],
            activation: Activation::Tanh,
        }
    }

    /// Flash AdamW on heavy-tailed features at a high learning rate; run with
    /// both variance schemes to compare.
    pub fn divergence_demo(scheme: VarianceScheme, seed: u64) -> TrainConfig {
        TrainConfig {
            hyper: HyperParams::AdamW(AdamHyperParams {
                lr: 1e-2,
                ..AdamHyperParams::default()
            }),
            mode: Mode::Flash,
            variance_scheme: scheme,
            gradient_release: false,
            accumulation: 1,
            steps: 1000,
            batch_size: 64,
            schedule: LrSchedule::Constant,
            seed,
            dataset: DatasetSpec {
                kind: DatasetKind::LinearRegression,
                noise: 0.1,
                feature_scale_spread: 2.0,
                ..DatasetSpec::default()
            },
            hidden: vec![64, 64],
            activation: Activation::Tanh,
        }
    }

    /// Full-precision run whose optimizer states feed the quantization
    /// benchmark.
    pub fn quant_bench(kind: OptimizerKind, seed: u64) -> TrainConfig {
        TrainConfig {
            steps: 1000,
            schedule: LrSchedule::Constant,
            dataset: DatasetSpec {
                feature_scale_spread: 1.0,
                ..DatasetSpec::default()
            },
            ..parity(kind, DatasetKind::TwoMoons, Mode::Reference, seed)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(kind: OptimizerKind, mode: Mode) -> TrainConfig {
        TrainConfig {
            steps: 30,
            hidden: vec![8],
            dataset: DatasetSpec {
                n_samples: 256,
                n_test: 64,
                n_features: 4,
                ..DatasetSpec::default()
            },
            ..presets::parity(kind, DatasetKind::TwoMoons, mode, 3)
        }
    }

    #[test]
    fn schedule_shapes() {
        let s = LrSchedule::WarmupCosine {
            warmup_steps: 10,
            min_ratio: 0.1,
        };
        assert!((s.at(1.0, 0, 110) - 0.1).abs() < 1e-6);
        assert_eq!(s.at(1.0, 9, 110), 1.0);
        assert_eq!(s.at(1.0, 10, 110), 1.0);
        assert!((s.at(1.0, 110, 110) - 0.1).abs() < 1e-6);
        assert_eq!(LrSchedule::Constant.at(0.3, 7, 8), 0.3);
    }

    #[test]
    fn release_requires_single_microbatch() {
        let mut c = small(OptimizerKind::Sgd, Mode::Flash);
        c.gradient_release = true;
        c.accumulation = 2;
        assert!(matches!(train(c), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn reports_are_reproducible() {
        let a = train(small(OptimizerKind::AdamW, Mode::Flash)).unwrap();
        let b = train(small(OptimizerKind::AdamW, Mode::Flash)).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        assert_eq!(a.losses.len(), 30);
        assert_eq!(a.memory.total, 7.0);
        assert!(a.test_accuracy.is_some());
    }

    #[test]
    fn flash_forward_weights_are_bf16() {
        let mut t = Trainer::new(small(OptimizerKind::Lion, Mode::Flash)).unwrap();
        for _ in 0..5 {
            assert!(matches!(t.step(), StepOutcome::Ok(_)));
        }
        for w in t.forward_weights().iter().flatten() {
            assert_eq!(w.to_bits() & 0xffff, 0);
        }
    }

    #[test]
    fn accumulation_averages_microbatches() {
        let mut c = small(OptimizerKind::Sgd, Mode::Reference);
        c.accumulation = 3;
        let r = train(c).unwrap();
        assert_eq!(r.losses.len(), 30);
        assert_eq!(r.status, RunStatus::Completed);
    }

    #[test]
    fn huge_learning_rate_reports_divergence() {
        let mut c = small(OptimizerKind::Sgd, Mode::Reference);
        c.dataset.kind = DatasetKind::LinearRegression;
        c.hyper = c.hyper.with_lr(50.0);
        c.schedule = LrSchedule::Constant;
        let r = train(c).unwrap();
        assert!(r.diverged());
        assert!(r.losses.len() < 30);
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"status\":\"diverged\""));
    }

    #[test]
    fn recording_snapshots() {
        let (_, traj) = train_recording(small(OptimizerKind::AdamW, Mode::Reference), 10).unwrap();
        assert_eq!(traj.snapshots.len(), 3);
        assert_eq!(traj.snapshots[0].step, 10);
        let n: usize = traj.tensor_lens.iter().sum();
        assert_eq!(traj.snapshots[2].variance.as_ref().unwrap().len(), n);
    }

    #[test]
    fn config_json_roundtrip() {
        let c = presets::divergence_demo(VarianceScheme::Linear, 0);
        let s = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<TrainConfig>(&s).unwrap(), c);
    }
}
