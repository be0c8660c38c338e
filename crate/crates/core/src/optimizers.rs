//! SGD, AdamW and Lion in reference (FP32 state) and compressed form.
//!
//! The compressed ("flash") variants wrap the unchanged update rule with a
//! prologue that dequantizes momentum/variance and reconstructs the master
//! weight, and an epilogue that re-quantizes the state and re-splits the
//! weight. The whole step is one pass over the tensor in group-sized chunks:
//! every element is read, updated and written back exactly once.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::floatcodec::{CorrectionWidth, LowPrecisionFormat, SplitTensor};
use crate::statequant::{GroupSpec, QuantizedState, StateKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    AdamW,
    Lion,
}

impl OptimizerKind {
    pub const fn name(self) -> &'static str {
        match self {
            Self::Sgd => "sgd",
            Self::AdamW => "adamw",
            Self::Lion => "lion",
        }
    }

    pub const fn has_variance(self) -> bool {
        matches!(self, Self::AdamW)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Reference,
    Flash,
}

/// How the flash AdamW variance buffer is quantized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VarianceScheme {
    #[default]
    Companded,
    Linear,
}

impl VarianceScheme {
    pub const fn state_kind(self) -> StateKind {
        match self {
            Self::Companded => StateKind::Variance,
            Self::Linear => StateKind::LinearUnsigned,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdHyperParams {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
}

impl Default for SgdHyperParams {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHyperParams {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamHyperParams {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LionHyperParams {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub weight_decay: f32,
}

impl Default for LionHyperParams {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.99,
            weight_decay: 0.0,
        }
    }
}

fn check_beta(name: &str, b: f32) -> Result<()> {
    if !(0.0..1.0).contains(&b) {
        return Err(Error::InvalidHyperParams(format!("{name} must lie in [0, 1), got {b}")));
    }
    Ok(())
}

fn check_common(lr: f32, weight_decay: f32) -> Result<()> {
    if !lr.is_finite() {
        return Err(Error::InvalidHyperParams(format!("lr must be finite, got {lr}")));
    }
    if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
        return Err(Error::InvalidHyperParams(format!(
            "weight_decay must be finite and >= 0, got {weight_decay}"
        )));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "optimizer", rename_all = "lowercase")]
pub enum HyperParams {
    Sgd(SgdHyperParams),
    AdamW(AdamHyperParams),
    Lion(LionHyperParams),
}

impl HyperParams {
    pub fn default_for(kind: OptimizerKind) -> Self {
        match kind {
            OptimizerKind::Sgd => Self::Sgd(SgdHyperParams::default()),
            OptimizerKind::AdamW => Self::AdamW(AdamHyperParams::default()),
            OptimizerKind::Lion => Self::Lion(LionHyperParams::default()),
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        match self {
            Self::Sgd(_) => OptimizerKind::Sgd,
            Self::AdamW(_) => OptimizerKind::AdamW,
            Self::Lion(_) => OptimizerKind::Lion,
        }
    }

    pub fn lr(&self) -> f32 {
        match self {
            Self::Sgd(h) => h.lr,
            Self::AdamW(h) => h.lr,
            Self::Lion(h) => h.lr,
        }
    }

    /// The same hyperparameters with the learning rate replaced.
    pub fn with_lr(mut self, lr: f32) -> Self {
        match &mut self {
            Self::Sgd(h) => h.lr = lr,
            Self::AdamW(h) => h.lr = lr,
            Self::Lion(h) => h.lr = lr,
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Sgd(h) => {
                check_common(h.lr, h.weight_decay)?;
                check_beta("momentum", h.momentum)
            }
            Self::AdamW(h) => {
                check_common(h.lr, h.weight_decay)?;
                check_beta("beta1", h.beta1)?;
                check_beta("beta2", h.beta2)?;
                if !(h.eps > 0.0 && h.eps.is_finite()) {
                    return Err(Error::InvalidHyperParams(format!(
                        "eps must be finite and > 0, got {}",
                        h.eps
                    )));
                }
                Ok(())
            }
            Self::Lion(h) => {
                check_common(h.lr, h.weight_decay)?;
                check_beta("beta1", h.beta1)?;
                check_beta("beta2", h.beta2)
            }
        }
    }
}

// Elementwise update rules shared by both storage modes.

#[inline]
fn sgd_update(theta: f32, m: f32, g: f32, h: &SgdHyperParams) -> (f32, f32) {
    let m = h.momentum * m + g;
    let theta = theta - h.lr * (m + h.weight_decay * theta);
    (theta, m)
}

#[derive(Clone, Copy)]
struct BiasCorrection {
    first: f32,
    second: f32,
}

impl BiasCorrection {
    fn at(h: &AdamHyperParams, step: u64) -> Self {
        let t = step as f64;
        Self {
            first: (1.0 - (h.beta1 as f64).powf(t)) as f32,
            second: (1.0 - (h.beta2 as f64).powf(t)) as f32,
        }
    }
}

#[inline]
fn adamw_update(
    theta: f32,
    m: f32,
    v: f32,
    g: f32,
    h: &AdamHyperParams,
    bc: BiasCorrection,
) -> (f32, f32, f32) {
    let m = h.beta1 * m + (1.0 - h.beta1) * g;
    let v = h.beta2 * v + (1.0 - h.beta2) * g * g;
    let m_hat = m / bc.first;
    let v_hat = v / bc.second;
    let theta = theta - h.lr * (m_hat / (v_hat.sqrt() + h.eps) + h.weight_decay * theta);
    (theta, m, v)
}

/// `sign` with `sign(0) = 0`.
#[inline]
fn sign0(x: f32) -> f32 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[inline]
fn lion_update(theta: f32, m: f32, g: f32, h: &LionHyperParams) -> (f32, f32) {
    let u = sign0(h.beta1 * m + (1.0 - h.beta1) * g);
    let m = h.beta2 * m + (1.0 - h.beta2) * g;
    let theta = theta - h.lr * (u + h.weight_decay * theta);
    (theta, m)
}

fn check_grad(expected: usize, grad: &[f32]) -> Result<()> {
    if grad.len() != expected {
        return Err(Error::LengthMismatch {
            expected,
            found: grad.len(),
        });
    }
    if let Some((index, &value)) = grad.iter().enumerate().find(|(_, g)| !g.is_finite()) {
        return Err(Error::NonFiniteGradient { index, value });
    }
    Ok(())
}

fn check_kind(state: OptimizerKind, hp: &HyperParams) -> Result<()> {
    if state != hp.kind() {
        return Err(Error::KindMismatch {
            expected: state.name(),
            found: hp.kind().name(),
        });
    }
    hp.validate()
}

/// Full-precision optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceState {
    kind: OptimizerKind,
    pub weights: Vec<f32>,
    pub momentum: Vec<f32>,
    pub variance: Option<Vec<f32>>,
    pub step: u64,
}

impl ReferenceState {
    pub fn new(theta0: &[f32], kind: OptimizerKind) -> Result<Self> {
        if let Some((index, &value)) = theta0.iter().enumerate().find(|(_, x)| !x.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "initial weight {index} is {value}"
            )));
        }
        Ok(Self {
            kind,
            weights: theta0.to_vec(),
            momentum: vec![0.0; theta0.len()],
            variance: kind.has_variance().then(|| vec![0.0; theta0.len()]),
            step: 0,
        })
    }

    /// Assembles a state from stored buffers.
    pub fn from_parts(
        kind: OptimizerKind,
        weights: Vec<f32>,
        momentum: Vec<f32>,
        variance: Option<Vec<f32>>,
        step: u64,
    ) -> Result<Self> {
        let n = weights.len();
        if momentum.len() != n {
            return Err(Error::LengthMismatch {
                expected: n,
                found: momentum.len(),
            });
        }
        match (&variance, kind.has_variance()) {
            (Some(v), true) if v.len() != n => {
                return Err(Error::LengthMismatch {
                    expected: n,
                    found: v.len(),
                })
            }
            (Some(_), true) | (None, false) => {}
            _ => {
                return Err(Error::InvalidConfig(format!(
                    "variance buffer presence does not match {}",
                    kind.name()
                )))
            }
        }
        Ok(Self {
            kind,
            weights,
            momentum,
            variance,
            step,
        })
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn step(&mut self, grad: &[f32], hp: &HyperParams) -> Result<()> {
        check_kind(self.kind, hp)?;
        check_grad(self.len(), grad)?;
        self.step += 1;
        match hp {
            HyperParams::Sgd(h) => {
                for ((theta, m), &g) in self.weights.iter_mut().zip(&mut self.momentum).zip(grad) {
                    (*theta, *m) = sgd_update(*theta, *m, g, h);
                }
            }
            HyperParams::AdamW(h) => {
                let bc = BiasCorrection::at(h, self.step);
                let v = self.variance.as_mut().expect("adamw state has variance");
                for (((theta, m), v), &g) in
                    self.weights.iter_mut().zip(&mut self.momentum).zip(v).zip(grad)
                {
                    (*theta, *m, *v) = adamw_update(*theta, *m, *v, g, h, bc);
                }
            }
            HyperParams::Lion(h) => {
                for ((theta, m), &g) in self.weights.iter_mut().zip(&mut self.momentum).zip(grad) {
                    (*theta, *m) = lion_update(*theta, *m, g, h);
                }
            }
        }
        Ok(())
    }
}

/// Compressed state: split weights plus 8-bit group-quantized moments.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FlashState {
    kind: OptimizerKind,
    pub weights: SplitTensor,
    pub momentum: QuantizedState,
    pub variance: Option<QuantizedState>,
    pub step: u64,
}

/// Splits `theta0` into BF16 + INT8 corrections and quantizes zero moments.
pub fn init_flash_state(
    theta0: &[f32],
    kind: OptimizerKind,
    variance_scheme: VarianceScheme,
) -> Result<FlashState> {
    FlashState::with_layout(
        theta0,
        kind,
        variance_scheme,
        LowPrecisionFormat::Bf16,
        CorrectionWidth::Int8,
        GroupSpec::default(),
    )
}

impl FlashState {
    pub fn with_layout(
        theta0: &[f32],
        kind: OptimizerKind,
        variance_scheme: VarianceScheme,
        format: LowPrecisionFormat,
        width: CorrectionWidth,
        spec: GroupSpec,
    ) -> Result<Self> {
        let n = theta0.len();
        Ok(Self {
            kind,
            weights: SplitTensor::from_f32(theta0, format, width)?,
            momentum: QuantizedState::zeros(StateKind::Momentum, n, spec),
            variance: kind
                .has_variance()
                .then(|| QuantizedState::zeros(variance_scheme.state_kind(), n, spec)),
            step: 0,
        })
    }

    /// Assembles a state from stored components.
    pub fn from_parts(
        kind: OptimizerKind,
        weights: SplitTensor,
        momentum: QuantizedState,
        variance: Option<QuantizedState>,
        step: u64,
    ) -> Result<Self> {
        let n = weights.len();
        if momentum.len() != n {
            return Err(Error::LengthMismatch {
                expected: n,
                found: momentum.len(),
            });
        }
        if momentum.kind() != StateKind::Momentum {
            return Err(Error::KindMismatch {
                expected: StateKind::Momentum.name(),
                found: momentum.kind().name(),
            });
        }
        match (&variance, kind.has_variance()) {
            (Some(v), true) => {
                if v.len() != n {
                    return Err(Error::LengthMismatch {
                        expected: n,
                        found: v.len(),
                    });
                }
                if v.spec() != momentum.spec() {
                    return Err(Error::InvalidConfig(
                        "momentum and variance group sizes differ".into(),
                    ));
                }
                if v.kind().is_signed() {
                    return Err(Error::KindMismatch {
                        expected: StateKind::Variance.name(),
                        found: v.kind().name(),
                    });
                }
            }
            (None, false) => {}
            _ => {
                return Err(Error::InvalidConfig(format!(
                    "variance buffer presence does not match {}",
                    kind.name()
                )))
            }
        }
        Ok(Self {
            kind,
            weights,
            momentum,
            variance,
            step,
        })
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn variance_scheme(&self) -> Option<VarianceScheme> {
        self.variance.as_ref().map(|v| match v.kind() {
            StateKind::Variance => VarianceScheme::Companded,
            _ => VarianceScheme::Linear,
        })
    }

    pub fn step(&mut self, grad: &[f32], hp: &HyperParams) -> Result<()> {
        check_kind(self.kind, hp)?;
        check_grad(self.len(), grad)?;
        self.step += 1;

        let group = self.momentum.spec().group_size();
        let mut theta = vec![0.0_f32; group];
        let mut m = vec![0.0_f32; group];
        let mut v = vec![0.0_f32; group];
        let bc = match hp {
            HyperParams::AdamW(h) => Some(BiasCorrection::at(h, self.step)),
            _ => None,
        };

        for (gi, grads) in grad.chunks(group).enumerate() {
            let start = gi * group;
            let n = grads.len();
            let (theta, m, v) = (&mut theta[..n], &mut m[..n], &mut v[..n]);

            // Prologue.
            self.momentum.load_group(gi, m);
            if let Some(q) = &self.variance {
                q.load_group(gi, v);
            }
            for (i, t) in theta.iter_mut().enumerate() {
                *t = self.weights.get(start + i);
            }

            match hp {
                HyperParams::Sgd(h) => {
                    for i in 0..n {
                        (theta[i], m[i]) = sgd_update(theta[i], m[i], grads[i], h);
                    }
                }
                HyperParams::AdamW(h) => {
                    let bc = bc.expect("bias correction computed for adamw");
                    for i in 0..n {
                        (theta[i], m[i], v[i]) = adamw_update(theta[i], m[i], v[i], grads[i], h, bc);
                    }
                }
                HyperParams::Lion(h) => {
                    for i in 0..n {
                        (theta[i], m[i]) = lion_update(theta[i], m[i], grads[i], h);
                    }
                }
            }

            // Epilogue.
            self.momentum.store_group(gi, m)?;
            if let Some(q) = &mut self.variance {
                q.store_group(gi, v)?;
            }
            for (i, &t) in theta.iter().enumerate() {
                self.weights.set(start + i, t)?;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum OptimizerState {
    Reference(ReferenceState),
    Flash(FlashState),
}

impl OptimizerState {
    pub fn new(
        theta0: &[f32],
        kind: OptimizerKind,
        mode: Mode,
        variance_scheme: VarianceScheme,
    ) -> Result<Self> {
        Ok(match mode {
            Mode::Reference => Self::Reference(ReferenceState::new(theta0, kind)?),
            Mode::Flash => Self::Flash(init_flash_state(theta0, kind, variance_scheme)?),
        })
    }

    pub fn mode(&self) -> Mode {
        match self {
            Self::Reference(_) => Mode::Reference,
            Self::Flash(_) => Mode::Flash,
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        match self {
            Self::Reference(s) => s.kind(),
            Self::Flash(s) => s.kind(),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Self::Reference(s) => s.len(),
            Self::Flash(s) => s.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn step_count(&self) -> u64 {
        match self {
            Self::Reference(s) => s.step,
            Self::Flash(s) => s.step,
        }
    }

    pub fn step(&mut self, grad: &[f32], hp: &HyperParams) -> Result<()> {
        match self {
            Self::Reference(s) => s.step(grad, hp),
            Self::Flash(s) => s.step(grad, hp),
        }
    }

    /// The weights the forward pass runs on: FP32 masters in reference mode,
    /// the low-precision component in flash mode.
    pub fn forward_weights_into(&self, out: &mut [f32]) {
        match self {
            Self::Reference(s) => out.copy_from_slice(&s.weights),
            Self::Flash(s) => s.weights.lp_into(out),
        }
    }

    /// Full-precision (or reconstructed) master weights.
    pub fn master_weights(&self) -> Vec<f32> {
        match self {
            Self::Reference(s) => s.weights.clone(),
            Self::Flash(s) => s.weights.to_f32(),
        }
    }

    /// Momentum as FP32 (dequantized in flash mode).
    pub fn momentum(&self) -> Vec<f32> {
        match self {
            Self::Reference(s) => s.momentum.clone(),
            Self::Flash(s) => s.momentum.dequantize(),
        }
    }

    pub fn variance(&self) -> Option<Vec<f32>> {
        match self {
            Self::Reference(s) => s.variance.clone(),
            Self::Flash(s) => s.variance.as_ref().map(QuantizedState::dequantize),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn adam(lr: f32, wd: f32) -> HyperParams {
        HyperParams::AdamW(AdamHyperParams {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: wd,
        })
    }

    fn sgd(lr: f32) -> HyperParams {
        HyperParams::Sgd(SgdHyperParams {
            lr,
            momentum: 0.9,
            weight_decay: 0.0,
        })
    }

    fn lion(lr: f32) -> HyperParams {
        HyperParams::Lion(LionHyperParams {
            lr,
            beta1: 0.9,
            beta2: 0.99,
            weight_decay: 0.0,
        })
    }

    #[test]
    fn init_flash_examples() {
        let s = init_flash_state(&[1.0], OptimizerKind::AdamW, VarianceScheme::Companded).unwrap();
        assert_eq!(s.weights.lp_values(), &[0x3f80]);
        assert_eq!(s.weights.corrections().get(0), 0);
        assert_eq!(s.momentum.scales(), &[0]);
        assert_eq!(s.step, 0);
        assert!(s.variance.is_some());

        let s = init_flash_state(&[1.001_953_125], OptimizerKind::Sgd, VarianceScheme::Companded)
            .unwrap();
        assert_eq!(s.weights.lp_get(0), 1.0);
        assert_eq!(s.weights.corrections().get(0), 64);
        assert!(s.variance.is_none());

        assert!(init_flash_state(&[f32::NAN], OptimizerKind::Lion, VarianceScheme::Companded).is_err());
        assert!(ReferenceState::new(&[f32::NAN], OptimizerKind::Lion).is_err());
    }

    #[test]
    fn adamw_first_step() {
        let mut s = ReferenceState::new(&[0.0], OptimizerKind::AdamW).unwrap();
        s.step(&[1.0], &adam(0.1, 0.0)).unwrap();
        assert_eq!(s.step, 1);
        assert!((s.momentum[0] - 0.1).abs() < 1e-7);
        assert!((s.variance.as_ref().unwrap()[0] - 0.001).abs() < 1e-7);
        assert!((s.weights[0] - (-0.1 / (1.0 + 1e-8))).abs() < 1e-6);
    }

    #[test]
    fn adamw_zero_grad_and_decay() {
        let mut s = ReferenceState::new(&[0.75], OptimizerKind::AdamW).unwrap();
        s.step(&[0.0], &adam(0.1, 0.0)).unwrap();
        assert_eq!(s.weights, vec![0.75]);

        let mut s = ReferenceState::new(&[1.0], OptimizerKind::AdamW).unwrap();
        s.step(&[0.0], &adam(0.1, 0.1)).unwrap();
        assert!((s.weights[0] - 0.99).abs() < 1e-7);
    }

    #[test]
    fn sgd_two_steps() {
        let mut s = ReferenceState::new(&[0.0], OptimizerKind::Sgd).unwrap();
        s.step(&[1.0], &sgd(0.1)).unwrap();
        assert_eq!(s.momentum, vec![1.0]);
        assert!((s.weights[0] + 0.1).abs() < 1e-7);
        s.step(&[1.0], &sgd(0.1)).unwrap();
        assert!((s.momentum[0] - 1.9).abs() < 1e-6);
        assert!((s.weights[0] + 0.29).abs() < 1e-6);

        let mut s = ReferenceState::new(&[0.5], OptimizerKind::Sgd).unwrap();
        s.step(&[0.0], &sgd(0.1)).unwrap();
        assert_eq!(s.weights, vec![0.5]);
    }

    #[test]
    fn lion_signs() {
        let mut s = ReferenceState::new(&[0.0, 0.0, 0.0], OptimizerKind::Lion).unwrap();
        s.step(&[1.0, 0.0, -1.0], &lion(0.01)).unwrap();
        assert_eq!(s.weights, vec![-0.01, 0.0, 0.01]);
        assert!((s.momentum[0] - 0.01).abs() < 1e-7);
        assert_eq!(s.momentum[1], 0.0);
    }

    #[test]
    fn flash_zero_gradient_fixed_point() {
        let theta0 = [1.001_953_125_f32, -0.3, 2.5e-3, 7.0];
        for kind in [OptimizerKind::Sgd, OptimizerKind::AdamW, OptimizerKind::Lion] {
            let hp = HyperParams::default_for(kind);
            let mut s = init_flash_state(&theta0, kind, VarianceScheme::Companded).unwrap();
            let before = s.weights.clone();
            s.step(&[0.0; 4], &hp).unwrap();
            assert_eq!(s.weights, before, "{kind:?}");
            assert_eq!(s.step, 1);
        }
    }

    #[test]
    fn flash_first_adam_step_matches_reference() {
        let theta0 = [0.0_f32, 0.5, -1.25, 3.0];
        let g = [1.0_f32, -0.5, 0.25, 2.0];
        let hp = adam(0.01, 0.0);
        let mut r = ReferenceState::new(&theta0, OptimizerKind::AdamW).unwrap();
        let mut f = init_flash_state(&theta0, OptimizerKind::AdamW, VarianceScheme::Companded).unwrap();
        r.step(&g, &hp).unwrap();
        f.step(&g, &hp).unwrap();
        for (i, &want) in r.weights.iter().enumerate() {
            let got = f.weights.get(i);
            let ulp = LowPrecisionFormat::Bf16
                .ulp_of(f.weights.lp_values()[i])
                .unwrap();
            assert!((got - want).abs() <= ulp / 508.0 + 4.0 * f32::EPSILON * want.abs());
        }
    }

    #[test]
    fn flash_state_reads_back_what_it_wrote() {
        let theta0: Vec<f32> = (0..70).map(|i| (i as f32 * 0.37).sin()).collect();
        let g: Vec<f32> = (0..70).map(|i| (i as f32 * 1.3).cos() * 1e-2).collect();
        let mut f = init_flash_state(&theta0, OptimizerKind::AdamW, VarianceScheme::Companded).unwrap();
        f.step(&g, &adam(1e-3, 0.01)).unwrap();
        let m = f.momentum.dequantize();
        let requant = QuantizedState::quantize(StateKind::Momentum, &m, f.momentum.spec()).unwrap();
        // Requantizing what the next prologue will read moves codes by at most one.
        let (crate::statequant::StateCodes::Signed(a), crate::statequant::StateCodes::Signed(b)) =
            (f.momentum.codes(), requant.codes())
        else {
            panic!("momentum codes are signed");
        };
        assert!(a.iter().zip(b).all(|(x, y)| (*x as i32 - *y as i32).abs() <= 1));
        assert!(f.variance.as_ref().unwrap().dequantize().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn step_errors() {
        let mut s = ReferenceState::new(&[0.0, 1.0], OptimizerKind::AdamW).unwrap();
        assert!(matches!(
            s.step(&[1.0], &adam(0.1, 0.0)),
            Err(Error::LengthMismatch { .. })
        ));
        assert!(matches!(
            s.step(&[1.0, f32::INFINITY], &adam(0.1, 0.0)),
            Err(Error::NonFiniteGradient { index: 1, .. })
        ));
        assert!(matches!(
            s.step(&[1.0, 1.0], &sgd(0.1)),
            Err(Error::KindMismatch { .. })
        ));
        assert_eq!(s.step, 0);

        let bad = HyperParams::AdamW(AdamHyperParams {
            beta1: 1.0,
            ..AdamHyperParams::default()
        });
        assert!(bad.validate().is_err());
        let bad = HyperParams::AdamW(AdamHyperParams {
            eps: 0.0,
            ..AdamHyperParams::default()
        });
        assert!(bad.validate().is_err());
        let bad = HyperParams::Sgd(SgdHyperParams {
            weight_decay: -1.0,
            ..SgdHyperParams::default()
        });
        assert!(bad.validate().is_err());
    }

    #[test]
    fn lion_update_magnitude_is_lr() {
        let theta0: Vec<f32> = (0..40).map(|i| i as f32 * 0.25 - 5.0).collect();
        let g: Vec<f32> = (0..40).map(|i| ((i % 3) as f32 - 1.0) * 0.7).collect();
        let mut r = ReferenceState::new(&theta0, OptimizerKind::Lion).unwrap();
        r.step(&g, &lion(0.125)).unwrap();
        for (a, b) in r.weights.iter().zip(&theta0) {
            let d = (a - b).abs();
            assert!(d == 0.0 || d == 0.125);
        }
    }

    #[test]
    fn hyperparams_serde_roundtrip() {
        let hp = adam(0.5, 0.1);
        let json = serde_json::to_string(&hp).unwrap();
        assert!(json.contains("\"optimizer\":\"adamw\""));
        let back: HyperParams = serde_json::from_str(&json).unwrap();
        assert_eq!(back, hp);
        assert_eq!(hp.with_lr(0.25).lr(), 0.25);
    }
}
