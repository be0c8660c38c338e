//! Independent oracles shared by the integration tests. Nothing here calls
//! the code under test for the quantity it checks.

#![allow(dead_code)]

use flashopt::floatcodec::LowPrecisionFormat;
use flashopt::trainbench::{Activation, LossKind, MlpSpec, Samples, Targets};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// (mantissa bits, smallest normal exponent) of a 16-bit format.
fn layout(fmt: LowPrecisionFormat) -> (i32, i32) {
    match fmt {
        LowPrecisionFormat::Bf16 => (7, -126),
        LowPrecisionFormat::Fp16 => (10, -14),
    }
}

/// Spacing of the 16-bit grid at finite value `v`, from the IEEE layout.
pub fn ulp16(v: f32, fmt: LowPrecisionFormat) -> f64 {
    let (mant, emin) = layout(fmt);
    let a = (v as f64).abs();
    let e = if a == 0.0 { emin } else { (a.log2().floor() as i32).max(emin) };
    2f64.powi(e - mant)
}

/// Spacing of FP32 at `v`.
pub fn ulp32(v: f32) -> f64 {
    let a = (v as f64).abs();
    let e = if a == 0.0 { -126 } else { (a.log2().floor() as i32).max(-126) };
    2f64.powi(e - 23)
}

/// 16-bit round-to-nearest-even oracle from the `half` crate.
pub fn half_downcast(x: f32, fmt: LowPrecisionFormat) -> u16 {
    match fmt {
        LowPrecisionFormat::Bf16 => half::bf16::from_f32(x).to_bits(),
        LowPrecisionFormat::Fp16 => half::f16::from_f32(x).to_bits(),
    }
}

pub fn half_upcast(code: u16, fmt: LowPrecisionFormat) -> f32 {
    match fmt {
        LowPrecisionFormat::Bf16 => half::bf16::from_bits(code).to_f32(),
        LowPrecisionFormat::Fp16 => half::f16::from_bits(code).to_f32(),
    }
}

/// Uniformly random finite FP32 bit pattern.
pub fn random_finite(rng: &mut ChaCha8Rng) -> f32 {
    loop {
        let x = f32::from_bits(rng.random());
        if x.is_finite() {
            return x;
        }
    }
}

/// Mean loss of the MLP evaluated in f64.
pub fn oracle_loss(spec: &MlpSpec, params: &[Vec<f64>], samples: &Samples) -> f64 {
    let n = samples.len();
    let mut total = 0.0;
    for b in 0..n {
        let mut a: Vec<f64> = samples.inputs[b * samples.n_features..(b + 1) * samples.n_features]
            .iter()
            .map(|&x| x as f64)
            .collect();
        for l in 0..spec.dims.len() - 1 {
            let (n_in, n_out) = (spec.dims[l], spec.dims[l + 1]);
            let (w, bias) = (&params[2 * l], &params[2 * l + 1]);
            let mut z: Vec<f64> = (0..n_out)
                .map(|o| bias[o] + (0..n_in).map(|i| w[o * n_in + i] * a[i]).sum::<f64>())
                .collect();
            if l + 2 < spec.dims.len() {
                for v in &mut z {
                    *v = match spec.activation {
                        Activation::Tanh => v.tanh(),
                        Activation::Relu => v.max(0.0),
                    };
                }
            }
            a = z;
        }
        total += match (&samples.targets, spec.loss) {
            (Targets::Classes(c), LossKind::CrossEntropy) => {
                let m = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + a.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
                lse - a[c[b] as usize]
            }
            (Targets::Values(y), LossKind::MeanSquared) => (a[0] - y[b] as f64).powi(2),
            _ => unreachable!(),
        };
    }
    total / n as f64
}

/// Central finite differences of [`oracle_loss`] for every parameter.
pub fn finite_difference_grads(spec: &MlpSpec, params: &[Vec<f32>], samples: &Samples) -> Vec<Vec<f64>> {
    let mut p: Vec<Vec<f64>> = params.iter().map(|t| t.iter().map(|&x| x as f64).collect()).collect();
    let mut grads = Vec::with_capacity(p.len());
    for t in 0..p.len() {
        let mut g = Vec::with_capacity(p[t].len());
        for i in 0..p[t].len() {
            let x = p[t][i];
            let h = 1e-6 * x.abs().max(1.0);
            p[t][i] = x + h;
            let up = oracle_loss(spec, &p, samples);
            p[t][i] = x - h;
            let down = oracle_loss(spec, &p, samples);
            p[t][i] = x;
            g.push((up - down) / (2.0 * h));
        }
        grads.push(g);
    }
    grads
}

/// A random small model, its parameters and a batch to differentiate on.
pub fn random_model(seed: u64) -> (MlpSpec, Vec<Vec<f32>>, Samples) {
    let mut r = rng(seed);
    let depth = r.random_range(1..=3usize);
    let mut dims = vec![r.random_range(1..=5usize)];
    for _ in 1..depth {
        dims.push(r.random_range(1..=6usize));
    }
    let classify = r.random_bool(0.5);
    dims.push(if classify { r.random_range(2..=4usize) } else { 1 });
    let spec = MlpSpec {
        activation: if r.random_bool(0.5) { Activation::Tanh } else { Activation::Relu },
        loss: if classify { LossKind::CrossEntropy } else { LossKind::MeanSquared },
        dims,
    };
    let params: Vec<Vec<f32>> = spec
        .param_shapes()
        .iter()
        .map(|(_, n)| (0..*n).map(|_| r.random_range(-1.0f32..1.0)).collect())
        .collect();
    let batch = r.random_range(1..=6usize);
    let n_features = spec.dims[0];
    let inputs = (0..batch * n_features).map(|_| r.random_range(-2.0f32..2.0)).collect();
    let n_out = *spec.dims.last().unwrap() as u32;
    let targets = if classify {
        Targets::Classes((0..batch).map(|_| r.random_range(0..n_out)).collect())
    } else {
        Targets::Values((0..batch).map(|_| r.random_range(-1.0f32..1.0)).collect())
    };
    (
        spec,
        params,
        Samples {
            inputs,
            targets,
            n_features,
        },
    )
}

/// Largest per-tensor relative error `|g - fd| / |fd|` (Euclidean norms)
/// between backprop and finite differences.
pub fn gradient_check(seed: u64) -> f64 {
    let (spec, params, samples) = random_model(seed);
    let (_, grads) = flashopt::trainbench::mlp::loss_and_grads(&spec, &params, &samples);
    let fd = finite_difference_grads(&spec, &params, &samples);
    let mut worst = 0.0f64;
    for (g, f) in grads.iter().zip(&fd) {
        let diff: f64 = g.iter().zip(f).map(|(&a, &b)| (a as f64 - b).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = f.iter().map(|b| b * b).sum::<f64>().sqrt();
        // A tensor with no gradient at all (dead ReLUs) must come back as zero.
        let rel = if norm < 1e-12 { diff } else { diff / norm };
        worst = worst.max(rel);
    }
    worst
}
