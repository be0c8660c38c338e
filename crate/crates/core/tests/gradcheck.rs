mod common;

use flashopt::trainbench::mlp;

#[test]
fn backprop_matches_finite_differences() {
    for seed in 100..140 {
        let err = common::gradient_check(seed);
        assert!(err <= 1e-4, "seed {seed}: relative error {err:e}");
    }
}

#[test]
fn oracle_agrees_with_forward_loss() {
    for seed in 0..10 {
        let (spec, params, samples) = common::random_model(seed);
        let p64: Vec<Vec<f64>> = params.iter().map(|t| t.iter().map(|&x| x as f64).collect()).collect();
        let want = common::oracle_loss(&spec, &p64, &samples);
        let (got, _) = mlp::evaluate(&spec, &params, &samples);
        assert!((got as f64 - want).abs() <= 1e-5 * want.abs().max(1.0), "{got} vs {want}");
    }
}
