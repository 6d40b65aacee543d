//! Fixed-seed forward pass against values recorded at first build.
//!
//! Compared with a tolerance rather than bit-exactly: the GEMM backend picks
//! CPU-specific kernels whose rounding may differ.

use ndarray::Array2;

use nspp::model::{Model, ModelConfig};

const SUM: f64 = 4.262_028_025_241_268e2;
const SUM_SQ: f64 = 4.776_010_073_358_667e3;

#[test]
fn seeded_forward_pass_matches_recorded_values() {
    let cfg = ModelConfig {
        input_bins: 33,
        trunk_channels: 24,
        ..ModelConfig::default()
    };
    let model = Model::<f64>::init(cfg, 42).unwrap();
    let log_amp = Array2::from_shape_fn((40, 33), |(t, k)| ((t as f64) * 0.3 + (k as f64) * 0.17).sin() * 3.0 - 2.0);
    let phase = model.forward(log_amp.view()).unwrap().phase;
    let sum: f64 = phase.sum();
    let sum_sq: f64 = phase.iter().map(|p| p * p).sum();
    assert!((sum - SUM).abs() <= 1e-9 * SUM.abs().max(1.0), "sum {sum}");
    assert!((sum_sq - SUM_SQ).abs() <= 1e-9 * SUM_SQ, "sum of squares {sum_sq}");
}
