//! Backpropagation through the whole network against central differences.

use ndarray::Array2;

use nspp::losses::{loss_total, loss_with_grad, LossConfig};
use nspp::model::{Model, ModelConfig, ModelParams};

const FRAMES: usize = 12;
const BINS: usize = 8;

fn config(parallel: bool) -> ModelConfig {
    ModelConfig {
        input_bins: BINS,
        trunk_channels: 16,
        use_parallel_estimation: parallel,
        ..ModelConfig::default()
    }
}

fn inputs() -> (Array2<f64>, Array2<f64>) {
    let log_amp = Array2::from_shape_fn((FRAMES, BINS), |(t, k)| ((t * 5 + k * 3) as f64 * 0.37).sin() * 2.0 - 1.0);
    let target = Array2::from_shape_fn((FRAMES, BINS), |(t, k)| ((t * 7 + k * 11) as f64 * 0.61).cos() * 3.0);
    (log_amp, target)
}

fn loss(model: &Model<f64>, log_amp: &Array2<f64>, target: &Array2<f64>, cfg: &LossConfig) -> f64 {
    let out = model.forward(log_amp.view()).unwrap();
    loss_total(out.phase.view(), target.view(), cfg).unwrap().total
}

fn check(parallel: bool, loss_cfg: LossConfig) {
    // Larger weights than the training init so every layer carries signal.
    let mut model = Model::<f64>::init(config(parallel), 11).unwrap();
    for (_, w) in model.params_mut().tensors_mut() {
        for (i, v) in w.iter_mut().enumerate() {
            *v = *v * 20.0 + 0.01 * ((i % 7) as f64 - 3.0);
        }
    }
    let (log_amp, target) = inputs();

    let (out, cache) = model.forward_train(log_amp.view()).unwrap();
    let (_, d_phase) = loss_with_grad(out.phase.view(), target.view(), &loss_cfg).unwrap();
    let mut grads = ModelParams::zeros(model.config());
    model.backward(&cache, d_phase.view(), &mut grads);

    let analytic: Vec<(String, Vec<f64>)> =
        grads.tensors().into_iter().map(|(n, _, v)| (n, v.to_vec())).collect();
    let h = 1e-6;
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    for (ti, (name, g)) in analytic.iter().enumerate() {
        // A spread of entries from every tensor.
        let stride = (g.len() / 6).max(1);
        for idx in (0..g.len()).step_by(stride) {
            let probe = |delta: f64| {
                let mut m = model.clone();
                m.params_mut().tensors_mut()[ti].1[idx] += delta;
                loss(&m, &log_amp, &target, &loss_cfg)
            };
            let fd = (probe(h) - probe(-h)) / (2.0 * h);
            let err = (fd - g[idx]).abs() / fd.abs().max(g[idx].abs()).max(1e-4);
            assert!(err < 1e-4, "{name}[{idx}]: numeric {fd:e}, analytic {:e}", g[idx]);
            worst = worst.max(err);
            checked += 1;
        }
    }
    assert!(checked > 100, "only {checked} entries checked");
    assert!(worst < 1e-4);
}

#[test]
fn parallel_head_gradients() {
    check(true, LossConfig::default());
}

#[test]
fn linear_head_gradients() {
    check(false, LossConfig::default());
}

#[test]
fn gradients_without_anti_wrapping() {
    check(
        true,
        LossConfig {
            anti_wrap_enabled: false,
            ..LossConfig::default()
        },
    );
}
