use std::collections::BTreeMap;

use hetmoe::numerics::{gaussian, mean_std};
use hetmoe::perfmodel::{
    analog_cost, digital_latency, heterogeneous_estimates, AnalogDevice, DeviceProfile, DigitalDevice, WorkloadSpec,
};
use hetmoe::prognoise::program_weights;
use hetmoe::synthetic::{Relevant, Task};
use hetmoe::trainer::{hinge_loss_and_grads, surrogate_grads};
use hetmoe::{AnalogLayer, Matrix, NoiseSpec, QuantizerConfig, RngStream, TaskSpec, TheoryModel, TrainConfig};
use proptest::prelude::*;

fn small_task(seed: u64) -> Task {
    let spec = TaskSpec {
        d: 16,
        vocab_size: 8,
        n: 5,
        ..TaskSpec::default()
    };
    Task::new(spec, &mut RngStream::new(seed, 0)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn zero_noise_programming_is_identity(seed in any::<u64>(), rows in 1usize..12, cols in 1usize..12) {
        let w = gaussian(&mut RngStream::new(seed, 0), 0.0, 1.0, rows, cols).unwrap();
        let cmax: Vec<f64> = (0..cols).map(|j| w.column(j).iter().fold(0.0f64, |a, v| a.max(v.abs()))).collect();
        let mut rng = RngStream::new(seed, 1);
        prop_assert_eq!(&program_weights(&w, &cmax, &NoiseSpec::pcm().with_scale(0.0), &mut rng).unwrap(), &w);
        prop_assert_eq!(&program_weights(&w, &cmax, &NoiseSpec::simplified(0.0), &mut rng).unwrap(), &w);
    }

    #[test]
    fn programming_is_unbiased(seed in any::<u64>(), ratio in -1.0f64..1.0, w_max in 0.1f64..3.0) {
        let n = 20_000;
        let w = ratio * w_max;
        let target = Matrix::filled(n, 1, w);
        let spec = NoiseSpec::pcm();
        let noisy = program_weights(&target, &[w_max], &spec, &mut RngStream::new(seed, 0)).unwrap();
        let (mean, _) = mean_std(noisy.as_slice());
        let sigma = spec.sigma(w, w_max).unwrap().value;
        prop_assert!((mean - w).abs() < 3.0 * sigma / (n as f64).sqrt() + 1e-12);
    }

    #[test]
    fn tile_size_does_not_matter_at_high_resolution(seed in any::<u64>(), rows in 1usize..30, cols in 1usize..10) {
        let mut rng = RngStream::new(seed, 0);
        let w = gaussian(&mut rng, 0.0, 1.0, rows, cols).unwrap();
        let x: Vec<f64> = (0..rows).map(|_| rng.standard_normal()).collect();
        let x_max = x.iter().fold(f64::MIN_POSITIVE, |a, v| a.max(v.abs()));
        let outputs: Vec<Vec<f64>> = [2, 8, 512]
            .into_iter()
            .map(|tile| {
                let q = QuantizerConfig { dac_bits: 24, adc_bits: 24, kappa: 1.0, lambda: tile.min(rows) as f64, ..QuantizerConfig::default() };
                let mut layer = AnalogLayer::new(w.clone(), tile, q).unwrap();
                layer.set_input_std(x_max);
                layer.mvm(&x).unwrap()
            })
            .collect();
        for y in &outputs[1..] {
            prop_assert!(hetmoe::numerics::relative_l2_error(y, &outputs[0]) <= 1e-4);
        }
    }

    #[test]
    fn labels_are_balanced_and_irrelevant_tokens_exclude_signal(seed in any::<u64>()) {
        let task = small_task(seed);
        let samples = task.sample_many(2000, &mut RngStream::new(seed, 1));
        let positives = samples.iter().filter(|s| s.label > 0.0).count() as f64;
        prop_assert!((positives - 1000.0).abs() <= 1.5 * 2000f64.sqrt());
        let signal: Vec<u32> = Relevant::ALL.iter().map(|&r| task.relevant_token(r).index).collect();
        for s in &samples {
            for (j, t) in s.tokens.iter().enumerate() {
                prop_assert_eq!(j == s.position, signal.contains(&t.index));
            }
        }
        prop_assert_eq!(samples, task.sample_many(2000, &mut RngStream::new(seed, 1)));
    }

    #[test]
    fn batch_gradient_is_mean_of_sample_gradients(seed in any::<u64>()) {
        let task = small_task(seed);
        let cfg = TrainConfig { k: 4, m: 3, l: 2, init_scale_up: 0.5, init_scale_router: 0.5, ..TrainConfig::default() };
        let model = TheoryModel::init(&task, &cfg, &mut RngStream::new(seed, 2)).unwrap();
        let batch = task.sample_many(12, &mut RngStream::new(seed, 3));
        let (loss, grads) = hinge_loss_and_grads(&model, &task, &batch).unwrap();
        let mut up = vec![0.0; grads.up.iter().map(|g| g.as_slice().len()).sum()];
        let mut router = vec![0.0; grads.router.as_slice().len()];
        let mut hinge = 0.0;
        for s in &batch {
            let (f, g) = surrogate_grads(&model, &s.x(&task), s.label).unwrap();
            hinge += (1.0 - s.label * f).max(0.0) / batch.len() as f64;
            for (acc, v) in up.iter_mut().zip(g.up.iter().flat_map(|m| m.as_slice())) {
                *acc += v / batch.len() as f64;
            }
            for (acc, v) in router.iter_mut().zip(g.router.as_slice()) {
                *acc += v / batch.len() as f64;
            }
        }
        prop_assert!((loss - hinge).abs() <= 1e-12);
        for (a, b) in up.iter().zip(grads.up.iter().flat_map(|m| m.as_slice())) {
            prop_assert!((a - b).abs() <= 1e-12, "{} vs {}", a, b);
        }
        for (a, b) in router.iter().zip(grads.router.as_slice()) {
            prop_assert!((a - b).abs() <= 1e-12, "{} vs {}", a, b);
        }
    }

    #[test]
    fn inactive_direction_gets_no_gradient(seed in any::<u64>(), present_neg in any::<bool>()) {
        // Basis tokens e0..e3; neuron 0 has <w, e0> < 0.
        let mut rng = RngStream::new(seed, 0);
        let mut up = gaussian(&mut rng, 0.0, 1.0, 4, 2).unwrap();
        up.set(0, 0, -0.5 - up.get(0, 0).abs());
        let router = gaussian(&mut rng, 0.0, 1.0, 4, 1).unwrap();
        let columns: Vec<Vec<f64>> = if present_neg {
            vec![vec![1.0, 0.0, 0.0, 0.0], vec![-1.0, 0.0, 0.0, 0.0], vec![0.0, 0.0, 1.0, 0.0]]
        } else {
            vec![vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0, 0.0]]
        };
        let x = Matrix::from_columns(&columns).unwrap();
        let model = TheoryModel::new(vec![up], router, vec![1.0], 3).unwrap();
        let (_, grads) = surrogate_grads(&model, &x, 1.0).unwrap();
        if present_neg {
            prop_assert!(grads.up[0].get(0, 0) != 0.0);
        } else {
            prop_assert_eq!(grads.up[0].get(0, 0), 0.0);
        }
    }

    #[test]
    fn heterogeneous_is_bounded_by_each_side(
        tokens in 1.0f64..1e4,
        ops in 0.0f64..1e6,
        bytes in 1.0f64..1e5,
        analog in 0.0f64..1e3,
        scale in 1.0f64..10.0,
    ) {
        let p = DeviceProfile {
            digital: DigitalDevice { peak_ops: 1e6, power_watts: 50.0, bandwidth: 1e4, mfu: 0.5 },
            analog: AnalogDevice {
                latency: BTreeMap::from([("op".to_string(), 1e-3)]),
                energy: BTreeMap::from([("op".to_string(), 1e-2)]),
            },
        };
        let w = WorkloadSpec {
            tokens,
            digital_ops: ops,
            digital_bytes: bytes,
            analog_ops: BTreeMap::from([("op".to_string(), analog)]),
            batch_size: 1,
        };
        let (t, e) = heterogeneous_estimates(&w, &p).unwrap();
        prop_assert!(t <= tokens / digital_latency(&w, &p).unwrap() * (1.0 + 1e-12));
        let (analog_latency, _) = analog_cost(&w, &p).unwrap();
        if analog_latency > 0.0 {
            prop_assert!(t <= tokens / analog_latency * (1.0 + 1e-12));
        }
        let scaled = WorkloadSpec {
            tokens: tokens * scale,
            digital_ops: ops * scale,
            digital_bytes: bytes * scale,
            analog_ops: BTreeMap::from([("op".to_string(), analog * scale)]),
            batch_size: 1,
        };
        let (ts, es) = heterogeneous_estimates(&scaled, &p).unwrap();
        prop_assert!((ts / t - 1.0).abs() <= 1e-9 && (es / e - 1.0).abs() <= 1e-9);
    }
}

#[test]
fn training_is_deterministic_per_seed() {
    let spec = TaskSpec::default();
    let cfg = TrainConfig {
        steps: 60,
        batch_size: 32,
        ..TrainConfig::default()
    };
    let a = hetmoe::trainer::train_run(&spec, &cfg, 9).unwrap();
    let b = hetmoe::trainer::train_run(&spec, &cfg, 9).unwrap();
    assert_eq!(a.model, b.model);
    assert_eq!(a.history, b.history);
    assert_eq!(a.probe, b.probe);
    let c = hetmoe::trainer::train_run(&spec, &cfg, 10).unwrap();
    assert_ne!(a.model, c.model);
}

#[test]
fn noise_sweep_limits() {
    use hetmoe::trainer::{theorem1_report, train_runs, GammaChoice, NoiseSweepConfig};
    let cfg = TrainConfig {
        steps: 300,
        ..TrainConfig::default()
    };
    let runs = train_runs(&TaskSpec::default(), &cfg, &[0, 1]).unwrap();
    let sweep = NoiseSweepConfig {
        grid: vec![0.0, 10.0, 100.0],
        test_size: 1000,
        draws: 32,
        threshold: 0.99,
    };
    let report = theorem1_report(&runs, &sweep, &GammaChoice::Fixed(0.25)).unwrap();
    for s in &report.seeds {
        assert_eq!(s.accuracy_analog[0], s.accuracy_hetero[0]);
        assert!((s.accuracy_analog[1] - 0.5).abs() < 0.1, "{:?}", s.accuracy_analog);
        assert!((s.accuracy_analog[2] - 0.5).abs() < 0.05, "{:?}", s.accuracy_analog);
    }
}
