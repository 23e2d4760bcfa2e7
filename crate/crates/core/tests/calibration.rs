mod common;

use common::{input, randomize_norm, spec, specs, toy};
use paradis::error::Error;
use paradis::model::{ElasticModel, NormMode};
use paradis::norm::{calibrate, CalibrationMode, CalibrationOptions};
use paradis::tensor::{conv2d_forward, Tensor};

fn channel_moments(y: &Tensor<f32>) -> (Vec<f64>, Vec<f64>) {
    let [b, c, h, w] = y.dims4("m").unwrap();
    let n = (b * h * w) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let vals: Vec<f64> = (0..b)
            .flat_map(|i| y.data()[(i * c + ch) * h * w..(i * c + ch + 1) * h * w].iter().map(|&v| v as f64))
            .collect();
        mean[ch] = vals.iter().sum::<f64>() / n;
        var[ch] = vals.iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>() / n;
    }
    (mean, var)
}

/// `relu(gamma * (y - mean) / sqrt(var + eps) + beta)` with the given moments.
fn bn_relu(y: &Tensor<f32>, mean: &[f64], var: &[f64], gamma: &[f32], beta: &[f32]) -> Tensor<f32> {
    let [b, c, h, w] = y.dims4("bn").unwrap();
    let mut out = y.clone();
    for i in 0..b {
        for ch in 0..c {
            let inv = 1.0 / (var[ch] + 1e-5).sqrt();
            for v in &mut out.data_mut()[(i * c + ch) * h * w..(i * c + ch + 1) * h * w] {
                let z = gamma[ch] as f64 * (*v as f64 - mean[ch]) * inv + beta[ch] as f64;
                *v = z.max(0.0) as f32;
            }
        }
    }
    out
}

fn assert_close(a: &[f32], b: &[f64], tol: f64, what: &str) {
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        let err = (*x as f64 - y).abs() / y.abs().max(1.0);
        assert!(err < tol, "{what}[{i}]: {x} vs {y}");
    }
}

#[test]
fn single_batch_exact_mean_matches_direct_statistics() {
    let mut m = toy(1.2, 1);
    randomize_norm(&mut m, 2);
    let x = input(16, 3, 8, 3);
    let sw = spec("[0.5,0.25,0.25]x");
    let opts = CalibrationOptions {
        mode: CalibrationMode::ExactMean,
        batch_size: 16,
        max_samples: 16,
    };
    let stats = calibrate(&m, std::slice::from_ref(&sw), &x, opts).unwrap();
    let p = m.params();
    let get = |n: &str| p.get(p.id(n).unwrap());
    for slice in m.resolve(&sw).unwrap() {
        let l0 = &slice.layers[0];
        let w0 = get("layer0.weight").block(l0.output.clone(), Some(0..3)).unwrap();
        let y0 = conv2d_forward(&x, &w0, 1, 1, 1).unwrap();
        let (mean0, var0) = channel_moments(&y0);
        let s0 = stats.lookup(&sw.canonical(), slice.position, 0).unwrap();
        assert_close(&s0.mean, &mean0, 1e-6, "layer0 mean");
        assert_close(&s0.var, &var0, 1e-6, "layer0 var");

        let gamma = get("layer0.bn.gamma").block(l0.output.clone(), None).unwrap();
        let beta = get("layer0.bn.beta").block(l0.output.clone(), None).unwrap();
        let a0 = bn_relu(&y0, &mean0, &var0, gamma.data(), beta.data());
        let l1 = &slice.layers[1];
        let w1 = get("layer1.weight").block(l1.output.clone(), Some(l1.input.clone())).unwrap();
        let y1 = conv2d_forward(&a0, &w1, 2, 1, 1).unwrap();
        let (mean1, var1) = channel_moments(&y1);
        let s1 = stats.lookup(&sw.canonical(), slice.position, 1).unwrap();
        assert_close(&s1.mean, &mean1, 1e-5, "layer1 mean");
        assert_close(&s1.var, &var1, 1e-5, "layer1 var");
    }
}

#[test]
fn exact_mean_over_batches_equals_whole_set_statistics() {
    let m = toy(1.0, 4);
    let x = input(48, 3, 8, 5);
    let sw = [spec("[0.5,0.5]x")];
    let whole = calibrate(&m, &sw, &x, CalibrationOptions { batch_size: 48, ..Default::default() }).unwrap();
    let split = calibrate(&m, &sw, &x, CalibrationOptions { batch_size: 16, ..Default::default() }).unwrap();
    // Only the first layer sees identical inputs in both runs: deeper layers
    // are normalized with each batch's own moments during calibration.
    for pos in 0..2 {
        let a = whole.lookup("[0.5,0.5]x", pos, 0).unwrap();
        let b = split.lookup("[0.5,0.5]x", pos, 0).unwrap();
        let b64: Vec<f64> = b.mean.iter().map(|&v| v as f64).collect();
        assert_close(&a.mean, &b64, 1e-5, "mean");
        let b64: Vec<f64> = b.var.iter().map(|&v| v as f64).collect();
        assert_close(&a.var, &b64, 1e-5, "var");
    }
}

#[test]
fn moving_average_with_unit_momentum_keeps_the_last_batch() {
    let m = toy(1.0, 6);
    let x = input(32, 3, 8, 7);
    let sw = [spec("[1.0]x")];
    let ema = CalibrationOptions {
        mode: CalibrationMode::MovingAverage { momentum: 1.0 },
        batch_size: 16,
        max_samples: 32,
    };
    let last = Tensor::new([16, 3, 8, 8], x.data()[16 * 192..].to_vec()).unwrap();
    let a = calibrate(&m, &sw, &x, ema).unwrap();
    let b = calibrate(&m, &sw, &last, CalibrationOptions { batch_size: 16, ..Default::default() }).unwrap();
    assert_eq!(a.switch("[1.0]x").unwrap().entries, b.switch("[1.0]x").unwrap().entries);
}

#[test]
fn switch_statistics_are_isolated() {
    let mut m = toy(1.2, 8);
    randomize_norm(&mut m, 9);
    let weights_before = m.params().grads_snapshot().len();
    let x = input(32, 3, 8, 10);
    let halves = spec("[0.5,0.5]x");
    let quarters = spec("[4x0.25]x");
    let only = calibrate(&m, std::slice::from_ref(&halves), &x, Default::default()).unwrap();
    let both = calibrate(&m, &[halves.clone(), quarters.clone()], &x, Default::default()).unwrap();
    assert_eq!(only.switch("[0.5,0.5]x"), both.switch("[0.5,0.5]x"));
    assert_eq!(m.params().grads_snapshot().len(), weights_before);

    m.attach_stats(both);
    let probe = input(4, 3, 8, 11);
    let h0 = m.forward_switch(&halves, &probe, NormMode::Eval).unwrap().logits;
    let q0 = m.forward_switch(&quarters, &probe, NormMode::Eval).unwrap().logits;
    let entry = m.stats_mut().switch_mut(&quarters.canonical()).unwrap().entries.get_mut(&(2, 1)).unwrap();
    entry.mean[0] += 1.0;
    entry.var[1] *= 3.0;
    assert_eq!(h0, m.forward_switch(&halves, &probe, NormMode::Eval).unwrap().logits);
    assert_ne!(q0, m.forward_switch(&quarters, &probe, NormMode::Eval).unwrap().logits);
}

#[test]
fn calibration_leaves_weights_untouched() {
    let m = toy(1.2, 12);
    let before: Vec<Tensor<f32>> = m.params().iter().map(|(_, t)| t.clone()).collect();
    calibrate(&m, &specs(&["[1.2]x", "[0.5,0.25,0.25]x"]), &input(8, 3, 8, 13), Default::default()).unwrap();
    let after: Vec<Tensor<f32>> = m.params().iter().map(|(_, t)| t.clone()).collect();
    assert_eq!(before, after);
}

#[test]
fn uncalibrated_switch_fails_loudly_then_works_after_calibration() {
    let mut m: ElasticModel<f32> = toy(1.0, 14);
    let free = spec("[0.5,0.25,0.25]x");
    let x = input(2, 3, 8, 15);
    match m.forward_switch(&free, &x, NormMode::Eval) {
        Err(Error::MissingStats { switch, position, layer }) => {
            assert_eq!((switch.as_str(), position, layer), ("[0.5,0.25,0.25]x", 0, 0));
        }
        other => panic!("expected missing stats, got {other:?}"),
    }
    let stats = calibrate(&m, std::slice::from_ref(&free), &input(16, 3, 8, 16), Default::default()).unwrap();
    m.stats_mut().merge(stats);
    assert!(m.forward_switch(&free, &x, NormMode::Eval).is_ok());
}

#[test]
fn stored_statistics_are_small() {
    let list = specs(&["[1.2]x", "[1.0]x", "[0.5,0.5]x", "[4x0.25]x", "[0.5,0.25,0.25]x"]);
    let m = toy(1.2, 17);
    let stats = calibrate(&m, &list, &input(8, 3, 8, 18), Default::default()).unwrap();
    // Every switch stores mean and variance for each of its norm channels.
    for s in &list {
        let per_switch: usize = m
            .resolve(s)
            .unwrap()
            .iter()
            .flat_map(|sl| sl.layers.iter().map(|l| 2 * l.output.len()))
            .sum();
        let stored: usize = stats
            .switch(&s.canonical())
            .unwrap()
            .entries
            .values()
            .map(|e| e.mean.len() + e.var.len())
            .sum();
        assert_eq!(per_switch, stored, "{s}");
    }
    assert!(stats.total_floats() * 20 < m.params().num_values());
}
