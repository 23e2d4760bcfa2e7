#![allow(dead_code)]

use paradis::arch::Architecture;
use paradis::autograd::{Graph, ParamStore, Var};
use paradis::model::ElasticModel;
use paradis::norm::{calibrate, CalibrationOptions};
use paradis::switch::SwitchSpec;
use paradis::tensor::{Scalar, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn spec(s: &str) -> SwitchSpec {
    s.parse().unwrap()
}

pub fn specs(list: &[&str]) -> Vec<SwitchSpec> {
    list.iter().map(|s| spec(s)).collect()
}

pub fn input(n: usize, c: usize, hw: usize, seed: u64) -> Tensor<f32> {
    Tensor::randn([n, c, hw, hw], 1.0, &mut rng(seed))
}

pub fn toy(wide: f64, seed: u64) -> ElasticModel<f32> {
    ElasticModel::new(Architecture::preset("toy", 3, 8, 10).unwrap(), wide, vec![], seed).unwrap()
}

/// Randomizes BN scale/shift too, so slicing mistakes cannot hide behind
/// unit gamma and zero beta.
pub fn randomize_norm(model: &mut ElasticModel<f32>, seed: u64) {
    let mut r = rng(seed);
    let ids: Vec<_> = model.params().ids().collect();
    for id in ids {
        let name = model.params().name(id).to_string();
        if name.ends_with("bn.gamma") || name.ends_with("bn.beta") || name == "head.bias" {
            let t = model.params_mut().get_mut(id);
            let noise: Tensor<f32> = Tensor::randn(t.shape().to_vec(), 0.5, &mut r);
            t.add_assign(&noise).unwrap();
        }
    }
}

pub fn calibrated_toy(wide: f64, seed: u64, switches: &[SwitchSpec]) -> ElasticModel<f32> {
    let mut m = toy(wide, seed);
    randomize_norm(&mut m, seed + 1);
    let x = input(64, 3, 8, seed + 2);
    let stats = calibrate(&m, switches, &x, CalibrationOptions::default()).unwrap();
    m.attach_stats(stats);
    m
}

pub fn rel_close(a: &[f32], b: &[f32], rel: f32) -> Result<(), String> {
    if a.len() != b.len() {
        return Err(format!("length {} vs {}", a.len(), b.len()));
    }
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        let tol = rel * x.abs().max(y.abs()).max(1.0);
        if (x - y).abs() > tol || !x.is_finite() {
            return Err(format!("index {i}: {x} vs {y}"));
        }
    }
    Ok(())
}

/// Central finite differences on every parameter element (or a strided
/// sample of at most `per_tensor` elements) against the tape gradient.
/// Returns the worst relative error.
pub fn gradcheck<T: Scalar, F>(store: &mut ParamStore<T>, per_tensor: usize, h: f64, f: F) -> f64
where
    F: Fn(&mut Graph<T>, &ParamStore<T>) -> Var,
{
    store.zero_grad();
    let mut g = Graph::new();
    let loss = f(&mut g, store);
    g.backward(loss, store).unwrap();
    let analytic = store.grads_snapshot();
    let eval = |store: &ParamStore<T>| -> f64 {
        let mut g = Graph::new();
        let l = f(&mut g, store);
        g.value(l).data()[0].to_f64().unwrap()
    };
    let mut worst = 0.0f64;
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let n = store.get(id).numel();
        let stride = (n / per_tensor.max(1)).max(1);
        for i in (0..n).step_by(stride) {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + T::lit(h);
            let up = eval(store);
            store.get_mut(id).data_mut()[i] = orig - T::lit(h);
            let down = eval(store);
            store.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[id.0].data()[i].to_f64().unwrap();
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            if err > worst {
                worst = err;
            }
        }
    }
    worst
}
