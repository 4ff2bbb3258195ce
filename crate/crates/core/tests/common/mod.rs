#![allow(dead_code)]

use candle_core::{DType, Device, Tensor, Var};
use linecolor::cmft::FeatureMap;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize, l: usize, scale: f64) -> FeatureMap {
    FeatureMap::from_fn(h, w, l, |_, _, _| rng.gen_range(-scale..scale)).unwrap()
}

pub fn random_perm(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

pub fn random_tensor(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor {
    let n: usize = dims.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_vec(v, dims, &Device::Cpu).unwrap()
}

/// Worst relative error between the autograd gradient of `f` and central
/// differences, over every input entry. Entries where both gradients are
/// below `1e-7` are compared absolutely.
pub fn gradient_error(inputs: &[Tensor], h: f64, f: impl Fn(&[Tensor]) -> Tensor) -> f64 {
    let vars: Vec<Var> = inputs.iter().map(|t| Var::from_tensor(t).unwrap()).collect();
    let as_tensors: Vec<Tensor> = vars.iter().map(|v| v.as_tensor().clone()).collect();
    let grads = f(&as_tensors).backward().unwrap();
    let eval = |ts: &[Tensor]| f(ts).to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap();
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic: Vec<f64> = match grads.get(vars[k].as_tensor()) {
            Some(g) => g.flatten_all().unwrap().to_vec1().unwrap(),
            None => vec![0.0; input.elem_count()],
        };
        let base: Vec<f64> = input.flatten_all().unwrap().to_vec1().unwrap();
        for (j, &a) in analytic.iter().enumerate() {
            let shifted = |delta: f64| {
                let mut v = base.clone();
                v[j] += delta;
                let mut ts = inputs.to_vec();
                ts[k] = Tensor::from_vec(v, input.dims(), &Device::Cpu).unwrap();
                eval(&ts)
            };
            let numeric = (shifted(h) - shifted(-h)) / (2.0 * h);
            let scale = a.abs().max(numeric.abs());
            let err = if scale < 1e-7 { (a - numeric).abs() } else { (a - numeric).abs() / scale };
            worst = worst.max(err);
        }
    }
    worst
}

pub fn data_dir() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data")
}

/// Copies the bundled clip to `<root>/frames` and builds a dataset into
/// `<root>/dataset` with a pinned creation time.
pub fn build_clip_dataset(root: &std::path::Path) -> linecolor::datasmith::BuildSummary {
    let frames = root.join("frames");
    std::fs::create_dir_all(&frames).unwrap();
    for entry in std::fs::read_dir(data_dir().join("clip")).unwrap() {
        let p = entry.unwrap().path();
        std::fs::copy(&p, frames.join(p.file_name().unwrap())).unwrap();
    }
    std::env::set_var("SOURCE_DATE_EPOCH", "0");
    linecolor::datasmith::build_dataset(&frames, &root.join("dataset"), &Default::default()).unwrap()
}

pub fn tiny_generator() -> linecolor::generator::GeneratorConfig {
    linecolor::generator::GeneratorConfig {
        encoder_widths: [8, 16, 16, 32],
        sketch_widths: [4, 8, 8, 16, 16, 16],
        ru_blocks: 1,
        cardinality: 4,
        pretrained_provider: linecolor::providers::ProviderSpec::FixedRandom { seed: 7, width: Some(2) },
        ..Default::default()
    }
}
