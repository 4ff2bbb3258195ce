//! Frozen feature extractors: the illustration-feature branch of the
//! generator and the perceptual-loss network.
//!
//! Both are selected by a [`ProviderSpec`] string:
//!
//! | spec                             | meaning                                          |
//! |----------------------------------|--------------------------------------------------|
//! | `null`                           | disabled, zero channels                          |
//! | `fixed-random(seed=7)`           | frozen randomly initialized conv stack           |
//! | `fixed-random(seed=7,width=8)`   | same, with an explicit base width                |
//! | `vgg19`                          | pretrained VGG-19 weights from the weights dir   |
//! | `external(name)`                 | a provider registered at runtime under `name`    |
//!
//! Pretrained weights are looked up in `$LINECOLOR_WEIGHTS_DIR`. When a
//! provider cannot be constructed, a warning is logged and the default
//! `fixed-random` provider is used instead.

use std::collections::HashMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::{Arc, Mutex, OnceLock};

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};
use crate::nn::{leaky, max_pool2x2, Conv, ConvSpec};

pub const WEIGHTS_DIR_ENV: &str = "LINECOLOR_WEIGHTS_DIR";

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum ProviderSpec {
    Null,
    FixedRandom { seed: u64, width: Option<usize> },
    Vgg19,
    External(String),
}

impl fmt::Display for ProviderSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProviderSpec::Null => write!(f, "null"),
            ProviderSpec::FixedRandom { seed, width: None } => write!(f, "fixed-random(seed={seed})"),
            ProviderSpec::FixedRandom {
                seed,
                width: Some(w),
            } => write!(f, "fixed-random(seed={seed},width={w})"),
            ProviderSpec::Vgg19 => write!(f, "vgg19"),
            ProviderSpec::External(name) => write!(f, "external({name})"),
        }
    }
}

impl FromStr for ProviderSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::Config(format!("unrecognized provider {s:?}"));
        match s {
            "null" => return Ok(ProviderSpec::Null),
            "vgg19" => return Ok(ProviderSpec::Vgg19),
            "fixed-random" => return Ok(ProviderSpec::FixedRandom { seed: 0, width: None }),
            _ => {}
        }
        let (head, rest) = s.split_once('(').ok_or_else(bad)?;
        let args = rest.strip_suffix(')').ok_or_else(bad)?;
        match head {
            "external" if !args.is_empty() => Ok(ProviderSpec::External(args.to_string())),
            "fixed-random" => {
                let mut seed = 0;
                let mut width = None;
                for kv in args.split(',').filter(|a| !a.trim().is_empty()) {
                    let (k, v) = kv.split_once('=').ok_or_else(bad)?;
                    let v: u64 = v.trim().parse().map_err(|_| bad())?;
                    match k.trim() {
                        "seed" => seed = v,
                        "width" if v > 0 => width = Some(v as usize),
                        _ => return Err(bad()),
                    }
                }
                Ok(ProviderSpec::FixedRandom { seed, width })
            }
            _ => Err(bad()),
        }
    }
}

impl serde::Serialize for ProviderSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> serde::Deserialize<'de> for ProviderSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Frozen sketch feature extractor feeding the matching features.
pub trait FeatureProvider: Send + Sync {
    fn id(&self) -> String;

    /// Output channels; zero disables the branch.
    fn channels(&self) -> usize;

    /// `(B, 1, H, W)` sketch batch to `(B, channels, h, w)` features. The
    /// caller resamples to the size it needs.
    fn features(&self, sketch: &Tensor) -> Result<Tensor>;
}

/// Frozen network exposing activations at numbered conv depths.
pub trait PerceptualProvider: Send + Sync {
    fn id(&self) -> String;

    /// Number of conv layers; valid depths are `1..=depth_count()`.
    fn depth_count(&self) -> usize;

    /// Activations after conv `depth` (1-based, post-activation) for each
    /// requested depth, in request order. Input is `(B, 3, H, W)` in `[0, 1]`.
    fn features(&self, image: &Tensor, depths: &[usize]) -> Result<Vec<Tensor>>;
}

type Registry<T> = Mutex<HashMap<String, Arc<T>>>;

fn feature_registry() -> &'static Registry<dyn FeatureProvider> {
    static R: OnceLock<Registry<dyn FeatureProvider>> = OnceLock::new();
    R.get_or_init(Default::default)
}

fn perceptual_registry() -> &'static Registry<dyn PerceptualProvider> {
    static R: OnceLock<Registry<dyn PerceptualProvider>> = OnceLock::new();
    R.get_or_init(Default::default)
}

/// Makes `provider` resolvable as `external(name)` for the generator's
/// illustration-feature branch.
pub fn register_feature_provider(name: &str, provider: Arc<dyn FeatureProvider>) {
    feature_registry()
        .lock()
        .expect("provider registry poisoned")
        .insert(name.to_string(), provider);
}

/// Makes `provider` resolvable as `external(name)` for the perceptual loss.
pub fn register_perceptual_provider(name: &str, provider: Arc<dyn PerceptualProvider>) {
    perceptual_registry()
        .lock()
        .expect("provider registry poisoned")
        .insert(name.to_string(), provider);
}

pub struct NullProvider;

impl FeatureProvider for NullProvider {
    fn id(&self) -> String {
        "null".into()
    }

    fn channels(&self) -> usize {
        0
    }

    fn features(&self, sketch: &Tensor) -> Result<Tensor> {
        let (b, _, h, w) = sketch.dims4()?;
        Ok(Tensor::zeros((b, 0, h / 8, w / 8), sketch.dtype(), sketch.device())?)
    }
}

/// Six frozen random 3x3 convs, three of them stride 2, so the output sits
/// at 1/8 resolution.
pub struct FixedRandomFeatures {
    seed: u64,
    width: usize,
    convs: Vec<Conv>,
}

impl FixedRandomFeatures {
    pub const DEFAULT_WIDTH: usize = 8;

    pub fn new(seed: u64, width: usize, device: &Device) -> Result<Self> {
        let widths = [width, width, 2 * width, 2 * width, 4 * width, 4 * width];
        let strides = [1, 2, 1, 2, 1, 2];
        let mut convs = Vec::with_capacity(6);
        let mut c_in = 1;
        for (i, (&w, &s)) in widths.iter().zip(&strides).enumerate() {
            let name = format!("illustration.{i}");
            convs.push(Conv::frozen(seed, &name, c_in, w, ConvSpec::k3().stride(s), device)?);
            c_in = w;
        }
        Ok(Self { seed, width, convs })
    }
}

impl FeatureProvider for FixedRandomFeatures {
    fn id(&self) -> String {
        ProviderSpec::FixedRandom {
            seed: self.seed,
            width: Some(self.width),
        }
        .to_string()
    }

    fn channels(&self) -> usize {
        4 * self.width
    }

    fn features(&self, sketch: &Tensor) -> Result<Tensor> {
        let mut x = sketch.clone();
        for conv in &self.convs {
            x = leaky(&conv.forward(&x)?)?;
        }
        Ok(x.detach())
    }
}

fn fallback_features(device: &Device) -> Result<Arc<dyn FeatureProvider>> {
    Ok(Arc::new(FixedRandomFeatures::new(
        0,
        FixedRandomFeatures::DEFAULT_WIDTH,
        device,
    )?))
}

/// Resolves the illustration-feature branch provider.
pub fn feature_provider(spec: &ProviderSpec, device: &Device) -> Result<Arc<dyn FeatureProvider>> {
    match spec {
        ProviderSpec::Null => Ok(Arc::new(NullProvider)),
        ProviderSpec::FixedRandom { seed, width } => Ok(Arc::new(FixedRandomFeatures::new(
            *seed,
            width.unwrap_or(FixedRandomFeatures::DEFAULT_WIDTH),
            device,
        )?)),
        ProviderSpec::External(name) => {
            let found = feature_registry()
                .lock()
                .expect("provider registry poisoned")
                .get(name)
                .cloned();
            match found {
                Some(p) => Ok(p),
                None => {
                    log::warn!("feature provider external({name}) is not registered; using fixed-random(seed=0)");
                    fallback_features(device)
                }
            }
        }
        ProviderSpec::Vgg19 => Err(Error::Config(
            "vgg19 is a perceptual provider, not a sketch feature provider".into(),
        )),
    }
}

/// Block layout of VGG-19: conv counts per block, 2x2 max pool after each.
const VGG19_BLOCKS: [usize; 5] = [2, 2, 4, 4, 4];
const VGG19_WIDTH_MULT: [usize; 5] = [1, 2, 4, 8, 8];
/// Index of each conv in torchvision's `vgg19().features`.
const VGG19_TORCH_INDICES: [usize; 16] = [0, 2, 5, 7, 10, 12, 14, 16, 19, 21, 23, 25, 28, 30, 32, 34];
const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

/// VGG-19 shaped network. Depth `d` is the `d`-th 3x3 conv in the canonical
/// order conv1_1, conv1_2, conv2_1, ..., conv5_4 (16 in total), taken after
/// its ReLU. Depths 1, 3, 5, 9, 13 are therefore the first conv of blocks
/// one to five. Pooling is skipped once a map is down to a single pixel, so
/// tiny inputs still reach every depth.
pub struct VggStyle {
    id: String,
    convs: Vec<Conv>,
    pool_after: Vec<bool>,
    mean: Tensor,
    std: Tensor,
}

impl VggStyle {
    pub fn fixed_random(seed: u64, base_width: usize, device: &Device) -> Result<Self> {
        let mut convs = Vec::new();
        let mut c_in = 3;
        let mut idx = 0;
        for (block, &count) in VGG19_BLOCKS.iter().enumerate() {
            let width = base_width * VGG19_WIDTH_MULT[block];
            for _ in 0..count {
                let name = format!("vgg.{idx}");
                convs.push(Conv::frozen(seed, &name, c_in, width, ConvSpec::k3(), device)?);
                c_in = width;
                idx += 1;
            }
        }
        let id = ProviderSpec::FixedRandom {
            seed,
            width: Some(base_width),
        }
        .to_string();
        Self::assemble(id, convs, device)
    }

    /// Loads torchvision-named `features.N.weight` / `features.N.bias`
    /// tensors from `vgg19.safetensors` in the weights directory.
    pub fn pretrained(device: &Device) -> Result<Self> {
        let dir = std::env::var_os(WEIGHTS_DIR_ENV)
            .map(PathBuf::from)
            .ok_or_else(|| Error::Config(format!("{WEIGHTS_DIR_ENV} is not set")))?;
        let path = dir.join("vgg19.safetensors");
        let tensors = candle_core::safetensors::load(&path, device)?;
        let mut convs = Vec::new();
        for idx in VGG19_TORCH_INDICES {
            let get = |suffix: &str| {
                tensors
                    .get(&format!("features.{idx}.{suffix}"))
                    .cloned()
                    .ok_or_else(|| {
                        Error::Config(format!("{} lacks features.{idx}.{suffix}", path.display()))
                    })
            };
            let w = get("weight")?.to_dtype(DType::F32)?;
            let b = get("bias")?.to_dtype(DType::F32)?;
            convs.push(Conv::from_tensors(w, b, ConvSpec::k3()));
        }
        Self::assemble("vgg19".into(), convs, device)
    }

    fn assemble(id: String, convs: Vec<Conv>, device: &Device) -> Result<Self> {
        let mut pool_after = Vec::new();
        for &count in &VGG19_BLOCKS {
            for i in 0..count {
                pool_after.push(i + 1 == count);
            }
        }
        Ok(Self {
            id,
            convs,
            pool_after,
            mean: Tensor::from_slice(&IMAGENET_MEAN, (1, 3, 1, 1), device)?,
            std: Tensor::from_slice(&IMAGENET_STD, (1, 3, 1, 1), device)?,
        })
    }
}

impl PerceptualProvider for VggStyle {
    fn id(&self) -> String {
        self.id.clone()
    }

    fn depth_count(&self) -> usize {
        self.convs.len()
    }

    fn features(&self, image: &Tensor, depths: &[usize]) -> Result<Vec<Tensor>> {
        if let Some(&d) = depths.iter().find(|&&d| d == 0 || d > self.convs.len()) {
            return Err(Error::Config(format!(
                "{} has depths 1..={}, requested {d}",
                self.id,
                self.convs.len()
            )));
        }
        let deepest = depths.iter().copied().max().unwrap_or(0);
        let dtype = image.dtype();
        let mut x = image
            .broadcast_sub(&self.mean.to_dtype(dtype)?)?
            .broadcast_div(&self.std.to_dtype(dtype)?)?;
        let mut taps: Vec<Option<Tensor>> = vec![None; self.convs.len() + 1];
        for (i, conv) in self.convs.iter().enumerate().take(deepest) {
            x = conv.forward(&x)?.relu()?;
            taps[i + 1] = Some(x.clone());
            let (_, _, h, w) = x.dims4()?;
            if self.pool_after[i] && h >= 2 && w >= 2 {
                x = max_pool2x2(&x)?;
            }
        }
        Ok(depths
            .iter()
            .map(|&d| taps[d].clone().expect("depth computed"))
            .collect())
    }
}

pub const DEFAULT_PERCEPTUAL_WIDTH: usize = 64;

/// Resolves the perceptual-loss provider.
pub fn perceptual_provider(
    spec: &ProviderSpec,
    device: &Device,
) -> Result<Arc<dyn PerceptualProvider>> {
    let fallback = |device: &Device| -> Result<Arc<dyn PerceptualProvider>> {
        Ok(Arc::new(VggStyle::fixed_random(0, DEFAULT_PERCEPTUAL_WIDTH, device)?))
    };
    match spec {
        ProviderSpec::Null => Err(Error::Config(
            "the perceptual loss needs a provider; use lambda2 = 0 to disable it".into(),
        )),
        ProviderSpec::FixedRandom { seed, width } => Ok(Arc::new(VggStyle::fixed_random(
            *seed,
            width.unwrap_or(DEFAULT_PERCEPTUAL_WIDTH),
            device,
        )?)),
        ProviderSpec::Vgg19 => match VggStyle::pretrained(device) {
            Ok(v) => Ok(Arc::new(v)),
            Err(e) => {
                log::warn!("pretrained vgg19 unavailable ({e}); using fixed-random(seed=0)");
                fallback(device)
            }
        },
        ProviderSpec::External(name) => {
            let found = perceptual_registry()
                .lock()
                .expect("provider registry poisoned")
                .get(name)
                .cloned();
            match found {
                Some(p) => Ok(p),
                None => {
                    log::warn!("perceptual provider external({name}) is not registered; using fixed-random(seed=0)");
                    fallback(device)
                }
            }
        }
    }
}
