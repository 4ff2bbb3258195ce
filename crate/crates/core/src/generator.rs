//! The colorization generator `C_e = G(S_p, C_p, S_n)`.
//!
//! Four encoders feed a coarse-to-fine decoder:
//!
//! * `head` encodes the target sketch `S_n` (U-Net backbone, skip taps).
//! * `color` encodes the reference frame `C_p`; its taps are the payloads.
//! * `sketch` (dilated, shared between `S_p` and `S_n`) provides matching
//!   features.
//! * a frozen [`FeatureProvider`] adds illustration features at the coarsest
//!   level.
//!
//! Each encoder taps four resolutions, listed finest first: full, 1/2, 1/4,
//! 1/8. Decoder level `k` runs at `1/2^(3-k)` resolution. At level 0 the
//! reference payload is warped by matching `[sketch(S_n), illus(S_n)]`
//! against `[sketch(S_p), illus(S_p)]`; at level `k > 0` the query is
//! `[RU(k-1), sketch_k(S_n)]` and the key is `[color_k(C_p), sketch_k(S_p)]`.
//! The warped payload is concatenated with the head skip and passed to an
//! upsampling unit (ResNeXt blocks plus pixel shuffle). Level 3 is off by
//! default; the last unit then feeds the two output convs directly.
//!
//! With CMFT disabled at a level (ablation), level 0 concatenates the raw
//! reference payload and levels `k > 0` concatenate the previous unit's
//! output instead of a warped payload. No correlation is computed.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cmft::{transfer_dense, transfer_streaming, TileStats};
use crate::error::{Error, Result};
use crate::nn::{cat_channels, from_positions, leaky, to_positions, Conv, ConvSpec, ParamStore};
use crate::providers::{feature_provider, FeatureProvider, ProviderSpec};
use crate::raster::{ColorImage, SketchImage};

pub const PARAMETERS_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    /// Head and color encoder widths at full, 1/2, 1/4, 1/8 resolution.
    pub encoder_widths: [usize; 4],
    /// Widths of the six sketch-encoder convs.
    pub sketch_widths: [usize; 6],
    pub sketch_dilations: [usize; 6],
    /// ResNeXt blocks per upsampling unit.
    pub ru_blocks: usize,
    pub cardinality: usize,
    /// Decoder levels that run correlation matching (subset of 0..=3).
    pub cmft_levels: Vec<u8>,
    pub ablation_no_cmft: bool,
    pub pretrained_provider: ProviderSpec,
    /// Tile edge for the streaming kernel at levels 2 and 3.
    pub tile: usize,
    pub temperature: f64,
    pub seed: u64,
}

/// Sketch encoder strides: taps after convs 0, 1, 2 and 5.
const SKETCH_STRIDES: [usize; 6] = [1, 2, 2, 2, 1, 1];
const SKETCH_TAPS: [usize; 4] = [0, 1, 2, 5];

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            encoder_widths: [64, 128, 256, 512],
            sketch_widths: [32, 64, 128, 256, 256, 256],
            sketch_dilations: [1, 1, 2, 2, 4, 4],
            ru_blocks: 2,
            cardinality: 8,
            cmft_levels: vec![0, 1, 2],
            ablation_no_cmft: false,
            pretrained_provider: ProviderSpec::FixedRandom {
                seed: 7,
                width: None,
            },
            tile: 1024,
            temperature: 1.0,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    /// Small widths for desk-scale experiments and tests.
    pub fn toy() -> Self {
        Self {
            encoder_widths: [16, 32, 64, 128],
            sketch_widths: [8, 16, 32, 64, 64, 64],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder_widths.contains(&0) || self.sketch_widths.contains(&0) {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        if self.sketch_dilations.contains(&0) {
            return Err(Error::Config("dilation rates must be at least 1".into()));
        }
        if self.cardinality == 0 {
            return Err(Error::Config("cardinality must be positive".into()));
        }
        if let Some(l) = self.cmft_levels.iter().find(|&&l| l > 3) {
            return Err(Error::Config(format!("cmft level {l} outside 0..=3")));
        }
        if self.tile == 0 {
            return Err(Error::Config("tile must be positive".into()));
        }
        if !self.temperature.is_finite() || self.temperature <= 0.0 {
            return Err(Error::Config("temperature must be positive".into()));
        }
        Ok(())
    }

    /// Whether decoder level `k` runs correlation matching.
    pub fn cmft_enabled(&self, level: u8) -> bool {
        !self.ablation_no_cmft && self.cmft_levels.contains(&level)
    }

    /// Hash of everything that determines the parameter layout and the
    /// function computed. Seed and tile size are excluded.
    pub fn fingerprint(&self) -> String {
        let mut levels = self.cmft_levels.clone();
        levels.sort_unstable();
        levels.dedup();
        let canonical = serde_json::json!({
            "encoder_widths": self.encoder_widths,
            "sketch_widths": self.sketch_widths,
            "sketch_dilations": self.sketch_dilations,
            "ru_blocks": self.ru_blocks,
            "cardinality": self.cardinality,
            "cmft_levels": levels,
            "ablation_no_cmft": self.ablation_no_cmft,
            "pretrained_provider": self.pretrained_provider.to_string(),
            "temperature": self.temperature,
        });
        let digest = Sha256::digest(canonical.to_string().as_bytes());
        digest.iter().take(12).map(|b| format!("{b:02x}")).collect()
    }

    /// Receptive field (in input pixels) of the deepest sketch-encoder tap,
    /// for the configured dilations or with all dilations set to 1.
    pub fn sketch_receptive_field(&self, dilated: bool) -> usize {
        let mut rf = 1;
        let mut jump = 1;
        for (i, &stride) in SKETCH_STRIDES.iter().enumerate() {
            let d = if dilated { self.sketch_dilations[i] } else { 1 };
            rf += 2 * d * jump;
            jump *= stride;
        }
        rf
    }
}

/// Trainable weights plus the fingerprint of the config they belong to.
#[derive(Debug, Clone)]
pub struct GeneratorParameters {
    store: ParamStore,
    fingerprint: String,
}

impl GeneratorParameters {
    pub fn version(&self) -> u32 {
        PARAMETERS_VERSION
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Snapshot of every parameter, keyed by name.
    pub fn tensors(&self) -> Result<BTreeMap<String, Tensor>> {
        self.store
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?)))
            .collect()
    }
}

/// Three-channel, stride-2 conv stack with a stride-1 first layer.
struct Encoder {
    convs: Vec<Conv>,
}

impl Encoder {
    fn new(
        store: &mut ParamStore,
        seed: u64,
        prefix: &str,
        c_in: usize,
        widths: &[usize; 4],
        dev: &Device,
    ) -> Result<Self> {
        let mut convs = Vec::new();
        let mut c = c_in;
        for (i, &w) in widths.iter().enumerate() {
            let stride = if i == 0 { 1 } else { 2 };
            convs.push(Conv::trainable(
                store,
                seed,
                &format!("{prefix}.{i}"),
                c,
                w,
                ConvSpec::k3().stride(stride),
                dev,
            )?);
            c = w;
        }
        Ok(Self { convs })
    }

    /// Taps finest first: full, 1/2, 1/4, 1/8.
    fn forward(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut taps = Vec::with_capacity(4);
        let mut h = x.clone();
        for conv in &self.convs {
            h = leaky(&conv.forward(&h)?)?;
            taps.push(h.clone());
        }
        Ok(taps)
    }
}

struct SketchEncoder {
    convs: Vec<Conv>,
}

impl SketchEncoder {
    fn new(store: &mut ParamStore, cfg: &GeneratorConfig, dev: &Device) -> Result<Self> {
        let mut convs = Vec::new();
        let mut c = 1;
        for i in 0..6 {
            let spec = ConvSpec::k3()
                .stride(SKETCH_STRIDES[i])
                .dilation(cfg.sketch_dilations[i]);
            convs.push(Conv::trainable(
                store,
                cfg.seed,
                &format!("sketch.{i}"),
                c,
                cfg.sketch_widths[i],
                spec,
                dev,
            )?);
            c = cfg.sketch_widths[i];
        }
        Ok(Self { convs })
    }

    fn forward(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut taps = Vec::with_capacity(4);
        let mut h = x.clone();
        for (i, conv) in self.convs.iter().enumerate() {
            h = leaky(&conv.forward(&h)?)?;
            if SKETCH_TAPS.contains(&i) {
                taps.push(h.clone());
            }
        }
        Ok(taps)
    }
}

struct ResNeXtBlock {
    reduce: Conv,
    grouped: Conv,
    expand: Conv,
}

impl ResNeXtBlock {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = leaky(&self.reduce.forward(x)?)?;
        let h = leaky(&self.grouped.forward(&h)?)?;
        let h = self.expand.forward(&h)?;
        leaky(&(x + h)?)
    }
}

/// Entry conv, residual grouped-conv blocks, then a conv to `4 * c_out`
/// channels and a x2 pixel shuffle.
struct UpsampleUnit {
    entry: Conv,
    blocks: Vec<ResNeXtBlock>,
    shuffle: Conv,
}

fn round_up(x: usize, m: usize) -> usize {
    x.div_ceil(m) * m
}

impl UpsampleUnit {
    fn new(
        store: &mut ParamStore,
        cfg: &GeneratorConfig,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        dev: &Device,
    ) -> Result<Self> {
        let card = cfg.cardinality;
        let width = round_up((c_in / 2).max(2 * card), 2 * card);
        let bottleneck = width / 2;
        let seed = cfg.seed;
        let entry = Conv::trainable(store, seed, &format!("{prefix}.entry"), c_in, width, ConvSpec::k3(), dev)?;
        let mut blocks = Vec::new();
        for b in 0..cfg.ru_blocks {
            let p = format!("{prefix}.block{b}");
            blocks.push(ResNeXtBlock {
                reduce: Conv::trainable(store, seed, &format!("{p}.reduce"), width, bottleneck, ConvSpec::k1(), dev)?,
                grouped: Conv::trainable(
                    store,
                    seed,
                    &format!("{p}.grouped"),
                    bottleneck,
                    bottleneck,
                    ConvSpec::k3().groups(card),
                    dev,
                )?,
                expand: Conv::trainable(store, seed, &format!("{p}.expand"), bottleneck, width, ConvSpec::k1(), dev)?,
            });
        }
        let shuffle = Conv::trainable(store, seed, &format!("{prefix}.shuffle"), width, 4 * c_out, ConvSpec::k3(), dev)?;
        Ok(Self {
            entry,
            blocks,
            shuffle,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = leaky(&self.entry.forward(x)?)?;
        for b in &self.blocks {
            h = b.forward(&h)?;
        }
        let h = self.shuffle.forward(&h)?;
        leaky(&candle_nn::ops::pixel_shuffle(&h, 2)?)
    }
}

pub struct Generator {
    config: GeneratorConfig,
    params: GeneratorParameters,
    head: Encoder,
    color: Encoder,
    sketch: SketchEncoder,
    units: Vec<UpsampleUnit>,
    out_hidden: Conv,
    out_rgb: Conv,
    illustration: Arc<dyn FeatureProvider>,
    cmft_calls: AtomicUsize,
    tile_stats: TileStats,
    device: Device,
}

impl Generator {
    /// Builds a generator with freshly initialized parameters.
    pub fn new(config: GeneratorConfig) -> Result<Self> {
        config.validate()?;
        let dev = Device::Cpu;
        let mut store = ParamStore::new();
        let seed = config.seed;
        let w = config.encoder_widths;
        let head = Encoder::new(&mut store, seed, "head", 1, &w, &dev)?;
        let color = Encoder::new(&mut store, seed, "color", 3, &w, &dev)?;
        let sketch = SketchEncoder::new(&mut store, &config, &dev)?;
        let illustration = feature_provider(&config.pretrained_provider, &dev)?;

        // unit k maps (warped payload or previous unit, head skip) at level k
        // to the color width one level finer
        let payload_width = [w[3], w[2], w[1]];
        let skip_width = [w[3], w[2], w[1]];
        let out_width = [w[2], w[1], w[0]];
        let mut units = Vec::new();
        for k in 0..3 {
            units.push(UpsampleUnit::new(
                &mut store,
                &config,
                &format!("ru{k}"),
                payload_width[k] + skip_width[k],
                out_width[k],
                &dev,
            )?);
        }
        let final_in = if config.cmft_enabled(3) { 2 * w[0] } else { w[0] };
        let out_hidden = Conv::trainable(&mut store, seed, "out.hidden", final_in, w[0], ConvSpec::k3(), &dev)?;
        let out_rgb = Conv::trainable(&mut store, seed, "out.rgb", w[0], 3, ConvSpec::k3(), &dev)?;

        let params = GeneratorParameters {
            store,
            fingerprint: config.fingerprint(),
        };
        Ok(Self {
            config,
            params,
            head,
            color,
            sketch,
            units,
            out_hidden,
            out_rgb,
            illustration,
            cmft_calls: AtomicUsize::new(0),
            tile_stats: TileStats::default(),
            device: dev,
        })
    }

    /// Builds a generator and loads `tensors` into it after checking that
    /// they were produced for a config with the same fingerprint.
    pub fn with_parameters(
        config: GeneratorConfig,
        fingerprint: &str,
        tensors: &BTreeMap<String, Tensor>,
    ) -> Result<Self> {
        if fingerprint != config.fingerprint() {
            return Err(Error::Checkpoint(format!(
                "parameters were trained for config {fingerprint}, not {}",
                config.fingerprint()
            )));
        }
        let g = Self::new(config)?;
        g.params.store.load(tensors)?;
        Ok(g)
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn parameters(&self) -> &GeneratorParameters {
        &self.params
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Number of correlation-matching evaluations since construction.
    pub fn cmft_invocations(&self) -> usize {
        self.cmft_calls.load(Ordering::Relaxed)
    }

    /// Scratch statistics of the streaming kernel used at levels 2 and 3.
    pub fn tile_stats(&self) -> &TileStats {
        &self.tile_stats
    }

    fn check_resolution(h: usize, w: usize) -> Result<()> {
        if h == 0 || w == 0 || h % 8 != 0 || w % 8 != 0 {
            return Err(Error::Validation(format!(
                "resolution {h}x{w} is not a positive multiple of 8"
            )));
        }
        Ok(())
    }

    fn check_batch(x: &Tensor, channels: usize) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        if c != channels {
            return Err(Error::Validation(format!("expected {channels} channels, got {c}")));
        }
        Self::check_resolution(h, w)
    }

    /// Head-encoder taps of `(B, 1, H, W)` sketches, finest first.
    pub fn encode_head_tensor(&self, sketch: &Tensor) -> Result<Vec<Tensor>> {
        Self::check_batch(sketch, 1)?;
        self.head.forward(sketch)
    }

    pub fn encode_sketch_tensor(&self, sketch: &Tensor) -> Result<Vec<Tensor>> {
        Self::check_batch(sketch, 1)?;
        self.sketch.forward(sketch)
    }

    pub fn encode_color_tensor(&self, color: &Tensor) -> Result<Vec<Tensor>> {
        Self::check_batch(color, 3)?;
        self.color.forward(color)
    }

    /// Head-encoder taps, finest first (`[256, 128, 64, 32]` for a 256 input).
    pub fn encode_head(&self, sketch: &SketchImage) -> Result<Vec<Tensor>> {
        self.encode_head_tensor(&sketch.to_tensor(&self.device)?)
    }

    pub fn encode_sketch(&self, sketch: &SketchImage) -> Result<Vec<Tensor>> {
        self.encode_sketch_tensor(&sketch.to_tensor(&self.device)?)
    }

    pub fn encode_color(&self, color: &ColorImage) -> Result<Vec<Tensor>> {
        self.encode_color_tensor(&color.to_tensor(&self.device)?)
    }

    /// Illustration features resampled to the coarsest sketch tap (1/8).
    pub fn pretrained_features_tensor(&self, sketch: &Tensor) -> Result<Tensor> {
        Self::check_batch(sketch, 1)?;
        let (_, _, h, w) = sketch.dims4()?;
        let f = self.illustration.features(sketch)?;
        let (b, c, fh, fw) = f.dims4()?;
        let (th, tw) = (h / 8, w / 8);
        if c == 0 {
            return Ok(Tensor::zeros((b, 0, th, tw), sketch.dtype(), &self.device)?);
        }
        let f = if (fh, fw) == (th, tw) {
            f
        } else if fh % th == 0 && fw % tw == 0 && fh / th == fw / tw {
            f.avg_pool2d(fh / th)?
        } else {
            f.interpolate2d(th, tw)?
        };
        Ok(f.detach())
    }

    pub fn pretrained_features(&self, sketch: &SketchImage) -> Result<Tensor> {
        self.pretrained_features_tensor(&sketch.to_tensor(&self.device)?)
    }

    pub fn illustration_provider(&self) -> &dyn FeatureProvider {
        self.illustration.as_ref()
    }

    fn correlate(&self, query: &Tensor, key: &Tensor, payload: &Tensor, level: u8) -> Result<Tensor> {
        self.cmft_calls.fetch_add(1, Ordering::Relaxed);
        let (_, _, h, w) = payload.dims4()?;
        let (q, k, v) = (to_positions(query)?, to_positions(key)?, to_positions(payload)?);
        let out = if level >= 2 {
            transfer_streaming(&q, &k, &v, self.config.temperature, self.config.tile, Some(&self.tile_stats))?
        } else {
            transfer_dense(&q, &k, &v, self.config.temperature)?
        };
        from_positions(&out, h, w)
    }

    /// Batched forward pass on `(B, 1, H, W)` sketches and `(B, 3, H, W)`
    /// reference colors. Returns `(B, 3, H, W)` in `(0, 1)`.
    pub fn forward_tensors(&self, prev_sketch: &Tensor, prev_color: &Tensor, next_sketch: &Tensor) -> Result<Tensor> {
        Self::check_batch(prev_sketch, 1)?;
        Self::check_batch(prev_color, 3)?;
        Self::check_batch(next_sketch, 1)?;
        let dims = |t: &Tensor| -> Result<(usize, usize, usize)> {
            let (b, _, h, w) = t.dims4()?;
            Ok((b, h, w))
        };
        let shape = dims(next_sketch)?;
        if dims(prev_sketch)? != shape || dims(prev_color)? != shape {
            return Err(Error::Validation(format!(
                "inputs disagree in size: {:?}, {:?}, {:?}",
                prev_sketch.dims(),
                prev_color.dims(),
                next_sketch.dims()
            )));
        }

        let head = self.head.forward(next_sketch)?;
        let color = self.color.forward(prev_color)?;
        let any_cmft = (0..4).any(|l| self.config.cmft_enabled(l));
        let (sk_n, sk_p) = if any_cmft {
            (self.sketch.forward(next_sketch)?, self.sketch.forward(prev_sketch)?)
        } else {
            (Vec::new(), Vec::new())
        };

        // level 0 at 1/8
        let warped = if self.config.cmft_enabled(0) {
            let illus_n = self.pretrained_features_tensor(next_sketch)?;
            let illus_p = self.pretrained_features_tensor(prev_sketch)?;
            let q = cat_channels(&[&sk_n[3], &illus_n])?;
            let k = cat_channels(&[&sk_p[3], &illus_p])?;
            self.correlate(&q, &k, &color[3], 0)?
        } else {
            color[3].clone()
        };
        let mut x = self.units[0].forward(&cat_channels(&[&warped, &head[3]])?)?;

        // levels 1, 2 at 1/4, 1/2
        for level in 1..3u8 {
            let tap = 3 - level as usize;
            let fused = if self.config.cmft_enabled(level) {
                let q = cat_channels(&[&x, &sk_n[tap]])?;
                let k = cat_channels(&[&color[tap], &sk_p[tap]])?;
                self.correlate(&q, &k, &color[tap], level)?
            } else {
                x
            };
            x = self.units[level as usize].forward(&cat_channels(&[&fused, &head[tap]])?)?;
        }

        // optional level 3 at full resolution
        if self.config.cmft_enabled(3) {
            let q = cat_channels(&[&x, &sk_n[0]])?;
            let k = cat_channels(&[&color[0], &sk_p[0]])?;
            let warped = self.correlate(&q, &k, &color[0], 3)?;
            x = cat_channels(&[&warped, &head[0]])?;
        }

        let h = leaky(&self.out_hidden.forward(&x)?)?;
        Ok(candle_nn::ops::sigmoid(&self.out_rgb.forward(&h)?)?)
    }

    /// Colorizes `next_sketch` using the previous sketch/color pair.
    pub fn forward(&self, prev_sketch: &SketchImage, prev_color: &ColorImage, next_sketch: &SketchImage) -> Result<ColorImage> {
        if !prev_sketch.same_shape(next_sketch)
            || prev_color.height() != next_sketch.height()
            || prev_color.width() != next_sketch.width()
        {
            return Err(Error::Validation("inputs disagree in size".into()));
        }
        let out = self.forward_tensors(
            &prev_sketch.to_tensor(&self.device)?,
            &prev_color.to_tensor(&self.device)?,
            &next_sketch.to_tensor(&self.device)?,
        )?;
        ColorImage::from_tensor(&out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> GeneratorConfig {
        GeneratorConfig {
            encoder_widths: [8, 16, 16, 32],
            sketch_widths: [4, 8, 8, 16, 16, 16],
            ru_blocks: 1,
            cardinality: 4,
            pretrained_provider: ProviderSpec::FixedRandom { seed: 7, width: Some(2) },
            ..GeneratorConfig::default()
        }
    }

    fn sketch(size: usize, phase: usize) -> SketchImage {
        SketchImage::from_fn(size, size, |y, x| [if (x + y + phase) % 7 == 0 { 0.0 } else { 1.0 }]).unwrap()
    }

    fn color(size: usize) -> ColorImage {
        ColorImage::from_fn(size, size, |y, x| [y as f32 / size as f32, x as f32 / size as f32, 0.5]).unwrap()
    }

    #[test]
    fn encoder_resolution_schedule() {
        let g = Generator::new(tiny()).unwrap();
        for size in [64usize, 128] {
            let s = sketch(size, 0);
            let sizes = |taps: Vec<Tensor>| taps.iter().map(|t| t.dims()[2]).collect::<Vec<_>>();
            let expect = vec![size, size / 2, size / 4, size / 8];
            assert_eq!(sizes(g.encode_head(&s).unwrap()), expect);
            assert_eq!(sizes(g.encode_sketch(&s).unwrap()), expect);
            assert_eq!(sizes(g.encode_color(&color(size)).unwrap()), expect);
            assert_eq!(g.pretrained_features(&s).unwrap().dims()[2], size / 8);
        }
    }

    #[test]
    fn rejects_non_multiple_of_eight() {
        let g = Generator::new(tiny()).unwrap();
        let s = SketchImage::filled(20, 20, [1.0]).unwrap();
        assert!(matches!(g.encode_head(&s), Err(Error::Validation(_))));
        let c = ColorImage::filled(20, 20, [1.0; 3]).unwrap();
        assert!(matches!(g.encode_color(&c), Err(Error::Validation(_))));
    }

    #[test]
    fn dilation_widens_receptive_field() {
        let cfg = GeneratorConfig::default();
        // 1 + 2*(1 + 1 + 2 + 4 + 8 + 8) and 1 + 2*(1 + 1 + 2*2 + 2*4 + 4*8 + 4*8)
        assert_eq!(cfg.sketch_receptive_field(false), 49);
        assert_eq!(cfg.sketch_receptive_field(true), 157);
    }

    #[test]
    fn invalid_configs() {
        let mut c = tiny();
        c.cmft_levels = vec![4];
        assert!(Generator::new(c).is_err());
        let mut c = tiny();
        c.sketch_dilations[2] = 0;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.cardinality = 0;
        assert!(Generator::new(c).is_err());
    }

    #[test]
    fn mismatched_inputs_rejected() {
        let g = Generator::new(tiny()).unwrap();
        let r = g.forward(&sketch(32, 0), &color(64), &sketch(32, 1));
        assert!(matches!(r, Err(Error::Validation(_))));
    }

    #[test]
    fn fingerprint_ignores_seed_and_tile() {
        let a = tiny();
        let b = GeneratorConfig { seed: 99, tile: 7, ..tiny() };
        assert_eq!(a.fingerprint(), b.fingerprint());
        let c = GeneratorConfig { ablation_no_cmft: true, ..tiny() };
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn level_three_is_optional() {
        let cfg = GeneratorConfig { cmft_levels: vec![0, 1, 2, 3], tile: 64, ..tiny() };
        let g = Generator::new(cfg).unwrap();
        let out = g.forward(&sketch(32, 0), &color(32), &sketch(32, 2)).unwrap();
        assert_eq!((out.height(), out.width()), (32, 32));
        assert_eq!(g.cmft_invocations(), 4);
        assert!(g.tile_stats().peak_logit_entries() <= 64 * 64);
    }
}
