//! Training objective: `lambda1 * L1 + lambda2 * perceptual`.

use std::sync::Arc;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::providers::{perceptual_provider, PerceptualProvider, ProviderSpec};
use crate::raster::ColorImage;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda_color: f64,
    pub lambda_perceptual: f64,
    /// Conv depths of the perceptual network, 1-based.
    pub depths: Vec<usize>,
    pub provider: ProviderSpec,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_color: 10.0,
            lambda_perceptual: 2e-2,
            depths: vec![1, 3, 5, 9, 13],
            provider: ProviderSpec::Vgg19,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_color >= 0.0 && self.lambda_color.is_finite()) {
            return Err(Error::Config(format!("lambda_color {} must be >= 0", self.lambda_color)));
        }
        if !(self.lambda_perceptual >= 0.0 && self.lambda_perceptual.is_finite()) {
            return Err(Error::Config(format!(
                "lambda_perceptual {} must be >= 0",
                self.lambda_perceptual
            )));
        }
        if self.depths.is_empty() {
            return Err(Error::Config("perceptual depth set is empty".into()));
        }
        Ok(())
    }
}

fn check_pair(y: &Tensor, g: &Tensor) -> Result<()> {
    if y.dims() != g.dims() {
        return Err(Error::Validation(format!(
            "loss operands differ in shape: {:?} vs {:?}",
            y.dims(),
            g.dims()
        )));
    }
    Ok(())
}

/// Mean absolute difference, as a scalar tensor.
pub fn color_loss_tensor(y: &Tensor, g: &Tensor) -> Result<Tensor> {
    check_pair(y, g)?;
    Ok((y - g)?.abs()?.mean_all()?)
}

/// Sum over depths of the mean squared feature difference.
pub fn perceptual_loss_tensor(
    y: &Tensor,
    g: &Tensor,
    provider: &dyn PerceptualProvider,
    depths: &[usize],
) -> Result<Tensor> {
    check_pair(y, g)?;
    if depths.is_empty() {
        return Err(Error::Config("perceptual depth set is empty".into()));
    }
    let fy = provider.features(&y.detach(), depths)?;
    let fg = provider.features(g, depths)?;
    let mut total: Option<Tensor> = None;
    for (a, b) in fy.iter().zip(&fg) {
        let term = (a.detach() - b)?.sqr()?.mean_all()?;
        total = Some(match total {
            None => term,
            Some(t) => (t + term)?,
        });
    }
    Ok(total.expect("non-empty depths"))
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

pub fn color_loss(y: &ColorImage, g: &ColorImage) -> Result<f64> {
    if !y.same_shape(g) {
        return Err(Error::Validation("images differ in size".into()));
    }
    y.mean_abs_diff(g)
}

pub fn perceptual_loss(
    y: &ColorImage,
    g: &ColorImage,
    provider: &dyn PerceptualProvider,
    depths: &[usize],
) -> Result<f64> {
    if !y.same_shape(g) {
        return Err(Error::Validation("images differ in size".into()));
    }
    let dev = Device::Cpu;
    scalar(&perceptual_loss_tensor(
        &y.to_tensor(&dev)?,
        &g.to_tensor(&dev)?,
        provider,
        depths,
    )?)
}

/// Individual terms of one loss evaluation.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub color: Tensor,
    pub perceptual: Option<Tensor>,
    pub total: Tensor,
}

impl LossTerms {
    pub fn color_value(&self) -> Result<f64> {
        scalar(&self.color)
    }

    /// Zero when the perceptual term was skipped because its weight is zero.
    pub fn perceptual_value(&self) -> Result<f64> {
        self.perceptual.as_ref().map_or(Ok(0.0), scalar)
    }

    pub fn total_value(&self) -> Result<f64> {
        scalar(&self.total)
    }
}

/// A loss config bound to a resolved perceptual provider.
#[derive(Clone)]
pub struct Objective {
    config: LossConfig,
    provider: Option<Arc<dyn PerceptualProvider>>,
}

impl Objective {
    /// Resolves the provider named in `config`. With `lambda_perceptual == 0`
    /// no provider is constructed.
    pub fn new(config: LossConfig) -> Result<Self> {
        config.validate()?;
        let provider = if config.lambda_perceptual > 0.0 {
            let p = perceptual_provider(&config.provider, &Device::Cpu)?;
            Self::check_depths(&config, p.as_ref())?;
            Some(p)
        } else {
            None
        };
        Ok(Self { config, provider })
    }

    pub fn with_provider(config: LossConfig, provider: Arc<dyn PerceptualProvider>) -> Result<Self> {
        config.validate()?;
        Self::check_depths(&config, provider.as_ref())?;
        Ok(Self {
            config,
            provider: Some(provider),
        })
    }

    fn check_depths(config: &LossConfig, p: &dyn PerceptualProvider) -> Result<()> {
        if let Some(&d) = config.depths.iter().find(|&&d| d == 0 || d > p.depth_count()) {
            return Err(Error::Config(format!(
                "provider {} has no depth {d} (1..={})",
                p.id(),
                p.depth_count()
            )));
        }
        Ok(())
    }

    pub fn config(&self) -> &LossConfig {
        &self.config
    }

    pub fn provider(&self) -> Option<&dyn PerceptualProvider> {
        self.provider.as_deref()
    }

    /// Loss terms for target `y` and prediction `g`, both `(B, 3, H, W)`.
    pub fn terms(&self, y: &Tensor, g: &Tensor) -> Result<LossTerms> {
        let color = color_loss_tensor(y, g)?;
        let mut total = (&color * self.config.lambda_color)?;
        let perceptual = match (&self.provider, self.config.lambda_perceptual > 0.0) {
            (Some(p), true) => {
                let term = perceptual_loss_tensor(y, g, p.as_ref(), &self.config.depths)?;
                total = (total + (&term * self.config.lambda_perceptual)?)?;
                Some(term)
            }
            _ => None,
        };
        Ok(LossTerms {
            color,
            perceptual,
            total,
        })
    }

    pub fn total_loss(&self, y: &ColorImage, g: &ColorImage) -> Result<f64> {
        if !y.same_shape(g) {
            return Err(Error::Validation("images differ in size".into()));
        }
        let dev = Device::Cpu;
        let y = y.to_tensor(&dev)?.to_dtype(DType::F64)?;
        let g = g.to_tensor(&dev)?.to_dtype(DType::F64)?;
        let t = self.terms(&y, &g)?;
        // recombined from the scalar terms so the result is linear in the weights
        Ok(self.config.lambda_color * t.color_value()? + self.config.lambda_perceptual * t.perceptual_value()?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::providers::VggStyle;

    fn small_objective(lambda_color: f64, lambda_perceptual: f64) -> Objective {
        let cfg = LossConfig {
            lambda_color,
            lambda_perceptual,
            provider: "fixed-random(seed=3,width=4)".parse().unwrap(),
            ..LossConfig::default()
        };
        Objective::new(cfg).unwrap()
    }

    fn gradient_image(h: usize, w: usize, phase: f32) -> ColorImage {
        ColorImage::from_fn(h, w, |y, x| {
            let v = ((x as f32 * 0.7 + y as f32 * 0.3 + phase).sin() + 1.0) / 2.0;
            [v, 1.0 - v, 0.5]
        })
        .unwrap()
    }

    #[test]
    fn color_loss_examples() {
        let ones = ColorImage::filled(4, 4, [1.0; 3]).unwrap();
        let zeros = ColorImage::filled(4, 4, [0.0; 3]).unwrap();
        let threes = ColorImage::filled(4, 4, [0.75; 3]).unwrap();
        assert_eq!(color_loss(&ones, &ones).unwrap(), 0.0);
        assert_eq!(color_loss(&ones, &zeros).unwrap(), 1.0);
        assert_eq!(color_loss(&ones, &threes).unwrap(), 0.25);
        let other = ColorImage::filled(4, 5, [1.0; 3]).unwrap();
        assert!(matches!(color_loss(&ones, &other), Err(Error::Validation(_))));
    }

    #[test]
    fn perceptual_symmetric_and_zero_on_identity() {
        let p = VggStyle::fixed_random(3, 4, &Device::Cpu).unwrap();
        let a = gradient_image(16, 16, 0.0);
        let b = gradient_image(16, 16, 1.3);
        let depths = [1, 3, 5, 9, 13];
        assert_eq!(perceptual_loss(&a, &a, &p, &depths).unwrap(), 0.0);
        let ab = perceptual_loss(&a, &b, &p, &depths).unwrap();
        let ba = perceptual_loss(&b, &a, &p, &depths).unwrap();
        assert!(ab > 0.0);
        assert!((ab - ba).abs() <= 1e-6 * ab.max(1.0), "{ab} vs {ba}");
    }

    #[test]
    fn checkerboard_vs_blank_is_positive() {
        let p = VggStyle::fixed_random(3, 4, &Device::Cpu).unwrap();
        let blank = ColorImage::filled(16, 16, [1.0; 3]).unwrap();
        let checker = ColorImage::from_fn(16, 16, |y, x| if (x / 2 + y / 2) % 2 == 0 { [0.0; 3] } else { [1.0; 3] }).unwrap();
        assert!(perceptual_loss(&checker, &blank, &p, &[1, 3, 5, 9, 13]).unwrap() > 0.0);
    }

    #[test]
    fn total_loss_identities() {
        let y = gradient_image(8, 8, 0.0);
        let g = gradient_image(8, 8, 0.9);
        assert_eq!(small_objective(10.0, 2e-2).total_loss(&y, &y).unwrap(), 0.0);

        let l1 = color_loss(&y, &g).unwrap();
        let t = small_objective(10.0, 0.0).total_loss(&y, &g).unwrap();
        assert!((t - 10.0 * l1).abs() < 1e-6, "{t} vs {}", 10.0 * l1);

        let obj = small_objective(0.0, 1.0);
        let p = perceptual_loss(&y, &g, obj.provider().unwrap(), &[1, 3, 5, 9, 13]).unwrap();
        let t = obj.total_loss(&y, &g).unwrap();
        assert!((t - p).abs() <= 1e-6 * p.max(1.0));
    }

    #[test]
    fn defaults() {
        let c = LossConfig::default();
        assert_eq!(c.lambda_color, 10.0);
        assert_eq!(c.lambda_perceptual, 2e-2);
        assert_eq!(c.depths, vec![1, 3, 5, 9, 13]);
    }

    #[test]
    fn bad_configs() {
        let cfg = LossConfig { depths: vec![], ..LossConfig::default() };
        assert!(Objective::new(cfg).is_err());
        let cfg = LossConfig { lambda_color: -1.0, ..LossConfig::default() };
        assert!(Objective::new(cfg).is_err());
        let cfg = LossConfig {
            depths: vec![20],
            provider: "fixed-random(seed=1,width=2)".parse().unwrap(),
            ..LossConfig::default()
        };
        assert!(matches!(Objective::new(cfg), Err(Error::Config(_))));
    }
}
