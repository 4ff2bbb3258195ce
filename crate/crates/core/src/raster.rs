//! Interleaved `[0, 1]` images and PNG I/O.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};

/// `H x W x C` image with values in `[0, 1]`, stored row-major and
/// channel-interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster<const C: usize> {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

/// RGB frame.
pub type ColorImage = Raster<3>;
/// Line art: white background near 1, dark strokes near 0.
pub type SketchImage = Raster<1>;

impl<const C: usize> Raster<C> {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Validation(format!("empty {height}x{width} image")));
        }
        if data.len() != height * width * C {
            return Err(Error::Dimension(format!(
                "{height}x{width}x{C} image needs {} values, got {}",
                height * width * C,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Validation(format!(
                "pixel value {v} outside [0, 1]"
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: [f32; C]) -> Result<Self> {
        Self::from_fn(height, width, |_, _| value)
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize) -> [f32; C],
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * C);
        for y in 0..height {
            for x in 0..width {
                data.extend(f(y, x));
            }
        }
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        C
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; C] {
        let o = (y * self.width + x) * C;
        let mut p = [0.0; C];
        p.copy_from_slice(&self.data[o..o + C]);
        p
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.height == other.height && self.width == other.width
    }

    fn check_same_shape(&self, other: &Self) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::Dimension(format!(
                "images differ in size: {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }

    /// Mean absolute difference over all pixels and channels.
    pub fn mean_abs_diff(&self, other: &Self) -> Result<f64> {
        self.check_same_shape(other)?;
        let sum: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a as f64 - *b as f64).abs())
            .sum();
        Ok(sum / self.data.len() as f64)
    }

    /// `(1, C, H, W)` f32 tensor.
    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        let t = Tensor::from_slice(&self.data, (1, self.height, self.width, C), device)?;
        Ok(t.permute((0, 3, 1, 2))?.contiguous()?)
    }

    /// Reads one image out of a `(B, C, H, W)` or `(C, H, W)` tensor,
    /// clamping into `[0, 1]`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let t = match t.rank() {
            4 => {
                if t.dim(0)? != 1 {
                    return Err(Error::Dimension(format!(
                        "expected a single image, got batch of {}",
                        t.dim(0)?
                    )));
                }
                t.squeeze(0)?
            }
            3 => t.clone(),
            r => return Err(Error::Dimension(format!("image tensor of rank {r}"))),
        };
        let (c, h, w) = t.dims3()?;
        if c != C {
            return Err(Error::Dimension(format!("expected {C} channels, got {c}")));
        }
        let data = t
            .permute((1, 2, 0))?
            .to_dtype(DType::F32)?
            .flatten_all()?
            .to_vec1::<f32>()?
            .into_iter()
            .map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) })
            .collect();
        Self::new(h, w, data)
    }

    /// Bilinear resize.
    pub fn resize(&self, height: usize, width: usize) -> Result<Self> {
        if (height, width) == (self.height, self.width) {
            return Ok(self.clone());
        }
        let sy = self.height as f32 / height as f32;
        let sx = self.width as f32 / width as f32;
        Self::from_fn(height, width, |y, x| {
            let fy = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f32);
            let fx = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f32);
            let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(self.height - 1), (x0 + 1).min(self.width - 1));
            let (ty, tx) = (fy - y0 as f32, fx - x0 as f32);
            let (a, b, c, d) = (
                self.pixel(y0, x0),
                self.pixel(y0, x1),
                self.pixel(y1, x0),
                self.pixel(y1, x1),
            );
            let mut p = [0.0; C];
            for k in 0..C {
                let top = a[k] * (1.0 - tx) + b[k] * tx;
                let bottom = c[k] * (1.0 - tx) + d[k] * tx;
                p[k] = (top * (1.0 - ty) + bottom * ty).clamp(0.0, 1.0);
            }
            p
        })
    }
}

fn to_u8(v: f32) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

impl ColorImage {
    /// Rec. 601 luma.
    pub fn luminance(&self) -> Vec<f32> {
        self.data
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect()
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.into(),
            source,
        })?;
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        let data = rgb.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
        Self::new(h as usize, w as usize, data)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf: RgbImage = ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
            let p = self.pixel(y as usize, x as usize);
            Rgb([to_u8(p[0]), to_u8(p[1]), to_u8(p[2])])
        });
        buf.save(path).map_err(|source| Error::Image {
            path: path.into(),
            source,
        })
    }
}

impl SketchImage {
    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.into(),
            source,
        })?;
        let gray = img.to_luma8();
        let (w, h) = gray.dimensions();
        let data = gray.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
        Self::new(h as usize, w as usize, data)
    }

    /// 8-bit grayscale PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf: GrayImage = ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
            Luma([to_u8(self.pixel(y as usize, x as usize)[0])])
        });
        buf.save(path).map_err(|source| Error::Image {
            path: path.into(),
            source,
        })
    }
}

/// Stacks same-sized images into one `(B, C, H, W)` tensor.
pub fn batch_tensor<const C: usize>(images: &[&Raster<C>], device: &Device) -> Result<Tensor> {
    let parts = images
        .iter()
        .map(|im| im.to_tensor(device))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::cat(&parts, 0)?)
}
