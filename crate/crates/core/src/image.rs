//! RGB images as `3×H×W` tensors with values in `[-1, 1]`.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Image {
    data: Tensor,
}

impl Image {
    pub fn new(data: Tensor) -> Result<Self> {
        let dims = data.dims();
        if dims.len() != 3 || dims[0] != 3 || dims[1] == 0 || dims[2] == 0 {
            return Err(Error::InvalidImage(format!(
                "expected a 3xHxW tensor, got shape {dims:?}"
            )));
        }
        Ok(Self {
            data: data.to_dtype(DType::F32)?.contiguous()?,
        })
    }

    /// Builds an image from interleaved 8-bit RGB.
    pub fn from_rgb8(width: usize, height: usize, rgb: &[u8]) -> Result<Self> {
        if rgb.len() != width * height * 3 {
            return Err(Error::InvalidImage(format!(
                "expected {} bytes for {width}x{height} RGB, got {}",
                width * height * 3,
                rgb.len()
            )));
        }
        let mut planar = vec![0f32; rgb.len()];
        let plane = width * height;
        for (i, px) in rgb.chunks_exact(3).enumerate() {
            for c in 0..3 {
                planar[c * plane + i] = px[c] as f32 / 127.5 - 1.0;
            }
        }
        Self::new(Tensor::from_vec(planar, (3, height, width), &Device::Cpu)?)
    }

    /// Interleaved 8-bit RGB, mapping `[-1, 1]` linearly onto `[0, 255]`.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let (_, h, w) = self.data.dims3().expect("image is rank 3");
        let planar = self.values();
        let plane = h * w;
        let mut out = vec![0u8; plane * 3];
        for i in 0..plane {
            for c in 0..3 {
                out[i * 3 + c] = quantize(planar[c * plane + i]);
            }
        }
        out
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path.as_ref())?.to_rgb8();
        let (w, h) = img.dimensions();
        Self::from_rgb8(w as usize, h as usize, img.as_raw())
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_png_bytes()?)?;
        Ok(())
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let (w, h) = (self.width(), self.height());
        let buf = image::RgbImage::from_raw(w as u32, h as u32, self.to_rgb8())
            .ok_or_else(|| Error::InvalidImage("buffer size mismatch".into()))?;
        let mut bytes = Vec::new();
        buf.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)?;
        Ok(bytes)
    }

    pub fn from_png_bytes(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?.to_rgb8();
        let (w, h) = img.dimensions();
        Self::from_rgb8(w as usize, h as usize, img.as_raw())
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    /// `1×3×H×W` view for batched networks.
    pub fn batch(&self) -> Result<Tensor> {
        Ok(self.data.unsqueeze(0)?)
    }

    pub fn width(&self) -> usize {
        self.data.dims()[2]
    }

    pub fn height(&self) -> usize {
        self.data.dims()[1]
    }

    pub fn values(&self) -> Vec<f32> {
        self.data
            .flatten_all()
            .and_then(|t| t.to_vec1::<f32>())
            .expect("image is a contiguous f32 tensor")
    }

    /// Bitwise pixel equality.
    pub fn bit_eq(&self, other: &Image) -> bool {
        self.data.dims() == other.data.dims()
            && self
                .values()
                .iter()
                .zip(other.values())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Equality after 8-bit quantization, which is what PNG storage preserves.
    pub fn rgb8_eq(&self, other: &Image) -> bool {
        self.data.dims() == other.data.dims() && self.to_rgb8() == other.to_rgb8()
    }
}

fn quantize(v: f32) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// Stacks images into an `N×3×H×W` batch.
pub fn stack(images: &[Image]) -> Result<Tensor> {
    if images.is_empty() {
        return Err(Error::EmptyDataset("cannot stack zero images".into()));
    }
    let dims = images[0].tensor().dims();
    if let Some(bad) = images.iter().find(|i| i.tensor().dims() != dims) {
        return Err(Error::ShapeMismatch(format!(
            "image {:?} differs from {:?}",
            bad.tensor().dims(),
            dims
        )));
    }
    let refs: Vec<&Tensor> = images.iter().map(Image::tensor).collect();
    Ok(Tensor::stack(&refs, 0)?)
}

pub fn unstack(batch: &Tensor) -> Result<Vec<Image>> {
    let n = batch.dims4()?.0;
    (0..n).map(|i| Image::new(batch.get(i)?)).collect()
}

/// Center-crops to a square and resizes to `resolution`×`resolution`.
pub fn center_square(image: &Image, resolution: usize) -> Result<Image> {
    let (w, h) = (image.width(), image.height());
    if w == resolution && h == resolution {
        return Ok(image.clone());
    }
    let side = w.min(h);
    let t = image.tensor().narrow(1, (h - side) / 2, side)?.narrow(2, (w - side) / 2, side)?;
    Image::new(resize_square(&t.unsqueeze(0)?, resolution)?.get(0)?.clamp(-1f32, 1f32)?)
}

/// `out×in` matrix of 1-D bilinear interpolation weights (half-pixel centers,
/// edge clamped). Applying it on both spatial axes resizes an image.
pub fn bilinear_matrix(input: usize, output: usize) -> Vec<f32> {
    let mut m = vec![0f32; output * input];
    let scale = input as f64 / output as f64;
    for o in 0..output {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(input - 1);
        let i1 = (i0 + 1).min(input - 1);
        let frac = (src - i0 as f64) as f32;
        m[o * input + i0] += 1.0 - frac;
        m[o * input + i1] += frac;
    }
    m
}

/// Differentiable bilinear resize of an `N×C×H×W` batch to `size×size`.
pub fn resize_square(batch: &Tensor, size: usize) -> Result<Tensor> {
    let (_, _, h, w) = batch.dims4()?;
    if h == size && w == size {
        return Ok(batch.clone());
    }
    let dev = batch.device();
    let rows = Tensor::from_vec(bilinear_matrix(h, size), (size, h), dev)?;
    let cols = Tensor::from_vec(bilinear_matrix(w, size), (size, w), dev)?.t()?.contiguous()?;
    let out = rows.broadcast_matmul(&batch.contiguous()?)?;
    Ok(out.broadcast_matmul(&cols)?)
}

/// PNG files directly inside `dir`, sorted by name.
pub fn list_images(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir.as_ref())?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    out.sort();
    Ok(out)
}

/// Images that loaded, and the paths that did not with the reason.
#[derive(Debug, Default)]
pub struct LoadedImages {
    pub images: Vec<(PathBuf, Image)>,
    pub skipped: Vec<(PathBuf, String)>,
}

/// Loads every PNG in `dir` at `resolution`×`resolution`. Square images of
/// another size are resized; unreadable or non-square files are skipped
/// with a warning.
pub fn load_dir(dir: impl AsRef<Path>, resolution: usize) -> Result<LoadedImages> {
    let mut out = LoadedImages::default();
    for path in list_images(dir)? {
        let loaded = Image::load_png(&path).and_then(|img| {
            if img.width() != img.height() {
                return Err(Error::InvalidImage(format!("{}x{} is not square", img.width(), img.height())));
            }
            if img.width() == resolution {
                return Ok(img);
            }
            Image::new(resize_square(&img.batch()?, resolution)?.get(0)?.clamp(-1f32, 1f32)?)
        });
        match loaded {
            Ok(img) => out.images.push((path, img)),
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                out.skipped.push((path, e.to_string()));
            }
        }
    }
    Ok(out)
}
