//! Floating-point image tensors, 8-bit PNG codec and content-addressed storage.

use std::collections::HashMap;
use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::sync::RwLock;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Height x width x channels image with interleaved samples in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::Param(format!("channels must be 1 or 3, got {channels}")));
        }
        if height == 0 || width == 0 {
            return Err(Error::Param("image must have positive extent".into()));
        }
        if data.len() != height * width * channels {
            return Err(Error::Param(format!(
                "expected {} samples, got {}",
                height * width * channels,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Param(format!("sample {bad} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// Builds an image from unclamped samples, clamping into `[0, 1]` (NaN maps to 0).
    pub fn from_clamped(height: usize, width: usize, channels: usize, mut data: Vec<f32>) -> Result<Self> {
        for v in &mut data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Self::new(height, width, channels, data)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        let value = value.clamp(0.0, 1.0);
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    /// Single-channel image from a per-pixel function of `(row, col)`.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c).clamp(0.0, 1.0));
            }
        }
        Self {
            height,
            width,
            channels: 1,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn is_square(&self) -> bool {
        self.height == self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f32 {
        self.data[(row * self.width + col) * self.channels + ch]
    }

    /// Luminance plane (Rec. 601 weights for colour input).
    pub fn to_gray(&self) -> ImageTensor {
        if self.channels == 1 {
            return self.clone();
        }
        let data = self
            .data
            .chunks_exact(3)
            .map(|p| (0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]).clamp(0.0, 1.0))
            .collect();
        ImageTensor {
            height: self.height,
            width: self.width,
            channels: 1,
            data,
        }
    }

    /// Converts to the given channel count (gray replicated to RGB or RGB reduced to luminance).
    pub fn with_channels(&self, channels: usize) -> ImageTensor {
        match (self.channels, channels) {
            (a, b) if a == b => self.clone(),
            (3, 1) => self.to_gray(),
            (1, 3) => ImageTensor {
                height: self.height,
                width: self.width,
                channels: 3,
                data: self.data.iter().flat_map(|&v| [v, v, v]).collect(),
            },
            _ => self.clone(),
        }
    }

    pub fn crop(&self, rect: &CropRect) -> Result<ImageTensor> {
        if !rect.fits(self.width as u32, self.height as u32) {
            return Err(Error::Param(format!(
                "crop {rect:?} outside {}x{} image",
                self.width, self.height
            )));
        }
        let (x, y, w, h) = (rect.x as usize, rect.y as usize, rect.w as usize, rect.h as usize);
        let mut data = Vec::with_capacity(w * h * self.channels);
        for r in y..y + h {
            let start = (r * self.width + x) * self.channels;
            data.extend_from_slice(&self.data[start..start + w * self.channels]);
        }
        Ok(ImageTensor {
            height: h,
            width: w,
            channels: self.channels,
            data,
        })
    }

    /// Resamples to `height x width`. Area averaging when shrinking, bilinear otherwise.
    pub fn resize(&self, height: usize, width: usize) -> ImageTensor {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let ch = self.channels;
        let mut data = vec![0.0f32; height * width * ch];
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        for r in 0..height {
            for c in 0..width {
                for k in 0..ch {
                    let v = if sy >= 1.0 && sx >= 1.0 {
                        self.area_mean(r as f64 * sy, (r + 1) as f64 * sy, c as f64 * sx, (c + 1) as f64 * sx, k)
                    } else {
                        let fy = ((r as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
                        let fx = ((c as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                        self.bilinear(fy, fx, k)
                    };
                    data[(r * width + c) * ch + k] = v.clamp(0.0, 1.0);
                }
            }
        }
        ImageTensor {
            height,
            width,
            channels: ch,
            data,
        }
    }

    fn area_mean(&self, y0: f64, y1: f64, x0: f64, x1: f64, k: usize) -> f32 {
        let mut acc = 0.0f64;
        let mut wsum = 0.0f64;
        let r_end = (y1.ceil() as usize).min(self.height);
        let c_end = (x1.ceil() as usize).min(self.width);
        for r in y0.floor() as usize..r_end {
            let wy = (y1.min(r as f64 + 1.0) - y0.max(r as f64)).max(0.0);
            for c in x0.floor() as usize..c_end {
                let wx = (x1.min(c as f64 + 1.0) - x0.max(c as f64)).max(0.0);
                acc += wy * wx * self.get(r, c, k) as f64;
                wsum += wy * wx;
            }
        }
        if wsum > 0.0 {
            (acc / wsum) as f32
        } else {
            0.0
        }
    }

    fn bilinear(&self, y: f64, x: f64, k: usize) -> f32 {
        let r0 = y.floor() as usize;
        let c0 = x.floor() as usize;
        let r1 = (r0 + 1).min(self.height - 1);
        let c1 = (c0 + 1).min(self.width - 1);
        let fy = (y - r0 as f64) as f32;
        let fx = (x - c0 as f64) as f32;
        let top = self.get(r0, c0, k) * (1.0 - fx) + self.get(r0, c1, k) * fx;
        let bot = self.get(r1, c0, k) * (1.0 - fx) + self.get(r1, c1, k) * fx;
        top * (1.0 - fy) + bot * fy
    }

    /// Square canvas of side `canvas` with the channel count preserved.
    pub fn to_canvas(&self, canvas: usize) -> ImageTensor {
        self.resize(canvas, canvas)
    }

    /// Values rounded to the nearest 8-bit level.
    pub fn quantized(&self) -> ImageTensor {
        ImageTensor {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| to_u8(v) as f32 / 255.0).collect(),
        }
    }

    pub fn to_png(&self) -> Result<Vec<u8>> {
        let bytes: Vec<u8> = self.data.iter().map(|&v| to_u8(v)).collect();
        let color = if self.channels == 1 {
            image::ExtendedColorType::L8
        } else {
            image::ExtendedColorType::Rgb8
        };
        let mut out = Vec::new();
        let encoder = image::codecs::png::PngEncoder::new(&mut out);
        image::ImageEncoder::write_image(encoder, &bytes, self.width as u32, self.height as u32, color)?;
        Ok(out)
    }

    /// Decodes any format the `image` crate understands; grayscale stays single-channel,
    /// everything else becomes RGB.
    pub fn from_encoded(bytes: &[u8]) -> Result<ImageTensor> {
        let decoded = image::ImageReader::new(Cursor::new(bytes))
            .with_guessed_format()
            .map_err(|e| Error::Format(e.to_string()))?
            .decode()?;
        let (w, h) = (decoded.width() as usize, decoded.height() as usize);
        let gray = matches!(
            decoded.color(),
            image::ColorType::L8 | image::ColorType::L16 | image::ColorType::La8 | image::ColorType::La16
        );
        if gray {
            let buf = decoded.to_luma8();
            ImageTensor::new(h, w, 1, buf.into_raw().into_iter().map(|b| b as f32 / 255.0).collect())
        } else {
            let buf = decoded.to_rgb8();
            ImageTensor::new(h, w, 3, buf.into_raw().into_iter().map(|b| b as f32 / 255.0).collect())
        }
    }

    pub fn load(path: &Path) -> Result<ImageTensor> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_encoded(&bytes)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let png = self.to_png()?;
        fs::write(path, png).map_err(|e| Error::io(path, e))
    }

    /// Mean absolute difference between two same-shaped images.
    pub fn mean_abs_diff(&self, other: &ImageTensor) -> f64 {
        assert_eq!(self.data.len(), other.data.len(), "shape mismatch");
        let s: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs() as f64)
            .sum();
        s / self.data.len() as f64
    }
}

#[inline]
fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[derive(Serialize, Deserialize)]
struct TensorRepr {
    height: usize,
    width: usize,
    channels: usize,
    /// little-endian f32 samples, base64
    data: String,
}

impl Serialize for ImageTensor {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        TensorRepr {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: crate::codec::encode_f32(&self.data),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for ImageTensor {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let repr = TensorRepr::deserialize(d)?;
        let data = crate::codec::decode_f32(&repr.data).map_err(D::Error::custom)?;
        ImageTensor::new(repr.height, repr.width, repr.channels, data).map_err(D::Error::custom)
    }
}

/// Pixel rectangle `(x, y, w, h)`; `x` is the column, `y` the row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropRect {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl CropRect {
    pub fn fits(&self, width: u32, height: u32) -> bool {
        self.w > 0
            && self.h > 0
            && self.x.checked_add(self.w).is_some_and(|e| e <= width)
            && self.y.checked_add(self.h).is_some_and(|e| e <= height)
    }
}

/// Content address of a stored 8-bit PNG plus its dimensions.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageRef {
    pub sha256: String,
    pub width: u32,
    pub height: u32,
    pub channels: u8,
}

impl ImageRef {
    pub fn for_png(png: &[u8], img: &ImageTensor) -> ImageRef {
        ImageRef {
            sha256: hex::encode(Sha256::digest(png)),
            width: img.width() as u32,
            height: img.height() as u32,
            channels: img.channels() as u8,
        }
    }

    pub fn file_name(&self) -> String {
        format!("{}.png", self.sha256)
    }
}

/// Content-addressed image repository. Stored images are 8-bit quantized.
pub trait ImageRepo: Send + Sync {
    fn put(&self, img: &ImageTensor) -> Result<ImageRef>;
    fn get(&self, r: &ImageRef) -> Result<ImageTensor>;
    fn png_bytes(&self, sha256: &str) -> Result<Vec<u8>>;
}

/// Directory of `<sha256>.png` files.
#[derive(Debug, Clone)]
pub struct DiskImageStore {
    root: PathBuf,
}

impl DiskImageStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn path_for(&self, sha256: &str) -> Result<PathBuf> {
        if sha256.len() != 64 || !sha256.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(Error::Reference(format!("malformed image hash `{sha256}`")));
        }
        Ok(self.root.join(format!("{sha256}.png")))
    }
}

impl ImageRepo for DiskImageStore {
    fn put(&self, img: &ImageTensor) -> Result<ImageRef> {
        let png = img.to_png()?;
        let r = ImageRef::for_png(&png, img);
        let path = self.path_for(&r.sha256)?;
        if !path.exists() {
            let tmp = self.root.join(format!(".{}.tmp", r.sha256));
            fs::write(&tmp, &png).map_err(|e| Error::io(&tmp, e))?;
            fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        }
        Ok(r)
    }

    fn get(&self, r: &ImageRef) -> Result<ImageTensor> {
        let bytes = self.png_bytes(&r.sha256)?;
        ImageTensor::from_encoded(&bytes)
    }

    fn png_bytes(&self, sha256: &str) -> Result<Vec<u8>> {
        let path = self.path_for(sha256)?;
        if !path.exists() {
            return Err(Error::Reference(format!("image {sha256} not in store")));
        }
        fs::read(&path).map_err(|e| Error::io(&path, e))
    }
}

/// In-memory repository, mainly for tests and one-shot runs.
#[derive(Debug, Default)]
pub struct MemoryImageStore {
    files: RwLock<HashMap<String, Vec<u8>>>,
}

impl MemoryImageStore {
    pub fn new() -> Self {
        Self::default()
    }
}

impl ImageRepo for MemoryImageStore {
    fn put(&self, img: &ImageTensor) -> Result<ImageRef> {
        let png = img.to_png()?;
        let r = ImageRef::for_png(&png, img);
        self.files
            .write()
            .expect("image store lock poisoned")
            .entry(r.sha256.clone())
            .or_insert(png);
        Ok(r)
    }

    fn get(&self, r: &ImageRef) -> Result<ImageTensor> {
        ImageTensor::from_encoded(&self.png_bytes(&r.sha256)?)
    }

    fn png_bytes(&self, sha256: &str) -> Result<Vec<u8>> {
        self.files
            .read()
            .expect("image store lock poisoned")
            .get(sha256)
            .cloned()
            .ok_or_else(|| Error::Reference(format!("image {sha256} not in store")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_samples() {
        assert!(ImageTensor::new(1, 2, 1, vec![0.5, 1.5]).is_err());
        assert!(ImageTensor::new(1, 2, 2, vec![0.5; 4]).is_err());
        assert!(ImageTensor::new(1, 2, 1, vec![0.5]).is_err());
    }

    #[test]
    fn crop_bounds() {
        let img = ImageTensor::from_fn(4, 6, |r, c| (r * 6 + c) as f32 / 24.0);
        let sub = img.crop(&CropRect { x: 2, y: 1, w: 3, h: 2 }).unwrap();
        assert_eq!((sub.height(), sub.width()), (2, 3));
        assert_eq!(sub.get(0, 0, 0), img.get(1, 2, 0));
        assert!(img.crop(&CropRect { x: 4, y: 0, w: 3, h: 1 }).is_err());
        assert!(img.crop(&CropRect { x: 0, y: 0, w: 0, h: 1 }).is_err());
    }

    #[test]
    fn png_roundtrip_is_lossless_for_quantized_images() {
        let img = ImageTensor::from_fn(9, 7, |r, c| ((r * 7 + c) % 11) as f32 / 10.0).quantized();
        let back = ImageTensor::from_encoded(&img.to_png().unwrap()).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn area_downsample_of_constant_is_constant() {
        let img = ImageTensor::filled(64, 48, 1, 0.25);
        let small = img.resize(8, 8);
        assert!(small.data().iter().all(|&v| (v - 0.25).abs() < 1e-6));
    }

    #[test]
    fn disk_store_is_content_addressed() {
        let dir = tempfile::tempdir().unwrap();
        let store = DiskImageStore::open(dir.path()).unwrap();
        let img = ImageTensor::from_fn(5, 5, |r, _| r as f32 / 4.0);
        let a = store.put(&img).unwrap();
        let b = store.put(&img).unwrap();
        assert_eq!(a, b);
        assert_eq!(store.get(&a).unwrap(), img.quantized());
        assert!(store.png_bytes("../etc/passwd").is_err());
    }
}
