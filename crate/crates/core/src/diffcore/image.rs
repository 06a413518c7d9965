use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// RGB image stored channel-major (`[3, H, W]`) with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageRGB {
    tensor: Tensor<f32>,
}

impl ImageRGB {
    /// Wrap a `[3, H, W]` tensor; every value must lie in `[0, 1]`.
    pub fn new(tensor: Tensor<f32>) -> Result<Self> {
        let (c, _, _) = tensor.chw("image")?;
        if c != 3 {
            return Err(Error::dims("image", "[3, H, W]", tensor.dims()));
        }
        if let Some(v) = tensor.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid("image", format!("value {v} outside [0, 1]")));
        }
        Ok(Self { tensor })
    }

    /// Wrap a `[3, H, W]` tensor, clamping values into `[0, 1]` (NaN becomes 0).
    pub fn from_clamped(tensor: &Tensor<f32>) -> Result<Self> {
        Self::new(tensor.map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) }))
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let n = height * width;
        Self {
            tensor: Tensor::from_fn(&[3, height, width], |i| rgb[i / n]),
        }
    }

    pub fn height(&self) -> usize {
        self.tensor.dims()[1]
    }

    pub fn width(&self) -> usize {
        self.tensor.dims()[2]
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor<f32> {
        self.tensor
    }

    /// Decode an 8-bit (or 16-bit) RGB/RGBA/gray PNG, dividing by the peak value.
    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let err = |msg: String| Error::Image {
            path: path.to_path_buf(),
            msg,
        };
        let mut decoder = png::Decoder::new(BufReader::new(File::open(path)?));
        decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let mut reader = decoder.read_info().map_err(|e| err(e.to_string()))?;
        let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| err("image too large".into()))?];
        let info = reader.next_frame(&mut buf).map_err(|e| err(e.to_string()))?;
        let (w, h) = (info.width as usize, info.height as usize);
        let stride = match info.color_type {
            png::ColorType::Rgb => 3,
            png::ColorType::Rgba => 4,
            png::ColorType::Grayscale => 1,
            png::ColorType::GrayscaleAlpha => 2,
            other => return Err(err(format!("unsupported color type {other:?}"))),
        };
        let n = h * w;
        let data = (0..3 * n)
            .map(|i| {
                let (c, p) = (i / n, i % n);
                let c = if stride < 3 { 0 } else { c };
                buf[p * stride + c] as f32 / 255.0
            })
            .collect();
        Self::new(Tensor::new(vec![3, h, w], data)?)
    }

    /// 8-bit RGB bytes, row-major interleaved, rounding to nearest.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let (h, w) = (self.height(), self.width());
        let n = h * w;
        let d = self.tensor.data();
        let mut out = Vec::with_capacity(3 * n);
        for p in 0..n {
            for c in 0..3 {
                out.push((d[c * n + p] * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
        out
    }

    pub fn from_rgb8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        let n = height * width;
        if bytes.len() != 3 * n {
            return Err(Error::dims("image", format!("{} bytes", 3 * n), &[bytes.len()]));
        }
        let data = (0..3 * n).map(|i| bytes[(i % n) * 3 + i / n] as f32 / 255.0).collect();
        Self::new(Tensor::new(vec![3, height, width], data)?)
    }

    /// Quantized copy, as it would read back from an 8-bit PNG.
    pub fn quantized(&self) -> Self {
        Self::from_rgb8(self.height(), self.width(), &self.to_rgb8()).expect("same dims")
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = BufWriter::new(File::create(path)?);
        let mut enc = png::Encoder::new(file, self.width() as u32, self.height() as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        enc.set_compression(png::Compression::Fast);
        let to_err = |e: png::EncodingError| Error::Image {
            path: path.to_path_buf(),
            msg: e.to_string(),
        };
        let mut writer = enc.write_header().map_err(to_err)?;
        writer.write_image_data(&self.to_rgb8()).map_err(to_err)?;
        writer.finish().map_err(to_err)?;
        Ok(())
    }
}
