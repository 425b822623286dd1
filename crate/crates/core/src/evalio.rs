//! Image and depth metrics, plus PNG/PFM file I/O.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

/// PSNR reported for (numerically) identical images.
pub const PSNR_CAP: f64 = 99.0;
const MSE_FLOOR: f64 = 1e-10;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("image of {height}x{width} is smaller than the {min}x{min} minimum")]
    TooSmall { height: usize, width: usize, min: usize },
    #[error("depth mask selects no pixels")]
    EmptyMask,
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: String, msg: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EvalError + '_ {
    move |source| EvalError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn format_err(path: &Path, msg: impl Into<String>) -> EvalError {
    EvalError::Format {
        path: path.display().to_string(),
        msg: msg.into(),
    }
}

/// Row-major RGB image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuffer {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImageBuffer {
    pub fn new(height: usize, width: usize) -> Result<Self, EvalError> {
        Self::from_data(height, width, vec![0.0; height * width * 3])
    }

    /// Values are clamped into `[0, 1]`; NaN becomes 0.
    pub fn from_data(height: usize, width: usize, mut data: Vec<f64>) -> Result<Self, EvalError> {
        if height == 0 || width == 0 {
            return Err(EvalError::Shape(format!("empty image {height}x{width}")));
        }
        if data.len() != height * width * 3 {
            return Err(EvalError::Shape(format!(
                "{height}x{width}x3 image needs {} values, got {}",
                height * width * 3,
                data.len()
            )));
        }
        for x in &mut data {
            *x = clamp01(*x);
        }
        Ok(Self { height, width, data })
    }

    pub fn from_pixels(height: usize, width: usize, pixels: &[[f64; 3]]) -> Result<Self, EvalError> {
        Self::from_data(height, width, pixels.iter().flatten().copied().collect())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> [f64; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, row: usize, col: usize, rgb: [f64; 3]) {
        let i = (row * self.width + col) * 3;
        for k in 0..3 {
            self.data[i + k] = clamp01(rgb[k]);
        }
    }

    /// Rounds every value to the nearest 8-bit level.
    pub fn quantized(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&x| f64::from(to_u8(x)) / 255.0).collect(),
        }
    }

    fn channel(&self, k: usize) -> Vec<f64> {
        self.data.iter().skip(k).step_by(3).copied().collect()
    }
}

fn clamp01(x: f64) -> f64 {
    if x.is_nan() {
        0.0
    } else {
        x.clamp(0.0, 1.0)
    }
}

fn to_u8(x: f64) -> u8 {
    (clamp01(x) * 255.0).round() as u8
}

/// Row-major single-channel map (depth, opacity).
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl DepthMap {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self, EvalError> {
        if data.len() != height * width {
            return Err(EvalError::Shape(format!(
                "{height}x{width} map needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }
}

fn check_same(a: &ImageBuffer, b: &ImageBuffer) -> Result<(), EvalError> {
    if a.height != b.height || a.width != b.width {
        return Err(EvalError::Shape(format!(
            "{}x{} vs {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    Ok(())
}

pub fn mse(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64, EvalError> {
    check_same(a, b)?;
    let sum: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / a.data.len() as f64)
}

/// `10 log10(1 / MSE)`, capped at [`PSNR_CAP`].
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64, EvalError> {
    Ok(psnr_from_mse(mse(a, b)?))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse < MSE_FLOOR {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let x = i as f64 - c;
        *v = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Separable Gaussian filter keeping only fully covered positions.
fn filter_valid(x: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            rows[r * ow + c] = (0..SSIM_WINDOW).map(|j| k[j] * x[r * w + c + j]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..SSIM_WINDOW).map(|j| k[j] * rows[(r + j) * ow + c]).sum();
        }
    }
    out
}

/// Mean SSIM over channels with an 11x11 Gaussian window (sigma 1.5).
pub fn ssim(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64, EvalError> {
    check_same(a, b)?;
    let (h, w) = (a.height, a.width);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(EvalError::TooSmall {
            height: h,
            width: w,
            min: SSIM_WINDOW,
        });
    }
    let k = gaussian_kernel();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    for ch in 0..3 {
        let x = a.channel(ch);
        let y = b.channel(ch);
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let mx = filter_valid(&x, h, w, &k);
        let my = filter_valid(&y, h, w, &k);
        let sxx = filter_valid(&xx, h, w, &k);
        let syy = filter_valid(&yy, h, w, &k);
        let sxy = filter_valid(&xy, h, w, &k);
        let mut sum = 0.0;
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            sum += ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
        total += sum / mx.len() as f64;
    }
    Ok(total / 3.0)
}

/// Root mean squared depth error over masked pixels.
pub fn depth_rmse(pred: &[f64], gt: &[f64], mask: &[bool]) -> Result<f64, EvalError> {
    if pred.len() != gt.len() || gt.len() != mask.len() {
        return Err(EvalError::Shape(format!(
            "{} predictions, {} targets, {} mask entries",
            pred.len(),
            gt.len(),
            mask.len()
        )));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..pred.len() {
        if mask[i] {
            let d = pred[i] - gt[i];
            sum += d * d;
            n += 1;
        }
    }
    if n == 0 {
        return Err(EvalError::EmptyMask);
    }
    Ok((sum / n as f64).sqrt())
}

pub fn write_png(path: &Path, image: &ImageBuffer) -> Result<(), EvalError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), image.width as u32, image.height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let bytes: Vec<u8> = image.data.iter().map(|&x| to_u8(x)).collect();
    let mut writer = enc.write_header().map_err(|e| format_err(path, e.to_string()))?;
    writer.write_image_data(&bytes).map_err(|e| format_err(path, e.to_string()))?;
    writer.finish().map_err(|e| format_err(path, e.to_string()))
}

/// Reads 8-bit gray, RGB or RGBA PNGs (alpha is dropped).
pub fn read_png(path: &Path) -> Result<ImageBuffer, EvalError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| format_err(path, e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| format_err(path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| format_err(path, e.to_string()))?;
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => return Err(format_err(path, format!("unsupported color type {other:?}"))),
    };
    let (w, h) = (info.width as usize, info.height as usize);
    let mut data = Vec::with_capacity(w * h * 3);
    for px in buf[..info.buffer_size()].chunks_exact(channels) {
        let rgb = if channels < 3 { [px[0]; 3] } else { [px[0], px[1], px[2]] };
        data.extend(rgb.iter().map(|&b| f64::from(b) / 255.0));
    }
    ImageBuffer::from_data(h, w, data)
}

/// Single-channel PFM: little-endian `f32`, scale -1, rows stored bottom to top.
pub fn write_pfm(path: &Path, map: &DepthMap) -> Result<(), EvalError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    let mut bytes = format!("Pf\n{} {}\n-1.0\n", map.width, map.height).into_bytes();
    for row in (0..map.height).rev() {
        for col in 0..map.width {
            bytes.extend_from_slice(&(map.get(row, col) as f32).to_le_bytes());
        }
    }
    out.write_all(&bytes).map_err(io_err(path))?;
    out.flush().map_err(io_err(path))
}

/// Reads single-channel (`Pf`) PFM files of either byte order.
pub fn read_pfm(path: &Path) -> Result<DepthMap, EvalError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut reader = BufReader::new(file);
    let mut header = Vec::new();
    while header.len() < 3 {
        let mut line = String::new();
        if reader.read_line(&mut line).map_err(io_err(path))? == 0 {
            return Err(format_err(path, "truncated header"));
        }
        header.extend(line.split_whitespace().map(str::to_owned));
    }
    if header[0] != "Pf" {
        return Err(format_err(path, format!("expected single-channel PFM, found {:?}", header[0])));
    }
    let dims: Vec<usize> = header[1..3]
        .iter()
        .map(|s| s.parse().map_err(|_| format_err(path, format!("bad dimension {s:?}"))))
        .collect::<Result<_, _>>()?;
    let (width, height) = (dims[0], dims[1]);
    let scale: f64 = match header.get(3) {
        Some(s) => s.parse().map_err(|_| format_err(path, "bad scale"))?,
        None => {
            let mut line = String::new();
            reader.read_line(&mut line).map_err(io_err(path))?;
            line.trim().parse().map_err(|_| format_err(path, "bad scale"))?
        }
    };
    let little = scale < 0.0;
    let mut raw = vec![0u8; width * height * 4];
    reader.read_exact(&mut raw).map_err(io_err(path))?;
    let mut data = vec![0.0; width * height];
    for (i, c) in raw.chunks_exact(4).enumerate() {
        let b = [c[0], c[1], c[2], c[3]];
        let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let (file_row, col) = (i / width, i % width);
        data[(height - 1 - file_row) * width + col] = f64::from(v);
    }
    DepthMap::new(height, width, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat(h: usize, w: usize, v: f64) -> ImageBuffer {
        ImageBuffer::from_data(h, w, vec![v; h * w * 3]).unwrap()
    }

    #[test]
    fn psnr_reference_values() {
        let a = flat(4, 4, 0.3);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        let b = flat(4, 4, 0.4);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr(&a, &flat(4, 5, 0.3)).is_err());
    }

    #[test]
    fn ssim_identity_and_size() {
        let a = flat(12, 12, 0.2);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!(matches!(ssim(&flat(10, 12, 0.2), &flat(10, 12, 0.2)), Err(EvalError::TooSmall { .. })));
    }

    #[test]
    fn rmse_cases() {
        assert_eq!(depth_rmse(&[1.0, 2.0], &[1.0, 2.0], &[true, true]).unwrap(), 0.0);
        assert!((depth_rmse(&[1.2, 9.0], &[1.0, 0.0], &[true, false]).unwrap() - 0.2).abs() < 1e-12);
        assert!(matches!(depth_rmse(&[1.0], &[1.0], &[false]), Err(EvalError::EmptyMask)));
    }

    #[test]
    fn values_clamp() {
        let mut a = ImageBuffer::new(1, 1).unwrap();
        a.set(0, 0, [-1.0, 2.0, f64::NAN]);
        assert_eq!(a.get(0, 0), [0.0, 1.0, 0.0]);
    }
}
