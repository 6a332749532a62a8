//! Image batches, colour transforms, the blockwise DCT, quality metrics and
//! dataset ingestion.
//!
//! Pixels are carried as `[B, 3, H, W]` tensors normalized to `[-1, 1]`;
//! 8-bit value `v` maps to `v / 127.5 - 1`.

use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::RgbImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tch::{Device, Kind, Tensor};

use crate::error::{Error, Result};

pub const BLOCK: i64 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColorSpace {
    Rgb,
    YCbCr,
}

/// A batch of three-channel images tagged with their colour space.
#[derive(Debug)]
pub struct ImageBatch {
    data: Tensor,
    space: ColorSpace,
}

impl ImageBatch {
    pub fn new(data: Tensor, space: ColorSpace) -> Result<Self> {
        let size = data.size();
        if size.len() != 4 || size[1] != 3 {
            return Err(Error::Shape(format!("expected [B, 3, H, W], got {size:?}")));
        }
        Ok(ImageBatch { data, space })
    }

    pub fn rgb(data: Tensor) -> Result<Self> {
        Self::new(data, ColorSpace::Rgb)
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    pub fn space(&self) -> ColorSpace {
        self.space
    }
}

/// Image/message shape relation: `H = h * 2^n`, `W = w * 2^n`, `L = h * w`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct GeometrySpec {
    pub height: i64,
    pub width: i64,
    pub grid_h: i64,
    pub grid_w: i64,
    pub depth: u32,
    pub message_len: i64,
}

impl GeometrySpec {
    /// Derives the upsampling depth from the image size and message length.
    pub fn new(height: i64, width: i64, message_len: i64) -> Result<Self> {
        if height <= 0 || width <= 0 || message_len <= 0 {
            return Err(Error::Geometry(format!(
                "non-positive geometry H={height} W={width} L={message_len}"
            )));
        }
        if height % BLOCK != 0 || width % BLOCK != 0 {
            return Err(Error::Geometry(format!(
                "H={height} and W={width} must be multiples of {BLOCK}"
            )));
        }
        let mut depth = 0u32;
        loop {
            let scale = 1i64 << depth;
            if height % scale != 0 || width % scale != 0 {
                break;
            }
            let (h, w) = (height / scale, width / scale);
            if h * w == message_len {
                return Ok(GeometrySpec {
                    height,
                    width,
                    grid_h: h,
                    grid_w: w,
                    depth,
                    message_len,
                });
            }
            if h * w < message_len {
                break;
            }
            depth += 1;
        }
        Err(Error::Geometry(format!(
            "no n with L = (H/2^n)(W/2^n) for H={height} W={width} L={message_len}"
        )))
    }

    /// Geometry with an explicit depth and a message length that need not
    /// equal the grid size; used when a fully connected layer maps between
    /// the message and the grid.
    pub fn with_depth(height: i64, width: i64, message_len: i64, depth: u32) -> Result<Self> {
        if height <= 0 || width <= 0 || message_len <= 0 {
            return Err(Error::Geometry(format!(
                "non-positive geometry H={height} W={width} L={message_len}"
            )));
        }
        if height % BLOCK != 0 || width % BLOCK != 0 {
            return Err(Error::Geometry(format!(
                "H={height} and W={width} must be multiples of {BLOCK}"
            )));
        }
        let scale = 1i64 << depth;
        if height % scale != 0 || width % scale != 0 {
            return Err(Error::Geometry(format!("H={height} W={width} not divisible by 2^{depth}")));
        }
        Ok(GeometrySpec {
            height,
            width,
            grid_h: height / scale,
            grid_w: width / scale,
            depth,
            message_len,
        })
    }

    pub fn grid_len(&self) -> i64 {
        self.grid_h * self.grid_w
    }

    /// True when the grid is consistent with H, W and depth.
    pub fn is_consistent(&self) -> bool {
        let scale = 1i64 << self.depth;
        self.grid_h * scale == self.height && self.grid_w * scale == self.width && self.message_len > 0
    }

    pub fn check_images(&self, images: &Tensor) -> Result<()> {
        let size = images.size();
        if size.len() != 4 || size[1] != 3 || size[2] != self.height || size[3] != self.width {
            return Err(Error::Geometry(format!(
                "images {size:?} do not match geometry {}x{}",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

// Full-range BT.601 on centred values: the chroma rows sum to zero, so the
// affine 8-bit transform becomes linear in normalized units.
const RGB_TO_YCBCR: [[f64; 3]; 3] = [
    [0.299, 0.587, 0.114],
    [-0.168_736, -0.331_264, 0.5],
    [0.5, -0.418_688, -0.081_312],
];

pub fn rgb_to_ycbcr_matrix() -> [[f64; 3]; 3] {
    RGB_TO_YCBCR
}

pub fn ycbcr_to_rgb_matrix() -> [[f64; 3]; 3] {
    invert3(&RGB_TO_YCBCR)
}

fn invert3(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    let mut out = [[0.0; 3]; 3];
    for (r, row) in out.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            // adjugate transpose: cofactor of (c, r)
            let (r1, r2) = ((c + 1) % 3, (c + 2) % 3);
            let (c1, c2) = ((r + 1) % 3, (r + 2) % 3);
            *v = (m[r1][c1] * m[r2][c2] - m[r1][c2] * m[r2][c1]) / det;
        }
    }
    out
}

fn mix_channels(x: &Tensor, m: &[[f64; 3]; 3]) -> Tensor {
    let flat: Vec<f64> = m.iter().flatten().copied().collect();
    let weight = Tensor::from_slice(&flat)
        .to_kind(x.kind())
        .to_device(x.device())
        .view([3, 3, 1, 1]);
    x.conv2d(&weight, None::<Tensor>, [1, 1], [0, 0], [1, 1], 1)
}

/// Differentiable colour transform on raw tensors.
pub(crate) fn rgb_to_ycbcr_tensor(x: &Tensor) -> Tensor {
    mix_channels(x, &RGB_TO_YCBCR)
}

pub(crate) fn ycbcr_to_rgb_tensor(x: &Tensor) -> Tensor {
    mix_channels(x, &ycbcr_to_rgb_matrix())
}

pub fn rgb_to_ycbcr(img: &ImageBatch) -> Result<ImageBatch> {
    if img.space != ColorSpace::Rgb {
        return Err(Error::Contract("rgb_to_ycbcr expects an RGB batch".into()));
    }
    ImageBatch::new(rgb_to_ycbcr_tensor(&img.data), ColorSpace::YCbCr)
}

pub fn ycbcr_to_rgb(img: &ImageBatch) -> Result<ImageBatch> {
    if img.space != ColorSpace::YCbCr {
        return Err(Error::Contract("ycbcr_to_rgb expects a YCbCr batch".into()));
    }
    ImageBatch::new(ycbcr_to_rgb_tensor(&img.data), ColorSpace::Rgb)
}

/// Orthonormal 8-point DCT-II matrix, `D[k][n] = a_k cos((2n+1) k pi / 16)`.
pub fn dct_matrix_values() -> [[f64; 8]; 8] {
    let mut d = [[0.0; 8]; 8];
    for (k, row) in d.iter_mut().enumerate() {
        let alpha = if k == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
        for (n, v) in row.iter_mut().enumerate() {
            *v = alpha
                * ((2 * n + 1) as f64 * k as f64 * std::f64::consts::PI / 16.0).cos();
        }
    }
    d
}

fn dct_matrix(kind: Kind, device: Device) -> Tensor {
    let flat: Vec<f64> = dct_matrix_values().iter().flatten().copied().collect();
    Tensor::from_slice(&flat).to_kind(kind).to_device(device).view([8, 8])
}

pub(crate) fn check_blockable(x: &Tensor) -> Result<(i64, i64, i64, i64)> {
    let size = x.size();
    if size.len() != 4 {
        return Err(Error::Geometry(format!("expected a 4-D tensor, got {size:?}")));
    }
    let (b, c, h, w) = (size[0], size[1], size[2], size[3]);
    if h % BLOCK != 0 || w % BLOCK != 0 || h == 0 || w == 0 {
        return Err(Error::Geometry(format!(
            "spatial size {h}x{w} is not a multiple of {BLOCK}"
        )));
    }
    Ok((b, c, h, w))
}

/// `[B, C, H, W]` to `[B, C, H/8, W/8, 8, 8]`.
pub(crate) fn to_blocks(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = check_blockable(x)?;
    Ok(x.reshape([b, c, h / BLOCK, BLOCK, w / BLOCK, BLOCK])
        .permute([0, 1, 2, 4, 3, 5]))
}

pub(crate) fn from_blocks(blocks: &Tensor) -> Tensor {
    let size = blocks.size();
    let (b, c, bh, bw) = (size[0], size[1], size[2], size[3]);
    blocks
        .permute([0, 1, 2, 4, 3, 5])
        .reshape([b, c, bh * BLOCK, bw * BLOCK])
}

pub(crate) fn dct_blocks(blocks: &Tensor) -> Tensor {
    let d = dct_matrix(blocks.kind(), blocks.device());
    d.matmul(blocks).matmul(&d.tr())
}

pub(crate) fn idct_blocks(coefficients: &Tensor) -> Tensor {
    let d = dct_matrix(coefficients.kind(), coefficients.device());
    d.tr().matmul(coefficients).matmul(&d)
}

/// Replaces every non-overlapping 8x8 block of each channel by its
/// orthonormal 2-D DCT-II.
pub fn block_dct(x: &Tensor) -> Result<Tensor> {
    Ok(from_blocks(&dct_blocks(&to_blocks(x)?)))
}

pub fn block_idct(coefficients: &Tensor) -> Result<Tensor> {
    Ok(from_blocks(&idct_blocks(&to_blocks(coefficients)?)))
}

pub(crate) fn to_f64_vec(t: &Tensor) -> Vec<f64> {
    let flat = t.detach().to_kind(Kind::Double).contiguous().view([-1]);
    Vec::<f64>::try_from(&flat).expect("double tensor converts to Vec<f64>")
}

pub(crate) fn to_f32_vec(t: &Tensor) -> Vec<f32> {
    let flat = t.detach().to_kind(Kind::Float).contiguous().view([-1]);
    Vec::<f32>::try_from(&flat).expect("float tensor converts to Vec<f32>")
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.size() != b.size() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.size(), b.size())));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricsReport {
    pub ber: f64,
    pub psnr: f64,
    pub ssim: f64,
}

/// PSNR in dB over all RGB samples with peak-to-peak range 2.
/// Identical inputs give `f64::INFINITY`.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape(a, b, "psnr")?;
    let (va, vb) = (to_f64_vec(a), to_f64_vec(b));
    if va.is_empty() {
        return Err(Error::Shape("psnr of empty tensors".into()));
    }
    let mse = va.iter().zip(&vb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / va.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (4.0 / mse).log10())
}

pub const SSIM_WINDOW: i64 = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
const DYNAMIC_RANGE: f64 = 2.0;

pub(crate) fn gaussian_window(size: i64, sigma: f64) -> Vec<f64> {
    let center = (size - 1) as f64 / 2.0;
    let raw: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - center).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Single-scale SSIM, 11x11 Gaussian window (sigma 1.5), valid region,
/// computed per channel and averaged.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape(a, b, "ssim")?;
    let size = a.size();
    if size.len() != 4 {
        return Err(Error::Shape(format!("ssim expects [B, C, H, W], got {size:?}")));
    }
    let (bs, c, h, w) = (size[0], size[1], size[2], size[3]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Geometry(format!(
            "ssim window {SSIM_WINDOW} exceeds image {h}x{w}"
        )));
    }
    let g = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let kernel: Vec<f64> = g.iter().flat_map(|&y| g.iter().map(move |&x| x * y)).collect();
    let kernel = Tensor::from_slice(&kernel).view([1, 1, SSIM_WINDOW, SSIM_WINDOW]);
    let x = a.detach().to_kind(Kind::Double).to_device(Device::Cpu).reshape([bs * c, 1, h, w]);
    let y = b.detach().to_kind(Kind::Double).to_device(Device::Cpu).reshape([bs * c, 1, h, w]);
    let filt = |t: &Tensor| t.conv2d(&kernel, None::<Tensor>, [1, 1], [0, 0], [1, 1], 1);
    let mu_x = filt(&x);
    let mu_y = filt(&y);
    let sxx = filt(&(&x * &x)) - &mu_x * &mu_x;
    let syy = filt(&(&y * &y)) - &mu_y * &mu_y;
    let sxy = filt(&(&x * &y)) - &mu_x * &mu_y;
    let c1 = (SSIM_K1 * DYNAMIC_RANGE).powi(2);
    let c2 = (SSIM_K2 * DYNAMIC_RANGE).powi(2);
    let num = (&mu_x * &mu_y * 2.0 + c1) * (sxy * 2.0 + c2);
    let den = (&mu_x * &mu_x + &mu_y * &mu_y + c1) * (sxx + syy + c2);
    let map = num / den;
    Ok(map.mean(Kind::Double).double_value(&[]))
}

/// Fraction of disagreeing bits after thresholding both inputs at 0.5.
pub fn ber(bits: &Tensor, decoded: &Tensor) -> Result<f64> {
    same_shape(bits, decoded, "ber")?;
    let (m, d) = (to_f64_vec(bits), to_f64_vec(decoded));
    if m.is_empty() {
        return Err(Error::Shape("ber of empty messages".into()));
    }
    let errors = m.iter().zip(&d).filter(|(x, y)| (**x > 0.5) != (**y > 0.5)).count();
    Ok(errors as f64 / m.len() as f64)
}

/// Uniform samples in `[-1, 1)` drawn from a caller-owned rng.
pub fn uniform_tensor(shape: &[i64], rng: &mut impl rand::Rng) -> Tensor {
    let n: i64 = shape.iter().product();
    let values: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
    Tensor::from_slice(&values).to_kind(Kind::Float).view(shape)
}

pub fn normalize_u8(v: u8) -> f32 {
    v as f32 / 127.5 - 1.0
}

pub fn quantize_u8(x: f32) -> u8 {
    ((x + 1.0) / 2.0 * 255.0).round().clamp(0.0, 255.0) as u8
}

/// `[3, H, W]` normalized tensor from an 8-bit RGB image.
pub fn rgb_image_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let mut planar = vec![0f32; (3 * w * h) as usize];
    let plane = (w * h) as usize;
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            planar[c * plane + i] = normalize_u8(px[c]);
        }
    }
    Tensor::from_slice(&planar).view([3, h, w])
}

/// 8-bit export of a `[3, H, W]` tensor; values are clamped.
pub fn tensor_to_rgb_image(t: &Tensor) -> Result<RgbImage> {
    let size = t.size();
    if size.len() != 3 || size[0] != 3 {
        return Err(Error::Shape(format!("expected [3, H, W], got {size:?}")));
    }
    let (h, w) = (size[1] as usize, size[2] as usize);
    let data = to_f32_vec(t);
    let plane = h * w;
    let mut raw = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        for c in 0..3 {
            raw.push(quantize_u8(data[c * plane + i]));
        }
    }
    Ok(RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer sized for image"))
}

/// Centre-crops to the target aspect ratio and resizes.
pub fn fit_image(img: &RgbImage, height: u32, width: u32) -> RgbImage {
    if img.width() == width && img.height() == height {
        return img.clone();
    }
    let (iw, ih) = (img.width() as f64, img.height() as f64);
    let target = width as f64 / height as f64;
    let (cw, ch) = if iw / ih > target {
        ((ih * target).round().max(1.0), ih)
    } else {
        (iw, (iw / target).round().max(1.0))
    };
    let (x0, y0) = (((iw - cw) / 2.0) as u32, ((ih - ch) / 2.0) as u32);
    let cropped = image::imageops::crop_imm(img, x0, y0, cw as u32, ch as u32).to_image();
    image::imageops::resize(&cropped, width, height, FilterType::Triangle)
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path)?.to_rgb8())
}

/// In-memory image collection, `[N, 3, H, W]` normalized.
#[derive(Debug)]
pub struct Dataset {
    images: Tensor,
    paths: Vec<PathBuf>,
}

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg"];

impl Dataset {
    /// Loads up to `count` images from a directory tree. Files are sorted,
    /// shuffled with `seed`, then decoded; unreadable files are skipped.
    pub fn load(dir: &Path, height: i64, width: i64, count: usize, seed: u64) -> Result<Self> {
        let mut paths: Vec<PathBuf> = walkdir::WalkDir::new(dir)
            .into_iter()
            .filter_map(|e| e.ok())
            .filter(|e| e.file_type().is_file())
            .map(|e| e.into_path())
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
                    .unwrap_or(false)
            })
            .collect();
        if paths.is_empty() {
            return Err(Error::Dataset(format!("no images under {}", dir.display())));
        }
        paths.sort();
        paths.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

        let mut tensors = Vec::new();
        let mut kept = Vec::new();
        for path in paths {
            if tensors.len() == count {
                break;
            }
            match load_rgb(&path) {
                Ok(img) => {
                    let fitted = fit_image(&img, height as u32, width as u32);
                    tensors.push(rgb_image_to_tensor(&fitted));
                    kept.push(path);
                }
                Err(err) => log::warn!("skipping {}: {err}", path.display()),
            }
        }
        if tensors.is_empty() {
            return Err(Error::Dataset(format!("no readable images under {}", dir.display())));
        }
        if tensors.len() < count {
            log::warn!("requested {count} images, found {}", tensors.len());
        }
        Ok(Dataset { images: Tensor::stack(&tensors, 0), paths: kept })
    }

    pub fn from_tensor(images: Tensor) -> Result<Self> {
        ImageBatch::rgb(images.shallow_clone())?;
        Ok(Dataset { images, paths: Vec::new() })
    }

    pub fn len(&self) -> usize {
        self.images.size()[0] as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn height(&self) -> i64 {
        self.images.size()[2]
    }

    pub fn width(&self) -> i64 {
        self.images.size()[3]
    }

    pub fn paths(&self) -> &[PathBuf] {
        &self.paths
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let idx: Vec<i64> = indices.iter().map(|&i| i as i64).collect();
        self.images.index_select(0, &Tensor::from_slice(&idx))
    }

    /// Contiguous sub-range `[start, start + len)`.
    pub fn slice(&self, start: usize, len: usize) -> Result<Dataset> {
        if start + len > self.len() || len == 0 {
            return Err(Error::Dataset(format!(
                "slice {start}+{len} outside dataset of {}",
                self.len()
            )));
        }
        let images = self.images.narrow(0, start as i64, len as i64).copy();
        let paths = self.paths.get(start..start + len).map(|p| p.to_vec()).unwrap_or_default();
        Ok(Dataset { images, paths })
    }

    /// Splits off the first `n` images as one dataset and the rest as another.
    pub fn split(&self, n: usize) -> Result<(Dataset, Dataset)> {
        Ok((self.slice(0, n)?, self.slice(n, self.len() - n)?))
    }

    /// Mini-batches of a shuffled pass; the final partial batch is kept.
    pub fn epoch_batches(&self, batch: usize, rng: &mut impl rand::Rng) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(rng);
        order.chunks(batch.max(1)).map(|c| c.to_vec()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    fn rand_images(seed: u64, shape: &[i64]) -> Tensor {
        uniform_tensor(shape, &mut ChaCha8Rng::seed_from_u64(seed)).to_kind(Kind::Double)
    }

    #[test]
    fn gray_is_fixed_point() {
        let gray = ImageBatch::rgb(Tensor::zeros([1, 3, 8, 8], (Kind::Double, Device::Cpu))).unwrap();
        let ycc = rgb_to_ycbcr(&gray).unwrap();
        assert!(to_f64_vec(ycc.data()).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn pure_red_matches_hand_matrix() {
        // Hand evaluation: Y = .299 - .587 - .114, Cb = -.168736 + .331264 - .5,
        // Cr = .5 + .418688 + .081312.
        let red = Tensor::from_slice(&[1.0f64, -1.0, -1.0]).view([1, 3, 1, 1]);
        let ycc = rgb_to_ycbcr(&ImageBatch::rgb(red).unwrap()).unwrap();
        let v = to_f64_vec(ycc.data());
        assert!(max_abs_diff(&v, &[-0.402, -0.337_472, 1.0]) < 1e-12, "{v:?}");
    }

    #[test]
    fn color_round_trip() {
        let x = rand_images(3, &[2, 3, 16, 16]);
        let back = ycbcr_to_rgb(&rgb_to_ycbcr(&ImageBatch::rgb(x.copy()).unwrap()).unwrap()).unwrap();
        assert!(max_abs_diff(&to_f64_vec(&x), &to_f64_vec(back.data())) < 1e-5);
    }

    #[test]
    fn wrong_color_tag_is_rejected() {
        let x = ImageBatch::new(Tensor::zeros([1, 3, 8, 8], (Kind::Float, Device::Cpu)), ColorSpace::YCbCr).unwrap();
        assert!(matches!(rgb_to_ycbcr(&x), Err(Error::Contract(_))));
        let y = ImageBatch::rgb(Tensor::zeros([1, 3, 8, 8], (Kind::Float, Device::Cpu))).unwrap();
        assert!(matches!(ycbcr_to_rgb(&y), Err(Error::Contract(_))));
    }

    #[test]
    fn constant_block_has_only_dc() {
        let c = 0.37;
        let x = Tensor::full([1, 1, 8, 8], c, (Kind::Double, Device::Cpu));
        let coef = to_f64_vec(&block_dct(&x).unwrap());
        assert!((coef[0] - 8.0 * c).abs() < 1e-12);
        assert!(coef[1..].iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn impulse_matches_naive_dct() {
        // Naive O(N^4) oracle
        let mut block = [[0.0f64; 8]; 8];
        block[0][0] = 1.0;
        let alpha = |k: usize| if k == 0 { (0.125f64).sqrt() } else { 0.5 };
        let mut expected = vec![0.0; 64];
        for u in 0..8 {
            for v in 0..8 {
                let mut s = 0.0;
                for (x, row) in block.iter().enumerate() {
                    for (y, val) in row.iter().enumerate() {
                        s += val
                            * ((2 * x + 1) as f64 * u as f64 * std::f64::consts::PI / 16.0).cos()
                            * ((2 * y + 1) as f64 * v as f64 * std::f64::consts::PI / 16.0).cos();
                    }
                }
                expected[u * 8 + v] = alpha(u) * alpha(v) * s;
            }
        }
        let flat: Vec<f64> = block.iter().flatten().copied().collect();
        let x = Tensor::from_slice(&flat).view([1, 1, 8, 8]);
        let got = to_f64_vec(&block_dct(&x).unwrap());
        assert!(max_abs_diff(&got, &expected) < 1e-12);
    }

    #[test]
    fn dct_round_trip_and_parseval() {
        let x = rand_images(11, &[1000, 1, 8, 8]);
        let coef = block_dct(&x).unwrap();
        let back = block_idct(&coef).unwrap();
        assert!(max_abs_diff(&to_f64_vec(&x), &to_f64_vec(&back)) < 1e-6);
        let e_x = (&x * &x).sum_dim_intlist([1, 2, 3].as_slice(), false, Kind::Double);
        let e_c = (&coef * &coef).sum_dim_intlist([1, 2, 3].as_slice(), false, Kind::Double);
        assert!(max_abs_diff(&to_f64_vec(&e_x), &to_f64_vec(&e_c)) < 1e-6);
    }

    #[test]
    fn dct_on_multi_block_image_is_blockwise() {
        let x = rand_images(5, &[2, 3, 16, 24]);
        let coef = block_dct(&x).unwrap();
        let block = x.narrow(2, 8, 8).narrow(3, 16, 8);
        let expect = block_dct(&block).unwrap();
        let got = coef.narrow(2, 8, 8).narrow(3, 16, 8);
        assert!(max_abs_diff(&to_f64_vec(&expect), &to_f64_vec(&got)) < 1e-12);
    }

    #[test]
    fn dct_rejects_bad_shape() {
        let x = Tensor::zeros([1, 1, 12, 8], (Kind::Float, Device::Cpu));
        assert!(matches!(block_dct(&x), Err(Error::Geometry(_))));
    }

    #[test]
    fn psnr_identity_and_one_level() {
        let a = rand_images(1, &[2, 3, 8, 8]);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        // one 8-bit level is 2/255 in normalized units
        let b = &a + 2.0 / 255.0;
        let got = psnr(&a, &b).unwrap();
        assert!((got - 20.0 * 255f64.log10()).abs() < 1e-9, "{got}");
        assert!((got - 48.13).abs() < 0.01);
    }

    #[test]
    fn psnr_shape_mismatch() {
        let a = Tensor::zeros([1, 3, 8, 8], (Kind::Float, Device::Cpu));
        let b = Tensor::zeros([1, 3, 8, 16], (Kind::Float, Device::Cpu));
        assert!(matches!(psnr(&a, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn ssim_properties() {
        let a = rand_images(2, &[1, 3, 24, 24]);
        let b = rand_images(3, &[1, 3, 24, 24]);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-7);
        let centred = &a - a.mean(Kind::Double);
        assert!(ssim(&centred, &(-&centred)).unwrap() < 1.0);
    }

    #[test]
    fn ssim_of_constants_is_luminance_term() {
        let (m1, m2) = (0.2f64, -0.3f64);
        let a = Tensor::full([1, 3, 16, 16], m1, (Kind::Double, Device::Cpu));
        let b = Tensor::full([1, 3, 16, 16], m2, (Kind::Double, Device::Cpu));
        let c1 = (0.01f64 * 2.0).powi(2);
        let expected = (2.0 * m1 * m2 + c1) / (m1 * m1 + m2 * m2 + c1);
        assert!((ssim(&a, &b).unwrap() - expected).abs() < 1e-9);
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = Tensor::zeros([1, 3, 8, 8], (Kind::Float, Device::Cpu));
        assert!(matches!(ssim(&a, &a), Err(Error::Geometry(_))));
    }

    #[test]
    fn ber_counts() {
        let m = Tensor::zeros([1, 64], (Kind::Float, Device::Cpu));
        assert_eq!(ber(&m, &m).unwrap(), 0.0);
        assert_eq!(ber(&m, &(&m + 1.0)).unwrap(), 1.0);
        let mut flipped = vec![0f32; 64];
        for i in [3usize, 17, 60] {
            flipped[i] = 0.9;
        }
        let d = Tensor::from_slice(&flipped).view([1, 64]);
        assert_eq!(ber(&m, &d).unwrap(), 0.046875);
        let bad = Tensor::zeros([1, 63], (Kind::Float, Device::Cpu));
        assert!(ber(&m, &bad).is_err());
    }

    #[test]
    fn geometry_relation() {
        let g = GeometrySpec::new(128, 128, 64).unwrap();
        assert_eq!((g.grid_h, g.grid_w, g.depth), (8, 8, 4));
        let g = GeometrySpec::new(400, 400, 625).unwrap();
        assert_eq!((g.grid_h, g.grid_w, g.depth), (25, 25, 4));
        let g = GeometrySpec::new(256, 256, 256).unwrap();
        assert_eq!((g.grid_h, g.depth), (16, 4));
        assert!(GeometrySpec::new(128, 128, 60).is_err());
        assert!(GeometrySpec::new(100, 128, 64).is_err());
    }

    #[test]
    fn u8_affine_endpoints() {
        assert_eq!(normalize_u8(255), 1.0);
        assert_eq!(normalize_u8(0), -1.0);
        assert_eq!(quantize_u8(1.0), 255);
        assert_eq!(quantize_u8(-1.0), 0);
        assert_eq!(quantize_u8(3.0), 255);
    }
}
