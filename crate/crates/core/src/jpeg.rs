//! Baseline JPEG round trip and the two differentiable JPEG surrogates.

use std::path::Path;

use image::ImageFormat;
use jpeg_encoder::{ChromaSubsamplingMethod, ColorType, Encoder, QuantizationTableType, SamplingFactor};
use tch::Tensor;

use crate::error::{Error, Result};
use crate::imaging::{
    check_blockable, dct_blocks, from_blocks, idct_blocks, rgb_image_to_tensor, rgb_to_ycbcr_tensor,
    tensor_to_rgb_image, to_blocks, ycbcr_to_rgb_tensor,
};

/// Annex K luminance table, natural (row-major) order.
pub const BASE_LUMA: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

/// Annex K chrominance table, natural order.
pub const BASE_CHROMA: [u16; 64] = [
    17, 18, 24, 47, 99, 99, 99, 99, //
    18, 21, 26, 66, 99, 99, 99, 99, //
    24, 26, 56, 99, 99, 99, 99, 99, //
    47, 66, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99,
];

/// Half of the 8-bit range; normalized DCT coefficients times this are in
/// the units the quantization tables are expressed in.
const LEVEL_SCALE: f64 = 127.5;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantTables {
    pub luma: [u16; 64],
    pub chroma: [u16; 64],
    pub quality: u8,
}

pub fn check_quality(quality: u32) -> Result<u8> {
    if !(1..=100).contains(&quality) {
        return Err(Error::Parameter(format!("JPEG quality {quality} outside [1, 100]")));
    }
    Ok(quality as u8)
}

/// IJG quality scaling of the Annex K tables.
pub fn quality_to_tables(quality: u32) -> Result<QuantTables> {
    let q = check_quality(quality)?;
    let scale = if quality < 50 { 5000 / quality } else { 200 - 2 * quality };
    let scaled = |base: &[u16; 64]| {
        let mut out = [0u16; 64];
        for (o, &b) in out.iter_mut().zip(base) {
            *o = ((b as u32 * scale + 50) / 100).clamp(1, 255) as u16;
        }
        out
    };
    Ok(QuantTables { luma: scaled(&BASE_LUMA), chroma: scaled(&BASE_CHROMA), quality: q })
}

/// Encodes interleaved 8-bit RGB as baseline JPEG with 4:2:0 subsampling.
pub fn encode_jpeg(rgb: &[u8], width: u16, height: u16, quality: u32) -> Result<Vec<u8>> {
    let tables = quality_to_tables(quality)?;
    let mut bytes = Vec::new();
    let mut encoder = Encoder::new(&mut bytes, 100);
    encoder.set_sampling_factor(SamplingFactor::F_2_2);
    encoder.set_chroma_subsampling_method(ChromaSubsamplingMethod::Average);
    encoder.set_quantization_tables(
        QuantizationTableType::Custom(Box::new(tables.luma)),
        QuantizationTableType::Custom(Box::new(tables.chroma)),
    );
    encoder
        .encode(rgb, width, height, ColorType::Rgb)
        .map_err(|e| Error::Codec { bytes: 0, detail: e.to_string() })?;
    Ok(bytes)
}

pub fn decode_jpeg(bytes: &[u8]) -> Result<image::RgbImage> {
    image::load_from_memory_with_format(bytes, ImageFormat::Jpeg)
        .map(|img| img.to_rgb8())
        .map_err(|e| Error::Codec { bytes: bytes.len(), detail: e.to_string() })
}

/// Real JPEG compression of every image in the batch.
///
/// The result is a fresh tensor with no autograd history, so the derivative
/// of anything downstream with respect to `img` is zero through this op.
pub fn real_jpeg(img: &Tensor, quality: u32) -> Result<Tensor> {
    real_jpeg_with_dump(img, quality, None)
}

/// As [`real_jpeg`], optionally writing each compressed stream to
/// `dump_dir/jpeg_{index}.jpg`.
pub fn real_jpeg_with_dump(img: &Tensor, quality: u32, dump_dir: Option<&Path>) -> Result<Tensor> {
    check_quality(quality)?;
    let size = img.size();
    if size.len() != 4 || size[1] != 3 {
        return Err(Error::Shape(format!("real_jpeg expects [B, 3, H, W], got {size:?}")));
    }
    let (b, h, w) = (size[0], size[2], size[3]);
    let mut out = Vec::with_capacity(b as usize);
    for i in 0..b {
        let rgb = tensor_to_rgb_image(&img.get(i).detach())?;
        let bytes = encode_jpeg(rgb.as_raw(), w as u16, h as u16, quality)?;
        if let Some(dir) = dump_dir {
            let path = dir.join(format!("jpeg_{i}.jpg"));
            std::fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        }
        let decoded = decode_jpeg(&bytes)?;
        out.push(rgb_image_to_tensor(&decoded));
    }
    Ok(Tensor::stack(&out, 0).to_kind(img.kind()).to_device(img.device()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SurrogateKind {
    JpegMask,
    JpegSs,
}

pub const MASK_LUMA: usize = 5;
pub const MASK_CHROMA: usize = 3;

/// Keep-mask of shape `[3, 8, 8]`: 5x5 low frequencies on Y, 3x3 on Cb/Cr.
pub fn mask_pattern() -> [[[bool; 8]; 8]; 3] {
    let mut m = [[[false; 8]; 8]; 3];
    for (c, plane) in m.iter_mut().enumerate() {
        let keep = if c == 0 { MASK_LUMA } else { MASK_CHROMA };
        for (r, row) in plane.iter_mut().enumerate() {
            for (col, v) in row.iter_mut().enumerate() {
                *v = r < keep && col < keep;
            }
        }
    }
    m
}

fn per_channel_blocks(values: &[f64; 192], like: &Tensor) -> Tensor {
    Tensor::from_slice(values.as_slice())
        .to_kind(like.kind())
        .to_device(like.device())
        .view([1, 3, 1, 1, 8, 8])
}

/// Zeroes every DCT coefficient outside the low-frequency keep region.
/// Linear, so its Jacobian is the map itself.
pub fn jpeg_mask(img: &Tensor) -> Result<Tensor> {
    check_blockable(img)?;
    let mut mask = [0.0f64; 192];
    for (c, plane) in mask_pattern().iter().enumerate() {
        for (r, row) in plane.iter().enumerate() {
            for (col, &keep) in row.iter().enumerate() {
                mask[c * 64 + r * 8 + col] = if keep { 1.0 } else { 0.0 };
            }
        }
    }
    let coef = dct_blocks(&to_blocks(&rgb_to_ycbcr_tensor(img))?);
    let kept = coef * per_channel_blocks(&mask, img);
    Ok(ycbcr_to_rgb_tensor(&from_blocks(&idct_blocks(&kept))))
}

/// Piecewise rounding surrogate: `x^3` for `|x| < 0.5`, `x` otherwise.
pub fn jpeg_ss_quantize(x: f64) -> f64 {
    if x.abs() < 0.5 {
        x * x * x
    } else {
        x
    }
}

/// Derivative of [`jpeg_ss_quantize`]; at `|x| = 0.5` the cubic branch's
/// slope is used.
pub fn jpeg_ss_quantize_grad(x: f64) -> f64 {
    if x.abs() <= 0.5 {
        3.0 * x * x
    } else {
        1.0
    }
}

/// Elementwise tensor form of [`jpeg_ss_quantize`] with the same gradient
/// convention at the branch point.
pub fn jpeg_ss_quantize_tensor(x: &Tensor) -> Tensor {
    let abs = x.abs();
    let cubic = x * x * x;
    let inside = abs.le(0.5);
    let base = cubic.where_self(&inside, x);
    // at |x| == 0.5 the value comes from the identity branch, slope from the cubic
    let boundary = abs.eq(0.5);
    let fix = (x - &cubic).detach().where_self(&boundary, &x.zeros_like());
    base + fix
}

/// DCT, table-normalized `jpeg_ss_quantize`, rescale and inverse DCT on all
/// three YCbCr channels without chroma subsampling.
pub fn jpeg_ss(img: &Tensor, quality: u32) -> Result<Tensor> {
    check_blockable(img)?;
    let tables = quality_to_tables(quality)?;
    let mut steps = [0.0f64; 192];
    for c in 0..3 {
        let table = if c == 0 { &tables.luma } else { &tables.chroma };
        for i in 0..64 {
            steps[c * 64 + i] = table[i] as f64 / LEVEL_SCALE;
        }
    }
    let steps = per_channel_blocks(&steps, img);
    let coef = dct_blocks(&to_blocks(&rgb_to_ycbcr_tensor(img))?);
    let quantized = jpeg_ss_quantize_tensor(&(coef / &steps)) * &steps;
    Ok(ycbcr_to_rgb_tensor(&from_blocks(&idct_blocks(&quantized))))
}

pub fn surrogate(kind: SurrogateKind, img: &Tensor, quality: u32) -> Result<Tensor> {
    match kind {
        SurrogateKind::JpegMask => jpeg_mask(img),
        SurrogateKind::JpegSs => jpeg_ss(img, quality),
    }
}

/// Level-scaled units of a normalized DCT coefficient.
pub fn level_scale() -> f64 {
    LEVEL_SCALE
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::{block_dct, psnr, to_f64_vec, uniform_tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use tch::{Device, Kind};

    fn rand_images(seed: u64, shape: &[i64]) -> Tensor {
        uniform_tensor(shape, &mut ChaCha8Rng::seed_from_u64(seed)).to_kind(Kind::Double)
    }

    fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
        to_f64_vec(&(a - b).abs()).into_iter().fold(0.0, f64::max)
    }

    #[test]
    fn q50_is_base_tables() {
        let t = quality_to_tables(50).unwrap();
        assert_eq!(t.luma, BASE_LUMA);
        assert_eq!(t.chroma, BASE_CHROMA);
    }

    #[test]
    fn q100_is_all_ones() {
        let t = quality_to_tables(100).unwrap();
        assert!(t.luma.iter().chain(t.chroma.iter()).all(|&v| v == 1));
    }

    #[test]
    fn tables_monotone_in_quality() {
        for q in 1..100u32 {
            let (a, b) = (quality_to_tables(q).unwrap(), quality_to_tables(q + 1).unwrap());
            assert!(a.luma.iter().zip(&b.luma).all(|(x, y)| x >= y), "luma q={q}");
            assert!(a.chroma.iter().zip(&b.chroma).all(|(x, y)| x >= y), "chroma q={q}");
            assert!(a.luma.iter().all(|&v| (1..=255).contains(&v)));
        }
    }

    #[test]
    fn quality_out_of_range() {
        assert!(quality_to_tables(0).is_err());
        assert!(quality_to_tables(101).is_err());
        let x = Tensor::zeros([1, 3, 8, 8], (Kind::Float, Device::Cpu));
        assert!(real_jpeg(&x, 0).is_err());
        assert!(jpeg_ss(&x, 101).is_err());
    }

    #[test]
    fn ss_quantize_values() {
        assert!((jpeg_ss_quantize(0.4) - 0.064).abs() < 1e-15);
        assert_eq!(jpeg_ss_quantize(0.0), 0.0);
        assert_eq!(jpeg_ss_quantize(1.0), 1.0);
        assert_eq!(jpeg_ss_quantize(-2.0), -2.0);
        assert_eq!(jpeg_ss_quantize(0.5), 0.5);
        assert_eq!(jpeg_ss_quantize(-0.5), -0.5);
        let h = 1e-6;
        let fd = (jpeg_ss_quantize(0.3 + h) - jpeg_ss_quantize(0.3 - h)) / (2.0 * h);
        assert!((fd - 0.27).abs() < 1e-4);
        assert!((jpeg_ss_quantize_grad(0.3) - 0.27).abs() < 1e-12);
        assert_eq!(jpeg_ss_quantize_grad(0.5), 0.75);
    }

    #[test]
    fn ss_quantize_tensor_matches_scalar_and_branch_gradient() {
        let xs = [-2.0, -0.5, -0.3, 0.0, 0.4, 0.5, 0.7];
        let x = Tensor::from_slice(&xs).set_requires_grad(true);
        let y = jpeg_ss_quantize_tensor(&x);
        let vals = to_f64_vec(&y);
        for (v, &xi) in vals.iter().zip(&xs) {
            assert!((v - jpeg_ss_quantize(xi)).abs() < 1e-15);
        }
        y.sum(Kind::Double).backward();
        let g = to_f64_vec(&x.grad());
        for (gi, &xi) in g.iter().zip(&xs) {
            assert!((gi - jpeg_ss_quantize_grad(xi)).abs() < 1e-12, "x={xi}");
        }
    }

    #[test]
    fn mask_keeps_43_coefficients() {
        let kept: Vec<usize> = mask_pattern()
            .iter()
            .map(|p| p.iter().flatten().filter(|&&k| k).count())
            .collect();
        assert_eq!(kept, vec![25, 9, 9]);
        // measured through the operator: per-coefficient impulses in YCbCr
        let mut surviving = 0;
        for c in 0..3 {
            for i in 0..64 {
                let mut coef = vec![0.0f64; 192];
                coef[c * 64 + i] = 1.0;
                let coef = Tensor::from_slice(&coef).view([1, 3, 8, 8]);
                let ycc = crate::imaging::block_idct(&coef).unwrap();
                let rgb = ycbcr_to_rgb_tensor(&ycc);
                let out = rgb_to_ycbcr_tensor(&jpeg_mask(&rgb).unwrap());
                let back = to_f64_vec(&block_dct(&out).unwrap());
                if back.iter().any(|v| v.abs() > 1e-9) {
                    surviving += 1;
                }
            }
        }
        assert_eq!(surviving, 43);
    }

    #[test]
    fn mask_constant_idempotent_linear() {
        let c = Tensor::full([1, 3, 16, 16], 0.3, (Kind::Double, Device::Cpu));
        assert!(max_abs_diff(&jpeg_mask(&c).unwrap(), &c) < 1e-5);
        let x = rand_images(1, &[2, 3, 16, 16]);
        let y = rand_images(2, &[2, 3, 16, 16]);
        let once = jpeg_mask(&x).unwrap();
        assert!(max_abs_diff(&jpeg_mask(&once).unwrap(), &once) < 1e-5);
        let lhs = jpeg_mask(&(&x * 0.7 + &y * -1.3)).unwrap();
        let rhs = jpeg_mask(&x).unwrap() * 0.7 + jpeg_mask(&y).unwrap() * -1.3;
        assert!(max_abs_diff(&lhs, &rhs) < 1e-5);
    }

    #[test]
    fn surrogates_reject_bad_geometry() {
        let x = Tensor::zeros([1, 3, 12, 16], (Kind::Float, Device::Cpu));
        assert!(matches!(jpeg_mask(&x), Err(Error::Geometry(_))));
        assert!(matches!(jpeg_ss(&x, 50), Err(Error::Geometry(_))));
    }

    #[test]
    fn ss_zero_image() {
        let z = Tensor::zeros([1, 3, 8, 8], (Kind::Double, Device::Cpu));
        assert_eq!(max_abs_diff(&jpeg_ss(&z, 50).unwrap(), &z), 0.0);
    }

    /// Scalar re-implementation of one coefficient's trip through the
    /// surrogate.
    fn scalar_pipeline(value: f64, step: f64) -> f64 {
        jpeg_ss_quantize(value / step) * step
    }

    #[test]
    fn ss_single_coefficient_matches_scalar_oracle() {
        let tables = quality_to_tables(50).unwrap();
        // luma coefficient (1, 2), set to 0.4 of its table step in 8-bit units
        let idx = 8 + 2;
        let step = tables.luma[idx] as f64;
        let mut coef = vec![0.0f64; 192];
        coef[idx] = 0.4 * step / LEVEL_SCALE;
        let ycc = crate::imaging::block_idct(&Tensor::from_slice(&coef).view([1, 3, 8, 8])).unwrap();
        let out = jpeg_ss(&ycbcr_to_rgb_tensor(&ycc), 50).unwrap();
        let back = to_f64_vec(&block_dct(&rgb_to_ycbcr_tensor(&out)).unwrap());
        let expected = scalar_pipeline(0.4 * step, step) / LEVEL_SCALE;
        assert!((back[idx] - expected).abs() < 1e-9);
        assert!((back[idx] * LEVEL_SCALE / step - 0.064).abs() < 1e-9);
        for (i, v) in back.iter().enumerate() {
            if i != idx {
                assert!(v.abs() < 1e-9, "coefficient {i} = {v}");
            }
        }
    }

    #[test]
    fn ss_large_coefficient_passes() {
        let tables = quality_to_tables(50).unwrap();
        let mut coef = vec![0.0f64; 192];
        coef[64 + 1] = 1.5 * tables.chroma[1] as f64 / LEVEL_SCALE;
        let ycc = crate::imaging::block_idct(&Tensor::from_slice(&coef).view([1, 3, 8, 8])).unwrap();
        let rgb = ycbcr_to_rgb_tensor(&ycc);
        let out = jpeg_ss(&rgb, 50).unwrap();
        assert!(max_abs_diff(&out, &rgb) < 1e-9);
    }

    fn smooth_image(seed: u64) -> Tensor {
        // low-frequency structure plus mild texture, a stand-in for a photo
        let x = rand_images(seed, &[1, 3, 8, 8]);
        let up = x.upsample_bilinear2d([64, 64], false, None, None);
        let detail = rand_images(seed + 100, &[1, 3, 64, 64]) * 0.05;
        (up * 0.8 + detail).clamp(-1.0, 1.0)
    }

    #[test]
    fn real_jpeg_deterministic_and_faithful_at_q100() {
        let img = smooth_image(4).to_kind(Kind::Float);
        let a = real_jpeg(&img, 100).unwrap();
        let b = real_jpeg(&img, 100).unwrap();
        assert_eq!(max_abs_diff(&a, &b), 0.0);
        let rgb = tensor_to_rgb_image(&img.get(0)).unwrap();
        let s1 = encode_jpeg(rgb.as_raw(), 64, 64, 100).unwrap();
        let s2 = encode_jpeg(rgb.as_raw(), 64, 64, 100).unwrap();
        assert_eq!(s1, s2);
        assert!(psnr(&img, &a).unwrap() > 30.0);
        let lo = real_jpeg(&img, 10).unwrap();
        assert!(to_f64_vec(&lo).iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn real_jpeg_has_no_gradient_path() {
        let img = smooth_image(5).to_kind(Kind::Float).set_requires_grad(true);
        let out = real_jpeg(&img, 50).unwrap();
        assert!(!out.requires_grad());
        // A downstream scalar mixing the stop-gradient output with a live path
        let loss = (&out * 3.0).sum(Kind::Float) + (&img * 0.0).sum(Kind::Float);
        loss.backward();
        assert_eq!(to_f64_vec(&img.grad()).iter().fold(0.0f64, |m, v| m.max(v.abs())), 0.0);
    }

    #[test]
    fn real_jpeg_dump_writes_streams() {
        let dir = tempfile::tempdir().unwrap();
        let img = smooth_image(6).to_kind(Kind::Float).repeat([2, 1, 1, 1]);
        let _ = real_jpeg_with_dump(&img, 75, Some(dir.path())).unwrap();
        let bytes = std::fs::read(dir.path().join("jpeg_1.jpg")).unwrap();
        assert_eq!(&bytes[..2], &[0xFF, 0xD8]);
    }

    #[test]
    fn decode_garbage_reports_stream_length() {
        match decode_jpeg(&[0xFF, 0xD8, 0x00, 0x01]) {
            Err(Error::Codec { bytes, .. }) => assert_eq!(bytes, 4),
            other => panic!("expected codec error, got {other:?}"),
        }
    }
}
