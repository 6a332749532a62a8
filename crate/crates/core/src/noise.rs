//! Noise layers, the noise pool and per-mini-batch noise selection.

use std::fmt;
use std::str::FromStr;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use tch::{Kind, Tensor};

use crate::error::{Error, Result};
use crate::imaging::gaussian_window;
use crate::jpeg::{check_quality, jpeg_mask, jpeg_ss, real_jpeg};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseSpec {
    Identity,
    RealJpeg { quality: u32 },
    JpegMask,
    JpegSs { quality: u32 },
    Crop { p: f64 },
    Cropout { p: f64 },
    Dropout { p: f64 },
    Gaussian { sigma: f64 },
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            NoiseSpec::RealJpeg { quality } | NoiseSpec::JpegSs { quality } => {
                check_quality(quality)?;
            }
            NoiseSpec::Crop { p } | NoiseSpec::Cropout { p } | NoiseSpec::Dropout { p } => {
                check_ratio(p)?;
            }
            NoiseSpec::Gaussian { sigma } => check_sigma(sigma)?,
            NoiseSpec::Identity | NoiseSpec::JpegMask => {}
        }
        Ok(())
    }

    /// Short tag for logs and tables.
    pub fn kind_name(&self) -> &'static str {
        match self {
            NoiseSpec::Identity => "identity",
            NoiseSpec::RealJpeg { .. } => "jpeg",
            NoiseSpec::JpegMask => "jpegmask",
            NoiseSpec::JpegSs { .. } => "jpegss",
            NoiseSpec::Crop { .. } => "crop",
            NoiseSpec::Cropout { .. } => "cropout",
            NoiseSpec::Dropout { .. } => "dropout",
            NoiseSpec::Gaussian { .. } => "gf",
        }
    }

    pub fn needs_cover(&self) -> bool {
        matches!(self, NoiseSpec::Cropout { .. } | NoiseSpec::Dropout { .. })
    }

    /// Whether gradients reach the encoded image through this layer.
    pub fn is_differentiable(&self) -> bool {
        !matches!(self, NoiseSpec::RealJpeg { .. })
    }
}

impl fmt::Display for NoiseSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            NoiseSpec::Identity => write!(f, "identity"),
            NoiseSpec::RealJpeg { quality } => write!(f, "jpeg:{quality}"),
            NoiseSpec::JpegMask => write!(f, "jpegmask"),
            NoiseSpec::JpegSs { quality } => write!(f, "jpegss:{quality}"),
            NoiseSpec::Crop { p } => write!(f, "crop:{p:?}"),
            NoiseSpec::Cropout { p } => write!(f, "cropout:{p:?}"),
            NoiseSpec::Dropout { p } => write!(f, "dropout:{p:?}"),
            NoiseSpec::Gaussian { sigma } => write!(f, "gf:{sigma:?}"),
        }
    }
}

impl FromStr for NoiseSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (kind, arg) = match s.split_once(':') {
            Some((k, a)) => (k.trim(), Some(a.trim())),
            None => (s, None),
        };
        let bad = || Error::Config(format!("malformed noise spec {s:?}"));
        let int = |a: Option<&str>| -> Result<u32> { a.ok_or_else(bad)?.parse().map_err(|_| bad()) };
        let real = |a: Option<&str>| -> Result<f64> { a.ok_or_else(bad)?.parse().map_err(|_| bad()) };
        let spec = match (kind, arg) {
            ("identity", None) => NoiseSpec::Identity,
            ("jpegmask", None) => NoiseSpec::JpegMask,
            ("jpeg", a) => NoiseSpec::RealJpeg { quality: int(a)? },
            ("jpegss", a) => NoiseSpec::JpegSs { quality: int(a)? },
            ("crop", a) => NoiseSpec::Crop { p: real(a)? },
            ("cropout", a) => NoiseSpec::Cropout { p: real(a)? },
            ("dropout", a) => NoiseSpec::Dropout { p: real(a)? },
            ("gf", a) => NoiseSpec::Gaussian { sigma: real(a)? },
            _ => return Err(bad()),
        };
        spec.validate().map_err(|e| Error::Config(format!("{s:?}: {e}")))?;
        Ok(spec)
    }
}

fn check_ratio(p: f64) -> Result<()> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::Parameter(format!("ratio {p} outside (0, 1]")));
    }
    Ok(())
}

fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Parameter(format!("sigma {sigma} must be positive")));
    }
    Ok(())
}

/// Candidate noise layers with sampling weights summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisePool {
    entries: Vec<NoiseSpec>,
    weights: Vec<f64>,
}

impl NoisePool {
    pub fn new(entries: Vec<NoiseSpec>, weights: Vec<f64>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Parameter("noise pool is empty".into()));
        }
        if weights.len() != entries.len() {
            return Err(Error::Parameter(format!(
                "{} weights for {} noise entries",
                weights.len(),
                entries.len()
            )));
        }
        if weights.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
            return Err(Error::Parameter(format!("pool weights must be positive: {weights:?}")));
        }
        for e in &entries {
            e.validate()?;
        }
        let total: f64 = weights.iter().sum();
        let weights = weights.into_iter().map(|w| w / total).collect();
        Ok(NoisePool { entries, weights })
    }

    pub fn uniform(entries: Vec<NoiseSpec>) -> Result<Self> {
        let n = entries.len();
        Self::new(entries, vec![1.0; n])
    }

    pub fn single(spec: NoiseSpec) -> Result<Self> {
        Self::uniform(vec![spec])
    }

    /// JPEG-Mask, real JPEG at Q=50 and identity, equally weighted.
    pub fn mbrs_default() -> Self {
        Self::uniform(vec![
            NoiseSpec::JpegMask,
            NoiseSpec::RealJpeg { quality: 50 },
            NoiseSpec::Identity,
        ])
        .expect("default pool is valid")
    }

    pub fn entries(&self) -> &[NoiseSpec] {
        &self.entries
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl fmt::Display for NoisePool {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let uniform = self.weights.iter().all(|w| (w - self.weights[0]).abs() < 1e-12);
        for (i, (e, w)) in self.entries.iter().zip(&self.weights).enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            if uniform {
                write!(f, "{e}")?;
            } else {
                write!(f, "{e}@{w:?}")?;
            }
        }
        Ok(())
    }
}

/// Comma-separated specs, each optionally weighted as `spec@weight`.
impl FromStr for NoisePool {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut entries = Vec::new();
        let mut weights = Vec::new();
        for item in s.split(',').map(str::trim).filter(|i| !i.is_empty()) {
            let (spec, weight) = match item.split_once('@') {
                Some((spec, w)) => (
                    spec,
                    w.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::Config(format!("bad pool weight in {item:?}")))?,
                ),
                None => (item, 1.0),
            };
            entries.push(spec.parse()?);
            weights.push(weight);
        }
        NoisePool::new(entries, weights).map_err(|e| Error::Config(e.to_string()))
    }
}

impl serde::Serialize for NoisePool {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> serde::Deserialize<'de> for NoisePool {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        text.parse().map_err(serde::de::Error::custom)
    }
}

/// Draws the one noise layer used for an entire mini-batch.
pub fn mbrs_sample<'a>(pool: &'a NoisePool, rng: &mut impl Rng) -> &'a NoiseSpec {
    if pool.len() == 1 {
        return &pool.entries[0];
    }
    let dist = WeightedIndex::new(&pool.weights).expect("pool weights validated");
    &pool.entries[dist.sample(rng)]
}

pub fn identity(en: &Tensor) -> Tensor {
    en.shallow_clone()
}

/// Normalized 1-D Gaussian taps, width `2 * ceil(2 sigma) + 1`.
pub fn gaussian_kernel(sigma: f64) -> Result<Vec<f64>> {
    check_sigma(sigma)?;
    let radius = (2.0 * sigma).ceil() as i64;
    Ok(gaussian_window(2 * radius + 1, sigma))
}

/// Separable per-channel Gaussian blur with reflect padding.
pub fn gaussian_filter(en: &Tensor, sigma: f64) -> Result<Tensor> {
    let taps = gaussian_kernel(sigma)?;
    let size = en.size();
    if size.len() != 4 {
        return Err(Error::Shape(format!("expected [B, C, H, W], got {size:?}")));
    }
    let c = size[1];
    let k = taps.len() as i64;
    let radius = k / 2;
    if radius >= size[2] || radius >= size[3] {
        return Err(Error::Geometry(format!(
            "blur radius {radius} too large for {}x{}",
            size[2], size[3]
        )));
    }
    let t = Tensor::from_slice(&taps).to_kind(en.kind()).to_device(en.device());
    let horiz = t.view([1, 1, 1, k]).repeat([c, 1, 1, 1]);
    let vert = t.view([1, 1, k, 1]).repeat([c, 1, 1, 1]);
    let padded = en.reflection_pad2d([radius, radius, radius, radius]);
    let out = padded
        .conv2d(&horiz, None::<Tensor>, [1, 1], [0, 0], [1, 1], c)
        .conv2d(&vert, None::<Tensor>, [1, 1], [0, 0], [1, 1], c);
    Ok(out)
}

/// Side lengths of the kept rectangle for an area ratio `p`.
pub fn crop_size(height: i64, width: i64, p: f64) -> (i64, i64) {
    let side = p.sqrt();
    let h = ((side * height as f64).round() as i64).clamp(1, height);
    let w = ((side * width as f64).round() as i64).clamp(1, width);
    (h, w)
}

/// One `[B, 1, H, W]` mask per batch with a uniformly placed rectangle of
/// ones per image.
fn rectangle_mask(like: &Tensor, p: f64, rng: &mut impl Rng) -> Result<Tensor> {
    check_ratio(p)?;
    let size = like.size();
    if size.len() != 4 {
        return Err(Error::Shape(format!("expected [B, C, H, W], got {size:?}")));
    }
    let (b, h, w) = (size[0], size[2], size[3]);
    let (ch, cw) = crop_size(h, w, p);
    let mut mask = vec![0f32; (b * h * w) as usize];
    for i in 0..b {
        let top = rng.gen_range(0..=h - ch);
        let left = rng.gen_range(0..=w - cw);
        for y in top..top + ch {
            let row = (i * h * w + y * w) as usize;
            mask[row + left as usize..row + (left + cw) as usize].fill(1.0);
        }
    }
    Ok(Tensor::from_slice(&mask).view([b, 1, h, w]).to_kind(like.kind()).to_device(like.device()))
}

fn check_pair(en: &Tensor, co: &Tensor) -> Result<()> {
    if en.size() != co.size() {
        return Err(Error::Shape(format!(
            "encoded {:?} vs cover {:?}",
            en.size(),
            co.size()
        )));
    }
    Ok(())
}

fn blend(en: &Tensor, other: &Tensor, keep: &Tensor) -> Tensor {
    en * keep + other * (keep.ones_like() - keep)
}

/// Keeps a random `p`-area rectangle and pads the rest with white.
pub fn crop(en: &Tensor, p: f64, rng: &mut impl Rng) -> Result<Tensor> {
    let keep = rectangle_mask(en, p, rng)?;
    Ok(blend(en, &en.ones_like(), &keep))
}

/// Keeps a random `p`-area rectangle of the encoded image; the rest comes
/// from the cover.
pub fn cropout(en: &Tensor, co: &Tensor, p: f64, rng: &mut impl Rng) -> Result<Tensor> {
    check_pair(en, co)?;
    let keep = rectangle_mask(en, p, rng)?;
    Ok(blend(en, &co.detach(), &keep))
}

/// Keeps each encoded pixel with probability `p` (all channels together),
/// otherwise substitutes the cover pixel.
pub fn dropout(en: &Tensor, co: &Tensor, p: f64, rng: &mut impl Rng) -> Result<Tensor> {
    check_pair(en, co)?;
    check_ratio(p)?;
    let size = en.size();
    let (b, h, w) = (size[0], size[2], size[3]);
    let mask: Vec<f32> = (0..b * h * w).map(|_| if rng.gen::<f64>() < p { 1.0 } else { 0.0 }).collect();
    let keep = Tensor::from_slice(&mask)
        .view([b, 1, h, w])
        .to_kind(en.kind())
        .to_device(en.device());
    Ok(blend(en, &co.detach(), &keep))
}

/// Dispatches a noise spec over a batch; the output shape equals the input
/// shape for every kind.
pub fn apply_noise(spec: &NoiseSpec, en: &Tensor, co: Option<&Tensor>, rng: &mut impl Rng) -> Result<Tensor> {
    spec.validate()?;
    let cover = || {
        co.ok_or_else(|| Error::Contract(format!("{spec} needs the cover image")))
    };
    match *spec {
        NoiseSpec::Identity => Ok(identity(en)),
        NoiseSpec::RealJpeg { quality } => real_jpeg(en, quality),
        NoiseSpec::JpegMask => jpeg_mask(en),
        NoiseSpec::JpegSs { quality } => jpeg_ss(en, quality),
        NoiseSpec::Crop { p } => crop(en, p, rng),
        NoiseSpec::Cropout { p } => cropout(en, cover()?, p, rng),
        NoiseSpec::Dropout { p } => dropout(en, cover()?, p, rng),
        NoiseSpec::Gaussian { sigma } => gaussian_filter(en, sigma),
    }
}

/// Fraction of pixels equal to white in every channel.
pub fn white_fraction(img: &Tensor) -> f64 {
    let white = img.eq(1.0).all_dims([1].as_slice(), false);
    white.to_kind(Kind::Double).mean(Kind::Double).double_value(&[])
}
